// Every attribution method on one document of a trained toy classifier,
// with the completeness of IG and the efficiency of KernelSHAP checked.

use attrib_robust::attribution::{attribute, unk_baseline, Method, MethodParams};
use attrib_robust::classifier::{init_params, train, ModelConfig, TextModel, TrainConfig};
use attrib_robust::metrics::ranking;
use attrib_robust::text::{generate_synthetic, split_dataset, SyntheticSpec, VocabConfig};

pub struct Gaps {
    pub ig_completeness: f64,
    pub shap_efficiency: f64,
}

pub fn run_example() -> attrib_robust::Result<Gaps> {
    let corpus = generate_synthetic(
        &SyntheticSpec {
            n_docs: 400,
            ..Default::default()
        },
        5,
    )?;
    let (split, vocab) = split_dataset(&corpus, (0.8, 0.2), 0.1, 5, VocabConfig::default(), 64)?;
    let config = ModelConfig {
        vocab_size: vocab.len(),
        classes: 2,
        fine_tune_encoder: true,
        ..Default::default()
    };
    let tc = TrainConfig {
        learning_rates: vec![1e-2],
        max_epochs: 8,
        patience: 3,
        ..Default::default()
    };
    let (model, _) = train(&init_params(&config, 1, 2)?, &split, &tc)?;

    let doc = &split.test[0];
    let x = model.embed(&doc.ids)?;
    let class = model.predict_ids(&doc.ids)?;
    let full = model.logits_from_embeddings(&x)?[class];
    let empty = model.logits_from_embeddings(&unk_baseline(&model, doc.len())?)?[class];
    println!("document: {}", doc.tokens.join(" "));

    let params = MethodParams {
        ig_steps: 256,
        ..Default::default()
    };
    let mut gaps = Gaps {
        ig_completeness: f64::NAN,
        shap_efficiency: f64::NAN,
    };
    for method in Method::ALL {
        let out = attribute(&model, doc, method, &params, 7)?;
        let top: Vec<&str> = ranking(&out.scalar_scores)
            .into_iter()
            .take(3)
            .map(|i| doc.tokens[i].as_str())
            .collect();
        println!("{:>3}: top tokens {:?}", method.tag(), top);
        match method {
            Method::IntegratedGradients => {
                let sum: f64 = out.vector_scores.as_ref().map_or(0.0, |v| v.data().iter().sum());
                gaps.ig_completeness = (sum - (full - empty)).abs();
            }
            Method::KernelShap => {
                let sum: f64 = out.scalar_scores.iter().sum();
                gaps.shap_efficiency = (sum - (full - empty)).abs();
            }
            _ => {}
        }
    }
    println!(
        "f(x) - f(baseline) = {:.4}; IG gap {:.2e}; SHAP gap {:.2e}",
        full - empty,
        gaps.ig_completeness,
        gaps.shap_efficiency
    );
    Ok(gaps)
}

#[allow(dead_code)]
fn main() -> attrib_robust::Result<()> {
    run_example().map(|_| ())
}
