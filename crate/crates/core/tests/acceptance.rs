//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use attrib_robust::attribution::{
    exact_shapley, integrated_gradients, kernel_shap, shap_budget, unk_baseline, AttributionOutput, Method, Reduction,
};
use attrib_robust::classifier::{init_params, EncoderType, ModelConfig, ScoreTarget, TextModel, Variant};
use attrib_robust::config::{ExperimentConfig, DEFAULT_CONFIG};
use attrib_robust::harness::{
    assemble_report, run_test_diffinit, run_test_untrained, Experiment, Provenance, Sections, TestReport,
};
use attrib_robust::metrics::jaccard_at_k;
use attrib_robust::report::{records_from_csv, within_units_count, ReportTable};
use attrib_robust::seed;
use attrib_robust::tensor::{finite_difference_gradient, max_relative_error};
use attrib_robust::text::TokenizedDoc;
use rand::Rng;

type Outcome = Result<String, String>;

const REAL: [&str; 4] = ["VN", "SG", "IG", "SHP"];

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures")
}

struct FullRun {
    _dir: tempfile::TempDir,
    exp: Experiment,
    report: TestReport,
    first: attrib_robust::classifier::ModelCheckpoint,
}

/// The bundled default configuration run end to end once.
fn full_run() -> &'static Result<FullRun, String> {
    static RUN: OnceLock<Result<FullRun, String>> = OnceLock::new();
    RUN.get_or_init(|| {
        let go = || -> attrib_robust::Result<FullRun> {
            let dir = tempfile::tempdir().expect("temporary directory");
            let cfg = ExperimentConfig::from_toml(DEFAULT_CONFIG)?;
            let exp = Experiment::prepare(cfg.clone(), dir.path())?;
            let sections = Sections {
                diffinit: Some(run_test_diffinit(&exp)?),
                untrained: Some(run_test_untrained(&exp)?),
            };
            let report = assemble_report(&exp, &sections, Provenance::new(&cfg, DEFAULT_CONFIG.into()))?;
            let first = exp.variants(0)?.first;
            Ok(FullRun {
                _dir: dir,
                exp,
                report,
                first,
            })
        };
        go().map_err(|e| format!("full run failed: {e}"))
    })
}

fn c1_gradients() -> Outcome {
    let mut rng = seed::rng(101);
    let mut worst: f64 = 0.0;
    for i in 0..100u64 {
        let config = ModelConfig {
            vocab_size: 40,
            embed_dim: rng.random_range(4..=12),
            encoder_dim: rng.random_range(4..=12),
            hidden_units: rng.random_range(4..=24),
            classes: rng.random_range(2..=4),
            encoder_type: if i % 5 == 0 {
                EncoderType::None
            } else {
                EncoderType::SelfAttentionBlock
            },
            ..Default::default()
        };
        let model = init_params(&config, i, 1000 + i).map_err(|e| e.to_string())?;
        let len = rng.random_range(1..=12);
        let ids: Vec<usize> = (0..len).map(|_| rng.random_range(1..40)).collect();
        let x = model.embed_ids(&ids).map_err(|e| e.to_string())?;
        let class = rng.random_range(0..config.classes);
        let (_, g) = model.score_and_grad(&x, class, ScoreTarget::Logit).map_err(|e| e.to_string())?;
        let fd = finite_difference_gradient(|t| model.score(t, class, ScoreTarget::Logit), &x, 1e-5)
            .map_err(|e| e.to_string())?;
        worst = worst.max(max_relative_error(g.data(), fd.data(), 1e-4));
    }
    let msg = format!("max relative error {worst:.2e} over 100 random (model, doc) pairs");
    if worst < 1e-4 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn c2_ig_completeness() -> Outcome {
    let run = full_run().as_ref().map_err(Clone::clone)?;
    let model = &run.first;
    let mut worst_ratio: f64 = 0.0;
    for doc in run.exp.split.test.iter().take(50) {
        let out = integrated_gradients(model, doc, 512, ScoreTarget::Logit).map_err(|e| e.to_string())?;
        let x = model.embed(&doc.ids).map_err(|e| e.to_string())?;
        let b = unk_baseline(model, doc.len()).map_err(|e| e.to_string())?;
        let c = out.target_class;
        let delta = model.logits_from_embeddings(&x).map_err(|e| e.to_string())?[c]
            - model.logits_from_embeddings(&b).map_err(|e| e.to_string())?[c];
        let sum: f64 = out.vector_scores.as_ref().expect("vector scores").data().iter().sum();
        let allowed = 1e-2 * delta.abs() + 1e-6;
        worst_ratio = worst_ratio.max((sum - delta).abs() / allowed);
    }
    let msg = format!("worst |sum - delta| / tolerance = {worst_ratio:.3} on 50 trained-model docs at 512 steps");
    if worst_ratio <= 1.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn c3_shapley() -> Outcome {
    let run = full_run().as_ref().map_err(Clone::clone)?;
    let model = &run.first;
    let mut rng = seed::rng(303);
    let vocab = run.exp.vocab.len();
    let mut short_err: f64 = 0.0;
    for case in 0..50 {
        let len = rng.random_range(2..=10);
        let ids: Vec<usize> = (0..len).map(|_| rng.random_range(1..vocab)).collect();
        let doc = TokenizedDoc::from_ids(format!("s{case}"), ids, 0, &run.exp.vocab);
        let budget = (1usize << len) - 2;
        let k = kernel_shap(model, &doc, budget, case, ScoreTarget::Logit).map_err(|e| e.to_string())?;
        let e = exact_shapley(model, &doc, ScoreTarget::Logit).map_err(|e| e.to_string())?;
        for (a, b) in k.scalar_scores.iter().zip(&e) {
            short_err = short_err.max((a - b).abs());
        }
    }
    let mut worst_ratio: f64 = 0.0;
    let long_docs: Vec<&TokenizedDoc> = run.exp.split.test.iter().filter(|d| (12..=15).contains(&d.len())).take(10).collect();
    for doc in &long_docs {
        let k = kernel_shap(model, doc, shap_budget(doc.len()), 7, ScoreTarget::Logit).map_err(|e| e.to_string())?;
        let e = exact_shapley(model, doc, ScoreTarget::Logit).map_err(|e| e.to_string())?;
        let range = e.iter().cloned().fold(f64::MIN, f64::max) - e.iter().cloned().fold(f64::MAX, f64::min);
        let dev = k.scalar_scores.iter().zip(&e).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst_ratio = worst_ratio.max(dev / range.max(1e-12));
    }
    let msg = format!(
        "full enumeration max |error| {short_err:.2e} (50 docs, L<=10); sampled worst deviation {:.4} of range ({} docs, L 12-15)",
        worst_ratio,
        long_docs.len()
    );
    if short_err <= 1e-6 && worst_ratio < 0.05 && long_docs.len() == 10 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn ranked(doc_id: &str, tokens: &[&str], top: &[&str]) -> AttributionOutput {
    let mut scores = vec![0.0; tokens.len()];
    for (rank, t) in top.iter().enumerate() {
        let pos = tokens.iter().position(|x| x == t).expect("token present");
        scores[pos] = (top.len() - rank) as f64;
    }
    AttributionOutput {
        doc_id: doc_id.into(),
        method: Method::Vanilla,
        model: None,
        target_class: 0,
        vector_scores: None,
        scalar_scores: scores,
        reduction: Reduction::None,
        warning: None,
    }
}

fn c4_worked_examples() -> Outcome {
    let cases: [(&str, &[&str], &[&str], f64); 3] = [
        (
            "[CLS] at heart the movie is a def ##tly wrought suspense yarn whose richer shadings work as coloring rather than substance [SEP]",
            &["substance", "rather", "at", "yarn", "coloring", "movie"],
            &["heart", "##tly", "suspense", "at", "yarn", "def"],
            0.2,
        ),
        (
            "[CLS] an infectious cultural fable with a tasty balance of family drama and fren ##etic comedy [SEP]",
            &["fable", "infectious", "cultural", "balance", "an"],
            &["cultural", "balance", "infectious", "fable", "an"],
            1.0,
        ),
        (
            "nokia shares hit 13 . 21 euros on friday , down 50 percent from the start of the year in part because of the slow introduction of touch - screen models",
            &[",", ".", "down", "friday", "shares", "euros", "nokia", "hit"],
            &[",", ".", "down", "euros", "friday", "hit", "shares", "nokia"],
            1.0,
        ),
    ];
    let mut got = Vec::new();
    let mut ok = true;
    for (i, (text, a, b, want)) in cases.iter().enumerate() {
        let tokens: Vec<&str> = text.split(' ').collect();
        let j = jaccard_at_k(&ranked("x", &tokens, a), &ranked("x", &tokens, b), 25.0).map_err(|e| e.to_string())?;
        ok &= j.value == *want;
        got.push(format!("example {}: {}", i + 1, 100.0 * j.value));
    }
    let msg = got.join(", ");
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn within_from_fixtures(k: u32) -> Result<BTreeMap<String, String>, String> {
    let load = |name: &str| ReportTable::load(&fixtures().join(name)).map_err(|e| e.to_string());
    let a = load(&format!("jaccard{k}_diffinit.csv"))?;
    let b = load(&format!("jaccard{k}_untrained.csv"))?;
    Ok(within_units_count(&a, &b, 10.0)
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|c| (c.method.clone(), c.to_string()))
        .collect())
}

fn c5_within_units() -> Outcome {
    let expect = |k: u32, want: [&str; 4]| -> (bool, String) {
        match within_from_fixtures(k) {
            Ok(got) => {
                let ok = REAL.iter().zip(want).all(|(m, w)| got.get(*m).map(String::as_str) == Some(w));
                let shown: Vec<String> = REAL.iter().map(|m| format!("{m} {}", got.get(*m).map_or("-", |s| s))).collect();
                (ok, format!("K={k}: {} (expected {})", shown.join(", "), want.join(", ")))
            }
            Err(e) => (false, format!("K={k}: no inputs ({e})")),
        }
    };
    let (ok25, m25) = expect(25, ["14/16", "12/16", "7/16", "0/16"]);
    let (ok10, m10) = expect(10, ["13/16", "11/16", "6/16", "0/16"]);
    let msg = format!("{m25}; {m10}");
    if ok25 && ok10 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn c6_infidelity_direction() -> Outcome {
    let run = full_run().as_ref().map_err(Clone::clone)?;
    let r = &run.report;
    let acc = r.table("accuracy").and_then(|t| t.get("FirstInit", "rep0")).unwrap_or(0.0);
    let m = |name: &str| r.mean_infidelity(Variant::FirstInit, name).unwrap_or(f64::NAN);
    let rnd = m("RND");
    let vals: Vec<(&str, f64)> = REAL.iter().map(|n| (*n, m(n))).collect();
    let shp = m("SHP");
    let rnd_ok = vals.iter().all(|(_, v)| rnd - v >= 5.0);
    let shp_ok = vals.iter().filter(|(n, _)| *n != "SHP").all(|(_, v)| v - shp >= 5.0);
    let size_ok = run.exp.corpus.records.len() >= 2000 && run.exp.eval_docs.len() >= 200;
    let shown: Vec<String> = vals.iter().map(|(n, v)| format!("{n} {v:.1}")).collect();
    let msg = format!(
        "FirstInit accuracy {acc:.3}; mean infidelity {}, RND {rnd:.1}; RND above all by >=5: {rnd_ok}; SHP lowest by >=5: {shp_ok}",
        shown.join(", ")
    );
    if acc >= 0.95 && rnd_ok && shp_ok && size_ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn c7_functional_equivalence() -> Outcome {
    let run = full_run().as_ref().map_err(Clone::clone)?;
    let r = &run.report;
    let overlap = r.table("prediction_overlap").and_then(|t| t.get("FirstInit~SecondInit", "rep0")).unwrap_or(0.0);
    let acc = |v: &str| r.table("accuracy").and_then(|t| t.get(v, "rep0")).unwrap_or(f64::NAN);
    let gap = 100.0 * (acc("FirstInit") - acc("SecondInit")).abs();
    let msg = format!("prediction overlap {overlap:.3}, accuracy gap {gap:.2} points");
    if overlap >= 0.88 && gap <= 2.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn c8_untrained() -> Outcome {
    let run = full_run().as_ref().map_err(Clone::clone)?;
    let r = &run.report;
    let m = |name: &str| r.mean_infidelity(Variant::RandInit, name).unwrap_or(f64::NAN);
    let rnd = m("RND");
    let ok = REAL.iter().all(|n| m(n) <= rnd);
    let flagged = r.untrained.iter().flatten().any(|u| u.constant_prediction)
        && r.notes.iter().any(|n| n.contains("Constant-prediction"));
    let shown: Vec<String> = REAL.iter().map(|n| format!("{n} {:.1}", m(n))).collect();
    let msg = format!("RandInit mean infidelity {}, RND {rnd:.1}; constant-prediction flag {flagged}", shown.join(", "));
    if ok || flagged {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn small_config_toml() -> String {
    let mut cfg = ExperimentConfig::from_toml(DEFAULT_CONFIG).expect("default config");
    cfg.data.synthetic.n_docs = 400;
    cfg.train.learning_rates = vec![1e-2];
    cfg.train.max_epochs = 5;
    cfg.train.patience = 2;
    cfg.attribution.sg_sigma_grid = vec![0.05, 0.2];
    cfg.attribution.ig_steps = 16;
    cfg.attribution.shap_coalitions = Some(200);
    cfg.evaluation.eval_subsample = 30;
    cfg.to_toml().expect("serializes")
}

fn read_tables(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir.join("tables")).map_err(|e| e.to_string())? {
        let p = entry.map_err(|e| e.to_string())?.path();
        if p.extension().is_some_and(|e| e == "csv") {
            out.insert(
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).map_err(|e| e.to_string())?,
            );
        }
    }
    Ok(out)
}

fn c9_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = dir.path().join("small.toml");
    std::fs::write(&cfg, small_config_toml()).map_err(|e| e.to_string())?;
    let mut tables = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_attrib-robust"))
            .args(["test-diffinit", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .args(["--seed", "17"])
            .env("RUST_LOG", "warn")
            .output()
            .map_err(|e| e.to_string())?;
        if !status.status.success() {
            return Err(format!("run {name} failed: {}", String::from_utf8_lossy(&status.stderr)));
        }
        tables.push(read_tables(&out)?);
    }
    let differing: Vec<&String> = tables[0]
        .iter()
        .filter(|(k, v)| tables[1].get(*k) != Some(*v))
        .map(|(k, _)| k)
        .collect();
    let msg = format!("{} CSV tables compared, {} differ", tables[0].len(), differing.len());
    if differing.is_empty() && tables[0].len() == tables[1].len() && !tables[0].is_empty() {
        Ok(msg)
    } else {
        Err(format!("{msg}: {differing:?}"))
    }
}

fn c10_identity_control() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = ExperimentConfig::from_toml(&small_config_toml()).map_err(|e| e.to_string())?;
    cfg.debug_force_same_head_seed = true;
    let exp = Experiment::prepare(cfg.clone(), dir.path()).map_err(|e| e.to_string())?;
    let sections = Sections {
        diffinit: Some(run_test_diffinit(&exp).map_err(|e| e.to_string())?),
        untrained: None,
    };
    assemble_report(&exp, &sections, Provenance::new(&cfg, String::new())).map_err(|e| e.to_string())?;
    let text = std::fs::read_to_string(dir.path().join("records/rep0/diffinit.csv")).map_err(|e| e.to_string())?;
    let records = records_from_csv(&text).map_err(|e| e.to_string())?;
    let jacc: Vec<f64> = records.iter().filter(|r| r.metric.starts_with("jaccard@")).map(|r| r.value).collect();
    let all_one = !jacc.is_empty() && jacc.iter().all(|v| *v == 100.0);
    let t1 = std::fs::read_to_string(dir.path().join("tables/infidelity_firstinit.csv")).map_err(|e| e.to_string())?;
    let t2 = std::fs::read_to_string(dir.path().join("tables/infidelity_secondinit.csv")).map_err(|e| e.to_string())?;
    let same = t1.lines().skip(1).eq(t2.lines().skip(1));
    let msg = format!(
        "{} Jaccard values, all equal to 1.0: {all_one}; infidelity tables identical: {same}",
        jacc.len()
    );
    if all_one && same {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, Option<Duration>); 10] = [
        ("1 gradient correctness", c1_gradients, Some(Duration::from_secs(60))),
        ("2 IG completeness", c2_ig_completeness, Some(Duration::from_secs(120))),
        ("3 Shapley equivalence", c3_shapley, Some(Duration::from_secs(300))),
        ("4 worked Jaccard examples", c4_worked_examples, None),
        ("5 within-10-units arithmetic", c5_within_units, None),
        ("6 infidelity ordering on FirstInit", c6_infidelity_direction, Some(Duration::from_secs(900))),
        ("7 functional equivalence", c7_functional_equivalence, None),
        ("8 untrained-model infidelity", c8_untrained, None),
        ("9 determinism", c9_determinism, None),
        ("10 identity control", c10_identity_control, None),
    ];
    let start = Instant::now();
    let _ = full_run();
    let setup = start.elapsed();
    println!("shared default-config run prepared in {:.1}s", setup.as_secs_f64());
    let mut failed = 0;
    for (name, check, limit) in criteria {
        let start = Instant::now();
        let outcome = check();
        let mut elapsed = start.elapsed();
        if name.starts_with("6 ") {
            elapsed += setup;
        }
        let over = limit.is_some_and(|l| elapsed > l);
        let (status, detail) = match (&outcome, over) {
            (Ok(m), false) => ("PASS", m.clone()),
            (Ok(m), true) => ("FAIL", format!("{m}; exceeded {:?}", limit.unwrap())),
            (Err(m), _) => ("FAIL", m.clone()),
        };
        if status == "FAIL" {
            failed += 1;
        }
        println!("criterion {name}: {status} ({detail}) [{:.1}s]", elapsed.as_secs_f64());
    }
    println!("acceptance: {} of 10 criteria passed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
