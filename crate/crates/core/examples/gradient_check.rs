// Backward-pass gradients of a randomly initialized classifier against
// central finite differences.

use attrib_robust::classifier::{init_params, EncoderType, ModelConfig, ScoreTarget, TextModel};
use attrib_robust::tensor::{finite_difference_gradient, max_relative_error};

pub fn run_example() -> attrib_robust::Result<f64> {
    let config = ModelConfig {
        vocab_size: 50,
        embed_dim: 8,
        encoder_dim: 8,
        hidden_units: 16,
        classes: 3,
        encoder_type: EncoderType::SelfAttentionBlock,
        ..Default::default()
    };
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let model = init_params(&config, seed, seed + 1000)?;
        let x = model.embed_ids(&[3, 17, 4, 42, 9, 3])?;
        for target in [ScoreTarget::Logit, ScoreTarget::Probability] {
            let (_, grad) = model.score_and_grad(&x, 2, target)?;
            let fd = finite_difference_gradient(|t| model.score(t, 2, target), &x, 1e-5)?;
            worst = worst.max(max_relative_error(grad.data(), fd.data(), 1e-4));
        }
    }
    println!("max relative error, backward vs finite differences: {worst:.2e}");
    Ok(worst)
}

#[allow(dead_code)]
fn main() -> attrib_robust::Result<()> {
    run_example().map(|_| ())
}
