// KernelSHAP against exact Shapley values on a game with interactions.

use attrib_robust::attribution::shapley::{exact_shapley_values, kernel_shap_values};
use attrib_robust::attribution::shap_budget;

fn game(s: &[bool]) -> attrib_robust::Result<f64> {
    let w = [0.9, -0.4, 1.3, 0.2, -1.1, 0.6, 0.05, 0.7, -0.3, 1.0, 0.4, -0.8];
    let linear: f64 = s.iter().zip(w.iter().cycle()).filter(|(on, _)| **on).map(|(_, w)| w).sum();
    let pair = if s[0] && s[2] { 0.5 } else { 0.0 };
    Ok(linear.tanh() + pair)
}

pub fn run_example() -> attrib_robust::Result<(f64, f64)> {
    let l = 8;
    let exact = exact_shapley_values(l, game)?;
    let full = kernel_shap_values(l, shap_budget(l), 0, game)?;
    let enum_err = full.values.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("L={l}: full enumeration ({}), max |error| {enum_err:.2e}", full.exact_enumeration);

    let l = 12;
    let exact = exact_shapley_values(l, game)?;
    let sampled = kernel_shap_values(l, 600, 3, game)?;
    let range = exact.iter().cloned().fold(f64::MIN, f64::max) - exact.iter().cloned().fold(f64::MAX, f64::min);
    let dev = sampled.values.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!(
        "L={l}: {} sampled coalitions, max |error| {dev:.4} ({:.1}% of the value range)",
        sampled.coalitions,
        100.0 * dev / range
    );
    Ok((enum_err, dev / range))
}

#[allow(dead_code)]
fn main() -> attrib_robust::Result<()> {
    run_example().map(|_| ())
}
