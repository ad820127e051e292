//! KernelSHAP over token coalitions and the exact subset-enumeration
//! Shapley values it is checked against.
//!
//! A coalition is a boolean mask of retained positions. KernelSHAP fits
//! per-token values by weighted least squares with the SHAP kernel, with the
//! efficiency constraint `sum(phi) = v(full) - v(empty)` eliminated
//! analytically (the last token's value is expressed through the others).
//! The empty and full coalitions never appear as rows; they enter only
//! through that constraint.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub const EXACT_SHAPLEY_MAX_TOKENS: usize = 20;
pub const RIDGE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoalitionMask {
    pub retained: Vec<bool>,
    pub kernel_weight: f64,
}

impl CoalitionMask {
    pub fn size(&self) -> usize {
        self.retained.iter().filter(|&&b| b).count()
    }
}

pub fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k.min(n));
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// SHAP kernel weight of a single coalition of size `s` out of `l` tokens,
/// `(l-1) / (C(l,s) s (l-s))`. Undefined (infinite) for `s` in `{0, l}`.
pub fn kernel_weight(l: usize, s: usize) -> f64 {
    assert!(s > 0 && s < l, "kernel weight undefined for empty/full coalitions");
    (l - 1) as f64 / (binomial(l, s) * s as f64 * (l - s) as f64)
}

/// Total kernel mass of all coalitions of size `s`.
fn size_mass(l: usize, s: usize) -> f64 {
    (l - 1) as f64 / (s as f64 * (l - s) as f64)
}

fn mask_from_bits(l: usize, bits: u64) -> Vec<bool> {
    (0..l).map(|i| bits >> i & 1 == 1).collect()
}

fn subsets_of_size(l: usize, s: usize, out: &mut Vec<Vec<bool>>) {
    // Gosper's hack over l-bit words.
    if s == 0 || s > l {
        return;
    }
    let mut x: u64 = (1u64 << s) - 1;
    let limit = 1u64 << l;
    while x < limit {
        out.push(mask_from_bits(l, x));
        let c = x & x.wrapping_neg();
        let r = x + c;
        x = (((r ^ x) >> 2) / c) | r;
    }
}

/// Coalitions KernelSHAP will evaluate for `l` tokens under `budget`.
/// Returns the masks and whether they enumerate every proper coalition.
pub fn plan_coalitions(l: usize, budget: usize, seed: u64) -> (Vec<CoalitionMask>, bool) {
    if l < 2 {
        return (Vec::new(), true);
    }
    let total = if l < 63 { (1u64 << l) - 2 } else { u64::MAX };
    if (budget as u64) >= total {
        let mut out = Vec::with_capacity(total as usize);
        for bits in 1..(1u64 << l) - 1 {
            let retained = mask_from_bits(l, bits);
            let s = retained.iter().filter(|&&b| b).count();
            out.push(CoalitionMask {
                retained,
                kernel_weight: kernel_weight(l, s),
            });
        }
        return (out, true);
    }

    // Fully enumerate paired sizes (s, l-s) from the outside in while the
    // budget allows, then sample the rest.
    let mut out = Vec::new();
    let mut remaining = budget;
    let mut next = 1;
    while next <= l / 2 {
        let paired = next != l - next;
        let count = binomial(l, next) * if paired { 2.0 } else { 1.0 };
        if count > remaining as f64 {
            break;
        }
        let mut masks = Vec::new();
        subsets_of_size(l, next, &mut masks);
        if paired {
            subsets_of_size(l, l - next, &mut masks);
        }
        let w = kernel_weight(l, next);
        out.extend(masks.into_iter().map(|retained| CoalitionMask {
            retained,
            kernel_weight: w,
        }));
        remaining -= count as usize;
        next += 1;
    }
    if remaining == 0 || next > l / 2 {
        return (out, false);
    }

    let sizes: Vec<usize> = (next..=l - next).collect();
    let masses: Vec<f64> = sizes.iter().map(|&s| size_mass(l, s)).collect();
    let mass_left: f64 = masses.iter().sum();
    let mut rng = seed::rng(seed);
    let mut seen: HashSet<Vec<bool>> = HashSet::new();
    let mut sampled: Vec<Vec<bool>> = Vec::new();
    let max_attempts = 100 * remaining + 1000;
    let mut attempts = 0;
    while sampled.len() < remaining && attempts < max_attempts {
        attempts += 1;
        let mut u = rng.random::<f64>() * mass_left;
        let mut s = *sizes.last().unwrap();
        for (&size, &m) in sizes.iter().zip(&masses) {
            if u < m {
                s = size;
                break;
            }
            u -= m;
        }
        let mut mask = vec![false; l];
        for i in sample(&mut rng, l, s) {
            mask[i] = true;
        }
        let complement: Vec<bool> = mask.iter().map(|b| !b).collect();
        for m in [mask, complement] {
            if sampled.len() < remaining && seen.insert(m.clone()) {
                sampled.push(m);
            }
        }
    }
    let w = mass_left / sampled.len().max(1) as f64;
    out.extend(sampled.into_iter().map(|retained| CoalitionMask {
        retained,
        kernel_weight: w,
    }));
    (out, false)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapSolution {
    pub values: Vec<f64>,
    pub exact_enumeration: bool,
    /// The weighted normal equations were not positive definite and were
    /// solved with a small ridge term.
    pub regularized: bool,
    pub coalitions: usize,
}

/// KernelSHAP for an arbitrary value function over `l` positions.
pub fn kernel_shap_values<V>(l: usize, n_coalitions: usize, seed: u64, mut value: V) -> Result<ShapSolution>
where
    V: FnMut(&[bool]) -> Result<f64>,
{
    if l == 0 {
        return Err(Error::contract("kernel_shap: empty document"));
    }
    let v_empty = value(&vec![false; l])?;
    let v_full = value(&vec![true; l])?;
    let delta = v_full - v_empty;
    if l == 1 {
        return Ok(ShapSolution {
            values: vec![delta],
            exact_enumeration: true,
            regularized: false,
            coalitions: 0,
        });
    }
    let full_count = if l < 63 { (1u64 << l) - 2 } else { u64::MAX };
    if (n_coalitions as u64) < full_count && n_coalitions < l + 2 {
        return Err(Error::contract(format!(
            "kernel_shap: need at least L+2 = {} coalitions, got {n_coalitions}",
            l + 2
        )));
    }
    let (plan, exact) = plan_coalitions(l, n_coalitions, seed);

    let p = l - 1;
    let mut a = DMatrix::<f64>::zeros(p, p);
    let mut b = DVector::<f64>::zeros(p);
    let mut row = vec![0.0; p];
    for c in &plan {
        let y = value(&c.retained)? - v_empty;
        let zl = if c.retained[l - 1] { 1.0 } else { 0.0 };
        let target = y - zl * delta;
        for (i, r) in row.iter_mut().enumerate() {
            *r = if c.retained[i] { 1.0 } else { 0.0 } - zl;
        }
        let w = c.kernel_weight;
        for i in 0..p {
            if row[i] == 0.0 {
                continue;
            }
            let wi = w * row[i];
            b[i] += wi * target;
            for j in 0..p {
                a[(i, j)] += wi * row[j];
            }
        }
    }
    let (beta, regularized) = match a.clone().cholesky() {
        Some(ch) => (ch.solve(&b), false),
        None => {
            let ridged = a + DMatrix::<f64>::identity(p, p) * RIDGE;
            let sol = ridged
                .clone()
                .cholesky()
                .map(|ch| ch.solve(&b))
                .or_else(|| ridged.lu().solve(&b))
                .ok_or_else(|| Error::contract("kernel_shap: weighted least squares system is singular"))?;
            (sol, true)
        }
    };
    let mut values: Vec<f64> = beta.iter().copied().collect();
    values.push(delta - values.iter().sum::<f64>());
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "kernel_shap" });
    }
    Ok(ShapSolution {
        values,
        exact_enumeration: exact,
        regularized,
        coalitions: plan.len(),
    })
}

/// Classical Shapley values by enumerating all `2^l` coalitions.
pub fn exact_shapley_values<V>(l: usize, mut value: V) -> Result<Vec<f64>>
where
    V: FnMut(&[bool]) -> Result<f64>,
{
    if l == 0 {
        return Err(Error::contract("exact_shapley: empty document"));
    }
    if l > EXACT_SHAPLEY_MAX_TOKENS {
        return Err(Error::contract(format!(
            "exact_shapley: {l} tokens exceeds the cap of {EXACT_SHAPLEY_MAX_TOKENS}"
        )));
    }
    let n = 1usize << l;
    let mut vals = Vec::with_capacity(n);
    for bits in 0..n {
        vals.push(value(&mask_from_bits(l, bits as u64))?);
    }
    // |S|! (l-|S|-1)! / l!
    let weights: Vec<f64> = (0..l).map(|s| 1.0 / (l as f64 * binomial(l - 1, s))).collect();
    let mut phi = vec![0.0; l];
    for (i, p) in phi.iter_mut().enumerate() {
        let bit = 1usize << i;
        let mut acc = 0.0;
        for s in 0..n {
            if s & bit == 0 {
                acc += weights[s.count_ones() as usize] * (vals[s | bit] - vals[s]);
            }
        }
        *p = acc;
    }
    Ok(phi)
}
