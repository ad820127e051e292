//! Faithfulness and agreement measures for attributions.
//!
//! Infidelity is the percentage of tokens that must be replaced by the
//! unknown token, in decreasing attribution order, before the predicted
//! class changes. Documents whose prediction never changes are reported at
//! 100 and marked as not flipped.
//!
//! Jaccard@K% compares the top-K% token positions of two attributions of
//! the same document. The set size is `ceil(K/100 * L)`; equal scores are
//! ranked by position.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::attribution::{masked_embeddings, AttributionOutput, Method};
use crate::classifier::{argmax, TextModel, Variant};
use crate::error::{Error, Result};
use crate::text::TokenizedDoc;

/// `ceil(k_percent / 100 * l)`, clamped to `1..=l`.
pub fn top_k_count(l: usize, k_percent: f64) -> usize {
    let exact = k_percent * l as f64 / 100.0;
    // guard against products like 0.1 * 30 landing just above an integer
    let m = (exact - 1e-9).ceil().max(1.0) as usize;
    m.min(l)
}

/// Positions ordered by decreasing score, ties to the lower position.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

pub fn top_k_positions(scores: &[f64], k_percent: f64) -> Result<BTreeSet<usize>> {
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(Error::contract(format!("k_percent must be in (0, 100], got {k_percent}")));
    }
    let m = top_k_count(scores.len(), k_percent);
    Ok(ranking(scores).into_iter().take(m).collect())
}

pub fn top_k_set(att: &AttributionOutput, k_percent: f64) -> Result<BTreeSet<usize>> {
    top_k_positions(&att.scalar_scores, k_percent)
}

/// `|a ∩ b| / |a ∪ b|`; two empty sets count as identical.
pub fn jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JaccardResult {
    pub doc_id: String,
    pub sources: (String, String),
    pub k_percent: f64,
    pub value: f64,
    pub sizes: (usize, usize),
}

fn source_name(att: &AttributionOutput) -> String {
    match att.model {
        Some(m) => format!("{m}/{}", att.method),
        None => att.method.to_string(),
    }
}

pub fn jaccard_at_k(a: &AttributionOutput, b: &AttributionOutput, k_percent: f64) -> Result<JaccardResult> {
    if a.doc_id != b.doc_id || a.len() != b.len() {
        return Err(Error::contract(format!(
            "jaccard_at_k: attributions describe different documents ({:?}, L={} vs {:?}, L={})",
            a.doc_id,
            a.len(),
            b.doc_id,
            b.len()
        )));
    }
    let sa = top_k_set(a, k_percent)?;
    let sb = top_k_set(b, k_percent)?;
    Ok(JaccardResult {
        doc_id: a.doc_id.clone(),
        sources: (source_name(a), source_name(b)),
        k_percent,
        value: jaccard(&sa, &sb),
        sizes: (sa.len(), sb.len()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfidelityResult {
    pub doc_id: String,
    pub method: Method,
    pub model: Option<Variant>,
    pub dropped_fraction: f64,
    pub flipped: bool,
}

/// Number of drops (1-based) after which the prediction first differs from
/// `original`, or `None` if it never does.
pub fn drops_to_flip<M: TextModel + ?Sized>(model: &M, doc: &TokenizedDoc, scores: &[f64]) -> Result<Option<usize>> {
    if scores.len() != doc.len() {
        return Err(Error::contract(format!(
            "infidelity: {} scores for a {}-token document",
            scores.len(),
            doc.len()
        )));
    }
    let x = model.embed(&doc.ids)?;
    let original = argmax(&model.logits_from_embeddings(&x)?);
    let unk = model.unk_embedding();
    let mut retained = vec![true; doc.len()];
    for (n, pos) in ranking(scores).into_iter().enumerate() {
        retained[pos] = false;
        let pred = argmax(&model.logits_from_embeddings(&masked_embeddings(&x, &unk, &retained)?)?);
        if pred != original {
            return Ok(Some(n + 1));
        }
    }
    Ok(None)
}

pub fn infidelity<M: TextModel + ?Sized>(model: &M, doc: &TokenizedDoc, att: &AttributionOutput) -> Result<InfidelityResult> {
    let flip = drops_to_flip(model, doc, &att.scalar_scores)?;
    let l = doc.len() as f64;
    Ok(InfidelityResult {
        doc_id: doc.doc_id.clone(),
        method: att.method,
        model: att.model,
        dropped_fraction: flip.map_or(100.0, |n| 100.0 * n as f64 / l),
        flipped: flip.is_some(),
    })
}

/// Mean dropped percentage, with unflipped documents counted at 100.
pub fn mean_infidelity(results: &[InfidelityResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::contract("mean_infidelity: no results"));
    }
    Ok(results.iter().map(|r| r.dropped_fraction).sum::<f64>() / results.len() as f64)
}

/// Mean over flipped documents only; `None` when nothing flipped.
pub fn mean_infidelity_flipped(results: &[InfidelityResult]) -> Option<f64> {
    let flipped: Vec<f64> = results.iter().filter(|r| r.flipped).map(|r| r.dropped_fraction).collect();
    (!flipped.is_empty()).then(|| flipped.iter().sum::<f64>() / flipped.len() as f64)
}

pub fn predictions<M: TextModel + ?Sized>(model: &M, docs: &[TokenizedDoc]) -> Result<Vec<usize>> {
    docs.iter().map(|d| model.predict_ids(&d.ids)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    pub fraction: f64,
    /// Indices into the input documents where both models agree.
    pub agreeing: Vec<usize>,
}

pub fn prediction_overlap<A, B>(a: &A, b: &B, docs: &[TokenizedDoc]) -> Result<Overlap>
where
    A: TextModel + ?Sized,
    B: TextModel + ?Sized,
{
    let pa = predictions(a, docs)?;
    let pb = predictions(b, docs)?;
    let agreeing: Vec<usize> = (0..docs.len()).filter(|&i| pa[i] == pb[i]).collect();
    let fraction = if docs.is_empty() {
        0.0
    } else {
        agreeing.len() as f64 / docs.len() as f64
    };
    Ok(Overlap { fraction, agreeing })
}

pub fn accuracy<M: TextModel + ?Sized>(model: &M, docs: &[TokenizedDoc]) -> Result<f64> {
    if docs.is_empty() {
        return Ok(0.0);
    }
    let p = predictions(model, docs)?;
    Ok(p.iter().zip(docs).filter(|(p, d)| **p == d.label).count() as f64 / docs.len() as f64)
}
