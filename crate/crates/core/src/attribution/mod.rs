//! Token attribution methods: vanilla saliency, SmoothGrad, integrated
//! gradients, KernelSHAP and a uniform random baseline.
//!
//! Gradient methods produce an `[L, D]` array of per-dimension scores which
//! is collapsed to one score per token by a [`Reduction`]. KernelSHAP and
//! the random baseline produce per-token scores directly.
//!
//! Every method explains the class the model predicts for the unmodified
//! document. Token removal (KernelSHAP coalitions, the IG baseline) replaces
//! a token's embedding with the embedding of the unknown-token id.

pub mod shapley;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{argmax, ScoreTarget, TextModel, Variant};
use crate::error::{Error, Result};
use crate::metrics;
use crate::seed;
use crate::tensor::Tensor;
use crate::text::TokenizedDoc;

pub use shapley::{
    exact_shapley_values, kernel_shap_values, kernel_weight, plan_coalitions, CoalitionMask, ShapSolution,
    EXACT_SHAPLEY_MAX_TOKENS,
};

pub const SG_ITERATIONS: usize = 10;
pub const SG_SIGMA_GRID: [f64; 4] = [0.01, 0.05, 0.1, 0.2];
pub const IG_STEPS: usize = 50;

/// Coalition budget for a document of `l` tokens: `2l + 2^11`.
pub fn shap_budget(l: usize) -> usize {
    2 * l + (1 << 11)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "VN")]
    Vanilla,
    #[serde(rename = "SG")]
    SmoothGrad,
    #[serde(rename = "IG")]
    IntegratedGradients,
    #[serde(rename = "SHP")]
    KernelShap,
    #[serde(rename = "RND")]
    Random,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Vanilla,
        Method::SmoothGrad,
        Method::IntegratedGradients,
        Method::KernelShap,
        Method::Random,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Method::Vanilla => "VN",
            Method::SmoothGrad => "SG",
            Method::IntegratedGradients => "IG",
            Method::KernelShap => "SHP",
            Method::Random => "RND",
        }
    }

    pub fn is_gradient(self) -> bool {
        matches!(self, Method::Vanilla | Method::SmoothGrad | Method::IntegratedGradients)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.tag().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::contract(format!("unknown method {s:?} (expected VN, SG, IG, SHP or RND)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    L2,
    InputDotGrad,
    None,
}

impl Reduction {
    pub fn tag(self) -> &'static str {
        match self {
            Reduction::L2 => "l2",
            Reduction::InputDotGrad => "input_dot_grad",
            Reduction::None => "none",
        }
    }
}

impl fmt::Display for Reduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(Reduction::L2),
            "input_dot_grad" => Ok(Reduction::InputDotGrad),
            "none" => Ok(Reduction::None),
            _ => Err(Error::contract(format!("unknown reduction {s:?} (expected l2 or input_dot_grad)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionOutput {
    pub doc_id: String,
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<Variant>,
    pub target_class: usize,
    pub vector_scores: Option<Tensor>,
    pub scalar_scores: Vec<f64>,
    pub reduction: Reduction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl AttributionOutput {
    pub fn len(&self) -> usize {
        self.scalar_scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scalar_scores.is_empty()
    }

    pub fn with_model(mut self, model: Variant) -> Self {
        self.model = Some(model);
        self
    }

    /// Re-scalarizes a gradient attribution. `inputs` are the document's
    /// embeddings. Scalar-only methods are returned unchanged.
    pub fn reduced(&self, reduction: Reduction, inputs: &Tensor) -> Result<Self> {
        let Some(v) = &self.vector_scores else {
            return Ok(self.clone());
        };
        let scalar_scores = match (reduction, self.method) {
            (Reduction::InputDotGrad, Method::IntegratedGradients) => row_sums(v),
            (r, _) => reduce(v, r, inputs)?,
        };
        Ok(Self {
            scalar_scores,
            reduction,
            ..self.clone()
        })
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

fn row_sums(v: &Tensor) -> Vec<f64> {
    (0..v.rows()).map(|i| v.row(i).iter().sum()).collect()
}

/// Collapses `[L, D]` per-dimension scores to one score per token.
pub fn reduce(vector_scores: &Tensor, reduction: Reduction, inputs: &Tensor) -> Result<Vec<f64>> {
    if vector_scores.rank() != 2 {
        return Err(Error::contract("reduce: vector scores must be [L, D]"));
    }
    match reduction {
        Reduction::L2 => Ok((0..vector_scores.rows())
            .map(|i| vector_scores.row(i).iter().map(|g| g * g).sum::<f64>().sqrt())
            .collect()),
        Reduction::InputDotGrad => {
            if inputs.shape() != vector_scores.shape() {
                return Err(Error::Shape {
                    op: "reduce",
                    lhs: vector_scores.shape().to_vec(),
                    rhs: inputs.shape().to_vec(),
                });
            }
            Ok((0..vector_scores.rows())
                .map(|i| vector_scores.row(i).iter().zip(inputs.row(i)).map(|(g, x)| g * x).sum())
                .collect())
        }
        Reduction::None => Err(Error::contract("reduce: gradient scores need l2 or input_dot_grad")),
    }
}

fn check_doc(doc: &TokenizedDoc) -> Result<()> {
    if doc.is_empty() {
        return Err(Error::contract(format!("document {:?} has no tokens", doc.doc_id)));
    }
    Ok(())
}

/// Embeddings of `doc` with every position replaced by the unknown token.
pub fn unk_baseline<M: TextModel + ?Sized>(model: &M, l: usize) -> Result<Tensor> {
    let unk = model.unk_embedding();
    let d = unk.len();
    Tensor::matrix(l, d, unk.iter().copied().cycle().take(l * d).collect())
}

/// Embeddings with positions outside `retained` replaced by the unknown token.
pub fn masked_embeddings(x: &Tensor, unk: &[f64], retained: &[bool]) -> Result<Tensor> {
    let d = x.cols();
    let mut data = Vec::with_capacity(x.len());
    for (i, &keep) in retained.iter().enumerate() {
        data.extend_from_slice(if keep { x.row(i) } else { unk });
    }
    Tensor::matrix(x.rows(), d, data)
}

fn gradient_output(doc: &TokenizedDoc, method: Method, class: usize, v: Tensor, warning: Option<String>) -> AttributionOutput {
    let scalar_scores = reduce(&v, Reduction::L2, &v).expect("rank-2 gradient");
    AttributionOutput {
        doc_id: doc.doc_id.clone(),
        method,
        model: None,
        target_class: class,
        vector_scores: Some(v),
        scalar_scores,
        reduction: Reduction::L2,
        warning,
    }
}

/// Gradient of the predicted class's score with respect to the input
/// embeddings. Scalar scores use the l2 reduction.
pub fn vanilla_saliency<M: TextModel + ?Sized>(model: &M, doc: &TokenizedDoc, target: ScoreTarget) -> Result<AttributionOutput> {
    check_doc(doc)?;
    let x = model.embed(&doc.ids)?;
    let class = argmax(&model.logits_from_embeddings(&x)?);
    let (_, g) = model.score_and_grad(&x, class, target)?;
    Ok(gradient_output(doc, Method::Vanilla, class, g, None))
}

/// Mean gradient over `n_iter` Gaussian perturbations of the embeddings.
pub fn smoothgrad<M: TextModel + ?Sized>(
    model: &M,
    doc: &TokenizedDoc,
    sigma: f64,
    n_iter: usize,
    noise_seed: u64,
    target: ScoreTarget,
) -> Result<AttributionOutput> {
    check_doc(doc)?;
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::contract(format!("smoothgrad: sigma must be >= 0, got {sigma}")));
    }
    if n_iter == 0 {
        return Err(Error::contract("smoothgrad: n_iter must be >= 1"));
    }
    if sigma == 0.0 {
        let mut out = vanilla_saliency(model, doc, target)?;
        out.method = Method::SmoothGrad;
        return Ok(out);
    }
    let x = model.embed(&doc.ids)?;
    let class = argmax(&model.logits_from_embeddings(&x)?);
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::contract(format!("smoothgrad: {e}")))?;
    let mut rng = seed::rng(noise_seed);
    let mut acc = vec![0.0; x.len()];
    for _ in 0..n_iter {
        let noisy: Vec<f64> = x.data().iter().map(|v| v + normal.sample(&mut rng)).collect();
        let (_, g) = model.score_and_grad(&Tensor::new(x.shape().to_vec(), noisy)?, class, target)?;
        for (a, gi) in acc.iter_mut().zip(g.data()) {
            *a += gi;
        }
    }
    let n = n_iter as f64;
    let v = Tensor::new(x.shape().to_vec(), acc.into_iter().map(|a| a / n).collect())?;
    Ok(gradient_output(doc, Method::SmoothGrad, class, v, None))
}

/// `(x - b) * mean gradient` along the straight path from the all-unknown
/// baseline `b`, sampled at the midpoints `(k - 1/2) / steps`.
pub fn integrated_gradients<M: TextModel + ?Sized>(
    model: &M,
    doc: &TokenizedDoc,
    steps: usize,
    target: ScoreTarget,
) -> Result<AttributionOutput> {
    check_doc(doc)?;
    if steps == 0 {
        return Err(Error::contract("integrated_gradients: steps must be >= 1"));
    }
    let x = model.embed(&doc.ids)?;
    let class = argmax(&model.logits_from_embeddings(&x)?);
    let b = unk_baseline(model, doc.len())?;
    let diff: Vec<f64> = x.data().iter().zip(b.data()).map(|(xi, bi)| xi - bi).collect();
    let mut acc = vec![0.0; x.len()];
    for k in 1..=steps {
        let alpha = (k as f64 - 0.5) / steps as f64;
        let point: Vec<f64> = b.data().iter().zip(&diff).map(|(bi, di)| bi + alpha * di).collect();
        let (_, g) = model.score_and_grad(&Tensor::new(x.shape().to_vec(), point)?, class, target)?;
        for (a, gi) in acc.iter_mut().zip(g.data()) {
            *a += gi;
        }
    }
    let n = steps as f64;
    let v: Vec<f64> = acc.iter().zip(&diff).map(|(a, d)| d * a / n).collect();
    Ok(gradient_output(
        doc,
        Method::IntegratedGradients,
        class,
        Tensor::new(x.shape().to_vec(), v)?,
        None,
    ))
}

/// Value function over token coalitions: the target-class score with
/// removed tokens replaced by the unknown token.
pub fn coalition_value<'a, M: TextModel + ?Sized>(
    model: &'a M,
    x: &'a Tensor,
    class: usize,
    target: ScoreTarget,
) -> impl FnMut(&[bool]) -> Result<f64> + 'a {
    let unk = model.unk_embedding();
    move |retained: &[bool]| model.score(&masked_embeddings(x, &unk, retained)?, class, target)
}

pub fn kernel_shap<M: TextModel + ?Sized>(
    model: &M,
    doc: &TokenizedDoc,
    n_coalitions: usize,
    seed: u64,
    target: ScoreTarget,
) -> Result<AttributionOutput> {
    check_doc(doc)?;
    let x = model.embed(&doc.ids)?;
    let class = argmax(&model.logits_from_embeddings(&x)?);
    let sol = kernel_shap_values(doc.len(), n_coalitions, seed, coalition_value(model, &x, class, target))?;
    let warning = sol
        .regularized
        .then(|| format!("weighted least squares regularized with ridge {}", shapley::RIDGE));
    if let Some(w) = &warning {
        log::warn!("kernel_shap {}: {w}", doc.doc_id);
    }
    Ok(AttributionOutput {
        doc_id: doc.doc_id.clone(),
        method: Method::KernelShap,
        model: None,
        target_class: class,
        vector_scores: None,
        scalar_scores: sol.values,
        reduction: Reduction::None,
        warning,
    })
}

pub fn exact_shapley<M: TextModel + ?Sized>(model: &M, doc: &TokenizedDoc, target: ScoreTarget) -> Result<Vec<f64>> {
    check_doc(doc)?;
    let x = model.embed(&doc.ids)?;
    let class = argmax(&model.logits_from_embeddings(&x)?);
    exact_shapley_values(doc.len(), coalition_value(model, &x, class, target))
}

/// `L` independent U(0, 1) scores.
pub fn random_scores(l: usize, seed: u64) -> Vec<f64> {
    let mut rng = seed::rng(seed);
    (0..l).map(|_| rng.random::<f64>()).collect()
}

pub fn random_attribution<M: TextModel + ?Sized>(model: &M, doc: &TokenizedDoc, seed: u64) -> Result<AttributionOutput> {
    check_doc(doc)?;
    Ok(AttributionOutput {
        doc_id: doc.doc_id.clone(),
        method: Method::Random,
        model: None,
        target_class: model.predict_ids(&doc.ids)?,
        vector_scores: None,
        scalar_scores: random_scores(doc.len(), seed),
        reduction: Reduction::None,
        warning: None,
    })
}

/// Settings shared by all methods when driven through [`attribute`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodParams {
    pub target: ScoreTarget,
    pub sg_sigma: f64,
    pub sg_iterations: usize,
    pub ig_steps: usize,
    /// `None` uses [`shap_budget`] per document.
    pub shap_coalitions: Option<usize>,
}

impl Default for MethodParams {
    fn default() -> Self {
        Self {
            target: ScoreTarget::Logit,
            sg_sigma: SG_SIGMA_GRID[0],
            sg_iterations: SG_ITERATIONS,
            ig_steps: IG_STEPS,
            shap_coalitions: None,
        }
    }
}

/// Runs one method. `seed` feeds SmoothGrad noise, coalition sampling and
/// the random baseline; the gradient-free deterministic methods ignore it.
pub fn attribute<M: TextModel + ?Sized>(
    model: &M,
    doc: &TokenizedDoc,
    method: Method,
    params: &MethodParams,
    seed: u64,
) -> Result<AttributionOutput> {
    match method {
        Method::Vanilla => vanilla_saliency(model, doc, params.target),
        Method::SmoothGrad => smoothgrad(model, doc, params.sg_sigma, params.sg_iterations, seed, params.target),
        Method::IntegratedGradients => integrated_gradients(model, doc, params.ig_steps, params.target),
        Method::KernelShap => {
            let budget = params.shap_coalitions.unwrap_or_else(|| shap_budget(doc.len()));
            kernel_shap(model, doc, budget, seed, params.target)
        }
        Method::Random => random_attribution(model, doc, seed),
    }
}

/// Per-document seed for a method, stable across model variants.
pub fn doc_seed(method_seed: u64, doc_id: &str) -> u64 {
    seed::for_name(method_seed, doc_id)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaSelection {
    pub sigma: f64,
    /// `(sigma, mean infidelity)` for every grid point, in grid order.
    pub scores: Vec<(f64, f64)>,
}

/// Picks the SmoothGrad noise level with the lowest mean infidelity over
/// `docs`. Ties go to the smaller sigma.
pub fn select_sg_sigma<M: TextModel + ?Sized>(
    model: &M,
    docs: &[TokenizedDoc],
    grid: &[f64],
    params: &MethodParams,
    reduction: Reduction,
    method_seed: u64,
) -> Result<SigmaSelection> {
    if grid.is_empty() {
        return Err(Error::contract("select_sg_sigma: empty sigma grid"));
    }
    let mut scores = Vec::with_capacity(grid.len());
    for &sigma in grid {
        let results: Vec<f64> = docs
            .par_iter()
            .map(|doc| {
                let x = model.embed(&doc.ids)?;
                let att = smoothgrad(model, doc, sigma, params.sg_iterations, doc_seed(method_seed, &doc.doc_id), params.target)?
                    .reduced(reduction, &x)?;
                Ok(metrics::infidelity(model, doc, &att)?.dropped_fraction)
            })
            .collect::<Result<_>>()?;
        let mean = if results.is_empty() {
            0.0
        } else {
            results.iter().sum::<f64>() / results.len() as f64
        };
        scores.push((sigma, mean));
    }
    let best = scores
        .iter()
        .fold(None::<(f64, f64)>, |best, &(s, m)| match best {
            Some((bs, bm)) if bm < m || (bm == m && bs <= s) => Some((bs, bm)),
            _ => Some((s, m)),
        })
        .unwrap();
    Ok(SigmaSelection { sigma: best.0, scores })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{init_params, EncoderType, ModelCheckpoint, ModelConfig};
    use crate::tensor::{finite_difference_gradient, max_relative_error};

    /// f(x) = w . mean_rows(x) + c, with a per-class weight vector.
    struct Linear {
        w: Vec<Vec<f64>>,
        table: Vec<Vec<f64>>,
    }

    impl Linear {
        fn new() -> Self {
            Self {
                w: vec![vec![0.5, -1.0, 2.0], vec![-0.25, 1.5, 0.75]],
                table: vec![
                    vec![0.0, 0.0, 0.0],
                    vec![0.1, 0.2, -0.1],
                    vec![1.0, -2.0, 0.5],
                    vec![-0.5, 0.3, 1.2],
                    vec![2.0, 1.0, -1.0],
                ],
            }
        }
    }

    impl TextModel for Linear {
        fn num_classes(&self) -> usize {
            2
        }
        fn embed(&self, ids: &[usize]) -> Result<Tensor> {
            Tensor::matrix(ids.len(), 3, ids.iter().flat_map(|&i| self.table[i].clone()).collect())
        }
        fn unk_embedding(&self) -> Vec<f64> {
            self.table[1].clone()
        }
        fn logits_from_embeddings(&self, x: &Tensor) -> Result<Vec<f64>> {
            let l = x.rows() as f64;
            Ok(self
                .w
                .iter()
                .map(|w| (0..x.rows()).map(|i| x.row(i).iter().zip(w).map(|(a, b)| a * b).sum::<f64>()).sum::<f64>() / l)
                .collect())
        }
        fn score_and_grad(&self, x: &Tensor, class: usize, target: ScoreTarget) -> Result<(f64, Tensor)> {
            assert_eq!(target, ScoreTarget::Logit);
            let l = x.rows();
            let g: Vec<f64> = (0..l).flat_map(|_| self.w[class].iter().map(|w| w / l as f64)).collect();
            Ok((self.logits_from_embeddings(x)?[class], Tensor::matrix(l, 3, g)?))
        }
    }

    fn doc(ids: &[usize]) -> TokenizedDoc {
        TokenizedDoc {
            doc_id: format!("d{ids:?}"),
            tokens: ids.iter().map(|i| format!("t{i}")).collect(),
            ids: ids.to_vec(),
            label: 0,
        }
    }

    fn small_model(seed: u64) -> ModelCheckpoint {
        let cfg = ModelConfig {
            vocab_size: 12,
            embed_dim: 4,
            encoder_type: EncoderType::SelfAttentionBlock,
            encoder_dim: 4,
            hidden_units: 6,
            classes: 2,
            max_seq_len: 16,
            fine_tune_encoder: false,
        };
        init_params(&cfg, seed, seed + 1).unwrap()
    }

    #[test]
    fn l2_and_zero_rows() {
        let v = Tensor::matrix(2, 2, vec![3.0, 4.0, 0.0, 0.0]).unwrap();
        let x = Tensor::matrix(2, 2, vec![1.0, 1.0, 5.0, 5.0]).unwrap();
        assert_eq!(reduce(&v, Reduction::L2, &x).unwrap(), vec![5.0, 0.0]);
        assert_eq!(reduce(&v, Reduction::InputDotGrad, &x).unwrap(), vec![7.0, 0.0]);
        let flipped = Tensor::matrix(2, 2, vec![-3.0, -4.0, 0.0, 0.0]).unwrap();
        assert_eq!(reduce(&flipped, Reduction::L2, &x).unwrap(), vec![5.0, 0.0]);
        assert!(reduce(&v, Reduction::InputDotGrad, &Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap()).is_err());
    }

    #[test]
    fn linear_saliency_is_w_over_l() {
        let m = Linear::new();
        let d = doc(&[2, 3, 4, 2]);
        let out = vanilla_saliency(&m, &d, ScoreTarget::Logit).unwrap();
        let w = &m.w[out.target_class];
        let v = out.vector_scores.as_ref().unwrap();
        for i in 0..4 {
            for (g, wj) in v.row(i).iter().zip(w) {
                assert!((g - wj / 4.0).abs() < 1e-15);
            }
        }
        // input_dot_grad gives each token's own contribution x_i . w / L
        let x = m.embed(&d.ids).unwrap();
        let idg = out.reduced(Reduction::InputDotGrad, &x).unwrap();
        for i in 0..4 {
            let c: f64 = x.row(i).iter().zip(w).map(|(a, b)| a * b / 4.0).sum();
            assert!((idg.scalar_scores[i] - c).abs() < 1e-12);
        }
    }

    #[test]
    fn smoothgrad_zero_sigma_is_vanilla_bit_exact() {
        let m = small_model(3);
        let d = doc(&[2, 5, 7, 3, 9]);
        let vn = vanilla_saliency(&m, &d, ScoreTarget::Logit).unwrap();
        let sg = smoothgrad(&m, &d, 0.0, 10, 99, ScoreTarget::Logit).unwrap();
        assert_eq!(vn.vector_scores, sg.vector_scores);
        assert_eq!(vn.scalar_scores, sg.scalar_scores);
    }

    #[test]
    fn smoothgrad_on_linear_model_equals_vanilla() {
        let m = Linear::new();
        let d = doc(&[2, 3, 4]);
        let vn = vanilla_saliency(&m, &d, ScoreTarget::Logit).unwrap();
        let sg = smoothgrad(&m, &d, 0.2, 10, 5, ScoreTarget::Logit).unwrap();
        let a = vn.vector_scores.unwrap();
        let b = sg.vector_scores.unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() < 1e-15));
    }

    #[test]
    fn smoothgrad_is_deterministic_in_seed() {
        let m = small_model(4);
        let d = doc(&[2, 5, 7]);
        let a = smoothgrad(&m, &d, 0.1, 10, 11, ScoreTarget::Logit).unwrap();
        let b = smoothgrad(&m, &d, 0.1, 10, 11, ScoreTarget::Logit).unwrap();
        let c = smoothgrad(&m, &d, 0.1, 10, 12, ScoreTarget::Logit).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.vector_scores, c.vector_scores);
    }

    #[test]
    fn saliency_matches_finite_differences() {
        for s in 0..10 {
            let m = small_model(s);
            let d = doc(&[2, 3 + s as usize % 5, 8, 1, 10]);
            let out = vanilla_saliency(&m, &d, ScoreTarget::Logit).unwrap();
            let x = m.embed(&d.ids).unwrap();
            let fd = finite_difference_gradient(|t| Ok(m.logits_from_embeddings(t)?[out.target_class]), &x, 1e-5).unwrap();
            assert!(max_relative_error(out.vector_scores.as_ref().unwrap().data(), fd.data(), 1e-4) < 1e-4);
        }
    }

    #[test]
    fn ig_on_linear_model_is_exact_for_any_steps() {
        let m = Linear::new();
        let d = doc(&[2, 3, 4, 4]);
        let x = m.embed(&d.ids).unwrap();
        let b = unk_baseline(&m, 4).unwrap();
        for steps in [1, 3, 50] {
            let out = integrated_gradients(&m, &d, steps, ScoreTarget::Logit).unwrap();
            let w = &m.w[out.target_class];
            let v = out.vector_scores.unwrap();
            for i in 0..4 {
                for j in 0..3 {
                    let expected = (x.row(i)[j] - b.row(i)[j]) * w[j] / 4.0;
                    assert!((v.row(i)[j] - expected).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn ig_all_unk_doc_is_zero() {
        let m = small_model(2);
        let out = integrated_gradients(&m, &doc(&[1, 1, 1]), 20, ScoreTarget::Logit).unwrap();
        assert!(out.vector_scores.unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ig_completeness_on_random_model() {
        let m = small_model(8);
        let d = doc(&[2, 9, 4, 6, 3, 11]);
        let out = integrated_gradients(&m, &d, 512, ScoreTarget::Logit).unwrap();
        let c = out.target_class;
        let fx = m.logits(&d.ids).unwrap()[c];
        let fb = m.logits_from_embeddings(&unk_baseline(&m, 6).unwrap()).unwrap()[c];
        let total: f64 = out.vector_scores.unwrap().data().iter().sum();
        assert!((total - (fx - fb)).abs() <= 1e-2 * (fx - fb).abs() + 1e-6);
    }

    #[test]
    fn shap_matches_exact_on_model() {
        let m = small_model(5);
        let d = doc(&[2, 9, 4, 6, 3, 11, 7]);
        let k = kernel_shap(&m, &d, shap_budget(7), 0, ScoreTarget::Logit).unwrap();
        let e = exact_shapley(&m, &d, ScoreTarget::Logit).unwrap();
        for (a, b) in k.scalar_scores.iter().zip(&e) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(k.vector_scores.is_none() && k.warning.is_none());
    }

    #[test]
    fn identical_tokens_get_equal_shapley_values() {
        let m = Linear::new();
        let phi = exact_shapley(&m, &doc(&[3, 2, 3]), ScoreTarget::Logit).unwrap();
        assert!((phi[0] - phi[2]).abs() < 1e-12);
    }

    #[test]
    fn random_attribution_properties() {
        let a = random_scores(100_000, 42);
        assert!(a.iter().all(|&v| (0.0..1.0).contains(&v)));
        let mean = a.iter().sum::<f64>() / a.len() as f64;
        assert!((mean - 0.5).abs() < 0.01);
        assert_eq!(a, random_scores(100_000, 42));
    }

    #[test]
    fn json_line_round_trip() {
        let m = small_model(1);
        let out = vanilla_saliency(&m, &doc(&[2, 3]), ScoreTarget::Logit).unwrap().with_model(Variant::FirstInit);
        let line = out.to_json_line().unwrap();
        let back: AttributionOutput = serde_json::from_str(&line).unwrap();
        assert_eq!(out, back);
        assert!(line.contains("\"method\":\"VN\"") && line.contains("\"reduction\":\"l2\""));
    }

    #[test]
    fn sigma_selection_single_and_ties() {
        let m = Linear::new();
        let docs = vec![doc(&[2, 3, 4]), doc(&[4, 4, 2])];
        let p = MethodParams::default();
        let one = select_sg_sigma(&m, &docs, &[0.05], &p, Reduction::L2, 0).unwrap();
        assert_eq!(one.sigma, 0.05);
        // A linear model's SmoothGrad does not depend on sigma, so every
        // grid point ties.
        let all = select_sg_sigma(&m, &docs, &SG_SIGMA_GRID, &p, Reduction::L2, 0).unwrap();
        assert_eq!(all.sigma, 0.01);
        assert!(select_sg_sigma(&m, &docs, &[], &p, Reduction::L2, 0).is_err());
    }

    #[test]
    fn method_tags_parse() {
        for m in Method::ALL {
            assert_eq!(m.tag().parse::<Method>().unwrap(), m);
        }
        assert!("DeepLift".parse::<Method>().is_err());
    }
}
