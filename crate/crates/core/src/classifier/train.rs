use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{argmax, init_params, is_encoder_param, ModelCheckpoint, ModelConfig, ParamVars, Variant};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{Tape, Tensor};
use crate::text::{DatasetSplit, TokenizedDoc};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Grid searched by validation accuracy.
    pub learning_rates: Vec<f64>,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// Shuffle seed.
    pub seed: u64,
    /// Filled in on the returned checkpoint.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selected_learning_rate: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rates: vec![1e-2, 1e-3, 1e-4, 1e-5],
            max_epochs: 25,
            patience: 5,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
            seed: 0,
            selected_learning_rate: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rates.is_empty() || self.learning_rates.iter().any(|&lr| !(lr > 0.0)) {
            return Err(Error::contract("train.learning_rates must be a non-empty list of positive values"));
        }
        if self.patience >= self.max_epochs {
            return Err(Error::contract("train.patience must be smaller than train.max_epochs"));
        }
        if self.batch_size == 0 {
            return Err(Error::contract("train.batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(Error::contract("train: betas must lie in [0, 1) and epsilon must be positive"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::contract("train.weight_decay must be non-negative"));
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    weight_decay: f64,
    step: i32,
    state: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(lr: f64, tc: &TrainConfig) -> Self {
        Self {
            lr,
            beta1: tc.beta1,
            beta2: tc.beta2,
            epsilon: tc.epsilon,
            weight_decay: tc.weight_decay,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut BTreeMap<String, Tensor>, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let (m, v) = self
                .state
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= self.lr * (self.weight_decay * *w + mhat / (vhat.sqrt() + self.epsilon));
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub learning_rate: f64,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    /// `(learning rate, best validation accuracy)` for every grid point.
    pub grid: Vec<(f64, f64)>,
}

impl TrainingLog {
    /// `epoch,train_loss,val_acc` for the selected learning rate.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_acc\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{},{}", e.epoch, e.train_loss, e.val_acc);
        }
        s
    }
}

struct Fit {
    ckpt: ModelCheckpoint,
    epochs: Vec<EpochLog>,
    best_epoch: usize,
    best_val: f64,
}

/// Training data in the form the step function consumes. With a frozen
/// encoder the pooled features never change, so they are computed once.
enum Inputs<'a> {
    Pooled(Vec<Tensor>),
    Docs(&'a [TokenizedDoc]),
}

impl<'a> Inputs<'a> {
    fn new(ckpt: &ModelCheckpoint, docs: &'a [TokenizedDoc], train_encoder: bool) -> Result<Self> {
        if train_encoder {
            return Ok(Inputs::Docs(docs));
        }
        let e = ckpt.config.embed_dim;
        docs.iter()
            .map(|d| Tensor::matrix(1, e, ckpt.pooled(&d.ids)?))
            .collect::<Result<Vec<_>>>()
            .map(Inputs::Pooled)
    }

    fn logits(&self, ckpt: &ModelCheckpoint, tape: &mut Tape, p: &ParamVars, i: usize) -> Result<crate::tensor::Var> {
        match self {
            Inputs::Pooled(feats) => {
                let x = tape.constant(feats[i].clone());
                ckpt.head_on(tape, p, x)
            }
            Inputs::Docs(docs) => {
                let table = p.0["encoder.embedding"];
                let x = tape.embedding_lookup(table, &docs[i].ids)?;
                let pooled = ckpt.encode_on(tape, p, x)?;
                ckpt.head_on(tape, p, pooled)
            }
        }
    }
}

fn accuracy_on(ckpt: &ModelCheckpoint, inputs: &Inputs, docs: &[TokenizedDoc]) -> Result<f64> {
    if docs.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for (i, d) in docs.iter().enumerate() {
        let pred = match inputs {
            Inputs::Pooled(_) => {
                let mut tape = Tape::new();
                let p = ckpt.push_params(&mut tape, |n| !is_encoder_param(n), |_| false);
                let l = inputs.logits(ckpt, &mut tape, &p, i)?;
                argmax(tape.value(l).data())
            }
            Inputs::Docs(_) => ckpt.predict(d)?,
        };
        correct += (pred == d.label) as usize;
    }
    Ok(correct as f64 / docs.len() as f64)
}

fn fit(start: &ModelCheckpoint, split: &DatasetSplit, tc: &TrainConfig, lr: f64, train_encoder: bool) -> Result<Fit> {
    if split.train.is_empty() {
        return Err(Error::contract("empty training split"));
    }
    let trainable = |n: &str| train_encoder || !is_encoder_param(n);
    let mut ckpt = start.clone();
    let train_in = Inputs::new(&ckpt, &split.train, train_encoder)?;
    let mut opt = AdamW::new(lr, tc);
    let mut order: Vec<usize> = (0..split.train.len()).collect();

    let mut epochs = Vec::new();
    let mut best = (ckpt.clone(), 0usize, f64::NEG_INFINITY);
    let mut since_best = 0;
    for epoch in 1..=tc.max_epochs {
        let diverged = |e: Error| Error::Divergence {
            epoch,
            message: e.to_string(),
        };
        order.shuffle(&mut seed::rng(seed::derive(tc.seed, seed::Stream::Train, epoch as u64)));
        let mut loss_sum = 0.0;
        for batch in order.chunks(tc.batch_size) {
            let mut tape = Tape::new();
            let include = |n: &str| train_encoder || !is_encoder_param(n);
            let p = ckpt.push_params(&mut tape, include, trainable);
            let mut total = None;
            for &i in batch {
                let logits = train_in.logits(&ckpt, &mut tape, &p, i).map_err(diverged)?;
                let ce = tape.cross_entropy(logits, &[split.train[i].label], 1).map_err(diverged)?;
                total = Some(match total {
                    None => ce,
                    Some(t) => tape.add(t, ce).map_err(diverged)?,
                });
            }
            let total = total.expect("non-empty batch");
            let batch_loss = tape.value(total).item().expect("scalar");
            if !batch_loss.is_finite() {
                return Err(diverged(Error::NonFinite { op: "loss" }));
            }
            loss_sum += batch_loss;
            let mean = tape.scale(total, 1.0 / batch.len() as f64).map_err(diverged)?;
            tape.backward(mean)?;
            let grads: BTreeMap<String, Tensor> = p
                .iter()
                .filter(|(n, _)| trainable(n))
                .filter_map(|(n, v)| tape.grad(*v).map(|g| (n.clone(), g)))
                .collect();
            opt.step(&mut ckpt.params, &grads);
            if ckpt.params.values().any(|t| !t.is_finite()) {
                return Err(diverged(Error::NonFinite { op: "adamw" }));
            }
        }
        let val_in = Inputs::new(&ckpt, &split.validation, train_encoder)?;
        let val_acc = accuracy_on(&ckpt, &val_in, &split.validation)?;
        epochs.push(EpochLog {
            epoch,
            train_loss: loss_sum / split.train.len() as f64,
            val_acc,
        });
        if val_acc > best.2 {
            best = (ckpt.clone(), epoch, val_acc);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= tc.patience {
                break;
            }
        }
    }
    Ok(Fit {
        ckpt: best.0,
        epochs,
        best_epoch: best.1,
        best_val: best.2,
    })
}

fn grid_search(
    start: &ModelCheckpoint,
    split: &DatasetSplit,
    tc: &TrainConfig,
    train_encoder: bool,
) -> Result<(ModelCheckpoint, TrainingLog)> {
    tc.validate()?;
    let mut chosen: Option<(f64, Fit)> = None;
    let mut grid = Vec::new();
    for &lr in &tc.learning_rates {
        let f = fit(start, split, tc, lr, train_encoder)?;
        grid.push((lr, f.best_val));
        if chosen.as_ref().is_none_or(|(_, c)| f.best_val > c.best_val) {
            chosen = Some((lr, f));
        }
    }
    let (lr, f) = chosen.expect("non-empty grid");
    let mut ckpt = f.ckpt;
    ckpt.trained = true;
    ckpt.train_config = Some(TrainConfig {
        selected_learning_rate: Some(lr),
        ..tc.clone()
    });
    let log = TrainingLog {
        learning_rate: lr,
        epochs: f.epochs,
        best_epoch: f.best_epoch,
        best_val_acc: f.best_val,
        grid,
    };
    Ok((ckpt, log))
}

/// Trains `ckpt` with early stopping on validation accuracy, searching the
/// learning-rate grid. Encoder parameters are updated only when
/// `fine_tune_encoder` is set.
pub fn train(ckpt: &ModelCheckpoint, split: &DatasetSplit, tc: &TrainConfig) -> Result<(ModelCheckpoint, TrainingLog)> {
    grid_search(ckpt, split, tc, ckpt.config.fine_tune_encoder)
}

/// Stand-in for encoder pretraining: one full-model training run from a
/// fixed seed pair. Only its encoder parameters are reused.
pub fn pretrain_encoder(
    config: &ModelConfig,
    split: &DatasetSplit,
    tc: &TrainConfig,
    encoder_seed: u64,
    head_seed: u64,
) -> Result<(ModelCheckpoint, TrainingLog)> {
    let start = init_params(config, encoder_seed, head_seed)?;
    grid_search(&start, split, tc, true)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantSeeds {
    pub encoder: u64,
    pub pretrain_head: u64,
    pub first: u64,
    pub second: u64,
    pub rand: u64,
    /// Shuffle seed for SecondInit; `None` reuses the FirstInit seed.
    pub second_shuffle: Option<u64>,
    /// Debug override permitting `first == second`.
    pub allow_equal_heads: bool,
}

#[derive(Debug, Clone)]
pub struct Variants {
    pub pretrained: ModelCheckpoint,
    pub first: ModelCheckpoint,
    pub second: ModelCheckpoint,
    pub rand: ModelCheckpoint,
    pub pretrain_log: TrainingLog,
    pub first_log: TrainingLog,
    pub second_log: TrainingLog,
}

impl Variants {
    pub fn get(&self, v: Variant) -> &ModelCheckpoint {
        match v {
            Variant::FirstInit => &self.first,
            Variant::SecondInit => &self.second,
            Variant::RandInit => &self.rand,
        }
    }
}

fn tagged<T>(variant: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Variant {
        variant: variant.to_string(),
        source: Box::new(e),
    })
}

/// Builds FirstInit, SecondInit and RandInit around one shared encoder.
pub fn make_variants(
    config: &ModelConfig,
    split: &DatasetSplit,
    tc: &TrainConfig,
    seeds: &VariantSeeds,
) -> Result<Variants> {
    if seeds.first == seeds.second && !seeds.allow_equal_heads {
        return Err(Error::contract("FirstInit and SecondInit head seeds must differ"));
    }
    let (pretrained, pretrain_log) = tagged(
        "encoder pretraining",
        pretrain_encoder(config, split, tc, seeds.encoder, seeds.pretrain_head),
    )?;
    let fresh = |head_seed| -> Result<ModelCheckpoint> {
        let init = init_params(config, seeds.encoder, head_seed)?;
        let mut c = pretrained.with_head_of(&init);
        c.trained = false;
        c.train_config = None;
        Ok(c)
    };
    let first_start = fresh(seeds.first)?;
    let second_start = fresh(seeds.second)?;
    let second_tc = TrainConfig {
        seed: seeds.second_shuffle.unwrap_or(tc.seed),
        ..tc.clone()
    };
    let (first, second) = rayon::join(
        || tagged("FirstInit", train(&first_start, split, tc)),
        || tagged("SecondInit", train(&second_start, split, &second_tc)),
    );
    let (mut first, first_log) = first?;
    let (mut second, second_log) = second?;
    first.variant = Some(Variant::FirstInit);
    second.variant = Some(Variant::SecondInit);

    let rand_head = init_params(config, seeds.encoder, seeds.rand)?;
    let mut rand = first.with_head_of(&rand_head);
    rand.variant = Some(Variant::RandInit);
    rand.trained = false;
    rand.train_config = None;
    Ok(Variants {
        pretrained,
        first,
        second,
        rand,
        pretrain_log,
        first_log,
        second_log,
    })
}
