//! The two randomization tests and report assembly.
//!
//! An [`Experiment`] owns one output directory. Every stage writes its
//! artifacts there and reuses them when rerun: data files, checkpoints
//! (`checkpoints/rep{r}/`), the selected SmoothGrad noise level and the
//! attributions themselves (`cache/attributions/`, keyed by a hash of the
//! model, method settings and documents). Per-document metric values are
//! written to `records/rep{r}/*.csv` and every table is aggregated from
//! those records.
//!
//! Bundle layout:
//!
//! ```text
//! report.json  provenance.json  config.toml
//! data/        corpus.csv label_map.tsv vocab.tsv split.json
//! checkpoints/ rep{r}/{pretrained,FirstInit,SecondInit,RandInit}.json + logs
//! cache/       attributions/*.jsonl sigma/rep{r}.json
//! records/     rep{r}/{diffinit,untrained}.csv
//! tables/      *.csv
//! figures/     *.svg
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attribution::{self, doc_seed, AttributionOutput, Method, MethodParams, Reduction, SigmaSelection};
use crate::classifier::{make_variants, ModelCheckpoint, TextModel, TrainingLog, Variant, VariantSeeds, Variants};
use crate::config::{ExperimentConfig, ResolvedSeeds};
use crate::error::{Error, Result};
use crate::metrics::{self, InfidelityResult};
use crate::report::{self, bar_chart_svg, within_units_count, MetricRecord, ReportTable};
use crate::seed;
use crate::text::{
    corpus_to_bytes, generate_synthetic, load_corpus, split_dataset, Corpus, CorpusFormat, DatasetSplit, TokenizedDoc,
    Vocab, VocabConfig,
};

const CACHE_VERSION: u32 = 1;
pub const DIFFINIT: &str = "diffinit";
pub const UNTRAINED: &str = "untrained";

pub(crate) fn write_atomic(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn unix_time() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// `25.0` renders as `25`, `12.5` as `12.5`.
pub fn k_label(k: f64) -> String {
    format!("{k}")
}

/// One table row: a method plus the reduction applied to gradient methods.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowSpec {
    pub method: Method,
    pub reduction: Reduction,
    pub label: String,
}

pub fn row_specs(cfg: &ExperimentConfig) -> Vec<RowSpec> {
    let mut rows = Vec::new();
    for &method in &cfg.attribution.methods {
        if method.is_gradient() {
            for (i, &reduction) in cfg.attribution.reductions.iter().enumerate() {
                let label = if i == 0 {
                    method.tag().to_string()
                } else {
                    format!("{}:{}", method.tag(), reduction.tag())
                };
                rows.push(RowSpec {
                    method,
                    reduction,
                    label,
                });
            }
        } else {
            rows.push(RowSpec {
                method,
                reduction: Reduction::None,
                label: method.tag().to_string(),
            });
        }
    }
    rows
}

/// Rows compared by Jaccard: the uniform baseline is excluded.
fn jaccard_rows(cfg: &ExperimentConfig) -> Vec<RowSpec> {
    row_specs(cfg).into_iter().filter(|r| r.method != Method::Random).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SplitIds {
    train: Vec<String>,
    validation: Vec<String>,
    test: Vec<String>,
    eval: Vec<String>,
    test_oov_rate: f64,
}

pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub corpus: Corpus,
    pub split: DatasetSplit,
    pub vocab: Vocab,
    pub eval_docs: Vec<TokenizedDoc>,
}

/// Models and SmoothGrad setting of one replicate.
pub struct Replicate {
    pub index: usize,
    pub seeds: ResolvedSeeds,
    pub variants: Variants,
    pub sigma: Option<SigmaSelection>,
}

impl Replicate {
    pub fn model(&self, v: Variant) -> &ModelCheckpoint {
        self.variants.get(v)
    }
}

impl Experiment {
    /// Loads or generates the corpus, splits it, and draws the evaluation
    /// subsample. Writes `data/`.
    pub fn prepare(cfg: ExperimentConfig, out: &Path) -> Result<Self> {
        cfg.validate()?;
        let seeds = cfg.resolved_seeds(0);
        let corpus = match &cfg.data.path {
            Some(p) => load_corpus(p, cfg.data.format.unwrap_or_else(|| CorpusFormat::from_path(p)))?,
            None => generate_synthetic(&cfg.data.synthetic, seeds.data)?,
        };
        let (split, vocab) = split_dataset(
            &corpus,
            (cfg.data.train_ratio, 1.0 - cfg.data.train_ratio),
            cfg.data.val_fraction,
            seeds.split,
            VocabConfig {
                min_freq: cfg.data.min_freq,
                max_size: cfg.data.max_vocab,
            },
            cfg.model.max_seq_len,
        )?;
        let n_eval = cfg.evaluation.eval_subsample;
        if n_eval > split.test.len() {
            return Err(Error::Config {
                path: "evaluation.eval_subsample".into(),
                message: format!("{n_eval} exceeds the test split size {}", split.test.len()),
            });
        }
        let mut idx = sample(&mut seed::rng(seeds.subsample), split.test.len(), n_eval).into_vec();
        idx.sort_unstable();
        let eval_docs: Vec<TokenizedDoc> = idx.iter().map(|&i| split.test[i].clone()).collect();

        let data = out.join("data");
        write_atomic(&data.join("corpus.csv"), corpus_to_bytes(&corpus, CorpusFormat::Csv)?)?;
        write_atomic(&data.join("label_map.tsv"), corpus.label_map_tsv())?;
        write_atomic(&data.join("vocab.tsv"), vocab.to_tsv())?;
        let ids = |d: &[TokenizedDoc]| d.iter().map(|x| x.doc_id.clone()).collect::<Vec<_>>();
        let split_ids = SplitIds {
            train: ids(&split.train),
            validation: ids(&split.validation),
            test: ids(&split.test),
            eval: ids(&eval_docs),
            test_oov_rate: split.test_oov_rate(),
        };
        write_atomic(&data.join("split.json"), serde_json::to_string_pretty(&split_ids)?)?;
        log::info!(
            "data: {} train / {} validation / {} test documents, vocabulary {}, test OOV rate {:.4}",
            split.train.len(),
            split.validation.len(),
            split.test.len(),
            vocab.len(),
            split_ids.test_oov_rate
        );
        Ok(Self {
            cfg,
            out: out.to_path_buf(),
            corpus,
            split,
            vocab,
            eval_docs,
        })
    }

    pub fn model_config(&self) -> crate::classifier::ModelConfig {
        crate::classifier::ModelConfig {
            vocab_size: self.vocab.len(),
            classes: self.corpus.class_count(),
            ..self.cfg.model.clone()
        }
    }

    fn checkpoint_dir(&self, rep: usize) -> PathBuf {
        self.out.join("checkpoints").join(format!("rep{rep}"))
    }

    /// Trains (or reloads) the three variants of replicate `rep`.
    pub fn variants(&self, rep: usize) -> Result<Variants> {
        let dir = self.checkpoint_dir(rep);
        let s = self.cfg.resolved_seeds(rep);
        let seeds = VariantSeeds {
            encoder: s.encoder,
            pretrain_head: s.pretrain_head,
            first: s.first_head,
            second: s.second_head,
            rand: s.rand_head,
            second_shuffle: Some(s.second_shuffle),
            allow_equal_heads: self.cfg.debug_force_same_head_seed,
        };
        let config = self.model_config();
        let mut tc = self.cfg.train.clone();
        tc.seed = s.shuffle;
        let stamp_path = dir.join("seeds.json");
        let stamp = serde_json::to_string_pretty(&(&seeds, &config, &tc))?;
        let names = ["pretrained", "FirstInit", "SecondInit", "RandInit"];
        if std::fs::read_to_string(&stamp_path).ok().as_deref() == Some(stamp.as_str())
            && names.iter().all(|n| dir.join(format!("{n}.json")).exists())
        {
            let load = |n: &str| ModelCheckpoint::load(&dir.join(format!("{n}.json")));
            let logs: (TrainingLog, TrainingLog, TrainingLog) = read_json(&dir.join("training_logs.json"))?;
            log::info!("replicate {rep}: reusing checkpoints in {}", dir.display());
            return Ok(Variants {
                pretrained: load("pretrained")?,
                first: load("FirstInit")?,
                second: load("SecondInit")?,
                rand: load("RandInit")?,
                pretrain_log: logs.0,
                first_log: logs.1,
                second_log: logs.2,
            });
        }
        log::info!("replicate {rep}: training encoder, FirstInit and SecondInit");
        let v = make_variants(&config, &self.split, &tc, &seeds)?;
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (n, c) in names.iter().zip([&v.pretrained, &v.first, &v.second, &v.rand]) {
            write_atomic(&dir.join(format!("{n}.json")), c.to_json()?)?;
        }
        for (n, l) in [("pretrained", &v.pretrain_log), ("FirstInit", &v.first_log), ("SecondInit", &v.second_log)] {
            write_atomic(&dir.join(format!("{n}_log.csv")), l.to_csv())?;
        }
        write_atomic(
            &dir.join("training_logs.json"),
            serde_json::to_string(&(&v.pretrain_log, &v.first_log, &v.second_log))?,
        )?;
        write_atomic(&stamp_path, stamp)?;
        Ok(v)
    }

    pub fn method_params(&self, sigma: Option<f64>) -> MethodParams {
        let a = &self.cfg.attribution;
        MethodParams {
            target: a.target,
            sg_sigma: sigma.unwrap_or(a.sg_sigma_grid[0]),
            sg_iterations: a.sg_iterations,
            ig_steps: a.ig_steps,
            shap_coalitions: a.shap_coalitions,
        }
    }

    /// SmoothGrad noise level chosen on FirstInit, reused for every variant.
    pub fn select_sigma(&self, rep: usize, first: &ModelCheckpoint) -> Result<SigmaSelection> {
        let a = &self.cfg.attribution;
        let s = self.cfg.resolved_seeds(rep);
        let key = sha256_hex(
            serde_json::to_string(&(
                CACHE_VERSION,
                first.fingerprint(),
                &a.sg_sigma_grid,
                a.sg_iterations,
                a.target,
                a.reductions[0],
                s.smoothgrad,
                self.eval_ids(),
            ))?
            .as_bytes(),
        );
        let path = self.out.join("cache").join("sigma").join(format!("rep{rep}.json"));
        if let Ok((k, sel)) = read_json::<(String, SigmaSelection)>(&path) {
            if k == key {
                return Ok(sel);
            }
        }
        let sel = attribution::select_sg_sigma(
            first,
            &self.eval_docs,
            &a.sg_sigma_grid,
            &self.method_params(None),
            a.reductions[0],
            s.smoothgrad,
        )?;
        log::info!("replicate {rep}: SmoothGrad sigma {} ({:?})", sel.sigma, sel.scores);
        write_atomic(&path, serde_json::to_string(&(key, &sel))?)?;
        Ok(sel)
    }

    pub fn replicate(&self, rep: usize) -> Result<Replicate> {
        let variants = self.variants(rep)?;
        let sigma = if self.cfg.attribution.methods.contains(&Method::SmoothGrad) {
            Some(self.select_sigma(rep, &variants.first)?)
        } else {
            None
        };
        Ok(Replicate {
            index: rep,
            seeds: self.cfg.resolved_seeds(rep),
            variants,
            sigma,
        })
    }

    fn eval_ids(&self) -> Vec<&str> {
        self.eval_docs.iter().map(|d| d.doc_id.as_str()).collect()
    }

    fn method_seed(seeds: &ResolvedSeeds, method: Method) -> u64 {
        match method {
            Method::SmoothGrad => seeds.smoothgrad,
            Method::KernelShap => seeds.kernel_shap,
            Method::Random => seeds.random,
            Method::Vanilla | Method::IntegratedGradients => 0,
        }
    }

    /// Attributions of every evaluation document, read from the cache when
    /// present. Gradient methods are stored under the l2 reduction.
    pub fn attributions(&self, rep: &Replicate, variant: Variant, method: Method) -> Result<Vec<AttributionOutput>> {
        let model = rep.model(variant);
        let params = self.method_params(rep.sigma.as_ref().map(|s| s.sigma));
        let method_seed = Self::method_seed(&rep.seeds, method);
        let key = sha256_hex(
            serde_json::to_string(&(
                CACHE_VERSION,
                model.fingerprint(),
                method,
                &params,
                method_seed,
                self.eval_ids(),
            ))?
            .as_bytes(),
        );
        let path = self
            .out
            .join("cache")
            .join("attributions")
            .join(format!("{variant}_{method}_{}.jsonl", &key[..16]));
        if let Ok(text) = std::fs::read_to_string(&path) {
            let cached: Result<Vec<AttributionOutput>> = text
                .lines()
                .map(|l| serde_json::from_str(l).map_err(Error::from))
                .collect();
            if let Ok(cached) = cached {
                if cached.len() == self.eval_docs.len()
                    && cached.iter().zip(&self.eval_docs).all(|(a, d)| a.doc_id == d.doc_id)
                {
                    return Ok(cached);
                }
            }
        }
        log::info!("replicate {}: computing {method} on {variant}", rep.index);
        let outs: Vec<AttributionOutput> = self
            .eval_docs
            .par_iter()
            .map(|d| {
                attribution::attribute(model, d, method, &params, doc_seed(method_seed, &d.doc_id))
                    .map(|a| a.with_model(variant))
            })
            .collect::<Result<_>>()?;
        let mut text = String::new();
        for o in &outs {
            text.push_str(&o.to_json_line()?);
            text.push('\n');
        }
        write_atomic(&path, text)?;
        Ok(outs)
    }

    /// Attributions scalarized according to `row`.
    pub fn scored(&self, rep: &Replicate, variant: Variant, row: &RowSpec) -> Result<Vec<AttributionOutput>> {
        let base = self.attributions(rep, variant, row.method)?;
        if !row.method.is_gradient() || row.reduction == Reduction::L2 {
            return Ok(base);
        }
        let model = rep.model(variant);
        base.par_iter()
            .zip(self.eval_docs.par_iter())
            .map(|(a, d)| a.reduced(row.reduction, &model.embed(&d.ids)?))
            .collect()
    }

    fn infidelity_records(&self, rep: &Replicate, variant: Variant, rows: &[RowSpec]) -> Result<Vec<MetricRecord>> {
        let model = rep.model(variant);
        let mut records = Vec::new();
        for row in rows {
            let atts = self.scored(rep, variant, row)?;
            let results: Vec<InfidelityResult> = atts
                .par_iter()
                .zip(self.eval_docs.par_iter())
                .map(|(a, d)| metrics::infidelity(model, d, a))
                .collect::<Result<_>>()?;
            for r in results {
                records.push(MetricRecord {
                    doc_id: r.doc_id.clone(),
                    model: variant.to_string(),
                    method: row.label.clone(),
                    metric: "infidelity".into(),
                    value: r.dropped_fraction,
                });
                records.push(MetricRecord {
                    doc_id: r.doc_id,
                    model: variant.to_string(),
                    method: row.label.clone(),
                    metric: "censored".into(),
                    value: if r.flipped { 0.0 } else { 1.0 },
                });
            }
        }
        Ok(records)
    }

    fn jaccard_records(&self, rep: &Replicate, a: Variant, b: Variant, agreeing: &[usize]) -> Result<Vec<MetricRecord>> {
        let pair = format!("{a}~{b}");
        let mut records = Vec::new();
        for row in jaccard_rows(&self.cfg) {
            let xa = self.scored(rep, a, &row)?;
            let xb = self.scored(rep, b, &row)?;
            for &k in &self.cfg.evaluation.k_percent {
                for &i in agreeing {
                    let j = metrics::jaccard_at_k(&xa[i], &xb[i], k)?;
                    records.push(MetricRecord {
                        doc_id: j.doc_id,
                        model: pair.clone(),
                        method: row.label.clone(),
                        metric: format!("jaccard@{}", k_label(k)),
                        value: 100.0 * j.value,
                    });
                }
            }
        }
        Ok(records)
    }

    fn write_records(&self, rep: usize, test: &str, records: &[MetricRecord]) -> Result<()> {
        let path = self.out.join("records").join(format!("rep{rep}")).join(format!("{test}.csv"));
        write_atomic(&path, report::records_to_csv(records)?)
    }
}

/// Results of the different-initializations test for one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffInitReplicate {
    pub replicate: usize,
    pub seeds: ResolvedSeeds,
    pub accuracy_first: f64,
    pub accuracy_second: f64,
    /// Over the full test split.
    pub prediction_overlap: f64,
    /// Evaluation documents on which both models agree.
    pub agreeing_eval_docs: usize,
    pub sg_sigma: Option<SigmaSelection>,
    #[serde(skip)]
    pub records: Vec<MetricRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UntrainedReplicate {
    pub replicate: usize,
    pub seeds: ResolvedSeeds,
    pub accuracy_first: f64,
    pub accuracy_rand: f64,
    pub prediction_overlap: f64,
    pub agreeing_eval_docs: usize,
    /// RandInit predicts one class for every evaluation document.
    pub constant_prediction: bool,
    pub sg_sigma: Option<SigmaSelection>,
    #[serde(skip)]
    pub records: Vec<MetricRecord>,
}

/// FirstInit vs SecondInit: accuracies, prediction overlap, infidelity of
/// both models and Jaccard@K% on the documents where they agree.
pub fn run_test_diffinit(exp: &Experiment) -> Result<Vec<DiffInitReplicate>> {
    let rows = row_specs(&exp.cfg);
    (0..exp.cfg.replicates)
        .map(|r| {
            let rep = exp.replicate(r)?;
            let (first, second) = (rep.model(Variant::FirstInit), rep.model(Variant::SecondInit));
            let overlap = metrics::prediction_overlap(first, second, &exp.split.test)?;
            let agreeing = metrics::prediction_overlap(first, second, &exp.eval_docs)?.agreeing;
            let mut records = exp.infidelity_records(&rep, Variant::FirstInit, &rows)?;
            records.extend(exp.infidelity_records(&rep, Variant::SecondInit, &rows)?);
            records.extend(exp.jaccard_records(&rep, Variant::FirstInit, Variant::SecondInit, &agreeing)?);
            exp.write_records(r, DIFFINIT, &records)?;
            Ok(DiffInitReplicate {
                replicate: r,
                seeds: rep.seeds,
                accuracy_first: metrics::accuracy(first, &exp.split.test)?,
                accuracy_second: metrics::accuracy(second, &exp.split.test)?,
                prediction_overlap: overlap.fraction,
                agreeing_eval_docs: agreeing.len(),
                sg_sigma: rep.sigma.clone(),
                records,
            })
        })
        .collect()
}

/// FirstInit vs RandInit: RandInit accuracy, infidelity of both models and
/// Jaccard@K% on the documents where they agree.
pub fn run_test_untrained(exp: &Experiment) -> Result<Vec<UntrainedReplicate>> {
    let rows = row_specs(&exp.cfg);
    (0..exp.cfg.replicates)
        .map(|r| {
            let rep = exp.replicate(r)?;
            let (first, rand) = (rep.model(Variant::FirstInit), rep.model(Variant::RandInit));
            let overlap = metrics::prediction_overlap(first, rand, &exp.split.test)?;
            let agreeing = metrics::prediction_overlap(first, rand, &exp.eval_docs)?.agreeing;
            let rand_preds: BTreeSet<usize> = metrics::predictions(rand, &exp.eval_docs)?.into_iter().collect();
            let constant_prediction = rand_preds.len() <= 1;
            if constant_prediction {
                log::warn!("replicate {r}: RandInit predicts a single class for every evaluation document");
            }
            let mut records = exp.infidelity_records(&rep, Variant::FirstInit, &rows)?;
            records.extend(exp.infidelity_records(&rep, Variant::RandInit, &rows)?);
            records.extend(exp.jaccard_records(&rep, Variant::FirstInit, Variant::RandInit, &agreeing)?);
            exp.write_records(r, UNTRAINED, &records)?;
            Ok(UntrainedReplicate {
                replicate: r,
                seeds: rep.seeds,
                accuracy_first: metrics::accuracy(first, &exp.split.test)?,
                accuracy_rand: metrics::accuracy(rand, &exp.split.test)?,
                prediction_overlap: overlap.fraction,
                agreeing_eval_docs: agreeing.len(),
                constant_prediction,
                sg_sigma: rep.sigma.clone(),
                records,
            })
        })
        .collect()
}

/// Computes and caches attributions of every method for every variant.
/// Returns the number of attribution outputs available.
pub fn run_attributions(exp: &Experiment) -> Result<usize> {
    let mut n = 0;
    for r in 0..exp.cfg.replicates {
        let rep = exp.replicate(r)?;
        for v in [Variant::FirstInit, Variant::SecondInit, Variant::RandInit] {
            for &m in &exp.cfg.attribution.methods {
                n += exp.attributions(&rep, v, m)?.len();
            }
        }
    }
    Ok(n)
}

/// Infidelity tables for each variant, one column per replicate.
pub fn run_infidelity(exp: &Experiment, variants: &[Variant]) -> Result<Vec<ReportTable>> {
    let rows = row_specs(&exp.cfg);
    let mut per_rep = Vec::new();
    for r in 0..exp.cfg.replicates {
        let rep = exp.replicate(r)?;
        let mut records = Vec::new();
        for &v in variants {
            records.extend(exp.infidelity_records(&rep, v, &rows)?);
        }
        per_rep.push(records);
    }
    let refs: Vec<&[MetricRecord]> = per_rep.iter().map(Vec::as_slice).collect();
    let mut tables = Vec::new();
    for &v in variants {
        let name = format!("infidelity_{}", v.name().to_lowercase());
        let t = method_table(name.clone(), &rows, &refs, v.name(), "infidelity", None)?;
        write_atomic(&exp.out.join("tables").join(format!("{name}.csv")), t.to_csv())?;
        tables.push(t);
    }
    Ok(tables)
}

/// Jaccard@K% tables for each model pair over the documents where the pair
/// agrees.
pub fn run_jaccard(exp: &Experiment, pairs: &[(Variant, Variant)]) -> Result<Vec<ReportTable>> {
    let jrows = jaccard_rows(&exp.cfg);
    let mut per_rep = Vec::new();
    for r in 0..exp.cfg.replicates {
        let rep = exp.replicate(r)?;
        let mut records = Vec::new();
        for &(a, b) in pairs {
            let agreeing = metrics::prediction_overlap(rep.model(a), rep.model(b), &exp.eval_docs)?.agreeing;
            records.extend(exp.jaccard_records(&rep, a, b, &agreeing)?);
        }
        per_rep.push(records);
    }
    let refs: Vec<&[MetricRecord]> = per_rep.iter().map(Vec::as_slice).collect();
    let mut tables = Vec::new();
    for &pair in pairs {
        let model = format!("{}~{}", pair.0, pair.1);
        for &k in &exp.cfg.evaluation.k_percent {
            let name = jaccard_table_name(k, pair);
            let t = method_table(name.clone(), &jrows, &refs, &model, &format!("jaccard@{}", k_label(k)), None)?;
            write_atomic(&exp.out.join("tables").join(format!("{name}.csv")), t.to_csv())?;
            tables.push(t);
        }
    }
    Ok(tables)
}

#[derive(Debug, Clone, Default)]
pub struct Sections {
    pub diffinit: Option<Vec<DiffInitReplicate>>,
    pub untrained: Option<Vec<UntrainedReplicate>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WithinUnitsRow {
    pub k_percent: f64,
    pub method: String,
    pub count: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub package_version: String,
    pub seeds: Vec<ResolvedSeeds>,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub config_toml: String,
}

impl Provenance {
    pub fn new(cfg: &ExperimentConfig, config_toml: String) -> Self {
        Self {
            config_hash: cfg.hash(),
            seed: cfg.seed,
            package_version: env!("CARGO_PKG_VERSION").to_string(),
            seeds: (0..cfg.replicates).map(|r| cfg.resolved_seeds(r)).collect(),
            started_unix: unix_time(),
            finished_unix: None,
            config_toml,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub notes: Vec<String>,
    pub replicates: usize,
    pub eval_docs: usize,
    pub test_docs: usize,
    pub test_oov_rate: f64,
    pub diffinit: Option<Vec<DiffInitReplicate>>,
    pub untrained: Option<Vec<UntrainedReplicate>>,
    /// Keyed by file stem under `tables/`.
    pub tables: BTreeMap<String, ReportTable>,
    pub within_units: Vec<WithinUnitsRow>,
    /// Sections that were not run.
    pub gaps: Vec<String>,
    pub provenance: Provenance,
}

impl TestReport {
    pub fn table(&self, name: &str) -> Option<&ReportTable> {
        self.tables.get(name)
    }

    /// Mean infidelity for `(variant, method)` averaged over replicates.
    pub fn mean_infidelity(&self, variant: Variant, method: &str) -> Option<f64> {
        let t = self.table(&format!("infidelity_{}", variant.name().to_lowercase()))?;
        mean_of(t.row(method)?)
    }

    pub fn mean_jaccard(&self, k: f64, pair: (Variant, Variant), method: &str) -> Option<f64> {
        let t = self.table(&jaccard_table_name(k, pair))?;
        mean_of(t.row(method)?)
    }
}

fn mean_of(vals: &[Option<f64>]) -> Option<f64> {
    let v: Vec<f64> = vals.iter().flatten().copied().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn jaccard_table_name(k: f64, pair: (Variant, Variant)) -> String {
    format!(
        "jaccard{}_{}_vs_{}",
        k_label(k).replace('.', "_"),
        pair.0.name().to_lowercase(),
        pair.1.name().to_lowercase()
    )
}

fn rep_columns(n: usize) -> Vec<String> {
    (0..n).map(|r| format!("rep{r}")).collect()
}

/// Per-method mean of `metric` for `model` in each replicate's records.
fn method_table(
    name: String,
    rows: &[RowSpec],
    per_rep: &[&[MetricRecord]],
    model: &str,
    metric: &str,
    flipped_only: Option<&[&[MetricRecord]]>,
) -> Result<ReportTable> {
    let mut t = ReportTable::new(name, rows.iter().map(|r| r.label.clone()).collect(), rep_columns(per_rep.len()));
    for (r, records) in per_rep.iter().enumerate() {
        let selected: Vec<MetricRecord> = match flipped_only {
            None => records.to_vec(),
            Some(_) => {
                let censored: BTreeSet<(&str, &str)> = records
                    .iter()
                    .filter(|x| x.metric == "censored" && x.model == model && x.value == 1.0)
                    .map(|x| (x.doc_id.as_str(), x.method.as_str()))
                    .collect();
                records
                    .iter()
                    .filter(|x| !censored.contains(&(x.doc_id.as_str(), x.method.as_str())))
                    .cloned()
                    .collect()
            }
        };
        let agg = report::aggregate(&selected, metric);
        for row in rows {
            if let Some(v) = agg.get(&(row.label.clone(), model.to_string())) {
                t.set(&row.label, &format!("rep{r}"), *v)?;
            }
        }
    }
    Ok(t)
}

fn mean_over_columns(t: &ReportTable, columns: Vec<String>, sources: &[&ReportTable], name: &str) -> Result<ReportTable> {
    let mut out = ReportTable::new(name, t.rows.clone(), columns.clone());
    for (col, src) in columns.iter().zip(sources) {
        for row in &t.rows {
            if let Some(m) = src.row(row).and_then(mean_of) {
                out.set(row, col, m)?;
            }
        }
    }
    Ok(out)
}

/// Builds every table from the per-document records, writes `tables/`,
/// `figures/` and `report.json`.
pub fn assemble_report(exp: &Experiment, sections: &Sections, provenance: Provenance) -> Result<TestReport> {
    if sections.diffinit.is_none() && sections.untrained.is_none() {
        return Err(Error::contract("assemble_report: no sections to assemble"));
    }
    let cfg = &exp.cfg;
    let rows = row_specs(cfg);
    let jrows = jaccard_rows(cfg);
    let n = cfg.replicates;
    let mut tables: BTreeMap<String, ReportTable> = BTreeMap::new();
    let mut gaps = Vec::new();
    let mut notes = vec![
        format!(
            "Jaccard and within-{} counts use seed replicates as cells ({} replicate(s), one corpus, one architecture).",
            cfg.evaluation.within_units, n
        ),
        "Splits are stratified by class.".into(),
        "Infidelity counts documents whose prediction never changes at 100 (censored); censored fractions and flipped-only means are reported alongside.".into(),
        format!("Attributions explain the {:?} of the predicted class.", cfg.attribution.target).to_lowercase(),
        "SmoothGrad noise is selected on FirstInit by lowest mean infidelity and reused for the other models.".into(),
        "Jaccard values are percentages over token positions; the uniform random baseline is excluded from Jaccard tables.".into(),
    ];

    let mut acc = ReportTable::new("accuracy", Vec::new(), rep_columns(n)).with_row_label("model");
    let mut overlap = ReportTable::new("prediction_overlap", Vec::new(), rep_columns(n)).with_row_label("pair");
    let mut infid: BTreeMap<Variant, Vec<&[MetricRecord]>> = BTreeMap::new();

    let mut jaccard_pairs: Vec<((Variant, Variant), Vec<&[MetricRecord]>)> = Vec::new();
    if let Some(d) = &sections.diffinit {
        for v in [Variant::FirstInit, Variant::SecondInit] {
            acc.rows.push(v.to_string());
            acc.values.push(vec![None; n]);
        }
        overlap.rows.push("FirstInit~SecondInit".into());
        overlap.values.push(vec![None; n]);
        for r in d {
            let c = format!("rep{}", r.replicate);
            acc.set("FirstInit", &c, r.accuracy_first)?;
            acc.set("SecondInit", &c, r.accuracy_second)?;
            overlap.set("FirstInit~SecondInit", &c, r.prediction_overlap)?;
        }
        let recs: Vec<&[MetricRecord]> = d.iter().map(|r| r.records.as_slice()).collect();
        infid.insert(Variant::FirstInit, recs.clone());
        infid.insert(Variant::SecondInit, recs.clone());
        jaccard_pairs.push(((Variant::FirstInit, Variant::SecondInit), recs));
    } else {
        gaps.push(DIFFINIT.to_string());
    }
    if let Some(u) = &sections.untrained {
        if !acc.rows.iter().any(|r| r == "FirstInit") {
            acc.rows.push("FirstInit".into());
            acc.values.push(vec![None; n]);
        }
        acc.rows.push("RandInit".into());
        acc.values.push(vec![None; n]);
        overlap.rows.push("FirstInit~RandInit".into());
        overlap.values.push(vec![None; n]);
        for r in u {
            let c = format!("rep{}", r.replicate);
            acc.set("FirstInit", &c, r.accuracy_first)?;
            acc.set("RandInit", &c, r.accuracy_rand)?;
            overlap.set("FirstInit~RandInit", &c, r.prediction_overlap)?;
        }
        let recs: Vec<&[MetricRecord]> = u.iter().map(|r| r.records.as_slice()).collect();
        infid.entry(Variant::FirstInit).or_insert_with(|| recs.clone());
        infid.insert(Variant::RandInit, recs.clone());
        jaccard_pairs.push(((Variant::FirstInit, Variant::RandInit), recs));
        let flagged: Vec<usize> = u.iter().filter(|r| r.constant_prediction).map(|r| r.replicate).collect();
        if !flagged.is_empty() {
            notes.push(format!(
                "Constant-prediction diagnostic: RandInit predicts a single class in replicate(s) {flagged:?}; its infidelities are all censored at 100 and are excluded from the untrained-model comparison."
            ));
        }
    } else {
        gaps.push(UNTRAINED.to_string());
    }
    tables.insert("accuracy".into(), acc);
    tables.insert("prediction_overlap".into(), overlap);

    let sigma_reps: Vec<&SigmaSelection> = sections
        .diffinit
        .iter()
        .flat_map(|d| d.iter().filter_map(|r| r.sg_sigma.as_ref()))
        .chain(
            sections
                .untrained
                .iter()
                .filter(|_| sections.diffinit.is_none())
                .flat_map(|u| u.iter().filter_map(|r| r.sg_sigma.as_ref())),
        )
        .collect();
    if !sigma_reps.is_empty() {
        let grid: Vec<String> = cfg.attribution.sg_sigma_grid.iter().map(|s| format!("{s}")).collect();
        let mut t = ReportTable::new("sg_sigma", grid.clone(), rep_columns(sigma_reps.len())).with_row_label("sigma");
        for (r, sel) in sigma_reps.iter().enumerate() {
            for (s, m) in &sel.scores {
                t.set(&format!("{s}"), &format!("rep{r}"), *m)?;
            }
        }
        tables.insert("sg_sigma".into(), t);
    }

    for (variant, recs) in &infid {
        let stem = variant.name().to_lowercase();
        let model = variant.to_string();
        for (prefix, metric, flipped) in [
            ("infidelity", "infidelity", false),
            ("infidelity_flipped", "infidelity", true),
            ("censored", "censored", false),
        ] {
            let name = format!("{prefix}_{stem}");
            let t = method_table(name.clone(), &rows, recs, &model, metric, flipped.then_some(recs.as_slice()))?;
            tables.insert(name, t);
        }
    }

    for (pair, recs) in &jaccard_pairs {
        let model = format!("{}~{}", pair.0, pair.1);
        for &k in &cfg.evaluation.k_percent {
            let name = jaccard_table_name(k, *pair);
            let t = method_table(name.clone(), &jrows, recs, &model, &format!("jaccard@{}", k_label(k)), None)?;
            tables.insert(name, t);
        }
    }

    let mut within_units = Vec::new();
    if sections.diffinit.is_some() && sections.untrained.is_some() {
        for &k in &cfg.evaluation.k_percent {
            let a = &tables[&jaccard_table_name(k, (Variant::FirstInit, Variant::SecondInit))];
            let b = &tables[&jaccard_table_name(k, (Variant::FirstInit, Variant::RandInit))];
            if !(a.is_complete() && b.is_complete()) {
                gaps.push(format!("within-units counts at K={} (empty agreeing subset)", k_label(k)));
                continue;
            }
            for c in within_units_count(a, b, cfg.evaluation.within_units)? {
                within_units.push(WithinUnitsRow {
                    k_percent: k,
                    method: c.method,
                    count: c.count,
                    total: c.total,
                });
            }
        }
    }

    // rendered artifacts
    let tables_dir = exp.out.join("tables");
    for (name, t) in &tables {
        write_atomic(&tables_dir.join(format!("{name}.csv")), t.to_csv())?;
    }
    if !within_units.is_empty() {
        let mut s = String::from("method,k_percent,count,total\n");
        for w in &within_units {
            s.push_str(&format!("{},{},{},{}\n", w.method, k_label(w.k_percent), w.count, w.total));
        }
        write_atomic(&tables_dir.join("within_units.csv"), s)?;
    }
    let figures = exp.out.join("figures");
    let infid_sources: Vec<(String, &ReportTable)> = [Variant::FirstInit, Variant::SecondInit, Variant::RandInit]
        .iter()
        .filter_map(|v| tables.get(&format!("infidelity_{}", v.name().to_lowercase())).map(|t| (v.to_string(), t)))
        .collect();
    if let Some((_, first)) = infid_sources.first() {
        let chart = mean_over_columns(
            first,
            infid_sources.iter().map(|(n, _)| n.clone()).collect(),
            &infid_sources.iter().map(|(_, t)| *t).collect::<Vec<_>>(),
            "mean_infidelity",
        )?;
        write_atomic(&figures.join("infidelity.svg"), bar_chart_svg(&chart, "Mean infidelity (% tokens dropped)", 100.0))?;
    }
    for &k in &cfg.evaluation.k_percent {
        let srcs: Vec<(String, &ReportTable)> = jaccard_pairs
            .iter()
            .filter_map(|(p, _)| tables.get(&jaccard_table_name(k, *p)).map(|t| (format!("{}~{}", p.0, p.1), t)))
            .collect();
        if let Some((_, first)) = srcs.first() {
            let chart = mean_over_columns(
                first,
                srcs.iter().map(|(n, _)| n.clone()).collect(),
                &srcs.iter().map(|(_, t)| *t).collect::<Vec<_>>(),
                "mean_jaccard",
            )?;
            write_atomic(
                &figures.join(format!("jaccard{}.svg", k_label(k).replace('.', "_"))),
                bar_chart_svg(&chart, &format!("Mean Jaccard@{}% (percent)", k_label(k)), 100.0),
            )?;
        }
    }

    let mut provenance = provenance;
    provenance.finished_unix = Some(unix_time());
    let report = TestReport {
        notes,
        replicates: n,
        eval_docs: exp.eval_docs.len(),
        test_docs: exp.split.test.len(),
        test_oov_rate: exp.split.test_oov_rate(),
        diffinit: sections.diffinit.clone(),
        untrained: sections.untrained.clone(),
        tables,
        within_units,
        gaps,
        provenance,
    };
    write_atomic(&exp.out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

/// Recomputes every method table from `records/` and checks it renders to
/// the same CSV as `tables/`.
pub fn verify_tables(out: &Path, cfg: &ExperimentConfig) -> Result<Vec<String>> {
    let rows = row_specs(cfg);
    let jrows = jaccard_rows(cfg);
    let mut checked = Vec::new();
    let load = |test: &str| -> Result<Option<Vec<Vec<MetricRecord>>>> {
        let mut reps = Vec::new();
        for r in 0..cfg.replicates {
            let p = out.join("records").join(format!("rep{r}")).join(format!("{test}.csv"));
            match std::fs::read_to_string(&p) {
                Ok(t) => reps.push(report::records_from_csv(&t)?),
                Err(_) => return Ok(None),
            }
        }
        Ok(Some(reps))
    };
    let mut compare = |name: String, t: ReportTable| -> Result<()> {
        let p = out.join("tables").join(format!("{name}.csv"));
        let on_disk = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        if on_disk != t.to_csv() {
            return Err(Error::contract(format!("{name}.csv differs from its recomputation")));
        }
        checked.push(name);
        Ok(())
    };
    let diff = load(DIFFINIT)?;
    let untr = load(UNTRAINED)?;
    let mut infid: BTreeMap<Variant, Vec<Vec<MetricRecord>>> = BTreeMap::new();
    let mut pairs = Vec::new();
    if let Some(d) = &diff {
        infid.insert(Variant::FirstInit, d.clone());
        infid.insert(Variant::SecondInit, d.clone());
        pairs.push(((Variant::FirstInit, Variant::SecondInit), d.clone()));
    }
    if let Some(u) = &untr {
        infid.entry(Variant::FirstInit).or_insert_with(|| u.clone());
        infid.insert(Variant::RandInit, u.clone());
        pairs.push(((Variant::FirstInit, Variant::RandInit), u.clone()));
    }
    for (v, recs) in &infid {
        let refs: Vec<&[MetricRecord]> = recs.iter().map(Vec::as_slice).collect();
        let name = format!("infidelity_{}", v.name().to_lowercase());
        compare(name.clone(), method_table(name, &rows, &refs, v.name(), "infidelity", None)?)?;
    }
    for (p, recs) in &pairs {
        let refs: Vec<&[MetricRecord]> = recs.iter().map(Vec::as_slice).collect();
        for &k in &cfg.evaluation.k_percent {
            let name = jaccard_table_name(k, *p);
            let model = format!("{}~{}", p.0, p.1);
            compare(
                name.clone(),
                method_table(name, &jrows, &refs, &model, &format!("jaccard@{}", k_label(k)), None)?,
            )?;
        }
    }
    Ok(checked)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.data.synthetic.n_docs = 240;
        cfg.model.embed_dim = 8;
        cfg.model.encoder_dim = 8;
        cfg.model.hidden_units = 16;
        cfg.train.learning_rates = vec![1e-2];
        cfg.train.max_epochs = 6;
        cfg.train.patience = 2;
        cfg.attribution.sg_sigma_grid = vec![0.05, 0.1];
        cfg.attribution.ig_steps = 8;
        cfg.attribution.shap_coalitions = Some(64);
        cfg.attribution.reductions = vec![Reduction::L2, Reduction::InputDotGrad];
        cfg.evaluation.eval_subsample = 12;
        cfg
    }

    #[test]
    fn row_specs_label_extra_reductions() {
        let labels: Vec<String> = row_specs(&tiny()).into_iter().map(|r| r.label).collect();
        assert_eq!(
            labels,
            ["VN", "VN:input_dot_grad", "SG", "SG:input_dot_grad", "IG", "IG:input_dot_grad", "SHP", "RND"]
        );
    }

    #[test]
    fn eval_subsample_larger_than_test_split_is_a_config_error() {
        let mut cfg = tiny();
        cfg.evaluation.eval_subsample = 10_000;
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Experiment::prepare(cfg, dir.path()), Err(Error::Config { .. })));
    }

    #[test]
    fn end_to_end_tiny_run_is_resumable_and_traceable() {
        let dir = tempfile::tempdir().unwrap();
        let exp = Experiment::prepare(tiny(), dir.path()).unwrap();
        let sections = Sections {
            diffinit: Some(run_test_diffinit(&exp).unwrap()),
            untrained: Some(run_test_untrained(&exp).unwrap()),
        };
        let prov = Provenance::new(&exp.cfg, String::new());
        let report = assemble_report(&exp, &sections, prov.clone()).unwrap();
        assert!(report.gaps.is_empty());
        for name in ["accuracy", "prediction_overlap", "infidelity_firstinit", "infidelity_randinit"] {
            assert!(report.tables.contains_key(name), "{name}");
        }
        assert!(report.table("jaccard25_firstinit_vs_secondinit").is_some());
        assert!(dir.path().join("tables/within_units.csv").exists());
        assert!(dir.path().join("figures/infidelity.svg").exists());
        let checked = verify_tables(dir.path(), &exp.cfg).unwrap();
        assert!(checked.len() >= 7);

        // Second pass over the same directory reuses every artifact.
        let before = std::fs::read_to_string(dir.path().join("tables/infidelity_firstinit.csv")).unwrap();
        let exp2 = Experiment::prepare(tiny(), dir.path()).unwrap();
        let sections2 = Sections {
            diffinit: Some(run_test_diffinit(&exp2).unwrap()),
            untrained: None,
        };
        let r2 = assemble_report(&exp2, &sections2, prov).unwrap();
        assert_eq!(r2.gaps, vec![UNTRAINED.to_string()]);
        let after = std::fs::read_to_string(dir.path().join("tables/infidelity_firstinit.csv")).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn empty_sections_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let exp = Experiment::prepare(tiny(), dir.path()).unwrap();
        let prov = Provenance::new(&exp.cfg, String::new());
        assert!(assemble_report(&exp, &Sections::default(), prov).is_err());
    }
}
