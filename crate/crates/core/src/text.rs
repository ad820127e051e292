//! Tokenization, vocabulary, corpus ingestion and train/validation/test
//! splitting.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";

/// Lowercases, splits on whitespace and detaches every punctuation
/// character as its own token.
pub fn split_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut cur = String::new();
        for ch in chunk.chars() {
            if ch.is_ascii_punctuation() || (!ch.is_alphanumeric() && !ch.is_whitespace()) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.extend(ch.to_lowercase());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    index: HashMap<String, usize>,
    tokens: Vec<String>,
    max_seq_len: usize,
}

impl Vocab {
    /// Builds a vocabulary from `texts`, keeping tokens that occur at least
    /// `min_freq` times, most frequent first (ties lexicographic), capped at
    /// `max_size` entries excluding the reserved ids.
    pub fn build<'a, I>(texts: I, min_freq: usize, max_size: usize, max_seq_len: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for tok in split_tokens(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_freq && t != PAD_TOKEN && t != UNK_TOKEN)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        kept.truncate(max_size);
        Self::from_tokens(kept.into_iter().map(|(t, _)| t), max_seq_len)
    }

    /// Reserved tokens are prepended; `tokens` receive ids 2, 3, ...
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I, max_seq_len: usize) -> Result<Self> {
        if max_seq_len == 0 {
            return Err(Error::contract("max_seq_len must be positive"));
        }
        let mut list = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        list.extend(tokens);
        let mut index = HashMap::with_capacity(list.len());
        for (i, t) in list.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::contract(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Self {
            index,
            tokens: list,
            max_seq_len,
        })
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn max_seq_len(&self) -> usize {
        self.max_seq_len
    }

    /// `token<TAB>id` lines in id order.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            let _ = writeln!(s, "{t}\t{i}");
        }
        s
    }

    pub fn from_tsv(text: &str, max_seq_len: usize) -> Result<Self> {
        let mut tokens = Vec::new();
        for (row, line) in text.lines().enumerate() {
            let (tok, id) = line.rsplit_once('\t').ok_or_else(|| Error::Ingestion {
                row: row + 1,
                message: "expected `token<TAB>id`".into(),
            })?;
            let id: usize = id.trim().parse().map_err(|_| Error::Ingestion {
                row: row + 1,
                message: format!("bad id `{id}`"),
            })?;
            if id != row {
                return Err(Error::Ingestion {
                    row: row + 1,
                    message: format!("ids must be contiguous; expected {row}, found {id}"),
                });
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < 2 || tokens[PAD_ID] != PAD_TOKEN || tokens[UNK_ID] != UNK_TOKEN {
            return Err(Error::contract("vocabulary must start with [PAD] and [UNK]"));
        }
        Self::from_tokens(tokens.into_iter().skip(2), max_seq_len)
    }
}

/// Document as an ordered sequence of vocabulary ids plus surface tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedDoc {
    pub doc_id: String,
    pub tokens: Vec<String>,
    pub ids: Vec<usize>,
    pub label: usize,
}

impl TokenizedDoc {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn with_doc_id(mut self, id: impl Into<String>) -> Self {
        self.doc_id = id.into();
        self
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = label;
        self
    }

    /// Builds a document straight from ids (surface tokens are taken from
    /// `vocab`).
    pub fn from_ids(doc_id: impl Into<String>, ids: Vec<usize>, label: usize, vocab: &Vocab) -> Self {
        let tokens = ids
            .iter()
            .map(|&i| vocab.token(i).unwrap_or(UNK_TOKEN).to_string())
            .collect();
        Self {
            doc_id: doc_id.into(),
            tokens,
            ids,
            label,
        }
    }
}

/// Tokenizes `text`; `doc_id` is empty and `label` is 0 until set.
pub fn tokenize(text: &str, vocab: &Vocab) -> Result<TokenizedDoc> {
    let mut tokens = split_tokens(text);
    if tokens.is_empty() {
        return Err(Error::contract("text tokenizes to zero tokens"));
    }
    tokens.truncate(vocab.max_seq_len);
    let ids = tokens.iter().map(|t| vocab.id(t)).collect();
    Ok(TokenizedDoc {
        doc_id: String::new(),
        tokens,
        ids,
        label: 0,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub doc_id: String,
    pub text: String,
    pub label: usize,
}

/// Records plus the label-name map (`labels[i]` is the name of class `i`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub records: Vec<Record>,
    pub labels: Vec<String>,
}

impl Corpus {
    pub fn class_count(&self) -> usize {
        self.labels.len()
    }

    /// `label<TAB>index` lines.
    pub fn label_map_tsv(&self) -> String {
        let mut s = String::new();
        for (i, l) in self.labels.iter().enumerate() {
            let _ = writeln!(s, "{l}\t{i}");
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    Csv,
    Tsv,
}

impl CorpusFormat {
    fn delimiter(self) -> u8 {
        match self {
            CorpusFormat::Csv => b',',
            CorpusFormat::Tsv => b'\t',
        }
    }

    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("tsv") => CorpusFormat::Tsv,
            _ => CorpusFormat::Csv,
        }
    }
}

pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Corpus> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&bytes, format)
}

pub fn parse_corpus(bytes: &[u8], format: CorpusFormat) -> Result<Corpus> {
    if bytes.iter().all(|b| b.is_ascii_whitespace()) {
        return Err(Error::Ingestion {
            row: 0,
            message: "empty file".into(),
        });
    }
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(format.delimiter())
        .from_reader(bytes);
    let headers = rdr.headers().map_err(|e| Error::Ingestion {
        row: 1,
        message: e.to_string(),
    })?;
    let col = |name: &str| {
        headers.iter().position(|h| h.trim() == name).ok_or_else(|| Error::Ingestion {
            row: 1,
            message: format!("missing column `{name}`"),
        })
    };
    let (text_col, label_col) = (col("text")?, col("label")?);

    let mut labels: Vec<String> = Vec::new();
    let mut label_index: HashMap<String, usize> = HashMap::new();
    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::Ingestion {
            row: line,
            message: e.to_string(),
        })?;
        let (Some(text), Some(label)) = (row.get(text_col), row.get(label_col)) else {
            return Err(Error::Ingestion {
                row: line,
                message: "row is missing the text or label field".into(),
            });
        };
        let label = label.trim();
        if label.is_empty() {
            return Err(Error::Ingestion {
                row: line,
                message: "empty label".into(),
            });
        }
        let idx = *label_index.entry(label.to_string()).or_insert_with(|| {
            labels.push(label.to_string());
            labels.len() - 1
        });
        records.push(Record {
            doc_id: format!("doc{}", records.len()),
            text: text.to_string(),
            label: idx,
        });
    }
    if records.is_empty() {
        return Err(Error::Ingestion {
            row: 1,
            message: "empty file".into(),
        });
    }
    if labels.len() < 2 {
        return Err(Error::Ingestion {
            row: 1,
            message: "at least 2 classes required".into(),
        });
    }
    Ok(Corpus { records, labels })
}

pub fn corpus_to_bytes(corpus: &Corpus, format: CorpusFormat) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .delimiter(format.delimiter())
        .from_writer(Vec::new());
    w.write_record(["text", "label"])?;
    for r in &corpus.records {
        w.write_record([r.text.as_str(), corpus.labels[r.label].as_str()])?;
    }
    w.into_inner()
        .map_err(|e| Error::contract(format!("csv writer: {e}")))
}

pub fn write_corpus(path: &Path, corpus: &Corpus, format: CorpusFormat) -> Result<()> {
    std::fs::write(path, corpus_to_bytes(corpus, format)?).map_err(|e| Error::io(path, e))
}

/// Parameters of the planted-keyword generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_docs: usize,
    pub classes: usize,
    /// Keywords plus filler words. Rare filler words fall below the
    /// vocabulary frequency cutoff and become UNK.
    pub vocab_size: usize,
    pub keywords_per_class: usize,
    pub doc_len_min: usize,
    pub doc_len_max: usize,
    /// 0 gives class-independent documents, 1 plants only own-class keywords.
    pub keyword_strength: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_docs: 2000,
            classes: 2,
            vocab_size: 3000,
            keywords_per_class: 30,
            doc_len_min: 8,
            doc_len_max: 20,
            keyword_strength: 0.6,
        }
    }
}

impl SyntheticSpec {
    pub fn keyword(class: usize, j: usize) -> String {
        format!("kw{class}x{j}")
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::contract("synthetic corpus needs at least 2 classes"));
        }
        if self.keywords_per_class == 0 {
            return Err(Error::contract("keywords_per_class must be positive"));
        }
        if self.vocab_size < self.classes * self.keywords_per_class + 10 {
            return Err(Error::contract("vocab_size must leave at least 10 filler words"));
        }
        if self.doc_len_min < 4 || self.doc_len_max < self.doc_len_min {
            return Err(Error::contract("document length bounds must satisfy 4 <= min <= max"));
        }
        if !(0.0..=1.0).contains(&self.keyword_strength) {
            return Err(Error::contract("keyword_strength must lie in [0, 1]"));
        }
        if self.n_docs < self.classes {
            return Err(Error::contract("n_docs must be at least the class count"));
        }
        Ok(())
    }
}

const MAX_DRAWS: usize = 100_000;

/// Planted-keyword corpus: every class owns a disjoint keyword set; the rest
/// of the vocabulary is Zipf-distributed filler.
///
/// Each document carries between 2 and `len/4` keywords. A keyword belongs to
/// the document's own class with probability `1/K + s(1 - 1/K)` (`s` =
/// keyword strength) and to a uniformly chosen other class otherwise. For
/// `s > 0` the draw is repeated until the own class has strictly the most
/// keywords, so a keyword-count argmax classifies every document correctly.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Corpus> {
    spec.validate()?;
    let k = spec.classes;
    let per_class = spec.keywords_per_class;
    let filler_n = spec.vocab_size - k * per_class;
    let zipf = WeightedIndex::new((0..filler_n).map(|r| 1.0 / (r as f64 + 1.0)))
        .map_err(|e| Error::contract(e.to_string()))?;
    let own_p = 1.0 / k as f64 + spec.keyword_strength * (1.0 - 1.0 / k as f64);
    let mut rng = seed::rng(seed);

    let mut records = Vec::with_capacity(spec.n_docs);
    for i in 0..spec.n_docs {
        let label = i % k;
        let len = rng.random_range(spec.doc_len_min..=spec.doc_len_max);
        let n_kw = rng.random_range(2..=(len / 4).max(2));
        let mut kw_classes = vec![0usize; n_kw];
        let mut accepted = false;
        for _ in 0..MAX_DRAWS {
            let mut counts = vec![0usize; k];
            for c in kw_classes.iter_mut() {
                *c = if rng.random::<f64>() < own_p {
                    label
                } else {
                    let o = rng.random_range(0..k - 1);
                    if o >= label {
                        o + 1
                    } else {
                        o
                    }
                };
                counts[*c] += 1;
            }
            let own = counts[label];
            if spec.keyword_strength == 0.0 || counts.iter().enumerate().all(|(c, &n)| c == label || n < own) {
                accepted = true;
                break;
            }
        }
        if !accepted {
            return Err(Error::contract("keyword_strength too low to plant a majority"));
        }
        let mut tokens: Vec<String> = kw_classes
            .iter()
            .map(|&c| SyntheticSpec::keyword(c, rng.random_range(0..per_class)))
            .collect();
        tokens.extend((0..len - n_kw).map(|_| format!("w{}", zipf.sample(&mut rng))));
        tokens.shuffle(&mut rng);
        records.push(Record {
            doc_id: format!("doc{i}"),
            text: tokens.join(" "),
            label,
        });
    }
    Ok(Corpus {
        records,
        labels: (0..k).map(|c| format!("class{c}")).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<TokenizedDoc>,
    pub validation: Vec<TokenizedDoc>,
    pub test: Vec<TokenizedDoc>,
    pub split_seed: u64,
    pub class_count: usize,
    pub stratified: bool,
}

impl DatasetSplit {
    /// Fraction of test tokens mapped to UNK.
    pub fn test_oov_rate(&self) -> f64 {
        let total: usize = self.test.iter().map(TokenizedDoc::len).sum();
        let unk = self.test.iter().flat_map(|d| &d.ids).filter(|&&i| i == UNK_ID).count();
        if total == 0 {
            0.0
        } else {
            unk as f64 / total as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocabConfig {
    pub min_freq: usize,
    pub max_size: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self {
            min_freq: 2,
            max_size: 20_000,
        }
    }
}

/// Index-level split before tokenization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Largest-remainder apportionment of `total` across `weights`.
fn apportion(weights: &[usize], total: usize) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let mut out: Vec<usize> = weights.iter().map(|&w| w * total / sum).collect();
    let mut rem: Vec<(usize, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| ((w * total) % sum, i))
        .collect();
    rem.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let short = total - out.iter().sum::<usize>();
    for &(_, i) in rem.iter().take(short) {
        out[i] += 1;
    }
    out
}

/// Stratified shuffle split. `test_ratio` of the corpus goes to test;
/// `val_fraction` of the remainder goes to validation.
pub fn split_indices(
    labels: &[usize],
    class_count: usize,
    ratios: (f64, f64),
    val_fraction: f64,
    seed: u64,
) -> Result<SplitIndices> {
    let (train_r, test_r) = ratios;
    if train_r < 0.0 || test_r < 0.0 || (train_r + test_r - 1.0).abs() > 1e-9 {
        return Err(Error::contract(format!(
            "split ratios must be non-negative and sum to 1, got ({train_r}, {test_r})"
        )));
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::contract(format!(
            "val_fraction must lie in (0, 1), got {val_fraction}"
        )));
    }
    let n = labels.len();
    let n_test = (n as f64 * test_r).round() as usize;
    let n_val = ((n - n_test) as f64 * val_fraction).round() as usize;
    let n_train = n - n_test - n_val;
    for (name, size) in [("train", n_train), ("validation", n_val), ("test", n_test)] {
        if size == 0 {
            return Err(Error::contract(format!("empty {name} split")));
        }
    }

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); class_count];
    for (i, &l) in labels.iter().enumerate() {
        if l >= class_count {
            return Err(Error::contract(format!("label {l} out of range")));
        }
        by_class[l].push(i);
    }
    let mut rng = seed::rng(seed);
    for idx in by_class.iter_mut() {
        idx.shuffle(&mut rng);
    }
    let counts: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let test_q = apportion(&counts, n_test);
    let rest: Vec<usize> = counts.iter().zip(&test_q).map(|(c, t)| c - t).collect();
    let val_q = apportion(&rest, n_val);

    let mut out = SplitIndices {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for (c, idx) in by_class.iter().enumerate() {
        out.test.extend_from_slice(&idx[..test_q[c]]);
        out.validation.extend_from_slice(&idx[test_q[c]..test_q[c] + val_q[c]]);
        out.train.extend_from_slice(&idx[test_q[c] + val_q[c]..]);
    }
    out.train.shuffle(&mut rng);
    out.validation.shuffle(&mut rng);
    out.test.shuffle(&mut rng);
    Ok(out)
}

/// Splits, builds the vocabulary from the train split only, and tokenizes
/// every document.
pub fn split_dataset(
    corpus: &Corpus,
    ratios: (f64, f64),
    val_fraction: f64,
    seed: u64,
    vocab_cfg: VocabConfig,
    max_seq_len: usize,
) -> Result<(DatasetSplit, Vocab)> {
    let labels: Vec<usize> = corpus.records.iter().map(|r| r.label).collect();
    let idx = split_indices(&labels, corpus.class_count(), ratios, val_fraction, seed)?;
    let vocab = Vocab::build(
        idx.train.iter().map(|&i| corpus.records[i].text.as_str()),
        vocab_cfg.min_freq,
        vocab_cfg.max_size,
        max_seq_len,
    )?;
    let docs = |ix: &[usize]| -> Result<Vec<TokenizedDoc>> {
        ix.iter()
            .map(|&i| {
                let r = &corpus.records[i];
                tokenize(&r.text, &vocab).map(|d| d.with_doc_id(r.doc_id.clone()).with_label(r.label))
            })
            .collect()
    };
    let split = DatasetSplit {
        train: docs(&idx.train)?,
        validation: docs(&idx.validation)?,
        test: docs(&idx.test)?,
        split_seed: seed,
        class_count: corpus.class_count(),
        stratified: true,
    };
    Ok((split, vocab))
}

/// Per-class proportions of `labels`.
pub fn class_proportions(labels: impl IntoIterator<Item = usize>, class_count: usize) -> Vec<f64> {
    let mut counts = BTreeMap::new();
    let mut n = 0usize;
    for l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
        n += 1;
    }
    (0..class_count)
        .map(|c| counts.get(&c).copied().unwrap_or(0) as f64 / n.max(1) as f64)
        .collect()
}
