// Jaccard@25% on three worked examples, and the within-10-units count on
// the reference Jaccard tables stored under `tests/fixtures`.

use attrib_robust::attribution::{AttributionOutput, Method, Reduction};
use attrib_robust::metrics::jaccard_at_k;
use attrib_robust::report::{within_units_count, ReportTable, WithinCount};

/// Descending scores for `top` (in order), zero for every other position.
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

pub struct Golden {
    pub jaccard: [f64; 3],
    pub within: Vec<WithinCount>,
}

pub fn worked_examples() -> attrib_robust::Result<[f64; 3]> {
    let cases: [(&str, &[&str], &[&str]); 3] = [
        (
            "[CLS] at heart the movie is a def ##tly wrought suspense yarn whose richer shadings work as coloring rather than substance [SEP]",
            &["substance", "rather", "at", "yarn", "coloring", "movie"],
            &["heart", "##tly", "suspense", "at", "yarn", "def"],
        ),
        (
            "[CLS] an infectious cultural fable with a tasty balance of family drama and fren ##etic comedy [SEP]",
            &["fable", "infectious", "cultural", "balance", "an"],
            &["cultural", "balance", "infectious", "fable", "an"],
        ),
        (
            "nokia shares hit 13 . 21 euros on friday , down 50 percent from the start of the year in part because of the slow introduction of touch - screen models",
            &[",", ".", "down", "friday", "shares", "euros", "nokia", "hit"],
            &[",", ".", "down", "euros", "friday", "hit", "shares", "nokia"],
        ),
    ];
    let mut out = [0.0; 3];
    for (i, (text, a, b)) in cases.iter().enumerate() {
        let tokens: Vec<&str> = text.split(' ').collect();
        let id = format!("example{}", i + 1);
        let j = jaccard_at_k(&ranked(&id, &tokens, a), &ranked(&id, &tokens, b), 25.0)?;
        out[i] = 100.0 * j.value;
        println!("{id}: L={} top-25% size {:?}, Jaccard@25% = {}", tokens.len(), j.sizes, out[i]);
    }
    Ok(out)
}

pub fn reference_within_counts(k: u32) -> attrib_robust::Result<Vec<WithinCount>> {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures");
    let a = ReportTable::load(&dir.join(format!("jaccard{k}_diffinit.csv")))?;
    let b = ReportTable::load(&dir.join(format!("jaccard{k}_untrained.csv")))?;
    within_units_count(&a, &b, 10.0)
}

pub fn run_example() -> attrib_robust::Result<Golden> {
    let jaccard = worked_examples()?;
    let within = reference_within_counts(25)?;
    for c in &within {
        println!("{}: {c} cells within 10 units", c.method);
    }
    Ok(Golden { jaccard, within })
}

#[allow(dead_code)]
fn main() -> attrib_robust::Result<()> {
    run_example().map(|_| ())
}
