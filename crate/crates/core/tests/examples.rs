mod gradient_check {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/gradient_check.rs"));
}

mod shapley_oracle {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/shapley_oracle.rs"));
}

mod metrics_golden {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/metrics_golden.rs"));
}

mod attribution_methods {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/attribution_methods.rs"));
}

mod train_variants {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/train_variants.rs"));
}

mod randomization_tests {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/randomization_tests.rs"));
}

#[test]
fn gradient_check_example_runs() {
    let err = gradient_check::run_example().expect("gradient check example should run");
    assert!(err < 1e-4, "{err}");
}

#[test]
fn shapley_oracle_example_runs() {
    let (enumerated, sampled) = shapley_oracle::run_example().expect("shapley example should run");
    assert!(enumerated < 1e-9);
    assert!(sampled < 0.05);
}

#[test]
fn metrics_golden_example_runs() {
    let g = metrics_golden::run_example().expect("metrics example should run");
    assert_eq!(g.jaccard, [20.0, 100.0, 100.0]);
    assert_eq!(g.within.len(), 4);
    assert!(g.within.iter().all(|c| c.total == 16));
}

#[test]
fn attribution_methods_example_runs() {
    let gaps = attribution_methods::run_example().expect("attribution example should run");
    assert!(gaps.shap_efficiency < 1e-9);
    assert!(gaps.ig_completeness.is_finite());
}

#[test]
fn train_variants_example_runs() {
    let s = train_variants::run_example().expect("training example should run");
    assert!(s.first >= 0.9 && s.second >= 0.9, "{} {}", s.first, s.second);
    assert!(s.overlap >= 0.88);
}

#[test]
fn randomization_tests_example_runs() {
    let report = randomization_tests::run_example().expect("randomization example should run");
    assert!(report.gaps.is_empty());
    assert!(report.table("jaccard25_firstinit_vs_randinit").is_some());
}
