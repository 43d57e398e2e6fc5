use xqnet::bench::{bench_throughput, summarize, BenchConfig, BenchReport};
use xqnet::blocks::GateKind;
use xqnet::model::{Model, ModelSpec};
use xqnet::Error;

fn model() -> Model {
    Model::build(ModelSpec::exquisitenet_v2(GateKind::Ln, 10), 0).unwrap()
}

#[test]
fn default_run_reports_every_batch_size() {
    let rep = bench_throughput(&model(), &BenchConfig::default()).unwrap();
    assert_eq!(
        rep.rows.iter().map(|r| r.batch).collect::<Vec<_>>(),
        [1, 10, 50]
    );
    for r in &rep.rows {
        assert_eq!(r.repeats, 5);
        assert!(r.mean_ms > 0.0 && r.std_ms >= 0.0);
        assert_eq!(r.img_per_s, r.batch as f64 * 1000.0 / r.mean_ms);
    }
    let csv = rep.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(BenchReport::CSV_HEADER));
    assert_eq!(lines.count(), 3);
}

#[test]
fn sharded_run_uses_all_threads() {
    let cfg = BenchConfig {
        batch_sizes: vec![4],
        repeats: 3,
        threads: 2,
        ..BenchConfig::default()
    };
    let rep = bench_throughput(&model(), &cfg).unwrap();
    assert_eq!(rep.rows.len(), 1);
    assert_eq!(rep.rows[0].repeats, 3);
}

#[test]
fn rejects_too_few_repeats_or_bad_sizes() {
    let m = model();
    for cfg in [
        BenchConfig {
            repeats: 2,
            ..BenchConfig::default()
        },
        BenchConfig {
            warmup: 0,
            ..BenchConfig::default()
        },
        BenchConfig {
            batch_sizes: vec![0],
            ..BenchConfig::default()
        },
        BenchConfig {
            threads: 0,
            ..BenchConfig::default()
        },
    ] {
        assert!(
            matches!(bench_throughput(&m, &cfg), Err(Error::Config(_))),
            "{cfg:?}"
        );
    }
    let cfg = BenchConfig {
        hw: 20,
        ..BenchConfig::default()
    };
    assert!(matches!(bench_throughput(&m, &cfg), Err(Error::Shape(_))));
}

#[test]
fn summary_identity_is_exact() {
    for (batch, samples) in [
        (1, vec![3.0, 5.0, 4.0]),
        (50, vec![120.5, 118.25, 130.0, 99.0]),
    ] {
        let r = summarize(batch, &samples);
        assert_eq!(r.img_per_s, batch as f64 * 1000.0 / r.mean_ms);
    }
}
