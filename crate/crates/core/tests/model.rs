use std::collections::BTreeSet;

use xqnet::blocks::GateKind;
use xqnet::model::{checkpoint, format_extent, shape_trace, LayerSpec, Model, ModelSpec};
use xqnet::{Error, Shape, Tensor};

fn build(gate: GateKind, classes: usize, seed: u64) -> Model {
    Model::build(ModelSpec::exquisitenet_v2(gate, classes), seed).unwrap()
}

/// Closed-form count of the reference network at `classes` outputs.
fn closed_form(gate: GateKind, classes: usize) -> usize {
    let gate_params = |c: usize| match gate {
        GateKind::Se => 2 * c * c.div_ceil(3),
        GateKind::Ln => 2 * c,
    };
    let dfsebv2 = |c: usize| 2 * c * c + 18 * c + 8 * c + gate_params(c);
    let fct = 48 + 9 * 12 + 24;
    let eve = 24 * 48 + 96;
    let me = |ci: usize, co: usize| ci * co + 2 * co;
    let tail_dw = 9 * 384 + 2 * 384;
    let fc = 384 * classes + classes;
    fct + eve
        + me(48, 96)
        + me(96, 192)
        + me(192, 384)
        + [12, 48, 96, 192, 384]
            .into_iter()
            .map(dfsebv2)
            .sum::<usize>()
        + tail_dw
        + fc
}

#[test]
fn parameter_totals_match_closed_form() {
    let ln = build(GateKind::Ln, 1000, 0).param_count();
    let se = build(GateKind::Se, 1000, 0).param_count();
    assert_eq!(ln.trainable, closed_form(GateKind::Ln, 1000));
    assert_eq!(se.trainable, closed_form(GateKind::Se, 1000));
    assert_eq!(ln.trainable, 901_228);
    assert_eq!(se.trainable, 1_030_420);
    assert_eq!(se.trainable - ln.trainable, 129_192);
    assert!(ln.trainable < se.trainable && se.trainable < 1_235_400);
    for (total, target) in [(ln.trainable, 899_300.0), (se.trainable, 1_028_500.0)] {
        assert!((total as f64 - target).abs() / target <= 0.02);
    }
    assert_eq!(
        ln.layers.iter().map(|l| l.trainable).sum::<usize>(),
        ln.trainable
    );
    // Running mean and variance for every batch norm channel.
    assert!(ln.buffers > 0 && ln.buffers.is_multiple_of(2));
}

#[test]
fn per_layer_breakdown_rows() {
    let c = build(GateKind::Ln, 1000, 0).param_count();
    assert_eq!(c.layers.len(), 15);
    assert_eq!(c.layers[0].trainable, 180);
    assert_eq!(c.layers[9].trainable, 305_664);
    for row in [11, 12, 13] {
        assert_eq!(c.layers[row].trainable, 0, "{}", c.layers[row].operator);
    }
    assert_eq!(c.layers[14].trainable, 385_000);
}

#[test]
fn every_parameter_has_exactly_one_owner() {
    let m = build(GateKind::Se, 10, 0);
    let mut seen = BTreeSet::new();
    for i in 0..m.layers().len() {
        for id in m.layer_params(i) {
            assert!(seen.insert(id.index()), "shared parameter {}", id.index());
        }
    }
    assert_eq!(seen.len(), m.store().len());
}

#[test]
fn trace_at_224_matches_layer_table() {
    let rows = shape_trace(
        &ModelSpec::exquisitenet_v2(GateKind::Ln, 1000),
        Shape::new(1, 3, 224, 224),
    )
    .unwrap();
    let want = [
        ("224^2 x 3", "FCT", "12"),
        ("112^2 x 12", "DFSEBV2", "12"),
        ("112^2 x 12", "EVE", "48"),
        ("56^2 x 48", "DFSEBV2", "48"),
        ("56^2 x 48", "ME", "96"),
        ("28^2 x 96", "DFSEBV2", "96"),
        ("28^2 x 96", "ME", "192"),
        ("14^2 x 192", "DFSEBV2", "192"),
        ("14^2 x 192", "ME", "384"),
        ("7^2 x 384", "DFSEBV2", "384"),
        ("7^2 x 384", "Depthwise Conv", "384"),
        ("7^2 x 384", "Hard Swish", "384"),
        ("7^2 x 384", "Average pooling", "384"),
        ("1^2 x 384", "Dropout", "384"),
        ("1^2 x 384", "FC", "-"),
    ];
    assert_eq!(rows.len(), want.len());
    for (row, (input, op, out)) in rows.iter().zip(want) {
        assert_eq!(row.to_string(), format!("{input}\t{op}\t{out}"));
    }
    for pair in rows.windows(2) {
        assert_eq!(pair[0].output, pair[1].input);
    }
    assert_eq!(rows[14].output, Shape::new(1, 1000, 1, 1));
}

#[test]
fn trace_at_32_and_rejections() {
    let spec = ModelSpec::exquisitenet_v2(GateKind::Ln, 10);
    let rows = shape_trace(&spec, Shape::new(1, 3, 32, 32)).unwrap();
    assert_eq!(format_extent(rows[12].input), "1^2 x 384");
    for bad in [
        Shape::new(1, 3, 20, 20),
        Shape::new(1, 4, 32, 32),
        Shape::new(1, 3, 32, 48),
    ] {
        assert!(
            matches!(shape_trace(&spec, bad), Err(Error::Shape(_))),
            "{bad}"
        );
    }
}

#[test]
fn builds_are_deterministic_per_seed() {
    assert_eq!(
        build(GateKind::Ln, 10, 7).store(),
        build(GateKind::Ln, 10, 7).store()
    );
    assert_ne!(
        build(GateKind::Ln, 10, 7).store(),
        build(GateKind::Ln, 10, 8).store()
    );
}

#[test]
fn initialization_bounds() {
    let m = build(GateKind::Se, 10, 1);
    for e in m.store().entries() {
        let s = e.value.shape();
        if e.name.ends_with(".weight") {
            // Linear weights are (out, in, 1, 1), so one formula covers both.
            let fan_in = s.c() * s.h() * s.w();
            let bound = 1.0 / (fan_in as f32).sqrt();
            assert!(
                e.value.data().iter().all(|v| v.abs() <= bound),
                "{}",
                e.name
            );
        } else if e.name.ends_with(".gamma") || e.name.ends_with("running_var") {
            assert!(e.value.data().iter().all(|&v| v == 1.0), "{}", e.name);
        } else if e.name.ends_with(".beta") || e.name.ends_with("running_mean") {
            assert!(e.value.data().iter().all(|&v| v == 0.0), "{}", e.name);
        }
    }
}

fn noise(shape: Shape, seed: u32) -> Tensor<f32> {
    let data = (0..shape.numel())
        .map(|i| {
            ((i as u32).wrapping_mul(2_654_435_761).wrapping_add(seed) >> 8) as f32
                / (1u32 << 24) as f32
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

#[test]
fn inference_is_finite_deterministic_and_batch_independent() {
    let m = build(GateKind::Ln, 10, 3);
    let zero = Tensor::zeros(Shape::new(1, 3, 32, 32));
    assert!(m.infer(&zero).unwrap().all_finite());

    let x = noise(Shape::new(2, 3, 32, 32), 5);
    let y = m.infer(&x).unwrap();
    assert_eq!(y.shape(), Shape::new(2, 10, 1, 1));
    assert_eq!(y, m.infer(&x).unwrap());

    let parts: Vec<_> = (0..2)
        .map(|i| m.infer(&x.slice_batch(i..i + 1).unwrap()).unwrap())
        .collect();
    let stacked = Tensor::stack_batch(&parts).unwrap();
    for (a, b) in y.data().iter().zip(stacked.data()) {
        assert!((a - b).abs() <= 1e-5);
    }
    assert_eq!(m.infer_sharded(&x, 2).unwrap(), stacked);
}

#[test]
fn dropout_rate_does_not_affect_inference() {
    let a = Model::build(
        ModelSpec::exquisitenet_v2(GateKind::Se, 10).with_dropout(0.0),
        4,
    )
    .unwrap();
    let b = Model::build(
        ModelSpec::exquisitenet_v2(GateKind::Se, 10).with_dropout(0.9),
        4,
    )
    .unwrap();
    let x = noise(Shape::new(3, 3, 32, 32), 1);
    assert_eq!(a.infer(&x).unwrap(), b.infer(&x).unwrap());
}

#[test]
fn forward_rejects_bad_batches() {
    let m = build(GateKind::Ln, 10, 0);
    for s in [
        Shape::new(1, 1, 32, 32),
        Shape::new(1, 3, 40, 40),
        Shape::new(0, 3, 32, 32),
    ] {
        assert!(
            matches!(m.infer(&Tensor::zeros(s)), Err(Error::Shape(_))),
            "{s}"
        );
    }
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.xqn");
    let src = build(GateKind::Se, 10, 11);
    src.save_weights(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"XQN2");
    assert_eq!(bytes, checkpoint::encode(src.spec(), src.store()));

    let mut dst = build(GateKind::Se, 10, 12);
    assert_ne!(dst.store(), src.store());
    dst.load_weights(&path).unwrap();
    assert_eq!(dst.store(), src.store());
    for (a, b) in dst.store().entries().iter().zip(src.store().entries()) {
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.value), bits(&b.value));
    }
    let ck = xqnet::model::load_weights(&path).unwrap();
    assert_eq!((ck.variant, ck.num_classes), (1, 10));
}

#[test]
fn checkpoint_errors_leave_model_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("se.xqn");
    build(GateKind::Se, 10, 1).save_weights(&path).unwrap();

    let mut ln = build(GateKind::Ln, 10, 2);
    let before = ln.store().clone();
    match ln.load_weights(&path) {
        Err(Error::TensorMismatch {
            index,
            expected,
            found,
        }) => {
            assert!(expected.contains("gate"), "{expected}");
            assert!(found.contains("gate"), "{found}");
            assert!(index > 0);
        }
        other => panic!("{other:?}"),
    }
    assert_eq!(ln.store(), &before);

    let bytes = std::fs::read(&path).unwrap();
    let cut = dir.path().join("cut.xqn");
    std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    let mut se = build(GateKind::Se, 10, 3);
    let before = se.store().clone();
    assert!(matches!(
        se.load_weights(&cut),
        Err(Error::Truncated { .. })
    ));
    assert_eq!(se.store(), &before);

    let mut other_classes = build(GateKind::Se, 100, 3);
    assert!(matches!(
        other_classes.load_weights(&path),
        Err(Error::Checkpoint(_))
    ));
}

#[test]
fn spec_file_for_reference_network() {
    let text = "\
fct out=12
dfsebv2 c=12 gate=ln
eve out=48
dfsebv2 c=48 gate=ln
me out=96
dfsebv2 c=96 gate=ln
me out=192
dfsebv2 c=192 gate=ln
me out=384
dfsebv2 c=384 gate=ln
dwconv c=384 k=3
hswish
avgpool
dropout p=0.2
fc out=1000
";
    let spec = ModelSpec::parse(text).unwrap();
    assert_eq!(spec, ModelSpec::exquisitenet_v2(GateKind::Ln, 1000));
    assert!(matches!(
        spec.layers[10],
        LayerSpec::DwConv { c: 384, k: 3 }
    ));
}
