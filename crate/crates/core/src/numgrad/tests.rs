use super::testing::{op_gradient_check, DIFFERENTIABLE_OPS};
use super::*;
use crate::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn feeds(pairs: &[(&str, Tensor)]) -> Feeds {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

#[test]
fn matmul_identity() {
    let mut g = Graph::new();
    let a = g.input("a");
    let b = g.input("b");
    let y = g.matmul(a, b);
    g.set_output("y", y);
    let out = g
        .forward_eval(&feeds(&[("a", Tensor::eye(2)), ("b", t(&[2, 1], &[3.0, 4.0]))]))
        .unwrap();
    assert_eq!(out["y"], t(&[2, 1], &[3.0, 4.0]));
}

#[test]
fn sigmoid_of_zero_and_mean_abs() {
    let mut g = Graph::new();
    let x = g.input("x");
    let s = g.sigmoid(x);
    let m = g.mean_abs(x);
    g.set_output("s", s);
    g.set_output("m", m);
    let out = g.forward_eval(&feeds(&[("x", t(&[2, 2], &[1.0, -1.0, 2.0, -2.0]))])).unwrap();
    assert_eq!(out["m"].item(), 1.5);
    let mut g2 = Graph::new();
    let x = g2.input("x");
    let s2 = g2.sigmoid(x);
    g2.forward(&feeds(&[("x", Tensor::zeros(&[3]))])).unwrap();
    assert_eq!(g2.value(s2).unwrap().data(), &[0.5, 0.5, 0.5]);
    assert!(out["s"].all_finite());
}

#[test]
fn shape_mismatch_names_both_nodes() {
    let mut g = Graph::new();
    let a = g.input("left");
    let b = g.input("right");
    g.matmul(a, b);
    let err = g
        .forward(&feeds(&[("left", Tensor::zeros(&[2, 3])), ("right", Tensor::zeros(&[2, 2]))]))
        .unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("left") && msg.contains("right"), "{msg}");
}

#[test]
fn non_finite_names_the_op() {
    let mut g = Graph::new();
    let x = g.input("x");
    g.log(x);
    let err = g.forward(&feeds(&[("x", t(&[1], &[-1.0]))])).unwrap_err();
    assert!(matches!(err, Error::NonFinite { op: "log", .. }), "{err}");
}

#[test]
fn missing_feed_is_reported() {
    let mut g = Graph::new();
    g.input("x");
    assert!(matches!(g.forward(&Feeds::new()), Err(Error::MissingFeed(n)) if n == "x"));
}

#[test]
fn mean_abs_gradient_is_sign() {
    let mut g = Graph::new();
    let w = g.param("w", &t(&[1], &[3.0]));
    let loss = g.mean_abs(w);
    g.forward(&Feeds::new()).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads["w"].data(), &[1.0]);
}

#[test]
fn sigmoid_gradient_at_zero() {
    let mut g = Graph::new();
    let w = g.param("w", &t(&[1], &[0.0]));
    let s = g.sigmoid(w);
    let loss = g.sum_all(s);
    g.forward(&Feeds::new()).unwrap();
    assert_eq!(g.backward(loss).unwrap()["w"].data(), &[0.25]);
}

#[test]
fn backward_requires_forward_and_scalar() {
    let mut g = Graph::new();
    let w = g.param("w", &Tensor::zeros(&[2]));
    let s = g.sigmoid(w);
    assert!(matches!(g.backward(s), Err(Error::BackwardBeforeForward)));
    g.forward(&Feeds::new()).unwrap();
    assert!(matches!(g.backward(s), Err(Error::NonScalarLoss { .. })));
}

fn mlp(seed: u64) -> (Graph, NodeId) {
    let mut rng = Rng::new(seed);
    let mut g = Graph::new();
    let x = g.input("x");
    let mut h = x;
    let widths = [5, 7, 6, 3];
    for l in 0..3 {
        let w = g.param(&format!("w{l}"), &Tensor::randn(&[widths[l], widths[l + 1]], 0.5, &mut rng));
        let b = g.param(&format!("b{l}"), &Tensor::randn(&[widths[l + 1]], 0.1, &mut rng));
        let z = g.matmul(h, w);
        let z = g.add(z, b);
        h = if l < 2 { g.tanh(z) } else { z };
    }
    let target = g.constant(Tensor::randn(&[4, 3], 1.0, &mut rng));
    let diff = g.sub(h, target);
    let loss = g.mean_abs(diff);
    g.forward(&feeds(&[("x", Tensor::randn(&[4, 5], 1.0, &mut rng))])).unwrap();
    (g, loss)
}

#[test]
fn three_layer_mlp_matches_central_differences() {
    let (mut g, loss) = mlp(11);
    let report = check_gradients(&mut g, loss, 1e-4).unwrap();
    assert_eq!(report.params.len(), 6);
    assert!(report.passed(), "{report:?}");
}

#[test]
fn linear_sigmoid_l1_toy_passes_and_tamper_fails() {
    let build = || {
        let mut rng = Rng::new(5);
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(&[3, 4], 1.0, &mut rng));
        let w = g.param("w", &Tensor::randn(&[4, 2], 1.0, &mut rng));
        let z = g.matmul(x, w);
        let s = g.sigmoid(z);
        let target = g.constant(Tensor::full(&[3, 2], 0.1));
        let loss = g.masked_l1(s, target, Tensor::full(&[3], 1.0));
        g.forward(&Feeds::new()).unwrap();
        (g, loss)
    };
    let (mut g, loss) = build();
    assert!(check_gradients(&mut g, loss, 1e-4).unwrap().passed());

    let (mut bad, loss) = build();
    bad.tamper_backward("sigmoid", 1.1);
    let report = check_gradients(&mut bad, loss, 1e-4).unwrap();
    assert!(!report.passed());
}

#[test]
fn frozen_params_absent_from_gradients_and_report() {
    let (mut g, loss) = mlp(3);
    g.freeze(&["w1"]).unwrap();
    let grads = g.backward(loss).unwrap();
    assert!(!grads.contains_key("w1"));
    assert_eq!(grads.len(), 5);
    let report = check_gradients(&mut g, loss, 1e-4).unwrap();
    assert!(report.get("w1").is_none());
    // w0 sits upstream of the frozen w1 and still checks out.
    assert!(report.get("w0").unwrap().passed);
    assert!(report.passed());
}

#[test]
fn freeze_none_covers_all_and_unknown_fails() {
    let (mut g, loss) = mlp(4);
    assert_eq!(g.backward(loss).unwrap().len(), 6);
    assert!(matches!(g.freeze(&["nope"]), Err(Error::UnknownParam(_))));
}

#[test]
fn forward_is_bit_deterministic() {
    let (mut g, loss) = mlp(9);
    let first = g.value(loss).unwrap().clone();
    g.rerun().unwrap();
    assert_eq!(g.value(loss).unwrap().data()[0].to_bits(), first.data()[0].to_bits());
}

#[test]
fn broadcast_add_matches_tiling() {
    let mut rng = Rng::new(1);
    for _ in 0..20 {
        let (r, c) = (1 + rng.below(4), 1 + rng.below(4));
        let a = Tensor::randn(&[2, r, c], 1.0, &mut rng);
        let b = Tensor::randn(&[c], 1.0, &mut rng);
        let mut g = Graph::new();
        let an = g.constant(a.clone());
        let bn = g.constant(b.clone());
        let y = g.add(an, bn);
        let tiled: Vec<f64> = (0..2 * r).flat_map(|_| b.data().to_vec()).collect();
        let bt = g.constant(Tensor::new(vec![2, r, c], tiled).unwrap());
        let y2 = g.add(an, bt);
        g.forward(&Feeds::new()).unwrap();
        assert_eq!(g.value(y), g.value(y2));
    }
}

#[test]
fn every_op_passes_gradient_check_over_100_seeds() {
    for seed in 0..100 {
        for op in DIFFERENTIABLE_OPS {
            let report = op_gradient_check(op, seed, 1e-4).unwrap();
            assert!(report.passed(), "{op} seed {seed}: {report:?}");
        }
    }
}

#[test]
fn ctc_unreachable_target() {
    let mut g = Graph::new();
    let lp = g.constant(Tensor::full(&[2, 3], (1.0_f64 / 3.0).ln()));
    g.ctc(lp, &[1, 1]);
    assert!(matches!(g.forward(&Feeds::new()), Err(Error::TargetUnreachable { .. })));
}

#[test]
fn masked_l1_rejects_empty_mask() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 2]));
    g.masked_l1(a, a, Tensor::zeros(&[2]));
    assert!(matches!(g.forward(&Feeds::new()), Err(Error::EmptyMask)));
}
