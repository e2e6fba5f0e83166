//! Randomized per-op gradient probes, shared by unit tests and the
//! acceptance suite.

use crate::error::Result;
use crate::numgrad::{check_gradients, GradCheckReport, Graph, NodeId, Rng, Tensor};

/// Names of the ops covered by [`op_gradient_check`].
pub const DIFFERENTIABLE_OPS: &[&str] = &[
    "matmul",
    "matmul_batched",
    "matmul_nt",
    "matmul_nt_batched",
    "add",
    "sub",
    "mul",
    "scale",
    "sigmoid",
    "swish",
    "relu",
    "tanh",
    "log",
    "layer_norm",
    "conv1d",
    "conv1d_strided",
    "conv1d_depthwise",
    "softmax",
    "log_softmax",
    "mean_abs",
    "sum_all",
    "masked_l1",
    "split_heads",
    "merge_heads",
    "slice_last",
    "slice_rows",
    "interleave",
    "rel_pos_bias",
    "ctc",
    "sum",
];

fn dim(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

fn p(g: &mut Graph, rng: &mut Rng, name: &str, shape: &[usize]) -> NodeId {
    let t = Tensor::randn(shape, 1.0, rng);
    g.param(name, &t)
}

/// Contract an arbitrary-shaped node against fixed random weights.
fn weighted_sum(g: &mut Graph, rng: &mut Rng, x: NodeId, shape: &[usize]) -> NodeId {
    let r = g.constant(Tensor::randn(shape, 1.0, rng));
    let prod = g.mul(x, r);
    g.sum_all(prod)
}

/// Build a random instance of `op`, evaluate it and compare its analytic
/// gradients against central differences.
pub fn op_gradient_check(op: &str, seed: u64, tolerance: f64) -> Result<GradCheckReport> {
    let mut rng = Rng::new(seed ^ 0x5EED_0000);
    let mut g = Graph::new();
    let (m, k, n) = (dim(&mut rng, 1, 4), dim(&mut rng, 1, 4), dim(&mut rng, 1, 4));
    let loss = match op {
        "matmul" | "matmul_nt" => {
            let a = p(&mut g, &mut rng, "a", &[m, k]);
            let nt = op == "matmul_nt";
            let b = p(&mut g, &mut rng, "b", &(if nt { [n, k] } else { [k, n] }));
            let y = if nt { g.matmul_nt(a, b) } else { g.matmul(a, b) };
            weighted_sum(&mut g, &mut rng, y, &[m, n])
        }
        "matmul_batched" | "matmul_nt_batched" => {
            let h = dim(&mut rng, 1, 3);
            let nt = op == "matmul_nt_batched";
            let a = p(&mut g, &mut rng, "a", &[h, m, k]);
            let b = p(&mut g, &mut rng, "b", &(if nt { [h, n, k] } else { [h, k, n] }));
            let y = if nt { g.matmul_nt(a, b) } else { g.matmul(a, b) };
            weighted_sum(&mut g, &mut rng, y, &[h, m, n])
        }
        "add" | "sub" | "mul" => {
            let a = p(&mut g, &mut rng, "a", &[m, k]);
            let b = p(&mut g, &mut rng, "b", &[k]);
            let y = match op {
                "add" => g.add(a, b),
                "sub" => g.sub(a, b),
                _ => g.mul(a, b),
            };
            weighted_sum(&mut g, &mut rng, y, &[m, k])
        }
        "scale" | "sigmoid" | "swish" | "relu" | "tanh" | "softmax" | "log_softmax" => {
            let a = p(&mut g, &mut rng, "a", &[m, k + 1]);
            let y = match op {
                "scale" => g.scale(a, -1.7),
                "sigmoid" => g.sigmoid(a),
                "swish" => g.swish(a),
                "relu" => g.relu(a),
                "tanh" => g.tanh(a),
                "softmax" => g.softmax(a),
                _ => g.log_softmax(a),
            };
            weighted_sum(&mut g, &mut rng, y, &[m, k + 1])
        }
        "log" => {
            let a = g.param("a", &Tensor::rand_uniform(&[m, k], 0.5, 2.0, &mut rng));
            let y = g.log(a);
            weighted_sum(&mut g, &mut rng, y, &[m, k])
        }
        "layer_norm" => {
            // Two features normalize to exactly +-1; the gradient vanishes there.
            let f = k + 2;
            let x = p(&mut g, &mut rng, "x", &[m, f]);
            let gain = p(&mut g, &mut rng, "gain", &[f]);
            let bias = p(&mut g, &mut rng, "bias", &[f]);
            let y = g.layer_norm(x, gain, bias);
            weighted_sum(&mut g, &mut rng, y, &[m, f])
        }
        "conv1d" | "conv1d_strided" | "conv1d_depthwise" => {
            let t = dim(&mut rng, 3, 7);
            let kernel = 1 + 2 * rng.below(2);
            let stride = if op == "conv1d_strided" { 2 } else { 1 };
            let pad = kernel / 2;
            let x = p(&mut g, &mut rng, "x", &[t, k]);
            let (w, depthwise) = if op == "conv1d_depthwise" {
                (p(&mut g, &mut rng, "w", &[kernel, k]), true)
            } else {
                (p(&mut g, &mut rng, "w", &[kernel, k, n]), false)
            };
            let y = g.conv1d(x, w, stride, pad, depthwise);
            let t_out = crate::numgrad::conv_out_len(t, kernel, stride, pad).unwrap();
            let width = if depthwise { k } else { n };
            weighted_sum(&mut g, &mut rng, y, &[t_out, width])
        }
        "mean_abs" => {
            let a = p(&mut g, &mut rng, "a", &[m, k]);
            g.mean_abs(a)
        }
        "sum_all" => {
            let a = p(&mut g, &mut rng, "a", &[m, k]);
            let sq = g.mul(a, a);
            g.sum_all(sq)
        }
        "masked_l1" => {
            let rows = m + 1;
            let pred = p(&mut g, &mut rng, "pred", &[rows, k]);
            let target = p(&mut g, &mut rng, "target", &[rows, k]);
            let mut mask: Vec<f64> = (0..rows).map(|_| rng.below(2) as f64).collect();
            mask[0] = 1.0;
            g.masked_l1(pred, target, Tensor::new(vec![rows], mask)?)
        }
        "split_heads" => {
            let heads = dim(&mut rng, 1, 3);
            let x = p(&mut g, &mut rng, "x", &[m, heads * k]);
            let y = g.split_heads(x, heads);
            weighted_sum(&mut g, &mut rng, y, &[heads, m, k])
        }
        "merge_heads" => {
            let heads = dim(&mut rng, 1, 3);
            let x = p(&mut g, &mut rng, "x", &[heads, m, k]);
            let y = g.merge_heads(x);
            weighted_sum(&mut g, &mut rng, y, &[m, heads * k])
        }
        "slice_last" => {
            let f = k + 2;
            let x = p(&mut g, &mut rng, "x", &[m, f]);
            let y = g.slice_last(x, 1, f - 1);
            weighted_sum(&mut g, &mut rng, y, &[m, f - 2])
        }
        "slice_rows" => {
            let rows = m + 2;
            let x = p(&mut g, &mut rng, "x", &[rows, k]);
            let y = g.slice_rows(x, 1, rows - 1);
            weighted_sum(&mut g, &mut rng, y, &[rows - 2, k])
        }
        "interleave" => {
            let parts: Vec<NodeId> = (0..4).map(|j| p(&mut g, &mut rng, &format!("x{j}"), &[m, k])).collect();
            let y = g.interleave(&parts);
            weighted_sum(&mut g, &mut rng, y, &[4 * m, k])
        }
        "rel_pos_bias" => {
            let heads = dim(&mut rng, 1, 3);
            let max_dist = dim(&mut rng, 1, 3);
            let t = dim(&mut rng, 1, 6);
            let table = p(&mut g, &mut rng, "table", &[heads, 2 * max_dist + 1]);
            let like = g.constant(Tensor::zeros(&[t, 1]));
            let y = g.rel_pos_bias(table, like, max_dist);
            weighted_sum(&mut g, &mut rng, y, &[heads, t, t])
        }
        "ctc" => {
            let v = dim(&mut rng, 2, 4);
            let len = dim(&mut rng, 0, 2);
            let target: Vec<usize> = (0..len).map(|_| 1 + rng.below(v - 1)).collect();
            let t = crate::numgrad::ctc_min_frames(&target).max(1) + rng.below(3);
            let logits = p(&mut g, &mut rng, "logits", &[t, v]);
            let lp = g.log_softmax(logits);
            g.ctc(lp, &target)
        }
        "sum" => {
            let parts: Vec<NodeId> = (0..3).map(|j| p(&mut g, &mut rng, &format!("x{j}"), &[m, k])).collect();
            let y = g.sum(&parts);
            weighted_sum(&mut g, &mut rng, y, &[m, k])
        }
        other => return Err(crate::Error::invalid(format!("no gradient probe for `{other}`"))),
    };
    g.forward(&Default::default())?;
    check_gradients(&mut g, loss, tolerance)
}

/// End-to-end check of every PWS and Highway tensor of a freshly
/// initialized frontend on a `frames x 80` input. The encoder is part of the
/// graph but frozen. Each tensor is probed at `per_param` elements.
pub fn frontend_gradient_check(
    encoder: crate::encoder::EncoderConfig,
    frames: usize,
    per_param: usize,
    seed: u64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    use crate::cleancoder::{l1_loss, CleancoderModel};
    use crate::dsp::{FeatureStats, MEL_BINS};
    use crate::encoder::Encoder;

    let mut rng = Rng::new(seed);
    let enc = Encoder::init(encoder, &mut rng)?;
    let mut model = CleancoderModel::init(enc, FeatureStats::identity(), &mut rng)?;
    // Move gates off their init so every branch carries gradient.
    for (name, t) in model.params.iter_mut() {
        if name.ends_with(".bG") || name.ends_with(".bH") || name.starts_with("pws.c") {
            *t = Tensor::randn(t.shape(), 0.5, &mut rng);
        }
    }
    let input = Tensor::randn(&[frames, MEL_BINS], 1.0, &mut rng);
    let build = |g: &mut Graph| -> Result<NodeId> {
        let x = g.constant(input.clone());
        let nodes = model.encoder.build(g, x);
        let pred = model.build_from_taps(g, &nodes.taps)?;
        Ok(g.slice_rows(pred, 0, frames))
    };
    // The target sits a short, fixed distance from the initial prediction:
    // far from the L1 kinks relative to the probe step, yet small enough
    // that the summed loss does not drown per-element differences in
    // rounding noise.
    let mut first = Graph::new();
    let pred0 = build(&mut first)?;
    first.forward(&Default::default())?;
    let offsets = Tensor::rand_uniform(&[frames, MEL_BINS], 0.05, 0.15, &mut rng);
    let target: Vec<f64> = first
        .value(pred0)
        .unwrap()
        .data()
        .iter()
        .zip(offsets.data())
        .map(|(p, o)| if rng.below(2) == 0 { p + o } else { p - o })
        .collect();
    let mut g = Graph::new();
    let pred = build(&mut g)?;
    let target = g.constant(Tensor::new(vec![frames, MEL_BINS], target)?);
    let l1 = l1_loss(&mut g, pred, target, Tensor::full(&[frames], 1.0));
    // Summed rather than averaged so gradients are O(1).
    let loss = g.scale(l1, (frames * MEL_BINS) as f64);
    let frozen = model.encoder.param_names();
    g.freeze(&frozen)?;
    g.forward(&Default::default())?;
    crate::numgrad::check_gradients_sampled(&mut g, loss, tolerance, per_param, seed ^ 0xC0FFEE)
}
