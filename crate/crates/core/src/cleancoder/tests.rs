use super::*;
use crate::dsp::spec_mae;
use crate::encoder::{EncoderConfig, LatentTapStack};
use crate::numgrad::testing::frontend_gradient_check;
use crate::numgrad::Feeds;

fn small_enc() -> EncoderConfig {
    EncoderConfig { d_model: 8, n_blocks: 2, n_heads: 2, conv_kernel: 3, ffn_expansion: 2, dropout: 0.0 }
}

fn model(cfg: EncoderConfig, seed: u64) -> CleancoderModel {
    let mut rng = Rng::new(seed);
    let enc = Encoder::init(cfg, &mut rng).unwrap();
    CleancoderModel::init(enc, FeatureStats::identity(), &mut rng).unwrap()
}

fn pws(m: &CleancoderModel, taps: &[Tensor]) -> Tensor {
    let mut g = Graph::new();
    let ids: Vec<_> = taps.iter().map(|t| g.constant(t.clone())).collect();
    let out = m.parallel_weighted_sum(&mut g, &ids).unwrap();
    g.forward(&Feeds::new()).unwrap();
    g.value(out).unwrap().clone()
}

#[test]
fn pws_identity_and_zero_branch() {
    let cfg = EncoderConfig { n_blocks: 1, ..small_enc() };
    let mut m = model(cfg, 1);
    m.params["pws.W.1"] = Tensor::eye(8);
    let tap = Tensor::randn(&[3, 8], 1.0, &mut Rng::new(2));
    assert_eq!(pws(&m, std::slice::from_ref(&tap)), tap);

    let mut m = model(small_enc(), 3);
    m.params["pws.W.2"] = Tensor::zeros(&[8, 8]);
    let taps = [Tensor::randn(&[3, 8], 1.0, &mut Rng::new(4)), Tensor::randn(&[3, 8], 1.0, &mut Rng::new(5))];
    let mut only_first = m.clone();
    only_first.params["pws.W.2"] = Tensor::zeros(&[8, 8]);
    let oracle = naive_pws(&only_first, &taps[..1], 1);
    assert!(pws(&m, &taps).max_abs_diff(&oracle) < 1e-12);
}

fn naive_pws(m: &CleancoderModel, taps: &[Tensor], blocks: usize) -> Tensor {
    let (t, d) = (taps[0].shape()[0], taps[0].shape()[1]);
    let mut out = vec![0.0; t * d];
    for b in 0..blocks {
        let w = &m.params[&format!("pws.W.{}", b + 1)];
        let c = &m.params[&format!("pws.c.{}", b + 1)];
        for i in 0..t {
            for j in 0..d {
                let mut acc = c.data()[j];
                for k in 0..d {
                    acc += taps[b].at(&[i, k]) * w.at(&[k, j]);
                }
                out[i * d + j] += acc;
            }
        }
    }
    // Branches beyond `blocks` still add their bias.
    for b in blocks..m.blocks() {
        let c = &m.params[&format!("pws.c.{}", b + 1)];
        for i in 0..t {
            for j in 0..d {
                out[i * d + j] += c.data()[j];
            }
        }
    }
    Tensor::new(vec![t, d], out).unwrap()
}

#[test]
fn pws_matches_loop_oracle_and_is_affine() {
    let mut m = model(small_enc(), 6);
    let mut rng = Rng::new(7);
    for b in 1..=2 {
        m.params[&format!("pws.c.{b}")] = Tensor::randn(&[8], 1.0, &mut rng);
    }
    let taps: Vec<Tensor> = (0..2).map(|_| Tensor::randn(&[5, 8], 1.0, &mut rng)).collect();
    let taps2: Vec<Tensor> = (0..2).map(|_| Tensor::randn(&[5, 8], 1.0, &mut rng)).collect();
    let out = pws(&m, &taps);
    assert!(out.max_abs_diff(&naive_pws(&m, &taps, 2)) < 1e-10);

    let (a, b) = (0.75, -1.5);
    let mixed: Vec<Tensor> = taps
        .iter()
        .zip(&taps2)
        .map(|(x, y)| Tensor::new(x.shape().to_vec(), x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect()).unwrap())
        .collect();
    let lhs = pws(&m, &mixed);
    let out2 = pws(&m, &taps2);
    let csum: Vec<f64> = (0..8).map(|j| (1..=2).map(|b| m.params[&format!("pws.c.{b}")].data()[j]).sum()).collect();
    for i in 0..5 {
        for j in 0..8 {
            let rhs = a * out.at(&[i, j]) + b * out2.at(&[i, j]) - (a + b - 1.0) * csum[j];
            assert!((lhs.at(&[i, j]) - rhs).abs() < 1e-12);
        }
    }
}

#[test]
fn pws_rejects_wrong_tap_count() {
    let m = model(small_enc(), 8);
    let mut g = Graph::new();
    let t = g.constant(Tensor::zeros(&[2, 8]));
    assert!(m.parallel_weighted_sum(&mut g, &[t]).is_err());
}

fn highway_out(m: &CleancoderModel, k: usize, s: &Tensor) -> (Tensor, Tensor) {
    let mut g = Graph::new();
    let sn = g.constant(s.clone());
    let y = m.highway(&mut g, k, sn);
    let pw = g.param(&format!("hw{k}.P"), &m.params[&format!("hw{k}.P")]);
    let pb = g.param(&format!("hw{k}.Pb"), &m.params[&format!("hw{k}.Pb")]);
    let x0 = g.matmul(sn, pw);
    let x0 = g.add(x0, pb);
    g.forward(&Feeds::new()).unwrap();
    (g.value(y).unwrap().clone(), g.value(x0).unwrap().clone())
}

#[test]
fn highway_gate_extremes() {
    let mut m = model(small_enc(), 9);
    let s = Tensor::randn(&[3, 8], 1.0, &mut Rng::new(10));
    for j in 1..=HIGHWAY_LAYERS {
        m.params[&format!("hw1.layer{j}.bG")] = Tensor::full(&[MEL_BINS], -20.0);
    }
    let (y, x0) = highway_out(&m, 1, &s);
    assert!(y.max_abs_diff(&x0) < 1e-6);

    for j in 1..=HIGHWAY_LAYERS {
        m.params[&format!("hw1.layer{j}.bG")] = Tensor::full(&[MEL_BINS], 20.0);
    }
    let (y, x0) = highway_out(&m, 1, &s);
    // Transform-only oracle: x <- swish(x W_H + b_H), four times.
    let mut x = x0;
    for j in 1..=HIGHWAY_LAYERS {
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let w = g.constant(m.params[&format!("hw1.layer{j}.WH")].clone());
        let b = g.constant(m.params[&format!("hw1.layer{j}.bH")].clone());
        let h = g.matmul(xn, w);
        let h = g.add(h, b);
        let h = g.swish(h);
        g.forward(&Feeds::new()).unwrap();
        x = g.value(h).unwrap().clone();
    }
    assert!(y.max_abs_diff(&x) < 1e-6);
}

#[test]
fn decode_order_and_deinterleave() {
    let m = model(small_enc(), 11);
    let s = Tensor::randn(&[2, 8], 1.0, &mut Rng::new(12));
    let mut g = Graph::new();
    let sn = g.constant(s.clone());
    let y = m.decode_frames(&mut g, sn);
    let nets: Vec<_> = (1..=NETS).map(|k| m.highway(&mut g, k, sn)).collect();
    g.forward(&Feeds::new()).unwrap();
    let y = g.value(y).unwrap();
    assert_eq!(y.shape(), &[8, MEL_BINS]);
    for i in 0..2 {
        for k in 0..NETS {
            assert_eq!(y.row(4 * i + k), g.value(nets[k]).unwrap().row(i));
        }
    }
}

#[test]
fn constant_nets_give_constant_frames() {
    let mut m = model(small_enc(), 13);
    let c: Vec<f64> = (0..MEL_BINS).map(|i| i as f64 * 0.01).collect();
    for k in 1..=NETS {
        m.params[&format!("hw{k}.P")] = Tensor::zeros(&[8, MEL_BINS]);
        m.params[&format!("hw{k}.Pb")] = Tensor::new(vec![MEL_BINS], c.clone()).unwrap();
        for j in 1..=HIGHWAY_LAYERS {
            m.params[&format!("hw{k}.layer{j}.bG")] = Tensor::full(&[MEL_BINS], -60.0);
        }
    }
    let taps = LatentTapStack { taps: vec![Tensor::randn(&[3, 8], 1.0, &mut Rng::new(1)); 2], t_prime: 3 };
    let out = m.decode_taps(&taps, 12).unwrap();
    for row in out.data().chunks(MEL_BINS) {
        for (a, b) in row.iter().zip(&c) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn forward_preserves_shape_and_is_deterministic() {
    let mut rng = Rng::new(14);
    let m = model(small_enc(), 15);
    for t in [4, 5, 6, 7, 98, 401] {
        let s = MelSpectrogram::new(Tensor::randn(&[t, MEL_BINS], 1.0, &mut rng)).unwrap();
        let y = m.forward(&s).unwrap();
        assert_eq!(y.values().shape(), &[t, MEL_BINS]);
        assert_eq!(y.values(), m.forward(&s).unwrap().values());
    }
}

#[test]
fn census_matches_closed_form() {
    for (d, b) in [(8, 2), (48, 4), (64, 4)] {
        let cfg = EncoderConfig { d_model: d, n_blocks: b, ..EncoderConfig::default() };
        let m = model(cfg, 16);
        let expected = b * (d * d + d) + 4 * (d * 80 + 80 + 4 * (2 * (80 * 80 + 80)));
        assert_eq!(m.trainable_count(), expected);
        assert_eq!(param_count(b, d), expected);
    }
    let m = model(small_enc(), 17);
    for name in ["pws.W.1", "pws.c.2", "hw1.P", "hw4.layer4.WH", "hw3.layer1.bG", "hw2.layer2.WG", "hw2.layer3.bH"] {
        assert!(m.params.contains_key(name), "{name}");
    }
    assert_eq!(m.params["hw2.layer1.bG"].data()[0], GATE_BIAS_INIT);
}

#[test]
fn l1_loss_contracts() {
    let mut rng = Rng::new(18);
    let a = Tensor::randn(&[6, MEL_BINS], 1.0, &mut rng);
    let b = Tensor::randn(&[6, MEL_BINS], 1.0, &mut rng);
    let eval = |p: &Tensor, q: &Tensor, mask: Tensor| {
        let mut g = Graph::new();
        let (pn, qn) = (g.constant(p.clone()), g.constant(q.clone()));
        let l = l1_loss(&mut g, pn, qn, mask);
        g.forward(&Feeds::new()).unwrap();
        g.value(l).unwrap().item()
    };
    assert_eq!(eval(&a, &a, Tensor::full(&[6], 1.0)), 0.0);
    let sa = MelSpectrogram::new(a.clone()).unwrap();
    let sb = MelSpectrogram::new(b.clone()).unwrap();
    assert!((eval(&a, &b, Tensor::full(&[6], 1.0)) - spec_mae(&sa, &sb).unwrap()).abs() < 1e-10);
    let mask = Tensor::new(vec![6], vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
    let mut perturbed = a.clone();
    for v in &mut perturbed.data_mut()[4 * MEL_BINS..] {
        *v += 100.0;
    }
    assert_eq!(eval(&a, &b, mask.clone()), eval(&perturbed, &b, mask));
}

#[test]
fn end_to_end_gradients_with_frozen_encoder() {
    let report = frontend_gradient_check(small_enc(), 8, 24, 19, 1e-4).unwrap();
    assert_eq!(report.params.len(), 2 * 2 + NETS * (2 + 4 * HIGHWAY_LAYERS));
    assert!(report.params.iter().all(|p| !p.name.starts_with("enc.")));
    assert!(report.passed(), "{report:?}");
}
