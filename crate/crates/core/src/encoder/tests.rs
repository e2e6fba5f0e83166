use super::*;
use crate::numgrad::{Feeds, Graph, Rng, Tensor};

fn small() -> EncoderConfig {
    EncoderConfig { d_model: 16, n_blocks: 2, n_heads: 2, conv_kernel: 5, ffn_expansion: 2, dropout: 0.0 }
}

fn spec(t: usize, seed: u64) -> MelSpectrogram {
    MelSpectrogram::new(Tensor::randn(&[t, MEL_BINS], 1.0, &mut Rng::new(seed))).unwrap()
}

#[test]
fn subsampled_lengths() {
    assert_eq!(subsampled_len(98).unwrap(), 25);
    assert_eq!(subsampled_len(4).unwrap(), 1);
    assert_eq!(subsampled_len(196).unwrap(), 49);
    assert!(subsampled_len(3).is_err());
    for t in 4..300 {
        assert_eq!(subsampled_len(t).unwrap(), t.div_ceil(4));
    }
}

#[test]
fn config_validation_and_presets() {
    assert!(EncoderConfig { d_model: 10, n_heads: 4, ..EncoderConfig::default() }.validate().is_err());
    assert!(EncoderConfig { conv_kernel: 4, ..EncoderConfig::default() }.validate().is_err());
    assert_eq!(EncoderConfig::preset("medium-mini").unwrap().d_model, 48);
    assert_eq!(EncoderConfig::preset("large-mini").unwrap().d_model, 64);
    assert!(EncoderConfig::preset("huge").is_err());
}

#[test]
fn taps_have_expected_shapes_and_are_deterministic() {
    let enc = Encoder::init(small(), &mut Rng::new(1)).unwrap();
    for t in [4, 5, 17, 40] {
        let s = spec(t, t as u64);
        let taps = enc.encode_with_taps(&s).unwrap();
        assert_eq!(taps.taps.len(), 2);
        assert_eq!(taps.t_prime, t.div_ceil(4));
        for tap in &taps.taps {
            assert_eq!(tap.shape(), &[t.div_ceil(4), 16]);
        }
        assert_eq!(taps, enc.encode_with_taps(&s).unwrap());
    }
}

#[test]
fn zeroed_branches_reduce_block_to_layer_norm() {
    let mut enc = Encoder::init(small(), &mut Rng::new(2)).unwrap();
    for (name, t) in enc.params.iter_mut() {
        let branch_out = ["W2", "b2", "Wo", "bo", "pw2.W", "pw2.b"].iter().any(|s| name.ends_with(s));
        if branch_out {
            *t = Tensor::zeros(t.shape());
        }
    }
    let mut g = Graph::new();
    let x = g.constant(Tensor::randn(&[6, 16], 1.0, &mut Rng::new(3)));
    let (out, _) = enc.block(&mut g, x, 0);
    let gain = g.constant(Tensor::full(&[16], 1.0));
    let bias = g.constant(Tensor::zeros(&[16]));
    let ln = g.layer_norm(x, gain, bias);
    g.forward(&Feeds::new()).unwrap();
    assert!(g.value(out).unwrap().max_abs_diff(g.value(ln).unwrap()) < 1e-12);
}

#[test]
fn attention_rows_sum_to_one() {
    let enc = Encoder::init(small(), &mut Rng::new(4)).unwrap();
    let mut g = Graph::new();
    let x = g.constant(spec(23, 5).into_values());
    let nodes = enc.build(&mut g, x);
    g.forward(&Feeds::new()).unwrap();
    for &a in &nodes.attention {
        let probs = g.value(a).unwrap();
        for row in probs.data().chunks(probs.last_dim()) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
    // The head consumes the last tap.
    assert_eq!(nodes.top(), *nodes.taps.last().unwrap());
}

#[test]
fn batch_items_do_not_interact() {
    let enc = Encoder::init(small(), &mut Rng::new(6)).unwrap();
    let specs: Vec<Tensor> = (0..3).map(|i| spec(9 + 4 * i, 20 + i as u64).into_values()).collect();
    let run = |order: &[usize]| {
        let mut g = Graph::new();
        let tops: Vec<_> = order
            .iter()
            .map(|&i| {
                let x = g.constant(specs[i].clone());
                enc.build(&mut g, x).top()
            })
            .collect();
        g.forward(&Feeds::new()).unwrap();
        tops.iter().map(|&t| g.value(t).unwrap().clone()).collect::<Vec<_>>()
    };
    let fwd = run(&[0, 1, 2]);
    let rev = run(&[2, 1, 0]);
    for i in 0..3 {
        assert_eq!(fwd[i], rev[2 - i]);
    }
}

#[test]
fn symmetric_depthwise_conv_commutes_with_time_reversal() {
    let mut rng = Rng::new(8);
    let (t, c, k): (usize, usize, usize) = (11, 3, 5);
    let half: Vec<f64> = (0..t.div_ceil(2) * c).map(|_| rng.normal()).collect();
    let mut x = vec![0.0; t * c];
    for i in 0..t {
        let src = i.min(t - 1 - i);
        x[i * c..(i + 1) * c].copy_from_slice(&half[src * c..(src + 1) * c]);
    }
    let mut w = Tensor::randn(&[k, c], 1.0, &mut rng);
    for j in 0..k / 2 {
        for ch in 0..c {
            let v = w.at(&[j, ch]);
            w.data_mut()[(k - 1 - j) * c + ch] = v;
        }
    }
    let mut g = Graph::new();
    let xn = g.constant(Tensor::new(vec![t, c], x.clone()).unwrap());
    let wn = g.constant(w.clone());
    let y = g.conv1d(xn, wn, 1, k / 2, true);
    g.forward(&Feeds::new()).unwrap();
    let y = g.value(y).unwrap();
    // Direct oracle with zero padding.
    for i in 0..t {
        for ch in 0..c {
            let mut acc = 0.0;
            for j in 0..k {
                let src = i as isize + j as isize - (k / 2) as isize;
                if (0..t as isize).contains(&src) {
                    acc += w.at(&[j, ch]) * x[src as usize * c + ch];
                }
            }
            assert!((y.at(&[i, ch]) - acc).abs() < 1e-12);
            assert!((y.at(&[i, ch]) - y.at(&[t - 1 - i, ch])).abs() < 1e-12);
        }
    }
}

#[test]
fn from_params_checks_names_and_shapes() {
    let enc = Encoder::init(small(), &mut Rng::new(9)).unwrap();
    let back = Encoder::from_params(small(), &enc.params).unwrap();
    assert_eq!(back.params, enc.params);
    let mut missing = enc.params.clone();
    missing.shift_remove("enc.sub1.W");
    assert!(Encoder::from_params(small(), &missing).is_err());
}

#[test]
fn short_input_rejected() {
    let enc = Encoder::init(small(), &mut Rng::new(10)).unwrap();
    assert!(enc.encode_with_taps(&spec(3, 1)).is_err());
}
