use super::*;
use crate::numgrad::testing::op_gradient_check;

fn uniform(t: usize, v: usize) -> Tensor {
    Tensor::full(&[t, v], (1.0 / v as f64).ln())
}

/// Sum over all V^T frame paths whose collapse equals the target.
fn brute_force(lp: &Tensor, target: &[usize]) -> f64 {
    let (t, v) = (lp.shape()[0], lp.shape()[1]);
    let mut total = 0.0;
    for code in 0..v.pow(t as u32) {
        let mut c = code;
        let path: Vec<usize> = (0..t)
            .map(|_| {
                let s = c % v;
                c /= v;
                s
            })
            .collect();
        let mut collapsed = Vec::new();
        let mut prev = None;
        for &s in &path {
            if Some(s) != prev && s != BLANK {
                collapsed.push(s);
            }
            prev = Some(s);
        }
        if collapsed == target {
            total += path.iter().enumerate().map(|(i, &s)| lp.at(&[i, s])).sum::<f64>().exp();
        }
    }
    -total.ln()
}

#[test]
fn ctc_examples() {
    assert!((ctc_loss(&uniform(1, 2), &[1]).unwrap() - 0.5_f64.ln().abs()).abs() < 1e-12);
    assert!((ctc_loss(&uniform(2, 2), &[1]).unwrap() + 0.75_f64.ln()).abs() < 1e-12);
    assert!(matches!(ctc_loss(&uniform(2, 3), &[1, 1]), Err(Error::TargetUnreachable { .. })));
}

#[test]
fn ctc_matches_enumeration() {
    let mut rng = Rng::new(1);
    for _ in 0..200 {
        let v = 2 + rng.below(2);
        let t = 1 + rng.below(4);
        let len = rng.below(3);
        let target: Vec<usize> = (0..len).map(|_| 1 + rng.below(v - 1)).collect();
        let lp = log_softmax(&Tensor::randn(&[t, v], 2.0, &mut rng));
        match ctc_loss(&lp, &target) {
            Ok(l) => assert!((l - brute_force(&lp, &target)).abs() <= 1e-9),
            Err(Error::TargetUnreachable { .. }) => assert!(brute_force(&lp, &target).is_infinite()),
            Err(e) => panic!("{e}"),
        }
    }
}

#[test]
fn ctc_gradient_and_relabeling() {
    for seed in 0..20 {
        assert!(op_gradient_check("ctc", seed, 1e-4).unwrap().passed());
    }
    let mut rng = Rng::new(2);
    let lp = log_softmax(&Tensor::randn(&[6, 4], 1.0, &mut rng));
    let perm = [0, 3, 1, 2];
    let mut relabeled = lp.clone();
    for t in 0..6 {
        for s in 0..4 {
            relabeled.data_mut()[t * 4 + perm[s]] = lp.at(&[t, s]);
        }
    }
    let target = [1, 2, 2, 3];
    let mapped: Vec<usize> = target.iter().map(|&s| perm[s]).collect();
    let a = ctc_loss(&lp, &target).unwrap();
    let b = ctc_loss(&relabeled, &mapped).unwrap();
    assert!((a - b).abs() < 1e-12);
}

fn one_hot(frames: &[usize], v: usize) -> Tensor {
    let mut t = Tensor::full(&[frames.len(), v], -10.0);
    for (i, &s) in frames.iter().enumerate() {
        t.data_mut()[i * v + s] = 0.0;
    }
    t
}

#[test]
fn greedy_examples() {
    assert_eq!(greedy_decode(&one_hot(&[1, 1, 0, 2], 3)), vec![1, 2]);
    assert_eq!(greedy_decode(&one_hot(&[0, 0, 0], 3)), Vec::<usize>::new());
    assert_eq!(greedy_decode(&one_hot(&[1, 0, 1], 3)), vec![1, 1]);
}

#[test]
fn greedy_inverts_blank_separated_encoding() {
    let mut rng = Rng::new(3);
    for _ in 0..100 {
        let seq: Vec<usize> = (0..rng.below(8)).map(|_| 1 + rng.below(12)).collect();
        let mut frames = Vec::new();
        for (i, &s) in seq.iter().enumerate() {
            if i > 0 && seq[i - 1] == s {
                frames.push(BLANK);
            }
            for _ in 0..1 + rng.below(3) {
                frames.push(s);
            }
        }
        if frames.is_empty() {
            frames.push(BLANK);
        }
        assert_eq!(greedy_decode(&one_hot(&frames, 13)), seq);
    }
}

/// Minimum edits over every alignment, enumerated recursively.
fn exhaustive(a: &[u8], b: &[u8]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let sub = exhaustive(ra, rb) + usize::from(x != y);
            sub.min(exhaustive(ra, b) + 1).min(exhaustive(a, rb) + 1)
        }
    }
}

#[test]
fn edit_distance_matches_exhaustive_and_is_symmetric() {
    let mut rng = Rng::new(4);
    for _ in 0..500 {
        let a: Vec<u8> = (0..rng.below(7)).map(|_| rng.below(4) as u8).collect();
        let b: Vec<u8> = (0..rng.below(7)).map(|_| rng.below(4) as u8).collect();
        let d = edit_distance(&a, &b);
        assert_eq!(d, exhaustive(&a, &b));
        assert_eq!(d, edit_distance(&b, &a));
        assert_eq!(wer(&a, &b) == 0.0, a == b || a.is_empty() && b.is_empty());
    }
}

#[test]
fn model_round_trips_through_tensors() {
    let cfg = EncoderConfig { d_model: 8, n_blocks: 1, n_heads: 2, conv_kernel: 3, ffn_expansion: 2, dropout: 0.0 };
    let m = AsrModel::init(cfg.clone(), 13, FeatureStats::identity(), &mut Rng::new(5)).unwrap();
    assert_eq!(m.vocab(), 13);
    let back = AsrModel::from_tensors(cfg, FeatureStats::identity(), &m.tensors()).unwrap();
    let x = Tensor::randn(&[12, crate::dsp::MEL_BINS], 1.0, &mut Rng::new(6));
    assert_eq!(m.log_probs_normalized(&x).unwrap(), back.log_probs_normalized(&x).unwrap());
    let lp = m.log_probs_normalized(&x).unwrap();
    assert_eq!(lp.shape(), &[3, 13]);
    for row in lp.data().chunks(13) {
        assert!((row.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
