use super::*;
use crate::dsp::{load_wav, spec_mae, FeatureStats, MelSpectrogram, MEL_BINS};
use crate::numgrad::{Feeds, Graph, Rng, Tensor};

fn small_config(seed: u64) -> CorpusConfig {
    CorpusConfig { train: 10, val: 4, test: 8, seed, ..CorpusConfig::default() }
}

#[test]
fn same_seed_gives_byte_identical_manifests() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    build_corpus(&small_config(5), a.path()).unwrap();
    build_corpus(&small_config(5), b.path()).unwrap();
    for split in SPLITS {
        let x = std::fs::read(manifest_path(a.path(), split)).unwrap();
        let y = std::fs::read(manifest_path(b.path(), split)).unwrap();
        assert_eq!(x, y);
    }
    let w1 = std::fs::read(a.path().join("wav_noisy/test_0003.wav")).unwrap();
    let w2 = std::fs::read(b.path().join("wav_noisy/test_0003.wav")).unwrap();
    assert_eq!(w1, w2);
}

#[test]
fn rows_are_aligned_and_clean_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(9);
    build_corpus(&cfg, dir.path()).unwrap();
    let alphabet = cfg.validate().unwrap();
    let m = Manifest::load(manifest_path(dir.path(), "train")).unwrap();
    assert_eq!(m.len(), 10);
    for (i, row) in m.rows.iter().enumerate() {
        let clean = load_wav(m.resolve(&row.clean_path)).unwrap();
        let noisy = load_wav(m.resolve(&row.noisy_path)).unwrap();
        assert_eq!(clean.len(), noisy.len());
        let spec = cfg.row_spec(&alphabet, 0, i);
        let original = synth_utterance(&alphabet, &spec.text, spec.speaker_seed).unwrap().quantized();
        assert_eq!(clean, original);
        assert!(cfg.snr_grid.contains(&row.snr_db));
    }
}

#[test]
fn splits_disjoint_in_ids_and_speakers() {
    let cfg = CorpusConfig::default();
    let alphabet = cfg.validate().unwrap();
    let mut ids = std::collections::HashSet::new();
    let mut seeds: Vec<std::collections::HashSet<u64>> = Vec::new();
    for split in 0..3 {
        let mut s = std::collections::HashSet::new();
        for i in 0..cfg.count(split) {
            let spec = cfg.row_spec(&alphabet, split, i);
            assert!(ids.insert(spec.id));
            s.insert(spec.speaker_seed);
        }
        seeds.push(s);
    }
    assert!(seeds[0].is_disjoint(&seeds[1]) && seeds[0].is_disjoint(&seeds[2]) && seeds[1].is_disjoint(&seeds[2]));
}

#[test]
fn default_test_split_is_stratified() {
    let cfg = CorpusConfig::default();
    let alphabet = cfg.validate().unwrap();
    for snr in &cfg.snr_grid {
        let n = (0..cfg.test).filter(|&i| cfg.row_spec(&alphabet, 2, i).snr_db == *snr).count();
        assert!(n.abs_diff(cfg.test / cfg.snr_grid.len()) <= 1, "{snr}: {n}");
        for kind in &cfg.noise_kinds {
            let cell = (0..cfg.test)
                .filter(|&i| {
                    let s = cfg.row_spec(&alphabet, 2, i);
                    s.snr_db == *snr && s.noise == *kind
                })
                .count();
            assert!(cell >= 12);
        }
    }
}

#[test]
fn invalid_configs_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert!(build_corpus(&CorpusConfig { train: 0, ..small_config(1) }, dir.path()).is_err());
    assert!(build_corpus(&CorpusConfig { alphabet: "aab".into(), ..small_config(1) }, dir.path()).is_err());
    let file = dir.path().join("file");
    std::fs::write(&file, b"x").unwrap();
    assert!(build_corpus(&small_config(1), file.join("sub")).is_err());
}

#[test]
fn mixing_is_snr_accurate_over_random_pairs() {
    let alphabet = Alphabet::default();
    let mut rng = Rng::new(77);
    for snr in [2.5, 7.5, 12.5, 17.5] {
        for _ in 0..50 {
            let words = 1 + rng.below(3);
            let text = alphabet.random_text(words, 3, &mut rng);
            let clean = synth_utterance(&alphabet, &text, rng.next_u64()).unwrap();
            let kind = if rng.below(2) == 0 { NoiseKind::White } else { NoiseKind::Babble };
            let noise_len = 1 + rng.below(2 * clean.len());
            let noise = gen_noise(&alphabet, kind, noise_len, rng.next_u64()).unwrap();
            let alpha = mix_gain(&clean, &noise, snr).unwrap();
            let scaled: Vec<f64> = tile(noise.samples(), clean.len()).iter().map(|v| alpha * v).collect();
            let pn = scaled.iter().map(|v| v * v).sum::<f64>() / scaled.len() as f64;
            let measured = 10.0 * (clean.power() / pn).log10();
            assert!((measured - snr).abs() <= 0.01);
        }
    }
}

fn fake_utts(n: usize, seed: u64) -> Vec<Utterance> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|i| {
            let frames = 3 + rng.below(6);
            let spec = |rng: &mut Rng| MelSpectrogram::new(Tensor::randn(&[frames, MEL_BINS], 1.0, rng)).unwrap();
            Utterance {
                row: ManifestRow {
                    id: format!("u{i}"),
                    noisy_path: String::new(),
                    clean_path: String::new(),
                    text: "abc".into(),
                    snr_db: 2.5,
                    noise_type: "white".into(),
                    speaker: "s".into(),
                },
                noisy: spec(&mut rng),
                clean: spec(&mut rng),
                tokens: vec![1, 2, 3],
            }
        })
        .collect()
}

#[test]
fn batch_sizes_and_padding() {
    let utts = fake_utts(10, 1);
    let batches = make_batches(&utts, 4, &FeatureStats::identity(), None, None).unwrap();
    assert_eq!(batches.iter().map(|b| b.len()).collect::<Vec<_>>(), vec![4, 4, 2]);
    for b in &batches {
        for (i, &len) in b.lengths.iter().enumerate() {
            assert!(len <= b.t_max());
            let mask_row = &b.pad_mask.data()[i * b.t_max()..(i + 1) * b.t_max()];
            assert_eq!(mask_row.iter().sum::<f64>() as usize, len);
        }
    }
    assert!(make_batches(&utts, 0, &FeatureStats::identity(), None, None).is_err());
}

#[test]
fn shuffle_is_deterministic_and_cap_skips() {
    let utts = fake_utts(12, 2);
    let order = |seed| {
        make_batches(&utts, 5, &FeatureStats::identity(), Some(seed), None)
            .unwrap()
            .into_iter()
            .flat_map(|b| b.ids)
            .collect::<Vec<_>>()
    };
    assert_eq!(order(3), order(3));
    assert_ne!(order(3), order(4));
    let capped = make_batches(&utts, 50, &FeatureStats::identity(), None, Some(5)).unwrap();
    assert_eq!(capped[0].len(), utts.iter().filter(|u| u.frames() <= 5).count());
}

#[test]
fn masked_batch_mae_equals_frame_weighted_mean() {
    let utts = fake_utts(7, 3);
    let batch = make_batches(&utts, 7, &FeatureStats::identity(), None, None).unwrap().remove(0);
    let n = batch.len();
    let t_max = batch.t_max();
    let mut g = Graph::new();
    let pred = g.constant(batch.specs.clone().reshape(&[n * t_max, MEL_BINS]).unwrap());
    let target = g.constant(batch.clean.clone().reshape(&[n * t_max, MEL_BINS]).unwrap());
    let loss = g.masked_l1(pred, target, batch.pad_mask.clone().reshape(&[n * t_max]).unwrap());
    g.forward(&Feeds::new()).unwrap();
    let masked = g.value(loss).unwrap().item();

    let (mut num, mut den) = (0.0, 0.0);
    for u in &utts {
        num += spec_mae(&u.noisy, &u.clean).unwrap() * u.frames() as f64;
        den += u.frames() as f64;
    }
    assert!((masked - num / den).abs() < 1e-12);
}
