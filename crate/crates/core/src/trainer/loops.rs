use crate::asr::{prepared_inputs, AsrModel, Side, BLANK};
use crate::cleancoder::{l1_loss, CleancoderModel, NETS};
use crate::corpus::Utterance;
use crate::dsp::{FeatureStats, MelSpectrogram, MEL_BINS};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::numgrad::{Feeds, Graph, NodeId, ParamMap, Rng, Tensor};
use crate::parallel;
use crate::trainer::{adam_step, AdamState, MetricRow, TrainConfig};

/// Summary of a training run. The model is left holding its best
/// parameters.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<MetricRow>,
    pub steps: u64,
    pub best_step: u64,
    pub best_value: f64,
    pub init_value: f64,
}

fn round_f32(map: &mut ParamMap) {
    map.values_mut().for_each(Tensor::round_to_f32);
}

fn metric(log: &mut Vec<MetricRow>, step: u64, split: &str, name: &str, value: f64, seed: u64) {
    log.push(MetricRow { step, split: split.into(), metric: name.into(), value, seed });
}

fn check_finite(step: u64, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { step, detail: format!("loss is {loss}") })
    }
}

fn epoch_batches(n: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed ^ (epoch as u64 + 1).wrapping_mul(0x2545_F491_4F6C_DD1D)).shuffle(&mut order);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

/// Cached frozen-encoder taps of an input utterance plus its clean target,
/// padded to the decoder's `4 T'` rows.
#[derive(Clone, Debug)]
pub struct FrontendExample {
    pub taps: Vec<Tensor>,
    pub target: Tensor,
    pub mask: Vec<f64>,
}

fn frontend_example(model: &CleancoderModel, input: &MelSpectrogram, clean: &MelSpectrogram) -> Result<FrontendExample> {
    let taps = model.taps(&model.stats.normalize(input)?)?;
    let rows = NETS * taps.t_prime;
    let target_norm = model.stats.normalize(clean)?;
    let mut target = vec![0.0; rows * MEL_BINS];
    target[..target_norm.values().len()].copy_from_slice(target_norm.values().data());
    let mut mask = vec![0.0; rows];
    mask[..clean.frames()].iter_mut().for_each(|m| *m = 1.0);
    Ok(FrontendExample { taps: taps.taps, target: Tensor::new(vec![rows, MEL_BINS], target)?, mask })
}

/// Noisy-to-clean examples, one per utterance. With `identity_pairs`, each
/// utterance also contributes a clean-to-clean example so the frontend learns
/// to pass clean speech through.
pub fn frontend_examples(
    model: &CleancoderModel,
    utts: &[Utterance],
    identity_pairs: bool,
) -> Result<Vec<FrontendExample>> {
    let mut out: Vec<FrontendExample> =
        parallel::map(utts, |_, u| frontend_example(model, &u.noisy, &u.clean)).into_iter().collect::<Result<_>>()?;
    if identity_pairs {
        let clean = parallel::map(utts, |_, u| frontend_example(model, &u.clean, &u.clean));
        for e in clean {
            out.push(e?);
        }
    }
    Ok(out)
}

fn stack(parts: impl Iterator<Item = Tensor>, cols: usize) -> Result<Tensor> {
    let data: Vec<f64> = parts.flat_map(Tensor::into_data).collect();
    Tensor::new(vec![data.len() / cols, cols], data)
}

/// Masked L1 over a batch. Utterances are stacked along time; every
/// operation after the encoder is per frame, so stacking is exact.
pub fn frontend_batch_loss(model: &CleancoderModel, batch: &[&FrontendExample]) -> Result<(Graph, NodeId)> {
    let d = model.encoder.config.d_model;
    let mut g = Graph::new();
    let taps: Vec<NodeId> = (0..model.blocks())
        .map(|b| Ok(g.constant(stack(batch.iter().map(|e| e.taps[b].clone()), d)?)))
        .collect::<Result<_>>()?;
    let pred = model.build_from_taps(&mut g, &taps)?;
    let target = g.constant(stack(batch.iter().map(|e| e.target.clone()), MEL_BINS)?);
    let mask: Vec<f64> = batch.iter().flat_map(|e| e.mask.iter().copied()).collect();
    let n = mask.len();
    let loss = l1_loss(&mut g, pred, target, Tensor::new(vec![n], mask)?);
    Ok((g, loss))
}

/// Frame-weighted masked L1 over all examples, in chunks.
pub fn frontend_val_l1(model: &CleancoderModel, examples: &[FrontendExample]) -> Result<f64> {
    let chunks: Vec<&[FrontendExample]> = examples.chunks(32).collect();
    let parts = parallel::map(&chunks, |_, chunk| -> Result<(f64, f64)> {
        let refs: Vec<&FrontendExample> = chunk.iter().collect();
        let (mut g, loss) = frontend_batch_loss(model, &refs)?;
        g.forward(&Feeds::new())?;
        let frames: f64 = chunk.iter().flat_map(|e| &e.mask).sum();
        Ok((g.value(loss).unwrap().item() * frames, frames))
    });
    let (mut num, mut den) = (0.0, 0.0);
    for p in parts {
        let (a, b) = p?;
        num += a;
        den += b;
    }
    Ok(num / den)
}

/// Train PWS and Highway parameters with the encoder frozen. Selects the
/// parameters with the lowest validation L1.
pub fn train_frontend(
    model: &mut CleancoderModel,
    train: &[FrontendExample],
    val: &[FrontendExample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("frontend training needs train and validation examples"));
    }
    round_f32(&mut model.params);
    let mut log = Vec::new();
    let mut adam = AdamState::new(cfg.adam.clone());
    let init = frontend_val_l1(model, val)?;
    metric(&mut log, 0, "val", "l1", init, cfg.seed);
    let (mut best, mut best_step, mut best_params) = (init, 0, model.params.clone());
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let batches = epoch_batches(train.len(), cfg.batch_size, cfg.seed, epoch);
        let last = batches.len() - 1;
        for (bi, idx) in batches.into_iter().enumerate() {
            let refs: Vec<&FrontendExample> = idx.iter().map(|&i| &train[i]).collect();
            let (mut g, loss) = frontend_batch_loss(model, &refs)?;
            g.forward(&Feeds::new()).map_err(|e| Error::Diverged { step: step + 1, detail: e.to_string() })?;
            let value = g.value(loss).unwrap().item();
            check_finite(step + 1, value)?;
            let grads = g.backward(loss)?;
            step += 1;
            adam_step(&mut adam, &mut model.params, &grads, cfg.lr_at(step)?)?;
            round_f32(&mut model.params);
            metric(&mut log, step, "train", "l1", value, cfg.seed);
            let due = if cfg.eval_every == 0 { bi == last } else { step.is_multiple_of(cfg.eval_every) };
            if due {
                let v = frontend_val_l1(model, val)?;
                metric(&mut log, step, "val", "l1", v, cfg.seed);
                log::info!("frontend step {step} val l1 {v:.5}");
                if v < best {
                    (best, best_step, best_params) = (v, step, model.params.clone());
                }
            }
        }
    }
    model.params = best_params;
    Ok(TrainOutcome { log, steps: step, best_step, best_value: best, init_value: init })
}

/// Mean CTC loss over a batch of normalized inputs.
pub fn asr_batch_loss(model: &AsrModel, batch: &[&(Tensor, Vec<usize>)]) -> Result<(Graph, NodeId)> {
    let mut g = Graph::new();
    let mut losses = Vec::with_capacity(batch.len());
    for (x, target) in batch {
        if target.contains(&BLANK) {
            return Err(Error::invalid("targets must not contain the blank id"));
        }
        let x = g.constant(x.clone());
        let (_, lp) = model.build(&mut g, x);
        losses.push(g.ctc(lp, target));
    }
    let total = g.sum(&losses);
    let loss = g.scale(total, 1.0 / batch.len() as f64);
    Ok((g, loss))
}

/// Train encoder and CTC head from scratch. Validation logs `ctc` and `wer`;
/// the parameters with the lowest validation WER are kept. With
/// `stop_at_wer`, training ends at the first evaluation at or below it.
pub fn train_asr(
    model: &mut AsrModel,
    train: &[(Tensor, Vec<usize>)],
    val: &[(Tensor, Vec<usize>)],
    cfg: &TrainConfig,
    word_len: usize,
    stop_at_wer: Option<f64>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("ASR training needs train and validation examples"));
    }
    round_f32(&mut model.encoder.params);
    round_f32(&mut model.head);
    let mut log = Vec::new();
    let mut adam = AdamState::new(cfg.adam.clone());
    let (ctc0, wer0) = model.score(val, word_len)?;
    metric(&mut log, 0, "val", "ctc", ctc0, cfg.seed);
    metric(&mut log, 0, "val", "wer", wer0, cfg.seed);
    let mut best = (wer0, ctc0);
    let mut best_step = 0;
    let mut best_model = (model.encoder.params.clone(), model.head.clone());
    let mut step = 0u64;
    'outer: for epoch in 0..cfg.epochs {
        let batches = epoch_batches(train.len(), cfg.batch_size, cfg.seed, epoch);
        let last = batches.len() - 1;
        for (bi, idx) in batches.into_iter().enumerate() {
            let refs: Vec<&(Tensor, Vec<usize>)> = idx.iter().map(|&i| &train[i]).collect();
            let (mut g, loss) = asr_batch_loss(model, &refs)?;
            g.forward(&Feeds::new()).map_err(|e| Error::Diverged { step: step + 1, detail: e.to_string() })?;
            let value = g.value(loss).unwrap().item();
            check_finite(step + 1, value)?;
            let grads = g.backward(loss)?;
            step += 1;
            adam_step(&mut adam, model, &grads, cfg.lr_at(step)?)?;
            round_f32(&mut model.encoder.params);
            round_f32(&mut model.head);
            metric(&mut log, step, "train", "ctc", value, cfg.seed);
            let due = if cfg.eval_every == 0 { bi == last } else { step.is_multiple_of(cfg.eval_every) };
            if due {
                let (c, w) = model.score(val, word_len)?;
                metric(&mut log, step, "val", "ctc", c, cfg.seed);
                metric(&mut log, step, "val", "wer", w, cfg.seed);
                log::info!("asr step {step} val ctc {c:.4} wer {w:.4}");
                if (w, c) < best {
                    best = (w, c);
                    best_step = step;
                    best_model = (model.encoder.params.clone(), model.head.clone());
                }
                if stop_at_wer.is_some_and(|t| w <= t) {
                    break 'outer;
                }
            }
        }
    }
    (model.encoder.params, model.head) = best_model;
    Ok(TrainOutcome { log, steps: step, best_step, best_value: best.0, init_value: wer0 })
}


/// From-scratch ASR run. Trains on the clean side of each pair and validates
/// on the noisy side, both routed through `frontend` when one is given. The
/// initial weights depend only on `cfg.seed`, so runs with and without a
/// frontend start from the same point.
#[allow(clippy::too_many_arguments)]
pub fn train_scratch_asr(
    train: &[Utterance],
    val: &[Utterance],
    encoder: &EncoderConfig,
    vocab: usize,
    stats: &FeatureStats,
    frontend: Option<&CleancoderModel>,
    cfg: &TrainConfig,
    word_len: usize,
) -> Result<(AsrModel, TrainOutcome)> {
    let mut model = AsrModel::init(encoder.clone(), vocab, stats.clone(), &mut Rng::new(cfg.seed ^ 0x5C4A_7C11))?;
    let tr = prepared_inputs(train, stats, Side::Clean, frontend)?;
    let va = prepared_inputs(val, stats, Side::Noisy, frontend)?;
    let outcome = train_asr(&mut model, &tr, &va, cfg, word_len, None)?;
    Ok((model, outcome))
}
