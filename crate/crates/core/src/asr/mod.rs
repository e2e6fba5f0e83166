//! CTC head, loss, greedy decoding, WER and per-row evaluation.

mod eval;
mod wer;

pub use eval::{evaluate_model, RowError, RowResult, CONDITION_DENOISED, CONDITION_NOISY};
pub use wer::{edit_distance, wer, wer_str};

use crate::cleancoder::CleancoderModel;
use crate::corpus::Utterance;
use crate::dsp::{FeatureStats, MelSpectrogram};
use crate::encoder::{Encoder, EncoderConfig, EncoderNodes};
use crate::error::{Error, Result};
use crate::numgrad::{ctc_forward_backward, log_softmax_rows, Feeds, Graph, NodeId, ParamMap, Rng, Tensor};
use crate::parallel;
use crate::trainer::ParamStore;

pub const BLANK: usize = 0;

/// Negative log-likelihood of `target` under per-frame log-probabilities
/// `[T', V]`.
pub fn ctc_loss(log_probs: &Tensor, target: &[usize]) -> Result<f64> {
    Ok(ctc_forward_backward(log_probs, target)?.0)
}

/// Best-path decoding: per-frame argmax, collapse repeats, drop blanks.
pub fn greedy_decode(log_probs: &Tensor) -> Vec<usize> {
    let v = log_probs.last_dim();
    let mut out = Vec::new();
    let mut prev = None;
    for row in log_probs.data().chunks(v) {
        let best = (0..v).fold(0, |b, i| if row[i] > row[b] { i } else { b });
        if Some(best) != prev && best != BLANK {
            out.push(best);
        }
        prev = Some(best);
    }
    out
}

/// Encoder plus a linear CTC head `D -> V`.
#[derive(Clone, Debug)]
pub struct AsrModel {
    pub encoder: Encoder,
    pub head: ParamMap,
    pub stats: FeatureStats,
}

impl AsrModel {
    pub fn init(config: EncoderConfig, vocab: usize, stats: FeatureStats, rng: &mut Rng) -> Result<Self> {
        if vocab < 2 {
            return Err(Error::invalid("CTC vocabulary needs a blank and at least one symbol"));
        }
        let encoder = Encoder::init(config, rng)?;
        let d = encoder.config.d_model;
        let mut head = ParamMap::new();
        head.insert("ctc.W".into(), Tensor::randn(&[d, vocab], 1.0 / (d as f64).sqrt(), rng));
        head.insert("ctc.b".into(), Tensor::zeros(&[vocab]));
        Ok(AsrModel { encoder, head, stats })
    }

    pub fn vocab(&self) -> usize {
        self.head["ctc.b"].len()
    }

    /// All tensors, encoder first, in registration order.
    pub fn tensors(&self) -> ParamMap {
        self.encoder.params.iter().chain(&self.head).map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn from_tensors(config: EncoderConfig, stats: FeatureStats, tensors: &ParamMap) -> Result<Self> {
        let encoder = Encoder::from_params(config, tensors)?;
        let mut head = ParamMap::new();
        for name in ["ctc.W", "ctc.b"] {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::invalid(format!("tensor `{name}` missing from checkpoint")))?;
            head.insert(name.into(), t.clone());
        }
        if head["ctc.W"].shape() != [encoder.config.d_model, head["ctc.b"].len()] {
            return Err(Error::invalid("CTC head shape does not match the encoder width"));
        }
        Ok(AsrModel { encoder, head, stats })
    }

    /// Append encoder and head over normalized features `x: [T, 80]`;
    /// returns (encoder nodes, log-probs `[T', V]`).
    pub fn build(&self, g: &mut Graph, x: NodeId) -> (EncoderNodes, NodeId) {
        let nodes = self.encoder.build(g, x);
        let w = g.param("ctc.W", &self.head["ctc.W"]);
        let b = g.param("ctc.b", &self.head["ctc.b"]);
        let logits = g.matmul(nodes.top(), w);
        let logits = g.add(logits, b);
        let lp = g.log_softmax(logits);
        (nodes, lp)
    }

    /// Log-probabilities for already-normalized features.
    pub fn log_probs_normalized(&self, spec: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(spec.clone());
        let (_, lp) = self.build(&mut g, x);
        g.forward(&Feeds::new())?;
        Ok(g.value(lp).unwrap().clone())
    }

    /// Log-probabilities for a raw log-Mel spectrogram.
    pub fn log_probs(&self, spec: &MelSpectrogram) -> Result<Tensor> {
        self.log_probs_normalized(self.stats.normalize(spec)?.values())
    }

    /// Mean CTC loss and mean per-utterance greedy WER over
    /// already-normalized inputs.
    pub fn score(&self, inputs: &[(Tensor, Vec<usize>)], word_len: usize) -> Result<(f64, f64)> {
        let results = crate::parallel::map(inputs, |_, (x, target)| -> Result<(f64, f64)> {
            let lp = self.log_probs_normalized(x)?;
            let loss = ctc_loss(&lp, target)?;
            let hyp = greedy_decode(&lp);
            let words = |t: &[usize]| t.chunks(word_len.max(1)).map(|c| c.to_vec()).collect::<Vec<_>>();
            Ok((loss, wer(&words(target), &words(&hyp))))
        });
        let (mut loss, mut err) = (0.0, 0.0);
        for r in results {
            let (l, w) = r?;
            loss += l;
            err += w;
        }
        let n = inputs.len().max(1) as f64;
        Ok((loss / n, err / n))
    }
}

impl ParamStore for AsrModel {
    fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        if name.starts_with("ctc.") {
            self.head.get_mut(name)
        } else {
            self.encoder.params.get_mut(name)
        }
    }
}

/// Normalized clean-speech inputs paired with their targets.
pub fn clean_inputs(utts: &[Utterance], stats: &FeatureStats) -> Result<Vec<(Tensor, Vec<usize>)>> {
    utts.iter().map(|u| Ok((stats.normalize(&u.clean)?.into_values(), u.tokens.clone()))).collect()
}

/// Normalized noisy inputs paired with their targets.
pub fn noisy_inputs(utts: &[Utterance], stats: &FeatureStats) -> Result<Vec<(Tensor, Vec<usize>)>> {
    utts.iter().map(|u| Ok((stats.normalize(&u.noisy)?.into_values(), u.tokens.clone()))).collect()
}

/// Which half of a noisy/clean pair feeds the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Clean,
    Noisy,
}

/// Normalized inputs for one side of each pair, passed through `frontend`
/// first when one is given.
pub fn prepared_inputs(
    utts: &[Utterance],
    stats: &FeatureStats,
    side: Side,
    frontend: Option<&CleancoderModel>,
) -> Result<Vec<(Tensor, Vec<usize>)>> {
    parallel::map(utts, |_, u| {
        let raw = match side {
            Side::Clean => &u.clean,
            Side::Noisy => &u.noisy,
        };
        let spec = match frontend {
            Some(f) => stats.normalize(&f.forward(raw)?)?,
            None => stats.normalize(raw)?,
        };
        Ok((spec.into_values(), u.tokens.clone()))
    })
    .into_iter()
    .collect()
}

#[doc(hidden)]
pub fn log_softmax(x: &Tensor) -> Tensor {
    log_softmax_rows(x)
}

#[cfg(test)]
mod tests;
