//! Parallel Weighted Sum over frozen encoder taps and the four interleaved
//! Highway Network decoders.

use crate::dsp::{FeatureStats, MelSpectrogram, MEL_BINS};
use crate::encoder::{Encoder, LatentTapStack};
use crate::error::{Error, Result};
use crate::numgrad::{Feeds, Graph, NodeId, ParamMap, Rng, Tensor};
use crate::trainer::ParamStore;

/// Number of decoders; equals the encoder's subsampling factor.
pub const NETS: usize = 4;
pub const HIGHWAY_LAYERS: usize = 4;
pub const GATE_BIAS_INIT: f64 = -1.0;
pub const PWS_INIT_NOISE: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct CleancoderModel {
    /// Frozen backbone; never registered as trainable.
    pub encoder: Encoder,
    /// PWS and Highway tensors.
    pub params: ParamMap,
    pub stats: FeatureStats,
}

/// Closed-form trainable parameter count for `blocks` taps of width `d`.
pub fn param_count(blocks: usize, d: usize) -> usize {
    let f = MEL_BINS;
    blocks * (d * d + d) + NETS * (d * f + f + HIGHWAY_LAYERS * (2 * (f * f + f)))
}

impl CleancoderModel {
    pub fn init(encoder: Encoder, stats: FeatureStats, rng: &mut Rng) -> Result<Self> {
        let d = encoder.config.d_model;
        let blocks = encoder.config.n_blocks;
        let mut p = ParamMap::new();
        for b in 1..=blocks {
            let mut w = Tensor::eye(d).map(|v| v / blocks as f64);
            for v in w.data_mut() {
                *v += PWS_INIT_NOISE * rng.normal();
            }
            p.insert(format!("pws.W.{b}"), w);
            p.insert(format!("pws.c.{b}"), Tensor::zeros(&[d]));
        }
        let f = MEL_BINS;
        for k in 1..=NETS {
            p.insert(format!("hw{k}.P"), Tensor::randn(&[d, f], 1.0 / (d as f64).sqrt(), rng));
            p.insert(format!("hw{k}.Pb"), Tensor::zeros(&[f]));
            for j in 1..=HIGHWAY_LAYERS {
                let pre = format!("hw{k}.layer{j}");
                p.insert(format!("{pre}.WH"), Tensor::randn(&[f, f], 1.0 / (f as f64).sqrt(), rng));
                p.insert(format!("{pre}.bH"), Tensor::zeros(&[f]));
                p.insert(format!("{pre}.WG"), Tensor::randn(&[f, f], 1.0 / (f as f64).sqrt(), rng));
                p.insert(format!("{pre}.bG"), Tensor::full(&[f], GATE_BIAS_INIT));
            }
        }
        Ok(CleancoderModel { encoder, params: p, stats })
    }

    /// Rebuild from stored tensors, checking names and shapes.
    pub fn from_tensors(encoder: Encoder, stats: FeatureStats, tensors: &ParamMap) -> Result<Self> {
        let mut model = CleancoderModel::init(encoder, stats, &mut Rng::new(0))?;
        for (name, slot) in model.params.iter_mut() {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::invalid(format!("frontend tensor `{name}` missing from checkpoint")))?;
            if t.shape() != slot.shape() {
                return Err(Error::invalid(format!("frontend tensor `{name}` has shape {:?}", t.shape())));
            }
            *slot = t.clone();
        }
        Ok(model)
    }

    pub fn blocks(&self) -> usize {
        self.encoder.config.n_blocks
    }

    fn p(&self, g: &mut Graph, name: &str) -> NodeId {
        g.param(name, &self.params[name])
    }

    /// `out[t] = sum_b (tap_b[t] W_b + c_b)`.
    pub fn parallel_weighted_sum(&self, g: &mut Graph, taps: &[NodeId]) -> Result<NodeId> {
        if taps.len() != self.blocks() {
            return Err(Error::invalid(format!(
                "PWS holds {} projections but received {} taps",
                self.blocks(),
                taps.len()
            )));
        }
        let parts: Vec<NodeId> = taps
            .iter()
            .enumerate()
            .map(|(i, &tap)| {
                let w = self.p(g, &format!("pws.W.{}", i + 1));
                let c = self.p(g, &format!("pws.c.{}", i + 1));
                let y = g.matmul(tap, w);
                g.add(y, c)
            })
            .collect();
        Ok(g.sum(&parts))
    }

    /// Highway network `k` (1-based) over rows of `s: [R, D]`, giving `[R, 80]`.
    pub fn highway(&self, g: &mut Graph, k: usize, s: NodeId) -> NodeId {
        let pw = self.p(g, &format!("hw{k}.P"));
        let pb = self.p(g, &format!("hw{k}.Pb"));
        let x = g.matmul(s, pw);
        let mut x = g.add(x, pb);
        for j in 1..=HIGHWAY_LAYERS {
            let pre = format!("hw{k}.layer{j}");
            let (wh, bh) = (self.p(g, &format!("{pre}.WH")), self.p(g, &format!("{pre}.bH")));
            let (wg, bg) = (self.p(g, &format!("{pre}.WG")), self.p(g, &format!("{pre}.bG")));
            let h = g.matmul(x, wh);
            let h = g.add(h, bh);
            let h = g.swish(h);
            let z = g.matmul(x, wg);
            let z = g.add(z, bg);
            let gate = g.sigmoid(z);
            // g*H + (1-g)*x written as x + g*(H-x).
            let delta = g.sub(h, x);
            let delta = g.mul(gate, delta);
            x = g.add(x, delta);
        }
        x
    }

    /// Interleave `N_1..N_4` outputs: row `4i + k - 1` is `N_k(s_i)`.
    /// Returns `[4 R, 80]`, untrimmed.
    pub fn decode_frames(&self, g: &mut Graph, latent: NodeId) -> NodeId {
        let outs: Vec<NodeId> = (1..=NETS).map(|k| self.highway(g, k, latent)).collect();
        g.interleave(&outs)
    }

    /// Decoder output in the normalized domain for taps already computed.
    pub fn build_from_taps(&self, g: &mut Graph, taps: &[NodeId]) -> Result<NodeId> {
        let latent = self.parallel_weighted_sum(g, taps)?;
        Ok(self.decode_frames(g, latent))
    }

    /// Encoder taps of a normalized spectrogram.
    pub fn taps(&self, normalized: &MelSpectrogram) -> Result<LatentTapStack> {
        self.encoder.encode_with_taps(normalized)
    }

    /// Denoise normalized features `[T, 80]` from precomputed taps.
    pub fn decode_taps(&self, taps: &LatentTapStack, frames: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = taps.taps.iter().map(|t| g.constant(t.clone())).collect();
        let out = self.build_from_taps(&mut g, &ids)?;
        let out = g.slice_rows(out, 0, frames);
        g.forward(&Feeds::new())?;
        Ok(g.value(out).unwrap().clone())
    }

    /// Normalize, extract, decode, trim to the input length and denormalize.
    pub fn forward(&self, noisy: &MelSpectrogram) -> Result<MelSpectrogram> {
        let normalized = self.stats.normalize(noisy)?;
        let taps = self.taps(&normalized)?;
        let out = self.decode_taps(&taps, noisy.frames())?;
        self.stats.denormalize(&MelSpectrogram::new(out)?)
    }

    pub fn trainable_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }
}

impl ParamStore for CleancoderModel {
    fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }
}

/// Masked mean absolute error; `mask` holds one weight per row of `pred`.
pub fn l1_loss(g: &mut Graph, pred: NodeId, target: NodeId, mask: Tensor) -> NodeId {
    g.masked_l1(pred, target, mask)
}

#[cfg(test)]
mod tests;
