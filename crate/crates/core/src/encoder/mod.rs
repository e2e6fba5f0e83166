//! Miniature Conformer encoder with x4 subsampling and per-block taps.

mod pretrain;

pub use pretrain::{pretrain_backbone, PretrainConfig, PretrainOutcome};

use serde::{Deserialize, Serialize};

use crate::dsp::{MelSpectrogram, MEL_BINS};
use crate::error::{Error, Result};
use crate::numgrad::{conv_out_len, Feeds, Graph, NodeId, ParamMap, Rng, Tensor};

/// Relative positions beyond this distance share one bias entry.
pub const MAX_REL_DIST: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub conv_kernel: usize,
    pub ffn_expansion: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { d_model: 64, n_blocks: 4, n_heads: 4, conv_kernel: 15, ffn_expansion: 4, dropout: 0.0 }
    }
}

impl EncoderConfig {
    /// Named size presets: `medium-mini` (D=48) and `large-mini` (D=64).
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "medium-mini" => Ok(EncoderConfig { d_model: 48, ..Self::default() }),
            "large-mini" => Ok(Self::default()),
            other => Err(Error::invalid(format!("unknown encoder preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_blocks == 0 || self.n_heads == 0 || self.ffn_expansion == 0 {
            return Err(Error::invalid("encoder sizes must be positive"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::invalid(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(Error::invalid(format!("conv_kernel {} must be odd", self.conv_kernel)));
        }
        if self.dropout != 0.0 {
            return Err(Error::invalid("dropout is not supported; set it to 0"));
        }
        Ok(())
    }
}

/// Output length of the subsampling stack, `ceil(T / 4)`.
pub fn subsampled_len(t: usize) -> Result<usize> {
    if t < 4 {
        return Err(Error::invalid(format!("subsampling needs at least 4 frames, got {t}")));
    }
    let half = conv_out_len(t, 3, 2, 1).unwrap();
    Ok(conv_out_len(half, 3, 2, 1).unwrap())
}

/// Block outputs of one utterance, each `[T', D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTapStack {
    pub taps: Vec<Tensor>,
    pub t_prime: usize,
}

/// Graph nodes produced by [`Encoder::build`].
#[derive(Clone, Debug)]
pub struct EncoderNodes {
    pub subsampled: NodeId,
    pub taps: Vec<NodeId>,
    /// Per block, the post-softmax attention weights `[H, T', T']`.
    pub attention: Vec<NodeId>,
}

impl EncoderNodes {
    /// The sequence a CTC head consumes: the last block's output.
    pub fn top(&self) -> NodeId {
        *self.taps.last().unwrap()
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub params: ParamMap,
}

fn glorot(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    Tensor::randn(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

impl Encoder {
    pub fn init(config: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let f = d * config.ffn_expansion;
        let mut p = ParamMap::new();
        p.insert("enc.sub1.W".into(), glorot(&[3, MEL_BINS, d], 3 * MEL_BINS, rng));
        p.insert("enc.sub1.b".into(), Tensor::zeros(&[d]));
        p.insert("enc.sub2.W".into(), glorot(&[3, d, d], 3 * d, rng));
        p.insert("enc.sub2.b".into(), Tensor::zeros(&[d]));
        for b in 0..config.n_blocks {
            let pre = format!("enc.block{b}");
            for ff in ["ff1", "ff2"] {
                p.insert(format!("{pre}.{ff}.ln.g"), Tensor::full(&[d], 1.0));
                p.insert(format!("{pre}.{ff}.ln.b"), Tensor::zeros(&[d]));
                p.insert(format!("{pre}.{ff}.W1"), glorot(&[d, f], d, rng));
                p.insert(format!("{pre}.{ff}.b1"), Tensor::zeros(&[f]));
                p.insert(format!("{pre}.{ff}.W2"), glorot(&[f, d], f, rng));
                p.insert(format!("{pre}.{ff}.b2"), Tensor::zeros(&[d]));
            }
            p.insert(format!("{pre}.att.ln.g"), Tensor::full(&[d], 1.0));
            p.insert(format!("{pre}.att.ln.b"), Tensor::zeros(&[d]));
            for w in ["Wq", "Wk", "Wv", "Wo"] {
                p.insert(format!("{pre}.att.{w}"), glorot(&[d, d], d, rng));
                p.insert(format!("{pre}.att.b{}", &w[1..]), Tensor::zeros(&[d]));
            }
            p.insert(format!("{pre}.att.rel"), Tensor::zeros(&[config.n_heads, 2 * MAX_REL_DIST + 1]));
            p.insert(format!("{pre}.conv.ln.g"), Tensor::full(&[d], 1.0));
            p.insert(format!("{pre}.conv.ln.b"), Tensor::zeros(&[d]));
            p.insert(format!("{pre}.conv.pw1.W"), glorot(&[d, 2 * d], d, rng));
            p.insert(format!("{pre}.conv.pw1.b"), Tensor::zeros(&[2 * d]));
            p.insert(format!("{pre}.conv.dw.W"), glorot(&[config.conv_kernel, d], config.conv_kernel, rng));
            p.insert(format!("{pre}.conv.dw.b"), Tensor::zeros(&[d]));
            p.insert(format!("{pre}.conv.ln2.g"), Tensor::full(&[d], 1.0));
            p.insert(format!("{pre}.conv.ln2.b"), Tensor::zeros(&[d]));
            p.insert(format!("{pre}.conv.pw2.W"), glorot(&[d, d], d, rng));
            p.insert(format!("{pre}.conv.pw2.b"), Tensor::zeros(&[d]));
            p.insert(format!("{pre}.out.ln.g"), Tensor::full(&[d], 1.0));
            p.insert(format!("{pre}.out.ln.b"), Tensor::zeros(&[d]));
        }
        Ok(Encoder { config, params: p })
    }

    /// Rebuild from stored tensors, checking names and shapes against a
    /// fresh initialization.
    pub fn from_params(config: EncoderConfig, params: &ParamMap) -> Result<Self> {
        let mut enc = Encoder::init(config, &mut Rng::new(0))?;
        for (name, slot) in enc.params.iter_mut() {
            let t = params
                .get(name)
                .ok_or_else(|| Error::invalid(format!("encoder tensor `{name}` missing from checkpoint")))?;
            if t.shape() != slot.shape() {
                return Err(Error::invalid(format!(
                    "encoder tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(enc)
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    fn p(&self, g: &mut Graph, name: &str) -> NodeId {
        g.param(name, &self.params[name])
    }

    fn linear(&self, g: &mut Graph, x: NodeId, w: &str, b: &str) -> NodeId {
        let w = self.p(g, w);
        let b = self.p(g, b);
        let y = g.matmul(x, w);
        g.add(y, b)
    }

    fn ln(&self, g: &mut Graph, x: NodeId, prefix: &str) -> NodeId {
        let gain = self.p(g, &format!("{prefix}.g"));
        let bias = self.p(g, &format!("{prefix}.b"));
        g.layer_norm(x, gain, bias)
    }

    fn feed_forward(&self, g: &mut Graph, x: NodeId, pre: &str) -> NodeId {
        let h = self.ln(g, x, &format!("{pre}.ln"));
        let h = self.linear(g, h, &format!("{pre}.W1"), &format!("{pre}.b1"));
        let h = g.swish(h);
        self.linear(g, h, &format!("{pre}.W2"), &format!("{pre}.b2"))
    }

    fn attention(&self, g: &mut Graph, x: NodeId, pre: &str) -> (NodeId, NodeId) {
        let heads = self.config.n_heads;
        let dk = self.config.d_model / heads;
        let h = self.ln(g, x, &format!("{pre}.ln"));
        let q = self.linear(g, h, &format!("{pre}.Wq"), &format!("{pre}.bq"));
        let k = self.linear(g, h, &format!("{pre}.Wk"), &format!("{pre}.bk"));
        let v = self.linear(g, h, &format!("{pre}.Wv"), &format!("{pre}.bv"));
        let (q, k, v) = (g.split_heads(q, heads), g.split_heads(k, heads), g.split_heads(v, heads));
        let scores = g.matmul_nt(q, k);
        let scores = g.scale(scores, 1.0 / (dk as f64).sqrt());
        let table = self.p(g, &format!("{pre}.rel"));
        let bias = g.rel_pos_bias(table, h, MAX_REL_DIST);
        let scores = g.add(scores, bias);
        let probs = g.softmax(scores);
        let ctx = g.matmul(probs, v);
        let ctx = g.merge_heads(ctx);
        (self.linear(g, ctx, &format!("{pre}.Wo"), &format!("{pre}.bo")), probs)
    }

    fn conv_module(&self, g: &mut Graph, x: NodeId, pre: &str) -> NodeId {
        let d = self.config.d_model;
        let h = self.ln(g, x, &format!("{pre}.ln"));
        let h = self.linear(g, h, &format!("{pre}.pw1.W"), &format!("{pre}.pw1.b"));
        let a = g.slice_last(h, 0, d);
        let gate = g.slice_last(h, d, 2 * d);
        let gate = g.sigmoid(gate);
        let h = g.mul(a, gate);
        let w = self.p(g, &format!("{pre}.dw.W"));
        let h = g.conv1d(h, w, 1, self.config.conv_kernel / 2, true);
        let bias = self.p(g, &format!("{pre}.dw.b"));
        let h = g.add(h, bias);
        let h = self.ln(g, h, &format!("{pre}.ln2"));
        let h = g.swish(h);
        self.linear(g, h, &format!("{pre}.pw2.W"), &format!("{pre}.pw2.b"))
    }

    /// One Conformer block over `x: [T', D]`; returns (output, attention).
    pub fn block(&self, g: &mut Graph, x: NodeId, b: usize) -> (NodeId, NodeId) {
        let pre = format!("enc.block{b}");
        let ff = self.feed_forward(g, x, &format!("{pre}.ff1"));
        let ff = g.scale(ff, 0.5);
        let x = g.add(x, ff);
        let (att, probs) = self.attention(g, x, &format!("{pre}.att"));
        let x = g.add(x, att);
        let conv = self.conv_module(g, x, &format!("{pre}.conv"));
        let x = g.add(x, conv);
        let ff = self.feed_forward(g, x, &format!("{pre}.ff2"));
        let ff = g.scale(ff, 0.5);
        let x = g.add(x, ff);
        (self.ln(g, x, &format!("{pre}.out.ln")), probs)
    }

    pub fn subsample(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let w1 = self.p(g, "enc.sub1.W");
        let b1 = self.p(g, "enc.sub1.b");
        let h = g.conv1d(x, w1, 2, 1, false);
        let h = g.add(h, b1);
        let h = g.swish(h);
        let w2 = self.p(g, "enc.sub2.W");
        let b2 = self.p(g, "enc.sub2.b");
        let h = g.conv1d(h, w2, 2, 1, false);
        let h = g.add(h, b2);
        g.swish(h)
    }

    /// Append the encoder over `x: [T, 80]` (normalized features) to `g`.
    pub fn build(&self, g: &mut Graph, x: NodeId) -> EncoderNodes {
        let mut h = self.subsample(g, x);
        let subsampled = h;
        let mut taps = Vec::with_capacity(self.config.n_blocks);
        let mut attention = Vec::with_capacity(self.config.n_blocks);
        for b in 0..self.config.n_blocks {
            let (out, probs) = self.block(g, h, b);
            taps.push(out);
            attention.push(probs);
            h = out;
        }
        EncoderNodes { subsampled, taps, attention }
    }

    /// Taps for one normalized spectrogram.
    pub fn encode_with_taps(&self, spec: &MelSpectrogram) -> Result<LatentTapStack> {
        let t_prime = subsampled_len(spec.frames())?;
        let mut g = Graph::new();
        let x = g.constant(spec.values().clone());
        let nodes = self.build(&mut g, x);
        g.forward(&Feeds::new())?;
        let taps = nodes.taps.iter().map(|&id| g.value(id).unwrap().clone()).collect();
        Ok(LatentTapStack { taps, t_prime })
    }
}

#[cfg(test)]
mod tests;
