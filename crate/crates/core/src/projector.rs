//! Principal projector: a transposed (channel) attention encoder that mixes `C`
//! feature channels into `Ĉ < C` principal channels, and a two-convolution
//! decoder used only while the pair is trained as an autoencoder.
//!
//! Encoder, per head: layer norm over channels, 1×1 then depth-wise 3×3
//! convolutions giving `Q, K, V`, channel affinity `A = norm(Q)·norm(K)ᵀ / τ`,
//! selection `Â = softmax(A·W)` taken over the input-channel axis, output
//! `Âᵀ·V` followed by a 1×1 convolution. Every column of `Â` is a probability
//! vector, so each pre-output channel is a convex combination of `V` channels.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::optim::{Adam, AdamConfig};
use crate::params::{add_grads, Bound, Conv, ConvSpec, Init, ParamSet};
use crate::tensor::Tensor;

const DEFAULT_GAIN: f64 = 0.408_248_290_463_863;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectorConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub heads: usize,
    /// Initial attention temperature.
    pub temperature: f64,
    pub learnable_temperature: bool,
}

impl ProjectorConfig {
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            heads: 1,
            temperature: 1.0,
            learnable_temperature: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_channels == 0 || self.out_channels >= self.in_channels {
            return Err(Error::invalid(format!(
                "projector must reduce channels: {} -> {}",
                self.in_channels, self.out_channels
            )));
        }
        self.validate_heads()
    }

    fn validate_heads(&self) -> Result<()> {
        if self.heads == 0
            || !self.in_channels.is_multiple_of(self.heads)
            || !self.out_channels.is_multiple_of(self.heads)
        {
            return Err(Error::invalid("projector heads must divide both channel counts"));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::invalid("projector temperature must be positive"));
        }
        Ok(())
    }
}

/// Autoencoder optimization budget.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoencoderBudget {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for AutoencoderBudget {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1e-3,
            batch: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    norm_weight: usize,
    norm_bias: usize,
    qkv: Conv,
    qkv_dw: Conv,
    temperature: Vec<usize>,
    select: Vec<usize>,
    out: Conv,
    decoder: [Conv; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrincipalProjector {
    config: ProjectorConfig,
    params: ParamSet,
    layout: Layout,
    frozen: bool,
}

/// Intermediate values of one encoder pass, for inspection.
#[derive(Clone, Debug)]
pub struct EncoderTrace {
    /// Per head `[C/heads, Ĉ/heads]`.
    pub attention: Vec<Tensor>,
    /// `[C, H·W]`.
    pub values: Tensor,
    /// `Âᵀ·V` before the output convolution, `[Ĉ, H·W]`.
    pub mixed: Tensor,
    pub output: FeatureMap,
}

impl PrincipalProjector {
    /// Fresh, trainable projector.
    pub fn new(config: ProjectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self::build(config, seed))
    }

    fn build(config: ProjectorConfig, seed: u64) -> Self {
        let (c, ch) = (config.in_channels, config.out_channels);
        let heads = config.heads;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::new();
        let k = Init::Kaiming(DEFAULT_GAIN);
        let mut conv = |set: &mut ParamSet, name: &str, cin, cout, kernel, groups| {
            Conv::create(
                set,
                &mut rng,
                ConvSpec {
                    name,
                    cin,
                    cout,
                    kernel,
                    groups,
                    bias: true,
                    init: k,
                },
            )
        };
        let norm_weight = set.push("encoder.norm.weight", Tensor::filled(&[c, 1, 1], 1.0));
        let norm_bias = set.push("encoder.norm.bias", Tensor::zeros(&[c, 1, 1]));
        let qkv = conv(&mut set, "encoder.qkv", c, 3 * c, 1, 1);
        let qkv_dw = conv(&mut set, "encoder.qkv_dw", 3 * c, 3 * c, 3, 3 * c);
        let out = conv(&mut set, "encoder.out", ch, ch, 1, 1);
        let decoder = [
            conv(&mut set, "decoder.conv1", ch, c, 3, 1),
            conv(&mut set, "decoder.conv2", c, c, 3, 1),
        ];
        let temperature = (0..heads)
            .map(|h| {
                set.push(
                    format!("encoder.temperature{h}"),
                    Tensor::scalar(config.temperature),
                )
            })
            .collect();
        let mut select_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e1ec7);
        let select = (0..heads)
            .map(|h| {
                let t = crate::params::init_tensor(
                    &mut select_rng,
                    &[c / heads, ch / heads],
                    Init::Orthogonal(1.0),
                );
                set.push(format!("encoder.select{h}"), t)
            })
            .collect();
        Self {
            config,
            params: set,
            layout: Layout {
                norm_weight,
                norm_bias,
                qkv,
                qkv_dw,
                temperature,
                select,
                out,
                decoder,
            },
            frozen: false,
        }
    }

    /// Near-identity autoencoder with `Ĉ == C`: `Q = K = V` is the normalized input,
    /// `W` is a sharp identity, and the decoder passes values through unchanged
    /// (shifted past the ReLU and back). Reconstructs channel-standardized inputs.
    pub fn identity_like(channels: usize) -> Result<Self> {
        let config = ProjectorConfig {
            in_channels: channels,
            out_channels: channels,
            heads: 1,
            temperature: 1.0,
            learnable_temperature: false,
        };
        config.validate_heads()?;
        let mut p = Self::build(config, 0);
        let c = channels;
        let l = p.layout.clone();
        let set = &mut p.params;
        let eye_1x1 = |t: &mut Tensor, blocks: usize| {
            t.data_mut().fill(0.0);
            for b in 0..blocks {
                for i in 0..c {
                    t.data_mut()[(b * c + i) * c + i] = 1.0;
                }
            }
        };
        eye_1x1(set.get_mut(l.qkv.weight), 3);
        let dw = set.get_mut(l.qkv_dw.weight).data_mut();
        dw.fill(0.0);
        for o in 0..3 * c {
            dw[o * 9 + 4] = 1.0;
        }
        eye_1x1(set.get_mut(l.out.weight), 1);
        let select = set.get_mut(l.select[0]).data_mut();
        select.fill(0.0);
        for i in 0..c {
            select[i * c + i] = 50.0;
        }
        let shift = 10.0 + (c as f64).sqrt();
        for (j, conv) in l.decoder.iter().enumerate() {
            let w = set.get_mut(conv.weight).data_mut();
            w.fill(0.0);
            for i in 0..c {
                w[(i * c + i) * 9 + 4] = 1.0;
            }
            let bias = if j == 0 { shift } else { -shift };
            set.get_mut(conv.bias.expect("decoder bias")).data_mut().fill(bias);
        }
        for b in [l.qkv.bias, l.qkv_dw.bias, l.out.bias].into_iter().flatten() {
            set.get_mut(b).data_mut().fill(0.0);
        }
        Ok(p)
    }

    pub fn config(&self) -> &ProjectorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn hash(&self) -> String {
        self.params.hash()
    }

    /// Mutable parameters; refused once frozen.
    pub fn params_mut(&mut self) -> Result<&mut ParamSet> {
        if self.frozen {
            return Err(Error::invalid("projector is frozen"));
        }
        Ok(&mut self.params)
    }

    /// Loads checkpointed parameters; the result is frozen.
    pub fn from_params(config: ProjectorConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let mut p = Self::build(config, 0);
        if !p.params.same_layout(&params) {
            return Err(Error::CorruptCheckpoint(
                "parameter layout does not match the projector config".into(),
            ));
        }
        p.params = params;
        p.frozen = true;
        Ok(p)
    }

    fn check_channels(&self, got: usize, want: usize) -> Result<()> {
        if got != want {
            return Err(Error::invalid(format!(
                "projector expects {want} channels, got {got}"
            )));
        }
        Ok(())
    }

    /// Encoder on a `[C, H, W]` variable; returns `(output, per-head Â, V, mixed)`.
    fn encode_parts(&self, g: &mut Graph, p: &Bound, x: Var) -> (Var, Vec<Var>, Var, Var) {
        let l = &self.layout;
        let s = g.shape(x).to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        let hw = h * w;
        let heads = self.config.heads;
        let (hc, hk) = (c / heads, self.config.out_channels / heads);

        let y = g.layer_norm_channels(x);
        let y = g.mul(y, p[l.norm_weight]);
        let y = g.add(y, p[l.norm_bias]);
        let qkv = l.qkv.forward(g, p, y);
        let qkv = l.qkv_dw.forward(g, p, qkv);
        let flat = g.reshape(qkv, &[3 * c, hw]);
        let q = g.slice_channels(flat, 0, c);
        let k = g.slice_channels(flat, c, c);
        let v = g.slice_channels(flat, 2 * c, c);

        let mut attn = Vec::with_capacity(heads);
        let mut outs = Vec::with_capacity(heads);
        for head in 0..heads {
            let qh = g.slice_channels(q, head * hc, hc);
            let kh = g.slice_channels(k, head * hc, hc);
            let vh = g.slice_channels(v, head * hc, hc);
            let qn = g.l2_normalize_rows(qh);
            let kn = g.l2_normalize_rows(kh);
            let a = g.matmul(qn, kn, false, true);
            let a = g.div_scalar(a, p[l.temperature[head]]);
            let sel = g.matmul(a, p[l.select[head]], false, false);
            let a_hat = g.softmax_cols(sel);
            let o = g.matmul(a_hat, vh, true, false);
            attn.push(a_hat);
            outs.push(g.reshape(o, &[hk, h, w]));
        }
        let mixed = g.concat(&outs);
        let out = l.out.forward(g, p, mixed);
        (out, attn, v, mixed)
    }

    /// `ψ(x)` for a `[C, H, W]` variable.
    pub fn encode_graph(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        self.encode_parts(g, p, x).0
    }

    pub fn decode_graph(&self, g: &mut Graph, p: &Bound, z: Var) -> Var {
        let [d1, d2] = &self.layout.decoder;
        let t = d1.forward(g, p, z);
        let t = g.relu(t);
        d2.forward(g, p, t)
    }

    pub fn bind(&self, g: &mut Graph) -> Bound {
        self.params.bind(g, false)
    }

    pub fn mhta_encode(&self, x: &FeatureMap) -> Result<FeatureMap> {
        Ok(self.trace(x)?.output)
    }

    pub fn trace(&self, x: &FeatureMap) -> Result<EncoderTrace> {
        self.check_channels(x.channels(), self.config.in_channels)?;
        let mut g = Graph::new();
        let p = self.bind(&mut g);
        let xv = g.constant(x.tensor().clone());
        let (out, attn, v, mixed) = self.encode_parts(&mut g, &p, xv);
        Ok(EncoderTrace {
            attention: attn.iter().map(|a| g.value(*a).clone()).collect(),
            values: g.value(v).clone(),
            mixed: g.value(mixed).clone().reshape(&[
                self.config.out_channels,
                x.height() * x.width(),
            ])?,
            output: FeatureMap::new(g.value(out).clone())?,
        })
    }

    pub fn decode(&self, z: &FeatureMap) -> Result<FeatureMap> {
        self.check_channels(z.channels(), self.config.out_channels)?;
        let mut g = Graph::new();
        let p = self.bind(&mut g);
        let zv = g.constant(z.tensor().clone());
        let out = self.decode_graph(&mut g, &p, zv);
        FeatureMap::new(g.value(out).clone())
    }

    /// Mean absolute reconstruction error of decode(encode(x)) over `features`.
    pub fn reconstruction_l1(&self, features: &[FeatureMap]) -> Result<f64> {
        if features.is_empty() {
            return Err(Error::invalid("no features to reconstruct"));
        }
        let mut total = 0.0;
        for f in features {
            let r = self.decode(&self.mhta_encode(f)?)?;
            let t = f.tensor();
            total += r
                .tensor()
                .data()
                .iter()
                .zip(t.data())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / t.numel() as f64;
        }
        Ok(total / features.len() as f64)
    }

    fn frozen_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.params.len()];
        if !self.config.learnable_temperature {
            for &t in &self.layout.temperature {
                mask[t] = true;
            }
        }
        mask
    }
}

/// Fits encoder and decoder to reconstruct `features` under an L1 objective and
/// returns the frozen projector.
pub fn train_autoencoder(
    features: &[FeatureMap],
    config: &ProjectorConfig,
    budget: &AutoencoderBudget,
    seed: u64,
) -> Result<PrincipalProjector> {
    if features.is_empty() {
        return Err(Error::invalid("autoencoder needs at least one feature map"));
    }
    if budget.batch == 0 || !(budget.lr.is_finite() && budget.lr > 0.0) {
        return Err(Error::invalid("autoencoder batch and lr must be positive"));
    }
    let mut proj = PrincipalProjector::new(config.clone(), seed)?;
    for f in features {
        proj.check_channels(f.channels(), config.in_channels)?;
    }
    let mask = proj.frozen_mask();
    let mut adam = Adam::new(&proj.params, AdamConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..features.len()).collect();
    for epoch in 0..budget.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(budget.batch) {
            let mut acc: Vec<Vec<f64>> = proj
                .params
                .iter()
                .map(|p| vec![0.0; p.tensor.numel()])
                .collect();
            for &i in batch {
                let mut g = Graph::new();
                let p = proj.params.bind(&mut g, true);
                let x = g.constant(features[i].tensor().clone());
                let z = proj.encode_graph(&mut g, &p, x);
                let r = proj.decode_graph(&mut g, &p, z);
                let loss = g.mean_abs_diff(r, x);
                if !g.scalar(loss).is_finite() {
                    return Err(Error::Diverged {
                        step: epoch,
                        detail: "projector reconstruction loss is not finite".into(),
                    });
                }
                add_grads(&mut acc, &p.grads(&g.backward(loss), &proj.params));
            }
            let n = batch.len() as f64;
            acc.iter_mut().flatten().for_each(|v| *v /= n);
            adam.step(&mut proj.params, &acc, budget.lr, &mask);
        }
    }
    proj.freeze();
    Ok(proj)
}
