//! The unified restoration network.
//!
//! A miniature feature-attention network: shallow 3×3 convolution, `num_groups`
//! attention groups of `blocks_per_group` residual blocks (channel attention then
//! pixel attention), and a fusion module that weights the group outputs with
//! channel attention and applies pixel attention. The fused map is the feature
//! extractor output `F(I)`. The head `φ` is two 3×3 convolutions plus the global
//! residual `I`; its last convolution starts at zero so a fresh model restores
//! every image to itself.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::imaging::Image;
use crate::params::{Bound, Conv, ConvSpec, Init, ParamSet};
use crate::tensor::Tensor;

/// PyTorch-default convolution scale: uniform in ±1/sqrt(fan_in).
const DEFAULT_GAIN: f64 = 0.408_248_290_463_863;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Paper,
    Desk,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub base_channels: usize,
    pub num_groups: usize,
    pub blocks_per_group: usize,
    pub scale: Scale,
}

impl BackboneConfig {
    pub fn desk() -> Self {
        Self {
            base_channels: 16,
            num_groups: 2,
            blocks_per_group: 2,
            scale: Scale::Desk,
        }
    }

    pub fn paper() -> Self {
        Self {
            base_channels: 192,
            num_groups: 3,
            blocks_per_group: 19,
            scale: Scale::Paper,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 4 {
            return Err(Error::invalid("backbone.base_channels must be >= 4"));
        }
        if self.num_groups == 0 || self.blocks_per_group == 0 {
            return Err(Error::invalid("backbone needs at least one group and block"));
        }
        Ok(())
    }

    fn reduced(&self) -> usize {
        (self.base_channels / 8).max(1)
    }
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// `H × W × C` activation map, stored channel-major as `[C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap(Tensor);

impl FeatureMap {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.shape().len() != 3 {
            return Err(Error::invalid(format!(
                "feature map must be [C, H, W], got {:?}",
                t.shape()
            )));
        }
        Ok(Self(t))
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.0.data()[(c * self.height() + y) * self.width() + x]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
struct AttentionPair {
    squeeze: Conv,
    excite: Conv,
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    conv1: Conv,
    conv2: Conv,
    channel: AttentionPair,
    pixel: AttentionPair,
}

#[derive(Clone, Debug, PartialEq)]
struct Group {
    blocks: Vec<Block>,
    tail: Conv,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    shallow: Conv,
    groups: Vec<Group>,
    fusion_channel: AttentionPair,
    fusion_pixel: AttentionPair,
    head: [Conv; 2],
    extractor_len: usize,
}

/// Restoration model `φ(F(·))` with its parameters and the task that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    config: BackboneConfig,
    params: ParamSet,
    layout: Layout,
    version_tag: usize,
}

struct Builder<'a> {
    set: &'a mut ParamSet,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, init: Init) -> Conv {
        Conv::create(
            self.set,
            self.rng,
            ConvSpec {
                name,
                cin,
                cout,
                kernel: k,
                groups: 1,
                bias: true,
                init,
            },
        )
    }

    fn attention(&mut self, name: &str, c: usize, hidden: usize, out: usize) -> AttentionPair {
        AttentionPair {
            squeeze: self.conv(&format!("{name}.squeeze"), c, hidden, 1, Init::Kaiming(DEFAULT_GAIN)),
            excite: self.conv(&format!("{name}.excite"), hidden, out, 1, Init::Kaiming(DEFAULT_GAIN)),
        }
    }
}

impl Backbone {
    /// Deterministic initialization from `seed`.
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config.base_channels;
        let r = config.reduced();
        let k = Init::Kaiming(DEFAULT_GAIN);
        let mut set = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            set: &mut set,
            rng: &mut rng,
        };
        let shallow = b.conv("extractor.shallow", 3, c, 3, k);
        let groups = (0..config.num_groups)
            .map(|gi| {
                let blocks = (0..config.blocks_per_group)
                    .map(|bi| {
                        let p = format!("extractor.group{gi}.block{bi}");
                        Block {
                            conv1: b.conv(&format!("{p}.conv1"), c, c, 3, k),
                            conv2: b.conv(&format!("{p}.conv2"), c, c, 3, k),
                            channel: b.attention(&format!("{p}.ca"), c, r, c),
                            pixel: b.attention(&format!("{p}.pa"), c, r, 1),
                        }
                    })
                    .collect();
                Group {
                    blocks,
                    tail: b.conv(&format!("extractor.group{gi}.tail"), c, c, 3, k),
                }
            })
            .collect();
        let gc = c * config.num_groups;
        let fusion_channel = b.attention("extractor.fusion.ca", gc, r, gc);
        let fusion_pixel = b.attention("extractor.fusion.pa", c, r, 1);
        let extractor_len = b.set.len();
        let head = [
            b.conv("head.conv1", c, c, 3, k),
            b.conv("head.conv2", c, 3, 3, Init::Zeros),
        ];
        Ok(Self {
            config,
            params: set,
            layout: Layout {
                shallow,
                groups,
                fusion_channel,
                fusion_pixel,
                head,
                extractor_len,
            },
            version_tag: 0,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Replaces all parameters; names and shapes must match this architecture.
    pub fn load_params(&mut self, params: ParamSet) -> Result<()> {
        if !self.params.same_layout(&params) {
            return Err(Error::CorruptCheckpoint(
                "parameter layout does not match the backbone config".into(),
            ));
        }
        self.params = params;
        Ok(())
    }

    /// Parameters `0..extractor_len()` belong to `F`; the rest to the head `φ`.
    pub fn extractor_len(&self) -> usize {
        self.layout.extractor_len
    }

    pub fn version_tag(&self) -> usize {
        self.version_tag
    }

    pub fn set_version_tag(&mut self, t: usize) {
        self.version_tag = t;
    }

    pub fn hash(&self) -> String {
        self.params.hash()
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.params.is_finite() {
            Ok(())
        } else {
            Err(Error::CorruptedModel("non-finite parameter".into()))
        }
    }

    fn attention(g: &mut Graph, p: &Bound, a: &AttentionPair, pooled: Var, x: Var) -> Var {
        let s = a.squeeze.forward(g, p, pooled);
        let s = g.relu(s);
        let e = a.excite.forward(g, p, s);
        let w = g.sigmoid(e);
        g.mul(x, w)
    }

    fn channel_attention(g: &mut Graph, p: &Bound, a: &AttentionPair, x: Var) -> Var {
        let pooled = g.global_avg_pool(x);
        Self::attention(g, p, a, pooled, x)
    }

    fn pixel_attention(g: &mut Graph, p: &Bound, a: &AttentionPair, x: Var) -> Var {
        Self::attention(g, p, a, x, x)
    }

    /// `F(x)` for a `[3, H, W]` input variable.
    pub fn features_graph(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let l = &self.layout;
        let c = self.config.base_channels;
        let shallow = l.shallow.forward(g, p, x);
        let mut h = shallow;
        let mut outs = Vec::with_capacity(l.groups.len());
        for group in &l.groups {
            let group_in = h;
            let mut r = h;
            for blk in &group.blocks {
                let block_in = r;
                let t = blk.conv1.forward(g, p, r);
                let t = g.relu(t);
                let t = g.add(t, block_in);
                let t = blk.conv2.forward(g, p, t);
                let t = Self::channel_attention(g, p, &blk.channel, t);
                let t = Self::pixel_attention(g, p, &blk.pixel, t);
                r = g.add(t, block_in);
            }
            let t = group.tail.forward(g, p, r);
            h = g.add(t, group_in);
            outs.push(h);
        }
        let cat = g.concat(&outs);
        let weighted = Self::channel_attention(g, p, &l.fusion_channel, cat);
        let mut fused = g.slice_channels(weighted, 0, c);
        for gi in 1..outs.len() {
            let part = g.slice_channels(weighted, gi * c, c);
            fused = g.add(fused, part);
        }
        Self::pixel_attention(g, p, &l.fusion_pixel, fused)
    }

    /// `φ(features) + input`.
    pub fn head_graph(&self, g: &mut Graph, p: &Bound, features: Var, input: Var) -> Var {
        let [h1, h2] = &self.layout.head;
        let t = h1.forward(g, p, features);
        let t = h2.forward(g, p, t);
        g.add(t, input)
    }

    /// Returns `(F(x), φ(F(x)) + x)`.
    pub fn forward_graph(&self, g: &mut Graph, p: &Bound, x: Var) -> (Var, Var) {
        let f = self.features_graph(g, p, x);
        let out = self.head_graph(g, p, f, x);
        (f, out)
    }

    fn frozen_pass<T>(&self, f: impl FnOnce(&mut Graph, &Bound) -> T) -> Result<T> {
        self.check_finite()?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        Ok(f(&mut g, &p))
    }

    pub fn extract_features(&self, img: &Image) -> Result<FeatureMap> {
        self.frozen_pass(|g, p| {
            let x = g.constant(img.to_tensor());
            let f = self.features_graph(g, p, x);
            g.value(f).clone()
        })
        .and_then(FeatureMap::new)
    }

    /// Head applied to given features, plus the residual `input`; unclamped.
    pub fn apply_head(&self, features: &FeatureMap, input: &Image) -> Result<Tensor> {
        if features.channels() != self.config.base_channels
            || (features.height(), features.width()) != input.dims()
        {
            return Err(Error::invalid("features do not match model width or image size"));
        }
        self.frozen_pass(|g, p| {
            let f = g.constant(features.tensor().clone());
            let x = g.constant(input.to_tensor());
            let out = self.head_graph(g, p, f, x);
            g.value(out).clone()
        })
    }

    /// Unclamped restoration `[3, H, W]`, as used inside the losses.
    pub fn restore_raw(&self, img: &Image) -> Result<Tensor> {
        self.frozen_pass(|g, p| {
            let x = g.constant(img.to_tensor());
            let (_, out) = self.forward_graph(g, p, x);
            g.value(out).clone()
        })
    }

    /// Restored image clamped to `[0, 1]`, as used for metrics and PNG output.
    pub fn restore(&self, img: &Image) -> Result<Image> {
        Image::from_tensor_clamped(&self.restore_raw(img)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_image(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, |_, _, _| rng.random_range(0.0..1.0)).unwrap()
    }

    /// Gives the zero-initialized head some weight so outputs depend on every layer.
    fn perturbed(seed: u64) -> Backbone {
        let mut m = Backbone::new(BackboneConfig::desk(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for i in 0..m.params().len() {
            for v in m.params_mut().get_mut(i).data_mut() {
                *v += rng.random_range(-0.05..0.05);
            }
        }
        m
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Backbone::new(BackboneConfig::desk(), 7).unwrap();
        let b = Backbone::new(BackboneConfig::desk(), 7).unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = Backbone::new(BackboneConfig::desk(), 8).unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn desk_parameter_count_from_architecture() {
        let m = Backbone::new(BackboneConfig::desk(), 0).unwrap();
        // Count by hand from the layer list: C = 16, reduced width 2, 2 groups × 2 blocks.
        let c = 16usize;
        let r = 2usize;
        let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k + cout;
        let attention = |cin: usize, out: usize| conv(cin, r, 1) + conv(r, out, 1);
        let block = 2 * conv(c, c, 3) + attention(c, c) + attention(c, 1);
        let group = 2 * block + conv(c, c, 3);
        let expected = conv(3, c, 3)
            + 2 * group
            + attention(2 * c, 2 * c)
            + attention(c, 1)
            + conv(c, c, 3)
            + conv(c, 3, 3);
        assert_eq!(m.params().numel(), expected);
        assert!(expected < 100_000, "{expected}");
    }

    #[test]
    fn paper_scale_features_have_192_channels() {
        let m = Backbone::new(BackboneConfig::paper(), 0).unwrap();
        let f = m.extract_features(&random_image(1, 8, 8)).unwrap();
        assert_eq!(f.channels(), 192);
    }

    #[test]
    fn shapes_are_preserved() {
        let m = perturbed(1);
        let img = random_image(2, 10, 13);
        let f = m.extract_features(&img).unwrap();
        assert_eq!((f.height(), f.width(), f.channels()), (10, 13, 16));
        let out = m.restore(&img).unwrap();
        assert_eq!(out.dims(), img.dims());
    }

    #[test]
    fn restore_is_head_of_features() {
        let m = perturbed(3);
        let img = random_image(4, 12, 12);
        let f = m.extract_features(&img).unwrap();
        let composed = m.apply_head(&f, &img).unwrap();
        let direct = m.restore_raw(&img).unwrap();
        assert_eq!(composed, direct);
    }

    #[test]
    fn fresh_model_restores_identity() {
        let m = Backbone::new(BackboneConfig::desk(), 5).unwrap();
        let img = random_image(6, 9, 11);
        assert_eq!(m.restore(&img).unwrap(), img);
    }

    #[test]
    fn forward_is_deterministic() {
        let m = perturbed(8);
        let img = random_image(9, 8, 8);
        assert_eq!(m.restore_raw(&img).unwrap(), m.restore_raw(&img).unwrap());
    }

    #[test]
    fn clone_is_deep() {
        let mut m = perturbed(10);
        let img = random_image(11, 8, 8);
        let clone = m.clone();
        assert_eq!(clone.restore_raw(&img).unwrap(), m.restore_raw(&img).unwrap());
        m.params_mut().get_mut(0).data_mut()[0] += 1.0;
        assert_ne!(clone.hash(), m.hash());
        assert_eq!(clone.clone().params(), clone.params());
    }

    #[test]
    fn non_finite_parameters_are_reported() {
        let mut m = perturbed(12);
        m.params_mut().get_mut(3).data_mut()[0] = f64::NAN;
        let err = m.restore(&random_image(1, 8, 8)).unwrap_err();
        assert_eq!(err.code(), "corrupted-model");
    }

    #[test]
    fn features_finite_for_random_images() {
        let m = perturbed(13);
        for s in 0..50 {
            let f = m.extract_features(&random_image(100 + s, 8, 8)).unwrap();
            assert!(f.tensor().is_finite());
        }
    }

    #[test]
    fn pixel_gradients_match_finite_differences() {
        let m = perturbed(14);
        let img = random_image(15, 8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let (py, px, pc) = (3, 5, 1);
        let pixel = |model: &Backbone| model.restore_raw(&img).unwrap().data()[(pc * 8 + py) * 8 + px];

        let mut g = Graph::new();
        let p = m.params().bind(&mut g, true);
        let x = g.constant(img.to_tensor());
        let (_, out) = m.forward_graph(&mut g, &p, x);
        let flat = g.reshape(out, &[1, 192]);
        let mut sel = Tensor::zeros(&[192, 1]);
        sel.data_mut()[(pc * 8 + py) * 8 + px] = 1.0;
        let sel = g.constant(sel);
        let picked = g.matmul(flat, sel, false, false);
        let picked = g.reshape(picked, &[1]);
        let grads = p.grads(&g.backward(picked), m.params());

        let eps = 1e-6;
        let mut checked = 0;
        while checked < 10 {
            let pi = rng.random_range(0..m.params().len());
            let ei = rng.random_range(0..m.params().get(pi).numel());
            let mut plus = m.clone();
            plus.params_mut().get_mut(pi).data_mut()[ei] += eps;
            let mut minus = m.clone();
            minus.params_mut().get_mut(pi).data_mut()[ei] -= eps;
            let numeric = (pixel(&plus) - pixel(&minus)) / (2.0 * eps);
            let analytic = grads[pi][ei];
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(
                (analytic - numeric).abs() / denom <= 1e-4,
                "param {pi}[{ei}]: {analytic} vs {numeric}"
            );
            checked += 1;
        }
    }
}
