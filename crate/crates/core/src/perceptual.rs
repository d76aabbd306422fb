//! Frozen five-stage feature pyramid used by the contrastive terms.
//!
//! Each stage is a bias-free 3×3 convolution with orthonormal rows, a leaky
//! ReLU (slope 0.1) and a 2×2 average pool. Pooling rounds up, so inputs as
//! small as 8×8 still produce five non-empty stages. The weights are drawn from
//! a fixed seed and never trained.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::FeatureMap;
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::imaging::Image;
use crate::params::{Bound, Conv, ConvSpec, Init, ParamSet};

pub const STAGES: usize = 5;
pub const STAGE_CHANNELS: [usize; STAGES] = [8, 16, 32, 32, 32];
pub const DEFAULT_SEED: u64 = 0x005e_ed0f_f00d;
const SLOPE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct PerceptualPyramid {
    seed: u64,
    params: ParamSet,
    convs: Vec<Conv>,
}

impl Default for PerceptualPyramid {
    fn default() -> Self {
        Self::new(DEFAULT_SEED)
    }
}

impl PerceptualPyramid {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut cin = 3;
        let convs = STAGE_CHANNELS
            .iter()
            .enumerate()
            .map(|(i, &cout)| {
                let conv = Conv::create(
                    &mut params,
                    &mut rng,
                    ConvSpec {
                        name: &format!("stage{i}"),
                        cin,
                        cout,
                        kernel: 3,
                        groups: 1,
                        bias: false,
                        init: Init::Orthogonal(1.0),
                    },
                );
                cin = cout;
                conv
            })
            .collect();
        Self {
            seed,
            params,
            convs,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn hash(&self) -> String {
        self.params.hash()
    }

    /// Binds the frozen weights as graph constants.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        self.params.bind(g, false)
    }

    /// All five stage outputs for a `[3, H, W]` variable.
    pub fn stages_graph(&self, g: &mut Graph, p: &Bound, x: Var) -> Vec<Var> {
        let mut h = x;
        self.convs
            .iter()
            .map(|conv| {
                let t = conv.forward(g, p, h);
                let t = g.leaky_relu(t, SLOPE);
                h = g.avg_pool2(t);
                h
            })
            .collect()
    }

    pub fn extract_pyramid(&self, img: &Image) -> Result<Vec<FeatureMap>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g);
        let x = g.constant(img.to_tensor());
        self.stages_graph(&mut g, &p, x)
            .into_iter()
            .map(|v| FeatureMap::new(g.value(v).clone()))
            .collect()
    }

    /// Upper bound on `max|E_l(a) − E_l(b)|` per unit of `max|a − b|`, for stages
    /// `0..=stage`: the product of the largest absolute row sums of the kernels.
    /// Leaky ReLU and average pooling are 1-Lipschitz in the max norm.
    pub fn linf_lipschitz(&self, stage: usize) -> f64 {
        self.convs[..=stage]
            .iter()
            .map(|c| {
                let w = self.params.get(c.weight);
                let row = w.numel() / w.shape()[0];
                w.data()
                    .chunks(row)
                    .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
                    .fold(0.0, f64::max)
            })
            .product()
    }
}
