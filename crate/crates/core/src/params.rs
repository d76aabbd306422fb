//! Named parameter collections, initializers and convolution layer handles.

use std::ops::Index;

use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

/// Ordered, named parameter collection. Order is part of the checkpoint format.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        self.params.push(Param {
            name: name.into(),
            tensor,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn get(&self, idx: usize) -> &Tensor {
        &self.params[idx].tensor
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.params[idx].tensor
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.tensor.is_finite())
    }

    /// SHA-256 over names, shapes and the exact bit patterns of every value.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for d in p.tensor.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.tensor.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Rounds every value to the nearest 32-bit real, the checkpoint payload precision.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            p.tensor
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = *v as f32 as f64);
        }
    }

    /// Registers every parameter as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|p| {
                    if trainable {
                        g.param(p.tensor.clone())
                    } else {
                        g.constant(p.tensor.clone())
                    }
                })
                .collect(),
        )
    }

    /// Same names and shapes, in the same order.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.tensor.shape() == b.tensor.shape())
    }
}

/// Graph variables of a bound [`ParamSet`], indexed like the set.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Per-parameter gradient buffers; parameters the loss did not reach get zeros.
    pub fn grads(&self, grads: &Gradients, set: &ParamSet) -> Vec<Vec<f64>> {
        self.0
            .iter()
            .enumerate()
            .map(|(i, v)| {
                grads
                    .wrt(*v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; set.get(i).numel()])
            })
            .collect()
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Index<usize> for Bound {
    type Output = Var;

    fn index(&self, idx: usize) -> &Var {
        &self.0[idx]
    }
}

/// Adds `src` into `dst` elementwise, buffer by buffer.
pub fn add_grads(dst: &mut [Vec<f64>], src: &[Vec<f64>]) {
    for (d, s) in dst.iter_mut().zip(src) {
        d.iter_mut().zip(s).for_each(|(a, b)| *a += b);
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Uniform in ±sqrt(6 / fan_in) scaled by `gain`.
    Kaiming(f64),
    /// Rows of the flattened kernel orthonormal, scaled by `gain`.
    Orthogonal(f64),
    Zeros,
}

pub fn init_tensor<R: Rng>(rng: &mut R, shape: &[usize], init: Init) -> Tensor {
    let rows = shape[0];
    let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
    let data = match init {
        Init::Zeros => vec![0.0; rows * fan_in],
        Init::Kaiming(gain) => {
            let bound = gain * (6.0 / fan_in as f64).sqrt();
            (0..rows * fan_in)
                .map(|_| rng.random_range(-bound..bound))
                .collect()
        }
        Init::Orthogonal(gain) => orthogonal(rng, rows, fan_in, gain),
    };
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

/// Gaussian matrix whose rows are Gram-Schmidt orthonormalized (when rows ≤ cols;
/// otherwise the columns are), times `gain`.
fn orthogonal<R: Rng>(rng: &mut R, rows: usize, cols: usize, gain: f64) -> Vec<f64> {
    let (r, c, transpose) = if rows <= cols {
        (rows, cols, false)
    } else {
        (cols, rows, true)
    };
    let mut m: Vec<Vec<f64>> = (0..r)
        .map(|_| (0..c).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    for i in 0..r {
        for j in 0..i {
            let dot: f64 = m[i].iter().zip(&m[j]).map(|(a, b)| a * b).sum();
            let (head, tail) = m.split_at_mut(i);
            tail[0].iter_mut().zip(&head[j]).for_each(|(a, b)| *a -= dot * b);
        }
        let n = m[i].iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        m[i].iter_mut().for_each(|v| *v /= n);
    }
    let mut out = vec![0.0; rows * cols];
    for i in 0..r {
        for j in 0..c {
            let v = gain * m[i][j];
            if transpose {
                out[j * cols + i] = v;
            } else {
                out[i * cols + j] = v;
            }
        }
    }
    out
}

/// Handle to a convolution's parameters inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv {
    pub weight: usize,
    pub bias: Option<usize>,
    pub groups: usize,
}

pub struct ConvSpec<'a> {
    pub name: &'a str,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub groups: usize,
    pub bias: bool,
    pub init: Init,
}

impl Conv {
    pub fn create<R: Rng>(set: &mut ParamSet, rng: &mut R, spec: ConvSpec<'_>) -> Self {
        let weight = set.push(
            format!("{}.weight", spec.name),
            init_tensor(
                rng,
                &[spec.cout, spec.cin / spec.groups, spec.kernel, spec.kernel],
                spec.init,
            ),
        );
        let bias = spec
            .bias
            .then(|| set.push(format!("{}.bias", spec.name), Tensor::zeros(&[spec.cout])));
        Self {
            weight,
            bias,
            groups: spec.groups,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.conv2d(x, p[self.weight], self.bias.map(|b| p[b]), self.groups)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn orthogonal_rows_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = init_tensor(&mut rng, &[8, 3, 3, 3], Init::Orthogonal(1.0));
        let d = t.data();
        for i in 0..8 {
            for j in 0..8 {
                let dot: f64 = (0..27).map(|k| d[i * 27 + k] * d[j * 27 + k]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn hash_tracks_values_exactly() {
        let mut a = ParamSet::new();
        a.push("w", Tensor::filled(&[2], 0.5));
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.get_mut(0).data_mut()[1] += 1e-17;
        assert_eq!(a.hash(), b.hash(), "1e-17 is below f64 resolution at 0.5");
        b.get_mut(0).data_mut()[1] = 0.5000000001;
        assert_ne!(a.hash(), b.hash());
    }
}
