//! Training objectives.
//!
//! Every distance is a mean absolute difference. The contrastive term for one
//! pyramid stage is `w · softplus((d⁺ − d⁻) / τ)`, the stable form of
//! `−w · log(e^(−d⁺/τ) / (e^(−d⁺/τ) + e^(−d⁻/τ)))`.
//!
//! The `*_graph` functions build terms on a caller's graph so the trainer can
//! share forward passes; the plain functions evaluate one loss value.

use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::imaging::{Image, SamplePair};
use crate::params::Bound;
use crate::perceptual::{PerceptualPyramid, STAGES};
use crate::projector::PrincipalProjector;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub tau: f64,
    pub weights: [f64; STAGES],
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            weights: [1.0 / 32.0, 1.0 / 16.0, 1.0 / 8.0, 1.0 / 4.0, 1.0],
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::invalid("contrastive tau must be positive"));
        }
        if !self.weights.iter().all(|w| w.is_finite() && *w > 0.0) {
            return Err(Error::invalid("contrastive weights must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub beta1: f64,
    pub beta2: f64,
    pub alpha: f64,
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta1: 0.8,
            beta2: 0.2,
            alpha: 1.0,
            lambda: 0.3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("alpha", self.alpha),
            ("lambda", self.lambda),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("loss weight {name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Shared frozen pieces of the contrastive term.
pub struct Pyramid<'a> {
    pub model: &'a PerceptualPyramid,
    pub params: &'a Bound,
    pub cfg: &'a ContrastiveConfig,
}

pub fn contrastive_graph(g: &mut Graph, pyr: &Pyramid<'_>, anchor: Var, positive: Var, negative: Var) -> Var {
    let ea = pyr.model.stages_graph(g, pyr.params, anchor);
    let ep = pyr.model.stages_graph(g, pyr.params, positive);
    let en = pyr.model.stages_graph(g, pyr.params, negative);
    let mut total: Option<Var> = None;
    for l in 0..STAGES {
        let dp = g.mean_abs_diff(ea[l], ep[l]);
        let dn = g.mean_abs_diff(ea[l], en[l]);
        let diff = g.sub(dp, dn);
        let z = g.scale(diff, 1.0 / pyr.cfg.tau);
        let sp = g.softplus(z);
        let term = g.scale(sp, pyr.cfg.weights[l]);
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term),
        });
    }
    total.expect("at least one stage")
}

/// `|restored − clean| + β₁·L_CT(restored, clean, degraded)`.
pub fn single_weather_graph(
    g: &mut Graph,
    pyr: &Pyramid<'_>,
    w: &LossWeights,
    restored: Var,
    clean: Var,
    degraded: Var,
) -> Var {
    let l1 = g.mean_abs_diff(restored, clean);
    if w.beta1 == 0.0 {
        return l1;
    }
    let ct = contrastive_graph(g, pyr, restored, clean, degraded);
    let ct = g.scale(ct, w.beta1);
    g.add(l1, ct)
}

/// `|old − new| + β₂·L_CT(new, old, memory)`; `old` must carry no gradient.
pub fn knowledge_replay_graph(
    g: &mut Graph,
    pyr: &Pyramid<'_>,
    w: &LossWeights,
    new_out: Var,
    old_out: Var,
    memory: Var,
) -> Var {
    debug_assert!(!g.requires_grad(old_out));
    let l1 = g.mean_abs_diff(old_out, new_out);
    if w.beta2 == 0.0 {
        return l1;
    }
    let ct = contrastive_graph(g, pyr, new_out, old_out, memory);
    let ct = g.scale(ct, w.beta2);
    g.add(l1, ct)
}

/// `|ψ(old_features) − ψ(new_features)|` through a frozen projector.
pub fn principal_kd_graph(
    g: &mut Graph,
    projector: &PrincipalProjector,
    proj_params: &Bound,
    new_features: Var,
    old_features: Var,
) -> Var {
    let zn = projector.encode_graph(g, proj_params, new_features);
    let zo = projector.encode_graph(g, proj_params, old_features);
    g.mean_abs_diff(zo, zn)
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!(
            "shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Mean absolute difference of two equally shaped tensors.
pub fn l1_loss(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    let n = a.numel() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n)
}

/// Contrastive regularization for `[3, H, W]` tensors (images or raw restorations).
pub fn contrastive_loss(
    anchor: &Tensor,
    positive: &Tensor,
    negative: &Tensor,
    pyramid: &PerceptualPyramid,
    cfg: &ContrastiveConfig,
) -> Result<f64> {
    same_shape(anchor, positive)?;
    same_shape(anchor, negative)?;
    if anchor.shape().len() != 3 || anchor.shape()[0] != 3 {
        return Err(Error::invalid("contrastive inputs must be [3, H, W]"));
    }
    let mut g = Graph::new();
    let params = pyramid.bind(&mut g);
    let pyr = Pyramid {
        model: pyramid,
        params: &params,
        cfg,
    };
    let a = g.constant(anchor.clone());
    let p = g.constant(positive.clone());
    let n = g.constant(negative.clone());
    let out = contrastive_graph(&mut g, &pyr, a, p, n);
    Ok(g.scalar(out))
}

pub fn single_weather_loss(
    model: &Backbone,
    sample: &SamplePair,
    pyramid: &PerceptualPyramid,
    w: &LossWeights,
    cfg: &ContrastiveConfig,
) -> Result<f64> {
    let restored = model.restore_raw(&sample.degraded)?;
    let l1 = l1_loss(&restored, &sample.clean.to_tensor())?;
    if w.beta1 == 0.0 {
        return Ok(l1);
    }
    let ct = contrastive_loss(
        &restored,
        &sample.clean.to_tensor(),
        &sample.degraded.to_tensor(),
        pyramid,
        cfg,
    )?;
    Ok(l1 + w.beta1 * ct)
}

fn check_compatible(new: &Backbone, old: &Backbone) -> Result<()> {
    if new.config() != old.config() {
        return Err(Error::invalid("new and old models have different configs"));
    }
    Ok(())
}

pub fn knowledge_replay_loss(
    new_model: &Backbone,
    old_model: &Backbone,
    memory: &Image,
    pyramid: &PerceptualPyramid,
    w: &LossWeights,
    cfg: &ContrastiveConfig,
) -> Result<f64> {
    check_compatible(new_model, old_model)?;
    let new_out = new_model.restore_raw(memory)?;
    let old_out = old_model.restore_raw(memory)?;
    let l1 = l1_loss(&old_out, &new_out)?;
    if w.beta2 == 0.0 {
        return Ok(l1);
    }
    let ct = contrastive_loss(&new_out, &old_out, &memory.to_tensor(), pyramid, cfg)?;
    Ok(l1 + w.beta2 * ct)
}

pub fn principal_kd_loss(
    new_model: &Backbone,
    old_model: &Backbone,
    projector: &PrincipalProjector,
    memory: &Image,
) -> Result<f64> {
    check_compatible(new_model, old_model)?;
    if projector.config().in_channels != new_model.config().base_channels {
        return Err(Error::invalid("projector input width differs from the extractor"));
    }
    let zn = projector.mhta_encode(&new_model.extract_features(memory)?)?;
    let zo = projector.mhta_encode(&old_model.extract_features(memory)?)?;
    l1_loss(zo.tensor(), zn.tensor())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub l_sw: f64,
    pub l_kd: f64,
    pub l_pkd: f64,
}

/// `L_SW + α·L_KD + λ·L_PKD`.
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("l_sw", parts.l_sw), ("l_kd", parts.l_kd), ("l_pkd", parts.l_pkd)] {
        if !v.is_finite() {
            return Err(Error::NonFinite { part: name.into() });
        }
    }
    Ok(parts.l_sw + w.alpha * parts.l_kd + w.lambda * parts.l_pkd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::projector::ProjectorConfig;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    fn image(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, |_, _, _| rng.random_range(0.0..1.0)).unwrap()
    }

    fn perturbed(seed: u64, scale: f64) -> Backbone {
        let mut m = Backbone::new(BackboneConfig::desk(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        for i in 0..m.params().len() {
            for v in m.params_mut().get_mut(i).data_mut() {
                *v += rng.random_range(-scale..scale);
            }
        }
        m
    }

    fn weight_sum() -> f64 {
        ContrastiveConfig::default().weights.iter().sum()
    }

    #[test]
    fn l1_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut random = || Tensor::new(vec![3, 4, 4], (0..48).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let a = random();
        assert_eq!(l1_loss(&a, &a).unwrap(), 0.0);
        let c3 = Image::constant(8, 8, 0.3).unwrap().to_tensor();
        let c5 = Image::constant(8, 8, 0.5).unwrap().to_tensor();
        assert!((l1_loss(&c3, &c5).unwrap() - 0.2).abs() < 1e-15);
        let b = random();
        let mut brute = 0.0;
        for i in 0..a.numel() {
            brute += (a.data()[i] - b.data()[i]).abs();
        }
        assert!((l1_loss(&a, &b).unwrap() - brute / 48.0).abs() < 1e-15);
        let wrong = Tensor::zeros(&[3, 4, 5]);
        assert_eq!(l1_loss(&a, &wrong).unwrap_err().code(), "invalid-argument");
    }

    #[test]
    fn contrastive_symmetric_case() {
        assert_eq!(weight_sum(), 1.46875);
        let pyr = PerceptualPyramid::default();
        let cfg = ContrastiveConfig::default();
        for s in 0..5 {
            let a = image(s, 12, 12).to_tensor();
            let v = contrastive_loss(&a, &a, &a, &pyr, &cfg).unwrap();
            assert!((v - 1.46875 * LN2).abs() < 1e-9);
        }
    }

    #[test]
    fn contrastive_closed_form_with_measured_negative_distance() {
        let pyr = PerceptualPyramid::default();
        let cfg = ContrastiveConfig::default();
        let a = image(3, 16, 16);
        let n = image(4, 16, 16);
        let ea = pyr.extract_pyramid(&a).unwrap();
        let en = pyr.extract_pyramid(&n).unwrap();
        let expect: f64 = (0..STAGES)
            .map(|l| {
                let d = l1_loss(ea[l].tensor(), en[l].tensor()).unwrap();
                cfg.weights[l] * (1.0 + (-d / cfg.tau).exp()).ln()
            })
            .sum();
        let got = contrastive_loss(&a.to_tensor(), &a.to_tensor(), &n.to_tensor(), &pyr, &cfg).unwrap();
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn contrastive_decreases_as_negative_moves_away() {
        let pyr = PerceptualPyramid::default();
        let cfg = ContrastiveConfig::default();
        let anchor = Image::constant(16, 16, 0.4).unwrap();
        let positive = image(5, 16, 16);
        let far = image(6, 16, 16);
        let mut last = f64::INFINITY;
        for k in 0..10 {
            let t = k as f64 / 9.0;
            let neg = Image::from_fn(16, 16, |y, x, c| {
                (1.0 - t) * anchor.get(y, x, c) + t * far.get(y, x, c)
            })
            .unwrap();
            let v = contrastive_loss(&anchor.to_tensor(), &positive.to_tensor(), &neg.to_tensor(), &pyr, &cfg)
                .unwrap();
            assert!(v < last, "step {k}: {v} >= {last}");
            assert!(v > 0.0);
            last = v;
        }
    }

    #[test]
    fn contrastive_anchor_gradient_matches_finite_differences() {
        let pyr = PerceptualPyramid::default();
        let cfg = ContrastiveConfig::default();
        let (a, p, n) = (image(7, 12, 12).to_tensor(), image(8, 12, 12).to_tensor(), image(9, 12, 12).to_tensor());
        let mut g = Graph::new();
        let pp = pyr.bind(&mut g);
        let py = Pyramid { model: &pyr, params: &pp, cfg: &cfg };
        let av = g.param(a.clone());
        let (pv, nv) = (g.constant(p.clone()), g.constant(n.clone()));
        let out = contrastive_graph(&mut g, &py, av, pv, nv);
        let grad = g.backward(out).wrt(av).unwrap().to_vec();
        let eps = 1e-6;
        for i in [0usize, 50, 143, 280, 431] {
            let mut plus = a.clone();
            plus.data_mut()[i] += eps;
            let mut minus = a.clone();
            minus.data_mut()[i] -= eps;
            let numeric = (contrastive_loss(&plus, &p, &n, &pyr, &cfg).unwrap()
                - contrastive_loss(&minus, &p, &n, &pyr, &cfg).unwrap())
                / (2.0 * eps);
            let denom = numeric.abs().max(grad[i].abs()).max(1e-8);
            assert!((numeric - grad[i]).abs() / denom <= 1e-4, "{i}: {numeric} vs {}", grad[i]);
        }
    }

    #[test]
    fn single_weather_oracles() {
        let pyr = PerceptualPyramid::default();
        let cfg = ContrastiveConfig::default();
        let identity = Backbone::new(BackboneConfig::desk(), 0).unwrap();
        let img = image(10, 12, 12);
        let degenerate = SamplePair::new(img.clone(), img.clone(), 1).unwrap();
        let v = single_weather_loss(&identity, &degenerate, &pyr, &LossWeights::default(), &cfg).unwrap();
        assert!((v - 0.8 * 1.46875 * LN2).abs() < 1e-9);
        assert!((v - 0.81444).abs() < 1e-5);

        let m = perturbed(11, 0.05);
        let pair = SamplePair::new(image(12, 12, 12), image(13, 12, 12), 1).unwrap();
        let w0 = LossWeights { beta1: 0.0, ..Default::default() };
        let restored = m.restore_raw(&pair.degraded).unwrap();
        let l1 = l1_loss(&restored, &pair.clean.to_tensor()).unwrap();
        assert_eq!(single_weather_loss(&m, &pair, &pyr, &w0, &cfg).unwrap(), l1);
        let ct = contrastive_loss(&restored, &pair.clean.to_tensor(), &pair.degraded.to_tensor(), &pyr, &cfg).unwrap();
        let full = single_weather_loss(&m, &pair, &pyr, &LossWeights::default(), &cfg).unwrap();
        assert!((full - (l1 + 0.8 * ct)).abs() < 1e-12);
    }

    #[test]
    fn knowledge_replay_oracles() {
        let pyr = PerceptualPyramid::default();
        let cfg = ContrastiveConfig::default();
        let w = LossWeights::default();
        let identity = Backbone::new(BackboneConfig::desk(), 0).unwrap();
        let mem = image(14, 12, 12);
        let v = knowledge_replay_loss(&identity, &identity, &mem, &pyr, &w, &cfg).unwrap();
        assert!((v - 0.2 * 1.46875 * LN2).abs() < 1e-9);
        assert!((v - 0.20361).abs() < 1e-5);

        let old = perturbed(15, 0.05);
        let old_out = old.restore_raw(&mem).unwrap();
        let eo = {
            let mut g = Graph::new();
            let pp = pyr.bind(&mut g);
            let x = g.constant(old_out.clone());
            let stages = pyr.stages_graph(&mut g, &pp, x);
            stages.iter().map(|s| g.value(*s).clone()).collect::<Vec<_>>()
        };
        let em = pyr.extract_pyramid(&mem).unwrap();
        let expect: f64 = w.beta2
            * (0..STAGES)
                .map(|l| {
                    let d = l1_loss(&eo[l], em[l].tensor()).unwrap();
                    cfg.weights[l] * (1.0 + (-d / cfg.tau).exp()).ln()
                })
                .sum::<f64>();
        let got = knowledge_replay_loss(&old, &old, &mem, &pyr, &w, &cfg).unwrap();
        assert!((got - expect).abs() < 1e-12);

        let other = Backbone::new(BackboneConfig { base_channels: 8, ..BackboneConfig::desk() }, 0).unwrap();
        assert_eq!(
            knowledge_replay_loss(&other, &old, &mem, &pyr, &w, &cfg).unwrap_err().code(),
            "invalid-argument"
        );
    }

    #[test]
    fn principal_kd_oracles() {
        let proj = PrincipalProjector::new(ProjectorConfig::new(16, 4), 1).unwrap();
        let old = perturbed(16, 0.05);
        let mem = image(17, 10, 10);
        assert_eq!(principal_kd_loss(&old, &old.clone(), &proj, &mem).unwrap(), 0.0);
        let mut prev = 0.0;
        for k in 1..=5 {
            let mut new = old.clone();
            new.params_mut().get_mut(2).data_mut()[0] += 1e-3 * k as f64;
            let v = principal_kd_loss(&new, &old, &proj, &mem).unwrap();
            assert!(v > prev, "step {k}: {v} <= {prev}");
            prev = v;
        }
        let narrow = PrincipalProjector::new(ProjectorConfig::new(8, 4), 1).unwrap();
        assert_eq!(principal_kd_loss(&old, &old, &narrow, &mem).unwrap_err().code(), "invalid-argument");
    }

    /// Gradient of the full objective w.r.t. the new model, checked against central
    /// differences of the value-level functions.
    #[test]
    fn total_gradient_matches_finite_differences() {
        let pyr = PerceptualPyramid::default();
        let cfg = ContrastiveConfig::default();
        let w = LossWeights::default();
        let proj = PrincipalProjector::new(ProjectorConfig::new(16, 4), 2).unwrap();
        let old = perturbed(18, 0.05);
        let new = perturbed(19, 0.05);
        let pair = SamplePair::new(image(20, 8, 8), image(21, 8, 8), 2).unwrap();
        let mem = image(22, 8, 8);

        let value = |m: &Backbone| {
            let parts = LossParts {
                l_sw: single_weather_loss(m, &pair, &pyr, &w, &cfg).unwrap(),
                l_kd: knowledge_replay_loss(m, &old, &mem, &pyr, &w, &cfg).unwrap(),
                l_pkd: principal_kd_loss(m, &old, &proj, &mem).unwrap(),
            };
            total_loss(&parts, &w).unwrap()
        };

        let mut g = Graph::new();
        let np = new.params().bind(&mut g, true);
        let op = old.params().bind(&mut g, false);
        let pp = pyr.bind(&mut g);
        let jp = proj.bind(&mut g);
        let py = Pyramid { model: &pyr, params: &pp, cfg: &cfg };
        let x = g.constant(pair.degraded.to_tensor());
        let y = g.constant(pair.clean.to_tensor());
        let (_, out) = new.forward_graph(&mut g, &np, x);
        let sw = single_weather_graph(&mut g, &py, &w, out, y, x);
        let m = g.constant(mem.to_tensor());
        let (fn_, on) = new.forward_graph(&mut g, &np, m);
        let (fo, oo) = old.forward_graph(&mut g, &op, m);
        let kd = knowledge_replay_graph(&mut g, &py, &w, on, oo, m);
        let pkd = principal_kd_graph(&mut g, &proj, &jp, fn_, fo);
        let kd = g.scale(kd, w.alpha);
        let pkd = g.scale(pkd, w.lambda);
        let t = g.add(sw, kd);
        let total = g.add(t, pkd);
        assert!((g.scalar(total) - value(&new)).abs() < 1e-12);
        let grads = np.grads(&g.backward(total), new.params());

        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let eps = 1e-6;
        for _ in 0..10 {
            let pi = rng.random_range(0..new.params().len());
            let ei = rng.random_range(0..new.params().get(pi).numel());
            let mut plus = new.clone();
            plus.params_mut().get_mut(pi).data_mut()[ei] += eps;
            let mut minus = new.clone();
            minus.params_mut().get_mut(pi).data_mut()[ei] -= eps;
            let numeric = (value(&plus) - value(&minus)) / (2.0 * eps);
            let analytic = grads[pi][ei];
            let denom = numeric.abs().max(analytic.abs()).max(1e-7);
            assert!((numeric - analytic).abs() / denom <= 1e-4, "{pi}[{ei}]: {numeric} vs {analytic}");
        }
    }

    #[test]
    fn total_loss_arithmetic() {
        let w = LossWeights::default();
        let parts = LossParts { l_sw: 2.0, l_kd: 1.0, l_pkd: 0.5 };
        assert_eq!(total_loss(&parts, &w).unwrap(), 3.15);
        let zero = LossWeights { alpha: 0.0, lambda: 0.0, ..w };
        assert_eq!(total_loss(&parts, &zero).unwrap(), 2.0);
        let bad = LossParts { l_kd: f64::NAN, ..parts };
        match total_loss(&bad, &w).unwrap_err() {
            Error::NonFinite { part } => assert_eq!(part, "l_kd"),
            e => panic!("unexpected {e}"),
        }
    }

    proptest! {
        #[test]
        fn total_loss_matches_recomputation(
            a in 0.0f64..10.0, b in 0.0f64..10.0, c in 0.0f64..10.0,
            alpha in 0.0f64..2.0, lambda in 0.0f64..2.0,
        ) {
            let w = LossWeights { alpha, lambda, ..Default::default() };
            let got = total_loss(&LossParts { l_sw: a, l_kd: b, l_pkd: c }, &w).unwrap();
            prop_assert_eq!(got, a + alpha * b + lambda * c);
        }

        #[test]
        fn contrastive_is_positive(s in any::<u64>()) {
            let pyr = PerceptualPyramid::default();
            let t = |k| image(s.wrapping_add(k), 8, 8).to_tensor();
            let v = contrastive_loss(&t(0), &t(1), &t(2), &pyr, &ContrastiveConfig::default()).unwrap();
            prop_assert!(v > 0.0);
        }
    }
}
