//! PSNR, SSIM and their aggregation.
//!
//! PSNR is `10·log10(1 / MSE)` for unit-range images, capped at 100 dB. SSIM is
//! the single-scale index with an 11×11 Gaussian window (σ = 1.5), `K1 = 0.01`,
//! `K2 = 0.03`, dynamic range 1, averaged over all fully covered windows and
//! then over the three channels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Image;

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn same_dims(a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::invalid(format!(
            "image sizes differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Mean squared error, summed with Neumaier compensation so that a constant
/// difference gives back exactly its square.
pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    same_dims(a, b)?;
    let n = a.pixels().len() as f64;
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for (x, y) in a.pixels().iter().zip(b.pixels()) {
        let v = (x - y) * (x - y);
        let t = sum + v;
        comp += if sum.abs() >= v { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    Ok((sum + comp) / n)
}

pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m < 1e-10 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((-20.0 * m.sqrt().log10()).min(PSNR_CAP_DB))
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - r;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// Valid-mode separable filtering of an `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let k = SSIM_WINDOW;
    let ow = w - k + 1;
    let oh = h - k + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| taps[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| taps[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_dims(a, b)?;
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let taps = gaussian_taps();
    let mut total = 0.0;
    for c in 0..3 {
        let pa: Vec<f64> = (0..h * w).map(|i| a.pixels()[i * 3 + c]).collect();
        let pb: Vec<f64> = (0..h * w).map(|i| b.pixels()[i * 3 + c]).collect();
        let aa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();
        let [mu_a, mu_b, e_aa, e_bb, e_ab] =
            [&pa, &pb, &aa, &bb, &ab].map(|p| filter_valid(p, h, w, &taps));
        let n = mu_a.len();
        let mut sum = 0.0;
        for i in 0..n {
            sum += ssim_term(mu_a[i], mu_b[i], e_aa[i], e_bb[i], e_ab[i]);
        }
        total += sum / n as f64;
    }
    Ok(total / 3.0)
}

/// SSIM of one window from its weighted first and second moments. Written so
/// that swapping `a` and `b` gives bit-identical results.
pub fn ssim_term(mu_a: f64, mu_b: f64, e_aa: f64, e_bb: f64, e_ab: f64) -> f64 {
    let var_a = e_aa - mu_a * mu_a;
    let var_b = e_bb - mu_b * mu_b;
    let cov = e_ab - mu_a * mu_b;
    let num = (2.0 * mu_a * mu_b + C1) * (2.0 * cov + C2);
    let den = (mu_a * mu_a + mu_b * mu_b + C1) * (var_a + var_b + C2);
    num / den
}

/// Quality of one restored test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub dataset: String,
    pub version_tag: usize,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Unweighted means over `rows`.
pub fn aggregate(rows: &[MetricRow]) -> Result<Summary> {
    if rows.is_empty() {
        return Err(Error::invalid("nothing to aggregate"));
    }
    let n = rows.len() as f64;
    Ok(Summary {
        psnr_db: rows.iter().map(|r| r.psnr_db).sum::<f64>() / n,
        ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
    })
}

/// Mean PSNR and SSIM of `restored[i]` against `clean[i]`.
pub fn score_pairs(restored: &[Image], clean: &[Image]) -> Result<Summary> {
    if restored.is_empty() || restored.len() != clean.len() {
        return Err(Error::invalid("need equally many restored and clean images"));
    }
    let mut p = 0.0;
    let mut s = 0.0;
    for (r, c) in restored.iter().zip(clean) {
        p += psnr(r, c)?;
        s += ssim(r, c)?;
    }
    let n = restored.len() as f64;
    Ok(Summary {
        psnr_db: p / n,
        ssim: s / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn image(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, |_, _, _| rng.random_range(0.0..1.0)).unwrap()
    }

    #[test]
    fn psnr_closed_forms() {
        let a = image(1, 8, 8);
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);
        let c = Image::constant(8, 8, 0.1).unwrap();
        let z = Image::constant(8, 8, 0.0).unwrap();
        assert_eq!(psnr(&c, &z).unwrap(), 20.0);
        assert_eq!(psnr(&a, &image(2, 8, 9)).unwrap_err().code(), "invalid-argument");
    }

    #[test]
    fn psnr_matches_brute_force() {
        for s in 0..50 {
            let (a, b) = (image(s, 8, 8), image(100 + s, 8, 8));
            let mut acc = 0.0;
            for y in 0..8 {
                for x in 0..8 {
                    for c in 0..3 {
                        acc += (a.get(y, x, c) - b.get(y, x, c)).powi(2);
                    }
                }
            }
            let expect = 10.0 * (1.0 / (acc / 192.0)).log10();
            assert!((psnr(&a, &b).unwrap() - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn ssim_closed_forms() {
        let a = image(3, 16, 16);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let zero = Image::constant(12, 12, 0.0).unwrap();
        let one = Image::constant(12, 12, 1.0).unwrap();
        let v = ssim(&zero, &one).unwrap();
        assert!((v - 1e-4 / (1.0 + 1e-4)).abs() < 1e-10, "{v}");
        assert_eq!(ssim(&image(1, 10, 12), &image(2, 10, 12)).unwrap_err().code(), "invalid-argument");
    }

    /// Direct 2-D window sums, no separability.
    fn brute_ssim(a: &Image, b: &Image) -> f64 {
        let (h, w) = a.dims();
        let t = gaussian_taps();
        let mut total = 0.0;
        for c in 0..3 {
            let mut sum = 0.0;
            let mut count = 0;
            for y in 0..=h - 11 {
                for x in 0..=w - 11 {
                    let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let wt = t[i] * t[j];
                            let (va, vb) = (a.get(y + i, x + j, c), b.get(y + i, x + j, c));
                            ma += wt * va;
                            mb += wt * vb;
                            saa += wt * va * va;
                            sbb += wt * vb * vb;
                            sab += wt * va * vb;
                        }
                    }
                    let (c1, c2) = (1e-4, 9e-4);
                    let va = saa - ma * ma;
                    let vb = sbb - mb * mb;
                    let cov = sab - ma * mb;
                    sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                        / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    count += 1;
                }
            }
            total += sum / count as f64;
        }
        total / 3.0
    }

    #[test]
    fn ssim_matches_brute_force() {
        for s in 0..20 {
            let a = image(s, 14, 13);
            let b = Image::from_fn(14, 13, |y, x, c| {
                (0.7 * a.get(y, x, c) + 0.3 * ((y * x + c) as f64 / 200.0)).min(1.0)
            })
            .unwrap();
            let got = ssim(&a, &b).unwrap();
            assert!((got - brute_ssim(&a, &b)).abs() < 1e-6);
        }
    }

    #[test]
    fn aggregate_means() {
        let row = |p, s| MetricRow {
            dataset: "x".into(),
            version_tag: 1,
            psnr_db: p,
            ssim: s,
        };
        assert_eq!(aggregate(&[row(20.0, 0.5), row(30.0, 0.7)]).unwrap().psnr_db, 25.0);
        assert_eq!(aggregate(&[row(21.5, 0.9)]).unwrap(), Summary { psnr_db: 21.5, ssim: 0.9 });
        assert_eq!(aggregate(&[]).unwrap_err().code(), "invalid-argument");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn ssim_is_symmetric_and_reflexive(s in any::<u64>()) {
            let a = image(s, 12, 12);
            let b = image(s.wrapping_add(1), 12, 12);
            prop_assert_eq!(ssim(&a, &a).unwrap(), 1.0);
            prop_assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
            let v = ssim(&a, &b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&v));
        }

        #[test]
        fn psnr_decreases_with_nested_perturbations(s in any::<u64>()) {
            let a = image(s, 8, 8);
            let mut rng = ChaCha8Rng::seed_from_u64(s ^ 7);
            let noise: Vec<f64> = (0..192).map(|_| rng.random_range(0.01..0.1)).collect();
            let mut last = f64::INFINITY;
            for k in 1..=5 {
                let scale = k as f64 / 5.0;
                let b = Image::from_fn(8, 8, |y, x, c| {
                    let v = a.get(y, x, c);
                    let d = scale * noise[(y * 8 + x) * 3 + c];
                    if v > 0.5 { v - d } else { v + d }
                }).unwrap();
                let p = psnr(&a, &b).unwrap();
                prop_assert!(p < last);
                last = p;
            }
        }
    }
}
