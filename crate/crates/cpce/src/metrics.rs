//! Full-slice evaluation: PSNR, SSIM, the perceptual metric, the texture
//! metric, and report aggregation.
//!
//! Metric taxonomy (pixel/feature space × content/texture):
//! - PSNR: pixel space, content
//! - SSIM: pixel space, texture/structure
//! - PL:   feature space, content
//! - TML:  feature space, texture

use ndarray::{Array2, Array3};
use serde::Serialize;

use crate::error::{CpceError, Result};
use crate::exec::ExecMode;
use crate::losses::{perceptual_loss, texture_matching_loss, FeatureExtractor, Reduction};
use crate::model::{generator_forward, GeneratorParams, SliceStack};
use crate::io_data::Volume;

/// 10·log10(range²/MSE); +∞ when the images are identical.
pub fn psnr(est: &Array2<f32>, reference: &Array2<f32>, data_range: f64) -> Result<f64> {
    if est.shape() != reference.shape() {
        return Err(CpceError::shape(format!(
            "psnr shape mismatch: {:?} vs {:?}",
            est.shape(),
            reference.shape()
        )));
    }
    let mse = est
        .iter()
        .zip(reference.iter())
        .map(|(a, b)| {
            let d = (*a - *b) as f64;
            d * d
        })
        .sum::<f64>()
        / est.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_L: f64 = 1.0;

fn gaussian_window() -> [[f64; SSIM_WINDOW]; SSIM_WINDOW] {
    let mut w = [[0.0; SSIM_WINDOW]; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, row) in w.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            *v = (-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            sum += *v;
        }
    }
    for row in w.iter_mut() {
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    w
}

/// Mean local SSIM over all valid 11×11 Gaussian windows (σ = 1.5,
/// K1 = 0.01, K2 = 0.03, dynamic range 1).
pub fn ssim(est: &Array2<f32>, reference: &Array2<f32>) -> Result<f64> {
    if est.shape() != reference.shape() {
        return Err(CpceError::shape("ssim shape mismatch"));
    }
    let (h, w) = (est.shape()[0], est.shape()[1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(CpceError::shape(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let win = gaussian_window();
    let c1 = (SSIM_K1 * SSIM_L).powi(2);
    let c2 = (SSIM_K2 * SSIM_L).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..=h - SSIM_WINDOW {
        for j in 0..=w - SSIM_WINDOW {
            let (mut mx, mut my) = (0.0f64, 0.0f64);
            for p in 0..SSIM_WINDOW {
                for q in 0..SSIM_WINDOW {
                    mx += win[p][q] * est[[i + p, j + q]] as f64;
                    my += win[p][q] * reference[[i + p, j + q]] as f64;
                }
            }
            let (mut vx, mut vy, mut cxy) = (0.0f64, 0.0f64, 0.0f64);
            for p in 0..SSIM_WINDOW {
                for q in 0..SSIM_WINDOW {
                    let dx = est[[i + p, j + q]] as f64 - mx;
                    let dy = reference[[i + p, j + q]] as f64 - my;
                    vx += win[p][q] * dx * dx;
                    vy += win[p][q] * dy * dy;
                    cxy += win[p][q] * dx * dy;
                }
            }
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Denoises every slice of a volume; for `d > 1` the stack around each
/// slice is edge-replicated at the volume boundaries.
pub fn denoise_volume(
    params: &GeneratorParams,
    volume: &Volume,
    mode: ExecMode,
) -> Result<Volume> {
    let d = params.input_d();
    let s = volume.data.shape();
    let (n, h, w) = (s[0], s[1], s[2]);
    let half = (d - 1) / 2;
    let slices: Vec<Result<Array2<f32>>> = crate::exec::map_indexed(mode, n, |i| {
        let mut stack = Array3::<f32>::zeros((d, h, w));
        for (k, mut plane) in stack.outer_iter_mut().enumerate() {
            let z = (i + k).saturating_sub(half).min(n - 1);
            plane.assign(&volume.data.index_axis(ndarray::Axis(0), z));
        }
        generator_forward(params, &SliceStack::new(stack)?)
    });
    let mut data = Array3::<f32>::zeros((n, h, w));
    for (i, r) in slices.into_iter().enumerate() {
        data.index_axis_mut(ndarray::Axis(0), i).assign(&r?);
    }
    Ok(Volume {
        data,
        spacing_mm: volume.spacing_mm,
        provenance: volume.provenance.clone(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SliceMetrics {
    pub volume: usize,
    pub slice: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub pl: f64,
    pub tml: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

fn mean_std(xs: impl Iterator<Item = f64> + Clone) -> MeanStd {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    let var = xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    MeanStd {
        mean,
        std: var.sqrt(),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub model_id: String,
    pub dataset_id: String,
    pub rows: Vec<SliceMetrics>,
    pub psnr: MeanStd,
    pub ssim: MeanStd,
    pub pl: MeanStd,
    pub tml: MeanStd,
}

impl EvalReport {
    pub fn from_rows(model_id: String, dataset_id: String, rows: Vec<SliceMetrics>) -> Self {
        let pick = |f: fn(&SliceMetrics) -> f64| mean_std(rows.iter().map(f).collect::<Vec<_>>().into_iter());
        EvalReport {
            psnr: pick(|r| r.psnr),
            ssim: pick(|r| r.ssim),
            pl: pick(|r| r.pl),
            tml: pick(|r| r.tml),
            model_id,
            dataset_id,
            rows,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("volume,slice,psnr,ssim,pl,tml\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.volume, r.slice, r.psnr, r.ssim, r.pl, r.tml
            ));
        }
        out.push_str(&format!(
            "mean,,{},{},{},{}\nstd,,{},{},{},{}\n",
            self.psnr.mean,
            self.ssim.mean,
            self.pl.mean,
            self.tml.mean,
            self.psnr.std,
            self.ssim.std,
            self.pl.std,
            self.tml.std
        ));
        out
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| CpceError::config(e.to_string()))
    }
}

/// Evaluates a model (or, with `params = None`, the raw low-dose input) on
/// registered (low-dose, normal-dose) volume pairs, one metric row per
/// slice.
pub fn evaluate_model(
    params: Option<&GeneratorParams>,
    pairs: &[(Volume, Volume)],
    extractor: &FeatureExtractor,
    reduction: Reduction,
    mode: ExecMode,
    model_id: &str,
    dataset_id: &str,
) -> Result<EvalReport> {
    let mut rows = Vec::new();
    for (vi, (ld, nd)) in pairs.iter().enumerate() {
        if ld.data.shape() != nd.data.shape() {
            return Err(CpceError::shape("volume pair not registered"));
        }
        let est = match params {
            Some(p) => denoise_volume(p, ld, mode)?.data,
            None => ld.data.clone(),
        };
        let n = est.shape()[0];
        let slice_rows: Vec<Result<SliceMetrics>> = crate::exec::map_indexed(mode, n, |i| {
            let e = est.index_axis(ndarray::Axis(0), i).to_owned();
            let r = nd.data.index_axis(ndarray::Axis(0), i).to_owned();
            let (h, w) = (e.shape()[0], e.shape()[1]);
            let eb = e
                .clone()
                .into_shape_with_order((1, 1, 1, h, w))
                .map_err(|err| CpceError::shape(err.to_string()))?;
            let rb = r
                .clone()
                .into_shape_with_order((1, 1, 1, h, w))
                .map_err(|err| CpceError::shape(err.to_string()))?;
            Ok(SliceMetrics {
                volume: vi,
                slice: i,
                psnr: psnr(&e, &r, 1.0)?,
                ssim: ssim(&e, &r)?,
                pl: perceptual_loss(extractor, &eb, &rb, reduction)? as f64,
                tml: texture_matching_loss(extractor, &e, &r, reduction)? as f64,
            })
        });
        for r in slice_rows {
            rows.push(r?);
        }
    }
    Ok(EvalReport::from_rows(
        model_id.to_string(),
        dataset_id.to_string(),
        rows,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn psnr_oracle_values() {
        let a = Array2::<f32>::zeros((8, 8));
        assert!(psnr(&a, &a, 1.0).unwrap().is_infinite());
        let ones = Array2::<f32>::ones((8, 8));
        assert_eq!(psnr(&a, &ones, 1.0).unwrap(), 0.0);
        let half = Array2::<f32>::from_elem((8, 8), 0.5);
        let v = psnr(&a, &half, 1.0).unwrap();
        assert!((v - 6.020599913279624).abs() < 1e-9, "{v}");
        let wrong = Array2::<f32>::zeros((4, 4));
        assert!(psnr(&a, &wrong, 1.0).is_err());
    }

    #[test]
    fn psnr_decreases_with_noise_level() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let clean = Array2::from_shape_fn((32, 32), |_| rng.gen_range(0.2f32..0.8));
        let noise = Array2::from_shape_fn((32, 32), |_| rng.gen_range(-1.0f32..1.0));
        let mut prev = f64::INFINITY;
        for sigma in [0.01f32, 0.05, 0.1, 0.2] {
            let noisy = &clean + &(&noise * sigma);
            let p = psnr(&noisy, &clean, 1.0).unwrap();
            assert!(p < prev, "sigma {sigma}: {p} !< {prev}");
            prev = p;
        }
    }

    #[test]
    fn ssim_identity_symmetry_and_direction() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let a = Array2::from_shape_fn((16, 16), |_| rng.gen_range(0.0f32..1.0));
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let b = Array2::from_shape_fn((16, 16), |_| rng.gen_range(0.0f32..1.0));
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        let inv = a.mapv(|v| 1.0 - v);
        assert!(ssim(&a, &inv).unwrap() < 1.0);
        assert!(ssim(&a, &Array2::zeros((8, 8))).is_err());
        assert!(ssim(&Array2::zeros((8, 8)), &Array2::zeros((8, 8))).is_err());
    }

    /// Independent direct SSIM: recomputes the window and formula from
    /// scratch with plain loops.
    fn ssim_oracle(x: &Array2<f32>, y: &Array2<f32>) -> f64 {
        let (h, w) = (x.shape()[0], x.shape()[1]);
        let mut g = vec![vec![0.0f64; 11]; 11];
        let mut s = 0.0;
        for i in 0..11 {
            for j in 0..11 {
                let d2 = (i as f64 - 5.0).powi(2) + (j as f64 - 5.0).powi(2);
                g[i][j] = (-d2 / 4.5).exp();
                s += g[i][j];
            }
        }
        let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
        let mut acc = 0.0;
        let mut n = 0;
        for i in 0..=h - 11 {
            for j in 0..=w - 11 {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for p in 0..11 {
                    for q in 0..11 {
                        let wt = g[p][q] / s;
                        let a = x[[i + p, j + q]] as f64;
                        let b = y[[i + p, j + q]] as f64;
                        mx += wt * a;
                        my += wt * b;
                        sxx += wt * a * a;
                        syy += wt * b * b;
                        sxy += wt * a * b;
                    }
                }
                let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                acc += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                n += 1;
            }
        }
        acc / n as f64
    }

    #[test]
    fn ssim_matches_independent_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let a = Array2::from_shape_fn((16, 16), |_| rng.gen_range(0.0f32..1.0));
        let b = Array2::from_shape_fn((16, 16), |_| rng.gen_range(0.0f32..1.0));
        let got = ssim(&a, &b).unwrap();
        let want = ssim_oracle(&a, &b);
        assert!((got - want).abs() < 1e-8, "{got} vs {want}");
    }

    #[test]
    fn identity_pairs_give_perfect_rows_and_reaggregation_holds() {
        use crate::io_data::{generate_phantom_volume, PhantomParams};
        let ex = FeatureExtractor::seeded_random_convnet(5);
        let vol = generate_phantom_volume(6, 3, 64, 64, &PhantomParams::default()).unwrap();
        let pairs = vec![(vol.clone(), vol.clone())];
        let rep = evaluate_model(
            None,
            &pairs,
            &ex,
            Reduction::Mean,
            ExecMode::Sequential,
            "identity",
            "test",
        )
        .unwrap();
        assert_eq!(rep.rows.len(), 3);
        for r in &rep.rows {
            assert!(r.psnr.is_infinite());
            assert!((r.ssim - 1.0).abs() < 1e-12);
            assert!(r.pl.abs() < 1e-10 && r.tml.abs() < 1e-10);
        }
        // re-aggregation
        let m = rep.rows.iter().map(|r| r.ssim).sum::<f64>() / rep.rows.len() as f64;
        assert_eq!(m, rep.ssim.mean);
        let csv = rep.to_csv();
        assert!(csv.starts_with("volume,slice,psnr"));
        assert!(rep.to_json().is_ok());
    }

    #[test]
    fn denoise_volume_parallel_matches_sequential() {
        use crate::io_data::{generate_phantom_volume, PhantomParams};
        use crate::model::build_generator;
        let p = build_generator::<f32>(3, 7).unwrap();
        let vol = generate_phantom_volume(8, 5, 64, 64, &PhantomParams::default()).unwrap();
        let a = denoise_volume(&p, &vol, ExecMode::Sequential).unwrap();
        let b = denoise_volume(&p, &vol, ExecMode::Parallel).unwrap();
        assert_eq!(a.data, b.data);
        assert_eq!(a.data.shape(), vol.data.shape());
    }
}
