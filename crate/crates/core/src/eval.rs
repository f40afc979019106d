//! Evaluation instruments: pairwise lesion volume overlap (Jaccard),
//! inter-frame NCC statistics, and lognormal time-intensity-curve fitting
//! with SSE/RMSE/R².

use crate::error::{McError, Result};
use crate::scalar::Scalar;
use crate::similarity::ncc;
use crate::volume::{Cine4, Mask3};
use serde::{Deserialize, Serialize};
use std::ops::Range;

// ---- lesion overlap -----------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OverlapReport {
    pub frame_indices: Vec<usize>,
    /// Row-major n×n Jaccard fractions in [0,1], symmetric, unit diagonal.
    pub matrix: Vec<f64>,
    /// Mean ± stdev over unordered pairs, as percentages.
    pub mean_percent: f64,
    pub stdev_percent: f64,
}

impl OverlapReport {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.frame_indices.len() + j]
    }
}

pub fn jaccard(a: &Mask3, b: &Mask3) -> Result<f64> {
    a.geom().check_same_grid(b.geom(), "jaccard")?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        if x && y {
            inter += 1;
        }
        if x || y {
            union += 1;
        }
    }
    if union == 0 {
        return Err(McError::EmptyInput("jaccard of two empty masks".into()));
    }
    Ok(inter as f64 / union as f64)
}

pub fn pairwise_overlap(masks: &[Mask3]) -> Result<OverlapReport> {
    if masks.len() < 2 {
        return Err(McError::EmptyInput("pairwise_overlap needs at least two masks".into()));
    }
    for (i, m) in masks.iter().enumerate() {
        if !m.is_nonempty() {
            return Err(McError::EmptyInput(format!("mask {i} is empty")));
        }
        masks[0].geom().check_same_grid(m.geom(), "pairwise_overlap")?;
    }
    let n = masks.len();
    let mut matrix = vec![0.0; n * n];
    let mut pair_values = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        matrix[i * n + i] = 1.0;
        for j in i + 1..n {
            let v = jaccard(&masks[i], &masks[j])?;
            matrix[i * n + j] = v;
            matrix[j * n + i] = v;
            pair_values.push(v);
        }
    }
    let (mean, stdev) = mean_stdev(&pair_values);
    Ok(OverlapReport {
        frame_indices: (0..n).collect(),
        matrix,
        mean_percent: mean * 100.0,
        stdev_percent: stdev * 100.0,
    })
}

fn mean_stdev(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

// ---- inter-frame NCC ----------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NccStats {
    pub mean: f64,
    pub stdev: f64,
    pub n_pairs: usize,
}

/// NCC over all unordered frame pairs in `range` (whole-frame by default,
/// restricted to `mask` if given).
pub fn pairwise_ncc<T: Scalar>(
    cine: &Cine4<T>,
    range: Range<usize>,
    mask: Option<&Mask3>,
) -> Result<NccStats> {
    if range.end > cine.len() || range.len() < 2 {
        return Err(McError::InvalidArgument(format!(
            "frame range {range:?} invalid for a {}-frame cine",
            cine.len()
        )));
    }
    if let Some(m) = mask {
        cine.geom().check_same_grid(m.geom(), "pairwise_ncc mask")?;
    }
    let mut vals = Vec::new();
    for i in range.clone() {
        for j in i + 1..range.end {
            vals.push(ncc(cine.frame(i), cine.frame(j), mask)?);
        }
    }
    let (mean, stdev) = mean_stdev(&vals);
    Ok(NccStats { mean, stdev, n_pairs: vals.len() })
}

// ---- time-intensity curves ---------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimeIntensityCurve {
    pub times: Vec<f64>,
    /// Mean ROI intensity per frame, normalized into [0,1].
    pub intensities: Vec<f64>,
    pub roi_voxels: usize,
}

/// Mean ROI intensity per frame. `display_max` is the maximum representable
/// value of the source container (255 for 8-bit data); when absent the
/// cine's global maximum is used, yielding a curve peaking at or below 1.
pub fn extract_tic<T: Scalar>(
    cine: &Cine4<T>,
    roi: &Mask3,
    display_max: Option<f64>,
) -> Result<TimeIntensityCurve> {
    cine.geom().check_same_grid(roi.geom(), "extract_tic")?;
    let count = roi.count();
    if count == 0 {
        return Err(McError::EmptyInput("empty ROI".into()));
    }
    let mut raw = Vec::with_capacity(cine.len());
    for f in cine.frames() {
        let mut acc = 0.0;
        for (v, &keep) in f.data().iter().zip(roi.data()) {
            if keep {
                acc += v.as_f64();
            }
        }
        raw.push(acc / count as f64);
    }
    let norm = match display_max {
        Some(m) if m > 0.0 => m,
        Some(_) => return Err(McError::InvalidArgument("display_max must be positive".into())),
        None => {
            let mut g = f64::NEG_INFINITY;
            for f in cine.frames() {
                g = g.max(f.min_max().1);
            }
            if g <= 0.0 {
                return Err(McError::Degenerate("non-positive cine maximum".into()));
            }
            g
        }
    };
    let intensities: Vec<f64> = raw.iter().map(|v| (v / norm).clamp(0.0, 1.0)).collect();
    Ok(TimeIntensityCurve { times: cine.times().to_vec(), intensities, roi_voxels: count })
}

// ---- lognormal bolus model ---------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LognormalParams {
    /// Bolus onset time (s).
    pub t0: f64,
    pub mu: f64,
    pub sigma: f64,
    pub scale: f64,
    pub offset: f64,
}

/// I(t) = offset + scale * lognormal_pdf(t - t0; mu, sigma) for t > t0,
/// else offset.
pub fn lognormal_model(p: &LognormalParams, t: f64) -> f64 {
    let tau = t - p.t0;
    if tau <= 0.0 {
        return p.offset;
    }
    let z = (tau.ln() - p.mu) / p.sigma;
    p.offset + p.scale * (-0.5 * z * z).exp() / (tau * p.sigma * (2.0 * std::f64::consts::PI).sqrt())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LognormalFit {
    pub params: LognormalParams,
    pub sse: f64,
    pub rmse: f64,
    pub r_squared: f64,
    pub converged: bool,
}

/// The optimizer works on [t0, mu, ln sigma, ln scale, offset].
fn unpack(v: &[f64; 5]) -> LognormalParams {
    LognormalParams {
        t0: v[0],
        mu: v[1],
        sigma: v[2].exp(),
        scale: v[3].exp(),
        offset: v[4].max(0.0),
    }
}

fn sse_of(v: &[f64; 5], times: &[f64], ys: &[f64]) -> f64 {
    let p = unpack(v);
    times
        .iter()
        .zip(ys)
        .map(|(&t, &y)| {
            let r = lognormal_model(&p, t) - y;
            r * r
        })
        .sum()
}

/// Heuristic starting point per the wash-in shape of the curve.
fn initial_guess(times: &[f64], ys: &[f64]) -> [f64; 5] {
    let n = ys.len();
    let (peak_idx, &peak) = ys
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap();
    let lo = ys.iter().cloned().fold(f64::INFINITY, f64::min);
    let thresh = lo + 0.1 * (peak - lo);
    // last below-threshold sample before the peak marks the onset
    let mut onset_idx = 0usize;
    for i in 0..peak_idx {
        if ys[i] <= thresh {
            onset_idx = i;
        }
    }
    let t0 = times[onset_idx];
    let offset = if onset_idx > 0 {
        ys[..onset_idx].iter().sum::<f64>() / onset_idx as f64
    } else {
        lo
    };
    // log-domain moments of the enhancement-weighted rise
    let mut wsum = 0.0;
    let mut m1 = 0.0;
    for i in 0..n {
        let tau = times[i] - t0;
        if tau > 1e-9 {
            let w = (ys[i] - offset).max(0.0);
            wsum += w;
            m1 += w * tau.ln();
        }
    }
    let mu = if wsum > 0.0 { m1 / wsum } else { 1.0 };
    let mut m2 = 0.0;
    for i in 0..n {
        let tau = times[i] - t0;
        if tau > 1e-9 {
            let w = (ys[i] - offset).max(0.0);
            m2 += w * (tau.ln() - mu).powi(2);
        }
    }
    let sigma = if wsum > 0.0 { (m2 / wsum).sqrt().clamp(0.05, 3.0) } else { 0.5 };
    // scale from the peak of the unit-scale model over the sampled times
    let unit = LognormalParams { t0, mu, sigma, scale: 1.0, offset: 0.0 };
    let unit_peak = times
        .iter()
        .map(|&t| lognormal_model(&unit, t))
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let scale = ((peak - offset).max(1e-9)) / unit_peak;
    [t0, mu, sigma.ln(), scale.ln(), offset.max(0.0)]
}

/// Damped least squares (Levenberg–Marquardt) with a finite-difference
/// Jacobian in the transformed parameter space.
pub fn fit_lognormal(tic: &TimeIntensityCurve) -> Result<LognormalFit> {
    let times = &tic.times;
    let ys = &tic.intensities;
    let n = ys.len();
    if n < 8 {
        return Err(McError::InvalidArgument("need at least 8 TIC samples".into()));
    }
    let lo = ys.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo > 1e-12) {
        return Err(McError::Degenerate("flat time-intensity curve".into()));
    }

    let mut v = initial_guess(times, ys);
    let mut sse = sse_of(&v, times, ys);
    let mut lambda = 1e-3;
    let mut converged = false;
    let t_max = *times.last().unwrap();

    for _ in 0..200 {
        // finite-difference Jacobian of residuals
        let p = unpack(&v);
        let resid: Vec<f64> = times
            .iter()
            .zip(ys)
            .map(|(&t, &y)| lognormal_model(&p, t) - y)
            .collect();
        let mut jac = vec![[0.0f64; 5]; n];
        for c in 0..5 {
            let h = 1e-6 * (1.0 + v[c].abs());
            let mut vp = v;
            vp[c] += h;
            let pp = unpack(&vp);
            let mut vm = v;
            vm[c] -= h;
            let pm = unpack(&vm);
            for (i, &t) in times.iter().enumerate() {
                jac[i][c] = (lognormal_model(&pp, t) - lognormal_model(&pm, t)) / (2.0 * h);
            }
        }
        let mut jtj = nalgebra::Matrix5::<f64>::zeros();
        let mut jtr = nalgebra::Vector5::<f64>::zeros();
        for i in 0..n {
            for a in 0..5 {
                jtr[a] += jac[i][a] * resid[i];
                for b in 0..5 {
                    jtj[(a, b)] += jac[i][a] * jac[i][b];
                }
            }
        }
        let mut improved = false;
        for _ in 0..12 {
            let mut damped = jtj;
            for a in 0..5 {
                damped[(a, a)] += lambda * (jtj[(a, a)].abs() + 1e-12);
            }
            let Some(step) = damped.lu().solve(&(-jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let mut trial = v;
            for a in 0..5 {
                trial[a] += step[a];
            }
            // keep the onset inside the sampled window and parameters sane
            trial[0] = trial[0].clamp(times[0] - t_max, t_max);
            trial[2] = trial[2].clamp((0.01f64).ln(), (10.0f64).ln());
            trial[4] = trial[4].max(0.0);
            let trial_sse = sse_of(&trial, times, ys);
            if trial_sse.is_finite() && trial_sse < sse {
                let rel = (sse - trial_sse) / sse.max(1e-300);
                v = trial;
                sse = trial_sse;
                lambda = (lambda / 3.0).max(1e-12);
                improved = true;
                if rel < 1e-12 {
                    converged = true;
                }
                break;
            }
            lambda *= 4.0;
        }
        if !improved {
            converged = true;
            break;
        }
        if converged {
            break;
        }
    }

    let mean_y = ys.iter().sum::<f64>() / n as f64;
    let tss = ys.iter().map(|y| (y - mean_y).powi(2)).sum::<f64>();
    let rmse = (sse / n as f64).sqrt();
    let r_squared = 1.0 - sse / tss;
    Ok(LognormalFit { params: unpack(&v), sse, rmse, r_squared, converged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{Geometry, Volume3};
    use approx::assert_abs_diff_eq;

    fn box_mask(g: Geometry, lo: [usize; 3], hi: [usize; 3]) -> Mask3 {
        Mask3::from_fn(g, |i, j, k| {
            i >= lo[0] && i < hi[0] && j >= lo[1] && j < hi[1] && k >= lo[2] && k < hi[2]
        })
    }

    #[test]
    fn overlap_identities() {
        let g = Geometry::isotropic([10, 10, 10]);
        let a = box_mask(g, [0, 0, 0], [4, 4, 4]);
        let b = box_mask(g, [6, 6, 6], [10, 10, 10]);
        assert_abs_diff_eq!(jaccard(&a, &a).unwrap(), 1.0);
        assert_abs_diff_eq!(jaccard(&a, &b).unwrap(), 0.0);
        // half-volume overlap of equal boxes: |A∩B| = |A|/2 -> 1/3
        let c = box_mask(g, [0, 0, 0], [4, 4, 4]);
        let d = box_mask(g, [2, 0, 0], [6, 4, 4]);
        assert_abs_diff_eq!(jaccard(&c, &d).unwrap(), 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn overlap_report_shape() {
        let g = Geometry::isotropic([8, 8, 8]);
        let masks = vec![
            box_mask(g, [0, 0, 0], [4, 4, 4]),
            box_mask(g, [1, 0, 0], [5, 4, 4]),
            box_mask(g, [2, 0, 0], [6, 4, 4]),
        ];
        let rep = pairwise_overlap(&masks).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(rep.at(i, i), 1.0);
            for j in 0..3 {
                assert_abs_diff_eq!(rep.at(i, j), rep.at(j, i));
            }
        }
        assert!(rep.mean_percent > 0.0 && rep.mean_percent < 100.0);
    }

    #[test]
    fn overlap_monotone_under_translation() {
        let g = Geometry::isotropic([24, 8, 8]);
        let a = box_mask(g, [0, 0, 0], [8, 8, 8]);
        let mut prev = 1.0;
        for shift in 0..10 {
            let b = box_mask(g, [shift, 0, 0], [8 + shift, 8, 8]);
            let v = jaccard(&a, &b).unwrap();
            assert!(v <= prev + 1e-12, "overlap rose while translating away");
            prev = v;
        }
    }

    #[test]
    fn empty_mask_rejected() {
        let g = Geometry::isotropic([6, 6, 6]);
        let a = box_mask(g, [0, 0, 0], [3, 3, 3]);
        let e = Mask3::from_fn(g, |_, _, _| false);
        assert!(pairwise_overlap(&[a, e]).is_err());
    }

    fn cine_of(frames: Vec<Volume3<f64>>) -> Cine4<f64> {
        let n = frames.len();
        Cine4::new(frames, (0..n).map(|i| i as f64).collect(), None).unwrap()
    }

    #[test]
    fn ncc_identical_frames() {
        let g = Geometry::isotropic([6, 6, 6]);
        let f = Volume3::from_fn(g, |i, j, k| (i * 31 + j * 7 + k) as f64);
        let cine = cine_of(vec![f.clone(), f.clone(), f.clone(), f.clone(), f]);
        let s = pairwise_ncc(&cine, 0..5, None).unwrap();
        assert_eq!(s.n_pairs, 10);
        assert_abs_diff_eq!(s.mean, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.stdev, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn ncc_rescale_invariance() {
        let g = Geometry::isotropic([6, 6, 6]);
        let a = Volume3::from_fn(g, |i, j, k| ((i * 13 + j * 5 + k * 3) % 17) as f64);
        let b = Volume3::from_fn(g, |i, j, k| ((i * 7 + j * 11 + k) % 13) as f64);
        let cine = cine_of(vec![a.clone(), b.clone()]);
        let rescaled = cine_of(vec![a.map(|v| 3.0 * v + 10.0), b.map(|v| 3.0 * v + 10.0)]);
        let s1 = pairwise_ncc(&cine, 0..2, None).unwrap();
        let s2 = pairwise_ncc(&rescaled, 0..2, None).unwrap();
        assert_abs_diff_eq!(s1.mean, s2.mean, epsilon = 1e-12);
    }

    #[test]
    fn ncc_bad_range() {
        let g = Geometry::isotropic([4, 4, 4]);
        let f = Volume3::from_fn(g, |i, _, _| i as f64);
        let cine = cine_of(vec![f.clone(), f]);
        assert!(pairwise_ncc(&cine, 0..5, None).is_err());
        assert!(pairwise_ncc(&cine, 1..2, None).is_err());
    }

    #[test]
    fn tic_constant_and_single_voxel() {
        let g = Geometry::isotropic([4, 4, 4]);
        let frames: Vec<Volume3<f64>> =
            (0..10).map(|n| Volume3::filled(g, 2.0 + n as f64)).collect();
        let cine = cine_of(frames);
        let roi = Mask3::full(g);
        let tic = extract_tic(&cine, &roi, None).unwrap();
        // normalized by global max (11.0)
        assert_abs_diff_eq!(tic.intensities[0], 2.0 / 11.0, epsilon = 1e-12);
        assert_abs_diff_eq!(tic.intensities[9], 1.0, epsilon = 1e-12);

        let single = Mask3::from_fn(g, |i, j, k| i == 1 && j == 2 && k == 3);
        let tic2 = extract_tic(&cine, &single, Some(255.0)).unwrap();
        assert_eq!(tic2.roi_voxels, 1);
        assert_abs_diff_eq!(tic2.intensities[3], 5.0 / 255.0, epsilon = 1e-12);
    }

    fn synth_tic(p: &LognormalParams, dt: f64, dur: f64) -> TimeIntensityCurve {
        let n = (dur / dt) as usize;
        let times: Vec<f64> = (0..n).map(|i| i as f64 * dt).collect();
        let intensities = times.iter().map(|&t| lognormal_model(p, t)).collect();
        TimeIntensityCurve { times, intensities, roi_voxels: 0 }
    }

    #[test]
    fn lognormal_noiseless_recovery() {
        let truth = LognormalParams { t0: 5.0, mu: 3.0, sigma: 0.5, scale: 100.0, offset: 0.02 };
        let tic = synth_tic(&truth, 1.0, 120.0);
        let fit = fit_lognormal(&tic).unwrap();
        assert!(fit.r_squared >= 0.999, "R² {}", fit.r_squared);
        let p = fit.params;
        assert!((p.mu - truth.mu).abs() / truth.mu < 0.01, "mu {}", p.mu);
        assert!((p.sigma - truth.sigma).abs() / truth.sigma < 0.01, "sigma {}", p.sigma);
        assert!((p.scale - truth.scale).abs() / truth.scale < 0.01, "scale {}", p.scale);
        assert!((p.t0 - truth.t0).abs() / truth.t0 < 0.01, "t0 {}", p.t0);
    }

    #[test]
    fn lognormal_noisy_rmse_tracks_noise() {
        use rand::{Rng, SeedableRng};
        let truth = LognormalParams { t0: 5.0, mu: 3.0, sigma: 0.5, scale: 100.0, offset: 0.02 };
        let mut tic = synth_tic(&truth, 1.0, 120.0);
        let clean = fit_lognormal(&tic).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let sigma = 0.01;
        for y in &mut tic.intensities {
            // Box-Muller pair, first component
            let u1: f64 = rng.gen::<f64>().max(1e-12);
            let u2: f64 = rng.gen();
            *y += sigma * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
        let noisy = fit_lognormal(&tic).unwrap();
        assert!(noisy.r_squared < clean.r_squared);
        assert!(
            (noisy.rmse - sigma).abs() / sigma < 0.30,
            "rmse {} vs noise sigma {sigma}",
            noisy.rmse
        );
    }

    #[test]
    fn lognormal_metric_identities() {
        let truth = LognormalParams { t0: 4.0, mu: 2.5, sigma: 0.7, scale: 50.0, offset: 0.01 };
        let mut tic = synth_tic(&truth, 0.5, 90.0);
        for (i, y) in tic.intensities.iter_mut().enumerate() {
            *y += 0.002 * ((i % 7) as f64 - 3.0); // deterministic perturbation
        }
        let fit = fit_lognormal(&tic).unwrap();
        // recompute the identities independently
        let n = tic.times.len();
        let sse: f64 = tic
            .times
            .iter()
            .zip(&tic.intensities)
            .map(|(&t, &y)| (lognormal_model(&fit.params, t) - y).powi(2))
            .sum();
        let mean = tic.intensities.iter().sum::<f64>() / n as f64;
        let tss: f64 = tic.intensities.iter().map(|y| (y - mean).powi(2)).sum();
        assert_abs_diff_eq!(fit.sse, sse, epsilon = 1e-12 * (1.0 + sse));
        assert_abs_diff_eq!(fit.rmse, (sse / n as f64).sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(fit.r_squared, 1.0 - sse / tss, epsilon = 1e-12);
    }

    #[test]
    fn lognormal_recovery_grid() {
        for &mu in &[2.2f64, 2.8, 3.4] {
            for &sigma in &[0.3f64, 0.5, 0.8] {
                for &t0 in &[3.0f64, 6.0, 9.0] {
                    let truth = LognormalParams { t0, mu, sigma, scale: 80.0, offset: 0.05 };
                    let tic = synth_tic(&truth, 1.0, 150.0);
                    let fit = fit_lognormal(&tic).unwrap();
                    assert!(
                        fit.r_squared >= 0.999,
                        "mu={mu} sigma={sigma} t0={t0}: R² {}",
                        fit.r_squared
                    );
                }
            }
        }
    }

    #[test]
    fn lognormal_degenerate_inputs() {
        let flat = TimeIntensityCurve {
            times: (0..20).map(|i| i as f64).collect(),
            intensities: vec![0.3; 20],
            roi_voxels: 10,
        };
        assert!(fit_lognormal(&flat).is_err());
        let short = TimeIntensityCurve {
            times: vec![0.0, 1.0, 2.0],
            intensities: vec![0.1, 0.5, 0.2],
            roi_voxels: 10,
        };
        assert!(fit_lognormal(&short).is_err());
    }
}
