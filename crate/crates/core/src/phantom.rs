//! Synthetic 4D DCE-US cine generator: ellipsoidal lesion with lognormal
//! bolus kinetics over a vascular background, band-limited texture, seeded
//! speckle-like noise, and a rigid ground-truth motion trajectory
//! (respiration sinusoid + probe drift + optional patient-movement step).
//!
//! Motion is applied by resampling a motion-free synthesis through each
//! frame's ground-truth transform, so every voxel has an exact ground-truth
//! correspondence; lesion masks are the analytically transformed ellipsoid.

use crate::error::{McError, Result};
use crate::eval::{lognormal_model, LognormalParams, TimeIntensityCurve};
use crate::scalar::Scalar;
use crate::transform::{AffineTransform, Interpolation, SpatialMapping};
use crate::volume::{Cine4, Geometry, Mask3, Volume3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Lesion ellipsoid center and radii in mm (world coordinates).
    pub lesion_center: [f64; 3],
    pub lesion_radii: [f64; 3],
    /// Gaussian smoothing sigma (voxels) and relative amplitude of the
    /// static multiplicative texture.
    pub texture_scale: f64,
    pub texture_amplitude: f64,
    pub lesion_kinetics: LognormalParams,
    pub background_kinetics: LognormalParams,
    /// Per-frame multiplicative (speckle-like) and additive noise stdevs.
    pub speckle_stdev: f64,
    pub additive_stdev: f64,
    pub frame_rate: f64,
    pub duration: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [48, 48, 32],
            spacing: [1.0; 3],
            lesion_center: [23.5, 23.5, 15.5],
            lesion_radii: [9.0, 8.0, 6.5],
            texture_scale: 1.5,
            texture_amplitude: 0.35,
            lesion_kinetics: LognormalParams {
                t0: 5.0,
                mu: 3.0,
                sigma: 0.5,
                scale: 100.0,
                offset: 0.02,
            },
            background_kinetics: LognormalParams {
                t0: 4.0,
                mu: 3.3,
                sigma: 0.7,
                scale: 35.0,
                offset: 0.08,
            },
            speckle_stdev: 0.05,
            additive_stdev: 0.01,
            frame_rate: 1.0,
            duration: 40.0,
            seed: 7,
        }
    }
}

impl PhantomSpec {
    pub fn n_frames(&self) -> usize {
        (self.duration * self.frame_rate).round() as usize
    }

    pub fn frame_times(&self) -> Vec<f64> {
        (0..self.n_frames()).map(|n| n as f64 / self.frame_rate).collect()
    }

    pub fn geom(&self) -> Result<Geometry> {
        Geometry::new(self.dims, self.spacing, [0.0; 3])
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.geom()?;
        if self.n_frames() < 2 {
            return Err(McError::InvalidArgument("phantom needs at least 2 frames".into()));
        }
        if self.lesion_radii.iter().any(|&r| r <= 0.0) {
            return Err(McError::InvalidArgument("lesion radii must be positive".into()));
        }
        let _ = g;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MotionParams {
    /// Respiration: sinusoidal translation amplitude (voxels) and period (s).
    pub sinus_amplitude_vox: [f64; 3],
    pub sinus_period_s: f64,
    /// Probe drift: total translation (voxels) over the acquisition.
    pub drift_vox: [f64; 3],
    /// Patient movement: step displacement (voxels) from `step_frame` on.
    pub step_vox: [f64; 3],
    pub step_frame: Option<usize>,
}

impl Default for MotionParams {
    fn default() -> Self {
        Self {
            sinus_amplitude_vox: [0.0; 3],
            sinus_period_s: 4.0,
            drift_vox: [0.0; 3],
            step_vox: [0.0; 3],
            step_frame: None,
        }
    }
}

impl MotionParams {
    pub fn none() -> Self {
        Self::default()
    }

    /// Respiration-dominated preset used by the simulate CLI.
    pub fn respiratory() -> Self {
        Self {
            sinus_amplitude_vox: [4.0, 0.0, 1.0],
            sinus_period_s: 4.0,
            drift_vox: [2.0, 0.0, 0.0],
            step_vox: [0.0; 3],
            step_frame: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MotionTrajectory {
    /// Object displacement per frame, mm (content at x appears at x + d).
    pub displacements_mm: Vec<[f64; 3]>,
    /// Pull-back transforms: frame(x) = motion_free(M(x)), M = translate(-d).
    pub transforms: Vec<AffineTransform>,
}

impl MotionTrajectory {
    pub fn identity(n_frames: usize) -> Self {
        Self {
            displacements_mm: vec![[0.0; 3]; n_frames],
            transforms: vec![AffineTransform::identity(); n_frames],
        }
    }

    pub fn from_params(
        p: &MotionParams,
        n_frames: usize,
        frame_rate: f64,
        spacing: [f64; 3],
    ) -> Self {
        let mut displacements_mm = Vec::with_capacity(n_frames);
        let mut transforms = Vec::with_capacity(n_frames);
        for n in 0..n_frames {
            let t = n as f64 / frame_rate;
            let phase = 2.0 * std::f64::consts::PI * t / p.sinus_period_s;
            let frac = if n_frames > 1 { n as f64 / (n_frames - 1) as f64 } else { 0.0 };
            let mut d = [0.0f64; 3];
            for a in 0..3 {
                let mut vox = p.sinus_amplitude_vox[a] * phase.sin() + p.drift_vox[a] * frac;
                if let Some(s) = p.step_frame {
                    if n >= s {
                        vox += p.step_vox[a];
                    }
                }
                d[a] = vox * spacing[a];
            }
            displacements_mm.push(d);
            transforms.push(AffineTransform::translation([-d[0], -d[1], -d[2]]));
        }
        Self { displacements_mm, transforms }
    }

    pub fn len(&self) -> usize {
        self.transforms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transforms.is_empty()
    }
}

pub struct PhantomOutput<T: Scalar> {
    pub cine: Cine4<T>,
    /// Ground-truth lesion mask per frame (analytically transformed).
    pub masks: Vec<Mask3>,
    pub trajectory: MotionTrajectory,
}

fn inside_ellipsoid(w: [f64; 3], center: [f64; 3], radii: [f64; 3]) -> bool {
    let mut s = 0.0;
    for a in 0..3 {
        let d = (w[a] - center[a]) / radii[a];
        s += d * d;
    }
    s <= 1.0
}

pub fn generate_phantom_cine<T: Scalar>(
    spec: &PhantomSpec,
    traj: &MotionTrajectory,
) -> Result<PhantomOutput<T>> {
    spec.validate()?;
    let n_frames = spec.n_frames();
    if traj.len() != n_frames {
        return Err(McError::InvalidArgument(format!(
            "trajectory has {} transforms for {} frames",
            traj.len(),
            n_frames
        )));
    }
    let geom = spec.geom()?;
    // lesion plus motion must stay inside the grid
    let extent: Vec<f64> = (0..3).map(|a| (spec.dims[a] - 1) as f64 * spec.spacing[a]).collect();
    for d in &traj.displacements_mm {
        for a in 0..3 {
            let c = spec.lesion_center[a] + d[a];
            if c - spec.lesion_radii[a] < 0.0 || c + spec.lesion_radii[a] > extent[a] {
                return Err(McError::InvalidArgument(
                    "lesion or motion exceeds the grid margin".into(),
                ));
            }
        }
    }

    // static multiplicative texture, zero mean
    let texture = if spec.texture_amplitude > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let noise = Volume3::<f64>::from_fn(geom, |_, _, _| rng.gen::<f64>() - 0.5);
        let sm = noise.gaussian_smooth(spec.texture_scale);
        let mean = sm.data().iter().sum::<f64>() / sm.data().len() as f64;
        let (lo, hi) = sm.min_max();
        let half_range = (hi - lo).max(1e-12) / 2.0;
        Some(sm.map(|v| (v - mean) / half_range * spec.texture_amplitude))
    } else {
        None
    };
    let lesion = Mask3::from_fn(geom, |i, j, k| {
        inside_ellipsoid(
            geom.voxel_to_world([i as f64, j as f64, k as f64]),
            spec.lesion_center,
            spec.lesion_radii,
        )
    });

    let times = spec.frame_times();
    let frames: Vec<Volume3<T>> = (0..n_frames)
        .into_par_iter()
        .map(|n| -> Result<Volume3<T>> {
            let t = times[n];
            let k_lesion = lognormal_model(&spec.lesion_kinetics, t);
            let k_bg = lognormal_model(&spec.background_kinetics, t);
            let mut rng = ChaCha8Rng::seed_from_u64(
                spec.seed ^ (n as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            );
            let speckle = Normal::new(0.0, spec.speckle_stdev.max(1e-300)).unwrap();
            let additive = Normal::new(0.0, spec.additive_stdev.max(1e-300)).unwrap();
            let n_vox = geom.len();
            let mut data = Vec::with_capacity(n_vox);
            for idx in 0..n_vox {
                let base = if lesion.data()[idx] { k_lesion } else { k_bg };
                let tex = texture.as_ref().map(|tv| tv.data()[idx]).unwrap_or(0.0);
                let mut v = base * (1.0 + tex);
                if spec.speckle_stdev > 0.0 {
                    v *= 1.0 + speckle.sample(&mut rng);
                }
                if spec.additive_stdev > 0.0 {
                    v += additive.sample(&mut rng);
                }
                data.push(v.max(0.0));
            }
            let free = Volume3::new(geom, data)?;
            let moved = crate::transform::resample(
                &free,
                &SpatialMapping::affine(traj.transforms[n])
                    .with_interpolation(Interpolation::Cubic),
            )?;
            Ok(moved.cast::<T>())
        })
        .collect::<Result<_>>()?;

    let masks: Vec<Mask3> = traj
        .displacements_mm
        .iter()
        .map(|d| {
            let c = [
                spec.lesion_center[0] + d[0],
                spec.lesion_center[1] + d[1],
                spec.lesion_center[2] + d[2],
            ];
            Mask3::from_fn(geom, |i, j, k| {
                inside_ellipsoid(
                    geom.voxel_to_world([i as f64, j as f64, k as f64]),
                    c,
                    spec.lesion_radii,
                )
            })
        })
        .collect();

    let cine = Cine4::new(frames, times, Some(spec.frame_rate))?;
    Ok(PhantomOutput { cine, masks, trajectory: traj.clone() })
}

/// Analytic ROI-mean curve from the spec's kinetics (no noise, no motion,
/// no texture): an area-weighted mix of the lesion and background curves,
/// normalized by the sampled maximum of the brighter region so it is
/// directly comparable to `extract_tic` on a noise-free phantom.
pub fn expected_tic(spec: &PhantomSpec, lesion_fraction: f64) -> Result<TimeIntensityCurve> {
    if !(0.0..=1.0).contains(&lesion_fraction) {
        return Err(McError::InvalidArgument("lesion_fraction must be in [0,1]".into()));
    }
    let times = spec.frame_times();
    let mut global_max = 0.0f64;
    let mut raw = Vec::with_capacity(times.len());
    for &t in &times {
        let kl = lognormal_model(&spec.lesion_kinetics, t);
        let kb = lognormal_model(&spec.background_kinetics, t);
        global_max = global_max.max(kl).max(kb);
        raw.push(lesion_fraction * kl + (1.0 - lesion_fraction) * kb);
    }
    if global_max <= 0.0 {
        return Err(McError::Degenerate("phantom kinetics are identically zero".into()));
    }
    let intensities = raw.iter().map(|v| (v / global_max).clamp(0.0, 1.0)).collect();
    Ok(TimeIntensityCurve { times, intensities, roi_voxels: 0 })
}
