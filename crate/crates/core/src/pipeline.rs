//! The two-pass, window-based motion-correction pipeline.
//!
//! Pass 1: each frame of a temporal window is registered (affine, then FFD
//! initialized by the affine) to the window average W_g. Pass 2: the
//! averages of the pass-1 outputs (W_g') are affine-registered to the
//! master average A of the whole acquisition, and each pass-1 frame is
//! FFD-registered to its window's A-space reference W_g'^T so that every
//! window lands in the same space. Frames before the detected injection
//! start pass through untouched.

use crate::affine::{affine_register, AffineRegConfig};
use crate::error::{McError, Result};
use crate::ffd::{evaluate_field, ffd_register, grid_to_mapping, FfdConfig};
use crate::scalar::Scalar;
use crate::transform::{resample, AffineTransform, Interpolation, SpatialMapping};
use crate::volume::{average_frames, frame_mean_intensity, Cine4, Mask3, Volume3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::ops::Range;
use std::time::Instant;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Nominal temporal window size (3..=6 frames).
    pub window_size: usize,
    /// Injection detected when a frame mean exceeds factor x baseline mean.
    pub start_threshold_factor: f64,
    pub baseline_frame_count: usize,
    pub affine: AffineRegConfig,
    pub ffd: FfdConfig,
    /// Optional per-frame weights for the master average A.
    pub master_weights: Option<Vec<f64>>,
    /// Max concurrent registrations; 0 means one per available core.
    pub parallelism: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            window_size: 5,
            start_threshold_factor: 1.20,
            baseline_frame_count: 5,
            affine: AffineRegConfig::default(),
            ffd: FfdConfig::default(),
            master_weights: None,
            parallelism: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(3..=6).contains(&self.window_size) {
            return Err(McError::InvalidArgument(format!(
                "window_size {} outside the allowed range 3-6",
                self.window_size
            )));
        }
        if !(self.start_threshold_factor > 1.0) {
            return Err(McError::InvalidArgument("start_threshold_factor must exceed 1".into()));
        }
        if self.baseline_frame_count < 1 {
            return Err(McError::InvalidArgument("baseline_frame_count must be >= 1".into()));
        }
        self.affine.validate()?;
        self.ffd.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowPlan {
    pub start_frame: usize,
    /// Disjoint contiguous ranges covering exactly start_frame..n_frames.
    pub windows: Vec<Range<usize>>,
    pub nominal_size: usize,
}

/// Searches for the first frame whose mean voxel intensity exceeds
/// `start_threshold_factor` times the mean over the baseline frames.
pub fn detect_start_frame<T: Scalar>(
    cine: &Cine4<T>,
    cfg: &PipelineConfig,
    mask: Option<&Mask3>,
) -> Result<usize> {
    if cine.len() <= cfg.baseline_frame_count {
        return Err(McError::InvalidArgument(format!(
            "cine has {} frames but baseline_frame_count is {}",
            cine.len(),
            cfg.baseline_frame_count
        )));
    }
    let mut baseline = 0.0;
    for n in 0..cfg.baseline_frame_count {
        baseline += frame_mean_intensity(cine.frame(n), mask)?;
    }
    baseline /= cfg.baseline_frame_count as f64;
    if baseline <= 0.0 {
        return Err(McError::Degenerate("baseline mean intensity is zero".into()));
    }
    let threshold = cfg.start_threshold_factor * baseline;
    for n in 0..cine.len() {
        if frame_mean_intensity(cine.frame(n), mask)? > threshold {
            return Ok(n);
        }
    }
    Err(McError::NoInjection(format!(
        "no frame mean exceeds {:.4} (baseline {:.4} x factor {})",
        threshold, baseline, cfg.start_threshold_factor
    )))
}

/// G = floor((N-s)/w) windows; the remainder is spread as evenly as
/// possible over the windows, trailing windows first, so whenever the
/// remainder fits one-per-window the sizes are w or w+1.
pub fn plan_windows(n_frames: usize, start: usize, window_size: usize) -> Result<WindowPlan> {
    if !(3..=6).contains(&window_size) {
        return Err(McError::InvalidArgument(format!(
            "window_size {window_size} outside the allowed range 3-6"
        )));
    }
    let post = n_frames.checked_sub(start).unwrap_or(0);
    if post < window_size {
        return Err(McError::InvalidArgument(format!(
            "{post} post-injection frames cannot fill a window of {window_size}"
        )));
    }
    let g = post / window_size;
    let r = post % window_size;
    // remainder frames are spread as evenly as possible, loading the
    // trailing windows first; when r <= g every extra is a single frame
    let extra = r / g;
    let bumped = r % g;
    let mut windows = Vec::with_capacity(g);
    let mut cursor = start;
    for i in 0..g {
        let size = window_size + extra + usize::from(i >= g - bumped);
        windows.push(cursor..cursor + size);
        cursor += size;
    }
    debug_assert_eq!(cursor, n_frames);
    Ok(WindowPlan { start_frame: start, windows, nominal_size: window_size })
}

/// What actually got applied to a frame when registration degraded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    Full,
    AffineOnly,
    Unchanged,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegRecord {
    pub affine: AffineTransform,
    pub fallback: Fallback,
    pub ffd_converged: bool,
    pub max_displacement_mm: f64,
    pub mean_displacement_mm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_index: usize,
    pub pass_through: bool,
    pub pass1: Option<RegRecord>,
    pub pass2: Option<RegRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageTimings {
    pub start_detection_s: f64,
    pub first_pass_s: f64,
    pub second_pass_s: f64,
    pub total_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrectionReport {
    pub detected_start: usize,
    pub window_plan: WindowPlan,
    pub frames: Vec<FrameRecord>,
    /// One second-pass affine T' per window.
    pub window_affines: Vec<AffineTransform>,
    pub warnings: Vec<String>,
    pub timings: StageTimings,
}

/// Registers one frame to `reference` (affine init + FFD), resamples it,
/// and falls back down the ladder full -> affine-only -> unchanged instead
/// of failing the whole acquisition.
fn correct_one<T: Scalar>(
    reference: &Volume3<T>,
    frame: &Volume3<T>,
    mask: Option<&Mask3>,
    cfg: &PipelineConfig,
    init: Option<AffineTransform>,
) -> (Volume3<T>, RegRecord, Option<String>) {
    let affine = match init {
        Some(t) => Ok(t),
        None => affine_register(reference, frame, mask, &cfg.affine),
    };
    match affine {
        Ok(t) => match ffd_register(reference, frame, Some(t), mask, &cfg.ffd) {
            Ok((grid, summary)) => {
                let field = evaluate_field(&grid);
                let mapping = SpatialMapping::dense(grid_to_mapping(&grid))
                    .with_interpolation(Interpolation::Cubic);
                match resample(frame, &mapping) {
                    Ok(out) => (
                        out,
                        RegRecord {
                            affine: t,
                            fallback: Fallback::Full,
                            ffd_converged: summary.converged,
                            max_displacement_mm: field.max_magnitude(),
                            mean_displacement_mm: field.mean_magnitude(),
                        },
                        None,
                    ),
                    Err(e) => affine_only(frame, t, Some(format!("resample failed: {e}"))),
                }
            }
            Err(e) => affine_only(frame, t, Some(format!("ffd failed: {e}"))),
        },
        Err(e) => (
            frame.clone(),
            RegRecord {
                affine: AffineTransform::identity(),
                fallback: Fallback::Unchanged,
                ffd_converged: false,
                max_displacement_mm: 0.0,
                mean_displacement_mm: 0.0,
            },
            Some(format!("affine failed, frame passed through: {e}")),
        ),
    }
}

fn affine_only<T: Scalar>(
    frame: &Volume3<T>,
    t: AffineTransform,
    warning: Option<String>,
) -> (Volume3<T>, RegRecord, Option<String>) {
    let mapping = SpatialMapping::affine(t).with_interpolation(Interpolation::Cubic);
    match resample(frame, &mapping) {
        Ok(out) => (
            out,
            RegRecord {
                affine: t,
                fallback: Fallback::AffineOnly,
                ffd_converged: false,
                max_displacement_mm: 0.0,
                mean_displacement_mm: 0.0,
            },
            warning,
        ),
        Err(e) => (
            frame.clone(),
            RegRecord {
                affine: AffineTransform::identity(),
                fallback: Fallback::Unchanged,
                ffd_converged: false,
                max_displacement_mm: 0.0,
                mean_displacement_mm: 0.0,
            },
            Some(format!("affine resample failed, frame passed through: {e}")),
        ),
    }
}

/// Pass 1 over one window: W_g = average of the window's frames; every
/// frame is affine+FFD registered to W_g and resampled.
pub fn first_pass<T: Scalar>(
    frames: &[Volume3<T>],
    mask: Option<&Mask3>,
    cfg: &PipelineConfig,
) -> Result<(Vec<Volume3<T>>, Volume3<T>, Vec<RegRecord>, Vec<String>)> {
    if frames.is_empty() {
        return Err(McError::EmptyInput("empty window".into()));
    }
    let w_g = average_frames(frames, None)?;
    let results: Vec<_> = frames
        .par_iter()
        .map(|f| correct_one(&w_g, f, mask, cfg, None))
        .collect();
    let mut out = Vec::with_capacity(frames.len());
    let mut records = Vec::with_capacity(frames.len());
    let mut warnings = Vec::new();
    for (vol, rec, warn) in results {
        out.push(vol);
        records.push(rec);
        warnings.extend(warn);
    }
    Ok((out, w_g, records, warnings))
}

/// Pass 2 over all windows: align each window's pass-1 average to the
/// master A and FFD-register every pass-1 frame into A's space.
#[allow(clippy::type_complexity)]
pub fn second_pass<T: Scalar>(
    pass1_windows: &[Vec<Volume3<T>>],
    master: &Volume3<T>,
    mask: Option<&Mask3>,
    cfg: &PipelineConfig,
) -> Result<(Vec<Vec<Volume3<T>>>, Vec<AffineTransform>, Vec<Vec<RegRecord>>, Vec<String>)> {
    let mut warnings = Vec::new();
    // per window: W_g' and its affine alignment T' to the master
    let aligned: Vec<(AffineTransform, Volume3<T>, Option<String>)> = pass1_windows
        .par_iter()
        .map(|frames| -> Result<(AffineTransform, Volume3<T>, Option<String>)> {
            let w_prime = average_frames(frames, None)?;
            match affine_register(master, &w_prime, mask, &cfg.affine) {
                Ok(t) => {
                    let w_t = resample(
                        &w_prime,
                        &SpatialMapping::affine(t).with_interpolation(Interpolation::Cubic),
                    )?;
                    Ok((t, w_t, None))
                }
                Err(e) => Ok((
                    AffineTransform::identity(),
                    w_prime,
                    Some(format!("window alignment to master failed: {e}")),
                )),
            }
        })
        .collect::<Result<_>>()?;
    let mut window_affines = Vec::with_capacity(aligned.len());
    let mut refs = Vec::with_capacity(aligned.len());
    for (t, w_t, warn) in aligned {
        window_affines.push(t);
        refs.push(w_t);
        warnings.extend(warn);
    }

    // all second-pass frame FFDs, concurrent across every window
    let jobs: Vec<(usize, usize)> = pass1_windows
        .iter()
        .enumerate()
        .flat_map(|(g, w)| (0..w.len()).map(move |i| (g, i)))
        .collect();
    let results: Vec<_> = jobs
        .par_iter()
        .map(|&(g, i)| {
            // T' initializes the FFD so the output lands in A's space
            correct_one(&refs[g], &pass1_windows[g][i], mask, cfg, Some(window_affines[g]))
        })
        .collect();
    let mut out: Vec<Vec<Volume3<T>>> =
        pass1_windows.iter().map(|w| Vec::with_capacity(w.len())).collect();
    let mut records: Vec<Vec<RegRecord>> =
        pass1_windows.iter().map(|w| Vec::with_capacity(w.len())).collect();
    for (&(g, _), (vol, rec, warn)) in jobs.iter().zip(results) {
        out[g].push(vol);
        records[g].push(rec);
        warnings.extend(warn);
    }
    Ok((out, window_affines, records, warnings))
}

/// Full two-pass correction. The output cine preserves frame count,
/// geometry, and timestamps; frames before the detected start are copied
/// bit-identically.
pub fn motion_correct<T: Scalar>(
    cine: &Cine4<T>,
    mask: Option<&Mask3>,
    cfg: &PipelineConfig,
) -> Result<(Cine4<T>, CorrectionReport)> {
    cfg.validate()?;
    if let Some(m) = mask {
        cine.geom().check_same_grid(m.geom(), "motion_correct mask")?;
    }
    let total_t = Instant::now();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallelism)
        .build()
        .map_err(|e| McError::InvalidArgument(format!("thread pool: {e}")))?;

    let t0 = Instant::now();
    let start = detect_start_frame(cine, cfg, mask)?;
    let start_detection_s = t0.elapsed().as_secs_f64();
    let plan = plan_windows(cine.len(), start, cfg.window_size)?;
    let master = average_frames(cine.frames(), cfg.master_weights.as_deref())?;

    let t1 = Instant::now();
    let windows: Vec<&[Volume3<T>]> =
        plan.windows.iter().map(|r| &cine.frames()[r.start..r.end]).collect();
    let mut pass1_out: Vec<Vec<Volume3<T>>> = Vec::with_capacity(windows.len());
    let mut pass1_records: Vec<Vec<RegRecord>> = Vec::with_capacity(windows.len());
    let mut warnings = Vec::new();
    pool.install(|| -> Result<()> {
        // one flat job list so small windows do not serialize the pool
        let jobs: Vec<(usize, usize)> = plan
            .windows
            .iter()
            .enumerate()
            .flat_map(|(g, r)| (0..r.len()).map(move |i| (g, i)))
            .collect();
        let averages: Vec<Volume3<T>> = plan
            .windows
            .iter()
            .enumerate()
            .map(|(g, _)| average_frames(windows[g], None))
            .collect::<Result<_>>()?;
        let results: Vec<_> = jobs
            .par_iter()
            .map(|&(g, i)| correct_one(&averages[g], &windows[g][i], mask, cfg, None))
            .collect();
        pass1_out = windows.iter().map(|w| Vec::with_capacity(w.len())).collect();
        pass1_records = windows.iter().map(|w| Vec::with_capacity(w.len())).collect();
        for (&(g, _), (vol, rec, warn)) in jobs.iter().zip(results) {
            pass1_out[g].push(vol);
            pass1_records[g].push(rec);
            warnings.extend(warn);
        }
        Ok(())
    })?;
    let first_pass_s = t1.elapsed().as_secs_f64();

    let t2 = Instant::now();
    let (pass2_out, window_affines, pass2_records, mut w2) =
        pool.install(|| second_pass(&pass1_out, &master, mask, cfg))?;
    warnings.append(&mut w2);
    let second_pass_s = t2.elapsed().as_secs_f64();

    // assemble the corrected cine and the per-frame report
    let mut frames_out: Vec<Volume3<T>> = cine.frames()[..start].to_vec();
    let mut frame_records: Vec<FrameRecord> = (0..start)
        .map(|n| FrameRecord { frame_index: n, pass_through: true, pass1: None, pass2: None })
        .collect();
    for (g, r) in plan.windows.iter().enumerate() {
        for (i, n) in r.clone().enumerate() {
            frames_out.push(pass2_out[g][i].clone());
            frame_records.push(FrameRecord {
                frame_index: n,
                pass_through: false,
                pass1: Some(pass1_records[g][i].clone()),
                pass2: Some(pass2_records[g][i].clone()),
            });
        }
    }
    let corrected = Cine4::new(frames_out, cine.times().to_vec(), cine.frame_rate_hint)?;
    let report = CorrectionReport {
        detected_start: start,
        window_plan: plan,
        frames: frame_records,
        window_affines,
        warnings,
        timings: StageTimings {
            start_detection_s,
            first_pass_s,
            second_pass_s,
            total_s: total_t.elapsed().as_secs_f64(),
        },
    };
    Ok((corrected, report))
}
