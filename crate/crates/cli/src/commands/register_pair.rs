use crate::util::require_exists;
use clap::Parser;
use dceus_mc::affine::{affine_register, AffineRegConfig};
use dceus_mc::ffd::{evaluate_field, ffd_register, grid_to_mapping, save_grid, FfdConfig};
use dceus_mc::nifti::{load_mask, load_volume, save_volume, Datatype};
use dceus_mc::transform::{resample, Interpolation, SpatialMapping};
use dceus_mc::{AffineTransform, Result};
use serde::Serialize;
use std::path::PathBuf;

/// Register one floating volume to a reference (affine, then optional
/// FFD refinement) and print the recovered transform.
#[derive(Parser)]
pub struct Args {
    /// Reference volume.
    pub reference: PathBuf,
    /// Floating volume (same grid).
    pub floating: PathBuf,
    /// Warped floating volume output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Plain-text affine output.
    #[arg(long)]
    pub affine_out: Option<PathBuf>,
    /// FFD control grid output (NIfTI + JSON sidecar).
    #[arg(long)]
    pub grid_out: Option<PathBuf>,
    /// Skip the FFD refinement.
    #[arg(long)]
    pub affine_only: bool,
    /// 3D mask restricting the registration.
    #[arg(long)]
    pub mask: Option<PathBuf>,
}

#[derive(Serialize)]
struct PairReport {
    /// Translation in mm; the transform maps reference space into
    /// floating space (pull-back convention).
    translation_mm: [f64; 3],
    linear: [[f64; 3]; 3],
    deviation_from_identity: f64,
    ffd: Option<FfdPart>,
}

#[derive(Serialize)]
struct FfdPart {
    converged: bool,
    iterations: usize,
    final_nmi: f64,
    max_displacement_mm: f64,
}

pub fn run(args: Args) -> Result<()> {
    require_exists(&args.reference)?;
    require_exists(&args.floating)?;
    let reference = load_volume::<f32>(&args.reference)?;
    let floating = load_volume::<f32>(&args.floating)?;
    let mask = match &args.mask {
        Some(p) => {
            require_exists(p)?;
            Some(load_mask(p)?)
        }
        None => None,
    };

    let affine_cfg = AffineRegConfig::default();
    let t: AffineTransform = affine_register(&reference, &floating, mask.as_ref(), &affine_cfg)?;
    eprintln!("affine deviation from identity: {:.4}", t.deviation_from_identity());

    let mut ffd_part = None;
    let warped = if args.affine_only {
        resample(&floating, &SpatialMapping::affine(t).with_interpolation(Interpolation::Cubic))?
    } else {
        let (grid, summary) =
            ffd_register(&reference, &floating, Some(t), mask.as_ref(), &FfdConfig::default())?;
        let field = evaluate_field(&grid);
        let max_mm = field
            .disp
            .iter()
            .map(|d| (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt())
            .fold(0.0f64, f64::max);
        ffd_part = Some(FfdPart {
            converged: summary.converged,
            iterations: summary.iterations,
            final_nmi: summary.final_nmi,
            max_displacement_mm: max_mm,
        });
        if let Some(p) = &args.grid_out {
            save_grid(&grid, p)?;
        }
        let mapping =
            SpatialMapping::dense(grid_to_mapping(&grid)).with_interpolation(Interpolation::Cubic);
        resample(&floating, &mapping)?
    };

    if let Some(p) = &args.out {
        save_volume(&warped, p, Datatype::Float32)?;
    }
    if let Some(p) = &args.affine_out {
        t.save(p)?;
    }

    let lin = t.linear();
    let report = PairReport {
        translation_mm: t.translation_part(),
        linear: lin,
        deviation_from_identity: t.deviation_from_identity(),
        ffd: ffd_part,
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&report)
            .map_err(|e| dceus_mc::McError::InvalidArgument(format!("serialize report: {e}")))?
    );
    Ok(())
}
