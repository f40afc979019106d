use crate::manifest::{load_config, RunManifest};
use crate::util::{require_exists, sibling, write_json};
use clap::Parser;
use dceus_mc::nifti::{save_cine, Datatype};
use dceus_mc::phantom::{generate_phantom_cine, MotionParams, MotionTrajectory, PhantomSpec};
use dceus_mc::{Cine4F32, McError, Result, Volume3F32};
use std::path::PathBuf;
use std::time::Instant;

/// Generate a synthetic 4D contrast cine with ground-truth lesion masks
/// and motion trajectory.
#[derive(Parser)]
pub struct Args {
    /// Output cine path.
    #[arg(long)]
    pub out: PathBuf,
    /// Motion preset: none, respiratory.
    #[arg(long, default_value = "respiratory")]
    pub preset: String,
    /// Phantom specification JSON (PhantomSpec fields; all optional).
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// RNG seed (overrides spec).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Acquisition length in seconds (overrides spec).
    #[arg(long)]
    pub duration: Option<f64>,
    /// Ground-truth lesion mask sequence output (default: <out>.masks.nii.gz).
    #[arg(long)]
    pub masks_out: Option<PathBuf>,
    /// Ground-truth trajectory JSON output (default: <out>.trajectory.json).
    #[arg(long)]
    pub trajectory_out: Option<PathBuf>,
    /// Run manifest path (default: <out>.manifest.json).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

pub fn run(args: Args) -> Result<()> {
    let started = Instant::now();
    let mut spec: PhantomSpec = match &args.spec {
        Some(p) => {
            require_exists(p)?;
            load_config(p)?
        }
        None => PhantomSpec::default(),
    };
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    if let Some(d) = args.duration {
        spec.duration = d;
    }

    let params = match args.preset.as_str() {
        "none" => MotionParams::none(),
        "respiratory" => MotionParams::respiratory(),
        other => {
            return Err(McError::InvalidArgument(format!(
                "unknown preset '{other}' (expected none or respiratory)"
            )))
        }
    };
    let trajectory =
        MotionTrajectory::from_params(&params, spec.n_frames(), spec.frame_rate, spec.spacing);
    let out = generate_phantom_cine::<f32>(&spec, &trajectory)?;
    eprintln!(
        "simulated {} frames of {:?} (seed {})",
        out.cine.len(),
        out.cine.geom().dims,
        spec.seed
    );

    save_cine(&out.cine, &args.out, Datatype::Float32)?;
    let masks_path = args.masks_out.clone().unwrap_or_else(|| sibling(&args.out, ".masks.nii.gz"));
    let mask_frames: Vec<Volume3F32> = out
        .masks
        .iter()
        .map(|m| Volume3F32::from_fn(*m.geom(), |i, j, k| if m.get(i, j, k) { 1.0 } else { 0.0 }))
        .collect();
    let mask_cine = Cine4F32::new(mask_frames, out.cine.times().to_vec(), None)?;
    save_cine(&mask_cine, &masks_path, Datatype::Uint8)?;
    let traj_path =
        args.trajectory_out.clone().unwrap_or_else(|| sibling(&args.out, ".trajectory.json"));
    write_json(&out.trajectory, &traj_path)?;

    let seed = spec.seed;
    let mut manifest = RunManifest::new("simulate", spec);
    manifest.seed = Some(seed);
    manifest.output("cine", &args.out);
    manifest.output("masks", &masks_path);
    manifest.output("trajectory", &traj_path);
    manifest.elapsed_seconds = started.elapsed().as_secs_f64();
    let manifest_path =
        args.manifest.clone().unwrap_or_else(|| sibling(&args.out, ".manifest.json"));
    write_json(&manifest, &manifest_path)?;
    Ok(())
}
