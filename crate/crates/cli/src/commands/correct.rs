use crate::manifest::{load_config, RunManifest};
use crate::util::{load_cine_f32, parse_datatype, require_exists, sibling, write_json};
use clap::Parser;
use dceus_mc::nifti::{load_mask, save_cine, Datatype};
use dceus_mc::pipeline::{motion_correct, PipelineConfig};
use dceus_mc::Result;
use std::path::PathBuf;
use std::time::Instant;

/// Motion-correct a 4D cine with the two-pass window algorithm.
#[derive(Parser)]
pub struct Args {
    /// Input 4D NIfTI cine (.nii or .nii.gz).
    pub input: PathBuf,
    /// Corrected cine output path.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional 3D region-of-interest mask restricting start detection and
    /// block selection.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// JSON pipeline configuration (a previous run manifest also works).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Correction report path (default: <out>.report.json).
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Run manifest path (default: <out>.manifest.json).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Temporal window size, 3-6 frames (overrides config).
    #[arg(long)]
    pub window_size: Option<usize>,
    /// Injection threshold factor over baseline mean (overrides config).
    #[arg(long)]
    pub start_threshold: Option<f64>,
    /// Max concurrent registrations; 0 = one per core (overrides config).
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Frame interval override in Hz when the file's time step is absent.
    #[arg(long)]
    pub frame_rate: Option<f64>,
    /// Output voxel type: uint8, int16, uint16, float32, float64.
    #[arg(long, default_value = "float32")]
    pub datatype: String,
}

pub fn run(args: Args) -> Result<()> {
    let started = Instant::now();
    let dt: Datatype = parse_datatype(&args.datatype)?;

    let mut cfg: PipelineConfig = match &args.config {
        Some(p) => {
            require_exists(p)?;
            load_config(p)?
        }
        None => PipelineConfig::default(),
    };
    if let Some(w) = args.window_size {
        cfg.window_size = w;
    }
    if let Some(f) = args.start_threshold {
        cfg.start_threshold_factor = f;
    }
    if let Some(j) = args.jobs {
        cfg.parallelism = j;
    }
    cfg.validate()?;

    let cine = load_cine_f32(&args.input, args.frame_rate)?;
    eprintln!(
        "loaded {} frames of {:?} from {}",
        cine.len(),
        cine.geom().dims,
        args.input.display()
    );
    let mask = match &args.mask {
        Some(p) => {
            require_exists(p)?;
            Some(load_mask(p)?)
        }
        None => None,
    };

    let (corrected, report) = motion_correct(&cine, mask.as_ref(), &cfg)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    eprintln!(
        "start frame {}, {} windows, corrected in {:.1}s",
        report.detected_start,
        report.window_plan.windows.len(),
        started.elapsed().as_secs_f64()
    );

    save_cine(&corrected, &args.out, dt)?;
    let report_path = args.report.clone().unwrap_or_else(|| sibling(&args.out, ".report.json"));
    write_json(&report, &report_path)?;

    let mut manifest = RunManifest::new("correct", cfg);
    manifest.input("cine", &args.input);
    if let Some(p) = &args.mask {
        manifest.input("mask", p);
    }
    manifest.output("corrected", &args.out);
    manifest.output("report", &report_path);
    manifest.elapsed_seconds = started.elapsed().as_secs_f64();
    let manifest_path =
        args.manifest.clone().unwrap_or_else(|| sibling(&args.out, ".manifest.json"));
    write_json(&manifest, &manifest_path)?;
    Ok(())
}
