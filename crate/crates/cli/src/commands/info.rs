use crate::util::{load_cine_f32, require_exists};
use clap::Parser;
use dceus_mc::nifti::read_header;
use dceus_mc::volume::frame_mean_intensity;
use dceus_mc::Result;
use std::path::PathBuf;

/// Print header geometry and per-frame statistics of a NIfTI volume/cine.
#[derive(Parser)]
pub struct Args {
    pub input: PathBuf,
    /// Skip the per-frame intensity table (header only, no voxel read).
    #[arg(long)]
    pub header_only: bool,
}

pub fn run(args: Args) -> Result<()> {
    require_exists(&args.input)?;
    let h = read_header(&args.input)?;
    println!("file:      {}", args.input.display());
    println!("ndim:      {}", h.ndim);
    println!("dims:      {} x {} x {}", h.dims[0], h.dims[1], h.dims[2]);
    println!(
        "spacing:   {} x {} x {} mm",
        h.pixdim[1], h.pixdim[2], h.pixdim[3]
    );
    println!("frames:    {}", h.n_frames());
    if h.ndim == 4 {
        println!("dt:        {} s", h.pixdim[4]);
    }
    println!("datatype:  {} (bitpix {})", h.datatype, h.bitpix);
    if args.header_only {
        return Ok(());
    }

    let cine = load_cine_f32(&args.input, None)?;
    println!();
    println!("frame    time_s    mean_intensity    min         max");
    for (n, t) in cine.times().iter().enumerate() {
        let f = cine.frame(n);
        let mean = frame_mean_intensity(f, None)?;
        let (lo, hi) = f.min_max();
        println!("{n:<8} {t:<9.3} {mean:<17.6} {lo:<11.4} {hi:<11.4}");
    }
    Ok(())
}
