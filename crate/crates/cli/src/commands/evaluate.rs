use crate::util::{load_cine_f32, load_mask_cine, parse_range, require_exists, write_json};
use clap::Parser;
use dceus_mc::eval::{
    extract_tic, fit_lognormal, pairwise_ncc, pairwise_overlap, LognormalFit, NccStats,
    OverlapReport, TimeIntensityCurve,
};
use dceus_mc::nifti::load_mask;
use dceus_mc::{Cine4F32, McError, Result};
use serde::Serialize;
use std::path::PathBuf;

/// Compare pre- and post-correction cines: lesion overlap, inter-frame
/// NCC, and lognormal time-intensity-curve fits.
#[derive(Parser)]
pub struct Args {
    /// Pre-correction cine.
    #[arg(long)]
    pub pre: Option<PathBuf>,
    /// Post-correction cine.
    #[arg(long)]
    pub post: Option<PathBuf>,
    /// Pre-correction 4D lesion mask sequence (nonzero = lesion).
    #[arg(long)]
    pub pre_masks: Option<PathBuf>,
    /// Post-correction 4D lesion mask sequence.
    #[arg(long)]
    pub post_masks: Option<PathBuf>,
    /// 3D ROI mask for the NCC restriction and the TIC.
    #[arg(long)]
    pub roi: Option<PathBuf>,
    /// Frame range A:B (B exclusive) for pairwise NCC; default all frames.
    #[arg(long)]
    pub range: Option<String>,
    /// Maximum representable intensity of the source container (e.g. 255);
    /// default: each cine's own maximum.
    #[arg(long)]
    pub display_max: Option<f64>,
    /// Frame interval override in Hz.
    #[arg(long)]
    pub frame_rate: Option<f64>,
    /// Metrics JSON output; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Optional flat CSV with one row per metric.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Serialize)]
struct PrePost<T: Serialize> {
    pre: T,
    post: T,
}

#[derive(Serialize)]
struct TicReport {
    curve: TimeIntensityCurve,
    fit: LognormalFit,
}

#[derive(Serialize, Default)]
struct Metrics {
    #[serde(skip_serializing_if = "Option::is_none")]
    overlap: Option<PrePost<OverlapReport>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ncc: Option<PrePost<NccStats>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tic: Option<PrePost<TicReport>>,
}

pub fn run(args: Args) -> Result<()> {
    let load = |p: &Option<PathBuf>| -> Result<Option<Cine4F32>> {
        match p {
            Some(path) => load_cine_f32(path, args.frame_rate).map(Some),
            None => Ok(None),
        }
    };
    let pre = load(&args.pre)?;
    let post = load(&args.post)?;
    if pre.is_some() != post.is_some() {
        return Err(McError::InvalidArgument("--pre and --post must be given together".into()));
    }
    if args.pre_masks.is_some() != args.post_masks.is_some() {
        return Err(McError::InvalidArgument(
            "--pre-masks and --post-masks must be given together".into(),
        ));
    }
    if pre.is_none() && args.pre_masks.is_none() {
        return Err(McError::InvalidArgument(
            "nothing to evaluate: give --pre/--post cines and/or --pre-masks/--post-masks".into(),
        ));
    }

    let roi = match &args.roi {
        Some(p) => {
            require_exists(p)?;
            Some(load_mask(p)?)
        }
        None => None,
    };

    let mut metrics = Metrics::default();

    if let (Some(pm), Some(qm)) = (&args.pre_masks, &args.post_masks) {
        let pre_m = load_mask_cine(pm)?;
        let post_m = load_mask_cine(qm)?;
        metrics.overlap = Some(PrePost {
            pre: pairwise_overlap(&pre_m)?,
            post: pairwise_overlap(&post_m)?,
        });
    }

    if let (Some(pre), Some(post)) = (&pre, &post) {
        pre.geom().check_same_grid(post.geom(), "evaluate pre/post")?;
        let range = match &args.range {
            Some(s) => parse_range(s)?,
            None => 0..pre.len(),
        };
        metrics.ncc = Some(PrePost {
            pre: pairwise_ncc(pre, range.clone(), roi.as_ref())?,
            post: pairwise_ncc(post, range, roi.as_ref())?,
        });
        if let Some(roi) = &roi {
            let tic_of = |c: &Cine4F32| -> Result<TicReport> {
                let curve = extract_tic(c, roi, args.display_max)?;
                let fit = fit_lognormal(&curve)?;
                Ok(TicReport { curve, fit })
            };
            metrics.tic = Some(PrePost { pre: tic_of(pre)?, post: tic_of(post)? });
        }
    }

    if let Some(path) = &args.csv {
        std::fs::write(path, csv_rows(&metrics))?;
    }
    match &args.out {
        Some(path) => write_json(&metrics, path)?,
        None => {
            let text = serde_json::to_string_pretty(&metrics)
                .map_err(|e| McError::InvalidArgument(format!("serialize metrics: {e}")))?;
            println!("{text}");
        }
    }
    Ok(())
}

fn csv_rows(m: &Metrics) -> String {
    let mut s = String::from("metric,pre_mean,pre_stdev,post_mean,post_stdev\n");
    if let Some(o) = &m.overlap {
        s += &format!(
            "overlap_percent,{},{},{},{}\n",
            o.pre.mean_percent, o.pre.stdev_percent, o.post.mean_percent, o.post.stdev_percent
        );
    }
    if let Some(n) = &m.ncc {
        s += &format!(
            "pairwise_ncc,{},{},{},{}\n",
            n.pre.mean, n.pre.stdev, n.post.mean, n.post.stdev
        );
    }
    if let Some(t) = &m.tic {
        s += &format!("tic_rmse,{},,{},\n", t.pre.fit.rmse, t.post.fit.rmse);
        s += &format!("tic_r_squared,{},,{},\n", t.pre.fit.r_squared, t.post.fit.r_squared);
        s += &format!("tic_sse,{},,{},\n", t.pre.fit.sse, t.post.fit.sse);
    }
    s
}
