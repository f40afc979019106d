//! Similarity metrics: NMI from a Parzen-window joint histogram (with an
//! analytic gradient, needed by the FFD optimizer) and normalized
//! cross-correlation for evaluation.
//!
//! Histogram deposition uses cubic B-spline Parzen windows (support 4 bins)
//! so the metric is differentiable in the floating intensities. NMI is
//! Studholme's (H(R)+H(F))/H(R,F) with entropies in nats; it lies in (1, 2].

use crate::error::{McError, Result};
use crate::scalar::Scalar;
use crate::volume::{Mask3, Volume3};

/// Cubic B-spline kernel, support [-2, 2]. Partition of unity over the
/// integer grid, which keeps the histogram mass exactly equal to the number
/// of contributing voxels.
#[inline]
pub fn bspline3(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        2.0 / 3.0 - a * a + 0.5 * a * a * a
    } else if a < 2.0 {
        let t = 2.0 - a;
        t * t * t / 6.0
    } else {
        0.0
    }
}

/// Derivative of [`bspline3`].
#[inline]
pub fn bspline3_deriv(x: f64) -> f64 {
    let a = x.abs();
    let m = if a < 1.0 {
        -2.0 * a + 1.5 * a * a
    } else if a < 2.0 {
        let t = 2.0 - a;
        -0.5 * t * t
    } else {
        0.0
    };
    if x < 0.0 {
        -m
    } else {
        m
    }
}

/// Second derivative of [`bspline3`].
#[inline]
pub fn bspline3_deriv2(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        -2.0 + 3.0 * a
    } else if a < 2.0 {
        2.0 - a
    } else {
        0.0
    }
}

/// Parzen-smoothed joint intensity histogram.
#[derive(Debug, Clone)]
pub struct JointHistogram {
    pub bins: usize,
    /// bins x bins, ref-major: counts[i * bins + j] with i the ref bin.
    pub counts: Vec<f64>,
    pub ref_range: (f64, f64),
    pub flt_range: (f64, f64),
    pub total: f64,
}

impl JointHistogram {
    /// Build directly from counts (ranges set to unit); used by tests and by
    /// constructed-histogram checks.
    pub fn from_counts(bins: usize, counts: Vec<f64>) -> Result<Self> {
        if bins < 2 || counts.len() != bins * bins {
            return Err(McError::InvalidArgument(format!(
                "need bins >= 2 and bins^2 counts, got bins={bins}, len={}",
                counts.len()
            )));
        }
        if counts.iter().any(|&c| c < 0.0 || !c.is_finite()) {
            return Err(McError::InvalidArgument("counts must be finite and nonnegative".into()));
        }
        let total: f64 = counts.iter().sum();
        if total <= 0.0 {
            return Err(McError::Degenerate("histogram with zero mass".into()));
        }
        Ok(Self { bins, counts, ref_range: (0.0, 1.0), flt_range: (0.0, 1.0), total })
    }

    pub fn ref_marginal(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.bins];
        for i in 0..self.bins {
            for j in 0..self.bins {
                m[i] += self.counts[i * self.bins + j];
            }
        }
        m
    }

    pub fn flt_marginal(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.bins];
        for i in 0..self.bins {
            for j in 0..self.bins {
                m[j] += self.counts[i * self.bins + j];
            }
        }
        m
    }

    fn entropies(&self) -> (f64, f64, f64) {
        let mut hr = 0.0;
        let mut hf = 0.0;
        let mut hj = 0.0;
        let mr = self.ref_marginal();
        let mf = self.flt_marginal();
        for &c in &mr {
            let p = c / self.total;
            if p > 0.0 {
                hr -= p * p.ln();
            }
        }
        for &c in &mf {
            let p = c / self.total;
            if p > 0.0 {
                hf -= p * p.ln();
            }
        }
        for &c in &self.counts {
            let p = c / self.total;
            if p > 0.0 {
                hj -= p * p.ln();
            }
        }
        (hr, hf, hj)
    }
}

/// Continuous bin coordinate of an intensity within a range.
#[inline]
fn bin_coord(v: f64, range: (f64, f64), bins: usize) -> f64 {
    ((v - range.0) / (range.1 - range.0) * (bins - 1) as f64).clamp(0.0, (bins - 1) as f64)
}

/// Deposit window: the four integer bins around a coordinate, clamped to the
/// valid bin range so the partition of unity (and total mass) is preserved.
#[inline]
fn window(c: f64, bins: usize) -> [(usize, f64); 4] {
    let base = c.floor() as i64 - 1;
    let mut out = [(0usize, 0.0f64); 4];
    for (o, slot) in out.iter_mut().enumerate() {
        let j = base + o as i64;
        *slot = (j.clamp(0, bins as i64 - 1) as usize, bspline3(c - j as f64));
    }
    out
}

#[inline]
fn window_deriv(c: f64, bins: usize) -> [(usize, f64); 4] {
    let base = c.floor() as i64 - 1;
    let mut out = [(0usize, 0.0f64); 4];
    for (o, slot) in out.iter_mut().enumerate() {
        let j = base + o as i64;
        *slot = (j.clamp(0, bins as i64 - 1) as usize, bspline3_deriv(c - j as f64));
    }
    out
}

/// Accumulate a histogram from (ref, flt) value pairs with fixed ranges.
pub fn joint_histogram_pairs(
    pairs: impl Iterator<Item = (f64, f64)>,
    bins: usize,
    ref_range: (f64, f64),
    flt_range: (f64, f64),
) -> Result<JointHistogram> {
    if bins < 2 {
        return Err(McError::InvalidArgument(format!("bins must be >= 2, got {bins}")));
    }
    if !(ref_range.1 > ref_range.0) || !(flt_range.1 > flt_range.0) {
        return Err(McError::Degenerate(
            "zero intensity range (constant image) on a histogram axis".into(),
        ));
    }
    let mut counts = vec![0.0f64; bins * bins];
    let mut n = 0usize;
    for (r, f) in pairs {
        let cr = bin_coord(r, ref_range, bins);
        let cf = bin_coord(f, flt_range, bins);
        for (i, wr) in window(cr, bins) {
            if wr == 0.0 {
                continue;
            }
            for (j, wf) in window(cf, bins) {
                counts[i * bins + j] += wr * wf;
            }
        }
        n += 1;
    }
    if n == 0 {
        return Err(McError::EmptyInput("no contributing voxels for histogram".into()));
    }
    Ok(JointHistogram { bins, counts, ref_range, flt_range, total: n as f64 })
}

fn contributing<'a, T: Scalar>(
    r: &'a Volume3<T>,
    f: &'a Volume3<T>,
    mask: Option<&'a Mask3>,
) -> impl Iterator<Item = (usize, f64, f64)> + 'a {
    r.data().iter().zip(f.data()).enumerate().filter_map(move |(idx, (rv, fv))| {
        let inside = mask.map(|m| m.data()[idx]).unwrap_or(true);
        inside.then(|| (idx, rv.as_f64(), fv.as_f64()))
    })
}

/// Joint histogram of two volumes; binning range is [min, max] per image over
/// the contributing voxels.
pub fn joint_histogram<T: Scalar>(
    r: &Volume3<T>,
    f: &Volume3<T>,
    bins: usize,
    mask: Option<&Mask3>,
) -> Result<JointHistogram> {
    r.geom().check_same_grid(f.geom(), "joint_histogram")?;
    if let Some(m) = mask {
        r.geom().check_same_grid(m.geom(), "joint_histogram mask")?;
        if !m.is_nonempty() {
            return Err(McError::EmptyInput("joint_histogram: empty mask".into()));
        }
    }
    let mut rlo = f64::INFINITY;
    let mut rhi = f64::NEG_INFINITY;
    let mut flo = f64::INFINITY;
    let mut fhi = f64::NEG_INFINITY;
    for (_, rv, fv) in contributing(r, f, mask) {
        rlo = rlo.min(rv);
        rhi = rhi.max(rv);
        flo = flo.min(fv);
        fhi = fhi.max(fv);
    }
    joint_histogram_pairs(
        contributing(r, f, mask).map(|(_, rv, fv)| (rv, fv)),
        bins,
        (rlo, rhi),
        (flo, fhi),
    )
}

/// Studholme NMI: (H(R) + H(F)) / H(R,F), entropies in nats.
pub fn nmi(hist: &JointHistogram) -> Result<f64> {
    let (hr, hf, hj) = hist.entropies();
    if hj <= 0.0 {
        return Err(McError::Degenerate("zero joint entropy".into()));
    }
    Ok((hr + hf) / hj)
}

/// d NMI / d (flt value) for each pair, given the histogram the pairs built.
/// The ranges inside `hist` are treated as fixed.
pub fn nmi_gradient_pairs(
    pairs: impl Iterator<Item = (f64, f64)>,
    hist: &JointHistogram,
) -> Result<Vec<f64>> {
    let bins = hist.bins;
    let (hr, hf, hj) = hist.entropies();
    if hj <= 0.0 {
        return Err(McError::Degenerate("zero joint entropy".into()));
    }
    let total = hist.total;
    let mf = hist.flt_marginal();
    // precompute log terms; bins with zero mass get 0 (their dp is ~0 too)
    let lpf: Vec<f64> = mf
        .iter()
        .map(|&c| if c > 0.0 { (c / total).ln() + 1.0 } else { 0.0 })
        .collect();
    let lpj: Vec<f64> = hist
        .counts
        .iter()
        .map(|&c| if c > 0.0 { (c / total).ln() + 1.0 } else { 0.0 })
        .collect();
    let scale = (bins - 1) as f64 / (hist.flt_range.1 - hist.flt_range.0);
    let mut out = Vec::new();
    for (rv, fv) in pairs {
        let cr = bin_coord(rv, hist.ref_range, bins);
        let cf = bin_coord(fv, hist.flt_range, bins);
        // clamped coordinates have zero derivative through the bin mapping
        let at_edge = cf <= 0.0 || cf >= (bins - 1) as f64;
        if at_edge {
            out.push(0.0);
            continue;
        }
        let wr = window(cr, bins);
        let dwf = window_deriv(cf, bins);
        let mut dhf = 0.0;
        let mut dhj = 0.0;
        for (j, dw) in dwf {
            if dw == 0.0 {
                continue;
            }
            // d pf_j / dv = dw * scale / total   (sum_i wr_i = 1)
            dhf -= lpf[j] * dw;
            for (i, w) in wr {
                if w == 0.0 {
                    continue;
                }
                dhj -= lpj[i * bins + j] * w * dw;
            }
        }
        let dhf = dhf * scale / total;
        let dhj = dhj * scale / total;
        out.push((dhf * hj - (hr + hf) * dhj) / (hj * hj));
    }
    Ok(out)
}

/// Per-voxel d NMI / d (flt voxel intensity); zero outside the mask.
pub fn nmi_gradient<T: Scalar>(
    r: &Volume3<T>,
    f: &Volume3<T>,
    hist: &JointHistogram,
    mask: Option<&Mask3>,
) -> Result<Vec<f64>> {
    r.geom().check_same_grid(f.geom(), "nmi_gradient")?;
    if hist.total as usize != contributing(r, f, mask).count() {
        return Err(McError::InvalidArgument(
            "histogram was not built from these images/mask".into(),
        ));
    }
    let per_pair =
        nmi_gradient_pairs(contributing(r, f, mask).map(|(_, rv, fv)| (rv, fv)), hist)?;
    let mut out = vec![0.0f64; r.data().len()];
    for ((idx, _, _), g) in contributing(r, f, mask).zip(per_pair) {
        out[idx] = g;
    }
    Ok(out)
}

/// Pearson correlation of voxel intensities over the contributing set.
pub fn ncc<T: Scalar>(a: &Volume3<T>, b: &Volume3<T>, mask: Option<&Mask3>) -> Result<f64> {
    a.geom().check_same_grid(b.geom(), "ncc")?;
    if let Some(m) = mask {
        a.geom().check_same_grid(m.geom(), "ncc mask")?;
    }
    let mut n = 0usize;
    let mut sa = 0.0;
    let mut sb = 0.0;
    for (_, av, bv) in contributing(a, b, mask) {
        sa += av;
        sb += bv;
        n += 1;
    }
    if n == 0 {
        return Err(McError::EmptyInput("ncc: no contributing voxels".into()));
    }
    let ma = sa / n as f64;
    let mb = sb / n as f64;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (_, av, bv) in contributing(a, b, mask) {
        let da = av - ma;
        let db = bv - mb;
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    if va <= 0.0 || vb <= 0.0 {
        return Err(McError::Degenerate("ncc: zero variance input".into()));
    }
    Ok((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
}
