//! 12-DOF affine registration by symmetric block matching with
//! least-trimmed-squares regression, multi-resolution (coarse to fine).
//!
//! Blocks are matched by exhaustive integer-voxel search maximizing local
//! NCC; the integer peak is refined per axis with a parabola fit through the
//! neighboring scores and then by coordinate descent on the interpolated
//! score. Forward and inverted-backward correspondences are pooled into one
//! LTS fit. All loops are deterministic.

use crate::error::{McError, Result};
use crate::scalar::Scalar;
use crate::transform::{resample_with_valid, AffineTransform, Interpolation, SpatialMapping};
use crate::volume::{Mask3, Volume3};
use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AffineRegConfig {
    /// Cubic block edge in voxels.
    pub block_size: usize,
    /// Exhaustive search radius in voxels.
    pub search_radius: i64,
    /// Fraction of blocks kept, ranked by intensity variance.
    pub block_keep_fraction: f64,
    /// Fraction of worst-residual correspondences trimmed per LTS round.
    pub lts_trim_fraction: f64,
    /// Pyramid stages.
    pub levels: usize,
    pub max_outer_iterations: usize,
    /// Convergence on the update's max deviation from identity.
    pub convergence_tol: f64,
}

impl Default for AffineRegConfig {
    fn default() -> Self {
        Self {
            block_size: 4,
            search_radius: 3,
            block_keep_fraction: 0.5,
            lts_trim_fraction: 0.10,
            levels: 3,
            max_outer_iterations: 10,
            convergence_tol: 1e-3,
        }
    }
}

impl AffineRegConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_size < 2 {
            return Err(McError::InvalidArgument("block_size must be >= 2".into()));
        }
        if self.search_radius < 1 {
            return Err(McError::InvalidArgument("search_radius must be >= 1".into()));
        }
        if !(self.block_keep_fraction > 0.0 && self.block_keep_fraction <= 1.0) {
            return Err(McError::InvalidArgument("block_keep_fraction must be in (0,1]".into()));
        }
        if !(0.0..0.5).contains(&self.lts_trim_fraction) {
            return Err(McError::InvalidArgument("lts_trim_fraction must be in [0, 0.5)".into()));
        }
        if self.levels < 1 {
            return Err(McError::InvalidArgument("levels must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchDirection {
    Forward,
    Backward,
}

/// One block correspondence in physical (mm) coordinates: the transform
/// should carry `ref_center` onto `matched_center`.
#[derive(Debug, Clone, Copy)]
pub struct BlockCorrespondence {
    pub ref_center: [f64; 3],
    pub matched_center: [f64; 3],
    pub score: f64,
    pub direction: MatchDirection,
}

/// Tile the volume into non-overlapping blocks, discard blocks outside the
/// mask, rank by intensity variance, keep the top fraction. Returns block
/// origin voxel indices in deterministic order.
pub fn select_blocks<T: Scalar>(
    vol: &Volume3<T>,
    mask: Option<&Mask3>,
    cfg: &AffineRegConfig,
) -> Result<Vec<[usize; 3]>> {
    cfg.validate()?;
    let d = vol.dims();
    let b = cfg.block_size;
    if d.iter().any(|&x| x < b) {
        return Err(McError::InvalidArgument(format!(
            "volume {d:?} smaller than one {b}^3 block"
        )));
    }
    if let Some(m) = mask {
        vol.geom().check_same_grid(m.geom(), "select_blocks mask")?;
    }
    let mut scored: Vec<([usize; 3], f64, usize)> = Vec::new();
    let mut tile_idx = 0usize;
    for bz in 0..d[2] / b {
        for by in 0..d[1] / b {
            for bx in 0..d[0] / b {
                let origin = [bx * b, by * b, bz * b];
                tile_idx += 1;
                if let Some(m) = mask {
                    let mut any = false;
                    'outer: for dz in 0..b {
                        for dy in 0..b {
                            for dx in 0..b {
                                if m.get(origin[0] + dx, origin[1] + dy, origin[2] + dz) {
                                    any = true;
                                    break 'outer;
                                }
                            }
                        }
                    }
                    if !any {
                        continue;
                    }
                }
                let (_, var) = block_stats(vol, origin, b);
                scored.push((origin, var, tile_idx));
            }
        }
    }
    if scored.is_empty() {
        return Err(McError::EmptyInput("no blocks survive masking".into()));
    }
    // variance descending, tile index ascending for deterministic ties
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.2.cmp(&b.2)));
    let keep = ((scored.len() as f64 * cfg.block_keep_fraction).ceil() as usize)
        .clamp(1, scored.len());
    Ok(scored.into_iter().take(keep).map(|(o, _, _)| o).collect())
}

fn block_stats<T: Scalar>(vol: &Volume3<T>, origin: [usize; 3], b: usize) -> (f64, f64) {
    let mut s = 0.0;
    let mut s2 = 0.0;
    for dz in 0..b {
        for dy in 0..b {
            for dx in 0..b {
                let v = vol.get(origin[0] + dx, origin[1] + dy, origin[2] + dz).as_f64();
                s += v;
                s2 += v * v;
            }
        }
    }
    let n = (b * b * b) as f64;
    let mean = s / n;
    (mean, (s2 / n - mean * mean).max(0.0))
}

fn block_values<T: Scalar>(vol: &Volume3<T>, origin: [i64; 3], b: usize, out: &mut Vec<f64>) -> bool {
    let d = vol.dims();
    if origin.iter().zip(&d).any(|(&o, &dd)| o < 0 || o + b as i64 > dd as i64) {
        return false;
    }
    out.clear();
    for dz in 0..b {
        for dy in 0..b {
            for dx in 0..b {
                out.push(
                    vol.get(
                        origin[0] as usize + dx,
                        origin[1] as usize + dy,
                        origin[2] as usize + dz,
                    )
                    .as_f64(),
                );
            }
        }
    }
    true
}

fn ncc_slices(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sa += x;
        sb += y;
        saa += x * x;
        sbb += y * y;
        sab += x * y;
    }
    let va = saa - sa * sa / n;
    let vb = sbb - sb * sb / n;
    if va <= 1e-12 || vb <= 1e-12 {
        return None;
    }
    Some((sab - sa * sb / n) / (va * vb).sqrt())
}

fn block_fully_valid(valid: &Mask3, origin: [i64; 3], b: usize) -> bool {
    let d = valid.geom().dims;
    if origin.iter().zip(&d).any(|(&o, &dd)| o < 0 || o + b as i64 > dd as i64) {
        return false;
    }
    for dz in 0..b {
        for dy in 0..b {
            for dx in 0..b {
                if !valid.get(origin[0] as usize + dx, origin[1] as usize + dy, origin[2] as usize + dz) {
                    return false;
                }
            }
        }
    }
    true
}

/// Sub-voxel refinement context: the *original* (unwarped) floating volume
/// and the transform the warped image was produced with. Candidate blocks
/// at fractional offsets are evaluated by sampling the original floating
/// through the transform, so every candidate — integer or fractional — is
/// interpolated exactly once. Scoring fractional candidates against the
/// already-resampled image instead would add a second interpolation whose
/// offset-dependent blur biases the peak toward whole-voxel positions
/// (peak locking) and stalls the outer iteration.
pub struct FracRefine<'a, T: Scalar> {
    pub floating: &'a Volume3<T>,
    pub transform: &'a AffineTransform,
}

/// NCC between an integer reference-grid block (`sv`) and the floating
/// volume sampled through the transform at grid positions `s_origin + off +
/// i`. `None` if a sample falls outside or the block has zero variance.
fn ncc_through_transform<T: Scalar>(
    rf: &FracRefine<'_, T>,
    grid: &crate::volume::Geometry,
    s_origin: [i64; 3],
    b: usize,
    sv: &[f64],
    off: [f64; 3],
    dv: &mut Vec<f64>,
) -> Option<f64> {
    dv.clear();
    let fg = rf.floating.geom();
    for dz in 0..b {
        for dy in 0..b {
            for dx in 0..b {
                let vox = [
                    s_origin[0] as f64 + off[0] + dx as f64,
                    s_origin[1] as f64 + off[1] + dy as f64,
                    s_origin[2] as f64 + off[2] + dz as f64,
                ];
                let w = rf.transform.apply(grid.voxel_to_world(vox));
                let (v, inside) =
                    rf.floating
                        .sample(fg.world_to_voxel(w), Interpolation::Cubic, 0.0);
                if !inside {
                    return None;
                }
                dv.push(v);
            }
        }
    }
    ncc_slices(sv, dv)
}

/// Coordinate-descent refinement of a block offset on the uniformly
/// interpolated NCC score, starting from the parabola estimate.
fn refine_offset_frac(mut score: impl FnMut([f64; 3]) -> Option<f64>, off: &mut [f64; 3]) {
    let mut best = match score(*off) {
        Some(s) => s,
        None => return,
    };
    let mut step = 0.5;
    while step >= 0.03 {
        let mut improved = false;
        for axis in 0..3 {
            for dir in [1.0, -1.0] {
                let mut cand = *off;
                cand[axis] += dir * step;
                if let Some(s) = score(cand) {
                    if s > best {
                        best = s;
                        *off = cand;
                        improved = true;
                        break;
                    }
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
}

/// Match one direction: for every block of `src` (origins given), search
/// `dst` over integer offsets within the radius, maximize block NCC and
/// refine the peak with a per-axis parabola fit. `src_valid`/`dst_valid`
/// exclude blocks touching resampling padding.
fn match_one_direction<T: Scalar>(
    src: &Volume3<T>,
    dst: &Volume3<T>,
    src_valid: Option<&Mask3>,
    dst_valid: Option<&Mask3>,
    origins: &[[usize; 3]],
    cfg: &AffineRegConfig,
    direction: MatchDirection,
    refine: Option<&FracRefine<'_, T>>,
    out: &mut Vec<BlockCorrespondence>,
) {
    let b = cfg.block_size;
    let r = cfg.search_radius;
    let geom = *src.geom();
    let mut sv = Vec::with_capacity(b * b * b);
    let mut dv = Vec::with_capacity(b * b * b);
    let mut rv = Vec::with_capacity(b * b * b);
    let side = (2 * r + 1) as usize;
    let mut scores = vec![f64::NEG_INFINITY; side * side * side];
    for &origin in origins {
        let o_i64 = [origin[0] as i64, origin[1] as i64, origin[2] as i64];
        if let Some(v) = src_valid {
            if !block_fully_valid(v, o_i64, b) {
                continue;
            }
        }
        // require the full search neighborhood to be valid so that the true
        // peak is never excluded from the candidate set
        if let Some(v) = dst_valid {
            let lo = [o_i64[0] - r, o_i64[1] - r, o_i64[2] - r];
            if !block_fully_valid(v, lo, b + 2 * r as usize) {
                continue;
            }
        }
        if !block_values(src, o_i64, b, &mut sv) {
            continue;
        }
        // zero-variance source blocks are skipped, not an error
        if ncc_slices(&sv, &sv).is_none() {
            continue;
        }
        scores.iter_mut().for_each(|s| *s = f64::NEG_INFINITY);
        let mut best = f64::NEG_INFINITY;
        let mut best_off = [0i64; 3];
        for oz in -r..=r {
            for oy in -r..=r {
                for ox in -r..=r {
                    let cand = [
                        origin[0] as i64 + ox,
                        origin[1] as i64 + oy,
                        origin[2] as i64 + oz,
                    ];
                    if !block_values(dst, cand, b, &mut dv) {
                        continue;
                    }
                    if let Some(s) = ncc_slices(&sv, &dv) {
                        let idx = ((oz + r) as usize * side + (oy + r) as usize) * side
                            + (ox + r) as usize;
                        scores[idx] = s;
                        if s > best {
                            best = s;
                            best_off = [ox, oy, oz];
                        }
                    }
                }
            }
        }
        if !best.is_finite() {
            continue;
        }
        // sub-voxel parabola refinement per axis around the integer peak
        let mut off = [best_off[0] as f64, best_off[1] as f64, best_off[2] as f64];
        for axis in 0..3 {
            if best_off[axis].abs() >= r {
                continue;
            }
            let at = |d: i64| {
                let mut o = best_off;
                o[axis] += d;
                scores[((o[2] + r) as usize * side + (o[1] + r) as usize) * side
                    + (o[0] + r) as usize]
            };
            let (sm, s0, sp) = (at(-1), at(0), at(1));
            if sm.is_finite() && sp.is_finite() {
                let denom = sm - 2.0 * s0 + sp;
                if denom < -1e-12 {
                    off[axis] += (0.5 * (sm - sp) / denom).clamp(-0.5, 0.5);
                }
            }
        }
        let half = (b as f64 - 1.0) / 2.0;
        let c_src = [
            origin[0] as f64 + half,
            origin[1] as f64 + half,
            origin[2] as f64 + half,
        ];
        // sub-voxel descent on the uniformly interpolated score (see
        // `FracRefine`); falls back to the parabola estimate if the block
        // cannot be scored that way
        if let Some(rf) = refine {
            match direction {
                MatchDirection::Forward => {
                    // sv is a ref-grid block: refine the floating-side offset.
                    // The descent starts from the integer peak, not the
                    // parabola estimate, so an exact integer match stays
                    // exactly integer
                    off = [best_off[0] as f64, best_off[1] as f64, best_off[2] as f64];
                    refine_offset_frac(
                        |d| ncc_through_transform(rf, &geom, o_i64, b, &sv, d, &mut dv),
                        &mut off,
                    );
                }
                MatchDirection::Backward => {
                    // src is the warped image; re-anchor on the matched
                    // integer reference block and refine the floating side,
                    // so the fractional scoring is identical to forward
                    let q = [
                        o_i64[0] + best_off[0],
                        o_i64[1] + best_off[1],
                        o_i64[2] + best_off[2],
                    ];
                    if block_values(dst, q, b, &mut rv) && ncc_slices(&rv, &rv).is_some() {
                        let mut eps = [0.0f64; 3];
                        refine_offset_frac(
                            |d| ncc_through_transform(rf, &geom, o_i64, b, &rv, d, &mut dv),
                            &mut eps,
                        );
                        let c_ref = [
                            q[0] as f64 + half,
                            q[1] as f64 + half,
                            q[2] as f64 + half,
                        ];
                        let c_match =
                            [c_src[0] + eps[0], c_src[1] + eps[1], c_src[2] + eps[2]];
                        out.push(BlockCorrespondence {
                            ref_center: geom.voxel_to_world(c_ref),
                            matched_center: geom.voxel_to_world(c_match),
                            score: best,
                            direction,
                        });
                        continue;
                    }
                }
            }
        }
        let c_dst = [c_src[0] + off[0], c_src[1] + off[1], c_src[2] + off[2]];
        let (ref_center, matched_center) = match direction {
            MatchDirection::Forward => (geom.voxel_to_world(c_src), geom.voxel_to_world(c_dst)),
            // backward: dst is the reference image; invert the displacement
            // by swapping roles of the pair
            MatchDirection::Backward => (geom.voxel_to_world(c_dst), geom.voxel_to_world(c_src)),
        };
        out.push(BlockCorrespondence { ref_center, matched_center, score: best, direction });
    }
}

/// Symmetric block matching: forward (ref blocks searched in flt) plus
/// backward (flt blocks searched in ref, displacements inverted).
pub fn match_blocks<T: Scalar>(
    reference: &Volume3<T>,
    floating: &Volume3<T>,
    floating_valid: Option<&Mask3>,
    blocks: &[[usize; 3]],
    cfg: &AffineRegConfig,
    refine: Option<&FracRefine<'_, T>>,
) -> Result<Vec<BlockCorrespondence>> {
    reference.geom().check_same_grid(floating.geom(), "match_blocks")?;
    let mut out = Vec::with_capacity(blocks.len() * 2);
    match_one_direction(
        reference,
        floating,
        None,
        floating_valid,
        blocks,
        cfg,
        MatchDirection::Forward,
        refine,
        &mut out,
    );
    match_one_direction(
        floating,
        reference,
        floating_valid,
        None,
        blocks,
        cfg,
        MatchDirection::Backward,
        refine,
        &mut out,
    );
    if out.is_empty() {
        return Err(McError::Degenerate("no block correspondences found".into()));
    }
    Ok(out)
}

fn fit_affine_ls(corr: &[&BlockCorrespondence]) -> Result<AffineTransform> {
    if corr.len() < 4 {
        return Err(McError::Degenerate(format!(
            "need >= 4 correspondences, have {}",
            corr.len()
        )));
    }
    let mut m = Matrix4::<f64>::zeros();
    let mut rhs = [Vector4::<f64>::zeros(); 3];
    for c in corr {
        let q = Vector4::new(c.ref_center[0], c.ref_center[1], c.ref_center[2], 1.0);
        m += q * q.transpose();
        for (axis, r) in rhs.iter_mut().enumerate() {
            *r += q * c.matched_center[axis];
        }
    }
    let svd = m.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin <= 1e-10 * smax.max(1.0) {
        return Err(McError::Degenerate(
            "coplanar/degenerate correspondence geometry".into(),
        ));
    }
    let mut out = [[0.0f64; 4]; 3];
    for (axis, r) in rhs.iter().enumerate() {
        let sol = svd
            .solve(r, 1e-12)
            .map_err(|e| McError::Degenerate(format!("affine solve failed: {e}")))?;
        for c in 0..4 {
            out[axis][c] = sol[c];
        }
    }
    let t = AffineTransform { m: out };
    if !t.is_valid() {
        return Err(McError::Degenerate("singular fitted affine".into()));
    }
    Ok(t)
}

/// Least-trimmed-squares affine fit: iterate full least squares, rank
/// residuals, drop the worst `trim` fraction, refit, until the retained set
/// stabilizes.
pub fn lts_fit_affine(corr: &[BlockCorrespondence], trim: f64) -> Result<AffineTransform> {
    if !(0.0..0.5).contains(&trim) {
        return Err(McError::InvalidArgument("trim must be in [0, 0.5)".into()));
    }
    if corr.len() < 4 {
        return Err(McError::Degenerate(format!(
            "need >= 4 correspondences, have {}",
            corr.len()
        )));
    }
    let keep_n = (((corr.len() as f64) * (1.0 - trim)).ceil() as usize).clamp(4, corr.len());
    let mut retained: Vec<usize> = (0..corr.len()).collect();
    let mut fit = fit_affine_ls(&retained.iter().map(|&i| &corr[i]).collect::<Vec<_>>())?;
    for _ in 0..20 {
        let mut resid: Vec<(usize, f64)> = corr
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let p = fit.apply(c.ref_center);
                let d = [
                    p[0] - c.matched_center[0],
                    p[1] - c.matched_center[1],
                    p[2] - c.matched_center[2],
                ];
                (i, d[0] * d[0] + d[1] * d[1] + d[2] * d[2])
            })
            .collect();
        resid.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        let mut next: Vec<usize> = resid[..keep_n].iter().map(|&(i, _)| i).collect();
        next.sort_unstable();
        let new_fit = fit_affine_ls(&next.iter().map(|&i| &corr[i]).collect::<Vec<_>>())?;
        let stable = next == retained;
        retained = next;
        fit = new_fit;
        if stable {
            break;
        }
    }
    Ok(fit)
}

/// Drop correspondences whose block score falls well below the per-direction
/// consensus. Blocks straddling padding or lost field of view match with
/// visibly lower NCC than the bulk, and enough of them can exceed the
/// trimmed fit's breakdown point; the gate is relative so genuinely
/// low-contrast data is untouched.
fn gate_by_score(corr: Vec<BlockCorrespondence>) -> Vec<BlockCorrespondence> {
    let mut median = [f64::NEG_INFINITY; 2];
    for (slot, dir) in [MatchDirection::Forward, MatchDirection::Backward].into_iter().enumerate() {
        let mut s: Vec<f64> =
            corr.iter().filter(|c| c.direction == dir).map(|c| c.score).collect();
        if s.is_empty() {
            continue;
        }
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        median[slot] = s[s.len() / 2];
    }
    let kept: Vec<BlockCorrespondence> = corr
        .iter()
        .filter(|c| {
            let slot = match c.direction {
                MatchDirection::Forward => 0,
                MatchDirection::Backward => 1,
            };
            c.score >= median[slot] - 0.2
        })
        .copied()
        .collect();
    if kept.len() >= 4 {
        kept
    } else {
        corr
    }
}

/// Full multi-resolution affine registration. Returns the transform mapping
/// reference space into floating space (pull-back convention).
pub fn affine_register<T: Scalar>(
    reference: &Volume3<T>,
    floating: &Volume3<T>,
    mask: Option<&Mask3>,
    cfg: &AffineRegConfig,
) -> Result<AffineTransform> {
    cfg.validate()?;
    reference.geom().check_same_grid(floating.geom(), "affine_register")?;
    if let Some(m) = mask {
        reference.geom().check_same_grid(m.geom(), "affine_register mask")?;
    }

    // coarse-to-fine pyramids; a level is dropped if it cannot hold a block
    let mut ref_pyr = vec![reference.clone()];
    let mut flt_pyr = vec![floating.clone()];
    let mut mask_pyr = vec![mask.cloned()];
    for _ in 1..cfg.levels {
        let prev = ref_pyr.last().unwrap();
        let next_dims = prev.dims().map(|d| d.div_ceil(2));
        if next_dims.iter().any(|&d| d < cfg.block_size + 2 * cfg.search_radius as usize) {
            break;
        }
        ref_pyr.push(prev.downsample2());
        flt_pyr.push(flt_pyr.last().unwrap().downsample2());
        mask_pyr.push(mask_pyr.last().unwrap().as_ref().map(|m| m.downsample2()));
    }

    let mut transform = AffineTransform::identity();
    for level in (0..ref_pyr.len()).rev() {
        let r = &ref_pyr[level];
        let f = &flt_pyr[level];
        let m = mask_pyr[level].as_ref();
        let blocks = select_blocks(r, m, cfg)?;
        // the measured update at an iterate is the self-consistency score of
        // that iterate: the matcher's fixed point is the alignment, so keep
        // whichever transform produced the update closest to identity (the
        // last iterate may sit on the oscillation noise floor instead)
        let mut best_dev = f64::INFINITY;
        let mut best_t = transform;
        for _iter in 0..cfg.max_outer_iterations {
            // cubic interpolation: linear resampling blurs with a phase-
            // dependent kernel and biases the sub-voxel peak refinement
            let (warped, valid) = resample_with_valid(
                f,
                &SpatialMapping::affine(transform).with_interpolation(Interpolation::Cubic),
            )?;
            let wg = *warped.geom();
            let wd = wg.dims;
            let valid_mask = Mask3::from_fn(wg, |i, j, k| {
                valid[i + wd[0] * (j + wd[1] * k)] && m.map_or(true, |mm| mm.get(i, j, k))
            });
            let refine = FracRefine { floating: f, transform: &transform };
            let corr = match match_blocks(r, &warped, Some(&valid_mask), &blocks, cfg, Some(&refine))
            {
                Ok(c) => c,
                Err(_) => break, // keep current best at this level
            };
            let corr = gate_by_score(corr);
            // too few blocks make the 12-DOF fit meaningless
            if corr.len() < 16 {
                break;
            }
            let update = match lts_fit_affine(&corr, cfg.lts_trim_fraction) {
                Ok(u) => u,
                Err(_) => break,
            };
            if !update.is_valid() {
                break;
            }
            // the matcher cannot measure displacements beyond the search
            // range, so a larger update is extrapolated noise: stop and keep
            // the most self-consistent iterate instead of diverging
            let max_tr = (cfg.search_radius as f64 + 0.5)
                * r.spacing().iter().cloned().fold(0.0f64, f64::max);
            if update.translation_part().iter().any(|t| t.abs() > max_tr) {
                break;
            }
            let dev = update.deviation_from_identity();
            if dev < best_dev {
                best_dev = dev;
                best_t = transform;
            }
            transform = transform.compose(&update);
            if !transform.is_valid() {
                return Err(McError::Degenerate("non-finite/singular transform".into()));
            }
            if dev < cfg.convergence_tol {
                // converged: the freshly composed transform absorbs the
                // (sub-tolerance) update and is the best estimate
                best_t = transform;
                break;
            }
        }
        transform = best_t;
    }
    Ok(transform)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transform::resample;
    use crate::volume::Geometry;
    use rand::{Rng, SeedableRng};

    fn textured(dim: usize, seed: u64) -> Volume3<f32> {
        let g = Geometry::isotropic([dim, dim, dim]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let noise = Volume3::from_fn(g, |_, _, _| rng.gen::<f32>());
        noise.gaussian_smooth(1.2)
    }

    #[test]
    fn select_blocks_constant_volume_deterministic_ties() {
        let vol = Volume3::filled(Geometry::isotropic([16, 16, 16]), 1.0f32);
        let cfg = AffineRegConfig::default();
        let a = select_blocks(&vol, None, &cfg).unwrap();
        let b = select_blocks(&vol, None, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 32); // 64 tiles, keep 0.5
    }

    #[test]
    fn select_blocks_prefers_textured_octant() {
        let g = Geometry::isotropic([16, 16, 16]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let vol = Volume3::from_fn(g, |i, j, k| {
            if i < 8 && j < 8 && k < 8 {
                rng.gen::<f32>()
            } else {
                0.0
            }
        });
        let cfg = AffineRegConfig { block_keep_fraction: 0.1, ..Default::default() };
        let blocks = select_blocks(&vol, None, &cfg).unwrap();
        // 8 textured tiles exist; keep fraction 0.1 of 64 = 7 blocks
        for o in &blocks {
            assert!(o[0] < 8 && o[1] < 8 && o[2] < 8, "block {o:?} outside textured octant");
        }
        // direct variance-ranking oracle: every selected block must beat
        // every unselected textured-octant-external block (variance 0)
        for o in &blocks {
            let (_, var) = super::block_stats(&vol, *o, 4);
            assert!(var > 0.0);
        }
    }

    #[test]
    fn select_blocks_empty_mask_errors() {
        let vol = textured(16, 1);
        let mask = Mask3::from_fn(*vol.geom(), |_, _, _| false);
        assert!(select_blocks(&vol, Some(&mask), &AffineRegConfig::default()).is_err());
    }

    #[test]
    fn match_blocks_identity_gives_zero_displacements() {
        let vol = textured(16, 3);
        let cfg = AffineRegConfig::default();
        let blocks = select_blocks(&vol, None, &cfg).unwrap();
        let corr = match_blocks(&vol, &vol, None, &blocks, &cfg, None).unwrap();
        // the integer peak is exact (|d| < 0.5); sub-voxel parabola
        // refinement can wander on flat peaks, but must be unbiased
        let mut sum = [0.0f64; 3];
        for c in &corr {
            for a in 0..3 {
                let d = c.matched_center[a] - c.ref_center[a];
                assert!(d.abs() < 0.5, "integer peak moved: {c:?}");
                sum[a] += d;
            }
        }
        for a in 0..3 {
            let mean = sum[a] / corr.len() as f64;
            assert!(mean.abs() < 0.05, "axis {a} mean displacement {mean}");
        }
    }

    #[test]
    fn match_blocks_recovers_integer_shift() {
        // content moved +2 voxels in x: flt(x) = ref(x - 2)
        let refv = textured(20, 4);
        let g = *refv.geom();
        let flt = Volume3::from_fn(g, |i, j, k| if i >= 2 { refv.get(i - 2, j, k) } else { 0.0 });
        let cfg = AffineRegConfig::default();
        let blocks = select_blocks(&refv, None, &cfg).unwrap();
        let mut corr = Vec::new();
        super::match_one_direction(&refv, &flt, None, None, &blocks, &cfg, MatchDirection::Forward, None, &mut corr);
        let mut n_ok = 0;
        let mut n = 0;
        for c in &corr {
            // exhaustive-search oracle says the best match sits +2 in x
            // (interior blocks only; boundary blocks see the padding band)
            if c.ref_center[0] > 4.0 && c.ref_center[0] < 14.0 {
                n += 1;
                if (c.matched_center[0] - c.ref_center[0] - 2.0).abs() < 0.3
                    && (c.matched_center[1] - c.ref_center[1]).abs() < 0.3
                {
                    n_ok += 1;
                }
            }
        }
        assert!(n > 0 && n_ok as f64 >= 0.9 * n as f64, "{n_ok}/{n} blocks found the shift");
    }

    #[test]
    fn symmetric_passes_agree_on_pure_translation() {
        let refv = textured(20, 5);
        let g = *refv.geom();
        let flt = Volume3::from_fn(g, |i, j, k| if i >= 2 { refv.get(i - 2, j, k) } else { 0.0 });
        let cfg = AffineRegConfig::default();
        let blocks = select_blocks(&refv, None, &cfg).unwrap();
        let corr = match_blocks(&refv, &flt, None, &blocks, &cfg, None).unwrap();
        let mean_disp = |dir: MatchDirection| {
            let sel: Vec<_> = corr
                .iter()
                // score filter drops blocks straddling the synthetic zero
                // band, which have no true correspondence in either image
                .filter(|c| {
                    c.direction == dir
                        && c.score > 0.8
                        && c.ref_center[0] > 4.0
                        && c.ref_center[0] < 14.0
                })
                .collect();
            let s: f64 = sel.iter().map(|c| c.matched_center[0] - c.ref_center[0]).sum();
            s / sel.len() as f64
        };
        let fwd = mean_disp(MatchDirection::Forward);
        let bwd = mean_disp(MatchDirection::Backward);
        assert!((fwd - bwd).abs() < 0.3, "forward {fwd} vs inverted-backward {bwd}");
    }

    fn synth_corr(t: &AffineTransform, n: usize, seed: u64) -> Vec<BlockCorrespondence> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let p = [
                    rng.gen::<f64>() * 20.0,
                    rng.gen::<f64>() * 20.0,
                    rng.gen::<f64>() * 20.0,
                ];
                BlockCorrespondence {
                    ref_center: p,
                    matched_center: t.apply(p),
                    score: 1.0,
                    direction: MatchDirection::Forward,
                }
            })
            .collect()
    }

    #[test]
    fn lts_recovers_exact_affine_noiseless() {
        let t = AffineTransform::from_linear(
            [[1.03, 0.01, -0.02], [0.0, 0.97, 0.01], [0.02, 0.0, 1.01]],
            [1.2, -0.8, 2.0],
        );
        let corr = synth_corr(&t, 100, 7);
        let fit = lts_fit_affine(&corr, 0.10).unwrap();
        for r in 0..3 {
            for c in 0..4 {
                assert!((fit.m[r][c] - t.m[r][c]).abs() < 1e-6, "entry ({r},{c})");
            }
        }
    }

    #[test]
    fn lts_withstands_gross_outliers_where_naive_fit_fails() {
        let t = AffineTransform::from_linear(
            [[1.02, 0.0, 0.0], [0.01, 1.0, -0.01], [0.0, 0.02, 0.99]],
            [0.5, 1.0, -1.5],
        );
        let mut corr = synth_corr(&t, 100, 8);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for c in corr.iter_mut().take(10) {
            // 10% gross outliers: random large displacements
            for a in 0..3 {
                c.matched_center[a] += 30.0 + rng.gen::<f64>() * 40.0;
            }
        }
        let lts = lts_fit_affine(&corr, 0.10).unwrap();
        let naive = lts_fit_affine(&corr, 0.0).unwrap();
        let err = |f: &AffineTransform| {
            let mut e = 0.0f64;
            for r in 0..3 {
                for c in 0..4 {
                    e = e.max((f.m[r][c] - t.m[r][c]).abs());
                }
            }
            e
        };
        assert!(err(&lts) < 1e-3, "LTS error {}", err(&lts));
        assert!(err(&naive) > 1e-3, "naive fit unexpectedly robust: {}", err(&naive));
    }

    #[test]
    fn lts_coplanar_points_degenerate() {
        let t = AffineTransform::identity();
        let mut corr = synth_corr(&t, 8, 9);
        for c in &mut corr {
            c.ref_center[2] = 5.0; // all in one plane
            c.matched_center = c.ref_center;
        }
        assert!(lts_fit_affine(&corr, 0.10).is_err());
    }

    #[test]
    fn self_registration_is_identity() {
        let vol = textured(24, 10);
        let t = affine_register(&vol, &vol, None, &AffineRegConfig::default()).unwrap();
        assert!(
            t.deviation_from_identity() < 1e-3,
            "self-registration deviation {}",
            t.deviation_from_identity()
        );
    }

    #[test]
    fn recovers_known_translation() {
        let refv = textured(32, 11);
        let gt = AffineTransform::translation([2.0, 3.0, 1.0]);
        let flt = resample(&refv, &SpatialMapping::affine(gt.inverse().unwrap())).unwrap();
        // pull-back: flt(x) = ref(x - d), so registration should find T = gt
        let t = affine_register(&refv, &flt, None, &AffineRegConfig::default()).unwrap();
        for a in 0..3 {
            assert!(
                (t.m[a][3] - gt.m[a][3]).abs() < 0.25,
                "axis {a}: {} vs {}",
                t.m[a][3],
                gt.m[a][3]
            );
        }
    }

    #[test]
    fn recovers_small_scaling() {
        let refv = textured(32, 12);
        let center = 15.5;
        let s = 1.05;
        let gt = AffineTransform::from_linear(
            [[s, 0.0, 0.0], [0.0, s, 0.0], [0.0, 0.0, s]],
            [center * (1.0 - s), center * (1.0 - s), center * (1.0 - s)],
        );
        let flt = resample(&refv, &SpatialMapping::affine(gt.inverse().unwrap())).unwrap();
        let t = affine_register(&refv, &flt, None, &AffineRegConfig::default()).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                assert!(
                    (t.m[r][c] - gt.m[r][c]).abs() < 0.01,
                    "linear entry ({r},{c}): {} vs {}",
                    t.m[r][c],
                    gt.m[r][c]
                );
            }
        }
    }

    #[test]
    fn determinism_across_runs() {
        let refv = textured(24, 13);
        let g = *refv.geom();
        let flt = Volume3::from_fn(g, |i, j, k| if i >= 1 { refv.get(i - 1, j, k) } else { 0.0 });
        let cfg = AffineRegConfig::default();
        let a = affine_register(&refv, &flt, None, &cfg).unwrap();
        let b = affine_register(&refv, &flt, None, &cfg).unwrap();
        assert_eq!(a.m, b.m, "registration must be bit-deterministic");
    }
}
