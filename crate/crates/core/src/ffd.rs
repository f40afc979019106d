//! Non-rigid registration: cubic B-spline free-form deformation maximizing
//! NMI with bending-energy and log-Jacobian regularization.
//!
//! The deformation is parameterized by control-point displacements (mm) on a
//! uniform lattice (default spacing 5 voxels at full resolution, dyadic
//! refinement across levels). The objective
//!
//!   F = (1 - wb - wj) * NMI  -  wb * BE  -  wj * LJ
//!
//! is maximized by conjugate-gradient ascent with backtracking line search;
//! any step that folds the deformation (det J <= 0 at a voxel sample) is
//! rejected outright. Field evaluation and all gradients go through
//! separable tensor-product passes, so one objective+gradient evaluation is
//! O(voxels), not O(voxels * 64).

use crate::error::{McError, Result};
use crate::scalar::Scalar;
use crate::similarity::{
    bspline3, bspline3_deriv, bspline3_deriv2, joint_histogram_pairs, nmi, nmi_gradient_pairs,
};
use crate::transform::{AffineTransform, DisplacementField};
use crate::volume::{Geometry, Mask3, Volume3};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FfdConfig {
    pub bins: usize,
    /// Control-point spacing in voxels at the full resolution.
    pub spacing: f64,
    pub bending_weight: f64,
    pub log_jacobian_weight: f64,
    pub levels: usize,
    pub max_iterations_per_level: usize,
    /// Relative objective improvement below which a level is converged.
    pub objective_tol: f64,
}

impl Default for FfdConfig {
    fn default() -> Self {
        Self {
            bins: 64,
            spacing: 5.0,
            bending_weight: 0.3,
            log_jacobian_weight: 0.1,
            levels: 3,
            max_iterations_per_level: 300,
            objective_tol: 1e-6,
        }
    }
}

impl FfdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 {
            return Err(McError::InvalidArgument("bins must be >= 2".into()));
        }
        if !(self.spacing >= 1.0) {
            return Err(McError::InvalidArgument("control spacing must be >= 1 voxel".into()));
        }
        if self.bending_weight < 0.0 || self.log_jacobian_weight < 0.0 {
            return Err(McError::InvalidArgument("penalty weights must be >= 0".into()));
        }
        if self.bending_weight + self.log_jacobian_weight >= 1.0 {
            return Err(McError::InvalidArgument(
                "bending_weight + log_jacobian_weight must stay below 1".into(),
            ));
        }
        if self.levels < 1 {
            return Err(McError::InvalidArgument("levels must be >= 1".into()));
        }
        Ok(())
    }

    fn similarity_weight(&self) -> f64 {
        1.0 - self.bending_weight - self.log_jacobian_weight
    }
}

/// Control-point displacement lattice over a reference grid. Control point
/// (0,0,0) sits at voxel coordinate -spacing, so the lattice covers the
/// image domain plus a one-knot margin on every side.
#[derive(Debug, Clone)]
pub struct BSplineGrid {
    /// Spacing in reference voxels, per axis.
    pub control_spacing: [f64; 3],
    pub control_dims: [usize; 3],
    /// Displacements in mm, one plane per component, x-fastest control order.
    pub disp: [Vec<f64>; 3],
    pub ref_geom: Geometry,
    /// Affine initialization composed into the total mapping.
    pub init_affine: Option<AffineTransform>,
}

fn control_dims_for(dims: [usize; 3], spacing: [f64; 3]) -> [usize; 3] {
    [
        ((dims[0] - 1) as f64 / spacing[0]).floor() as usize + 4,
        ((dims[1] - 1) as f64 / spacing[1]).floor() as usize + 4,
        ((dims[2] - 1) as f64 / spacing[2]).floor() as usize + 4,
    ]
}

impl BSplineGrid {
    pub fn zero(ref_geom: Geometry, spacing: [f64; 3]) -> Self {
        let control_dims = control_dims_for(ref_geom.dims, spacing);
        let n = control_dims[0] * control_dims[1] * control_dims[2];
        Self {
            control_spacing: spacing,
            control_dims,
            disp: [vec![0.0; n], vec![0.0; n], vec![0.0; n]],
            ref_geom,
            init_affine: None,
        }
    }

    pub fn n_control_points(&self) -> usize {
        self.control_dims.iter().product()
    }

    #[inline]
    pub fn control_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.control_dims[0] * (j + self.control_dims[1] * k)
    }

    /// Voxel coordinate of a control point.
    pub fn control_position(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            (i as f64 - 1.0) * self.control_spacing[0],
            (j as f64 - 1.0) * self.control_spacing[1],
            (k as f64 - 1.0) * self.control_spacing[2],
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.disp.iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    /// Direct 64-tap evaluation at a continuous voxel coordinate (mm result).
    /// Used for level-to-level initialization and point probes; bulk
    /// evaluation goes through the separable passes.
    pub fn eval_at_voxel(&self, p: [f64; 3]) -> [f64; 3] {
        let mut base = [0i64; 3];
        let mut w = [[0.0f64; 4]; 3];
        for a in 0..3 {
            let t = p[a] / self.control_spacing[a] + 1.0;
            let b = (t.floor() as i64 - 1).clamp(0, self.control_dims[a] as i64 - 4);
            for o in 0..4 {
                w[a][o] = bspline3(t - (b + o as i64) as f64);
            }
            base[a] = b;
        }
        let mut out = [0.0f64; 3];
        for oz in 0..4 {
            for oy in 0..4 {
                let wyz = w[1][oy] * w[2][oz];
                for ox in 0..4 {
                    let c = self.control_index(
                        (base[0] + ox as i64) as usize,
                        (base[1] + oy as i64) as usize,
                        (base[2] + oz as i64) as usize,
                    );
                    let www = w[0][ox] * wyz;
                    for d in 0..3 {
                        out[d] += www * self.disp[d][c];
                    }
                }
            }
        }
        out
    }
}

/// Per-axis B-spline basis tables sampled at the voxel centers of a grid.
struct AxisBasis {
    base: Vec<usize>,
    w: Vec<[f64; 4]>,
    dw: Vec<[f64; 4]>,
    d2w: Vec<[f64; 4]>,
}

impl AxisBasis {
    fn new(dim: usize, spacing: f64, n_cp: usize) -> Self {
        let mut base = Vec::with_capacity(dim);
        let mut w = Vec::with_capacity(dim);
        let mut dw = Vec::with_capacity(dim);
        let mut d2w = Vec::with_capacity(dim);
        for i in 0..dim {
            let t = i as f64 / spacing + 1.0;
            let b = t.floor() as i64 - 1;
            debug_assert!(b >= 0 && b + 3 < n_cp as i64);
            let mut wi = [0.0; 4];
            let mut dwi = [0.0; 4];
            let mut d2wi = [0.0; 4];
            for o in 0..4 {
                let x = t - (b + o as i64) as f64;
                wi[o] = bspline3(x);
                dwi[o] = bspline3_deriv(x) / spacing;
                d2wi[o] = bspline3_deriv2(x) / (spacing * spacing);
            }
            base.push(b as usize);
            w.push(wi);
            dw.push(dwi);
            d2w.push(d2wi);
        }
        Self { base, w, dw, d2w }
    }
}

// ---- separable tensor-product passes -----------------------------------

/// in: [ic + ncx*q] -> out: [x + nx*q]
fn fwd_x(inp: &[f64], ncx: usize, n_rest: usize, ax: &AxisBasis, w: &[[f64; 4]], out: &mut Vec<f64>) {
    let nx = ax.base.len();
    out.clear();
    out.resize(nx * n_rest, 0.0);
    for q in 0..n_rest {
        let src = &inp[ncx * q..ncx * (q + 1)];
        let dst = &mut out[nx * q..nx * (q + 1)];
        for (x, d) in dst.iter_mut().enumerate() {
            let b = ax.base[x];
            let ww = &w[x];
            *d = ww[0] * src[b] + ww[1] * src[b + 1] + ww[2] * src[b + 2] + ww[3] * src[b + 3];
        }
    }
}

/// in: [x + nx*(jc + ncy*kc)] -> out: [x + nx*(y + ny*kc)]
fn fwd_y(
    inp: &[f64],
    nx: usize,
    ncy: usize,
    n_kc: usize,
    ax: &AxisBasis,
    w: &[[f64; 4]],
    out: &mut Vec<f64>,
) {
    let ny = ax.base.len();
    out.clear();
    out.resize(nx * ny * n_kc, 0.0);
    for kc in 0..n_kc {
        for y in 0..ny {
            let b = ax.base[y];
            let ww = &w[y];
            let dst = &mut out[nx * (y + ny * kc)..nx * (y + ny * kc) + nx];
            for o in 0..4 {
                let src = &inp[nx * (b + o + ncy * kc)..nx * (b + o + ncy * kc) + nx];
                let c = ww[o];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += c * s;
                }
            }
        }
    }
}

/// in: [x + nx*(y + ny*kc)] -> out: [x + nx*(y + ny*z)]
fn fwd_z(
    inp: &[f64],
    nxy: usize,
    _ncz: usize,
    ax: &AxisBasis,
    w: &[[f64; 4]],
    out: &mut Vec<f64>,
) {
    let nz = ax.base.len();
    out.clear();
    out.resize(nxy * nz, 0.0);
    for z in 0..nz {
        let b = ax.base[z];
        let ww = &w[z];
        let dst = &mut out[nxy * z..nxy * (z + 1)];
        for o in 0..4 {
            let src = &inp[nxy * (b + o)..nxy * (b + o) + nxy];
            let c = ww[o];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += c * s;
            }
        }
    }
}

/// Adjoint of fwd_z: coeff [x+nx*(y+ny*z)] -> [x + nx*(y + ny*kc)]
fn adj_z(coeff: &[f64], nxy: usize, ncz: usize, ax: &AxisBasis, w: &[[f64; 4]], out: &mut Vec<f64>) {
    let nz = ax.base.len();
    out.clear();
    out.resize(nxy * ncz, 0.0);
    for z in 0..nz {
        let b = ax.base[z];
        let ww = &w[z];
        let src = &coeff[nxy * z..nxy * (z + 1)];
        for o in 0..4 {
            let c = ww[o];
            if c == 0.0 {
                continue;
            }
            let dst = &mut out[nxy * (b + o)..nxy * (b + o) + nxy];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += c * s;
            }
        }
    }
}

/// Adjoint of fwd_y: [x + nx*(y + ny*kc)] -> [x + nx*(jc + ncy*kc)]
fn adj_y(
    inp: &[f64],
    nx: usize,
    ny: usize,
    ncy: usize,
    n_kc: usize,
    ax: &AxisBasis,
    w: &[[f64; 4]],
    out: &mut Vec<f64>,
) {
    out.clear();
    out.resize(nx * ncy * n_kc, 0.0);
    for kc in 0..n_kc {
        for y in 0..ny {
            let b = ax.base[y];
            let ww = &w[y];
            let src = &inp[nx * (y + ny * kc)..nx * (y + ny * kc) + nx];
            for o in 0..4 {
                let c = ww[o];
                if c == 0.0 {
                    continue;
                }
                let dst = &mut out[nx * (b + o + ncy * kc)..nx * (b + o + ncy * kc) + nx];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += c * s;
                }
            }
        }
    }
}

/// Adjoint of fwd_x: [x + nx*q] -> [ic + ncx*q]
fn adj_x(inp: &[f64], nx: usize, ncx: usize, n_rest: usize, ax: &AxisBasis, w: &[[f64; 4]], out: &mut [f64]) {
    debug_assert_eq!(out.len(), ncx * n_rest);
    for q in 0..n_rest {
        let src = &inp[nx * q..nx * (q + 1)];
        let dst = &mut out[ncx * q..ncx * (q + 1)];
        for (x, s) in src.iter().enumerate() {
            let b = ax.base[x];
            let ww = &w[x];
            dst[b] += ww[0] * s;
            dst[b + 1] += ww[1] * s;
            dst[b + 2] += ww[2] * s;
            dst[b + 3] += ww[3] * s;
        }
    }
}

// ---- field evaluation helpers ------------------------------------------

struct FieldBases {
    ax: AxisBasis,
    ay: AxisBasis,
    az: AxisBasis,
    dims: [usize; 3],
    ncp: [usize; 3],
}

impl FieldBases {
    fn for_grid(grid: &BSplineGrid) -> Self {
        Self::new(grid.ref_geom.dims, grid.control_spacing, grid.control_dims)
    }

    fn new(dims: [usize; 3], spacing: [f64; 3], ncp: [usize; 3]) -> Self {
        Self {
            ax: AxisBasis::new(dims[0], spacing[0], ncp[0]),
            ay: AxisBasis::new(dims[1], spacing[1], ncp[1]),
            az: AxisBasis::new(dims[2], spacing[2], ncp[2]),
            dims,
            ncp,
        }
    }

    /// Value of one displacement component at all voxels.
    fn value(&self, plane: &[f64]) -> Vec<f64> {
        self.derive(plane, [0, 0, 0])
    }

    /// Mixed partial derivative (orders per axis, each 0..=2) of one
    /// component at all voxels, in mm per voxel^order.
    fn derive(&self, plane: &[f64], order: [u8; 3]) -> Vec<f64> {
        let wx = match order[0] {
            0 => &self.ax.w,
            1 => &self.ax.dw,
            _ => &self.ax.d2w,
        };
        let wy = match order[1] {
            0 => &self.ay.w,
            1 => &self.ay.dw,
            _ => &self.ay.d2w,
        };
        let wz = match order[2] {
            0 => &self.az.w,
            1 => &self.az.dw,
            _ => &self.az.d2w,
        };
        let [nx, ny, _] = self.dims;
        let mut p1 = Vec::new();
        let mut p2 = Vec::new();
        let mut p3 = Vec::new();
        fwd_x(plane, self.ncp[0], self.ncp[1] * self.ncp[2], &self.ax, wx, &mut p1);
        fwd_y(&p1, nx, self.ncp[1], self.ncp[2], &self.ay, wy, &mut p2);
        fwd_z(&p2, nx * ny, self.ncp[2], &self.az, wz, &mut p3);
        p3
    }

    /// Adjoint: scatter a per-voxel coefficient field into control space.
    fn scatter(&self, coeff: &[f64], order: [u8; 3], out: &mut [f64]) {
        let wx = match order[0] {
            0 => &self.ax.w,
            1 => &self.ax.dw,
            _ => &self.ax.d2w,
        };
        let wy = match order[1] {
            0 => &self.ay.w,
            1 => &self.ay.dw,
            _ => &self.ay.d2w,
        };
        let wz = match order[2] {
            0 => &self.az.w,
            1 => &self.az.dw,
            _ => &self.az.d2w,
        };
        let [nx, ny, _] = self.dims;
        let mut b1 = Vec::new();
        let mut b2 = Vec::new();
        adj_z(coeff, nx * ny, self.ncp[2], &self.az, wz, &mut b1);
        adj_y(&b1, nx, ny, self.ncp[1], self.ncp[2], &self.ay, wy, &mut b2);
        adj_x(&b2, nx, self.ncp[0], self.ncp[1] * self.ncp[2], &self.ax, wx, out);
    }
}

/// Materialize the pure B-spline displacement field (mm) on the reference
/// grid. The affine initialization is NOT composed here; see
/// [`grid_to_mapping`].
pub fn evaluate_field(grid: &BSplineGrid) -> DisplacementField {
    let bases = FieldBases::for_grid(grid);
    let ux = bases.value(&grid.disp[0]);
    let uy = bases.value(&grid.disp[1]);
    let uz = bases.value(&grid.disp[2]);
    let n = grid.ref_geom.len();
    let mut disp = Vec::with_capacity(n);
    for i in 0..n {
        disp.push([ux[i], uy[i], uz[i]]);
    }
    DisplacementField { geom: grid.ref_geom, disp }
}

/// Dense mapping for pull-back resampling of the total transform
/// x -> A(x + u(x)), expressed as a displacement d(x) = A(x + u(x)) - x.
pub fn grid_to_mapping(grid: &BSplineGrid) -> DisplacementField {
    let mut field = evaluate_field(grid);
    let affine = grid.init_affine.unwrap_or_else(AffineTransform::identity);
    let geom = grid.ref_geom;
    let mut idx = 0usize;
    for k in 0..geom.dims[2] {
        for j in 0..geom.dims[1] {
            for i in 0..geom.dims[0] {
                let w = geom.voxel_to_world([i as f64, j as f64, k as f64]);
                let u = field.disp[idx];
                let y = affine.apply([w[0] + u[0], w[1] + u[1], w[2] + u[2]]);
                field.disp[idx] = [y[0] - w[0], y[1] - w[1], y[2] - w[2]];
                idx += 1;
            }
        }
    }
    field
}

const PAIRS: [([u8; 3], f64); 6] = [
    ([2, 0, 0], 1.0),
    ([0, 2, 0], 1.0),
    ([0, 0, 2], 1.0),
    ([1, 1, 0], 2.0),
    ([1, 0, 1], 2.0),
    ([0, 1, 1], 2.0),
];

/// Thin-plate bending energy: mean over voxels of the sum of squared second
/// derivatives (cross terms doubled) of all displacement components,
/// derivatives taken with respect to voxel coordinates.
pub fn bending_energy(grid: &BSplineGrid) -> f64 {
    let bases = FieldBases::for_grid(grid);
    let n = grid.ref_geom.len() as f64;
    let mut total = 0.0;
    for plane in &grid.disp {
        for (order, mult) in PAIRS {
            let d = bases.derive(plane, order);
            total += mult * d.iter().map(|v| v * v).sum::<f64>();
        }
    }
    total / n
}

/// Mean of (log det J)^2 over voxel centers for the mapping x + u(x) in
/// voxel coordinates; +inf if the deformation folds anywhere.
pub fn log_jacobian_penalty(grid: &BSplineGrid) -> f64 {
    let bases = FieldBases::for_grid(grid);
    let sp = grid.ref_geom.spacing;
    let mut partials: Vec<Vec<f64>> = Vec::with_capacity(9);
    for plane in &grid.disp {
        for axis in 0..3 {
            let mut order = [0u8; 3];
            order[axis] = 1;
            partials.push(bases.derive(plane, order));
        }
    }
    let n = grid.ref_geom.len();
    let mut acc = 0.0;
    for v in 0..n {
        let mut j = [[0.0f64; 3]; 3];
        for (a, row) in j.iter_mut().enumerate() {
            for (b, e) in row.iter_mut().enumerate() {
                *e = partials[3 * a + b][v] / sp[a];
                if a == b {
                    *e += 1.0;
                }
            }
        }
        let det = det3(&j);
        if det <= 0.0 {
            return f64::INFINITY;
        }
        let l = det.ln();
        acc += l * l;
    }
    acc / n as f64
}

#[inline]
fn det3(j: &[[f64; 3]; 3]) -> f64 {
    j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
        - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
        + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0])
}

#[inline]
fn cofactor3(j: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    [
        [
            j[1][1] * j[2][2] - j[1][2] * j[2][1],
            -(j[1][0] * j[2][2] - j[1][2] * j[2][0]),
            j[1][0] * j[2][1] - j[1][1] * j[2][0],
        ],
        [
            -(j[0][1] * j[2][2] - j[0][2] * j[2][1]),
            j[0][0] * j[2][2] - j[0][2] * j[2][0],
            -(j[0][0] * j[2][1] - j[0][1] * j[2][0]),
        ],
        [
            j[0][1] * j[1][2] - j[0][2] * j[1][1],
            -(j[0][0] * j[1][2] - j[0][2] * j[1][0]),
            j[0][0] * j[1][1] - j[0][1] * j[1][0],
        ],
    ]
}

/// One objective evaluation over a fixed level.
struct EvalOut {
    objective: f64,
    nmi_value: f64,
    bending: f64,
    log_jacobian: f64,
    folded: bool,
    grad: Option<[Vec<f64>; 3]>,
}

struct LevelEngine<'a, T: Scalar> {
    reference: &'a Volume3<T>,
    floating: &'a Volume3<T>,
    mask: Option<&'a Mask3>,
    bases: FieldBases,
    affine: AffineTransform,
    bins: usize,
    ref_range: (f64, f64),
    flt_range: (f64, f64),
    ws: f64,
    wb: f64,
    wj: f64,
}

impl<'a, T: Scalar> LevelEngine<'a, T> {
    fn new(
        reference: &'a Volume3<T>,
        floating: &'a Volume3<T>,
        mask: Option<&'a Mask3>,
        grid: &BSplineGrid,
        affine: AffineTransform,
        cfg: &FfdConfig,
    ) -> Result<Self> {
        // intensity ranges are fixed for the whole level
        let mut rlo = f64::INFINITY;
        let mut rhi = f64::NEG_INFINITY;
        for (idx, v) in reference.data().iter().enumerate() {
            if mask.map(|m| m.data()[idx]).unwrap_or(true) {
                let v = v.as_f64();
                rlo = rlo.min(v);
                rhi = rhi.max(v);
            }
        }
        let (flo, fhi) = floating.min_max();
        if !(rhi > rlo) || !(fhi > flo) {
            return Err(McError::Degenerate("constant image in FFD similarity".into()));
        }
        Ok(Self {
            reference,
            floating,
            mask,
            bases: FieldBases::for_grid(grid),
            affine,
            bins: cfg.bins,
            ref_range: (rlo, rhi),
            flt_range: (flo, fhi),
            ws: cfg.similarity_weight(),
            wb: cfg.bending_weight,
            wj: cfg.log_jacobian_weight,
        })
    }

    fn eval(&self, disp: &[Vec<f64>; 3], want_grad: bool) -> Result<EvalOut> {
        let geom = *self.reference.geom();
        let n = geom.len();
        let sp = geom.spacing;

        // displacement value and first partials (mm per voxel-unit)
        let u: Vec<Vec<f64>> = disp.iter().map(|p| self.bases.value(p)).collect();
        let mut partials: Vec<Vec<f64>> = Vec::with_capacity(9);
        for plane in disp {
            for axis in 0..3 {
                let mut order = [0u8; 3];
                order[axis] = 1;
                partials.push(self.bases.derive(plane, order));
            }
        }

        // log-Jacobian penalty and cofactor coefficients
        let mut lj = 0.0;
        let mut folded = false;
        let mut lj_coeff: Vec<Vec<f64>> = if want_grad && self.wj > 0.0 {
            (0..9).map(|_| vec![0.0; n]).collect()
        } else {
            Vec::new()
        };
        if self.wj > 0.0 {
            for v in 0..n {
                let mut jm = [[0.0f64; 3]; 3];
                for (a, row) in jm.iter_mut().enumerate() {
                    for (b, e) in row.iter_mut().enumerate() {
                        *e = partials[3 * a + b][v] / sp[a];
                        if a == b {
                            *e += 1.0;
                        }
                    }
                }
                let det = det3(&jm);
                if det <= 0.0 {
                    folded = true;
                    break;
                }
                let l = det.ln();
                lj += l * l;
                if !lj_coeff.is_empty() {
                    let cof = cofactor3(&jm);
                    let phi = 2.0 * l / det / n as f64;
                    for a in 0..3 {
                        for b in 0..3 {
                            lj_coeff[3 * a + b][v] = phi * cof[a][b] / sp[a];
                        }
                    }
                }
            }
            lj /= n as f64;
        }
        if folded {
            return Ok(EvalOut {
                objective: f64::NEG_INFINITY,
                nmi_value: f64::NAN,
                bending: f64::NAN,
                log_jacobian: f64::INFINITY,
                folded: true,
                grad: None,
            });
        }

        // bending energy
        let mut be = 0.0;
        let mut be_fields: Vec<(usize, [u8; 3], f64, Vec<f64>)> = Vec::new();
        if self.wb > 0.0 {
            for (d, plane) in disp.iter().enumerate() {
                for (order, mult) in PAIRS {
                    let f = self.bases.derive(plane, order);
                    be += mult * f.iter().map(|v| v * v).sum::<f64>();
                    if want_grad {
                        be_fields.push((d, order, mult, f));
                    }
                }
            }
            be /= n as f64;
        }

        // warp the floating image and collect histogram pairs
        let mut warped = vec![0.0f64; n];
        let mut wgrad = if want_grad { vec![[0.0f64; 3]; n] } else { Vec::new() };
        let mut contributing: Vec<u32> = Vec::with_capacity(n);
        let d = geom.dims;
        let mut idx = 0usize;
        for k in 0..d[2] {
            for j in 0..d[1] {
                for i in 0..d[0] {
                    let inside = self.mask.map(|m| m.data()[idx]).unwrap_or(true);
                    if inside {
                        let w = geom.voxel_to_world([i as f64, j as f64, k as f64]);
                        let y = self.affine.apply([
                            w[0] + u[0][idx],
                            w[1] + u[1][idx],
                            w[2] + u[2][idx],
                        ]);
                        let p = geom.world_to_voxel(y);
                        let in_fov =
                            (0..3).all(|a| p[a] >= 0.0 && p[a] <= (d[a] - 1) as f64);
                        if in_fov {
                            let (val, g) = self.floating.sample_cubic(p, 0.0);
                            warped[idx] = val;
                            if want_grad {
                                wgrad[idx] = g;
                            }
                            contributing.push(idx as u32);
                        }
                    }
                    idx += 1;
                }
            }
        }
        if contributing.len() < 8 {
            return Err(McError::Degenerate("almost no overlap between images".into()));
        }
        let rdata = self.reference.data();
        let hist = joint_histogram_pairs(
            contributing.iter().map(|&i| (rdata[i as usize].as_f64(), warped[i as usize])),
            self.bins,
            self.ref_range,
            self.flt_range,
        )?;
        let nmi_value = nmi(&hist)?;
        let objective = self.ws * nmi_value - self.wb * be - self.wj * lj;

        let grad = if want_grad {
            let mut g = [vec![0.0; disp[0].len()], vec![0.0; disp[1].len()], vec![0.0; disp[2].len()]];
            // similarity term
            let per_pair = nmi_gradient_pairs(
                contributing.iter().map(|&i| (rdata[i as usize].as_f64(), warped[i as usize])),
                &hist,
            )?;
            let lin = self.affine.linear();
            let mut coeff = [vec![0.0f64; n], vec![0.0f64; n], vec![0.0f64; n]];
            for (&i, gp) in contributing.iter().zip(&per_pair) {
                let i = i as usize;
                let gv = wgrad[i];
                for (dcomp, plane) in coeff.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for a in 0..3 {
                        s += gv[a] / sp[a] * lin[a][dcomp];
                    }
                    plane[i] = self.ws * gp * s;
                }
            }
            for dcomp in 0..3 {
                self.bases.scatter(&coeff[dcomp], [0, 0, 0], &mut g[dcomp]);
            }
            // log-Jacobian term
            if self.wj > 0.0 {
                for a in 0..3 {
                    for b in 0..3 {
                        let mut order = [0u8; 3];
                        order[b] = 1;
                        let coeff: Vec<f64> =
                            lj_coeff[3 * a + b].iter().map(|c| -self.wj * c).collect();
                        self.bases.scatter(&coeff, order, &mut g[a]);
                    }
                }
            }
            // bending term
            for (dcomp, order, mult, f) in &be_fields {
                let scale = -self.wb * 2.0 * mult / n as f64;
                let coeff: Vec<f64> = f.iter().map(|v| scale * v).collect();
                self.bases.scatter(&coeff, *order, &mut g[*dcomp]);
            }
            Some(g)
        } else {
            None
        };

        Ok(EvalOut { objective, nmi_value, bending: be, log_jacobian: lj, folded: false, grad })
    }
}

/// Full objective F = ws*NMI - wb*BE - wj*LJ and its analytic gradient with
/// respect to all control displacements, at the grid's own resolution.
/// Exposed for gradient verification and diagnostics.
pub fn ffd_objective_and_gradient<T: Scalar>(
    reference: &Volume3<T>,
    floating: &Volume3<T>,
    grid: &BSplineGrid,
    mask: Option<&Mask3>,
    cfg: &FfdConfig,
) -> Result<(f64, [Vec<f64>; 3])> {
    cfg.validate()?;
    let affine = grid.init_affine.unwrap_or_else(AffineTransform::identity);
    let engine = LevelEngine::new(reference, floating, mask, grid, affine, cfg)?;
    let out = engine.eval(&grid.disp, true)?;
    Ok((out.objective, out.grad.expect("gradient requested")))
}

/// Objective only (same definition as [`ffd_objective_and_gradient`]).
pub fn ffd_objective<T: Scalar>(
    reference: &Volume3<T>,
    floating: &Volume3<T>,
    grid: &BSplineGrid,
    mask: Option<&Mask3>,
    cfg: &FfdConfig,
) -> Result<f64> {
    cfg.validate()?;
    let affine = grid.init_affine.unwrap_or_else(AffineTransform::identity);
    let engine = LevelEngine::new(reference, floating, mask, grid, affine, cfg)?;
    Ok(engine.eval(&grid.disp, false)?.objective)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FfdSummary {
    pub converged: bool,
    pub iterations: usize,
    pub final_objective: f64,
    pub final_nmi: f64,
    pub final_bending: f64,
    pub final_log_jacobian: f64,
    /// Objective value after every accepted step (non-decreasing).
    pub objective_trace: Vec<f64>,
}

fn dot(a: &[Vec<f64>; 3], b: &[Vec<f64>; 3]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>())
        .sum()
}

fn max_abs(a: &[Vec<f64>; 3]) -> f64 {
    a.iter().flat_map(|p| p.iter()).fold(0.0f64, |m, v| m.max(v.abs()))
}

/// FFD registration of `floating` onto `reference`, optionally starting from
/// an affine transform which is recorded in the returned grid and composed
/// into the total mapping. Non-convergence is not an error: the best iterate
/// comes back with `converged = false` in the summary.
pub fn ffd_register<T: Scalar>(
    reference: &Volume3<T>,
    floating: &Volume3<T>,
    init: Option<AffineTransform>,
    mask: Option<&Mask3>,
    cfg: &FfdConfig,
) -> Result<(BSplineGrid, FfdSummary)> {
    cfg.validate()?;
    reference.geom().check_same_grid(floating.geom(), "ffd_register")?;
    if let Some(m) = mask {
        reference.geom().check_same_grid(m.geom(), "ffd_register mask")?;
    }
    let affine = init.unwrap_or_else(AffineTransform::identity);

    // image pyramid, coarsest last; a level must keep a few control cells
    let mut ref_pyr = vec![reference.clone()];
    let mut flt_pyr = vec![floating.clone()];
    let mut mask_pyr = vec![mask.cloned()];
    for _ in 1..cfg.levels {
        let prev = ref_pyr.last().unwrap();
        let nd = prev.dims().map(|d| d.div_ceil(2));
        if nd.iter().any(|&d| (d as f64) < 2.0 * cfg.spacing) {
            break;
        }
        ref_pyr.push(prev.downsample2());
        flt_pyr.push(flt_pyr.last().unwrap().downsample2());
        mask_pyr.push(mask_pyr.last().unwrap().as_ref().map(|m| m.downsample2()));
    }

    let spacing3 = [cfg.spacing; 3];
    let mut grid: Option<BSplineGrid> = None;
    let mut iterations = 0usize;
    let mut converged = true;
    let mut trace = Vec::new();
    let mut last: Option<EvalOut> = None;

    for level in (0..ref_pyr.len()).rev() {
        let r = &ref_pyr[level];
        let f = &flt_pyr[level];
        let m = mask_pyr[level].as_ref();
        let mut g = BSplineGrid::zero(*r.geom(), spacing3);
        g.init_affine = Some(affine);
        if let Some(prev) = &grid {
            // initialize from the coarser level's field
            for kc in 0..g.control_dims[2] {
                for jc in 0..g.control_dims[1] {
                    for ic in 0..g.control_dims[0] {
                        let p = [
                            (ic as f64 - 1.0) * spacing3[0] / 2.0,
                            (jc as f64 - 1.0) * spacing3[1] / 2.0,
                            (kc as f64 - 1.0) * spacing3[2] / 2.0,
                        ];
                        let u = prev.eval_at_voxel(p);
                        let c = g.control_index(ic, jc, kc);
                        for d in 0..3 {
                            g.disp[d][c] = u[d];
                        }
                    }
                }
            }
        }

        let engine = LevelEngine::new(r, f, m, &g, affine, cfg)?;
        let mut cur = engine.eval(&g.disp, true)?;
        if cur.folded {
            // upsampled init folded (can only happen with extreme fields);
            // fall back to a fresh zero grid at this level
            g = BSplineGrid::zero(*r.geom(), spacing3);
            g.init_affine = Some(affine);
            cur = engine.eval(&g.disp, true)?;
        }
        let min_sp_mm = r.spacing().iter().cloned().fold(f64::INFINITY, f64::min);
        let mut dir: Option<[Vec<f64>; 3]> = None;
        let mut prev_grad: Option<[Vec<f64>; 3]> = None;
        let mut alpha = 0.0f64;
        let mut level_converged = false;

        for _ in 0..cfg.max_iterations_per_level {
            let gr = cur.grad.take().expect("gradient present");
            let gmax = max_abs(&gr);
            if gmax < 1e-14 {
                level_converged = true;
                break;
            }
            // Polak-Ribiere conjugate direction with automatic restart
            let new_dir = match (&dir, &prev_grad) {
                (Some(d), Some(pg)) => {
                    let denom = dot(pg, pg);
                    let mut beta = 0.0;
                    if denom > 0.0 {
                        let mut num = 0.0;
                        for c in 0..3 {
                            num += gr[c]
                                .iter()
                                .zip(&pg[c])
                                .map(|(a, b)| a * (a - b))
                                .sum::<f64>();
                        }
                        beta = (num / denom).max(0.0);
                    }
                    let mut nd = gr.clone();
                    for c in 0..3 {
                        for (x, y) in nd[c].iter_mut().zip(&d[c]) {
                            *x += beta * y;
                        }
                    }
                    if dot(&nd, &gr) <= 0.0 {
                        gr.clone() // restart on non-ascent direction
                    } else {
                        nd
                    }
                }
                _ => gr.clone(),
            };
            if alpha == 0.0 {
                alpha = min_sp_mm / max_abs(&new_dir).max(1e-30);
            }
            // backtracking line search with fold rejection
            let mut accepted = false;
            let mut a = alpha;
            for _ in 0..12 {
                let mut trial = g.disp.clone();
                for c in 0..3 {
                    for (x, s) in trial[c].iter_mut().zip(&new_dir[c]) {
                        *x += a * s;
                    }
                }
                let out = engine.eval(&trial, false)?;
                if out.objective > cur.objective {
                    g.disp = trial;
                    let improved = out.objective - cur.objective;
                    cur = engine.eval(&g.disp, true)?;
                    trace.push(cur.objective);
                    iterations += 1;
                    alpha = (a * 2.0).min(4.0 * min_sp_mm / max_abs(&new_dir).max(1e-30));
                    accepted = true;
                    if improved < cfg.objective_tol * (cur.objective.abs() + 1e-12) {
                        level_converged = true;
                    }
                    break;
                }
                a *= 0.5;
            }
            if !accepted {
                // could not improve along this direction; restart once from
                // steepest ascent, otherwise the level is done
                if dir.is_some() {
                    dir = None;
                    prev_grad = None;
                    cur.grad = Some(gr);
                    alpha = 0.0;
                    continue;
                }
                level_converged = true;
                break;
            }
            prev_grad = Some(gr);
            dir = Some(new_dir);
            if level_converged {
                break;
            }
        }
        if !level_converged {
            converged = false;
        }
        last = Some(cur);
        grid = Some(g);
    }

    let grid = grid.expect("at least one level");
    let last = last.expect("at least one evaluation");
    let summary = FfdSummary {
        converged,
        iterations,
        final_objective: last.objective,
        final_nmi: last.nmi_value,
        final_bending: last.bending,
        final_log_jacobian: last.log_jacobian,
        objective_trace: trace,
    };
    Ok((grid, summary))
}

// ---- grid serialization -------------------------------------------------

#[derive(Serialize, Deserialize)]
struct GridSidecar {
    control_spacing: [f64; 3],
    control_dims: [usize; 3],
    ref_geom: Geometry,
    init_affine: Option<AffineTransform>,
}

/// Save a grid as a float64 NIfTI of the control lattice (3 "frames", one
/// per displacement component) plus a JSON sidecar `<path>.json`.
pub fn save_grid(grid: &BSplineGrid, path: &std::path::Path) -> Result<()> {
    use crate::nifti;
    let geom = Geometry::new(grid.control_dims, [1.0; 3], [0.0; 3])?;
    let frames: Vec<Volume3<f64>> = (0..3)
        .map(|d| Volume3::new(geom, grid.disp[d].clone()))
        .collect::<Result<_>>()?;
    let cine = crate::volume::Cine4::new(frames, vec![0.0, 1.0, 2.0], None)?;
    nifti::save_cine(&cine, path, nifti::Datatype::Float64)?;
    let sidecar = GridSidecar {
        control_spacing: grid.control_spacing,
        control_dims: grid.control_dims,
        ref_geom: grid.ref_geom,
        init_affine: grid.init_affine,
    };
    let json = serde_json::to_string_pretty(&sidecar)
        .map_err(|e| McError::Malformed(format!("sidecar encode: {e}")))?;
    std::fs::write(sidecar_path(path), json)?;
    Ok(())
}

fn sidecar_path(path: &std::path::Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    std::path::PathBuf::from(s)
}

pub fn load_grid(path: &std::path::Path) -> Result<BSplineGrid> {
    use crate::nifti;
    let json = std::fs::read_to_string(sidecar_path(path))?;
    let sidecar: GridSidecar =
        serde_json::from_str(&json).map_err(|e| McError::Malformed(format!("sidecar: {e}")))?;
    let cine: crate::volume::Cine4<f64> = nifti::load_cine(path, Some(1.0))?;
    if cine.len() != 3 || cine.geom().dims != sidecar.control_dims {
        return Err(McError::Malformed("grid file does not match its sidecar".into()));
    }
    let disp = [
        cine.frame(0).data().to_vec(),
        cine.frame(1).data().to_vec(),
        cine.frame(2).data().to_vec(),
    ];
    Ok(BSplineGrid {
        control_spacing: sidecar.control_spacing,
        control_dims: sidecar.control_dims,
        disp,
        ref_geom: sidecar.ref_geom,
        init_affine: sidecar.init_affine,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};

    fn geom(d: usize) -> Geometry {
        Geometry::isotropic([d, d, d])
    }

    #[test]
    fn zero_grid_gives_zero_field() {
        let g = BSplineGrid::zero(geom(12), [4.0; 3]);
        let f = evaluate_field(&g);
        assert!(f.max_magnitude() == 0.0);
    }

    #[test]
    fn constant_control_displacements_give_constant_field() {
        // partition of unity
        let mut g = BSplineGrid::zero(geom(13), [5.0; 3]);
        for c in 0..g.n_control_points() {
            g.disp[0][c] = 1.5;
            g.disp[1][c] = -0.5;
            g.disp[2][c] = 2.25;
        }
        let f = evaluate_field(&g);
        for d in &f.disp {
            assert_abs_diff_eq!(d[0], 1.5, epsilon = 1e-12);
            assert_abs_diff_eq!(d[1], -0.5, epsilon = 1e-12);
            assert_abs_diff_eq!(d[2], 2.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn single_control_displacement_is_separable_kernel() {
        let s = 4.0;
        let mut g = BSplineGrid::zero(geom(16), [s; 3]);
        let (ic, jc, kc) = (3, 3, 3);
        let c = g.control_index(ic, jc, kc);
        g.disp[0][c] = 1.0;
        let f = evaluate_field(&g);
        let gm = g.ref_geom;
        for k in 0..16 {
            for j in 0..16 {
                for i in 0..16 {
                    // direct kernel-evaluation oracle
                    let t = |v: usize, cc: usize| bspline3(v as f64 / s + 1.0 - cc as f64);
                    let expect = t(i, ic) * t(j, jc) * t(k, kc);
                    let got = f.disp[gm.index(i, j, k)][0];
                    assert_abs_diff_eq!(got, expect, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn bending_energy_vanishes_for_constant_and_linear_fields() {
        let mut g = BSplineGrid::zero(geom(17), [4.0; 3]);
        assert_abs_diff_eq!(bending_energy(&g), 0.0, epsilon = 1e-15);
        // constant displacement
        for c in 0..g.n_control_points() {
            g.disp[1][c] = 3.0;
        }
        assert_abs_diff_eq!(bending_energy(&g), 0.0, epsilon = 1e-18);
        // shear: displacement linear in x (B-splines reproduce linears)
        let mut sh = BSplineGrid::zero(geom(17), [4.0; 3]);
        for kc in 0..sh.control_dims[2] {
            for jc in 0..sh.control_dims[1] {
                for ic in 0..sh.control_dims[0] {
                    let x = (ic as f64 - 1.0) * 4.0;
                    let c = sh.control_index(ic, jc, kc);
                    sh.disp[1][c] = 0.3 * x;
                }
            }
        }
        assert!(bending_energy(&sh) < 1e-18, "shear bending {}", bending_energy(&sh));
    }

    #[test]
    fn bending_energy_exact_for_quadratic_field() {
        // control values sampled from a quadratic polynomial reproduce that
        // polynomial (up to terms with zero Hessian), so the dense field has
        // a constant, known Hessian and the bending energy in closed form
        let spacing = [4.0, 3.0, 5.0];
        let mut g = BSplineGrid::zero(geom(25), spacing);
        let quad: [[[f64; 3]; 3]; 3] = [
            [[0.010, 0.004, -0.003], [0.004, -0.006, 0.002], [-0.003, 0.002, 0.005]],
            [[-0.008, 0.001, 0.000], [0.001, 0.009, -0.004], [0.000, -0.004, 0.002]],
            [[0.003, -0.002, 0.005], [-0.002, 0.007, 0.001], [0.005, 0.001, -0.009]],
        ];
        let lin = [[0.3, -0.2, 0.1], [0.0, 0.25, -0.15], [-0.1, 0.05, 0.2]];
        for kc in 0..g.control_dims[2] {
            for jc in 0..g.control_dims[1] {
                for ic in 0..g.control_dims[0] {
                    let x = g.control_position(ic, jc, kc);
                    let idx = g.control_index(ic, jc, kc);
                    for d in 0..3 {
                        let mut v = 1.5;
                        for a in 0..3 {
                            v += lin[d][a] * x[a];
                            for b in 0..3 {
                                v += quad[d][a][b] * x[a] * x[b];
                            }
                        }
                        g.disp[d][idx] = v;
                    }
                }
            }
        }
        let mut expected = 0.0;
        for d in 0..3 {
            for a in 0..3 {
                for b in 0..3 {
                    let h = 2.0 * quad[d][a][b]; // Hessian entry
                    expected += h * h;
                }
            }
        }
        let analytic = bending_energy(&g);
        let rel = (analytic - expected).abs() / expected;
        assert!(rel < 1e-9, "analytic {analytic} vs closed form {expected} (rel {rel})");
    }
    #[test]
    fn log_jacobian_zero_field_and_uniform_expansion() {
        let g = BSplineGrid::zero(geom(15), [3.0; 3]);
        assert_abs_diff_eq!(log_jacobian_penalty(&g), 0.0, epsilon = 1e-18);
        // u(x) = 0.1 x (unit spacing): det J = 1.1^3 everywhere
        let mut e = BSplineGrid::zero(geom(15), [3.0; 3]);
        for kc in 0..e.control_dims[2] {
            for jc in 0..e.control_dims[1] {
                for ic in 0..e.control_dims[0] {
                    let c = e.control_index(ic, jc, kc);
                    e.disp[0][c] = 0.1 * ((ic as f64 - 1.0) * 3.0);
                    e.disp[1][c] = 0.1 * ((jc as f64 - 1.0) * 3.0);
                    e.disp[2][c] = 0.1 * ((kc as f64 - 1.0) * 3.0);
                }
            }
        }
        let expect = (3.0 * 1.1f64.ln()).powi(2);
        assert_abs_diff_eq!(log_jacobian_penalty(&e), expect, epsilon = 1e-10);
    }

    #[test]
    fn log_jacobian_detects_folding() {
        let mut g = BSplineGrid::zero(geom(15), [3.0; 3]);
        // one huge negative displacement collapses the local mapping
        let c = g.control_index(2, 2, 2);
        g.disp[0][c] = -40.0;
        assert!(log_jacobian_penalty(&g).is_infinite());
    }

    fn textured(dim: usize, seed: u64) -> Volume3<f64> {
        let g = geom(dim);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let noise = Volume3::from_fn(g, |_, _, _| rng.gen::<f64>());
        noise.gaussian_smooth(1.5)
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let r = textured(16, 31);
        let mut warp = BSplineGrid::zero(geom(16), [5.0; 3]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(32);
        for c in 0..warp.n_control_points() {
            for d in 0..3 {
                warp.disp[d][c] = rng.gen::<f64>() - 0.5;
            }
        }
        let f = crate::transform::resample(
            &r,
            &crate::transform::SpatialMapping::dense(grid_to_mapping(&warp))
                .with_interpolation(crate::transform::Interpolation::Cubic),
        )
        .unwrap();
        let cfg = FfdConfig { bins: 16, ..Default::default() };
        let mut grid = BSplineGrid::zero(geom(16), [5.0; 3]);
        for c in 0..grid.n_control_points() {
            for d in 0..3 {
                grid.disp[d][c] = 0.3 * (rng.gen::<f64>() - 0.5);
            }
        }
        let (_, grad) = ffd_objective_and_gradient(&r, &f, &grid, None, &cfg).unwrap();
        let h = 1e-4;
        let mut checked = 0;
        for probe in 0..40 {
            let c = (probe * 7919) % grid.n_control_points();
            let d = probe % 3;
            let mut gp = grid.clone();
            gp.disp[d][c] += h;
            let fp = ffd_objective(&r, &f, &gp, None, &cfg).unwrap();
            let mut gm = grid.clone();
            gm.disp[d][c] -= h;
            let fm = ffd_objective(&r, &f, &gm, None, &cfg).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            let an = grad[d][c];
            let denom = fd.abs().max(an.abs());
            if denom < 1e-7 {
                continue; // both effectively zero
            }
            assert!(
                (fd - an).abs() / denom < 1e-3,
                "cp {c} comp {d}: analytic {an} vs fd {fd}"
            );
            checked += 1;
        }
        assert!(checked > 20, "only {checked} informative probes");
    }

    #[test]
    fn self_registration_leaves_tiny_field() {
        let r = textured(24, 33);
        let cfg = FfdConfig { levels: 2, ..Default::default() };
        let (grid, summary) = ffd_register(&r, &r, None, None, &cfg).unwrap();
        let f = evaluate_field(&grid);
        assert!(
            f.max_magnitude() <= 0.1,
            "max displacement {} after self-registration",
            f.max_magnitude()
        );
        // ascent property: trace non-decreasing
        for w in summary.objective_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-12);
        }
    }

    #[test]
    fn recovers_known_smooth_warp() {
        let base = textured(32, 34);
        // ground-truth smooth warp, max ~2.5 voxels
        let mut gt = BSplineGrid::zero(geom(32), [8.0; 3]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(35);
        for c in 0..gt.n_control_points() {
            for d in 0..3 {
                gt.disp[d][c] = 2.5 * (rng.gen::<f64>() - 0.5);
            }
        }
        // reference = warped base; registering base onto it should recover gt
        let reference = crate::transform::resample(
            &base,
            &crate::transform::SpatialMapping::dense(grid_to_mapping(&gt))
                .with_interpolation(crate::transform::Interpolation::Cubic),
        )
        .unwrap();
        let cfg = FfdConfig { levels: 3, ..Default::default() };
        let (grid, _summary) = ffd_register(&reference, &base, None, None, &cfg).unwrap();
        let rec = evaluate_field(&grid);
        let gtf = evaluate_field(&gt);
        let gm = *base.geom();
        let mut errs: Vec<f64> = Vec::new();
        for k in 4..28 {
            for j in 4..28 {
                for i in 4..28 {
                    let idx = gm.index(i, j, k);
                    let e = (0..3)
                        .map(|d| (rec.disp[idx][d] - gtf.disp[idx][d]).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    errs.push(e);
                }
            }
        }
        errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = errs[errs.len() / 2];
        let max = *errs.last().unwrap();
        assert!(median < 1.0, "median TRE {median} voxels");
        assert!(max < 2.0, "max TRE {max} voxels");
        // fold-free
        assert!(log_jacobian_penalty(&grid).is_finite());
    }

    #[test]
    fn grid_save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.nii.gz");
        let mut g = BSplineGrid::zero(geom(12), [4.0; 3]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(36);
        for c in 0..g.n_control_points() {
            for d in 0..3 {
                g.disp[d][c] = rng.gen::<f64>() - 0.5;
            }
        }
        g.init_affine = Some(AffineTransform::translation([1.0, 2.0, 3.0]));
        save_grid(&g, &path).unwrap();
        let back = load_grid(&path).unwrap();
        assert_eq!(back.control_dims, g.control_dims);
        assert_eq!(back.disp, g.disp);
        assert_eq!(back.init_affine, g.init_affine);
    }

    #[test]
    fn config_validation() {
        let mut cfg = FfdConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.bending_weight = 0.6;
        cfg.log_jacobian_weight = 0.5;
        assert!(cfg.validate().is_err());
    }
}
