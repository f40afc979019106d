//! Spatial mappings (affine, dense displacement) and pull-back resampling.
//!
//! Everything works in physical (mm) coordinates with the pull-back
//! convention: a mapping `T` carries reference-space points into floating
//! space, and the warped image is `warped(x) = flt(T(x))`.

use crate::error::{McError, Result};
use crate::scalar::Scalar;
use crate::volume::{Geometry, Volume3};
use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

/// Voxel interpolation scheme.
///
/// `Cubic` is the Catmull-Rom spline: it interpolates grid values exactly
/// (no prefilter needed) and is C1, which the FFD gradient path requires.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    Nearest,
    Linear,
    Cubic,
}

/// 12-parameter affine transform on physical (mm) coordinates, stored as the
/// 3x4 matrix [L | t].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub m: [[f64; 4]; 3],
}

impl AffineTransform {
    pub fn identity() -> Self {
        Self {
            m: [
                [1.0, 0.0, 0.0, 0.0],
                [0.0, 1.0, 0.0, 0.0],
                [0.0, 0.0, 1.0, 0.0],
            ],
        }
    }

    pub fn translation(t: [f64; 3]) -> Self {
        let mut a = Self::identity();
        for r in 0..3 {
            a.m[r][3] = t[r];
        }
        a
    }

    /// Linear part + translation from a 3x3 matrix and offset.
    pub fn from_linear(l: [[f64; 3]; 3], t: [f64; 3]) -> Self {
        let mut m = [[0.0; 4]; 3];
        for r in 0..3 {
            m[r][..3].copy_from_slice(&l[r]);
            m[r][3] = t[r];
        }
        Self { m }
    }

    #[inline]
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.m;
        [
            m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2] + m[0][3],
            m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2] + m[1][3],
            m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2] + m[2][3],
        ]
    }

    #[inline]
    pub fn linear(&self) -> [[f64; 3]; 3] {
        let m = &self.m;
        [
            [m[0][0], m[0][1], m[0][2]],
            [m[1][0], m[1][1], m[1][2]],
            [m[2][0], m[2][1], m[2][2]],
        ]
    }

    #[inline]
    pub fn translation_part(&self) -> [f64; 3] {
        [self.m[0][3], self.m[1][3], self.m[2][3]]
    }

    /// Composition `self ∘ other`: (self*other)(x) = self(other(x)).
    pub fn compose(&self, other: &AffineTransform) -> AffineTransform {
        let a = self.to_mat4() * other.to_mat4();
        Self::from_mat4(&a)
    }

    pub fn inverse(&self) -> Result<AffineTransform> {
        let inv = self
            .to_mat4()
            .try_inverse()
            .ok_or_else(|| McError::Degenerate("singular affine transform".into()))?;
        Ok(Self::from_mat4(&inv))
    }

    pub fn det_linear(&self) -> f64 {
        let l = self.linear();
        l[0][0] * (l[1][1] * l[2][2] - l[1][2] * l[2][1])
            - l[0][1] * (l[1][0] * l[2][2] - l[1][2] * l[2][0])
            + l[0][2] * (l[1][0] * l[2][1] - l[1][1] * l[2][0])
    }

    pub fn is_valid(&self) -> bool {
        self.m.iter().flatten().all(|v| v.is_finite()) && self.det_linear().abs() > 1e-9
    }

    /// Max abs deviation from identity (linear entries and translation in mm).
    pub fn deviation_from_identity(&self) -> f64 {
        let mut dev = 0.0f64;
        for r in 0..3 {
            for c in 0..3 {
                let id = if r == c { 1.0 } else { 0.0 };
                dev = dev.max((self.m[r][c] - id).abs());
            }
            dev = dev.max(self.m[r][3].abs());
        }
        dev
    }

    fn to_mat4(&self) -> Matrix4<f64> {
        let m = &self.m;
        Matrix4::new(
            m[0][0], m[0][1], m[0][2], m[0][3],
            m[1][0], m[1][1], m[1][2], m[1][3],
            m[2][0], m[2][1], m[2][2], m[2][3],
            0.0, 0.0, 0.0, 1.0,
        )
    }

    fn from_mat4(a: &Matrix4<f64>) -> Self {
        let mut m = [[0.0; 4]; 3];
        for (r, row) in m.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = a[(r, c)];
            }
        }
        Self { m }
    }

    /// Plain-text 3x4 row-major serialization (mm-space, pull-back convention).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "# dceus-mc affine 3x4 row-major (mm, pull-back)")?;
        for row in &self.m {
            writeln!(f, "{:.17e} {:.17e} {:.17e} {:.17e}", row[0], row[1], row[2], row[3])?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<AffineTransform> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut m = [[0.0; 4]; 3];
        let mut r = 0;
        for line in f.lines() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if r >= 3 {
                return Err(McError::Malformed("affine file has more than 3 rows".into()));
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|s| s.parse().map_err(|_| McError::Malformed(format!("bad number: {s}"))))
                .collect::<Result<_>>()?;
            if vals.len() != 4 {
                return Err(McError::Malformed(format!("expected 4 columns, got {}", vals.len())));
            }
            m[r].copy_from_slice(&vals);
            r += 1;
        }
        if r != 3 {
            return Err(McError::Malformed(format!("expected 3 rows, got {r}")));
        }
        let t = AffineTransform { m };
        if !t.m.iter().flatten().all(|v| v.is_finite()) {
            return Err(McError::Malformed("non-finite affine entry".into()));
        }
        Ok(t)
    }
}

/// Per-voxel displacement (mm) on a reference grid: output voxel at world
/// position x samples the input at x + d(x).
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    pub geom: Geometry,
    pub disp: Vec<[f64; 3]>,
}

impl DisplacementField {
    pub fn zero(geom: Geometry) -> Self {
        let n = geom.len();
        Self { geom, disp: vec![[0.0; 3]; n] }
    }

    pub fn max_magnitude(&self) -> f64 {
        self.disp
            .iter()
            .map(|d| (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt())
            .fold(0.0, f64::max)
    }

    pub fn mean_magnitude(&self) -> f64 {
        if self.disp.is_empty() {
            return 0.0;
        }
        let s: f64 = self
            .disp
            .iter()
            .map(|d| (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt())
            .sum();
        s / self.disp.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MappingKind {
    Affine(AffineTransform),
    Dense(DisplacementField),
}

/// A resampling recipe: the mapping itself plus interpolation and padding.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialMapping {
    pub kind: MappingKind,
    pub interpolation: Interpolation,
    /// Value used outside the floating image's field of view. Defaults to 0
    /// (signal-free background in contrast mode).
    pub padding: f64,
}

impl SpatialMapping {
    pub fn affine(t: AffineTransform) -> Self {
        Self { kind: MappingKind::Affine(t), interpolation: Interpolation::Linear, padding: 0.0 }
    }

    pub fn dense(f: DisplacementField) -> Self {
        Self { kind: MappingKind::Dense(f), interpolation: Interpolation::Linear, padding: 0.0 }
    }

    pub fn with_interpolation(mut self, interp: Interpolation) -> Self {
        self.interpolation = interp;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !self.padding.is_finite() {
            return Err(McError::InvalidArgument("non-finite padding".into()));
        }
        match &self.kind {
            MappingKind::Affine(t) => {
                if !t.m.iter().flatten().all(|v| v.is_finite()) {
                    return Err(McError::InvalidArgument("non-finite affine parameters".into()));
                }
            }
            MappingKind::Dense(f) => {
                if f.disp.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(McError::InvalidArgument("non-finite displacement".into()));
                }
            }
        }
        Ok(())
    }

    /// Map an output-space world point into input-space world coordinates.
    /// For dense fields the voxel index of the output point is needed.
    #[inline]
    pub fn map_point(&self, world: [f64; 3], voxel_index: usize) -> [f64; 3] {
        match &self.kind {
            MappingKind::Affine(t) => t.apply(world),
            MappingKind::Dense(f) => {
                let d = f.disp[voxel_index];
                [world[0] + d[0], world[1] + d[1], world[2] + d[2]]
            }
        }
    }
}

/// Pull-back resampling of `vol` through `mapping`; output geometry equals
/// the input geometry (the pipeline registers a cine to itself).
pub fn resample<T: Scalar>(vol: &Volume3<T>, mapping: &SpatialMapping) -> Result<Volume3<T>> {
    Ok(resample_with_valid(vol, mapping)?.0)
}

/// As [`resample`], also returning a per-voxel flag telling whether the
/// sample fell inside the input field of view (false means padding).
pub fn resample_with_valid<T: Scalar>(
    vol: &Volume3<T>,
    mapping: &SpatialMapping,
) -> Result<(Volume3<T>, Vec<bool>)> {
    mapping.validate()?;
    if let MappingKind::Dense(f) = &mapping.kind {
        vol.geom().check_same_grid(&f.geom, "resample displacement field")?;
    }
    let geom = *vol.geom();
    let n = geom.len();
    let mut data = Vec::with_capacity(n);
    let mut valid = Vec::with_capacity(n);
    let mut idx = 0usize;
    for k in 0..geom.dims[2] {
        for j in 0..geom.dims[1] {
            for i in 0..geom.dims[0] {
                let w = geom.voxel_to_world([i as f64, j as f64, k as f64]);
                let src = mapping.map_point(w, idx);
                let p = geom.world_to_voxel(src);
                let (v, in_fov) = vol.sample(p, mapping.interpolation, mapping.padding);
                data.push(T::of_f64(v));
                valid.push(in_fov);
                idx += 1;
            }
        }
    }
    Ok((Volume3::new(geom, data)?, valid))
}
