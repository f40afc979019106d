//! Geometric data model: 3D volumes, binary masks and 4D cines.
//!
//! Voxel data is stored x-fastest (index = x + dims.x*(y + dims.y*z)).
//! Spacing and origin are in millimetres; voxel (i,j,k) sits at
//! `origin + spacing * (i,j,k)` in world space.

use crate::error::{McError, Result};
use crate::scalar::Scalar;
use crate::transform::Interpolation;
use serde::{Deserialize, Serialize};

/// Shared grid geometry of a volume, mask or cine.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(McError::InvalidArgument(format!("zero dimension: {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(McError::InvalidArgument(format!(
                "spacing must be strictly positive and finite: {spacing:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(McError::InvalidArgument(format!("non-finite origin: {origin:?}")));
        }
        Ok(Self { dims, spacing, origin })
    }

    /// Unit spacing, zero origin.
    pub fn isotropic(dims: [usize; 3]) -> Self {
        Self { dims, spacing: [1.0; 3], origin: [0.0; 3] }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn voxel_to_world(&self, p: [f64; 3]) -> [f64; 3] {
        [
            self.origin[0] + self.spacing[0] * p[0],
            self.origin[1] + self.spacing[1] * p[1],
            self.origin[2] + self.spacing[2] * p[2],
        ]
    }

    #[inline]
    pub fn world_to_voxel(&self, w: [f64; 3]) -> [f64; 3] {
        [
            (w[0] - self.origin[0]) / self.spacing[0],
            (w[1] - self.origin[1]) / self.spacing[1],
            (w[2] - self.origin[2]) / self.spacing[2],
        ]
    }

    pub fn same_grid(&self, other: &Geometry) -> bool {
        self.dims == other.dims
            && self
                .spacing
                .iter()
                .zip(&other.spacing)
                .all(|(a, b)| (a - b).abs() <= 1e-9 * a.abs().max(1.0))
            && self
                .origin
                .iter()
                .zip(&other.origin)
                .all(|(a, b)| (a - b).abs() <= 1e-6)
    }

    pub fn check_same_grid(&self, other: &Geometry, what: &str) -> Result<()> {
        if self.same_grid(other) {
            Ok(())
        } else {
            Err(McError::GeometryMismatch(format!(
                "{what}: {:?}/{:?} vs {:?}/{:?}",
                self.dims, self.spacing, other.dims, other.spacing
            )))
        }
    }
}

/// A single 3D scalar volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3<T: Scalar> {
    geom: Geometry,
    data: Vec<T>,
}

impl<T: Scalar> Volume3<T> {
    pub fn new(geom: Geometry, data: Vec<T>) -> Result<Self> {
        if data.len() != geom.len() {
            return Err(McError::InvalidArgument(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                geom.dims
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(McError::InvalidArgument("non-finite voxel value".into()));
        }
        Ok(Self { geom, data })
    }

    pub fn filled(geom: Geometry, value: T) -> Self {
        let n = geom.len();
        Self { geom, data: vec![value; n] }
    }

    /// Build from a function of the voxel index (i, j, k).
    pub fn from_fn(geom: Geometry, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(geom.len());
        for k in 0..geom.dims[2] {
            for j in 0..geom.dims[1] {
                for i in 0..geom.dims[0] {
                    data.push(f(i, j, k));
                }
            }
        }
        Self { geom, data }
    }

    #[inline]
    pub fn geom(&self) -> &Geometry {
        &self.geom
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.geom.dims
    }

    #[inline]
    pub fn spacing(&self) -> [f64; 3] {
        self.geom.spacing
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> T {
        self.data[self.geom.index(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: T) {
        let idx = self.geom.index(i, j, k);
        self.data[idx] = v;
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> Volume3<U> {
        Volume3 { geom: self.geom, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Scalar>(&self) -> Volume3<U> {
        self.map(|v| U::of_f64(v.as_f64()))
    }

    /// Interpolate at a continuous voxel coordinate. Returns the value and
    /// whether the sample point lies inside the field of view; taps outside
    /// the grid contribute `padding`.
    pub fn sample(&self, p: [f64; 3], interp: Interpolation, padding: f64) -> (f64, bool) {
        let d = self.geom.dims;
        let in_fov = (0..3).all(|a| p[a] >= 0.0 && p[a] <= (d[a] - 1) as f64);
        let v = match interp {
            Interpolation::Nearest => {
                let i = [p[0].round() as i64, p[1].round() as i64, p[2].round() as i64];
                self.tap(i[0], i[1], i[2], padding)
            }
            Interpolation::Linear => {
                let f = [p[0].floor(), p[1].floor(), p[2].floor()];
                let t = [p[0] - f[0], p[1] - f[1], p[2] - f[2]];
                let b = [f[0] as i64, f[1] as i64, f[2] as i64];
                let mut acc = 0.0;
                for dz in 0..2 {
                    let wz = if dz == 0 { 1.0 - t[2] } else { t[2] };
                    if wz == 0.0 {
                        continue;
                    }
                    for dy in 0..2 {
                        let wy = if dy == 0 { 1.0 - t[1] } else { t[1] };
                        if wy == 0.0 {
                            continue;
                        }
                        for dx in 0..2 {
                            let wx = if dx == 0 { 1.0 - t[0] } else { t[0] };
                            if wx == 0.0 {
                                continue;
                            }
                            acc += wx
                                * wy
                                * wz
                                * self.tap(b[0] + dx, b[1] + dy, b[2] + dz, padding);
                        }
                    }
                }
                acc
            }
            Interpolation::Cubic => self.sample_cubic(p, padding).0,
        };
        (v, in_fov)
    }

    /// Cubic (Catmull-Rom) interpolation with its spatial gradient in voxel
    /// units. The interpolant passes exactly through grid values and has a
    /// continuous first derivative, which the FFD cost path relies on.
    pub fn sample_cubic(&self, p: [f64; 3], padding: f64) -> (f64, [f64; 3]) {
        let f = [p[0].floor(), p[1].floor(), p[2].floor()];
        let t = [p[0] - f[0], p[1] - f[1], p[2] - f[2]];
        let b = [f[0] as i64 - 1, f[1] as i64 - 1, f[2] as i64 - 1];
        let (wx, dwx) = catmull_rom_weights(t[0]);
        let (wy, dwy) = catmull_rom_weights(t[1]);
        let (wz, dwz) = catmull_rom_weights(t[2]);
        let mut val = 0.0;
        let mut grad = [0.0f64; 3];
        for dz in 0..4 {
            for dy in 0..4 {
                let wyz = wy[dy] * wz[dz];
                let dy_wz = dwy[dy] * wz[dz];
                let wy_dz = wy[dy] * dwz[dz];
                for dx in 0..4 {
                    let v = self.tap(b[0] + dx as i64, b[1] + dy as i64, b[2] + dz as i64, padding);
                    val += wx[dx] * wyz * v;
                    grad[0] += dwx[dx] * wyz * v;
                    grad[1] += wx[dx] * dy_wz * v;
                    grad[2] += wx[dx] * wy_dz * v;
                }
            }
        }
        (val, grad)
    }

    #[inline]
    fn tap(&self, i: i64, j: i64, k: i64, padding: f64) -> f64 {
        let d = self.geom.dims;
        if i < 0 || j < 0 || k < 0 || i >= d[0] as i64 || j >= d[1] as i64 || k >= d[2] as i64 {
            padding
        } else {
            self.data[self.geom.index(i as usize, j as usize, k as usize)].as_f64()
        }
    }

    /// Separable Gaussian smoothing (mirror boundary), sigma in voxels.
    pub fn gaussian_smooth(&self, sigma: f64) -> Volume3<T> {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as i64;
        let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
        for o in -radius..=radius {
            kernel.push((-(o as f64).powi(2) / (2.0 * sigma * sigma)).exp());
        }
        let s: f64 = kernel.iter().sum();
        for w in &mut kernel {
            *w /= s;
        }
        let mut cur: Vec<f64> = self.data.iter().map(|v| v.as_f64()).collect();
        let d = self.geom.dims;
        let strides = [1i64, d[0] as i64, (d[0] * d[1]) as i64];
        for axis in 0..3 {
            let n = d[axis] as i64;
            let mut next = vec![0.0f64; cur.len()];
            for k in 0..d[2] {
                for j in 0..d[1] {
                    for i in 0..d[0] {
                        let pos = [i as i64, j as i64, k as i64];
                        let base = self.geom.index(i, j, k) as i64;
                        let mut acc = 0.0;
                        for (ki, o) in (-radius..=radius).enumerate() {
                            // mirror boundary
                            let mut q = pos[axis] + o;
                            if q < 0 {
                                q = -q;
                            }
                            if q >= n {
                                q = 2 * (n - 1) - q;
                            }
                            let q = q.clamp(0, n - 1);
                            let idx = base + (q - pos[axis]) * strides[axis];
                            acc += kernel[ki] * cur[idx as usize];
                        }
                        next[base as usize] = acc;
                    }
                }
            }
            cur = next;
        }
        Volume3 { geom: self.geom, data: cur.into_iter().map(T::of_f64).collect() }
    }

    /// Gaussian pre-filter (sigma 1 voxel) then decimate by 2 along each axis.
    pub fn downsample2(&self) -> Volume3<T> {
        let sm = self.gaussian_smooth(1.0);
        let d = self.geom.dims;
        let nd = [d[0].div_ceil(2).max(1), d[1].div_ceil(2).max(1), d[2].div_ceil(2).max(1)];
        let geom = Geometry {
            dims: nd,
            spacing: [self.geom.spacing[0] * 2.0, self.geom.spacing[1] * 2.0, self.geom.spacing[2] * 2.0],
            origin: self.geom.origin,
        };
        Volume3::from_fn(geom, |i, j, k| sm.get((2 * i).min(d[0] - 1), (2 * j).min(d[1] - 1), (2 * k).min(d[2] - 1)))
    }

    pub fn min_max(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in &self.data {
            let v = v.as_f64();
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }
}

/// Catmull-Rom weights and their derivatives for fractional offset `t` in [0,1).
#[inline]
pub(crate) fn catmull_rom_weights(t: f64) -> ([f64; 4], [f64; 4]) {
    let t2 = t * t;
    let t3 = t2 * t;
    let w = [
        0.5 * (-t + 2.0 * t2 - t3),
        0.5 * (2.0 - 5.0 * t2 + 3.0 * t3),
        0.5 * (t + 4.0 * t2 - 3.0 * t3),
        0.5 * (-t2 + t3),
    ];
    let dw = [
        0.5 * (-1.0 + 4.0 * t - 3.0 * t2),
        0.5 * (-10.0 * t + 9.0 * t2),
        0.5 * (1.0 + 8.0 * t - 9.0 * t2),
        0.5 * (-2.0 * t + 3.0 * t2),
    ];
    (w, dw)
}

/// Binary voxel mask with the same geometry as the volumes it constrains.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask3 {
    geom: Geometry,
    data: Vec<bool>,
}

impl Mask3 {
    pub fn new(geom: Geometry, data: Vec<bool>) -> Result<Self> {
        if data.len() != geom.len() {
            return Err(McError::InvalidArgument(format!(
                "mask length {} does not match dims {:?}",
                data.len(),
                geom.dims
            )));
        }
        Ok(Self { geom, data })
    }

    pub fn full(geom: Geometry) -> Self {
        let n = geom.len();
        Self { geom, data: vec![true; n] }
    }

    pub fn from_fn(geom: Geometry, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(geom.len());
        for k in 0..geom.dims[2] {
            for j in 0..geom.dims[1] {
                for i in 0..geom.dims[0] {
                    data.push(f(i, j, k));
                }
            }
        }
        Self { geom, data }
    }

    #[inline]
    pub fn geom(&self) -> &Geometry {
        &self.geom
    }

    #[inline]
    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.data[self.geom.index(i, j, k)]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_nonempty(&self) -> bool {
        self.data.iter().any(|&b| b)
    }

    /// Mask centroid in voxel coordinates, None if empty.
    pub fn centroid(&self) -> Option<[f64; 3]> {
        let mut acc = [0.0f64; 3];
        let mut n = 0usize;
        for k in 0..self.geom.dims[2] {
            for j in 0..self.geom.dims[1] {
                for i in 0..self.geom.dims[0] {
                    if self.get(i, j, k) {
                        acc[0] += i as f64;
                        acc[1] += j as f64;
                        acc[2] += k as f64;
                        n += 1;
                    }
                }
            }
        }
        if n == 0 {
            None
        } else {
            Some([acc[0] / n as f64, acc[1] / n as f64, acc[2] / n as f64])
        }
    }

    /// Decimate by 2 (a coarse voxel is set when any of its children is set).
    pub fn downsample2(&self) -> Mask3 {
        let d = self.geom.dims;
        let nd = [d[0].div_ceil(2).max(1), d[1].div_ceil(2).max(1), d[2].div_ceil(2).max(1)];
        let geom = Geometry {
            dims: nd,
            spacing: [self.geom.spacing[0] * 2.0, self.geom.spacing[1] * 2.0, self.geom.spacing[2] * 2.0],
            origin: self.geom.origin,
        };
        Mask3::from_fn(geom, |i, j, k| {
            let mut any = false;
            for dz in 0..2 {
                for dy in 0..2 {
                    for dx in 0..2 {
                        let (x, y, z) = (2 * i + dx, 2 * j + dy, 2 * k + dz);
                        if x < d[0] && y < d[1] && z < d[2] && self.get(x, y, z) {
                            any = true;
                        }
                    }
                }
            }
            any
        })
    }
}

/// An ordered sequence of 3D frames sharing one grid: the 4D cine.
#[derive(Debug, Clone, PartialEq)]
pub struct Cine4<T: Scalar> {
    frames: Vec<Volume3<T>>,
    times: Vec<f64>,
    pub frame_rate_hint: Option<f64>,
}

impl<T: Scalar> Cine4<T> {
    pub fn new(frames: Vec<Volume3<T>>, times: Vec<f64>, frame_rate_hint: Option<f64>) -> Result<Self> {
        if frames.len() < 2 {
            return Err(McError::InvalidArgument(format!(
                "a cine needs at least 2 frames, got {}",
                frames.len()
            )));
        }
        if times.len() != frames.len() {
            return Err(McError::InvalidArgument(format!(
                "{} times for {} frames",
                times.len(),
                frames.len()
            )));
        }
        if !times.windows(2).all(|w| w[1] > w[0]) {
            return Err(McError::InvalidArgument("times must be strictly increasing".into()));
        }
        let g0 = *frames[0].geom();
        for (n, f) in frames.iter().enumerate() {
            g0.check_same_grid(f.geom(), &format!("cine frame {n}"))?;
        }
        Ok(Self { frames, times, frame_rate_hint })
    }

    pub fn uniform_times(frames: Vec<Volume3<T>>, frame_rate: f64) -> Result<Self> {
        if !(frame_rate > 0.0) {
            return Err(McError::InvalidArgument(format!("frame rate must be > 0, got {frame_rate}")));
        }
        let times = (0..frames.len()).map(|n| n as f64 / frame_rate).collect();
        Self::new(frames, times, Some(frame_rate))
    }

    #[inline]
    pub fn frames(&self) -> &[Volume3<T>] {
        &self.frames
    }

    #[inline]
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    #[inline]
    pub fn geom(&self) -> &Geometry {
        self.frames[0].geom()
    }

    #[inline]
    pub fn frame(&self, n: usize) -> &Volume3<T> {
        &self.frames[n]
    }
}

/// Voxel-wise (weighted) arithmetic mean of frames sharing one grid.
pub fn average_frames<T: Scalar>(frames: &[Volume3<T>], weights: Option<&[f64]>) -> Result<Volume3<T>> {
    if frames.is_empty() {
        return Err(McError::EmptyInput("average_frames: no frames".into()));
    }
    let geom = *frames[0].geom();
    for (n, f) in frames.iter().enumerate() {
        geom.check_same_grid(f.geom(), &format!("average_frames frame {n}"))?;
    }
    let uniform = vec![1.0; frames.len()];
    let w = match weights {
        Some(w) => {
            if w.len() != frames.len() {
                return Err(McError::InvalidArgument(format!(
                    "{} weights for {} frames",
                    w.len(),
                    frames.len()
                )));
            }
            if w.iter().any(|&x| x < 0.0 || !x.is_finite()) {
                return Err(McError::InvalidArgument("weights must be finite and nonnegative".into()));
            }
            w
        }
        None => &uniform,
    };
    let wsum: f64 = w.iter().sum();
    if wsum <= 0.0 {
        return Err(McError::InvalidArgument("weight sum must be > 0".into()));
    }
    let mut acc = vec![0.0f64; geom.len()];
    for (f, &wf) in frames.iter().zip(w) {
        for (a, v) in acc.iter_mut().zip(f.data()) {
            *a += wf * v.as_f64();
        }
    }
    let data = acc.into_iter().map(|a| T::of_f64(a / wsum)).collect();
    Volume3::new(geom, data)
}

/// Mean voxel intensity, optionally restricted to a mask.
pub fn frame_mean_intensity<T: Scalar>(vol: &Volume3<T>, mask: Option<&Mask3>) -> Result<f64> {
    match mask {
        None => {
            let s: f64 = vol.data().iter().map(|v| v.as_f64()).sum();
            Ok(s / vol.data().len() as f64)
        }
        Some(m) => {
            vol.geom().check_same_grid(m.geom(), "frame_mean_intensity mask")?;
            let mut s = 0.0;
            let mut n = 0usize;
            for (v, &inside) in vol.data().iter().zip(m.data()) {
                if inside {
                    s += v.as_f64();
                    n += 1;
                }
            }
            if n == 0 {
                return Err(McError::EmptyInput("frame_mean_intensity: empty mask".into()));
            }
            Ok(s / n as f64)
        }
    }
}
