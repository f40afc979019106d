//! Minimal NIfTI-1 reader/writer (.nii and .nii.gz, single file).
//!
//! Covers what the pipeline needs to interoperate with externally produced
//! masks and cines: 3D/4D images in uint8, int16, uint16, float32 or float64,
//! with scl_slope/scl_inter scaling applied on load. Orientation is written
//! as a canonical diagonal sform built from spacing and origin; registration
//! itself runs in voxel/world space shared by all frames of one cine.

use crate::error::{McError, Result};
use crate::scalar::Scalar;
use crate::volume::{Cine4, Geometry, Mask3, Volume3};
use byteorder::{BigEndian, ByteOrder, LittleEndian, WriteBytesExt};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const MAGIC: &[u8; 4] = b"n+1\0";

/// On-disk voxel datatype for saving.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Datatype {
    Uint8,
    Int16,
    Uint16,
    Float32,
    Float64,
}

impl Datatype {
    pub fn code(self) -> i16 {
        match self {
            Datatype::Uint8 => 2,
            Datatype::Int16 => 4,
            Datatype::Uint16 => 512,
            Datatype::Float32 => 16,
            Datatype::Float64 => 64,
        }
    }

    pub fn bitpix(self) -> i16 {
        match self {
            Datatype::Uint8 => 8,
            Datatype::Int16 | Datatype::Uint16 => 16,
            Datatype::Float32 => 32,
            Datatype::Float64 => 64,
        }
    }

    pub fn from_code(code: i16) -> Result<Self> {
        Ok(match code {
            2 => Datatype::Uint8,
            4 => Datatype::Int16,
            512 => Datatype::Uint16,
            16 => Datatype::Float32,
            64 => Datatype::Float64,
            other => return Err(McError::Unsupported(format!("NIfTI datatype code {other}"))),
        })
    }

    pub fn from_name(s: &str) -> Result<Self> {
        Ok(match s {
            "uint8" | "u8" => Datatype::Uint8,
            "int16" | "i16" => Datatype::Int16,
            "uint16" | "u16" => Datatype::Uint16,
            "float32" | "f32" => Datatype::Float32,
            "float64" | "f64" => Datatype::Float64,
            other => return Err(McError::InvalidArgument(format!("unknown datatype {other}"))),
        })
    }
}

/// Header fields as read, for inspection and tests.
#[derive(Debug, Clone)]
pub struct NiftiHeaderView {
    pub ndim: usize,
    pub dims: [usize; 7],
    pub datatype: i16,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub qform_code: i16,
    pub sform_code: i16,
    pub srow: [[f32; 4]; 3],
}

impl NiftiHeaderView {
    fn parse<E: ByteOrder>(h: &[u8; HEADER_SIZE]) -> Result<Self> {
        let mut dims16 = [0i16; 8];
        for (i, d) in dims16.iter_mut().enumerate() {
            *d = E::read_i16(&h[40 + 2 * i..]);
        }
        let ndim = dims16[0];
        if !(3..=4).contains(&ndim) {
            return Err(McError::Unsupported(format!("dim[0] = {ndim}, only 3D/4D supported")));
        }
        let mut dims = [1usize; 7];
        for i in 0..ndim as usize {
            let d = dims16[1 + i];
            if d <= 0 {
                return Err(McError::Malformed(format!("non-positive dim[{}] = {d}", i + 1)));
            }
            dims[i] = d as usize;
        }
        let mut pixdim = [0.0f32; 8];
        for (i, p) in pixdim.iter_mut().enumerate() {
            *p = E::read_f32(&h[76 + 4 * i..]);
        }
        for i in 1..=3 {
            if !(pixdim[i] > 0.0) || !pixdim[i].is_finite() {
                return Err(McError::Malformed(format!("non-positive pixdim[{i}] = {}", pixdim[i])));
            }
        }
        let mut srow = [[0.0f32; 4]; 3];
        for (r, row) in srow.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = E::read_f32(&h[280 + 16 * r + 4 * c..]);
            }
        }
        Ok(Self {
            ndim: ndim as usize,
            dims,
            datatype: E::read_i16(&h[70..]),
            bitpix: E::read_i16(&h[72..]),
            pixdim,
            vox_offset: E::read_f32(&h[108..]),
            scl_slope: E::read_f32(&h[112..]),
            scl_inter: E::read_f32(&h[116..]),
            qform_code: E::read_i16(&h[252..]),
            sform_code: E::read_i16(&h[254..]),
            srow,
        })
    }

    pub fn n_frames(&self) -> usize {
        if self.ndim == 4 {
            self.dims[3]
        } else {
            1
        }
    }

    fn geometry(&self) -> Result<Geometry> {
        let origin = if self.sform_code > 0 {
            [self.srow[0][3] as f64, self.srow[1][3] as f64, self.srow[2][3] as f64]
        } else {
            [0.0; 3]
        };
        Geometry::new(
            [self.dims[0], self.dims[1], self.dims[2]],
            [self.pixdim[1] as f64, self.pixdim[2] as f64, self.pixdim[3] as f64],
            origin,
        )
    }
}

fn is_gz(path: &Path) -> bool {
    path.extension().map(|e| e == "gz").unwrap_or(false)
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let f = File::open(path)
        .map_err(|e| McError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let mut buf = Vec::new();
    if is_gz(path) {
        flate2::read::GzDecoder::new(BufReader::new(f))
            .read_to_end(&mut buf)
            .map_err(|e| McError::Malformed(format!("{}: gzip: {e}", path.display())))?;
    } else {
        BufReader::new(f).read_to_end(&mut buf)?;
    }
    Ok(buf)
}

/// Read and validate just the header.
pub fn read_header(path: &Path) -> Result<NiftiHeaderView> {
    let bytes = read_all(path)?;
    parse_header(&bytes).map(|(h, _)| h)
}

fn parse_header(bytes: &[u8]) -> Result<(NiftiHeaderView, bool)> {
    if bytes.len() < HEADER_SIZE {
        return Err(McError::Malformed(format!("file too short for a NIfTI-1 header ({} bytes)", bytes.len())));
    }
    let mut h = [0u8; HEADER_SIZE];
    h.copy_from_slice(&bytes[..HEADER_SIZE]);
    if &h[344..348] != MAGIC {
        return Err(McError::Malformed("missing NIfTI-1 magic \"n+1\"".into()));
    }
    let size_le = LittleEndian::read_i32(&h[0..]);
    let swapped = if size_le == 348 {
        false
    } else if BigEndian::read_i32(&h[0..]) == 348 {
        true
    } else {
        return Err(McError::Malformed(format!("sizeof_hdr = {size_le}, expected 348")));
    };
    let view = if swapped {
        NiftiHeaderView::parse::<BigEndian>(&h)?
    } else {
        NiftiHeaderView::parse::<LittleEndian>(&h)?
    };
    Ok((view, swapped))
}

/// Decode voxel payload to f64, scl_slope/scl_inter applied.
fn decode_voxels(bytes: &[u8], hdr: &NiftiHeaderView, swapped: bool) -> Result<Vec<f64>> {
    let dt = Datatype::from_code(hdr.datatype)?;
    if hdr.bitpix != dt.bitpix() {
        return Err(McError::Malformed(format!(
            "bitpix {} does not match datatype {:?}",
            hdr.bitpix, dt
        )));
    }
    let nvox: usize = hdr.dims.iter().product();
    let bytes_per = dt.bitpix() as usize / 8;
    let offset = hdr.vox_offset as usize;
    if offset < HEADER_SIZE {
        return Err(McError::Malformed(format!("vox_offset {} inside header", hdr.vox_offset)));
    }
    let expected = offset + nvox * bytes_per;
    if bytes.len() < expected {
        return Err(McError::Malformed(format!(
            "truncated file: need {} bytes for declared dims, have {}",
            expected,
            bytes.len()
        )));
    }
    if bytes.len() > expected + 3 {
        // allow word padding only
        return Err(McError::Malformed(format!(
            "file length {} disagrees with declared size {}",
            bytes.len(),
            expected
        )));
    }
    let raw = &bytes[offset..offset + nvox * bytes_per];
    let slope = if hdr.scl_slope == 0.0 || !hdr.scl_slope.is_finite() { 1.0 } else { hdr.scl_slope as f64 };
    let inter = if hdr.scl_inter.is_finite() { hdr.scl_inter as f64 } else { 0.0 };
    let mut out = Vec::with_capacity(nvox);
    macro_rules! decode {
        ($read:expr, $w:expr) => {
            for c in raw.chunks_exact($w) {
                out.push(slope * $read(c) + inter);
            }
        };
    }
    match (dt, swapped) {
        (Datatype::Uint8, _) => {
            for &b in raw {
                out.push(slope * b as f64 + inter);
            }
        }
        (Datatype::Int16, false) => decode!(|c| LittleEndian::read_i16(c) as f64, 2),
        (Datatype::Int16, true) => decode!(|c| BigEndian::read_i16(c) as f64, 2),
        (Datatype::Uint16, false) => decode!(|c| LittleEndian::read_u16(c) as f64, 2),
        (Datatype::Uint16, true) => decode!(|c| BigEndian::read_u16(c) as f64, 2),
        (Datatype::Float32, false) => decode!(|c| LittleEndian::read_f32(c) as f64, 4),
        (Datatype::Float32, true) => decode!(|c| BigEndian::read_f32(c) as f64, 4),
        (Datatype::Float64, false) => decode!(|c| LittleEndian::read_f64(c), 8),
        (Datatype::Float64, true) => decode!(|c| BigEndian::read_f64(c), 8),
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(McError::Malformed("non-finite voxel value in file".into()));
    }
    Ok(out)
}

/// Load a 3D volume; errors if the file is 4D.
pub fn load_volume<T: Scalar>(path: &Path) -> Result<Volume3<T>> {
    let bytes = read_all(path)?;
    let (hdr, swapped) = parse_header(&bytes)?;
    if hdr.n_frames() != 1 {
        return Err(McError::InvalidArgument(format!(
            "{} is a {}-frame 4D file, expected a single volume",
            path.display(),
            hdr.n_frames()
        )));
    }
    let vox = decode_voxels(&bytes, &hdr, swapped)?;
    Volume3::new(hdr.geometry()?, vox.into_iter().map(T::of_f64).collect())
}

/// Load a 4D cine. Frame timing: the `frame_rate` argument wins; otherwise
/// pixdim[4] is used when positive; otherwise 1 Hz.
pub fn load_cine<T: Scalar>(path: &Path, frame_rate: Option<f64>) -> Result<Cine4<T>> {
    let bytes = read_all(path)?;
    let (hdr, swapped) = parse_header(&bytes)?;
    let n = hdr.n_frames();
    if n < 2 {
        return Err(McError::InvalidArgument(format!(
            "{} has {n} frame(s), a cine needs at least 2",
            path.display()
        )));
    }
    let vox = decode_voxels(&bytes, &hdr, swapped)?;
    let geom = hdr.geometry()?;
    let per = geom.len();
    let mut frames = Vec::with_capacity(n);
    for f in 0..n {
        let slice = &vox[f * per..(f + 1) * per];
        frames.push(Volume3::new(geom, slice.iter().map(|&v| T::of_f64(v)).collect())?);
    }
    let rate = frame_rate.unwrap_or_else(|| {
        let dt = hdr.pixdim[4] as f64;
        if dt > 0.0 && dt.is_finite() {
            1.0 / dt
        } else {
            1.0
        }
    });
    Cine4::uniform_times(frames, rate)
}

/// Load a mask: any supported integer/float volume thresholded at > 0.
pub fn load_mask(path: &Path) -> Result<Mask3> {
    let vol: Volume3<f32> = load_volume(path)?;
    let geom = *vol.geom();
    let data = vol.data().iter().map(|&v| v > 0.0).collect();
    Mask3::new(geom, data)
}

fn write_header<W: Write>(
    w: &mut W,
    geom: &Geometry,
    n_frames: usize,
    dt: Datatype,
    time_step: f64,
) -> Result<()> {
    let mut h = vec![0u8; HEADER_SIZE];
    LittleEndian::write_i32(&mut h[0..], 348);
    let ndim: i16 = if n_frames > 1 { 4 } else { 3 };
    let dims = [
        ndim,
        geom.dims[0] as i16,
        geom.dims[1] as i16,
        geom.dims[2] as i16,
        n_frames.max(1) as i16,
        1,
        1,
        1,
    ];
    for (i, d) in dims.iter().enumerate() {
        LittleEndian::write_i16(&mut h[40 + 2 * i..], *d);
    }
    LittleEndian::write_i16(&mut h[70..], dt.code());
    LittleEndian::write_i16(&mut h[72..], dt.bitpix());
    let pixdim = [
        1.0f32,
        geom.spacing[0] as f32,
        geom.spacing[1] as f32,
        geom.spacing[2] as f32,
        time_step as f32,
        0.0,
        0.0,
        0.0,
    ];
    for (i, p) in pixdim.iter().enumerate() {
        LittleEndian::write_f32(&mut h[76 + 4 * i..], *p);
    }
    LittleEndian::write_f32(&mut h[108..], VOX_OFFSET as f32);
    LittleEndian::write_f32(&mut h[112..], 1.0); // scl_slope
    LittleEndian::write_f32(&mut h[116..], 0.0); // scl_inter
    if n_frames > 1 {
        h[123] = 8; // xyzt_units: seconds
    }
    LittleEndian::write_i16(&mut h[254..], 1); // sform_code
    for r in 0..3 {
        let mut row = [0.0f32; 4];
        row[r] = geom.spacing[r] as f32;
        row[3] = geom.origin[r] as f32;
        for (c, v) in row.iter().enumerate() {
            LittleEndian::write_f32(&mut h[280 + 16 * r + 4 * c..], *v);
        }
    }
    h[344..348].copy_from_slice(MAGIC);
    w.write_all(&h)?;
    w.write_all(&[0u8; 4])?; // no extensions
    Ok(())
}

fn encode_value<W: Write>(w: &mut W, v: f64, dt: Datatype) -> Result<()> {
    match dt {
        Datatype::Uint8 => {
            let r = v.round();
            if !(0.0..=255.0).contains(&r) {
                return Err(McError::InvalidArgument(format!("value {v} overflows uint8")));
            }
            w.write_u8(r as u8)?;
        }
        Datatype::Int16 => {
            let r = v.round();
            if !((i16::MIN as f64)..=(i16::MAX as f64)).contains(&r) {
                return Err(McError::InvalidArgument(format!("value {v} overflows int16")));
            }
            w.write_i16::<LittleEndian>(r as i16)?;
        }
        Datatype::Uint16 => {
            let r = v.round();
            if !(0.0..=(u16::MAX as f64)).contains(&r) {
                return Err(McError::InvalidArgument(format!("value {v} overflows uint16")));
            }
            w.write_u16::<LittleEndian>(r as u16)?;
        }
        Datatype::Float32 => w.write_f32::<LittleEndian>(v as f32)?,
        Datatype::Float64 => w.write_f64::<LittleEndian>(v)?,
    }
    Ok(())
}

fn open_writer(path: &Path) -> Result<Box<dyn Write>> {
    let f = File::create(path)
        .map_err(|e| McError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let w = BufWriter::new(f);
    if is_gz(path) {
        Ok(Box::new(flate2::write::GzEncoder::new(w, flate2::Compression::fast())))
    } else {
        Ok(Box::new(w))
    }
}

pub fn save_volume<T: Scalar>(vol: &Volume3<T>, path: &Path, dt: Datatype) -> Result<()> {
    let mut w = open_writer(path)?;
    write_header(&mut w, vol.geom(), 1, dt, 0.0)?;
    for v in vol.data() {
        encode_value(&mut w, v.as_f64(), dt)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_cine<T: Scalar>(cine: &Cine4<T>, path: &Path, dt: Datatype) -> Result<()> {
    let times = cine.times();
    let step = if times.len() >= 2 { times[1] - times[0] } else { 1.0 };
    let mut w = open_writer(path)?;
    write_header(&mut w, cine.geom(), cine.len(), dt, step)?;
    for frame in cine.frames() {
        for v in frame.data() {
            encode_value(&mut w, v.as_f64(), dt)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Masks are written as uint8 with voxels in {0, 1}.
pub fn save_mask(mask: &Mask3, path: &Path) -> Result<()> {
    let mut w = open_writer(path)?;
    write_header(&mut w, mask.geom(), 1, Datatype::Uint8, 0.0)?;
    for &b in mask.data() {
        w.write_u8(if b { 1 } else { 0 })?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn float32_volume_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.nii");
        let geom = Geometry::new([8, 8, 8], [0.5, 0.5, 1.0], [1.0, -2.0, 3.0]).unwrap();
        let vol = Volume3::from_fn(geom, |i, j, k| (i as f32 * 0.1 + j as f32 * 0.01 + k as f32).sin());
        save_volume(&vol, &path, Datatype::Float32).unwrap();
        let back: Volume3<f32> = load_volume(&path).unwrap();
        assert_eq!(back.data(), vol.data(), "voxel data must be bit-exact");
        assert_eq!(back.dims(), vol.dims());
        for a in 0..3 {
            assert_abs_diff_eq!(back.spacing()[a], vol.spacing()[a], epsilon = 1e-6);
        }
    }

    #[test]
    fn constant_volume_roundtrip_gz() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.nii.gz");
        let vol = Volume3::filled(Geometry::isotropic([8, 8, 8]), 3.5f32);
        save_volume(&vol, &path, Datatype::Float32).unwrap();
        let back: Volume3<f32> = load_volume(&path).unwrap();
        assert!(back.data().iter().all(|&v| v == 3.5));
    }

    #[test]
    fn cine_roundtrip_and_header_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.nii");
        let geom = Geometry::isotropic([4, 4, 4]);
        let frames: Vec<_> = (0..20).map(|n| Volume3::filled(geom, n as f32)).collect();
        let cine = Cine4::uniform_times(frames, 2.0).unwrap();
        save_cine(&cine, &path, Datatype::Float32).unwrap();
        let hdr = read_header(&path).unwrap();
        assert_eq!(hdr.ndim, 4, "dim[0] must be 4 for a cine");
        assert_eq!(hdr.dims[3], 20, "dim[4] must be the frame count");
        let back: Cine4<f32> = load_cine(&path, Some(2.0)).unwrap();
        assert_eq!(back.len(), 20);
        for (a, b) in back.frames().iter().zip(cine.frames()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn cine_times_from_frame_rate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.nii");
        let geom = Geometry::isotropic([3, 3, 3]);
        let frames: Vec<_> = (0..10).map(|n| Volume3::filled(geom, n as f32)).collect();
        save_cine(&Cine4::uniform_times(frames, 1.0).unwrap(), &path, Datatype::Float32).unwrap();
        let cine: Cine4<f32> = load_cine(&path, Some(2.0)).unwrap();
        for (n, &t) in cine.times().iter().enumerate() {
            assert_abs_diff_eq!(t, n as f64 * 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn scl_slope_inter_applied() {
        // hand-build a uint8 file with slope 2, inter 1, raw voxel value 4
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.nii");
        let geom = Geometry::isotropic([2, 2, 2]);
        {
            let mut w = open_writer(&path).unwrap();
            write_header(&mut w, &geom, 1, Datatype::Uint8, 0.0).unwrap();
            w.flush().unwrap();
        }
        let mut bytes = std::fs::read(&path).unwrap();
        LittleEndian::write_f32(&mut bytes[112..], 2.0);
        LittleEndian::write_f32(&mut bytes[116..], 1.0);
        bytes.extend(std::iter::repeat_n(4u8, 8));
        std::fs::write(&path, &bytes).unwrap();
        let vol: Volume3<f32> = load_volume(&path).unwrap();
        assert!(vol.data().iter().all(|&v| v == 9.0), "2*4+1 = 9, got {:?}", vol.data());
    }

    #[test]
    fn mask_saved_as_uint8_zero_one() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.nii");
        let geom = Geometry::isotropic([4, 4, 4]);
        let mask = Mask3::from_fn(geom, |i, _, _| i % 2 == 0);
        save_mask(&mask, &path).unwrap();
        let hdr = read_header(&path).unwrap();
        assert_eq!(hdr.datatype, 2);
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes[VOX_OFFSET..].iter().all(|&b| b == 0 || b == 1));
        let back = load_mask(&path).unwrap();
        assert_eq!(back, mask);
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.nii");
        let vol = Volume3::filled(Geometry::isotropic([8, 8, 8]), 1.0f32);
        save_volume(&vol, &path, Datatype::Float32).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 100]).unwrap();
        match load_volume::<f32>(&path) {
            Err(McError::Malformed(_)) => {}
            other => panic!("expected Malformed, got {other:?}"),
        }
    }

    #[test]
    fn integer_overflow_rejected_on_save() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("o.nii");
        let vol = Volume3::filled(Geometry::isotropic([2, 2, 2]), 300.0f32);
        assert!(save_volume(&vol, &path, Datatype::Uint8).is_err());
        assert!(save_volume(&vol, &path, Datatype::Uint16).is_ok());
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.nii");
        std::fs::write(&path, vec![0u8; 400]).unwrap();
        assert!(load_volume::<f32>(&path).is_err());
    }
}
