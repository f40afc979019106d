use dceus_mc::nifti::{load_cine, Datatype};
use dceus_mc::{Cine4F32, Mask3, McError, Result, Volume3F32};
use serde::Serialize;
use std::path::{Path, PathBuf};

pub fn require_exists(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(McError::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no such file: {}", path.display()),
        )));
    }
    Ok(())
}

pub fn load_cine_f32(path: &Path, frame_rate: Option<f64>) -> Result<Cine4F32> {
    require_exists(path)?;
    load_cine::<f32>(path, frame_rate)
}

/// A 4D mask sequence stored as a cine: every nonzero voxel is inside.
pub fn load_mask_cine(path: &Path) -> Result<Vec<Mask3>> {
    let cine = load_cine_f32(path, None)?;
    Ok(cine
        .frames()
        .iter()
        .map(|f: &Volume3F32| Mask3::from_fn(*f.geom(), |i, j, k| f.get(i, j, k) != 0.0))
        .collect())
}

pub fn parse_datatype(name: &str) -> Result<Datatype> {
    Datatype::from_name(name)
}

/// "A:B" (half-open, B exclusive) into a range.
pub fn parse_range(s: &str) -> Result<std::ops::Range<usize>> {
    let bad = || McError::InvalidArgument(format!("range '{s}' is not of the form A:B"));
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    let start = a.trim().parse::<usize>().map_err(|_| bad())?;
    let end = b.trim().parse::<usize>().map_err(|_| bad())?;
    if end <= start {
        return Err(McError::InvalidArgument(format!("empty range '{s}'")));
    }
    Ok(start..end)
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| McError::InvalidArgument(format!("serialize {}: {e}", path.display())))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// Default sibling path: `out.nii.gz` -> `out.nii.gz.<suffix>`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}
