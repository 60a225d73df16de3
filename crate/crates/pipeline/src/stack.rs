//! Volume ingestion and persistence.
//!
//! Two formats: a directory of 8-bit grayscale PNG slices named
//! `{stem}_{zzzz}.png` (masks mirrored in a `masks/` subdirectory), and a raw
//! little/big-endian array with a TOML sidecar manifest (`dims`, `dtype`,
//! `endianness`, `spacing_nm`, optional `labels`). Intensities are min-max
//! normalized per volume; the raw range is kept so integer volumes round-trip
//! bitwise.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use emstack_tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{PipelineError, Result};

/// Ordered slice sequence with optional aligned binary labels.
#[derive(Clone, Debug)]
pub struct VolumeStack<T: Scalar> {
    pub name: String,
    pub slices: Vec<Tensor<T>>,
    pub labels: Option<Vec<Tensor<T>>>,
    /// (z, y, x) physical spacing in nanometers.
    pub spacing_nm: (f64, f64, f64),
    /// Raw intensity range before normalization.
    pub intensity_range: (f64, f64),
}

impl<T: Scalar> VolumeStack<T> {
    pub fn depth(&self) -> usize {
        self.slices.len()
    }

    pub fn height(&self) -> usize {
        self.slices[0].shape()[1]
    }

    pub fn width(&self) -> usize {
        self.slices[0].shape()[2]
    }

    pub fn from_parts(
        name: impl Into<String>,
        slices: Vec<Tensor<T>>,
        labels: Option<Vec<Tensor<T>>>,
    ) -> Result<Self> {
        if slices.is_empty() {
            return Err(PipelineError::Format("volume has no slices".into()));
        }
        let shape = slices[0].shape().to_vec();
        for (i, s) in slices.iter().enumerate() {
            if s.shape() != shape.as_slice() {
                return Err(PipelineError::Format(format!(
                    "slice {i} resolution {:?} differs from slice 0 {:?}",
                    s.shape(),
                    shape
                )));
            }
        }
        if let Some(labels) = &labels {
            if labels.len() != slices.len() {
                return Err(PipelineError::Format(format!(
                    "{} labels for {} slices",
                    labels.len(),
                    slices.len()
                )));
            }
            for (i, l) in labels.iter().enumerate() {
                if l.shape() != shape.as_slice() {
                    return Err(PipelineError::Format(format!(
                        "label {i} resolution {:?} differs from slices {:?}",
                        l.shape(),
                        shape
                    )));
                }
            }
        }
        Ok(VolumeStack {
            name: name.into(),
            slices,
            labels,
            spacing_nm: (1.0, 1.0, 1.0),
            intensity_range: (0.0, 1.0),
        })
    }
}

/// Sidecar manifest of a raw volume.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawManifest {
    /// Data file, relative to the manifest.
    pub data: String,
    /// (z, y, x) extents.
    pub dims: [usize; 3],
    /// One of u8, u16, f32.
    pub dtype: String,
    /// "little" or "big".
    pub endianness: String,
    pub spacing_nm: [f64; 3],
    /// Optional u8 label file of the same dims (0 background, nonzero fg).
    #[serde(default)]
    pub labels: Option<String>,
}

fn list_png_slices(dir: &Path) -> Result<BTreeMap<usize, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| PipelineError::io(dir.display(), e))?;
    for entry in entries {
        let entry = entry.map_err(|e| PipelineError::io(dir.display(), e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        let Some((_, idx)) = stem.rsplit_once('_') else {
            continue;
        };
        if idx.len() == 4 {
            if let Ok(z) = idx.parse::<usize>() {
                out.insert(z, path);
            }
        }
    }
    Ok(out)
}

fn read_gray_png<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let img = image::open(path)
        .map_err(|e| PipelineError::Format(format!("{}: {e}", path.display())))?
        .into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img
        .into_raw()
        .into_iter()
        .map(|v| T::from_f64(v as f64))
        .collect();
    Ok(Tensor::from_vec(&[1, h, w], data).expect("png shape"))
}

fn normalize_volume<T: Scalar>(slices: &mut [Tensor<T>]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for s in slices.iter() {
        for v in s.data() {
            let v = v.as_f64();
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !lo.is_finite() || hi <= lo {
        return (0.0, 1.0);
    }
    let span = hi - lo;
    for s in slices.iter_mut() {
        for v in s.data_mut() {
            *v = T::from_f64((v.as_f64() - lo) / span);
        }
    }
    (lo, hi)
}

/// Load a slice-directory volume. Labels come from `<dir>/masks` (mirrored
/// file names) or an explicit override directory.
pub fn load_slice_dir<T: Scalar>(dir: &Path, masks_dir: Option<&Path>) -> Result<VolumeStack<T>> {
    let found = list_png_slices(dir)?;
    if found.is_empty() {
        return Err(PipelineError::Format(format!(
            "{}: no {{stem}}_{{zzzz}}.png slices found",
            dir.display()
        )));
    }
    let max_z = *found.keys().last().unwrap();
    let missing: Vec<usize> = (0..=max_z).filter(|z| !found.contains_key(z)).collect();
    if !missing.is_empty() {
        return Err(PipelineError::Gap {
            path: dir.display().to_string(),
            missing,
        });
    }
    let mut slices = Vec::with_capacity(found.len());
    for path in found.values() {
        slices.push(read_gray_png::<T>(path)?);
    }
    let default_masks = dir.join("masks");
    let masks_dir = masks_dir
        .map(Path::to_path_buf)
        .or_else(|| default_masks.is_dir().then_some(default_masks));
    let labels = match masks_dir {
        Some(md) => {
            let mut labels = Vec::with_capacity(found.len());
            for path in found.values() {
                let name = path.file_name().unwrap();
                let mp = md.join(name);
                if !mp.exists() {
                    return Err(PipelineError::Format(format!(
                        "missing mask {} for slice {}",
                        mp.display(),
                        path.display()
                    )));
                }
                let m = read_gray_png::<T>(&mp)?;
                labels.push(m.map(|v| if v.as_f64() > 127.0 { T::one() } else { T::zero() }));
            }
            Some(labels)
        }
        None => None,
    };
    let name = dir
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or("volume")
        .to_string();
    let mut stack = VolumeStack::from_parts(name, slices, labels)?;
    stack.intensity_range = normalize_volume(&mut stack.slices);
    Ok(stack)
}

/// Load a raw volume through its TOML sidecar manifest.
pub fn load_raw<T: Scalar>(manifest_path: &Path) -> Result<VolumeStack<T>> {
    let text = std::fs::read_to_string(manifest_path)
        .map_err(|e| PipelineError::io(manifest_path.display(), e))?;
    let manifest: RawManifest = toml::from_str(&text)
        .map_err(|e| PipelineError::Format(format!("{}: {e}", manifest_path.display())))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let data_path = base.join(&manifest.data);
    let bytes =
        std::fs::read(&data_path).map_err(|e| PipelineError::io(data_path.display(), e))?;
    let [d, h, w] = manifest.dims;
    let n = d * h * w;
    let big = match manifest.endianness.as_str() {
        "little" => false,
        "big" => true,
        other => {
            return Err(PipelineError::Format(format!(
                "unknown endianness {other}"
            )))
        }
    };
    let values: Vec<f64> = match manifest.dtype.as_str() {
        "u8" => {
            if bytes.len() != n {
                return Err(PipelineError::Format(format!(
                    "{}: {} bytes for {} u8 voxels",
                    data_path.display(),
                    bytes.len(),
                    n
                )));
            }
            bytes.iter().map(|&b| b as f64).collect()
        }
        "u16" => {
            if bytes.len() != 2 * n {
                return Err(PipelineError::Format(format!(
                    "{}: {} bytes for {} u16 voxels",
                    data_path.display(),
                    bytes.len(),
                    n
                )));
            }
            bytes
                .chunks_exact(2)
                .map(|c| {
                    let arr = [c[0], c[1]];
                    let v = if big {
                        u16::from_be_bytes(arr)
                    } else {
                        u16::from_le_bytes(arr)
                    };
                    v as f64
                })
                .collect()
        }
        "f32" => {
            if bytes.len() != 4 * n {
                return Err(PipelineError::Format(format!(
                    "{}: {} bytes for {} f32 voxels",
                    data_path.display(),
                    bytes.len(),
                    n
                )));
            }
            bytes
                .chunks_exact(4)
                .map(|c| {
                    let arr = [c[0], c[1], c[2], c[3]];
                    let v = if big {
                        f32::from_be_bytes(arr)
                    } else {
                        f32::from_le_bytes(arr)
                    };
                    v as f64
                })
                .collect()
        }
        other => return Err(PipelineError::Format(format!("unknown dtype {other}"))),
    };
    let mut slices = Vec::with_capacity(d);
    for z in 0..d {
        let plane = &values[z * h * w..(z + 1) * h * w];
        let data = plane.iter().map(|&v| T::from_f64(v)).collect();
        slices.push(Tensor::from_vec(&[1, h, w], data).expect("raw shape"));
    }
    let labels = match &manifest.labels {
        Some(rel) => {
            let lp = base.join(rel);
            let lbytes = std::fs::read(&lp).map_err(|e| PipelineError::io(lp.display(), e))?;
            if lbytes.len() != n {
                return Err(PipelineError::Format(format!(
                    "{}: {} bytes for {} u8 labels",
                    lp.display(),
                    lbytes.len(),
                    n
                )));
            }
            let mut labels = Vec::with_capacity(d);
            for z in 0..d {
                let plane = &lbytes[z * h * w..(z + 1) * h * w];
                let data = plane
                    .iter()
                    .map(|&b| if b > 0 { T::one() } else { T::zero() })
                    .collect();
                labels.push(Tensor::from_vec(&[1, h, w], data).expect("label shape"));
            }
            Some(labels)
        }
        None => None,
    };
    let name = manifest_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("volume")
        .to_string();
    let mut stack = VolumeStack::from_parts(name, slices, labels)?;
    stack.spacing_nm = (
        manifest.spacing_nm[0],
        manifest.spacing_nm[1],
        manifest.spacing_nm[2],
    );
    stack.intensity_range = normalize_volume(&mut stack.slices);
    Ok(stack)
}

/// Auto-detect: directories are slice dirs, files are raw manifests.
pub fn load_stack<T: Scalar>(path: &Path, masks_dir: Option<&Path>) -> Result<VolumeStack<T>> {
    if !path.exists() {
        return Err(PipelineError::io(
            path.display(),
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such path"),
        ));
    }
    if path.is_dir() {
        load_slice_dir(path, masks_dir)
    } else {
        load_raw(path)
    }
}

/// Write a volume as `{stem}_{zzzz}.png` slices (denormalized to the raw
/// intensity range) plus a `masks/` subdirectory when labels exist.
pub fn save_slice_dir<T: Scalar>(stack: &VolumeStack<T>, dir: &Path, stem: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir.display(), e))?;
    let (lo, hi) = stack.intensity_range;
    let span = hi - lo;
    for (z, s) in stack.slices.iter().enumerate() {
        let (h, w) = (s.shape()[1], s.shape()[2]);
        let mut img = image::GrayImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let v = (s.at3(0, y, x).as_f64() * span + lo).round().clamp(0.0, 255.0);
                img.put_pixel(x as u32, y as u32, image::Luma([v as u8]));
            }
        }
        let path = dir.join(format!("{stem}_{z:04}.png"));
        img.save(&path)
            .map_err(|e| PipelineError::Format(format!("{}: {e}", path.display())))?;
    }
    if let Some(labels) = &stack.labels {
        let md = dir.join("masks");
        std::fs::create_dir_all(&md).map_err(|e| PipelineError::io(md.display(), e))?;
        for (z, m) in labels.iter().enumerate() {
            let (h, w) = (m.shape()[1], m.shape()[2]);
            let mut img = image::GrayImage::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    let v = if m.at3(0, y, x).as_f64() > 0.5 { 255u8 } else { 0 };
                    img.put_pixel(x as u32, y as u32, image::Luma([v]));
                }
            }
            let path = md.join(format!("{stem}_{z:04}.png"));
            img.save(&path)
                .map_err(|e| PipelineError::Format(format!("{}: {e}", path.display())))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_stack(depth: usize, h: usize, w: usize) -> VolumeStack<f64> {
        // Slices hold normalized values, raw range recorded, as after load.
        let slices = (0..depth)
            .map(|z| {
                let data = (0..h * w)
                    .map(|i| (((i + 13 * z) * 37) % 256) as f64 / 255.0)
                    .collect();
                Tensor::from_vec(&[1, h, w], data).unwrap()
            })
            .collect();
        let labels = (0..depth)
            .map(|z| {
                let data = (0..h * w)
                    .map(|i| if (i + z) % 5 == 0 { 1.0 } else { 0.0 })
                    .collect();
                Tensor::from_vec(&[1, h, w], data).unwrap()
            })
            .collect();
        let mut s = VolumeStack::from_parts("ramp", slices, Some(labels)).unwrap();
        s.intensity_range = (0.0, 255.0);
        s
    }

    #[test]
    fn png_directory_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let stack = ramp_stack(8, 16, 16);
        save_slice_dir(&stack, dir.path(), "vol").unwrap();
        let loaded: VolumeStack<f64> = load_stack(dir.path(), None).unwrap();
        assert_eq!(loaded.depth(), 8);
        assert!(loaded.labels.is_some());
        // Denormalized voxel values reproduce the original bytes exactly.
        let (lo, hi) = loaded.intensity_range;
        for (orig, got) in stack.slices.iter().zip(loaded.slices.iter()) {
            for (a, b) in orig.data().iter().zip(got.data()) {
                let raw = (b * (hi - lo) + lo).round();
                assert_eq!((a * 255.0).round(), raw);
            }
        }
        for (orig, got) in stack
            .labels
            .as_ref()
            .unwrap()
            .iter()
            .zip(loaded.labels.as_ref().unwrap())
        {
            assert_eq!(orig.data(), got.data());
        }
    }

    #[test]
    fn gap_in_indices_is_reported_with_the_missing_list() {
        let dir = tempfile::tempdir().unwrap();
        let stack = ramp_stack(4, 8, 8);
        save_slice_dir(&stack, dir.path(), "vol").unwrap();
        std::fs::remove_file(dir.path().join("vol_0001.png")).unwrap();
        std::fs::remove_file(dir.path().join("vol_0002.png")).unwrap();
        let err = load_stack::<f64>(dir.path(), None).unwrap_err();
        match err {
            PipelineError::Gap { missing, .. } => assert_eq!(missing, vec![1, 2]),
            other => panic!("expected gap error, got {other}"),
        }
    }

    #[test]
    fn resolution_mismatch_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let stack = ramp_stack(2, 8, 8);
        save_slice_dir(&stack, dir.path(), "vol").unwrap();
        // Overwrite slice 1 with a different resolution.
        let img = image::GrayImage::new(4, 4);
        img.save(dir.path().join("vol_0001.png")).unwrap();
        let err = load_stack::<f64>(dir.path(), None).unwrap_err();
        assert!(matches!(err, PipelineError::Format(_)), "{err}");
    }

    #[test]
    fn raw_u8_volume_with_manifest_loads_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<u8> = (0..4 * 32 * 32).map(|i| (i % 251) as u8).collect();
        std::fs::write(dir.path().join("vol.bin"), &data).unwrap();
        let manifest = r#"
data = "vol.bin"
dims = [4, 32, 32]
dtype = "u8"
endianness = "little"
spacing_nm = [40.0, 5.0, 5.0]
"#;
        let mpath = dir.path().join("vol.toml");
        std::fs::write(&mpath, manifest).unwrap();
        let stack: VolumeStack<f64> = load_stack(&mpath, None).unwrap();
        assert_eq!(stack.depth(), 4);
        assert_eq!((stack.height(), stack.width()), (32, 32));
        assert_eq!(stack.spacing_nm, (40.0, 5.0, 5.0));
        // Bitwise round trip of raw voxel values through denormalization.
        let (lo, hi) = stack.intensity_range;
        for (z, s) in stack.slices.iter().enumerate() {
            for (i, v) in s.data().iter().enumerate() {
                let raw = (v * (hi - lo) + lo).round() as u8;
                assert_eq!(raw, data[z * 32 * 32 + i]);
            }
        }
    }

    #[test]
    fn normalized_intensities_cover_unit_interval() {
        let dir = tempfile::tempdir().unwrap();
        let stack = ramp_stack(3, 8, 8);
        save_slice_dir(&stack, dir.path(), "vol").unwrap();
        let loaded: VolumeStack<f64> = load_stack(dir.path(), None).unwrap();
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for s in &loaded.slices {
            for v in s.data() {
                lo = lo.min(*v);
                hi = hi.max(*v);
            }
        }
        assert_eq!(lo, 0.0);
        assert_eq!(hi, 1.0);
    }
}
