//! On-disk layout.
//!
//! ```text
//! <root>/<case_id>/{t1ce,t2,flair,seg}.axtn     3-D [H,W,D] volumes
//! <cache>/slices/<case_id>_<k>.img.axtn         [3,H,W] image
//! <cache>/slices/<case_id>_<k>.msk.axtn         [3,H,W] WT/TC/ET planes
//! <cache>/split.json                            case ids per partition
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use super::{RegionMask, SlicePair, Split, VolumeSample, SEQUENCES};
use crate::error::{Error, Result};
use crate::tensor::{io, Tensor};

pub const SEG_FILE: &str = "seg";
pub const SLICE_DIR: &str = "slices";
pub const SPLIT_FILE: &str = "split.json";

pub fn write_case(root: &Path, v: &VolumeSample) -> Result<()> {
    let (h, w, d) = v.dims();
    let dir = root.join(&v.case_id);
    let plane = h * w * d;
    for (ch, name) in SEQUENCES.iter().enumerate() {
        let t = Tensor::new(vec![h, w, d], v.channels.data()[ch * plane..(ch + 1) * plane].to_vec())?;
        io::write(dir.join(format!("{name}.axtn")), &t)?;
    }
    let seg = Tensor::new(vec![h, w, d], v.labels.iter().map(|&l| l as f32).collect())?;
    io::write(dir.join(format!("{SEG_FILE}.axtn")), &seg)
}

pub fn read_case(root: &Path, case_id: &str) -> Result<VolumeSample> {
    let dir = root.join(case_id);
    let missing: Vec<&str> = SEQUENCES
        .iter()
        .chain(std::iter::once(&SEG_FILE))
        .copied()
        .filter(|n| !dir.join(format!("{n}.axtn")).is_file())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!("case {case_id} is missing sequences: {}", missing.join(", "))));
    }
    let mut shape: Option<Vec<usize>> = None;
    let mut channels = Vec::new();
    for name in SEQUENCES {
        let path = dir.join(format!("{name}.axtn"));
        let t: Tensor<f32> = io::read(&path)?;
        match &shape {
            None if t.ndim() == 3 => shape = Some(t.shape().to_vec()),
            Some(s) if s.as_slice() == t.shape() => {}
            _ => return Err(Error::format(&path, format!("shape {:?} is not a 3-D volume matching the other sequences", t.shape()))),
        }
        channels.extend_from_slice(t.data());
    }
    let shape = shape.expect("three sequences read");
    let seg_path = dir.join(format!("{SEG_FILE}.axtn"));
    let seg: Tensor<f32> = io::read(&seg_path)?;
    if seg.shape() != shape.as_slice() {
        return Err(Error::format(&seg_path, format!("segmentation shape {:?} differs from sequences {shape:?}", seg.shape())));
    }
    let labels = seg
        .data()
        .iter()
        .map(|&v| {
            if v.fract() == 0.0 && (0.0..=255.0).contains(&v) {
                Ok(v as u8)
            } else {
                Err(Error::Data(format!("case {case_id}: non-integer label value {v}")))
            }
        })
        .collect::<Result<Vec<u8>>>()?;
    VolumeSample::new(case_id, Tensor::new(vec![3, shape[0], shape[1], shape[2]], channels)?, labels)
}

/// Sorted names of the subdirectories of `root`.
pub fn list_cases(root: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if entry.path().is_dir() {
            ids.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    Ok(ids)
}

fn slice_stem(case_id: &str, slice: usize) -> String {
    format!("{case_id}_{slice}")
}

pub fn write_slice(cache: &Path, pair: &SlicePair) -> Result<()> {
    let dir = cache.join(SLICE_DIR);
    let stem = slice_stem(&pair.case_id, pair.slice);
    io::write(dir.join(format!("{stem}.img.axtn")), &pair.image)?;
    io::write(dir.join(format!("{stem}.msk.axtn")), &pair.mask.to_tensor())
}

pub fn read_slice(cache: &Path, case_id: &str, slice: usize) -> Result<SlicePair> {
    let dir = cache.join(SLICE_DIR);
    let stem = slice_stem(case_id, slice);
    let image: Tensor<f32> = io::read(dir.join(format!("{stem}.img.axtn")))?;
    let mask = RegionMask::from_tensor(&io::read(dir.join(format!("{stem}.msk.axtn")))?)?;
    if image.shape() != [3, mask.height, mask.width] {
        return Err(Error::Data(format!("{stem}: image {:?} and mask {}x{} disagree", image.shape(), mask.height, mask.width)));
    }
    Ok(SlicePair { case_id: case_id.to_string(), slice, image, mask })
}

/// Cached slice indices of each case, ascending.
pub fn cached_slices(cache: &Path, case_id: &str) -> Result<Vec<usize>> {
    let dir = cache.join(SLICE_DIR);
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let prefix = format!("{case_id}_");
    let mut out = Vec::new();
    for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let name = entry.map_err(|e| Error::io(&dir, e))?.file_name().to_string_lossy().into_owned();
        if let Some(k) = name.strip_prefix(&prefix).and_then(|r| r.strip_suffix(".img.axtn")).and_then(|k| k.parse().ok()) {
            out.push(k);
        }
    }
    out.sort_unstable();
    Ok(out)
}

/// Every cached slice of `case_ids`, in (case, slice) order.
pub fn load_slices(cache: &Path, case_ids: &[String]) -> Result<Vec<SlicePair>> {
    let mut out = Vec::new();
    for id in case_ids {
        for k in cached_slices(cache, id)? {
            out.push(read_slice(cache, id, k)?);
        }
    }
    Ok(out)
}

/// Removes every cached slice of `case_id`.
pub fn clear_slices(cache: &Path, case_id: &str) -> Result<()> {
    let dir = cache.join(SLICE_DIR);
    for k in cached_slices(cache, case_id)? {
        for ext in ["img", "msk"] {
            let p = dir.join(format!("{}.{ext}.axtn", slice_stem(case_id, k)));
            fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
        }
    }
    Ok(())
}

pub fn split_path(cache: &Path) -> PathBuf {
    cache.join(SPLIT_FILE)
}

pub fn write_split(cache: &Path, split: &Split) -> Result<()> {
    let path = split_path(cache);
    fs::create_dir_all(cache).map_err(|e| Error::io(cache, e))?;
    let mut text = serde_json::to_string_pretty(split)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_split(cache: &Path) -> Result<Split> {
    let path = split_path(cache);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
}
