use super::{CropRect, RegionMask, SlicePair, VolumeSample, LABEL_EDEMA, LABEL_ET, LABEL_NCR};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Minimum tumor fraction of a slice for it to be kept.
pub const DEFAULT_TUMOR_THRESHOLD: f64 = 0.007;
/// Crop reported for the BraTS 2021 brain box.
pub const BRATS_CROP: (usize, usize) = (128, 164);
pub const DEFAULT_SIZE: (usize, usize) = (224, 224);

#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessOptions {
    pub tumor_threshold: f64,
    pub fixed_crop: Option<(usize, usize)>,
    pub size: (usize, usize),
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        PreprocessOptions { tumor_threshold: DEFAULT_TUMOR_THRESHOLD, fixed_crop: None, size: DEFAULT_SIZE }
    }
}

/// Slices whose tumor fraction (nonzero labels over the full `H·W`) meets `threshold`.
pub fn select_slices(v: &VolumeSample, threshold: f64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!("tumor threshold {threshold} outside [0,1]")));
    }
    let (h, w, d) = v.dims();
    let mut counts = vec![0usize; d];
    for (i, &l) in v.labels.iter().enumerate() {
        if l != 0 {
            counts[i % d] += 1;
        }
    }
    let area = (h * w) as f64;
    Ok((0..d).filter(|&k| counts[k] as f64 / area >= threshold).collect())
}

/// Crops H and W to the tight box around nonzero voxels of any channel in
/// the retained slices (all slices if none were selected). With `fixed`,
/// the box is then centre-padded or centre-cropped to exactly that size.
pub fn crop_to_brain(v: &VolumeSample, fixed: Option<(usize, usize)>) -> Result<VolumeSample> {
    let (h, w, d) = v.dims();
    let slices: Vec<usize> = v.meta.retained.clone().unwrap_or_else(|| (0..d).collect());
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    let data = v.channels.data();
    let plane = h * w * d;
    for r in 0..h {
        for c in 0..w {
            let base = (r * w + c) * d;
            let hit = slices.iter().any(|&k| (0..3).any(|ch| data[ch * plane + base + k] != 0.0));
            if hit {
                r0 = r0.min(r);
                r1 = r1.max(r);
                c0 = c0.min(c);
                c1 = c1.max(c);
            }
        }
    }
    if r0 == usize::MAX {
        return Err(Error::Data(format!("{}: no brain voxels", v.case_id)));
    }
    let mut rect = CropRect { row0: r0 as isize, col0: c0 as isize, height: r1 - r0 + 1, width: c1 - c0 + 1 };
    if let Some((fh, fw)) = fixed {
        if fh == 0 || fw == 0 {
            return Err(Error::Config("fixed crop dims must be positive".into()));
        }
        rect.row0 -= (fh as isize - rect.height as isize).div_euclid(2);
        rect.col0 -= (fw as isize - rect.width as isize).div_euclid(2);
        rect.height = fh;
        rect.width = fw;
    }
    let (ch_, cw) = (rect.height, rect.width);
    let mut channels = vec![0f32; 3 * ch_ * cw * d];
    let mut labels = vec![0u8; ch_ * cw * d];
    for r in 0..ch_ {
        let sr = rect.row0 + r as isize;
        if sr < 0 || sr >= h as isize {
            continue;
        }
        for c in 0..cw {
            let sc = rect.col0 + c as isize;
            if sc < 0 || sc >= w as isize {
                continue;
            }
            let src = (sr as usize * w + sc as usize) * d;
            let dst = (r * cw + c) * d;
            for ch in 0..3 {
                channels[ch * ch_ * cw * d + dst..ch * ch_ * cw * d + dst + d]
                    .copy_from_slice(&data[ch * plane + src..ch * plane + src + d]);
            }
            labels[dst..dst + d].copy_from_slice(&v.labels[src..src + d]);
        }
    }
    let mut out = VolumeSample::new(v.case_id.clone(), Tensor::new(vec![3, ch_, cw, d], channels)?, labels)?;
    out.meta = v.meta.clone();
    out.meta.crop = Some(rect);
    Ok(out)
}

/// `(x − min)/(max − min)`; a constant input maps to zeros.
pub fn minmax_normalize(x: &[f32]) -> Vec<f32> {
    let (lo, hi) = x.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if x.is_empty() || !(hi > lo) {
        return vec![0.0; x.len()];
    }
    let span = hi - lo;
    x.iter().map(|&v| ((v - lo) / span).clamp(0.0, 1.0)).collect()
}

/// WT = {1,2,4}, TC = {1,4}, ET = {4}.
pub fn compose_regions(labels: &[u8], height: usize, width: usize) -> Result<RegionMask> {
    if labels.len() != height * width {
        return Err(Error::Data(format!("label slice has {} pixels, expected {}", labels.len(), height * width)));
    }
    let mut m = RegionMask::empty(height, width);
    for (i, &l) in labels.iter().enumerate() {
        let (wt, tc, et) = match l {
            0 => (0, 0, 0),
            LABEL_EDEMA => (1, 0, 0),
            LABEL_NCR => (1, 1, 0),
            LABEL_ET => (1, 1, 1),
            other => return Err(Error::Data(format!("unknown label value {other}"))),
        };
        m.wt[i] = wt;
        m.tc[i] = tc;
        m.et[i] = et;
    }
    Ok(m)
}

/// Half-pixel-centre source coordinate for output index `dst`.
fn source_coord(dst: usize, in_len: usize, out_len: usize) -> f64 {
    (dst as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5
}

/// Bilinear resize of one `h×w` plane (half-pixel centres, edge clamped).
pub fn resize_bilinear(src: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let axis = |out_len: usize, in_len: usize| -> Vec<(usize, usize, f32)> {
        (0..out_len)
            .map(|i| {
                let s = source_coord(i, in_len, out_len).clamp(0.0, (in_len - 1) as f64);
                let lo = s.floor() as usize;
                let hi = (lo + 1).min(in_len - 1);
                (lo, hi, (s - lo as f64) as f32)
            })
            .collect()
    };
    let rows = axis(oh, h);
    let cols = axis(ow, w);
    let mut out = Vec::with_capacity(oh * ow);
    for &(r0, r1, fr) in &rows {
        for &(c0, c1, fc) in &cols {
            let top = src[r0 * w + c0] * (1.0 - fc) + src[r0 * w + c1] * fc;
            let bot = src[r1 * w + c0] * (1.0 - fc) + src[r1 * w + c1] * fc;
            out.push(top * (1.0 - fr) + bot * fr);
        }
    }
    out
}

fn resize_nearest(src: &[u8], h: usize, w: usize, oh: usize, ow: usize) -> Vec<u8> {
    let pick = |i: usize, in_len: usize, out_len: usize| (((i as f64 + 0.5) * in_len as f64 / out_len as f64) as usize).min(in_len - 1);
    let mut out = Vec::with_capacity(oh * ow);
    for r in 0..oh {
        let sr = pick(r, h, oh);
        for c in 0..ow {
            out.push(src[sr * w + pick(c, w, ow)]);
        }
    }
    out
}

/// Bilinear image channels, nearest-neighbour masks.
pub fn resize(image: &Tensor<f32>, mask: &RegionMask, to: (usize, usize)) -> Result<SlicePair> {
    let [c, h, w] = match *image.shape() {
        [c, h, w] => [c, h, w],
        ref s => return Err(Error::Data(format!("image must be [C,H,W], got {s:?}"))),
    };
    if (mask.height, mask.width) != (h, w) {
        return Err(Error::Data(format!("mask {}x{} does not match image {h}x{w}", mask.height, mask.width)));
    }
    let (oh, ow) = to;
    if oh == 0 || ow == 0 || h == 0 || w == 0 {
        return Err(Error::Data("resize dims must be positive".into()));
    }
    let data: Vec<f32> = image.data().chunks(h * w).flat_map(|p| resize_bilinear(p, h, w, oh, ow)).collect();
    let [wt, tc, et] = mask.planes().map(|p| resize_nearest(p, h, w, oh, ow));
    let mask = RegionMask { height: oh, width: ow, wt, tc, et };
    if !mask.is_nested() {
        return Err(Error::Data("resized mask violates et ≤ tc ≤ wt".into()));
    }
    Ok(SlicePair { case_id: String::new(), slice: 0, image: Tensor::new(vec![c, oh, ow], data)?, mask })
}

/// select → crop → per-slice per-channel normalise → compose → resize.
pub fn preprocess_volume(v: &VolumeSample, opts: &PreprocessOptions) -> Result<Vec<SlicePair>> {
    let keep = select_slices(v, opts.tumor_threshold)?;
    if keep.is_empty() {
        return Ok(Vec::new());
    }
    let mut v = v.clone();
    v.meta.retained = Some(keep.clone());
    let cropped = crop_to_brain(&v, opts.fixed_crop)?;
    let (h, w, _) = cropped.dims();
    keep.iter()
        .map(|&k| {
            let image: Vec<f32> = (0..3).flat_map(|ch| minmax_normalize(&cropped.channel_slice(ch, k))).collect();
            let mask = compose_regions(&cropped.label_slice(k), h, w)?;
            let mut pair = resize(&Tensor::new(vec![3, h, w], image)?, &mask, opts.size)?;
            pair.case_id = v.case_id.clone();
            pair.slice = k;
            Ok(pair)
        })
        .collect()
}
