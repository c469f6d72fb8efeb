//! Grad-CAM heatmaps on named activations and their colour overlay.
//!
//! The target is the spatial sum of one region channel's logits. Each
//! feature map at the hooked layer is weighted by the spatial mean of its
//! gradient; the ReLU of the weighted sum is upsampled to the input size and
//! divided by its maximum.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::data::resize_bilinear;
use crate::error::{Error, Result};
use crate::model::{Model, LAYER_ATTENTION1, LAYER_DEBLOCK3_CONV, LAYER_FINAL_CONV};
use crate::tensor::{Scalar, Tensor};

pub const OVERLAY_ALPHA: f64 = 0.4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    Wt,
    Tc,
    Et,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Wt, Region::Tc, Region::Et];

    pub fn channel(self) -> usize {
        self as usize
    }
}

impl FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "wt" => Ok(Region::Wt),
            "tc" => Ok(Region::Tc),
            "et" => Ok(Region::Et),
            _ => Err(Error::Config(format!("unknown region {s:?}; expected wt, tc or et"))),
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(["wt", "tc", "et"][self.channel()])
    }
}

/// Short names for the three visualised layers; anything else is taken as
/// a dotted activation name.
pub fn resolve_layer(name: &str) -> &str {
    match name {
        "final_conv" => LAYER_FINAL_CONV,
        "attention1" => LAYER_ATTENTION1,
        "deblock3_conv" => LAYER_DEBLOCK3_CONV,
        other => other,
    }
}

pub const DEFAULT_CAM_LAYERS: [&str; 3] = [LAYER_FINAL_CONV, LAYER_ATTENTION1, LAYER_DEBLOCK3_CONV];

#[derive(Clone, Debug, PartialEq)]
pub struct GradCamRequest {
    pub layer: String,
    pub region: Region,
    /// Multiplier on the target scalar.
    pub target_scale: f64,
}

impl GradCamRequest {
    pub fn new(layer: impl Into<String>, region: Region) -> Self {
        GradCamRequest { layer: layer.into(), region, target_scale: 1.0 }
    }
}

/// Values in `[0,1]` at input resolution, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

/// Heatmap for one `[3,H,W]` image. Model parameters are read only.
pub fn gradcam<T: Scalar>(model: &Model<T>, image: &Tensor<T>, req: &GradCamRequest) -> Result<Heatmap> {
    let (h, w) = match *image.shape() {
        [3, h, w] => (h, w),
        ref s => return Err(Error::shape("gradcam", format!("image must be [3,H,W], got {s:?}"))),
    };
    if !(req.target_scale > 0.0) {
        return Err(Error::Config(format!("target scale must be positive, got {}", req.target_scale)));
    }
    let layer = resolve_layer(&req.layer);
    let x = image.reshape(vec![1, 3, h, w])?;
    let mut f = model.forward_graph_input_grad(x)?;
    let a = *f.taps.get(layer).ok_or_else(|| {
        let known: Vec<&str> = f.taps.keys().map(String::as_str).collect();
        Error::Config(format!("unknown layer {layer:?}; available: {}", known.join(", ")))
    })?;
    let g = &mut f.graph;
    let logit = g.narrow(f.logits, 1, req.region.channel(), 1)?;
    let s = g.sum_all(logit)?;
    let s = g.scale(s, T::lit(req.target_scale))?;
    g.backward(s)?;
    let act = g.value(a);
    let [k, ah, aw] = match *act.shape() {
        [1, k, ah, aw] if k > 0 && ah > 0 && aw > 0 => [k, ah, aw],
        ref sh => return Err(Error::shape("gradcam", format!("activation {layer} has unusable shape {sh:?}"))),
    };
    let grad = g.grad(a).ok_or_else(|| Error::Numeric(format!("no gradient reached {layer}")))?;
    let plane = ah * aw;
    let mut cam = vec![0f64; plane];
    for c in 0..k {
        let gs = &grad.data()[c * plane..(c + 1) * plane];
        let weight = gs.iter().map(|v| v.as_f64()).sum::<f64>() / plane as f64;
        for (m, v) in cam.iter_mut().zip(&act.data()[c * plane..(c + 1) * plane]) {
            *m += weight * v.as_f64();
        }
    }
    let cam: Vec<f32> = cam.into_iter().map(|v| v.max(0.0) as f32).collect();
    let mut values = if (ah, aw) == (h, w) { cam } else { resize_bilinear(&cam, ah, aw, h, w) };
    let max = values.iter().copied().fold(0f32, f32::max);
    if max > 0.0 {
        for v in &mut values {
            *v = (*v / max).clamp(0.0, 1.0);
        }
    }
    Ok(Heatmap { height: h, width: w, values })
}

/// Packed 8-bit RGB raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

const STOPS: [(f64, [f64; 3]); 4] = [
    (0.0, [0.0, 255.0, 0.0]),
    (1.0 / 3.0, [255.0, 255.0, 0.0]),
    (2.0 / 3.0, [255.0, 165.0, 0.0]),
    (1.0, [255.0, 0.0, 0.0]),
];

/// Green through yellow and orange to red.
pub fn colormap(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    for pair in STOPS.windows(2) {
        let ((t0, c0), (t1, c1)) = (pair[0], pair[1]);
        if v <= t1 {
            let f = (v - t0) / (t1 - t0);
            return [0, 1, 2].map(|i| c0[i] + f * (c1[i] - c0[i]));
        }
    }
    STOPS[3].1
}

/// Blends the colormap over the first image channel with per-pixel weight
/// `0.4·h`, so a zero heatmap leaves the grayscale base untouched.
pub fn overlay(image: &Tensor<f32>, heat: &Heatmap) -> Result<RgbImage> {
    let (h, w) = match *image.shape() {
        [_, h, w] | [h, w] => (h, w),
        ref s => return Err(Error::shape("overlay", format!("image must be [C,H,W] or [H,W], got {s:?}"))),
    };
    if (h, w) != (heat.height, heat.width) {
        return Err(Error::shape("overlay", format!("image {h}x{w} vs heatmap {}x{}", heat.height, heat.width)));
    }
    let gray = &image.data()[..h * w];
    let mut data = Vec::with_capacity(3 * h * w);
    for (&g, &v) in gray.iter().zip(&heat.values) {
        let base = (g as f64).clamp(0.0, 1.0) * 255.0;
        let a = OVERLAY_ALPHA * (v as f64).clamp(0.0, 1.0);
        let c = colormap(v as f64);
        for ch in c {
            data.push(((1.0 - a) * base + a * ch).round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(RgbImage { width: w, height: h, data })
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

/// Parses the single-space header that [`encode_ppm`] writes.
pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let bad = |m: &str| Error::Data(format!("not a P6 image: {m}"));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    pos += 1;
    if fields[0] != "P6" {
        return Err(bad("wrong magic"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad dimension"));
    let (width, height, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(bad("max value must be 255"));
    }
    let data = bytes.get(pos..).unwrap_or_default().to_vec();
    if data.len() != 3 * width * height {
        return Err(bad("payload size"));
    }
    Ok(RgbImage { width, height, data })
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}
