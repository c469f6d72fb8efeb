//! Synthetic multi-sequence volumes: an ellipsoidal brain holding a tumor
//! of nested noisy ellipsoids (edema ⊃ necrotic core ⊃ enhancing core).

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use super::{store, VolumeSample, LABEL_EDEMA, LABEL_ET, LABEL_NCR};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MIN_SYNTH_DIM: usize = 16;
/// BraTS volume extent `(H, W, D)`.
pub const BRATS_DIMS: (usize, usize, usize) = (240, 240, 155);

/// Per-channel mean intensity (T1CE, T2, FLAIR) by tissue.
const BRAIN: [f32; 3] = [0.45, 0.35, 0.40];
const EDEMA: [f32; 3] = [0.45, 0.80, 0.85];
const NECROSIS: [f32; 3] = [0.20, 0.95, 0.50];
const ENHANCING: [f32; 3] = [0.95, 0.60, 0.60];
const NOISE_SD: f64 = 0.03;
const SHAPE_JITTER: f64 = 0.08;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseStats {
    pub case_id: String,
    pub dims: (usize, usize, usize),
    pub edema_voxels: usize,
    pub necrotic_voxels: usize,
    pub enhancing_voxels: usize,
    /// Tumor fraction of the slice through the tumor centre.
    pub central_fraction: f64,
    pub central_slice: usize,
}

impl CaseStats {
    pub fn tumor_voxels(&self) -> usize {
        self.edema_voxels + self.necrotic_voxels + self.enhancing_voxels
    }
}

/// Ellipsoid whose radius is modulated by two random azimuthal harmonics.
struct Blob {
    centre: [f64; 3],
    radii: [f64; 3],
    harmonics: [(f64, f64); 2],
}

impl Blob {
    fn contains(&self, p: [f64; 3], scale: f64) -> bool {
        let d = [0, 1, 2].map(|i| (p[i] - self.centre[i]) / (self.radii[i] * scale));
        let theta = d[1].atan2(d[0]);
        let wobble: f64 = self.harmonics.iter().enumerate().map(|(i, &(a, ph))| a * ((i + 2) as f64 * theta + ph).sin()).sum();
        let r = 1.0 + SHAPE_JITTER * wobble;
        d[0] * d[0] + d[1] * d[1] + d[2] * d[2] <= r * r
    }
}

fn check_dims(dims: (usize, usize, usize)) -> Result<()> {
    let (h, w, d) = dims;
    if h.min(w).min(d) < MIN_SYNTH_DIM {
        return Err(Error::Config(format!("synthetic dims {h}x{w}x{d} too small; each axis needs at least {MIN_SYNTH_DIM}")));
    }
    Ok(())
}

/// One synthetic case drawn from `rng`.
pub fn synth_volume<R: Rng>(case_id: &str, dims: (usize, usize, usize), rng: &mut R) -> Result<(VolumeSample, CaseStats)> {
    check_dims(dims)?;
    let (h, w, d) = dims;
    let (hf, wf, df) = (h as f64, w as f64, d as f64);
    let centre = [(hf - 1.0) / 2.0, (wf - 1.0) / 2.0, (df - 1.0) / 2.0];
    let brain = [0.42 * hf, 0.38 * wf, 0.45 * df].map(|r| r * rng.random_range(0.97..1.03));
    let harmonics = [0; 2].map(|_| (rng.random_range(-0.5..0.5), rng.random_range(0.0..std::f64::consts::TAU)));
    let tumor = Blob {
        centre: [
            centre[0] + rng.random_range(-0.08..0.08) * hf,
            centre[1] + rng.random_range(-0.08..0.08) * wf,
            rng.random_range(0.4..0.6) * (df - 1.0),
        ],
        radii: [rng.random_range(0.22..0.28) * hf, rng.random_range(0.22..0.28) * wf, rng.random_range(0.30..0.36) * df],
        harmonics,
    };
    let ncr_scale = rng.random_range(0.68..0.74);
    let et_scale = rng.random_range(0.42..0.48);
    let gains: [f32; 3] = [0; 3].map(|_| rng.random_range(800.0..1200.0));
    let noise = Normal::new(0.0, NOISE_SD).expect("positive sd");

    let plane = h * w * d;
    let mut channels = vec![0f32; 3 * plane];
    let mut labels = vec![0u8; plane];
    for r in 0..h {
        for c in 0..w {
            for k in 0..d {
                let p = [r as f64, c as f64, k as f64];
                let q = [0, 1, 2].map(|i| (p[i] - centre[i]) / brain[i]);
                if q[0] * q[0] + q[1] * q[1] + q[2] * q[2] > 1.0 {
                    continue;
                }
                let i = (r * w + c) * d + k;
                let (label, means) = if tumor.contains(p, et_scale) {
                    (LABEL_ET, ENHANCING)
                } else if tumor.contains(p, ncr_scale) {
                    (LABEL_NCR, NECROSIS)
                } else if tumor.contains(p, 1.0) {
                    (LABEL_EDEMA, EDEMA)
                } else {
                    (0, BRAIN)
                };
                labels[i] = label;
                for ch in 0..3 {
                    let v = means[ch] + noise.sample(rng) as f32;
                    channels[ch * plane + i] = gains[ch] * v.max(0.01);
                }
            }
        }
    }
    let count = |l: u8| labels.iter().filter(|&&v| v == l).count();
    let central_slice = (tumor.centre[2].round() as usize).min(d - 1);
    let central = (0..h * w).filter(|&p| labels[p * d + central_slice] != 0).count();
    let stats = CaseStats {
        case_id: case_id.to_string(),
        dims,
        edema_voxels: count(LABEL_EDEMA),
        necrotic_voxels: count(LABEL_NCR),
        enhancing_voxels: count(LABEL_ET),
        central_fraction: central as f64 / (h * w) as f64,
        central_slice,
    };
    let v = VolumeSample::new(case_id, Tensor::new(vec![3, h, w, d], channels)?, labels)?;
    Ok((v, stats))
}

pub fn synth_case_id(index: usize) -> String {
    format!("synth_{index:04}")
}

/// Writes `n_cases` volumes under `root`; case `i` draws from its own stream.
pub fn synth_generate(root: &Path, n_cases: usize, dims: (usize, usize, usize), seed: u64) -> Result<Vec<CaseStats>> {
    if n_cases == 0 {
        return Err(Error::Config("number of synthetic cases must be at least 1".into()));
    }
    check_dims(dims)?;
    (0..n_cases)
        .map(|i| {
            let id = synth_case_id(i);
            let (v, stats) = synth_volume(&id, dims, &mut crate::rng::stream(seed, "synth", i as u64))?;
            store::write_case(root, &v)?;
            Ok(stats)
        })
        .collect()
}
