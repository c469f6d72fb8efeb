//! Volumes, region masks and the slice preprocessing pipeline.
//!
//! A case is three co-registered sequences (T1CE, T2, FLAIR) plus a label
//! volume with BraTS values {0, 1, 2, 4}. Preprocessing keeps slices with
//! enough tumor, crops to the brain, min-max normalises each channel of each
//! slice, composes nested WT ⊇ TC ⊇ ET masks and resizes.

mod augment;
mod preprocess;
mod split;
pub mod store;
mod synth;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use augment::{augment, AugmentPlan, ShiftScaleRotate};
pub use preprocess::{
    compose_regions, crop_to_brain, minmax_normalize, preprocess_volume, resize, resize_bilinear,
    select_slices, PreprocessOptions, DEFAULT_TUMOR_THRESHOLD, BRATS_CROP, DEFAULT_SIZE,
};
pub use split::{split_cases, Split, DEFAULT_FRACTIONS};
pub use synth::{synth_generate, synth_volume, CaseStats, MIN_SYNTH_DIM, BRATS_DIMS};

/// Label values present in BraTS segmentations.
pub const LABEL_NCR: u8 = 1;
pub const LABEL_EDEMA: u8 = 2;
pub const LABEL_ET: u8 = 4;

/// Sequence file stems, in channel order.
pub const SEQUENCES: [&str; 3] = ["t1ce", "t2", "flair"];

/// In-plane crop window; may extend past the volume, where it reads zeros.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CropRect {
    pub row0: isize,
    pub col0: isize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct VolumeMeta {
    pub crop: Option<CropRect>,
    /// Slice indices kept by [`select_slices`], in ascending order.
    pub retained: Option<Vec<usize>>,
}

/// One case: channels `[3,H,W,D]` and labels `[H,W,D]`, D fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeSample {
    pub case_id: String,
    pub channels: Tensor<f32>,
    pub labels: Vec<u8>,
    pub meta: VolumeMeta,
}

impl VolumeSample {
    pub fn new(case_id: impl Into<String>, channels: Tensor<f32>, labels: Vec<u8>) -> Result<Self> {
        let case_id = case_id.into();
        let [c, h, w, d] = match *channels.shape() {
            [c, h, w, d] => [c, h, w, d],
            ref s => return Err(Error::Data(format!("{case_id}: channels must be [3,H,W,D], got {s:?}"))),
        };
        if c != SEQUENCES.len() {
            return Err(Error::Data(format!("{case_id}: expected {} channels, got {c}", SEQUENCES.len())));
        }
        if labels.len() != h * w * d {
            return Err(Error::Data(format!("{case_id}: label volume has {} voxels, channels have {}", labels.len(), h * w * d)));
        }
        if let Some(bad) = labels.iter().find(|&&l| !matches!(l, 0 | LABEL_NCR | LABEL_EDEMA | LABEL_ET)) {
            return Err(Error::Data(format!("{case_id}: unknown label value {bad}")));
        }
        Ok(VolumeSample { case_id, channels, labels, meta: VolumeMeta::default() })
    }

    /// `(H, W, D)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.channels.shape();
        (s[1], s[2], s[3])
    }

    /// One channel of axial slice `k` as an `H×W` plane.
    pub fn channel_slice(&self, channel: usize, k: usize) -> Vec<f32> {
        let (h, w, d) = self.dims();
        let base = channel * h * w * d;
        (0..h * w).map(|p| self.channels.data()[base + p * d + k]).collect()
    }

    pub fn label_slice(&self, k: usize) -> Vec<u8> {
        let (h, w, d) = self.dims();
        (0..h * w).map(|p| self.labels[p * d + k]).collect()
    }
}

/// Binary WT/TC/ET planes of one slice.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionMask {
    pub height: usize,
    pub width: usize,
    pub wt: Vec<u8>,
    pub tc: Vec<u8>,
    pub et: Vec<u8>,
}

impl RegionMask {
    pub fn empty(height: usize, width: usize) -> Self {
        let z = vec![0; height * width];
        RegionMask { height, width, wt: z.clone(), tc: z.clone(), et: z }
    }

    pub fn planes(&self) -> [&[u8]; 3] {
        [&self.wt, &self.tc, &self.et]
    }

    pub fn planes_mut(&mut self) -> [&mut Vec<u8>; 3] {
        [&mut self.wt, &mut self.tc, &mut self.et]
    }

    pub fn foreground_counts(&self) -> [usize; 3] {
        self.planes().map(|p| p.iter().filter(|&&v| v != 0).count())
    }

    /// `et ≤ tc ≤ wt` everywhere.
    pub fn is_nested(&self) -> bool {
        self.wt.iter().zip(&self.tc).zip(&self.et).all(|((&w, &t), &e)| e <= t && t <= w)
    }

    pub fn is_binary(&self) -> bool {
        self.planes().iter().all(|p| p.iter().all(|&v| v <= 1))
    }

    /// `[3,H,W]` tensor of zeros and ones.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let data = self.planes().iter().flat_map(|p| p.iter().map(|&v| v as f32)).collect();
        Tensor::new(vec![3, self.height, self.width], data).expect("mask planes match dims")
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let [c, h, w] = match *t.shape() {
            [c, h, w] => [c, h, w],
            ref s => return Err(Error::Data(format!("mask tensor must be [3,H,W], got {s:?}"))),
        };
        if c != 3 {
            return Err(Error::Data(format!("mask tensor must have 3 planes, got {c}")));
        }
        let mut planes = t.data().chunks(h * w).map(|p| {
            p.iter()
                .map(|&v| {
                    if v == 0.0 {
                        Ok(0u8)
                    } else if v == 1.0 {
                        Ok(1u8)
                    } else {
                        Err(Error::Data(format!("mask value {v} is not binary")))
                    }
                })
                .collect::<Result<Vec<u8>>>()
        });
        Ok(RegionMask {
            height: h,
            width: w,
            wt: planes.next().unwrap()?,
            tc: planes.next().unwrap()?,
            et: planes.next().unwrap()?,
        })
    }
}

/// A preprocessed training example.
#[derive(Clone, Debug, PartialEq)]
pub struct SlicePair {
    pub case_id: String,
    pub slice: usize,
    /// `[3,H,W]` in `[0,1]`.
    pub image: Tensor<f32>,
    pub mask: RegionMask,
}

impl SlicePair {
    pub fn height(&self) -> usize {
        self.mask.height
    }

    pub fn width(&self) -> usize {
        self.mask.width
    }
}
