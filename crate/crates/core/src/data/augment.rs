//! Paired geometric augmentation. Every transform is applied identically to
//! the image and the mask; image samples are bilinear, mask samples nearest.

use rand::Rng;

use super::{RegionMask, SlicePair};
use crate::tensor::Tensor;

/// Affine jitter about the image centre; pixels mapped from outside read zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShiftScaleRotate {
    /// Shift as a fraction of width and height.
    pub shift_x: f64,
    pub shift_y: f64,
    pub scale: f64,
    pub angle_deg: f64,
}

impl ShiftScaleRotate {
    pub const SHIFT_LIMIT: f64 = 0.0625;
    pub const SCALE_LIMIT: f64 = 0.1;
    pub const ROTATE_LIMIT: f64 = 45.0;
}

/// The concrete draws behind one call to [`augment`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentPlan {
    /// Quarter turns counter-clockwise.
    pub rot90: Option<u8>,
    pub hflip: bool,
    pub vflip: bool,
    pub ssr: Option<ShiftScaleRotate>,
}

impl AugmentPlan {
    pub const P_ROT90: f64 = 0.5;
    pub const P_FLIP: f64 = 0.5;
    pub const P_SSR: f64 = 0.5;

    pub fn identity() -> Self {
        AugmentPlan { rot90: None, hflip: false, vflip: false, ssr: None }
    }

    /// Always consumes the same number of draws so the stream stays aligned
    /// regardless of which transforms fire.
    pub fn draw<R: Rng>(rng: &mut R) -> Self {
        let rot_hit = rng.random::<f64>() < Self::P_ROT90;
        let k: u8 = rng.random_range(0..=3);
        let hflip = rng.random::<f64>() < Self::P_FLIP;
        let vflip = rng.random::<f64>() < Self::P_FLIP;
        let ssr_hit = rng.random::<f64>() < Self::P_SSR;
        let sl = ShiftScaleRotate::SHIFT_LIMIT;
        let ssr = ShiftScaleRotate {
            shift_x: rng.random_range(-sl..=sl),
            shift_y: rng.random_range(-sl..=sl),
            scale: 1.0 + rng.random_range(-ShiftScaleRotate::SCALE_LIMIT..=ShiftScaleRotate::SCALE_LIMIT),
            angle_deg: rng.random_range(-ShiftScaleRotate::ROTATE_LIMIT..=ShiftScaleRotate::ROTATE_LIMIT),
        };
        AugmentPlan { rot90: rot_hit.then_some(k), hflip, vflip, ssr: ssr_hit.then_some(ssr) }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self.rot90, None | Some(0)) && !self.hflip && !self.vflip && self.ssr.is_none()
    }

    /// Plans whose transforms only permute pixels.
    pub fn is_permutation(&self) -> bool {
        self.ssr.is_none()
    }

    pub fn apply(&self, pair: &SlicePair) -> SlicePair {
        let mut img = Planes::from_image(&pair.image);
        let mut msk = Planes::from_mask(&pair.mask);
        if let Some(k) = self.rot90 {
            for _ in 0..k % 4 {
                img = img.remap_exact(rot90_ccw);
                msk = msk.remap_exact(rot90_ccw);
            }
        }
        if self.hflip {
            img = img.remap_exact(hflip);
            msk = msk.remap_exact(hflip);
        }
        if self.vflip {
            img = img.remap_exact(vflip);
            msk = msk.remap_exact(vflip);
        }
        if let Some(t) = self.ssr {
            img = img.affine(&t, Interp::Bilinear);
            msk = msk.affine(&t, Interp::Nearest);
        }
        img.into_pair(msk, pair)
    }
}

/// Draws a plan from a ChaCha stream seeded with `seed` and applies it.
pub fn augment(pair: &SlicePair, seed: u64) -> SlicePair {
    let mut rng = crate::rng::seeded(seed);
    AugmentPlan::draw(&mut rng).apply(pair)
}

#[derive(Clone, Copy)]
enum Interp {
    Bilinear,
    Nearest,
}

/// `(out_r, out_c, in_h, in_w) -> (src_r, src_c, out_h, out_w)`.
type ExactMap = fn(usize, usize, usize, usize) -> (usize, usize, usize, usize);

fn rot90_ccw(r: usize, c: usize, h: usize, w: usize) -> (usize, usize, usize, usize) {
    // output is w×h; out(r, c) = in(c, w − 1 − r)
    (c, w - 1 - r, w, h)
}

fn hflip(r: usize, c: usize, h: usize, w: usize) -> (usize, usize, usize, usize) {
    (r, w - 1 - c, h, w)
}

fn vflip(r: usize, c: usize, h: usize, w: usize) -> (usize, usize, usize, usize) {
    (h - 1 - r, c, h, w)
}

struct Planes {
    h: usize,
    w: usize,
    data: Vec<Vec<f32>>,
}

impl Planes {
    fn from_image(t: &Tensor<f32>) -> Self {
        let s = t.shape();
        let (h, w) = (s[1], s[2]);
        Planes { h, w, data: t.data().chunks(h * w).map(<[f32]>::to_vec).collect() }
    }

    fn from_mask(m: &RegionMask) -> Self {
        Planes { h: m.height, w: m.width, data: m.planes().iter().map(|p| p.iter().map(|&v| v as f32).collect()).collect() }
    }

    fn remap_exact(self, f: ExactMap) -> Self {
        let (_, _, oh, ow) = f(0, 0, self.h, self.w);
        let idx: Vec<usize> = (0..oh * ow)
            .map(|i| {
                let (sr, sc, _, _) = f(i / ow, i % ow, self.h, self.w);
                sr * self.w + sc
            })
            .collect();
        let data = self.data.iter().map(|p| idx.iter().map(|&j| p[j]).collect()).collect();
        Planes { h: oh, w: ow, data }
    }

    fn affine(self, t: &ShiftScaleRotate, interp: Interp) -> Self {
        let (h, w) = (self.h, self.w);
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (sin, cos) = t.angle_deg.to_radians().sin_cos();
        let (ty, tx) = (t.shift_y * h as f64, t.shift_x * w as f64);
        // forward: dst = S·R·(src − c) + c + shift; invert per output pixel,
        // rotation counter-clockwise in image coordinates (y down)
        let sample = |p: &[f32], y: f64, x: f64| -> f32 {
            let at = |r: isize, c: isize| -> f32 {
                if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
                    0.0
                } else {
                    p[r as usize * w + c as usize]
                }
            };
            match interp {
                Interp::Nearest => at((y + 0.5).floor() as isize, (x + 0.5).floor() as isize),
                Interp::Bilinear => {
                    let (y0, x0) = (y.floor(), x.floor());
                    let (fy, fx) = ((y - y0) as f32, (x - x0) as f32);
                    let (r, c) = (y0 as isize, x0 as isize);
                    let top = at(r, c) * (1.0 - fx) + at(r, c + 1) * fx;
                    let bot = at(r + 1, c) * (1.0 - fx) + at(r + 1, c + 1) * fx;
                    top * (1.0 - fy) + bot * fy
                }
            }
        };
        let mut data = vec![vec![0f32; h * w]; self.data.len()];
        for r in 0..h {
            for c in 0..w {
                let dy = (r as f64 - cy - ty) / t.scale;
                let dx = (c as f64 - cx - tx) / t.scale;
                let sx = cos * dx - sin * dy + cx;
                let sy = sin * dx + cos * dy + cy;
                for (out, src) in data.iter_mut().zip(&self.data) {
                    out[r * w + c] = sample(src, sy, sx);
                }
            }
        }
        Planes { h, w, data }
    }

    fn into_pair(self, mask: Planes, like: &SlicePair) -> SlicePair {
        let c = self.data.len();
        let image = Tensor::new(vec![c, self.h, self.w], self.data.concat()).expect("plane dims");
        let bin = |p: &Vec<f32>| p.iter().map(|&v| u8::from(v >= 0.5)).collect::<Vec<u8>>();
        let mask = RegionMask { height: mask.h, width: mask.w, wt: bin(&mask.data[0]), tc: bin(&mask.data[1]), et: bin(&mask.data[2]) };
        SlicePair { case_id: like.case_id.clone(), slice: like.slice, image, mask }
    }
}
