//! Xception encoder: stem, three entry blocks, a repeated middle flow and
//! an exit flow, with skip taps at strides 2, 4, 8 and 16.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Ctx, ParamSpec, SeparableConv};
use crate::tensor::{Scalar, Var};

/// Canonical Xception widths before scaling.
pub const BASE_STEM: usize = 32;
pub const BASE_ENTRY: [usize; 3] = [128, 256, 728];
pub const BASE_EXIT: [usize; 3] = [1024, 1536, 2048];
pub const DEFAULT_MIDDLE_REPEATS: usize = 8;

/// Resolved encoder widths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct XceptionConfig {
    pub stem_channels: usize,
    pub block_channels: [usize; 3],
    /// Exit block output, then the two trailing separable convs.
    pub exit_channels: [usize; 3],
    pub middle_repeats: usize,
    pub width_multiplier: f64,
}

/// Scales a canonical width and rounds to the nearest positive multiple of `multiple`.
pub fn scale_width(base: usize, width_multiplier: f64, multiple: usize) -> usize {
    let m = multiple.max(1);
    let scaled = base as f64 * width_multiplier / m as f64;
    (scaled.round() as usize).max(1) * m
}

impl XceptionConfig {
    pub fn scaled(width_multiplier: f64, middle_repeats: usize, reduction: usize) -> Result<Self> {
        if !(width_multiplier > 0.0 && width_multiplier.is_finite()) {
            return Err(Error::Config(format!("width_multiplier must be positive, got {width_multiplier}")));
        }
        let s = |b| scale_width(b, width_multiplier, reduction);
        let cfg = XceptionConfig {
            stem_channels: s(BASE_STEM),
            block_channels: BASE_ENTRY.map(s),
            exit_channels: BASE_EXIT.map(s),
            middle_repeats,
            width_multiplier,
        };
        cfg.validate(reduction)?;
        Ok(cfg)
    }

    pub fn validate(&self, reduction: usize) -> Result<()> {
        let skips = self.skip_channels();
        if reduction == 0 || skips.iter().any(|&c| c == 0 || c % reduction != 0) {
            return Err(Error::Config(format!(
                "skip channel counts {skips:?} must be positive multiples of attention reduction {reduction}"
            )));
        }
        if self.exit_channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("exit channels must be positive".into()));
        }
        Ok(())
    }

    /// Channels of the four skip taps, shallowest first.
    pub fn skip_channels(&self) -> [usize; 4] {
        let [a, b, c] = self.block_channels;
        [self.stem_channels, a, b, c]
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.exit_channels[2]
    }
}

/// Separable conv, ReLU, separable conv, 3×3/2 max pool, plus a strided
/// 1×1 side branch added to the pooled output.
#[derive(Clone, Debug, PartialEq)]
pub struct EntryBlock {
    pub name: String,
    sep1: SeparableConv,
    sep2: SeparableConv,
    side: Conv2d,
}

impl EntryBlock {
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize) -> Result<Self> {
        let name = name.into();
        Ok(EntryBlock {
            sep1: SeparableConv::new(format!("{name}.sep1"), in_ch, out_ch, 3, 1, 1)?,
            sep2: SeparableConv::new(format!("{name}.sep2"), out_ch, out_ch, 3, 1, 1)?,
            side: Conv2d::new(format!("{name}.side"), in_ch, out_ch, 1, 2, 0),
            name,
        })
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.sep1.specs(out);
        self.sep2.specs(out);
        self.side.specs(out);
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let h = self.sep1.forward(ctx, x)?;
        let h = ctx.graph.relu(h)?;
        let h = self.sep2.forward(ctx, h)?;
        let h = crate::nn::in_layer(&self.name, ctx.graph.maxpool2d(h, 3, 2, 1))?;
        let side = self.side.forward(ctx, x)?;
        crate::nn::in_layer(&self.name, ctx.graph.add(h, side))
    }
}

/// `x + sep(ReLU(sep(ReLU(sep(ReLU(x))))))`.
#[derive(Clone, Debug, PartialEq)]
pub struct MiddleBlock {
    pub name: String,
    seps: [SeparableConv; 3],
}

impl MiddleBlock {
    pub fn new(name: impl Into<String>, channels: usize) -> Result<Self> {
        let name = name.into();
        let sep = |i| SeparableConv::new(format!("{name}.sep{i}"), channels, channels, 3, 1, 1);
        Ok(MiddleBlock { seps: [sep(1)?, sep(2)?, sep(3)?], name })
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        for s in &self.seps {
            s.specs(out);
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let mut h = x;
        for s in &self.seps {
            h = ctx.graph.relu(h)?;
            h = s.forward(ctx, h)?;
        }
        crate::nn::in_layer(&self.name, ctx.graph.add(x, h))
    }
}

/// Skip taps at strides 2..16 and the stride-32 bottleneck.
#[derive(Clone, Copy, Debug)]
pub struct EncoderFeatures {
    pub taps: [Var; 4],
    pub bottleneck: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Xception {
    pub cfg: XceptionConfig,
    stem1: Conv2d,
    stem2: Conv2d,
    entry: Vec<EntryBlock>,
    middle: Vec<MiddleBlock>,
    exit: EntryBlock,
    exit_sep: [SeparableConv; 2],
}

impl Xception {
    pub fn new(cfg: XceptionConfig, in_channels: usize) -> Result<Self> {
        let s = cfg.stem_channels;
        let [e1, e2, e3] = cfg.block_channels;
        let [x1, x2, x3] = cfg.exit_channels;
        let entry = vec![
            EntryBlock::new("encoder.entry1", s, e1)?,
            EntryBlock::new("encoder.entry2", e1, e2)?,
            EntryBlock::new("encoder.entry3", e2, e3)?,
        ];
        let middle = (1..=cfg.middle_repeats)
            .map(|i| MiddleBlock::new(format!("encoder.middle{i}"), e3))
            .collect::<Result<_>>()?;
        Ok(Xception {
            stem1: Conv2d::new("encoder.stem.conv1", in_channels, s, 3, 2, 1),
            stem2: Conv2d::new("encoder.stem.conv2", s, s, 3, 1, 1),
            entry,
            middle,
            exit: EntryBlock::new("encoder.exit.block", e3, x1)?,
            exit_sep: [
                SeparableConv::new("encoder.exit.sep1", x1, x2, 3, 1, 1)?,
                SeparableConv::new("encoder.exit.sep2", x2, x3, 3, 1, 1)?,
            ],
            cfg,
        })
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.stem1.specs(out);
        self.stem2.specs(out);
        for b in &self.entry {
            b.specs(out);
        }
        for b in &self.middle {
            b.specs(out);
        }
        self.exit.specs(out);
        for s in &self.exit_sep {
            s.specs(out);
        }
    }

    pub fn middle_blocks(&self) -> &[MiddleBlock] {
        &self.middle
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<EncoderFeatures> {
        match *ctx.graph.shape(x) {
            [_, _, h, w] if h % 32 == 0 && w % 32 == 0 && h > 0 && w > 0 => {}
            ref s => return Err(Error::shape("encode", format!("input {s:?} must be [N,C,H,W] with H and W divisible by 32"))),
        }
        let h = self.stem1.forward(ctx, x)?;
        let h = ctx.graph.relu(h)?;
        let h = self.stem2.forward(ctx, h)?;
        let f1 = ctx.graph.relu(h)?;
        ctx.tap("encoder.f1", f1);
        let f2 = self.entry[0].forward(ctx, f1)?;
        ctx.tap("encoder.f2", f2);
        let f3 = self.entry[1].forward(ctx, f2)?;
        ctx.tap("encoder.f3", f3);
        let f4 = self.entry[2].forward(ctx, f3)?;
        ctx.tap("encoder.f4", f4);
        let mut h = f4;
        for b in &self.middle {
            h = b.forward(ctx, h)?;
        }
        h = self.exit.forward(ctx, h)?;
        for s in &self.exit_sep {
            h = s.forward(ctx, h)?;
            h = ctx.graph.relu(h)?;
        }
        ctx.tap("encoder.bottleneck", h);
        Ok(EncoderFeatures { taps: [f1, f2, f3, f4], bottleneck: h })
    }
}
