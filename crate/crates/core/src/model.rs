//! DeBlock decoder and the full AXUNet assembly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attention::{SelfAttention, DEFAULT_REDUCTION};
use crate::backbone::{Xception, XceptionConfig, DEFAULT_MIDDLE_REPEATS};
use crate::data::RegionMask;
use crate::error::{Error, Result};
use crate::nn::{in_layer, Conv2d, ConvTranspose2d, Ctx, ParamSpec, ParamStore};
use crate::tensor::{kernels, Graph, Scalar, Tensor, Var};

pub const NUM_REGIONS: usize = 3;
pub const IN_CHANNELS: usize = 3;

/// How a DeBlock output joins its attended skip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CombineMode {
    #[default]
    Concat,
    Add,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub width_multiplier: f64,
    pub middle_repeats: usize,
    pub attention_reduction: usize,
    pub combine_mode: CombineMode,
    pub attention_enabled: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            width_multiplier: 1.0,
            middle_repeats: DEFAULT_MIDDLE_REPEATS,
            attention_reduction: DEFAULT_REDUCTION,
            combine_mode: CombineMode::Concat,
            attention_enabled: true,
        }
    }
}

impl ModelConfig {
    /// Small configuration for CPU experiments.
    pub fn micro() -> Self {
        ModelConfig { width_multiplier: 0.125, middle_repeats: 1, ..Default::default() }
    }

    pub fn encoder(&self) -> Result<XceptionConfig> {
        XceptionConfig::scaled(self.width_multiplier, self.middle_repeats, self.attention_reduction)
    }
}

/// 1×1 conv, 3×3/2 transposed conv, 3×3 transposed conv, 1×1 conv, each
/// followed by ReLU; the result is joined with the attended skip.
#[derive(Clone, Debug, PartialEq)]
pub struct DeBlock {
    pub name: String,
    pub combine: CombineMode,
    pub skip_channels: usize,
    conv_in: Conv2d,
    deconv1: ConvTranspose2d,
    deconv2: ConvTranspose2d,
    conv_out: Conv2d,
}

impl DeBlock {
    pub fn new(name: impl Into<String>, in_ch: usize, skip_ch: usize, combine: CombineMode) -> Self {
        let name = name.into();
        let mid = skip_ch;
        DeBlock {
            conv_in: Conv2d::new(format!("{name}.conv_in"), in_ch, mid, 1, 1, 0),
            deconv1: ConvTranspose2d::upsample(format!("{name}.deconv1"), mid, mid),
            deconv2: ConvTranspose2d::new(format!("{name}.deconv2"), mid, mid, 3, 1, 1, 0),
            conv_out: Conv2d::new(format!("{name}.conv_out"), mid, skip_ch, 1, 1, 0),
            name,
            combine,
            skip_channels: skip_ch,
        }
    }

    pub fn out_channels(&self) -> usize {
        match self.combine {
            CombineMode::Concat => 2 * self.skip_channels,
            CombineMode::Add => self.skip_channels,
        }
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.conv_in.specs(out);
        self.deconv1.specs(out);
        self.deconv2.specs(out);
        self.conv_out.specs(out);
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var, skip: Var) -> Result<Var> {
        let mut u = x;
        u = self.conv_in.forward(ctx, u)?;
        u = ctx.graph.relu(u)?;
        u = self.deconv1.forward(ctx, u)?;
        u = ctx.graph.relu(u)?;
        u = self.deconv2.forward(ctx, u)?;
        u = ctx.graph.relu(u)?;
        u = self.conv_out.forward(ctx, u)?;
        u = ctx.graph.relu(u)?;
        ctx.tap(format!("{}.conv_out", self.name), u);
        let (us, ss) = (ctx.graph.shape(u).to_vec(), ctx.graph.shape(skip).to_vec());
        if us[2..] != ss[2..] || us[0] != ss[0] {
            return Err(Error::shape("deblock", format!("{}: upsampled {us:?} does not match skip {ss:?}", self.name)));
        }
        let out = match self.combine {
            CombineMode::Concat => ctx.graph.concat(&[u, skip], 1),
            CombineMode::Add => ctx.graph.add(u, skip),
        };
        let out = in_layer(&self.name, out)?;
        ctx.tap(self.name.clone(), out);
        Ok(out)
    }
}

/// Layer tree for the whole network. Holds no weights.
#[derive(Clone, Debug, PartialEq)]
pub struct AxUNet {
    pub config: ModelConfig,
    pub encoder: Xception,
    attention: Vec<SelfAttention>,
    /// Index 0 is DeBlock1 (shallowest).
    deblocks: Vec<DeBlock>,
    final_deconv: ConvTranspose2d,
    head: Conv2d,
}

/// Grad-CAM friendly aliases for the three visualised layers.
pub const LAYER_FINAL_CONV: &str = "decoder.final_deconv";
pub const LAYER_ATTENTION1: &str = "attention1";
pub const LAYER_DEBLOCK3_CONV: &str = "decoder.deblock3.conv_out";

impl AxUNet {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let enc = config.encoder()?;
        Self::with_encoder(config, enc)
    }

    /// Builds with explicit encoder widths, checking every channel hand-off.
    pub fn with_encoder(config: ModelConfig, enc: XceptionConfig) -> Result<Self> {
        enc.validate(config.attention_reduction)?;
        let skips = enc.skip_channels();
        let attention = skips
            .iter()
            .enumerate()
            .map(|(i, &c)| SelfAttention::new(format!("attention{}", i + 1), c, config.attention_reduction))
            .collect::<Result<Vec<_>>>()?;
        let mut deblocks = Vec::with_capacity(4);
        let mut in_ch = enc.bottleneck_channels();
        for level in (1..=4).rev() {
            let d = DeBlock::new(format!("decoder.deblock{level}"), in_ch, skips[level - 1], config.combine_mode);
            in_ch = d.out_channels();
            deblocks.push(d);
        }
        deblocks.reverse();
        let final_ch = skips[0];
        Ok(AxUNet {
            encoder: Xception::new(enc, IN_CHANNELS)?,
            attention,
            final_deconv: ConvTranspose2d::upsample(LAYER_FINAL_CONV, in_ch, final_ch),
            head: Conv2d::new("head", final_ch, NUM_REGIONS, 1, 1, 0),
            deblocks,
            config,
        })
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        self.encoder.specs(&mut out);
        if self.config.attention_enabled {
            for a in &self.attention {
                a.specs(&mut out);
            }
        }
        for d in &self.deblocks {
            d.specs(&mut out);
        }
        self.final_deconv.specs(&mut out);
        self.head.specs(&mut out);
        out
    }

    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        ParamStore::init(&self.param_specs(), &mut crate::rng::stream(seed, "init", 0))
    }

    /// Logits `[N,3,H,W]`. Taps: `encoder.*`, `attention{1..4}`,
    /// `decoder.deblock{l}[.conv_out]`, `decoder.final_deconv`, `head`.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        match *ctx.graph.shape(x) {
            [_, c, _, _] if c == IN_CHANNELS => {}
            ref s => return Err(Error::shape("axunet", format!("input {s:?} must be [N,{IN_CHANNELS},H,W]"))),
        }
        let feats = self.encoder.forward(ctx, x)?;
        let mut skips = feats.taps;
        if self.config.attention_enabled {
            for (i, a) in self.attention.iter().enumerate() {
                skips[i] = a.forward(ctx, skips[i])?;
                ctx.tap(a.name.clone(), skips[i]);
            }
        }
        let mut h = feats.bottleneck;
        for level in (0..4).rev() {
            h = self.deblocks[level].forward(ctx, h, skips[level])?;
        }
        h = self.final_deconv.forward(ctx, h)?;
        h = ctx.graph.relu(h)?;
        ctx.tap(LAYER_FINAL_CONV, h);
        let logits = self.head.forward(ctx, h)?;
        ctx.tap("head", logits);
        Ok(logits)
    }
}

/// Architecture plus weights, validated against each other.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub arch: AxUNet,
    pub params: ParamStore<T>,
}

/// Result of a recorded forward pass.
pub struct Forward<T: Scalar> {
    pub graph: Graph<T>,
    pub input: Var,
    pub logits: Var,
    pub params: BTreeMap<String, Var>,
    pub taps: BTreeMap<String, Var>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let arch = AxUNet::new(config)?;
        let params = arch.init_params(seed);
        Ok(Model { arch, params })
    }

    pub fn from_parts(arch: AxUNet, params: ParamStore<T>) -> Result<Self> {
        params.validate(&arch.param_specs())?;
        Ok(Model { arch, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.arch.config
    }

    /// Records a forward pass over `x`, optionally with trainable parameters.
    pub fn forward_graph(&self, x: Tensor<T>, trainable: bool) -> Result<Forward<T>> {
        self.record(x, trainable, false)
    }

    /// Frozen weights with the input as a differentiable leaf, so every
    /// activation holds a gradient after `backward`.
    pub fn forward_graph_input_grad(&self, x: Tensor<T>) -> Result<Forward<T>> {
        self.record(x, false, true)
    }

    fn record(&self, x: Tensor<T>, trainable: bool, input_grad: bool) -> Result<Forward<T>> {
        let mut graph = Graph::new();
        let input = if input_grad { graph.param(x)? } else { graph.constant(x)? };
        let mut ctx = Ctx::new(&mut graph, &self.params, trainable);
        let logits = self.arch.forward(&mut ctx, input)?;
        let (params, taps) = ctx.into_parts();
        Ok(Forward { graph, input, logits, params, taps })
    }

    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let f = self.forward_graph(x.clone(), false)?;
        Ok(f.graph.value(f.logits).clone())
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model { arch: self.arch.clone(), params: self.params.cast() }
    }
}

/// Thresholds per-channel sigmoids (`σ(logit) ≥ threshold` is foreground).
pub fn predict_masks<T: Scalar>(logits: &Tensor<T>, threshold: f64) -> Result<Vec<RegionMask>> {
    let [n, c, h, w] = match *logits.shape() {
        [n, c, h, w] => [n, c, h, w],
        ref s => return Err(Error::shape("predict_masks", format!("logits must be [N,3,H,W], got {s:?}"))),
    };
    if c != NUM_REGIONS {
        return Err(Error::shape("predict_masks", format!("expected {NUM_REGIONS} channels, got {c}")));
    }
    let plane = h * w;
    Ok(logits
        .data()
        .chunks(c * plane)
        .take(n)
        .map(|sample| {
            let bin = |k: usize| -> Vec<u8> {
                sample[k * plane..(k + 1) * plane]
                    .iter()
                    .map(|&v| u8::from(kernels::sigmoid(v).as_f64() >= threshold))
                    .collect()
            };
            RegionMask { height: h, width: w, wt: bin(0), tc: bin(1), et: bin(2) }
        })
        .collect())
}
