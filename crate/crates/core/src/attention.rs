//! Pixel attention (PAM), channel attention (CAM) and their sum, the
//! self-attention block applied to each encoder skip.
//!
//! PAM is softplus-kernel linear attention evaluated in the linearized order
//! `φ(Q)·(φ(K)ᵀV)` with the rowwise normaliser `φ(Q)·Σ_j φ(K)_j`, so it never
//! materialises the `HW×HW` matrix.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Ctx, ParamSpec, ParamStore};
use crate::tensor::{Graph, Scalar, Tensor, Var};

pub const DEFAULT_REDUCTION: usize = 8;

/// Graph handles for the four PAM 1×1 convolutions.
#[derive(Clone, Copy, Debug)]
pub struct PamVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub w_out: Var,
    pub b_out: Var,
}

/// Stand-alone PAM weights: query/key/value project `C → C/r`, the output
/// projection restores `C/r → C`.
#[derive(Clone, Debug, PartialEq)]
pub struct PamParams<T> {
    pub channels: usize,
    pub reduction: usize,
    pub store: ParamStore<T>,
}

fn check_reduction(channels: usize, reduction: usize) -> Result<()> {
    if reduction == 0 || channels % reduction != 0 {
        return Err(Error::Config(format!(
            "attention reduction {reduction} must divide channel count {channels}"
        )));
    }
    Ok(())
}

impl<T: Scalar> PamParams<T> {
    pub fn random<R: Rng>(channels: usize, reduction: usize, rng: &mut R) -> Result<Self> {
        let layer = SelfAttention::new("pam", channels, reduction)?;
        let mut specs = Vec::new();
        layer.specs(&mut specs);
        Ok(PamParams { channels, reduction, store: ParamStore::init(&specs, rng) })
    }

    pub fn layer(&self) -> Result<SelfAttention> {
        SelfAttention::new("pam", self.channels, self.reduction)
    }

    /// Binds the weights into `g` as constants or trainable leaves.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Result<PamVars> {
        let layer = self.layer()?;
        let mut ctx = Ctx::new(g, &self.store, trainable);
        layer.bind(&mut ctx)
    }
}

/// `x + w_out(D(Q,K,V))` with softplus feature maps on Q and K.
pub fn pam_forward<T: Scalar>(g: &mut Graph<T>, x: Var, p: &PamVars) -> Result<Var> {
    let [n, c, h, w] = nchw(g, x, "pam")?;
    let ck = g.shape(p.wq)[0];
    if ck == 0 || c % ck != 0 {
        return Err(Error::shape("pam", format!("query projection to {ck} channels does not divide {c}")));
    }
    let hw = h * w;
    let q = g.conv2d(x, p.wq, Some(p.bq), 1, 0)?;
    let q = g.softplus(q)?;
    let q = g.reshape(q, &[n, ck, hw])?;
    let q_t = g.transpose(q)?;
    let k = g.conv2d(x, p.wk, Some(p.bk), 1, 0)?;
    let k = g.softplus(k)?;
    let k = g.reshape(k, &[n, ck, hw])?;
    let v = g.conv2d(x, p.wv, Some(p.bv), 1, 0)?;
    let v = g.reshape(v, &[n, ck, hw])?;
    let v_t = g.transpose(v)?;

    let kv = g.matmul(k, v_t)?; // [n, ck, ck]
    let num = g.matmul(q_t, kv)?; // [n, hw, ck]
    let k_sum = g.sum_axis(k, 2)?; // [n, ck, 1]
    let den = g.matmul(q_t, k_sum)?; // [n, hw, 1]
    let att = g.div(num, den)?;
    let att = g.transpose(att)?;
    let att = g.reshape(att, &[n, ck, h, w])?;
    let out = g.conv2d(att, p.w_out, Some(p.b_out), 1, 0)?;
    g.add(x, out)
}

/// The `(C,C)` channel attention matrix `softmax_j(X·Xᵀ)` per batch item.
pub fn cam_attention<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let [n, c, h, w] = nchw(g, x, "cam")?;
    let q = g.reshape(x, &[n, c, h * w])?;
    let k = g.transpose(q)?;
    let energy = g.matmul(q, k)?;
    g.softmax(energy, 2)
}

/// `x + reshape(A·V)` with `V` the input flattened to `(C, HW)`.
pub fn cam_forward<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let [n, c, h, w] = nchw(g, x, "cam")?;
    let a = cam_attention(g, x)?;
    let v = g.reshape(x, &[n, c, h * w])?;
    let av = g.matmul(a, v)?;
    let av = g.reshape(av, &[n, c, h, w])?;
    g.add(x, av)
}

pub fn self_attention_forward<T: Scalar>(g: &mut Graph<T>, x: Var, p: &PamVars) -> Result<Var> {
    let pam = pam_forward(g, x, p)?;
    let cam = cam_forward(g, x)?;
    g.add(pam, cam)
}

fn nchw<T: Scalar>(g: &Graph<T>, x: Var, op: &'static str) -> Result<[usize; 4]> {
    match *g.shape(x) {
        [n, c, h, w] => Ok([n, c, h, w]),
        ref s => Err(Error::shape(op, format!("expected [N,C,H,W], got {s:?}"))),
    }
}

/// Model layer wrapping [`self_attention_forward`] with named parameters
/// `<name>.query`, `.key`, `.value`, `.out`.
#[derive(Clone, Debug, PartialEq)]
pub struct SelfAttention {
    pub name: String,
    pub channels: usize,
    pub reduction: usize,
    query: Conv2d,
    key: Conv2d,
    value: Conv2d,
    out: Conv2d,
}

impl SelfAttention {
    pub fn new(name: impl Into<String>, channels: usize, reduction: usize) -> Result<Self> {
        check_reduction(channels, reduction)?;
        let name = name.into();
        let ck = channels / reduction;
        Ok(SelfAttention {
            query: Conv2d::new(format!("{name}.query"), channels, ck, 1, 1, 0),
            key: Conv2d::new(format!("{name}.key"), channels, ck, 1, 1, 0),
            value: Conv2d::new(format!("{name}.value"), channels, ck, 1, 1, 0),
            out: Conv2d::new(format!("{name}.out"), ck, channels, 1, 1, 0),
            name,
            channels,
            reduction,
        })
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        for conv in [&self.query, &self.key, &self.value, &self.out] {
            conv.specs(out);
        }
    }

    pub fn bind<T: Scalar>(&self, ctx: &mut Ctx<T>) -> Result<PamVars> {
        let mut pick = |conv: &Conv2d| -> Result<(Var, Var)> {
            Ok((ctx.param(&format!("{}.weight", conv.name))?, ctx.param(&format!("{}.bias", conv.name))?))
        };
        let (wq, bq) = pick(&self.query)?;
        let (wk, bk) = pick(&self.key)?;
        let (wv, bv) = pick(&self.value)?;
        let (w_out, b_out) = pick(&self.out)?;
        Ok(PamVars { wq, bq, wk, bk, wv, bv, w_out, b_out })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let c = ctx.graph.shape(x).get(1).copied();
        if c != Some(self.channels) {
            return Err(Error::shape("self_attention", format!("{}: expected {} channels, got {:?}", self.name, self.channels, ctx.graph.shape(x))));
        }
        let p = self.bind(ctx)?;
        crate::nn::in_layer(&self.name, self_attention_forward(ctx.graph, x, &p))
    }
}

/// Plain tensor convenience: PAM on constants, no gradient tracking.
pub fn pam_eval<T: Scalar>(x: &Tensor<T>, p: &PamParams<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone())?;
    let vars = p.bind(&mut g, false)?;
    let y = pam_forward(&mut g, xv, &vars)?;
    Ok(g.value(y).clone())
}

pub fn cam_eval<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone())?;
    let y = cam_forward(&mut g, xv)?;
    Ok(g.value(y).clone())
}
