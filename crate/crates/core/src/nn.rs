//! Named parameters and the convolution layers the architecture is built from.
//!
//! Layers hold only hyperparameters and dotted parameter names
//! (`encoder.entry1.sep1.depthwise`); values live in a [`ParamStore`] and are
//! bound into a graph on demand through a [`Ctx`].

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform on `±gain·sqrt(3/fan_in)`.
    KaimingUniform { fan_in: usize, gain: f64 },
    Zeros,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    fn new(name: String, shape: Vec<usize>, init: Init) -> Self {
        ParamSpec { name, shape, init }
    }
}

/// Parameter tensors keyed by dotted path, iterated in sorted name order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { tensors: BTreeMap::new() }
    }

    /// Draws every spec in order from `rng`.
    pub fn init<R: Rng>(specs: &[ParamSpec], rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        for spec in specs {
            let t = match spec.init {
                Init::Zeros => Tensor::zeros(spec.shape.clone()),
                Init::KaimingUniform { fan_in, gain } => {
                    let bound = gain * (3.0 / fan_in.max(1) as f64).sqrt();
                    Tensor::from_fn(spec.shape.clone(), |_| T::lit(rng.random_range(-bound..=bound)))
                }
            };
            store.insert(spec.name.clone(), t);
        }
        store
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Checks that the store holds exactly the tensors `specs` describe.
    pub fn validate(&self, specs: &[ParamSpec]) -> Result<()> {
        for spec in specs {
            match self.tensors.get(&spec.name) {
                None => return Err(Error::Config(format!("missing parameter {}", spec.name))),
                Some(t) if t.shape() != spec.shape.as_slice() => {
                    return Err(Error::Config(format!(
                        "parameter {} has shape {:?}, architecture expects {:?}",
                        spec.name,
                        t.shape(),
                        spec.shape
                    )))
                }
                _ => {}
            }
        }
        if self.tensors.len() != specs.len() {
            let known: std::collections::BTreeSet<&str> = specs.iter().map(|s| s.name.as_str()).collect();
            let extra: Vec<&str> = self.names().filter(|n| !known.contains(n)).collect();
            return Err(Error::Config(format!("unexpected parameters {extra:?}")));
        }
        Ok(())
    }
}

/// Binds stored parameters into one graph and records named activations.
pub struct Ctx<'a, T: Scalar> {
    pub graph: &'a mut Graph<T>,
    store: &'a ParamStore<T>,
    trainable: bool,
    bound: BTreeMap<String, Var>,
    taps: BTreeMap<String, Var>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    /// `trainable` marks bound parameters as requiring grad.
    pub fn new(graph: &'a mut Graph<T>, store: &'a ParamStore<T>, trainable: bool) -> Self {
        Ctx { graph, store, trainable, bound: BTreeMap::new(), taps: BTreeMap::new() }
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self
            .store
            .get(name)
            .ok_or_else(|| Error::Config(format!("parameter {name} not in store")))?
            .clone();
        let v = if self.trainable { self.graph.param(t)? } else { self.graph.constant(t)? };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn tap(&mut self, name: impl Into<String>, v: Var) {
        self.taps.insert(name.into(), v);
    }

    pub fn taps(&self) -> &BTreeMap<String, Var> {
        &self.taps
    }

    pub fn bound(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }

    /// Gradients of every bound parameter after `graph.backward`.
    pub fn param_grads(&self) -> Result<BTreeMap<String, Tensor<T>>> {
        self.bound
            .iter()
            .map(|(k, &v)| {
                self.graph
                    .grad(v)
                    .cloned()
                    .map(|g| (k.clone(), g))
                    .ok_or_else(|| Error::Numeric(format!("no gradient for {k}")))
            })
            .collect()
    }

    pub fn into_parts(self) -> (BTreeMap<String, Var>, BTreeMap<String, Var>) {
        (self.bound, self.taps)
    }
}

/// Attaches the layer name to shape errors raised inside it.
pub(crate) fn in_layer<V>(name: &str, r: Result<V>) -> Result<V> {
    r.map_err(|e| match e {
        Error::Shape { op, msg } => Error::Shape { op, msg: format!("{name}: {msg}") },
        other => other,
    })
}

const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Conv2d { name: name.into(), in_ch, out_ch, kernel, stride, pad }
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        let k = self.kernel;
        out.push(ParamSpec::new(
            format!("{}.weight", self.name),
            vec![self.out_ch, self.in_ch, k, k],
            Init::KaimingUniform { fan_in: self.in_ch * k * k, gain: RELU_GAIN },
        ));
        out.push(ParamSpec::new(format!("{}.bias", self.name), vec![self.out_ch], Init::Zeros));
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = ctx.param(&format!("{}.weight", self.name))?;
        let b = ctx.param(&format!("{}.bias", self.name))?;
        in_layer(&self.name, ctx.graph.conv2d(x, w, Some(b), self.stride, self.pad))
    }
}

/// Depthwise `k×k` then pointwise `1×1`, with a bias on the pointwise stage.
#[derive(Clone, Debug, PartialEq)]
pub struct SeparableConv {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl SeparableConv {
    /// Fails unless the factorisation has fewer weights than a full conv.
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize) -> Result<Self> {
        let s = SeparableConv { name: name.into(), in_ch, out_ch, kernel, stride, pad };
        if s.weight_count() >= s.full_conv_weight_count() {
            return Err(Error::Config(format!(
                "{}: separable conv {}→{} k={} has {} weights, not fewer than the {} of a full conv",
                s.name,
                in_ch,
                out_ch,
                kernel,
                s.weight_count(),
                s.full_conv_weight_count()
            )));
        }
        Ok(s)
    }

    pub fn weight_count(&self) -> usize {
        separable_weight_count(self.in_ch, self.out_ch, self.kernel)
    }

    pub fn full_conv_weight_count(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel * self.kernel
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        let k = self.kernel;
        out.push(ParamSpec::new(
            format!("{}.depthwise", self.name),
            vec![self.in_ch, 1, k, k],
            Init::KaimingUniform { fan_in: k * k, gain: 1.0 },
        ));
        out.push(ParamSpec::new(
            format!("{}.pointwise", self.name),
            vec![self.out_ch, self.in_ch, 1, 1],
            Init::KaimingUniform { fan_in: self.in_ch, gain: RELU_GAIN },
        ));
        out.push(ParamSpec::new(format!("{}.bias", self.name), vec![self.out_ch], Init::Zeros));
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let dw = ctx.param(&format!("{}.depthwise", self.name))?;
        let pw = ctx.param(&format!("{}.pointwise", self.name))?;
        let b = ctx.param(&format!("{}.bias", self.name))?;
        in_layer(&self.name, ctx.graph.separable_conv2d(x, dw, pw, Some(b), self.stride, self.pad))
    }
}

/// Weights (no bias) of a depthwise-separable conv: `C·k² + O·C`.
pub fn separable_weight_count(in_ch: usize, out_ch: usize, kernel: usize) -> usize {
    in_ch * kernel * kernel + out_ch * in_ch
}

/// Transposed conv with kernel layout `[in, out, k, k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvTranspose2d {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub output_pad: usize,
}

impl ConvTranspose2d {
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize, output_pad: usize) -> Self {
        ConvTranspose2d { name: name.into(), in_ch, out_ch, kernel, stride, pad, output_pad }
    }

    /// 3×3, stride 2: exactly doubles the spatial extent.
    pub fn upsample(name: impl Into<String>, in_ch: usize, out_ch: usize) -> Self {
        Self::new(name, in_ch, out_ch, 3, 2, 1, 1)
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        let k = self.kernel;
        out.push(ParamSpec::new(
            format!("{}.weight", self.name),
            vec![self.in_ch, self.out_ch, k, k],
            Init::KaimingUniform { fan_in: self.in_ch * k * k, gain: RELU_GAIN },
        ));
        out.push(ParamSpec::new(format!("{}.bias", self.name), vec![self.out_ch], Init::Zeros));
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = ctx.param(&format!("{}.weight", self.name))?;
        let b = ctx.param(&format!("{}.bias", self.name))?;
        in_layer(&self.name, ctx.graph.conv_transpose2d(x, w, Some(b), self.stride, self.pad, self.output_pad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn separable_weight_arithmetic() {
        assert_eq!(separable_weight_count(64, 128, 3), 8768);
        let s = SeparableConv::new("s", 64, 128, 3, 1, 1).unwrap();
        assert_eq!(s.full_conv_weight_count(), 73728);
        assert!(SeparableConv::new("s", 4, 1, 3, 1, 1).is_err());
    }

    #[test]
    fn init_and_validate() {
        let mut specs = Vec::new();
        Conv2d::new("a", 2, 3, 3, 1, 1).specs(&mut specs);
        let store: ParamStore<f32> = ParamStore::init(&specs, &mut ChaCha8Rng::seed_from_u64(1));
        store.validate(&specs).unwrap();
        let bound = (6.0f32 / 18.0).sqrt();
        assert!(store.get("a.weight").unwrap().data().iter().all(|v| v.abs() <= bound));
        assert!(store.get("a.bias").unwrap().data().iter().all(|&v| v == 0.0));

        let mut other = Vec::new();
        Conv2d::new("a", 2, 4, 3, 1, 1).specs(&mut other);
        assert!(store.validate(&other).is_err());
        let mut bigger = specs.clone();
        SeparableConv::new("b", 8, 8, 3, 1, 1).unwrap().specs(&mut bigger);
        assert!(store.validate(&bigger).is_err());
    }

    #[test]
    fn layer_errors_carry_the_layer_name() {
        let mut specs = Vec::new();
        let conv = Conv2d::new("encoder.stem.conv1", 3, 4, 3, 1, 1);
        conv.specs(&mut specs);
        let store: ParamStore<f64> = ParamStore::init(&specs, &mut ChaCha8Rng::seed_from_u64(0));
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![1, 2, 4, 4])).unwrap();
        let mut ctx = Ctx::new(&mut g, &store, false);
        let err = conv.forward(&mut ctx, x).unwrap_err().to_string();
        assert!(err.contains("encoder.stem.conv1"), "{err}");
    }
}
