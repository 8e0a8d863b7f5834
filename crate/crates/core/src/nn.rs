//! Parameter storage and the small set of layers the encoders are built from.
//!
//! Layers keep their weights as `Var`s registered in a [`ParamStore`] under
//! dotted names. All inputs are flattened to 2-D before matrix products.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;

/// Named trainable tensors with seeded initialization.
#[derive(Debug)]
pub struct ParamStore {
    seed: u64,
    dtype: DType,
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            seed,
            dtype,
            vars: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &'static Device {
        &Device::Cpu
    }

    /// Registers a tensor drawn from `U(-bound, bound)`. The draw depends only
    /// on the store seed and `name`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let mut r = rng::stream(self.seed, name, &[]);
        let values: Vec<f64> = (0..n)
            .map(|_| if bound > 0.0 { r.random_range(-bound..bound) } else { 0.0 })
            .collect();
        let t = Tensor::from_vec(values, shape, self.device())?.to_dtype(self.dtype)?;
        self.insert(name, t)
    }

    /// Fan-in scaled uniform initialization, bound `1 / sqrt(fan_in)`.
    pub fn fan_in(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<Tensor> {
        self.uniform(name, shape, 1.0 / (fan_in.max(1) as f64).sqrt())
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let t = (Tensor::ones(shape, self.dtype, self.device())? * value)?;
        self.insert(name, t)
    }

    fn insert(&mut self, name: &str, t: Tensor) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::InvalidArgument(format!("parameter `{name}` registered twice")));
        }
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    /// Changes the seed used by later registrations and returns the old one.
    pub fn reseed(&mut self, seed: u64) -> u64 {
        std::mem::replace(&mut self.seed, seed)
    }

    /// Drops every variable whose name starts with `prefix`.
    pub fn remove(&mut self, prefix: &str) {
        self.vars.retain(|k, _| !k.starts_with(prefix));
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Variables whose name starts with `prefix`, in name order.
    pub fn with_prefix(&self, prefix: &str) -> Vec<(String, Var)> {
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn count(&self, prefix: &str) -> usize {
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    /// Overwrites the value of a registered variable in place.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        if var.dims() != value.dims() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Deep copies of every variable, detached from the live storage.
    pub fn snapshot(&self, prefix: &str) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?.detach())))
            .collect()
    }

    pub fn restore(&self, snapshot: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, value) in snapshot {
            self.set(name, value)?;
        }
        Ok(())
    }
}

/// `x @ w^T + b` over the last axis of an input of any rank.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<Self> {
        Ok(Self {
            weight: store.fan_in(&format!("{name}.weight"), &[output, input], input)?,
            bias: store.fan_in(&format!("{name}.bias"), &[output], input)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let (&k, lead) = dims.split_last().ok_or_else(|| Error::ShapeMismatch("scalar input".into()))?;
        let n: usize = lead.iter().product();
        let out_dim = self.weight.dim(0)?;
        let ones = Tensor::ones((n, 1), x.dtype(), x.device())?;
        let y = (x.reshape((n, k))?.matmul(&self.weight.t()?)?
            + ones.matmul(&self.bias.reshape((1, out_dim))?)?)?;
        let mut out = lead.to_vec();
        out.push(out_dim);
        Ok(y.reshape(out)?)
    }

    pub fn num_params(&self) -> usize {
        self.weight.elem_count() + self.bias.elem_count()
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.constant(&format!("{name}.gamma"), &[dim], 1.0)?,
            beta: store.constant(&format!("{name}.beta"), &[dim], 0.0)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let y = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(y.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Softmax over the last axis.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Log-softmax over the last axis.
pub fn log_softmax(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&m)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// Mean cross-entropy between logits `[B, K]` and target distributions `[B, K]`.
pub fn soft_cross_entropy(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let lp = log_softmax(logits)?;
    let per = (lp * targets)?.sum(D::Minus1)?.neg()?;
    Ok(per.mean_all()?)
}

/// Gated recurrent unit over `[B, T, input]`, returning every hidden state
/// `[B, T, hidden]`.
#[derive(Debug, Clone)]
pub struct Gru {
    input: Linear,
    recurrent: Linear,
    hidden: usize,
}

impl Gru {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            input: Linear::new(store, &format!("{name}.ih"), input, 3 * hidden)?,
            recurrent: Linear::new(store, &format!("{name}.hh"), hidden, 3 * hidden)?,
            hidden,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, _) = x.dims3()?;
        let h = self.hidden;
        let gates_in = self.input.forward(x)?;
        let mut state = Tensor::zeros((b, h), x.dtype(), x.device())?;
        let mut outputs = Vec::with_capacity(t);
        for step in 0..t {
            let gi = gates_in.narrow(1, step, 1)?.squeeze(1)?;
            let gh = self.recurrent.forward(&state)?;
            let rz = sigmoid(&(gi.narrow(1, 0, 2 * h)? + gh.narrow(1, 0, 2 * h)?)?)?;
            let r = rz.narrow(1, 0, h)?;
            let z = rz.narrow(1, h, h)?;
            let n = (gi.narrow(1, 2 * h, h)? + (r * gh.narrow(1, 2 * h, h)?)?)?.tanh()?;
            state = (&n + (z * (&state - &n)?)?)?;
            outputs.push(state.clone());
        }
        Ok(Tensor::stack(&outputs, 1)?)
    }
}

/// 1-D convolution over channel-last `[N, L, C]` computed as patch
/// extraction followed by a matrix product. Output is `[N, P, out]` with
/// `P = (L - k) / s + 1`.
#[derive(Debug, Clone)]
pub struct PatchConv {
    linear: Linear,
    kernel: usize,
    stride: usize,
}

impl PatchConv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(Error::Config("kernel and stride must be positive".into()));
        }
        Ok(Self {
            linear: Linear::new(store, name, in_channels * kernel, out_channels)?,
            kernel,
            stride,
        })
    }

    pub fn output_len(&self, len: usize) -> usize {
        conv_output_len(len, self.kernel, self.stride)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.linear.forward(&unfold(x, self.kernel, self.stride)?)
    }
}

pub fn conv_output_len(len: usize, kernel: usize, stride: usize) -> usize {
    if len < kernel {
        0
    } else {
        (len - kernel) / stride + 1
    }
}

/// `[N, L, C]` to `[N, P, k * C]` sliding windows, position-major within a
/// window.
pub fn unfold(x: &Tensor, kernel: usize, stride: usize) -> Result<Tensor> {
    let (n, l, c) = x.dims3()?;
    let p = conv_output_len(l, kernel, stride);
    if p == 0 {
        return Err(Error::ShapeMismatch(format!(
            "length {l} is shorter than kernel {kernel}"
        )));
    }
    if kernel == stride {
        return Ok(x.narrow(1, 0, p * kernel)?.reshape((n, p, kernel * c))?);
    }
    let idx: Vec<u32> = (0..p)
        .flat_map(|i| (0..kernel).map(move |j| (i * stride + j) as u32))
        .collect();
    let idx = Tensor::new(idx, x.device())?;
    Ok(x.index_select(&idx, 1)?.reshape((n, p, kernel * c))?)
}

/// Largest absolute value, or an error when the tensor holds NaN or Inf or
/// exceeds `limit`.
pub fn check_activation(x: &Tensor, what: &str, limit: f64) -> Result<()> {
    let m = x
        .abs()?
        .flatten_all()?
        .max(0)?
        .to_dtype(DType::F64)?
        .to_scalar::<f64>()?;
    let sum = x.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !m.is_finite() || !sum.is_finite() {
        return Err(Error::NonFiniteActivation(format!("{what} holds NaN or Inf")));
    }
    if m > limit {
        return Err(Error::NonFiniteActivation(format!(
            "{what} reaches {m:.3e}, above {limit:.0e}"
        )));
    }
    Ok(())
}

pub fn to_f64_vec(x: &Tensor) -> Result<Vec<f64>> {
    Ok(x.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn initialization_depends_on_seed_and_name_only() {
        let mut a = ParamStore::new(3, DType::F32);
        let mut b = ParamStore::new(3, DType::F32);
        let ta = a.fan_in("x.weight", &[4, 5], 5).unwrap();
        b.fan_in("other", &[2], 2).unwrap();
        let tb = b.fan_in("x.weight", &[4, 5], 5).unwrap();
        assert_eq!(to_f64_vec(&ta).unwrap(), to_f64_vec(&tb).unwrap());
        let bound = 1.0 / 5f64.sqrt();
        assert!(to_f64_vec(&ta).unwrap().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn set_is_visible_through_layer_handles() {
        let mut store = ParamStore::new(0, DType::F64);
        let lin = Linear::new(&mut store, "l", 3, 2).unwrap();
        store
            .set("l.weight", &Tensor::zeros((2, 3), DType::F64, &Device::Cpu).unwrap())
            .unwrap();
        assert_eq!(to_f64_vec(&lin.weight).unwrap(), vec![0.0; 6]);
        assert_eq!(lin.num_params(), 8);
    }

    #[test]
    fn unfold_matches_direct_convolution() {
        let dev = Device::Cpu;
        let x = Tensor::arange(0f64, 24.0, &dev).unwrap().reshape((1, 12, 2)).unwrap();
        for (k, s) in [(3, 1), (4, 4), (3, 2)] {
            let mut store = ParamStore::new(1, DType::F64);
            let conv = PatchConv::new(&mut store, "c", 2, 3, k, s).unwrap();
            let y = conv.forward(&x).unwrap();
            let p = conv.output_len(12);
            assert_eq!(y.dims(), &[1, p, 3]);
            let w = conv.linear.weight.to_vec2::<f64>().unwrap();
            let b = conv.linear.bias.to_vec1::<f64>().unwrap();
            let xv = x.reshape((12, 2)).unwrap().to_vec2::<f64>().unwrap();
            let yv = y.reshape((p, 3)).unwrap().to_vec2::<f64>().unwrap();
            for (i, row) in yv.iter().enumerate() {
                for (o, got) in row.iter().enumerate() {
                    let mut want = b[o];
                    for c in 0..2 {
                        for j in 0..k {
                            want += w[o][j * 2 + c] * xv[i * s + j][c];
                        }
                    }
                    assert!((got - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn log_softmax_is_stable_for_large_logits() {
        let x = Tensor::new(&[[1000.0f64, 0.0, -1000.0]], &Device::Cpu).unwrap();
        let y = log_softmax(&x).unwrap().to_vec2::<f64>().unwrap();
        assert!(y[0][0].abs() < 1e-12);
        assert!((y[0][1] + 1000.0).abs() < 1e-9);
        let p = softmax(&x).unwrap().to_vec2::<f64>().unwrap();
        assert!((p[0].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gru_matches_scalar_recurrence() {
        let mut store = ParamStore::new(9, DType::F64);
        let gru = Gru::new(&mut store, "g", 2, 1).unwrap();
        let x = Tensor::new(&[[[0.5f64, -1.0], [0.25, 2.0]]], &Device::Cpu).unwrap();
        let out = to_f64_vec(&gru.forward(&x).unwrap()).unwrap();
        let wi = gru.input.weight.to_vec2::<f64>().unwrap();
        let bi = gru.input.bias.to_vec1::<f64>().unwrap();
        let wh = gru.recurrent.weight.to_vec2::<f64>().unwrap();
        let bh = gru.recurrent.bias.to_vec1::<f64>().unwrap();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut h = 0.0;
        for (step, xs) in [[0.5, -1.0], [0.25, 2.0]].iter().enumerate() {
            let gi = |g: usize| wi[g][0] * xs[0] + wi[g][1] * xs[1] + bi[g];
            let gh = |g: usize| wh[g][0] * h + bh[g];
            let r = sig(gi(0) + gh(0));
            let z = sig(gi(1) + gh(1));
            let n = (gi(2) + r * gh(2)).tanh();
            h = (1.0 - z) * n + z * h;
            assert!((out[step] - h).abs() < 1e-12);
        }
    }

    #[test]
    fn activation_tripwire() {
        let dev = Device::Cpu;
        let ok = Tensor::new(&[1.0f32, -3.0], &dev).unwrap();
        check_activation(&ok, "x", 1e6).unwrap();
        let big = Tensor::new(&[2e6f32], &dev).unwrap();
        assert_eq!(check_activation(&big, "x", 1e6).unwrap_err().code(), "NON_FINITE_ACTIVATION");
        let nan = Tensor::new(&[f32::NAN], &dev).unwrap();
        assert!(check_activation(&nan, "x", 1e6).is_err());
    }
}
