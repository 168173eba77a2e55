//! Parameter storage and the small layer set the model is built from.
//!
//! Normalization, softmax and sigmoid are composed from primitive tensor ops
//! so that reverse-mode gradients flow through every one of them.

use std::cell::Cell;
use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Whether a forward pass belongs to a training step. Controls auxiliary
/// heads and spectral-norm power iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        self == Mode::Train
    }
}

/// Non-trainable state that a forward pass may update (spectral-norm
/// singular-vector estimates).
pub type Buffer = Arc<Mutex<Tensor>>;

#[derive(Clone, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// Normal truncated to two standard deviations.
    TruncNormal(f64),
    /// He normal with the given fan-in.
    FanIn(usize),
    Normal(f64),
}

/// Named trainable variables plus named buffers, ordered by name.
#[derive(Clone, Default)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Buffer>,
}

impl ParamStore {
    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Variables whose name starts with one of `prefixes`.
    pub fn select(&self, prefixes: &[&str]) -> Vec<(String, Var)> {
        self.vars
            .iter()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Buffer)> {
        self.buffers.iter()
    }

    /// Snapshot of every variable and buffer, buffers under a `buffer:` prefix.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (k, v) in &self.vars {
            out.insert(k.clone(), v.as_tensor().copy()?);
        }
        for (k, b) in &self.buffers {
            out.insert(format!("buffer:{k}"), b.lock().unwrap().copy()?);
        }
        Ok(out)
    }

    /// Restores values from a snapshot. Every entry of the store must be
    /// present with a matching shape; extra entries are reported.
    pub fn restore(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        self.restore_filtered(tensors, |_| true)
    }

    /// Like [`restore`](Self::restore) but only for names accepted by `keep`;
    /// entries of the snapshot that are not in the store are ignored.
    pub fn restore_filtered(
        &self,
        tensors: &BTreeMap<String, Tensor>,
        keep: impl Fn(&str) -> bool,
    ) -> Result<()> {
        for (k, v) in &self.vars {
            if !keep(k) {
                continue;
            }
            let t = tensors.get(k).ok_or_else(|| Error::Corrupt(format!("missing tensor `{k}`")))?;
            if t.dims() != v.dims() {
                return Err(Error::shape(format!("`{k}`: stored {:?}, model {:?}", t.dims(), v.dims())));
            }
            v.set(&t.to_dtype(v.dtype())?)?;
        }
        for (k, b) in &self.buffers {
            if !keep(k) {
                continue;
            }
            let key = format!("buffer:{k}");
            let t = tensors.get(&key).ok_or_else(|| Error::Corrupt(format!("missing tensor `{key}`")))?;
            let mut guard = b.lock().unwrap();
            if t.dims() != guard.dims() {
                return Err(Error::shape(format!("`{key}`: stored {:?}, model {:?}", t.dims(), guard.dims())));
            }
            *guard = t.to_dtype(guard.dtype())?;
        }
        Ok(())
    }
}

struct BuilderInner {
    store: ParamStore,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

/// Hierarchical constructor for parameters. Clones share the same store.
#[derive(Clone)]
pub struct ParamBuilder {
    inner: Arc<Mutex<BuilderInner>>,
    prefix: String,
}

impl ParamBuilder {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        let inner = BuilderInner {
            store: ParamStore::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device: device.clone(),
        };
        Self { inner: Arc::new(Mutex::new(inner)), prefix: String::new() }
    }

    pub fn pp(&self, name: impl std::fmt::Display) -> Self {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        Self { inner: self.inner.clone(), prefix }
    }

    pub fn dtype(&self) -> DType {
        self.inner.lock().unwrap().dtype
    }

    pub fn device(&self) -> Device {
        self.inner.lock().unwrap().device.clone()
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn param(&self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        let path = self.path(name);
        let mut inner = self.inner.lock().unwrap();
        if inner.store.vars.contains_key(&path) {
            return Err(Error::arg(format!("duplicate parameter `{path}`")));
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(c) => vec![c; n],
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).map_err(|e| Error::arg(e.to_string()))?;
                (0..n).map(|_| d.sample(&mut inner.rng)).collect()
            }
            Init::FanIn(fan_in) => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                let d = Normal::new(0.0, std).map_err(|e| Error::arg(e.to_string()))?;
                (0..n).map(|_| d.sample(&mut inner.rng)).collect()
            }
            Init::TruncNormal(std) => {
                let d = Normal::new(0.0, 1.0).map_err(|e| Error::arg(e.to_string()))?;
                (0..n)
                    .map(|_| loop {
                        let z: f64 = d.sample(&mut inner.rng);
                        if z.abs() <= 2.0 {
                            break z * std;
                        }
                    })
                    .collect()
            }
        };
        let t = Tensor::from_vec(data, shape, &inner.device)?.to_dtype(inner.dtype)?;
        let var = Var::from_tensor(&t)?;
        inner.store.vars.insert(path, var.clone());
        Ok(var)
    }

    /// Registers a buffer initialized with unit-norm Gaussian noise.
    pub fn unit_buffer(&self, name: &str, len: usize) -> Result<Buffer> {
        let path = self.path(name);
        let mut inner = self.inner.lock().unwrap();
        let d = Normal::new(0.0, 1.0).unwrap();
        let mut data: Vec<f64> = (0..len).map(|_| d.sample(&mut inner.rng)).collect();
        let norm = data.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        data.iter_mut().for_each(|x| *x /= norm);
        let t = Tensor::from_vec(data, len, &inner.device)?.to_dtype(inner.dtype)?;
        let buf = Arc::new(Mutex::new(t));
        inner.store.buffers.insert(path, buf.clone());
        Ok(buf)
    }

    /// Takes the accumulated store. Layers keep their own handles.
    pub fn finish(&self) -> ParamStore {
        std::mem::take(&mut self.inner.lock().unwrap().store)
    }
}

thread_local! {
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
}

/// Runs `f` with parameters read as constants, so forward passes keep no
/// autograd graph. Used for inference.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            NO_GRAD.with(|c| c.set(self.0));
        }
    }
    let _restore = Restore(NO_GRAD.with(|c| c.replace(true)));
    f()
}

/// Current value of a parameter; detached inside [`no_grad`].
pub fn weight(v: &Var) -> Tensor {
    if NO_GRAD.with(Cell::get) {
        v.as_tensor().detach()
    } else {
        v.as_tensor().clone()
    }
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Logistic function in its tanh form, which saturates without overflow in
/// either the value or the gradient.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.gelu_erf()?)
}

/// L2-normalizes along the last dimension.
/// The floor applies to the squared norm, so zero vectors get a zero
/// gradient rather than NaN.
pub fn l2_normalize_last(x: &Tensor, eps: f64) -> Result<Tensor> {
    let n = x.sqr()?.sum_keepdim(D::Minus1)?.maximum(eps * eps)?.sqrt()?;
    Ok(x.broadcast_div(&n)?)
}

/// Mean of |a - b| over every element.
pub fn l1_mean(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok((a - b)?.abs()?.mean_all()?)
}

pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: Var,
    bias: Option<Var>,
}

impl Linear {
    pub fn new(pb: &ParamBuilder, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let weight = pb.param("weight", &[out_dim, in_dim], Init::TruncNormal(0.02))?;
        let bias = if bias { Some(pb.param("bias", &[out_dim], Init::Zeros)?) } else { None };
        Ok(Self { weight, bias })
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    /// Applies to the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&weight(&self.weight).t()?)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&weight(b))?),
            None => Ok(y),
        }
    }
}

/// Layer normalization over the last dimension.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    weight: Var,
    bias: Var,
    eps: f64,
}

impl LayerNorm {
    pub fn new(pb: &ParamBuilder, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.param("weight", &[dim], Init::Ones)?,
            bias: pb.param("bias", &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xn.broadcast_mul(&weight(&self.weight))?.broadcast_add(&weight(&self.bias))?)
    }

    /// Normalizes the channel axis of an NCHW map.
    pub fn forward_nchw(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.forward(&x.permute((0, 2, 3, 1))?)?;
        Ok(y.permute((0, 3, 1, 2))?.contiguous()?)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub const fn same(kernel: usize) -> Self {
        Self { kernel, stride: 1, padding: kernel / 2 }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    spec: ConvSpec,
}

impl Conv2d {
    pub fn new(pb: &ParamBuilder, c_in: usize, c_out: usize, spec: ConvSpec, bias: bool) -> Result<Self> {
        let k = spec.kernel;
        let weight = pb.param("weight", &[c_out, c_in, k, k], Init::FanIn(c_in * k * k))?;
        let bias = if bias { Some(pb.param("bias", &[c_out], Init::Zeros)?) } else { None };
        Ok(Self { weight, bias, spec })
    }

    /// Biased convolution with explicit initializers.
    pub fn with_init(pb: &ParamBuilder, c_in: usize, c_out: usize, spec: ConvSpec, weight: Init, bias: Init) -> Result<Self> {
        let k = spec.kernel;
        let weight = pb.param("weight", &[c_out, c_in, k, k], weight)?;
        let bias = Some(pb.param("bias", &[c_out], bias)?);
        Ok(Self { weight, bias, spec })
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d_with(x, &weight(&self.weight), self.bias.as_ref(), self.spec)
    }
}

fn conv2d_with(x: &Tensor, w: &Tensor, bias: Option<&Var>, spec: ConvSpec) -> Result<Tensor> {
    let y = if spec.kernel == 1 && spec.stride == 1 && spec.padding == 0 {
        // pointwise conv as a matmul over the channel axis
        let (b, c, h, wd) = x.dims4()?;
        let c_out = w.dim(0)?;
        let w2 = w.reshape((c_out, c))?;
        w2.broadcast_matmul(&x.reshape((b, c, h * wd))?)?.reshape((b, c_out, h, wd))?
    } else {
        x.conv2d(w, spec.padding, spec.stride, 1, 1)?
    };
    match bias {
        Some(b) => Ok(y.broadcast_add(&weight(b).reshape((1, (), 1, 1))?)?),
        None => Ok(y),
    }
}

/// Spectral normalization of a weight viewed as a matrix with `rows` rows.
/// One power-iteration step runs per training forward; evaluation reuses the
/// stored estimate unchanged.
#[derive(Clone, Debug)]
pub struct SpectralNorm {
    u: Buffer,
    rows: usize,
}

impl SpectralNorm {
    pub fn new(pb: &ParamBuilder, rows: usize) -> Result<Self> {
        Ok(Self { u: pb.unit_buffer("sn_u", rows)?, rows })
    }

    /// Returns `weight / sigma` where `weight` is reshaped to `rows x -1`
    /// after moving `row_axis` to the front.
    pub fn normalize(&self, weight: &Tensor, row_axis: usize, mode: Mode) -> Result<Tensor> {
        let mat = if row_axis == 0 {
            weight.reshape((self.rows, ()))?
        } else {
            weight.transpose(0, row_axis)?.contiguous()?.reshape((self.rows, ()))?
        };
        let wd = mat.detach();
        let mut u = self.u.lock().unwrap();
        if mode.is_train() {
            *u = power_step(&wd, &u)?;
        }
        let v = normalize_vec(&wd.t()?.matmul(&u.unsqueeze(1)?)?.squeeze(1)?)?;
        let sigma = u.unsqueeze(0)?.matmul(&mat.matmul(&v.unsqueeze(1)?)?)?.squeeze(1)?.squeeze(0)?;
        Ok(weight.broadcast_div(&sigma.maximum(1e-12)?)?)
    }

    /// Current top-singular-value estimate for `weight` without touching state.
    pub fn sigma(&self, weight: &Tensor, row_axis: usize) -> Result<f64> {
        let mat = weight.transpose(0, row_axis)?.contiguous()?.reshape((self.rows, ()))?.detach();
        let u = self.u.lock().unwrap().clone();
        let v = normalize_vec(&mat.t()?.matmul(&u.unsqueeze(1)?)?.squeeze(1)?)?;
        let s = u.unsqueeze(0)?.matmul(&mat.matmul(&v.unsqueeze(1)?)?)?;
        scalar_f64(&s.flatten_all()?.get(0)?)
    }

    /// Runs `steps` power iterations on `weight` (no gradient).
    pub fn iterate(&self, weight: &Tensor, row_axis: usize, steps: usize) -> Result<()> {
        let mat = weight.transpose(0, row_axis)?.contiguous()?.reshape((self.rows, ()))?.detach();
        let mut u = self.u.lock().unwrap();
        for _ in 0..steps {
            *u = power_step(&mat, &u)?;
        }
        Ok(())
    }
}

fn normalize_vec(v: &Tensor) -> Result<Tensor> {
    let n = v.sqr()?.sum_all()?.sqrt()?.maximum(1e-12)?;
    Ok(v.broadcast_div(&n)?)
}

fn power_step(mat: &Tensor, u: &Tensor) -> Result<Tensor> {
    let v = normalize_vec(&mat.t()?.matmul(&u.unsqueeze(1)?)?.squeeze(1)?)?;
    normalize_vec(&mat.matmul(&v.unsqueeze(1)?)?.squeeze(1)?)
}

/// Convolution whose weight is spectrally normalized on every forward.
#[derive(Clone, Debug)]
pub struct SnConv2d {
    weight: Var,
    bias: Var,
    sn: SpectralNorm,
    spec: ConvSpec,
}

impl SnConv2d {
    pub fn new(pb: &ParamBuilder, c_in: usize, c_out: usize, spec: ConvSpec) -> Result<Self> {
        let k = spec.kernel;
        Ok(Self {
            weight: pb.param("weight", &[c_out, c_in, k, k], Init::FanIn(c_in * k * k))?,
            bias: pb.param("bias", &[c_out], Init::Zeros)?,
            sn: SpectralNorm::new(pb, c_out)?,
            spec,
        })
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn spectral(&self) -> &SpectralNorm {
        &self.sn
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let w = self.sn.normalize(&weight(&self.weight), 0, mode)?;
        conv2d_with(x, &w, Some(&self.bias), self.spec)
    }
}

/// Stride-2 transposed convolution (kernel 3) that doubles the spatial size,
/// with spectral normalization over its output-channel axis.
#[derive(Clone, Debug)]
pub struct SnDeconv2x {
    weight: Var,
    bias: Var,
    sn: SpectralNorm,
}

impl SnDeconv2x {
    pub fn new(pb: &ParamBuilder, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.param("weight", &[c_in, c_out, 3, 3], Init::FanIn(c_in * 9))?,
            bias: pb.param("bias", &[c_out], Init::Zeros)?,
            sn: SpectralNorm::new(pb, c_out)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let w = self.sn.normalize(&weight(&self.weight), 1, mode)?;
        // (h - 1) * 2 - 2 + 3 + 1 = 2h
        let y = x.conv_transpose2d(&w, 1, 1, 2, 1)?;
        Ok(y.broadcast_add(&weight(&self.bias).reshape((1, (), 1, 1))?)?)
    }
}

/// Two-layer position-wise feed-forward network with GELU.
#[derive(Clone, Debug)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(pb: &ParamBuilder, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self { fc1: Linear::new(&pb.pp("fc1"), dim, hidden, true)?, fc2: Linear::new(&pb.pp("fc2"), hidden, dim, true)? })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&gelu(&self.fc1.forward(x)?)?)
    }
}
