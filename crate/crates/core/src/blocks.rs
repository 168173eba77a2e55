//! Transformer blocks over image-shaped token maps.
//!
//! Blocks consume and produce `(B, H, W, C)` tensors. Window attention pads
//! maps whose size is not a multiple of the window, masks the padded keys out
//! of the softmax, and crops after merging. Shifted windows use the cyclic
//! shift plus region mask: after rolling the map by `-shift`, tokens that were
//! not spatially adjacent before the roll land in the same window and must
//! not attend to each other, so every token is labelled with one of nine
//! regions and cross-region logits are suppressed.

use candle_core::{DType, Device, Tensor};

use crate::config::BlockType;
use crate::error::{Error, Result};
use crate::nn::{
    l2_normalize_last, sigmoid, softmax_last, weight, Conv2d, ConvSpec, Init, LayerNorm, Linear, Mlp, ParamBuilder,
};

const MASKED: f64 = -1e4;

/// Splits `(B, H, W, C)` into `(B * H/ws * W/ws, ws*ws, C)` windows, row-major
/// over windows and over tokens within a window.
pub fn window_partition(x: &Tensor, window: usize) -> Result<Tensor> {
    if window == 0 {
        return Err(Error::arg("window size must be positive"));
    }
    let (b, h, w, c) = x.dims4()?;
    if h % window != 0 || w % window != 0 {
        return Err(Error::shape(format!("{h}x{w} map not divisible by window {window}")));
    }
    let (nh, nw) = (h / window, w / window);
    Ok(x.reshape((b, nh, window, nw, window, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b * nh * nw, window * window, c))?)
}

/// Inverse of [`window_partition`].
pub fn window_merge(windows: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (count, n, c) = windows.dims3()?;
    let window = (n as f64).sqrt().round() as usize;
    if window == 0 || window * window != n {
        return Err(Error::shape(format!("{n} tokens per window is not a square")));
    }
    if h % window != 0 || w % window != 0 {
        return Err(Error::shape(format!("{h}x{w} map not divisible by window {window}")));
    }
    let (nh, nw) = (h / window, w / window);
    if count % (nh * nw) != 0 {
        return Err(Error::shape(format!("{count} windows do not tile a {h}x{w} map")));
    }
    let b = count / (nh * nw);
    Ok(windows
        .reshape((b, nh, nw, window, window, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b, h, w, c))?)
}

/// Hyperparameters of a single block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockSpec {
    pub block_type: BlockType,
    pub dim: usize,
    pub heads: usize,
    pub window_size: usize,
    /// 0 or `window_size / 2`.
    pub shift: usize,
    pub ffn_expansion: f64,
    pub sra_reduction: usize,
}

impl BlockSpec {
    fn check(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::arg(format!("dim {} not divisible by {} heads", self.dim, self.heads)));
        }
        if self.block_type.is_windowed() && (self.window_size == 0 || self.shift >= self.window_size) {
            return Err(Error::arg(format!("shift {} must be < window {}", self.shift, self.window_size)));
        }
        if self.sra_reduction == 0 {
            return Err(Error::arg("sra_reduction must be positive"));
        }
        Ok(())
    }

    fn hidden(&self) -> usize {
        ((self.dim as f64) * self.ffn_expansion).round().max(1.0) as usize
    }
}

#[derive(Clone, Debug)]
pub enum VitBlock {
    Swin(SwinBlock),
    Pvt(PvtBlock),
}

impl VitBlock {
    pub fn new(pb: &ParamBuilder, spec: BlockSpec) -> Result<Self> {
        spec.check()?;
        Ok(match spec.block_type {
            BlockType::Swin | BlockType::Swinv2 => VitBlock::Swin(SwinBlock::new(pb, spec)?),
            BlockType::Pvt => VitBlock::Pvt(PvtBlock::new(pb, spec)?),
        })
    }

    pub fn spec(&self) -> &BlockSpec {
        match self {
            VitBlock::Swin(b) => &b.spec,
            VitBlock::Pvt(b) => &b.spec,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_traced(x, false)?.0)
    }

    /// Forward that also returns the attention probabilities, shaped
    /// `(batch_windows, heads, queries, keys)`.
    pub fn forward_traced(&self, x: &Tensor, capture: bool) -> Result<(Tensor, Option<Tensor>)> {
        let (_, _, _, c) = x.dims4()?;
        if c != self.spec().dim {
            return Err(Error::shape(format!("block expects {} channels, got {c}", self.spec().dim)));
        }
        match self {
            VitBlock::Swin(b) => b.forward(x, capture),
            VitBlock::Pvt(b) => b.forward(x, capture),
        }
    }
}

/// Window attention with either dot-product + learned relative bias (v1) or
/// scaled cosine + continuous log-spaced bias (v2).
#[derive(Clone, Debug)]
struct WindowAttention {
    heads: usize,
    window: usize,
    v2: bool,
    qkv: Linear,
    proj: Linear,
    // v1
    bias_table: Option<candle_core::Var>,
    // v2
    q_bias: Option<candle_core::Var>,
    v_bias: Option<candle_core::Var>,
    logit_scale: Option<candle_core::Var>,
    cpb_fc1: Option<Linear>,
    cpb_fc2: Option<Linear>,
}

const CPB_HIDDEN: usize = 512;

impl WindowAttention {
    fn new(pb: &ParamBuilder, dim: usize, heads: usize, window: usize, v2: bool) -> Result<Self> {
        let qkv = Linear::new(&pb.pp("qkv"), dim, 3 * dim, !v2)?;
        let proj = Linear::new(&pb.pp("proj"), dim, dim, true)?;
        let mut a = Self {
            heads,
            window,
            v2,
            qkv,
            proj,
            bias_table: None,
            q_bias: None,
            v_bias: None,
            logit_scale: None,
            cpb_fc1: None,
            cpb_fc2: None,
        };
        if v2 {
            a.q_bias = Some(pb.param("q_bias", &[dim], Init::Zeros)?);
            a.v_bias = Some(pb.param("v_bias", &[dim], Init::Zeros)?);
            a.logit_scale = Some(pb.param("logit_scale", &[heads, 1, 1], Init::Const(10f64.ln()))?);
            a.cpb_fc1 = Some(Linear::new(&pb.pp("cpb.fc1"), 2, CPB_HIDDEN, true)?);
            a.cpb_fc2 = Some(Linear::new(&pb.pp("cpb.fc2"), CPB_HIDDEN, heads, false)?);
        } else {
            let n = (2 * window - 1) * (2 * window - 1);
            a.bias_table = Some(pb.param("relative_bias", &[n, heads], Init::TruncNormal(0.02))?);
        }
        Ok(a)
    }

    /// `(heads, N, N)` additive bias for an effective window `ws <= window`.
    fn position_bias(&self, ws: usize, device: &Device, dtype: DType) -> Result<Tensor> {
        let n = ws * ws;
        if let Some(table) = &self.bias_table {
            let side = 2 * self.window - 1;
            let mut idx = Vec::with_capacity(n * n);
            for i in 0..n {
                for j in 0..n {
                    let dy = (i / ws) as isize - (j / ws) as isize + self.window as isize - 1;
                    let dx = (i % ws) as isize - (j % ws) as isize + self.window as isize - 1;
                    idx.push((dy as usize * side + dx as usize) as u32);
                }
            }
            let idx = Tensor::from_vec(idx, n * n, device)?;
            let b = weight(table).index_select(&idx, 0)?.reshape((n, n, self.heads))?;
            return Ok(b.permute((2, 0, 1))?.contiguous()?);
        }
        // continuous bias: log-spaced relative offsets through a small MLP
        let side = 2 * ws - 1;
        let norm = if ws > 1 { (ws - 1) as f64 } else { 1.0 };
        let mut coords = Vec::with_capacity(side * side * 2);
        for dy in 0..side {
            for dx in 0..side {
                for d in [dy, dx] {
                    let r = (d as f64 - (ws as f64 - 1.0)) / norm * 8.0;
                    coords.push(r.signum() * (r.abs() + 1.0).log2() / 8f64.log2());
                }
            }
        }
        let coords = Tensor::from_vec(coords, (side * side, 2), device)?.to_dtype(dtype)?;
        let h = self.cpb_fc1.as_ref().unwrap().forward(&coords)?.relu()?;
        let table = self.cpb_fc2.as_ref().unwrap().forward(&h)?;
        let mut idx = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let dy = (i / ws) + ws - 1 - (j / ws);
                let dx = (i % ws) + ws - 1 - (j % ws);
                idx.push((dy * side + dx) as u32);
            }
        }
        let idx = Tensor::from_vec(idx, n * n, device)?;
        let b = table.index_select(&idx, 0)?.reshape((n, n, self.heads))?.permute((2, 0, 1))?;
        Ok((sigmoid(&b.contiguous()?)? * 16.0)?)
    }

    /// `windows`: `(B*nW, N, C)`; `mask`: optional `(nW, N, N)` additive mask.
    fn forward(&self, windows: &Tensor, ws: usize, mask: Option<&Tensor>, capture: bool) -> Result<(Tensor, Option<Tensor>)> {
        let (bw, n, c) = windows.dims3()?;
        let hd = c / self.heads;
        let mut qkv = self.qkv.forward(windows)?;
        if self.v2 {
            let qb = weight(self.q_bias.as_ref().unwrap());
            let vb = weight(self.v_bias.as_ref().unwrap());
            let bias = Tensor::cat(&[&qb, &qb.zeros_like()?, &vb], 0)?;
            qkv = qkv.broadcast_add(&bias)?;
        }
        let qkv = qkv.reshape((bw, n, 3, self.heads, hd))?.permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;

        let logits = if self.v2 {
            let qn = l2_normalize_last(&q, 1e-12)?;
            let kn = l2_normalize_last(&k, 1e-12)?;
            let scale = weight(self.logit_scale.as_ref().unwrap()).minimum(100f64.ln())?.exp()?;
            qn.matmul(&kn.t()?)?.broadcast_mul(&scale)?
        } else {
            (q * (hd as f64).powf(-0.5))?.matmul(&k.t()?)?
        };
        let bias = self.position_bias(ws, windows.device(), windows.dtype())?;
        let mut logits = logits.broadcast_add(&bias)?;
        if let Some(mask) = mask {
            let nw = mask.dim(0)?;
            logits = logits
                .reshape((bw / nw, nw, self.heads, n, n))?
                .broadcast_add(&mask.unsqueeze(1)?.unsqueeze(0)?)?
                .reshape((bw, self.heads, n, n))?;
        }
        let probs = softmax_last(&logits)?;
        let out = probs.matmul(&v)?.transpose(1, 2)?.reshape((bw, n, c))?;
        let out = self.proj.forward(&out)?;
        Ok((out, capture.then_some(probs)))
    }
}

#[derive(Clone, Debug)]
pub struct SwinBlock {
    spec: BlockSpec,
    norm1: LayerNorm,
    attn: WindowAttention,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl SwinBlock {
    fn new(pb: &ParamBuilder, spec: BlockSpec) -> Result<Self> {
        let v2 = spec.block_type == BlockType::Swinv2;
        Ok(Self {
            spec,
            norm1: LayerNorm::new(&pb.pp("norm1"), spec.dim)?,
            attn: WindowAttention::new(&pb.pp("attn"), spec.dim, spec.heads, spec.window_size, v2)?,
            norm2: LayerNorm::new(&pb.pp("norm2"), spec.dim)?,
            mlp: Mlp::new(&pb.pp("mlp"), spec.dim, spec.hidden())?,
        })
    }

    /// Window and shift actually used on an `h x w` map: maps no larger than
    /// a window become a single unshifted window.
    pub fn effective_window(&self, h: usize, w: usize) -> (usize, usize) {
        let m = h.min(w);
        if m <= self.spec.window_size {
            (m, 0)
        } else {
            (self.spec.window_size, self.spec.shift)
        }
    }

    fn forward(&self, x: &Tensor, capture: bool) -> Result<(Tensor, Option<Tensor>)> {
        let v2 = self.spec.block_type == BlockType::Swinv2;
        let (_, h, w, _) = x.dims4()?;
        let (ws, shift) = self.effective_window(h, w);

        let attn_in = if v2 { x.clone() } else { self.norm1.forward(x)? };
        let (attn_out, probs) = self.window_attention(&attn_in, ws, shift, capture)?;
        let x = if v2 { (x + self.norm1.forward(&attn_out)?)? } else { (x + attn_out)? };
        let y = if v2 {
            (&x + self.norm2.forward(&self.mlp.forward(&x)?)?)?
        } else {
            (&x + self.mlp.forward(&self.norm2.forward(&x)?)?)?
        };
        Ok((y, probs))
    }

    fn window_attention(&self, x: &Tensor, ws: usize, shift: usize, capture: bool) -> Result<(Tensor, Option<Tensor>)> {
        let (_, h, w, _) = x.dims4()?;
        let hp = h.div_ceil(ws) * ws;
        let wp = w.div_ceil(ws) * ws;
        let mut t = x.clone();
        if hp != h {
            t = t.pad_with_zeros(1, 0, hp - h)?;
        }
        if wp != w {
            t = t.pad_with_zeros(2, 0, wp - w)?;
        }
        if shift > 0 {
            t = t.roll(-(shift as i32), 1)?.roll(-(shift as i32), 2)?;
        }
        let mask = attention_mask(h, w, hp, wp, ws, shift, x.device(), x.dtype())?;
        let windows = window_partition(&t, ws)?;
        let (out, probs) = self.attn.forward(&windows, ws, mask.as_ref(), capture)?;
        let mut t = window_merge(&out, hp, wp)?;
        if shift > 0 {
            t = t.roll(shift as i32, 1)?.roll(shift as i32, 2)?;
        }
        if hp != h {
            t = t.narrow(1, 0, h)?;
        }
        if wp != w {
            t = t.narrow(2, 0, w)?;
        }
        Ok((t, probs))
    }
}

/// Additive `(nW, N, N)` mask for a padded, cyclically shifted `hp x wp` map,
/// or `None` when neither shift nor padding is present.
fn attention_mask(
    h: usize,
    w: usize,
    hp: usize,
    wp: usize,
    ws: usize,
    shift: usize,
    device: &Device,
    dtype: DType,
) -> Result<Option<Tensor>> {
    if shift == 0 && hp == h && wp == w {
        return Ok(None);
    }
    // region label in the rolled frame: slices [0, -ws), [-ws, -shift), [-shift, end)
    let region = |p: usize, len: usize| -> usize {
        if shift == 0 {
            0
        } else if p < len - ws {
            0
        } else if p < len - shift {
            1
        } else {
            2
        }
    };
    let valid = |p: usize, len: usize, orig: usize| (p + shift) % len < orig;
    let (nh, nw) = (hp / ws, wp / ws);
    let n = ws * ws;
    let mut data = vec![0f64; nh * nw * n * n];
    for wy in 0..nh {
        for wx in 0..nw {
            let base = (wy * nw + wx) * n * n;
            let label = |t: usize| {
                let (y, x) = (wy * ws + t / ws, wx * ws + t % ws);
                (region(y, hp) * 3 + region(x, wp), valid(y, hp, h) && valid(x, wp, w))
            };
            for i in 0..n {
                let (ri, _) = label(i);
                for j in 0..n {
                    let (rj, vj) = label(j);
                    if ri != rj || !vj {
                        data[base + i * n + j] = MASKED;
                    }
                }
            }
        }
    }
    Ok(Some(Tensor::from_vec(data, (nh * nw, n, n), device)?.to_dtype(dtype)?))
}

/// Pre-norm block with spatial-reduction attention: keys and values come
/// from a map downsampled by a strided convolution.
#[derive(Clone, Debug)]
pub struct PvtBlock {
    spec: BlockSpec,
    norm1: LayerNorm,
    q: Linear,
    kv: Linear,
    proj: Linear,
    sr: Option<(Conv2d, LayerNorm)>,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl PvtBlock {
    fn new(pb: &ParamBuilder, spec: BlockSpec) -> Result<Self> {
        let d = spec.dim;
        let r = spec.sra_reduction;
        let sr = if r > 1 {
            let conv = Conv2d::new(&pb.pp("attn.sr"), d, d, ConvSpec { kernel: r, stride: r, padding: 0 }, true)?;
            Some((conv, LayerNorm::new(&pb.pp("attn.sr_norm"), d)?))
        } else {
            None
        };
        Ok(Self {
            spec,
            norm1: LayerNorm::new(&pb.pp("norm1"), d)?,
            q: Linear::new(&pb.pp("attn.q"), d, d, true)?,
            kv: Linear::new(&pb.pp("attn.kv"), d, 2 * d, true)?,
            proj: Linear::new(&pb.pp("attn.proj"), d, d, true)?,
            sr,
            norm2: LayerNorm::new(&pb.pp("norm2"), d)?,
            mlp: Mlp::new(&pb.pp("mlp"), d, spec.hidden())?,
        })
    }

    fn forward(&self, x: &Tensor, capture: bool) -> Result<(Tensor, Option<Tensor>)> {
        let (b, h, w, c) = x.dims4()?;
        let heads = self.spec.heads;
        let hd = c / heads;
        let r = self.spec.sra_reduction;
        if r > 1 && (h < r || w < r) {
            return Err(Error::shape(format!("{h}x{w} map smaller than reduction ratio {r}")));
        }
        let xn = self.norm1.forward(x)?;
        let tokens = xn.reshape((b, h * w, c))?;
        let q = self.q.forward(&tokens)?.reshape((b, h * w, heads, hd))?.transpose(1, 2)?.contiguous()?;
        let kv_src = match &self.sr {
            Some((conv, norm)) => {
                let m = conv.forward(&xn.permute((0, 3, 1, 2))?.contiguous()?)?;
                let (_, _, rh, rw) = m.dims4()?;
                norm.forward(&m.permute((0, 2, 3, 1))?.reshape((b, rh * rw, c))?)?
            }
            None => tokens,
        };
        let m = kv_src.dim(1)?;
        let kv = self.kv.forward(&kv_src)?.reshape((b, m, 2, heads, hd))?.permute((2, 0, 3, 1, 4))?;
        let k = kv.get(0)?.contiguous()?;
        let v = kv.get(1)?.contiguous()?;
        let logits = (q * (hd as f64).powf(-0.5))?.matmul(&k.t()?)?;
        let probs = softmax_last(&logits)?;
        let out = probs.matmul(&v)?.transpose(1, 2)?.reshape((b, h, w, c))?;
        let x = (x + self.proj.forward(&out)?)?;
        let y = (&x + self.mlp.forward(&self.norm2.forward(&x)?)?)?;
        Ok((y, capture.then_some(probs)))
    }
}

/// A stack of blocks applied to an NCHW feature map. Window blocks alternate
/// unshifted and half-window-shifted partitions, starting unshifted.
#[derive(Clone, Debug)]
pub struct BlockStage {
    blocks: Vec<VitBlock>,
}

impl BlockStage {
    pub fn new(pb: &ParamBuilder, block_type: BlockType, depth: usize, spec: crate::config::StageSpec, window: usize) -> Result<Self> {
        let blocks = (0..depth)
            .map(|i| {
                let bs = BlockSpec {
                    block_type,
                    dim: spec.dim,
                    heads: spec.heads,
                    window_size: window,
                    shift: if i % 2 == 1 { window / 2 } else { 0 },
                    ffn_expansion: spec.ffn_expansion,
                    sra_reduction: spec.sra_reduction,
                };
                VitBlock::new(&pb.pp(i), bs)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks })
    }

    pub fn blocks(&self) -> &[VitBlock] {
        &self.blocks
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if self.blocks.is_empty() {
            return Ok(x.clone());
        }
        let mut t = x.permute((0, 2, 3, 1))?.contiguous()?;
        for b in &self.blocks {
            t = b.forward(&t)?;
        }
        Ok(t.permute((0, 3, 1, 2))?.contiguous()?)
    }
}
