//! Building blocks: dense layers, layer norm, multi-head attention, the
//! post-norm transformer encoder layer and a stacked LSTM.

use candle_core::{DType, Device, Module, Tensor, D};

use super::params::ParamBuilder;
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    /// Default dense init: `U(-1/√in, 1/√in)` for weight and bias.
    pub fn new(pb: &ParamBuilder, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        Self::scaled(pb, d_in, d_out, bias, 1.0)
    }

    /// Default init with the bound multiplied by `scale`.
    pub fn scaled(pb: &ParamBuilder, d_in: usize, d_out: usize, bias: bool, scale: f64) -> Result<Self> {
        let bound = scale / (d_in as f64).sqrt();
        Self::with_bound(pb, d_in, d_out, bias, bound)
    }

    /// Glorot-uniform weight, zero bias.
    pub fn xavier(pb: &ParamBuilder, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        Self::xavier_scaled(pb, d_in, d_out, bias, 1.0)
    }

    pub fn xavier_scaled(pb: &ParamBuilder, d_in: usize, d_out: usize, bias: bool, scale: f64) -> Result<Self> {
        let bound = scale * (6.0 / (d_in + d_out) as f64).sqrt();
        let weight = pb.uniform("weight", &[d_out, d_in], bound)?;
        let bias = if bias {
            Some(pb.constant("bias", &[d_out], 0.0)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    /// Default weight init with every bias entry set to `value`.
    pub fn with_bias_value(pb: &ParamBuilder, d_in: usize, d_out: usize, value: f64) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = pb.uniform("weight", &[d_out, d_in], bound)?;
        let bias = Some(pb.constant("bias", &[d_out], value)?);
        Ok(Self { weight, bias })
    }

    fn with_bound(pb: &ParamBuilder, d_in: usize, d_out: usize, bias: bool, bound: f64) -> Result<Self> {
        let weight = pb.uniform("weight", &[d_out, d_in], bound)?;
        let bias = if bias {
            Some(pb.uniform("bias", &[d_out], bound)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    /// Applies the layer to the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let d_in = *dims.last().ok_or_else(|| Error::shape("linear", "rank >= 1", "rank 0"))?;
        if d_in != self.in_dim() {
            return Err(Error::shape("linear input", self.in_dim(), d_in));
        }
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let flat = x.reshape((rows, d_in))?;
        let mut y = flat.matmul(&self.weight.t()?)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(b)?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_dim();
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    pub fn new(pb: &ParamBuilder, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: pb.constant("gamma", &[dim], 1.0)?,
            beta: pb.constant("beta", &[dim], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        layer_norm(x, Some((&self.gamma, &self.beta)))
    }
}

/// Layer normalization over the last dimension, optionally affine.
pub fn layer_norm(x: &Tensor, affine: Option<(&Tensor, &Tensor)>) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + LN_EPS)?.sqrt()?)?;
    Ok(match affine {
        Some((g, b)) => normed.broadcast_mul(g)?.broadcast_add(b)?,
        None => normed,
    })
}

/// Numerically stable softmax over the last dimension.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// Multi-head scaled dot-product attention without projection biases:
/// `Concat(head_1..head_n) W_O` with `head_i = softmax(Q W_Q^i (K W_K^i)^T / √d_k) V W_V^i`.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q_proj: Linear,
    k_proj: Linear,
    v_proj: Linear,
    out_proj: Linear,
    n_heads: usize,
    d_model: usize,
}

impl MultiHeadAttention {
    pub fn new(pb: &ParamBuilder, d_model: usize, n_heads: usize) -> Result<Self> {
        Self::with_out_scale(pb, d_model, n_heads, 1.0)
    }

    /// As [`MultiHeadAttention::new`] with the output projection init shrunk by `out_scale`.
    pub fn with_out_scale(pb: &ParamBuilder, d_model: usize, n_heads: usize, out_scale: f64) -> Result<Self> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(Error::config("model.n_attention_heads", "must divide d_model"));
        }
        Ok(Self {
            q_proj: Linear::xavier(&pb.pp("q_proj"), d_model, d_model, false)?,
            k_proj: Linear::xavier(&pb.pp("k_proj"), d_model, d_model, false)?,
            v_proj: Linear::xavier(&pb.pp("v_proj"), d_model, d_model, false)?,
            out_proj: Linear::xavier_scaled(&pb.pp("out_proj"), d_model, d_model, false, out_scale)?,
            n_heads,
            d_model,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, _) = x.dims3()?;
        let d_k = self.d_model / self.n_heads;
        Ok(x.reshape((b, l, self.n_heads, d_k))?.transpose(1, 2)?.contiguous()?)
    }

    /// `q`: `(B, Lq, d)`, `k`/`v`: `(B, Lk, d)`. Returns `(B, Lq, d)`.
    pub fn forward(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        let (bq, lq, dq) = q.dims3()?;
        let (bk, lk, dk) = k.dims3()?;
        let (bv, lv, dv) = v.dims3()?;
        if dq != self.d_model || dk != self.d_model || dv != self.d_model {
            return Err(Error::shape("attention channels", self.d_model, format!("{dq}/{dk}/{dv}")));
        }
        if bq != bk || bk != bv || lk != lv {
            return Err(Error::shape(
                "attention inputs",
                "matching batch and key/value lengths",
                format!("q {:?}, k {:?}, v {:?}", q.dims(), k.dims(), v.dims()),
            ));
        }
        let d_k = self.d_model / self.n_heads;
        let qh = self.split_heads(&self.q_proj.forward(q)?)?;
        let kh = self.split_heads(&self.k_proj.forward(k)?)?;
        let vh = self.split_heads(&self.v_proj.forward(v)?)?;
        let scores = (qh.matmul(&kh.t()?.contiguous()?)? / (d_k as f64).sqrt())?;
        let weights = softmax_last(&scores)?;
        let heads = weights.matmul(&vh)?;
        let merged = heads.transpose(1, 2)?.reshape((bq, lq, self.d_model))?;
        self.out_proj.forward(&merged)
    }
}

/// Post-norm encoder layer:
/// `x' = LN(x + MSA(x))`, `out = LN(x' + FFN(x'))`, `FFN = Linear → ReLU → Linear`.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    attn: MultiHeadAttention,
    norm1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(pb: &ParamBuilder, d_model: usize, n_heads: usize, ffn_hidden: usize) -> Result<Self> {
        Self::with_residual_scale(pb, d_model, n_heads, ffn_hidden, 1.0)
    }

    /// `scale` multiplies the init of the two projections that feed the residual sums.
    pub fn with_residual_scale(
        pb: &ParamBuilder,
        d_model: usize,
        n_heads: usize,
        ffn_hidden: usize,
        scale: f64,
    ) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::with_out_scale(&pb.pp("attn"), d_model, n_heads, scale)?,
            norm1: LayerNorm::new(&pb.pp("norm1"), d_model)?,
            ff1: Linear::new(&pb.pp("ff1"), d_model, ffn_hidden, true)?,
            ff2: Linear::scaled(&pb.pp("ff2"), ffn_hidden, d_model, true, scale)?,
            norm2: LayerNorm::new(&pb.pp("norm2"), d_model)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let attended = self.attn.forward(x, x, x)?;
        let x1 = self.norm1.forward(&(x + attended)?)?;
        let ff = self.ff2.forward(&self.ff1.forward(&x1)?.relu()?)?;
        self.norm2.forward(&(x1 + ff)?)
    }
}

#[derive(Debug, Clone)]
pub struct EncoderStack {
    layers: Vec<EncoderLayer>,
}

impl EncoderStack {
    /// Residual-branch output projections start at `1/√(2·n_layers)` of the
    /// usual init; without it a 6-deep post-norm stack does not train at
    /// lr 1e-3 with no warmup.
    pub fn new(
        pb: &ParamBuilder,
        n_layers: usize,
        d_model: usize,
        n_heads: usize,
        ffn_hidden: usize,
    ) -> Result<Self> {
        let scale = 1.0 / ((2 * n_layers.max(1)) as f64).sqrt();
        let layers = (0..n_layers)
            .map(|i| EncoderLayer::with_residual_scale(&pb.pp(i), d_model, n_heads, ffn_hidden, scale))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h)?;
        }
        Ok(h)
    }
}

/// Stacked LSTM returning the full top-layer hidden sequence.
/// Gate order in the packed weights is input, forget, cell, output.
#[derive(Debug, Clone)]
pub struct Lstm {
    layers: Vec<LstmLayer>,
    hidden: usize,
}

#[derive(Debug, Clone)]
struct LstmLayer {
    w_ih: Tensor,
    w_hh: Tensor,
    bias: Tensor,
}

impl Lstm {
    pub fn new(pb: &ParamBuilder, d_in: usize, hidden: usize, n_layers: usize) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        let layers = (0..n_layers)
            .map(|i| {
                let p = pb.pp(i);
                let input = if i == 0 { d_in } else { hidden };
                Ok(LstmLayer {
                    w_ih: p.uniform("w_ih", &[4 * hidden, input], bound)?,
                    w_hh: p.uniform("w_hh", &[4 * hidden, hidden], bound)?,
                    bias: p.uniform("bias", &[4 * hidden], bound)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers, hidden })
    }

    /// `x`: `(B, L, d_in)` → `(B, L, hidden)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, _) = x.dims3()?;
        let h_dim = self.hidden;
        let mut seq = x.clone();
        for layer in &self.layers {
            let d_in = seq.dim(2)?;
            let projected = seq
                .reshape((b * l, d_in))?
                .matmul(&layer.w_ih.t()?)?
                .broadcast_add(&layer.bias)?
                .reshape((b, l, 4 * h_dim))?;
            let w_hh_t = layer.w_hh.t()?;
            let mut h = Tensor::zeros((b, h_dim), x.dtype(), x.device())?;
            let mut c = h.clone();
            let mut outputs = Vec::with_capacity(l);
            for step in 0..l {
                let gates = (projected.narrow(1, step, 1)?.squeeze(1)? + h.matmul(&w_hh_t)?)?;
                let i = sigmoid(&gates.narrow(1, 0, h_dim)?)?;
                let f = sigmoid(&gates.narrow(1, h_dim, h_dim)?)?;
                let g = gates.narrow(1, 2 * h_dim, h_dim)?.tanh()?;
                let o = sigmoid(&gates.narrow(1, 3 * h_dim, h_dim)?)?;
                c = ((f * &c)? + (i * g)?)?;
                h = (o * c.tanh()?)?;
                outputs.push(h.clone());
            }
            seq = Tensor::stack(&outputs, 1)?;
        }
        Ok(seq)
    }
}

/// Dense layers with ReLU between them (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(pb: &ParamBuilder, widths: &[usize]) -> Result<Self> {
        Self::with_output_bias(pb, widths, None)
    }

    /// As [`Mlp::new`], optionally starting the last layer's bias at a constant.
    pub fn with_output_bias(pb: &ParamBuilder, widths: &[usize], output_bias: Option<f64>) -> Result<Self> {
        let last = widths.len().saturating_sub(2);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| match output_bias {
                Some(b) if i == last => Linear::with_bias_value(&pb.pp(i), w[0], w[1], b),
                _ => Linear::new(&pb.pp(i), w[0], w[1], true),
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = h.relu()?;
            }
        }
        Ok(h)
    }
}

impl Module for Mlp {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        Mlp::forward(self, xs).map_err(candle_core::Error::wrap)
    }
}

/// Fixed sinusoidal position table `(len, dim)`:
/// `pe[p, 2i] = sin(p / 10000^(2i/dim))`, `pe[p, 2i+1] = cos(...)`.
pub fn sinusoidal_positions(len: usize, dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut values = Vec::with_capacity(len * dim);
    for p in 0..len {
        for j in 0..dim {
            let i2 = (j / 2 * 2) as f64;
            let angle = p as f64 / 10000f64.powf(i2 / dim as f64);
            values.push(if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Ok(Tensor::from_vec(values, (len, dim), device)?.to_dtype(dtype)?)
}
