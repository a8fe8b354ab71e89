use candle_core::{Module, Tensor, D};
use candle_nn::{Conv2dConfig, ConvTranspose2dConfig};

use super::params::{Init, Params};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
}

impl Activation {
    pub fn apply(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        match self {
            Activation::Gelu => xs.gelu_erf(),
            Activation::Relu => xs.relu(),
        }
    }
}

/// Dense layer over the last dimension.
#[derive(Debug, Clone)]
pub struct Linear {
    inner: candle_nn::Linear,
}

impl Linear {
    pub fn new(p: &Params, in_dim: usize, out_dim: usize) -> Result<Self> {
        let w = p.get((out_dim, in_dim), "weight", Init::fan_in(in_dim))?;
        let b = p.get(out_dim, "bias", Init::fan_in(in_dim))?;
        Ok(Self {
            inner: candle_nn::Linear::new(w, Some(b)),
        })
    }

    /// Linear layer with explicit weight and bias initialisation.
    pub fn with_init(p: &Params, in_dim: usize, out_dim: usize, w: Init, b: Init) -> Result<Self> {
        let w = p.get((out_dim, in_dim), "weight", w)?;
        let b = p.get(out_dim, "bias", b)?;
        Ok(Self {
            inner: candle_nn::Linear::new(w, Some(b)),
        })
    }

    pub fn weight(&self) -> &Tensor {
        self.inner.weight()
    }
}

impl Module for Linear {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        // candle's batched matmul backward is wrong for strided (e.g.
        // transposed) inputs, so hand it a contiguous copy.
        self.inner.forward(&xs.contiguous()?)
    }
}

/// Stack of linear layers with an activation between consecutive layers.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
    act: Activation,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`.
    pub fn new(p: &Params, dims: &[usize], act: Activation) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&p.pp(&format!("layers.{i}")), w[0], w[1]))
            .collect::<Result<_>>()?;
        Ok(Self { layers, act })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].weight().dim(1).unwrap_or(0)
    }

    pub fn out_dim(&self) -> usize {
        self.layers
            .last()
            .and_then(|l| l.weight().dim(0).ok())
            .unwrap_or(0)
    }
}

impl Module for Mlp {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let mut x = xs.clone();
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(&x)?;
            if i + 1 < n {
                x = self.act.apply(&x)?;
            }
        }
        Ok(x)
    }
}

/// Layer norm over the last dimension, composed from differentiable ops.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(p: &Params, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: p.get(dim, "weight", Init::Const(1.0))?,
            bias: p.get(dim, "bias", Init::Const(0.0))?,
            eps: 1e-5,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let mean = xs.mean_keepdim(D::Minus1)?;
        let centered = xs.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)
    }
}

/// Channel-wise layer norm for `B x C x H x W` maps.
#[derive(Debug, Clone)]
pub struct LayerNorm2d {
    weight: Tensor,
    bias: Tensor,
    channels: usize,
    eps: f64,
}

impl LayerNorm2d {
    pub fn new(p: &Params, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: p.get(channels, "weight", Init::Const(1.0))?,
            bias: p.get(channels, "bias", Init::Const(0.0))?,
            channels,
            eps: 1e-6,
        })
    }
}

impl Module for LayerNorm2d {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let u = xs.mean_keepdim(1)?;
        let xs = xs.broadcast_sub(&u)?;
        let s = xs.sqr()?.mean_keepdim(1)?;
        let xs = xs.broadcast_div(&(s + self.eps)?.sqrt()?)?;
        xs.broadcast_mul(&self.weight.reshape((1, self.channels, 1, 1))?)?
            .broadcast_add(&self.bias.reshape((1, self.channels, 1, 1))?)
    }
}

pub fn conv2d(
    p: &Params,
    in_c: usize,
    out_c: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<candle_nn::Conv2d> {
    let fan_in = in_c * kernel * kernel;
    let w = p.get((out_c, in_c, kernel, kernel), "weight", Init::fan_in(fan_in))?;
    let b = p.get(out_c, "bias", Init::fan_in(fan_in))?;
    let cfg = Conv2dConfig {
        padding,
        stride,
        ..Default::default()
    };
    Ok(candle_nn::Conv2d::new(w, Some(b), cfg))
}

/// 2x2, stride-2 transposed convolution (exact 2x upsampling).
pub fn upsample2x(p: &Params, in_c: usize, out_c: usize) -> Result<candle_nn::ConvTranspose2d> {
    let fan_in = out_c * 4;
    let w = p.get((in_c, out_c, 2, 2), "weight", Init::fan_in(fan_in))?;
    let b = p.get(out_c, "bias", Init::fan_in(fan_in))?;
    let cfg = ConvTranspose2dConfig {
        padding: 0,
        output_padding: 0,
        stride: 2,
        dilation: 1,
    };
    Ok(candle_nn::ConvTranspose2d::new(w, Some(b), cfg))
}

/// Two 3x3 convolutions with a skip connection:
/// `y = skip(x) + conv2(relu(conv1(x)))`, where `skip` is the identity or a
/// strided 1x1 projection when the shape changes.
#[derive(Debug, Clone)]
pub struct ResidualConvBlock {
    conv1: candle_nn::Conv2d,
    conv2: candle_nn::Conv2d,
    skip: Option<candle_nn::Conv2d>,
}

impl ResidualConvBlock {
    pub fn new(p: &Params, in_c: usize, out_c: usize, stride: usize) -> Result<Self> {
        let conv1 = conv2d(&p.pp("conv1"), in_c, out_c, 3, stride, 1)?;
        let conv2 = conv2d(&p.pp("conv2"), out_c, out_c, 3, 1, 1)?;
        let skip = if in_c != out_c || stride != 1 {
            Some(conv2d(&p.pp("skip"), in_c, out_c, 1, stride, 0)?)
        } else {
            None
        };
        Ok(Self { conv1, conv2, skip })
    }
}

impl Module for ResidualConvBlock {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let h = self.conv2.forward(&self.conv1.forward(xs)?.relu()?)?;
        let s = match &self.skip {
            Some(c) => c.forward(xs)?,
            None => xs.clone(),
        };
        h + s
    }
}

/// Multi-head attention with an optional internal width reduction
/// (`downsample`), as used by the two-way transformer.
#[derive(Debug, Clone)]
pub struct Attention {
    q_proj: Linear,
    k_proj: Linear,
    v_proj: Linear,
    out_proj: Linear,
    heads: usize,
}

impl Attention {
    pub fn new(p: &Params, dim: usize, heads: usize, downsample: usize) -> Result<Self> {
        let inner = dim / downsample.max(1);
        Ok(Self {
            q_proj: Linear::new(&p.pp("q_proj"), dim, inner)?,
            k_proj: Linear::new(&p.pp("k_proj"), dim, inner)?,
            v_proj: Linear::new(&p.pp("v_proj"), dim, inner)?,
            out_proj: Linear::new(&p.pp("out_proj"), inner, dim)?,
            heads,
        })
    }

    fn separate_heads(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        x.reshape((b, n, self.heads, c / self.heads))?
            .transpose(1, 2)?
            .contiguous()
    }

    /// `q: B x Nq x D`, `k, v: B x Nk x D` -> `B x Nq x D`.
    pub fn forward(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> candle_core::Result<Tensor> {
        let q = self.separate_heads(&self.q_proj.forward(q)?)?;
        let k = self.separate_heads(&self.k_proj.forward(k)?)?;
        let v = self.separate_heads(&self.v_proj.forward(v)?)?;
        let (b, h, n, c) = q.dims4()?;
        let scale = 1.0 / (c as f64).sqrt();
        let attn = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        let attn = candle_nn::ops::softmax(&attn, D::Minus1)?;
        let out = attn.matmul(&v)?;
        let out = out.transpose(1, 2)?.reshape((b, n, h * c))?;
        self.out_proj.forward(&out)
    }
}
