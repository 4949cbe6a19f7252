//! Reusable building blocks: convolutions, the residual block, the
//! branch-specific initial blocks and spatial multi-head self-attention.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Init, ParamBuilder};

/// Which receptive field a branch operates on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    /// Coarse path at 1/8 image resolution.
    Global,
    /// Fine path at 1/4 image resolution.
    Local,
}

impl Branch {
    pub fn as_str(&self) -> &'static str {
        match self {
            Branch::Global => "global",
            Branch::Local => "local",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    pub fn new(vb: &ParamBuilder, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Result<Self> {
        let fan_in = c_in * kernel * kernel;
        Ok(Self {
            weight: vb.get("weight", &[c_out, c_in, kernel, kernel], Init::fan_in_uniform(fan_in))?,
            bias: vb.get("bias", &[c_out], Init::fan_in_uniform(fan_in))?,
            stride,
            pad: kernel / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        nn::conv2d(x, &self.weight, Some(&self.bias), self.stride, self.pad)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

/// 4×4 stride-2 transposed convolution: doubles both spatial sides.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    weight: Tensor,
    bias: Tensor,
}

impl ConvTranspose2d {
    pub const KERNEL: usize = 4;
    pub const STRIDE: usize = 2;

    pub fn new(vb: &ParamBuilder, c_in: usize, c_out: usize) -> Result<Self> {
        let k = Self::KERNEL;
        // Each output pixel receives c_in · (k/stride)² contributions.
        let fan_in = c_out * k * k;
        Ok(Self {
            weight: vb.get("weight", &[c_in, c_out, k, k], Init::fan_in_uniform(fan_in))?,
            bias: vb.get("bias", &[c_out], Init::fan_in_uniform(fan_in))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        nn::conv_transpose2d(x, &self.weight, Some(&self.bias), Self::STRIDE, 1)
    }
}

/// `x + conv1x1(relu(conv3x3(relu(x))))`, no normalization.
#[derive(Debug, Clone)]
pub struct ConvResBlock {
    conv3: Conv2d,
    conv1: Conv2d,
}

impl ConvResBlock {
    pub fn new(vb: &ParamBuilder, channels: usize) -> Result<Self> {
        Ok(Self {
            conv3: Conv2d::new(&vb.pp("conv3"), channels, channels, 3, 1)?,
            conv1: Conv2d::new(&vb.pp("conv1"), channels, channels, 1, 1)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.conv3.in_channels()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dims4()?.1;
        if c != self.channels() {
            return Err(Error::Config(format!(
                "residual block of width {} fed {c} channels",
                self.channels()
            )));
        }
        let h = self.conv3.forward(&x.relu()?)?;
        let h = self.conv1.forward(&h.relu()?)?;
        Ok((x + h)?)
    }
}

/// Branch-specific stem. Local: three 3×3 convs (strides 2, 2, 1), each
/// followed by ReLU. Global: two 3×3 convs (strides 2, 1) with one ReLU between.
#[derive(Debug, Clone)]
pub struct InitialBlock {
    branch: Branch,
    convs: Vec<Conv2d>,
}

impl InitialBlock {
    pub fn new(vb: &ParamBuilder, branch: Branch, in_channels: usize, channels: usize) -> Result<Self> {
        let convs = match branch {
            Branch::Local => vec![
                Conv2d::new(&vb.pp("conv0"), in_channels, channels, 3, 2)?,
                Conv2d::new(&vb.pp("conv1"), channels, channels, 3, 2)?,
                Conv2d::new(&vb.pp("conv2"), channels, channels, 3, 1)?,
            ],
            Branch::Global => vec![
                Conv2d::new(&vb.pp("conv0"), in_channels, channels, 3, 2)?,
                Conv2d::new(&vb.pp("conv1"), channels, channels, 3, 1)?,
            ],
        };
        Ok(Self { branch, convs })
    }

    /// Spatial reduction factor applied by this block.
    pub fn downsample(&self) -> usize {
        self.convs.iter().map(|c| c.stride).product()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        let expected = self.convs[0].in_channels();
        if c != expected {
            return Err(Error::Config(format!(
                "{} initial block expects {expected} channels, got {c}",
                self.branch.as_str()
            )));
        }
        let f = self.downsample();
        if h % f != 0 || w % f != 0 {
            return Err(Error::Precondition(format!(
                "{} initial block needs spatial dims divisible by {f}, got {h}x{w}",
                self.branch.as_str()
            )));
        }
        let last = self.convs.len() - 1;
        let mut h = x.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(&h)?;
            if self.branch == Branch::Local || i < last {
                h = h.relu()?;
            }
        }
        Ok(h)
    }
}

/// Queries per chunk when the token sequence is long; bounds the
/// `heads × chunk × tokens` score matrix held in memory.
const ATTENTION_QUERY_CHUNK: usize = 512;

/// Multi-head self-attention over the `H·W` spatial positions, with a
/// residual connection around it. No positional encoding.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    heads: usize,
    wq: Tensor,
    bq: Tensor,
    wk: Tensor,
    bk: Tensor,
    wv: Tensor,
    bv: Tensor,
    wo: Tensor,
    bo: Tensor,
}

impl MultiHeadAttention {
    pub fn new(vb: &ParamBuilder, channels: usize, heads: usize) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::Config(format!(
                "{channels} channels cannot be split into {heads} heads"
            )));
        }
        let proj = |name: &str| vb.pp(name).get("weight", &[channels, channels], Init::lecun(channels));
        let bias = |name: &str| vb.pp(name).get("bias", &[channels], Init::Zeros);
        Ok(Self {
            heads,
            wq: proj("query")?,
            bq: bias("query")?,
            wk: proj("key")?,
            bk: bias("key")?,
            wv: proj("value")?,
            bv: bias("value")?,
            wo: proj("out")?,
            bo: bias("out")?,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    fn channels(&self) -> usize {
        self.wq.dims()[0]
    }

    fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&w.t()?)?.broadcast_add(b)?)
    }

    /// Splits `(B, C, H, W)` into per-head `(B, heads, N, d)` queries, keys, values.
    fn qkv(&self, x: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.channels() {
            return Err(Error::Config(format!(
                "attention of width {} fed {c} channels",
                self.channels()
            )));
        }
        let n = h * w;
        let d = c / self.heads;
        let tokens = x.reshape((b, c, n))?.transpose(1, 2)?.contiguous()?.reshape((b * n, c))?;
        let split = |t: Tensor| -> Result<Tensor> {
            Ok(t.reshape((b, n, self.heads, d))?.transpose(1, 2)?.contiguous()?)
        };
        Ok((
            split(Self::linear(&tokens, &self.wq, &self.bq)?)?,
            split(Self::linear(&tokens, &self.wk, &self.bk)?)?,
            split(Self::linear(&tokens, &self.wv, &self.bv)?)?,
        ))
    }

    /// Per-head attention probabilities `(B, heads, N, N)`. Intended for
    /// inspection on small maps.
    pub fn attention_probabilities(&self, x: &Tensor) -> Result<Tensor> {
        let (q, k, _) = self.qkv(x)?;
        let d = q.dims()[3];
        let scores = q.matmul(&k.transpose(2, 3)?)?.affine(1.0 / (d as f64).sqrt(), 0.0)?;
        nn::softmax_last_dim(&scores)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let n = h * w;
        let (q, k, v) = self.qkv(x)?;
        let d = q.dims()[3];
        let scale = 1.0 / (d as f64).sqrt();
        let kt = k.transpose(2, 3)?;
        let attend = |q: &Tensor| -> Result<Tensor> {
            let scores = q.matmul(&kt)?.affine(scale, 0.0)?;
            Ok(nn::softmax_last_dim(&scores)?.matmul(&v)?)
        };
        let ctx = if n <= ATTENTION_QUERY_CHUNK * 2 {
            attend(&q)?
        } else {
            let mut parts = Vec::new();
            let mut start = 0;
            while start < n {
                let len = ATTENTION_QUERY_CHUNK.min(n - start);
                parts.push(attend(&q.narrow(2, start, len)?)?);
                start += len;
            }
            Tensor::cat(&parts, 2)?
        };
        let ctx = ctx.transpose(1, 2)?.contiguous()?.reshape((b * n, c))?;
        let out = Self::linear(&ctx, &self.wo, &self.bo)?
            .reshape((b, n, c))?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, c, h, w))?;
        Ok((x + out)?)
    }
}
