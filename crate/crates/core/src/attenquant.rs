//! Attention-weighted vector quantization.
//!
//! Each spatial feature vector `v` gets per-dimension weights
//! `w = softmax(down(LeakyReLU(up(v))))`; the selected code is
//! `argmin_j Σ_d w_d (v_d − e_jd)²` (ties go to the smallest `j`). The
//! weights only steer selection: the latent loss uses plain squared norms,
//!
//! ```text
//! L = mean_v ‖sg[v] − e‖² + β ‖v − sg[e]‖²
//! ```
//!
//! and the decoder receives `e` with the gradient copied straight through to `v`.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::nn::{self, Init, ParamBuilder};

/// Plain-data copy of the attention projection `D → D_h → D`.
#[derive(Debug, Clone)]
pub struct ProjectionWeights {
    pub dim: usize,
    pub hidden: usize,
    /// `(hidden, dim)` row-major.
    pub up_w: Vec<f64>,
    pub up_b: Vec<f64>,
    /// `(dim, hidden)` row-major.
    pub down_w: Vec<f64>,
    pub down_b: Vec<f64>,
    pub leaky_slope: f64,
}

impl ProjectionWeights {
    /// Per-dimension attention weights for one feature vector. Nonnegative, sums to 1.
    pub fn attention_weights(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.dim {
            return Err(Error::Shape(format!(
                "feature vector has {} dims, projection expects {}",
                v.len(),
                self.dim
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("non-finite feature vector".into()));
        }
        let hidden: Vec<f64> = (0..self.hidden)
            .map(|i| {
                let row = &self.up_w[i * self.dim..(i + 1) * self.dim];
                let a = self.up_b[i] + row.iter().zip(v).map(|(w, x)| w * x).sum::<f64>();
                if a >= 0.0 {
                    a
                } else {
                    self.leaky_slope * a
                }
            })
            .collect();
        let scores: Vec<f64> = (0..self.dim)
            .map(|i| {
                let row = &self.down_w[i * self.hidden..(i + 1) * self.hidden];
                self.down_b[i] + row.iter().zip(&hidden).map(|(w, h)| w * h).sum::<f64>()
            })
            .collect();
        Ok(softmax(&scores))
    }
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}

/// `Σ_d w_d (v_d − e_d)²`.
pub fn weighted_distance(v: &[f64], w: &[f64], e: &[f64]) -> f64 {
    v.iter()
        .zip(w)
        .zip(e)
        .map(|((v, w), e)| {
            let d = v - e;
            w * d * d
        })
        .sum()
}

pub fn squared_distance(v: &[f64], e: &[f64]) -> f64 {
    v.iter().zip(e).map(|(v, e)| (v - e) * (v - e)).sum()
}

/// Index of the nearest codebook row (`codebook` is `K × D` row-major). With
/// `weights`, distances are attention-weighted. Ties resolve to the lowest index.
pub fn nearest_code(v: &[f64], weights: Option<&[f64]>, codebook: &[f64], dim: usize) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, e) in codebook.chunks_exact(dim).enumerate() {
        let d = match weights {
            Some(w) => weighted_distance(v, w, e),
            None => squared_distance(v, e),
        };
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

/// Code indices laid out as `(batch, height, width)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexGrid {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u32>,
}

impl IndexGrid {
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.batch, self.height, self.width)
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.data.clone(), self.data.len(), &Device::Cpu)?)
    }
}

/// Output of [`Attenquant::quantize`].
#[derive(Debug, Clone)]
pub struct QuantizeResult {
    /// Codebook rows arranged as the input map; gradient flows straight through to the input.
    pub quantized: Tensor,
    pub indices: IndexGrid,
    /// Scalar latent loss (codebook term + β · commitment term).
    pub latent_loss: Tensor,
    /// Per-vector attention weights used for selection, `N × D` (empty when unweighted).
    pub weights: Vec<f64>,
}

impl QuantizeResult {
    /// Snapshot of this quantization for replaying it with fixed indices.
    pub fn freeze(&self, z_e: &Tensor) -> Result<FrozenQuantizer> {
        Ok(FrozenQuantizer {
            indices: self.indices.clone(),
            z_ref: z_e.detach().copy()?,
            e_ref: self.quantized.detach().copy()?,
        })
    }
}

/// A recorded quantization: fixed indices plus the encoder output and code
/// values it was taken at. Replaying through it yields a smooth surrogate
/// whose ordinary derivative equals the straight-through / stop-gradient
/// gradient of the real quantizer, which is what finite-difference checks need.
#[derive(Debug, Clone)]
pub struct FrozenQuantizer {
    pub indices: IndexGrid,
    pub z_ref: Tensor,
    pub e_ref: Tensor,
}

/// The attention-weighted quantizer: codebook plus optional attention projection.
#[derive(Debug, Clone)]
pub struct Attenquant {
    codebook: Tensor,
    /// `(up_w, up_b, down_w, down_b)`; absent when plain nearest-neighbour search is used.
    projection: Option<(Tensor, Tensor, Tensor, Tensor)>,
    beta: f64,
    leaky_slope: f64,
}

impl Attenquant {
    pub fn new(
        vb: &ParamBuilder,
        codebook_size: usize,
        dim: usize,
        hidden: usize,
        beta: f64,
        leaky_slope: f64,
        use_attention: bool,
    ) -> Result<Self> {
        if codebook_size == 0 || dim == 0 {
            return Err(Error::Config("codebook must be non-empty".into()));
        }
        if use_attention && hidden <= dim {
            return Err(Error::Config(format!(
                "attention hidden width {hidden} must exceed embedding dim {dim}"
            )));
        }
        let bound = 1.0 / codebook_size as f64;
        let codebook = vb.get(
            "codebook",
            &[codebook_size, dim],
            Init::Uniform {
                lo: -bound,
                hi: bound,
            },
        )?;
        let projection = if use_attention {
            let up = vb.pp("up");
            let down = vb.pp("down");
            Some((
                up.get("weight", &[hidden, dim], Init::lecun(dim))?,
                up.get("bias", &[hidden], Init::Zeros)?,
                down.get("weight", &[dim, hidden], Init::lecun(hidden))?,
                down.get("bias", &[dim], Init::Zeros)?,
            ))
        } else {
            None
        };
        Ok(Self {
            codebook,
            projection,
            beta,
            leaky_slope,
        })
    }

    pub fn codebook(&self) -> &Tensor {
        &self.codebook
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook.dims()[0]
    }

    pub fn dim(&self) -> usize {
        self.codebook.dims()[1]
    }

    pub fn uses_attention(&self) -> bool {
        self.projection.is_some()
    }

    pub fn projection_weights(&self) -> Result<Option<ProjectionWeights>> {
        let Some((up_w, up_b, down_w, down_b)) = &self.projection else {
            return Ok(None);
        };
        let flat = |t: &Tensor| -> Result<Vec<f64>> { Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?) };
        Ok(Some(ProjectionWeights {
            dim: self.dim(),
            hidden: up_w.dims()[0],
            up_w: flat(up_w)?,
            up_b: flat(up_b)?,
            down_w: flat(down_w)?,
            down_b: flat(down_b)?,
            leaky_slope: self.leaky_slope,
        }))
    }

    /// Flattens `(B, D, H, W)` into row-major `N × D` feature vectors.
    fn vectors(z_e: &Tensor) -> Result<Vec<f64>> {
        Ok(z_e
            .detach()
            .permute((0, 2, 3, 1))?
            .contiguous()?
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1()?)
    }

    fn check_input(&self, z_e: &Tensor) -> Result<(usize, usize, usize, usize)> {
        let (b, d, h, w) = z_e.dims4()?;
        if d != self.dim() {
            return Err(Error::Config(format!(
                "quantizer embedding dim {} does not match {d} input channels",
                self.dim()
            )));
        }
        Ok((b, d, h, w))
    }

    /// Attention-weighted nearest-code search over every spatial vector.
    pub fn select(&self, z_e: &Tensor) -> Result<(IndexGrid, Vec<f64>)> {
        let (b, d, h, w) = self.check_input(z_e)?;
        let vectors = Self::vectors(z_e)?;
        let codebook: Vec<f64> = self.codebook.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
        let projection = self.projection_weights()?;
        let mut weights = Vec::new();
        let mut data = Vec::with_capacity(b * h * w);
        for v in vectors.chunks_exact(d) {
            let idx = match &projection {
                Some(p) => {
                    let wv = p.attention_weights(v)?;
                    let idx = nearest_code(v, Some(&wv), &codebook, d);
                    weights.extend_from_slice(&wv);
                    idx
                }
                None => {
                    if v.iter().any(|x| !x.is_finite()) {
                        return Err(Error::Numeric("non-finite feature vector".into()));
                    }
                    nearest_code(v, None, &codebook, d)
                }
            };
            data.push(idx as u32);
        }
        Ok((
            IndexGrid {
                batch: b,
                height: h,
                width: w,
                data,
            },
            weights,
        ))
    }

    /// Gathers codebook rows for `indices` into a `(B, D, H, W)` map.
    pub fn gather(&self, indices: &IndexGrid) -> Result<Tensor> {
        let (b, h, w) = indices.dims();
        Ok(self
            .codebook
            .index_select(&indices.to_tensor()?, 0)?
            .reshape((b, h, w, self.dim()))?
            .permute((0, 3, 1, 2))?
            .contiguous()?)
    }

    /// `Σ‖a − b‖² / (number of spatial vectors)` for `(B, D, H, W)` maps.
    fn mean_vector_sq(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (bn, _, h, w) = a.dims4()?;
        Ok((a - b)?.sqr()?.sum_all()?.affine(1.0 / (bn * h * w) as f64, 0.0)?)
    }

    pub fn quantize(&self, z_e: &Tensor) -> Result<QuantizeResult> {
        let (indices, weights) = self.select(z_e)?;
        let e = self.gather(&indices)?;
        let codebook_term = Self::mean_vector_sq(&z_e.detach(), &e)?;
        let commitment = Self::mean_vector_sq(z_e, &e.detach())?;
        let latent_loss = (codebook_term + commitment.affine(self.beta, 0.0)?)?;
        Ok(QuantizeResult {
            quantized: nn::straight_through(z_e, &e)?,
            indices,
            latent_loss,
            weights,
        })
    }

    /// Replays a recorded quantization with indices held fixed (see [`FrozenQuantizer`]).
    pub fn quantize_frozen(&self, z_e: &Tensor, frozen: &FrozenQuantizer) -> Result<QuantizeResult> {
        self.check_input(z_e)?;
        if z_e.dims() != frozen.z_ref.dims() {
            return Err(Error::Shape("frozen quantizer replayed on a different shape".into()));
        }
        let e = self.gather(&frozen.indices)?;
        let codebook_term = Self::mean_vector_sq(&frozen.z_ref, &e)?;
        let commitment = Self::mean_vector_sq(z_e, &frozen.e_ref)?;
        let latent_loss = (codebook_term + commitment.affine(self.beta, 0.0)?)?;
        let quantized = (z_e + (&frozen.e_ref - &frozen.z_ref)?)?;
        Ok(QuantizeResult {
            quantized,
            indices: frozen.indices.clone(),
            latent_loss,
            weights: Vec::new(),
        })
    }
}
