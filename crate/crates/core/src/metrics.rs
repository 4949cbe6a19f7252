//! Full-reference image quality: PSNR, SSIM and an LPIPS-style feature distance.

use std::fmt::Write as _;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureExtractor;
use crate::losses::LossBreakdown;
use crate::nn::{self, conv2d};

/// Reported when prediction and target are identical.
pub const PSNR_SENTINEL_DB: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

const LPIPS_EPS: f64 = 1e-10;

pub(crate) fn check_same_shape(pred: &Tensor, target: &Tensor, what: &str) -> Result<()> {
    if pred.dims() != target.dims() {
        return Err(Error::Shape(format!(
            "{what}: prediction {:?} and target {:?} differ in shape",
            pred.dims(),
            target.dims()
        )));
    }
    Ok(())
}

pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_same_shape(pred, target, "mse")?;
    let p = pred.to_dtype(DType::F64)?;
    let t = target.to_dtype(DType::F64)?;
    nn::scalar(&(p - t)?.sqr()?.mean_all()?)
}

pub fn psnr_from_mse(mse: f64, max_val: f64) -> f64 {
    if mse == 0.0 {
        PSNR_SENTINEL_DB
    } else {
        10.0 * (max_val * max_val / mse).log10()
    }
}

pub fn psnr(pred: &Tensor, target: &Tensor, max_val: f64) -> Result<f64> {
    if !(max_val > 0.0) {
        return Err(Error::Precondition(format!("max_val must be positive, got {max_val}")));
    }
    Ok(psnr_from_mse(mse(pred, target)?, max_val))
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size).map(|i| (-0.5 * ((i as f64 - c) / sigma).powi(2)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

fn gaussian_filter(x: &Tensor, kh: &Tensor, kw: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let planes = x.reshape((b * c, 1, h, w))?;
    let y = conv2d(&conv2d(&planes, kh, None, 1, 0)?, kw, None, 1, 0)?;
    let (_, _, oh, ow) = y.dims4()?;
    Ok(y.reshape((b, c, oh, ow))?)
}

/// Local SSIM map over the valid (unpadded) region, `(B, C, H−10, W−10)`.
/// Differentiable in both arguments.
pub fn ssim_map(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_same_shape(pred, target, "ssim")?;
    let (_, _, h, w) = pred.dims4()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Precondition(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let dev = pred.device();
    let taps = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let kh = Tensor::from_vec(taps.clone(), (1, 1, SSIM_WINDOW, 1), dev)?.to_dtype(pred.dtype())?;
    let kw = Tensor::from_vec(taps, (1, 1, 1, SSIM_WINDOW), dev)?.to_dtype(pred.dtype())?;
    let f = |t: &Tensor| gaussian_filter(t, &kh, &kw);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;

    let mu_x = f(pred)?;
    let mu_y = f(target)?;
    let mu_xx = mu_x.sqr()?;
    let mu_yy = mu_y.sqr()?;
    let mu_xy = (&mu_x * &mu_y)?;
    let s_xx = (f(&pred.sqr()?)? - &mu_xx)?;
    let s_yy = (f(&target.sqr()?)? - &mu_yy)?;
    let s_xy = (f(&(pred * target)?)? - &mu_xy)?;

    let num = (mu_xy.affine(2.0, c1)? * s_xy.affine(2.0, c2)?)?;
    let den = ((mu_xx + mu_yy)?.affine(1.0, c1)? * (s_xx + s_yy)?.affine(1.0, c2)?)?;
    Ok((num / den)?)
}

/// Mean SSIM over batch, channels and positions, as a scalar tensor.
pub fn ssim_tensor(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    Ok(ssim_map(pred, target)?.mean_all()?)
}

pub fn ssim(pred: &Tensor, target: &Tensor) -> Result<f64> {
    nn::scalar(&ssim_tensor(&pred.to_dtype(DType::F64)?, &target.to_dtype(DType::F64)?)?)
}

/// Per-channel weights for every extractor stage; `None` means all ones.
pub type StageWeights = Vec<Vec<f64>>;

/// LPIPS-style distance as a scalar tensor (mean over the batch).
pub fn lpips_tensor(
    pred: &Tensor,
    target: &Tensor,
    extractor: &dyn FeatureExtractor,
    stage_weights: Option<&StageWeights>,
) -> Result<Tensor> {
    check_same_shape(pred, target, "lpips")?;
    let fp = extractor.stages(pred)?;
    let ft = extractor.stages(target)?;
    if let Some(sw) = stage_weights {
        let widths = extractor.stage_channels();
        if sw.len() != widths.len() || sw.iter().zip(&widths).any(|(w, c)| w.len() != *c) {
            return Err(Error::Config("lpips stage weights do not match the extractor stages".into()));
        }
        if sw.iter().flatten().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("lpips stage weights must be nonnegative".into()));
        }
    }
    let unit = |f: &Tensor| -> Result<Tensor> {
        let norm = f.sqr()?.sum_keepdim(1)?.sqrt()?.affine(1.0, LPIPS_EPS)?;
        Ok(f.broadcast_div(&norm)?)
    };
    let mut total: Option<Tensor> = None;
    for (i, ((_, a), (_, b))) in fp.iter().zip(&ft).enumerate() {
        let d = (unit(a)? - unit(b)?)?.sqr()?;
        let d = match stage_weights {
            Some(sw) => {
                let c = sw[i].len();
                let w = Tensor::from_vec(sw[i].clone(), (1, c, 1, 1), d.device())?.to_dtype(d.dtype())?;
                d.broadcast_mul(&w)?
            }
            None => d,
        };
        // Sum over channels, mean over batch and positions.
        let term = d.sum_keepdim(1)?.mean_all()?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Config("extractor produced no stages".into()))
}

/// `None` when no extractor is available.
pub fn lpips(
    pred: &Tensor,
    target: &Tensor,
    extractor: Option<&dyn FeatureExtractor>,
    stage_weights: Option<&StageWeights>,
) -> Result<Option<f64>> {
    match extractor {
        Some(e) => Ok(Some(nn::scalar(&lpips_tensor(pred, target, e, stage_weights)?)?)),
        None => Ok(None),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub lpips: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub count: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub lpips: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_image: Vec<ImageMetrics>,
    pub aggregate: AggregateMetrics,
    /// Mean loss terms over the evaluated set, when computed.
    pub loss: Option<LossBreakdown>,
}

impl MetricReport {
    pub fn from_images(per_image: Vec<ImageMetrics>, loss: Option<LossBreakdown>) -> Self {
        let n = per_image.len();
        let mean = |f: &dyn Fn(&ImageMetrics) -> f64| {
            if n == 0 {
                f64::NAN
            } else {
                per_image.iter().map(f).sum::<f64>() / n as f64
            }
        };
        let lpips = if n > 0 && per_image.iter().all(|m| m.lpips.is_some()) {
            Some(mean(&|m| m.lpips.unwrap_or_default()))
        } else {
            None
        };
        let aggregate = AggregateMetrics {
            count: n,
            psnr: mean(&|m| m.psnr),
            ssim: mean(&|m| m.ssim),
            lpips,
        };
        Self {
            per_image,
            aggregate,
            loss,
        }
    }

    /// `id,psnr,ssim,lpips` with `-` for an absent LPIPS value.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,psnr,ssim,lpips\n");
        for m in &self.per_image {
            let lp = m.lpips.map_or_else(|| "-".to_string(), |v| format!("{v}"));
            let _ = writeln!(s, "{},{},{},{}", m.id, m.psnr, m.ssim, lp);
        }
        s
    }

    pub fn aggregate_json(&self) -> Result<String> {
        let block = serde_json::json!({
            "aggregate": self.aggregate,
            "loss": self.loss,
        });
        Ok(serde_json::to_string_pretty(&block)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Metrics for one image pair, each `(1, 3, H, W)` or `(3, H, W)`.
pub fn image_metrics(
    id: &str,
    pred: &Tensor,
    target: &Tensor,
    extractor: Option<&dyn FeatureExtractor>,
) -> Result<ImageMetrics> {
    let (pred, target) = if pred.rank() == 3 {
        (pred.unsqueeze(0)?, target.unsqueeze(0)?)
    } else {
        (pred.clone(), target.clone())
    };
    Ok(ImageMetrics {
        id: id.to_string(),
        psnr: psnr(&pred, &target, 1.0)?,
        ssim: ssim(&pred, &target)?,
        lpips: lpips(&pred, &target, extractor, None)?,
    })
}
