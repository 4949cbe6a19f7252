//! Training objectives: restoration, latent, the weighted total and the
//! candidate similarity terms.
//!
//! Tensor-valued losses take `(B, C, H, W)` maps and return a scalar tensor
//! that can be differentiated. Per-image quantities are averaged over the batch.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::config::BrightVaeConfig;
use crate::error::{Error, Result};
use crate::features::FeatureExtractor;
use crate::metrics::{self, check_same_shape};
use crate::nn::{self, conv2d};

pub const JACCARD_EPS: f64 = 1e-8;
pub const KLD_EPS: f64 = 1e-8;
pub const GMSD_C: f64 = 0.0026;
const GRADIENT_FLOOR: f64 = 1e-12;
const COSINE_MIN_NORM: f64 = 1e-12;

/// Luminance weights for the gray conversion used by GMSD.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityKind {
    None,
    Jaccard,
    Tv,
    Cosine,
    Kld,
    Gmsd,
    Perceptual,
    Color,
    Ssi,
}

impl SimilarityKind {
    /// Loss-sweep order.
    pub const ALL: [SimilarityKind; 9] = [
        Self::None,
        Self::Jaccard,
        Self::Tv,
        Self::Cosine,
        Self::Kld,
        Self::Gmsd,
        Self::Perceptual,
        Self::Color,
        Self::Ssi,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Jaccard => "jaccard",
            Self::Tv => "tv",
            Self::Cosine => "cosine",
            Self::Kld => "kld",
            Self::Gmsd => "gmsd",
            Self::Perceptual => "perceptual",
            Self::Color => "color",
            Self::Ssi => "ssi",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }

    /// Row label in the loss-sweep table.
    pub fn label(self) -> &'static str {
        match self {
            Self::None => "Rest & Latent",
            Self::Jaccard => "Rest & Latent & Jaccard",
            Self::Tv => "Rest & Latent & TV",
            Self::Cosine => "Rest & Latent & Cosine Similarity",
            Self::Kld => "Rest & Latent & KLD",
            Self::Gmsd => "Rest & Latent & GMSD",
            Self::Perceptual => "Rest & Latent & Perceptual",
            Self::Color => "Rest & Latent & Color Consistency",
            Self::Ssi => "Rest & Latent & Structural Similarity",
        }
    }

    pub fn needs_extractor(self) -> bool {
        self == Self::Perceptual
    }
}

impl std::fmt::Display for SimilarityKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Mean squared error over every pixel and channel.
pub fn rest_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_same_shape(pred, target, "rest loss")?;
    Ok((pred - target)?.sqr()?.mean_all()?)
}

/// Sum of the per-branch latent losses.
pub fn latent_loss_total(global: Option<&Tensor>, local: &Tensor) -> Result<Tensor> {
    match global {
        Some(g) => Ok((g + local)?),
        None => Ok(local.clone()),
    }
}

pub fn ssi_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    Ok(metrics::ssim_tensor(pred, target)?.affine(-1.0, 1.0)?)
}

fn per_image(t: &Tensor) -> Result<Tensor> {
    let b = t.dim(0)?;
    Ok(t.reshape((b, ()))?)
}

/// Soft IoU: `1 − Σpt / (Σp + Σt − Σpt + ε)` per image.
pub fn jaccard_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_same_shape(pred, target, "jaccard loss")?;
    let p = per_image(pred)?;
    let t = per_image(target)?;
    let inter = (&p * &t)?.sum(1)?;
    let union = ((p.sum(1)? + t.sum(1)?)? - &inter)?.affine(1.0, JACCARD_EPS)?;
    Ok((inter / union)?.affine(-1.0, 1.0)?.mean_all()?)
}

/// Mean squared horizontal plus mean squared vertical neighbor difference.
pub fn tv_loss(pred: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = pred.dims4()?;
    let mut total = Tensor::zeros((), pred.dtype(), pred.device())?;
    if w > 1 {
        let d = (pred.narrow(3, 1, w - 1)? - pred.narrow(3, 0, w - 1)?)?;
        total = (total + d.sqr()?.mean_all()?)?;
    }
    if h > 1 {
        let d = (pred.narrow(2, 1, h - 1)? - pred.narrow(2, 0, h - 1)?)?;
        total = (total + d.sqr()?.mean_all()?)?;
    }
    Ok(total)
}

/// `1 − cos` between flattened images.
pub fn cosine_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_same_shape(pred, target, "cosine loss")?;
    let p = per_image(pred)?;
    let t = per_image(target)?;
    let np = p.sqr()?.sum(1)?.sqrt()?;
    let nt = t.sqr()?.sum(1)?.sqrt()?;
    let smallest = nn::scalar(&np.min(0)?)?.min(nn::scalar(&nt.min(0)?)?);
    if !(smallest > COSINE_MIN_NORM) {
        return Err(Error::Numeric("cosine loss on a zero-norm image".into()));
    }
    let cos = ((&p * &t)?.sum(1)? / (np * nt)?)?;
    Ok(cos.affine(-1.0, 1.0)?.mean_all()?)
}

fn smooth(hist: &mut [f64]) {
    let s: f64 = hist.iter().map(|h| h + KLD_EPS).sum();
    for h in hist.iter_mut() {
        *h = (*h + KLD_EPS) / s;
    }
}

pub fn hard_histogram(values: &[f64], bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    for &v in values {
        let i = ((v * bins as f64).floor().max(0.0) as usize).min(bins - 1);
        h[i] += 1.0;
    }
    let n = values.len().max(1) as f64;
    h.iter_mut().for_each(|c| *c /= n);
    h
}

/// `KL(p ‖ q)` of already smoothed distributions.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| if *a > 0.0 { a * (a / b).ln() } else { 0.0 }).sum()
}

/// `KL(hist(target) ‖ hist(pred))` over hard equal-width bins on `[0, 1]`.
/// Piecewise constant; used for reporting.
pub fn kld_loss(pred: &Tensor, target: &Tensor, bins: usize) -> Result<f64> {
    check_same_shape(pred, target, "kld loss")?;
    if bins == 0 {
        return Err(Error::Config("kld bins must be positive".into()));
    }
    let p = per_image(&pred.to_dtype(DType::F64)?)?.to_vec2::<f64>()?;
    let t = per_image(&target.to_dtype(DType::F64)?)?.to_vec2::<f64>()?;
    let mut total = 0.0;
    for (pi, ti) in p.iter().zip(&t) {
        let mut hp = hard_histogram(pi, bins);
        let mut ht = hard_histogram(ti, bins);
        smooth(&mut hp);
        smooth(&mut ht);
        total += kl_divergence(&ht, &hp);
    }
    Ok(total / p.len() as f64)
}

/// Gaussian-kernel histogram with bandwidth equal to the bin width; each
/// value spreads unit mass over the bins. `(B, N)` to `(B, bins)`.
fn soft_histogram(values: &Tensor, bins: usize) -> Result<Tensor> {
    let width = 1.0 / bins as f64;
    let centers: Vec<f64> = (0..bins).map(|k| (k as f64 + 0.5) * width).collect();
    let centers = Tensor::from_vec(centers, (1, 1, bins), values.device())?.to_dtype(values.dtype())?;
    let d = values.unsqueeze(2)?.broadcast_sub(&centers)?;
    let logits = d.sqr()?.affine(-0.5 / (width * width), 0.0)?;
    let k = nn::softmax_last_dim(&logits)?;
    let hist = k.mean(1)?.affine(1.0, KLD_EPS)?;
    Ok(hist.broadcast_div(&hist.sum_keepdim(1)?)?)
}

/// Differentiable counterpart of [`kld_loss`] for training.
pub fn kld_loss_soft(pred: &Tensor, target: &Tensor, bins: usize) -> Result<Tensor> {
    check_same_shape(pred, target, "kld loss")?;
    if bins == 0 {
        return Err(Error::Config("kld bins must be positive".into()));
    }
    let hp = soft_histogram(&per_image(pred)?, bins)?;
    let ht = soft_histogram(&per_image(&target.detach())?, bins)?;
    let kl = (&ht * (ht.log()? - hp.log()?)?)?.sum(1)?;
    Ok(kl.mean_all()?)
}

pub fn grayscale(x: &Tensor) -> Result<Tensor> {
    let (_, c, _, _) = x.dims4()?;
    if c != 3 {
        return Err(Error::Precondition(format!("grayscale conversion needs 3 channels, got {c}")));
    }
    let w = Tensor::from_vec(LUMA.to_vec(), (1, 3, 1, 1), x.device())?.to_dtype(x.dtype())?;
    Ok(x.broadcast_mul(&w)?.sum_keepdim(1)?)
}

/// Sobel gradient magnitude over the valid region, `(B, 1, H−2, W−2)`.
pub fn sobel_magnitude(gray: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = gray.dims4()?;
    if h < 3 || w < 3 {
        return Err(Error::Precondition(format!("sobel needs at least 3x3, got {h}x{w}")));
    }
    #[rustfmt::skip]
    let k = vec![
        -1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0,
        -1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0,
    ];
    let k = Tensor::from_vec(k, (2, 1, 3, 3), gray.device())?.to_dtype(gray.dtype())?;
    let g = conv2d(gray, &k, None, 1, 0)?;
    Ok(g.sqr()?.sum_keepdim(1)?.affine(1.0, GRADIENT_FLOOR)?.sqrt()?)
}

/// `1 − mean GMS` on the luminance channel.
pub fn gmsd_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_same_shape(pred, target, "gmsd loss")?;
    let g1 = sobel_magnitude(&grayscale(pred)?)?;
    let g2 = sobel_magnitude(&grayscale(target)?)?;
    let num = (&g1 * &g2)?.affine(2.0, GMSD_C)?;
    let den = (g1.sqr()? + g2.sqr()?)?.affine(1.0, GMSD_C)?;
    Ok((num / den)?.mean_all()?.affine(-1.0, 1.0)?)
}

/// Mean over extractor stages of the feature MSE.
pub fn perceptual_loss(pred: &Tensor, target: &Tensor, extractor: Option<&dyn FeatureExtractor>) -> Result<Tensor> {
    check_same_shape(pred, target, "perceptual loss")?;
    let extractor =
        extractor.ok_or_else(|| Error::Config("perceptual loss requires a feature extractor".into()))?;
    let fp = extractor.stages(pred)?;
    let ft = extractor.stages(target)?;
    if fp.is_empty() {
        return Err(Error::Config("extractor produced no stages".into()));
    }
    let n = fp.len() as f64;
    let mut total = Tensor::zeros((), pred.dtype(), pred.device())?;
    for ((_, a), (_, b)) in fp.iter().zip(&ft) {
        total = (total + (a - b)?.sqr()?.mean_all()?)?;
    }
    Ok(total.affine(1.0 / n, 0.0)?)
}

/// `Σ_c (μ_p − μ_t)² + (σ²_p − σ²_t)²` per image.
pub fn color_consistency_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_same_shape(pred, target, "color consistency loss")?;
    let (b, c, h, w) = pred.dims4()?;
    let stats = |x: &Tensor| -> Result<(Tensor, Tensor)> {
        let x = x.reshape((b, c, h * w))?;
        let mu = x.mean_keepdim(D::Minus1)?;
        let var = x.broadcast_sub(&mu)?.sqr()?.mean(D::Minus1)?;
        Ok((mu.squeeze(D::Minus1)?, var))
    };
    let (mp, vp) = stats(pred)?;
    let (mt, vt) = stats(target)?;
    let per = ((mp - mt)?.sqr()? + (vp - vt)?.sqr()?)?.sum(1)?;
    Ok(per.mean_all()?)
}

/// Differentiable similarity term; the histogram loss uses soft binning.
pub fn similarity_loss(
    kind: SimilarityKind,
    pred: &Tensor,
    target: &Tensor,
    bins: usize,
    extractor: Option<&dyn FeatureExtractor>,
) -> Result<Tensor> {
    match kind {
        SimilarityKind::None => Ok(Tensor::zeros((), pred.dtype(), pred.device())?),
        SimilarityKind::Jaccard => jaccard_loss(pred, target),
        SimilarityKind::Tv => tv_loss(pred),
        SimilarityKind::Cosine => cosine_loss(pred, target),
        SimilarityKind::Kld => kld_loss_soft(pred, target, bins),
        SimilarityKind::Gmsd => gmsd_loss(pred, target),
        SimilarityKind::Perceptual => perceptual_loss(pred, target, extractor),
        SimilarityKind::Color => color_consistency_loss(pred, target),
        SimilarityKind::Ssi => ssi_loss(pred, target),
    }
}

/// Reported similarity value; identical to [`similarity_loss`] except that
/// the histogram loss uses hard bins.
pub fn similarity_value(
    kind: SimilarityKind,
    pred: &Tensor,
    target: &Tensor,
    bins: usize,
    extractor: Option<&dyn FeatureExtractor>,
) -> Result<f64> {
    match kind {
        SimilarityKind::Kld => kld_loss(pred, target, bins),
        _ => nn::scalar(&similarity_loss(kind, pred, target, bins, extractor)?),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub rest: f64,
    pub latent: f64,
    pub similarity: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rest: 1.0,
            latent: 0.25,
            similarity: 0.08,
        }
    }
}

impl LossWeights {
    pub fn from_config(cfg: &BrightVaeConfig) -> Self {
        Self {
            rest: cfg.lambda_rest,
            latent: cfg.lambda_latent,
            similarity: cfg.lambda_similarity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("rest", self.rest), ("latent", self.latent), ("similarity", self.similarity)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} must be nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rest: f64,
    pub latent: f64,
    pub similarity: f64,
    pub total: f64,
    pub kind: SimilarityKind,
}

/// Weighted combination. With `kind == None` the similarity term is omitted
/// and reported as 0.
pub fn total_loss(
    rest: f64,
    latent: f64,
    similarity: f64,
    kind: SimilarityKind,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    weights.validate()?;
    let similarity = if kind == SimilarityKind::None { 0.0 } else { similarity };
    Ok(LossBreakdown {
        rest,
        latent,
        similarity,
        total: weights.rest * rest + weights.latent * latent + weights.similarity * similarity,
        kind,
    })
}

/// Training objective assembled from a model configuration.
pub struct Objective<'a> {
    pub weights: LossWeights,
    pub kind: SimilarityKind,
    pub bins: usize,
    pub extractor: Option<&'a dyn FeatureExtractor>,
}

impl<'a> Objective<'a> {
    pub fn from_config(cfg: &BrightVaeConfig, extractor: Option<&'a dyn FeatureExtractor>) -> Result<Self> {
        let weights = LossWeights::from_config(cfg);
        weights.validate()?;
        let kind = if cfg.similarity_active() { cfg.similarity_loss_kind } else { SimilarityKind::None };
        if kind.needs_extractor() && extractor.is_none() {
            return Err(Error::Config(
                "similarity_loss_kind = \"perceptual\" requires an [extractor] section".into(),
            ));
        }
        Ok(Self {
            weights,
            kind,
            bins: cfg.kld_bins,
            extractor,
        })
    }

    /// Differentiable total plus its breakdown. Reported values are those of
    /// the differentiated terms.
    pub fn evaluate(&self, pred: &Tensor, target: &Tensor, latent: &Tensor) -> Result<(Tensor, LossBreakdown)> {
        let rest = rest_loss(pred, target)?;
        let sim = similarity_loss(self.kind, pred, target, self.bins, self.extractor)?;
        let total = (rest.affine(self.weights.rest, 0.0)?
            + latent.affine(self.weights.latent, 0.0)?
            + sim.affine(self.weights.similarity, 0.0)?)?;
        let breakdown = total_loss(
            nn::scalar(&rest)?,
            nn::scalar(latent)?,
            nn::scalar(&sim)?,
            self.kind,
            &self.weights,
        )?;
        Ok((total, breakdown))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t(v: &[f64], shape: (usize, usize, usize, usize)) -> Tensor {
        Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
    }

    fn s(x: Result<Tensor>) -> f64 {
        nn::scalar(&x.unwrap()).unwrap()
    }

    #[test]
    fn kind_names_round_trip() {
        for k in SimilarityKind::ALL {
            assert_eq!(SimilarityKind::parse(k.as_str()), Some(k));
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(json, format!("\"{}\"", k.as_str()));
        }
        assert_eq!(SimilarityKind::parse("ssim"), None);
    }

    #[test]
    fn rest_examples() {
        let p = t(&[0.0, 1.0, 0.0, 1.0], (1, 1, 2, 2));
        let z = t(&[0.0; 4], (1, 1, 2, 2));
        assert_eq!(s(rest_loss(&p, &z)), 0.5);
        assert_eq!(s(rest_loss(&p, &p)), 0.0);
        assert!(matches!(rest_loss(&p, &t(&[0.0; 2], (1, 1, 1, 2))), Err(Error::Shape(_))));
    }

    #[test]
    fn hard_histogram_edges() {
        assert_eq!(hard_histogram(&[0.0, 0.49, 0.5, 1.0], 2), vec![0.5, 0.5]);
    }

    #[test]
    fn soft_kld_is_zero_on_identical_and_positive_otherwise() {
        let a = t(&[0.1, 0.2, 0.8, 0.9], (1, 1, 2, 2));
        let b = t(&[0.5, 0.5, 0.5, 0.5], (1, 1, 2, 2));
        assert!(s(kld_loss_soft(&a, &a, 16)).abs() < 1e-12);
        assert!(s(kld_loss_soft(&a, &b, 16)) > 0.0);
    }

    #[test]
    fn weights_reject_negative() {
        let w = LossWeights {
            latent: -0.1,
            ..Default::default()
        };
        assert!(matches!(total_loss(1.0, 1.0, 1.0, SimilarityKind::Ssi, &w), Err(Error::Config(_))));
    }
}
