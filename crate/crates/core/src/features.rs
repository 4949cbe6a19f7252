//! Pluggable convolutional feature extractors for the perceptual loss and LPIPS.

use candle_core::{DType, Tensor};

use crate::blocks::Conv2d;
use crate::config::ExtractorConfig;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

/// Anything that maps an image batch to one or more named feature maps.
pub trait FeatureExtractor: Send + Sync {
    /// `(B, 3, H, W)` in `[0, 1]` to a list of `(stage name, (B, C_s, H_s, W_s))`.
    fn stages(&self, x: &Tensor) -> Result<Vec<(String, Tensor)>>;

    /// Channel width of each stage, in order.
    fn stage_channels(&self) -> Vec<usize>;
}

/// Stack of 3×3 conv + ReLU stages with frozen seeded weights. The first
/// stage keeps resolution, later ones halve it.
#[derive(Debug, Clone)]
pub struct RandomConvExtractor {
    convs: Vec<Conv2d>,
    store: ParamStore,
}

impl RandomConvExtractor {
    pub fn new(cfg: &ExtractorConfig, dtype: DType) -> Result<Self> {
        if cfg.stage_widths.is_empty() || cfg.stage_widths.contains(&0) {
            return Err(Error::Config("extractor stage_widths must be nonempty and positive".into()));
        }
        let build = |vb: &crate::nn::ParamBuilder| {
            let mut convs = Vec::new();
            let mut c_in = 3;
            for (i, &w) in cfg.stage_widths.iter().enumerate() {
                let stride = if i == 0 { 1 } else { 2 };
                convs.push(Conv2d::new(&vb.pp(&format!("stage{i}")), c_in, w, 3, stride)?);
                c_in = w;
            }
            Ok(convs)
        };
        let (_, store) = ParamStore::init(dtype, cfg.seed, build)?;
        let convs = store.bind(true, build)?;
        Ok(Self { convs, store })
    }

    pub fn parameters(&self) -> &ParamStore {
        &self.store
    }
}

impl FeatureExtractor for RandomConvExtractor {
    fn stages(&self, x: &Tensor) -> Result<Vec<(String, Tensor)>> {
        let mut h = x.affine(2.0, -1.0)?;
        let mut out = Vec::with_capacity(self.convs.len());
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(&h)?.relu()?;
            out.push((format!("stage{i}"), h.clone()));
        }
        Ok(out)
    }

    fn stage_channels(&self) -> Vec<usize> {
        self.convs.iter().map(|c| c.out_channels()).collect()
    }
}
