//! The full two-branch network.
//!
//! ```text
//! x ─ local enc ─ f_loc (1/4) ─ global enc ─ f_glob (1/8) ─ quant_g ─ dec_g(·, skip f_glob) ─ d_glob (1/4)
//!                   │                                                                          │
//!                   └─ 1×1(f_loc ‖ d_glob) ─ quant_l ─ dec_l(zq_l ‖ d_glob, skip f_loc) ─ enhanced (1/1)
//! ```
//!
//! With a single receptive field the global path disappears and `f_loc`
//! feeds the local quantizer directly.

use candle_core::{DType, Tensor};

use crate::attencoder::Attencoder;
use crate::attenquant::{Attenquant, FrozenQuantizer, IndexGrid, QuantizeResult};
use crate::blocks::{Branch, Conv2d};
use crate::config::BrightVaeConfig;
use crate::decoder::Decoder;
use crate::error::{Error, Result};
use crate::nn::{self, ParamBuilder, ParamStore};

/// Image channels consumed and produced by the model.
pub const IMAGE_CHANNELS: usize = 3;

/// Spatial sides must be multiples of this.
pub const SIZE_MULTIPLE: usize = 8;

#[derive(Debug, Clone)]
struct GlobalPath {
    encoder: Attencoder,
    quantizer: Attenquant,
    decoder: Decoder,
    mix: Conv2d,
}

#[derive(Debug, Clone)]
pub struct BrightVae {
    cfg: BrightVaeConfig,
    local_encoder: Attencoder,
    global: Option<GlobalPath>,
    local_quantizer: Attenquant,
    local_decoder: Decoder,
}

/// Quantizer decisions recorded during a forward pass.
#[derive(Debug, Clone)]
pub struct FrozenState {
    pub global: Option<FrozenQuantizer>,
    pub local: FrozenQuantizer,
}

#[derive(Debug, Clone)]
pub struct ForwardResult {
    /// `(B, 3, H, W)`, unclamped.
    pub enhanced: Tensor,
    pub latent_loss_global: Option<Tensor>,
    pub latent_loss_local: Tensor,
    pub indices_global: Option<IndexGrid>,
    pub indices_local: IndexGrid,
    pub quantized_global: Option<Tensor>,
    pub quantized_local: Tensor,
    pub frozen: FrozenState,
}

impl ForwardResult {
    /// Sum of the per-branch latent losses.
    pub fn latent_loss(&self) -> Result<Tensor> {
        crate::losses::latent_loss_total(self.latent_loss_global.as_ref(), &self.latent_loss_local)
    }
}

enum Quantize<'a> {
    Search,
    Replay(&'a FrozenState),
}

impl BrightVae {
    pub fn new(cfg: &BrightVaeConfig, vb: &ParamBuilder) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let quantizer = |vb: &ParamBuilder| {
            Attenquant::new(
                vb,
                cfg.codebook_size,
                cfg.embedding_dim(),
                cfg.attention_hidden(),
                cfg.beta,
                cfg.leaky_slope,
                cfg.use_attenquant,
            )
        };
        let local_encoder = Attencoder::new(
            &vb.pp("local.encoder"),
            Branch::Local,
            IMAGE_CHANNELS,
            c,
            cfg.heads,
            cfg.use_attencoder,
        )?;
        let global = if cfg.two_receptive_fields {
            Some(GlobalPath {
                encoder: Attencoder::new(&vb.pp("global.encoder"), Branch::Global, c, c, cfg.heads, cfg.use_attencoder)?,
                quantizer: quantizer(&vb.pp("global.quantizer"))?,
                decoder: Decoder::new(&vb.pp("global.decoder"), Branch::Global, c, c, c, c)?,
                mix: Conv2d::new(&vb.pp("local.mix"), 2 * c, c, 1, 1)?,
            })
        } else {
            None
        };
        let local_quantizer = quantizer(&vb.pp("local.quantizer"))?;
        let z_channels = if global.is_some() { 2 * c } else { c };
        let local_decoder = Decoder::new(&vb.pp("local.decoder"), Branch::Local, z_channels, c, c, IMAGE_CHANNELS)?;
        Ok(Self {
            cfg: cfg.clone(),
            local_encoder,
            global,
            local_quantizer,
            local_decoder,
        })
    }

    /// Fresh model with parameters drawn from `cfg.seed`.
    pub fn init(cfg: &BrightVaeConfig, dtype: DType) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        ParamStore::init(dtype, cfg.seed, |vb| Self::new(cfg, vb))
    }

    /// Model over existing parameters; `detach` yields a gradient-free inference copy.
    pub fn bind(cfg: &BrightVaeConfig, store: &ParamStore, detach: bool) -> Result<Self> {
        store.bind(detach, |vb| Self::new(cfg, vb))
    }

    pub fn config(&self) -> &BrightVaeConfig {
        &self.cfg
    }

    pub fn local_quantizer(&self) -> &Attenquant {
        &self.local_quantizer
    }

    pub fn global_quantizer(&self) -> Option<&Attenquant> {
        self.global.as_ref().map(|g| &g.quantizer)
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let (b, c, h, w) = x.dims4()?;
        if c != IMAGE_CHANNELS {
            return Err(Error::Precondition(format!("expected a 3-channel image, got {c} channels")));
        }
        if b == 0 || h == 0 || w == 0 || h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
            return Err(Error::Precondition(format!(
                "image sides must be positive multiples of {SIZE_MULTIPLE}, got {h}x{w}"
            )));
        }
        let lo = nn::scalar(&x.min_all()?)?;
        let hi = nn::scalar(&x.max_all()?)?;
        if !(lo >= 0.0 && hi <= 1.0) {
            return Err(Error::Precondition(format!("image values must lie in [0, 1], found [{lo}, {hi}]")));
        }
        Ok(())
    }

    fn skip(&self, t: &Tensor) -> Result<Tensor> {
        if self.cfg.skip_connection {
            Ok(t.clone())
        } else {
            Ok(t.zeros_like()?)
        }
    }

    fn run_quantizer(
        q: &Attenquant,
        z: &Tensor,
        mode: &Quantize,
        pick: impl Fn(&FrozenState) -> Option<&FrozenQuantizer>,
    ) -> Result<(QuantizeResult, FrozenQuantizer)> {
        match mode {
            Quantize::Search => {
                let r = q.quantize(z)?;
                let frozen = r.freeze(z)?;
                Ok((r, frozen))
            }
            Quantize::Replay(state) => {
                let frozen = pick(state)
                    .ok_or_else(|| Error::Config("frozen state does not match the model's branches".into()))?;
                Ok((q.quantize_frozen(z, frozen)?, frozen.clone()))
            }
        }
    }

    fn run(&self, x: &Tensor, mode: Quantize) -> Result<ForwardResult> {
        self.check_input(x)?;
        let f_loc = self.local_encoder.forward(x)?;
        match &self.global {
            Some(g) => {
                let f_glob = g.encoder.forward(&f_loc)?;
                let (qg, frozen_g) = Self::run_quantizer(&g.quantizer, &f_glob, &mode, |s| s.global.as_ref())?;
                let d_glob = g.decoder.forward(&qg.quantized, &self.skip(&f_glob)?)?;
                let f_mix = g.mix.forward(&nn::concat_channels(&[&f_loc, &d_glob])?)?;
                let (ql, frozen_l) = Self::run_quantizer(&self.local_quantizer, &f_mix, &mode, |s| Some(&s.local))?;
                let z = nn::concat_channels(&[&ql.quantized, &d_glob])?;
                let enhanced = self.local_decoder.forward(&z, &self.skip(&f_loc)?)?;
                Ok(ForwardResult {
                    enhanced,
                    latent_loss_global: Some(qg.latent_loss),
                    latent_loss_local: ql.latent_loss,
                    indices_global: Some(qg.indices),
                    indices_local: ql.indices,
                    quantized_global: Some(qg.quantized),
                    quantized_local: ql.quantized,
                    frozen: FrozenState {
                        global: Some(frozen_g),
                        local: frozen_l,
                    },
                })
            }
            None => {
                let (ql, frozen_l) = Self::run_quantizer(&self.local_quantizer, &f_loc, &mode, |s| Some(&s.local))?;
                let enhanced = self.local_decoder.forward(&ql.quantized, &self.skip(&f_loc)?)?;
                Ok(ForwardResult {
                    enhanced,
                    latent_loss_global: None,
                    latent_loss_local: ql.latent_loss,
                    indices_global: None,
                    indices_local: ql.indices,
                    quantized_global: None,
                    quantized_local: ql.quantized,
                    frozen: FrozenState {
                        global: None,
                        local: frozen_l,
                    },
                })
            }
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<ForwardResult> {
        self.run(x, Quantize::Search)
    }

    /// Forward pass with both quantizers replaying recorded decisions. Its
    /// ordinary derivative equals the straight-through gradient of [`forward`](Self::forward).
    pub fn forward_frozen(&self, x: &Tensor, state: &FrozenState) -> Result<ForwardResult> {
        self.run(x, Quantize::Replay(state))
    }

    /// Enhanced image clamped to `[0, 1]`, detached from any graph.
    pub fn enhance(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x)?.enhanced.detach().clamp(0.0, 1.0)?)
    }
}

/// Trainable scalar count of the model described by `cfg`.
pub fn parameter_count(cfg: &BrightVaeConfig) -> Result<usize> {
    let (_, store) = BrightVae::init(cfg, DType::F32)?;
    Ok(store.num_scalars())
}
