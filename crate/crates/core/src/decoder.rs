//! Branch decoder: skip fusion, initial conv, two residual blocks, ReLU and a
//! stack of 4×4 stride-2 transposed convolutions.

use candle_core::Tensor;

use crate::blocks::{Branch, Conv2d, ConvResBlock, ConvTranspose2d};
use crate::error::{Error, Result};
use crate::nn::{self, ParamBuilder};

#[derive(Debug, Clone)]
pub struct Decoder {
    branch: Branch,
    z_channels: usize,
    skip_channels: usize,
    fuse: Conv2d,
    initial: Conv2d,
    res1: ConvResBlock,
    res2: ConvResBlock,
    upsample: Vec<ConvTranspose2d>,
}

impl Decoder {
    /// Global decoders upsample ×2 and keep `channels`; local decoders
    /// upsample ×4 and end in `out_channels` (3 for RGB).
    pub fn new(
        vb: &ParamBuilder,
        branch: Branch,
        z_channels: usize,
        skip_channels: usize,
        channels: usize,
        out_channels: usize,
    ) -> Result<Self> {
        let upsample = match branch {
            Branch::Global => vec![ConvTranspose2d::new(&vb.pp("up0"), channels, out_channels)?],
            Branch::Local => vec![
                ConvTranspose2d::new(&vb.pp("up0"), channels, channels)?,
                ConvTranspose2d::new(&vb.pp("up1"), channels, out_channels)?,
            ],
        };
        Ok(Self {
            branch,
            z_channels,
            skip_channels,
            fuse: Conv2d::new(&vb.pp("fuse"), z_channels + skip_channels, channels, 1, 1)?,
            initial: Conv2d::new(&vb.pp("initial"), channels, channels, 3, 1)?,
            res1: ConvResBlock::new(&vb.pp("res1"), channels)?,
            res2: ConvResBlock::new(&vb.pp("res2"), channels)?,
            upsample,
        })
    }

    pub fn branch(&self) -> Branch {
        self.branch
    }

    pub fn upsample_factor(&self) -> usize {
        1 << self.upsample.len()
    }

    pub fn forward(&self, z: &Tensor, skip: &Tensor) -> Result<Tensor> {
        let (zb, zc, zh, zw) = z.dims4()?;
        let (sb, sc, sh, sw) = skip.dims4()?;
        if (zb, zh, zw) != (sb, sh, sw) {
            return Err(Error::Config(format!(
                "{} decoder: input {zb}x{zh}x{zw} and skip {sb}x{sh}x{sw} disagree",
                self.branch.as_str()
            )));
        }
        if zc != self.z_channels || sc != self.skip_channels {
            return Err(Error::Config(format!(
                "{} decoder expects {}+{} channels, got {zc}+{sc}",
                self.branch.as_str(),
                self.z_channels,
                self.skip_channels
            )));
        }
        let h = self.fuse.forward(&nn::concat_channels(&[z, skip])?)?;
        let h = self.initial.forward(&h)?;
        let mut h = self.res2.forward(&self.res1.forward(&h)?)?.relu()?;
        let last = self.upsample.len() - 1;
        for (i, up) in self.upsample.iter().enumerate() {
            h = up.forward(&h)?;
            if i < last {
                h = h.relu()?;
            }
        }
        Ok(h)
    }
}
