//! Attention-augmented encoder: initial block, two residual blocks, ReLU,
//! then multi-head self-attention.

use candle_core::Tensor;

use crate::blocks::{Branch, ConvResBlock, InitialBlock, MultiHeadAttention};
use crate::error::Result;
use crate::nn::ParamBuilder;

#[derive(Debug, Clone)]
pub struct Attencoder {
    branch: Branch,
    initial: InitialBlock,
    res1: ConvResBlock,
    res2: ConvResBlock,
    /// `None` when attention is ablated; the stage is then the identity.
    attn: Option<MultiHeadAttention>,
}

impl Attencoder {
    pub fn new(
        vb: &ParamBuilder,
        branch: Branch,
        in_channels: usize,
        channels: usize,
        heads: usize,
        use_attention: bool,
    ) -> Result<Self> {
        Ok(Self {
            branch,
            initial: InitialBlock::new(&vb.pp("initial"), branch, in_channels, channels)?,
            res1: ConvResBlock::new(&vb.pp("res1"), channels)?,
            res2: ConvResBlock::new(&vb.pp("res2"), channels)?,
            attn: if use_attention {
                Some(MultiHeadAttention::new(&vb.pp("attn"), channels, heads)?)
            } else {
                None
            },
        })
    }

    pub fn branch(&self) -> Branch {
        self.branch
    }

    /// Spatial reduction relative to this encoder's input.
    pub fn downsample(&self) -> usize {
        self.initial.downsample()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.initial.forward(x)?;
        let h = self.res2.forward(&self.res1.forward(&h)?)?.relu()?;
        match &self.attn {
            Some(attn) => attn.forward(&h),
            None => Ok(h),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};

    fn ramp(shape: (usize, usize, usize, usize)) -> Tensor {
        let n = shape.0 * shape.1 * shape.2 * shape.3;
        let v: Vec<f64> = (0..n).map(|i| ((i * 37 % 101) as f64 / 101.0) - 0.3).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn resolution_contract() {
        let c = 8;
        let (local, _) =
            ParamStore::init(DType::F64, 0, |vb| Attencoder::new(vb, Branch::Local, 3, c, 2, true)).unwrap();
        let (global, _) =
            ParamStore::init(DType::F64, 0, |vb| Attencoder::new(vb, Branch::Global, c, c, 2, true)).unwrap();
        let f = local.forward(&ramp((1, 3, 64, 64))).unwrap();
        assert_eq!(f.dims4().unwrap(), (1, c, 16, 16));
        assert_eq!(global.forward(&f).unwrap().dims4().unwrap(), (1, c, 8, 8));
        for side in [8usize, 24, 40] {
            let f = local.forward(&ramp((2, 3, side, side * 2))).unwrap();
            assert_eq!(f.dims4().unwrap(), (2, c, side / 4, side / 2));
            let g = global.forward(&f).unwrap();
            assert_eq!(g.dims4().unwrap(), (2, c, side / 8, side / 4));
        }
    }

    #[test]
    fn zeroed_branches_reduce_to_relu_of_initial_block() {
        let c = 4;
        let (enc, store) =
            ParamStore::init(DType::F64, 3, |vb| Attencoder::new(vb, Branch::Local, 3, c, 2, true)).unwrap();
        for (name, var) in store.iter() {
            if name.starts_with("res") || name.starts_with("attn.value") {
                var.set(&var.as_tensor().zeros_like().unwrap()).unwrap();
            }
        }
        let x = ramp((1, 3, 8, 8));
        let got = enc.forward(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let (initial, _) =
            ParamStore::init(DType::F64, 3, |vb| InitialBlock::new(&vb.pp("initial"), Branch::Local, 3, c)).unwrap();
        let expect = initial.forward(&x).unwrap().relu().unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(got, expect);
    }

    #[test]
    fn ablated_attention_has_fewer_parameters() {
        let (_, with) =
            ParamStore::init(DType::F32, 0, |vb| Attencoder::new(vb, Branch::Local, 3, 8, 2, true)).unwrap();
        let (_, without) =
            ParamStore::init(DType::F32, 0, |vb| Attencoder::new(vb, Branch::Local, 3, 8, 2, false)).unwrap();
        assert_eq!(with.num_scalars() - without.num_scalars(), 4 * (8 * 8 + 8));
    }
}
