#![allow(dead_code)]

pub mod loss_suite;
pub mod metric_suite;

use std::fmt::Write as _;

use brightvae::data::{make_synth_dataset, DatasetSplit};
use candle_core::{DType, Device, Tensor, Var};

/// 64-bit LCG shared with `fixtures/ssim_oracle.py`.
pub struct Lcg(u64);

impl Lcg {
    pub fn new(seed: u64) -> Self {
        Self(seed)
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (self.0 >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn take(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.next_f64()).collect()
    }
}

pub fn tensor(data: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::from_vec(data, shape, &Device::Cpu).unwrap()
}

/// Uniform `[0, 1)` values in f64.
pub fn random(shape: &[usize], seed: u64) -> Tensor {
    let n = shape.iter().product();
    tensor(Lcg::new(seed).take(n), shape)
}

pub fn filled(shape: &[usize], v: f64) -> Tensor {
    Tensor::full(v, shape, &Device::Cpu).unwrap()
}

pub fn values(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

/// Pair `index` of the SSIM fixture, as `(pred, target)` of shape `(1, 3, 64, 64)`.
pub fn ssim_fixture_pair(index: usize) -> (Tensor, Tensor) {
    let n = 3 * 64 * 64;
    let mut rng = Lcg::new(1000 + index as u64);
    let target = rng.take(n);
    let noise = rng.take(n);
    let mix = 0.1 * index as f64;
    let pred: Vec<f64> = target.iter().zip(&noise).map(|(t, z)| (1.0 - mix) * t + mix * z).collect();
    (tensor(pred, &[1, 3, 64, 64]), tensor(target, &[1, 3, 64, 64]))
}

pub fn ssim_fixture_values() -> Vec<f64> {
    let text = include_str!("../fixtures/ssim_skimage.json");
    let v: serde_json::Value = serde_json::from_str(text).unwrap();
    v["ssim"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Largest relative error between the autograd gradient of `f` at `x` and
/// central differences with step `h`, over every input element.
pub fn input_grad_error(f: impl Fn(&Tensor) -> Tensor, x: &Tensor, h: f64, floor: f64) -> f64 {
    let var = Var::from_tensor(x).unwrap();
    let loss = f(var.as_tensor());
    let grads = loss.backward().unwrap();
    let analytic = values(grads.get(var.as_tensor()).unwrap());
    let base = values(x);
    let shape = x.dims().to_vec();
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let fp = scalar(&f(&tensor(plus, &shape)));
        let fm = scalar(&f(&tensor(minus, &shape)));
        let numeric = (fp - fm) / (2.0 * h);
        worst = worst.max(rel_err(analytic[i], numeric, floor));
    }
    worst
}

pub fn toy_split(pairs: usize, size: usize, seed: u64, n_test: usize) -> (DatasetSplit, DatasetSplit) {
    make_synth_dataset(pairs, size, seed).unwrap().split_off_test(n_test).unwrap()
}

/// Named pass/fail results with a printable summary.
#[derive(Debug, Default)]
pub struct Checks {
    pub items: Vec<(String, bool, String)>,
}

impl Checks {
    pub fn check(&mut self, name: &str, ok: bool, detail: impl Into<String>) {
        self.items.push((name.to_string(), ok, detail.into()));
    }

    pub fn close(&mut self, name: &str, got: f64, want: f64, tol: f64) {
        let ok = (got - want).abs() <= tol;
        self.check(name, ok, format!("got {got:.10}, want {want:.10} ± {tol:e}"));
    }

    pub fn all_pass(&self) -> bool {
        self.items.iter().all(|(_, ok, _)| *ok)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.items.iter().filter(|(_, ok, _)| !ok).map(|(n, _, _)| n.as_str()).collect()
    }

    pub fn report(&self) -> String {
        let mut s = String::new();
        for (name, ok, detail) in &self.items {
            let _ = writeln!(s, "{} {name}: {detail}", if *ok { "ok  " } else { "FAIL" });
        }
        s
    }
}

/// Feature map of one image, channel-major.
pub struct Plane {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

/// Stages of a [`RandomConvExtractor`](brightvae::features::RandomConvExtractor)
/// evaluated with explicit loops from its stored weights.
pub fn naive_stages(params: &brightvae::nn::ParamStore, widths: &[usize], image: &Plane) -> Vec<Plane> {
    let mut x = Plane {
        c: image.c,
        h: image.h,
        w: image.w,
        data: image.data.iter().map(|v| 2.0 * v - 1.0).collect(),
    };
    let mut out = Vec::new();
    for (i, &c_out) in widths.iter().enumerate() {
        let stride = if i == 0 { 1 } else { 2 };
        let wt = values(params.get(&format!("stage{i}.weight")).unwrap().as_tensor());
        let bias = values(params.get(&format!("stage{i}.bias")).unwrap().as_tensor());
        let oh = (x.h + 2 - 3) / stride + 1;
        let ow = (x.w + 2 - 3) / stride + 1;
        let mut data = vec![0.0; c_out * oh * ow];
        for o in 0..c_out {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = bias[o];
                    for c in 0..x.c {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (y * stride + ky) as isize - 1;
                                let ix = (xx * stride + kx) as isize - 1;
                                if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                    continue;
                                }
                                let v = x.data[(c * x.h + iy as usize) * x.w + ix as usize];
                                acc += wt[((o * x.c + c) * 3 + ky) * 3 + kx] * v;
                            }
                        }
                    }
                    data[(o * oh + y) * ow + xx] = acc.max(0.0);
                }
            }
        }
        x = Plane {
            c: c_out,
            h: oh,
            w: ow,
            data,
        };
        out.push(Plane {
            c: x.c,
            h: x.h,
            w: x.w,
            data: x.data.clone(),
        });
    }
    out
}

pub fn plane_of(t: &Tensor) -> Plane {
    let (_, c, h, w) = t.dims4().unwrap();
    Plane {
        c,
        h,
        w,
        data: values(t),
    }
}
