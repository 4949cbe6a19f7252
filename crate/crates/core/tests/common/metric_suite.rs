//! PSNR, SSIM and LPIPS against closed forms, loop recomputations and the
//! scikit-image fixture.

use brightvae::config::ExtractorConfig;
use brightvae::features::RandomConvExtractor;
use brightvae::metrics::{self, PSNR_SENTINEL_DB};
use candle_core::{DType, Tensor};

use super::{filled, naive_stages, plane_of, random, ssim_fixture_pair, ssim_fixture_values, tensor, Checks, Lcg};

pub const SSIM_TOL: f64 = 1e-4;

/// `x + N(0, σ²)` by Box–Muller over the fixture LCG, clamped to `[0, 1]`.
pub fn add_noise(x: &Tensor, sigma: f64, seed: u64) -> Tensor {
    let mut rng = Lcg::new(seed);
    let data: Vec<f64> = super::values(x)
        .into_iter()
        .map(|v| {
            let u1 = rng.next_f64().max(1e-300);
            let u2 = rng.next_f64();
            let n = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            (v + sigma * n).clamp(0.0, 1.0)
        })
        .collect();
    tensor(data, x.dims())
}

pub fn ssim_oracle(c: &mut Checks) {
    let want = ssim_fixture_values();
    let mut worst = 0.0f64;
    for (i, w) in want.iter().enumerate() {
        let (p, t) = ssim_fixture_pair(i);
        worst = worst.max((metrics::ssim(&p, &t).unwrap() - w).abs());
    }
    c.check(
        "ssim matches scikit-image on 10 pairs",
        want.len() == 10 && worst <= SSIM_TOL,
        format!("max |Δ| {worst:.3e} (tol {SSIM_TOL:e})"),
    );
}

pub fn psnr_checks(c: &mut Checks) {
    let t = filled(&[1, 3, 8, 8], 0.0);
    for a in [0.5f64, 0.25, 0.1, 0.01] {
        let mse = a * a;
        let got = metrics::psnr(&filled(&[1, 3, 8, 8], a), &t, 1.0).unwrap();
        let want = 10.0 * (1.0 / metrics::mse(&filled(&[1, 3, 8, 8], a), &t).unwrap()).log10();
        c.check(
            &format!("psnr at mse {mse}"),
            got == want && (got - 10.0 * (1.0 / mse).log10()).abs() < 1e-9,
            format!("{got:.12} dB"),
        );
    }
    c.check("psnr mse 0.01", metrics::psnr_from_mse(0.01, 1.0) == 20.0, "20 dB");
    c.check("psnr mse 1", metrics::psnr_from_mse(1.0, 1.0) == 0.0, "0 dB");
    let x = random(&[1, 3, 16, 16], 9);
    c.check(
        "psnr identical gives sentinel",
        metrics::psnr(&x, &x, 1.0).unwrap() == PSNR_SENTINEL_DB,
        format!("{PSNR_SENTINEL_DB} dB"),
    );

    let clean = random(&[1, 3, 64, 64], 10).affine(0.6, 0.2).unwrap();
    let scores: Vec<f64> = [0.01, 0.05, 0.1]
        .iter()
        .map(|s| metrics::psnr(&add_noise(&clean, *s, 77), &clean, 1.0).unwrap())
        .collect();
    c.check(
        "psnr decreases with noise sigma 0.01, 0.05, 0.1",
        scores.windows(2).all(|w| w[0] > w[1]),
        format!("{scores:.3?}"),
    );
}

pub fn ssim_closed_forms(c: &mut Checks) {
    let x = random(&[1, 3, 16, 16], 12);
    c.close("ssim identical", metrics::ssim(&x, &x).unwrap(), 1.0, 1e-12);
    let (a, b) = (0.2, 0.8);
    let c1 = 0.01f64 * 0.01;
    c.close(
        "ssim constant patches",
        metrics::ssim(&filled(&[1, 3, 16, 16], a), &filled(&[1, 3, 16, 16], b)).unwrap(),
        (2.0 * a * b + c1) / (a * a + b * b + c1),
        1e-9,
    );
}

/// LPIPS from explicit loops: unit-normalize channels, squared difference,
/// optional channel weights, sum over channels, mean over positions, sum over stages.
pub fn lpips_by_loops(ex: &RandomConvExtractor, widths: &[usize], p: &Tensor, t: &Tensor, weights: Option<&[Vec<f64>]>) -> f64 {
    let fp = naive_stages(ex.parameters(), widths, &plane_of(p));
    let ft = naive_stages(ex.parameters(), widths, &plane_of(t));
    let mut total = 0.0;
    for (s, (a, b)) in fp.iter().zip(&ft).enumerate() {
        let hw = a.h * a.w;
        let mut stage = 0.0;
        for pos in 0..hw {
            let na = (0..a.c).map(|k| a.data[k * hw + pos].powi(2)).sum::<f64>().sqrt() + 1e-10;
            let nb = (0..b.c).map(|k| b.data[k * hw + pos].powi(2)).sum::<f64>().sqrt() + 1e-10;
            for k in 0..a.c {
                let d = a.data[k * hw + pos] / na - b.data[k * hw + pos] / nb;
                stage += weights.map_or(1.0, |w| w[s][k]) * d * d;
            }
        }
        total += stage / hw as f64;
    }
    total
}

pub fn lpips_checks(c: &mut Checks) {
    let cfg = ExtractorConfig {
        seed: 5,
        stage_widths: vec![4, 8, 8],
    };
    let ex = RandomConvExtractor::new(&cfg, DType::F64).unwrap();
    let p = random(&[1, 3, 16, 16], 21);
    let t = random(&[1, 3, 16, 16], 22);
    let lp = |a: &Tensor, b: &Tensor, w: Option<&Vec<Vec<f64>>>| metrics::lpips(a, b, Some(&ex), w).unwrap().unwrap();
    c.close("lpips identical", lp(&p, &p, None), 0.0, 1e-12);
    c.check("lpips symmetric", lp(&p, &t, None) == lp(&t, &p, None), format!("{:.8}", lp(&p, &t, None)));
    c.close(
        "lpips matches loop recomputation",
        lp(&p, &t, None),
        lpips_by_loops(&ex, &cfg.stage_widths, &p, &t, None),
        1e-6,
    );
    let w: Vec<Vec<f64>> = cfg
        .stage_widths
        .iter()
        .enumerate()
        .map(|(s, &n)| (0..n).map(|k| 0.1 + 0.2 * ((s + k) % 4) as f64).collect())
        .collect();
    c.close(
        "lpips with channel weights matches loops",
        lp(&p, &t, Some(&w)),
        lpips_by_loops(&ex, &cfg.stage_widths, &p, &t, Some(&w)),
        1e-6,
    );
    c.check(
        "lpips absent without extractor",
        metrics::lpips(&p, &t, None, None).unwrap().is_none(),
        "none",
    );
}

/// Everything the metric acceptance criterion covers.
pub fn run() -> Checks {
    let mut c = Checks::default();
    ssim_oracle(&mut c);
    psnr_checks(&mut c);
    c
}
