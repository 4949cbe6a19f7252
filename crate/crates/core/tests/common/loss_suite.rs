//! Hand-computed examples for every reconstruction and similarity loss.

use brightvae::config::ExtractorConfig;
use brightvae::features::RandomConvExtractor;
use brightvae::losses::{self, LossWeights, SimilarityKind};
use brightvae::Error;
use candle_core::{DType, Tensor};

use super::{filled, naive_stages, plane_of, random, scalar, tensor, Checks};

const TOL: f64 = 1e-6;

fn s(t: brightvae::Result<Tensor>) -> f64 {
    scalar(&t.unwrap())
}

/// 8×8 step edge on all three channels, and its 3×3 box blur (edge-replicated).
fn edge_and_blur() -> (Tensor, Tensor) {
    let n = 8;
    let edge: Vec<f64> = (0..n * n).map(|i| if i % n < n / 2 { 0.1 } else { 0.9 }).collect();
    let mut blur = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let mut acc = 0.0;
            for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    let yy = (y as i32 + dy).clamp(0, n as i32 - 1) as usize;
                    let xx = (x as i32 + dx).clamp(0, n as i32 - 1) as usize;
                    acc += edge[yy * n + xx];
                }
            }
            blur[y * n + x] = acc / 9.0;
        }
    }
    let three = |p: &[f64]| tensor([p, p, p].concat(), &[1, 3, n, n]);
    (three(&edge), three(&blur))
}

pub fn run() -> Checks {
    let mut c = Checks::default();

    // rest
    let x = random(&[1, 3, 8, 8], 1);
    c.close("rest identical", s(losses::rest_loss(&x, &x)), 0.0, TOL);
    c.close(
        "rest ones vs zeros",
        s(losses::rest_loss(&filled(&[1, 3, 4, 4], 1.0), &filled(&[1, 3, 4, 4], 0.0))),
        1.0,
        TOL,
    );
    c.close(
        "rest 2x2 example",
        s(losses::rest_loss(&tensor(vec![0.0, 1.0, 0.0, 1.0], &[1, 1, 2, 2]), &filled(&[1, 1, 2, 2], 0.0))),
        0.5,
        TOL,
    );

    // latent sum
    let z = filled(&[], 0.0);
    c.close("latent zero", s(losses::latent_loss_total(Some(&z), &z)), 0.0, TOL);
    c.close(
        "latent additive",
        s(losses::latent_loss_total(Some(&filled(&[], 0.2)), &filled(&[], 0.3))),
        0.5,
        TOL,
    );
    c.close("latent single branch", s(losses::latent_loss_total(None, &filled(&[], 0.3))), 0.3, TOL);

    // ssi
    let t = random(&[1, 3, 32, 32], 2).affine(0.8, 0.1).unwrap();
    c.close("ssi identical", s(losses::ssi_loss(&t, &t)), 0.0, TOL);
    c.close(
        "ssi equal constants",
        s(losses::ssi_loss(&filled(&[1, 3, 16, 16], 0.4), &filled(&[1, 3, 16, 16], 0.4))),
        0.0,
        TOL,
    );
    let shifted = t.affine(1.0, 0.05).unwrap();
    let signs: Vec<f64> = super::Lcg::new(3).take(3 * 32 * 32).iter().map(|u| if *u < 0.5 { -0.05 } else { 0.05 }).collect();
    let noisy = (&t + tensor(signs, &[1, 3, 32, 32])).unwrap();
    let mse_shift = s(losses::rest_loss(&shifted, &t));
    let mse_noise = s(losses::rest_loss(&noisy, &t));
    let (ssi_shift, ssi_noise) = (s(losses::ssi_loss(&shifted, &t)), s(losses::ssi_loss(&noisy, &t)));
    c.check(
        "ssi brightness shift below equal-mse noise",
        (mse_shift - mse_noise).abs() < 1e-12 && ssi_shift < ssi_noise,
        format!("shift {ssi_shift:.6} vs noise {ssi_noise:.6}"),
    );

    // jaccard
    let p = random(&[1, 3, 4, 4], 4).affine(0.9, 0.1).unwrap();
    let a = tensor(vec![1.0, 0.0, 1.0, 0.0], &[1, 1, 2, 2]);
    c.close("jaccard identical binary mask", s(losses::jaccard_loss(&a, &a)), 0.0, TOL);
    let b = tensor(vec![0.0, 1.0, 0.0, 1.0], &[1, 1, 2, 2]);
    c.close("jaccard disjoint", s(losses::jaccard_loss(&a, &b)), 1.0, TOL);
    c.close(
        "jaccard soft iou example",
        s(losses::jaccard_loss(&tensor(vec![1.0, 0.0], &[1, 1, 1, 2]), &tensor(vec![1.0, 1.0], &[1, 1, 1, 2]))),
        0.5,
        TOL,
    );

    // tv
    c.close("tv constant", s(losses::tv_loss(&filled(&[1, 3, 5, 5], 0.3))), 0.0, TOL);
    c.close("tv one pair", s(losses::tv_loss(&tensor(vec![0.0, 1.0], &[1, 1, 1, 2]))), 1.0, TOL);
    let checker: Vec<f64> = (0..16).map(|i| ((i / 4 + i % 4) % 2) as f64).collect();
    let ramp: Vec<f64> = (0..16).map(|i| (i / 4 + i % 4) as f64 / 6.0).collect();
    let (tv_c, tv_r) = (
        s(losses::tv_loss(&tensor(checker, &[1, 1, 4, 4]))),
        s(losses::tv_loss(&tensor(ramp, &[1, 1, 4, 4]))),
    );
    c.check("tv checkerboard above ramp", tv_c > tv_r, format!("{tv_c:.6} vs {tv_r:.6}"));

    // cosine
    c.close("cosine scaled", s(losses::cosine_loss(&p.affine(2.5, 0.0).unwrap(), &p)), 0.0, TOL);
    c.close("cosine orthogonal", s(losses::cosine_loss(&a, &b)), 1.0, TOL);
    c.close(
        "cosine example",
        s(losses::cosine_loss(&tensor(vec![1.0, 0.0], &[1, 1, 1, 2]), &tensor(vec![1.0, 1.0], &[1, 1, 1, 2]))),
        1.0 - 1.0 / 2f64.sqrt(),
        TOL,
    );
    c.check(
        "cosine zero norm rejected",
        matches!(
            losses::cosine_loss(&filled(&[1, 1, 1, 2], 0.0), &tensor(vec![1.0, 0.0], &[1, 1, 1, 2])),
            Err(Error::Numeric(_))
        ),
        "numeric error",
    );

    // kld
    c.close("kld identical", losses::kld_loss(&p, &p, 256).unwrap(), 0.0, TOL);
    c.close(
        "kld two-bin example",
        losses::kld_loss(&tensor(vec![0.25, 0.75], &[1, 1, 1, 2]), &tensor(vec![0.25, 0.25], &[1, 1, 1, 2]), 2).unwrap(),
        2f64.ln(),
        TOL,
    );
    let mut kl_min = f64::INFINITY;
    for seed in 0..20 {
        let u = random(&[1, 3, 8, 8], 100 + seed);
        let v = random(&[1, 3, 8, 8], 200 + seed).sqr().unwrap();
        kl_min = kl_min.min(losses::kld_loss(&u, &v, 16).unwrap());
        kl_min = kl_min.min(s(losses::kld_loss_soft(&u, &v, 16)));
    }
    c.check("kld nonnegative", kl_min >= 0.0, format!("min {kl_min:e}"));

    // gmsd
    c.close("gmsd identical", s(losses::gmsd_loss(&p, &p)), 0.0, TOL);
    c.close(
        "gmsd constants",
        s(losses::gmsd_loss(&filled(&[1, 3, 6, 6], 0.2), &filled(&[1, 3, 6, 6], 0.7))),
        0.0,
        TOL,
    );
    let (edge, blur) = edge_and_blur();
    let g = s(losses::gmsd_loss(&blur, &edge));
    c.check("gmsd edge vs blur positive", g > 1e-3, format!("{g:.6}"));

    // perceptual
    let xc = ExtractorConfig {
        seed: 11,
        stage_widths: vec![4, 6, 8],
    };
    let ex = RandomConvExtractor::new(&xc, DType::F64).unwrap();
    let q = random(&[1, 3, 16, 16], 5);
    let r = random(&[1, 3, 16, 16], 6);
    c.close("perceptual identical", s(losses::perceptual_loss(&q, &q, Some(&ex))), 0.0, TOL);
    let got = s(losses::perceptual_loss(&q, &r, Some(&ex)));
    let fq = naive_stages(ex.parameters(), &xc.stage_widths, &plane_of(&q));
    let fr = naive_stages(ex.parameters(), &xc.stage_widths, &plane_of(&r));
    let want = fq
        .iter()
        .zip(&fr)
        .map(|(a, b)| a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.data.len() as f64)
        .sum::<f64>()
        / fq.len() as f64;
    c.check("perceptual nonnegative", got >= 0.0, format!("{got:.8}"));
    c.close("perceptual matches loop recomputation", got, want, TOL);
    c.check(
        "perceptual without extractor rejected",
        matches!(losses::perceptual_loss(&q, &r, None), Err(Error::Config(_))),
        "config error",
    );

    // color consistency
    c.close("color identical", s(losses::color_consistency_loss(&p, &p)), 0.0, TOL);
    c.close(
        "color shifted by 0.1",
        s(losses::color_consistency_loss(&p.affine(1.0, 0.1).unwrap(), &p)),
        0.03,
        TOL,
    );
    let red = tensor([vec![0.9; 4], vec![0.1; 4], vec![0.1; 4]].concat(), &[1, 3, 2, 2]);
    let blue = tensor([vec![0.1; 4], vec![0.1; 4], vec![0.9; 4]].concat(), &[1, 3, 2, 2]);
    let cc = s(losses::color_consistency_loss(&blue, &red));
    c.check("color channel permutation positive", cc > 0.0, format!("{cc:.6}"));

    // total
    let w = LossWeights::default();
    c.close(
        "total default weights",
        losses::total_loss(1.0, 1.0, 1.0, SimilarityKind::Ssi, &w).unwrap().total,
        1.33,
        TOL,
    );
    c.close("total zeros", losses::total_loss(0.0, 0.0, 0.0, SimilarityKind::Ssi, &w).unwrap().total, 0.0, TOL);
    let off1 = losses::total_loss(0.4, 0.2, 0.0, SimilarityKind::None, &w).unwrap().total;
    let off2 = losses::total_loss(0.4, 0.2, 7.0, SimilarityKind::None, &w).unwrap().total;
    c.check("total ignores similarity when off", off1 == off2, format!("{off1} vs {off2}"));

    c
}
