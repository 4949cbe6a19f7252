//! Training loop, evaluation and ablation harness.

pub mod ablation;
pub mod adam;
pub mod checkpoint;
pub mod schedule;

use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use ablation::{ablate_components, ablate_losses, AblationGrid, AblationRow, AblationTable};
pub use adam::Adam;
pub use checkpoint::{Checkpoint, RngState};
pub use schedule::cyclic_lr;

use crate::config::RunConfig;
use crate::data::{DatasetSplit, Image};
use crate::error::{Error, Result};
use crate::features::{FeatureExtractor, RandomConvExtractor};
use crate::losses::{self, LossBreakdown, Objective};
use crate::metrics::{self, AggregateMetrics, MetricReport};
use crate::model::BrightVae;
use crate::nn::ParamStore;

/// Mean loss terms of one training epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub rest: f64,
    pub latent: f64,
    pub similarity: f64,
    pub total: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,lr,rest,latent,similarity,total\n");
    for r in history {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.lr, r.rest, r.latent, r.similarity, r.total
        ));
    }
    s
}

/// Extractor described by the run configuration, if any.
pub fn build_extractor(run: &RunConfig, dtype: DType) -> Result<Option<RandomConvExtractor>> {
    run.extractor.as_ref().map(|e| RandomConvExtractor::new(e, dtype)).transpose()
}

#[derive(Debug, Default)]
pub struct TrainOptions<'a> {
    /// Periodic checkpoints (`epoch_NNNN.ckpt`) go here when `checkpoint_every > 0`.
    pub checkpoint_dir: Option<PathBuf>,
    /// Continue from this snapshot instead of a fresh initialization.
    pub resume: Option<Checkpoint>,
    /// Scored every `eval_every` epochs when given.
    pub eval_data: Option<&'a DatasetSplit>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub evals: Vec<(usize, AggregateMetrics)>,
    pub seconds: f64,
}

fn first_non_finite(b: &LossBreakdown) -> Option<&'static str> {
    [("rest", b.rest), ("latent", b.latent), ("similarity", b.similarity), ("total", b.total)]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
}

pub fn train(run: &RunConfig, data: &DatasetSplit, opts: TrainOptions) -> Result<TrainOutcome> {
    run.validate()?;
    if data.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    let tc = &run.train;
    let dtype = tc.precision.dtype();
    let started = Instant::now();

    let (params, mut adam, mut rng, mut history, start_epoch) = match opts.resume {
        Some(ck) => {
            if ck.config.model != run.model {
                return Err(Error::Config("resume checkpoint was trained with a different model configuration".into()));
            }
            if ck.params.dtype() != dtype {
                return Err(Error::Config("resume checkpoint precision differs from the train configuration".into()));
            }
            let rng = ck.rng.restore()?;
            (ck.params, ck.optimizer, rng, ck.history, ck.epoch)
        }
        None => {
            let (_, params) = BrightVae::init(&run.model, dtype)?;
            let adam = Adam::new(&params, tc.adam_beta1, tc.adam_beta2, tc.adam_eps)?;
            (params, adam, ChaCha8Rng::seed_from_u64(tc.seed), Vec::new(), 0)
        }
    };
    let model = BrightVae::bind(&run.model, &params, false)?;
    let extractor = build_extractor(run, dtype)?;
    let objective = Objective::from_config(&run.model, extractor.as_ref().map(|e| e as &dyn FeatureExtractor))?;

    let lows = data.pairs.iter().map(|p| p.low.to_tensor(dtype)).collect::<Result<Vec<_>>>()?;
    let gts = data.pairs.iter().map(|p| p.gt.to_tensor(dtype)).collect::<Result<Vec<_>>>()?;
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut evals = Vec::new();

    for epoch in start_epoch..tc.epochs {
        let lr = cyclic_lr(epoch + 1, tc);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        for (b, chunk) in order.chunks(tc.batch_size).enumerate() {
            let x = Tensor::stack(&chunk.iter().map(|&i| lows[i].clone()).collect::<Vec<_>>(), 0)?;
            let y = Tensor::stack(&chunk.iter().map(|&i| gts[i].clone()).collect::<Vec<_>>(), 0)?;
            let out = model.forward(&x)?;
            let (total, br) = objective.evaluate(&out.enhanced, &y, &out.latent_loss()?)?;
            if let Some(term) = first_non_finite(&br) {
                return Err(Error::Numeric(format!(
                    "non-finite {term} loss at epoch {}, batch {}",
                    epoch + 1,
                    b + 1
                )));
            }
            let grads = total.backward()?;
            adam.step(&params, &grads, lr, tc.grad_clip)?;
            let w = chunk.len() as f64;
            sums[0] += br.rest * w;
            sums[1] += br.latent * w;
            sums[2] += br.similarity * w;
            sums[3] += br.total * w;
        }
        let rec = EpochRecord {
            epoch: epoch + 1,
            lr,
            rest: sums[0] / n as f64,
            latent: sums[1] / n as f64,
            similarity: sums[2] / n as f64,
            total: sums[3] / n as f64,
        };
        log::info!(
            "epoch {}/{} lr {:.3e} total {:.6} (rest {:.6}, latent {:.6}, similarity {:.6})",
            rec.epoch,
            tc.epochs,
            rec.lr,
            rec.total,
            rec.rest,
            rec.latent,
            rec.similarity
        );
        history.push(rec);

        let done = epoch + 1;
        if tc.checkpoint_every > 0 && done % tc.checkpoint_every == 0 {
            if let Some(dir) = &opts.checkpoint_dir {
                let ck = snapshot(run, done, &params, &adam, &rng, &history)?;
                ck.save(&dir.join(format!("epoch_{done:04}.ckpt")))?;
            }
        }
        if tc.eval_every > 0 && done % tc.eval_every == 0 {
            if let Some(eval) = opts.eval_data {
                let ex = extractor.as_ref().map(|e| e as &dyn FeatureExtractor);
                let report = evaluate_params(run, &params, eval, ex)?;
                log::info!(
                    "epoch {done} eval psnr {:.3} ssim {:.4}",
                    report.aggregate.psnr,
                    report.aggregate.ssim
                );
                evals.push((done, report.aggregate));
            }
        }
    }
    let checkpoint = snapshot(run, tc.epochs.max(start_epoch), &params, &adam, &rng, &history)?;
    Ok(TrainOutcome {
        history,
        checkpoint,
        evals,
        seconds: started.elapsed().as_secs_f64(),
    })
}

fn snapshot(
    run: &RunConfig,
    epoch: usize,
    params: &ParamStore,
    adam: &Adam,
    rng: &ChaCha8Rng,
    history: &[EpochRecord],
) -> Result<Checkpoint> {
    let mut adam = adam.clone();
    adam.m = adam.m.iter().map(|t| t.copy()).collect::<candle_core::Result<_>>()?;
    adam.v = adam.v.iter().map(|t| t.copy()).collect::<candle_core::Result<_>>()?;
    Ok(Checkpoint {
        config: run.clone(),
        epoch,
        params: params.deep_clone()?,
        optimizer: adam,
        rng: RngState::capture(run.train.seed, rng),
        history: history.to_vec(),
    })
}

/// Enhances one image with a detached model.
pub fn enhance_image(model: &BrightVae, low: &Image, dtype: DType) -> Result<Image> {
    let x = low.to_tensor(dtype)?.unsqueeze(0)?;
    Image::from_tensor(&model.enhance(&x)?)
}

/// Scores already-enhanced images against their targets.
pub fn score_images(
    ids: &[String],
    preds: &[Image],
    targets: &[Image],
    extractor: Option<&dyn FeatureExtractor>,
    loss: Option<LossBreakdown>,
) -> Result<MetricReport> {
    let dtype = DType::F64;
    let mut rows = Vec::with_capacity(preds.len());
    for ((id, p), t) in ids.iter().zip(preds).zip(targets) {
        rows.push(metrics::image_metrics(id, &p.to_tensor(dtype)?, &t.to_tensor(dtype)?, extractor)?);
    }
    Ok(MetricReport::from_images(rows, loss))
}

/// Enhances every low image of `data` and scores it against the ground truth.
/// The loss block averages the per-image objective on the unclamped output,
/// with hard histogram bins for the histogram loss.
pub fn evaluate_params(
    run: &RunConfig,
    params: &ParamStore,
    data: &DatasetSplit,
    extractor: Option<&dyn FeatureExtractor>,
) -> Result<MetricReport> {
    if data.is_empty() {
        return Err(Error::Dataset("evaluation split is empty".into()));
    }
    let dtype = params.dtype();
    let model = BrightVae::bind(&run.model, params, true)?;
    let objective = Objective::from_config(&run.model, extractor)?;
    let mut rows = Vec::with_capacity(data.len());
    let mut sums = [0.0f64; 3];
    for pair in &data.pairs {
        let x = pair.low.to_tensor(dtype)?.unsqueeze(0)?;
        let y = pair.gt.to_tensor(dtype)?.unsqueeze(0)?;
        let out = model.forward(&x)?;
        let rest = crate::nn::scalar(&losses::rest_loss(&out.enhanced, &y)?)?;
        let latent = crate::nn::scalar(&out.latent_loss()?)?;
        let sim = losses::similarity_value(objective.kind, &out.enhanced, &y, objective.bins, objective.extractor)?;
        sums[0] += rest;
        sums[1] += latent;
        sums[2] += sim;
        let enhanced = out.enhanced.detach().clamp(0.0, 1.0)?;
        let pred = enhanced.to_dtype(DType::F64)?;
        let target = y.to_dtype(DType::F64)?;
        let lp = metrics::lpips(&enhanced, &y, extractor, None)?;
        rows.push(metrics::ImageMetrics {
            id: pair.id.clone(),
            psnr: metrics::psnr(&pred, &target, 1.0)?,
            ssim: metrics::ssim(&pred, &target)?,
            lpips: lp,
        });
    }
    let n = data.len() as f64;
    let loss = losses::total_loss(sums[0] / n, sums[1] / n, sums[2] / n, objective.kind, &objective.weights)?;
    Ok(MetricReport::from_images(rows, Some(loss)))
}

pub fn evaluate(checkpoint: &Checkpoint, data: &DatasetSplit) -> Result<MetricReport> {
    let extractor = build_extractor(&checkpoint.config, checkpoint.params.dtype())?;
    evaluate_params(
        &checkpoint.config,
        &checkpoint.params,
        data,
        extractor.as_ref().map(|e| e as &dyn FeatureExtractor),
    )
}

/// Detached inference model for a checkpoint.
pub fn inference_model(checkpoint: &Checkpoint) -> Result<BrightVae> {
    BrightVae::bind(&checkpoint.config.model, &checkpoint.params, true)
}

pub fn checkpoint_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.ckpt"))
}
