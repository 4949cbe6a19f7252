//! Structural (component toggle) and loss-sweep ablations.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{build_extractor, evaluate_params, train, TrainOptions};
use crate::config::{ComponentToggles, RunConfig};
use crate::data::DatasetSplit;
use crate::error::{Error, Result};
use crate::features::FeatureExtractor;
use crate::losses::SimilarityKind;
use crate::metrics::AggregateMetrics;
use crate::model::parameter_count;

pub const COMPONENT_HEADER: &str = "Configuration,Two Receptive Fields,SSI Loss,Skip Connection,Attencoder Module,Attenquant Module,PSNR ↑,SSIM ↑,LPIPS ↓";
pub const LOSS_HEADER: &str = "Loss Function,PSNR ↑,SSIM ↑,LPIPS ↓";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationGrid {
    Components,
    Losses,
}

impl AblationGrid {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Components => "components",
            Self::Losses => "losses",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "components" => Some(Self::Components),
            "losses" => Some(Self::Losses),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub toggles: Option<ComponentToggles>,
    pub kind: Option<SimilarityKind>,
    pub parameter_count: usize,
    pub config_hash: String,
    /// `None` when the row was skipped.
    pub metrics: Option<AggregateMetrics>,
    pub final_loss: Option<f64>,
    pub seconds: f64,
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub grid: AblationGrid,
    pub rows: Vec<AblationRow>,
}

fn mark(b: bool) -> &'static str {
    if b { "✓" } else { "×" }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

impl AblationTable {
    pub fn header(&self) -> &'static str {
        match self.grid {
            AblationGrid::Components => COMPONENT_HEADER,
            AblationGrid::Losses => LOSS_HEADER,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", self.header());
        for r in &self.rows {
            let m = r.metrics.as_ref();
            let metrics = format!(
                "{},{},{}",
                cell(m.map(|m| m.psnr)),
                cell(m.map(|m| m.ssim)),
                cell(m.and_then(|m| m.lpips))
            );
            match (self.grid, r.toggles) {
                (AblationGrid::Components, Some(t)) => {
                    let marks: Vec<&str> = t.as_array().iter().map(|b| mark(*b)).collect();
                    let _ = writeln!(s, "{},{},{metrics}", r.label, marks.join(","));
                }
                _ => {
                    let _ = writeln!(s, "{},{metrics}", r.label);
                }
            }
        }
        s
    }

    /// Run metadata: seeds, durations, parameter counts and config hashes.
    pub fn sidecar_json(&self, base: &RunConfig) -> Result<String> {
        let rows: Vec<_> = self
            .rows
            .iter()
            .map(|r| {
                serde_json::json!({
                    "label": r.label,
                    "parameter_count": r.parameter_count,
                    "config_hash": r.config_hash,
                    "seconds": r.seconds,
                    "final_loss": r.final_loss,
                    "skipped": r.skipped,
                })
            })
            .collect();
        Ok(serde_json::to_string_pretty(&serde_json::json!({
            "grid": self.grid,
            "model_seed": base.model.seed,
            "train_seed": base.train.seed,
            "base_config_hash": base.hash()?,
            "rows": rows,
        }))?)
    }
}

fn run_row(
    label: String,
    run: RunConfig,
    toggles: Option<ComponentToggles>,
    kind: Option<SimilarityKind>,
    train_data: &DatasetSplit,
    test_data: &DatasetSplit,
) -> Result<AblationRow> {
    let count = parameter_count(&run.model).map_err(|e| Error::Config(format!("row `{label}` failed to build: {e}")))?;
    let hash = run.hash()?;
    if kind.is_some_and(SimilarityKind::needs_extractor) && run.extractor.is_none() {
        log::warn!("skipping `{label}`: no feature extractor configured");
        return Ok(AblationRow {
            label,
            toggles,
            kind,
            parameter_count: count,
            config_hash: hash,
            metrics: None,
            final_loss: None,
            seconds: 0.0,
            skipped: Some("no feature extractor configured".into()),
        });
    }
    log::info!("ablation row `{label}`: {count} parameters");
    let outcome = train(&run, train_data, TrainOptions::default())?;
    let extractor = build_extractor(&run, outcome.checkpoint.params.dtype())?;
    let report = evaluate_params(
        &run,
        &outcome.checkpoint.params,
        test_data,
        extractor.as_ref().map(|e| e as &dyn FeatureExtractor),
    )?;
    Ok(AblationRow {
        label,
        toggles,
        kind,
        parameter_count: count,
        config_hash: hash,
        metrics: Some(report.aggregate),
        final_loss: outcome.history.last().map(|r| r.total),
        seconds: outcome.seconds,
        skipped: None,
    })
}

/// Configuration `i` of the structural grid applied to `base`.
pub fn component_config(base: &RunConfig, toggles: ComponentToggles) -> RunConfig {
    let mut run = base.clone();
    run.model = base.model.with_toggles(toggles);
    run
}

/// Trains and scores the six cumulative component configurations.
pub fn ablate_components(base: &RunConfig, train_data: &DatasetSplit, test_data: &DatasetSplit) -> Result<AblationTable> {
    base.validate()?;
    let rows = ComponentToggles::ablation_rows();
    for (i, t) in rows.iter().enumerate() {
        let run = component_config(base, *t);
        run.validate()
            .map_err(|e| Error::Config(format!("configuration {} failed to build: {e}", i + 1)))?;
    }
    let rows = rows
        .iter()
        .enumerate()
        .map(|(i, t)| run_row((i + 1).to_string(), component_config(base, *t), Some(*t), None, train_data, test_data))
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable {
        grid: AblationGrid::Components,
        rows,
    })
}

/// `base` with the full architecture and the given similarity term.
pub fn loss_config(base: &RunConfig, kind: SimilarityKind) -> RunConfig {
    let mut run = base.clone();
    run.model = base.model.with_toggles(ComponentToggles::ablation_rows()[5]);
    run.model.similarity_loss_kind = kind;
    run.model.use_similarity_loss = kind != SimilarityKind::None;
    run
}

/// Trains and scores one model per similarity loss, plus the rest-and-latent baseline.
pub fn ablate_losses(base: &RunConfig, train_data: &DatasetSplit, test_data: &DatasetSplit) -> Result<AblationTable> {
    base.validate()?;
    let rows = SimilarityKind::ALL
        .iter()
        .map(|k| run_row(k.label().to_string(), loss_config(base, *k), None, Some(*k), train_data, test_data))
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable {
        grid: AblationGrid::Losses,
        rows,
    })
}
