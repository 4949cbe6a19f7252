use crate::config::TrainConfig;

/// Learning rate for epoch index `epoch`: a linear ramp from 0 to `lr_max`
/// over `warmup_epochs`, then a triangle wave between `lr_max` and `lr_min`
/// with period `cycle_epochs`, starting at the peak.
pub fn cyclic_lr(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.warmup_epochs {
        return cfg.lr_max * epoch as f64 / cfg.warmup_epochs as f64;
    }
    let cycle = cfg.cycle_epochs.max(1);
    let phase = ((epoch - cfg.warmup_epochs) % cycle) as f64 / cycle as f64;
    cfg.lr_min + (cfg.lr_max - cfg.lr_min) * (1.0 - 2.0 * phase).abs()
}
