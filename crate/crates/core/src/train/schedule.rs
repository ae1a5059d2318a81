use std::f64::consts::PI;

use super::TrainConfig;

/// Learning rate at `epoch_fraction` (fractional epochs since the start):
/// linear from `warmup_start_factor·base_lr` to `base_lr` over the warmup
/// epochs, then a half cosine down to `min_lr` at the final epoch.
pub fn lr_at(epoch_fraction: f64, cfg: &TrainConfig) -> f64 {
    let base = cfg.base_lr;
    let min = cfg.min_lr();
    let warm = cfg.warmup_epochs as f64;
    let e = epoch_fraction.max(0.0);
    if e < warm {
        let start = cfg.warmup_start_factor * base;
        return start + (base - start) * e / warm;
    }
    let span = (cfg.epochs as f64 - warm).max(f64::MIN_POSITIVE);
    let progress = ((e - warm) / span).min(1.0);
    min + 0.5 * (base - min) * (1.0 + (PI * progress).cos())
}
