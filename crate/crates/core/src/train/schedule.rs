use super::TrainConfig;

/// Cosine annealing with hard restarts every `schedule_period` epochs,
/// decaying from `base_lr` towards zero, no warmup.
pub fn cosine_lr(epoch: usize, config: &TrainConfig) -> f64 {
    let period = config.schedule_period.max(1);
    let phase = (epoch % period) as f64 / period as f64;
    config.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * phase).cos())
}
