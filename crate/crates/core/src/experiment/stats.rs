use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("need at least two values to aggregate, got {0}")]
    TooFew(usize),
    #[error("non-finite value {0} in sample")]
    NonFinite(f64),
}

/// Arithmetic mean and population (divide-by-n) standard deviation.
pub fn aggregate_seeds(values: &[f64]) -> Result<(f64, f64), StatsError> {
    if values.len() < 2 {
        return Err(StatsError::TooFew(values.len()));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite(*v));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// Mean and population standard deviation of the union of two equal-size
/// groups, from each group's mean and population standard deviation.
pub fn combine_group_stats(mean_a: f64, std_a: f64, mean_b: f64, std_b: f64) -> (f64, f64) {
    let mean = (mean_a + mean_b) / 2.0;
    let within = (std_a * std_a + std_b * std_b) / 2.0;
    let between = ((mean_a - mean).powi(2) + (mean_b - mean).powi(2)) / 2.0;
    (mean, (within + between).sqrt())
}

/// `"m ± s"` with two decimals.
pub fn format_pm(mean: f64, std: f64) -> String {
    format!("{mean:.2} ± {std:.2}")
}
