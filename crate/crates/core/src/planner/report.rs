use serde::{Deserialize, Serialize};

use super::flops::{flops_at_rate, AttentionDims};
use crate::error::{Error, Result};

pub const REPORT_CSV_HEADER: &str = "config,total_flops,baseline_flops,reduction_pct";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReductionReport {
    pub config: String,
    pub total_flops: f64,
    pub baseline_flops: f64,
    pub reduction_pct: f64,
    /// Reduction of the quadratic terms as `N → ∞`.
    pub asymptotic_pct: f64,
}

impl ReductionReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.6}",
            self.config, self.total_flops, self.baseline_flops, self.reduction_pct
        )
    }

    pub fn to_csv(reports: &[ReductionReport]) -> String {
        let mut out = String::from(REPORT_CSV_HEADER);
        out.push('\n');
        for r in reports {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out
    }
}

/// `100 · (1/B) Σᵢ (1 − 1/rᵢ)`.
pub fn asymptotic_reduction(rates: &[usize]) -> f64 {
    let b = rates.len() as f64;
    100.0 * rates.iter().map(|&r| 1.0 - 1.0 / r as f64).sum::<f64>() / b
}

/// Total attention FLOPs of a per-block rate assignment against all-softmax.
pub fn reduction_report(config: &str, rates: &[usize], dims: &AttentionDims) -> Result<ReductionReport> {
    dims.validate()?;
    if rates.is_empty() || rates.contains(&0) {
        return Err(Error::Argument("plan needs ≥ 1 block with positive rates".into()));
    }
    let total: f64 = rates.iter().map(|&r| flops_at_rate(r, dims)).sum();
    let baseline = flops_at_rate(1, dims) * rates.len() as f64;
    Ok(ReductionReport {
        config: config.to_string(),
        total_flops: total,
        baseline_flops: baseline,
        reduction_pct: 100.0 * (1.0 - total / baseline),
        asymptotic_pct: asymptotic_reduction(rates),
    })
}

/// `{15, 20, 25} × {2, 4, 8}` converted blocks out of `blocks`, labelled
/// like `15xR4`.
pub fn standard_grid(blocks: usize) -> Vec<(String, Vec<usize>)> {
    let mut grid = Vec::new();
    for count in [15, 20, 25] {
        for rate in [2, 4, 8] {
            let k = count.min(blocks);
            let mut rates = vec![rate; k];
            rates.resize(blocks, 1);
            grid.push((format!("{count}xR{rate}"), rates));
        }
    }
    grid
}
