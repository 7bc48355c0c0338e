use statrs::function::erf::erfc;

use super::EvalError;

/// Largest number of non-zero differences handled by exact enumeration.
pub const EXACT_MAX_PAIRS: usize = 20;

/// Two-sided Wilcoxon signed-rank p-value for paired samples.
///
/// Zero differences are dropped and tied magnitudes get midranks. Up to
/// [`EXACT_MAX_PAIRS`] remaining pairs the null distribution over all sign
/// assignments is computed exactly; beyond that a tie-corrected normal
/// approximation with continuity correction is used. All-zero differences
/// give `p = 1`.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64]) -> Result<f64, EvalError> {
    if x.len() != y.len() {
        return Err(EvalError::LengthMismatch(x.len(), y.len()));
    }
    if x.is_empty() {
        return Err(EvalError::InvalidArgument("no pairs".into()));
    }
    let diffs: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|d| *d != 0.0).collect();
    if diffs.iter().any(|d| d.is_nan()) {
        return Err(EvalError::InvalidArgument("NaN difference".into()));
    }
    if diffs.is_empty() {
        return Ok(1.0);
    }
    let twice_ranks = doubled_midranks(&diffs);
    let total: u64 = twice_ranks.iter().sum();
    let t_pos: u64 = diffs
        .iter()
        .zip(&twice_ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let p = if diffs.len() <= EXACT_MAX_PAIRS {
        exact_p(&twice_ranks, total, t_pos)
    } else {
        normal_p(&twice_ranks, total, t_pos)
    };
    Ok(p.min(1.0))
}

/// `2 * midrank` of each |d|, as integers.
fn doubled_midranks(diffs: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..diffs.len()).collect();
    order.sort_by(|&a, &b| diffs[a].abs().total_cmp(&diffs[b].abs()));
    let mut out = vec![0u64; diffs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && diffs[order[j]].abs() == diffs[order[i]].abs() {
            j += 1;
        }
        for &k in &order[i..j] {
            out[k] = (i + 1 + j) as u64;
        }
        i = j;
    }
    out
}

/// P(|2T - S| >= |2T_obs - S|) under uniformly random signs, where T is the
/// (doubled) positive rank sum. Counts are exact integers.
fn exact_p(twice_ranks: &[u64], total: u64, t_obs: u64) -> f64 {
    let total = total as usize;
    let mut counts = vec![0u64; total + 1];
    counts[0] = 1;
    for &r in twice_ranks {
        let r = r as usize;
        for s in (r..=total).rev() {
            counts[s] += counts[s - r];
        }
    }
    let observed = (2 * t_obs as i64 - total as i64).abs();
    let extreme: u64 = counts
        .iter()
        .enumerate()
        .filter(|(s, _)| (2 * *s as i64 - total as i64).abs() >= observed)
        .map(|(_, c)| c)
        .sum();
    extreme as f64 / (1u64 << twice_ranks.len()) as f64
}

fn normal_p(twice_ranks: &[u64], total: u64, t_obs: u64) -> f64 {
    // In rank units: mean S/2, variance sum(r^2)/4 (midranks give the tie
    // correction exactly).
    let t = t_obs as f64 / 2.0;
    let mean = total as f64 / 4.0;
    let var: f64 = twice_ranks.iter().map(|&r| (r as f64 / 2.0).powi(2)).sum::<f64>() / 4.0;
    let z = ((t - mean).abs() - 0.5).max(0.0) / var.sqrt();
    erfc(z / std::f64::consts::SQRT_2)
}
