use super::{wilcoxon_signed_rank, EvalError};

/// Models with `p_vs_best` above this are in the best group.
pub const BEST_GROUP_THRESHOLD: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonCell {
    pub model_id: String,
    pub mean: f64,
    pub std: f64,
    pub p_vs_best: f64,
    pub is_best_group: bool,
}

/// Mean and sample standard deviation; the deviation of a single value is 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// Sample mean and standard deviation over folds.
pub fn cv_aggregate(per_fold: &[f64]) -> Result<(f64, f64), EvalError> {
    if per_fold.len() < 2 {
        return Err(EvalError::InvalidArgument(format!(
            "cross-validation needs >= 2 folds, got {}",
            per_fold.len()
        )));
    }
    Ok(mean_std(per_fold))
}

/// Compares every model against the one with the highest mean (first on
/// ties) using paired Wilcoxon tests. The best model gets `p = 1`.
pub fn significance_groups(cells: &[(String, Vec<f64>)], threshold: f64) -> Result<Vec<ComparisonCell>, EvalError> {
    if cells.len() < 2 {
        return Err(EvalError::InvalidArgument("need at least two models".into()));
    }
    let n = cells[0].1.len();
    if let Some((_, v)) = cells.iter().find(|(_, v)| v.len() != n) {
        return Err(EvalError::LengthMismatch(n, v.len()));
    }
    let stats: Vec<(f64, f64)> = cells.iter().map(|(_, v)| mean_std(v)).collect();
    let mut best = 0;
    for (i, s) in stats.iter().enumerate() {
        if s.0 > stats[best].0 {
            best = i;
        }
    }
    cells
        .iter()
        .zip(&stats)
        .enumerate()
        .map(|(i, ((model, values), &(mean, std)))| {
            let p = if i == best {
                1.0
            } else {
                wilcoxon_signed_rank(&cells[best].1, values)?
            };
            Ok(ComparisonCell {
                model_id: model.clone(),
                mean,
                std,
                p_vs_best: p,
                is_best_group: p > threshold,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(name: &str, v: &[f64]) -> (String, Vec<f64>) {
        (name.to_owned(), v.to_vec())
    }

    #[test]
    fn cv_examples() {
        let (m, s) = cv_aggregate(&[0.7, 0.7, 0.7]).unwrap();
        assert!((m - 0.7).abs() < 1e-15 && s < 1e-15);
        assert_eq!(cv_aggregate(&[0.5, 0.5]).unwrap(), (0.5, 0.0));
        assert_eq!(cv_aggregate(&[0.0, 1.0]).unwrap().0, 0.5);
        let (m, s) = cv_aggregate(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(m, 3.0);
        assert!((s - 2.5f64.sqrt()).abs() < 1e-15);
        assert!(cv_aggregate(&[1.0]).is_err());
    }

    #[test]
    fn identical_models_share_the_best_group() {
        let v = [0.7, 0.8, 0.75];
        let out = significance_groups(&[cell("a", &v), cell("b", &v)], BEST_GROUP_THRESHOLD).unwrap();
        assert!(out.iter().all(|c| c.is_best_group && c.p_vs_best == 1.0));
    }

    #[test]
    fn dominated_model_over_five_folds_is_excluded() {
        let best = [0.80, 0.78, 0.82, 0.79, 0.81];
        let worse = [0.70, 0.71, 0.72, 0.69, 0.75];
        let out = significance_groups(&[cell("w", &worse), cell("b", &best)], BEST_GROUP_THRESHOLD).unwrap();
        assert_eq!(out[1].p_vs_best, 1.0);
        assert_eq!(out[0].p_vs_best, 0.0625);
        assert!(!out[0].is_best_group && out[1].is_best_group);
    }

    #[test]
    fn group_of_two_out_of_three() {
        let best = [0.80, 0.78, 0.82, 0.79, 0.81];
        // Mixed signs against the best: exact p well above the threshold.
        let close = [0.81, 0.77, 0.83, 0.78, 0.80];
        let far = [0.60, 0.61, 0.62, 0.59, 0.58];
        let p_close = wilcoxon_signed_rank(&best, &close).unwrap();
        assert!(p_close > BEST_GROUP_THRESHOLD);
        let out = significance_groups(
            &[cell("best", &best), cell("close", &close), cell("far", &far)],
            BEST_GROUP_THRESHOLD,
        )
        .unwrap();
        let group: Vec<&str> = out.iter().filter(|c| c.is_best_group).map(|c| c.model_id.as_str()).collect();
        assert_eq!(group, vec!["best", "close"]);
        assert_eq!(out[1].p_vs_best, p_close);
    }

    #[test]
    fn rejects_single_model_and_ragged_input() {
        assert!(significance_groups(&[cell("a", &[1.0])], 0.1).is_err());
        assert!(significance_groups(&[cell("a", &[1.0]), cell("b", &[1.0, 2.0])], 0.1).is_err());
    }
}
