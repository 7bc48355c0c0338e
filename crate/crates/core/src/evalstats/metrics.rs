use super::{EvalError, PredictionSet};

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
/// Single-column scores are thresholded at 0.5.
pub fn accuracy(pred: &PredictionSet) -> f64 {
    let correct = (0..pred.len())
        .filter(|&i| {
            let row = pred.row(i);
            let guess = if pred.columns == 1 {
                usize::from(row[0] >= 0.5)
            } else {
                let mut best = 0;
                for (k, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = k;
                    }
                }
                best
            };
            guess == pred.labels[i]
        })
        .count();
    correct as f64 / pred.len() as f64
}

/// Twice the Mann-Whitney U of the positives, as an exact integer, via
/// midranks: `2U = sum over positives of 2*midrank - n1*(n1+1)`.
fn doubled_u(scores: &[f64], positive: &[bool]) -> (u128, u128, u128) {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j share midrank (i+1+j)/2.
        let twice_mid = (i + 1 + j) as u128;
        let pos_in_group = order[i..j].iter().filter(|&&k| positive[k]).count() as u128;
        twice_rank_sum += twice_mid * pos_in_group;
        i = j;
    }
    let n1 = positive.iter().filter(|&&p| p).count() as u128;
    let n0 = positive.len() as u128 - n1;
    (twice_rank_sum - n1 * (n1 + 1), n1, n0)
}

/// Mann-Whitney AUC: (concordant + 0.5 * tied) / (n_pos * n_neg).
pub fn auc_binary(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch(scores.len(), labels.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(EvalError::InvalidArgument("NaN score".into()));
    }
    let (u2, n1, n0) = doubled_u(scores, labels);
    if n1 == 0 || n0 == 0 {
        return Err(EvalError::Undefined("AUC needs both classes".into()));
    }
    Ok(u2 as f64 / (2 * n1 * n0) as f64)
}

fn present_classes(pred: &PredictionSet) -> Vec<usize> {
    let mut counts = vec![0usize; pred.classes()];
    for &l in &pred.labels {
        counts[l] += 1;
    }
    (0..counts.len()).filter(|&k| counts[k] > 0).collect()
}

/// Macro one-vs-rest AUC over the classes present in the labels.
pub fn auc_ovr(pred: &PredictionSet) -> Result<f64, EvalError> {
    let present = present_classes(pred);
    if present.len() < 2 {
        return Err(EvalError::Undefined("one-vs-rest AUC needs two classes present".into()));
    }
    let mut total = 0.0;
    for &k in &present {
        let labels: Vec<bool> = pred.labels.iter().map(|&l| l == k).collect();
        total += auc_binary(&pred.class_scores(k), &labels)?;
    }
    Ok(total / present.len() as f64)
}

/// Macro one-vs-one AUC: mean over class pairs of the two restricted
/// binary AUCs averaged. Pairs with a missing class are skipped.
pub fn auc_ovo(pred: &PredictionSet) -> Result<f64, EvalError> {
    let present = present_classes(pred);
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (a, &i) in present.iter().enumerate() {
        for &j in &present[a + 1..] {
            let rows: Vec<usize> = (0..pred.len())
                .filter(|&r| pred.labels[r] == i || pred.labels[r] == j)
                .collect();
            let sub = pred.select(&rows);
            let is_i: Vec<bool> = sub.labels.iter().map(|&l| l == i).collect();
            let is_j: Vec<bool> = sub.labels.iter().map(|&l| l == j).collect();
            let a_ij = auc_binary(&sub.class_scores(i), &is_i)?;
            let a_ji = auc_binary(&sub.class_scores(j), &is_j)?;
            total += (a_ij + a_ji) / 2.0;
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Err(EvalError::Undefined("one-vs-one AUC needs two classes present".into()));
    }
    Ok(total / pairs as f64)
}
