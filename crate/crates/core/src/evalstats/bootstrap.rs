use super::{EvalError, MetricKind, MetricResult, PredictionSet};
use crate::rng::{derive_seed, Pcg32};

/// PCG stream selector shared by every bootstrap replicate.
pub const BOOTSTRAP_STREAM: u64 = 0x0b00_7571_2a9e_0001;
pub const MAX_REDRAWS: usize = 100;
/// Abort when more than this fraction of all draws is undefined.
pub const MAX_UNDEFINED_FRACTION: f64 = 0.5;

/// Resample index vectors for replicates `0..b`.
///
/// Replicate `r` reads indices from `Pcg32(derive_seed(seed, fold, r))`.
/// A draw on which `defined` fails is discarded and the next `n` indices of
/// the same stream are used. The sequences depend on the labels only through
/// `defined`, so models scored on the same test set share them.
pub fn bootstrap_indices(
    n: usize,
    b: usize,
    seed: u64,
    fold: u64,
    mut defined: impl FnMut(&[usize]) -> bool,
) -> Result<Vec<Vec<usize>>, EvalError> {
    if b == 0 {
        return Err(EvalError::InvalidArgument("bootstrap count must be >= 1".into()));
    }
    if n == 0 {
        return Err(EvalError::Empty);
    }
    let mut out = Vec::with_capacity(b);
    let (mut draws, mut undefined) = (0usize, 0usize);
    for replicate in 0..b {
        let mut rng = Pcg32::new(derive_seed(&[seed, fold, replicate as u64]), BOOTSTRAP_STREAM);
        let mut redraws = 0;
        loop {
            let idx: Vec<usize> = (0..n).map(|_| rng.below(n)).collect();
            draws += 1;
            if defined(&idx) {
                out.push(idx);
                break;
            }
            undefined += 1;
            if redraws == MAX_REDRAWS {
                return Err(EvalError::RedrawLimit { replicate, redraws });
            }
            redraws += 1;
        }
    }
    if undefined as f64 > MAX_UNDEFINED_FRACTION * draws as f64 {
        return Err(EvalError::TooManyUndefined { undefined, draws });
    }
    Ok(out)
}

/// Point metric plus `b` paired bootstrap replicates keyed by
/// `(seed, pred.fold_id)`.
pub fn bootstrap_metric(
    metric: MetricKind,
    pred: &PredictionSet,
    b: usize,
    seed: u64,
) -> Result<MetricResult, EvalError> {
    let point = metric.compute(pred)?;
    let mut values = Vec::with_capacity(b);
    let mut failure = None;
    bootstrap_indices(pred.len(), b, seed, pred.fold_id, |idx| {
        match metric.compute(&pred.select(idx)) {
            Ok(v) => {
                values.push(v);
                true
            }
            Err(EvalError::Undefined(_)) => false,
            Err(e) => {
                failure.get_or_insert(e);
                true
            }
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    let (boot_mean, boot_std) = super::mean_std(&values);
    Ok(MetricResult {
        point,
        boot_mean,
        boot_std,
        replicates: values,
    })
}
