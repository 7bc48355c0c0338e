//! Centralized, local-only, ensemble and model-soup baselines.

use std::time::Instant;

use super::{local_stream, BatchSampler, ClientData, FlConfig, FlError, RoundStats, TrainingHistory, Validator};
use crate::nnet::{forward, loss_and_grad, probabilities, Batch, ModelSpec, ParamVector};
use crate::rng;

/// Plain SGD for `R * K` steps on `data`, drawn in R chunks of K steps with
/// the same mini-batch streams a lone federated client with id 0 would use.
pub fn run_centralized(
    spec: &ModelSpec,
    init: &ParamVector,
    data: &Batch,
    cfg: &FlConfig,
    validate: Option<Validator>,
) -> Result<(ParamVector, TrainingHistory), FlError> {
    cfg.validate()?;
    init.matches_spec(spec)?;
    if data.is_empty() {
        return Err(FlError::EmptyDataset(0));
    }
    let mut w = init.clone();
    let mut history = TrainingHistory::default();
    for round in 0..cfg.rounds {
        let started = Instant::now();
        let mut sampler = BatchSampler::new(data.len(), cfg.batch_size, local_stream(cfg.seed, round, 0));
        let mut start_loss = f64::NAN;
        for step in 0..cfg.local_steps {
            let batch = sampler.next_batch(data);
            let (loss, grad) = loss_and_grad(spec, &w, &batch)?;
            if !loss.is_finite() {
                return Err(FlError::NonFinite { round, step, client: 0 });
            }
            if step == 0 {
                start_loss = loss;
            }
            w.axpy(-cfg.lr, &grad)?;
        }
        history.rounds.push(RoundStats {
            round,
            client_losses: vec![(0, start_loss)],
            global_loss: start_loss,
            val_metric: validate.and_then(|f| f(round, &w)),
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok((w, history))
}

/// Independent centralized training on each client's own data. Client `i`
/// starts from `inits[i]` and draws mini-batches from a seed derived from
/// `(cfg.seed, client_id)`. Results follow the order of `clients`.
pub fn run_local_only(
    spec: &ModelSpec,
    inits: &[ParamVector],
    clients: &[ClientData],
    cfg: &FlConfig,
) -> Result<Vec<(ParamVector, TrainingHistory)>, FlError> {
    if clients.is_empty() {
        return Err(FlError::NoClients);
    }
    if inits.len() != clients.len() {
        return Err(FlError::Config(format!(
            "{} initial models for {} clients",
            inits.len(),
            clients.len()
        )));
    }
    clients
        .iter()
        .zip(inits)
        .map(|(c, init)| {
            let local = FlConfig {
                seed: rng::derive_seed(&[cfg.seed, c.client_id as u64, rng::label_key("local-only")]),
                ..cfg.clone()
            };
            run_centralized(spec, init, &c.data, &local, None).map_err(|e| match e {
                FlError::EmptyDataset(_) => FlError::EmptyDataset(c.client_id),
                other => other,
            })
        })
        .collect()
}

/// Mean of the models' logits, in model order.
pub fn ensemble_logits(spec: &ModelSpec, models: &[ParamVector], batch: &Batch) -> Result<Vec<f64>, FlError> {
    let (first, rest) = models.split_first().ok_or(FlError::NoClients)?;
    let mut acc = forward(spec, first, batch)?;
    for m in rest {
        for (a, z) in acc.iter_mut().zip(forward(spec, m, batch)?) {
            *a += z;
        }
    }
    let n = models.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// Probabilities from the averaged logits of all models.
pub fn ensemble_predict(spec: &ModelSpec, models: &[ParamVector], batch: &Batch) -> Result<Vec<f64>, FlError> {
    Ok(probabilities(spec.output_size, &ensemble_logits(spec, models, batch)?))
}

/// Element-wise mean of parameter vectors sharing one layout.
pub fn model_soup(models: &[ParamVector]) -> Result<ParamVector, FlError> {
    let (first, rest) = models.split_first().ok_or(FlError::NoClients)?;
    let mut acc = first.clone();
    for m in rest {
        acc.axpy(1.0, m)?;
    }
    let n = models.len() as f64;
    acc.values.iter_mut().for_each(|v| *v /= n);
    Ok(acc)
}
