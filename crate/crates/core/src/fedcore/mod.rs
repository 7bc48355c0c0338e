//! Server-orchestrated federated training and the non-federated baselines.
//!
//! Every round broadcasts the global weights, runs `K` local mini-batch SGD
//! steps on each client (in parallel), then averages the returned weights by
//! sample count. FedProx adds a proximal pull towards the global weights to
//! each local gradient; SCAFFOLD corrects local gradients with client and
//! server control variates.
//!
//! Randomness (mini-batch order) comes from per-client streams keyed by
//! `(seed, round, client_id)`, and aggregation sums clients in ascending id
//! order, so results do not depend on how client jobs are scheduled.

mod baselines;
mod history;

use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

pub use baselines::{ensemble_logits, ensemble_predict, model_soup, run_centralized, run_local_only};
pub use history::{RoundStats, TrainingHistory};

use crate::nnet::{loss_and_grad, Batch, ModelSpec, NnError, ParamVector};
use crate::rng;

#[derive(Debug, Error, PartialEq)]
pub enum FlError {
    #[error("invalid FL config: {0}")]
    Config(String),
    #[error("no clients")]
    NoClients,
    #[error("client {0} has an empty dataset")]
    EmptyDataset(usize),
    #[error("non-finite loss at round {round}, step {step} on client {client}")]
    NonFinite { round: usize, step: usize, client: usize },
    #[error("aggregation over zero samples")]
    ZeroSamples,
    #[error(transparent)]
    Model(#[from] NnError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Algorithm {
    FedAvg,
    FedProx,
    Scaffold,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::FedAvg => "fedavg",
            Algorithm::FedProx => "fedprox",
            Algorithm::Scaffold => "scaffold",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlConfig {
    pub algorithm: Algorithm,
    /// Global rounds R.
    pub rounds: usize,
    /// Local mini-batch steps K per round.
    pub local_steps: usize,
    pub lr: f64,
    /// Proximal weight, only read by FedProx.
    pub prox_mu: f64,
    pub server_lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FlConfig {
    fn default() -> Self {
        FlConfig {
            algorithm: Algorithm::FedAvg,
            rounds: 30,
            local_steps: 20,
            lr: 0.05,
            prox_mu: 0.01,
            server_lr: 1.0,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl FlConfig {
    pub fn validate(&self) -> Result<(), FlError> {
        let bad = |m: &str| Err(FlError::Config(m.into()));
        if self.rounds == 0 {
            return bad("rounds must be >= 1");
        }
        if self.local_steps == 0 {
            return bad("local_steps must be >= 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.prox_mu >= 0.0 && self.prox_mu.is_finite()) {
            return bad("prox_mu must be non-negative");
        }
        if !(self.server_lr > 0.0 && self.server_lr.is_finite()) {
            return bad("server_lr must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        Ok(())
    }
}

/// A client's private training data.
#[derive(Clone, Debug)]
pub struct ClientData {
    pub client_id: usize,
    pub data: Arc<Batch>,
}

impl ClientData {
    pub fn new(client_id: usize, data: Batch) -> Self {
        ClientData {
            client_id,
            data: Arc::new(data),
        }
    }

    pub fn n_samples(&self) -> usize {
        self.data.len()
    }
}

/// Per-client state carried across rounds.
#[derive(Clone, Debug)]
pub struct ClientState {
    pub client: ClientData,
    /// Latest local weights w_i.
    pub params: Option<ParamVector>,
    /// Client control variate c_i (SCAFFOLD only).
    pub control: Option<ParamVector>,
}

#[derive(Clone, Debug)]
pub struct ServerState {
    pub params: ParamVector,
    /// Server control variate c (SCAFFOLD only).
    pub control: Option<ParamVector>,
    pub round: usize,
}

/// What a client sends back after local training.
#[derive(Clone, Debug)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub params: ParamVector,
    pub n_samples: usize,
    /// New client control variate and its change (SCAFFOLD only).
    pub control: Option<(ParamVector, ParamVector)>,
    /// Loss of the incoming global model on this client's first mini-batch.
    pub start_loss: f64,
}

/// Draws mini-batches without replacement, reshuffling when exhausted.
/// A batch at least as large as the dataset is the full dataset in order.
pub(crate) struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
}

impl BatchSampler {
    pub(crate) fn new(n: usize, batch_size: usize, rng: ChaCha8Rng) -> Self {
        let mut s = BatchSampler {
            rng,
            order: (0..n).collect(),
            cursor: n,
            batch_size,
        };
        if batch_size >= n {
            s.cursor = 0;
        }
        s
    }

    pub(crate) fn next_batch(&mut self, data: &Batch) -> Batch {
        let n = self.order.len();
        if self.batch_size >= n {
            return data.clone();
        }
        if self.cursor + self.batch_size > n {
            self.order.sort_unstable();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let idx = &self.order[self.cursor..self.cursor + self.batch_size];
        self.cursor += self.batch_size;
        data.select(idx)
    }
}

pub(crate) fn local_stream(seed: u64, round: usize, client_id: usize) -> ChaCha8Rng {
    rng::stream(&[seed, round as u64, client_id as u64, rng::label_key("local")])
}

/// `base_grad + mu * (w - w_global)`: gradient of the FedProx objective.
pub fn fedprox_gradient(
    base_grad: &ParamVector,
    w: &ParamVector,
    w_global: &ParamVector,
    mu: f64,
) -> Result<ParamVector, FlError> {
    base_grad.same_layout(w)?;
    base_grad.same_layout(w_global)?;
    let mut out = base_grad.clone();
    for ((g, a), b) in out.values.iter_mut().zip(&w.values).zip(&w_global.values) {
        *g += mu * (a - b);
    }
    Ok(out)
}

/// `w - lr * (grad - c_i + c)`
pub fn scaffold_local_step(
    w: &ParamVector,
    grad: &ParamVector,
    c_i: &ParamVector,
    c: &ParamVector,
    lr: f64,
) -> Result<ParamVector, FlError> {
    for other in [grad, c_i, c] {
        w.same_layout(other)?;
    }
    let mut out = w.clone();
    for (((v, g), ci), cs) in out
        .values
        .iter_mut()
        .zip(&grad.values)
        .zip(&c_i.values)
        .zip(&c.values)
    {
        *v -= lr * (g - ci + cs);
    }
    Ok(out)
}

/// Option-II control update:
/// `c_i_new = c_i - c + (w_global - w_local) / (K * lr)`.
/// Returns `(c_i_new, c_i_new - c_i)`.
pub fn scaffold_update_controls(
    w_global: &ParamVector,
    w_local: &ParamVector,
    c_i: &ParamVector,
    c: &ParamVector,
    local_steps: usize,
    lr: f64,
) -> Result<(ParamVector, ParamVector), FlError> {
    let denom = local_steps as f64 * lr;
    if denom == 0.0 || !denom.is_finite() {
        return Err(FlError::Config("K * lr must be non-zero".into()));
    }
    for other in [w_local, c_i, c] {
        w_global.same_layout(other)?;
    }
    let mut new = c_i.clone();
    for (((v, cs), wg), wl) in new
        .values
        .iter_mut()
        .zip(&c.values)
        .zip(&w_global.values)
        .zip(&w_local.values)
    {
        *v = *v - cs + (wg - wl) / denom;
    }
    let delta = new.sub(c_i)?;
    Ok((new, delta))
}

/// Sample-weighted average `sum_i (n_i / sum_j n_j) * w_i`, summed in the
/// order given.
pub fn fedavg_aggregate(updates: &[(&ParamVector, usize)]) -> Result<ParamVector, FlError> {
    let (first, _) = updates.first().ok_or(FlError::NoClients)?;
    let total: usize = updates.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(FlError::ZeroSamples);
    }
    let mut out = first.zeros_like();
    for (w, n) in updates {
        out.axpy(*n as f64 / total as f64, w)?;
    }
    Ok(out)
}

/// K local steps from `w_global` on one client.
pub fn run_local_training(
    spec: &ModelSpec,
    client: &ClientState,
    w_global: &ParamVector,
    c_global: Option<&ParamVector>,
    cfg: &FlConfig,
    round: usize,
) -> Result<ClientUpdate, FlError> {
    let id = client.client.client_id;
    let data = &client.client.data;
    if data.is_empty() {
        return Err(FlError::EmptyDataset(id));
    }
    let mut sampler = BatchSampler::new(data.len(), cfg.batch_size, local_stream(cfg.seed, round, id));
    let zero_controls;
    let controls = if cfg.algorithm == Algorithm::Scaffold {
        zero_controls = w_global.zeros_like();
        Some((
            client.control.as_ref().unwrap_or(&zero_controls),
            c_global.unwrap_or(&zero_controls),
        ))
    } else {
        None
    };

    let mut w = w_global.clone();
    let mut start_loss = f64::NAN;
    for step in 0..cfg.local_steps {
        let batch = sampler.next_batch(data);
        let (loss, grad) = loss_and_grad(spec, &w, &batch)?;
        if !loss.is_finite() {
            return Err(FlError::NonFinite { round, step, client: id });
        }
        if step == 0 {
            start_loss = loss;
        }
        w = match (cfg.algorithm, controls) {
            (Algorithm::FedAvg, _) => {
                w.axpy(-cfg.lr, &grad)?;
                w
            }
            (Algorithm::FedProx, _) => {
                let g = fedprox_gradient(&grad, &w, w_global, cfg.prox_mu)?;
                w.axpy(-cfg.lr, &g)?;
                w
            }
            (Algorithm::Scaffold, Some((c_i, c))) => scaffold_local_step(&w, &grad, c_i, c, cfg.lr)?,
            (Algorithm::Scaffold, None) => unreachable!("controls set for scaffold"),
        };
    }
    if w.values.iter().any(|v| !v.is_finite()) {
        return Err(FlError::NonFinite {
            round,
            step: cfg.local_steps,
            client: id,
        });
    }
    let control = match controls {
        Some((c_i, c)) => Some(scaffold_update_controls(w_global, &w, c_i, c, cfg.local_steps, cfg.lr)?),
        None => None,
    };
    Ok(ClientUpdate {
        client_id: id,
        params: w,
        n_samples: data.len(),
        control,
        start_loss,
    })
}

/// Called with the round index and the global model after each round;
/// returns the validation metric to record, if any.
pub type Validator<'a> = &'a (dyn Fn(usize, &ParamVector) -> Option<f64> + Sync);

/// Runs R rounds of broadcast, parallel local training and aggregation with
/// full client participation.
pub fn run_federated(
    spec: &ModelSpec,
    init: &ParamVector,
    clients: &[ClientData],
    cfg: &FlConfig,
    validate: Option<Validator>,
) -> Result<(ParamVector, TrainingHistory), FlError> {
    let (server, _, history) = run_federated_states(spec, init, clients, cfg, validate, |_, _| {})?;
    Ok((server.params, history))
}

/// Like [`run_federated`] but also returns final client states, and calls
/// `on_round(server, clients)` after every round.
pub fn run_federated_states(
    spec: &ModelSpec,
    init: &ParamVector,
    clients: &[ClientData],
    cfg: &FlConfig,
    validate: Option<Validator>,
    mut on_round: impl FnMut(&ServerState, &[ClientState]),
) -> Result<(ServerState, Vec<ClientState>, TrainingHistory), FlError> {
    cfg.validate()?;
    if clients.is_empty() {
        return Err(FlError::NoClients);
    }
    init.matches_spec(spec)?;
    if let Some(c) = clients.iter().find(|c| c.data.is_empty()) {
        return Err(FlError::EmptyDataset(c.client_id));
    }
    let mut order: Vec<usize> = (0..clients.len()).collect();
    order.sort_by_key(|&i| clients[i].client_id);
    let scaffold = cfg.algorithm == Algorithm::Scaffold;
    let mut states: Vec<ClientState> = order
        .iter()
        .map(|&i| ClientState {
            client: clients[i].clone(),
            params: None,
            control: scaffold.then(|| init.zeros_like()),
        })
        .collect();
    let mut server = ServerState {
        params: init.clone(),
        control: scaffold.then(|| init.zeros_like()),
        round: 0,
    };
    let mut history = TrainingHistory::default();

    for round in 0..cfg.rounds {
        let started = Instant::now();
        let updates: Vec<ClientUpdate> = states
            .par_iter()
            .map(|s| run_local_training(spec, s, &server.params, server.control.as_ref(), cfg, round))
            .collect::<Result<_, _>>()?;

        let weighted: Vec<(&ParamVector, usize)> = updates.iter().map(|u| (&u.params, u.n_samples)).collect();
        let average = fedavg_aggregate(&weighted)?;
        if cfg.server_lr == 1.0 {
            server.params = average;
        } else {
            let step = average.sub(&server.params)?;
            server.params.axpy(cfg.server_lr, &step)?;
        }
        if let Some(c) = server.control.as_mut() {
            let inv = 1.0 / states.len() as f64;
            for u in &updates {
                let (_, delta) = u.control.as_ref().expect("scaffold updates carry controls");
                c.axpy(inv, delta)?;
            }
        }
        for (s, u) in states.iter_mut().zip(&updates) {
            s.params = Some(u.params.clone());
            if let Some((c_new, _)) = &u.control {
                s.control = Some(c_new.clone());
            }
        }
        server.round = round + 1;

        let client_losses: Vec<(usize, f64)> = updates.iter().map(|u| (u.client_id, u.start_loss)).collect();
        let total: usize = updates.iter().map(|u| u.n_samples).sum();
        let global_loss = updates
            .iter()
            .map(|u| u.start_loss * u.n_samples as f64 / total as f64)
            .sum();
        let val_metric = validate.and_then(|f| f(round, &server.params));
        history.rounds.push(RoundStats {
            round,
            client_losses,
            global_loss,
            val_metric,
            seconds: started.elapsed().as_secs_f64(),
        });
        on_round(&server, &states);
    }
    Ok((server, states, history))
}
