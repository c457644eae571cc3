//! Centralized, cross-device and cross-silo training.
//!
//! A federated round samples clients, broadcasts the global parameters,
//! trains every selected client from them for `local_epochs`, and replaces
//! the global model with the size-weighted mean of the returned parameters.
//!
//! Random streams:
//! - initial parameters: `derive(seed, [INIT])`
//! - client selection in round `e`: `derive(seed, [SELECT, e])`
//! - local training of client `k` in round `e`: `derive(seed, [TRAIN, k, e])`
//!
//! Centralized training uses the stream of client 0 in round 0, so a single
//! client with id 0 trained for one round reproduces it bit for bit.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    build_windows, ClientDataset, ClientId, LabeledWindow, UserHistory, UserId, WindowConfig,
};
use crate::error::{Error, Result};
use crate::metrics::{compute_metrics, ConfusionCounts, MetricsReport, DEFAULT_THRESHOLD};
use crate::neuralnet::{self, bce_loss, Architecture, ModelParameters, TrainConfig};
use crate::seeds::{self, purpose, Rng};

/// Client id used for the pooled dataset of centralized training.
pub const CENTRAL_CLIENT: ClientId = ClientId(0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    Centralized,
    CrossDevice,
    CrossSilo,
}

impl Setting {
    pub const ALL: [Setting; 3] = [
        Setting::Centralized,
        Setting::CrossDevice,
        Setting::CrossSilo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Setting::Centralized => "centralized",
            Setting::CrossDevice => "cross_device",
            Setting::CrossSilo => "cross_silo",
        }
    }

    pub fn default_selection_fraction(self) -> f64 {
        match self {
            Setting::CrossDevice => 0.4,
            Setting::Centralized | Setting::CrossSilo => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FedConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    /// Epochs of the centralized baseline.
    pub centralized_epochs: usize,
    /// Fraction of clients sampled per round; `None` uses the setting's
    /// default (0.4 cross-device, 1.0 otherwise).
    pub selection_fraction: Option<f64>,
    pub setting: Setting,
    pub silo_sizes: Vec<usize>,
    pub model: Architecture,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            rounds: 20,
            local_epochs: 5,
            centralized_epochs: 20,
            selection_fraction: None,
            setting: Setting::CrossDevice,
            silo_sizes: vec![134, 134, 136],
            model: Architecture::default(),
            train: TrainConfig::default(),
            seed: 0,
        }
    }
}

impl FedConfig {
    pub fn fraction(&self) -> f64 {
        self.selection_fraction
            .unwrap_or_else(|| self.setting.default_selection_fraction())
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::config("rounds must be >= 1"));
        }
        let c = self.fraction();
        if !(c > 0.0 && c <= 1.0) {
            return Err(Error::config(format!(
                "selection fraction {c} outside (0, 1]"
            )));
        }
        if self.silo_sizes.is_empty() {
            return Err(Error::config("silo_sizes must not be empty"));
        }
        self.model.validate()?;
        self.train.validate()
    }

    fn local_train(&self, client: ClientId, round: usize) -> TrainConfig {
        TrainConfig {
            epochs: self.local_epochs,
            seed: seeds::derive(
                self.seed,
                &[purpose::TRAIN, u64::from(client.0), round as u64],
            ),
            ..self.train.clone()
        }
    }

    fn initial_params(&self) -> ModelParameters {
        ModelParameters::init(&self.model, seeds::derive(self.seed, &[purpose::INIT]))
    }
}

/// One client per user; users without any window are dropped.
pub fn partition_cross_device(
    train_users: &[UserHistory],
    window: &WindowConfig,
) -> Result<Vec<ClientDataset>> {
    let mut clients = Vec::with_capacity(train_users.len());
    for user in train_users {
        let windows = build_windows(user, window);
        if windows.is_empty() {
            log::info!("user {} has no complete window, not a client", user.user_id);
            continue;
        }
        clients.push(ClientDataset::new(
            ClientId(user.user_id.0),
            windows,
            [user.user_id].into(),
        )?);
    }
    if clients.is_empty() {
        return Err(Error::config("no training user yields a window"));
    }
    Ok(clients)
}

/// Uniform random partition of user ids into groups of exactly `sizes`.
///
/// Ids are sorted before shuffling so only the id set and seed matter.
pub fn assign_silos(users: &[UserId], sizes: &[usize], seed: u64) -> Result<Vec<Vec<UserId>>> {
    let total: usize = sizes.iter().sum();
    if total != users.len() {
        return Err(Error::config(format!(
            "silo sizes {sizes:?} sum to {total}, but there are {} training users",
            users.len()
        )));
    }
    let mut ids = users.to_vec();
    ids.sort();
    let mut rng = seeds::derive_rng(seed, &[purpose::SILO]);
    ids.shuffle(&mut rng);
    let mut rest = ids.as_slice();
    Ok(sizes
        .iter()
        .map(|&n| {
            let (head, tail) = rest.split_at(n);
            rest = tail;
            let mut group = head.to_vec();
            group.sort();
            group
        })
        .collect())
}

/// Groups windows by owner into one client per group. Client `i` monitors
/// `groups[i]`; groups without windows are dropped.
pub fn group_clients(
    windows: Vec<LabeledWindow>,
    groups: &[Vec<UserId>],
) -> Result<Vec<ClientDataset>> {
    let owner: BTreeMap<UserId, usize> = groups
        .iter()
        .enumerate()
        .flat_map(|(g, users)| users.iter().map(move |&u| (u, g)))
        .collect();
    let mut buckets: Vec<Vec<LabeledWindow>> = vec![Vec::new(); groups.len()];
    for w in windows {
        let g = *owner
            .get(&w.user_id)
            .ok_or_else(|| Error::input(format!("window of unassigned user {}", w.user_id)))?;
        buckets[g].push(w);
    }
    let mut clients = Vec::new();
    for (g, (bucket, users)) in buckets.into_iter().zip(groups).enumerate() {
        if bucket.is_empty() {
            log::info!("group {g} holds no window, not a client");
            continue;
        }
        let monitored: BTreeSet<UserId> = users.iter().copied().collect();
        clients.push(ClientDataset::new(ClientId(g as u32), bucket, monitored)?);
    }
    Ok(clients)
}

/// Random user groups of the given sizes; each silo holds its users' windows.
pub fn partition_cross_silo(
    train_users: &[UserHistory],
    sizes: &[usize],
    window: &WindowConfig,
    seed: u64,
) -> Result<Vec<ClientDataset>> {
    let ids: Vec<UserId> = train_users.iter().map(|u| u.user_id).collect();
    let groups = assign_silos(&ids, sizes, seed)?;
    let windows = train_users
        .iter()
        .flat_map(|u| build_windows(u, window))
        .collect();
    let clients = group_clients(windows, &groups)?;
    if clients.is_empty() {
        return Err(Error::config("no silo holds any window"));
    }
    Ok(clients)
}

/// `max(1, round_half_up(c * n))`.
pub fn selection_count(n: usize, c: f64) -> usize {
    ((c * n as f64 + 0.5).floor() as usize).clamp(1, n.max(1))
}

/// Uniform sample without replacement, returned as ascending indices.
pub fn select_clients(n: usize, c: f64, rng: &mut Rng) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let mut picked = index::sample(rng, n, selection_count(n, c)).into_vec();
    picked.sort_unstable();
    picked
}

/// A client's trained parameters and its dataset size.
#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub client_id: ClientId,
    pub params: ModelParameters,
    pub size: usize,
}

/// Size-weighted mean of the updates.
///
/// Summation runs in ascending client id as
/// `ref + sum_k w_k (theta_k - ref)` with `ref` the first update, which makes
/// the single-client and identical-parameter cases exact.
pub fn fedavg_aggregate(updates: &[ClientUpdate]) -> Result<ModelParameters> {
    let mut order: Vec<&ClientUpdate> = updates.iter().collect();
    order.sort_by_key(|u| u.client_id);
    let first = order
        .first()
        .ok_or_else(|| Error::Aggregation("no client updates".into()))?;
    if let Some(u) = order.iter().find(|u| u.size == 0) {
        return Err(Error::Aggregation(format!(
            "client {} reported size 0",
            u.client_id
        )));
    }
    if let Some(u) = order.iter().find(|u| !u.params.same_shape(&first.params)) {
        return Err(Error::Aggregation(format!(
            "client {} sent parameters of a different shape",
            u.client_id
        )));
    }
    let total: f64 = order.iter().map(|u| u.size as f64).sum();
    let weights: Vec<f64> = order.iter().map(|u| u.size as f64 / total).collect();

    let mut out = first.params.clone();
    let reference = first.params.flatten();
    for (u, &w) in order.iter().zip(&weights).skip(1) {
        for ((o, r), v) in out.values_mut().zip(&reference).zip(u.params.values()) {
            *o += w * (v - r);
        }
    }
    // `out` started at ref, which is ref + w_0 (theta_0 - ref) for the first.
    Ok(out)
}

/// Test-set evaluation after a round or epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metrics: MetricsReport,
    pub loss: f64,
}

/// Pooled evaluation at threshold 0.5; `None` for an empty test set.
pub fn evaluate(params: &ModelParameters, windows: &[LabeledWindow]) -> Result<Option<Evaluation>> {
    if windows.is_empty() {
        return Ok(None);
    }
    let probs = neuralnet::predict(params, windows)?;
    let mut counts = ConfusionCounts::default();
    let mut loss = 0.0;
    for (&p, w) in probs.iter().zip(windows) {
        counts.record(p, w.y, DEFAULT_THRESHOLD);
        loss += bce_loss(p, w.y);
    }
    Ok(Some(Evaluation {
        metrics: compute_metrics(counts)?,
        loss: loss / windows.len() as f64,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub selected: Vec<ClientId>,
    pub sizes: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FederatedRun {
    pub params: ModelParameters,
    pub rounds: Vec<RoundLog>,
}

pub fn run_federated(
    clients: &[ClientDataset],
    cfg: &FedConfig,
    test_windows: &[LabeledWindow],
) -> Result<FederatedRun> {
    cfg.validate()?;
    if clients.is_empty() {
        return Err(Error::config("no client left to train"));
    }
    if let Some(c) = clients.iter().find(|c| c.is_empty()) {
        return Err(Error::config(format!("client {} has no data", c.client_id)));
    }
    let ids: BTreeSet<ClientId> = clients.iter().map(|c| c.client_id).collect();
    if ids.len() != clients.len() {
        return Err(Error::config("duplicate client ids"));
    }

    let mut global = cfg.initial_params();
    let mut logs = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let mut rng = seeds::derive_rng(cfg.seed, &[purpose::SELECT, round as u64]);
        let selected = select_clients(clients.len(), cfg.fraction(), &mut rng);
        let updates = selected
            .par_iter()
            .map(|&i| {
                let client = &clients[i];
                let local = cfg.local_train(client.client_id, round);
                Ok(ClientUpdate {
                    client_id: client.client_id,
                    params: neuralnet::train_epochs(&global, &client.windows, &local)?,
                    size: client.len(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        global = fedavg_aggregate(&updates)?;

        let eval = evaluate(&global, test_windows)?;
        log::debug!("round {round}: {} clients", updates.len());
        logs.push(RoundLog {
            round,
            selected: updates.iter().map(|u| u.client_id).collect(),
            sizes: updates.iter().map(|u| u.size).collect(),
            test_loss: eval.as_ref().map(|e| e.loss),
            metrics: eval.map(|e| e.metrics),
        });
    }
    Ok(FederatedRun {
        params: global,
        rounds: logs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 0 is the initialized model; `e` is the state after `e` epochs.
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct CentralizedRun {
    pub params: ModelParameters,
    pub epochs: Vec<EpochLog>,
}

/// Trains on pooled data for `cfg.centralized_epochs`, evaluating the
/// initial model and the model after every epoch.
pub fn run_centralized(
    train_windows: &[LabeledWindow],
    cfg: &FedConfig,
    test_windows: &[LabeledWindow],
) -> Result<CentralizedRun> {
    cfg.validate()?;
    if train_windows.is_empty() {
        return Err(Error::config("empty training set"));
    }
    let train = cfg.local_train(CENTRAL_CLIENT, 0);
    let mut params = cfg.initial_params();
    let log_epoch = |epoch: usize, params: &ModelParameters| -> Result<EpochLog> {
        let eval = evaluate(params, test_windows)?;
        Ok(EpochLog {
            epoch,
            train_loss: neuralnet::local_loss(params, train_windows)?,
            test_loss: eval.as_ref().map(|e| e.loss),
            metrics: eval.map(|e| e.metrics),
        })
    };
    let mut logs = vec![log_epoch(0, &params)?];
    for epoch in 0..cfg.centralized_epochs {
        params = neuralnet::train_epoch(&params, train_windows, &train, epoch)?;
        logs.push(log_epoch(epoch + 1, &params)?);
    }
    Ok(CentralizedRun {
        params,
        epochs: logs,
    })
}
