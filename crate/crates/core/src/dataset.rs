//! Session histories, windowing and labeling, client datasets.
//!
//! A user history is a dense sequence of per-session acquisition counts (two
//! sessions per week). Every index `i` with `i + T + p <= len` yields one
//! window: the `T` counts starting at `i` form the features, and the label is
//! 1 when the following `p` sessions hold at least `adherence_threshold`
//! acquisitions in total.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UserId(pub u32);

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClientId(pub u32);

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Chronological acquisition counts of one user, one entry per session.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserHistory {
    pub user_id: UserId,
    pub counts: Vec<u32>,
}

impl UserHistory {
    pub fn new(user_id: UserId, counts: Vec<u32>) -> Self {
        Self { user_id, counts }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    /// Window length in sessions.
    pub window: usize,
    /// Prediction horizon in sessions.
    pub horizon: usize,
    /// Minimum acquisitions over the horizon for label 1.
    pub adherence_threshold: u32,
    /// Feed `ln(1 + count)` instead of raw counts to the network.
    pub normalize: bool,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            window: 12,
            horizon: 3,
            adherence_threshold: 2,
            normalize: false,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::config("window length must be >= 1"));
        }
        if self.horizon == 0 {
            return Err(Error::config("prediction horizon must be >= 1"));
        }
        if self.adherence_threshold == 0 {
            return Err(Error::config("adherence threshold must be >= 1"));
        }
        Ok(())
    }

    /// Number of windows a history of `len` sessions produces.
    pub fn window_count(&self, len: usize) -> usize {
        (len + 1).saturating_sub(self.window + self.horizon)
    }
}

/// One training or test example.
///
/// `x` holds the per-session counts cast to reals (or their `ln(1 + c)`
/// transform when normalization is on). Synthetic samples produced by
/// oversampling carry non-integral features and are attributed to the user
/// whose window anchored the interpolation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledWindow {
    pub user_id: UserId,
    pub x: Vec<f64>,
    pub y: u8,
}

impl LabeledWindow {
    pub fn new(user_id: UserId, x: Vec<f64>, y: u8) -> Self {
        debug_assert!(y <= 1);
        Self { user_id, x, y }
    }
}

/// Counts of label-0 and label-1 windows.
pub fn class_counts(windows: &[LabeledWindow]) -> [usize; 2] {
    windows.iter().fold([0, 0], |mut acc, w| {
        acc[usize::from(w.y)] += 1;
        acc
    })
}

/// The local dataset of one federation participant.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub client_id: ClientId,
    pub windows: Vec<LabeledWindow>,
    pub monitored_users: BTreeSet<UserId>,
}

impl ClientDataset {
    /// Fails when a window belongs to a user the client does not monitor.
    pub fn new(
        client_id: ClientId,
        windows: Vec<LabeledWindow>,
        monitored_users: BTreeSet<UserId>,
    ) -> Result<Self> {
        if let Some(w) = windows
            .iter()
            .find(|w| !monitored_users.contains(&w.user_id))
        {
            return Err(Error::input(format!(
                "client {client_id} holds a window of unmonitored user {}",
                w.user_id
            )));
        }
        Ok(Self {
            client_id,
            windows,
            monitored_users,
        })
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn class_counts(&self) -> [usize; 2] {
        class_counts(&self.windows)
    }
}

/// Label for a horizon of future session counts.
pub fn label(future: &[u32], horizon: usize, threshold: u32) -> Result<u8> {
    if future.len() != horizon {
        return Err(Error::input(format!(
            "label expects {horizon} future sessions, got {}",
            future.len()
        )));
    }
    let total: u64 = future.iter().map(|&c| u64::from(c)).sum();
    Ok(u8::from(total >= u64::from(threshold)))
}

fn feature(count: u32, normalize: bool) -> f64 {
    let c = f64::from(count);
    if normalize {
        c.ln_1p()
    } else {
        c
    }
}

/// Slides a stride-1 window over the history. Short histories yield nothing.
pub fn build_windows(history: &UserHistory, cfg: &WindowConfig) -> Vec<LabeledWindow> {
    let (t, p) = (cfg.window, cfg.horizon);
    let n = cfg.window_count(history.counts.len());
    (0..n)
        .map(|i| {
            let x = history.counts[i..i + t]
                .iter()
                .map(|&c| feature(c, cfg.normalize))
                .collect();
            let y = label(
                &history.counts[i + t..i + t + p],
                p,
                cfg.adherence_threshold,
            )
            .expect("horizon slice has length p");
            LabeledWindow::new(history.user_id, x, y)
        })
        .collect()
}

/// Windows of every history, in input order.
pub fn build_all_windows(histories: &[UserHistory], cfg: &WindowConfig) -> Vec<LabeledWindow> {
    histories
        .iter()
        .flat_map(|h| build_windows(h, cfg))
        .collect()
}

/// Keeps clients holding at least `min_per_class` windows of each label.
pub fn exclude_low_info(clients: Vec<ClientDataset>, min_per_class: usize) -> Vec<ClientDataset> {
    clients
        .into_iter()
        .filter(|c| {
            let [neg, pos] = c.class_counts();
            neg >= min_per_class && pos >= min_per_class
        })
        .collect()
}

/// Draws `n_holdout` users uniformly without replacement as the test set.
///
/// Users are sorted by id before sampling so the split depends only on the
/// set of ids and the seed. Both halves are returned in ascending id order.
pub fn split_holdout_users(
    users: &[UserHistory],
    n_holdout: usize,
    seed: u64,
) -> Result<(Vec<UserHistory>, Vec<UserHistory>)> {
    if n_holdout >= users.len() && n_holdout > 0 {
        return Err(Error::config(format!(
            "cannot hold out {n_holdout} of {} users",
            users.len()
        )));
    }
    let mut sorted: Vec<&UserHistory> = users.iter().collect();
    sorted.sort_by_key(|u| u.user_id);
    if let Some(pair) = sorted.windows(2).find(|p| p[0].user_id == p[1].user_id) {
        return Err(Error::input(format!(
            "duplicate user id {}",
            pair[0].user_id
        )));
    }

    let mut rng = seeds::derive_rng(seed, &[seeds::purpose::SPLIT]);
    let picked: BTreeSet<usize> = index::sample(&mut rng, sorted.len(), n_holdout)
        .into_iter()
        .collect();

    let (test, train): (Vec<_>, Vec<_>) = sorted
        .into_iter()
        .enumerate()
        .partition(|(i, _)| picked.contains(i));
    Ok((
        train.into_iter().map(|(_, u)| u.clone()).collect(),
        test.into_iter().map(|(_, u)| u.clone()).collect(),
    ))
}

#[derive(Debug, Deserialize, Serialize)]
struct HistoryRow {
    user_id: u32,
    session_index: usize,
    acquisition_count: u32,
}

/// Parses `user_id,session_index,acquisition_count` rows (header required).
///
/// Rows may appear in any order, but each user's session indices must form
/// the dense range `0..n`.
pub fn read_histories<R: Read>(reader: R) -> Result<Vec<UserHistory>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let expected = ["user_id", "session_index", "acquisition_count"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Format(format!(
            "expected header {}, found {}",
            expected.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }

    let mut by_user: BTreeMap<u32, BTreeMap<usize, u32>> = BTreeMap::new();
    for row in rdr.deserialize() {
        let row: HistoryRow = row?;
        let sessions = by_user.entry(row.user_id).or_default();
        if sessions
            .insert(row.session_index, row.acquisition_count)
            .is_some()
        {
            return Err(Error::Format(format!(
                "user {} has session {} twice",
                row.user_id, row.session_index
            )));
        }
    }

    by_user
        .into_iter()
        .map(|(id, sessions)| {
            if let Some((pos, (&idx, _))) = sessions
                .iter()
                .enumerate()
                .find(|(pos, (idx, _))| pos != *idx)
            {
                return Err(Error::Format(format!(
                    "user {id}: session indices not dense (expected {pos}, found {idx})"
                )));
            }
            Ok(UserHistory::new(
                UserId(id),
                sessions.into_values().collect(),
            ))
        })
        .collect()
}

pub fn read_histories_file(path: &Path) -> Result<Vec<UserHistory>> {
    read_histories(std::fs::File::open(path)?)
}

pub fn write_histories<W: Write>(writer: W, histories: &[UserHistory]) -> Result<()> {
    // Header comes from the serialized field names.
    let mut wtr = csv::Writer::from_writer(writer);
    for h in histories {
        for (i, c) in h.counts.iter().enumerate() {
            wtr.serialize(HistoryRow {
                user_id: h.user_id.0,
                session_index: i,
                acquisition_count: *c,
            })?;
        }
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_histories_file(path: &Path, histories: &[UserHistory]) -> Result<()> {
    write_histories(
        std::io::BufWriter::new(std::fs::File::create(path)?),
        histories,
    )
}

/// Debug dump: `user_id, x_0..x_{T-1}, y`.
pub fn write_windows<W: Write>(writer: W, windows: &[LabeledWindow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let dim = windows.first().map_or(0, |w| w.x.len());
    let mut header = vec!["user_id".to_string()];
    header.extend((0..dim).map(|i| format!("x_{i}")));
    header.push("y".into());
    wtr.write_record(&header)?;
    for w in windows {
        let mut rec = vec![w.user_id.to_string()];
        rec.extend(w.x.iter().map(|v| v.to_string()));
        rec.push(w.y.to_string());
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}
