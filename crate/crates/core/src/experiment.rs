//! Experiment grid: configuration, presets and the `generate`, `run` and
//! `report` commands.
//!
//! Configuration is TOML. A file is layered over a preset, so it only needs
//! the keys it changes. Output layout under `output_dir`:
//!
//! ```text
//! histories.csv, calibration.json          generate
//! cells/<setting>/<scenario>/seed_<i>.*    run: .json summary, .jsonl log, .ckpt model
//! grid.csv, grid.json                      run
//! report/fig_<setting>.csv, report/gm.csv  report
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    build_all_windows, build_windows, exclude_low_info, read_histories_file, split_holdout_users,
    write_histories_file, ClientDataset, ClientId, LabeledWindow, UserHistory, UserId,
    WindowConfig,
};
use crate::error::{Error, Result};
use crate::federation::{self, assign_silos, group_clients, FedConfig, Setting};
use crate::metrics::{aggregate_seeds, Metric, MetricsReport, SeedAggregate};
use crate::neuralnet::{save_checkpoint, ModelParameters};
use crate::resampling::{resample, ResampleMethod, ResampleSpec};
use crate::seeds::{self, purpose};
use crate::synthgen::{calibration_report, generate_population, CalibrationReport, SynthConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Raw,
    #[serde(rename = "drop_users_5")]
    DropUsers5,
    #[serde(rename = "drop_users_10")]
    DropUsers10,
    Oversample,
    Undersample,
    OverUnder,
}

impl Scenario {
    pub const ALL: [Scenario; 6] = [
        Scenario::Raw,
        Scenario::DropUsers5,
        Scenario::DropUsers10,
        Scenario::Oversample,
        Scenario::Undersample,
        Scenario::OverUnder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Raw => "raw",
            Scenario::DropUsers5 => "drop_users_5",
            Scenario::DropUsers10 => "drop_users_10",
            Scenario::Oversample => "oversample",
            Scenario::Undersample => "undersample",
            Scenario::OverUnder => "over_under",
        }
    }

    /// Per-class window minimum for user exclusion.
    pub fn min_per_class(self) -> Option<usize> {
        match self {
            Scenario::DropUsers5 => Some(5),
            Scenario::DropUsers10 => Some(10),
            _ => None,
        }
    }

    pub fn method(self) -> ResampleMethod {
        match self {
            Scenario::Oversample => ResampleMethod::KmeansSmote,
            Scenario::Undersample => ResampleMethod::Undersample,
            Scenario::OverUnder => ResampleMethod::SmoteEnn,
            _ => ResampleMethod::None,
        }
    }
}

/// Where resampling runs in the federated settings.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleScope {
    /// Each client resamples its own windows.
    #[default]
    Client,
    /// The pooled training set is resampled before it is split into clients.
    Pooled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// 60 users, 10 held out, 3 seeds, 10 rounds.
    Desk,
    /// Full scale: 454 users, 50 held out, 10 seeds, 20 rounds.
    Paper,
}

impl Preset {
    pub fn config(self) -> ExperimentConfig {
        let full = ExperimentConfig::default();
        match self {
            Preset::Paper => full,
            Preset::Desk => ExperimentConfig {
                n_seeds: 3,
                holdout_users: 10,
                synth: SynthConfig {
                    n_users: 60,
                    ..full.synth.clone()
                },
                fed: FedConfig {
                    rounds: 10,
                    centralized_epochs: 10,
                    silo_sizes: vec![16, 17, 17],
                    ..full.fed.clone()
                },
                ..full
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; run `i` uses `derive(seed, [RUN, i])`.
    pub seed: u64,
    pub n_seeds: usize,
    pub holdout_users: usize,
    pub settings: Vec<Setting>,
    pub scenarios: Vec<Scenario>,
    pub resample_scope: ResampleScope,
    pub output_dir: PathBuf,
    /// History CSV for `run`; defaults to `<output_dir>/histories.csv`,
    /// generated when missing.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub histories: Option<PathBuf>,
    /// Generator settings. Its window table is replaced by `window`.
    pub synth: SynthConfig,
    pub window: WindowConfig,
    pub fed: FedConfig,
    /// Resampling hyperparameters. `method` may stay `none`; otherwise it
    /// must agree with every resampling scenario in the grid.
    pub resample: ResampleSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_seeds: 10,
            holdout_users: 50,
            settings: Setting::ALL.to_vec(),
            scenarios: Scenario::ALL.to_vec(),
            resample_scope: ResampleScope::Client,
            output_dir: PathBuf::from("results"),
            histories: None,
            synth: SynthConfig::default(),
            window: WindowConfig::default(),
            fed: FedConfig::default(),
            resample: ResampleSpec::default(),
        }
    }
}

fn merge_tables(base: &mut toml::Table, over: toml::Table) {
    for (key, value) in over {
        if let toml::Value::Table(sub) = &value {
            if let Some(toml::Value::Table(target)) = base.get_mut(&key) {
                merge_tables(target, sub.clone());
                continue;
            }
        }
        base.insert(key, value);
    }
}

impl ExperimentConfig {
    /// The preset, overlaid with the TOML file if given, then validated.
    pub fn load(preset: Preset, path: Option<&Path>) -> Result<Self> {
        let cfg = match path {
            None => preset.config(),
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| {
                    Error::config(format!("cannot read config {}: {e}", path.display()))
                })?;
                Self::from_toml_over(preset, &text)?
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_over(preset: Preset, text: &str) -> Result<Self> {
        let over: toml::Table =
            toml::from_str(text).map_err(|e| Error::config(format!("invalid config: {e}")))?;
        let mut base = toml::Table::try_from(preset.config())
            .map_err(|e| Error::config(format!("cannot encode preset: {e}")))?;
        merge_tables(&mut base, over);
        toml::Value::Table(base)
            .try_into()
            .map_err(|e| Error::config(format!("invalid config: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot encode config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_seeds == 0 {
            return Err(Error::config("n_seeds must be >= 1"));
        }
        if self.holdout_users == 0 {
            return Err(Error::config("holdout_users must be >= 1"));
        }
        if self.settings.is_empty() || self.scenarios.is_empty() {
            return Err(Error::config("settings and scenarios must not be empty"));
        }
        if has_duplicates(&self.settings) || has_duplicates(&self.scenarios) {
            return Err(Error::config("settings and scenarios must not repeat"));
        }
        self.window.validate()?;
        self.synth.validate()?;
        self.fed.validate()?;
        self.resample.validate()?;
        if self.fed.model.input != self.window.window {
            return Err(Error::config(format!(
                "model input {} differs from window length {}",
                self.fed.model.input, self.window.window
            )));
        }
        let pinned = self.resample.method;
        if pinned != ResampleMethod::None {
            if let Some(s) = self
                .scenarios
                .iter()
                .find(|s| s.method() != ResampleMethod::None && s.method() != pinned)
            {
                return Err(Error::config(format!(
                    "scenario {} resamples with {:?}, but resample.method is {:?}",
                    s.name(),
                    s.method(),
                    pinned
                )));
            }
        }
        Ok(())
    }

    pub fn run_seed(&self, index: usize) -> u64 {
        seeds::derive(self.seed, &[purpose::RUN, index as u64])
    }

    pub fn histories_path(&self) -> PathBuf {
        self.histories
            .clone()
            .unwrap_or_else(|| self.output_dir.join("histories.csv"))
    }

    fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            window: self.window.clone(),
            ..self.synth.clone()
        }
    }
}

fn has_duplicates<T: Ord>(items: &[T]) -> bool {
    let mut sorted: Vec<&T> = items.iter().collect();
    sorted.sort();
    sorted.windows(2).any(|p| p[0] == p[1])
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)
        .map_err(|e| Error::config(format!("cannot create {}: {e}", dir.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Generates the synthetic population and writes the history CSV and the
/// calibration report.
pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<CalibrationReport> {
    let synth = cfg.synth_config();
    let histories = generate_population(&synth)?;
    let report = calibration_report(&histories, &cfg.window);
    let path = cfg.histories_path();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    create_dir(&cfg.output_dir)?;
    write_histories_file(&path, &histories)?;
    write_json(&cfg.output_dir.join("calibration.json"), &report)?;
    log::info!(
        "{} users, {} windows, label-0 fraction {:.4}",
        report.n_users,
        report.n_windows,
        report.label0_fraction
    );
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Failed,
}

/// Outcome of one (setting, scenario, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub setting: Setting,
    pub scenario: Scenario,
    pub seed_index: usize,
    pub seed: u64,
    pub status: CellStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Clients holding windows before the scenario is applied.
    pub clients_total: usize,
    /// Clients left to train after exclusion and resampling.
    pub clients_participating: usize,
    /// Resampling calls that fell back to the untreated windows.
    pub resample_fallbacks: usize,
    pub train_windows: usize,
    pub test_windows: usize,
    /// Test metrics of the final model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsReport>,
}

#[derive(Debug, Default)]
struct Prepared {
    clients: Vec<ClientDataset>,
    clients_total: usize,
    fallbacks: usize,
}

fn client_groups(
    setting: Setting,
    train_users: &[UserHistory],
    silo_sizes: &[usize],
    seed: u64,
) -> Result<Vec<Vec<UserId>>> {
    let ids: Vec<UserId> = train_users.iter().map(|u| u.user_id).collect();
    Ok(match setting {
        Setting::Centralized => vec![ids],
        Setting::CrossDevice => ids.into_iter().map(|id| vec![id]).collect(),
        Setting::CrossSilo => assign_silos(&ids, silo_sizes, seed)?,
    })
}

/// Resamples with the untreated windows as fallback for data the method
/// cannot handle (a single class, too few minority samples).
fn resample_or_keep(
    windows: Vec<LabeledWindow>,
    spec: &ResampleSpec,
    who: &str,
) -> Result<(Vec<LabeledWindow>, bool)> {
    match resample(&windows, spec) {
        Ok(out) => Ok((out, false)),
        Err(Error::Imbalance(msg)) => {
            log::debug!("{who}: {msg}; kept untreated");
            Ok((windows, true))
        }
        Err(e) => Err(e),
    }
}

/// Builds the clients of one cell: partition, user exclusion, resampling.
fn prepare_clients(
    cfg: &ExperimentConfig,
    setting: Setting,
    scenario: Scenario,
    train_users: &[UserHistory],
    seed: u64,
) -> Result<Prepared> {
    let groups = client_groups(setting, train_users, &cfg.fed.silo_sizes, seed)?;

    // Exclusion works on users, the data owners, before any pooling.
    let users: Vec<ClientDataset> = train_users
        .iter()
        .map(|u| {
            ClientDataset::new(
                ClientId(u.user_id.0),
                build_windows(u, &cfg.window),
                [u.user_id].into(),
            )
        })
        .collect::<Result<_>>()?;
    let clients_total = group_clients(
        users.iter().flat_map(|u| u.windows.clone()).collect(),
        &groups,
    )?
    .len();
    let kept = match scenario.min_per_class() {
        Some(m) => exclude_low_info(users, m),
        None => users,
    };
    let windows: Vec<LabeledWindow> = kept.into_iter().flat_map(|u| u.windows).collect();

    let spec_for = |key: u64| ResampleSpec {
        method: scenario.method(),
        seed: seeds::derive(seed, &[purpose::RESAMPLE, key]),
        ..cfg.resample.clone()
    };
    let mut fallbacks = 0;
    let pooled = scenario.method() != ResampleMethod::None
        && setting != Setting::Centralized
        && cfg.resample_scope == ResampleScope::Pooled;
    let windows = if pooled {
        let (out, fell_back) = resample_or_keep(windows, &spec_for(u64::MAX), "pooled set")?;
        fallbacks += usize::from(fell_back);
        out
    } else {
        windows
    };

    let mut clients = group_clients(windows, &groups)?;
    if scenario.method() != ResampleMethod::None && !pooled {
        let treated = clients
            .par_iter()
            .map(|c| {
                let spec = spec_for(u64::from(c.client_id.0));
                let (windows, fell_back) =
                    resample_or_keep(c.windows.clone(), &spec, &format!("client {}", c.client_id))?;
                Ok((
                    ClientDataset::new(c.client_id, windows, c.monitored_users.clone())?,
                    fell_back,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        clients = treated
            .into_iter()
            .map(|(c, fell_back)| {
                fallbacks += usize::from(fell_back);
                c
            })
            .collect();
    }
    if fallbacks > 0 {
        log::info!(
            "{}/{}: {fallbacks} resampling fallback(s) to untreated data",
            setting.name(),
            scenario.name()
        );
    }
    Ok(Prepared {
        clients,
        clients_total,
        fallbacks,
    })
}

struct CellOutput {
    summary: CellSummary,
    log_lines: Vec<String>,
    params: Option<ModelParameters>,
}

fn run_cell(
    cfg: &ExperimentConfig,
    histories: &[UserHistory],
    setting: Setting,
    scenario: Scenario,
    seed_index: usize,
) -> CellOutput {
    let seed = cfg.run_seed(seed_index);
    let mut summary = CellSummary {
        setting,
        scenario,
        seed_index,
        seed,
        status: CellStatus::Failed,
        error: None,
        clients_total: 0,
        clients_participating: 0,
        resample_fallbacks: 0,
        train_windows: 0,
        test_windows: 0,
        metrics: None,
    };
    let mut log_lines = Vec::new();
    let result = (|| -> Result<(MetricsReport, ModelParameters)> {
        let (train_users, test_users) = split_holdout_users(histories, cfg.holdout_users, seed)?;
        let test = build_all_windows(&test_users, &cfg.window);
        summary.test_windows = test.len();
        if test.is_empty() {
            return Err(Error::config("held-out users yield no test window"));
        }
        let prepared = prepare_clients(cfg, setting, scenario, &train_users, seed)?;
        summary.clients_total = prepared.clients_total;
        summary.clients_participating = prepared.clients.len();
        summary.resample_fallbacks = prepared.fallbacks;
        summary.train_windows = prepared.clients.iter().map(ClientDataset::len).sum();
        if prepared.clients.is_empty() {
            return Err(Error::config("scenario leaves no trainable client"));
        }

        let fed = FedConfig {
            setting,
            seed,
            ..cfg.fed.clone()
        };
        let (params, last) = if setting == Setting::Centralized {
            let run = federation::run_centralized(&prepared.clients[0].windows, &fed, &test)?;
            for e in &run.epochs {
                log_lines.push(serde_json::to_string(e)?);
            }
            let last = run.epochs.last().and_then(|e| e.metrics.clone());
            (run.params, last)
        } else {
            let run = federation::run_federated(&prepared.clients, &fed, &test)?;
            for r in &run.rounds {
                log_lines.push(serde_json::to_string(r)?);
            }
            let last = run.rounds.last().and_then(|r| r.metrics.clone());
            (run.params, last)
        };
        if !params.is_finite() {
            return Err(Error::Numeric(
                "training produced non-finite parameters".into(),
            ));
        }
        let metrics = last.ok_or_else(|| Error::Numeric("final model was not evaluated".into()))?;
        Ok((metrics, params))
    })();

    let params = match result {
        Ok((metrics, params)) => {
            summary.status = CellStatus::Ok;
            summary.metrics = Some(metrics);
            Some(params)
        }
        Err(e) => {
            log::warn!(
                "{}/{} seed {seed_index} failed: {e}",
                setting.name(),
                scenario.name()
            );
            summary.error = Some(e.to_string());
            None
        }
    };
    CellOutput {
        summary,
        log_lines,
        params,
    }
}

fn cell_dir(out: &Path, setting: Setting, scenario: Scenario) -> PathBuf {
    out.join("cells").join(setting.name()).join(scenario.name())
}

fn write_cell(out: &Path, cell: &CellOutput) -> Result<()> {
    let s = &cell.summary;
    let dir = cell_dir(out, s.setting, s.scenario);
    create_dir(&dir)?;
    let stem = format!("seed_{}", s.seed_index);
    write_json(&dir.join(format!("{stem}.json")), s)?;
    let log_path = dir.join(format!("{stem}.jsonl"));
    let ckpt_path = dir.join(format!("{stem}.ckpt"));
    for stale in [&log_path, &ckpt_path] {
        if stale.exists() {
            fs::remove_file(stale)?;
        }
    }
    if !cell.log_lines.is_empty() {
        let mut w = BufWriter::new(fs::File::create(&log_path)?);
        for line in &cell.log_lines {
            writeln!(w, "{line}")?;
        }
        w.flush()?;
    }
    if let Some(params) = &cell.params {
        save_checkpoint(&ckpt_path, params)?;
    }
    Ok(())
}

/// Seed aggregate of one (setting, scenario) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub setting: Setting,
    pub scenario: Scenario,
    pub n_ok: usize,
    pub failed_seeds: Vec<usize>,
    /// `None` when every seed failed.
    pub aggregate: Option<SeedAggregate>,
}

/// Cross-device recall under undersampling against the raw scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeCheck {
    pub raw_recall: f64,
    pub undersample_recall: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub cells: Vec<CellSummary>,
    pub grid: Vec<GridCell>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape_check: Option<ShapeCheck>,
}

impl GridReport {
    pub fn from_cells(mut cells: Vec<CellSummary>) -> Result<Self> {
        cells.sort_by_key(|c| (c.setting, c.scenario, c.seed_index));
        let mut groups: BTreeMap<(Setting, Scenario), Vec<&CellSummary>> = BTreeMap::new();
        for c in &cells {
            groups.entry((c.setting, c.scenario)).or_default().push(c);
        }
        let grid = groups
            .into_iter()
            .map(|((setting, scenario), members)| {
                let reports: Vec<MetricsReport> =
                    members.iter().filter_map(|c| c.metrics.clone()).collect();
                Ok(GridCell {
                    setting,
                    scenario,
                    n_ok: reports.len(),
                    failed_seeds: members
                        .iter()
                        .filter(|c| c.status == CellStatus::Failed)
                        .map(|c| c.seed_index)
                        .collect(),
                    aggregate: if reports.is_empty() {
                        None
                    } else {
                        Some(aggregate_seeds(&reports)?)
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let recall = |scenario| {
            grid.iter()
                .find(|g| g.setting == Setting::CrossDevice && g.scenario == scenario)
                .and_then(|g| g.aggregate.as_ref())
                .map(|a| a.get(Metric::Recall).mean)
        };
        let shape_check = match (recall(Scenario::Raw), recall(Scenario::Undersample)) {
            (Some(raw), Some(under)) => Some(ShapeCheck {
                raw_recall: raw,
                undersample_recall: under,
                holds: under >= raw,
            }),
            _ => None,
        };
        Ok(Self {
            cells,
            grid,
            shape_check,
        })
    }

    pub fn get(&self, setting: Setting, scenario: Scenario) -> Option<&GridCell> {
        self.grid
            .iter()
            .find(|g| g.setting == setting && g.scenario == scenario)
    }

    /// Fixed-width table, one row per (setting, scenario), mean ± std.
    pub fn table(&self) -> String {
        let mut s = format!("{:<13} {:<14}", "setting", "scenario");
        for m in Metric::ALL {
            let _ = write!(s, " {:>15}", m.name());
        }
        s.push('\n');
        for g in &self.grid {
            let _ = write!(s, "{:<13} {:<14}", g.setting.name(), g.scenario.name());
            match &g.aggregate {
                Some(a) => {
                    for m in Metric::ALL {
                        let v = a.get(m);
                        let _ = write!(s, " {:>15}", format!("{:.4}±{:.4}", v.mean, v.std));
                    }
                }
                None => s.push_str("  all seeds failed"),
            }
            if g.aggregate.is_some() && !g.failed_seeds.is_empty() {
                let _ = write!(s, "  (failed seeds {:?})", g.failed_seeds);
            }
            s.push('\n');
        }
        if let Some(check) = &self.shape_check {
            let verdict = if check.holds {
                "holds"
            } else {
                "WARNING: does not hold"
            };
            let _ = writeln!(
                s,
                "cross_device recall, undersample {:.4} >= raw {:.4}: {verdict}",
                check.undersample_recall, check.raw_recall
            );
        }
        s
    }
}

const GRID_COLUMNS: [&str; 12] = [
    "setting", "scenario", "acc_mean", "acc_std", "p_mean", "p_std", "r_mean", "r_std", "f1_mean",
    "f1_std", "gm_mean", "gm_std",
];

fn metric_fields(g: &GridCell) -> Vec<String> {
    Metric::ALL
        .iter()
        .flat_map(|&m| match &g.aggregate {
            Some(a) => {
                let v = a.get(m);
                vec![v.mean.to_string(), v.std.to_string()]
            }
            None => vec![String::new(), String::new()],
        })
        .collect()
}

fn write_grid_csv(path: &Path, grid: &[&GridCell], with_setting: bool) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let skip = usize::from(!with_setting);
    w.write_record(&GRID_COLUMNS[skip..])?;
    for g in grid {
        let mut row = Vec::with_capacity(GRID_COLUMNS.len());
        if with_setting {
            row.push(g.setting.name().to_string());
        }
        row.push(g.scenario.name().to_string());
        row.extend(metric_fields(g));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Loads the history CSV, generating it first when it does not exist.
pub fn load_or_generate(cfg: &ExperimentConfig) -> Result<Vec<UserHistory>> {
    let path = cfg.histories_path();
    if !path.exists() {
        log::info!("{} not found, generating", path.display());
        cmd_generate(cfg)?;
    }
    read_histories_file(&path)
}

/// Runs every (setting, scenario, seed) cell and writes the grid files.
///
/// `threads > 1` runs cells concurrently; outputs do not depend on it.
pub fn cmd_run(cfg: &ExperimentConfig, threads: usize) -> Result<GridReport> {
    cfg.validate()?;
    let histories = load_or_generate(cfg)?;
    if cfg.holdout_users >= histories.len() {
        return Err(Error::config(format!(
            "cannot hold out {} of {} users",
            cfg.holdout_users,
            histories.len()
        )));
    }
    let n_train = histories.len() - cfg.holdout_users;
    let silo_total: usize = cfg.fed.silo_sizes.iter().sum();
    if cfg.settings.contains(&Setting::CrossSilo) && silo_total != n_train {
        return Err(Error::config(format!(
            "silo sizes {:?} sum to {silo_total}, but there are {n_train} training users",
            cfg.fed.silo_sizes
        )));
    }
    create_dir(&cfg.output_dir)?;

    let jobs: Vec<(Setting, Scenario, usize)> = cfg
        .settings
        .iter()
        .flat_map(|&st| {
            cfg.scenarios
                .iter()
                .flat_map(move |&sc| (0..cfg.n_seeds).map(move |i| (st, sc, i)))
        })
        .collect();
    let run_one = |&(setting, scenario, i): &(Setting, Scenario, usize)| -> Result<CellSummary> {
        let cell = run_cell(cfg, &histories, setting, scenario, i);
        write_cell(&cfg.output_dir, &cell)?;
        log::info!(
            "{}/{} seed {i}: {:?}",
            setting.name(),
            scenario.name(),
            cell.summary.status
        );
        Ok(cell.summary)
    };
    let cells = if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::config(format!("cannot start {threads} threads: {e}")))?;
        pool.install(|| jobs.par_iter().map(run_one).collect::<Result<Vec<_>>>())?
    } else {
        jobs.iter().map(run_one).collect::<Result<Vec<_>>>()?
    };

    let report = GridReport::from_cells(cells)?;
    let grid: Vec<&GridCell> = report.grid.iter().collect();
    write_grid_csv(&cfg.output_dir.join("grid.csv"), &grid, true)?;
    write_json(&cfg.output_dir.join("grid.json"), &report)?;
    if let Some(check) = report.shape_check.as_ref().filter(|c| !c.holds) {
        log::warn!(
            "cross_device undersample recall {:.4} is below raw recall {:.4}",
            check.undersample_recall,
            check.raw_recall
        );
    }
    Ok(report)
}

/// Reads every per-seed summary under `grid_dir/cells`.
pub fn read_cells(grid_dir: &Path) -> Result<Vec<CellSummary>> {
    let root = grid_dir.join("cells");
    if !root.is_dir() {
        return Err(Error::input(format!(
            "no cell results under {}",
            root.display()
        )));
    }
    let mut cells = Vec::new();
    let mut stack = vec![root];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "json") {
                let text = fs::read_to_string(&path)?;
                let cell: CellSummary = serde_json::from_str(&text)
                    .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
                cells.push(cell);
            }
        }
    }
    if cells.is_empty() {
        return Err(Error::input(format!(
            "no cell results under {}",
            grid_dir.display()
        )));
    }
    Ok(cells)
}

/// Re-aggregates the per-seed files, prints the table and writes plot data:
/// one metric CSV per setting and a GM comparison across all cells.
pub fn cmd_report(grid_dir: &Path) -> Result<GridReport> {
    let report = GridReport::from_cells(read_cells(grid_dir)?)?;
    let out = grid_dir.join("report");
    create_dir(&out)?;
    let mut settings: Vec<Setting> = report.grid.iter().map(|g| g.setting).collect();
    settings.dedup();
    for setting in settings {
        let rows: Vec<&GridCell> = report
            .grid
            .iter()
            .filter(|g| g.setting == setting)
            .collect();
        write_grid_csv(
            &out.join(format!("fig_{}.csv", setting.name())),
            &rows,
            false,
        )?;
    }

    let mut w = csv::Writer::from_path(out.join("gm.csv"))?;
    w.write_record(["setting", "scenario", "gm_mean", "gm_std"])?;
    for g in &report.grid {
        let (mean, std) = match &g.aggregate {
            Some(a) => {
                let v = a.get(Metric::Gmean);
                (v.mean.to_string(), v.std.to_string())
            }
            None => (String::new(), String::new()),
        };
        w.write_record([g.setting.name(), g.scenario.name(), &mean, &std])?;
    }
    w.flush()?;
    print!("{}", report.table());
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::class_counts;

    #[test]
    fn presets_validate() {
        Preset::Paper.config().validate().unwrap();
        let desk = Preset::Desk.config();
        desk.validate().unwrap();
        assert_eq!(desk.synth.n_users, 60);
        assert_eq!(desk.fed.silo_sizes.iter().sum::<usize>(), 50);
    }

    #[test]
    fn toml_overrides_layer_on_preset() {
        let cfg = ExperimentConfig::from_toml_over(
            Preset::Desk,
            "n_seeds = 1\n[fed]\nrounds = 2\n[fed.train]\nlearning_rate = 0.01\n",
        )
        .unwrap();
        assert_eq!(cfg.n_seeds, 1);
        assert_eq!(cfg.fed.rounds, 2);
        assert_eq!(cfg.fed.local_epochs, 5);
        assert_eq!(cfg.fed.train.learning_rate, 0.01);
        assert_eq!(cfg.synth.n_users, 60);
    }

    #[test]
    fn toml_round_trip() {
        let cfg = Preset::Desk.config();
        let text = cfg.to_toml().unwrap();
        assert_eq!(
            ExperimentConfig::from_toml_over(Preset::Paper, &text).unwrap(),
            cfg
        );
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            ExperimentConfig::from_toml_over(Preset::Desk, "n_seed = 3"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ExperimentConfig::from_toml_over(Preset::Desk, "scenarios = [\"smote\"]"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn scenario_method_consistency() {
        let mut cfg = Preset::Desk.config();
        cfg.resample.method = ResampleMethod::KmeansSmote;
        assert!(cfg.validate().is_err());
        cfg.scenarios = vec![Scenario::Raw, Scenario::Oversample];
        cfg.validate().unwrap();
        cfg.resample.method = ResampleMethod::Undersample;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        let base = Preset::Desk.config();
        for broken in [
            ExperimentConfig {
                n_seeds: 0,
                ..base.clone()
            },
            ExperimentConfig {
                holdout_users: 0,
                ..base.clone()
            },
            ExperimentConfig {
                scenarios: vec![],
                ..base.clone()
            },
            ExperimentConfig {
                settings: vec![Setting::CrossDevice, Setting::CrossDevice],
                ..base.clone()
            },
            ExperimentConfig {
                window: WindowConfig {
                    window: 8,
                    ..Default::default()
                },
                ..base.clone()
            },
        ] {
            assert!(matches!(broken.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn scenario_names_match_serde() {
        for s in Scenario::ALL {
            assert_eq!(
                serde_json::to_string(&s).unwrap(),
                format!("\"{}\"", s.name())
            );
        }
        for s in Setting::ALL {
            assert_eq!(
                serde_json::to_string(&s).unwrap(),
                format!("\"{}\"", s.name())
            );
        }
    }

    #[test]
    fn scenario_mapping() {
        assert_eq!(Scenario::Oversample.method(), ResampleMethod::KmeansSmote);
        assert_eq!(Scenario::Undersample.method(), ResampleMethod::Undersample);
        assert_eq!(Scenario::OverUnder.method(), ResampleMethod::SmoteEnn);
        assert_eq!(Scenario::DropUsers10.min_per_class(), Some(10));
        assert_eq!(Scenario::Raw.min_per_class(), None);
    }

    fn small_users() -> Vec<UserHistory> {
        let synth = SynthConfig {
            n_users: 20,
            seed: 4,
            ..Default::default()
        };
        generate_population(&synth).unwrap()
    }

    #[test]
    fn exclusion_never_adds_clients() {
        let cfg = Preset::Desk.config();
        let users = small_users();
        let raw = prepare_clients(&cfg, Setting::CrossDevice, Scenario::Raw, &users, 1).unwrap();
        let drop5 =
            prepare_clients(&cfg, Setting::CrossDevice, Scenario::DropUsers5, &users, 1).unwrap();
        let drop10 =
            prepare_clients(&cfg, Setting::CrossDevice, Scenario::DropUsers10, &users, 1).unwrap();
        assert_eq!(raw.clients.len(), raw.clients_total);
        assert!(drop5.clients.len() <= raw.clients.len());
        assert!(drop10.clients.len() <= drop5.clients.len());
        for c in &drop5.clients {
            let [a, b] = c.class_counts();
            assert!(a >= 5 && b >= 5);
        }
    }

    #[test]
    fn client_resampling_balances_or_falls_back() {
        let cfg = Preset::Desk.config();
        let users = small_users();
        let p =
            prepare_clients(&cfg, Setting::CrossDevice, Scenario::Undersample, &users, 1).unwrap();
        let balanced = p
            .clients
            .iter()
            .filter(|c| {
                let [a, b] = c.class_counts();
                a == b
            })
            .count();
        assert_eq!(balanced + p.fallbacks, p.clients.len());
    }

    #[test]
    fn pooled_scope_keeps_user_ownership() {
        let cfg = ExperimentConfig {
            resample_scope: ResampleScope::Pooled,
            ..Preset::Desk.config()
        };
        let users = small_users();
        let p =
            prepare_clients(&cfg, Setting::CrossDevice, Scenario::Oversample, &users, 2).unwrap();
        let all: Vec<LabeledWindow> = p.clients.iter().flat_map(|c| c.windows.clone()).collect();
        let [a, b] = class_counts(&all);
        assert_eq!(a, b);
        assert_eq!(p.fallbacks, 0);
    }

    #[test]
    fn table_marks_failed_cells() {
        let cell = CellSummary {
            setting: Setting::CrossSilo,
            scenario: Scenario::DropUsers10,
            seed_index: 0,
            seed: 1,
            status: CellStatus::Failed,
            error: Some("no client".into()),
            clients_total: 3,
            clients_participating: 0,
            resample_fallbacks: 0,
            train_windows: 0,
            test_windows: 10,
            metrics: None,
        };
        let report = GridReport::from_cells(vec![cell]).unwrap();
        assert_eq!(report.grid.len(), 1);
        assert!(report.grid[0].aggregate.is_none());
        assert!(report.table().contains("all seeds failed"));
        assert!(report.shape_check.is_none());
    }
}
