//! Synthetic adherence populations.
//!
//! Each user follows a two-state (engaged / disengaged) Markov chain over
//! sessions and emits Poisson acquisition counts whose rate depends on the
//! state. Per-user parameters differ, which gives non-iid users; history
//! lengths come from a mixture, which gives quantity skew; persistent
//! disengagement followed by re-engagement gives identical windows with both
//! labels.
//!
//! All per-user randomness is drawn up front from a stream keyed by
//! `(seed, user_id)`, one transition uniform and one emission uniform per
//! session. Counts are then a monotone function of the population-wide mean
//! engagement logit, which is found by bisection so that the windowed corpus
//! hits `target_label0_fraction`.

use std::collections::HashMap;

use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{label, UserHistory, UserId, WindowConfig};
use crate::error::{Error, Result};
use crate::neuralnet::sigmoid;
use crate::seeds;

/// One mixture component of history lengths, in sessions (inclusive bounds).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LengthComponent {
    pub weight: f64,
    pub min_sessions: usize,
    pub max_sessions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantitySkew {
    pub components: Vec<LengthComponent>,
}

impl Default for QuantitySkew {
    /// Short, medium and long histories. With the default window these give
    /// fewer than 100 windows, 100 to 200 windows, and more than 200 windows.
    fn default() -> Self {
        let c = |weight: f64, min_sessions, max_sessions| LengthComponent {
            weight,
            min_sessions,
            max_sessions,
        };
        Self {
            components: vec![
                c(85.0 / 454.0, 30, 113),
                c(290.0 / 454.0, 114, 214),
                c(79.0 / 454.0, 215, 400),
            ],
        }
    }
}

/// Ranges of the per-user latent process parameters; each user draws
/// uniformly within them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngagementModel {
    /// Poisson rate per session while engaged.
    pub engaged_rate: (f64, f64),
    /// Poisson rate per session while disengaged.
    pub disengaged_rate: (f64, f64),
    /// Probability mass of leaving the current state per session, summed
    /// over both directions. Small values mean long engaged/disengaged runs.
    pub switch_rate: (f64, f64),
    /// Spread of the per-user engagement logit around the population mean.
    pub engagement_logit_std: f64,
}

impl Default for EngagementModel {
    fn default() -> Self {
        Self {
            engaged_rate: (0.8, 3.0),
            disengaged_rate: (0.0, 0.15),
            switch_rate: (0.05, 0.3),
            engagement_logit_std: 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_users: usize,
    pub target_label0_fraction: f64,
    pub quantity_skew: QuantitySkew,
    pub engagement_model: EngagementModel,
    /// Windowing used when calibrating the label fraction.
    pub window: WindowConfig,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_users: 454,
            target_label0_fraction: 0.75,
            quantity_skew: QuantitySkew::default(),
            engagement_model: EngagementModel::default(),
            window: WindowConfig::default(),
            seed: 0,
        }
    }
}

fn check_range(name: &str, (lo, hi): (f64, f64), min: f64, max: f64) -> Result<()> {
    if !(lo.is_finite() && hi.is_finite() && min <= lo && lo <= hi && hi <= max) {
        return Err(Error::config(format!(
            "{name} must satisfy {min} <= lo <= hi <= {max}, got ({lo}, {hi})"
        )));
    }
    Ok(())
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0 {
            return Err(Error::config("n_users must be >= 1"));
        }
        if !(self.target_label0_fraction > 0.0 && self.target_label0_fraction < 1.0) {
            return Err(Error::config("target_label0_fraction must lie in (0, 1)"));
        }
        self.window.validate()?;
        let comps = &self.quantity_skew.components;
        if comps.is_empty() {
            return Err(Error::config("quantity skew needs at least one component"));
        }
        for c in comps {
            if !(c.weight.is_finite() && c.weight >= 0.0) || c.min_sessions > c.max_sessions {
                return Err(Error::config(format!("invalid length component {c:?}")));
            }
        }
        if comps.iter().map(|c| c.weight).sum::<f64>() <= 0.0 {
            return Err(Error::config("length component weights sum to zero"));
        }
        let m = &self.engagement_model;
        check_range("engaged_rate", m.engaged_rate, 0.0, 50.0)?;
        check_range("disengaged_rate", m.disengaged_rate, 0.0, 50.0)?;
        check_range("switch_rate", m.switch_rate, 0.0, 1.0)?;
        if !(m.engagement_logit_std.is_finite() && m.engagement_logit_std >= 0.0) {
            return Err(Error::config(
                "engagement_logit_std must be finite and >= 0",
            ));
        }
        Ok(())
    }
}

/// Pre-drawn randomness of one user.
struct Latent {
    user_id: UserId,
    logit_offset: f64,
    switch_rate: f64,
    engaged_rate: f64,
    disengaged_rate: f64,
    start: f64,
    transitions: Vec<f64>,
    emissions: Vec<f64>,
}

fn uniform_in(rng: &mut seeds::Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

impl Latent {
    fn draw(cfg: &SynthConfig, user: u32) -> Self {
        let mut rng = seeds::derive_rng(cfg.seed, &[seeds::purpose::USER, u64::from(user)]);
        let comps = &cfg.quantity_skew.components;
        let total: f64 = comps.iter().map(|c| c.weight).sum();
        let mut pick = rng.random::<f64>() * total;
        let comp = comps
            .iter()
            .find(|c| {
                pick -= c.weight;
                pick < 0.0
            })
            .unwrap_or_else(|| {
                comps
                    .iter()
                    .rfind(|c| c.weight > 0.0)
                    .expect("positive weight")
            });
        let len = rng.random_range(comp.min_sessions..=comp.max_sessions);

        let m = &cfg.engagement_model;
        let z: f64 = rng.sample(StandardNormal);
        Self {
            user_id: UserId(user),
            logit_offset: z * m.engagement_logit_std,
            switch_rate: uniform_in(&mut rng, m.switch_rate),
            engaged_rate: uniform_in(&mut rng, m.engaged_rate),
            disengaged_rate: uniform_in(&mut rng, m.disengaged_rate),
            start: rng.random(),
            transitions: (0..len).map(|_| rng.random()).collect(),
            emissions: (0..len).map(|_| rng.random()).collect(),
        }
    }

    /// Counts for a population mean engagement logit.
    fn realize(&self, mean_logit: f64) -> UserHistory {
        let engaged_share = sigmoid(mean_logit + self.logit_offset);
        let to_engaged = self.switch_rate * engaged_share;
        let to_disengaged = self.switch_rate * (1.0 - engaged_share);
        let mut engaged = self.start < engaged_share;
        let counts = self
            .transitions
            .iter()
            .zip(&self.emissions)
            .map(|(&t, &e)| {
                let rate = if engaged {
                    self.engaged_rate
                } else {
                    self.disengaged_rate
                };
                let count = poisson_quantile(rate, e);
                engaged = if engaged {
                    t >= to_disengaged
                } else {
                    t < to_engaged
                };
                count
            })
            .collect();
        UserHistory::new(self.user_id, counts)
    }
}

/// Smallest `k` with `P(X <= k) > u` for `X ~ Poisson(rate)`.
fn poisson_quantile(rate: f64, u: f64) -> u32 {
    if rate <= 0.0 {
        return 0;
    }
    let mut p = (-rate).exp();
    let mut cdf = p;
    let mut k = 0u32;
    while u >= cdf && k < 1000 {
        k += 1;
        p *= rate / f64::from(k);
        cdf += p;
        if p == 0.0 {
            break;
        }
    }
    k
}

fn label0_fraction(histories: &[UserHistory], cfg: &WindowConfig) -> Option<f64> {
    let (mut zeros, mut total) = (0usize, 0usize);
    for h in histories {
        let n = cfg.window_count(h.counts.len());
        for i in 0..n {
            let start = i + cfg.window;
            let future = &h.counts[start..start + cfg.horizon];
            if label(future, cfg.horizon, cfg.adherence_threshold).expect("length p") == 0 {
                zeros += 1;
            }
        }
        total += n;
    }
    (total > 0).then(|| zeros as f64 / total as f64)
}

/// Generates `cfg.n_users` histories with ids `0..n_users`.
pub fn generate_population(cfg: &SynthConfig) -> Result<Vec<UserHistory>> {
    cfg.validate()?;
    let latents: Vec<Latent> = (0..cfg.n_users as u32)
        .into_par_iter()
        .map(|u| Latent::draw(cfg, u))
        .collect();
    let realize = |mean_logit: f64| -> Vec<UserHistory> {
        latents.par_iter().map(|l| l.realize(mean_logit)).collect()
    };

    // The label-0 fraction decreases with the mean logit.
    let (mut lo, mut hi) = (-12.0f64, 12.0f64);
    let target = cfg.target_label0_fraction;
    let mut best = realize(0.0);
    if label0_fraction(&best, &cfg.window).is_none() {
        log::warn!("synthetic histories too short to produce any window");
        return Ok(best);
    }
    for _ in 0..48 {
        let mid = 0.5 * (lo + hi);
        best = realize(mid);
        let frac = label0_fraction(&best, &cfg.window).expect("windows exist");
        if frac > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(best)
}

/// Per-user entry of a [`CalibrationReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserCalibration {
    pub user_id: UserId,
    pub sessions: usize,
    pub windows: usize,
    /// `None` when the user has no windows.
    pub label0_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub n_users: usize,
    pub n_windows: usize,
    pub label0_fraction: f64,
    pub label1_fraction: f64,
    /// Fraction of distinct feature vectors seen with both labels.
    pub ambiguity_rate: f64,
    pub users_under_100_windows: usize,
    pub users_over_200_windows: usize,
    pub users_without_windows: usize,
    pub per_user: Vec<UserCalibration>,
}

pub fn calibration_report(histories: &[UserHistory], cfg: &WindowConfig) -> CalibrationReport {
    let mut seen: HashMap<&[u32], u8> = HashMap::new();
    let mut per_user = Vec::with_capacity(histories.len());
    let (mut zeros, mut total) = (0usize, 0usize);
    for h in histories {
        let n = cfg.window_count(h.counts.len());
        let mut user_zeros = 0;
        for i in 0..n {
            let x = &h.counts[i..i + cfg.window];
            let future = &h.counts[i + cfg.window..i + cfg.window + cfg.horizon];
            let y = label(future, cfg.horizon, cfg.adherence_threshold).expect("length p");
            *seen.entry(x).or_insert(0) |= 1 << y;
            if y == 0 {
                user_zeros += 1;
            }
        }
        zeros += user_zeros;
        total += n;
        per_user.push(UserCalibration {
            user_id: h.user_id,
            sessions: h.counts.len(),
            windows: n,
            label0_fraction: (n > 0).then(|| user_zeros as f64 / n as f64),
        });
    }
    let ambiguous = seen.values().filter(|&&m| m == 0b11).count();
    let (label0, label1) = if total > 0 {
        let f = zeros as f64 / total as f64;
        (f, 1.0 - f)
    } else {
        (0.0, 0.0)
    };
    CalibrationReport {
        n_users: histories.len(),
        n_windows: total,
        label0_fraction: label0,
        label1_fraction: label1,
        ambiguity_rate: if seen.is_empty() {
            0.0
        } else {
            ambiguous as f64 / seen.len() as f64
        },
        users_under_100_windows: per_user.iter().filter(|u| u.windows < 100).count(),
        users_over_200_windows: per_user.iter().filter(|u| u.windows > 200).count(),
        users_without_windows: per_user.iter().filter(|u| u.windows == 0).count(),
        per_user,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_user_is_reproducible() {
        let cfg = SynthConfig {
            n_users: 1,
            seed: 7,
            ..Default::default()
        };
        let a = generate_population(&cfg).unwrap();
        let b = generate_population(&cfg).unwrap();
        assert_eq!(a, b);
        let mut ca = Vec::new();
        let mut cb = Vec::new();
        crate::dataset::write_histories(&mut ca, &a).unwrap();
        crate::dataset::write_histories(&mut cb, &b).unwrap();
        assert_eq!(ca, cb);
    }

    #[test]
    fn seeds_differ() {
        let a = generate_population(&SynthConfig {
            n_users: 5,
            seed: 1,
            ..Default::default()
        });
        let b = generate_population(&SynthConfig {
            n_users: 5,
            seed: 2,
            ..Default::default()
        });
        assert_ne!(a.unwrap(), b.unwrap());
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            SynthConfig {
                n_users: 0,
                ..Default::default()
            },
            SynthConfig {
                target_label0_fraction: 1.0,
                ..Default::default()
            },
            SynthConfig {
                target_label0_fraction: 0.0,
                ..Default::default()
            },
            SynthConfig {
                quantity_skew: QuantitySkew { components: vec![] },
                ..Default::default()
            },
        ] {
            assert!(matches!(generate_population(&cfg), Err(Error::Config(_))));
        }
    }

    #[test]
    fn poisson_quantile_matches_cdf() {
        assert_eq!(poisson_quantile(0.0, 0.99), 0);
        // P(X=0) = e^-1 ~ 0.3679, P(X<=1) ~ 0.7358
        assert_eq!(poisson_quantile(1.0, 0.3), 0);
        assert_eq!(poisson_quantile(1.0, 0.5), 1);
        assert_eq!(poisson_quantile(1.0, 0.8), 2);
    }

    #[test]
    fn calibration_of_all_zero_user() {
        let h = vec![UserHistory::new(UserId(0), vec![0; 30])];
        let r = calibration_report(&h, &WindowConfig::default());
        assert_eq!(r.label0_fraction, 1.0);
        assert_eq!(r.ambiguity_rate, 0.0);
        assert_eq!(r.per_user[0].windows, 16);
    }

    #[test]
    fn calibration_detects_ambiguity() {
        let mut adherent = vec![0; 12];
        adherent.extend([1, 1, 0]);
        let h = vec![
            UserHistory::new(UserId(0), vec![0; 15]),
            UserHistory::new(UserId(1), adherent),
        ];
        let r = calibration_report(&h, &WindowConfig::default());
        assert!(r.ambiguity_rate > 0.0);
        assert_eq!(r.ambiguity_rate, 1.0);
    }

    #[test]
    fn short_users_are_reported() {
        let h = vec![UserHistory::new(UserId(3), vec![1; 5])];
        let r = calibration_report(&h, &WindowConfig::default());
        assert_eq!(r.users_without_windows, 1);
        assert_eq!(r.per_user[0].label0_fraction, None);
        assert_eq!(r.n_windows, 0);
    }
}
