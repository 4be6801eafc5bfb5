//! Two-player TrueSkill ratings, outcome decisions from solve rates, PFSP
//! opponent sampling, and lower-confidence-bound ranking.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::rng::RngStream;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RatingError {
    #[error("non-finite value in rating update ({0})")]
    NonFinite(&'static str),
    #[error("cannot sample an opponent from an empty pool")]
    EmptyPool,
    #[error("invalid rating config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatingState {
    pub mu: f64,
    pub sigma: f64,
    pub games: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RatingConfig {
    pub mu0: f64,
    pub sigma0: f64,
    pub beta: f64,
    pub tau_dyn: f64,
    pub lcb_mult: f64,
}

impl Default for RatingConfig {
    fn default() -> Self {
        let sigma0 = 25.0 / 3.0;
        Self {
            mu0: 25.0,
            sigma0,
            beta: sigma0 / 2.0,
            tau_dyn: sigma0 / 100.0,
            lcb_mult: 3.0,
        }
    }
}

impl RatingConfig {
    pub fn validate(&self) -> Result<(), RatingError> {
        if !(self.sigma0 > 0.0 && self.beta > 0.0 && self.tau_dyn >= 0.0 && self.lcb_mult >= 0.0) {
            return Err(RatingError::Config(format!("{self:?}")));
        }
        Ok(())
    }

    pub fn prior(&self) -> RatingState {
        RatingState {
            mu: self.mu0,
            sigma: self.sigma0,
            games: 0,
        }
    }
}

impl RatingState {
    pub fn lcb(&self, k: f64) -> f64 {
        self.mu - k * self.sigma
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Winner {
    Teacher,
    Student,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchOutcome {
    pub winner: Winner,
    /// Mean solve rate over the valid problems; `None` when there were none.
    pub aggregate_rho: Option<f64>,
}

/// Teacher wins below a 0.5 solve rate, student above, no result at exactly 0.5.
/// A matchup without a single valid problem goes to the student.
pub fn decide_outcome(aggregate_rho: Option<f64>) -> MatchOutcome {
    let winner = match aggregate_rho {
        None => Winner::Student,
        Some(r) if r < 0.5 => Winner::Teacher,
        Some(r) if r > 0.5 => Winner::Student,
        Some(_) => Winner::None,
    };
    MatchOutcome {
        winner,
        aggregate_rho,
    }
}

pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// `φ(t)/Φ(t)`, with the asymptote `-t` once `Φ` underflows.
fn v_win(t: f64) -> f64 {
    let denom = std_normal_cdf(t);
    if denom < 2.222_758_749e-162 {
        -t
    } else {
        std_normal_pdf(t) / denom
    }
}

/// Standard two-player TrueSkill update without draws.
pub fn update_ratings(
    winner: &RatingState,
    loser: &RatingState,
    cfg: &RatingConfig,
) -> Result<(RatingState, RatingState), RatingError> {
    let tau2 = cfg.tau_dyn * cfg.tau_dyn;
    let var_w = winner.sigma * winner.sigma + tau2;
    let var_l = loser.sigma * loser.sigma + tau2;
    let c2 = 2.0 * cfg.beta * cfg.beta + var_w + var_l;
    let c = c2.sqrt();
    let t = (winner.mu - loser.mu) / c;
    let v = v_win(t);
    let w = (v * (v + t)).clamp(0.0, 1.0 - 1e-12);
    let mu_w = winner.mu + var_w / c * v;
    let mu_l = loser.mu - var_l / c * v;
    let sig_w = (var_w * (1.0 - var_w / c2 * w)).sqrt();
    let sig_l = (var_l * (1.0 - var_l / c2 * w)).sqrt();
    for (name, x) in [("mu_w", mu_w), ("mu_l", mu_l), ("sigma_w", sig_w), ("sigma_l", sig_l)] {
        if !x.is_finite() {
            return Err(RatingError::NonFinite(name));
        }
    }
    Ok((
        RatingState {
            mu: mu_w,
            sigma: sig_w,
            games: winner.games + 1,
        },
        RatingState {
            mu: mu_l,
            sigma: sig_l,
            games: loser.games + 1,
        },
    ))
}

pub fn predicted_win_prob(a: &RatingState, b: &RatingState, cfg: &RatingConfig) -> f64 {
    let denom = (2.0 * cfg.beta * cfg.beta + a.sigma * a.sigma + b.sigma * b.sigma).sqrt();
    std_normal_cdf((a.mu - b.mu) / denom)
}

/// PFSP weight; maximal for an even matchup.
pub fn pfsp_weight(p: f64) -> f64 {
    p * (1.0 - p)
}

pub fn pfsp_weights(me: &RatingState, pool: &[RatingState], cfg: &RatingConfig) -> Vec<f64> {
    pool.iter()
        .map(|o| pfsp_weight(predicted_win_prob(me, o, cfg)))
        .collect()
}

pub fn pfsp_sample(
    me: &RatingState,
    pool: &[RatingState],
    cfg: &RatingConfig,
    rng: &mut RngStream,
) -> Result<usize, RatingError> {
    if pool.is_empty() {
        return Err(RatingError::EmptyPool);
    }
    let weights = pfsp_weights(me, pool, cfg);
    if weights.iter().all(|&w| w < 1e-12) {
        return Ok(rng.below(pool.len()));
    }
    Ok(rng.weighted_index(&weights))
}

/// Indices ordered from lowest to highest `μ - kσ`; ties keep index order.
pub fn lcb_rank(pool: &[RatingState], cfg: &RatingConfig) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    idx.sort_by(|&i, &j| {
        pool[i]
            .lcb(cfg.lcb_mult)
            .total_cmp(&pool[j].lcb(cfg.lcb_mult))
    });
    idx
}
