//! Verifiable rewards, solve rates, group-normalised advantages and the
//! policy-gradient update on adapter factors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::AdapterState;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RlError {
    #[error("ragged rollout batch: prompt {prompt} has {got} rollouts, expected {expected}")]
    Ragged {
        prompt: usize,
        got: usize,
        expected: usize,
    },
    #[error("advantages do not align with rewards")]
    Misaligned,
    #[error("gradient for unknown slot {0}")]
    UnknownSlot(String),
    #[error("gradient shape for slot {slot} is {got:?}, expected {expected:?}")]
    GradShape {
        slot: String,
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error("non-finite gradient in slot {0}")]
    NonFinite(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentVerdict {
    Correct,
    WrongWellformed,
    Malformed,
}

pub fn reward_student(v: StudentVerdict) -> f64 {
    match v {
        StudentVerdict::Correct => 1.0,
        StudentVerdict::WrongWellformed => -0.5,
        StudentVerdict::Malformed => -1.0,
    }
}

/// Fraction of solved rollouts; an empty slice counts as unsolved.
pub fn solve_rate(bits: &[bool]) -> f64 {
    if bits.is_empty() {
        return 0.0;
    }
    bits.iter().filter(|&&b| b).count() as f64 / bits.len() as f64
}

pub fn reward_teacher(valid: bool, rho: f64) -> f64 {
    if !valid {
        -1.0
    } else if rho == 0.0 {
        0.0
    } else {
        1.0 - rho
    }
}

/// Dense `d_out x d_in` gradient of a log-probability with respect to a
/// slot's effective delta.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaGrad {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DeltaGrad {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn add_to_row(&mut self, row: usize, values: &[f64]) {
        let dst = &mut self.data[row * self.cols..(row + 1) * self.cols];
        for (d, v) in dst.iter_mut().zip(values) {
            *d += v;
        }
    }

    /// `self += u vᵀ`.
    pub fn add_outer(&mut self, u: &[f64], v: &[f64]) {
        for (i, &ui) in u.iter().enumerate() {
            if ui == 0.0 {
                continue;
            }
            let dst = &mut self.data[i * self.cols..(i + 1) * self.cols];
            for (d, &vj) in dst.iter_mut().zip(v) {
                *d += ui * vj;
            }
        }
    }

    pub fn axpy(&mut self, alpha: f64, other: &DeltaGrad) {
        for (d, s) in self.data.iter_mut().zip(&other.data) {
            *d += alpha * s;
        }
    }
}

pub type SampleGrad = BTreeMap<String, DeltaGrad>;

/// Rewards and score-function gradients laid out `[prompt][rollout]`.
#[derive(Debug, Clone, Default)]
pub struct RolloutBatch {
    pub rewards: Vec<Vec<f64>>,
    pub grads: Vec<Vec<SampleGrad>>,
}

impl RolloutBatch {
    pub fn rollouts(&self) -> usize {
        self.rewards.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.iter().all(Vec::is_empty)
    }

    pub fn check(&self) -> Result<(), RlError> {
        let n = self.rollouts();
        for (i, row) in self.rewards.iter().enumerate() {
            if row.len() != n {
                return Err(RlError::Ragged {
                    prompt: i,
                    got: row.len(),
                    expected: n,
                });
            }
        }
        if self.grads.len() != self.rewards.len()
            || self.grads.iter().any(|g| g.len() != n)
        {
            return Err(RlError::Misaligned);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageBatch {
    pub advantages: Vec<Vec<f64>>,
}

pub const WHITEN_EPS: f64 = 1e-8;

/// Per-prompt centring followed by global whitening.
pub fn compute_advantages(rewards: &[Vec<f64>]) -> AdvantageBatch {
    let centred: Vec<Vec<f64>> = rewards
        .iter()
        .map(|row| {
            if row.is_empty() {
                return Vec::new();
            }
            let m = row.iter().sum::<f64>() / row.len() as f64;
            row.iter().map(|r| r - m).collect()
        })
        .collect();
    let count: usize = centred.iter().map(Vec::len).sum();
    if count == 0 {
        return AdvantageBatch {
            advantages: centred,
        };
    }
    let mean = centred.iter().flatten().sum::<f64>() / count as f64;
    let var = centred
        .iter()
        .flatten()
        .map(|a| (a - mean) * (a - mean))
        .sum::<f64>()
        / count as f64;
    let denom = var.sqrt() + WHITEN_EPS;
    AdvantageBatch {
        advantages: centred
            .into_iter()
            .map(|row| row.into_iter().map(|a| (a - mean) / denom).collect())
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adamw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MomentState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// First and second moments per factor tensor, keyed `"<slot>/a"` and `"<slot>/b"`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub t: u64,
    pub moments: BTreeMap<String, MomentState>,
}

/// Ascent directions for every factor, before the learning rate.
pub fn factor_gradients(
    adapter: &AdapterState,
    batch: &RolloutBatch,
    adv: &AdvantageBatch,
) -> Result<FactorGrads, RlError> {
    batch.check()?;
    if adv.advantages.len() != batch.rewards.len()
        || adv
            .advantages
            .iter()
            .zip(&batch.rewards)
            .any(|(a, r)| a.len() != r.len())
    {
        return Err(RlError::Misaligned);
    }
    let mut total: BTreeMap<String, DeltaGrad> = adapter
        .slots
        .iter()
        .map(|(k, p)| (k.clone(), DeltaGrad::zeros(p.d_out(), p.d_in())))
        .collect();
    let samples = batch.rewards.len() * batch.rollouts();
    for (adv_row, grad_row) in adv.advantages.iter().zip(&batch.grads) {
        for (&a, sample) in adv_row.iter().zip(grad_row) {
            if a == 0.0 {
                continue;
            }
            for (slot, g) in sample {
                let acc = total
                    .get_mut(slot)
                    .ok_or_else(|| RlError::UnknownSlot(slot.clone()))?;
                if (g.rows, g.cols) != (acc.rows, acc.cols) {
                    return Err(RlError::GradShape {
                        slot: slot.clone(),
                        got: (g.rows, g.cols),
                        expected: (acc.rows, acc.cols),
                    });
                }
                acc.axpy(a, g);
            }
        }
    }
    let norm = if samples == 0 { 0.0 } else { 1.0 / samples as f64 };
    let mut out = FactorGrads::new();
    for (slot, g) in total {
        let pair = &adapter.slots[&slot];
        let r = pair.rank();
        let (d_out, d_in) = (g.rows, g.cols);
        // dB = G Aᵀ (d_out x r), dA = Bᵀ G (r x d_in)
        let mut db = vec![0.0f64; d_out * r];
        let mut da = vec![0.0f64; r * d_in];
        for i in 0..d_out {
            let grow = &g.data[i * d_in..(i + 1) * d_in];
            for k in 0..r {
                let arow = pair.a.row(k);
                let mut s = 0.0;
                for (gv, av) in grow.iter().zip(arow) {
                    s += gv * *av as f64;
                }
                db[i * r + k] = s * norm;
                let bik = pair.b.get(i, k) as f64;
                if bik != 0.0 {
                    let dst = &mut da[k * d_in..(k + 1) * d_in];
                    for (d, gv) in dst.iter_mut().zip(grow) {
                        *d += bik * gv * norm;
                    }
                }
            }
        }
        if db.iter().chain(&da).any(|v| !v.is_finite()) {
            return Err(RlError::NonFinite(slot));
        }
        out.insert(slot, (da, db));
    }
    Ok(out)
}

pub type FactorGrads = BTreeMap<String, (Vec<f64>, Vec<f64>)>;

/// One plain SGD ascent step on every factor tensor.
pub fn policy_gradient_step(
    adapter: &AdapterState,
    batch: &RolloutBatch,
    adv: &AdvantageBatch,
    lr: f64,
) -> Result<AdapterState, RlError> {
    let grads = factor_gradients(adapter, batch, adv)?;
    Ok(apply_gradients(
        adapter,
        &grads,
        lr,
        &OptimizerConfig::default(),
        &mut OptimizerState::default(),
    ))
}

/// Adds `other` into `into`, slot by slot.
pub fn merge_gradients(into: &mut FactorGrads, other: FactorGrads) {
    for (slot, (da, db)) in other {
        match into.get_mut(&slot) {
            Some((a, b)) => {
                for (x, y) in a.iter_mut().zip(&da) {
                    *x += y;
                }
                for (x, y) in b.iter_mut().zip(&db) {
                    *x += y;
                }
            }
            None => {
                into.insert(slot, (da, db));
            }
        }
    }
}

fn adam_apply(
    weights: &mut [f32],
    grad: &[f64],
    moments: &mut MomentState,
    cfg: &OptimizerConfig,
    lr: f64,
    t: u64,
) {
    if moments.m.len() != grad.len() {
        moments.m = vec![0.0; grad.len()];
        moments.v = vec![0.0; grad.len()];
    }
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for (i, w) in weights.iter_mut().enumerate() {
        let g = grad[i];
        moments.m[i] = cfg.beta1 * moments.m[i] + (1.0 - cfg.beta1) * g;
        moments.v[i] = cfg.beta2 * moments.v[i] + (1.0 - cfg.beta2) * g * g;
        let step = (moments.m[i] / bc1) / ((moments.v[i] / bc2).sqrt() + cfg.eps);
        let decayed = *w as f64 * (1.0 - lr * cfg.weight_decay);
        *w = (decayed + lr * step) as f32;
    }
}

/// Ascent update with precomputed factor gradients; SGD ignores `state`.
pub fn apply_gradients(
    adapter: &AdapterState,
    grads: &FactorGrads,
    lr: f64,
    cfg: &OptimizerConfig,
    state: &mut OptimizerState,
) -> AdapterState {
    let mut next = adapter.clone();
    if cfg.kind == OptimizerKind::Adamw {
        state.t += 1;
    }
    for (slot, (da, db)) in grads {
        let pair = next.slots.get_mut(slot).expect("gradient for an adapter slot");
        match cfg.kind {
            OptimizerKind::Sgd => {
                for (w, g) in pair.a.data_mut().iter_mut().zip(da) {
                    *w = (*w as f64 + lr * g) as f32;
                }
                for (w, g) in pair.b.data_mut().iter_mut().zip(db) {
                    *w = (*w as f64 + lr * g) as f32;
                }
            }
            OptimizerKind::Adamw => {
                let ma = state.moments.entry(format!("{slot}/a")).or_default();
                adam_apply(pair.a.data_mut(), da, ma, cfg, lr, state.t);
                let mb = state.moments.entry(format!("{slot}/b")).or_default();
                adam_apply(pair.b.data_mut(), db, mb, cfg, lr, state.t);
            }
        }
    }
    next
}

pub fn optimizer_step(
    adapter: &AdapterState,
    batch: &RolloutBatch,
    adv: &AdvantageBatch,
    lr: f64,
    cfg: &OptimizerConfig,
    state: &mut OptimizerState,
) -> Result<AdapterState, RlError> {
    let grads = factor_gradients(adapter, batch, adv)?;
    Ok(apply_gradients(adapter, &grads, lr, cfg, state))
}

/// Softmax of `logits / temperature` restricted to `mask`; masked entries are exactly zero.
pub fn masked_softmax(logits: &[f64], mask: &[bool], temperature: f64) -> Vec<f64> {
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&l, _)| l / temperature)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(&l, &m)| if m { (l / temperature - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = out.iter().sum();
    for p in &mut out {
        *p /= z;
    }
    out
}

/// `∂ log π(action) / ∂ logits` for a tempered softmax: `(e_a - π) / T`.
pub fn logit_score(probs: &[f64], action: usize, temperature: f64) -> Vec<f64> {
    probs
        .iter()
        .enumerate()
        .map(|(i, &p)| ((if i == action { 1.0 } else { 0.0 }) - p) / temperature)
        .collect()
}

pub fn entropy(probs: &[f64]) -> f64 {
    probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}
