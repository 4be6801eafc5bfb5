//! Low-rank adapter data model.
//!
//! A slot holds factors `A` (`r x d_in`) and `B` (`d_out x r`); the effective
//! delta is `B A`, a `d_out x d_in` matrix that is never materialised by the
//! SVD path.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{householder_qr, jacobi_svd, Tensor2D, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdapterError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid factor pair: {0}")]
    Factors(String),
    #[error("adapter mismatch: {0}")]
    Mismatch(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorPair {
    pub a: Tensor2D,
    pub b: Tensor2D,
}

impl FactorPair {
    pub fn new(a: Tensor2D, b: Tensor2D) -> Result<Self, AdapterError> {
        let pair = Self { a, b };
        pair.validate()?;
        Ok(pair)
    }

    pub fn zeros(rank: usize, d_in: usize, d_out: usize) -> Self {
        Self {
            a: Tensor2D::zeros(rank, d_in),
            b: Tensor2D::zeros(d_out, rank),
        }
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn d_in(&self) -> usize {
        self.a.cols()
    }

    pub fn d_out(&self) -> usize {
        self.b.rows()
    }

    pub fn validate(&self) -> Result<(), AdapterError> {
        let r = self.a.rows();
        if self.b.cols() != r {
            return Err(AdapterError::Factors(format!(
                "A has {} rows but B has {} cols",
                r,
                self.b.cols()
            )));
        }
        if r == 0 || r > self.d_in().min(self.d_out()) {
            return Err(AdapterError::Factors(format!(
                "rank {r} outside 1..={}",
                self.d_in().min(self.d_out())
            )));
        }
        Ok(())
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.a.same_shape(&other.a) && self.b.same_shape(&other.b)
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.a.bitwise_eq(&other.a) && self.b.bitwise_eq(&other.b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterState {
    pub slots: BTreeMap<String, FactorPair>,
    pub rank: usize,
    /// LoRA scaling; carried as metadata and never folded into the factors.
    pub scaling: f32,
}

impl AdapterState {
    pub fn new(rank: usize, scaling: f32) -> Self {
        Self {
            slots: BTreeMap::new(),
            rank,
            scaling,
        }
    }

    pub fn with_slot(mut self, name: impl Into<String>, pair: FactorPair) -> Result<Self, AdapterError> {
        pair.validate()?;
        if pair.rank() != self.rank {
            return Err(AdapterError::Mismatch(format!(
                "slot rank {} differs from adapter rank {}",
                pair.rank(),
                self.rank
            )));
        }
        self.slots.insert(name.into(), pair);
        Ok(self)
    }

    pub fn slot(&self, name: &str) -> Option<&FactorPair> {
        self.slots.get(name)
    }

    pub fn slot_mut(&mut self, name: &str) -> Option<&mut FactorPair> {
        self.slots.get_mut(name)
    }

    pub fn validate(&self) -> Result<(), AdapterError> {
        if !(self.scaling > 0.0) {
            return Err(AdapterError::Mismatch(format!("scaling {} must be > 0", self.scaling)));
        }
        for (name, pair) in &self.slots {
            pair.validate()?;
            if pair.rank() != self.rank {
                return Err(AdapterError::Mismatch(format!(
                    "slot {name} has rank {} but adapter rank is {}",
                    pair.rank(),
                    self.rank
                )));
            }
        }
        Ok(())
    }

    /// Same slot names, rank, and per-slot shapes.
    pub fn check_compatible(&self, other: &Self) -> Result<(), AdapterError> {
        if self.rank != other.rank {
            return Err(AdapterError::Mismatch(format!("rank {} vs {}", self.rank, other.rank)));
        }
        if self.slots.len() != other.slots.len() {
            return Err(AdapterError::Mismatch("slot count differs".into()));
        }
        for ((n1, p1), (n2, p2)) in self.slots.iter().zip(&other.slots) {
            if n1 != n2 {
                return Err(AdapterError::Mismatch(format!("slot {n1} vs {n2}")));
            }
            if !p1.same_shape(p2) {
                return Err(AdapterError::Mismatch(format!("slot {n1} shapes differ")));
            }
        }
        Ok(())
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.rank == other.rank
            && self.scaling.to_bits() == other.scaling.to_bits()
            && self.slots.len() == other.slots.len()
            && self
                .slots
                .iter()
                .zip(&other.slots)
                .all(|((n1, p1), (n2, p2))| n1 == n2 && p1.bitwise_eq(p2))
    }

    /// Applies `f` to every factor tensor (A then B per slot, in slot order).
    pub fn map_tensors(&self, mut f: impl FnMut(&str, &Tensor2D) -> Tensor2D) -> Self {
        let slots = self
            .slots
            .iter()
            .map(|(name, pair)| {
                let a = f(name, &pair.a);
                let b = f(name, &pair.b);
                (name.clone(), FactorPair { a, b })
            })
            .collect();
        Self {
            slots,
            rank: self.rank,
            scaling: self.scaling,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.slots.values().map(|p| p.a.len() + p.b.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvdTriple {
    /// `d_out x r`
    pub u: Tensor2D,
    pub s: Vec<f32>,
    /// `d_in x r`
    pub v: Tensor2D,
}

impl SvdTriple {
    /// `U diag(S) Vᵀ`.
    pub fn reconstruct(&self) -> Tensor2D {
        let mut us = self.u.clone();
        for (j, &s) in self.s.iter().enumerate() {
            us.scale_col(j, s);
        }
        us.matmul(&self.v.transpose()).expect("consistent svd shapes")
    }
}

/// `B A`, shape `d_out x d_in`.
pub fn effective_delta(p: &FactorPair) -> Result<Tensor2D, AdapterError> {
    p.validate()?;
    Ok(p.b.matmul(&p.a)?)
}

/// SVD of `B A` through thin QR of both factors and a Jacobi SVD of the
/// `r x r` core `R_B R_Aᵀ`.
pub fn svd_of_delta(p: &FactorPair) -> Result<SvdTriple, AdapterError> {
    p.validate()?;
    if !p.a.is_finite() || !p.b.is_finite() {
        return Err(TensorError::NonFinite("svd_of_delta factors").into());
    }
    let (q_b, r_b) = householder_qr(&p.b)?;
    let (q_a, r_a) = householder_qr(&p.a.transpose())?;
    let core = r_b.matmul(&r_a.transpose())?;
    let (u_c, s, v_c) = jacobi_svd(&core)?;
    Ok(SvdTriple {
        u: q_b.matmul(&u_c)?,
        s,
        v: q_a.matmul(&v_c)?,
    })
}

/// Balanced split `B' = U diag(√S)`, `A' = diag(√S) Vᵀ`.
pub fn refactor_balanced(t: &SvdTriple) -> Result<FactorPair, AdapterError> {
    if let Some(&neg) = t.s.iter().find(|&&s| s < 0.0) {
        return Err(TensorError::NegativeSingular(neg).into());
    }
    if t.u.cols() != t.s.len() || t.v.cols() != t.s.len() {
        return Err(AdapterError::Factors("svd triple column counts disagree".into()));
    }
    let mut b = t.u.clone();
    let mut v = t.v.clone();
    for (j, &s) in t.s.iter().enumerate() {
        let root = s.sqrt();
        b.scale_col(j, root);
        v.scale_col(j, root);
    }
    Ok(FactorPair { a: v.transpose(), b })
}
