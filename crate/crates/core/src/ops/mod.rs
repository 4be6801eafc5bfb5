//! Weight-space evolution operators over low-rank adapters.
//!
//! Every operator consumes one or two parents with identical slot layouts and
//! emits a child with the same slot names, rank, and shapes. No operator
//! retrains anything.

mod crossover;
mod mutation;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{AdapterError, AdapterState};
use crate::rng::RngStream;

pub use crossover::{
    linear_0_5, x1_dare, x2_layerwise, x3_svd_subspace, x4_extrapolative, x5_linear, x6_ties,
    x7_della, x8_slerp, x9_fisher,
};
pub use mutation::{
    copy_parent, m1_perturb_triple, m1_svd, m2_layer_gauss, m3_component_mask, m4_full_gauss,
    m5_neftune, m6_rank_perturb,
};

#[derive(Debug, Error)]
pub enum OpError {
    #[error("unknown operator id '{0}'")]
    UnknownOperator(String),
    #[error("operator {op} takes {expected} parent(s), got {got}")]
    Arity {
        op: OperatorId,
        expected: usize,
        got: usize,
    },
    #[error("parent mismatch: {0}")]
    Parents(#[from] AdapterError),
    #[error("invalid operator parameters: {0}")]
    Params(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorId {
    M1Svd,
    M2LayerGauss,
    M3ComponentMask,
    M4FullGauss,
    M5Neftune,
    M6RankPerturb,
    CopyParent,
    X1Dare,
    X2Layerwise,
    X3SvdSubspace,
    X4Extrapolative,
    X5Linear,
    X6Ties,
    X7Della,
    X8Slerp,
    X9Fisher,
    #[serde(rename = "linear_0_5")]
    Linear05,
}

impl OperatorId {
    pub const ALL: [OperatorId; 17] = [
        OperatorId::M1Svd,
        OperatorId::M2LayerGauss,
        OperatorId::M3ComponentMask,
        OperatorId::M4FullGauss,
        OperatorId::M5Neftune,
        OperatorId::M6RankPerturb,
        OperatorId::CopyParent,
        OperatorId::X1Dare,
        OperatorId::X2Layerwise,
        OperatorId::X3SvdSubspace,
        OperatorId::X4Extrapolative,
        OperatorId::X5Linear,
        OperatorId::X6Ties,
        OperatorId::X7Della,
        OperatorId::X8Slerp,
        OperatorId::X9Fisher,
        OperatorId::Linear05,
    ];

    /// The operators used inside the live training loop.
    pub const LIVE: [OperatorId; 8] = [
        OperatorId::M1Svd,
        OperatorId::M2LayerGauss,
        OperatorId::M3ComponentMask,
        OperatorId::M4FullGauss,
        OperatorId::X1Dare,
        OperatorId::X2Layerwise,
        OperatorId::X3SvdSubspace,
        OperatorId::X4Extrapolative,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OperatorId::M1Svd => "m1_svd",
            OperatorId::M2LayerGauss => "m2_layer_gauss",
            OperatorId::M3ComponentMask => "m3_component_mask",
            OperatorId::M4FullGauss => "m4_full_gauss",
            OperatorId::M5Neftune => "m5_neftune",
            OperatorId::M6RankPerturb => "m6_rank_perturb",
            OperatorId::CopyParent => "copy_parent",
            OperatorId::X1Dare => "x1_dare",
            OperatorId::X2Layerwise => "x2_layerwise",
            OperatorId::X3SvdSubspace => "x3_svd_subspace",
            OperatorId::X4Extrapolative => "x4_extrapolative",
            OperatorId::X5Linear => "x5_linear",
            OperatorId::X6Ties => "x6_ties",
            OperatorId::X7Della => "x7_della",
            OperatorId::X8Slerp => "x8_slerp",
            OperatorId::X9Fisher => "x9_fisher",
            OperatorId::Linear05 => "linear_0_5",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            OperatorId::M1Svd
            | OperatorId::M2LayerGauss
            | OperatorId::M3ComponentMask
            | OperatorId::M4FullGauss
            | OperatorId::M5Neftune
            | OperatorId::M6RankPerturb
            | OperatorId::CopyParent => 1,
            _ => 2,
        }
    }

    pub fn is_mutation(self) -> bool {
        self.arity() == 1
    }

    /// Whether the operator draws from its random stream.
    pub fn uses_rng(self) -> bool {
        !matches!(
            self,
            OperatorId::CopyParent
                | OperatorId::X5Linear
                | OperatorId::X6Ties
                | OperatorId::X8Slerp
                | OperatorId::X9Fisher
                | OperatorId::Linear05
        )
    }
}

impl fmt::Display for OperatorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OperatorId {
    type Err = OpError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OperatorId::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| OpError::UnknownOperator(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OperatorParams {
    pub m1_eps: f32,
    pub m2_eps: f32,
    pub m2_frac: f64,
    pub m3_rho: f64,
    pub m4_eps: f32,
    pub neft_alpha: f32,
    pub rank_k: usize,
    pub rank_sigma: f32,
    pub dare_p: f64,
    pub ties_tau: f64,
    pub della_eps: f64,
    pub slerp_t: f64,
    pub eta_min: f64,
    pub eta_max: f64,
    pub lin_alpha: f32,
    /// Fixed split point for `x3_svd_subspace`; `None` draws it.
    pub x3_k: Option<usize>,
}

impl Default for OperatorParams {
    fn default() -> Self {
        Self {
            m1_eps: 0.1,
            m2_eps: 0.1,
            m2_frac: 0.33,
            m3_rho: 0.3,
            m4_eps: 0.15,
            neft_alpha: 10.0,
            rank_k: 2,
            rank_sigma: 0.05,
            dare_p: 0.7,
            ties_tau: 0.2,
            della_eps: 0.1,
            slerp_t: 0.5,
            eta_min: 1.0,
            eta_max: 1.5,
            lin_alpha: 0.5,
            x3_k: None,
        }
    }
}

impl OperatorParams {
    pub fn validate(&self) -> Result<(), OpError> {
        let probs = [
            ("m2_frac", self.m2_frac),
            ("m3_rho", self.m3_rho),
            ("dare_p", self.dare_p),
            ("ties_tau", self.ties_tau),
            ("della_eps", self.della_eps),
            ("slerp_t", self.slerp_t),
            ("lin_alpha", self.lin_alpha as f64),
        ];
        for (name, v) in probs {
            if !(0.0..=1.0).contains(&v) {
                return Err(OpError::Params(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if !(self.eta_min >= 0.0 && self.eta_max >= self.eta_min) {
            return Err(OpError::Params(format!(
                "need eta_max >= eta_min >= 0, got ({}, {})",
                self.eta_min, self.eta_max
            )));
        }
        for (name, v) in [
            ("m1_eps", self.m1_eps),
            ("m2_eps", self.m2_eps),
            ("m4_eps", self.m4_eps),
            ("neft_alpha", self.neft_alpha),
            ("rank_sigma", self.rank_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(OpError::Params(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Where a child came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub op: OperatorId,
    pub seed: u64,
    pub parents: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Child {
    pub adapter: AdapterState,
    pub provenance: Provenance,
}

/// `⌈frac · n⌉`, robust to representation error in `frac · n`.
pub(crate) fn ceil_count(frac: f64, n: usize) -> usize {
    let x = frac * n as f64;
    let c = (x - 1e-9).ceil().max(0.0) as usize;
    c.min(n)
}

/// Registry dispatch. `parents` pairs an identifier (recorded in provenance)
/// with each parent adapter.
pub fn apply_operator(
    id: OperatorId,
    parents: &[(&str, &AdapterState)],
    params: &OperatorParams,
    seed: u64,
) -> Result<Child, OpError> {
    if parents.len() != id.arity() {
        return Err(OpError::Arity {
            op: id,
            expected: id.arity(),
            got: parents.len(),
        });
    }
    params.validate()?;
    let mut rng = RngStream::new(seed);
    let p1 = parents[0].1;
    let adapter = match id {
        OperatorId::M1Svd => m1_svd(p1, params, &mut rng)?,
        OperatorId::M2LayerGauss => m2_layer_gauss(p1, params, &mut rng)?,
        OperatorId::M3ComponentMask => m3_component_mask(p1, params, &mut rng)?,
        OperatorId::M4FullGauss => m4_full_gauss(p1, params, &mut rng)?,
        OperatorId::M5Neftune => m5_neftune(p1, params, &mut rng)?,
        OperatorId::M6RankPerturb => m6_rank_perturb(p1, params, &mut rng)?,
        OperatorId::CopyParent => copy_parent(p1),
        _ => {
            let p2 = parents[1].1;
            match id {
                OperatorId::X1Dare => x1_dare(p1, p2, params, &mut rng)?,
                OperatorId::X2Layerwise => x2_layerwise(p1, p2, &mut rng)?,
                OperatorId::X3SvdSubspace => x3_svd_subspace(p1, p2, params, &mut rng)?,
                OperatorId::X4Extrapolative => x4_extrapolative(p1, p2, params, &mut rng)?,
                OperatorId::X5Linear => x5_linear(p1, p2, params)?,
                OperatorId::X6Ties => x6_ties(p1, p2, params)?,
                OperatorId::X7Della => x7_della(p1, p2, params, &mut rng)?,
                OperatorId::X8Slerp => x8_slerp(p1, p2, params)?,
                OperatorId::X9Fisher => x9_fisher(p1, p2)?,
                OperatorId::Linear05 => linear_0_5(p1, p2)?,
                _ => unreachable!("mutations handled above"),
            }
        }
    };
    Ok(Child {
        adapter,
        provenance: Provenance {
            op: id,
            seed,
            parents: parents.iter().map(|(n, _)| n.to_string()).collect(),
        },
    })
}
