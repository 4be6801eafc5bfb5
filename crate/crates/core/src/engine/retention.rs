//! Operator retention sweep: train parents on a fixed problem distribution,
//! snapshot them, apply every operator and watch the children retrain.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{EngineConfig, EngineError};
use crate::adapter::AdapterState;
use crate::env::{
    expected_pass_rate, generate_problem, init_adapter, solve_problem, student_base, teacher_base,
    Problem, StudentPolicy, TaskType, TeacherPolicy, NUM_ACTIONS, NUM_FEATURES, STUDENT_SLOT,
    TEACHER_SLOT,
};
use crate::dsl::grammar::{MAX_PRODUCTIONS, NUM_CONTEXTS};
use crate::ops::{apply_operator, OperatorId};
use crate::rl::{
    apply_gradients, compute_advantages, factor_gradients, reward_student, OptimizerState,
    RolloutBatch,
};
use crate::rng::RngStream;
use crate::tensor::Tensor2D;

const TAG_RETENTION: u64 = 0x5245_5445;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CrossoverParents {
    /// One parent trained only on infer-output problems, the other only on
    /// infer-input problems.
    #[default]
    Split,
    /// Two parents trained on the mixed distribution from different seeds.
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetentionConfig {
    pub snapshots: Vec<u64>,
    pub retrain_steps: u64,
    /// Problems per task type in the training pool.
    pub pool_per_type: usize,
    /// Problems per task type in the held-out evaluation set.
    pub eval_per_type: usize,
    /// Problems drawn per update step.
    pub batch_problems: usize,
    pub rollouts: usize,
    /// Unset means the engine learning rate.
    pub lr: Option<f64>,
    pub crossover_parents: CrossoverParents,
    pub operators: Vec<OperatorId>,
    /// Fraction of the parent snapshot reward a child must reach to count as
    /// recovered.
    pub recovery_fraction: f64,
}

impl Default for RetentionConfig {
    fn default() -> Self {
        Self {
            snapshots: vec![5, 10, 25, 50, 100],
            retrain_steps: 50,
            pool_per_type: 256,
            eval_per_type: 128,
            batch_problems: 8,
            rollouts: 8,
            lr: None,
            crossover_parents: CrossoverParents::Split,
            operators: OperatorId::ALL.to_vec(),
            recovery_fraction: 0.9,
        }
    }
}

impl RetentionConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: &str| Err(EngineError::Config(format!("retention: {m}")));
        if self.snapshots.is_empty() {
            return bad("need at least one snapshot");
        }
        if self.pool_per_type == 0 || self.eval_per_type == 0 {
            return bad("pool and eval sizes must be positive");
        }
        if self.batch_problems == 0 || self.rollouts == 0 {
            return bad("batch_problems and rollouts must be positive");
        }
        if !(self.recovery_fraction > 0.0 && self.recovery_fraction <= 1.0) {
            return bad("recovery_fraction must lie in (0, 1]");
        }
        if matches!(self.lr, Some(lr) if !(lr >= 0.0 && lr.is_finite())) {
            return bad("lr must be finite and non-negative");
        }
        Ok(())
    }

    fn parent_steps(&self) -> u64 {
        self.snapshots.iter().max().copied().unwrap_or(0) + self.retrain_steps
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionRow {
    pub op: OperatorId,
    pub snapshot: u64,
    /// The reference: parent reward at the snapshot (mean of both parents'
    /// own-task rewards for split crossovers).
    pub parent_reward: f64,
    /// Child reward before retraining and after each of the retrain steps.
    pub child_curve: Vec<f64>,
    /// Parent reward over the same absolute steps, continuing its own run.
    pub parent_curve: Vec<f64>,
    /// First retrain step at which the child reached the recovery threshold.
    pub recovery_step: Option<u64>,
    /// Child reward per task type, before and after retraining.
    pub child_task_start: BTreeMap<String, f64>,
    pub child_task_end: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParentCurve {
    pub name: String,
    pub task: Option<TaskType>,
    /// Reward on the parent's own training distribution at steps `0..=T`.
    pub curve: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionReport {
    pub recovery_fraction: f64,
    pub parents: Vec<ParentCurve>,
    pub rows: Vec<RetentionRow>,
}

impl RetentionReport {
    pub fn row(&self, op: OperatorId, snapshot: u64) -> Option<&RetentionRow> {
        self.rows.iter().find(|r| r.op == op && r.snapshot == snapshot)
    }

    /// Long-format curves: one line per (operator, snapshot, retrain step).
    pub fn to_csv(&self) -> String {
        let mut s = String::from("op,snapshot,offset,step,child_reward,parent_reward,parent_snapshot_reward\n");
        for r in &self.rows {
            for (k, c) in r.child_curve.iter().enumerate() {
                let p = r.parent_curve.get(k).copied().unwrap_or(f64::NAN);
                let _ = writeln!(
                    s,
                    "{},{},{k},{},{c:.6},{p:.6},{:.6}",
                    r.op,
                    r.snapshot,
                    r.snapshot + k as u64,
                    r.parent_reward
                );
            }
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::from("op,snapshot,parent_reward,child_start,child_end,recovery_step\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:.6},{:.6},{:.6},{}",
                r.op,
                r.snapshot,
                r.parent_reward,
                r.child_curve[0],
                r.child_curve.last().copied().unwrap_or(f64::NAN),
                r.recovery_step.map(|k| k.to_string()).unwrap_or_default()
            );
        }
        s
    }
}

struct Problems {
    train: Vec<Problem>,
    eval: Vec<Problem>,
}

impl Problems {
    fn train_of(&self, task: Option<TaskType>) -> Vec<&Problem> {
        self.train
            .iter()
            .filter(|p| task.is_none_or(|t| p.task_type == t))
            .collect()
    }
}

fn draw_valid(teacher: &TeacherPolicy, tt: TaskType, n: usize, rng: &mut RngStream) -> Vec<Problem> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let p = generate_problem(teacher, tt, rng).problem;
        if p.valid {
            out.push(p);
        }
    }
    out
}

struct Trainer<'a> {
    cfg: &'a EngineConfig,
    base: Tensor2D,
    problems: Problems,
    lr: f64,
}

impl Trainer<'_> {
    fn policy(&self, a: &AdapterState) -> Result<StudentPolicy, EngineError> {
        Ok(StudentPolicy::new(&self.base, a, self.cfg.temperature)?)
    }

    /// Mean exact pass rate on the evaluation problems of `task` (all if `None`).
    fn reward(&self, a: &AdapterState, task: Option<TaskType>) -> Result<f64, EngineError> {
        let pol = self.policy(a)?;
        let set: Vec<&Problem> = self
            .problems
            .eval
            .iter()
            .filter(|p| task.is_none_or(|t| p.task_type == t))
            .collect();
        Ok(set.iter().map(|p| expected_pass_rate(&pol, p)).sum::<f64>() / set.len() as f64)
    }

    fn step(
        &self,
        a: &AdapterState,
        opt: &mut OptimizerState,
        task: Option<TaskType>,
        rng: &mut RngStream,
    ) -> Result<AdapterState, EngineError> {
        let pol = self.policy(a)?;
        let pool = self.problems.train_of(task);
        let rc = &self.cfg.retention;
        let mut batch = RolloutBatch::default();
        for _ in 0..rc.batch_problems {
            let p = pool[rng.below(pool.len())];
            let out = solve_problem(&pol, p, rc.rollouts, rng)?;
            batch
                .rewards
                .push(out.verdicts.iter().map(|&v| reward_student(v)).collect());
            batch.grads.push(
                out.grads
                    .into_iter()
                    .map(|g| [(STUDENT_SLOT.to_string(), g)].into_iter().collect())
                    .collect(),
            );
        }
        let adv = compute_advantages(&batch.rewards);
        let grads = factor_gradients(a, &batch, &adv)?;
        Ok(apply_gradients(a, &grads, self.lr, &self.cfg.optimizer, opt))
    }

    /// Trains from `init` for `steps`, returning the adapter after every step
    /// (index 0 is `init`) and the reward curve on `task`.
    fn train(
        &self,
        init: AdapterState,
        steps: u64,
        task: Option<TaskType>,
        seed: u64,
    ) -> Result<(Vec<AdapterState>, Vec<f64>), EngineError> {
        let mut opt = OptimizerState::default();
        let mut curve = vec![self.reward(&init, task)?];
        let mut states = vec![init];
        for k in 0..steps {
            let mut rng = RngStream::derive(seed, &[k]);
            let next = self.step(states.last().expect("nonempty"), &mut opt, task, &mut rng)?;
            curve.push(self.reward(&next, task)?);
            states.push(next);
        }
        Ok((states, curve))
    }
}

fn task_rewards(t: &Trainer<'_>, a: &AdapterState) -> Result<BTreeMap<String, f64>, EngineError> {
    TaskType::ALL
        .iter()
        .map(|&tt| Ok((tt.name().to_string(), t.reward(a, Some(tt))?)))
        .collect()
}

/// Runs the sweep for `cfg.retention`. Children are always retrained on the
/// mixed distribution and scored on the mixed evaluation set.
pub fn retention_benchmark(cfg: &EngineConfig) -> Result<RetentionReport, EngineError> {
    cfg.validate()?;
    let rc = &cfg.retention;
    let seed = cfg.resolved_seed();
    let tag = |xs: &[u64]| {
        let mut v = vec![TAG_RETENTION];
        v.extend_from_slice(xs);
        crate::rng::derive_seed(seed, &v)
    };
    let mut init_rng = RngStream::new(tag(&[0]));
    let zero_teacher = init_adapter(
        &[(TEACHER_SLOT, NUM_CONTEXTS, MAX_PRODUCTIONS)],
        cfg.rank,
        cfg.resolved_scaling(),
        0.0,
        &mut init_rng,
    )?;
    let teacher = TeacherPolicy::new(
        &teacher_base(cfg.teacher_base),
        &zero_teacher,
        cfg.temperature,
        cfg.max_gen_depth,
    )?;
    let mut prng = RngStream::new(tag(&[1]));
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for tt in TaskType::ALL {
        train.extend(draw_valid(&teacher, tt, rc.pool_per_type, &mut prng));
        eval.extend(draw_valid(&teacher, tt, rc.eval_per_type, &mut prng));
    }
    let trainer = Trainer {
        cfg,
        base: student_base(),
        problems: Problems { train, eval },
        lr: rc.lr.unwrap_or(cfg.lr),
    };
    let fresh = |k: u64| {
        init_adapter(
            &[(STUDENT_SLOT, NUM_ACTIONS, NUM_FEATURES)],
            cfg.rank,
            cfg.resolved_scaling(),
            cfg.init_std,
            &mut RngStream::new(tag(&[2, k])),
        )
    };
    let horizon = rc.parent_steps();
    let (main, main_curve) = trainer.train(fresh(0)?, horizon, None, tag(&[3, 0]))?;
    let (second_task, third_task) = match rc.crossover_parents {
        CrossoverParents::Split => (Some(TaskType::InferOutput), Some(TaskType::InferInput)),
        CrossoverParents::Mixed => (None, None),
    };
    let (p1, p1_curve) = trainer.train(fresh(1)?, horizon, second_task, tag(&[3, 1]))?;
    let (p2, p2_curve) = trainer.train(fresh(2)?, horizon, third_task, tag(&[3, 2]))?;
    let mut rows = Vec::new();
    for &snap in &rc.snapshots {
        let s = snap as usize;
        for &op in &rc.operators {
            // Keyed by operator identity so a row does not depend on which
            // other operators share the sweep.
            let oi = OperatorId::ALL.iter().position(|&o| o == op).expect("known operator");
            let (parents, parent_reward, parent_curve): (Vec<(&str, &AdapterState)>, f64, Vec<f64>) =
                if op.arity() == 1 {
                    (
                        vec![("main", &main[s])],
                        main_curve[s],
                        main_curve[s..=s + rc.retrain_steps as usize].to_vec(),
                    )
                } else {
                    let mean_curve: Vec<f64> = (s..=s + rc.retrain_steps as usize)
                        .map(|k| 0.5 * (p1_curve[k] + p2_curve[k]))
                        .collect();
                    (
                        vec![("p1", &p1[s]), ("p2", &p2[s])],
                        mean_curve[0],
                        mean_curve,
                    )
                };
            let child = apply_operator(op, &parents, &cfg.operators, tag(&[4, snap, oi as u64]))?;
            let child_task_start = task_rewards(&trainer, &child.adapter)?;
            let (states, child_curve) =
                trainer.train(child.adapter, rc.retrain_steps, None, tag(&[5, snap, oi as u64]))?;
            let child_task_end = task_rewards(&trainer, states.last().expect("nonempty"))?;
            let threshold = rc.recovery_fraction * parent_reward;
            let recovery_step = child_curve
                .iter()
                .position(|&r| r >= threshold)
                .map(|k| k as u64);
            rows.push(RetentionRow {
                op,
                snapshot: snap,
                parent_reward,
                child_curve,
                parent_curve,
                recovery_step,
                child_task_start,
                child_task_end,
            });
        }
    }
    let parents = vec![
        ParentCurve {
            name: "main".into(),
            task: None,
            curve: main_curve,
        },
        ParentCurve {
            name: "p1".into(),
            task: second_task,
            curve: p1_curve,
        },
        ParentCurve {
            name: "p2".into(),
            task: third_task,
            curve: p2_curve,
        },
    ];
    Ok(RetentionReport {
        recovery_fraction: rc.recovery_fraction,
        parents,
        rows,
    })
}
