//! Teacher and student policies over frozen logit tables with low-rank
//! adapters, problem generation, verification and matchups.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{effective_delta, AdapterError, AdapterState, FactorPair};
use crate::dsl::grammar::{
    context_index, default_base_logits, derive, NonTerminal, MAX_PRODUCTIONS, NUM_CONTEXTS,
};
use crate::dsl::token::VOCAB_SIZE;
use crate::dsl::{complexity, enumerate_io, parse, ComplexityDescriptor, Program, INPUT_RANGE, MODULUS};
use crate::ratings::{decide_outcome, MatchOutcome};
use crate::rl::{
    entropy, logit_score, masked_softmax, reward_student, reward_teacher, solve_rate, DeltaGrad,
    RolloutBatch, SampleGrad, StudentVerdict,
};
use crate::rng::RngStream;
use crate::tensor::Tensor2D;

pub const TEACHER_SLOT: &str = "grammar";
pub const STUDENT_SLOT: &str = "head";
/// 64 answers plus the explicit malformed action.
pub const NUM_ACTIONS: usize = MODULUS as usize + 1;
pub const MALFORMED_ACTION: usize = MODULUS as usize;
/// Token counts, four metrics, payload one-hot, task flag, bias.
pub const NUM_FEATURES: usize = VOCAB_SIZE + 4 + INPUT_RANGE as usize + 2;
const TOKEN_SCALE: f64 = 8.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error("policy adapter lacks slot {0:?} with the expected shape")]
    Slot(&'static str),
    #[error("invalid problem passed to the solver")]
    InvalidProblem,
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    InferInput,
    InferOutput,
}

impl TaskType {
    pub const ALL: [TaskType; 2] = [TaskType::InferInput, TaskType::InferOutput];

    pub fn name(self) -> &'static str {
        match self {
            TaskType::InferInput => "infer_input",
            TaskType::InferOutput => "infer_output",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TeacherBaseKind {
    #[default]
    Shaped,
    Uniform,
}

/// Frozen logit table, `NUM_CONTEXTS x MAX_PRODUCTIONS`; the same row repeats
/// for every depth bucket of a nonterminal.
pub fn teacher_base(kind: TeacherBaseKind) -> Tensor2D {
    let rows = default_base_logits();
    Tensor2D::from_fn(NUM_CONTEXTS, MAX_PRODUCTIONS, |c, p| match kind {
        TeacherBaseKind::Uniform => 0.0,
        TeacherBaseKind::Shaped => {
            let v = rows[c / crate::dsl::grammar::DEPTH_BUCKETS][p];
            if v.is_finite() {
                v as f32
            } else {
                0.0
            }
        }
    })
}

pub fn student_base() -> Tensor2D {
    Tensor2D::zeros(NUM_ACTIONS, NUM_FEATURES)
}

/// Fresh adapter: `A ~ N(0, init_std)`, `B = 0`, so the delta starts at zero.
pub fn init_adapter(
    slots: &[(&str, usize, usize)],
    rank: usize,
    scaling: f32,
    init_std: f32,
    rng: &mut RngStream,
) -> Result<AdapterState, AdapterError> {
    let mut st = AdapterState::new(rank, scaling);
    for &(name, d_out, d_in) in slots {
        let a = Tensor2D::from_fn(rank, d_in, |_, _| init_std * rng.normal());
        let b = Tensor2D::zeros(d_out, rank);
        st = st.with_slot(name, FactorPair::new(a, b)?)?;
    }
    Ok(st)
}

fn slot_delta(
    adapter: &AdapterState,
    slot: &'static str,
    rows: usize,
    cols: usize,
) -> Result<Tensor2D, EnvError> {
    let pair = adapter.slot(slot).ok_or(EnvError::Slot(slot))?;
    if pair.d_out() != rows || pair.d_in() != cols {
        return Err(EnvError::Slot(slot));
    }
    Ok(effective_delta(pair)?)
}

#[derive(Debug, Clone)]
pub struct TeacherPolicy {
    /// `base + ΔW`, row-major `NUM_CONTEXTS x MAX_PRODUCTIONS`.
    logits: Vec<f64>,
    pub temperature: f64,
    pub max_depth: usize,
}

/// One production choice during a derivation.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivationStep {
    pub context: usize,
    pub mask: [bool; MAX_PRODUCTIONS],
    pub choice: usize,
}

impl TeacherPolicy {
    pub fn new(
        base: &Tensor2D,
        adapter: &AdapterState,
        temperature: f64,
        max_depth: usize,
    ) -> Result<Self, EnvError> {
        if !(temperature > 0.0) {
            return Err(EnvError::Temperature(temperature));
        }
        let delta = slot_delta(adapter, TEACHER_SLOT, NUM_CONTEXTS, MAX_PRODUCTIONS)?;
        let logits = base
            .data()
            .iter()
            .zip(delta.data())
            .map(|(&b, &d)| b as f64 + d as f64)
            .collect();
        Ok(Self {
            logits,
            temperature,
            max_depth,
        })
    }

    pub fn probs(&self, context: usize, mask: &[bool; MAX_PRODUCTIONS]) -> Vec<f64> {
        let row = &self.logits[context * MAX_PRODUCTIONS..(context + 1) * MAX_PRODUCTIONS];
        masked_softmax(row, mask, self.temperature)
    }

    /// Recomputes `Σ log π` of a recorded derivation.
    pub fn trace_log_prob(&self, steps: &[DerivationStep]) -> f64 {
        steps
            .iter()
            .map(|s| self.probs(s.context, &s.mask)[s.choice].ln())
            .sum()
    }
}

#[derive(Debug, Clone)]
pub struct StudentPolicy {
    /// `base + ΔW`, row-major `NUM_ACTIONS x NUM_FEATURES`.
    weights: Vec<f64>,
    pub temperature: f64,
}

impl StudentPolicy {
    pub fn new(base: &Tensor2D, adapter: &AdapterState, temperature: f64) -> Result<Self, EnvError> {
        if !(temperature > 0.0) {
            return Err(EnvError::Temperature(temperature));
        }
        let delta = slot_delta(adapter, STUDENT_SLOT, NUM_ACTIONS, NUM_FEATURES)?;
        let weights = base
            .data()
            .iter()
            .zip(delta.data())
            .map(|(&b, &d)| b as f64 + d as f64)
            .collect();
        Ok(Self {
            weights,
            temperature,
        })
    }

    pub fn probs(&self, features: &[f64]) -> Vec<f64> {
        let logits: Vec<f64> = self
            .weights
            .chunks(NUM_FEATURES)
            .map(|row| row.iter().zip(features).map(|(w, f)| w * f).sum())
            .collect();
        masked_softmax(&logits, &[true; NUM_ACTIONS], self.temperature)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub task_type: TaskType,
    /// `None` when the derivation overflowed.
    pub program: Option<Program>,
    /// Input `x` for infer-output, target `y` for infer-input.
    pub payload: u32,
    pub valid: bool,
    pub descriptor: Option<ComplexityDescriptor>,
    pub token_len: usize,
    /// Output for every input `0..16`, present when valid.
    pub outputs: Option<Vec<u32>>,
}

impl Problem {
    /// Builds and validates a problem; `payload_x` seeds the payload.
    pub fn from_program(task_type: TaskType, program: Option<Program>, payload_x: u32) -> Self {
        let Some(program) = program else {
            return Self {
                task_type,
                program: None,
                payload: payload_x,
                valid: false,
                descriptor: None,
                token_len: 0,
                outputs: None,
            };
        };
        let tokens = program.tokens();
        let parsed_ok = parse(&tokens).map(|p| p == program).unwrap_or(false);
        let outputs = if parsed_ok {
            enumerate_io(&program).map(|io| io.into_iter().map(|(_, y)| y).collect::<Vec<_>>())
        } else {
            None
        };
        let payload = match (task_type, &outputs) {
            (TaskType::InferInput, Some(out)) => out[payload_x as usize],
            _ => payload_x,
        };
        Self {
            task_type,
            descriptor: Some(complexity(&program)),
            token_len: tokens.len(),
            valid: outputs.is_some(),
            outputs,
            program: Some(program),
            payload,
        }
    }

    pub fn text(&self) -> Option<String> {
        self.program.as_ref().map(Program::compact)
    }

    /// Verdict for one answer index in `0..NUM_ACTIONS`.
    pub fn judge(&self, action: usize) -> StudentVerdict {
        let outputs = self.outputs.as_ref().expect("judge on a valid problem");
        if action == MALFORMED_ACTION {
            return StudentVerdict::Malformed;
        }
        let correct = match self.task_type {
            TaskType::InferOutput => outputs[self.payload as usize] == action as u32,
            TaskType::InferInput => action < INPUT_RANGE as usize && outputs[action] == self.payload,
        };
        if correct {
            StudentVerdict::Correct
        } else {
            StudentVerdict::WrongWellformed
        }
    }

    pub fn features(&self) -> Vec<f64> {
        let mut f = vec![0.0; NUM_FEATURES];
        if let Some(p) = &self.program {
            for t in p.tokens() {
                f[t.index()] += 1.0 / TOKEN_SCALE;
            }
        }
        if let Some(d) = &self.descriptor {
            f[VOCAB_SIZE..VOCAB_SIZE + 4].copy_from_slice(&d.normalized());
        }
        let base = VOCAB_SIZE + 4;
        f[base + (self.payload % INPUT_RANGE) as usize] = 1.0;
        let tail = base + INPUT_RANGE as usize;
        f[tail] = if self.task_type == TaskType::InferInput {
            1.0
        } else {
            0.0
        };
        f[tail + 1] = 1.0;
        f
    }
}

#[derive(Debug, Clone)]
pub struct GeneratedProblem {
    pub problem: Problem,
    pub log_prob: f64,
    pub steps: Vec<DerivationStep>,
    /// `∂ log p(derivation) / ∂ΔW` for the grammar slot.
    pub grad: DeltaGrad,
}

pub fn generate_problem(
    teacher: &TeacherPolicy,
    task_type: TaskType,
    rng: &mut RngStream,
) -> GeneratedProblem {
    let mut steps = Vec::new();
    let mut grad = DeltaGrad::zeros(NUM_CONTEXTS, MAX_PRODUCTIONS);
    let mut log_prob = 0.0;
    let mut chooser = |nt: NonTerminal, depth: usize, mask: &[bool; MAX_PRODUCTIONS]| {
        let context = context_index(nt, depth);
        let probs = teacher.probs(context, mask);
        let choice = rng.weighted_index(&probs);
        log_prob += probs[choice].ln();
        grad.add_to_row(context, &logit_score(&probs, choice, teacher.temperature));
        steps.push(DerivationStep {
            context,
            mask: *mask,
            choice,
        });
        choice
    };
    let program = derive(&mut chooser, teacher.max_depth).ok();
    let x = rng.below(INPUT_RANGE as usize) as u32;
    GeneratedProblem {
        problem: Problem::from_program(task_type, program, x),
        log_prob,
        steps,
        grad,
    }
}

#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub bits: Vec<bool>,
    pub verdicts: Vec<StudentVerdict>,
    pub grads: Vec<DeltaGrad>,
    pub entropy: f64,
}

pub fn solve_problem(
    student: &StudentPolicy,
    problem: &Problem,
    n: usize,
    rng: &mut RngStream,
) -> Result<SolveOutcome, EnvError> {
    if !problem.valid {
        return Err(EnvError::InvalidProblem);
    }
    let phi = problem.features();
    let probs = student.probs(&phi);
    let mut out = SolveOutcome {
        bits: Vec::with_capacity(n),
        verdicts: Vec::with_capacity(n),
        grads: Vec::with_capacity(n),
        entropy: entropy(&probs),
    };
    for _ in 0..n {
        let a = rng.weighted_index(&probs);
        let v = problem.judge(a);
        let mut g = DeltaGrad::zeros(NUM_ACTIONS, NUM_FEATURES);
        g.add_outer(&logit_score(&probs, a, student.temperature), &phi);
        out.bits.push(v == StudentVerdict::Correct);
        out.verdicts.push(v);
        out.grads.push(g);
    }
    Ok(out)
}

/// Exact expected reward of the student's answer distribution.
pub fn expected_student_reward(student: &StudentPolicy, problem: &Problem) -> f64 {
    let probs = student.probs(&problem.features());
    probs
        .iter()
        .enumerate()
        .map(|(a, p)| p * reward_student(problem.judge(a)))
        .sum()
}

/// Exact probability that one sampled answer is correct.
pub fn expected_pass_rate(student: &StudentPolicy, problem: &Problem) -> f64 {
    let probs = student.probs(&problem.features());
    probs
        .iter()
        .enumerate()
        .filter(|&(a, _)| problem.judge(a) == StudentVerdict::Correct)
        .map(|(_, p)| p)
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemRecord {
    pub task_type: TaskType,
    pub program_text: Option<String>,
    pub payload: u32,
    pub valid: bool,
    pub descriptor: Option<ComplexityDescriptor>,
    pub token_len: usize,
    pub rho: Option<f64>,
    pub bits: Vec<bool>,
    pub verdicts: Vec<StudentVerdict>,
    pub teacher_log_prob: f64,
}

#[derive(Debug, Clone)]
pub struct MatchupResult {
    pub teacher_id: u64,
    pub student_id: u64,
    pub problems: Vec<ProblemRecord>,
    pub teacher_grads: Vec<DeltaGrad>,
    /// One row per valid problem, `n` gradients each.
    pub student_grads: Vec<Vec<DeltaGrad>>,
    pub teacher_entropy: f64,
    pub student_entropy: Option<f64>,
    pub rollouts: usize,
}

impl MatchupResult {
    pub fn aggregate_rho(&self) -> Option<f64> {
        let rhos: Vec<f64> = self.problems.iter().filter_map(|p| p.rho).collect();
        if rhos.is_empty() {
            None
        } else {
            Some(rhos.iter().sum::<f64>() / rhos.len() as f64)
        }
    }

    pub fn outcome(&self) -> MatchOutcome {
        decide_outcome(self.aggregate_rho())
    }

    pub fn teacher_rewards(&self) -> Vec<f64> {
        self.problems
            .iter()
            .map(|p| reward_teacher(p.valid, p.rho.unwrap_or(0.0)))
            .collect()
    }

    /// Prompts are the task types; rollouts are the problems posed for each.
    pub fn teacher_batch(&self) -> RolloutBatch {
        let mut batch = RolloutBatch::default();
        let rewards = self.teacher_rewards();
        for tt in TaskType::ALL {
            let idx: Vec<usize> = (0..self.problems.len())
                .filter(|&i| self.problems[i].task_type == tt)
                .collect();
            if idx.is_empty() {
                continue;
            }
            batch.rewards.push(idx.iter().map(|&i| rewards[i]).collect());
            batch.grads.push(
                idx.iter()
                    .map(|&i| single(TEACHER_SLOT, self.teacher_grads[i].clone()))
                    .collect(),
            );
        }
        batch
    }

    pub fn student_batch(&self) -> RolloutBatch {
        let mut batch = RolloutBatch::default();
        let valid = self.problems.iter().filter(|p| p.valid);
        for (p, grads) in valid.zip(&self.student_grads) {
            batch
                .rewards
                .push(p.verdicts.iter().map(|&v| reward_student(v)).collect());
            batch
                .grads
                .push(grads.iter().map(|g| single(STUDENT_SLOT, g.clone())).collect());
        }
        batch
    }
}

fn single(slot: &str, g: DeltaGrad) -> SampleGrad {
    [(slot.to_string(), g)].into_iter().collect()
}

/// Generates `prompts_per_type` problems of each task type and has the
/// student attempt every valid one `n` times.
pub fn run_matchup(
    teacher: &TeacherPolicy,
    student: &StudentPolicy,
    ids: (u64, u64),
    prompts_per_type: usize,
    n: usize,
    rng: &mut RngStream,
) -> MatchupResult {
    let mut res = MatchupResult {
        teacher_id: ids.0,
        student_id: ids.1,
        problems: Vec::new(),
        teacher_grads: Vec::new(),
        student_grads: Vec::new(),
        teacher_entropy: 0.0,
        student_entropy: None,
        rollouts: n,
    };
    let (mut t_ent, mut t_cnt) = (0.0, 0usize);
    let mut s_ent = Vec::new();
    for tt in TaskType::ALL {
        for _ in 0..prompts_per_type {
            let gen = generate_problem(teacher, tt, rng);
            for s in &gen.steps {
                if s.mask.iter().filter(|&&m| m).count() > 1 {
                    t_ent += entropy(&teacher.probs(s.context, &s.mask));
                    t_cnt += 1;
                }
            }
            let p = gen.problem;
            let mut rec = ProblemRecord {
                task_type: tt,
                program_text: p.text(),
                payload: p.payload,
                valid: p.valid,
                descriptor: p.descriptor,
                token_len: p.token_len,
                rho: None,
                bits: Vec::new(),
                verdicts: Vec::new(),
                teacher_log_prob: gen.log_prob,
            };
            if p.valid {
                let out = solve_problem(student, &p, n, rng).expect("valid problem");
                rec.rho = Some(solve_rate(&out.bits));
                rec.bits = out.bits;
                rec.verdicts = out.verdicts;
                s_ent.push(out.entropy);
                res.student_grads.push(out.grads);
            }
            res.teacher_grads.push(gen.grad);
            res.problems.push(rec);
        }
    }
    res.teacher_entropy = if t_cnt == 0 { 0.0 } else { t_ent / t_cnt as f64 };
    if !s_ent.is_empty() {
        res.student_entropy = Some(s_ent.iter().sum::<f64>() / s_ent.len() as f64);
    }
    res
}

/// Mean exact entropy over a sample of categorical distributions.
pub fn policy_entropy<I>(dists: I) -> f64
where
    I: IntoIterator<Item = Vec<f64>>,
{
    let (mut s, mut n) = (0.0, 0usize);
    for d in dists {
        s += entropy(&d);
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}
