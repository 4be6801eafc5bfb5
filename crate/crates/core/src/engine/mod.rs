//! Training loop: matchmaking, matchups, rewards and updates, ratings and
//! periodic evolution of both sub-populations, plus the single-agent
//! baseline that generates and solves its own problems.

mod checkpoint;
mod retention;

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{AdapterError, AdapterState};
use crate::diagnostics::{
    cached_cvt, ComplexityMeans, CvtArchive, DiagError, EvolutionLine, MatchupLine, MemberRating,
    Point, ProblemLine, RunSink, StepRecord, TypeStats, STEP_SCHEMA_VERSION,
};
use crate::dsl::grammar::{MAX_PRODUCTIONS, NUM_CONTEXTS};
use crate::env::{
    init_adapter, run_matchup, student_base, teacher_base, EnvError, MatchupResult, StudentPolicy,
    TaskType, TeacherBaseKind, TeacherPolicy, NUM_ACTIONS, NUM_FEATURES, STUDENT_SLOT,
    TEACHER_SLOT,
};
use crate::ops::{apply_operator, OpError, OperatorId, OperatorParams, Provenance};
use crate::ratings::{
    lcb_rank, pfsp_sample, update_ratings, RatingConfig, RatingError, RatingState, Winner,
};
use crate::rl::{
    apply_gradients, compute_advantages, factor_gradients, merge_gradients, reward_student,
    OptimizerConfig, OptimizerState, RlError, RolloutBatch, StudentVerdict,
};
use crate::rng::{derive_seed, RngStream};
use crate::tensor::Tensor2D;

pub use checkpoint::{decode as decode_checkpoint, load_checkpoint, save_checkpoint, CheckpointError};
pub use retention::{retention_benchmark, RetentionConfig, RetentionReport, RetentionRow};

pub const DEFAULT_SEED: u64 = 42;

const TAG_INIT: u64 = 0x494e_4954;
const TAG_MATCHMAKE: u64 = 0x4d41_5443;
const TAG_PLAY: u64 = 0x504c_4159;
const TAG_EVOLVE: u64 = 0x4556_4f4c;
const TAG_CVT: u64 = 0x4356_5400;
const TAG_EVAL: u64 = 0x4556_414c;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Rl(#[from] RlError),
    #[error(transparent)]
    Rating(#[from] RatingError),
    #[error(transparent)]
    Op(#[from] OpError),
    #[error(transparent)]
    Diag(#[from] DiagError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("state does not match config: {0}")]
    State(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Population,
    SingleAgent,
    #[serde(rename = "pair_1t1s")]
    Pair1t1s,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Population => "population",
            Mode::SingleAgent => "single_agent",
            Mode::Pair1t1s => "pair_1t1s",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub mode: Mode,
    pub n_teachers: usize,
    pub n_students: usize,
    pub steps: u64,
    pub evolve_every: u64,
    pub cull_fraction: f64,
    /// Forces evolution on or off; unset means on except in `pair_1t1s`.
    pub evolution: Option<bool>,
    pub prompts_per_type: usize,
    pub rollouts: usize,
    pub temperature: f64,
    pub lr: f64,
    pub rank: usize,
    /// Adapter scaling metadata; unset means `2 * rank`.
    pub scaling: Option<f32>,
    pub init_std: f32,
    pub max_gen_depth: usize,
    pub teacher_base: TeacherBaseKind,
    pub seed: Option<u64>,
    pub operators: OperatorParams,
    pub ratings: RatingConfig,
    pub optimizer: OptimizerConfig,
    pub cvt_cells: usize,
    pub cvt_samples: usize,
    pub cvt_seed: u64,
    /// Matchup worker threads; unset means all available cores.
    pub workers: Option<usize>,
    pub retention: RetentionConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Population,
            n_teachers: 4,
            n_students: 4,
            steps: 200,
            evolve_every: 10,
            cull_fraction: 0.25,
            evolution: None,
            prompts_per_type: 4,
            rollouts: 8,
            temperature: 1.0,
            lr: 0.2,
            rank: 4,
            scaling: None,
            init_std: 1.0,
            max_gen_depth: 7,
            teacher_base: TeacherBaseKind::Shaped,
            seed: None,
            operators: OperatorParams::default(),
            ratings: RatingConfig::default(),
            optimizer: OptimizerConfig::default(),
            cvt_cells: 256,
            cvt_samples: 100_000,
            cvt_seed: 0x5eed_c0de,
            workers: None,
            retention: RetentionConfig::default(),
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: String| Err(EngineError::Config(m));
        if !(self.cull_fraction > 0.0 && self.cull_fraction < 1.0) {
            return bad(format!("cull_fraction must lie in (0, 1), got {}", self.cull_fraction));
        }
        if self.evolve_every == 0 {
            return bad("evolve_every must be at least 1".into());
        }
        if self.n_teachers == 0 || self.n_students == 0 {
            return bad("population sizes must be at least 1".into());
        }
        if self.prompts_per_type == 0 || self.rollouts == 0 {
            return bad("prompts_per_type and rollouts must be at least 1".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        if self.rank == 0 {
            return bad("rank must be at least 1".into());
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return bad(format!("init_std must be finite and >= 0, got {}", self.init_std));
        }
        if self.max_gen_depth == 0 {
            return bad("max_gen_depth must be at least 1".into());
        }
        if self.cvt_cells == 0 || self.cvt_samples < self.cvt_cells {
            return bad("need cvt_samples >= cvt_cells >= 1".into());
        }
        if self.workers == Some(0) {
            return bad("workers must be at least 1".into());
        }
        self.ratings.validate()?;
        self.operators.validate()?;
        self.retention.validate()?;
        Ok(())
    }

    pub fn resolved_seed(&self) -> u64 {
        self.seed.unwrap_or(DEFAULT_SEED)
    }

    pub fn resolved_scaling(&self) -> f32 {
        self.scaling.unwrap_or(2.0 * self.rank as f32)
    }

    pub fn evolution_enabled(&self) -> bool {
        match (self.mode, self.evolution) {
            (Mode::SingleAgent, _) => false,
            (_, Some(on)) => on,
            (Mode::Pair1t1s, None) => false,
            (Mode::Population, None) => true,
        }
    }

    /// Population sizes actually used by the mode.
    pub fn sizes(&self) -> (usize, usize) {
        match self.mode {
            Mode::Population => (self.n_teachers, self.n_students),
            Mode::Pair1t1s => (1, 1),
            Mode::SingleAgent => (1, 0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Teacher,
    Student,
}

impl Role {
    fn prefix(self) -> &'static str {
        match self {
            Role::Teacher => "t",
            Role::Student => "s",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Role::Teacher => 1,
            Role::Student => 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Member {
    pub id: u64,
    pub adapter: AdapterState,
    pub rating: RatingState,
    pub provenance: Option<Provenance>,
    pub optimizer: OptimizerState,
}

impl Member {
    fn label(&self, role: Role) -> String {
        format!("{}{}", role.prefix(), self.id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionEvent {
    pub step: u64,
    pub role: Role,
    pub culled: Vec<u64>,
    pub parents: Vec<u64>,
    pub op: OperatorId,
    pub child: u64,
    pub child_seed: u64,
}

#[derive(Debug, Clone)]
pub struct PopulationState {
    pub mode: Mode,
    pub step: u64,
    pub seed: u64,
    pub next_id: u64,
    /// In single-agent mode this holds the one agent, carrying both the
    /// grammar and the answer-head slots; `students` is then empty.
    pub teachers: Vec<Member>,
    pub students: Vec<Member>,
    pub archive: CvtArchive,
}

impl PopulationState {
    /// SHA-256 of the checkpoint encoding, with the worker count left out
    /// since it never affects results.
    pub fn state_hash(&self, cfg: &EngineConfig) -> String {
        use sha2::{Digest, Sha256};
        let cfg = EngineConfig { workers: None, ..cfg.clone() };
        let bytes = checkpoint::encode(self, &cfg).expect("encodable state");
        Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPair {
    pub teacher: u64,
    pub student: u64,
    pub solve_rate: Option<f64>,
    pub validity_rate: f64,
    pub winner: Winner,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub step: u64,
    pub mode: String,
    pub mean_solve_rate: Option<f64>,
    pub mean_validity_rate: f64,
    pub coverage: f64,
    pub pairs: Vec<EvalPair>,
}

/// Everything a step produced, ready to commit.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub state: PopulationState,
    pub record: StepRecord,
    pub problems: Vec<ProblemLine>,
    pub events: Vec<EvolutionEvent>,
}

pub struct Engine {
    cfg: EngineConfig,
    teacher_base: Tensor2D,
    student_base: Tensor2D,
    centroids: Arc<Vec<Point>>,
    pool: rayon::ThreadPool,
}

impl Engine {
    pub fn new(cfg: EngineConfig) -> Result<Self, EngineError> {
        cfg.validate()?;
        let mut pool = rayon::ThreadPoolBuilder::new();
        if let Some(w) = cfg.workers {
            pool = pool.num_threads(w);
        }
        let pool = pool
            .build()
            .map_err(|e| EngineError::Config(format!("worker pool: {e}")))?;
        let centroids = cvt_for(&cfg);
        Ok(Self {
            teacher_base: teacher_base(cfg.teacher_base),
            student_base: student_base(),
            centroids,
            pool,
            cfg,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn centroids(&self) -> Arc<Vec<Point>> {
        self.centroids.clone()
    }

    fn slots_for(&self, role: Option<Role>) -> Vec<(&'static str, usize, usize)> {
        let t = (TEACHER_SLOT, NUM_CONTEXTS, MAX_PRODUCTIONS);
        let s = (STUDENT_SLOT, NUM_ACTIONS, NUM_FEATURES);
        match role {
            Some(Role::Teacher) => vec![t],
            Some(Role::Student) => vec![s],
            None => vec![t, s],
        }
    }

    fn fresh_member(&self, id: u64, role: Option<Role>, seed: u64) -> Result<Member, EngineError> {
        let tag = role.map_or(3, Role::tag);
        let mut rng = RngStream::derive(seed, &[TAG_INIT, tag, id]);
        let adapter = init_adapter(
            &self.slots_for(role),
            self.cfg.rank,
            self.cfg.resolved_scaling(),
            self.cfg.init_std,
            &mut rng,
        )?;
        Ok(Member {
            id,
            adapter,
            rating: self.cfg.ratings.prior(),
            provenance: None,
            optimizer: OptimizerState::default(),
        })
    }

    pub fn init_state(&self) -> Result<PopulationState, EngineError> {
        let seed = self.cfg.resolved_seed();
        let (nt, ns) = self.cfg.sizes();
        let mut teachers = Vec::with_capacity(nt);
        let mut students = Vec::with_capacity(ns);
        if self.cfg.mode == Mode::SingleAgent {
            teachers.push(self.fresh_member(0, None, seed)?);
        } else {
            for i in 0..nt {
                teachers.push(self.fresh_member(i as u64, Some(Role::Teacher), seed)?);
            }
            for i in 0..ns {
                students.push(self.fresh_member((nt + i) as u64, Some(Role::Student), seed)?);
            }
        }
        Ok(PopulationState {
            mode: self.cfg.mode,
            step: 0,
            seed,
            next_id: (nt + ns) as u64,
            teachers,
            students,
            archive: CvtArchive::new(self.centroids.clone()),
        })
    }

    fn teacher_policy(&self, m: &Member) -> Result<TeacherPolicy, EnvError> {
        TeacherPolicy::new(
            &self.teacher_base,
            &m.adapter,
            self.cfg.temperature,
            self.cfg.max_gen_depth,
        )
    }

    fn student_policy(&self, m: &Member) -> Result<StudentPolicy, EnvError> {
        StudentPolicy::new(&self.student_base, &m.adapter, self.cfg.temperature)
    }

    fn check_state(&self, state: &PopulationState) -> Result<(), EngineError> {
        let (nt, ns) = self.cfg.sizes();
        if state.mode != self.cfg.mode || state.teachers.len() != nt || state.students.len() != ns {
            return Err(EngineError::State(format!(
                "state is {} with {}T+{}S, config expects {} with {nt}T+{ns}S",
                state.mode.name(),
                state.teachers.len(),
                state.students.len(),
                self.cfg.mode.name()
            )));
        }
        if state.archive.cells() != self.centroids.len() {
            return Err(EngineError::State("archive cell count differs".into()));
        }
        Ok(())
    }

    /// Runs one step on a copy of `state`; the input is never modified, so a
    /// failed step leaves nothing half-applied.
    pub fn training_step(&self, state: &PopulationState) -> Result<StepOutput, EngineError> {
        self.check_state(state)?;
        let mut next = state.clone();
        next.step += 1;
        let step = next.step;
        let (pairs, results) = match next.mode {
            Mode::SingleAgent => self.play_self(&next)?,
            _ => self.play_population(&next)?,
        };
        let mut teacher_batches: BTreeMap<usize, RolloutBatch> = BTreeMap::new();
        let mut student_batches: BTreeMap<usize, RolloutBatch> = BTreeMap::new();
        let mut lines = Vec::with_capacity(results.len());
        for (&(ti, si), res) in pairs.iter().zip(&results) {
            let outcome = res.outcome();
            if next.mode != Mode::SingleAgent {
                let (t, s) = (next.teachers[ti].rating, next.students[si].rating);
                match outcome.winner {
                    Winner::Teacher => {
                        let (w, l) = update_ratings(&t, &s, &self.cfg.ratings)?;
                        next.teachers[ti].rating = w;
                        next.students[si].rating = l;
                    }
                    Winner::Student => {
                        let (w, l) = update_ratings(&s, &t, &self.cfg.ratings)?;
                        next.students[si].rating = w;
                        next.teachers[ti].rating = l;
                    }
                    Winner::None => {}
                }
            }
            lines.push(MatchupLine {
                teacher: res.teacher_id,
                student: res.student_id,
                winner: outcome.winner,
                rho: outcome.aggregate_rho,
                valid: res.problems.iter().filter(|p| p.valid).count(),
            });
            append(teacher_batches.entry(ti).or_default(), res.teacher_batch());
            append(student_batches.entry(si).or_default(), res.student_batch());
        }
        match next.mode {
            Mode::SingleAgent => {
                let agent = &mut next.teachers[0];
                let mut grads = BTreeMap::new();
                for batch in [teacher_batches.remove(&0), student_batches.remove(&0)]
                    .into_iter()
                    .flatten()
                {
                    if batch.is_empty() {
                        continue;
                    }
                    let adv = compute_advantages(&batch.rewards);
                    merge_gradients(&mut grads, factor_gradients(&agent.adapter, &batch, &adv)?);
                }
                if !grads.is_empty() {
                    agent.adapter = apply_gradients(
                        &agent.adapter,
                        &grads,
                        self.cfg.lr,
                        &self.cfg.optimizer,
                        &mut agent.optimizer,
                    );
                }
            }
            _ => {
                for (i, batch) in teacher_batches {
                    self.update_member(&mut next.teachers[i], &batch)?;
                }
                for (i, batch) in student_batches {
                    self.update_member(&mut next.students[i], &batch)?;
                }
            }
        }
        let mut problems = Vec::new();
        for res in &results {
            for p in &res.problems {
                if let (true, Some(d)) = (p.valid, &p.descriptor) {
                    next.archive.insert(d);
                }
                problems.push(ProblemLine {
                    step,
                    teacher_id: res.teacher_id,
                    task_type: p.task_type,
                    program_text: p.program_text.clone(),
                    payload: p.payload,
                    valid: p.valid,
                    descriptor: p.descriptor,
                    rho: p.rho,
                });
            }
        }
        let events = if self.cfg.evolution_enabled() && step.is_multiple_of(self.cfg.evolve_every) {
            self.evolve_populations(&mut next)?
        } else {
            Vec::new()
        };
        let record = self.step_record(&next, &results, lines, &events);
        Ok(StepOutput {
            state: next,
            record,
            problems,
            events,
        })
    }

    fn update_member(&self, m: &mut Member, batch: &RolloutBatch) -> Result<(), EngineError> {
        if batch.is_empty() {
            return Ok(());
        }
        let adv = compute_advantages(&batch.rewards);
        let grads = factor_gradients(&m.adapter, batch, &adv)?;
        m.adapter = apply_gradients(&m.adapter, &grads, self.cfg.lr, &self.cfg.optimizer, &mut m.optimizer);
        Ok(())
    }

    fn play_rng(&self, state: &PopulationState, t: u64, s: u64) -> RngStream {
        RngStream::derive(state.seed, &[TAG_PLAY, state.step, t, s])
    }

    fn play_self(
        &self,
        state: &PopulationState,
    ) -> Result<(Vec<(usize, usize)>, Vec<MatchupResult>), EngineError> {
        let agent = &state.teachers[0];
        let teacher = self.teacher_policy(agent)?;
        let student = self.student_policy(agent)?;
        let mut rng = self.play_rng(state, agent.id, agent.id);
        let res = run_matchup(
            &teacher,
            &student,
            (agent.id, agent.id),
            self.cfg.prompts_per_type,
            self.cfg.rollouts,
            &mut rng,
        );
        Ok((vec![(0, 0)], vec![res]))
    }

    /// Each teacher draws one student by PFSP; matchups then run in parallel.
    fn play_population(
        &self,
        state: &PopulationState,
    ) -> Result<(Vec<(usize, usize)>, Vec<MatchupResult>), EngineError> {
        let mut rng = RngStream::derive(state.seed, &[TAG_MATCHMAKE, state.step]);
        let pool: Vec<RatingState> = state.students.iter().map(|s| s.rating).collect();
        let mut pairs = Vec::with_capacity(state.teachers.len());
        for (ti, t) in state.teachers.iter().enumerate() {
            pairs.push((ti, pfsp_sample(&t.rating, &pool, &self.cfg.ratings, &mut rng)?));
        }
        let teachers = state
            .teachers
            .iter()
            .map(|m| self.teacher_policy(m))
            .collect::<Result<Vec<_>, _>>()?;
        let students = state
            .students
            .iter()
            .map(|m| self.student_policy(m))
            .collect::<Result<Vec<_>, _>>()?;
        let results = self.pool.install(|| {
            pairs
                .par_iter()
                .map(|&(ti, si)| {
                    let (tid, sid) = (state.teachers[ti].id, state.students[si].id);
                    run_matchup(
                        &teachers[ti],
                        &students[si],
                        (tid, sid),
                        self.cfg.prompts_per_type,
                        self.cfg.rollouts,
                        &mut self.play_rng(state, tid, sid),
                    )
                })
                .collect()
        });
        Ok((pairs, results))
    }

    /// Replaces the bottom `⌈γN⌉` of each sub-population (by rating lower
    /// bound) with children of top-half parents.
    pub fn evolve_populations(
        &self,
        state: &mut PopulationState,
    ) -> Result<Vec<EvolutionEvent>, EngineError> {
        let mut rng = RngStream::derive(state.seed, &[TAG_EVOLVE, state.step]);
        let mut events = Vec::new();
        for role in [Role::Teacher, Role::Student] {
            let mut members = match role {
                Role::Teacher => std::mem::take(&mut state.teachers),
                Role::Student => std::mem::take(&mut state.students),
            };
            let evs = self.evolve_role(role, &mut members, state, &mut rng);
            match role {
                Role::Teacher => state.teachers = members,
                Role::Student => state.students = members,
            }
            events.extend(evs?);
        }
        Ok(events)
    }

    fn evolve_role(
        &self,
        role: Role,
        members: &mut [Member],
        state: &mut PopulationState,
        rng: &mut RngStream,
    ) -> Result<Vec<EvolutionEvent>, EngineError> {
        let n = members.len();
        if n == 0 {
            return Ok(Vec::new());
        }
        let ratings: Vec<RatingState> = members.iter().map(|m| m.rating).collect();
        let ascending = lcb_rank(&ratings, &self.cfg.ratings);
        let culls = cull_count(self.cfg.cull_fraction, n);
        let culled: Vec<usize> = ascending[..culls].to_vec();
        let top: Vec<usize> = if n == 1 {
            vec![ascending[0]]
        } else {
            ascending.iter().rev().take((n / 2).max(1)).copied().collect()
        };
        let parents_snapshot: Vec<Member> = top.iter().map(|&i| members[i].clone()).collect();
        let mut events = Vec::with_capacity(culled.len());
        for &slot in &culled {
            let mut op = OperatorId::LIVE[rng.below(OperatorId::LIVE.len())];
            if op.arity() == 2 && parents_snapshot.len() < 2 {
                let mutations: Vec<OperatorId> =
                    OperatorId::LIVE.iter().copied().filter(|o| o.arity() == 1).collect();
                op = mutations[rng.below(mutations.len())];
            }
            let picks = rng.sample_without_replacement(parents_snapshot.len(), op.arity());
            let parents: Vec<&Member> = picks.iter().map(|&i| &parents_snapshot[i]).collect();
            let labels: Vec<String> = parents.iter().map(|p| p.label(role)).collect();
            let inputs: Vec<(&str, &AdapterState)> = labels
                .iter()
                .zip(&parents)
                .map(|(l, p)| (l.as_str(), &p.adapter))
                .collect();
            let child_seed = rng.next_seed();
            let child = apply_operator(op, &inputs, &self.cfg.operators, child_seed)?;
            let mu = parents.iter().map(|p| p.rating.mu).sum::<f64>() / parents.len() as f64;
            let id = state.next_id;
            state.next_id += 1;
            events.push(EvolutionEvent {
                step: state.step,
                role,
                culled: vec![members[slot].id],
                parents: parents.iter().map(|p| p.id).collect(),
                op,
                child: id,
                child_seed,
            });
            members[slot] = Member {
                id,
                adapter: child.adapter,
                rating: RatingState {
                    mu,
                    sigma: self.cfg.ratings.sigma0,
                    games: 0,
                },
                provenance: Some(child.provenance),
                optimizer: OptimizerState::default(),
            };
        }
        Ok(events)
    }

    fn step_record(
        &self,
        state: &PopulationState,
        results: &[MatchupResult],
        matchups: Vec<MatchupLine>,
        events: &[EvolutionEvent],
    ) -> StepRecord {
        let problems: Vec<_> = results.iter().flat_map(|r| &r.problems).collect();
        let valid: Vec<_> = problems.iter().filter(|p| p.valid).collect();
        let rhos: Vec<f64> = valid.iter().filter_map(|p| p.rho).collect();
        let solve_rate = mean(&rhos);
        let verdicts: Vec<StudentVerdict> =
            valid.iter().flat_map(|p| p.verdicts.iter().copied()).collect();
        let format_rate = (!verdicts.is_empty()).then(|| {
            verdicts.iter().filter(|&&v| v != StudentVerdict::Malformed).count() as f64
                / verdicts.len() as f64
        });
        let student_rewards: Vec<f64> = verdicts.iter().map(|&v| reward_student(v)).collect();
        let teacher_rewards: Vec<f64> = results.iter().flat_map(|r| r.teacher_rewards()).collect();
        let descriptors: Vec<_> = valid.iter().filter_map(|p| p.descriptor).collect();
        let lens: Vec<f64> = valid.iter().map(|p| p.token_len as f64).collect();
        let student_ents: Vec<f64> = results.iter().filter_map(|r| r.student_entropy).collect();
        let teacher_ents: Vec<f64> = results.iter().map(|r| r.teacher_entropy).collect();
        let mut per_type = BTreeMap::new();
        for tt in TaskType::ALL {
            let of: Vec<_> = problems.iter().filter(|p| p.task_type == tt).collect();
            let v: Vec<f64> = of.iter().filter_map(|p| p.rho).collect();
            per_type.insert(
                tt.name().to_string(),
                TypeStats {
                    problems: of.len(),
                    valid: v.len(),
                    solve_rate: mean(&v),
                    validity_rate: if of.is_empty() {
                        0.0
                    } else {
                        v.len() as f64 / of.len() as f64
                    },
                },
            );
        }
        let ratings = |ms: &[Member]| {
            ms.iter()
                .map(|m| MemberRating {
                    id: m.id,
                    mu: m.rating.mu,
                    sigma: m.rating.sigma,
                })
                .collect()
        };
        let teacher_wins = matchups.iter().filter(|m| m.winner == Winner::Teacher).count();
        let student_wins = matchups.iter().filter(|m| m.winner == Winner::Student).count();
        StepRecord {
            schema: STEP_SCHEMA_VERSION,
            step: state.step,
            mode: state.mode.name().to_string(),
            solve_rate,
            difficulty: solve_rate.map(|s| 1.0 - s),
            validity_rate: valid.len() as f64 / problems.len().max(1) as f64,
            format_rate,
            teacher_reward: mean(&teacher_rewards).unwrap_or(0.0),
            student_reward: mean(&student_rewards),
            teacher_entropy: mean(&teacher_ents).unwrap_or(0.0),
            student_entropy: mean(&student_ents),
            mean_program_tokens: mean(&lens),
            complexity: ComplexityMeans::of(&descriptors),
            coverage: state.archive.coverage(),
            coverage_budget_proxy: state.archive.budget_proxy(),
            archive_total: state.archive.total_problems,
            per_type,
            teachers: ratings(&state.teachers),
            students: ratings(&state.students),
            matchups,
            teacher_wins,
            student_wins,
            evolution: events
                .iter()
                .map(|e| EvolutionLine {
                    role: match e.role {
                        Role::Teacher => "teacher".into(),
                        Role::Student => "student".into(),
                    },
                    culled: e.culled[0],
                    parents: e.parents.clone(),
                    op: e.op.name().to_string(),
                    child: e.child,
                    child_seed: e.child_seed,
                })
                .collect(),
        }
    }

    /// Round-robin of every teacher against every student with no updates.
    pub fn evaluate(&self, state: &PopulationState) -> Result<EvalSummary, EngineError> {
        self.check_state(state)?;
        let mut pairs = Vec::new();
        if state.mode == Mode::SingleAgent {
            let a = &state.teachers[0];
            pairs.push((self.teacher_policy(a)?, self.student_policy(a)?, a.id, a.id));
        } else {
            for t in &state.teachers {
                for s in &state.students {
                    pairs.push((self.teacher_policy(t)?, self.student_policy(s)?, t.id, s.id));
                }
            }
        }
        let results: Vec<MatchupResult> = self.pool.install(|| {
            pairs
                .par_iter()
                .map(|(t, s, tid, sid)| {
                    let mut rng = RngStream::derive(state.seed, &[TAG_EVAL, state.step, *tid, *sid]);
                    run_matchup(
                        t,
                        s,
                        (*tid, *sid),
                        self.cfg.prompts_per_type,
                        self.cfg.rollouts,
                        &mut rng,
                    )
                })
                .collect()
        });
        let lines: Vec<EvalPair> = results
            .iter()
            .map(|r| EvalPair {
                teacher: r.teacher_id,
                student: r.student_id,
                solve_rate: r.aggregate_rho(),
                validity_rate: r.problems.iter().filter(|p| p.valid).count() as f64
                    / r.problems.len().max(1) as f64,
                winner: r.outcome().winner,
            })
            .collect();
        let rhos: Vec<f64> = lines.iter().filter_map(|l| l.solve_rate).collect();
        let validity: Vec<f64> = lines.iter().map(|l| l.validity_rate).collect();
        Ok(EvalSummary {
            step: state.step,
            mode: state.mode.name().to_string(),
            mean_solve_rate: mean(&rhos),
            mean_validity_rate: mean(&validity).unwrap_or(0.0),
            coverage: state.archive.coverage(),
            pairs: lines,
        })
    }

    /// Steps `state` forward until `cfg.steps`, streaming records to `sink`.
    pub fn run(
        &self,
        state: &mut PopulationState,
        sink: &mut dyn RunSink,
    ) -> Result<(), EngineError> {
        self.run_until(state, self.cfg.steps, sink)
    }

    pub fn run_until(
        &self,
        state: &mut PopulationState,
        until: u64,
        sink: &mut dyn RunSink,
    ) -> Result<(), EngineError> {
        while state.step < until {
            let out = self.training_step(state)?;
            sink.on_step(&out.record, &out.problems)?;
            *state = out.state;
        }
        Ok(())
    }
}

pub(crate) fn cvt_for(cfg: &EngineConfig) -> Arc<Vec<Point>> {
    cached_cvt(
        cfg.cvt_cells,
        cfg.cvt_samples,
        derive_seed(cfg.cvt_seed, &[TAG_CVT]),
    )
}

fn append(into: &mut RolloutBatch, other: RolloutBatch) {
    into.rewards.extend(other.rewards);
    into.grads.extend(other.grads);
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// `⌈γN⌉`, capped so the top-ranked member survives whenever `N > 1`.
pub fn cull_count(gamma: f64, n: usize) -> usize {
    let x = gamma * n as f64;
    let c = ((x - 1e-9).ceil().max(1.0)) as usize;
    if n == 1 {
        1
    } else {
        c.min(n - 1)
    }
}

/// Full run from a fresh state.
pub fn run(cfg: &EngineConfig, sink: &mut dyn RunSink) -> Result<PopulationState, EngineError> {
    let engine = Engine::new(cfg.clone())?;
    let mut state = engine.init_state()?;
    engine.run(&mut state, sink)?;
    Ok(state)
}

/// The self-calibrating single agent: same loop with the mode forced.
pub fn run_baseline(
    cfg: &EngineConfig,
    sink: &mut dyn RunSink,
) -> Result<PopulationState, EngineError> {
    let mut cfg = cfg.clone();
    cfg.mode = Mode::SingleAgent;
    run(&cfg, sink)
}
