mod common;

use arena_core::diagnostics::{
    read_steps, report, FileSink, MemorySink, COMPLEXITY_HEADER, COVERAGE_HEADER, DYNAMICS_HEADER,
    LEAD_HEADER, PER_TYPE_HEADER, RATINGS_HEADER, SLOPES_HEADER,
};
use arena_core::engine::{self, cull_count, retention_benchmark, Engine, EngineConfig, Mode, RetentionConfig};
use arena_core::ops::OperatorId;

fn quick(steps: u64) -> EngineConfig {
    EngineConfig { steps, seed: Some(3), cvt_cells: 32, cvt_samples: 5000, ..EngineConfig::default() }
}

#[test]
fn cull_counts() {
    assert_eq!(cull_count(0.25, 4), 1);
    assert_eq!(cull_count(0.25, 8), 2);
    assert_eq!(cull_count(0.3, 4), 2);
    assert_eq!(cull_count(0.9, 4), 3);
    assert_eq!(cull_count(0.5, 1), 1);
    assert_eq!(cull_count(0.5, 2), 1);
}

#[test]
fn step_records_are_consistent() {
    let cfg = quick(30);
    let mut sink = MemorySink::default();
    let state = engine::run(&cfg, &mut sink).unwrap();
    assert_eq!(state.step, 30);
    assert_eq!(sink.records.len(), 30);
    assert_eq!((state.teachers.len(), state.students.len()), (4, 4));
    for (i, r) in sink.records.iter().enumerate() {
        assert_eq!(r.step, i as u64 + 1);
        match (r.solve_rate, r.difficulty) {
            (Some(s), Some(d)) => assert!((d - (1.0 - s)).abs() < 1e-12),
            (None, None) => {}
            other => panic!("solve rate and difficulty disagree: {other:?}"),
        }
        assert_eq!(r.matchups.len(), 4);
        assert!(r.teacher_wins + r.student_wins <= r.matchups.len());
        assert!((0.0..=1.0).contains(&r.coverage));
        assert!(r.sigma_positive());
        let evolves = (i as u64 + 1).is_multiple_of(cfg.evolve_every);
        assert_eq!(!r.evolution.is_empty(), evolves, "step {}", r.step);
    }
    let cov: Vec<f64> = sink.records.iter().map(|r| r.coverage).collect();
    assert!(cov.windows(2).all(|w| w[1] >= w[0]), "coverage never shrinks");
}

trait SigmaPositive {
    fn sigma_positive(&self) -> bool;
}

impl SigmaPositive for arena_core::diagnostics::StepRecord {
    fn sigma_positive(&self) -> bool {
        self.teachers.iter().chain(&self.students).all(|m| m.sigma > 0.0)
    }
}

#[test]
fn baseline_uses_one_agent() {
    let mut sink = MemorySink::default();
    let state = engine::run_baseline(&quick(12), &mut sink).unwrap();
    assert_eq!(state.mode, Mode::SingleAgent);
    assert_eq!(state.teachers.len(), 1);
    assert!(state.students.is_empty());
    assert!(sink.records.iter().all(|r| r.mode == "single_agent"));
}

#[test]
fn evaluation_covers_every_pair() {
    let cfg = quick(5);
    let eng = Engine::new(cfg).unwrap();
    let mut state = eng.init_state().unwrap();
    eng.run(&mut state, &mut MemorySink::default()).unwrap();
    let summary = eng.evaluate(&state).unwrap();
    assert_eq!(summary.pairs.len(), 16);
    assert_eq!(summary.step, 5);
}

#[test]
fn invalid_configs_are_rejected() {
    for cfg in [
        EngineConfig { cull_fraction: 0.0, ..EngineConfig::default() },
        EngineConfig { rollouts: 0, ..EngineConfig::default() },
        EngineConfig { temperature: -1.0, ..EngineConfig::default() },
    ] {
        assert!(Engine::new(cfg).is_err());
    }
    assert!(serde_json::from_str::<EngineConfig>(r#"{"stepz": 3}"#).is_err());
}

#[test]
fn report_writes_golden_headers() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    std::fs::create_dir_all(&run_dir).unwrap();
    let mut sink = FileSink::create(&run_dir, false).unwrap();
    engine::run(&quick(12), &mut sink).unwrap();
    sink.flush().unwrap();
    drop(sink);
    assert_eq!(read_steps(&run_dir.join("steps.jsonl")).unwrap().len(), 12);

    let out = dir.path().join("report");
    let summaries = report(&[run_dir], &out).unwrap();
    assert_eq!(summaries.len(), 1);
    assert_eq!(summaries[0].steps, 12);
    for (file, header) in [
        ("dynamics.csv", DYNAMICS_HEADER),
        ("complexity.csv", COMPLEXITY_HEADER),
        ("coverage.csv", COVERAGE_HEADER),
        ("ratings.csv", RATINGS_HEADER),
        ("per_type.csv", PER_TYPE_HEADER),
        ("slopes.csv", SLOPES_HEADER),
        ("lead.csv", LEAD_HEADER),
    ] {
        let text = std::fs::read_to_string(out.join(file)).unwrap();
        assert_eq!(text.lines().next(), Some(header), "{file}");
        let cols = header.split(',').count();
        assert!(text.lines().skip(1).all(|l| l.split(',').count() == cols), "{file}");
    }
    assert_eq!(
        DYNAMICS_HEADER,
        "run,step,solve_rate,difficulty,validity_rate,format_rate,teacher_reward,student_reward,teacher_entropy,student_entropy,mean_program_tokens"
    );
    assert_eq!(COMPLEXITY_HEADER, "run,step,ast_depth,cyclomatic,loc,var_count");
    assert!(out.join("summary.txt").exists());
}

#[test]
fn retention_sweep_layout() {
    let cfg = EngineConfig { seed: Some(11), ..EngineConfig::default() };
    let rep = retention_benchmark(&cfg).unwrap();
    let rc = RetentionConfig::default();
    assert_eq!(rep.rows.len(), OperatorId::ALL.len() * rc.snapshots.len());
    for row in &rep.rows {
        assert_eq!(row.child_curve.len(), rc.retrain_steps as usize + 1);
        assert_eq!(row.parent_curve.len(), rc.retrain_steps as usize + 1);
        if let Some(s) = row.recovery_step {
            let threshold = rep.recovery_fraction * row.parent_reward;
            assert!(row.child_curve[s as usize] >= threshold - 1e-12);
            assert!(row.child_curve[..s as usize].iter().all(|&r| r < threshold));
        }
    }
    for &snap in &rc.snapshots {
        let copy = rep.row(OperatorId::CopyParent, snap).unwrap();
        assert_eq!(copy.child_curve[0], copy.parent_reward);
        assert_eq!(copy.recovery_step, Some(0));
    }
    // Sweeping a subset reproduces the same rows.
    let sub = EngineConfig {
        retention: RetentionConfig { snapshots: vec![25], operators: vec![OperatorId::X2Layerwise], ..rc },
        ..cfg
    };
    let one = retention_benchmark(&sub).unwrap();
    assert_eq!(one.rows.len(), 1);
    assert_eq!(&one.rows[0], rep.row(OperatorId::X2Layerwise, 25).unwrap());
    assert!(rep.to_csv().lines().count() > rep.rows.len());
}
