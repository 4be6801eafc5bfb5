//! Coverage archive over program descriptors, per-step records, JSON-lines
//! sinks and the CSV report.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::ComplexityDescriptor;
use crate::rng::RngStream;

pub const STEP_SCHEMA_VERSION: u32 = 1;
pub const DIMS: usize = 4;
const LLOYD_ROUNDS: usize = 50;
const LLOYD_TOL: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum DiagError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed record in {path} line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("run directory {0} not found")]
    MissingRun(PathBuf),
    #[error("invalid archive: {0}")]
    Archive(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DiagError + '_ {
    move |source| DiagError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub type Point = [f64; DIMS];

fn dist2(a: &Point, b: &Point) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &[Point], p: &Point) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (i, c) in centroids.iter().enumerate() {
        let d = dist2(c, p);
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

/// Lloyd iterations over `samples` uniform points in `[0,1]⁴`, seeded from
/// the first `k` samples; stops after 50 rounds or once no centroid moves more
/// than `1e-4`.
pub fn build_cvt(k: usize, samples: usize, rng: &mut RngStream) -> Vec<Point> {
    assert!(k >= 1 && samples >= k, "need at least k samples");
    let points: Vec<Point> = (0..samples)
        .map(|_| {
            let mut p = [0.0; DIMS];
            for v in &mut p {
                *v = rng.uniform();
            }
            p
        })
        .collect();
    let mut centroids: Vec<Point> = points[..k].to_vec();
    for _ in 0..LLOYD_ROUNDS {
        let owner: Vec<usize> = points.par_iter().map(|p| nearest(&centroids, p)).collect();
        let mut sums = vec![[0.0; DIMS]; k];
        let mut counts = vec![0usize; k];
        for (p, &o) in points.iter().zip(&owner) {
            counts[o] += 1;
            for d in 0..DIMS {
                sums[o][d] += p[d];
            }
        }
        let mut moved: f64 = 0.0;
        for i in 0..k {
            if counts[i] == 0 {
                continue;
            }
            let mut next = [0.0; DIMS];
            for d in 0..DIMS {
                next[d] = sums[i][d] / counts[i] as f64;
            }
            moved = moved.max(dist2(&next, &centroids[i]).sqrt());
            centroids[i] = next;
        }
        if moved < LLOYD_TOL {
            break;
        }
    }
    centroids
}

/// Process-wide cache so that repeated runs share one tessellation build.
pub fn cached_cvt(k: usize, samples: usize, seed: u64) -> Arc<Vec<Point>> {
    static CACHE: OnceLock<Mutex<HashMap<(usize, usize, u64), Arc<Vec<Point>>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let key = (k, samples, seed);
    if let Some(c) = cache.lock().expect("cvt cache").get(&key) {
        return c.clone();
    }
    let built = Arc::new(build_cvt(k, samples, &mut RngStream::new(seed)));
    cache
        .lock()
        .expect("cvt cache")
        .entry(key)
        .or_insert(built)
        .clone()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvtArchive {
    #[serde(skip)]
    centroids: Arc<Vec<Point>>,
    pub filled: Vec<bool>,
    pub total_problems: u64,
}

impl CvtArchive {
    pub fn new(centroids: Arc<Vec<Point>>) -> Self {
        let k = centroids.len();
        Self {
            centroids,
            filled: vec![false; k],
            total_problems: 0,
        }
    }

    /// Restores the fill state onto a freshly built tessellation.
    pub fn with_state(
        centroids: Arc<Vec<Point>>,
        filled: Vec<bool>,
        total_problems: u64,
    ) -> Result<Self, DiagError> {
        if filled.len() != centroids.len() {
            return Err(DiagError::Archive(format!(
                "{} fill flags for {} cells",
                filled.len(),
                centroids.len()
            )));
        }
        Ok(Self {
            centroids,
            filled,
            total_problems,
        })
    }

    pub fn cells(&self) -> usize {
        self.centroids.len()
    }

    pub fn centroids(&self) -> &[Point] {
        &self.centroids
    }

    pub fn insert(&mut self, d: &ComplexityDescriptor) -> usize {
        let cell = nearest(&self.centroids, &d.normalized());
        self.filled[cell] = true;
        self.total_problems += 1;
        cell
    }

    pub fn filled_count(&self) -> usize {
        self.filled.iter().filter(|&&f| f).count()
    }

    pub fn coverage(&self) -> f64 {
        self.filled_count() as f64 / self.cells() as f64
    }

    /// Running problem count over the cell budget, capped at 1.
    pub fn budget_proxy(&self) -> f64 {
        (self.total_problems as f64 / self.cells() as f64).min(1.0)
    }
}

pub fn archive_insert(a: &mut CvtArchive, d: &ComplexityDescriptor) {
    a.insert(d);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct ComplexityMeans {
    pub ast_depth: f64,
    pub cyclomatic: f64,
    pub loc: f64,
    pub var_count: f64,
}

impl ComplexityMeans {
    pub fn of(ds: &[ComplexityDescriptor]) -> Option<Self> {
        if ds.is_empty() {
            return None;
        }
        let n = ds.len() as f64;
        let sum = |f: fn(&ComplexityDescriptor) -> u32| ds.iter().map(|d| f(d) as f64).sum::<f64>() / n;
        Some(Self {
            ast_depth: sum(|d| d.ast_depth),
            cyclomatic: sum(|d| d.cyclomatic),
            loc: sum(|d| d.loc),
            var_count: sum(|d| d.var_count),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeStats {
    pub problems: usize,
    pub valid: usize,
    pub solve_rate: Option<f64>,
    pub validity_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberRating {
    pub id: u64,
    pub mu: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchupLine {
    pub teacher: u64,
    pub student: u64,
    pub winner: crate::ratings::Winner,
    pub rho: Option<f64>,
    pub valid: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionLine {
    pub role: String,
    pub culled: u64,
    pub parents: Vec<u64>,
    pub op: String,
    pub child: u64,
    pub child_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub schema: u32,
    pub step: u64,
    pub mode: String,
    /// Mean solve rate over valid problems; `None` if nothing was valid.
    pub solve_rate: Option<f64>,
    pub difficulty: Option<f64>,
    pub validity_rate: f64,
    /// Fraction of student rollouts that were well formed.
    pub format_rate: Option<f64>,
    pub teacher_reward: f64,
    pub student_reward: Option<f64>,
    pub teacher_entropy: f64,
    pub student_entropy: Option<f64>,
    pub mean_program_tokens: Option<f64>,
    pub complexity: Option<ComplexityMeans>,
    pub coverage: f64,
    pub coverage_budget_proxy: f64,
    pub archive_total: u64,
    pub per_type: BTreeMap<String, TypeStats>,
    pub teachers: Vec<MemberRating>,
    pub students: Vec<MemberRating>,
    pub matchups: Vec<MatchupLine>,
    pub teacher_wins: usize,
    pub student_wins: usize,
    pub evolution: Vec<EvolutionLine>,
}

/// One line of `problems.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemLine {
    pub step: u64,
    pub teacher_id: u64,
    pub task_type: crate::env::TaskType,
    pub program_text: Option<String>,
    pub payload: u32,
    pub valid: bool,
    pub descriptor: Option<ComplexityDescriptor>,
    pub rho: Option<f64>,
}

pub trait RunSink {
    fn on_step(&mut self, record: &StepRecord, problems: &[ProblemLine]) -> Result<(), DiagError>;
}

#[derive(Debug, Default)]
pub struct MemorySink {
    pub records: Vec<StepRecord>,
    pub problems: Vec<ProblemLine>,
}

impl RunSink for MemorySink {
    fn on_step(&mut self, record: &StepRecord, problems: &[ProblemLine]) -> Result<(), DiagError> {
        self.records.push(record.clone());
        self.problems.extend_from_slice(problems);
        Ok(())
    }
}

pub fn emit_step<W: Write>(rec: &StepRecord, sink: &mut W) -> std::io::Result<()> {
    serde_json::to_writer(&mut *sink, rec)?;
    sink.write_all(b"\n")
}

/// Appends to `steps.jsonl` and `problems.jsonl` under a run directory.
pub struct FileSink {
    steps_path: PathBuf,
    problems_path: PathBuf,
    steps: std::io::BufWriter<fs::File>,
    problems: std::io::BufWriter<fs::File>,
}

impl FileSink {
    /// Creates (or truncates, unless `append`) the two logs in `dir`.
    pub fn create(dir: &Path, append: bool) -> Result<Self, DiagError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let open = |p: &Path| {
            fs::OpenOptions::new()
                .create(true)
                .write(true)
                .append(append)
                .truncate(!append)
                .open(p)
                .map_err(io_err(p))
        };
        let steps_path = dir.join("steps.jsonl");
        let problems_path = dir.join("problems.jsonl");
        Ok(Self {
            steps: std::io::BufWriter::new(open(&steps_path)?),
            problems: std::io::BufWriter::new(open(&problems_path)?),
            steps_path,
            problems_path,
        })
    }

    pub fn flush(&mut self) -> Result<(), DiagError> {
        self.steps.flush().map_err(io_err(&self.steps_path))?;
        self.problems.flush().map_err(io_err(&self.problems_path))
    }
}

impl RunSink for FileSink {
    fn on_step(&mut self, record: &StepRecord, problems: &[ProblemLine]) -> Result<(), DiagError> {
        emit_step(record, &mut self.steps).map_err(io_err(&self.steps_path))?;
        for p in problems {
            serde_json::to_writer(&mut self.problems, p)
                .map_err(|e| io_err(&self.problems_path)(e.into()))?;
            self.problems
                .write_all(b"\n")
                .map_err(io_err(&self.problems_path))?;
        }
        Ok(())
    }
}

impl Drop for FileSink {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}

pub fn read_steps(path: &Path) -> Result<Vec<StepRecord>, DiagError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| DiagError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Least-squares slope of `y` against `x`; zero for fewer than two points or
/// constant `x`.
pub fn linear_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    if points.len() < 2 {
        return 0.0;
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    if sxx == 0.0 {
        return 0.0;
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    sxy / sxx
}

pub const COMPLEXITY_METRICS: [&str; 4] = ["ast_depth", "cyclomatic", "loc", "var_count"];

fn metric(c: &ComplexityMeans, name: &str) -> f64 {
    match name {
        "ast_depth" => c.ast_depth,
        "cyclomatic" => c.cyclomatic,
        "loc" => c.loc,
        _ => c.var_count,
    }
}

pub fn complexity_slopes(records: &[StepRecord]) -> BTreeMap<String, f64> {
    COMPLEXITY_METRICS
        .iter()
        .map(|&m| {
            let pts: Vec<(f64, f64)> = records
                .iter()
                .filter_map(|r| r.complexity.as_ref().map(|c| (r.step as f64, metric(c, m))))
                .collect();
            (m.to_string(), linear_slope(&pts))
        })
        .collect()
}

/// Teacher-wins minus student-wins summed over a trailing window.
pub fn windowed_lead(records: &[StepRecord], window: usize) -> Vec<i64> {
    let per: Vec<i64> = records
        .iter()
        .map(|r| r.teacher_wins as i64 - r.student_wins as i64)
        .collect();
    (0..per.len())
        .map(|i| per[i.saturating_sub(window - 1)..=i].iter().sum())
        .collect()
}

/// Sign changes of a series, skipping zeros.
pub fn sign_changes(series: &[i64]) -> usize {
    let signs: Vec<i64> = series.iter().map(|v| v.signum()).filter(|&s| s != 0).collect();
    signs.windows(2).filter(|w| w[0] != w[1]).count()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub const DYNAMICS_HEADER: &str = "run,step,solve_rate,difficulty,validity_rate,format_rate,teacher_reward,student_reward,teacher_entropy,student_entropy,mean_program_tokens";
pub const COMPLEXITY_HEADER: &str = "run,step,ast_depth,cyclomatic,loc,var_count";
pub const COVERAGE_HEADER: &str = "run,step,coverage,budget_proxy,archive_total";
pub const RATINGS_HEADER: &str = "run,step,role,id,mu,sigma";
pub const PER_TYPE_HEADER: &str = "run,step,task_type,problems,valid,solve_rate,validity_rate";
pub const SLOPES_HEADER: &str = "run,metric,slope";
pub const LEAD_HEADER: &str = "run,step,teacher_wins,student_wins,lead_10";

struct Csv {
    text: String,
}

impl Csv {
    fn new(header: &str) -> Self {
        Self {
            text: format!("{header}\n"),
        }
    }

    fn row(&mut self, cols: &[String]) {
        self.text.push_str(&cols.join(","));
        self.text.push('\n');
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub name: String,
    pub mode: String,
    pub steps: usize,
    pub final_coverage: f64,
    pub slopes: BTreeMap<String, f64>,
    pub lead_sign_changes: usize,
    pub final_solve_rate_min_last50: Option<f64>,
}

/// Writes the figure CSVs and `summary.txt` for one or more run directories
/// into `out`. Returns the per-run summaries.
pub fn report(runs: &[PathBuf], out: &Path) -> Result<Vec<RunSummary>, DiagError> {
    let mut dynamics = Csv::new(DYNAMICS_HEADER);
    let mut complexity = Csv::new(COMPLEXITY_HEADER);
    let mut coverage = Csv::new(COVERAGE_HEADER);
    let mut ratings = Csv::new(RATINGS_HEADER);
    let mut per_type = Csv::new(PER_TYPE_HEADER);
    let mut slopes = Csv::new(SLOPES_HEADER);
    let mut lead = Csv::new(LEAD_HEADER);
    let mut summaries = Vec::new();
    let mut retention_files = Vec::new();
    for dir in runs {
        if !dir.is_dir() {
            return Err(DiagError::MissingRun(dir.clone()));
        }
        let name = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        let retention = dir.join("retention.csv");
        if retention.is_file() {
            retention_files.push((name.clone(), retention));
        }
        let steps_path = dir.join("steps.jsonl");
        if !steps_path.is_file() {
            continue;
        }
        let recs = read_steps(&steps_path)?;
        let leads = windowed_lead(&recs, 10);
        for (r, l) in recs.iter().zip(&leads) {
            let s = r.step.to_string();
            dynamics.row(&[
                name.clone(),
                s.clone(),
                opt(r.solve_rate),
                opt(r.difficulty),
                format!("{:.6}", r.validity_rate),
                opt(r.format_rate),
                format!("{:.6}", r.teacher_reward),
                opt(r.student_reward),
                format!("{:.6}", r.teacher_entropy),
                opt(r.student_entropy),
                opt(r.mean_program_tokens),
            ]);
            if let Some(c) = &r.complexity {
                complexity.row(&[
                    name.clone(),
                    s.clone(),
                    format!("{:.6}", c.ast_depth),
                    format!("{:.6}", c.cyclomatic),
                    format!("{:.6}", c.loc),
                    format!("{:.6}", c.var_count),
                ]);
            }
            coverage.row(&[
                name.clone(),
                s.clone(),
                format!("{:.6}", r.coverage),
                format!("{:.6}", r.coverage_budget_proxy),
                r.archive_total.to_string(),
            ]);
            for (role, members) in [("teacher", &r.teachers), ("student", &r.students)] {
                for m in members.iter() {
                    ratings.row(&[
                        name.clone(),
                        s.clone(),
                        role.to_string(),
                        m.id.to_string(),
                        format!("{:.6}", m.mu),
                        format!("{:.6}", m.sigma),
                    ]);
                }
            }
            for (tt, st) in &r.per_type {
                per_type.row(&[
                    name.clone(),
                    s.clone(),
                    tt.clone(),
                    st.problems.to_string(),
                    st.valid.to_string(),
                    opt(st.solve_rate),
                    format!("{:.6}", st.validity_rate),
                ]);
            }
            lead.row(&[
                name.clone(),
                s.clone(),
                r.teacher_wins.to_string(),
                r.student_wins.to_string(),
                l.to_string(),
            ]);
        }
        let sl = complexity_slopes(&recs);
        for (m, v) in &sl {
            slopes.row(&[name.clone(), m.clone(), format!("{v:.8}")]);
        }
        let tail: Vec<f64> = recs
            .iter()
            .rev()
            .take(50)
            .filter_map(|r| r.solve_rate)
            .collect();
        summaries.push(RunSummary {
            mode: recs.first().map(|r| r.mode.clone()).unwrap_or_default(),
            steps: recs.len(),
            final_coverage: recs.last().map_or(0.0, |r| r.coverage),
            slopes: sl,
            lead_sign_changes: sign_changes(&leads),
            final_solve_rate_min_last50: tail.iter().copied().reduce(f64::min),
            name,
        });
    }
    fs::create_dir_all(out).map_err(io_err(out))?;
    let write = |file: &str, body: &str| {
        let p = out.join(file);
        fs::write(&p, body).map_err(io_err(&p))
    };
    write("dynamics.csv", &dynamics.text)?;
    write("complexity.csv", &complexity.text)?;
    write("coverage.csv", &coverage.text)?;
    write("ratings.csv", &ratings.text)?;
    write("per_type.csv", &per_type.text)?;
    write("slopes.csv", &slopes.text)?;
    write("lead.csv", &lead.text)?;
    if !retention_files.is_empty() {
        let mut merged = String::new();
        for (i, (name, path)) in retention_files.iter().enumerate() {
            let body = fs::read_to_string(path).map_err(io_err(path))?;
            let mut lines = body.lines();
            let header = lines.next().unwrap_or_default();
            if i == 0 {
                merged.push_str(&format!("run,{header}\n"));
            }
            for l in lines {
                merged.push_str(&format!("{name},{l}\n"));
            }
        }
        write("retention.csv", &merged)?;
    }
    write("summary.txt", &summary_text(&summaries))?;
    Ok(summaries)
}

fn summary_text(runs: &[RunSummary]) -> String {
    let mut s = String::new();
    for r in runs {
        s.push_str(&format!(
            "run {} ({}, {} steps): final coverage {:.4}, lead sign changes {}",
            r.name, r.mode, r.steps, r.final_coverage, r.lead_sign_changes
        ));
        if let Some(m) = r.final_solve_rate_min_last50 {
            s.push_str(&format!(", min solve rate over last 50 steps {m:.4}"));
        }
        s.push('\n');
        for (m, v) in &r.slopes {
            let sign = if *v > 0.0 {
                "+"
            } else if *v < 0.0 {
                "-"
            } else {
                "0"
            };
            s.push_str(&format!("  slope {m:<10} {v:+.6} [{sign}]\n"));
        }
    }
    let base: Vec<&RunSummary> = runs.iter().filter(|r| r.mode == "single_agent").collect();
    let pop: Vec<&RunSummary> = runs.iter().filter(|r| r.mode == "population").collect();
    if !base.is_empty() && !pop.is_empty() {
        s.push_str("\nslope comparison (baseline vs population, mean over runs)\n");
        for m in COMPLEXITY_METRICS {
            let mean = |rs: &[&RunSummary]| rs.iter().map(|r| r.slopes[m]).sum::<f64>() / rs.len() as f64;
            let (b, p) = (mean(&base), mean(&pop));
            s.push_str(&format!(
                "  {m:<10} baseline {b:+.6} population {p:+.6} -> {}\n",
                if b <= 0.0 && p > 0.0 {
                    "contrast holds"
                } else {
                    "contrast absent"
                }
            ));
        }
        let cb = base.iter().map(|r| r.final_coverage).sum::<f64>() / base.len() as f64;
        let cp = pop.iter().map(|r| r.final_coverage).sum::<f64>() / pop.len() as f64;
        s.push_str(&format!(
            "  coverage   baseline {cb:.4} population {cp:.4}\n"
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_cell_is_centre() {
        let c = build_cvt(1, 20_000, &mut RngStream::new(4));
        for v in c[0] {
            assert!((v - 0.5).abs() < 0.02);
        }
    }

    #[test]
    fn insert_and_coverage() {
        let cents = Arc::new(build_cvt(16, 2_000, &mut RngStream::new(1)));
        let mut a = CvtArchive::new(cents);
        assert_eq!(a.coverage(), 0.0);
        let d = ComplexityDescriptor {
            ast_depth: 3,
            cyclomatic: 1,
            loc: 1,
            var_count: 0,
        };
        archive_insert(&mut a, &d);
        assert_eq!(a.coverage(), 1.0 / 16.0);
        archive_insert(&mut a, &d);
        assert_eq!(a.coverage(), 1.0 / 16.0);
        assert_eq!(a.total_problems, 2);
    }

    #[test]
    fn slopes() {
        assert_eq!(linear_slope(&[(0.0, 2.0), (1.0, 2.0), (2.0, 2.0)]), 0.0);
        assert!((linear_slope(&[(0.0, 1.0), (1.0, 3.0), (2.0, 5.0)]) - 2.0).abs() < 1e-12);
        assert_eq!(linear_slope(&[(1.0, 1.0)]), 0.0);
    }

    #[test]
    fn lead_and_sign_changes() {
        assert_eq!(sign_changes(&[1, 0, -2, -1, 3, 0, 0, -1]), 3);
        assert_eq!(sign_changes(&[0, 0]), 0);
    }
}
