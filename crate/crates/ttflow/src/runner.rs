//! Experiment harness: run configurations, presets, CSV and JSON artifacts,
//! dense reference archives and run comparison.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrators::{integrate, IntegrateOptions, Method, RankPolicy, Stepper, StepperConfig, TrajectoryRecord};
use crate::problems::{dense_reference, Adr4d, AdrLowRank, AllenCahn3d, EntrywiseRhs, LowRankRhs, VlasovPoisson2d};
use crate::tensor_core::{DenseTensor, Shape};
use crate::tt_format::{tt_svd, TensorTrain, Truncation};

pub const CSV_VERSION_LINE: &str = "# ttflow-csv v1";
const REFERENCE_MAGIC: &[u8; 4] = b"TTRF";
const REFERENCE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemId {
    Vp2d,
    Ac3d,
    Adr4d,
}

impl ProblemId {
    pub fn ndim(self) -> usize {
        match self {
            ProblemId::Vp2d => 2,
            ProblemId::Ac3d => 3,
            ProblemId::Adr4d => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ReferencePolicy {
    None,
    /// Dense RK4 with the run's step size, sampled every `every` time units.
    Compute { every: f64 },
    Load { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemId,
    pub n: usize,
    pub method: Method,
    #[serde(default)]
    pub stepper: StepperConfig,
    #[serde(default)]
    pub policy: RankPolicy,
    #[serde(default = "no_reference")]
    pub reference: ReferencePolicy,
    /// Output directory; the CLI's `--output` takes precedence.
    #[serde(default)]
    pub output: Option<PathBuf>,
    /// Tolerance for the TT-SVD of the initial condition (defaults to `policy.delta`).
    #[serde(default)]
    pub initial_delta: Option<f64>,
    /// Interior ranks per step taken from a previous run's results.csv.
    #[serde(default)]
    pub rank_schedule: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "yes")]
    pub timing: bool,
    #[serde(default = "one")]
    pub record_every: usize,
    #[serde(default)]
    pub checkpoint_times: Vec<f64>,
    /// Paper-size configuration; the CLI requires `--full-scale` to run it.
    #[serde(default)]
    pub full_scale: bool,
}

fn no_reference() -> ReferencePolicy {
    ReferencePolicy::None
}

fn yes() -> bool {
    true
}

fn one() -> usize {
    1
}

pub const PRESETS: [&str; 5] = ["vp2d", "ac3d", "ac3d_ci", "adr4d", "adr4d_ci"];

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let base = |problem, n, method| RunConfig {
            problem,
            n,
            method,
            stepper: StepperConfig::default(),
            policy: RankPolicy::default(),
            reference: ReferencePolicy::None,
            output: None,
            initial_delta: None,
            rank_schedule: None,
            seed: 0,
            timing: true,
            record_every: 1,
            checkpoint_times: Vec::new(),
            full_scale: false,
        };
        let cfg = match name {
            "vp2d" => RunConfig {
                policy: RankPolicy::with_eps_l(1e-7),
                reference: ReferencePolicy::Compute { every: 0.1 },
                ..base(ProblemId::Vp2d, 64, Method::TtCross)
            },
            "ac3d" => RunConfig {
                stepper: StepperConfig { t_end: 10.0, ..StepperConfig::default() },
                policy: RankPolicy { delta: 1e-3, ..RankPolicy::fixed() },
                reference: ReferencePolicy::Compute { every: 0.5 },
                record_every: 10,
                full_scale: true,
                ..base(ProblemId::Ac3d, 64, Method::StSvd)
            },
            "ac3d_ci" => RunConfig {
                stepper: StepperConfig { t_end: 0.1, ..StepperConfig::default() },
                policy: RankPolicy { delta: 1e-6, ..RankPolicy::with_eps_l(1e-7) },
                reference: ReferencePolicy::Compute { every: 0.01 },
                ..base(ProblemId::Ac3d, 16, Method::TtCross)
            },
            "adr4d" => RunConfig {
                policy: RankPolicy { delta: 1e-6, ..RankPolicy::fixed() },
                reference: ReferencePolicy::Compute { every: 0.1 },
                record_every: 10,
                full_scale: true,
                ..base(ProblemId::Adr4d, 32, Method::StSvd)
            },
            "adr4d_ci" => RunConfig {
                stepper: StepperConfig { t_end: 0.1, ..StepperConfig::default() },
                policy: RankPolicy { delta: 1e-6, ..RankPolicy::with_eps_l(1e-7) },
                reference: ReferencePolicy::Compute { every: 0.02 },
                ..base(ProblemId::Adr4d, 8, Method::TtCross)
            },
            other => return Err(Error::Config(format!("unknown preset {other:?}; known: {}", PRESETS.join(", ")))),
        };
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.stepper.validate()?;
        self.policy.validate()?;
        if self.n < 4 || self.n % 2 != 0 {
            return Err(Error::Config(format!("n must be even and at least 4, got {}", self.n)));
        }
        if let ReferencePolicy::Compute { every } = self.reference {
            if !(every > 0.0) {
                return Err(Error::Config(format!("reference spacing must be positive, got {every}")));
            }
        }
        if self.initial_delta.is_some_and(|d| !(d >= 0.0)) {
            return Err(Error::Config("initial_delta must be nonnegative".into()));
        }
        Ok(())
    }

    /// Reference sample times `0, every, 2 every, ...` up to `t_end`.
    pub fn sample_times(&self) -> Vec<f64> {
        match self.reference {
            ReferencePolicy::Compute { every } => {
                let k = (self.stepper.t_end / every + 1e-9).floor() as usize;
                (0..=k).map(|i| i as f64 * every).collect()
            }
            _ => Vec::new(),
        }
    }
}

/// A concrete problem with both evaluator families.
pub enum Problem {
    Vp(VlasovPoisson2d),
    Ac(AllenCahn3d),
    Adr(AdrLowRank),
}

impl Problem {
    pub fn build(cfg: &RunConfig) -> Result<Self> {
        Ok(match cfg.problem {
            ProblemId::Vp2d => Problem::Vp(VlasovPoisson2d::new(cfg.n)?),
            ProblemId::Ac3d => Problem::Ac(AllenCahn3d::new(cfg.n)?),
            ProblemId::Adr4d => Problem::Adr(AdrLowRank::new(Adr4d::new(cfg.n)?, cfg.policy.delta.max(1e-14))?),
        })
    }

    pub fn rhs(&self) -> &dyn EntrywiseRhs {
        match self {
            Problem::Vp(p) => p,
            Problem::Ac(p) => p,
            Problem::Adr(p) => p,
        }
    }

    pub fn lowrank(&self) -> &dyn LowRankRhs {
        match self {
            Problem::Vp(p) => p,
            Problem::Ac(p) => p,
            Problem::Adr(p) => p,
        }
    }

    pub fn initial_condition(&self) -> DenseTensor {
        match self {
            Problem::Vp(p) => p.initial_condition(),
            Problem::Ac(p) => p.initial_condition(),
            Problem::Adr(p) => p.problem.initial_condition(),
        }
    }
}

/// Result of `run`.
#[derive(Debug)]
pub struct RunOutcome {
    pub record: TrajectoryRecord,
    pub csv_path: PathBuf,
    pub meta_path: PathBuf,
}

#[derive(Debug, Serialize)]
struct Meta<'a> {
    config: &'a RunConfig,
    crate_version: &'static str,
    steps: usize,
    rows: usize,
    final_ranks: Vec<usize>,
    error: Option<&'a str>,
    total_runtime_s: Option<f64>,
}

/// Runs a configuration and writes results.csv, meta.json, config.json and checkpoints into `out`.
pub fn run(cfg: &RunConfig, out: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let problem = Problem::build(cfg)?;
    let reference = match &cfg.reference {
        ReferencePolicy::None => None,
        ReferencePolicy::Compute { .. } => Some(compute_reference(cfg, &problem)?),
        ReferencePolicy::Load { path } => Some(load_reference(&mut BufReader::new(File::open(path)?))?),
    };
    let mut policy = cfg.policy.clone();
    if let Some(path) = &cfg.rank_schedule {
        policy.schedule = Some(schedule_from_csv(&read_results(path)?, cfg.stepper.dt, cfg.stepper.steps()));
    }
    let u0 = problem.initial_condition();
    let delta = cfg.initial_delta.unwrap_or(cfg.policy.delta);
    let y0 = tt_svd(&u0, &Truncation::Tolerance(delta))?;
    let clock = Instant::now();
    let mut stepper = Stepper::new(cfg.method, cfg.stepper.clone(), policy, problem.rhs(), Some(problem.lowrank()))?;
    let opts = IntegrateOptions {
        reference: reference.as_deref(),
        timing: cfg.timing,
        record_every: cfg.record_every,
        checkpoint_times: cfg.checkpoint_times.clone(),
    };
    let record = integrate(&mut stepper, y0, &opts);
    let total = clock.elapsed().as_secs_f64();

    let csv_path = out.join("results.csv");
    write_results(&record, cfg.problem.ndim(), BufWriter::new(File::create(&csv_path)?))?;
    for (t, y) in &record.checkpoints {
        y.save(BufWriter::new(File::create(out.join(format!("checkpoint_t{t:.6}.ttck")))?))?;
    }
    fs::write(out.join("config.json"), cfg.to_json())?;
    let meta = Meta {
        config: cfg,
        crate_version: env!("CARGO_PKG_VERSION"),
        steps: cfg.stepper.steps(),
        rows: record.rows.len(),
        final_ranks: record.final_state.ranks(),
        error: record.error.as_deref(),
        total_runtime_s: cfg.timing.then_some(total),
    };
    let meta_path = out.join("meta.json");
    fs::write(&meta_path, serde_json::to_string_pretty(&meta)?)?;
    Ok(RunOutcome { record, csv_path, meta_path })
}

/// Dense RK4 reference snapshots for a configuration.
pub fn compute_reference(cfg: &RunConfig, problem: &Problem) -> Result<Vec<(f64, DenseTensor)>> {
    dense_reference(problem.rhs(), &problem.initial_condition(), cfg.stepper.dt, cfg.stepper.t_end, &cfg.sample_times())
}

/// Archive layout: magic "TTRF", version u32, d u64, dims u64 each, count
/// u64, then per snapshot t f64 and the values f64 (all little-endian).
pub fn save_reference<W: Write>(snaps: &[(f64, DenseTensor)], mut w: W) -> Result<()> {
    let dims = snaps.first().map(|(_, x)| x.dims().to_vec()).unwrap_or_default();
    w.write_all(REFERENCE_MAGIC)?;
    w.write_all(&REFERENCE_VERSION.to_le_bytes())?;
    w.write_all(&(dims.len() as u64).to_le_bytes())?;
    for &n in &dims {
        w.write_all(&(n as u64).to_le_bytes())?;
    }
    w.write_all(&(snaps.len() as u64).to_le_bytes())?;
    for (t, x) in snaps {
        if x.dims() != dims.as_slice() {
            return Err(Error::DimensionMismatch("snapshots differ in shape".into()));
        }
        w.write_all(&t.to_le_bytes())?;
        for v in x.values() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    Ok(f64::from_bits(read_u64(r)?))
}

pub fn load_reference<R: Read>(r: &mut R) -> Result<Vec<(f64, DenseTensor)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != REFERENCE_MAGIC {
        return Err(Error::Format("not a reference archive".into()));
    }
    let mut v = [0u8; 4];
    r.read_exact(&mut v)?;
    let version = u32::from_le_bytes(v);
    if version != REFERENCE_VERSION {
        return Err(Error::Format(format!("unsupported reference archive version {version}")));
    }
    let d = read_u64(r)? as usize;
    let dims = (0..d).map(|_| read_u64(r).map(|n| n as usize)).collect::<Result<Vec<_>>>()?;
    let count = read_u64(r)? as usize;
    let mut out = Vec::with_capacity(count);
    if count == 0 {
        return Ok(out);
    }
    let shape = Shape::new(dims)?;
    for _ in 0..count {
        let t = read_f64(r)?;
        let values = (0..shape.size()).map(|_| read_f64(r)).collect::<Result<Vec<_>>>()?;
        out.push((t, DenseTensor::new(shape.clone(), values)?));
    }
    Ok(out)
}

pub fn csv_header(d: usize) -> Vec<String> {
    let mut cols = vec!["t".to_string(), "err".to_string()];
    for prefix in ["r", "eps", "condM", "condN"] {
        cols.extend((1..d).map(|k| format!("{prefix}_{k}")));
    }
    cols.push("wall_s".into());
    cols
}

fn fmt(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:e}")
    }
}

/// Writes the versioned CSV: a comment line, the header, one row per record.
pub fn write_results<W: Write>(record: &TrajectoryRecord, d: usize, mut w: W) -> Result<()> {
    writeln!(w, "{CSV_VERSION_LINE}")?;
    let mut csv = csv::Writer::from_writer(w);
    let io = |e: csv::Error| Error::Io(e.to_string());
    csv.write_record(csv_header(d)).map_err(io)?;
    for row in &record.rows {
        let mut fields = vec![fmt(row.t), fmt(row.err.unwrap_or(f64::NAN))];
        fields.extend(row.ranks.iter().map(|r| r.to_string()));
        fields.extend(row.eps.iter().chain(&row.cond_m).chain(&row.cond_n).map(|&v| fmt(v)));
        fields.push(fmt(row.wall_s));
        csv.write_record(&fields).map_err(io)?;
    }
    csv.flush()?;
    Ok(())
}

/// Parsed results.csv row.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub t: f64,
    pub err: f64,
    pub ranks: Vec<usize>,
    pub eps: Vec<f64>,
    pub cond_m: Vec<f64>,
    pub cond_n: Vec<f64>,
    pub wall_s: f64,
}

pub fn parse_results(text: &str) -> Result<Vec<ResultRow>> {
    let mut lines = text.splitn(2, '\n');
    if lines.next().map(str::trim_end) != Some(CSV_VERSION_LINE) {
        return Err(Error::Format(format!("missing schema line {CSV_VERSION_LINE:?}")));
    }
    let body = lines.next().unwrap_or("");
    let mut rdr = csv::Reader::from_reader(body.as_bytes());
    let io = |e: csv::Error| Error::Format(e.to_string());
    let header: Vec<String> = rdr.headers().map_err(io)?.iter().map(String::from).collect();
    let d = (header.len() - 3) / 4 + 1;
    if header.len() < 7 || (header.len() - 3) % 4 != 0 || header != csv_header(d) {
        return Err(Error::Format(format!("unexpected columns {header:?}")));
    }
    let num = |s: &str| -> Result<f64> { s.parse::<f64>().map_err(|e| Error::Format(format!("{s:?}: {e}"))) };
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(io)?;
        let f: Vec<&str> = rec.iter().collect();
        let k = d - 1;
        let block = |i: usize| -> Result<Vec<f64>> { f[2 + i * k..2 + (i + 1) * k].iter().map(|s| num(s)).collect() };
        rows.push(ResultRow {
            t: num(f[0])?,
            err: num(f[1])?,
            ranks: f[2..2 + k]
                .iter()
                .map(|s| s.parse().map_err(|e| Error::Format(format!("rank {s:?}: {e}"))))
                .collect::<Result<_>>()?,
            eps: block(1)?,
            cond_m: block(2)?,
            cond_n: block(3)?,
            wall_s: num(f[2 + 4 * k])?,
        });
    }
    Ok(rows)
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    parse_results(&fs::read_to_string(path)?)
}

/// Per-step rank targets from recorded rows (the latest row at or before each step).
pub fn schedule_from_csv(rows: &[ResultRow], dt: f64, steps: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(steps + 1);
    let mut i = 0;
    for n in 0..=steps {
        let t = n as f64 * dt;
        while i + 1 < rows.len() && rows[i + 1].t <= t + dt / 2.0 {
            i += 1;
        }
        if let Some(r) = rows.get(i) {
            out.push(r.ranks.clone());
        }
    }
    out
}

/// One line of the comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub name: String,
    pub avg_rank_l1: f64,
    pub final_err: f64,
    pub runtime_s: f64,
}

/// Time-mean of `||r(t)||_1`, last recorded error and runtime per run.
pub fn summarize(name: &str, rows: &[ResultRow]) -> Result<Summary> {
    if rows.is_empty() {
        return Err(Error::Format(format!("{name}: no rows")));
    }
    let avg = rows.iter().map(|r| r.ranks.iter().sum::<usize>() as f64).sum::<f64>() / rows.len() as f64;
    let final_err = rows.iter().rev().map(|r| r.err).find(|e| !e.is_nan()).unwrap_or(f64::NAN);
    let runtime = rows.last().map(|r| r.wall_s).unwrap_or(f64::NAN);
    Ok(Summary { name: name.to_string(), avg_rank_l1: avg, final_err, runtime_s: runtime })
}

pub fn compare(paths: &[PathBuf]) -> Result<Vec<Summary>> {
    let mut width = None;
    paths
        .iter()
        .map(|p| {
            let rows = read_results(p)?;
            let d = rows.first().map(|r| r.ranks.len());
            match (width, d) {
                (Some(a), Some(b)) if a != b => {
                    return Err(Error::Format(format!("{}: {b} levels, expected {a}", p.display())))
                }
                (None, Some(b)) => width = Some(b),
                _ => {}
            }
            summarize(&p.display().to_string(), &rows)
        })
        .collect()
}

pub fn write_summary_csv<W: Write>(rows: &[Summary], w: W) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    let io = |e: csv::Error| Error::Io(e.to_string());
    csv.write_record(["run", "avg_rank_l1", "final_err", "runtime_s"]).map_err(io)?;
    for s in rows {
        csv.write_record([s.name.clone(), fmt(s.avg_rank_l1), fmt(s.final_err), fmt(s.runtime_s)]).map_err(io)?;
    }
    csv.flush()?;
    Ok(())
}

pub fn format_table(rows: &[Summary]) -> String {
    let name_w = rows.iter().map(|s| s.name.len()).max().unwrap_or(3).max(3);
    let mut out = format!("{:<name_w$}  {:>12}  {:>12}  {:>12}\n", "run", "avg |r|_1", "final err", "runtime s");
    for s in rows {
        out.push_str(&format!(
            "{:<name_w$}  {:>12.3}  {:>12.3e}  {:>12.3}\n",
            s.name, s.avg_rank_l1, s.final_err, s.runtime_s
        ));
    }
    out
}

/// Loads a TT checkpoint written by `run`.
pub fn load_checkpoint(path: &Path) -> Result<TensorTrain> {
    TensorTrain::load(BufReader::new(File::open(path)?))
}
