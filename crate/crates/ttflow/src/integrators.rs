//! Time integration on the fixed-rank TT manifold: the TT-cross integrator,
//! interpolatory and orthogonal projector splitting, step truncation, and
//! rank adaptation driven by the relative size of the smallest singular value.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Lu};
use crate::problems::{steps_to, EntrywiseRhs, LowRankRhs};
use crate::sampling::{left_level, right_level, tt_cross_deim, CrossDeim, NestedIndexSets};
use crate::tangent_projection::{project_core, MAX_INTERFACE_COND};
use crate::tensor_core::{norm2, relative_error, DenseTensor, Matrix, Shape};
use crate::tt_format::{
    cross_interpolant_qr, left_partial_dense, linear_combination, orthogonalize_all, right_orthogonalize_in_place,
    right_partial_dense, round, round_to_ranks, Block, OrthFamily, TensorTrain, TtCore,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Euler,
    Ab2,
    Rk4,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexRefresh {
    EveryStep,
    /// Keep the previous index sets while every `M_k`, `N_k` stays below this condition number.
    CondThreshold(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Splitting {
    LieTrotter,
    Strang,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    TtCross,
    Ips,
    Ops,
    StSvd,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::TtCross => "tt_cross",
            Method::Ips => "ips",
            Method::Ops => "ops",
            Method::StSvd => "st_svd",
        }
    }

    fn interpolatory(self) -> bool {
        matches!(self, Method::TtCross | Method::Ips)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StepperConfig {
    pub scheme: Scheme,
    pub dt: f64,
    pub t_end: f64,
    pub index_refresh: IndexRefresh,
    /// Solver for the splitting substeps (euler or rk4).
    pub substep_scheme: Scheme,
    pub splitting: Splitting,
}

impl Default for StepperConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::Ab2,
            dt: 1e-3,
            t_end: 1.0,
            index_refresh: IndexRefresh::EveryStep,
            substep_scheme: Scheme::Rk4,
            splitting: Splitting::LieTrotter,
        }
    }
}

impl StepperConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.t_end >= 0.0) || !self.t_end.is_finite() {
            return Err(Error::Config(format!("t_end must be nonnegative, got {}", self.t_end)));
        }
        if let IndexRefresh::CondThreshold(k) = self.index_refresh {
            if !(k > 1.0) {
                return Err(Error::Config(format!("condition threshold must exceed 1, got {k}")));
            }
        }
        if self.substep_scheme == Scheme::Ab2 {
            return Err(Error::Config("substeps support euler or rk4".into()));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        steps_to(self.t_end, self.dt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RankPolicy {
    /// Off: ranks stay fixed (the schedule, if any, still applies).
    pub adaptive: bool,
    pub eps_l: f64,
    pub eps_u: f64,
    /// Per-level bounds for `r_1..r_{d-1}`; empty means unbounded.
    pub r_min: Vec<usize>,
    pub r_max: Vec<usize>,
    /// Truncation accuracy for step truncation and coefficient compression.
    pub delta: f64,
    /// Rank added at a level on an increase.
    pub oversample: usize,
    /// Steps after an increase during which the level may not shrink.
    pub cooldown: usize,
    /// Target interior ranks for the state at each step (last entry repeats).
    pub schedule: Option<Vec<Vec<usize>>>,
}

impl Default for RankPolicy {
    fn default() -> Self {
        Self {
            adaptive: true,
            eps_l: 1e-7,
            eps_u: 1e-6,
            r_min: Vec::new(),
            r_max: Vec::new(),
            delta: 1e-7,
            oversample: 1,
            cooldown: 20,
            schedule: None,
        }
    }
}

impl RankPolicy {
    pub fn fixed() -> Self {
        Self { adaptive: false, ..Self::default() }
    }

    pub fn with_eps_l(eps_l: f64) -> Self {
        Self { eps_l, eps_u: 10.0 * eps_l, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.eps_l && self.eps_l < self.eps_u && self.eps_u < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < eps_l < eps_u < 1, got {} and {}",
                self.eps_l, self.eps_u
            )));
        }
        if !(self.delta >= 0.0) {
            return Err(Error::Config(format!("delta must be nonnegative, got {}", self.delta)));
        }
        for (k, (lo, hi)) in self.r_min.iter().zip(&self.r_max).enumerate() {
            if lo > hi || *lo == 0 {
                return Err(Error::Config(format!("rank bounds at level {} are [{lo}, {hi}]", k + 1)));
            }
        }
        Ok(())
    }

    fn r_min(&self, k: usize) -> usize {
        self.r_min.get(k - 1).copied().unwrap_or(1).max(1)
    }

    fn r_max(&self, k: usize) -> usize {
        self.r_max.get(k - 1).copied().unwrap_or(usize::MAX)
    }
}

/// Diagnostics of the state at the start of a step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInfo {
    pub eps: Vec<f64>,
    pub cond_m: Vec<f64>,
    pub cond_n: Vec<f64>,
}

impl StepInfo {
    fn nan(d: usize) -> Self {
        Self { eps: vec![f64::NAN; d - 1], cond_m: vec![f64::NAN; d - 1], cond_n: vec![f64::NAN; d - 1] }
    }
}

/// `eps_k = sigma_min / ||sigma||` of every unfolding.
pub fn rank_proxies(family: &OrthFamily) -> Result<Vec<f64>> {
    (1..family.ndim())
        .map(|k| {
            let s = family.singular_values(k)?;
            let nrm = norm2(&s);
            let min = s.iter().copied().fold(f64::INFINITY, f64::min);
            Ok(if nrm > 0.0 { min / nrm } else { 0.0 })
        })
        .collect()
}

/// Rank changes for one step: optional caps (decrease) and per-level additions.
#[derive(Debug, Clone, PartialEq)]
pub struct RankPlan {
    pub caps: Option<Vec<usize>>,
    pub extra: Vec<usize>,
}

impl RankPlan {
    pub fn is_empty(&self) -> bool {
        self.caps.is_none() && self.extra.iter().all(|&e| e == 0)
    }
}

fn max_feasible(ranks: &[usize], dims: &[usize], k: usize) -> usize {
    let left: usize = dims[..k].iter().product();
    let right: usize = dims[k..].iter().product();
    (ranks[k - 1] * dims[k - 1]).min(dims[k] * ranks[k + 1]).min(left).min(right).max(1)
}

/// Decides rank changes from `eps` (or the schedule). A level that grows is
/// held for `policy.cooldown` steps: its new direction starts near zero and
/// would otherwise be truncated again at once.
pub fn plan_ranks(
    policy: &RankPolicy,
    ranks: &[usize],
    dims: &[usize],
    eps: &[f64],
    step: usize,
    cooldown_until: &mut [usize],
) -> RankPlan {
    let d = dims.len();
    let mut caps = ranks[1..d].to_vec();
    let mut extra = vec![0; d - 1];
    let mut reduce = false;
    if let Some(schedule) = policy.schedule.as_ref().filter(|s| !s.is_empty()) {
        let target = &schedule[step.min(schedule.len() - 1)];
        for k in 1..d {
            let want = target.get(k - 1).copied().unwrap_or(ranks[k]).max(1);
            if want < ranks[k] {
                caps[k - 1] = want;
                reduce = true;
            } else {
                extra[k - 1] = want - ranks[k];
            }
        }
    } else if policy.adaptive {
        for k in 1..d {
            let r = ranks[k];
            let e = eps[k - 1];
            if e < policy.eps_l && r > policy.r_min(k) && step >= cooldown_until[k - 1] {
                caps[k - 1] = r - 1;
                reduce = true;
            } else if e > policy.eps_u && r < policy.r_max(k) {
                extra[k - 1] = policy.oversample.max(1).min(policy.r_max(k) - r);
            }
        }
    }
    let mut after: Vec<usize> = ranks.to_vec();
    after[1..d].copy_from_slice(&caps);
    for k in 1..d {
        if extra[k - 1] > 0 {
            extra[k - 1] = extra[k - 1].min(max_feasible(&after, dims, k).saturating_sub(after[k]));
            if extra[k - 1] > 0 && policy.schedule.is_none() {
                cooldown_until[k - 1] = step + policy.cooldown;
            }
        }
    }
    RankPlan { caps: reduce.then_some(caps), extra }
}

fn check_conds(cond_m: &[f64], cond_n: &[f64]) -> Result<()> {
    for (k, (&cm, &cn)) in cond_m.iter().zip(cond_n).enumerate() {
        let c = cm.max(cn);
        if !(c < MAX_INTERFACE_COND) {
            return Err(Error::IllConditioned { level: k + 1, cond: c, limit: MAX_INTERFACE_COND });
        }
    }
    Ok(())
}

trait Linear: Clone {
    fn add_scaled(&mut self, s: f64, other: &Self);
}

impl Linear for TtCore {
    fn add_scaled(&mut self, s: f64, other: &Self) {
        self.axpy(s, other);
    }
}

impl Linear for Matrix {
    fn add_scaled(&mut self, s: f64, other: &Self) {
        self.axpy(s, other);
    }
}

impl Linear for Vec<Block> {
    fn add_scaled(&mut self, s: f64, other: &Self) {
        for (a, b) in self.iter_mut().zip(other) {
            a.axpy(s, b);
        }
    }
}

fn combine<S: Linear>(y: &S, terms: &[(f64, &S)]) -> S {
    let mut out = y.clone();
    for (s, x) in terms {
        out.add_scaled(*s, x);
    }
    out
}

/// One explicit step of `dy/dt = f(y, t)` (euler or rk4).
fn advance<S: Linear>(f: &mut dyn FnMut(&S, f64) -> Result<S>, y: &S, t: f64, dt: f64, scheme: Scheme) -> Result<S> {
    match scheme {
        Scheme::Euler => {
            let k1 = f(y, t)?;
            Ok(combine(y, &[(dt, &k1)]))
        }
        _ => {
            let k1 = f(y, t)?;
            let k2 = f(&combine(y, &[(dt / 2.0, &k1)]), t + dt / 2.0)?;
            let k3 = f(&combine(y, &[(dt / 2.0, &k2)]), t + dt / 2.0)?;
            let k4 = f(&combine(y, &[(dt, &k3)]), t + dt)?;
            Ok(combine(y, &[(dt / 6.0, &k1), (dt / 3.0, &k2), (dt / 3.0, &k3), (dt / 6.0, &k4)]))
        }
    }
}

/// Sampled blocks `Y(I^{<=m}, :, I^{>m+1})` for every mode.
pub fn sample_blocks(y: &TensorTrain, sets: &NestedIndexSets) -> Vec<Block> {
    (0..y.ndim()).map(|m| y.subtensor_unchecked(&sets.left[m], m, &sets.right[m + 1])).collect()
}

fn eval_blocks(rhs: &dyn EntrywiseRhs, y: &TensorTrain, sets: &NestedIndexSets, t: f64, stage: &str) -> Result<Vec<Block>> {
    (0..y.ndim())
        .map(|m| {
            let g = rhs.eval_block(y, &sets.left[m], m, &sets.right[m + 1], t);
            if g.is_finite() {
                Ok(g)
            } else {
                Err(Error::NonFinite { stage: stage.to_string(), level: m })
            }
        })
        .collect()
}

fn check_tt(y: &TensorTrain, stage: &str) -> Result<()> {
    match y.cores().iter().position(|c| !c.is_finite()) {
        None => Ok(()),
        Some(m) => Err(Error::NonFinite { stage: stage.to_string(), level: m }),
    }
}

/// `G` with the mode order reversed, for adjoint (right-to-left) sweeps.
pub struct ReversedRhs<'a> {
    inner: &'a dyn EntrywiseRhs,
    dims: Vec<usize>,
}

impl<'a> ReversedRhs<'a> {
    pub fn new(inner: &'a dyn EntrywiseRhs) -> Self {
        let dims = inner.dims().iter().rev().copied().collect();
        Self { inner, dims }
    }
}

/// Same tensor with the mode order reversed.
pub fn reverse_dense(x: &DenseTensor) -> DenseTensor {
    let dims: Vec<usize> = x.dims().iter().rev().copied().collect();
    let mut rev = vec![0; dims.len()];
    DenseTensor::from_fn(Shape::new(dims).expect("dims"), |idx| {
        for (r, &i) in rev.iter_mut().zip(idx.iter().rev()) {
            *r = i;
        }
        x.at(&rev)
    })
}

fn reverse_all(v: &[Vec<usize>]) -> Vec<Vec<usize>> {
    v.iter().map(|x| x.iter().rev().copied().collect()).collect()
}

impl EntrywiseRhs for ReversedRhs<'_> {
    fn dims(&self) -> &[usize] {
        &self.dims
    }

    fn eval_dense(&self, u: &DenseTensor, t: f64) -> DenseTensor {
        reverse_dense(&self.inner.eval_dense(&reverse_dense(u), t))
    }

    fn eval_block(&self, y: &TensorTrain, left: &[Vec<usize>], mode: usize, right: &[Vec<usize>], t: f64) -> Block {
        let d = y.ndim();
        let b = self.inner.eval_block(&y.reversed(), &reverse_all(right), d - 1 - mode, &reverse_all(left), t);
        b.transposed()
    }

    fn eval_entries(&self, y: &TensorTrain, entries: &[Vec<usize>], t: f64) -> Vec<f64> {
        self.inner.eval_entries(&y.reversed(), &reverse_all(entries), t)
    }
}

struct CrossHistory {
    t: f64,
    y: TensorTrain,
    sets: NestedIndexSets,
    g: Vec<Block>,
}

struct TtHistory {
    t: f64,
    g: TensorTrain,
}

/// Stateful stepper: owns the multistep history, index reuse and rank cooldowns.
pub struct Stepper<'a> {
    pub method: Method,
    pub cfg: StepperConfig,
    pub policy: RankPolicy,
    rhs: &'a dyn EntrywiseRhs,
    lowrank: Option<&'a dyn LowRankRhs>,
    step_index: usize,
    cooldown_until: Vec<usize>,
    cross_history: Option<CrossHistory>,
    tt_history: Option<TtHistory>,
    reuse: Option<CrossDeim>,
}

impl<'a> Stepper<'a> {
    pub fn new(
        method: Method,
        cfg: StepperConfig,
        policy: RankPolicy,
        rhs: &'a dyn EntrywiseRhs,
        lowrank: Option<&'a dyn LowRankRhs>,
    ) -> Result<Self> {
        cfg.validate()?;
        policy.validate()?;
        if method == Method::StSvd && lowrank.is_none() {
            return Err(Error::Config("st_svd needs a TT-arithmetic right-hand side".into()));
        }
        let d = rhs.dims().len();
        if d < 2 {
            return Err(Error::Config("integrators need at least two modes".into()));
        }
        Ok(Self {
            method,
            cfg,
            policy,
            rhs,
            lowrank,
            step_index: 0,
            cooldown_until: vec![0; d - 1],
            cross_history: None,
            tt_history: None,
            reuse: None,
        })
    }

    /// Advances `y` from `t` by `cfg.dt`; the info describes `y`.
    pub fn step(&mut self, y: &TensorTrain, t: f64) -> Result<(TensorTrain, StepInfo)> {
        if y.dims() != self.rhs.dims() {
            return Err(Error::DimensionMismatch(format!("state {:?} vs problem {:?}", y.dims(), self.rhs.dims())));
        }
        let out = match self.method {
            Method::TtCross => self.tt_cross_step(y, t),
            Method::Ips => self.splitting_step(y, t, true),
            Method::Ops => self.splitting_step(y, t, false),
            Method::StSvd => self.st_svd_step(y, t),
        }?;
        self.step_index += 1;
        Ok(out)
    }

    /// Diagnostics of a state without stepping.
    pub fn diagnose(&self, y: &TensorTrain) -> StepInfo {
        let d = y.ndim();
        let Ok(family) = orthogonalize_all(y) else {
            return StepInfo::nan(d);
        };
        let eps = rank_proxies(&family).unwrap_or_else(|_| vec![f64::NAN; d - 1]);
        let (cond_m, cond_n) = match (self.method.interpolatory(), tt_cross_deim(&family, &[])) {
            (true, Ok(c)) => (c.cond_m(), c.cond_n()),
            _ => (vec![f64::NAN; d - 1], vec![f64::NAN; d - 1]),
        };
        StepInfo { eps, cond_m, cond_n }
    }

    fn plan(&mut self, y: &TensorTrain, family: &OrthFamily) -> Result<(Vec<f64>, RankPlan)> {
        let eps = rank_proxies(family)?;
        let plan = plan_ranks(&self.policy, &y.ranks(), &y.dims(), &eps, self.step_index, &mut self.cooldown_until);
        Ok((eps, plan))
    }

    fn select_indices(&mut self, family: &OrthFamily, ranks: &[usize], extra: &[usize]) -> Result<CrossDeim> {
        if let (IndexRefresh::CondThreshold(limit), Some(prev)) = (self.cfg.index_refresh, self.reuse.as_ref()) {
            let d = family.ndim();
            let same = extra.iter().all(|&e| e == 0)
                && (1..d).all(|k| prev.sets.left[k].len() == ranks[k] && prev.sets.right[k].len() == ranks[k]);
            if same {
                let lt = family.left_orthogonal_tt();
                let rt = family.right_orthogonal_tt();
                let m: Vec<Matrix> = (1..d).map(|k| lt.left_interfaces(&prev.sets.left[k], k)).collect();
                let n: Vec<Matrix> = (1..d).map(|k| rt.right_interfaces(&prev.sets.right[k], k).transpose()).collect();
                let candidate = CrossDeim { sets: prev.sets.clone(), m, n };
                let worst = candidate.cond_m().into_iter().chain(candidate.cond_n()).fold(0.0, f64::max);
                if worst < limit {
                    return Ok(candidate);
                }
            }
        }
        let cross = tt_cross_deim(family, extra)?;
        if matches!(self.cfg.index_refresh, IndexRefresh::CondThreshold(_)) {
            self.reuse = Some(cross.clone());
        }
        Ok(cross)
    }

    fn tt_cross_step(&mut self, y: &TensorTrain, t: f64) -> Result<(TensorTrain, StepInfo)> {
        let dt = self.cfg.dt;
        let d = y.ndim();
        let mut family = orthogonalize_all(y)?;
        let (eps, plan) = self.plan(y, &family)?;
        let mut y = y.clone();
        if let Some(caps) = &plan.caps {
            y = round_to_ranks(&y, caps);
            family = orthogonalize_all(&y)?;
        }
        let cross = self.select_indices(&family, &y.ranks(), &plan.extra)?;
        let (cond_m, cond_n) = (cross.cond_m(), cross.cond_n());
        check_conds(&cond_m, &cond_n)?;
        let sets = &cross.sets;
        let l: Vec<Vec<usize>> = (1..d).map(|k| sets.left_pos[k].clone()).collect();
        let rhs = self.rhs;
        let blocks = sample_blocks(&y, sets);
        let g0 = eval_blocks(rhs, &y, sets, t, "rhs evaluation")?;

        let scheme = match (self.cfg.scheme, &self.cross_history) {
            (Scheme::Ab2, None) => Scheme::Rk4,
            (s, _) => s,
        };
        let next = match scheme {
            Scheme::Euler => combine(&blocks, &[(dt, &g0)]),
            Scheme::Rk4 => {
                let stage = |b: &Vec<Block>, tau: f64, name: &str| -> Result<Vec<Block>> {
                    let yt = cross_interpolant_qr(b, &l)?;
                    check_tt(&yt, name)?;
                    eval_blocks(rhs, &yt, sets, tau, name)
                };
                let k2 = stage(&combine(&blocks, &[(dt / 2.0, &g0)]), t + dt / 2.0, "rk4 stage 2")?;
                let k3 = stage(&combine(&blocks, &[(dt / 2.0, &k2)]), t + dt / 2.0, "rk4 stage 3")?;
                let k4 = stage(&combine(&blocks, &[(dt, &k3)]), t + dt, "rk4 stage 4")?;
                combine(&blocks, &[(dt / 6.0, &g0), (dt / 3.0, &k2), (dt / 3.0, &k3), (dt / 6.0, &k4)])
            }
            Scheme::Ab2 => {
                let h = self.cross_history.as_ref().expect("history present");
                let g_prev = if h.sets == *sets { h.g.clone() } else { eval_blocks(rhs, &h.y, sets, h.t, "ab2 history")? };
                combine(&blocks, &[(1.5 * dt, &g0), (-0.5 * dt, &g_prev)])
            }
        };
        if let Some(m) = next.iter().position(|b| !b.is_finite()) {
            return Err(Error::NonFinite { stage: "block update".into(), level: m });
        }
        let y_next = cross_interpolant_qr(&next, &l)?;
        check_tt(&y_next, "rebuild")?;
        if self.cfg.scheme == Scheme::Ab2 {
            self.cross_history = Some(CrossHistory { t, y, sets: sets.clone(), g: g0 });
        }
        Ok((y_next, StepInfo { eps, cond_m, cond_n }))
    }

    fn splitting_step(&mut self, y: &TensorTrain, t: f64, interpolatory: bool) -> Result<(TensorTrain, StepInfo)> {
        let family = orthogonalize_all(y)?;
        let (eps, plan) = self.plan(y, &family)?;
        let mut y = y.clone();
        if let Some(caps) = &plan.caps {
            y = round_to_ranks(&y, caps);
        }
        right_orthogonalize_in_place(&mut y);
        augment_ranks(&mut y, &plan.extra)?;
        match self.sweep_pair(&y, t, interpolatory) {
            Ok((y_next, cond_m, cond_n)) => Ok((y_next, StepInfo { eps, cond_m, cond_n })),
            Err(Error::IllConditioned { .. } | Error::SingularInterface { .. } | Error::Deim { .. } | Error::Singular(_))
                if interpolatory =>
            {
                // one retry with roundoff directions removed and fresh indices
                let mut y = round(&y, 0.0);
                right_orthogonalize_in_place(&mut y);
                let (y_next, cond_m, cond_n) = self.sweep_pair(&y, t, interpolatory)?;
                Ok((y_next, StepInfo { eps, cond_m, cond_n }))
            }
            Err(e) => Err(e),
        }
    }

    fn sweep_pair(&self, y: &TensorTrain, t: f64, interpolatory: bool) -> Result<(TensorTrain, Vec<f64>, Vec<f64>)> {
        let dt = self.cfg.dt;
        let sub = self.cfg.substep_scheme;
        let d = y.ndim();
        let nan = || vec![f64::NAN; d - 1];
        let right = if interpolatory { Some(right_indices(y)?) } else { None };
        let cond_n = right.as_ref().map(|(_, ns)| ns.iter().map(linalg::cond2).collect()).unwrap_or_else(nan);
        match self.cfg.splitting {
            Splitting::LieTrotter => {
                let out = sweep(self.rhs, y.clone(), right, t, dt, sub)?;
                let cond_m = out.ms.as_ref().map(|ms| ms.iter().map(linalg::cond2).collect()).unwrap_or_else(nan);
                Ok((out.y, cond_m, cond_n))
            }
            Splitting::Strang => {
                let fwd = sweep(self.rhs, y.clone(), right, t, dt / 2.0, sub)?;
                let cond_m = fwd.ms.as_ref().map(|ms| ms.iter().map(linalg::cond2).collect()).unwrap_or_else(nan);
                let rev_rhs = ReversedRhs::new(self.rhs);
                let rev_right = match (&fwd.sets, &fwd.ms) {
                    (Some(s), Some(ms)) => Some((s.reversed(), ms.iter().rev().cloned().collect())),
                    _ => None,
                };
                let bwd = sweep(&rev_rhs, fwd.y.reversed(), rev_right, t + dt / 2.0, dt / 2.0, sub)?;
                Ok((bwd.y.reversed(), cond_m, cond_n))
            }
        }
    }

    fn st_svd_step(&mut self, y: &TensorTrain, t: f64) -> Result<(TensorTrain, StepInfo)> {
        let dt = self.cfg.dt;
        let delta = self.policy.delta;
        let lr = self.lowrank.expect("validated in new");
        let d = y.ndim();
        let eps = orthogonalize_all(y).and_then(|f| rank_proxies(&f)).unwrap_or_else(|_| vec![f64::NAN; d - 1]);
        let g = |x: &TensorTrain, tau: f64, stage: &str| -> Result<TensorTrain> {
            let out = lr.eval_tt(x, tau, delta)?;
            check_tt(&out, stage)?;
            Ok(out)
        };
        let g0 = g(y, t, "rhs evaluation")?;
        let scheme = match (self.cfg.scheme, &self.tt_history) {
            (Scheme::Ab2, None) => Scheme::Rk4,
            (s, _) => s,
        };
        let next = match scheme {
            Scheme::Euler => round(&linear_combination(&[(1.0, y), (dt, &g0)])?, delta),
            Scheme::Rk4 => {
                let y2 = round(&linear_combination(&[(1.0, y), (dt / 2.0, &g0)])?, delta);
                let k2 = g(&y2, t + dt / 2.0, "rk4 stage 2")?;
                let y3 = round(&linear_combination(&[(1.0, y), (dt / 2.0, &k2)])?, delta);
                let k3 = g(&y3, t + dt / 2.0, "rk4 stage 3")?;
                let y4 = round(&linear_combination(&[(1.0, y), (dt, &k3)])?, delta);
                let k4 = g(&y4, t + dt, "rk4 stage 4")?;
                round(
                    &linear_combination(&[(1.0, y), (dt / 6.0, &g0), (dt / 3.0, &k2), (dt / 3.0, &k3), (dt / 6.0, &k4)])?,
                    delta,
                )
            }
            Scheme::Ab2 => {
                let h = self.tt_history.as_ref().expect("history present");
                debug_assert!((t - h.t - dt).abs() < 1e-9 * dt.max(1.0));
                round(&linear_combination(&[(1.0, y), (1.5 * dt, &g0), (-0.5 * dt, &h.g)])?, delta)
            }
        };
        check_tt(&next, "truncated step")?;
        for (k, &r) in next.ranks().iter().enumerate().take(d).skip(1) {
            let cap = self.policy.r_max(k);
            if r > cap {
                return Err(Error::RankExplosion { level: k, rank: r, cap });
            }
        }
        if self.cfg.scheme == Scheme::Ab2 {
            self.tt_history = Some(TtHistory { t, g: g0 });
        }
        Ok((next, StepInfo { eps, cond_m: vec![f64::NAN; d - 1], cond_n: vec![f64::NAN; d - 1] }))
    }
}

/// Raises `r_k` by `extra[k-1]` on a TT whose cores `1..d` are right-orthogonal:
/// core k gains orthonormal rows along the canonical directions with the
/// largest residual, core k-1 gains zero columns, so the tensor is unchanged.
pub fn augment_ranks(y: &mut TensorTrain, extra: &[usize]) -> Result<()> {
    let d = y.ndim();
    for k in (1..d).rev() {
        let add = extra.get(k - 1).copied().unwrap_or(0);
        if add == 0 {
            continue;
        }
        let v = y.core(k).clone();
        let (r, n, rr) = (v.r_left(), v.n(), v.r_right());
        let mut rows: Vec<Vec<f64>> = (0..r).map(|a| v.right_unfolding().row(a)).collect();
        let width = n * rr;
        if r + add > width {
            return Err(Error::Config(format!("cannot raise rank {r} at level {k} by {add}")));
        }
        for _ in 0..add {
            let mut best: Option<(f64, Vec<f64>)> = None;
            for e in 0..width {
                let mut w = vec![0.0; width];
                w[e] = 1.0;
                for _ in 0..2 {
                    for q in &rows {
                        let c: f64 = q.iter().zip(&w).map(|(a, b)| a * b).sum();
                        w.iter_mut().zip(q).for_each(|(x, y)| *x -= c * y);
                    }
                }
                let nrm = norm2(&w);
                if best.as_ref().map_or(true, |(b, _)| nrm > *b + 1e-12) {
                    best = Some((nrm, w));
                }
            }
            let (nrm, mut w) = best.expect("nonempty width");
            w.iter_mut().for_each(|x| *x /= nrm);
            rows.push(w);
        }
        let r2 = r + add;
        let mut unf = Matrix::zeros(r2, width);
        for (a, row) in rows.iter().enumerate() {
            for (c, &x) in row.iter().enumerate() {
                unf[(a, c)] = x;
            }
        }
        *y.core_mut(k) = TtCore::from_right_unfolding(unf, n, rr)?;
        let p = y.core(k - 1).clone();
        *y.core_mut(k - 1) = TtCore::from_fn(p.r_left(), p.n(), r2, |a, i, b| if b < r { p.get(a, i, b) } else { 0.0 });
    }
    Ok(())
}

/// Right DEIM sweep over a TT whose cores `1..d` are right-orthogonal.
pub fn right_indices(y: &TensorTrain) -> Result<(NestedIndexSets, Vec<Matrix>)> {
    let d = y.ndim();
    let mut sets = NestedIndexSets::empty(d);
    let mut ns = vec![Matrix::zeros(0, 0); d - 1];
    let mut n_next = Matrix::identity(1);
    for k in (1..d).rev() {
        let v = y.core(k);
        let (pos, idx, n) = right_level(&sets.right[k + 1], &n_next, v, v.r_left(), k)?;
        sets.right[k] = idx;
        sets.right_pos[k] = pos;
        n_next = n.clone();
        ns[k - 1] = n;
    }
    Ok((sets, ns))
}

struct SweepOutput {
    y: TensorTrain,
    sets: Option<NestedIndexSets>,
    ms: Option<Vec<Matrix>>,
}

fn with_core(cores: &[TtCore], j: usize, c: TtCore) -> TensorTrain {
    let mut cs = cores.to_vec();
    cs[j] = c;
    TensorTrain::new(cs).expect("consistent cores")
}

fn lu_checked(a: &Matrix, level: usize) -> Result<Lu> {
    let cond = linalg::cond2(a);
    if !(cond < MAX_INTERFACE_COND) {
        return Err(Error::IllConditioned { level, cond, limit: MAX_INTERFACE_COND });
    }
    Lu::new(a).map_err(|_| Error::SingularInterface { level, cond })
}

/// One left-to-right projector-splitting sweep (K-step, QR, backward S-step,
/// repeated per core). With `right` given the projections are interpolatory
/// on the sampled index sets; without, orthogonal with a dense `G`. The input
/// must have cores `1..d` right-orthogonal; the output is left-orthogonal.
fn sweep(
    rhs: &dyn EntrywiseRhs,
    y: TensorTrain,
    right: Option<(NestedIndexSets, Vec<Matrix>)>,
    t: f64,
    dt: f64,
    sub: Scheme,
) -> Result<SweepOutput> {
    let d = y.ndim();
    let dims = y.dims();
    let mut cores = y.into_cores();
    let (mut sets, ns) = match right {
        Some((s, n)) => (Some(s), Some(n)),
        None => (None, None),
    };
    let mut ms = Vec::with_capacity(d - 1);
    let mut m_prev = Matrix::identity(1);
    let mut k_core = cores[0].clone();
    for j in 0..d {
        // K-step
        k_core = match (&sets, &ns) {
            (Some(s), Some(ns)) => {
                let lu_m = lu_checked(&m_prev, j)?;
                let n_j = if j + 1 < d { ns[j].clone() } else { Matrix::identity(1) };
                let lu_n = lu_checked(&n_j, j + 1)?;
                let (left, right) = (&s.left[j], &s.right[j + 1]);
                let mut f = |k: &TtCore, tau: f64| -> Result<TtCore> {
                    let tt = with_core(&cores, j, k.clone());
                    let g = rhs.eval_block(&tt, left, j, right, tau);
                    if !g.is_finite() {
                        return Err(Error::NonFinite { stage: "K-step".into(), level: j });
                    }
                    let x = lu_m.solve(&g.right_unfolding());
                    let x = TtCore::from_right_unfolding(x, g.n(), g.r_right())?;
                    let z = lu_n.solve_right_transpose(&x.left_unfolding());
                    TtCore::from_left_unfolding(z, x.r_left(), x.n())
                };
                advance(&mut f, &k_core, t, dt, sub)?
            }
            _ => {
                let mut f = |k: &TtCore, tau: f64| -> Result<TtCore> {
                    let tt = with_core(&cores, j, k.clone());
                    let g = rhs.eval_dense(&tt.contract_to_dense()?, tau);
                    if !g.is_finite() {
                        return Err(Error::NonFinite { stage: "K-step".into(), level: j });
                    }
                    Ok(project_core(&g, &cores[..j], &cores[j + 1..], j))
                };
                advance(&mut f, &k_core, t, dt, sub)?
            }
        };
        if j == d - 1 {
            cores[j] = k_core;
            break;
        }
        let (q, r) = linalg::qr_thin(&k_core.left_unfolding());
        let u = TtCore::from_left_unfolding(q, k_core.r_left(), k_core.n())?;
        cores[j] = u.clone();

        // S-step, integrated backward
        let s = match (&mut sets, &ns) {
            (Some(s), Some(ns)) => {
                let (pos, idx, m) = left_level(&s.left[j], &m_prev, &u, u.r_right(), j + 1)?;
                s.left[j + 1] = idx;
                s.left_pos[j + 1] = pos;
                let lu_m = lu_checked(&m, j + 1)?;
                let lu_n = lu_checked(&ns[j], j + 1)?;
                let (rl, rr) = (s.left[j + 1].len(), s.right[j + 1].len());
                let mut entries = Vec::with_capacity(rl * rr);
                for b in 0..rr {
                    for a in 0..rl {
                        entries.push(s.pivot_index(j + 1, a, b));
                    }
                }
                let next = cores[j + 1].clone();
                let mut f = |sm: &Matrix, tau: f64| -> Result<Matrix> {
                    let tt = with_core(&cores, j + 1, next.left_mul(sm));
                    let vals = rhs.eval_entries(&tt, &entries, tau);
                    if vals.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFinite { stage: "S-step".into(), level: j + 1 });
                    }
                    let g = Matrix::from_vec(rl, rr, vals)?;
                    Ok(lu_n.solve_right_transpose(&lu_m.solve(&g)).scaled(-1.0))
                };
                let s_new = advance(&mut f, &r, t, dt, sub)?;
                ms.push(m.clone());
                m_prev = m;
                s_new
            }
            _ => {
                let p = left_partial_dense(&cores[..=j]);
                let q = right_partial_dense(&cores[j + 1..]);
                let rows: usize = dims[..=j].iter().product();
                let next = cores[j + 1].clone();
                let mut f = |sm: &Matrix, tau: f64| -> Result<Matrix> {
                    let tt = with_core(&cores, j + 1, next.left_mul(sm));
                    let g = rhs.eval_dense(&tt.contract_to_dense()?, tau);
                    if !g.is_finite() {
                        return Err(Error::NonFinite { stage: "S-step".into(), level: j + 1 });
                    }
                    let x = Matrix::from_vec(rows, g.values().len() / rows, g.values().to_vec())?;
                    Ok(linalg::matmul(&linalg::matmul_tn(&p, &x), &q).scaled(-1.0))
                };
                advance(&mut f, &r, t, dt, sub)?
            }
        };
        k_core = cores[j + 1].left_mul(&s);
    }
    let y = TensorTrain::new(cores)?;
    check_tt(&y, "sweep")?;
    let has_sets = sets.is_some();
    Ok(SweepOutput { y, sets, ms: has_sets.then_some(ms) })
}

/// One TT-cross step with fixed ranks and fresh indices.
pub fn tt_cross_step(y: &TensorTrain, rhs: &dyn EntrywiseRhs, t: f64, cfg: &StepperConfig) -> Result<TensorTrain> {
    Ok(Stepper::new(Method::TtCross, cfg.clone(), RankPolicy::fixed(), rhs, None)?.step(y, t)?.0)
}

/// One interpolatory projector-splitting step with fixed ranks.
pub fn ips_step(y: &TensorTrain, rhs: &dyn EntrywiseRhs, t: f64, cfg: &StepperConfig) -> Result<TensorTrain> {
    Ok(Stepper::new(Method::Ips, cfg.clone(), RankPolicy::fixed(), rhs, None)?.step(y, t)?.0)
}

/// One orthogonal projector-splitting step with fixed ranks (dense `G`).
pub fn ops_step(y: &TensorTrain, rhs: &dyn EntrywiseRhs, t: f64, cfg: &StepperConfig) -> Result<TensorTrain> {
    Ok(Stepper::new(Method::Ops, cfg.clone(), RankPolicy::fixed(), rhs, None)?.step(y, t)?.0)
}

/// One step-truncation step at accuracy `delta`.
pub fn st_svd_step(
    y: &TensorTrain,
    rhs: &dyn EntrywiseRhs,
    lowrank: &dyn LowRankRhs,
    t: f64,
    cfg: &StepperConfig,
    delta: f64,
) -> Result<TensorTrain> {
    let policy = RankPolicy { delta, ..RankPolicy::fixed() };
    Ok(Stepper::new(Method::StSvd, cfg.clone(), policy, rhs, Some(lowrank))?.step(y, t)?.0)
}

/// Applies the rank policy once: truncates levels with `eps_k < eps_l` and
/// pads levels with `eps_k > eps_u` by zero singular directions.
pub fn adapt_rank(y: &TensorTrain, policy: &RankPolicy) -> Result<TensorTrain> {
    policy.validate()?;
    let family = orthogonalize_all(y)?;
    let eps = rank_proxies(&family)?;
    let mut cool = vec![0; y.ndim() - 1];
    let plan = plan_ranks(policy, &y.ranks(), &y.dims(), &eps, 0, &mut cool);
    if plan.is_empty() {
        return Ok(y.clone());
    }
    let mut out = match &plan.caps {
        Some(caps) => round_to_ranks(y, caps),
        None => y.clone(),
    };
    if plan.extra.iter().any(|&e| e > 0) {
        right_orthogonalize_in_place(&mut out);
        augment_ranks(&mut out, &plan.extra)?;
    }
    Ok(out)
}

/// One trajectory row: state at time `t`, diagnostics of the projection built
/// there, and the cumulative step time spent reaching `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: f64,
    pub err: Option<f64>,
    pub ranks: Vec<usize>,
    pub eps: Vec<f64>,
    pub cond_m: Vec<f64>,
    pub cond_n: Vec<f64>,
    pub wall_s: f64,
}

#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    pub rows: Vec<StepRecord>,
    pub checkpoints: Vec<(f64, TensorTrain)>,
    pub final_state: TensorTrain,
    /// Numerical abort message; rows up to the failure are kept.
    pub error: Option<String>,
}

#[derive(Default)]
pub struct IntegrateOptions<'r> {
    /// Reference snapshots; rows at these times carry a relative error.
    pub reference: Option<&'r [(f64, DenseTensor)]>,
    /// Measure wall time (off gives zeros and byte-identical output).
    pub timing: bool,
    /// Keep every k-th row (0 or 1 keeps all); reference times and the end are always kept.
    pub record_every: usize,
    pub checkpoint_times: Vec<f64>,
}

/// Runs the stepper from `y0` at t = 0 to `cfg.t_end`.
pub fn integrate(stepper: &mut Stepper<'_>, y0: TensorTrain, opts: &IntegrateOptions<'_>) -> TrajectoryRecord {
    let dt = stepper.cfg.dt;
    let n_steps = stepper.cfg.steps();
    let every = opts.record_every.max(1);
    let snap = |t: f64, ts: &[f64]| ts.iter().any(|&s| (s - t).abs() < dt / 2.0);
    let mut rows = Vec::new();
    let mut checkpoints = Vec::new();
    let mut error = None;
    let mut wall = 0.0;
    let mut y = y0;
    for n in 0..=n_steps {
        let t = n as f64 * dt;
        let reference = opts.reference.and_then(|r| r.iter().find(|(s, _)| (s - t).abs() < dt / 2.0));
        let mut next = None;
        let wall_at_t = wall;
        let info = if n < n_steps {
            let clock = Instant::now();
            let res = stepper.step(&y, t);
            if opts.timing {
                wall += clock.elapsed().as_secs_f64();
            }
            match res {
                Ok((y_next, info)) => {
                    next = Some(y_next);
                    info
                }
                Err(e) => {
                    error = Some(format!("step {n} at t = {t}: {e}"));
                    stepper.diagnose(&y)
                }
            }
        } else {
            stepper.diagnose(&y)
        };
        if n % every == 0 || n == n_steps || reference.is_some() || next.is_none() {
            let err = reference.map(|(_, x)| {
                y.contract_to_dense().and_then(|yd| relative_error(&yd, x)).unwrap_or(f64::NAN)
            });
            let ranks = y.ranks()[1..y.ndim()].to_vec();
            rows.push(StepRecord { t, err, ranks, eps: info.eps, cond_m: info.cond_m, cond_n: info.cond_n, wall_s: wall_at_t });
        }
        if snap(t, &opts.checkpoint_times) {
            checkpoints.push((t, y.clone()));
        }
        match next {
            Some(y_next) => y = y_next,
            None => break,
        }
    }
    TrajectoryRecord { rows, checkpoints, final_state: y, error }
}
