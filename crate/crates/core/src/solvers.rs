//! Conjugate gradient variants: textbook (preconditioned) CG, pipelined CG,
//! monomial s-step CG, and the merged CG/PCG whose vector work runs inside
//! the operator's cell loop.

use std::cell::RefCell;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;
use std::time::Instant;

use thiserror::Error;

use crate::error::{invalid, Error};
use crate::operator::{DiagonalPreconditioner, FusedOperator, LinearOperator};
use crate::trace::{account_transfer, AccessKind, RegionTag, SharedRecorder, TransferCounts};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SolverVariant {
    Cg,
    Pcg,
    Pipelined,
    SStep { s: usize },
    CombinedCg,
    CombinedPcg,
}

impl SolverVariant {
    pub fn name(self) -> String {
        match self {
            SolverVariant::Cg => "cg".into(),
            SolverVariant::Pcg => "pcg".into(),
            SolverVariant::Pipelined => "pipelined".into(),
            SolverVariant::SStep { s } => format!("sstep{s}"),
            SolverVariant::CombinedCg => "combined_cg".into(),
            SolverVariant::CombinedPcg => "combined_pcg".into(),
        }
    }

    pub fn is_preconditioned(self) -> bool {
        matches!(self, SolverVariant::Pcg | SolverVariant::CombinedPcg)
    }

    pub fn is_combined(self) -> bool {
        matches!(self, SolverVariant::CombinedCg | SolverVariant::CombinedPcg)
    }

    /// The six entry points, with the given block size for s-step.
    pub fn all(s: usize) -> [SolverVariant; 6] {
        [
            SolverVariant::Cg,
            SolverVariant::Pcg,
            SolverVariant::Pipelined,
            SolverVariant::SStep { s },
            SolverVariant::CombinedCg,
            SolverVariant::CombinedPcg,
        ]
    }
}

impl fmt::Display for SolverVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for SolverVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        Ok(match s {
            "cg" => SolverVariant::Cg,
            "pcg" => SolverVariant::Pcg,
            "pipelined" => SolverVariant::Pipelined,
            "combined_cg" => SolverVariant::CombinedCg,
            "combined_pcg" => SolverVariant::CombinedPcg,
            _ => {
                let digits = s
                    .strip_prefix("sstep")
                    .map(|d| d.trim_start_matches(':'))
                    .ok_or_else(|| invalid(format!("unknown solver variant '{s}'")))?;
                let s = digits.parse().map_err(|_| invalid(format!("bad s-step block size '{digits}'")))?;
                SolverVariant::SStep { s }
            }
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("breakdown in iteration {iteration}: {what} = {value:e}")]
    Breakdown { iteration: usize, what: &'static str, value: f64 },
    #[error("preconditioner is not positive definite in iteration {iteration} (r^T M^-1 r = {value:e})")]
    PreconditionerNotSpd { iteration: usize, value: f64 },
    #[error("s-step basis breakdown in outer step {outer_step}: block Gram matrix is singular")]
    BasisBreakdown { outer_step: usize },
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Operator(#[from] Error),
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    /// Absolute tolerance on the unpreconditioned residual norm.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub variant: SolverVariant,
    /// Merged variants update `x` in every iteration instead of every other.
    pub per_iteration_x_update: bool,
    /// Shared with the operator to record both sides of every access.
    pub recorder: Option<SharedRecorder>,
}

impl SolverConfig {
    pub fn new(variant: SolverVariant, tolerance: f64, max_iterations: usize) -> Self {
        Self { tolerance, max_iterations, variant, per_iteration_x_update: false, recorder: None }
    }

    pub fn with_recorder(mut self, recorder: SharedRecorder) -> Self {
        self.recorder = Some(recorder);
        self
    }

    fn validate(&self) -> Result<(), SolverError> {
        if !(self.tolerance > 0.0) {
            return Err(SolverError::InvalidConfig(format!("tolerance must be positive, got {}", self.tolerance)));
        }
        if let SolverVariant::SStep { s } = self.variant {
            if s == 0 || s > 8 {
                return Err(SolverError::InvalidConfig(format!("s-step block size must be in 1..=8, got {s}")));
            }
        }
        Ok(())
    }
}

/// Scalars of one iteration; `beta` links this iteration's direction to the
/// next and `gamma` is `r^T r` at the start of the iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Residual norm after the iteration (explicit or from the recurrence).
    pub residual_norm: f64,
    /// `(gamma, a, b, c, d, e, f)` of the merged variants.
    pub reductions: Option<[f64; 7]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RegionTimings {
    pub matvec_seconds: f64,
    pub vector_seconds: f64,
    pub total_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub solution: Vec<f64>,
    pub iterations: usize,
    pub residual_norm: f64,
    pub converged: bool,
    pub history: Vec<IterationRecord>,
    pub matvecs: usize,
    /// Pipelined only: `(iteration, recurrence norm, true norm)`.
    pub drift: Vec<(usize, f64, f64)>,
    pub timings: RegionTimings,
    /// Cache-free transfer over all iterations when a recorder was attached.
    pub transfer: Option<TransferCounts>,
}

impl SolveResult {
    /// `iteration,alpha,beta,gamma,residual,reads_per_dof,writes_per_dof`.
    pub fn history_csv(&self, reads_per_dof: f64, writes_per_dof: f64) -> String {
        let mut s = String::from("iteration,alpha,beta,gamma,residual,reads_per_dof,writes_per_dof\n");
        for h in &self.history {
            s.push_str(&format!(
                "{},{:e},{:e},{:e},{:e},{reads_per_dof},{writes_per_dof}\n",
                h.iteration, h.alpha, h.beta, h.gamma, h.residual_norm
            ));
        }
        s
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Partial `(gamma, a, b, c, d, e, f)` = `(r.r, p.v, r.v, v.v, r.Mr, r.Mv,
/// v.Mv)` over `range`.
pub fn fused_reductions(r: &[f64], v: &[f64], p: &[f64], m: &DiagonalPreconditioner, range: Range<usize>) -> [f64; 7] {
    let mut s = [0.0; 7];
    for i in range {
        let (ri, vi, di) = (r[i], v[i], m.get(i));
        s[0] += ri * ri;
        s[1] += p[i] * vi;
        s[2] += ri * vi;
        s[3] += vi * vi;
        s[4] += ri * di * ri;
        s[5] += ri * di * vi;
        s[6] += vi * di * vi;
    }
    s
}

struct Tracer(Option<SharedRecorder>);

impl Tracer {
    fn register(&self, name: &str, v: &[f64]) {
        if let Some(r) = &self.0 {
            r.borrow_mut().register(name, v);
        }
    }

    fn region(&self) {
        if let Some(r) = &self.0 {
            r.borrow_mut().begin_region();
        }
    }

    fn iteration(&self, k: usize) {
        if let Some(r) = &self.0 {
            r.borrow_mut().set_iteration(k as u32);
        }
    }

    fn pause(&self, paused: bool) {
        if let Some(r) = &self.0 {
            r.borrow_mut().set_paused(paused);
        }
    }

    fn touch(&self, v: &[f64], range: Range<usize>, kind: AccessKind, tag: RegionTag) {
        if let Some(r) = &self.0 {
            r.borrow_mut().touch(v, range, kind, tag);
        }
    }

    fn read(&self, v: &[f64], tag: RegionTag) {
        self.touch(v, 0..v.len(), AccessKind::Read, tag);
    }

    fn update(&self, v: &[f64], tag: RegionTag) {
        self.touch(v, 0..v.len(), AccessKind::Read, tag);
        self.touch(v, 0..v.len(), AccessKind::Write, tag);
    }

    fn write(&self, v: &[f64], tag: RegionTag) {
        self.touch(v, 0..v.len(), AccessKind::Write, tag);
    }

    fn summary(&self, n: usize, iterations: usize) -> Option<TransferCounts> {
        let r = self.0.as_ref()?.borrow();
        Some(account_transfer(r.events(), r.vectors(), n, 1..iterations as u32 + 1))
    }
}

struct Clock {
    start: Instant,
    matvec: f64,
}

impl Clock {
    fn new() -> Self {
        Self { start: Instant::now(), matvec: 0.0 }
    }

    fn matvec<T>(&mut self, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        self.matvec += t.elapsed().as_secs_f64();
        out
    }

    fn finish(&self) -> RegionTimings {
        let total = self.start.elapsed().as_secs_f64();
        RegionTimings { matvec_seconds: self.matvec, vector_seconds: (total - self.matvec).max(0.0), total_seconds: total }
    }
}

fn check_rhs<O: LinearOperator + ?Sized>(op: &O, b: &[f64], config: &SolverConfig) -> Result<(), SolverError> {
    config.validate()?;
    if b.len() != op.n() {
        return Err(Error::InvalidArgument(format!("right-hand side has length {}, operator {}", b.len(), op.n())).into());
    }
    if b.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("right-hand side is not finite".into()).into());
    }
    Ok(())
}

/// Runs the variant selected in `config`. Unpreconditioned variants ignore
/// `precond`; preconditioned ones use the identity when it is `None`.
pub fn solve<O: FusedOperator + ?Sized>(
    op: &O,
    b: &[f64],
    precond: Option<&DiagonalPreconditioner>,
    config: &SolverConfig,
) -> Result<SolveResult, SolverError> {
    let identity;
    let m = match precond {
        Some(m) => m,
        None => {
            identity = DiagonalPreconditioner::identity(op.n());
            &identity
        }
    };
    match config.variant {
        SolverVariant::Cg => solve_cg(op, b, config),
        SolverVariant::Pcg => solve_pcg(op, b, m, config),
        SolverVariant::Pipelined => solve_pipelined(op, b, config),
        SolverVariant::SStep { .. } => solve_sstep(op, b, config),
        SolverVariant::CombinedCg => solve_combined_cg(op, b, config),
        SolverVariant::CombinedPcg => solve_combined_pcg(op, b, m, config),
    }
}

/// Textbook CG.
pub fn solve_cg<O: LinearOperator + ?Sized>(op: &O, b: &[f64], config: &SolverConfig) -> Result<SolveResult, SolverError> {
    standard_cg(op, b, None, config)
}

/// Textbook PCG with a diagonal preconditioner. The diagonal is expanded to
/// one entry per vector entry.
pub fn solve_pcg<O: LinearOperator + ?Sized>(
    op: &O,
    b: &[f64],
    precond: &DiagonalPreconditioner,
    config: &SolverConfig,
) -> Result<SolveResult, SolverError> {
    if precond.n() != op.n() {
        return Err(Error::InvalidArgument("preconditioner size does not match the operator".into()).into());
    }
    standard_cg(op, b, Some(&precond.expanded().inverse_diagonal), config)
}

fn standard_cg<O: LinearOperator + ?Sized>(
    op: &O,
    b: &[f64],
    diag: Option<&[f64]>,
    config: &SolverConfig,
) -> Result<SolveResult, SolverError> {
    check_rhs(op, b, config)?;
    let n = op.n();
    let t = Tracer(config.recorder.clone());
    let mut clock = Clock::new();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut v = vec![0.0; n];
    let mut z = if diag.is_some() { vec![0.0; n] } else { Vec::new() };
    for (name, vec) in [("x", &x), ("r", &r), ("v", &v), ("z", &z), ("b", &b.to_vec())] {
        if !vec.is_empty() && name != "b" {
            t.register(name, vec);
        }
    }
    if let Some(d) = diag {
        t.register("diag", d);
    }
    t.iteration(0);
    let precondition = |r: &[f64], z: &mut Vec<f64>| {
        if let Some(d) = diag {
            for i in 0..r.len() {
                z[i] = d[i] * r[i];
            }
        }
    };
    precondition(&r, &mut z);
    let mut p = if diag.is_some() { z.clone() } else { r.clone() };
    t.register("p", &p);
    let zr = |z: &Vec<f64>, r: &Vec<f64>| if diag.is_some() { dot(r, z) } else { dot(r, r) };
    let mut gamma = zr(&z, &r);
    let mut res = dot(&r, &r).sqrt();
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut matvecs = 0;
    while res >= config.tolerance && iterations < config.max_iterations {
        let k = iterations;
        t.iteration(k + 1);
        t.region();
        clock.matvec(|| op.apply(&p, &mut v))?;
        matvecs += 1;
        // region 1
        t.region();
        t.read(&p, RegionTag::Reduction);
        t.read(&v, RegionTag::Reduction);
        let pv = dot(&p, &v);
        if !(pv > 0.0) {
            return Err(SolverError::Breakdown { iteration: k, what: "p^T A p", value: pv });
        }
        let alpha = gamma / pv;
        // region 2
        t.region();
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * v[i];
        }
        t.update(&x, RegionTag::Stream);
        t.read(&p, RegionTag::Stream);
        t.update(&r, RegionTag::Stream);
        t.read(&v, RegionTag::Stream);
        // preconditioner
        if let Some(d) = diag {
            t.region();
            precondition(&r, &mut z);
            t.read(&r, RegionTag::Stream);
            t.read(d, RegionTag::Stream);
            t.write(&z, RegionTag::Stream);
        }
        // region 3
        t.region();
        t.read(&r, RegionTag::Reduction);
        let gamma_new;
        if diag.is_some() {
            t.read(&z, RegionTag::Reduction);
            let (mut a, mut rr) = (0.0, 0.0);
            for i in 0..n {
                a += r[i] * z[i];
                rr += r[i] * r[i];
            }
            gamma_new = a;
            res = rr.sqrt();
        } else {
            gamma_new = dot(&r, &r);
            res = gamma_new.sqrt();
        }
        if diag.is_some() && !(gamma_new >= 0.0) {
            return Err(SolverError::PreconditionerNotSpd { iteration: k, value: gamma_new });
        }
        let beta = gamma_new / gamma;
        history.push(IterationRecord { iteration: k, alpha, beta, gamma, residual_norm: res, reductions: None });
        iterations += 1;
        if res < config.tolerance {
            break;
        }
        // region 4
        t.region();
        let src = if diag.is_some() { &z } else { &r };
        for i in 0..n {
            p[i] = src[i] + beta * p[i];
        }
        t.read(src, RegionTag::Stream);
        t.update(&p, RegionTag::Stream);
        gamma = gamma_new;
    }
    Ok(SolveResult {
        transfer: t.summary(n, iterations),
        solution: x,
        iterations,
        residual_norm: res,
        converged: res < config.tolerance,
        history,
        matvecs,
        drift: Vec::new(),
        timings: clock.finish(),
    })
}

/// Pipelined CG with one fused vector region per iteration.
pub fn solve_pipelined<O: LinearOperator + ?Sized>(op: &O, b: &[f64], config: &SolverConfig) -> Result<SolveResult, SolverError> {
    check_rhs(op, b, config)?;
    let n = op.n();
    let t = Tracer(config.recorder.clone());
    let mut clock = Clock::new();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut w = vec![0.0; n];
    let mut q = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut p = vec![0.0; n];
    for (name, v) in [("x", &x), ("r", &r), ("w", &w), ("q", &q), ("z", &z), ("s", &s), ("p", &p)] {
        t.register(name, v);
    }
    t.iteration(0);
    clock.matvec(|| op.apply(&r, &mut w))?;
    let mut matvecs = 1;
    let mut gamma = dot(&r, &r);
    let mut delta = dot(&w, &r);
    let mut res = gamma.sqrt();
    let (mut alpha_old, mut gamma_old) = (0.0, 0.0);
    let mut history: Vec<IterationRecord> = Vec::new();
    let mut drift = Vec::new();
    let mut iterations = 0;
    let mut ax = vec![0.0; n];
    while res >= config.tolerance && iterations < config.max_iterations {
        let k = iterations;
        t.iteration(k + 1);
        t.region();
        clock.matvec(|| op.apply(&w, &mut q))?;
        matvecs += 1;
        let (beta, alpha) = if k == 0 {
            (0.0, gamma / delta)
        } else {
            let beta = gamma / gamma_old;
            (beta, gamma / (delta - beta * gamma / alpha_old))
        };
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(SolverError::Breakdown { iteration: k, what: "alpha", value: alpha });
        }
        if let Some(h) = history.last_mut() {
            h.beta = beta;
        }
        t.region();
        let (mut g, mut d) = (0.0, 0.0);
        for i in 0..n {
            z[i] = q[i] + beta * z[i];
            s[i] = w[i] + beta * s[i];
            p[i] = r[i] + beta * p[i];
            x[i] += alpha * p[i];
            r[i] -= alpha * s[i];
            w[i] -= alpha * z[i];
            g += r[i] * r[i];
            d += w[i] * r[i];
        }
        t.read(&q, RegionTag::Stream);
        for v in [&z, &s, &p, &x, &r, &w] {
            t.update(v, RegionTag::Stream);
        }
        history.push(IterationRecord { iteration: k, alpha, beta: g / gamma, gamma, residual_norm: g.sqrt(), reductions: None });
        gamma_old = gamma;
        alpha_old = alpha;
        gamma = g;
        delta = d;
        res = gamma.sqrt();
        iterations += 1;
        if iterations % 50 == 0 {
            t.pause(true);
            op.apply(&x, &mut ax)?;
            t.pause(false);
            let true_res = b.iter().zip(&ax).map(|(bi, ai)| (bi - ai).powi(2)).sum::<f64>().sqrt();
            drift.push((iterations, res, true_res));
        }
    }
    Ok(SolveResult {
        transfer: t.summary(n, iterations),
        solution: x,
        iterations,
        residual_norm: res,
        converged: res < config.tolerance,
        history,
        matvecs,
        drift,
        timings: clock.finish(),
    })
}

/// Solves the small dense system `m y = rhs` (row-major, `s x s`) after
/// symmetric diagonal scaling, by Gaussian elimination with partial
/// pivoting; `None` when singular.
fn small_solve(m: &[f64], rhs: &[f64], s: usize) -> Option<Vec<f64>> {
    let d: Vec<f64> = (0..s).map(|i| 1.0 / m[i * s + i].abs().sqrt()).collect();
    if d.iter().any(|x| !x.is_finite()) {
        return None;
    }
    let mut a: Vec<f64> = (0..s * s).map(|k| m[k] * d[k / s] * d[k % s]).collect();
    let mut y: Vec<f64> = rhs.iter().zip(&d).map(|(r, di)| r * di).collect();
    for col in 0..s {
        let piv = (col..s).max_by(|&i, &j| a[i * s + col].abs().total_cmp(&a[j * s + col].abs()))?;
        if !(a[piv * s + col].abs() > 1e-14) {
            return None;
        }
        if piv != col {
            for j in 0..s {
                a.swap(piv * s + j, col * s + j);
            }
            y.swap(piv, col);
        }
        for i in col + 1..s {
            let f = a[i * s + col] / a[col * s + col];
            for j in col..s {
                a[i * s + j] -= f * a[col * s + j];
            }
            y[i] -= f * y[col];
        }
    }
    for i in (0..s).rev() {
        let mut v = y[i];
        for j in i + 1..s {
            v -= a[i * s + j] * y[j];
        }
        y[i] = v / a[i * s + i];
    }
    Some(y.iter().zip(&d).map(|(v, di)| v * di).collect())
}

/// s-step CG on the monomial basis `[r, Ar, ..., A^s r]`; `R` aliases the
/// first `s` basis vectors and `Q` the last `s`.
pub fn solve_sstep<O: LinearOperator + ?Sized>(op: &O, b: &[f64], config: &SolverConfig) -> Result<SolveResult, SolverError> {
    check_rhs(op, b, config)?;
    let SolverVariant::SStep { s } = config.variant else {
        return Err(SolverError::InvalidConfig("solve_sstep needs an s-step variant".into()));
    };
    let n = op.n();
    let t = Tracer(config.recorder.clone());
    let mut clock = Clock::new();
    let mut x = vec![0.0; n];
    // tb[0] is the residual
    let mut tb: Vec<Vec<f64>> = (0..=s).map(|_| vec![0.0; n]).collect();
    tb[0].copy_from_slice(b);
    let mut pb: Vec<Vec<f64>> = (0..s).map(|_| vec![0.0; n]).collect();
    let mut ax = vec![0.0; n];
    t.register("x", &x);
    t.register("b", b);
    t.register("ax", &ax);
    for (i, v) in tb.iter().enumerate() {
        t.register(&format!("t{i}"), v);
    }
    for (i, v) in pb.iter().enumerate() {
        t.register(&format!("p{i}"), v);
    }
    t.iteration(0);
    let mut res = dot(&tb[0], &tb[0]).sqrt();
    let mut w_prev: Option<Vec<f64>> = None;
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut matvecs = 0;
    let mut outer = 0;
    let mut row = vec![0.0; s];
    while res >= config.tolerance && iterations < config.max_iterations {
        t.iteration(iterations + 1);
        let gamma = res * res;
        for i in 1..=s {
            let (lo, hi) = tb.split_at_mut(i);
            t.region();
            clock.matvec(|| op.apply(&lo[i - 1], &mut hi[0]))?;
            matvecs += 1;
        }
        // B = -W_prev^{-1} (P_prev^T Q)
        let mut bm = vec![0.0; s * s];
        if let Some(w) = &w_prev {
            t.region();
            let mut c = vec![0.0; s * s];
            for a in 0..s {
                for j in 0..s {
                    c[a * s + j] = dot(&pb[a], &tb[j + 1]);
                }
            }
            for v in pb.iter().chain(&tb[1..]) {
                t.read(v, RegionTag::Reduction);
            }
            for j in 0..s {
                let col: Vec<f64> = (0..s).map(|a| c[a * s + j]).collect();
                let y = small_solve(w, &col, s).ok_or(SolverError::BasisBreakdown { outer_step: outer })?;
                for a in 0..s {
                    bm[a * s + j] = -y[a];
                }
            }
        }
        // P = R + P_prev B, W = Q^T P, g = P^T r
        t.region();
        let mut w = vec![0.0; s * s];
        let mut g = vec![0.0; s];
        let first = w_prev.is_none();
        for i in 0..n {
            for j in 0..s {
                let mut v = tb[j][i];
                if !first {
                    for a in 0..s {
                        v += pb[a][i] * bm[a * s + j];
                    }
                }
                row[j] = v;
            }
            for j in 0..s {
                pb[j][i] = row[j];
                g[j] += row[j] * tb[0][i];
                for a in 0..s {
                    w[a * s + j] += tb[a + 1][i] * row[j];
                }
            }
        }
        for v in &tb {
            t.read(v, RegionTag::Stream);
        }
        for v in &pb {
            t.update(v, RegionTag::Stream);
        }
        if !(w[0] > 0.0) {
            return Err(SolverError::Breakdown { iteration: iterations, what: "p^T A p", value: w[0] });
        }
        // an exhausted Krylov space leaves W rank deficient; use the largest
        // nonsingular leading block and restart the recurrence afterwards
        let (coeffs, rank) = (1..=s)
            .rev()
            .find_map(|k| {
                let lead: Vec<f64> = (0..k * k).map(|i| w[(i / k) * s + i % k]).collect();
                small_solve(&lead, &g[..k], k).map(|mut c| {
                    c.resize(s, 0.0);
                    (c, k)
                })
            })
            .ok_or(SolverError::BasisBreakdown { outer_step: outer })?;
        // x += P a
        t.region();
        for i in 0..n {
            let mut v = 0.0;
            for j in 0..s {
                v += pb[j][i] * coeffs[j];
            }
            x[i] += v;
        }
        t.update(&x, RegionTag::Stream);
        for v in &pb {
            t.read(v, RegionTag::Stream);
        }
        // r = b - A x, computed in the A x buffer
        t.region();
        clock.matvec(|| op.apply(&x, &mut ax))?;
        matvecs += 1;
        t.region();
        let mut rr = 0.0;
        for i in 0..n {
            ax[i] = b[i] - ax[i];
            rr += ax[i] * ax[i];
        }
        t.read(b, RegionTag::Stream);
        t.update(&ax, RegionTag::Stream);
        std::mem::swap(&mut tb[0], &mut ax);
        res = rr.sqrt();
        history.push(IterationRecord {
            iteration: iterations,
            alpha: coeffs[0],
            beta: if first { 0.0 } else { bm[0] },
            gamma,
            residual_norm: res,
            reductions: None,
        });
        w_prev = if rank == s { Some(w) } else { None };
        iterations += s;
        outer += 1;
    }
    Ok(SolveResult {
        transfer: t.summary(n, iterations),
        solution: x,
        iterations,
        residual_norm: res,
        converged: res < config.tolerance,
        history,
        matvecs,
        drift: Vec::new(),
        timings: clock.finish(),
    })
}

/// Merged CG: all vector updates run in the operator's pre callbacks and
/// the reductions in its post callbacks.
pub fn solve_combined_cg<O: FusedOperator + ?Sized>(op: &O, b: &[f64], config: &SolverConfig) -> Result<SolveResult, SolverError> {
    merged_cg(op, b, None, config)
}

/// Merged PCG with a diagonal preconditioner applied on the fly; `z` is
/// never stored.
pub fn solve_combined_pcg<O: FusedOperator + ?Sized>(
    op: &O,
    b: &[f64],
    precond: &DiagonalPreconditioner,
    config: &SolverConfig,
) -> Result<SolveResult, SolverError> {
    if precond.n() != op.n() {
        return Err(Error::InvalidArgument("preconditioner size does not match the operator".into()).into());
    }
    merged_cg(op, b, Some(precond), config)
}

struct MergedState {
    x: Vec<f64>,
    r: Vec<f64>,
}

fn merged_cg<O: FusedOperator + ?Sized>(
    op: &O,
    b: &[f64],
    precond: Option<&DiagonalPreconditioner>,
    config: &SolverConfig,
) -> Result<SolveResult, SolverError> {
    check_rhs(op, b, config)?;
    let n = op.n();
    let t = Tracer(config.recorder.clone());
    let mut clock = Clock::new();
    let identity = DiagonalPreconditioner::identity(n);
    let m = precond.unwrap_or(&identity);
    let state = RefCell::new(MergedState { x: vec![0.0; n], r: b.to_vec() });
    let mut p = vec![0.0; n];
    let mut v = vec![0.0; n];
    {
        let st = state.borrow();
        t.register("x", &st.x);
        t.register("r", &st.r);
    }
    t.register("p", &p);
    t.register("v", &v);
    if precond.is_some() {
        t.register("diag", &m.inverse_diagonal);
    }
    t.iteration(0);
    let mut res = dot(b, b).sqrt();
    let mut history: Vec<IterationRecord> = Vec::new();
    let mut iterations = 0;
    // alpha/beta of the two previous iterations
    let (mut a1, mut b1, mut a2, mut b2) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let every = config.per_iteration_x_update;
    while res >= config.tolerance && iterations < config.max_iterations {
        let k = iterations + 1;
        t.iteration(k);
        t.region();
        let update_x = if every { k > 1 } else { k > 1 && k % 2 == 1 };
        if update_x && !every && b2 == 0.0 {
            return Err(SolverError::Breakdown { iteration: k - 1, what: "beta", value: b2 });
        }
        let mut sums = [0.0; 7];
        let diag_traced = precond.is_some();
        {
            let mut pre = |rg: Range<usize>, p: &mut [f64], v_old: &[f64]| {
                let mut st = state.borrow_mut();
                let MergedState { x, r } = &mut *st;
                if update_x {
                    if every {
                        for i in rg.clone() {
                            x[i] += a1 * p[i];
                        }
                    } else {
                        let f = a2 / b2;
                        for i in rg.clone() {
                            x[i] += a1 * p[i] + f * (p[i] - m.get(i) * r[i]);
                        }
                    }
                }
                for i in rg.clone() {
                    r[i] -= a1 * v_old[i];
                    p[i] = m.get(i) * r[i] + b1 * p[i];
                }
                if update_x {
                    t.touch(x, rg.clone(), AccessKind::Read, RegionTag::Pre);
                    t.touch(x, rg.clone(), AccessKind::Write, RegionTag::Pre);
                }
                t.touch(r, rg.clone(), AccessKind::Read, RegionTag::Pre);
                t.touch(r, rg.clone(), AccessKind::Write, RegionTag::Pre);
                t.touch(v_old, rg.clone(), AccessKind::Read, RegionTag::Pre);
                t.touch(p, rg.clone(), AccessKind::Read, RegionTag::Pre);
                t.touch(p, rg.clone(), AccessKind::Write, RegionTag::Pre);
                if diag_traced {
                    let c = m.components;
                    let dr = rg.start / c..rg.end.div_ceil(c);
                    t.touch(&m.inverse_diagonal, dr, AccessKind::Read, RegionTag::Pre);
                }
            };
            let mut post = |rg: Range<usize>, p: &[f64], v: &[f64]| {
                let st = state.borrow();
                let part = fused_reductions(&st.r, v, p, m, rg.clone());
                for (s, x) in sums.iter_mut().zip(part) {
                    *s += x;
                }
                t.touch(&st.r, rg.clone(), AccessKind::Read, RegionTag::Post);
                t.touch(p, rg.clone(), AccessKind::Read, RegionTag::Post);
                t.touch(v, rg.clone(), AccessKind::Read, RegionTag::Post);
                if diag_traced {
                    let c = m.components;
                    t.touch(&m.inverse_diagonal, rg.start / c..rg.end.div_ceil(c), AccessKind::Read, RegionTag::Post);
                }
            };
            clock.matvec(|| op.apply_fused(&mut p, &mut v, &mut pre, &mut post))?;
        }
        let [gamma, a, bb, c, d, e, f] = sums;
        let k0 = k - 1;
        if !(a > 0.0) {
            return Err(SolverError::Breakdown { iteration: k0, what: "p^T A p", value: a });
        }
        let (alpha, gamma_next, beta_num, beta_den) = if precond.is_some() {
            if !(d > 0.0) {
                return Err(SolverError::PreconditionerNotSpd { iteration: k0, value: d });
            }
            let alpha = d / a;
            (alpha, gamma - 2.0 * alpha * bb + alpha * alpha * c, d - 2.0 * alpha * e + alpha * alpha * f, d)
        } else {
            let alpha = gamma / a;
            let g1 = gamma - 2.0 * alpha * bb + alpha * alpha * c;
            (alpha, g1, g1, gamma)
        };
        res = gamma_next.max(0.0).sqrt();
        if !(beta_num > 0.0) {
            // recurrence cancelled to zero: settle it with the true residual
            let st = state.borrow();
            res = st.r.iter().zip(&v).map(|(r, v)| (r - alpha * v).powi(2)).sum::<f64>().sqrt();
            if res >= config.tolerance {
                return Err(SolverError::Breakdown { iteration: k0, what: "beta", value: beta_num });
            }
        }
        iterations = k;
        let beta = beta_num / beta_den;
        history.push(IterationRecord { iteration: k0, alpha, beta, gamma, residual_norm: res, reductions: Some(sums) });
        if res < config.tolerance || iterations >= config.max_iterations {
            // bring x up to date
            t.region();
            let mut st = state.borrow_mut();
            let MergedState { x, r } = &mut *st;
            let x_current = every || k % 2 == 1;
            if x_current {
                for i in 0..n {
                    x[i] += alpha * p[i];
                }
            } else {
                if b1 == 0.0 {
                    return Err(SolverError::Breakdown { iteration: k0, what: "beta", value: b1 });
                }
                let fct = a1 / b1;
                for i in 0..n {
                    x[i] += alpha * p[i] + fct * (p[i] - m.get(i) * r[i]);
                }
            }
            break;
        }
        a2 = a1;
        b2 = b1;
        a1 = alpha;
        b1 = beta;
    }
    let MergedState { x, .. } = state.into_inner();
    Ok(SolveResult {
        transfer: t.summary(n, iterations),
        solution: x,
        iterations,
        residual_norm: res,
        converged: res < config.tolerance,
        history,
        matvecs: iterations,
        drift: Vec::new(),
        timings: clock.finish(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator::DenseMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spd(n: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut a = DenseMatrix::zeros(n);
        for i in 0..n {
            for j in 0..n {
                let v: f64 = (0..n).map(|k| g[i * n + k] * g[j * n + k]).sum();
                a.set(i, j, v + if i == j { n as f64 } else { 0.0 });
            }
        }
        a
    }

    fn rhs(n: usize) -> Vec<f64> {
        (0..n).map(|i| ((i * 7 + 3) % 11) as f64 - 5.0).collect()
    }

    fn cfg(v: SolverVariant) -> SolverConfig {
        SolverConfig::new(v, 1e-10, 500)
    }

    #[test]
    fn identity_converges_in_one() {
        let a =
            DenseMatrix::from_rows(&(0..5).map(|i| (0..5).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect::<Vec<_>>()).unwrap();
        let b = rhs(5);
        for v in SolverVariant::all(1) {
            let r = solve(&a, &b, None, &cfg(v)).unwrap();
            assert_eq!(r.iterations, 1, "{v}");
            for (x, y) in r.solution.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_by_two_trace() {
        let a = DenseMatrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 4.0]]).unwrap();
        let r = solve_cg(&a, &[2.0, 4.0], &cfg(SolverVariant::Cg)).unwrap();
        // r0 = b, alpha0 = 20 / 72
        assert!((r.history[0].alpha - 20.0 / 72.0).abs() < 1e-15);
        assert_eq!(r.iterations, 2);
        assert!((r.solution[0] - 1.0).abs() < 1e-12 && (r.solution[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn variants_agree_on_spd_system() {
        let a = spd(30, 3);
        let b = rhs(30);
        let m = DiagonalPreconditioner { inverse_diagonal: a.diagonal().iter().map(|d| 1.0 / d).collect(), components: 1 };
        let reference = solve_cg(&a, &b, &cfg(SolverVariant::Cg)).unwrap();
        for v in SolverVariant::all(2) {
            let r = solve(&a, &b, Some(&m), &cfg(v)).unwrap();
            assert!(r.converged, "{v}");
            let err = r.solution.iter().zip(&reference.solution).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let norm = dot(&reference.solution, &reference.solution).sqrt();
            assert!(err <= 1e-8 * norm, "{v}: {err}");
        }
    }

    #[test]
    fn merged_traces_match_textbook() {
        let a = spd(40, 5);
        let b = rhs(40);
        let m = DiagonalPreconditioner { inverse_diagonal: a.diagonal().iter().map(|d| 1.0 / d).collect(), components: 1 };
        let pcg = solve_pcg(&a, &b, &m, &cfg(SolverVariant::Pcg)).unwrap();
        let comb = solve_combined_pcg(&a, &b, &m, &cfg(SolverVariant::CombinedPcg)).unwrap();
        for (x, y) in pcg.history.iter().zip(&comb.history).take(10) {
            assert!((x.alpha - y.alpha).abs() <= 1e-8 * x.alpha.abs());
            assert!((x.beta - y.beta).abs() <= 1e-8 * x.beta.abs());
        }
        let cg = solve_cg(&a, &b, &cfg(SolverVariant::Cg)).unwrap();
        let ccg = solve_combined_cg(&a, &b, &cfg(SolverVariant::CombinedCg)).unwrap();
        let id = DiagonalPreconditioner::identity(40);
        let cpcg_id = solve_combined_pcg(&a, &b, &id, &cfg(SolverVariant::CombinedPcg)).unwrap();
        let pipe = solve_pipelined(&a, &b, &cfg(SolverVariant::Pipelined)).unwrap();
        let s1 = solve_sstep(&a, &b, &cfg(SolverVariant::SStep { s: 1 })).unwrap();
        for k in 0..10 {
            let c = &cg.history[k];
            for (name, o) in [("combined", &ccg.history[k]), ("pipelined", &pipe.history[k]), ("sstep1", &s1.history[k])] {
                assert!((c.alpha - o.alpha).abs() <= 1e-8 * c.alpha.abs(), "{name} alpha {k}");
                assert!((c.gamma - o.gamma).abs() <= 1e-8 * c.gamma.abs(), "{name} gamma {k}");
            }
            assert!((c.beta - ccg.history[k].beta).abs() <= 1e-8 * c.beta);
            assert!((c.beta - pipe.history[k].beta).abs() <= 1e-8 * c.beta);
            assert!((c.beta - s1.history[k + 1].beta).abs() <= 1e-8 * c.beta);
            let (x, y) = (&ccg.history[k], &cpcg_id.history[k]);
            assert!((x.alpha - y.alpha).abs() <= 1e-12 * x.alpha && (x.beta - y.beta).abs() <= 1e-12 * x.beta);
        }
    }

    #[test]
    fn per_iteration_x_update_matches() {
        let a = spd(25, 9);
        let b = rhs(25);
        let base = solve_combined_cg(&a, &b, &cfg(SolverVariant::CombinedCg)).unwrap();
        let mut c = cfg(SolverVariant::CombinedCg);
        c.per_iteration_x_update = true;
        let every = solve_combined_cg(&a, &b, &c).unwrap();
        assert_eq!(base.iterations, every.iterations);
        for (x, y) in base.solution.iter().zip(&every.solution) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn sstep_exhausted_krylov_space() {
        // rank-one Krylov space: the leading 1x1 block solves exactly
        let a = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let r = solve_sstep(&a, &[1.0, 2.0], &cfg(SolverVariant::SStep { s: 3 })).unwrap();
        assert_eq!((r.iterations, r.matvecs), (3, 4));
        assert!((r.solution[0] - 1.0).abs() < 1e-14 && (r.solution[1] - 2.0).abs() < 1e-14);
        let zero = DenseMatrix::zeros(2);
        let err = solve_sstep(&zero, &[1.0, 2.0], &cfg(SolverVariant::SStep { s: 2 })).unwrap_err();
        assert!(matches!(err, SolverError::Breakdown { iteration: 0, .. }));
    }

    #[test]
    fn breakdown_on_indefinite() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, -1.0]]).unwrap();
        let b = [0.0, 1.0];
        for v in SolverVariant::all(2) {
            assert!(solve(&a, &b, None, &cfg(v)).is_err(), "{v}");
        }
    }

    #[test]
    fn fused_reduction_identities() {
        let m = DiagonalPreconditioner::identity(8);
        let z = [0.0; 8];
        assert_eq!(fused_reductions(&z, &z, &z, &m, 0..8), [0.0; 7]);
        let r: Vec<f64> = (0..8).map(|i| i as f64 - 3.5).collect();
        let p: Vec<f64> = (0..8).map(|i| (i * i) as f64).collect();
        let s = fused_reductions(&r, &r, &p, &m, 0..8);
        assert_eq!((s[2], s[3]), (s[0], s[0]));
        assert_eq!((s[5], s[6]), (s[4], s[4]));
        assert_eq!(s[1], dot(&p, &r));
    }

    #[test]
    fn variant_names_round_trip() {
        for v in SolverVariant::all(6) {
            assert_eq!(v.name().parse::<SolverVariant>().unwrap(), v);
        }
        assert_eq!("sstep:3".parse::<SolverVariant>().unwrap(), SolverVariant::SStep { s: 3 });
        assert!("bicg".parse::<SolverVariant>().is_err());
        assert!(solve_sstep(&spd(3, 1), &[1.0; 3], &cfg(SolverVariant::SStep { s: 9 })).is_err());
    }
}
