//! `bench`, `liveliness`, `cachesweep` and `transfer-model`.

use std::fmt::Write as _;
use std::time::Instant;

use mfcg::bp::check_size;
use mfcg::dofs::{batch_size, compute_range_schedule, distribute_dofs_in_order, make_batches, renumber_optimized};
use mfcg::locality::{cache_sweep, capacity_ladder, liveliness, predict_transfer_for, to_f64, transfer_table_csv, CacheSweepRow};
use mfcg::mesh::build_cartesian_mesh;
use mfcg::operator::LinearOperator;
use mfcg::trace::{replay_cache, AccessEvent, CacheModel, TraceRecorder};
use mfcg::{build_problem, BpId, NumberingKind, Problem, ProblemConfig, SolverConfig, SolverVariant};

use crate::config::{cells_label, RhsKind, RunConfig};
use crate::error::CliError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Problems beyond this many unknowns are refused before allocation.
pub const MAX_DOFS: usize = 1 << 25;

/// Iterations recorded for transfer statistics and cache sweeps.
pub const TRACE_ITERATIONS: usize = 8;

pub const LINE_BYTES: usize = 64;

pub const BENCH_HEADER: &str = "bp,degree,cells,geometry,numbering,variant,n_dofs,iterations,repeats,min_seconds,dofs_per_second,matvec_seconds,vector_seconds,residual_norm,relative_residual,traced_reads_per_dof,traced_writes_per_dof,model_reads_per_dof,model_writes_per_dof,cache_loads_per_dof,cache_stores_per_dof";

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub bp: BpId,
    pub degree: usize,
    pub cells: [usize; 3],
    pub geometry: mfcg::GeometryVariant,
    pub numbering: NumberingKind,
    pub variant: SolverVariant,
    pub n_dofs: usize,
    pub iterations: usize,
    pub repeats: usize,
    pub min_seconds: f64,
    pub matvec_seconds: f64,
    pub vector_seconds: f64,
    /// `|b - A x|` after the timed solve.
    pub residual_norm: f64,
    pub relative_residual: f64,
    pub traced_reads: f64,
    pub traced_writes: f64,
    pub model_reads: f64,
    pub model_writes: f64,
    pub cache_loads: f64,
    pub cache_stores: f64,
}

impl BenchRow {
    pub fn dofs_per_second(&self) -> f64 {
        self.n_dofs as f64 * self.iterations as f64 / self.min_seconds
    }

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
            self.bp,
            self.degree,
            cells_label(self.cells),
            self.geometry,
            self.numbering,
            self.variant,
            self.n_dofs,
            self.iterations,
            self.repeats,
            self.min_seconds,
            self.dofs_per_second(),
            self.matvec_seconds,
            self.vector_seconds,
            self.residual_norm,
            self.relative_residual,
            self.traced_reads,
            self.traced_writes,
            self.model_reads,
            self.model_writes,
            self.cache_loads,
            self.cache_stores
        )
    }
}

/// Every `(bp, degree, cells, geometry)` combination of `cfg`.
pub fn problem_configs(cfg: &RunConfig) -> Vec<ProblemConfig> {
    let mut out = Vec::new();
    for &bp in &cfg.bp {
        for &degree in &cfg.degree {
            for &cells in &cfg.cells {
                for &geometry in &cfg.geometry {
                    out.push(ProblemConfig {
                        bp,
                        degree,
                        cells,
                        geometry,
                        deformation: cfg.deformation,
                        numbering: cfg.numbering,
                        traversal: cfg.traversal,
                        simd_lanes: cfg.simd_lanes,
                    });
                }
            }
        }
    }
    out
}

pub fn guarded_problem(pc: &ProblemConfig) -> Result<Problem, CliError> {
    check_size(pc, MAX_DOFS)?;
    Ok(build_problem(pc)?)
}

fn model_totals(v: SolverVariant, components: usize) -> (f64, f64) {
    let p = predict_transfer_for(v, components);
    let mv = match v {
        SolverVariant::SStep { s } => (s as f64 + 1.0) / s as f64,
        _ => 1.0,
    };
    (to_f64(p.vector_reads) + to_f64(p.matvec_reads) * mv, to_f64(p.vector_writes) + to_f64(p.matvec_writes) * mv)
}

/// Fixed-iteration runs stop early once the residual reaches this
/// multiple of `|b|`.
pub const RESIDUAL_FLOOR: f64 = 1e-13;

pub fn bench_rhs(prob: &Problem, kind: RhsKind, seed: u64) -> Vec<f64> {
    match kind {
        RhsKind::Manufactured => prob.rhs.clone(),
        RhsKind::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = prob.operator.handler();
            (0..prob.n_dofs()).map(|i| if h.is_constrained(i) { 0.0 } else { rng.gen_range(-1.0..1.0) }).collect()
        }
    }
}

fn floor(b: &[f64]) -> f64 {
    (RESIDUAL_FLOOR * b.iter().map(|x| x * x).sum::<f64>().sqrt()).max(f64::MIN_POSITIVE)
}

pub struct TracedRun {
    /// Events of iterations 1 and later.
    pub events: Vec<AccessEvent>,
    pub iterations: usize,
    /// Ideal reads and writes per DoF per iteration.
    pub transfer: (f64, f64),
}

/// Records up to `iterations` iterations of one solve.
pub fn traced_run(prob: &Problem, rhs: &[f64], variant: SolverVariant, iterations: usize) -> Result<TracedRun, CliError> {
    let rec = TraceRecorder::shared();
    prob.operator.set_recorder(Some(rec.clone()));
    let cfg = SolverConfig::new(variant, floor(rhs), iterations).with_recorder(rec.clone());
    let res = mfcg::solve(&prob.operator, rhs, Some(&prob.preconditioner), &cfg);
    prob.operator.set_recorder(None);
    let res = res?;
    let events = rec.borrow().events().iter().filter(|e| e.iteration >= 1).copied().collect();
    let t = res.transfer.unwrap_or_default();
    Ok(TracedRun { events, iterations: res.iterations, transfer: (t.total_reads(), t.total_writes()) })
}

fn true_residual(prob: &Problem, b: &[f64], x: &[f64]) -> Result<f64, CliError> {
    let mut ax = vec![0.0; x.len()];
    prob.operator.apply(x, &mut ax)?;
    Ok(b.iter().zip(&ax).map(|(b, a)| (b - a).powi(2)).sum::<f64>().sqrt())
}

pub fn bench_problem(prob: &Problem, cfg: &RunConfig, variant: SolverVariant) -> Result<BenchRow, CliError> {
    let pc = &prob.config;
    let rhs = bench_rhs(prob, cfg.rhs, cfg.seed);
    let sc = SolverConfig::new(variant, floor(&rhs), cfg.iterations);
    let mut best: Option<(f64, mfcg::SolveResult)> = None;
    for _ in 0..cfg.repeats {
        let t = Instant::now();
        let res = mfcg::solve(&prob.operator, &rhs, Some(&prob.preconditioner), &sc)?;
        let secs = t.elapsed().as_secs_f64();
        if best.as_ref().is_none_or(|(b, _)| secs < *b) {
            best = Some((secs, res));
        }
    }
    let (min_seconds, res) = best.expect("repeats >= 1");
    let residual_norm = true_residual(prob, &rhs, &res.solution)?;
    let b_norm = rhs.iter().map(|b| b * b).sum::<f64>().sqrt();

    let traced = traced_run(prob, &rhs, variant, cfg.iterations.min(TRACE_ITERATIONS))?;
    let (traced_reads, traced_writes) = traced.transfer;
    let mut model = CacheModel::new(cfg.cache_bytes, LINE_BYTES);
    let replay = replay_cache(&traced.events, &mut model, prob.n_dofs(), traced.iterations);
    let (model_reads, model_writes) = model_totals(variant, pc.bp.components());
    Ok(BenchRow {
        bp: pc.bp,
        degree: pc.degree,
        cells: pc.cells,
        geometry: pc.geometry,
        numbering: pc.numbering,
        variant,
        n_dofs: prob.n_dofs(),
        iterations: res.iterations,
        repeats: cfg.repeats,
        min_seconds,
        matvec_seconds: res.timings.matvec_seconds,
        vector_seconds: res.timings.vector_seconds,
        residual_norm,
        relative_residual: residual_norm / b_norm.max(f64::MIN_POSITIVE),
        traced_reads,
        traced_writes,
        model_reads,
        model_writes,
        cache_loads: replay.ram_loads_per_dof,
        cache_stores: replay.ram_stores_per_dof,
    })
}

/// Combined PCG slower than PCG on a problem whose vectors overflow the
/// configured cache.
pub fn timing_warnings(rows: &[BenchRow], cache_bytes: usize) -> Vec<String> {
    let mut out = Vec::new();
    for comb in rows.iter().filter(|r| r.variant == SolverVariant::CombinedPcg) {
        let same = |r: &&BenchRow| {
            r.variant == SolverVariant::Pcg && (r.bp, r.degree, r.cells, r.geometry) == (comb.bp, comb.degree, comb.cells, comb.geometry)
        };
        if let Some(pcg) = rows.iter().find(same) {
            let vector_bytes = comb.n_dofs * 8 * 5;
            if vector_bytes > cache_bytes && comb.min_seconds > pcg.min_seconds {
                out.push(format!(
                    "warning: {} p={} {}: combined_pcg {:.4} s slower than pcg {:.4} s",
                    comb.bp,
                    comb.degree,
                    cells_label(comb.cells),
                    comb.min_seconds,
                    pcg.min_seconds
                ));
            }
        }
    }
    out
}

pub fn cmd_bench(cfg: &RunConfig) -> Result<(String, Vec<String>), CliError> {
    let mut rows = Vec::new();
    for pc in problem_configs(cfg) {
        let prob = guarded_problem(&pc)?;
        for &v in &cfg.variant {
            rows.push(bench_problem(&prob, cfg, v)?);
        }
    }
    let mut csv = format!("{BENCH_HEADER}\n");
    for r in &rows {
        csv.push_str(&r.csv());
        csv.push('\n');
    }
    Ok((csv, timing_warnings(&rows, cfg.cache_bytes)))
}

pub const LIVELINESS_HEADER: &str = "bp,degree,cells,numbering,distance,cumulative_percent";

/// Default and optimized numbering on every configured mesh; the notes
/// report same-batch fractions and dominance.
pub fn cmd_liveliness(cfg: &RunConfig) -> Result<(String, Vec<String>), CliError> {
    let mut csv = format!("{LIVELINESS_HEADER}\n");
    let mut notes = Vec::new();
    for &bp in &cfg.bp {
        let c = bp.components();
        for &degree in &cfg.degree {
            for &cells in &cfg.cells {
                check_size(&ProblemConfig { bp, degree, cells, ..Default::default() }, MAX_DOFS)?;
                let mesh = build_cartesian_mesh(cells, [1.0; 3])?;
                let plan = make_batches(&mesh, batch_size(degree, c, cfg.simd_lanes)?, cfg.traversal)?;
                let default = distribute_dofs_in_order(&mesh, degree, c, &plan.cell_order())?.with_boundary_constraints();
                let optimized = renumber_optimized(&default, &plan)?;
                let a = liveliness(&compute_range_schedule(&default, &plan)?);
                let b = liveliness(&compute_range_schedule(&optimized, &plan)?);
                for (kind, rep) in [(NumberingKind::Default, &a), (NumberingKind::Optimized, &b)] {
                    for (d, pct) in &rep.cdf {
                        let _ = writeln!(csv, "{bp},{degree},{},{kind},{d},{pct:.4}", cells_label(cells));
                    }
                }
                notes.push(format!(
                    "{bp} p={degree} {}: same-batch {:.1}% default, {:.1}% optimized; optimized dominates: {}",
                    cells_label(cells),
                    100.0 * a.same_batch_fraction,
                    100.0 * b.same_batch_fraction,
                    b.dominates(&a)
                ));
            }
        }
    }
    Ok((csv, notes))
}

pub const CACHESWEEP_HEADER: &str = "bp,degree,cells,geometry,numbering,variant,capacity_bytes,loads_per_dof,stores_per_dof";
pub const SWEEP_MIN_BYTES: usize = 32 << 10;
pub const SWEEP_MAX_BYTES: usize = 64 << 20;

pub fn cmd_cachesweep(cfg: &RunConfig) -> Result<String, CliError> {
    let mut csv = format!("{CACHESWEEP_HEADER}\n");
    let ladder = capacity_ladder(SWEEP_MIN_BYTES, SWEEP_MAX_BYTES);
    for pc in problem_configs(cfg) {
        let prob = guarded_problem(&pc)?;
        for &v in &cfg.variant {
            let rhs = bench_rhs(&prob, cfg.rhs, cfg.seed);
            let t = traced_run(&prob, &rhs, v, cfg.iterations.min(TRACE_ITERATIONS))?;
            let rows: Vec<CacheSweepRow> = cache_sweep(&t.events, prob.n_dofs(), t.iterations, &ladder, LINE_BYTES);
            for r in rows {
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{},{v},{},{:.6},{:.6}",
                    pc.bp,
                    pc.degree,
                    cells_label(pc.cells),
                    pc.geometry,
                    pc.numbering,
                    r.capacity_bytes,
                    r.loads_per_dof,
                    r.stores_per_dof
                );
            }
        }
    }
    Ok(csv)
}

/// The predicted per-variant transfer table, one block per configured
/// problem.
pub fn cmd_transfer_model(cfg: &RunConfig) -> String {
    let mut csv = String::new();
    for (i, &bp) in cfg.bp.iter().enumerate() {
        let rows: Vec<_> = cfg.variant.iter().map(|&v| predict_transfer_for(v, bp.components())).collect();
        let table = transfer_table_csv(&rows);
        let mut lines = table.lines();
        let header = lines.next().unwrap_or_default();
        if i == 0 {
            let _ = writeln!(csv, "bp,{header}");
        }
        for l in lines {
            let _ = writeln!(csv, "{bp},{l}");
        }
    }
    csv
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        RunConfig { bp: vec![BpId::Bp3], degree: vec![2], cells: vec![[2, 2, 2]], iterations: 5, repeats: 2, ..Default::default() }
    }

    #[test]
    fn bench_rows_have_every_column() {
        let (csv, _) = cmd_bench(&small()).unwrap();
        let mut lines = csv.lines();
        let width = lines.next().unwrap().split(',').count();
        let rows: Vec<_> = lines.collect();
        assert_eq!(rows.len(), 6);
        for r in rows {
            assert_eq!(r.split(',').count(), width, "{r}");
        }
    }

    #[test]
    fn model_totals_include_extra_matvecs() {
        assert_eq!(model_totals(SolverVariant::Cg, 1), (11.0, 4.0));
        let (r, w) = model_totals(SolverVariant::SStep { s: 2 }, 1);
        assert!((r - 10.0).abs() < 1e-12 && (w - 3.5).abs() < 1e-12);
        assert!((model_totals(SolverVariant::CombinedPcg, 1).0 - 4.5).abs() < 1e-12);
    }

    #[test]
    fn warning_only_when_combined_is_slower() {
        let (csv, _) = cmd_bench(&RunConfig { variant: vec![SolverVariant::Pcg, SolverVariant::CombinedPcg], ..small() }).unwrap();
        assert_eq!(csv.lines().count(), 3);
        let prob = guarded_problem(&problem_configs(&small())[0]).unwrap();
        let mut a = bench_problem(&prob, &small(), SolverVariant::Pcg).unwrap();
        let mut b = bench_problem(&prob, &small(), SolverVariant::CombinedPcg).unwrap();
        a.min_seconds = 1.0;
        b.min_seconds = 2.0;
        assert_eq!(timing_warnings(&[a.clone(), b.clone()], 8).len(), 1);
        assert!(timing_warnings(&[a.clone(), b.clone()], usize::MAX).is_empty());
        b.min_seconds = 0.5;
        assert!(timing_warnings(&[a, b], 8).is_empty());
    }

    #[test]
    fn transfer_model_blocks() {
        let cfg = RunConfig { bp: vec![BpId::Bp1, BpId::Bp2], variant: vec![SolverVariant::CombinedPcg], ..Default::default() };
        let csv = cmd_transfer_model(&cfg);
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("bp,variant,"));
        assert!(lines[1].starts_with("bp1,combined_pcg,4.5000,"));
        assert!(lines[2].starts_with("bp2,combined_pcg,3.8333,"));
    }
}
