//! Self-checks run by `mfcg verify`, each solving to tolerance.

use mfcg::dofs::{check_schedule_soundness, compute_range_schedule, distribute_dofs_in_order, make_batches, renumber_optimized};
use mfcg::locality::liveliness;
use mfcg::mesh::{build_cartesian_mesh, deform_mesh};
use mfcg::operator::{assemble_sparse, CsrMatrix, LinearOperator, MatrixFreeOperator};
use mfcg::{build_problem, BpId, GeometryVariant, NumberingKind, Problem, ProblemConfig, SolverConfig, SolverVariant, Traversal};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;

pub const SUITES: [&str; 4] = ["oracle", "scalar-trace", "schedule", "recurrence"];

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteOutcome {
    pub name: &'static str,
    /// `Ok(summary)` or `Err(first failing property)`.
    pub result: Result<String, String>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct VerifyOptions<'a> {
    pub filter: Option<&'a str>,
    /// Negates every cell integral of the matrix-free operators under test.
    pub inject_sign_flip: bool,
}

pub fn run_suites(cfg: &RunConfig, opts: VerifyOptions<'_>) -> Vec<SuiteOutcome> {
    SUITES
        .iter()
        .filter(|s| opts.filter.is_none_or(|f| s.contains(f)))
        .map(|&name| {
            let result = match name {
                "oracle" => oracle(cfg, opts.inject_sign_flip),
                "scalar-trace" => scalar_trace(cfg, opts.inject_sign_flip),
                "schedule" => schedule(cfg),
                _ => recurrence(cfg, opts.inject_sign_flip),
            };
            SuiteOutcome { name, result }
        })
        .collect()
}

type Check = Result<String, String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn residual(a: &dyn LinearOperator, b: &[f64], x: &[f64]) -> Result<f64, String> {
    let mut ax = vec![0.0; x.len()];
    a.apply(x, &mut ax).map_err(err)?;
    Ok(b.iter().zip(&ax).map(|(b, a)| (b - a).powi(2)).sum::<f64>().sqrt())
}

fn small_problem(cfg: &RunConfig, bp: BpId, degree: usize, cells: usize, flip: bool) -> Result<Problem, String> {
    let pc = ProblemConfig { bp, degree, cells: [cells; 3], traversal: cfg.traversal, simd_lanes: cfg.simd_lanes, ..Default::default() };
    let prob = build_problem(&pc).map_err(err)?;
    prob.operator.inject_sign_flip(flip);
    Ok(prob)
}

fn random_rhs(prob: &Problem, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let h = prob.operator.handler();
    (0..prob.n_dofs()).map(|i| if h.is_constrained(i) { 0.0 } else { rng.gen_range(-1.0..1.0) }).collect()
}

/// Matrix-free products against element-by-element sparse assembly, then
/// every solver variant to tolerance with the residual measured in the
/// assembled matrix.
fn oracle(cfg: &RunConfig, flip: bool) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cases = 0;
    let mut worst = 0.0f64;
    for cells in [[2, 2, 2], [3, 2, 1]] {
        let flat = build_cartesian_mesh(cells, [1.0; 3]).map_err(err)?;
        let curved = deform_mesh(&flat, 0.05).map_err(err)?;
        for (k, bp) in BpId::ALL.into_iter().enumerate() {
            for degree in 1..=3 {
                let geometry = GeometryVariant::ALL[(k + degree) % 5];
                let mesh = if geometry == GeometryVariant::Affine { &flat } else { &curved };
                let spec = bp.spec(degree, geometry);
                let plan = make_batches(mesh, 1 + rng.gen_range(0..3), cfg.traversal).map_err(err)?;
                let mut h =
                    distribute_dofs_in_order(mesh, degree, spec.components, &plan.cell_order()).map_err(err)?.with_boundary_constraints();
                if degree % 2 == 0 {
                    h = renumber_optimized(&h, &plan).map_err(err)?;
                }
                let csr = assemble_sparse(&spec, mesh, &h).map_err(err)?;
                let op = MatrixFreeOperator::new(spec, mesh, h, plan).map_err(err)?;
                op.inject_sign_flip(flip);
                let x: Vec<f64> = (0..op.n()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let (mut y, mut z) = (vec![0.0; op.n()], vec![0.0; op.n()]);
                op.apply(&x, &mut y).map_err(err)?;
                csr.apply(&x, &mut z).map_err(err)?;
                let rel = max_diff(&y, &z) / z.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                if !(rel <= 1e-12) {
                    return Err(format!("{bp} p={degree} {geometry} on {cells:?}: matrix-free vs assembled rel err {rel:.2e}"));
                }
                worst = worst.max(rel);
                cases += 1;
            }
        }
    }
    for (bp, degree, cells) in [(BpId::Bp3, 3, 3), (BpId::Bp4, 2, 2), (BpId::Bp5, 4, 2)] {
        let prob = small_problem(cfg, bp, degree, cells, flip)?;
        let h = prob.operator.handler();
        let csr: CsrMatrix = assemble_sparse(prob.operator.spec(), &prob.mesh, h).map_err(err)?;
        let tol = 1e-10 * norm(&prob.rhs);
        let mut reference: Option<Vec<f64>> = None;
        for v in SolverVariant::all(3) {
            let res = mfcg::solve(&prob.operator, &prob.rhs, Some(&prob.preconditioner), &SolverConfig::new(v, tol, 2000))
                .map_err(|e| format!("{bp} {v}: {e}"))?;
            if !res.converged {
                return Err(format!("{bp} {v}: not converged after {} iterations", res.iterations));
            }
            let r = residual(&csr, &prob.rhs, &res.solution)?;
            if !(r <= 1e-8 * norm(&prob.rhs)) {
                return Err(format!("{bp} {v}: assembled residual {r:.2e}"));
            }
            match &reference {
                None => reference = Some(res.solution),
                Some(x0) => {
                    let d = max_diff(x0, &res.solution) / x0.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                    if !(d <= 1e-7) {
                        return Err(format!("{bp} {v}: solution differs from cg by {d:.2e}"));
                    }
                }
            }
        }
    }
    Ok(format!("{cases} operator cases (max rel err {worst:.1e}); 18 solves agree"))
}

/// alpha and beta of each merged variant against its textbook counterpart.
fn scalar_trace(cfg: &RunConfig, flip: bool) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut worst = 0.0f64;
    for (bp, degree, cells) in [(BpId::Bp3, 3, 3), (BpId::Bp4, 2, 2), (BpId::Bp5, 3, 3)] {
        let prob = small_problem(cfg, bp, degree, cells, flip)?;
        let rhs = random_rhs(&prob, &mut rng);
        for (plain, merged) in [(SolverVariant::Cg, SolverVariant::CombinedCg), (SolverVariant::Pcg, SolverVariant::CombinedPcg)] {
            let run = |v| {
                mfcg::solve(&prob.operator, &rhs, Some(&prob.preconditioner), &SolverConfig::new(v, 1e-30, 8))
                    .map_err(|e| format!("{bp} {v}: {e}"))
            };
            let (a, b) = (run(plain)?, run(merged)?);
            if a.history.len() < 8 || b.history.len() < 8 {
                return Err(format!("{bp} {merged}: fewer than 8 iterations"));
            }
            for k in 0..8 {
                let (x, y) = (&a.history[k], &b.history[k]);
                for (name, p, q) in [("alpha", x.alpha, y.alpha), ("beta", x.beta, y.beta)] {
                    let rel = (p - q).abs() / p.abs();
                    if !(rel <= 1e-8) {
                        return Err(format!("{bp} {merged} iteration {k}: {name} {q:e} vs {plain} {p:e}"));
                    }
                    worst = worst.max(rel);
                }
            }
        }
    }
    Ok(format!("3 problems x 2 pairs x 8 iterations, max rel diff {worst:.1e}"))
}

/// Every entry read after its pre and written before its post, on assorted
/// meshes, batch sizes, traversals and numberings.
fn schedule(cfg: &RunConfig) -> Check {
    let mut cases = 0;
    for cells in [[1, 1, 1], [3, 2, 2], [4, 4, 4], [5, 3, 2]] {
        let mesh = build_cartesian_mesh(cells, [1.0; 3]).map_err(err)?;
        for traversal in [Traversal::Lexicographic, Traversal::Morton] {
            for bs in [1, 3, cfg.simd_lanes.max(1)] {
                let plan = make_batches(&mesh, bs, traversal).map_err(err)?;
                for p in 1..=4 {
                    for c in [1, 3] {
                        for constrained in [false, true] {
                            let mut h = distribute_dofs_in_order(&mesh, p, c, &plan.cell_order()).map_err(err)?;
                            if constrained {
                                h = h.with_boundary_constraints();
                            }
                            for numbering in [NumberingKind::Default, NumberingKind::Optimized] {
                                let h = if numbering == NumberingKind::Optimized {
                                    renumber_optimized(&h, &plan).map_err(err)?
                                } else {
                                    h.clone()
                                };
                                let s = compute_range_schedule(&h, &plan).map_err(err)?;
                                check_schedule_soundness(&h, &plan, &s)
                                    .map_err(|e| format!("{cells:?} {traversal} bs={bs} p={p} c={c} {numbering}: {e}"))?;
                                let cdf = liveliness(&s).cdf;
                                if cdf.last().map(|x| x.1) != Some(100.0) || cdf.windows(2).any(|w| w[1].1 < w[0].1) {
                                    return Err(format!("{cells:?} {traversal} bs={bs} p={p}: malformed liveliness CDF"));
                                }
                                cases += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(format!("{cases} schedules sound"))
}

/// The merged variants' recurrence for |r|^2 against the explicit sum of
/// the next iteration.
fn recurrence(cfg: &RunConfig, flip: bool) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let prob = small_problem(cfg, BpId::Bp3, 3, 3, flip)?;
    let rhs = random_rhs(&prob, &mut rng);
    let mut worst = 0.0f64;
    for v in [SolverVariant::CombinedCg, SolverVariant::CombinedPcg] {
        let res = mfcg::solve(&prob.operator, &rhs, Some(&prob.preconditioner), &SolverConfig::new(v, 1e-30, 16))
            .map_err(|e| format!("{v}: {e}"))?;
        if res.history.len() < 16 {
            return Err(format!("{v}: only {} iterations", res.history.len()));
        }
        let gamma0 = res.history[0].reductions.map_or(0.0, |r| r[0]);
        for k in 1..16 {
            let recurrence = res.history[k - 1].residual_norm.powi(2);
            let explicit = res.history[k].reductions.map_or(f64::NAN, |r| r[0]);
            let dev = (recurrence - explicit).abs() / gamma0;
            if !(dev <= 1e-6) {
                return Err(format!("{v} iteration {k}: recurrence off by {dev:.2e} of the initial |r|^2"));
            }
            worst = worst.max(dev);
        }
    }
    Ok(format!("15 iterations per variant, max deviation {worst:.1e}"))
}
