//! Matrix-free finite-element operators and conjugate gradient solvers on
//! structured hexahedral meshes, with data-transfer accounting.
//!
//! ```
//! use mfcg::bp::{build_problem, BpId, ProblemConfig};
//! use mfcg::solvers::{solve, SolverConfig, SolverVariant};
//!
//! let prob = build_problem(&ProblemConfig { bp: BpId::Bp3, degree: 2, cells: [2, 2, 2], ..Default::default() }).unwrap();
//! let cfg = SolverConfig::new(SolverVariant::CombinedPcg, 1e-10, 200);
//! let res = solve(&prob.operator, &prob.rhs, Some(&prob.preconditioner), &cfg).unwrap();
//! assert!(res.converged);
//! ```

pub mod bp;
pub mod dofs;
pub mod error;
pub mod locality;
pub mod mesh;
pub mod operator;
pub mod solvers;
pub mod tensor;
pub mod trace;

pub use bp::{build_problem, BpId, Problem, ProblemConfig};
pub use dofs::{BatchPlan, DofHandler, NumberingKind, RangeSchedule, Traversal};
pub use error::{Error, Result};
pub use locality::{predict_transfer, LivelinessReport, TransferPrediction};
pub use mesh::{GeometryVariant, HexMesh};
pub use operator::{DiagonalPreconditioner, Equation, FusedOperator, LinearOperator, MatrixFreeOperator, OperatorSpec};
pub use solvers::{solve, SolveResult, SolverConfig, SolverError, SolverVariant};
pub use trace::{CacheModel, TraceRecorder};
