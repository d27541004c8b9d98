//! Ideal transfer model per solver variant, range liveliness, and cache
//! sweeps over recorded traces.

use num_rational::Ratio;

use crate::dofs::RangeSchedule;
use crate::solvers::SolverVariant;
use crate::trace::{replay_cache, AccessEvent, CacheModel};

pub type Exact = Ratio<i64>;

fn r(n: i64, d: i64) -> Exact {
    Ratio::new(n, d)
}

/// Doubles per DoF per iteration moved between RAM and the core under
/// perfect caching within each vector-access region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransferPrediction {
    pub variant: SolverVariant,
    pub vector_reads: Exact,
    pub vector_writes: Exact,
    /// Operator source read plus destination read-for-ownership and write.
    pub matvec_reads: Exact,
    pub matvec_writes: Exact,
    /// Vector work and the operator share one sweep.
    pub fused: bool,
}

impl TransferPrediction {
    pub fn total_reads(&self) -> Exact {
        self.vector_reads + self.matvec_reads
    }

    pub fn total_writes(&self) -> Exact {
        self.vector_writes + self.matvec_writes
    }

    pub fn reads_per_dof(&self) -> f64 {
        to_f64(self.total_reads())
    }

    pub fn writes_per_dof(&self) -> f64 {
        to_f64(self.total_writes())
    }
}

pub fn to_f64(x: Exact) -> f64 {
    *x.numer() as f64 / *x.denom() as f64
}

/// One operator application: `(2, 1)`.
pub fn matvec_transfer() -> (Exact, Exact) {
    (r(2, 1), r(1, 1))
}

/// Transfer model for a vector-valued problem with three components.
pub fn predict_transfer(variant: SolverVariant) -> TransferPrediction {
    predict_transfer_for(variant, 3)
}

/// Transfer model where the merged PCG's shared diagonal costs
/// `1/components` doubles per DoF. Standard PCG streams a full-length
/// diagonal.
pub fn predict_transfer_for(variant: SolverVariant, components: usize) -> TransferPrediction {
    let (mr, mw) = matvec_transfer();
    let zero = r(0, 1);
    let c = components.max(1) as i64;
    let (vr, vw, fused) = match variant {
        SolverVariant::Cg => (r(9, 1), r(3, 1), false),
        SolverVariant::Pcg => (r(13, 1), r(4, 1), false),
        SolverVariant::Pipelined => (r(7, 1), r(6, 1), false),
        SolverVariant::SStep { s } => {
            let s = s.max(1) as i64;
            (r(5, 1) + r(4, s), r(1, 1) + r(2, s), false)
        }
        SolverVariant::CombinedCg => (r(7, 2), r(7, 2), true),
        SolverVariant::CombinedPcg => (r(7, 2) + r(1, c), r(7, 2), true),
    };
    let (matvec_reads, matvec_writes) = if fused { (zero, zero) } else { (mr, mw) };
    TransferPrediction { variant, vector_reads: vr, vector_writes: vw, matvec_reads, matvec_writes, fused }
}

/// `variant,vector_reads,vector_writes,matvec_reads,matvec_writes,total_reads,total_writes,fused`.
pub fn transfer_table_csv(rows: &[TransferPrediction]) -> String {
    let mut s = String::from("variant,vector_reads,vector_writes,matvec_reads,matvec_writes,total_reads,total_writes,fused\n");
    for p in rows {
        s.push_str(&format!(
            "{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{}\n",
            p.variant,
            to_f64(p.vector_reads),
            to_f64(p.vector_writes),
            to_f64(p.matvec_reads),
            to_f64(p.matvec_writes),
            p.reads_per_dof(),
            p.writes_per_dof(),
            p.fused
        ));
    }
    s
}

/// Bytes of unique vector data one batch touches.
pub fn data_in_flight(p: usize, components: usize, batch_cells: usize) -> usize {
    batch_cells * components * p.pow(3) * 8
}

#[derive(Debug, Clone, PartialEq)]
pub struct LivelinessReport {
    /// Batches between first read and last write, per range.
    pub distances: Vec<usize>,
    /// `(distance, cumulative percent of ranges)` for `0..=max distance`.
    pub cdf: Vec<(usize, f64)>,
    pub same_batch_fraction: f64,
}

impl LivelinessReport {
    /// Cumulative percent at `d`, 100 beyond the largest distance.
    pub fn cdf_at(&self, d: usize) -> f64 {
        self.cdf.get(d).map_or(100.0, |x| x.1)
    }

    /// `distance,cumulative_percent`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("distance,cumulative_percent\n");
        for (d, pct) in &self.cdf {
            s.push_str(&format!("{d},{pct:.4}\n"));
        }
        s
    }

    /// True when `self` is at least `other` at every distance.
    pub fn dominates(&self, other: &LivelinessReport) -> bool {
        let max = self.cdf.len().max(other.cdf.len());
        (0..max).all(|d| self.cdf_at(d) + 1e-12 >= other.cdf_at(d))
    }
}

pub fn liveliness(schedule: &RangeSchedule) -> LivelinessReport {
    let distances: Vec<usize> = schedule.first_touch_batch.iter().zip(&schedule.last_touch_batch).map(|(f, l)| l - f).collect();
    let n = distances.len().max(1) as f64;
    let max = distances.iter().copied().max().unwrap_or(0);
    let mut hist = vec![0usize; max + 1];
    distances.iter().for_each(|&d| hist[d] += 1);
    let mut acc = 0;
    let cdf = hist
        .iter()
        .enumerate()
        .map(|(d, &h)| {
            acc += h;
            let pct = if acc == distances.len() { 100.0 } else { 100.0 * acc as f64 / n };
            (d, pct)
        })
        .collect();
    let same = hist[0] as f64 / n;
    LivelinessReport { distances, cdf, same_batch_fraction: if schedule.n_ranges() == 0 { 1.0 } else { same } }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CacheSweepRow {
    pub capacity_bytes: usize,
    pub loads_per_dof: f64,
    pub stores_per_dof: f64,
}

/// Replays the same trace through LRU caches of each capacity.
pub fn cache_sweep(
    events: &[AccessEvent],
    n_dofs: usize,
    iterations: usize,
    capacities: &[usize],
    line_bytes: usize,
) -> Vec<CacheSweepRow> {
    capacities
        .iter()
        .map(|&cap| {
            let mut model = CacheModel::new(cap, line_bytes);
            let rep = replay_cache(events, &mut model, n_dofs, iterations);
            CacheSweepRow { capacity_bytes: cap, loads_per_dof: rep.ram_loads_per_dof, stores_per_dof: rep.ram_stores_per_dof }
        })
        .collect()
}

/// Powers of two from `lo` to `hi` inclusive.
pub fn capacity_ladder(lo: usize, hi: usize) -> Vec<usize> {
    let mut v = Vec::new();
    let mut c = lo.max(1);
    while c <= hi {
        v.push(c);
        c *= 2;
    }
    v
}

/// `capacity_bytes,loads_per_dof,stores_per_dof`.
pub fn cache_sweep_csv(rows: &[CacheSweepRow]) -> String {
    let mut s = String::from("capacity_bytes,loads_per_dof,stores_per_dof\n");
    for row in rows {
        s.push_str(&format!("{},{:.6},{:.6}\n", row.capacity_bytes, row.loads_per_dof, row.stores_per_dof));
    }
    s
}
