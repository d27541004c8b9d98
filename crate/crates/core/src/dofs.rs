//! Continuous-element DoF numbering with compressed per-cell index storage,
//! cell batching, the category renumbering, and the range pre/post schedule.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use crate::error::{invalid, Error, Result};
use crate::mesh::HexMesh;

/// Vector entries are tracked in ranges of this many entries.
pub const RANGE_SIZE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NumberingKind {
    /// Entities numbered as first met while walking the cells.
    Default,
    /// Category ordering derived from the batch plan.
    Optimized,
}

impl NumberingKind {
    pub fn name(self) -> &'static str {
        match self {
            NumberingKind::Default => "default",
            NumberingKind::Optimized => "optimized",
        }
    }
}

impl fmt::Display for NumberingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NumberingKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(NumberingKind::Default),
            "optimized" => Ok(NumberingKind::Optimized),
            _ => Err(invalid(format!("unknown numbering '{s}'"))),
        }
    }
}

/// Numbering of a structured mesh. Unknowns live on the entities (vertices,
/// edges, faces, cell interiors) of a `(2N+1)^3` entity lattice; the nodes of
/// one entity form a contiguous block, components interleaved per node, so
/// each cell only stores the 27 block starts of its entities.
#[derive(Debug, Clone, PartialEq)]
pub struct DofHandler {
    pub n_dofs: usize,
    pub components: usize,
    pub degree: usize,
    pub cells_per_dim: [usize; 3],
    /// Block start of each of the 27 entities of a cell, lexicographic.
    pub cell_index_blocks: Vec<[u32; 27]>,
    /// Sorted.
    pub constrained_dofs: Vec<usize>,
    pub numbering_kind: NumberingKind,
    entity_starts: Vec<u32>,
    constrained_mask: Vec<bool>,
    /// Per local node (lexicographic in `(p+1)^3`): entity slot and offset
    /// of the node's first component inside the block.
    local_table: Vec<(u8, u32)>,
}

fn lattice_dims(cells: [usize; 3]) -> [usize; 3] {
    cells.map(|n| 2 * n + 1)
}

fn entity_coords(id: usize, dims: [usize; 3]) -> [usize; 3] {
    [id % dims[0], (id / dims[0]) % dims[1], id / (dims[0] * dims[1])]
}

fn entity_nodes(e: [usize; 3], p: usize) -> usize {
    e.iter().map(|&x| if x % 2 == 1 { p - 1 } else { 1 }).product()
}

fn cell_entity(cells: [usize; 3], cell: usize, slot: usize) -> usize {
    let dims = lattice_dims(cells);
    let c = [cell % cells[0], (cell / cells[0]) % cells[1], cell / (cells[0] * cells[1])];
    let s = [slot % 3, (slot / 3) % 3, slot / 9];
    let e = [0, 1, 2].map(|d| 2 * c[d] + s[d]);
    e[0] + dims[0] * (e[1] + dims[1] * e[2])
}

/// Entity slots of a cell ordered vertices, edges, faces, interior.
fn slots_by_dimension() -> [usize; 27] {
    let mut slots: Vec<usize> = (0..27).collect();
    slots.sort_by_key(|&s| ([s % 3, (s / 3) % 3, s / 9].iter().filter(|&&x| x == 1).count(), s));
    slots.try_into().unwrap()
}

fn build_local_table(p: usize, components: usize) -> Vec<(u8, u32)> {
    let n = p + 1;
    let mut table = Vec::with_capacity(n * n * n);
    for lz in 0..n {
        for ly in 0..n {
            for lx in 0..n {
                let mut slot = 0;
                let mut pos = 0;
                let mut stride = 1;
                for (d, l) in [lx, ly, lz].into_iter().enumerate() {
                    let s = if l == 0 {
                        0
                    } else if l == p {
                        2
                    } else {
                        1
                    };
                    slot += s * [1, 3, 9][d];
                    if s == 1 {
                        pos += (l - 1) * stride;
                        stride *= p - 1;
                    }
                }
                table.push((slot as u8, (pos * components) as u32));
            }
        }
    }
    table
}

/// Numbering in lexicographic cell order.
pub fn distribute_dofs(mesh: &HexMesh, p: usize, components: usize) -> Result<DofHandler> {
    let order: Vec<usize> = (0..mesh.n_cells()).collect();
    distribute_dofs_in_order(mesh, p, components, &order)
}

/// Numbering that visits cells in `cell_order`, assigning each entity's block
/// when first met (vertices, then edges, faces, interior within a cell).
pub fn distribute_dofs_in_order(mesh: &HexMesh, p: usize, components: usize, cell_order: &[usize]) -> Result<DofHandler> {
    if p == 0 {
        return Err(invalid("polynomial degree must be at least 1"));
    }
    if components != 1 && components != 3 {
        return Err(invalid(format!("components must be 1 or 3, got {components}")));
    }
    let cells = mesh.cells_per_dim;
    let n_cells = mesh.n_cells();
    let mut seen = vec![false; n_cells];
    if cell_order.len() != n_cells || cell_order.iter().any(|&c| c >= n_cells || std::mem::replace(&mut seen[c], true)) {
        return Err(invalid("cell order must be a permutation of the cells"));
    }
    let dims = lattice_dims(cells);
    let n_dofs = cells.iter().map(|&n| n * p + 1).product::<usize>() * components;
    if n_dofs > u32::MAX as usize {
        return Err(Error::SizeTooLarge { what: "dof count", size: n_dofs, limit: u32::MAX as usize });
    }
    let n_entities: usize = dims.iter().product();
    let mut entity_starts = vec![u32::MAX; n_entities];
    let mut next = 0usize;
    let slots = slots_by_dimension();
    for &cell in cell_order {
        for &slot in &slots {
            let e = cell_entity(cells, cell, slot);
            if entity_starts[e] == u32::MAX {
                entity_starts[e] = next as u32;
                next += entity_nodes(entity_coords(e, dims), p) * components;
            }
        }
    }
    debug_assert_eq!(next, n_dofs);
    Ok(DofHandler::from_entity_starts(cells, p, components, entity_starts, Vec::new(), NumberingKind::Default))
}

impl DofHandler {
    fn from_entity_starts(
        cells: [usize; 3],
        p: usize,
        components: usize,
        entity_starts: Vec<u32>,
        constrained_entities: Vec<usize>,
        numbering_kind: NumberingKind,
    ) -> Self {
        let dims = lattice_dims(cells);
        let n_cells: usize = cells.iter().product();
        let n_dofs = cells.iter().map(|&n| n * p + 1).product::<usize>() * components;
        let cell_index_blocks =
            (0..n_cells).map(|cell| std::array::from_fn(|slot| entity_starts[cell_entity(cells, cell, slot)])).collect();
        let mut constrained_mask = vec![false; n_dofs];
        for e in constrained_entities {
            let start = entity_starts[e] as usize;
            let len = entity_nodes(entity_coords(e, dims), p) * components;
            constrained_mask[start..start + len].iter_mut().for_each(|m| *m = true);
        }
        let constrained_dofs = (0..n_dofs).filter(|&i| constrained_mask[i]).collect();
        DofHandler {
            n_dofs,
            components,
            degree: p,
            cells_per_dim: cells,
            cell_index_blocks,
            constrained_dofs,
            numbering_kind,
            entity_starts,
            constrained_mask,
            local_table: build_local_table(p, components),
        }
    }

    fn boundary_entities(&self) -> Vec<usize> {
        let dims = lattice_dims(self.cells_per_dim);
        (0..self.entity_starts.len())
            .filter(|&e| {
                let c = entity_coords(e, dims);
                (0..3).any(|d| c[d] == 0 || c[d] == dims[d] - 1)
            })
            .collect()
    }

    fn constrained_entities(&self) -> Vec<usize> {
        (0..self.entity_starts.len())
            .filter(|&e| self.constrained_mask.get(self.entity_starts[e] as usize).copied().unwrap_or(false))
            .collect()
    }

    /// Same numbering with homogeneous Dirichlet constraints on every DoF of
    /// the domain boundary.
    pub fn with_boundary_constraints(self) -> Self {
        let ent = self.boundary_entities();
        DofHandler::from_entity_starts(self.cells_per_dim, self.degree, self.components, self.entity_starts, ent, self.numbering_kind)
    }

    pub fn n_cells(&self) -> usize {
        self.cell_index_blocks.len()
    }

    pub fn dofs_per_cell(&self) -> usize {
        self.local_table.len() * self.components
    }

    pub fn n_ranges(&self) -> usize {
        self.n_dofs.div_ceil(RANGE_SIZE)
    }

    pub fn is_constrained(&self, i: usize) -> bool {
        self.constrained_mask[i]
    }

    pub fn constrained_mask(&self) -> &[bool] {
        &self.constrained_mask
    }

    /// Local node table used by the cell loop: `(entity slot, offset)`.
    pub(crate) fn local_table(&self) -> &[(u8, u32)] {
        &self.local_table
    }

    /// Global indices of a cell, component-major then lexicographic nodes.
    pub fn expand_cell_indices(&self, cell: usize) -> Result<Vec<usize>> {
        let blocks = self.cell_index_blocks.get(cell).ok_or(Error::OutOfRange { index: cell, len: self.n_cells() })?;
        let mut out = Vec::with_capacity(self.dofs_per_cell());
        for comp in 0..self.components {
            out.extend(self.local_table.iter().map(|&(s, off)| blocks[s as usize] as usize + off as usize + comp));
        }
        Ok(out)
    }

    /// Scalar (component-free) DoF handler sharing this handler's node layout.
    /// Index `i` of this handler maps to node `i / components` of the result.
    pub fn scalar_node_count(&self) -> usize {
        self.n_dofs / self.components
    }
}

/// `perm[i]` is the index in `to` of DoF `i` in `from`.
pub fn dof_permutation(from: &DofHandler, to: &DofHandler) -> Result<Vec<usize>> {
    if from.cells_per_dim != to.cells_per_dim || from.degree != to.degree || from.components != to.components {
        return Err(invalid("handlers describe different discretizations"));
    }
    let dims = lattice_dims(from.cells_per_dim);
    let mut perm = vec![0; from.n_dofs];
    for (e, (&a, &b)) in from.entity_starts.iter().zip(&to.entity_starts).enumerate() {
        let len = entity_nodes(entity_coords(e, dims), from.degree) * from.components;
        for k in 0..len {
            perm[a as usize + k] = b as usize + k;
        }
    }
    Ok(perm)
}

/// `n_batch = max(floor(1024 / (c (p+1)^3)), 2) * lanes`.
pub fn batch_size(p: usize, components: usize, simd_lanes: usize) -> Result<usize> {
    if p == 0 || components == 0 || simd_lanes == 0 {
        return Err(invalid("batch size inputs must be positive"));
    }
    Ok((1024 / (components * (p + 1).pow(3))).max(2) * simd_lanes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Traversal {
    Lexicographic,
    Morton,
}

impl Traversal {
    pub fn name(self) -> &'static str {
        match self {
            Traversal::Lexicographic => "lexicographic",
            Traversal::Morton => "morton",
        }
    }
}

impl fmt::Display for Traversal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Traversal {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lexicographic" => Ok(Traversal::Lexicographic),
            "morton" => Ok(Traversal::Morton),
            _ => Err(invalid(format!("unknown traversal '{s}'"))),
        }
    }
}

/// Cells grouped into batches processed between range callbacks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub batches: Vec<Vec<usize>>,
    pub traversal: Traversal,
}

impl BatchPlan {
    pub fn n_batches(&self) -> usize {
        self.batches.len()
    }

    pub fn cell_order(&self) -> Vec<usize> {
        self.batches.concat()
    }

    /// Batch index of every cell.
    pub fn batch_of_cell(&self) -> Vec<usize> {
        let n = self.batches.iter().map(Vec::len).sum();
        let mut out = vec![0; n];
        for (b, cells) in self.batches.iter().enumerate() {
            for &c in cells {
                out[c] = b;
            }
        }
        out
    }
}

fn morton_code(c: [usize; 3]) -> u64 {
    let mut code = 0u64;
    for bit in 0..21 {
        for (d, &v) in c.iter().enumerate() {
            code |= (((v >> bit) & 1) as u64) << (3 * bit + d);
        }
    }
    code
}

/// Cells in traversal order, split into chunks of `batch_size`.
pub fn make_batches(mesh: &HexMesh, batch_size: usize, traversal: Traversal) -> Result<BatchPlan> {
    if batch_size == 0 {
        return Err(invalid("batch size must be positive"));
    }
    let mut order: Vec<usize> = (0..mesh.n_cells()).collect();
    if traversal == Traversal::Morton {
        order.sort_by_key(|&c| morton_code(mesh.cell_coords(c)));
    }
    Ok(BatchPlan { batch_size, batches: order.chunks(batch_size).map(<[usize]>::to_vec).collect(), traversal })
}

/// Locality category of an entity in the optimized numbering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DofCategory {
    SingleBatch,
    MultiBatch,
    RemoteShared,
    Constrained,
}

/// Renumbers entity blocks by category, then by touching batches (single
/// batch ascending, multi batch descending by first and last batch), then
/// by old index.
pub fn renumber_optimized(handler: &DofHandler, plan: &BatchPlan) -> Result<DofHandler> {
    if plan.batches.iter().map(Vec::len).sum::<usize>() != handler.n_cells() {
        return Err(invalid("batch plan does not match the handler's cells"));
    }
    let cells = handler.cells_per_dim;
    let n_entities = handler.entity_starts.len();
    let mut first = vec![usize::MAX; n_entities];
    let mut last = vec![0usize; n_entities];
    for (b, batch) in plan.batches.iter().enumerate() {
        for &cell in batch {
            for slot in 0..27 {
                let e = cell_entity(cells, cell, slot);
                first[e] = first[e].min(b);
                last[e] = last[e].max(b);
            }
        }
    }
    let constrained = handler.constrained_entities();
    let mut is_constrained = vec![false; n_entities];
    constrained.iter().for_each(|&e| is_constrained[e] = true);
    let category = |e: usize| {
        if is_constrained[e] {
            DofCategory::Constrained
        } else if first[e] == last[e] {
            DofCategory::SingleBatch
        } else {
            DofCategory::MultiBatch
        }
    };
    let mut order: Vec<usize> = (0..n_entities).collect();
    // multi-batch blocks run backwards so both category seams join
    // neighbouring batches
    let nb = plan.batches.len();
    order.sort_by_key(|&e| {
        let c = category(e);
        if c == DofCategory::MultiBatch {
            (c, nb - first[e], nb - last[e], handler.entity_starts[e])
        } else {
            (c, first[e], 0, handler.entity_starts[e])
        }
    });
    let dims = lattice_dims(cells);
    let mut starts = vec![0u32; n_entities];
    let mut next = 0usize;
    for e in order {
        starts[e] = next as u32;
        next += entity_nodes(entity_coords(e, dims), handler.degree) * handler.components;
    }
    Ok(DofHandler::from_entity_starts(cells, handler.degree, handler.components, starts, constrained, NumberingKind::Optimized))
}

/// Category of every DoF under `plan` (by batch touch sets).
pub fn dof_categories(handler: &DofHandler, plan: &BatchPlan) -> Vec<DofCategory> {
    let mut first = vec![usize::MAX; handler.n_dofs];
    let mut last = vec![0; handler.n_dofs];
    for (b, batch) in plan.batches.iter().enumerate() {
        for &cell in batch {
            for i in handler.expand_cell_indices(cell).unwrap() {
                first[i] = first[i].min(b);
                last[i] = last[i].max(b);
            }
        }
    }
    (0..handler.n_dofs)
        .map(|i| {
            if handler.is_constrained(i) {
                DofCategory::Constrained
            } else if first[i] == last[i] {
                DofCategory::SingleBatch
            } else {
                DofCategory::MultiBatch
            }
        })
        .collect()
}

/// When each 64-entry range is prepared (`pre`) and completed (`post`)
/// within one cell loop.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RangeSchedule {
    pub range_size: usize,
    pub n_dofs: usize,
    pub n_batches: usize,
    /// First batch reading the range; ranges holding only constrained
    /// entries are untouched by cells and report the final batch.
    pub first_touch_batch: Vec<usize>,
    /// Last batch writing the range (final batch for untouched ranges).
    pub last_touch_batch: Vec<usize>,
    pub pre_schedule: Vec<Vec<usize>>,
    pub post_schedule: Vec<Vec<usize>>,
}

impl RangeSchedule {
    pub fn n_ranges(&self) -> usize {
        self.first_touch_batch.len()
    }

    pub fn range(&self, r: usize) -> Range<usize> {
        r * self.range_size..((r + 1) * self.range_size).min(self.n_dofs)
    }

    /// `(range, first, last)` rows, one per range.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("range_index,first_batch,last_batch\n");
        for r in 0..self.n_ranges() {
            s.push_str(&format!("{r},{},{}\n", self.first_touch_batch[r], self.last_touch_batch[r]));
        }
        s
    }
}

/// Pre fires at the first reading batch, post at the last writing batch.
/// Constrained entries are neither read nor written by cells.
pub fn compute_range_schedule(handler: &DofHandler, plan: &BatchPlan) -> Result<RangeSchedule> {
    if plan.batches.iter().map(Vec::len).sum::<usize>() != handler.n_cells() {
        return Err(invalid("batch plan does not match the handler's cells"));
    }
    let n_ranges = handler.n_ranges();
    let n_batches = plan.n_batches().max(1);
    let final_batch = n_batches - 1;
    let mut first = vec![usize::MAX; n_ranges];
    let mut last = vec![usize::MAX; n_ranges];
    for (b, batch) in plan.batches.iter().enumerate() {
        for &cell in batch {
            for i in handler.expand_cell_indices(cell)? {
                if handler.is_constrained(i) {
                    continue;
                }
                let r = i / RANGE_SIZE;
                if first[r] == usize::MAX {
                    first[r] = b;
                }
                last[r] = b;
            }
        }
    }
    for r in 0..n_ranges {
        if first[r] == usize::MAX {
            first[r] = final_batch;
            last[r] = final_batch;
        }
    }
    let mut pre_schedule = vec![Vec::new(); n_batches];
    let mut post_schedule = vec![Vec::new(); n_batches];
    for r in 0..n_ranges {
        pre_schedule[first[r]].push(r);
        post_schedule[last[r]].push(r);
    }
    Ok(RangeSchedule {
        range_size: RANGE_SIZE,
        n_dofs: handler.n_dofs,
        n_batches,
        first_touch_batch: first,
        last_touch_batch: last,
        pre_schedule,
        post_schedule,
    })
}

/// Replays the cell loop and checks that every cell access happens after
/// its range's pre and before its post, and that every range is scheduled
/// exactly once in each list.
pub fn check_schedule_soundness(handler: &DofHandler, plan: &BatchPlan, schedule: &RangeSchedule) -> std::result::Result<(), String> {
    let n_ranges = handler.n_ranges();
    if schedule.n_ranges() != n_ranges || schedule.n_dofs != handler.n_dofs {
        return Err(format!("schedule has {} ranges, handler needs {n_ranges}", schedule.n_ranges()));
    }
    for (name, sched) in [("pre", &schedule.pre_schedule), ("post", &schedule.post_schedule)] {
        let mut count = vec![0; n_ranges];
        sched.iter().flatten().for_each(|&r| count[r] += 1);
        if let Some(r) = count.iter().position(|&c| c != 1) {
            return Err(format!("range {r} appears {} times in the {name} schedule", count[r]));
        }
    }
    let mut pre_fired = vec![false; n_ranges];
    let mut post_fired = vec![false; n_ranges];
    for b in 0..schedule.n_batches {
        for &r in &schedule.pre_schedule[b] {
            pre_fired[r] = true;
        }
        for &cell in plan.batches.get(b).map(Vec::as_slice).unwrap_or(&[]) {
            for i in handler.expand_cell_indices(cell).map_err(|e| e.to_string())? {
                if handler.is_constrained(i) {
                    continue;
                }
                let r = i / RANGE_SIZE;
                if !pre_fired[r] {
                    return Err(format!("cell {cell} in batch {b} reads entry {i} before pre of range {r}"));
                }
                if post_fired[r] {
                    return Err(format!("cell {cell} in batch {b} writes entry {i} after post of range {r}"));
                }
            }
        }
        for &r in &schedule.post_schedule[b] {
            if !pre_fired[r] {
                return Err(format!("post of range {r} fires before its pre"));
            }
            post_fired[r] = true;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_cartesian_mesh;
    use std::collections::BTreeSet;

    fn mesh(n: [usize; 3]) -> HexMesh {
        build_cartesian_mesh(n, [1.0; 3]).unwrap()
    }

    #[test]
    fn dof_counts() {
        assert_eq!(distribute_dofs(&mesh([1, 1, 1]), 1, 1).unwrap().n_dofs, 8);
        assert_eq!(distribute_dofs(&mesh([2, 1, 1]), 1, 1).unwrap().n_dofs, 12);
        assert_eq!(distribute_dofs(&mesh([2, 2, 2]), 3, 1).unwrap().n_dofs, 343);
        assert_eq!(distribute_dofs(&mesh([2, 2, 2]), 3, 3).unwrap().n_dofs, 3 * 343);
        assert!(distribute_dofs(&mesh([1, 1, 1]), 0, 1).is_err());
        assert!(distribute_dofs(&mesh([1, 1, 1]), 1, 2).is_err());
    }

    #[test]
    fn shared_face_counts() {
        let h = distribute_dofs(&mesh([2, 1, 1]), 1, 1).unwrap();
        let a: BTreeSet<_> = h.expand_cell_indices(0).unwrap().into_iter().collect();
        let b: BTreeSet<_> = h.expand_cell_indices(1).unwrap().into_iter().collect();
        assert_eq!(a.intersection(&b).count(), 4);
    }

    #[test]
    fn expansion_is_injective_and_covering() {
        for (p, c) in [(1, 1), (2, 3), (3, 1), (4, 3)] {
            let h = distribute_dofs(&mesh([3, 2, 2]), p, c).unwrap();
            let mut used = vec![false; h.n_dofs];
            for cell in 0..h.n_cells() {
                let idx = h.expand_cell_indices(cell).unwrap();
                assert_eq!(idx.len(), c * (p + 1).pow(3));
                let set: BTreeSet<_> = idx.iter().copied().collect();
                assert_eq!(set.len(), idx.len());
                for i in idx {
                    used[i] = true;
                }
            }
            assert!(used.iter().all(|&u| u));
        }
        assert!(distribute_dofs(&mesh([1, 1, 1]), 1, 1).unwrap().expand_cell_indices(1).is_err());
    }

    #[test]
    fn interior_dofs_are_contiguous() {
        let h = distribute_dofs(&mesh([1, 1, 1]), 4, 1).unwrap();
        let idx = h.expand_cell_indices(0).unwrap();
        let n = 5;
        let mut interior = Vec::new();
        for k in 1..4 {
            for j in 1..4 {
                for i in 1..4 {
                    interior.push(idx[i + n * (j + n * k)]);
                }
            }
        }
        for w in interior.windows(2) {
            assert_eq!(w[1], w[0] + 1);
        }
    }

    #[test]
    fn shared_face_indices_match() {
        let h = distribute_dofs(&mesh([2, 1, 1]), 3, 1).unwrap();
        let a = h.expand_cell_indices(0).unwrap();
        let b = h.expand_cell_indices(1).unwrap();
        let n = 4;
        for k in 0..n {
            for j in 0..n {
                assert_eq!(a[3 + n * (j + n * k)], b[n * (j + n * k)]);
            }
        }
    }

    #[test]
    fn vertex_positions_for_linear_elements() {
        // p = 1 expansion lists exactly the cell's vertex unknowns; with one
        // cell every vertex is its own block.
        let h = distribute_dofs(&mesh([1, 1, 1]), 1, 3).unwrap();
        let idx = h.expand_cell_indices(0).unwrap();
        assert_eq!(idx.len(), 24);
        for v in 0..8 {
            assert_eq!(idx[v] + 1, idx[8 + v]);
            assert_eq!(idx[v] + 2, idx[16 + v]);
        }
    }

    #[test]
    fn batch_sizes() {
        assert_eq!(batch_size(5, 3, 8).unwrap(), 16);
        assert_eq!(batch_size(5, 1, 8).unwrap(), 32);
        assert_eq!(batch_size(1, 1, 1).unwrap(), 128);
        assert!(batch_size(0, 1, 1).is_err());
    }

    #[test]
    fn batching() {
        let p = make_batches(&mesh([2, 2, 2]), 16, Traversal::Lexicographic).unwrap();
        assert_eq!(p.batches.len(), 1);
        assert_eq!(p.batches[0].len(), 8);
        let p = make_batches(&mesh([4, 4, 3]), 16, Traversal::Lexicographic).unwrap();
        assert_eq!(p.batches.iter().map(Vec::len).collect::<Vec<_>>(), vec![16, 16, 16]);
        let m = mesh([2, 2, 2]);
        let p = make_batches(&m, 16, Traversal::Morton).unwrap();
        let coords: Vec<_> = p.batches[0].iter().map(|&c| m.cell_coords(c)).collect();
        assert_eq!(&coords[..5], &[[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0], [0, 0, 1]]);
        let m = mesh([3, 5, 2]);
        let p = make_batches(&m, 7, Traversal::Morton).unwrap();
        let mut all = p.cell_order();
        all.sort();
        assert_eq!(all, (0..30).collect::<Vec<_>>());
    }

    #[test]
    fn renumber_two_single_cell_batches() {
        let m = mesh([2, 1, 1]);
        let h = distribute_dofs(&m, 1, 1).unwrap();
        let plan = make_batches(&m, 1, Traversal::Lexicographic).unwrap();
        let o = renumber_optimized(&h, &plan).unwrap();
        let a: BTreeSet<_> = o.expand_cell_indices(0).unwrap().into_iter().collect();
        let b: BTreeSet<_> = o.expand_cell_indices(1).unwrap().into_iter().collect();
        let shared: BTreeSet<_> = a.intersection(&b).copied().collect();
        assert_eq!(shared, (8..12).collect());
        assert!(a.difference(&b).all(|&i| i < 4));
    }

    #[test]
    fn renumber_orders_categories() {
        let m = mesh([4, 4, 4]);
        let plan = make_batches(&m, 8, Traversal::Morton).unwrap();
        let h = distribute_dofs_in_order(&m, 3, 1, &plan.cell_order()).unwrap().with_boundary_constraints();
        let o = renumber_optimized(&h, &plan).unwrap();
        let perm = dof_permutation(&h, &o).unwrap();
        let mut sorted = perm.clone();
        sorted.sort();
        assert_eq!(sorted, (0..h.n_dofs).collect::<Vec<_>>());
        let cats = dof_categories(&o, &plan);
        assert!(cats.windows(2).all(|w| w[0] <= w[1]));
        assert!(!cats.contains(&DofCategory::RemoteShared));
        assert_eq!(o.constrained_dofs.len(), h.constrained_dofs.len());
        assert_eq!(o.constrained_dofs[0], o.n_dofs - o.constrained_dofs.len());
        for cell in 0..h.n_cells() {
            let a = h.expand_cell_indices(cell).unwrap();
            let b = o.expand_cell_indices(cell).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert_eq!(perm[*x], *y);
            }
        }
        // single batch: interior first, constrained last
        let plan = make_batches(&m, 64, Traversal::Lexicographic).unwrap();
        let o = renumber_optimized(&h, &plan).unwrap();
        let cats = dof_categories(&o, &plan);
        assert!(!cats.contains(&DofCategory::MultiBatch));
    }

    #[test]
    fn schedules() {
        let m = mesh([2, 2, 2]);
        let h = distribute_dofs(&m, 3, 1).unwrap();
        let plan = make_batches(&m, 8, Traversal::Lexicographic).unwrap();
        let s = compute_range_schedule(&h, &plan).unwrap();
        assert_eq!(s.n_ranges(), 343usize.div_ceil(64));
        assert!(s.first_touch_batch.iter().chain(&s.last_touch_batch).all(|&b| b == 0));
        assert_eq!(s.range(5), 320..343);

        let m = mesh([4, 2, 2]);
        let plan = make_batches(&m, 8, Traversal::Lexicographic).unwrap();
        let h = distribute_dofs(&m, 3, 1).unwrap().with_boundary_constraints();
        for h in [h.clone(), renumber_optimized(&h, &plan).unwrap()] {
            let s = compute_range_schedule(&h, &plan).unwrap();
            check_schedule_soundness(&h, &plan, &s).unwrap();
            // brute-force oracle
            for r in 0..s.n_ranges() {
                let mut batches = BTreeSet::new();
                for (b, cells) in plan.batches.iter().enumerate() {
                    for &c in cells {
                        if h.expand_cell_indices(c).unwrap().iter().any(|&i| i / 64 == r && !h.is_constrained(i)) {
                            batches.insert(b);
                        }
                    }
                }
                let (f, l) = match (batches.first(), batches.last()) {
                    (Some(&f), Some(&l)) => (f, l),
                    _ => (1, 1),
                };
                assert_eq!((s.first_touch_batch[r], s.last_touch_batch[r]), (f, l));
            }
            let mut bad = s.clone();
            let r = bad.post_schedule[0].first().copied();
            if let Some(r) = r {
                bad.post_schedule[0].retain(|&x| x != r);
                bad.post_schedule[1].push(r);
                bad.pre_schedule.iter_mut().for_each(|v| v.retain(|&x| x != r));
                bad.pre_schedule[1].push(r);
                assert!(check_schedule_soundness(&h, &plan, &bad).is_err());
            }
        }
    }

    #[test]
    fn category_one_ranges_live_in_one_batch() {
        let m = mesh([4, 4, 4]);
        let plan = make_batches(&m, 8, Traversal::Morton).unwrap();
        let h = distribute_dofs(&m, 4, 1).unwrap();
        let o = renumber_optimized(&h, &plan).unwrap();
        let cats = dof_categories(&o, &plan);
        let s = compute_range_schedule(&o, &plan).unwrap();
        for r in 0..s.n_ranges() {
            if s.range(r).all(|i| cats[i] == DofCategory::SingleBatch) {
                let cells_batch = plan.batch_of_cell();
                let owner = (0..o.n_cells()).find(|&c| o.expand_cell_indices(c).unwrap().contains(&s.range(r).start)).unwrap();
                let b = cells_batch[owner];
                if s.range(r)
                    .all(|i| (0..o.n_cells()).filter(|&c| o.expand_cell_indices(c).unwrap().contains(&i)).all(|c| cells_batch[c] == b))
                {
                    assert_eq!((s.first_touch_batch[r], s.last_touch_batch[r]), (b, b));
                }
            }
        }
    }
}
