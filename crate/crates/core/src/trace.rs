//! Range-granular vector access traces, cache-free transfer accounting and a
//! fully-associative LRU cache replay.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

pub type VectorId = u16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AccessKind {
    Read,
    Write,
}

/// Where in the algorithm an access happened.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RegionTag {
    Pre,
    CellRead,
    CellWrite,
    Post,
    Reduction,
    /// Plain vector update loop outside the cell loop.
    Stream,
}

impl RegionTag {
    pub fn name(self) -> &'static str {
        match self {
            RegionTag::Pre => "pre",
            RegionTag::CellRead => "cell_read",
            RegionTag::CellWrite => "cell_write",
            RegionTag::Post => "post",
            RegionTag::Reduction => "reduction",
            RegionTag::Stream => "stream",
        }
    }

    fn is_cell(self) -> bool {
        matches!(self, RegionTag::CellRead | RegionTag::CellWrite)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccessEvent {
    pub vector: VectorId,
    pub byte_start: u64,
    pub byte_len: u32,
    pub kind: AccessKind,
    pub tag: RegionTag,
    /// Fused access region instance; accesses in one instance are assumed
    /// to be served by a single pass over memory.
    pub region: u32,
    pub iteration: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TracedVector {
    pub name: String,
    /// Index/geometry streams rather than solver vectors.
    pub metadata: bool,
    addr: usize,
    bytes: usize,
}

impl TracedVector {
    /// Size of the registered buffer (0 for streams).
    pub fn bytes(&self) -> usize {
        self.bytes
    }
}

/// Collects access events. Vectors are identified by buffer address, so
/// swapping two buffers keeps each buffer's identity.
#[derive(Debug, Clone, Default)]
pub struct TraceRecorder {
    events: Vec<AccessEvent>,
    vectors: Vec<TracedVector>,
    region: u32,
    iteration: u32,
    paused: bool,
}

pub type SharedRecorder = Rc<RefCell<TraceRecorder>>;

impl TraceRecorder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn shared() -> SharedRecorder {
        Rc::new(RefCell::new(Self::new()))
    }

    /// Id of a solver vector, registering it under `name` if unknown.
    pub fn register(&mut self, name: &str, data: &[f64]) -> VectorId {
        if let Some(id) = self.lookup(data) {
            return id;
        }
        self.vectors.push(TracedVector {
            name: name.to_string(),
            metadata: false,
            addr: data.as_ptr() as usize,
            bytes: std::mem::size_of_val(data),
        });
        (self.vectors.len() - 1) as VectorId
    }

    /// Id of a named metadata stream (geometry, indices).
    pub fn stream(&mut self, name: &str) -> VectorId {
        if let Some(i) = self.vectors.iter().position(|v| v.metadata && v.name == name) {
            return i as VectorId;
        }
        self.vectors.push(TracedVector { name: name.to_string(), metadata: true, addr: 0, bytes: 0 });
        (self.vectors.len() - 1) as VectorId
    }

    fn lookup(&self, data: &[f64]) -> Option<VectorId> {
        let a = data.as_ptr() as usize;
        self.vectors.iter().position(|v| !v.metadata && a >= v.addr && a < v.addr + v.bytes.max(1)).map(|i| i as VectorId)
    }

    /// Id of the vector containing `data`, registering an unnamed one.
    pub fn id_of(&mut self, data: &[f64]) -> VectorId {
        match self.lookup(data) {
            Some(id) => id,
            None => {
                let name = format!("vector{}", self.vectors.len());
                self.register(&name, data)
            }
        }
    }

    pub fn vectors(&self) -> &[TracedVector] {
        &self.vectors
    }

    /// Starts a new fused access region and returns its id.
    pub fn begin_region(&mut self) -> u32 {
        self.region += 1;
        self.region
    }

    pub fn set_iteration(&mut self, k: u32) {
        self.iteration = k;
    }

    pub fn iteration(&self) -> u32 {
        self.iteration
    }

    pub fn set_paused(&mut self, paused: bool) {
        self.paused = paused;
    }

    pub fn is_paused(&self) -> bool {
        self.paused
    }

    /// Records `len` elements of `elem_bytes` bytes starting at element
    /// `start` of vector `id`.
    pub fn record(&mut self, id: VectorId, start: usize, len: usize, elem_bytes: usize, kind: AccessKind, tag: RegionTag) {
        if self.paused || len == 0 {
            return;
        }
        self.events.push(AccessEvent {
            vector: id,
            byte_start: (start * elem_bytes) as u64,
            byte_len: (len * elem_bytes) as u32,
            kind,
            tag,
            region: self.region,
            iteration: self.iteration,
        });
    }

    /// Records access to `range` of the vector whose buffer is `data`.
    pub fn touch(&mut self, data: &[f64], range: std::ops::Range<usize>, kind: AccessKind, tag: RegionTag) {
        if self.paused {
            return;
        }
        let base = self.id_of(data);
        let offset = (data.as_ptr() as usize - self.vectors[base as usize].addr) / 8;
        self.record(base, offset + range.start, range.len(), 8, kind, tag);
    }

    /// Records a whole-vector access.
    pub fn touch_all(&mut self, data: &[f64], kind: AccessKind, tag: RegionTag) {
        self.touch(data, 0..data.len(), kind, tag);
    }

    pub fn events(&self) -> &[AccessEvent] {
        &self.events
    }

    pub fn clear_events(&mut self) {
        self.events.clear();
    }

    pub fn take_events(&mut self) -> Vec<AccessEvent> {
        std::mem::take(&mut self.events)
    }
}

/// Cache-free transfer totals in doubles per DoF per iteration.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TransferCounts {
    /// Regions without cell-loop accesses, plus fused regions.
    pub vector_reads: f64,
    pub vector_writes: f64,
    /// Regions made only of cell-loop accesses.
    pub matvec_reads: f64,
    pub matvec_writes: f64,
    /// Index and geometry streams.
    pub metadata_reads: f64,
    pub iterations: usize,
}

impl TransferCounts {
    pub fn total_reads(&self) -> f64 {
        self.vector_reads + self.matvec_reads
    }

    pub fn total_writes(&self) -> f64 {
        self.vector_writes + self.matvec_writes
    }
}

#[derive(Default)]
struct Words {
    touched: Vec<u64>,
    written: Vec<u64>,
}

fn mark(bits: &mut Vec<u64>, w0: usize, w1: usize) {
    if bits.len() * 64 < w1 {
        bits.resize(w1.div_ceil(64), 0);
    }
    for w in w0..w1 {
        bits[w / 64] |= 1 << (w % 64);
    }
}

fn popcount(bits: &[u64]) -> u64 {
    bits.iter().map(|b| b.count_ones() as u64).sum()
}

/// Ideal transfer of the iterations in `iterations`: within one region
/// instance, every 8-byte word of a vector is loaded once if read or written
/// (write-allocate) and stored once if written.
pub fn account_transfer(
    events: &[AccessEvent],
    vectors: &[TracedVector],
    n_dofs: usize,
    iterations: std::ops::Range<u32>,
) -> TransferCounts {
    let mut out = TransferCounts { iterations: iterations.len(), ..Default::default() };
    if iterations.is_empty() || n_dofs == 0 {
        return out;
    }
    let flush = |region: &mut HashMap<VectorId, Words>, matvec_only: bool, out: &mut TransferCounts| {
        for (id, w) in region.drain() {
            let reads = popcount(&w.touched) as f64;
            let writes = popcount(&w.written) as f64;
            if vectors.get(id as usize).is_some_and(|v| v.metadata) {
                out.metadata_reads += reads;
            } else if matvec_only {
                out.matvec_reads += reads;
                out.matvec_writes += writes;
            } else {
                out.vector_reads += reads;
                out.vector_writes += writes;
            }
        }
    };
    let mut region: HashMap<VectorId, Words> = HashMap::new();
    let mut current = None;
    let mut matvec_only = true;
    for e in events.iter().filter(|e| iterations.contains(&e.iteration)) {
        if current != Some(e.region) {
            flush(&mut region, matvec_only, &mut out);
            current = Some(e.region);
            matvec_only = true;
        }
        let is_meta = vectors.get(e.vector as usize).is_some_and(|v| v.metadata);
        if !is_meta && !e.tag.is_cell() {
            matvec_only = false;
        }
        let w0 = (e.byte_start / 8) as usize;
        let w1 = ((e.byte_start + e.byte_len as u64).div_ceil(8)) as usize;
        let words = region.entry(e.vector).or_default();
        mark(&mut words.touched, w0, w1);
        if e.kind == AccessKind::Write {
            mark(&mut words.written, w0, w1);
        }
    }
    flush(&mut region, matvec_only, &mut out);
    let scale = 1.0 / (n_dofs as f64 * iterations.len() as f64);
    out.vector_reads *= scale;
    out.vector_writes *= scale;
    out.matvec_reads *= scale;
    out.matvec_writes *= scale;
    out.metadata_reads *= scale;
    out
}

/// Fully-associative LRU cache with write-allocate and write-back.
#[derive(Debug, Clone)]
pub struct CacheModel {
    pub capacity_bytes: usize,
    pub line_bytes: usize,
    /// Lines loaded from memory (misses, including read-for-ownership).
    pub ram_loads: u64,
    /// Dirty lines written back.
    pub ram_stores: u64,
    map: HashMap<(VectorId, u64), usize>,
    nodes: Vec<Node>,
    head: usize,
    tail: usize,
    free: Vec<usize>,
}

const NIL: usize = usize::MAX;

#[derive(Debug, Clone)]
struct Node {
    key: (VectorId, u64),
    dirty: bool,
    prev: usize,
    next: usize,
}

impl CacheModel {
    pub fn new(capacity_bytes: usize, line_bytes: usize) -> Self {
        assert!(line_bytes > 0, "line size must be positive");
        Self {
            capacity_bytes,
            line_bytes,
            ram_loads: 0,
            ram_stores: 0,
            map: HashMap::new(),
            nodes: Vec::new(),
            head: NIL,
            tail: NIL,
            free: Vec::new(),
        }
    }

    pub fn capacity_lines(&self) -> usize {
        self.capacity_bytes / self.line_bytes
    }

    fn unlink(&mut self, i: usize) {
        let (p, n) = (self.nodes[i].prev, self.nodes[i].next);
        if p != NIL {
            self.nodes[p].next = n;
        } else {
            self.head = n;
        }
        if n != NIL {
            self.nodes[n].prev = p;
        } else {
            self.tail = p;
        }
    }

    fn push_front(&mut self, i: usize) {
        self.nodes[i].prev = NIL;
        self.nodes[i].next = self.head;
        if self.head != NIL {
            self.nodes[self.head].prev = i;
        }
        self.head = i;
        if self.tail == NIL {
            self.tail = i;
        }
    }

    /// One access to one line.
    pub fn access(&mut self, key: (VectorId, u64), write: bool) {
        if let Some(&i) = self.map.get(&key) {
            self.unlink(i);
            self.push_front(i);
            self.nodes[i].dirty |= write;
            return;
        }
        self.ram_loads += 1;
        if self.capacity_lines() == 0 {
            if write {
                self.ram_stores += 1;
            }
            return;
        }
        if self.map.len() >= self.capacity_lines() {
            let victim = self.tail;
            self.unlink(victim);
            self.map.remove(&self.nodes[victim].key);
            if self.nodes[victim].dirty {
                self.ram_stores += 1;
            }
            self.free.push(victim);
        }
        let node = Node { key, dirty: write, prev: NIL, next: NIL };
        let i = match self.free.pop() {
            Some(i) => {
                self.nodes[i] = node;
                i
            }
            None => {
                self.nodes.push(node);
                self.nodes.len() - 1
            }
        };
        self.map.insert(key, i);
        self.push_front(i);
    }

    pub fn access_event(&mut self, e: &AccessEvent) {
        if e.byte_len == 0 {
            return;
        }
        let lb = self.line_bytes as u64;
        let first = e.byte_start / lb;
        let last = (e.byte_start + e.byte_len as u64 - 1) / lb;
        for line in first..=last {
            self.access((e.vector, line), e.kind == AccessKind::Write);
        }
    }

    /// Writes back all dirty lines.
    pub fn flush(&mut self) {
        self.ram_stores += self.nodes.iter().enumerate().filter(|(i, n)| n.dirty && self.map.get(&n.key) == Some(i)).count() as u64;
        for n in &mut self.nodes {
            n.dirty = false;
        }
    }
}

/// Memory traffic of a cache replay in doubles per DoF per iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CacheReplay {
    pub ram_loads_per_dof: f64,
    pub ram_stores_per_dof: f64,
    pub ram_load_lines: u64,
    pub ram_store_lines: u64,
}

/// Replays `events` through `model` (including a final write-back flush)
/// and normalizes by `n_dofs * iterations`.
pub fn replay_cache(events: &[AccessEvent], model: &mut CacheModel, n_dofs: usize, iterations: usize) -> CacheReplay {
    for e in events {
        model.access_event(e);
    }
    model.flush();
    let doubles_per_line = model.line_bytes as f64 / 8.0;
    let scale = doubles_per_line / (n_dofs.max(1) as f64 * iterations.max(1) as f64);
    CacheReplay {
        ram_loads_per_dof: model.ram_loads as f64 * scale,
        ram_stores_per_dof: model.ram_stores as f64 * scale,
        ram_load_lines: model.ram_loads,
        ram_store_lines: model.ram_stores,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn event(vector: VectorId, start: u64, len: u32, kind: AccessKind, region: u32) -> AccessEvent {
        AccessEvent { vector, byte_start: start, byte_len: len, kind, tag: RegionTag::Stream, region, iteration: 0 }
    }

    #[test]
    fn registration_by_address() {
        let a = vec![0.0; 16];
        let b = vec![0.0; 16];
        let mut r = TraceRecorder::new();
        let ia = r.register("a", &a);
        let ib = r.register("b", &b);
        assert_ne!(ia, ib);
        assert_eq!(r.id_of(&a[4..]), ia);
        assert_eq!(r.register("again", &b), ib);
        let g = r.stream("geometry");
        assert_eq!(r.stream("geometry"), g);
        r.touch(&a[8..], 0..4, AccessKind::Read, RegionTag::Pre);
        assert_eq!(r.events()[0].byte_start, 64);
        r.set_paused(true);
        r.touch_all(&a, AccessKind::Read, RegionTag::Pre);
        assert_eq!(r.events().len(), 1);
    }

    #[test]
    fn accounting_dedupes_within_regions() {
        let vectors = vec![
            TracedVector { name: "x".into(), metadata: false, addr: 0, bytes: 0 },
            TracedVector { name: "y".into(), metadata: false, addr: 0, bytes: 0 },
        ];
        // region 1 reads x twice and writes y; region 2 reads x again.
        let ev = vec![
            event(0, 0, 80, AccessKind::Read, 1),
            event(0, 0, 80, AccessKind::Read, 1),
            event(1, 0, 80, AccessKind::Write, 1),
            event(0, 0, 80, AccessKind::Read, 2),
        ];
        let t = account_transfer(&ev, &vectors, 10, 0..1);
        assert_eq!((t.vector_reads, t.vector_writes), (3.0, 1.0));
    }

    #[test]
    fn lru_basics() {
        let mut c = CacheModel::new(128, 64);
        c.access((0, 0), false);
        c.access((0, 1), false);
        c.access((0, 0), false);
        assert_eq!(c.ram_loads, 2);
        c.access((0, 2), true); // evicts line 1
        c.access((0, 0), false);
        assert_eq!(c.ram_loads, 3);
        c.access((0, 1), false); // evicts dirty line 2
        assert_eq!((c.ram_loads, c.ram_stores), (4, 1));
        c.access((0, 1), true);
        c.flush();
        assert_eq!(c.ram_stores, 2);
    }

    #[test]
    fn replay_extremes() {
        let mut ev = Vec::new();
        for it in 0..3 {
            for v in 0..2 {
                let mut e = event(v, 0, 8 * 64, AccessKind::Read, it);
                e.iteration = it;
                ev.push(e);
            }
        }
        let big = replay_cache(&ev, &mut CacheModel::new(1 << 20, 64), 64, 3);
        assert_eq!(big.ram_load_lines, 16);
        let one = replay_cache(&ev, &mut CacheModel::new(64, 64), 64, 3);
        assert_eq!(one.ram_load_lines, 48);
        let none = replay_cache(&ev, &mut CacheModel::new(0, 64), 64, 3);
        assert_eq!(none.ram_load_lines, 48);
    }
}
