//! Binary space partitioning of the grid into solver tasks.
//!
//! [`build_tree`] splits the domain by longest-axis medians, [`coalesce`]
//! folds obstacle-dominated leaves into neighbouring tasks, [`halo_plan`]
//! lists the ghost-cell copies between tasks, and [`PartitionedGrid`] steps a
//! grid task by task with results bit-identical to [`lattice::step_into`].

use crate::lattice::{
    self, collide_cell, stream_cell, CellFlag, CollisionConsts, DistributionGrid, FlagField, FluidParams,
    LatticeError, PostCollision, E, Q, QT,
};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

pub const DEFAULT_FLOPS_PER_CELL: u64 = 200;
pub const DEFAULT_THETA: f64 = 0.3;
pub const MIN_LEAF_CELLS: usize = 16;

/// Axis-aligned rectangle of cell indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn new(x0: usize, y0: usize, w: usize, h: usize) -> Self {
        Self { x0, y0, w, h }
    }

    pub fn cells(&self) -> usize {
        self.w * self.h
    }

    pub fn x1(&self) -> usize {
        self.x0 + self.w
    }

    pub fn y1(&self) -> usize {
        self.y0 + self.h
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1() && y >= self.y0 && y < self.y1()
    }

    /// Cells in row-major order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.y0..self.y1()).flat_map(move |y| (self.x0..self.x1()).map(move |x| (x, y)))
    }

    /// Length of the edge segment shared with `other` (0 when they only
    /// touch at a corner or not at all).
    pub fn shared_edge(&self, other: &Rect) -> usize {
        let overlap = |a0: usize, a1: usize, b0: usize, b1: usize| a1.min(b1).saturating_sub(a0.max(b0));
        if self.x1() == other.x0 || other.x1() == self.x0 {
            overlap(self.y0, self.y1(), other.y0, other.y1())
        } else if self.y1() == other.y0 || other.y1() == self.y0 {
            overlap(self.x0, self.x1(), other.x0, other.x1())
        } else {
            0
        }
    }

    /// Union of two rectangles that tile a larger one.
    pub fn union(&self, other: &Rect) -> Rect {
        let x0 = self.x0.min(other.x0);
        let y0 = self.y0.min(other.y0);
        Rect::new(x0, y0, self.x1().max(other.x1()) - x0, self.y1().max(other.y1()) - y0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub axis: Axis,
    /// First cell index of the second child along `axis`.
    pub at: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: usize,
    pub rect: Rect,
    pub split: Option<Split>,
    pub children: Option<[usize; 2]>,
    pub parent: Option<usize>,
    pub depth: u32,
    pub fluid_cell_count: usize,
    pub work_estimate: u64,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_none()
    }
}

/// BSP tree over a grid. Node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionTree {
    pub nx: usize,
    pub ny: usize,
    pub periodic_x: bool,
    pub periodic_y: bool,
    pub flops_per_cell: u64,
    pub nodes: Vec<TreeNode>,
}

/// Fluid cells are the ones that collide; everything else costs nothing.
fn count_fluid(flags: &FlagField, rect: &Rect) -> usize {
    rect.iter()
        .filter(|&(x, y)| flags.get(x, y) == CellFlag::Fluid)
        .count()
}

pub fn estimate_work(node: &TreeNode, flops_per_cell: u64) -> u64 {
    node.fluid_cell_count as u64 * flops_per_cell
}

/// Split longest axes at their median until every leaf has at most
/// `max_leaf_cells` cells. Ties between axes split x.
pub fn build_tree(flags: &FlagField, max_leaf_cells: usize) -> PartitionTree {
    assert!(max_leaf_cells >= MIN_LEAF_CELLS, "max_leaf_cells must be at least {MIN_LEAF_CELLS}");
    let mut tree = PartitionTree::single(flags);
    let mut stack = vec![0];
    while let Some(id) = stack.pop() {
        let r = tree.nodes[id].rect;
        if r.cells() <= max_leaf_cells {
            continue;
        }
        let (axis, at) = if r.w >= r.h {
            (Axis::X, r.x0 + r.w / 2)
        } else {
            (Axis::Y, r.y0 + r.h / 2)
        };
        let [a, b] = tree.split_leaf(id, axis, at);
        stack.push(b);
        stack.push(a);
    }
    tree.recount(flags);
    tree
}

impl PartitionTree {
    /// One-leaf tree covering `flags`.
    pub fn single(flags: &FlagField) -> Self {
        let rect = Rect::new(0, 0, flags.nx, flags.ny);
        let mut tree = Self {
            nx: flags.nx,
            ny: flags.ny,
            periodic_x: flags.periodic_x,
            periodic_y: flags.periodic_y,
            flops_per_cell: DEFAULT_FLOPS_PER_CELL,
            nodes: vec![TreeNode {
                id: 0,
                rect,
                split: None,
                children: None,
                parent: None,
                depth: 0,
                fluid_cell_count: 0,
                work_estimate: 0,
            }],
        };
        tree.recount(flags);
        tree
    }

    /// Split leaf `id` at cell index `at` along `axis`; returns the child ids
    /// (lower part first). Counts are stale until [`Self::recount`].
    pub fn split_leaf(&mut self, id: usize, axis: Axis, at: usize) -> [usize; 2] {
        let node = &self.nodes[id];
        assert!(node.is_leaf(), "node {id} is already split");
        let r = node.rect;
        let (lo, hi) = match axis {
            Axis::X => {
                assert!(at > r.x0 && at < r.x1(), "split outside rectangle");
                (Rect::new(r.x0, r.y0, at - r.x0, r.h), Rect::new(at, r.y0, r.x1() - at, r.h))
            }
            Axis::Y => {
                assert!(at > r.y0 && at < r.y1(), "split outside rectangle");
                (Rect::new(r.x0, r.y0, r.w, at - r.y0), Rect::new(r.x0, at, r.w, r.y1() - at))
            }
        };
        let depth = node.depth + 1;
        let ids = [self.nodes.len(), self.nodes.len() + 1];
        for (child, rect) in ids.iter().zip([lo, hi]) {
            self.nodes.push(TreeNode {
                id: *child,
                rect,
                split: None,
                children: None,
                parent: Some(id),
                depth,
                fluid_cell_count: 0,
                work_estimate: 0,
            });
        }
        self.nodes[id].split = Some(Split { axis, at });
        self.nodes[id].children = Some(ids);
        ids
    }

    /// Recompute fluid counts and work estimates bottom-up from `flags`.
    pub fn recount(&mut self, flags: &FlagField) {
        for id in self.post_order() {
            let count = match self.nodes[id].children {
                None => count_fluid(flags, &self.nodes[id].rect),
                Some([a, b]) => self.nodes[a].fluid_cell_count + self.nodes[b].fluid_cell_count,
            };
            self.nodes[id].fluid_cell_count = count;
            self.nodes[id].work_estimate = estimate_work(&self.nodes[id], self.flops_per_cell);
        }
    }

    pub fn set_flops_per_cell(&mut self, flops_per_cell: u64) {
        self.flops_per_cell = flops_per_cell;
        for node in &mut self.nodes {
            node.work_estimate = estimate_work(node, flops_per_cell);
        }
    }

    pub fn root(&self) -> &TreeNode {
        &self.nodes[0]
    }

    /// Children before parents, left subtree first.
    pub fn post_order(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![(0, false)];
        while let Some((id, expanded)) = stack.pop() {
            match self.nodes[id].children {
                Some([a, b]) if !expanded => {
                    stack.push((id, true));
                    stack.push((b, false));
                    stack.push((a, false));
                }
                _ => out.push(id),
            }
        }
        out
    }

    /// Leaf ids left to right.
    pub fn leaves(&self) -> Vec<usize> {
        self.post_order()
            .into_iter()
            .filter(|&id| self.nodes[id].is_leaf())
            .collect()
    }

    /// Number of edges on the longest root-to-leaf path.
    pub fn height(&self) -> u32 {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    /// Leaf id per cell, row-major.
    pub fn leaf_map(&self) -> Vec<usize> {
        let mut map = vec![usize::MAX; self.nx * self.ny];
        for leaf in self.leaves() {
            for (x, y) in self.nodes[leaf].rect.iter() {
                map[y * self.nx + x] = leaf;
            }
        }
        map
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("tree serializes")
    }
}

/// A unit of solver work: one or more contiguous leaves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: usize,
    pub leaves: Vec<usize>,
    pub rects: Vec<Rect>,
    pub cells: usize,
    pub fluid_cell_count: usize,
    pub work_estimate: u64,
    /// `(neighbour task, cells this task reads from it)` per step.
    pub halo: Vec<(usize, usize)>,
}

impl TaskSpec {
    pub fn fluid_fraction(&self) -> f64 {
        self.fluid_cell_count as f64 / self.cells as f64
    }
}

/// Tasks covering a domain, with the topology needed for halo exchange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSet {
    pub nx: usize,
    pub ny: usize,
    pub periodic_x: bool,
    pub periodic_y: bool,
    pub tasks: Vec<TaskSpec>,
}

impl TaskSet {
    /// Owning task per cell, row-major.
    pub fn owner_map(&self) -> Vec<usize> {
        let mut owner = vec![usize::MAX; self.nx * self.ny];
        for task in &self.tasks {
            for rect in &task.rects {
                for (x, y) in rect.iter() {
                    owner[y * self.nx + x] = task.id;
                }
            }
        }
        owner
    }

    fn topology(&self) -> FlagField {
        FlagField {
            periodic_x: self.periodic_x,
            periodic_y: self.periodic_y,
            ..FlagField::filled(self.nx, self.ny, CellFlag::Fluid)
        }
    }

    /// Builds specs from groups of leaves, numbering tasks by their first
    /// leaf's position, and fills in the halo lists.
    fn from_groups(tree: &PartitionTree, mut groups: Vec<Vec<usize>>) -> Self {
        let order: HashMap<usize, usize> = tree.leaves().into_iter().enumerate().map(|(i, l)| (l, i)).collect();
        for g in &mut groups {
            g.sort_by_key(|l| order[l]);
        }
        groups.sort_by_key(|g| order[&g[0]]);
        let tasks = groups
            .into_iter()
            .enumerate()
            .map(|(id, leaves)| {
                let nodes: Vec<&TreeNode> = leaves.iter().map(|&l| &tree.nodes[l]).collect();
                TaskSpec {
                    id,
                    rects: nodes.iter().map(|n| n.rect).collect(),
                    cells: nodes.iter().map(|n| n.rect.cells()).sum(),
                    fluid_cell_count: nodes.iter().map(|n| n.fluid_cell_count).sum(),
                    work_estimate: nodes.iter().map(|n| n.work_estimate).sum(),
                    halo: Vec::new(),
                    leaves,
                }
            })
            .collect();
        let mut set = TaskSet {
            nx: tree.nx,
            ny: tree.ny,
            periodic_x: tree.periodic_x,
            periodic_y: tree.periodic_y,
            tasks,
        };
        let schedule = halo_plan(&set);
        for copy in &schedule.copies {
            set.tasks[copy.dst].halo.push((copy.src, copy.cells.len()));
        }
        set
    }

    /// One task per leaf.
    pub fn from_leaves(tree: &PartitionTree) -> Self {
        Self::from_groups(tree, tree.leaves().into_iter().map(|l| vec![l]).collect())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("task set serializes")
    }
}

/// Merge leaves whose fluid fraction is below `theta` into adjacent tasks.
///
/// Sparse tasks are visited deepest first; each merges into the
/// edge-adjacent task with the smallest work (lowest first leaf on ties).
/// A task that contains a leaf at or above `theta` is never merged away, so
/// dense regions keep their own tasks.
pub fn coalesce(tree: &PartitionTree, theta: f64) -> TaskSet {
    assert!((0.0..=1.0).contains(&theta), "theta must lie in [0, 1]");
    let leaves = tree.leaves();
    let order: HashMap<usize, usize> = leaves.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    let fraction = |fluid: usize, cells: usize| fluid as f64 / cells as f64;

    struct Group {
        leaves: Vec<usize>,
        fluid: usize,
        cells: usize,
        work: u64,
        anchored: bool,
        depth: u32,
    }
    let mut groups: BTreeMap<usize, Group> = leaves
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let n = &tree.nodes[l];
            let g = Group {
                leaves: vec![l],
                fluid: n.fluid_cell_count,
                cells: n.rect.cells(),
                work: n.work_estimate,
                anchored: fraction(n.fluid_cell_count, n.rect.cells()) >= theta,
                depth: n.depth,
            };
            (i, g)
        })
        .collect();

    let adjacent = |a: &Group, b: &Group| {
        a.leaves.iter().any(|&la| {
            b.leaves
                .iter()
                .any(|&lb| tree.nodes[la].rect.shared_edge(&tree.nodes[lb].rect) > 0)
        })
    };

    let mut isolated = BTreeSet::new();
    loop {
        let next = groups
            .iter()
            .filter(|(k, g)| !g.anchored && fraction(g.fluid, g.cells) < theta && !isolated.contains(*k))
            .max_by(|(ka, a), (kb, b)| a.depth.cmp(&b.depth).then(kb.cmp(ka)))
            .map(|(k, _)| *k);
        let Some(key) = next else { break };
        let target = groups
            .iter()
            .filter(|(k, g)| **k != key && adjacent(&groups[&key], g))
            .min_by(|(ka, a), (kb, b)| a.work.cmp(&b.work).then(ka.cmp(kb)))
            .map(|(k, _)| *k);
        let Some(target) = target else {
            isolated.insert(key);
            continue;
        };
        let absorbed = groups.remove(&key).expect("group exists");
        let into = groups.get_mut(&target).expect("target exists");
        into.leaves.extend(absorbed.leaves);
        into.fluid += absorbed.fluid;
        into.cells += absorbed.cells;
        into.work += absorbed.work;
        into.depth = into.depth.min(absorbed.depth);
        isolated.remove(&target);
    }
    let groups = groups
        .into_values()
        .map(|mut g| {
            g.leaves.sort_by_key(|l| order[l]);
            g.leaves
        })
        .collect();
    TaskSet::from_groups(tree, groups)
}

/// `count × count` grid of equal blocks (remainders go to the last row and
/// column), ignoring obstacles.
pub fn uniform_blocks(flags: &FlagField, bx: usize, by: usize) -> TaskSet {
    assert!(bx >= 1 && by >= 1 && bx <= flags.nx && by <= flags.ny);
    let mut tree = PartitionTree::single(flags);
    // A comb of splits: rows first, then columns within each row.
    let mut row = 0;
    for j in 1..by {
        let [_, rest] = tree.split_leaf(row, Axis::Y, j * flags.ny / by);
        row = rest;
    }
    let rows: Vec<usize> = tree.leaves();
    for r in rows {
        let mut cell = r;
        for i in 1..bx {
            let [_, rest] = tree.split_leaf(cell, Axis::X, i * flags.nx / bx);
            cell = rest;
        }
    }
    tree.recount(flags);
    TaskSet::from_leaves(&tree)
}

/// Copy of `cells` (global row-major indices, ascending) from task `src`'s
/// post-collision state into task `dst`'s ghost layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HaloCopy {
    pub src: usize,
    pub dst: usize,
    pub cells: Vec<usize>,
}

/// Per-step halo copies, ordered by `(src, dst)`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExchangeSchedule {
    pub copies: Vec<HaloCopy>,
}

/// Every cell a task's streaming reads (its 8-neighbourhood, wrapped on
/// periodic axes) that another task owns, grouped by owner.
pub fn halo_plan(tasks: &TaskSet) -> ExchangeSchedule {
    let owner = tasks.owner_map();
    let topo = tasks.topology();
    let mut strips: BTreeMap<(usize, usize), BTreeSet<usize>> = BTreeMap::new();
    for task in &tasks.tasks {
        for rect in &task.rects {
            for (x, y) in rect.iter() {
                for e in &E[1..] {
                    if let Some(n) = topo.offset(x, y, e[0], e[1]) {
                        if owner[n] != task.id {
                            strips.entry((owner[n], task.id)).or_default().insert(n);
                        }
                    }
                }
            }
        }
    }
    ExchangeSchedule {
        copies: strips
            .into_iter()
            .map(|((src, dst), cells)| HaloCopy {
                src,
                dst,
                cells: cells.into_iter().collect(),
            })
            .collect(),
    }
}

/// One task's slice of the grid: owned cells followed by ghost slots.
#[derive(Debug, Clone, Default)]
pub struct TaskBlock {
    pub id: usize,
    /// Global indices of owned cells, ascending.
    pub owned: Vec<usize>,
    flags: Vec<CellFlag>,
    sources: Vec<[Option<usize>; Q]>,
    f: Vec<f64>,
    g: Vec<f64>,
    post_f: Vec<f64>,
    post_g: Vec<f64>,
}

struct BlockPost<'a> {
    f: &'a [f64],
    g: &'a [f64],
    flags: &'a [CellFlag],
}

impl PostCollision for BlockPost<'_> {
    #[inline]
    fn f(&self, cell: usize) -> &[f64] {
        &self.f[cell * Q..(cell + 1) * Q]
    }
    #[inline]
    fn g(&self, cell: usize) -> &[f64] {
        &self.g[cell * QT..(cell + 1) * QT]
    }
    #[inline]
    fn flag(&self, cell: usize) -> CellFlag {
        self.flags[cell]
    }
}

impl TaskBlock {
    pub fn cells(&self) -> usize {
        self.owned.len()
    }

    /// Collide owned cells into the post-collision buffers.
    pub fn collide(&mut self, consts: &CollisionConsts) {
        let n = self.owned.len();
        self.post_f[..n * Q].copy_from_slice(&self.f[..n * Q]);
        self.post_g[..n * QT].copy_from_slice(&self.g[..n * QT]);
        for c in 0..n {
            if self.flags[c] == CellFlag::Fluid {
                collide_cell(
                    &mut self.post_f[c * Q..(c + 1) * Q],
                    &mut self.post_g[c * QT..(c + 1) * QT],
                    consts,
                );
            }
        }
    }

    /// Stream into owned cells from the post-collision buffers, ghosts
    /// included. Returns the global index of the first bad cell.
    pub fn stream(&mut self, params: &FluidParams, patch_temps: &[f64]) -> Result<(), usize> {
        let post = BlockPost {
            f: &self.post_f,
            g: &self.post_g,
            flags: &self.flags,
        };
        let mut bad = None;
        for c in 0..self.owned.len() {
            let ok = stream_cell(
                &post,
                c,
                self.flags[c],
                &self.sources[c],
                params,
                patch_temps,
                &mut self.f[c * Q..(c + 1) * Q],
                &mut self.g[c * QT..(c + 1) * QT],
            );
            if !ok && bad.is_none() {
                bad = Some(self.owned[c]);
            }
        }
        bad.map_or(Ok(()), Err)
    }
}

/// Slot-level form of a [`HaloCopy`].
#[derive(Debug, Clone)]
struct SlotCopy {
    src: usize,
    dst: usize,
    src_slots: Vec<usize>,
    dst_slots: Vec<usize>,
}

/// Runs a per-block closure over every block of a step phase.
pub trait WaveRunner {
    fn run_wave(
        &self,
        blocks: Vec<TaskBlock>,
        work: &(dyn Fn(&mut TaskBlock) -> Result<(), LatticeError> + Sync),
    ) -> Result<Vec<TaskBlock>, LatticeError>;
}

/// Runs blocks one after another on the calling thread.
pub struct SerialRunner;

impl WaveRunner for SerialRunner {
    fn run_wave(
        &self,
        mut blocks: Vec<TaskBlock>,
        work: &(dyn Fn(&mut TaskBlock) -> Result<(), LatticeError> + Sync),
    ) -> Result<Vec<TaskBlock>, LatticeError> {
        for b in &mut blocks {
            work(b)?;
        }
        Ok(blocks)
    }
}

/// A grid split into task blocks with its halo schedule.
#[derive(Debug, Clone)]
pub struct PartitionedGrid {
    pub nx: usize,
    pub ny: usize,
    pub flags: Arc<FlagField>,
    pub patch_temps: Vec<f64>,
    pub ambient_temp: f64,
    pub level: u32,
    pub time: u64,
    pub schedule: ExchangeSchedule,
    blocks: Vec<TaskBlock>,
    copies: Vec<SlotCopy>,
}

impl PartitionedGrid {
    pub fn new(grid: &DistributionGrid, tasks: &TaskSet) -> Self {
        assert_eq!((grid.nx, grid.ny), (tasks.nx, tasks.ny), "task set does not match the grid");
        let flags = &grid.flags;
        let owner = tasks.owner_map();
        let schedule = halo_plan(tasks);

        // Global cell -> slot, per block.
        let mut slot_maps: Vec<HashMap<usize, usize>> = Vec::with_capacity(tasks.tasks.len());
        let mut blocks = Vec::with_capacity(tasks.tasks.len());
        for task in &tasks.tasks {
            let owned: Vec<usize> = (0..owner.len()).filter(|&c| owner[c] == task.id).collect();
            let mut slots: HashMap<usize, usize> = owned.iter().enumerate().map(|(i, &c)| (c, i)).collect();
            for copy in schedule.copies.iter().filter(|c| c.dst == task.id) {
                for &c in &copy.cells {
                    let next = slots.len();
                    slots.entry(c).or_insert(next);
                }
            }
            let total = slots.len();
            let mut block_flags = vec![CellFlag::Fluid; total];
            for (&c, &s) in &slots {
                block_flags[s] = flags.cells[c];
            }
            let sources = owned
                .iter()
                .map(|&c| {
                    let global = flags.pull_sources(c % grid.nx, c / grid.nx);
                    global.map(|s| s.map(|s| slots[&s]))
                })
                .collect();
            let mut f = vec![0.0; total * Q];
            let mut g = vec![0.0; total * QT];
            for (i, &c) in owned.iter().enumerate() {
                f[i * Q..(i + 1) * Q].copy_from_slice(&grid.f[c * Q..(c + 1) * Q]);
                g[i * QT..(i + 1) * QT].copy_from_slice(&grid.g[c * QT..(c + 1) * QT]);
            }
            blocks.push(TaskBlock {
                id: task.id,
                owned,
                flags: block_flags,
                sources,
                post_f: vec![0.0; total * Q],
                post_g: vec![0.0; total * QT],
                f,
                g,
            });
            slot_maps.push(slots);
        }
        let copies = schedule
            .copies
            .iter()
            .map(|copy| SlotCopy {
                src: copy.src,
                dst: copy.dst,
                src_slots: copy.cells.iter().map(|c| slot_maps[copy.src][c]).collect(),
                dst_slots: copy.cells.iter().map(|c| slot_maps[copy.dst][c]).collect(),
            })
            .collect();
        Self {
            nx: grid.nx,
            ny: grid.ny,
            flags: Arc::clone(&grid.flags),
            patch_temps: grid.patch_temps.clone(),
            ambient_temp: grid.ambient_temp,
            level: grid.level,
            time: grid.time,
            schedule,
            blocks,
            copies,
        }
    }

    pub fn blocks(&self) -> &[TaskBlock] {
        &self.blocks
    }

    fn exchange(&mut self) {
        let mut buf_f = Vec::new();
        let mut buf_g = Vec::new();
        for copy in &self.copies {
            buf_f.clear();
            buf_g.clear();
            let src = &self.blocks[copy.src];
            for &s in &copy.src_slots {
                buf_f.extend_from_slice(&src.post_f[s * Q..(s + 1) * Q]);
                buf_g.extend_from_slice(&src.post_g[s * QT..(s + 1) * QT]);
            }
            let dst = &mut self.blocks[copy.dst];
            for (k, &d) in copy.dst_slots.iter().enumerate() {
                dst.post_f[d * Q..(d + 1) * Q].copy_from_slice(&buf_f[k * Q..(k + 1) * Q]);
                dst.post_g[d * QT..(d + 1) * QT].copy_from_slice(&buf_g[k * QT..(k + 1) * QT]);
            }
        }
    }

    /// One step: a collide wave, the halo exchange, then a stream wave.
    pub fn step_with(&mut self, params: &FluidParams, runner: &dyn WaveRunner) -> Result<(), LatticeError> {
        let consts = CollisionConsts::new(params);
        let blocks = std::mem::take(&mut self.blocks);
        self.blocks = runner.run_wave(blocks, &|b| {
            b.collide(&consts);
            Ok(())
        })?;
        self.exchange();
        let time = self.time + 1;
        let nx = self.nx;
        let patch_temps = &self.patch_temps;
        let blocks = std::mem::take(&mut self.blocks);
        self.blocks = runner.run_wave(blocks, &|b| {
            b.stream(params, patch_temps)
                .map_err(|c| LatticeError::NumericalBlowup { time, x: c % nx, y: c / nx })
        })?;
        self.time = time;
        Ok(())
    }

    pub fn step(&mut self, params: &FluidParams) -> Result<(), LatticeError> {
        self.step_with(params, &SerialRunner)
    }

    /// Reassemble the monolithic grid.
    pub fn to_grid(&self) -> DistributionGrid {
        let n = self.nx * self.ny;
        let mut f = vec![0.0; n * Q];
        let mut g = vec![0.0; n * QT];
        for b in &self.blocks {
            for (i, &c) in b.owned.iter().enumerate() {
                f[c * Q..(c + 1) * Q].copy_from_slice(&b.f[i * Q..(i + 1) * Q]);
                g[c * QT..(c + 1) * QT].copy_from_slice(&b.g[i * QT..(i + 1) * QT]);
            }
        }
        DistributionGrid {
            nx: self.nx,
            ny: self.ny,
            f,
            g,
            flags: Arc::clone(&self.flags),
            patch_temps: self.patch_temps.clone(),
            ambient_temp: self.ambient_temp,
            level: self.level,
            time: self.time,
        }
    }
}

/// Monolithic reference: `steps` steps of [`lattice::step_into`].
pub fn step_monolithic(grid: &mut DistributionGrid, params: &FluidParams, steps: usize) -> Result<(), LatticeError> {
    let mut scratch = lattice::StepScratch::for_grid(grid);
    for _ in 0..steps {
        lattice::step_into(grid, params, &mut scratch)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn half_obstacle(nx: usize, ny: usize) -> FlagField {
        let mut flags = FlagField::periodic(nx, ny);
        for y in 0..ny {
            for x in 0..nx / 2 {
                flags.set(x, y, CellFlag::Obstacle);
            }
        }
        flags
    }

    #[test]
    fn small_fields_stay_one_leaf() {
        let tree = build_tree(&FlagField::periodic(8, 8), 64);
        assert_eq!(tree.nodes.len(), 1);
        assert_eq!(tree.leaves(), vec![0]);
    }

    #[test]
    fn longest_axis_median_split() {
        let tree = build_tree(&FlagField::periodic(16, 8), 64);
        assert_eq!(tree.root().split, Some(Split { axis: Axis::X, at: 8 }));
        assert_eq!(tree.leaves().len(), 2);
        assert_eq!(tree.nodes[1].rect, Rect::new(0, 0, 8, 8));
        assert_eq!(tree.nodes[2].rect, Rect::new(8, 0, 8, 8));
    }

    #[test]
    fn leaves_tile_the_domain_and_counts_add_up() {
        let mut flags = FlagField::periodic(37, 23);
        for (i, c) in flags.cells.iter_mut().enumerate() {
            if i % 7 == 3 {
                *c = CellFlag::Obstacle;
            }
        }
        let tree = build_tree(&flags, 40);
        let mut cover = vec![0; 37 * 23];
        for leaf in tree.leaves() {
            let r = tree.nodes[leaf].rect;
            assert!(r.cells() > 0 && r.cells() <= 40);
            for (x, y) in r.iter() {
                cover[y * 37 + x] += 1;
            }
        }
        assert!(cover.iter().all(|&c| c == 1));
        for node in &tree.nodes {
            if let Some([a, b]) = node.children {
                assert_eq!(node.fluid_cell_count, tree.nodes[a].fluid_cell_count + tree.nodes[b].fluid_cell_count);
                assert_eq!(node.rect.cells(), tree.nodes[a].rect.cells() + tree.nodes[b].rect.cells());
            }
        }
        let fluid = flags.count(|c| c == CellFlag::Fluid);
        assert_eq!(tree.root().fluid_cell_count, fluid);
        let leaf_work: u64 = tree.leaves().iter().map(|&l| tree.nodes[l].work_estimate).sum();
        assert_eq!(tree.root().work_estimate, leaf_work);
    }

    #[test]
    fn work_is_fluid_cells_times_flops() {
        let tree = build_tree(&FlagField::filled(10, 10, CellFlag::Obstacle), 100);
        assert_eq!(estimate_work(tree.root(), 200), 0);
        let tree = build_tree(&FlagField::periodic(10, 10), 100);
        assert_eq!(estimate_work(tree.root(), 200), 20_000);
    }

    #[test]
    fn all_fluid_or_zero_theta_keeps_leaves() {
        let tree = build_tree(&FlagField::periodic(32, 32), 64);
        let n = tree.leaves().len();
        assert_eq!(coalesce(&tree, 0.9).tasks.len(), n);
        let tree = build_tree(&half_obstacle(32, 32), 64);
        let set = coalesce(&tree, 0.0);
        assert_eq!(set.tasks.len(), n);
        assert!(set.tasks.iter().all(|t| t.leaves.len() == 1));
    }

    #[test]
    fn obstacle_half_is_absorbed() {
        let flags = half_obstacle(32, 32);
        let tree = build_tree(&flags, 64);
        let set = coalesce(&tree, 0.5);
        assert!(set.tasks.len() < tree.leaves().len());
        for task in &set.tasks {
            let fluid: usize = task
                .rects
                .iter()
                .map(|r| r.iter().filter(|&(x, y)| flags.get(x, y) == CellFlag::Fluid).count())
                .sum();
            assert_eq!(fluid, task.fluid_cell_count);
            let maximal = task.leaves.iter().any(|&l| {
                let n = &tree.nodes[l];
                n.fluid_cell_count as f64 / n.rect.cells() as f64 >= 0.5
            });
            assert!(task.fluid_fraction() >= 0.5 || maximal);
        }
        let cells: usize = set.tasks.iter().map(|t| t.cells).sum();
        assert_eq!(cells, 32 * 32);
        let work: u64 = set.tasks.iter().map(|t| t.work_estimate).sum();
        assert_eq!(work, tree.root().work_estimate);
    }

    #[test]
    fn halo_of_two_side_by_side_tasks() {
        let mut flags = FlagField::filled(16, 8, CellFlag::Fluid);
        flags.periodic_x = false;
        let tree = build_tree(&flags, 64);
        let set = TaskSet::from_leaves(&tree);
        let plan = halo_plan(&set);
        assert_eq!(plan.copies.len(), 2);
        assert!(plan.copies.iter().all(|c| c.cells.len() == 8));
        assert_eq!((plan.copies[0].src, plan.copies[0].dst), (0, 1));
        assert_eq!((plan.copies[1].src, plan.copies[1].dst), (1, 0));
        assert_eq!(set.tasks[0].halo, vec![(1, 8)]);
        assert!(halo_plan(&TaskSet::from_leaves(&build_tree(&flags, 128))).copies.is_empty());
    }

    #[test]
    fn uniform_blocks_tile() {
        let set = uniform_blocks(&FlagField::periodic(30, 20), 4, 3);
        assert_eq!(set.tasks.len(), 12);
        let owner = set.owner_map();
        assert!(owner.iter().all(|&o| o < 12));
    }

    #[test]
    fn partitioned_step_matches_monolithic() {
        let mut flags = half_obstacle(24, 18);
        flags.set(20, 9, CellFlag::Obstacle);
        let params = FluidParams::new(0.7, [1e-5, 2e-6], [0.0; 2], 20.0, 0.05).unwrap();
        let flags = Arc::new(flags);
        let grid = DistributionGrid::from_macroscopic(flags.clone(), &params, |x, y| {
            (1.0 + 0.01 * ((x * 7 + y * 3) % 5) as f64, [0.01 * (y as f64 / 18.0), 0.0], 20.0 + x as f64 * 0.1)
        });
        let tree = build_tree(&flags, 32);
        let set = coalesce(&tree, 0.3);
        let mut parted = PartitionedGrid::new(&grid, &set);
        let mut mono = grid.clone();
        step_monolithic(&mut mono, &params, 5).unwrap();
        for _ in 0..5 {
            parted.step(&params).unwrap();
        }
        let back = parted.to_grid();
        assert_eq!(back.time, 5);
        assert!(back.f.iter().zip(&mono.f).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(back.g.iter().zip(&mono.g).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn tree_json_round_trips() {
        let tree = build_tree(&FlagField::periodic(16, 16), 32);
        let back: PartitionTree = serde_json::from_str(&tree.to_json()).unwrap();
        assert_eq!(back, tree);
    }
}
