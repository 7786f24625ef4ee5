//! Sort-last composition of per-leaf tiles over the partition tree.
//!
//! Each internal node's join depends on its children's joins, so disjoint
//! subtrees compose concurrently on the scheduler. Tiles of a 2D
//! orthographic view never overlap, so a join is a pure placement and any
//! schedule that respects the tree yields the same frame.

use crate::lattice::FieldId;
use crate::partition::{Axis, PartitionTree};
use crate::scheduler::{self, RoleConfig, SchedError, TaskGraph, TaskTrace};
use crate::viz::{color_map, Colormap, ScalarField, SubImage, VizError};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ComposeError {
    #[error("no tile for leaf node {0}")]
    MissingTile(usize),
    #[error(transparent)]
    Viz(#[from] VizError),
    #[error(transparent)]
    Sched(#[from] SchedError),
}

/// A composed picture of the whole domain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub pixels: Vec<u8>,
    pub width: usize,
    pub height: usize,
    pub seq: u64,
    pub level: u32,
    pub field: FieldId,
    pub timestamp_ms: u64,
}

impl Frame {
    pub fn from_image(img: SubImage, seq: u64, level: u32, field: FieldId) -> Self {
        let timestamp_ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_millis() as u64);
        Self {
            pixels: img.pixels,
            width: img.w,
            height: img.h,
            seq,
            level,
            field,
            timestamp_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderStyle {
    pub field: FieldId,
    /// Fixed colour range; `None` spans the non-solid values.
    pub range: Option<(f64, f64)>,
    pub colormap: Colormap,
    pub px_per_cell: usize,
}

impl Default for RenderStyle {
    fn default() -> Self {
        Self {
            field: FieldId::Ux,
            range: None,
            colormap: Colormap::diverging(),
            px_per_cell: 4,
        }
    }
}

/// Render the whole field as one tile; the reference for composition.
pub fn render_monolithic(field: &ScalarField, style: &RenderStyle) -> Result<SubImage, VizError> {
    let range = style.range.unwrap_or_else(|| field.auto_range());
    let rect = crate::partition::Rect::new(0, 0, field.nx, field.ny);
    color_map(field, &rect, range, &style.colormap, style.px_per_cell)
}

/// One tile per leaf, in [`PartitionTree::leaves`] order, rendered as
/// independent scheduler tasks. The colour range is resolved once so all
/// tiles share it.
pub fn render_leaves(
    tree: &PartitionTree,
    field: &ScalarField,
    style: &RenderStyle,
    roles: &RoleConfig,
) -> Result<Vec<SubImage>, ComposeError> {
    assert_eq!((tree.nx, tree.ny), (field.nx, field.ny), "tree does not cover the field");
    let range = style.range.unwrap_or_else(|| field.auto_range());
    let leaves = tree.leaves();
    let graph = TaskGraph {
        tasks: leaves
            .iter()
            .map(|&l| scheduler::GraphTask {
                work: tree.nodes[l].rect.cells() as u64,
                deps: Vec::new(),
                node: Some(l),
            })
            .collect(),
    };
    let out = scheduler::run(&graph, leaves.clone(), roles, |_, leaf: usize, _: &[Arc<SubImage>]| {
        let mut tile = color_map(field, &tree.nodes[leaf].rect, range, &style.colormap, style.px_per_cell)
            .map_err(|e| e.to_string())?;
        tile.node = leaf;
        Ok(tile)
    })?;
    Ok(out
        .results
        .into_iter()
        .map(|r| Arc::try_unwrap(r).unwrap_or_else(|r| (*r).clone()))
        .collect())
}

/// One join: the node it produces and the two children it places.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Join {
    pub node: usize,
    pub children: [usize; 2],
}

/// Joins grouped into rounds, deepest parents first. Joins within a round
/// touch disjoint subtrees.
pub fn join_rounds(tree: &PartitionTree) -> Vec<Vec<Join>> {
    let mut rounds: Vec<Vec<Join>> = Vec::new();
    let internal: Vec<&crate::partition::TreeNode> = tree.nodes.iter().filter(|n| !n.is_leaf()).collect();
    let Some(deepest) = internal.iter().map(|n| n.depth).max() else {
        return rounds;
    };
    for depth in (0..=deepest).rev() {
        let mut round: Vec<Join> = internal
            .iter()
            .filter(|n| n.depth == depth)
            .map(|n| Join {
                node: n.id,
                children: n.children.expect("internal node"),
            })
            .collect();
        round.sort_by_key(|j| j.node);
        rounds.push(round);
    }
    rounds
}

/// `(critical path joins, total joins)`.
pub fn composition_cost(tree: &PartitionTree) -> (u32, usize) {
    (tree.height(), tree.leaves().len() - 1)
}

fn join(node: usize, a: &SubImage, b: &SubImage) -> SubImage {
    let x0 = a.x0.min(b.x0);
    let y0 = a.y0.min(b.y0);
    let w = (a.x0 + a.w).max(b.x0 + b.w) - x0;
    let h = (a.y0 + a.h).max(b.y0 + b.h) - y0;
    let mut out = SubImage::blank(node, x0, y0, w, h);
    out.blit(a);
    out.blit(b);
    out
}

/// Result of a composition run.
pub struct Composed {
    pub image: SubImage,
    /// Internal node ids in completion order.
    pub completed: Vec<usize>,
    pub trace: TaskTrace,
}

/// Join tiles bottom-up as a task graph with child-before-parent
/// dependencies.
pub fn compose(tree: &PartitionTree, tiles: Vec<SubImage>, roles: &RoleConfig) -> Result<Composed, ComposeError> {
    let mut by_node: HashMap<usize, SubImage> = tiles.into_iter().map(|t| (t.node, t)).collect();
    let leaves = tree.leaves();
    if let Some(&missing) = leaves.iter().find(|l| !by_node.contains_key(l)) {
        return Err(ComposeError::MissingTile(missing));
    }
    if leaves.len() == 1 {
        let image = by_node.remove(&leaves[0]).expect("checked");
        return Ok(Composed {
            image,
            completed: Vec::new(),
            trace: TaskTrace::default(),
        });
    }

    // One task per internal node, deepest joins first so claims follow the
    // join rounds; a child that is a leaf arrives as payload, an internal
    // child as a dependency result.
    let order: Vec<usize> = join_rounds(tree).into_iter().flatten().map(|j| j.node).collect();
    let task_of: HashMap<usize, usize> = order.iter().enumerate().map(|(t, &n)| (n, t)).collect();
    let mut graph = TaskGraph::default();
    let mut payloads = Vec::with_capacity(order.len());
    for &n in &order {
        let [a, b] = tree.nodes[n].children.expect("internal node");
        let deps = [a, b].iter().filter_map(|c| task_of.get(c).copied()).collect();
        graph.add(tree.nodes[n].rect.cells() as u64, deps, Some(n));
        payloads.push((n, [a, b].map(|c| by_node.remove(&c))));
    }
    let out = scheduler::run(
        &graph,
        payloads,
        roles,
        |_, (node, leaf_tiles): (usize, [Option<SubImage>; 2]), inputs: &[Arc<SubImage>]| {
            let mut from_deps = inputs.iter();
            let [a, b] = leaf_tiles.map(|t| t.map(Arc::new).unwrap_or_else(|| Arc::clone(from_deps.next().expect("dependency result"))));
            Ok(join(node, &a, &b))
        },
    )?;
    let completed = out
        .trace
        .events
        .iter()
        .filter(|e| e.event == scheduler::EventKind::Complete)
        .map(|e| order[e.task])
        .collect();
    let root = out.results.last().expect("root join");
    Ok(Composed {
        image: (**root).clone(),
        completed,
        trace: out.trace,
    })
}

/// Render per leaf and compose into a frame.
pub fn render_frame(
    tree: &PartitionTree,
    field: &ScalarField,
    style: &RenderStyle,
    roles: &RoleConfig,
    seq: u64,
    level: u32,
) -> Result<Frame, ComposeError> {
    let tiles = render_leaves(tree, field, style, roles)?;
    let composed = compose(tree, tiles, roles)?;
    Ok(Frame::from_image(composed.image, seq, level, style.field))
}

/// The five-leaf example tree: the domain is halved in x into `AB` (split
/// in y into `A` below `B`) and `CDE`, whose lower half `DE` is split in x
/// into `D` and `E` and whose upper half is `C`. Returns the tree and the
/// node id of each named region.
pub fn five_leaf_tree(nx: usize, ny: usize) -> (PartitionTree, HashMap<&'static str, usize>) {
    let flags = crate::lattice::FlagField::filled(nx, ny, crate::lattice::CellFlag::Fluid);
    let mut tree = PartitionTree::single(&flags);
    let [ab, cde] = tree.split_leaf(0, Axis::X, nx / 2);
    let [a, b] = tree.split_leaf(ab, Axis::Y, ny / 2);
    let [de, c] = tree.split_leaf(cde, Axis::Y, ny / 2);
    let [d, e] = tree.split_leaf(de, Axis::X, nx / 2 + nx / 4);
    tree.recount(&flags);
    let names = HashMap::from([
        ("root", 0),
        ("AB", ab),
        ("CDE", cde),
        ("DE", de),
        ("A", a),
        ("B", b),
        ("C", c),
        ("D", d),
        ("E", e),
    ]);
    (tree, names)
}
