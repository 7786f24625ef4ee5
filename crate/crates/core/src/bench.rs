//! Scheduler load-balance benchmark: the same solver steps run over
//! coalesced partition tasks or over uniform blocks of equal count.

use crate::hierarchy::{cold_start, HierarchyError};
use crate::lattice::{CellFlag, FlagField, LatticeError};
use crate::partition::{build_tree, coalesce, uniform_blocks, PartitionedGrid, TaskSet, DEFAULT_THETA, MIN_LEAF_CELLS};
use crate::scene::Scene;
use crate::scheduler::{busy_fraction, concat_traces, run, run_simulated, RoleConfig, SchedError, SchedulerRunner, TaskGraph, TaskTrace};
use serde::Serialize;
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
    #[error(transparent)]
    Sched(#[from] SchedError),
    #[error(transparent)]
    Solver(#[from] LatticeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Blocks,
    Coalesced,
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub roles: RoleConfig,
    pub layout: Layout,
    /// Solver steps; each is two task waves.
    pub steps: usize,
    /// Leaf size of the partition tree the coalesced tasks come from.
    pub max_leaf_cells: usize,
    pub theta: f64,
    pub level: u32,
    pub sleep_ns_per_work: u64,
}

impl BenchConfig {
    pub fn new(roles: RoleConfig, layout: Layout) -> Self {
        Self {
            roles,
            layout,
            steps: 20,
            max_leaf_cells: 64,
            theta: DEFAULT_THETA,
            level: 0,
            sleep_ns_per_work: 50,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub layout: Layout,
    pub n_tasks: usize,
    pub nx: usize,
    pub ny: usize,
    pub obstacle_fraction: f64,
    /// Measured on worker threads over all waves.
    pub busy_threaded: f64,
    /// Deterministic replay with task cost equal to its work estimate.
    pub busy_simulated: f64,
    /// Threaded, tasks sleeping in proportion to their work estimate.
    pub busy_sleep: f64,
    pub max_task_work: u64,
    pub total_work: u64,
    #[serde(skip)]
    pub trace: TaskTrace,
}

pub fn obstacle_fraction(flags: &FlagField) -> f64 {
    flags.count(|f| f == CellFlag::Obstacle) as f64 / flags.cells.len() as f64
}

/// `bx × by = n` with the block aspect closest to the grid's.
pub fn block_grid(n: usize, nx: usize, ny: usize) -> (usize, usize) {
    (1..=n)
        .filter(|bx| n % bx == 0)
        .map(|bx| (bx, n / bx))
        .filter(|&(bx, by)| bx <= nx && by <= ny)
        .min_by(|a, b| {
            let skew = |(bx, by): (usize, usize)| ((nx as f64 / bx as f64) / (ny as f64 / by as f64)).ln().abs();
            skew(*a).total_cmp(&skew(*b))
        })
        .unwrap_or((1, 1))
}

/// Coalesced tasks for `flags` and the uniform blocks with the same count.
pub fn task_layouts(flags: &FlagField, max_leaf_cells: usize, theta: f64) -> (TaskSet, TaskSet) {
    let tree = build_tree(flags, max_leaf_cells.max(MIN_LEAF_CELLS));
    let coalesced = coalesce(&tree, theta);
    let (bx, by) = block_grid(coalesced.tasks.len(), flags.nx, flags.ny);
    (coalesced, uniform_blocks(flags, bx, by))
}

/// Virtual-time busy fraction of one task wave where each task costs its
/// work estimate plus `overhead` microseconds.
pub fn simulated_busy(tasks: &TaskSet, roles: &RoleConfig, overhead: u64) -> Result<(f64, TaskTrace), SchedError> {
    let graph = TaskGraph::from_task_set(tasks);
    let n = graph.len();
    let out = run_simulated(&graph, vec![(); n], roles, |_, (), _: &[std::sync::Arc<()>]| Ok(()), |id| {
        graph.tasks[id].work + overhead
    })?;
    Ok((busy_fraction(&out.trace)?, out.trace))
}

/// Threaded busy fraction of one task wave where each task sleeps for
/// `ns_per_work` nanoseconds per unit of its work estimate. Independent of
/// the number of cores, unlike running the solver itself.
pub fn sleep_busy(tasks: &TaskSet, roles: &RoleConfig, ns_per_work: u64) -> Result<(f64, TaskTrace), SchedError> {
    let graph = TaskGraph::from_task_set(tasks);
    let n = graph.len();
    let out = run(&graph, vec![(); n], roles, |id, (), _: &[std::sync::Arc<()>]| {
        std::thread::sleep(Duration::from_nanos(graph.tasks[id].work * ns_per_work));
        Ok(())
    })?;
    Ok((busy_fraction(&out.trace)?, out.trace))
}

pub fn bench_sched(scene: &Scene, config: &BenchConfig) -> Result<BenchReport, BenchError> {
    let (grid, params) = cold_start(scene, config.level)?;
    let (coalesced, blocks) = task_layouts(&grid.flags, config.max_leaf_cells, config.theta);
    let tasks = match config.layout {
        Layout::Blocks => blocks,
        Layout::Coalesced => coalesced,
    };
    let graph = TaskGraph::from_task_set(&tasks);
    let runner = SchedulerRunner::new(config.roles.clone(), graph.clone());
    let mut part = PartitionedGrid::new(&grid, &tasks);
    for _ in 0..config.steps {
        part.step_with(&params, &runner)?;
    }
    let trace = concat_traces(&runner.take_traces());
    let busy_threaded = busy_fraction(&trace)?;
    let (busy_simulated, _) = simulated_busy(&tasks, &config.roles, 0)?;
    let (busy_sleep, _) = sleep_busy(&tasks, &config.roles, config.sleep_ns_per_work)?;
    Ok(BenchReport {
        layout: config.layout,
        n_tasks: tasks.tasks.len(),
        nx: grid.nx,
        ny: grid.ny,
        obstacle_fraction: obstacle_fraction(&grid.flags),
        busy_threaded,
        busy_simulated,
        busy_sleep,
        max_task_work: graph.tasks.iter().map(|t| t.work).max().unwrap_or(0),
        total_work: graph.tasks.iter().map(|t| t.work).sum(),
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_grid_factors_exactly() {
        assert_eq!(block_grid(12, 64, 64), (3, 4));
        assert_eq!(block_grid(16, 64, 64), (4, 4));
        assert_eq!(block_grid(7, 64, 64), (1, 7));
        assert_eq!(block_grid(8, 256, 32), (8, 1));
        let (bx, by) = block_grid(30, 64, 32);
        assert_eq!(bx * by, 30);
    }

    #[test]
    fn layouts_have_equal_counts() {
        let mut flags = FlagField::periodic(32, 32);
        for y in 0..32 {
            for x in 0..20 {
                flags.set(x, y, CellFlag::Obstacle);
            }
        }
        let (c, b) = task_layouts(&flags, 64, DEFAULT_THETA);
        assert_eq!(c.tasks.len(), b.tasks.len());
        assert!(obstacle_fraction(&flags) > 0.6);
    }
}
