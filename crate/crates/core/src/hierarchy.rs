//! Budget-driven coarse-to-fine simulation.
//!
//! Every steering response starts with a fast solve at level 0. While the
//! wall-clock budget lasts, the grid is refined by the plan's ratio and the
//! finer solve is warm-started from the interpolated coarser solution.
//!
//! Levels use diffusive scaling: τ is kept, so the lattice viscosity is the
//! same on every level, while lattice velocities shrink by the ratio and the
//! body force by its cube. The physical flow is the same at every level.

use crate::lattice::{
    self, macroscopics, rasterize, DistributionGrid,
    FlagField, FluidParams, LatticeError, MacroFields, StepScratch, Q, QT,
};
use crate::scene::Scene;
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HierarchyError {
    #[error("level {level}: {source}")]
    Solver {
        level: u32,
        #[source]
        source: LatticeError,
    },
    #[error("run cancelled during level {level}")]
    Cancelled { level: u32 },
    #[error("invalid level plan: {0}")]
    InvalidPlan(String),
}

/// Refinement plan for one steering response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LevelPlan {
    pub base_resolution: [usize; 2],
    pub refinement_ratio: usize,
    pub max_level: u32,
    pub budget_ms: u64,
    pub steps_per_check: usize,
    /// A level is quasi-steady once the per-step velocity change drops below
    /// this value, given in level-0 lattice units and scaled by `ratio^-3L`
    /// on level `L` (velocity shrinks by the ratio, time steps by its square).
    pub residual_threshold: f64,
    /// Step cap per level; `None` means five times the level's larger
    /// dimension.
    pub max_steps_per_level: Option<usize>,
    pub memory_cap_bytes: u64,
}

impl Default for LevelPlan {
    fn default() -> Self {
        Self {
            base_resolution: [48, 48],
            refinement_ratio: 2,
            max_level: 2,
            budget_ms: 1000,
            steps_per_check: 20,
            residual_threshold: 1e-6,
            max_steps_per_level: None,
            memory_cap_bytes: 1 << 30,
        }
    }
}

impl LevelPlan {
    pub fn validate(&self) -> Result<(), HierarchyError> {
        let [nx, ny] = self.base_resolution;
        if nx < 16 || ny < 16 {
            return Err(HierarchyError::InvalidPlan(format!(
                "base resolution {nx}x{ny} is below 16x16"
            )));
        }
        if self.refinement_ratio < 2 {
            return Err(HierarchyError::InvalidPlan("refinement ratio must be at least 2".into()));
        }
        if self.steps_per_check == 0 {
            return Err(HierarchyError::InvalidPlan("steps_per_check must be positive".into()));
        }
        if !(self.residual_threshold > 0.0) {
            return Err(HierarchyError::InvalidPlan("residual threshold must be positive".into()));
        }
        let [fx, fy] = self
            .resolution(self.max_level)
            .ok_or_else(|| HierarchyError::InvalidPlan("finest resolution overflows".into()))?;
        // Two population arrays plus the step scratch copy.
        let bytes = (fx as u128) * (fy as u128) * ((Q + QT) as u128) * 8 * 2;
        if bytes > self.memory_cap_bytes as u128 {
            return Err(HierarchyError::InvalidPlan(format!(
                "finest grid {fx}x{fy} needs {bytes} bytes, cap is {}",
                self.memory_cap_bytes
            )));
        }
        Ok(())
    }

    /// Grid size at `level`.
    pub fn resolution(&self, level: u32) -> Option<[usize; 2]> {
        let factor = self.refinement_ratio.checked_pow(level)?;
        Some([
            self.base_resolution[0].checked_mul(factor)?,
            self.base_resolution[1].checked_mul(factor)?,
        ])
    }

    /// Residual threshold in the lattice units of `level`.
    pub fn threshold_at(&self, level: u32) -> f64 {
        self.residual_threshold / (self.refinement_ratio as f64).powi(3 * level as i32)
    }

    pub fn step_cap(&self, level: u32) -> usize {
        self.max_steps_per_level.unwrap_or_else(|| {
            let [nx, ny] = self.resolution(level).unwrap_or(self.base_resolution);
            5 * nx.max(ny)
        })
    }
}

/// Outcome of one level of a budgeted run.
#[derive(Debug, Clone)]
pub struct LevelResult {
    pub level: u32,
    pub grid: Arc<DistributionGrid>,
    /// Lattice parameters the level was run with.
    pub params: FluidParams,
    pub residual: f64,
    pub steps: usize,
    pub converged: bool,
    pub elapsed_ms: f64,
}

/// Cooperative cancellation flag checked at `steps_per_check` boundaries.
#[derive(Debug, Clone, Default)]
pub struct CancelToken(Arc<AtomicBool>);

impl CancelToken {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn cancel(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_cancelled(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }
}

/// Lattice parameters for `level` under diffusive scaling.
pub fn params_for_level(base: &FluidParams, ratio: usize, level: u32) -> FluidParams {
    let r = (ratio as f64).powi(level as i32);
    FluidParams {
        inflow_velocity: base.inflow_velocity.map(|v| v / r),
        body_force: base.body_force.map(|v| v / (r * r * r)),
        ..*base
    }
}

/// Largest per-component velocity difference over flow cells.
pub fn velocity_change(current: &MacroFields, previous: &MacroFields) -> f64 {
    current
        .flags
        .cells
        .iter()
        .enumerate()
        .filter(|(_, f)| f.is_flow())
        .map(|(c, _)| {
            let a = current.u[c];
            let b = previous.u[c];
            (a[0] - b[0]).abs().max((a[1] - b[1]).abs())
        })
        .fold(0.0, f64::max)
}

/// Max-norm of the velocity change between `previous` and the grid's
/// current state.
pub fn residual(grid: &DistributionGrid, previous: &MacroFields) -> f64 {
    assert_eq!(
        (grid.nx, grid.ny),
        (previous.nx, previous.ny),
        "residual needs matching shapes"
    );
    velocity_change(&macroscopics(grid), previous)
}

/// Interpolate coarse macroscopics onto `fine_flags` and start the fine grid
/// at the corresponding equilibria. See [`prolongate_scaled`].
pub fn prolongate(
    coarse: &DistributionGrid,
    ratio: usize,
    fine_flags: Arc<FlagField>,
    fine_params: &FluidParams,
) -> DistributionGrid {
    prolongate_scaled(coarse, ratio, fine_flags, fine_params, 1.0)
}

/// Bilinear prolongation from coarse cell centers, multiplying velocities by
/// `velocity_scale` to convert lattice units. Non-periodic edges extrapolate
/// linearly; periodic axes wrap. Flags come from the caller (re-rasterized,
/// never upsampled).
pub fn prolongate_scaled(
    coarse: &DistributionGrid,
    ratio: usize,
    fine_flags: Arc<FlagField>,
    fine_params: &FluidParams,
    velocity_scale: f64,
) -> DistributionGrid {
    assert!(ratio >= 2, "prolongation ratio must be at least 2");
    assert_eq!(
        (fine_flags.nx, fine_flags.ny),
        (coarse.nx * ratio, coarse.ny * ratio),
        "fine flags must match the refined shape"
    );
    let m = macroscopics(coarse);
    let sx = Sampler::new(coarse.nx, ratio, coarse.flags.periodic_x);
    let sy = Sampler::new(coarse.ny, ratio, coarse.flags.periodic_y);
    let lerp = |vals: &dyn Fn(usize) -> f64, fx: usize, fy: usize| {
        let (x0, x1, tx) = sx.at(fx);
        let (y0, y1, ty) = sy.at(fy);
        let at = |x: usize, y: usize| vals(y * coarse.nx + x);
        let bottom = at(x0, y0) + tx * (at(x1, y0) - at(x0, y0));
        let top = at(x0, y1) + tx * (at(x1, y1) - at(x0, y1));
        bottom + ty * (top - bottom)
    };
    let mut fine = DistributionGrid::from_macroscopic(Arc::clone(&fine_flags), fine_params, |fx, fy| {
        let rho = lerp(&|c| m.rho[c], fx, fy);
        let ux = lerp(&|c| m.u[c][0], fx, fy) * velocity_scale;
        let uy = lerp(&|c| m.u[c][1], fx, fy) * velocity_scale;
        let temp = lerp(&|c| m.temp[c], fx, fy);
        (rho, [ux, uy], temp)
    });
    // Solid cells keep the rest state from `from_macroscopic`; manikin
    // temperatures carry over since patch ids are resolution independent.
    for (t, src) in fine.patch_temps.iter_mut().zip(coarse.patch_temps.iter()) {
        *t = *src;
    }
    fine.level = coarse.level + 1;
    fine.time = 0;
    debug_assert!(fine.f.len() == fine.cells() * Q);
    fine
}

/// Maps a fine cell index along one axis to two coarse neighbours and a
/// weight.
struct Sampler {
    n: usize,
    ratio: usize,
    periodic: bool,
}

impl Sampler {
    fn new(n: usize, ratio: usize, periodic: bool) -> Self {
        Self { n, ratio, periodic }
    }

    fn at(&self, fine: usize) -> (usize, usize, f64) {
        // Fine center in coarse index space: (fine + ½)/ratio − ½.
        let pos = (2 * fine + 1) as f64 / (2 * self.ratio) as f64 - 0.5;
        if self.periodic {
            let i0 = pos.floor();
            let t = pos - i0;
            let i0 = (i0 as i64).rem_euclid(self.n as i64) as usize;
            (i0, (i0 + 1) % self.n, t)
        } else {
            let i0 = (pos.floor().max(0.0) as usize).min(self.n - 2);
            (i0, i0 + 1, pos - i0 as f64)
        }
    }
}

/// Cold-start grid for `level`: fluid at rest, ambient temperature.
pub fn cold_start(scene: &Scene, level: u32) -> Result<(DistributionGrid, FluidParams), HierarchyError> {
    let plan = &scene.plan;
    let [nx, ny] = plan
        .resolution(level)
        .ok_or_else(|| HierarchyError::InvalidPlan("resolution overflow".into()))?;
    let flags = rasterize(scene, nx, ny).map_err(|source| HierarchyError::Solver { level, source })?;
    let params = params_for_level(&scene.params, plan.refinement_ratio, level);
    let mut grid = DistributionGrid::at_rest(Arc::new(flags), &params);
    grid.level = level;
    Ok((grid, params))
}

/// Warm-start grid for `coarse.level + 1` from a coarse solution.
pub fn refine(scene: &Scene, coarse: &DistributionGrid) -> Result<(DistributionGrid, FluidParams), HierarchyError> {
    let level = coarse.level + 1;
    let ratio = scene.plan.refinement_ratio;
    let (nx, ny) = (coarse.nx * ratio, coarse.ny * ratio);
    let flags = rasterize(scene, nx, ny).map_err(|source| HierarchyError::Solver { level, source })?;
    let params = params_for_level(&scene.params, ratio, level);
    let fine = prolongate_scaled(coarse, ratio, Arc::new(flags), &params, 1.0 / ratio as f64);
    Ok((fine, params))
}

/// How one level run ended.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelRun {
    pub steps: usize,
    pub residual: f64,
    pub converged: bool,
}

/// Step `grid` until quasi-steady, the step cap, the deadline, or
/// cancellation, checking every `steps_per_check` steps.
pub fn run_level(
    grid: &mut DistributionGrid,
    params: &FluidParams,
    plan: &LevelPlan,
    deadline: Option<Instant>,
    cancel: &CancelToken,
) -> Result<LevelRun, HierarchyError> {
    let level = grid.level;
    let cap = plan.step_cap(level);
    let threshold = plan.threshold_at(level);
    let mut scratch = StepScratch::for_grid(grid);
    let mut previous = macroscopics(grid);
    let mut steps = 0;
    let mut residual_value = f64::INFINITY;
    while steps < cap {
        let chunk = plan.steps_per_check.min(cap - steps);
        for _ in 0..chunk {
            lattice::step_into(grid, params, &mut scratch)
                .map_err(|source| HierarchyError::Solver { level, source })?;
        }
        steps += chunk;
        let current = macroscopics(grid);
        residual_value = velocity_change(&current, &previous) / chunk as f64;
        previous = current;
        if residual_value < threshold {
            return Ok(LevelRun {
                steps,
                residual: residual_value,
                converged: true,
            });
        }
        if cancel.is_cancelled() {
            return Err(HierarchyError::Cancelled { level });
        }
        if deadline.is_some_and(|d| Instant::now() >= d) {
            break;
        }
    }
    Ok(LevelRun {
        steps,
        residual: residual_value,
        converged: false,
    })
}

/// Run the scene coarse-to-fine within its plan's budget, emitting one
/// [`LevelResult`] per completed level in increasing level order.
///
/// Level 0 always runs to quasi-steadiness or its step cap regardless of the
/// budget, so every response yields at least one result. Finer levels stop
/// at the deadline and are still emitted. Returns the last emitted result.
pub fn run_budgeted(
    scene: &Scene,
    emit: &mut dyn FnMut(&LevelResult),
    cancel: &CancelToken,
) -> Result<LevelResult, HierarchyError> {
    let plan = &scene.plan;
    plan.validate()?;
    let start = Instant::now();
    let deadline = start + Duration::from_millis(plan.budget_ms);
    let (mut grid, mut params) = cold_start(scene, 0)?;
    loop {
        let level = grid.level;
        let level_deadline = (level > 0).then_some(deadline);
        let run = run_level(&mut grid, &params, plan, level_deadline, cancel)?;
        let result = LevelResult {
            level,
            grid: Arc::new(grid),
            params,
            residual: run.residual,
            steps: run.steps,
            converged: run.converged,
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        emit(&result);
        if level >= plan.max_level || Instant::now() >= deadline || !run.converged && level > 0 {
            return Ok(result);
        }
        if cancel.is_cancelled() {
            return Err(HierarchyError::Cancelled { level });
        }
        let (next, next_params) = refine(scene, &result.grid)?;
        grid = next;
        params = next_params;
    }
}
