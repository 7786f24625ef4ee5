//! D2Q9 BGK lattice-Boltzmann solver with a passive D2Q5 temperature scalar.
//!
//! Direction numbering:
//! ```text
//!   6   2   5
//!    \  |  /
//!   3 - 0 - 1
//!    /  |  \
//!   7   4   8
//! ```
//! The temperature lattice uses directions 0..5 of the same table.
//!
//! A step is split into a per-cell collision and a per-cell pull-streaming
//! update. Both are pure functions of a cell and (for streaming) its eight
//! neighbours' post-collision state, which is what lets [`crate::partition`]
//! reproduce monolithic stepping bit for bit.

mod dump;
mod raster;

pub use dump::{read_field_dump, write_field_dump, FieldDump, FieldId};
pub use raster::rasterize;

use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

/// Number of flow populations per cell.
pub const Q: usize = 9;
/// Number of temperature populations per cell.
pub const QT: usize = 5;

/// Lattice velocity of each direction.
pub const E: [[i32; 2]; Q] = [
    [0, 0],
    [1, 0],
    [0, 1],
    [-1, 0],
    [0, -1],
    [1, 1],
    [-1, 1],
    [-1, -1],
    [1, -1],
];

pub const W: [f64; Q] = [
    4.0 / 9.0,
    1.0 / 9.0,
    1.0 / 9.0,
    1.0 / 9.0,
    1.0 / 9.0,
    1.0 / 36.0,
    1.0 / 36.0,
    1.0 / 36.0,
    1.0 / 36.0,
];

/// D2Q5 weights (cs² = 1/3).
pub const WT: [f64; QT] = [1.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0];

/// Opposite direction, used by bounce-back.
pub const OPP: [usize; Q] = [0, 3, 4, 1, 2, 7, 8, 5, 6];

/// Upper bound on the inflow speed; beyond it the low-Mach expansion breaks.
pub const MAX_INFLOW_SPEED: f64 = 0.3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LatticeError {
    #[error("relaxation time tau = {0} must exceed 0.5")]
    UnstableTau(f64),
    #[error("inflow speed {0} must stay below {MAX_INFLOW_SPEED} lattice units")]
    InflowTooFast(f64),
    #[error("thermal diffusivity {0} must be positive and finite")]
    BadDiffusivity(f64),
    #[error("parameter {0} is not finite")]
    NonFinite(&'static str),
    #[error("numerical blowup at step {time} in cell ({x}, {y})")]
    NumericalBlowup { time: u64, x: usize, y: usize },
    #[error("degenerate geometry: object {0} has non-positive size")]
    DegenerateGeometry(String),
    #[error("grid shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
}

/// Flow and thermal parameters in lattice units (temperatures in °C).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawFluidParams")]
pub struct FluidParams {
    pub tau: f64,
    pub body_force: [f64; 2],
    pub inflow_velocity: [f64; 2],
    pub ambient_temp: f64,
    pub thermal_diffusivity: f64,
}

#[derive(Deserialize)]
struct RawFluidParams {
    tau: f64,
    #[serde(default)]
    body_force: [f64; 2],
    #[serde(default)]
    inflow_velocity: [f64; 2],
    #[serde(default = "default_ambient")]
    ambient_temp: f64,
    #[serde(default = "default_diffusivity")]
    thermal_diffusivity: f64,
}

fn default_ambient() -> f64 {
    20.0
}

fn default_diffusivity() -> f64 {
    0.05
}

impl TryFrom<RawFluidParams> for FluidParams {
    type Error = LatticeError;

    fn try_from(raw: RawFluidParams) -> Result<Self, Self::Error> {
        FluidParams::new(
            raw.tau,
            raw.body_force,
            raw.inflow_velocity,
            raw.ambient_temp,
            raw.thermal_diffusivity,
        )
    }
}

impl FluidParams {
    pub fn new(
        tau: f64,
        body_force: [f64; 2],
        inflow_velocity: [f64; 2],
        ambient_temp: f64,
        thermal_diffusivity: f64,
    ) -> Result<Self, LatticeError> {
        if !tau.is_finite() || tau <= 0.5 {
            return Err(LatticeError::UnstableTau(tau));
        }
        if !body_force.iter().all(|v| v.is_finite()) {
            return Err(LatticeError::NonFinite("body_force"));
        }
        if !inflow_velocity.iter().all(|v| v.is_finite()) {
            return Err(LatticeError::NonFinite("inflow_velocity"));
        }
        let speed = inflow_velocity[0].hypot(inflow_velocity[1]);
        if speed >= MAX_INFLOW_SPEED {
            return Err(LatticeError::InflowTooFast(speed));
        }
        if !ambient_temp.is_finite() {
            return Err(LatticeError::NonFinite("ambient_temp"));
        }
        if !thermal_diffusivity.is_finite() || thermal_diffusivity <= 0.0 {
            return Err(LatticeError::BadDiffusivity(thermal_diffusivity));
        }
        Ok(Self {
            tau,
            body_force,
            inflow_velocity,
            ambient_temp,
            thermal_diffusivity,
        })
    }

    /// Kinematic viscosity ν = (τ − ½)/3.
    pub fn viscosity(&self) -> f64 {
        (self.tau - 0.5) / 3.0
    }

    /// Relaxation time of the temperature populations.
    pub fn thermal_tau(&self) -> f64 {
        0.5 + 3.0 * self.thermal_diffusivity
    }
}

impl Default for FluidParams {
    fn default() -> Self {
        Self {
            tau: 0.8,
            body_force: [0.0, 0.0],
            inflow_velocity: [0.05, 0.0],
            ambient_temp: default_ambient(),
            thermal_diffusivity: default_diffusivity(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CellFlag {
    Fluid,
    Obstacle,
    Inflow,
    Outflow,
    Wall,
    /// Boundary cell of a manikin, carrying its surface-patch id.
    ThermalActive(u32),
}

impl CellFlag {
    /// Cells that reflect populations instead of evolving them.
    #[inline]
    pub fn is_solid(self) -> bool {
        matches!(
            self,
            CellFlag::Obstacle | CellFlag::Wall | CellFlag::ThermalActive(_)
        )
    }

    /// Cells whose populations carry the flow (fluid, inflow and outflow).
    #[inline]
    pub fn is_flow(self) -> bool {
        !self.is_solid()
    }
}

/// Cell flags plus the domain topology they live on.
///
/// Flags are shared immutably between grids; a geometry edit produces a new
/// field instead of mutating one in place.
#[derive(Debug, Clone, PartialEq)]
pub struct FlagField {
    pub nx: usize,
    pub ny: usize,
    pub periodic_x: bool,
    pub periodic_y: bool,
    pub cells: Vec<CellFlag>,
}

impl FlagField {
    pub fn filled(nx: usize, ny: usize, flag: CellFlag) -> Self {
        Self {
            nx,
            ny,
            periodic_x: false,
            periodic_y: false,
            cells: vec![flag; nx * ny],
        }
    }

    /// All-fluid, doubly periodic domain.
    pub fn periodic(nx: usize, ny: usize) -> Self {
        Self {
            periodic_x: true,
            periodic_y: true,
            ..Self::filled(nx, ny, CellFlag::Fluid)
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.nx + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> CellFlag {
        self.cells[self.index(x, y)]
    }

    pub fn set(&mut self, x: usize, y: usize, flag: CellFlag) {
        let i = self.index(x, y);
        self.cells[i] = flag;
    }

    /// Index of the cell at `(x + dx, y + dy)`, wrapping periodic axes.
    /// `None` when the offset leaves a non-periodic axis.
    #[inline]
    pub fn offset(&self, x: usize, y: usize, dx: i32, dy: i32) -> Option<usize> {
        let nx = self.nx as i64;
        let ny = self.ny as i64;
        let mut xx = x as i64 + dx as i64;
        let mut yy = y as i64 + dy as i64;
        if xx < 0 || xx >= nx {
            if !self.periodic_x {
                return None;
            }
            xx = xx.rem_euclid(nx);
        }
        if yy < 0 || yy >= ny {
            if !self.periodic_y {
                return None;
            }
            yy = yy.rem_euclid(ny);
        }
        Some(yy as usize * self.nx + xx as usize)
    }

    /// Pull-source table: entry `i` is the cell a population moving in
    /// direction `i` arrives from.
    pub fn pull_sources(&self, x: usize, y: usize) -> [Option<usize>; Q] {
        let mut out = [None; Q];
        for (i, e) in E.iter().enumerate() {
            out[i] = self.offset(x, y, -e[0], -e[1]);
        }
        out
    }

    pub fn count(&self, pred: impl Fn(CellFlag) -> bool) -> usize {
        self.cells.iter().filter(|&&c| pred(c)).count()
    }

    /// Largest manikin surface-patch id present, if any.
    pub fn max_patch_id(&self) -> Option<u32> {
        self.cells
            .iter()
            .filter_map(|c| match c {
                CellFlag::ThermalActive(p) => Some(*p),
                _ => None,
            })
            .max()
    }
}

/// D2Q9 BGK equilibrium population for direction `i`.
#[inline]
pub fn equilibrium(rho: f64, u: [f64; 2], i: usize) -> f64 {
    let eu = E[i][0] as f64 * u[0] + E[i][1] as f64 * u[1];
    let uu = u[0] * u[0] + u[1] * u[1];
    W[i] * rho * (1.0 + 3.0 * eu + 4.5 * eu * eu - 1.5 * uu)
}

/// D2Q5 advection-diffusion equilibrium for direction `i`.
#[inline]
pub fn thermal_equilibrium(temp: f64, u: [f64; 2], i: usize) -> f64 {
    let eu = E[i][0] as f64 * u[0] + E[i][1] as f64 * u[1];
    WT[i] * temp * (1.0 + 3.0 * eu)
}

pub fn equilibrium_set(rho: f64, u: [f64; 2]) -> [f64; Q] {
    std::array::from_fn(|i| equilibrium(rho, u, i))
}

pub fn thermal_equilibrium_set(temp: f64, u: [f64; 2]) -> [f64; QT] {
    std::array::from_fn(|i| thermal_equilibrium(temp, u, i))
}

/// Simulation state at one refinement level.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionGrid {
    pub nx: usize,
    pub ny: usize,
    /// Flow populations, `Q` per cell, cell index `y * nx + x`.
    pub f: Vec<f64>,
    /// Temperature populations, `QT` per cell.
    pub g: Vec<f64>,
    pub flags: Arc<FlagField>,
    /// Dirichlet temperature per manikin surface patch.
    pub patch_temps: Vec<f64>,
    /// Temperature reported for solid cells.
    pub ambient_temp: f64,
    pub level: u32,
    pub time: u64,
}

impl DistributionGrid {
    /// Fluid at rest with unit density at ambient temperature; inflow cells
    /// start at their prescribed equilibrium.
    pub fn at_rest(flags: Arc<FlagField>, params: &FluidParams) -> Self {
        Self::from_macroscopic(flags, params, |_, _| (1.0, [0.0, 0.0], params.ambient_temp))
    }

    /// Build a grid whose populations are the equilibria of a macroscopic
    /// initializer `init(x, y) -> (rho, u, temp)`.
    pub fn from_macroscopic(
        flags: Arc<FlagField>,
        params: &FluidParams,
        mut init: impl FnMut(usize, usize) -> (f64, [f64; 2], f64),
    ) -> Self {
        let (nx, ny) = (flags.nx, flags.ny);
        let n = nx * ny;
        let mut f = vec![0.0; n * Q];
        let mut g = vec![0.0; n * QT];
        for y in 0..ny {
            for x in 0..nx {
                let c = y * nx + x;
                let (rho, u, temp) = match flags.cells[c] {
                    CellFlag::Inflow => (1.0, params.inflow_velocity, params.ambient_temp),
                    flag if flag.is_solid() => (1.0, [0.0, 0.0], params.ambient_temp),
                    _ => init(x, y),
                };
                f[c * Q..(c + 1) * Q].copy_from_slice(&equilibrium_set(rho, u));
                g[c * QT..(c + 1) * QT].copy_from_slice(&thermal_equilibrium_set(temp, u));
            }
        }
        let patches = flags.max_patch_id().map_or(0, |p| p as usize + 1);
        Self {
            nx,
            ny,
            f,
            g,
            flags,
            patch_temps: vec![params.ambient_temp; patches],
            ambient_temp: params.ambient_temp,
            level: 0,
            time: 0,
        }
    }

    #[inline]
    pub fn cells(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn populations(&self, cell: usize) -> &[f64] {
        &self.f[cell * Q..(cell + 1) * Q]
    }

    /// Total mass Σ_cells Σ_i f_i over flow cells.
    pub fn total_mass(&self) -> f64 {
        self.flags
            .cells
            .iter()
            .enumerate()
            .filter(|(_, flag)| flag.is_flow())
            .map(|(c, _)| self.populations(c).iter().sum::<f64>())
            .sum()
    }

    /// Debug verification: every flow population finite and non-negative.
    pub fn verify_nonnegative(&self) -> Result<(), (usize, usize)> {
        for (c, flag) in self.flags.cells.iter().enumerate() {
            if flag.is_flow() && self.populations(c).iter().any(|&v| !(v >= 0.0)) {
                return Err((c % self.nx, c / self.nx));
            }
        }
        Ok(())
    }

    /// Advance one step; see [`step`].
    pub fn step(&mut self, params: &FluidParams) -> Result<(), LatticeError> {
        let mut scratch = StepScratch::for_grid(self);
        step_into(self, params, &mut scratch)
    }
}

/// Collision parameters shared by every cell of a step.
#[derive(Debug, Clone, Copy)]
pub struct CollisionConsts {
    inv_tau: f64,
    inv_tau_t: f64,
    force_prefactor: f64,
    force: [f64; 2],
}

impl CollisionConsts {
    pub fn new(params: &FluidParams) -> Self {
        Self {
            inv_tau: 1.0 / params.tau,
            inv_tau_t: 1.0 / params.thermal_tau(),
            force_prefactor: 1.0 - 0.5 / params.tau,
            force: params.body_force,
        }
    }
}

/// BGK collision with a Guo body-force term for one flow cell, in place.
/// Temperature populations relax toward the equilibrium advected by the
/// flow velocity.
#[inline]
pub fn collide_cell(f: &mut [f64], g: &mut [f64], k: &CollisionConsts) {
    let f: &mut [f64; Q] = f.try_into().expect("Q populations");
    let g: &mut [f64; QT] = g.try_into().expect("QT populations");
    let rho = f.iter().sum::<f64>();
    let mx = f[1] - f[3] + f[5] - f[6] - f[7] + f[8];
    let my = f[2] - f[4] + f[5] + f[6] - f[7] - f[8];
    let fx = rho * k.force[0];
    let fy = rho * k.force[1];
    let ux = (mx + 0.5 * fx) / rho;
    let uy = (my + 0.5 * fy) / rho;
    let omega = k.inv_tau;
    let pf = k.force_prefactor;
    let base = 1.0 - 1.5 * (ux * ux + uy * uy);
    let uf = ux * fx + uy * fy;

    // Opposite directions share the even part of the equilibrium and of
    // the forcing term.
    let mut pair = |i: usize, j: usize, w: f64, eu: f64, ef: f64| {
        let wr = w * rho;
        let even = wr * (base + 4.5 * eu * eu);
        let odd = wr * 3.0 * eu;
        let force_even = pf * w * (9.0 * eu * ef - 3.0 * uf);
        let force_odd = pf * w * 3.0 * ef;
        f[i] += (even + odd - f[i]) * omega + force_even + force_odd;
        f[j] += (even - odd - f[j]) * omega + force_even - force_odd;
    };
    pair(1, 3, W[1], ux, fx);
    pair(2, 4, W[2], uy, fy);
    pair(5, 7, W[5], ux + uy, fx + fy);
    pair(6, 8, W[6], uy - ux, fy - fx);
    f[0] += (W[0] * rho * base - f[0]) * omega - pf * W[0] * 3.0 * uf;

    let temp = g[0] + g[1] + g[2] + g[3] + g[4];
    let omega_t = k.inv_tau_t;
    let wt = WT[1] * temp;
    g[0] += (WT[0] * temp - g[0]) * omega_t;
    g[1] += (wt * (1.0 + 3.0 * ux) - g[1]) * omega_t;
    g[3] += (wt * (1.0 - 3.0 * ux) - g[3]) * omega_t;
    g[2] += (wt * (1.0 + 3.0 * uy) - g[2]) * omega_t;
    g[4] += (wt * (1.0 - 3.0 * uy) - g[4]) * omega_t;
}

/// Read-only view of post-collision populations, addressed by an
/// implementation-defined cell index.
pub trait PostCollision {
    fn f(&self, cell: usize) -> &[f64];
    fn g(&self, cell: usize) -> &[f64];
    fn flag(&self, cell: usize) -> CellFlag;
}

/// Stream into one cell. `sources[i]` is the index (in `post`'s numbering)
/// of the cell direction `i` pulls from; `west` is `sources[1]`.
///
/// Returns `false` when the new state is non-finite or has non-positive
/// density on a flow cell.
#[inline]
#[allow(clippy::too_many_arguments)]
pub fn stream_cell<P: PostCollision + ?Sized>(
    post: &P,
    this: usize,
    flag: CellFlag,
    sources: &[Option<usize>; Q],
    params: &FluidParams,
    patch_temps: &[f64],
    f_out: &mut [f64],
    g_out: &mut [f64],
) -> bool {
    match flag {
        CellFlag::Fluid => {
            let own_f = post.f(this);
            let own_g = post.g(this);
            for i in 0..Q {
                f_out[i] = match sources[i] {
                    Some(s) if post.flag(s).is_flow() => post.f(s)[i],
                    _ => own_f[OPP[i]],
                };
            }
            for i in 0..QT {
                g_out[i] = match sources[i] {
                    Some(s) => match post.flag(s) {
                        CellFlag::ThermalActive(p) => {
                            let wall = patch_temps.get(p as usize).copied().unwrap_or(params.ambient_temp);
                            -own_g[OPP[i]] + 2.0 * WT[i] * wall
                        }
                        fl if fl.is_solid() => own_g[OPP[i]],
                        _ => post.g(s)[i],
                    },
                    None => own_g[OPP[i]],
                };
            }
        }
        CellFlag::Inflow => {
            for i in 0..Q {
                f_out[i] = equilibrium(1.0, params.inflow_velocity, i);
            }
            for i in 0..QT {
                g_out[i] = thermal_equilibrium(params.ambient_temp, params.inflow_velocity, i);
            }
        }
        CellFlag::Outflow => {
            let src = sources[1].unwrap_or(this);
            f_out.copy_from_slice(post.f(src));
            g_out.copy_from_slice(post.g(src));
        }
        _ => {
            f_out.copy_from_slice(post.f(this));
            g_out.copy_from_slice(post.g(this));
            return true;
        }
    }
    // A non-finite population makes its sum non-finite.
    let rho: f64 = f_out.iter().sum();
    let temp: f64 = g_out.iter().sum();
    rho > 0.0 && rho.is_finite() && temp.is_finite()
}

/// Reusable post-collision buffers and pull-source table for monolithic
/// stepping.
#[derive(Debug, Default)]
pub struct StepScratch {
    f: Vec<f64>,
    g: Vec<f64>,
    sources: Vec<[Option<usize>; Q]>,
    /// Flag field `sources` was built for.
    flags: Option<Arc<FlagField>>,
}

impl StepScratch {
    pub fn for_grid(grid: &DistributionGrid) -> Self {
        let mut scratch = Self {
            f: vec![0.0; grid.f.len()],
            g: vec![0.0; grid.g.len()],
            ..Self::default()
        };
        scratch.sources_for(&grid.flags);
        scratch
    }

    fn sources_for(&mut self, flags: &Arc<FlagField>) {
        if self.flags.as_ref().is_some_and(|f| Arc::ptr_eq(f, flags)) {
            return;
        }
        self.sources = (0..flags.ny)
            .flat_map(|y| (0..flags.nx).map(move |x| (x, y)))
            .map(|(x, y)| flags.pull_sources(x, y))
            .collect();
        self.flags = Some(Arc::clone(flags));
    }
}

struct GlobalPost<'a> {
    f: &'a [f64],
    g: &'a [f64],
    flags: &'a [CellFlag],
}

impl PostCollision for GlobalPost<'_> {
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

/// One collide-stream step of the whole grid, returning the new grid.
pub fn step(grid: &DistributionGrid, params: &FluidParams) -> Result<DistributionGrid, LatticeError> {
    let mut next = grid.clone();
    next.step(params)?;
    Ok(next)
}

/// Step in place, reusing `scratch` for the post-collision state.
pub fn step_into(
    grid: &mut DistributionGrid,
    params: &FluidParams,
    scratch: &mut StepScratch,
) -> Result<(), LatticeError> {
    let consts = CollisionConsts::new(params);
    let flags = Arc::clone(&grid.flags);
    scratch.sources_for(&flags);
    // Post-collision state lives in the scratch buffers; the grid's own
    // arrays receive the streamed result.
    scratch.f.clear();
    scratch.f.extend_from_slice(&grid.f);
    scratch.g.clear();
    scratch.g.extend_from_slice(&grid.g);
    for (c, flag) in flags.cells.iter().enumerate() {
        if matches!(flag, CellFlag::Fluid) {
            collide_cell(
                &mut scratch.f[c * Q..(c + 1) * Q],
                &mut scratch.g[c * QT..(c + 1) * QT],
                &consts,
            );
        }
    }
    let post = GlobalPost {
        f: &scratch.f,
        g: &scratch.g,
        flags: &flags.cells,
    };
    let mut bad = None;
    let cells = grid.f.chunks_exact_mut(Q).zip(grid.g.chunks_exact_mut(QT));
    for (c, ((f_out, g_out), sources)) in cells.zip(&scratch.sources).enumerate() {
        let ok = stream_cell(&post, c, flags.cells[c], sources, params, &grid.patch_temps, f_out, g_out);
        if !ok && bad.is_none() {
            bad = Some((c % grid.nx, c / grid.nx));
        }
    }
    grid.time += 1;
    match bad {
        Some((x, y)) => Err(LatticeError::NumericalBlowup {
            time: grid.time,
            x,
            y,
        }),
        None => Ok(()),
    }
}

/// Density, velocity and temperature per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct MacroFields {
    pub nx: usize,
    pub ny: usize,
    pub rho: Vec<f64>,
    pub u: Vec<[f64; 2]>,
    pub temp: Vec<f64>,
    pub flags: Arc<FlagField>,
}

impl MacroFields {
    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.nx + x
    }

    pub fn speed(&self, cell: usize) -> f64 {
        let [ux, uy] = self.u[cell];
        ux.hypot(uy)
    }

    /// Scalar values of one field, row-major.
    pub fn field(&self, id: FieldId) -> Vec<f64> {
        match id {
            FieldId::Rho => self.rho.clone(),
            FieldId::Ux => self.u.iter().map(|u| u[0]).collect(),
            FieldId::Uy => self.u.iter().map(|u| u[1]).collect(),
            FieldId::Temp => self.temp.clone(),
        }
    }
}

/// Raw moments: ρ = Σf, u = Σf·e/ρ, T = Σg on flow cells; solid cells
/// report ρ = 1, u = 0 and the ambient temperature.
pub fn macroscopics(grid: &DistributionGrid) -> MacroFields {
    macroscopics_with_force(grid, [0.0, 0.0])
}

/// Like [`macroscopics`], but with the half-force velocity shift of the
/// forcing scheme, which is the physical velocity of a forced flow.
pub fn macroscopics_with_force(grid: &DistributionGrid, body_force: [f64; 2]) -> MacroFields {
    let n = grid.cells();
    let mut rho = vec![1.0; n];
    let mut u = vec![[0.0, 0.0]; n];
    let mut temp = vec![grid.ambient_temp; n];
    for (c, flag) in grid.flags.cells.iter().enumerate() {
        if flag.is_solid() {
            continue;
        }
        let f = grid.populations(c);
        let mut r = 0.0;
        let mut mx = 0.0;
        let mut my = 0.0;
        for i in 0..Q {
            r += f[i];
            mx += f[i] * E[i][0] as f64;
            my += f[i] * E[i][1] as f64;
        }
        rho[c] = r;
        u[c] = [(mx + 0.5 * r * body_force[0]) / r, (my + 0.5 * r * body_force[1]) / r];
        temp[c] = grid.g[c * QT..(c + 1) * QT].iter().sum();
    }
    MacroFields {
        nx: grid.nx,
        ny: grid.ny,
        rho,
        u,
        temp,
        flags: Arc::clone(&grid.flags),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn params(tau: f64) -> FluidParams {
        FluidParams::new(tau, [0.0; 2], [0.0; 2], 20.0, 0.05).unwrap()
    }

    #[test]
    fn rest_equilibrium_is_weight() {
        assert_eq!(equilibrium(1.0, [0.0, 0.0], 0), 4.0 / 9.0);
        assert_eq!(equilibrium(1.0, [0.0, 0.0], 5), 1.0 / 36.0);
        for i in 0..Q {
            assert_eq!(equilibrium(1.0, [0.0, 0.0], i), W[i]);
        }
    }

    #[test]
    fn equilibrium_moments_reproduce_inputs() {
        let u = [0.1, 0.0];
        let f = equilibrium_set(1.0, u);
        let rho: f64 = f.iter().sum();
        let mx: f64 = f.iter().zip(E.iter()).map(|(v, e)| v * e[0] as f64).sum();
        let my: f64 = f.iter().zip(E.iter()).map(|(v, e)| v * e[1] as f64).sum();
        assert_relative_eq!(rho, 1.0, epsilon = 1e-15);
        assert_relative_eq!(mx, 0.1, epsilon = 1e-15);
        assert!(my.abs() < 1e-16);
    }

    #[test]
    fn params_reject_unstable_values() {
        assert_eq!(
            FluidParams::new(0.5, [0.0; 2], [0.0; 2], 20.0, 0.1),
            Err(LatticeError::UnstableTau(0.5))
        );
        assert!(matches!(
            FluidParams::new(0.8, [0.0; 2], [0.3, 0.0], 20.0, 0.1),
            Err(LatticeError::InflowTooFast(_))
        ));
        assert!(FluidParams::new(0.8, [0.0; 2], [0.25, 0.25], 20.0, 0.1).is_err());
        assert!(FluidParams::new(0.8, [0.0; 2], [0.1, 0.0], 20.0, 0.0).is_err());
        assert!(serde_json::from_str::<FluidParams>(r#"{"tau":0.4}"#).is_err());
        let p: FluidParams = serde_json::from_str(r#"{"tau":0.9}"#).unwrap();
        assert_eq!(p.tau, 0.9);
    }

    #[test]
    fn uniform_rest_state_is_a_fixed_point() {
        let flags = Arc::new(FlagField::periodic(12, 10));
        for tau in [0.51, 0.8, 1.7] {
            let grid = DistributionGrid::at_rest(Arc::clone(&flags), &params(tau));
            let next = step(&grid, &params(tau)).unwrap();
            for (a, b) in grid.f.iter().zip(next.f.iter()) {
                assert!((a - b).abs() <= 1e-14);
            }
            assert_eq!(next.time, 1);
        }
    }

    #[test]
    fn moving_equilibrium_round_trips_through_macroscopics() {
        let flags = Arc::new(FlagField::periodic(4, 4));
        let grid = DistributionGrid::from_macroscopic(flags, &params(0.8), |_, _| (1.0, [0.1, 0.0], 20.0));
        let m = macroscopics(&grid);
        for c in 0..16 {
            assert!((m.rho[c] - 1.0).abs() <= 1e-14);
            assert!((m.u[c][0] - 0.1).abs() <= 1e-14);
            assert!(m.u[c][1].abs() <= 1e-14);
            assert!((m.temp[c] - 20.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn weight_populations_give_unit_density_at_rest() {
        let flags = Arc::new(FlagField::periodic(3, 3));
        let mut grid = DistributionGrid::at_rest(flags, &params(0.8));
        for c in 0..9 {
            grid.f[c * Q..(c + 1) * Q].copy_from_slice(&W);
        }
        let m = macroscopics(&grid);
        assert!(m.rho.iter().all(|&r| (r - 1.0).abs() < 1e-15));
        assert!(m.u.iter().all(|u| *u == [0.0, 0.0]));
    }

    #[test]
    fn obstacle_cells_report_fill_values() {
        let mut flags = FlagField::periodic(3, 3);
        flags.set(1, 1, CellFlag::Obstacle);
        let mut grid = DistributionGrid::from_macroscopic(Arc::new(flags), &params(0.8), |_, _| {
            (1.1, [0.05, 0.02], 30.0)
        });
        // Give the obstacle junk populations; they must not leak out.
        let c = 4;
        grid.f[c * Q..(c + 1) * Q].copy_from_slice(&[0.5; Q]);
        let m = macroscopics(&grid);
        assert_eq!(m.u[c], [0.0, 0.0]);
        assert_eq!(m.rho[c], 1.0);
        assert_eq!(m.temp[c], 20.0);
    }

    #[test]
    fn blowup_is_reported() {
        let flags = Arc::new(FlagField::periodic(4, 4));
        let mut grid = DistributionGrid::at_rest(flags, &params(0.8));
        grid.f[5 * Q] = f64::NAN;
        let err = grid.step(&params(0.8)).unwrap_err();
        assert!(matches!(err, LatticeError::NumericalBlowup { time: 1, .. }));
    }

    #[test]
    fn bounce_back_keeps_mass_in_a_closed_box() {
        let mut flags = FlagField::filled(10, 10, CellFlag::Fluid);
        for i in 0..10 {
            flags.set(i, 0, CellFlag::Wall);
            flags.set(i, 9, CellFlag::Wall);
            flags.set(0, i, CellFlag::Wall);
            flags.set(9, i, CellFlag::Wall);
        }
        flags.set(4, 4, CellFlag::Obstacle);
        let p = params(0.7);
        let mut grid = DistributionGrid::from_macroscopic(Arc::new(flags), &p, |x, y| {
            (1.0 + 0.01 * ((x * 7 + y * 3) % 5) as f64, [0.02, -0.01], 20.0)
        });
        let m0 = grid.total_mass();
        for _ in 0..200 {
            grid.step(&p).unwrap();
        }
        assert_relative_eq!(grid.total_mass(), m0, max_relative = 1e-12);
    }

    #[test]
    fn diffusion_relaxes_a_temperature_bump_toward_its_mean() {
        let flags = Arc::new(FlagField::periodic(16, 16));
        let p = params(0.8);
        let mut grid = DistributionGrid::from_macroscopic(flags, &p, |x, y| {
            let hot = x == 8 && y == 8;
            (1.0, [0.0, 0.0], if hot { 36.0 } else { 20.0 })
        });
        let total0: f64 = grid.g.iter().sum();
        for _ in 0..2000 {
            grid.step(&p).unwrap();
        }
        let m = macroscopics(&grid);
        let total1: f64 = m.temp.iter().sum();
        assert_relative_eq!(total0, total1, max_relative = 1e-12);
        let mean = total1 / 256.0;
        assert!(m.temp.iter().all(|t| (t - mean).abs() < 1e-3));
    }
}
