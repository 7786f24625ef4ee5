//! Coupling between the flow solver and a thermoregulation model.
//!
//! Every exchange runs a fixed number of lattice steps, samples air speed
//! and temperature next to each manikin surface patch, advances the
//! regulator and writes the resulting skin temperatures back as the
//! patches' Dirichlet temperatures.
//!
//! The bundled [`TwoNodeRegulator`] has one core node and one skin node per
//! patch. Heat flows are per unit area; patch areas are cell counts.

use crate::hierarchy::{cold_start, HierarchyError};
use crate::lattice::{self, CellFlag, DistributionGrid, FluidParams, LatticeError, MacroFields, StepScratch};
use crate::scene::Scene;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{self, Write};
use thiserror::Error;

pub const ENVELOPE_C: (f64, f64) = (20.0, 45.0);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ThermalError {
    #[error("scene has no manikin surface")]
    NoManikin,
    #[error("regulator left the operating envelope: {node} at {temp_c:.3} °C")]
    ModelDiverged { node: String, temp_c: f64 },
    #[error("invalid regulator parameters: {0}")]
    BadParams(String),
    #[error("exchange {exchange}: {source}")]
    Exchange {
        exchange: usize,
        #[source]
        source: Box<ThermalError>,
    },
    #[error("solver: {0}")]
    Solver(#[from] LatticeError),
    #[error("setup: {0}")]
    Setup(#[from] HierarchyError),
}

/// Air next to one surface patch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceSample {
    pub patch: u32,
    pub speed: f64,
    pub temp_c: f64,
    /// Surface cells of the patch.
    pub area: usize,
}

/// Mean air speed and temperature over (patch cell, flow neighbour) pairs
/// in the 8-neighbourhood, one sample per patch present on the grid.
/// Patches without flow neighbours report still ambient air.
pub fn sample_surface(grid: &DistributionGrid, fields: &MacroFields) -> Result<Vec<SurfaceSample>, ThermalError> {
    let flags = &grid.flags;
    let mut acc: BTreeMap<u32, (f64, f64, usize, usize)> = BTreeMap::new();
    for y in 0..grid.ny {
        for x in 0..grid.nx {
            let CellFlag::ThermalActive(p) = flags.get(x, y) else {
                continue;
            };
            let entry = acc.entry(p).or_insert((0.0, 0.0, 0, 0));
            entry.3 += 1;
            for e in &lattice::E[1..] {
                if let Some(n) = flags.offset(x, y, e[0], e[1]) {
                    if flags.cells[n].is_flow() {
                        entry.0 += fields.speed(n);
                        entry.1 += fields.temp[n];
                        entry.2 += 1;
                    }
                }
            }
        }
    }
    if acc.is_empty() {
        return Err(ThermalError::NoManikin);
    }
    Ok(acc
        .into_iter()
        .map(|(patch, (speed, temp, pairs, area))| {
            let (speed, temp_c) = if pairs == 0 {
                (0.0, grid.ambient_temp)
            } else {
                (speed / pairs as f64, temp / pairs as f64)
            };
            SurfaceSample {
                patch,
                speed,
                temp_c,
                area,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegulatorParams {
    /// Core-skin conductance, W/(m²·K).
    pub conductance: f64,
    /// Still-air skin-air transfer coefficient, W/(m²·K).
    pub h0: f64,
    /// Relative increase of the transfer coefficient per unit lattice speed.
    pub velocity_gain: f64,
    /// Metabolic heat released in the core, W/m².
    pub metabolic_rate: f64,
    /// Heat capacities per area, J/(m²·K).
    pub core_capacity: f64,
    pub skin_capacity: f64,
    /// Regulator time advanced per lattice step, s.
    pub dt_per_step: f64,
    pub initial_core_c: f64,
    pub initial_skin_c: f64,
    pub neutral_c: f64,
    pub half_width_c: f64,
}

impl Default for RegulatorParams {
    fn default() -> Self {
        Self {
            conductance: 15.0,
            h0: 10.0,
            velocity_gain: 20.0,
            metabolic_rate: 5.0,
            core_capacity: 1000.0,
            skin_capacity: 300.0,
            dt_per_step: 1.0,
            initial_core_c: 37.0,
            initial_skin_c: 34.0,
            neutral_c: 33.7,
            half_width_c: 1.0,
        }
    }
}

impl RegulatorParams {
    pub fn validate(&self) -> Result<(), ThermalError> {
        let positive = [
            ("conductance", self.conductance),
            ("h0", self.h0),
            ("core_capacity", self.core_capacity),
            ("skin_capacity", self.skin_capacity),
            ("dt_per_step", self.dt_per_step),
            ("half_width_c", self.half_width_c),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ThermalError::BadParams(format!("{name} must be positive")));
            }
        }
        if !(self.velocity_gain >= 0.0 && self.metabolic_rate >= 0.0) {
            return Err(ThermalError::BadParams("velocity_gain and metabolic_rate must be non-negative".into()));
        }
        Ok(())
    }

    pub fn transfer_coefficient(&self, speed: f64) -> f64 {
        self.h0 * (1.0 + self.velocity_gain * speed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegulatorState {
    pub core_c: f64,
    /// Skin temperature per patch, in sample order.
    pub skin_c: Vec<f64>,
}

impl RegulatorState {
    pub fn mean_skin(&self, areas: &[usize]) -> f64 {
        let total: usize = areas.iter().sum();
        self.skin_c.iter().zip(areas).map(|(t, &a)| t * a as f64).sum::<f64>() / total as f64
    }
}

/// Per-patch result of one regulator step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceResponse {
    pub patch: Vec<u32>,
    pub skin_c: Vec<f64>,
    /// Skin-to-air flux per patch, W/m².
    pub flux: Vec<f64>,
}

impl SurfaceResponse {
    /// Σ flux × area.
    pub fn total_flux(&self, samples: &[SurfaceSample]) -> f64 {
        self.flux.iter().zip(samples).map(|(q, s)| q * s.area as f64).sum()
    }
}

/// Interchangeable thermoregulation model.
pub trait Regulator {
    fn regulate(
        &self,
        samples: &[SurfaceSample],
        state: &RegulatorState,
        dt: f64,
    ) -> Result<(SurfaceResponse, RegulatorState), ThermalError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TwoNodeRegulator {
    pub params: RegulatorParams,
}

impl TwoNodeRegulator {
    pub fn initial_state(&self, patches: usize) -> RegulatorState {
        RegulatorState {
            core_c: self.params.initial_core_c,
            skin_c: vec![self.params.initial_skin_c; patches],
        }
    }
}

fn check_envelope(node: &str, t: f64) -> Result<(), ThermalError> {
    if !(ENVELOPE_C.0..=ENVELOPE_C.1).contains(&t) {
        return Err(ThermalError::ModelDiverged {
            node: node.to_string(),
            temp_c: t,
        });
    }
    Ok(())
}

impl Regulator for TwoNodeRegulator {
    /// One explicit Euler step. Fluxes are those of the incoming state, so
    /// at a fixed point the metabolic rate equals the area-weighted flux.
    fn regulate(
        &self,
        samples: &[SurfaceSample],
        state: &RegulatorState,
        dt: f64,
    ) -> Result<(SurfaceResponse, RegulatorState), ThermalError> {
        assert!(dt > 0.0, "dt must be positive");
        assert_eq!(samples.len(), state.skin_c.len(), "one skin node per patch");
        let p = &self.params;
        let total_area: usize = samples.iter().map(|s| s.area).sum();
        let mut core_loss = 0.0;
        let mut flux = Vec::with_capacity(samples.len());
        let mut skin_next = Vec::with_capacity(samples.len());
        for (s, &skin) in samples.iter().zip(&state.skin_c) {
            let from_core = p.conductance * (state.core_c - skin);
            let to_air = p.transfer_coefficient(s.speed) * (skin - s.temp_c);
            core_loss += from_core * s.area as f64;
            flux.push(to_air);
            skin_next.push(skin + dt * (from_core - to_air) / p.skin_capacity);
        }
        let core_next = state.core_c + dt * (p.metabolic_rate - core_loss / total_area as f64) / p.core_capacity;
        check_envelope("core", core_next)?;
        for &t in &skin_next {
            check_envelope("skin", t)?;
        }
        Ok((
            SurfaceResponse {
                patch: samples.iter().map(|s| s.patch).collect(),
                skin_c: skin_next.clone(),
                flux,
            },
            RegulatorState {
                core_c: core_next,
                skin_c: skin_next,
            },
        ))
    }
}

/// Vote on the seven-point scale from −3 (cold) to +3 (hot).
pub fn comfort_vote(skin_c: f64, neutral_c: f64, half_width_c: f64) -> i32 {
    assert!(half_width_c > 0.0, "half width must be positive");
    ((skin_c - neutral_c) / half_width_c).round().clamp(-3.0, 3.0) as i32
}

/// One line of the coupling log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExchangeRecord {
    pub exchange: usize,
    #[serde(rename = "mean_skin_C")]
    pub mean_skin_c: f64,
    #[serde(rename = "core_C")]
    pub core_c: f64,
    pub flux_total: f64,
    pub votes: Vec<i32>,
}

impl ExchangeRecord {
    pub fn write_jsonl(&self, mut out: impl Write) -> io::Result<()> {
        writeln!(out, "{}", serde_json::to_string(self)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CouplingConfig {
    pub n_cfd_steps: usize,
    pub max_exchanges: usize,
    /// Stop once the largest skin or core change per lattice step falls
    /// below this (°C). Zero runs all `max_exchanges`.
    pub tolerance_c: f64,
}

impl Default for CouplingConfig {
    fn default() -> Self {
        Self {
            n_cfd_steps: 10,
            max_exchanges: 1000,
            tolerance_c: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CouplingOutcome {
    pub exchanges: usize,
    pub converged: bool,
    pub state: RegulatorState,
    pub samples: Vec<SurfaceSample>,
    pub response: SurfaceResponse,
    pub grid: DistributionGrid,
}

/// The coupled loop on the scene's level-0 grid.
pub fn coupling_loop(
    scene: &Scene,
    regulator: &TwoNodeRegulator,
    config: &CouplingConfig,
    mut on_exchange: impl FnMut(&ExchangeRecord, &SurfaceResponse),
) -> Result<CouplingOutcome, ThermalError> {
    assert!(config.n_cfd_steps >= 1, "at least one lattice step per exchange");
    regulator.params.validate()?;
    if !scene.has_manikin() {
        return Err(ThermalError::NoManikin);
    }
    let (mut grid, params) = cold_start(scene, 0)?;
    run_coupled(&mut grid, &params, regulator, config, &mut on_exchange)
}

/// Runs the loop on an existing grid.
pub fn run_coupled(
    grid: &mut DistributionGrid,
    params: &FluidParams,
    regulator: &TwoNodeRegulator,
    config: &CouplingConfig,
    on_exchange: &mut dyn FnMut(&ExchangeRecord, &SurfaceResponse),
) -> Result<CouplingOutcome, ThermalError> {
    let tag = |exchange: usize| move |e: ThermalError| ThermalError::Exchange {
        exchange,
        source: Box::new(e),
    };
    let rp = &regulator.params;
    let initial = sample_surface(grid, &lattice::macroscopics(grid))?;
    let mut state = regulator.initial_state(initial.len());
    for (s, &t) in initial.iter().zip(&state.skin_c) {
        grid.patch_temps[s.patch as usize] = t;
    }
    let dt = rp.dt_per_step * config.n_cfd_steps as f64;
    let mut scratch = StepScratch::for_grid(grid);
    let mut last = None;
    for exchange in 0..config.max_exchanges {
        for _ in 0..config.n_cfd_steps {
            lattice::step_into(grid, params, &mut scratch).map_err(|e| tag(exchange)(e.into()))?;
        }
        let fields = lattice::macroscopics(grid);
        let samples = sample_surface(grid, &fields).map_err(tag(exchange))?;
        let (response, next) = regulator.regulate(&samples, &state, dt).map_err(tag(exchange))?;
        for (s, &t) in samples.iter().zip(&next.skin_c) {
            grid.patch_temps[s.patch as usize] = t;
        }
        let change = state
            .skin_c
            .iter()
            .zip(&next.skin_c)
            .map(|(a, b)| (a - b).abs())
            .fold((state.core_c - next.core_c).abs(), f64::max)
            / config.n_cfd_steps as f64;
        let areas: Vec<usize> = samples.iter().map(|s| s.area).collect();
        let record = ExchangeRecord {
            exchange,
            mean_skin_c: next.mean_skin(&areas),
            core_c: next.core_c,
            flux_total: response.total_flux(&samples),
            votes: next
                .skin_c
                .iter()
                .map(|&t| comfort_vote(t, rp.neutral_c, rp.half_width_c))
                .collect(),
        };
        on_exchange(&record, &response);
        state = next;
        let converged = change < config.tolerance_c;
        last = Some((samples, response));
        if converged {
            let (samples, response) = last.expect("set above");
            return Ok(CouplingOutcome {
                exchanges: exchange + 1,
                converged: true,
                state,
                samples,
                response,
                grid: grid.clone(),
            });
        }
    }
    let (samples, response) = last.unwrap_or_else(|| {
        let response = SurfaceResponse {
            patch: initial.iter().map(|s| s.patch).collect(),
            skin_c: state.skin_c.clone(),
            flux: vec![0.0; initial.len()],
        };
        (initial, response)
    });
    Ok(CouplingOutcome {
        exchanges: config.max_exchanges,
        converged: false,
        state,
        samples,
        response,
        grid: grid.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::FlagField;
    use std::sync::Arc;

    fn sample(temp_c: f64, speed: f64) -> SurfaceSample {
        SurfaceSample {
            patch: 0,
            speed,
            temp_c,
            area: 3,
        }
    }

    #[test]
    fn votes() {
        assert_eq!(comfort_vote(33.7, 33.7, 1.0), 0);
        assert_eq!(comfort_vote(33.7 + 3.5, 33.7, 1.0), 3);
        assert_eq!(comfort_vote(32.2, 33.7, 1.0), -2);
        assert_eq!(comfort_vote(10.0, 33.7, 1.0), -3);
        let mut last = -3;
        for k in 0..=250 {
            let v = comfort_vote(20.0 + k as f64 * 0.1, 33.7, 1.0);
            assert!(v >= last);
            last = v;
        }
        let seen: std::collections::BTreeSet<i32> =
            (0..=250).map(|k| comfort_vote(20.0 + k as f64 * 0.1, 33.7, 1.0)).collect();
        assert_eq!(seen.len(), 7);
    }

    #[test]
    fn no_gradient_no_flux() {
        let reg = TwoNodeRegulator::default();
        let state = RegulatorState {
            core_c: 37.0,
            skin_c: vec![33.0],
        };
        let (resp, _) = reg.regulate(&[sample(33.0, 0.0)], &state, 1.0).unwrap();
        assert_eq!(resp.flux, vec![0.0]);
    }

    #[test]
    fn still_air_fixed_point_balances_energy() {
        let reg = TwoNodeRegulator::default();
        let samples = [sample(25.0, 0.0), SurfaceSample { patch: 1, area: 5, ..sample(25.0, 0.02) }];
        let mut state = reg.initial_state(2);
        let mut change = f64::INFINITY;
        for _ in 0..200_000 {
            let (_, next) = reg.regulate(&samples, &state, 5.0).unwrap();
            change = (next.core_c - state.core_c).abs().max((next.skin_c[0] - state.skin_c[0]).abs());
            state = next;
        }
        assert!(change < 1e-9);
        let (resp, _) = reg.regulate(&samples, &state, 5.0).unwrap();
        let balance = reg.params.metabolic_rate * 8.0;
        assert!((resp.total_flux(&samples) - balance).abs() / balance <= 1e-6);
        // Independent closed form for the first patch.
        let h = reg.params.h0;
        let k = reg.params.conductance;
        let skin0 = state.skin_c[0];
        assert!((k * (state.core_c - skin0) - h * (skin0 - 25.0)).abs() < 1e-6);
    }

    #[test]
    fn leaving_the_envelope_is_an_error() {
        let reg = TwoNodeRegulator::default();
        let state = RegulatorState {
            core_c: 44.99,
            skin_c: vec![44.99],
        };
        let hot = TwoNodeRegulator {
            params: RegulatorParams {
                metabolic_rate: 1e6,
                ..reg.params
            },
        };
        assert!(matches!(
            hot.regulate(&[sample(44.99, 0.0)], &state, 1.0),
            Err(ThermalError::ModelDiverged { .. })
        ));
    }

    #[test]
    fn samples_average_flow_neighbours() {
        let mut flags = FlagField::periodic(6, 5);
        flags.set(2, 2, CellFlag::ThermalActive(0));
        flags.set(3, 2, CellFlag::ThermalActive(1));
        flags.set(2, 3, CellFlag::Obstacle);
        let params = FluidParams::default();
        let grid = DistributionGrid::from_macroscopic(Arc::new(flags.clone()), &params, |x, y| {
            (1.0, [0.01 * x as f64, 0.0], 20.0 + (x + 10 * y) as f64)
        });
        let fields = lattice::macroscopics(&grid);
        let got = sample_surface(&grid, &fields).unwrap();
        assert_eq!(got.len(), 2);
        for s in &got {
            let (cx, cy) = if s.patch == 0 { (2i32, 2i32) } else { (3, 2) };
            let mut temps = Vec::new();
            let mut speeds = Vec::new();
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (x, y) = ((cx + dx) as usize, (cy + dy) as usize);
                    if (dx, dy) != (0, 0) && flags.get(x, y).is_flow() {
                        temps.push(fields.temp[y * 6 + x]);
                        speeds.push(fields.speed(y * 6 + x));
                    }
                }
            }
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            assert!((s.temp_c - mean(&temps)).abs() < 1e-12);
            assert!((s.speed - mean(&speeds)).abs() < 1e-12);
            assert_eq!(s.area, 1);
        }
        let plain = DistributionGrid::at_rest(Arc::new(FlagField::periodic(4, 4)), &params);
        assert_eq!(
            sample_surface(&plain, &lattice::macroscopics(&plain)),
            Err(ThermalError::NoManikin)
        );
    }

    #[test]
    fn record_field_names() {
        let rec = ExchangeRecord {
            exchange: 1,
            mean_skin_c: 33.0,
            core_c: 37.0,
            flux_total: 2.0,
            votes: vec![0, -1],
        };
        let v: serde_json::Value = serde_json::to_value(&rec).unwrap();
        for key in ["exchange", "mean_skin_C", "core_C", "flux_total", "votes"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }
}
