//! Detached high-resolution runs seeded from an interactive result.

use crate::hierarchy::{self, refine, HierarchyError};
use crate::lattice::{self, macroscopics_with_force, write_field_dump, DistributionGrid, FieldDump, FieldId, StepScratch};
use crate::scene::Scene;
use std::fs::{self, File};
use std::io::{self, BufWriter};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BatchError {
    #[error("target level {target} is below the seed level {seed}")]
    LevelBelowSeed { target: u32, seed: u32 },
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
    #[error("step {step}: {source}")]
    Solver {
        step: u64,
        #[source]
        source: lattice::LatticeError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchSpec {
    pub level: u32,
    pub steps: u64,
    /// Dump interval in steps; 0 dumps only the initial and final states.
    pub dump_every: u64,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchSummary {
    pub level: u32,
    pub nx: usize,
    pub ny: usize,
    pub steps: u64,
    pub dumps: Vec<PathBuf>,
}

pub fn dump_name(field: FieldId, step: u64) -> String {
    format!("{}_{step:08}.stlb", field.name())
}

/// Write all four fields of `grid` to `dir`, returning the paths.
pub fn dump_grid(grid: &DistributionGrid, body_force: [f64; 2], dir: &Path, step: u64) -> Result<Vec<PathBuf>, BatchError> {
    let fields = macroscopics_with_force(grid, body_force);
    let mut out = Vec::with_capacity(FieldId::ALL.len());
    for id in FieldId::ALL {
        let path = dir.join(dump_name(id, step));
        let io_err = |source| BatchError::Io { path: path.clone(), source };
        let file = File::create(&path).map_err(io_err)?;
        write_field_dump(BufWriter::new(file), &FieldDump::from_macro(&fields, id)).map_err(io_err)?;
        out.push(path);
    }
    Ok(out)
}

/// Prolongate `seed` up to the target level, then run `steps` steps,
/// dumping at step 0, every `dump_every` steps and at the end.
///
/// Everything the run reads is passed in, so concurrent steering of the
/// originating session cannot affect the output.
pub fn run_batch(scene: &Scene, seed: &DistributionGrid, spec: &BatchSpec) -> Result<BatchSummary, BatchError> {
    if spec.level < seed.level {
        return Err(BatchError::LevelBelowSeed { target: spec.level, seed: seed.level });
    }
    fs::create_dir_all(&spec.out_dir).map_err(|source| BatchError::Io { path: spec.out_dir.clone(), source })?;
    let scene_path = spec.out_dir.join("scene.json");
    fs::write(&scene_path, scene.to_json()).map_err(|source| BatchError::Io { path: scene_path, source })?;

    let mut grid = seed.clone();
    let mut params = hierarchy::params_for_level(&scene.params, scene.plan.refinement_ratio, grid.level);
    while grid.level < spec.level {
        let (fine, fine_params) = refine(scene, &grid)?;
        grid = fine;
        params = fine_params;
    }

    let mut dumps = dump_grid(&grid, params.body_force, &spec.out_dir, 0)?;
    let mut scratch = StepScratch::for_grid(&grid);
    for step in 1..=spec.steps {
        lattice::step_into(&mut grid, &params, &mut scratch).map_err(|source| BatchError::Solver { step, source })?;
        let periodic = spec.dump_every > 0 && step % spec.dump_every == 0;
        if periodic || step == spec.steps {
            dumps.extend(dump_grid(&grid, params.body_force, &spec.out_dir, step)?);
        }
    }
    log::info!(
        "batch at level {} ({}x{}) finished {} steps, {} dumps",
        spec.level,
        grid.nx,
        grid.ny,
        spec.steps,
        dumps.len()
    );
    Ok(BatchSummary {
        level: spec.level,
        nx: grid.nx,
        ny: grid.ny,
        steps: spec.steps,
        dumps,
    })
}

/// Batch run without an interactive session: level 0 is solved to
/// quasi-steadiness first and used as the seed.
pub fn run_standalone(scene: &Scene, spec: &BatchSpec) -> Result<BatchSummary, BatchError> {
    scene.plan.validate()?;
    let (mut grid, params) = hierarchy::cold_start(scene, 0)?;
    hierarchy::run_level(&mut grid, &params, &scene.plan, None, &hierarchy::CancelToken::new())?;
    run_batch(scene, &grid, spec)
}
