//! C ABI over the steerflow solver and steering server.
//!
//! Objects are opaque heap handles created by `sf_*_new`/`sf_*_start` and
//! released with the matching `sf_*_free`. Every fallible call returns an
//! [`SfStatus`]; on failure a message is kept per thread and can be read
//! with [`sf_last_error`].

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::fs::File;
use std::io::BufWriter;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::sync::Arc;

use steerflow::hierarchy::{self, CancelToken};
use steerflow::lattice::{self, macroscopics_with_force, DistributionGrid, FieldDump, FieldId, FluidParams, StepScratch};
use steerflow::scene::Scene;
use steerflow::scheduler::RoleConfig;
use steerflow::steering::{Server, ServerConfig, Session, SessionConfig};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ParseError = 3,
    SolverError = 4,
    IoError = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn fail(status: SfStatus, message: impl Into<String>) -> SfStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = message.into());
    status
}

fn guard(f: impl FnOnce() -> SfStatus) -> SfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(SfStatus::Panic, "internal panic"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, SfStatus> {
    if p.is_null() {
        return Err(fail(SfStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(SfStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

fn field_arg(field: u32) -> Result<FieldId, SfStatus> {
    FieldId::from_code(field).ok_or_else(|| fail(SfStatus::InvalidArgument, format!("unknown field id {field}")))
}

macro_rules! try_ffi {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

macro_rules! handle {
    ($p:expr) => {
        match unsafe { $p.as_mut() } {
            Some(h) => h,
            None => return fail(SfStatus::NullPointer, concat!(stringify!($p), " is null")),
        }
    };
}

/// Copy the calling thread's last error message into `buf` as a
/// NUL-terminated string, truncating to `len` bytes. Returns the full
/// message length excluding the terminator.
#[no_mangle]
pub unsafe extern "C" fn sf_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Opaque scene description.
pub struct SfScene {
    scene: Scene,
}

#[no_mangle]
pub unsafe extern "C" fn sf_scene_from_json(json: *const c_char, out: *mut *mut SfScene) -> SfStatus {
    guard(|| {
        if out.is_null() {
            return fail(SfStatus::NullPointer, "out is null");
        }
        let text = try_ffi!(str_arg(json, "json"));
        match Scene::from_json(text) {
            Ok(scene) => {
                *out = Box::into_raw(Box::new(SfScene { scene }));
                SfStatus::Ok
            }
            Err(e) => fail(SfStatus::ParseError, e.to_string()),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn sf_scene_free(scene: *mut SfScene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}

/// Opaque lattice solver for one level of a scene.
pub struct SfSolver {
    grid: DistributionGrid,
    params: FluidParams,
    plan: hierarchy::LevelPlan,
    scratch: StepScratch,
}

/// Cold-start solver for `level` of `scene`.
#[no_mangle]
pub unsafe extern "C" fn sf_solver_new(scene: *const SfScene, level: u32, out: *mut *mut SfSolver) -> SfStatus {
    guard(|| {
        let Some(scene) = scene.as_ref() else {
            return fail(SfStatus::NullPointer, "scene is null");
        };
        if out.is_null() {
            return fail(SfStatus::NullPointer, "out is null");
        }
        match hierarchy::cold_start(&scene.scene, level) {
            Ok((grid, params)) => {
                let scratch = StepScratch::for_grid(&grid);
                *out = Box::into_raw(Box::new(SfSolver {
                    grid,
                    params,
                    plan: scene.scene.plan.clone(),
                    scratch,
                }));
                SfStatus::Ok
            }
            Err(e) => fail(SfStatus::SolverError, e.to_string()),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn sf_solver_free(solver: *mut SfSolver) {
    if !solver.is_null() {
        drop(Box::from_raw(solver));
    }
}

#[no_mangle]
pub unsafe extern "C" fn sf_solver_size(solver: *const SfSolver, nx: *mut usize, ny: *mut usize) -> SfStatus {
    let Some(s) = solver.as_ref() else {
        return fail(SfStatus::NullPointer, "solver is null");
    };
    if nx.is_null() || ny.is_null() {
        return fail(SfStatus::NullPointer, "nx or ny is null");
    }
    *nx = s.grid.nx;
    *ny = s.grid.ny;
    SfStatus::Ok
}

#[no_mangle]
pub unsafe extern "C" fn sf_solver_step(solver: *mut SfSolver, steps: u64) -> SfStatus {
    let s = handle!(solver);
    guard(|| {
        for _ in 0..steps {
            if let Err(e) = lattice::step_into(&mut s.grid, &s.params, &mut s.scratch) {
                return fail(SfStatus::SolverError, e.to_string());
            }
        }
        SfStatus::Ok
    })
}

/// Step until quasi-steady or the plan's step cap. Writes the steps taken
/// and whether the residual threshold was reached.
#[no_mangle]
pub unsafe extern "C" fn sf_solver_run_to_steady(solver: *mut SfSolver, steps: *mut u64, converged: *mut bool) -> SfStatus {
    let s = handle!(solver);
    guard(|| match hierarchy::run_level(&mut s.grid, &s.params, &s.plan, None, &CancelToken::new()) {
        Ok(run) => {
            if !steps.is_null() {
                *steps = run.steps as u64;
            }
            if !converged.is_null() {
                *converged = run.converged;
            }
            SfStatus::Ok
        }
        Err(e) => fail(SfStatus::SolverError, e.to_string()),
    })
}

#[no_mangle]
pub unsafe extern "C" fn sf_solver_total_mass(solver: *const SfSolver, mass: *mut f64) -> SfStatus {
    let Some(s) = solver.as_ref() else {
        return fail(SfStatus::NullPointer, "solver is null");
    };
    if mass.is_null() {
        return fail(SfStatus::NullPointer, "mass is null");
    }
    *mass = s.grid.total_mass();
    SfStatus::Ok
}

/// Copy a macroscopic field (0 rho, 1 ux, 2 uy, 3 temp) into `out`,
/// row-major with `nx * ny` values.
#[no_mangle]
pub unsafe extern "C" fn sf_solver_field(solver: *const SfSolver, field: u32, out: *mut f64, len: usize) -> SfStatus {
    let Some(s) = solver.as_ref() else {
        return fail(SfStatus::NullPointer, "solver is null");
    };
    let id = try_ffi!(field_arg(field));
    if out.is_null() {
        return fail(SfStatus::NullPointer, "out is null");
    }
    let n = s.grid.nx * s.grid.ny;
    if len < n {
        return fail(SfStatus::BufferTooSmall, format!("need {n} values, got {len}"));
    }
    let values = macroscopics_with_force(&s.grid, s.params.body_force).field(id);
    ptr::copy_nonoverlapping(values.as_ptr(), out, n);
    SfStatus::Ok
}

/// Write one field as a binary field dump.
#[no_mangle]
pub unsafe extern "C" fn sf_solver_write_dump(solver: *const SfSolver, field: u32, path: *const c_char) -> SfStatus {
    let Some(s) = solver.as_ref() else {
        return fail(SfStatus::NullPointer, "solver is null");
    };
    let id = try_ffi!(field_arg(field));
    let path = try_ffi!(str_arg(path, "path"));
    guard(|| {
        let fields = macroscopics_with_force(&s.grid, s.params.body_force);
        let written = File::create(path)
            .and_then(|f| lattice::write_field_dump(BufWriter::new(f), &FieldDump::from_macro(&fields, id)));
        match written {
            Ok(()) => SfStatus::Ok,
            Err(e) => fail(SfStatus::IoError, format!("{path}: {e}")),
        }
    })
}

/// Opaque steering session with its network listeners.
pub struct SfServer {
    session: Arc<Session>,
    server: Server,
}

/// Start a steering session on a copy of `scene` and listen on `port`
/// (raw TCP) and `ws_port` (WebSocket and static files); 0 picks free
/// ports. `token` may be null to disable authentication.
#[no_mangle]
pub unsafe extern "C" fn sf_server_start(
    scene: *const SfScene,
    port: u16,
    ws_port: u16,
    slaves: usize,
    traders: usize,
    token: *const c_char,
    out: *mut *mut SfServer,
) -> SfStatus {
    guard(|| {
        let Some(scene) = scene.as_ref() else {
            return fail(SfStatus::NullPointer, "scene is null");
        };
        if out.is_null() {
            return fail(SfStatus::NullPointer, "out is null");
        }
        let token = if token.is_null() {
            None
        } else {
            Some(try_ffi!(str_arg(token, "token")).to_string())
        };
        let roles = match RoleConfig::new(slaves, traders) {
            Ok(r) => r,
            Err(e) => return fail(SfStatus::InvalidArgument, e.to_string()),
        };
        let config = SessionConfig {
            roles,
            ..SessionConfig::default()
        };
        let session = match Session::start(scene.scene.clone(), config) {
            Ok(s) => s,
            Err(e) => return fail(SfStatus::InvalidArgument, e.to_string()),
        };
        let server = ServerConfig {
            port,
            ws_port,
            token,
            ..ServerConfig::default()
        };
        match Server::start(Arc::clone(&session), server) {
            Ok(server) => {
                *out = Box::into_raw(Box::new(SfServer { session, server }));
                SfStatus::Ok
            }
            Err(e) => fail(SfStatus::IoError, e.to_string()),
        }
    })
}

/// Bound ports of a running server.
#[no_mangle]
pub unsafe extern "C" fn sf_server_ports(server: *const SfServer, port: *mut u16, ws_port: *mut u16) -> SfStatus {
    let Some(s) = server.as_ref() else {
        return fail(SfStatus::NullPointer, "server is null");
    };
    if !port.is_null() {
        *port = s.server.tcp_addr.port();
    }
    if !ws_port.is_null() {
        *ws_port = s.server.ws_addr.port();
    }
    SfStatus::Ok
}

/// Stop listening, end the session and release the handle.
#[no_mangle]
pub unsafe extern "C" fn sf_server_free(server: *mut SfServer) {
    if !server.is_null() {
        let mut s = Box::from_raw(server);
        s.server.stop();
        s.session.shutdown();
    }
}
