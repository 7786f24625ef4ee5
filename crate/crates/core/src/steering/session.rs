//! The steering session actor.
//!
//! One thread owns the scene and processes commands in order: client
//! messages, level results from the running solve, batch progress. Because
//! a level result is only rendered when its version matches the current
//! scene version, and a `SceneAck` for a new version is queued before any
//! later command is handled, no subscriber sees a stale frame after the
//! acknowledgement.

use super::batch::{dump_grid, run_batch, BatchSpec};
use super::protocol::{BatchState, ClientMsg, ErrorCode, Outgoing, ServerMsg, StyleOptions, Technique};
use crate::compositor::{render_frame, Frame, RenderStyle};
use crate::hierarchy::{run_budgeted, CancelToken, HierarchyError, LevelResult};
use crate::lattice::{macroscopics_with_force, FieldId, MacroFields};
use crate::partition::{build_tree, MIN_LEAF_CELLS};
use crate::scene::{Scene, SceneError};
use crate::scheduler::RoleConfig;
use crate::viz::{self, Colormap, Polyline, ScalarField, VectorField};
use std::collections::{BTreeMap, VecDeque};
use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

#[derive(Debug, Clone)]
pub struct SessionConfig {
    /// Roles for rendering and composition tasks.
    pub roles: RoleConfig,
    /// Frames and primitives held per client before the oldest is dropped.
    pub queue_capacity: usize,
    /// Batch dump interval in steps.
    pub dump_every: u64,
    pub snapshot_dir: PathBuf,
    /// Write every frame sent as `frame_{seq:06}.ppm` here.
    pub frame_dump_dir: Option<PathBuf>,
    pub px_per_cell: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            roles: RoleConfig::new(2, 1).expect("valid roles"),
            queue_capacity: 8,
            dump_every: 1000,
            snapshot_dir: std::env::temp_dir().join("steerflow-snapshots"),
            frame_dump_dir: None,
            px_per_cell: 4,
        }
    }
}

/// Outgoing messages for one client. Frames and primitives beyond the
/// capacity push out the oldest of their kind; everything else is kept.
#[derive(Debug)]
pub struct ClientQueue {
    state: Mutex<QueueState>,
    ready: Condvar,
    capacity: usize,
}

#[derive(Debug, Default)]
struct QueueState {
    items: VecDeque<Outgoing>,
    droppable: usize,
    dropped: u64,
    closed: bool,
}

impl ClientQueue {
    pub fn new(capacity: usize) -> Self {
        Self {
            state: Mutex::new(QueueState::default()),
            ready: Condvar::new(),
            capacity: capacity.max(1),
        }
    }

    pub fn push(&self, item: Outgoing) {
        let mut st = self.state.lock().unwrap();
        if st.closed {
            return;
        }
        if item.is_droppable() {
            while st.droppable >= self.capacity {
                let pos = st.items.iter().position(Outgoing::is_droppable).expect("counted");
                st.items.remove(pos);
                st.droppable -= 1;
                st.dropped += 1;
            }
            st.droppable += 1;
        }
        st.items.push_back(item);
        self.ready.notify_all();
    }

    /// Next message, waiting up to `timeout`. `None` on timeout or once the
    /// queue is closed and drained.
    pub fn pop_timeout(&self, timeout: Duration) -> Option<Outgoing> {
        let deadline = Instant::now() + timeout;
        let mut st = self.state.lock().unwrap();
        loop {
            if let Some(item) = st.items.pop_front() {
                if item.is_droppable() {
                    st.droppable -= 1;
                }
                return Some(item);
            }
            let now = Instant::now();
            if st.closed || now >= deadline {
                return None;
            }
            st = self.ready.wait_timeout(st, deadline - now).unwrap().0;
        }
    }

    pub fn close(&self) {
        self.state.lock().unwrap().closed = true;
        self.ready.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        self.state.lock().unwrap().closed
    }

    pub fn dropped(&self) -> u64 {
        self.state.lock().unwrap().dropped
    }

    pub fn len(&self) -> usize {
        self.state.lock().unwrap().items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

enum Command {
    Connect { id: u64, queue: Arc<ClientQueue>, can_edit: bool },
    Disconnect { id: u64 },
    Message { id: u64, msg: Box<ClientMsg> },
    Malformed { id: u64, text: String },
    Level { version: u64, result: Box<LevelResult> },
    RunFinished { version: u64, error: Option<HierarchyError> },
    Batch { job_id: u64, state: BatchState, spec: BatchSpec, error: Option<String> },
    Shutdown,
}

/// Handle to a running session.
pub struct Session {
    tx: Sender<Command>,
    next_client: AtomicU64,
    capacity: usize,
    thread: Mutex<Option<JoinHandle<()>>>,
}

impl Session {
    /// Validate the scene, spawn the actor and start the first solve.
    pub fn start(scene: Scene, config: SessionConfig) -> Result<Arc<Self>, SceneError> {
        scene.validate()?;
        let (tx, rx) = mpsc::channel();
        let capacity = config.queue_capacity;
        let actor = Actor::new(scene, config, tx.clone());
        let thread = thread::Builder::new()
            .name("steer-session".into())
            .spawn(move || actor.run(rx))
            .expect("spawn session thread");
        Ok(Arc::new(Self {
            tx,
            next_client: AtomicU64::new(1),
            capacity,
            thread: Mutex::new(Some(thread)),
        }))
    }

    /// Register a client. View-only clients receive everything but may not
    /// edit the scene.
    pub fn connect(&self, can_edit: bool) -> Client {
        let id = self.next_client.fetch_add(1, Ordering::Relaxed);
        let queue = Arc::new(ClientQueue::new(self.capacity));
        let _ = self.tx.send(Command::Connect {
            id,
            queue: Arc::clone(&queue),
            can_edit,
        });
        Client {
            id,
            queue,
            tx: self.tx.clone(),
        }
    }

    /// Stop the actor and close every client queue. Running batch jobs
    /// finish on their own.
    pub fn shutdown(&self) {
        let _ = self.tx.send(Command::Shutdown);
        if let Some(t) = self.thread.lock().unwrap().take() {
            let _ = t.join();
        }
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// One connected client.
pub struct Client {
    id: u64,
    queue: Arc<ClientQueue>,
    tx: Sender<Command>,
}

impl Client {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn send(&self, msg: ClientMsg) {
        let _ = self.tx.send(Command::Message {
            id: self.id,
            msg: Box::new(msg),
        });
    }

    /// Forward a decoded wire header; unparseable messages are answered
    /// with an error.
    pub fn send_header(&self, header: serde_json::Value) {
        match serde_json::from_value::<ClientMsg>(header) {
            Ok(msg) => self.send(msg),
            Err(e) => self.reject(e.to_string()),
        }
    }

    pub fn reject(&self, text: String) {
        let _ = self.tx.send(Command::Malformed { id: self.id, text });
    }

    pub fn recv_timeout(&self, timeout: Duration) -> Option<Outgoing> {
        self.queue.pop_timeout(timeout)
    }

    pub fn queue(&self) -> &Arc<ClientQueue> {
        &self.queue
    }
}

impl Drop for Client {
    fn drop(&mut self) {
        let _ = self.tx.send(Command::Disconnect { id: self.id });
    }
}

struct ClientEntry {
    queue: Arc<ClientQueue>,
    can_edit: bool,
    subscribed: bool,
}

#[derive(Debug, Clone, Default)]
struct Style {
    field: Option<FieldId>,
    technique: Technique,
    options: StyleOptions,
}

struct Actor {
    scene: Scene,
    version: u64,
    config: SessionConfig,
    tx: Sender<Command>,
    clients: BTreeMap<u64, ClientEntry>,
    style: Style,
    seq: u64,
    cancel: Option<CancelToken>,
    /// Finest result so far for the current version.
    latest: Option<LevelResult>,
    batch_running: Option<u64>,
    next_job: u64,
}

impl Actor {
    fn new(scene: Scene, config: SessionConfig, tx: Sender<Command>) -> Self {
        Self {
            scene,
            version: 1,
            config,
            tx,
            clients: BTreeMap::new(),
            style: Style::default(),
            seq: 0,
            cancel: None,
            latest: None,
            batch_running: None,
            next_job: 1,
        }
    }

    fn run(mut self, rx: Receiver<Command>) {
        self.start_run();
        while let Ok(cmd) = rx.recv() {
            match cmd {
                Command::Connect { id, queue, can_edit } => {
                    self.clients.insert(id, ClientEntry { queue, can_edit, subscribed: false });
                }
                Command::Disconnect { id } => {
                    if let Some(c) = self.clients.remove(&id) {
                        c.queue.close();
                    }
                }
                Command::Message { id, msg } => self.handle(id, *msg),
                Command::Malformed { id, text } => self.error_to(id, ErrorCode::BadMessage, text),
                Command::Level { version, result } => {
                    if version == self.version {
                        self.on_level(*result);
                    } else {
                        log::debug!("dropping level {} of stale version {version}", result.level);
                    }
                }
                Command::RunFinished { version, error } => {
                    if version == self.version {
                        self.cancel = None;
                        if let Some(e) = error.filter(|e| !matches!(e, HierarchyError::Cancelled { .. })) {
                            self.broadcast(ServerMsg::Error {
                                code: ErrorCode::Internal,
                                text: e.to_string(),
                                version,
                            });
                        }
                    }
                }
                Command::Batch { job_id, state, spec, error } => {
                    if matches!(state, BatchState::Done | BatchState::Failed) && self.batch_running == Some(job_id) {
                        self.batch_running = None;
                    }
                    self.broadcast_all(ServerMsg::Batch {
                        job_id,
                        state,
                        level: spec.level,
                        steps: spec.steps,
                        out_path: spec.out_dir.display().to_string(),
                        error,
                    });
                }
                Command::Shutdown => break,
            }
        }
        if let Some(c) = self.cancel.take() {
            c.cancel();
        }
        for c in self.clients.values() {
            c.queue.close();
        }
    }

    fn send_to(&self, id: u64, out: Outgoing) {
        if let Some(c) = self.clients.get(&id) {
            c.queue.push(out);
        }
    }

    fn error_to(&self, id: u64, code: ErrorCode, text: String) {
        self.send_to(
            id,
            Outgoing::plain(ServerMsg::Error {
                code,
                text,
                version: self.version,
            }),
        );
    }

    fn ack(&self) -> ServerMsg {
        ServerMsg::SceneAck {
            version: self.version,
            scene: self.scene.clone(),
        }
    }

    /// To every subscriber.
    fn broadcast(&self, msg: ServerMsg) {
        self.broadcast_out(&Outgoing::plain(msg));
    }

    fn broadcast_out(&self, out: &Outgoing) {
        for c in self.clients.values().filter(|c| c.subscribed) {
            c.queue.push(out.clone());
        }
    }

    /// To every connected client.
    fn broadcast_all(&self, msg: ServerMsg) {
        let out = Outgoing::plain(msg);
        for c in self.clients.values() {
            c.queue.push(out.clone());
        }
    }

    fn start_run(&mut self) {
        if let Some(c) = self.cancel.take() {
            c.cancel();
        }
        self.latest = None;
        let cancel = CancelToken::new();
        self.cancel = Some(cancel.clone());
        let (scene, version, tx) = (self.scene.clone(), self.version, self.tx.clone());
        thread::Builder::new()
            .name(format!("steer-run-v{version}"))
            .spawn(move || {
                let outcome = run_budgeted(
                    &scene,
                    &mut |r: &LevelResult| {
                        let _ = tx.send(Command::Level {
                            version,
                            result: Box::new(r.clone()),
                        });
                    },
                    &cancel,
                );
                let _ = tx.send(Command::RunFinished {
                    version,
                    error: outcome.err(),
                });
            })
            .expect("spawn run thread");
    }

    fn handle(&mut self, id: u64, msg: ClientMsg) {
        let Some(client) = self.clients.get(&id) else {
            return;
        };
        let can_edit = client.can_edit;
        let edit: Option<Box<dyn FnOnce(&mut Scene) -> Result<(), SceneError>>> = match msg {
            ClientMsg::AddGeometry { object } => Some(Box::new(move |s| s.add(object))),
            ClientMsg::DeleteGeometry { id } => Some(Box::new(move |s| s.delete(&id).map(drop))),
            ClientMsg::MoveGeometry { id, center } => Some(Box::new(move |s| s.move_to(&id, center))),
            ClientMsg::ScaleGeometry { id, factor } => Some(Box::new(move |s| s.scale(&id, factor))),
            ClientMsg::SetParams { params } => Some(Box::new(move |s| {
                s.params = params;
                Ok(())
            })),
            ClientMsg::Hello { .. } => {
                self.send_to(id, Outgoing::plain(self.ack()));
                None
            }
            ClientMsg::SetBudget { ms } => {
                if !can_edit {
                    return self.error_to(id, ErrorCode::ViewOnly, "view-only client".into());
                }
                // Applies from the next run; the current one keeps its deadline.
                self.scene.plan.budget_ms = ms;
                self.send_to(id, Outgoing::plain(self.ack()));
                None
            }
            ClientMsg::SetField { field } => {
                self.style.field = Some(field);
                self.send_to(id, Outgoing::plain(self.ack()));
                self.rerender(None);
                None
            }
            ClientMsg::SetStyle { technique, options } => {
                if let Some(name) = &options.colormap {
                    if colormap_by_name(name).is_none() {
                        return self.error_to(id, ErrorCode::InvalidParams, format!("unknown colormap {name:?}"));
                    }
                }
                if options.px_per_cell == Some(0) || options.glyph_stride == Some(0) {
                    return self.error_to(id, ErrorCode::InvalidParams, "sizes must be positive".into());
                }
                self.style.technique = technique;
                self.style.options = options;
                self.send_to(id, Outgoing::plain(self.ack()));
                self.rerender(None);
                None
            }
            ClientMsg::Subscribe {} => {
                if let Some(c) = self.clients.get_mut(&id) {
                    c.subscribed = true;
                }
                self.send_to(id, Outgoing::plain(self.ack()));
                self.rerender(Some(id));
                None
            }
            ClientMsg::Snapshot {} => {
                self.snapshot(id);
                None
            }
            ClientMsg::TriggerBatch { level, steps, out_path } => {
                if !can_edit {
                    return self.error_to(id, ErrorCode::ViewOnly, "view-only client".into());
                }
                self.trigger_batch(id, level, steps, PathBuf::from(out_path));
                None
            }
        };
        let Some(edit) = edit else {
            return;
        };
        if !can_edit {
            return self.error_to(id, ErrorCode::ViewOnly, "view-only client".into());
        }
        let mut next = self.scene.clone();
        if let Err(e) = edit(&mut next).and_then(|()| next.validate()) {
            let code = match e {
                SceneError::UnknownId(_) => ErrorCode::UnknownId,
                SceneError::DuplicateId(_) => ErrorCode::DuplicateId,
                SceneError::InvalidGeometry { .. } => ErrorCode::InvalidGeometry,
                SceneError::Parse(_) => ErrorCode::InvalidParams,
            };
            return self.error_to(id, code, e.to_string());
        }
        self.scene = next;
        self.version += 1;
        let ack = Outgoing::plain(self.ack());
        for (&cid, c) in &self.clients {
            if c.subscribed || cid == id {
                c.queue.push(ack.clone());
            }
        }
        self.start_run();
    }

    fn render_style(&self, level: u32) -> RenderStyle {
        let base = self.style.options.px_per_cell.unwrap_or(self.config.px_per_cell);
        RenderStyle {
            field: self.style.field.unwrap_or(FieldId::Ux),
            range: self.style.options.range.map(|[a, b]| (a, b)),
            colormap: self
                .style
                .options
                .colormap
                .as_deref()
                .and_then(colormap_by_name)
                .unwrap_or_else(Colormap::diverging),
            // Keep frames about the same size as the grid refines.
            px_per_cell: (base >> level.min(16)).max(1),
        }
    }

    /// Frame, primitives and level summary for `result`.
    fn render(&mut self, result: &LevelResult) -> Option<(Outgoing, Option<Outgoing>)> {
        let grid = &result.grid;
        let fields = macroscopics_with_force(grid, result.params.body_force);
        let style = self.render_style(result.level);
        let scalar = ScalarField::from_macro(&fields, style.field);
        let tree = build_tree(&grid.flags, (grid.cells() / 16).max(MIN_LEAF_CELLS));
        self.seq += 1;
        let frame = match render_frame(&tree, &scalar, &style, &self.config.roles, self.seq, result.level) {
            Ok(f) => f,
            Err(e) => {
                log::warn!("render failed: {e}");
                return None;
            }
        };
        if let Some(dir) = &self.config.frame_dump_dir {
            dump_frame(dir, &frame);
        }
        let frame_msg = frame_message(frame, self.version);
        let primitives = primitives(&fields, &scalar, self.style.technique, &self.style.options).map(|(polylines, glyphs)| {
            Outgoing::plain(ServerMsg::Primitives {
                version: self.version,
                level: result.level,
                polylines,
                glyphs,
            })
        });
        Some((frame_msg, primitives))
    }

    fn on_level(&mut self, result: LevelResult) {
        log::debug!(
            "version {} level {} after {} steps, residual {:.3e}",
            self.version,
            result.level,
            result.steps,
            result.residual
        );
        if let Some((frame, prims)) = self.render(&result) {
            self.broadcast_out(&frame);
            if let Some(p) = prims {
                self.broadcast_out(&p);
            }
        }
        self.broadcast(ServerMsg::LevelDone {
            version: self.version,
            level: result.level,
            residual: result.residual,
            steps: result.steps,
            converged: result.converged,
            elapsed_ms: result.elapsed_ms,
        });
        self.latest = Some(result);
    }

    /// Re-send the latest result with the current style, to one client or
    /// to all subscribers.
    fn rerender(&mut self, to: Option<u64>) {
        let Some(latest) = self.latest.clone() else {
            return;
        };
        if let Some((frame, prims)) = self.render(&latest) {
            for out in std::iter::once(frame).chain(prims) {
                match to {
                    Some(id) => self.send_to(id, out),
                    None => self.broadcast_out(&out),
                }
            }
        }
    }

    fn snapshot(&mut self, id: u64) {
        let Some(latest) = self.latest.clone() else {
            return self.error_to(id, ErrorCode::NoInteractiveResult, "no result yet for this scene version".into());
        };
        let dir = self
            .config
            .snapshot_dir
            .join(format!("v{}_level{}", self.version, latest.level));
        let dumped = std::fs::create_dir_all(&dir)
            .map_err(|e| e.to_string())
            .and_then(|()| dump_grid(&latest.grid, latest.params.body_force, &dir, 0).map_err(|e| e.to_string()));
        if let Err(e) = dumped {
            return self.error_to(id, ErrorCode::Internal, e);
        }
        self.send_to(id, Outgoing::plain(self.ack()));
        let frame_seq = self.render(&latest).map(|(frame, _)| {
            let seq = match frame.msg {
                ServerMsg::Frame { seq, .. } => seq,
                _ => unreachable!(),
            };
            self.send_to(id, frame);
            seq
        });
        self.send_to(
            id,
            Outgoing::plain(ServerMsg::Snapshot {
                version: self.version,
                frame_seq,
                dump: Some(dir.display().to_string()),
            }),
        );
    }

    fn trigger_batch(&mut self, id: u64, level: u32, steps: u64, out_dir: PathBuf) {
        if self.batch_running.is_some() {
            return self.error_to(id, ErrorCode::JobLimitExceeded, "a batch job is already running".into());
        }
        let Some(seed) = self.latest.as_ref() else {
            return self.error_to(id, ErrorCode::NoInteractiveResult, "no interactive result to seed from".into());
        };
        if level < seed.level {
            return self.error_to(
                id,
                ErrorCode::InvalidParams,
                format!("target level {level} is below the interactive level {}", seed.level),
            );
        }
        let job_id = self.next_job;
        self.next_job += 1;
        self.batch_running = Some(job_id);
        let spec = BatchSpec {
            level,
            steps,
            dump_every: self.config.dump_every,
            out_dir,
        };
        self.send_to(id, Outgoing::plain(self.ack()));
        self.broadcast_all(ServerMsg::Batch {
            job_id,
            state: BatchState::Queued,
            level,
            steps,
            out_path: spec.out_dir.display().to_string(),
            error: None,
        });
        let (scene, grid, tx) = (self.scene.clone(), Arc::clone(&seed.grid), self.tx.clone());
        thread::Builder::new()
            .name(format!("steer-batch-{job_id}"))
            .spawn(move || {
                let send = |state, error| {
                    let _ = tx.send(Command::Batch {
                        job_id,
                        state,
                        spec: spec.clone(),
                        error,
                    });
                };
                send(BatchState::Running, None);
                match run_batch(&scene, &grid, &spec) {
                    Ok(_) => send(BatchState::Done, None),
                    Err(e) => send(BatchState::Failed, Some(e.to_string())),
                }
            })
            .expect("spawn batch thread");
    }
}

pub fn colormap_by_name(name: &str) -> Option<Colormap> {
    match name {
        "diverging" => Some(Colormap::diverging()),
        "grayscale" => Some(Colormap::grayscale()),
        _ => None,
    }
}

fn frame_message(frame: Frame, version: u64) -> Outgoing {
    Outgoing {
        msg: ServerMsg::Frame {
            seq: frame.seq,
            level: frame.level,
            field: frame.field,
            w: frame.width,
            h: frame.height,
            payload_bytes: frame.pixels.len(),
            version,
            timestamp_ms: frame.timestamp_ms,
        },
        payload: Some(Arc::new(frame.pixels)),
    }
}

fn dump_frame(dir: &std::path::Path, frame: &Frame) {
    let path = dir.join(format!("frame_{:06}.ppm", frame.seq));
    let written = std::fs::create_dir_all(dir)
        .and_then(|()| File::create(&path))
        .and_then(|f| viz::write_ppm(BufWriter::new(f), frame.width, frame.height, &frame.pixels));
    if let Err(e) = written {
        log::warn!("{}: {e}", path.display());
    }
}

/// Geometric primitives for the non-raster techniques.
pub fn primitives(
    fields: &MacroFields,
    scalar: &ScalarField,
    technique: Technique,
    options: &StyleOptions,
) -> Option<(Vec<Polyline>, Vec<viz::Glyph>)> {
    let velocity = VectorField::from_macro(fields);
    let (nx, ny) = (fields.nx, fields.ny);
    let seeds = || {
        let n = options.seeds.unwrap_or(12).max(1);
        (0..n).map(|k| [0.02, (k as f64 + 0.5) / n as f64]).collect::<Vec<_>>()
    };
    let max_speed = velocity.u.iter().map(|v| v[0].hypot(v[1])).fold(0.0, f64::max);
    // Half a cell per step at the fastest point.
    let h = if max_speed > 0.0 { 0.5 / (nx.max(ny) as f64 * max_speed) } else { 1.0 };
    let max_steps = 20 * nx.max(ny);
    match technique {
        Technique::Colormap => None,
        Technique::Iso => {
            let (lo, hi) = options.range.map_or_else(|| scalar.auto_range(), |[a, b]| (a, b));
            let n = options.iso_levels.unwrap_or(8);
            let levels: Vec<f64> = if hi > lo {
                (0..n).map(|k| lo + (k as f64 + 0.5) * (hi - lo) / n as f64).collect()
            } else {
                Vec::new()
            };
            Some((viz::iso_lines(scalar, &levels), Vec::new()))
        }
        Technique::Streamlines => Some((viz::streamlines(&velocity, &seeds(), h, max_steps), Vec::new())),
        Technique::Streambands => {
            let width = options.band_width.unwrap_or(0.03);
            Some((viz::streambands(&velocity, &seeds(), width, h, max_steps), Vec::new()))
        }
        Technique::Glyphs => {
            let stride = options.glyph_stride.unwrap_or((nx.max(ny) / 16).max(1));
            Some((Vec::new(), viz::glyphs(&velocity, stride)))
        }
    }
}
