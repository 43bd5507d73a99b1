//! A live simulation session. The simulation runs on its own thread and owns
//! all state; commands arrive through one bounded queue in receipt order and
//! snapshots leave through a broadcast channel that drops the oldest frames
//! for subscribers that fall behind.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::{broadcast, mpsc, oneshot};

use cwbc_core::governor::ConstraintSet;
use cwbc_core::sim::{Scenario, SimError, SimResources, Simulation};
use cwbc_core::spatial::{Pose, Rotation, Vec3, Vec6};

use crate::protocol::{error_message, Ack, Command, Message, Payload, Snapshot};

pub const MAX_TELEMETRY_HZ: f64 = 50.0;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("invalid session config: {0}")]
    Config(String),
    #[error("session stopped")]
    Stopped,
}

#[derive(Debug, Clone)]
pub struct SessionConfig {
    /// Capped at 50 Hz and at the controller rate.
    pub telemetry_hz: f64,
    /// Simulated seconds per wall-clock second.
    pub speed: f64,
    /// Samples in the tracking-error window.
    pub window: usize,
    pub command_queue: usize,
    /// Frames buffered per subscriber before the oldest are dropped.
    pub telemetry_buffer: usize,
    pub start_paused: bool,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self { telemetry_hz: 40.0, speed: 1.0, window: 40, command_queue: 256, telemetry_buffer: 64, start_paused: false }
    }
}

/// Where the outcome of a queued command goes.
pub enum Reply {
    None,
    /// Serialized ack or error frames for one connection; never awaited.
    Socket(mpsc::Sender<String>),
    Oneshot(oneshot::Sender<Result<(), String>>),
}

pub struct Queued {
    pub seq: u64,
    pub command: Command,
    pub reply: Reply,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionInfo {
    pub id: String,
    pub scenario: String,
    pub control_rate: f64,
    pub telemetry_hz: f64,
    pub run: u64,
    pub tick: u64,
    pub t: f64,
    pub paused: bool,
    pub governor: bool,
    pub estimator: String,
    pub subscribers: usize,
    pub violation_ticks: u64,
    /// Largest lateness of a tick against its wall-clock schedule, s.
    pub max_jitter: f64,
    pub constraints: ConstraintSet,
    pub latest: Option<Snapshot>,
}

struct Shared {
    info: SessionInfo,
}

pub struct Session {
    commands: mpsc::Sender<Queued>,
    telemetry: broadcast::Sender<Arc<str>>,
    shared: Arc<Mutex<Shared>>,
    subscribers: Arc<AtomicUsize>,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
    control_period: f64,
}

/// Keeps the subscriber count while a connection is open.
pub struct SubscriberGuard(Arc<AtomicUsize>);

impl Drop for SubscriberGuard {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

struct Runner {
    sim: Simulation,
    id: String,
    run: u64,
    tick: u64,
    seq: u64,
    paused: bool,
    violation_ticks: u64,
    window: VecDeque<[f64; 6]>,
    window_len: usize,
    publish_every: u64,
    telemetry: broadcast::Sender<Arc<str>>,
    shared: Arc<Mutex<Shared>>,
}

fn reference_pose(p: &crate::protocol::SetReference) -> Pose {
    Pose::new(Rotation::from_rpy(p.rpy[0], p.rpy[1], p.rpy[2]), Vec3::new(p.position[0], p.position[1], p.position[2]))
}

impl Runner {
    fn apply(&mut self, command: &Command) -> Result<(), String> {
        match command {
            Command::ApplyWrench(p) => self.sim.apply_wrench(Vec6::from_column_slice(&p.wrench)),
            Command::SetReference(p) => self.sim.set_reference(reference_pose(p)),
            Command::ToggleGovernor(p) => self.sim.set_governor(p.enabled).map_err(|e| e.to_string())?,
            Command::Pause(p) => self.paused = p.paused,
            Command::Reset => {
                self.sim.reset().map_err(|e| e.to_string())?;
                self.run += 1;
                self.tick = 0;
                self.violation_ticks = 0;
                self.window.clear();
            }
        }
        self.refresh_info(None);
        Ok(())
    }

    fn handle(&mut self, q: Queued) {
        let outcome = self.apply(&q.command);
        let t = self.sim.time();
        match q.reply {
            Reply::None => {}
            Reply::Oneshot(tx) => {
                let _ = tx.send(outcome);
            }
            Reply::Socket(tx) => {
                self.seq += 1;
                let m = match outcome {
                    Ok(()) => Message::new(self.seq, t, Payload::Ack(Ack { ack: q.seq, command: q.command.kind().into() })),
                    Err(e) => error_message(self.seq, t, "rejected", e, Some(q.seq)),
                };
                let _ = tx.try_send(m.to_json());
            }
        }
    }

    fn refresh_info(&self, latest: Option<Snapshot>) {
        let mut s = self.shared.lock().expect("session lock");
        let info = &mut s.info;
        info.run = self.run;
        info.tick = self.tick;
        info.t = self.sim.time();
        info.paused = self.paused;
        info.governor = self.sim.governor_enabled();
        info.violation_ticks = self.violation_ticks;
        if latest.is_some() || self.tick == 0 {
            info.latest = latest;
        }
    }

    fn step(&mut self) -> Result<(), SimError> {
        let record = self.sim.advance()?.clone();
        self.sim.take_records();
        self.tick += 1;
        if record.violations.iter().any(|&m| m != 0) {
            self.violation_ticks += 1;
        }
        if self.window.len() == self.window_len {
            self.window.pop_front();
        }
        self.window.push_back(std::array::from_fn(|i| record.cmd[i] - record.achieved[i]));
        let mut snap = Snapshot::from_record(&record);
        snap.session = self.id.clone();
        snap.run = self.run;
        snap.tick = self.tick;
        snap.paused = self.paused;
        snap.governor = self.sim.governor_enabled();
        snap.estimator = self.sim.estimator_name().to_string();
        let w = self.sim.override_wrench();
        snap.applied_wrench = std::array::from_fn(|i| w[i]);
        snap.violation_ticks = self.violation_ticks;
        snap.tracking_error = self.window.iter().copied().collect();
        if (self.tick - 1) % self.publish_every == 0 {
            self.seq += 1;
            let text = Message::new(self.seq, record.t, Payload::Telemetry(Box::new(snap.clone()))).to_json();
            // No receivers is fine; lagging receivers lose their oldest frames.
            let _ = self.telemetry.send(text.into());
        }
        self.refresh_info(Some(snap));
        Ok(())
    }

    fn fail(&mut self, e: &SimError) {
        self.paused = true;
        self.seq += 1;
        let m = error_message(self.seq, self.sim.time(), "simulation", e.to_string(), None);
        let _ = self.telemetry.send(m.to_json().into());
        self.refresh_info(None);
        log::error!("session {} paused: {e}", self.id);
    }
}

fn run_loop(mut r: Runner, mut rx: mpsc::Receiver<Queued>, stop: Arc<AtomicBool>, period: Duration) {
    let mut deadline = Instant::now();
    let mut max_jitter = 0.0f64;
    while !stop.load(Ordering::SeqCst) {
        loop {
            match rx.try_recv() {
                Ok(q) => r.handle(q),
                Err(mpsc::error::TryRecvError::Empty) => break,
                Err(mpsc::error::TryRecvError::Disconnected) => return,
            }
        }
        if !r.paused {
            if let Err(e) = r.step() {
                r.fail(&e);
            }
        }
        deadline += period;
        let now = Instant::now();
        if now < deadline {
            std::thread::sleep(deadline - now);
        } else if r.paused {
            deadline = now;
        }
        let late = Instant::now().saturating_duration_since(deadline).as_secs_f64();
        if !r.paused && late > max_jitter {
            max_jitter = late;
            r.shared.lock().expect("session lock").info.max_jitter = max_jitter;
        }
    }
}

impl Session {
    pub fn start(scenario: Scenario, resources: SimResources, cfg: SessionConfig) -> Result<Self, SessionError> {
        if !(cfg.speed > 0.0 && cfg.speed.is_finite()) {
            return Err(SessionError::Config(format!("speed must be > 0, got {}", cfg.speed)));
        }
        if !(cfg.telemetry_hz > 0.0) {
            return Err(SessionError::Config(format!("telemetry rate must be > 0, got {}", cfg.telemetry_hz)));
        }
        if cfg.command_queue == 0 || cfg.telemetry_buffer == 0 {
            return Err(SessionError::Config("queue sizes must be > 0".into()));
        }
        let control_rate = scenario.rates.controller;
        let hz = cfg.telemetry_hz.min(MAX_TELEMETRY_HZ).min(control_rate);
        let publish_every = ((control_rate / hz) - 1e-9).ceil().max(1.0) as u64;
        let sim = Simulation::new(scenario.clone(), resources)?;
        let control_period = sim.control_period();
        let stamp = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).unwrap_or_default().as_nanos();
        let id = format!("{}-{:x}", scenario.name, stamp & 0xffff_ffff);
        let info = SessionInfo {
            id: id.clone(),
            scenario: scenario.name.clone(),
            control_rate,
            telemetry_hz: control_rate / publish_every as f64,
            run: 0,
            tick: 0,
            t: 0.0,
            paused: cfg.start_paused,
            governor: sim.governor_enabled(),
            estimator: sim.estimator_name().to_string(),
            subscribers: 0,
            violation_ticks: 0,
            max_jitter: 0.0,
            constraints: scenario.constraints,
            latest: None,
        };
        let shared = Arc::new(Mutex::new(Shared { info }));
        let (telemetry, _) = broadcast::channel(cfg.telemetry_buffer);
        let (commands, rx) = mpsc::channel(cfg.command_queue);
        let runner = Runner {
            sim,
            id,
            run: 0,
            tick: 0,
            seq: 0,
            paused: cfg.start_paused,
            violation_ticks: 0,
            window: VecDeque::with_capacity(cfg.window.max(1)),
            window_len: cfg.window.max(1),
            publish_every,
            telemetry: telemetry.clone(),
            shared: shared.clone(),
        };
        let stop = Arc::new(AtomicBool::new(false));
        let period = Duration::from_secs_f64(control_period / cfg.speed);
        let thread = {
            let stop = stop.clone();
            std::thread::Builder::new()
                .name("sim-loop".into())
                .spawn(move || run_loop(runner, rx, stop, period))
                .map_err(|e| SessionError::Config(e.to_string()))?
        };
        Ok(Self {
            commands,
            telemetry,
            shared,
            subscribers: Arc::new(AtomicUsize::new(0)),
            stop,
            thread: Some(thread),
            control_period,
        })
    }

    /// Serialized telemetry frames from the next published tick on.
    pub fn subscribe(&self) -> broadcast::Receiver<Arc<str>> {
        self.telemetry.subscribe()
    }

    pub fn register_subscriber(&self) -> SubscriberGuard {
        self.subscribers.fetch_add(1, Ordering::SeqCst);
        SubscriberGuard(self.subscribers.clone())
    }

    pub async fn submit(&self, q: Queued) -> Result<(), SessionError> {
        self.commands.send(q).await.map_err(|_| SessionError::Stopped)
    }

    /// Queues a command and waits until the simulation thread has applied it.
    pub async fn command(&self, command: Command) -> Result<Result<(), String>, SessionError> {
        let (tx, rx) = oneshot::channel();
        self.submit(Queued { seq: 0, command, reply: Reply::Oneshot(tx) }).await?;
        rx.await.map_err(|_| SessionError::Stopped)
    }

    pub fn info(&self) -> SessionInfo {
        let mut info = self.shared.lock().expect("session lock").info.clone();
        info.subscribers = self.subscribers.load(Ordering::SeqCst);
        info
    }

    /// Simulated seconds per tick.
    pub fn control_period(&self) -> f64 {
        self.control_period
    }

    pub fn stop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        self.stop();
    }
}
