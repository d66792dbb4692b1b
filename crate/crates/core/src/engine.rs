//! Orchestration: two-stage training on the historical split (detector, then
//! pseudo-labeled controller and hypernetwork), and the streaming loop that
//! routes each instance by concept uncertainty, feeds the update window, and
//! adopts republished snapshots without ever reading a partial one.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::Arc;
use std::thread::JoinHandle;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{default_encoder_spec, train_autoencoder, AnomalyScore, ScoreSource};
use crate::config::{MeterConfig, MuEPolicy};
use crate::controller::{
    mu_p_to_threshold, train_controller, ControllerTraining, UncertaintyGate,
};
use crate::data::Instance;
use crate::error::{MeterError, Result};
use crate::eval::{TraceLine, TraceRecord, UpdateEvent};
use crate::hypernet::{dynamic_score, train_hypernet, HyperNetwork};
use crate::nn::pca_latent_dim;
use crate::updater::{update_models, Snapshot, SnapshotStore, WindowState};

/// RNG streams per training stage, so ablations and reruns stay aligned.
const RNG_STREAM_SCD: u64 = 1;
const RNG_STREAM_IEC: u64 = 2;
const RNG_STREAM_DSD: u64 = 3;
const RNG_STREAM_UPDATE_BASE: u64 = 1000;

fn stage_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Outcome of scoring one stream instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamDecision {
    pub t: usize,
    pub score: AnomalyScore,
    pub uncertainty: f64,
    pub route: ScoreSource,
    pub update_fired: bool,
    /// Snapshot version observed at step start and used for the whole step.
    pub version: u64,
}

impl StreamDecision {
    pub fn trace_record(&self) -> TraceRecord {
        TraceRecord {
            t: self.t,
            score: self.score.value,
            u: self.uncertainty,
            route: match self.route {
                ScoreSource::Static => "static".into(),
                ScoreSource::Dynamic => "dynamic".into(),
            },
            update: self.update_fired,
            version: self.version,
        }
    }
}

/// Whether offline updates run inline at the trigger step or on a background
/// updater thread.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateMode {
    Synchronous,
    Asynchronous,
}

/// Two-stage training on the historical pool: the autoencoder first, then the
/// evidential controller on its pseudo-labels and the hypernetwork on the
/// same pool, each driven by an independent seeded RNG stream. The gate μ_e
/// initializes to the largest training-pool uncertainty unless fixed.
pub fn train(history: &[Instance], cfg: &MeterConfig) -> Result<Snapshot> {
    cfg.validate()?;
    if history.is_empty() {
        return Err(MeterError::Contract("historical split is empty".into()));
    }
    let d = history[0].dim();
    let feats: Vec<Vec<f64>> = history
        .iter()
        .map(|inst| {
            if inst.dim() != d {
                Err(MeterError::shape("train history", d, inst.dim()))
            } else {
                Ok(inst.features().to_vec())
            }
        })
        .collect::<Result<_>>()?;
    // ground truth enters training only through the explicit injection flag
    let injected: Option<Vec<Option<u8>>> =
        cfg.use_pl.then(|| history.iter().map(|i| i.label()).collect());

    let latent = if feats.len() >= 2 {
        pca_latent_dim(&feats, cfg.explained_variance)?
    } else {
        1
    };
    let encoder_spec = default_encoder_spec(d, latent, &cfg.scd_hidden)?;

    let mut rng = stage_rng(cfg.seed, RNG_STREAM_SCD);
    let (mut detector, _) = train_autoencoder(&feats, encoder_spec, &cfg.train, &mut rng)?;

    let errors: Vec<f64> = feats
        .iter()
        .map(|x| detector.score(x).map(|s| s.value))
        .collect::<Result<_>>()?;
    let error_threshold = mu_p_to_threshold(&errors, cfg.mu_p)?;

    let mut mu_e = match cfg.mu_e {
        MuEPolicy::Fixed(v) => v,
        MuEPolicy::MaxTrainUncertainty => 0.0,
    };
    let mut controller = None;
    if cfg.use_iec {
        let gate = match cfg.mu_e {
            MuEPolicy::Fixed(v) => UncertaintyGate::Threshold(v),
            // the live gate does not exist yet during initial training
            MuEPolicy::MaxTrainUncertainty => UncertaintyGate::Open,
        };
        let setup = ControllerTraining {
            static_errors: &errors,
            error_threshold,
            gate,
            injected_labels: injected.as_deref(),
        };
        let mut rng = stage_rng(cfg.seed, RNG_STREAM_IEC);
        let fit = train_controller(&feats, &setup, cfg.iec_hidden, None, &cfg.train, &mut rng)?;
        if cfg.mu_e == MuEPolicy::MaxTrainUncertainty {
            mu_e = fit.trained_gate;
        }
        controller = Some(fit.model);
    }

    let mut hyper = None;
    if cfg.use_dsd {
        let mut rng = stage_rng(cfg.seed, RNG_STREAM_DSD);
        let mut h = HyperNetwork::init(&detector, cfg.embed_dim, &mut rng)?;
        train_hypernet(
            &mut detector,
            &mut h,
            &feats,
            &cfg.train,
            cfg.joint_static,
            &mut rng,
        )?;
        hyper = Some(h);
    }

    Ok(Snapshot {
        version: 1,
        detector,
        controller,
        hyper,
        mu_e,
    })
}

struct UpdateJob {
    base: Arc<Snapshot>,
    window_x: Vec<Vec<f64>>,
    window_u: Vec<f64>,
    trigger_step: usize,
    excess: f64,
}

struct AsyncUpdater {
    job_tx: Option<Sender<UpdateJob>>,
    event_rx: Receiver<UpdateEvent>,
    busy: Arc<AtomicBool>,
    handle: Option<JoinHandle<Result<()>>>,
}

/// Streaming state: the published-snapshot cell, the sliding window, and the
/// optional background updater.
pub struct StreamSession {
    store: Arc<SnapshotStore>,
    window: WindowState,
    cfg: MeterConfig,
    mode: UpdateMode,
    t: usize,
    seen_version: u64,
    trace: Vec<TraceLine>,
    updates: Vec<UpdateEvent>,
    updater: Option<AsyncUpdater>,
}

impl StreamSession {
    pub fn new(snapshot: Snapshot, cfg: MeterConfig, mode: UpdateMode) -> Result<Self> {
        cfg.validate()?;
        let mu_e = snapshot.mu_e;
        let version = snapshot.version;
        let store = Arc::new(SnapshotStore::new(snapshot));
        let window = WindowState::new(cfg.delta_l, cfg.t_max, cfg.mu_o, mu_e);

        let updater = if mode == UpdateMode::Asynchronous && cfg.use_ous {
            let (job_tx, job_rx) = channel::<UpdateJob>();
            let (event_tx, event_rx) = channel::<UpdateEvent>();
            let busy = Arc::new(AtomicBool::new(false));
            let thread_store = store.clone();
            let thread_busy = busy.clone();
            let thread_cfg = cfg.clone();
            let handle = std::thread::spawn(move || -> Result<()> {
                while let Ok(job) = job_rx.recv() {
                    let mut rng = stage_rng(
                        thread_cfg.seed,
                        RNG_STREAM_UPDATE_BASE + job.base.version,
                    );
                    let next = update_models(
                        &job.base,
                        &job.window_x,
                        &job.window_u,
                        &thread_cfg,
                        &mut rng,
                    )?;
                    if let Some(next) = next {
                        let event = UpdateEvent::new(
                            job.trigger_step,
                            next.version,
                            job.excess,
                            job.base.mu_e,
                            next.mu_e,
                        );
                        thread_store.publish(next);
                        let _ = event_tx.send(event);
                    }
                    thread_busy.store(false, Ordering::Release);
                }
                Ok(())
            });
            Some(AsyncUpdater {
                job_tx: Some(job_tx),
                event_rx,
                busy,
                handle: Some(handle),
            })
        } else {
            None
        };

        Ok(StreamSession {
            store,
            window,
            cfg,
            mode,
            t: 0,
            seen_version: version,
            trace: Vec::new(),
            updates: Vec::new(),
            updater,
        })
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.store.load()
    }

    fn drain_events(&mut self) {
        if let Some(up) = &self.updater {
            let drained: Vec<UpdateEvent> = up.event_rx.try_iter().collect();
            for ev in drained {
                self.trace.push(TraceLine::Update(ev.clone()));
                self.updates.push(ev);
            }
        }
    }

    /// Scores one instance. The snapshot version loaded here is used for the
    /// entire step; a concurrently published update is adopted at the next
    /// step boundary.
    pub fn step(&mut self, x: &[f64]) -> Result<StreamDecision> {
        let t = self.t;
        self.t += 1;
        self.drain_events();
        let snap = self.store.load();
        if snap.version != self.seen_version {
            self.seen_version = snap.version;
            self.window.set_mu_e(snap.mu_e);
        }

        let d = snap.detector.feature_dim();
        if x.len() != d {
            return Err(MeterError::shape("stream step", d, x.len()).at_step(t));
        }

        let iec_active = self.cfg.use_iec && snap.controller.is_some();
        let dsd_active = self.cfg.use_dsd && snap.hyper.is_some();
        let uncertainty = if iec_active {
            snap.controller
                .as_ref()
                .unwrap()
                .uncertainty(x)
                .map_err(|e| e.at_step(t))?
        } else {
            0.0
        };
        let dynamic_route = dsd_active && (!iec_active || uncertainty > snap.mu_e);
        let score = if dynamic_route {
            dynamic_score(&snap.detector, snap.hyper.as_ref().unwrap(), x)
                .map_err(|e| e.at_step(t))?
        } else {
            snap.detector.score(x).map_err(|e| e.at_step(t))?
        };

        let mut update_fired = false;
        if self.cfg.use_ous {
            let triggered = self.window.observe(x, uncertainty);
            if triggered && !self.updater_busy() {
                update_fired = self.launch_update(&snap, t).map_err(|e| e.at_step(t))?;
            }
        }

        let decision = StreamDecision {
            t,
            score,
            uncertainty,
            route: score.source,
            update_fired,
            version: snap.version,
        };
        self.trace.push(TraceLine::Decision(decision.trace_record()));
        Ok(decision)
    }

    fn updater_busy(&self) -> bool {
        self.updater
            .as_ref()
            .is_some_and(|u| u.busy.load(Ordering::Acquire))
    }

    fn launch_update(&mut self, snap: &Arc<Snapshot>, t: usize) -> Result<bool> {
        let window_x = self.window.window_features();
        let window_u = self.window.window_uncertainties();
        let excess = self.window.excess_sum();
        match self.mode {
            UpdateMode::Synchronous => {
                let mut rng =
                    stage_rng(self.cfg.seed, RNG_STREAM_UPDATE_BASE + snap.version);
                let Some(next) = update_models(snap, &window_x, &window_u, &self.cfg, &mut rng)?
                else {
                    return Ok(false);
                };
                let event =
                    UpdateEvent::new(t, next.version, excess, snap.mu_e, next.mu_e);
                let published = self.store.publish(next);
                self.seen_version = published.version;
                self.window.reset_after_update();
                self.window.set_mu_e(published.mu_e);
                self.trace.push(TraceLine::Update(event.clone()));
                self.updates.push(event);
                Ok(true)
            }
            UpdateMode::Asynchronous => {
                let up = self.updater.as_ref().expect("async session has an updater");
                up.busy.store(true, Ordering::Release);
                up.job_tx
                    .as_ref()
                    .expect("updater channel open")
                    .send(UpdateJob {
                        base: snap.clone(),
                        window_x,
                        window_u,
                        trigger_step: t,
                        excess,
                    })
                    .map_err(|_| {
                        MeterError::Contract("updater thread terminated early".into())
                    })?;
                // accumulation restarts now; μ_e changes at publication
                self.window.reset_after_update();
                Ok(true)
            }
        }
    }

    /// Joins the updater (if any), flushes remaining events, and returns the
    /// final snapshot with the observed trace.
    pub fn finish(mut self) -> Result<(Arc<Snapshot>, Vec<TraceLine>, Vec<UpdateEvent>)> {
        if let Some(mut up) = self.updater.take() {
            drop(up.job_tx.take());
            if let Some(handle) = up.handle.take() {
                handle
                    .join()
                    .map_err(|_| MeterError::Contract("updater thread panicked".into()))??;
            }
            let drained: Vec<UpdateEvent> = up.event_rx.try_iter().collect();
            for ev in drained {
                self.trace.push(TraceLine::Update(ev.clone()));
                self.updates.push(ev);
            }
        }
        Ok((self.store.load(), self.trace, self.updates))
    }
}

/// A finished streaming run.
pub struct StreamRun {
    pub decisions: Vec<StreamDecision>,
    pub trace: Vec<TraceLine>,
    pub updates: Vec<UpdateEvent>,
    pub final_snapshot: Arc<Snapshot>,
}

/// Runs the full stream through a session; decisions come back in stream
/// order and I/O-free errors carry the failing step index.
pub fn run_stream(
    snapshot: Snapshot,
    stream: &[Instance],
    cfg: &MeterConfig,
    mode: UpdateMode,
) -> Result<StreamRun> {
    let mut session = StreamSession::new(snapshot, cfg.clone(), mode)?;
    let mut decisions = Vec::with_capacity(stream.len());
    for inst in stream {
        decisions.push(session.step(inst.features())?);
    }
    let (final_snapshot, trace, updates) = session.finish()?;
    Ok(StreamRun {
        decisions,
        trace,
        updates,
        final_snapshot,
    })
}
