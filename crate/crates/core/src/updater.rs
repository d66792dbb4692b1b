//! Offline updating: a sliding window accumulates above-threshold concept
//! uncertainties; when the excess mass passes the trigger level (or too much
//! time has passed), the recent window becomes the new training pool, every
//! module is fine-tuned from the live snapshot, the uncertainty gate μ_e is
//! EMA-adapted, and a new snapshot version is published atomically.

use std::collections::VecDeque;
use std::path::Path;
use std::sync::{Arc, RwLock};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::AutoencoderModel;
use crate::config::{MeterConfig, MuOPolicy};
use crate::controller::{
    mu_p_to_threshold, train_controller, ControllerModel, ControllerTraining, UncertaintyGate,
};
use crate::error::{MeterError, Result};
use crate::hypernet::{train_hypernet, HyperNetwork};
use crate::nn::training::TrainSettings;

/// EMA weight on the previous gate value when adapting μ_e.
pub const EMA_BETA: f64 = 0.9;

/// μ_e′ = β·μ_e + (1−β)·max(window uncertainties).
pub fn update_mu_e(current: f64, window_uncertainties: &[f64]) -> Result<f64> {
    let max = window_uncertainties
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(MeterError::Contract(
            "mu_e update needs a nonempty window".into(),
        ));
    }
    Ok(EMA_BETA * current + (1.0 - EMA_BETA) * max)
}

/// Sliding-window accumulator over the last ΔL (instance, uncertainty) pairs.
/// Keeps the excess-uncertainty sum S = Σ 1[Uᵢ>μ_e]·Uᵢ incrementally.
#[derive(Debug, Clone)]
pub struct WindowState {
    delta_l: usize,
    buffer: VecDeque<(Vec<f64>, f64)>,
    excess_sum: f64,
    steps_since_update: usize,
    t_max: usize,
    mu_o: MuOPolicy,
    mu_e: f64,
}

impl WindowState {
    pub fn new(delta_l: usize, t_max: usize, mu_o: MuOPolicy, mu_e: f64) -> Self {
        WindowState {
            delta_l: delta_l.max(1),
            buffer: VecDeque::with_capacity(delta_l.max(1)),
            excess_sum: 0.0,
            steps_since_update: 0,
            t_max,
            mu_o,
            mu_e,
        }
    }

    pub fn mu_e(&self) -> f64 {
        self.mu_e
    }

    /// Absolute trigger level; the fraction mode scales with ΔL and μ_e.
    pub fn mu_o_abs(&self) -> f64 {
        match self.mu_o {
            MuOPolicy::WindowFraction(f) => f * self.delta_l as f64 * self.mu_e,
            MuOPolicy::Absolute(v) => v,
        }
    }

    pub fn excess_sum(&self) -> f64 {
        self.excess_sum
    }

    pub fn steps_since_update(&self) -> usize {
        self.steps_since_update
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    /// Recomputes S from the buffer; the incremental sum must track this.
    pub fn brute_force_excess(&self) -> f64 {
        self.buffer
            .iter()
            .filter(|(_, u)| *u > self.mu_e)
            .map(|(_, u)| *u)
            .sum()
    }

    /// Slides the window by one observation and reports whether the update
    /// trigger fires: S > μ_o over a full ΔL window, or Δt > T_max. The
    /// uncertainty sum spans ΔL steps by definition, so the mass branch stays
    /// quiet while the buffer refills after an update.
    pub fn observe(&mut self, x: &[f64], u: f64) -> bool {
        debug_assert!(u >= 0.0, "uncertainty must be nonnegative");
        if self.buffer.len() == self.delta_l {
            if let Some((_, old)) = self.buffer.pop_front() {
                if old > self.mu_e {
                    self.excess_sum -= old;
                }
            }
        }
        if u > self.mu_e {
            self.excess_sum += u;
        }
        self.buffer.push_back((x.to_vec(), u));
        self.steps_since_update += 1;
        let full = self.buffer.len() == self.delta_l;
        (full && self.excess_sum > self.mu_o_abs()) || self.steps_since_update > self.t_max
    }

    /// Adopts a new gate value; S depends on μ_e, so it is rebuilt.
    pub fn set_mu_e(&mut self, mu_e: f64) {
        self.mu_e = mu_e;
        self.excess_sum = self.brute_force_excess();
    }

    /// Clears accumulation after an update has been taken.
    pub fn reset_after_update(&mut self) {
        self.buffer.clear();
        self.excess_sum = 0.0;
        self.steps_since_update = 0;
    }

    pub fn window_features(&self) -> Vec<Vec<f64>> {
        self.buffer.iter().map(|(x, _)| x.clone()).collect()
    }

    pub fn window_uncertainties(&self) -> Vec<f64> {
        self.buffer.iter().map(|(_, u)| *u).collect()
    }
}

/// Immutable published bundle of every trained module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub version: u64,
    pub detector: AutoencoderModel,
    pub controller: Option<ControllerModel>,
    pub hyper: Option<HyperNetwork>,
    pub mu_e: f64,
}

const SNAPSHOT_FORMAT: u32 = 1;

#[derive(Serialize, Deserialize)]
struct SnapshotFile {
    format: u32,
    snapshot: Snapshot,
}

impl Snapshot {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = SnapshotFile {
            format: SNAPSHOT_FORMAT,
            snapshot: self.clone(),
        };
        let mut out = serde_json::to_vec(&file)?;
        out.push(b'\n');
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Snapshot> {
        let text = std::fs::read_to_string(path)?;
        let file: SnapshotFile = serde_json::from_str(&text)?;
        if file.format != SNAPSHOT_FORMAT {
            return Err(MeterError::Data(format!(
                "unsupported snapshot format {} (expected {SNAPSHOT_FORMAT})",
                file.format
            )));
        }
        Ok(file.snapshot)
    }
}

/// Single-writer / multi-reader snapshot cell. Readers take an `Arc` at step
/// start and keep scoring against it even while the next version is built.
pub struct SnapshotStore {
    inner: RwLock<Arc<Snapshot>>,
}

impl SnapshotStore {
    pub fn new(snapshot: Snapshot) -> Self {
        SnapshotStore {
            inner: RwLock::new(Arc::new(snapshot)),
        }
    }

    pub fn load(&self) -> Arc<Snapshot> {
        self.inner.read().expect("snapshot lock poisoned").clone()
    }

    /// Publishes a strictly newer version.
    pub fn publish(&self, next: Snapshot) -> Arc<Snapshot> {
        let mut slot = self.inner.write().expect("snapshot lock poisoned");
        assert!(
            next.version > slot.version,
            "snapshot versions must strictly increase ({} -> {})",
            slot.version,
            next.version
        );
        *slot = Arc::new(next);
        slot.clone()
    }
}

/// Fine-tunes every module on the window data (the window replaces the
/// training pool), bumps the version, and EMA-adapts μ_e. An empty window is
/// a no-op. With zero fine-tune epochs only the version and μ_e change.
pub fn update_models<R: Rng>(
    prev: &Snapshot,
    window_x: &[Vec<f64>],
    window_u: &[f64],
    cfg: &MeterConfig,
    rng: &mut R,
) -> Result<Option<Snapshot>> {
    if window_x.is_empty() {
        return Ok(None);
    }
    let mu_e_next = update_mu_e(prev.mu_e, window_u)?;
    let mut detector = prev.detector.clone();
    let mut controller = prev.controller.clone();
    let mut hyper = prev.hyper.clone();

    let settings = TrainSettings {
        epochs: cfg.finetune_epochs,
        lr: cfg.finetune_lr,
        ..cfg.train.clone()
    };
    if settings.epochs > 0 {
        // in a ΔL-sized pool a couple of true anomalies would dominate the
        // reconstruction loss; the pseudo-label threshold already marks them,
        // so the reconstructors fine-tune on the believed-normal remainder
        let errors_pre: Vec<f64> = window_x
            .iter()
            .map(|x| detector.score(x).map(|s| s.value))
            .collect::<Result<_>>()?;
        let pre_threshold = mu_p_to_threshold(&errors_pre, cfg.mu_p)?;
        let kept: Vec<Vec<f64>> = window_x
            .iter()
            .zip(&errors_pre)
            .filter(|(_, e)| **e <= pre_threshold)
            .map(|(x, _)| x.clone())
            .collect();
        let pool: &[Vec<f64>] = if kept.is_empty() { window_x } else { &kept };

        detector.fit(pool, &settings, rng)?;

        let errors: Vec<f64> = window_x
            .iter()
            .map(|x| detector.score(x).map(|s| s.value))
            .collect::<Result<_>>()?;
        let error_threshold = mu_p_to_threshold(&errors, cfg.mu_p)?;

        if let Some(warm) = controller.take() {
            let setup = ControllerTraining {
                static_errors: &errors,
                error_threshold,
                gate: UncertaintyGate::Threshold(mu_e_next),
                injected_labels: None,
            };
            controller = match train_controller(
                window_x,
                &setup,
                cfg.iec_hidden,
                Some(warm.clone()),
                &settings,
                rng,
            ) {
                Ok(fit) => Some(fit.model),
                // every window sample above the gate: keep the previous
                // controller rather than training on nothing
                Err(MeterError::NoConfidentSamples) => Some(warm),
                Err(e) => return Err(e),
            };
        }

        if let Some(h) = hyper.as_mut() {
            train_hypernet(&mut detector, h, pool, &settings, cfg.joint_static, rng)?;
        }
    }

    Ok(Some(Snapshot {
        version: prev.version + 1,
        detector,
        controller,
        hyper,
        mu_e: mu_e_next,
    }))
}
