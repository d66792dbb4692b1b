//! Evidential drift controller: a small classifier over {normal, anomalous}
//! pseudo-classes whose exponential outputs are read as Dirichlet evidence.
//! The mutual-information spread of that Dirichlet — the concept uncertainty —
//! is the signal that routes instances between the static and dynamic
//! detectors and feeds the offline update trigger.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::AutoencoderModel;
use crate::error::{MeterError, Result};
use crate::nn::special::digamma;
use crate::nn::tape::{mlp_on_tape, register_layers, ParamId, Tape};
use crate::nn::tensor::Matrix;
use crate::nn::training::{TrainReport, TrainSettings};
use crate::nn::{mlp_forward, Adam, MlpSpec, ParameterSet};

/// Logits are clamped to this band before exponentiation.
pub const LOGIT_CLAMP: f64 = 30.0;

/// Evidence vector α over the pseudo-classes plus the derived probabilities
/// and concept uncertainty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirichletOpinion {
    pub alpha: Vec<f64>,
    pub probs: Vec<f64>,
    pub uncertainty: f64,
}

/// Self-supervised label from the static reconstruction error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PseudoLabel {
    /// Anomalous (class 1): the static detector reconstructs poorly.
    Positive,
    /// Normal (class 0): reconstructed well under low uncertainty.
    Negative,
    /// Concept uncertainty too high to trust the static error.
    Unknown,
}

impl PseudoLabel {
    pub fn class_index(self) -> Option<usize> {
        match self {
            PseudoLabel::Negative => Some(0),
            PseudoLabel::Positive => Some(1),
            PseudoLabel::Unknown => None,
        }
    }
}

/// Two-hidden-layer ReLU MLP with a 2-wide evidence head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerModel {
    params: ParameterSet,
    spec: MlpSpec,
}

pub const NUM_CLASSES: usize = 2;

impl ControllerModel {
    pub fn spec_for(input_dim: usize, hidden: usize) -> Result<MlpSpec> {
        MlpSpec::relu_hidden(vec![input_dim, hidden, hidden, NUM_CLASSES])
    }

    pub fn init<R: Rng>(input_dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        let spec = Self::spec_for(input_dim, hidden)?;
        let params = ParameterSet::init(&spec, rng);
        Ok(ControllerModel { params, spec })
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        mlp_forward(&self.params, &self.spec, x)
    }

    /// Dirichlet opinion for one instance: α = exp(clamped logits).
    pub fn opinion(&self, x: &[f64]) -> Result<DirichletOpinion> {
        let logits = self.logits(x)?;
        let alpha: Vec<f64> = logits
            .iter()
            .map(|l| l.clamp(-LOGIT_CLAMP, LOGIT_CLAMP).exp())
            .collect();
        let total: f64 = alpha.iter().sum();
        let probs: Vec<f64> = alpha.iter().map(|a| a / total).collect();
        let uncertainty = concept_uncertainty(&alpha)?;
        Ok(DirichletOpinion {
            alpha,
            probs,
            uncertainty,
        })
    }

    /// Concept uncertainty of one instance.
    pub fn uncertainty(&self, x: &[f64]) -> Result<f64> {
        Ok(self.opinion(x)?.uncertainty)
    }

    /// Concept uncertainties for many instances via one batched forward.
    pub fn uncertainties(&self, data: &[Vec<f64>]) -> Result<Vec<f64>> {
        if data.is_empty() {
            return Ok(Vec::new());
        }
        let columns: Vec<&[f64]> = data.iter().map(|x| x.as_slice()).collect();
        let logits = crate::nn::mlp::mlp_forward_batch(&self.params, &self.spec, &columns)?;
        let mut out = Vec::with_capacity(data.len());
        for j in 0..data.len() {
            let alpha: Vec<f64> = (0..NUM_CLASSES)
                .map(|c| logits.get(c, j).clamp(-LOGIT_CLAMP, LOGIT_CLAMP).exp())
                .collect();
            out.push(concept_uncertainty(&alpha)?);
        }
        Ok(out)
    }
}

/// Mutual-information spread of a Dirichlet opinion:
/// U = Σ_c p̂_c (ψ(α_c+1) − ψ(Σα+1)) − Σ_c p̂_c ln p̂_c with p̂_c = α_c/Σα.
pub fn concept_uncertainty(alpha: &[f64]) -> Result<f64> {
    if alpha.is_empty() {
        return Err(MeterError::Domain("empty evidence vector".into()));
    }
    for a in alpha {
        if !(*a > 0.0) {
            return Err(MeterError::Domain(format!(
                "Dirichlet evidence must be positive, got {a}"
            )));
        }
    }
    let total: f64 = alpha.iter().sum();
    let psi_total = digamma(total + 1.0)?;
    let mut spread = 0.0;
    let mut entropy = 0.0;
    for a in alpha {
        let p = a / total;
        spread += p * (digamma(a + 1.0)? - psi_total);
        entropy -= p * p.ln();
    }
    // mutual information is nonnegative; concentrated evidence can land a few
    // ulps below zero
    Ok((spread + entropy).max(0.0))
}

/// Reconstruction-error threshold for pseudo-labeling: the nearest-rank
/// (1−μ_p) quantile of the sorted training errors, so the top μ_p fraction
/// becomes Positive.
pub fn mu_p_to_threshold(errors: &[f64], mu_p: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(MeterError::Contract(
            "cannot derive a pseudo-label threshold from zero errors".into(),
        ));
    }
    if !(mu_p > 0.0 && mu_p < 1.0) {
        return Err(MeterError::Contract(format!(
            "mu_p must lie in (0, 1), got {mu_p}"
        )));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let rank = (((1.0 - mu_p) * n as f64) - 1e-9).ceil() as usize;
    let rank = rank.clamp(1, n);
    Ok(sorted[rank - 1])
}

/// Pseudo label from precomputed error and uncertainty values.
pub fn pseudo_label_from(
    error: f64,
    uncertainty: f64,
    error_threshold: f64,
    mu_e: f64,
) -> PseudoLabel {
    if uncertainty > mu_e {
        PseudoLabel::Unknown
    } else if error > error_threshold {
        PseudoLabel::Positive
    } else {
        PseudoLabel::Negative
    }
}

/// Pseudo label for an instance: the static error is gated by concept
/// uncertainty when a trained controller is present; during bootstrap the
/// uncertainty is treated as zero.
pub fn pseudo_label(
    detector: &AutoencoderModel,
    controller: Option<&ControllerModel>,
    x: &[f64],
    error_threshold: f64,
    mu_e: f64,
) -> Result<PseudoLabel> {
    let error = detector.score(x)?.value;
    let u = match controller {
        Some(c) => c.uncertainty(x)?,
        None => 0.0,
    };
    Ok(pseudo_label_from(error, u, error_threshold, mu_e))
}

/// How the Unknown gate behaves during controller training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UncertaintyGate {
    /// No gate: every sample gets a confident label.
    Open,
    /// Samples with uncertainty above the threshold become Unknown.
    Threshold(f64),
}

pub struct ControllerTraining<'a> {
    /// Static reconstruction errors aligned with the training pool.
    pub static_errors: &'a [f64],
    pub error_threshold: f64,
    pub gate: UncertaintyGate,
    /// Ground-truth labels to inject instead of pseudo-labels, when present.
    pub injected_labels: Option<&'a [Option<u8>]>,
}

/// Evidential loss for one sample with true class `class`:
/// L = ln Σ_k α_k − ln α_class.
pub fn evidential_loss(alpha: &[f64], class: usize) -> f64 {
    let total: f64 = alpha.iter().sum();
    total.ln() - alpha[class].ln()
}

impl ControllerModel {
    /// Records the batched evidential-loss graph: logits for the whole batch
    /// as one (C, B) block; per sample L = ln Σ_k α_k − ln α_class with
    /// α = exp(clamped logits), averaged over the batch.
    fn batch_graph(&self, batch: &[(&[f64], usize)]) -> (Tape, crate::nn::NodeId, usize) {
        let mut tape = Tape::new();
        let (nodes, count) = register_layers(&mut tape, self.params.layers(), 0);
        let columns: Vec<&[f64]> = batch.iter().map(|(x, _)| *x).collect();
        let x = tape.constant(Matrix::from_columns(&columns));
        let logits = mlp_on_tape(&mut tape, &nodes, &self.spec, x);
        let clamped = tape.clamp(logits, -LOGIT_CLAMP, LOGIT_CLAMP);
        let alpha = tape.exp(clamped);
        let ones = tape.constant(Matrix::from_vec(1, NUM_CLASSES, vec![1.0; NUM_CLASSES]).unwrap());
        let totals = tape.matmul(ones, alpha);
        let ln_totals = tape.ln(totals);
        // one-hot mask picks each sample's clamped true-class logit (= ln α)
        let mut mask = Matrix::zeros(NUM_CLASSES, batch.len());
        for (j, (_, class)) in batch.iter().enumerate() {
            mask.set(*class, j, 1.0);
        }
        let mask = tape.constant(mask);
        let picked_grid = tape.elem_mul(mask, clamped);
        let picked = tape.matmul(ones, picked_grid);
        let per_sample = tape.sub(ln_totals, picked);
        let s = tape.sum(per_sample);
        let loss = tape.scale(s, 1.0 / batch.len() as f64);
        (tape, loss, count)
    }

    /// Batch-mean evidential loss and gradients, flat-aligned with the
    /// controller parameters.
    pub fn loss_and_gradients(&self, batch: &[(&[f64], usize)]) -> Result<(f64, Vec<Matrix>)> {
        if batch.is_empty() {
            return Err(MeterError::Contract("empty batch".into()));
        }
        let (tape, loss, count) = self.batch_graph(batch);
        let grads = tape.backward(loss)?;
        let mats = (0..count).map(|i| grads.wrt(ParamId(i)).clone()).collect();
        Ok((tape.value(loss).get(0, 0), mats))
    }
}

/// A trained controller plus the uncertainty envelope of the samples it was
/// actually trained on — the natural initial value for the live threshold.
pub struct ControllerFit {
    pub model: ControllerModel,
    pub report: TrainReport,
    pub trained_gate: f64,
}

/// Trains (or fine-tunes, when `warm` is given) the controller on
/// pseudo-labeled data. Labels are recomputed each epoch with the current
/// controller; the first pass without a warm model treats uncertainty as zero.
pub fn train_controller<R: Rng>(
    data: &[Vec<f64>],
    setup: &ControllerTraining<'_>,
    hidden: usize,
    warm: Option<ControllerModel>,
    settings: &TrainSettings,
    rng: &mut R,
) -> Result<ControllerFit> {
    if data.is_empty() {
        return Err(MeterError::Contract(
            "controller training pool is empty".into(),
        ));
    }
    if setup.static_errors.len() != data.len() {
        return Err(MeterError::shape(
            "train_controller errors",
            data.len(),
            setup.static_errors.len(),
        ));
    }
    let d = data[0].len();
    let bootstrap = warm.is_none();
    let mut model = match warm {
        Some(m) => m,
        None => ControllerModel::init(d, hidden, rng)?,
    };

    let shapes: Vec<&Matrix> = model.params.flat();
    let mut adam = Adam::new(settings.lr, &shapes);
    let mut report = TrainReport::default();
    let mut best = f64::INFINITY;
    let mut stale = 0usize;
    let mut last_included: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..settings.epochs {
        // relabel with the current controller; the very first pass of a cold
        // start has no usable uncertainty signal, and an open gate makes the
        // labels a fixed function of the static errors
        let vacuous = (bootstrap && epoch == 0) || setup.gate == UncertaintyGate::Open;
        let mu_e = match setup.gate {
            UncertaintyGate::Open => f64::INFINITY,
            UncertaintyGate::Threshold(t) => t,
        };
        let us = if vacuous {
            None
        } else {
            Some(model.uncertainties(data)?)
        };
        let label_all = |us: Option<&Vec<f64>>| {
            let mut labeled: Vec<(usize, usize)> = Vec::with_capacity(data.len());
            for i in 0..data.len() {
                if let Some(Some(y)) = setup.injected_labels.map(|l| l[i]) {
                    labeled.push((i, y as usize));
                    continue;
                }
                let u = us.map_or(0.0, |us| us[i]);
                match pseudo_label_from(setup.static_errors[i], u, setup.error_threshold, mu_e) {
                    PseudoLabel::Unknown => {}
                    l => labeled.push((i, l.class_index().unwrap())),
                }
            }
            labeled
        };
        let mut labeled = label_all(us.as_ref());
        let one_class = |l: &[(usize, usize)]| {
            l.iter().all(|(_, c)| *c == 0) || l.iter().all(|(_, c)| *c == 1)
        };
        if labeled.is_empty() || (bootstrap && one_class(&labeled)) {
            if bootstrap {
                // a cold-start controller that is unsure everywhere (or
                // unsure about one whole pseudo-class) cannot gate its own
                // labels yet; treat the pass as vacuous
                labeled = label_all(None);
            } else {
                return Err(MeterError::NoConfidentSamples);
            }
        }
        if labeled.is_empty() {
            return Err(MeterError::NoConfidentSamples);
        }

        let lr = settings.lr * settings.decay.powi(epoch as i32);
        adam.set_lr(lr);
        labeled.shuffle(rng);

        let mut loss_sum = 0.0;
        for batch in labeled.chunks(settings.batch.max(1)) {
            let pairs: Vec<(&[f64], usize)> = batch
                .iter()
                .map(|&(i, class)| (data[i].as_slice(), class))
                .collect();
            let (batch_loss, grad_mats) = model.loss_and_gradients(&pairs)?;
            loss_sum += batch_loss * batch.len() as f64;
            let mut params = model.params.flat_mut();
            let grad_refs: Vec<&Matrix> = grad_mats.iter().collect();
            adam.step(&mut params, &grad_refs);
        }
        last_included = labeled.iter().map(|(i, _)| *i).collect();

        let epoch_loss = loss_sum / labeled.len() as f64;
        report.epochs_run = epoch + 1;
        report.final_loss = epoch_loss;
        report.epoch_losses.push(epoch_loss);
        if best - epoch_loss < settings.min_improvement {
            stale += 1;
            if stale >= settings.patience {
                break;
            }
        } else {
            stale = 0;
        }
        best = best.min(epoch_loss);
    }

    // the uncertainty envelope of the samples trained on last
    let trained_gate = {
        let us = model.uncertainties(data)?;
        last_included
            .iter()
            .map(|&i| us[i])
            .fold(0.0f64, f64::max)
    };
    Ok(ControllerFit {
        model,
        report,
        trained_gate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_logits_make_a_symmetric_opinion() {
        // zero-weight controller emits logits (0,0) → α=(1,1), p̂=(0.5,0.5)
        let spec = ControllerModel::spec_for(3, 4).unwrap();
        let model = ControllerModel {
            params: ParameterSet::zeros(&spec),
            spec,
        };
        let op = model.opinion(&[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(op.alpha, vec![1.0, 1.0]);
        assert_eq!(op.probs, vec![0.5, 0.5]);
    }

    #[test]
    fn probabilities_are_evidence_ratios() {
        let alpha = [3.0, 1.0];
        let total: f64 = alpha.iter().sum();
        let probs: Vec<f64> = alpha.iter().map(|a| a / total).collect();
        assert_eq!(probs, vec![0.75, 0.25]);
    }

    /// Quadrature oracle for the Dirichlet mean with C=2: E[p₁] under
    /// Beta(α₁, α₂) by Simpson integration of p·f(p).
    fn beta_mean_quadrature(a: f64, b: f64) -> f64 {
        let ln_beta = ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b);
        let f = |p: f64| -> f64 {
            if p <= 0.0 || p >= 1.0 {
                0.0
            } else {
                (a * p.ln() + (b - 1.0) * (1.0 - p).ln() - ln_beta).exp()
            }
        };
        let n = 200_000;
        let h = 1.0 / n as f64;
        let mut acc = 0.0;
        for i in 0..n {
            let x0 = i as f64 * h;
            acc += h / 6.0 * (f(x0) + 4.0 * f(x0 + h / 2.0) + f(x0 + h));
        }
        acc
    }

    fn ln_gamma(x: f64) -> f64 {
        // Stirling with shift, enough for small integer-ish arguments
        let mut x = x;
        let mut acc = 0.0;
        while x < 12.0 {
            acc -= x.ln();
            x += 1.0;
        }
        let inv = 1.0 / x;
        let inv2 = inv * inv;
        acc + 0.5 * ((2.0 * std::f64::consts::PI).ln() - x.ln())
            + x * (x.ln() - 1.0)
            + inv / 12.0 * (1.0 - inv2 / 30.0 * (1.0 - inv2 * 2.0 / 7.0))
    }

    #[test]
    fn dirichlet_mean_matches_quadrature_oracle() {
        let alpha = [2.0, 5.0];
        let total: f64 = alpha.iter().sum();
        let p1 = alpha[0] / total;
        let oracle = beta_mean_quadrature(alpha[0], alpha[1]);
        assert!(
            (p1 - oracle).abs() < 1e-6,
            "analytic {p1} vs quadrature {oracle}"
        );
    }

    #[test]
    fn uncertainty_of_unit_evidence() {
        // U(1,1) = −0.5 + ln 2
        let u = concept_uncertainty(&[1.0, 1.0]).unwrap();
        let want = -0.5 + std::f64::consts::LN_2;
        assert!((u - want).abs() < 1e-10, "got {u}, want {want}");
    }

    #[test]
    fn uncertainty_vanishes_for_concentrated_evidence() {
        let u = concept_uncertainty(&[1000.0, 1000.0]).unwrap();
        assert!(u.abs() < 5e-3, "got {u}");
    }

    #[test]
    fn uncertainty_decreases_with_evidence_mass() {
        let lo = concept_uncertainty(&[0.5, 0.5]).unwrap();
        let hi = concept_uncertainty(&[5.0, 5.0]).unwrap();
        assert!(lo > hi);

        let levels = [0.5, 1.0, 2.0, 5.0, 20.0, 100.0];
        let us: Vec<f64> = levels
            .iter()
            .map(|a| concept_uncertainty(&[*a, *a]).unwrap())
            .collect();
        for w in us.windows(2) {
            assert!(w[1] < w[0], "not strictly decreasing: {us:?}");
        }
    }

    #[test]
    fn uncertainty_is_permutation_invariant() {
        let u1 = concept_uncertainty(&[2.5, 0.7]).unwrap();
        let u2 = concept_uncertainty(&[0.7, 2.5]).unwrap();
        assert!((u1 - u2).abs() < 1e-14);
    }

    #[test]
    fn probabilities_sum_to_one_for_random_evidence() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10_000 {
            let alpha: Vec<f64> = (0..2).map(|_| rng.gen_range(1e-3..1e3)).collect();
            let total: f64 = alpha.iter().sum();
            let sum: f64 = alpha.iter().map(|a| a / total).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn uncertainty_rejects_nonpositive_evidence() {
        assert!(concept_uncertainty(&[1.0, 0.0]).is_err());
        assert!(concept_uncertainty(&[-1.0, 2.0]).is_err());
    }

    #[test]
    fn pseudo_label_truth_table() {
        // error=0, U=0 → Negative
        assert_eq!(pseudo_label_from(0.0, 0.0, 1.0, 0.1), PseudoLabel::Negative);
        // error above threshold, U=0 → Positive
        assert_eq!(pseudo_label_from(2.0, 0.0, 1.0, 0.1), PseudoLabel::Positive);
        // U just above the gate → Unknown regardless of error
        assert_eq!(
            pseudo_label_from(100.0, 0.1 + 1e-12, 1.0, 0.1),
            PseudoLabel::Unknown
        );
        assert_eq!(
            pseudo_label_from(0.0, 0.1 + 1e-12, 1.0, 0.1),
            PseudoLabel::Unknown
        );
    }

    #[test]
    fn pseudo_label_is_monotone_in_error_when_u_is_zero() {
        let thr = 0.5;
        let mut last_positive = false;
        for i in 0..100 {
            let e = i as f64 * 0.02;
            let l = pseudo_label_from(e, 0.0, thr, 0.1);
            let pos = l == PseudoLabel::Positive;
            assert!(!last_positive || pos, "step function must not flip back");
            last_positive = pos;
        }
    }

    #[test]
    fn threshold_nearest_rank() {
        let errors: Vec<f64> = (1..=10).map(|i| i as f64).collect();
        assert_eq!(mu_p_to_threshold(&errors, 0.2).unwrap(), 8.0);
        // μ_p → 1 keeps only the minimum
        assert_eq!(mu_p_to_threshold(&errors, 0.9999).unwrap(), 1.0);
        assert!(mu_p_to_threshold(&[], 0.2).is_err());
        assert!(mu_p_to_threshold(&errors, 0.0).is_err());
        assert!(mu_p_to_threshold(&errors, 1.0).is_err());
    }

    #[test]
    fn threshold_counts_expected_fraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let errors: Vec<f64> = (0..1000).map(|_| rng.gen_range(0.0..1.0)).collect();
        let thr = mu_p_to_threshold(&errors, 0.1).unwrap();
        let frac = errors.iter().filter(|e| **e > thr).count() as f64 / 1000.0;
        assert!((0.09..=0.11).contains(&frac), "fraction {frac}");
    }

    #[test]
    fn evidential_loss_hand_cases() {
        // y = class 0, α = (4,1) → ln 5 − ln 4
        let l = evidential_loss(&[4.0, 1.0], 0);
        assert!((l - (5.0f64.ln() - 4.0f64.ln())).abs() < 1e-12);
        assert!((l - 0.22314).abs() < 1e-5);
        // confident correct evidence drives the loss to zero
        let l = evidential_loss(&[1e9, 1e-3], 0);
        assert!(l < 1e-8);
    }

    #[test]
    fn controller_training_separates_pseudo_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        // synthetic pool: errors correlate with the first feature
        let data: Vec<Vec<f64>> = (0..200)
            .map(|i| {
                let hot = i % 5 == 0;
                let base = if hot { 3.0 } else { 0.0 };
                vec![
                    base + rng.gen_range(-0.3..0.3),
                    rng.gen_range(-0.3..0.3),
                ]
            })
            .collect();
        let errors: Vec<f64> = data.iter().map(|x| if x[0] > 1.5 { 2.0 } else { 0.1 }).collect();
        let threshold = 1.0;
        let setup = ControllerTraining {
            static_errors: &errors,
            error_threshold: threshold,
            gate: UncertaintyGate::Open,
            injected_labels: None,
        };
        let settings = TrainSettings {
            epochs: 120,
            ..TrainSettings::default()
        };
        let fit = train_controller(&data, &setup, 16, None, &settings, &mut rng).unwrap();
        let model = fit.model;
        assert!(fit.report.final_loss < 0.2, "loss {}", fit.report.final_loss);

        // the trained controller assigns anomalous mass to the hot cluster
        let mut correct = 0;
        for (x, e) in data.iter().zip(&errors) {
            let op = model.opinion(x).unwrap();
            let predicted = if op.probs[1] > 0.5 { 2.0 } else { 0.1 };
            if (predicted - e).abs() < 1e-9 {
                correct += 1;
            }
        }
        assert!(correct as f64 / data.len() as f64 > 0.9);
    }

    #[test]
    fn all_unknown_pool_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = vec![vec![0.0, 0.0]; 8];
        let errors = vec![0.0; 8];
        let warm = ControllerModel::init(2, 4, &mut rng).unwrap();
        let setup = ControllerTraining {
            static_errors: &errors,
            error_threshold: 1.0,
            // gate below any reachable uncertainty → everything Unknown
            gate: UncertaintyGate::Threshold(-1.0),
            injected_labels: None,
        };
        let settings = TrainSettings {
            epochs: 3,
            ..TrainSettings::default()
        };
        let err = train_controller(&data, &setup, 4, Some(warm), &settings, &mut rng);
        assert!(matches!(err, Err(MeterError::NoConfidentSamples)));
    }

    #[test]
    fn evidential_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = ControllerModel::init(3, 5, &mut rng).unwrap();
        let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let class = 1usize;
        let flat: Vec<Matrix> = model.params.flat().into_iter().cloned().collect();

        let spec = model.spec.clone();
        let eval = |ps: &[Matrix]| -> f64 {
            let layers: Vec<(Matrix, Matrix)> = ps
                .chunks(2)
                .map(|c| (c[0].clone(), c[1].clone()))
                .collect();
            let params = ParameterSet::from_layers(layers).unwrap();
            let logits = mlp_forward(&params, &spec, &x).unwrap();
            let alpha: Vec<f64> = logits
                .iter()
                .map(|l| l.clamp(-LOGIT_CLAMP, LOGIT_CLAMP).exp())
                .collect();
            evidential_loss(&alpha, class)
        };

        let mut tape = Tape::new();
        let (nodes, count) = register_layers(&mut tape, model.params.layers(), 0);
        let xn = tape.constant(Matrix::column(&x));
        let logits = mlp_on_tape(&mut tape, &nodes, &model.spec, xn);
        let clamped = tape.clamp(logits, -LOGIT_CLAMP, LOGIT_CLAMP);
        let alpha = tape.exp(clamped);
        let total = tape.sum(alpha);
        let ln_total = tape.ln(total);
        let pick = tape
            .constant(Matrix::from_vec(1, NUM_CLASSES, vec![0.0, 1.0]).unwrap());
        let ln_alpha = tape.matmul(pick, clamped);
        let loss = tape.sub(ln_total, ln_alpha);
        let grads = tape.backward(loss).unwrap();

        let h = 1e-5;
        for pi in 0..flat.len() {
            for k in 0..flat[pi].len() {
                let mut plus = flat.clone();
                plus[pi].data_mut()[k] += h;
                let mut minus = flat.clone();
                minus[pi].data_mut()[k] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = grads.wrt(ParamId(pi)).data()[k];
                let denom = a.abs().max(fd.abs()).max(1e-4);
                assert!(
                    ((a - fd).abs() / denom) < 1e-4,
                    "param {pi}[{k}]: analytic {a}, fd {fd}"
                );
            }
        }
        assert_eq!(count, flat.len());
    }
}
