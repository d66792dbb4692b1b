//! Static detector: a symmetric autoencoder trained on the historical split.
//! Its mean-squared reconstruction error is the anomaly score for inputs that
//! match the concepts seen during training.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MeterError, Result};
use crate::nn::tape::{mlp_on_tape, register_layers, ParamId, Tape};
use crate::nn::tensor::Matrix;
use crate::nn::training::{run_epochs, TrainReport, TrainSettings};
use crate::nn::{mlp_forward, Adam, MlpSpec, ParameterSet};

/// Which detector produced a score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoreSource {
    Static,
    Dynamic,
}

/// Mean squared reconstruction error, tagged with its origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnomalyScore {
    pub value: f64,
    pub source: ScoreSource,
}

/// Encoder/decoder pair with mirrored widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderModel {
    encoder: ParameterSet,
    decoder: ParameterSet,
    encoder_spec: MlpSpec,
    decoder_spec: MlpSpec,
    latent_dim: usize,
}

impl AutoencoderModel {
    /// Fresh model with Glorot-initialized weights.
    pub fn init<R: Rng>(encoder_spec: MlpSpec, rng: &mut R) -> Result<Self> {
        let decoder_spec = encoder_spec.mirrored()?;
        let encoder = ParameterSet::init(&encoder_spec, rng);
        let decoder = ParameterSet::init(&decoder_spec, rng);
        Ok(AutoencoderModel {
            latent_dim: encoder_spec.output_dim(),
            encoder,
            decoder,
            encoder_spec,
            decoder_spec,
        })
    }

    pub fn from_parts(
        encoder: ParameterSet,
        decoder: ParameterSet,
        encoder_spec: MlpSpec,
    ) -> Result<Self> {
        let decoder_spec = encoder_spec.mirrored()?;
        Ok(AutoencoderModel {
            latent_dim: encoder_spec.output_dim(),
            encoder,
            decoder,
            encoder_spec,
            decoder_spec,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder_spec.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn encoder(&self) -> &ParameterSet {
        &self.encoder
    }

    pub fn decoder(&self) -> &ParameterSet {
        &self.decoder
    }

    pub fn encoder_spec(&self) -> &MlpSpec {
        &self.encoder_spec
    }

    pub fn decoder_spec(&self) -> &MlpSpec {
        &self.decoder_spec
    }

    /// Mutable flat view over encoder-then-decoder parameters.
    pub(crate) fn params_flat_mut(&mut self) -> Vec<&mut Matrix> {
        self.encoder
            .flat_mut()
            .into_iter()
            .chain(self.decoder.flat_mut())
            .collect()
    }

    /// Total number of dense layers across encoder and decoder.
    pub fn num_layers(&self) -> usize {
        self.encoder.num_layers() + self.decoder.num_layers()
    }

    /// x → latent → reconstruction.
    pub fn reconstruct(&self, x: &[f64]) -> Result<Vec<f64>> {
        let z = mlp_forward(&self.encoder, &self.encoder_spec, x)?;
        mlp_forward(&self.decoder, &self.decoder_spec, &z)
    }

    /// Mean squared reconstruction error of `x`.
    pub fn score(&self, x: &[f64]) -> Result<AnomalyScore> {
        let y = self.reconstruct(x)?;
        Ok(AnomalyScore {
            value: mean_squared_error(x, &y),
            source: ScoreSource::Static,
        })
    }

    /// Records the batched reconstruction-loss graph: the batch runs through
    /// encoder and decoder as one (d, B) block, the loss is the batch mean of
    /// the per-sample mean squared errors.
    fn batch_graph(&self, batch: &[&[f64]]) -> (Tape, crate::nn::NodeId, usize) {
        let mut tape = Tape::new();
        let (enc_nodes, next) = register_layers(&mut tape, self.encoder.layers(), 0);
        let (dec_nodes, count) = register_layers(&mut tape, self.decoder.layers(), next);
        let x = tape.constant(Matrix::from_columns(batch));
        let z = mlp_on_tape(&mut tape, &enc_nodes, &self.encoder_spec, x);
        let y = mlp_on_tape(&mut tape, &dec_nodes, &self.decoder_spec, z);
        let diff = tape.sub(y, x);
        let sq = tape.elem_mul(diff, diff);
        let s = tape.sum(sq);
        let loss = tape.scale(s, 1.0 / (batch.len() * self.feature_dim()) as f64);
        (tape, loss, count)
    }

    /// Batch-mean reconstruction loss and its gradients, flat-aligned with
    /// encoder-then-decoder parameters.
    pub fn loss_and_gradients(&self, batch: &[&[f64]]) -> Result<(f64, Vec<Matrix>)> {
        if batch.is_empty() {
            return Err(MeterError::Contract("empty batch".into()));
        }
        let (tape, loss, count) = self.batch_graph(batch);
        let grads = tape.backward(loss)?;
        let mats = (0..count).map(|i| grads.wrt(ParamId(i)).clone()).collect();
        Ok((tape.value(loss).get(0, 0), mats))
    }

    /// Minibatch reconstruction training; warm-starts from the current
    /// parameters, so it serves both initial training and fine-tuning.
    pub fn fit<R: Rng>(
        &mut self,
        data: &[Vec<f64>],
        settings: &TrainSettings,
        rng: &mut R,
    ) -> Result<TrainReport> {
        if data.is_empty() {
            return Err(MeterError::Contract(
                "autoencoder training pool is empty".into(),
            ));
        }
        let d = self.feature_dim();
        for x in data {
            if x.len() != d {
                return Err(MeterError::shape("autoencoder fit", d, x.len()));
            }
        }
        if settings.epochs == 0 {
            return Ok(TrainReport::default());
        }

        let shapes: Vec<&Matrix> = self
            .encoder
            .flat()
            .into_iter()
            .chain(self.decoder.flat())
            .collect();
        let mut adam = Adam::new(settings.lr, &shapes);

        let report = run_epochs(data.len(), settings, rng, |batch, lr| {
            adam.set_lr(lr);
            let columns: Vec<&[f64]> = batch.iter().map(|&i| data[i].as_slice()).collect();
            let (batch_loss, grad_mats) = self
                .loss_and_gradients(&columns)
                .expect("validated batch");
            let mut params = self.params_flat_mut();
            let grad_refs: Vec<&Matrix> = grad_mats.iter().collect();
            adam.step(&mut params, &grad_refs);
            batch_loss
        });
        Ok(report)
    }
}

pub fn mean_squared_error(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let n = x.len().max(1) as f64;
    x.iter()
        .zip(y)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n
}

/// Trains a fresh autoencoder on the historical pool.
pub fn train_autoencoder<R: Rng>(
    history: &[Vec<f64>],
    encoder_spec: MlpSpec,
    settings: &TrainSettings,
    rng: &mut R,
) -> Result<(AutoencoderModel, TrainReport)> {
    if history.is_empty() {
        return Err(MeterError::Contract(
            "autoencoder training pool is empty".into(),
        ));
    }
    let mut model = AutoencoderModel::init(encoder_spec, rng)?;
    let report = model.fit(history, settings, rng)?;
    Ok((model, report))
}

/// Encoder widths for a feature dim and latent dim: one hidden layer halfway
/// between them, or none when they already touch.
pub fn default_encoder_spec(d: usize, latent: usize, hidden: &[usize]) -> Result<MlpSpec> {
    let mut widths = vec![d];
    if hidden.is_empty() {
        let mid = (d + latent).div_ceil(2);
        if mid > latent && mid < d {
            widths.push(mid);
        }
    } else {
        widths.extend_from_slice(hidden);
    }
    widths.push(latent);
    MlpSpec::relu_hidden(widths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    // toy pools see only a handful of optimizer steps per epoch, so the
    // production per-epoch decay would starve them; tests flatten it
    fn quick_settings(epochs: usize) -> TrainSettings {
        TrainSettings {
            epochs,
            decay: 0.999,
            batch: 8,
            ..TrainSettings::default()
        }
    }

    #[test]
    fn constant_point_is_reconstructible() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = vec![vec![0.5, -1.0, 2.0]; 32];
        let spec = MlpSpec::relu_hidden(vec![3, 3, 2]).unwrap();
        let (model, report) =
            train_autoencoder(&data, spec, &quick_settings(300), &mut rng).unwrap();
        assert!(report.final_loss < 1e-4, "loss {}", report.final_loss);
        let y = model.reconstruct(&data[0]).unwrap();
        for (a, b) in y.iter().zip(&data[0]) {
            assert!((a - b).abs() < 1e-2);
        }
        let s = model.score(&data[0]).unwrap();
        assert_eq!(s.source, ScoreSource::Static);
        assert!(s.value < 1e-4);
    }

    #[test]
    fn line_data_with_one_latent_dim() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // 2-D points on a line through the origin
        let data: Vec<Vec<f64>> = (0..64)
            .map(|i| {
                let t = (i as f64 / 32.0) - 1.0;
                vec![t, 0.5 * t]
            })
            .collect();
        let spec = MlpSpec::relu_hidden(vec![2, 4, 1]).unwrap();
        let (_, report) = train_autoencoder(&data, spec, &quick_settings(600), &mut rng).unwrap();
        assert!(report.final_loss < 1e-3, "loss {}", report.final_loss);
    }

    #[test]
    fn seeded_training_is_reproducible() {
        let data: Vec<Vec<f64>> = (0..40)
            .map(|i| vec![(i as f64 * 0.3).sin(), (i as f64 * 0.7).cos()])
            .collect();
        let spec = MlpSpec::relu_hidden(vec![2, 3, 1]).unwrap();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            train_autoencoder(&data, spec.clone(), &quick_settings(50), &mut rng)
                .unwrap()
                .0
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
    }

    #[test]
    fn empty_history_is_a_contract_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = MlpSpec::relu_hidden(vec![2, 1]).unwrap();
        assert!(train_autoencoder(&[], spec, &quick_settings(1), &mut rng).is_err());
    }

    #[test]
    fn zero_weight_net_propagates_biases() {
        // encoder 2→1 zero weights bias 0; decoder 1→2 zero weights bias (3,4):
        // every input reconstructs to (3,4)
        let enc_spec = MlpSpec::new(vec![2, 1], vec![Activation::Identity]).unwrap();
        let encoder =
            ParameterSet::from_layers(vec![(Matrix::zeros(2, 1), Matrix::zeros(1, 1))]).unwrap();
        let decoder =
            ParameterSet::from_layers(vec![(Matrix::zeros(1, 2), Matrix::column(&[3.0, 4.0]))])
                .unwrap();
        let model = AutoencoderModel::from_parts(encoder, decoder, enc_spec).unwrap();
        assert_eq!(model.reconstruct(&[7.0, -2.0]).unwrap(), vec![3.0, 4.0]);
        // x=(0,0), y=(3,4) → (9+16)/2
        assert_eq!(model.score(&[0.0, 0.0]).unwrap().value, 12.5);
    }

    #[test]
    fn score_zero_iff_exact_reconstruction() {
        // identity autoencoder reconstructs exactly → score 0
        let enc_spec = MlpSpec::new(vec![2, 2], vec![Activation::Identity]).unwrap();
        let identity = || {
            ParameterSet::from_layers(vec![(Matrix::identity(2), Matrix::zeros(2, 1))]).unwrap()
        };
        let model = AutoencoderModel::from_parts(identity(), identity(), enc_spec).unwrap();
        let x = [1.25, -0.5];
        assert_eq!(model.score(&x).unwrap().value, 0.0);
        assert_eq!(model.reconstruct(&x).unwrap(), x.to_vec());
    }

    #[test]
    fn score_matches_componentwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = MlpSpec::relu_hidden(vec![4, 3, 2]).unwrap();
        let model = AutoencoderModel::init(spec, &mut rng).unwrap();
        for _ in 0..25 {
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let y = model.reconstruct(&x).unwrap();
            let mut acc = 0.0;
            for i in 0..4 {
                acc += (x[i] - y[i]).powi(2);
            }
            let want = acc / 4.0;
            let got = model.score(&x).unwrap().value;
            assert!((got - want).abs() < 1e-15);
            assert!(got >= 0.0);
        }
    }

    #[test]
    fn training_loss_non_increasing_on_noiseless_linear_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<Vec<f64>> = (0..64)
            .map(|i| {
                let t = (i as f64 / 16.0) - 2.0;
                vec![t, -t, 2.0 * t]
            })
            .collect();
        let spec = MlpSpec::relu_hidden(vec![3, 4, 1]).unwrap();
        let settings = TrainSettings {
            epochs: 200,
            lr: 2e-3,
            batch: 64,
            ..TrainSettings::default()
        };
        let (_, report) = train_autoencoder(&data, spec, &settings, &mut rng).unwrap();
        for w in report.epoch_losses.windows(2) {
            assert!(
                w[1] <= w[0] + 1e-9,
                "epoch loss increased: {} -> {}",
                w[0],
                w[1]
            );
        }
    }

    #[test]
    fn default_encoder_spec_is_symmetric_and_sane() {
        let spec = default_encoder_spec(33, 8, &[]).unwrap();
        assert_eq!(spec.widths().first(), Some(&33));
        assert_eq!(spec.widths().last(), Some(&8));
        assert_eq!(spec.mirrored().unwrap().widths().first(), Some(&8));
        let spec2 = default_encoder_spec(4, 4, &[]).unwrap();
        assert_eq!(spec2.widths(), &[4, 4]);
    }
}
