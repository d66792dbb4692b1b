//! Dynamic detector: an instance-conditioned hypernetwork that emits additive
//! per-layer parameter shifts for the static autoencoder. Scoring a drifted
//! instance builds a one-off dynamic autoencoder Θ_d = Θ_s + ΔΘ(x) and takes
//! its reconstruction error, so adaptation needs no retraining.
//!
//! Shift generation is rank-1 per layer: a shared encoder embeds the
//! instance, a per-layer linear head specializes the embedding, and two
//! generator stages expand it into a weight-shaped matrix,
//! ΔW = (W₁e + b₁)·W₂ + B₂ + B. Bias shifts use the same form with a single
//! output column. Generator output stages start at zero, so a freshly
//! initialized hypernetwork leaves the static detector untouched.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{mean_squared_error, AnomalyScore, AutoencoderModel, ScoreSource};
use crate::error::{MeterError, Result};
use crate::nn::tape::{mlp_on_tape, mse_on_tape, ParamId, Tape};
use crate::nn::tensor::Matrix;
use crate::nn::training::{run_epochs, TrainReport, TrainSettings};
use crate::nn::{mlp_forward, Activation, Adam, MlpSpec, ParameterSet};

/// Rank-1 generator for one target matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ShiftGenerator {
    /// (target_rows, embed_dim)
    w1: Matrix,
    /// (target_rows, 1)
    b1: Matrix,
    /// (1, target_cols)
    w2: Matrix,
    /// (target_rows, target_cols)
    b2: Matrix,
    /// (target_rows, target_cols) layer-specific offset
    shift: Matrix,
}

impl ShiftGenerator {
    fn init<R: Rng>(rows: usize, cols: usize, embed_dim: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (rows + embed_dim) as f64).sqrt();
        let mut w1 = Matrix::zeros(rows, embed_dim);
        for v in w1.data_mut() {
            *v = rng.gen_range(-bound..bound);
        }
        ShiftGenerator {
            w1,
            b1: Matrix::zeros(rows, 1),
            // output stages start at zero so the generated shift starts at zero
            w2: Matrix::zeros(1, cols),
            b2: Matrix::zeros(rows, cols),
            shift: Matrix::zeros(rows, cols),
        }
    }

    fn generate(&self, embedding: &Matrix) -> Matrix {
        let v = self.w1.matmul(embedding).add(&self.b1);
        let mut out = v.matmul(&self.w2);
        out.add_assign(&self.b2);
        out.add_assign(&self.shift);
        out
    }

    fn flat(&self) -> [&Matrix; 5] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.shift]
    }

    fn flat_mut(&mut self) -> [&mut Matrix; 5] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.shift,
        ]
    }
}

/// Per-layer weight and bias shifts, shaped exactly like the autoencoder's
/// encoder-then-decoder parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftBundle {
    pub layers: Vec<(Matrix, Matrix)>,
}

/// Shared instance encoder, per-layer heads, and per-layer shift generators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperNetwork {
    share: ParameterSet,
    share_spec: MlpSpec,
    /// One linear head per target layer: (embed_dim, embed_dim) + bias.
    heads: Vec<(Matrix, Matrix)>,
    weight_gens: Vec<ShiftGenerator>,
    bias_gens: Vec<ShiftGenerator>,
    embed_dim: usize,
}

impl HyperNetwork {
    /// Builds a hypernetwork targeting the given autoencoder. Shared encoder
    /// and heads are Glorot-initialized; generator output stages are zero, so
    /// generated shifts start at zero.
    pub fn init<R: Rng>(target: &AutoencoderModel, embed_dim: usize, rng: &mut R) -> Result<Self> {
        let d = target.feature_dim();
        let share_spec = MlpSpec::new(vec![d, embed_dim], vec![Activation::ReLU])?;
        let share = ParameterSet::init(&share_spec, rng);
        let bound = (6.0 / (2 * embed_dim) as f64).sqrt();

        let mut heads = Vec::new();
        let mut weight_gens = Vec::new();
        let mut bias_gens = Vec::new();
        let target_layers = target
            .encoder()
            .layers()
            .iter()
            .chain(target.decoder().layers());
        for (w, b) in target_layers {
            let mut head = Matrix::zeros(embed_dim, embed_dim);
            for v in head.data_mut() {
                *v = rng.gen_range(-bound..bound);
            }
            heads.push((head, Matrix::zeros(embed_dim, 1)));
            weight_gens.push(ShiftGenerator::init(w.rows(), w.cols(), embed_dim, rng));
            bias_gens.push(ShiftGenerator::init(b.rows(), 1, embed_dim, rng));
        }
        Ok(HyperNetwork {
            share,
            share_spec,
            heads,
            weight_gens,
            bias_gens,
            embed_dim,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn num_target_layers(&self) -> usize {
        self.heads.len()
    }

    #[cfg(test)]
    fn from_parts(
        share: ParameterSet,
        share_spec: MlpSpec,
        heads: Vec<(Matrix, Matrix)>,
        weight_gens: Vec<ShiftGenerator>,
        bias_gens: Vec<ShiftGenerator>,
        embed_dim: usize,
    ) -> Self {
        HyperNetwork {
            share,
            share_spec,
            heads,
            weight_gens,
            bias_gens,
            embed_dim,
        }
    }

    /// Layer-specific embedding e⁽ⁿ⁾ = headₙ(E_share(x)).
    pub fn embed(&self, x: &[f64], layer: usize) -> Result<Vec<f64>> {
        if layer >= self.heads.len() {
            return Err(MeterError::Contract(format!(
                "layer index {layer} out of range 0..{}",
                self.heads.len()
            )));
        }
        let shared = mlp_forward(&self.share, &self.share_spec, x)?;
        let (hw, hb) = &self.heads[layer];
        let e = hw.matmul_ta(&Matrix::column(&shared)).add(hb);
        Ok(e.data().to_vec())
    }

    /// Per-layer parameter shifts for one instance.
    pub fn generate_shift(&self, x: &[f64]) -> Result<ShiftBundle> {
        let shared = Matrix::column(&mlp_forward(&self.share, &self.share_spec, x)?);
        let mut layers = Vec::with_capacity(self.heads.len());
        for n in 0..self.heads.len() {
            let (hw, hb) = &self.heads[n];
            let e = hw.matmul_ta(&shared).add(hb);
            let dw = self.weight_gens[n].generate(&e);
            let db = self.bias_gens[n].generate(&e);
            layers.push((dw, db));
        }
        Ok(ShiftBundle { layers })
    }

    /// All trainable matrices in a fixed order: shared encoder, then per
    /// target layer the head pair, weight generator, bias generator.
    pub fn flat(&self) -> Vec<&Matrix> {
        let mut out: Vec<&Matrix> = self.share.flat();
        for n in 0..self.heads.len() {
            out.push(&self.heads[n].0);
            out.push(&self.heads[n].1);
            out.extend(self.weight_gens[n].flat());
            out.extend(self.bias_gens[n].flat());
        }
        out
    }

    pub fn flat_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = self.share.flat_mut();
        for ((head, wg), bg) in self
            .heads
            .iter_mut()
            .zip(self.weight_gens.iter_mut())
            .zip(self.bias_gens.iter_mut())
        {
            out.push(&mut head.0);
            out.push(&mut head.1);
            out.extend(wg.flat_mut());
            out.extend(bg.flat_mut());
        }
        out
    }
}

/// Θ_d = Θ_s + ΔΘ, elementwise, over encoder then decoder.
pub fn dynamic_params(
    target: &AutoencoderModel,
    shift: &ShiftBundle,
) -> Result<(ParameterSet, ParameterSet)> {
    let n_enc = target.encoder().num_layers();
    let n_total = n_enc + target.decoder().num_layers();
    if shift.layers.len() != n_total {
        return Err(MeterError::shape(
            "dynamic_params",
            n_total,
            shift.layers.len(),
        ));
    }
    let shifted = |layers: &[(Matrix, Matrix)], offset: usize| -> Result<ParameterSet> {
        let mut out = Vec::with_capacity(layers.len());
        for (i, (w, b)) in layers.iter().enumerate() {
            let (dw, db) = &shift.layers[offset + i];
            if dw.shape() != w.shape() || db.shape() != b.shape() {
                return Err(MeterError::shape(
                    "dynamic_params layer",
                    format!("{:?}/{:?}", w.shape(), b.shape()),
                    format!("{:?}/{:?}", dw.shape(), db.shape()),
                ));
            }
            out.push((w.add(dw), b.add(db)));
        }
        ParameterSet::from_layers(out)
    };
    Ok((
        shifted(target.encoder().layers(), 0)?,
        shifted(target.decoder().layers(), n_enc)?,
    ))
}

/// Reconstruction error through the shifted (dynamic) autoencoder.
pub fn dynamic_score(
    target: &AutoencoderModel,
    hyper: &HyperNetwork,
    x: &[f64],
) -> Result<AnomalyScore> {
    let shift = hyper.generate_shift(x)?;
    let (enc, dec) = dynamic_params(target, &shift)?;
    let z = mlp_forward(&enc, target.encoder_spec(), x)?;
    let y = mlp_forward(&dec, target.decoder_spec(), &z)?;
    Ok(AnomalyScore {
        value: mean_squared_error(x, &y),
        source: ScoreSource::Dynamic,
    })
}

/// Records the dynamic-reconstruction loss graph for a batch. The shared
/// encoder runs batched; shift generation and the dynamic autoencoder run
/// per sample because every instance owns its own generated parameters.
/// Static parameters enter as constants unless `train_static`.
fn batch_graph(
    target: &AutoencoderModel,
    hyper: &HyperNetwork,
    batch: &[&[f64]],
    train_static: bool,
) -> (Tape, crate::nn::NodeId, usize) {
    let n_hyper = hyper.flat().len();
    let mut tape = Tape::new();

    let hyper_nodes: Vec<crate::nn::NodeId> = hyper
        .flat()
        .into_iter()
        .enumerate()
        .map(|(i, m)| tape.leaf(ParamId(i), m.clone()))
        .collect();
    let static_mats: Vec<&Matrix> = target
        .encoder()
        .flat()
        .into_iter()
        .chain(target.decoder().flat())
        .collect();
    let static_nodes: Vec<crate::nn::NodeId> = static_mats
        .iter()
        .enumerate()
        .map(|(i, m)| {
            if train_static {
                tape.leaf(ParamId(n_hyper + i), (*m).clone())
            } else {
                tape.constant((*m).clone())
            }
        })
        .collect();
    let count = if train_static {
        n_hyper + static_nodes.len()
    } else {
        n_hyper
    };

    let share_layers: Vec<(crate::nn::NodeId, crate::nn::NodeId)> = hyper_nodes
        [..hyper.share.num_layers() * 2]
        .chunks(2)
        .map(|c| (c[0], c[1]))
        .collect();
    let per_layer = &hyper_nodes[hyper.share.num_layers() * 2..];
    let n_layers = hyper.heads.len();
    let n_enc = target.encoder().num_layers();

    let xs = tape.constant(Matrix::from_columns(batch));
    let shared_block = mlp_on_tape(&mut tape, &share_layers, &hyper.share_spec, xs);

    let mut total: Option<crate::nn::NodeId> = None;
    for (j, x) in batch.iter().enumerate() {
        // this sample's column of the shared embedding
        let mut pick = Matrix::zeros(batch.len(), 1);
        pick.set(j, 0, 1.0);
        let pick = tape.constant(pick);
        let shared = tape.matmul(shared_block, pick);

        let mut dyn_layers = Vec::with_capacity(n_layers);
        for n in 0..n_layers {
            let base = n * 12;
            let (head_w, head_b) = (per_layer[base], per_layer[base + 1]);
            let e_pre = tape.matmul_ta(head_w, shared);
            let e = tape.add(e_pre, head_b);

            let gen = |tape: &mut Tape, off: usize| {
                let (w1, b1, w2, b2, shift) = (
                    per_layer[base + off],
                    per_layer[base + off + 1],
                    per_layer[base + off + 2],
                    per_layer[base + off + 3],
                    per_layer[base + off + 4],
                );
                let v_pre = tape.matmul(w1, e);
                let v = tape.add(v_pre, b1);
                let outer = tape.matmul(v, w2);
                let with_b2 = tape.add(outer, b2);
                tape.add(with_b2, shift)
            };
            let dw = gen(&mut tape, 2);
            let db = gen(&mut tape, 7);
            let w_dyn = tape.add(static_nodes[n * 2], dw);
            let b_dyn = tape.add(static_nodes[n * 2 + 1], db);
            dyn_layers.push((w_dyn, b_dyn));
        }

        let xn = tape.constant(Matrix::column(x));
        let z = mlp_on_tape(&mut tape, &dyn_layers[..n_enc], target.encoder_spec(), xn);
        let y = mlp_on_tape(&mut tape, &dyn_layers[n_enc..], target.decoder_spec(), z);
        let loss = mse_on_tape(&mut tape, y, xn);
        total = Some(match total {
            Some(t) => tape.add(t, loss),
            None => loss,
        });
    }
    let loss = tape.scale(total.unwrap(), 1.0 / batch.len() as f64);
    (tape, loss, count)
}

/// Batch-mean dynamic reconstruction loss and its gradients with respect to
/// the hypernetwork parameters (static detector frozen), flat-aligned with
/// the hypernetwork's parameter order.
pub fn dynamic_loss_and_gradients(
    target: &AutoencoderModel,
    hyper: &HyperNetwork,
    batch: &[&[f64]],
) -> Result<(f64, Vec<Matrix>)> {
    if batch.is_empty() {
        return Err(MeterError::Contract("empty batch".into()));
    }
    let (tape, loss, count) = batch_graph(target, hyper, batch, false);
    let grads = tape.backward(loss)?;
    let mats = (0..count).map(|i| grads.wrt(ParamId(i)).clone()).collect();
    Ok((tape.value(loss).get(0, 0), mats))
}

/// Trains the hypernetwork to minimize the dynamic reconstruction error.
/// Gradients flow through the generated shifts and the static computation
/// graph into the hypernetwork; the static parameters stay frozen unless
/// `train_static` is set.
pub fn train_hypernet<R: Rng>(
    target: &mut AutoencoderModel,
    hyper: &mut HyperNetwork,
    data: &[Vec<f64>],
    settings: &TrainSettings,
    train_static: bool,
    rng: &mut R,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(MeterError::Contract(
            "hypernetwork training pool is empty".into(),
        ));
    }
    let d = target.feature_dim();
    for x in data {
        if x.len() != d {
            return Err(MeterError::shape("train_hypernet", d, x.len()));
        }
    }
    if settings.epochs == 0 {
        return Ok(TrainReport::default());
    }

    let mut adam = {
        let mut shapes: Vec<&Matrix> = hyper.flat();
        if train_static {
            shapes.extend(target.encoder().flat());
            shapes.extend(target.decoder().flat());
        }
        Adam::new(settings.lr, &shapes)
    };

    let report = run_epochs(data.len(), settings, rng, |batch, lr| {
        adam.set_lr(lr);
        let columns: Vec<&[f64]> = batch.iter().map(|&i| data[i].as_slice()).collect();
        let (tape, loss, count) = batch_graph(target, hyper, &columns, train_static);
        let batch_loss = tape.value(loss).get(0, 0);
        let grads = tape.backward(loss).expect("scalar loss");
        let grad_mats: Vec<Matrix> = (0..count)
            .map(|i| grads.wrt(ParamId(i)).clone())
            .collect();
        let mut params: Vec<&mut Matrix> = hyper.flat_mut();
        if train_static {
            params.extend(target.params_flat_mut());
        }
        let grad_refs: Vec<&Matrix> = grad_mats.iter().collect();
        adam.step(&mut params, &grad_refs);
        batch_loss
    });
    Ok(report)
}
