use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MeterError, Result};
use crate::nn::tensor::Matrix;

/// Per-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    ReLU,
    Identity,
}

/// Architecture of a dense MLP: layer widths plus one activation per layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    widths: Vec<usize>,
    activations: Vec<Activation>,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activations: Vec<Activation>) -> Result<Self> {
        if widths.len() < 2 {
            return Err(MeterError::Contract(format!(
                "an MLP needs at least 2 widths, got {}",
                widths.len()
            )));
        }
        if widths.iter().any(|w| *w == 0) {
            return Err(MeterError::Contract("zero-width MLP layer".into()));
        }
        if activations.len() != widths.len() - 1 {
            return Err(MeterError::shape(
                "MlpSpec activations",
                widths.len() - 1,
                activations.len(),
            ));
        }
        Ok(MlpSpec { widths, activations })
    }

    /// ReLU on hidden layers, identity on the output layer.
    pub fn relu_hidden(widths: Vec<usize>) -> Result<Self> {
        let n = widths.len().saturating_sub(1);
        let mut activations = vec![Activation::ReLU; n];
        if let Some(last) = activations.last_mut() {
            *last = Activation::Identity;
        }
        MlpSpec::new(widths, activations)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// Same widths reversed; used for the decoder of a symmetric autoencoder.
    pub fn mirrored(&self) -> Result<MlpSpec> {
        let widths: Vec<usize> = self.widths.iter().rev().copied().collect();
        MlpSpec::relu_hidden(widths)
    }
}

/// Ordered dense layers. Weights are stored `(in_dim, out_dim)`, biases as
/// `(out_dim, 1)` columns, so layer n's output dim chains into layer n+1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    layers: Vec<(Matrix, Matrix)>,
}

impl ParameterSet {
    pub fn from_layers(layers: Vec<(Matrix, Matrix)>) -> Result<Self> {
        for (i, (w, b)) in layers.iter().enumerate() {
            if b.shape() != (w.cols(), 1) {
                return Err(MeterError::shape(
                    "ParameterSet bias",
                    format!("({}, 1)", w.cols()),
                    format!("{:?}", b.shape()),
                ));
            }
            if i + 1 < layers.len() && layers[i + 1].0.rows() != w.cols() {
                return Err(MeterError::shape(
                    "ParameterSet chain",
                    w.cols(),
                    layers[i + 1].0.rows(),
                ));
            }
        }
        Ok(ParameterSet { layers })
    }

    /// Glorot-uniform weights in ±√(6/(fan_in+fan_out)), zero biases.
    pub fn init<R: Rng>(spec: &MlpSpec, rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(spec.num_layers());
        for n in 0..spec.num_layers() {
            let (fan_in, fan_out) = (spec.widths()[n], spec.widths()[n + 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut w = Matrix::zeros(fan_in, fan_out);
            for v in w.data_mut() {
                *v = rng.gen_range(-bound..bound);
            }
            layers.push((w, Matrix::zeros(fan_out, 1)));
        }
        ParameterSet { layers }
    }

    pub fn zeros(spec: &MlpSpec) -> Self {
        let layers = (0..spec.num_layers())
            .map(|n| {
                let (i, o) = (spec.widths()[n], spec.widths()[n + 1]);
                (Matrix::zeros(i, o), Matrix::zeros(o, 1))
            })
            .collect();
        ParameterSet { layers }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, n: usize) -> (&Matrix, &Matrix) {
        let (w, b) = &self.layers[n];
        (w, b)
    }

    pub fn layers(&self) -> &[(Matrix, Matrix)] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [(Matrix, Matrix)] {
        &mut self.layers
    }

    /// Flat view over all weight and bias matrices, weight-then-bias per layer.
    pub fn flat(&self) -> Vec<&Matrix> {
        self.layers.iter().flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn flat_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|(w, b)| w.is_finite() && b.is_finite())
    }

    /// Elementwise sum with another set of identical shapes.
    pub fn add(&self, other: &ParameterSet) -> Result<ParameterSet> {
        if self.layers.len() != other.layers.len() {
            return Err(MeterError::shape(
                "ParameterSet::add",
                self.layers.len(),
                other.layers.len(),
            ));
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        for ((w1, b1), (w2, b2)) in self.layers.iter().zip(&other.layers) {
            if w1.shape() != w2.shape() || b1.shape() != b2.shape() {
                return Err(MeterError::shape(
                    "ParameterSet::add",
                    format!("{:?}/{:?}", w1.shape(), b1.shape()),
                    format!("{:?}/{:?}", w2.shape(), b2.shape()),
                ));
            }
            layers.push((w1.add(w2), b1.add(b2)));
        }
        Ok(ParameterSet { layers })
    }
}

fn apply_activation(v: &mut Matrix, act: Activation) {
    if act == Activation::ReLU {
        for x in v.data_mut() {
            if *x < 0.0 {
                *x = 0.0;
            }
        }
    }
}

/// Forward pass over a whole block of column-packed inputs, without a tape.
pub fn mlp_forward_batch(
    params: &ParameterSet,
    spec: &MlpSpec,
    columns: &[&[f64]],
) -> Result<Matrix> {
    if columns.iter().any(|c| c.len() != spec.input_dim()) {
        return Err(MeterError::shape(
            "mlp_forward_batch",
            spec.input_dim(),
            columns.iter().map(|c| c.len()).find(|l| *l != spec.input_dim()).unwrap_or(0),
        ));
    }
    let mut h = Matrix::from_columns(columns);
    for (n, (w, b)) in params.layers().iter().enumerate() {
        let mut z = w.matmul_ta(&h);
        let cols = z.cols();
        for (i, x) in z.data_mut().iter_mut().enumerate() {
            *x += b.data()[i / cols];
        }
        apply_activation(&mut z, spec.activations()[n]);
        h = z;
    }
    Ok(h)
}

/// Plain forward pass; input and output are column vectors as slices.
pub fn mlp_forward(params: &ParameterSet, spec: &MlpSpec, input: &[f64]) -> Result<Vec<f64>> {
    if input.len() != spec.input_dim() {
        return Err(MeterError::shape("mlp_forward", spec.input_dim(), input.len()));
    }
    if params.num_layers() != spec.num_layers() {
        return Err(MeterError::shape(
            "mlp_forward layers",
            spec.num_layers(),
            params.num_layers(),
        ));
    }
    let mut h = Matrix::column(input);
    for (n, (w, b)) in params.layers().iter().enumerate() {
        if w.rows() != h.rows() {
            return Err(MeterError::shape("mlp_forward layer", w.rows(), h.rows()));
        }
        let mut z = w.matmul_ta(&h);
        z.add_assign(b);
        apply_activation(&mut z, spec.activations()[n]);
        h = z;
    }
    Ok(h.data().to_vec())
}
