use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{matmul, matmul_nt, matmul_tn, seeded_random_matrix, softmax_in_place, Distribution, Matrix};

/// Number of affine layers in a [`MiniMlp`].
pub const MLP_LAYERS: usize = 4;
/// Input and hidden widths of the full-size plugin (about 4.9M parameters
/// at 8 tasks).
pub const FULL_WIDTHS: [usize; 4] = [4096, 1024, 512, 256];
/// Input and hidden widths used for CPU-scale runs.
pub const DESK_WIDTHS: [usize; 4] = [1024, 256, 128, 64];

/// Four affine layers, ReLU between them, softmax on top.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiniMlp {
    layer_dims: Vec<usize>,
    weights: Vec<Matrix>,
    biases: Vec<Vec<f32>>,
}

/// Activations kept by [`MiniMlp::forward_batch`] for the backward pass.
pub struct MlpCache {
    /// Inputs to each layer; `inputs[0]` is the batch itself.
    inputs: Vec<Matrix>,
    pub probs: Matrix,
}

/// Gradients with the same layout as the model.
#[derive(Debug, Clone)]
pub struct MlpGradients {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f32>>,
}

impl MiniMlp {
    /// `[input, h1, h2, h3, n_tasks]`.
    pub fn dims(widths: [usize; 4], n_tasks: usize) -> Vec<usize> {
        let mut d = widths.to_vec();
        d.push(n_tasks);
        d
    }

    fn check_dims(dims: &[usize]) -> Result<()> {
        if dims.len() != MLP_LAYERS + 1 || dims.contains(&0) {
            return Err(Error::Config(format!(
                "mini-MLP needs {} positive layer sizes, got {dims:?}",
                MLP_LAYERS + 1
            )));
        }
        Ok(())
    }

    /// All weights and biases zero: every input maps to the uniform
    /// distribution.
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::check_dims(dims)?;
        Ok(Self {
            layer_dims: dims.to_vec(),
            weights: dims.windows(2).map(|w| Matrix::zeros(w[0], w[1])).collect(),
            biases: dims[1..].iter().map(|&n| vec![0.0; n]).collect(),
        })
    }

    /// He-uniform hidden layers; the output layer and all biases start at
    /// zero, which keeps training equivariant under relabeling of tasks.
    pub fn new(dims: &[usize], seed: u64) -> Result<Self> {
        let mut mlp = Self::zeros(dims)?;
        for (i, w) in mlp.weights.iter_mut().enumerate().take(MLP_LAYERS - 1) {
            let scale = (6.0 / w.rows() as f32).sqrt();
            *w = seeded_random_matrix(w.rows(), w.cols(), seed.wrapping_add(i as u64), Distribution::Uniform { scale });
        }
        Ok(mlp)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn n_tasks(&self) -> usize {
        self.layer_dims[MLP_LAYERS]
    }

    /// `Σ dims[i]·dims[i+1] + dims[i+1]`.
    pub fn parameter_count_for(dims: &[usize]) -> usize {
        dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn parameter_count(&self) -> usize {
        Self::parameter_count_for(&self.layer_dims)
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f32>] {
        &self.biases
    }

    /// Bias of the final (logit) layer.
    pub(crate) fn output_bias_mut(&mut self) -> &mut [f32] {
        self.biases.last_mut().expect("MLP_LAYERS > 0")
    }

    pub(crate) fn validate(&self) -> Result<()> {
        Self::check_dims(&self.layer_dims)?;
        let ok = self.weights.len() == MLP_LAYERS
            && self.biases.len() == MLP_LAYERS
            && (0..MLP_LAYERS).all(|i| {
                self.weights[i].shape() == (self.layer_dims[i], self.layer_dims[i + 1])
                    && self.biases[i].len() == self.layer_dims[i + 1]
            });
        if !ok {
            return Err(Error::Config("mini-MLP weights do not match layer_dims".into()));
        }
        Ok(())
    }

    /// Pre-softmax scores for each row of `x`, plus the cached activations.
    fn run(&self, x: &Matrix) -> Result<(Matrix, Vec<Matrix>)> {
        if x.cols() != self.input_dim() {
            return Err(Error::Config(format!(
                "feature width {} does not match router input {}",
                x.cols(),
                self.input_dim()
            )));
        }
        let mut inputs = Vec::with_capacity(MLP_LAYERS);
        let mut h = x.clone();
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = matmul(&h, w)?;
            for r in 0..z.rows() {
                for (v, &bias) in z.row_mut(r).iter_mut().zip(b) {
                    *v += bias;
                    if i + 1 < MLP_LAYERS {
                        *v = v.max(0.0);
                    }
                }
            }
            inputs.push(std::mem::replace(&mut h, z));
        }
        Ok((h, inputs))
    }

    pub fn logits(&self, features: &[f32]) -> Result<Vec<f32>> {
        let x = Matrix::row_vector(features);
        Ok(self.run(&x)?.0.into_data())
    }

    /// Task distribution for one feature vector.
    pub fn forward(&self, features: &[f32]) -> Result<Vec<f32>> {
        let mut p = self.logits(features)?;
        softmax_in_place(&mut p);
        Ok(p)
    }

    pub fn forward_batch(&self, x: &Matrix) -> Result<MlpCache> {
        let (mut probs, inputs) = self.run(x)?;
        for r in 0..probs.rows() {
            softmax_in_place(probs.row_mut(r));
        }
        Ok(MlpCache { inputs, probs })
    }

    /// Mean cross-entropy of the cached batch against `labels`.
    pub fn loss(cache: &MlpCache, labels: &[usize]) -> f32 {
        let n = labels.len().max(1) as f32;
        labels
            .iter()
            .enumerate()
            .map(|(r, &y)| -cache.probs.get(r, y).max(f32::MIN_POSITIVE).ln())
            .sum::<f32>()
            / n
    }

    /// Gradients of the mean cross-entropy loss.
    pub fn backward(&self, cache: &MlpCache, labels: &[usize]) -> Result<MlpGradients> {
        let n = labels.len();
        if n != cache.probs.rows() {
            return Err(Error::Contract(format!(
                "{n} labels for a batch of {}",
                cache.probs.rows()
            )));
        }
        // dL/dz for the output layer: (p - onehot) / n
        let mut dz = cache.probs.clone();
        for (r, &y) in labels.iter().enumerate() {
            if y >= self.n_tasks() {
                return Err(Error::Data(format!("label {y} outside {} tasks", self.n_tasks())));
            }
            dz.row_mut(r)[y] -= 1.0;
        }
        dz.scale_in_place(1.0 / n as f32);

        let mut weights = vec![Matrix::zeros(0, 0); MLP_LAYERS];
        let mut biases = vec![Vec::new(); MLP_LAYERS];
        for i in (0..MLP_LAYERS).rev() {
            let input = &cache.inputs[i];
            weights[i] = matmul_tn(input, &dz)?;
            let mut db = vec![0.0; dz.cols()];
            for r in 0..dz.rows() {
                for (acc, &g) in db.iter_mut().zip(dz.row(r)) {
                    *acc += g;
                }
            }
            biases[i] = db;
            if i > 0 {
                let mut dh = matmul_nt(&dz, &self.weights[i])?;
                // input is the ReLU output of layer i-1
                for (g, &a) in dh.data_mut().iter_mut().zip(input.data()) {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                }
                dz = dh;
            }
        }
        Ok(MlpGradients { weights, biases })
    }

    pub(crate) fn apply(&mut self, grads: &MlpGradients, learning_rate: f32) -> Result<()> {
        for (w, g) in self.weights.iter_mut().zip(&grads.weights) {
            w.axpy(-learning_rate, g)?;
        }
        for (b, g) in self.biases.iter_mut().zip(&grads.biases) {
            for (v, &d) in b.iter_mut().zip(g) {
                *v -= learning_rate * d;
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(Matrix::is_finite)
            && self.biases.iter().flatten().all(|v| v.is_finite())
    }
}
