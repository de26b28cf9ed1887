//! Reverse-mode autodiff, the trainable models, training and checkpoints.

pub mod autodiff;
pub mod checkpoint;
pub mod models;
pub mod train;

use serde::{Deserialize, Serialize};

pub use autodiff::{Tape, Tensor, Var};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointModel};
pub use models::{CnnConfig, CnnModel, IinnConfig, IinnModel, OutputInit, ScatNetConfig, ScatNetModel};
pub use train::{train, TrainConfig, TrainReport};

use crate::error::{Error, Result};
use crate::ga::GaModel;
use crate::linalg::SampleMatrix;
use crate::metrics::{norm_pdf, norm_sf, GaussianPrediction};

/// Scalar model output that attributions differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "threshold", rename_all = "snake_case")]
pub enum OutputTarget {
    Mu,
    Sigma,
    /// Probability that the target exceeds the given threshold.
    Exceedance(f64),
}

impl OutputTarget {
    pub fn evaluate(&self, p: &GaussianPrediction) -> f64 {
        match *self {
            OutputTarget::Mu => p.mu,
            OutputTarget::Sigma => p.sigma,
            OutputTarget::Exceedance(a) => norm_sf((a - p.mu) / p.sigma),
        }
    }
}

/// A model mapping a flattened `[z500, sm]` row to a Gaussian forecast.
pub trait Predictor: Send + Sync {
    fn input_dim(&self) -> usize;

    fn predict_batch(&self, x: &SampleMatrix) -> Result<Vec<GaussianPrediction>>;

    /// Gradient of `target` with respect to each input row.
    fn input_gradients(&self, x: &SampleMatrix, target: OutputTarget) -> Result<SampleMatrix>;

    /// `(trainable, fixed)` parameter counts.
    fn parameter_count(&self) -> (usize, usize);

    fn predict(&self, x: &[f64]) -> Result<GaussianPrediction> {
        let m = SampleMatrix::new(1, x.len(), x.to_vec())?;
        Ok(self.predict_batch(&m)?[0])
    }

    fn outputs(&self, x: &SampleMatrix, target: OutputTarget) -> Result<Vec<f64>> {
        Ok(self.predict_batch(x)?.iter().map(|p| target.evaluate(p)).collect())
    }
}

/// A tape-differentiable model with `(mu, raw_sigma)` outputs.
pub trait Trainable {
    fn parameters(&self) -> &[Tensor];

    fn parameters_mut(&mut self) -> &mut [Tensor];

    /// Pack the selected rows of prepared inputs into the tensor `forward` expects.
    fn batch_tensor(&self, inputs: &SampleMatrix, idx: &[usize]) -> Tensor;

    fn forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> (Var, Var);

    /// Extra loss term; when `grads` is given its gradient is added in place.
    fn penalty(&self, _grads: Option<&mut [Tensor]>) -> f64 {
        0.0
    }
}

impl Predictor for GaModel {
    fn input_dim(&self) -> usize {
        self.dim()
    }

    fn predict_batch(&self, x: &SampleMatrix) -> Result<Vec<GaussianPrediction>> {
        if x.d() != self.dim() {
            return Err(Error::shape(self.dim(), x.d()));
        }
        Ok(x.rows()
            .map(|r| GaussianPrediction {
                mu: self.index(r),
                sigma: self.sigma,
            })
            .collect())
    }

    fn input_gradients(&self, x: &SampleMatrix, target: OutputTarget) -> Result<SampleMatrix> {
        let preds = self.predict_batch(x)?;
        let mut out = SampleMatrix::zeros(x.n(), x.d());
        for (i, p) in preds.iter().enumerate() {
            let scale = match target {
                OutputTarget::Mu => 1.0,
                OutputTarget::Sigma => 0.0,
                OutputTarget::Exceedance(a) => norm_pdf((a - p.mu) / p.sigma) / p.sigma,
            };
            out.row_mut(i)
                .iter_mut()
                .zip(&self.pattern)
                .for_each(|(o, m)| *o = scale * m);
        }
        Ok(out)
    }

    fn parameter_count(&self) -> (usize, usize) {
        GaModel::parameter_count(self)
    }
}
