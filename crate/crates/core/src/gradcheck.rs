//! Central finite-difference checking of analytic gradients.

use serde::{Deserialize, Serialize};

use crate::cells::CellKind;
use crate::data::{generate_sample, FusionStrategy, TaskConfig};
use crate::error::Result;
use crate::network::{model_backward, model_forward, sample_loss, Model, ModelConfig};
use crate::numerics::{derive_seed, RngStream};
use crate::params::{Parameters, TensorRef};

/// Default finite-difference step.
pub const FD_STEP: f64 = 1e-6;

/// Denominator floor of [`relative_error`]. Central differences at step 1e-6
/// on an O(1) loss carry ~1e-10 of round-off, which would swamp the relative
/// error of gradients much smaller than this.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

/// `|a − n| / max(|a|, |n|, REL_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Central differences of `loss` with respect to every entry of `params`,
/// in canonical tensor order.
pub fn numeric_gradient<P, F>(params: &mut P, step: f64, mut loss: F) -> Vec<f64>
where
    P: Parameters,
    F: FnMut(&P) -> f64,
{
    let lens: Vec<usize> = params.tensors_mut().iter().map(|t| t.len()).collect();
    let mut out = Vec::with_capacity(lens.iter().sum());
    for (t, &len) in lens.iter().enumerate() {
        for k in 0..len {
            let orig = params.tensors_mut()[t][k];
            params.tensors_mut()[t][k] = orig + step;
            let plus = loss(params);
            params.tensors_mut()[t][k] = orig - step;
            let minus = loss(params);
            params.tensors_mut()[t][k] = orig;
            out.push((plus - minus) / (2.0 * step));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckResult {
    pub max_rel_error: f64,
    /// Worst entry: tensor name, flat index, analytic and numeric values.
    pub worst_param: String,
    pub checked: usize,
}

/// Compares two flattened gradients, naming entries through `tensors`.
pub fn compare(tensors: &[TensorRef<'_>], analytic: &[f64], numeric: &[f64]) -> GradCheckResult {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = (0.0, String::new());
    let mut offset = 0;
    for t in tensors {
        for k in 0..t.data.len() {
            let e = relative_error(analytic[offset + k], numeric[offset + k]);
            if e > worst.0 || worst.1.is_empty() {
                worst = (
                    e,
                    format!(
                        "{}[{k}] analytic={:e} numeric={:e}",
                        t.name,
                        analytic[offset + k],
                        numeric[offset + k]
                    ),
                );
            }
        }
        offset += t.data.len();
    }
    GradCheckResult {
        max_rel_error: worst.0,
        worst_param: worst.1,
        checked: analytic.len(),
    }
}

impl Parameters for Model {
    fn tensors(&self, prefix: &str) -> Vec<TensorRef<'_>> {
        self.params.tensors(prefix)
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.params.tensors_mut()
    }
}

/// Checks whole-model gradients on one sample, in training mode with the
/// dropout stream seeded identically for every evaluation.
pub fn check_model(
    model: &Model,
    sample: &crate::data::SamplePair,
    step: f64,
    dropout_seed: u64,
) -> Result<GradCheckResult> {
    let (_, cache) = model_forward(model, sample, true, &mut RngStream::new(dropout_seed))?;
    let analytic = model_backward(model, &cache, sample.label)?.flatten();
    let mut probe = model.clone();
    let numeric = numeric_gradient(&mut probe, step, |m| {
        sample_loss(m, sample, true, dropout_seed).expect("validated model")
    });
    Ok(compare(&model.params.tensors(""), &analytic, &numeric))
}

/// Small-model configuration used by the gradient-check suite.
pub fn suite_config(kind: CellKind) -> ModelConfig {
    ModelConfig {
        cell: kind,
        fusion: if kind == CellKind::Conventional {
            FusionStrategy::Feat1
        } else {
            FusionStrategy::Joint
        },
        input_dim: 3,
        hidden: 4,
        steps: 5,
        bidirectional: true,
        attention: true,
        dropout: 0.1,
        num_classes: 3,
    }
}

/// Builds a model with every parameter drawn from N(0, 0.5²) (so peepholes
/// and biases are exercised too) plus a matching sample, then checks it.
pub fn check_random_model(config: ModelConfig, seed: u64, step: f64) -> Result<GradCheckResult> {
    let mut model = Model::zeros(config.clone())?;
    let mut stream = RngStream::new(derive_seed(seed, &[0]));
    for t in model.params.tensors_mut() {
        for v in t.iter_mut() {
            *v = 0.5 * stream.gaussian();
        }
    }
    let task = TaskConfig {
        num_classes: config.num_classes,
        dim: config.input_dim,
        steps: config.steps,
        noise_sigma: 0.1,
        ..TaskConfig::default()
    };
    let mut ss = RngStream::new(derive_seed(seed, &[1]));
    let class = ss.below(config.num_classes);
    let sample = generate_sample(&task, class, &mut ss)?;
    check_model(&model, &sample, step, derive_seed(seed, &[2]))
}
