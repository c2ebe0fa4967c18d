//! RMSprop, the mini-batch loop, rank-1 evaluation and checkpoints.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SamplePair;
use crate::error::{Error, Result};
use crate::network::{
    cross_entropy, model_backward_into, model_forward, Model, ModelConfig, ModelParams,
};
use crate::numerics::{argmax, derive_seed, RngStream};
use crate::params::Parameters;
use crate::textfmt;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// `acc ← ρ·acc + (1−ρ)·g²;  θ ← θ − lr·g / (√acc + ε)`, per element.
#[derive(Debug, Clone, PartialEq)]
pub struct RmspropState {
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
    /// One accumulator per parameter tensor, in canonical order.
    pub accumulators: Vec<Vec<f64>>,
}

impl RmspropState {
    pub fn new<P: Parameters>(params: &P, learning_rate: f64, decay: f64, epsilon: f64) -> Self {
        RmspropState {
            learning_rate,
            decay,
            epsilon,
            accumulators: params
                .tensors("")
                .iter()
                .map(|t| vec![0.0; t.data.len()])
                .collect(),
        }
    }

    pub fn update<P: Parameters>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let g = grads.tensors("");
        let p = params.tensors_mut();
        if g.len() != p.len() || p.len() != self.accumulators.len() {
            return Err(Error::shape(
                "rmsprop_update",
                format!(
                    "{} parameter tensors, {} gradients, {} accumulators",
                    p.len(),
                    g.len(),
                    self.accumulators.len()
                ),
            ));
        }
        for ((theta, grad), acc) in p.into_iter().zip(&g).zip(&mut self.accumulators) {
            if theta.len() != grad.data.len() || theta.len() != acc.len() {
                return Err(Error::shape(
                    "rmsprop_update",
                    format!("tensor `{}` size mismatch", grad.name),
                ));
            }
            for ((w, &gk), a) in theta.iter_mut().zip(grad.data).zip(acc.iter_mut()) {
                *a = self.decay * *a + (1.0 - self.decay) * gk * gk;
                *w -= self.learning_rate * gk / (a.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// Free-function form of [`RmspropState::update`].
pub fn rmsprop_update<P: Parameters>(state: &mut RmspropState, params: &mut P, grads: &P) -> Result<()> {
    state.update(params, grads)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
    /// Drives shuffling and dropout.
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 32,
            learning_rate: 3e-3,
            decay: 0.9,
            epsilon: 1e-8,
            seed: 1,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.decay) {
            return Err(Error::Config("rmsprop decay must lie in [0, 1)".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("rmsprop epsilon must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training-mode loss over the epoch.
    pub train_loss: f64,
    pub valid_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub optimizer: RmspropState,
}

/// Mini-batch training with RMSprop on the batch-mean gradient.
///
/// Each epoch shuffles the sample order (when enabled) from a stream seeded
/// by `derive_seed(seed, [0])`; the dropout stream of sample `k` in epoch `e`
/// is seeded by `derive_seed(seed, [1, e, k])`, `k` being its dataset index.
pub fn train(
    model: &mut Model,
    train_set: &[SamplePair],
    valid_set: &[SamplePair],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    for s in train_set.iter().chain(valid_set) {
        model.check_sample(s)?;
    }

    let mut optimizer = RmspropState::new(&model.params, cfg.learning_rate, cfg.decay, cfg.epsilon);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut shuffler = RngStream::new(derive_seed(cfg.seed, &[0]));
    let mut grads = ModelParams::zeros(&model.config);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            shuffler.shuffle(&mut order);
        }
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grads.zero();
            for &k in batch {
                let sample = &train_set[k];
                let mut dropout = RngStream::new(derive_seed(cfg.seed, &[1, epoch as u64, k as u64]));
                let (probs, cache) = model_forward(model, sample, true, &mut dropout)?;
                loss_sum += cross_entropy(&probs, sample.label)?;
                model_backward_into(model, &cache, sample.label, &mut grads)?;
            }
            let scale = 1.0 / batch.len() as f64;
            for t in grads.tensors_mut() {
                t.iter_mut().for_each(|v| *v *= scale);
            }
            optimizer.update(&mut model.params, &grads)?;
        }
        let valid_accuracy = if valid_set.is_empty() {
            None
        } else {
            Some(evaluate(model, valid_set)?.accuracy)
        };
        history.push(EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / train_set.len() as f64,
            valid_accuracy,
        });
    }
    Ok(TrainOutcome { history, optimizer })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

/// Rank-1 accuracy; ties go to the lowest class index.
pub fn evaluate(model: &Model, dataset: &[SamplePair]) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty dataset".into()));
    }
    let k = model.config.num_classes;
    let mut confusion = vec![vec![0usize; k]; k];
    let mut correct = 0;
    for s in dataset {
        let pred = argmax(&model.predict(s)?);
        confusion[s.label][pred] += 1;
        if pred == s.label {
            correct += 1;
        }
    }
    Ok(Evaluation {
        accuracy: correct as f64 / dataset.len() as f64,
        correct,
        total: dataset.len(),
        confusion,
    })
}

/// Provenance stored alongside the parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub model_seed: u64,
    pub data_seed: u64,
    pub train_seed: u64,
    pub epochs: usize,
    pub final_train_loss: Option<f64>,
    pub final_valid_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OptimizerDoc {
    learning_rate: f64,
    decay: f64,
    epsilon: f64,
    accumulators: Vec<NamedTensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointDoc {
    format_version: u32,
    config: ModelConfig,
    metadata: TrainingMetadata,
    params: Vec<NamedTensor>,
    optimizer: Option<OptimizerDoc>,
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u32,
}

fn named_tensors(model: &Model) -> Vec<NamedTensor> {
    model
        .params
        .tensors("")
        .into_iter()
        .map(|t| NamedTensor {
            name: t.name,
            shape: t.shape,
            data: t.data.to_vec(),
        })
        .collect()
}

/// Writes the model (and optionally optimizer state) as one JSON document.
pub fn save_checkpoint(
    model: &Model,
    optimizer: Option<&RmspropState>,
    metadata: &TrainingMetadata,
    path: &Path,
) -> Result<()> {
    let params = named_tensors(model);
    if let Some(t) = params.iter().find(|t| t.data.iter().any(|v| !v.is_finite())) {
        return Err(Error::Config(format!(
            "refusing to save non-finite values in `{}`",
            t.name
        )));
    }
    let optimizer = optimizer.map(|o| OptimizerDoc {
        learning_rate: o.learning_rate,
        decay: o.decay,
        epsilon: o.epsilon,
        accumulators: params
            .iter()
            .zip(&o.accumulators)
            .map(|(p, a)| NamedTensor {
                name: p.name.clone(),
                shape: p.shape.clone(),
                data: a.clone(),
            })
            .collect(),
    });
    let doc = CheckpointDoc {
        format_version: CHECKPOINT_FORMAT_VERSION,
        config: model.config.clone(),
        metadata: metadata.clone(),
        params,
        optimizer,
    };
    textfmt::write_pretty(&doc, path)
}

#[derive(Debug, Clone)]
pub struct LoadedCheckpoint {
    pub model: Model,
    pub optimizer: Option<RmspropState>,
    pub metadata: TrainingMetadata,
}

fn fill(
    expected: &[(String, Vec<usize>)],
    tensors: &[NamedTensor],
    field: &str,
    path: &Path,
) -> Result<Vec<Vec<f64>>> {
    let bad = |i: usize, msg: String| Error::Field {
        path: path.to_path_buf(),
        field: format!("{field}[{i}]"),
        msg,
    };
    if tensors.len() != expected.len() {
        return Err(bad(
            tensors.len().min(expected.len()),
            format!("expected {} tensors, found {}", expected.len(), tensors.len()),
        ));
    }
    let mut out = Vec::with_capacity(tensors.len());
    for (i, ((name, shape), t)) in expected.iter().zip(tensors).enumerate() {
        if &t.name != name {
            return Err(bad(i, format!("expected tensor `{name}`, found `{}`", t.name)));
        }
        if &t.shape != shape || t.data.len() != shape.iter().product::<usize>() {
            return Err(bad(
                i,
                format!(
                    "`{name}` expects shape {shape:?}, found {:?} with {} values",
                    t.shape,
                    t.data.len()
                ),
            ));
        }
        out.push(t.data.clone());
    }
    Ok(out)
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if let Ok(probe) = serde_json::from_str::<VersionProbe>(&text) {
        if probe.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Version {
                path: path.to_path_buf(),
                found: probe.format_version,
                expected: CHECKPOINT_FORMAT_VERSION,
            });
        }
    }
    let doc: CheckpointDoc = textfmt::parse_document(&text, path)?;
    doc.config.validate().map_err(|e| Error::Field {
        path: path.to_path_buf(),
        field: "config".into(),
        msg: e.to_string(),
    })?;
    let mut model = Model::zeros(doc.config.clone())?;
    let expected: Vec<(String, Vec<usize>)> = model
        .params
        .tensors("")
        .into_iter()
        .map(|t| (t.name, t.shape))
        .collect();
    let values = fill(&expected, &doc.params, "params", path)?;
    for (dst, src) in model.params.tensors_mut().into_iter().zip(values) {
        dst.copy_from_slice(&src);
    }
    let optimizer = match doc.optimizer {
        None => None,
        Some(o) => Some(RmspropState {
            learning_rate: o.learning_rate,
            decay: o.decay,
            epsilon: o.epsilon,
            accumulators: fill(&expected, &o.accumulators, "optimizer.accumulators", path)?,
        }),
    };
    Ok(LoadedCheckpoint {
        model,
        optimizer,
        metadata: doc.metadata,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::CellKind;
    use crate::data::{generate_split, FusionStrategy, Split, TaskConfig};
    use crate::numerics::Vector;

    fn small_task() -> TaskConfig {
        TaskConfig {
            num_classes: 4,
            dim: 3,
            steps: 5,
            train_per_class: 8,
            valid_per_class: 3,
            test_per_class: 3,
            ..TaskConfig::default()
        }
    }

    fn small_config(cell: CellKind, fusion: FusionStrategy) -> ModelConfig {
        ModelConfig {
            cell,
            fusion,
            input_dim: 3,
            hidden: 4,
            steps: 5,
            bidirectional: true,
            attention: true,
            dropout: 0.1,
            num_classes: 4,
        }
    }

    #[test]
    fn rmsprop_examples() {
        let mut p = ModelParams::zeros(&small_config(CellKind::Glf, FusionStrategy::Joint));
        let mut s = RngStream::new(1);
        for t in p.tensors_mut() {
            t.iter_mut().for_each(|v| *v = s.gaussian());
        }
        let mut opt = RmspropState::new(&p, 0.001, 0.9, 1e-8);
        for a in &mut opt.accumulators {
            a.iter_mut().for_each(|v| *v = 2.0);
        }
        let before = p.clone();
        let zero = ModelParams::zeros(&small_config(CellKind::Glf, FusionStrategy::Joint));
        opt.update(&mut p, &zero).unwrap();
        assert_eq!(p, before);
        assert!(opt.accumulators.iter().flatten().all(|&a| (a - 1.8).abs() < 1e-15));

        // fresh accumulator, g = ±1
        let mut opt = RmspropState::new(&p, 0.001, 0.9, 1e-8);
        let mut g = zero.clone();
        let n = g.branches[0].head.bc.len();
        g.branches[0].head.bc = Vector((0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect());
        let before = p.clone();
        opt.update(&mut p, &g).unwrap();
        let step = 0.001 / (0.1f64.sqrt() + 1e-8);
        assert!((step - 0.003_162_277_560_168_379).abs() < 1e-15);
        for i in 0..n {
            let d = before.branches[0].head.bc[i] - p.branches[0].head.bc[i];
            let expect = if i % 2 == 0 { step } else { -step };
            assert!((d - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn rmsprop_steps_are_bounded() {
        let cfg = small_config(CellKind::Conventional, FusionStrategy::Feat1);
        let mut p = ModelParams::zeros(&cfg);
        let mut g = ModelParams::zeros(&cfg);
        let mut s = RngStream::new(2);
        for t in g.tensors_mut() {
            t.iter_mut().for_each(|v| *v = 100.0 * s.gaussian());
        }
        let mut opt = RmspropState::new(&p, 0.01, 0.9, 1e-8);
        opt.update(&mut p, &g).unwrap();
        let bound = 0.01 / (1.0f64 - 0.9).sqrt();
        assert!(p.flatten().iter().all(|v| v.abs() <= bound + 1e-12));
    }

    #[test]
    fn rmsprop_shape_mismatch() {
        let a = ModelParams::zeros(&small_config(CellKind::Glf, FusionStrategy::Joint));
        let mut b = ModelParams::zeros(&small_config(CellKind::Conventional, FusionStrategy::Score));
        let mut opt = RmspropState::new(&b, 0.1, 0.9, 1e-8);
        assert!(opt.update(&mut b, &a).is_err());
    }

    #[test]
    fn zero_learning_rate_is_noop() {
        let task = small_task();
        let train_set = generate_split(&task, Split::Train).unwrap();
        let cfg = small_config(CellKind::Slf, FusionStrategy::Joint);
        let mut model = Model::init(cfg, 3).unwrap();
        let before = model.clone();
        let tc = TrainConfig {
            epochs: 1,
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let out = train(&mut model, &train_set, &[], &tc).unwrap();
        assert_eq!(out.history.len(), 1);
        assert_eq!(model, before);
        assert!(out.history[0].valid_accuracy.is_none());
    }

    #[test]
    fn train_rejects_bad_input() {
        let cfg = small_config(CellKind::Glf, FusionStrategy::Joint);
        let mut model = Model::init(cfg, 3).unwrap();
        let tc = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let train_set = generate_split(&small_task(), Split::Train).unwrap();
        assert!(train(&mut model, &train_set, &[], &tc).is_err());
        assert!(train(&mut model, &[], &[], &TrainConfig::default()).is_err());
        let wrong = generate_split(&TaskConfig { dim: 2, ..small_task() }, Split::Train).unwrap();
        assert!(train(&mut model, &wrong, &[], &TrainConfig::default()).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let task = small_task();
        let train_set = generate_split(&task, Split::Train).unwrap();
        let valid = generate_split(&task, Split::Valid).unwrap();
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 5,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = Model::init(small_config(CellKind::Glf, FusionStrategy::Joint), 7).unwrap();
            let out = train(&mut m, &train_set, &valid, &tc).unwrap();
            (m, out.history)
        };
        let (a, ha) = run();
        let (b, hb) = run();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
    }

    #[test]
    fn evaluate_tie_rule() {
        let task = small_task();
        let set = generate_split(&task, Split::Train).unwrap();
        let zero = Model::zeros(small_config(CellKind::Glf, FusionStrategy::Joint)).unwrap();
        let ev = evaluate(&zero, &set).unwrap();
        let class0 = set.iter().filter(|s| s.label == 0).count();
        assert_eq!(ev.correct, class0);
        assert_eq!(ev.accuracy, class0 as f64 / set.len() as f64);
        assert_eq!(ev.confusion[1][0], set.iter().filter(|s| s.label == 1).count());

        let only0: Vec<_> = set.iter().filter(|s| s.label == 0).cloned().collect();
        assert_eq!(evaluate(&zero, &only0).unwrap().accuracy, 1.0);
        assert!(evaluate(&zero, &[]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let task = small_task();
        let set = generate_split(&task, Split::Test).unwrap();
        let mut model = Model::init(small_config(CellKind::Conventional, FusionStrategy::Score), 5).unwrap();
        let mut s = RngStream::new(3);
        for t in model.params.tensors_mut() {
            t.iter_mut().for_each(|v| *v += 1e-3 * s.gaussian());
        }
        let mut opt = RmspropState::new(&model.params, 1e-3, 0.9, 1e-8);
        opt.accumulators[0][0] = 0.123_456_789_012_345_67;
        let meta = TrainingMetadata {
            model_seed: 5,
            data_seed: 1,
            train_seed: 9,
            epochs: 3,
            final_train_loss: Some(1.25),
            final_valid_accuracy: None,
        };
        let p1 = dir.path().join("a.json");
        let p2 = dir.path().join("b.json");
        save_checkpoint(&model, Some(&opt), &meta, &p1).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        assert_eq!(loaded.model, model);
        assert_eq!(loaded.optimizer.as_ref(), Some(&opt));
        assert_eq!(loaded.metadata, meta);
        for smp in &set {
            assert_eq!(loaded.model.predict(smp).unwrap(), model.predict(smp).unwrap());
        }
        save_checkpoint(&loaded.model, loaded.optimizer.as_ref(), &loaded.metadata, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn checkpoint_errors() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::init(small_config(CellKind::Glf, FusionStrategy::Joint), 5).unwrap();
        let path = dir.path().join("c.json");
        save_checkpoint(&model, None, &TrainingMetadata::default(), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();

        let truncated = dir.path().join("t.json");
        std::fs::write(&truncated, &text[..text.len() / 2]).unwrap();
        let err = load_checkpoint(&truncated).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{err}");

        let versioned = dir.path().join("v.json");
        std::fs::write(&versioned, text.replacen("\"format_version\": 1", "\"format_version\": 7", 1)).unwrap();
        assert!(matches!(load_checkpoint(&versioned), Err(Error::Version { found: 7, .. })));

        let renamed = dir.path().join("r.json");
        std::fs::write(&renamed, text.replacen("branch0.enc.fwd.h.input.wh", "bogus", 1)).unwrap();
        match load_checkpoint(&renamed) {
            Err(Error::Field { field, .. }) => assert_eq!(field, "params[1]"),
            other => panic!("{other:?}"),
        }

        let badfield = dir.path().join("f.json");
        std::fs::write(&badfield, text.replacen("\"hidden\": 4", "\"hidden\": \"four\"", 1)).unwrap();
        match load_checkpoint(&badfield) {
            Err(Error::Field { field, .. }) => assert_eq!(field, "config.hidden"),
            other => panic!("{other:?}"),
        }
    }
}
