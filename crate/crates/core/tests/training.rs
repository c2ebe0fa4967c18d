use fusion_lstm::data::{Dataset, FusionStrategy, TaskConfig};
use fusion_lstm::training::{evaluate, load_checkpoint, save_checkpoint, train, TrainingMetadata};
use fusion_lstm::{CellKind, Model, ModelConfig, TrainConfig};

fn config(cell: CellKind, fusion: FusionStrategy, task: &TaskConfig) -> ModelConfig {
    ModelConfig {
        cell,
        fusion,
        input_dim: task.dim,
        hidden: 32,
        steps: task.steps,
        bidirectional: true,
        attention: true,
        dropout: 0.1,
        num_classes: task.num_classes,
    }
}

#[test]
fn glf_training_loss_decreases_on_default_task() {
    let task = TaskConfig::default();
    let ds = Dataset::generate(&task).unwrap();
    let mut model = Model::init(config(CellKind::Glf, FusionStrategy::Joint, &task), 1).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        ..TrainConfig::default()
    };
    let out = train(&mut model, &ds.train, &ds.valid, &cfg).unwrap();
    let first = out.history.first().unwrap().train_loss;
    let last = out.history.last().unwrap().train_loss;
    assert!(last < first, "{first} -> {last}");
    assert!(out.history.iter().all(|h| h.valid_accuracy.is_some()));
}

#[test]
fn resumed_optimizer_state_survives_a_checkpoint() {
    let task = TaskConfig {
        train_per_class: 8,
        valid_per_class: 2,
        test_per_class: 4,
        ..TaskConfig::default()
    };
    let ds = Dataset::generate(&task).unwrap();
    let mut cfg = config(CellKind::Conventional, FusionStrategy::Score, &task);
    cfg.hidden = 5;
    let mut model = Model::init(cfg, 3).unwrap();
    let tc = TrainConfig {
        epochs: 2,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let out = train(&mut model, &ds.train, &ds.valid, &tc).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    let meta = TrainingMetadata {
        model_seed: 3,
        data_seed: task.seed,
        train_seed: tc.seed,
        epochs: tc.epochs,
        final_train_loss: out.history.last().map(|h| h.train_loss),
        final_valid_accuracy: None,
    };
    save_checkpoint(&model, Some(&out.optimizer), &meta, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.metadata, meta);
    assert_eq!(back.optimizer.as_ref().unwrap().accumulators, out.optimizer.accumulators);
    let a = evaluate(&model, &ds.test).unwrap();
    let b = evaluate(&back.model, &ds.test).unwrap();
    assert_eq!(a.confusion, b.confusion);
    for s in &ds.test {
        let (p, q) = (model.predict(s).unwrap(), back.model.predict(s).unwrap());
        assert!(p.iter().zip(q.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
