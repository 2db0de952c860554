mod common;

use std::path::PathBuf;

use common::synth_dataset;
use fabnet::data::{batch_iterator, stratified_split, DatasetManifest, SplitSpec, SynthSpec};
use fabnet::model::ParamGroup;
use fabnet::train::{train, train_and_evaluate, TrainConfig};
use fabnet::{ConvBlockSpec, Model, ModelConfig};

fn small_model(input: usize, classes: usize) -> ModelConfig {
    ModelConfig {
        input_size: (input, input),
        blocks: vec![ConvBlockSpec::new(8, true), ConvBlockSpec::new(16, true)],
        head_hidden: 16,
        num_classes: classes,
        ..ModelConfig::default()
    }
}

fn table_one_manifest() -> DatasetManifest {
    let counts = [("Mild", 1624), ("Moderate", 999), ("No DR", 1805), ("Proliferate", 772), ("Severe", 834)];
    let mut pairs = Vec::new();
    for (label, n) in counts {
        for i in 0..n {
            pairs.push((PathBuf::from(format!("{label}/{i}.ppm")), label.to_string()));
        }
    }
    DatasetManifest::from_pairs(pairs).unwrap()
}

#[test]
fn table_one_split_has_1207_test_images() {
    let m = table_one_manifest();
    assert_eq!(m.len(), 6034);
    assert_eq!(m.class_names, ["Mild", "Moderate", "No DR", "Proliferate", "Severe"]);
    let (train, test) = stratified_split(&m, &SplitSpec::default()).unwrap();
    assert_eq!(test.len(), 1207);
    assert_eq!(train.len(), 6034 - 1207);
    let per_class: Vec<usize> = (0..5)
        .map(|c| test.iter().filter(|&&i| m.entries[i].label_id == c).count())
        .collect();
    assert_eq!(per_class, [325, 200, 361, 154, 167]);
}

#[test]
fn batch_order_regression() {
    let idx: Vec<usize> = (0..10).collect();
    let e1 = batch_iterator(&idx, 4, 0, 1).unwrap();
    let e2 = batch_iterator(&idx, 4, 0, 2).unwrap();
    assert_eq!(e1, vec![vec![2, 1, 4, 5], vec![0, 6, 3, 9], vec![8, 7]]);
    assert_eq!(e2, vec![vec![6, 9, 2, 8], vec![0, 4, 5, 7], vec![1, 3]]);
    assert_eq!(e1, batch_iterator(&idx, 4, 0, 1).unwrap());
    let sizes: Vec<usize> = batch_iterator(&(0..33).collect::<Vec<_>>(), 16, 3, 0)
        .unwrap()
        .iter()
        .map(Vec::len)
        .collect();
    assert_eq!(sizes, [16, 16, 1]);
}

#[test]
fn zero_learning_rate_leaves_model_and_loss_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec { classes: 3, per_class: 10, size: (16, 16), ..SynthSpec::default() };
    let data = synth_dataset(dir.path(), &spec);
    let mut model = Model::build(small_model(16, 3), data.class_names.clone(), 0).unwrap();
    let before = model.clone();
    let cfg = TrainConfig { learning_rate: 0.0, max_epochs: 3, ..TrainConfig::default() };
    let curve = train(&mut model, &data.train, &data.test, &cfg).unwrap();
    assert_eq!(curve.records.len(), 3);
    for (a, b) in before.parameters().iter().zip(model.parameters()) {
        assert!(a.value.bit_eq(&b.value), "{} moved", a.name);
    }
    let first = curve.records[0];
    for r in &curve.records {
        assert!((r.train_loss - first.train_loss).abs() <= 1e-12);
        assert!((r.val_loss - first.val_loss).abs() <= 1e-12);
    }
}

#[test]
fn training_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec { classes: 3, per_class: 10, size: (16, 16), seed: 4, ..SynthSpec::default() };
    let data = synth_dataset(dir.path(), &spec);
    let cfg = TrainConfig { max_epochs: 2, learning_rate: 1e-3, ..TrainConfig::default() };
    let run = || train_and_evaluate(&small_model(16, 3), &data.class_names, &data.train, &data.test, &cfg, 9).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.curve.to_csv(), b.curve.to_csv());
    for (p, q) in a.model.parameters().iter().zip(b.model.parameters()) {
        assert!(p.value.bit_eq(&q.value));
    }
}

#[test]
fn paired_runs_without_attention_agree() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec { classes: 3, per_class: 10, size: (16, 16), seed: 2, ..SynthSpec::default() };
    let data = synth_dataset(dir.path(), &spec);
    let cfg = TrainConfig { max_epochs: 2, ..TrainConfig::default() };
    let base = ModelConfig { use_fab: false, ..small_model(16, 3) };
    let a = train_and_evaluate(&base, &data.class_names, &data.train, &data.test, &cfg, 5).unwrap();
    let b = train_and_evaluate(&base, &data.class_names, &data.train, &data.test, &cfg, 5).unwrap();
    assert_eq!(a.report.accuracy, b.report.accuracy);
}

#[test]
fn fine_tuning_with_frozen_backbone_keeps_conv_weights() {
    let dir = tempfile::tempdir().unwrap();
    let task_a = synth_dataset(
        &dir.path().join("a"),
        &SynthSpec { classes: 4, per_class: 10, size: (16, 16), seed: 1, ..SynthSpec::default() },
    );
    let task_b = synth_dataset(
        &dir.path().join("b"),
        &SynthSpec { classes: 3, per_class: 10, size: (16, 16), seed: 2, difficulty: 0.3, ..SynthSpec::default() },
    );
    let cfg = TrainConfig { max_epochs: 2, learning_rate: 1e-3, ..TrainConfig::default() };

    let mut pretrained = Model::build(small_model(16, 4), task_a.class_names.clone(), 0).unwrap();
    train(&mut pretrained, &task_a.train, &task_a.test, &cfg).unwrap();

    let frozen_cfg = ModelConfig { freeze_backbone: true, ..small_model(16, 3) };
    let mut model = Model::build(frozen_cfg, task_b.class_names.clone(), 1).unwrap();
    model.load_backbone_from(&pretrained).unwrap();
    let start = model.clone();
    let trainable: Vec<&str> = model.trainable_parameters().iter().map(|p| p.name.as_str()).collect();
    assert_eq!(
        trainable,
        ["fab.W1", "fab.b1", "fab.W2", "fab.b2", "head.hidden.weight", "head.hidden.bias", "head.out.weight", "head.out.bias"]
    );
    train(&mut model, &task_b.train, &task_b.test, &cfg).unwrap();

    for ((p, q), r) in model.parameters().iter().zip(start.parameters()).zip(pretrained.parameters()) {
        if p.group == ParamGroup::Backbone {
            assert!(p.value.bit_eq(&q.value), "{} changed", p.name);
            assert!(p.value.bit_eq(&r.value), "{} differs from pretrained", p.name);
        } else if p.name.starts_with("head.") {
            assert!(!p.value.bit_eq(&q.value), "{} did not train", p.name);
        }
    }
}

#[test]
fn three_class_synthetic_task_is_learned() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec { classes: 3, per_class: 40, seed: 3, ..SynthSpec::default() };
    let data = synth_dataset(dir.path(), &spec);
    let mut model = Model::build(ModelConfig { num_classes: 3, ..ModelConfig::default() }, data.class_names.clone(), 0).unwrap();
    let curve = train(&mut model, &data.train, &data.test, &TrainConfig::default()).unwrap();
    let last = curve.records.last().unwrap();
    assert_eq!(curve.records.len(), 40);
    assert!(last.train_acc > 0.9, "final train accuracy {}", last.train_acc);
    assert_eq!(last.train_acc, 91.0 / 96.0);
}
