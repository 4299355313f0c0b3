//! End-to-end checks of training, resumption and synthetic data on a
//! small configuration.

use std::path::Path;

use mmfuse::evaluation::{select_eval_windows, EvalConfig};
use mmfuse::model::GradientOptions;
use mmfuse::synthgen::{generate_dataset, SynthSpec};
use mmfuse::training::{cosine_lr, history_text, train, train_records, Checkpoint, TrainConfig, Trainer};
use mmfuse::windowing::enumerate_eval_windows;
use mmfuse::{DatasetManifest, Model, ModelConfig, Split};

fn small_spec() -> SynthSpec {
    SynthSpec { n_train: 6, n_val: 2, n_test: 2, min_seconds: 8.0, max_seconds: 12.0, ..SynthSpec::default() }
}

fn small_config() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 4,
        window_seconds: 3.0,
        gate_modality: Some("face".into()),
        model: ModelConfig {
            d_model: 8,
            layers: 1,
            heads: 2,
            ff_mult: 2,
            token_layers: 1,
            token_heads: 2,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn dataset(dir: &Path) -> DatasetManifest {
    generate_dataset(&small_spec(), dir).unwrap()
}

fn files_under(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn regeneration_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    dataset(a.path());
    dataset(b.path());
    let (fa, fb) = (files_under(a.path()), files_under(b.path()));
    assert_eq!(fa.len(), 1 + 10 * 4);
    assert_eq!(fa, fb);
}

#[test]
fn training_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(dir.path());
    let cfg = small_config();
    let a = train(&manifest, &cfg).unwrap();
    let b = train(&manifest, &cfg).unwrap();
    assert_eq!(history_text(&a.epochs), history_text(&b.epochs));
    assert_eq!(a.final_checkpoint.to_bytes(), b.final_checkpoint.to_bytes());
    assert_eq!(a.steps, b.steps);
}

#[test]
fn learning_rate_history_follows_cosine() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(dir.path());
    let cfg = small_config();
    let out = train(&manifest, &cfg).unwrap();
    let total = out.steps.len() as u64;
    assert_eq!(total, 2 * 3);
    for s in &out.steps {
        assert!((s.lr - cosine_lr(s.step, total, cfg.base_lr).unwrap()).abs() <= 1e-12);
    }
    assert_eq!(out.epochs.len(), 3);
    assert!(out.epochs.iter().all(|e| e.val_f1.is_some()));
}

#[test]
fn resumed_training_continues_the_same_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(dir.path());
    let train_set = manifest.load_split(Split::Train).unwrap();
    let cfg = small_config();
    let modalities = manifest.modality_config.clone();

    let mut straight = Trainer::new(&train_set, &[], modalities.clone(), cfg.clone()).unwrap();
    let mut midway = None;
    while !straight.is_finished() {
        if straight.current_step() == 2 {
            midway = Some(straight.checkpoint().to_bytes());
        }
        straight.train_step().unwrap();
    }

    let restored = Checkpoint::from_bytes(&midway.unwrap()).unwrap();
    let mut resumed = Trainer::resume(&train_set, &[], modalities, cfg, &restored).unwrap();
    let mut losses = Vec::new();
    while !resumed.is_finished() {
        losses.push(resumed.train_step().unwrap().loss);
    }
    assert!(losses.len() >= 3);
    let expected: Vec<f64> = straight.step_history()[2..].iter().map(|s| s.loss).collect();
    assert_eq!(losses, expected);
    assert_eq!(resumed.checkpoint().to_bytes(), straight.checkpoint().to_bytes());
}

#[test]
fn training_never_reads_the_test_split() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(dir.path());
    for entry in manifest.records.iter().filter(|r| r.split == Split::Test) {
        for p in &entry.paths {
            std::fs::write(manifest.resolve(p), b"not a stream").unwrap();
        }
    }
    assert!(manifest.load_split(Split::Test).is_err());
    train(&manifest, &small_config()).unwrap();

    let test = manifest.records.iter().position(|r| r.split == Split::Test).unwrap();
    let mut leaked = manifest.clone();
    leaked.records[test].split = Split::Train;
    assert!(train(&leaked, &small_config()).is_err());
}

#[test]
fn test_records_are_refused_by_the_trainer() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(dir.path());
    let mut records = manifest.load_split(Split::Val).unwrap();
    records[0].split = Split::Test;
    let err = train_records(&records, &[], manifest.modality_config.clone(), &small_config());
    assert!(matches!(err, Err(mmfuse::Error::Contract(_))));
}

#[test]
fn duplicated_window_keeps_the_mean_gradient() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(dir.path());
    let record = manifest.load_record(0).unwrap();
    let window = enumerate_eval_windows(&record, 3.0).unwrap().remove(0);
    let model = Model::new(manifest.modality_config.clone(), small_config().model, 1).unwrap();
    let opts = GradientOptions::default();
    let one = model.compute_gradients(&[&window], &opts).unwrap();
    let two = model.compute_gradients(&[&window, &window], &opts).unwrap();
    assert!((one.loss - two.loss).abs() < 1e-12);
    for (a, b) in one.grads.tensors().iter().zip(two.grads.tensors()) {
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()), "{}: {x} vs {y}", a.name);
        }
    }
}

/// Thresholding the window mean of the cue channels halfway between the two
/// class means recovers the labels, so the task is solvable by construction.
#[test]
fn linear_probe_separates_default_synthetic_classes() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec::default();
    let manifest = generate_dataset(&spec, dir.path()).unwrap();
    let test = manifest.load_split(Split::Test).unwrap();
    let threshold = 0.5 * spec.cue.magnitude * spec.cue.fraction;
    let cfg = EvalConfig { window_seconds: 9.0, presence_threshold: 0.5, gate_modality: Some(spec.cue.modality.clone()) };
    let (mut correct, mut total) = (0, 0);
    for record in &test {
        let (windows, _) = select_eval_windows(record, &cfg).unwrap();
        for w in windows {
            let cue = w.slice(&spec.cue.modality).unwrap();
            let (mut sum, mut count) = (0.0, 0);
            for (row, _) in cue.frames.rows().into_iter().zip(&cue.presence).filter(|(_, &p)| p) {
                sum += row.iter().take(spec.cue.channels).sum::<f64>();
                count += spec.cue.channels;
            }
            let predicted = u8::from(sum / count as f64 > threshold);
            correct += usize::from(predicted == record.label);
            total += 1;
        }
    }
    let accuracy = correct as f64 / total as f64;
    assert!(total >= 2 * test.len());
    assert!(accuracy > 0.9, "probe accuracy {accuracy}");
}
