//! Optimisation smoke test, deterministic training traces, resume, and
//! checkpoint persistence.

use std::path::Path;
use std::time::Instant;

use xnet_core::data::{load_batches, split_folds, Manifest, VolumeDataset};
use xnet_core::model::ModelConfig;
use xnet_core::synth::{generate_synthetic, SynthConfig};
use xnet_core::training::{overfit_batch, read_history, Checkpoint, TrainConfig, Trainer, OVERFIT_LR};
use xnet_core::{Error, Tensor};

fn dataset(dir: &Path, volumes: usize, slices: usize, size: usize) -> VolumeDataset {
    let cfg = SynthConfig {
        volumes,
        slices,
        height: size,
        width: size,
        seed: 7,
        lesions: true,
    };
    generate_synthetic(&cfg, dir).unwrap();
    VolumeDataset::load(&dir.join("manifest.json"), None).unwrap()
}

fn small_run(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        seed: 3,
        folds: 3,
        fold: 0,
        ..TrainConfig::default()
    }
}

#[test]
fn overfits_a_single_batch() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), 2, 4, 64);
    let batch = load_batches::<f32>(&ds, &[0, 1], 8, 0, None).next().unwrap();
    assert_eq!(batch.images.shape(), [8, 1, 64, 64]);
    let mut ckpt = Checkpoint::<f32>::fresh(ModelConfig::desk_scale(), TrainConfig::default()).unwrap();
    let start = Instant::now();
    let losses = overfit_batch(&mut ckpt.model, &batch, 200, OVERFIT_LR).unwrap();
    let last = losses[losses.len() - 1];
    assert!(last < 0.05, "loss {} -> {last}", losses[0]);
    assert!(start.elapsed().as_secs() < 120);
}

#[test]
fn identical_seeds_give_identical_runs_and_resume_matches() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), 6, 3, 32);
    let manifest = Manifest::load(&dir.path().join("manifest.json")).unwrap();
    let folds = split_folds(&manifest, 3, 3).unwrap();
    let tiny = ModelConfig {
        width_divisor: 8,
        ..ModelConfig::default()
    };

    let run = |out: &Path| {
        let state = Checkpoint::<f32>::fresh(tiny.clone(), small_run(3)).unwrap();
        let mut t = Trainer::new(state, &ds, &folds).unwrap().with_output_dir(out).unwrap();
        t.fit().unwrap();
        t
    };
    let a_dir = tempfile::tempdir().unwrap();
    let b_dir = tempfile::tempdir().unwrap();
    let a = run(a_dir.path());
    let b = run(b_dir.path());
    assert_eq!(a.history().len(), 3);
    assert_eq!(
        std::fs::read(a_dir.path().join("history.json")).unwrap(),
        std::fs::read(b_dir.path().join("history.json")).unwrap()
    );
    assert_eq!(a.state.to_bytes().unwrap(), b.state.to_bytes().unwrap());

    // the best snapshot carries the maximal validation Dice
    let best = Checkpoint::<f32>::load(&a_dir.path().join("best.xnck")).unwrap();
    let max = a.history().iter().map(|r| r.val_dice).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(best.history.last().unwrap().val_dice, max);
    assert!(a.history().windows(2).all(|w| w[1].lr <= w[0].lr));

    // interrupt after one epoch, reload from disk, continue
    let c_dir = tempfile::tempdir().unwrap();
    let state = Checkpoint::<f32>::fresh(tiny.clone(), small_run(1)).unwrap();
    let mut first = Trainer::new(state, &ds, &folds).unwrap().with_output_dir(c_dir.path()).unwrap();
    first.fit().unwrap();
    let mut resumed = Checkpoint::<f32>::load(&c_dir.path().join("last.xnck")).unwrap();
    resumed.train.epochs = 3;
    let mut second = Trainer::new(resumed, &ds, &folds).unwrap().with_output_dir(c_dir.path()).unwrap();
    second.fit().unwrap();
    assert_eq!(second.history(), a.history());
    assert_eq!(read_history(&c_dir.path().join("history.json")).unwrap(), a.history());
    assert_eq!(second.state.tensors(), a.state.tensors());
}

#[test]
fn reloaded_checkpoint_predicts_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    let mut ckpt = Checkpoint::<f32>::fresh(ModelConfig::desk_scale(), TrainConfig::default()).unwrap();
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::<f32>::uniform(&[2, 1, 32, 32], 0.0, 1.0, &mut rng);
    // take one step so running statistics are not at their initial values
    let batch = xnet_core::data::Batch {
        images: x.clone(),
        masks: x.map(|v| if v > 0.5 { 1.0 } else { 0.0 }),
        slices: vec![(0, 0), (0, 1)],
    };
    overfit_batch(&mut ckpt.model, &batch, 1, 1e-3).unwrap();
    let path = dir.path().join("m.xnck");
    ckpt.save(&path).unwrap();
    let mut back = Checkpoint::<f32>::load(&path).unwrap();
    let before = ckpt.model.predict_probs(&x).unwrap();
    let after = back.model.predict_probs(&x).unwrap();
    assert_eq!(
        before.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        after.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
    assert!(matches!(Checkpoint::<f32>::load(&path), Err(Error::Corrupt { .. })));
}
