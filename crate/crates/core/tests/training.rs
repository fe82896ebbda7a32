mod common;

use common::{dataset, tiny_config};
use viewfree::checkpoint::Checkpoint;
use viewfree::data::{Dataset, Sample, Split};
use viewfree::geometry::PointCloud;
use viewfree::loss::{chamfer, LossRegistry};
use viewfree::model::Model;
use viewfree::tensor::Precision;
use viewfree::train::Trainer;
use viewfree::Error;

fn load(shapes: usize) -> (tempfile::TempDir, Dataset) {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path(), shapes);
    let ds = Dataset::load(dir.path()).unwrap();
    (dir, ds)
}

#[test]
fn first_logged_loss_is_the_chamfer_distance_before_any_update() {
    let (_dir, ds) = load(1);
    let samples: Vec<&Sample> = ds.samples.iter().collect();
    let cfg = tiny_config(1);
    // The output keeps every point, so the loss does not depend on the
    // merge start.
    assert_eq!(cfg.model.n_out, samples[0].partial.len() + cfg.model.n_miss);
    let fresh = Model::new(&cfg.model, cfg.seed).unwrap();
    let pred = fresh.complete(&samples[0].partial).unwrap();
    let expected = chamfer(samples[0].gt.points(), pred.points()).unwrap();

    let mut t = Trainer::new(&cfg, &LossRegistry::new()).unwrap();
    t.train(&samples, |_, _| Ok(())).unwrap();
    let logged = t.log[0].mean_loss;
    assert!((logged - expected).abs() <= 1e-12 * expected, "{logged} vs {expected}");
}

#[test]
fn zero_step_size_freezes_parameters_and_loss() {
    let (_dir, ds) = load(4);
    let samples = ds.split(Split::All);
    let mut cfg = tiny_config(3);
    cfg.optimizer.step_size = 0.0;
    let mut t = Trainer::new(&cfg, &LossRegistry::new()).unwrap();
    let before: Vec<_> = t.model.store.iter().map(|p| p.tensor.clone()).collect();
    t.train(&samples, |_, _| Ok(())).unwrap();
    let after: Vec<_> = t.model.store.iter().map(|p| p.tensor.clone()).collect();
    assert_eq!(before, after);
    let first = t.log[0].mean_loss;
    assert!(t.log.iter().all(|e| e.mean_loss == first), "{:?}", t.log);
}

#[test]
fn training_decreases_the_loss() {
    let (_dir, ds) = load(2);
    let samples = ds.split(Split::All);
    let mut cfg = tiny_config(30);
    cfg.optimizer.step_size = 1e-2;
    let mut t = Trainer::new(&cfg, &LossRegistry::new()).unwrap();
    t.train(&samples, |_, _| Ok(())).unwrap();
    assert!(
        t.log.last().unwrap().mean_loss < 0.5 * t.log[0].mean_loss,
        "{:?}",
        t.log
    );
}

#[test]
fn training_is_bitwise_deterministic() {
    let (_dir, ds) = load(4);
    let samples = ds.split(Split::All);
    let mut cfg = tiny_config(2);
    cfg.precision = Precision::Narrow;
    cfg.augmentation = Some(viewfree::config::Augmentation {
        rotation: 0.5,
        noise_sigma: 0.01,
    });
    let run = || {
        let mut t = Trainer::new(&cfg, &LossRegistry::new()).unwrap();
        t.train(&samples, |_, _| Ok(())).unwrap();
        t.checkpoint().encode()
    };
    assert_eq!(run(), run());
    let mut other = cfg.clone();
    other.seed = 1;
    let mut t = Trainer::new(&other, &LossRegistry::new()).unwrap();
    t.train(&samples, |_, _| Ok(())).unwrap();
    assert_ne!(t.checkpoint().encode().0, run().0);
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let (dir, ds) = load(2);
    let samples = ds.split(Split::All);
    let mut t = Trainer::new(&tiny_config(2), &LossRegistry::new()).unwrap();
    t.train(&samples, |_, _| Ok(())).unwrap();
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    t.checkpoint().save(&a).unwrap();
    let loaded = Checkpoint::load(&a).unwrap();
    loaded.save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(
        std::fs::read(a.with_extension("ckpt.json")).unwrap(),
        std::fs::read(b.with_extension("ckpt.json")).unwrap()
    );

    let (model, _) = loaded.restore(&a).unwrap();
    for s in &ds.samples {
        let x: PointCloud = t.model.complete(&s.partial).unwrap();
        let y = model.complete(&s.partial).unwrap();
        let bits = |c: &PointCloud| c.points().iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&x), bits(&y));
    }
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let (dir, ds) = load(3);
    let samples = ds.split(Split::All);
    let cfg = tiny_config(4);
    let mut full = Trainer::new(&cfg, &LossRegistry::new()).unwrap();
    full.train(&samples, |_, _| Ok(())).unwrap();

    let path = dir.path().join("mid.ckpt");
    let mut first = Trainer::new(&cfg, &LossRegistry::new()).unwrap();
    first.run_epoch(&samples).unwrap();
    first.run_epoch(&samples).unwrap();
    first.checkpoint().save(&path).unwrap();
    let mut resumed = Trainer::resume(&Checkpoint::load(&path).unwrap(), &LossRegistry::new(), &path).unwrap();
    resumed.train(&samples, |_, _| Ok(())).unwrap();
    assert_eq!(resumed.checkpoint().encode(), full.checkpoint().encode());
}

#[test]
fn mismatched_checkpoints_are_rejected() {
    let (dir, _ds) = load(1);
    let t = Trainer::new(&tiny_config(1), &LossRegistry::new()).unwrap();
    let mut ck = t.checkpoint();
    ck.meta.config.model.decoder_width = 16;
    let path = dir.path().join("bad.ckpt");
    ck.save(&path).unwrap();
    let err = Checkpoint::load(&path).unwrap().restore(&path).unwrap_err();
    assert_eq!(err.exit_code(), 3);

    let mut ck = t.checkpoint();
    ck.meta.format_version = 99;
    ck.save(&path).unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(Error::Format { .. })));

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(Checkpoint::load(&path).is_err());
}

#[test]
fn divergence_is_reported() {
    let (_dir, ds) = load(2);
    let samples = ds.split(Split::All);
    let mut cfg = tiny_config(5);
    cfg.optimizer.step_size = 1e300;
    let mut t = Trainer::new(&cfg, &LossRegistry::new()).unwrap();
    let err = t.train(&samples, |_, _| Ok(())).unwrap_err();
    assert!(matches!(err, Error::Divergence { .. }), "{err}");
    assert_eq!(err.exit_code(), 4);
}
