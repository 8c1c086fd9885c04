//! Presets, prediction shapes and checkpoint round trips.

use simplr::attention::Mechanism;
use simplr::data::{generate_scene, SceneConfig};
use simplr::model::{
    load_checkpoint, load_checkpoint_for, save_checkpoint, FeatureScale, Model, ModelConfig,
};
use simplr::numerics::container;
use simplr::objective::Task;
use simplr::Error;

fn image_for(cfg: &ModelConfig, seed: u64) -> simplr::Tensor {
    generate_scene(seed, &SceneConfig::square(cfg.image_size))
        .unwrap()
        .image
}

#[test]
fn predictions_have_the_configured_shapes() {
    let cases = [
        ModelConfig::femto(),
        ModelConfig {
            task: Task::Instance,
            ..ModelConfig::femto()
        },
        ModelConfig::tiny(Task::Panoptic),
        ModelConfig {
            mechanism: Mechanism::Fixed,
            ..ModelConfig::femto()
        },
        ModelConfig {
            mechanism: Mechanism::Base,
            feature_scale: FeatureScale::Quarter,
            ..ModelConfig::femto()
        },
    ];
    for cfg in cases {
        let model = Model::new(cfg.clone(), 1).unwrap();
        let p = model.predict(&image_for(&cfg, 4)).unwrap();
        let k = cfg.effective_queries();
        assert_eq!(p.class_probs.shape(), [k, cfg.classes()]);
        assert_eq!(p.boxes.shape(), [k, 4]);
        assert!(p.class_probs.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(p.boxes.is_finite());
        match &p.mask_probs {
            Some(m) => {
                assert!(cfg.has_masks());
                assert_eq!(m.shape(), [k, cfg.mask_side(), cfg.mask_side()]);
            }
            None => assert!(!cfg.has_masks()),
        }
        assert_eq!(
            p.scale_weights.is_some(),
            cfg.mechanism == Mechanism::Adaptive
        );
        let mut sorted = p.proposal_texels.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), k, "proposals must be distinct texels");
    }
}

#[test]
fn same_seed_same_weights() {
    let a = Model::new(ModelConfig::femto(), 9).unwrap();
    let b = Model::new(ModelConfig::femto(), 9).unwrap();
    let c = Model::new(ModelConfig::femto(), 10).unwrap();
    let vals = |m: &Model| {
        m.store
            .iter()
            .map(|(_, p)| p.value.clone())
            .collect::<Vec<_>>()
    };
    assert_eq!(vals(&a), vals(&b));
    assert_ne!(vals(&a), vals(&c));
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig {
        task: Task::Instance,
        ..ModelConfig::femto()
    };
    let mut model = Model::new(cfg.clone(), 5).unwrap();
    // move every parameter off its initial value so nothing is trivially zero
    let mut rng = simplr::Rng::new(1);
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        for v in model.store.value_mut(id).data_mut() {
            *v += rng.range(-0.01, 0.01);
        }
    }
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&model, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.config, cfg);
    for ((_, a), (_, b)) in model.store.iter().zip(loaded.store.iter()) {
        assert_eq!(a.name, b.name);
        for (x, y) in a.value.data().iter().zip(b.value.data()) {
            assert_eq!((*x as f32 as f64).to_bits(), y.to_bits());
        }
    }
    // saving what was loaded reproduces the file byte for byte
    let again = dir.path().join("again.ckpt");
    save_checkpoint(&loaded, &again).unwrap();
    assert_eq!(
        std::fs::read(&path).unwrap(),
        std::fs::read(&again).unwrap()
    );

    // outputs move by no more than f32 rounding of the weights allows
    let img = image_for(&cfg, 3);
    let (p, q) = (model.predict(&img).unwrap(), loaded.predict(&img).unwrap());
    assert_eq!(p.proposal_texels, q.proposal_texels);
    let worst = |a: &simplr::Tensor, b: &simplr::Tensor| {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    };
    assert!(worst(&p.class_probs, &q.class_probs) < 1e-5);
    assert!(worst(&p.boxes, &q.boxes) < 1e-5);
    assert!(
        worst(
            p.mask_probs.as_ref().unwrap(),
            q.mask_probs.as_ref().unwrap()
        ) < 1e-5
    );
}

#[test]
fn mismatched_checkpoints_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = Model::new(ModelConfig::femto(), 0).unwrap();
    save_checkpoint(&model, &path).unwrap();

    let other = ModelConfig {
        queries: 9,
        ..ModelConfig::femto()
    };
    assert!(matches!(
        load_checkpoint_for(&path, &other),
        Err(Error::Config(_))
    ));
    assert!(load_checkpoint_for(&path, &ModelConfig::femto()).is_ok());

    // drop one record: the loader names it
    let mut records = container::read(&path).unwrap();
    let gone = records.remove(3).name;
    container::write(&path, &records).unwrap();
    let err = load_checkpoint(&path).err().unwrap();
    assert!(err.to_string().contains(&gone), "{err}");
}
