use hiu_core::car::CarConfig;
use hiu_core::togn::ModelConfig;
use hiu_core::{Error, Model};
use proptest::prelude::*;

fn small() -> ModelConfig {
    ModelConfig {
        feature_dim: 4,
        num_actions: 3,
        hidden: 4,
        edge_dim: 3,
        layers: 2,
        ..ModelConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn round_trip_is_bit_exact(seed in any::<u64>(), scale in -1e300f64..1e300, layers in 0usize..3) {
        let config = ModelConfig { layers, ..small() };
        let mut model = Model::new(config, CarConfig::default(), seed).unwrap();
        // push some awkward magnitudes through the serializer
        for t in model.store.tensors_mut() {
            for (k, v) in t.data_mut().iter_mut().enumerate() {
                if k % 3 == 0 {
                    *v *= scale;
                }
            }
        }
        let back = Model::from_checkpoint(&model.to_checkpoint().unwrap()).unwrap();
        prop_assert_eq!(back.store.tensors().len(), model.store.tensors().len());
        for (a, b) in back.store.tensors().iter().zip(model.store.tensors()) {
            let bits = |m: &hiu_core::numeric::Matrix| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(a), bits(b));
        }
        prop_assert_eq!(back, model);
    }
}

#[test]
fn file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let model = Model::new(small(), CarConfig::default(), 7).unwrap();
    model.save(&path).unwrap();
    assert_eq!(Model::load(&path).unwrap(), model);
}

#[test]
fn corrupt_checkpoints_are_format_errors() {
    let text = Model::new(small(), CarConfig::default(), 1)
        .unwrap()
        .to_checkpoint()
        .unwrap();
    let truncated = &text[..text.len() / 2];
    let wrong_kind = text.replacen("hiu-checkpoint", "something-else", 1);
    let wrong_version = text.replacen("\"version\":1", "\"version\":7", 1);
    let wrong_shape = text.replacen("\"rows\":4", "\"rows\":5", 1);
    for bad in [truncated, &wrong_kind, &wrong_version, &wrong_shape, "[]", ""] {
        match Model::from_checkpoint(bad) {
            Err(Error::Format(_)) => {}
            other => panic!("expected a format error, got {other:?}"),
        }
    }
}

#[test]
fn checkpoint_records_initial_penalties() {
    let text = Model::new(small(), CarConfig::default(), 1)
        .unwrap()
        .to_checkpoint()
        .unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let trans = v["penalties"]["trans"].as_f64().unwrap();
    assert!((trans - 0.1).abs() < 1e-12);
    let compat = v["penalties"]["compat"]["data"].as_array().unwrap();
    assert!(compat.iter().all(|c| (c.as_f64().unwrap() - 0.5).abs() < 1e-12));
}
