use scarcenet::dataset::{embedded_gandhi, experiment1_split, experiment2_split};
use scarcenet::experiments::{predict_kpa, PreparedSplit};
use scarcenet::metrics;
use scarcenet::network::{Activation, Mlp};
use scarcenet::trainers::{train, StopReason, TrainConfig, TrainerKind};

#[test]
fn trained_model_survives_a_save_load_round_trip() {
    let ds = embedded_gandhi();
    let split = PreparedSplit::new(&ds, &experiment2_split(&ds).unwrap()).unwrap();
    let init = Mlp::build(&[18; 5], Activation::LogSigmoid, 4).unwrap();
    let cfg = TrainConfig::new(TrainerKind::LevenbergMarquardt, 4);
    let (net, record) = train(&init, &split.train, &split.validation, &cfg).unwrap();
    assert!(record.epochs() <= 100);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    net.save(&split.normalizer, &path).unwrap();
    let (loaded, normalizer) = Mlp::load(&path).unwrap();
    assert_eq!(normalizer, split.normalizer);

    let before = split.predict(&net).unwrap();
    let after = predict_kpa(&loaded, &normalizer, &split.test_inputs).unwrap();
    assert_eq!(before, after);
    assert_eq!(before.len(), 44);
    let e_a = metrics::mape(&split.test_targets, &before).unwrap();
    assert!(e_a.is_finite() && e_a >= 0.0);
}

#[test]
fn every_trainer_runs_on_the_first_experiment_split() {
    let ds = embedded_gandhi();
    let split = PreparedSplit::new(&ds, &experiment1_split(&ds, 3, 1).unwrap()).unwrap();
    for kind in TrainerKind::ALL {
        for act in Activation::HIDDEN {
            let init = Mlp::build(&[8], act, 9).unwrap();
            let mut cfg = TrainConfig::new(kind, 9);
            cfg.max_epochs = 20;
            let (net, record) = train(&init, &split.train, &split.validation, &cfg).unwrap();
            assert!(record.epochs() <= 20);
            if record.stop_reason == StopReason::MaxEpochs {
                assert_eq!(record.epochs(), 20);
            }
            assert!(split.predict(&net).unwrap().iter().all(|p| p.is_finite()));
        }
    }
}
