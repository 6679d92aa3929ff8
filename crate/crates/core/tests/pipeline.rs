use adapref::data::{generate, Dataset, DatasetConfig, GroundTruth, LabelMode};
use adapref::dpo::{self, DpoConfig, DpoDataConfig, DpoDataset, TabularPolicy};
use adapref::loss::LossConfig;
use adapref::model::{Architecture, RewardModel};
use adapref::tau::{solve_tau, TauSolverConfig};
use adapref::train::{tau_analytics, train, CheckpointPolicy, TrainConfig};

fn small_config(loss: LossConfig) -> TrainConfig {
    TrainConfig {
        loss,
        architecture: Architecture::Mlp2 { hidden: 8 },
        epochs: 3,
        batch_size: 32,
        checkpoints: CheckpointPolicy::None,
        ..TrainConfig::default()
    }
}

#[test]
fn dataset_file_round_trip_then_train() {
    let gt = GroundTruth::random_mlp2(4, 6, 0.9, 5);
    let cfg = DatasetConfig {
        n_pairs: 200,
        input_dim: 4,
        segment_length: 3,
        gamma: 0.9,
        label_mode: LabelMode::Stochastic,
        seed: 5,
        ..DatasetConfig::default()
    };
    let splits = generate(&cfg, &gt).unwrap();
    let dir = std::env::temp_dir().join(format!("adapref-pipeline-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("train.jsonl");
    splits.train.save(&path).unwrap();
    let back = Dataset::load(&path).unwrap();
    std::fs::remove_dir_all(&dir).ok();
    assert_eq!(back, splits.train);

    let a = train(
        &back,
        Some(&splits.test),
        &small_config(LossConfig::default()),
    )
    .unwrap();
    let b = train(
        &splits.train,
        Some(&splits.test),
        &small_config(LossConfig::default()),
    )
    .unwrap();
    assert_eq!(a.model, b.model);
    let taus = a.report.final_taus.as_ref().unwrap();
    assert_eq!(taus.len(), back.len());
    assert!(taus.iter().all(|&t| (0.1..=5.0).contains(&t)));
}

#[test]
fn checkpoint_restores_rewards() {
    let gt = GroundTruth::random_linear(6, 1.0, 2);
    let splits = generate(
        &DatasetConfig {
            n_pairs: 100,
            input_dim: 6,
            ..DatasetConfig::default()
        },
        &gt,
    )
    .unwrap();
    let out = train(
        &splits.train,
        None,
        &small_config(LossConfig::cross_entropy()),
    )
    .unwrap();
    let mut buf = Vec::new();
    out.model.save(&mut buf).unwrap();
    let back = RewardModel::load(buf.as_slice()).unwrap();
    let x = vec![0.3; 6];
    assert_eq!(
        back.reward(&x).unwrap().to_bits(),
        out.model.reward(&x).unwrap().to_bits()
    );
}

#[test]
fn tau_analytics_counts_every_pair() {
    let gt = GroundTruth::random_linear(4, 1.0, 9);
    let splits = generate(
        &DatasetConfig {
            n_pairs: 250,
            input_dim: 4,
            ..DatasetConfig::default()
        },
        &gt,
    )
    .unwrap();
    let out = train(&splits.train, None, &small_config(LossConfig::default())).unwrap();
    let an = tau_analytics(&out.report, 12).unwrap();
    assert_eq!(an.histogram.len(), 12);
    assert_eq!(
        an.histogram.iter().map(|b| b.count).sum::<usize>(),
        splits.train.len()
    );
    assert_eq!(an.bin_means_tau.len(), 5);
    assert!(!an.degenerate);
}

#[test]
fn solver_is_consistent_with_training_taus() {
    // The final taus in a report are the solver's answers at the learned deltas.
    let gt = GroundTruth::random_linear(4, 1.0, 4);
    let splits = generate(
        &DatasetConfig {
            n_pairs: 120,
            input_dim: 4,
            ..DatasetConfig::default()
        },
        &gt,
    )
    .unwrap();
    let cfg = small_config(LossConfig::adaptive_quadratic(0.1, 0.2));
    let out = train(&splits.train, None, &cfg).unwrap();
    let taus = out.report.final_taus.unwrap();
    for (d, t) in out.report.learned_deltas.iter().zip(&taus) {
        let again = solve_tau(*d, &cfg.loss, &TauSolverConfig::default())
            .unwrap()
            .tau;
        assert_eq!(again.to_bits(), t.to_bits());
    }
}

#[test]
fn dpo_learns_planted_preferences() {
    let data = DpoDataset::generate(&DpoDataConfig {
        n_pairs: 300,
        seed: 11,
        ..DpoDataConfig::default()
    })
    .unwrap();
    let reference = TabularPolicy::uniform(data.header.n_states, data.header.n_actions);
    for loss in [LossConfig::cross_entropy(), LossConfig::default()] {
        let cfg = DpoConfig {
            loss,
            epochs: 60,
            ..DpoConfig::default()
        };
        let out =
            dpo::train_dpo(&data.pairs, &reference, &cfg, data.strengths().as_deref()).unwrap();
        assert!(
            out.report.final_accuracy() > 0.9,
            "{}: {}",
            loss.kind,
            out.report.final_accuracy()
        );
        assert!(out.policy.row_sum_error() < 1e-12);
    }
}
