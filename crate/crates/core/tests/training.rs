use sloshnet::checks::tiny_video;
use sloshnet::config::ModelConfig;
use sloshnet::model::Model;
use sloshnet::trainer::{episode_step, evaluate, load_checkpoint, save_checkpoint, train, train_model, Sgd, TrainConfig};
use sloshnet::Tensor;

fn tiny(episodes: usize) -> TrainConfig {
    TrainConfig {
        model: ModelConfig::tiny(),
        video: tiny_video(),
        episodes,
        way: 2,
        shot: 1,
        queries: 2,
        ..TrainConfig::default()
    }
}

fn same_params(a: &Model<f64>, b: &Model<f64>) -> bool {
    a.params.iter().zip(b.params.iter()).all(|((_, x), (_, y))| x.value.bitwise_eq(&y.value))
}

#[test]
fn zero_episodes_leave_parameters_untouched() {
    let cfg = tiny(0);
    let (trained, log) = train(&cfg).unwrap();
    assert!(log.is_empty());
    assert!(same_params(&trained, &Model::new(cfg.model.clone()).unwrap()));
}

#[test]
fn training_is_deterministic() {
    let cfg = tiny(4);
    let (a, la) = train(&cfg).unwrap();
    let (b, lb) = train(&cfg).unwrap();
    assert_eq!(la, lb);
    assert!(same_params(&a, &b));
    let other = TrainConfig { seed: 1, ..cfg };
    let (c, _) = train(&other).unwrap();
    assert!(!same_params(&a, &c));
}

#[test]
fn plain_sgd_step_is_exact() {
    let cfg = tiny(1);
    let mut model = Model::new(cfg.model.clone()).unwrap();
    let before = model.clone();
    let episode = cfg.source().sample_episode(2, 1, 2, 3).unwrap();
    let (_, grads) = episode_step(&model, &episode, 1).unwrap();
    let lr = 0.05;
    Sgd::new(0.0, model.params.len()).step(&mut model, &grads, lr);
    for (((_, new), (_, old)), grad) in model.params.iter().zip(before.params.iter()).zip(&grads) {
        let Some(grad) = grad.as_ref().filter(|_| old.trainable) else {
            assert!(new.value.bitwise_eq(&old.value), "{}", new.name);
            continue;
        };
        for ((n, o), g) in new.value.data().iter().zip(old.value.data()).zip(grad.data()) {
            let want = o - lr * g;
            let want = old.clamp.map_or(want, |(lo, hi)| want.clamp(lo, hi));
            assert_eq!(n.to_bits(), want.to_bits(), "{}", new.name);
        }
    }
}

#[test]
fn blend_weights_stay_in_unit_interval() {
    let cfg = TrainConfig { lr: 50.0, ..tiny(3) };
    let mut model = Model::new(cfg.model.clone()).unwrap();
    let gamma = model.ffas.as_ref().unwrap().gamma;
    let lambda = model.lambda.unwrap();
    *model.params.value_mut(gamma) = Tensor::scalar(0.999);
    *model.params.value_mut(lambda) = Tensor::scalar(0.001);
    train_model(&mut model, &cfg, &cfg.source(), |_| {}).unwrap();
    for id in [gamma, lambda] {
        let v = model.params.value(id).item();
        assert!((0.0..=1.0).contains(&v), "{v}");
    }
}

#[test]
fn search_weights_remain_distributions() {
    let cfg = TrainConfig { lr: 1.0, ..tiny(3) };
    let (model, _) = train(&cfg).unwrap();
    let sw = model.search_weights().unwrap();
    assert_eq!(sw.rows.len(), 1);
    for row in &sw.rows {
        assert!(row.weights.iter().all(|&w| w > 0.0));
        assert!((row.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn checkpoint_round_trip_preserves_evaluation() {
    let cfg = tiny(3);
    let (model, _) = train(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &model).unwrap();
    let back = load_checkpoint(&path, &cfg.model).unwrap();
    assert!(same_params(&model, &back));
    let a = evaluate(&model, &cfg, &cfg.source(), 6, 9).unwrap();
    let b = evaluate(&back, &cfg, &cfg.source(), 6, 9).unwrap();
    assert_eq!(a, b);
}

#[test]
fn evaluation_is_repeatable() {
    let cfg = tiny(0);
    let model = Model::<f64>::new(cfg.model.clone()).unwrap();
    let a = evaluate(&model, &cfg, &cfg.source(), 5, 2).unwrap();
    let b = evaluate(&model, &cfg, &cfg.source(), 5, 2).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.tasks, 5);
}

/// Mean of the 50-episode window ending at each multiple of 50.
fn windows(losses: &[f64]) -> Vec<f64> {
    losses.chunks(50).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
}

#[test]
fn loss_trends_down_over_first_200_episodes() {
    let cfg = TrainConfig { episodes: 200, ..TrainConfig::default() };
    let (_, log) = train(&cfg).unwrap();
    let w = windows(&log.iter().map(|m| m.loss).collect::<Vec<_>>());
    // Least-squares slope across the four windows.
    let n = w.len() as f64;
    let xm = (n - 1.0) / 2.0;
    let ym = w.iter().sum::<f64>() / n;
    let slope = w.iter().enumerate().map(|(i, y)| (i as f64 - xm) * (y - ym)).sum::<f64>()
        / (0..w.len()).map(|i| (i as f64 - xm).powi(2)).sum::<f64>();
    assert!(slope < 0.0, "{w:?}");
    assert!(w[3] < w[0], "{w:?}");
}

/// Random features already separate some appearance classes, so the
/// untrained model sits a few points above 1/way rather than exactly on it.
#[test]
fn untrained_model_is_near_chance() {
    let cfg = TrainConfig::default();
    let model = Model::<f64>::new(cfg.model.clone()).unwrap();
    let r = evaluate(&model, &cfg, &cfg.source(), 200, 7).unwrap();
    assert!((r.mean - 0.2).abs() <= 0.1, "{r:?}");
}
