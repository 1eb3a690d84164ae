use alternator::gradcheck::finite_difference_report;
use alternator::training::{loss_and_gradient, NoiseTarget, TrainConfig};
use alternator::{Activation, AlternatorModel, Dynamics, NetworkKind, NetworkTemplate, NoiseSchedule, ParameterSet, Tensor};

fn check(model: &AlternatorModel, data: &Tensor, cfg: &TrainConfig) -> f64 {
    let ids: Vec<u64> = (0..data.shape()[0] as u64).collect();
    let f = |p: &ParameterSet| {
        let mut m = model.clone();
        m.set_parameters(p)?;
        let (lb, g) = loss_and_gradient(&m, data, &ids, cfg, 11)?;
        Ok((lb.total, g))
    };
    let report = finite_difference_report(f, &model.parameters(), 1e-4).unwrap();
    assert!(report.coordinates > 0);
    report.max_rel_error
}

fn small(kind: NetworkKind, activation: Activation) -> (AlternatorModel, Tensor) {
    let sched = NoiseSchedule::linear(2, 0.3, 0.15, 0.1).unwrap();
    let template = NetworkTemplate { kind, hidden_dim: 4, depth: 2, activation };
    let model = AlternatorModel::new(2, 2, sched, template, 21).unwrap();
    let data = Tensor::new(vec![1, 2, 2], vec![0.3, -0.7, 1.1, 0.2]).unwrap();
    (model, data)
}

#[test]
fn full_objective_matches_finite_differences() {
    let (model, data) = small(NetworkKind::Mlp, Activation::Tanh);
    let err = check(&model, &data, &TrainConfig::default());
    assert!(err <= 1e-4, "max relative error {err}");
}

#[test]
fn gelu_and_literal_targets_match_finite_differences() {
    let (model, data) = small(NetworkKind::Mlp, Activation::Gelu);
    let cfg = TrainConfig { noise_target: NoiseTarget::Literal, lambda: 0.7, ..Default::default() };
    let err = check(&model, &data, &cfg);
    assert!(err <= 1e-4, "max relative error {err}");
}

#[test]
fn free_running_rollout_matches_finite_differences() {
    let (model, data) = small(NetworkKind::Mlp, Activation::Tanh);
    let cfg = TrainConfig { free_running: true, latent_samples: 2, ..Default::default() };
    let err = check(&model, &data, &cfg);
    assert!(err <= 1e-4, "max relative error {err}");
}

#[test]
fn attention_networks_match_finite_differences() {
    let (model, data) = small(NetworkKind::SelfAttention, Activation::Tanh);
    let err = check(&model, &data, &TrainConfig::default());
    assert!(err <= 1e-4, "max relative error {err}");
}

#[test]
fn interpolate_dynamics_match_finite_differences() {
    let (model, _) = small(NetworkKind::Mlp, Activation::Tanh);
    let model = model.with_dynamics(Dynamics::Interpolate);
    let batch = Tensor::new(vec![2, 2, 2], vec![0.3, -0.7, 1.1, 0.2, 0.0, 0.5, -0.4, 0.9]).unwrap();
    let err = check(&model, &batch, &TrainConfig { chunk_size: 1, ..Default::default() });
    assert!(err <= 1e-4, "max relative error {err}");
}
