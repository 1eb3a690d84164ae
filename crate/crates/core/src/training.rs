//! Training objective, optimizer and the training loop.
//!
//! The objective for a batch of `B` sequences is
//!
//! ```text
//! L = (1/B) Σ_b Σ_t ‖z_t − μ_z‖² + w·‖x_t − μ_x‖²                      (alternator part)
//!   + λ·(1/B) Σ_b Σ_t ‖ε_z − ε_ν(z_{t−1}, x_t)‖² + γ_t·‖ε_x − ε_ψ(z_{t−1})‖²   (noise matching)
//! ```
//!
//! with `w = D_z σ_z² / (D_x σ_x²)` and `γ_t = w·α_t/β_t`.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Error, Result};
use crate::exec::{chunk_ranges, Exec};
use crate::model::{normal_rows, slice_rows3, AlternatorModel, BoundModel};
use crate::nn::ParameterSet;
use crate::rng::{self, Rng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Where the noise-matching targets come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseTarget {
    /// `ε_z` is the noise injected into `z_t`; `ε_x = (x_t − μ_x)/σ_x`.
    #[default]
    Trajectory,
    /// Fresh standard normals for both targets.
    Literal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub noise_target: NoiseTarget,
    /// Feed sampled `x̂_t = μ_x + σ_x·ε` (instead of the data) into the latent update.
    pub free_running: bool,
    /// Latent trajectories sampled per sequence per epoch.
    pub latent_samples: usize,
    /// Sequences per tape; fixes the reduction order.
    pub chunk_size: usize,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            epochs: 1000,
            batch_size: 100,
            lr_max: 1e-3,
            lr_min: 1e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            noise_target: NoiseTarget::Trajectory,
            free_running: false,
            latent_samples: 1,
            chunk_size: 10,
            exec: Exec::Sequential,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return config_err(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.latent_samples == 0 || self.chunk_size == 0 {
            return config_err("epochs, batch_size, latent_samples and chunk_size must be positive");
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_max) {
            return config_err(format!("need 0 <= lr_min <= lr_max, got {} and {}", self.lr_min, self.lr_max));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return config_err(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return config_err("adam_eps must be positive");
        }
        Ok(())
    }
}

/// Loss terms for one batch (or averaged over an epoch).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub alt_z: f64,
    pub alt_x: f64,
    pub nm_z: f64,
    pub nm_x: f64,
}

impl LossBreakdown {
    pub fn terms(&self) -> [(&'static str, f64); 5] {
        [
            ("total", self.total),
            ("alt_z", self.alt_z),
            ("alt_x", self.alt_x),
            ("nm_z", self.nm_z),
            ("nm_x", self.nm_x),
        ]
    }

    /// Name of the first non-finite term.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        self.terms().into_iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| n)
    }

    fn add_scaled(&mut self, other: &LossBreakdown, c: f64) {
        self.total += c * other.total;
        self.alt_z += c * other.alt_z;
        self.alt_x += c * other.alt_x;
        self.nm_z += c * other.nm_z;
        self.nm_x += c * other.nm_x;
    }
}

/// `γ_t = (D_z σ_z² α_t) / (D_x σ_x² β_t)`.
pub fn gamma_weight(dx: usize, dz: usize, sigma_x: f64, sigma_z: f64, alpha_t: f64, beta_t: f64) -> Result<f64> {
    if beta_t == 0.0 {
        return config_err("gamma weight undefined for beta_t = 0");
    }
    if dx == 0 || !(sigma_x > 0.0) {
        return config_err("gamma weight needs D_x >= 1 and sigma_x > 0");
    }
    Ok((dz as f64 * sigma_z * sigma_z * alpha_t) / (dx as f64 * sigma_x * sigma_x * beta_t))
}

/// `D_z σ_z² / (D_x σ_x²)`, the weight on the observation residual.
pub fn observation_weight(dx: usize, dz: usize, sigma_x: f64, sigma_z: f64) -> Result<f64> {
    if !(sigma_x > 0.0) {
        return config_err("observation weight undefined for sigma_x = 0");
    }
    Ok((dz as f64 * sigma_z * sigma_z) / (dx as f64 * sigma_x * sigma_x))
}

/// Tape nodes of one rollout step for a block of sequences.
#[derive(Clone, Debug)]
pub struct StepNodes {
    /// 1-based timestep.
    pub step: usize,
    pub x_data: Var,
    pub mu_x: Var,
    pub eps_psi: Option<Var>,
    pub mu_z: Var,
    pub z: Var,
    pub eps_nu: Option<Var>,
    /// Standard-normal noise injected into `z`.
    pub noise_z: Var,
}

#[derive(Clone, Debug)]
pub struct Rollout {
    pub steps: Vec<StepNodes>,
}

/// Runs the training rollout over `data: [B, T, D_x]`. Each row draws `z_0`
/// and then, per step, `ε_x` and `ε_z` from its own stream.
pub fn rollout(
    model: &AlternatorModel,
    tape: &mut Tape,
    bound: &BoundModel,
    data: &Tensor,
    rngs: &mut [Rng],
    free_running: bool,
) -> Result<Rollout> {
    let (b, len, dx) = match *data.shape() {
        [b, t, d] => (b, t, d),
        ref s => return dim_err(format!("expected [B, T, D_x] batch, got {s:?}")),
    };
    if dx != model.dx() || rngs.len() != b {
        return dim_err("batch does not match the model or the noise streams");
    }
    if len > model.schedule().len() {
        return config_err(format!(
            "sequence length {len} exceeds the schedule length {}",
            model.schedule().len()
        ));
    }
    let sx = model.schedule().sigma_x;
    let sz = model.schedule().sigma_z;
    let mut z_prev = tape.leaf(normal_rows(rngs, model.dz()));
    let mut steps = Vec::with_capacity(len);
    for t in 0..len {
        let step = t + 1;
        let mut rows = Vec::with_capacity(b * dx);
        for i in 0..b {
            rows.extend_from_slice(&data.data()[(i * len + t) * dx..(i * len + t + 1) * dx]);
        }
        let x_data = tape.leaf(Tensor::new(vec![b, dx], rows)?);
        let noise_x = normal_rows(rngs, dx);
        let noise_z = tape.leaf(normal_rows(rngs, model.dz()));
        let mx = model.mean_x_on(tape, bound, z_prev, step, true)?;
        let x_in = if free_running {
            let n = tape.leaf(noise_x);
            tape.lincomb(&[(mx.mu, 1.0), (n, sx)])?
        } else {
            x_data
        };
        let mz = model.mean_z_on(tape, bound, z_prev, x_in, step, true)?;
        let z = tape.lincomb(&[(mz.mu, 1.0), (noise_z, sz)])?;
        steps.push(StepNodes {
            step,
            x_data,
            mu_x: mx.mu,
            eps_psi: mx.eps,
            mu_z: mz.mu,
            z,
            eps_nu: mz.eps,
            noise_z,
        });
        z_prev = z;
    }
    Ok(Rollout { steps })
}

fn scalar_sum(tape: &mut Tape, terms: &[(Var, f64)]) -> Result<Var> {
    if terms.is_empty() {
        Ok(tape.leaf(Tensor::scalar(0.0)))
    } else {
        tape.lincomb(terms)
    }
}

/// Records the two alternator terms, each already multiplied by `norm`
/// (normally `1/B`). Returns `(alt_z, alt_x)`.
pub fn alternator_loss(tape: &mut Tape, model: &AlternatorModel, rollout: &Rollout, norm: f64) -> Result<(Var, Var)> {
    let s = model.schedule();
    let w = observation_weight(model.dx(), model.dz(), s.sigma_x, s.sigma_z)?;
    let mut z_terms = Vec::with_capacity(rollout.steps.len());
    let mut x_terms = Vec::with_capacity(rollout.steps.len());
    for st in &rollout.steps {
        let dz = tape.sub(st.z, st.mu_z)?;
        z_terms.push((tape.sum_squares(dz)?, norm));
        let dx = tape.sub(st.x_data, st.mu_x)?;
        x_terms.push((tape.sum_squares(dx)?, norm * w));
    }
    Ok((scalar_sum(tape, &z_terms)?, scalar_sum(tape, &x_terms)?))
}

/// Records the two noise-matching terms scaled by `norm`. Returns `(nm_z, nm_x)`.
/// `literal` supplies one stream per row for [`NoiseTarget::Literal`].
pub fn noise_matching_loss(
    tape: &mut Tape,
    model: &AlternatorModel,
    rollout: &Rollout,
    target: NoiseTarget,
    norm: f64,
    literal: &mut [Rng],
) -> Result<(Var, Var)> {
    let s = model.schedule();
    let mut z_terms = Vec::new();
    let mut x_terms = Vec::new();
    for st in &rollout.steps {
        let (Some(eps_nu), Some(eps_psi)) = (st.eps_nu, st.eps_psi) else {
            continue;
        };
        let z_target = match target {
            NoiseTarget::Trajectory => st.noise_z,
            NoiseTarget::Literal => tape.leaf(normal_rows(literal, model.dz())),
        };
        let dz = tape.sub(z_target, eps_nu)?;
        z_terms.push((tape.sum_squares(dz)?, norm));

        let i = st.step - 1;
        let gamma = gamma_weight(model.dx(), model.dz(), s.sigma_x, s.sigma_z, s.alpha[i], s.beta[i]).unwrap_or(0.0);
        let x_target = match target {
            NoiseTarget::Trajectory => {
                let r = tape.sub(st.x_data, st.mu_x)?;
                tape.scale(r, 1.0 / s.sigma_x)?
            }
            NoiseTarget::Literal => tape.leaf(normal_rows(literal, model.dx())),
        };
        if gamma != 0.0 {
            let dx = tape.sub(x_target, eps_psi)?;
            x_terms.push((tape.sum_squares(dx)?, norm * gamma));
        }
    }
    Ok((scalar_sum(tape, &z_terms)?, scalar_sum(tape, &x_terms)?))
}

/// `total = alt_z + alt_x + λ·(nm_z + nm_x)`; the noise-matching nodes are
/// left out of the graph entirely when `λ = 0`.
pub fn combine(tape: &mut Tape, parts: [Var; 4], lambda: f64) -> Result<Var> {
    let [alt_z, alt_x, nm_z, nm_x] = parts;
    if lambda == 0.0 {
        tape.lincomb(&[(alt_z, 1.0), (alt_x, 1.0)])
    } else {
        tape.lincomb(&[(alt_z, 1.0), (alt_x, 1.0), (nm_z, lambda), (nm_x, lambda)])
    }
}

const LITERAL_TAG: u64 = 0x4c49_5445;
const EPOCH_TAG: u64 = 0x4550_4f43;
const SHUFFLE_TAG: u64 = 0x5348_5546;

/// Loss and parameter gradient of `batch: [B, T, D_x]`.
///
/// Sequence `i` draws its noise from a stream keyed by `(noise_seed, ids[i])`,
/// so the result does not depend on how the batch is chunked across threads.
pub fn loss_and_gradient(
    model: &AlternatorModel,
    batch: &Tensor,
    ids: &[u64],
    config: &TrainConfig,
    noise_seed: u64,
) -> Result<(LossBreakdown, ParameterSet)> {
    let (b, len, dx) = match *batch.shape() {
        [b, t, d] => (b, t, d),
        ref s => return dim_err(format!("expected [B, T, D_x] batch, got {s:?}")),
    };
    if ids.len() != b || b == 0 {
        return dim_err("need one id per sequence and a nonempty batch");
    }
    let k = config.latent_samples.max(1);
    let norm = 1.0 / (b * k) as f64;
    let chunks = chunk_ranges(b, config.chunk_size);
    let parts = config.exec.map(&chunks, |range| -> Result<(LossBreakdown, ParameterSet)> {
        let block = slice_rows3(batch, range.clone(), len, dx)?;
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let mut sums: [Vec<(Var, f64)>; 4] = Default::default();
        for sample in 0..k as u64 {
            let mut rngs: Vec<Rng> = ids[range.clone()]
                .iter()
                .map(|&id| rng::stream(noise_seed, &[id, sample]))
                .collect();
            let mut literal: Vec<Rng> = ids[range.clone()]
                .iter()
                .map(|&id| rng::stream(noise_seed, &[id, sample, LITERAL_TAG]))
                .collect();
            let ro = rollout(model, &mut tape, &bound, &block, &mut rngs, config.free_running)?;
            let (az, ax) = alternator_loss(&mut tape, model, &ro, norm)?;
            let (nz, nx) = noise_matching_loss(&mut tape, model, &ro, config.noise_target, norm, &mut literal)?;
            for (acc, v) in sums.iter_mut().zip([az, ax, nz, nx]) {
                acc.push((v, 1.0));
            }
        }
        let parts = [
            tape.lincomb(&sums[0])?,
            tape.lincomb(&sums[1])?,
            tape.lincomb(&sums[2])?,
            tape.lincomb(&sums[3])?,
        ];
        let total = combine(&mut tape, parts, config.lambda)?;
        let mut grads = tape.backward(total)?;
        let value = |v: Var| tape.value(v).item().unwrap_or(f64::NAN);
        let breakdown = LossBreakdown {
            total: value(total),
            alt_z: value(parts[0]),
            alt_x: value(parts[1]),
            nm_z: value(parts[2]),
            nm_x: value(parts[3]),
        };
        let g = ParameterSet::new(bound.all().map(|v| grads.take(v)).collect());
        Ok((breakdown, g))
    });
    let mut total = LossBreakdown::default();
    let mut grad = model.parameters().zeros_like();
    for p in parts {
        let (lb, g) = p?;
        total.add_scaled(&lb, 1.0);
        grad.accumulate(&g)?;
    }
    Ok((total, grad))
}

/// Loss and gradient of `batch` using the default noise streams for `seed`.
pub fn total_loss(model: &AlternatorModel, batch: &Tensor, config: &TrainConfig, seed: u64) -> Result<(LossBreakdown, ParameterSet)> {
    let ids: Vec<u64> = (0..batch.shape().first().copied().unwrap_or(0) as u64).collect();
    loss_and_gradient(model, batch, &ids, config, seed)
}

/// First and second moment estimates for Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: ParameterSet,
    v: ParameterSet,
    steps: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamState {
    pub fn new(params: &ParameterSet) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), steps: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut ParameterSet,
    grads: &ParameterSet,
    state: &mut AdamState,
    lr: f64,
    cfg: AdamConfig,
) -> Result<()> {
    if !params.same_layout(grads) || !params.same_layout(&state.m) {
        return dim_err("adam: parameters, gradients and state differ in layout");
    }
    state.steps += 1;
    let t = state.steps as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let tensors = params
        .tensors_mut()
        .iter_mut()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut().iter_mut().zip(state.v.tensors_mut()));
    for ((p, g), (m, v)) in tensors {
        let it = p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut()));
        for ((p, &g), (m, v)) in it {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π·epoch/total_epochs))`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total_epochs == 0 {
        return config_err("cosine schedule needs at least one epoch");
    }
    if epoch > total_epochs {
        return config_err(format!("epoch {epoch} beyond {total_epochs}"));
    }
    let frac = epoch as f64 / total_epochs as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: AlternatorModel,
    pub history: Vec<EpochRecord>,
}

pub fn train(model: AlternatorModel, data: &Tensor, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, data, config, |_| {})
}

/// Trains on `data: [N, T, D_x]`, calling `on_epoch` after every epoch.
///
/// Each epoch shuffles the sequences with an epoch-keyed stream and keeps the
/// final short batch. The reported loss is the per-sequence average over the
/// epoch, measured before each batch's update.
pub fn train_with(
    mut model: AlternatorModel,
    data: &Tensor,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    let (n, len, dx) = match *data.shape() {
        [n, t, d] => (n, t, d),
        ref s => return dim_err(format!("expected [N, T, D_x] data, got {s:?}")),
    };
    if n == 0 || len == 0 {
        return Err(Error::Data("training set is empty".into()));
    }
    if dx != model.dx() {
        return dim_err(format!("data has D_x={dx}, model expects {}", model.dx()));
    }
    model.schedule().ensure_valid()?;
    let adam = AdamConfig { beta1: config.adam_beta1, beta2: config.adam_beta2, eps: config.adam_eps };
    let mut params = model.parameters();
    let mut state = AdamState::new(&params);
    let mut history = Vec::with_capacity(config.epochs);
    let per = len * dx;

    for epoch in 0..config.epochs {
        let lr = cosine_lr(epoch, config.epochs, config.lr_max, config.lr_min)?;
        let order = shuffled(n, &mut rng::stream(config.seed, &[SHUFFLE_TAG, epoch as u64]));
        let noise_seed = rng::derive_seed(config.seed, &[EPOCH_TAG, epoch as u64]);
        let mut epoch_loss = LossBreakdown::default();
        for batch_ids in order.chunks(config.batch_size) {
            let mut rows = Vec::with_capacity(batch_ids.len() * per);
            for &i in batch_ids {
                rows.extend_from_slice(&data.data()[i as usize * per..(i as usize + 1) * per]);
            }
            let batch = Tensor::new(vec![batch_ids.len(), len, dx], rows)?;
            let (lb, grads) = loss_and_gradient(&model, &batch, batch_ids, config, noise_seed).map_err(|e| match e {
                Error::NonFinite { op } => Error::NumericAbort { epoch, term: op },
                other => other,
            })?;
            if let Some(term) = lb.non_finite_term() {
                return Err(Error::NumericAbort { epoch, term });
            }
            adam_step(&mut params, &grads, &mut state, lr, adam)?;
            model.set_parameters(&params)?;
            epoch_loss.add_scaled(&lb, batch_ids.len() as f64 / n as f64);
        }
        if let Some(term) = epoch_loss.non_finite_term() {
            return Err(Error::NumericAbort { epoch, term });
        }
        let record = EpochRecord { epoch, lr, loss: epoch_loss };
        on_epoch(&record);
        history.push(record);
    }
    Ok(TrainOutcome { model, history })
}

/// Fisher-Yates permutation of `0..n`.
fn shuffled(n: usize, rng: &mut Rng) -> Vec<u64> {
    use rand::Rng as _;
    let mut v: Vec<u64> = (0..n as u64).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        v.swap(i, j);
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NetworkTemplate;
    use crate::schedule::NoiseSchedule;

    #[test]
    fn gamma_examples() {
        assert_eq!(gamma_weight(3, 3, 0.2, 0.2, 0.4, 0.4).unwrap(), 1.0);
        assert_eq!(gamma_weight(3, 2, 0.2, 0.1, 0.0, 0.4).unwrap(), 0.0);
        let g = gamma_weight(4, 2, 0.2, 0.1, 0.5, 0.5).unwrap();
        assert!((g - 0.125).abs() < 1e-15);
        assert!(gamma_weight(4, 2, 0.2, 0.1, 0.5, 0.0).is_err());
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_lr(0, 100, 1e-3, 1e-5).unwrap(), 1e-3);
        assert!((cosine_lr(100, 100, 1e-3, 1e-5).unwrap() - 1e-5).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 1e-3, 1e-5).unwrap() - 5.05e-4).abs() < 1e-15);
        assert!(cosine_lr(0, 0, 1e-3, 1e-5).is_err());
    }

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let mut p = ParameterSet::new(vec![Tensor::vector(vec![1.0, -2.0])]);
        let g = ParameterSet::new(vec![Tensor::vector(vec![1.0, 1.0])]);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &g, &mut s, 0.1, AdamConfig::default()).unwrap();
        // m̂ = v̂ = 1, so the step is 0.1 / (1 + 1e-8)
        let step = 0.1 / (1.0 + 1e-8);
        assert!((p.tensors()[0].data()[0] - (1.0 - step)).abs() < 1e-15);

        let before = p.clone();
        let zero = g.zeros_like();
        let mut fresh = AdamState::new(&p);
        adam_step(&mut p, &zero, &mut fresh, 0.1, AdamConfig::default()).unwrap();
        assert_eq!(p, before);

        let wrong = ParameterSet::new(vec![Tensor::vector(vec![1.0])]);
        assert!(adam_step(&mut p, &wrong, &mut fresh, 0.1, AdamConfig::default()).is_err());
    }

    fn leafs(tape: &mut Tape, rows: &[&[f64]]) -> Var {
        tape.leaf(Tensor::from_rows(rows).unwrap())
    }

    fn unit_model(dx: usize, dz: usize, sx: f64, sz: f64) -> AlternatorModel {
        AlternatorModel::zeroed(dx, dz, NoiseSchedule::linear(1, sx, sz, 0.5).unwrap(), NetworkTemplate::default()).unwrap()
    }

    #[test]
    fn alternator_loss_unit_residuals() {
        let m = unit_model(1, 1, 0.3, 0.3);
        let mut tape = Tape::new();
        let z = leafs(&mut tape, &[&[1.0]]);
        let mu_z = leafs(&mut tape, &[&[0.0]]);
        let x = leafs(&mut tape, &[&[2.0]]);
        let mu_x = leafs(&mut tape, &[&[1.0]]);
        let zero = leafs(&mut tape, &[&[0.0]]);
        let ro = Rollout {
            steps: vec![StepNodes { step: 1, x_data: x, mu_x, eps_psi: None, mu_z, z, eps_nu: None, noise_z: zero }],
        };
        let (az, ax) = alternator_loss(&mut tape, &m, &ro, 1.0).unwrap();
        assert_eq!(tape.value(az).item().unwrap() + tape.value(ax).item().unwrap(), 2.0);

        // residuals zero -> zero loss
        let ro0 = Rollout {
            steps: vec![StepNodes { step: 1, x_data: x, mu_x: x, eps_psi: None, mu_z: z, z, eps_nu: None, noise_z: zero }],
        };
        let (az, ax) = alternator_loss(&mut tape, &m, &ro0, 1.0).unwrap();
        assert_eq!(tape.value(az).item().unwrap() + tape.value(ax).item().unwrap(), 0.0);

        // doubling σ_z quadruples the observation weight
        let m2 = unit_model(1, 1, 0.3, 0.6);
        let (_, ax2) = alternator_loss(&mut tape, &m2, &ro, 1.0).unwrap();
        let (_, ax1) = alternator_loss(&mut tape, &m, &ro, 1.0).unwrap();
        let ratio = tape.value(ax2).item().unwrap() / tape.value(ax1).item().unwrap();
        assert!((ratio - 4.0).abs() < 1e-12);
    }

    #[test]
    fn noise_matching_examples() {
        // α_1 = 0 makes γ_1 = 0, leaving only the latent term
        let sched = NoiseSchedule { beta: vec![0.5], alpha: vec![0.0], sigma_x: 0.3, sigma_z: 0.3 };
        let m = AlternatorModel::zeroed(2, 2, sched, NetworkTemplate::default()).unwrap();
        let mut tape = Tape::new();
        let target = leafs(&mut tape, &[&[1.0, 1.0]]);
        let pred = leafs(&mut tape, &[&[0.0, 0.0]]);
        let x = leafs(&mut tape, &[&[0.5, 0.5]]);
        let ro = Rollout {
            steps: vec![StepNodes { step: 1, x_data: x, mu_x: x, eps_psi: Some(pred), mu_z: pred, z: pred, eps_nu: Some(pred), noise_z: target }],
        };
        let (nz, nx) = noise_matching_loss(&mut tape, &m, &ro, NoiseTarget::Trajectory, 1.0, &mut []).unwrap();
        assert_eq!(tape.value(nz).item().unwrap(), 2.0);
        assert_eq!(tape.value(nx).item().unwrap(), 0.0);

        // predictions equal to targets
        let ro_eq = Rollout {
            steps: vec![StepNodes { step: 1, x_data: x, mu_x: x, eps_psi: Some(pred), mu_z: pred, z: pred, eps_nu: Some(target), noise_z: target }],
        };
        let (nz, nx) = noise_matching_loss(&mut tape, &m, &ro_eq, NoiseTarget::Trajectory, 1.0, &mut []).unwrap();
        assert_eq!(tape.value(nz).item().unwrap() + tape.value(nx).item().unwrap(), 0.0);
    }

    fn toy() -> (AlternatorModel, Tensor) {
        let sched = NoiseSchedule::linear(3, 0.3, 0.15, 0.1).unwrap();
        let t = NetworkTemplate { hidden_dim: 8, ..Default::default() };
        let m = AlternatorModel::new(2, 2, sched, t, 5).unwrap();
        let data = Tensor::new(vec![4, 3, 2], (0..24).map(|i| ((i as f64) * 0.37).sin()).collect()).unwrap();
        (m, data)
    }

    #[test]
    fn breakdown_is_additive_and_nonnegative() {
        let (m, data) = toy();
        for lambda in [0.0, 0.5, 1.0, 3.0] {
            let cfg = TrainConfig { lambda, chunk_size: 3, ..Default::default() };
            let (lb, _) = total_loss(&m, &data, &cfg, 1).unwrap();
            let sum = lb.alt_z + lb.alt_x + lambda * (lb.nm_z + lb.nm_x);
            assert!((lb.total - sum).abs() <= 1e-10);
            assert!(lb.terms().iter().all(|(_, v)| *v >= 0.0));
        }
    }

    #[test]
    fn lambda_zero_is_alternator_loss() {
        let (m, data) = toy();
        let cfg = TrainConfig { lambda: 0.0, ..Default::default() };
        let (lb, _) = total_loss(&m, &data, &cfg, 1).unwrap();
        assert_eq!(lb.total, lb.alt_z + lb.alt_x);
    }

    #[test]
    fn chunking_and_exec_do_not_change_loss() {
        let (m, data) = toy();
        let a = total_loss(&m, &data, &TrainConfig { chunk_size: 1, ..Default::default() }, 2).unwrap();
        let b = total_loss(&m, &data, &TrainConfig { chunk_size: 1, exec: Exec::Parallel, ..Default::default() }, 2).unwrap();
        assert_eq!(a, b);
        let c = total_loss(&m, &data, &TrainConfig { chunk_size: 4, ..Default::default() }, 2).unwrap();
        assert!((a.0.total - c.0.total).abs() < 1e-12);
    }

    #[test]
    fn zero_model_on_zero_data_has_no_observation_residual() {
        let sched = NoiseSchedule::vanilla(4, 0.3, 0.15).unwrap();
        let m = AlternatorModel::zeroed(2, 3, sched, NetworkTemplate::default()).unwrap();
        let data = Tensor::zeros(vec![2, 4, 2]);
        let (lb, _) = total_loss(&m, &data, &TrainConfig::default(), 0).unwrap();
        assert_eq!(lb.alt_x, 0.0);
        assert_eq!(lb.nm_x, 0.0);
    }

    #[test]
    fn one_epoch_moves_parameters_and_is_reproducible() {
        let (m, data) = toy();
        let cfg = TrainConfig { epochs: 1, batch_size: 2, ..Default::default() };
        let a = train(m.clone(), &data, &cfg).unwrap();
        assert_eq!(a.history.len(), 1);
        assert!(a.history[0].loss.total.is_finite());
        assert_ne!(a.model.parameters(), m.parameters());
        let b = train(m, &data, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn lambda_zero_at_vanilla_beta_leaves_eps_psi_untouched() {
        let sched = NoiseSchedule::vanilla(3, 0.3, 0.15).unwrap();
        let m = AlternatorModel::new(2, 2, sched, NetworkTemplate { hidden_dim: 8, ..Default::default() }, 1).unwrap();
        let data = Tensor::new(vec![2, 3, 2], (0..12).map(|i| (i as f64 * 0.5).cos()).collect()).unwrap();
        let (_, g) = total_loss(&m, &data, &TrainConfig { lambda: 0.0, ..Default::default() }, 3).unwrap();
        let [nf, ng, np, _] = m.parameter_counts();
        for t in &g.tensors()[nf + ng..nf + ng + np] {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn bad_configs_rejected() {
        let (m, data) = toy();
        for cfg in [
            TrainConfig { epochs: 0, ..Default::default() },
            TrainConfig { lr_min: 1.0, lr_max: 0.1, ..Default::default() },
            TrainConfig { adam_beta1: 1.0, ..Default::default() },
            TrainConfig { lambda: -1.0, ..Default::default() },
        ] {
            assert!(matches!(train(m.clone(), &data, &cfg), Err(Error::Config(_))));
        }
        let empty = Tensor::zeros(vec![0, 3, 2]);
        assert!(matches!(train(m, &empty, &TrainConfig::default()), Err(Error::Data(_))));
    }
}
