//! The alternating generative process.
//!
//! Each step first emits an observation from the previous latent,
//!
//! ```text
//! μ_x = √β_t·f_θ(z_{t−1}) + √(1−β_t−σ_x²)·ε_ψ(z_{t−1}),   x_t = μ_x + σ_x·ε
//! ```
//!
//! then updates the latent from the previous latent and the new observation,
//!
//! ```text
//! μ_z = √α_t·g_φ(x_t) + √(1−α_t−σ_z²)·ε_ν([z_{t−1}; x_t]),   z_t = μ_z + σ_z·ε
//! ```
//!
//! [`Dynamics::Interpolate`] replaces the noise networks by the original
//! fixed-noise recursion, `μ_x = √(1−σ_x²)·f_θ(z_{t−1})` and
//! `μ_z = √α_t·g_φ(x_t) + √(1−α_t−σ_z²)·z_{t−1}`.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Result};
use crate::exec::{chunk_ranges, Exec};
use crate::nn::{Activation, Network, NetworkKind, NetworkSpec, ParameterSet};
use crate::rng::{self, Rng};
use crate::schedule::NoiseSchedule;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Rows per work item when running many sequences at once.
pub const SEQUENCE_CHUNK: usize = 32;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dynamics {
    /// Learned noise models `ε_ψ`, `ε_ν`.
    #[default]
    NoiseModel,
    /// Original Alternator recursion; the noise networks are carried but unused.
    Interpolate,
}

/// Architecture shared by the four networks; input/output dims come from the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkTemplate {
    pub kind: NetworkKind,
    pub hidden_dim: usize,
    pub depth: usize,
    pub activation: Activation,
}

impl Default for NetworkTemplate {
    fn default() -> Self {
        Self {
            kind: NetworkKind::Mlp,
            hidden_dim: 32,
            depth: 2,
            activation: Activation::Tanh,
        }
    }
}

impl NetworkTemplate {
    pub fn spec(&self, input_dim: usize, output_dim: usize) -> NetworkSpec {
        NetworkSpec {
            kind: self.kind,
            input_dim,
            hidden_dim: self.hidden_dim,
            output_dim,
            depth: self.depth,
            activation: self.activation,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlternatorModel {
    dx: usize,
    dz: usize,
    f_theta: Network,
    g_phi: Network,
    eps_psi: Network,
    eps_nu: Network,
    schedule: NoiseSchedule,
    dynamics: Dynamics,
}

/// Trajectory of one sequence. `zs` includes `z_0` at row 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub xs: Tensor,
    pub zs: Tensor,
    pub mu_xs: Tensor,
    pub mu_zs: Tensor,
}

/// One step of the generative process.
#[derive(Clone, Debug, PartialEq)]
pub struct StepSample {
    pub x: Tensor,
    pub z: Tensor,
    pub mu_x: Tensor,
    pub mu_z: Tensor,
}

/// How the latent chain is propagated when conditioning on observations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentPropagation {
    /// `z_0 ~ N(0, I)` and `z_t = μ_z + σ_z·ε`, as in the generative process.
    #[default]
    Sampled,
    /// `z_0 = 0` and `z_t = μ_z`; fully deterministic.
    Mean,
}

/// Parameters of the four networks registered on a tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub f_theta: Vec<Var>,
    pub g_phi: Vec<Var>,
    pub eps_psi: Vec<Var>,
    pub eps_nu: Vec<Var>,
}

impl BoundModel {
    /// Vars in the same order as [`AlternatorModel::parameters`].
    pub fn all(&self) -> impl Iterator<Item = Var> + '_ {
        self.f_theta
            .iter()
            .chain(&self.g_phi)
            .chain(&self.eps_psi)
            .chain(&self.eps_nu)
            .copied()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MeanXNode {
    pub mu: Var,
    /// `ε_ψ(z_{t−1})`, when evaluated.
    pub eps: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct MeanZNode {
    pub mu: Var,
    /// `ε_ν([z_{t−1}; x_t])`, when evaluated.
    pub eps: Option<Var>,
}

/// Means of a batch conditioned on (possibly partially) observed data.
#[derive(Clone, Debug)]
pub struct Conditioned {
    /// `[B, T, D_x]` observation means.
    pub mu_x: Tensor,
    /// `[B, T, D_z]` latent means.
    pub mu_z: Tensor,
    /// `[B, T, D_x]` inputs fed to the latent update (data where observed, `μ_x` elsewhere).
    pub filled: Tensor,
    /// `[B, D_z]` latent after the last step.
    pub z_last: Tensor,
}

impl AlternatorModel {
    /// Builds a model with freshly initialized networks.
    pub fn new(
        dx: usize,
        dz: usize,
        schedule: NoiseSchedule,
        template: NetworkTemplate,
        seed: u64,
    ) -> Result<Self> {
        let mk = |i: usize, o: usize, tag: u64| Network::init(template.spec(i, o), rng::derive_seed(seed, &[tag]));
        Self::from_parts(
            dx,
            dz,
            mk(dz, dx, 0)?,
            mk(dx, dz, 1)?,
            mk(dz, dx, 2)?,
            mk(dz + dx, dz, 3)?,
            schedule,
            Dynamics::NoiseModel,
        )
    }

    /// Builds a model whose networks all output zero.
    pub fn zeroed(dx: usize, dz: usize, schedule: NoiseSchedule, template: NetworkTemplate) -> Result<Self> {
        let mk = |i: usize, o: usize| Network::zeroed(template.spec(i, o));
        Self::from_parts(dx, dz, mk(dz, dx)?, mk(dx, dz)?, mk(dz, dx)?, mk(dz + dx, dz)?, schedule, Dynamics::NoiseModel)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        dx: usize,
        dz: usize,
        f_theta: Network,
        g_phi: Network,
        eps_psi: Network,
        eps_nu: Network,
        schedule: NoiseSchedule,
        dynamics: Dynamics,
    ) -> Result<Self> {
        if dx == 0 || dz == 0 {
            return config_err(format!("model dims must be positive, got D_x={dx}, D_z={dz}"));
        }
        for (name, net, i, o) in [
            ("f_theta", &f_theta, dz, dx),
            ("g_phi", &g_phi, dx, dz),
            ("eps_psi", &eps_psi, dz, dx),
            ("eps_nu", &eps_nu, dz + dx, dz),
        ] {
            let s = net.spec();
            if s.input_dim != i || s.output_dim != o {
                return dim_err(format!(
                    "{name} maps {} -> {}, expected {i} -> {o}",
                    s.input_dim, s.output_dim
                ));
            }
        }
        schedule.ensure_valid()?;
        Ok(Self { dx, dz, f_theta, g_phi, eps_psi, eps_nu, schedule, dynamics })
    }

    pub fn with_dynamics(mut self, dynamics: Dynamics) -> Self {
        self.dynamics = dynamics;
        self
    }

    pub fn dx(&self) -> usize {
        self.dx
    }

    pub fn dz(&self) -> usize {
        self.dz
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn dynamics(&self) -> Dynamics {
        self.dynamics
    }

    /// The four networks in declaration order: `f_θ`, `g_φ`, `ε_ψ`, `ε_ν`.
    pub fn networks(&self) -> [&Network; 4] {
        [&self.f_theta, &self.g_phi, &self.eps_psi, &self.eps_nu]
    }

    pub fn f_theta(&self) -> &Network {
        &self.f_theta
    }

    pub fn g_phi(&self) -> &Network {
        &self.g_phi
    }

    pub fn eps_psi(&self) -> &Network {
        &self.eps_psi
    }

    pub fn eps_nu(&self) -> &Network {
        &self.eps_nu
    }

    /// All parameters concatenated in network declaration order.
    pub fn parameters(&self) -> ParameterSet {
        ParameterSet::new(
            self.networks()
                .iter()
                .flat_map(|n| n.params().tensors().iter().cloned())
                .collect(),
        )
    }

    /// Number of parameter tensors per network.
    pub fn parameter_counts(&self) -> [usize; 4] {
        self.networks().map(|n| n.params().len())
    }

    pub fn set_parameters(&mut self, params: &ParameterSet) -> Result<()> {
        if !self.parameters().same_layout(params) {
            return dim_err("parameter set does not match the model layout");
        }
        let mut it = params.tensors().iter();
        for net in [&mut self.f_theta, &mut self.g_phi, &mut self.eps_psi, &mut self.eps_nu] {
            for t in net.params_mut().tensors_mut() {
                *t = it.next().expect("layout checked").clone();
            }
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        BoundModel {
            f_theta: self.f_theta.params().bind(tape),
            g_phi: self.g_phi.params().bind(tape),
            eps_psi: self.eps_psi.params().bind(tape),
            eps_nu: self.eps_nu.params().bind(tape),
        }
    }

    /// Records `μ_x` for `z_prev: [B, D_z]` at 1-based `step`. `ε_ψ` is evaluated
    /// when `want_eps` is set or its coefficient is nonzero.
    pub fn mean_x_on(
        &self,
        tape: &mut Tape,
        bound: &BoundModel,
        z_prev: Var,
        step: usize,
        want_eps: bool,
    ) -> Result<MeanXNode> {
        let f = self.f_theta.forward(tape, &bound.f_theta, z_prev)?;
        match self.dynamics {
            Dynamics::NoiseModel => {
                let (signal, noise) = self.schedule.x_coefficients(step)?;
                let eps = if want_eps || noise != 0.0 {
                    Some(self.eps_psi.forward(tape, &bound.eps_psi, z_prev)?)
                } else {
                    None
                };
                let mu = match eps {
                    Some(e) if noise != 0.0 => tape.lincomb(&[(f, signal), (e, noise)])?,
                    _ => tape.scale(f, signal)?,
                };
                Ok(MeanXNode { mu, eps })
            }
            Dynamics::Interpolate => {
                self.schedule.x_coefficients(step)?;
                let sx = self.schedule.sigma_x;
                let mu = tape.scale(f, (1.0 - sx * sx).sqrt())?;
                Ok(MeanXNode { mu, eps: None })
            }
        }
    }

    /// Records `μ_z` for `z_prev: [B, D_z]` and `x: [B, D_x]` at 1-based `step`.
    pub fn mean_z_on(
        &self,
        tape: &mut Tape,
        bound: &BoundModel,
        z_prev: Var,
        x: Var,
        step: usize,
        want_eps: bool,
    ) -> Result<MeanZNode> {
        let (signal, noise) = self.schedule.z_coefficients(step)?;
        let g = self.g_phi.forward(tape, &bound.g_phi, x)?;
        match self.dynamics {
            Dynamics::NoiseModel => {
                let eps = if want_eps || noise != 0.0 {
                    let zx = tape.concat(z_prev, x)?;
                    Some(self.eps_nu.forward(tape, &bound.eps_nu, zx)?)
                } else {
                    None
                };
                let mu = match eps {
                    Some(e) if noise != 0.0 => tape.lincomb(&[(g, signal), (e, noise)])?,
                    _ => tape.scale(g, signal)?,
                };
                Ok(MeanZNode { mu, eps })
            }
            Dynamics::Interpolate => {
                let mu = if noise != 0.0 {
                    tape.lincomb(&[(g, signal), (z_prev, noise)])?
                } else {
                    tape.scale(g, signal)?
                };
                Ok(MeanZNode { mu, eps: None })
            }
        }
    }

    fn check_last_dim(t: &Tensor, d: usize, what: &str) -> Result<()> {
        if t.last_dim() != d || t.ndim() == 0 || t.ndim() > 2 {
            return dim_err(format!("{what} must be [{d}] or [B, {d}], got {:?}", t.shape()));
        }
        Ok(())
    }

    fn restore_rank(out: Tensor, like: &Tensor, d: usize) -> Result<Tensor> {
        if like.ndim() == 1 {
            out.reshape(vec![d])
        } else {
            Ok(out)
        }
    }

    /// `μ_x` for `z_prev` of shape `[D_z]` or `[B, D_z]`.
    pub fn mean_x(&self, z_prev: &Tensor, step: usize) -> Result<Tensor> {
        Self::check_last_dim(z_prev, self.dz, "z_prev")?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let z = tape.leaf(z_prev.as_matrix()?);
        let m = self.mean_x_on(&mut tape, &bound, z, step, false)?;
        Self::restore_rank(tape.value(m.mu).clone(), z_prev, self.dx)
    }

    /// `μ_z` for `z_prev` of shape `[D_z]` / `[B, D_z]` and matching `x`.
    pub fn mean_z(&self, z_prev: &Tensor, x: &Tensor, step: usize) -> Result<Tensor> {
        Self::check_last_dim(z_prev, self.dz, "z_prev")?;
        Self::check_last_dim(x, self.dx, "x")?;
        if z_prev.rows() != x.rows() {
            return dim_err("z_prev and x have different batch sizes");
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let z = tape.leaf(z_prev.as_matrix()?);
        let xv = tape.leaf(x.as_matrix()?);
        let m = self.mean_z_on(&mut tape, &bound, z, xv, step, false)?;
        Self::restore_rank(tape.value(m.mu).clone(), z_prev, self.dz)
    }

    /// One generative step with caller-supplied standard-normal noise.
    pub fn sample_step(
        &self,
        z_prev: &Tensor,
        step: usize,
        noise_x: &Tensor,
        noise_z: &Tensor,
    ) -> Result<StepSample> {
        let mu_x = self.mean_x(z_prev, step)?;
        if noise_x.shape() != mu_x.shape() {
            return dim_err(format!("noise_x shape {:?}, expected {:?}", noise_x.shape(), mu_x.shape()));
        }
        let x = add_scaled(&mu_x, noise_x, self.schedule.sigma_x);
        let mu_z = self.mean_z(z_prev, &x, step)?;
        if noise_z.shape() != mu_z.shape() {
            return dim_err(format!("noise_z shape {:?}, expected {:?}", noise_z.shape(), mu_z.shape()));
        }
        let z = add_scaled(&mu_z, noise_z, self.schedule.sigma_z);
        Ok(StepSample { x, z, mu_x, mu_z })
    }

    fn check_horizon(&self, first_step: usize, len: usize) -> Result<()> {
        if len == 0 {
            return config_err("horizon must be at least 1");
        }
        let last = first_step + len - 1;
        if first_step == 0 || last > self.schedule.len() {
            return config_err(format!(
                "steps {first_step}..={last} exceed the schedule length {}",
                self.schedule.len()
            ));
        }
        Ok(())
    }

    /// Samples a sequence of `len` steps starting from `z_0 ~ N(0, I)`.
    pub fn generate(&self, len: usize, seed: u64) -> Result<Trajectory> {
        Ok(self.generate_batch(1, len, seed, Exec::Sequential)?.remove(0))
    }

    /// Samples `n` independent sequences; sequence `i` is identical to what
    /// it would be if generated alone.
    pub fn generate_batch(&self, n: usize, len: usize, seed: u64, exec: Exec) -> Result<Vec<Trajectory>> {
        self.check_horizon(1, len)?;
        let chunks = chunk_ranges(n, SEQUENCE_CHUNK);
        let parts = exec.map(&chunks, |range| -> Result<Vec<Trajectory>> {
            let mut rngs: Vec<Rng> = range.clone().map(|i| rng::stream(seed, &[i as u64])).collect();
            let z0 = normal_rows(&mut rngs, self.dz);
            self.free_run(z0, 1, len, &mut rngs)
        });
        let mut out = Vec::with_capacity(n);
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    /// Runs the generative process from `z_start: [B, D_z]` for `len` steps
    /// beginning at 1-based `first_step`, drawing noise from one stream per row.
    pub fn free_run(
        &self,
        z_start: Tensor,
        first_step: usize,
        len: usize,
        rngs: &mut [Rng],
    ) -> Result<Vec<Trajectory>> {
        self.check_horizon(first_step, len)?;
        let b = z_start.rows();
        if rngs.len() != b || z_start.last_dim() != self.dz {
            return dim_err("free_run: one noise stream per latent row required");
        }
        let mut per_row: Vec<Trajectory> = (0..b)
            .map(|_| Trajectory {
                xs: Tensor::zeros(vec![len, self.dx]),
                zs: Tensor::zeros(vec![len + 1, self.dz]),
                mu_xs: Tensor::zeros(vec![len, self.dx]),
                mu_zs: Tensor::zeros(vec![len, self.dz]),
            })
            .collect::<Vec<_>>();
        for (i, tr) in per_row.iter_mut().enumerate() {
            tr.zs.row_mut(0).copy_from_slice(z_start.row(i));
        }
        let mut z = z_start.as_matrix()?;
        for k in 0..len {
            let step = first_step + k;
            let noise_x = normal_rows(rngs, self.dx);
            let noise_z = normal_rows(rngs, self.dz);
            let s = self.sample_step(&z, step, &noise_x, &noise_z)?;
            for (i, tr) in per_row.iter_mut().enumerate() {
                tr.xs.row_mut(k).copy_from_slice(s.x.row(i));
                tr.mu_xs.row_mut(k).copy_from_slice(s.mu_x.row(i));
                tr.mu_zs.row_mut(k).copy_from_slice(s.mu_z.row(i));
                tr.zs.row_mut(k + 1).copy_from_slice(s.z.row(i));
            }
            z = s.z;
        }
        Ok(per_row)
    }

    /// Runs the recursion over `xs: [B, T, D_x]`, feeding the data into the
    /// latent update wherever `observed` (one flag per element, row-major over
    /// `[B, T, D_x]`) is set and the model's `μ_x` elsewhere.
    pub fn condition(
        &self,
        xs: &Tensor,
        observed: Option<&[bool]>,
        propagation: LatentPropagation,
        rngs: &mut [Rng],
    ) -> Result<Conditioned> {
        let (b, len, dx) = match *xs.shape() {
            [b, t, d] => (b, t, d),
            ref s => return dim_err(format!("expected [B, T, D_x] data, got {s:?}")),
        };
        if dx != self.dx {
            return dim_err(format!("data has D_x={dx}, model expects {}", self.dx));
        }
        if observed.is_some_and(|m| m.len() != xs.len()) {
            return dim_err("mask does not match data shape");
        }
        if rngs.len() != b {
            return dim_err("condition: one noise stream per sequence required");
        }
        self.check_horizon(1, len)?;
        let mut z = match propagation {
            LatentPropagation::Sampled => normal_rows(rngs, self.dz),
            LatentPropagation::Mean => Tensor::zeros(vec![b, self.dz]),
        };
        let mut mu_x_all = Tensor::zeros(vec![b, len, self.dx]);
        let mut mu_z_all = Tensor::zeros(vec![b, len, self.dz]);
        let mut filled = Tensor::zeros(vec![b, len, self.dx]);
        for t in 0..len {
            let mu_x = self.mean_x(&z, t + 1)?;
            let mut x_in = Tensor::zeros(vec![b, self.dx]);
            for i in 0..b {
                let base = (i * len + t) * dx;
                for j in 0..dx {
                    let obs = observed.map_or(true, |m| m[base + j]);
                    x_in.row_mut(i)[j] = if obs { xs.data()[base + j] } else { mu_x.row(i)[j] };
                }
                filled.data_mut()[base..base + dx].copy_from_slice(x_in.row(i));
                mu_x_all.data_mut()[base..base + dx].copy_from_slice(mu_x.row(i));
            }
            let mu_z = self.mean_z(&z, &x_in, t + 1)?;
            for i in 0..b {
                let base = (i * len + t) * self.dz;
                mu_z_all.data_mut()[base..base + self.dz].copy_from_slice(mu_z.row(i));
            }
            z = match propagation {
                LatentPropagation::Sampled => {
                    let noise = normal_rows(rngs, self.dz);
                    add_scaled(&mu_z, &noise, self.schedule.sigma_z)
                }
                LatentPropagation::Mean => mu_z,
            };
        }
        Ok(Conditioned { mu_x: mu_x_all, mu_z: mu_z_all, filled, z_last: z })
    }

    /// Latent means `μ_z` of a given `[T, D_x]` sequence.
    pub fn encode(&self, xs: &Tensor, seed: u64, propagation: LatentPropagation) -> Result<Tensor> {
        let (t, d) = match *xs.shape() {
            [t, d] => (t, d),
            ref s => return dim_err(format!("expected [T, D_x] sequence, got {s:?}")),
        };
        let batch = xs.clone().reshape(vec![1, t, d])?;
        let out = self.encode_batch(&batch, seed, propagation, Exec::Sequential)?;
        out.reshape(vec![t, self.dz])
    }

    /// Latent means for every sequence of `[N, T, D_x]` data, as `[N, T, D_z]`.
    pub fn encode_batch(
        &self,
        data: &Tensor,
        seed: u64,
        propagation: LatentPropagation,
        exec: Exec,
    ) -> Result<Tensor> {
        let (n, t, d) = match *data.shape() {
            [n, t, d] => (n, t, d),
            ref s => return dim_err(format!("expected [N, T, D_x] data, got {s:?}")),
        };
        if !data.all_finite() {
            return dim_err("encode input contains non-finite values");
        }
        let chunks = chunk_ranges(n, SEQUENCE_CHUNK);
        let parts = exec.map(&chunks, |range| -> Result<Tensor> {
            let block = slice_rows3(data, range.clone(), t, d)?;
            let mut rngs: Vec<Rng> = range.clone().map(|i| rng::stream(seed, &[i as u64])).collect();
            Ok(self.condition(&block, None, propagation, &mut rngs)?.mu_z)
        });
        let mut out = Vec::with_capacity(n * t * self.dz);
        for p in parts {
            out.extend_from_slice(p?.data());
        }
        Tensor::new(vec![n, t, self.dz], out)
    }
}

/// `a + c·b`, elementwise.
fn add_scaled(a: &Tensor, b: &Tensor, c: f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + c * y).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// Observations of equal-length trajectories as `[N, T, D_x]`.
pub fn stack_observations(trajectories: &[Trajectory]) -> Result<Tensor> {
    let Some(first) = trajectories.first() else {
        return dim_err("no trajectories to stack");
    };
    let shape = first.xs.shape().to_vec();
    let mut data = Vec::with_capacity(trajectories.len() * first.xs.len());
    for tr in trajectories {
        if tr.xs.shape() != shape.as_slice() {
            return dim_err("trajectories differ in shape");
        }
        data.extend_from_slice(tr.xs.data());
    }
    Tensor::new(vec![trajectories.len(), shape[0], shape[1]], data)
}

/// `[rngs.len(), d]` standard normals, row `i` drawn from `rngs[i]`.
pub fn normal_rows(rngs: &mut [Rng], d: usize) -> Tensor {
    let mut data = Vec::with_capacity(rngs.len() * d);
    for r in rngs.iter_mut() {
        data.extend(rng::normal_vec(r, d));
    }
    Tensor::new(vec![rngs.len(), d], data).expect("rows")
}

/// Rows `range` of a `[N, T, D]` tensor.
pub(crate) fn slice_rows3(data: &Tensor, range: std::ops::Range<usize>, t: usize, d: usize) -> Result<Tensor> {
    let per = t * d;
    Tensor::new(
        vec![range.len(), t, d],
        data.data()[range.start * per..range.end * per].to_vec(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bits(t: &Tensor) -> Vec<u64> {
        t.data().iter().map(|v| v.to_bits()).collect()
    }

    fn small_model(schedule: NoiseSchedule) -> AlternatorModel {
        AlternatorModel::new(2, 3, schedule, NetworkTemplate { hidden_dim: 8, ..Default::default() }, 11).unwrap()
    }

    #[test]
    fn vanilla_schedule_mean_x_is_scaled_f() {
        let sx = 0.3;
        let m = small_model(NoiseSchedule::vanilla(4, sx, 0.15).unwrap());
        let z = Tensor::vector(vec![0.2, -0.5, 1.0]);
        let f = m.f_theta().apply(&z).unwrap();
        let want = f.map(|v| (1.0 - sx * sx).sqrt() * v);
        for t in 1..=4 {
            assert_eq!(bits(&m.mean_x(&z, t).unwrap()), bits(&want));
        }
    }

    #[test]
    fn vanilla_schedule_mean_z_ignores_previous_latent() {
        let sz: f64 = 0.15;
        let m = small_model(NoiseSchedule::vanilla(4, 0.3, sz).unwrap());
        let x = Tensor::vector(vec![0.7, -0.1]);
        let g = m.g_phi().apply(&x).unwrap();
        let want = g.map(|v| (1.0 - sz * sz).sqrt() * v);
        let a = m.mean_z(&Tensor::vector(vec![0.0, 0.0, 0.0]), &x, 2).unwrap();
        let b = m.mean_z(&Tensor::vector(vec![5.0, -3.0, 1.0]), &x, 2).unwrap();
        assert_eq!(bits(&a), bits(&want));
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn zero_noise_coefficient_drops_eps_psi() {
        // β = 0.75, σ_x = 0.5 leaves 1 − 0.75 − 0.25 = 0 for ε_ψ
        let sched = NoiseSchedule { beta: vec![0.75], alpha: vec![0.5], sigma_x: 0.5, sigma_z: 0.5 };
        let template = NetworkTemplate { hidden_dim: 4, depth: 1, ..Default::default() };
        let base = AlternatorModel::zeroed(2, 2, sched, template).unwrap();
        // f_θ(z) = (1, 1): zero weights, output bias 1
        let mut params = base.parameters();
        let [nf, ..] = base.parameter_counts();
        params.tensors_mut()[nf - 1] = Tensor::vector(vec![1.0, 1.0]);
        // ε_ψ is given a nonzero output that must not leak in
        let [_, ng, np, _] = base.parameter_counts();
        params.tensors_mut()[nf + ng + np - 1] = Tensor::vector(vec![9.0, 9.0]);
        let mut m = base;
        m.set_parameters(&params).unwrap();
        let mu = m.mean_x(&Tensor::vector(vec![0.3, 0.3]), 1).unwrap();
        assert_eq!(mu.data(), &[0.75f64.sqrt(), 0.75f64.sqrt()]);
    }

    #[test]
    fn zero_networks_give_zero_means() {
        let m = AlternatorModel::zeroed(2, 3, NoiseSchedule::linear(3, 0.3, 0.2, 0.1).unwrap(), NetworkTemplate::default()).unwrap();
        let z = Tensor::vector(vec![1.0, 2.0, 3.0]);
        assert!(m.mean_x(&z, 1).unwrap().data().iter().all(|&v| v == 0.0));
        let x = Tensor::vector(vec![1.0, -1.0]);
        assert!(m.mean_z(&z, &x, 2).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn alpha_zero_uses_only_eps_nu() {
        let sz: f64 = 0.2;
        let sched = NoiseSchedule { beta: vec![0.5], alpha: vec![0.0], sigma_x: 0.3, sigma_z: sz };
        let m = small_model(sched);
        let z = Tensor::vector(vec![0.1, 0.2, 0.3]);
        let x = Tensor::vector(vec![-0.4, 0.9]);
        let zx = Tensor::vector(vec![0.1, 0.2, 0.3, -0.4, 0.9]);
        let e = m.eps_nu().apply(&zx).unwrap();
        let got = m.mean_z(&z, &x, 1).unwrap();
        let c = (1.0 - sz * sz).sqrt();
        for (g, e) in got.data().iter().zip(e.data()) {
            assert!((g - c * e).abs() < 1e-15);
        }
    }

    #[test]
    fn sample_step_noise_is_linear() {
        let m = small_model(NoiseSchedule::linear(3, 0.3, 0.15, 0.1).unwrap());
        let z = Tensor::vector(vec![0.1, -0.2, 0.3]);
        let zero_x = Tensor::vector(vec![0.0, 0.0]);
        let zero_z = Tensor::vector(vec![0.0; 3]);
        let s0 = m.sample_step(&z, 2, &zero_x, &zero_z).unwrap();
        assert_eq!(s0.x, s0.mu_x);
        assert_eq!(s0.z, s0.mu_z);

        let n1 = Tensor::vector(vec![0.5, -1.0]);
        let n2 = Tensor::vector(vec![1.0, -2.0]);
        let a = m.sample_step(&z, 2, &n1, &zero_z).unwrap();
        let b = m.sample_step(&z, 2, &n2, &zero_z).unwrap();
        for ((xa, xb), d) in a.x.data().iter().zip(b.x.data()).zip([0.5, -1.0]) {
            assert!((xb - xa - 0.3 * d).abs() < 1e-15);
        }
    }

    #[test]
    fn generate_shapes_and_determinism() {
        let m = small_model(NoiseSchedule::linear(6, 0.3, 0.15, 0.1).unwrap());
        let a = m.generate(6, 5).unwrap();
        assert_eq!(a.xs.shape(), &[6, 2]);
        assert_eq!(a.zs.shape(), &[7, 3]);
        assert_eq!(a.mu_zs.shape(), &[6, 3]);
        assert_eq!(a, m.generate(6, 5).unwrap());
        assert_ne!(a, m.generate(6, 6).unwrap());
        assert!(m.generate(7, 5).is_err());
    }

    #[test]
    fn batch_generation_matches_single_rows() {
        let m = small_model(NoiseSchedule::linear(5, 0.3, 0.15, 0.1).unwrap());
        let batch = m.generate_batch(40, 5, 9, Exec::Sequential).unwrap();
        let par = m.generate_batch(40, 5, 9, Exec::Parallel).unwrap();
        assert_eq!(batch, par);
        assert_eq!(batch[0], m.generate(5, 9).unwrap());
        // row 35 lives in the second chunk
        let mut rng = vec![rng::stream(9, &[35])];
        let z0 = normal_rows(&mut rng, 3);
        let solo = m.free_run(z0, 1, 5, &mut rng).unwrap();
        assert_eq!(batch[35], solo[0]);
    }

    #[test]
    fn encode_is_deterministic_and_shaped() {
        let m = small_model(NoiseSchedule::linear(4, 0.3, 0.15, 0.1).unwrap());
        let xs = Tensor::from_rows(&[[0.1, 0.2], [0.3, 0.4], [0.5, 0.6], [0.7, 0.8]]).unwrap();
        let a = m.encode(&xs, 3, LatentPropagation::Sampled).unwrap();
        assert_eq!(a.shape(), &[4, 3]);
        assert_eq!(a, m.encode(&xs, 3, LatentPropagation::Sampled).unwrap());
        let mean = m.encode(&xs, 3, LatentPropagation::Mean).unwrap();
        assert_eq!(mean, m.encode(&xs, 99, LatentPropagation::Mean).unwrap());
    }

    #[test]
    fn encode_at_vanilla_alpha_is_seed_free() {
        let sz: f64 = 0.15;
        let m = small_model(NoiseSchedule::vanilla(3, 0.3, sz).unwrap());
        let xs = Tensor::from_rows(&[[0.1, 0.2], [0.3, -0.4], [0.5, 0.0]]).unwrap();
        let a = m.encode(&xs, 1, LatentPropagation::Sampled).unwrap();
        let b = m.encode(&xs, 2, LatentPropagation::Sampled).unwrap();
        assert_eq!(a, b);
        let g = m.g_phi().apply(&xs).unwrap();
        for (e, g) in a.data().iter().zip(g.data()) {
            assert_eq!(*e, (1.0 - sz * sz).sqrt() * g);
        }
    }

    #[test]
    fn interpolate_dynamics_follow_original_recursion() {
        let (sx, sz): (f64, f64) = (0.3, 0.2);
        let sched = NoiseSchedule { beta: vec![0.4, 0.4], alpha: vec![0.5, 0.3], sigma_x: sx, sigma_z: sz };
        let m = small_model(sched).with_dynamics(Dynamics::Interpolate);
        let z = Tensor::vector(vec![0.1, -0.2, 0.3]);
        let x = Tensor::vector(vec![0.4, 0.5]);
        let f = m.f_theta().apply(&z).unwrap();
        let mx = m.mean_x(&z, 1).unwrap();
        for (a, b) in mx.data().iter().zip(f.data()) {
            assert_eq!(*a, (1.0 - sx * sx).sqrt() * b);
        }
        let g = m.g_phi().apply(&x).unwrap();
        let mz = m.mean_z(&z, &x, 2).unwrap();
        let c = (1.0 - 0.3 - sz * sz).sqrt();
        for ((a, gi), zi) in mz.data().iter().zip(g.data()).zip(z.data()) {
            assert!((a - (0.3f64.sqrt() * gi + c * zi)).abs() < 1e-15);
        }
    }

    #[test]
    fn mismatched_networks_rejected() {
        let t = NetworkTemplate::default();
        let s = NoiseSchedule::vanilla(2, 0.3, 0.1).unwrap();
        let f = Network::init(t.spec(3, 2), 0).unwrap();
        let g = Network::init(t.spec(2, 3), 0).unwrap();
        let psi = Network::init(t.spec(3, 2), 0).unwrap();
        let bad_nu = Network::init(t.spec(3, 3), 0).unwrap();
        assert!(AlternatorModel::from_parts(2, 3, f, g, psi, bad_nu, s, Dynamics::NoiseModel).is_err());
    }
}
