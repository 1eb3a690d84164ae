//! Missing-at-random masking, imputation and ensemble forecasting, plus the
//! mean-fill and climatology baselines they are compared against.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Result};
use crate::exec::{chunk_ranges, Exec};
use crate::model::{AlternatorModel, LatentPropagation};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Written into masked positions. Never read except through the mask.
pub const MISSING: f64 = f64::NAN;

const MASK_TAG: u64 = 0x4d41_534b;
const ENSEMBLE_CHUNK: usize = 10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskGranularity {
    /// All channels of a timestep are dropped together.
    #[default]
    Timestep,
    /// Each channel is dropped independently.
    Channel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MarMask {
    /// Observed flags per element of the `[T, D_x]` series.
    pub observed: Vec<bool>,
    pub len: usize,
    pub channels: usize,
    pub rate: f64,
    pub seed: u64,
    pub granularity: MaskGranularity,
}

impl MarMask {
    pub fn all_observed(len: usize, channels: usize) -> Self {
        Self {
            observed: vec![true; len * channels],
            len,
            channels,
            rate: 0.0,
            seed: 0,
            granularity: MaskGranularity::Timestep,
        }
    }

    /// Whether any channel at 0-based timestep `t` is observed.
    pub fn timestep_observed(&self, t: usize) -> bool {
        self.observed[t * self.channels..(t + 1) * self.channels].iter().any(|&o| o)
    }

    pub fn missing_fraction(&self) -> f64 {
        if self.observed.is_empty() {
            return 0.0;
        }
        self.observed.iter().filter(|&&o| !o).count() as f64 / self.observed.len() as f64
    }
}

/// Drops each timestep (or element) of `xs: [T, D_x]` independently with
/// probability `rate` and writes [`MISSING`] there.
pub fn apply_mar_mask(xs: &Tensor, rate: f64, seed: u64, granularity: MaskGranularity) -> Result<(Tensor, MarMask)> {
    apply_mar_mask_with(xs, rate, &mut rng::stream(seed, &[MASK_TAG]), seed, granularity)
}

fn apply_mar_mask_with(
    xs: &Tensor,
    rate: f64,
    r: &mut Rng,
    seed: u64,
    granularity: MaskGranularity,
) -> Result<(Tensor, MarMask)> {
    let (len, d) = match *xs.shape() {
        [t, d] => (t, d),
        ref s => return dim_err(format!("expected [T, D_x] series, got {s:?}")),
    };
    if !(0.0..=1.0).contains(&rate) {
        return config_err(format!("missing rate must lie in [0, 1], got {rate}"));
    }
    let mut observed = Vec::with_capacity(len * d);
    for _ in 0..len {
        match granularity {
            MaskGranularity::Timestep => {
                let keep = r.gen::<f64>() >= rate;
                observed.extend(std::iter::repeat(keep).take(d));
            }
            MaskGranularity::Channel => observed.extend((0..d).map(|_| r.gen::<f64>() >= rate)),
        }
    }
    let mut masked = xs.clone();
    for (v, &o) in masked.data_mut().iter_mut().zip(&observed) {
        if !o {
            *v = MISSING;
        }
    }
    Ok((masked, MarMask { observed, len, channels: d, rate, seed, granularity }))
}

/// Masks every series of `[N, T, D_x]`; series `i` uses its own stream.
/// Returns the masked data and the flattened observed flags.
pub fn apply_mar_mask_batch(
    data: &Tensor,
    rate: f64,
    seed: u64,
    granularity: MaskGranularity,
) -> Result<(Tensor, Vec<bool>)> {
    let (n, len, d) = match *data.shape() {
        [n, t, d] => (n, t, d),
        ref s => return dim_err(format!("expected [N, T, D_x] data, got {s:?}")),
    };
    let per = len * d;
    let mut out = Vec::with_capacity(n * per);
    let mut observed = Vec::with_capacity(n * per);
    for i in 0..n {
        let series = Tensor::new(vec![len, d], data.data()[i * per..(i + 1) * per].to_vec())?;
        let (m, mask) = apply_mar_mask_with(&series, rate, &mut rng::stream(seed, &[MASK_TAG, i as u64]), seed, granularity)?;
        out.extend(m.into_data());
        observed.extend(mask.observed);
    }
    Ok((Tensor::new(vec![n, len, d], out)?, observed))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImputeOptions {
    /// Rollouts averaged at missing positions.
    pub rollouts: usize,
    /// Latent propagation for each rollout. `Mean` makes every rollout identical.
    pub propagation: LatentPropagation,
    pub exec: Exec,
}

impl Default for ImputeOptions {
    fn default() -> Self {
        Self { rollouts: 1, propagation: LatentPropagation::Mean, exec: Exec::Sequential }
    }
}

/// Completes `masked: [T, D_x]`. Observed positions pass through unchanged;
/// missing ones receive `μ_x` from the recursion, which also feeds that `μ_x`
/// into the latent update.
pub fn impute(model: &AlternatorModel, masked: &Tensor, mask: &MarMask, seed: u64, opts: ImputeOptions) -> Result<Tensor> {
    let (len, d) = match *masked.shape() {
        [t, d] => (t, d),
        ref s => return dim_err(format!("expected [T, D_x] series, got {s:?}")),
    };
    if (mask.len, mask.channels) != (len, d) || mask.observed.len() != len * d {
        return dim_err("mask does not match the series");
    }
    let batch = masked.clone().reshape(vec![1, len, d])?;
    impute_batch(model, &batch, &mask.observed, seed, opts)?.reshape(vec![len, d])
}

/// [`impute`] over `[N, T, D_x]` with flattened observed flags.
pub fn impute_batch(
    model: &AlternatorModel,
    masked: &Tensor,
    observed: &[bool],
    seed: u64,
    opts: ImputeOptions,
) -> Result<Tensor> {
    let (n, len, d) = match *masked.shape() {
        [n, t, d] => (n, t, d),
        ref s => return dim_err(format!("expected [N, T, D_x] data, got {s:?}")),
    };
    if observed.len() != masked.len() {
        return dim_err("mask does not match data shape");
    }
    if d != model.dx() {
        return dim_err(format!("data has D_x={d}, model expects {}", model.dx()));
    }
    if opts.rollouts == 0 {
        return config_err("imputation needs at least one rollout");
    }
    let per = len * d;
    let chunks = chunk_ranges(n, ENSEMBLE_CHUNK);
    let parts = opts.exec.map(&chunks, |range| -> Result<Vec<f64>> {
        let block = Tensor::new(vec![range.len(), len, d], masked.data()[range.start * per..range.end * per].to_vec())?;
        let obs = &observed[range.start * per..range.end * per];
        let mut mean = vec![0.0; block.len()];
        for k in 0..opts.rollouts {
            let mut rngs: Vec<Rng> = range.clone().map(|i| rng::stream(seed, &[i as u64, k as u64])).collect();
            let c = model.condition(&block, Some(obs), opts.propagation, &mut rngs)?;
            for (m, v) in mean.iter_mut().zip(c.mu_x.data()) {
                *m += v;
            }
        }
        let k = opts.rollouts as f64;
        Ok(mean
            .iter()
            .zip(block.data())
            .zip(obs)
            .map(|((m, &x), &o)| if o { x } else { m / k })
            .collect())
    });
    let mut out = Vec::with_capacity(masked.len());
    for p in parts {
        out.extend(p?);
    }
    Tensor::new(vec![n, len, d], out)
}

/// Fills missing positions with the mean of the observed values of the same
/// series and channel, or `fallback[channel]` when that channel has none.
pub fn mean_fill(masked: &Tensor, observed: &[bool], fallback: &[f64]) -> Result<Tensor> {
    let (n, len, d) = match *masked.shape() {
        [n, t, d] => (n, t, d),
        [t, d] => (1, t, d),
        ref s => return dim_err(format!("expected [N, T, D_x] or [T, D_x], got {s:?}")),
    };
    if observed.len() != masked.len() || fallback.len() != d {
        return dim_err("mask or fallback does not match data shape");
    }
    let mut out = masked.clone();
    for i in 0..n {
        for j in 0..d {
            let idx = |t: usize| (i * len + t) * d + j;
            let (sum, count) = (0..len)
                .filter(|&t| observed[idx(t)])
                .fold((0.0, 0usize), |(s, c), t| (s + masked.data()[idx(t)], c + 1));
            let fill = if count > 0 { sum / count as f64 } else { fallback[j] };
            for t in 0..len {
                if !observed[idx(t)] {
                    out.data_mut()[idx(t)] = fill;
                }
            }
        }
    }
    Ok(out)
}

/// Per-channel mean over all series and timesteps of `[N, T, D]`.
pub fn channel_means(data: &Tensor) -> Vec<f64> {
    let d = data.last_dim().max(1);
    let rows = data.len() / d;
    let mut m = vec![0.0; d];
    for row in data.data().chunks(d) {
        for (a, v) in m.iter_mut().zip(row) {
            *a += v;
        }
    }
    m.iter().map(|s| s / rows.max(1) as f64).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleForecast {
    /// `[M, H, D_x]`.
    pub members: Tensor,
    pub conditioning_length: usize,
}

impl EnsembleForecast {
    pub fn num_members(&self) -> usize {
        self.members.shape()[0]
    }

    pub fn horizon(&self) -> usize {
        self.members.shape()[1]
    }

    /// Member values at 0-based horizon step `h` as `[M, D_x]`.
    pub fn step(&self, h: usize) -> Tensor {
        let (m, hz, d) = (self.num_members(), self.horizon(), self.members.shape()[2]);
        let mut out = Vec::with_capacity(m * d);
        for i in 0..m {
            out.extend_from_slice(&self.members.data()[(i * hz + h) * d..(i * hz + h + 1) * d]);
        }
        Tensor::new(vec![m, d], out).expect("step slice")
    }

    /// Ensemble mean as `[H, D_x]`.
    pub fn mean(&self) -> Tensor {
        let (m, hz, d) = (self.num_members(), self.horizon(), self.members.shape()[2]);
        let mut out = vec![0.0; hz * d];
        for member in self.members.data().chunks(hz * d) {
            for (o, v) in out.iter_mut().zip(member) {
                *o += v;
            }
        }
        Tensor::new(vec![hz, d], out.into_iter().map(|v| v / m as f64).collect()).expect("mean")
    }
}

/// Encodes `context: [T_c, D_x]` with mean propagation and then runs `members`
/// independent free-running rollouts of `horizon` steps from step `T_c + 1`.
/// Member `i` draws its noise from stream `(seed, i)`.
pub fn forecast_ensemble(
    model: &AlternatorModel,
    context: &Tensor,
    horizon: usize,
    members: usize,
    seed: u64,
    exec: Exec,
) -> Result<EnsembleForecast> {
    let (tc, d) = match *context.shape() {
        [t, d] => (t, d),
        ref s => return dim_err(format!("expected [T_c, D_x] context, got {s:?}")),
    };
    if tc == 0 || horizon == 0 || members == 0 {
        return config_err("forecasting needs T_c >= 1, H >= 1 and M >= 1");
    }
    if tc + horizon > model.schedule().len() {
        return config_err(format!(
            "context {tc} plus horizon {horizon} exceeds the schedule length {}",
            model.schedule().len()
        ));
    }
    let batch = context.clone().reshape(vec![1, tc, d])?;
    let z = model.condition(&batch, None, LatentPropagation::Mean, &mut [rng::stream(seed, &[u64::MAX])])?.z_last;
    let dz = model.dz();
    let chunks = chunk_ranges(members, ENSEMBLE_CHUNK);
    let parts = exec.map(&chunks, |range| -> Result<Vec<f64>> {
        let z_start = Tensor::new(vec![range.len(), dz], z.data().repeat(range.len()))?;
        let mut rngs: Vec<Rng> = range.clone().map(|i| rng::stream(seed, &[i as u64])).collect();
        let runs = model.free_run(z_start, tc + 1, horizon, &mut rngs)?;
        Ok(runs.into_iter().flat_map(|tr| tr.xs.into_data()).collect())
    });
    let mut out = Vec::with_capacity(members * horizon * d);
    for p in parts {
        out.extend(p?);
    }
    Ok(EnsembleForecast { members: Tensor::new(vec![members, horizon, d], out)?, conditioning_length: tc })
}

/// Climatological ensemble at 0-based timestep `t`: the values of every
/// training series at `t`, as `[N, D]`.
pub fn climatology_ensemble(train: &Tensor, t: usize) -> Result<Tensor> {
    let (n, len, d) = match *train.shape() {
        [n, l, d] => (n, l, d),
        ref s => return dim_err(format!("expected [N, T, D] data, got {s:?}")),
    };
    if t >= len {
        return dim_err(format!("timestep {t} outside 0..{len}"));
    }
    let mut out = Vec::with_capacity(n * d);
    for i in 0..n {
        out.extend_from_slice(&train.data()[(i * len + t) * d..(i * len + t + 1) * d]);
    }
    Tensor::new(vec![n, d], out)
}

/// Per-timestep training mean, `[T, D]`.
pub fn climatology_mean(train: &Tensor) -> Result<Tensor> {
    let (n, len, d) = match *train.shape() {
        [n, l, d] => (n, l, d),
        ref s => return dim_err(format!("expected [N, T, D] data, got {s:?}")),
    };
    let mut out = vec![0.0; len * d];
    for series in train.data().chunks(len * d) {
        for (o, v) in out.iter_mut().zip(series) {
            *o += v;
        }
    }
    Tensor::new(vec![len, d], out.into_iter().map(|v| v / n.max(1) as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NetworkTemplate;
    use crate::schedule::NoiseSchedule;

    fn series(t: usize, d: usize) -> Tensor {
        Tensor::new(vec![t, d], (0..t * d).map(|i| i as f64 * 0.1).collect()).unwrap()
    }

    fn model() -> AlternatorModel {
        let s = NoiseSchedule::linear(20, 0.2, 0.1, 0.1).unwrap();
        AlternatorModel::new(2, 3, s, NetworkTemplate { hidden_dim: 8, ..Default::default() }, 7).unwrap()
    }

    #[test]
    fn mask_rate_extremes_and_fraction() {
        let xs = series(1000, 1);
        let (m, mask) = apply_mar_mask(&xs, 0.0, 1, MaskGranularity::Timestep).unwrap();
        assert_eq!(m, xs);
        assert_eq!(mask.missing_fraction(), 0.0);
        let (m, mask) = apply_mar_mask(&xs, 1.0, 1, MaskGranularity::Timestep).unwrap();
        assert!(m.data().iter().all(|v| v.is_nan()));
        assert_eq!(mask.missing_fraction(), 1.0);
        let (_, mask) = apply_mar_mask(&xs, 0.5, 1, MaskGranularity::Timestep).unwrap();
        assert!((0.45..=0.55).contains(&mask.missing_fraction()));
        assert!(apply_mar_mask(&xs, 1.5, 1, MaskGranularity::Timestep).is_err());
    }

    #[test]
    fn timestep_mask_drops_all_channels() {
        let (_, mask) = apply_mar_mask(&series(50, 3), 0.5, 2, MaskGranularity::Timestep).unwrap();
        for t in 0..50 {
            let row = &mask.observed[t * 3..t * 3 + 3];
            assert!(row.iter().all(|&o| o == row[0]));
        }
    }

    #[test]
    fn imputation_passes_observed_through() {
        let m = model();
        let xs = series(10, 2);
        let full = MarMask::all_observed(10, 2);
        assert_eq!(impute(&m, &xs, &full, 0, ImputeOptions::default()).unwrap(), xs);

        let (masked, mask) = apply_mar_mask(&xs, 0.4, 3, MaskGranularity::Timestep).unwrap();
        let out = impute(&m, &masked, &mask, 0, ImputeOptions::default()).unwrap();
        for (i, &o) in mask.observed.iter().enumerate() {
            if o {
                assert_eq!(out.data()[i], xs.data()[i]);
            } else {
                assert!(out.data()[i].is_finite());
            }
        }
    }

    #[test]
    fn imputed_value_is_mean_x() {
        let m = model();
        let mut observed = vec![true; 6];
        observed[0] = false;
        observed[1] = false;
        let mut masked = series(3, 2);
        masked.data_mut()[0] = MISSING;
        masked.data_mut()[1] = MISSING;
        let mask = MarMask { observed, ..MarMask::all_observed(3, 2) };
        let out = impute(&m, &masked, &mask, 0, ImputeOptions::default()).unwrap();
        // mean propagation starts from z_0 = 0
        let mu = m.mean_x(&Tensor::zeros(vec![1, 3]), 1).unwrap();
        assert_eq!(&out.data()[..2], mu.data());
    }

    #[test]
    fn all_missing_allowed_and_dims_checked() {
        let m = model();
        let (masked, mask) = apply_mar_mask(&series(5, 2), 1.0, 0, MaskGranularity::Timestep).unwrap();
        assert!(impute(&m, &masked, &mask, 0, ImputeOptions::default()).unwrap().all_finite());
        let (masked, mask) = apply_mar_mask(&series(5, 3), 0.5, 0, MaskGranularity::Timestep).unwrap();
        assert!(impute(&m, &masked, &mask, 0, ImputeOptions::default()).is_err());
    }

    #[test]
    fn mean_fill_uses_observed_mean() {
        let xs = Tensor::new(vec![4, 1], vec![1.0, MISSING, 3.0, MISSING]).unwrap();
        let out = mean_fill(&xs, &[true, false, true, false], &[0.0]).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 3.0, 2.0]);
        let none = mean_fill(&xs, &[false; 4], &[9.0]).unwrap();
        assert_eq!(none.data(), &[9.0; 4]);
    }

    #[test]
    fn forecast_shape_and_determinism() {
        let m = model();
        let ctx = series(8, 2);
        let a = forecast_ensemble(&m, &ctx, 5, 12, 4, Exec::Sequential).unwrap();
        assert_eq!(a.members.shape(), &[12, 5, 2]);
        assert_eq!(a.conditioning_length, 8);
        assert!(a.members.all_finite());
        let b = forecast_ensemble(&m, &ctx, 5, 12, 4, Exec::Parallel).unwrap();
        assert_eq!(a, b);
        // member i depends only on its own stream
        let c = forecast_ensemble(&m, &ctx, 5, 3, 4, Exec::Sequential).unwrap();
        assert_eq!(&a.members.data()[..30], c.members.data());
        assert!(forecast_ensemble(&m, &ctx, 13, 2, 0, Exec::Sequential).is_err());
        assert!(forecast_ensemble(&m, &ctx, 2, 0, 0, Exec::Sequential).is_err());
    }

    #[test]
    fn climatology_helpers() {
        let train = Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        assert_eq!(climatology_mean(&train).unwrap().data(), &[2.0, 4.0]);
        assert_eq!(climatology_ensemble(&train, 1).unwrap().data(), &[2.0, 6.0]);
        assert!(climatology_ensemble(&train, 2).is_err());
    }
}
