//! MMD with an RBF kernel, ensemble CRPS and pointwise error metrics.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::exec::{chunk_ranges, Exec};
use crate::tensor::Tensor;

const ROW_CHUNK: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub value: f64,
    pub std_error: Option<f64>,
    pub n: usize,
}

impl MetricReport {
    pub fn new(name: impl Into<String>, value: f64, n: usize) -> Self {
        Self { name: name.into(), value, std_error: None, n }
    }

    /// Mean of `values` with its standard error (absent for a single value).
    pub fn from_samples(name: impl Into<String>, values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Contract("metric report needs at least one sample".into()));
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std_error = (n > 1).then(|| {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        });
        Ok(Self { name: name.into(), value: mean, std_error, n })
    }
}

/// Views `[N, ...]` as `N` flat sample vectors.
fn samples(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [] => dim_err("sample set must have a leading sample axis"),
        [n] => Ok((*n, 1)),
        [n, rest @ ..] => Ok((*n, rest.iter().product())),
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median pairwise Euclidean distance over distinct pairs; 1 when the median is 0.
pub fn median_bandwidth(points: &Tensor) -> Result<f64> {
    let (n, d) = samples(points)?;
    if n < 2 {
        return dim_err(format!("median bandwidth needs at least 2 points, got {n}"));
    }
    let rows: Vec<&[f64]> = points.data().chunks(d.max(1)).collect();
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            dists.push(sq_dist(rows[i], rows[j]).sqrt());
        }
    }
    dists.sort_by(f64::total_cmp);
    let m = dists.len();
    let median = if m % 2 == 1 { dists[m / 2] } else { 0.5 * (dists[m / 2 - 1] + dists[m / 2]) };
    Ok(if median > 0.0 { median } else { 1.0 })
}

/// Biased MMD² estimate `mean k(X,X) + mean k(Y,Y) − 2·mean k(X,Y)` with
/// `k(a, b) = exp(−‖a−b‖²/(2h²))`. Samples are flattened to vectors.
pub fn mmd_rbf(x: &Tensor, y: &Tensor, h: f64) -> Result<f64> {
    mmd_rbf_with(x, y, h, Exec::Sequential)
}

/// [`mmd_rbf`] with row sums spread over `exec`; the reduction order is fixed.
pub fn mmd_rbf_with(x: &Tensor, y: &Tensor, h: f64, exec: Exec) -> Result<f64> {
    let (n, dx) = samples(x)?;
    let (m, dy) = samples(y)?;
    if dx != dy {
        return dim_err(format!("sample sizes differ: {dx} vs {dy}"));
    }
    if n == 0 || m == 0 {
        return dim_err("MMD needs nonempty sample sets");
    }
    if !(h > 0.0) {
        return Err(Error::Config(format!("bandwidth must be positive, got {h}")));
    }
    let d = dx.max(1);
    let xs: Vec<&[f64]> = x.data().chunks(d).collect();
    let ys: Vec<&[f64]> = y.data().chunks(d).collect();
    let inv = 1.0 / (2.0 * h * h);
    let kernel_mean = |a: &[&[f64]], b: &[&[f64]]| -> f64 {
        let parts = exec.map(&chunk_ranges(a.len(), ROW_CHUNK), |r| {
            let mut s = 0.0;
            for ai in &a[r.clone()] {
                for bj in b {
                    s += (-sq_dist(ai, bj) * inv).exp();
                }
            }
            s
        });
        parts.into_iter().sum::<f64>() / (a.len() * b.len()) as f64
    };
    let kxx = kernel_mean(&xs, &xs);
    let kyy = kernel_mean(&ys, &ys);
    let kxy = kernel_mean(&xs, &ys);
    Ok((kxx + kyy - 2.0 * kxy).max(0.0))
}

fn stack(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let (n, d) = samples(x)?;
    let (m, e) = samples(y)?;
    if d != e {
        return dim_err(format!("sample sizes differ: {d} vs {e}"));
    }
    let mut data = x.data().to_vec();
    data.extend_from_slice(y.data());
    Tensor::new(vec![n + m, d], data)
}

/// [`mmd_rbf`] with the median-heuristic bandwidth of `X ∪ Y`.
pub fn mmd_median(x: &Tensor, y: &Tensor, exec: Exec) -> Result<f64> {
    let h = median_bandwidth(&stack(x, y)?)?;
    mmd_rbf_with(x, y, h, exec)
}

/// MMD of the marginals at each timestep for `[N, T, D]` and `[M, T, D]`
/// sample sets, each with its own median bandwidth.
pub fn mmd_per_timestep(x: &Tensor, y: &Tensor, exec: Exec) -> Result<Vec<f64>> {
    let (&[n, t, d], &[m, t2, d2]) = (x.shape(), y.shape()) else {
        return dim_err("per-timestep MMD needs [N, T, D] sample sets");
    };
    if (t, d) != (t2, d2) {
        return dim_err(format!("sample sets differ in shape: {:?} vs {:?}", x.shape(), y.shape()));
    }
    let column = |src: &Tensor, rows: usize, s: usize| -> Tensor {
        let mut out = Vec::with_capacity(rows * d);
        for i in 0..rows {
            out.extend_from_slice(&src.data()[(i * t + s) * d..(i * t + s + 1) * d]);
        }
        Tensor::new(vec![rows, d], out).expect("column")
    };
    (0..t).map(|s| mmd_median(&column(x, n, s), &column(y, m, s), exec)).collect()
}

/// `(1/M)Σ|x_i − y| − (1/(2M²))ΣΣ|x_i − x_j|`.
pub fn crps_ensemble(members: &[f64], y: f64) -> Result<f64> {
    if members.is_empty() {
        return Err(Error::Contract("CRPS needs at least one ensemble member".into()));
    }
    let m = members.len() as f64;
    let skill: f64 = members.iter().map(|x| (x - y).abs()).sum::<f64>() / m;
    let mut spread = 0.0;
    for a in members {
        for b in members {
            spread += (a - b).abs();
        }
    }
    Ok((skill - spread / (2.0 * m * m)).max(0.0))
}

/// CRPS averaged over coordinates: `members: [M, D]`, `y: [D]`.
pub fn crps_ensemble_multi(members: &Tensor, y: &[f64]) -> Result<f64> {
    let (m, d) = samples(members)?;
    if d != y.len() || d == 0 {
        return dim_err(format!("ensemble has {d} coordinates, observation has {}", y.len()));
    }
    let mut total = 0.0;
    let mut column = vec![0.0; m];
    for (j, &yj) in y.iter().enumerate() {
        for (i, c) in column.iter_mut().enumerate() {
            *c = members.data()[i * d + j];
        }
        total += crps_ensemble(&column, yj)?;
    }
    Ok(total / d as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pointwise {
    pub mae: f64,
    pub mse: f64,
    /// Pearson correlation; `None` when either series is constant.
    pub cc: Option<f64>,
}

pub fn pointwise_metrics(y: &[f64], yhat: &[f64]) -> Result<Pointwise> {
    if y.len() != yhat.len() || y.is_empty() {
        return dim_err(format!("series lengths {} and {} must match and be nonzero", y.len(), yhat.len()));
    }
    let n = y.len() as f64;
    let mae = y.iter().zip(yhat).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    let mse = y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    Ok(Pointwise { mae, mse, cc: pearson(y, yhat) })
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len(), 1], v.to_vec()).unwrap()
    }

    #[test]
    fn bandwidth_examples() {
        assert_eq!(median_bandwidth(&pts(&[0.0, 1.0, 3.0])).unwrap(), 2.0);
        assert_eq!(median_bandwidth(&pts(&[2.0, 2.0, 2.0])).unwrap(), 1.0);
        assert_eq!(median_bandwidth(&pts(&[0.0, 5.0])).unwrap(), 5.0);
        assert!(median_bandwidth(&pts(&[1.0])).is_err());
    }

    #[test]
    fn mmd_closed_form() {
        let v = mmd_rbf(&pts(&[0.0]), &pts(&[1.0]), 1.0).unwrap();
        assert!((v - (2.0 - 2.0 * (-0.5f64).exp())).abs() < 1e-15);
        assert!((v - 0.786939).abs() < 1e-6);
        assert!(mmd_rbf(&pts(&[0.0]), &Tensor::zeros(vec![1, 2]), 1.0).is_err());
        assert!(mmd_rbf(&pts(&[0.0]), &pts(&[0.0]), 0.0).is_err());
    }

    #[test]
    fn crps_examples() {
        assert_eq!(crps_ensemble(&[0.0, 2.0], 1.0).unwrap(), 0.5);
        assert_eq!(crps_ensemble(&[3.0, 3.0, 3.0], 1.0).unwrap(), 2.0);
        assert_eq!(crps_ensemble(&[1.5], 1.5).unwrap(), 0.0);
        assert!(crps_ensemble(&[], 0.0).is_err());
    }

    #[test]
    fn pointwise_examples() {
        let p = pointwise_metrics(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((p.mae, p.mse), (0.0, 0.0));
        assert!((p.cc.unwrap() - 1.0).abs() < 1e-15);
        let p = pointwise_metrics(&[1.0, 2.0, 3.0], &[2.0, 3.0, 4.0]).unwrap();
        assert_eq!((p.mae, p.mse), (1.0, 1.0));
        assert!((p.cc.unwrap() - 1.0).abs() < 1e-15);
        let p = pointwise_metrics(&[2.0, 2.0], &[1.0, 3.0]).unwrap();
        assert_eq!(p.cc, None);
        assert_eq!(p.mae, 1.0);
    }

    #[test]
    fn report_standard_error() {
        let r = MetricReport::from_samples("m", &[1.0, 3.0]).unwrap();
        assert_eq!(r.value, 2.0);
        assert!((r.std_error.unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(MetricReport::from_samples("m", &[4.0]).unwrap().std_error, None);
    }
}
