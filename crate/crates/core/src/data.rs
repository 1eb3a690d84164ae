//! Datasets of equal-length multivariate series, CSV ingestion, min-max
//! normalization, synthetic generators and splits.
//!
//! The CSV layout is long format with header `series_id,t,v1..vD`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{config_err, dim_err, Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Per-channel `(min, max)` recorded by [`normalize_minmax`].
pub type NormRecord = Vec<(f64, f64)>;

#[derive(Clone, Debug, PartialEq)]
pub struct SeriesDataset {
    /// `[N, T, D_x]`.
    pub data: Tensor,
    /// Observed flags, `[N, T]` row-major.
    pub mask: Option<Vec<bool>>,
    pub norm: Option<NormRecord>,
    pub name: String,
}

impl SeriesDataset {
    pub fn new(data: Tensor, name: impl Into<String>) -> Result<Self> {
        if data.ndim() != 3 {
            return dim_err(format!("dataset must be [N, T, D], got {:?}", data.shape()));
        }
        Ok(Self { data, mask: None, norm: None, name: name.into() })
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.len() * self.seq_len() {
            return dim_err(format!(
                "mask has {} entries, dataset has {} x {}",
                mask.len(),
                self.len(),
                self.seq_len()
            ));
        }
        self.mask = Some(mask);
        Ok(self)
    }

    /// Number of series.
    pub fn len(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn seq_len(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[2]
    }

    /// Series `i` as `[T, D_x]`.
    pub fn series(&self, i: usize) -> Tensor {
        let per = self.seq_len() * self.channels();
        Tensor::new(vec![self.seq_len(), self.channels()], self.data.data()[i * per..(i + 1) * per].to_vec())
            .expect("series slice")
    }

    /// New dataset holding the series at `indices`, in that order.
    pub fn select(&self, indices: &[usize], name: impl Into<String>) -> Self {
        let (t, d) = (self.seq_len(), self.channels());
        let per = t * d;
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut mask = self.mask.as_ref().map(|_| Vec::with_capacity(indices.len() * t));
        for &i in indices {
            data.extend_from_slice(&self.data.data()[i * per..(i + 1) * per]);
            if let (Some(out), Some(m)) = (mask.as_mut(), self.mask.as_ref()) {
                out.extend_from_slice(&m[i * t..(i + 1) * t]);
            }
        }
        Self {
            data: Tensor::new(vec![indices.len(), t, d], data).expect("selection"),
            mask,
            norm: self.norm.clone(),
            name: name.into(),
        }
    }
}

/// Reads a long-format CSV file.
pub fn load_csv(path: impl AsRef<Path>) -> Result<SeriesDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    read_csv(file, name)
}

/// Parses long-format CSV from any reader. Row numbers in errors count the
/// header as row 1.
pub fn read_csv(reader: impl std::io::Read, name: impl Into<String>) -> Result<SeriesDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::Parse { row: 1, message: e.to_string() })?.clone();
    if headers.len() < 3 || &headers[0] != "series_id" || &headers[1] != "t" {
        return Err(Error::Parse {
            row: 1,
            message: format!("expected header series_id,t,v1..vD, got {:?}", headers.iter().collect::<Vec<_>>()),
        });
    }
    let d = headers.len() - 2;
    let mut series: BTreeMap<String, Vec<(f64, Vec<f64>)>> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::Parse { row, message: e.to_string() })?;
        if rec.len() != d + 2 {
            return Err(Error::Parse { row, message: format!("expected {} fields, got {}", d + 2, rec.len()) });
        }
        let num = |j: usize| -> Result<f64> {
            rec[j].parse::<f64>().map_err(|_| Error::Parse {
                row,
                message: format!("column {} value {:?} is not a number", &headers[j], &rec[j]),
            })
        };
        let t = num(1)?;
        let values = (2..d + 2).map(num).collect::<Result<Vec<_>>>()?;
        let id = rec[0].to_string();
        if !series.contains_key(&id) {
            order.push(id.clone());
        }
        series.entry(id).or_default().push((t, values));
    }
    if order.is_empty() {
        return Err(Error::Data("CSV contains no series".into()));
    }
    let expected = series[&order[0]].len();
    let mut data = Vec::with_capacity(order.len() * expected * d);
    for id in &order {
        let rows = series.get_mut(id).expect("known id");
        if rows.len() != expected {
            return Err(Error::Data(format!(
                "series {id:?} has {} timesteps, expected {expected}",
                rows.len()
            )));
        }
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (_, v) in rows.iter() {
            data.extend_from_slice(v);
        }
    }
    SeriesDataset::new(Tensor::new(vec![order.len(), expected, d], data)?, name)
}

/// Writes `[N, T, D]` in long format; series ids are `0..N` and `t` is `1..=T`.
pub fn write_csv(path: impl AsRef<Path>, data: &Tensor) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_csv_to(file, data)
}

pub fn write_csv_to(writer: impl std::io::Write, data: &Tensor) -> Result<()> {
    let (n, t, d) = match *data.shape() {
        [n, t, d] => (n, t, d),
        ref s => return dim_err(format!("expected [N, T, D], got {s:?}")),
    };
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["series_id".to_string(), "t".to_string()];
    header.extend((1..=d).map(|j| format!("v{j}")));
    w.write_record(&header).map_err(csv_io)?;
    for i in 0..n {
        for s in 0..t {
            let mut rec = vec![i.to_string(), (s + 1).to_string()];
            let base = (i * t + s) * d;
            rec.extend(data.data()[base..base + d].iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_io)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Per-channel min-max scaling to `[0, 1]`. Constant channels map to 0.
pub fn normalize_minmax(ds: &SeriesDataset) -> SeriesDataset {
    let d = ds.channels();
    let mut record = vec![(f64::INFINITY, f64::NEG_INFINITY); d];
    for row in ds.data.data().chunks(d.max(1)) {
        for (r, &v) in record.iter_mut().zip(row) {
            r.0 = r.0.min(v);
            r.1 = r.1.max(v);
        }
    }
    let mut data = ds.data.clone();
    for row in data.data_mut().chunks_mut(d.max(1)) {
        for (v, &(lo, hi)) in row.iter_mut().zip(&record) {
            *v = if hi > lo { (*v - lo) / (hi - lo) } else { 0.0 };
        }
    }
    SeriesDataset { data, mask: ds.mask.clone(), norm: Some(record), name: ds.name.clone() }
}

/// Undoes [`normalize_minmax`].
pub fn denormalize(ds: &SeriesDataset) -> Result<SeriesDataset> {
    let Some(record) = ds.norm.as_ref() else {
        return Err(Error::Data(format!("dataset {:?} carries no normalization record", ds.name)));
    };
    let data = denormalize_tensor(&ds.data, record)?;
    Ok(SeriesDataset { data, mask: ds.mask.clone(), norm: None, name: ds.name.clone() })
}

/// Maps normalized values of any tensor whose last axis is the channel axis.
pub fn denormalize_tensor(t: &Tensor, record: &[(f64, f64)]) -> Result<Tensor> {
    if t.last_dim() != record.len() {
        return dim_err(format!("tensor has {} channels, record has {}", t.last_dim(), record.len()));
    }
    let d = record.len().max(1);
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(d) {
        for (v, &(lo, hi)) in row.iter_mut().zip(record) {
            *v = if hi > lo { lo + *v * (hi - lo) } else { lo };
        }
    }
    Ok(out)
}

/// `x_t = m·sin(2πt/T) + noise_std·ε_t`, `t = 1..=T`, with the mode `m = ±1`
/// drawn once per series.
pub fn synth_bimodal(n: usize, len: usize, noise_std: f64, seed: u64) -> Result<SeriesDataset> {
    let modes = bimodal_modes(n, seed);
    synth_bimodal_with_modes(&modes, len, noise_std, seed)
}

/// The mode signs [`synth_bimodal`] draws for `n` series.
pub fn bimodal_modes(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, &[0x4d4f_4445]);
    (0..n).map(|_| if r.gen_bool(0.5) { 1.0 } else { -1.0 }).collect()
}

/// Like [`synth_bimodal`] with the modes given explicitly.
pub fn synth_bimodal_with_modes(modes: &[f64], len: usize, noise_std: f64, seed: u64) -> Result<SeriesDataset> {
    if modes.is_empty() || len == 0 {
        return config_err("synthetic dataset needs N >= 1 and T >= 1");
    }
    let mut data = Vec::with_capacity(modes.len() * len);
    for (i, &m) in modes.iter().enumerate() {
        let mut r = rng::stream(seed, &[i as u64]);
        for t in 1..=len {
            let phase = 2.0 * std::f64::consts::PI * t as f64 / len as f64;
            data.push(m * phase.sin() + noise_std * rng::standard_normal(&mut r));
        }
    }
    SeriesDataset::new(Tensor::new(vec![modes.len(), len, 1], data)?, "bimodal")
}

/// Sine mixture for imputation: `a·sin(2π·t/p + φ) + noise`, with amplitude,
/// period and phase drawn per series.
pub fn synth_sine_mixture(n: usize, len: usize, noise_std: f64, seed: u64) -> Result<SeriesDataset> {
    if n == 0 || len == 0 {
        return config_err("synthetic dataset needs N >= 1 and T >= 1");
    }
    let mut data = Vec::with_capacity(n * len);
    for i in 0..n {
        let mut r = rng::stream(seed, &[i as u64]);
        let amp = r.gen_range(0.5..1.5);
        let period = r.gen_range(8.0..24.0);
        let phase = r.gen_range(0.0..2.0 * std::f64::consts::PI);
        for t in 1..=len {
            let v = amp * (2.0 * std::f64::consts::PI * t as f64 / period + phase).sin();
            data.push(v + noise_std * rng::standard_normal(&mut r));
        }
    }
    SeriesDataset::new(Tensor::new(vec![n, len, 1], data)?, "sine_mixture")
}

/// AR(1) series `x_t = φ·x_{t−1} + noise_std·ε_t` with `x_1` drawn from the
/// stationary law `N(0, noise_std²/(1−φ²))`.
pub fn synth_ar1(n: usize, len: usize, phi: f64, noise_std: f64, seed: u64) -> Result<SeriesDataset> {
    if !(phi.abs() < 1.0) {
        return config_err(format!("AR(1) coefficient must satisfy |phi| < 1, got {phi}"));
    }
    let stationary = noise_std / (1.0 - phi * phi).sqrt();
    let mut starts = Vec::with_capacity(n);
    for i in 0..n {
        let mut r = rng::stream(seed, &[i as u64, 0]);
        starts.push(stationary * rng::standard_normal(&mut r));
    }
    ar1_from(&starts, len, phi, noise_std, seed)
}

/// AR(1) series from explicit starting values.
pub fn ar1_from(starts: &[f64], len: usize, phi: f64, noise_std: f64, seed: u64) -> Result<SeriesDataset> {
    if !(phi.abs() < 1.0) {
        return config_err(format!("AR(1) coefficient must satisfy |phi| < 1, got {phi}"));
    }
    if starts.is_empty() || len == 0 {
        return config_err("synthetic dataset needs N >= 1 and T >= 1");
    }
    let mut data = Vec::with_capacity(starts.len() * len);
    for (i, &x0) in starts.iter().enumerate() {
        let mut r = rng::stream(seed, &[i as u64, 1]);
        let mut x = x0;
        data.push(x);
        for _ in 1..len {
            x = phi * x + noise_std * rng::standard_normal(&mut r);
            data.push(x);
        }
    }
    SeriesDataset::new(Tensor::new(vec![starts.len(), len, 1], data)?, "ar1")
}

/// Shuffled disjoint partition by series. Sizes are `floor(f·N)` for the
/// validation and test parts; train takes the rest.
pub fn split_dataset(
    ds: &SeriesDataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(SeriesDataset, SeriesDataset, SeriesDataset)> {
    let (a, b, c) = fractions;
    if !(a > 0.0 && b > 0.0 && c > 0.0) {
        return config_err(format!("split fractions must be positive, got {fractions:?}"));
    }
    if ((a + b + c) - 1.0).abs() > 1e-9 {
        return config_err(format!("split fractions must sum to 1, got {}", a + b + c));
    }
    let n = ds.len();
    let n_val = (b * n as f64).floor() as usize;
    let n_test = (c * n as f64).floor() as usize;
    let n_train = n - n_val - n_test;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, &[0x5350_4c54]));
    let train = ds.select(&idx[..n_train], format!("{}-train", ds.name));
    let val = ds.select(&idx[n_train..n_train + n_val], format!("{}-val", ds.name));
    let test = ds.select(&idx[n_train + n_val..], format!("{}-test", ds.name));
    Ok((train, val, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_shape_and_ordering() {
        let text = "series_id,t,v1\na,2,20\na,1,10\na,3,30\nb,1,1\nb,2,2\nb,3,3\n";
        let ds = read_csv(text.as_bytes(), "x").unwrap();
        assert_eq!(ds.data.shape(), &[2, 3, 1]);
        assert_eq!(ds.series(0).data(), &[10.0, 20.0, 30.0]);
    }

    #[test]
    fn csv_errors() {
        let ragged = "series_id,t,v1\na,1,1\na,2,2\na,3,3\nb,1,1\nb,2,2\nb,3,3\nb,4,4\n";
        match read_csv(ragged.as_bytes(), "x") {
            Err(Error::Data(msg)) => assert!(msg.contains("\"b\"")),
            other => panic!("{other:?}"),
        }
        let bad = "series_id,t,v1\na,1,1\na,2,oops\n";
        assert!(matches!(read_csv(bad.as_bytes(), "x"), Err(Error::Parse { row: 3, .. })));
        assert!(matches!(read_csv("series_id,t,v1\n".as_bytes(), "x"), Err(Error::Data(_))));
        assert!(read_csv("".as_bytes(), "x").is_err());
    }

    #[test]
    fn csv_round_trip() {
        let t = Tensor::new(vec![2, 2, 2], vec![0.1, -2.0, 3.5, 4.0, 1e-9, 6.0, 7.25, -8.0]).unwrap();
        let mut buf = Vec::new();
        write_csv_to(&mut buf, &t).unwrap();
        let back = read_csv(buf.as_slice(), "x").unwrap();
        assert_eq!(back.data, t);
    }

    #[test]
    fn minmax_examples() {
        let ds = SeriesDataset::new(Tensor::new(vec![1, 3, 2], vec![0.0, 4.0, 5.0, 4.0, 10.0, 4.0]).unwrap(), "x").unwrap();
        let n = normalize_minmax(&ds);
        assert_eq!(n.data.data(), &[0.0, 0.0, 0.5, 0.0, 1.0, 0.0]);
        assert_eq!(n.norm.as_ref().unwrap()[1], (4.0, 4.0));
        let back = denormalize(&n).unwrap();
        assert_eq!(back.data, ds.data);
        assert!(denormalize(&ds).is_err());
    }

    #[test]
    fn bimodal_peak_and_determinism() {
        let ds = synth_bimodal_with_modes(&[1.0], 8, 0.0, 0).unwrap();
        // t = T/4
        assert!((ds.data.data()[1] - 1.0).abs() < 1e-15);
        assert_eq!(synth_bimodal(20, 10, 0.1, 4).unwrap(), synth_bimodal(20, 10, 0.1, 4).unwrap());
        let modes = bimodal_modes(1000, 9);
        let plus = modes.iter().filter(|&&m| m > 0.0).count() as f64 / 1000.0;
        assert!((0.45..=0.55).contains(&plus));
    }

    #[test]
    fn ar1_recursion_and_errors() {
        let ds = ar1_from(&[1.0], 3, 0.5, 0.0, 0).unwrap();
        assert_eq!(ds.data.data(), &[1.0, 0.5, 0.25]);
        assert!(matches!(synth_ar1(2, 3, 1.0, 0.1, 0), Err(Error::Config(_))));
        assert!(matches!(synth_ar1(2, 3, -1.2, 0.1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn split_sizes_and_partition() {
        let ds = SeriesDataset::new(Tensor::new(vec![10, 1, 1], (0..10).map(f64::from).collect()).unwrap(), "x").unwrap();
        let (a, b, c) = split_dataset(&ds, (0.8, 0.1, 0.1), 3).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (8, 1, 1));
        let mut all: Vec<f64> = [a, b, c].iter().flat_map(|d| d.data.data().to_vec()).collect();
        all.sort_by(f64::total_cmp);
        assert_eq!(all, (0..10).map(f64::from).collect::<Vec<_>>());
        assert!(split_dataset(&ds, (1.0, 0.0, 0.0), 3).is_err());
        assert!(split_dataset(&ds, (0.5, 0.2, 0.2), 3).is_err());
    }
}
