//! Single-file binary checkpoints.
//!
//! Layout (little endian):
//!
//! ```text
//! magic     8 bytes  "ALTPPCKP"
//! version   u32
//! D_x, D_z  u32, u32
//! dynamics  u8       0 = noise model, 1 = interpolate
//! T         u32
//! σ_x, σ_z  f64, f64
//! β[T], α[T] f64
//! 4 × network (f_θ, g_φ, ε_ψ, ε_ν):
//!   kind u8, activation u8, input u32, hidden u32, output u32, depth u32
//!   tensor count u32, then per tensor: ndim u32, dims u64…, values f64…
//! sha256    32 bytes over everything above
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{CheckpointError, Error, Result};
use crate::model::{AlternatorModel, Dynamics};
use crate::nn::{Activation, Network, NetworkKind, NetworkSpec, ParameterSet};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ALTPPCKP";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

pub fn encode_model(model: &AlternatorModel) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, FORMAT_VERSION);
    put_u32(&mut buf, model.dx() as u32);
    put_u32(&mut buf, model.dz() as u32);
    buf.push(match model.dynamics() {
        Dynamics::NoiseModel => 0,
        Dynamics::Interpolate => 1,
    });
    let s = model.schedule();
    put_u32(&mut buf, s.len() as u32);
    put_f64(&mut buf, s.sigma_x);
    put_f64(&mut buf, s.sigma_z);
    s.beta.iter().chain(&s.alpha).for_each(|&v| put_f64(&mut buf, v));
    for net in model.networks() {
        let spec = net.spec();
        buf.push(match spec.kind {
            NetworkKind::Mlp => 0,
            NetworkKind::SelfAttention => 1,
        });
        buf.push(match spec.activation {
            Activation::Tanh => 0,
            Activation::Gelu => 1,
        });
        for d in [spec.input_dim, spec.hidden_dim, spec.output_dim, spec.depth] {
            put_u32(&mut buf, d as u32);
        }
        let params = net.params().tensors();
        put_u32(&mut buf, params.len() as u32);
        for t in params {
            put_u32(&mut buf, t.ndim() as u32);
            t.shape().iter().for_each(|&d| buf.extend_from_slice(&(d as u64).to_le_bytes()));
            t.data().iter().for_each(|&v| put_f64(&mut buf, v));
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

pub fn save_model(model: &AlternatorModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_model(model))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<AlternatorModel> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    decode_model(&bytes).map_err(|kind| Error::Checkpoint { path: path.to_path_buf(), kind })
}

pub fn decode_model(bytes: &[u8]) -> Result<AlternatorModel, CheckpointError> {
    let corrupt = |why: &str| CheckpointError::Corrupted(why.to_string());
    if bytes.len() < MAGIC.len() {
        return Err(corrupt("file shorter than header"));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut r = Reader { bytes, pos: MAGIC.len() };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN {
        return Err(corrupt("file truncated"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch"));
    }
    r.bytes = body;

    let dx = r.u32()? as usize;
    let dz = r.u32()? as usize;
    let dynamics = match r.u8()? {
        0 => Dynamics::NoiseModel,
        1 => Dynamics::Interpolate,
        _ => return Err(corrupt("unknown dynamics tag")),
    };
    let len = r.u32()? as usize;
    let sigma_x = r.f64()?;
    let sigma_z = r.f64()?;
    let beta = r.f64s(len)?;
    let alpha = r.f64s(len)?;
    let schedule = NoiseSchedule { beta, alpha, sigma_x, sigma_z };

    let mut nets = Vec::with_capacity(4);
    for _ in 0..4 {
        let kind = match r.u8()? {
            0 => NetworkKind::Mlp,
            1 => NetworkKind::SelfAttention,
            _ => return Err(corrupt("unknown network kind")),
        };
        let activation = match r.u8()? {
            0 => Activation::Tanh,
            1 => Activation::Gelu,
            _ => return Err(corrupt("unknown activation")),
        };
        let spec = NetworkSpec {
            kind,
            activation,
            input_dim: r.u32()? as usize,
            hidden_dim: r.u32()? as usize,
            output_dim: r.u32()? as usize,
            depth: r.u32()? as usize,
        };
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| corrupt("tensor too large"))?;
            let data = r.f64s(n)?;
            tensors.push(Tensor::new(shape, data).map_err(|e| corrupt(&e.to_string()))?);
        }
        let net = Network::new(spec, ParameterSet::new(tensors))
            .map_err(|e| CheckpointError::Shape(e.to_string()))?;
        nets.push(net);
    }
    if r.pos != body.len() {
        return Err(corrupt("trailing bytes after parameters"));
    }
    let nu = nets.pop().unwrap();
    let psi = nets.pop().unwrap();
    let g = nets.pop().unwrap();
    let f = nets.pop().unwrap();
    AlternatorModel::from_parts(dx, dz, f, g, psi, nu, schedule, dynamics).map_err(|e| match e {
        Error::Dimension(m) => CheckpointError::Shape(m),
        other => CheckpointError::Corrupted(other.to_string()),
    })
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(CheckpointError::Corrupted("unexpected end of data".into()));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let raw = self.take(n.checked_mul(8).ok_or(CheckpointError::Corrupted("length overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NetworkTemplate;

    fn model() -> AlternatorModel {
        let s = NoiseSchedule::linear(5, 0.3, 0.15, 0.1).unwrap();
        let t = NetworkTemplate { hidden_dim: 6, ..Default::default() };
        AlternatorModel::new(2, 3, s, t, 4).unwrap()
    }

    fn reseal(mut body: Vec<u8>) -> Vec<u8> {
        body.truncate(body.len() - DIGEST_LEN);
        let d = Sha256::digest(&body);
        body.extend_from_slice(&d);
        body
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = model();
        let back = decode_model(&encode_model(&m)).unwrap();
        assert_eq!(back, m);
        let bits = |p: ParameterSet| p.flatten().into_iter().map(f64::to_bits).collect::<Vec<_>>();
        assert_eq!(bits(back.parameters()), bits(m.parameters()));
    }

    #[test]
    fn attention_model_round_trips_via_file() {
        let s = NoiseSchedule::vanilla(3, 0.2, 0.1).unwrap();
        let t = NetworkTemplate { kind: NetworkKind::SelfAttention, hidden_dim: 4, depth: 2, activation: Activation::Gelu };
        let m = AlternatorModel::new(2, 2, s, t, 1).unwrap().with_dynamics(Dynamics::Interpolate);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_model(&m, &path).unwrap();
        assert_eq!(load_model(&path).unwrap(), m);
    }

    #[test]
    fn truncated_file_is_corrupted() {
        let bytes = encode_model(&model());
        for cut in [bytes.len() - 1, bytes.len() / 2, 14] {
            assert!(matches!(decode_model(&bytes[..cut]), Err(CheckpointError::Corrupted(_))));
        }
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(decode_model(&flipped), Err(CheckpointError::Corrupted(_))));
    }

    #[test]
    fn header_dim_mismatch_is_shape_error() {
        let mut bytes = encode_model(&model());
        // D_x lives right after magic + version
        bytes[12..16].copy_from_slice(&5u32.to_le_bytes());
        let bytes = reseal(bytes);
        assert!(matches!(decode_model(&bytes), Err(CheckpointError::Shape(_))));
    }

    #[test]
    fn version_and_magic_checked() {
        let mut bytes = encode_model(&model());
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert_eq!(decode_model(&bytes).unwrap_err(), CheckpointError::Version(2));
        bytes[0] = b'X';
        assert_eq!(decode_model(&bytes).unwrap_err(), CheckpointError::BadMagic);
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(load_model("/nonexistent/model.ckpt"), Err(Error::Io(_))));
    }
}
