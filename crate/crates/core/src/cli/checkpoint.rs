//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MXGW" | version u32 | header_len u64 | header (JSON)
//!        | buffer_count u64 | (len u64 | len * f32)* | crc32 u32
//! ```
//!
//! The header holds the training state with every float buffer emptied; the
//! buffers follow in a fixed traversal order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::{TrainConfig, TrainState};

pub const MAGIC: &[u8; 4] = b"MXGW";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub state: TrainState,
}

fn for_each_buffer(state: &mut TrainState, f: &mut dyn FnMut(&mut Vec<f32>)) {
    let m = &mut state.model;
    for bank in &mut m.banks {
        for t in &mut bank.templates {
            f(t.storage_mut());
        }
    }
    for c in &mut m.coefficients {
        f(&mut c.alpha);
    }
    for b in m.biases.iter_mut().flatten() {
        f(b.storage_mut());
    }
    for n in m.norms.iter_mut().flatten() {
        f(n.gamma.storage_mut());
        f(n.beta.storage_mut());
        f(n.running_mean.storage_mut());
        f(n.running_var.storage_mut());
    }
    for v in &mut state.opt.velocity {
        f(v);
    }
}

pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut skeleton = ckpt.clone();
    let mut buffers = Vec::new();
    for_each_buffer(&mut skeleton.state, &mut |b| buffers.push(std::mem::take(b)));
    let header = serde_json::to_vec(&skeleton).map_err(|e| Error::Checkpoint(e.to_string()))?;

    let floats: usize = buffers.iter().map(Vec::len).sum();
    let mut out = Vec::with_capacity(32 + header.len() + 8 * buffers.len() + 4 * floats);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(buffers.len() as u64).to_le_bytes());
    for b in &buffers {
        out.extend_from_slice(&(b.len() as u64).to_le_bytes());
        for v in b {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 4 + 4 {
        return Err(Error::Checkpoint("file too short".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }

    let mut r = Reader { bytes: body, pos: 8 };
    let header_len = r.u64("header length")?;
    let header = r.take(usize::try_from(header_len).unwrap_or(usize::MAX), "header")?;
    let mut ckpt: Checkpoint =
        serde_json::from_slice(header).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;

    let count = r.u64("buffer count")?;
    let mut expected = 0u64;
    for_each_buffer(&mut ckpt.state, &mut |_| expected += 1);
    if count != expected {
        return Err(Error::Checkpoint(format!(
            "header describes {expected} buffers, file declares {count}"
        )));
    }
    let mut failure = None;
    for_each_buffer(&mut ckpt.state, &mut |buf| {
        if failure.is_some() {
            return;
        }
        let read = (|| -> Result<Vec<f32>> {
            let len = r.u64("buffer length")?;
            if len > (r.remaining() / 4) as u64 {
                return Err(Error::Checkpoint(format!("buffer of {len} floats overruns the file")));
            }
            let raw = r.take(len as usize * 4, "buffer")?;
            Ok(raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect())
        })();
        match read {
            Ok(v) => *buf = v,
            Err(e) => failure = Some(e),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if r.remaining() != 0 {
        return Err(Error::Checkpoint(format!("{} trailing bytes", r.remaining())));
    }
    validate(&mut ckpt)?;
    Ok(ckpt)
}

fn validate(ckpt: &mut Checkpoint) -> Result<()> {
    let bad = |e: Error| Error::Checkpoint(format!("inconsistent contents: {e}"));
    let m = &ckpt.state.model;
    let tensors = m
        .banks
        .iter()
        .flat_map(|b| &b.templates)
        .chain(m.biases.iter().flatten())
        .chain(m.norms.iter().flatten().flat_map(|n| [&n.gamma, &n.beta, &n.running_mean, &n.running_var]));
    for t in tensors {
        t.check_len().map_err(bad)?;
    }
    m.check_consistency().map_err(bad)?;
    ckpt.config.validate().map_err(bad)?;
    let slots: Vec<usize> = ckpt.state.model.param_slots().iter().map(|s| s.values.len()).collect();
    let velocity: Vec<usize> = ckpt.state.opt.velocity.iter().map(Vec::len).collect();
    if slots != velocity {
        return Err(Error::Checkpoint("optimizer state does not match the model".into()));
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(ckpt)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flops::Budget;
    use crate::network::{build_model, Mode, NetworkSpec};
    use crate::numerics::Tensor;
    use crate::trainer::Phase;

    fn sample() -> Checkpoint {
        let spec = NetworkSpec::preset("cnn-mnist", [1, 8, 8], 3).unwrap();
        let model = build_model::<f32>(&spec, 2, 4).unwrap();
        let mut state = TrainState::new(model, Budget::new(1000, 500).unwrap(), Phase::Small, 3);
        state.opt.velocity.iter_mut().flatten().enumerate().for_each(|(i, v)| *v = i as f32 * 0.5);
        state.budget.charge(123);
        Checkpoint {
            config: TrainConfig::default(),
            state,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ckpt = sample();
        let back = decode(&encode(&ckpt).unwrap()).unwrap();
        assert_eq!(back, ckpt);
        let x = Tensor::from_fn(&[2, 1, 8, 8], |i| (i as f32 * 0.37).sin());
        let a = ckpt.state.model.forward(&x, Mode::Eval, &[]).unwrap().logits;
        let b = back.state.model.forward(&x, Mode::Eval, &[]).unwrap().logits;
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode(&sample()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Checkpoint(m)) if m.contains("magic")));
        let mut bytes = encode(&sample()).unwrap();
        bytes[4] = 9;
        assert!(matches!(decode(&bytes), Err(Error::Checkpoint(m)) if m.contains("version")));
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = encode(&sample()).unwrap();
        for n in (0..bytes.len()).step_by(97).chain([bytes.len() - 1]) {
            assert!(decode(&bytes[..n]).is_err(), "prefix {n}");
        }
    }

    #[test]
    fn corrupted_bytes_are_rejected() {
        let bytes = encode(&sample()).unwrap();
        for i in (0..bytes.len()).step_by(53) {
            let mut b = bytes.clone();
            b[i] ^= 0x5A;
            assert!(decode(&b).is_err(), "byte {i}");
        }
    }

    #[test]
    fn lying_lengths_never_panic() {
        let ckpt = sample();
        let mut skeleton = ckpt.clone();
        for_each_buffer(&mut skeleton.state, &mut |b| b.clear());
        let header = serde_json::to_vec(&skeleton).unwrap();
        for declared in [0u64, 1, 7, u64::MAX / 2] {
            let mut out = Vec::new();
            out.extend_from_slice(MAGIC);
            out.extend_from_slice(&VERSION.to_le_bytes());
            out.extend_from_slice(&(header.len() as u64).to_le_bytes());
            out.extend_from_slice(&header);
            out.extend_from_slice(&1000u64.to_le_bytes());
            out.extend_from_slice(&declared.to_le_bytes());
            let crc = crc32fast::hash(&out);
            out.extend_from_slice(&crc.to_le_bytes());
            assert!(decode(&out).is_err());
        }
    }
}
