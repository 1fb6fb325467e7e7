//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//! ```text
//! "PSALCKPT" | u32 version | u32 header_len | header (UTF-8 `key = value` lines)
//! u32 n_tensors | n × (u32 name_len | name | u8 dtype | u8 ndim | ndim × u64 dim | data)
//! u64 FNV-1a of every preceding byte
//! ```
//! `dtype` 0 is f32 and 1 is f64. Names carry a section prefix: `param/`,
//! `buffer/`, `adam_m/`, `adam_v/`, plus the single f64 tensor `history`.
//! Values are stored as raw bit patterns, so a round trip is bit-exact.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::{fnv1a, ParameterStore};
use crate::tensor::Tensor;
use crate::trainer::{LogRow, TrainState};

pub const MAGIC: &[u8; 8] = b"PSALCKPT";
pub const VERSION: u32 = 1;
const MAX_NDIM: usize = 8;
const HISTORY: &str = "history";
const HISTORY_COLS: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Resolved run configuration, `key = value` per line.
    pub config: String,
    pub step: usize,
    pub params: ParameterStore<f32>,
    pub adam_m: BTreeMap<String, Tensor<f32>>,
    pub adam_v: BTreeMap<String, Tensor<f32>>,
    pub history: Vec<LogRow>,
}

impl Checkpoint {
    pub fn from_state(config: &str, s: &TrainState) -> Self {
        Self {
            config: config.to_string(),
            step: s.step,
            params: s.params.clone(),
            adam_m: s.adam_m.clone(),
            adam_v: s.adam_v.clone(),
            history: s.history.clone(),
        }
    }

    pub fn into_state(self) -> TrainState {
        TrainState { step: self.step, params: self.params, adam_m: self.adam_m, adam_v: self.adam_v, history: self.history }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let header = format!("step = {}\n{}", self.step, self.config);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());

        let sections = [
            ("param/", &self.params.params),
            ("buffer/", &self.params.buffers),
            ("adam_m/", &self.adam_m),
            ("adam_v/", &self.adam_v),
        ];
        let count: usize = sections.iter().map(|(_, m)| m.len()).sum::<usize>() + 1;
        out.extend_from_slice(&(count as u32).to_le_bytes());
        for (prefix, map) in sections {
            for (name, t) in map {
                put_head(&mut out, &format!("{prefix}{name}"), 0, t.shape());
                for v in t.data() {
                    out.extend_from_slice(&v.to_bits().to_le_bytes());
                }
            }
        }
        put_head(&mut out, HISTORY, 1, &[self.history.len(), HISTORY_COLS]);
        for r in &self.history {
            for v in [r.step as f64, r.loss_sal, r.loss_edge, r.loss_total, r.lr] {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        let sum = fnv1a(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 + 8 {
            return Err(bad("file too short"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        if fnv1a(body) != stored {
            return Err(bad("checksum mismatch"));
        }
        let hlen = r.u32()? as usize;
        let header = std::str::from_utf8(r.take(hlen)?).map_err(|_| bad("header is not UTF-8"))?;
        let mut step = None;
        let mut config = String::new();
        for line in header.lines() {
            match line.split_once('=') {
                Some((k, v)) if k.trim() == "step" && step.is_none() => {
                    step = Some(v.trim().parse::<usize>().map_err(|_| bad("bad step"))?);
                }
                _ => {
                    config.push_str(line);
                    config.push('\n');
                }
            }
        }
        let step = step.ok_or_else(|| bad("header has no step"))?;

        let mut ck = Checkpoint {
            config,
            step,
            params: ParameterStore::default(),
            adam_m: BTreeMap::new(),
            adam_v: BTreeMap::new(),
            history: Vec::new(),
        };
        let mut saw_history = false;
        let n = r.u32()?;
        for _ in 0..n {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?).map_err(|_| bad("tensor name is not UTF-8"))?.to_string();
            let dtype = r.u8()?;
            let ndim = r.u8()? as usize;
            if ndim > MAX_NDIM {
                return Err(bad(&format!("`{name}` has {ndim} dimensions")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(usize::try_from(r.u64()?).map_err(|_| bad("dimension overflows"))?);
            }
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("size overflows"))?;
            if name == HISTORY {
                if dtype != 1 || shape.len() != 2 || shape[1] != HISTORY_COLS || saw_history {
                    return Err(bad("malformed history"));
                }
                saw_history = true;
                let raw = r.take(len.checked_mul(8).ok_or_else(|| bad("size overflows"))?)?;
                let vals: Vec<f64> =
                    raw.chunks_exact(8).map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("8")))).collect();
                for row in vals.chunks_exact(HISTORY_COLS) {
                    if !(row[0] >= 0.0 && row[0].fract() == 0.0 && row[0] < 1e15) {
                        return Err(bad("history step is not a count"));
                    }
                    ck.history.push(LogRow {
                        step: row[0] as usize,
                        loss_sal: row[1],
                        loss_edge: row[2],
                        loss_total: row[3],
                        lr: row[4],
                    });
                }
                continue;
            }
            if dtype != 0 {
                return Err(bad(&format!("`{name}` has dtype {dtype}, expected f32")));
            }
            let raw = r.take(len.checked_mul(4).ok_or_else(|| bad("size overflows"))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_bits(u32::from_le_bytes(c.try_into().expect("4")))).collect();
            let t = Tensor::new(&shape, data)?;
            let (map, key) = if let Some(k) = name.strip_prefix("param/") {
                (&mut ck.params.params, k)
            } else if let Some(k) = name.strip_prefix("buffer/") {
                (&mut ck.params.buffers, k)
            } else if let Some(k) = name.strip_prefix("adam_m/") {
                (&mut ck.adam_m, k)
            } else if let Some(k) = name.strip_prefix("adam_v/") {
                (&mut ck.adam_v, k)
            } else {
                return Err(bad(&format!("unknown tensor `{name}`")));
            };
            if map.insert(key.to_string(), t).is_some() {
                return Err(bad(&format!("duplicate tensor `{name}`")));
            }
        }
        if r.pos != body.len() {
            return Err(bad("trailing bytes"));
        }
        if !saw_history {
            return Err(bad("missing history"));
        }
        for (label, map) in [("adam_m", &ck.adam_m), ("adam_v", &ck.adam_v)] {
            if map.len() != ck.params.params.len()
                || map.iter().any(|(k, t)| ck.params.params.get(k).is_none_or(|p| p.shape() != t.shape()))
            {
                return Err(bad(&format!("{label} does not match the parameters")));
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, self.encode())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn bad(m: &str) -> Error {
    Error::Checkpoint(m.to_string())
}

fn put_head(out: &mut Vec<u8>, name: &str, dtype: u8, shape: &[usize]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(dtype);
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| bad("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = ParameterStore::default();
        params.params.insert("a.weight".into(), Tensor::new(&[2, 2], vec![1.5, -0.0, f32::MIN_POSITIVE, 3e-41]).unwrap());
        params.buffers.insert("bn.running_mean".into(), Tensor::new(&[1], vec![0.25]).unwrap());
        let mut state = TrainState::new(params);
        state.step = 7;
        state.adam_v.get_mut("a.weight").unwrap().data_mut()[1] = 1e-30;
        state.history.push(LogRow { step: 7, loss_sal: 0.1, loss_edge: 0.2, loss_total: 0.30000000000000004, lr: 1e-4 });
        Checkpoint::from_state("preset = tiny\nseed = 3\n", &state)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back.encode(), bytes);
        assert_eq!(back.params.checksum(), ck.params.checksum());
        assert_eq!(back.config, ck.config);
        assert_eq!(back.history, ck.history);
    }

    #[test]
    fn corruption_is_rejected() {
        let bytes = sample().encode();
        for cut in [0, 5, 20, bytes.len() - 1] {
            assert!(Checkpoint::decode(&bytes[..cut]).is_err());
        }
        let mut flipped = bytes.clone();
        flipped[30] ^= 1;
        assert!(Checkpoint::decode(&flipped).is_err());
    }
}
