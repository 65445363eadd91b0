//! Versioned binary checkpoints holding parameters, optimizer moments, the
//! iteration counter, and rng state. Values are 64-bit little-endian and the
//! round trip is bit-exact, so resumed inference matches pre-save inference.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelDims, ModelParams};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"URGTCKPT";
const VERSION: u32 = 1;

/// Adaptive-moment accumulators, one pair per parameter tensor in
/// `named_tensors` order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn zeros(params: &ModelParams) -> AdamState {
        let sizes: Vec<usize> =
            params.named_tensors().iter().map(|(_, t)| t.len()).collect();
        AdamState {
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// Everything needed to resume training exactly where it stopped.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ModelParams,
    pub iteration: u64,
    pub adam: Option<AdamState>,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_values(buf: &mut Vec<u8>, values: &[f64]) {
    put_u64(buf, values.len() as u64);
    for &v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

impl TrainState {
    pub fn to_bytes(&self) -> Vec<u8> {
        let named = self.params.named_tensors();
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        put_u32(&mut buf, VERSION);
        let d = self.params.dims;
        for v in [d.blocks, d.width, d.heads, d.cell] {
            put_u32(&mut buf, v as u32);
        }
        put_u64(&mut buf, self.iteration);
        buf.extend_from_slice(&self.rng_seed);
        buf.extend_from_slice(&self.rng_word_pos.to_le_bytes());
        put_u32(&mut buf, named.len() as u32);
        for (name, tensor) in &named {
            put_u32(&mut buf, name.len() as u32);
            buf.extend_from_slice(name.as_bytes());
            put_u32(&mut buf, tensor.shape().len() as u32);
            for &dim in tensor.shape() {
                put_u64(&mut buf, dim as u64);
            }
            put_values(&mut buf, tensor.data());
        }
        match &self.adam {
            None => buf.push(0),
            Some(adam) => {
                buf.push(1);
                put_u64(&mut buf, adam.t);
                for i in 0..named.len() {
                    put_values(&mut buf, &adam.m[i]);
                    put_values(&mut buf, &adam.v[i]);
                }
            }
        }
        buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<TrainState> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| {
            Error::Checkpoint(format!("{}: {e}", path.display()))
        })
    }

    fn from_bytes(bytes: &[u8]) -> std::result::Result<TrainState, String> {
        let mut c = Cursor { bytes, pos: 0 };
        if c.take(8, "magic")? != MAGIC {
            return Err("bad magic (not a checkpoint file)".into());
        }
        let version = c.u32("version")?;
        if version != VERSION {
            return Err(format!("unsupported format version {version}"));
        }
        let dims = ModelDims {
            blocks: c.u32("blocks")? as usize,
            width: c.u32("width")? as usize,
            heads: c.u32("heads")? as usize,
            cell: c.u32("cell")? as usize,
        };
        dims.validate().map_err(|e| e.to_string())?;
        let iteration = c.u64("iteration")?;
        let mut rng_seed = [0u8; 32];
        rng_seed.copy_from_slice(c.take(32, "rng seed")?);
        let rng_word_pos = u128::from_le_bytes(
            c.take(16, "rng position")?.try_into().expect("16 bytes"),
        );

        let expected = ModelParams::init_names(dims);
        let count = c.u32("parameter count")? as usize;
        if count != expected.len() {
            return Err(format!(
                "parameter count {count} does not match architecture ({} expected)",
                expected.len()
            ));
        }
        let mut tensors = Vec::with_capacity(count);
        for want_name in &expected {
            let name_len = c.u32("name length")? as usize;
            let name = std::str::from_utf8(c.take(name_len, "name")?)
                .map_err(|_| format!("parameter name at byte {} is not utf-8", c.pos))?;
            if name != want_name {
                return Err(format!("parameter {name:?} where {want_name:?} was expected"));
            }
            let rank = c.u32("rank")? as usize;
            if rank > 4 {
                return Err(format!("parameter {name} has implausible rank {rank}"));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(c.u64("dimension")? as usize);
            }
            let values = c.values(&format!("values of {name}"))?;
            if values.len() != shape.iter().product::<usize>() {
                return Err(format!(
                    "parameter {name}: {} values for shape {shape:?}",
                    values.len()
                ));
            }
            tensors.push(Tensor::new(&shape, values).map_err(|e| e.to_string())?);
        }
        let params = ModelParams::from_tensors(dims, tensors).map_err(|e| e.to_string())?;

        let adam = match c.take(1, "optimizer flag")?[0] {
            0 => None,
            1 => {
                let t = c.u64("optimizer step")?;
                let sizes: Vec<usize> =
                    params.named_tensors().iter().map(|(_, t)| t.len()).collect();
                let mut m = Vec::with_capacity(count);
                let mut v = Vec::with_capacity(count);
                for (i, &n) in sizes.iter().enumerate() {
                    for (which, store) in [("m", &mut m), ("v", &mut v)] {
                        let vals = c.values(&format!("moment {which}[{i}]"))?;
                        if vals.len() != n {
                            return Err(format!(
                                "moment {which}[{i}] has {} values, parameter has {n}",
                                vals.len()
                            ));
                        }
                        store.push(vals);
                    }
                }
                Some(AdamState { t, m, v })
            }
            other => return Err(format!("optimizer flag {other} is not 0 or 1")),
        };
        if c.pos != bytes.len() {
            return Err(format!("{} trailing bytes after checkpoint", bytes.len() - c.pos));
        }
        Ok(TrainState { params, iteration, adam, rng_seed, rng_word_pos })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], String> {
        if self.pos + n > self.bytes.len() {
            return Err(format!(
                "truncated reading {what} at byte {} (need {n}, have {})",
                self.pos,
                self.bytes.len() - self.pos
            ));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn values(&mut self, what: &str) -> std::result::Result<Vec<f64>, String> {
        let n = self.u64(what)? as usize;
        let raw = self.take(n * 8, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}
