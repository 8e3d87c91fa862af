//! Versioned binary checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "GBNF"  u32 version
//! u64 len, metadata (UTF-8 text)
//! u32 dim, u8 mode, u32 stage, u32 hidden, u32 steps
//! u64 c, then per component: u64 n, n × f64
//! u64 c, c × f64 rho
//! u64 c, c × f64 weights
//! u8 has_partition, f64 value, f64 stderr
//! [u8; 32] rng seed, u64 stream, u128 word position
//! ```

use std::path::Path;

use super::rng::RngDescriptor;
use crate::boost::{GBNFModel, LogPartition, MixtureMode};
use crate::error::{Error, Result};
use crate::flows::{FlowArchitecture, FlowComponent};

pub const MAGIC: &[u8; 4] = b"GBNF";
pub const FORMAT_VERSION: u32 = 1;

/// Everything stored in a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Human-readable block, normally the run's config echo.
    pub metadata: String,
    /// Number of completed stages.
    pub stage: u32,
    pub model: GBNFModel,
    pub rng: RngDescriptor,
}

fn mode_code(mode: MixtureMode) -> u8 {
    match mode {
        MixtureMode::Additive => 0,
        MixtureMode::Multiplicative => 1,
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    put_u64(out, vs.len() as u64);
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let model = &self.model;
        let first = model
            .components()
            .first()
            .ok_or_else(|| Error::State("cannot checkpoint an empty model".into()))?;
        let arch = *first.arch();
        let to_u32 = |v: usize, what: &str| u32::try_from(v).map_err(|_| Error::Domain(format!("{what} too large")));
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        put_u64(&mut out, self.metadata.len() as u64);
        out.extend_from_slice(self.metadata.as_bytes());
        put_u32(&mut out, to_u32(arch.dim, "dimension")?);
        out.push(mode_code(model.mode()));
        put_u32(&mut out, self.stage);
        put_u32(&mut out, to_u32(arch.hidden, "hidden width")?);
        put_u32(&mut out, to_u32(arch.steps, "step count")?);
        put_u64(&mut out, model.len() as u64);
        for comp in model.components() {
            put_f64s(&mut out, comp.params().values());
        }
        put_f64s(&mut out, model.rho());
        put_f64s(&mut out, model.weights());
        let lp = model.log_partition();
        out.push(u8::from(lp.is_some()));
        let lp = lp.unwrap_or(LogPartition { value: 0.0, stderr: 0.0 });
        out.extend_from_slice(&lp.value.to_le_bytes());
        out.extend_from_slice(&lp.stderr.to_le_bytes());
        out.extend_from_slice(&self.rng.seed);
        put_u64(&mut out, self.rng.stream);
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(r.error(0, "bad magic bytes; not a checkpoint"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Incompatible {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let meta_len = r.len()?;
        let at = r.pos;
        let metadata = String::from_utf8(r.take(meta_len)?.to_vec()).map_err(|_| r.error(at, "metadata is not UTF-8"))?;
        let dim = r.u32()? as usize;
        let at = r.pos;
        let mode = match r.u8()? {
            0 => MixtureMode::Additive,
            1 => MixtureMode::Multiplicative,
            other => return Err(r.error(at, &format!("unknown mode code {other}"))),
        };
        let stage = r.u32()?;
        let hidden = r.u32()? as usize;
        let steps = r.u32()? as usize;
        let arch = FlowArchitecture { dim, steps, hidden };
        let c = r.len()?;
        let mut components = Vec::with_capacity(c.min(1024));
        for _ in 0..c {
            let at = r.pos;
            let values = r.f64s()?;
            components.push(FlowComponent::from_values(arch, values).map_err(|e| r.error(at, &e.to_string()))?);
        }
        let at = r.pos;
        let rho = r.f64s()?;
        let weights = r.f64s()?;
        let has_partition = r.u8()? != 0;
        let value = r.f64()?;
        let stderr = r.f64()?;
        let log_partition = has_partition.then_some(LogPartition { value, stderr });
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        if r.pos != bytes.len() {
            return Err(r.error(r.pos, "trailing bytes after checkpoint"));
        }
        let model = GBNFModel::from_raw(mode, components, rho, weights, log_partition)
            .map_err(|e| r.error(at, &e.to_string()))?;
        Ok(Self {
            metadata,
            stage,
            model,
            rng: RngDescriptor { seed, stream, word_pos },
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn error(&self, offset: usize, message: &str) -> Error {
        Error::Parse {
            location: format!("byte offset {offset}"),
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error(self.bytes.len(), "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
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

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    /// A length prefix, rejected when it could not fit in the remaining bytes.
    fn len(&mut self) -> Result<usize> {
        let at = self.pos;
        let n = self.u64()?;
        if n > (self.bytes.len() - self.pos) as u64 {
            return Err(self.error(at, "length prefix exceeds the file"));
        }
        Ok(n as usize)
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let at = self.pos;
        let n = self.len()?;
        if n.checked_mul(8).is_none_or(|b| b > self.bytes.len() - self.pos) {
            return Err(self.error(at, "length prefix exceeds the file"));
        }
        (0..n).map(|_| self.f64()).collect()
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}
