//! Binary checkpoint: `"TFLW"`, version, embedded config, named parameter
//! table and a trailing CRC-32 over everything before it. Integers and floats
//! are little-endian.

use std::path::Path;

use timeflow_core::datapipe::Scaler;
use timeflow_core::velocity_model::VelocityModel;
use timeflow_core::Tensor;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8; 4] = b"TFLW";
pub const VERSION: u32 = 1;

const SCALER_MIN: &str = "data.scaler.min";
const SCALER_MAX: &str = "data.scaler.max";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub params: Vec<(String, Tensor)>,
    pub scaler: Scaler,
}

impl Checkpoint {
    pub fn from_model(config: &ExperimentConfig, model: &VelocityModel, scaler: &Scaler) -> Self {
        Self {
            config: config.clone(),
            params: model
                .params()
                .iter()
                .map(|(n, t)| (n.to_owned(), t.clone()))
                .collect(),
            scaler: scaler.clone(),
        }
    }

    /// Rebuilds the model from the embedded config and loads the stored values.
    pub fn model(&self) -> CliResult<VelocityModel> {
        let mut model = VelocityModel::new(self.config.model.clone())?;
        model.params_mut().load(self.params.clone())?;
        Ok(model)
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn to_bytes(&self) -> CliResult<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let config = self.config.to_toml()?;
        out.extend_from_slice(&(config.len() as u64).to_le_bytes());
        out.extend_from_slice(config.as_bytes());
        let d = self.scaler.features();
        let scaler = [
            (SCALER_MIN.to_owned(), Tensor::new(&[d], self.scaler.min.clone())?),
            (SCALER_MAX.to_owned(), Tensor::new(&[d], self.scaler.max.clone())?),
        ];
        let entries: Vec<&(String, Tensor)> = self.params.iter().chain(scaler.iter()).collect();
        out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
        for (name, t) in entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &dim in t.shape() {
                out.extend_from_slice(&(dim as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> CliResult<Self> {
        let bad = |reason: String| CliError::Integrity {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < MAGIC.len() + 8 || &bytes[..4] != MAGIC {
            return Err(bad("missing TFLW magic".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().expect("4-byte trailer"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(bad(format!("checksum {actual:08x} does not match stored {stored:08x}")));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32().map_err(&bad)?;
        if version != VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let config_len = r.u64().map_err(&bad)? as usize;
        let config_text = std::str::from_utf8(r.take(config_len).map_err(&bad)?)
            .map_err(|_| bad("embedded config is not UTF-8".into()))?;
        let config = ExperimentConfig::from_toml(config_text)
            .map_err(|e| bad(format!("embedded config rejected: {e}")))?;
        let count = r.u64().map_err(&bad)? as usize;
        let mut params = Vec::new();
        for _ in 0..count {
            let name_len = r.u32().map_err(&bad)? as usize;
            let name = std::str::from_utf8(r.take(name_len).map_err(&bad)?)
                .map_err(|_| bad("parameter name is not UTF-8".into()))?
                .to_owned();
            let rank = r.u32().map_err(&bad)? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()
                .map_err(&bad)?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n.filter(|n| n.saturating_mul(8) <= r.remaining()).ok_or_else(|| {
                bad(format!("parameter {name} shape {shape:?} overruns the file"))
            })?;
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>, _>>().map_err(&bad)?;
            let t = Tensor::new(&shape, data).map_err(|e| bad(e.to_string()))?;
            params.push((name, t));
        }
        if r.remaining() != 0 {
            return Err(bad(format!("{} trailing bytes after parameter table", r.remaining())));
        }
        let mut take = |key: &str| -> CliResult<Vec<f64>> {
            let i = params
                .iter()
                .position(|(n, _)| n == key)
                .ok_or_else(|| bad(format!("missing {key} entry")))?;
            Ok(params.remove(i).1.data().to_vec())
        };
        let (min, max) = (take(SCALER_MIN)?, take(SCALER_MAX)?);
        if min.len() != max.len() {
            return Err(bad("scaler min/max lengths differ".into()));
        }
        Ok(Self {
            config,
            params,
            scaler: Scaler { min, max },
        })
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        let bytes = self.to_bytes()?;
        // write-then-rename so a crash never leaves a torn checkpoint
        let tmp = path.with_extension("tflw.tmp");
        std::fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        if n > self.remaining() {
            return Err(format!("truncated at byte {} (wanted {n} more)", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
