//! Binary model files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "PSTATCN\0"
//! version  u32      1
//! header   u32 length, then UTF-8 `key=value` lines
//! arrays   u32 count, then per array:
//!          u32 name length, name, u32 rank, u64 per dimension,
//!          f64 values in row-major order
//! ```
//!
//! The header holds the model spec and free-form metadata. Arrays hold the
//! parameters in registration order, then optional `norm.mean` and
//! `norm.std`. Values are stored as 64-bit floats, so an `f64` model
//! round-trips bit for bit.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::model::{ForecastModel, ModelSpec, Variant};
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"PSTATCN\0";
pub const FORMAT_VERSION: u32 = 1;

/// Everything needed to rebuild a trained forecaster and feed it data.
#[derive(Clone, Debug)]
pub struct Checkpoint<S> {
    pub model: ForecastModel<S>,
    pub norm: Option<NormStats>,
    /// Free-form `key=value` pairs; keys must not contain `=` or newlines.
    pub metadata: BTreeMap<String, String>,
}

fn spec_pairs(spec: &ModelSpec) -> Vec<(&'static str, String)> {
    vec![
        ("variant", spec.variant.name().to_string()),
        ("n_exog", spec.n_exog.to_string()),
        ("window", spec.window.to_string()),
        ("horizon", spec.horizon.to_string()),
        ("kernel_size", spec.kernel_size.to_string()),
        ("levels", spec.levels.to_string()),
        ("hidden", spec.hidden.to_string()),
        ("dropout", format!("{:?}", spec.dropout)),
        ("seed", spec.seed.to_string()),
    ]
}

const META_PREFIX: &str = "meta.";

impl<S: Scalar> Checkpoint<S> {
    pub fn new(model: ForecastModel<S>) -> Self {
        Checkpoint {
            model,
            norm: None,
            metadata: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = String::new();
        for (k, v) in spec_pairs(self.model.spec()) {
            header.push_str(&format!("{k}={v}\n"));
        }
        for (k, v) in &self.metadata {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Usage(format!(
                    "metadata entry `{k}` cannot be stored in a header line"
                )));
            }
            header.push_str(&format!("{META_PREFIX}{k}={v}\n"));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        write_len(&mut out, header.len())?;
        out.extend_from_slice(header.as_bytes());

        let params = self.model.params();
        let norm_arrays = self
            .norm
            .iter()
            .flat_map(|n| [("norm.mean", &n.mean), ("norm.std", &n.std)]);
        write_len(&mut out, params.len() + 2 * usize::from(self.norm.is_some()))?;
        for p in params.iter() {
            write_array(&mut out, &p.name, &p.shape, p.data.iter().map(|v| v.as_f64()))?;
        }
        for (name, values) in norm_arrays {
            write_array(&mut out, name, &[values.len()], values.iter().copied())?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a model file (bad magic bytes)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let header_len = r.u32()? as usize;
        let header =
            std::str::from_utf8(r.take(header_len)?).map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
        let mut fields = BTreeMap::new();
        let mut metadata = BTreeMap::new();
        for line in header.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("header line `{line}` lacks `=`")))?;
            match k.strip_prefix(META_PREFIX) {
                Some(meta) => metadata.insert(meta.to_string(), v.to_string()),
                None => fields.insert(k.to_string(), v.to_string()),
            };
        }
        let spec = parse_spec(&fields)?;
        let mut model = ForecastModel::<S>::build(spec)?;

        let count = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(
                    usize::try_from(r.u64()?).map_err(|_| Error::Checkpoint(format!("{name}: dimension too large")))?,
                );
            }
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::Checkpoint(format!("{name}: data runs past the end of the file")))?;
            let data: Vec<f64> = (0..numel).map(|_| r.f64()).collect::<Result<_>>()?;
            arrays.push((name, shape, data));
        }
        if r.remaining() != 0 {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.remaining())));
        }

        let mut norm_mean = None;
        let mut norm_std = None;
        let mut seen = 0;
        for (name, shape, data) in arrays {
            match name.as_str() {
                "norm.mean" => norm_mean = Some(data),
                "norm.std" => norm_std = Some(data),
                _ => {
                    let id = model
                        .params()
                        .find(&name)
                        .ok_or_else(|| Error::Checkpoint(format!("unexpected array `{name}`")))?;
                    let p = model.params_mut().get_mut(id);
                    if p.shape != shape {
                        return Err(Error::Checkpoint(format!(
                            "`{name}` has shape {shape:?}, the header implies {:?}",
                            p.shape
                        )));
                    }
                    p.data = data.into_iter().map(S::of).collect();
                    seen += 1;
                }
            }
        }
        if seen != model.params().len() {
            return Err(Error::Checkpoint(format!(
                "{seen} of {} parameter arrays present",
                model.params().len()
            )));
        }
        let norm = match (norm_mean, norm_std) {
            (Some(mean), Some(std)) if mean.len() == std.len() => Some(NormStats { mean, std }),
            (None, None) => None,
            _ => return Err(Error::Checkpoint("normalization arrays are incomplete".into())),
        };
        Ok(Checkpoint { model, norm, metadata })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        f.sync_all()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn parse_spec(fields: &BTreeMap<String, String>) -> Result<ModelSpec> {
    let get = |k: &str| {
        fields
            .get(k)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("header lacks `{k}`")))
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("header field `{k}` is not a count")))
    };
    let variant: Variant = get("variant")?
        .parse()
        .map_err(|_| Error::Checkpoint("unknown variant in header".into()))?;
    Ok(ModelSpec {
        variant,
        n_exog: num("n_exog")?,
        window: num("window")?,
        horizon: num("horizon")?,
        kernel_size: num("kernel_size")?,
        levels: num("levels")?,
        hidden: num("hidden")?,
        dropout: get("dropout")?
            .parse()
            .map_err(|_| Error::Checkpoint("header field `dropout` is not a number".into()))?,
        seed: get("seed")?
            .parse()
            .map_err(|_| Error::Checkpoint("header field `seed` is not an integer".into()))?,
    })
}

fn write_len(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::Checkpoint(format!("length {n} exceeds the format limit")))?;
    out.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

fn write_array(out: &mut Vec<u8>, name: &str, shape: &[usize], data: impl Iterator<Item = f64>) -> Result<()> {
    write_len(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    write_len(out, shape.len())?;
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Checkpoint("file is truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }
}
