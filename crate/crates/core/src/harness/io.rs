//! Binary dataset and checkpoint files, little-endian throughout.
//!
//! Dataset layout: `"RFDS"`, version u16, radio variant u8, then K, L, Nr,
//! environment count, class count and record count as u32; each record is
//! env_id u32, class_id u16 and K·L·Nr f32 values.
//!
//! Checkpoint layout: `"RFCK"`, version u16, a u32-length UTF-8 metadata block
//! of `key = value` lines, a u32 parameter count, then per parameter: u16
//! name length, name, partition u8, element width u8 (4 or 8), rank u8, u32
//! dims and the values.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Partition, Scalar, Tensor};
use crate::signal::{Dataset, Environment, RadioConfig, RadioVariant, SignalMatrix};

pub const DATASET_MAGIC: [u8; 4] = *b"RFDS";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"RFCK";
pub const FORMAT_VERSION: u16 = 1;
/// Bytes before the first dataset record.
pub const DATASET_HEADER_LEN: usize = 4 + 2 + 1 + 4 * 6;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!(
                "{what} needs {n} bytes at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let found: [u8; 4] = self.take(4, "magic")?.try_into().unwrap();
        if found != expected {
            return Err(Error::BadMagic { expected, found });
        }
        let version = self.u16("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        Ok(())
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

fn to_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Config(format!("{what} {n} does not fit in 32 bits")))
}

pub fn encode_dataset(data: &Dataset) -> Result<Vec<u8>> {
    let [k, l, nr] = data.radio.shape();
    let per = k * l * nr;
    let records = data.len();
    let mut out = Vec::with_capacity(DATASET_HEADER_LEN + records * (6 + 4 * per));
    out.extend_from_slice(&DATASET_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(data.radio.variant().code());
    for (v, what) in [
        (k, "K"),
        (l, "L"),
        (nr, "Nr"),
        (data.environments.len(), "environment count"),
        (data.num_classes, "class count"),
        (records, "record count"),
    ] {
        out.extend_from_slice(&to_u32(v, what)?.to_le_bytes());
    }
    for env in &data.environments {
        for obs in &env.observations {
            if obs.values.shape() != [k, l, nr] {
                return Err(Error::ShapeMismatch(format!(
                    "observation of shape {:?} in a {k}×{l}×{nr} dataset",
                    obs.values.shape()
                )));
            }
            let label = u16::try_from(obs.label)
                .map_err(|_| Error::Config(format!("class id {} does not fit in 16 bits", obs.label)))?;
            out.extend_from_slice(&env.env_id.to_le_bytes());
            out.extend_from_slice(&label.to_le_bytes());
            for v in obs.values.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Radio constants other than the variant and shape are restored from the
/// variant defaults.
pub fn decode_dataset(buf: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(buf);
    r.magic(DATASET_MAGIC)?;
    let code = r.u8("radio variant")?;
    let variant =
        RadioVariant::from_code(code).ok_or_else(|| Error::Parse(format!("unknown radio variant code {code}")))?;
    let k = r.u32("K")? as usize;
    let l = r.u32("L")? as usize;
    let nr = r.u32("Nr")? as usize;
    let n_envs = r.u32("environment count")? as usize;
    let num_classes = r.u32("class count")? as usize;
    let records = r.u32("record count")? as usize;
    if k == 0 || l == 0 || nr == 0 {
        return Err(Error::ShapeMismatch(format!("empty signal shape {k}×{l}×{nr}")));
    }
    let per = k * l * nr;
    let need = records
        .checked_mul(6 + 4 * per)
        .ok_or_else(|| Error::ShapeMismatch("record block size overflows".into()))?;
    if r.remaining() < need {
        return Err(Error::Truncated(format!(
            "{records} records of {k}×{l}×{nr} need {need} bytes, {} left",
            r.remaining()
        )));
    }
    if r.remaining() > need {
        return Err(Error::ShapeMismatch(format!(
            "{} bytes follow the last record",
            r.remaining() - need
        )));
    }
    let mut environments: Vec<Environment> = Vec::with_capacity(n_envs);
    for _ in 0..records {
        let env_id = r.u32("env id")?;
        let label = r.u16("class id")? as usize;
        if label >= num_classes {
            return Err(Error::ShapeMismatch(format!(
                "class id {label} with {num_classes} classes"
            )));
        }
        let raw = r.take(4 * per, "record values")?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let obs = SignalMatrix {
            values: Tensor::new(vec![k, l, nr], values)?,
            label,
            env_id,
        };
        match environments.last_mut() {
            Some(env) if env.env_id == env_id => env.observations.push(obs),
            _ => {
                if environments.iter().any(|e| e.env_id == env_id) {
                    return Err(Error::Parse(format!(
                        "records of environment {env_id} are not contiguous"
                    )));
                }
                environments.push(Environment {
                    env_id,
                    observations: vec![obs],
                });
            }
        }
    }
    if environments.len() != n_envs {
        return Err(Error::ShapeMismatch(format!(
            "header declares {n_envs} environments, records hold {}",
            environments.len()
        )));
    }
    Ok(Dataset {
        radio: RadioConfig::for_variant(variant, k, l, nr),
        num_classes,
        environments,
    })
}

pub fn write_dataset(data: &Dataset, path: &Path) -> Result<()> {
    let bytes = encode_dataset(data)?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}

/// Parameters plus free-form metadata needed to rebuild the model around them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub metadata: BTreeMap<String, String>,
    pub params: ParamStore<T>,
}

pub fn encode_checkpoint<T: Scalar>(ck: &Checkpoint<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let mut meta = String::new();
    for (k, v) in &ck.metadata {
        if k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::Config(format!("metadata entry {k:?} cannot be stored")));
        }
        meta.push_str(&format!("{k} = {v}\n"));
    }
    out.extend_from_slice(&to_u32(meta.len(), "metadata length")?.to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    out.extend_from_slice(&to_u32(ck.params.len(), "parameter count")?.to_le_bytes());
    let width = std::mem::size_of::<T>();
    for p in ck.params.iter() {
        let name = p.name().as_bytes();
        let len =
            u16::try_from(name.len()).map_err(|_| Error::Config(format!("parameter name {:?} too long", p.name())))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(p.partition().code());
        out.push(width as u8);
        let shape = p.value.shape();
        out.push(u8::try_from(shape.len()).map_err(|_| Error::Config("tensor rank above 255".into()))?);
        for &d in shape {
            out.extend_from_slice(&to_u32(d, "dimension")?.to_le_bytes());
        }
        for &v in p.value.data() {
            if width == 4 {
                out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            } else {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Values stored at either width are converted to `T`.
pub fn decode_checkpoint<T: Scalar>(buf: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader::new(buf);
    r.magic(CHECKPOINT_MAGIC)?;
    let meta_len = r.u32("metadata length")? as usize;
    let meta = std::str::from_utf8(r.take(meta_len, "metadata")?)
        .map_err(|e| Error::Parse(format!("checkpoint metadata is not UTF-8: {e}")))?;
    let mut metadata = BTreeMap::new();
    for line in meta.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("bad metadata line {line:?}")))?;
        metadata.insert(k.trim().to_string(), v.trim().to_string());
    }
    let count = r.u32("parameter count")? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "parameter name")?)
            .map_err(|e| Error::Parse(format!("parameter name is not UTF-8: {e}")))?
            .to_string();
        let pcode = r.u8("partition")?;
        let partition =
            Partition::from_code(pcode).ok_or_else(|| Error::Parse(format!("unknown partition code {pcode}")))?;
        let width = r.u8("element width")? as usize;
        if width != 4 && width != 8 {
            return Err(Error::Parse(format!("element width {width} for {name}")));
        }
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * width, "parameter values")?;
        let data: Vec<T> = if width == 4 {
            raw.chunks_exact(4)
                .map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect()
        } else {
            raw.chunks_exact(8)
                .map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap())))
                .collect()
        };
        params.add(&name, partition, Tensor::new(shape, data)?)?;
    }
    if r.remaining() != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{} bytes follow the last parameter",
            r.remaining()
        )));
    }
    Ok(Checkpoint { metadata, params })
}

pub fn write_checkpoint<T: Scalar>(ck: &Checkpoint<T>, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(ck)?)?;
    Ok(())
}

pub fn read_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    decode_checkpoint(&fs::read(path)?)
}
