//! Binary checkpoints: a versioned header, a JSON architecture record,
//! named parameter records and optional Adam state.
//!
//! ```text
//! "FPMCKPT\0" u32 version
//! u64 len, architecture JSON
//! u32 count, { u32 len, name, u8 kind, u8 dtype(=1: f64), u32 ndim, u64 dims.., f64 values.. }
//! u32 count, { u32 len, name, u64 step, f64 lr, u32 n, u32 param index.., m values.., v values.. }
//! ```
//! All integers and floats are little-endian.

use super::{Adam, AutodiffError, ParamKind, ParamStore, Result, Tensor};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"FPMCKPT\0";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Declarative architecture record (JSON).
    pub architecture: String,
    pub store: ParamStore,
    pub optimizers: Vec<(String, Adam)>,
}

fn fmt_err(msg: impl Into<String>) -> AutodiffError {
    AutodiffError::Format(msg.into())
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_u64::<LittleEndian>(self.architecture.len() as u64)?;
        w.write_all(self.architecture.as_bytes())?;
        w.write_u32::<LittleEndian>(self.store.len() as u32)?;
        for (_, p) in self.store.iter() {
            write_str(w, &p.name)?;
            w.write_u8(p.kind.code())?;
            w.write_u8(DTYPE_F64)?;
            w.write_u32::<LittleEndian>(p.value.shape().len() as u32)?;
            for &d in p.value.shape() {
                w.write_u64::<LittleEndian>(d as u64)?;
            }
            write_values(w, p.value.data())?;
        }
        w.write_u32::<LittleEndian>(self.optimizers.len() as u32)?;
        for (name, adam) in &self.optimizers {
            write_str(w, name)?;
            w.write_u64::<LittleEndian>(adam.step)?;
            w.write_f64::<LittleEndian>(adam.lr)?;
            w.write_u32::<LittleEndian>(adam.params().len() as u32)?;
            for id in adam.params() {
                w.write_u32::<LittleEndian>(id.index() as u32)?;
            }
            let (m, v) = adam.moments();
            for t in m.iter().chain(v) {
                write_values(w, t.data())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(fmt_err("not a checkpoint file"));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(fmt_err(format!("unsupported checkpoint version {version}")));
        }
        let len = r.read_u64::<LittleEndian>()? as usize;
        let mut arch = vec![0u8; len];
        r.read_exact(&mut arch)?;
        let architecture =
            String::from_utf8(arch).map_err(|_| fmt_err("architecture record is not UTF-8"))?;
        let mut store = ParamStore::new();
        for _ in 0..r.read_u32::<LittleEndian>()? {
            let name = read_str(r)?;
            let kind = ParamKind::from_code(r.read_u8()?)
                .ok_or_else(|| fmt_err("unknown parameter kind"))?;
            if r.read_u8()? != DTYPE_F64 {
                return Err(fmt_err("unsupported dtype"));
            }
            let ndim = r.read_u32::<LittleEndian>()? as usize;
            let shape = (0..ndim)
                .map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize))
                .collect::<std::io::Result<Vec<_>>>()?;
            let n = shape.iter().product();
            let value = Tensor::new(&shape, read_values(r, n)?)?;
            if store.id(&name).is_some() {
                return Err(fmt_err(format!("duplicate parameter {name}")));
            }
            store.add(name, kind, value);
        }
        let mut optimizers = Vec::new();
        for _ in 0..r.read_u32::<LittleEndian>()? {
            let name = read_str(r)?;
            let step = r.read_u64::<LittleEndian>()?;
            let lr = r.read_f64::<LittleEndian>()?;
            let n = r.read_u32::<LittleEndian>()? as usize;
            let mut ids = Vec::with_capacity(n);
            for _ in 0..n {
                let idx = r.read_u32::<LittleEndian>()? as usize;
                let id = store
                    .ids()
                    .nth(idx)
                    .ok_or_else(|| fmt_err("optimizer references unknown parameter"))?;
                ids.push(id);
            }
            let mut moments = Vec::with_capacity(2 * n);
            for k in 0..2 * n {
                let shape = store.value(ids[k % n]).shape().to_vec();
                let len = shape.iter().product();
                moments.push(Tensor::new(&shape, read_values(r, len)?)?);
            }
            let v = moments.split_off(n);
            optimizers.push((name, Adam::from_parts(ids, moments, v, step, lr)?));
        }
        Ok(Self {
            architecture,
            store,
            optimizers,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| fmt_err("name is not UTF-8"))
}

fn write_values<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    for &v in values {
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_values<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; n];
    r.read_f64_into::<LittleEndian>(&mut out)?;
    Ok(out)
}
