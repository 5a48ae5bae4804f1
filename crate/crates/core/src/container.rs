//! Named-array binary container (`.npzlike`).
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic    8 bytes  "NPZLIKE\0"
//! version  u32      1
//! count    u32      number of arrays
//! per array:
//!   name_len u32, name (UTF-8)
//!   dtype    u8     0 = f32, 1 = f64, 2 = u8
//!   ndim     u32, then ndim x u64 dims
//!   data     product(dims) elements
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"NPZLIKE\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl ArrayData {
    fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::U8(v) => v.len(),
        }
    }

    fn code(&self) -> u8 {
        match self {
            ArrayData::F32(_) => 0,
            ArrayData::F64(_) => 1,
            ArrayData::U8(_) => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl Array {
    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self {
            shape,
            data: ArrayData::F32(data),
        }
    }

    pub fn bytes(data: Vec<u8>) -> Self {
        Self {
            shape: vec![data.len()],
            data: ArrayData::U8(data),
        }
    }
}

/// Arrays keyed by name; iteration order is sorted by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    arrays: BTreeMap<String, Array>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, array: Array) -> Result<()> {
        let n: usize = array.shape.iter().product();
        if n != array.data.len() {
            return Err(Error::mismatch(format!(
                "array shape {:?} holds {n} values, got {}",
                array.shape,
                array.data.len()
            )));
        }
        self.arrays.insert(name.into(), array);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Array> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing array `{name}`")))
    }

    pub fn f32(&self, name: &str) -> Result<(&[usize], &[f32])> {
        let a = self.get(name)?;
        match &a.data {
            ArrayData::F32(v) => Ok((&a.shape, v)),
            _ => Err(Error::Format(format!("array `{name}` is not f32"))),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match &self.get(name)?.data {
            ArrayData::U8(v) => Ok(v),
            _ => Err(Error::Format(format!("array `{name}` is not u8"))),
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.arrays.len() as u32).to_le_bytes())?;
        for (name, a) in &self.arrays {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[a.data.code()])?;
            w.write_all(&(a.shape.len() as u32).to_le_bytes())?;
            for &d in &a.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            match &a.data {
                ArrayData::F32(v) => {
                    for x in v {
                        w.write_all(&x.to_le_bytes())?;
                    }
                }
                ArrayData::F64(v) => {
                    for x in v {
                        w.write_all(&x.to_le_bytes())?;
                    }
                }
                ArrayData::U8(v) => w.write_all(v)?,
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not an npzlike container".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let count = read_u32(r)?;
        let mut out = Archive::new();
        for _ in 0..count {
            let len = read_u32(r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("array name is not UTF-8".into()))?;
            let mut code = [0u8; 1];
            r.read_exact(&mut code)?;
            let ndim = read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let data = match code[0] {
                0 => ArrayData::F32(read_vec(r, n, 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
                1 => ArrayData::F64(read_vec(r, n, 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
                2 => ArrayData::U8(read_vec(r, n, 1)?),
                c => return Err(Error::Format(format!("unknown dtype code {c}"))),
            };
            out.insert(name, Array { shape, data })?;
        }
        Ok(out)
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

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_vec(r: &mut impl Read, n: usize, width: usize) -> Result<Vec<u8>> {
    let mut v = vec![0u8; n * width];
    r.read_exact(&mut v)?;
    Ok(v)
}
