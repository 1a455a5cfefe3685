//! Little-endian binary container shared by datasets and checkpoints.
//!
//! ```text
//! magic    [u8; 8]  "AQEWMMSE"
//! version  u16      FORMAT_VERSION
//! kind     u16      1 = dataset, 2 = checkpoint
//! reserved u32      0
//! json_len u64
//! json     [u8; json_len]   UTF-8 metadata
//! body     kind-specific
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 8] = *b"AQEWMMSE";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u16)]
pub enum Kind {
    Dataset = 1,
    Checkpoint = 2,
}

impl Kind {
    fn from_u16(v: u16) -> Result<Self> {
        match v {
            1 => Ok(Kind::Dataset),
            2 => Ok(Kind::Checkpoint),
            other => Err(Error::Format(format!("unknown container kind {other}"))),
        }
    }
}

pub struct ContainerWriter<W: Write> {
    inner: W,
}

impl<W: Write> ContainerWriter<W> {
    pub fn new(mut inner: W, kind: Kind, json: &str) -> Result<Self> {
        inner.write_all(&MAGIC)?;
        inner.write_all(&FORMAT_VERSION.to_le_bytes())?;
        inner.write_all(&(kind as u16).to_le_bytes())?;
        inner.write_all(&0u32.to_le_bytes())?;
        inner.write_all(&(json.len() as u64).to_le_bytes())?;
        inner.write_all(json.as_bytes())?;
        Ok(Self { inner })
    }

    pub fn u8(&mut self, v: u8) -> Result<()> {
        Ok(self.inner.write_all(&[v])?)
    }

    pub fn u16(&mut self, v: u16) -> Result<()> {
        Ok(self.inner.write_all(&v.to_le_bytes())?)
    }

    pub fn u32(&mut self, v: u32) -> Result<()> {
        Ok(self.inner.write_all(&v.to_le_bytes())?)
    }

    pub fn u64(&mut self, v: u64) -> Result<()> {
        Ok(self.inner.write_all(&v.to_le_bytes())?)
    }

    pub fn bytes(&mut self, v: &[u8]) -> Result<()> {
        Ok(self.inner.write_all(v)?)
    }

    pub fn f64s(&mut self, vals: &[f64]) -> Result<()> {
        for v in vals {
            self.inner.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// A named tensor: `u16 name_len, name, u8 ndim, u64 dims.., f64 data..`.
    pub fn tensor(&mut self, name: &str, shape: &[usize], data: &[f64]) -> Result<()> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.u16(name.len() as u16)?;
        self.bytes(name.as_bytes())?;
        self.u8(shape.len() as u8)?;
        for &d in shape {
            self.u64(d as u64)?;
        }
        self.f64s(data)
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

pub struct ContainerReader<R: Read> {
    inner: R,
    pub kind: Kind,
    pub json: String,
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("truncated file".into())
    } else {
        Error::Io(e)
    }
}

impl<R: Read> ContainerReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        inner.read_exact(&mut magic).map_err(truncated)?;
        if magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:02x?}")));
        }
        let mut rd = Self {
            inner,
            kind: Kind::Dataset,
            json: String::new(),
        };
        let version = rd.u16()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported version {version}, expected {FORMAT_VERSION}"
            )));
        }
        rd.kind = Kind::from_u16(rd.u16()?)?;
        let _reserved = rd.u32()?;
        let len = rd.u64()? as usize;
        if len > 1 << 28 {
            return Err(Error::Format(format!("metadata length {len} is implausible")));
        }
        let mut buf = vec![0u8; len];
        rd.inner.read_exact(&mut buf).map_err(truncated)?;
        rd.json = String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))?;
        Ok(rd)
    }

    pub fn expect_kind(&self, kind: Kind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format(format!("expected {kind:?}, found {:?}", self.kind)));
        }
        Ok(())
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner.read_exact(&mut b).map_err(truncated)?;
        Ok(b)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut buf = vec![0u8; n * 8];
        self.inner.read_exact(&mut buf).map_err(truncated)?;
        Ok(buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn tensor(&mut self) -> Result<(String, Vec<usize>, Vec<f64>)> {
        let name_len = self.u16()? as usize;
        let mut name = vec![0u8; name_len];
        self.inner.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        let ndim = self.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u64()? as usize);
        }
        let len: usize = shape.iter().product();
        if len > 1 << 30 {
            return Err(Error::Format(format!("tensor {name} is implausibly large")));
        }
        let data = self.f64s(len)?;
        Ok((name, shape, data))
    }

    /// Errors unless the stream is exhausted.
    pub fn expect_end(&mut self) -> Result<()> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b)? {
            0 => Ok(()),
            _ => Err(Error::Format("trailing bytes after body".into())),
        }
    }
}

/// Path with a `.partial` suffix appended.
pub fn partial_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".partial");
    PathBuf::from(s)
}

/// Writes through `<path>.partial` and renames on success, so a failed
/// write never leaves a truncated file under the final name.
pub fn write_atomically(
    path: &Path,
    f: impl FnOnce(&mut BufWriter<File>) -> Result<()>,
) -> Result<()> {
    let tmp = partial_path(path);
    let mut w = BufWriter::new(File::create(&tmp)?);
    f(&mut w)?;
    w.flush()?;
    drop(w);
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn open_reader(path: &Path) -> Result<ContainerReader<BufReader<File>>> {
    ContainerReader::new(BufReader::new(File::open(path)?))
}

/// Serde adapter writing non-finite floats as the strings `"inf"`,
/// `"-inf"` and `"nan"`, which plain JSON numbers cannot carry.
pub mod json_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("not a float: {other:?}"))),
            },
        }
    }
}
