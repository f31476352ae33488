//! The TCGU binary container: little-endian, magic `TCGU`, a `u32` format
//! version, then a list of tagged sections.
//!
//! ```text
//! "TCGU" | version: u32 | count: u32 | { tag: [u8; 4] | len: u64 | payload }*
//! ```
//!
//! Tensors inside payloads carry a one-byte element width (4 or 8) followed
//! by `rows: u64`, `cols: u64` and the values, so a file written from `f32`
//! data round-trips bit-exactly.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TCGU";
pub const FORMAT_VERSION: u32 = 1;

/// A value that can be stored as one tagged section.
pub trait Section: Sized {
    const TAG: [u8; 4];
    fn encode(&self, enc: &mut Encoder);
    fn decode(dec: &mut Decoder<'_>) -> Result<Self>;
}

#[derive(Default)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn str(&mut self, s: &str) {
        self.usize(s.len());
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn usizes(&mut self, v: &[usize]) {
        self.usize(v.len());
        for &x in v {
            self.usize(x);
        }
    }

    pub fn bools(&mut self, v: &[bool]) {
        self.usize(v.len());
        self.buf.extend(v.iter().map(|&b| u8::from(b)));
    }

    pub fn scalar<T: Scalar>(&mut self, v: T) {
        if std::mem::size_of::<T>() == 4 {
            self.buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        } else {
            self.f64(v.as_f64());
        }
    }

    pub fn scalars<T: Scalar>(&mut self, v: &[T]) {
        self.u8(std::mem::size_of::<T>() as u8);
        self.usize(v.len());
        for &x in v {
            self.scalar(x);
        }
    }

    pub fn tensor<T: Scalar>(&mut self, t: &Tensor<T>) {
        self.u8(std::mem::size_of::<T>() as u8);
        self.usize(t.rows());
        self.usize(t.cols());
        for &x in t.data() {
            self.scalar(x);
        }
    }
}

pub struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
    section: String,
}

impl<'a> Decoder<'a> {
    fn new(buf: &'a [u8], section: String) -> Self {
        Self { buf, pos: 0, section }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "{}: truncated at byte {} (needed {n} more bytes, {} left)",
                self.section,
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn fail(&self, detail: impl std::fmt::Display) -> Error {
        Error::Checkpoint(format!("{}: {detail}", self.section))
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| self.fail(format!("length {v} does not fit in memory")))
    }

    /// A length that must be backed by at least `unit` bytes per element.
    fn len(&mut self, unit: usize) -> Result<usize> {
        let n = self.usize()?;
        if n.saturating_mul(unit) > self.buf.len() - self.pos {
            return Err(self.fail(format!("declared length {n} exceeds the remaining payload")));
        }
        Ok(n)
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.len(1)?;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| self.fail("invalid UTF-8 string"))
    }

    pub fn usizes(&mut self) -> Result<Vec<usize>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.usize()).collect()
    }

    pub fn bools(&mut self) -> Result<Vec<bool>> {
        let n = self.len(1)?;
        self.take(n)?
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                _ => Err(self.fail(format!("invalid boolean byte {b}"))),
            })
            .collect()
    }

    fn width(&mut self) -> Result<usize> {
        match self.u8()? {
            4 => Ok(4),
            8 => Ok(8),
            w => Err(self.fail(format!("unsupported element width {w}"))),
        }
    }

    fn scalar_of<T: Scalar>(&mut self, width: usize) -> Result<T> {
        Ok(if width == 4 {
            T::lit(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as f64)
        } else {
            T::lit(self.f64()?)
        })
    }

    pub fn scalar<T: Scalar>(&mut self) -> Result<T> {
        self.scalar_of(std::mem::size_of::<T>())
    }

    pub fn scalars<T: Scalar>(&mut self) -> Result<Vec<T>> {
        let w = self.width()?;
        let n = self.len(w)?;
        (0..n).map(|_| self.scalar_of(w)).collect()
    }

    pub fn tensor<T: Scalar>(&mut self) -> Result<Tensor<T>> {
        let w = self.width()?;
        let rows = self.usize()?;
        let cols = self.usize()?;
        let n = rows
            .checked_mul(cols)
            .filter(|n| n.saturating_mul(w) <= self.buf.len() - self.pos)
            .ok_or_else(|| self.fail(format!("tensor {rows}x{cols} exceeds the remaining payload")))?;
        let data = (0..n).map(|_| self.scalar_of(w)).collect::<Result<Vec<T>>>()?;
        Tensor::new(rows, cols, data)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.fail(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn tag_name(tag: &[u8; 4]) -> String {
    String::from_utf8_lossy(tag).into_owned()
}

/// An ordered collection of sections.
#[derive(Default, Debug, Clone)]
pub struct Checkpoint {
    sections: Vec<([u8; 4], Vec<u8>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores `value`, replacing any section with the same tag.
    pub fn insert<S: Section>(&mut self, value: &S) {
        let mut enc = Encoder::default();
        value.encode(&mut enc);
        self.sections.retain(|(t, _)| *t != S::TAG);
        self.sections.push((S::TAG, enc.buf));
    }

    pub fn with<S: Section>(mut self, value: &S) -> Self {
        self.insert(value);
        self
    }

    pub fn contains<S: Section>(&self) -> bool {
        self.sections.iter().any(|(t, _)| *t == S::TAG)
    }

    pub fn get<S: Section>(&self) -> Result<S> {
        let (_, payload) = self
            .sections
            .iter()
            .find(|(t, _)| *t == S::TAG)
            .ok_or_else(|| Error::Checkpoint(format!("missing section {}", tag_name(&S::TAG))))?;
        let mut dec = Decoder::new(payload, format!("section {}", tag_name(&S::TAG)));
        let v = S::decode(&mut dec)?;
        dec.finish()?;
        Ok(v)
    }

    pub fn tags(&self) -> Vec<String> {
        self.sections.iter().map(|(t, _)| tag_name(t)).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (tag, payload) in &self.sections {
            out.extend_from_slice(tag);
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut dec = Decoder::new(bytes, "header".into());
        if dec.take(4).map_err(|_| Error::Checkpoint("file too short for a header".into()))? != MAGIC {
            return Err(Error::Checkpoint("not a TCGU file (bad magic)".into()));
        }
        let version = dec.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let count = dec.u32()?;
        let mut sections = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let tag: [u8; 4] = dec.take(4)?.try_into().expect("4 bytes");
            let len = dec.usize()?;
            let payload = dec.take(len)?.to_vec();
            sections.push((tag, payload));
        }
        dec.finish()?;
        Ok(Self { sections })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Free-form JSON metadata (configs, fingerprints, provenance).
#[derive(Clone, Debug, PartialEq)]
pub struct Metadata(pub serde_json::Value);

impl Section for Metadata {
    const TAG: [u8; 4] = *b"META";

    fn encode(&self, enc: &mut Encoder) {
        enc.str(&self.0.to_string());
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self> {
        let s = dec.str()?;
        serde_json::from_str(&s).map(Metadata).map_err(|e| dec.fail(e))
    }
}

impl<T: Scalar> Section for Tensor<T> {
    const TAG: [u8; 4] = *b"TNSR";

    fn encode(&self, enc: &mut Encoder) {
        enc.tensor(self);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self> {
        dec.tensor()
    }
}
