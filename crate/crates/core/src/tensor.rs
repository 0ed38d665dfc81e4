//! Dense row-major `f64` tensors and the `ETNS` binary container.
//!
//! Layout of one serialized tensor:
//!
//! ```text
//! b"ETNS" | u8 version (=1) | u8 rank | rank x u32 LE dims | f64 LE payload
//! ```
//!
//! Several tensors may be concatenated back to back in one file; readers
//! consume them sequentially.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{EtcError, Result};

pub const ETNS_MAGIC: &[u8; 4] = b"ETNS";
pub const ETNS_VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(EtcError::Dimension(format!(
                "shape {shape:?} has a zero-sized dimension"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(EtcError::Dimension(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Marks the tensor as a trainable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(EtcError::Usage(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(EtcError::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the stored gradient, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(EtcError::Dimension(format!(
                "gradient of length {} for tensor of {} values",
                g.len(),
                self.data.len()
            )));
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    /// Sample `index` along axis 0 (keeps the leading axis with size 1).
    pub fn select_first(&self, index: usize) -> Result<Tensor> {
        let n = *self.shape.first().unwrap_or(&0);
        if index >= n {
            return Err(EtcError::Dimension(format!(
                "index {index} out of range for leading dim {n}"
            )));
        }
        let stride = self.data.len() / n;
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor::new(
            &shape,
            self.data[index * stride..(index + 1) * stride].to_vec(),
        )
    }

    /// Concatenates tensors along axis 0.
    pub fn concat_first(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| EtcError::Usage("concat of zero tensors".into()))?;
        let tail = &first.shape[1..];
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(EtcError::Dimension(format!(
                    "cannot concat {:?} with {:?}",
                    first.shape, p.shape
                )));
            }
            lead += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = lead;
        Tensor::new(&shape, data)
    }

    /// FNV-1a over shape and the bit patterns of the values.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for d in &self.shape {
            eat(&(*d as u64).to_le_bytes());
        }
        for v in &self.data {
            eat(&v.to_bits().to_le_bytes());
        }
        h
    }

    pub fn write_etns<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let rank = u8::try_from(self.shape.len()).map_err(|_| {
            std::io::Error::new(std::io::ErrorKind::InvalidInput, "rank exceeds 255")
        })?;
        let mut buf = Vec::with_capacity(6 + 4 * self.shape.len() + 8 * self.data.len());
        buf.extend_from_slice(ETNS_MAGIC);
        buf.push(ETNS_VERSION);
        buf.push(rank);
        for &d in &self.shape {
            let d = u32::try_from(d).map_err(|_| {
                std::io::Error::new(std::io::ErrorKind::InvalidInput, "dimension exceeds u32")
            })?;
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    /// Reads one tensor. Returns `Ok(None)` on a clean end of stream.
    pub fn read_etns<R: Read>(r: &mut R) -> Result<Option<Tensor>> {
        let mut magic = [0u8; 4];
        let got = read_up_to(r, &mut magic)?;
        if got == 0 {
            return Ok(None);
        }
        if got < 4 || &magic != ETNS_MAGIC {
            return Err(EtcError::Format("bad ETNS magic".into()));
        }
        let mut head = [0u8; 2];
        read_exact(r, &mut head, "header")?;
        if head[0] != ETNS_VERSION {
            return Err(EtcError::Format(format!(
                "unsupported ETNS version {}",
                head[0]
            )));
        }
        let rank = head[1] as usize;
        if rank == 0 {
            return Err(EtcError::Format("ETNS rank 0".into()));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut d = [0u8; 4];
            read_exact(r, &mut d, "dims")?;
            shape.push(u32::from_le_bytes(d) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut payload = vec![0u8; numel * 8];
        read_exact(r, &mut payload, "payload")?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Tensor::new(&shape, data)
            .map(Some)
            .map_err(|e| EtcError::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_etns(&mut buf)
            .map_err(|e| EtcError::io(path, e))?;
        fs::write(path, buf).map_err(|e| EtcError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Tensor> {
        let bytes = fs::read(path).map_err(|e| EtcError::io(path, e))?;
        let mut cursor = bytes.as_slice();
        let t = Tensor::read_etns(&mut cursor)?
            .ok_or_else(|| EtcError::Format(format!("{} is empty", path.display())))?;
        if !cursor.is_empty() {
            return Err(EtcError::Format(format!(
                "{} has {} trailing bytes",
                path.display(),
                cursor.len()
            )));
        }
        Ok(t)
    }
}

fn read_up_to<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(EtcError::Format(e.to_string())),
        }
    }
    Ok(filled)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    let got = read_up_to(r, buf)?;
    if got < buf.len() {
        return Err(EtcError::Format(format!("truncated ETNS {what}")));
    }
    Ok(())
}

/// Splits `shape` around `axis` into `(outer, len, inner)`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
