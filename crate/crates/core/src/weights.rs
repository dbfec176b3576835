//! Little-endian tensor container shared by detector (`NPMD`) and
//! embedder (`NPFW`) weight files.
//!
//! Layout:
//!
//! ```text
//! magic        [u8; 4]
//! version      u16            (= 1)
//! n_tensors    u32
//! repeated n_tensors times:
//!   name_len   u16, name UTF-8 bytes
//!   dtype      u8             (0 = f32, 1 = q8)
//!   scale      f32            (1.0 for f32)
//!   offset     f32            (0.0 for f32; q8 value = offset + q * scale)
//!   ndim       u8, dims u32 x ndim
//!   payload    numel x 4 bytes (f32) or numel x 1 byte (q8)
//! ```

use std::collections::BTreeMap;

use thiserror::Error;

pub const DETECTOR_MAGIC: [u8; 4] = *b"NPMD";
pub const EMBEDDER_MAGIC: [u8; 4] = *b"NPFW";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum WeightsError {
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },
    #[error("unsupported weight file version {0}")]
    UnsupportedVersion(u16),
    #[error("weight file truncated at byte {0}")]
    Truncated(usize),
    #[error("unknown dtype tag {0}")]
    BadDtype(u8),
    #[error("tensor name is not valid UTF-8")]
    BadName,
    #[error("missing tensor {0:?}")]
    MissingTensor(String),
    #[error("tensor {name:?} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("tensor {0:?} contains non-finite values")]
    NonFinite(String),
    #[error("invalid topology: {0}")]
    Topology(String),
}

/// Minimum quantization step, used for constant tensors.
pub const MIN_SCALE: f32 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    Q8 {
        scale: f32,
        offset: f32,
        values: Vec<u8>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn f32(shape: Vec<usize>, values: &[f64]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), values.len());
        Self {
            shape,
            data: TensorData::F32(values.iter().map(|&v| v as f32).collect()),
        }
    }

    /// Per-tensor affine 8-bit quantization over `[min, max]`.
    pub fn q8(shape: Vec<usize>, values: &[f64]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), values.len());
        let (scale, offset, q) = quantize_affine(values);
        Self {
            shape,
            data: TensorData::Q8 {
                scale,
                offset,
                values: q,
            },
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::Q8 {
                scale,
                offset,
                values,
            } => values
                .iter()
                .map(|&q| *offset as f64 + q as f64 * *scale as f64)
                .collect(),
        }
    }

    pub fn payload_bytes(&self) -> usize {
        match &self.data {
            TensorData::F32(v) => v.len() * 4,
            TensorData::Q8 { values, .. } => values.len(),
        }
    }
}

/// Returns `(scale, offset, codes)`; `offset + code * scale` reconstructs
/// each value to within half a step.
pub fn quantize_affine(values: &[f64]) -> (f32, f32, Vec<u8>) {
    if values.is_empty() {
        return (MIN_SCALE, 0.0, Vec::new());
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min) as f32;
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max) as f32;
    let scale = ((hi - lo) / 255.0).max(MIN_SCALE);
    let codes = values
        .iter()
        .map(|&v| ((v as f32 - lo) / scale).round().clamp(0.0, 255.0) as u8)
        .collect();
    (scale, lo, codes)
}

/// Ordered name -> tensor map.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorFile {
    pub tensors: BTreeMap<String, Tensor>,
}

impl TensorFile {
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str, shape: &[usize]) -> Result<Vec<f64>, WeightsError> {
        let t = self
            .tensors
            .get(name)
            .ok_or_else(|| WeightsError::MissingTensor(name.to_string()))?;
        if t.shape != shape {
            return Err(WeightsError::ShapeMismatch {
                name: name.to_string(),
                found: t.shape.clone(),
                expected: shape.to_vec(),
            });
        }
        let v = t.to_f64();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(WeightsError::NonFinite(name.to_string()));
        }
        Ok(v)
    }

    pub fn get_any(&self, name: &str) -> Result<&Tensor, WeightsError> {
        self.tensors
            .get(name)
            .ok_or_else(|| WeightsError::MissingTensor(name.to_string()))
    }

    pub fn payload_bytes(&self) -> usize {
        self.tensors.values().map(Tensor::payload_bytes).sum()
    }

    pub fn to_bytes(&self, magic: [u8; 4]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&magic);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let (tag, scale, offset) = match &t.data {
                TensorData::F32(_) => (0u8, 1.0f32, 0.0f32),
                TensorData::Q8 { scale, offset, .. } => (1u8, *scale, *offset),
            };
            out.push(tag);
            out.extend_from_slice(&scale.to_le_bytes());
            out.extend_from_slice(&offset.to_le_bytes());
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::Q8 { values, .. } => out.extend_from_slice(values),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], magic: [u8; 4]) -> Result<Self, WeightsError> {
        let mut r = Reader { bytes, pos: 0 };
        let found: [u8; 4] = r.take(4)?.try_into().unwrap();
        if found != magic {
            return Err(WeightsError::BadMagic {
                found,
                expected: magic,
            });
        }
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(WeightsError::UnsupportedVersion(version));
        }
        let n = r.u32()? as usize;
        let mut file = TensorFile::default();
        for _ in 0..n {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| WeightsError::BadName)?
                .to_string();
            let tag = r.take(1)?[0];
            let scale = r.f32()?;
            let offset = r.f32()?;
            let ndim = r.take(1)?[0] as usize;
            let shape = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let numel: usize = shape.iter().product();
            let data = match tag {
                0 => TensorData::F32(
                    r.take(numel * 4)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                1 => TensorData::Q8 {
                    scale,
                    offset,
                    values: r.take(numel)?.to_vec(),
                },
                other => return Err(WeightsError::BadDtype(other)),
            };
            file.insert(name, Tensor { shape, data });
        }
        Ok(file)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WeightsError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(WeightsError::Truncated(self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16, WeightsError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, WeightsError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32, WeightsError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
