//! Named-tensor model container.
//!
//! ```text
//! "XBMT" | version u16 | block count u32
//! | per block: name_len u16 | name utf8 | dtype u8 | ndim u8 | dims u64[ndim]
//! |            offset u64 | byte_len u64
//! | payload (offsets are relative to its start)
//! ```
//!
//! All integers and tensor elements are little-endian.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::error::{HarnessError, Result};

pub const MAGIC: &[u8; 4] = b"XBMT";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
    I64,
    U8,
}

impl DType {
    fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
            DType::I64 => 2,
            DType::U8 => 3,
        }
    }

    fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            2 => Some(DType::I64),
            3 => Some(DType::U8),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 | DType::I64 => 8,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Little-endian element bytes.
    pub bytes: Vec<u8>,
}

impl Block {
    pub fn f32(shape: Vec<usize>, data: &[f32]) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            dtype: DType::F32,
            shape,
            bytes: data.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    pub fn bytes(data: &[u8]) -> Self {
        Self {
            dtype: DType::U8,
            shape: vec![data.len()],
            bytes: data.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f32(&self) -> Result<Vec<f32>> {
        if self.dtype != DType::F32 {
            return Err(HarnessError::Model(format!(
                "expected f32 block, found {:?}",
                self.dtype
            )));
        }
        Ok(self
            .bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Ordered map of named blocks.
pub type Blocks = BTreeMap<String, Block>;

pub fn encode(blocks: &Blocks) -> Result<Vec<u8>> {
    let mut header = Vec::new();
    header.extend_from_slice(MAGIC);
    header.extend_from_slice(&VERSION.to_le_bytes());
    header.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    let mut payload = Vec::new();
    for (name, b) in blocks {
        if b.bytes.len() != b.len() * b.dtype.size() {
            return Err(HarnessError::Model(format!(
                "block {name} has inconsistent byte length"
            )));
        }
        let name_len =
            u16::try_from(name.len()).map_err(|_| HarnessError::Model(format!("block name too long: {name}")))?;
        header.extend_from_slice(&name_len.to_le_bytes());
        header.extend_from_slice(name.as_bytes());
        header.push(b.dtype.tag());
        header.push(
            u8::try_from(b.shape.len()).map_err(|_| HarnessError::Model(format!("block {name} has too many axes")))?,
        );
        for &d in &b.shape {
            header.extend_from_slice(&(d as u64).to_le_bytes());
        }
        header.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        header.extend_from_slice(&(b.bytes.len() as u64).to_le_bytes());
        payload.extend_from_slice(&b.bytes);
    }
    header.extend_from_slice(&payload);
    Ok(header)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| HarnessError::Model("model file is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Blocks> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(HarnessError::Model("not a model container (bad magic)".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(HarnessError::Model(format!(
            "unsupported model container version {version}"
        )));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| HarnessError::Model("block name is not utf-8".into()))?;
        let dtype =
            DType::from_tag(r.u8()?).ok_or_else(|| HarnessError::Model(format!("block {name} has unknown dtype")))?;
        let ndim = r.u8()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let offset = r.u64()? as usize;
        let len = r.u64()? as usize;
        entries.push((name, dtype, shape, offset, len));
    }
    let payload = &bytes[r.pos..];
    let mut blocks = Blocks::new();
    for (name, dtype, shape, offset, len) in entries {
        let expected = shape
            .iter()
            .try_fold(dtype.size(), |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| HarnessError::Model(format!("block {name} shape overflows")))?;
        if len != expected {
            return Err(HarnessError::Model(format!(
                "block {name} holds {len} bytes but shape {shape:?} needs {expected}"
            )));
        }
        let end = offset
            .checked_add(len)
            .filter(|&e| e <= payload.len())
            .ok_or_else(|| HarnessError::Model(format!("block {name} extends past the end of the file")))?;
        let block = Block {
            dtype,
            shape,
            bytes: payload[offset..end].to_vec(),
        };
        if blocks.insert(name.clone(), block).is_some() {
            return Err(HarnessError::Model(format!("duplicate block {name}")));
        }
    }
    Ok(blocks)
}

pub fn save(blocks: &Blocks, path: &Path) -> Result<()> {
    let bytes = encode(blocks)?;
    let mut f = std::fs::File::create(path).map_err(|e| HarnessError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| HarnessError::io(path, e))
}

pub fn load(path: &Path) -> Result<Blocks> {
    let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    decode(&bytes)
}
