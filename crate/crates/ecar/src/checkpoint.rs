//! Checkpoint wire format.
//!
//! Little-endian binary layout:
//!
//! ```text
//! magic "ECAR" | u32 version | u32 S | S x (u32 h, u32 w) | S x f32 boundary
//! repeated records { u32 name_len | name bytes | u32 rank | rank x u32 dims | f32 payload }
//! u64 rng_state | u64 step
//! ```
//!
//! Records carry every named tensor (model parameters, buffers, optimizer
//! moments, trainer state); the reader consumes records until exactly the
//! 16 trailing bytes remain. Round-trips are bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{EcarError, Result};
use crate::pyramid::StageSchedule;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ECAR";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub resolutions: Vec<(u32, u32)>,
    pub boundaries: Vec<f32>,
    /// Ordered named tensors; order is preserved across save/load.
    pub tensors: Vec<(String, Tensor)>,
    pub rng_state: u64,
    pub step: u64,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Schedule carried by the checkpoint, with a fresh step allocation.
    pub fn schedule(&self, total_steps: usize) -> Result<StageSchedule> {
        let res = self.resolutions.iter().map(|&(h, w)| (h as usize, w as usize)).collect();
        StageSchedule::from_parts(res, self.boundaries.clone(), total_steps)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.resolutions.len() as u32).to_le_bytes());
        for &(h, w) in &self.resolutions {
            out.extend_from_slice(&h.to_le_bytes());
            out.extend_from_slice(&w.to_le_bytes());
        }
        for &b in &self.boundaries {
            out.extend_from_slice(&b.to_le_bytes());
        }
        for (name, tensor) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
            for &d in tensor.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.rng_state.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(EcarError::validation("bad checkpoint magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(EcarError::validation(format!("unsupported checkpoint version {version}")));
        }
        let stages = r.u32()? as usize;
        if stages == 0 || stages > 16 {
            return Err(EcarError::validation(format!("implausible stage count {stages}")));
        }
        let mut resolutions = Vec::with_capacity(stages);
        for _ in 0..stages {
            let h = r.u32()?;
            let w = r.u32()?;
            resolutions.push((h, w));
        }
        let mut boundaries = Vec::with_capacity(stages);
        for _ in 0..stages {
            boundaries.push(f32::from_le_bytes(r.take(4)?.try_into().unwrap()));
        }
        let mut tensors = Vec::new();
        while r.remaining() > 16 {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| EcarError::validation("tensor name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(EcarError::validation(format!("implausible tensor rank {rank}")));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32()? as usize);
            }
            let count: usize = dims.iter().product();
            let raw = r.take(count * 4)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, Tensor::new(dims, data)));
        }
        if r.remaining() != 16 {
            return Err(EcarError::validation("truncated checkpoint trailer"));
        }
        let rng_state = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let step = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
        Ok(Checkpoint { resolutions, boundaries, tensors, rng_state, step })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode();
        let mut f = std::fs::File::create(path).map_err(|e| EcarError::io(path, e))?;
        f.write_all(&bytes).map_err(|e| EcarError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut f = std::fs::File::open(path).map_err(|e| EcarError::io(path, e))?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes).map_err(|e| EcarError::io(path, e))?;
        Checkpoint::decode(&bytes)
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

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(EcarError::validation("truncated checkpoint"));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn sample_checkpoint() -> Checkpoint {
        let mut rng = Rng::new(3);
        Checkpoint {
            resolutions: vec![(8, 8), (16, 16), (32, 32)],
            boundaries: vec![1.0 / 3.0, 2.0 / 3.0, 1.0],
            tensors: vec![
                ("ar/w".into(), Tensor::randn(vec![4, 6], 0.3, &mut rng)),
                ("vel/b".into(), Tensor::randn(vec![2, 2, 2], 1.0, &mut rng)),
                ("scalar".into(), Tensor::scalar(-7.25)),
            ],
            rng_state: 0xDEADBEEF12345678,
            step: 999,
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let ck = sample_checkpoint();
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(ck, back);
        // and encoding again yields identical bytes
        assert_eq!(bytes, back.encode());
    }

    #[test]
    fn magic_is_validated() {
        let mut bytes = sample_checkpoint().encode();
        bytes[0] = b'X';
        assert!(Checkpoint::decode(&bytes).is_err());
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = sample_checkpoint().encode();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn layout_prefix_is_as_documented() {
        let ck = sample_checkpoint();
        let bytes = ck.encode();
        assert_eq!(&bytes[0..4], b"ECAR");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        // trailer
        let n = bytes.len();
        assert_eq!(u64::from_le_bytes(bytes[n - 8..].try_into().unwrap()), 999);
        assert_eq!(
            u64::from_le_bytes(bytes[n - 16..n - 8].try_into().unwrap()),
            0xDEADBEEF12345678
        );
    }
}
