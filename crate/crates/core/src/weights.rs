//! "ATSW" weight container shared by the semantic scorer, attention-score
//! heads, transformer blocks and reconstruction MLPs.
//!
//! Layout (little-endian): magic `ATSW`, `u32` layer count, then per layer
//! four `u32` dims `(out, in, kh, kw)`, `out·in·kh·kw` `f64` weights and
//! `out` `f64` biases. Dense layers are stored with `kh = kw = 1`.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::linalg::{Linear, Matrix};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"ATSW";

#[derive(Debug, Clone, PartialEq)]
pub struct WeightLayer {
    pub out: usize,
    pub inp: usize,
    pub kh: usize,
    pub kw: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl WeightLayer {
    pub fn new(
        out: usize,
        inp: usize,
        kh: usize,
        kw: usize,
        weights: Vec<f64>,
        biases: Vec<f64>,
    ) -> Result<Self> {
        if weights.len() != out * inp * kh * kw || biases.len() != out {
            return Err(Error::shape(format!(
                "layer ({out},{inp},{kh},{kw}) given {} weights and {} biases",
                weights.len(),
                biases.len()
            )));
        }
        Ok(Self {
            out,
            inp,
            kh,
            kw,
            weights,
            biases,
        })
    }

    pub fn from_linear(l: &Linear) -> Self {
        Self {
            out: l.out_dim(),
            inp: l.in_dim(),
            kh: 1,
            kw: 1,
            weights: l.weight.as_slice().to_vec(),
            biases: l.bias.clone(),
        }
    }

    pub fn to_linear(&self) -> Result<Linear> {
        if self.kh != 1 || self.kw != 1 {
            return Err(Error::shape(format!(
                "expected a dense layer, found a {}x{} kernel",
                self.kh, self.kw
            )));
        }
        Linear::new(
            Matrix::from_vec(self.out, self.inp, self.weights.clone())?,
            self.biases.clone(),
        )
    }
}

pub fn write_layers<W: Write>(mut w: W, layers: &[WeightLayer]) -> Result<()> {
    let u32_of = |v: usize| {
        u32::try_from(v).map_err(|_| Error::InvalidValue(format!("dimension {v} exceeds u32")))
    };
    let mut buf = Vec::new();
    buf.extend_from_slice(WEIGHTS_MAGIC);
    buf.extend_from_slice(&u32_of(layers.len())?.to_le_bytes());
    for l in layers {
        for d in [l.out, l.inp, l.kh, l.kw] {
            buf.extend_from_slice(&u32_of(d)?.to_le_bytes());
        }
        for v in l.weights.iter().chain(&l.biases) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_layers<R: Read>(mut r: R) -> Result<Vec<WeightLayer>> {
    let fmt = |msg: String| Error::Format {
        kind: "weight",
        msg,
    };
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = Cursor {
        bytes: &bytes,
        at: 0,
    };
    let magic = cur.take(4).ok_or_else(|| fmt("short header".into()))?;
    if magic != WEIGHTS_MAGIC {
        return Err(fmt("bad magic, expected ATSW".into()));
    }
    let count = cur.u32().ok_or_else(|| fmt("missing layer count".into()))? as usize;
    let mut layers = Vec::new();
    for i in 0..count {
        let mut dims = [0usize; 4];
        for d in dims.iter_mut() {
            *d = cur
                .u32()
                .ok_or_else(|| fmt(format!("truncated dims of layer {i}")))?
                as usize;
        }
        let [out, inp, kh, kw] = dims;
        let nw = out
            .checked_mul(inp)
            .and_then(|v| v.checked_mul(kh))
            .and_then(|v| v.checked_mul(kw))
            .ok_or_else(|| fmt(format!("layer {i} dimensions overflow")))?;
        let weights = cur
            .f64s(nw)
            .ok_or_else(|| fmt(format!("truncated weights of layer {i}")))?;
        let biases = cur
            .f64s(out)
            .ok_or_else(|| fmt(format!("truncated biases of layer {i}")))?;
        if weights.iter().chain(&biases).any(|v| !v.is_finite()) {
            return Err(fmt(format!("layer {i} has non-finite values")));
        }
        layers.push(WeightLayer::new(out, inp, kh, kw, weights, biases)?);
    }
    if cur.at != bytes.len() {
        return Err(fmt(format!("{} trailing bytes", bytes.len() - cur.at)));
    }
    Ok(layers)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.at.checked_add(n)?;
        let s = self.bytes.get(self.at..end)?;
        self.at = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Option<Vec<f64>> {
        let b = self.take(n.checked_mul(8)?)?;
        Some(
            b.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_roundtrip() {
        let l = WeightLayer::new(1, 2, 1, 1, vec![0.5, -1.0], vec![2.0]).unwrap();
        let mut buf = Vec::new();
        write_layers(&mut buf, std::slice::from_ref(&l)).unwrap();
        assert_eq!(&buf[..4], b"ATSW");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(buf.len(), 8 + 16 + 3 * 8);
        assert_eq!(read_layers(&buf[..]).unwrap(), vec![l]);
    }

    #[test]
    fn rejects_truncated_and_trailing() {
        let l = WeightLayer::new(1, 1, 3, 3, vec![0.0; 9], vec![0.0]).unwrap();
        let mut buf = Vec::new();
        write_layers(&mut buf, &[l]).unwrap();
        assert!(read_layers(&buf[..buf.len() - 1]).is_err());
        let mut longer = buf.clone();
        longer.push(0);
        assert!(read_layers(&longer[..]).is_err());
        assert!(read_layers(&b"ATSX\0\0\0\0"[..]).is_err());
    }
}
