//! Binary model checkpoints.
//!
//! Layout (integers little-endian):
//!
//! ```text
//! "DBCL"  version: u32  record count: u32
//! record: tag: u8, shape: u32 × n(tag), then f64 parameter data row-major
//! ```
//!
//! The first record is the input shape and the last one the loss; the
//! records in between are the ops in order. Parameter layers store the
//! weight matrix followed by the bias. The sketch flag is bit 7 of the tag.

use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{Arch, InputShape, LossKind, Model, Op, Param};

const MAGIC: &[u8; 4] = b"DBCL";
pub const VERSION: u32 = 1;

const TAG_DENSE: u8 = 1;
const TAG_CONV: u8 = 2;
const TAG_RELU: u8 = 3;
const TAG_POOL: u8 = 4;
const TAG_FLATTEN: u8 = 5;
const TAG_INPUT: u8 = 0x10;
const TAG_SOFTMAX: u8 = 0x11;
const TAG_SIGMOID: u8 = 0x12;
const SKETCH_BIT: u8 = 0x80;

pub fn encode(model: &Model) -> Vec<u8> {
    let arch = model.arch();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, arch.ops().len() as u32 + 2);

    let input = arch.input();
    out.push(TAG_INPUT);
    for v in [input.c, input.h, input.w] {
        put_u32(&mut out, v as u32);
    }

    let mut params = model.params().iter();
    for op in arch.ops() {
        let flag = if op.sketch_enabled() { SKETCH_BIT } else { 0 };
        match *op {
            Op::Dense { d_in, d_out, .. } => {
                out.push(TAG_DENSE | flag);
                put_u32(&mut out, d_out as u32);
                put_u32(&mut out, d_in as u32);
            }
            Op::Conv {
                c_in,
                c_out,
                k,
                padding,
                ..
            } => {
                out.push(TAG_CONV | flag);
                for v in [c_out, c_in, k, padding] {
                    put_u32(&mut out, v as u32);
                }
            }
            Op::Relu => out.push(TAG_RELU),
            Op::MaxPool2 => out.push(TAG_POOL),
            Op::Flatten => out.push(TAG_FLATTEN),
        }
        if op.weight_shape().is_some() {
            let p = params.next().expect("one Param per parameter op");
            for v in p.weight.data().iter().chain(&p.bias) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }

    out.push(match arch.loss() {
        LossKind::SoftmaxCrossEntropy => TAG_SOFTMAX,
        LossKind::SigmoidBce => TAG_SIGMOID,
    });
    out
}

pub fn decode(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(fmt_err("bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(fmt_err(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    if count < 2 {
        return Err(fmt_err("missing input or loss record"));
    }
    if r.u8()? != TAG_INPUT {
        return Err(fmt_err("first record is not the input shape"));
    }
    let input = InputShape::image(r.usize()?, r.usize()?, r.usize()?);

    let mut ops = Vec::with_capacity(count - 2);
    let mut params = Vec::new();
    for _ in 0..count - 2 {
        let tag = r.u8()?;
        let sketch = tag & SKETCH_BIT != 0;
        let op = match tag & !SKETCH_BIT {
            TAG_DENSE => {
                let d_out = r.usize()?;
                let d_in = r.usize()?;
                Op::Dense {
                    d_in,
                    d_out,
                    sketch,
                }
            }
            TAG_CONV => Op::Conv {
                c_out: r.usize()?,
                c_in: r.usize()?,
                k: r.usize()?,
                padding: r.usize()?,
                sketch,
            },
            TAG_RELU => Op::Relu,
            TAG_POOL => Op::MaxPool2,
            TAG_FLATTEN => Op::Flatten,
            other => return Err(fmt_err(format!("unknown layer tag {other:#x}"))),
        };
        if let Some((rows, cols)) = op.weight_shape() {
            let weight = Matrix::new(rows, cols, r.f64s(rows * cols)?)?;
            let bias = r.f64s(rows)?;
            params.push(Param { weight, bias });
        }
        ops.push(op);
    }
    let loss = match r.u8()? {
        TAG_SOFTMAX => LossKind::SoftmaxCrossEntropy,
        TAG_SIGMOID => LossKind::SigmoidBce,
        other => return Err(fmt_err(format!("unknown loss tag {other:#x}"))),
    };
    if r.pos != bytes.len() {
        return Err(fmt_err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Model::new(Arch::new(input, ops, loss)?, params)
}

pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode(model))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    decode(&std::fs::read(path)?)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn fmt_err(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        detail: detail.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| fmt_err("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| fmt_err("size overflow"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
