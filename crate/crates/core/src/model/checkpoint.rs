//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DFLM" | version u32 | head_len u32 | init tag u8, init arg f64
//! | input rank u32, dims u32* | layer count u32
//! | per layer: kind u8, fields u32*
//! | tensor count u32 | per tensor: rank u32, dims u32*, values f64*
//! ```

use std::io::{Read, Write};

use super::{InitScheme, LayerSpec, Model, ModelError};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DFLM";
pub const CHECKPOINT_VERSION: u32 = 1;

const DENSE: u8 = 0;
const CONV: u8 = 1;
const RELU: u8 = 2;
const MAXPOOL: u8 = 3;
const FLATTEN: u8 = 4;

fn put_u32<W: Write>(w: &mut W, v: usize) -> Result<(), ModelError> {
    let v = u32::try_from(v).map_err(|_| ModelError::Checkpoint(format!("{v} exceeds u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_checkpoint<W: Write>(model: &Model, mut w: W) -> Result<(), ModelError> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    put_u32(&mut w, model.head_len)?;
    let (tag, arg) = match model.init {
        InitScheme::KaimingUniform => (0u8, 0.0),
        InitScheme::Uniform(a) => (1u8, a),
    };
    w.write_all(&[tag])?;
    w.write_all(&arg.to_le_bytes())?;

    put_u32(&mut w, model.input_shape.len())?;
    for d in &model.input_shape {
        put_u32(&mut w, *d)?;
    }
    put_u32(&mut w, model.layers.len())?;
    for layer in &model.layers {
        let (kind, fields): (u8, Vec<usize>) = match layer.spec {
            LayerSpec::Dense { inputs, outputs } => (DENSE, vec![inputs, outputs]),
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
            } => (CONV, vec![in_channels, out_channels, kernel, stride, pad]),
            LayerSpec::Relu => (RELU, vec![]),
            LayerSpec::MaxPool { size, stride } => (MAXPOOL, vec![size, stride]),
            LayerSpec::Flatten => (FLATTEN, vec![]),
        };
        w.write_all(&[kind])?;
        for f in fields {
            put_u32(&mut w, f)?;
        }
    }
    put_u32(&mut w, model.param_count())?;
    for p in model.params() {
        put_u32(&mut w, p.shape().len())?;
        for d in p.shape() {
            put_u32(&mut w, *d)?;
        }
        for v in p.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
    offset: usize,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N], ModelError> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|e| {
            ModelError::Checkpoint(format!("read of {N} bytes at offset {}: {e}", self.offset))
        })?;
        self.offset += N;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<usize, ModelError> {
        Ok(u32::from_le_bytes(self.bytes()?) as usize)
    }

    fn f64(&mut self) -> Result<f64, ModelError> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }

    fn u32s(&mut self, n: usize) -> Result<Vec<usize>, ModelError> {
        (0..n).map(|_| self.u32()).collect()
    }
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<Model, ModelError> {
    let mut r = Reader { inner: r, offset: 0 };
    if &r.bytes::<4>()? != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(ModelError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let head_len = r.u32()?;
    let [tag] = r.bytes::<1>()?;
    let arg = r.f64()?;
    let init = match tag {
        0 => InitScheme::KaimingUniform,
        1 => InitScheme::Uniform(arg),
        t => return Err(ModelError::Checkpoint(format!("unknown init tag {t}"))),
    };
    let rank = r.u32()?;
    let input_shape = r.u32s(rank)?;
    let layer_count = r.u32()?;
    let mut specs = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let at = r.offset;
        let [kind] = r.bytes::<1>()?;
        let spec = match kind {
            DENSE => {
                let f = r.u32s(2)?;
                LayerSpec::dense(f[0], f[1])
            }
            CONV => {
                let f = r.u32s(5)?;
                LayerSpec::Conv {
                    in_channels: f[0],
                    out_channels: f[1],
                    kernel: f[2],
                    stride: f[3],
                    pad: f[4],
                }
            }
            RELU => LayerSpec::Relu,
            MAXPOOL => {
                let f = r.u32s(2)?;
                LayerSpec::MaxPool {
                    size: f[0],
                    stride: f[1],
                }
            }
            FLATTEN => LayerSpec::Flatten,
            k => {
                return Err(ModelError::Checkpoint(format!(
                    "unknown layer kind {k} at offset {at}"
                )))
            }
        };
        specs.push(spec);
    }
    let tensor_count = r.u32()?;
    let mut params = Vec::with_capacity(tensor_count);
    for _ in 0..tensor_count {
        let rank = r.u32()?;
        let shape = r.u32s(rank)?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
        params.push(Tensor::new(shape, data)?);
    }
    let mut trailing = [0u8; 1];
    if r.inner.read(&mut trailing)? != 0 {
        return Err(ModelError::Checkpoint(format!(
            "trailing bytes after offset {}",
            r.offset
        )));
    }
    Model::from_parts(input_shape, specs, params, head_len, init)
}
