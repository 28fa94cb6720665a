//! `NDN1` stack serialization (little-endian).
//!
//! ```text
//! "NDN1" | version u16 | layer count u32
//! per layer: kind u8 | hyperparameters (u32 each) | tensors
//! tensor: rank u32 | dims u32 × rank | f32 data
//! ```
//!
//! Kind tags and hyperparameters:
//!
//! | tag | layer      | hyperparameters         | tensors |
//! |-----|------------|-------------------------|---------|
//! | 0   | Conv1D     | kernel, c_in, c_out     | w, b    |
//! | 1   | MaxPool1D  | width                   |         |
//! | 2   | UpSample1D | factor                  |         |
//! | 3   | Dense      | in, out                 | w, b    |
//! | 4   | ReLU       |                         |         |
//! | 5   | Sigmoid    |                         |         |
//! | 6   | Linear     |                         |         |
//! | 7   | Flatten    |                         |         |
//! | 8   | Reshape    | rank, dims × rank       |         |

use std::io::{self, Read, Write};

use super::layers::{Activation, Layer};
use super::sequential::Sequential;
use super::tensor::{Scalar, Tensor};
use super::NetError;

const MAGIC: &[u8; 4] = b"NDN1";
const VERSION: u16 = 1;

fn put_u32<W: Write>(w: &mut W, v: usize) -> io::Result<()> {
    w.write_all(&(v as u32).to_le_bytes())
}

fn get_u32<R: Read>(r: &mut R) -> Result<usize, NetError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn put_tensor<W: Write, S: Scalar>(w: &mut W, t: &Tensor<S>) -> io::Result<()> {
    put_u32(w, t.shape().len())?;
    for &d in t.shape() {
        put_u32(w, d)?;
    }
    for &x in t.data() {
        w.write_all(&(x.to_f64() as f32).to_le_bytes())?;
    }
    Ok(())
}

fn get_tensor<R: Read, S: Scalar>(r: &mut R, expect: &[usize]) -> Result<Tensor<S>, NetError> {
    let rank = get_u32(r)?;
    let dims = (0..rank).map(|_| get_u32(r)).collect::<Result<Vec<_>, _>>()?;
    if dims != expect {
        return Err(NetError::Format(format!("tensor dims {dims:?}, header says {expect:?}")));
    }
    let n: usize = dims.iter().product();
    let mut buf = vec![0u8; 4 * n];
    r.read_exact(&mut buf)?;
    let data = buf
        .chunks_exact(4)
        .map(|c| S::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Tensor::new(&dims, data)
}

/// Write a stack. Weights are stored as f32.
pub fn write_stack<W: Write, S: Scalar>(w: &mut W, stack: &Sequential<S>) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    put_u32(w, stack.layers().len())?;
    for layer in stack.layers() {
        match layer {
            Layer::Conv1d { w: k, b } => {
                w.write_all(&[0])?;
                let s = k.shape();
                put_u32(w, s[0])?;
                put_u32(w, s[1])?;
                put_u32(w, s[2])?;
                put_tensor(w, k)?;
                put_tensor(w, b)?;
            }
            Layer::MaxPool1d { width } => {
                w.write_all(&[1])?;
                put_u32(w, *width)?;
            }
            Layer::UpSample1d { factor } => {
                w.write_all(&[2])?;
                put_u32(w, *factor)?;
            }
            Layer::Dense { w: k, b } => {
                w.write_all(&[3])?;
                put_u32(w, k.shape()[0])?;
                put_u32(w, k.shape()[1])?;
                put_tensor(w, k)?;
                put_tensor(w, b)?;
            }
            Layer::Act(Activation::Relu) => w.write_all(&[4])?,
            Layer::Act(Activation::Sigmoid) => w.write_all(&[5])?,
            Layer::Act(Activation::Linear) => w.write_all(&[6])?,
            Layer::Flatten => w.write_all(&[7])?,
            Layer::Reshape { dims } => {
                w.write_all(&[8])?;
                put_u32(w, dims.len())?;
                for &d in dims {
                    put_u32(w, d)?;
                }
            }
        }
    }
    Ok(())
}

/// Read a stack written by [`write_stack`].
pub fn read_stack<R: Read, S: Scalar>(r: &mut R) -> Result<Sequential<S>, NetError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NetError::Format(format!("bad magic {magic:?}")));
    }
    let mut v = [0u8; 2];
    r.read_exact(&mut v)?;
    let version = u16::from_le_bytes(v);
    if version != VERSION {
        return Err(NetError::Format(format!("unsupported version {version}")));
    }
    let count = get_u32(r)?;
    let mut layers = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let layer = match tag[0] {
            0 => {
                let (k, cin, cout) = (get_u32(r)?, get_u32(r)?, get_u32(r)?);
                Layer::Conv1d {
                    w: get_tensor(r, &[k, cin, cout])?,
                    b: get_tensor(r, &[cout])?,
                }
            }
            1 => Layer::MaxPool1d { width: get_u32(r)? },
            2 => Layer::UpSample1d { factor: get_u32(r)? },
            3 => {
                let (fin, fout) = (get_u32(r)?, get_u32(r)?);
                Layer::Dense {
                    w: get_tensor(r, &[fin, fout])?,
                    b: get_tensor(r, &[fout])?,
                }
            }
            4 => Layer::Act(Activation::Relu),
            5 => Layer::Act(Activation::Sigmoid),
            6 => Layer::Act(Activation::Linear),
            7 => Layer::Flatten,
            8 => {
                let rank = get_u32(r)?;
                Layer::Reshape {
                    dims: (0..rank).map(|_| get_u32(r)).collect::<Result<_, _>>()?,
                }
            }
            t => return Err(NetError::Format(format!("layer {i}: unknown kind tag {t}"))),
        };
        layers.push(layer);
    }
    Ok(Sequential::new(layers))
}
