//! Flat binary parameter checkpoints.
//!
//! Layout, all integers and reals little-endian:
//! `b"PNF1"`, `u32` layer count `L`, `L + 1` `u32` layer sizes, `L` activation
//! bytes (0 tanh, 1 relu, 2 identity), then per layer the row-major `[out, in]`
//! weights followed by the biases as `f64`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Activation, Layer, MlpParams, Tensor};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PNF1";

pub fn write_params<W: Write>(params: &MlpParams, mut w: W) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(params.layers().len() as u32).to_le_bytes())?;
    for s in params.layer_sizes() {
        w.write_all(&(s as u32).to_le_bytes())?;
    }
    for l in params.layers() {
        w.write_all(&[l.activation.code()])?;
    }
    for l in params.layers() {
        for v in l.weight.data().iter().chain(l.bias.data()) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

fn bad(msg: impl Into<String>) -> std::io::Error {
    std::io::Error::new(std::io::ErrorKind::InvalidData, msg.into())
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> std::io::Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

pub fn read_params<R: Read>(mut r: R) -> std::io::Result<MlpParams> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let n = read_u32(&mut r)? as usize;
    if n == 0 || n > 1024 {
        return Err(bad(format!("implausible layer count {n}")));
    }
    let sizes = (0..=n)
        .map(|_| read_u32(&mut r).map(|s| s as usize))
        .collect::<std::io::Result<Vec<_>>>()?;
    let mut codes = vec![0u8; n];
    r.read_exact(&mut codes)?;
    let mut layers = Vec::with_capacity(n);
    for i in 0..n {
        let activation = Activation::from_code(codes[i]).ok_or_else(|| bad("unknown activation code"))?;
        let (fan_in, fan_out) = (sizes[i], sizes[i + 1]);
        let w = read_f64s(&mut r, fan_in * fan_out)?;
        let b = read_f64s(&mut r, fan_out)?;
        let weight = Tensor::new(vec![fan_out, fan_in], w).map_err(|e| bad(e.to_string()))?;
        let bias = Tensor::new(vec![fan_out], b).map_err(|e| bad(e.to_string()))?;
        layers.push(Layer { weight, bias, activation });
    }
    MlpParams::from_layers(layers).map_err(|e| bad(e.to_string()))
}

pub fn save_params(params: &MlpParams, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    write_params(params, BufWriter::new(f)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_params(path: &Path) -> Result<MlpParams> {
    let f = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    read_params(BufReader::new(f)).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}
