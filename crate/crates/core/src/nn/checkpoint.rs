//! Binary parameter checkpoints. Byte layout is documented in `docs/FORMATS.md`.

use std::fs;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

use super::{Activation, BatchNorm, Dense, LayerSpec, Model};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SLCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(model: &Model, out: &mut W) -> io::Result<()> {
    out.write_all(&CHECKPOINT_MAGIC)?;
    put_u32(out, CHECKPOINT_VERSION)?;
    put_u32(out, (model.encoder.len() + model.classifier.len()) as u32)?;
    put_u32(out, model.encoder.len() as u32)?;
    for layer in model.layers() {
        put_u32(out, layer.spec.in_dim as u32)?;
        put_u32(out, layer.spec.out_dim as u32)?;
        out.write_all(&[
            match layer.spec.activation {
                Activation::Identity => 0,
                Activation::Relu => 1,
            },
            layer.spec.batch_norm as u8,
        ])?;
    }
    let mut tensors: Vec<DenseMatrix> = Vec::new();
    for layer in model.layers() {
        tensors.push(layer.weight.clone());
        tensors.push(layer.bias.clone());
        if let Some(bn) = &layer.bn {
            let n = bn.running_mean.len();
            tensors.push(bn.gamma.clone());
            tensors.push(bn.beta.clone());
            tensors.push(DenseMatrix::from_vec(1, n, bn.running_mean.clone()).expect("sized"));
            tensors.push(DenseMatrix::from_vec(1, n, bn.running_var.clone()).expect("sized"));
        }
    }
    put_u32(out, tensors.len() as u32)?;
    for t in &tensors {
        put_u32(out, t.rows() as u32)?;
        put_u32(out, t.cols() as u32)?;
        for v in t.as_slice() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(input: &mut R) -> Result<Model> {
    let bad = |reason: String| Error::Checkpoint { path: Default::default(), reason };
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let version = get_u32(input)?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let n_layers = get_u32(input)? as usize;
    let n_encoder = get_u32(input)? as usize;
    if n_encoder == 0 || n_encoder >= n_layers {
        return Err(bad(format!("{n_layers} layers with {n_encoder} in the encoder")));
    }
    let mut specs = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let in_dim = get_u32(input)? as usize;
        let out_dim = get_u32(input)? as usize;
        let mut flags = [0u8; 2];
        input.read_exact(&mut flags)?;
        let activation = match flags[0] {
            0 => Activation::Identity,
            1 => Activation::Relu,
            a => return Err(bad(format!("unknown activation code {a}"))),
        };
        specs.push(LayerSpec::new(in_dim, out_dim, activation, flags[1] != 0));
    }
    let expected: usize = specs.iter().map(|s| if s.batch_norm { 6 } else { 2 }).sum();
    let n_tensors = get_u32(input)? as usize;
    if n_tensors != expected {
        return Err(bad(format!("expected {expected} tensors, header says {n_tensors}")));
    }
    let mut next = |rows: usize, cols: usize| -> Result<DenseMatrix> {
        let r = get_u32(input)? as usize;
        let c = get_u32(input)? as usize;
        if (r, c) != (rows, cols) {
            return Err(bad(format!("tensor is {r}x{c}, expected {rows}x{cols}")));
        }
        let mut values = Vec::with_capacity(r * c);
        let mut buf = [0u8; 8];
        for _ in 0..r * c {
            input.read_exact(&mut buf)?;
            values.push(f64::from_le_bytes(buf));
        }
        DenseMatrix::from_vec(r, c, values)
    };
    let mut layers = Vec::with_capacity(n_layers);
    for spec in specs {
        let weight = next(spec.in_dim, spec.out_dim)?;
        let bias = next(1, spec.out_dim)?;
        let bn = if spec.batch_norm {
            let gamma = next(1, spec.out_dim)?;
            let beta = next(1, spec.out_dim)?;
            let running_mean = next(1, spec.out_dim)?.into_vec();
            let running_var = next(1, spec.out_dim)?.into_vec();
            Some(BatchNorm { gamma, beta, running_mean, running_var })
        } else {
            None
        };
        layers.push(Dense { spec, weight, bias, bn });
    }
    let classifier = layers.split_off(n_encoder);
    let model = Model { encoder: layers, classifier };
    for w in model.layers().collect::<Vec<_>>().windows(2) {
        if w[0].spec.out_dim != w[1].spec.in_dim {
            return Err(bad("layer dimensions do not chain".into()));
        }
    }
    if !model.is_finite() {
        return Err(bad("non-finite parameter values".into()));
    }
    Ok(model)
}

/// Writes to a sibling temp file and renames, so an interrupted write never
/// leaves a truncated checkpoint at `path`.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        write_checkpoint(model, &mut w)?;
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let mut r = BufReader::new(fs::File::open(path)?);
    read_checkpoint(&mut r).map_err(|e| match e {
        Error::Checkpoint { reason, .. } => Error::Checkpoint { path: path.to_path_buf(), reason },
        Error::Io(io) => Error::Checkpoint { path: path.to_path_buf(), reason: io.to_string() },
        other => other,
    })
}

fn put_u32<W: Write>(out: &mut W, v: u32) -> io::Result<()> {
    out.write_all(&v.to_le_bytes())
}

fn get_u32<R: Read>(input: &mut R) -> io::Result<u32> {
    let mut buf = [0u8; 4];
    input.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
