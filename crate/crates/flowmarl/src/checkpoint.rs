//! Versioned parameter checkpoint files.
//!
//! Layout: one JSON manifest line (UTF-8, terminated by `\n`) listing the
//! format version and every network's spec plus tensor shapes, followed by
//! the raw tensor payload — row-major little-endian f64, concatenated in
//! manifest order with each network's tensors in canonical flat order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{DenseLayer, MlpParams, MlpSpec, NormParams};
use crate::tensor::Tensor;

pub const FORMAT: &str = "flowmarl-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    nets: Vec<NetEntry>,
}

#[derive(Serialize, Deserialize)]
struct NetEntry {
    name: String,
    spec: MlpSpec,
    shapes: Vec<Vec<usize>>,
}

pub fn save(path: &Path, nets: &[(String, &MlpParams)]) -> Result<()> {
    let manifest = Manifest {
        format: FORMAT.to_string(),
        version: VERSION,
        nets: nets
            .iter()
            .map(|(name, p)| NetEntry {
                name: name.clone(),
                spec: p.spec().clone(),
                shapes: p
                    .flat_tensors()
                    .iter()
                    .map(|t| t.shape().to_vec())
                    .collect(),
            })
            .collect(),
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &manifest)?;
    w.write_all(b"\n")?;
    for (_, p) in nets {
        for t in p.flat_tensors() {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, MlpParams)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            return Err(Error::Checkpoint("missing manifest line".into()));
        }
        if byte[0] == b'\n' {
            break;
        }
        header.push(byte[0]);
    }
    let manifest: Manifest = serde_json::from_slice(&header)?;
    if manifest.format != FORMAT {
        return Err(Error::Checkpoint(format!(
            "unrecognized format tag {:?}",
            manifest.format
        )));
    }
    if manifest.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {} (supported: {})",
            manifest.version, VERSION
        )));
    }
    let mut out = Vec::with_capacity(manifest.nets.len());
    for entry in &manifest.nets {
        let mut tensors = Vec::with_capacity(entry.shapes.len());
        for shape in &entry.shapes {
            let n: usize = shape.iter().product();
            let mut buf = vec![0u8; n * 8];
            r.read_exact(&mut buf).map_err(|e| {
                Error::Checkpoint(format!("truncated payload for {:?}: {}", entry.name, e))
            })?;
            let data: Vec<f64> = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push(Tensor::new(shape.clone(), data)?);
        }
        out.push((entry.name.clone(), rebuild(entry, tensors)?));
    }
    Ok(out)
}

fn rebuild(entry: &NetEntry, tensors: Vec<Tensor>) -> Result<MlpParams> {
    let spec = entry.spec.clone();
    let n_hidden = spec.hidden.len();
    let mut layers = Vec::new();
    let mut norms = Vec::new();
    let mut it = tensors.into_iter();
    let mut next = |what: &str| {
        it.next()
            .ok_or_else(|| Error::Checkpoint(format!("{}: missing tensor {}", entry.name, what)))
    };
    for li in 0..=n_hidden {
        let w = next("weight")?;
        let b = next("bias")?;
        layers.push(DenseLayer { w, b });
        if li < n_hidden && spec.layer_norm {
            let gain = next("gain")?;
            let offset = next("offset")?;
            norms.push(NormParams { gain, offset });
        }
    }
    MlpParams::from_parts(spec, layers, norms)
}
