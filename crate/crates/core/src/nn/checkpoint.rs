//! `SNRF` checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! "SNRF" | version u32 | flags u32 (bit 0: backward-skinning baseline)
//! 2 x net: input_dim u32 | output_dim u32 | n_hidden u32 | widths u32* |
//!          hidden_activation u8 | output_activation u8 |
//!          n_params u64 | params f64* (per layer: weights row-major, then bias)
//! metadata_len u64 | metadata (UTF-8 JSON)
//! ```

use std::io::{Read, Write};

use super::{HiddenActivation, Mlp, MlpSpec, OutputActivation};
use crate::binio::{Reader, Writer};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SNRF";
pub const CHECKPOINT_VERSION: u32 = 1;

const FLAG_BASELINE: u32 = 1;
const MAX_METADATA: u64 = 1 << 24;
const MAX_WIDTH: u32 = 1 << 16;

/// Two networks (occupancy first, then skinning) plus free-form metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub baseline: bool,
    pub occupancy: Mlp,
    pub skinning: Mlp,
    pub metadata: String,
}

fn hidden_code(a: HiddenActivation) -> u8 {
    match a {
        HiddenActivation::Softplus => 0,
        HiddenActivation::Relu => 1,
    }
}

fn output_code(a: OutputActivation) -> u8 {
    match a {
        OutputActivation::Sigmoid => 0,
        OutputActivation::Softmax => 1,
        OutputActivation::None => 2,
    }
}

fn write_net<W: Write>(w: &mut Writer<W>, net: &Mlp) -> Result<()> {
    let spec = net.spec();
    w.u32(spec.input_dim as u32)?;
    w.u32(spec.output_dim as u32)?;
    w.u32(spec.hidden_widths.len() as u32)?;
    for &h in &spec.hidden_widths {
        w.u32(h as u32)?;
    }
    w.u8(hidden_code(spec.hidden_activation))?;
    w.u8(output_code(spec.output_activation))?;
    w.u64(net.num_params() as u64)?;
    w.f64s(net.params())
}

fn read_dim<R: Read>(r: &mut Reader<R>, what: &str) -> Result<usize> {
    let at = r.offset();
    let v = r.u32(what)?;
    if v == 0 || v > MAX_WIDTH {
        return Err(Error::format(at, format!("implausible {what} {v}")));
    }
    Ok(v as usize)
}

fn read_net<R: Read>(r: &mut Reader<R>) -> Result<Mlp> {
    let input_dim = read_dim(r, "input_dim")?;
    let output_dim = read_dim(r, "output_dim")?;
    let n_hidden = read_dim(r, "hidden layer count")?;
    let hidden_widths = (0..n_hidden)
        .map(|_| read_dim(r, "hidden width"))
        .collect::<Result<Vec<_>>>()?;
    let at = r.offset();
    let hidden_activation = match r.u8("hidden activation")? {
        0 => HiddenActivation::Softplus,
        1 => HiddenActivation::Relu,
        c => return Err(Error::format(at, format!("unknown hidden activation code {c}"))),
    };
    let at = r.offset();
    let output_activation = match r.u8("output activation")? {
        0 => OutputActivation::Sigmoid,
        1 => OutputActivation::Softmax,
        2 => OutputActivation::None,
        c => return Err(Error::format(at, format!("unknown output activation code {c}"))),
    };
    let spec = MlpSpec::new(input_dim, output_dim, hidden_widths, hidden_activation, output_activation);
    let at = r.offset();
    let n = r.u64("parameter count")?;
    if n != spec.num_params() as u64 {
        return Err(Error::format(
            at,
            format!("parameter count {n} does not match architecture ({})", spec.num_params()),
        ));
    }
    let params = r.f64s(n as usize, "parameters")?;
    Mlp::from_params(spec, params).map_err(|e| Error::format(at, e.to_string()))
}

pub fn write_checkpoint<W: Write>(out: W, ckpt: &Checkpoint) -> Result<()> {
    let mut w = Writer::new(out);
    w.bytes(CHECKPOINT_MAGIC)?;
    w.u32(CHECKPOINT_VERSION)?;
    w.u32(if ckpt.baseline { FLAG_BASELINE } else { 0 })?;
    write_net(&mut w, &ckpt.occupancy)?;
    write_net(&mut w, &ckpt.skinning)?;
    w.u64(ckpt.metadata.len() as u64)?;
    w.bytes(ckpt.metadata.as_bytes())?;
    w.into_inner().flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(input: R) -> Result<Checkpoint> {
    let mut r = Reader::new(input);
    let mut magic = [0u8; 4];
    r.bytes(&mut magic, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}, expected \"SNRF\"")));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
    }
    let at = r.offset();
    let flags = r.u32("flags")?;
    if flags & !FLAG_BASELINE != 0 {
        return Err(Error::format(at, format!("unknown flag bits {flags:#x}")));
    }
    let occupancy = read_net(&mut r)?;
    let skinning = read_net(&mut r)?;
    let at = r.offset();
    let metadata = String::from_utf8(r.block(MAX_METADATA, "metadata")?)
        .map_err(|_| Error::format(at, "metadata is not UTF-8"))?;
    r.expect_eof()?;
    Ok(Checkpoint {
        baseline: flags & FLAG_BASELINE != 0,
        occupancy,
        skinning,
        metadata,
    })
}
