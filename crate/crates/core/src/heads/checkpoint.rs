//! Head checkpoints.
//!
//! ```text
//! magic "PCKP" | version u32
//! kind         u8 length + ascii name
//! dims         D, S_t, S_f, C as u32
//! hyper        mlp_hidden, conv_kernel, conv_hidden, abmilp_queries,
//!              mhca_heads, prototypes_per_class as u32; descriptor u8 (0 cls, 1 mean)
//! tensors      u32 count, then per tensor: u8 length + ascii name, u8 rank,
//!              rank x u32 dims, f32 data
//! packed       u8 flag; when 1: J u32, D u32, u32 byte length, sign bits
//! ```
//! Everything is little-endian. Prototype heads carry the full-precision
//! prototypes for resuming plus the bit-packed sign bank for deployment.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{
    pack_prototypes, param_specs, Descriptor, HeadDims, HeadError, HeadHyper, HeadKind, HeadState, Param,
    Result,
};
use crate::numerics::DenseTensor;

const MAGIC: &[u8; 4] = b"PCKP";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub head: HeadState,
    /// Bit-packed sign bank, present for prototype heads.
    pub packed: Option<Vec<u8>>,
}

fn bad(msg: impl Into<String>) -> HeadError {
    HeadError::Checkpoint(msg.into())
}

fn write_name<W: Write>(w: &mut W, name: &str) -> std::io::Result<()> {
    w.write_u8(name.len() as u8)?;
    w.write_all(name.as_bytes())
}

fn read_name<R: Read>(r: &mut R) -> std::io::Result<String> {
    let len = r.read_u8()? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(String::from_utf8_lossy(&buf).into_owned())
}

pub fn write_checkpoint<W: Write>(w: &mut W, head: &HeadState) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    write_name(w, head.kind.name())?;
    let d = head.dims;
    for v in [d.dim, d.s_t, d.s_f, d.classes] {
        w.write_u32::<LittleEndian>(v as u32)?;
    }
    let h = head.hyper;
    for v in [
        h.mlp_hidden,
        h.conv_kernel,
        h.conv_hidden,
        h.abmilp_queries,
        h.mhca_heads,
        h.prototypes_per_class,
    ] {
        w.write_u32::<LittleEndian>(v as u32)?;
    }
    w.write_u8(match h.descriptor {
        Descriptor::Cls => 0,
        Descriptor::TokenMean => 1,
    })?;
    w.write_u32::<LittleEndian>(head.params.len() as u32)?;
    for p in &head.params {
        write_name(w, p.name)?;
        w.write_u8(p.tensor.rank() as u8)?;
        for &s in p.tensor.shape() {
            w.write_u32::<LittleEndian>(s as u32)?;
        }
        for &x in p.tensor.data() {
            w.write_f32::<LittleEndian>(x)?;
        }
    }
    match head.prototype_bank() {
        Some(bank) => {
            let packed = pack_prototypes(&bank);
            w.write_u8(1)?;
            w.write_u32::<LittleEndian>(bank.count() as u32)?;
            w.write_u32::<LittleEndian>(bank.dim() as u32)?;
            w.write_u32::<LittleEndian>(packed.len() as u32)?;
            w.write_all(&packed)
        }
        None => w.write_u8(0),
    }
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Checkpoint> {
    let trunc = |e: std::io::Error| bad(format!("truncated or unreadable: {e}"));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(trunc)?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(trunc)?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let kind: HeadKind = read_name(r).map_err(trunc)?.parse()?;
    let mut u = || r.read_u32::<LittleEndian>().map(|v| v as usize);
    let dims = HeadDims::new(u().map_err(trunc)?, u().map_err(trunc)?, u().map_err(trunc)?, u().map_err(trunc)?);
    let mut hv = [0usize; 6];
    for slot in hv.iter_mut() {
        *slot = u().map_err(trunc)?;
    }
    let descriptor = match r.read_u8().map_err(trunc)? {
        0 => Descriptor::Cls,
        1 => Descriptor::TokenMean,
        other => return Err(bad(format!("unknown descriptor code {other}"))),
    };
    let hyper = HeadHyper {
        mlp_hidden: hv[0],
        conv_kernel: hv[1],
        conv_hidden: hv[2],
        abmilp_queries: hv[3],
        mhca_heads: hv[4],
        prototypes_per_class: hv[5],
        descriptor,
    };
    let specs = param_specs(kind, &dims, &hyper)?;
    let count = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
    if count != specs.len() {
        return Err(bad(format!("{kind} expects {} tensors, found {count}", specs.len())));
    }
    let mut params = Vec::with_capacity(count);
    for s in specs {
        let name = read_name(r).map_err(trunc)?;
        let rank = r.read_u8().map_err(trunc)? as usize;
        let shape = (0..rank)
            .map(|_| r.read_u32::<LittleEndian>().map(|v| v as usize))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(trunc)?;
        if name != s.name || shape != s.shape {
            return Err(bad(format!(
                "tensor {name} {shape:?} does not match expected {} {:?}",
                s.name, s.shape
            )));
        }
        let mut data = vec![0f32; shape.iter().product()];
        r.read_f32_into::<LittleEndian>(&mut data).map_err(trunc)?;
        params.push(Param {
            name: s.name,
            tensor: DenseTensor::new(shape, data)?,
        });
    }
    let packed = match r.read_u8().map_err(trunc)? {
        0 => None,
        1 => {
            let _j = r.read_u32::<LittleEndian>().map_err(trunc)?;
            let _d = r.read_u32::<LittleEndian>().map_err(trunc)?;
            let len = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
            let mut bytes = vec![0u8; len];
            r.read_exact(&mut bytes).map_err(trunc)?;
            Some(bytes)
        }
        other => return Err(bad(format!("unknown packed flag {other}"))),
    };
    let head = HeadState {
        kind,
        dims,
        hyper,
        params,
    };
    if let (Some(bytes), Some(bank)) = (&packed, head.prototype_bank()) {
        if *bytes != pack_prototypes(&bank) {
            return Err(bad("packed sign bank disagrees with stored prototypes"));
        }
    }
    Ok(Checkpoint { head, packed })
}

pub fn save_checkpoint(path: impl AsRef<Path>, head: &HeadState) -> Result<()> {
    let path = path.as_ref();
    let io = |source| HeadError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    write_checkpoint(&mut w, head).map_err(io)?;
    w.flush().map_err(io)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| HeadError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_checkpoint(&mut BufReader::new(file))
}
