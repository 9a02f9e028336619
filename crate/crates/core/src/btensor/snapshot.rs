//! Binary snapshot of a single tensor.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic  u32  = 0x4E535442 ("BTSN")
//! version u16 = 1
//! format u8   (0 list, 1 sparse-dense, 2 sparse-sparse)
//! modes  u32
//! qlen   u32  charge length
//! total  qlen × i32
//! per mode:   direction u8, sectors u32, per sector {qlen × i32, dim u64}
//! blocks u64
//! per block:  modes × qlen × i32, then row-major f64 data
//! ```

use std::io::{Read, Write};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};

use super::{block_shape_of, BlockTensor, Format};
use crate::error::{Error, Result};
use crate::qn::{Charge, Direction, QNIndex, Sector};

const MAGIC: u32 = 0x4E53_5442;
const VERSION: u16 = 1;

fn write_charge<W: Write>(w: &mut W, q: &Charge) -> Result<()> {
    for &v in q.values() {
        w.write_i32::<LE>(v)?;
    }
    Ok(())
}

fn read_charge<R: Read>(r: &mut R, len: usize) -> Result<Charge> {
    let mut v = Vec::with_capacity(len);
    for _ in 0..len {
        v.push(r.read_i32::<LE>()?);
    }
    Ok(Charge::new(&v))
}

pub fn write_snapshot<W: Write>(t: &BlockTensor, w: &mut W) -> Result<()> {
    let qlen = t.total_charge().len();
    w.write_u32::<LE>(MAGIC)?;
    w.write_u16::<LE>(VERSION)?;
    w.write_u8(t.format().tag())?;
    w.write_u32::<LE>(t.order() as u32)?;
    w.write_u32::<LE>(qlen as u32)?;
    write_charge(w, t.total_charge())?;
    for idx in t.indices() {
        w.write_u8(match idx.direction() {
            Direction::Inward => 0,
            Direction::Outward => 1,
        })?;
        w.write_u32::<LE>(idx.num_sectors() as u32)?;
        for s in idx.sectors() {
            write_charge(w, &s.charge)?;
            w.write_u64::<LE>(s.dim as u64)?;
        }
    }
    let blocks = t.blocks();
    w.write_u64::<LE>(blocks.len() as u64)?;
    for b in blocks {
        for q in &b.charges {
            write_charge(w, q)?;
        }
        // `iter` walks in logical row-major order for any memory layout.
        for &v in b.data.iter() {
            w.write_f64::<LE>(v)?;
        }
    }
    Ok(())
}

pub fn read_snapshot<R: Read>(r: &mut R) -> Result<BlockTensor> {
    if r.read_u32::<LE>()? != MAGIC {
        return Err(Error::Format("bad magic number".into()));
    }
    let version = r.read_u16::<LE>()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported snapshot version {version}")));
    }
    let tag = r.read_u8()?;
    let format = Format::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown format tag {tag}")))?;
    let modes = r.read_u32::<LE>()? as usize;
    let qlen = r.read_u32::<LE>()? as usize;
    let total = read_charge(r, qlen)?;
    let mut indices = Vec::with_capacity(modes);
    for _ in 0..modes {
        let direction = match r.read_u8()? {
            0 => Direction::Inward,
            1 => Direction::Outward,
            d => return Err(Error::Format(format!("unknown direction {d}"))),
        };
        let n = r.read_u32::<LE>()? as usize;
        let mut sectors = Vec::with_capacity(n);
        for _ in 0..n {
            let q = read_charge(r, qlen)?;
            sectors.push(Sector::new(q, r.read_u64::<LE>()? as usize));
        }
        indices.push(QNIndex::new(sectors, direction).map_err(|e| Error::Format(e.to_string()))?);
    }
    let nblocks = r.read_u64::<LE>()?;
    let mut blocks = Vec::new();
    for _ in 0..nblocks {
        let mut key = Vec::with_capacity(modes);
        for _ in 0..modes {
            key.push(read_charge(r, qlen)?);
        }
        let shape = block_shape_of(&indices, &key);
        let n: usize = shape.iter().product();
        if n == 0 {
            return Err(Error::Format(format!("block {key:?} does not match the sector tables")));
        }
        let mut data = vec![0.0; n];
        r.read_f64_into::<LE>(&mut data)?;
        blocks.push((key, ArrayD::from_shape_vec(IxDyn(&shape), data).expect("block size")));
    }
    let t = BlockTensor::from_blocks(indices, total, blocks).map_err(|e| Error::Format(e.to_string()))?;
    Ok(t.convert(format))
}
