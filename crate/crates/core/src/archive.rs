//! Binary parameter archive.
//!
//! Layout (little-endian): magic `MVPARAM1`, u32 format version, a fixed
//! header (variant, option flags, readout, tau policy, dimensions), then
//! every tensor in canonical order as `u16 name length, name, u8 rank,
//! u32 dims…, f64 values…`, then a CRC-64/ECMA-182 of everything before it.

use std::fs;
use std::path::Path;

use crate::cells::{CellOptions, CellParams, Variant};
use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::model::{Classifier, ClassifierParams, Readout, TauPolicy};
use crate::numerics::{Matrix, Vector};
use crate::params::{ParamSet, Shape};

pub const MAGIC: &[u8; 8] = b"MVPARAM1";
pub const FORMAT_VERSION: u32 = 1;

const CRC64: crc::Crc<u64> = crc::Crc::<u64>::new(&crc::CRC_64_ECMA_182);

fn variant_code(v: Variant) -> u8 {
    match v {
        Variant::Lstm => 0,
        Variant::Modevar => 1,
        Variant::ModevarCrosscell => 2,
    }
}

fn tau_code(t: TauPolicy) -> (u8, u64) {
    match t {
        TauPolicy::FirstFrame => (0, 0),
        TauPolicy::Fixed(k) => (1, k as u64),
        TauPolicy::RandomPerSequence => (2, 0),
    }
}

pub fn encode(clf: &Classifier) -> Vec<u8> {
    let p = &clf.params;
    let o = p.cell.options();
    let mut b = Vec::new();
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    b.push(variant_code(p.cell.variant()));
    b.push(u8::from(o.diagonal_peephole) | u8::from(o.bias_cell_dynamics_gates) << 1 | u8::from(o.untied_crosscell) << 2);
    b.push(match clf.readout {
        Readout::Last => 0,
        Readout::Mean => 1,
    });
    let (tk, tv) = tau_code(clf.tau);
    b.push(tk);
    b.extend_from_slice(&tv.to_le_bytes());
    for d in [p.cell.input_dim(), p.cell.hidden_dim(), p.num_classes()] {
        b.extend_from_slice(&(d as u32).to_le_bytes());
    }
    let names = p.names();
    b.extend_from_slice(&(names.len() as u32).to_le_bytes());
    p.visit(&mut |name, shape, values| {
        b.extend_from_slice(&(name.len() as u16).to_le_bytes());
        b.extend_from_slice(name.as_bytes());
        let dims = shape.dims();
        b.push(dims.len() as u8);
        for d in dims {
            b.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in values {
            b.extend_from_slice(&v.to_le_bytes());
        }
    });
    let sum = CRC64.checksum(&b);
    b.extend_from_slice(&sum.to_le_bytes());
    b
}

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.buf.len() {
            return Err(Error::Format(format!("archive truncated at byte {}", self.at)));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(buf: &[u8]) -> Result<Classifier> {
    if buf.len() < MAGIC.len() + 4 + 8 || &buf[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("not a parameter archive (bad magic)".into()));
    }
    let (body, tail) = buf.split_at(buf.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    let computed = CRC64.checksum(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut c = Cursor {
        buf: body,
        at: MAGIC.len(),
    };
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let variant = match c.u8()? {
        0 => Variant::Lstm,
        1 => Variant::Modevar,
        2 => Variant::ModevarCrosscell,
        k => return Err(Error::Format(format!("unknown variant code {k}"))),
    };
    let flags = c.u8()?;
    if flags > 7 {
        return Err(Error::Format(format!("unknown option flags {flags:#x}")));
    }
    let options = CellOptions {
        diagonal_peephole: flags & 1 != 0,
        bias_cell_dynamics_gates: flags & 2 != 0,
        untied_crosscell: flags & 4 != 0,
    };
    let readout = match c.u8()? {
        0 => Readout::Last,
        1 => Readout::Mean,
        k => return Err(Error::Format(format!("unknown readout code {k}"))),
    };
    let (tk, tv) = (c.u8()?, c.u64()?);
    let tau = match tk {
        0 => TauPolicy::FirstFrame,
        1 => TauPolicy::Fixed(tv as usize),
        2 => TauPolicy::RandomPerSequence,
        k => return Err(Error::Format(format!("unknown tau code {k}"))),
    };
    let (d_x, d_h, classes) = (c.u32()? as usize, c.u32()? as usize, c.u32()? as usize);
    if d_x == 0 || d_h == 0 || classes < 2 {
        return Err(Error::Format(format!("bad dimensions {d_x}, {d_h}, {classes}")));
    }
    let mut params = ClassifierParams {
        cell: CellParams::zeros(d_x, d_h, variant, options),
        w_out: Matrix::zeros(classes, d_h),
        b_out: Vector::zeros(classes),
    };
    let expected: Vec<(&'static str, Shape)> = {
        let mut v = Vec::new();
        params.visit(&mut |n, s, _| v.push((n, s)));
        v
    };
    let count = c.u32()? as usize;
    if count != expected.len() {
        return Err(Error::Format(format!(
            "{count} tensors stored, {} expected for {variant}",
            expected.len()
        )));
    }
    let mut flat = Vec::with_capacity(params.num_scalars());
    for (name, shape) in &expected {
        let len = c.u16()? as usize;
        let got = std::str::from_utf8(c.take(len)?).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        if got != *name {
            return Err(Error::Format(format!("expected tensor {name}, found {got}")));
        }
        let rank = c.u8()? as usize;
        let dims: Vec<usize> = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        if dims != shape.dims() {
            return Err(Error::Format(format!("{name}: stored shape {dims:?}, expected {shape}")));
        }
        for _ in 0..shape.len() {
            flat.push(f64::from_le_bytes(c.take(8)?.try_into().expect("8 bytes")));
        }
    }
    if c.at != body.len() {
        return Err(Error::Format(format!("{} trailing bytes", body.len() - c.at)));
    }
    params.set_flat(&flat);
    Ok(Classifier { params, readout, tau })
}

pub fn save(clf: &Classifier, path: &Path) -> Result<()> {
    write_atomic(path, &encode(clf))
}

pub fn load(path: &Path) -> Result<Classifier> {
    decode(&fs::read(path)?)
}
