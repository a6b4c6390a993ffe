//! Binary key and ciphertext files.
//!
//! All integers are little-endian. Layouts:
//!
//! ```text
//! secret key : "HESK" u16 version | key_id[32] | seed[32] | u32 len | params JSON
//! eval key   : "HEEK" u16 version | key_id[32]            | u32 len | params JSON
//! ciphertext : "HECT" u16 version | u8 backend | key_id[32] | u32 rank | u64 dims[rank] | payload
//!   ckks payload : u32 scale_bits | u32 level | u64 slot_count | i64 slots[slot_count]
//!   tfhe payload : u32 msg_bits | u64 cells | { u32 q | f64 lo | f64 hi }[cells]
//! ```

use thiserror::Error;

use super::keys::keygen;
use super::{Cell, Ciphertext, CkksCiphertext, EvalKey, KeyId, SecretKey, TfheCiphertext};
use crate::calibration::Interval;
use crate::params::{KeyParams, ParamsError};

pub const SECRET_MAGIC: [u8; 4] = *b"HESK";
pub const EVAL_MAGIC: [u8; 4] = *b"HEEK";
pub const CT_MAGIC: [u8; 4] = *b"HECT";
pub const VERSION: u16 = 1;

const TAG_CKKS: u8 = 1;
const TAG_TFHE: u8 = 2;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("file ends early while reading {0}")]
    Truncated(&'static str),
    #[error("expected a {expected} file, found {found}")]
    WrongKind { expected: &'static str, found: &'static str },
    #[error("unsupported file format version {0} (expected {VERSION})")]
    Version(u16),
    #[error("invalid file: {0}")]
    Invalid(String),
    #[error(transparent)]
    Params(#[from] ParamsError),
}

fn kind_of(magic: &[u8]) -> &'static str {
    match magic {
        m if m == SECRET_MAGIC => "secret key",
        m if m == EVAL_MAGIC => "evaluation key",
        m if m == CT_MAGIC => "ciphertext",
        _ => "unrecognized data",
    }
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FormatError> {
        if self.buf.len() < n {
            return Err(FormatError::Truncated(what));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn array<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N], FormatError> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, FormatError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    fn len(&mut self, what: &'static str) -> Result<usize, FormatError> {
        usize::try_from(self.u64(what)?).map_err(|_| FormatError::Invalid(format!("{what} too large")))
    }

    fn finish(self) -> Result<(), FormatError> {
        if !self.buf.is_empty() {
            return Err(FormatError::Invalid(format!("{} trailing bytes", self.buf.len())));
        }
        Ok(())
    }

    fn header(&mut self, magic: [u8; 4]) -> Result<(), FormatError> {
        let found = self.array::<4>("magic")?;
        if found != magic {
            return Err(FormatError::WrongKind { expected: kind_of(&magic), found: kind_of(&found) });
        }
        match self.u16("version")? {
            VERSION => Ok(()),
            v => Err(FormatError::Version(v)),
        }
    }

    fn params(&mut self) -> Result<KeyParams, FormatError> {
        let n = self.u32("parameter length")? as usize;
        Ok(KeyParams::from_json(self.take(n, "parameters")?)?)
    }
}

fn put_params(out: &mut Vec<u8>, p: &KeyParams) {
    let json = p.to_json();
    out.extend((json.len() as u32).to_le_bytes());
    out.extend(json.as_bytes());
}

pub fn write_secret_key(sk: &SecretKey) -> Vec<u8> {
    let mut out = SECRET_MAGIC.to_vec();
    out.extend(VERSION.to_le_bytes());
    out.extend(sk.key_id.0);
    out.extend(sk.seed);
    put_params(&mut out, &sk.params);
    out
}

pub fn read_secret_key(bytes: &[u8]) -> Result<SecretKey, FormatError> {
    let mut r = Reader { buf: bytes };
    r.header(SECRET_MAGIC)?;
    let key_id = KeyId(r.array("key id")?);
    let seed = r.array("seed")?;
    let params = r.params()?;
    r.finish()?;
    let (sk, _) = keygen(&params, seed);
    if sk.key_id != key_id {
        return Err(FormatError::Invalid("key id does not match the key material".into()));
    }
    Ok(sk)
}

pub fn write_eval_key(ek: &EvalKey) -> Vec<u8> {
    let mut out = EVAL_MAGIC.to_vec();
    out.extend(VERSION.to_le_bytes());
    out.extend(ek.key_id.0);
    put_params(&mut out, &ek.params);
    out
}

pub fn read_eval_key(bytes: &[u8]) -> Result<EvalKey, FormatError> {
    let mut r = Reader { buf: bytes };
    r.header(EVAL_MAGIC)?;
    let key_id = KeyId(r.array("key id")?);
    let params = r.params()?;
    r.finish()?;
    Ok(EvalKey { params, key_id })
}

pub fn write_ciphertext(ct: &Ciphertext) -> Result<Vec<u8>, FormatError> {
    let mut out = CT_MAGIC.to_vec();
    out.extend(VERSION.to_le_bytes());
    out.push(match ct {
        Ciphertext::Ckks(_) => TAG_CKKS,
        Ciphertext::Tfhe(_) => TAG_TFHE,
    });
    out.extend(ct.key_id().0);
    out.extend((ct.shape().len() as u32).to_le_bytes());
    for &d in ct.shape() {
        out.extend((d as u64).to_le_bytes());
    }
    match ct {
        Ciphertext::Ckks(c) => {
            out.extend(c.scale_bits.to_le_bytes());
            out.extend(c.level.to_le_bytes());
            out.extend((c.slots.len() as u64).to_le_bytes());
            for s in &c.slots {
                out.extend(s.to_le_bytes());
            }
        }
        Ciphertext::Tfhe(c) => {
            if !c.pending.is_empty() {
                return Err(FormatError::Invalid("ciphertext has pending lookup tables; flush before writing".into()));
            }
            out.extend(c.msg_bits.to_le_bytes());
            out.extend((c.cells.len() as u64).to_le_bytes());
            for cell in &c.cells {
                out.extend(cell.q.to_le_bytes());
                out.extend(cell.interval.lo.to_le_bytes());
                out.extend(cell.interval.hi.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn read_ciphertext(bytes: &[u8]) -> Result<Ciphertext, FormatError> {
    let mut r = Reader { buf: bytes };
    r.header(CT_MAGIC)?;
    let tag = r.u8("backend tag")?;
    let key_id = KeyId(r.array("key id")?);
    let rank = r.u32("rank")? as usize;
    if rank > 8 {
        return Err(FormatError::Invalid(format!("rank {rank} is implausible")));
    }
    let shape = (0..rank).map(|_| r.len("dimension")).collect::<Result<Vec<_>, _>>()?;
    let elements = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| FormatError::Invalid("shape overflows".into()))?;
    let ct = match tag {
        TAG_CKKS => {
            let scale_bits = r.u32("scale")?;
            let level = r.u32("level")?;
            let count = r.len("slot count")?;
            if !(1..=62).contains(&scale_bits) {
                return Err(FormatError::Invalid(format!("scale_bits {scale_bits} out of range")));
            }
            if count < elements || count > 1 << 20 {
                return Err(FormatError::Invalid(format!("{count} slots cannot hold {elements} elements")));
            }
            let raw = r.take(count * 8, "slots")?;
            let slots: Vec<i64> =
                raw.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            if slots[elements..].iter().any(|&s| s != 0) {
                return Err(FormatError::Invalid("slots past the logical shape are not zero".into()));
            }
            Ciphertext::Ckks(CkksCiphertext { key_id, shape, scale_bits, level, slots })
        }
        TAG_TFHE => {
            let msg_bits = r.u32("message bits")?;
            if !(1..=16).contains(&msg_bits) {
                return Err(FormatError::Invalid(format!("msg_bits {msg_bits} out of range")));
            }
            let count = r.len("cell count")?;
            if count != elements {
                return Err(FormatError::Invalid(format!("{count} cells for {elements} elements")));
            }
            let raw = r.take(count.checked_mul(20).ok_or(FormatError::Truncated("cells"))?, "cells")?;
            let max = (1u32 << msg_bits) - 1;
            let cells = raw
                .chunks_exact(20)
                .map(|c| {
                    let q = u32::from_le_bytes(c[0..4].try_into().expect("4 bytes"));
                    let lo = f64::from_le_bytes(c[4..12].try_into().expect("8 bytes"));
                    let hi = f64::from_le_bytes(c[12..20].try_into().expect("8 bytes"));
                    if q > max || !(lo.is_finite() && hi.is_finite() && lo < hi) {
                        return Err(FormatError::Invalid(format!("malformed cell (q {q}, interval [{lo}, {hi}])")));
                    }
                    Ok(Cell { q, interval: Interval { lo, hi } })
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ciphertext::Tfhe(TfheCiphertext { key_id, shape, msg_bits, cells, pending: Vec::new(), pending_hint: None })
        }
        other => return Err(FormatError::Invalid(format!("unknown backend tag {other}"))),
    };
    r.finish()?;
    Ok(ct)
}
