//! Binary field dumps: `STLB`, then little-endian u32 version, nx, ny and
//! field id, then `nx * ny` f64 values, row-major with y as the outer index.

use super::MacroFields;
use serde::{Deserialize, Serialize};
use std::io::{self, Read, Write};

const MAGIC: &[u8; 4] = b"STLB";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldId {
    Rho,
    Ux,
    Uy,
    Temp,
}

impl FieldId {
    pub const ALL: [FieldId; 4] = [FieldId::Rho, FieldId::Ux, FieldId::Uy, FieldId::Temp];

    pub fn code(self) -> u32 {
        match self {
            FieldId::Rho => 0,
            FieldId::Ux => 1,
            FieldId::Uy => 2,
            FieldId::Temp => 3,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            FieldId::Rho => "rho",
            FieldId::Ux => "ux",
            FieldId::Uy => "uy",
            FieldId::Temp => "temp",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldDump {
    pub nx: u32,
    pub ny: u32,
    pub field: FieldId,
    pub values: Vec<f64>,
}

impl FieldDump {
    pub fn from_macro(fields: &MacroFields, field: FieldId) -> Self {
        Self {
            nx: fields.nx as u32,
            ny: fields.ny as u32,
            field,
            values: fields.field(field),
        }
    }
}

pub fn write_field_dump<W: Write>(mut out: W, dump: &FieldDump) -> io::Result<()> {
    let expected = dump.nx as usize * dump.ny as usize;
    if dump.values.len() != expected {
        return Err(io::Error::new(
            io::ErrorKind::InvalidInput,
            format!("dump holds {} values, expected {expected}", dump.values.len()),
        ));
    }
    let mut buf = Vec::with_capacity(20 + expected * 8);
    buf.extend_from_slice(MAGIC);
    for word in [VERSION, dump.nx, dump.ny, dump.field.code()] {
        buf.extend_from_slice(&word.to_le_bytes());
    }
    for v in &dump.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)
}

pub fn read_field_dump<R: Read>(mut input: R) -> io::Result<FieldDump> {
    let bad = |msg: String| io::Error::new(io::ErrorKind::InvalidData, msg);
    let mut head = [0u8; 20];
    input.read_exact(&mut head)?;
    if &head[..4] != MAGIC {
        return Err(bad("missing STLB magic".into()));
    }
    let word = |k: usize| u32::from_le_bytes(head[4 + 4 * k..8 + 4 * k].try_into().unwrap());
    let (version, nx, ny, code) = (word(0), word(1), word(2), word(3));
    if version != VERSION {
        return Err(bad(format!("unsupported dump version {version}")));
    }
    let field = FieldId::from_code(code).ok_or_else(|| bad(format!("unknown field id {code}")))?;
    let n = nx as usize * ny as usize;
    let mut raw = vec![0u8; n * 8];
    input.read_exact(&mut raw)?;
    let values = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(FieldDump {
        nx,
        ny,
        field,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_fixed() {
        let dump = FieldDump {
            nx: 2,
            ny: 1,
            field: FieldId::Temp,
            values: vec![1.5, -2.0],
        };
        let mut bytes = Vec::new();
        write_field_dump(&mut bytes, &dump).unwrap();
        assert_eq!(&bytes[..4], b"STLB");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &1u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &3u32.to_le_bytes());
        assert_eq!(&bytes[20..28], &1.5f64.to_le_bytes());
        assert_eq!(bytes.len(), 36);
        assert_eq!(read_field_dump(bytes.as_slice()).unwrap(), dump);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut bytes = b"XXXX".to_vec();
        bytes.extend_from_slice(&[0u8; 16]);
        assert!(read_field_dump(bytes.as_slice()).is_err());

        let dump = FieldDump {
            nx: 3,
            ny: 3,
            field: FieldId::Rho,
            values: vec![1.0; 9],
        };
        let mut good = Vec::new();
        write_field_dump(&mut good, &dump).unwrap();
        good.truncate(good.len() - 1);
        assert!(read_field_dump(good.as_slice()).is_err());
    }
}
