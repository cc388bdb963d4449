//! Single-file container used by dataset shards and checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic            8 bytes
//! manifest_len     u64
//! manifest         manifest_len bytes of UTF-8 JSON
//! section_count    u64
//! per section:
//!   name_len       u32
//!   name           name_len bytes of UTF-8
//!   kind           u8   (0 = f64, 1 = u8)
//!   count          u64  (number of elements)
//!   payload        count * 8 bytes (f64 bits) or count bytes
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Section {
    F64(Vec<f64>),
    U8(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub manifest: Vec<u8>,
    pub sections: Vec<(String, Section)>,
}

impl Container {
    pub fn new(manifest: Vec<u8>) -> Self {
        Container {
            manifest,
            sections: Vec::new(),
        }
    }

    pub fn push_f64(&mut self, name: impl Into<String>, values: &[f64]) {
        self.sections.push((name.into(), Section::F64(values.to_vec())));
    }

    pub fn push_u8(&mut self, name: impl Into<String>, values: &[u8]) {
        self.sections.push((name.into(), Section::U8(values.to_vec())));
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|(n, _)| n == name).map(|(_, s)| s)
    }

    pub fn to_bytes(&self, magic: &[u8; 8]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(magic);
        out.extend_from_slice(&(self.manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.manifest);
        out.extend_from_slice(&(self.sections.len() as u64).to_le_bytes());
        for (name, section) in &self.sections {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match section {
                Section::F64(v) => {
                    out.push(0);
                    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
                    for x in v {
                        out.extend_from_slice(&x.to_bits().to_le_bytes());
                    }
                }
                Section::U8(v) => {
                    out.push(1);
                    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
                    out.extend_from_slice(v);
                }
            }
        }
        out
    }

    pub fn write(&self, path: &Path, magic: &[u8; 8]) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes(magic))?;
        Ok(())
    }

    pub fn read(path: &Path, kind: &'static str, magic: &[u8; 8]) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes, magic).map_err(|detail| Error::format(kind, path, detail))
    }

    pub fn from_bytes(bytes: &[u8], magic: &[u8; 8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != magic {
            return Err("bad magic".into());
        }
        let mlen = r.u64()? as usize;
        let manifest = r.take(mlen)?.to_vec();
        let count = r.u64()?;
        let mut sections = Vec::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|e| e.to_string())?;
            let kind = r.take(1)?[0];
            let n = r.u64()? as usize;
            let section = match kind {
                0 => {
                    let raw = r.take(n.checked_mul(8).ok_or("section too large")?)?;
                    Section::F64(
                        raw.chunks_exact(8)
                            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("8 bytes"))))
                            .collect(),
                    )
                }
                1 => Section::U8(r.take(n)?.to_vec()),
                k => return Err(format!("section {name:?} has unknown kind {k}")),
            };
            sections.push((name, section));
        }
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        Ok(Container { manifest, sections })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!("truncated at byte {}", self.pos)),
        }
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
