//! Binary parameter checkpoints.
//!
//! Layout: magic `SPIR`, `u32` version, `u32` header length, UTF-8 header,
//! `u64` value count, little-endian `f32` payload, `u64` FNV-1a checksum of
//! the payload bytes. The header lists one `tensor <name> <n> <c> <h> <w>`
//! line per parameter in payload order, then a `config` line followed by the
//! echoed run configuration.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::tensor::{Shape, Tensor};

pub const MAGIC: [u8; 4] = *b"SPIR";
pub const VERSION: u32 = 1;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Vec<(String, Shape)>,
    pub config: String,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn from_graph(g: &ModelGraph, config: &str) -> Self {
        let entries = g.params().entries();
        Checkpoint {
            manifest: entries
                .iter()
                .map(|e| (e.name.clone(), e.value.shape()))
                .collect(),
            config: config.to_string(),
            tensors: entries.iter().map(|e| e.value.clone()).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        for (name, s) in &self.manifest {
            header.push_str(&format!(
                "tensor {name} {} {} {} {}\n",
                s[0], s[1], s[2], s[3]
            ));
        }
        header.push_str("config\n");
        header.push_str(&self.config);
        let payload: Vec<u8> = self
            .tensors
            .iter()
            .flat_map(|t| t.data().iter().flat_map(|v| v.to_le_bytes()))
            .collect();
        let mut out = Vec::with_capacity(28 + header.len() + payload.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&((payload.len() / 4) as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&fnv1a64(&payload).to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("four bytes");
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::BadVersion(version));
        }
        let header_len = r.u32()? as usize;
        let header = std::str::from_utf8(r.take(header_len)?).map_err(|_| Error::Manifest {
            name: String::new(),
            msg: "header is not UTF-8".into(),
        })?;
        let (manifest, config) = parse_header(header)?;
        let count = r.u64()? as usize;
        let payload = r.take(count.checked_mul(4).ok_or(Error::Truncated)?)?;
        let stored = r.u64()?;
        let computed = fnv1a64(payload);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let expected: usize = manifest
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum();
        if expected != count {
            return Err(Error::Manifest {
                name: String::new(),
                msg: format!("manifest describes {expected} values, payload holds {count}"),
            });
        }
        let mut tensors = Vec::with_capacity(manifest.len());
        let mut values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")));
        for (_, shape) in &manifest {
            let n: usize = shape.iter().product();
            tensors.push(Tensor::new(*shape, values.by_ref().take(n).collect())?);
        }
        Ok(Checkpoint {
            manifest,
            config,
            tensors,
        })
    }

    /// Copy the stored parameters into `g`, which must have the same manifest.
    pub fn apply(&self, g: &mut ModelGraph) -> Result<()> {
        let entries = g.params().entries();
        for (i, e) in entries.iter().enumerate() {
            match self.manifest.get(i) {
                None => {
                    return Err(Error::Manifest {
                        name: e.name.clone(),
                        msg: "missing from checkpoint".into(),
                    })
                }
                Some((name, shape)) if *name != e.name || *shape != e.value.shape() => {
                    return Err(Error::Manifest {
                        name: e.name.clone(),
                        msg: format!(
                            "model expects {:?}, checkpoint has '{name}' {:?}",
                            e.value.shape(),
                            shape
                        ),
                    })
                }
                Some(_) => {}
            }
        }
        if let Some((name, _)) = self.manifest.get(entries.len()) {
            return Err(Error::Manifest {
                name: name.clone(),
                msg: "not present in the model".into(),
            });
        }
        g.params_mut().assign(self.tensors.clone())
    }
}

fn parse_header(header: &str) -> Result<(Vec<(String, Shape)>, String)> {
    let bad = |name: &str, msg: &str| Error::Manifest {
        name: name.to_string(),
        msg: msg.to_string(),
    };
    let mut manifest = Vec::new();
    let mut lines = header.split_inclusive('\n');
    for line in lines.by_ref() {
        let line = line.trim_end_matches('\n');
        if line == "config" {
            let config: String = lines.collect();
            return Ok((manifest, config));
        }
        let parts: Vec<&str> = line.split(' ').collect();
        if parts.len() != 6 || parts[0] != "tensor" {
            return Err(bad("", &format!("malformed manifest line '{line}'")));
        }
        let mut shape = [0usize; 4];
        for (d, p) in shape.iter_mut().zip(&parts[2..]) {
            *d = p.parse().map_err(|_| bad(parts[1], "bad extent"))?;
        }
        manifest.push((parts[1].to_string(), shape));
    }
    Err(bad("", "header lacks the config section"))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated)?;
        if end > self.bytes.len() {
            return Err(Error::Truncated);
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("four bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("eight bytes"),
        ))
    }
}

pub fn save_checkpoint(g: &ModelGraph, config: &str, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, Checkpoint::from_graph(g, config).to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

/// Load `path` into `g`.
pub fn restore(g: &mut ModelGraph, path: impl AsRef<Path>) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    ck.apply(g)?;
    Ok(ck)
}
