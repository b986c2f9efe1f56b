//! Binary checkpoint container.
//!
//! Layout (little endian):
//!
//! ```text
//! b"MEGLCKPT"  u32 version  [32] sha256(config text)  u32 section count
//! per section: u32 name length, name bytes, u8 kind, payload
//!   kind 0 (trainable array) / 1 (frozen array): u32 ndim, u64 dims.., f64 values..
//!   kind 2 (text): u64 byte length, UTF-8 bytes
//! ```
//!
//! Sections: `config`, `classes` (one name per line) and `vocab` (text),
//! `prior` (frozen array) with `prior.count` (text), and one array per
//! parameter named `param:<name>`.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{MeglError, Result};
use crate::grounding::Vocabulary;
use crate::params::ParamStore;
use crate::supervision::AggregatedPrior;
use crate::types::{Normalization, SaliencyMap};

const MAGIC: &[u8; 8] = b"MEGLCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub class_names: Vec<String>,
    pub vocab: Vocabulary,
    pub params: ParamStore,
    pub prior: Option<AggregatedPrior>,
}

enum Section {
    Array { trainable: bool, shape: Vec<usize>, values: Vec<f64> },
    Text(String),
}

fn bad(m: impl Into<String>) -> MeglError {
    MeglError::Checkpoint(m.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let config_text = self.config.serialize();
        let mut sections: Vec<(String, Section)> = vec![
            ("config".into(), Section::Text(config_text.clone())),
            ("classes".into(), Section::Text(self.class_names.join("\n"))),
            ("vocab".into(), Section::Text(self.vocab.to_text())),
        ];
        if let Some(p) = &self.prior {
            let (h, w) = p.mean_map.dims();
            sections.push((
                "prior".into(),
                Section::Array { trainable: false, shape: vec![h, w], values: p.mean_map.grid().to_vec() },
            ));
            sections.push(("prior.count".into(), Section::Text(p.n_contributors.to_string())));
        }
        for (name, p) in self.params.iter() {
            sections.push((
                format!("param:{name}"),
                Section::Array { trainable: p.trainable, shape: p.shape.clone(), values: p.value.clone() },
            ));
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&Sha256::digest(config_text.as_bytes()));
        out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
        for (name, s) in &sections {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match s {
                Section::Array { trainable, shape, values } => {
                    out.push(if *trainable { 0 } else { 1 });
                    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
                    for d in shape {
                        out.extend_from_slice(&(*d as u64).to_le_bytes());
                    }
                    for v in values {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Section::Text(t) => {
                    out.push(2);
                    out.extend_from_slice(&(t.len() as u64).to_le_bytes());
                    out.extend_from_slice(t.as_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let mut digest = [0u8; 32];
        read_exact(&mut r, &mut digest)?;
        let count = read_u32(&mut r)?;

        let mut config = None;
        let mut vocab = None;
        let mut class_names = None;
        let mut prior_grid = None;
        let mut prior_count = None;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| bad("section name is not UTF-8"))?;
            let mut kind = [0u8; 1];
            read_exact(&mut r, &mut kind)?;
            match kind[0] {
                0 | 1 => {
                    let ndim = read_u32(&mut r)? as usize;
                    let shape = (0..ndim).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
                    let n: usize = shape.iter().product();
                    if n.saturating_mul(8) > bytes.len() {
                        return Err(bad(format!("section {name} larger than file")));
                    }
                    let values = (0..n).map(|_| read_u64(&mut r).map(f64::from_bits)).collect::<Result<Vec<_>>>()?;
                    if let Some(p) = name.strip_prefix("param:") {
                        params.insert(p, &shape, values, kind[0] == 0);
                    } else if name == "prior" && shape.len() == 2 {
                        prior_grid = Some((shape, values));
                    } else {
                        return Err(bad(format!("unexpected array section {name}")));
                    }
                }
                2 => {
                    let len = read_u64(&mut r)? as usize;
                    if len > bytes.len() {
                        return Err(bad(format!("section {name} larger than file")));
                    }
                    let mut buf = vec![0u8; len];
                    read_exact(&mut r, &mut buf)?;
                    let text = String::from_utf8(buf).map_err(|_| bad(format!("section {name} is not UTF-8")))?;
                    match name.as_str() {
                        "config" => {
                            if Sha256::digest(text.as_bytes()).as_slice() != digest {
                                return Err(bad("config hash mismatch"));
                            }
                            config = Some(ExperimentConfig::parse(&text)?);
                        }
                        "classes" => class_names = Some(text.lines().map(str::to_string).collect()),
                        "vocab" => vocab = Some(Vocabulary::from_text(&text)?),
                        "prior.count" => prior_count = Some(text.parse::<usize>().map_err(|_| bad("bad prior.count"))?),
                        _ => return Err(bad(format!("unexpected text section {name}"))),
                    }
                }
                k => return Err(bad(format!("unknown section kind {k}"))),
            }
        }
        if (r.position() as usize) != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        let prior = match (prior_grid, prior_count) {
            (Some((shape, values)), Some(n)) => Some(AggregatedPrior {
                mean_map: SaliencyMap::new(values, shape[0], shape[1], Normalization::Sum1)?,
                n_contributors: n,
            }),
            (None, None) => None,
            _ => return Err(bad("incomplete prior")),
        };
        Ok(Checkpoint {
            config: config.ok_or_else(|| bad("missing config section"))?,
            class_names: class_names.ok_or_else(|| bad("missing classes section"))?,
            vocab: vocab.ok_or_else(|| bad("missing vocab section"))?,
            params,
            prior,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => MeglError::MissingFile(path.to_path_buf()),
            _ => MeglError::Io(e),
        })?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut Cursor<&[u8]>, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| bad("truncated file"))
}

fn read_u32(r: &mut Cursor<&[u8]>) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut Cursor<&[u8]>) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = ParamStore::new();
        params.insert("a.w", &[2, 2], vec![1.0, -2.5, f64::MIN_POSITIVE, 3.0e10], true);
        params.insert("aux.b", &[3], vec![0.1, 0.2, 0.3], false);
        Checkpoint {
            config: ExperimentConfig { seed: 9, ..Default::default() },
            class_names: vec!["red_circle".into(), "blue_cross".into()],
            vocab: Vocabulary::build(&["a red circle"], 100),
            params,
            prior: Some(AggregatedPrior {
                mean_map: SaliencyMap::new(vec![0.25; 4], 2, 2, Normalization::Sum1).unwrap(),
                n_contributors: 3,
            }),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), c);
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap().to_bytes(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(b"NOTACKPT").is_err());
        let mut bad_hash = bytes.clone();
        bad_hash[12] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bad_hash), Err(MeglError::Checkpoint(_))));
        let mut trailing = bytes;
        trailing.push(0);
        assert!(Checkpoint::from_bytes(&trailing).is_err());
    }
}
