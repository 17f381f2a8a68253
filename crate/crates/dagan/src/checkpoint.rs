//! Binary checkpoint format: named f64 arrays (model parameters and
//! optimizer moments), counters, the RNG's exact position, and the config
//! fingerprint that guards against loading under a different experiment.
//!
//! Layout (all integers little-endian):
//! `magic "DAGNCKPT" | version u32 | fingerprint | iteration u64 |
//! best_f1 f64 | rng (32-byte seed, word_pos u128, stream u64) |
//! counter section | array sections`. Strings are u32 length + UTF-8;
//! arrays are u32 ndim, u64 dims, f64 data in row-major order.
//!
//! Writing is deterministic (sections and entries keep insertion order), so
//! save -> load -> save produces identical bytes.

use crate::error::{Error, Result};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"DAGNCKPT";
const VERSION: u32 = 1;

/// Exact position of the deterministic RNG stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngSnapshot {
    pub seed: [u8; 32],
    pub word_pos: u128,
    pub stream: u64,
}

impl RngSnapshot {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngSnapshot {
            seed: rng.get_seed(),
            word_pos: rng.get_word_pos(),
            stream: rng.get_stream(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// A named group of named arrays (e.g. `params`, `adam_g_m`).
#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub entries: Vec<(String, ArrayD<f64>)>,
}

/// Everything a training run needs to resume bit-identically.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub fingerprint: String,
    pub iteration: u64,
    pub best_f1: f64,
    pub rng: RngSnapshot,
    pub counters: Vec<(String, u64)>,
    pub sections: Vec<Section>,
}

impl Checkpoint {
    pub fn section(&self, name: &str) -> Result<&Section> {
        self.sections
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing section '{name}'")))
    }

    pub fn counter(&self, name: &str) -> Result<u64> {
        self.counters
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Checkpoint(format!("missing counter '{name}'")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }

    /// Load and verify the config fingerprint in one step.
    pub fn load_checked(path: &Path, expected_fingerprint: &str) -> Result<Self> {
        let ckpt = Self::load(path)?;
        if ckpt.fingerprint != expected_fingerprint {
            return Err(Error::Fingerprint {
                found: ckpt.fingerprint,
                expected: expected_fingerprint.to_string(),
            });
        }
        Ok(ckpt)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        write_string(w, &self.fingerprint)?;
        w.write_u64::<LittleEndian>(self.iteration)?;
        w.write_f64::<LittleEndian>(self.best_f1)?;
        w.write_all(&self.rng.seed)?;
        w.write_u128::<LittleEndian>(self.rng.word_pos)?;
        w.write_u64::<LittleEndian>(self.rng.stream)?;

        w.write_u32::<LittleEndian>(self.counters.len() as u32)?;
        for (name, value) in &self.counters {
            write_string(w, name)?;
            w.write_u64::<LittleEndian>(*value)?;
        }

        w.write_u32::<LittleEndian>(self.sections.len() as u32)?;
        for section in &self.sections {
            write_string(w, &section.name)?;
            w.write_u32::<LittleEndian>(section.entries.len() as u32)?;
            for (name, array) in &section.entries {
                write_string(w, name)?;
                w.write_u32::<LittleEndian>(array.ndim() as u32)?;
                for &d in array.shape() {
                    w.write_u64::<LittleEndian>(d as u64)?;
                }
                // Row-major traversal; ArrayD from from_shape_vec is already
                // standard layout, and iter() walks logical order regardless.
                for &v in array.iter() {
                    w.write_f64::<LittleEndian>(v)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let fingerprint = read_string(r)?;
        let iteration = r.read_u64::<LittleEndian>()?;
        let best_f1 = r.read_f64::<LittleEndian>()?;
        let mut seed = [0u8; 32];
        r.read_exact(&mut seed)?;
        let word_pos = r.read_u128::<LittleEndian>()?;
        let stream = r.read_u64::<LittleEndian>()?;
        let rng = RngSnapshot { seed, word_pos, stream };

        let n_counters = r.read_u32::<LittleEndian>()?;
        let mut counters = Vec::with_capacity(n_counters as usize);
        for _ in 0..n_counters {
            let name = read_string(r)?;
            let value = r.read_u64::<LittleEndian>()?;
            counters.push((name, value));
        }

        let n_sections = r.read_u32::<LittleEndian>()?;
        let mut sections = Vec::with_capacity(n_sections as usize);
        for _ in 0..n_sections {
            let name = read_string(r)?;
            let n_entries = r.read_u32::<LittleEndian>()?;
            let mut entries = Vec::with_capacity(n_entries as usize);
            for _ in 0..n_entries {
                let entry_name = read_string(r)?;
                let ndim = r.read_u32::<LittleEndian>()? as usize;
                let mut dims = Vec::with_capacity(ndim);
                for _ in 0..ndim {
                    dims.push(r.read_u64::<LittleEndian>()? as usize);
                }
                let len: usize = dims.iter().product();
                let mut data = Vec::with_capacity(len);
                for _ in 0..len {
                    data.push(r.read_f64::<LittleEndian>()?);
                }
                let array = ArrayD::from_shape_vec(IxDyn(&dims), data)
                    .map_err(|e| Error::Checkpoint(format!("array '{entry_name}': {e}")))?;
                entries.push((entry_name, array));
            }
            sections.push(Section { name, entries });
        }
        Ok(Checkpoint { fingerprint, iteration, best_f1, rng, counters, sections })
    }
}

fn write_string(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_string(r: &mut impl Read) -> Result<String> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    if len > 1 << 20 {
        return Err(Error::Checkpoint(format!("implausible string length {len}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Checkpoint(format!("bad string: {e}")))
}
