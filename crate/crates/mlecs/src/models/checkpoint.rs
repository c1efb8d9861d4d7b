//! Adapter checkpoint files.
//!
//! Layout: a magic line, a one-line JSON manifest (layer order, shapes,
//! rank, scale, seed), a blank separator line, then raw little-endian `f32`
//! payloads per matrix in manifest order (`A` then `B` for each adapter).
//! Values are stored at 32-bit precision and round-trip bit-exactly at that
//! width.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numeric::Matrix;
use crate::{Error, Result};

use super::LoRAAdapter;

const MAGIC: &str = "MLECS-ADAPTERS v1";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    seed: u64,
    adapters: Vec<AdapterEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AdapterEntry {
    p: usize,
    q: usize,
    rank: usize,
    scale: f64,
}

pub fn write_adapters(path: &Path, adapters: &[LoRAAdapter], seed: u64) -> Result<()> {
    let manifest = Manifest {
        seed,
        adapters: adapters
            .iter()
            .map(|ad| {
                let (p, q) = ad.shape();
                AdapterEntry {
                    p,
                    q,
                    rank: ad.rank,
                    scale: ad.scale,
                }
            })
            .collect(),
    };
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{MAGIC}")?;
    writeln!(
        w,
        "{}",
        serde_json::to_string(&manifest).expect("manifest serializes")
    )?;
    writeln!(w)?;
    for ad in adapters {
        for value in ad.a.data().iter().chain(ad.b.data()) {
            w.write_all(&(*value as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_adapters(path: &Path) -> Result<(Vec<LoRAAdapter>, u64)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;

    let mut offset = 0;
    let mut next_line = |what: &str| -> Result<String> {
        let rest = &bytes[offset..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint {
                detail: format!("missing {what} line"),
            })?;
        let line = String::from_utf8(rest[..end].to_vec()).map_err(|_| Error::Checkpoint {
            detail: format!("{what} line is not utf-8"),
        })?;
        offset += end + 1;
        Ok(line)
    };

    let magic = next_line("magic")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint {
            detail: format!("bad magic `{magic}`"),
        });
    }
    let manifest: Manifest =
        serde_json::from_str(&next_line("manifest")?).map_err(|e| Error::Checkpoint {
            detail: format!("manifest: {e}"),
        })?;
    let blank = next_line("separator")?;
    if !blank.is_empty() {
        return Err(Error::Checkpoint {
            detail: "expected blank separator line".into(),
        });
    }

    let payload = &bytes[offset..];
    let expected: usize = manifest
        .adapters
        .iter()
        .map(|e| e.rank * e.q + e.p * e.rank)
        .sum();
    if payload.len() != expected * 4 {
        return Err(Error::Checkpoint {
            detail: format!(
                "payload holds {} bytes, manifest implies {}",
                payload.len(),
                expected * 4
            ),
        });
    }

    let mut cursor = 0;
    let mut read_matrix = |rows: usize, cols: usize| -> Matrix {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            let raw: [u8; 4] = payload[cursor..cursor + 4].try_into().expect("length checked");
            data.push(f64::from(f32::from_le_bytes(raw)));
            cursor += 4;
        }
        Matrix::new(rows, cols, data).expect("checkpoint payload is finite")
    };

    let mut adapters = Vec::with_capacity(manifest.adapters.len());
    for entry in &manifest.adapters {
        let a = read_matrix(entry.rank, entry.q);
        let b = read_matrix(entry.p, entry.rank);
        adapters.push(LoRAAdapter {
            a,
            b,
            rank: entry.rank,
            scale: entry.scale,
        });
    }
    Ok((adapters, manifest.seed))
}
