//! On-disk formats: parameter vectors, round logs and generator checkpoints.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use fplab_core::fl::RoundRecord;
use fplab_core::psg::{GanArch, NoiseDist, PoisonGenerator};
use fplab_core::ParamVector;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

const MAGIC: &[u8; 4] = b"FPLB";
const VERSION: u32 = 1;

/// Writes `FPLB`, a u32 version, a u64 length, then the values as
/// little-endian f32.
pub fn write_params(path: &Path, params: &ParamVector) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 4 * params.dim());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.dim() as u64).to_le_bytes());
    for &v in params.as_slice() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, buf).map_err(HarnessError::io(path))
}

pub fn read_params(path: &Path) -> Result<ParamVector> {
    let mut bytes = Vec::new();
    File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(HarnessError::io(path))?;
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(HarnessError::format(path, "not a parameter file"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(HarnessError::format(path, format!("unsupported version {version}")));
    }
    let dim = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if body.len() != dim.saturating_mul(4) {
        return Err(HarnessError::format(path, format!("expected {dim} values, found {} bytes", body.len())));
    }
    let values = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    ParamVector::new(values).map_err(|e| HarnessError::format(path, e))
}

/// Appends one JSON object per round.
pub struct RoundLogWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl RoundLogWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(HarnessError::io(path))?;
        Ok(Self { path: path.to_path_buf(), out: BufWriter::new(file) })
    }

    pub fn append(&mut self, record: &RoundRecord) -> Result<()> {
        let line = serde_json::to_string(record).map_err(|e| HarnessError::format(&self.path, e))?;
        writeln!(self.out, "{line}").and_then(|_| self.out.flush()).map_err(HarnessError::io(&self.path))
    }
}

pub fn read_round_log(path: &Path) -> Result<Vec<RoundRecord>> {
    let file = File::open(path).map_err(HarnessError::io(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(HarnessError::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| HarnessError::format(path, format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| HarnessError::format(path, e))?;
    std::fs::write(path, text + "\n").map_err(HarnessError::io(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(HarnessError::io(path))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::format(path, e))
}

#[derive(Serialize, Deserialize)]
struct GeneratorMeta {
    arch: GanArch,
    target_label: usize,
    noise_dim: usize,
    training_iterations: u32,
    noise_dist: NoiseDist,
    id: u64,
    running_stats: Vec<f64>,
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Saves generator weights to `path` and its metadata to the `.json`
/// sidecar next to it.
pub fn save_generator(path: &Path, generator: &PoisonGenerator) -> Result<()> {
    write_params(path, &generator.generator_params)?;
    let meta = GeneratorMeta {
        arch: generator.arch,
        target_label: generator.target_label,
        noise_dim: generator.noise_dim,
        training_iterations: generator.training_iterations,
        noise_dist: generator.noise_dist,
        id: generator.id,
        running_stats: generator.running_stats.clone(),
    };
    write_json(&sidecar(path), &meta)
}

pub fn load_generator(path: &Path) -> Result<PoisonGenerator> {
    let generator_params = read_params(path)?;
    let meta: GeneratorMeta = read_json(&sidecar(path))?;
    Ok(PoisonGenerator {
        arch: meta.arch,
        generator_params,
        running_stats: meta.running_stats,
        target_label: meta.target_label,
        noise_dim: meta.noise_dim,
        training_iterations: meta.training_iterations,
        noise_dist: meta.noise_dist,
        id: meta.id,
    })
}
