//! Checkpoint files and the per-generation metrics CSV.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "DNEC" | version u32 = 1 | generation u64 | master_seed u64
//! | config_json_len u64 | config_json (UTF-8)
//! | genome_len u64 | genome_len x f32
//! ```

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::Result;
use crate::evolution::{EvolutionConfig, GenerationStats, TrainSink, TrainState};
use crate::model::{genome_len, Genome, ModelConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DNEC";
pub const CHECKPOINT_VERSION: u32 = 1;

pub const METRICS_HEADER: &str =
    "generation,best_child,mean_child,worst_child,parent_fitness,test_accuracy,wall_ms";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic {0:?}, expected \"DNEC\"")]
    BadMagic(Vec<u8>),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("genome length mismatch: config needs {expected}, file has {actual}")]
    LengthMismatch { expected: u64, actual: u64 },
    #[error("truncated checkpoint while reading {0}")]
    Truncated(&'static str),
    #[error("{0} trailing bytes after genome")]
    TrailingBytes(usize),
    #[error("invalid config block: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("metrics {path}: {message}")]
    Metrics { path: PathBuf, message: String },
}

/// Both configs, serialized into the checkpoint as one JSON object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub evolution: EvolutionConfig,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub generation: u64,
    pub master_seed: u64,
    pub config: RunConfig,
    pub genome: Genome,
}

impl Checkpoint {
    pub fn encode(&self) -> std::result::Result<Vec<u8>, CheckpointError> {
        let json = serde_json::to_string(&self.config)
            .map_err(|e| CheckpointError::Config(e.to_string()))?;
        let mut out = Vec::with_capacity(40 + json.len() + 4 * self.genome.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.generation.to_le_bytes());
        out.extend_from_slice(&self.master_seed.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(json.as_bytes());
        out.extend_from_slice(&(self.genome.len() as u64).to_le_bytes());
        for v in self.genome.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic(magic.to_vec()));
        }
        let version = u32::from_le_bytes(r.array("version")?);
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let generation = u64::from_le_bytes(r.array("generation")?);
        let master_seed = u64::from_le_bytes(r.array("master_seed")?);
        let json_len = u64::from_le_bytes(r.array("config length")?);
        let json_len = usize::try_from(json_len).map_err(|_| CheckpointError::Truncated("config"))?;
        let json = r.take(json_len, "config")?;
        let config: RunConfig =
            serde_json::from_slice(json).map_err(|e| CheckpointError::Config(e.to_string()))?;
        config
            .model
            .validate()
            .map_err(|e| CheckpointError::Config(e.to_string()))?;
        let len = u64::from_le_bytes(r.array("genome length")?);
        let expected = genome_len(&config.model) as u64;
        if len != expected {
            return Err(CheckpointError::LengthMismatch {
                expected,
                actual: len,
            });
        }
        let raw = r.take(len as usize * 4, "genome")?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if r.pos != bytes.len() {
            return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(Self {
            generation,
            master_seed,
            config,
            genome: Genome::new(values),
        })
    }

    pub fn state(&self) -> TrainState {
        TrainState {
            generation: self.generation,
            genome: self.genome.clone(),
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> std::result::Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(CheckpointError::Truncated(what))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self, what: &'static str) -> std::result::Result<[u8; N], CheckpointError> {
        Ok(self.take(N, what)?.try_into().expect("take returns N bytes"))
    }
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes to a sibling temp file, syncs, then renames over `path`.
pub fn save_checkpoint(path: impl AsRef<Path>, checkpoint: &Checkpoint) -> std::result::Result<(), CheckpointError> {
    let path = path.as_ref();
    let bytes = checkpoint.encode()?;
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = File::create(&tmp).map_err(io_error(&tmp))?;
        f.write_all(&bytes).map_err(io_error(&tmp))?;
        f.sync_all().map_err(io_error(&tmp))?;
    }
    std::fs::rename(&tmp, path).map_err(io_error(path))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> std::result::Result<Checkpoint, CheckpointError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(io_error(path))?;
    Checkpoint::decode(&bytes)
}

fn fmt_row(s: &GenerationStats) -> String {
    let test = s.test_accuracy.map(|a| a.to_string()).unwrap_or_default();
    format!(
        "{},{},{},{},{},{},{}",
        s.generation, s.best_child, s.mean_child, s.worst_child, s.parent_fitness, test, s.wall_ms
    )
}

fn parse_row(line: &str) -> std::result::Result<GenerationStats, String> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != 7 {
        return Err(format!("expected 7 fields, found {}", fields.len()));
    }
    fn num<T: std::str::FromStr>(name: &str, v: &str) -> std::result::Result<T, String> {
        v.parse().map_err(|_| format!("bad {name} {v:?}"))
    }
    Ok(GenerationStats {
        generation: num("generation", fields[0])?,
        best_child: num("best_child", fields[1])?,
        mean_child: num("mean_child", fields[2])?,
        worst_child: num("worst_child", fields[3])?,
        parent_fitness: num("parent_fitness", fields[4])?,
        test_accuracy: match fields[5] {
            "" => None,
            v => Some(num("test_accuracy", v)?),
        },
        wall_ms: num("wall_ms", fields[6])?,
    })
}

/// Parses a metrics CSV written by [`MetricsWriter`].
pub fn read_metrics(path: impl AsRef<Path>) -> std::result::Result<Vec<GenerationStats>, CheckpointError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(io_error(path))?;
    let bad = |message: String| CheckpointError::Metrics {
        path: path.to_path_buf(),
        message,
    };
    let mut lines = text.lines();
    match lines.next() {
        Some(METRICS_HEADER) => {}
        None => return Ok(Vec::new()),
        Some(other) => return Err(bad(format!("unexpected header {other:?}"))),
    }
    lines
        .enumerate()
        .map(|(i, l)| parse_row(l).map_err(|m| bad(format!("line {}: {m}", i + 2))))
        .collect()
}

/// Append-only metrics CSV; writes the header once and rejects
/// non-increasing generation indices.
pub struct MetricsWriter {
    out: BufWriter<File>,
    path: PathBuf,
    last_generation: Option<u64>,
}

impl MetricsWriter {
    /// Starts a fresh file, replacing any existing one.
    pub fn create(path: impl AsRef<Path>) -> std::result::Result<Self, CheckpointError> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path).map_err(io_error(&path))?;
        let mut out = BufWriter::new(file);
        writeln!(out, "{METRICS_HEADER}").map_err(io_error(&path))?;
        out.flush().map_err(io_error(&path))?;
        Ok(Self {
            out,
            path,
            last_generation: None,
        })
    }

    /// Continues an existing file after `generation`, dropping any rows past it.
    pub fn resume(path: impl AsRef<Path>, generation: u64) -> std::result::Result<Self, CheckpointError> {
        let path = path.as_ref().to_path_buf();
        if !path.exists() {
            return Self::create(&path);
        }
        let kept: Vec<GenerationStats> = read_metrics(&path)?
            .into_iter()
            .filter(|s| s.generation <= generation)
            .collect();
        let mut writer = Self::create(&path)?;
        for s in &kept {
            writer.append(s)?;
        }
        Ok(writer)
    }

    pub fn append(&mut self, stats: &GenerationStats) -> std::result::Result<(), CheckpointError> {
        if self.last_generation.is_some_and(|g| stats.generation <= g) {
            return Err(CheckpointError::Metrics {
                path: self.path.clone(),
                message: format!(
                    "generation {} does not follow {}",
                    stats.generation,
                    self.last_generation.unwrap_or_default()
                ),
            });
        }
        writeln!(self.out, "{}", fmt_row(stats)).map_err(io_error(&self.path))?;
        self.out.flush().map_err(io_error(&self.path))?;
        self.last_generation = Some(stats.generation);
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Writes metrics rows and checkpoints (every `checkpoint_every` generations and at exit).
pub struct FileSink {
    pub metrics: MetricsWriter,
    pub checkpoint_path: PathBuf,
    pub checkpoint_every: u64,
    pub config: RunConfig,
}

impl FileSink {
    fn write(&self, state: &TrainState) -> Result<()> {
        let ck = Checkpoint {
            generation: state.generation,
            master_seed: self.config.evolution.master_seed,
            config: self.config.clone(),
            genome: state.genome.clone(),
        };
        save_checkpoint(&self.checkpoint_path, &ck)?;
        Ok(())
    }
}

impl TrainSink for FileSink {
    fn record(&mut self, stats: &GenerationStats) -> Result<()> {
        self.metrics.append(stats)?;
        Ok(())
    }

    fn checkpoint(&mut self, state: &TrainState, is_final: bool) -> Result<()> {
        let scheduled = self.checkpoint_every > 0 && state.generation % self.checkpoint_every == 0;
        if is_final || scheduled {
            self.write(state)?;
        }
        Ok(())
    }
}
