//! Batch runner for persist-lab experiments: one JSON config in, a directory
//! of CSV/JSON tables plus a checksummed manifest out.

pub mod commands;
pub mod config;
pub mod error;
pub mod sweep;
pub mod table;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use persist_lab::persist::{ExponentFit, PersistenceEstimate, RelationReport};
use persist_lab::AccuracyWarning;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use commands::Outcome;
pub use config::ExperimentConfig;
pub use error::CliError;
use table::{json_bytes, Table};

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const WORKERS_ENV: &str = "PERSISTLAB_WORKERS";

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
    pub strict: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub name: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub id: String,
    pub command: String,
    pub config_sha256: String,
    pub artifact_version: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub workers: usize,
    pub files: Vec<FileDigest>,
    pub warnings: Vec<AccuracyWarning>,
}

/// A completed run: where it landed and what it computed.
#[derive(Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub fit: Option<ExponentFit>,
    pub estimates: Vec<PersistenceEstimate>,
    pub relations: Vec<RelationReport>,
    pub warnings: Vec<AccuracyWarning>,
}

/// Explicit flag, then config, then environment, then available cores.
pub fn resolve_workers(flag: Option<usize>, config: Option<usize>) -> Result<usize, CliError> {
    if let Some(w) = flag.or(config) {
        return if w == 0 { Err(CliError::Config("workers must be positive".into())) } else { Ok(w) };
    }
    match std::env::var(WORKERS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(w) if w > 0 => Ok(w),
            _ => Err(CliError::Config(format!("{WORKERS_ENV}={v:?} is not a positive integer"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}

pub fn pool(workers: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new().num_threads(workers).build().map_err(|e| CliError::Io(format!("thread pool: {e}")))
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn output_root(cfg: &ExperimentConfig, opts: &RunOptions) -> PathBuf {
    opts.out.clone().or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("out"))
}

/// Runs one config on its own worker pool.
pub fn run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunOutcome, CliError> {
    let workers = resolve_workers(opts.workers, cfg.workers)?;
    pool(workers)?.install(|| run_in_pool(cfg, opts, workers))
}

/// Runs one config on the current rayon pool. Outputs are staged in a hidden
/// directory and renamed into place, so `<out>/<id>` is either absent, a
/// previous complete run, or this complete run.
pub fn run_in_pool(cfg: &ExperimentConfig, opts: &RunOptions, workers: usize) -> Result<RunOutcome, CliError> {
    cfg.validate()?;
    let root = output_root(cfg, opts);
    let hash = cfg.hash();
    let dest = root.join(&cfg.id);
    if dest.exists() {
        let previous = fs::read(dest.join("manifest.json"))
            .ok()
            .and_then(|b| serde_json::from_slice::<Manifest>(&b).ok())
            .map(|m| m.config_sha256);
        if previous.as_deref() != Some(hash.as_str()) {
            return Err(CliError::Config(format!(
                "{} already holds a different experiment; pick a new id",
                dest.display()
            )));
        }
    }
    let staging = root.join(format!(".{}.partial", cfg.id));
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    fs::create_dir_all(&staging)?;

    let started = now();
    log::info!("running {} ({:?}) on {workers} worker(s)", cfg.id, cfg.command);
    let result = commands::execute(cfg, &staging).and_then(|outcome| {
        if opts.strict && !outcome.warnings.is_empty() {
            return Err(CliError::Strict(outcome.warnings));
        }
        Ok(outcome)
    });
    let outcome = match result {
        Ok(o) => o,
        Err(e) => {
            let _ = fs::remove_dir_all(&staging);
            return Err(e);
        }
    };
    for w in &outcome.warnings {
        log::warn!("{}: {}", w.source, w.message);
    }

    let finish = || -> Result<Manifest, CliError> {
        write_tables(&staging, &outcome.tables)?;
        let command =
            serde_json::to_value(cfg.command).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        let manifest = Manifest {
            schema_version: config::SCHEMA_VERSION,
            id: cfg.id.clone(),
            command,
            config_sha256: hash.clone(),
            artifact_version: ARTIFACT_VERSION.into(),
            started_unix: started,
            finished_unix: now(),
            workers,
            files: digest_dir(&staging)?,
            warnings: outcome.warnings.clone(),
        };
        fs::write(staging.join("manifest.json"), json_bytes(&manifest))?;
        if dest.exists() {
            fs::remove_dir_all(&dest)?;
        }
        fs::rename(&staging, &dest)?;
        Ok(manifest)
    };
    let manifest = match finish() {
        Ok(m) => m,
        Err(e) => {
            let _ = fs::remove_dir_all(&staging);
            return Err(e);
        }
    };
    Ok(RunOutcome {
        dir: dest,
        manifest,
        fit: outcome.fit,
        estimates: outcome.estimates,
        relations: outcome.relations,
        warnings: outcome.warnings,
    })
}

pub fn write_tables(dir: &Path, tables: &[Table]) -> Result<(), CliError> {
    for t in tables {
        fs::write(dir.join(format!("{}.csv", t.name)), t.to_csv())?;
        fs::write(dir.join(format!("{}.json", t.name)), t.to_json())?;
    }
    Ok(())
}

/// Digests of every regular file in `dir`, sorted by name.
pub fn digest_dir(dir: &Path) -> Result<Vec<FileDigest>, CliError> {
    let mut names: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n != "manifest.json")
        .collect();
    names.sort();
    names
        .into_iter()
        .map(|name| {
            let bytes = fs::read(dir.join(&name))?;
            Ok(FileDigest { sha256: config::hex(&Sha256::digest(&bytes)), bytes: bytes.len() as u64, name })
        })
        .collect()
}
