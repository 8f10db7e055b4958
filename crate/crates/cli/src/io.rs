//! File ingestion, table loading and the output envelope.

use crate::CliError;
use isothresh::limits::{LimitQuantiles, QuantileTables};
use isothresh::sample::{parse_csv, Domain, Obs, SampleBatch, Stage};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::path::{Path, PathBuf};

/// Every artifact embeds the configuration that produced it.
#[derive(Serialize)]
pub struct Envelope<C: Serialize, R: Serialize> {
    pub config: C,
    pub result: R,
}

pub fn read_observations(path: &Path) -> Result<Vec<Obs>, CliError> {
    let content = std::fs::read_to_string(path)
        .map_err(|e| CliError::validation(format!("cannot read {}: {e}", path.display())))?;
    parse_csv(&content)
        .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
}

/// Domain from a `lo,hi` flag value or inferred from the covariate range.
pub fn resolve_domain(spec: Option<&str>, obs: &[Obs]) -> Result<Domain, CliError> {
    match spec {
        Some(s) => {
            let parts: Vec<&str> = s.split(',').collect();
            let parsed: Option<(f64, f64)> = match parts.as_slice() {
                [a, b] => a.trim().parse().ok().zip(b.trim().parse().ok()),
                _ => None,
            };
            let (lo, hi) =
                parsed.ok_or_else(|| CliError::validation(format!("bad domain '{s}', want lo,hi")))?;
            Domain::new(lo, hi).map_err(CliError::from_validation)
        }
        None => {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for p in obs {
                lo = lo.min(p.x);
                hi = hi.max(p.x);
            }
            if !(lo < hi) {
                return Err(CliError::validation(
                    "cannot infer a domain from a single covariate value; pass --domain lo,hi".into(),
                ));
            }
            Domain::new(lo, hi).map_err(CliError::from_validation)
        }
    }
}

pub fn build_batch(
    obs: Vec<Obs>,
    domain: Domain,
    jitter: Option<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<SampleBatch, CliError> {
    match jitter {
        Some(eps) => SampleBatch::with_jitter(obs, domain, Stage::One, eps, rng),
        None => SampleBatch::new(obs, domain, Stage::One),
    }
    .map_err(CliError::from_validation)
}

/// Load a table from a JSON cache file, falling back to the embedded one.
fn load_table(path: Option<&Path>, embedded: &LimitQuantiles) -> Result<LimitQuantiles, CliError> {
    match path {
        Some(p) => {
            let s = std::fs::read_to_string(p)
                .map_err(|e| CliError::validation(format!("cannot read {}: {e}", p.display())))?;
            LimitQuantiles::from_json_str(&s).map_err(CliError::from_validation)
        }
        None => Ok(embedded.clone()),
    }
}

pub fn load_tables(
    chernoff: Option<&Path>,
    lr_limit: Option<&Path>,
) -> Result<QuantileTables, CliError> {
    Ok(QuantileTables {
        chernoff: load_table(chernoff, isothresh::limits::embedded_chernoff())?,
        lr_limit: load_table(lr_limit, isothresh::limits::embedded_lr_limit())?,
    })
}

pub fn write_json<T: Serialize>(out: Option<&Path>, value: &T) -> Result<(), CliError> {
    let body = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::runtime(format!("serialization failed: {e}")))?
        + "\n";
    match out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)
                    .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", dir.display())))?;
            }
            std::fs::write(path, body)
                .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))
        }
        None => {
            print!("{body}");
            Ok(())
        }
    }
}

pub fn write_text(path: &Path, body: &str) -> Result<(), CliError> {
    std::fs::write(path, body)
        .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))
}

/// Stable 64-bit FNV-1a over a string key.
pub fn stable_hash(key: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in key.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Cache file name for a tabulation request, keyed by its parameters.
pub fn cache_file_name(dist: &str, key: &str) -> String {
    format!("{dist}_{:016x}.json", stable_hash(key))
}

/// Resolve the cache target: an explicit `.json` path is used as-is; a
/// directory (or nothing, meaning the current directory) gets the keyed name.
pub fn resolve_cache_path(out: Option<&Path>, dist: &str, key: &str) -> PathBuf {
    match out {
        Some(p) if p.extension().is_some() => p.to_path_buf(),
        Some(dir) => dir.join(cache_file_name(dist, key)),
        None => PathBuf::from(cache_file_name(dist, key)),
    }
}
