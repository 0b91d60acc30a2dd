//! Runnable experiments: replay generation, supervised and reinforcement
//! training, league runs and evaluation.

pub mod commands;
pub mod config;

pub use commands::*;
pub use config::{parse_pairs, read_pairs, RunConfig};

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

/// SHA-256 over every file below `dir`, visited in sorted path order, of
/// the relative path and contents.
pub fn hash_tree(dir: &Path) -> std::io::Result<String> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<std::path::PathBuf>) -> std::io::Result<()> {
        for e in fs::read_dir(dir)? {
            let p = e?.path();
            if p.is_dir() {
                walk(base, &p, out)?;
            } else {
                out.push(p.strip_prefix(base).expect("below base").to_path_buf());
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.to_string_lossy().as_bytes());
        h.update([0]);
        h.update(fs::read(dir.join(&f))?);
    }
    Ok(hex::encode(h.finalize()))
}
