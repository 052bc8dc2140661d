//! Output plumbing: atomic report files, stdout JSON, per-utterance paths.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use dtok::Error;
use serde::Serialize;

/// Writes `bytes` to a temporary file next to `path`, then renames it over.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(Error::from)?;
    tmp.write_all(bytes).map_err(Error::from)?;
    tmp.as_file().sync_all().map_err(Error::from)?;
    tmp.persist(path)
        .map_err(|e| Error::from(e.error))
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn write_json_lines<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

pub fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out).map_err(Error::from)?;
    Ok(())
}

/// `<dir>/<utt_id><suffix>`, refusing ids that would escape `dir`.
pub fn utterance_path(dir: &Path, utt_id: &str, suffix: &str) -> Result<PathBuf> {
    let bad = utt_id.is_empty()
        || utt_id == "."
        || utt_id == ".."
        || utt_id.contains(['/', '\\', '\0']);
    if bad {
        return Err(Error::Validation(format!(
            "utterance id {utt_id:?} cannot be used as a file name"
        ))
        .into());
    }
    Ok(dir.join(format!("{utt_id}{suffix}")))
}

/// Creates `out_dir` and checks that it is not the directory an input
/// manifest lives in, so outputs never overwrite inputs.
pub fn prepare_out_dir(out_dir: &Path, inputs: &[&Path]) -> Result<()> {
    fs::create_dir_all(out_dir)
        .map_err(Error::from)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    let out = fs::canonicalize(out_dir).map_err(Error::from)?;
    for input in inputs {
        let dir = match input.parent() {
            Some(d) if !d.as_os_str().is_empty() => d,
            _ => Path::new("."),
        };
        if fs::canonicalize(dir).map_err(Error::from)? == out {
            return Err(Error::Config(format!(
                "output directory {} holds the input {}; choose another",
                out_dir.display(),
                input.display()
            ))
            .into());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn utterance_ids_must_be_plain_names() {
        let d = Path::new("out");
        assert_eq!(utterance_path(d, "u1", ".dtts").unwrap(), d.join("u1.dtts"));
        for bad in ["", ".", "..", "a/b", "a\\b"] {
            assert!(utterance_path(d, bad, ".dtts").is_err(), "{bad:?}");
        }
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
