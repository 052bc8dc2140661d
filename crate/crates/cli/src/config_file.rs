//! `key=value` config files, spliced into argv ahead of the user's flags.
//!
//! Keys are flag names without the leading dashes; underscores may stand in
//! for hyphens. `true` turns a switch on, `false` leaves it off. Because the
//! file's flags come first and every flag overrides itself, command-line
//! flags win, and unknown keys surface as ordinary unknown-flag errors.

use std::collections::HashSet;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use dtok::Error;

fn config_path(args: &[OsString]) -> Option<PathBuf> {
    let mut found = None;
    let mut it = args.iter().skip(1);
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--" {
            break;
        }
        if s == "--config" {
            found = it.next().map(PathBuf::from);
        } else if let Some(v) = s.strip_prefix("--config=") {
            found = Some(PathBuf::from(v));
        }
    }
    found
}

/// Flag tokens for the contents of a config file.
pub fn parse_file(text: &str, origin: &Path) -> Result<Vec<OsString>, Error> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let at = || format!("{}:{}", origin.display(), i + 1);
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("{}: expected key=value, got {line:?}", at())))?;
        let key = key.trim().replace('_', "-");
        if key.is_empty() || key.starts_with('-') {
            return Err(Error::Config(format!("{}: invalid key {key:?}", at())));
        }
        if key == "config" {
            return Err(Error::Config(format!("{}: config files cannot include others", at())));
        }
        if !seen.insert(key.clone()) {
            return Err(Error::Config(format!("{}: duplicate key {key:?}", at())));
        }
        let value = value.trim();
        let value = value
            .strip_prefix('"')
            .and_then(|v| v.strip_suffix('"'))
            .unwrap_or(value);
        match value {
            "true" => out.push(OsString::from(format!("--{key}"))),
            "false" => {}
            v => out.push(OsString::from(format!("--{key}={v}"))),
        }
    }
    Ok(out)
}

/// Inserts the flags from `--config FILE`, if given, right after the
/// subcommand name.
pub fn expand(args: Vec<OsString>, subcommands: &[String]) -> Result<Vec<OsString>, Error> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let Some(at) = args
        .iter()
        .position(|a| subcommands.iter().any(|s| a.to_str() == Some(s.as_str())))
    else {
        return Ok(args);
    };
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Config(format!("cannot read config file {}: {e}", path.display())))?;
    let flags = parse_file(&text, &path)?;
    let mut out = args;
    out.splice(at + 1..at + 1, flags);
    Ok(out)
}
