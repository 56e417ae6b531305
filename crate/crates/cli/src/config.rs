//! Flat `key = value` configuration files.
//!
//! Each key names a long flag of the subcommand (kebab-case or snake_case).
//! The file is expanded into flags placed ahead of the command-line flags,
//! so anything given on the command line wins.

use std::ffi::OsString;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};

/// Parses a config file into `--flag value` pairs. `true` becomes a bare
/// switch and `false` drops the key.
pub fn file_args(path: &Path) -> Result<Vec<OsString>> {
    let text = fs::read_to_string(path).with_context(|| format!("--config: cannot read {}", path.display()))?;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("{}:{}: expected `key = value`, found `{raw}`", path.display(), i + 1);
        };
        let key = key.trim().replace('_', "-");
        let value = value.trim().trim_matches('"');
        if key.is_empty() || key == "config" {
            bail!("{}:{}: invalid key `{}`", path.display(), i + 1, key);
        }
        match value {
            "true" => out.push(format!("--{key}").into()),
            "false" => {}
            _ => {
                out.push(format!("--{key}").into());
                out.push(value.into());
            }
        }
    }
    Ok(out)
}

/// Removes `--config <path>` (or `--config=<path>`) from `args` and splices
/// the file's flags in right after the subcommand name.
pub fn expand(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut rest = Vec::with_capacity(args.len());
    let mut config = None;
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy().into_owned();
        if s == "--config" {
            let p = it.next().context("--config needs a path")?;
            config = Some(p);
        } else if let Some(p) = s.strip_prefix("--config=") {
            config = Some(p.into());
        } else {
            rest.push(a);
        }
    }
    let Some(path) = config else {
        return Ok(rest);
    };
    let extra = file_args(Path::new(&path))?;
    // program name, then the first non-flag argument is the subcommand
    let sub = rest
        .iter()
        .skip(1)
        .position(|a| !a.to_string_lossy().starts_with('-'))
        .map(|p| p + 2)
        .unwrap_or(rest.len());
    let mut merged: Vec<OsString> = rest[..sub].to_vec();
    merged.extend(extra);
    merged.extend_from_slice(&rest[sub..]);
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn file_flags_precede_command_line_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        fs::write(&path, "# comment\nsteps = 100\nlearning_rate = 0.01\nresume = true\nverbose = false\n").unwrap();
        let args = os(&["circuitlab", "train", "--steps", "5", "--config", path.to_str().unwrap()]);
        let merged = expand(args).unwrap();
        assert_eq!(
            merged,
            os(&["circuitlab", "train", "--steps", "100", "--learning-rate", "0.01", "--resume", "--steps", "5"])
        );
    }

    #[test]
    fn malformed_lines_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.conf");
        fs::write(&path, "steps 100\n").unwrap();
        let err = file_args(&path).unwrap_err().to_string();
        assert!(err.contains(":1:"), "{err}");
    }
}
