//! Key=value config files. Lines are `key = value`; `#` starts a comment.
//! Command-line flags always override file entries.

use anyhow::{bail, Context, Result};
use std::collections::HashMap;
use std::path::Path;

#[derive(Debug, Default, Clone)]
pub struct ConfigFile {
    entries: HashMap<String, String>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(ConfigFile::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        let mut entries = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!("config line {} is not `key = value`: {line}", i + 1);
            };
            entries.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(ConfigFile { entries })
    }

    pub fn get<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some(raw) => match raw.parse() {
                Ok(v) => Ok(Some(v)),
                Err(e) => bail!("config key `{key}`: {e}"),
            },
        }
    }

    /// CLI flag wins, then the file entry, then the default.
    pub fn resolve<T: std::str::FromStr + Clone>(
        &self,
        flag: Option<T>,
        key: &str,
        default: T,
    ) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = flag {
            return Ok(v);
        }
        Ok(self.get(key)?.unwrap_or(default))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn parses_and_resolves() {
        let mut path = std::env::temp_dir();
        path.push(format!("dispatchlab-config-{}.txt", std::process::id()));
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "# comment\nseed = 42\nkappa = 0.05").unwrap();
        let cfg = ConfigFile::load(Some(&path)).unwrap();
        assert_eq!(cfg.resolve(None, "seed", 1u64).unwrap(), 42);
        assert_eq!(cfg.resolve(Some(7u64), "seed", 1).unwrap(), 7);
        assert_eq!(cfg.resolve(None::<f64>, "missing", 0.5).unwrap(), 0.5);
        assert!((cfg.resolve(None::<f64>, "kappa", 0.0).unwrap() - 0.05).abs() < 1e-12);
    }

    #[test]
    fn rejects_malformed_lines() {
        let mut path = std::env::temp_dir();
        path.push(format!("dispatchlab-bad-config-{}.txt", std::process::id()));
        std::fs::write(&path, "not a kv line\n").unwrap();
        assert!(ConfigFile::load(Some(&path)).is_err());
    }
}
