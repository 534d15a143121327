//! `key=value` config files and the per-run config echo.
//!
//! Every command resolves its settings as: built-in defaults, then profile,
//! then `--config` file entries, then explicit flags. The resolved settings
//! are echoed into the output directory so a run is reproducible from its
//! artifacts alone.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use doctr_core::{Error, Result};

/// Parses a `key=value` file (blank lines and `#` comments allowed).
pub fn load_config_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::config(format!("{}:{}: expected key=value", path.display(), i + 1))
        })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// Typed lookup that consumes entries so unknown keys can be reported.
pub struct FileOverrides {
    entries: BTreeMap<String, String>,
}

impl FileOverrides {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let entries = match path {
            Some(p) => load_config_file(p)?,
            None => BTreeMap::new(),
        };
        Ok(FileOverrides { entries })
    }

    pub fn take<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|_| Error::config(format!("config key {key:?}: unparsable value {raw:?}"))),
        }
    }

    /// Errors if any entry was never consumed (catches typos).
    pub fn finish(self) -> Result<()> {
        if let Some(key) = self.entries.keys().next() {
            return Err(Error::config(format!("unknown config key {key:?}")));
        }
        Ok(())
    }
}

/// Writes the resolved configuration as sorted `key=value` lines.
pub fn echo_config(dir: &Path, entries: &[(String, String)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut sorted: Vec<_> = entries.to_vec();
    sorted.sort();
    let mut text = String::new();
    for (k, v) in sorted {
        text.push_str(&k);
        text.push('=');
        text.push_str(&v);
        text.push('\n');
    }
    fs::write(dir.join("config.txt"), text)?;
    Ok(())
}

/// Shorthand for building echo entries.
#[macro_export]
macro_rules! cfg_entries {
    ($(($k:expr, $v:expr)),* $(,)?) => {
        vec![$(($k.to_string(), $v.to_string())),*]
    };
}
