//! Flat `key=value` run configuration and run directories.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use forkseq::model::ModelSpec;
use forkseq::encoders::EncoderFamily;
use forkseq::{Error, Result};

/// One accepted key with its default (`""` means unset).
pub struct KeyDef {
    pub key: &'static str,
    pub default: &'static str,
}

pub const fn key(key: &'static str, default: &'static str) -> KeyDef {
    KeyDef { key, default }
}

/// Model keys accepted by `train`, in the checkpoint's naming.
/// Family and horizon have their own top-level keys.
fn model_keys() -> Vec<String> {
    ModelSpec::new(EncoderFamily::Cnn, 1)
        .to_pairs()
        .into_iter()
        .map(|(k, _)| k)
        .filter(|k| k != "encoder.family" && k != "decoder.horizon")
        .collect()
}

/// Parse a config file body. Blank lines and `#` comments are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("config line {}: expected key=value", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub command: &'static str,
    values: BTreeMap<String, String>,
}

impl RunConfig {
    /// Defaults, then the config file, then `--set` pairs, then typed flags.
    pub fn resolve(
        command: &'static str,
        defs: &[KeyDef],
        model_keys_allowed: bool,
        file: Option<&Path>,
        sets: &[String],
        flags: &[(&str, Option<String>)],
    ) -> Result<Self> {
        let model = if model_keys_allowed { model_keys() } else { Vec::new() };
        let known = |k: &str| defs.iter().any(|d| d.key == k) || model.iter().any(|m| m == k);
        let mut values: BTreeMap<String, String> = defs
            .iter()
            .filter(|d| !d.default.is_empty())
            .map(|d| (d.key.to_string(), d.default.to_string()))
            .collect();
        let mut apply = |k: String, v: String, origin: &str| {
            if !known(&k) {
                return Err(Error::Config(format!("unknown key `{k}` ({origin}) for `{command}`")));
            }
            values.insert(k, v);
            Ok(())
        };
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
            for (k, v) in parse_pairs(&text)? {
                apply(k, v, "config file")?;
            }
        }
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{s}`")))?;
            apply(k.trim().to_string(), v.trim().to_string(), "--set")?;
        }
        for (k, v) in flags {
            if let Some(v) = v {
                apply(k.to_string(), v.clone(), "flag")?;
            }
        }
        Ok(Self { command, values })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str).filter(|v| !v.is_empty())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("`{key}` is required for `{}`", self.command)))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.require(key)?;
        v.parse()
            .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
    }

    /// Value of `key`, or `None` when it is unset or `auto`.
    pub fn parse_auto<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None | Some("auto") => Ok(None),
            Some(_) => self.parse(key).map(Some),
        }
    }

    /// Comma or semicolon separated list; `a..b` expands an integer range.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let v = self.require(key)?;
        let bad = || Error::Config(format!("invalid list `{v}` for `{key}`"));
        let mut out = Vec::new();
        for item in v.split([',', ';']).map(str::trim).filter(|s| !s.is_empty()) {
            if let Some((a, b)) = item.split_once("..") {
                let (a, b): (usize, usize) = (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
                for i in a..=b {
                    out.push(i.to_string().parse().map_err(|_| bad())?);
                }
            } else {
                out.push(item.parse().map_err(|_| bad())?);
            }
        }
        if out.is_empty() {
            return Err(bad());
        }
        Ok(out)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.values.insert(key.to_string(), value.into());
    }

    /// Explicitly set `encoder.*` / `decoder.*` keys.
    pub fn model_pairs(&self) -> Vec<(String, String)> {
        self.values
            .iter()
            .filter(|(k, _)| k.starts_with("encoder.") || k.starts_with("decoder."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// Resolved configuration in the same format the loader reads.
    pub fn snapshot(&self) -> String {
        let mut s = format!("# forkseq {} resolved configuration\n", self.command);
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}

/// Output directory of one command invocation.
pub struct RunDir {
    pub path: PathBuf,
    outputs: Vec<String>,
}

impl RunDir {
    /// `out` when given, otherwise `runs/<timestamp>-<command>-<seed>`.
    pub fn create(cfg: &mut RunConfig) -> Result<Self> {
        let path = match cfg.get("out") {
            Some(p) => PathBuf::from(p),
            None => {
                let stamp = chrono::Local::now().format("%Y%m%dT%H%M%S%.3f");
                let seed = cfg.get("seed").unwrap_or("0");
                PathBuf::from("runs").join(format!("{stamp}-{}-{seed}", cfg.command))
            }
        };
        std::fs::create_dir_all(&path)?;
        cfg.set("out", path.to_string_lossy());
        std::fs::write(path.join("config.txt"), cfg.snapshot())?;
        Ok(Self {
            path,
            outputs: Vec::new(),
        })
    }

    /// Path of an output file, recorded in the manifest.
    pub fn file(&mut self, name: &str) -> PathBuf {
        if !self.outputs.iter().any(|o| o == name) {
            self.outputs.push(name.to_string());
        }
        self.path.join(name)
    }

    /// Rewrite the snapshot (when resolution added keys) and the manifest.
    pub fn finish(&self, cfg: &RunConfig) -> Result<()> {
        std::fs::write(self.path.join("config.txt"), cfg.snapshot())?;
        let mut m = String::new();
        let _ = writeln!(m, "command={}", cfg.command);
        let _ = writeln!(m, "seed={}", cfg.get("seed").unwrap_or(""));
        let _ = writeln!(m, "version={}", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(m, "finished={}", chrono::Local::now().to_rfc3339());
        let _ = writeln!(m, "config=config.txt");
        for o in &self.outputs {
            let _ = writeln!(m, "output={o}");
        }
        std::fs::write(self.path.join("manifest.txt"), m)?;
        Ok(())
    }
}
