//! Parameter checkpoints.
//!
//! Text format, version 1:
//!
//! ```text
//! # forkseq-checkpoint v1
//! # meta <key>=<value>        (zero or more)
//! name,shape,values
//! dec.local.w,120x9,0.01 -0.2 ...
//! ```
//!
//! `shape` is `x`-separated, `values` are space-separated in row-major order
//! and printed with shortest round-trip formatting, so reading a checkpoint
//! back reproduces every parameter bit for bit.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_HEADER: &str = "# forkseq-checkpoint v1";

pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// Copy every stored tensor into `store`; names and shapes must match.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, value) in &self.params {
            store.set_value(name, value.clone())?;
        }
        Ok(())
    }
}

pub fn write_checkpoint(path: &Path, store: &ParamStore, meta: &[(String, String)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{CHECKPOINT_HEADER}")?;
    for (k, v) in meta {
        if k.contains('=') || k.contains('\n') || v.contains('\n') {
            return Err(Error::Format(format!("invalid meta entry `{k}`")));
        }
        writeln!(w, "# meta {k}={v}")?;
    }
    writeln!(w, "name,shape,values")?;
    for id in store.ids() {
        let t = store.value(id);
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        let values: Vec<String> = t.data().iter().map(|v| format!("{v:?}")).collect();
        writeln!(w, "{},{},{}", store.name(id), shape.join("x"), values.join(" "))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines().enumerate();
    match lines.next() {
        Some((_, Ok(l))) if l.trim_end() == CHECKPOINT_HEADER => {}
        _ => return Err(Error::Format("missing checkpoint header".into())),
    }
    let mut meta = Vec::new();
    let mut params = Vec::new();
    let mut seen_columns = false;
    for (i, line) in lines {
        let line = line?;
        let lineno = i + 1;
        if let Some(rest) = line.strip_prefix("# meta ") {
            let (k, v) = rest.split_once('=').ok_or_else(|| Error::Parse {
                line: lineno,
                msg: "meta line without `=`".into(),
            })?;
            meta.push((k.to_string(), v.to_string()));
            continue;
        }
        if !seen_columns {
            if line.trim_end() != "name,shape,values" {
                return Err(Error::Format("missing `name,shape,values` header".into()));
            }
            seen_columns = true;
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, ',');
        let (name, shape, values) = match (parts.next(), parts.next(), parts.next()) {
            (Some(n), Some(s), Some(v)) => (n, s, v),
            _ => {
                return Err(Error::Parse {
                    line: lineno,
                    msg: "expected name,shape,values".into(),
                })
            }
        };
        let parse_err = |msg: String| Error::Parse { line: lineno, msg };
        let shape: Vec<usize> = shape
            .split('x')
            .map(|s| s.parse().map_err(|e| parse_err(format!("shape: {e}"))))
            .collect::<Result<_>>()?;
        let data: Vec<f64> = values
            .split_whitespace()
            .map(|s| s.parse().map_err(|e| parse_err(format!("value: {e}"))))
            .collect::<Result<_>>()?;
        params.push((name.to_string(), Tensor::new(shape, data)?));
    }
    Ok(Checkpoint { meta, params })
}
