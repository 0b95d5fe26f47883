//! Output directory helpers and the run manifest.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde_json::{json, Map, Value};

use crate::config::Config;
use crate::error::Result;

/// Creates `dir/name` and hands a buffered writer to `body`.
pub fn write_with<F>(dir: &Path, name: &str, body: F) -> Result<PathBuf>
where
    F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
{
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    let mut w = BufWriter::new(File::create(&path)?);
    body(&mut w)?;
    w.flush()?;
    Ok(path)
}

pub fn write_json(dir: &Path, name: &str, value: &Value) -> Result<PathBuf> {
    write_with(dir, name, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        writeln!(w)
    })
}

/// Manifest for one command: the full effective configuration (enough to
/// re-run it), the command, a timestamp, and the scalar results merged in
/// at the top level.
pub fn manifest(command: &str, cfg: &Config, results: Value) -> Value {
    let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let mut m = Map::new();
    m.insert("command".into(), json!(command));
    m.insert("timestamp".into(), json!(timestamp));
    m.insert("seed".into(), json!(cfg.sim.seed));
    m.insert("model".into(), serde_json::to_value(cfg.model).unwrap_or(Value::Null));
    m.insert("grid".into(), serde_json::to_value(cfg.grid).unwrap_or(Value::Null));
    m.insert("config".into(), serde_json::to_value(cfg).unwrap_or(Value::Null));
    if let Value::Object(r) = results {
        for (k, v) in r {
            m.insert(k, v);
        }
    }
    Value::Object(m)
}

/// Reads the configuration embedded in a manifest.
pub fn config_from_manifest(manifest: &Value) -> Result<Config> {
    Ok(serde_json::from_value(manifest["config"].clone())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trips_the_config() {
        let cfg = Config::from_json(
            r#"{"model": {"model": "linear_focus", "params": {"A": [-1, -2, 2, -1], "sigma": 1}},
                "grid": {"n_alpha": 32, "n_beta": 16, "r_in": 0.05, "r_out": 4}}"#,
        )
        .unwrap();
        let m = manifest("spectral", &cfg, json!({"Tbar": 3.0}));
        assert_eq!(m["Tbar"], 3.0);
        assert_eq!(m["command"], "spectral");
        assert_eq!(config_from_manifest(&m).unwrap(), cfg);
        let dir = tempfile::tempdir().unwrap();
        let p = write_json(dir.path(), "manifest.json", &m).unwrap();
        let back: Value = serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap();
        assert_eq!(back["grid"]["n_alpha"], 32);
    }
}
