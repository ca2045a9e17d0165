//! Configuration resolution: defaults, then the `--config` JSON file, then
//! explicit flags — later layers win. Unknown keys anywhere are rejected.

use std::path::{Path, PathBuf};

use clvm::error::{ClvmError, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Recursive JSON overlay: objects merge key-wise, anything else replaces.
fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (key, val) in o {
                match b.get_mut(&key) {
                    Some(slot) => merge(slot, val),
                    None => {
                        b.insert(key, val);
                    }
                }
            }
        }
        (slot, val) => *slot = val,
    }
}

/// Build the effective configuration for one command.
///
/// `overrides` holds only the keys the user set on the command line, so a
/// config file can supply everything and still lose to explicit flags.
pub fn resolve<T>(config_path: Option<&Path>, overrides: serde_json::Value) -> Result<T>
where
    T: Default + Serialize + DeserializeOwned,
{
    let mut base = serde_json::to_value(T::default())
        .map_err(|e| ClvmError::Config(format!("cannot encode defaults: {e}")))?;
    if let Some(path) = config_path {
        let text = std::fs::read_to_string(path)?;
        let file_value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| ClvmError::ParseRow {
                row: e.line(),
                msg: format!("config file {}: {e}", path.display()),
            })?;
        if !file_value.is_object() {
            return Err(ClvmError::Config(format!(
                "config file {} must hold a JSON object",
                path.display()
            )));
        }
        merge(&mut base, file_value);
    }
    merge(&mut base, overrides);
    serde_json::from_value(base).map_err(|e| ClvmError::Config(format!("invalid configuration: {e}")))
}

/// Shorthand for building the override map from `Option` flags.
#[macro_export]
macro_rules! overrides {
    ($($key:literal => $val:expr),* $(,)?) => {{
        let mut map = serde_json::Map::new();
        $(
            if let Some(v) = $val {
                map.insert(
                    $key.to_string(),
                    serde_json::to_value(v).expect("flag value encodes as JSON"),
                );
            }
        )*
        serde_json::Value::Object(map)
    }};
}

/// Apply `--threads`/`CLVM_THREADS` and `--deterministic` to the process.
///
/// The numeric result of every command is identical at any thread count;
/// the knobs exist so runtimes can be pinned and the guarantee audited.
pub fn setup_runtime(threads: Option<usize>, deterministic: bool) -> Result<()> {
    let threads = match threads {
        Some(n) => Some(n),
        None => match std::env::var("CLVM_THREADS") {
            Ok(s) => Some(s.parse::<usize>().map_err(|_| {
                ClvmError::Config(format!("CLVM_THREADS must be a positive integer, got {s:?}"))
            })?),
            Err(_) => None,
        },
    };
    if let Some(n) = threads {
        if n == 0 {
            return Err(ClvmError::Config("thread count must be positive".into()));
        }
        #[cfg(feature = "parallel")]
        {
            // A second build_global in the same process is harmless: the
            // pool is already sized, and determinism never depends on it.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
        if n == 1 {
            clvm::exec::force_sequential(true);
        }
    }
    if deterministic {
        clvm::exec::force_sequential(true);
    }
    Ok(())
}

/// Create `--out-dir` if needed and return it; all outputs land inside.
pub fn prepare_out_dir(out_dir: &str) -> Result<PathBuf> {
    let dir = PathBuf::from(out_dir);
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Write a value as pretty JSON inside the output directory.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| ClvmError::Config(format!("cannot serialize output: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Default, Serialize, Deserialize, PartialEq)]
    #[serde(default, deny_unknown_fields)]
    struct Demo {
        alpha: f64,
        name: String,
        count: Option<usize>,
    }

    #[test]
    fn flags_override_config_file_which_overrides_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"alpha": 2.5, "name": "from-file"}"#).unwrap();
        let over = overrides! {
            "name" => Some("from-flag"),
            "count" => None::<usize>,
        };
        let demo: Demo = resolve(Some(&path), over).unwrap();
        assert_eq!(demo.alpha, 2.5);
        assert_eq!(demo.name, "from-flag");
        assert_eq!(demo.count, None);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"alhpa": 2.5}"#).unwrap();
        let err = resolve::<Demo>(Some(&path), serde_json::json!({})).unwrap_err();
        assert!(matches!(err, ClvmError::Config(_)), "{err}");
    }

    #[test]
    fn non_object_config_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, "[1, 2]").unwrap();
        assert!(resolve::<Demo>(Some(&path), serde_json::json!({})).is_err());
    }
}
