//! Output plumbing: JSON artifacts carrying the resolved config, and CSV
//! with comma delimiter, '.' decimal point, 17 significant digits.

use std::path::Path;

use serde::Serialize;

use crate::config::FileConfig;
use crate::error::{config_err, CliError};

/// 17 significant digits, enough to round-trip any f64.
pub fn sig17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Serializes `payload` (must be a JSON object) with the resolved config
/// injected under "resolved_config", pretty-printed, trailing newline.
/// serde_json orders object keys, so repeated invocations are byte-stable.
pub fn write_json_with_config<T: Serialize>(
    path: &Path,
    payload: &T,
    cfg: &FileConfig,
) -> Result<(), CliError> {
    let mut value = serde_json::to_value(payload)
        .map_err(|e| CliError::Config(format!("serialize {}: {e}", path.display())))?;
    let Some(obj) = value.as_object_mut() else {
        return config_err(format!("{}: payload is not a JSON object", path.display()));
    };
    obj.insert(
        "resolved_config".to_string(),
        serde_json::to_value(cfg)
            .map_err(|e| CliError::Config(format!("serialize config: {e}")))?,
    );
    write_json(path, &value)
}

pub fn write_json<T: Serialize>(path: &Path, payload: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(payload)
        .map_err(|e| CliError::Config(format!("serialize {}: {e}", path.display())))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<(), CliError> {
    let mut text = String::with_capacity(rows.len() * 64 + header.len() + 1);
    text.push_str(header);
    text.push('\n');
    for row in rows {
        text.push_str(row);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}
