use std::fs;
use std::path::Path;

use lsnet::model::ModelSpec;
use serde::Serialize;

use crate::CliResult;

/// Provenance lines for every emitted file.
pub fn header(spec: Option<&ModelSpec>, seed: Option<u64>, extra: &[(&str, String)]) -> Vec<String> {
    let mut lines = vec![
        format!("lsnet {}", env!("CARGO_PKG_VERSION")),
        format!("command: {}", command_line()),
    ];
    if let Some(spec) = spec {
        lines.push(format!("spec: {} sha256:{}", spec.name, spec.digest_hex()));
    }
    if let Some(seed) = seed {
        lines.push(format!("seed: {seed}"));
    }
    lines.extend(extra.iter().map(|(k, v)| format!("{k}: {v}")));
    lines
}

pub fn command_line() -> String {
    std::env::args()
        .map(|a| {
            if a.is_empty() || a.contains(char::is_whitespace) {
                format!("{a:?}")
            } else {
                a
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Pretty JSON with a `provenance` field holding the header lines.
pub fn write_json<T: Serialize>(path: &Path, header: &[String], body: &T) -> CliResult {
    let mut value = serde_json::to_value(body).map_err(|e| crate::CliError::data(e.to_string()))?;
    if let serde_json::Value::Object(map) = &mut value {
        map.insert("provenance".into(), header.into());
    }
    let text = serde_json::to_string_pretty(&value).map_err(|e| crate::CliError::data(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

pub fn prepend_header(header: &[String], body: &str) -> String {
    let mut out: String = header.iter().map(|h| format!("# {h}\n")).collect();
    out.push_str(body);
    out
}
