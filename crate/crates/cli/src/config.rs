//! Flag values overlaid by an optional JSON config file.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::commands::CliError;

/// Recursively copies `overlay` into `base`; objects merge key by key, any
/// other value replaces.
pub fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `from_flags` with the fields of the JSON file at `path` laid over it.
pub fn overlay<T: Serialize + DeserializeOwned>(
    from_flags: T,
    path: Option<&Path>,
) -> Result<T, CliError> {
    let Some(path) = path else {
        return Ok(from_flags);
    };
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let overlay: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let mut base = serde_json::to_value(from_flags).map_err(|e| CliError::Usage(e.to_string()))?;
    merge(&mut base, overlay);
    serde_json::from_value(base).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn nested_merge() {
        let mut base = json!({"a": 1, "b": {"c": 2, "d": 3}, "e": [1, 2]});
        merge(&mut base, json!({"b": {"d": 4}, "e": [9], "f": null}));
        assert_eq!(
            base,
            json!({"a": 1, "b": {"c": 2, "d": 4}, "e": [9], "f": null})
        );
    }
}
