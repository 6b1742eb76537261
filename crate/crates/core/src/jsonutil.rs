//! Canonical JSON rendering.
//!
//! Archive manifests and run records must serialize to identical bytes for
//! identical content, so every JSON document we persist goes through one
//! routine: object keys sorted, two-space indent, trailing newline.

use serde::Serialize;

/// Serializes any value to canonical JSON bytes.
///
/// The value is first converted to a `serde_json::Value`, whose object maps
/// iterate in sorted key order, so field declaration order never leaks into
/// the output.
pub fn to_canonical_json<T: Serialize>(value: &T) -> serde_json::Result<String> {
    let tree = serde_json::to_value(value)?;
    let mut text = serde_json::to_string_pretty(&tree)?;
    text.push('\n');
    Ok(text)
}
