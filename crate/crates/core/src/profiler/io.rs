//! Profile file format (version 1):
//!
//! ```json
//! {"version":1,"policy":"per_query_topk","context_length":1024,
//!  "profiles":[{"layer":0,"head":0,"points":[[0,0.0],[1024,1.0]],
//!               "provenance":{"request":"r0","task":"synthetic"}}]}
//! ```
//!
//! Unknown fields are rejected. Loading re-checks every curve invariant.

use super::{HeadId, HeadProfile, ProfileError, Provenance, RecoveryCurve};
use crate::attention::SelectionPolicy;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const PROFILE_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileFile {
    version: u32,
    policy: SelectionPolicy,
    context_length: usize,
    profiles: Vec<ProfileEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileEntry {
    layer: usize,
    head: usize,
    points: Vec<(usize, f64)>,
    provenance: Provenance,
}

/// Serializes `profiles` to the version-1 JSON document.
pub fn profiles_to_json(profiles: &[HeadProfile]) -> Result<String, ProfileError> {
    let first = profiles
        .first()
        .ok_or(ProfileError::Mixed("emptiness (no profiles)"))?;
    let policy = first.policy;
    let context_length = first.curve.context_length();
    if profiles.iter().any(|p| p.policy != policy) {
        return Err(ProfileError::Mixed("policy"));
    }
    if profiles
        .iter()
        .any(|p| p.curve.context_length() != context_length)
    {
        return Err(ProfileError::Mixed("context_length"));
    }
    let file = ProfileFile {
        version: PROFILE_FORMAT_VERSION,
        policy,
        context_length,
        profiles: profiles
            .iter()
            .map(|p| ProfileEntry {
                layer: p.id().layer,
                head: p.id().head,
                points: p.curve.points().to_vec(),
                provenance: p.provenance.clone(),
            })
            .collect(),
    };
    let mut text = serde_json::to_string(&file).expect("profile file serializes");
    text.push('\n');
    Ok(text)
}

pub fn save_profiles(path: impl AsRef<Path>, profiles: &[HeadProfile]) -> Result<(), ProfileError> {
    let path = path.as_ref();
    let text = profiles_to_json(profiles)?;
    fs::write(path, text).map_err(|source| ProfileError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_profiles(path: impl AsRef<Path>) -> Result<Vec<HeadProfile>, ProfileError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| ProfileError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_profiles(&text, &path.display().to_string())
}

/// Parses and validates a profile document. `origin` names the source in errors.
pub fn parse_profiles(text: &str, origin: &str) -> Result<Vec<HeadProfile>, ProfileError> {
    let file: ProfileFile = serde_json::from_str(text).map_err(|source| ProfileError::Parse {
        path: origin.to_string(),
        source,
    })?;
    let schema = |field: String, message: String| ProfileError::Schema {
        path: origin.to_string(),
        field,
        message,
    };
    if file.version != PROFILE_FORMAT_VERSION {
        return Err(schema(
            "version".into(),
            format!(
                "unsupported version {}, expected {PROFILE_FORMAT_VERSION}",
                file.version
            ),
        ));
    }
    if file.profiles.is_empty() {
        return Err(schema("profiles".into(), "no profiles".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    file.profiles
        .into_iter()
        .enumerate()
        .map(|(i, entry)| {
            let id = HeadId::new(entry.layer, entry.head);
            if !seen.insert(id) {
                return Err(schema(
                    format!("profiles[{i}]"),
                    format!("duplicate head {id}"),
                ));
            }
            if entry.provenance.request.is_empty() {
                return Err(schema(
                    format!("profiles[{i}].provenance.request"),
                    "must not be empty".into(),
                ));
            }
            let curve = RecoveryCurve::new(id, file.context_length, entry.points)
                .map_err(|e| schema(format!("profiles[{i}].points"), e.to_string()))?;
            Ok(HeadProfile {
                curve,
                provenance: entry.provenance,
                policy: file.policy,
            })
        })
        .collect()
}
