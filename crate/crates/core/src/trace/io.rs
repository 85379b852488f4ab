//! On-disk trace format, version 1.
//!
//! A trace is a directory holding `manifest.json` plus raw tensor blobs:
//! `attn.bin` (`[L][H][N][N]`) and one `grad_NNN.bin` per generated token,
//! each row-major little-endian `f32`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{TraceBundle, TraceDims};
use crate::error::{Error, Result};
use crate::grid::PatchGrid;

pub const FORMAT_VERSION: &str = "1";
const MANIFEST: &str = "manifest.json";
const ATTENTION_BLOB: &str = "attn.bin";

#[derive(Debug, Serialize, Deserialize)]
struct Blobs {
    attention: String,
    gradients: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: String,
    id: String,
    dims: TraceDims,
    patch_grid: PatchGrid,
    token_texts: Vec<String>,
    confidences: Vec<f64>,
    function_word_mask: Vec<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_path: Option<String>,
    blobs: Blobs,
}

fn gradient_blob_name(t: usize) -> String {
    format!("grad_{t:03}.bin")
}

fn read_blob(dir: &Path, name: &str, expected_floats: usize) -> Result<Vec<f32>> {
    let path = dir.join(name);
    if !path.is_file() {
        return Err(Error::MissingFile(path));
    }
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if bytes.len() != expected_floats * 4 {
        return Err(Error::ShapeMismatch(format!(
            "{}: {} bytes, manifest dims require {}",
            path.display(),
            bytes.len(),
            expected_floats * 4
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn write_blob(path: &Path, values: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads a trace directory, checking every blob length against the manifest dims.
pub fn load_trace(dir: impl AsRef<Path>) -> Result<TraceBundle> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST);
    if !manifest_path.is_file() {
        return Err(Error::MissingFile(manifest_path));
    }
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let corrupt = |reason: String| Error::CorruptManifest {
        path: manifest_path.clone(),
        reason,
    };
    // Check the version before the full schema so newer formats report cleanly.
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| corrupt(e.to_string()))?;
    match raw.get("format_version").and_then(|v| v.as_str()) {
        Some(FORMAT_VERSION) => {}
        Some(other) => {
            return Err(Error::VersionUnsupported {
                found: other.to_string(),
                supported: FORMAT_VERSION,
            })
        }
        None => return Err(corrupt("missing string field format_version".into())),
    }
    let m: Manifest = serde_json::from_value(raw).map_err(|e| corrupt(e.to_string()))?;

    let dims = m.dims;
    if !dims.is_valid() {
        return Err(corrupt(format!("dims must all be >= 1, got {dims:?}")));
    }
    let n = dims.seq_len();
    if m.token_texts.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} token texts for N={n}",
            m.token_texts.len()
        )));
    }
    if m.confidences.len() != dims.generated || m.function_word_mask.len() != dims.generated {
        return Err(Error::ShapeMismatch(format!(
            "confidences/function_word_mask must have T={} entries",
            dims.generated
        )));
    }
    if m.blobs.gradients.len() != dims.generated {
        return Err(Error::ShapeMismatch(format!(
            "{} gradient blobs for T={}",
            m.blobs.gradients.len(),
            dims.generated
        )));
    }
    let tensor_len = dims.tensor_len();
    let attention = read_blob(dir, &m.blobs.attention, tensor_len)?;
    let gradients = m
        .blobs
        .gradients
        .iter()
        .map(|name| read_blob(dir, name, tensor_len))
        .collect::<Result<Vec<_>>>()?;

    Ok(TraceBundle {
        id: m.id,
        dims,
        patch_grid: m.patch_grid,
        attention,
        gradients,
        token_texts: m.token_texts,
        confidences: m.confidences,
        function_word_mask: m.function_word_mask,
        image_path: m.image_path,
    })
}

/// Writes `t` as a version-1 trace directory, creating `dir` if needed.
pub fn save_trace(t: &TraceBundle, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let gradient_names: Vec<String> = (0..t.gradients.len()).map(gradient_blob_name).collect();
    let manifest = Manifest {
        format_version: FORMAT_VERSION.to_string(),
        id: t.id.clone(),
        dims: t.dims,
        patch_grid: t.patch_grid,
        token_texts: t.token_texts.clone(),
        confidences: t.confidences.clone(),
        function_word_mask: t.function_word_mask.clone(),
        image_path: t.image_path.clone(),
        blobs: Blobs {
            attention: ATTENTION_BLOB.to_string(),
            gradients: gradient_names.clone(),
        },
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let manifest_path: PathBuf = dir.join(MANIFEST);
    fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
    write_blob(&dir.join(ATTENTION_BLOB), &t.attention)?;
    for (g, name) in t.gradients.iter().zip(&gradient_names) {
        write_blob(&dir.join(name), g)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{synth_trace, SynthSpec};

    fn bundle() -> TraceBundle {
        synth_trace(&SynthSpec::new(TraceDims::new(2, 2, 4, 2, 3), vec![0, 3], 1.0, 11)).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let t = bundle();
        save_trace(&t, dir.path()).unwrap();
        let back = load_trace(dir.path()).unwrap();
        assert_eq!(back.dims.layers, 2);
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&t.attention), bits(&back.attention));
        assert_eq!(t, back);
    }

    #[test]
    fn absent_image_path_is_omitted() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = bundle();
        t.image_path = None;
        save_trace(&t, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        assert!(!text.contains("image_path"));
        assert_eq!(load_trace(dir.path()).unwrap().image_path, None);

        t.image_path = Some("img.png".into());
        save_trace(&t, dir.path()).unwrap();
        assert_eq!(load_trace(dir.path()).unwrap().image_path.as_deref(), Some("img.png"));
    }

    #[test]
    fn short_blob_is_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let t = bundle();
        save_trace(&t, dir.path()).unwrap();
        let n = t.dims.seq_len();
        // attention blob holding (N-1)x(N-1) per block instead of NxN
        let short = vec![0.0f32; 2 * 2 * (n - 1) * (n - 1)];
        write_blob(&dir.path().join(ATTENTION_BLOB), &short).unwrap();
        assert!(matches!(load_trace(dir.path()), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn newer_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_trace(&bundle(), dir.path()).unwrap();
        let p = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&p)
            .unwrap()
            .replace("\"format_version\": \"1\"", "\"format_version\": \"2\"");
        fs::write(&p, text).unwrap();
        match load_trace(dir.path()) {
            Err(Error::VersionUnsupported { found, .. }) => assert_eq!(found, "2"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn corrupt_and_missing() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_trace(dir.path()), Err(Error::MissingFile(_))));
        fs::write(dir.path().join(MANIFEST), "{ not json").unwrap();
        assert!(matches!(
            load_trace(dir.path()),
            Err(Error::CorruptManifest { .. })
        ));
        save_trace(&bundle(), dir.path()).unwrap();
        fs::remove_file(dir.path().join("grad_001.bin")).unwrap();
        assert!(matches!(load_trace(dir.path()), Err(Error::MissingFile(_))));
    }

    #[test]
    fn unwritable_path_is_io_failure() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("plain-file");
        fs::write(&file, b"x").unwrap();
        let err = save_trace(&bundle(), file.join("sub")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
