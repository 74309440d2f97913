//! Model directory format: a `model.json` manifest next to raw
//! little-endian binary blobs (row-major, no header).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AnnModel, Layer, LayerKind, NormalizationState};
use crate::error::{QuartzError, Result};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "model.json";

/// Element type of the weight blobs. `f32` is the interchange default;
/// `f64` is written only when a value has no exact binary32 form, so that
/// saving and loading stays the identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BlobDtype {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    #[serde(default)]
    name: String,
    input_shape: Vec<usize>,
    layers: Vec<LayerEntry>,
    normalization: Option<NormalizationState>,
    #[serde(default, skip_serializing_if = "is_f32")]
    dtype: BlobDtype,
}

fn is_f32(d: &BlobDtype) -> bool {
    *d == BlobDtype::F32
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct LayerEntry {
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    in_features: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    out_features: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    in_channels: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    out_channels: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    kernel_size: Option<[usize; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    stride: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    padding: Option<usize>,
    #[serde(default)]
    rectify: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    weight_file: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bias_file: Option<String>,
}

/// Reads a model directory, validating shapes and values.
pub fn load_model(dir: impl AsRef<Path>) -> Result<AnnModel> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path).map_err(|e| QuartzError::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| QuartzError::Manifest {
        path: manifest_path.clone(),
        message: e.to_string(),
    })?;
    let missing = |field: &str, i: usize| QuartzError::Manifest {
        path: manifest_path.clone(),
        message: format!("layer {i} is missing `{field}`"),
    };

    let mut layers = Vec::with_capacity(manifest.layers.len());
    for (i, entry) in manifest.layers.iter().enumerate() {
        let layer = match entry.kind.as_str() {
            "dense" => {
                let out = entry.out_features.ok_or_else(|| missing("out_features", i))?;
                let inp = entry.in_features.ok_or_else(|| missing("in_features", i))?;
                let (w, b) = read_params(dir, entry, i, vec![out, inp], out, manifest.dtype, &missing)?;
                Layer::dense(w, b, entry.rectify)?
            }
            "conv2d" => {
                let oc = entry.out_channels.ok_or_else(|| missing("out_channels", i))?;
                let ic = entry.in_channels.ok_or_else(|| missing("in_channels", i))?;
                let [kh, kw] = entry.kernel_size.ok_or_else(|| missing("kernel_size", i))?;
                let (w, b) = read_params(dir, entry, i, vec![oc, ic, kh, kw], oc, manifest.dtype, &missing)?;
                Layer::conv2d(w, b, entry.stride.unwrap_or(1), entry.padding.unwrap_or(0), entry.rectify)?
            }
            "max_pool2d" => {
                let size = entry.size.ok_or_else(|| missing("size", i))?;
                Layer::max_pool(size, entry.stride.unwrap_or(size))?
            }
            "flatten" => Layer::flatten(),
            other => return Err(QuartzError::UnknownLayerKind(other.to_string())),
        };
        layers.push(layer);
    }

    let mut model = AnnModel::new(manifest.name, manifest.input_shape, layers)?;
    model.normalization = manifest.normalization;
    Ok(model)
}

#[allow(clippy::too_many_arguments)]
fn read_params(
    dir: &Path,
    entry: &LayerEntry,
    i: usize,
    wshape: Vec<usize>,
    out: usize,
    dtype: BlobDtype,
    missing: &dyn Fn(&str, usize) -> QuartzError,
) -> Result<(Tensor, Tensor)> {
    let wfile = entry.weight_file.as_deref().ok_or_else(|| missing("weight_file", i))?;
    let bfile = entry.bias_file.as_deref().ok_or_else(|| missing("bias_file", i))?;
    let w = read_blob(&dir.join(wfile), wshape, dtype)?;
    let b = read_blob(&dir.join(bfile), vec![out], dtype)?;
    Ok((w, b))
}

fn read_blob(path: &Path, shape: Vec<usize>, dtype: BlobDtype) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| QuartzError::io(path, e))?;
    let expected: usize = shape.iter().product();
    let width = match dtype {
        BlobDtype::F32 => 4,
        BlobDtype::F64 => 8,
    };
    if bytes.len() != expected * width {
        return Err(QuartzError::Shape(format!(
            "{} holds {} bytes but shape {shape:?} needs {} values of {width} bytes",
            path.display(),
            bytes.len(),
            expected
        )));
    }
    let data: Vec<f64> = match dtype {
        BlobDtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect(),
        BlobDtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Tensor::new(shape, data).map_err(|e| match e {
        QuartzError::NonFinite(_) => QuartzError::NonFinite(path.display().to_string()),
        other => other,
    })
}

/// Writes a model directory. Blobs are binary32 unless some value would
/// not survive the narrowing, in which case the whole model is stored as
/// binary64 and the manifest says so.
pub fn save_model(model: &AnnModel, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| QuartzError::io(dir, e))?;

    let exact_f32 = model
        .layers()
        .iter()
        .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
        .flat_map(|t| t.data())
        .all(|&v| f64::from(v as f32) == v);
    let dtype = if exact_f32 { BlobDtype::F32 } else { BlobDtype::F64 };

    let mut entries = Vec::with_capacity(model.layers().len());
    for (i, layer) in model.layers().iter().enumerate() {
        let mut e = LayerEntry {
            kind: layer.kind.name().to_string(),
            rectify: layer.rectify,
            ..Default::default()
        };
        match layer.kind {
            LayerKind::Dense => {
                let s = layer.weights_ref().shape();
                e.out_features = Some(s[0]);
                e.in_features = Some(s[1]);
            }
            LayerKind::Conv2d { stride, padding } => {
                let s = layer.weights_ref().shape();
                e.out_channels = Some(s[0]);
                e.in_channels = Some(s[1]);
                e.kernel_size = Some([s[2], s[3]]);
                e.stride = Some(stride);
                e.padding = Some(padding);
            }
            LayerKind::MaxPool2d { size, stride } => {
                e.size = Some(size);
                e.stride = Some(stride);
            }
            LayerKind::Flatten => {}
        }
        if layer.is_parameter() {
            let wname = format!("layer{i}_weight.bin");
            let bname = format!("layer{i}_bias.bin");
            write_blob(&dir.join(&wname), layer.weights_ref(), dtype)?;
            write_blob(&dir.join(&bname), layer.bias_ref(), dtype)?;
            e.weight_file = Some(wname);
            e.bias_file = Some(bname);
        }
        entries.push(e);
    }

    let manifest = Manifest {
        name: model.name.clone(),
        input_shape: model.input_shape().to_vec(),
        layers: entries,
        normalization: model.normalization.clone(),
        dtype,
    };
    let path: PathBuf = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(|e| QuartzError::io(&path, e))
}

fn write_blob(path: &Path, t: &Tensor, dtype: BlobDtype) -> Result<()> {
    let mut bytes = Vec::with_capacity(t.len() * 8);
    for &v in t.data() {
        match dtype {
            BlobDtype::F32 => bytes.extend_from_slice(&(v as f32).to_le_bytes()),
            BlobDtype::F64 => bytes.extend_from_slice(&v.to_le_bytes()),
        }
    }
    fs::write(path, bytes).map_err(|e| QuartzError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, contents: &[u8]) {
        fs::write(dir.join(name), contents).unwrap();
    }

    fn f32_bytes(vals: &[f32]) -> Vec<u8> {
        vals.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    #[test]
    fn loads_minimal_dense_manifest() {
        let dir = tempfile::tempdir().unwrap();
        write(
            dir.path(),
            MANIFEST,
            br#"{"input_shape":[2],"layers":[{"kind":"dense","in_features":2,"out_features":2,"rectify":true,"weight_file":"w.bin","bias_file":"b.bin"}],"normalization":null}"#,
        );
        write(dir.path(), "w.bin", &f32_bytes(&[1.0, -1.0, -1.0, 1.0]));
        write(dir.path(), "b.bin", &f32_bytes(&[0.0, 0.0]));
        let m = load_model(dir.path()).unwrap();
        assert_eq!(m.layers().len(), 1);
        assert_eq!(m.layers()[0].weights.as_ref().unwrap().data(), &[1.0, -1.0, -1.0, 1.0]);
    }

    #[test]
    fn short_blob_is_a_shape_error() {
        let dir = tempfile::tempdir().unwrap();
        write(
            dir.path(),
            MANIFEST,
            br#"{"input_shape":[2],"layers":[{"kind":"dense","in_features":2,"out_features":3,"rectify":true,"weight_file":"w.bin","bias_file":"b.bin"}],"normalization":null}"#,
        );
        write(dir.path(), "w.bin", &f32_bytes(&[0.0; 5]));
        write(dir.path(), "b.bin", &f32_bytes(&[0.0; 3]));
        assert!(matches!(load_model(dir.path()), Err(QuartzError::Shape(_))));
    }

    #[test]
    fn unknown_kind_and_missing_files_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_model(dir.path()), Err(QuartzError::Io { .. })));
        write(
            dir.path(),
            MANIFEST,
            br#"{"input_shape":[2],"layers":[{"kind":"batch_norm"}],"normalization":null}"#,
        );
        assert!(matches!(
            load_model(dir.path()),
            Err(QuartzError::UnknownLayerKind(k)) if k == "batch_norm"
        ));
    }

    #[test]
    fn non_finite_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write(
            dir.path(),
            MANIFEST,
            br#"{"input_shape":[1],"layers":[{"kind":"dense","in_features":1,"out_features":1,"weight_file":"w.bin","bias_file":"b.bin"}],"normalization":null}"#,
        );
        write(dir.path(), "w.bin", &f32_bytes(&[f32::INFINITY]));
        write(dir.path(), "b.bin", &f32_bytes(&[0.0]));
        assert!(matches!(load_model(dir.path()), Err(QuartzError::NonFinite(_))));
    }

    #[test]
    fn widens_to_f64_when_narrowing_would_lose_bits() {
        let dir = tempfile::tempdir().unwrap();
        let layer = Layer::dense(
            Tensor::new(vec![1, 1], vec![0.1]).unwrap(),
            Tensor::vector(vec![0.0]).unwrap(),
            true,
        )
        .unwrap();
        let m = AnnModel::new("x", vec![1], vec![layer]).unwrap();
        save_model(&m, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        assert!(text.contains("\"dtype\": \"f64\""));
        assert_eq!(load_model(dir.path()).unwrap(), m);
    }
}
