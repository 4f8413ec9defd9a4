//! Feature-bundle container: a directory holding `manifest.json` plus one
//! headerless row-major float32 little-endian file per tensor.

use std::collections::BTreeMap;
use std::fs;
use std::io::ErrorKind;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::bundle::{AuditTensors, Bundle, Grid, TextBundle, VisualBundle};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;
pub const DTYPE_F32LE: &str = "f32le";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BundleKind {
    Visual,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub token: usize,
    pub joint: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub file: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub kind: BundleKind,
    /// Bundle identifier; the directory name is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<usize>,
    pub dims: Dims,
    pub tensors: BTreeMap<String, TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_strings: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<String>,
}

const VISUAL_REQUIRED: [&str; 4] = [
    "patch_tokens",
    "cls_attention",
    "cls_joint",
    "visual_projection",
];
const AUDIT_TENSORS: [&str; 3] = ["q_cls", "keys", "values"];
const TEXT_REQUIRED: [&str; 5] = [
    "token_embeddings",
    "eot_attention",
    "eot_norms",
    "eot_joint",
    "text_projection",
];

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    let found =
        raw.get("version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::ShapeMismatch {
                tensor: MANIFEST_FILE.into(),
                detail: "missing integer `version` field".into(),
            })?;
    if found != MANIFEST_VERSION as u64 {
        return Err(Error::ManifestVersionUnsupported {
            found: found as u32,
            expected: MANIFEST_VERSION,
        });
    }
    serde_json::from_value(raw).map_err(|e| Error::json(&path, e))
}

/// Reads a flat f32le tensor named in the manifest and checks its element
/// count against the declared shape.
fn read_tensor(dir: &Path, manifest: &Manifest, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
    let entry = manifest
        .tensors
        .get(name)
        .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
    if entry.dtype != DTYPE_F32LE {
        return Err(Error::UnsupportedDtype {
            tensor: name.to_string(),
            dtype: entry.dtype.clone(),
        });
    }
    let path = dir.join(&entry.file);
    let bytes = fs::read(&path).map_err(|e| match e.kind() {
        ErrorKind::NotFound => Error::MissingTensor(name.to_string()),
        _ => Error::io(&path, e),
    })?;
    let expected: usize = entry.shape.iter().product();
    if bytes.len() % 4 != 0 || bytes.len() / 4 != expected {
        return Err(Error::ShapeMismatch {
            tensor: name.to_string(),
            detail: format!(
                "manifest declares shape {:?} ({} values) but file holds {} bytes ({} values)",
                entry.shape,
                expected,
                bytes.len(),
                bytes.len() as f64 / 4.0
            ),
        });
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if let Some(index) = values.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFiniteValue {
            tensor: name.to_string(),
            index,
        });
    }
    Ok((entry.shape.clone(), values))
}

fn expect_shape(name: &str, found: &[usize], expected: &[usize]) -> Result<()> {
    if found != expected {
        return Err(Error::ShapeMismatch {
            tensor: name.to_string(),
            detail: format!("shape {found:?}, expected {expected:?}"),
        });
    }
    Ok(())
}

fn read_vector(dir: &Path, m: &Manifest, name: &str, len: Option<usize>) -> Result<Array1<f64>> {
    let (shape, data) = read_tensor(dir, m, name)?;
    if shape.len() != 1 {
        return Err(Error::ShapeMismatch {
            tensor: name.to_string(),
            detail: format!("shape {shape:?} is not a vector"),
        });
    }
    if let Some(len) = len {
        expect_shape(name, &shape, &[len])?;
    }
    Ok(Array1::from(data))
}

fn read_matrix(
    dir: &Path,
    m: &Manifest,
    name: &str,
    rows: Option<usize>,
    cols: Option<usize>,
) -> Result<Array2<f64>> {
    let (shape, data) = read_tensor(dir, m, name)?;
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch {
            tensor: name.to_string(),
            detail: format!("shape {shape:?} is not a matrix"),
        });
    }
    let expected = [rows.unwrap_or(shape[0]), cols.unwrap_or(shape[1])];
    expect_shape(name, &shape, &expected)?;
    Array2::from_shape_vec((shape[0], shape[1]), data).map_err(|e| Error::ShapeMismatch {
        tensor: name.to_string(),
        detail: e.to_string(),
    })
}

fn default_id(dir: &Path, manifest: &Manifest) -> String {
    manifest.id.clone().unwrap_or_else(|| {
        dir.file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    })
}

/// Loads and fully validates a bundle directory.
pub fn load_bundle(dir: impl AsRef<Path>) -> Result<Bundle> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let bundle = match manifest.kind {
        BundleKind::Visual => Bundle::Visual(load_visual_from(dir, &manifest)?),
        BundleKind::Text => Bundle::Text(load_text_from(dir, &manifest)?),
    };
    bundle.validate()?;
    Ok(bundle)
}

pub fn load_visual(dir: impl AsRef<Path>) -> Result<VisualBundle> {
    match load_bundle(dir)? {
        Bundle::Visual(v) => Ok(v),
        Bundle::Text(_) => Err(Error::WrongKind {
            found: "text".into(),
            expected: "visual".into(),
        }),
    }
}

pub fn load_text(dir: impl AsRef<Path>) -> Result<TextBundle> {
    match load_bundle(dir)? {
        Bundle::Text(t) => Ok(t),
        Bundle::Visual(_) => Err(Error::WrongKind {
            found: "visual".into(),
            expected: "text".into(),
        }),
    }
}

fn load_visual_from(dir: &Path, m: &Manifest) -> Result<VisualBundle> {
    let [rows, cols] = m.grid.ok_or_else(|| Error::ShapeMismatch {
        tensor: MANIFEST_FILE.into(),
        detail: "visual manifest lacks `grid`".into(),
    })?;
    let grid = Grid::new(rows, cols);
    for name in VISUAL_REQUIRED {
        if !m.tensors.contains_key(name) {
            return Err(Error::MissingTensor(name.into()));
        }
    }
    let n = grid.len();
    let (d, dj) = (m.dims.token, m.dims.joint);
    let patch_tokens = read_matrix(dir, m, "patch_tokens", Some(n), Some(d))?;
    let cls_attention = read_vector(dir, m, "cls_attention", Some(n))?;
    let cls_joint = read_vector(dir, m, "cls_joint", Some(dj))?;
    let visual_projection = read_matrix(dir, m, "visual_projection", Some(d), Some(dj))?;

    let present = AUDIT_TENSORS
        .iter()
        .filter(|t| m.tensors.contains_key(**t))
        .count();
    let audit = if present == 0 {
        None
    } else if present < AUDIT_TENSORS.len() {
        let missing = AUDIT_TENSORS
            .iter()
            .find(|t| !m.tensors.contains_key(**t))
            .unwrap();
        return Err(Error::MissingTensor((*missing).into()));
    } else {
        let keys = read_matrix(dir, m, "keys", Some(n), None)?;
        let q_cls = read_vector(dir, m, "q_cls", Some(keys.ncols()))?;
        let values = read_matrix(dir, m, "values", Some(n), None)?;
        let cls_output = if m.tensors.contains_key("cls_output") {
            Some(read_vector(dir, m, "cls_output", Some(values.ncols()))?)
        } else {
            None
        };
        Some(AuditTensors {
            q_cls,
            keys,
            values,
            cls_output,
        })
    };

    Ok(VisualBundle {
        image_id: default_id(dir, m),
        patch_tokens,
        cls_attention,
        cls_joint,
        grid,
        visual_projection,
        audit,
        provenance: m.provenance.clone(),
    })
}

fn load_text_from(dir: &Path, m: &Manifest) -> Result<TextBundle> {
    for name in TEXT_REQUIRED {
        if !m.tensors.contains_key(name) {
            return Err(Error::MissingTensor(name.into()));
        }
    }
    let (dt, dj) = (m.dims.token, m.dims.joint);
    let token_embeddings = read_matrix(dir, m, "token_embeddings", None, Some(dt))?;
    let n = token_embeddings.nrows();
    let eot_attention = read_matrix(dir, m, "eot_attention", m.layers, Some(n))?;
    let layers = eot_attention.nrows();
    let eot_norms = read_vector(dir, m, "eot_norms", Some(layers))?;
    let eot_joint = read_vector(dir, m, "eot_joint", Some(dj))?;
    let text_projection = read_matrix(dir, m, "text_projection", Some(dt), Some(dj))?;
    Ok(TextBundle {
        query_id: default_id(dir, m),
        token_embeddings,
        token_strings: m.token_strings.clone().unwrap_or_default(),
        eot_attention,
        eot_norms,
        eot_joint,
        text_projection,
        provenance: m.provenance.clone(),
    })
}

fn f32le_bytes<'a>(values: impl IntoIterator<Item = &'a f64>) -> Vec<u8> {
    values
        .into_iter()
        .flat_map(|&x| (x as f32).to_le_bytes())
        .collect()
}

struct TensorWriter<'a> {
    dir: &'a Path,
    tensors: BTreeMap<String, TensorEntry>,
}

impl TensorWriter<'_> {
    fn put<'v>(
        &mut self,
        name: &str,
        shape: &[usize],
        values: impl IntoIterator<Item = &'v f64>,
    ) -> Result<()> {
        let file = format!("{name}.f32");
        let path = self.dir.join(&file);
        fs::write(&path, f32le_bytes(values)).map_err(|e| Error::io(&path, e))?;
        self.tensors.insert(
            name.to_string(),
            TensorEntry {
                file,
                shape: shape.to_vec(),
                dtype: DTYPE_F32LE.into(),
            },
        );
        Ok(())
    }
}

/// Writes a bundle directory. Values are narrowed to f32; bundles that were
/// loaded from disk (or built from f32-representable values) round-trip
/// bit-identically.
pub fn write_bundle(bundle: &Bundle, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut w = TensorWriter {
        dir,
        tensors: BTreeMap::new(),
    };
    let manifest = match bundle {
        Bundle::Visual(v) => {
            let (n, d, dj) = (v.num_patches(), v.token_dim(), v.joint_dim());
            w.put("patch_tokens", &[n, d], v.patch_tokens.iter())?;
            w.put("cls_attention", &[n], v.cls_attention.iter())?;
            w.put("cls_joint", &[dj], v.cls_joint.iter())?;
            w.put("visual_projection", &[d, dj], v.visual_projection.iter())?;
            if let Some(a) = &v.audit {
                w.put("q_cls", &[a.q_cls.len()], a.q_cls.iter())?;
                w.put("keys", &[a.keys.nrows(), a.keys.ncols()], a.keys.iter())?;
                w.put(
                    "values",
                    &[a.values.nrows(), a.values.ncols()],
                    a.values.iter(),
                )?;
                if let Some(out) = &a.cls_output {
                    w.put("cls_output", &[out.len()], out.iter())?;
                }
            }
            Manifest {
                version: MANIFEST_VERSION,
                kind: BundleKind::Visual,
                id: Some(v.image_id.clone()),
                grid: Some([v.grid.rows, v.grid.cols]),
                layers: None,
                dims: Dims {
                    token: d,
                    joint: dj,
                },
                tensors: std::mem::take(&mut w.tensors),
                token_strings: None,
                provenance: v.provenance.clone(),
            }
        }
        Bundle::Text(t) => {
            let (n, l, dt, dj) = (t.num_tokens(), t.num_layers(), t.token_dim(), t.joint_dim());
            w.put("token_embeddings", &[n, dt], t.token_embeddings.iter())?;
            w.put("eot_attention", &[l, n], t.eot_attention.iter())?;
            w.put("eot_norms", &[l], t.eot_norms.iter())?;
            w.put("eot_joint", &[dj], t.eot_joint.iter())?;
            w.put("text_projection", &[dt, dj], t.text_projection.iter())?;
            Manifest {
                version: MANIFEST_VERSION,
                kind: BundleKind::Text,
                id: Some(t.query_id.clone()),
                grid: None,
                layers: Some(l),
                dims: Dims {
                    token: dt,
                    joint: dj,
                },
                tensors: std::mem::take(&mut w.tensors),
                token_strings: Some(t.token_strings.clone()),
                provenance: t.provenance.clone(),
            }
        }
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

/// Bundle subdirectories of `root` (those holding a manifest), sorted by name.
pub fn bundle_dirs(root: impl AsRef<Path>) -> Result<Vec<std::path::PathBuf>> {
    let root = root.as_ref();
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if path.is_dir() && path.join(MANIFEST_FILE).is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}
