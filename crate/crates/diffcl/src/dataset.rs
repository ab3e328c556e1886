//! On-disk datasets: one NIfTI image per volume, an optional NIfTI label,
//! and a `dataset.toml` listing ids, paths and split membership.

use std::path::{Path, PathBuf};

use diffcl_core::voldata::{DatasetSplit, VolumeSample};
use ndarray::Array3;
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const MANIFEST: &str = "dataset.toml";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    /// Trained with its label.
    Labeled,
    /// Trained without a label; its label, if present, is used for evaluation.
    Unlabeled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeEntry {
    pub id: String,
    pub role: Role,
    /// Relative to the dataset directory.
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub num_classes: usize,
    /// Free text describing how the images were preprocessed.
    pub preprocessing: String,
    pub volumes: Vec<VolumeEntry>,
}

impl DatasetManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        if !path.exists() {
            return Err(CliError::NoData(format!("{} not found", path.display())));
        }
        let text = std::fs::read_to_string(&path).map_err(CliError::io(&path))?;
        let m: DatasetManifest = toml::from_str(&text).map_err(|e| CliError::format(&path, e))?;
        if m.format_version != FORMAT_VERSION {
            return Err(CliError::format(
                &path,
                format!("dataset format version {} but this build reads version {FORMAT_VERSION}", m.format_version),
            ));
        }
        Ok(m)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST);
        let text = toml::to_string(self).map_err(|e| CliError::format(&path, e))?;
        std::fs::write(&path, text).map_err(CliError::io(&path))
    }
}

fn header_for(dims: [usize; 3], spacing: [f64; 3]) -> NiftiHeader {
    let mut h = NiftiHeader::default();
    h.pixdim[1..4].copy_from_slice(&spacing.map(|s| s as f32));
    h.xyzt_units = 2; // millimetres
    h.dim[1..4].copy_from_slice(&dims.map(|d| d as u16));
    h
}

/// Row-major `[X, Y, Z]` data as an array indexed `[x, y, z]`.
fn as_array<T: Clone>(data: &[T], dims: [usize; 3]) -> Result<Array3<T>> {
    Array3::from_shape_vec(dims, data.to_vec())
        .map_err(|e| CliError::Config(format!("volume of {} voxels does not fit {dims:?}: {e}", data.len())))
}

fn from_array<T: Clone>(a: ndarray::ArrayD<T>, path: &Path) -> Result<(Vec<T>, [usize; 3])> {
    let a = a
        .into_dimensionality::<ndarray::Ix3>()
        .map_err(|e| CliError::format(path, format!("expected a 3-D volume: {e}")))?;
    let (x, y, z) = a.dim();
    // Logical iteration order is row-major whatever the memory order is.
    Ok((a.iter().cloned().collect(), [x, y, z]))
}

pub fn write_image(path: &Path, data: &[f64], dims: [usize; 3], spacing: [f64; 3]) -> Result<()> {
    let header = header_for(dims, spacing);
    WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(&as_array(data, dims)?)
        .map_err(|e| CliError::format(path, e))
}

pub fn write_label(path: &Path, data: &[u8], dims: [usize; 3], spacing: [f64; 3]) -> Result<()> {
    let header = header_for(dims, spacing);
    WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(&as_array(data, dims)?)
        .map_err(|e| CliError::format(path, e))
}

fn open(path: &Path) -> Result<nifti::InMemNiftiObject> {
    if !path.exists() {
        return Err(CliError::NoData(format!("{} not found", path.display())));
    }
    ReaderOptions::new().read_file(path).map_err(|e| CliError::format(path, e))
}

pub fn read_image(path: &Path) -> Result<(Vec<f64>, [usize; 3], [f64; 3])> {
    let obj = open(path)?;
    let p = obj.header().pixdim;
    let spacing = [p[1], p[2], p[3]].map(|s| if s > 0.0 { s as f64 } else { 1.0 });
    let a = obj.into_volume().into_ndarray::<f64>().map_err(|e| CliError::format(path, e))?;
    let (data, dims) = from_array(a, path)?;
    Ok((data, dims, spacing))
}

pub fn read_label(path: &Path) -> Result<(Vec<u8>, [usize; 3])> {
    let a = open(path)?.into_volume().into_ndarray::<u8>().map_err(|e| CliError::format(path, e))?;
    from_array(a, path)
}

/// Writes every labelled volume of `split`, and the held-out labels of the
/// unlabelled ones, under `dir`.
pub fn write_dataset(dir: &Path, split: &DatasetSplit, num_classes: usize) -> Result<DatasetManifest> {
    for sub in ["images", "labels"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(CliError::io(dir.join(sub)))?;
    }
    let mut volumes = Vec::new();
    let held: std::collections::HashMap<&str, &Vec<u8>> =
        split.held_out.iter().map(|(id, l)| (id.as_str(), l)).collect();
    let all = split.labeled.iter().map(|v| (v, Role::Labeled)).chain(split.unlabeled.iter().map(|v| (v, Role::Unlabeled)));
    for (v, role) in all {
        let image = PathBuf::from("images").join(format!("{}.nii.gz", v.id));
        write_image(&dir.join(&image), &v.image, v.dims, v.spacing)?;
        let label_data = v.label.as_ref().or_else(|| held.get(v.id.as_str()).copied());
        let label = match label_data {
            Some(l) => {
                let p = PathBuf::from("labels").join(format!("{}.nii.gz", v.id));
                write_label(&dir.join(&p), l, v.dims, v.spacing)?;
                Some(p)
            }
            None => None,
        };
        volumes.push(VolumeEntry { id: v.id.clone(), role, image, label });
    }
    volumes.sort_by(|a, b| a.id.cmp(&b.id));
    let m = DatasetManifest {
        format_version: FORMAT_VERSION,
        num_classes,
        preprocessing: "synthetic; each image normalised to zero mean and unit variance".into(),
        volumes,
    };
    m.write(dir)?;
    Ok(m)
}

/// Loads the volumes used for evaluation: unlabelled entries that carry a
/// label file.
pub fn read_evaluation_volumes(dir: &Path) -> Result<(DatasetManifest, Vec<VolumeSample>)> {
    let m = DatasetManifest::read(dir)?;
    let mut out = Vec::new();
    for e in m.volumes.iter().filter(|e| e.role == Role::Unlabeled) {
        let Some(label_path) = &e.label else { continue };
        let (image, dims, spacing) = read_image(&dir.join(&e.image))?;
        let (label, label_dims) = read_label(&dir.join(label_path))?;
        if label_dims != dims {
            return Err(CliError::format(
                dir.join(label_path),
                format!("label grid {label_dims:?} differs from image grid {dims:?}"),
            ));
        }
        if let Some(&bad) = label.iter().find(|&&l| l as usize >= m.num_classes) {
            return Err(CliError::format(dir.join(label_path), format!("label {bad} outside 0..{}", m.num_classes)));
        }
        let mut v = VolumeSample::new(e.id.clone(), dims, image, Some(label))?;
        v.spacing = spacing;
        out.push(v);
    }
    if out.is_empty() {
        return Err(CliError::NoData(format!("{}: no unlabelled volume has a label to evaluate against", dir.display())));
    }
    Ok((m, out))
}
