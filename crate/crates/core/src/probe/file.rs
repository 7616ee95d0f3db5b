// SPDX-License-Identifier: MIT OR Apache-2.0

//! Probe model files.
//!
//! A model is a JSON header (`model.json`) plus a sibling binary file named by
//! the header's `weights_file`. The binary holds little-endian `f32`: the
//! weight matrix row-major (`num_labels x num_features`), then the bias
//! (`num_labels`). Its length is exactly `4 * num_labels * (num_features + 1)`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ProbeModel, TrainConfig, TrainedOn};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    task: String,
    tagset: Vec<String>,
    num_labels: usize,
    num_features: usize,
    input_dim: usize,
    feature_subset: Option<Vec<usize>>,
    lambda1: f64,
    lambda2: f64,
    dataset_fingerprint: String,
    seed: Option<u64>,
    config: Option<TrainConfig>,
    dtype: String,
    byte_order: String,
    weights_file: String,
}

impl ProbeModel {
    /// Writes `<path>` (JSON header) and `<path stem>.bin` next to it.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::InvalidConfig(format!("bad model path {}", path.display())))?;
        let weights_file = format!("{stem}.bin");
        let header = Header {
            version: 1,
            task: self.task.clone(),
            tagset: self.tagset.clone(),
            num_labels: self.num_labels,
            num_features: self.num_features,
            input_dim: self.trained_on.input_dim,
            feature_subset: self.trained_on.feature_subset.clone(),
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            dataset_fingerprint: self.trained_on.dataset_fingerprint.clone(),
            seed: self.config.map(|c| c.seed),
            config: self.config,
            dtype: "f32".into(),
            byte_order: "little".into(),
            weights_file: weights_file.clone(),
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let text = serde_json::to_string_pretty(&header).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))?;

        let mut bytes = Vec::with_capacity(4 * (self.weights.len() + self.bias.len()));
        for v in self.weights.iter().chain(&self.bias) {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        let bin = path.with_file_name(weights_file);
        fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let header: Header = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if header.version != 1 || header.dtype != "f32" || header.byte_order != "little" {
            return Err(Error::InvalidMeta(format!(
                "{}: unsupported model encoding",
                path.display()
            )));
        }
        let features_ok = match &header.feature_subset {
            Some(s) => s.len() == header.num_features && s.iter().all(|&n| n < header.input_dim),
            None => header.num_features == header.input_dim,
        };
        if !features_ok || header.tagset.len() != header.num_labels {
            return Err(Error::InvalidMeta(format!(
                "{}: inconsistent model dimensions",
                path.display()
            )));
        }
        let bin = path.with_file_name(&header.weights_file);
        if !bin.is_file() {
            return Err(Error::MissingFile(bin));
        }
        let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        let count = header.num_labels * (header.num_features + 1);
        if bytes.len() != count * 4 {
            return Err(Error::SizeMismatch {
                path: bin,
                expected: (count * 4) as u64,
                found: bytes.len() as u64,
            });
        }
        let mut values: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect();
        let bias = values.split_off(header.num_labels * header.num_features);
        Ok(ProbeModel {
            weights: values,
            bias,
            num_labels: header.num_labels,
            num_features: header.num_features,
            lambda1: header.lambda1,
            lambda2: header.lambda2,
            trained_on: TrainedOn {
                dataset_fingerprint: header.dataset_fingerprint,
                input_dim: header.input_dim,
                feature_subset: header.feature_subset,
            },
            task: header.task,
            tagset: header.tagset,
            config: header.config,
        })
    }
}
