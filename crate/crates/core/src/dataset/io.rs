// SPDX-License-Identifier: MIT OR Apache-2.0

//! On-disk dataset container.
//!
//! ```text
//! <dir>/meta.json          {"version":1,"num_tokens":N,"num_neurons":D,"dtype":"f32",
//!                           "byte_order":"little","layout":"row_major","layers":[...]}
//! <dir>/activations.bin    N*D little-endian f32, row r column c at byte (r*D+c)*4
//! <dir>/tokens.tsv         sentence_id \t token_index \t surface   (N lines, LF)
//! <dir>/<task>.labels      one label string per line, aligned with tokens.tsv
//! <dir>/<task>.tagset      optional; one label per line, fixes the id order
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::control::ControlMapping;
use super::{validate_layer_map, ActivationDataset, LabelColumn, LayerRange, TokenRecord};
use crate::error::{Error, Result};

const META_FILE: &str = "meta.json";
const BIN_FILE: &str = "activations.bin";
const TOKENS_FILE: &str = "tokens.tsv";
const LABELS_EXT: &str = "labels";
const TAGSET_EXT: &str = "tagset";

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    version: u32,
    num_tokens: usize,
    num_neurons: usize,
    dtype: String,
    byte_order: String,
    layout: String,
    layers: Vec<LayerRange>,
}

impl Meta {
    fn for_dataset(dataset: &ActivationDataset) -> Self {
        Self {
            version: 1,
            num_tokens: dataset.num_tokens(),
            num_neurons: dataset.num_neurons(),
            dtype: "f32".into(),
            byte_order: "little".into(),
            layout: "row_major".into(),
            layers: dataset.layers().to_vec(),
        }
    }

    fn check(&self) -> Result<()> {
        if self.version != 1 {
            return Err(Error::InvalidMeta(format!(
                "unsupported version {}",
                self.version
            )));
        }
        for (field, value, want) in [
            ("dtype", &self.dtype, "f32"),
            ("byte_order", &self.byte_order, "little"),
            ("layout", &self.layout, "row_major"),
        ] {
            if value != want {
                return Err(Error::InvalidMeta(format!(
                    "{field} must be `{want}`, found `{value}`"
                )));
            }
        }
        if self.num_tokens == 0 || self.num_neurons == 0 {
            return Err(Error::InvalidMeta(
                "num_tokens and num_neurons must be at least 1".into(),
            ));
        }
        validate_layer_map(&self.layers, self.num_neurons)
    }
}

fn require(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::MissingFile(path.to_path_buf()))
    }
}

fn read_text(path: &Path) -> Result<String> {
    require(path)?;
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn read_meta(dir: &Path) -> Result<Meta> {
    let path = dir.join(META_FILE);
    let text = read_text(&path)?;
    let meta: Meta = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    meta.check()?;
    Ok(meta)
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(read_text(path)?.lines().map(str::to_string).collect())
}

/// Layer map declared in `dir/meta.json`.
pub fn read_layers(dir: impl AsRef<Path>) -> Result<Vec<LayerRange>> {
    Ok(read_meta(dir.as_ref())?.layers)
}

/// Label files in `dir`, keyed by task name (file stem), sorted.
fn label_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some(LABELS_EXT) || !path.is_file() {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

fn read_label_column(dir: &Path, task: &str, path: &Path) -> Result<LabelColumn> {
    let strings = read_lines(path)?;
    if let Some(row) = strings.iter().position(String::is_empty) {
        return Err(Error::InvalidLabels {
            task: task.to_string(),
            detail: format!("empty label on line {}", row + 1),
        });
    }
    let sidecar = dir.join(format!("{task}.{TAGSET_EXT}"));
    if sidecar.is_file() {
        let tagset = read_lines(&sidecar)?;
        LabelColumn::with_tagset(task, &strings, tagset)
    } else {
        LabelColumn::from_strings(task, &strings)
    }
}

fn read_tokens(path: &Path, expected: usize) -> Result<Vec<TokenRecord>> {
    let text = read_text(path)?;
    let mut tokens = Vec::with_capacity(expected);
    for (lineno, line) in text.lines().enumerate() {
        let mut fields = line.splitn(3, '\t');
        let bad = |what: &str| Error::InvalidTokens(format!("line {}: {what}", lineno + 1));
        let sentence_id = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| bad("bad sentence_id"))?;
        let token_index = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| bad("bad token_index"))?;
        let surface = fields
            .next()
            .ok_or_else(|| bad("missing surface"))?
            .to_string();
        tokens.push(TokenRecord {
            sentence_id,
            token_index,
            surface,
        });
    }
    if tokens.len() != expected {
        return Err(Error::InvalidTokens(format!(
            "{} has {} rows, meta.json declares {expected}",
            path.display(),
            tokens.len()
        )));
    }
    Ok(tokens)
}

fn read_activations(path: &Path, num_tokens: usize, num_neurons: usize) -> Result<Vec<f32>> {
    require(path)?;
    let expected = (num_tokens as u64) * (num_neurons as u64) * 4;
    let found = fs::metadata(path).map_err(|e| Error::io(path, e))?.len();
    if found != expected {
        return Err(Error::SizeMismatch {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

/// Loads and fully validates a dataset directory with all its label columns.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<(ActivationDataset, Vec<LabelColumn>)> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let meta = read_meta(dir)?;
    let activations = read_activations(&dir.join(BIN_FILE), meta.num_tokens, meta.num_neurons)?;
    let tokens = read_tokens(&dir.join(TOKENS_FILE), meta.num_tokens)?;
    let dataset = ActivationDataset::new(meta.num_neurons, activations, tokens, meta.layers)?;

    let files = label_files(dir)?;
    if files.is_empty() {
        return Err(Error::MissingFile(dir.join(format!("*.{LABELS_EXT}"))));
    }
    let mut columns = Vec::with_capacity(files.len());
    for (task, path) in &files {
        let column = read_label_column(dir, task, path)?;
        column.check_aligned(&dataset)?;
        columns.push(column);
    }
    Ok((dataset, columns))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_lines<S: AsRef<str>>(path: &Path, lines: &[S]) -> Result<()> {
    let mut text = String::new();
    for line in lines {
        text.push_str(line.as_ref());
        text.push('\n');
    }
    write_file(path, text.as_bytes())
}

fn write_column(dir: &Path, stem: &str, column: &LabelColumn) -> Result<()> {
    let strings: Vec<&str> = column
        .labels
        .iter()
        .map(|&l| column.tagset[l].as_str())
        .collect();
    write_lines(&dir.join(format!("{stem}.{LABELS_EXT}")), &strings)?;
    write_lines(&dir.join(format!("{stem}.{TAGSET_EXT}")), &column.tagset)
}

/// Writes `dataset` and its label columns into `dir` (created if needed).
///
/// Every column gets a `.tagset` sidecar so label ids survive a reload.
pub fn write_dataset(
    dir: impl AsRef<Path>,
    dataset: &ActivationDataset,
    columns: &[LabelColumn],
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for column in columns {
        column.check_aligned(dataset)?;
    }

    let meta = serde_json::to_string(&Meta::for_dataset(dataset))
        .map_err(|e| Error::json(dir.join(META_FILE), e))?;
    write_file(&dir.join(META_FILE), meta.as_bytes())?;

    let mut bytes = Vec::with_capacity(dataset.activations().len() * 4);
    for v in dataset.activations() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_file(&dir.join(BIN_FILE), &bytes)?;

    let mut lines = Vec::with_capacity(dataset.num_tokens());
    for t in dataset.tokens() {
        if t.surface.contains(['\n', '\r']) {
            return Err(Error::InvalidTokens(format!(
                "surface {:?} contains a line break",
                t.surface
            )));
        }
        lines.push(format!(
            "{}\t{}\t{}",
            t.sentence_id, t.token_index, t.surface
        ));
    }
    write_lines(&dir.join(TOKENS_FILE), &lines)?;

    for column in columns {
        write_column(dir, &column.task_name, column)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct ControlRecord<'a> {
    task: &'a str,
    seed: u64,
    num_types: usize,
    tagset: &'a [String],
    source_distribution: &'a [f64],
}

/// Writes a control column as `<task>.control.labels` (+ `.tagset`) and the
/// mapping summary as `<task>.control.json`.
pub fn write_control(
    dir: impl AsRef<Path>,
    mapping: &ControlMapping,
    column: &LabelColumn,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let stem = format!("{}.control", mapping.task_name);
    write_column(dir, &stem, column)?;
    let record = ControlRecord {
        task: &mapping.task_name,
        seed: mapping.seed,
        num_types: mapping.mapping.len(),
        tagset: &column.tagset,
        source_distribution: &mapping.source_distribution,
    };
    let path = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(&record).map_err(|e| Error::json(&path, e))?;
    write_file(&path, text.as_bytes())
}

/// Paths of the three standard splits under a root directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPaths {
    pub train: PathBuf,
    pub dev: PathBuf,
    pub test: PathBuf,
}

fn tagsets(dir: &Path) -> Result<BTreeMap<String, Vec<String>>> {
    label_files(dir)?
        .iter()
        .map(|(task, path)| Ok((task.clone(), read_label_column(dir, task, path)?.tagset)))
        .collect()
}

/// Locates `train/`, `dev/` and `test/` under `root` and checks that they
/// agree on neuron count, layer map and tagsets.
///
/// Reads only metadata and label files, not activations.
pub fn split_paths(root: impl AsRef<Path>) -> Result<SplitPaths> {
    let root = root.as_ref();
    let paths = SplitPaths {
        train: root.join("train"),
        dev: root.join("dev"),
        test: root.join("test"),
    };
    let named = [
        ("train", &paths.train),
        ("dev", &paths.dev),
        ("test", &paths.test),
    ];
    for (_, dir) in named {
        if !dir.is_dir() {
            return Err(Error::MissingFile(dir.clone()));
        }
    }
    let reference = read_meta(&paths.train)?;
    let reference_tags = tagsets(&paths.train)?;
    for (name, dir) in &named[1..] {
        let meta = read_meta(dir)?;
        if meta.num_neurons != reference.num_neurons {
            return Err(Error::SplitMismatch(format!(
                "train has {} neurons, {name} has {}",
                reference.num_neurons, meta.num_neurons
            )));
        }
        if meta.layers != reference.layers {
            return Err(Error::SplitMismatch(format!(
                "layer map of {name} differs from train"
            )));
        }
        let tags = tagsets(dir)?;
        for (task, tagset) in &reference_tags {
            match tags.get(task) {
                None => {
                    return Err(Error::SplitMismatch(format!(
                        "task `{task}` missing from {name}"
                    )))
                }
                Some(other) if other != tagset => {
                    return Err(Error::SplitMismatch(format!(
                        "tagset of `{task}` differs between train and {name} \
                         (add a `{task}.{TAGSET_EXT}` sidecar to fix the label order)"
                    )))
                }
                Some(_) => {}
            }
        }
    }
    Ok(paths)
}

/// A loaded split: activations plus every label column found.
#[derive(Debug, Clone)]
pub struct Split {
    pub dataset: ActivationDataset,
    pub columns: Vec<LabelColumn>,
}

impl Split {
    pub fn column(&self, task: &str) -> Result<&LabelColumn> {
        self.columns
            .iter()
            .find(|c| c.task_name == task)
            .ok_or_else(|| Error::UnknownTask(task.to_string()))
    }
}

/// Train, development and test splits loaded together.
#[derive(Debug, Clone)]
pub struct DatasetSplits {
    pub train: Split,
    pub dev: Split,
    pub test: Split,
}

impl DatasetSplits {
    /// Assembles splits from in-memory parts, checking the cross-split rules.
    pub fn new(train: Split, dev: Split, test: Split) -> Result<Self> {
        for (name, split) in [("dev", &dev), ("test", &test)] {
            if split.dataset.num_neurons() != train.dataset.num_neurons() {
                return Err(Error::SplitMismatch(format!(
                    "train has {} neurons, {name} has {}",
                    train.dataset.num_neurons(),
                    split.dataset.num_neurons()
                )));
            }
            if split.dataset.layers() != train.dataset.layers() {
                return Err(Error::SplitMismatch(format!(
                    "layer map of {name} differs from train"
                )));
            }
            for column in &train.columns {
                let other = split.column(&column.task_name).map_err(|_| {
                    Error::SplitMismatch(format!("task `{}` missing from {name}", column.task_name))
                })?;
                if other.tagset != column.tagset {
                    return Err(Error::SplitMismatch(format!(
                        "tagset of `{}` differs between train and {name}",
                        column.task_name
                    )));
                }
            }
        }
        Ok(Self { train, dev, test })
    }

    pub fn splits(&self) -> [(&'static str, &Split); 3] {
        [
            ("train", &self.train),
            ("dev", &self.dev),
            ("test", &self.test),
        ]
    }

    /// Union of word types over all three splits.
    pub fn vocabulary(&self) -> std::collections::BTreeSet<String> {
        let mut vocab = self.train.dataset.vocabulary();
        vocab.extend(self.dev.dataset.vocabulary());
        vocab.extend(self.test.dataset.vocabulary());
        vocab
    }
}

/// Loads all three splits under `root`.
pub fn load_splits(root: impl AsRef<Path>) -> Result<DatasetSplits> {
    let paths = split_paths(root)?;
    let load = |dir: &Path| -> Result<Split> {
        let (dataset, columns) = load_dataset(dir)?;
        Ok(Split { dataset, columns })
    };
    let (train, (dev, test)) = rayon::join(
        || load(&paths.train),
        || rayon::join(|| load(&paths.dev), || load(&paths.test)),
    );
    DatasetSplits::new(train?, dev?, test?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(num_tokens: usize, num_neurons: usize) -> (ActivationDataset, LabelColumn) {
        let tokens = (0..num_tokens)
            .map(|i| TokenRecord {
                sentence_id: (i / 2) as u64,
                token_index: (i % 2) as u64,
                surface: if i % 2 == 0 {
                    "the".into()
                } else {
                    "cat".into()
                },
            })
            .collect();
        let activations = (0..num_tokens * num_neurons)
            .map(|i| i as f32 * 0.5 - 1.0)
            .collect();
        let ds = ActivationDataset::new(
            num_neurons,
            activations,
            tokens,
            vec![LayerRange::new("layer0", 0, num_neurons)],
        )
        .unwrap();
        let strings: Vec<&str> = (0..num_tokens)
            .map(|i| if i % 2 == 0 { "DT" } else { "NN" })
            .collect();
        let col = LabelColumn::from_strings("pos", &strings).unwrap();
        (ds, col)
    }

    #[test]
    fn two_by_three_has_24_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, col) = small(2, 3);
        write_dataset(dir.path(), &ds, std::slice::from_ref(&col)).unwrap();
        assert_eq!(fs::metadata(dir.path().join(BIN_FILE)).unwrap().len(), 24);
        let (loaded, cols) = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.num_tokens(), 2);
        assert_eq!(loaded, ds);
        assert_eq!(cols, vec![col]);
    }

    #[test]
    fn meta_json_layout() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, col) = small(2, 3);
        write_dataset(dir.path(), &ds, &[col]).unwrap();
        let text = fs::read_to_string(dir.path().join(META_FILE)).unwrap();
        assert_eq!(
            text,
            r#"{"version":1,"num_tokens":2,"num_neurons":3,"dtype":"f32","byte_order":"little","layout":"row_major","layers":[{"name":"layer0","start":0,"end":3}]}"#
        );
    }

    #[test]
    fn truncated_bin_is_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, col) = small(2, 3);
        write_dataset(dir.path(), &ds, &[col]).unwrap();
        let bin = dir.path().join(BIN_FILE);
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..23]).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(
            err,
            Error::SizeMismatch {
                expected: 24,
                found: 23,
                ..
            }
        ));
    }

    #[test]
    fn gap_in_meta_layers() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, col) = small(2, 5);
        write_dataset(dir.path(), &ds, &[col]).unwrap();
        let meta = r#"{"version":1,"num_tokens":2,"num_neurons":5,"dtype":"f32","byte_order":"little","layout":"row_major","layers":[{"name":"l0","start":0,"end":2},{"name":"l1","start":3,"end":5}]}"#;
        fs::write(dir.path().join(META_FILE), meta).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(Error::LayerMapGap { .. })
        ));
    }

    #[test]
    fn non_finite_bytes_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, col) = small(2, 3);
        write_dataset(dir.path(), &ds, &[col]).unwrap();
        let bin = dir.path().join(BIN_FILE);
        let mut bytes = fs::read(&bin).unwrap();
        bytes[8..12].copy_from_slice(&f32::INFINITY.to_le_bytes());
        fs::write(&bin, bytes).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(Error::NonFiniteValue { row: 0, column: 2 })
        ));
    }

    #[test]
    fn label_count_mismatch_and_missing_labels() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, col) = small(4, 2);
        write_dataset(dir.path(), &ds, &[col]).unwrap();
        fs::write(dir.path().join("pos.labels"), "DT\nNN\nDT\n").unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(Error::LabelAlignmentError {
                expected: 4,
                found: 3,
                ..
            })
        ));
        fs::remove_file(dir.path().join("pos.labels")).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(Error::MissingFile(_))
        ));
    }

    #[test]
    fn missing_meta() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(Error::MissingFile(_))
        ));
    }

    #[test]
    fn tagset_sidecar_fixes_order() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, _) = small(2, 1);
        let col =
            LabelColumn::with_tagset("pos", &["DT", "NN"], vec!["NN".into(), "DT".into()]).unwrap();
        write_dataset(dir.path(), &ds, &[col]).unwrap();
        let (_, cols) = load_dataset(dir.path()).unwrap();
        assert_eq!(cols[0].tagset, vec!["NN", "DT"]);
        assert_eq!(cols[0].labels, vec![1, 0]);
    }

    fn write_splits(root: &Path, dims: [usize; 3]) {
        for (name, d) in ["train", "dev", "test"].iter().zip(dims) {
            let (ds, col) = small(4, d);
            write_dataset(root.join(name), &ds, &[col]).unwrap();
        }
    }

    #[test]
    fn consistent_splits() {
        let dir = tempfile::tempdir().unwrap();
        write_splits(dir.path(), [3, 3, 3]);
        let paths = split_paths(dir.path()).unwrap();
        assert_eq!(paths.dev, dir.path().join("dev"));
        let splits = load_splits(dir.path()).unwrap();
        assert_eq!(splits.vocabulary().len(), 2);
    }

    #[test]
    fn split_dimension_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        write_splits(dir.path(), [100, 100, 99]);
        assert!(matches!(
            split_paths(dir.path()),
            Err(Error::SplitMismatch(_))
        ));
    }

    #[test]
    fn missing_dev_split() {
        let dir = tempfile::tempdir().unwrap();
        write_splits(dir.path(), [3, 3, 3]);
        fs::remove_dir_all(dir.path().join("dev")).unwrap();
        assert!(matches!(
            split_paths(dir.path()),
            Err(Error::MissingFile(_))
        ));
    }

    #[test]
    fn split_tagset_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        write_splits(dir.path(), [3, 3, 3]);
        fs::write(dir.path().join("test/pos.tagset"), "DT\nNN\nVB\n").unwrap();
        assert!(matches!(
            split_paths(dir.path()),
            Err(Error::SplitMismatch(_))
        ));
    }
}
