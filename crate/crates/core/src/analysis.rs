// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reports over a ranking: how selected neurons spread across layers, how
//! many neurons each label draws on, and which layer dominates each label.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::dataset::{layer_of, LayerRange};
use crate::error::{Error, Result};
use crate::ranking::{label_neuron_counts, NeuronRanking};
use crate::util::write_json;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerCount {
    pub layer: String,
    pub start: usize,
    pub end: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerDistribution {
    pub per_layer: Vec<LayerCount>,
    pub total_selected: usize,
}

impl LayerDistribution {
    pub fn count(&self, layer: &str) -> usize {
        self.per_layer
            .iter()
            .find(|l| l.layer == layer)
            .map_or(0, |l| l.count)
    }
}

fn layer_index(layers: &[LayerRange], neuron: usize) -> Result<usize> {
    layer_of(layers, neuron).ok_or(Error::IndexOutOfRange {
        index: neuron,
        num_neurons: layers.last().map_or(0, |l| l.end),
    })
}

/// Counts the ranked neurons falling in each layer.
pub fn layer_distribution(
    ranking: &NeuronRanking,
    layers: &[LayerRange],
) -> Result<LayerDistribution> {
    let mut counts = vec![0; layers.len()];
    for &n in &ranking.ordered_neurons {
        counts[layer_index(layers, n)?] += 1;
    }
    Ok(LayerDistribution {
        per_layer: layers
            .iter()
            .zip(counts)
            .map(|(l, count)| LayerCount {
                layer: l.name.clone(),
                start: l.start,
                end: l.end,
                count,
            })
            .collect(),
        total_selected: ranking.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LabelLayers {
    pub label: String,
    /// Layer with the most attributed neurons (lowest index on ties); `None`
    /// when the label has no attributed neuron.
    pub dominant_layer: Option<usize>,
    pub dominant_layer_name: Option<String>,
    pub histogram: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LabelLayerSummary {
    pub layers: Vec<String>,
    pub labels: Vec<LabelLayers>,
}

/// Per-label histogram of attributed neurons over layers, with the plurality
/// layer.
pub fn dominant_layers(
    ranking: &NeuronRanking,
    layers: &[LayerRange],
) -> Result<LabelLayerSummary> {
    let mut histograms = vec![vec![0usize; layers.len()]; ranking.tagset.len()];
    for (&n, labels) in ranking
        .ordered_neurons
        .iter()
        .zip(&ranking.attributed_labels)
    {
        let layer = layer_index(layers, n)?;
        for &t in labels {
            histograms[t][layer] += 1;
        }
    }
    let labels = ranking
        .tagset
        .iter()
        .zip(histograms)
        .map(|(label, histogram)| {
            let dominant = histogram
                .iter()
                .enumerate()
                .fold(None, |best: Option<(usize, usize)>, (i, &c)| match best {
                    Some((_, bc)) if bc >= c => best,
                    _ if c > 0 => Some((i, c)),
                    _ => best,
                })
                .map(|(i, _)| i);
            LabelLayers {
                label: label.clone(),
                dominant_layer: dominant,
                dominant_layer_name: dominant.map(|i| layers[i].name.clone()),
                histogram,
            }
        })
        .collect();
    Ok(LabelLayerSummary {
        layers: layers.iter().map(|l| l.name.clone()).collect(),
        labels,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LabelCount {
    pub label: String,
    pub num_neurons: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NeuronSharing {
    pub neuron: usize,
    pub num_labels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocalizationReport {
    pub per_label: Vec<LabelCount>,
    pub per_neuron: Vec<NeuronSharing>,
    /// Mean number of labels per attributed neuron.
    pub mean_sharing: f64,
    pub max_sharing: usize,
    /// Neurons attributed to more than one label, most shared first.
    pub shared_neurons: Vec<usize>,
}

/// Neuron counts per label and how many labels each neuron serves.
pub fn localization_report(ranking: &NeuronRanking) -> LocalizationReport {
    let per_label = ranking
        .tagset
        .iter()
        .zip(label_neuron_counts(ranking))
        .map(|(label, num_neurons)| LabelCount {
            label: label.clone(),
            num_neurons,
        })
        .collect();
    let per_neuron: Vec<NeuronSharing> = ranking
        .ordered_neurons
        .iter()
        .zip(&ranking.attributed_labels)
        .map(|(&neuron, labels)| NeuronSharing {
            neuron,
            num_labels: labels.len(),
        })
        .collect();
    let attributed: Vec<usize> = per_neuron
        .iter()
        .map(|s| s.num_labels)
        .filter(|&k| k > 0)
        .collect();
    let mean_sharing = if attributed.is_empty() {
        0.0
    } else {
        attributed.iter().sum::<usize>() as f64 / attributed.len() as f64
    };
    let mut shared: Vec<&NeuronSharing> = per_neuron.iter().filter(|s| s.num_labels > 1).collect();
    shared.sort_by(|a, b| {
        b.num_labels
            .cmp(&a.num_labels)
            .then(a.neuron.cmp(&b.neuron))
    });
    LocalizationReport {
        per_label,
        mean_sharing,
        max_sharing: attributed.iter().copied().max().unwrap_or(0),
        shared_neurons: shared.iter().map(|s| s.neuron).collect(),
        per_neuron,
    }
}

fn write_csv<R: AsRef<[String]>>(path: &Path, header: &[&str], rows: &[R]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(header)?;
    for row in rows {
        writer.write_record(row.as_ref())?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Writes `report_{layerwise,labels,dominant}.{json,csv}` into `dir`.
///
/// CSV headers:
/// - `report_layerwise.csv`: `layer,start,end,count`
/// - `report_labels.csv`: `label,num_neurons`
/// - `report_dominant.csv`: `label,layer,count,dominant` (one row per label and layer)
pub fn write_reports(
    dir: impl AsRef<Path>,
    ranking: &NeuronRanking,
    layers: &[LayerRange],
) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let layerwise = layer_distribution(ranking, layers)?;
    let dominant = dominant_layers(ranking, layers)?;
    let localization = localization_report(ranking);

    let mut written = Vec::new();
    let mut path = |name: &str| {
        let p = dir.join(name);
        written.push(p.clone());
        p
    };

    write_json(&path("report_layerwise.json"), &layerwise)?;
    let rows: Vec<Vec<String>> = layerwise
        .per_layer
        .iter()
        .map(|l| {
            vec![
                l.layer.clone(),
                l.start.to_string(),
                l.end.to_string(),
                l.count.to_string(),
            ]
        })
        .collect();
    write_csv(
        &path("report_layerwise.csv"),
        &["layer", "start", "end", "count"],
        &rows,
    )?;

    write_json(&path("report_labels.json"), &localization)?;
    let rows: Vec<Vec<String>> = localization
        .per_label
        .iter()
        .map(|l| vec![l.label.clone(), l.num_neurons.to_string()])
        .collect();
    write_csv(&path("report_labels.csv"), &["label", "num_neurons"], &rows)?;

    write_json(&path("report_dominant.json"), &dominant)?;
    let mut rows = Vec::new();
    for label in &dominant.labels {
        for (i, count) in label.histogram.iter().enumerate() {
            rows.push(vec![
                label.label.clone(),
                dominant.layers[i].clone(),
                count.to_string(),
                u8::from(label.dominant_layer == Some(i)).to_string(),
            ]);
        }
    }
    write_csv(
        &path("report_dominant.csv"),
        &["label", "layer", "count", "dominant"],
        &rows,
    )?;
    Ok(written)
}
