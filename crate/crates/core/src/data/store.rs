//! Directory serialization: IDX payloads plus `manifest.json`.
//!
//! ```text
//! manifest.json
//! inputs.idx        f64 [N, H, W]
//! clean.idx         u8  [N] or [N, H, W]
//! styles.idx        u8  [N]            (only when styles are assigned)
//! annotator-<r>.idx u8, same extents as clean.idx
//! ```

use super::idx::{self, IdxArray, IdxData};
use super::{Annotator, AnnotatorSource, LabeledDataset, Style, Task};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestAnnotator {
    pub name: String,
    pub file: String,
    pub source: AnnotatorSource,
    pub withheld: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub task: Task,
    pub classes: usize,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub annotator_count: usize,
    pub styles: Option<String>,
    pub annotators: Vec<ManifestAnnotator>,
}

fn label_dims(d: &LabeledDataset) -> Vec<usize> {
    match d.task() {
        Task::Classification => vec![d.len()],
        Task::Segmentation => vec![d.len(), d.height(), d.width()],
    }
}

fn labels_to_idx(d: &LabeledDataset, labels: &[usize]) -> IdxArray {
    IdxArray { dims: label_dims(d), data: IdxData::U8(labels.iter().map(|&v| v as u8).collect()) }
}

pub fn save_dir(d: &LabeledDataset, dir: &Path) -> Result<()> {
    if d.classes() > 256 {
        return Err(Error::Usage("byte label files hold at most 256 classes".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    idx::write(
        &dir.join("inputs.idx"),
        &IdxArray { dims: vec![d.len(), d.height(), d.width()], data: IdxData::F64(d.inputs().to_vec()) },
    )?;
    idx::write(&dir.join("clean.idx"), &labels_to_idx(d, d.clean_labels()))?;
    let styles = match d.styles() {
        Some(s) => {
            idx::write(
                &dir.join("styles.idx"),
                &IdxArray { dims: vec![s.len()], data: IdxData::U8(s.iter().map(|s| s.id()).collect()) },
            )?;
            Some("styles.idx".to_string())
        }
        None => None,
    };
    let mut annotators = Vec::new();
    for (r, a) in d.annotators().iter().enumerate() {
        let file = format!("annotator-{r}.idx");
        idx::write(&dir.join(&file), &labels_to_idx(d, &a.labels))?;
        annotators.push(ManifestAnnotator { name: a.name.clone(), file, source: a.source.clone(), withheld: a.withheld });
    }
    let manifest = Manifest {
        task: d.task(),
        classes: d.classes(),
        count: d.len(),
        height: d.height(),
        width: d.width(),
        annotator_count: annotators.len(),
        styles,
        annotators,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn read_labels(path: &Path) -> Result<Vec<usize>> {
    Ok(idx::read(path)?.into_u8()?.into_iter().map(usize::from).collect())
}

pub fn load_dir(dir: &Path) -> Result<LabeledDataset> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let inputs = idx::read(&dir.join("inputs.idx"))?;
    if inputs.dims != [m.count, m.height, m.width] {
        return Err(Error::Format(format!("inputs extents {:?} disagree with manifest", inputs.dims)));
    }
    let clean = read_labels(&dir.join("clean.idx"))?;
    let mut d = LabeledDataset::new(m.task, m.classes, m.height, m.width, inputs.into_f64(), clean)?;
    if let Some(file) = &m.styles {
        let ids = idx::read(&dir.join(file))?.into_u8()?;
        let styles = ids
            .into_iter()
            .map(|id| Style::from_id(id).ok_or_else(|| Error::Format(format!("unknown style id {id}"))))
            .collect::<Result<Vec<_>>>()?;
        if styles.len() != d.len() {
            return Err(Error::Format("style count disagrees with manifest".into()));
        }
        d.set_styles(styles);
    }
    for a in &m.annotators {
        d.push_annotator(Annotator {
            name: a.name.clone(),
            source: a.source.clone(),
            withheld: a.withheld,
            labels: read_labels(&dir.join(&a.file))?,
        })?;
    }
    Ok(d)
}
