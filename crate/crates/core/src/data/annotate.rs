use super::{Annotator, AnnotatorSource, LabeledDataset, Task};
use crate::error::{Error, Result};
use crate::noise::{sample_column, NoiseSpec, TransitionMatrix};
use crate::rng;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Drawing style of an input image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Style {
    Original,
    Thin,
    Thick,
}

impl Style {
    pub const ALL: [Style; 3] = [Style::Original, Style::Thin, Style::Thick];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Style> {
        Style::ALL.get(id as usize).copied()
    }
}

impl std::fmt::Display for Style {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Style::Original => "original",
            Style::Thin => "thin",
            Style::Thick => "thick",
        })
    }
}

/// One annotator's noise process for each style.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorProfile {
    pub name: String,
    pub styles: BTreeMap<Style, NoiseSpec>,
}

impl AnnotatorProfile {
    /// Same noise for every style.
    pub fn uniform(name: impl Into<String>, spec: NoiseSpec) -> Self {
        AnnotatorProfile { name: name.into(), styles: Style::ALL.iter().map(|&s| (s, spec.clone())).collect() }
    }

    pub fn spec(&self, style: Style) -> Result<&NoiseSpec> {
        self.styles
            .get(&style)
            .ok_or_else(|| Error::config(format!("annotators.{}.{style}", self.name), "no noise spec for this style"))
    }
}

/// The three style-dependent annotators of the curated experiment.
pub fn curated_profiles() -> Vec<AnnotatorProfile> {
    let p = |name: &str, o: NoiseSpec, thin: NoiseSpec, thick: NoiseSpec| AnnotatorProfile {
        name: name.into(),
        styles: BTreeMap::from([(Style::Original, o), (Style::Thin, thin), (Style::Thick, thick)]),
    };
    vec![
        p("annotator1", NoiseSpec::symmetric(0.8), NoiseSpec::asymmetric(0.4), NoiseSpec::pairflip(0.95)),
        p("annotator2", NoiseSpec::pairflip_permuted(0.4), NoiseSpec::symmetric(0.95), NoiseSpec::asymmetric(0.7)),
        p("annotator3", NoiseSpec::pairflip(0.6), NoiseSpec::pairflip_permuted(0.4), NoiseSpec::symmetric(0.8)),
    ]
}

/// Seed used for annotator `r`; annotator 0 uses `seed` itself, so a single
/// annotator reproduces [`crate::noise::corrupt_labels`] with the same seed.
pub fn annotator_seed(seed: u64, r: usize) -> u64 {
    seed.wrapping_add((r as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Replaces the dataset's annotators with one noisy label set per profile.
/// Each sample's label is drawn from the column of its true class in the
/// matrix of the annotator's spec for the sample's style.
pub fn annotate(dataset: &LabeledDataset, profiles: &[AnnotatorProfile], seed: u64) -> Result<LabeledDataset> {
    if dataset.task() != Task::Classification {
        return Err(Error::Usage("label annotation applies to classification datasets".into()));
    }
    let classes = dataset.classes();
    let styles: Vec<Style> = match dataset.styles() {
        Some(s) => s.to_vec(),
        None => vec![Style::Original; dataset.len()],
    };
    let mut present: Vec<Style> = styles.clone();
    present.sort_unstable();
    present.dedup();

    let mut out = dataset.clone();
    out.clear_annotators();
    for (r, profile) in profiles.iter().enumerate() {
        let aseed = annotator_seed(seed, r);
        let mut resolved = BTreeMap::new();
        let mut matrices: BTreeMap<Style, TransitionMatrix> = BTreeMap::new();
        for &style in &present {
            let spec = profile.spec(style)?.resolved(classes, aseed.wrapping_add(u64::from(style.id()) + 1));
            spec.validate(classes).map_err(|e| Error::config(format!("annotators.{}.{style}", profile.name), e.to_string()))?;
            matrices.insert(style, spec.build(classes, 0)?);
            resolved.insert(style, spec);
        }
        let mut draws = rng::stream(aseed, "noise/corrupt");
        let labels = dataset
            .clean_labels()
            .iter()
            .zip(&styles)
            .map(|(&y, s)| sample_column(&matrices[s], y, draws.random::<f64>()))
            .collect();
        out.push_annotator(Annotator {
            name: profile.name.clone(),
            source: AnnotatorSource::Labels(resolved),
            withheld: false,
            labels,
        })?;
    }
    Ok(out)
}

/// Generating matrix of every (annotator, style) pair in a label-annotated dataset.
pub fn generating_matrices(dataset: &LabeledDataset) -> Result<Vec<BTreeMap<Style, TransitionMatrix>>> {
    dataset
        .annotators()
        .iter()
        .map(|a| match &a.source {
            AnnotatorSource::Labels(specs) => specs
                .iter()
                .map(|(s, spec)| Ok((*s, spec.build(dataset.classes(), 0)?)))
                .collect(),
            AnnotatorSource::Mask(_) => Err(Error::Usage(format!("annotator `{}` has no transition matrix", a.name))),
        })
        .collect()
}
