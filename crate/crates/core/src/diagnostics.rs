//! Confusion recovery checks, confidence statistics and matrix exports.

use crate::data::{LabeledDataset, Style};
use crate::diff::{Graph, ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::model::{pipeline, Confusion, Model};
use crate::noise::{corrupt_labels, empirical_confusion, TransitionMatrix};
use crate::objective;
use crate::rng;
use crate::trainer::{evaluate, Adam};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

/// Distance between one learned matrix and its reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryEntry {
    pub annotator: usize,
    pub style: Option<Style>,
    pub learned: TransitionMatrix,
    pub reference: TransitionMatrix,
    pub column_tv: Vec<f64>,
    pub max_tv: f64,
    pub mean_tv: f64,
    pub frobenius: f64,
}

impl RecoveryEntry {
    pub fn new(annotator: usize, style: Option<Style>, learned: TransitionMatrix, reference: TransitionMatrix) -> Result<Self> {
        if learned.classes() != reference.classes() {
            return Err(Error::Dimension(format!(
                "learned C={} vs reference C={}",
                learned.classes(),
                reference.classes()
            )));
        }
        let column_tv = learned.column_tv(&reference);
        let max_tv = column_tv.iter().copied().fold(0.0, f64::max);
        let mean_tv = column_tv.iter().sum::<f64>() / column_tv.len() as f64;
        let frobenius = learned.frobenius_distance(&reference);
        Ok(RecoveryEntry { annotator, style, learned, reference, column_tv, max_tv, mean_tv, frobenius })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub entries: Vec<RecoveryEntry>,
}

impl RecoveryReport {
    pub fn max_tv(&self) -> f64 {
        self.entries.iter().map(|e| e.max_tv).fold(0.0, f64::max)
    }

    pub fn worst_mean_tv(&self) -> f64 {
        self.entries.iter().map(|e| e.mean_tv).fold(0.0, f64::max)
    }

    /// Mean-column TV of each annotator, averaged over its styles.
    pub fn per_annotator_mean_tv(&self) -> Vec<f64> {
        let r = self.entries.iter().map(|e| e.annotator + 1).max().unwrap_or(0);
        (0..r)
            .map(|a| {
                let tv: Vec<f64> = self.entries.iter().filter(|e| e.annotator == a).map(|e| e.mean_tv).collect();
                tv.iter().sum::<f64>() / tv.len().max(1) as f64
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Learned-vs-empirical and empirical-vs-true comparisons of the oracle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    pub classes: usize,
    pub samples: usize,
    pub iterations: usize,
    /// Gradient norm of the NLL at the returned logits.
    pub residual: f64,
    pub learned_vs_empirical: RecoveryEntry,
    pub empirical_vs_true: RecoveryEntry,
}

impl Theorem1Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Optimizer settings of the oracle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleOptions {
    pub learning_rate: f64,
    pub max_iterations: usize,
    /// Stop once the gradient norm drops below this.
    pub tolerance: f64,
    /// Fail if the final gradient norm exceeds this.
    pub acceptable_residual: f64,
}

impl Default for OracleOptions {
    fn default() -> Self {
        OracleOptions { learning_rate: 0.05, max_iterations: 5000, tolerance: 1e-9, acceptable_residual: 1e-4 }
    }
}

/// Draws `n` uniform clean labels and their corruption under `truth`, then
/// fits a static confusion head under a one-hot classifier.
pub fn theorem1_oracle(truth: &TransitionMatrix, n: usize, seed: u64, options: OracleOptions) -> Result<Theorem1Report> {
    let c = truth.classes();
    let mut draw = rng::stream(seed, "theorem1/labels");
    let clean: Vec<usize> = (0..n).map(|_| draw.random_range(0..c)).collect();
    let noisy = corrupt_labels(&clean, truth, seed)?;
    let mut report = theorem1_fit(&clean, &noisy, c, options)?;
    report.empirical_vs_true = RecoveryEntry::new(0, None, report.empirical_vs_true.learned, truth.clone())?;
    Ok(report)
}

/// The oracle on given label pairs. The classifier output is fixed to `e_y`,
/// so the only parameters are the confusion logits.
pub fn theorem1_fit(clean: &[usize], noisy: &[usize], classes: usize, options: OracleOptions) -> Result<Theorem1Report> {
    let empirical = empirical_confusion(clean, noisy, classes)?;
    let n = clean.len();
    let onehot = Tensor::from_fn(&[n, classes], |k| if clean[k / classes] == k % classes { 1.0 } else { 0.0 });
    let mut params = ParamSet::new();
    let delta = crate::model::DEFAULT_INIT_DIAGONAL;
    let logits = params.add("confusion", Tensor::from_fn(&[classes, classes], |k| if k / classes == k % classes { delta } else { 0.0 }));
    let mut adam = Adam::new(&params, options.learning_rate, 0.9, 0.999, 1e-8);
    let mut iterations = 0;
    let mut residual;
    loop {
        let mut g = Graph::new();
        let p = g.constant(onehot.clone());
        let l = g.param(&params, logits);
        let u = g.softmax(l, 0)?;
        let q = pipeline(&mut g, p, Confusion::Shared(u))?;
        let loss = objective::nll(&mut g, q, noisy)?;
        params.zero_grad();
        g.backward_into(loss, &mut params)?;
        residual = params.grad_norm();
        if residual <= options.tolerance || iterations >= options.max_iterations {
            break;
        }
        adam.step(&mut params);
        iterations += 1;
    }
    if residual > options.acceptable_residual {
        return Err(Error::NotConverged { residual, iterations });
    }
    let mut g = Graph::new();
    let l = g.param(&params, logits);
    let u = g.softmax(l, 0)?;
    let learned = TransitionMatrix::from_columns_unchecked(classes, g.value(u).data().to_vec());
    Ok(Theorem1Report {
        classes,
        samples: n,
        iterations,
        residual,
        learned_vs_empirical: RecoveryEntry::new(0, None, learned, empirical.matrix.clone())?,
        empirical_vs_true: RecoveryEntry::new(0, None, empirical.matrix.clone(), empirical.matrix)?,
    })
}

/// Reference matrix for one annotator, optionally restricted to one style.
#[derive(Clone, Debug, PartialEq)]
pub struct Reference {
    pub annotator: usize,
    pub style: Option<Style>,
    pub matrix: TransitionMatrix,
}

/// Compares each annotator's learned confusion with its references. For a
/// styled reference the head is averaged over the probes of that style.
pub fn recovery_distance(model: &Model, references: &[Reference], probes: &LabeledDataset) -> Result<RecoveryReport> {
    if references.is_empty() {
        return Err(Error::Usage("no reference matrices".into()));
    }
    if let Some(r) = (0..model.annotators()).find(|r| !references.iter().any(|x| x.annotator == *r)) {
        return Err(Error::Usage(format!("no reference matrix for annotator {r}")));
    }
    let mut entries = Vec::with_capacity(references.len());
    for reference in references {
        let indices: Vec<usize> = match reference.style {
            None => (0..probes.len()).collect(),
            Some(style) => {
                let styles = probes
                    .styles()
                    .ok_or_else(|| Error::Usage(format!("probes carry no styles; cannot select `{style}`")))?;
                (0..probes.len()).filter(|&k| styles[k] == style).collect()
            }
        };
        if indices.is_empty() {
            return Err(Error::Usage(format!("no probes for reference {:?}", reference.style)));
        }
        let learned = mean_confusion_over(model, reference.annotator, probes, &indices, 256)?;
        entries.push(RecoveryEntry::new(reference.annotator, reference.style, learned, reference.matrix.clone())?);
    }
    Ok(RecoveryReport { entries })
}

/// Annotator `r`'s confusion averaged over the given probes.
pub fn mean_confusion_over(model: &Model, r: usize, probes: &LabeledDataset, indices: &[usize], chunk: usize) -> Result<TransitionMatrix> {
    let c = model.classes();
    let mut acc = vec![0.0; c * c];
    let mut total = 0usize;
    for part in indices.chunks(chunk.max(1)) {
        let m = model.mean_confusion(r, &probes.input_batch(part))?;
        let rows = if model.is_pixelwise() { part.len() * probes.labels_per_sample() } else { part.len() };
        for (a, v) in acc.iter_mut().zip(m.as_slice()) {
            *a += v * rows as f64;
        }
        total += rows;
    }
    Ok(TransitionMatrix::from_columns_unchecked(c, acc.into_iter().map(|a| a / total as f64).collect()))
}

/// Distribution of the classifier's maximum probability.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceProfile {
    /// Counts over equal-width bins of `[0, 1]`; a maximum of exactly 1 falls in the last bin.
    pub histogram: Vec<usize>,
    pub mean_entropy: f64,
    pub mean_info: f64,
}

impl ConfidenceProfile {
    pub fn from_evaluation(max_probs: &[f64], entropy: f64, info: f64, bins: usize) -> Self {
        let bins = bins.max(1);
        let mut histogram = vec![0; bins];
        for &m in max_probs {
            histogram[((m * bins as f64) as usize).min(bins - 1)] += 1;
        }
        ConfidenceProfile { histogram, mean_entropy: entropy, mean_info: info }
    }

    pub fn to_csv(&self) -> String {
        let bins = self.histogram.len();
        let mut out = String::from("bin_low,bin_high,count\n");
        for (k, n) in self.histogram.iter().enumerate() {
            let _ = writeln!(out, "{},{},{n}", k as f64 / bins as f64, (k + 1) as f64 / bins as f64);
        }
        let _ = writeln!(out, "# mean_entropy={} mean_info={}", self.mean_entropy, self.mean_info);
        out
    }
}

pub fn confidence_profile(model: &Model, data: &LabeledDataset, bins: usize) -> Result<ConfidenceProfile> {
    let e = evaluate(model, data, 256)?;
    Ok(ConfidenceProfile::from_evaluation(&e.max_probs, e.entropy, e.info, bins))
}

/// Writes `<stem>.csv` (the matrix) and `<stem>.svg` (a gray heatmap, darker
/// for larger values, each cell annotated to two decimals).
pub fn confusion_heatmap_export(matrix: &TransitionMatrix, stem: &Path) -> Result<()> {
    let csv = stem.with_extension("csv");
    std::fs::write(&csv, matrix.to_csv()).map_err(|e| Error::io(&csv, e))?;
    let svg = stem.with_extension("svg");
    std::fs::write(&svg, heatmap_svg(matrix)).map_err(|e| Error::io(&svg, e))
}

const CELL: usize = 40;

pub fn heatmap_svg(matrix: &TransitionMatrix) -> String {
    let c = matrix.classes();
    let side = CELL * (c + 1);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{side}\" height=\"{side}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    for k in 0..c {
        let mid = CELL * (k + 1) + CELL / 2;
        let _ = writeln!(s, "<text x=\"{mid}\" y=\"{}\" text-anchor=\"middle\">{k}</text>", CELL / 2 + 4);
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{k}</text>", CELL / 2, mid + 4);
    }
    for j in 0..c {
        for i in 0..c {
            let v = matrix.get(j, i).clamp(0.0, 1.0);
            let shade = (255.0 * (1.0 - v)).round() as u8;
            let (x, y) = (CELL * (i + 1), CELL * (j + 1));
            let ink = if v > 0.5 { "#ffffff" } else { "#000000" };
            let _ = writeln!(
                s,
                "<rect x=\"{x}\" y=\"{y}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"rgb({shade},{shade},{shade})\"/>"
            );
            let _ = writeln!(
                s,
                "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" fill=\"{ink}\">{:.2}</text>",
                x + CELL / 2,
                y + CELL / 2 + 4,
                matrix.get(j, i)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Whether every column of the prediction confusion `u[pred, true]` peaks on the diagonal.
pub fn diagonally_dominant(predictions: &[usize], clean: &[usize], classes: usize) -> Result<bool> {
    let m = empirical_confusion(clean, predictions, classes)?;
    Ok((0..classes).all(|i| {
        let col = m.matrix.column(i);
        (0..classes).all(|j| j == i || col[j] < col[i])
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ConfusionMode, ModelSpec, NetSpec};
    use crate::noise::{build_pairflip, build_symmetric, random_permutation};
    use proptest::prelude::*;

    #[test]
    fn oracle_matches_exact_counts_on_a_small_fixture() {
        // Every (noisy, clean) pair occurs, so the optimum is interior.
        let clean = [0, 0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2];
        let noisy = [0, 0, 0, 1, 2, 1, 1, 2, 0, 2, 0, 1];
        let r = theorem1_fit(&clean, &noisy, 3, OracleOptions::default()).unwrap();
        let third = 1.0 / 3.0;
        let expected = [[0.6, 0.25, third], [0.2, 0.5, third], [0.2, 0.25, third]];
        for (j, row) in expected.iter().enumerate() {
            for (i, v) in row.iter().enumerate() {
                assert!((r.learned_vs_empirical.learned.get(j, i) - v).abs() < 1e-6, "({j},{i}) {r:?}");
            }
        }
    }

    #[test]
    fn oracle_drives_unseen_pairs_toward_zero() {
        let clean = [0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2];
        let noisy = [0, 0, 0, 1, 1, 1, 2, 0, 2, 2, 2, 2];
        let r = theorem1_fit(&clean, &noisy, 3, OracleOptions::default()).unwrap();
        assert!(r.learned_vs_empirical.max_tv < 1e-5, "{r:?}");
    }

    #[test]
    fn oracle_recovers_identity() {
        let r = theorem1_oracle(&TransitionMatrix::identity(4), 4000, 1, OracleOptions::default()).unwrap();
        assert!(r.learned_vs_empirical.max_tv < 1e-3);
        assert_eq!(r.empirical_vs_true.max_tv, 0.0);
    }

    #[test]
    fn oracle_reports_non_convergence() {
        let options = OracleOptions { max_iterations: 3, ..OracleOptions::default() };
        let r = theorem1_oracle(&build_symmetric(3, 0.3).unwrap(), 3000, 0, options);
        assert!(matches!(r, Err(Error::NotConverged { iterations: 3, .. })));
    }

    #[test]
    fn untrained_head_distance_is_closed_form() {
        let spec = ModelSpec::new(10, 8, 8, 1, NetSpec::Mlp { hidden: 3 }, ConfusionMode::Static);
        let model = Model::new(spec, 0).unwrap();
        let probes = crate::data::make_synthetic_blobs(4, 10, 8, 0);
        let reference = Reference { annotator: 0, style: None, matrix: TransitionMatrix::identity(10) };
        let r = recovery_distance(&model, &[reference], &probes).unwrap();
        let e4 = 4f64.exp();
        assert!((r.entries[0].mean_tv - (1.0 - e4 / (e4 + 9.0))).abs() < 1e-12);
        assert!(recovery_distance(&model, &[], &probes).is_err());
    }

    #[test]
    fn styled_reference_needs_styled_probes() {
        let spec = ModelSpec::new(3, 8, 8, 1, NetSpec::Mlp { hidden: 3 }, ConfusionMode::Static);
        let model = Model::new(spec, 0).unwrap();
        let probes = crate::data::make_synthetic_blobs(4, 3, 8, 0);
        let reference = Reference { annotator: 0, style: Some(Style::Thin), matrix: TransitionMatrix::identity(3) };
        assert!(matches!(recovery_distance(&model, &[reference], &probes), Err(Error::Usage(_))));
    }

    proptest! {
        #[test]
        fn distance_is_invariant_under_joint_relabeling(rate in 0.0f64..0.9, seed in any::<u64>()) {
            let a = build_pairflip(6, rate).unwrap();
            let b = build_symmetric(6, 0.5 * rate).unwrap();
            let perm = random_permutation(6, seed);
            let plain = RecoveryEntry::new(0, None, a.clone(), b.clone()).unwrap();
            let moved = RecoveryEntry::new(0, None, a.permuted(&perm), b.permuted(&perm)).unwrap();
            prop_assert!((plain.mean_tv - moved.mean_tv).abs() < 1e-12);
            prop_assert!((plain.max_tv - moved.max_tv).abs() < 1e-12);
        }
    }

    #[test]
    fn confidence_profile_examples() {
        let p = ConfidenceProfile::from_evaluation(&[1.0, 1.0, 0.25], 0.0, 0.0, 4);
        assert_eq!(p.histogram, vec![0, 1, 0, 2]);
        assert!(p.to_csv().starts_with("bin_low,bin_high,count\n0,0.25,0\n"));
    }

    #[test]
    fn heatmap_round_trips_and_annotates() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("eye");
        confusion_heatmap_export(&TransitionMatrix::identity(3), &stem).unwrap();
        let svg = std::fs::read_to_string(stem.with_extension("svg")).unwrap();
        assert_eq!(svg.matches(">1.00<").count(), 3);
        assert_eq!(svg.matches(">0.00<").count(), 6);
        let m = build_symmetric(5, 0.5).unwrap();
        confusion_heatmap_export(&m, &stem).unwrap();
        let back = TransitionMatrix::from_csv(&std::fs::read_to_string(stem.with_extension("csv")).unwrap()).unwrap();
        assert_eq!(back, m);
        let svg = heatmap_svg(&m);
        assert_eq!(svg.matches("fill=\"rgb(223,223,223)\"").count(), 20);
        assert!(confusion_heatmap_export(&m, Path::new("/nonexistent/dir/m")).is_err());
    }

    #[test]
    fn diagonal_dominance_examples() {
        assert!(diagonally_dominant(&[0, 1, 2, 2], &[0, 1, 2, 1], 3).unwrap() == false);
        assert!(diagonally_dominant(&[0, 1, 2, 1, 0], &[0, 1, 2, 1, 1], 3).unwrap());
    }
}
