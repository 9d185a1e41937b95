//! Label-noise transition matrices and the corruption processes built on them.
//!
//! Matrices are column-stochastic throughout: `u[j, i] = p(noisy = j | true = i)`.

use crate::error::{Error, Result};
use crate::rng;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// Column sums must be within this of 1.
pub const STOCHASTIC_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    classes: usize,
    /// Row-major `[j][i]`.
    u: Vec<f64>,
}

impl TransitionMatrix {
    /// Validates shape, entry range and column sums.
    pub fn new(classes: usize, u: Vec<f64>) -> Result<Self> {
        if classes == 0 || u.len() != classes * classes {
            return Err(Error::Dimension(format!("{} entries for {classes} classes", u.len())));
        }
        let m = TransitionMatrix { classes, u };
        for i in 0..classes {
            let col = m.column(i);
            if col.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Parameter(format!("column {i} has entries outside [0, 1]")));
            }
            let total: f64 = col.iter().sum();
            if (total - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::Parameter(format!("column {i} sums to {total}")));
            }
        }
        Ok(m)
    }

    /// Skips validation; used for learned matrices whose columns sum to 1 only
    /// up to floating-point rounding in the softmax.
    pub fn from_columns_unchecked(classes: usize, u: Vec<f64>) -> Self {
        assert_eq!(u.len(), classes * classes);
        TransitionMatrix { classes, u }
    }

    pub fn identity(classes: usize) -> Self {
        let mut u = vec![0.0; classes * classes];
        for i in 0..classes {
            u[i * classes + i] = 1.0;
        }
        TransitionMatrix { classes, u }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, j: usize, i: usize) -> f64 {
        self.u[j * self.classes + i]
    }

    fn set(&mut self, j: usize, i: usize, v: f64) {
        self.u[j * self.classes + i] = v;
    }

    /// Row-major entries.
    pub fn as_slice(&self) -> &[f64] {
        &self.u
    }

    pub fn column(&self, i: usize) -> Vec<f64> {
        (0..self.classes).map(|j| self.get(j, i)).collect()
    }

    pub fn max_column_error(&self) -> f64 {
        (0..self.classes)
            .map(|i| (self.column(i).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn trace(&self) -> f64 {
        (0..self.classes).map(|i| self.get(i, i)).sum()
    }

    /// Half-L1 distance between matching columns.
    pub fn column_tv(&self, other: &TransitionMatrix) -> Vec<f64> {
        assert_eq!(self.classes, other.classes);
        (0..self.classes)
            .map(|i| 0.5 * (0..self.classes).map(|j| (self.get(j, i) - other.get(j, i)).abs()).sum::<f64>())
            .collect()
    }

    pub fn frobenius_distance(&self, other: &TransitionMatrix) -> f64 {
        self.u.iter().zip(&other.u).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }

    /// `u'[σ(a), σ(b)] = u[a, b]`, i.e. `P U Pᵀ` for the permutation matrix of `σ`.
    pub fn permuted(&self, perm: &[usize]) -> TransitionMatrix {
        let c = self.classes;
        let mut out = TransitionMatrix { classes: c, u: vec![0.0; c * c] };
        for a in 0..c {
            for b in 0..c {
                out.set(perm[a], perm[b], self.get(a, b));
            }
        }
        out
    }

    /// `C=<n>` header then one comma-separated line per row `j`.
    pub fn to_csv(&self) -> String {
        let mut s = format!("C={}\n", self.classes);
        for j in 0..self.classes {
            let row: Vec<String> = (0..self.classes).map(|i| format!("{}", self.get(j, i))).collect();
            let _ = writeln!(s, "{}", row.join(","));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty matrix csv".into()))?;
        let classes: usize = header
            .trim()
            .strip_prefix("C=")
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| Error::Format(format!("bad header `{header}`")))?;
        let mut u = Vec::with_capacity(classes * classes);
        for line in lines.filter(|l| !l.trim().is_empty()) {
            for cell in line.split(',') {
                u.push(cell.trim().parse::<f64>().map_err(|e| Error::Format(format!("cell `{cell}`: {e}")))?);
            }
        }
        if u.len() != classes * classes {
            return Err(Error::Format(format!("{} cells for C={classes}", u.len())));
        }
        Ok(TransitionMatrix { classes, u })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Symmetric,
    Pairflip,
    PairflipPermuted,
    Asymmetric,
}

impl std::fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NoiseKind::Symmetric => "symmetric",
            NoiseKind::Pairflip => "pairflip",
            NoiseKind::PairflipPermuted => "pairflip_permuted",
            NoiseKind::Asymmetric => "asymmetric",
        })
    }
}

pub const DEFAULT_NEIGHBORHOOD: usize = 4;

/// One annotator's noise process for one style.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub permutation: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub neighborhood: Option<usize>,
}

impl NoiseSpec {
    pub fn new(kind: NoiseKind, rate: f64) -> Self {
        NoiseSpec { kind, rate, permutation: None, neighborhood: None }
    }

    pub fn symmetric(rate: f64) -> Self {
        Self::new(NoiseKind::Symmetric, rate)
    }

    pub fn pairflip(rate: f64) -> Self {
        Self::new(NoiseKind::Pairflip, rate)
    }

    pub fn asymmetric(rate: f64) -> Self {
        Self::new(NoiseKind::Asymmetric, rate)
    }

    pub fn pairflip_permuted(rate: f64) -> Self {
        Self::new(NoiseKind::PairflipPermuted, rate)
    }

    pub fn identity() -> Self {
        Self::symmetric(0.0)
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        check_rate(classes, self.rate)?;
        if let Some(p) = &self.permutation {
            check_permutation(classes, p)?;
        }
        if let Some(0) = self.neighborhood {
            return Err(Error::Parameter("neighborhood must be positive".into()));
        }
        Ok(())
    }

    /// Builds the matrix. A permuted pairflip without an explicit permutation
    /// draws one from `seed`.
    pub fn build(&self, classes: usize, seed: u64) -> Result<TransitionMatrix> {
        self.validate(classes)?;
        match self.kind {
            NoiseKind::Symmetric => build_symmetric(classes, self.rate),
            NoiseKind::Pairflip => build_pairflip(classes, self.rate),
            NoiseKind::PairflipPermuted => {
                let perm = match &self.permutation {
                    Some(p) => p.clone(),
                    None => random_permutation(classes, seed),
                };
                build_pairflip_permuted(classes, self.rate, &perm)
            }
            NoiseKind::Asymmetric => {
                build_asymmetric(classes, self.rate, self.neighborhood.unwrap_or(DEFAULT_NEIGHBORHOOD))
            }
        }
    }

    /// Pins any seed-drawn permutation so the spec fully determines its matrix.
    pub fn resolved(&self, classes: usize, seed: u64) -> NoiseSpec {
        let mut out = self.clone();
        if self.kind == NoiseKind::PairflipPermuted && out.permutation.is_none() {
            out.permutation = Some(random_permutation(classes, seed));
        }
        out
    }
}

fn check_rate(classes: usize, rate: f64) -> Result<()> {
    if classes < 2 {
        return Err(Error::Parameter(format!("need at least 2 classes, got {classes}")));
    }
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Parameter(format!("rate {rate} outside [0, 1)")));
    }
    Ok(())
}

fn check_permutation(classes: usize, perm: &[usize]) -> Result<()> {
    let mut seen = vec![false; classes];
    if perm.len() != classes || perm.iter().any(|&p| p >= classes || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::Parameter(format!("{perm:?} is not a permutation of 0..{classes}")));
    }
    Ok(())
}

pub fn random_permutation(classes: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..classes).collect();
    perm.shuffle(&mut rng::stream(seed, "noise/permutation"));
    perm
}

/// Keeps `1 - rate` on the diagonal and spreads `rate` evenly over the other classes.
pub fn build_symmetric(classes: usize, rate: f64) -> Result<TransitionMatrix> {
    check_rate(classes, rate)?;
    let off = rate / (classes - 1) as f64;
    let mut m = TransitionMatrix { classes, u: vec![off; classes * classes] };
    for i in 0..classes {
        m.set(i, i, 1.0 - rate);
    }
    Ok(m)
}

/// Moves `rate` from class `i` to class `(i + 1) mod C`.
pub fn build_pairflip(classes: usize, rate: f64) -> Result<TransitionMatrix> {
    build_pairflip_permuted(classes, rate, &(0..classes).collect::<Vec<_>>())
}

/// Pairflip along the cycle `σ(0) → σ(1) → … → σ(C-1) → σ(0)`.
pub fn build_pairflip_permuted(classes: usize, rate: f64, perm: &[usize]) -> Result<TransitionMatrix> {
    check_rate(classes, rate)?;
    check_permutation(classes, perm)?;
    let mut m = TransitionMatrix { classes, u: vec![0.0; classes * classes] };
    for i in 0..classes {
        let (from, to) = (perm[i], perm[(i + 1) % classes]);
        m.set(from, from, 1.0 - rate);
        m.set(to, from, m.get(to, from) + rate);
    }
    Ok(m)
}

/// Classes nearest to `i` in circular index distance, visiting `+1, -1, +2, -2, …`.
pub fn circular_neighbors(classes: usize, i: usize, count: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(count);
    let mut k = 1;
    while out.len() < count && k < classes {
        for cand in [(i + k) % classes, (i + classes - k % classes) % classes] {
            if out.len() < count && cand != i && !out.contains(&cand) {
                out.push(cand);
            }
        }
        k += 1;
    }
    out
}

/// Spreads `rate` evenly over the `neighborhood` circularly closest classes.
pub fn build_asymmetric(classes: usize, rate: f64, neighborhood: usize) -> Result<TransitionMatrix> {
    check_rate(classes, rate)?;
    if neighborhood == 0 || neighborhood >= classes {
        return Err(Error::Parameter(format!(
            "neighborhood {neighborhood} needs 0 < neighborhood < C = {classes}"
        )));
    }
    let share = rate / neighborhood as f64;
    let mut m = TransitionMatrix { classes, u: vec![0.0; classes * classes] };
    for i in 0..classes {
        m.set(i, i, 1.0 - rate);
        for j in circular_neighbors(classes, i, neighborhood) {
            m.set(j, i, share);
        }
    }
    Ok(m)
}

/// Draws column `index` of `m` by inverse CDF on one uniform.
pub(crate) fn sample_column(m: &TransitionMatrix, i: usize, uniform: f64) -> usize {
    let mut acc = 0.0;
    for j in 0..m.classes {
        acc += m.get(j, i);
        if uniform < acc {
            return j;
        }
    }
    // Rounding left the total a hair under 1; fall back to the last supported class.
    (0..m.classes).rev().find(|&j| m.get(j, i) > 0.0).unwrap_or(i)
}

/// Resamples every label from its column of `m`, independently and reproducibly.
pub fn corrupt_labels(labels: &[usize], m: &TransitionMatrix, seed: u64) -> Result<Vec<usize>> {
    if let Some(bad) = labels.iter().find(|&&y| y >= m.classes) {
        return Err(Error::Data(format!("label {bad} outside 0..{}", m.classes)));
    }
    let mut r = rng::stream(seed, "noise/corrupt");
    Ok(labels.iter().map(|&y| sample_column(m, y, r.random::<f64>())).collect())
}

/// Column-normalized co-occurrence counts of (noisy, clean).
#[derive(Clone, Debug)]
pub struct EmpiricalConfusion {
    pub matrix: TransitionMatrix,
    /// Classes absent from the clean labels; their columns are set to `e_i`.
    pub missing_classes: Vec<usize>,
    pub counts: Vec<usize>,
}

pub fn empirical_confusion(clean: &[usize], noisy: &[usize], classes: usize) -> Result<EmpiricalConfusion> {
    if clean.is_empty() {
        return Err(Error::Data("empirical confusion of empty label set".into()));
    }
    if clean.len() != noisy.len() {
        return Err(Error::Data(format!("{} clean vs {} noisy labels", clean.len(), noisy.len())));
    }
    let mut hist = vec![0usize; classes * classes];
    let mut counts = vec![0usize; classes];
    for (&y, &t) in clean.iter().zip(noisy) {
        if y >= classes || t >= classes {
            return Err(Error::Data(format!("label pair ({y}, {t}) outside 0..{classes}")));
        }
        hist[t * classes + y] += 1;
        counts[y] += 1;
    }
    let mut u = vec![0.0; classes * classes];
    let mut missing = Vec::new();
    for i in 0..classes {
        if counts[i] == 0 {
            missing.push(i);
            u[i * classes + i] = 1.0;
            continue;
        }
        for j in 0..classes {
            u[j * classes + i] = hist[j * classes + i] as f64 / counts[i] as f64;
        }
    }
    if !missing.is_empty() {
        log::warn!("classes {missing:?} absent from clean labels; columns set to identity");
    }
    Ok(EmpiricalConfusion { matrix: TransitionMatrix { classes, u }, missing_classes: missing, counts })
}
