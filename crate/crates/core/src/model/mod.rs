//! Classifier plus per-annotator confusion heads, composed as `q = U(x) p(x)`.
//!
//! Confusion logits are laid out `[j, i]` (noisy label first) and normalized
//! over `j`, so every column of every produced matrix is a distribution.

pub mod checkpoint;
mod layers;
mod nets;


pub use layers::{Conv, Dense};
pub use nets::NetSpec;

use crate::diff::{Graph, ParamId, ParamSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::noise::TransitionMatrix;
use crate::objective;
use crate::rng;
use nets::Network;
use serde::{Deserialize, Serialize};

/// Default diagonal logit of identity-initialized confusion heads.
pub const DEFAULT_INIT_DIAGONAL: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfusionMode {
    /// One learned `C×C` matrix per annotator.
    Static,
    /// One network per annotator mapping the input to a `C×C` matrix.
    Conditioned,
    /// One `C×C` matrix per pixel from a 1×1 output layer on the shared decoder.
    Pixel,
    /// Fixed identity; the pipeline output is the classifier output.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub annotators: usize,
    pub classifier: NetSpec,
    pub confusion: ConfusionMode,
    /// Architecture of conditioned heads; defaults to the classifier's.
    #[serde(default)]
    pub conditioned: Option<NetSpec>,
    #[serde(default = "default_init_diagonal")]
    pub init_diagonal: f64,
}

fn default_init_diagonal() -> f64 {
    DEFAULT_INIT_DIAGONAL
}

impl ModelSpec {
    pub fn new(classes: usize, height: usize, width: usize, annotators: usize, classifier: NetSpec, confusion: ConfusionMode) -> Self {
        ModelSpec {
            classes,
            height,
            width,
            annotators,
            classifier,
            confusion,
            conditioned: None,
            init_diagonal: DEFAULT_INIT_DIAGONAL,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("model.classes", "at least two classes are required"));
        }
        if self.annotators == 0 && self.confusion != ConfusionMode::Identity {
            return Err(Error::config("model.annotators", "at least one annotator is required"));
        }
        if !self.init_diagonal.is_finite() {
            return Err(Error::config("model.init_diagonal", "must be finite"));
        }
        let dense = self.classifier.is_dense_output();
        match self.confusion {
            ConfusionMode::Pixel if dense => {
                Err(Error::config("model.confusion", "pixel confusion needs the encoder–decoder classifier"))
            }
            ConfusionMode::Conditioned if !self.conditioned.as_ref().unwrap_or(&self.classifier).is_dense_output() => {
                Err(Error::config("model.conditioned", "conditioned heads need a dense-output architecture"))
            }
            _ => Ok(()),
        }
    }
}

/// Logits `δ` on the diagonal and `0` elsewhere, flattened `[j, i]`.
fn identity_logits(classes: usize, delta: f64) -> Tensor {
    Tensor::from_fn(&[classes * classes], |k| if k / classes == k % classes { delta } else { 0.0 })
}

#[derive(Clone, Debug)]
enum Heads {
    Static(Vec<ParamId>),
    Conditioned(Vec<Network>),
    Pixel(Vec<Conv>),
    Identity,
}

/// One annotator's confusion for a forward pass.
#[derive(Clone, Copy, Debug)]
pub enum Confusion {
    /// `[C, C]`, the same for every row.
    Shared(Var),
    /// `[N, C, C]`, one matrix per row.
    PerRow(Var),
    Identity,
}

/// Classifier output and every annotator's confusion for one batch.
/// `probs` is `[N, C]` where rows are samples, or pixels in `(b, y, x)` order.
#[derive(Clone, Debug)]
pub struct Forward {
    pub probs: Var,
    pub confusions: Vec<Confusion>,
}

/// Hard predictions plus the mean entropy of the predicted distributions.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub classes: Vec<usize>,
    pub entropy: f64,
    pub probs: Tensor,
}

#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    params: ParamSet,
    classifier: Network,
    /// 1×1 class layer on top of encoder–decoder features.
    class_layer: Option<Conv>,
    heads: Heads,
}

impl Model {
    /// Initializes every parameter from `seed`.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let c = spec.classes;
        let (h, w) = (spec.height, spec.width);
        let mut params = ParamSet::new();
        let mut r = rng::stream(seed, "model/classifier");
        let classifier = Network::new(&spec.classifier, &mut params, "classifier", h, w, c, &mut r)?;
        let class_layer = if spec.classifier.is_dense_output() {
            None
        } else {
            let f = classifier.features(&params);
            Some(Conv::new(&mut params, "classifier.out", f, c, 1, 0, &mut r))
        };
        let eye = identity_logits(c, spec.init_diagonal);
        let heads = match spec.confusion {
            ConfusionMode::Static => Heads::Static(
                (0..spec.annotators)
                    .map(|k| params.add(format!("confusion{k}.logits"), eye.clone().reshape(&[c, c]).expect("c*c")))
                    .collect(),
            ),
            ConfusionMode::Conditioned => {
                let arch = spec.conditioned.clone().unwrap_or_else(|| spec.classifier.clone());
                let mut nets = Vec::with_capacity(spec.annotators);
                for k in 0..spec.annotators {
                    let mut r = rng::indexed(seed, "model/confusion", k as u64);
                    let net = Network::new(&arch, &mut params, &format!("confusion{k}"), h, w, c * c, &mut r)?;
                    net.set_output_layer(&mut params, eye.clone());
                    nets.push(net);
                }
                Heads::Conditioned(nets)
            }
            ConfusionMode::Pixel => {
                let f = classifier.features(&params);
                Heads::Pixel(
                    (0..spec.annotators)
                        .map(|k| {
                            let mut r = rng::indexed(seed, "model/confusion", k as u64);
                            let conv = Conv::new(&mut params, &format!("confusion{k}.out"), f, c * c, 1, 0, &mut r);
                            params.get_mut(conv.w).value.data_mut().fill(0.0);
                            params.get_mut(conv.b).value = eye.clone();
                            conv
                        })
                        .collect(),
                )
            }
            ConfusionMode::Identity => Heads::Identity,
        };
        Ok(Model { spec, params, classifier, class_layer, heads })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    pub fn annotators(&self) -> usize {
        match &self.heads {
            Heads::Identity => self.spec.annotators,
            Heads::Static(v) => v.len(),
            Heads::Conditioned(v) => v.len(),
            Heads::Pixel(v) => v.len(),
        }
    }

    pub fn mode(&self) -> ConfusionMode {
        self.spec.confusion
    }

    /// Whether rows of the classifier output are pixels rather than samples.
    pub fn is_pixelwise(&self) -> bool {
        self.class_layer.is_some()
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<()> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != 1 || s[2] != self.spec.height || s[3] != self.spec.width || s[0] == 0 {
            return Err(Error::Dimension(format!(
                "input {s:?} does not match [B, 1, {}, {}]",
                self.spec.height, self.spec.width
            )));
        }
        Ok(())
    }

    fn check_annotator(&self, r: usize) -> Result<()> {
        if r >= self.annotators() {
            return Err(Error::Usage(format!("annotator {r} out of range for {} annotators", self.annotators())));
        }
        Ok(())
    }

    /// `[B, F, H, W]` / `[B, C, H, W]` maps to `[B·H·W, F]`.
    fn pixels_to_rows(g: &mut Graph, v: Var) -> Result<Var> {
        let s = g.shape(v).to_vec();
        let t = g.permute(v, &[0, 2, 3, 1])?;
        g.reshape(t, &[s[0] * s[2] * s[3], s[1]])
    }

    /// Returns class logits `[N, C]` and, for the encoder–decoder, the features.
    fn class_logits(&self, g: &mut Graph, x: Var) -> Result<(Var, Option<Var>)> {
        self.check_input(g, x)?;
        let out = self.classifier.forward(g, &self.params, x)?;
        match &self.class_layer {
            None => Ok((out, None)),
            Some(layer) => {
                let logits = layer.forward(g, &self.params, out)?;
                Ok((Self::pixels_to_rows(g, logits)?, Some(out)))
            }
        }
    }

    /// Class probabilities `[N, C]` for a `[B, 1, H, W]` batch.
    pub fn classifier_forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (logits, _) = self.class_logits(g, x)?;
        g.softmax(logits, 1)
    }

    fn head(&self, g: &mut Graph, r: usize, x: Var, features: Option<Var>) -> Result<Confusion> {
        let c = self.spec.classes;
        match &self.heads {
            Heads::Identity => Ok(Confusion::Identity),
            Heads::Static(ids) => {
                let logits = g.param(&self.params, ids[r]);
                Ok(Confusion::Shared(g.softmax(logits, 0)?))
            }
            Heads::Conditioned(nets) => {
                let out = nets[r].forward(g, &self.params, x)?;
                let b = g.shape(out)[0];
                let u = g.reshape(out, &[b, c, c])?;
                Ok(Confusion::PerRow(g.softmax(u, 1)?))
            }
            Heads::Pixel(layers) => {
                let features = match features {
                    Some(f) => f,
                    None => self.classifier.forward(g, &self.params, x)?,
                };
                let out = layers[r].forward(g, &self.params, features)?;
                let rows = Self::pixels_to_rows(g, out)?;
                let n = g.shape(rows)[0];
                let u = g.reshape(rows, &[n, c, c])?;
                Ok(Confusion::PerRow(g.softmax(u, 1)?))
            }
        }
    }

    /// Annotator `r`'s confusion for a batch.
    pub fn confusion_forward(&self, g: &mut Graph, r: usize, x: Var) -> Result<Confusion> {
        self.check_annotator(r)?;
        self.check_input(g, x)?;
        self.head(g, r, x, None)
    }

    /// Classifier output and all confusions, sharing the backbone pass.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Forward> {
        let (logits, features) = self.class_logits(g, x)?;
        let probs = g.softmax(logits, 1)?;
        let confusions = (0..self.annotators())
            .map(|r| self.head(g, r, x, features))
            .collect::<Result<Vec<_>>>()?;
        Ok(Forward { probs, confusions })
    }

    /// Per-annotator noisy-label distributions `q = U p`, each `[N, C]`.
    pub fn pipeline_forward(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        let f = self.forward(g, x)?;
        f.confusions.iter().map(|&u| pipeline(g, f.probs, u)).collect()
    }

    /// Argmax classes (lowest index on ties) and mean entropy for a batch.
    pub fn predict(&self, x: &Tensor) -> Result<Prediction> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let p = self.classifier_forward(&mut g, xv)?;
        Ok(prediction_from_probs(g.value(p).clone()))
    }

    /// Annotator `r`'s confusion averaged over every row of the batch.
    pub fn mean_confusion(&self, r: usize, x: &Tensor) -> Result<TransitionMatrix> {
        let c = self.spec.classes;
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let u = match self.confusion_forward(&mut g, r, xv)? {
            Confusion::Identity => return Ok(TransitionMatrix::identity(c)),
            Confusion::Shared(u) => g.value(u).data().to_vec(),
            Confusion::PerRow(u) => {
                let d = g.value(u).data();
                let n = d.len() / (c * c);
                let mut acc = vec![0.0; c * c];
                for m in d.chunks_exact(c * c) {
                    for (a, v) in acc.iter_mut().zip(m) {
                        *a += v;
                    }
                }
                acc.iter().map(|a| a / n as f64).collect()
            }
        };
        Ok(TransitionMatrix::from_columns_unchecked(c, u))
    }

    /// Annotator `r`'s learned matrix in static mode.
    pub fn static_confusion(&self, r: usize) -> Result<TransitionMatrix> {
        self.check_annotator(r)?;
        match &self.heads {
            Heads::Static(ids) => {
                let mut g = Graph::new();
                let l = g.param(&self.params, ids[r]);
                let u = g.softmax(l, 0)?;
                Ok(TransitionMatrix::from_columns_unchecked(self.spec.classes, g.value(u).data().to_vec()))
            }
            Heads::Identity => Ok(TransitionMatrix::identity(self.spec.classes)),
            _ => Err(Error::Usage("the confusion heads depend on the input".into())),
        }
    }
}

/// `q = U p` row by row; `probs: [N, C]`.
pub fn pipeline(g: &mut Graph, probs: Var, u: Confusion) -> Result<Var> {
    match u {
        Confusion::Identity => Ok(probs),
        Confusion::Shared(u) => {
            let ut = g.transpose(u)?;
            g.matmul(probs, ut)
        }
        Confusion::PerRow(u) => g.batched_matvec(u, probs),
    }
}

/// Argmax (lowest index on ties) and mean entropy of `[N, C]` probabilities.
pub fn prediction_from_probs(probs: Tensor) -> Prediction {
    let c = probs.shape()[1];
    let mut classes = Vec::with_capacity(probs.shape()[0]);
    let mut entropy = 0.0;
    for row in probs.data().chunks_exact(c) {
        let mut best = 0;
        for k in 1..c {
            if row[k] > row[best] {
                best = k;
            }
        }
        classes.push(best);
        entropy += objective::entropy(row);
    }
    let n = classes.len().max(1) as f64;
    Prediction { classes, entropy: entropy / n, probs }
}
