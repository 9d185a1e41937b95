//! Synthetic fixtures: stroke-digit images, stylized variants and segmentation annotators.

use super::{Annotator, AnnotatorSource, LabeledDataset, Style, Task};
use crate::error::{Error, Result};
use crate::morph::{box_filter3, corrupt_mask, Mask, MaskNoise, MaskNoiseParams};
use crate::rng;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

type Segment = ((f64, f64), (f64, f64));

/// Seven-segment layout in the unit square, `(x, y)` with `y` pointing down.
const SEGMENTS: [Segment; 7] = [
    ((0.32, 0.18), (0.68, 0.18)), // a: top
    ((0.68, 0.18), (0.68, 0.50)), // b: upper right
    ((0.68, 0.50), (0.68, 0.82)), // c: lower right
    ((0.32, 0.82), (0.68, 0.82)), // d: bottom
    ((0.32, 0.50), (0.32, 0.82)), // e: lower left
    ((0.32, 0.18), (0.32, 0.50)), // f: upper left
    ((0.32, 0.50), (0.68, 0.50)), // g: middle
];

const DIGITS: [&str; 10] = ["abcdef", "bc", "abged", "abgcd", "fgbc", "afgcd", "afgedc", "abc", "abcdefg", "abcdfg"];

/// Stroke prototypes per class. The first ten classes are seven-segment
/// digits; further classes get fixed random three-stroke polylines.
fn prototypes(classes: usize) -> Vec<Vec<Segment>> {
    let mut extra = rng::stream(0, "blobs/prototypes");
    (0..classes)
        .map(|c| match DIGITS.get(c) {
            Some(code) => code.bytes().map(|b| SEGMENTS[(b - b'a') as usize]).collect(),
            None => {
                let mut pts: Vec<(f64, f64)> =
                    (0..4).map(|_| (extra.random_range(0.25..0.75), extra.random_range(0.2..0.8))).collect();
                pts.dedup();
                pts.windows(2).map(|w| (w[0], w[1])).collect()
            }
        })
        .collect()
}

fn dist_to_segment(p: (f64, f64), s: Segment) -> f64 {
    let ((x0, y0), (x1, y1)) = s;
    let (dx, dy) = (x1 - x0, y1 - y0);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - x0) * dx + (p.1 - y0) * dy) / len2).clamp(0.0, 1.0) };
    let (cx, cy) = (x0 + t * dx, y0 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

/// `n` images of `size × size` pixels, classes balanced (round-robin then
/// shuffled). Each image renders its class's strokes as a chain of Gaussian
/// blobs under a random affine jitter, with per-endpoint wobble, random stroke
/// width and intensity, and light pixel noise. Class shapes are fixed across
/// seeds so independently drawn train and test sets agree.
pub fn make_synthetic_blobs(n: usize, classes: usize, size: usize, seed: u64) -> LabeledDataset {
    let protos = prototypes(classes);
    let mut r = rng::stream(seed, "blobs/samples");
    let mut labels: Vec<usize> = (0..n).map(|k| k % classes).collect();
    labels.shuffle(&mut r);
    let wobble = Normal::new(0.0, 0.02).expect("valid sigma");
    let pixel_noise = Normal::new(0.0, 0.04).expect("valid sigma");
    let mut inputs = Vec::with_capacity(n * size * size);
    for &y in &labels {
        let scale = r.random_range(0.85..1.1);
        let shear = r.random_range(-0.15..0.15);
        let angle: f64 = r.random_range(-0.1..0.1);
        let (tx, ty) = (r.random_range(-0.07..0.07), r.random_range(-0.07..0.07));
        let (sin, cos) = angle.sin_cos();
        let mut warp = |(x, y): (f64, f64)| {
            let (x, y) = (x - 0.5 + wobble.sample(&mut r), y - 0.5 + wobble.sample(&mut r));
            let x = x + shear * y;
            let (x, y) = (cos * x - sin * y, sin * x + cos * y);
            (0.5 + scale * x + tx, 0.5 + scale * y + ty)
        };
        let strokes: Vec<Segment> = protos[y].iter().map(|&(a, b)| (warp(a), warp(b))).collect();
        let sigma = r.random_range(0.05..0.065);
        let amp = r.random_range(0.9..1.0);
        for py in 0..size {
            for px in 0..size {
                let p = ((px as f64 + 0.5) / size as f64, (py as f64 + 0.5) / size as f64);
                let d = strokes.iter().map(|&s| dist_to_segment(p, s)).fold(f64::INFINITY, f64::min);
                let v = amp * (-d * d / (2.0 * sigma * sigma)).exp() + pixel_noise.sample(&mut r);
                inputs.push(v.clamp(0.0, 1.0));
            }
        }
    }
    LabeledDataset::new(Task::Classification, classes, size, size, inputs, labels).expect("consistent extents")
}

/// Shares of original / thin / thick images.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleFractions {
    pub original: f64,
    pub thin: f64,
    pub thick: f64,
}

impl Default for StyleFractions {
    fn default() -> Self {
        StyleFractions { original: 1.0 / 3.0, thin: 1.0 / 3.0, thick: 1.0 / 3.0 }
    }
}

impl StyleFractions {
    fn counts(&self, n: usize) -> Result<[usize; 3]> {
        let f = [self.original, self.thin, self.thick];
        if f.iter().any(|v| !(0.0..=1.0).contains(v)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config("style_fractions", format!("{f:?} must be in [0, 1] and sum to 1")));
        }
        let thin = (f[1] * n as f64).round() as usize;
        let thick = ((f[2] * n as f64).round() as usize).min(n - thin);
        Ok([n - thin - thick, thin, thick])
    }
}

/// Assigns styles and redraws thin / thick images: threshold at 0.5, one
/// erosion or dilation by the 3×3 cross, then a 3×3 box filter. Original
/// images and all labels are left untouched.
pub fn stylize(dataset: &LabeledDataset, fractions: StyleFractions, seed: u64) -> Result<LabeledDataset> {
    let n = dataset.len();
    let counts = fractions.counts(n)?;
    let mut styles: Vec<Style> = Style::ALL.iter().zip(counts).flat_map(|(&s, c)| std::iter::repeat_n(s, c)).collect();
    styles.shuffle(&mut rng::stream(seed, "stylize"));
    let (h, w) = (dataset.height(), dataset.width());
    let mut out = dataset.clone();
    for (k, &style) in styles.iter().enumerate() {
        let mask = Mask::threshold(h, w, dataset.image(k), 0.5);
        let morphed = match style {
            Style::Original => continue,
            Style::Thin => mask.eroded(),
            Style::Thick => mask.dilated(),
        };
        let smooth = box_filter3(h, w, &morphed.to_values());
        out.inputs_mut()[k * h * w..(k + 1) * h * w].copy_from_slice(&smooth);
    }
    out.set_styles(styles);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentationOptions {
    pub annotators: Vec<MaskNoise>,
    pub gauss_sigma: f64,
    pub mask_noise: MaskNoiseParams,
}

impl Default for SegmentationOptions {
    fn default() -> Self {
        SegmentationOptions {
            annotators: vec![MaskNoise::Good, MaskNoise::Thin, MaskNoise::Thick, MaskNoise::Fracture],
            gauss_sigma: 0.2,
            mask_noise: MaskNoiseParams::default(),
        }
    }
}

/// Binary segmentation set from grayscale images: targets are the images
/// thresholded at 0.5, inputs get additive Gaussian noise, and each annotator
/// kind corrupts the target mask. The `good` annotator is recorded but
/// withheld from training.
pub fn make_segmentation_dataset(base: &LabeledDataset, options: &SegmentationOptions, seed: u64) -> Result<LabeledDataset> {
    let (h, w) = (base.height(), base.width());
    let n = base.len();
    let masks: Vec<Mask> = (0..n).map(|k| Mask::threshold(h, w, base.image(k), 0.5)).collect();
    let clean: Vec<usize> = masks.iter().flat_map(|m| m.data().iter().map(|&v| usize::from(v))).collect();

    let mut inputs = base.inputs().to_vec();
    if options.gauss_sigma > 0.0 {
        let noise = Normal::new(0.0, options.gauss_sigma)
            .map_err(|e| Error::config("gauss_sigma", e.to_string()))?;
        let mut r = rng::stream(seed, "segmentation/input-noise");
        inputs.iter_mut().for_each(|v| *v += noise.sample(&mut r));
    } else if options.gauss_sigma < 0.0 {
        return Err(Error::config("gauss_sigma", "must be non-negative"));
    }

    let mut out = LabeledDataset::new(Task::Segmentation, 2, h, w, inputs, clean)?;
    for (r, &kind) in options.annotators.iter().enumerate() {
        let labels = masks
            .iter()
            .enumerate()
            .flat_map(|(k, m)| {
                let noisy = corrupt_mask(m, kind, &options.mask_noise, rng::indexed(seed, "segmentation/mask", (r * n + k) as u64).random());
                noisy.data().iter().map(|&v| usize::from(v)).collect::<Vec<_>>()
            })
            .collect();
        out.push_annotator(Annotator {
            name: format!("{kind}"),
            source: AnnotatorSource::Mask(kind),
            withheld: kind == MaskNoise::Good,
            labels,
        })?;
    }
    Ok(out)
}
