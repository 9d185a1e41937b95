//! Binary morphology on small masks and the segmentation-annotator corruptions.

use crate::error::{Error, Result};
use crate::rng;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// `H × W` binary mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::Dimension(format!("{} pixels for a {h}x{w} mask", data.len())));
        }
        if let Some(bad) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Data(format!("mask value {bad} is not binary")));
        }
        Ok(Mask { h, w, data })
    }

    /// Rejects anything other than exact 0.0 / 1.0.
    pub fn from_values(h: usize, w: usize, values: &[f64]) -> Result<Self> {
        let data = values
            .iter()
            .map(|&v| match v {
                v if v == 0.0 => Ok(0),
                v if v == 1.0 => Ok(1),
                v => Err(Error::Data(format!("mask value {v} is not binary"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        Mask::new(h, w, data)
    }

    pub fn threshold(h: usize, w: usize, image: &[f64], level: f64) -> Self {
        assert_eq!(image.len(), h * w);
        Mask { h, w, data: image.iter().map(|&v| u8::from(v > level)).collect() }
    }

    pub fn empty(h: usize, w: usize) -> Self {
        Mask { h, w, data: vec![0; h * w] }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x] == 1
    }

    pub fn area(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| a <= b)
    }

    pub fn to_values(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    fn neighbors(&self, y: usize, x: usize) -> impl Iterator<Item = Option<(usize, usize)>> + '_ {
        CROSS.iter().map(move |&(dy, dx)| {
            let ny = y.checked_add_signed(dy)?;
            let nx = x.checked_add_signed(dx)?;
            (ny < self.h && nx < self.w).then_some((ny, nx))
        })
    }

    /// One erosion by the 3×3 cross; pixels beyond the border count as background.
    pub fn eroded(&self) -> Mask {
        let mut out = Mask::empty(self.h, self.w);
        for y in 0..self.h {
            for x in 0..self.w {
                let keep = self.neighbors(y, x).all(|n| n.is_some_and(|(ny, nx)| self.get(ny, nx)));
                out.data[y * self.w + x] = u8::from(keep);
            }
        }
        out
    }

    /// One dilation by the 3×3 cross.
    pub fn dilated(&self) -> Mask {
        let mut out = Mask::empty(self.h, self.w);
        for y in 0..self.h {
            for x in 0..self.w {
                let hit = self.neighbors(y, x).any(|n| n.is_some_and(|(ny, nx)| self.get(ny, nx)));
                out.data[y * self.w + x] = u8::from(hit);
            }
        }
        out
    }

    pub fn erode(&self, iterations: usize) -> Mask {
        (0..iterations).fold(self.clone(), |m, _| m.eroded())
    }

    pub fn dilate(&self, iterations: usize) -> Mask {
        (0..iterations).fold(self.clone(), |m, _| m.dilated())
    }
}

/// Centre plus 4-neighbours.
const CROSS: [(isize, isize); 5] = [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)];

/// 3×3 mean filter; border pixels average over their in-bounds neighbours.
pub fn box_filter3(h: usize, w: usize, image: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (mut s, mut n) = (0.0, 0);
            for ny in y.saturating_sub(1)..(y + 2).min(h) {
                for nx in x.saturating_sub(1)..(x + 2).min(w) {
                    s += image[ny * w + nx];
                    n += 1;
                }
            }
            out[y * w + x] = s / n as f64;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskNoise {
    Good,
    Thin,
    Thick,
    Fracture,
}

impl std::fmt::Display for MaskNoise {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MaskNoise::Good => "good",
            MaskNoise::Thin => "thin",
            MaskNoise::Thick => "thick",
            MaskNoise::Fracture => "fracture",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskNoiseParams {
    /// Erosion / dilation iterations for thin / thick.
    pub iterations: usize,
    /// Dilation iterations applied before fracturing.
    pub fracture_dilation: usize,
    pub fracture_count: usize,
    pub fracture_min_len: usize,
    pub fracture_max_len: usize,
}

impl Default for MaskNoiseParams {
    fn default() -> Self {
        MaskNoiseParams {
            iterations: 1,
            fracture_dilation: 1,
            fracture_count: 2,
            fracture_min_len: 4,
            fracture_max_len: 8,
        }
    }
}

/// Simulated annotator mask. `seed` only matters for fractures.
pub fn corrupt_mask(mask: &Mask, kind: MaskNoise, params: &MaskNoiseParams, seed: u64) -> Mask {
    match kind {
        MaskNoise::Good => mask.clone(),
        MaskNoise::Thin => mask.erode(params.iterations),
        MaskNoise::Thick => mask.dilate(params.iterations),
        MaskNoise::Fracture => {
            let mut out = mask.dilate(params.fracture_dilation);
            let mut r = rng::stream(seed, "morph/fracture");
            for _ in 0..params.fracture_count {
                let fg: Vec<usize> = (0..out.data.len()).filter(|&k| out.data[k] == 1).collect();
                if fg.is_empty() {
                    break;
                }
                // Line through a random foreground pixel, centred on it.
                let centre = fg[r.random_range(0..fg.len())];
                let (cy, cx) = ((centre / out.w) as f64, (centre % out.w) as f64);
                let len = r.random_range(params.fracture_min_len..=params.fracture_max_len.max(params.fracture_min_len));
                let angle = r.random_range(0.0..std::f64::consts::PI);
                let (dy, dx) = (angle.sin(), angle.cos());
                let steps = 4 * len;
                for s in 0..=steps {
                    let t = (s as f64 / steps as f64 - 0.5) * len as f64;
                    let (y, x) = ((cy + t * dy).round(), (cx + t * dx).round());
                    if y >= 0.0 && x >= 0.0 && (y as usize) < out.h && (x as usize) < out.w {
                        out.data[y as usize * out.w + x as usize] = 0;
                    }
                }
            }
            out
        }
    }
}

/// `2|A ∩ B| / (|A| + |B|)`, defined as 1 when both are empty.
pub fn dice(a: &Mask, b: &Mask) -> f64 {
    let inter = a.data.iter().zip(&b.data).filter(|(&x, &y)| x == 1 && y == 1).count();
    let total = a.area() + b.area();
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}
