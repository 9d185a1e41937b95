use super::layers::{Conv, Dense};
use crate::diff::{Graph, ParamSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use serde::{Deserialize, Serialize};

/// Backbone architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NetSpec {
    /// conv(1→conv1, k×k)+relu+pool, conv(conv1→conv2, k×k)+relu+pool, dense(→hidden)+relu, dense(→out).
    Lenet { conv1: usize, conv2: usize, kernel: usize, hidden: usize },
    /// dense(→hidden)+relu, dense(→out).
    Mlp { hidden: usize },
    /// Two-level encoder–decoder with one skip connection; `base` channels at full resolution.
    Unet { base: usize },
}

impl NetSpec {
    pub fn lenet() -> Self {
        NetSpec::Lenet { conv1: 6, conv2: 16, kernel: 5, hidden: 120 }
    }

    pub fn unet() -> Self {
        NetSpec::Unet { base: 8 }
    }

    pub fn is_dense_output(&self) -> bool {
        !matches!(self, NetSpec::Unet { .. })
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Network {
    Lenet { c1: Conv, c2: Conv, d1: Dense, d2: Dense, flat: usize },
    Mlp { d1: Dense, d2: Dense, flat: usize },
    Unet { e1a: Conv, e1b: Conv, e2a: Conv, e2b: Conv, dec: Conv },
}

impl Network {
    /// Builds the network. Dense-output architectures produce `[B, out]`;
    /// the encoder–decoder produces `[B, features, H, W]` and ignores `out`.
    pub(crate) fn new(
        spec: &NetSpec,
        params: &mut ParamSet,
        name: &str,
        h: usize,
        w: usize,
        out: usize,
        r: &mut Rng,
    ) -> Result<Self> {
        match *spec {
            NetSpec::Lenet { conv1, conv2, kernel, hidden } => {
                let shrink = |s: usize| -> Result<usize> {
                    if s < kernel || (s + 1 - kernel) < 2 {
                        return Err(Error::Dimension(format!("{h}×{w} input too small for the {kernel}×{kernel} convolutions")));
                    }
                    Ok((s + 1 - kernel) / 2)
                };
                let (h2, w2) = (shrink(shrink(h)?)?, shrink(shrink(w)?)?);
                let flat = conv2 * h2 * w2;
                Ok(Network::Lenet {
                    c1: Conv::new(params, &format!("{name}.conv1"), 1, conv1, kernel, 0, r),
                    c2: Conv::new(params, &format!("{name}.conv2"), conv1, conv2, kernel, 0, r),
                    d1: Dense::new(params, &format!("{name}.fc1"), flat, hidden, r),
                    d2: Dense::new(params, &format!("{name}.fc2"), hidden, out, r),
                    flat,
                })
            }
            NetSpec::Mlp { hidden } => Ok(Network::Mlp {
                d1: Dense::new(params, &format!("{name}.fc1"), h * w, hidden, r),
                d2: Dense::new(params, &format!("{name}.fc2"), hidden, out, r),
                flat: h * w,
            }),
            NetSpec::Unet { base } => {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::Dimension(format!("encoder–decoder needs even extents, got {h}×{w}")));
                }
                Ok(Network::Unet {
                    e1a: Conv::new(params, &format!("{name}.enc1a"), 1, base, 3, 1, r),
                    e1b: Conv::new(params, &format!("{name}.enc1b"), base, base, 3, 1, r),
                    e2a: Conv::new(params, &format!("{name}.enc2a"), base, 2 * base, 3, 1, r),
                    e2b: Conv::new(params, &format!("{name}.enc2b"), 2 * base, 2 * base, 3, 1, r),
                    dec: Conv::new(params, &format!("{name}.dec"), 3 * base, base, 3, 1, r),
                })
            }
        }
    }

    /// Number of feature channels of the encoder–decoder output.
    pub(crate) fn features(&self, params: &ParamSet) -> usize {
        match self {
            Network::Unet { dec, .. } => params.value(dec.b).len(),
            Network::Lenet { d2, .. } | Network::Mlp { d2, .. } => params.value(d2.b).len(),
        }
    }

    /// Zeroes the last layer's weights and sets its bias.
    pub(crate) fn set_output_layer(&self, params: &mut ParamSet, bias: Tensor) {
        if let Network::Lenet { d2, .. } | Network::Mlp { d2, .. } = self {
            params.get_mut(d2.w).value.data_mut().fill(0.0);
            params.get_mut(d2.b).value = bias;
        }
    }

    pub(crate) fn forward(&self, g: &mut Graph, params: &ParamSet, x: Var) -> Result<Var> {
        let batch = g.shape(x)[0];
        match self {
            Network::Lenet { c1, c2, d1, d2, flat } => {
                let h = c1.forward(g, params, x)?;
                let h = g.relu(h);
                let h = g.maxpool2d(h)?;
                let h = c2.forward(g, params, h)?;
                let h = g.relu(h);
                let h = g.maxpool2d(h)?;
                let h = g.reshape(h, &[batch, *flat])?;
                let h = d1.forward(g, params, h)?;
                let h = g.relu(h);
                d2.forward(g, params, h)
            }
            Network::Mlp { d1, d2, flat } => {
                let h = g.reshape(x, &[batch, *flat])?;
                let h = d1.forward(g, params, h)?;
                let h = g.relu(h);
                d2.forward(g, params, h)
            }
            Network::Unet { e1a, e1b, e2a, e2b, dec } => {
                let h = e1a.forward(g, params, x)?;
                let h = g.relu(h);
                let h = e1b.forward(g, params, h)?;
                let skip = g.relu(h);
                let h = g.maxpool2d(skip)?;
                let h = e2a.forward(g, params, h)?;
                let h = g.relu(h);
                let h = e2b.forward(g, params, h)?;
                let h = g.relu(h);
                let h = g.upsample2x(h)?;
                let h = g.concat(&[skip, h], 1)?;
                let h = dec.forward(g, params, h)?;
                Ok(g.relu(h))
            }
        }
    }
}
