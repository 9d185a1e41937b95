//! Record-then-reverse computation graph.
//!
//! Every op appends a node holding its output value and enough saved state to
//! apply its gradient rule. [`Graph::backward`] walks the nodes in reverse
//! recording order exactly once, so backward cost is linear in graph size.

use super::params::{ParamId, ParamSet};
use super::tensor::{axis_split, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    AddBias(usize, usize),
    AddChannelBias(usize, usize),
    Log(usize),
    Exp(usize),
    Relu(usize),
    XLogX(usize),
    Softmax(usize, usize),
    Conv2d { x: usize, w: usize, pad: usize },
    MaxPool2d { x: usize, argmax: Vec<usize> },
    Upsample2x(usize),
    Concat { parts: Vec<usize>, axis: usize },
    Sum(usize),
    Mean(usize),
    Gather { x: usize, axis: usize, index: Vec<usize> },
    MaxAxis { x: usize, axis: usize, argmax: Vec<usize> },
    BatchedMatVec(usize, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Gradients of a scalar with respect to every leaf that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` for constants, detached values and non-leaf nodes.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

/// A dynamic tape of differentiable tensor ops.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Leaf bound to a parameter; [`Graph::backward_into`] routes its gradient back.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        let v = self.leaf(params.value(id).clone(), true);
        self.nodes[v.0].param = Some(id);
        v
    }

    /// Copy of `v` with no gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    // ── linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!("matmul of {sa:?} by {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a.0, b.0), &[a.0, b.0]))
    }

    /// `q[n, j] = sum_i u[n, j, i] * p[n, i]`.
    pub fn batched_matvec(&mut self, u: Var, p: Var) -> Result<Var> {
        let (su, sp) = (self.shape(u), self.shape(p));
        if su.len() != 3 || sp.len() != 2 || su[0] != sp[0] || su[2] != sp[1] {
            return Err(Error::Dimension(format!("batched matvec of {su:?} by {sp:?}")));
        }
        let (n, rows, cols) = (su[0], su[1], su[2]);
        let (ud, pd) = (self.value(u).data(), self.value(p).data());
        let mut out = vec![0.0; n * rows];
        for s in 0..n {
            let pv = &pd[s * cols..(s + 1) * cols];
            for j in 0..rows {
                let row = &ud[(s * rows + j) * cols..(s * rows + j + 1) * cols];
                out[s * rows + j] = row.iter().zip(pv).map(|(a, b)| a * b).sum();
            }
        }
        Ok(self.push(Tensor::new(vec![n, rows], out)?, Op::BatchedMatVec(u.0, p.0), &[u.0, p.0]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Dimension(format!("bad permutation {perm:?} for shape {shape:?}")));
        }
        let out = permute_data(self.value(x).data(), &shape, perm);
        let new_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        Ok(self.push(Tensor::new(new_shape, out)?, Op::Permute(x.0, perm.to_vec()), &[x.0]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(Error::Dimension("transpose expects a matrix".into()));
        }
        self.permute(x, &[1, 0])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x.0), &[x.0]))
    }

    // ── elementwise ─────────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add(a.0, b.0), &[a.0, b.0]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul(a.0, b.0), &[a.0, b.0]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = map(self.value(x), |v| v * s);
        self.push(out, Op::Scale(x.0, s), &[x.0])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = map(self.value(x), |v| v + c);
        self.push(out, Op::AddScalar(x.0), &[x.0])
    }

    /// `x[..., k] + b[k]` along the last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(Error::Dimension(format!("bias {sb:?} for input {sx:?}")));
        }
        let n = sb[0];
        let bd = self.value(b).data();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            row.iter_mut().zip(bd).for_each(|(o, b)| *o += b);
        }
        Ok(self.push(out, Op::AddBias(x.0, b.0), &[x.0, b.0]))
    }

    /// `x[b, c, h, w] + bias[c]`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.len() != 4 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::Dimension(format!("channel bias {sb:?} for input {sx:?}")));
        }
        let plane = sx[2] * sx[3];
        let c = sx[1];
        let bd = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for (k, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let bv = bd[k % c];
            chunk.iter_mut().for_each(|o| *o += bv);
        }
        Ok(self.push(out, Op::AddChannelBias(x.0, b.0), &[x.0, b.0]))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::Numeric(format!("log of non-positive value {bad}")));
        }
        let out = map(self.value(x), f64::ln);
        Ok(self.push(out, Op::Log(x.0), &[x.0]))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = map(self.value(x), f64::exp);
        if out.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("exp overflow".into()));
        }
        Ok(self.push(out, Op::Exp(x.0), &[x.0]))
    }

    /// Subgradient 0 at 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let out = map(self.value(x), |v| if v > 0.0 { v } else { 0.0 });
        self.push(out, Op::Relu(x.0), &[x.0])
    }

    /// `x * ln x` with `0 ln 0 = 0`.
    pub fn xlogx(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| !(v >= 0.0)) {
            return Err(Error::Numeric(format!("x ln x of negative value {bad}")));
        }
        let out = map(self.value(x), |v| if v > 0.0 { v * v.ln() } else { 0.0 });
        Ok(self.push(out, Op::XLogX(x.0), &[x.0]))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!("softmax axis {axis} for shape {shape:?}")));
        }
        let xd = self.value(x).data();
        if xd.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("softmax of non-finite input".into()));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let max = (0..n).map(|k| xd[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..n {
                    let e = (xd[at(k)] - max).exp();
                    out[at(k)] = e;
                    total += e;
                }
                for k in 0..n {
                    out[at(k)] /= total;
                }
            }
        }
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(x.0, axis), &[x.0]))
    }

    // ── convolutional ───────────────────────────────────────────────────

    /// Stride-1 cross-correlation with symmetric zero padding.
    /// `x: [B, Cin, H, W]`, `w: [Cout, Cin, Kh, Kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::Dimension(format!("conv2d of {sx:?} with kernel {sw:?}")));
        }
        let geo = ConvGeometry::new(&sx, &sw, pad)?;
        let mut out = vec![0.0; geo.b * geo.co * geo.oh * geo.ow];
        conv_forward(&geo, self.value(x).data(), self.value(w).data(), &mut out);
        let shape = vec![geo.b, geo.co, geo.oh, geo.ow];
        Ok(self.push(Tensor::new(shape, out)?, Op::Conv2d { x: x.0, w: w.0, pad }, &[x.0, w.0]))
    }

    /// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
    /// Ties resolve to the first element in row-major window order.
    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(Error::Dimension(format!("maxpool2d of {s:?}")));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xd = self.value(x).data();
        let mut out = vec![0.0; planes * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let k = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xd[k] > xd[best] {
                            best = k;
                        }
                    }
                    let o = (p * oh + oy) * ow + ox;
                    out[o] = xd[best];
                    argmax[o] = best;
                }
            }
        }
        let shape = vec![s[0], s[1], oh, ow];
        Ok(self.push(Tensor::new(shape, out)?, Op::MaxPool2d { x: x.0, argmax }, &[x.0]))
    }

    /// Nearest-neighbour 2× spatial upsampling of `[B, C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::Dimension(format!("upsample2x of {s:?}")));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let xd = self.value(x).data();
        let mut out = vec![0.0; planes * 4 * h * w];
        for p in 0..planes {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(p * 2 * h + y) * 2 * w + xx] = xd[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        let shape = vec![s[0], s[1], 2 * h, 2 * w];
        Ok(self.push(Tensor::new(shape, out)?, Op::Upsample2x(x.0), &[x.0]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Usage("concat of nothing".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Dimension(format!("concat axis {axis} for shape {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::Dimension(format!("concat of {base:?} with {s:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let n = self.shape(*p)[axis];
                out.extend_from_slice(&self.value(*p).data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat { parts: ids.clone(), axis }, &ids))
    }

    // ── reductions and indexing ─────────────────────────────────────────

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x.0), &[x.0])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.value(x).data();
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x.0), &[x.0])
    }

    /// Picks `x[.., index[..], ..]` along `axis`; `index` is laid out over the
    /// remaining axes in row-major order and the axis is removed.
    pub fn gather(&mut self, x: Var, axis: usize, index: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!("gather axis {axis} for shape {shape:?}")));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        if index.len() != outer * inner {
            return Err(Error::Dimension(format!(
                "gather needs {} indices, got {}",
                outer * inner,
                index.len()
            )));
        }
        if let Some(bad) = index.iter().find(|&&k| k >= n) {
            return Err(Error::Usage(format!("gather index {bad} out of range 0..{n}")));
        }
        let xd = self.value(x).data();
        let out: Vec<f64> = (0..outer * inner)
            .map(|t| xd[((t / inner) * n + index[t]) * inner + t % inner])
            .collect();
        let mut out_shape = shape;
        out_shape.remove(axis);
        let op = Op::Gather { x: x.0, axis, index: index.to_vec() };
        Ok(self.push(Tensor::new(out_shape, out)?, op, &[x.0]))
    }

    /// Maximum along `axis`; the gradient flows to the lowest-index maximizer.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!("max axis {axis} for shape {shape:?}")));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let xd = self.value(x).data();
        let mut argmax = vec![0usize; outer * inner];
        let mut out = vec![0.0; outer * inner];
        for t in 0..outer * inner {
            let at = |k: usize| ((t / inner) * n + k) * inner + t % inner;
            let mut best = 0;
            for k in 1..n {
                if xd[at(k)] > xd[at(best)] {
                    best = k;
                }
            }
            argmax[t] = best;
            out[t] = xd[at(best)];
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let op = Op::MaxAxis { x: x.0, axis, argmax };
        Ok(self.push(Tensor::new(out_shape, out)?, op, &[x.0]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{what} of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    // ── reverse pass ────────────────────────────────────────────────────

    /// Gradients of the scalar `loss` with respect to every grad-requiring leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        let mut leaf_grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if let Op::Leaf = node.op {
                leaf_grads[id] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        Ok(Gradients { grads: leaf_grads })
    }

    /// Runs [`Graph::backward`] and adds parameter-leaf gradients into `params`.
    pub fn backward_into(&self, loss: Var, params: &mut ParamSet) -> Result<()> {
        let grads = self.backward(loss)?;
        for (id, node) in self.nodes.iter().enumerate() {
            if let (Some(pid), Some(g)) = (node.param, grads.grads[id].as_ref()) {
                let acc = &mut params.get_mut(pid).grad;
                acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: usize, contrib: Vec<f64>) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut grads[id] {
            Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Vec<f64>>], id: usize, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[id].requires_grad {
            return;
        }
        let n = self.nodes[id].value.len();
        let slot = grads[id].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        let val = |i: usize| self.nodes[i].value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a].value.shape()[0], self.nodes[a].value.shape()[1]);
                let n = self.nodes[b].value.shape()[1];
                if self.nodes[a].requires_grad {
                    // dA = G · Bᵀ
                    let bd = val(b);
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            da[i * k + p] = grow.iter().zip(&bd[p * n..(p + 1) * n]).map(|(x, y)| x * y).sum();
                        }
                    }
                    self.accumulate(grads, a, da);
                }
                if self.nodes[b].requires_grad {
                    // dB = Aᵀ · G
                    let ad = val(a);
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av != 0.0 {
                                db[p * n..(p + 1) * n].iter_mut().zip(grow).for_each(|(d, gv)| *d += av * gv);
                            }
                        }
                    }
                    self.accumulate(grads, b, db);
                }
            }
            &Op::BatchedMatVec(u, p) => {
                let s = self.nodes[u].value.shape();
                let (n, rows, cols) = (s[0], s[1], s[2]);
                if self.nodes[u].requires_grad {
                    let pd = val(p);
                    let mut du = vec![0.0; n * rows * cols];
                    for t in 0..n {
                        for j in 0..rows {
                            let gv = g[t * rows + j];
                            for i in 0..cols {
                                du[(t * rows + j) * cols + i] = gv * pd[t * cols + i];
                            }
                        }
                    }
                    self.accumulate(grads, u, du);
                }
                if self.nodes[p].requires_grad {
                    let ud = val(u);
                    let mut dp = vec![0.0; n * cols];
                    for t in 0..n {
                        for j in 0..rows {
                            let gv = g[t * rows + j];
                            let row = &ud[(t * rows + j) * cols..(t * rows + j + 1) * cols];
                            dp[t * cols..(t + 1) * cols].iter_mut().zip(row).for_each(|(d, uv)| *d += gv * uv);
                        }
                    }
                    self.accumulate(grads, p, dp);
                }
            }
            Op::Permute(x, perm) => {
                let mut inverse = vec![0; perm.len()];
                for (d, &p) in perm.iter().enumerate() {
                    inverse[p] = d;
                }
                let dx = permute_data(g, node.value.shape(), &inverse);
                self.accumulate(grads, *x, dx);
            }
            &Op::Reshape(x) => self.accumulate(grads, x, g.to_vec()),
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.to_vec());
                self.accumulate(grads, b, g.to_vec());
            }
            &Op::Mul(a, b) => {
                let (ad, bd) = (val(a), val(b));
                self.accumulate(grads, a, g.iter().zip(bd).map(|(g, b)| g * b).collect());
                self.accumulate(grads, b, g.iter().zip(ad).map(|(g, a)| g * a).collect());
            }
            &Op::Scale(x, s) => self.accumulate(grads, x, g.iter().map(|v| v * s).collect()),
            &Op::AddScalar(x) => self.accumulate(grads, x, g.to_vec()),
            &Op::AddBias(x, b) => {
                self.accumulate(grads, x, g.to_vec());
                let n = self.nodes[b].value.len();
                self.accumulate_with(grads, b, |db| {
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                });
            }
            &Op::AddChannelBias(x, b) => {
                self.accumulate(grads, x, g.to_vec());
                let s = node.value.shape();
                let (c, plane) = (s[1], s[2] * s[3]);
                self.accumulate_with(grads, b, |db| {
                    for (k, chunk) in g.chunks(plane).enumerate() {
                        db[k % c] += chunk.iter().sum::<f64>();
                    }
                });
            }
            &Op::Log(x) => {
                self.accumulate(grads, x, g.iter().zip(val(x)).map(|(g, v)| g / v).collect());
            }
            &Op::Exp(x) => {
                self.accumulate(grads, x, g.iter().zip(out).map(|(g, e)| g * e).collect());
            }
            &Op::Relu(x) => {
                let dx = g.iter().zip(val(x)).map(|(g, v)| if *v > 0.0 { *g } else { 0.0 }).collect();
                self.accumulate(grads, x, dx);
            }
            &Op::XLogX(x) => {
                let dx = g
                    .iter()
                    .zip(val(x))
                    .map(|(g, v)| g * (v.max(f64::MIN_POSITIVE).ln() + 1.0))
                    .collect();
                self.accumulate(grads, x, dx);
            }
            &Op::Softmax(x, axis) => {
                let (outer, n, inner) = axis_split(node.value.shape(), axis);
                let mut dx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + i;
                        let dot: f64 = (0..n).map(|k| g[at(k)] * out[at(k)]).sum();
                        for k in 0..n {
                            dx[at(k)] = out[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                self.accumulate(grads, x, dx);
            }
            &Op::Conv2d { x, w, pad } => {
                let geo = ConvGeometry::new(self.nodes[x].value.shape(), self.nodes[w].value.shape(), pad)
                    .expect("geometry validated in forward");
                if self.nodes[x].requires_grad {
                    let mut dx = vec![0.0; self.nodes[x].value.len()];
                    conv_backward_input(&geo, g, val(w), &mut dx);
                    self.accumulate(grads, x, dx);
                }
                if self.nodes[w].requires_grad {
                    let mut dw = vec![0.0; self.nodes[w].value.len()];
                    conv_backward_kernel(&geo, g, val(x), &mut dw);
                    self.accumulate(grads, w, dw);
                }
            }
            Op::MaxPool2d { x, argmax } => {
                self.accumulate_with(grads, *x, |dx| {
                    for (gv, &k) in g.iter().zip(argmax) {
                        dx[k] += gv;
                    }
                });
            }
            &Op::Upsample2x(x) => {
                let s = self.nodes[x].value.shape();
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                self.accumulate_with(grads, x, |dx| {
                    for p in 0..planes {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                dx[(p * h + y / 2) * w + xx / 2] += g[(p * 2 * h + y) * 2 * w + xx];
                            }
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p].value.shape()[*axis];
                    if self.nodes[p].requires_grad {
                        let mut dp = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            dp.extend_from_slice(&g[start..start + n * inner]);
                        }
                        self.accumulate(grads, p, dp);
                    }
                    offset += n;
                }
            }
            &Op::Sum(x) => {
                let n = self.nodes[x].value.len();
                self.accumulate(grads, x, vec![g[0]; n]);
            }
            &Op::Mean(x) => {
                let n = self.nodes[x].value.len();
                self.accumulate(grads, x, vec![g[0] / n as f64; n]);
            }
            Op::Gather { x, axis, index } | Op::MaxAxis { x, axis, argmax: index } => {
                let (_, n, inner) = axis_split(self.nodes[*x].value.shape(), *axis);
                self.accumulate_with(grads, *x, |dx| {
                    for (t, (&k, gv)) in index.iter().zip(g).enumerate() {
                        dx[((t / inner) * n + k) * inner + t % inner] += gv;
                    }
                });
            }
        }
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect()).expect("same shape")
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                orow.iter_mut().zip(&b[p * n..(p + 1) * n]).for_each(|(o, bv)| *o += av * bv);
            }
        }
    }
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut strides = vec![1; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    let new_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let new_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        out.push(data[idx.iter().zip(&new_strides).map(|(i, s)| i * s).sum::<usize>()]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < new_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

struct ConvGeometry {
    b: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    fn new(sx: &[usize], sw: &[usize], pad: usize) -> Result<Self> {
        let (h, w, kh, kw) = (sx[2], sx[3], sw[2], sw[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::Dimension(format!("kernel {sw:?} larger than padded input {sx:?}")));
        }
        Ok(ConvGeometry {
            b: sx[0],
            ci: sx[1],
            h,
            w,
            co: sw[0],
            kh,
            kw,
            pad,
            oh: h + 2 * pad - kh + 1,
            ow: w + 2 * pad - kw + 1,
        })
    }

    /// Output columns `ox` whose input column `ox + kx - pad` is in bounds.
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx);
        let hi = (self.w + self.pad).saturating_sub(kx).min(self.ow);
        (lo, hi.max(lo))
    }

    fn input_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy + ky).checked_sub(self.pad)?;
        (iy < self.h).then_some(iy)
    }
}

fn conv_forward(g: &ConvGeometry, x: &[f64], w: &[f64], out: &mut [f64]) {
    let (in_plane, out_plane) = (g.h * g.w, g.oh * g.ow);
    for b in 0..g.b {
        for co in 0..g.co {
            let o = &mut out[(b * g.co + co) * out_plane..(b * g.co + co + 1) * out_plane];
            for ci in 0..g.ci {
                let xin = &x[(b * g.ci + ci) * in_plane..(b * g.ci + ci + 1) * in_plane];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = w[((co * g.ci + ci) * g.kh + ky) * g.kw + kx];
                        let (lo, hi) = g.col_range(kx);
                        for oy in 0..g.oh {
                            let Some(iy) = g.input_row(oy, ky) else { continue };
                            let src = &xin[iy * g.w + lo + kx - g.pad..iy * g.w + hi + kx - g.pad];
                            let dst = &mut o[oy * g.ow + lo..oy * g.ow + hi];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += wv * s);
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward_input(g: &ConvGeometry, grad: &[f64], w: &[f64], dx: &mut [f64]) {
    let (in_plane, out_plane) = (g.h * g.w, g.oh * g.ow);
    for b in 0..g.b {
        for co in 0..g.co {
            let go = &grad[(b * g.co + co) * out_plane..(b * g.co + co + 1) * out_plane];
            for ci in 0..g.ci {
                let dxi = &mut dx[(b * g.ci + ci) * in_plane..(b * g.ci + ci + 1) * in_plane];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = w[((co * g.ci + ci) * g.kh + ky) * g.kw + kx];
                        let (lo, hi) = g.col_range(kx);
                        for oy in 0..g.oh {
                            let Some(iy) = g.input_row(oy, ky) else { continue };
                            let dst = &mut dxi[iy * g.w + lo + kx - g.pad..iy * g.w + hi + kx - g.pad];
                            let src = &go[oy * g.ow + lo..oy * g.ow + hi];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += wv * s);
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward_kernel(g: &ConvGeometry, grad: &[f64], x: &[f64], dw: &mut [f64]) {
    let (in_plane, out_plane) = (g.h * g.w, g.oh * g.ow);
    for b in 0..g.b {
        for co in 0..g.co {
            let go = &grad[(b * g.co + co) * out_plane..(b * g.co + co + 1) * out_plane];
            for ci in 0..g.ci {
                let xin = &x[(b * g.ci + ci) * in_plane..(b * g.ci + ci + 1) * in_plane];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let (lo, hi) = g.col_range(kx);
                        let mut acc = 0.0;
                        for oy in 0..g.oh {
                            let Some(iy) = g.input_row(oy, ky) else { continue };
                            let src = &xin[iy * g.w + lo + kx - g.pad..iy * g.w + hi + kx - g.pad];
                            let gr = &go[oy * g.ow + lo..oy * g.ow + hi];
                            acc += gr.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                        }
                        dw[((co * g.ci + ci) * g.kh + ky) * g.kw + kx] += acc;
                    }
                }
            }
        }
    }
}
