//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation eagerly. Parameters enter through
//! [`Graph::param`], which binds a [`ParamId`] from a [`ParamStore`] to a leaf
//! node exactly once per graph, so a parameter used by several branches
//! accumulates gradient from all of them.

use std::collections::HashMap;

use crate::error::{AutogradError, Result};
use crate::kernels::{self, ConvDims};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Conv { x: Var, w: Var, b: Var, k: usize },
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Concat(Var, Var),
    Shuffle(Var),
    Unshuffle(Var),
    Sum(Var),
    SqErr { x: Var, target: Tensor<T> },
    KlDiag { mq: Var, lq: Var, mp: Var, lp: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), bound: HashMap::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that receives a gradient but is not tied to a parameter.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.bound.insert(id, v);
        v
    }

    /// Parameters bound into this graph so far.
    pub fn bound_params(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.bound.keys().copied().collect();
        ids.sort();
        ids
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (batch, cin, h, wd) = self.value(x).dims4()?;
        let (cout, wcin, k) = match self.shape(w) {
            &[co, ci, kh, kw] if kh == kw && kh % 2 == 1 => (co, ci, kh),
            other => return Err(AutogradError::Shape(format!("bad conv weight shape {other:?}"))),
        };
        if wcin != cin {
            return Err(AutogradError::Shape(format!("conv expects {wcin} input channels, got {cin}")));
        }
        if self.shape(b) != [cout] {
            return Err(AutogradError::Shape(format!("bad conv bias shape {:?}", self.shape(b))));
        }
        let d = ConvDims { batch, cin, cout, h, w: wd, k };
        let out = kernels::conv2d_forward(d, self.value(x).data(), self.value(w).data(), self.value(b).data());
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::from_vec(&[batch, cout, h, wd], out)?, Op::Conv { x, w, b, k }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |p, q| p - q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |p, q| p * q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = T::from_f64(factor);
        let out = self.value(x).map(|v| v * f);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, factor), rg)
    }

    pub fn add_scalar(&mut self, x: Var, offset: f64) -> Var {
        let o = T::from_f64(offset);
        let out = self.value(x).map(|v| v + o);
        let rg = self.rg(x);
        self.push(out, Op::AddScalar(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.exp());
        let rg = self.rg(x);
        self.push(out, Op::Exp(x), rg)
    }

    /// Gradient passes where `lo <= x <= hi`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (T::from_f64(lo), T::from_f64(hi));
        let out = self.value(x).map(|v| v.max(l).min(h));
        let rg = self.rg(x);
        self.push(out, Op::Clamp { x, lo, hi }, rg)
    }

    /// Channel-wise concatenation of two NCHW tensors.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, ca, ha, wa) = self.value(a).dims4()?;
        let (bb, cb, hb, wb) = self.value(b).dims4()?;
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(AutogradError::Shape(format!("concat mismatch: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let plane = ha * wa;
        let mut out = Vec::with_capacity(ba * (ca + cb) * plane);
        for n in 0..ba {
            out.extend_from_slice(&self.value(a).data()[n * ca * plane..(n + 1) * ca * plane]);
            out.extend_from_slice(&self.value(b).data()[n * cb * plane..(n + 1) * cb * plane]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec(&[ba, ca + cb, ha, wa], out)?, Op::Concat(a, b), rg))
    }

    /// Depth-to-space by a factor of two.
    pub fn pixel_shuffle(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if c % 4 != 0 {
            return Err(AutogradError::Shape(format!("pixel shuffle needs channels divisible by 4, got {c}")));
        }
        let out = kernels::pixel_shuffle(self.value(x).data(), b, c / 4, h, w);
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(&[b, c / 4, 2 * h, 2 * w], out)?, Op::Shuffle(x), rg))
    }

    /// Space-to-depth by a factor of two.
    pub fn pixel_unshuffle(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(AutogradError::Shape(format!("pixel unshuffle needs even spatial dims, got {h}x{w}")));
        }
        let out = kernels::pixel_unshuffle(self.value(x).data(), b, c, h, w);
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(&[b, 4 * c, h / 2, w / 2], out)?, Op::Unshuffle(x), rg))
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = T::from_f64(self.value(x).sum_f64());
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// `sum((x - target)^2)` against a constant target.
    pub fn squared_error(&mut self, x: Var, target: &Tensor<T>) -> Result<Var> {
        self.value(x).check_same_shape(target)?;
        let s: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &t)| {
                let d = (a - t).as_f64();
                d * d
            })
            .sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(T::from_f64(s)), Op::SqErr { x, target: target.clone() }, rg))
    }

    /// Summed closed-form KL between diagonal Gaussians parameterized by
    /// mean and log standard deviation, `KL(q || p)`.
    pub fn kl_diag_gaussian(&mut self, mq: Var, lq: Var, mp: Var, lp: Var) -> Result<Var> {
        let shape = self.shape(mq).to_vec();
        for v in [lq, mp, lp] {
            if self.shape(v) != shape.as_slice() {
                return Err(AutogradError::Shape(format!(
                    "KL argument shapes differ: {:?} vs {:?}",
                    shape,
                    self.shape(v)
                )));
            }
        }
        let (a, b, c, d) = (self.value(mq), self.value(lq), self.value(mp), self.value(lp));
        let mut s = 0.0f64;
        for i in 0..a.numel() {
            let (mq, lq, mp, lp) =
                (a.data()[i].as_f64(), b.data()[i].as_f64(), c.data()[i].as_f64(), d.data()[i].as_f64());
            s += kl_element(mq, lq, mp, lp);
        }
        let rg = self.rg(mq) || self.rg(lq) || self.rg(mp) || self.rg(lp);
        Ok(self.push(Tensor::scalar(T::from_f64(s)), Op::KlDiag { mq, lq, mp, lp }, rg))
    }

    /// Reverse pass from a one-element output.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(AutogradError::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(shape, T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let mut by_param = HashMap::new();
        for (&id, &v) in &self.bound {
            if let Some(g) = grads[v.0].take() {
                by_param.insert(id, g);
            }
        }
        Ok(Gradients { by_param, nodes: grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, k } => {
                let xv = self.value(*x);
                let (batch, cin, h, wd) = xv.dims4()?;
                let cout = self.shape(*w)[0];
                let d = ConvDims { batch, cin, cout, h, w: wd, k: *k };
                let cg = kernels::conv2d_backward(d, xv.data(), self.value(*w).data(), g.data(), self.rg(*x));
                if let Some(dx) = cg.dx {
                    self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx)?);
                }
                self.accumulate(grads, *w, Tensor::from_vec(self.shape(*w), cg.dw)?);
                self.accumulate(grads, *b, Tensor::from_vec(&[cout], cg.db)?);
            }
            Op::Relu(x) => {
                let dx = node.value.zip_map(g, |y, gy| if y > T::zero() { gy } else { T::zero() })?;
                self.accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let da = g.zip_map(self.value(*b), |gy, q| gy * q)?;
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let db = g.zip_map(self.value(*a), |gy, p| gy * p)?;
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Scale(x, f) => {
                let f = T::from_f64(*f);
                self.accumulate(grads, *x, g.map(|v| v * f));
            }
            Op::AddScalar(x) => self.accumulate(grads, *x, g.clone()),
            Op::Exp(x) => {
                let dx = node.value.zip_map(g, |y, gy| y * gy)?;
                self.accumulate(grads, *x, dx);
            }
            Op::Clamp { x, lo, hi } => {
                let (l, h) = (T::from_f64(*lo), T::from_f64(*hi));
                let dx = self.value(*x).zip_map(g, |v, gy| if v >= l && v <= h { gy } else { T::zero() })?;
                self.accumulate(grads, *x, dx);
            }
            Op::Concat(a, b) => {
                let (batch, ca, h, w) = self.value(*a).dims4()?;
                let cb = self.shape(*b)[1];
                let plane = h * w;
                let mut da = Vec::with_capacity(batch * ca * plane);
                let mut db = Vec::with_capacity(batch * cb * plane);
                for n in 0..batch {
                    let base = n * (ca + cb) * plane;
                    da.extend_from_slice(&g.data()[base..base + ca * plane]);
                    db.extend_from_slice(&g.data()[base + ca * plane..base + (ca + cb) * plane]);
                }
                self.accumulate(grads, *a, Tensor::from_vec(&[batch, ca, h, w], da)?);
                self.accumulate(grads, *b, Tensor::from_vec(&[batch, cb, h, w], db)?);
            }
            Op::Shuffle(x) => {
                let (b, c, h, w) = g.dims4()?;
                let dx = kernels::pixel_unshuffle(g.data(), b, c, h, w);
                self.accumulate(grads, *x, Tensor::from_vec(self.shape(*x), dx)?);
            }
            Op::Unshuffle(x) => {
                let (b, c, h, w) = g.dims4()?;
                let dx = kernels::pixel_shuffle(g.data(), b, c / 4, h, w);
                self.accumulate(grads, *x, Tensor::from_vec(self.shape(*x), dx)?);
            }
            Op::Sum(x) => {
                let gy = g.item();
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), gy));
            }
            Op::SqErr { x, target } => {
                let two_g = g.item() + g.item();
                let dx = self.value(*x).zip_map(target, |a, t| two_g * (a - t))?;
                self.accumulate(grads, *x, dx);
            }
            Op::KlDiag { mq, lq, mp, lp } => {
                let gy = g.item().as_f64();
                let n = self.value(*mq).numel();
                let shape = self.shape(*mq).to_vec();
                let (a, b, c, d) = (self.value(*mq), self.value(*lq), self.value(*mp), self.value(*lp));
                let mut gmq = Vec::with_capacity(n);
                let mut glq = Vec::with_capacity(n);
                let mut gmp = Vec::with_capacity(n);
                let mut glp = Vec::with_capacity(n);
                for i in 0..n {
                    let (m_q, l_q, m_p, l_p) =
                        (a.data()[i].as_f64(), b.data()[i].as_f64(), c.data()[i].as_f64(), d.data()[i].as_f64());
                    let inv_var_p = (-2.0 * l_p).exp();
                    let diff = m_q - m_p;
                    let var_q = (2.0 * l_q).exp();
                    gmq.push(T::from_f64(gy * diff * inv_var_p));
                    gmp.push(T::from_f64(-gy * diff * inv_var_p));
                    glq.push(T::from_f64(gy * (var_q * inv_var_p - 1.0)));
                    glp.push(T::from_f64(gy * (1.0 - (var_q + diff * diff) * inv_var_p)));
                }
                self.accumulate(grads, *mq, Tensor::from_vec(&shape, gmq)?);
                self.accumulate(grads, *lq, Tensor::from_vec(&shape, glq)?);
                self.accumulate(grads, *mp, Tensor::from_vec(&shape, gmp)?);
                self.accumulate(grads, *lp, Tensor::from_vec(&shape, glp)?);
            }
        }
        Ok(())
    }
}

/// Closed-form `KL(N(mq, e^{2 lq}) || N(mp, e^{2 lp}))` for one coordinate.
pub fn kl_element(mq: f64, lq: f64, mp: f64, lp: f64) -> f64 {
    let var_q = (2.0 * lq).exp();
    let inv_var_p = (-2.0 * lp).exp();
    let diff = mq - mp;
    lp - lq + 0.5 * (var_q + diff * diff) * inv_var_p - 0.5
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    by_param: HashMap<ParamId, Tensor<T>>,
    nodes: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.by_param.get(&id)
    }

    /// Gradient of a non-parameter variable created with [`Graph::variable`].
    pub fn var(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn into_params(self) -> HashMap<ParamId, Tensor<T>> {
        self.by_param
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(build: impl Fn(&mut Graph<f64>, Var) -> Var, x0: Tensor<f64>) {
        let mut g = Graph::new();
        let x = g.variable(x0.clone());
        let out = build(&mut g, x);
        let grads = g.backward(out).unwrap();
        let analytic = grads.var(x).unwrap().clone();
        let h = 1e-6;
        for i in 0..x0.numel() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.data_mut()[i] += delta;
                let mut g = Graph::new();
                let x = g.variable(xp);
                let out = build(&mut g, x);
                g.value(out).item()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            assert!((a - numeric).abs() <= 1e-6 * (1.0 + a.abs()), "index {i}: {a} vs {numeric}");
        }
    }

    fn ramp(shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| ((i * 37 % 17) as f64 - 8.0) / 7.0 + 0.013)
    }

    #[test]
    fn shuffle_concat_exp_gradients() {
        fd_check(
            |g, x| {
                let u = g.pixel_unshuffle(x).unwrap();
                let e = g.exp(u);
                let c = g.concat(e, u).unwrap();
                let cs = g.scale(c, 0.5);
                let s = g.pixel_shuffle(cs).unwrap();
                let m = g.mul(s, s).unwrap();
                g.sum(m)
            },
            ramp(&[2, 2, 4, 4]),
        );
    }

    #[test]
    fn conv_relu_clamp_gradients() {
        fd_check(
            |g, x| {
                let w = g.constant(ramp(&[3, 2, 3, 3]).map(|v| v * 0.3));
                let b = g.constant(Tensor::from_vec(&[3], vec![0.1, -0.2, 0.05]).unwrap());
                let y = g.conv2d(x, w, b).unwrap();
                let r = g.relu(y);
                let c = g.clamp(r, -10.0, 0.9);
                let t = ramp(&[2, 3, 4, 5]);
                g.squared_error(c, &t).unwrap()
            },
            ramp(&[2, 2, 4, 5]),
        );
    }

    #[test]
    fn kl_gradients_in_every_argument() {
        for which in 0..4 {
            fd_check(
                |g, x| {
                    let mut args: Vec<Var> =
                        (0..4).map(|j| g.constant(ramp(&[1, 1, 2, 3]).map(|v| v * 0.5 + j as f64 * 0.1))).collect();
                    args[which] = x;
                    g.kl_diag_gaussian(args[0], args[1], args[2], args[3]).unwrap()
                },
                ramp(&[1, 1, 2, 3]).map(|v| v * 0.4),
            );
        }
    }

    #[test]
    fn shared_parameter_accumulates_from_both_uses() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::from_vec(&[2], vec![1.5, -0.5]).unwrap()).unwrap();
        let mut g = Graph::<f64>::new();
        let a = g.param(&store, id);
        let b = g.param(&store, id);
        assert_eq!(a, b);
        let m = g.mul(a, b).unwrap();
        let s = g.sum(m);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.param(id).unwrap().data(), &[3.0, -1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f32>::new();
        let x = g.variable(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(x), Err(AutogradError::NonScalarLoss(_))));
    }
}
