//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every value produced during a forward pass together
//! with a closure that maps the output gradient back to its inputs. Calling
//! [`Graph::backward`] walks the tape once in reverse. Nodes that do not
//! depend on a parameter never store a closure, so inference graphs
//! ([`Graph::inference`]) carry values only.

mod conv;
mod norm;
mod shape;

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::linalg::gemm;
use crate::{Error, Result, Tensor};

pub use conv::PadMode;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Maps `(input values, output value, output grad, which inputs need grads)`
/// to one optional gradient per input.
pub type BackwardFn = Box<dyn Fn(&[&Tensor], &Tensor, &Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

pub struct Graph {
    values: Vec<Tensor>,
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            values: Vec::new(),
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that never records backward closures.
    pub fn inference() -> Self {
        Graph {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        let track = self.grad_enabled;
        self.leaf(value, track)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.values.push(value);
        self.nodes.push(Node {
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(self.values.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`backward`](Self::backward) target w.r.t. `v`.
    /// `None` when `v` does not influence it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Records the result of a custom operation.
    pub fn custom<F>(&mut self, value: Tensor, parents: &[Var], backward: F) -> Var
    where
        F: Fn(&[&Tensor], &Tensor, &Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    {
        let requires_grad = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.values.push(value);
        self.nodes.push(Node {
            parents: parents.iter().map(|p| p.0).collect(),
            backward: if requires_grad { Some(Box::new(backward)) } else { None },
            requires_grad,
        });
        Var(self.values.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar, got shape {:?}",
                self.values[loss.0].shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.values.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.values[loss.0].shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let (Some(f), Some(g)) = (node.backward.as_ref(), grads[i].as_ref()) else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.parents.iter().map(|&p| &self.values[p]).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| self.nodes[p].requires_grad).collect();
            let parent_grads = f(&inputs, &self.values[i], g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), self.values[p].shape());
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn check_same(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "{op}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.custom(v, &[a, b], |_, _, g, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.custom(v, &[a, b], |_, _, g, _| vec![Some(g.clone()), Some(g.map(|x| -x))]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.custom(v, &[a, b], |inp, _, g, needs| {
            vec![
                needs[0].then(|| g.zip_map(inp[1], |g, y| g * y)),
                needs[1].then(|| g.zip_map(inp[0], |g, x| g * x)),
            ]
        }))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.custom(v, &[a], move |_, _, g, _| vec![Some(g.map(|x| x * s))])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.custom(v, &[a], |inp, _, g, _| {
            vec![Some(g.zip_map(inp[0], |g, x| if x > 0.0 { g } else { 0.0 }))]
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.custom(v, &[a], |_, out, g, _| vec![Some(g.zip_map(out, |g, s| g * s * (1.0 - s)))])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        self.custom(v, &[a], |inp, _, g, _| vec![Some(g.zip_map(inp[0], |g, x| g * sigmoid(x)))])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(libm::exp);
        self.custom(v, &[a], |_, out, g, _| vec![Some(g.zip_map(out, |g, e| g * e))])
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| gelu(x).0);
        self.custom(v, &[a], |inp, _, g, _| vec![Some(g.zip_map(inp[0], |g, x| g * gelu(x).1))])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.custom(v, &[a], |inp, _, g, _| vec![Some(Tensor::full(inp[0].shape(), g.item()))])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    // ---- broadcasts ----------------------------------------------------

    /// `x[..., C] + b[C]`.
    pub fn add_lastdim(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = self.lastdim_check(x, b, "add_lastdim")?;
        let mut v = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for row in v.data_mut().chunks_mut(c) {
            for (r, bb) in row.iter_mut().zip(&bias) {
                *r += bb;
            }
        }
        Ok(self.custom(v, &[x, b], move |_, _, g, needs| {
            let gb = needs[1].then(|| {
                let mut acc = Tensor::zeros(&[c]);
                for row in g.data().chunks(c) {
                    for (a, r) in acc.data_mut().iter_mut().zip(row) {
                        *a += r;
                    }
                }
                acc
            });
            vec![Some(g.clone()), gb]
        }))
    }

    /// `x[..., C] * d[C]`.
    pub fn mul_lastdim(&mut self, x: Var, d: Var) -> Result<Var> {
        let c = self.lastdim_check(x, d, "mul_lastdim")?;
        let mut v = self.value(x).clone();
        let scale = self.value(d).data().to_vec();
        for row in v.data_mut().chunks_mut(c) {
            for (r, s) in row.iter_mut().zip(&scale) {
                *r *= s;
            }
        }
        Ok(self.custom(v, &[x, d], move |inp, _, g, needs| {
            let gx = needs[0].then(|| {
                let mut gx = g.clone();
                let d = inp[1].data();
                for row in gx.data_mut().chunks_mut(c) {
                    for (r, s) in row.iter_mut().zip(d) {
                        *r *= s;
                    }
                }
                gx
            });
            let gd = needs[1].then(|| {
                let mut acc = Tensor::zeros(&[c]);
                for (grow, xrow) in g.data().chunks(c).zip(inp[0].data().chunks(c)) {
                    for ((a, gv), xv) in acc.data_mut().iter_mut().zip(grow).zip(xrow) {
                        *a += gv * xv;
                    }
                }
                acc
            });
            vec![gx, gd]
        }))
    }

    fn lastdim_check(&self, x: Var, b: Var, op: &str) -> Result<usize> {
        let xs = self.value(x).shape();
        let bs = self.value(b).shape();
        match (xs.last(), bs) {
            (Some(&c), [bc]) if c == *bc => Ok(c),
            _ => Err(Error::Shape(format!("{op}: {:?} with {:?}", xs, bs))),
        }
    }

    /// `x[N, C, ...] + v[N, C]`, broadcasting over the spatial axes.
    pub fn add_channel_vec(&mut self, x: Var, v: Var) -> Result<Var> {
        let xs = self.value(x).shape();
        let vs = self.value(v).shape();
        if xs.len() < 2 || vs != &xs[..2] {
            return Err(Error::Shape(format!("add_channel_vec: {:?} with {:?}", xs, vs)));
        }
        let s = self.value(x).trailing(2);
        let mut out = self.value(x).clone();
        for (chunk, b) in out.data_mut().chunks_mut(s).zip(self.value(v).data()) {
            chunk.iter_mut().for_each(|o| *o += b);
        }
        let vshape = vs.to_vec();
        Ok(self.custom(out, &[x, v], move |_, _, g, needs| {
            let gv = needs[1].then(|| {
                let data = g.data().chunks(s).map(|c| c.iter().sum()).collect();
                Tensor::new(&vshape, data).expect("channel vector shape")
            });
            vec![Some(g.clone()), gv]
        }))
    }

    /// `x[N, C, S...] * gate[N, 1, S...]`.
    pub fn mul_gate(&mut self, x: Var, gate: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let gs = self.value(gate).shape();
        if xs.len() < 2 || gs.len() != xs.len() || gs[0] != xs[0] || gs[1] != 1 || gs[2..] != xs[2..] {
            return Err(Error::Shape(format!("mul_gate: {:?} with {:?}", xs, gs)));
        }
        let (n, c) = (xs[0], xs[1]);
        let s = self.value(x).trailing(2);
        let mut out = self.value(x).clone();
        {
            let gd = self.value(gate).data().to_vec();
            for (i, chunk) in out.data_mut().chunks_mut(s).enumerate() {
                let gate_row = &gd[(i / c) * s..(i / c + 1) * s];
                chunk.iter_mut().zip(gate_row).for_each(|(o, w)| *o *= w);
            }
        }
        Ok(self.custom(out, &[x, gate], move |inp, _, g, needs| {
            let (xv, gv) = (inp[0].data(), inp[1].data());
            let gx = needs[0].then(|| {
                let mut gx = g.clone();
                for (i, chunk) in gx.data_mut().chunks_mut(s).enumerate() {
                    let gate_row = &gv[(i / c) * s..(i / c + 1) * s];
                    chunk.iter_mut().zip(gate_row).for_each(|(o, w)| *o *= w);
                }
                gx
            });
            let gg = needs[1].then(|| {
                let mut acc = Tensor::zeros(inp[1].shape());
                let ad = acc.data_mut();
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * s;
                        for j in 0..s {
                            ad[b * s + j] += g.data()[off + j] * xv[off + j];
                        }
                    }
                }
                acc
            });
            vec![gx, gg]
        }))
    }

    /// `x[..., Cin] · w[Cout, Cin]ᵀ (+ b[Cout])`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape();
        let (cout, cin) = match (ws, xs.last()) {
            ([o, i], Some(&c)) if *i == c => (*o, *i),
            _ => return Err(Error::Shape(format!("linear: x {:?} with w {:?}", xs, ws))),
        };
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(Error::Shape(format!("linear: bias {:?} for {} outputs", self.value(b).shape(), cout)));
            }
        }
        let m = self.value(x).numel() / cin.max(1);
        let mut out = vec![0.0; m * cout];
        gemm(m, cin, cout, self.value(x).data(), false, self.value(w).data(), true, 0.0, &mut out);
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_mut(cout) {
                row.iter_mut().zip(bd).for_each(|(o, bb)| *o += bb);
            }
        }
        let mut oshape = xs.clone();
        *oshape.last_mut().unwrap() = cout;
        let out = Tensor::new(&oshape, out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.custom(out, &parents, move |inp, _, g, needs| {
            let gx = needs[0].then(|| {
                let mut gx = vec![0.0; m * cin];
                gemm(m, cout, cin, g.data(), false, inp[1].data(), false, 0.0, &mut gx);
                Tensor::new(inp[0].shape(), gx).expect("linear grad shape")
            });
            let gw = needs[1].then(|| {
                let mut gw = vec![0.0; cout * cin];
                gemm(cout, m, cin, g.data(), true, inp[0].data(), false, 0.0, &mut gw);
                Tensor::new(&[cout, cin], gw).expect("linear grad shape")
            });
            let mut grads = vec![gx, gw];
            if inp.len() == 3 {
                grads.push(needs[2].then(|| {
                    let mut gb = Tensor::zeros(&[cout]);
                    for row in g.data().chunks(cout) {
                        gb.data_mut().iter_mut().zip(row).for_each(|(a, r)| *a += r);
                    }
                    gb
                }));
            }
            grads
        }))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        libm::log1p(libm::exp(x))
    }
}

/// Value and derivative of the tanh-approximated GELU.
fn gelu(x: f64) -> (f64, f64) {
    const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let inner = K * (x + 0.044715 * x * x * x);
    let t = libm::tanh(inner);
    let value = 0.5 * x * (1.0 + t);
    let dinner = K * (1.0 + 3.0 * 0.044715 * x * x);
    let deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
    (value, deriv)
}

#[cfg(test)]
pub(crate) mod testing {
    //! Central-difference gradient checks shared by the unit tests.
    use super::*;

    /// Builds the graph with `inputs` as parameters and returns the scalar.
    pub fn check_grad(
        inputs: &[Tensor],
        build: impl Fn(&mut Graph, &[Var]) -> Var,
        h: f64,
        rel_tol: f64,
    ) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.backward(out).unwrap();
        for (idx, t) in inputs.iter().enumerate() {
            let analytic = g.grad(vars[idx]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
            for j in 0..t.numel() {
                let eval = |delta: f64| {
                    let mut probe: Vec<Tensor> = inputs.to_vec();
                    probe[idx].data_mut()[j] += delta;
                    let mut g2 = Graph::new();
                    let vs: Vec<Var> = probe.into_iter().map(|t| g2.param(t)).collect();
                    let o = build(&mut g2, &vs);
                    g2.value(o).item()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = analytic.data()[j];
                let scale = fd.abs().max(an.abs());
                assert!(
                    (fd - an).abs() <= rel_tol * scale + 1e-8,
                    "input {idx} elem {j}: analytic {an} vs numeric {fd}"
                );
            }
        }
    }

    pub fn ramp(shape: &[usize], seed: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| libm::sin(seed + 1.37 * i as f64) * 0.9).collect();
        Tensor::new(shape, data).unwrap()
    }
}
