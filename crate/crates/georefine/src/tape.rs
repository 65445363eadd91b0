//! Reverse-mode automatic differentiation on a flat operation tape.
//!
//! One training step builds one `Tape`: leaves are parameter snapshots or
//! constants, every operation records enough to replay its forward value and
//! push adjoints backwards. The contract is finite-difference agreement
//! (`finite_difference_check`), not any particular graph structure.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Norm floor below which a refined normal falls back to its coarse input.
pub const NORMAL_FLOOR: f64 = 1e-8;

/// Default base of the rotary position encoding.
pub const ROPE_BASE: f64 = 10_000.0;

const FD_STEP: f64 = 1e-5;
/// Central differences at step h carry cancellation noise on the order of
/// eps*|loss|/h ~ 1e-11*|loss|, so gradients much smaller than 1e-6*|loss|
/// cannot be certified in relative terms at all. Below that scale the
/// comparison floor switches the check to an absolute one that still flags
/// any genuinely wrong adjoint by orders of magnitude.
const FD_DENOM_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Attention layout: which token rows attend among themselves, and the
/// per-token coordinates consumed by the rotary encoding.
#[derive(Clone, Debug)]
pub struct AttnSpec {
    pub n_heads: usize,
    /// Disjoint (start, len) row segments; softmax never crosses a segment.
    pub groups: Vec<(usize, usize)>,
    /// Per-token (u, v) in pixels; queries and keys are rotated, values not.
    pub coords: Vec<(f64, f64)>,
    pub rope_base: f64,
}

enum Node {
    Leaf,
    Add { a: Var, b: Var },
    AddRow { a: Var, row: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, k: f64 },
    Matmul { a: Var, b: Var },
    Ln { x: Var },
    SoftmaxRows { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var },
    Gelu { x: Var },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttnSpec,
        qr: Tensor,
        kr: Tensor,
        probs: Vec<Tensor>,
    },
    PixelUnshuffle {
        x: Var,
        grid_h: usize,
        grid_w: usize,
        cell: usize,
        channels: usize,
    },
    Reshape { x: Var },
    SliceRows { x: Var, start: usize, len: usize },
    SumAll { x: Var },
    GradX { x: Var },
    GradY { x: Var },
    Unit3Or { x: Var, fallback: Var },
}

pub struct Tape {
    nodes: Vec<Node>,
    values: Vec<Tensor>,
    needs: Vec<bool>,
    params: Vec<Var>,
}

/// Gradients for every registered parameter, in registration order.
/// Parameters the loss never touched get exact-zero tensors.
pub struct Grads {
    params: Vec<Var>,
    grads: Vec<Tensor>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.params.iter().position(|p| *p == v).map(|i| &self.grads[i])
    }

    pub fn into_vec(self) -> Vec<Tensor> {
        self.grads
    }

    pub fn as_slice(&self) -> &[Tensor] {
        &self.grads
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            values: Vec::new(),
            needs: Vec::new(),
            params: Vec::new(),
        }
    }

    fn push(&mut self, node: Node, value: Tensor, needs: bool) -> Var {
        self.nodes.push(node);
        self.values.push(value);
        self.needs.push(needs);
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        let v = self.push(Node::Leaf, t, true);
        self.params.push(v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Node::Leaf, t, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn value_scalar(&self, v: Var) -> f64 {
        let t = &self.values[v.0];
        assert!(t.is_scalar(), "value_scalar on shape {:?}", t.shape());
        t.data()[0]
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn needs_of(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.needs[v.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = tensor::add(self.value(a), self.value(b)).expect("tape add");
        let needs = self.needs_of(&[a, b]);
        self.push(Node::Add { a, b }, v, needs)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = tensor::add_row(self.value(a), self.value(row)).expect("tape add_row");
        let needs = self.needs_of(&[a, row]);
        self.push(Node::AddRow { a, row }, v, needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = tensor::sub(self.value(a), self.value(b)).expect("tape sub");
        let needs = self.needs_of(&[a, b]);
        self.push(Node::Sub { a, b }, v, needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = tensor::mul(self.value(a), self.value(b)).expect("tape mul");
        let needs = self.needs_of(&[a, b]);
        self.push(Node::Mul { a, b }, v, needs)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = tensor::scale(self.value(a), k);
        let needs = self.needs[a.0];
        self.push(Node::Scale { a, k }, v, needs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = tensor::matmul(self.value(a), self.value(b)).expect("tape matmul");
        let needs = self.needs_of(&[a, b]);
        self.push(Node::Matmul { a, b }, v, needs)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        assert!(
            xv.data().iter().all(|&v| v > 0.0),
            "ln: domain requires strictly positive input"
        );
        let v = Tensor::from_fn(xv.shape(), |i| xv.data()[i].ln());
        let needs = self.needs[x.0];
        self.push(Node::Ln { x }, v, needs)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let v = tensor::softmax_rows(self.value(x)).expect("tape softmax_rows");
        let needs = self.needs[x.0];
        self.push(Node::SoftmaxRows { x }, v, needs)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let v = tensor::layer_norm(self.value(x), self.value(gain), self.value(bias))
            .expect("tape layer_norm");
        let needs = self.needs_of(&[x, gain, bias]);
        self.push(Node::LayerNorm { x, gain, bias }, v, needs)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = tensor::gelu(self.value(x));
        let needs = self.needs[x.0];
        self.push(Node::Gelu { x }, v, needs)
    }

    /// Multi-head attention over row segments, with axial rotary encoding on
    /// queries and keys (values stay unrotated) and logit scale 1/sqrt(d_h).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttnSpec) -> Var {
        let (out, qr, kr, probs) = attention_forward(
            self.value(q),
            self.value(k),
            self.value(v),
            &spec,
        );
        let needs = self.needs_of(&[q, k, v]);
        self.push(
            Node::Attention {
                q,
                k,
                v,
                spec,
                qr,
                kr,
                probs,
            },
            out,
            needs,
        )
    }

    /// [T, channels*c*c] cell predictions -> [channels, grid_h*c, grid_w*c] map.
    pub fn pixel_unshuffle(
        &mut self,
        x: Var,
        grid_h: usize,
        grid_w: usize,
        cell: usize,
        channels: usize,
    ) -> Var {
        let xv = self.value(x);
        assert_eq!(
            xv.shape(),
            &[grid_h * grid_w, channels * cell * cell],
            "pixel_unshuffle input shape"
        );
        let v = unshuffle_forward(xv, grid_h, grid_w, cell, channels);
        let needs = self.needs[x.0];
        self.push(
            Node::PixelUnshuffle {
                x,
                grid_h,
                grid_w,
                cell,
                channels,
            },
            v,
            needs,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x).reshaped(shape).expect("tape reshape");
        let needs = self.needs[x.0];
        self.push(Node::Reshape { x }, v, needs)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let (m, n) = (xv.rows(), xv.cols());
        assert!(start + len <= m, "slice_rows out of range");
        let data = xv.data()[start * n..(start + len) * n].to_vec();
        let v = Tensor::new(&[len, n], data).unwrap();
        let needs = self.needs[x.0];
        self.push(Node::SliceRows { x, start, len }, v, needs)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(tensor::sum_all(self.value(x)));
        let needs = self.needs[x.0];
        self.push(Node::SumAll { x }, v, needs)
    }

    /// Horizontal forward differences of an [h, w] map: out[i][j] = x[i][j+1] - x[i][j].
    pub fn grad_x(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (h, w) = (xv.rows(), xv.cols());
        assert!(w >= 2, "grad_x needs width >= 2");
        let v = Tensor::from_fn(&[h, w - 1], |i| {
            let (r, c) = (i / (w - 1), i % (w - 1));
            xv.get2(r, c + 1) - xv.get2(r, c)
        });
        let needs = self.needs[x.0];
        self.push(Node::GradX { x }, v, needs)
    }

    /// Vertical forward differences of an [h, w] map: out[i][j] = x[i+1][j] - x[i][j].
    pub fn grad_y(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (h, w) = (xv.rows(), xv.cols());
        assert!(h >= 2, "grad_y needs height >= 2");
        let v = Tensor::from_fn(&[h - 1, w], |i| {
            let (r, c) = (i / w, i % w);
            xv.get2(r + 1, c) - xv.get2(r, c)
        });
        let needs = self.needs[x.0];
        self.push(Node::GradY { x }, v, needs)
    }

    /// Column-wise unit normalization of a [3, n] field. Columns whose norm
    /// falls below `NORMAL_FLOOR` take the fallback column instead (and pass
    /// no gradient to x there).
    pub fn unit3_or(&mut self, x: Var, fallback: Var) -> Var {
        let xv = self.value(x);
        let fv = self.value(fallback);
        assert_eq!(xv.shape(), fv.shape(), "unit3_or shapes");
        assert_eq!(xv.shape()[0], 3, "unit3_or expects [3, n]");
        let n = xv.shape()[1];
        let mut out = Tensor::zeros(xv.shape());
        for i in 0..n {
            let (a, b, c) = (xv.get2(0, i), xv.get2(1, i), xv.get2(2, i));
            let r = (a * a + b * b + c * c).sqrt();
            if r >= NORMAL_FLOOR {
                out.set2(0, i, a / r);
                out.set2(1, i, b / r);
                out.set2(2, i, c / r);
            } else {
                out.set2(0, i, fv.get2(0, i));
                out.set2(1, i, fv.get2(1, i));
                out.set2(2, i, fv.get2(2, i));
            }
        }
        let needs = self.needs_of(&[x, fallback]);
        self.push(Node::Unit3Or { x, fallback }, out, needs)
    }

    /// Re-executes every recorded operation from its stored inputs and
    /// returns the worst absolute deviation from the stored values.
    pub fn replay_max_dev(&self) -> f64 {
        let mut worst = 0.0f64;
        for (i, node) in self.nodes.iter().enumerate() {
            let recomputed: Option<Tensor> = match node {
                Node::Leaf => None,
                Node::Add { a, b } => Some(tensor::add(self.value(*a), self.value(*b)).unwrap()),
                Node::AddRow { a, row } => {
                    Some(tensor::add_row(self.value(*a), self.value(*row)).unwrap())
                }
                Node::Sub { a, b } => Some(tensor::sub(self.value(*a), self.value(*b)).unwrap()),
                Node::Mul { a, b } => Some(tensor::mul(self.value(*a), self.value(*b)).unwrap()),
                Node::Scale { a, k } => Some(tensor::scale(self.value(*a), *k)),
                Node::Matmul { a, b } => {
                    Some(tensor::matmul(self.value(*a), self.value(*b)).unwrap())
                }
                Node::Ln { x } => {
                    let xv = self.value(*x);
                    Some(Tensor::from_fn(xv.shape(), |i| xv.data()[i].ln()))
                }
                Node::SoftmaxRows { x } => Some(tensor::softmax_rows(self.value(*x)).unwrap()),
                Node::LayerNorm { x, gain, bias } => Some(
                    tensor::layer_norm(self.value(*x), self.value(*gain), self.value(*bias))
                        .unwrap(),
                ),
                Node::Gelu { x } => Some(tensor::gelu(self.value(*x))),
                Node::Attention { q, k, v, spec, .. } => {
                    Some(attention_forward(self.value(*q), self.value(*k), self.value(*v), spec).0)
                }
                Node::PixelUnshuffle {
                    x,
                    grid_h,
                    grid_w,
                    cell,
                    channels,
                } => Some(unshuffle_forward(
                    self.value(*x),
                    *grid_h,
                    *grid_w,
                    *cell,
                    *channels,
                )),
                Node::Reshape { x } => {
                    Some(self.value(*x).reshaped(self.values[i].shape()).unwrap())
                }
                Node::SliceRows { x, start, len } => {
                    let xv = self.value(*x);
                    let n = xv.cols();
                    Some(
                        Tensor::new(&[*len, n], xv.data()[start * n..(start + len) * n].to_vec())
                            .unwrap(),
                    )
                }
                Node::SumAll { x } => Some(Tensor::scalar(tensor::sum_all(self.value(*x)))),
                Node::GradX { x } => {
                    let xv = self.value(*x);
                    let (h, w) = (xv.rows(), xv.cols());
                    Some(Tensor::from_fn(&[h, w - 1], |i| {
                        let (r, c) = (i / (w - 1), i % (w - 1));
                        xv.get2(r, c + 1) - xv.get2(r, c)
                    }))
                }
                Node::GradY { x } => {
                    let xv = self.value(*x);
                    let (h, w) = (xv.rows(), xv.cols());
                    Some(Tensor::from_fn(&[h - 1, w], |i| {
                        let (r, c) = (i / w, i % w);
                        xv.get2(r + 1, c) - xv.get2(r, c)
                    }))
                }
                Node::Unit3Or { x, fallback } => {
                    let xv = self.value(*x);
                    let fv = self.value(*fallback);
                    let n = xv.shape()[1];
                    let mut out = Tensor::zeros(xv.shape());
                    for c in 0..n {
                        let (a, b, z) = (xv.get2(0, c), xv.get2(1, c), xv.get2(2, c));
                        let r = (a * a + b * b + z * z).sqrt();
                        if r >= NORMAL_FLOOR {
                            out.set2(0, c, a / r);
                            out.set2(1, c, b / r);
                            out.set2(2, c, z / r);
                        } else {
                            out.set2(0, c, fv.get2(0, c));
                            out.set2(1, c, fv.get2(1, c));
                            out.set2(2, c, fv.get2(2, c));
                        }
                    }
                    Some(out)
                }
            };
            if let Some(t) = recomputed {
                for (a, b) in t.data().iter().zip(self.values[i].data()) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
        worst
    }

    /// Reverse pass from a scalar loss. Returns one gradient per registered
    /// parameter, in registration order; untouched parameters get zeros.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let lv = &self.values[loss.0];
        if !lv.is_scalar() {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut adjoint: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        adjoint[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = adjoint[idx].take() else { continue };
            if !self.needs[idx] {
                continue;
            }
            match &self.nodes[idx] {
                Node::Leaf => {
                    // gradients of leaves are collected below; restore
                    adjoint[idx] = Some(g);
                    continue;
                }
                Node::Add { a, b } => {
                    self.acc(&mut adjoint, *a, g.clone());
                    self.acc(&mut adjoint, *b, g);
                }
                Node::AddRow { a, row } => {
                    let (m, n) = (g.rows(), g.cols());
                    let mut dr = Tensor::zeros(&[n]);
                    for i in 0..m {
                        for j in 0..n {
                            dr.data_mut()[j] += g.get2(i, j);
                        }
                    }
                    self.acc(&mut adjoint, *a, g);
                    self.acc(&mut adjoint, *row, dr);
                }
                Node::Sub { a, b } => {
                    self.acc(&mut adjoint, *a, g.clone());
                    self.acc(&mut adjoint, *b, tensor::scale(&g, -1.0));
                }
                Node::Mul { a, b } => {
                    let da = tensor::mul(&g, self.value(*b)).unwrap();
                    let db = tensor::mul(&g, self.value(*a)).unwrap();
                    self.acc(&mut adjoint, *a, da);
                    self.acc(&mut adjoint, *b, db);
                }
                Node::Scale { a, k } => {
                    self.acc(&mut adjoint, *a, tensor::scale(&g, *k));
                }
                Node::Matmul { a, b } => {
                    let da = tensor::matmul_nt(&g, self.value(*b)).unwrap();
                    let db = tensor::matmul_tn(self.value(*a), &g).unwrap();
                    self.acc(&mut adjoint, *a, da);
                    self.acc(&mut adjoint, *b, db);
                }
                Node::Ln { x } => {
                    let xv = self.value(*x);
                    let dx = Tensor::from_fn(xv.shape(), |i| g.data()[i] / xv.data()[i]);
                    self.acc(&mut adjoint, *x, dx);
                }
                Node::SoftmaxRows { x } => {
                    let s = &self.values[idx];
                    let (m, n) = (s.rows(), s.cols());
                    let mut dx = Tensor::zeros(&[m, n]);
                    for i in 0..m {
                        let mut dot = 0.0;
                        for j in 0..n {
                            dot += g.get2(i, j) * s.get2(i, j);
                        }
                        for j in 0..n {
                            dx.set2(i, j, s.get2(i, j) * (g.get2(i, j) - dot));
                        }
                    }
                    self.acc(&mut adjoint, *x, dx);
                }
                Node::LayerNorm { x, gain, bias } => {
                    let xv = self.value(*x);
                    let gv = self.value(*gain);
                    let (m, n) = (xv.rows(), xv.cols());
                    let mut dx = Tensor::zeros(&[m, n]);
                    let mut dg = Tensor::zeros(&[n]);
                    let mut db = Tensor::zeros(&[n]);
                    for i in 0..m {
                        let row: Vec<f64> = (0..n).map(|j| xv.get2(i, j)).collect();
                        let mean = row.iter().sum::<f64>() / n as f64;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                        let inv = 1.0 / (var + tensor::LAYER_NORM_EPS).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                        let h: Vec<f64> =
                            (0..n).map(|j| g.get2(i, j) * gv.data()[j]).collect();
                        let mean_h = h.iter().sum::<f64>() / n as f64;
                        let mean_hx = h
                            .iter()
                            .zip(&xhat)
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / n as f64;
                        for j in 0..n {
                            dx.set2(i, j, (h[j] - mean_h - xhat[j] * mean_hx) * inv);
                            dg.data_mut()[j] += g.get2(i, j) * xhat[j];
                            db.data_mut()[j] += g.get2(i, j);
                        }
                    }
                    self.acc(&mut adjoint, *x, dx);
                    self.acc(&mut adjoint, *gain, dg);
                    self.acc(&mut adjoint, *bias, db);
                }
                Node::Gelu { x } => {
                    let xv = self.value(*x);
                    let dx = Tensor::from_fn(xv.shape(), |i| {
                        g.data()[i] * tensor::gelu_scalar_grad(xv.data()[i])
                    });
                    self.acc(&mut adjoint, *x, dx);
                }
                Node::Attention {
                    q,
                    k,
                    v,
                    spec,
                    qr,
                    kr,
                    probs,
                } => {
                    let (dq, dk, dv) =
                        attention_backward(&g, self.value(*v), spec, qr, kr, probs);
                    self.acc(&mut adjoint, *q, dq);
                    self.acc(&mut adjoint, *k, dk);
                    self.acc(&mut adjoint, *v, dv);
                }
                Node::PixelUnshuffle {
                    x,
                    grid_h,
                    grid_w,
                    cell,
                    channels,
                } => {
                    let (gh, gw, c, ch) = (*grid_h, *grid_w, *cell, *channels);
                    let mut dx = Tensor::zeros(&[gh * gw, ch * c * c]);
                    for t in 0..gh * gw {
                        let (cv, cu) = (t / gw, t % gw);
                        for chan in 0..ch {
                            for dy in 0..c {
                                for dxp in 0..c {
                                    let val = g.get3(chan, cv * c + dy, cu * c + dxp);
                                    dx.set2(t, chan * c * c + dy * c + dxp, val);
                                }
                            }
                        }
                    }
                    self.acc(&mut adjoint, *x, dx);
                }
                Node::Reshape { x } => {
                    let back = g.reshaped(self.value(*x).shape()).unwrap();
                    self.acc(&mut adjoint, *x, back);
                }
                Node::SliceRows { x, start, len } => {
                    let xv = self.value(*x);
                    let (m, n) = (xv.rows(), xv.cols());
                    let mut dx = Tensor::zeros(&[m, n]);
                    for i in 0..*len {
                        for j in 0..n {
                            dx.set2(start + i, j, g.get2(i, j));
                        }
                    }
                    self.acc(&mut adjoint, *x, dx);
                }
                Node::SumAll { x } => {
                    let dx = Tensor::full(self.value(*x).shape(), g.data()[0]);
                    self.acc(&mut adjoint, *x, dx);
                }
                Node::GradX { x } => {
                    let xv = self.value(*x);
                    let (h, w) = (xv.rows(), xv.cols());
                    let mut dx = Tensor::zeros(&[h, w]);
                    for i in 0..h {
                        for j in 0..w - 1 {
                            let gv = g.get2(i, j);
                            dx.set2(i, j + 1, dx.get2(i, j + 1) + gv);
                            dx.set2(i, j, dx.get2(i, j) - gv);
                        }
                    }
                    self.acc(&mut adjoint, *x, dx);
                }
                Node::GradY { x } => {
                    let xv = self.value(*x);
                    let (h, w) = (xv.rows(), xv.cols());
                    let mut dx = Tensor::zeros(&[h, w]);
                    for i in 0..h - 1 {
                        for j in 0..w {
                            let gv = g.get2(i, j);
                            dx.set2(i + 1, j, dx.get2(i + 1, j) + gv);
                            dx.set2(i, j, dx.get2(i, j) - gv);
                        }
                    }
                    self.acc(&mut adjoint, *x, dx);
                }
                Node::Unit3Or { x, fallback } => {
                    let xv = self.value(*x);
                    let y = &self.values[idx];
                    let n = xv.shape()[1];
                    let mut dx = Tensor::zeros(xv.shape());
                    let mut dfb = Tensor::zeros(xv.shape());
                    for i in 0..n {
                        let (a, b, c) = (xv.get2(0, i), xv.get2(1, i), xv.get2(2, i));
                        let r = (a * a + b * b + c * c).sqrt();
                        if r >= NORMAL_FLOOR {
                            let yv = [y.get2(0, i), y.get2(1, i), y.get2(2, i)];
                            let gv = [g.get2(0, i), g.get2(1, i), g.get2(2, i)];
                            let dot = yv[0] * gv[0] + yv[1] * gv[1] + yv[2] * gv[2];
                            for ch in 0..3 {
                                dx.set2(ch, i, (gv[ch] - yv[ch] * dot) / r);
                            }
                        } else {
                            for ch in 0..3 {
                                dfb.set2(ch, i, g.get2(ch, i));
                            }
                        }
                    }
                    self.acc(&mut adjoint, *x, dx);
                    self.acc(&mut adjoint, *fallback, dfb);
                }
            }
        }

        let grads = self
            .params
            .iter()
            .map(|p| {
                if p.0 <= loss.0 {
                    adjoint[p.0]
                        .take()
                        .unwrap_or_else(|| Tensor::zeros(self.value(*p).shape()))
                } else {
                    Tensor::zeros(self.value(*p).shape())
                }
            })
            .collect();
        Ok(Grads {
            params: self.params.clone(),
            grads,
        })
    }

    fn acc(&self, adjoint: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.needs[v.0] {
            return;
        }
        match &mut adjoint[v.0] {
            Some(t) => {
                let sum = tensor::add(t, &delta).expect("adjoint accumulate");
                *t = sum;
            }
            slot @ None => *slot = Some(delta),
        }
    }
}

/// Rotates the d_h columns starting at `col0` of every row. The first half of
/// the head rotates channel pairs by theta_j * u, the second half by
/// theta_j * v, theta_j = base^(-2j / (d_h/2)). `sign` -1 inverts.
fn rope_block(
    data: &mut [f64],
    rows: usize,
    stride: usize,
    col0: usize,
    d_h: usize,
    coords: &[(f64, f64)],
    base: f64,
    sign: f64,
) {
    assert_eq!(d_h % 4, 0, "axial rope needs head width divisible by 4");
    let half = d_h / 2;
    let pairs = d_h / 4;
    for j in 0..pairs {
        let theta = base.powf(-2.0 * j as f64 / half as f64);
        for i in 0..rows {
            let (u, v) = coords[i];
            for (off, pos) in [(2 * j, u), (half + 2 * j, v)] {
                let ang = sign * theta * pos;
                let (s, c) = ang.sin_cos();
                let ia = i * stride + col0 + off;
                let ib = ia + 1;
                let (x, y) = (data[ia], data[ib]);
                data[ia] = x * c - y * s;
                data[ib] = x * s + y * c;
            }
        }
    }
}

/// Axial rotary encoding of a single-head [n, d_h] matrix; public so the
/// encoding can be tested in isolation against its shift-invariance law.
pub fn rope_apply(x: &Tensor, coords: &[(f64, f64)], base: f64) -> Result<Tensor> {
    if x.shape().len() != 2 {
        return Err(Error::Shape {
            op: "rope_apply",
            lhs: x.shape().to_vec(),
            rhs: vec![],
        });
    }
    let (n, d_h) = (x.rows(), x.cols());
    if d_h % 4 != 0 {
        return Err(Error::Config(format!(
            "rope_apply: head width {d_h} not divisible by 4 (axial pairs)"
        )));
    }
    if coords.len() != n {
        return Err(Error::Shape {
            op: "rope_apply",
            lhs: vec![n],
            rhs: vec![coords.len()],
        });
    }
    let mut out = x.clone();
    rope_block(out.data_mut(), n, d_h, 0, d_h, coords, base, 1.0);
    Ok(out)
}

fn attention_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    spec: &AttnSpec,
) -> (Tensor, Tensor, Tensor, Vec<Tensor>) {
    let (n, d) = (q.rows(), q.cols());
    assert_eq!(k.shape(), q.shape(), "attention k shape");
    assert_eq!(v.shape(), q.shape(), "attention v shape");
    assert_eq!(spec.coords.len(), n, "attention coords length");
    assert_eq!(d % spec.n_heads, 0, "width not divisible by heads");
    let d_h = d / spec.n_heads;
    let scale = 1.0 / (d_h as f64).sqrt();

    let mut qr = q.clone();
    let mut kr = k.clone();
    for h in 0..spec.n_heads {
        rope_block(qr.data_mut(), n, d, h * d_h, d_h, &spec.coords, spec.rope_base, 1.0);
        rope_block(kr.data_mut(), n, d, h * d_h, d_h, &spec.coords, spec.rope_base, 1.0);
    }

    let mut out = Tensor::zeros(&[n, d]);
    let mut probs = Vec::with_capacity(spec.groups.len() * spec.n_heads);
    for &(start, len) in &spec.groups {
        for h in 0..spec.n_heads {
            let c0 = h * d_h;
            let mut logits = Tensor::zeros(&[len, len]);
            for t1 in 0..len {
                for t2 in 0..len {
                    let mut acc = 0.0;
                    for c in 0..d_h {
                        acc += qr.get2(start + t1, c0 + c) * kr.get2(start + t2, c0 + c);
                    }
                    logits.set2(t1, t2, acc * scale);
                }
            }
            let p = tensor::softmax_rows(&logits).expect("attention softmax");
            for t1 in 0..len {
                for t2 in 0..len {
                    let w = p.get2(t1, t2);
                    for c in 0..d_h {
                        let cur = out.get2(start + t1, c0 + c);
                        out.set2(start + t1, c0 + c, cur + w * v.get2(start + t2, c0 + c));
                    }
                }
            }
            probs.push(p);
        }
    }
    (out, qr, kr, probs)
}

fn attention_backward(
    grad_out: &Tensor,
    v: &Tensor,
    spec: &AttnSpec,
    qr: &Tensor,
    kr: &Tensor,
    probs: &[Tensor],
) -> (Tensor, Tensor, Tensor) {
    let (n, d) = (v.rows(), v.cols());
    let d_h = d / spec.n_heads;
    let scale = 1.0 / (d_h as f64).sqrt();
    let mut dqr = Tensor::zeros(&[n, d]);
    let mut dkr = Tensor::zeros(&[n, d]);
    let mut dv = Tensor::zeros(&[n, d]);

    let mut pi = 0;
    for &(start, len) in &spec.groups {
        for h in 0..spec.n_heads {
            let c0 = h * d_h;
            let p = &probs[pi];
            pi += 1;

            // dv and dp from out = p * v_block
            let mut dp = Tensor::zeros(&[len, len]);
            for t1 in 0..len {
                for t2 in 0..len {
                    let mut acc = 0.0;
                    for c in 0..d_h {
                        acc += grad_out.get2(start + t1, c0 + c) * v.get2(start + t2, c0 + c);
                    }
                    dp.set2(t1, t2, acc);
                    let w = p.get2(t1, t2);
                    for c in 0..d_h {
                        let cur = dv.get2(start + t2, c0 + c);
                        dv.set2(
                            start + t2,
                            c0 + c,
                            cur + w * grad_out.get2(start + t1, c0 + c),
                        );
                    }
                }
            }

            // softmax backward, then through the scaled logits
            for t1 in 0..len {
                let mut dot = 0.0;
                for t2 in 0..len {
                    dot += dp.get2(t1, t2) * p.get2(t1, t2);
                }
                for t2 in 0..len {
                    let dl = p.get2(t1, t2) * (dp.get2(t1, t2) - dot) * scale;
                    for c in 0..d_h {
                        let cur_q = dqr.get2(start + t1, c0 + c);
                        dqr.set2(
                            start + t1,
                            c0 + c,
                            cur_q + dl * kr.get2(start + t2, c0 + c),
                        );
                        let cur_k = dkr.get2(start + t2, c0 + c);
                        dkr.set2(
                            start + t2,
                            c0 + c,
                            cur_k + dl * qr.get2(start + t1, c0 + c),
                        );
                    }
                }
            }
        }
    }

    // undo the rotation: the adjoint of a rotation is the inverse rotation
    for h in 0..spec.n_heads {
        rope_block(dqr.data_mut(), n, d, h * d_h, d_h, &spec.coords, spec.rope_base, -1.0);
        rope_block(dkr.data_mut(), n, d, h * d_h, d_h, &spec.coords, spec.rope_base, -1.0);
    }
    (dqr, dkr, dv)
}

fn unshuffle_forward(
    x: &Tensor,
    grid_h: usize,
    grid_w: usize,
    cell: usize,
    channels: usize,
) -> Tensor {
    let (h, w) = (grid_h * cell, grid_w * cell);
    let mut out = Tensor::zeros(&[channels, h, w]);
    for t in 0..grid_h * grid_w {
        let (cv, cu) = (t / grid_w, t % grid_w);
        for ch in 0..channels {
            for dy in 0..cell {
                for dx in 0..cell {
                    let val = x.get2(t, ch * cell * cell + dy * cell + dx);
                    out.set3(ch, cv * cell + dy, cu * cell + dx, val);
                }
            }
        }
    }
    out
}

/// Worst relative disagreement between `backward` and central finite
/// differences (step 1e-5) over every element of every parameter, with
/// denominator max(|analytic|, |numeric|, 1e-8). `build` must be a pure
/// function of the parameter values.
pub fn finite_difference_check<F>(params: &[Tensor], build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = build(&mut tape, &vars);
    let lv = tape.value(loss);
    if !lv.is_scalar() {
        return Err(Error::NotScalar(lv.shape().to_vec()));
    }
    let grads = tape.backward(loss)?.into_vec();

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = ps.iter().map(|p| t.param(p.clone())).collect();
        let l = build(&mut t, &vs);
        let v = t.value(l);
        if !v.is_scalar() {
            return Err(Error::NotScalar(v.shape().to_vec()));
        }
        Ok(v.data()[0])
    };

    let floor = FD_DENOM_FLOOR * lv.data()[0].abs().max(1.0);
    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst = 0.0f64;
    for pi in 0..params.len() {
        for e in 0..params[pi].len() {
            let orig = params[pi].data()[e];
            work[pi].data_mut()[e] = orig + FD_STEP;
            let lp = eval(&work)?;
            work[pi].data_mut()[e] = orig - FD_STEP;
            let lm = eval(&work)?;
            work[pi].data_mut()[e] = orig;
            let fd = (lp - lm) / (2.0 * FD_STEP);
            let ad = grads[pi].data()[e];
            let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(floor);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::new(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
        let loss = tape.sum_all(p);
        let grads = tape.backward(loss).unwrap().into_vec();
        assert_eq!(grads[0].data(), &[1.0; 6]);
    }

    #[test]
    fn quadratic_gradient_is_2p() {
        let t = Tensor::new(&[4], vec![1.0, -2.0, 0.25, 3.0]).unwrap();
        let mut tape = Tape::new();
        let p = tape.param(t.clone());
        let sq = tape.mul(p, p);
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss).unwrap().into_vec();
        for (g, x) in grads[0].data().iter().zip(t.data()) {
            assert_eq!(*g, 2.0 * x);
        }
    }

    #[test]
    fn untouched_param_gets_exact_zero() {
        let mut tape = Tape::new();
        let used = tape.param(Tensor::scalar(2.0));
        let unused = tape.param(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let loss = tape.mul(used, used);
        let grads = tape.backward(loss).unwrap().into_vec();
        assert_eq!(grads[0].data(), &[4.0]);
        assert_eq!(grads[1].data(), &[0.0, 0.0, 0.0]);
        let _ = unused;
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::zeros(&[2, 2]));
        let y = tape.scale(p, 2.0);
        assert!(matches!(tape.backward(y), Err(Error::NotScalar(_))));
    }

    #[test]
    fn linear_function_fd_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = randn(&mut rng, &[3, 4]);
        let w = randn(&mut rng, &[3, 4]);
        let err = finite_difference_check(&[p], |t, vars| {
            let c = t.constant(w.clone());
            let prod = t.mul(vars[0], c);
            t.sum_all(prod)
        })
        .unwrap();
        assert!(err < 1e-7, "fd err {err}");
    }

    #[test]
    fn softmax_cross_entropy_fd_below_1e4() {
        for seed in 0..5 {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let x = randn(&mut r, &[3, 7]);
            let target = {
                let mut t = Tensor::zeros(&[3, 7]);
                for i in 0..3 {
                    let j = r.random_range(0..7);
                    t.set2(i, j, 1.0);
                }
                t
            };
            let err = finite_difference_check(&[x.clone()], |t, vars| {
                let s = t.softmax_rows(vars[0]);
                let logs = t.ln(s);
                let tt = t.constant(target.clone());
                let picked = t.mul(logs, tt);
                let total = t.sum_all(picked);
                t.scale(total, -1.0 / 3.0)
            })
            .unwrap();
            assert!(err < 1e-4, "fd err {err}");
        }
    }

    #[test]
    fn replay_reproduces_forward_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = randn(&mut rng, &[4, 8]);
        let w = randn(&mut rng, &[8, 8]);
        let gain = randn(&mut rng, &[8]);
        let bias = randn(&mut rng, &[8]);
        let mut tape = Tape::new();
        let va = tape.param(a);
        let vw = tape.param(w);
        let vg = tape.param(gain);
        let vb = tape.param(bias);
        let mm = tape.matmul(va, vw);
        let ln = tape.layer_norm(mm, vg, vb);
        let ge = tape.gelu(ln);
        let sm = tape.softmax_rows(ge);
        let _loss = tape.sum_all(sm);
        assert_eq!(tape.replay_max_dev(), 0.0);
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        // Each loss touches each parameter through a single product path, so
        // gradient accumulation is a single two-term addition and equality
        // is exact at 64-bit.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = randn(&mut rng, &[5]);
        let a = randn(&mut rng, &[5]);
        let b = randn(&mut rng, &[5]);

        let run = |which: u8| -> Vec<f64> {
            let mut tape = Tape::new();
            let vp = tape.param(p.clone());
            let ca = tape.constant(a.clone());
            let cb = tape.constant(b.clone());
            let la = tape.mul(vp, ca);
            let la = tape.sum_all(la);
            let lb = tape.mul(vp, cb);
            let lb = tape.sum_all(lb);
            let loss = match which {
                0 => la,
                1 => lb,
                _ => tape.add(la, lb),
            };
            tape.backward(loss).unwrap().into_vec()[0].data().to_vec()
        };

        let ga = run(0);
        let gb = run(1);
        let gsum = run(2);
        for i in 0..5 {
            assert_eq!(gsum[i], ga[i] + gb[i]);
        }
    }

    #[test]
    fn rope_zero_coords_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn(&mut rng, &[6, 8]);
        let coords = vec![(0.0, 0.0); 6];
        let y = rope_apply(&x, &coords, ROPE_BASE).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn rope_rejects_head_width_not_divisible_by_4() {
        let x = Tensor::zeros(&[2, 6]);
        assert!(matches!(
            rope_apply(&x, &[(0.0, 0.0), (1.0, 2.0)], ROPE_BASE),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn attention_single_token_is_value_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = randn(&mut rng, &[1, 8]);
        let k = randn(&mut rng, &[1, 8]);
        let v = randn(&mut rng, &[1, 8]);
        let mut tape = Tape::new();
        let (vq, vk, vv) = (tape.param(q), tape.param(k), tape.param(v.clone()));
        let out = tape.attention(
            vq,
            vk,
            vv,
            AttnSpec {
                n_heads: 2,
                groups: vec![(0, 1)],
                coords: vec![(3.0, 4.0)],
                rope_base: ROPE_BASE,
            },
        );
        for (a, b) in tape.value(out).data().iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_identical_tokens_give_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let row: Vec<f64> = (0..8).map(|_| rng.random::<f64>()).collect();
        let stack =
            Tensor::new(&[4, 8], row.iter().cloned().cycle().take(32).collect()).unwrap();
        let vdiff = randn(&mut rng, &[4, 8]);
        let mut tape = Tape::new();
        let (vq, vk, vv) = (
            tape.param(stack.clone()),
            tape.param(stack),
            tape.param(vdiff.clone()),
        );
        // identical coords so rotated keys stay identical across tokens
        let out = tape.attention(
            vq,
            vk,
            vv,
            AttnSpec {
                n_heads: 2,
                groups: vec![(0, 4)],
                coords: vec![(5.0, 9.0); 4],
                rope_base: ROPE_BASE,
            },
        );
        let mean: Vec<f64> = (0..8)
            .map(|c| (0..4).map(|r| vdiff.get2(r, c)).sum::<f64>() / 4.0)
            .collect();
        for r in 0..4 {
            for c in 0..8 {
                assert!((tape.value(out).get2(r, c) - mean[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_fd_check() {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let q = randn(&mut rng, &[6, 8]);
            let k = randn(&mut rng, &[6, 8]);
            let v = randn(&mut rng, &[6, 8]);
            let coords: Vec<(f64, f64)> = (0..6)
                .map(|_| {
                    (
                        rng.random_range(0..64) as f64,
                        rng.random_range(0..64) as f64,
                    )
                })
                .collect();
            let weight = randn(&mut rng, &[6, 8]);
            let spec = AttnSpec {
                n_heads: 2,
                groups: vec![(0, 3), (3, 3)],
                coords,
                rope_base: ROPE_BASE,
            };
            let err = finite_difference_check(&[q, k, v], |t, vars| {
                let out = t.attention(vars[0], vars[1], vars[2], spec.clone());
                let c = t.constant(weight.clone());
                let prod = t.mul(out, c);
                t.sum_all(prod)
            })
            .unwrap();
            assert!(err < 1e-4, "fd err {err}");
        }
    }

    #[test]
    fn unit3_or_fd_and_fallback() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = randn(&mut rng, &[3, 5]);
        let fb = randn(&mut rng, &[3, 5]);
        let w = randn(&mut rng, &[3, 5]);
        let err = finite_difference_check(&[x], |t, vars| {
            let f = t.constant(fb.clone());
            let y = t.unit3_or(vars[0], f);
            let c = t.constant(w.clone());
            let prod = t.mul(y, c);
            t.sum_all(prod)
        })
        .unwrap();
        assert!(err < 1e-4, "fd err {err}");

        // a zero column takes the fallback value verbatim
        let mut tape = Tape::new();
        let zero = tape.param(Tensor::zeros(&[3, 2]));
        let f = tape.constant(Tensor::new(&[3, 2], vec![1.0, 0.5, 0.0, -0.5, 0.0, 1.0]).unwrap());
        let y = tape.unit3_or(zero, f);
        assert_eq!(tape.value(y).data(), &[1.0, 0.5, 0.0, -0.5, 0.0, 1.0]);
    }

    #[test]
    fn pixel_unshuffle_roundtrip_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = randn(&mut rng, &[4, 8]); // 2x2 grid of 2x2 cells, 2 channels
        let w = randn(&mut rng, &[2, 4, 4]);
        let err = finite_difference_check(&[x], |t, vars| {
            let y = t.pixel_unshuffle(vars[0], 2, 2, 2, 2);
            let c = t.constant(w.clone());
            let prod = t.mul(y, c);
            t.sum_all(prod)
        })
        .unwrap();
        assert!(err < 1e-7, "permutation is linear, fd err {err}");
    }

    #[test]
    fn grad_ops_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = randn(&mut rng, &[5, 6]);
        let wx = randn(&mut rng, &[5, 5]);
        let wy = randn(&mut rng, &[4, 6]);
        let err = finite_difference_check(&[x], |t, vars| {
            let gx = t.grad_x(vars[0]);
            let gy = t.grad_y(vars[0]);
            let cx = t.constant(wx.clone());
            let cy = t.constant(wy.clone());
            let px = t.mul(gx, cx);
            let py = t.mul(gy, cy);
            let sx = t.sum_all(px);
            let sy = t.sum_all(py);
            t.add(sx, sy)
        })
        .unwrap();
        assert!(err < 1e-7, "fd err {err}");
    }
}
