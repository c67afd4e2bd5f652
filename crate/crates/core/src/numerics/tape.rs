//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! Nodes are appended in evaluation order, so the tape itself is a
//! topological order and the backward pass is a single reverse sweep.
//! Only the operators needed by the training graph are provided.

use std::rc::Rc;

use super::kernel::{gemm, gemm_grouped, View};
use super::ops::{gelu_grad_scalar, gelu_scalar, softmax_in_place, LOG_EPS, MIN_ROW_NORM};
use super::{Matrix, NumericsError, Scalar};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Flat element map for [`Tape::gather`]: output element `i` copies flat
/// element `map[i]` of the concatenated sources.
#[derive(Clone, Debug)]
pub struct GatherMap {
    pub rows: usize,
    pub cols: usize,
    pub map: Vec<u32>,
}

impl GatherMap {
    pub fn new(rows: usize, cols: usize, map: Vec<u32>) -> Self {
        assert_eq!(map.len(), rows * cols, "gather map size");
        Self { rows, cols, map }
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
        groups: usize,
    },
    Add {
        a: Var,
        b: Var,
        broadcast: bool,
    },
    Mul {
        a: Var,
        b: Var,
        broadcast: bool,
    },
    Scale {
        a: Var,
        factor: T,
    },
    NormalizeRows {
        a: Var,
        norms: Vec<T>,
    },
    Softmax {
        a: Var,
        tau: T,
    },
    Log {
        a: Var,
    },
    LayerNorm {
        a: Var,
        inv_std: Vec<T>,
    },
    Gelu {
        a: Var,
    },
    Gather {
        sources: Vec<Var>,
        offsets: Vec<usize>,
        map: Rc<GatherMap>,
    },
    WeightedSum {
        a: Var,
        weights: Rc<Matrix<T>>,
    },
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
    visited: usize,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to the leaf `v`, or `None` when `v`
    /// does not influence it through differentiable nodes.
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Number of nodes whose backward rule ran.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

/// Recording of a differentiable computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> T {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.data()[0]
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable input.
    pub fn param(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies the current value of `v` into a fresh constant, cutting the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.matmul_ex(a, b, false, false, 1)
    }

    /// `A Bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.matmul_ex(a, b, false, true, 1)
    }

    /// Block-diagonal batched product: both operands are split into
    /// `groups` equal row blocks and block `g` of the output is
    /// `op(A_g) op(B_g)`.
    pub fn matmul_ex(
        &mut self,
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
        groups: usize,
    ) -> Result<Var, NumericsError> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if groups == 0 || ar % groups != 0 || br % groups != 0 {
            return Err(NumericsError::ShapeMismatch {
                expected: (groups, groups),
                found: (ar, br),
            });
        }
        let (ga_r, gb_r) = (ar / groups, br / groups);
        let (m, k) = if trans_a { (ac, ga_r) } else { (ga_r, ac) };
        let (kb, n) = if trans_b { (bc, gb_r) } else { (gb_r, bc) };
        if k != kb {
            return Err(NumericsError::ShapeMismatch {
                expected: (k, n),
                found: (kb, n),
            });
        }
        let mut out = Matrix::zeros(m * groups, n);
        gemm_grouped(
            groups,
            T::one(),
            View::new(self.value(a).data(), ar, ac, trans_a),
            View::new(self.value(b).data(), br, bc, trans_b),
            T::zero(),
            out.data_mut(),
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            out,
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
                groups,
            },
            rg,
        ))
    }

    fn check_broadcast(&self, a: Var, b: Var) -> Result<bool, NumericsError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            Ok(false)
        } else if sb.0 == 1 && sb.1 == sa.1 {
            Ok(true)
        } else {
            Err(NumericsError::ShapeMismatch {
                expected: sa,
                found: sb,
            })
        }
    }

    /// `a + b`; `b` may be a `1×cols` row broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let broadcast = self.check_broadcast(a, b)?;
        let mut out = self.value(a).clone();
        let cols = out.cols();
        let bd = self.value(b).data();
        if broadcast {
            for row in out.data_mut().chunks_exact_mut(cols.max(1)) {
                for (x, &y) in row.iter_mut().zip(bd) {
                    *x += y;
                }
            }
        } else {
            for (x, &y) in out.data_mut().iter_mut().zip(bd) {
                *x += y;
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add { a, b, broadcast }, rg))
    }

    /// Elementwise `a ⊙ b`; `b` may be a broadcast row.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let broadcast = self.check_broadcast(a, b)?;
        let mut out = self.value(a).clone();
        let cols = out.cols();
        let bd = self.value(b).data();
        if broadcast {
            for row in out.data_mut().chunks_exact_mut(cols.max(1)) {
                for (x, &y) in row.iter_mut().zip(bd) {
                    *x *= y;
                }
            }
        } else {
            for (x, &y) in out.data_mut().iter_mut().zip(bd) {
                *x *= y;
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul { a, b, broadcast }, rg))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let out = self.value(a).map(|v| v * factor);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale { a, factor }, rg)
    }

    /// Row-wise L2 normalization.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var, NumericsError> {
        let mut out = self.value(a).clone();
        let floor = T::lit(MIN_ROW_NORM);
        let mut norms = Vec::with_capacity(out.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if !(norm >= floor) {
                return Err(NumericsError::ZeroRow { row: r });
            }
            for v in row.iter_mut() {
                *v /= norm;
            }
            norms.push(norm);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::NormalizeRows { a, norms }, rg))
    }

    /// Row-wise softmax of `a / tau`.
    pub fn softmax(&mut self, a: Var, tau: T) -> Result<Var, NumericsError> {
        if !(tau > T::zero()) {
            return Err(NumericsError::NonPositiveTemperature(tau.as_f64()));
        }
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r), tau);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Softmax { a, tau }, rg))
    }

    /// Natural log with inputs clamped below at `1e-12`.
    pub fn log(&mut self, a: Var) -> Var {
        let eps = T::lit(LOG_EPS);
        let out = self.value(a).map(|v| v.max(eps).ln());
        let rg = self.rg(&[a]);
        self.push(out, Op::Log { a }, rg)
    }

    /// Row-wise standardization `(x - mean) / sqrt(var + eps)` without affine.
    pub fn layer_norm(&mut self, a: Var, eps: T) -> Var {
        let mut out = self.value(a).clone();
        let n = T::from_usize(out.cols()).unwrap();
        let mut inv_std = Vec::with_capacity(out.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::LayerNorm { a, inv_std }, rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu_scalar);
        let rg = self.rg(&[a]);
        self.push(out, Op::Gelu { a }, rg)
    }

    /// Builds a new matrix by copying elements of one or more sources.
    ///
    /// Covers row selection, concatenation, broadcasting and reshuffles such
    /// as splitting attention heads.
    pub fn gather(&mut self, sources: &[Var], map: Rc<GatherMap>) -> Result<Var, NumericsError> {
        let mut offsets = Vec::with_capacity(sources.len() + 1);
        let mut total = 0usize;
        for &s in sources {
            offsets.push(total);
            total += self.value(s).len();
        }
        offsets.push(total);
        let mut data = Vec::with_capacity(map.map.len());
        if sources.len() == 1 {
            let src = self.value(sources[0]).data();
            for &i in &map.map {
                let i = i as usize;
                if i >= total {
                    return Err(NumericsError::IndexOutOfRange {
                        index: i,
                        len: total,
                    });
                }
                data.push(src[i]);
            }
        } else {
            for &i in &map.map {
                let i = i as usize;
                if i >= total {
                    return Err(NumericsError::IndexOutOfRange {
                        index: i,
                        len: total,
                    });
                }
                let s = offsets.partition_point(|&o| o <= i) - 1;
                data.push(self.value(sources[s]).data()[i - offsets[s]]);
            }
        }
        let out = Matrix::new(map.rows, map.cols, data)?;
        let rg = self.rg(sources);
        Ok(self.push(
            out,
            Op::Gather {
                sources: sources.to_vec(),
                offsets,
                map,
            },
            rg,
        ))
    }

    /// Convenience row selection built on [`Tape::gather`].
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var, NumericsError> {
        let cols = self.shape(a).1;
        let mut map = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            map.extend((r * cols..(r + 1) * cols).map(|i| i as u32));
        }
        self.gather(&[a], Rc::new(GatherMap::new(rows.len(), cols, map)))
    }

    /// Stacks sources with equal column counts.
    pub fn vstack(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let cols = self.shape(parts[0]).1;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if c != cols {
                return Err(NumericsError::ShapeMismatch {
                    expected: (r, cols),
                    found: (r, c),
                });
            }
            rows += r;
        }
        let map = (0..(rows * cols) as u32).collect();
        self.gather(parts, Rc::new(GatherMap::new(rows, cols, map)))
    }

    /// `Σ w ⊙ a` as a `1×1` node; `weights` are constants.
    pub fn weighted_sum(&mut self, a: Var, weights: Rc<Matrix<T>>) -> Result<Var, NumericsError> {
        if weights.shape() != self.shape(a) {
            return Err(NumericsError::ShapeMismatch {
                expected: self.shape(a),
                found: weights.shape(),
            });
        }
        let total: T = self
            .value(a)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&x, &w)| x * w)
            .sum();
        let rg = self.rg(&[a]);
        Ok(self.push(
            Matrix::filled(1, 1, total),
            Op::WeightedSum { a, weights },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        self.weighted_sum(a, Rc::new(Matrix::filled(r, c, T::one())))
            .expect("shape matches by construction")
    }

    /// Reverse sweep from a `1×1` output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>, NumericsError> {
        if self.shape(output) != (1, 1) {
            return Err(NumericsError::ShapeMismatch {
                expected: (1, 1),
                found: self.shape(output),
            });
        }
        let mut grads: Vec<Option<Matrix<T>>> = Vec::with_capacity(output.0 + 1);
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(Matrix::filled(1, 1, T::one()));
        let mut visited = 0;
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            visited += 1;
            if !g.is_finite() {
                return Err(NumericsError::NonFiniteGradient);
            }
            self.backprop_node(node, &g, &mut grads);
            // only leaves keep their gradient; intermediates are freed as the sweep passes them
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads, visited })
    }

    fn grad_slot<'g>(
        &self,
        grads: &'g mut [Option<Matrix<T>>],
        v: Var,
    ) -> Option<&'g mut Matrix<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let (r, c) = self.shape(v);
        Some(grads[v.0].get_or_insert_with(|| Matrix::zeros(r, c)))
    }

    fn backprop_node(&self, node: &Node<T>, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
                groups,
            } => {
                let (a, b, groups) = (*a, *b, *groups);
                let (ar, ac) = self.shape(a);
                let (br, bc) = self.shape(b);
                let av = View::new(self.value(a).data(), ar, ac, *trans_a);
                let bv = View::new(self.value(b).data(), br, bc, *trans_b);
                let gv = View::new(g.data(), g.rows(), g.cols(), false);
                if let Some(ga) = self.grad_slot(grads, a) {
                    // d op(A) = G op(B)ᵀ, stored transposed when trans_a
                    if *trans_a {
                        grouped_into(groups, bv, gv.t(), ga.data_mut());
                    } else {
                        grouped_into(groups, gv, bv.t(), ga.data_mut());
                    }
                }
                if let Some(gb) = self.grad_slot(grads, b) {
                    // d op(B) = op(A)ᵀ G
                    if *trans_b {
                        grouped_into(groups, gv.t(), av, gb.data_mut());
                    } else {
                        grouped_into(groups, av.t(), gv, gb.data_mut());
                    }
                }
            }
            Op::Add { a, b, broadcast } => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    ga.add_assign(g);
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    if *broadcast {
                        let gbd = gb.data_mut();
                        for row in g.row_iter() {
                            for (acc, &v) in gbd.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                    } else {
                        gb.add_assign(g);
                    }
                }
            }
            Op::Mul { a, b, broadcast } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let cols = g.cols().max(1);
                if let Some(ga) = self.grad_slot(grads, *a) {
                    let gad = ga.data_mut();
                    if *broadcast {
                        for (i, (acc, &gi)) in gad.iter_mut().zip(g.data()).enumerate() {
                            *acc += gi * bv.data()[i % cols];
                        }
                    } else {
                        for ((acc, &gi), &bi) in gad.iter_mut().zip(g.data()).zip(bv.data()) {
                            *acc += gi * bi;
                        }
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    let gbd = gb.data_mut();
                    if *broadcast {
                        for (i, (&gi, &ai)) in g.data().iter().zip(av.data()).enumerate() {
                            gbd[i % cols] += gi * ai;
                        }
                    } else {
                        for ((acc, &gi), &ai) in gbd.iter_mut().zip(g.data()).zip(av.data()) {
                            *acc += gi * ai;
                        }
                    }
                }
            }
            Op::Scale { a, factor } => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for (acc, &gi) in ga.data_mut().iter_mut().zip(g.data()) {
                        *acc += gi * *factor;
                    }
                }
            }
            Op::NormalizeRows { a, norms } => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for r in 0..g.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        let inv = T::one() / norms[r];
                        for ((acc, &yi), &gi) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *acc += (gi - yi * dot) * inv;
                        }
                    }
                }
            }
            Op::Softmax { a, tau } => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    let inv = T::one() / *tau;
                    for r in 0..g.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for ((acc, &yi), &gi) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *acc += yi * (gi - dot) * inv;
                        }
                    }
                }
            }
            Op::Log { a } => {
                let x = self.value(*a);
                let eps = T::lit(LOG_EPS);
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for ((acc, &gi), &xi) in ga.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                        if xi > eps {
                            *acc += gi / xi;
                        }
                    }
                }
            }
            Op::LayerNorm { a, inv_std } => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    let n = T::from_usize(g.cols()).unwrap();
                    for r in 0..g.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let sum_g: T = gr.iter().copied().sum();
                        let sum_gy: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        let k = inv_std[r] / n;
                        for ((acc, &yi), &gi) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *acc += k * (n * gi - sum_g - yi * sum_gy);
                        }
                    }
                }
            }
            Op::Gelu { a } => {
                let x = self.value(*a);
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for ((acc, &gi), &xi) in ga.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                        *acc += gi * gelu_grad_scalar(xi);
                    }
                }
            }
            Op::Gather {
                sources,
                offsets,
                map,
            } => {
                if sources.len() == 1 {
                    if let Some(gs) = self.grad_slot(grads, sources[0]) {
                        let gsd = gs.data_mut();
                        for (&i, &gi) in map.map.iter().zip(g.data()) {
                            gsd[i as usize] += gi;
                        }
                    }
                } else {
                    for (s, &src) in sources.iter().enumerate() {
                        let (lo, hi) = (offsets[s], offsets[s + 1]);
                        if let Some(gs) = self.grad_slot(grads, src) {
                            let gsd = gs.data_mut();
                            for (&i, &gi) in map.map.iter().zip(g.data()) {
                                let i = i as usize;
                                if i >= lo && i < hi {
                                    gsd[i - lo] += gi;
                                }
                            }
                        }
                    }
                }
            }
            Op::WeightedSum { a, weights } => {
                let scale = g.data()[0];
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for (acc, &w) in ga.data_mut().iter_mut().zip(weights.data()) {
                        *acc += scale * w;
                    }
                }
            }
        }
    }
}

/// Accumulates `op(a) op(b)` block-wise into `c`.
fn grouped_into<T: Scalar>(groups: usize, a: View<'_, T>, b: View<'_, T>, c: &mut [T]) {
    if groups == 1 {
        gemm(T::one(), a, b, T::one(), c);
    } else {
        gemm_grouped(groups, T::one(), a, b, T::one(), c);
    }
}
