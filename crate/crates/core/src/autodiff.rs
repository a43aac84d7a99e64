//! Minimal reverse-mode autodiff over 2-D `f64` arrays.
//!
//! Supports exactly the operations the built-in trainable components need
//! (linear maps, attention, dropout masks, squared-error losses). Nodes are
//! appended in topological order, so the backward pass is a single reverse
//! sweep. Values and gradients are dense `Array2<f64>`; desk-scale sizes make
//! that cheap.

use ndarray::{Array2, Axis};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    ScaleConst(NodeId, f64),
    /// Adds a 1-by-n row to every row of an m-by-n operand.
    AddRow(NodeId, NodeId),
    SoftmaxRows(NodeId),
    Transpose(NodeId),
    Tanh(NodeId),
    SumAll(NodeId),
    ConcatRows(Vec<NodeId>),
    SliceRow(NodeId, usize),
    Reshape(NodeId),
    /// Elementwise multiply by a constant mask (dropout).
    MulMask(NodeId, Array2<f64>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    /// Enters an array as a differentiable leaf (parameter or input).
    pub fn leaf(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Enters an array whose gradient the caller will ignore.
    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a, b))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(v, Op::MatMul(a, b))
    }

    pub fn scale_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        self.push(v, Op::ScaleConst(a, c))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value + &self.nodes[row.0].value;
        self.push(v, Op::AddRow(a, row))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let mut v = self.nodes[a.0].value.clone();
        for mut row in v.axis_iter_mut(Axis(0)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a.0].value.sum();
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(a))
    }

    pub fn concat_rows(&mut self, rows: Vec<NodeId>) -> NodeId {
        let cols = self.nodes[rows[0].0].value.ncols();
        let total: usize = rows.iter().map(|r| self.nodes[r.0].value.nrows()).sum();
        let mut v = Array2::zeros((total, cols));
        let mut at = 0;
        for r in &rows {
            let src = &self.nodes[r.0].value;
            v.slice_mut(ndarray::s![at..at + src.nrows(), ..]).assign(src);
            at += src.nrows();
        }
        self.push(v, Op::ConcatRows(rows))
    }

    pub fn slice_row(&mut self, a: NodeId, row: usize) -> NodeId {
        let v = self.nodes[a.0]
            .value
            .row(row)
            .to_owned()
            .insert_axis(Axis(0));
        self.push(v, Op::SliceRow(a, row))
    }

    pub fn reshape(&mut self, a: NodeId, shape: (usize, usize)) -> NodeId {
        let v = self.nodes[a.0]
            .value
            .clone()
            .into_shape_with_order(shape)
            .expect("reshape must preserve element count");
        self.push(v, Op::Reshape(a))
    }

    pub fn mul_mask(&mut self, a: NodeId, mask: Array2<f64>) -> NodeId {
        let v = &self.nodes[a.0].value * &mask;
        self.push(v, Op::MulMask(a, mask))
    }

    /// Mean of squared entries, as a 1x1 node.
    pub fn mean_sq(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a.0].value.len() as f64;
        let sq = self.mul(a, a);
        let s = self.sum_all(sq);
        self.scale_const(s, 1.0 / n)
    }

    /// Reverse sweep from the given seed cotangents.
    ///
    /// Returns one gradient slot per node; unreached nodes are `None`.
    pub fn backward(&self, seeds: &[(NodeId, Array2<f64>)]) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        for (id, g) in seeds {
            accumulate(&mut grads[id.0], g);
        }
        for i in (0..self.nodes.len()).rev() {
            // Leaf gradients stay in their slots for the caller to read.
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], &g);
                    accumulate(&mut grads[b.0], &g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[a.0], &g);
                    let neg = g.mapv(|x| -x);
                    accumulate(&mut grads[b.0], &neg);
                }
                Op::Mul(a, b) => {
                    let ga = &g * &self.nodes[b.0].value;
                    let gb = &g * &self.nodes[a.0].value;
                    accumulate(&mut grads[a.0], &ga);
                    accumulate(&mut grads[b.0], &gb);
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.nodes[b.0].value.t());
                    let gb = self.nodes[a.0].value.t().dot(&g);
                    accumulate(&mut grads[a.0], &ga);
                    accumulate(&mut grads[b.0], &gb);
                }
                Op::ScaleConst(a, c) => {
                    let ga = g.mapv(|x| x * c);
                    accumulate(&mut grads[a.0], &ga);
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut grads[a.0], &g);
                    let grow = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads[row.0], &grow);
                }
                Op::SoftmaxRows(a) => {
                    let y = &self.nodes[i].value;
                    let mut ga = Array2::zeros(y.raw_dim());
                    for r in 0..y.nrows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr.iter()).map(|(y, g)| y * g).sum();
                        for c in 0..y.ncols() {
                            ga[[r, c]] = yr[c] * (gr[c] - dot);
                        }
                    }
                    accumulate(&mut grads[a.0], &ga);
                }
                Op::Transpose(a) => {
                    let ga = g.t().to_owned();
                    accumulate(&mut grads[a.0], &ga);
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[i].value;
                    let ga = ndarray::Zip::from(&g).and(y).map_collect(|&g, &y| g * (1.0 - y * y));
                    accumulate(&mut grads[a.0], &ga);
                }
                Op::SumAll(a) => {
                    let scalar = g[[0, 0]];
                    let ga = Array2::from_elem(self.nodes[a.0].value.raw_dim(), scalar);
                    accumulate(&mut grads[a.0], &ga);
                }
                Op::ConcatRows(rows) => {
                    let mut at = 0;
                    for r in rows {
                        let n = self.nodes[r.0].value.nrows();
                        let part = g.slice(ndarray::s![at..at + n, ..]).to_owned();
                        accumulate(&mut grads[r.0], &part);
                        at += n;
                    }
                }
                Op::SliceRow(a, row) => {
                    let mut ga = Array2::zeros(self.nodes[a.0].value.raw_dim());
                    ga.row_mut(*row).assign(&g.row(0));
                    accumulate(&mut grads[a.0], &ga);
                }
                Op::Reshape(a) => {
                    let ga = g
                        .clone()
                        .into_shape_with_order(self.nodes[a.0].value.raw_dim())
                        .expect("gradient reshape");
                    accumulate(&mut grads[a.0], &ga);
                }
                Op::MulMask(a, mask) => {
                    let ga = &g * mask;
                    accumulate(&mut grads[a.0], &ga);
                }
            }
        }
        Gradients { grads }
    }
}

/// Gaussian-initialized parameter matrix, `N(0, std^2)` entries.
pub(crate) fn randn2(rng: &mut impl rand::Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) * std)
        .collect();
    Array2::from_shape_vec((rows, cols), data).expect("randn shape")
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: &Array2<f64>) {
    match slot {
        Some(acc) => *acc += g,
        None => *slot = Some(g.clone()),
    }
}

pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Array2<f64>> {
        self.grads[id.0].take()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    /// Central finite difference of a scalar-valued tape program with respect
    /// to one coordinate of one leaf.
    fn fd<F>(build: F, base: &Array2<f64>, r: usize, c: usize) -> f64
    where
        F: Fn(&Array2<f64>) -> f64,
    {
        let h = 1e-6 * (1.0 + base[[r, c]].abs());
        let mut plus = base.clone();
        plus[[r, c]] += h;
        let mut minus = base.clone();
        minus[[r, c]] -= h;
        (build(&plus) - build(&minus)) / (2.0 * h)
    }

    fn relative_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    #[test]
    fn matmul_softmax_chain_matches_finite_differences() {
        let x0 = arr2(&[[0.3, -0.7, 0.2], [1.1, 0.4, -0.2]]);
        let w0 = arr2(&[[0.5, -0.1], [0.2, 0.9], [-0.4, 0.3]]);
        let run = |x: &Array2<f64>, w: &Array2<f64>| -> (f64, Array2<f64>, Array2<f64>) {
            let mut tape = Tape::new();
            let xi = tape.leaf(x.clone());
            let wi = tape.leaf(w.clone());
            let z = tape.matmul(xi, wi);
            let s = tape.softmax_rows(z);
            let t = tape.tanh(s);
            let loss = tape.mean_sq(t);
            let value = tape.value(loss)[[0, 0]];
            let mut grads = tape.backward(&[(loss, Array2::from_elem((1, 1), 1.0))]);
            (value, grads.take(xi).unwrap(), grads.take(wi).unwrap())
        };
        let (_, gx, gw) = run(&x0, &w0);
        for (r, cidx) in [(0usize, 1usize), (1, 2)] {
            let g_fd = fd(|x| run(x, &w0).0, &x0, r, cidx);
            assert!(relative_close(gx[[r, cidx]], g_fd, 1e-6), "x[{r},{cidx}]");
        }
        for (r, cidx) in [(0usize, 0usize), (2, 1)] {
            let g_fd = fd(|w| run(&x0, w).0, &w0, r, cidx);
            assert!(relative_close(gw[[r, cidx]], g_fd, 1e-6), "w[{r},{cidx}]");
        }
    }

    #[test]
    fn concat_slice_reshape_gradients_flow() {
        let a0 = arr2(&[[0.5, -0.2]]);
        let b0 = arr2(&[[1.5, 0.3]]);
        let run = |a: &Array2<f64>| -> (f64, Option<Array2<f64>>) {
            let mut tape = Tape::new();
            let ai = tape.leaf(a.clone());
            let bi = tape.leaf(b0.clone());
            let m = tape.concat_rows(vec![ai, bi]);
            let top = tape.slice_row(m, 0);
            let flat = tape.reshape(top, (2, 1));
            let loss = tape.mean_sq(flat);
            let value = tape.value(loss)[[0, 0]];
            let mut grads = tape.backward(&[(loss, Array2::from_elem((1, 1), 1.0))]);
            (value, grads.take(ai))
        };
        let (_, ga) = run(&a0);
        let ga = ga.unwrap();
        let g_fd = fd(|a| run(a).0, &a0, 0, 0);
        assert!(relative_close(ga[[0, 0]], g_fd, 1e-6));
    }

    #[test]
    fn backward_from_non_scalar_seed() {
        // Seeding an interior cotangent is how external VJPs enter the tape.
        let mut tape = Tape::new();
        let x = tape.leaf(arr2(&[[2.0, 3.0]]));
        let y = tape.scale_const(x, 4.0);
        let mut grads = tape.backward(&[(y, arr2(&[[1.0, 10.0]]))]);
        let gx = grads.take(x).unwrap();
        assert_eq!(gx, arr2(&[[4.0, 40.0]]));
    }
}
