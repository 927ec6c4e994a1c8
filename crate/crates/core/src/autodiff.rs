//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Calling [`Graph::backward`] on a scalar node walks the tape in reverse and
//! returns the adjoint of every node that depends on a parameter leaf.
//! Scalars are represented as `1 x 1` matrices.

use std::collections::HashMap;

use ndarray::{s, Array2, Axis, Zip};

pub type Mat = Array2<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    RepeatRows(Var),
    Scale(Var, f64),
    Offset(Var),
    Silu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm(Var, Vec<f64>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    CenterCols(Var),
    Clamp(Var, f64, f64),
    Min(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Adjoints produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Grads {
    adjoints: Vec<Option<Mat>>,
}

impl Grads {
    /// Gradient of the loss with respect to `var`, if it was reached.
    pub fn get(&self, var: Var) -> Option<&Mat> {
        self.adjoints.get(var.0).and_then(Option::as_ref)
    }
}

/// Tape of recorded operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    param_order: Vec<String>,
    frozen: bool,
}

const LAYER_NORM_EPS: f64 = 1e-5;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose parameter leaves never require gradients.
    pub fn inference() -> Self {
        Self {
            frozen: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    /// Trainable leaf. Requesting the same name twice returns the same node.
    pub fn param(&mut self, name: &str, value: &Mat) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let trainable = !self.frozen;
        let v = self.push(value.clone(), Op::Leaf, trainable);
        self.params.insert(name.to_string(), v);
        self.param_order.push(name.to_string());
        v
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_constant(&mut self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    /// Gradients of every parameter leaf registered on this graph, by name.
    pub fn param_grads(&self, grads: &Grads) -> Vec<(String, Mat)> {
        self.param_order
            .iter()
            .map(|name| {
                let v = self.params[name];
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Array2::zeros(self.value(v).raw_dim()));
                (name.clone(), g)
            })
            .collect()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let ng = self.needs(a);
        self.push(value, Op::Transpose(a), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) / self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Div(a, b), ng)
    }

    /// `a + row`, with `row` a `1 x m` matrix broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + self.value(row);
        let ng = self.needs(a) || self.needs(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    /// Repeats a `1 x m` row `n` times.
    pub fn repeat_rows(&mut self, row: Var, n: usize) -> Var {
        let r = self.value(row);
        let value = r
            .broadcast((n, r.ncols()))
            .expect("repeat_rows expects a single row")
            .to_owned();
        let ng = self.needs(row);
        self.push(value, Op::RepeatRows(row), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let ng = self.needs(a);
        self.push(value, Op::Scale(a, c), ng)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) + c;
        let ng = self.needs(a);
        self.push(value, Op::Offset(a), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * sigmoid(x));
        let ng = self.needs(a);
        self.push(value, Op::Silu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        let ng = self.needs(a);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        let ng = self.needs(a);
        self.push(value, Op::Exp(a), ng)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::ln);
        let ng = self.needs(a);
        self.push(value, Op::Log(a), ng)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::sqrt);
        let ng = self.needs(a);
        self.push(value, Op::Sqrt(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        let ng = self.needs(a);
        self.push(value, Op::Softmax(a), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let value = log_softmax_rows(self.value(a));
        let ng = self.needs(a);
        self.push(value, Op::LogSoftmax(a), ng)
    }

    /// Per-row standardisation without affine parameters.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let m = x.ncols() as f64;
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / m;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / m;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|v| v * inv);
            inv_std.push(inv);
        }
        let ng = self.needs(a);
        self.push(out, Op::LayerNorm(a, inv_std), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + width]).to_owned();
        let ng = self.needs(a);
        self.push(value, Op::SliceCols(a, start), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols row mismatch");
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Row lookup, `out[i] = table[idx[i]]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let t = self.value(table);
        let mut value = Array2::zeros((idx.len(), t.ncols()));
        for (i, &k) in idx.iter().enumerate() {
            value.row_mut(i).assign(&t.row(k));
        }
        let ng = self.needs(table);
        self.push(value, Op::GatherRows(table, idx.to_vec()), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        let ng = self.needs(a);
        self.push(value, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = Array2::from_elem((1, 1), x.sum() / x.len() as f64);
        let ng = self.needs(a);
        self.push(value, Op::Mean(a), ng)
    }

    /// Subtracts the column means.
    pub fn center_cols(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mean = x.mean_axis(Axis(0)).expect("center_cols on empty matrix");
        let value = x - &mean;
        let ng = self.needs(a);
        self.push(value, Op::CenterCols(a), ng)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).mapv(|x| x.clamp(lo, hi));
        let ng = self.needs(a);
        self.push(value, Op::Clamp(a, lo, hi), ng)
    }

    pub fn min(&mut self, a: Var, b: Var) -> Var {
        let value = Zip::from(self.value(a))
            .and(self.value(b))
            .map_collect(|&x, &y| x.min(y));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Min(a, b), ng)
    }

    /// Sum of squares, as a scalar.
    pub fn sum_sq(&mut self, a: Var) -> Var {
        let sq = self.mul(a, a);
        self.sum(sq)
    }

    /// Back-propagates from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward needs a scalar");
        let mut adj: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Array2::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            adj[i] = Some(g);
        }
        Grads { adjoints: adj }
    }

    fn propagate(&self, i: usize, g: &Mat, adj: &mut [Option<Mat>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let acc = |v: Var, delta: Mat, adj: &mut [Option<Mat>]| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut adj[v.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.dot(&self.value(*b).t()), adj);
                }
                if self.needs(*b) {
                    acc(*b, self.value(*a).t().dot(g), adj);
                }
            }
            Op::Transpose(a) => acc(*a, g.t().to_owned(), adj),
            Op::Add(a, b) => {
                acc(*a, g.clone(), adj);
                acc(*b, g.clone(), adj);
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone(), adj);
                acc(*b, -g, adj);
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    acc(*a, g * self.value(*b), adj);
                }
                if self.needs(*b) {
                    acc(*b, g * self.value(*a), adj);
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if self.needs(*a) {
                    acc(*a, g / bv, adj);
                }
                if self.needs(*b) {
                    acc(*b, -(g * y) / bv, adj);
                }
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone(), adj);
                if self.needs(*row) {
                    acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)), adj);
                }
            }
            Op::RepeatRows(row) => acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)), adj),
            Op::Scale(a, c) => acc(*a, g * *c, adj),
            Op::Offset(a) => acc(*a, g.clone(), adj),
            Op::Silu(a) => {
                let x = self.value(*a);
                let d = Zip::from(g).and(x).map_collect(|&g, &x| {
                    let s = sigmoid(x);
                    g * s * (1.0 + x * (1.0 - s))
                });
                acc(*a, d, adj);
            }
            Op::Tanh(a) => {
                let d = Zip::from(g).and(y).map_collect(|&g, &y| g * (1.0 - y * y));
                acc(*a, d, adj);
            }
            Op::Exp(a) => acc(*a, g * y, adj),
            Op::Log(a) => acc(*a, g / self.value(*a), adj),
            Op::Sqrt(a) => {
                let d = Zip::from(g).and(y).map_collect(|&g, &y| 0.5 * g / y);
                acc(*a, d, adj);
            }
            Op::Softmax(a) => {
                let mut d = g * y;
                let dots = d.sum_axis(Axis(1));
                for (mut row, (yrow, dot)) in d.rows_mut().into_iter().zip(y.rows().into_iter().zip(dots)) {
                    row.zip_mut_with(&yrow, |dv, &yv| *dv -= yv * dot);
                }
                acc(*a, d, adj);
            }
            Op::LogSoftmax(a) => {
                let gsum = g.sum_axis(Axis(1));
                let mut d = g.clone();
                for ((mut row, yrow), gs) in d.rows_mut().into_iter().zip(y.rows()).zip(gsum) {
                    row.zip_mut_with(&yrow, |dv, &yv| *dv -= yv.exp() * gs);
                }
                acc(*a, d, adj);
            }
            Op::LayerNorm(a, inv_std) => {
                let m = y.ncols() as f64;
                let mut d = g.clone();
                for (r, mut row) in d.rows_mut().into_iter().enumerate() {
                    let yrow = y.row(r);
                    let g_mean = row.sum() / m;
                    let gy_mean = row.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum::<f64>() / m;
                    let inv = inv_std[r];
                    row.zip_mut_with(&yrow, |dv, &yv| *dv = inv * (*dv - g_mean - yv * gy_mean));
                }
                acc(*a, d, adj);
            }
            Op::SliceCols(a, start) => {
                let mut d = Array2::zeros(self.value(*a).raw_dim());
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                acc(*a, d, adj);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).ncols();
                    acc(*p, g.slice(s![.., offset..offset + w]).to_owned(), adj);
                    offset += w;
                }
            }
            Op::GatherRows(table, idx) => {
                let mut d = Array2::zeros(self.value(*table).raw_dim());
                for (i, &k) in idx.iter().enumerate() {
                    let mut row = d.row_mut(k);
                    row += &g.row(i);
                }
                acc(*table, d, adj);
            }
            Op::Sum(a) => {
                let d = Array2::from_elem(self.value(*a).raw_dim(), g[[0, 0]]);
                acc(*a, d, adj);
            }
            Op::Mean(a) => {
                let x = self.value(*a);
                let d = Array2::from_elem(x.raw_dim(), g[[0, 0]] / x.len() as f64);
                acc(*a, d, adj);
            }
            Op::CenterCols(a) => {
                let mean = g.mean_axis(Axis(0)).expect("non-empty");
                acc(*a, g - &mean, adj);
            }
            Op::Clamp(a, lo, hi) => {
                let d = Zip::from(g)
                    .and(self.value(*a))
                    .map_collect(|&g, &x| if x > *lo && x < *hi { g } else { 0.0 });
                acc(*a, d, adj);
            }
            Op::Min(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let da = Zip::from(g).and(av).and(bv).map_collect(|&g, &x, &y| if x <= y { g } else { 0.0 });
                let db = Zip::from(g).and(av).and(bv).map_collect(|&g, &x, &y| if x <= y { 0.0 } else { g });
                acc(*a, da, adj);
                acc(*b, db, adj);
            }
        }
    }
}

pub fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    out
}

pub fn log_softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    /// Checks every entry of `x` against central differences of `f`.
    fn check(x: &Mat, f: impl Fn(&mut Graph, Var) -> Var) {
        let mut g = Graph::new();
        let v = g.param("x", x);
        let out = f(&mut g, v);
        let grads = g.backward(out);
        let analytic = grads.get(v).unwrap().clone();
        let eps = 1e-6;
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            xp[[r, c]] += eps;
            xm[[r, c]] -= eps;
            let eval = |m: &Mat| {
                let mut g = Graph::new();
                let v = g.param("x", m);
                let o = f(&mut g, v);
                g.scalar(o)
            };
            let numeric = (eval(&xp) - eval(&xm)) / (2.0 * eps);
            let a = analytic[[r, c]];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            assert!((a - numeric).abs() / denom < 1e-5, "entry {idx}: analytic {a} numeric {numeric}");
        }
    }

    #[test]
    fn elementwise_and_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(3, 4, &mut rng);
        check(&x, |g, v| {
            let a = g.silu(v);
            let b = g.tanh(a);
            let c = g.mul(b, v);
            g.sum_sq(c)
        });
        let pos = x.mapv(|v| v.abs() + 0.5);
        check(&pos, |g, v| {
            let a = g.log(v);
            let b = g.sqrt(v);
            let c = g.div(a, b);
            let e = g.exp(c);
            g.mean(e)
        });
    }

    #[test]
    fn matmul_softmax_layernorm() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(4, 5, &mut rng);
        let w = random(5, 3, &mut rng);
        check(&x, |g, v| {
            let wv = g.constant(w.clone());
            let h = g.matmul(v, wv);
            let n = g.layer_norm(h);
            let s = g.softmax_rows(n);
            let t = g.transpose(s);
            let k = g.matmul(s, t);
            let ls = g.log_softmax_rows(k);
            let z = g.mul(ls, ls);
            g.sum(z)
        });
    }

    #[test]
    fn structural_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(4, 6, &mut rng);
        check(&x, |g, v| {
            let a = g.slice_cols(v, 1, 3);
            let b = g.slice_cols(v, 4, 2);
            let c = g.concat_cols(&[b, a]);
            let row = g.slice_cols(v, 0, 5);
            let first = g.gather_rows(row, &[0]);
            let rep = g.repeat_rows(first, 4);
            let d = g.add_row(c, first);
            let e = g.sub(d, rep);
            let f = g.center_cols(e);
            let gat = g.gather_rows(f, &[2, 0, 2]);
            let sc = g.scale(gat, 1.7);
            let off = g.offset(sc, 0.3);
            let m = g.mul(off, off);
            g.sum(m)
        });
    }

    #[test]
    fn clamp_and_min_route_gradients() {
        let mut g = Graph::new();
        let x = g.param("x", &array![[0.5, 1.5, 3.0]]);
        let c = g.clamp(x, 1.0, 2.0);
        let y = g.scalar_constant(0.0);
        let _ = y;
        let other = g.constant(array![[1.0, 1.0, 1.0]]);
        let m = g.min(c, other);
        let s = g.sum(m);
        let grads = g.backward(s);
        // only the middle entry is strictly inside the clamp, and it loses the min
        assert_eq!(grads.get(x).unwrap(), &array![[0.0, 0.0, 0.0]]);

        let mut g = Graph::new();
        let x = g.param("x", &array![[0.5, 1.5]]);
        let other = g.constant(array![[1.0, 2.0]]);
        let m = g.min(x, other);
        let s = g.sum(m);
        let grads = g.backward(s);
        assert_eq!(grads.get(x).unwrap(), &array![[1.0, 1.0]]);
    }

    #[test]
    fn inference_graph_has_no_gradients() {
        let mut g = Graph::inference();
        let x = g.param("x", &array![[1.0, 2.0]]);
        let s = g.sum_sq(x);
        assert_eq!(g.scalar(s), 5.0);
        let grads = g.backward(s);
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn repeated_param_shares_node() {
        let mut g = Graph::new();
        let w = array![[2.0]];
        let a = g.param("w", &w);
        let b = g.param("w", &w);
        assert_eq!(a, b);
        let p = g.mul(a, b);
        let s = g.sum(p);
        let grads = g.backward(s);
        let named = g.param_grads(&grads);
        assert_eq!(named.len(), 1);
        assert_eq!(named[0].1[[0, 0]], 4.0);
    }
}
