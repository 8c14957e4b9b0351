//! Reverse-mode automatic differentiation over matrix-valued nodes.
//!
//! Every primitive records its parents on a [`Tape`]; [`Tape::backward`]
//! sweeps the records in reverse insertion order, which is a valid
//! topological order because a node can only reference earlier nodes.
//! Objectives must be scalar. Jacobians of vector maps are obtained by
//! running one backward pass per output coordinate.

use super::{NumericsError, Tensor};

const LOG_FLOOR: f64 = 1e-300;
const DIV_FLOOR: f64 = 1e-300;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    AddScalar(usize),
    Scale(usize, f64),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Sigmoid(usize),
    Square(usize),
    Abs(usize),
    ClampMin(usize, f64),
    Sum(usize),
    RowSums(usize),
    GatherCols(usize, Vec<usize>),
    ScatterCols(Vec<(usize, Vec<usize>)>),
    RepeatRows(usize, usize),
    Transpose(usize),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Record of primitive operations. Single-threaded; build one per objective.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar objective with respect to every node on the tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `v`; zeros when the objective does not depend on it.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

fn shape_err(op: &str, a: &Tensor, b: &Tensor) -> NumericsError {
    NumericsError::Shape(format!(
        "{op}: {}x{} vs {}x{}",
        a.rows(),
        a.cols(),
        b.rows(),
        b.cols()
    ))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1x1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a.0, b.0)))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() || ta.cols() != tb.cols() {
            return Err(shape_err(name, ta, tb));
        }
        let v = ta.zip_map(tb, f)?;
        Ok(self.push(v, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a.0, b.0))
    }

    /// Elementwise division; denominators are floored away from zero.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(a, b, "div", |x, y| x / guard_den(y), Op::Div(a.0, b.0))
    }

    fn row_broadcast(
        &mut self,
        a: Var,
        row: Var,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, NumericsError> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.rows() != 1 || tr.cols() != ta.cols() {
            return Err(shape_err(name, ta, tr));
        }
        let c = ta.cols();
        let data: Vec<f64> = ta
            .data()
            .iter()
            .enumerate()
            .map(|(k, &x)| f(x, tr.data()[k % c.max(1)]))
            .collect();
        let v = Tensor::matrix(ta.rows(), c, data)?;
        Ok(self.push(v, op))
    }

    /// Adds a `1 x k` row to every row of a `b x k` node.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumericsError> {
        self.row_broadcast(a, row, "add_row", |x, y| x + y, Op::AddRow(a.0, row.0))
    }

    /// Multiplies every row of a `b x k` node elementwise by a `1 x k` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var, NumericsError> {
        self.row_broadcast(a, row, "mul_row", |x, y| x * y, Op::MulRow(a.0, row.0))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x + k);
        self.push(v, Op::AddScalar(a.0))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).scale(k);
        self.push(v, Op::Scale(a.0, k))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a.0))
    }

    /// Natural logarithm; arguments are floored at a tiny positive value.
    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(LOG_FLOOR).ln());
        self.push(v, Op::Log(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a.0))
    }

    /// Absolute value with subgradient 0 at the origin.
    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        self.push(v, Op::Abs(a.0))
    }

    /// `max(a, lo)` elementwise.
    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        let v = self.value(a).map(|x| x.max(lo));
        self.push(v, Op::ClampMin(a.0, lo))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum across columns: `b x k` to `b x 1`.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data: Vec<f64> = (0..t.rows()).map(|r| t.row(r).iter().sum()).collect();
        let v = Tensor::matrix(t.rows(), 1, data).expect("row sums shape");
        self.push(v, Op::RowSums(a.0))
    }

    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var, NumericsError> {
        let t = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&j| j >= t.cols()) {
            return Err(NumericsError::Shape(format!(
                "gather column {bad} of {}",
                t.cols()
            )));
        }
        let v = t.select_cols(idx);
        Ok(self.push(v, Op::GatherCols(a.0, idx.to_vec())))
    }

    /// Assembles a `b x total` node whose column `idx[k]` of part `p` comes
    /// from column `k` of that part. Every output column must be covered
    /// exactly once.
    pub fn scatter_cols(&mut self, parts: &[(Var, &[usize])], total: usize) -> Result<Var, NumericsError> {
        let rows = parts.first().map_or(0, |(v, _)| self.value(*v).rows());
        let mut seen = vec![false; total];
        for (v, idx) in parts {
            let t = self.value(*v);
            if t.rows() != rows || t.cols() != idx.len() {
                return Err(NumericsError::Shape("scatter part shape".into()));
            }
            for &j in idx.iter() {
                if j >= total || seen[j] {
                    return Err(NumericsError::Shape(format!("scatter column {j} invalid")));
                }
                seen[j] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(NumericsError::Shape("scatter leaves columns uncovered".into()));
        }
        let mut out = Tensor::zeros(rows, total);
        for (v, idx) in parts {
            let t = self.value(*v);
            for r in 0..rows {
                for (k, &j) in idx.iter().enumerate() {
                    out.set(r, j, t.get(r, k));
                }
            }
        }
        let rec = parts.iter().map(|(v, idx)| (v.0, idx.to_vec())).collect();
        Ok(self.push(out, Op::ScatterCols(rec)))
    }

    /// Repeats each row `k` times consecutively: `b x d` to `(b*k) x d`.
    pub fn repeat_rows(&mut self, a: Var, k: usize) -> Var {
        let t = self.value(a);
        let c = t.cols();
        let mut data = Vec::with_capacity(t.len() * k);
        for r in 0..t.rows() {
            for _ in 0..k {
                data.extend_from_slice(t.row(r));
            }
        }
        let v = Tensor::matrix(t.rows() * k, c, data).expect("repeat shape");
        self.push(v, Op::RepeatRows(a.0, k))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a.0))
    }

    /// Reverse sweep from a scalar objective.
    pub fn backward(&self, objective: Var) -> Result<Gradients, NumericsError> {
        let root = &self.nodes[objective.0].value;
        if !root.is_scalar() {
            return Err(NumericsError::Contract(format!(
                "backward needs a scalar objective, got {}x{}",
                root.rows(),
                root.cols()
            )));
        }
        let n = objective.0 + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[objective.0] = Some(Tensor::scalar(1.0));

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let val = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(&self.nodes[*b].value)?;
                    let gb = self.nodes[*a].value.t_matmul(&g)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.scale(-1.0));
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(&self.nodes[*b].value, |x, y| x * y)?;
                    let gb = g.zip_map(&self.nodes[*a].value, |x, y| x * y)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Div(a, b) => {
                    let bv = &self.nodes[*b].value;
                    let ga = g.zip_map(bv, |x, y| x / guard_den(y))?;
                    // d(a/b)/db = -(a/b)/b
                    let q = val.zip_map(bv, |x, y| -x / guard_den(y))?;
                    let gb = g.zip_map(&q, |x, y| x * y)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut grads, *row, col_sums(&g));
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::MulRow(a, row) => {
                    let rv = &self.nodes[*row].value;
                    let av = &self.nodes[*a].value;
                    let c = g.cols().max(1);
                    let ga_data: Vec<f64> = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(k, &x)| x * rv.data()[k % c])
                        .collect();
                    let prod = g.zip_map(av, |x, y| x * y)?;
                    accumulate(&mut grads, *row, col_sums(&prod));
                    accumulate(&mut grads, *a, Tensor::matrix(g.rows(), g.cols(), ga_data)?);
                }
                Op::AddScalar(a) => accumulate(&mut grads, *a, g.clone()),
                Op::Scale(a, k) => accumulate(&mut grads, *a, g.scale(*k)),
                Op::Tanh(a) => {
                    let ga = g.zip_map(val, |x, y| x * (1.0 - y * y))?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = g.zip_map(val, |x, y| x * y)?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Log(a) => {
                    let ga = g.zip_map(&self.nodes[*a].value, |x, y| x / y.max(LOG_FLOOR))?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = g.zip_map(val, |x, y| x * y * (1.0 - y))?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Square(a) => {
                    let ga = g.zip_map(&self.nodes[*a].value, |x, y| 2.0 * x * y)?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Abs(a) => {
                    let ga = g.zip_map(&self.nodes[*a].value, |x, y| {
                        if y > 0.0 {
                            x
                        } else if y < 0.0 {
                            -x
                        } else {
                            0.0
                        }
                    })?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::ClampMin(a, lo) => {
                    let lo = *lo;
                    let ga = g.zip_map(&self.nodes[*a].value, |x, y| if y > lo { x } else { 0.0 })?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let av = &self.nodes[*a].value;
                    let s = g.data()[0];
                    accumulate(&mut grads, *a, Tensor::filled(av.rows(), av.cols(), s));
                }
                Op::RowSums(a) => {
                    let av = &self.nodes[*a].value;
                    let c = av.cols();
                    let mut data = Vec::with_capacity(av.len());
                    for r in 0..av.rows() {
                        data.extend(std::iter::repeat(g.data()[r]).take(c));
                    }
                    accumulate(&mut grads, *a, Tensor::matrix(av.rows(), c, data)?);
                }
                Op::GatherCols(a, idx) => {
                    let av = &self.nodes[*a].value;
                    let mut ga = Tensor::zeros(av.rows(), av.cols());
                    for r in 0..g.rows() {
                        for (k, &j) in idx.iter().enumerate() {
                            let cur = ga.get(r, j);
                            ga.set(r, j, cur + g.get(r, k));
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ScatterCols(parts) => {
                    for (p, idx) in parts {
                        accumulate(&mut grads, *p, g.select_cols(idx));
                    }
                }
                Op::RepeatRows(a, k) => {
                    let av = &self.nodes[*a].value;
                    let c = av.cols();
                    let mut ga = Tensor::zeros(av.rows(), c);
                    for r in 0..av.rows() {
                        for rep in 0..*k {
                            let src = g.row(r * k + rep);
                            for (j, &x) in src.iter().enumerate() {
                                let cur = ga.get(r, j);
                                ga.set(r, j, cur + x);
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
            }
            grads[i] = Some(g);
        }

        let shapes = self
            .nodes
            .iter()
            .map(|n| (n.value.rows(), n.value.cols()))
            .collect();
        Ok(Gradients { grads, shapes })
    }
}

fn guard_den(y: f64) -> f64 {
    if y.abs() < DIV_FLOOR {
        if y.is_sign_negative() {
            -DIV_FLOOR
        } else {
            DIV_FLOOR
        }
    } else {
        y
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn col_sums(g: &Tensor) -> Tensor {
    let c = g.cols();
    let mut out = vec![0.0; c];
    for r in 0..g.rows() {
        for (o, &x) in out.iter_mut().zip(g.row(r)) {
            *o += x;
        }
    }
    Tensor::matrix(1, c, out).expect("col sums shape")
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, g: Tensor) {
    match &mut grads[idx] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    /// Central-difference check of `build` (a scalar objective of its
    /// leaves) against the tape gradient.
    fn check_grad(inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().cloned().map(|t| tape.leaf(t)).collect();
        let out = build(&mut tape, &vars);
        let grads = tape.backward(out).unwrap();
        let eval = |ins: &[Tensor]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = ins.iter().cloned().map(|x| t.leaf(x)).collect();
            let o = build(&mut t, &vs);
            t.scalar(o)
        };
        let eps = 1e-5;
        for (k, input) in inputs.iter().enumerate() {
            let g = grads.get(vars[k]);
            for idx in 0..input.len() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[idx] += eps;
                let mut minus = inputs.clone();
                minus[k].data_mut()[idx] -= eps;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                let ad = g.data()[idx];
                let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-3);
                assert!(rel < 1e-4, "input {k}[{idx}]: fd={fd} ad={ad}");
            }
        }
    }

    #[test]
    fn square_at_three() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0));
        let y = t.square(x);
        assert_eq!(t.backward(y).unwrap().get(x).data(), &[6.0]);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0));
        let c = t.constant(Tensor::scalar(5.0));
        let y = t.scale(c, 2.0);
        assert_eq!(t.backward(y).unwrap().get(x).data(), &[0.0]);
    }

    #[test]
    fn non_scalar_objective_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(2, 2));
        assert!(matches!(t.backward(x), Err(NumericsError::Contract(_))));
    }

    #[test]
    fn sum_tanh_wx_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = rand_tensor(&mut rng, 4, 3);
        let x = rand_tensor(&mut rng, 3, 2);
        check_grad(vec![w, x], |t, v| {
            let wx = t.matmul(v[0], v[1]).unwrap();
            let h = t.tanh(wx);
            t.sum(h)
        });
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let a = rand_tensor(&mut rng, 3, 4);
            let b = rand_tensor(&mut rng, 3, 4);
            let row = rand_tensor(&mut rng, 1, 4);
            let pos = a.map(|x| x.abs() + 0.5);
            check_grad(vec![a.clone(), b.clone(), row.clone(), pos.clone()], |t, v| {
                let s1 = t.add(v[0], v[1]).unwrap();
                let s2 = t.sub(s1, v[1]).unwrap();
                let s3 = t.mul(s2, v[1]).unwrap();
                let s4 = t.div(s3, v[3]).unwrap();
                let s5 = t.add_row(s4, v[2]).unwrap();
                let s6 = t.mul_row(s5, v[2]).unwrap();
                let s7 = t.scale(s6, 0.1);
                let e = t.exp(s7);
                let l = t.log(v[3]);
                let sg = t.sigmoid(v[0]);
                let sq = t.square(sg);
                let ab = t.abs(v[1]);
                let cm = t.clamp_min(v[0], 0.3);
                let rs = t.row_sums(e);
                let g = t.gather_cols(l, &[2, 0]).unwrap();
                let g2 = t.gather_cols(sq, &[1, 3]).unwrap();
                let sc = t.scatter_cols(&[(g, &[1, 3]), (g2, &[0, 2])], 4).unwrap();
                let rep = t.repeat_rows(sc, 2);
                let tr = t.transpose(ab);
                let mm = t.matmul(tr, cm).unwrap();
                let parts = [t.sum(rs), t.mean(rep), t.sum(mm)];
                let x = t.add(parts[0], parts[1]).unwrap();
                let x = t.add(x, parts[2]).unwrap();
                t.add_scalar(x, 1.0)
            });
        }
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = rand_tensor(&mut rng, 5, 5);
        let mut t = Tape::new();
        let v = t.leaf(w);
        let h = t.tanh(v);
        let m = t.matmul(h, v).unwrap();
        let s = t.sum(m);
        let g1 = t.backward(s).unwrap().get(v);
        let g2 = t.backward(s).unwrap().get(v);
        assert_eq!(g1, g2);
    }

    #[test]
    fn guarded_log_and_div_stay_finite() {
        let mut t = Tape::new();
        let z = t.leaf(Tensor::scalar(0.0));
        let l = t.log(z);
        let one = t.constant(Tensor::scalar(1.0));
        let d = t.div(one, z).unwrap();
        assert!(t.value(l).all_finite());
        assert!(t.value(d).all_finite());
    }
}
