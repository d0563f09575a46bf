//! Reverse-mode automatic differentiation over `Array2<f64>` values.
//!
//! A [`Tape`] records a forward computation as a flat list of nodes; calling
//! [`Tape::backward`] walks the list in reverse and accumulates parameter
//! gradients into a [`Grads`] container. Parameters live outside the tape in
//! a [`ParamStore`], so building a graph never copies weight matrices and a
//! fresh tape per batch chunk is cheap.
//!
//! Conventions: activations are row-major batches (`B x n`, one sample per
//! row), weights are `in x out` so a dense layer is `x . W + b`, vectors that
//! enter reductions are columns, and losses are `1 x 1` nodes.

use ndarray::{s, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Handle to one registered parameter array.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Named parameter arrays owned by a model.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    arrays: Vec<Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, array: Array2<f64>) -> ParamId {
        self.names.push(name.into());
        self.arrays.push(array);
        ParamId(self.arrays.len() - 1)
    }

    /// Registers a dense layer: weights `in_dim x out_dim` drawn uniformly
    /// from `±1/sqrt(in_dim)` and a zero bias row.
    pub fn register_linear(
        &mut self,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> (ParamId, ParamId) {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = Array2::from_shape_fn((in_dim, out_dim), |_| rng.random_range(-bound..bound));
        let wid = self.register(format!("{name}.w"), w);
        let bid = self.register(format!("{name}.b"), Array2::zeros((1, out_dim)));
        (wid, bid)
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.arrays[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.arrays[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub(crate) fn arrays_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.arrays
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.arrays.iter().map(|a| a.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names.iter().map(|s| s.as_str()).zip(self.arrays.iter())
    }

    /// Replaces every array with the equally shaped array of `other`.
    pub fn assign_from(&mut self, other: &ParamStore) {
        assert_eq!(self.arrays.len(), other.arrays.len());
        for (a, b) in self.arrays.iter_mut().zip(&other.arrays) {
            a.assign(b);
        }
    }
}

/// Gradient accumulator shaped like a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Grads {
    arrays: Vec<Array2<f64>>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            arrays: store.arrays.iter().map(|a| Array2::zeros(a.dim())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.arrays[id.0]
    }

    pub fn arrays(&self) -> &[Array2<f64>] {
        &self.arrays
    }

    pub fn arrays_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.arrays
    }

    pub fn zero(&mut self) {
        for a in &mut self.arrays {
            a.fill(0.0);
        }
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.arrays.iter_mut().zip(&other.arrays) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        for a in &mut self.arrays {
            *a *= k;
        }
    }
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Val {
    Owned(Array2<f64>),
    Param(ParamId),
}

enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Neg(Var),
    Mul(Var, Var),
    Recip(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddScalarNode(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MatMul(Var, Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Ln(Var),
    Square(Var),
    Sum(Var),
    SumRows(Var),
    LogSumExp(Var),
    LogSumExpRows(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Rows(Var, usize, usize),
    GatherPatches(Var, usize, usize),
    ScatterPatches(Var, usize, usize),
}

struct Node {
    val: Val,
    op: Op,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// A recorded forward pass over parameters in `params`.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    fn push(&mut self, val: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node {
            val: Val::Owned(val),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        match &self.nodes[v.0].val {
            Val::Owned(a) => a,
            Val::Param(id) => self.params.get(*id),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let a = self.value(v);
        debug_assert_eq!(a.dim(), (1, 1));
        a[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// Constant leaf; receives no gradient.
    pub fn input(&mut self, a: Array2<f64>) -> Var {
        self.push(a, Op::Leaf)
    }

    pub fn scalar_input(&mut self, x: f64) -> Var {
        self.input(Array2::from_elem((1, 1), x))
    }

    /// Parameter leaf; one node per parameter per tape.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            val: Val::Param(id),
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let val = self.value(a) + self.value(b);
        self.push(val, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shapes");
        let val = self.value(a) - self.value(b);
        self.push(val, Op::Sub(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let val = self.value(a).mapv(|x| -x);
        self.push(val, Op::Neg(a))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shapes");
        let val = self.value(a) * self.value(b);
        self.push(val, Op::Mul(a, b))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let val = self.value(a).mapv(|x| 1.0 / x);
        self.push(val, Op::Recip(a))
    }

    /// `a + b` with `b` a `1 x c` row broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (_, c) = self.shape(a);
        assert_eq!(self.shape(b), (1, c), "add_row shapes");
        let val = self.value(a) + self.value(b);
        self.push(val, Op::AddRow(a, b))
    }

    /// `a * b` elementwise with `b` a `1 x c` row broadcast over rows of `a`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let (_, c) = self.shape(a);
        assert_eq!(self.shape(b), (1, c), "mul_row shapes");
        let val = self.value(a) * self.value(b);
        self.push(val, Op::MulRow(a, b))
    }

    /// `a + s` with `s` a `1 x 1` node broadcast over all entries.
    pub fn add_scalar_node(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.shape(s), (1, 1), "scalar node");
        let sv = self.scalar(s);
        let val = self.value(a).mapv(|x| x + sv);
        self.push(val, Op::AddScalarNode(a, s))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let val = self.value(a).mapv(|x| k * x);
        self.push(val, Op::Scale(a, k))
    }

    pub fn add_const(&mut self, a: Var, k: f64) -> Var {
        let val = self.value(a).mapv(|x| x + k);
        self.push(val, Op::AddConst(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (_, k1) = self.shape(a);
        let (k2, _) = self.shape(b);
        assert_eq!(k1, k2, "matmul inner dims");
        let val = self.value(a).dot(self.value(b));
        self.push(val, Op::MatMul(a, b))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let val = self.value(a).mapv(|x| x.max(0.0));
        self.push(val, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let val = self.value(a).mapv(f64::tanh);
        self.push(val, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let val = self.value(a).mapv(sigmoid);
        self.push(val, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let val = self.value(a).mapv(softplus);
        self.push(val, Op::Softplus(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let val = self.value(a).mapv(f64::ln);
        self.push(val, Op::Ln(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let val = self.value(a).mapv(|x| x * x);
        self.push(val, Op::Square(a))
    }

    /// Sum of all entries, a `1 x 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let val = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(val, Op::Sum(a))
    }

    /// Row sums, a `r x 1` column.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let mut out = Array2::zeros((v.nrows(), 1));
        for (i, row) in v.rows().into_iter().enumerate() {
            out[[i, 0]] = row.sum();
        }
        self.push(out, Op::SumRows(a))
    }

    /// log(sum(exp(a))) of an `n x 1` column, a `1 x 1` node.
    pub fn logsumexp(&mut self, a: Var) -> Var {
        let v = self.value(a);
        assert_eq!(v.ncols(), 1, "logsumexp expects a column");
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = v.iter().map(|x| (x - m).exp()).sum();
        let val = Array2::from_elem((1, 1), m + s.ln());
        self.push(val, Op::LogSumExp(a))
    }

    /// Row-wise log-sum-exp of an `r x c` matrix, a `r x 1` column.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let mut out = Array2::zeros((v.nrows(), 1));
        for (i, row) in v.rows().into_iter().enumerate() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|x| (x - m).exp()).sum();
            out[[i, 0]] = m + s.ln();
        }
        self.push(out, Op::LogSumExpRows(a))
    }

    /// Vertical stack; all inputs share the column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let c = self.shape(parts[0]).1;
        let rows: usize = parts.iter().map(|&p| self.shape(p).0).sum();
        let mut out = Array2::zeros((rows, c));
        let mut r = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.ncols(), c, "concat_rows columns");
            out.slice_mut(s![r..r + v.nrows(), ..]).assign(v);
            r += v.nrows();
        }
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    /// Horizontal stack; all inputs share the row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let r = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Array2::zeros((r, cols));
        let mut c = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.nrows(), r, "concat_cols rows");
            out.slice_mut(s![.., c..c + v.ncols()]).assign(v);
            c += v.ncols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    /// Copy of rows `r0..r1` (exclusive).
    pub fn rows(&mut self, a: Var, r0: usize, r1: usize) -> Var {
        let val = self.value(a).slice(s![r0..r1, ..]).to_owned();
        self.push(val, Op::Rows(a, r0, r1))
    }

    /// Unfolds an `L x M` series into `L' x (k*M)` patches for a 1-D
    /// convolution with kernel `k` and stride `stride`; patch row `t`
    /// concatenates input rows `t*stride .. t*stride + k`.
    pub fn gather_patches(&mut self, a: Var, k: usize, stride: usize) -> Var {
        let v = self.value(a);
        let (l, m) = v.dim();
        assert!(k >= 1 && stride >= 1 && k <= l, "conv patch geometry");
        let lp = (l - k) / stride + 1;
        let mut out = Array2::zeros((lp, k * m));
        for t in 0..lp {
            for j in 0..k {
                for f in 0..m {
                    out[[t, j * m + f]] = v[[t * stride + j, f]];
                }
            }
        }
        self.push(out, Op::GatherPatches(a, k, stride))
    }

    /// Overlap-adds `L' x (k*F)` patch rows back into an `out_len x F`
    /// series: patch row `t` contributes its `j`-th chunk to output row
    /// `t*stride + j`. This is the transposed convolution's spatial map.
    pub fn scatter_patches(&mut self, a: Var, k: usize, stride: usize, out_len: usize) -> Var {
        let v = self.value(a);
        let (lp, kf) = v.dim();
        assert_eq!(kf % k, 0, "patch width divisible by kernel");
        let f = kf / k;
        assert_eq!(out_len, (lp - 1) * stride + k, "transposed conv length");
        let mut out = Array2::zeros((out_len, f));
        for t in 0..lp {
            for j in 0..k {
                for c in 0..f {
                    out[[t * stride + j, c]] += v[[t, j * f + c]];
                }
            }
        }
        self.push(out, Op::ScatterPatches(a, k, stride))
    }

    /// Backpropagates from the `1 x 1` node `loss`, adding parameter
    /// gradients into `grads`.
    pub fn backward(&self, loss: Var, grads: &mut Grads) {
        assert_eq!(self.shape(loss), (1, 1), "loss must be scalar");
        let mut adj: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(Array2::from_elem((1, 1), 1.0));

        for i in (0..self.nodes.len()).rev() {
            let g = match adj[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Param(pid) => {
                    grads.arrays[pid.0] += &g;
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *a, &g);
                    acc(&mut adj, *b, &g);
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, *a, &g);
                    acc_neg(&mut adj, *b, &g);
                }
                Op::Neg(a) => acc_neg(&mut adj, *a, &g),
                Op::Mul(a, b) => {
                    let da = &g * self.value(*b);
                    let db = &g * self.value(*a);
                    acc(&mut adj, *a, &da);
                    acc(&mut adj, *b, &db);
                }
                Op::Recip(a) => {
                    let y = match &self.nodes[i].val {
                        Val::Owned(y) => y,
                        Val::Param(_) => unreachable!(),
                    };
                    let da = -(&g) * y * y;
                    acc(&mut adj, *a, &da);
                }
                Op::AddRow(a, b) => {
                    acc(&mut adj, *a, &g);
                    acc(&mut adj, *b, &row_sum(&g));
                }
                Op::MulRow(a, b) => {
                    let da = &g * self.value(*b);
                    let db = row_sum(&(&g * self.value(*a)));
                    acc(&mut adj, *a, &da);
                    acc(&mut adj, *b, &db);
                }
                Op::AddScalarNode(a, s) => {
                    acc(&mut adj, *a, &g);
                    let ds = Array2::from_elem((1, 1), g.sum());
                    acc(&mut adj, *s, &ds);
                }
                Op::Scale(a, k) => {
                    let da = g.mapv(|x| k * x);
                    acc(&mut adj, *a, &da);
                }
                Op::AddConst(a) => acc(&mut adj, *a, &g),
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&g);
                    acc(&mut adj, *a, &da);
                    acc(&mut adj, *b, &db);
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let mut da = g.clone();
                    da.zip_mut_with(x, |gv, &xv| {
                        if xv <= 0.0 {
                            *gv = 0.0;
                        }
                    });
                    acc(&mut adj, *a, &da);
                }
                Op::Tanh(a) => {
                    let y = self.own_value(i);
                    let da = &g * &y.mapv(|t| 1.0 - t * t);
                    acc(&mut adj, *a, &da);
                }
                Op::Sigmoid(a) => {
                    let y = self.own_value(i);
                    let da = &g * &y.mapv(|s| s * (1.0 - s));
                    acc(&mut adj, *a, &da);
                }
                Op::Softplus(a) => {
                    let x = self.value(*a);
                    let da = &g * &x.mapv(sigmoid);
                    acc(&mut adj, *a, &da);
                }
                Op::Ln(a) => {
                    let x = self.value(*a);
                    let da = &g / x;
                    acc(&mut adj, *a, &da);
                }
                Op::Square(a) => {
                    let x = self.value(*a);
                    let da = &g * &x.mapv(|v| 2.0 * v);
                    acc(&mut adj, *a, &da);
                }
                Op::Sum(a) => {
                    let da = Array2::from_elem(self.shape(*a), g[[0, 0]]);
                    acc(&mut adj, *a, &da);
                }
                Op::SumRows(a) => {
                    let (r, c) = self.shape(*a);
                    let mut da = Array2::zeros((r, c));
                    for i2 in 0..r {
                        let gi = g[[i2, 0]];
                        da.row_mut(i2).fill(gi);
                    }
                    acc(&mut adj, *a, &da);
                }
                Op::LogSumExp(a) => {
                    let x = self.value(*a);
                    let y = self.own_value(i)[[0, 0]];
                    let da = x.mapv(|v| (v - y).exp() * g[[0, 0]]);
                    acc(&mut adj, *a, &da);
                }
                Op::LogSumExpRows(a) => {
                    let x = self.value(*a);
                    let y = self.own_value(i);
                    let mut da = Array2::zeros(x.dim());
                    for r in 0..x.nrows() {
                        let gy = g[[r, 0]];
                        let lse = y[[r, 0]];
                        for c in 0..x.ncols() {
                            da[[r, c]] = (x[[r, c]] - lse).exp() * gy;
                        }
                    }
                    acc(&mut adj, *a, &da);
                }
                Op::ConcatRows(parts) => {
                    let mut r = 0;
                    for &p in parts {
                        let h = self.shape(p).0;
                        let slice = g.slice(s![r..r + h, ..]).to_owned();
                        acc(&mut adj, p, &slice);
                        r += h;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut c = 0;
                    for &p in parts {
                        let w = self.shape(p).1;
                        let slice = g.slice(s![.., c..c + w]).to_owned();
                        acc(&mut adj, p, &slice);
                        c += w;
                    }
                }
                Op::Rows(a, r0, r1) => {
                    let mut da = Array2::zeros(self.shape(*a));
                    da.slice_mut(s![*r0..*r1, ..]).assign(&g);
                    acc(&mut adj, *a, &da);
                }
                Op::GatherPatches(a, k, stride) => {
                    let (l, m) = self.shape(*a);
                    let lp = (l - k) / stride + 1;
                    let mut da = Array2::zeros((l, m));
                    for t in 0..lp {
                        for j in 0..*k {
                            for f in 0..m {
                                da[[t * stride + j, f]] += g[[t, j * m + f]];
                            }
                        }
                    }
                    acc(&mut adj, *a, &da);
                }
                Op::ScatterPatches(a, k, stride) => {
                    let (lp, kf) = self.shape(*a);
                    let f = kf / k;
                    let mut da = Array2::zeros((lp, kf));
                    for t in 0..lp {
                        for j in 0..*k {
                            for c in 0..f {
                                da[[t, j * f + c]] = g[[t * stride + j, c]];
                            }
                        }
                    }
                    acc(&mut adj, *a, &da);
                }
            }
        }
    }

    fn own_value(&self, i: usize) -> &Array2<f64> {
        match &self.nodes[i].val {
            Val::Owned(a) => a,
            Val::Param(id) => self.params.get(*id),
        }
    }
}

fn acc(adj: &mut [Option<Array2<f64>>], v: Var, g: &Array2<f64>) {
    match &mut adj[v.0] {
        Some(a) => *a += g,
        slot => *slot = Some(g.clone()),
    }
}

fn acc_neg(adj: &mut [Option<Array2<f64>>], v: Var, g: &Array2<f64>) {
    match &mut adj[v.0] {
        Some(a) => *a -= g,
        slot => *slot = Some(g.mapv(|x| -x)),
    }
}

fn row_sum(g: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((1, g.ncols()));
    for row in g.rows() {
        for (j, v) in row.iter().enumerate() {
            out[[0, j]] += v;
        }
    }
    out
}
