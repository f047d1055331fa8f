//! Minimal reverse-mode automatic differentiation over row-major matrices.
//!
//! Every value is an `Array2<f64>`; a batch of sequences is stacked along
//! rows. Ops append a node to the tape and [`Tape::backward`] walks the
//! nodes in reverse, accumulating gradients into parameter slots.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Input,
    Param(usize),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulBT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Vec<f64>),
    Tanh(Var),
    /// Keeps the inner tanh for the backward pass.
    Gelu(Var, Array2<f64>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq: usize,
        heads: usize,
        probs: Vec<Array2<f64>>,
    },
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    MeanSquare(Var),
    CrossEntropy {
        logits: Var,
        probs: Array2<f64>,
        targets: Vec<usize>,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by parameter slot.
pub struct Grads {
    pub params: Vec<Option<Array2<f64>>>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const LN_EPS: f64 = 1e-5;

// libm tanh is several times slower than exp on the targets we run on
fn fast_tanh(u: f64) -> f64 {
    if u.abs() > 20.0 {
        return u.signum();
    }
    let e = (2.0 * u).exp();
    (e - 1.0) / (e + 1.0)
}

fn gelu_inner(x: f64) -> f64 {
    fast_tanh(GELU_C * (x + 0.044715 * x * x * x))
}

fn gelu_grad(x: f64, th: f64) -> f64 {
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

pub(crate) fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
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

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Input)
    }

    /// Trainable leaf whose gradient is reported under `slot`.
    pub fn param(&mut self, slot: usize, value: ArrayView2<f64>) -> Var {
        self.push(value.to_owned(), Op::Param(slot))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulBT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    /// Adds a `1×n` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + &self.value(row).row(0);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    /// Multiplies row `i` of `a` by `factors[i]`.
    pub fn scale_rows(&mut self, a: Var, factors: Vec<f64>) -> Var {
        let mut v = self.value(a).clone();
        for (mut row, &f) in v.rows_mut().into_iter().zip(&factors) {
            row *= f;
        }
        self.push(v, Op::ScaleRows(a, factors))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let xv = self.value(a);
        let th = xv.mapv(gelu_inner);
        let mut v = th.clone();
        Zip::from(&mut v)
            .and(xv)
            .for_each(|v, &x| *v = 0.5 * x * (1.0 + *v));
        self.push(v, Op::Gelu(a, th))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            row -= mean;
            let var = row.iter().map(|v| v * v).sum::<f64>() / n;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row *= is;
            inv_std.push(is);
        }
        let out = &xhat * &self.value(gamma).row(0) + &self.value(beta).row(0);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Multi-head scaled dot-product self-attention without masking.
    ///
    /// `q`, `k`, `v` hold `batch·seq` rows; each block of `seq` rows attends
    /// only within itself. Columns are split evenly across `heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq: usize, heads: usize) -> Var {
        let (rows, width) = self.shape(q);
        assert_eq!(rows % seq, 0, "rows must be a multiple of seq");
        assert_eq!(width % heads, 0, "width must divide into heads");
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = Array2::zeros((rows, width));
        let mut probs = Vec::with_capacity(rows / seq * heads);
        for b in 0..rows / seq {
            let r = b * seq..(b + 1) * seq;
            for h in 0..heads {
                let c = h * dh..(h + 1) * dh;
                let qb = qv.slice(s![r.clone(), c.clone()]);
                let kb = kv.slice(s![r.clone(), c.clone()]);
                let vb = vv.slice(s![r.clone(), c.clone()]);
                let mut p = qb.dot(&kb.t()) * scale;
                softmax_rows(&mut p);
                out.slice_mut(s![r.clone(), c]).assign(&p.dot(&vb));
                probs.push(p);
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                seq,
                heads,
                probs,
            },
        )
    }

    /// Attention probabilities cached by an attention node, one matrix per
    /// (batch, head) pair in batch-major order.
    pub fn attention_probs(&self, v: Var) -> Option<&[Array2<f64>]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Row-major reinterpretation into `rows × cols`.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = self
            .value(a)
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((rows, cols))
            .expect("reshape must preserve element count");
        self.push(v, Op::Reshape(a))
    }

    /// Output row `i` is row `idx[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let v = self.value(a).select(Axis(0), &idx);
        self.push(v, Op::GatherRows(a, idx))
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("column counts must agree");
        self.push(v, Op::ConcatRows(parts))
    }

    /// Mean of squared entries, as a `1×1` scalar.
    pub fn mean_square(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let m = av.iter().map(|x| x * x).sum::<f64>() / av.len() as f64;
        self.push(Array2::from_elem((1, 1), m), Op::MeanSquare(a))
    }

    /// Mean token cross-entropy of row-wise logits against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Var {
        let mut probs = self.value(logits).clone();
        softmax_rows(&mut probs);
        let n = targets.len() as f64;
        let lv = self.value(logits);
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = lv.row(i);
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        self.push(
            Array2::from_elem((1, 1), loss / n),
            Op::CrossEntropy {
                logits,
                probs,
                targets,
            },
        )
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    /// Back-propagates from the scalar node `root` and returns gradients for
    /// `n_slots` parameter slots. Slots never touched are `None`.
    pub fn backward(&self, root: Var, n_slots: usize) -> Grads {
        let mut grads: Vec<Option<Array2<f64>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Array2::ones(self.shape(root)));
        let mut params: Vec<Option<Array2<f64>>> = (0..n_slots).map(|_| None).collect();

        fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Input => {}
                Op::Param(slot) => match &mut params[*slot] {
                    Some(existing) => *existing += &g,
                    p @ None => *p = Some(g),
                },
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulBT(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, g);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g * *c),
                Op::ScaleRows(a, factors) => {
                    let mut g = g;
                    for (mut row, &f) in g.rows_mut().into_iter().zip(factors) {
                        row *= f;
                    }
                    acc(&mut grads, *a, g);
                }
                Op::Tanh(a) => {
                    let mut g = g;
                    Zip::from(&mut g)
                        .and(&self.nodes[i].value)
                        .for_each(|g, &y| *g *= 1.0 - y * y);
                    acc(&mut grads, *a, g);
                }
                Op::Gelu(a, th) => {
                    let mut g = g;
                    Zip::from(&mut g)
                        .and(self.value(*a))
                        .and(th)
                        .for_each(|g, &x, &th| *g *= gelu_grad(x, th));
                    acc(&mut grads, *a, g);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gamma).row(0).to_owned();
                    let gbeta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let ggamma = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let n = g.ncols() as f64;
                    let mut gx = &g * &gv;
                    for ((mut row, xh), &is) in
                        gx.rows_mut().into_iter().zip(xhat.rows()).zip(inv_std)
                    {
                        let sum_d = row.sum();
                        let sum_dx: f64 = row.iter().zip(xh.iter()).map(|(d, x)| d * x).sum();
                        Zip::from(&mut row).and(&xh).for_each(|d, &xv| {
                            *d = is * (*d - sum_d / n - xv * sum_dx / n);
                        });
                    }
                    acc(&mut grads, *gamma, ggamma);
                    acc(&mut grads, *beta, gbeta);
                    acc(&mut grads, *x, gx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    seq,
                    heads,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let (rows, width) = qv.dim();
                    let dh = width / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut gq = Array2::zeros((rows, width));
                    let mut gk = Array2::zeros((rows, width));
                    let mut gvv = Array2::zeros((rows, width));
                    for b in 0..rows / seq {
                        let r = b * seq..(b + 1) * seq;
                        for h in 0..*heads {
                            let c = h * dh..(h + 1) * dh;
                            let p = &probs[b * heads + h];
                            let go = g.slice(s![r.clone(), c.clone()]);
                            let qb = qv.slice(s![r.clone(), c.clone()]);
                            let kb = kv.slice(s![r.clone(), c.clone()]);
                            let vb = vv.slice(s![r.clone(), c.clone()]);
                            gvv.slice_mut(s![r.clone(), c.clone()])
                                .assign(&p.t().dot(&go));
                            let gp = go.dot(&vb.t());
                            let mut gs = &gp * p;
                            for (mut srow, prow) in gs.rows_mut().into_iter().zip(p.rows()) {
                                let dot = srow.sum();
                                Zip::from(&mut srow)
                                    .and(&prow)
                                    .for_each(|s, &pv| *s -= pv * dot);
                            }
                            gs *= scale;
                            gq.slice_mut(s![r.clone(), c.clone()]).assign(&gs.dot(&kb));
                            gk.slice_mut(s![r.clone(), c]).assign(&gs.t().dot(&qb));
                        }
                    }
                    acc(&mut grads, *q, gq);
                    acc(&mut grads, *k, gk);
                    acc(&mut grads, *v, gvv);
                }
                Op::Reshape(a) => {
                    let shape = self.shape(*a);
                    let g = g
                        .as_standard_layout()
                        .into_owned()
                        .into_shape_with_order(shape)
                        .expect("reshape gradient");
                    acc(&mut grads, *a, g);
                }
                Op::GatherRows(a, idx) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    for (row, &src) in g.rows().into_iter().zip(idx) {
                        let mut dst = ga.row_mut(src);
                        dst += &row;
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let n = self.shape(p).0;
                        acc(&mut grads, p, g.slice(s![start..start + n, ..]).to_owned());
                        start += n;
                    }
                }
                Op::MeanSquare(a) => {
                    let av = self.value(*a);
                    let c = 2.0 * g[[0, 0]] / av.len() as f64;
                    acc(&mut grads, *a, av * c);
                }
                Op::CrossEntropy {
                    logits,
                    probs,
                    targets,
                } => {
                    let c = g[[0, 0]] / targets.len() as f64;
                    let mut gl = probs.clone();
                    for (i, &t) in targets.iter().enumerate() {
                        gl[[i, t]] -= 1.0;
                    }
                    gl *= c;
                    acc(&mut grads, *logits, gl);
                }
            }
        }
        Grads { params }
    }
}
