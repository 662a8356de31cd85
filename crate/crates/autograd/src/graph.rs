use std::sync::Arc;

use crate::matrix::{gemm, Matrix};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type BackFn = Box<dyn Fn(&Matrix, &mut Sink<'_>)>;

struct Node {
    value: Arc<Matrix>,
    needs_grad: bool,
    back: Option<BackFn>,
}

/// Accumulates gradient contributions into parent slots during the
/// backward sweep.
pub struct Sink<'a> {
    grads: &'a mut [Option<Matrix>],
    shapes: &'a [(usize, usize)],
}

impl Sink<'_> {
    /// Runs `f` on the (lazily zeroed) gradient buffer of `v`.
    fn with(&mut self, v: Var, f: impl FnOnce(&mut Matrix)) {
        let slot = &mut self.grads[v.0];
        if slot.is_none() {
            let (r, c) = self.shapes[v.0];
            *slot = Some(Matrix::zeros(r, c));
        }
        f(slot.as_mut().expect("slot just filled"));
    }

    fn add(&mut self, v: Var, m: &Matrix) {
        self.with(v, |g| g.add_assign(m));
    }
}

/// Gradients of a scalar output with respect to every recorded value.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// `None` when the value does not influence the output.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// A dynamic tape. Operations append nodes; [`Graph::backward`] sweeps them
/// in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    shapes: Vec<(usize, usize)>,
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

    fn push(&mut self, value: Matrix, needs_grad: bool, back: Option<BackFn>) -> Var {
        self.push_arc(Arc::new(value), needs_grad, back)
    }

    fn push_arc(&mut self, value: Arc<Matrix>, needs_grad: bool, back: Option<BackFn>) -> Var {
        self.shapes.push(value.shape());
        self.nodes.push(Node {
            value,
            needs_grad,
            back: if needs_grad { back } else { None },
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, true, None)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, false, None)
    }

    /// [`Graph::param`] over a shared buffer, without copying it.
    pub fn param_arc(&mut self, value: Arc<Matrix>) -> Var {
        self.push_arc(value, true, None)
    }

    /// [`Graph::constant`] over a shared buffer, without copying it.
    pub fn constant_arc(&mut self, value: Arc<Matrix>) -> Var {
        self.push_arc(value, false, None)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn arc(&self, v: Var) -> Arc<Matrix> {
        Arc::clone(&self.nodes[v.0].value)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.shapes[v.0]
    }

    /// Reverse sweep from a `1 × 1` output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.shape(output), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Matrix::scalar(1.0));
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            let Some(back) = node.back.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            {
                let (before, _) = grads.split_at_mut(i);
                let mut sink = Sink {
                    grads: before,
                    shapes: &self.shapes,
                };
                back(&g, &mut sink);
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    // ---- linear algebra ----

    /// `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.arc(a), self.arc(b));
        let out = va.matmul(&vb);
        let (na, nb) = (self.needs(a), self.needs(b));
        self.push(
            out,
            na || nb,
            Some(Box::new(move |g, s| {
                if na {
                    s.with(a, |ga| gemm(false, g, true, &vb, 1.0, ga));
                }
                if nb {
                    s.with(b, |gb| gemm(true, &va, false, g, 1.0, gb));
                }
            })),
        )
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.arc(a), self.arc(b));
        let out = va.matmul_nt(&vb);
        let (na, nb) = (self.needs(a), self.needs(b));
        self.push(
            out,
            na || nb,
            Some(Box::new(move |g, s| {
                if na {
                    s.with(a, |ga| gemm(false, g, false, &vb, 1.0, ga));
                }
                if nb {
                    s.with(b, |gb| gemm(true, g, false, &va, 1.0, gb));
                }
            })),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let na = self.needs(a);
        self.push(
            out,
            na,
            Some(Box::new(move |g, s| s.add(a, &g.transpose()))),
        )
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let (r0, c0) = self.shape(a);
        let out = self.value(a).clone().reshaped(rows, cols);
        let na = self.needs(a);
        self.push(
            out,
            na,
            Some(Box::new(move |g, s| {
                s.with(a, |ga| {
                    debug_assert_eq!(ga.shape(), (r0, c0));
                    for (x, y) in ga.data_mut().iter_mut().zip(g.data()) {
                        *x += y;
                    }
                })
            })),
        )
    }

    // ---- elementwise binary ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let mut out = va.clone();
        out.add_assign(vb);
        let (na, nb) = (self.needs(a), self.needs(b));
        self.push(
            out,
            na || nb,
            Some(Box::new(move |g, s| {
                if na {
                    s.add(a, g);
                }
                if nb {
                    s.add(b, g);
                }
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let mut out = va.clone();
        for (x, y) in out.data_mut().iter_mut().zip(vb.data()) {
            *x -= y;
        }
        let (na, nb) = (self.needs(a), self.needs(b));
        self.push(
            out,
            na || nb,
            Some(Box::new(move |g, s| {
                if na {
                    s.add(a, g);
                }
                if nb {
                    s.with(b, |gb| {
                        for (x, y) in gb.data_mut().iter_mut().zip(g.data()) {
                            *x -= y;
                        }
                    });
                }
            })),
        )
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.arc(a), self.arc(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Matrix::from_vec(va.rows(), va.cols(), data);
        let (na, nb) = (self.needs(a), self.needs(b));
        self.push(
            out,
            na || nb,
            Some(Box::new(move |g, s| {
                if na {
                    s.with(a, |ga| {
                        for ((x, gy), y) in ga.data_mut().iter_mut().zip(g.data()).zip(vb.data()) {
                            *x += gy * y;
                        }
                    });
                }
                if nb {
                    s.with(b, |gb| {
                        for ((x, gy), y) in gb.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                            *x += gy * y;
                        }
                    });
                }
            })),
        )
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.rows(), 1, "add_row expects a row vector");
        assert_eq!(va.cols(), vr.cols(), "add_row width mismatch");
        let mut out = va.clone();
        let n = va.cols();
        for r in 0..out.rows() {
            for (x, y) in out.row_mut(r).iter_mut().zip(vr.data()) {
                *x += y;
            }
        }
        let (na, nr) = (self.needs(a), self.needs(row));
        self.push(
            out,
            na || nr,
            Some(Box::new(move |g, s| {
                if na {
                    s.add(a, g);
                }
                if nr {
                    s.with(row, |gr| {
                        for chunk in g.data().chunks_exact(n) {
                            for (x, y) in gr.data_mut().iter_mut().zip(chunk) {
                                *x += y;
                            }
                        }
                    });
                }
            })),
        )
    }

    /// Multiplies every row of `a` elementwise by a `1 × n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.arc(a), self.arc(row));
        assert_eq!(vr.rows(), 1, "mul_row expects a row vector");
        assert_eq!(va.cols(), vr.cols(), "mul_row width mismatch");
        let n = va.cols();
        let mut out = (*va).clone();
        for r in 0..out.rows() {
            for (x, y) in out.row_mut(r).iter_mut().zip(vr.data()) {
                *x *= y;
            }
        }
        let (na, nr) = (self.needs(a), self.needs(row));
        self.push(
            out,
            na || nr,
            Some(Box::new(move |g, s| {
                if na {
                    s.with(a, |ga| {
                        for (gchunk, achunk) in g.data().chunks_exact(n).zip(ga.data_mut().chunks_exact_mut(n)) {
                            for ((x, gy), y) in achunk.iter_mut().zip(gchunk).zip(vr.data()) {
                                *x += gy * y;
                            }
                        }
                    });
                }
                if nr {
                    s.with(row, |gr| {
                        for (gchunk, xchunk) in g.data().chunks_exact(n).zip(va.data().chunks_exact(n)) {
                            for ((x, gy), y) in gr.data_mut().iter_mut().zip(gchunk).zip(xchunk) {
                                *x += gy * y;
                            }
                        }
                    });
                }
            })),
        )
    }

    /// Multiplies `a` by a `1 × 1` value.
    pub fn mul_scalar(&mut self, a: Var, scalar: Var) -> Var {
        assert_eq!(self.shape(scalar), (1, 1), "mul_scalar expects a 1x1 value");
        let (va, vs) = (self.arc(a), self.value(scalar).get(0, 0));
        let out = va.map(|x| x * vs);
        let (na, ns) = (self.needs(a), self.needs(scalar));
        self.push(
            out,
            na || ns,
            Some(Box::new(move |g, s| {
                if na {
                    s.with(a, |ga| {
                        for (x, gy) in ga.data_mut().iter_mut().zip(g.data()) {
                            *x += gy * vs;
                        }
                    });
                }
                if ns {
                    let dot: f64 = g.data().iter().zip(va.data()).map(|(x, y)| x * y).sum();
                    s.with(scalar, |gs| gs.data_mut()[0] += dot);
                }
            })),
        )
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let na = self.needs(a);
        self.push(
            out,
            na,
            Some(Box::new(move |g, s| {
                s.with(a, |ga| {
                    for (x, gy) in ga.data_mut().iter_mut().zip(g.data()) {
                        *x += gy * c;
                    }
                })
            })),
        )
    }

    /// Adds a constant to every entry.
    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        let na = self.needs(a);
        self.push(out, na, Some(Box::new(move |g, s| s.add(a, g))))
    }

    // ---- elementwise unary ----

    fn unary(&mut self, a: Var, f: fn(f64) -> f64, df: fn(f64, f64) -> f64) -> Var {
        let va = self.arc(a);
        let out = Arc::new(va.map(f));
        let vo = Arc::clone(&out);
        let na = self.needs(a);
        self.push_arc(
            out,
            na,
            Some(Box::new(move |g, s| {
                s.with(a, |ga| {
                    for (((x, gy), xv), yv) in ga
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(va.data())
                        .zip(vo.data())
                    {
                        *x += gy * df(*xv, *yv);
                    }
                })
            })),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, |x, _| sigmoid(x))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, |_, y| y)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / x, |_, y| -y * y)
    }

    /// `max(x, floor)`; the gradient passes only where `x > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let va = self.arc(a);
        let out = va.map(|x| x.max(floor));
        let na = self.needs(a);
        self.push(
            out,
            na,
            Some(Box::new(move |g, s| {
                s.with(a, |ga| {
                    for ((x, gy), xv) in ga.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        if *xv > floor {
                            *x += gy;
                        }
                    }
                })
            })),
        )
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Matrix::scalar(self.value(a).sum());
        let na = self.needs(a);
        self.push(
            out,
            na,
            Some(Box::new(move |g, s| {
                let gy = g.get(0, 0);
                s.with(a, |ga| ga.data_mut().iter_mut().for_each(|x| *x += gy));
            })),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let total = self.sum(a);
        self.scale(total, 1.0 / n)
    }

    /// Row sums as an `m × 1` column.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (m, n) = va.shape();
        let out = Matrix::from_vec(m, 1, (0..m).map(|r| va.row(r).iter().sum()).collect());
        let na = self.needs(a);
        self.push(
            out,
            na,
            Some(Box::new(move |g, s| {
                s.with(a, |ga| {
                    for r in 0..m {
                        let gy = g.data()[r];
                        ga.row_mut(r)[..n].iter_mut().for_each(|x| *x += gy);
                    }
                })
            })),
        )
    }

    /// Column means as a `1 × n` row.
    pub fn mean_cols(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (m, n) = va.shape();
        let mut acc = vec![0.0; n];
        for r in 0..m {
            for (x, y) in acc.iter_mut().zip(va.row(r)) {
                *x += y;
            }
        }
        let inv = 1.0 / m as f64;
        acc.iter_mut().for_each(|x| *x *= inv);
        let out = Matrix::row_vector(acc);
        let na = self.needs(a);
        self.push(
            out,
            na,
            Some(Box::new(move |g, s| {
                s.with(a, |ga| {
                    for r in 0..m {
                        for (x, gy) in ga.row_mut(r).iter_mut().zip(g.data()) {
                            *x += gy * inv;
                        }
                    }
                })
            })),
        )
    }

    // ---- row-wise normalizations ----

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (m, n) = va.shape();
        let mut out = va.clone();
        for r in 0..m {
            softmax_in_place(out.row_mut(r));
        }
        let out = Arc::new(out);
        let y = Arc::clone(&out);
        let na = self.needs(a);
        self.push_arc(
            out,
            na,
            Some(Box::new(move |g, s| {
                s.with(a, |ga| {
                    for r in 0..m {
                        let (gr, yr) = (g.row(r), y.row(r));
                        let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                        for ((x, gy), yv) in ga.row_mut(r)[..n].iter_mut().zip(gr).zip(yr) {
                            *x += yv * (gy - dot);
                        }
                    }
                })
            })),
        )
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (m, n) = va.shape();
        let mut out = va.clone();
        let mut probs = va.clone();
        for r in 0..m {
            let row = out.row_mut(r);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
            for (p, v) in probs.row_mut(r).iter_mut().zip(out.row(r)) {
                *p = v.exp();
            }
        }
        let na = self.needs(a);
        self.push(
            out,
            na,
            Some(Box::new(move |g, s| {
                s.with(a, |ga| {
                    for r in 0..m {
                        let gr = g.row(r);
                        let total: f64 = gr.iter().sum();
                        for ((x, gy), p) in ga.row_mut(r)[..n].iter_mut().zip(gr).zip(probs.row(r)) {
                            *x += gy - p * total;
                        }
                    }
                })
            })),
        )
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let va = self.value(a);
        let (m, n) = va.shape();
        let mut out = va.clone();
        let mut inv_std = vec![0.0; m];
        for r in 0..m {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
        }
        let out = Arc::new(out);
        let xhat = Arc::clone(&out);
        let na = self.needs(a);
        self.push_arc(
            out,
            na,
            Some(Box::new(move |g, s| {
                s.with(a, |ga| {
                    let nf = n as f64;
                    for r in 0..m {
                        let (gr, xr) = (g.row(r), xhat.row(r));
                        let gm = gr.iter().sum::<f64>() / nf;
                        let gx = gr.iter().zip(xr).map(|(p, q)| p * q).sum::<f64>() / nf;
                        for ((x, gy), xh) in ga.row_mut(r)[..n].iter_mut().zip(gr).zip(xr) {
                            *x += inv_std[r] * (gy - gm - xh * gx);
                        }
                    }
                })
            })),
        )
    }

    /// Divides each row by its Euclidean norm. Zero rows map to zero rows
    /// and pass no gradient.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (m, n) = va.shape();
        let mut out = va.clone();
        let mut norms = vec![0.0; m];
        for r in 0..m {
            let row = out.row_mut(r);
            let nr = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms[r] = nr;
            if nr > 0.0 {
                row.iter_mut().for_each(|v| *v /= nr);
            }
        }
        let out = Arc::new(out);
        let y = Arc::clone(&out);
        let na = self.needs(a);
        self.push_arc(
            out,
            na,
            Some(Box::new(move |g, s| {
                s.with(a, |ga| {
                    for r in 0..m {
                        if norms[r] == 0.0 {
                            continue;
                        }
                        let (gr, yr) = (g.row(r), y.row(r));
                        let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                        for ((x, gy), yv) in ga.row_mut(r)[..n].iter_mut().zip(gr).zip(yr) {
                            *x += (gy - yv * dot) / norms[r];
                        }
                    }
                })
            })),
        )
    }

    // ---- structural ----

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let m = self.shape(parts[0]).0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.shape(p).1).collect();
        let total: usize = widths.iter().sum();
        let mut out = Matrix::zeros(m, total);
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let vp = self.value(p);
            assert_eq!(vp.rows(), m, "concat_cols row mismatch");
            for r in 0..m {
                out.row_mut(r)[offset..offset + w].copy_from_slice(vp.row(r));
            }
            offset += w;
        }
        let needs: Vec<bool> = parts.iter().map(|&p| self.needs(p)).collect();
        let parts = parts.to_vec();
        self.push(
            out,
            needs.iter().any(|&b| b),
            Some(Box::new(move |g, s| {
                let mut offset = 0;
                for ((&p, &w), &np) in parts.iter().zip(&widths).zip(&needs) {
                    if np {
                        s.with(p, |gp| {
                            for r in 0..m {
                                for (x, y) in gp.row_mut(r).iter_mut().zip(&g.row(r)[offset..offset + w]) {
                                    *x += y;
                                }
                            }
                        });
                    }
                    offset += w;
                }
            })),
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let n = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut heights = Vec::with_capacity(parts.len());
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.cols(), n, "concat_rows column mismatch");
            heights.push(vp.rows());
            data.extend_from_slice(vp.data());
        }
        let m: usize = heights.iter().sum();
        let out = Matrix::from_vec(m, n, data);
        let needs: Vec<bool> = parts.iter().map(|&p| self.needs(p)).collect();
        let parts = parts.to_vec();
        self.push(
            out,
            needs.iter().any(|&b| b),
            Some(Box::new(move |g, s| {
                let mut offset = 0;
                for ((&p, &h), &np) in parts.iter().zip(&heights).zip(&needs) {
                    if np {
                        let chunk = &g.data()[offset * n..(offset + h) * n];
                        s.with(p, |gp| {
                            for (x, y) in gp.data_mut().iter_mut().zip(chunk) {
                                *x += y;
                            }
                        });
                    }
                    offset += h;
                }
            })),
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let va = self.value(a);
        let m = va.rows();
        assert!(start + width <= va.cols(), "slice_cols out of range");
        let mut out = Matrix::zeros(m, width);
        for r in 0..m {
            out.row_mut(r).copy_from_slice(&va.row(r)[start..start + width]);
        }
        let na = self.needs(a);
        self.push(
            out,
            na,
            Some(Box::new(move |g, s| {
                s.with(a, |ga| {
                    for r in 0..m {
                        for (x, y) in ga.row_mut(r)[start..start + width].iter_mut().zip(g.row(r)) {
                            *x += y;
                        }
                    }
                })
            })),
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, height: usize) -> Var {
        let va = self.value(a);
        let n = va.cols();
        assert!(start + height <= va.rows(), "slice_rows out of range");
        let out = Matrix::from_vec(height, n, va.data()[start * n..(start + height) * n].to_vec());
        let na = self.needs(a);
        self.push(
            out,
            na,
            Some(Box::new(move |g, s| {
                s.with(a, |ga| {
                    for (x, y) in ga.data_mut()[start * n..(start + height) * n].iter_mut().zip(g.data()) {
                        *x += y;
                    }
                })
            })),
        )
    }

    /// `out.data[i] = a.data[index[i]]`, reshaped to `rows × cols`.
    /// Indices may repeat (broadcast); the backward pass scatter-adds.
    pub fn gather(&mut self, a: Var, index: Arc<[usize]>, rows: usize, cols: usize) -> Var {
        assert_eq!(index.len(), rows * cols, "gather index length mismatch");
        let va = self.value(a);
        let src = va.data();
        let out = Matrix::from_vec(rows, cols, index.iter().map(|&i| src[i]).collect());
        let na = self.needs(a);
        self.push(
            out,
            na,
            Some(Box::new(move |g, s| {
                s.with(a, |ga| {
                    let dst = ga.data_mut();
                    for (&i, gy) in index.iter().zip(g.data()) {
                        dst[i] += gy;
                    }
                })
            })),
        )
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

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}
