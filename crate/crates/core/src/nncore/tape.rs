//! Recorded forward pass with forward-mode (JVP) and reverse-mode (VJP) sweeps.

use std::sync::Arc;

use super::activation::Activation;
use super::conv::ConvGeom;
use crate::scalar::{gemm, Mat, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

enum Op<F> {
    Input,
    Param(usize),
    /// `x [.., i] * w[o, i]^T`
    Linear(Var, Var),
    /// `x [b, P, ci]`, `w [co, k, ci]`
    Conv(Var, Var, Arc<ConvGeom>),
    Act(Var, Activation),
    Add(Var, Var),
    Scale(Var, F),
    /// `[a, b, c] -> [a, c]`, mean over the middle axis
    MeanMid(Var, [usize; 3]),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_s: Vec<F>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        tokens: usize,
        heads: usize,
        probs: Vec<F>,
    },
    Reshape(Var),
}

struct Node<F> {
    op: Op<F>,
    value: Tensor<F>,
}

pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Tape { nodes: Vec::new() }
    }
}

fn last(t: &Tensor<impl Scalar>) -> usize {
    *t.shape.last().unwrap_or(&1)
}

fn zip_add<F: Scalar>(a: &mut Option<Tensor<F>>, b: Tensor<F>) {
    match a {
        Some(t) => t.add_assign(&b),
        None => *a = Some(b),
    }
}

fn softmax_rows<F: Scalar>(s: &mut [F], n: usize) {
    for row in s.chunks_mut(n) {
        let m = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
        let mut z = F::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
}

/// `p * (g - rowsum(p * g))` for each row: the softmax Jacobian applied to `g`.
fn softmax_jac<F: Scalar>(p: &[F], g: &[F], n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); p.len()];
    for ((o, pr), gr) in out.chunks_mut(n).zip(p.chunks(n)).zip(g.chunks(n)) {
        let s: F = pr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((ov, &pv), &gv) in o.iter_mut().zip(pr).zip(gr) {
            *ov = pv * (gv - s);
        }
    }
    out
}

/// Strided views of one head inside a `[b * N, d]` buffer.
struct HeadView {
    off: usize,
    n: usize,
    dh: usize,
    d: usize,
}

impl HeadView {
    fn gather<F: Scalar>(&self, x: &[F]) -> Vec<F> {
        let mut out = Vec::with_capacity(self.n * self.dh);
        for t in 0..self.n {
            out.extend_from_slice(&x[self.off + t * self.d..][..self.dh]);
        }
        out
    }

    fn scatter_add<F: Scalar>(&self, src: &[F], x: &mut [F]) {
        for t in 0..self.n {
            for (d, &s) in x[self.off + t * self.d..][..self.dh]
                .iter_mut()
                .zip(&src[t * self.dh..])
            {
                *d += s;
            }
        }
    }
}

fn heads(
    batch: usize,
    tokens: usize,
    heads: usize,
    d: usize,
) -> impl Iterator<Item = (usize, HeadView)> {
    let dh = d / heads;
    (0..batch).flat_map(move |b| {
        (0..heads).map(move |h| {
            (
                b * heads + h,
                HeadView {
                    off: b * tokens * d + h * dh,
                    n: tokens,
                    dh,
                    d,
                },
            )
        })
    })
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op<F>, value: Tensor<F>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.push(Op::Input, t)
    }

    pub fn param(&mut self, index: usize, t: Tensor<F>) -> Var {
        self.push(Op::Param(index), t)
    }

    fn linear_fwd(x: &Tensor<F>, w: &Tensor<F>) -> Tensor<F> {
        let (o, i) = (w.shape[0], w.shape[1]);
        let rows = x.len() / i;
        let mut shape = x.shape.clone();
        *shape.last_mut().unwrap() = o;
        let mut out = Tensor::zeros(&shape);
        gemm(
            Mat::new(&x.data, rows, i),
            Mat::new(&w.data, o, i).t(),
            &mut out.data,
            false,
        );
        out
    }

    pub fn linear(&mut self, x: Var, w: Var) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        assert_eq!(last(xv), wv.shape[1], "linear input width");
        let y = Self::linear_fwd(xv, wv);
        self.push(Op::Linear(x, w), y)
    }

    fn conv_fwd(x: &Tensor<F>, w: &Tensor<F>, g: &ConvGeom) -> Tensor<F> {
        let (co, ci) = (w.shape[0], w.shape[2]);
        let col = g.im2col(&x.data, ci);
        let rows = col.len() / (g.k * ci);
        let mut out = Tensor::zeros(&[x.shape[0], g.sites, co]);
        gemm(
            Mat::new(&col, rows, g.k * ci),
            Mat::new(&w.data, co, g.k * ci).t(),
            &mut out.data,
            false,
        );
        out
    }

    pub fn conv(&mut self, x: Var, w: Var, geom: Arc<ConvGeom>) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        assert_eq!(xv.shape.len(), 3, "conv input is [b, P, c]");
        assert_eq!(
            (xv.shape[1], xv.shape[2]),
            (geom.sites, wv.shape[2]),
            "conv geometry"
        );
        assert_eq!(wv.shape[1], geom.k, "conv kernel taps");
        let y = Self::conv_fwd(xv, wv, &geom);
        self.push(Op::Conv(x, w, geom), y)
    }

    pub fn act(&mut self, x: Var, a: Activation) -> Var {
        if a == Activation::Identity {
            return x;
        }
        let y = self.value(x).map(|v| a.apply(v));
        self.push(Op::Act(x, a), y)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut y = self.value(a).clone();
        assert_eq!(y.len(), self.value(b).len(), "add sizes");
        y.add_assign(self.value(b));
        self.push(Op::Add(a, b), y)
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let y = self.value(x).scale(c);
        self.push(Op::Scale(x, c), y)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let y = self.value(x).clone().reshape(shape).expect("reshape size");
        self.push(Op::Reshape(x), y)
    }

    fn mean_mid_fwd(x: &[F], [a, b, c]: [usize; 3]) -> Vec<F> {
        let mut y = vec![F::zero(); a * c];
        let inv = F::one() / F::c(b as f64);
        for i in 0..a {
            let yr = &mut y[i * c..(i + 1) * c];
            for j in 0..b {
                for (o, &v) in yr.iter_mut().zip(&x[(i * b + j) * c..][..c]) {
                    *o += v;
                }
            }
            yr.iter_mut().for_each(|v| *v *= inv);
        }
        y
    }

    /// Mean over the middle axis of a `[a, b, c]` view.
    pub fn mean_mid(&mut self, x: Var, dims: [usize; 3]) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), dims.iter().product::<usize>(), "mean_mid dims");
        let y = Tensor {
            shape: vec![dims[0], dims[2]],
            data: Self::mean_mid_fwd(&xv.data, dims),
        };
        self.push(Op::MeanMid(x, dims), y)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Var {
        let xv = self.value(x);
        let d = last(xv);
        let (g, bt) = (&self.value(gamma).data, &self.value(beta).data);
        let rows = xv.len() / d;
        let mut xhat = vec![F::zero(); xv.len()];
        let mut inv_s = vec![F::zero(); rows];
        let mut y = Tensor::zeros(&xv.shape);
        let dn = F::c(d as f64);
        for r in 0..rows {
            let xr = &xv.data[r * d..(r + 1) * d];
            let mu = xr.iter().copied().sum::<F>() / dn;
            let var = xr.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() / dn;
            let is = F::one() / (var + eps).sqrt();
            inv_s[r] = is;
            for j in 0..d {
                let h = (xr[j] - mu) * is;
                xhat[r * d + j] = h;
                y.data[r * d + j] = g[j] * h + bt[j];
            }
        }
        self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_s,
            },
            y,
        )
    }

    /// Multi-head softmax attention; `q`, `k`, `v` are `[batch * tokens, d]`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        tokens: usize,
        nheads: usize,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = last(qv);
        assert_eq!(qv.len(), batch * tokens * d, "attention shape");
        let dh = d / nheads;
        let sc = F::one() / F::c(dh as f64).sqrt();
        let mut probs = vec![F::zero(); batch * nheads * tokens * tokens];
        let mut out = Tensor::zeros(&qv.shape);
        for (bh, hv) in heads(batch, tokens, nheads, d) {
            let (qh, kh, vh) = (
                hv.gather(&qv.data),
                hv.gather(&kv.data),
                hv.gather(&vv.data),
            );
            let p = &mut probs[bh * tokens * tokens..][..tokens * tokens];
            gemm(
                Mat::new(&qh, tokens, dh),
                Mat::new(&kh, tokens, dh).t(),
                p,
                false,
            );
            p.iter_mut().for_each(|s| *s *= sc);
            softmax_rows(p, tokens);
            let mut o = vec![F::zero(); tokens * dh];
            gemm(
                Mat::new(p, tokens, tokens),
                Mat::new(&vh, tokens, dh),
                &mut o,
                false,
            );
            hv.scatter_add(&o, &mut out.data);
        }
        self.push(
            Op::Attention {
                q,
                k,
                v,
                batch,
                tokens,
                heads: nheads,
                probs,
            },
            out,
        )
    }

    /// Forward-mode sweep. `param_dir[i]` is the tangent of parameter `i`;
    /// `input_dir` seeds tangents on input nodes. Returns node tangents
    /// (`None` means identically zero).
    pub fn jvp(
        &self,
        param_dir: Option<&[Tensor<F>]>,
        input_dir: &[(Var, &Tensor<F>)],
    ) -> Vec<Option<Tensor<F>>> {
        let mut tan: Vec<Option<Tensor<F>>> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let t = match &node.op {
                Op::Input => input_dir
                    .iter()
                    .find(|(v, _)| v.0 == i)
                    .map(|(_, t)| (*t).clone()),
                Op::Param(p) => param_dir
                    .and_then(|d| d.get(*p))
                    .filter(|t| t.data.iter().any(|v| !v.is_zero()))
                    .cloned(),
                Op::Linear(x, w) => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (o, n) = (wv.shape[0], wv.shape[1]);
                    let rows = xv.len() / n;
                    let mut out: Option<Tensor<F>> = None;
                    if let Some(dx) = &tan[x.0] {
                        out = Some(Self::linear_fwd(dx, wv));
                    }
                    if let Some(dw) = &tan[w.0] {
                        let y = out.get_or_insert_with(|| Tensor::zeros(&node.value.shape));
                        gemm(
                            Mat::new(&xv.data, rows, n),
                            Mat::new(&dw.data, o, n).t(),
                            &mut y.data,
                            true,
                        );
                    }
                    out
                }
                Op::Conv(x, w, g) => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (co, ci) = (wv.shape[0], wv.shape[2]);
                    let mut out: Option<Tensor<F>> = None;
                    if let Some(dx) = &tan[x.0] {
                        out = Some(Self::conv_fwd(dx, wv, g));
                    }
                    if let Some(dw) = &tan[w.0] {
                        let col = g.im2col(&xv.data, ci);
                        let rows = col.len() / (g.k * ci);
                        let y = out.get_or_insert_with(|| Tensor::zeros(&node.value.shape));
                        gemm(
                            Mat::new(&col, rows, g.k * ci),
                            Mat::new(&dw.data, co, g.k * ci).t(),
                            &mut y.data,
                            true,
                        );
                    }
                    out
                }
                Op::Act(x, a) => tan[x.0].as_ref().map(|dx| {
                    let xv = self.value(*x);
                    let mut y = dx.clone();
                    for (o, &z) in y.data.iter_mut().zip(&xv.data) {
                        *o *= a.deriv(z);
                    }
                    y
                }),
                Op::Add(a, b) => match (&tan[a.0], &tan[b.0]) {
                    (None, None) => None,
                    (Some(t), None) | (None, Some(t)) => Some(t.clone()),
                    (Some(s), Some(t)) => {
                        let mut y = s.clone();
                        y.add_assign(t);
                        Some(y)
                    }
                },
                Op::Scale(x, c) => tan[x.0].as_ref().map(|t| t.scale(*c)),
                Op::Reshape(x) => tan[x.0].as_ref().map(|t| Tensor {
                    shape: node.value.shape.clone(),
                    data: t.data.clone(),
                }),
                Op::MeanMid(x, dims) => tan[x.0].as_ref().map(|t| Tensor {
                    shape: node.value.shape.clone(),
                    data: Self::mean_mid_fwd(&t.data, *dims),
                }),
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_s,
                } => {
                    let g = &self.value(*gamma).data;
                    let d = g.len();
                    let dn = F::c(d as f64);
                    let mut out: Option<Tensor<F>> = None;
                    if let Some(dx) = &tan[x.0] {
                        let mut y = Tensor::zeros(&node.value.shape);
                        for (r, &is) in inv_s.iter().enumerate() {
                            let xr = &dx.data[r * d..(r + 1) * d];
                            let hr = &xhat[r * d..(r + 1) * d];
                            let m = xr.iter().copied().sum::<F>() / dn;
                            let mh = xr.iter().zip(hr).map(|(&a, &b)| a * b).sum::<F>() / dn;
                            for j in 0..d {
                                y.data[r * d + j] = g[j] * is * (xr[j] - m - hr[j] * mh);
                            }
                        }
                        out = Some(y);
                    }
                    if let Some(dg) = &tan[gamma.0] {
                        let y = out.get_or_insert_with(|| Tensor::zeros(&node.value.shape));
                        for (i, v) in y.data.iter_mut().enumerate() {
                            *v += dg.data[i % d] * xhat[i];
                        }
                    }
                    if let Some(db) = &tan[beta.0] {
                        let y = out.get_or_insert_with(|| Tensor::zeros(&node.value.shape));
                        for (i, v) in y.data.iter_mut().enumerate() {
                            *v += db.data[i % d];
                        }
                    }
                    out
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    batch,
                    tokens,
                    heads: nh,
                    probs,
                } => {
                    let (dq, dk, dv) = (&tan[q.0], &tan[k.0], &tan[v.0]);
                    if dq.is_none() && dk.is_none() && dv.is_none() {
                        None
                    } else {
                        let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                        let d = last(qv);
                        let dh = d / nh;
                        let n = *tokens;
                        let sc = F::one() / F::c(dh as f64).sqrt();
                        let mut out = Tensor::zeros(&node.value.shape);
                        for (bh, hv) in heads(*batch, n, *nh, d) {
                            let p = &probs[bh * n * n..][..n * n];
                            let mut o = vec![F::zero(); n * dh];
                            if dq.is_some() || dk.is_some() {
                                let mut ds = vec![F::zero(); n * n];
                                if let Some(dq) = dq {
                                    let kh = hv.gather(&kv.data);
                                    gemm(
                                        Mat::new(&hv.gather(&dq.data), n, dh),
                                        Mat::new(&kh, n, dh).t(),
                                        &mut ds,
                                        true,
                                    );
                                }
                                if let Some(dk) = dk {
                                    let qh = hv.gather(&qv.data);
                                    gemm(
                                        Mat::new(&qh, n, dh),
                                        Mat::new(&hv.gather(&dk.data), n, dh).t(),
                                        &mut ds,
                                        true,
                                    );
                                }
                                ds.iter_mut().for_each(|s| *s *= sc);
                                let dp = softmax_jac(p, &ds, n);
                                gemm(
                                    Mat::new(&dp, n, n),
                                    Mat::new(&hv.gather(&vv.data), n, dh),
                                    &mut o,
                                    true,
                                );
                            }
                            if let Some(dv) = dv {
                                gemm(
                                    Mat::new(p, n, n),
                                    Mat::new(&hv.gather(&dv.data), n, dh),
                                    &mut o,
                                    true,
                                );
                            }
                            hv.scatter_add(&o, &mut out.data);
                        }
                        Some(out)
                    }
                }
            };
            tan.push(t);
        }
        tan
    }

    /// Reverse-mode sweep from `seeds` (adjoints of chosen nodes).
    pub fn vjp(&self, seeds: &[(Var, &Tensor<F>)], n_params: usize) -> Grads<F> {
        let mut adj: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, t) in seeds {
            assert_eq!(t.len(), self.value(*v).len(), "seed size");
            zip_add(&mut adj[v.0], (*t).clone());
        }
        let mut params: Vec<Option<Tensor<F>>> = (0..n_params).map(|_| None).collect();
        let mut inputs = Vec::new();
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => inputs.push((Var(i), g)),
                Op::Param(p) => zip_add(&mut params[*p], g),
                Op::Linear(x, w) => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (o, n) = (wv.shape[0], wv.shape[1]);
                    let rows = xv.len() / n;
                    let mut dx = Tensor::zeros(&xv.shape);
                    gemm(
                        Mat::new(&g.data, rows, o),
                        Mat::new(&wv.data, o, n),
                        &mut dx.data,
                        false,
                    );
                    let mut dw = Tensor::zeros(&wv.shape);
                    gemm(
                        Mat::new(&g.data, rows, o).t(),
                        Mat::new(&xv.data, rows, n),
                        &mut dw.data,
                        false,
                    );
                    zip_add(&mut adj[x.0], dx);
                    zip_add(&mut adj[w.0], dw);
                }
                Op::Conv(x, w, geom) => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (co, ci) = (wv.shape[0], wv.shape[2]);
                    let kc = geom.k * ci;
                    let col = geom.im2col(&xv.data, ci);
                    let rows = col.len() / kc;
                    let mut dw = Tensor::zeros(&wv.shape);
                    gemm(
                        Mat::new(&g.data, rows, co).t(),
                        Mat::new(&col, rows, kc),
                        &mut dw.data,
                        false,
                    );
                    let mut dcol = vec![F::zero(); col.len()];
                    gemm(
                        Mat::new(&g.data, rows, co),
                        Mat::new(&wv.data, co, kc),
                        &mut dcol,
                        false,
                    );
                    let mut dx = Tensor::zeros(&xv.shape);
                    geom.col2im_add(&dcol, ci, &mut dx.data);
                    zip_add(&mut adj[x.0], dx);
                    zip_add(&mut adj[w.0], dw);
                }
                Op::Act(x, a) => {
                    let xv = self.value(*x);
                    let mut dx = g;
                    for (o, &z) in dx.data.iter_mut().zip(&xv.data) {
                        *o *= a.deriv(z);
                    }
                    dx.shape = xv.shape.clone();
                    zip_add(&mut adj[x.0], dx);
                }
                Op::Add(a, b) => {
                    let sa = self.value(*a).shape.clone();
                    let sb = self.value(*b).shape.clone();
                    zip_add(
                        &mut adj[a.0],
                        Tensor {
                            shape: sa,
                            data: g.data.clone(),
                        },
                    );
                    zip_add(
                        &mut adj[b.0],
                        Tensor {
                            shape: sb,
                            data: g.data,
                        },
                    );
                }
                Op::Scale(x, c) => zip_add(&mut adj[x.0], g.scale(*c)),
                Op::Reshape(x) => {
                    let s = self.value(*x).shape.clone();
                    zip_add(
                        &mut adj[x.0],
                        Tensor {
                            shape: s,
                            data: g.data,
                        },
                    );
                }
                Op::MeanMid(x, [a, b, c]) => {
                    let inv = F::one() / F::c(*b as f64);
                    let mut dx = Tensor::zeros(&self.value(*x).shape);
                    for i in 0..*a {
                        for j in 0..*b {
                            for k in 0..*c {
                                dx.data[(i * b + j) * c + k] = g.data[i * c + k] * inv;
                            }
                        }
                    }
                    zip_add(&mut adj[x.0], dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_s,
                } => {
                    let gm = &self.value(*gamma).data;
                    let d = gm.len();
                    let dn = F::c(d as f64);
                    let mut dx = Tensor::zeros(&self.value(*x).shape);
                    let mut dg = Tensor::zeros(&[d]);
                    let mut db = Tensor::zeros(&[d]);
                    for (r, &is) in inv_s.iter().enumerate() {
                        let gr = &g.data[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let u: Vec<F> = gr.iter().zip(gm).map(|(&a, &b)| a * b).collect();
                        let m = u.iter().copied().sum::<F>() / dn;
                        let mh = u.iter().zip(hr).map(|(&a, &b)| a * b).sum::<F>() / dn;
                        for j in 0..d {
                            dx.data[r * d + j] = is * (u[j] - m - hr[j] * mh);
                            dg.data[j] += gr[j] * hr[j];
                            db.data[j] += gr[j];
                        }
                    }
                    zip_add(&mut adj[x.0], dx);
                    zip_add(&mut adj[gamma.0], dg);
                    zip_add(&mut adj[beta.0], db);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    batch,
                    tokens,
                    heads: nh,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let d = last(qv);
                    let dh = d / nh;
                    let n = *tokens;
                    let sc = F::one() / F::c(dh as f64).sqrt();
                    let mut dq = Tensor::zeros(&qv.shape);
                    let mut dk = Tensor::zeros(&kv.shape);
                    let mut dv = Tensor::zeros(&vv.shape);
                    for (bh, hv) in heads(*batch, n, *nh, d) {
                        let p = &probs[bh * n * n..][..n * n];
                        let go = hv.gather(&g.data);
                        let (qh, kh, vh) = (
                            hv.gather(&qv.data),
                            hv.gather(&kv.data),
                            hv.gather(&vv.data),
                        );
                        let mut dvh = vec![F::zero(); n * dh];
                        gemm(Mat::new(p, n, n).t(), Mat::new(&go, n, dh), &mut dvh, false);
                        let mut dp = vec![F::zero(); n * n];
                        gemm(
                            Mat::new(&go, n, dh),
                            Mat::new(&vh, n, dh).t(),
                            &mut dp,
                            false,
                        );
                        let mut ds = softmax_jac(p, &dp, n);
                        ds.iter_mut().for_each(|s| *s *= sc);
                        let mut dqh = vec![F::zero(); n * dh];
                        gemm(Mat::new(&ds, n, n), Mat::new(&kh, n, dh), &mut dqh, false);
                        let mut dkh = vec![F::zero(); n * dh];
                        gemm(
                            Mat::new(&ds, n, n).t(),
                            Mat::new(&qh, n, dh),
                            &mut dkh,
                            false,
                        );
                        hv.scatter_add(&dqh, &mut dq.data);
                        hv.scatter_add(&dkh, &mut dk.data);
                        hv.scatter_add(&dvh, &mut dv.data);
                    }
                    zip_add(&mut adj[q.0], dq);
                    zip_add(&mut adj[k.0], dk);
                    zip_add(&mut adj[v.0], dv);
                }
            }
        }
        Grads { params, inputs }
    }
}

pub struct Grads<F> {
    /// Parameter adjoints; `None` where the parameter is unreachable.
    pub params: Vec<Option<Tensor<F>>>,
    pub inputs: Vec<(Var, Tensor<F>)>,
}
