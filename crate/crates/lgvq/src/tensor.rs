//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every training step builds a fresh [`Tape`]. Nodes own their values as
//! `Vec<f64>`; backward closures capture parent ids plus whatever saved
//! context they need and accumulate into a per-node gradient buffer. All
//! arithmetic is sequential f64 with a fixed evaluation order, so two runs of
//! the same program produce bit-identical values and gradients.
//!
//! Stop-gradient semantics are structural: [`Tape::detach`] creates a node
//! with no parents, and a zero scale factor drops its subtree from backward
//! entirely, so "no gradient" always means exactly zero contribution rather
//! than a small one.

use crate::params::{ParamId, ParamStore};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

type BackFn = Box<dyn Fn(&Tape, &[f64], &mut [Vec<f64>])>;

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    back: Option<BackFn>,
}

pub struct Tape {
    nodes: Vec<Node>,
    /// param id -> node id, so each parameter is bound at most once per tape.
    bindings: Vec<Option<TensorId>>,
}

/// Gradients produced by [`Tape::backward`], indexed by node id.
pub struct Gradients {
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn of(&self, id: TensorId) -> &[f64] {
        &self.grads[id.0]
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), bindings: Vec::new() }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, back: Option<BackFn>) -> TensorId {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node { shape, value, back });
        TensorId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// A node with no gradient history.
    pub fn constant(&mut self, shape: &[usize], value: Vec<f64>) -> TensorId {
        self.push(shape.to_vec(), value, None)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.constant(&[1], vec![v])
    }

    /// Bind a parameter as a leaf node. Repeated binds return the same node,
    /// so gradient contributions from every use accumulate in one place.
    pub fn bind(&mut self, store: &ParamStore, pid: ParamId) -> TensorId {
        if self.bindings.len() < store.len() {
            self.bindings.resize(store.len(), None);
        }
        if let Some(id) = self.bindings[pid.index()] {
            return id;
        }
        let p = store.get(pid);
        let id = self.push(p.shape.clone(), p.value.clone(), None);
        self.bindings[pid.index()] = Some(id);
        id
    }

    /// Node id a parameter is bound to on this tape, if any.
    pub fn binding(&self, pid: ParamId) -> Option<TensorId> {
        self.bindings.get(pid.index()).copied().flatten()
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.zip(a, b, |x, y| x + y, 1.0, 1.0)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.zip(a, b, |x, y| x - y, 1.0, -1.0)
    }

    /// Elementwise add/sub share a backward: constant coefficients per side.
    fn zip(
        &mut self,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        ca: f64,
        cb: f64,
    ) -> TensorId {
        assert_eq!(self.shape(a), self.shape(b), "zip: shape mismatch");
        let value: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let back: BackFn = Box::new(move |_t, g, grads| {
            for (i, &gi) in g.iter().enumerate() {
                grads[a.0][i] += ca * gi;
                grads[b.0][i] += cb * gi;
            }
        });
        self.push(shape, value, Some(back))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let back: BackFn = Box::new(move |t, g, grads| {
            let va = t.value(a);
            let vb = t.value(b);
            for (i, &gi) in g.iter().enumerate() {
                grads[a.0][i] += gi * vb[i];
                grads[b.0][i] += gi * va[i];
            }
        });
        self.push(shape, value, Some(back))
    }

    /// Multiply by a compile-time-known scalar. A factor of exactly 0.0 cuts
    /// the subtree out of backward, which is what makes a zero loss weight
    /// indistinguishable from a disabled loss.
    pub fn scale(&mut self, a: TensorId, factor: f64) -> TensorId {
        let value: Vec<f64> = self.value(a).iter().map(|&x| factor * x).collect();
        let shape = self.shape(a).to_vec();
        let back: BackFn = Box::new(move |_t, g, grads| {
            if factor == 0.0 {
                return;
            }
            for (i, &gi) in g.iter().enumerate() {
                grads[a.0][i] += factor * gi;
            }
        });
        self.push(shape, value, Some(back))
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let value: Vec<f64> = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        let back: BackFn = Box::new(move |t, g, grads| {
            let va = t.value(a);
            for (i, &gi) in g.iter().enumerate() {
                if va[i] > 0.0 {
                    grads[a.0][i] += gi;
                }
            }
        });
        self.push(shape, value, Some(back))
    }

    /// Exact GELU, x * Phi(x).
    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let value: Vec<f64> = self.value(a).iter().map(|&x| x * std_normal_cdf(x)).collect();
        let shape = self.shape(a).to_vec();
        let back: BackFn = Box::new(move |t, g, grads| {
            let va = t.value(a);
            for (i, &gi) in g.iter().enumerate() {
                let x = va[i];
                let d = std_normal_cdf(x) + x * std_normal_pdf(x);
                grads[a.0][i] += gi * d;
            }
        });
        self.push(shape, value, Some(back))
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.value(a).iter().sum();
        let back: BackFn = Box::new(move |_t, g, grads| {
            let gi = g[0];
            for v in grads[a.0].iter_mut() {
                *v += gi;
            }
        });
        self.push(vec![1], vec![s], Some(back))
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let n = self.value(a).len() as f64;
        let s: f64 = self.value(a).iter().sum::<f64>() / n;
        let back: BackFn = Box::new(move |_t, g, grads| {
            let gi = g[0] / n;
            for v in grads[a.0].iter_mut() {
                *v += gi;
            }
        });
        self.push(vec![1], vec![s], Some(back))
    }

    /// mean((a - b)^2) over every element.
    pub fn mse(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    // ---- stop-gradient ----

    /// Forward identity, no gradient history.
    pub fn detach(&mut self, a: TensorId) -> TensorId {
        let value = self.value(a).to_vec();
        let shape = self.shape(a).to_vec();
        self.push(shape, value, None)
    }

    /// Straight-through estimator: forward value is `quantized`, the backward
    /// gradient is copied to `features` unchanged and never reaches
    /// `quantized`'s history.
    pub fn straight_through(&mut self, features: TensorId, quantized: TensorId) -> TensorId {
        assert_eq!(
            self.shape(features),
            self.shape(quantized),
            "straight_through: shape mismatch"
        );
        let value = self.value(quantized).to_vec();
        let shape = self.shape(features).to_vec();
        let back: BackFn = Box::new(move |_t, g, grads| {
            for (i, &gi) in g.iter().enumerate() {
                grads[features.0][i] += gi;
            }
        });
        self.push(shape, value, Some(back))
    }

    // ---- linear algebra (2-D) ----

    /// `a [m,k] @ b [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (m, k) = dims2(self.shape(a));
        let (kb, n) = dims2(self.shape(b));
        assert_eq!(k, kb, "matmul: inner dims {k} vs {kb}");
        let va = self.value(a);
        let vb = self.value(b);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let x = va[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let row = &vb[p * n..(p + 1) * n];
                let o = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    o[j] += x * row[j];
                }
            }
        }
        let back: BackFn = Box::new(move |t, g, grads| {
            let va = t.value(a);
            let vb = t.value(b);
            // dA = G @ B^T
            for i in 0..m {
                for p in 0..k {
                    let mut acc = 0.0;
                    let grow = &g[i * n..(i + 1) * n];
                    let brow = &vb[p * n..(p + 1) * n];
                    for j in 0..n {
                        acc += grow[j] * brow[j];
                    }
                    grads[a.0][i * k + p] += acc;
                }
            }
            // dB = A^T @ G
            for p in 0..k {
                for i in 0..m {
                    let x = va[i * k + p];
                    if x == 0.0 {
                        continue;
                    }
                    let grow = &g[i * n..(i + 1) * n];
                    let brow = &mut grads[b.0][p * n..(p + 1) * n];
                    for j in 0..n {
                        brow[j] += x * grow[j];
                    }
                }
            }
        });
        self.push(vec![m, n], out, Some(back))
    }

    /// `a [m,k] @ b^T` where `b` is `[n,k]`, giving `[m,n]`.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (m, k) = dims2(self.shape(a));
        let (n, kb) = dims2(self.shape(b));
        assert_eq!(k, kb, "matmul_nt: inner dims {k} vs {kb}");
        let va = self.value(a);
        let vb = self.value(b);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &va[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &vb[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for p in 0..k {
                    acc += arow[p] * brow[p];
                }
                out[i * n + j] = acc;
            }
        }
        let back: BackFn = Box::new(move |t, g, grads| {
            let va = t.value(a);
            let vb = t.value(b);
            for i in 0..m {
                for j in 0..n {
                    let gij = g[i * n + j];
                    if gij == 0.0 {
                        continue;
                    }
                    let brow = &vb[j * k..(j + 1) * k];
                    let arow = &va[i * k..(i + 1) * k];
                    for p in 0..k {
                        grads[a.0][i * k + p] += gij * brow[p];
                        grads[b.0][j * k + p] += gij * arow[p];
                    }
                }
            }
        });
        self.push(vec![m, n], out, Some(back))
    }

    /// Broadcast-add a bias vector `[n]` over the rows of `[m,n]`.
    pub fn add_bias(&mut self, x: TensorId, bias: TensorId) -> TensorId {
        let (m, n) = dims2(self.shape(x));
        assert_eq!(self.shape(bias), &[n], "add_bias: bias shape");
        let vb = self.value(bias).to_vec();
        let value: Vec<f64> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + vb[i % n])
            .collect();
        let back: BackFn = Box::new(move |_t, g, grads| {
            for i in 0..m {
                for j in 0..n {
                    let gi = g[i * n + j];
                    grads[x.0][i * n + j] += gi;
                    grads[bias.0][j] += gi;
                }
            }
        });
        self.push(vec![m, n], value, Some(back))
    }

    // ---- row/column wiring ----

    /// Gather rows of a `[R,d]` node by index; also serves as embedding lookup.
    pub fn rows(&mut self, x: TensorId, idx: &[usize]) -> TensorId {
        let (r, d) = dims2(self.shape(x));
        let vx = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            assert!(i < r, "rows: index {i} out of {r}");
            out.extend_from_slice(&vx[i * d..(i + 1) * d]);
        }
        let idx = idx.to_vec();
        let back: BackFn = Box::new(move |_t, g, grads| {
            for (pos, &i) in idx.iter().enumerate() {
                let src = &g[pos * d..(pos + 1) * d];
                let dst = &mut grads[x.0][i * d..(i + 1) * d];
                for j in 0..d {
                    dst[j] += src[j];
                }
            }
        });
        let n = out.len() / d;
        self.push(vec![n, d], out, Some(back))
    }

    /// Concatenate 2-D nodes along axis 0. All parts must share the column count.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty());
        let (_, d) = dims2(self.shape(parts[0]));
        let mut value = Vec::new();
        let mut spans = Vec::with_capacity(parts.len());
        for &p in parts {
            let (rp, dp) = dims2(self.shape(p));
            assert_eq!(dp, d, "concat_rows: column mismatch");
            spans.push((p, rp));
            value.extend_from_slice(self.value(p));
        }
        let rows: usize = spans.iter().map(|&(_, r)| r).sum();
        let back: BackFn = Box::new(move |_t, g, grads| {
            let mut off = 0;
            for &(p, rp) in &spans {
                let len = rp * d;
                let src = &g[off..off + len];
                let dst = &mut grads[p.0][..len];
                for j in 0..len {
                    dst[j] += src[j];
                }
                off += len;
            }
        });
        self.push(vec![rows, d], value, Some(back))
    }

    /// Column slice `[m, n] -> [m, hi-lo]`.
    pub fn cols(&mut self, x: TensorId, lo: usize, hi: usize) -> TensorId {
        let (m, n) = dims2(self.shape(x));
        assert!(lo < hi && hi <= n, "cols: bad range {lo}..{hi} of {n}");
        let w = hi - lo;
        let vx = self.value(x);
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&vx[i * n + lo..i * n + hi]);
        }
        let back: BackFn = Box::new(move |_t, g, grads| {
            for i in 0..m {
                for j in 0..w {
                    grads[x.0][i * n + lo + j] += g[i * w + j];
                }
            }
        });
        self.push(vec![m, w], out, Some(back))
    }

    /// Concatenate 2-D nodes along axis 1. All parts must share the row count.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty());
        let (m, _) = dims2(self.shape(parts[0]));
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let (mp, w) = dims2(self.shape(p));
            assert_eq!(mp, m, "concat_cols: row mismatch");
            widths.push((p, w));
            total += w;
        }
        let mut value = vec![0.0; m * total];
        {
            let mut off = 0;
            for &(p, w) in &widths {
                let vp = self.value(p);
                for i in 0..m {
                    value[i * total + off..i * total + off + w]
                        .copy_from_slice(&vp[i * w..(i + 1) * w]);
                }
                off += w;
            }
        }
        let back: BackFn = Box::new(move |_t, g, grads| {
            let mut off = 0;
            for &(p, w) in &widths {
                for i in 0..m {
                    for j in 0..w {
                        grads[p.0][i * w + j] += g[i * total + off + j];
                    }
                }
                off += w;
            }
        });
        self.push(vec![m, total], value, Some(back))
    }

    /// Reinterpret the buffer under a new shape (element count preserved).
    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> TensorId {
        assert_eq!(numel(shape), self.value(x).len(), "reshape: element count");
        let value = self.value(x).to_vec();
        let back: BackFn = Box::new(move |_t, g, grads| {
            for (i, &gi) in g.iter().enumerate() {
                grads[x.0][i] += gi;
            }
        });
        self.push(shape.to_vec(), value, Some(back))
    }

    /// `[n, c, h, w] -> [n*h*w, c]`: one row per spatial position.
    pub fn chw_to_rows(&mut self, x: TensorId) -> TensorId {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4, "chw_to_rows: expected 4-D");
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let vx = self.value(x);
        let mut out = vec![0.0; n * c * h * w];
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        let src = ((b * c + ch) * h + y) * w + xx;
                        let dst = ((b * h + y) * w + xx) * c + ch;
                        out[dst] = vx[src];
                    }
                }
            }
        }
        let back: BackFn = Box::new(move |_t, g, grads| {
            for b in 0..n {
                for ch in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            let src = ((b * c + ch) * h + y) * w + xx;
                            let dst = ((b * h + y) * w + xx) * c + ch;
                            grads[x.0][src] += g[dst];
                        }
                    }
                }
            }
        });
        self.push(vec![n * h * w, c], out, Some(back))
    }

    /// Inverse of [`Tape::chw_to_rows`].
    pub fn rows_to_chw(&mut self, x: TensorId, n: usize, c: usize, h: usize, w: usize) -> TensorId {
        let (rows, d) = dims2(self.shape(x));
        assert_eq!(rows, n * h * w, "rows_to_chw: row count");
        assert_eq!(d, c, "rows_to_chw: feature dim");
        let vx = self.value(x);
        let mut out = vec![0.0; n * c * h * w];
        for b in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    for ch in 0..c {
                        let src = ((b * h + y) * w + xx) * c + ch;
                        let dst = ((b * c + ch) * h + y) * w + xx;
                        out[dst] = vx[src];
                    }
                }
            }
        }
        let back: BackFn = Box::new(move |_t, g, grads| {
            for b in 0..n {
                for y in 0..h {
                    for xx in 0..w {
                        for ch in 0..c {
                            let src = ((b * h + y) * w + xx) * c + ch;
                            let dst = ((b * c + ch) * h + y) * w + xx;
                            grads[x.0][src] += g[dst];
                        }
                    }
                }
            }
        });
        self.push(vec![n, c, h, w], out, Some(back))
    }

    // ---- rowwise nonlinear ----

    /// Numerically stable softmax over the last axis of `[m,n]`.
    pub fn softmax_rows(&mut self, x: TensorId) -> TensorId {
        let (m, n) = dims2(self.shape(x));
        let vx = self.value(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &vx[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                out[i * n + j] = e;
                z += e;
            }
            for j in 0..n {
                out[i * n + j] /= z;
            }
        }
        let id = self.push(vec![m, n], out, None);
        // backward needs y itself; capture from the freshly created node.
        let y = self.value(id).to_vec();
        let back: BackFn = Box::new(move |_t, g, grads| {
            for i in 0..m {
                let yr = &y[i * n..(i + 1) * n];
                let gr = &g[i * n..(i + 1) * n];
                let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for j in 0..n {
                    grads[x.0][i * n + j] += yr[j] * (gr[j] - dot);
                }
            }
        });
        self.nodes[id.0].back = Some(back);
        id
    }

    /// log(sum(exp(row))) per row of `[m,n]`, stable.
    pub fn logsumexp_rows(&mut self, x: TensorId) -> TensorId {
        let (m, n) = dims2(self.shape(x));
        let vx = self.value(x);
        let mut out = vec![0.0; m];
        for i in 0..m {
            let row = &vx[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|&v| (v - mx).exp()).sum();
            out[i] = mx + s.ln();
        }
        let lse = out.clone();
        let back: BackFn = Box::new(move |t, g, grads| {
            let vx = t.value(x);
            for i in 0..m {
                let gi = g[i];
                if gi == 0.0 {
                    continue;
                }
                for j in 0..n {
                    grads[x.0][i * n + j] += gi * (vx[i * n + j] - lse[i]).exp();
                }
            }
        });
        self.push(vec![m], out, Some(back))
    }

    /// Diagonal of a square `[m,m]` node as `[m]`.
    pub fn diag(&mut self, x: TensorId) -> TensorId {
        let (m, n) = dims2(self.shape(x));
        assert_eq!(m, n, "diag: square required");
        let vx = self.value(x);
        let out: Vec<f64> = (0..m).map(|i| vx[i * m + i]).collect();
        let back: BackFn = Box::new(move |_t, g, grads| {
            for i in 0..m {
                grads[x.0][i * m + i] += g[i];
            }
        });
        self.push(vec![m], out, Some(back))
    }

    /// L2-normalize every row of `[m,n]`. Zero-norm rows violate the contract.
    pub fn normalize_rows(&mut self, x: TensorId) -> TensorId {
        let (m, n) = dims2(self.shape(x));
        let vx = self.value(x);
        let mut out = vec![0.0; m * n];
        let mut norms = vec![0.0; m];
        for i in 0..m {
            let row = &vx[i * n..(i + 1) * n];
            let norm = row.iter().map(|&v| v * v).sum::<f64>().sqrt();
            assert!(norm > 0.0, "normalize_rows: zero-norm row {i}");
            norms[i] = norm;
            for j in 0..n {
                out[i * n + j] = row[j] / norm;
            }
        }
        let y = out.clone();
        let back: BackFn = Box::new(move |_t, g, grads| {
            for i in 0..m {
                let yr = &y[i * n..(i + 1) * n];
                let gr = &g[i * n..(i + 1) * n];
                let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for j in 0..n {
                    grads[x.0][i * n + j] += (gr[j] - yr[j] * dot) / norms[i];
                }
            }
        });
        self.push(vec![m, n], out, Some(back))
    }

    /// Subtract the per-column mean within each consecutive `block`-row group
    /// of `[m,n]`. Centering a feature grid per image strips the component
    /// every position shares, so downstream comparisons see what differs
    /// within the image rather than its overall tone.
    pub fn center_rows_blockwise(&mut self, x: TensorId, block: usize) -> TensorId {
        let (m, n) = dims2(self.shape(x));
        assert!(block > 0 && m % block == 0, "center_rows_blockwise: {m} rows, block {block}");
        let vx = self.value(x);
        let mut out = vx.to_vec();
        for b in (0..m).step_by(block) {
            for j in 0..n {
                let mean = (0..block).map(|i| vx[(b + i) * n + j]).sum::<f64>() / block as f64;
                for i in 0..block {
                    out[(b + i) * n + j] -= mean;
                }
            }
        }
        let back: BackFn = Box::new(move |_t, g, grads| {
            for b in (0..m).step_by(block) {
                for j in 0..n {
                    let mean = (0..block).map(|i| g[(b + i) * n + j]).sum::<f64>() / block as f64;
                    for i in 0..block {
                        grads[x.0][(b + i) * n + j] += g[(b + i) * n + j] - mean;
                    }
                }
            }
        });
        self.push(vec![m, n], out, Some(back))
    }

    /// L2-normalize every row of `[m,n]`, passing exactly-zero rows through
    /// unchanged (with zero gradient) instead of asserting. Suits feature
    /// maps, where an all-black input region can legitimately produce a zero
    /// row. Non-finite rows stay non-finite so divergence is still visible
    /// downstream.
    pub fn normalize_rows_safe(&mut self, x: TensorId) -> TensorId {
        let (m, n) = dims2(self.shape(x));
        let vx = self.value(x);
        let mut out = vec![0.0; m * n];
        let mut norms = vec![0.0; m];
        for i in 0..m {
            let row = &vx[i * n..(i + 1) * n];
            let norm = row.iter().map(|&v| v * v).sum::<f64>().sqrt();
            norms[i] = norm;
            if norm != 0.0 {
                let div = if norm.is_finite() { norm } else { f64::NAN };
                for j in 0..n {
                    out[i * n + j] = row[j] / div;
                }
            }
        }
        let y = out.clone();
        let back: BackFn = Box::new(move |_t, g, grads| {
            for i in 0..m {
                if norms[i] == 0.0 || !norms[i].is_finite() {
                    continue;
                }
                let yr = &y[i * n..(i + 1) * n];
                let gr = &g[i * n..(i + 1) * n];
                let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for j in 0..n {
                    grads[x.0][i * n + j] += (gr[j] - yr[j] * dot) / norms[i];
                }
            }
        });
        self.push(vec![m, n], out, Some(back))
    }

    /// Per-row dot product of two `[m,n]` nodes -> `[m]`.
    pub fn rowwise_dot(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (m, n) = dims2(self.shape(a));
        assert_eq!(self.shape(a), self.shape(b), "rowwise_dot: shape mismatch");
        let va = self.value(a);
        let vb = self.value(b);
        let out: Vec<f64> = (0..m)
            .map(|i| {
                va[i * n..(i + 1) * n]
                    .iter()
                    .zip(&vb[i * n..(i + 1) * n])
                    .map(|(&x, &y)| x * y)
                    .sum()
            })
            .collect();
        let back: BackFn = Box::new(move |t, g, grads| {
            let va = t.value(a);
            let vb = t.value(b);
            for i in 0..m {
                let gi = g[i];
                if gi == 0.0 {
                    continue;
                }
                for j in 0..n {
                    grads[a.0][i * n + j] += gi * vb[i * n + j];
                    grads[b.0][i * n + j] += gi * va[i * n + j];
                }
            }
        });
        self.push(vec![m], out, Some(back))
    }

    /// Layer norm over the last axis with learnable gain/shift.
    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId) -> TensorId {
        const EPS: f64 = 1e-5;
        let (m, n) = dims2(self.shape(x));
        assert_eq!(self.shape(gamma), &[n]);
        assert_eq!(self.shape(beta), &[n]);
        let vx = self.value(x);
        let vg = self.value(gamma);
        let vb = self.value(beta);
        let mut out = vec![0.0; m * n];
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        for i in 0..m {
            let row = &vx[i * n..(i + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let xh = (row[j] - mu) * is;
                xhat[i * n + j] = xh;
                out[i * n + j] = xh * vg[j] + vb[j];
            }
        }
        let back: BackFn = Box::new(move |t, g, grads| {
            let vg = t.value(gamma);
            for i in 0..m {
                let gr = &g[i * n..(i + 1) * n];
                let xh = &xhat[i * n..(i + 1) * n];
                let mut sum_dxhat = 0.0;
                let mut sum_dxhat_xhat = 0.0;
                for j in 0..n {
                    let dxhat = gr[j] * vg[j];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xh[j];
                    grads[gamma.0][j] += gr[j] * xh[j];
                    grads[beta.0][j] += gr[j];
                }
                let nf = n as f64;
                for j in 0..n {
                    let dxhat = gr[j] * vg[j];
                    grads[x.0][i * n + j] +=
                        inv_std[i] * (dxhat - sum_dxhat / nf - xh[j] * sum_dxhat_xhat / nf);
                }
            }
        });
        self.push(vec![m, n], out, Some(back))
    }

    /// Mean cross-entropy of `[m,V]` logits against integer targets.
    pub fn cross_entropy_mean(&mut self, logits: TensorId, targets: &[usize]) -> TensorId {
        let (m, v) = dims2(self.shape(logits));
        assert_eq!(targets.len(), m, "cross_entropy_mean: target count");
        let vx = self.value(logits);
        let mut probs = vec![0.0; m * v];
        let mut loss = 0.0;
        for i in 0..m {
            let row = &vx[i * v..(i + 1) * v];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..v {
                let e = (row[j] - mx).exp();
                probs[i * v + j] = e;
                z += e;
            }
            for j in 0..v {
                probs[i * v + j] /= z;
            }
            assert!(targets[i] < v, "cross_entropy_mean: target id {} out of {v}", targets[i]);
            loss -= row[targets[i]] - mx - z.ln(); // log-softmax at target
        }
        loss /= m as f64;
        let targets = targets.to_vec();
        let back: BackFn = Box::new(move |_t, g, grads| {
            let gi = g[0] / m as f64;
            for i in 0..m {
                for j in 0..v {
                    let onehot = if j == targets[i] { 1.0 } else { 0.0 };
                    grads[logits.0][i * v + j] += gi * (probs[i * v + j] - onehot);
                }
            }
        });
        self.push(vec![1], vec![loss], Some(back))
    }

    // ---- convolutions ----

    /// 2-D convolution, NCHW layout. `w` is `[co, ci, kh, kw]`.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
        stride: usize,
        pad: usize,
    ) -> TensorId {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d: input must be 4-D");
        assert_eq!(ws.len(), 4, "conv2d: weight must be 4-D");
        let (n, ci, h, wdt) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, ciw, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(ci, ciw, "conv2d: channel mismatch");
        assert_eq!(self.shape(b), &[co], "conv2d: bias shape");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wdt + 2 * pad - kw) / stride + 1;
        let vx = self.value(x);
        let vw = self.value(w);
        let vb = self.value(b);
        let mut out = vec![0.0; n * co * ho * wo];
        for bn in 0..n {
            for oc in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = vb[oc];
                        for ic in 0..ci {
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let xrow = ((bn * ci + ic) * h + iy as usize) * wdt;
                                let wrow = ((oc * ci + ic) * kh + ky) * kw;
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= wdt as isize {
                                        continue;
                                    }
                                    acc += vx[xrow + ix as usize] * vw[wrow + kx];
                                }
                            }
                        }
                        out[((bn * co + oc) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        let back: BackFn = Box::new(move |t, g, grads| {
            let vx = t.value(x);
            let vw = t.value(w);
            for bn in 0..n {
                for oc in 0..co {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let gi = g[((bn * co + oc) * ho + oy) * wo + ox];
                            if gi == 0.0 {
                                continue;
                            }
                            grads[b.0][oc] += gi;
                            for ic in 0..ci {
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let xrow = ((bn * ci + ic) * h + iy as usize) * wdt;
                                    let wrow = ((oc * ci + ic) * kh + ky) * kw;
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix < 0 || ix >= wdt as isize {
                                            continue;
                                        }
                                        grads[w.0][wrow + kx] += gi * vx[xrow + ix as usize];
                                        grads[x.0][xrow + ix as usize] += gi * vw[wrow + kx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
        self.push(vec![n, co, ho, wo], out, Some(back))
    }

    /// Transposed 2-D convolution, NCHW. `w` is `[ci, co, kh, kw]`;
    /// output is `(h-1)*stride - 2*pad + kh` per spatial axis.
    pub fn conv_transpose2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
        stride: usize,
        pad: usize,
    ) -> TensorId {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv_transpose2d: input must be 4-D");
        let (n, ci, h, wdt) = (xs[0], xs[1], xs[2], xs[3]);
        let (ciw, co, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(ci, ciw, "conv_transpose2d: channel mismatch");
        assert_eq!(self.shape(b), &[co], "conv_transpose2d: bias shape");
        let ho = (h - 1) * stride + kh - 2 * pad;
        let wo = (wdt - 1) * stride + kw - 2 * pad;
        let vx = self.value(x);
        let vw = self.value(w);
        let vb = self.value(b);
        let mut out = vec![0.0; n * co * ho * wo];
        for bn in 0..n {
            for oc in 0..co {
                let base = (bn * co + oc) * ho * wo;
                for i in 0..ho * wo {
                    out[base + i] = vb[oc];
                }
            }
            for ic in 0..ci {
                for iy in 0..h {
                    for ix in 0..wdt {
                        let v = vx[((bn * ci + ic) * h + iy) * wdt + ix];
                        if v == 0.0 {
                            continue;
                        }
                        for oc in 0..co {
                            let obase = (bn * co + oc) * ho;
                            let wbase = ((ic * co + oc) * kh) * kw;
                            for ky in 0..kh {
                                let oy = (iy * stride + ky) as isize - pad as isize;
                                if oy < 0 || oy >= ho as isize {
                                    continue;
                                }
                                let orow = (obase + oy as usize) * wo;
                                for kx in 0..kw {
                                    let ox = (ix * stride + kx) as isize - pad as isize;
                                    if ox < 0 || ox >= wo as isize {
                                        continue;
                                    }
                                    out[orow + ox as usize] += v * vw[wbase + ky * kw + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
        let back: BackFn = Box::new(move |t, g, grads| {
            let vx = t.value(x);
            let vw = t.value(w);
            for bn in 0..n {
                for oc in 0..co {
                    let base = (bn * co + oc) * ho * wo;
                    for i in 0..ho * wo {
                        grads[b.0][oc] += g[base + i];
                    }
                }
                for ic in 0..ci {
                    for iy in 0..h {
                        for ix in 0..wdt {
                            let xidx = ((bn * ci + ic) * h + iy) * wdt + ix;
                            let v = vx[xidx];
                            for oc in 0..co {
                                let obase = (bn * co + oc) * ho;
                                let wbase = ((ic * co + oc) * kh) * kw;
                                for ky in 0..kh {
                                    let oy = (iy * stride + ky) as isize - pad as isize;
                                    if oy < 0 || oy >= ho as isize {
                                        continue;
                                    }
                                    let orow = (obase + oy as usize) * wo;
                                    for kx in 0..kw {
                                        let ox = (ix * stride + kx) as isize - pad as isize;
                                        if ox < 0 || ox >= wo as isize {
                                            continue;
                                        }
                                        let gi = g[orow + ox as usize];
                                        grads[x.0][xidx] += gi * vw[wbase + ky * kw + kx];
                                        grads[w.0][wbase + ky * kw + kx] += gi * v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
        self.push(vec![n, co, ho, wo], out, Some(back))
    }

    // ---- backward ----

    /// Reverse pass from a scalar loss. Returns per-node gradients.
    pub fn backward(&self, loss: TensorId) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward: loss must be scalar");
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.value.len()])
            .collect();
        grads[loss.0][0] = 1.0;
        for i in (0..=loss.0).rev() {
            if let Some(back) = &self.nodes[i].back {
                let g = std::mem::take(&mut grads[i]);
                if g.iter().any(|&v| v != 0.0) {
                    back(self, &g, &mut grads);
                }
                grads[i] = g;
            }
        }
        Gradients { grads }
    }
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    assert_eq!(shape.len(), 2, "expected 2-D, got {shape:?}");
    (shape[0], shape[1])
}

pub(crate) fn std_normal_pdf(x: f64) -> f64 {
    (-(x * x) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub(crate) fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2))
}
