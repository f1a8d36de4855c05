//! Flat f64 tensors and a reverse-mode autodiff tape.
//!
//! Everything downstream (the toy DiT, the decoder, the mock verifier, the
//! physics losses) builds its forward pass on [`Tape`] so gradients with
//! respect to latents and adapter parameters come out of one `backward` call.
//! Sizes here are desk-scale; clarity beats throughput.

use crate::error::{Error, Result};

/// Row-major dense tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data mismatch");
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as 2-D (rows, cols).
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "expected 2-D tensor");
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "expected 2-D tensor");
        self.shape[1]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackwardFn = Box<dyn Fn(&Tensor, &mut GradSink)>;

struct Node {
    value: Tensor,
    backward: Option<BackwardFn>,
}

/// Gradient accumulator indexed by [`Var`].
pub struct GradSink {
    grads: Vec<Option<Tensor>>,
}

impl GradSink {
    fn add(&mut self, var: Var, grad: Tensor) {
        match &mut self.grads[var.0] {
            Some(g) => {
                debug_assert_eq!(g.data.len(), grad.data.len());
                for (a, b) in g.data.iter_mut().zip(grad.data) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(grad),
        }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    /// Gradient of the root with respect to `var`; zeros if the root does not
    /// depend on it.
    pub fn get(&self, var: Var, shape_of: &Tensor) -> Tensor {
        self.grads[var.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(shape_of.shape.clone()))
    }

    pub fn try_get(&self, var: Var) -> Option<&Tensor> {
        self.grads[var.0].as_ref()
    }
}

/// Reverse-mode autodiff tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    assert_eq!(k, k2, "matmul inner dims");
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += av * b.data[p * n + j];
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

fn matmul_nt_raw(a: &Tensor, b: &Tensor) -> Tensor {
    // a [m,k] @ b [n,k]^T -> [m,n]
    let (m, k) = (a.rows(), a.cols());
    let (n, k2) = (b.rows(), b.cols());
    assert_eq!(k, k2, "matmul_nt inner dims");
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.data[i * k + p] * b.data[j * k + p];
            }
            out[i * n + j] = s;
        }
    }
    Tensor::new(vec![m, n], out)
}

fn transpose_raw(a: &Tensor) -> Tensor {
    let (m, n) = (a.rows(), a.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, backward: Option<BackwardFn>) -> Var {
        self.nodes.push(Node { value, backward });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Differentiable input (parameter or data we want gradients for).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, None)
    }

    /// Constant; gradients never flow into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, None)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape, tb.shape, "add shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let shape = ta.shape.clone();
        self.push(
            Tensor::new(shape, data),
            Some(Box::new(move |g, sink| {
                sink.add(a, g.clone());
                sink.add(b, g.clone());
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape, tb.shape, "sub shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x - y).collect();
        let shape = ta.shape.clone();
        self.push(
            Tensor::new(shape, data),
            Some(Box::new(move |g, sink| {
                sink.add(a, g.clone());
                let neg = Tensor::new(g.shape.clone(), g.data.iter().map(|v| -v).collect());
                sink.add(b, neg);
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.nodes[a.0].value.clone(), self.nodes[b.0].value.clone());
        assert_eq!(ta.shape, tb.shape, "mul shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let shape = ta.shape.clone();
        self.push(
            Tensor::new(shape, data),
            Some(Box::new(move |g, sink| {
                let ga = Tensor::new(
                    g.shape.clone(),
                    g.data.iter().zip(&tb.data).map(|(gv, y)| gv * y).collect(),
                );
                let gb = Tensor::new(
                    g.shape.clone(),
                    g.data.iter().zip(&ta.data).map(|(gv, x)| gv * x).collect(),
                );
                sink.add(a, ga);
                sink.add(b, gb);
            })),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = &self.nodes[a.0].value;
        let data = ta.data.iter().map(|x| x * c).collect();
        let shape = ta.shape.clone();
        self.push(
            Tensor::new(shape, data),
            Some(Box::new(move |g, sink| {
                let ga = Tensor::new(g.shape.clone(), g.data.iter().map(|v| v * c).collect());
                sink.add(a, ga);
            })),
        )
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let ta = &self.nodes[a.0].value;
        let data = ta.data.iter().map(|x| x + c).collect();
        let shape = ta.shape.clone();
        self.push(
            Tensor::new(shape, data),
            Some(Box::new(move |g, sink| sink.add(a, g.clone()))),
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.nodes[a.0].value.clone(), self.nodes[b.0].value.clone());
        let out = matmul_raw(&ta, &tb);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                // C = A B: dA = G B^T, dB = A^T G
                sink.add(a, matmul_nt_raw(g, &tb));
                sink.add(b, matmul_raw(&transpose_raw(&ta), g));
            })),
        )
    }

    /// `a @ b^T` without materializing the transpose on the tape.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.nodes[a.0].value.clone(), self.nodes[b.0].value.clone());
        let out = matmul_nt_raw(&ta, &tb);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                // C = A B^T: dA = G B, dB = G^T A
                sink.add(a, matmul_raw(g, &tb));
                sink.add(b, matmul_raw(&transpose_raw(g), &ta));
            })),
        )
    }

    /// Broadcast-add a row vector `r` [n] to every row of `a` [m,n].
    pub fn add_row(&mut self, a: Var, r: Var) -> Var {
        let (ta, tr) = (&self.nodes[a.0].value, &self.nodes[r.0].value);
        let (m, n) = (ta.rows(), ta.cols());
        assert_eq!(tr.len(), n, "add_row width mismatch");
        let mut data = ta.data.clone();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += tr.data[j];
            }
        }
        self.push(
            Tensor::new(vec![m, n], data),
            Some(Box::new(move |g, sink| {
                sink.add(a, g.clone());
                let mut gr = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        gr[j] += g.data[i * n + j];
                    }
                }
                sink.add(r, Tensor::new(vec![n], gr));
            })),
        )
    }

    /// Row-wise softmax over a 2-D tensor, with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let (m, n) = (ta.rows(), ta.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &ta.data[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                out[i * n + j] = e;
                denom += e;
            }
            for j in 0..n {
                out[i * n + j] /= denom;
            }
        }
        let y = Tensor::new(vec![m, n], out);
        let y_cl = y.clone();
        self.push(
            y,
            Some(Box::new(move |g, sink| {
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    let yr = &y_cl.data[i * n..(i + 1) * n];
                    let gr = &g.data[i * n..(i + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..n {
                        gx[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                sink.add(a, Tensor::new(vec![m, n], gx));
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let data: Vec<f64> = ta.data.iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect();
        let shape = ta.shape.clone();
        let y = Tensor::new(shape, data);
        let y_cl = y.clone();
        self.push(
            y,
            Some(Box::new(move |g, sink| {
                let gx = Tensor::new(
                    g.shape.clone(),
                    g.data
                        .iter()
                        .zip(&y_cl.data)
                        .map(|(gv, y)| gv * y * (1.0 - y))
                        .collect(),
                );
                sink.add(a, gx);
            })),
        )
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let ta = self.nodes[a.0].value.clone();
        let data: Vec<f64> = ta
            .data
            .iter()
            .map(|x| x / (1.0 + (-x).exp()))
            .collect();
        let shape = ta.shape.clone();
        self.push(
            Tensor::new(shape, data),
            Some(Box::new(move |g, sink| {
                let gx = Tensor::new(
                    g.shape.clone(),
                    g.data
                        .iter()
                        .zip(&ta.data)
                        .map(|(gv, x)| {
                            let s = 1.0 / (1.0 + (-x).exp());
                            gv * s * (1.0 + x * (1.0 - s))
                        })
                        .collect(),
                );
                sink.add(a, gx);
            })),
        )
    }

    /// Columns `[start, start+len)` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ta = &self.nodes[a.0].value;
        let (m, n) = (ta.rows(), ta.cols());
        assert!(start + len <= n, "slice_cols out of range");
        let mut data = vec![0.0; m * len];
        for i in 0..m {
            data[i * len..(i + 1) * len]
                .copy_from_slice(&ta.data[i * n + start..i * n + start + len]);
        }
        self.push(
            Tensor::new(vec![m, len], data),
            Some(Box::new(move |g, sink| {
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    gx[i * n + start..i * n + start + len]
                        .copy_from_slice(&g.data[i * len..(i + 1) * len]);
                }
                sink.add(a, Tensor::new(vec![m, n], gx));
            })),
        )
    }

    /// Concatenate 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let m = self.nodes[parts[0].0].value.rows();
        let widths: Vec<usize> = parts.iter().map(|v| self.nodes[v.0].value.cols()).collect();
        let n: usize = widths.iter().sum();
        let mut data = vec![0.0; m * n];
        let mut off = 0;
        for (v, w) in parts.iter().zip(&widths) {
            let tv = &self.nodes[v.0].value;
            for i in 0..m {
                data[i * n + off..i * n + off + w].copy_from_slice(&tv.data[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let parts = parts.to_vec();
        self.push(
            Tensor::new(vec![m, n], data),
            Some(Box::new(move |g, sink| {
                let mut off = 0;
                for (v, w) in parts.iter().zip(&widths) {
                    let mut gp = vec![0.0; m * w];
                    for i in 0..m {
                        gp[i * w..(i + 1) * w]
                            .copy_from_slice(&g.data[i * n + off..i * n + off + w]);
                    }
                    sink.add(*v, Tensor::new(vec![m, *w], gp));
                    off += w;
                }
            })),
        )
    }

    /// Logical reshape; data order unchanged.
    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let ta = &self.nodes[a.0].value;
        assert_eq!(ta.len(), shape.iter().product::<usize>(), "reshape size");
        let old_shape = ta.shape.clone();
        let data = ta.data.clone();
        self.push(
            Tensor::new(shape, data),
            Some(Box::new(move |g, sink| {
                sink.add(a, Tensor::new(old_shape.clone(), g.data.clone()));
            })),
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let s: f64 = ta.data.iter().sum();
        let shape = ta.shape.clone();
        self.push(
            Tensor::scalar(s),
            Some(Box::new(move |g, sink| {
                let gv = g.item();
                sink.add(a, Tensor::new(shape.clone(), vec![gv; shape.iter().product()]));
            })),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean squared error between two same-shaped tensors; scalar output.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean(sq)
    }

    /// Permute/gather: `out.data[i] = a.data[indices[i]]`. Used for layout
    /// changes such as [m,c,h,w] -> tokens [m*h*w, c].
    pub fn gather(&mut self, a: Var, indices: &[usize], shape: Vec<usize>) -> Var {
        let ta = &self.nodes[a.0].value;
        assert_eq!(indices.len(), shape.iter().product::<usize>(), "gather size");
        let data: Vec<f64> = indices.iter().map(|&i| ta.data[i]).collect();
        let src_shape = ta.shape.clone();
        let indices = indices.to_vec();
        self.push(
            Tensor::new(shape, data),
            Some(Box::new(move |g, sink| {
                let mut gx = Tensor::zeros(src_shape.clone());
                for (out_i, &src_i) in indices.iter().enumerate() {
                    gx.data[src_i] += g.data[out_i];
                }
                sink.add(a, gx);
            })),
        )
    }

    /// Sum of the elements selected by `indices` (flat); scalar output.
    pub fn sum_selected(&mut self, a: Var, indices: &[usize]) -> Var {
        let ta = &self.nodes[a.0].value;
        let s: f64 = indices.iter().map(|&i| ta.data[i]).sum();
        let shape = ta.shape.clone();
        let indices = indices.to_vec();
        self.push(
            Tensor::scalar(s),
            Some(Box::new(move |g, sink| {
                let mut gx = Tensor::zeros(shape.clone());
                for &i in &indices {
                    gx.data[i] += g.item();
                }
                sink.add(a, gx);
            })),
        )
    }

    /// Backpropagate from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Grads> {
        let root_val = &self.nodes[root.0].value;
        if root_val.len() != 1 {
            return Err(Error::Shape("backward root must be scalar".into()));
        }
        let mut sink = GradSink { grads: vec![None; self.nodes.len()] };
        sink.grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            let grad = match sink.grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if let Some(bw) = &self.nodes[i].backward {
                bw(&grad, &mut sink);
            }
            sink.grads[i] = Some(grad);
        }
        Ok(Grads { grads: sink.grads })
    }
}
