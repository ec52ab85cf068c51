//! Eager reverse-mode autodiff over `Tensor` values.
//!
//! Every op computes its value immediately when recorded, so forward results
//! can be inspected while the graph is still being built (the refinement
//! mask depends on forward attention values). `backward` walks the tape in
//! reverse and accumulates gradients into per-node slots.
//!
//! Ops panic on structural misuse (shape mismatches, fully masked softmax
//! rows); callers validate inputs before building a graph.

use crate::tensor::{self, Tensor, ZERO_NORM_EPS};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackFn = Box<dyn Fn(&[Tensor], &Tensor, &mut [Option<Tensor>])>;

pub struct Graph {
    values: Vec<Tensor>,
    backs: Vec<Option<BackFn>>,
}

/// Gradients produced by a backward pass, indexed by `Var`.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    /// Gradient of the root with respect to `v`; zero-shaped `None` means the
    /// node did not influence the root.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

fn accumulate(grads: &mut [Option<Tensor>], target: usize, delta: Tensor) {
    match &mut grads[target] {
        Some(g) => {
            debug_assert_eq!(g.shape(), delta.shape());
            for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            values: Vec::new(),
            backs: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    fn push(&mut self, value: Tensor, back: Option<BackFn>) -> Var {
        self.values.push(value);
        self.backs.push(back);
        Var(self.values.len() - 1)
    }

    /// Leaf node: inputs and parameters.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, None)
    }

    /// Elementwise sum of two same-shaped nodes.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let mut out = va.clone();
        for (o, x) in out.data_mut().iter_mut().zip(vb.data()) {
            *o += x;
        }
        let (ai, bi) = (a.0, b.0);
        self.push(
            out,
            Some(Box::new(move |_, gout, grads| {
                accumulate(grads, ai, gout.clone());
                accumulate(grads, bi, gout.clone());
            })),
        )
    }

    /// Add a rank-1 bias to every row of a rank-2 node.
    pub fn add_bias(&mut self, m: Var, bias: Var) -> Var {
        let (vm, vb) = (&self.values[m.0], &self.values[bias.0]);
        let (rows, cols) = (vm.rows(), vm.cols());
        assert_eq!(vb.shape(), [cols], "bias length mismatch");
        let mut out = vm.clone();
        for r in 0..rows {
            for (o, x) in out.row_mut(r).iter_mut().zip(vb.data()) {
                *o += x;
            }
        }
        let (mi, bi) = (m.0, bias.0);
        self.push(
            out,
            Some(Box::new(move |_, gout, grads| {
                accumulate(grads, mi, gout.clone());
                let cols = gout.cols();
                let mut gb = vec![0.0; cols];
                for r in 0..gout.rows() {
                    for (g, x) in gb.iter_mut().zip(gout.row(r)) {
                        *g += x;
                    }
                }
                accumulate(grads, bi, Tensor::vector(gb));
            })),
        )
    }

    /// Multiply by a compile-time constant scalar.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut out = self.values[a.0].clone();
        for v in out.data_mut() {
            *v *= c;
        }
        let ai = a.0;
        self.push(
            out,
            Some(Box::new(move |_, gout, grads| {
                let mut g = gout.clone();
                for v in g.data_mut() {
                    *v *= c;
                }
                accumulate(grads, ai, g);
            })),
        )
    }

    /// Elementwise product with a constant tensor. The mask receives no
    /// gradient; this is the stop-gradient used for the refinement indicator
    /// and for dropout.
    pub fn mul_mask(&mut self, a: Var, mask: Tensor) -> Var {
        let va = &self.values[a.0];
        assert_eq!(va.shape(), mask.shape(), "mask shape mismatch");
        let mut out = va.clone();
        for (o, m) in out.data_mut().iter_mut().zip(mask.data()) {
            *o *= m;
        }
        let ai = a.0;
        self.push(
            out,
            Some(Box::new(move |_, gout, grads| {
                let mut g = gout.clone();
                for (v, m) in g.data_mut().iter_mut().zip(mask.data()) {
                    *v *= m;
                }
                accumulate(grads, ai, g);
            })),
        )
    }

    /// `a @ b` for `[m,k] x [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = tensor::matmul(&self.values[a.0], &self.values[b.0]);
        let (ai, bi) = (a.0, b.0);
        self.push(
            out,
            Some(Box::new(move |vals, gout, grads| {
                // dA = G @ B^T, dB = A^T @ G
                let ga = tensor::matmul_nt(gout, &vals[bi]);
                accumulate(grads, ai, ga);
                let a_val = &vals[ai];
                let (m, k) = (a_val.rows(), a_val.cols());
                let n = gout.cols();
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    let arow = a_val.row(i);
                    let grow = gout.row(i);
                    for (p, &av) in arow.iter().enumerate() {
                        if av == 0.0 {
                            continue;
                        }
                        let dst = &mut gb[p * n..(p + 1) * n];
                        for (d, &g) in dst.iter_mut().zip(grow) {
                            *d += av * g;
                        }
                    }
                }
                accumulate(grads, bi, Tensor::matrix(k, n, gb));
            })),
        )
    }

    /// `a @ b^T` for `[m,k] x [n,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = tensor::matmul_nt(&self.values[a.0], &self.values[b.0]);
        let (ai, bi) = (a.0, b.0);
        self.push(
            out,
            Some(Box::new(move |vals, gout, grads| {
                // out = A @ B^T: dA = G @ B, dB = G^T @ A
                accumulate(grads, ai, tensor::matmul(gout, &vals[bi]));
                let a_val = &vals[ai];
                let (m, k) = (a_val.rows(), a_val.cols());
                let n = gout.cols();
                let mut gb = vec![0.0; n * k];
                for i in 0..m {
                    let arow = a_val.row(i);
                    let grow = gout.row(i);
                    for (j, &g) in grow.iter().enumerate() {
                        if g == 0.0 {
                            continue;
                        }
                        let dst = &mut gb[j * k..(j + 1) * k];
                        for (d, &av) in dst.iter_mut().zip(arow) {
                            *d += g * av;
                        }
                    }
                }
                accumulate(grads, bi, Tensor::matrix(n, k, gb));
            })),
        )
    }

    /// Gather rows of a rank-2 table by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, indices: Vec<usize>) -> Var {
        let vt = &self.values[table.0];
        let cols = vt.cols();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in &indices {
            data.extend_from_slice(vt.row(i));
        }
        let out = Tensor::matrix(indices.len(), cols, data);
        let ti = table.0;
        self.push(
            out,
            Some(Box::new(move |vals, gout, grads| {
                let shape = vals[ti].shape().to_vec();
                let mut gt = Tensor::zeros(&shape);
                for (r, &i) in indices.iter().enumerate() {
                    for (d, &g) in gt.row_mut(i).iter_mut().zip(gout.row(r)) {
                        *d += g;
                    }
                }
                accumulate(grads, ti, gt);
            })),
        )
    }

    /// Extract one row of a rank-2 node as a rank-1 vector.
    pub fn select_row(&mut self, a: Var, row: usize) -> Var {
        let va = &self.values[a.0];
        let out = Tensor::vector(va.row(row).to_vec());
        let ai = a.0;
        self.push(
            out,
            Some(Box::new(move |vals, gout, grads| {
                let mut g = Tensor::zeros_like(&vals[ai]);
                g.row_mut(row).copy_from_slice(gout.data());
                accumulate(grads, ai, g);
            })),
        )
    }

    /// Contiguous row slice of a rank-2 node.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = &self.values[a.0];
        let cols = va.cols();
        let out = Tensor::matrix(
            len,
            cols,
            va.data()[start * cols..(start + len) * cols].to_vec(),
        );
        let ai = a.0;
        self.push(
            out,
            Some(Box::new(move |vals, gout, grads| {
                let mut g = Tensor::zeros_like(&vals[ai]);
                let cols = g.cols();
                g.data_mut()[start * cols..(start + len) * cols]
                    .copy_from_slice(gout.data());
                accumulate(grads, ai, g);
            })),
        )
    }

    /// Contiguous column slice of a rank-2 node.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = &self.values[a.0];
        let rows = va.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&va.row(r)[start..start + len]);
        }
        let out = Tensor::matrix(rows, len, data);
        let ai = a.0;
        self.push(
            out,
            Some(Box::new(move |vals, gout, grads| {
                let mut g = Tensor::zeros_like(&vals[ai]);
                for r in 0..gout.rows() {
                    g.row_mut(r)[start..start + len].copy_from_slice(gout.row(r));
                }
                accumulate(grads, ai, g);
            })),
        )
    }

    /// Concatenate rank-2 nodes along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.values[parts[0].0].rows();
        let widths: Vec<usize> = parts.iter().map(|p| self.values[p.0].cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.values[p.0].row(r));
            }
        }
        let out = Tensor::matrix(rows, total, data);
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(
            out,
            Some(Box::new(move |_, gout, grads| {
                let rows = gout.rows();
                let mut offset = 0;
                for (&id, &w) in ids.iter().zip(&widths) {
                    let mut g = Tensor::zeros(&[rows, w]);
                    for r in 0..rows {
                        g.row_mut(r)
                            .copy_from_slice(&gout.row(r)[offset..offset + w]);
                    }
                    accumulate(grads, id, g);
                    offset += w;
                }
            })),
        )
    }

    /// View a rank-1 vector as a single-row matrix.
    pub fn as_row(&mut self, v: Var) -> Var {
        let t = &self.values[v.0];
        assert_eq!(t.rank(), 1, "as_row expects a vector");
        let out = Tensor::matrix(1, t.len(), t.data().to_vec());
        let vi = v.0;
        self.push(
            out,
            Some(Box::new(move |_, gout, grads| {
                accumulate(grads, vi, Tensor::vector(gout.data().to_vec()));
            })),
        )
    }

    /// Concatenate rank-2 nodes along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.values[parts[0].0].cols();
        let mut data = Vec::new();
        let mut heights = Vec::with_capacity(parts.len());
        for p in parts {
            let v = &self.values[p.0];
            assert_eq!(v.cols(), cols, "concat_rows width mismatch");
            heights.push(v.rows());
            data.extend_from_slice(v.data());
        }
        let total: usize = heights.iter().sum();
        let out = Tensor::matrix(total, cols, data);
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(
            out,
            Some(Box::new(move |_, gout, grads| {
                let cols = gout.cols();
                let mut offset = 0;
                for (&id, &h) in ids.iter().zip(&heights) {
                    let g = Tensor::matrix(
                        h,
                        cols,
                        gout.data()[offset * cols..(offset + h) * cols].to_vec(),
                    );
                    accumulate(grads, id, g);
                    offset += h;
                }
            })),
        )
    }

    /// Stack rank-1 vectors into a rank-2 matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Var {
        assert!(!rows.is_empty());
        let cols = self.values[rows[0].0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let v = &self.values[r.0];
            assert_eq!(v.len(), cols, "stack_rows width mismatch");
            data.extend_from_slice(v.data());
        }
        let out = Tensor::matrix(rows.len(), cols, data);
        let ids: Vec<usize> = rows.iter().map(|r| r.0).collect();
        self.push(
            out,
            Some(Box::new(move |_, gout, grads| {
                for (r, &id) in ids.iter().enumerate() {
                    accumulate(grads, id, Tensor::vector(gout.row(r).to_vec()));
                }
            })),
        )
    }

    /// Assemble a rank-2 matrix from scalar nodes in row-major order.
    pub fn from_scalars(&mut self, entries: &[Var], rows: usize, cols: usize) -> Var {
        assert_eq!(entries.len(), rows * cols);
        let data: Vec<f64> = entries.iter().map(|e| self.values[e.0].item()).collect();
        let out = Tensor::matrix(rows, cols, data);
        let ids: Vec<usize> = entries.iter().map(|e| e.0).collect();
        self.push(
            out,
            Some(Box::new(move |_, gout, grads| {
                for (&id, &g) in ids.iter().zip(gout.data()) {
                    accumulate(grads, id, Tensor::scalar(g));
                }
            })),
        )
    }

    /// Per-row layer normalization with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-5;
        let vx = &self.values[x.0];
        let (rows, cols) = (vx.rows(), vx.cols());
        let vg = &self.values[gamma.0];
        let vb = &self.values[beta.0];
        assert_eq!(vg.shape(), [cols]);
        assert_eq!(vb.shape(), [cols]);

        let mut out = Tensor::zeros(&[rows, cols]);
        let mut xhat = Tensor::zeros(&[rows, cols]);
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let istd = 1.0 / (var + EPS).sqrt();
            inv_std[r] = istd;
            for c in 0..cols {
                let xh = (row[c] - mean) * istd;
                xhat.set(r, c, xh);
                out.set(r, c, vg.data()[c] * xh + vb.data()[c]);
            }
        }

        let (xi, gi, bi) = (x.0, gamma.0, beta.0);
        self.push(
            out,
            Some(Box::new(move |vals, gout, grads| {
                let (rows, cols) = (gout.rows(), gout.cols());
                let vg = &vals[gi];
                let mut gx = Tensor::zeros(&[rows, cols]);
                let mut ggamma = vec![0.0; cols];
                let mut gbeta = vec![0.0; cols];
                for r in 0..rows {
                    let grow = gout.row(r);
                    let xhrow = xhat.row(r);
                    // d/dxhat, then project out mean and xhat components
                    let mut gxh = vec![0.0; cols];
                    for c in 0..cols {
                        gxh[c] = grow[c] * vg.data()[c];
                        ggamma[c] += grow[c] * xhrow[c];
                        gbeta[c] += grow[c];
                    }
                    let mean_g = gxh.iter().sum::<f64>() / cols as f64;
                    let mean_gx = gxh
                        .iter()
                        .zip(xhrow)
                        .map(|(g, xh)| g * xh)
                        .sum::<f64>()
                        / cols as f64;
                    for c in 0..cols {
                        gx.set(
                            r,
                            c,
                            inv_std[r] * (gxh[c] - mean_g - xhrow[c] * mean_gx),
                        );
                    }
                }
                accumulate(grads, xi, gx);
                accumulate(grads, gi, Tensor::vector(ggamma));
                accumulate(grads, bi, Tensor::vector(gbeta));
            })),
        )
    }

    /// Elementwise GELU (tanh approximation).
    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.values[x.0].clone();
        for v in out.data_mut() {
            *v = tensor::gelu(*v);
        }
        let xi = x.0;
        self.push(
            out,
            Some(Box::new(move |vals, gout, grads| {
                let mut g = gout.clone();
                for (gv, &xv) in g.data_mut().iter_mut().zip(vals[xi].data()) {
                    *gv *= tensor::gelu_derivative(xv);
                }
                accumulate(grads, xi, g);
            })),
        )
    }

    /// Row softmax where columns with `key_mask[c] == false` are excluded and
    /// yield exactly 0.
    pub fn softmax_rows_masked(&mut self, x: Var, key_mask: Vec<bool>) -> Var {
        let vx = &self.values[x.0];
        let (rows, cols) = (vx.rows(), vx.cols());
        assert_eq!(key_mask.len(), cols, "key mask length mismatch");
        assert!(key_mask.iter().any(|&m| m), "softmax over all-masked keys");
        let mut out = Tensor::zeros(&[rows, cols]);
        for r in 0..rows {
            let sm = tensor::softmax_masked(vx.row(r), &key_mask);
            out.row_mut(r).copy_from_slice(&sm);
        }
        let xi = x.0;
        self.push(
            out.clone(),
            Some(Box::new(move |_, gout, grads| {
                let (rows, cols) = (gout.rows(), gout.cols());
                let mut gx = Tensor::zeros(&[rows, cols]);
                for r in 0..rows {
                    let y = out.row(r);
                    let g = gout.row(r);
                    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        gx.set(r, c, y[c] * (g[c] - dot));
                    }
                }
                accumulate(grads, xi, gx);
            })),
        )
    }

    /// L2-normalize each row; rows with near-zero norm pass through as zeros
    /// with zero gradient.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let vx = &self.values[x.0];
        let (rows, cols) = (vx.rows(), vx.cols());
        let mut out = Tensor::zeros(&[rows, cols]);
        let mut norms = vec![0.0; rows];
        for r in 0..rows {
            let n = tensor::norm(vx.row(r));
            norms[r] = n;
            if n >= ZERO_NORM_EPS {
                for c in 0..cols {
                    out.set(r, c, vx.at(r, c) / n);
                }
            }
        }
        let xi = x.0;
        self.push(
            out.clone(),
            Some(Box::new(move |_, gout, grads| {
                let (rows, cols) = (gout.rows(), gout.cols());
                let mut gx = Tensor::zeros(&[rows, cols]);
                for r in 0..rows {
                    if norms[r] < ZERO_NORM_EPS {
                        continue;
                    }
                    let y = out.row(r);
                    let g = gout.row(r);
                    let gy: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        gx.set(r, c, (g[c] - gy * y[c]) / norms[r]);
                    }
                }
                accumulate(grads, xi, gx);
            })),
        )
    }

    /// All-pairs cosine similarity `[p,d] x [q,d] -> [p,q]` with the
    /// zero-vector convention.
    pub fn cosine_matrix(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!(va.cols(), vb.cols(), "cosine dim mismatch");
        let (p, q) = (va.rows(), vb.rows());
        let mut out = Tensor::zeros(&[p, q]);
        for i in 0..p {
            for j in 0..q {
                out.set(i, j, tensor::cosine(va.row(i), vb.row(j)));
            }
        }
        let (ai, bi) = (a.0, b.0);
        self.push(
            out.clone(),
            Some(Box::new(move |vals, gout, grads| {
                let (va, vb) = (&vals[ai], &vals[bi]);
                let (p, q, d) = (va.rows(), vb.rows(), va.cols());
                let mut ga = Tensor::zeros(&[p, d]);
                let mut gb = Tensor::zeros(&[q, d]);
                for i in 0..p {
                    let x = va.row(i);
                    let nx = tensor::norm(x);
                    if nx < ZERO_NORM_EPS {
                        continue;
                    }
                    for j in 0..q {
                        let g = gout.at(i, j);
                        if g == 0.0 {
                            continue;
                        }
                        let y = vb.row(j);
                        let ny = tensor::norm(y);
                        if ny < ZERO_NORM_EPS {
                            continue;
                        }
                        let c = out.at(i, j);
                        let ga_row = ga.row_mut(i);
                        for k in 0..d {
                            ga_row[k] += g * (y[k] / (nx * ny) - c * x[k] / (nx * nx));
                        }
                        let gb_row = gb.row_mut(j);
                        for k in 0..d {
                            gb_row[k] += g * (x[k] / (nx * ny) - c * y[k] / (ny * ny));
                        }
                    }
                }
                accumulate(grads, ai, ga);
                accumulate(grads, bi, gb);
            })),
        )
    }

    /// Mean over rows of the cosine between paired rows of `a` and `b`:
    /// `(1/n) sum_i cos(a_i, b_i)`.
    pub fn mean_row_cosine(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!(va.shape(), vb.shape(), "mean_row_cosine shape mismatch");
        let n = va.rows();
        assert!(n > 0, "mean_row_cosine over zero rows");
        let mut cosines = vec![0.0; n];
        for i in 0..n {
            cosines[i] = tensor::cosine(va.row(i), vb.row(i));
        }
        let out = Tensor::scalar(cosines.iter().sum::<f64>() / n as f64);
        let (ai, bi) = (a.0, b.0);
        self.push(
            out,
            Some(Box::new(move |vals, gout, grads| {
                let g = gout.item();
                let (va, vb) = (&vals[ai], &vals[bi]);
                let (n, d) = (va.rows(), va.cols());
                let scale = g / n as f64;
                let mut ga = Tensor::zeros(&[n, d]);
                let mut gb = Tensor::zeros(&[n, d]);
                for i in 0..n {
                    let x = va.row(i);
                    let y = vb.row(i);
                    let nx = tensor::norm(x);
                    let ny = tensor::norm(y);
                    if nx < ZERO_NORM_EPS || ny < ZERO_NORM_EPS {
                        continue;
                    }
                    let c = cosines[i];
                    let ga_row = ga.row_mut(i);
                    let gb_row = gb.row_mut(i);
                    for k in 0..d {
                        ga_row[k] = scale * (y[k] / (nx * ny) - c * x[k] / (nx * nx));
                        gb_row[k] = scale * (x[k] / (nx * ny) - c * y[k] / (ny * ny));
                    }
                }
                accumulate(grads, ai, ga);
                accumulate(grads, bi, gb);
            })),
        )
    }

    /// Per-row log-softmax.
    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let vx = &self.values[x.0];
        let (rows, cols) = (vx.rows(), vx.cols());
        let mut out = Tensor::zeros(&[rows, cols]);
        for r in 0..rows {
            let lse = tensor::log_sum_exp(vx.row(r));
            for c in 0..cols {
                out.set(r, c, vx.at(r, c) - lse);
            }
        }
        let xi = x.0;
        self.push(
            out.clone(),
            Some(Box::new(move |_, gout, grads| {
                let (rows, cols) = (gout.rows(), gout.cols());
                let mut gx = Tensor::zeros(&[rows, cols]);
                for r in 0..rows {
                    let g = gout.row(r);
                    let gsum: f64 = g.iter().sum();
                    let y = out.row(r);
                    for c in 0..cols {
                        gx.set(r, c, g[c] - y[c].exp() * gsum);
                    }
                }
                accumulate(grads, xi, gx);
            })),
        )
    }

    /// `-(1/B) * sum_i x[i][i]` for a square matrix.
    pub fn neg_mean_diag(&mut self, x: Var) -> Var {
        let vx = &self.values[x.0];
        let b = vx.rows();
        assert_eq!(b, vx.cols(), "neg_mean_diag on non-square matrix");
        let sum: f64 = (0..b).map(|i| vx.at(i, i)).sum();
        let out = Tensor::scalar(-sum / b as f64);
        let xi = x.0;
        self.push(
            out,
            Some(Box::new(move |vals, gout, grads| {
                let b = vals[xi].rows();
                let mut g = Tensor::zeros(&[b, b]);
                let v = -gout.item() / b as f64;
                for i in 0..b {
                    g.set(i, i, v);
                }
                accumulate(grads, xi, g);
            })),
        )
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let vx = &self.values[x.0];
        let (rows, cols) = (vx.rows(), vx.cols());
        let mut out = Tensor::zeros(&[cols, rows]);
        for r in 0..rows {
            for c in 0..cols {
                out.set(c, r, vx.at(r, c));
            }
        }
        let xi = x.0;
        self.push(
            out,
            Some(Box::new(move |_, gout, grads| {
                let (rows, cols) = (gout.rows(), gout.cols());
                let mut g = Tensor::zeros(&[cols, rows]);
                for r in 0..rows {
                    for c in 0..cols {
                        g.set(c, r, gout.at(r, c));
                    }
                }
                accumulate(grads, xi, g);
            })),
        )
    }

    /// Reverse pass from a scalar root. Returns gradients for every node.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(
            self.values[root.0].len(),
            1,
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; self.values.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            if grads[i].is_none() {
                continue;
            }
            if let Some(back) = &self.backs[i] {
                let g = grads[i].take().unwrap();
                back(&self.values, &g, &mut grads);
                grads[i] = Some(g);
            }
        }
        Grads { grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite-difference check of `backward` for a scalar-valued
    /// graph builder over arbitrary leaf inputs.
    fn fd_check(
        build: impl Fn(&mut Graph, &[Var]) -> Var,
        inputs: &[Tensor],
        h: f64,
        tol: f64,
    ) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let root = build(&mut g, &vars);
        let grads = g.backward(root);

        for (vi, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[vi]);
            for k in 0..input.len() {
                let eval = |delta: f64| {
                    let mut bumped: Vec<Tensor> = inputs.to_vec();
                    bumped[vi].data_mut()[k] += delta;
                    let mut g2 = Graph::new();
                    let vs: Vec<Var> = bumped.iter().map(|t| g2.leaf(t.clone())).collect();
                    let r = build(&mut g2, &vs);
                    g2.value(r).item()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = analytic.map_or(0.0, |t| t.data()[k]);
                let denom = fd.abs().max(an.abs()).max(1.0);
                assert!(
                    ((fd - an) / denom).abs() < tol,
                    "input {vi} coord {k}: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        t
    }

    #[test]
    fn grad_matmul_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 2]);
        let mask = rand_tensor(&mut rng, &[3, 2]);
        fd_check(
            |g, vs| {
                let c = g.matmul(vs[0], vs[1]);
                let m = g.mul_mask(c, mask.clone());
                let ones = g.leaf(Tensor::matrix(2, 1, vec![1.0, 1.0]));
                let s = g.matmul(m, ones);
                let onesr = g.leaf(Tensor::matrix(1, 3, vec![1.0; 3]));
                let t = g.matmul(onesr, s);
                g.select_scalar(t)
            },
            &[a, b],
            1e-6,
            1e-6,
        );
    }

    /// mul_mask holds the mask constant: gradients flow only through the
    /// retained factor, never through the mask itself.
    #[test]
    fn mul_mask_stops_gradient_through_mask() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        // mask derived from x's forward value, as the refinement path does
        let mask = Tensor::scalar(g.value(x).item());
        let y = g.mul_mask(x, mask); // y = 3 * x with the 3 frozen
        let grads = g.backward(y);
        assert_eq!(grads.get(x).unwrap().item(), 3.0);
    }

    impl Graph {
        /// Test helper: view a 1x1 matrix as a scalar node.
        fn select_scalar(&mut self, x: Var) -> Var {
            let v = self.values[x.0].clone();
            assert_eq!(v.len(), 1);
            let xi = x.0;
            self.push(
                Tensor::scalar(v.data()[0]),
                Some(Box::new(move |vals, gout, grads| {
                    let mut g = Tensor::zeros_like(&vals[xi]);
                    g.data_mut()[0] = gout.item();
                    accumulate(grads, xi, g);
                })),
            )
        }
    }

    #[test]
    fn grad_layer_norm_gelu() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, &[3, 5]);
        let gamma = rand_tensor(&mut rng, &[5]);
        let beta = rand_tensor(&mut rng, &[5]);
        fd_check(
            |g, vs| {
                let n = g.layer_norm(vs[0], vs[1], vs[2]);
                let a = g.gelu(n);
                let b = g.mean_row_cosine(a, vs[0]);
                b
            },
            &[x, gamma, beta],
            1e-6,
            1e-5,
        );
    }

    #[test]
    fn grad_softmax_cosine_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = rand_tensor(&mut rng, &[4, 6]);
        let t = rand_tensor(&mut rng, &[3, 6]);
        fd_check(
            |g, vs| {
                let c = g.cosine_matrix(vs[0], vs[1]);
                let a = g.softmax_rows_masked(c, vec![true, true, true]);
                let alpha = g.matmul(a, vs[1]);
                g.mean_row_cosine(vs[0], alpha)
            },
            &[r, t],
            1e-6,
            1e-5,
        );
    }

    #[test]
    fn grad_softmax_respects_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, &[2, 4]);
        let mask = vec![true, false, true, true];
        let mut g = Graph::new();
        let xv = g.leaf(x);
        let sm = g.softmax_rows_masked(xv, mask);
        let val = g.value(sm);
        assert_eq!(val.at(0, 1), 0.0);
        assert!((val.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn grad_log_softmax_nce_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = rand_tensor(&mut rng, &[3, 3]);
        fd_check(
            |g, vs| {
                let sc = g.scale(vs[0], 1.0 / 0.3);
                let ls = g.log_softmax_rows(sc);
                g.neg_mean_diag(ls)
            },
            &[s],
            1e-6,
            1e-6,
        );
    }

    #[test]
    fn grad_l2_normalize_and_stack() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = rand_tensor(&mut rng, &[2, 4]);
        let b = rand_tensor(&mut rng, &[2, 4]);
        fd_check(
            |g, vs| {
                let na = g.l2_normalize_rows(vs[0]);
                let nb = g.l2_normalize_rows(vs[1]);
                let s = g.matmul_nt(na, nb);
                let ls = g.log_softmax_rows(s);
                g.neg_mean_diag(ls)
            },
            &[a, b],
            1e-6,
            1e-5,
        );
    }

    #[test]
    fn grad_gather_bias_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let table = rand_tensor(&mut rng, &[5, 3]);
        let bias = rand_tensor(&mut rng, &[3]);
        fd_check(
            |g, vs| {
                let e = g.gather_rows(vs[0], vec![1, 4, 1]);
                let eb = g.add_bias(e, vs[1]);
                let t = g.transpose(eb);
                let tt = g.transpose(t);
                g.mean_row_cosine(tt, e)
            },
            &[table, bias],
            1e-6,
            1e-5,
        );
    }

    #[test]
    fn grad_slice_concat_stack() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_tensor(&mut rng, &[4, 6]);
        fd_check(
            |g, vs| {
                let left = g.slice_cols(vs[0], 0, 3);
                let right = g.slice_cols(vs[0], 3, 3);
                let cat = g.concat_cols(&[right, left]);
                let top = g.slice_rows(cat, 0, 2);
                let bottom = g.slice_rows(cat, 2, 2);
                let r0 = g.select_row(top, 0);
                let r1 = g.select_row(bottom, 1);
                let st = g.stack_rows(&[r0, r1]);
                g.mean_row_cosine(st, top)
            },
            &[x],
            1e-6,
            1e-5,
        );
    }

    #[test]
    fn from_scalars_routes_gradients() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::scalar(2.0));
        let b = g.leaf(Tensor::scalar(3.0));
        let c = g.leaf(Tensor::scalar(4.0));
        let d = g.leaf(Tensor::scalar(5.0));
        let m = g.from_scalars(&[a, b, c, d], 2, 2);
        let ls = g.log_softmax_rows(m);
        let root = g.neg_mean_diag(ls);
        let grads = g.backward(root);
        for v in [a, b, c, d] {
            assert!(grads.get(v).is_some());
        }
        // diagonal entries pull toward themselves: negative gradient
        assert!(grads.get(a).unwrap().item() < 0.0);
        assert!(grads.get(b).unwrap().item() > 0.0);
    }

    #[test]
    fn zero_norm_rows_get_zero_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::matrix(2, 3, vec![0.0, 0.0, 0.0, 1.0, 2.0, 2.0]));
        let b = g.leaf(Tensor::matrix(2, 3, vec![1.0, 1.0, 1.0, 0.5, 0.5, 0.5]));
        let c = g.mean_row_cosine(a, b);
        let grads = g.backward(c);
        let ga = grads.get(a).unwrap();
        assert_eq!(&ga.data()[0..3], &[0.0, 0.0, 0.0]);
        assert!(ga.data()[3..].iter().any(|&v| v != 0.0));
    }
}
