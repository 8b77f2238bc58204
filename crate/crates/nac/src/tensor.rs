//! Dense f64 tensors with row-major storage.
//!
//! This is the value carrier for everything in the crate: projections,
//! pair tensors, logits, gradients. Only what the attention layer and its
//! training loop need is implemented; all ops are pure functions over
//! immutable inputs and deterministic.

use crate::error::{Error, Result};

/// Inputs to `exp` are clamped to this symmetric range before evaluation so
/// the output stays finite. The attention layer never drives exponents
/// anywhere near the boundary (softmax is max-subtracted, decay exponents are
/// bounded by softplus ranges), so the clamp only guards against degenerate
/// parameter settings.
pub const EXP_CLAMP: f64 = 60.0;

/// Clamped exponential used by every exp-like op in the crate.
#[inline]
pub fn exp_clamped(x: f64) -> f64 {
    x.clamp(-EXP_CLAMP, EXP_CLAMP).exp()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + exp_clamped(-x))
}

/// Numerically stable ln(1 + e^x).
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Dense N-dimensional array of f64 in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::dim(format!("shape dims must be >= 1, got {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; numel] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("shape is never empty")
    }

    /// Product of all dims except the last: the number of last-dim slices.
    pub fn outer_len(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn assert_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!("non-finite value in {context}")))
        }
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::dim(format!(
                "cannot reshape {:?} ({} elems) to {shape:?}",
                self.shape,
                self.data.len()
            )));
        }
        Ok(Tensor { shape, data: self.data.clone() })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn neg(&self) -> Tensor {
        self.map(|v| -v)
    }

    pub fn exp(&self) -> Tensor {
        self.map(exp_clamped)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.map(sigmoid)
    }

    pub fn softplus(&self) -> Tensor {
        self.map(softplus)
    }

    pub fn tanh(&self) -> Tensor {
        self.map(f64::tanh)
    }

    pub fn ln(&self) -> Tensor {
        self.map(f64::ln)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

// ── Broadcasting ─────────────────────────────────────────────────────

/// Right-aligned broadcast of two shapes; errors when any aligned pair of
/// dims differs and neither is 1.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(Error::dim(format!("cannot broadcast {a:?} with {b:?}")));
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

fn strides_for(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i] = acc;
        acc *= shape[i];
    }
    strides
}

/// Strides of `shape` as seen from `out_shape` after broadcasting: broadcast
/// dims get stride 0 so the same element is revisited.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let own = strides_for(shape);
    let offset = out_shape.len() - shape.len();
    let mut out = vec![0usize; out_shape.len()];
    for i in 0..shape.len() {
        out[offset + i] = if shape[i] == 1 { 0 } else { own[i] };
    }
    out
}

/// Elementwise combine with broadcasting.
pub fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor { shape: a.shape.clone(), data });
    }
    let out_shape = broadcast_shape(&a.shape, &b.shape)?;
    let numel: usize = out_shape.iter().product();
    let sa = broadcast_strides(&a.shape, &out_shape);
    let sb = broadcast_strides(&b.shape, &out_shape);
    let mut data = vec![0.0; numel];
    let mut idx = vec![0usize; out_shape.len()];
    let mut oa = 0usize;
    let mut ob = 0usize;
    for slot in data.iter_mut() {
        *slot = f(a.data[oa], b.data[ob]);
        // odometer increment over the output index space
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            oa -= sa[d] * out_shape[d];
            ob -= sb[d] * out_shape[d];
        }
    }
    Ok(Tensor { shape: out_shape, data })
}

/// Sum `grad` (shaped `from`) down to shape `to`: the adjoint of broadcasting.
pub fn reduce_to_shape(grad: &Tensor, to: &[usize]) -> Tensor {
    if grad.shape == to {
        return grad.clone();
    }
    let from = &grad.shape;
    let to_numel: usize = to.iter().product();
    let mut out = vec![0.0; to_numel];
    let st = broadcast_strides(to, from);
    let mut idx = vec![0usize; from.len()];
    let mut ot = 0usize;
    for &g in &grad.data {
        out[ot] += g;
        for d in (0..from.len()).rev() {
            idx[d] += 1;
            ot += st[d];
            if idx[d] < from[d] {
                break;
            }
            idx[d] = 0;
            ot -= st[d] * from[d];
        }
    }
    Tensor { shape: to.to_vec(), data: out }
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    broadcast_binary(a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    broadcast_binary(a, b, |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    broadcast_binary(a, b, |x, y| x * y)
}

pub fn div(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    broadcast_binary(a, b, |x, y| x / y)
}

// ── Matmul and transposes ────────────────────────────────────────────

/// Batched matrix product `[.., m, k] x [.., k, n] -> [.., m, n]`.
///
/// Batch dims must match exactly, or `b` may be a plain rank-2 weight matrix
/// shared across the batch. Accumulation runs in ascending-k order, which
/// keeps results reproducible and makes natural-order paths bit-comparable.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() < 2 || b.rank() < 2 {
        return Err(Error::dim("matmul needs rank >= 2 operands".to_string()));
    }
    let (m, k) = (a.shape[a.rank() - 2], a.shape[a.rank() - 1]);
    let (kb, n) = (b.shape[b.rank() - 2], b.shape[b.rank() - 1]);
    if k != kb {
        return Err(Error::dim(format!(
            "matmul inner dims differ: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let a_batch = &a.shape[..a.rank() - 2];
    let b_batch = &b.shape[..b.rank() - 2];
    let shared_rhs = b.rank() == 2 && !a_batch.is_empty();
    if !shared_rhs && a_batch != b_batch {
        return Err(Error::dim(format!(
            "matmul batch dims differ: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let batches: usize = a_batch.iter().product();
    let mut shape = a_batch.to_vec();
    shape.push(m);
    shape.push(n);
    let mut data = vec![0.0; batches * m * n];
    for bi in 0..batches {
        let ab = &a.data[bi * m * k..(bi + 1) * m * k];
        let bb = if shared_rhs { &b.data[..] } else { &b.data[bi * k * n..(bi + 1) * k * n] };
        let ob = &mut data[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            let arow = &ab[i * k..(i + 1) * k];
            let orow = &mut ob[i * n..(i + 1) * n];
            for (p, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &bb[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    Ok(Tensor { shape, data })
}

/// Swap the last two axes.
pub fn transpose_last2(x: &Tensor) -> Result<Tensor> {
    if x.rank() < 2 {
        return Err(Error::dim("transpose_last2 needs rank >= 2".to_string()));
    }
    let r = x.rank();
    let (m, n) = (x.shape[r - 2], x.shape[r - 1]);
    let batches = x.numel() / (m * n);
    let mut shape = x.shape.clone();
    shape[r - 2] = n;
    shape[r - 1] = m;
    let mut data = vec![0.0; x.numel()];
    for b in 0..batches {
        let src = &x.data[b * m * n..(b + 1) * m * n];
        let dst = &mut data[b * m * n..(b + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    Ok(Tensor { shape, data })
}

/// Swap axes 1 and 2 of a rank-4 tensor: `[a, b, c, d] -> [a, c, b, d]`.
/// Used for head splitting/merging.
pub fn swap_axes12(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(Error::dim(format!("swap_axes12 needs rank 4, got {:?}", x.shape)));
    }
    let (a, b, c, d) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let mut data = vec![0.0; x.numel()];
    for ia in 0..a {
        for ib in 0..b {
            for ic in 0..c {
                let src = &x.data[((ia * b + ib) * c + ic) * d..][..d];
                let dst = &mut data[((ia * c + ic) * b + ib) * d..][..d];
                dst.copy_from_slice(src);
            }
        }
    }
    Ok(Tensor { shape: vec![a, c, b, d], data })
}

// ── Softmax family ───────────────────────────────────────────────────

/// Max-subtracted softmax over the last dim.
pub fn softmax_lastdim(x: &Tensor) -> Result<Tensor> {
    let n = x.last_dim();
    if n < 1 {
        return Err(Error::dim("softmax over empty last dim".to_string()));
    }
    let mut data = vec![0.0; x.numel()];
    for (row, out) in x.data.chunks(n).zip(data.chunks_mut(n)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in out.iter_mut().zip(row) {
            *o = exp_clamped(v - max);
            sum += *o;
        }
        for o in out.iter_mut() {
            *o /= sum;
        }
    }
    Ok(Tensor { shape: x.shape.clone(), data })
}

/// Max-subtracted log-softmax over the last dim.
pub fn log_softmax_lastdim(x: &Tensor) -> Result<Tensor> {
    let n = x.last_dim();
    if n < 1 {
        return Err(Error::dim("log_softmax over empty last dim".to_string()));
    }
    let mut data = vec![0.0; x.numel()];
    for (row, out) in x.data.chunks(n).zip(data.chunks_mut(n)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|&v| exp_clamped(v - max)).sum::<f64>().ln() + max;
        for (o, &v) in out.iter_mut().zip(row) {
            *o = v - lse;
        }
    }
    Ok(Tensor { shape: x.shape.clone(), data })
}

// ── Top-k selection ──────────────────────────────────────────────────

/// Indices into the last dim, one row of `k` per slice. Plain data, never
/// differentiated; gradients flow through the gather that consumes it.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexTensor {
    pub shape: Vec<usize>,
    pub data: Vec<usize>,
}

impl IndexTensor {
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("shape is never empty")
    }
}

/// The `k` largest entries of each last-dim slice in descending-value order.
/// Ties are broken toward the lowest original index, which makes selection
/// deterministic and testable.
pub fn topk_lastdim(x: &Tensor, k: usize) -> Result<(Tensor, IndexTensor)> {
    if k < 1 {
        return Err(Error::arg(format!("topk needs k >= 1, got {k}")));
    }
    let n = x.last_dim();
    if k > n {
        return Err(Error::arg(format!("topk k={k} exceeds last dim {n}")));
    }
    let rows = x.outer_len();
    let mut shape = x.shape.clone();
    *shape.last_mut().unwrap() = k;
    let mut values = vec![0.0; rows * k];
    let mut indices = vec![0usize; rows * k];
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for r in 0..rows {
        let row = &x.data[r * n..(r + 1) * n];
        order.clear();
        order.extend(0..n);
        // descending by value, ascending by index on ties
        order.sort_by(|&i, &j| row[j].total_cmp(&row[i]).then(i.cmp(&j)));
        for (slot, &src) in order.iter().take(k).enumerate() {
            values[r * k + slot] = row[src];
            indices[r * k + slot] = src;
        }
    }
    Ok((
        Tensor { shape: shape.clone(), data: values },
        IndexTensor { shape, data: indices },
    ))
}

// ── Gather / tile / concat plumbing ──────────────────────────────────

/// Row gather: `src [L.., n, d]` indexed by `idx [L.., m]` -> `[L.., m, d]`.
/// `out[l, j, :] = src[l, idx[l, j], :]` for every leading slice `l`.
pub fn gather_rows(src: &Tensor, idx: &IndexTensor) -> Result<Tensor> {
    if src.rank() < 2 {
        return Err(Error::dim("gather_rows src needs rank >= 2".to_string()));
    }
    let lead = &src.shape[..src.rank() - 2];
    if &idx.shape[..idx.shape.len() - 1] != lead {
        return Err(Error::dim(format!(
            "gather_rows leading dims differ: src {:?}, idx {:?}",
            src.shape, idx.shape
        )));
    }
    let n = src.shape[src.rank() - 2];
    let d = src.shape[src.rank() - 1];
    let m = idx.last_dim();
    let slices: usize = lead.iter().product();
    let mut shape = lead.to_vec();
    shape.push(m);
    shape.push(d);
    let mut data = vec![0.0; slices * m * d];
    for l in 0..slices {
        let sb = &src.data[l * n * d..(l + 1) * n * d];
        let ib = &idx.data[l * m..(l + 1) * m];
        let ob = &mut data[l * m * d..(l + 1) * m * d];
        for (j, &row) in ib.iter().enumerate() {
            if row >= n {
                return Err(Error::arg(format!("gather index {row} out of range (n={n})")));
            }
            ob[j * d..(j + 1) * d].copy_from_slice(&sb[row * d..(row + 1) * d]);
        }
    }
    Ok(Tensor { shape, data })
}

/// Adjoint of `gather_rows`: scatter-add `grad [L.., m, d]` into `[L.., n, d]`.
pub fn scatter_add_rows(grad: &Tensor, idx: &IndexTensor, n: usize) -> Tensor {
    let r = grad.rank();
    let d = grad.shape[r - 1];
    let m = grad.shape[r - 2];
    let slices: usize = grad.shape[..r - 2].iter().product();
    let mut shape = grad.shape[..r - 2].to_vec();
    shape.push(n);
    shape.push(d);
    let mut data = vec![0.0; slices * n * d];
    for l in 0..slices {
        let gb = &grad.data[l * m * d..(l + 1) * m * d];
        let ib = &idx.data[l * m..(l + 1) * m];
        let ob = &mut data[l * n * d..(l + 1) * n * d];
        for (j, &row) in ib.iter().enumerate() {
            for (o, &g) in ob[row * d..(row + 1) * d].iter_mut().zip(&gb[j * d..(j + 1) * d]) {
                *o += g;
            }
        }
    }
    Tensor { shape, data }
}

/// Repeat each row of `[L.., m, d]` k times along a fresh axis -> `[L.., m, k, d]`.
pub fn tile_rows(src: &Tensor, k: usize) -> Result<Tensor> {
    if src.rank() < 2 {
        return Err(Error::dim("tile_rows src needs rank >= 2".to_string()));
    }
    if k < 1 {
        return Err(Error::arg("tile_rows needs k >= 1".to_string()));
    }
    let d = src.shape[src.rank() - 1];
    let rows = src.numel() / d;
    let mut shape = src.shape.clone();
    shape.insert(src.rank() - 1, k);
    let mut data = vec![0.0; rows * k * d];
    for r in 0..rows {
        let row = &src.data[r * d..(r + 1) * d];
        for rep in 0..k {
            data[(r * k + rep) * d..(r * k + rep + 1) * d].copy_from_slice(row);
        }
    }
    Ok(Tensor { shape, data })
}

/// Adjoint of `tile_rows`: sum over the repeated axis.
pub fn untile_rows(grad: &Tensor) -> Tensor {
    let r = grad.rank();
    let d = grad.shape[r - 1];
    let k = grad.shape[r - 2];
    let rows = grad.numel() / (k * d);
    let mut shape = grad.shape.clone();
    shape.remove(r - 2);
    let mut data = vec![0.0; rows * d];
    for row in 0..rows {
        let dst = &mut data[row * d..(row + 1) * d];
        for rep in 0..k {
            let src = &grad.data[(row * k + rep) * d..(row * k + rep + 1) * d];
            for (o, &g) in dst.iter_mut().zip(src) {
                *o += g;
            }
        }
    }
    Tensor { shape, data }
}

/// Concatenate along the last dim; leading dims must match.
pub fn concat_lastdim(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape[..a.rank() - 1] != b.shape[..b.rank() - 1] {
        return Err(Error::dim(format!(
            "concat_lastdim leading dims differ: {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    let da = a.last_dim();
    let db = b.last_dim();
    let rows = a.outer_len();
    let mut shape = a.shape.clone();
    *shape.last_mut().unwrap() = da + db;
    let mut data = vec![0.0; rows * (da + db)];
    for r in 0..rows {
        data[r * (da + db)..r * (da + db) + da].copy_from_slice(&a.data[r * da..(r + 1) * da]);
        data[r * (da + db) + da..(r + 1) * (da + db)].copy_from_slice(&b.data[r * db..(r + 1) * db]);
    }
    Ok(Tensor { shape, data })
}

/// Split a last-dim concatenation back into its two parts.
pub fn split_lastdim(x: &Tensor, da: usize) -> (Tensor, Tensor) {
    let d = x.last_dim();
    let db = d - da;
    let rows = x.outer_len();
    let mut a = vec![0.0; rows * da];
    let mut b = vec![0.0; rows * db];
    for r in 0..rows {
        a[r * da..(r + 1) * da].copy_from_slice(&x.data[r * d..r * d + da]);
        b[r * db..(r + 1) * db].copy_from_slice(&x.data[r * d + da..(r + 1) * d]);
    }
    let mut sa = x.shape.clone();
    *sa.last_mut().unwrap() = da;
    let mut sb = x.shape.clone();
    *sb.last_mut().unwrap() = db;
    (Tensor { shape: sa, data: a }, Tensor { shape: sb, data: b })
}

/// Select columns of the last dim: `[.., n] -> [.., idx.len()]`.
pub fn index_lastdim(x: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let n = x.last_dim();
    if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
        return Err(Error::arg(format!("index {bad} out of range (last dim {n})")));
    }
    let rows = x.outer_len();
    let m = idx.len();
    let mut shape = x.shape.clone();
    *shape.last_mut().unwrap() = m;
    let mut data = vec![0.0; rows * m];
    for r in 0..rows {
        let src = &x.data[r * n..(r + 1) * n];
        for (j, &c) in idx.iter().enumerate() {
            data[r * m + j] = src[c];
        }
    }
    Ok(Tensor { shape, data })
}

/// Adjoint of `index_lastdim`.
pub fn scatter_lastdim(grad: &Tensor, idx: &[usize], n: usize) -> Tensor {
    let m = grad.last_dim();
    let rows = grad.outer_len();
    let mut shape = grad.shape.clone();
    *shape.last_mut().unwrap() = n;
    let mut data = vec![0.0; rows * n];
    for r in 0..rows {
        for (j, &c) in idx.iter().enumerate() {
            data[r * n + c] += grad.data[r * m + j];
        }
    }
    Tensor { shape, data }
}

/// Take index `i` along axis 1: `[a, b, rest..] -> [a, rest..]`.
pub fn index_axis1(x: &Tensor, i: usize) -> Result<Tensor> {
    if x.rank() < 2 {
        return Err(Error::dim("index_axis1 needs rank >= 2".to_string()));
    }
    let a = x.shape[0];
    let b = x.shape[1];
    if i >= b {
        return Err(Error::arg(format!("axis-1 index {i} out of range ({b})")));
    }
    let inner: usize = x.shape[2..].iter().product();
    let mut shape = vec![a];
    shape.extend_from_slice(&x.shape[2..]);
    let mut data = vec![0.0; a * inner];
    for ia in 0..a {
        let src = &x.data[(ia * b + i) * inner..(ia * b + i + 1) * inner];
        data[ia * inner..(ia + 1) * inner].copy_from_slice(src);
    }
    Tensor::from_vec(shape, data)
}

/// Adjoint of `index_axis1`: place `grad` back at index `i` of axis 1.
pub fn scatter_axis1(grad: &Tensor, i: usize, b: usize) -> Tensor {
    let a = grad.shape[0];
    let inner: usize = grad.shape[1..].iter().product();
    let mut shape = vec![a, b];
    shape.extend_from_slice(&grad.shape[1..]);
    let mut data = vec![0.0; a * b * inner];
    for ia in 0..a {
        let dst = &mut data[(ia * b + i) * inner..(ia * b + i + 1) * inner];
        dst.copy_from_slice(&grad.data[ia * inner..(ia + 1) * inner]);
    }
    Tensor { shape, data }
}

/// Mean over the last dim, keeping it as size 1.
pub fn mean_lastdim(x: &Tensor) -> Tensor {
    let n = x.last_dim();
    let rows = x.outer_len();
    let mut shape = x.shape.clone();
    *shape.last_mut().unwrap() = 1;
    let mut data = vec![0.0; rows];
    for r in 0..rows {
        data[r] = x.data[r * n..(r + 1) * n].iter().sum::<f64>() / n as f64;
    }
    Tensor { shape, data }
}

/// Sum over the last dim, keeping it as size 1.
pub fn sum_lastdim(x: &Tensor) -> Tensor {
    let n = x.last_dim();
    let rows = x.outer_len();
    let mut shape = x.shape.clone();
    *shape.last_mut().unwrap() = 1;
    let mut data = vec![0.0; rows];
    for r in 0..rows {
        data[r] = x.data[r * n..(r + 1) * n].iter().sum::<f64>();
    }
    Tensor { shape, data }
}
