use super::{count_macs, cst, numel, Element, Tensor};
use crate::error::{shape_err, Result};

/// Elementwise binary operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_raw<T: Element>(data: &[T], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<T>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return (out_shape, out);
    }
    let rank = out_shape.len();
    if rank == 0 {
        out.extend_from_slice(data);
        return (out_shape, out);
    }
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    let last = rank - 1;
    let inner = out_shape[last];
    let inner_stride = src_strides[last];
    loop {
        for j in 0..inner {
            out.push(data[off + j * inner_stride]);
        }
        // advance every axis except the innermost
        let mut ax = last;
        loop {
            if ax == 0 {
                return (out_shape, out);
            }
            ax -= 1;
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

/// c[i,j] += sum_k a[i,k] b[k,j]
fn mm_acc<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// da[i,p] += sum_j g[i,j] b[p,j]
fn mm_g_bt_acc<T: Element>(g: &[T], b: &[T], da: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = T::zero();
            for (&gv, &bv) in grow.iter().zip(brow) {
                s += gv * bv;
            }
            da[i * k + p] += s;
        }
    }
}

/// db[p,j] += sum_i a[i,p] g[i,j]
fn mm_at_g_acc<T: Element>(a: &[T], g: &[T], db: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let drow = &mut db[p * n..(p + 1) * n];
            for (dv, &gv) in drow.iter_mut().zip(grow) {
                *dv += av * gv;
            }
        }
    }
}

/// Broadcast plan for the leading (batch) extents of a matmul.
struct BatchPlan {
    shape: Vec<usize>,
    a_offsets: Vec<usize>,
    b_offsets: Vec<usize>,
}

fn batch_plan(a_batch: &[usize], b_batch: &[usize]) -> Option<BatchPlan> {
    let nb = a_batch.len().max(b_batch.len());
    let pad = |s: &[usize]| {
        let mut v = vec![1; nb - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(a_batch), pad(b_batch));
    let mut shape = Vec::with_capacity(nb);
    for (&x, &y) in pa.iter().zip(&pb) {
        match (x, y) {
            _ if x == y => shape.push(x),
            (1, _) => shape.push(y),
            (_, 1) => shape.push(x),
            _ => return None,
        }
    }
    let (sa, sb) = (strides(&pa), strides(&pb));
    let total = numel(&shape);
    let mut a_offsets = Vec::with_capacity(total);
    let mut b_offsets = Vec::with_capacity(total);
    let mut idx = vec![0usize; nb];
    for _ in 0..total {
        let mut ao = 0;
        let mut bo = 0;
        for d in 0..nb {
            if pa[d] != 1 {
                ao += idx[d] * sa[d];
            }
            if pb[d] != 1 {
                bo += idx[d] * sb[d];
            }
        }
        a_offsets.push(ao);
        b_offsets.push(bo);
        for d in (0..nb).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Some(BatchPlan { shape, a_offsets, b_offsets })
}

fn unary<T: Element>(
    x: &Tensor<T>,
    name: &'static str,
    f: impl Fn(T) -> T,
    df: impl Fn(T) -> T + 'static,
) -> Result<Tensor<T>> {
    let data: Vec<T> = x.data().iter().map(|&v| f(v)).collect();
    let xs = x.clone();
    Tensor::from_op(name, x.shape().to_vec(), data, &[x], move |g| {
        let xd = xs.data();
        vec![Some(g.iter().zip(xd.iter()).map(|(&gv, &v)| gv * df(v)).collect())]
    })
}

fn gaussian_cdf<T: Element>(x: T) -> T {
    cst::<T>(0.5) * (T::one() + (x * cst(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gaussian_pdf<T: Element>(x: T) -> T {
    cst::<T>(1.0 / (2.0 * std::f64::consts::PI).sqrt()) * (-(x * x) * cst(0.5)).exp()
}

fn sigmoid_scalar<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Element> Tensor<T> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() {
            return shape_err(format!("cannot reshape {:?} into {:?}", self.shape(), shape));
        }
        Tensor::from_op("reshape", shape.to_vec(), self.to_vec(), &[self], |g| {
            vec![Some(g.to_vec())]
        })
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return shape_err(format!("invalid permutation {axes:?} for rank {rank}"));
        }
        let (out_shape, data) = permute_raw(&self.data(), self.shape(), axes);
        let mut inverse = vec![0; rank];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let out_shape_c = out_shape.clone();
        Tensor::from_op("permute", out_shape, data, &[self], move |g| {
            vec![Some(permute_raw(g, &out_shape_c, &inverse).1)]
        })
    }

    /// Swaps the last two axes: `[.., L, D] -> [.., D, L]`.
    pub fn permute_last_two(&self) -> Result<Tensor<T>> {
        let rank = self.rank();
        if rank < 2 {
            return shape_err(format!("permute_last_two needs rank >= 2, got {rank}"));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(&axes)
    }

    /// Batched matrix product `[.., M, K] x [.., K, N] -> [.., M, N]` with
    /// broadcasting over the leading extents.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return shape_err(format!("matmul needs rank >= 2 operands, got {sa:?} and {sb:?}"));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return shape_err(format!("matmul inner extents differ: {sa:?} x {sb:?}"));
        }
        let Some(plan) = batch_plan(&sa[..sa.len() - 2], &sb[..sb.len() - 2]) else {
            return shape_err(format!("matmul batch extents not broadcastable: {sa:?} x {sb:?}"));
        };
        let nbatch = plan.a_offsets.len();
        let mut out = vec![T::zero(); nbatch * m * n];
        {
            let (ad, bd) = (self.data(), other.data());
            for bi in 0..nbatch {
                let ao = plan.a_offsets[bi] * m * k;
                let bo = plan.b_offsets[bi] * k * n;
                mm_acc(&ad[ao..ao + m * k], &bd[bo..bo + k * n], &mut out[bi * m * n..(bi + 1) * m * n], m, k, n);
            }
        }
        count_macs((nbatch * m * k * n) as u64);
        let mut shape = plan.shape.clone();
        shape.extend_from_slice(&[m, n]);
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op("matmul", shape, out, &[self, other], move |g| {
            let (ad, bd) = (a.data(), b.data());
            let da = a.requires_grad().then(|| {
                let mut da = vec![T::zero(); ad.len()];
                for bi in 0..nbatch {
                    let ao = plan.a_offsets[bi] * m * k;
                    let bo = plan.b_offsets[bi] * k * n;
                    mm_g_bt_acc(&g[bi * m * n..(bi + 1) * m * n], &bd[bo..bo + k * n], &mut da[ao..ao + m * k], m, k, n);
                }
                da
            });
            let db = b.requires_grad().then(|| {
                let mut db = vec![T::zero(); bd.len()];
                for bi in 0..nbatch {
                    let ao = plan.a_offsets[bi] * m * k;
                    let bo = plan.b_offsets[bi] * k * n;
                    mm_at_g_acc(&ad[ao..ao + m * k], &g[bi * m * n..(bi + 1) * m * n], &mut db[bo..bo + k * n], m, k, n);
                }
                db
            });
            vec![da, db]
        })
    }

    /// Elementwise `op` on equal shapes, or with either side a single element.
    pub fn elementwise(&self, op: BinaryOp, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (na, nb) = (self.numel(), other.numel());
        let shape = if self.shape() == other.shape() || nb == 1 {
            self.shape().to_vec()
        } else if na == 1 {
            other.shape().to_vec()
        } else {
            return shape_err(format!(
                "elementwise shapes differ: {:?} vs {:?}",
                self.shape(),
                other.shape()
            ));
        };
        let n = numel(&shape);
        let out: Vec<T> = {
            let (ad, bd) = (self.data(), other.data());
            (0..n)
                .map(|i| {
                    let x = ad[if na == 1 { 0 } else { i }];
                    let y = bd[if nb == 1 { 0 } else { i }];
                    match op {
                        BinaryOp::Add => x + y,
                        BinaryOp::Sub => x - y,
                        BinaryOp::Mul => x * y,
                    }
                })
                .collect()
        };
        let name = match op {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
        };
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(name, shape, out, &[self, other], move |g| {
            // gradient w.r.t. one side, reduced when that side was broadcast
            let side = |t: &Tensor<T>, n_side: usize, coeff: &dyn Fn(usize) -> T| {
                t.requires_grad().then(|| {
                    if n_side == 1 && n != 1 {
                        vec![(0..n).map(|i| g[i] * coeff(i)).sum()]
                    } else {
                        (0..n).map(|i| g[i] * coeff(i)).collect()
                    }
                })
            };
            match op {
                BinaryOp::Add => vec![side(&a, na, &|_| T::one()), side(&b, nb, &|_| T::one())],
                BinaryOp::Sub => vec![side(&a, na, &|_| T::one()), side(&b, nb, &|_| -T::one())],
                BinaryOp::Mul => {
                    let (ad, bd) = (a.data(), b.data());
                    let by = |i: usize| bd[if nb == 1 { 0 } else { i }];
                    let ax = |i: usize| ad[if na == 1 { 0 } else { i }];
                    vec![side(&a, na, &by), side(&b, nb, &ax)]
                }
            }
        })
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.elementwise(BinaryOp::Add, other)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.elementwise(BinaryOp::Sub, other)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.elementwise(BinaryOp::Mul, other)
    }

    /// Adds `other`, whose shape must be a suffix of `self`'s shape, repeated
    /// over the leading extents (bias rows, positional tables).
    pub fn add_broadcast(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return shape_err(format!("cannot broadcast {sb:?} onto {sa:?}"));
        }
        let inner = other.numel();
        let out: Vec<T> = {
            let (ad, bd) = (self.data(), other.data());
            if inner == 0 {
                ad.clone()
            } else {
                ad.chunks(inner)
                    .flat_map(|row| row.iter().zip(bd.iter()).map(|(&x, &y)| x + y))
                    .collect()
            }
        };
        let (ra, rb) = (self.requires_grad(), other.requires_grad());
        Tensor::from_op("add_broadcast", sa.to_vec(), out, &[self, other], move |g| {
            let db = rb.then(|| {
                let mut acc = vec![T::zero(); inner];
                if inner > 0 {
                    for row in g.chunks(inner) {
                        acc.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                }
                acc
            });
            vec![ra.then(|| g.to_vec()), db]
        })
    }

    pub fn mul_scalar(&self, c: T) -> Result<Tensor<T>> {
        let out = self.data().iter().map(|&v| v * c).collect();
        Tensor::from_op("mul_scalar", self.shape().to_vec(), out, &[self], move |g| {
            vec![Some(g.iter().map(|&v| v * c).collect())]
        })
    }

    /// Exact GELU, `x * Phi(x)` with the Gaussian CDF from `erf`.
    pub fn gelu(&self) -> Result<Tensor<T>> {
        unary(self, "gelu", |x| x * gaussian_cdf(x), |x| gaussian_cdf(x) + x * gaussian_pdf(x))
    }

    pub fn sigmoid(&self) -> Result<Tensor<T>> {
        unary(self, "sigmoid", sigmoid_scalar, |x| {
            let s = sigmoid_scalar(x);
            s * (T::one() - s)
        })
    }

    /// Softmax over the last extent.
    pub fn softmax_last(&self) -> Result<Tensor<T>> {
        let n = *self.shape().last().unwrap_or(&1);
        if n == 0 || self.rank() == 0 {
            return shape_err("softmax over an empty or rank-0 tensor");
        }
        let mut out = self.to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        let y = out.clone();
        Tensor::from_op("softmax", self.shape().to_vec(), out, &[self], move |g| {
            let mut dx = vec![T::zero(); g.len()];
            for ((dr, gr), yr) in dx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for ((d, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                    *d = yv * (gv - dot);
                }
            }
            vec![Some(dx)]
        })
    }

    /// Layer normalization over the last extent with population variance,
    /// followed by the affine `gain * xhat + bias`.
    pub fn layer_norm(&self, gain: &Tensor<T>, bias: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
        let n = match self.shape().last() {
            Some(&n) if n > 0 => n,
            _ => return shape_err(format!("layer_norm over empty extent of {:?}", self.shape())),
        };
        if gain.shape() != [n] || bias.shape() != [n] {
            return shape_err(format!(
                "layer_norm gain/bias {:?}/{:?} do not match extent {n}",
                gain.shape(),
                bias.shape()
            ));
        }
        let rows = self.numel() / n;
        let mut xhat = vec![T::zero(); self.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); self.numel()];
        {
            let (xd, gd, bd) = (self.data(), gain.data(), bias.data());
            let nf = cst::<T>(n as f64);
            for r in 0..rows {
                let row = &xd[r * n..(r + 1) * n];
                let mean = row.iter().copied().sum::<T>() / nf;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
                let rs = T::one() / (var + eps).sqrt();
                rstd[r] = rs;
                for j in 0..n {
                    let h = (row[j] - mean) * rs;
                    xhat[r * n + j] = h;
                    out[r * n + j] = h * gd[j] + bd[j];
                }
            }
        }
        let (rx, rg, rb) = (self.requires_grad(), gain.requires_grad(), bias.requires_grad());
        let gain_c = gain.clone();
        Tensor::from_op("layer_norm", self.shape().to_vec(), out, &[self, gain, bias], move |g| {
            let gd = gain_c.data();
            let nf = cst::<T>(n as f64);
            let dx = rx.then(|| {
                let mut dx = vec![T::zero(); g.len()];
                let mut dxh = vec![T::zero(); n];
                for r in 0..rows {
                    let gr = &g[r * n..(r + 1) * n];
                    let hr = &xhat[r * n..(r + 1) * n];
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..n {
                        dxh[j] = gr[j] * gd[j];
                        s1 += dxh[j];
                        s2 += dxh[j] * hr[j];
                    }
                    let (m1, m2) = (s1 / nf, s2 / nf);
                    for j in 0..n {
                        dx[r * n + j] = rstd[r] * (dxh[j] - m1 - hr[j] * m2);
                    }
                }
                dx
            });
            let dg = rg.then(|| {
                let mut dg = vec![T::zero(); n];
                for r in 0..rows {
                    for j in 0..n {
                        dg[j] += g[r * n + j] * xhat[r * n + j];
                    }
                }
                dg
            });
            let db = rb.then(|| {
                let mut db = vec![T::zero(); n];
                for row in g.chunks(n) {
                    db.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                }
                db
            });
            vec![dx, dg, db]
        })
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self) -> Result<Tensor<T>> {
        let s: T = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op("sum", Vec::new(), vec![s], &[self], move |g| vec![Some(vec![g[0]; n])])
    }

    /// Mean of all elements as a rank-0 tensor.
    pub fn mean(&self) -> Result<Tensor<T>> {
        let n = self.numel();
        if n == 0 {
            return shape_err("mean of an empty tensor");
        }
        let nf = cst::<T>(n as f64);
        let s: T = self.data().iter().copied().sum::<T>() / nf;
        Tensor::from_op("mean", Vec::new(), vec![s], &[self], move |g| vec![Some(vec![g[0] / nf; n])])
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let Some(first) = parts.first() else {
            return shape_err("concat of zero tensors");
        };
        let rank = first.rank();
        if axis >= rank {
            return shape_err(format!("concat axis {axis} out of range for rank {rank}"));
        }
        for p in parts {
            let s = p.shape();
            if s.len() != rank || (0..rank).any(|d| d != axis && s[d] != first.shape()[d]) {
                return shape_err(format!("concat extents differ: {:?} vs {:?}", first.shape(), s));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        {
            let datas: Vec<_> = parts.iter().map(|p| p.data()).collect();
            for o in 0..outer {
                for (d, &len) in datas.iter().zip(&lens) {
                    out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
                }
            }
        }
        let needs: Vec<bool> = parts.iter().map(|p| p.requires_grad()).collect();
        Tensor::from_op("concat", shape, out, parts, move |g| {
            let mut grads: Vec<Option<Vec<T>>> = needs
                .iter()
                .zip(&lens)
                .map(|(&nd, &len)| nd.then(|| Vec::with_capacity(outer * len * inner)))
                .collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gslot, &len) in grads.iter_mut().zip(&lens) {
                    let chunk = &g[off..off + len * inner];
                    if let Some(v) = gslot {
                        v.extend_from_slice(chunk);
                    }
                    off += len * inner;
                }
            }
            grads
        })
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return shape_err(format!("narrow({axis}, {start}, {len}) out of range for {shape:?}"));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        {
            let d = self.data();
            for o in 0..outer {
                let base = (o * full + start) * inner;
                out.extend_from_slice(&d[base..base + len * inner]);
            }
        }
        let mut oshape = shape.to_vec();
        oshape[axis] = len;
        let n_in = self.numel();
        Tensor::from_op("narrow", oshape, out, &[self], move |g| {
            let mut dx = vec![T::zero(); n_in];
            for o in 0..outer {
                let base = (o * full + start) * inner;
                dx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(dx)]
        })
    }

    /// Embedding lookup: rows of a `[V, D]` table selected by `ids`, giving `[ids.len(), D]`.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor<T>> {
        if self.rank() != 2 {
            return shape_err(format!("gather_rows needs a rank-2 table, got {:?}", self.shape()));
        }
        let (v, d) = (self.shape()[0], self.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return shape_err(format!("row id {bad} out of range for table of {v} rows"));
        }
        let out: Vec<T> = {
            let t = self.data();
            ids.iter().flat_map(|&i| t[i * d..(i + 1) * d].iter().copied()).collect()
        };
        let ids = ids.to_vec();
        Tensor::from_op("gather_rows", vec![ids.len(), d], out, &[self], move |g| {
            let mut dt = vec![T::zero(); v * d];
            for (r, &i) in ids.iter().enumerate() {
                dt[i * d..(i + 1) * d]
                    .iter_mut()
                    .zip(&g[r * d..(r + 1) * d])
                    .for_each(|(a, &b)| *a += b);
            }
            vec![Some(dt)]
        })
    }

    /// 3x3 convolution with stride 1 and zero "same" padding on `[B, C, H, W]`.
    pub fn conv3x3_same(&self, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let xs = self.shape();
        let ws = weight.shape();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != 3 || ws[3] != 3 || bias.shape() != [ws[0]] {
            return shape_err(format!(
                "conv3x3 shapes incompatible: x {xs:?}, w {ws:?}, b {:?}",
                bias.shape()
            ));
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let o = ws[0];
        let mut out = vec![T::zero(); b * o * h * w];
        {
            let (xd, wd, bd) = (self.data(), weight.data(), bias.data());
            for bi in 0..b {
                for oc in 0..o {
                    let plane = &mut out[(bi * o + oc) * h * w..(bi * o + oc + 1) * h * w];
                    plane.iter_mut().for_each(|v| *v = bd[oc]);
                    for ic in 0..c {
                        let xp = &xd[(bi * c + ic) * h * w..(bi * c + ic + 1) * h * w];
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let wv = wd[((oc * c + ic) * 3 + ky) * 3 + kx];
                                for y in 0..h {
                                    let sy = y as isize + ky as isize - 1;
                                    if sy < 0 || sy >= h as isize {
                                        continue;
                                    }
                                    for x in 0..w {
                                        let sx = x as isize + kx as isize - 1;
                                        if sx < 0 || sx >= w as isize {
                                            continue;
                                        }
                                        plane[y * w + x] += wv * xp[sy as usize * w + sx as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        count_macs((b * o * c * 9 * h * w) as u64);
        let (xt, wt) = (self.clone(), weight.clone());
        let (rx, rw, rb) = (self.requires_grad(), weight.requires_grad(), bias.requires_grad());
        Tensor::from_op("conv3x3", vec![b, o, h, w], out, &[self, weight, bias], move |g| {
            let (xd, wd) = (xt.data(), wt.data());
            let mut dx = rx.then(|| vec![T::zero(); xd.len()]);
            let mut dw = rw.then(|| vec![T::zero(); wd.len()]);
            let db = rb.then(|| {
                (0..o)
                    .map(|oc| (0..b).map(|bi| g[(bi * o + oc) * h * w..(bi * o + oc + 1) * h * w].iter().copied().sum::<T>()).sum())
                    .collect()
            });
            for bi in 0..b {
                for oc in 0..o {
                    let gp = &g[(bi * o + oc) * h * w..(bi * o + oc + 1) * h * w];
                    for ic in 0..c {
                        let xbase = (bi * c + ic) * h * w;
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let widx = ((oc * c + ic) * 3 + ky) * 3 + kx;
                                let wv = wd[widx];
                                let mut acc = T::zero();
                                for y in 0..h {
                                    let sy = y as isize + ky as isize - 1;
                                    if sy < 0 || sy >= h as isize {
                                        continue;
                                    }
                                    for x in 0..w {
                                        let sx = x as isize + kx as isize - 1;
                                        if sx < 0 || sx >= w as isize {
                                            continue;
                                        }
                                        let xi = xbase + sy as usize * w + sx as usize;
                                        let gv = gp[y * w + x];
                                        acc += gv * xd[xi];
                                        if let Some(dx) = dx.as_mut() {
                                            dx[xi] += gv * wv;
                                        }
                                    }
                                }
                                if let Some(dw) = dw.as_mut() {
                                    dw[widx] += acc;
                                }
                            }
                        }
                    }
                }
            }
            vec![dx, dw, db]
        })
    }
}
