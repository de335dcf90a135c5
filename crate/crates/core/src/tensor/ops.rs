use super::gemm::gemm;
use super::{Result, Tensor, TensorError};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

pub(crate) enum Op {
    MatMul { a: Tensor, b: Tensor, trans_b: bool },
    Transpose(Tensor),
    Add(Tensor, Tensor),
    AddRowBias(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    Sum(Tensor),
    Softmax { x: Tensor, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Tensor, gain: Tensor, bias: Tensor, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Tensor),
    Embed { table: Tensor, ids: Vec<usize> },
    ConcatRows(Vec<Tensor>),
    ConcatCols(Vec<Tensor>),
    SliceRows { x: Tensor, start: usize },
    SliceCols { x: Tensor, start: usize },
    CrossEntropy { logits: Tensor, targets: Vec<usize>, ignore: usize, probs: Vec<f64>, count: usize },
}

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.shape().len() != rank {
        return Err(TensorError::Rank {
            op,
            expected: rank,
            shape: t.shape().to_vec(),
        });
    }
    Ok(())
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl Tensor {
    /// `[m,k] · [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.matmul_impl(other, false)
    }

    /// `[m,k] · [n,k]ᵀ -> [m,n]`.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        self.matmul_impl(other, true)
    }

    fn matmul_impl(&self, other: &Tensor, trans_b: bool) -> Result<Tensor> {
        let name = if trans_b { "matmul_nt" } else { "matmul" };
        expect_rank(name, self, 2)?;
        expect_rank(name, other, 2)?;
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let (kb, n) = if trans_b {
            (other.shape()[1], other.shape()[0])
        } else {
            (other.shape()[0], other.shape()[1])
        };
        if k != kb {
            return Err(mismatch(name, self, other));
        }
        let mut out = vec![0.0; m * n];
        let b_view = if trans_b { (other.data(), 1, k) } else { (other.data(), n, 1) };
        gemm(m, k, n, (self.data(), k, 1), b_view, &mut out, 0.0);
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            Op::MatMul {
                a: self.clone(),
                b: other.clone(),
                trans_b,
            },
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        expect_rank("transpose", self, 2)?;
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let src = self.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(Tensor::from_op(vec![c, r], out, Op::Transpose(self.clone())))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(mismatch("add", self, other));
        }
        let out = self.data().iter().zip(other.data()).map(|(a, b)| a + b).collect();
        Ok(Tensor::from_op(self.shape().to_vec(), out, Op::Add(self.clone(), other.clone())))
    }

    /// `[m,n] + [n]`, bias repeated over rows.
    pub fn add_row_bias(&self, bias: &Tensor) -> Result<Tensor> {
        expect_rank("add_row_bias", self, 2)?;
        if bias.shape() != [self.cols()] {
            return Err(mismatch("add_row_bias", self, bias));
        }
        let b = bias.data();
        let mut out = self.data().to_vec();
        for row in out.chunks_mut(b.len().max(1)) {
            row.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::AddRowBias(self.clone(), bias.clone()),
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(mismatch("mul", self, other));
        }
        let out = self.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        Ok(Tensor::from_op(self.shape().to_vec(), out, Op::Mul(self.clone(), other.clone())))
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        let out = self.data().iter().map(|x| x * factor).collect();
        Tensor::from_op(self.shape().to_vec(), out, Op::Scale(self.clone(), factor))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self) -> Tensor {
        Tensor::from_op(Vec::new(), vec![self.data().iter().sum()], Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Tensor {
        self.sum().scale(1.0 / self.numel().max(1) as f64)
    }

    /// Softmax along `axis`, stabilised by subtracting the running maximum.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let rank = self.shape().len();
        if axis >= rank {
            return Err(TensorError::Axis { axis, rank });
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let len = self.shape()[axis];
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * len + i) * inner + j;
                let max = (0..len).map(|i| x[at(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for i in 0..len {
                    let e = (x[at(i)] - max).exp();
                    out[at(i)] = e;
                    total += e;
                }
                for i in 0..len {
                    out[at(i)] /= total;
                }
            }
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::Softmax {
                x: self.clone(),
                outer,
                len,
                inner,
            },
        ))
    }

    /// Normalises the last axis to zero mean and unit variance, then applies
    /// `gain` and `bias` (both shaped `[last]`).
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let d = self.cols();
        if gain.shape() != [d] {
            return Err(mismatch("layer_norm", self, gain));
        }
        if bias.shape() != [d] {
            return Err(mismatch("layer_norm", self, bias));
        }
        let x = self.data();
        let rows = if d == 0 { 0 } else { x.len() / d };
        let mut xhat = vec![0.0; x.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        let (g, b) = (gain.data(), bias.data());
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for c in 0..d {
                let h = (row[c] - mean) * s;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::LayerNorm {
                x: self.clone(),
                gain: gain.clone(),
                bias: bias.clone(),
                xhat,
                rstd,
            },
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor {
        let out = self
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh()))
            .collect();
        Tensor::from_op(self.shape().to_vec(), out, Op::Gelu(self.clone()))
    }

    /// Gathers rows of a `[V,d]` table.
    pub fn embed(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        expect_rank("embed", table, 2)?;
        let (v, d) = (table.shape()[0], table.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::Index { index: id, len: v });
            }
            out.extend_from_slice(&table.data()[id * d..(id + 1) * d]);
        }
        Ok(Tensor::from_op(
            vec![ids.len(), d],
            out,
            Op::Embed {
                table: table.clone(),
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or(TensorError::Rank {
            op: "concat_rows",
            expected: 2,
            shape: Vec::new(),
        })?;
        let cols = first.cols();
        let mut rows = 0;
        for p in parts {
            expect_rank("concat_rows", p, 2)?;
            if p.cols() != cols {
                return Err(mismatch("concat_rows", first, p));
            }
            rows += p.rows();
        }
        let mut out = Vec::with_capacity(rows * cols);
        for p in parts {
            out.extend_from_slice(p.data());
        }
        Ok(Tensor::from_op(vec![rows, cols], out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or(TensorError::Rank {
            op: "concat_cols",
            expected: 2,
            shape: Vec::new(),
        })?;
        let rows = first.rows();
        let mut cols = 0;
        for p in parts {
            expect_rank("concat_cols", p, 2)?;
            if p.rows() != rows {
                return Err(mismatch("concat_cols", first, p));
            }
            cols += p.cols();
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                let c = p.cols();
                out.extend_from_slice(&p.data()[r * c..(r + 1) * c]);
            }
        }
        Ok(Tensor::from_op(vec![rows, cols], out, Op::ConcatCols(parts.to_vec())))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        expect_rank("slice_rows", self, 2)?;
        if start > end || end > self.rows() {
            return Err(TensorError::Index {
                index: end,
                len: self.rows(),
            });
        }
        let c = self.cols();
        let out = self.data()[start * c..end * c].to_vec();
        Ok(Tensor::from_op(
            vec![end - start, c],
            out,
            Op::SliceRows {
                x: self.clone(),
                start,
            },
        ))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor> {
        expect_rank("slice_cols", self, 2)?;
        if start > end || end > self.cols() {
            return Err(TensorError::Index {
                index: end,
                len: self.cols(),
            });
        }
        let (r, c) = (self.rows(), self.cols());
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&self.data()[i * c + start..i * c + end]);
        }
        Ok(Tensor::from_op(
            vec![r, w],
            out,
            Op::SliceCols {
                x: self.clone(),
                start,
            },
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `self` (`[n,V]`), skipping positions equal to `ignore_index`.
    pub fn cross_entropy(&self, targets: &[usize], ignore_index: usize) -> Result<Tensor> {
        expect_rank("cross_entropy", self, 2)?;
        let (n, v) = (self.rows(), self.cols());
        if targets.len() != n {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                left: self.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let x = self.data();
        let mut probs = vec![0.0; n * v];
        let mut total = 0.0;
        let mut count = 0;
        for (r, &t) in targets.iter().enumerate() {
            if t == ignore_index {
                continue;
            }
            if t >= v {
                return Err(TensorError::Index { index: t, len: v });
            }
            let row = &x[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|l| (l - max).exp()).sum();
            for (p, l) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (l - max).exp() / z;
            }
            total += max + z.ln() - row[t];
            count += 1;
        }
        if count == 0 {
            return Err(TensorError::UndefinedLoss);
        }
        Ok(Tensor::from_op(
            Vec::new(),
            vec![total / count as f64],
            Op::CrossEntropy {
                logits: self.clone(),
                targets: targets.to_vec(),
                ignore: ignore_index,
                probs,
                count,
            },
        ))
    }
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<&Tensor> {
        match self {
            Op::MatMul { a, b, .. } | Op::Add(a, b) | Op::AddRowBias(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::Transpose(x)
            | Op::Scale(x, _)
            | Op::Sum(x)
            | Op::Gelu(x)
            | Op::Softmax { x, .. }
            | Op::SliceRows { x, .. }
            | Op::SliceCols { x, .. } => vec![x],
            Op::LayerNorm { x, gain, bias, .. } => vec![x, gain, bias],
            Op::Embed { table, .. } => vec![table],
            Op::ConcatRows(parts) | Op::ConcatCols(parts) => parts.iter().collect(),
            Op::CrossEntropy { logits, .. } => vec![logits],
        }
    }

    /// Pushes `g = d(root)/d(out)` back to this op's inputs.
    pub(crate) fn backward(&self, out: &Tensor, g: &[f64]) {
        match self {
            Op::MatMul { a, b, trans_b } => {
                let m = a.shape()[0];
                let k = a.shape()[1];
                let n = out.shape()[1];
                if a.requires_grad() {
                    // dA = dC · Bopᵀ
                    let bt = if *trans_b { (b.data(), k, 1) } else { (b.data(), 1, n) };
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, (g, n, 1), bt, &mut da, 0.0);
                    a.accumulate(&da);
                }
                if b.requires_grad() {
                    let mut db = vec![0.0; k * n];
                    if *trans_b {
                        // dB[n,k] = dCᵀ · A
                        gemm(n, m, k, (g, 1, n), (a.data(), k, 1), &mut db, 0.0);
                    } else {
                        // dB[k,n] = Aᵀ · dC
                        gemm(k, m, n, (a.data(), 1, k), (g, n, 1), &mut db, 0.0);
                    }
                    b.accumulate(&db);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (x.shape()[0], x.shape()[1]);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g[j * r + i];
                    }
                }
                x.accumulate(&dx);
            }
            Op::Add(a, b) => {
                a.accumulate(g);
                b.accumulate(g);
            }
            Op::AddRowBias(x, bias) => {
                x.accumulate(g);
                if bias.requires_grad() {
                    let n = bias.numel();
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n.max(1)) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    bias.accumulate(&db);
                }
            }
            Op::Mul(a, b) => {
                if a.requires_grad() {
                    let da: Vec<f64> = g.iter().zip(b.data()).map(|(g, y)| g * y).collect();
                    a.accumulate(&da);
                }
                if b.requires_grad() {
                    let db: Vec<f64> = g.iter().zip(a.data()).map(|(g, x)| g * x).collect();
                    b.accumulate(&db);
                }
            }
            Op::Scale(x, factor) => {
                let dx: Vec<f64> = g.iter().map(|v| v * factor).collect();
                x.accumulate(&dx);
            }
            Op::Sum(x) => x.accumulate(&vec![g[0]; x.numel()]),
            Op::Softmax { x, outer, len, inner } => {
                let y = out.data();
                let mut dx = vec![0.0; y.len()];
                for o in 0..*outer {
                    for j in 0..*inner {
                        let at = |i: usize| (o * len + i) * inner + j;
                        let dot: f64 = (0..*len).map(|i| g[at(i)] * y[at(i)]).sum();
                        for i in 0..*len {
                            dx[at(i)] = y[at(i)] * (g[at(i)] - dot);
                        }
                    }
                }
                x.accumulate(&dx);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = gain.numel();
                let gv = gain.data();
                if x.requires_grad() {
                    let mut dx = vec![0.0; xhat.len()];
                    for (r, s) in rstd.iter().enumerate() {
                        let span = r * d..(r + 1) * d;
                        let (gr, hr) = (&g[span.clone()], &xhat[span.clone()]);
                        let dh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for c in 0..d {
                            dx[r * d + c] = s * (dh[c] - mean_dh - hr[c] * mean_dh_h);
                        }
                    }
                    x.accumulate(&dx);
                }
                if gain.requires_grad() || bias.requires_grad() {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for (i, (gv, hv)) in g.iter().zip(xhat).enumerate() {
                        dg[i % d] += gv * hv;
                        db[i % d] += gv;
                    }
                    gain.accumulate(&dg);
                    bias.accumulate(&db);
                }
            }
            Op::Gelu(x) => {
                let dx: Vec<f64> = x
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| {
                        let u = SQRT_2_OVER_PI * (v + GELU_CUBIC * v * v * v);
                        let t = u.tanh();
                        let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * v * v);
                        gv * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                    })
                    .collect();
                x.accumulate(&dx);
            }
            Op::Embed { table, ids } => {
                let d = table.shape()[1];
                let mut dt = vec![0.0; table.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    dt[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(&g[r * d..(r + 1) * d])
                        .for_each(|(a, b)| *a += b);
                }
                table.accumulate(&dt);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = p.numel();
                    p.accumulate(&g[offset..offset + n]);
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = out.rows();
                let total = out.cols();
                let mut col0 = 0;
                for p in parts {
                    let c = p.cols();
                    if p.requires_grad() {
                        let mut dp = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            dp.extend_from_slice(&g[r * total + col0..r * total + col0 + c]);
                        }
                        p.accumulate(&dp);
                    }
                    col0 += c;
                }
            }
            Op::SliceRows { x, start } => {
                let c = x.cols();
                let mut dx = vec![0.0; x.numel()];
                dx[start * c..start * c + g.len()].copy_from_slice(g);
                x.accumulate(&dx);
            }
            Op::SliceCols { x, start } => {
                let (r, c) = (x.rows(), x.cols());
                let w = out.cols();
                let mut dx = vec![0.0; x.numel()];
                for i in 0..r {
                    dx[i * c + start..i * c + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                x.accumulate(&dx);
            }
            Op::CrossEntropy { logits, targets, ignore, probs, count } => {
                let v = logits.cols();
                let scale = g[0] / *count as f64;
                let mut dl = vec![0.0; probs.len()];
                for (r, &t) in targets.iter().enumerate() {
                    if t == *ignore {
                        continue;
                    }
                    for c in 0..v {
                        dl[r * v + c] = scale * probs[r * v + c];
                    }
                    dl[r * v + t] -= scale;
                }
                logits.accumulate(&dl);
            }
        }
    }
}
