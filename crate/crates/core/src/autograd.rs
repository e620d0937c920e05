//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value and the information needed to push gradients back to its parents.
//! Graphs are built per episode and thrown away after the backward pass.
//! Nodes created from constants (or from frozen parameters) do not require
//! gradients, and no gradient work is done for subgraphs that only depend on
//! them.

use ndarray::linalg::general_mat_mul;
use ndarray::{concatenate, Array2, ArrayD, ArrayView2, Axis, Ix2, IxDyn, Slice};

use crate::error::{Error, Result};

pub type Tensor = ArrayD<f64>;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const BATCH_NORM_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias {
        x: Var,
        bias: Var,
        axis: usize,
    },
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    TransposeLast(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
        end: usize,
    },
    Elu(Var),
    Sigmoid(Var),
    Abs(Var),
    SumAll(Var),
    SumAxis(Var, usize),
    SoftmaxLast(Var),
    RowNormalize(Var),
    Conv3x3 {
        x: Var,
        w: Var,
        b: Var,
        cols: Array2<f64>,
    },
    Normalize {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    AvgPool2(Var),
    GlobalAvgPool(Var),
    PairwiseAbsDiff(Var, Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Array2<f64>,
    },
    KlDiv {
        p: Var,
        q: Var,
        floor: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-channel statistics measured by a batch-normalization node.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every leaf that requires them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn as2(t: &Tensor) -> ArrayView2<'_, f64> {
    t.view().into_dimensionality::<Ix2>().expect("2-D tensor")
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn pooled(len: usize) -> usize {
    (len / 2).max(1)
}

fn pool_window(i: usize, len: usize) -> (usize, usize) {
    let lo = 2 * i;
    (lo, (lo + 2).min(len))
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

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.len(), 1);
        t.iter().copied().next().unwrap_or(f64::NAN)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let out = self.value(a) + self.value(b);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "sub")?;
        let out = self.value(a) - self.value(b);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let out = self.value(a) * self.value(b);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a) * k;
        self.push(out, Op::Scale(a, k), &[a])
    }

    /// Adds a 1-D `bias` broadcast along `axis` of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(bias).to_vec();
        if axis >= xs.len() || bs != [xs[axis]] {
            return Err(Error::shape(format!(
                "add_bias: bias {bs:?} does not match axis {axis} of {xs:?}"
            )));
        }
        let inner: usize = xs[axis + 1..].iter().product();
        let bv = self.value(bias).iter().copied().collect::<Vec<_>>();
        let mut out = self.value(x).as_standard_layout().into_owned();
        let ol = out.as_slice_mut().expect("contiguous");
        if inner == 1 {
            for row in ol.chunks_exact_mut(bv.len()) {
                row.iter_mut().zip(&bv).for_each(|(v, b)| *v += b);
            }
        } else if inner > 0 {
            for block in ol.chunks_exact_mut(inner * bv.len()) {
                for (lane, b) in block.chunks_exact_mut(inner).zip(&bv) {
                    lane.iter_mut().for_each(|v| *v += b);
                }
            }
        }
        Ok(self.push(out, Op::AddBias { x, bias, axis }, &[x, bias]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul: {sa:?} x {sb:?}")));
        }
        let out = mm(as2(self.value(a)), as2(self.value(b))).into_dyn();
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `x · w + bias` for `x: [rows, in]`, `w: [in, out]`, `bias: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, bias, 1)
    }

    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape(format!("batch_matmul: {sa:?} x {sb:?}")));
        }
        let out = bmm(self.value(a), self.value(b));
        Ok(self.push(out, Op::BatchMatMul(a, b), &[a, b]))
    }

    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let nd = self.shape(a).len();
        if nd < 2 {
            return Err(Error::shape("transpose_last needs at least 2 axes"));
        }
        let mut v = self.value(a).view();
        v.swap_axes(nd - 2, nd - 1);
        let out = v.as_standard_layout().into_owned();
        Ok(self.push(out, Op::TransposeLast(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if t.len() != shape.iter().product::<usize>() {
            return Err(Error::shape(format!(
                "reshape: {:?} into {shape:?}",
                t.shape()
            )));
        }
        let out = t
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .map_err(|e| Error::shape(e.to_string()))?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let nd = self.shape(a).len();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&i| i >= nd || std::mem::replace(&mut seen[i], true)) {
            return Err(Error::shape(format!("permute: bad axes {axes:?} for {nd}-D")));
        }
        let out = self
            .value(a)
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .into_owned();
        Ok(self.push(out, Op::Permute(a, axes.to_vec()), &[a]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat of nothing"));
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = concatenate(Axis(axis), &views).map_err(|e| Error::shape(format!("concat: {e}")))?;
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis), parts))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let sh = self.shape(a);
        if axis >= sh.len() || start > end || end > sh[axis] {
            return Err(Error::shape(format!(
                "slice {start}..{end} on axis {axis} of {sh:?}"
            )));
        }
        let out = self
            .value(a)
            .slice_axis(Axis(axis), Slice::from(start..end))
            .to_owned();
        Ok(self.push(out, Op::Slice { x: a, axis, start, end }, &[a]))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .mapv(|x| if x > 0.0 { x } else { x.exp_m1() });
        self.push(out, Op::Elu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::abs);
        self.push(out, Op::Abs(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = ArrayD::from_elem(IxDyn(&[]), self.value(a).sum());
        self.push(out, Op::SumAll(a), &[a])
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        if axis >= self.shape(a).len() {
            return Err(Error::shape("sum_axis out of range"));
        }
        let out = self.value(a).sum_axis(Axis(axis));
        Ok(self.push(out, Op::SumAxis(a, axis), &[a]))
    }

    pub fn softmax_last(&mut self, a: Var) -> Result<Var> {
        let nd = self.shape(a).len();
        if nd == 0 {
            return Err(Error::shape("softmax of a scalar"));
        }
        let mut out = self.value(a).as_standard_layout().into_owned();
        for mut lane in out.lanes_mut(Axis(nd - 1)) {
            let max = lane.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            lane.mapv_inplace(|x| (x - max).exp());
            let z = lane.sum();
            lane.mapv_inplace(|x| x / z);
        }
        Ok(self.push(out, Op::SoftmaxLast(a), &[a]))
    }

    /// Divides each row of a 2-D matrix by its sum.
    pub fn row_normalize(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.ndim() != 2 {
            return Err(Error::shape("row_normalize expects a matrix"));
        }
        let mut out = t.clone();
        for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            let z = row.sum();
            if !(z > 0.0) || !z.is_finite() {
                return Err(Error::numeric(
                    "row_normalize",
                    format!("row {i} has sum {z}"),
                ));
            }
            row.mapv_inplace(|x| x / z);
        }
        Ok(self.push(out, Op::RowNormalize(a), &[a]))
    }

    /// 3×3 convolution, stride 1, zero padding 1.
    ///
    /// `x: [N, C, H, W]`, `w: [Cout, C*9]` (row-major over `c, ky, kx`), `b: [Cout]`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 4 || ws.len() != 2 || ws[1] != xs[1] * 9 || bs != [ws[0]] {
            return Err(Error::shape(format!(
                "conv3x3: input {xs:?}, weight {ws:?}, bias {bs:?}"
            )));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let cout = ws[0];
        let xin = self.value(x).as_standard_layout();
        let cols = im2col(xin.as_slice().expect("contiguous"), n, c, h, wd);
        let prod = mm(as2(self.value(w)), cols.view());
        let hw = h * wd;
        let bias = self.value(b);
        let mut out = vec![0.0; n * cout * hw];
        for co in 0..cout {
            let bco = bias[co];
            let row = prod.row(co);
            let row = row.as_slice().expect("contiguous");
            for ni in 0..n {
                let dst = &mut out[(ni * cout + co) * hw..(ni * cout + co + 1) * hw];
                for (d, s) in dst.iter_mut().zip(&row[ni * hw..(ni + 1) * hw]) {
                    *d = s + bco;
                }
            }
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[n, cout, h, wd]), out).expect("conv shape");
        Ok(self.push(out, Op::Conv3x3 { x, w, b, cols }, &[x, w, b]))
    }

    /// Batch normalization over `(N, H, W)` of an `[N, C, H, W]` tensor using
    /// the statistics of the batch itself.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats)> {
        let xs = self.shape(x).to_vec();
        self.check_norm_shapes(&xs, gamma, beta)?;
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let m = (n * hw) as f64;
        let xv = self.value(x).as_standard_layout();
        let data = xv.as_slice().expect("contiguous");
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ci in 0..c {
            let mut acc = 0.0;
            for ni in 0..n {
                acc += data[(ni * c + ci) * hw..(ni * c + ci + 1) * hw].iter().sum::<f64>();
            }
            mean[ci] = acc / m;
            let mut sq = 0.0;
            for ni in 0..n {
                sq += data[(ni * c + ci) * hw..(ni * c + ci + 1) * hw]
                    .iter()
                    .map(|v| (v - mean[ci]).powi(2))
                    .sum::<f64>();
            }
            var[ci] = sq / m;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
        let unbiased = if n * hw > 1 {
            var.iter().map(|v| v * m / (m - 1.0)).collect()
        } else {
            var.clone()
        };
        let (out, xhat) = self.affine_normalize(data, &xs, &mean, &inv_std, gamma, beta);
        let stats = BatchStats { mean, var: unbiased };
        let v = self.push(
            out,
            Op::Normalize {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: true,
            },
            &[x, gamma, beta],
        );
        Ok((v, stats))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn frozen_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        self.check_norm_shapes(&xs, gamma, beta)?;
        if mean.len() != xs[1] || var.len() != xs[1] {
            return Err(Error::shape("frozen_norm: running statistics length"));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
        let xv = self.value(x).as_standard_layout();
        let data = xv.as_slice().expect("contiguous");
        let (out, xhat) = self.affine_normalize(data, &xs, mean, &inv_std, gamma, beta);
        Ok(self.push(
            out,
            Op::Normalize {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: false,
            },
            &[x, gamma, beta],
        ))
    }

    fn check_norm_shapes(&self, xs: &[usize], gamma: Var, beta: Var) -> Result<()> {
        if xs.len() != 4 || self.shape(gamma) != [xs[1]] || self.shape(beta) != [xs[1]] {
            return Err(Error::shape(format!(
                "normalization: input {xs:?}, gamma {:?}, beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        Ok(())
    }

    fn affine_normalize(
        &self,
        data: &[f64],
        xs: &[usize],
        mean: &[f64],
        inv_std: &[f64],
        gamma: Var,
        beta: Var,
    ) -> (Tensor, Tensor) {
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut xhat = vec![0.0; data.len()];
        let mut out = vec![0.0; data.len()];
        for ni in 0..n {
            for ci in 0..c {
                let range = (ni * c + ci) * hw..(ni * c + ci + 1) * hw;
                for k in range {
                    let h = (data[k] - mean[ci]) * inv_std[ci];
                    xhat[k] = h;
                    out[k] = g[ci] * h + b[ci];
                }
            }
        }
        (
            ArrayD::from_shape_vec(IxDyn(xs), out).expect("shape"),
            ArrayD::from_shape_vec(IxDyn(xs), xhat).expect("shape"),
        )
    }

    /// 2×2 average pooling of `[N, C, H, W]`. Output extent is `max(1, ⌊len/2⌋)`
    /// per spatial axis; windows are clipped at the border.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("avg_pool2 expects [N, C, H, W]"));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (pooled(h), pooled(w));
        let xv = self.value(x).as_standard_layout();
        let data = xv.as_slice().expect("contiguous");
        let mut out = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            let src = &data[plane * h * w..(plane + 1) * h * w];
            for oy in 0..oh {
                let (y0, y1) = pool_window(oy, h);
                for ox in 0..ow {
                    let (x0, x1) = pool_window(ox, w);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            acc += src[y * w + xx];
                        }
                    }
                    out[plane * oh * ow + oy * ow + ox] = acc / ((y1 - y0) * (x1 - x0)) as f64;
                }
            }
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[n, c, oh, ow]), out).expect("shape");
        Ok(self.push(out, Op::AvgPool2(x), &[x]))
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("global_avg_pool expects [N, C, H, W]"));
        }
        let hw = (xs[2] * xs[3]) as f64;
        let out = self
            .value(x)
            .sum_axis(Axis(3))
            .sum_axis(Axis(2))
            .mapv(|v| v / hw);
        Ok(self.push(out, Op::GlobalAvgPool(x), &[x]))
    }

    /// `|a_i − b_j|` componentwise: `[A, D] × [B, D] -> [A, B, D]`.
    pub fn pairwise_abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape(format!("pairwise_abs_diff: {sa:?} vs {sb:?}")));
        }
        let (na, nb, d) = (sa[0], sb[0], sa[1]);
        let av = self.value(a).as_standard_layout();
        let bv = self.value(b).as_standard_layout();
        let (al, bl) = (av.as_slice().expect("contiguous"), bv.as_slice().expect("contiguous"));
        let mut out = vec![0.0; na * nb * d];
        for (i, arow) in al.chunks_exact(d.max(1)).enumerate().take(na) {
            for (j, brow) in bl.chunks_exact(d.max(1)).enumerate().take(nb) {
                let lane = &mut out[(i * nb + j) * d..(i * nb + j + 1) * d];
                for ((o, x), y) in lane.iter_mut().zip(arow).zip(brow) {
                    *o = (x - y).abs();
                }
            }
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[na, nb, d]), out).expect("shape");
        Ok(self.push(out, Op::PairwiseAbsDiff(a, b), &[a, b]))
    }

    /// Sum over rows of the cross-entropy between `softmax(logits_r)` and `labels[r]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let sh = self.shape(logits).to_vec();
        if sh.len() != 2 || sh[0] != labels.len() || labels.iter().any(|&y| y >= sh[1]) {
            return Err(Error::Contract(format!(
                "cross_entropy: logits {sh:?} with {} labels",
                labels.len()
            )));
        }
        let lv = as2(self.value(logits));
        let mut probs = Array2::zeros((sh[0], sh[1]));
        let mut total = 0.0;
        for (r, row) in lv.rows().into_iter().enumerate() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let log_z = max + z.ln();
            for (k, x) in row.iter().enumerate() {
                probs[[r, k]] = (x - log_z).exp();
            }
            total += log_z - row[labels[r]];
        }
        let out = ArrayD::from_elem(IxDyn(&[]), total);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// `Σ p·(ln p − ln q)` over all entries with both sides floored at `floor`.
    pub fn kl_div(&mut self, p: Var, q: Var, floor: f64) -> Result<Var> {
        same_shape(self.value(p), self.value(q), "kl_div")?;
        let total: f64 = self
            .value(p)
            .iter()
            .zip(self.value(q))
            .map(|(&pi, &qi)| pi * (pi.max(floor).ln() - qi.max(floor).ln()))
            .sum();
        let out = ArrayD::from_elem(IxDyn(&[]), total);
        Ok(self.push(out, Op::KlDiv { p, q, floor }, &[p, q]))
    }

    /// Runs the backward pass from a single-element node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::ones(self.value(loss).raw_dim()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (parent, pg) in self.local_grads(i, &g) {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => *acc += &pg,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, i: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, -g));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    res.push((*a, g * self.value(*b)));
                }
                if self.wants(*b) {
                    res.push((*b, g * self.value(*a)));
                }
            }
            Op::Scale(a, k) => res.push((*a, g * *k)),
            Op::AddBias { x, bias, axis } => {
                res.push((*x, g.clone()));
                if self.wants(*bias) {
                    let n = g.shape()[*axis];
                    let inner: usize = g.shape()[*axis + 1..].iter().product();
                    let gs = g.as_standard_layout();
                    let mut acc = vec![0.0; n];
                    if inner > 0 {
                        for block in gs.as_slice().expect("contiguous").chunks_exact(inner * n) {
                            for (lane, a) in block.chunks_exact(inner).zip(acc.iter_mut()) {
                                *a += lane.iter().sum::<f64>();
                            }
                        }
                    }
                    res.push((*bias, ArrayD::from_shape_vec(IxDyn(&[n]), acc).expect("shape")));
                }
            }
            Op::MatMul(a, b) => {
                let g2 = as2(g);
                if self.wants(*a) {
                    res.push((*a, mm(g2, as2(self.value(*b)).t()).into_dyn()));
                }
                if self.wants(*b) {
                    res.push((*b, mm(as2(self.value(*a)).t(), g2).into_dyn()));
                }
            }
            Op::BatchMatMul(a, b) => {
                if self.wants(*a) {
                    res.push((*a, bmm_nt(g, self.value(*b))));
                }
                if self.wants(*b) {
                    res.push((*b, bmm_tn(self.value(*a), g)));
                }
            }
            Op::TransposeLast(a) => {
                let nd = g.ndim();
                let mut v = g.view();
                v.swap_axes(nd - 2, nd - 1);
                res.push((*a, v.as_standard_layout().into_owned()));
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                let r = g
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(IxDyn(&shape))
                    .expect("reshape grad");
                res.push((*a, r));
            }
            Op::Permute(a, axes) => {
                let mut inv = vec![0; axes.len()];
                for (k, &ax) in axes.iter().enumerate() {
                    inv[ax] = k;
                }
                let r = g
                    .view()
                    .permuted_axes(IxDyn(&inv))
                    .as_standard_layout()
                    .into_owned();
                res.push((*a, r));
            }
            Op::Concat(parts, axis) => {
                let mut start = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.wants(p) {
                        let piece = g
                            .slice_axis(Axis(*axis), Slice::from(start..start + len))
                            .to_owned();
                        res.push((p, piece));
                    }
                    start += len;
                }
            }
            Op::Slice { x, axis, start, end } => {
                let mut full = ArrayD::zeros(self.value(*x).raw_dim());
                full.slice_axis_mut(Axis(*axis), Slice::from(*start..*end))
                    .assign(g);
                res.push((*x, full));
            }
            Op::Elu(a) => {
                let mut d = g.clone();
                d.zip_mut_with(out, |gv, &y| {
                    if y <= 0.0 {
                        *gv *= y + 1.0
                    }
                });
                // y > 0 exactly when x > 0, so the derivative is read off the output
                res.push((*a, d));
            }
            Op::Sigmoid(a) => {
                let mut d = g.clone();
                d.zip_mut_with(out, |gv, &y| *gv *= y * (1.0 - y));
                res.push((*a, d));
            }
            Op::Abs(a) => {
                let mut d = g.clone();
                d.zip_mut_with(self.value(*a), |gv, &x| *gv *= sign(x));
                res.push((*a, d));
            }
            Op::SumAll(a) => {
                let gv = g.iter().next().copied().unwrap_or(0.0);
                res.push((*a, ArrayD::from_elem(self.value(*a).raw_dim(), gv)));
            }
            Op::SumAxis(a, axis) => {
                let shape = self.value(*a).raw_dim();
                let expanded = g.clone().insert_axis(Axis(*axis));
                let full = expanded
                    .broadcast(shape)
                    .expect("sum_axis broadcast")
                    .to_owned();
                res.push((*a, full));
            }
            Op::SoftmaxLast(a) => {
                let nd = out.ndim();
                let mut d = g.as_standard_layout().into_owned();
                for (mut gl, yl) in d.lanes_mut(Axis(nd - 1)).into_iter().zip(out.lanes(Axis(nd - 1))) {
                    let dot: f64 = gl.iter().zip(yl.iter()).map(|(a, b)| a * b).sum();
                    gl.zip_mut_with(&yl, |gv, &y| *gv = y * (*gv - dot));
                }
                res.push((*a, d));
            }
            Op::RowNormalize(a) => {
                let x = self.value(*a);
                let mut d = g.as_standard_layout().into_owned();
                for ((mut gr, yr), xr) in d
                    .axis_iter_mut(Axis(0))
                    .zip(out.axis_iter(Axis(0)))
                    .zip(x.axis_iter(Axis(0)))
                {
                    let z = xr.sum();
                    let dot: f64 = gr.iter().zip(yr.iter()).map(|(a, b)| a * b).sum();
                    gr.mapv_inplace(|gv| (gv - dot) / z);
                }
                res.push((*a, d));
            }
            Op::Conv3x3 { x, w, b, cols } => {
                let xs = self.shape(*x);
                let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let cout = self.shape(*w)[0];
                let hw = h * wd;
                let gs = g.as_standard_layout();
                let gsl = gs.as_slice().expect("contiguous");
                let mut g2 = Array2::<f64>::zeros((cout, n * hw));
                for co in 0..cout {
                    let mut row = g2.row_mut(co);
                    let row = row.as_slice_mut().expect("contiguous");
                    for ni in 0..n {
                        row[ni * hw..(ni + 1) * hw]
                            .copy_from_slice(&gsl[(ni * cout + co) * hw..(ni * cout + co + 1) * hw]);
                    }
                }
                if self.wants(*w) {
                    res.push((*w, mm(g2.view(), cols.t()).into_dyn()));
                }
                if self.wants(*b) {
                    res.push((*b, g2.sum_axis(Axis(1)).into_dyn()));
                }
                if self.wants(*x) {
                    let dcols = mm(as2(self.value(*w)).t(), g2.view());
                    let dx = col2im(&dcols, n, c, h, wd);
                    res.push((*x, dx));
                }
            }
            Op::Normalize {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let xs = self.shape(*x);
                let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let m = (n * hw) as f64;
                let gs = g.as_standard_layout();
                let gsl = gs.as_slice().expect("contiguous");
                let xh = xhat.as_slice().expect("contiguous");
                let gam = self.value(*gamma);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        for k in (ni * c + ci) * hw..(ni * c + ci + 1) * hw {
                            dgamma[ci] += gsl[k] * xh[k];
                            dbeta[ci] += gsl[k];
                        }
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; gsl.len()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let scale = gam[ci] * inv_std[ci];
                            for k in (ni * c + ci) * hw..(ni * c + ci + 1) * hw {
                                dx[k] = if *batch_stats {
                                    scale * (gsl[k] - dbeta[ci] / m - xh[k] * dgamma[ci] / m)
                                } else {
                                    scale * gsl[k]
                                };
                            }
                        }
                    }
                    res.push((*x, ArrayD::from_shape_vec(IxDyn(xs), dx).expect("shape")));
                }
                if self.wants(*gamma) {
                    res.push((*gamma, ArrayD::from_shape_vec(IxDyn(&[c]), dgamma).expect("shape")));
                }
                if self.wants(*beta) {
                    res.push((*beta, ArrayD::from_shape_vec(IxDyn(&[c]), dbeta).expect("shape")));
                }
            }
            Op::AvgPool2(x) => {
                let xs = self.shape(*x);
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let (oh, ow) = (pooled(h), pooled(w));
                let gs = g.as_standard_layout();
                let gsl = gs.as_slice().expect("contiguous");
                let mut dx = vec![0.0; n * c * h * w];
                for plane in 0..n * c {
                    for oy in 0..oh {
                        let (y0, y1) = pool_window(oy, h);
                        for ox in 0..ow {
                            let (x0, x1) = pool_window(ox, w);
                            let share = gsl[plane * oh * ow + oy * ow + ox]
                                / ((y1 - y0) * (x1 - x0)) as f64;
                            for y in y0..y1 {
                                for xx in x0..x1 {
                                    dx[plane * h * w + y * w + xx] += share;
                                }
                            }
                        }
                    }
                }
                res.push((*x, ArrayD::from_shape_vec(IxDyn(xs), dx).expect("shape")));
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.shape(*x).to_vec();
                let hw = (xs[2] * xs[3]) as f64;
                let g4 = g.clone().insert_axis(Axis(2)).insert_axis(Axis(3));
                let full = g4.broadcast(IxDyn(&xs)).expect("broadcast").mapv(|v| v / hw);
                res.push((*x, full));
            }
            Op::PairwiseAbsDiff(a, b) => {
                let av = self.value(*a).as_standard_layout();
                let bv = self.value(*b).as_standard_layout();
                let (al, bl) = (av.as_slice().expect("contiguous"), bv.as_slice().expect("contiguous"));
                let (na, nb, d) = (av.shape()[0], bv.shape()[0], av.shape()[1]);
                let gs = g.as_standard_layout();
                let gl = gs.as_slice().expect("contiguous");
                let mut da = vec![0.0; na * d];
                let mut db = vec![0.0; nb * d];
                for i in 0..na {
                    for j in 0..nb {
                        let lane = &gl[(i * nb + j) * d..(i * nb + j + 1) * d];
                        for k in 0..d {
                            let s = sign(al[i * d + k] - bl[j * d + k]) * lane[k];
                            da[i * d + k] += s;
                            db[j * d + k] -= s;
                        }
                    }
                }
                if self.wants(*a) {
                    res.push((*a, ArrayD::from_shape_vec(IxDyn(&[na, d]), da).expect("shape")));
                }
                if self.wants(*b) {
                    res.push((*b, ArrayD::from_shape_vec(IxDyn(&[nb, d]), db).expect("shape")));
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let gv = g.iter().next().copied().unwrap_or(0.0);
                let mut d = probs.clone();
                for (r, &y) in labels.iter().enumerate() {
                    d[[r, y]] -= 1.0;
                }
                res.push((*logits, (d * gv).into_dyn()));
            }
            Op::KlDiv { p, q, floor } => {
                let gv = g.iter().next().copied().unwrap_or(0.0);
                let pv = self.value(*p);
                let qv = self.value(*q);
                if self.wants(*p) {
                    let mut d = pv.clone();
                    d.zip_mut_with(qv, |pi, &qi| {
                        let own = if *pi > *floor { 1.0 } else { 0.0 };
                        *pi = gv * (pi.max(*floor).ln() + own - qi.max(*floor).ln());
                    });
                    res.push((*p, d));
                }
                if self.wants(*q) {
                    let mut d = qv.clone();
                    d.zip_mut_with(pv, |qi, &pi| {
                        *qi = if *qi > *floor { -gv * pi / *qi } else { 0.0 };
                    });
                    res.push((*q, d));
                }
            }
        }
        res
    }
}

/// Matrix product written into a row-major result.
fn mm(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.nrows(), b.ncols()));
    general_mat_mul(1.0, &a, &b, 0.0, &mut out);
    out
}

fn bmm(a: &Tensor, b: &Tensor) -> Tensor {
    let (bsz, m, n) = (a.shape()[0], a.shape()[1], b.shape()[2]);
    let mut out = ArrayD::zeros(IxDyn(&[bsz, m, n]));
    for k in 0..bsz {
        let av = a.index_axis(Axis(0), k).into_dimensionality::<Ix2>().expect("2-D");
        let bv = b.index_axis(Axis(0), k).into_dimensionality::<Ix2>().expect("2-D");
        out.index_axis_mut(Axis(0), k).assign(&mm(av, bv).into_dyn());
    }
    out
}

/// `a · bᵀ` per batch entry.
fn bmm_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (bsz, m, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = ArrayD::zeros(IxDyn(&[bsz, m, n]));
    for k in 0..bsz {
        let av = a.index_axis(Axis(0), k).into_dimensionality::<Ix2>().expect("2-D");
        let bv = b.index_axis(Axis(0), k).into_dimensionality::<Ix2>().expect("2-D");
        out.index_axis_mut(Axis(0), k).assign(&mm(av, bv.t()).into_dyn());
    }
    out
}

/// `aᵀ · b` per batch entry.
fn bmm_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (bsz, m, n) = (a.shape()[0], a.shape()[2], b.shape()[2]);
    let mut out = ArrayD::zeros(IxDyn(&[bsz, m, n]));
    for k in 0..bsz {
        let av = a.index_axis(Axis(0), k).into_dimensionality::<Ix2>().expect("2-D");
        let bv = b.index_axis(Axis(0), k).into_dimensionality::<Ix2>().expect("2-D");
        out.index_axis_mut(Axis(0), k).assign(&mm(av.t(), bv).into_dyn());
    }
    out
}

fn im2col(x: &[f64], n: usize, c: usize, h: usize, w: usize) -> Array2<f64> {
    let hw = h * w;
    let ncols = n * hw;
    let mut cols = Array2::<f64>::zeros((c * 9, ncols));
    let cs = cols.as_slice_mut().expect("contiguous");
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let base = (ci * 9 + ky * 3 + kx) * ncols;
                for ni in 0..n {
                    let src = &x[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                    let dst = &mut cs[base + ni * hw..base + (ni + 1) * hw];
                    for y in 0..h {
                        let sy = y + ky;
                        if sy < 1 || sy > h {
                            continue;
                        }
                        let sy = sy - 1;
                        for xx in 0..w {
                            let sx = xx + kx;
                            if sx < 1 || sx > w {
                                continue;
                            }
                            dst[y * w + xx] = src[sy * w + sx - 1];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &Array2<f64>, n: usize, c: usize, h: usize, w: usize) -> Tensor {
    let hw = h * w;
    let ncols = n * hw;
    let cs = cols.as_slice().expect("contiguous");
    let mut x = vec![0.0; n * c * hw];
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let base = (ci * 9 + ky * 3 + kx) * ncols;
                for ni in 0..n {
                    let src = &cs[base + ni * hw..base + (ni + 1) * hw];
                    let dst = &mut x[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                    for y in 0..h {
                        let sy = y + ky;
                        if sy < 1 || sy > h {
                            continue;
                        }
                        let sy = sy - 1;
                        for xx in 0..w {
                            let sx = xx + kx;
                            if sx < 1 || sx > w {
                                continue;
                            }
                            dst[sy * w + sx - 1] += src[y * w + xx];
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), x).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_inputs, GradCheck};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    fn check<F>(inputs: Vec<Tensor>, f: F)
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        let report = check_inputs(&inputs, &f, GradCheck::default()).unwrap();
        assert!(
            report.max_rel_error <= 1e-4,
            "max relative error {} at {}",
            report.max_rel_error,
            report.worst
        );
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, &[2, 3, 4, 5]);
        let w = rand_tensor(&mut rng, &[2, 27]);
        let b = rand_tensor(&mut rng, &[2]);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv3x3(xv, wv, bv).unwrap();
        let out = g.value(y);
        for n in 0..2 {
            for co in 0..2 {
                for yy in 0..4i64 {
                    for xx in 0..5i64 {
                        let mut acc = b[co];
                        for ci in 0..3 {
                            for ky in 0..3i64 {
                                for kx in 0..3i64 {
                                    let (sy, sx) = (yy + ky - 1, xx + kx - 1);
                                    if (0..4).contains(&sy) && (0..5).contains(&sx) {
                                        acc += w[[co, ci * 9 + (ky * 3 + kx) as usize]]
                                            * x[[n, ci, sy as usize, sx as usize]];
                                    }
                                }
                            }
                        }
                        let got = out[[n, co, yy as usize, xx as usize]];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs = vec![
            rand_tensor(&mut rng, &[2, 2, 3, 4]),
            rand_tensor(&mut rng, &[3, 18]),
            rand_tensor(&mut rng, &[3]),
        ];
        check(inputs, |g, v| {
            let y = g.conv3x3(v[0], v[1], v[2])?;
            let y = g.mul(y, y)?;
            Ok(g.sum(y))
        });
    }

    #[test]
    fn batch_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs = vec![
            rand_tensor(&mut rng, &[3, 2, 2, 2]),
            rand_tensor(&mut rng, &[2]),
            rand_tensor(&mut rng, &[2]),
            rand_tensor(&mut rng, &[3, 2, 2, 2]),
        ];
        check(inputs, |g, v| {
            let (y, _) = g.batch_norm(v[0], v[1], v[2])?;
            let y = g.mul(y, v[3])?;
            Ok(g.sum(y))
        });
    }

    #[test]
    fn frozen_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inputs = vec![
            rand_tensor(&mut rng, &[2, 2, 3, 1]),
            rand_tensor(&mut rng, &[2]),
            rand_tensor(&mut rng, &[2]),
            rand_tensor(&mut rng, &[2, 2, 3, 1]),
        ];
        check(inputs, |g, v| {
            let y = g.frozen_norm(v[0], v[1], v[2], &[0.1, -0.2], &[0.5, 2.0])?;
            let y = g.mul(y, v[3])?;
            Ok(g.sum(y))
        });
    }

    #[test]
    fn pooling_and_elu_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inputs = vec![rand_tensor(&mut rng, &[2, 2, 5, 3]), rand_tensor(&mut rng, &[2, 2, 2, 1])];
        check(inputs, |g, v| {
            let e = g.elu(v[0]);
            let p = g.avg_pool2(e)?;
            let p = g.mul(p, v[1])?;
            let q = g.global_avg_pool(p)?;
            let q = g.mul(q, q)?;
            Ok(g.sum(q))
        });
    }

    #[test]
    fn pooling_keeps_unit_extent() {
        let mut g = Graph::new();
        let x = g.constant(ArrayD::from_elem(IxDyn(&[1, 1, 1, 1]), 3.0));
        let y = g.avg_pool2(x).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 1]);
        assert_eq!(g.value(y)[[0, 0, 0, 0]], 3.0);
        let x = g.constant(ArrayD::zeros(IxDyn(&[1, 1, 21, 21])));
        let y = g.avg_pool2(x).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 10, 10]);
    }

    #[test]
    fn matrix_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let inputs = vec![
            rand_tensor(&mut rng, &[2, 3, 4]),
            rand_tensor(&mut rng, &[2, 4, 2]),
            rand_tensor(&mut rng, &[3, 2]),
            rand_tensor(&mut rng, &[2]),
        ];
        check(inputs, |g, v| {
            let p = g.batch_matmul(v[0], v[1])?; // [2,3,2]
            let t = g.transpose_last(p)?; // [2,2,3]
            let r = g.reshape(t, &[4, 3])?;
            let m = g.matmul(r, v[2])?; // [4,2]
            let m = g.add_bias(m, v[3], 1)?;
            let pm = g.permute(p, &[1, 0, 2])?; // [3,2,2]
            let pm = g.reshape(pm, &[6, 2])?;
            let c = g.concat(&[m, pm], 0)?; // [10,2]
            let sl = g.slice(c, 0, 2, 9)?;
            let sm = g.softmax_last(sl)?;
            let sq = g.mul(sm, sl)?;
            let s = g.sum_axis(sq, 1)?;
            let s2 = g.mul(s, s)?;
            Ok(g.sum(s2))
        });
    }

    #[test]
    fn relation_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let inputs = vec![
            rand_tensor(&mut rng, &[4, 3]),
            rand_tensor(&mut rng, &[4, 4]),
            rand_tensor(&mut rng, &[4, 3]),
        ];
        check(inputs, |g, v| {
            let d = g.pairwise_abs_diff(v[0], v[2])?; // [4,4,3]
            let s = g.sum_axis(d, 2)?;
            let s = g.scale(s, -1.0);
            let sg = g.sigmoid(s);
            let pos = g.sigmoid(v[1]);
            let m = g.mul(sg, pos)?;
            let m = g.row_normalize(m)?;
            let a = g.abs(v[0]);
            let a = g.sub(a, v[2])?;
            let lhs = g.matmul(m, a)?;
            let ce = g.cross_entropy(lhs, &[0, 2, 1, 1])?;
            Ok(ce)
        });
    }

    #[test]
    fn kl_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let inputs = vec![rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[3, 4])];
        check(inputs, |g, v| {
            let p = g.softmax_last(v[0])?;
            let q = g.softmax_last(v[1])?;
            g.kl_div(p, q, 1e-12)
        });
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut g = Graph::new();
        let a = g.constant(ArrayD::zeros(IxDyn(&[2, 3])));
        let b = g.constant(ArrayD::zeros(IxDyn(&[2, 2])));
        assert!(matches!(g.matmul(a, b), Err(Error::Shape(_))));
        assert!(matches!(g.add(a, b), Err(Error::Shape(_))));
        let z = g.constant(ArrayD::zeros(IxDyn(&[2, 2])));
        assert!(matches!(g.row_normalize(z), Err(Error::Numeric { .. })));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let a = g.constant(rand_tensor(&mut rng, &[2, 2]));
        let b = g.variable(rand_tensor(&mut rng, &[2, 2]));
        let c = g.mul(a, b).unwrap();
        let l = g.sum(c);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap(), g.value(a));
        let _ = rng.gen::<f64>();
    }
}
