//! Reverse-mode autodiff over f64 `ndarray` values.
//!
//! A [`Tape`] records every operation as an enum node; `backward` walks the
//! nodes in reverse construction order (which is a topological order by
//! construction) and accumulates gradients. All arithmetic is sequential and
//! deterministic, so repeated runs on the same inputs are bit-identical.

use ndarray::{Array1, Array2, Array3, ArrayD, Axis, Ix1, Ix2, Ix3};

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

impl Var {
    /// Position of this node in the tape, usable as an index into the
    /// gradient vector returned by [`Tape::backward`].
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    /// a [m,k] · b [k,n]
    MatMul(usize, usize),
    Transpose2d(usize),
    SoftmaxRows(usize),
    Silu(usize),
    Sigmoid(usize),
    /// Row-wise layer norm without affine, eps baked in.
    LayerNormRows(usize, f64),
    /// a [m,n] + b [n]
    AddRowBroadcast(usize, usize),
    /// a [m,n] * b [n]
    MulRowBroadcast(usize, usize),
    /// x [c,h,w] + b [c]
    AddChannelBroadcast(usize, usize),
    /// x [cin,h,w], w [cout,cin,kh,kw], stride 1, symmetric zero padding
    Conv2d {
        x: usize,
        w: usize,
        pad: usize,
    },
    AvgPool2d(usize, usize),
    UpsampleNearest(usize, usize),
    ConcatChannels(usize, usize),
    ConcatRows(usize, usize),
    SliceRows {
        a: usize,
        start: usize,
        len: usize,
    },
    /// [c,h,w] -> [h*w, c]
    SpatialToTokens(usize),
    /// [h*w, c] -> [c,h,w]
    TokensToSpatial(usize, usize, usize),
    Mean(usize),
}

pub struct Tape {
    ops: Vec<Op>,
    vals: Vec<ArrayD<f64>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { ops: Vec::new(), vals: Vec::new() }
    }

    fn push(&mut self, op: Op, val: ArrayD<f64>) -> Var {
        self.ops.push(op);
        self.vals.push(val);
        Var(self.vals.len() - 1)
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.vals[v.0]
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let a = &self.vals[v.0];
        assert_eq!(a.len(), 1, "not a scalar");
        a.iter().next().copied().unwrap()
    }

    pub fn leaf(&mut self, val: ArrayD<f64>) -> Var {
        self.push(Op::Leaf, val)
    }

    pub fn leaf2(&mut self, val: Array2<f64>) -> Var {
        self.leaf(val.into_dyn())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.vals[a.0].shape(), self.vals[b.0].shape(), "add shape");
        let v = &self.vals[a.0] + &self.vals[b.0];
        self.push(Op::Add(a.0, b.0), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.vals[a.0].shape(), self.vals[b.0].shape(), "sub shape");
        let v = &self.vals[a.0] - &self.vals[b.0];
        self.push(Op::Sub(a.0, b.0), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.vals[a.0].shape(), self.vals[b.0].shape(), "mul shape");
        let v = &self.vals[a.0] * &self.vals[b.0];
        self.push(Op::Mul(a.0, b.0), v)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = &self.vals[a.0] * c;
        self.push(Op::Scale(a.0, c), v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = as2(&self.vals[a.0]);
        let bv = as2(&self.vals[b.0]);
        assert_eq!(av.ncols(), bv.nrows(), "matmul inner dim");
        let v = av.dot(&bv);
        self.push(Op::MatMul(a.0, b.0), v.into_dyn())
    }

    pub fn transpose2d(&mut self, a: Var) -> Var {
        let av = as2(&self.vals[a.0]);
        let v = av.t().to_owned();
        self.push(Op::Transpose2d(a.0), v.into_dyn())
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = as2(&self.vals[a.0]);
        let mut out = av;
        for mut row in out.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - m).exp());
            let s: f64 = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        self.push(Op::SoftmaxRows(a.0), out.into_dyn())
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.vals[a.0].mapv(|x| x * sigmoid(x));
        self.push(Op::Silu(a.0), v)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.vals[a.0].mapv(sigmoid);
        self.push(Op::Sigmoid(a.0), v)
    }

    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let av = as2(&self.vals[a.0]);
        let mut out = av;
        for mut row in out.rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|x| (x - mean) * inv);
        }
        self.push(Op::LayerNormRows(a.0, eps), out.into_dyn())
    }

    pub fn add_row_broadcast(&mut self, a: Var, b: Var) -> Var {
        let av = as2(&self.vals[a.0]);
        let bv = as1(&self.vals[b.0]);
        assert_eq!(av.ncols(), bv.len(), "row broadcast width");
        let v = &av + &bv;
        self.push(Op::AddRowBroadcast(a.0, b.0), v.into_dyn())
    }

    pub fn mul_row_broadcast(&mut self, a: Var, b: Var) -> Var {
        let av = as2(&self.vals[a.0]);
        let bv = as1(&self.vals[b.0]);
        assert_eq!(av.ncols(), bv.len(), "row broadcast width");
        let v = &av * &bv;
        self.push(Op::MulRowBroadcast(a.0, b.0), v.into_dyn())
    }

    pub fn add_channel_broadcast(&mut self, x: Var, b: Var) -> Var {
        let xv = as3(&self.vals[x.0]);
        let bv = as1(&self.vals[b.0]);
        assert_eq!(xv.shape()[0], bv.len(), "channel broadcast");
        let mut out = xv;
        for (mut ch, bi) in out.outer_iter_mut().zip(bv.iter()) {
            ch += *bi;
        }
        self.push(Op::AddChannelBroadcast(x.0, b.0), out.into_dyn())
    }

    pub fn conv2d(&mut self, x: Var, w: Var, pad: usize) -> Var {
        let xv = as3(&self.vals[x.0]);
        let wv = &self.vals[w.0];
        assert_eq!(wv.ndim(), 4, "conv weight rank");
        let (cout, cin, kh, kw) =
            (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
        assert_eq!(xv.shape()[0], cin, "conv in-channels");
        let (h, wd) = (xv.shape()[1], xv.shape()[2]);
        let oh = h + 2 * pad + 1 - kh;
        let ow = wd + 2 * pad + 1 - kw;
        let cols = im2col(&xv, kh, kw, pad);
        let wmat = w_as_mat(wv, cout, cin * kh * kw);
        let y = wmat.dot(&cols); // [cout, oh*ow]
        let y = y.into_shape_with_order((cout, oh, ow)).unwrap();
        self.push(Op::Conv2d { x: x.0, w: w.0, pad }, y.into_dyn())
    }

    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Var {
        let xv = as3(&self.vals[x.0]);
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert!(h % k == 0 && w % k == 0, "pool divisibility");
        let mut out = Array3::<f64>::zeros((c, h / k, w / k));
        for ci in 0..c {
            for i in 0..h / k {
                for j in 0..w / k {
                    let mut s = 0.0;
                    for di in 0..k {
                        for dj in 0..k {
                            s += xv[[ci, i * k + di, j * k + dj]];
                        }
                    }
                    out[[ci, i, j]] = s / (k * k) as f64;
                }
            }
        }
        self.push(Op::AvgPool2d(x.0, k), out.into_dyn())
    }

    pub fn upsample_nearest(&mut self, x: Var, k: usize) -> Var {
        let xv = as3(&self.vals[x.0]);
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut out = Array3::<f64>::zeros((c, h * k, w * k));
        for ci in 0..c {
            for i in 0..h * k {
                for j in 0..w * k {
                    out[[ci, i, j]] = xv[[ci, i / k, j / k]];
                }
            }
        }
        self.push(Op::UpsampleNearest(x.0, k), out.into_dyn())
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let av = as3(&self.vals[a.0]);
        let bv = as3(&self.vals[b.0]);
        assert_eq!(av.shape()[1..], bv.shape()[1..], "concat spatial dims");
        let v = ndarray::concatenate(Axis(0), &[av.view(), bv.view()]).unwrap();
        self.push(Op::ConcatChannels(a.0, b.0), v.into_dyn())
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let av = as2(&self.vals[a.0]);
        let bv = as2(&self.vals[b.0]);
        assert_eq!(av.ncols(), bv.ncols(), "concat width");
        let v = ndarray::concatenate(Axis(0), &[av.view(), bv.view()]).unwrap();
        self.push(Op::ConcatRows(a.0, b.0), v.into_dyn())
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = as2(&self.vals[a.0]);
        assert!(start + len <= av.nrows(), "slice bounds");
        let v = av.slice(ndarray::s![start..start + len, ..]).to_owned();
        self.push(Op::SliceRows { a: a.0, start, len }, v.into_dyn())
    }

    pub fn spatial_to_tokens(&mut self, x: Var) -> Var {
        let xv = as3(&self.vals[x.0]);
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut out = Array2::<f64>::zeros((h * w, c));
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    out[[i * w + j, ci]] = xv[[ci, i, j]];
                }
            }
        }
        self.push(Op::SpatialToTokens(x.0), out.into_dyn())
    }

    pub fn tokens_to_spatial(&mut self, a: Var, h: usize, w: usize) -> Var {
        let av = as2(&self.vals[a.0]);
        assert_eq!(av.nrows(), h * w, "token count");
        let c = av.ncols();
        let mut out = Array3::<f64>::zeros((c, h, w));
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    out[[ci, i, j]] = av[[i * w + j, ci]];
                }
            }
        }
        self.push(Op::TokensToSpatial(a.0, h, w), out.into_dyn())
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.vals[a.0].mean().unwrap();
        self.push(Op::Mean(a.0), ArrayD::from_elem(vec![], v))
    }

    /// Gradients of the scalar `root` w.r.t. every var; `None` where unused.
    pub fn backward(&self, root: Var) -> Vec<Option<ArrayD<f64>>> {
        assert_eq!(self.vals[root.0].len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.vals.len()];
        grads[root.0] = Some(ArrayD::from_elem(self.vals[root.0].raw_dim(), 1.0));
        for i in (0..=root.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.step_back(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads
    }

    fn accum(grads: &mut [Option<ArrayD<f64>>], idx: usize, g: ArrayD<f64>) {
        match &mut grads[idx] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn step_back(&self, i: usize, g: &ArrayD<f64>, grads: &mut Vec<Option<ArrayD<f64>>>) {
        match self.ops[i] {
            Op::Leaf => {}
            Op::Add(a, b) => {
                Self::accum(grads, a, g.clone());
                Self::accum(grads, b, g.clone());
            }
            Op::Sub(a, b) => {
                Self::accum(grads, a, g.clone());
                Self::accum(grads, b, -g);
            }
            Op::Mul(a, b) => {
                Self::accum(grads, a, g * &self.vals[b]);
                Self::accum(grads, b, g * &self.vals[a]);
            }
            Op::Scale(a, c) => Self::accum(grads, a, g * c),
            Op::MatMul(a, b) => {
                let gm = as2(g);
                let av = as2(&self.vals[a]);
                let bv = as2(&self.vals[b]);
                Self::accum(grads, a, gm.dot(&bv.t()).into_dyn());
                Self::accum(grads, b, av.t().dot(&gm).into_dyn());
            }
            Op::Transpose2d(a) => {
                let gm = as2(g);
                Self::accum(grads, a, gm.t().to_owned().into_dyn());
            }
            Op::SoftmaxRows(a) => {
                let y = as2(&self.vals[i]);
                let gm = as2(g);
                let mut out = Array2::<f64>::zeros(y.raw_dim());
                for r in 0..y.nrows() {
                    let dot: f64 = y.row(r).iter().zip(gm.row(r).iter()).map(|(p, q)| p * q).sum();
                    for c in 0..y.ncols() {
                        out[[r, c]] = y[[r, c]] * (gm[[r, c]] - dot);
                    }
                }
                Self::accum(grads, a, out.into_dyn());
            }
            Op::Silu(a) => {
                let x = &self.vals[a];
                let da = ndarray::Zip::from(x).and(g).map_collect(|&x, &g| {
                    let s = sigmoid(x);
                    g * (s + x * s * (1.0 - s))
                });
                Self::accum(grads, a, da);
            }
            Op::Sigmoid(a) => {
                let y = &self.vals[i];
                let da = ndarray::Zip::from(y).and(g).map_collect(|&y, &g| g * y * (1.0 - y));
                Self::accum(grads, a, da);
            }
            Op::LayerNormRows(a, eps) => {
                let x = as2(&self.vals[a]);
                let gm = as2(g);
                let mut out = Array2::<f64>::zeros(x.raw_dim());
                for r in 0..x.nrows() {
                    let n = x.ncols() as f64;
                    let row = x.row(r);
                    let mean = row.sum() / n;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let gsum: f64 = gm.row(r).sum();
                    let gxhat: f64 =
                        gm.row(r).iter().zip(xhat.iter()).map(|(a, b)| a * b).sum();
                    for c in 0..x.ncols() {
                        out[[r, c]] =
                            inv / n * (n * gm[[r, c]] - gsum - xhat[c] * gxhat);
                    }
                }
                Self::accum(grads, a, out.into_dyn());
            }
            Op::AddRowBroadcast(a, b) => {
                let gm = as2(g);
                Self::accum(grads, a, g.clone());
                Self::accum(grads, b, gm.sum_axis(Axis(0)).into_dyn());
            }
            Op::MulRowBroadcast(a, b) => {
                let gm = as2(g);
                let av = as2(&self.vals[a]);
                let bv = as1(&self.vals[b]);
                Self::accum(grads, a, (&gm * &bv).into_dyn());
                Self::accum(grads, b, (&gm * &av).sum_axis(Axis(0)).into_dyn());
            }
            Op::AddChannelBroadcast(x, b) => {
                let gm = as3(g);
                Self::accum(grads, x, g.clone());
                let mut db = Array1::<f64>::zeros(gm.shape()[0]);
                for (ci, ch) in gm.outer_iter().enumerate() {
                    db[ci] = ch.sum();
                }
                Self::accum(grads, b, db.into_dyn());
            }
            Op::Conv2d { x, w, pad } => {
                let xv = as3(&self.vals[x]);
                let wv = &self.vals[w];
                let (cout, cin, kh, kw) =
                    (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
                let gm = as3(g);
                let (oh, ow) = (gm.shape()[1], gm.shape()[2]);
                let gmat = gm.into_shape_with_order((cout, oh * ow)).unwrap();
                let cols = im2col(&xv, kh, kw, pad);
                let dw = gmat.dot(&cols.t()); // [cout, cin*kh*kw]
                let dw = dw.into_shape_with_order((cout, cin, kh, kw)).unwrap();
                let wmat = w_as_mat(wv, cout, cin * kh * kw);
                let dcols = wmat.t().dot(&gmat); // [cin*kh*kw, oh*ow]
                let dx = col2im(
                    &dcols,
                    cin,
                    xv.shape()[1],
                    xv.shape()[2],
                    kh,
                    kw,
                    pad,
                    oh,
                    ow,
                );
                Self::accum(grads, x, dx.into_dyn());
                Self::accum(grads, w, dw.into_dyn());
            }
            Op::AvgPool2d(x, k) => {
                let gm = as3(g);
                let (c, oh, ow) = (gm.shape()[0], gm.shape()[1], gm.shape()[2]);
                let mut dx = Array3::<f64>::zeros((c, oh * k, ow * k));
                let inv = 1.0 / (k * k) as f64;
                for ci in 0..c {
                    for i in 0..oh * k {
                        for j in 0..ow * k {
                            dx[[ci, i, j]] = gm[[ci, i / k, j / k]] * inv;
                        }
                    }
                }
                Self::accum(grads, x, dx.into_dyn());
            }
            Op::UpsampleNearest(x, k) => {
                let gm = as3(g);
                let (c, oh, ow) = (gm.shape()[0], gm.shape()[1], gm.shape()[2]);
                let mut dx = Array3::<f64>::zeros((c, oh / k, ow / k));
                for ci in 0..c {
                    for i in 0..oh {
                        for j in 0..ow {
                            dx[[ci, i / k, j / k]] += gm[[ci, i, j]];
                        }
                    }
                }
                Self::accum(grads, x, dx.into_dyn());
            }
            Op::ConcatChannels(a, b) => {
                let ca = self.vals[a].shape()[0];
                let gm = as3(g);
                let ga = gm.slice(ndarray::s![..ca, .., ..]).to_owned();
                let gb = gm.slice(ndarray::s![ca.., .., ..]).to_owned();
                Self::accum(grads, a, ga.into_dyn());
                Self::accum(grads, b, gb.into_dyn());
            }
            Op::ConcatRows(a, b) => {
                let ra = self.vals[a].shape()[0];
                let gm = as2(g);
                let ga = gm.slice(ndarray::s![..ra, ..]).to_owned();
                let gb = gm.slice(ndarray::s![ra.., ..]).to_owned();
                Self::accum(grads, a, ga.into_dyn());
                Self::accum(grads, b, gb.into_dyn());
            }
            Op::SliceRows { a, start, len } => {
                let av = as2(&self.vals[a]);
                let gm = as2(g);
                let mut da = Array2::<f64>::zeros(av.raw_dim());
                da.slice_mut(ndarray::s![start..start + len, ..]).assign(&gm);
                Self::accum(grads, a, da.into_dyn());
            }
            Op::SpatialToTokens(x) => {
                let xv = as3(&self.vals[x]);
                let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let gm = as2(g);
                let mut dx = Array3::<f64>::zeros((c, h, w));
                for ci in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            dx[[ci, i, j]] = gm[[i * w + j, ci]];
                        }
                    }
                }
                Self::accum(grads, x, dx.into_dyn());
            }
            Op::TokensToSpatial(a, h, w) => {
                let gm = as3(g);
                let c = gm.shape()[0];
                let mut da = Array2::<f64>::zeros((h * w, c));
                for ci in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            da[[i * w + j, ci]] = gm[[ci, i, j]];
                        }
                    }
                }
                Self::accum(grads, a, da.into_dyn());
            }
            Op::Mean(a) => {
                let n = self.vals[a].len() as f64;
                let gs = g.iter().next().copied().unwrap();
                let da = ArrayD::from_elem(self.vals[a].raw_dim(), gs / n);
                Self::accum(grads, a, da);
            }
        }
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

fn as1(a: &ArrayD<f64>) -> Array1<f64> {
    a.view().into_dimensionality::<Ix1>().unwrap().to_owned()
}

fn as2(a: &ArrayD<f64>) -> Array2<f64> {
    a.view().into_dimensionality::<Ix2>().unwrap().to_owned()
}

fn as3(a: &ArrayD<f64>) -> Array3<f64> {
    a.view().into_dimensionality::<Ix3>().unwrap().to_owned()
}

fn w_as_mat(w: &ArrayD<f64>, cout: usize, k: usize) -> Array2<f64> {
    w.view()
        .into_shape_with_order((cout, k))
        .unwrap()
        .to_owned()
}

fn im2col(x: &Array3<f64>, kh: usize, kw: usize, pad: usize) -> Array2<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let oh = h + 2 * pad + 1 - kh;
    let ow = w + 2 * pad + 1 - kw;
    let mut cols = Array2::<f64>::zeros((c * kh * kw, oh * ow));
    for ci in 0..c {
        for di in 0..kh {
            for dj in 0..kw {
                let row = (ci * kh + di) * kw + dj;
                for i in 0..oh {
                    let si = i + di;
                    if si < pad || si >= h + pad {
                        continue;
                    }
                    for j in 0..ow {
                        let sj = j + dj;
                        if sj < pad || sj >= w + pad {
                            continue;
                        }
                        cols[[row, i * ow + j]] = x[[ci, si - pad, sj - pad]];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array3<f64> {
    let mut x = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for di in 0..kh {
            for dj in 0..kw {
                let row = (ci * kh + di) * kw + dj;
                for i in 0..oh {
                    let si = i + di;
                    if si < pad || si >= h + pad {
                        continue;
                    }
                    for j in 0..ow {
                        let sj = j + dj;
                        if sj < pad || sj >= w + pad {
                            continue;
                        }
                        x[[ci, si - pad, sj - pad]] += cols[[row, i * ow + j]];
                    }
                }
            }
        }
    }
    x
}
