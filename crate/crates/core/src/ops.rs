//! Differentiable operations. Images are `[N, C, H, W]`.

use crate::autograd::{Backward, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn dims4<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => Err(Error::Shape(format!("{what}: expected 4-d tensor, got {s:?}"))),
    }
}

// ---------------------------------------------------------------- elementwise

struct AddBack;
impl<T: Scalar> Backward<T> for AddBack {
    fn backward(&self, g: &Tensor<T>, _: &[Var<T>]) -> Vec<Option<Tensor<T>>> {
        vec![Some(g.clone()), Some(g.clone())]
    }
}

pub fn add<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let v = a.value().zip_map(b.value(), |x, y| x + y)?;
    Ok(Var::from_op(v, vec![a.clone(), b.clone()], Box::new(AddBack)))
}

struct SubBack;
impl<T: Scalar> Backward<T> for SubBack {
    fn backward(&self, g: &Tensor<T>, _: &[Var<T>]) -> Vec<Option<Tensor<T>>> {
        vec![Some(g.clone()), Some(g.map(|v| -v))]
    }
}

pub fn sub<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let v = a.value().zip_map(b.value(), |x, y| x - y)?;
    Ok(Var::from_op(v, vec![a.clone(), b.clone()], Box::new(SubBack)))
}

struct ScaleBack<T>(T);
impl<T: Scalar> Backward<T> for ScaleBack<T> {
    fn backward(&self, g: &Tensor<T>, _: &[Var<T>]) -> Vec<Option<Tensor<T>>> {
        let s = self.0;
        vec![Some(g.map(|v| v * s))]
    }
}

pub fn scale<T: Scalar>(a: &Var<T>, s: T) -> Var<T> {
    let v = a.value().map(|x| x * s);
    Var::from_op(v, vec![a.clone()], Box::new(ScaleBack(s)))
}

struct SiluBack;
impl<T: Scalar> Backward<T> for SiluBack {
    fn backward(&self, g: &Tensor<T>, parents: &[Var<T>]) -> Vec<Option<Tensor<T>>> {
        let one = T::one();
        let d = g
            .zip_map(parents[0].value(), |g, x| {
                let s = one / (one + (-x).exp());
                g * s * (one + x * (one - s))
            })
            .expect("same shape");
        vec![Some(d)]
    }
}

pub fn silu<T: Scalar>(x: &Var<T>) -> Var<T> {
    let one = T::one();
    let v = x.value().map(|x| x / (one + (-x).exp()));
    Var::from_op(v, vec![x.clone()], Box::new(SiluBack))
}

struct ReshapeBack(Vec<usize>);
impl<T: Scalar> Backward<T> for ReshapeBack {
    fn backward(&self, g: &Tensor<T>, _: &[Var<T>]) -> Vec<Option<Tensor<T>>> {
        vec![Some(g.clone().reshape(&self.0).expect("same size"))]
    }
}

pub fn reshape<T: Scalar>(x: &Var<T>, shape: &[usize]) -> Result<Var<T>> {
    let v = x.to_tensor().reshape(shape)?;
    Ok(Var::from_op(v, vec![x.clone()], Box::new(ReshapeBack(x.shape().to_vec()))))
}

// ------------------------------------------------------------------- losses

struct MseBack;
impl<T: Scalar> Backward<T> for MseBack {
    fn backward(&self, g: &Tensor<T>, parents: &[Var<T>]) -> Vec<Option<Tensor<T>>> {
        let a = parents[0].value();
        let n = T::from_usize(a.len()).unwrap();
        let k = g.data()[0] * (T::one() + T::one()) / n;
        let da = a.zip_map(parents[1].value(), |x, y| k * (x - y)).expect("same shape");
        let db = parents[1].requires_grad().then(|| da.map(|v| -v));
        vec![Some(da), db]
    }
}

/// Mean squared error over all elements.
pub fn mse<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    a.value().expect_shape(b.shape())?;
    let n = T::from_usize(a.value().len().max(1)).unwrap();
    let s: T = a.value().data().iter().zip(b.value().data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
    Ok(Var::from_op(Tensor::scalar(s / n), vec![a.clone(), b.clone()], Box::new(MseBack)))
}

struct MeanBack;
impl<T: Scalar> Backward<T> for MeanBack {
    fn backward(&self, g: &Tensor<T>, parents: &[Var<T>]) -> Vec<Option<Tensor<T>>> {
        let x = parents[0].value();
        let v = g.data()[0] / T::from_usize(x.len()).unwrap();
        vec![Some(Tensor::full(x.shape(), v))]
    }
}

pub fn mean<T: Scalar>(x: &Var<T>) -> Var<T> {
    let n = T::from_usize(x.value().len().max(1)).unwrap();
    Var::from_op(Tensor::scalar(x.value().sum() / n), vec![x.clone()], Box::new(MeanBack))
}

// ------------------------------------------------------------------- matmul

struct MatmulBack {
    m: usize,
    k: usize,
    n: usize,
}
impl<T: Scalar> Backward<T> for MatmulBack {
    fn backward(&self, g: &Tensor<T>, parents: &[Var<T>]) -> Vec<Option<Tensor<T>>> {
        let (m, k, n) = (self.m, self.k, self.n);
        let (a, b) = (&parents[0], &parents[1]);
        let (z, one) = (T::zero(), T::one());
        let da = a.requires_grad().then(|| {
            // dA = G Bᵀ
            let mut d = Tensor::zeros(&[m, k]);
            T::gemm(m, n, k, one, g.data(), (n as isize, 1), b.value().data(), (1, n as isize), z, d.data_mut(), (k as isize, 1));
            d
        });
        let db = b.requires_grad().then(|| {
            // dB = Aᵀ G
            let mut d = Tensor::zeros(&[k, n]);
            T::gemm(k, m, n, one, a.value().data(), (1, k as isize), g.data(), (n as isize, 1), z, d.data_mut(), (n as isize, 1));
            d
        });
        vec![da, db]
    }
}

/// `[m,k] x [k,n]`.
pub fn matmul<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let (m, k, n) = match (a.shape(), b.shape()) {
        (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
        (sa, sb) => return Err(Error::Shape(format!("matmul {sa:?} x {sb:?}"))),
    };
    let mut out = Tensor::zeros(&[m, n]);
    T::gemm(m, k, n, T::one(), a.value().data(), (k as isize, 1), b.value().data(), (n as isize, 1), T::zero(), out.data_mut(), (n as isize, 1));
    Ok(Var::from_op(out, vec![a.clone(), b.clone()], Box::new(MatmulBack { m, k, n })))
}

struct LinearBack {
    batch: usize,
    fan_in: usize,
    fan_out: usize,
}
impl<T: Scalar> Backward<T> for LinearBack {
    fn backward(&self, g: &Tensor<T>, parents: &[Var<T>]) -> Vec<Option<Tensor<T>>> {
        let (nb, fi, fo) = (self.batch, self.fan_in, self.fan_out);
        let (x, w, b) = (&parents[0], &parents[1], &parents[2]);
        let (z, one) = (T::zero(), T::one());
        let dx = x.requires_grad().then(|| {
            // dX = G W, G: [nb, fo], W: [fo, fi]
            let mut d = Tensor::zeros(&[nb, fi]);
            T::gemm(nb, fo, fi, one, g.data(), (fo as isize, 1), w.value().data(), (fi as isize, 1), z, d.data_mut(), (fi as isize, 1));
            d
        });
        let dw = w.requires_grad().then(|| {
            // dW = Gᵀ X
            let mut d = Tensor::zeros(&[fo, fi]);
            T::gemm(fo, nb, fi, one, g.data(), (1, fo as isize), x.value().data(), (fi as isize, 1), z, d.data_mut(), (fi as isize, 1));
            d
        });
        let db = b.requires_grad().then(|| {
            let mut d = Tensor::zeros(&[fo]);
            for row in g.data().chunks(fo) {
                for (acc, &v) in d.data_mut().iter_mut().zip(row) {
                    *acc += v;
                }
            }
            d
        });
        vec![dx, dw, db]
    }
}

/// `x [N,in]`, `w [out,in]`, `b [out]` → `[N,out]`.
pub fn linear<T: Scalar>(x: &Var<T>, w: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let (nb, fi, fo) = match (x.shape(), w.shape(), b.shape()) {
        (&[nb, fi], &[fo, fi2], &[fo2]) if fi == fi2 && fo == fo2 => (nb, fi, fo),
        (sx, sw, sb) => return Err(Error::Shape(format!("linear x{sx:?} w{sw:?} b{sb:?}"))),
    };
    let mut out = Tensor::zeros(&[nb, fo]);
    for row in out.data_mut().chunks_mut(fo) {
        row.copy_from_slice(b.value().data());
    }
    T::gemm(nb, fi, fo, T::one(), x.value().data(), (fi as isize, 1), w.value().data(), (1, fi as isize), T::one(), out.data_mut(), (fo as isize, 1));
    Ok(Var::from_op(
        out,
        vec![x.clone(), w.clone(), b.clone()],
        Box::new(LinearBack { batch: nb, fan_in: fi, fan_out: fo }),
    ))
}

// --------------------------------------------------------------------- conv

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let (ho, wo) = (self.ho, self.wo);
        for c in 0..self.c {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let line = &mut dst[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, out) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            *out = if ix < 0 || ix >= self.w as isize { T::zero() } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], x: &mut [T]) {
        let (ho, wo) = (self.ho, self.wo);
        for c in 0..self.c {
            let plane = &mut x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let line = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                line[ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

struct ConvBack {
    geom: ConvGeom,
    n: usize,
    o: usize,
}

impl<T: Scalar> Backward<T> for ConvBack {
    fn backward(&self, g: &Tensor<T>, parents: &[Var<T>]) -> Vec<Option<Tensor<T>>> {
        let ConvBack { geom, n, o } = *self;
        let (x, w) = (&parents[0], &parents[1]);
        let (rows, cols) = (geom.rows(), geom.cols());
        let (z, one) = (T::zero(), T::one());
        let in_len = geom.c * geom.h * geom.w;
        let mut dx = x.requires_grad().then(|| Tensor::zeros(x.shape()));
        let mut dw = w.requires_grad().then(|| Tensor::zeros(w.shape()));
        let mut scratch = if geom.is_pointwise() { Vec::new() } else { vec![z; rows * cols] };
        for i in 0..n {
            let gi = &g.data()[i * o * cols..(i + 1) * o * cols];
            if let Some(dw) = dw.as_mut() {
                let xi = &x.value().data()[i * in_len..(i + 1) * in_len];
                let col: &[T] = if geom.is_pointwise() {
                    xi
                } else {
                    geom.im2col(xi, &mut scratch);
                    &scratch
                };
                // dW += G_i colsᵀ
                T::gemm(o, cols, rows, one, gi, (cols as isize, 1), col, (1, cols as isize), one, dw.data_mut(), (rows as isize, 1));
            }
            if let Some(dx) = dx.as_mut() {
                let dxi = &mut dx.data_mut()[i * in_len..(i + 1) * in_len];
                if geom.is_pointwise() {
                    T::gemm(rows, o, cols, one, w.value().data(), (1, rows as isize), gi, (cols as isize, 1), z, dxi, (cols as isize, 1));
                } else {
                    T::gemm(rows, o, cols, one, w.value().data(), (1, rows as isize), gi, (cols as isize, 1), z, &mut scratch, (cols as isize, 1));
                    geom.col2im(&scratch, dxi);
                }
            }
        }
        let db = parents.get(2).filter(|b| b.requires_grad()).map(|_| {
            let mut d = Tensor::zeros(&[o]);
            for i in 0..n {
                for (oc, acc) in d.data_mut().iter_mut().enumerate() {
                    let start = (i * o + oc) * cols;
                    *acc += g.data()[start..start + cols].iter().copied().sum::<T>();
                }
            }
            d
        });
        let mut out = vec![dx, dw];
        if parents.len() == 3 {
            out.push(db);
        }
        out
    }
}

/// 2-d cross-correlation with zero padding.
pub fn conv2d<T: Scalar>(
    x: &Var<T>,
    weight: &Var<T>,
    bias: Option<&Var<T>>,
    stride: usize,
    pad: usize,
) -> Result<Var<T>> {
    let (n, c, h, w) = dims4(x.value(), "conv2d input")?;
    let (o, c2, kh, kw) = dims4(weight.value(), "conv2d weight")?;
    if c != c2 {
        return Err(Error::Shape(format!("conv2d: input has {c} channels, weight expects {c2}")));
    }
    if let Some(b) = bias {
        b.value().expect_shape(&[o])?;
    }
    if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::Shape(format!("conv2d: kernel {kh}x{kw} does not fit {h}x{w} pad {pad}")));
    }
    x.value().ensure_finite("conv2d input")?;
    let geom = ConvGeom {
        c,
        h,
        w,
        kh,
        kw,
        stride,
        pad,
        ho: (h + 2 * pad - kh) / stride + 1,
        wo: (w + 2 * pad - kw) / stride + 1,
    };
    let (rows, cols) = (geom.rows(), geom.cols());
    let mut out = Tensor::zeros(&[n, o, geom.ho, geom.wo]);
    let mut scratch = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * cols] };
    let in_len = c * h * w;
    for i in 0..n {
        let xi = &x.value().data()[i * in_len..(i + 1) * in_len];
        let oi = &mut out.data_mut()[i * o * cols..(i + 1) * o * cols];
        if let Some(b) = bias {
            for (oc, &bv) in b.value().data().iter().enumerate() {
                oi[oc * cols..(oc + 1) * cols].fill(bv);
            }
        }
        let col: &[T] = if geom.is_pointwise() {
            xi
        } else {
            geom.im2col(xi, &mut scratch);
            &scratch
        };
        T::gemm(o, rows, cols, T::one(), weight.value().data(), (rows as isize, 1), col, (cols as isize, 1), T::one(), oi, (cols as isize, 1));
    }
    let mut parents = vec![x.clone(), weight.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    Ok(Var::from_op(out, parents, Box::new(ConvBack { geom, n, o })))
}

// --------------------------------------------------------------- group norm

struct GroupNormBack<T> {
    groups: usize,
    xhat: Tensor<T>,
    rstd: Vec<T>,
}

impl<T: Scalar> Backward<T> for GroupNormBack<T> {
    fn backward(&self, g: &Tensor<T>, parents: &[Var<T>]) -> Vec<Option<Tensor<T>>> {
        let (n, c, h, w) = dims4(g, "group_norm grad").expect("4-d");
        let hw = h * w;
        let cpg = c / self.groups;
        let m = T::from_usize(cpg * hw).unwrap();
        let gamma = parents[1].value().data();
        let xhat = self.xhat.data();
        let gd = g.data();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                for k in base..base + hw {
                    dgamma[ch] += gd[k] * xhat[k];
                    dbeta[ch] += gd[k];
                }
            }
        }
        let dx = parents[0].requires_grad().then(|| {
            let mut dx = Tensor::zeros(g.shape());
            let dxd = dx.data_mut();
            for i in 0..n {
                for grp in 0..self.groups {
                    let start = (i * c + grp * cpg) * hw;
                    let end = start + cpg * hw;
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for k in start..end {
                        let ch = (k / hw) % c;
                        let d = gd[k] * gamma[ch];
                        sum_dxhat += d;
                        sum_dxhat_xhat += d * xhat[k];
                    }
                    let rstd = self.rstd[i * self.groups + grp];
                    for k in start..end {
                        let ch = (k / hw) % c;
                        let d = gd[k] * gamma[ch];
                        dxd[k] = rstd / m * (m * d - sum_dxhat - xhat[k] * sum_dxhat_xhat);
                    }
                }
            }
            dx
        });
        vec![
            dx,
            parents[1].requires_grad().then(|| Tensor::from_vec(&[c], dgamma).unwrap()),
            parents[2].requires_grad().then(|| Tensor::from_vec(&[c], dbeta).unwrap()),
        ]
    }
}

/// Group normalization with per-channel affine `gamma`, `beta`.
pub fn group_norm<T: Scalar>(
    x: &Var<T>,
    gamma: &Var<T>,
    beta: &Var<T>,
    groups: usize,
    eps: f64,
) -> Result<Var<T>> {
    let (n, c, h, w) = dims4(x.value(), "group_norm")?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::Shape(format!("group_norm: {c} channels not divisible into {groups} groups")));
    }
    gamma.value().expect_shape(&[c])?;
    beta.value().expect_shape(&[c])?;
    let hw = h * w;
    let cpg = c / groups;
    let m = T::from_usize(cpg * hw).unwrap();
    let eps = T::from_f64_lossy(eps);
    let xd = x.value().data();
    let mut xhat = Tensor::zeros(x.shape());
    let mut out = Tensor::zeros(x.shape());
    let mut rstds = Vec::with_capacity(n * groups);
    for i in 0..n {
        for grp in 0..groups {
            let start = (i * c + grp * cpg) * hw;
            let end = start + cpg * hw;
            let mean = xd[start..end].iter().copied().sum::<T>() / m;
            let var = xd[start..end].iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
            let rstd = T::one() / (var + eps).sqrt();
            rstds.push(rstd);
            for k in start..end {
                let ch = (k / hw) % c;
                let xh = (xd[k] - mean) * rstd;
                xhat.data_mut()[k] = xh;
                out.data_mut()[k] = xh * gamma.value().data()[ch] + beta.value().data()[ch];
            }
        }
    }
    Ok(Var::from_op(
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(GroupNormBack { groups, xhat, rstd: rstds }),
    ))
}

// ----------------------------------------------------------- shape plumbing

struct ChannelBiasBack;
impl<T: Scalar> Backward<T> for ChannelBiasBack {
    fn backward(&self, g: &Tensor<T>, parents: &[Var<T>]) -> Vec<Option<Tensor<T>>> {
        let (n, c, h, w) = dims4(g, "channel bias grad").expect("4-d");
        let db = parents[1].requires_grad().then(|| {
            let mut d = Tensor::zeros(&[n, c]);
            for (k, acc) in d.data_mut().iter_mut().enumerate() {
                *acc = g.data()[k * h * w..(k + 1) * h * w].iter().copied().sum();
            }
            d
        });
        vec![Some(g.clone()), db]
    }
}

/// `x [N,C,H,W] + e [N,C]` broadcast over space.
pub fn add_channel_bias<T: Scalar>(x: &Var<T>, e: &Var<T>) -> Result<Var<T>> {
    let (n, c, h, w) = dims4(x.value(), "add_channel_bias")?;
    e.value().expect_shape(&[n, c])?;
    let mut out = x.to_tensor();
    for (k, &bv) in e.value().data().iter().enumerate() {
        for v in &mut out.data_mut()[k * h * w..(k + 1) * h * w] {
            *v += bv;
        }
    }
    Ok(Var::from_op(out, vec![x.clone(), e.clone()], Box::new(ChannelBiasBack)))
}

struct ConcatBack {
    channels: Vec<usize>,
}
impl<T: Scalar> Backward<T> for ConcatBack {
    fn backward(&self, g: &Tensor<T>, parents: &[Var<T>]) -> Vec<Option<Tensor<T>>> {
        let (n, c, h, w) = dims4(g, "concat grad").expect("4-d");
        let hw = h * w;
        let mut offset = 0;
        let mut out = Vec::with_capacity(parents.len());
        for (p, &ci) in parents.iter().zip(&self.channels) {
            if p.requires_grad() {
                let mut d = Tensor::zeros(&[n, ci, h, w]);
                for i in 0..n {
                    let src = &g.data()[(i * c + offset) * hw..(i * c + offset + ci) * hw];
                    d.data_mut()[i * ci * hw..(i + 1) * ci * hw].copy_from_slice(src);
                }
                out.push(Some(d));
            } else {
                out.push(None);
            }
            offset += ci;
        }
        out
    }
}

/// Concatenation along the channel axis.
pub fn concat_channels<T: Scalar>(xs: &[&Var<T>]) -> Result<Var<T>> {
    let first = xs.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
    let (n, _, h, w) = dims4(first.value(), "concat")?;
    let mut channels = Vec::with_capacity(xs.len());
    for x in xs {
        let (ni, ci, hi, wi) = dims4(x.value(), "concat")?;
        if (ni, hi, wi) != (n, h, w) {
            return Err(Error::Shape(format!("concat: {:?} vs {:?}", x.shape(), first.shape())));
        }
        channels.push(ci);
    }
    let c: usize = channels.iter().sum();
    let hw = h * w;
    let mut out = Tensor::zeros(&[n, c, h, w]);
    for i in 0..n {
        let mut offset = 0;
        for (x, &ci) in xs.iter().zip(&channels) {
            let src = &x.value().data()[i * ci * hw..(i + 1) * ci * hw];
            out.data_mut()[(i * c + offset) * hw..(i * c + offset + ci) * hw].copy_from_slice(src);
            offset += ci;
        }
    }
    let parents = xs.iter().map(|&x| x.clone()).collect();
    Ok(Var::from_op(out, parents, Box::new(ConcatBack { channels })))
}

struct UpsampleBack;
impl<T: Scalar> Backward<T> for UpsampleBack {
    fn backward(&self, g: &Tensor<T>, parents: &[Var<T>]) -> Vec<Option<Tensor<T>>> {
        let (n, c, h, w) = dims4(parents[0].value(), "upsample").expect("4-d");
        let mut d = Tensor::zeros(&[n, c, h, w]);
        let (h2, w2) = (2 * h, 2 * w);
        for p in 0..n * c {
            let src = &g.data()[p * h2 * w2..(p + 1) * h2 * w2];
            let dst = &mut d.data_mut()[p * h * w..(p + 1) * h * w];
            for y in 0..h2 {
                for x in 0..w2 {
                    dst[(y / 2) * w + x / 2] += src[y * w2 + x];
                }
            }
        }
        vec![Some(d)]
    }
}

/// Nearest-neighbour 2x spatial upsampling.
pub fn upsample2x<T: Scalar>(x: &Var<T>) -> Result<Var<T>> {
    let (n, c, h, w) = dims4(x.value(), "upsample2x")?;
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[n, c, h2, w2]);
    for p in 0..n * c {
        let src = &x.value().data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out.data_mut()[p * h2 * w2..(p + 1) * h2 * w2];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[y * w2 + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    Ok(Var::from_op(out, vec![x.clone()], Box::new(UpsampleBack)))
}
