//! Forward passes: adder and convolution filters, batch normalization with
//! freeze semantics, ReLU, nearest 2x upsampling and strided downsampling.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{tensor_stats, ConvGeometry, Element, Shape4, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FilterKind {
    /// Negated l1 distance between patch and filter.
    Adder,
    /// Cross-correlation.
    Conv,
}

impl FilterKind {
    pub fn name(self) -> &'static str {
        match self {
            FilterKind::Adder => "adder",
            FilterKind::Conv => "conv",
        }
    }
}

impl fmt::Display for FilterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for FilterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adder" => Ok(FilterKind::Adder),
            "conv" => Ok(FilterKind::Conv),
            other => Err(Error::Config(format!("unknown filter kind `{other}`"))),
        }
    }
}

/// Filter weights of shape `(c_out, c_in, kh, kw)` plus geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank<T: Element = f32> {
    weights: Tensor4<T>,
    kind: FilterKind,
    geom: ConvGeometry,
    pub bias: Option<Vec<T>>,
}

impl<T: Element> FilterBank<T> {
    pub fn new(
        kind: FilterKind,
        weights: Tensor4<T>,
        stride: usize,
        padding: usize,
        bias: Option<Vec<T>>,
    ) -> Result<Self> {
        let s = weights.shape();
        let geom = ConvGeometry::new(s.h, s.w, stride, padding)?;
        if s.n == 0 || s.c == 0 {
            return Err(Error::Shape(format!("filter bank {} has no channels", s)));
        }
        if let Some(b) = &bias {
            if b.len() != s.n {
                return Err(Error::Shape(format!(
                    "bias has {} entries for {} output channels",
                    b.len(),
                    s.n
                )));
            }
        }
        Ok(Self {
            weights,
            kind,
            geom,
            bias,
        })
    }

    pub fn kind(&self) -> FilterKind {
        self.kind
    }

    pub fn geometry(&self) -> ConvGeometry {
        self.geom
    }

    pub fn weights(&self) -> &Tensor4<T> {
        &self.weights
    }

    /// Mutable weight access; the shape cannot change through this.
    pub fn weights_mut(&mut self) -> &mut [T] {
        self.weights.data_mut()
    }

    pub fn c_out(&self) -> usize {
        self.weights.shape().n
    }

    pub fn c_in(&self) -> usize {
        self.weights.shape().c
    }

    pub fn cast<U: Element>(&self) -> FilterBank<U> {
        FilterBank {
            weights: self.weights.cast(),
            kind: self.kind,
            geom: self.geom,
            bias: self
                .bias
                .as_ref()
                .map(|b| b.iter().map(|v| U::from_f64(v.to_f64())).collect()),
        }
    }

    /// Output shape for `input`, validating channel counts and geometry.
    pub fn output_shape(&self, input: Shape4) -> Result<Shape4> {
        if input.c != self.c_in() {
            return Err(Error::Shape(format!(
                "input has {} channels, filter expects {}",
                input.c,
                self.c_in()
            )));
        }
        let (oh, ow) = self.geom.output_size(input.h, input.w)?;
        Ok(Shape4::new(input.n, self.c_out(), oh, ow))
    }
}

impl FilterBank<f32> {
    /// Zero-mean Gaussian init with std `sqrt(2 / (kh·kw·c_in))`, shared by
    /// both kinds.
    pub fn init<R: Rng + ?Sized>(
        kind: FilterKind,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = (kernel * kernel * c_in).max(1) as f32;
        let std = (2.0 / fan_in).sqrt();
        let normal = Normal::new(0.0f32, std).map_err(|e| Error::Config(e.to_string()))?;
        let shape = Shape4::new(c_out, c_in, kernel, kernel);
        let data = (0..shape.numel()).map(|_| normal.sample(rng)).collect();
        let weights = Tensor4::from_vec(shape, data)?;
        Self::new(kind, weights, stride, padding, bias.then(|| vec![0.0; c_out]))
    }
}

/// Per-sample valid range of output columns (or rows) for kernel offset
/// `tap`: positions `o` with `0 <= o·stride + tap − pad < len`.
#[inline]
fn valid_range(out_len: usize, len: usize, tap: usize, stride: usize, pad: usize) -> (usize, usize) {
    // o·s + tap ≥ pad  ⇔  o ≥ ceil((pad − tap)/s)
    let lo = if tap >= pad {
        0
    } else {
        (pad - tap).div_ceil(stride)
    };
    // o·s + tap − pad ≤ len − 1  ⇔  o ≤ (len − 1 + pad − tap)/s
    let hi = if len + pad < tap + 1 {
        0
    } else {
        ((len - 1 + pad - tap) / stride + 1).min(out_len)
    };
    (lo.min(hi), hi)
}

/// Shared driver: each `(n, t)` output plane is filled independently from an
/// `f64` accumulator. `tap(x, w)` is the per-tap contribution for an
/// in-bounds input value, `pad(w)` the contribution of a zero-padded tap.
fn filter_planes<T: Element>(
    x: &Tensor4<T>,
    f: &FilterBank<T>,
    tap: impl Fn(f64, f64) -> f64 + Sync,
    pad: impl Fn(f64) -> f64 + Sync,
    post: impl Fn(f64) -> f64 + Sync,
) -> Result<Tensor4<T>> {
    let out_shape = f.output_shape(x.shape())?;
    let xs = x.shape();
    let g = f.geom;
    let (oh, ow) = (out_shape.h, out_shape.w);
    let plane = oh * ow;
    let c_out = out_shape.c;
    let mut out = Tensor4::<T>::zeros(out_shape);
    if plane == 0 {
        return Ok(out);
    }
    out.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(idx, dst)| {
            let n = idx / c_out;
            let t = idx % c_out;
            let mut acc = vec![0.0f64; plane];
            for k in 0..xs.c {
                let xplane = x.plane(n, k);
                for i in 0..g.kh {
                    let (ylo, yhi) = valid_range(oh, xs.h, i, g.stride, g.padding);
                    for j in 0..g.kw {
                        let w = f.weights.at(t, k, i, j).to_f64();
                        let pw = pad(w);
                        let (xlo, xhi) = valid_range(ow, xs.w, j, g.stride, g.padding);
                        for oy in 0..oh {
                            let row = &mut acc[oy * ow..(oy + 1) * ow];
                            if oy < ylo || oy >= yhi {
                                row.iter_mut().for_each(|a| *a += pw);
                                continue;
                            }
                            let iy = oy * g.stride + i - g.padding;
                            let xrow = &xplane[iy * xs.w..(iy + 1) * xs.w];
                            for a in &mut row[..xlo] {
                                *a += pw;
                            }
                            for (ox, a) in row.iter_mut().enumerate().take(xhi).skip(xlo) {
                                let ix = ox * g.stride + j - g.padding;
                                *a += tap(xrow[ix].to_f64(), w);
                            }
                            for a in &mut row[xhi..] {
                                *a += pw;
                            }
                        }
                    }
                }
            }
            let b = f.bias.as_ref().map_or(0.0, |b| b[t].to_f64());
            for (d, a) in dst.iter_mut().zip(acc) {
                *d = T::from_f64(post(a) + b);
            }
        });
    Ok(out)
}

/// `Y(m,n,t) = −Σ_{i,j,k} |X(m·s+i−p, n·s+j−p, k) − F(t,k,i,j)|`, with
/// zero-filled padding taps contributing `|F|`. Bias, if any, is added after
/// the negated sum.
pub fn adder_forward<T: Element>(x: &Tensor4<T>, f: &FilterBank<T>) -> Result<Tensor4<T>> {
    expect_kind(f, FilterKind::Adder)?;
    filter_planes(x, f, |xv, w| (xv - w).abs(), |w| w.abs(), |s| -s)
}

/// Standard cross-correlation.
pub fn conv_forward<T: Element>(x: &Tensor4<T>, f: &FilterBank<T>) -> Result<Tensor4<T>> {
    expect_kind(f, FilterKind::Conv)?;
    filter_planes(x, f, |xv, w| xv * w, |_| 0.0, |s| s)
}

/// Dispatches on the filter kind.
pub fn filter_forward<T: Element>(x: &Tensor4<T>, f: &FilterBank<T>) -> Result<Tensor4<T>> {
    match f.kind {
        FilterKind::Adder => adder_forward(x, f),
        FilterKind::Conv => conv_forward(x, f),
    }
}

fn expect_kind<T: Element>(f: &FilterBank<T>, kind: FilterKind) -> Result<()> {
    if f.kind != kind {
        return Err(Error::FilterKind {
            expected: kind.name(),
            got: f.kind.name(),
        });
    }
    Ok(())
}

pub const BN_DEFAULT_MOMENTUM: f64 = 0.1;
pub const BN_DEFAULT_EPS: f64 = 1e-5;

/// Batch normalization parameters and running statistics.
///
/// While `frozen` is set, the running statistics are never written, even in
/// training mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T: Element = f32> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
    pub frozen: bool,
}

impl<T: Element> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![T::from_f64(1.0); channels],
            beta: vec![T::default(); channels],
            running_mean: vec![T::default(); channels],
            running_var: vec![T::from_f64(1.0); channels],
            momentum: BN_DEFAULT_MOMENTUM,
            eps: BN_DEFAULT_EPS,
            frozen: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn cast<U: Element>(&self) -> BatchNormState<U> {
        let c = |v: &[T]| v.iter().map(|x| U::from_f64(x.to_f64())).collect();
        BatchNormState {
            gamma: c(&self.gamma),
            beta: c(&self.beta),
            running_mean: c(&self.running_mean),
            running_var: c(&self.running_var),
            momentum: self.momentum,
            eps: self.eps,
            frozen: self.frozen,
        }
    }
}

/// What a BN forward needs to remember for its backward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    /// Normalized input before the affine transform.
    pub x_hat: Tensor4<f64>,
    pub inv_std: Vec<f64>,
    /// True when batch statistics were used (and therefore depend on the input).
    pub batch_stats: bool,
}

/// Normalizes `x` per channel.
///
/// Training mode on an unfrozen state uses the batch statistics and updates
/// the running statistics with an exponential moving average
/// `new = (1 − momentum)·old + momentum·batch`. In every other case the
/// stored running statistics are used and left untouched.
pub fn batchnorm_forward<T: Element>(
    x: &Tensor4<T>,
    bn: &mut BatchNormState<T>,
    training: bool,
) -> Result<Tensor4<T>> {
    batchnorm_forward_cached(x, bn, training).map(|(y, _)| y)
}

pub fn batchnorm_forward_cached<T: Element>(
    x: &Tensor4<T>,
    bn: &mut BatchNormState<T>,
    training: bool,
) -> Result<(Tensor4<T>, BnCache)> {
    let s = x.shape();
    if s.c != bn.channels() {
        return Err(Error::Shape(format!(
            "input has {} channels, batch norm has {}",
            s.c,
            bn.channels()
        )));
    }
    let use_batch = training && !bn.frozen;
    let (mean, var): (Vec<f64>, Vec<f64>) = if use_batch {
        let count = s.n * s.plane();
        if count < 2 {
            return Err(Error::BatchNorm(format!(
                "training mode needs at least 2 values per channel, got {count}"
            )));
        }
        let st = tensor_stats(x, true)?;
        for c in 0..s.c {
            let m = bn.momentum;
            let rm = (1.0 - m) * bn.running_mean[c].to_f64() + m * st.mean[c];
            let rv = (1.0 - m) * bn.running_var[c].to_f64() + m * st.var[c];
            bn.running_mean[c] = T::from_f64(rm);
            bn.running_var[c] = T::from_f64(rv.max(0.0));
        }
        (st.mean, st.var)
    } else {
        (
            bn.running_mean.iter().map(|v| v.to_f64()).collect(),
            bn.running_var.iter().map(|v| v.to_f64()).collect(),
        )
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + bn.eps).sqrt()).collect();
    let mut x_hat = Tensor4::<f64>::zeros(s);
    let mut y = Tensor4::<T>::zeros(s);
    let plane = s.plane();
    for n in 0..s.n {
        for c in 0..s.c {
            let g = bn.gamma[c].to_f64();
            let b = bn.beta[c].to_f64();
            let base = (n * s.c + c) * plane;
            for (o, &v) in x.plane(n, c).iter().enumerate() {
                let h = (v.to_f64() - mean[c]) * inv_std[c];
                x_hat.data_mut()[base + o] = h;
                y.data_mut()[base + o] = T::from_f64(g * h + b);
            }
        }
    }
    Ok((
        y,
        BnCache {
            x_hat,
            inv_std,
            batch_stats: use_batch,
        },
    ))
}

pub fn relu<T: Element>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| if v.to_f64() > 0.0 { v } else { T::default() })
}

/// Each input pixel becomes a 2x2 block.
pub fn upsample_nearest_2x<T: Element>(x: &Tensor4<T>) -> Tensor4<T> {
    let s = x.shape();
    let out = Shape4::new(s.n, s.c, 2 * s.h, 2 * s.w);
    Tensor4::from_fn(out, |n, c, y, xx| x.at(n, c, y / 2, xx / 2))
}

/// Stride-2 filtered reduction. Odd sizes follow the floor rule of
/// [`ConvGeometry::output_size`]; with a 3x3 kernel and padding 1 an even
/// `H` maps to `H/2`.
pub fn downsample<T: Element>(x: &Tensor4<T>, f: &FilterBank<T>) -> Result<Tensor4<T>> {
    if f.geom.stride != 2 {
        return Err(Error::Geometry(format!(
            "downsample filter must have stride 2, has {}",
            f.geom.stride
        )));
    }
    filter_forward(x, f)
}

/// Fraction of elements with `|v| <= threshold`.
pub fn sparsity<T: Element>(x: &Tensor4<T>, threshold: f64) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::Empty);
    }
    let zeros = x
        .data()
        .iter()
        .filter(|v| v.to_f64().abs() <= threshold)
        .count();
    Ok(zeros as f64 / x.len() as f64)
}
