//! Hand-derived backward passes and a finite-difference gradient checker.
//!
//! Adder layers use surrogate rules: the weight gradient is the exact
//! gradient of the companion forward `−½Σ(X−F)²` (i.e. `X − F` per tap),
//! and the input gradient is either `sign(F − X)` (the exact subgradient of
//! the adder forward) or `clamp(F − X, −1, 1)`.

use std::fmt;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::layers::{BatchNormState, BnCache, FilterBank, FilterKind};
use crate::tensor::{Element, Shape4, Tensor4};

/// Per-tap factor used for the adder input gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum InputRule {
    /// `clamp(F − X, −1, 1)`: the clipped l2 gradient.
    HardTanhL2,
    /// `sign(F − X)` with `sign(0) = 0`.
    #[default]
    Sign,
}

impl InputRule {
    #[inline]
    pub fn factor(self, w: f64, x: f64) -> f64 {
        let d = w - x;
        match self {
            InputRule::HardTanhL2 => d.clamp(-1.0, 1.0),
            InputRule::Sign => {
                if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            InputRule::HardTanhL2 => "hardtanh",
            InputRule::Sign => "sign",
        }
    }
}

impl fmt::Display for InputRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for InputRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sign" => Ok(InputRule::Sign),
            "hardtanh" | "hardtanh-l2" | "l2" => Ok(InputRule::HardTanhL2),
            other => Err(Error::Config(format!("unknown input rule `{other}`"))),
        }
    }
}

/// The only weight rule: full-precision l2 gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightRule {
    #[default]
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GradMode {
    pub input_rule: InputRule,
    pub weight_rule: WeightRule,
}

fn check_gy<T: Element>(x: &Tensor4<T>, f: &FilterBank<T>, gy: &Tensor4<T>) -> Result<Shape4> {
    let expected = f.output_shape(x.shape())?;
    if gy.shape() != expected {
        return Err(Error::Shape(format!(
            "upstream gradient is {}, forward output is {}",
            gy.shape(),
            expected
        )));
    }
    Ok(expected)
}

/// Scatter-style input gradient; `factor(w, x)` is `∂tap/∂x`.
fn input_grad<T: Element>(
    x: &Tensor4<T>,
    f: &FilterBank<T>,
    gy: &Tensor4<T>,
    factor: impl Fn(f64, f64) -> f64 + Sync,
) -> Result<Tensor4<T>> {
    let ys = check_gy(x, f, gy)?;
    let xs = x.shape();
    let g = f.geometry();
    let plane = xs.plane();
    let mut gx = Tensor4::<T>::zeros(xs);
    if plane == 0 {
        return Ok(gx);
    }
    gx.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(idx, dst)| {
            let n = idx / xs.c;
            let k = idx % xs.c;
            let xplane = x.plane(n, k);
            let mut acc = vec![0.0f64; plane];
            for t in 0..ys.c {
                let gplane = gy.plane(n, t);
                for i in 0..g.kh {
                    for j in 0..g.kw {
                        let w = f.weights().at(t, k, i, j).to_f64();
                        for oy in 0..ys.h {
                            let iy = (oy * g.stride + i) as isize - g.padding as isize;
                            if iy < 0 || iy as usize >= xs.h {
                                continue;
                            }
                            let iy = iy as usize;
                            for ox in 0..ys.w {
                                let ix = (ox * g.stride + j) as isize - g.padding as isize;
                                if ix < 0 || ix as usize >= xs.w {
                                    continue;
                                }
                                let o = iy * xs.w + ix as usize;
                                let gv = gplane[oy * ys.w + ox].to_f64();
                                acc[o] += gv * factor(w, xplane[o].to_f64());
                            }
                        }
                    }
                }
            }
            for (d, a) in dst.iter_mut().zip(acc) {
                *d = T::from_f64(a);
            }
        });
    Ok(gx)
}

/// Weight gradient; `tap(x, w)` is `∂tap/∂w` for an in-bounds input value
/// and is evaluated with `x = 0` on padded taps.
fn weight_grad<T: Element>(
    x: &Tensor4<T>,
    f: &FilterBank<T>,
    gy: &Tensor4<T>,
    tap: impl Fn(f64, f64) -> f64 + Sync,
) -> Result<Tensor4<T>> {
    let ys = check_gy(x, f, gy)?;
    let xs = x.shape();
    let g = f.geometry();
    let ws = f.weights().shape();
    let block = ws.c * ws.h * ws.w;
    let mut gw = Tensor4::<T>::zeros(ws);
    gw.data_mut()
        .par_chunks_mut(block)
        .enumerate()
        .for_each(|(t, dst)| {
            let mut acc = vec![0.0f64; block];
            for n in 0..xs.n {
                let gplane = gy.plane(n, t);
                for k in 0..xs.c {
                    let xplane = x.plane(n, k);
                    for i in 0..g.kh {
                        for j in 0..g.kw {
                            let w = f.weights().at(t, k, i, j).to_f64();
                            let mut s = 0.0f64;
                            for oy in 0..ys.h {
                                let iy = (oy * g.stride + i) as isize - g.padding as isize;
                                let row_inside = iy >= 0 && (iy as usize) < xs.h;
                                for ox in 0..ys.w {
                                    let ix = (ox * g.stride + j) as isize - g.padding as isize;
                                    let xv = if row_inside && ix >= 0 && (ix as usize) < xs.w {
                                        xplane[iy as usize * xs.w + ix as usize].to_f64()
                                    } else {
                                        0.0
                                    };
                                    s += gplane[oy * ys.w + ox].to_f64() * tap(xv, w);
                                }
                            }
                            acc[(k * g.kh + i) * g.kw + j] += s;
                        }
                    }
                }
            }
            for (d, a) in dst.iter_mut().zip(acc) {
                *d = T::from_f64(a);
            }
        });
    Ok(gw)
}

fn expect_kind<T: Element>(f: &FilterBank<T>, kind: FilterKind) -> Result<()> {
    if f.kind() != kind {
        return Err(Error::FilterKind {
            expected: kind.name(),
            got: f.kind().name(),
        });
    }
    Ok(())
}

/// `gF(t,k,i,j) = Σ gY · (X − F)` over batch and output positions,
/// zero-padded taps included.
pub fn adder_backward_weight<T: Element>(
    x: &Tensor4<T>,
    f: &FilterBank<T>,
    gy: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    expect_kind(f, FilterKind::Adder)?;
    weight_grad(x, f, gy, |xv, w| xv - w)
}

/// Input gradient under `rule`. Gradients for padded taps are discarded.
pub fn adder_backward_input<T: Element>(
    x: &Tensor4<T>,
    f: &FilterBank<T>,
    gy: &Tensor4<T>,
    rule: InputRule,
) -> Result<Tensor4<T>> {
    expect_kind(f, FilterKind::Adder)?;
    input_grad(x, f, gy, move |w, xv| rule.factor(w, xv))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterGrads<T: Element = f32> {
    pub input: Tensor4<T>,
    pub weight: Tensor4<T>,
    pub bias: Option<Vec<T>>,
}

pub fn conv_backward<T: Element>(
    x: &Tensor4<T>,
    f: &FilterBank<T>,
    gy: &Tensor4<T>,
) -> Result<FilterGrads<T>> {
    expect_kind(f, FilterKind::Conv)?;
    Ok(FilterGrads {
        input: input_grad(x, f, gy, |w, _| w)?,
        weight: weight_grad(x, f, gy, |xv, _| xv)?,
        bias: f.bias.as_ref().map(|_| bias_backward(gy)),
    })
}

/// Full backward for either kind. `rule` only matters for adder filters.
pub fn filter_backward<T: Element>(
    x: &Tensor4<T>,
    f: &FilterBank<T>,
    gy: &Tensor4<T>,
    rule: InputRule,
) -> Result<FilterGrads<T>> {
    match f.kind() {
        FilterKind::Conv => conv_backward(x, f, gy),
        FilterKind::Adder => Ok(FilterGrads {
            input: adder_backward_input(x, f, gy, rule)?,
            weight: adder_backward_weight(x, f, gy)?,
            bias: f.bias.as_ref().map(|_| bias_backward(gy)),
        }),
    }
}

/// Sum of the upstream gradient per output channel.
pub fn bias_backward<T: Element>(gy: &Tensor4<T>) -> Vec<T> {
    let s = gy.shape();
    (0..s.c)
        .map(|c| {
            let total: f64 = (0..s.n)
                .map(|n| gy.plane(n, c).iter().map(|v| v.to_f64()).sum::<f64>())
                .sum();
            T::from_f64(total)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnGrads<T: Element = f32> {
    pub input: Tensor4<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

/// Backward of [`crate::layers::batchnorm_forward_cached`]. When the forward
/// used running statistics they are constants and the input gradient is a
/// per-channel scale.
pub fn bn_backward<T: Element>(
    cache: &BnCache,
    bn: &BatchNormState<T>,
    gy: &Tensor4<T>,
) -> Result<BnGrads<T>> {
    let s = gy.shape();
    if cache.x_hat.shape() != s {
        return Err(Error::Shape(format!(
            "upstream gradient is {}, cached input is {}",
            s,
            cache.x_hat.shape()
        )));
    }
    let m = (s.n * s.plane()) as f64;
    let mut gx = Tensor4::<T>::zeros(s);
    let mut ggamma = Vec::with_capacity(s.c);
    let mut gbeta = Vec::with_capacity(s.c);
    let plane = s.plane();
    for c in 0..s.c {
        let mut sum_g = 0.0f64;
        let mut sum_gx = 0.0f64;
        for n in 0..s.n {
            let xh = cache.x_hat.plane(n, c);
            for (g, h) in gy.plane(n, c).iter().zip(xh) {
                let g = g.to_f64();
                sum_g += g;
                sum_gx += g * h;
            }
        }
        ggamma.push(T::from_f64(sum_gx));
        gbeta.push(T::from_f64(sum_g));
        let scale = bn.gamma[c].to_f64() * cache.inv_std[c];
        for n in 0..s.n {
            let base = (n * s.c + c) * plane;
            let xh = cache.x_hat.plane(n, c);
            for (o, (g, h)) in gy.plane(n, c).iter().zip(xh).enumerate() {
                let g = g.to_f64();
                let v = if cache.batch_stats {
                    scale * (g - sum_g / m - h * sum_gx / m)
                } else {
                    scale * g
                };
                gx.data_mut()[base + o] = T::from_f64(v);
            }
        }
    }
    Ok(BnGrads {
        input: gx,
        gamma: ggamma,
        beta: gbeta,
    })
}

/// Gradient of ReLU given its forward input (or output; the mask is the same).
pub fn relu_backward<T: Element>(x: &Tensor4<T>, gy: &Tensor4<T>) -> Result<Tensor4<T>> {
    x.zip_map(gy, |xv, g| if xv.to_f64() > 0.0 { g } else { T::default() })
}

/// Adjoint of [`crate::layers::upsample_nearest_2x`]: sums each 2x2 block.
pub fn upsample_backward<T: Element>(gy: &Tensor4<T>) -> Result<Tensor4<T>> {
    let s = gy.shape();
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(Error::Shape(format!("{} is not an upsampled shape", s)));
    }
    let out = Shape4::new(s.n, s.c, s.h / 2, s.w / 2);
    Ok(Tensor4::from_fn(out, |n, c, y, x| {
        let v = gy.at(n, c, 2 * y, 2 * x).to_f64()
            + gy.at(n, c, 2 * y, 2 * x + 1).to_f64()
            + gy.at(n, c, 2 * y + 1, 2 * x).to_f64()
            + gy.at(n, c, 2 * y + 1, 2 * x + 1).to_f64();
        T::from_f64(v)
    }))
}

/// Companion forward `Ŷ = −½ Σ (X − F)²` whose exact weight gradient is the
/// l2 surrogate. Same padding and geometry as the adder forward.
pub fn adder_l2_forward<T: Element>(x: &Tensor4<T>, f: &FilterBank<T>) -> Result<Tensor4<T>> {
    expect_kind(f, FilterKind::Adder)?;
    let xs = x.shape();
    let out_shape = f.output_shape(xs)?;
    let g = f.geometry();
    let mut y = Tensor4::<T>::zeros(out_shape);
    for n in 0..xs.n {
        for t in 0..out_shape.c {
            for oy in 0..out_shape.h {
                for ox in 0..out_shape.w {
                    let mut acc = 0.0f64;
                    for k in 0..xs.c {
                        for i in 0..g.kh {
                            for j in 0..g.kw {
                                let iy = (oy * g.stride + i) as isize - g.padding as isize;
                                let ix = (ox * g.stride + j) as isize - g.padding as isize;
                                let xv = if iy >= 0 && ix >= 0 && (iy as usize) < xs.h && (ix as usize) < xs.w {
                                    x.at(n, k, iy as usize, ix as usize).to_f64()
                                } else {
                                    0.0
                                };
                                let d = xv - f.weights().at(t, k, i, j).to_f64();
                                acc += d * d;
                            }
                        }
                    }
                    let b = f.bias.as_ref().map_or(0.0, |b| b[t].to_f64());
                    y.set(n, t, oy, ox, T::from_f64(-0.5 * acc + b));
                }
            }
        }
    }
    Ok(y)
}

pub mod check;

pub use check::{gradcheck, GradCheckConfig, GradCheckPlan, LayerCase, ParamCheck};
