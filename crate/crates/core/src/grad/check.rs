//! Central finite-difference gradient checking and the per-layer check suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    adder_backward_input, adder_backward_weight, adder_l2_forward, bn_backward, conv_backward,
    relu_backward, InputRule,
};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::layers::{
    adder_forward, batchnorm_forward_cached, conv_forward, relu, BatchNormState, FilterBank,
    FilterKind,
};
use crate::tensor::{Shape4, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    pub rel_tol: f64,
    /// Differences below this are accepted regardless of magnitude.
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            rel_tol: 1e-3,
            abs_floor: 1e-5,
        }
    }
}

impl GradCheckConfig {
    /// `|a − n| / max(|a|, |n|, abs_floor / rel_tol)`: a relative error that
    /// degrades to the absolute floor for tiny gradients.
    pub fn error(&self, analytic: f64, numeric: f64) -> f64 {
        let denom = analytic
            .abs()
            .max(numeric.abs())
            .max(self.abs_floor / self.rel_tol);
        (analytic - numeric).abs() / denom
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub layer: String,
    pub param: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub pass: bool,
}

/// Compares `analytic[p]` to central differences of `objective` around
/// `params[p]`. Parameters are perturbed one element at a time on `f64`
/// copies. The checker only reports; it never asserts.
pub fn gradcheck<F>(
    layer: &str,
    mut objective: F,
    params: &[(&str, Vec<f64>)],
    analytic: &[Vec<f64>],
    cfg: &GradCheckConfig,
) -> Result<Vec<ParamCheck>>
where
    F: FnMut(&[Vec<f64>]) -> Result<f64>,
{
    if params.len() != analytic.len() {
        return Err(Error::Shape(format!(
            "{} parameters but {} analytic gradients",
            params.len(),
            analytic.len()
        )));
    }
    let mut values: Vec<Vec<f64>> = params.iter().map(|(_, v)| v.clone()).collect();
    let base = objective(&values)?;
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("{layer} forward")));
    }
    let mut reports = Vec::with_capacity(params.len());
    for (p, (name, _)) in params.iter().enumerate() {
        if values[p].len() != analytic[p].len() {
            return Err(Error::Shape(format!(
                "parameter `{name}` has {} elements, gradient has {}",
                values[p].len(),
                analytic[p].len()
            )));
        }
        let mut max_rel = 0.0f64;
        let mut max_abs = 0.0f64;
        for i in 0..values[p].len() {
            let orig = values[p][i];
            values[p][i] = orig + cfg.step;
            let up = objective(&values)?;
            values[p][i] = orig - cfg.step;
            let down = objective(&values)?;
            values[p][i] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite(format!("{layer} forward")));
            }
            let numeric = (up - down) / (2.0 * cfg.step);
            let a = analytic[p][i];
            max_abs = max_abs.max((a - numeric).abs());
            max_rel = max_rel.max(cfg.error(a, numeric));
        }
        reports.push(ParamCheck {
            layer: layer.to_string(),
            param: name.to_string(),
            max_rel_err: max_rel,
            max_abs_err: max_abs,
            pass: max_rel <= cfg.rel_tol,
        });
    }
    Ok(reports)
}

/// Geometry and seed of one randomized check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerCase {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub size: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub seed: u64,
}

impl Default for LayerCase {
    fn default() -> Self {
        Self {
            batch: 2,
            c_in: 2,
            c_out: 3,
            size: 5,
            kernel: 3,
            stride: 1,
            padding: 1,
            seed: 0,
        }
    }
}

impl LayerCase {
    /// A small random case; geometry drawn from `rng`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let kernel = [1usize, 2, 3][rng.random_range(0..3)];
        Self {
            batch: rng.random_range(1..=2),
            c_in: rng.random_range(1..=3),
            c_out: rng.random_range(1..=3),
            size: rng.random_range(kernel.max(3)..=6),
            kernel,
            stride: rng.random_range(1..=2),
            padding: rng.random_range(0..=kernel / 2 + 1).min(kernel - 1),
            seed: rng.random(),
        }
    }

    fn input_shape(&self) -> Shape4 {
        Shape4::new(self.batch, self.c_in, self.size, self.size)
    }

    fn weight_shape(&self) -> Shape4 {
        Shape4::new(self.c_out, self.c_in, self.kernel, self.kernel)
    }

    fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

fn normal_f64<R: Rng + ?Sized>(shape: Shape4, rng: &mut R) -> Tensor4<f64> {
    Tensor4::randn(shape, 1.0, rng).cast()
}

/// Values on the grid `0.1·k`, and (for `offset`) shifted by `0.05`, so every
/// input/filter difference is at least `0.05` away from the kink at zero.
fn kink_free<R: Rng + ?Sized>(shape: Shape4, offset: bool, rng: &mut R) -> Tensor4<f64> {
    let shift = if offset { 0.05 } else { 0.0 };
    Tensor4::from_fn(shape, |_, _, _, _| rng.random_range(-15i32..=15) as f64 * 0.1 + shift)
}

fn probe_objective(y: &Tensor4<f64>, probe: &Tensor4<f64>) -> Result<f64> {
    y.dot(probe)
}

fn filter_from(case: &LayerCase, kind: FilterKind, w: Vec<f64>, bias: Option<Vec<f64>>) -> Result<FilterBank<f64>> {
    FilterBank::new(
        kind,
        Tensor4::from_vec(case.weight_shape(), w)?,
        case.stride,
        case.padding,
        bias,
    )
}

/// Conv input, weight and bias gradients against the conv forward.
pub fn check_conv(case: &LayerCase, cfg: &GradCheckConfig) -> Result<Vec<ParamCheck>> {
    let mut rng = case.rng();
    let x = normal_f64(case.input_shape(), &mut rng);
    let w = normal_f64(case.weight_shape(), &mut rng);
    let b = normal_f64(Shape4::new(1, 1, 1, case.c_out), &mut rng).into_vec();
    let f = filter_from(case, FilterKind::Conv, w.data().to_vec(), Some(b.clone()))?;
    let probe = normal_f64(f.output_shape(x.shape())?, &mut rng);
    let g = conv_backward(&x, &f, &probe)?;
    let xs = case.input_shape();
    gradcheck(
        "conv",
        |p| {
            let x = Tensor4::from_vec(xs, p[0].clone())?;
            let f = filter_from(case, FilterKind::Conv, p[1].clone(), Some(p[2].clone()))?;
            probe_objective(&conv_forward(&x, &f)?, &probe)
        },
        &[
            ("input", x.data().to_vec()),
            ("weight", w.data().to_vec()),
            ("bias", b),
        ],
        &[
            g.input.into_vec(),
            g.weight.into_vec(),
            g.bias.unwrap_or_default(),
        ],
        cfg,
    )
}

/// Adder input gradient under `rule` against the true adder forward.
/// Inputs are kept away from the kinks of `|X − F|`.
pub fn check_adder_input(case: &LayerCase, rule: InputRule, cfg: &GradCheckConfig) -> Result<Vec<ParamCheck>> {
    let mut rng = case.rng();
    let x = kink_free(case.input_shape(), true, &mut rng);
    let f = filter_from(case, FilterKind::Adder, kink_free(case.weight_shape(), false, &mut rng).into_vec(), None)?;
    let probe = normal_f64(f.output_shape(x.shape())?, &mut rng);
    let gx = adder_backward_input(&x, &f, &probe, rule)?;
    let xs = case.input_shape();
    gradcheck(
        &format!("adder[{}]", rule.name()),
        |p| {
            let x = Tensor4::from_vec(xs, p[0].clone())?;
            probe_objective(&adder_forward(&x, &f)?, &probe)
        },
        &[("input", x.data().to_vec())],
        &[gx.into_vec()],
        cfg,
    )
}

/// Which forward the adder weight gradient is differentiated against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightTarget {
    /// `−½Σ(X−F)²`: the surrogate is its exact gradient.
    Companion,
    /// The true adder forward: expected to disagree.
    TrueForward,
}

pub fn check_adder_weight(case: &LayerCase, target: WeightTarget, cfg: &GradCheckConfig) -> Result<Vec<ParamCheck>> {
    let mut rng = case.rng();
    let x = kink_free(case.input_shape(), true, &mut rng);
    let w = kink_free(case.weight_shape(), false, &mut rng);
    let f = filter_from(case, FilterKind::Adder, w.data().to_vec(), None)?;
    let probe = normal_f64(f.output_shape(x.shape())?, &mut rng);
    let gw = adder_backward_weight(&x, &f, &probe)?;
    let (layer, param) = match target {
        WeightTarget::Companion => ("adder", "weight"),
        WeightTarget::TrueForward => ("adder", "weight_vs_true_forward"),
    };
    gradcheck(
        layer,
        |p| {
            let f = filter_from(case, FilterKind::Adder, p[0].clone(), None)?;
            let y = match target {
                WeightTarget::Companion => adder_l2_forward(&x, &f)?,
                WeightTarget::TrueForward => adder_forward(&x, &f)?,
            };
            probe_objective(&y, &probe)
        },
        &[(param, w.into_vec())],
        &[gw.into_vec()],
        cfg,
    )
}

/// Training-mode batch norm (batch statistics) input, gamma and beta.
pub fn check_bn(case: &LayerCase, cfg: &GradCheckConfig) -> Result<Vec<ParamCheck>> {
    let mut rng = case.rng();
    let c = case.c_in;
    let shape = case.input_shape();
    let x = normal_f64(shape, &mut rng).map(|v| 2.0 * v + 0.5);
    let mut bn = BatchNormState::<f64>::new(c);
    bn.gamma = (0..c).map(|_| rng.random_range(0.5..1.5)).collect();
    bn.beta = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
    let probe = normal_f64(shape, &mut rng);
    let mut state = bn.clone();
    let (_, cache) = batchnorm_forward_cached(&x, &mut state, true)?;
    let g = bn_backward(&cache, &bn, &probe)?;
    gradcheck(
        "batchnorm",
        |p| {
            let x = Tensor4::from_vec(shape, p[0].clone())?;
            let mut st = bn.clone();
            st.gamma = p[1].clone();
            st.beta = p[2].clone();
            let (y, _) = batchnorm_forward_cached(&x, &mut st, true)?;
            probe_objective(&y, &probe)
        },
        &[
            ("input", x.data().to_vec()),
            ("gamma", bn.gamma.clone()),
            ("beta", bn.beta.clone()),
        ],
        &[g.input.into_vec(), g.gamma, g.beta],
        cfg,
    )
}

pub fn check_relu(case: &LayerCase, cfg: &GradCheckConfig) -> Result<Vec<ParamCheck>> {
    let mut rng = case.rng();
    let shape = case.input_shape();
    let x = kink_free(shape, true, &mut rng);
    let probe = normal_f64(shape, &mut rng);
    let gx = relu_backward(&x, &probe)?;
    gradcheck(
        "relu",
        |p| {
            let x = Tensor4::from_vec(shape, p[0].clone())?;
            probe_objective(&relu(&x), &probe)
        },
        &[("input", x.data().to_vec())],
        &[gx.into_vec()],
        cfg,
    )
}

/// The standard suite: conv, batch norm, ReLU, adder input (sign rule) and
/// adder weight (against the companion forward). With `surrogate_vs_true`
/// the adder weight rule is also checked against the true forward, which is
/// expected to fail.
pub fn standard_suite(
    case: &LayerCase,
    surrogate_vs_true: bool,
    cfg: &GradCheckConfig,
) -> Result<Vec<ParamCheck>> {
    let mut out = Vec::new();
    out.extend(check_conv(case, cfg)?);
    out.extend(check_bn(case, cfg)?);
    out.extend(check_relu(case, cfg)?);
    out.extend(check_adder_input(case, InputRule::Sign, cfg)?);
    out.extend(check_adder_weight(case, WeightTarget::Companion, cfg)?);
    if surrogate_vs_true {
        out.extend(check_adder_weight(case, WeightTarget::TrueForward, cfg)?);
    }
    Ok(out)
}

/// A gradient-check run read from a key=value file: one explicit case plus
/// `random_cases` cases drawn from a generator seeded with `case.seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckPlan {
    pub case: LayerCase,
    pub random_cases: usize,
    pub config: GradCheckConfig,
    /// Also check the adder weight surrogate against the true forward.
    pub surrogate_vs_true: bool,
}

impl Default for GradCheckPlan {
    fn default() -> Self {
        Self {
            case: LayerCase::default(),
            random_cases: 0,
            config: GradCheckConfig::default(),
            surrogate_vs_true: false,
        }
    }
}

impl GradCheckPlan {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let d = Self::default();
        let c = d.case;
        let case = LayerCase {
            batch: kv.take("batch")?.unwrap_or(c.batch),
            c_in: kv.take("c_in")?.unwrap_or(c.c_in),
            c_out: kv.take("c_out")?.unwrap_or(c.c_out),
            size: kv.take("size")?.unwrap_or(c.size),
            kernel: kv.take("kernel")?.unwrap_or(c.kernel),
            stride: kv.take("stride")?.unwrap_or(c.stride),
            padding: kv.take("padding")?.unwrap_or(c.padding),
            seed: kv.take("seed")?.unwrap_or(c.seed),
        };
        let plan = Self {
            case,
            random_cases: kv.take("random_cases")?.unwrap_or(d.random_cases),
            config: GradCheckConfig {
                step: kv.take("step")?.unwrap_or(d.config.step),
                rel_tol: kv.take("rel_tol")?.unwrap_or(d.config.rel_tol),
                abs_floor: kv.take("abs_floor")?.unwrap_or(d.config.abs_floor),
            },
            surrogate_vs_true: kv.take("surrogate_vs_true")?.unwrap_or(d.surrogate_vs_true),
        };
        kv.finish()?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.case;
        if [c.batch, c.c_in, c.c_out, c.size, c.kernel, c.stride].contains(&0) {
            return Err(Error::Config("layer case dimensions must be positive".into()));
        }
        if c.batch * c.c_in * c.size * c.size > 4096 || c.c_out * c.c_in * c.kernel * c.kernel > 4096 {
            return Err(Error::Config("layer case too large for finite differences".into()));
        }
        if self.random_cases > 10_000 {
            return Err(Error::Config("at most 10000 random cases".into()));
        }
        let cfg = &self.config;
        if !(cfg.step > 0.0 && cfg.rel_tol > 0.0 && cfg.abs_floor >= 0.0)
            || ![cfg.step, cfg.rel_tol, cfg.abs_floor].iter().all(|v| v.is_finite())
        {
            return Err(Error::Config("gradcheck tolerances must be finite and positive".into()));
        }
        crate::tensor::ConvGeometry::square(c.kernel, c.stride, c.padding)?.output_size(c.size, c.size)?;
        Ok(())
    }

    /// The explicit case followed by the random ones.
    pub fn cases(&self) -> Vec<LayerCase> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.case.seed);
        std::iter::once(self.case)
            .chain((0..self.random_cases).map(|_| LayerCase::random(&mut rng)))
            .collect()
    }

    /// Runs the standard suite on every case. Reports are labelled with the
    /// case index.
    pub fn run(&self) -> Result<Vec<(usize, ParamCheck)>> {
        let mut out = Vec::new();
        for (i, case) in self.cases().iter().enumerate() {
            for r in standard_suite(case, self.surrogate_vs_true, &self.config)? {
                out.push((i, r));
            }
        }
        Ok(out)
    }
}
