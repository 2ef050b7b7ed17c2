//! Filter → batch norm → ReLU unit with an optional residual skip, cached
//! forward state and accumulated parameter gradients.

use rand::Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::grad::{bn_backward, filter_backward, relu_backward, InputRule};
use crate::layers::{batchnorm_forward_cached, filter_forward, BatchNormState, BnCache, FilterBank, FilterKind};
use crate::tensor::{Shape4, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    AdderWeight,
    ConvWeight,
    DenseWeight,
    Bias,
    BnGamma,
    BnBeta,
}

/// A mutable view of one parameter tensor and its gradient.
#[derive(Debug)]
pub struct ParamMut<'a> {
    pub name: String,
    pub kind: ParamKind,
    pub value: &'a mut [f32],
    pub grad: &'a [f32],
}

#[derive(Debug, Clone)]
pub struct BlockGrads {
    pub weight: Tensor4,
    pub bias: Option<Vec<f32>>,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

#[derive(Debug, Clone)]
struct BlockCache {
    input: Tensor4,
    bn: Option<BnCache>,
    /// Output after the (optional) residual add and ReLU.
    out: Tensor4,
}

#[derive(Debug, Clone)]
pub struct FilterBlock {
    pub filter: FilterBank,
    pub bn: Option<BatchNormState>,
    pub relu: bool,
    /// `y = relu(bn(f(x)) + x)`; needs a shape-preserving filter.
    pub residual: bool,
    pub input_rule: InputRule,
    pub grads: BlockGrads,
    cache: Option<BlockCache>,
}

impl FilterBlock {
    pub fn new(filter: FilterBank, bn: bool, relu: bool) -> Self {
        let c = filter.c_out();
        let grads = BlockGrads {
            weight: Tensor4::zeros(filter.weights().shape()),
            bias: filter.bias.as_ref().map(|b| vec![0.0; b.len()]),
            gamma: vec![0.0; if bn { c } else { 0 }],
            beta: vec![0.0; if bn { c } else { 0 }],
        };
        Self {
            filter,
            bn: bn.then(|| BatchNormState::new(c)),
            relu,
            residual: false,
            input_rule: InputRule::default(),
            grads,
            cache: None,
        }
    }

    /// Convenience constructor with default initialization.
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng + ?Sized>(
        kind: FilterKind,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        bn: bool,
        relu: bool,
        rng: &mut R,
    ) -> Result<Self> {
        // Bias only where no batch norm follows.
        let f = FilterBank::init(kind, c_in, c_out, kernel, stride, kernel / 2, !bn, rng)?;
        Ok(Self::new(f, bn, relu))
    }

    pub fn with_residual(mut self, residual: bool) -> Self {
        self.residual = residual;
        self
    }

    pub fn with_input_rule(mut self, rule: InputRule) -> Self {
        self.input_rule = rule;
        self
    }

    pub fn kind(&self) -> FilterKind {
        self.filter.kind()
    }

    /// Runs the block. With `training` set, batch norm uses batch statistics
    /// (unless frozen) and the state needed by [`FilterBlock::backward`] is kept.
    pub fn forward(&mut self, x: &Tensor4, training: bool) -> Result<Tensor4> {
        let mut y = filter_forward(x, &self.filter)?;
        let mut bn_cache = None;
        if let Some(bn) = self.bn.as_mut() {
            let (z, c) = batchnorm_forward_cached(&y, bn, training)?;
            y = z;
            bn_cache = Some(c);
        }
        if self.residual {
            if y.shape() != x.shape() {
                return Err(Error::Shape(format!(
                    "residual skip needs matching shapes, filter maps {} to {}",
                    x.shape(),
                    y.shape()
                )));
            }
            y.add_assign(x)?;
        }
        if self.relu {
            y = crate::layers::relu(&y);
        }
        self.cache = training.then(|| BlockCache {
            input: x.clone(),
            bn: bn_cache,
            out: y.clone(),
        });
        Ok(y)
    }

    /// Backpropagates `gy` through the last training-mode forward,
    /// accumulating parameter gradients. Returns the input gradient.
    pub fn backward(&mut self, gy: &Tensor4) -> Result<Tensor4> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::Config("backward called without a training forward".into()))?;
        let mut g = if self.relu {
            relu_backward(&cache.out, gy)?
        } else {
            gy.clone()
        };
        let skip = self.residual.then(|| g.clone());
        if let (Some(bn), Some(bc)) = (self.bn.as_ref(), cache.bn.as_ref()) {
            let bg = bn_backward(bc, bn, &g)?;
            for (a, b) in self.grads.gamma.iter_mut().zip(&bg.gamma) {
                *a += b;
            }
            for (a, b) in self.grads.beta.iter_mut().zip(&bg.beta) {
                *a += b;
            }
            g = bg.input;
        }
        let fg = filter_backward(&cache.input, &self.filter, &g, self.input_rule)?;
        self.grads.weight.add_assign(&fg.weight)?;
        if let (Some(acc), Some(b)) = (self.grads.bias.as_mut(), fg.bias.as_ref()) {
            for (a, v) in acc.iter_mut().zip(b) {
                *a += v;
            }
        }
        let mut gx = fg.input;
        if let Some(s) = skip {
            gx.add_assign(&s)?;
        }
        Ok(gx)
    }

    pub fn zero_grad(&mut self) {
        self.grads.weight.data_mut().fill(0.0);
        if let Some(b) = self.grads.bias.as_mut() {
            b.fill(0.0);
        }
        self.grads.gamma.fill(0.0);
        self.grads.beta.fill(0.0);
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_>)) {
        let kind = match self.filter.kind() {
            FilterKind::Adder => ParamKind::AdderWeight,
            FilterKind::Conv => ParamKind::ConvWeight,
        };
        f(ParamMut {
            name: format!("{prefix}.weight"),
            kind,
            value: self.filter.weights_mut(),
            grad: self.grads.weight.data(),
        });
        if let (Some(b), Some(gb)) = (self.filter.bias.as_mut(), self.grads.bias.as_ref()) {
            f(ParamMut {
                name: format!("{prefix}.bias"),
                kind: ParamKind::Bias,
                value: b,
                grad: gb,
            });
        }
        if let Some(bn) = self.bn.as_mut() {
            f(ParamMut {
                name: format!("{prefix}.bn.gamma"),
                kind: ParamKind::BnGamma,
                value: &mut bn.gamma,
                grad: &self.grads.gamma,
            });
            f(ParamMut {
                name: format!("{prefix}.bn.beta"),
                kind: ParamKind::BnBeta,
                value: &mut bn.beta,
                grad: &self.grads.beta,
            });
        }
    }

    pub fn save(&self, prefix: &str, ckpt: &mut Checkpoint) -> Result<()> {
        ckpt.insert(format!("{prefix}.weight"), self.filter.weights().clone())?;
        if let Some(b) = &self.filter.bias {
            ckpt.insert(format!("{prefix}.bias"), vector(b))?;
        }
        if let Some(bn) = &self.bn {
            ckpt.insert(format!("{prefix}.bn.gamma"), vector(&bn.gamma))?;
            ckpt.insert(format!("{prefix}.bn.beta"), vector(&bn.beta))?;
            ckpt.insert(format!("{prefix}.bn.running_mean"), vector(&bn.running_mean))?;
            ckpt.insert(format!("{prefix}.bn.running_var"), vector(&bn.running_var))?;
        }
        Ok(())
    }

    /// Loads parameters saved by [`FilterBlock::save`]; shapes must match.
    pub fn load(&mut self, prefix: &str, ckpt: &Checkpoint) -> Result<()> {
        let w = ckpt.require(&format!("{prefix}.weight"))?;
        if w.shape() != self.filter.weights().shape() {
            return Err(Error::Shape(format!(
                "`{prefix}.weight` is {}, expected {}",
                w.shape(),
                self.filter.weights().shape()
            )));
        }
        self.filter.weights_mut().copy_from_slice(w.data());
        if let Some(b) = self.filter.bias.as_mut() {
            copy_vec(ckpt, &format!("{prefix}.bias"), b)?;
        }
        if let Some(bn) = self.bn.as_mut() {
            copy_vec(ckpt, &format!("{prefix}.bn.gamma"), &mut bn.gamma)?;
            copy_vec(ckpt, &format!("{prefix}.bn.beta"), &mut bn.beta)?;
            copy_vec(ckpt, &format!("{prefix}.bn.running_mean"), &mut bn.running_mean)?;
            copy_vec(ckpt, &format!("{prefix}.bn.running_var"), &mut bn.running_var)?;
        }
        Ok(())
    }
}

fn vector(v: &[f32]) -> Tensor4 {
    Tensor4::from_vec(Shape4::new(1, v.len(), 1, 1), v.to_vec()).expect("length matches")
}

fn copy_vec(ckpt: &Checkpoint, name: &str, dst: &mut [f32]) -> Result<()> {
    let t = ckpt.require(name)?;
    if t.len() != dst.len() {
        return Err(Error::Shape(format!(
            "`{name}` has {} entries, expected {}",
            t.len(),
            dst.len()
        )));
    }
    dst.copy_from_slice(t.data());
    Ok(())
}
