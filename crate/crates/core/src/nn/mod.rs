//! Minimal feed-forward neural-network kernel: explicit forward and backward
//! passes over a stack of layer specs, plain SGD, and gradient verification.
//!
//! Everything is double precision and pure: the kernel holds no shared
//! mutable state, so it is safe to call from parallel workers.

mod backward;
mod forward;
mod gradcheck;
mod loss;

pub use backward::{backward, backward_from_labels};
pub use forward::{forward, Cache};
pub use gradcheck::grad_check;
pub use loss::{softmax_xent, top1_accuracy};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

/// One layer of a feed-forward stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    Dense {
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    },
    Conv2D {
        kh: usize,
        kw: usize,
        in_ch: usize,
        out_ch: usize,
        padding: Padding,
        stride: usize,
        bias: bool,
    },
    MaxPool2D {
        k: usize,
        stride: usize,
    },
    ReLU,
    Flatten,
    Dropout {
        rate: f64,
    },
    /// Parameter-free local response normalization across channels:
    /// `y_c = x_c / (bias + alpha * sum_{|c'-c| <= r} x_{c'}^2)^beta`.
    LocalResponseNorm {
        depth_radius: usize,
        alpha: f64,
        beta: f64,
        bias: f64,
    },
}

/// Default LRN constants (the classic AlexNet-style values).
pub fn lrn_default() -> LayerSpec {
    LayerSpec::LocalResponseNorm {
        depth_radius: 4,
        alpha: 0.001 / 9.0,
        beta: 0.75,
        bias: 1.0,
    }
}

impl LayerSpec {
    fn validate(&self, idx: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Config { layer: idx, msg });
        match *self {
            LayerSpec::Dense { in_dim, out_dim, .. } => {
                if in_dim == 0 || out_dim == 0 {
                    return bad("dense dims must be positive".into());
                }
            }
            LayerSpec::Conv2D { kh, kw, in_ch, out_ch, stride, .. } => {
                if kh == 0 || kw == 0 || in_ch == 0 || out_ch == 0 {
                    return bad("conv dims must be positive".into());
                }
                if stride == 0 {
                    return bad("conv stride must be >= 1".into());
                }
            }
            LayerSpec::MaxPool2D { k, stride } => {
                if k == 0 || stride == 0 {
                    return bad("pool kernel and stride must be >= 1".into());
                }
            }
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return bad(format!("dropout rate {rate} outside [0,1)"));
                }
            }
            LayerSpec::LocalResponseNorm { alpha, beta, bias, .. } => {
                if alpha < 0.0 || beta <= 0.0 || bias <= 0.0 {
                    return bad("LRN constants must be positive".into());
                }
            }
            LayerSpec::ReLU | LayerSpec::Flatten => {}
        }
        Ok(())
    }

    /// Per-sample output shape given the per-sample input shape.
    pub fn output_shape(&self, idx: usize, input: &[usize]) -> Result<Vec<usize>> {
        self.validate(idx)?;
        let bad = |msg: String| Err(Error::Config { layer: idx, msg });
        match *self {
            LayerSpec::Dense { in_dim, out_dim, .. } => {
                if input != [in_dim] {
                    return bad(format!("dense expects [{in_dim}], got {input:?}"));
                }
                Ok(vec![out_dim])
            }
            LayerSpec::Conv2D { kh, kw, in_ch, out_ch, padding, stride, .. } => {
                let [c, h, w] = chw(input)
                    .ok_or_else(|| Error::Config { layer: idx, msg: format!("conv expects [C,H,W], got {input:?}") })?;
                if c != in_ch {
                    return bad(format!("conv expects {in_ch} channels, got {c}"));
                }
                let (oh, ow) = match padding {
                    Padding::Same => (div_ceil(h, stride), div_ceil(w, stride)),
                    Padding::Valid => {
                        if h < kh || w < kw {
                            return bad(format!("valid conv kernel {kh}x{kw} larger than input {h}x{w}"));
                        }
                        ((h - kh) / stride + 1, (w - kw) / stride + 1)
                    }
                };
                Ok(vec![out_ch, oh, ow])
            }
            LayerSpec::MaxPool2D { k, stride } => {
                let [c, h, w] = chw(input)
                    .ok_or_else(|| Error::Config { layer: idx, msg: format!("pool expects [C,H,W], got {input:?}") })?;
                if h < k || w < k {
                    return bad(format!("pool window {k} larger than input {h}x{w}"));
                }
                Ok(vec![c, (h - k) / stride + 1, (w - k) / stride + 1])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::ReLU | LayerSpec::Dropout { .. } => Ok(input.to_vec()),
            LayerSpec::LocalResponseNorm { .. } => {
                chw(input).ok_or_else(|| Error::Config {
                    layer: idx,
                    msg: format!("LRN expects [C,H,W], got {input:?}"),
                })?;
                Ok(input.to_vec())
            }
        }
    }

    /// Scalar parameter count: Dense = in*out(+out), Conv = kh*kw*cin*cout(+cout),
    /// everything else 0.
    pub fn param_count(&self) -> usize {
        match *self {
            LayerSpec::Dense { in_dim, out_dim, bias } => in_dim * out_dim + if bias { out_dim } else { 0 },
            LayerSpec::Conv2D { kh, kw, in_ch, out_ch, bias, .. } => {
                kh * kw * in_ch * out_ch + if bias { out_ch } else { 0 }
            }
            _ => 0,
        }
    }
}

fn chw(shape: &[usize]) -> Option<[usize; 3]> {
    match shape {
        [c, h, w] => Some([*c, *h, *w]),
        _ => None,
    }
}

pub(crate) fn div_ceil(a: usize, b: usize) -> usize {
    (a + b - 1) / b
}

/// Shape-checks a stack end to end, returning the per-sample output shape.
pub fn shape_check(stack: &[LayerSpec], input: &[usize]) -> Result<Vec<usize>> {
    let mut shape = input.to_vec();
    for (idx, layer) in stack.iter().enumerate() {
        shape = layer.output_shape(idx, &shape)?;
    }
    Ok(shape)
}

/// Exact scalar parameter count of a stack.
pub fn param_count(stack: &[LayerSpec]) -> usize {
    stack.iter().map(LayerSpec::param_count).sum()
}

/// Per-layer parameter tensors (weights, optional biases), in stack order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

impl LayerParams {
    fn empty() -> Self {
        LayerParams { weight: None, bias: None }
    }

    fn scalar_count(&self) -> usize {
        self.weight.as_ref().map_or(0, Tensor::scalar_count)
            + self.bias.as_ref().map_or(0, Tensor::scalar_count)
    }
}

macro_rules! tensor_set {
    ($name:ident) => {
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        pub struct $name {
            pub layers: Vec<LayerParams>,
        }

        impl $name {
            pub fn scalar_count(&self) -> usize {
                self.layers.iter().map(LayerParams::scalar_count).sum()
            }

            pub fn to_flat(&self) -> Vec<f64> {
                let mut out = Vec::with_capacity(self.scalar_count());
                for lp in &self.layers {
                    if let Some(w) = &lp.weight {
                        out.extend_from_slice(w.data());
                    }
                    if let Some(b) = &lp.bias {
                        out.extend_from_slice(b.data());
                    }
                }
                out
            }

            /// Inverse of `to_flat`; shapes must already be congruent.
            pub fn load_flat(&mut self, vals: &[f64]) -> crate::error::Result<()> {
                if vals.len() != self.scalar_count() {
                    return Err(crate::error::Error::Data(format!(
                        "flat parameter length {} does not match {}",
                        vals.len(),
                        self.scalar_count()
                    )));
                }
                let mut at = 0;
                for lp in &mut self.layers {
                    for t in [lp.weight.as_mut(), lp.bias.as_mut()].into_iter().flatten() {
                        let n = t.scalar_count();
                        t.data_mut().copy_from_slice(&vals[at..at + n]);
                        at += n;
                    }
                }
                Ok(())
            }

            /// Applies `f` pairwise over this set and `other`, in place.
            pub fn zip_apply(&mut self, other: &$name, f: impl Fn(&mut f64, f64) + Copy) {
                assert_eq!(self.layers.len(), other.layers.len(), "incongruent sets");
                for (a, b) in self.layers.iter_mut().zip(&other.layers) {
                    for (ta, tb) in [(&mut a.weight, &b.weight), (&mut a.bias, &b.bias)] {
                        match (ta, tb) {
                            (Some(x), Some(y)) => {
                                assert_eq!(x.shape(), y.shape(), "incongruent tensor shapes");
                                for (u, v) in x.data_mut().iter_mut().zip(y.data()) {
                                    f(u, *v);
                                }
                            }
                            (None, None) => {}
                            _ => panic!("incongruent sets"),
                        }
                    }
                }
            }

            pub fn for_each_mut(&mut self, f: impl Fn(&mut f64) + Copy) {
                for lp in &mut self.layers {
                    for t in [&mut lp.weight, &mut lp.bias].into_iter().flatten() {
                        t.data_mut().iter_mut().for_each(f);
                    }
                }
            }

            pub fn sq_norm(&self) -> f64 {
                self.layers
                    .iter()
                    .map(|lp| {
                        lp.weight.as_ref().map_or(0.0, Tensor::sq_norm)
                            + lp.bias.as_ref().map_or(0.0, Tensor::sq_norm)
                    })
                    .sum()
            }

            pub fn is_finite(&self) -> bool {
                self.layers.iter().all(|lp| {
                    lp.weight.as_ref().map_or(true, Tensor::is_finite)
                        && lp.bias.as_ref().map_or(true, Tensor::is_finite)
                })
            }
        }
    };
}

tensor_set!(ParamSet);
tensor_set!(GradSet);

impl ParamSet {
    /// Max absolute elementwise distance to another congruent set.
    pub fn max_abs_diff(&self, other: &ParamSet) -> f64 {
        let a = self.to_flat();
        let b = other.to_flat();
        assert_eq!(a.len(), b.len());
        a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    /// Uniform elementwise mean of congruent parameter sets.
    pub fn mean(sets: &[&ParamSet]) -> ParamSet {
        Self::weighted_mean(sets, &vec![1.0 / sets.len() as f64; sets.len()])
    }

    pub fn weighted_mean(sets: &[&ParamSet], weights: &[f64]) -> ParamSet {
        assert!(!sets.is_empty());
        assert_eq!(sets.len(), weights.len());
        let mut acc = sets[0].clone();
        acc.for_each_mut(|v| *v *= weights[0]);
        for (s, &w) in sets.iter().zip(weights).skip(1) {
            acc.zip_apply(s, move |a, b| *a += w * b);
        }
        acc
    }
}

impl GradSet {
    pub fn zeros_like(params: &ParamSet) -> GradSet {
        GradSet {
            layers: params
                .layers
                .iter()
                .map(|lp| LayerParams {
                    weight: lp.weight.as_ref().map(|t| Tensor::zeros(t.shape().to_vec())),
                    bias: lp.bias.as_ref().map(|t| Tensor::zeros(t.shape().to_vec())),
                })
                .collect(),
        }
    }

    /// Accumulates another congruent gradient set into this one.
    pub fn add(&mut self, other: &GradSet) {
        self.zip_apply(other, |a, b| *a += b);
    }

    pub fn scale(&mut self, s: f64) {
        self.for_each_mut(move |v| *v *= s);
    }

    /// Global-norm clipping: rescales so the global L2 norm is at most
    /// `threshold`. Returns the scale that was applied.
    pub fn clip_global_norm(&mut self, threshold: f64) -> f64 {
        let norm = self.sq_norm().sqrt();
        if norm > threshold && norm > 0.0 {
            let s = threshold / norm;
            self.scale(s);
            s
        } else {
            1.0
        }
    }
}

/// Fan-in-scaled uniform initialization, seeded; layer `i` draws from an
/// independent stream so inserting parameter-free layers does not shift
/// other layers' weights.
pub fn init_params(stack: &[LayerSpec], seed: u64) -> ParamSet {
    let layers = stack
        .iter()
        .enumerate()
        .map(|(idx, layer)| {
            let mut rng = ChaCha20Rng::seed_from_u64(seed ^ ((idx as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
            match *layer {
                LayerSpec::Dense { in_dim, out_dim, bias } => {
                    let bound = 1.0 / (in_dim as f64).sqrt();
                    let w: Vec<f64> = (0..in_dim * out_dim).map(|_| rng.gen_range(-bound..bound)).collect();
                    LayerParams {
                        weight: Some(Tensor::new(vec![in_dim, out_dim], w)),
                        bias: bias.then(|| Tensor::zeros(vec![out_dim])),
                    }
                }
                LayerSpec::Conv2D { kh, kw, in_ch, out_ch, bias, .. } => {
                    let fan_in = (kh * kw * in_ch) as f64;
                    let bound = 1.0 / fan_in.sqrt();
                    let w: Vec<f64> = (0..out_ch * in_ch * kh * kw).map(|_| rng.gen_range(-bound..bound)).collect();
                    LayerParams {
                        weight: Some(Tensor::new(vec![out_ch, in_ch, kh, kw], w)),
                        bias: bias.then(|| Tensor::zeros(vec![out_ch])),
                    }
                }
                _ => LayerParams::empty(),
            }
        })
        .collect();
    ParamSet { layers }
}

/// One plain SGD step: `p <- p - lr * g`, in place.
pub fn sgd_step(params: &mut ParamSet, grads: &GradSet, lr: f64) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradients contain NaN/Inf".into()));
    }
    params.zip_apply(
        // same layout; GradSet and ParamSet share layer structure
        &ParamSet { layers: grads.layers.clone() },
        move |p, g| *p -= lr * g,
    );
    Ok(())
}

/// Learning-rate schedule: step decay or diminishing 1/(1+t).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrMode {
    StepDecay,
    Diminishing,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub eta0: f64,
    pub decay_rate: f64,
    pub decay_every: usize,
    pub mode: LrMode,
}

impl LrSchedule {
    pub fn constant(eta0: f64) -> Self {
        LrSchedule { eta0, decay_rate: 1.0, decay_every: 1, mode: LrMode::StepDecay }
    }

    pub fn step_decay(eta0: f64, decay_rate: f64, decay_every: usize) -> Self {
        LrSchedule { eta0, decay_rate, decay_every, mode: LrMode::StepDecay }
    }

    pub fn lr(&self, round: usize) -> f64 {
        match self.mode {
            LrMode::StepDecay => self.eta0 * self.decay_rate.powi((round / self.decay_every) as i32),
            LrMode::Diminishing => self.eta0 / (1.0 + round as f64),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_param_count_formula() {
        assert_eq!(param_count(&[LayerSpec::Dense { in_dim: 2, out_dim: 3, bias: true }]), 9);
        assert_eq!(param_count(&[LayerSpec::Dense { in_dim: 2, out_dim: 3, bias: false }]), 6);
    }

    #[test]
    fn lrn_contributes_zero_params() {
        assert_eq!(lrn_default().param_count(), 0);
    }

    #[test]
    fn shape_check_rejects_mismatched_dense() {
        let stack = [
            LayerSpec::Dense { in_dim: 4, out_dim: 3, bias: true },
            LayerSpec::Dense { in_dim: 5, out_dim: 2, bias: true },
        ];
        let err = shape_check(&stack, &[4]).unwrap_err();
        match err {
            Error::Config { layer, .. } => assert_eq!(layer, 1),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn same_padding_conv_shapes() {
        let stack = [LayerSpec::Conv2D {
            kh: 5,
            kw: 5,
            in_ch: 3,
            out_ch: 64,
            padding: Padding::Same,
            stride: 1,
            bias: true,
        }];
        assert_eq!(shape_check(&stack, &[3, 24, 24]).unwrap(), vec![64, 24, 24]);
    }

    #[test]
    fn step_decay_schedule() {
        let s = LrSchedule::step_decay(0.15, 0.99, 10);
        assert!((s.lr(0) - 0.15).abs() < 1e-15);
        assert!((s.lr(9) - 0.15).abs() < 1e-15);
        assert!((s.lr(10) - 0.15 * 0.99).abs() < 1e-15);
        assert!((s.lr(25) - 0.15 * 0.99 * 0.99).abs() < 1e-15);
    }

    #[test]
    fn diminishing_schedule() {
        let s = LrSchedule { eta0: 1.0, decay_rate: 1.0, decay_every: 1, mode: LrMode::Diminishing };
        assert!((s.lr(0) - 1.0).abs() < 1e-15);
        assert!((s.lr(3) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn sgd_step_arithmetic() {
        let stack = [LayerSpec::Dense { in_dim: 1, out_dim: 2, bias: false }];
        let mut p = init_params(&stack, 0);
        p.layers[0].weight = Some(Tensor::new(vec![1, 2], vec![1.0, 2.0]));
        let mut g = GradSet::zeros_like(&p);
        g.layers[0].weight = Some(Tensor::new(vec![1, 2], vec![1.0, 1.0]));
        sgd_step(&mut p, &g, 0.1).unwrap();
        let w = p.layers[0].weight.as_ref().unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-15 && (w[1] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn sgd_rejects_non_finite_grads() {
        let stack = [LayerSpec::Dense { in_dim: 1, out_dim: 1, bias: false }];
        let mut p = init_params(&stack, 0);
        let mut g = GradSet::zeros_like(&p);
        g.layers[0].weight = Some(Tensor::new(vec![1, 1], vec![f64::NAN]));
        assert!(sgd_step(&mut p, &g, 0.1).is_err());
    }

    #[test]
    fn sgd_is_affine_in_grads() {
        // step(p, g1+g2) == step(step(p, g1), g2) for same-point gradients
        let stack = [LayerSpec::Dense { in_dim: 3, out_dim: 2, bias: true }];
        let p0 = init_params(&stack, 7);
        let mut g1 = GradSet::zeros_like(&p0);
        let mut g2 = GradSet::zeros_like(&p0);
        g1.layers[0].weight = Some(Tensor::new(vec![3, 2], (0..6).map(|v| v as f64 * 0.3).collect()));
        g2.layers[0].weight = Some(Tensor::new(vec![3, 2], (0..6).map(|v| 1.0 - v as f64 * 0.1).collect()));
        let mut sum = g1.clone();
        sum.add(&g2);

        let mut a = p0.clone();
        sgd_step(&mut a, &sum, 0.05).unwrap();
        let mut b = p0.clone();
        sgd_step(&mut b, &g1, 0.05).unwrap();
        sgd_step(&mut b, &g2, 0.05).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn clip_rescales_by_norm_ratio() {
        let stack = [LayerSpec::Dense { in_dim: 1, out_dim: 2, bias: false }];
        let p = init_params(&stack, 0);
        let mut g = GradSet::zeros_like(&p);
        g.layers[0].weight = Some(Tensor::new(vec![1, 2], vec![6.0, 8.0])); // norm 10
        let s = g.clip_global_norm(1.0);
        assert!((s - 0.1).abs() < 1e-15);
        let w = g.layers[0].weight.as_ref().unwrap().data();
        assert!((w[0] - 0.6).abs() < 1e-15 && (w[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn clip_noop_below_threshold() {
        let stack = [LayerSpec::Dense { in_dim: 1, out_dim: 1, bias: false }];
        let p = init_params(&stack, 0);
        let mut g = GradSet::zeros_like(&p);
        g.layers[0].weight = Some(Tensor::new(vec![1, 1], vec![0.5]));
        assert_eq!(g.clip_global_norm(1.0), 1.0);
    }
}
