//! Forward pass over a layer stack, caching what backward needs.

use super::{div_ceil, LayerSpec, Padding, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Per-layer activations and masks recorded during a forward pass.
#[derive(Debug, Clone)]
pub struct Cache {
    pub(super) entries: Vec<CacheEntry>,
    pub(super) input_shape: Vec<usize>,
    pub(super) output_shape: Vec<usize>,
}

#[derive(Debug, Clone)]
pub(super) enum CacheEntry {
    Dense { input: Tensor },
    Conv { input: Tensor },
    Pool { input_shape: Vec<usize>, argmax: Vec<usize> },
    Relu { active: Vec<bool> },
    Flatten { input_shape: Vec<usize> },
    Dropout { mask: Vec<f64> },
    Lrn { input: Tensor },
}

/// Runs the stack on a batched input (leading dim = batch). Dropout is only
/// active when `train_mode`; with it off the pass is deterministic and
/// independent of `rng_seed`.
pub fn forward(
    stack: &[LayerSpec],
    params: &ParamSet,
    input: &Tensor,
    train_mode: bool,
    rng_seed: u64,
) -> Result<(Cache, Tensor)> {
    if params.layers.len() != stack.len() {
        return Err(Error::Internal(format!(
            "param set has {} layers, stack has {}",
            params.layers.len(),
            stack.len()
        )));
    }
    let input_shape = input.shape().to_vec();
    let mut x = input.clone();
    let mut entries = Vec::with_capacity(stack.len());
    for (idx, layer) in stack.iter().enumerate() {
        // validate the per-sample shape before running the layer
        layer.output_shape(idx, &x.shape()[1..])?;
        let (entry, out) = forward_layer(layer, &params.layers[idx], &x, train_mode, rng_seed, idx)?;
        out.check_finite(&format!("output of layer {idx}"))?;
        entries.push(entry);
        x = out;
    }
    let output_shape = x.shape().to_vec();
    Ok((Cache { entries, input_shape, output_shape }, x))
}

fn forward_layer(
    layer: &LayerSpec,
    lp: &super::LayerParams,
    x: &Tensor,
    train_mode: bool,
    rng_seed: u64,
    idx: usize,
) -> Result<(CacheEntry, Tensor)> {
    match *layer {
        LayerSpec::Dense { in_dim, out_dim, bias } => {
            let b = x.shape()[0];
            let w = lp.weight.as_ref().expect("dense weight");
            let mut out = vec![0.0; b * out_dim];
            for s in 0..b {
                let xs = &x.data()[s * in_dim..(s + 1) * in_dim];
                let os = &mut out[s * out_dim..(s + 1) * out_dim];
                for (i, &xi) in xs.iter().enumerate() {
                    let wr = &w.data()[i * out_dim..(i + 1) * out_dim];
                    for (o, &wv) in os.iter_mut().zip(wr) {
                        *o += xi * wv;
                    }
                }
                if bias {
                    let bv = lp.bias.as_ref().expect("dense bias");
                    for (o, &bb) in os.iter_mut().zip(bv.data()) {
                        *o += bb;
                    }
                }
            }
            Ok((CacheEntry::Dense { input: x.clone() }, Tensor::new(vec![b, out_dim], out)))
        }
        LayerSpec::Conv2D { kh, kw, in_ch, out_ch, padding, stride, bias } => {
            let out = conv2d_forward(x, lp, kh, kw, in_ch, out_ch, padding, stride, bias);
            Ok((CacheEntry::Conv { input: x.clone() }, out))
        }
        LayerSpec::MaxPool2D { k, stride } => {
            let (out, argmax) = maxpool_forward(x, k, stride);
            Ok((CacheEntry::Pool { input_shape: x.shape().to_vec(), argmax }, out))
        }
        LayerSpec::ReLU => {
            let active: Vec<bool> = x.data().iter().map(|&v| v > 0.0).collect();
            let data = x.data().iter().map(|&v| v.max(0.0)).collect();
            Ok((CacheEntry::Relu { active }, Tensor::new(x.shape().to_vec(), data)))
        }
        LayerSpec::Flatten => {
            let b = x.shape()[0];
            let rest: usize = x.shape()[1..].iter().product();
            let out = x.clone().reshape(vec![b, rest]);
            Ok((CacheEntry::Flatten { input_shape: x.shape().to_vec() }, out))
        }
        LayerSpec::Dropout { rate } => {
            if !train_mode || rate == 0.0 {
                Ok((CacheEntry::Dropout { mask: vec![1.0; x.scalar_count()] }, x.clone()))
            } else {
                // mask depends only on (rng_seed, layer index) so a repeated
                // forward with the same seed reproduces the same pass
                let mut rng =
                    ChaCha20Rng::seed_from_u64(rng_seed ^ ((idx as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03)));
                let keep = 1.0 - rate;
                let mask: Vec<f64> = (0..x.scalar_count())
                    .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
                Ok((CacheEntry::Dropout { mask }, Tensor::new(x.shape().to_vec(), data)))
            }
        }
        LayerSpec::LocalResponseNorm { depth_radius, alpha, beta, bias } => {
            let out = lrn_forward(x, depth_radius, alpha, beta, bias);
            Ok((CacheEntry::Lrn { input: x.clone() }, out))
        }
    }
}

pub(super) fn same_pad(in_len: usize, k: usize, stride: usize) -> (usize, usize) {
    let out = div_ceil(in_len, stride);
    let total = ((out - 1) * stride + k).saturating_sub(in_len);
    (total / 2, out)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    x: &Tensor,
    lp: &super::LayerParams,
    kh: usize,
    kw: usize,
    in_ch: usize,
    out_ch: usize,
    padding: Padding,
    stride: usize,
    bias: bool,
) -> Tensor {
    let (b, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
    let ((pad_h, oh), (pad_w, ow)) = match padding {
        Padding::Same => (same_pad(h, kh, stride), same_pad(w, kw, stride)),
        Padding::Valid => ((0, (h - kh) / stride + 1), (0, (w - kw) / stride + 1)),
    };
    let wt = lp.weight.as_ref().expect("conv weight");
    let mut out = vec![0.0; b * out_ch * oh * ow];
    for s in 0..b {
        for oc in 0..out_ch {
            let base_b = if bias { lp.bias.as_ref().expect("conv bias").data()[oc] } else { 0.0 };
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = base_b;
                    for ic in 0..in_ch {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad_h as isize;
                            if iy < 0 || iy as usize >= h {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad_w as isize;
                                if ix < 0 || ix as usize >= w {
                                    continue;
                                }
                                let xv = x.data()
                                    [((s * in_ch + ic) * h + iy as usize) * w + ix as usize];
                                let wv = wt.data()[((oc * in_ch + ic) * kh + ky) * kw + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((s * out_ch + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![b, out_ch, oh, ow], out)
}

fn maxpool_forward(x: &Tensor, k: usize, stride: usize) -> (Tensor, Vec<usize>) {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut out = vec![0.0; b * c * oh * ow];
    let mut argmax = vec![0usize; out.len()];
    for s in 0..b {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for ky in 0..k {
                        for kx in 0..k {
                            let idx = ((s * c + ch) * h + oy * stride + ky) * w + ox * stride + kx;
                            if x.data()[idx] > best {
                                best = x.data()[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = ((s * c + ch) * oh + oy) * ow + ox;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
    }
    (Tensor::new(vec![b, c, oh, ow], out), argmax)
}

fn lrn_forward(x: &Tensor, radius: usize, alpha: f64, beta: f64, bias: f64) -> Tensor {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut out = vec![0.0; x.scalar_count()];
    let plane = h * w;
    for s in 0..b {
        for ch in 0..c {
            let lo = ch.saturating_sub(radius);
            let hi = (ch + radius).min(c - 1);
            for p in 0..plane {
                let mut sq = 0.0;
                for cc in lo..=hi {
                    let v = x.data()[(s * c + cc) * plane + p];
                    sq += v * v;
                }
                let denom = (bias + alpha * sq).powf(beta);
                let i = (s * c + ch) * plane + p;
                out[i] = x.data()[i] / denom;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, LayerSpec};

    #[test]
    fn dense_identity_passes_input_through() {
        let stack = [LayerSpec::Dense { in_dim: 2, out_dim: 2, bias: true }];
        let mut p = init_params(&stack, 0);
        p.layers[0].weight = Some(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        p.layers[0].bias = Some(Tensor::zeros(vec![2]));
        let x = Tensor::new(vec![1, 2], vec![3.0, -1.0]);
        let (_, y) = forward(&stack, &p, &x, false, 0).unwrap();
        assert_eq!(y.data(), &[3.0, -1.0]);
    }

    #[test]
    fn relu_clamps_negatives() {
        let stack = [LayerSpec::ReLU];
        let p = init_params(&stack, 0);
        let x = Tensor::new(vec![1, 3], vec![-1.0, 0.0, 2.0]);
        let (_, y) = forward(&stack, &p, &x, false, 0).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn maxpool_window_maxima() {
        // brute-force oracle: max over each 2x2 window of 1..16
        let stack = [LayerSpec::MaxPool2D { k: 2, stride: 2 }];
        let p = init_params(&stack, 0);
        let x = Tensor::new(vec![1, 1, 4, 4], (1..=16).map(|v| v as f64).collect());
        let (_, y) = forward(&stack, &p, &x, false, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[6.0, 8.0, 14.0, 16.0]);
    }

    #[test]
    fn eval_mode_ignores_rng_seed() {
        let stack = [
            LayerSpec::Dense { in_dim: 3, out_dim: 4, bias: true },
            LayerSpec::Dropout { rate: 0.5 },
        ];
        let p = init_params(&stack, 1);
        let x = Tensor::new(vec![2, 3], vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6]);
        let (_, a) = forward(&stack, &p, &x, false, 11).unwrap();
        let (_, b) = forward(&stack, &p, &x, false, 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn train_mode_dropout_is_seed_deterministic() {
        let stack = [LayerSpec::Dropout { rate: 0.5 }];
        let p = init_params(&stack, 0);
        let x = Tensor::new(vec![1, 8], vec![1.0; 8]);
        let (_, a) = forward(&stack, &p, &x, true, 42).unwrap();
        let (_, b) = forward(&stack, &p, &x, true, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_mismatch_names_layer() {
        let stack = [LayerSpec::Dense { in_dim: 3, out_dim: 2, bias: false }];
        let p = init_params(&stack, 0);
        let x = Tensor::new(vec![1, 4], vec![0.0; 4]);
        match forward(&stack, &p, &x, false, 0) {
            Err(crate::error::Error::Config { layer, .. }) => assert_eq!(layer, 0),
            other => panic!("expected config error, got {other:?}"),
        }
    }
}
