//! Backpropagation through a cached forward pass.

use super::forward::{same_pad, Cache, CacheEntry};
use super::loss::softmax_xent;
use super::{GradSet, LayerParams, LayerSpec, Padding, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Backpropagates `upstream` (a gradient w.r.t. the stack output) through a
/// cache produced by a matching `forward` call. Returns parameter gradients
/// and the gradient w.r.t. the stack input.
pub fn backward(
    stack: &[LayerSpec],
    params: &ParamSet,
    cache: &Cache,
    upstream: &Tensor,
) -> Result<(GradSet, Tensor)> {
    if cache.entries.len() != stack.len() {
        return Err(Error::Internal("cache does not match stack".into()));
    }
    if upstream.shape() != cache.output_shape {
        return Err(Error::Internal(format!(
            "upstream shape {:?} does not match cached output {:?}",
            upstream.shape(),
            cache.output_shape
        )));
    }
    let mut grads = GradSet::zeros_like(params);
    let mut g = upstream.clone();
    for idx in (0..stack.len()).rev() {
        g = backward_layer(&stack[idx], &params.layers[idx], &cache.entries[idx], &g, &mut grads.layers[idx])?;
    }
    if g.shape() != cache.input_shape {
        return Err(Error::Internal("input gradient shape drifted from cached input".into()));
    }
    Ok((grads, g))
}

/// Convenience head: softmax-cross-entropy on `logits` against `labels`,
/// then backward. Returns (loss, grads, input_grad).
pub fn backward_from_labels(
    stack: &[LayerSpec],
    params: &ParamSet,
    cache: &Cache,
    logits: &Tensor,
    labels: &[usize],
) -> Result<(f64, GradSet, Tensor)> {
    let (loss, dlogits) = softmax_xent(logits, labels)?;
    let (grads, input_grad) = backward(stack, params, cache, &dlogits)?;
    Ok((loss, grads, input_grad))
}

fn backward_layer(
    layer: &LayerSpec,
    lp: &LayerParams,
    entry: &CacheEntry,
    g: &Tensor,
    out: &mut LayerParams,
) -> Result<Tensor> {
    match (layer, entry) {
        (&LayerSpec::Dense { in_dim, out_dim, bias }, CacheEntry::Dense { input }) => {
            let b = input.shape()[0];
            let w = lp.weight.as_ref().expect("dense weight");
            let dw = out.weight.as_mut().expect("dense dW").data_mut();
            let mut dx = vec![0.0; b * in_dim];
            for s in 0..b {
                let xs = &input.data()[s * in_dim..(s + 1) * in_dim];
                let gs = &g.data()[s * out_dim..(s + 1) * out_dim];
                for i in 0..in_dim {
                    let wr = &w.data()[i * out_dim..(i + 1) * out_dim];
                    let mut acc = 0.0;
                    for o in 0..out_dim {
                        dw[i * out_dim + o] += xs[i] * gs[o];
                        acc += wr[o] * gs[o];
                    }
                    dx[s * in_dim + i] = acc;
                }
                if bias {
                    let db = out.bias.as_mut().expect("dense db").data_mut();
                    for o in 0..out_dim {
                        db[o] += gs[o];
                    }
                }
            }
            Ok(Tensor::new(vec![b, in_dim], dx))
        }
        (
            &LayerSpec::Conv2D { kh, kw, in_ch, out_ch, padding, stride, bias },
            CacheEntry::Conv { input },
        ) => conv2d_backward(input, lp, out, g, kh, kw, in_ch, out_ch, padding, stride, bias),
        (&LayerSpec::MaxPool2D { .. }, CacheEntry::Pool { input_shape, argmax }) => {
            let mut dx = vec![0.0; input_shape.iter().product()];
            for (o, &src) in argmax.iter().enumerate() {
                dx[src] += g.data()[o];
            }
            Ok(Tensor::new(input_shape.clone(), dx))
        }
        (&LayerSpec::ReLU, CacheEntry::Relu { active }) => {
            let dx = g.data().iter().zip(active).map(|(&gv, &a)| if a { gv } else { 0.0 }).collect();
            Ok(Tensor::new(g.shape().to_vec(), dx))
        }
        (&LayerSpec::Flatten, CacheEntry::Flatten { input_shape }) => {
            Ok(g.clone().reshape(input_shape.clone()))
        }
        (&LayerSpec::Dropout { .. }, CacheEntry::Dropout { mask }) => {
            let dx = g.data().iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
            Ok(Tensor::new(g.shape().to_vec(), dx))
        }
        (
            &LayerSpec::LocalResponseNorm { depth_radius, alpha, beta, bias },
            CacheEntry::Lrn { input },
        ) => Ok(lrn_backward(input, g, depth_radius, alpha, beta, bias)),
        _ => Err(Error::Internal("cache entry does not match layer kind".into())),
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    input: &Tensor,
    lp: &LayerParams,
    out: &mut LayerParams,
    g: &Tensor,
    kh: usize,
    kw: usize,
    in_ch: usize,
    out_ch: usize,
    padding: Padding,
    stride: usize,
    bias: bool,
) -> Result<Tensor> {
    let (b, h, w) = (input.shape()[0], input.shape()[2], input.shape()[3]);
    let (pad_h, pad_w) = match padding {
        Padding::Same => (same_pad(h, kh, stride).0, same_pad(w, kw, stride).0),
        Padding::Valid => (0, 0),
    };
    let (oh, ow) = (g.shape()[2], g.shape()[3]);
    let wt = lp.weight.as_ref().expect("conv weight");
    let dw = out.weight.as_mut().expect("conv dW").data_mut();
    let mut dx = vec![0.0; input.scalar_count()];
    for s in 0..b {
        for oc in 0..out_ch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let gv = g.data()[((s * out_ch + oc) * oh + oy) * ow + ox];
                    if bias {
                        out.bias.as_mut().expect("conv db").data_mut()[oc] += gv;
                    }
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
                                let xi = ((s * in_ch + ic) * h + iy as usize) * w + ix as usize;
                                let wi = ((oc * in_ch + ic) * kh + ky) * kw + kx;
                                dw[wi] += input.data()[xi] * gv;
                                dx[xi] += wt.data()[wi] * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::new(input.shape().to_vec(), dx))
}

fn lrn_backward(x: &Tensor, g: &Tensor, radius: usize, alpha: f64, beta: f64, bias: f64) -> Tensor {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let plane = h * w;
    let mut dx = vec![0.0; x.scalar_count()];
    for s in 0..b {
        for p in 0..plane {
            // denom_i = bias + alpha * sum_{|j-i|<=r} x_j^2 along channels
            let mut denom = vec![0.0; c];
            for ch in 0..c {
                let lo = ch.saturating_sub(radius);
                let hi = (ch + radius).min(c - 1);
                let mut sq = 0.0;
                for cc in lo..=hi {
                    let v = x.data()[(s * c + cc) * plane + p];
                    sq += v * v;
                }
                denom[ch] = bias + alpha * sq;
            }
            for j in 0..c {
                let xj = x.data()[(s * c + j) * plane + p];
                let gj = g.data()[(s * c + j) * plane + p];
                let mut acc = gj * denom[j].powf(-beta);
                let lo = j.saturating_sub(radius);
                let hi = (j + radius).min(c - 1);
                for i in lo..=hi {
                    let xi = x.data()[(s * c + i) * plane + p];
                    let gi = g.data()[(s * c + i) * plane + p];
                    acc -= 2.0 * alpha * beta * xj * gi * xi * denom[i].powf(-beta - 1.0);
                }
                dx[(s * c + j) * plane + p] = acc;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{forward, init_params};

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let stack = [
            LayerSpec::Dense { in_dim: 3, out_dim: 4, bias: true },
            LayerSpec::ReLU,
            LayerSpec::Dense { in_dim: 4, out_dim: 2, bias: true },
        ];
        let p = init_params(&stack, 3);
        let x = Tensor::new(vec![2, 3], vec![0.5, -0.1, 0.2, 0.9, 0.3, -0.7]);
        let (cache, y) = forward(&stack, &p, &x, false, 0).unwrap();
        let zero = Tensor::zeros(y.shape().to_vec());
        let (grads, dx) = backward(&stack, &p, &cache, &zero).unwrap();
        assert_eq!(grads.sq_norm(), 0.0);
        assert_eq!(dx.sq_norm(), 0.0);
    }

    #[test]
    fn scalar_affine_chain_rule() {
        // Dense{1,1,no-bias}, w=2, input 3, upstream 1 -> dW=3, dx=2
        let stack = [LayerSpec::Dense { in_dim: 1, out_dim: 1, bias: false }];
        let mut p = init_params(&stack, 0);
        p.layers[0].weight = Some(Tensor::new(vec![1, 1], vec![2.0]));
        let x = Tensor::new(vec![1, 1], vec![3.0]);
        let (cache, _) = forward(&stack, &p, &x, false, 0).unwrap();
        let up = Tensor::new(vec![1, 1], vec![1.0]);
        let (grads, dx) = backward(&stack, &p, &cache, &up).unwrap();
        assert_eq!(grads.layers[0].weight.as_ref().unwrap().data(), &[3.0]);
        assert_eq!(dx.data(), &[2.0]);
    }

    #[test]
    fn stale_cache_rejected() {
        let stack = [LayerSpec::Dense { in_dim: 2, out_dim: 3, bias: false }];
        let p = init_params(&stack, 0);
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]);
        let (cache, _) = forward(&stack, &p, &x, false, 0).unwrap();
        let wrong = Tensor::zeros(vec![1, 4]);
        assert!(backward(&stack, &p, &cache, &wrong).is_err());
    }
}
