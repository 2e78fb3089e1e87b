//! Central finite-difference verification of analytic gradients.

use super::{backward_from_labels, forward, softmax_xent, LayerSpec, ParamSet};
use crate::error::Result;
use crate::tensor::Tensor;

/// Max relative error between analytic parameter gradients and central
/// finite differences of the softmax-cross-entropy loss.
///
/// Relative error per entry: `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
/// Dropout layers are exercised in train mode with the given seed so the
/// perturbed passes see the same mask.
pub fn grad_check(
    stack: &[LayerSpec],
    params: &ParamSet,
    input: &Tensor,
    labels: &[usize],
    eps: f64,
    rng_seed: u64,
) -> Result<f64> {
    let (cache, logits) = forward(stack, params, input, true, rng_seed)?;
    let (_, grads, _) = backward_from_labels(stack, params, &cache, &logits, labels)?;

    let loss_at = |p: &ParamSet| -> Result<f64> {
        let (_, logits) = forward(stack, p, input, true, rng_seed)?;
        let (loss, _) = softmax_xent(&logits, labels)?;
        Ok(loss)
    };

    let mut max_rel = 0.0f64;
    for (li, lp) in params.layers.iter().enumerate() {
        for which in [0usize, 1] {
            let tensor = if which == 0 { &lp.weight } else { &lp.bias };
            let Some(t) = tensor else { continue };
            for ei in 0..t.scalar_count() {
                let analytic = {
                    let gl = &grads.layers[li];
                    let gt = if which == 0 { gl.weight.as_ref() } else { gl.bias.as_ref() };
                    gt.unwrap().data()[ei]
                };
                let perturb = |delta: f64| -> Result<f64> {
                    let mut p = params.clone();
                    let pt = if which == 0 {
                        p.layers[li].weight.as_mut()
                    } else {
                        p.layers[li].bias.as_mut()
                    };
                    pt.unwrap().data_mut()[ei] += delta;
                    loss_at(&p)
                };
                let numeric = (perturb(eps)? - perturb(-eps)?) / (2.0 * eps);
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
                max_rel = max_rel.max(rel);
            }
        }
    }
    Ok(max_rel)
}
