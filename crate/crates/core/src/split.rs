//! Split architectures: client-side model, auxiliary network, server-side
//! model, the cut-layer contract, and the loss/update paths on each side.

use crate::error::{Error, Result};
use crate::nn::{
    self, backward, backward_from_labels, forward, lrn_default, param_count, sgd_step, shape_check,
    softmax_xent, Cache, GradSet, LayerSpec, Padding, ParamSet,
};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Auxiliary-network architecture: a plain MLP head, or a 1x1 convolution
/// down to `channels` followed by an MLP head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AuxKind {
    Mlp,
    CnnMlp { channels: usize },
}

/// The triple of layer stacks plus the cut-layer shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitArchitecture {
    pub client_stack: Vec<LayerSpec>,
    pub aux_stack: Vec<LayerSpec>,
    pub server_stack: Vec<LayerSpec>,
    pub input_shape: Vec<usize>,
    pub cut_shape: Vec<usize>,
    pub num_classes: usize,
}

impl SplitArchitecture {
    /// Validates the cut-layer contract: client output == cut shape ==
    /// aux/server input, and both heads end in `num_classes` logits.
    pub fn validate(&self) -> Result<()> {
        let cut = shape_check(&self.client_stack, &self.input_shape)?;
        if cut != self.cut_shape {
            return Err(Error::Protocol(format!(
                "client stack produces {cut:?}, declared cut shape {:?}",
                self.cut_shape
            )));
        }
        for (name, stack) in [("aux", &self.aux_stack), ("server", &self.server_stack)] {
            let out = shape_check(stack, &self.cut_shape)?;
            if out != [self.num_classes] {
                return Err(Error::Protocol(format!(
                    "{name} stack terminates in {out:?}, expected [{}]",
                    self.num_classes
                )));
            }
        }
        Ok(())
    }

    pub fn client_params(&self) -> usize {
        param_count(&self.client_stack)
    }

    pub fn aux_params(&self) -> usize {
        param_count(&self.aux_stack)
    }

    pub fn server_params(&self) -> usize {
        param_count(&self.server_stack)
    }

    /// Scalars per smashed sample: product of the cut shape.
    pub fn cut_size(&self) -> usize {
        self.cut_shape.iter().product()
    }
}

/// Generic fully-connected split model for desk-scale synthetic tasks.
pub fn build_dense_arch(input_dim: usize, cut_dim: usize, hidden: usize, classes: usize) -> SplitArchitecture {
    SplitArchitecture {
        client_stack: vec![
            LayerSpec::Dense { in_dim: input_dim, out_dim: cut_dim, bias: true },
            LayerSpec::ReLU,
        ],
        aux_stack: vec![LayerSpec::Dense { in_dim: cut_dim, out_dim: classes, bias: true }],
        server_stack: vec![
            LayerSpec::Dense { in_dim: cut_dim, out_dim: hidden, bias: true },
            LayerSpec::ReLU,
            LayerSpec::Dense { in_dim: hidden, out_dim: classes, bias: true },
        ],
        input_shape: vec![input_dim],
        cut_shape: vec![cut_dim],
        num_classes: classes,
    }
}

/// CIFAR-10 split model. Input is the 24x24 center crop of CIFAR-10; two
/// 5x5/64 SAME convolutions each followed by 2x2 max-pooling and local
/// response norm give a 64x6x6 cut tensor (2304 scalars).
pub fn build_cifar10_arch(aux: AuxKind) -> SplitArchitecture {
    let conv = |in_ch: usize| LayerSpec::Conv2D {
        kh: 5,
        kw: 5,
        in_ch,
        out_ch: 64,
        padding: Padding::Same,
        stride: 1,
        bias: true,
    };
    let pool = LayerSpec::MaxPool2D { k: 2, stride: 2 };
    let client_stack = vec![
        conv(3),
        LayerSpec::ReLU,
        pool.clone(),
        lrn_default(),
        conv(64),
        LayerSpec::ReLU,
        pool,
        lrn_default(),
    ];
    let aux_stack = aux_head(aux, 64, 6, 10);
    let server_stack = vec![
        LayerSpec::Flatten,
        LayerSpec::Dense { in_dim: 2304, out_dim: 384, bias: true },
        LayerSpec::ReLU,
        LayerSpec::Dense { in_dim: 384, out_dim: 192, bias: true },
        LayerSpec::ReLU,
        LayerSpec::Dense { in_dim: 192, out_dim: 10, bias: true },
    ];
    SplitArchitecture {
        client_stack,
        aux_stack,
        server_stack,
        input_shape: vec![3, 24, 24],
        cut_shape: vec![64, 6, 6],
        num_classes: 10,
    }
}

/// F-EMNIST split model. Two VALID 3x3 convolutions, one 2x2 pool, dropout;
/// cut tensor is 64x12x12 (9216 scalars), 62 output classes.
pub fn build_femnist_arch(aux: AuxKind) -> SplitArchitecture {
    let client_stack = vec![
        LayerSpec::Conv2D { kh: 3, kw: 3, in_ch: 1, out_ch: 32, padding: Padding::Valid, stride: 1, bias: true },
        LayerSpec::ReLU,
        LayerSpec::Conv2D { kh: 3, kw: 3, in_ch: 32, out_ch: 64, padding: Padding::Valid, stride: 1, bias: true },
        LayerSpec::ReLU,
        LayerSpec::MaxPool2D { k: 2, stride: 2 },
        LayerSpec::Dropout { rate: 0.25 },
    ];
    let aux_stack = aux_head(aux, 64, 12, 62);
    let server_stack = vec![
        LayerSpec::Flatten,
        LayerSpec::Dense { in_dim: 9216, out_dim: 128, bias: true },
        LayerSpec::ReLU,
        LayerSpec::Dense { in_dim: 128, out_dim: 62, bias: true },
    ];
    SplitArchitecture {
        client_stack,
        aux_stack,
        server_stack,
        input_shape: vec![1, 28, 28],
        cut_shape: vec![64, 12, 12],
        num_classes: 62,
    }
}

fn aux_head(aux: AuxKind, cut_ch: usize, cut_hw: usize, classes: usize) -> Vec<LayerSpec> {
    match aux {
        AuxKind::Mlp => vec![
            LayerSpec::Flatten,
            LayerSpec::Dense { in_dim: cut_ch * cut_hw * cut_hw, out_dim: classes, bias: true },
        ],
        AuxKind::CnnMlp { channels } => vec![
            LayerSpec::Conv2D {
                kh: 1,
                kw: 1,
                in_ch: cut_ch,
                out_ch: channels,
                padding: Padding::Valid,
                stride: 1,
                bias: true,
            },
            LayerSpec::Flatten,
            LayerSpec::Dense { in_dim: channels * cut_hw * cut_hw, out_dim: classes, bias: true },
        ],
    }
}

/// Cut-layer activations plus labels and provenance: the unit of
/// client-to-server upload.
#[derive(Debug, Clone)]
pub struct SmashedBatch {
    pub activations: Tensor,
    pub labels: Vec<usize>,
    pub client_id: usize,
    pub round: usize,
    pub batch_index: usize,
}

impl SmashedBatch {
    pub fn batch_size(&self) -> usize {
        self.activations.shape()[0]
    }

    /// Payload in scalar units: B * q. Labels are accounted separately.
    pub fn payload_size(&self) -> usize {
        self.activations.scalar_count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelRole {
    Client,
    Aux,
    Server,
}

/// A parameter set tagged with its role and provenance, serializable as a
/// stack descriptor plus flat parameter array.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSnapshot {
    pub role: ModelRole,
    pub round: usize,
    pub client_id: Option<usize>,
    pub params: ParamSet,
}

impl ModelSnapshot {
    pub fn scalar_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Flat form used for checkpointing and size accounting.
    pub fn to_flat_json(&self, stack: &[LayerSpec]) -> serde_json::Value {
        serde_json::json!({
            "role": self.role,
            "round": self.round,
            "client_id": self.client_id,
            "stack": stack,
            "params": self.params.to_flat(),
        })
    }
}

/// Mini-batch of raw features and labels.
#[derive(Debug, Clone)]
pub struct Batch {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub batch_index: usize,
}

/// Runs the client stack forward and packages the cut activations.
pub fn client_forward_cut(
    arch: &SplitArchitecture,
    client_params: &ParamSet,
    batch: &Batch,
    client_id: usize,
    round: usize,
    train_mode: bool,
    rng_seed: u64,
) -> Result<SmashedBatch> {
    if batch.features.shape()[1..] != arch.input_shape[..] {
        return Err(Error::Data(format!(
            "batch features {:?} do not match client input {:?}",
            &batch.features.shape()[1..],
            arch.input_shape
        )));
    }
    let (_, activations) = forward(&arch.client_stack, client_params, &batch.features, train_mode, rng_seed)?;
    Ok(SmashedBatch {
        activations,
        labels: batch.labels.clone(),
        client_id,
        round,
        batch_index: batch.batch_index,
    })
}

/// Like `client_forward_cut`, but also returns the forward cache so the
/// client can finish backward once cut gradients come back downstream.
pub fn client_forward_cut_cached(
    arch: &SplitArchitecture,
    client_params: &ParamSet,
    batch: &Batch,
    client_id: usize,
    round: usize,
    rng_seed: u64,
) -> Result<(Cache, SmashedBatch)> {
    if batch.features.shape()[1..] != arch.input_shape[..] {
        return Err(Error::Data(format!(
            "batch features {:?} do not match client input {:?}",
            &batch.features.shape()[1..],
            arch.input_shape
        )));
    }
    let (cache, activations) =
        forward(&arch.client_stack, client_params, &batch.features, true, rng_seed)?;
    let smashed = SmashedBatch {
        activations,
        labels: batch.labels.clone(),
        client_id,
        round,
        batch_index: batch.batch_index,
    };
    Ok((cache, smashed))
}

/// Client-side gradients given the downloaded cut-layer gradients and the
/// cached forward that produced the corresponding smashed batch.
pub fn backward_client_from_cut(
    arch: &SplitArchitecture,
    client_params: &ParamSet,
    cache: &Cache,
    cut_grad: &Tensor,
) -> Result<GradSet> {
    if cut_grad.shape()[1..] != arch.cut_shape[..] {
        return Err(Error::Protocol(format!(
            "cut gradient {:?} does not match cut shape {:?}",
            &cut_grad.shape()[1..],
            arch.cut_shape
        )));
    }
    let (grads, _) = backward(&arch.client_stack, client_params, cache, cut_grad)?;
    Ok(grads)
}

/// Local loss through client + auxiliary stacks and its gradients w.r.t.
/// both parameter sets (mini-batch mean).
pub fn local_loss_and_grads(
    arch: &SplitArchitecture,
    client_params: &ParamSet,
    aux_params: &ParamSet,
    batch: &Batch,
    rng_seed: u64,
) -> Result<(f64, GradSet, GradSet)> {
    let (client_cache, cut) = forward(&arch.client_stack, client_params, &batch.features, true, rng_seed)?;
    let (aux_cache, logits) = forward(&arch.aux_stack, aux_params, &cut, true, rng_seed.wrapping_add(1))?;
    let (loss, aux_grads, cut_grad) =
        backward_from_labels(&arch.aux_stack, aux_params, &aux_cache, &logits, &batch.labels)?;
    let (client_grads, _) = backward(&arch.client_stack, client_params, &client_cache, &cut_grad)?;
    Ok((loss, client_grads, aux_grads))
}

/// Server loss and gradients on a smashed batch, without stepping.
/// `cut_grad` is the gradient of the server loss w.r.t. the activations —
/// the payload baselines send back downstream.
pub fn backprop_to_cut(
    arch: &SplitArchitecture,
    server_params: &ParamSet,
    smashed: &SmashedBatch,
) -> Result<(f64, GradSet, Tensor)> {
    if smashed.activations.shape()[1..] != arch.cut_shape[..] {
        return Err(Error::Protocol(format!(
            "smashed activations {:?} do not match server input {:?}",
            &smashed.activations.shape()[1..],
            arch.cut_shape
        )));
    }
    let (cache, logits) = forward(&arch.server_stack, server_params, &smashed.activations, true, 0)?;
    let (loss, grads, cut_grad) =
        backward_from_labels(&arch.server_stack, server_params, &cache, &logits, &smashed.labels)?;
    Ok((loss, grads, cut_grad))
}

/// Exactly one server-side SGD step per smashed batch.
pub fn server_loss_step(
    arch: &SplitArchitecture,
    server_params: &mut ParamSet,
    smashed: &SmashedBatch,
    lr: f64,
) -> Result<f64> {
    let (loss, grads, _) = backprop_to_cut(arch, server_params, smashed)?;
    sgd_step(server_params, &grads, lr)?;
    Ok(loss)
}

/// Composite forward (client then server, eval mode) used at inference.
pub fn composite_logits(
    arch: &SplitArchitecture,
    client_params: &ParamSet,
    server_params: &ParamSet,
    features: &Tensor,
) -> Result<Tensor> {
    let (_, cut) = forward(&arch.client_stack, client_params, features, false, 0)?;
    let (_, logits) = forward(&arch.server_stack, server_params, &cut, false, 0)?;
    Ok(logits)
}

/// Composite loss through client + server (eval mode), for bound tracking.
pub fn composite_loss(
    arch: &SplitArchitecture,
    client_params: &ParamSet,
    server_params: &ParamSet,
    features: &Tensor,
    labels: &[usize],
) -> Result<f64> {
    let logits = composite_logits(arch, client_params, server_params, features)?;
    Ok(softmax_xent(&logits, labels)?.0)
}

/// Unsplit view of a client+server stack: concatenated specs and params.
/// Oracle hook for the split-equivalence checks.
pub fn concat_client_server(arch: &SplitArchitecture, client: &ParamSet, server: &ParamSet) -> (Vec<LayerSpec>, ParamSet) {
    let mut stack = arch.client_stack.clone();
    stack.extend(arch.server_stack.iter().cloned());
    let mut layers = client.layers.clone();
    layers.extend(server.layers.iter().cloned());
    (stack, ParamSet { layers })
}

pub use nn::init_params;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_params;

    #[test]
    fn published_cifar10_counts() {
        let arch = build_cifar10_arch(AuxKind::Mlp);
        arch.validate().unwrap();
        assert_eq!(arch.client_params(), 107_328);
        assert_eq!(arch.server_params(), 960_970);
        assert_eq!(arch.aux_params(), 23_050);
        for (ch, expect) in [(54, 22_960), (27, 11_485), (14, 5_960), (7, 2_985)] {
            let arch = build_cifar10_arch(AuxKind::CnnMlp { channels: ch });
            arch.validate().unwrap();
            assert_eq!(arch.aux_params(), expect, "channels={ch}");
        }
    }

    #[test]
    fn published_femnist_counts() {
        let arch = build_femnist_arch(AuxKind::Mlp);
        arch.validate().unwrap();
        assert_eq!(arch.client_params(), 18_816);
        assert_eq!(arch.server_params(), 1_187_774);
        assert_eq!(arch.aux_params(), 571_454);
        for (ch, expect) in [(64, 575_614), (32, 287_838), (8, 72_006), (2, 18_048)] {
            let arch = build_femnist_arch(AuxKind::CnnMlp { channels: ch });
            arch.validate().unwrap();
            assert_eq!(arch.aux_params(), expect, "channels={ch}");
        }
    }

    #[test]
    fn zero_client_weights_give_zero_activations() {
        let arch = build_dense_arch(3, 4, 5, 2);
        let mut p = init_params(&arch.client_stack, 0);
        for lp in &mut p.layers {
            if let Some(w) = &mut lp.weight {
                w.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
            if let Some(b) = &mut lp.bias {
                b.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let batch = Batch {
            features: Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 0.3, 0.1, -0.9]),
            labels: vec![0, 1],
            batch_index: 0,
        };
        let smashed = client_forward_cut(&arch, &p, &batch, 0, 0, false, 0).unwrap();
        assert_eq!(smashed.activations.sq_norm(), 0.0);
        assert_eq!(smashed.labels, vec![0, 1]);
        assert_eq!(smashed.payload_size(), 2 * 4);
    }

    #[test]
    fn duplicated_batch_has_identical_loss_and_grads() {
        let arch = build_dense_arch(3, 4, 5, 3);
        let cp = init_params(&arch.client_stack, 1);
        let ap = init_params(&arch.aux_stack, 2);
        let one = Batch {
            features: Tensor::new(vec![1, 3], vec![0.2, -0.4, 0.9]),
            labels: vec![1],
            batch_index: 0,
        };
        let four = Batch {
            features: Tensor::new(vec![4, 3], [0.2, -0.4, 0.9].repeat(4)),
            labels: vec![1; 4],
            batch_index: 0,
        };
        let (l1, g1c, g1a) = local_loss_and_grads(&arch, &cp, &ap, &one, 0).unwrap();
        let (l4, g4c, g4a) = local_loss_and_grads(&arch, &cp, &ap, &four, 0).unwrap();
        assert!((l1 - l4).abs() < 1e-12);
        let d = |a: &GradSet, b: &GradSet| {
            a.to_flat()
                .iter()
                .zip(b.to_flat())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max)
        };
        assert!(d(&g1c, &g4c) < 1e-12);
        assert!(d(&g1a, &g4a) < 1e-12);
    }

    #[test]
    fn uniform_logits_local_loss_is_ln_k() {
        let arch = build_dense_arch(2, 3, 4, 5);
        let cp = init_params(&arch.client_stack, 3);
        let mut ap = init_params(&arch.aux_stack, 4);
        // zero aux weights -> uniform logits regardless of cut activations
        for lp in &mut ap.layers {
            if let Some(w) = &mut lp.weight {
                w.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let batch = Batch {
            features: Tensor::new(vec![2, 2], vec![0.3, 0.7, -0.2, 0.5]),
            labels: vec![0, 4],
            batch_index: 0,
        };
        let (loss, _, _) = local_loss_and_grads(&arch, &cp, &ap, &batch, 0).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_lr_server_step_leaves_params() {
        let arch = build_dense_arch(2, 3, 4, 2);
        let cp = init_params(&arch.client_stack, 0);
        let mut sp = init_params(&arch.server_stack, 1);
        let before = sp.clone();
        let batch = Batch {
            features: Tensor::new(vec![1, 2], vec![0.5, -0.5]),
            labels: vec![1],
            batch_index: 0,
        };
        let smashed = client_forward_cut(&arch, &cp, &batch, 0, 0, false, 0).unwrap();
        let loss = server_loss_step(&arch, &mut sp, &smashed, 0.0).unwrap();
        assert!(loss.is_finite());
        assert_eq!(sp, before);
    }

    #[test]
    fn cut_shape_mismatch_is_protocol_error() {
        let arch = build_dense_arch(2, 3, 4, 2);
        let sp = init_params(&arch.server_stack, 1);
        let smashed = SmashedBatch {
            activations: Tensor::zeros(vec![1, 5]),
            labels: vec![0],
            client_id: 0,
            round: 0,
            batch_index: 0,
        };
        match backprop_to_cut(&arch, &sp, &smashed) {
            Err(Error::Protocol(_)) => {}
            other => panic!("expected protocol error, got {other:?}"),
        }
    }
}
