//! Convergence-bound evaluation: closed-form right-hand sides for the
//! client- and server-side guarantees, empirical gradient-norm traces for
//! the left-hand sides, and histogram-based estimation of the cut-activation
//! distribution drift term.
//!
//! The smoothness and gradient-norm constants are estimated empirically
//! (maxima over sampled points), so the bound checks are consistency checks,
//! not proofs.

use crate::data::{ClientShard, Dataset};
use crate::error::{Error, Result};
use crate::nn::{forward, GradSet, ParamSet};
use crate::split::{local_loss_and_grads, Batch, SplitArchitecture};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Symbols feeding the two bound formulas.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BoundInputs {
    /// Smoothness constant.
    pub l: f64,
    /// Client-side gradient-norm bound.
    pub g1: f64,
    /// Server-side gradient-norm bound.
    pub g2: f64,
    pub h: f64,
    pub n: f64,
    pub t: f64,
    /// Initial-minus-best client loss surrogate.
    pub delta_c: f64,
    /// Initial-minus-best server loss surrogate.
    pub delta_s: f64,
    /// Accumulated distribution-drift estimate, summed over rounds and clients.
    pub d_sum: f64,
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        let pos = self.l > 0.0
            && self.g1 >= 0.0
            && self.g2 >= 0.0
            && self.h >= 1.0
            && self.n >= 1.0
            && self.t >= 1.0
            && self.delta_c >= 0.0
            && self.delta_s >= 0.0
            && self.d_sum >= 0.0;
        if pos {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("bound inputs out of range: {self:?}")))
        }
    }
}

/// Right-hand side of the client-side guarantee:
/// 4Lh·delta_c/((2h−1)√T) + 2h·G1²/((2h−1)√T).
pub fn client_bound(bi: &BoundInputs) -> Result<f64> {
    bi.validate()?;
    let denom = (2.0 * bi.h - 1.0) * bi.t.sqrt();
    Ok(4.0 * bi.l * bi.h * bi.delta_c / denom + 2.0 * bi.h * bi.g1 * bi.g1 / denom)
}

/// Right-hand side of the server-side guarantee:
/// 4Ln·delta_s/((2n−1)√T) + 4G2²·d_sum/((2n−1)T) + 2n·G2²/((2n−1)√T).
pub fn server_bound(bi: &BoundInputs) -> Result<f64> {
    bi.validate()?;
    let twon1 = 2.0 * bi.n - 1.0;
    Ok(4.0 * bi.l * bi.n * bi.delta_s / (twon1 * bi.t.sqrt())
        + 4.0 * bi.g2 * bi.g2 * bi.d_sum / (twon1 * bi.t)
        + 2.0 * bi.n * bi.g2 * bi.g2 / (twon1 * bi.t.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrRole {
    Client,
    Server,
}

/// The constant step size each guarantee assumes: 1/(Lh√T) on the client
/// side, 1/(Ln√T) on the server side.
pub fn lr_from_theory(role: LrRole, l: f64, h_or_n: f64, t: f64) -> Result<f64> {
    if l <= 0.0 || h_or_n < 1.0 || t < 1.0 {
        return Err(Error::InvalidConfig("lr_from_theory needs positive L, h/n >= 1, T >= 1".into()));
    }
    let _ = role; // same algebraic shape either way
    Ok(1.0 / (l * h_or_n * t.sqrt()))
}

/// Per-round full-batch squared gradient norms, the measured left-hand sides.
#[derive(Debug, Clone, Default, Serialize)]
pub struct GradNormTrace {
    pub client_sq: Vec<f64>,
    pub server_sq: Vec<f64>,
}

impl GradNormTrace {
    pub fn running_mean_client(&self) -> f64 {
        mean(&self.client_sq)
    }
    pub fn running_mean_server(&self) -> f64 {
        mean(&self.server_sq)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Full-batch client-objective gradient for one client's whole shard,
/// averaged over samples (single big batch; desk scale).
pub fn full_batch_client_grads(
    arch: &SplitArchitecture,
    client_params: &ParamSet,
    aux_params: &ParamSet,
    shard: &ClientShard,
    data: &Dataset,
) -> Result<(f64, GradSet, GradSet)> {
    let features = data.features.select_rows(&shard.indices);
    let labels: Vec<usize> = shard.indices.iter().map(|&i| data.labels[i]).collect();
    let batch = Batch { features, labels, batch_index: 0 };
    // eval-equivalent seed: full-batch norms must be deterministic
    local_loss_and_grads(arch, client_params, aux_params, &batch, 0)
}

/// Appends one round's full-batch norms: mean over clients of each client's
/// shard gradient, squared, client side; analogous composite pass server side.
pub fn track_grad_norms(
    arch: &SplitArchitecture,
    client_params: &[ParamSet],
    aux_params: &[ParamSet],
    server_eval: &ParamSet,
    shards: &[ClientShard],
    data: &Dataset,
    trace: &mut GradNormTrace,
) -> Result<()> {
    // Client objective: (1/n) sum_i F_{c,i}; its gradient w.r.t. the shared
    // post-aggregation parameters is the mean of per-shard gradients.
    let mut acc: Option<GradSet> = None;
    for (i, shard) in shards.iter().enumerate() {
        let (_, cg, _) = full_batch_client_grads(arch, &client_params[i], &aux_params[i], shard, data)?;
        match &mut acc {
            None => acc = Some(cg),
            Some(a) => a.add(&cg),
        }
    }
    let mut acc = acc.ok_or_else(|| Error::InvalidConfig("no shards".into()))?;
    acc.scale(1.0 / shards.len() as f64);
    trace.client_sq.push(acc.sq_norm());

    // Server objective over the whole dataset through the current client
    // models (each shard's smashed distribution).
    let mut sacc: Option<GradSet> = None;
    for (i, shard) in shards.iter().enumerate() {
        let features = data.features.select_rows(&shard.indices);
        let labels: Vec<usize> = shard.indices.iter().map(|&j| data.labels[j]).collect();
        let (_, cut) = forward(&arch.client_stack, &client_params[i], &features, false, 0)?;
        let smashed = crate::split::SmashedBatch {
            activations: cut,
            labels,
            client_id: i,
            round: 0,
            batch_index: 0,
        };
        let (_, sg, _) = crate::split::backprop_to_cut(arch, server_eval, &smashed)?;
        match &mut sacc {
            None => sacc = Some(sg),
            Some(a) => a.add(&sg),
        }
    }
    let mut sacc = sacc.expect("shards nonempty");
    sacc.scale(1.0 / shards.len() as f64);
    trace.server_sq.push(sacc.sq_norm());
    Ok(())
}

/// Shared-bin histogram of (projected or per-dimension) cut activations.
#[derive(Debug, Clone, Serialize)]
pub struct ActivationHistogram {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
    /// counts[d][b]: samples of dimension d in bin b.
    pub counts: Vec<Vec<u64>>,
    pub samples: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DctMode {
    /// Average the per-dimension L1 histogram distances.
    PerDimension,
    /// Project activations onto one seeded random direction first.
    RandomProjection { seed: u64 },
}

impl ActivationHistogram {
    /// Bins every activation dimension (or one random projection) of the
    /// sample-major activation tensor over the fixed range [lo, hi];
    /// out-of-range values clamp into the edge bins.
    pub fn build(activations: &Tensor, lo: f64, hi: f64, bins: usize, mode: DctMode) -> Result<Self> {
        if bins == 0 || hi <= lo {
            return Err(Error::InvalidConfig("histogram needs bins >= 1 and hi > lo".into()));
        }
        let n = activations.shape()[0];
        let dim: usize = activations.shape()[1..].iter().product();
        if n == 0 || dim == 0 {
            return Err(Error::Data("empty activations".into()));
        }
        let data = activations.data();
        let (ncols, values): (usize, Vec<f64>) = match mode {
            DctMode::PerDimension => (dim, data.to_vec()),
            DctMode::RandomProjection { seed } => {
                let mut rng = ChaCha20Rng::seed_from_u64(seed);
                let dir: Vec<f64> =
                    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                let mut projected = Vec::with_capacity(n);
                for s in 0..n {
                    let row = &data[s * dim..(s + 1) * dim];
                    projected.push(
                        row.iter().zip(&dir).map(|(a, b)| a * b).sum::<f64>() / norm,
                    );
                }
                (1, projected)
            }
        };
        let mut counts = vec![vec![0u64; bins]; ncols];
        let width = (hi - lo) / bins as f64;
        for s in 0..n {
            for d in 0..ncols {
                let v = values[s * ncols + d];
                let b = (((v - lo) / width).floor() as i64).clamp(0, bins as i64 - 1) as usize;
                counts[d][b] += 1;
            }
        }
        Ok(ActivationHistogram { lo, hi, bins, counts, samples: n as u64 })
    }
}

/// L1 distance between two binned densities with identical binning,
/// averaged over dimensions; always in [0, 2].
pub fn estimate_dct(a: &ActivationHistogram, b: &ActivationHistogram) -> Result<f64> {
    if a.bins != b.bins || a.lo != b.lo || a.hi != b.hi || a.counts.len() != b.counts.len() {
        return Err(Error::InvalidConfig("histogram binning mismatch".into()));
    }
    if a.samples == 0 || b.samples == 0 {
        return Err(Error::Data("empty histogram".into()));
    }
    let dims = a.counts.len();
    let mut total = 0.0;
    for d in 0..dims {
        let mut l1 = 0.0;
        for bin in 0..a.bins {
            let pa = a.counts[d][bin] as f64 / a.samples as f64;
            let pb = b.counts[d][bin] as f64 / b.samples as f64;
            l1 += (pa - pb).abs();
        }
        total += l1;
    }
    Ok(total / dims as f64)
}

/// Empirical smoothness estimate: max over sampled parameter pairs of
/// ||grad(x) - grad(y)|| / ||x - y|| along random perturbation directions.
pub fn estimate_smoothness(
    arch: &SplitArchitecture,
    client_params: &ParamSet,
    aux_params: &ParamSet,
    batch: &Batch,
    trials: usize,
    radius: f64,
    seed: u64,
) -> Result<f64> {
    let (_, g0c, g0a) = local_loss_and_grads(arch, client_params, aux_params, batch, 0)?;
    let mut best: f64 = 0.0;
    for k in 0..trials {
        let mut cp = client_params.clone();
        let mut ap = aux_params.clone();
        let mut rng = ChaCha20Rng::seed_from_u64(seed.wrapping_add(k as u64));
        for p in [&mut cp, &mut ap] {
            let mut flat = p.to_flat();
            for v in &mut flat {
                let d: f64 = StandardNormal.sample(&mut rng);
                *v += d * radius;
            }
            p.load_flat(&flat)?;
        }
        let dist_sq = param_dist_sq(client_params, &cp) + param_dist_sq(aux_params, &ap);
        let (_, g1c, g1a) = local_loss_and_grads(arch, &cp, &ap, batch, 0)?;
        let gdiff_sq = grad_dist_sq(&g0c, &g1c) + grad_dist_sq(&g0a, &g1a);
        if dist_sq > 0.0 {
            best = best.max((gdiff_sq / dist_sq).sqrt());
        }
    }
    Ok(best.max(1e-12))
}

fn param_dist_sq(a: &ParamSet, b: &ParamSet) -> f64 {
    let fa = a.to_flat();
    let fb = b.to_flat();
    fa.iter().zip(&fb).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn grad_dist_sq(a: &GradSet, b: &GradSet) -> f64 {
    let fa = a.to_flat();
    let fb = b.to_flat();
    fa.iter().zip(&fb).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Max observed stochastic gradient norm over the given batches: the G
/// surrogate of the bounded-gradient assumption.
pub fn estimate_grad_bound(
    arch: &SplitArchitecture,
    client_params: &ParamSet,
    aux_params: &ParamSet,
    batches: &[Batch],
) -> Result<f64> {
    let mut best: f64 = 0.0;
    for b in batches {
        let (_, cg, ag) = local_loss_and_grads(arch, client_params, aux_params, b, 0)?;
        best = best.max((cg.sq_norm() + ag.sq_norm()).sqrt());
    }
    Ok(best)
}

/// Bound report serialized by the CLI.
#[derive(Debug, Clone, Serialize)]
pub struct BoundReport {
    pub inputs: BoundInputs,
    pub client_bound: f64,
    pub server_bound: f64,
    pub lr_client: f64,
    pub lr_server: f64,
    pub measured_client_mean_sq: Option<f64>,
    pub measured_server_mean_sq: Option<f64>,
    pub client_consistent: Option<bool>,
}

pub fn bound_report(bi: &BoundInputs, trace: Option<&GradNormTrace>) -> Result<BoundReport> {
    let cb = client_bound(bi)?;
    let sb = server_bound(bi)?;
    let (mc, ms, ok) = match trace {
        Some(tr) => {
            let m = tr.running_mean_client();
            (Some(m), Some(tr.running_mean_server()), Some(m <= cb))
        }
        None => (None, None, None),
    };
    Ok(BoundReport {
        inputs: *bi,
        client_bound: cb,
        server_bound: sb,
        lr_client: lr_from_theory(LrRole::Client, bi.l, bi.h, bi.t)?,
        lr_server: lr_from_theory(LrRole::Server, bi.l, bi.n, bi.t)?,
        measured_client_mean_sq: mc,
        measured_server_mean_sq: ms,
        client_consistent: ok,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> BoundInputs {
        BoundInputs { l: 1.0, g1: 1.0, g2: 1.0, h: 1.0, n: 1.0, t: 100.0, delta_c: 1.0, delta_s: 1.0, d_sum: 0.0 }
    }

    #[test]
    fn client_bound_hand_value() {
        // 4*1*1*1/(1*10) + 2*1*1/(1*10) = 0.4 + 0.2
        assert!((client_bound(&base()).unwrap() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn server_bound_hand_value() {
        assert!((server_bound(&base()).unwrap() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn quadrupling_t_halves_bounds() {
        let mut b4 = base();
        b4.t = 400.0;
        assert!((client_bound(&b4).unwrap() - 0.3).abs() < 1e-12);
        assert!((server_bound(&b4).unwrap() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn large_h_limit() {
        let mut bi = base();
        bi.h = 1e9;
        let limit = (4.0 * bi.l * bi.delta_c + 2.0 * bi.g1 * bi.g1) / (2.0 * bi.t.sqrt());
        assert!((client_bound(&bi).unwrap() - limit).abs() < 1e-6);
    }

    #[test]
    fn d_sum_term_is_linear() {
        let mut a = base();
        a.d_sum = 1.0;
        let mut b = base();
        b.d_sum = 2.0;
        let zero = server_bound(&base()).unwrap();
        let one = server_bound(&a).unwrap();
        let two = server_bound(&b).unwrap();
        assert!(((two - zero) - 2.0 * (one - zero)).abs() < 1e-12);
    }

    #[test]
    fn server_reduces_to_client_shape_at_n1() {
        // n=1, d_sum=0 has the same algebraic form as h=1 client side.
        let bi = base();
        assert!((server_bound(&bi).unwrap() - client_bound(&bi).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn bounds_decreasing_in_t() {
        let mut prev = f64::INFINITY;
        for t in [25.0, 50.0, 100.0, 400.0] {
            let mut bi = base();
            bi.t = t;
            bi.d_sum = 3.0;
            let v = server_bound(&bi).unwrap();
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn lr_from_theory_values() {
        assert_eq!(lr_from_theory(LrRole::Client, 1.0, 1.0, 1.0).unwrap(), 1.0);
        assert!((lr_from_theory(LrRole::Client, 2.0, 5.0, 100.0).unwrap() - 0.01).abs() < 1e-15);
        let a = lr_from_theory(LrRole::Server, 1.0, 2.0, 100.0).unwrap();
        let b = lr_from_theory(LrRole::Server, 1.0, 4.0, 100.0).unwrap();
        assert!(b < a);
    }

    fn hist_from(vals: &[f64], bins: usize) -> ActivationHistogram {
        let t = Tensor::new(vec![vals.len(), 1], vals.to_vec());
        ActivationHistogram::build(&t, 0.0, 2.0, bins, DctMode::PerDimension).unwrap()
    }

    #[test]
    fn dct_identity_and_disjoint() {
        let a = hist_from(&[0.1, 0.2, 0.3, 0.4], 10);
        assert_eq!(estimate_dct(&a, &a).unwrap(), 0.0);
        let lo = hist_from(&[0.1, 0.1, 0.2, 0.2], 10);
        let hi = hist_from(&[1.8, 1.8, 1.9, 1.9], 10);
        assert_eq!(estimate_dct(&lo, &hi).unwrap(), 2.0);
    }

    #[test]
    fn dct_is_pseudometric_on_random_triples() {
        use rand::Rng;
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for _ in 0..20 {
            let draw = |rng: &mut ChaCha20Rng| -> ActivationHistogram {
                let vals: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..2.0)).collect();
                hist_from(&vals, 16)
            };
            let a = draw(&mut rng);
            let b = draw(&mut rng);
            let c = draw(&mut rng);
            let ab = estimate_dct(&a, &b).unwrap();
            let ba = estimate_dct(&b, &a).unwrap();
            let ac = estimate_dct(&a, &c).unwrap();
            let cb = estimate_dct(&c, &b).unwrap();
            assert_eq!(ab, ba);
            assert!(ab <= ac + cb + 1e-12);
            assert!((0.0..=2.0).contains(&ab));
        }
    }

    #[test]
    fn dct_gaussian_overlap_matches_numerical_integration() {
        // Two seeded Gaussians; shared-bin estimate vs direct integration of
        // |p - q| for the true densities.
        let mu_a = 0.8;
        let mu_b = 1.2;
        let sigma = 0.15;
        let n = 100_000;
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let gauss = |mu: f64, rng: &mut ChaCha20Rng| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    mu + sigma * z
                })
                .collect()
        };
        let a = hist_from(&gauss(mu_a, &mut rng), 1000);
        let b = hist_from(&gauss(mu_b, &mut rng), 1000);
        let est = estimate_dct(&a, &b).unwrap();

        let pdf = |x: f64, mu: f64| {
            (-((x - mu) * (x - mu)) / (2.0 * sigma * sigma)).exp()
                / (sigma * (2.0 * std::f64::consts::PI).sqrt())
        };
        let mut exact = 0.0;
        let steps = 200_000;
        let (lo, hi) = (0.0, 2.0);
        let dx = (hi - lo) / steps as f64;
        for i in 0..steps {
            let x = lo + (i as f64 + 0.5) * dx;
            exact += (pdf(x, mu_a) - pdf(x, mu_b)).abs() * dx;
        }
        assert!(
            (est - exact).abs() / exact < 0.05,
            "estimate {est} vs integral {exact}"
        );
    }

    #[test]
    fn random_projection_gives_single_column() {
        let t = Tensor::new(vec![4, 3], (0..12).map(|v| v as f64 * 0.1).collect());
        let h = ActivationHistogram::build(&t, -2.0, 2.0, 8, DctMode::RandomProjection { seed: 1 }).unwrap();
        assert_eq!(h.counts.len(), 1);
        assert_eq!(h.counts[0].iter().sum::<u64>(), 4);
    }

    #[test]
    fn rejects_binning_mismatch() {
        let a = hist_from(&[0.5], 10);
        let b = {
            let t = Tensor::new(vec![1, 1], vec![0.5]);
            ActivationHistogram::build(&t, 0.0, 2.0, 20, DctMode::PerDimension).unwrap()
        };
        assert!(estimate_dct(&a, &b).is_err());
    }

    #[test]
    fn invalid_inputs_rejected() {
        let mut bi = base();
        bi.l = 0.0;
        assert!(client_bound(&bi).is_err());
        assert!(lr_from_theory(LrRole::Client, 1.0, 0.5, 10.0).is_err());
    }
}
