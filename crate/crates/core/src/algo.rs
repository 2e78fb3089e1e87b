//! Orchestration of the four training methods on the deterministic event
//! loop: per-batch local updates, periodic smashed uploads, event-triggered
//! server steps, and barrier aggregation, with every message metered.

use crate::data::{batches, sample_participants, ClientShard, Dataset, MiniBatch};
use crate::error::{Error, Result};
use crate::ledger::{CostModel, Endpoint, Ledger, Message, MessageKind, Method};
use crate::nn::{sgd_step, top1_accuracy, LrSchedule, ParamSet};
use crate::sched::{ClientProfile, DataQueue, Event, EventKind, EventQueue};
use crate::split::{
    backprop_to_cut, backward_client_from_cut, client_forward_cut, composite_logits,
    local_loss_and_grads, Batch, SmashedBatch, SplitArchitecture,
};
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Full description of one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub method: Method,
    /// Number of clients.
    pub n: usize,
    /// Participants sampled per round (K <= n).
    pub k: usize,
    /// Upload period in batches. Forced to 1 for the per-batch baselines.
    pub h: usize,
    /// Aggregation period in batches; None aggregates once per epoch.
    pub c: Option<usize>,
    /// Global rounds (one local epoch each).
    pub t_rounds: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    /// Optional separate server-side schedule; defaults to `lr`.
    pub server_lr: Option<LrSchedule>,
    /// Global-norm clip threshold; present iff method == FslOc.
    pub clip_threshold: Option<f64>,
    pub seed: u64,
    /// Evaluate replica 0 instead of the replica average.
    pub eval_replica_zero: bool,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.k == 0 || self.k > self.n {
            return Err(Error::InvalidConfig(format!(
                "participation k={} must satisfy 1 <= k <= n={}",
                self.k, self.n
            )));
        }
        if self.h == 0 {
            return Err(Error::InvalidConfig("field h: upload period must be >= 1".into()));
        }
        if self.method.downloads_cut_grads() && self.h != 1 {
            return Err(Error::InvalidConfig(
                "field h: per-batch baselines upload every batch (h = 1)".into(),
            ));
        }
        if self.c == Some(0) {
            return Err(Error::InvalidConfig("field c: aggregation period must be >= 1".into()));
        }
        if self.t_rounds == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("t_rounds and batch_size must be >= 1".into()));
        }
        match (self.method, self.clip_threshold) {
            (Method::FslOc, Some(th)) if th > 0.0 => {}
            (Method::FslOc, _) => {
                return Err(Error::InvalidConfig(
                    "field clip_threshold: required and positive for fsl_oc".into(),
                ))
            }
            (_, Some(_)) => {
                return Err(Error::InvalidConfig(
                    "field clip_threshold: only meaningful for fsl_oc".into(),
                ))
            }
            _ => {}
        }
        Ok(())
    }

    pub fn server_schedule(&self) -> &LrSchedule {
        self.server_lr.as_ref().unwrap_or(&self.lr)
    }
}

/// Server-side parameters: one shared model or one replica per client.
#[derive(Debug, Clone)]
pub enum ServerSide {
    Single(ParamSet),
    Replicas(Vec<ParamSet>),
}

impl ServerSide {
    fn for_client(&mut self, client_id: usize) -> &mut ParamSet {
        match self {
            ServerSide::Single(p) => p,
            ServerSide::Replicas(v) => &mut v[client_id],
        }
    }

    pub fn scalar_count(&self) -> usize {
        match self {
            ServerSide::Single(p) => p.scalar_count(),
            ServerSide::Replicas(v) => v.iter().map(|p| p.scalar_count()).sum(),
        }
    }

    /// Model used at inference: the shared model, the replica mean, or
    /// replica 0 when toggled.
    pub fn eval_params(&self, replica_zero: bool) -> ParamSet {
        match self {
            ServerSide::Single(p) => p.clone(),
            ServerSide::Replicas(v) if replica_zero => v[0].clone(),
            ServerSide::Replicas(v) => {
                let refs: Vec<&ParamSet> = v.iter().collect();
                ParamSet::mean(&refs)
            }
        }
    }
}

/// All mutable training state.
#[derive(Debug, Clone)]
pub struct WorldState {
    pub arch: SplitArchitecture,
    pub client_params: Vec<ParamSet>,
    pub aux_params: Vec<ParamSet>,
    pub server: ServerSide,
    pub round: usize,
}

impl WorldState {
    /// Fresh world: every client starts from the same broadcast init.
    pub fn init(arch: SplitArchitecture, cfg: &RunConfig) -> Result<WorldState> {
        arch.validate()?;
        cfg.validate()?;
        let client0 = crate::nn::init_params(&arch.client_stack, cfg.seed);
        let aux0 = crate::nn::init_params(&arch.aux_stack, cfg.seed.wrapping_add(1));
        let server0 = crate::nn::init_params(&arch.server_stack, cfg.seed.wrapping_add(2));
        let server = if cfg.method.per_client_server_replicas() {
            ServerSide::Replicas(vec![server0; cfg.n])
        } else {
            ServerSide::Single(server0)
        };
        Ok(WorldState {
            arch,
            client_params: vec![client0; cfg.n],
            aux_params: if cfg.method.uses_aux() {
                vec![aux0; cfg.n]
            } else {
                Vec::new()
            },
            server,
            round: 0,
        })
    }
}

/// FedAvg over parameter sets. Uniform 1/k by default.
pub fn aggregate(snapshots: &[&ParamSet], weights: Option<&[f64]>) -> Result<ParamSet> {
    if snapshots.is_empty() {
        return Err(Error::Protocol("aggregate over zero snapshots".into()));
    }
    let count = snapshots[0].scalar_count();
    for s in snapshots {
        if s.scalar_count() != count || s.layers.len() != snapshots[0].layers.len() {
            return Err(Error::Protocol("aggregate over incongruent parameter sets".into()));
        }
    }
    match weights {
        None => Ok(ParamSet::mean(snapshots)),
        Some(w) => {
            if w.len() != snapshots.len() {
                return Err(Error::Protocol("weights/snapshots length mismatch".into()));
            }
            let sum: f64 = w.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Protocol(format!("weights sum to {sum}, expected 1")));
            }
            Ok(ParamSet::weighted_mean(snapshots, w))
        }
    }
}

/// Per-round observables.
#[derive(Debug, Clone, Serialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub train_loss_c: f64,
    pub train_loss_s: f64,
    pub test_top1: f64,
    pub test_loss: f64,
    pub comm_units: f64,
    pub comm_cumulative_units: f64,
    pub storage_units: f64,
    pub mean_client_grad_sq: f64,
    pub wall_sim_time: f64,
}

/// Compact trace record of one processed event.
#[derive(Debug, Clone, Serialize)]
pub struct TraceEvent {
    pub time: f64,
    pub round: usize,
    pub kind: String,
    pub client_id: Option<usize>,
}

#[derive(Debug)]
pub struct RunTrace {
    pub metrics: Vec<RoundMetrics>,
    pub events: Vec<TraceEvent>,
    pub ledger: Ledger,
    pub peak_storage_units: usize,
    pub final_world: WorldState,
    pub cost_model: CostModel,
}

impl RunTrace {
    pub fn final_accuracy(&self) -> f64 {
        self.metrics.last().map(|m| m.test_top1).unwrap_or(0.0)
    }

    /// JSON-lines event export.
    pub fn export_events(&self, w: &mut impl Write) -> std::io::Result<()> {
        for ev in &self.events {
            writeln!(w, "{}", serde_json::to_string(ev).expect("serializable"))?;
        }
        Ok(())
    }
}

/// Fixed-order metrics CSV.
pub fn write_metrics_csv(metrics: &[RoundMetrics], w: &mut impl Write) -> std::io::Result<()> {
    writeln!(
        w,
        "round,comm_cumulative_units,storage_units,train_loss_c,train_loss_s,test_top1,wall_sim_time"
    )?;
    for m in metrics {
        writeln!(
            w,
            "{},{},{},{:.9},{:.9},{:.6},{:.6}",
            m.round,
            m.comm_cumulative_units,
            m.storage_units,
            m.train_loss_c,
            m.train_loss_s,
            m.test_top1,
            m.wall_sim_time
        )?;
    }
    Ok(())
}

// Per-client bookkeeping inside one round.
struct ClientRoundState {
    batches: Vec<MiniBatch>,
    /// Completed batches this round (1-indexed after increment).
    done: usize,
    /// Cached forward pass awaiting a cut-gradient download (baselines).
    pending: Option<(crate::nn::Cache, usize)>,
    uploads_sent: usize,
    participating: bool,
}

/// Peak-tracking storage meter for the server side.
struct StorageMeter {
    resident: usize,
    peak: usize,
}

impl StorageMeter {
    fn new(base: usize) -> Self {
        StorageMeter { resident: base, peak: base }
    }
    fn acquire(&mut self, units: usize) {
        self.resident += units;
        self.peak = self.peak.max(self.resident);
    }
    fn release(&mut self, units: usize) {
        debug_assert!(self.resident >= units);
        self.resident -= units;
    }
}

/// Aggregation buffer on the server. The single-model methods stream
/// arrivals into a running sum; the replica methods collect snapshots.
enum AggBuffer {
    Stream { client: Option<ParamSet>, aux: Option<ParamSet>, count: usize },
    Collect { client: Vec<ParamSet>, aux: Vec<ParamSet> },
}

/// Runs the configured method for `t_rounds` global rounds.
///
/// Each round is one local epoch per participating client, driven by the
/// event queue: batch-done events trigger local updates and uploads, smashed
/// arrivals trigger server steps, and a barrier at each aggregation point
/// averages the uploaded client (and auxiliary) models.
pub fn run(
    world: &mut WorldState,
    cfg: &RunConfig,
    shards: &[ClientShard],
    train: &Dataset,
    test: &Dataset,
    profiles: &mut [ClientProfile],
) -> Result<RunTrace> {
    cfg.validate()?;
    world.arch.validate()?;
    if shards.len() != cfg.n || profiles.len() != cfg.n {
        return Err(Error::InvalidConfig(format!(
            "expected {} shards and profiles, got {} and {}",
            cfg.n,
            shards.len(),
            profiles.len()
        )));
    }

    let arch = world.arch.clone();
    let use_aux = cfg.method.uses_aux();
    let client_units = arch.client_params();
    let aux_units = arch.aux_params();
    let server_units = arch.server_params();
    let w_size = client_units + server_units;
    let alpha = client_units as f64 / w_size as f64;
    // Aux traffic is metered at alpha * |a| per transfer: the closed forms
    // apply the client fraction to the model and auxiliary sizes together.
    let aux_wire_units = alpha * aux_units as f64;

    let mut ledger = Ledger::new();
    let mut events = Vec::new();
    let mut metrics = Vec::new();
    let mut queue = EventQueue::new();
    let mut data_queue = DataQueue::new();
    let mut comm_cumulative = 0.0;

    // Base residency: server model(s), never freed.
    let mut meter = StorageMeter::new(world.server.scalar_count());

    for t in 0..cfg.t_rounds {
        world.round = t;
        let lr_c = cfg.lr.lr(t);
        let lr_s = cfg.server_schedule().lr(t);
        let participants: Vec<usize> = if cfg.k == cfg.n {
            (0..cfg.n).collect()
        } else {
            sample_participants(cfg.n, cfg.k, cfg.seed, t)
        };

        let mut clients: Vec<ClientRoundState> = (0..cfg.n)
            .map(|i| {
                let participating = participants.contains(&i);
                ClientRoundState {
                    batches: if participating {
                        batches(&shards[i], train, cfg.batch_size, epoch_seed(cfg.seed, t, i))
                    } else {
                        Vec::new()
                    },
                    done: 0,
                    pending: None,
                    uploads_sent: 0,
                    participating,
                }
            })
            .collect();

        for &i in &participants {
            if clients[i].batches.is_empty() {
                return Err(Error::Data(format!(
                    "client {i} has no full batches (shard {} samples, batch size {})",
                    shards[i].indices.len(),
                    cfg.batch_size
                )));
            }
        }
        let batch_counts: Vec<usize> =
            participants.iter().map(|&i| clients[i].batches.len()).collect();
        if let Some(c) = cfg.c {
            if batch_counts.iter().any(|&b| b != batch_counts[0]) || batch_counts[0] % c != 0 {
                return Err(Error::InvalidConfig(
                    "field c: mid-epoch aggregation requires equal per-client batch counts divisible by c"
                        .into(),
                ));
            }
        }
        let aggs_this_round = match cfg.c {
            Some(c) => batch_counts[0] / c,
            None => 1,
        };

        let mut agg_buffer = new_agg_buffer(cfg.method);
        let mut aggs_done = 0usize;
        let mut loss_c_sum = 0.0;
        let mut loss_c_count = 0usize;
        let mut loss_s_sum = 0.0;
        let mut loss_s_count = 0usize;
        let mut grad_sq_sum = 0.0;
        let mut grad_sq_count = 0usize;

        // Kick off the round: every participant starts its first batch.
        let start = queue.now();
        for &i in &participants {
            let delay = profiles[i].draw_compute_delay();
            queue.push(start + delay, EventKind::ClientBatchDone { client_id: i, batch_index: 0 })?;
        }

        while let Some(Event { time, kind, .. }) = queue.pop()? {
            events.push(TraceEvent {
                time,
                round: t,
                kind: kind_name(&kind).to_string(),
                client_id: kind_client(&kind),
            });
            match kind {
                EventKind::ClientBatchDone { client_id, batch_index } => {
                    let seed = batch_seed(cfg.seed, t, client_id, batch_index);
                    let mb = clients[client_id].batches[batch_index].clone();
                    let batch = Batch {
                        features: mb.features,
                        labels: mb.labels,
                        batch_index,
                    };
                    if use_aux {
                        // Local update from the auxiliary head; the same
                        // forward's cut activations are the smashed payload.
                        let upload_due = (batch_index + 1) % cfg.h == 0;
                        if upload_due {
                            let smashed = client_forward_cut(
                                &arch,
                                &world.client_params[client_id],
                                &batch,
                                client_id,
                                t,
                                true,
                                seed,
                            )?;
                            send_smashed(
                                &mut queue,
                                &mut ledger,
                                &mut profiles[client_id],
                                smashed,
                                time,
                                t,
                            )?;
                        }
                        let (loss, cg, ag) = local_loss_and_grads(
                            &arch,
                            &world.client_params[client_id],
                            &world.aux_params[client_id],
                            &batch,
                            seed,
                        )?;
                        loss_c_sum += loss;
                        loss_c_count += 1;
                        grad_sq_sum += cg.sq_norm();
                        grad_sq_count += 1;
                        sgd_step(&mut world.client_params[client_id], &cg, lr_c)?;
                        sgd_step(&mut world.aux_params[client_id], &ag, lr_c)?;
                        clients[client_id].done += 1;
                        advance_client(
                            &mut queue, &mut ledger, &mut clients, &mut profiles[client_id],
                            world, cfg, client_id, time, t, client_units, aux_wire_units,
                        )?;
                    } else {
                        // Baselines: upload smashed, stall until the cut
                        // gradient returns.
                        let (cache, smashed) = crate::split::client_forward_cut_cached(
                            &arch,
                            &world.client_params[client_id],
                            &batch,
                            client_id,
                            t,
                            seed,
                        )?;
                        clients[client_id].pending = Some((cache, batch_index));
                        send_smashed(
                            &mut queue,
                            &mut ledger,
                            &mut profiles[client_id],
                            smashed,
                            time,
                            t,
                        )?;
                    }
                }
                EventKind::SmashedArrival { smashed } => {
                    let client_id = smashed.client_id;
                    if cfg.method.downloads_cut_grads() {
                        // One server step per arrival, then ship the cut
                        // gradients back downstream.
                        let server = world.server.for_client(client_id);
                        let (loss, mut grads, cut_grad) = backprop_to_cut(&arch, server, &smashed)?;
                        if let Some(th) = cfg.clip_threshold {
                            grads.clip_global_norm(th);
                        }
                        sgd_step(server, &grads, lr_s)?;
                        loss_s_sum += loss;
                        loss_s_count += 1;
                        let down = profiles[client_id].downlink_latency;
                        ledger.record(Message {
                            time,
                            kind: MessageKind::CutGradDownload,
                            sender: Endpoint::Server,
                            receiver: Endpoint::Client(client_id),
                            size_units: cut_grad.scalar_count() as f64,
                            epoch: t,
                        });
                        queue.push(
                            time + down,
                            EventKind::CutGradArrival {
                                client_id,
                                batch_index: smashed.batch_index,
                                cut_grad,
                            },
                        )?;
                    } else {
                        match &mut world.server {
                            ServerSide::Single(_) => {
                                // Event-triggered: enqueue, then drain the
                                // FIFO with one step per element.
                                data_queue.enqueue(smashed);
                                let server = world.server.for_client(client_id);
                                data_queue.drain(|sb| {
                                    let loss =
                                        crate::split::server_loss_step(&arch, server, sb, lr_s)?;
                                    loss_s_sum += loss;
                                    loss_s_count += 1;
                                    Ok(())
                                })?;
                            }
                            ServerSide::Replicas(v) => {
                                let loss = crate::split::server_loss_step(
                                    &arch,
                                    &mut v[client_id],
                                    &smashed,
                                    lr_s,
                                )?;
                                loss_s_sum += loss;
                                loss_s_count += 1;
                            }
                        }
                    }
                }
                EventKind::CutGradArrival { client_id, batch_index, cut_grad } => {
                    let (cache, cached_index) =
                        clients[client_id].pending.take().ok_or_else(|| {
                            Error::Protocol(format!(
                                "client {client_id} received a cut gradient with no pending batch"
                            ))
                        })?;
                    if cached_index != batch_index {
                        return Err(Error::Protocol(format!(
                            "cut gradient for batch {batch_index} but batch {cached_index} pending"
                        )));
                    }
                    let mut cg = backward_client_from_cut(
                        &arch,
                        &world.client_params[client_id],
                        &cache,
                        &cut_grad,
                    )?;
                    if let Some(th) = cfg.clip_threshold {
                        cg.clip_global_norm(th);
                    }
                    grad_sq_sum += cg.sq_norm();
                    grad_sq_count += 1;
                    sgd_step(&mut world.client_params[client_id], &cg, lr_c)?;
                    clients[client_id].done += 1;
                    advance_client(
                        &mut queue, &mut ledger, &mut clients, &mut profiles[client_id],
                        world, cfg, client_id, time, t, client_units, aux_wire_units,
                    )?;
                }
                EventKind::ModelUploadArrival { client_id } => {
                    receive_upload(
                        &mut agg_buffer,
                        &mut meter,
                        world,
                        client_id,
                        client_units,
                        aux_units,
                        use_aux,
                    );
                    let expected = participants.len();
                    if agg_count(&agg_buffer) == expected {
                        let (agg_client, agg_aux) =
                            finish_aggregation(&mut agg_buffer, &mut meter, client_units, aux_units, expected)?;
                        aggs_done += 1;
                        for &i in &participants {
                            let down = profiles[i].downlink_latency;
                            ledger.record(Message {
                                time,
                                kind: MessageKind::ModelDownload,
                                sender: Endpoint::Server,
                                receiver: Endpoint::Client(i),
                                size_units: client_units as f64 + if use_aux { aux_wire_units } else { 0.0 },
                                epoch: t,
                            });
                            queue.push(time + down, EventKind::ModelDownloadArrival { client_id: i })?;
                            world.client_params[i] = agg_client.clone();
                            if use_aux {
                                world.aux_params[i] =
                                    agg_aux.clone().expect("aux aggregate present");
                            }
                        }
                        agg_buffer = new_agg_buffer(cfg.method);
                    }
                }
                EventKind::ModelDownloadArrival { client_id } => {
                    // Barrier release: resume local training if batches remain.
                    let st = &mut clients[client_id];
                    if st.participating && st.done < st.batches.len() {
                        let delay = profiles[client_id].draw_compute_delay();
                        queue.push(
                            time + delay,
                            EventKind::ClientBatchDone { client_id, batch_index: st.done },
                        )?;
                    }
                }
            }
        }

        if aggs_done != aggs_this_round {
            return Err(Error::Internal(format!(
                "round {t} completed {aggs_done} aggregations, expected {aggs_this_round}"
            )));
        }

        // Round metrics on the post-aggregation composite model.
        let eval_client = &world.client_params[participants[0]];
        let eval_server = world.server.eval_params(cfg.eval_replica_zero);
        let logits = composite_logits(&arch, eval_client, &eval_server, &test.features)?;
        let test_top1 = top1_accuracy(&logits, &test.labels);
        let test_loss = crate::nn::softmax_xent(&logits, &test.labels)?.0;
        let comm_round = ledger.epoch_comm_excluding_labels(t);
        comm_cumulative += comm_round;
        metrics.push(RoundMetrics {
            round: t,
            train_loss_c: if loss_c_count > 0 { loss_c_sum / loss_c_count as f64 } else { loss_s_sum / loss_s_count.max(1) as f64 },
            train_loss_s: if loss_s_count > 0 { loss_s_sum / loss_s_count as f64 } else { 0.0 },
            test_top1,
            test_loss,
            comm_units: comm_round,
            comm_cumulative_units: comm_cumulative,
            storage_units: meter.peak as f64,
            mean_client_grad_sq: if grad_sq_count > 0 { grad_sq_sum / grad_sq_count as f64 } else { 0.0 },
            wall_sim_time: queue.now(),
        });
    }

    let d_size = shards[0].indices.len() - shards[0].indices.len() % cfg.batch_size;
    let cost_model = CostModel {
        q: arch.cut_size() as f64,
        alpha,
        w_size: w_size as f64,
        a_size: aux_units as f64,
        d_size: d_size as f64,
        n: cfg.k as f64,
        h: cfg.h as f64,
    };

    Ok(RunTrace {
        metrics,
        events,
        ledger,
        peak_storage_units: meter.peak,
        final_world: world.clone(),
        cost_model,
    })
}

fn new_agg_buffer(method: Method) -> AggBuffer {
    if method.per_client_server_replicas() {
        AggBuffer::Collect { client: Vec::new(), aux: Vec::new() }
    } else {
        AggBuffer::Stream { client: None, aux: None, count: 0 }
    }
}

fn agg_count(buf: &AggBuffer) -> usize {
    match buf {
        AggBuffer::Stream { count, .. } => *count,
        AggBuffer::Collect { client, .. } => client.len(),
    }
}

fn receive_upload(
    buf: &mut AggBuffer,
    meter: &mut StorageMeter,
    world: &WorldState,
    client_id: usize,
    client_units: usize,
    aux_units: usize,
    use_aux: bool,
) {
    let cp = world.client_params[client_id].clone();
    match buf {
        AggBuffer::Stream { client, aux, count } => {
            // Running sum: only one accumulator copy ever resident.
            match client {
                None => {
                    meter.acquire(client_units);
                    *client = Some(cp);
                }
                Some(acc) => acc.zip_apply(&cp, |a, b| *a += b),
            }
            if use_aux {
                let ap = world.aux_params[client_id].clone();
                match aux {
                    None => {
                        meter.acquire(aux_units);
                        *aux = Some(ap);
                    }
                    Some(acc) => acc.zip_apply(&ap, |a, b| *a += b),
                }
            }
            *count += 1;
        }
        AggBuffer::Collect { client, aux } => {
            meter.acquire(client_units);
            client.push(cp);
            if use_aux {
                meter.acquire(aux_units);
                aux.push(world.aux_params[client_id].clone());
            }
        }
    }
}

fn finish_aggregation(
    buf: &mut AggBuffer,
    meter: &mut StorageMeter,
    client_units: usize,
    aux_units: usize,
    expected: usize,
) -> Result<(ParamSet, Option<ParamSet>)> {
    let out = match buf {
        AggBuffer::Stream { client, aux, count } => {
            let mut c = client.take().ok_or_else(|| Error::Internal("empty aggregation".into()))?;
            let inv = 1.0 / *count as f64;
            c.for_each_mut(|v| *v *= inv);
            meter.release(client_units);
            let a = aux.take().map(|mut a| {
                a.for_each_mut(|v| *v *= inv);
                meter.release(aux_units);
                a
            });
            (c, a)
        }
        AggBuffer::Collect { client, aux } => {
            let refs: Vec<&ParamSet> = client.iter().collect();
            let c = aggregate(&refs, None)?;
            meter.release(client_units * expected);
            let a = if aux.is_empty() {
                None
            } else {
                let refs: Vec<&ParamSet> = aux.iter().collect();
                meter.release(aux_units * expected);
                Some(aggregate(&refs, None)?)
            };
            (c, a)
        }
    };
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn advance_client(
    queue: &mut EventQueue,
    ledger: &mut Ledger,
    clients: &mut [ClientRoundState],
    profile: &mut ClientProfile,
    world: &WorldState,
    cfg: &RunConfig,
    client_id: usize,
    time: f64,
    round: usize,
    client_units: usize,
    aux_wire_units: f64,
) -> Result<()> {
    let st = &mut clients[client_id];
    let done = st.done;
    let total = st.batches.len();
    let at_agg_point = match cfg.c {
        Some(c) => done % c == 0,
        None => done == total,
    };
    if at_agg_point {
        // Pause at the barrier: upload model (and auxiliary), resume on the
        // aggregated download.
        ledger.record(Message {
            time,
            kind: MessageKind::ClientModelUpload,
            sender: Endpoint::Client(client_id),
            receiver: Endpoint::Server,
            size_units: client_units as f64,
            epoch: round,
        });
        if cfg.method.uses_aux() {
            ledger.record(Message {
                time,
                kind: MessageKind::AuxModelUpload,
                sender: Endpoint::Client(client_id),
                receiver: Endpoint::Server,
                size_units: aux_wire_units,
                epoch: round,
            });
        }
        st.uploads_sent += 1;
        let up = profile.uplink_latency;
        queue.push(time + up, EventKind::ModelUploadArrival { client_id })?;
    } else if done < total {
        let delay = profile.draw_compute_delay();
        queue.push(time + delay, EventKind::ClientBatchDone { client_id, batch_index: done })?;
    }
    let _ = world;
    Ok(())
}

fn send_smashed(
    queue: &mut EventQueue,
    ledger: &mut Ledger,
    profile: &mut ClientProfile,
    smashed: SmashedBatch,
    time: f64,
    round: usize,
) -> Result<()> {
    let client_id = smashed.client_id;
    ledger.record(Message {
        time,
        kind: MessageKind::SmashedUpload,
        sender: Endpoint::Client(client_id),
        receiver: Endpoint::Server,
        size_units: smashed.payload_size() as f64,
        epoch: round,
    });
    ledger.record(Message {
        time,
        kind: MessageKind::LabelUpload,
        sender: Endpoint::Client(client_id),
        receiver: Endpoint::Server,
        size_units: smashed.batch_size() as f64,
        epoch: round,
    });
    queue.push(time + profile.uplink_latency, EventKind::SmashedArrival { smashed })?;
    Ok(())
}

/// Seed for one client's batch shuffle in one round; public so trajectory
/// oracles can replay the exact batch order.
pub fn epoch_seed(seed: u64, round: usize, client_id: usize) -> u64 {
    seed.wrapping_add((round as u64).wrapping_mul(0x9E37_79B9))
        .wrapping_add((client_id as u64).wrapping_mul(0x85EB_CA6B))
}

fn batch_seed(seed: u64, round: usize, client_id: usize, batch_index: usize) -> u64 {
    seed ^ ((round as u64).wrapping_mul(0xA076_1D64_78BD_642F))
        ^ ((client_id as u64 + 1).wrapping_mul(0xE703_7ED1_A0B4_28DB))
        ^ ((batch_index as u64 + 1).wrapping_mul(0x8EBC_6AF0_9C88_C6E3))
}

fn kind_name(kind: &EventKind) -> &'static str {
    match kind {
        EventKind::ClientBatchDone { .. } => "client_batch_done",
        EventKind::SmashedArrival { .. } => "smashed_arrival",
        EventKind::CutGradArrival { .. } => "cut_grad_arrival",
        EventKind::ModelUploadArrival { .. } => "model_upload_arrival",
        EventKind::ModelDownloadArrival { .. } => "model_download_arrival",
    }
}

fn kind_client(kind: &EventKind) -> Option<usize> {
    Some(match kind {
        EventKind::ClientBatchDone { client_id, .. } => *client_id,
        EventKind::SmashedArrival { smashed } => smashed.client_id,
        EventKind::CutGradArrival { client_id, .. } => *client_id,
        EventKind::ModelUploadArrival { client_id } => *client_id,
        EventKind::ModelDownloadArrival { client_id } => *client_id,
    })
}

/// Checkpoint of a world at a round boundary.
pub fn save_world(world: &WorldState, w: &mut impl Write) -> Result<()> {
    let doc = serde_json::json!({
        "round": world.round,
        "client_params": world.client_params.iter().map(|p| p.to_flat()).collect::<Vec<_>>(),
        "aux_params": world.aux_params.iter().map(|p| p.to_flat()).collect::<Vec<_>>(),
        "server": match &world.server {
            ServerSide::Single(p) => serde_json::json!({"single": p.to_flat()}),
            ServerSide::Replicas(v) => serde_json::json!({"replicas": v.iter().map(|p| p.to_flat()).collect::<Vec<_>>()}),
        },
    });
    serde_json::to_writer(w, &doc).map_err(|e| Error::Internal(e.to_string()))?;
    Ok(())
}

/// Restores flat checkpoint parameters into a congruent world.
pub fn load_world(world: &mut WorldState, doc: &serde_json::Value) -> Result<()> {
    let round = doc["round"]
        .as_u64()
        .ok_or_else(|| Error::Data("checkpoint missing round".into()))? as usize;
    let restore = |p: &mut ParamSet, flat: &serde_json::Value| -> Result<()> {
        let vals: Vec<f64> = flat
            .as_array()
            .ok_or_else(|| Error::Data("checkpoint params not an array".into()))?
            .iter()
            .map(|v| v.as_f64().unwrap_or(f64::NAN))
            .collect();
        p.load_flat(&vals)
    };
    for (i, p) in world.client_params.iter_mut().enumerate() {
        restore(p, &doc["client_params"][i])?;
    }
    for (i, p) in world.aux_params.iter_mut().enumerate() {
        restore(p, &doc["aux_params"][i])?;
    }
    match &mut world.server {
        ServerSide::Single(p) => restore(p, &doc["server"]["single"])?,
        ServerSide::Replicas(v) => {
            for (i, p) in v.iter_mut().enumerate() {
                restore(p, &doc["server"]["replicas"][i])?;
            }
        }
    }
    world.round = round;
    Ok(())
}


#[cfg(test)]
mod json_precision {
    // Guards the float_roundtrip feature: checkpoints must restore params
    // bit-exactly.
    #[test]
    fn json_f64_roundtrip_precision() {
        let v: Vec<f64> = vec![0.1, -0.633418004374752, 1.0 / 3.0, 1e-17, 123456.789012345678];
        let j = serde_json::json!(v);
        let s = serde_json::to_string(&j).unwrap();
        let back: Vec<f64> = serde_json::from_str(&s).unwrap();
        assert_eq!(v, back);
    }
}
