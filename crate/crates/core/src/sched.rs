//! Deterministic discrete-event machinery: a total-ordered event queue,
//! per-client latency profiles, and the server-side FIFO of pending
//! smashed batches.

use crate::error::{Error, Result};
use crate::split::SmashedBatch;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

#[derive(Debug, Clone)]
pub enum EventKind {
    /// Client finished computing a local batch.
    ClientBatchDone { client_id: usize, batch_index: usize },
    /// Smashed activations arrived at the server.
    SmashedArrival { smashed: SmashedBatch },
    /// Cut gradients arrived back at a client.
    CutGradArrival { client_id: usize, batch_index: usize, cut_grad: crate::tensor::Tensor },
    /// Client's model (and auxiliary) upload landed at the server.
    ModelUploadArrival { client_id: usize },
    /// Aggregated model download landed at a client.
    ModelDownloadArrival { client_id: usize },
}

#[derive(Debug, Clone)]
pub struct Event {
    pub time: f64,
    pub seq: u64,
    pub kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.seq == other.seq
    }
}

impl Eq for Event {}

impl Ord for Event {
    // BinaryHeap is a max-heap; invert so the earliest (time, seq) pops first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Event queue with a strict no-time-regression guarantee: popping an event
/// earlier than the last popped time is a fatal internal error.
#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<Event>,
    next_seq: u64,
    last_popped: f64,
}

impl EventQueue {
    pub fn new() -> Self {
        EventQueue { heap: BinaryHeap::new(), next_seq: 0, last_popped: f64::NEG_INFINITY }
    }

    pub fn push(&mut self, time: f64, kind: EventKind) -> Result<()> {
        if !time.is_finite() {
            return Err(Error::Internal(format!("non-finite event time {time}")));
        }
        if time < self.last_popped {
            return Err(Error::Internal(format!(
                "event scheduled at {time} before current clock {}",
                self.last_popped
            )));
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Event { time, seq, kind });
        Ok(())
    }

    /// `None` means the run is complete (quiescent queue).
    pub fn pop(&mut self) -> Result<Option<Event>> {
        match self.heap.pop() {
            None => Ok(None),
            Some(ev) => {
                if ev.time < self.last_popped {
                    return Err(Error::Internal(format!(
                        "time regression: popped {} after {}",
                        ev.time, self.last_popped
                    )));
                }
                self.last_popped = ev.time;
                Ok(Some(ev))
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn now(&self) -> f64 {
        if self.last_popped == f64::NEG_INFINITY {
            0.0
        } else {
            self.last_popped
        }
    }
}

/// How per-batch compute delays are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DelayModel {
    Fixed { value: f64 },
    Uniform { lo: f64, hi: f64 },
    /// Parameterized by the underlying normal's mu and sigma.
    LogNormal { mu: f64, sigma: f64 },
}

impl DelayModel {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            DelayModel::Fixed { value } => value >= 0.0 && value.is_finite(),
            DelayModel::Uniform { lo, hi } => lo >= 0.0 && hi >= lo && hi.is_finite(),
            DelayModel::LogNormal { sigma, mu } => sigma >= 0.0 && mu.is_finite() && sigma.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid delay model {self:?}")))
        }
    }
}

/// Latency fingerprint of one client. Draws are replayable: the stream is a
/// pure function of (seed, client id) and draw order.
#[derive(Debug, Clone)]
pub struct ClientProfile {
    pub client_id: usize,
    pub compute_delay: DelayModel,
    pub uplink_latency: f64,
    pub downlink_latency: f64,
    rng: ChaCha20Rng,
}

impl ClientProfile {
    pub fn new(
        client_id: usize,
        compute_delay: DelayModel,
        uplink_latency: f64,
        downlink_latency: f64,
        seed: u64,
    ) -> Result<Self> {
        compute_delay.validate()?;
        if uplink_latency < 0.0 || downlink_latency < 0.0 {
            return Err(Error::InvalidConfig("negative link latency".into()));
        }
        let stream = seed ^ ((client_id as u64 + 1).wrapping_mul(0xB5AD_4ECE_DA1C_E2A9));
        Ok(ClientProfile {
            client_id,
            compute_delay,
            uplink_latency,
            downlink_latency,
            rng: ChaCha20Rng::seed_from_u64(stream),
        })
    }

    /// Next per-batch compute delay draw.
    pub fn draw_compute_delay(&mut self) -> f64 {
        match self.compute_delay {
            DelayModel::Fixed { value } => value,
            DelayModel::Uniform { lo, hi } => {
                if hi > lo {
                    self.rng.gen_range(lo..hi)
                } else {
                    lo
                }
            }
            DelayModel::LogNormal { mu, sigma } => {
                if sigma == 0.0 {
                    mu.exp()
                } else {
                    LogNormal::new(mu, sigma).expect("validated").sample(&mut self.rng)
                }
            }
        }
    }
}

/// FIFO of smashed batches awaiting server processing. Ordering is strictly
/// arrival order; draining applies the supplied step to each batch in turn.
#[derive(Debug, Default)]
pub struct DataQueue {
    queue: VecDeque<SmashedBatch>,
}

impl DataQueue {
    pub fn new() -> Self {
        DataQueue::default()
    }

    pub fn enqueue(&mut self, smashed: SmashedBatch) {
        self.queue.push_back(smashed);
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    /// Pops and processes every queued batch in FIFO order, returning how
    /// many were consumed. Stops with the error if the step fails.
    pub fn drain(
        &mut self,
        mut server_step: impl FnMut(&SmashedBatch) -> Result<()>,
    ) -> Result<usize> {
        let mut count = 0;
        while let Some(batch) = self.queue.pop_front() {
            server_step(&batch)?;
            count += 1;
        }
        Ok(count)
    }
}
