//! Message taxonomy for client/server exchanges and exact communication and
//! storage accounting against the closed-form cost model.
//!
//! The unit of size is the scalar parameter count of the payload, never
//! free-typed. A bytes view multiplies by the configured scalar width.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::Write;

/// The four training methods under comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    FslMc,
    FslOc,
    FslAn,
    CseFsl,
}

impl Method {
    pub fn uses_aux(self) -> bool {
        matches!(self, Method::FslAn | Method::CseFsl)
    }

    /// Baselines that send cut-layer gradients back downstream.
    pub fn downloads_cut_grads(self) -> bool {
        matches!(self, Method::FslMc | Method::FslOc)
    }

    /// Methods holding one server replica per client.
    pub fn per_client_server_replicas(self) -> bool {
        matches!(self, Method::FslMc | Method::FslAn)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::FslMc => "fsl_mc",
            Method::FslOc => "fsl_oc",
            Method::FslAn => "fsl_an",
            Method::CseFsl => "cse_fsl",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    SmashedUpload,
    CutGradDownload,
    ClientModelUpload,
    AuxModelUpload,
    ModelDownload,
    /// Label scalars riding alongside smashed uploads; tracked separately
    /// because the closed forms count smashed data only.
    LabelUpload,
}

pub const MESSAGE_KINDS: [MessageKind; 6] = [
    MessageKind::SmashedUpload,
    MessageKind::CutGradDownload,
    MessageKind::ClientModelUpload,
    MessageKind::AuxModelUpload,
    MessageKind::ModelDownload,
    MessageKind::LabelUpload,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    Client(usize),
    Server,
}

impl std::fmt::Display for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Endpoint::Client(id) => write!(f, "client{id}"),
            Endpoint::Server => write!(f, "server"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub time: f64,
    pub kind: MessageKind,
    pub sender: Endpoint,
    pub receiver: Endpoint,
    pub size_units: f64,
    pub epoch: usize,
}

/// Symbols of the closed-form cost model. `d_size` is the per-client
/// dataset size |D| (all clients hold equally sized shards).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// Scalars per smashed sample (product of the cut shape).
    pub q: f64,
    /// Client fraction of the full model, |x_c| / |w|.
    pub alpha: f64,
    /// Total model scalars |w| (client + server).
    pub w_size: f64,
    /// Auxiliary network scalars |a|.
    pub a_size: f64,
    /// Per-client dataset size |D|.
    pub d_size: f64,
    /// Number of participating clients n.
    pub n: f64,
    /// Upload period h (batches between smashed uploads).
    pub h: f64,
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        if self.q <= 0.0 || self.w_size <= 0.0 || self.d_size <= 0.0 || self.n < 1.0 || self.h < 1.0 {
            return Err(Error::InvalidConfig("cost model symbols must be positive".into()));
        }
        if !(0.0 < self.alpha && self.alpha < 1.0) {
            return Err(Error::InvalidConfig(format!("alpha {} outside (0,1)", self.alpha)));
        }
        Ok(())
    }

    /// Client-side model scalars, alpha * |w|.
    pub fn client_size(&self) -> f64 {
        self.alpha * self.w_size
    }
}

/// Closed-form total communication per global epoch, in scalar units.
pub fn analytic_comm(method: Method, cm: &CostModel) -> Result<f64> {
    cm.validate()?;
    Ok(match method {
        // per-batch smashed upload + cut-gradient download, model up/down
        Method::FslMc | Method::FslOc => 2.0 * cm.n * cm.q * cm.d_size + 2.0 * cm.n * cm.alpha * cm.w_size,
        Method::FslAn => cm.n * cm.q * cm.d_size + 2.0 * cm.n * cm.alpha * (cm.w_size + cm.a_size),
        Method::CseFsl => {
            (cm.n * cm.q / cm.h) * cm.d_size + 2.0 * cm.n * cm.alpha * (cm.w_size + cm.a_size)
        }
    })
}

/// Closed-form peak server storage, in scalar units.
pub fn analytic_storage(method: Method, cm: &CostModel) -> Result<f64> {
    cm.validate()?;
    Ok(match method {
        Method::FslMc => cm.n * cm.w_size,
        Method::FslAn => cm.n * (cm.w_size + cm.a_size),
        Method::CseFsl => cm.w_size + cm.a_size,
        // single replica, no auxiliary network
        Method::FslOc => cm.w_size,
    })
}

/// Append-only log of every message, with per-kind and per-epoch totals.
#[derive(Debug, Clone, Default)]
pub struct Ledger {
    records: Vec<Message>,
}

impl Ledger {
    pub fn new() -> Self {
        Ledger::default()
    }

    pub fn record(&mut self, msg: Message) {
        self.records.push(msg);
    }

    pub fn records(&self) -> &[Message] {
        &self.records
    }

    pub fn total(&self, kind: MessageKind) -> f64 {
        self.records.iter().filter(|m| m.kind == kind).map(|m| m.size_units).sum()
    }

    pub fn count(&self, kind: MessageKind) -> usize {
        self.records.iter().filter(|m| m.kind == kind).count()
    }

    /// Per-kind sums over one epoch window.
    pub fn epoch_total(&self, kind: MessageKind, epoch: usize) -> f64 {
        self.records
            .iter()
            .filter(|m| m.kind == kind && m.epoch == epoch)
            .map(|m| m.size_units)
            .sum()
    }

    /// Grand total excluding label payloads (the reconciliation convention).
    pub fn comm_total_excluding_labels(&self) -> f64 {
        MESSAGE_KINDS
            .iter()
            .filter(|&&k| k != MessageKind::LabelUpload)
            .map(|&k| self.total(k))
            .sum()
    }

    pub fn epoch_comm_excluding_labels(&self, epoch: usize) -> f64 {
        MESSAGE_KINDS
            .iter()
            .filter(|&&k| k != MessageKind::LabelUpload)
            .map(|&k| self.epoch_total(k, epoch))
            .sum()
    }

    /// CSV export: time, kind, sender, receiver, size_units.
    pub fn export_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "time,kind,sender,receiver,size_units")?;
        for m in &self.records {
            writeln!(
                w,
                "{:.6},{},{},{},{}",
                m.time,
                serde_json::to_value(m.kind).unwrap().as_str().unwrap(),
                m.sender,
                m.receiver,
                fmt_units(m.size_units)
            )?;
        }
        Ok(())
    }
}

fn fmt_units(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

/// Measured-vs-analytic reconciliation for one completed run.
#[derive(Debug, Clone, Serialize)]
pub struct ReconcileReport {
    pub method: Method,
    pub epochs: usize,
    pub measured: f64,
    pub analytic: f64,
    pub diff: f64,
    pub label_units: f64,
    pub per_kind: Vec<(MessageKind, f64)>,
}

/// Compares measured ledger totals (labels excluded by default) against the
/// closed form scaled to `epochs` global epochs.
pub fn reconcile(
    ledger: &Ledger,
    method: Method,
    cm: &CostModel,
    epochs: usize,
    include_labels: bool,
) -> Result<ReconcileReport> {
    let analytic = analytic_comm(method, cm)? * epochs as f64;
    let label_units = ledger.total(MessageKind::LabelUpload);
    let mut measured = ledger.comm_total_excluding_labels();
    if include_labels {
        measured += label_units;
    }
    let per_kind = MESSAGE_KINDS.iter().map(|&k| (k, ledger.total(k))).collect();
    Ok(ReconcileReport {
        method,
        epochs,
        measured,
        analytic,
        diff: measured - analytic,
        label_units,
        per_kind,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cm() -> CostModel {
        CostModel { q: 2.0, alpha: 0.5, w_size: 100.0, a_size: 10.0, d_size: 20.0, n: 5.0, h: 5.0 }
    }

    #[test]
    fn table_row_hand_evaluation() {
        // (5*2/5)*20 + 2*5*0.5*110 = 40 + 550 = 590
        assert_eq!(analytic_comm(Method::CseFsl, &cm()).unwrap(), 590.0);
    }

    #[test]
    fn h_one_collapses_to_fsl_an() {
        let mut c = cm();
        c.h = 1.0;
        assert_eq!(
            analytic_comm(Method::CseFsl, &c).unwrap(),
            analytic_comm(Method::FslAn, &c).unwrap()
        );
    }

    #[test]
    fn mc_first_term_doubles_an() {
        let mut c = cm();
        c.a_size = 0.0;
        let mc = analytic_comm(Method::FslMc, &c).unwrap();
        let an = analytic_comm(Method::FslAn, &c).unwrap();
        // smashed terms: 2nq|D| vs nq|D|; model terms equal with |a|=0
        assert_eq!(mc - an, c.n * c.q * c.d_size);
    }

    #[test]
    fn storage_hand_evaluation() {
        let mut c = cm();
        c.n = 10.0;
        assert_eq!(analytic_storage(Method::FslMc, &c).unwrap(), 1000.0);
    }

    #[test]
    fn cse_storage_independent_of_n() {
        let mut a = cm();
        let mut b = cm();
        a.n = 5.0;
        b.n = 500.0;
        assert_eq!(
            analytic_storage(Method::CseFsl, &a).unwrap(),
            analytic_storage(Method::CseFsl, &b).unwrap()
        );
    }

    #[test]
    fn single_client_an_storage_equals_cse() {
        let mut c = cm();
        c.n = 1.0;
        assert_eq!(
            analytic_storage(Method::FslAn, &c).unwrap(),
            analytic_storage(Method::CseFsl, &c).unwrap()
        );
    }

    #[test]
    fn cse_comm_strictly_decreasing_in_h() {
        let mut prev = f64::INFINITY;
        for h in [1.0, 2.0, 5.0, 10.0, 50.0] {
            let mut c = cm();
            c.h = h;
            let v = analytic_comm(Method::CseFsl, &c).unwrap();
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn empty_ledger_totals_zero() {
        let l = Ledger::new();
        for k in MESSAGE_KINDS {
            assert_eq!(l.total(k), 0.0);
        }
    }

    #[test]
    fn smashed_upload_units_are_b_times_q() {
        let mut l = Ledger::new();
        l.record(Message {
            time: 0.0,
            kind: MessageKind::SmashedUpload,
            sender: Endpoint::Client(0),
            receiver: Endpoint::Server,
            size_units: 50.0 * 2304.0,
            epoch: 0,
        });
        l.record(Message {
            time: 0.0,
            kind: MessageKind::LabelUpload,
            sender: Endpoint::Client(0),
            receiver: Endpoint::Server,
            size_units: 50.0,
            epoch: 0,
        });
        assert_eq!(l.total(MessageKind::SmashedUpload), 115_200.0);
        assert_eq!(l.total(MessageKind::LabelUpload), 50.0);
    }

    #[test]
    fn totals_order_insensitive() {
        let msgs: Vec<Message> = (0..5)
            .map(|i| Message {
                time: i as f64,
                kind: MessageKind::SmashedUpload,
                sender: Endpoint::Client(i),
                receiver: Endpoint::Server,
                size_units: (i + 1) as f64 * 10.0,
                epoch: 0,
            })
            .collect();
        let mut a = Ledger::new();
        let mut b = Ledger::new();
        for m in &msgs {
            a.record(*m);
        }
        for m in msgs.iter().rev() {
            b.record(*m);
        }
        assert_eq!(a.total(MessageKind::SmashedUpload), b.total(MessageKind::SmashedUpload));
    }

    #[test]
    fn reconcile_label_toggle_semantics() {
        let c = CostModel { q: 1.0, alpha: 0.5, w_size: 4.0, a_size: 0.0, d_size: 2.0, n: 1.0, h: 1.0 };
        let mut l = Ledger::new();
        // one epoch of FSL_AN at n=1: smashed 1*1*2=2, model up/down 2*1*0.5*4=4
        for (kind, units) in [
            (MessageKind::SmashedUpload, 2.0),
            (MessageKind::ClientModelUpload, 2.0),
            (MessageKind::ModelDownload, 2.0),
            (MessageKind::LabelUpload, 2.0),
        ] {
            l.record(Message {
                time: 0.0,
                kind,
                sender: Endpoint::Client(0),
                receiver: Endpoint::Server,
                size_units: units,
                epoch: 0,
            });
        }
        let off = reconcile(&l, Method::FslAn, &c, 1, false).unwrap();
        assert_eq!(off.diff, 0.0);
        let on = reconcile(&l, Method::FslAn, &c, 1, true).unwrap();
        assert_eq!(on.diff, on.label_units);
    }
}
