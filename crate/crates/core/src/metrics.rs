//! Lightweighting error quantities, FLOPs and byte accounting, bound-term
//! running sums and the per-round CSV record.

use std::io::Write;

use crate::nn::{DenseNetwork, FeatureModel, Matrix};
use crate::pruning::SparseEmbedding;
use crate::{Error, Result};

/// Mean over rows of the squared row-wise Euclidean distance.
pub fn mean_row_sq_error(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::Shape(format!(
            "cannot compare {}x{} with {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    if a.rows() == 0 {
        return Ok(0.0);
    }
    let total: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(total / a.rows() as f64)
}

/// Communication lightweighting error: `E||h - h_hat||^2` over rows.
pub fn compute_omega(h_dense: &Matrix, h_sparse: &SparseEmbedding) -> Result<f64> {
    mean_row_sq_error(h_dense, &h_sparse.to_dense())
}

/// Computation lightweighting error: `E||h(theta) - h(theta_hat)||^2` on a
/// probe set, `shadow` holding the pre-prune parameters. The shadow is
/// evaluated with every neuron live regardless of its stored masks.
pub fn compute_psi(shadow: &DenseNetwork, live: &FeatureModel, probe: &Matrix) -> Result<f64> {
    let dense = shadow.unmasked().forward(probe)?;
    let pruned = live.forward(probe)?;
    mean_row_sq_error(&dense, &pruned)
}

/// Multiply-add FLOPs of one forward pass for one sample, counting only live
/// inputs and live outputs of every layer.
pub fn flops_estimate(model: &FeatureModel) -> u64 {
    let mut live_in = model.in_dim() as u64;
    let mut total = 0;
    for layer in &model.layers {
        let live_out = layer.live_neurons() as u64;
        total += 2 * live_in * live_out;
        live_in = live_out;
    }
    total
}

/// One row of metrics.csv plus diagnostics that are kept off the CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub round: usize,
    /// Mean training loss over the round's local iterations.
    pub loss: f64,
    pub test_acc: f64,
    pub psi: Vec<f64>,
    pub omega: Vec<f64>,
    pub uplink_bytes: Vec<u64>,
    pub flops: Vec<u64>,
    pub s_psi: f64,
    pub s_omega: f64,
    pub sum_alpha: f64,
    pub sum_beta: f64,
    /// Mean squared row norm of each client's dense embedding at exchange.
    pub embedding_norm_sq: Vec<f64>,
    /// Squared parameter norm of each feature model at round end.
    pub param_norm_sq: Vec<f64>,
}

impl MetricsRecord {
    pub fn clients(&self) -> usize {
        self.psi.len()
    }
}

/// Running sums of the lightweighting errors across rounds.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BoundTerms {
    pub round: usize,
    pub s_psi: f64,
    pub s_omega: f64,
    pub sum_alpha: f64,
    pub sum_beta: f64,
}

#[derive(Debug, Clone, Default)]
pub struct BoundTracker {
    s_psi: f64,
    s_omega: f64,
}

impl BoundTracker {
    /// Folds in one round's per-client errors and returns the row for it.
    pub fn push(&mut self, round: usize, psi: &[f64], omega: &[f64], alpha: &[f64], beta: &[f64]) -> BoundTerms {
        self.s_psi += psi.iter().sum::<f64>();
        self.s_omega += omega.iter().sum::<f64>();
        BoundTerms {
            round,
            s_psi: self.s_psi,
            s_omega: self.s_omega,
            sum_alpha: alpha.iter().sum(),
            sum_beta: beta.iter().sum(),
        }
    }
}

/// Recomputes the running-sum table from a record stream in round order.
pub fn bound_terms(records: &[MetricsRecord]) -> Result<Vec<BoundTerms>> {
    let mut tracker = BoundTracker::default();
    let mut out = Vec::with_capacity(records.len());
    let mut last = None;
    for rec in records {
        if last.is_some_and(|r| rec.round <= r) {
            return Err(Error::Data(format!(
                "records out of round order at round {}",
                rec.round
            )));
        }
        last = Some(rec.round);
        let mut row = tracker.push(rec.round, &rec.psi, &rec.omega, &[], &[]);
        row.sum_alpha = rec.sum_alpha;
        row.sum_beta = rec.sum_beta;
        out.push(row);
    }
    Ok(out)
}

pub fn csv_header(clients: usize) -> Vec<String> {
    let mut h = vec!["round".to_string(), "loss".into(), "test_acc".into()];
    for k in 1..=clients {
        h.push(format!("psi_{k}"));
        h.push(format!("omega_{k}"));
        h.push(format!("bytes_{k}"));
        h.push(format!("flops_{k}"));
    }
    h.extend(["s_psi", "s_omega", "sum_alpha", "sum_beta"].map(String::from));
    h
}

fn csv_row(rec: &MetricsRecord) -> Vec<String> {
    // `{}` on f64 is the shortest round-trip representation.
    let mut row = vec![rec.round.to_string(), rec.loss.to_string(), rec.test_acc.to_string()];
    for k in 0..rec.clients() {
        row.push(rec.psi[k].to_string());
        row.push(rec.omega[k].to_string());
        row.push(rec.uplink_bytes[k].to_string());
        row.push(rec.flops[k].to_string());
    }
    row.extend([rec.s_psi, rec.s_omega, rec.sum_alpha, rec.sum_beta].map(|v| v.to_string()));
    row
}

/// Streams metrics rows, flushing after each so partial runs stay readable.
pub struct MetricsCsvWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> MetricsCsvWriter<W> {
    pub fn new(sink: W, clients: usize) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(sink);
        inner.write_record(csv_header(clients))?;
        inner.flush()?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, rec: &MetricsRecord) -> Result<()> {
        self.inner.write_record(csv_row(rec))?;
        self.inner.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> Result<W> {
        self.inner
            .into_inner()
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
    }
}
