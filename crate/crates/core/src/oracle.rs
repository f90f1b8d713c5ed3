//! Monolithic joint-model SGD, used to cross-check the protocol.
//!
//! With one local iteration per round and no lightweighting, every stale
//! embedding is fresh, so the protocol must reproduce plain SGD on the
//! composed network `head(concat_k feature_k(x_k))`. This module recomputes
//! that trajectory with its own per-sample forward and backward code; only
//! the initial parameters and the minibatch stream are shared.

use crate::data::VerticalDataset;
use crate::nn::{Activation, DenseNetwork};
use crate::protocol::{init_models, BatchSampler, ProtocolConfig, RoundPlan, Simulator};
use crate::{Error, Result};

#[derive(Debug, Clone)]
struct Linear {
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
    relu: bool,
}

impl Linear {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.w
            .iter()
            .zip(&self.b)
            .map(|(row, b)| {
                let z = row.iter().zip(x).fold(*b, |acc, (w, v)| acc + w * v);
                if self.relu {
                    z.max(0.0)
                } else {
                    z
                }
            })
            .collect()
    }
}

type Stack = Vec<Linear>;

fn to_stack(net: &DenseNetwork) -> Result<Stack> {
    net.layers
        .iter()
        .map(|l| {
            if l.neuron_mask.iter().any(|m| !m) {
                return Err(Error::Config("joint oracle requires unpruned networks".into()));
            }
            Ok(Linear {
                w: (0..l.out_dim()).map(|j| l.weights.row(j).to_vec()).collect(),
                b: l.biases.clone(),
                relu: l.activation == Activation::Relu,
            })
        })
        .collect()
}

fn zeros_like(s: &Stack) -> Stack {
    s.iter()
        .map(|l| Linear {
            w: l.w.iter().map(|r| vec![0.0; r.len()]).collect(),
            b: vec![0.0; l.b.len()],
            relu: l.relu,
        })
        .collect()
}

/// Runs `x` through `stack`, returning every layer's output (input first).
fn trace(stack: &Stack, x: &[f64]) -> Vec<Vec<f64>> {
    let mut acts = vec![x.to_vec()];
    for l in stack {
        let next = l.apply(acts.last().expect("non-empty"));
        acts.push(next);
    }
    acts
}

/// Accumulates `dout`-weighted parameter gradients into `acc`, returns `d input`.
fn backprop(stack: &Stack, acts: &[Vec<f64>], dout: Vec<f64>, acc: &mut Stack) -> Vec<f64> {
    let mut g = dout;
    for (li, l) in stack.iter().enumerate().rev() {
        let out = &acts[li + 1];
        let inp = &acts[li];
        if l.relu {
            for (gj, &o) in g.iter_mut().zip(out) {
                if o <= 0.0 {
                    *gj = 0.0;
                }
            }
        }
        let mut gin = vec![0.0; inp.len()];
        for (j, &gj) in g.iter().enumerate() {
            acc[li].b[j] += gj;
            for (i, &xi) in inp.iter().enumerate() {
                acc[li].w[j][i] += gj * xi;
                gin[i] += gj * l.w[j][i];
            }
        }
        g = gin;
    }
    g
}

fn descend(stack: &mut Stack, grad: &Stack, scale: f64) {
    for (l, g) in stack.iter_mut().zip(grad) {
        for (row, grow) in l.w.iter_mut().zip(&g.w) {
            for (w, gw) in row.iter_mut().zip(grow) {
                *w -= scale * gw;
            }
        }
        for (b, gb) in l.b.iter_mut().zip(&g.b) {
            *b -= scale * gb;
        }
    }
}

/// The composed model trained as one network.
#[derive(Debug, Clone)]
pub struct JointModel {
    features: Vec<Stack>,
    head: Stack,
}

impl JointModel {
    pub fn from_networks(head: &DenseNetwork, features: &[DenseNetwork]) -> Result<Self> {
        Ok(Self {
            features: features.iter().map(to_stack).collect::<Result<_>>()?,
            head: to_stack(head)?,
        })
    }

    /// One SGD step on the batch-mean cross-entropy; returns the pre-step loss.
    pub fn sgd_step(&mut self, data: &VerticalDataset, batch: &[usize], eta: f64) -> f64 {
        let mut gf: Vec<Stack> = self.features.iter().map(zeros_like).collect();
        let mut gh = zeros_like(&self.head);
        let mut loss = 0.0;
        for &row in batch {
            let f_acts: Vec<Vec<Vec<f64>>> = self
                .features
                .iter()
                .zip(&data.features)
                .map(|(s, x)| trace(s, x.row(row)))
                .collect();
            let joint: Vec<f64> = f_acts.iter().flat_map(|a| a.last().expect("output").clone()).collect();
            let h_acts = trace(&self.head, &joint);
            let logits = h_acts.last().expect("logits");
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            let y = data.labels[row];
            loss += lse - logits[y];
            let mut dlogits: Vec<f64> = logits.iter().map(|z| (z - lse).exp()).collect();
            dlogits[y] -= 1.0;
            let djoint = backprop(&self.head, &h_acts, dlogits, &mut gh);
            let mut offset = 0;
            for (k, acts) in f_acts.iter().enumerate() {
                let width = acts.last().expect("output").len();
                backprop(
                    &self.features[k],
                    acts,
                    djoint[offset..offset + width].to_vec(),
                    &mut gf[k],
                );
                offset += width;
            }
        }
        let b = batch.len() as f64;
        descend(&mut self.head, &gh, eta / b);
        for (s, g) in self.features.iter_mut().zip(&gf) {
            descend(s, g, eta / b);
        }
        loss / b
    }
}

/// Loss trajectory of joint SGD over the protocol's minibatch stream for
/// `rounds` rounds of `cfg.local_iters` iterations.
pub fn joint_sgd_losses(cfg: &ProtocolConfig, data: &VerticalDataset, rounds: usize) -> Result<Vec<f64>> {
    let (head, features) = init_models(cfg, data)?;
    let mut model = JointModel::from_networks(&head, &features)?;
    let mut sampler = BatchSampler::new(cfg.seed, &data.train);
    let mut losses = Vec::with_capacity(rounds * cfg.local_iters);
    for r in 0..rounds {
        sampler.reshuffle();
        for _ in 0..cfg.local_iters {
            let batch = sampler.next_batch(cfg.batch_size);
            losses.push(model.sgd_step(data, &batch, cfg.eta_at_round(r)));
        }
    }
    Ok(losses)
}

#[derive(Debug, Clone)]
pub struct OracleReport {
    pub protocol_losses: Vec<f64>,
    pub oracle_losses: Vec<f64>,
    pub max_abs_diff: f64,
    pub tolerance: f64,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.protocol_losses.len() == self.oracle_losses.len() && self.max_abs_diff <= self.tolerance
    }
}

pub const ORACLE_TOLERANCE: f64 = 1e-9;

/// Runs the protocol and the joint oracle side by side. `oracle_cfg` lets a
/// caller perturb the oracle side; pass `None` to mirror `cfg`.
pub fn check_equivalence(
    cfg: &ProtocolConfig,
    plan: &RoundPlan,
    data: &VerticalDataset,
    oracle_cfg: Option<&ProtocolConfig>,
) -> Result<OracleReport> {
    if cfg.local_iters != 1 {
        return Err(Error::field(
            "e",
            format!("oracle check needs E = 1, got {}", cfg.local_iters),
        ));
    }
    let nonzero = plan.alpha.iter().chain(&plan.beta).flatten().any(|&v| v != 0.0);
    if nonzero {
        return Err(Error::field(
            "schedule",
            "oracle check needs every alpha and beta to be zero",
        ));
    }
    let protocol_losses = Simulator::new(cfg.clone(), plan.clone(), data)?.run()?.iteration_losses;
    let oracle_losses = joint_sgd_losses(oracle_cfg.unwrap_or(cfg), data, cfg.rounds)?;
    let max_abs_diff = protocol_losses
        .iter()
        .zip(&oracle_losses)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(OracleReport {
        protocol_losses,
        oracle_losses,
        max_abs_diff,
        tolerance: ORACLE_TOLERANCE,
    })
}
