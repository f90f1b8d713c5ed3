//! Round/iteration state machine for lightweight vertical federated learning.
//!
//! Global iteration `t` runs from `0` to `R*E - 1`. At every `t` with
//! `t % E == 0` the clients upload sparsified full-dataset embeddings, the
//! server redistributes them, and each client structurally prunes its feature
//! model. Every iteration then performs `K + 1` parallel updates (head plus
//! each client) from the iteration-start parameters: client `k` sees the other
//! parties' stale embeddings and its own fresh dense embedding, the head sees
//! only stale embeddings.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::VerticalDataset;
use crate::metrics::{self, BoundTracker, MetricsRecord};
use crate::nn::{self, DenseNetwork, FeatureModel, ForwardCache, GradientSet, Matrix};
use crate::par::{self, Execution};
use crate::pruning::{self, PruneDecision, SparseEmbedding};
use crate::{Error, Result};

const SAMPLER_STREAM: u64 = 2;

/// Network shapes and optimizer settings for one simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolConfig {
    pub seed: u64,
    /// Layer widths after the input for each client; the last entry is the
    /// embedding width `d_k`.
    pub feature_widths: Vec<Vec<usize>>,
    /// Hidden widths of the head; its output width is the class count.
    pub head_hidden: Vec<usize>,
    pub local_iters: usize,
    pub rounds: usize,
    pub eta: f64,
    /// Per-round multiplicative decay of `eta`.
    pub eta_decay: f64,
    pub batch_size: usize,
    /// Rows of the held-out split used to estimate `Psi`.
    pub probe_size: usize,
    pub execution: Execution,
}

impl ProtocolConfig {
    pub fn eta_at_round(&self, round: usize) -> f64 {
        self.eta * self.eta_decay.powi(round as i32)
    }

    fn validate(&self, data: &VerticalDataset) -> Result<()> {
        let k = data.clients();
        if self.feature_widths.len() != k {
            return Err(Error::field(
                "feature_widths",
                format!("{} client architectures for {k} clients", self.feature_widths.len()),
            ));
        }
        if let Some(i) = self.feature_widths.iter().position(|w| w.is_empty() || w.contains(&0)) {
            return Err(Error::field(
                format!("feature_widths[{i}]"),
                "needs at least one positive width",
            ));
        }
        if self.head_hidden.contains(&0) {
            return Err(Error::field("head_widths", "widths must be positive"));
        }
        if self.local_iters == 0 {
            return Err(Error::field("e", "need at least one local iteration per round"));
        }
        if self.rounds == 0 {
            return Err(Error::field("r", "need at least one round"));
        }
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return Err(Error::field(
                "eta",
                format!("must be finite and non-negative, got {}", self.eta),
            ));
        }
        if !(self.eta_decay.is_finite() && self.eta_decay > 0.0) {
            return Err(Error::field(
                "decay",
                format!("must be finite and positive, got {}", self.eta_decay),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::field("batch_size", "must be positive"));
        }
        if data.train.is_empty() {
            return Err(Error::field("dataset", "training split is empty"));
        }
        Ok(())
    }
}

/// Per-round, per-client `(alpha, beta)` schedule, `R x K`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundPlan {
    pub alpha: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
}

impl RoundPlan {
    pub fn zeros(rounds: usize, clients: usize) -> Self {
        Self {
            alpha: vec![vec![0.0; clients]; rounds],
            beta: vec![vec![0.0; clients]; rounds],
        }
    }

    pub fn constant(rounds: usize, alpha: &[f64], beta: &[f64]) -> Result<Self> {
        if alpha.len() != beta.len() {
            return Err(Error::field("schedule", "alpha and beta vectors differ in length"));
        }
        let plan = Self {
            alpha: vec![alpha.to_vec(); rounds],
            beta: vec![beta.to_vec(); rounds],
        };
        plan.validate(rounds, alpha.len())?;
        Ok(plan)
    }

    /// Step schedule: each `(round, alpha, beta)` takes effect at `round` and
    /// holds until the next step. Rounds before the first step are all zero.
    pub fn piecewise(rounds: usize, clients: usize, steps: &[(usize, Vec<f64>, Vec<f64>)]) -> Result<Self> {
        let mut plan = Self::zeros(rounds, clients);
        for (i, (start, alpha, beta)) in steps.iter().enumerate() {
            if i > 0 && *start <= steps[i - 1].0 {
                return Err(Error::field(
                    format!("schedule.steps[{i}].round"),
                    "rounds must be strictly increasing",
                ));
            }
            if *start >= rounds {
                return Err(Error::field(
                    format!("schedule.steps[{i}].round"),
                    format!("{start} is not below R = {rounds}"),
                ));
            }
            if alpha.len() != clients || beta.len() != clients {
                return Err(Error::field(
                    format!("schedule.steps[{i}]"),
                    format!("ratio vectors need {clients} entries"),
                ));
            }
            let end = steps.get(i + 1).map_or(rounds, |s| s.0.min(rounds));
            for r in *start..end {
                plan.alpha[r] = alpha.clone();
                plan.beta[r] = beta.clone();
            }
        }
        plan.validate(rounds, clients)?;
        Ok(plan)
    }

    pub fn rounds(&self) -> usize {
        self.alpha.len()
    }

    pub fn validate(&self, rounds: usize, clients: usize) -> Result<()> {
        if self.alpha.len() != rounds || self.beta.len() != rounds {
            return Err(Error::field(
                "schedule",
                format!("plan covers {} rounds, run has {rounds}", self.alpha.len()),
            ));
        }
        for (name, table) in [("alpha", &self.alpha), ("beta", &self.beta)] {
            for (r, row) in table.iter().enumerate() {
                if row.len() != clients {
                    return Err(Error::field(
                        format!("schedule.{name}[{r}]"),
                        format!("needs {clients} entries, has {}", row.len()),
                    ));
                }
                if let Some((k, v)) = row.iter().enumerate().find(|(_, v)| !(0.0..1.0).contains(*v)) {
                    return Err(Error::field(
                        format!("schedule.{name}[{r}][{k}]"),
                        format!("{v} is outside [0, 1)"),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Party {
    Server,
    /// 1-based client id.
    Client(usize),
}

impl fmt::Display for Party {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Party::Server => write!(f, "server"),
            Party::Client(k) => write!(f, "client{k}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PayloadKind {
    EmbeddingUp,
    RepresentationDown,
}

impl fmt::Display for PayloadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PayloadKind::EmbeddingUp => "embedding-up",
            PayloadKind::RepresentationDown => "representation-down",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessageLogEntry {
    pub round: usize,
    pub sender: Party,
    pub receiver: Party,
    pub kind: PayloadKind,
    pub bytes: u64,
}

#[derive(Debug, Clone)]
pub struct ClientState {
    /// 1-based; 0 is the head.
    pub id: usize,
    pub model: FeatureModel,
    /// Parameters captured just before the latest prune call.
    pub shadow: Option<DenseNetwork>,
    pub alpha_prev_max: f64,
}

/// Shared minibatch stream over training rows, so every party sees the same
/// samples each iteration. Draws without replacement within an epoch.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(seed: u64, train: &[usize]) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(SAMPLER_STREAM);
        Self {
            order: train.to_vec(),
            cursor: 0,
            rng,
        }
    }

    pub fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    /// Next `size` rows; starts a new epoch when the current one runs out.
    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        if self.cursor + size > self.order.len() {
            self.reshuffle();
        }
        let batch = self.order[self.cursor..self.cursor + size].to_vec();
        self.cursor += size;
        batch
    }
}

/// The protocol's mutable state.
#[derive(Debug, Clone)]
pub struct ProtocolState {
    pub t: usize,
    pub t0: usize,
    pub clients: Vec<ClientState>,
    pub head: DenseNetwork,
    /// Sparse embeddings cached at the last exchange, one per client.
    pub stale_embeddings: Vec<SparseEmbedding>,
    stale_dense: Vec<Matrix>,
    sampler: BatchSampler,
}

impl ProtocolState {
    pub fn round(&self, local_iters: usize) -> usize {
        self.t / local_iters
    }

    pub fn stale_dense(&self) -> &[Matrix] {
        &self.stale_dense
    }
}

#[derive(Debug, Clone)]
pub struct ExchangeReport {
    pub round: usize,
    pub omega: Vec<f64>,
    pub uplink_bytes: Vec<u64>,
    pub embedding_norm_sq: Vec<f64>,
    pub messages: Vec<MessageLogEntry>,
}

#[derive(Debug, Clone)]
pub struct PlanReport {
    pub round: usize,
    pub decisions: Vec<PruneDecision>,
    pub psi: Vec<f64>,
}

/// Everything a completed run produced.
#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub records: Vec<MetricsRecord>,
    pub messages: Vec<MessageLogEntry>,
    pub iteration_losses: Vec<f64>,
}

/// One party's update for a local iteration.
enum Update {
    Head { grads: GradientSet, loss: f64 },
    Client(GradientSet),
}

/// Drives [`ProtocolState`] over a dataset according to a [`RoundPlan`].
pub struct Simulator<'a> {
    cfg: ProtocolConfig,
    plan: RoundPlan,
    data: &'a VerticalDataset,
    state: ProtocolState,
    emb_widths: Vec<usize>,
    probe: Vec<Matrix>,
    tracker: BoundTracker,
    iteration_losses: Vec<f64>,
}

impl<'a> Simulator<'a> {
    pub fn new(cfg: ProtocolConfig, plan: RoundPlan, data: &'a VerticalDataset) -> Result<Self> {
        cfg.validate(data)?;
        plan.validate(cfg.rounds, data.clients())?;
        let (head, models) = init_models(&cfg, data)?;
        let emb_widths: Vec<usize> = models.iter().map(DenseNetwork::out_dim).collect();
        let clients = models
            .into_iter()
            .enumerate()
            .map(|(i, model)| ClientState {
                id: i + 1,
                model,
                shadow: None,
                alpha_prev_max: 0.0,
            })
            .collect();
        let probe_rows: Vec<usize> = if data.test.is_empty() { &data.train } else { &data.test }
            .iter()
            .take(cfg.probe_size.max(1))
            .copied()
            .collect();
        let probe = data.features.iter().map(|x| x.select_rows(&probe_rows)).collect();
        let sampler = BatchSampler::new(cfg.seed, &data.train);
        Ok(Self {
            state: ProtocolState {
                t: 0,
                t0: 0,
                clients,
                head,
                stale_embeddings: Vec::new(),
                stale_dense: Vec::new(),
                sampler,
            },
            cfg,
            plan,
            data,
            emb_widths,
            probe,
            tracker: BoundTracker::default(),
            iteration_losses: Vec::new(),
        })
    }

    pub fn config(&self) -> &ProtocolConfig {
        &self.cfg
    }

    pub fn state(&self) -> &ProtocolState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut ProtocolState {
        &mut self.state
    }

    pub fn embedding_widths(&self) -> &[usize] {
        &self.emb_widths
    }

    pub fn iteration_losses(&self) -> &[f64] {
        &self.iteration_losses
    }

    pub fn current_round(&self) -> usize {
        self.state.round(self.cfg.local_iters)
    }

    /// Clients embed the full dataset with their current models, sparsify with
    /// `beta`, and upload; the server redistributes the collected set.
    pub fn exchange_embeddings(&mut self) -> Result<ExchangeReport> {
        let e = self.cfg.local_iters;
        if !self.state.t.is_multiple_of(e) {
            return Err(Error::Config(format!(
                "exchange requested at t = {} with E = {e}",
                self.state.t
            )));
        }
        let round = self.state.t / e;
        let betas = self.plan.beta[round].clone();
        let data = self.data;
        let results = par::map_mut(self.cfg.execution, &mut self.state.clients, |i, c| -> Result<_> {
            let dense = c.model.forward(&data.features[i])?;
            let sparse = pruning::embedding_prune(&dense, betas[i])?;
            let omega = metrics::compute_omega(&dense, &sparse)?;
            let norm = if dense.rows() == 0 {
                0.0
            } else {
                dense.norm_sq() / dense.rows() as f64
            };
            Ok((sparse, omega, norm))
        });
        let mut report = ExchangeReport {
            round,
            omega: Vec::new(),
            uplink_bytes: Vec::new(),
            embedding_norm_sq: Vec::new(),
            messages: Vec::new(),
        };
        let mut stale = Vec::with_capacity(results.len());
        for (i, res) in results.into_iter().enumerate() {
            let (sparse, omega, norm) = res?;
            let bytes = sparse.encoded_len();
            report.messages.push(MessageLogEntry {
                round,
                sender: Party::Client(i + 1),
                receiver: Party::Server,
                kind: PayloadKind::EmbeddingUp,
                bytes,
            });
            report.omega.push(omega);
            report.uplink_bytes.push(bytes);
            report.embedding_norm_sq.push(norm);
            stale.push(sparse);
        }
        let total: u64 = report.uplink_bytes.iter().sum();
        for (i, own) in report.uplink_bytes.iter().enumerate() {
            report.messages.push(MessageLogEntry {
                round,
                sender: Party::Server,
                receiver: Party::Client(i + 1),
                kind: PayloadKind::RepresentationDown,
                bytes: total - own,
            });
        }
        self.state.stale_dense = stale.iter().map(SparseEmbedding::to_dense).collect();
        self.state.stale_embeddings = stale;
        self.state.t0 = self.state.t;
        Ok(report)
    }

    /// Snapshots each client's parameters, prunes with this round's `alpha`,
    /// and measures `Psi` against the snapshot.
    pub fn apply_round_plan(&mut self) -> Result<PlanReport> {
        let round = self.current_round();
        let alphas = self.plan.alpha[round].clone();
        let probe = &self.probe;
        let results = par::map_mut(self.cfg.execution, &mut self.state.clients, |i, c| -> Result<_> {
            c.shadow = Some(c.model.clone());
            let decision = pruning::structured_prune(&mut c.model, alphas[i], c.alpha_prev_max)?;
            c.alpha_prev_max = decision.achieved_ratio;
            let psi = metrics::compute_psi(c.shadow.as_ref().expect("just set"), &c.model, &probe[i])?;
            Ok((decision, psi))
        });
        let mut report = PlanReport {
            round,
            decisions: Vec::new(),
            psi: Vec::new(),
        };
        for (i, res) in results.into_iter().enumerate() {
            let (decision, psi) = res?;
            for w in &decision.warnings {
                log::warn!("round {round}, client {}: {w}", i + 1);
            }
            report.decisions.push(decision);
            report.psi.push(psi);
        }
        Ok(report)
    }

    /// One parallel step of every party on the given training rows. Returns the
    /// head's loss on the stale embeddings, evaluated before the update.
    pub fn local_iteration(&mut self, batch: &[usize]) -> Result<f64> {
        if self.state.stale_dense.len() != self.state.clients.len() {
            return Err(Error::Config("local iteration before any embedding exchange".into()));
        }
        let round = self.current_round();
        let eta = self.cfg.eta_at_round(round);
        let labels: Vec<usize> = batch.iter().map(|&r| self.data.labels[r]).collect();
        let stale: Vec<Matrix> = self.state.stale_dense.iter().map(|m| m.select_rows(batch)).collect();
        let k = self.state.clients.len();
        let (state, data, widths) = (&self.state, self.data, &self.emb_widths);

        let updates = par::map_indexed(self.cfg.execution, k + 1, |party| -> Result<Update> {
            if party == 0 {
                let blocks: Vec<&Matrix> = stale.iter().collect();
                let lg = nn::loss_and_grad(&state.head, &Matrix::hconcat(&blocks)?, &labels, widths)?;
                return Ok(Update::Head {
                    grads: lg.head_grads,
                    loss: lg.loss,
                });
            }
            let i = party - 1;
            let model = &state.clients[i].model;
            let cache: ForwardCache = model.forward_cached(&data.features[i].select_rows(batch))?;
            let blocks: Vec<&Matrix> = stale
                .iter()
                .enumerate()
                .map(|(j, m)| if j == i { cache.output() } else { m })
                .collect();
            let lg = nn::loss_and_grad(&state.head, &Matrix::hconcat(&blocks)?, &labels, widths)?;
            let mut upstream = lg.embedding_grads.into_iter().nth(i).expect("one block per client");
            upstream.scale(batch.len() as f64);
            Ok(Update::Client(model.backward(&cache, &upstream)?.0))
        });

        let abort = |reason: String| Error::Aborted {
            round,
            iteration: self.state.t,
            reason,
        };
        let mut loss = f64::NAN;
        let mut client_grads = Vec::with_capacity(k);
        for u in updates {
            match u.map_err(|e| abort(e.to_string()))? {
                Update::Head { grads, loss: l } => {
                    loss = l;
                    client_grads.push(grads);
                }
                Update::Client(g) => client_grads.push(g),
            }
        }
        let mut grads = client_grads.into_iter();
        self.state.head.sgd_step(&grads.next().expect("head update"), eta)?;
        let grads: Vec<GradientSet> = grads.collect();
        let results = par::map_mut(self.cfg.execution, &mut self.state.clients, |i, c| {
            c.model.sgd_step(&grads[i], eta)
        });
        results.into_iter().collect::<Result<Vec<_>>>()?;
        self.state.t += 1;
        self.iteration_losses.push(loss);
        Ok(loss)
    }

    /// Full-test-split accuracy with dense embeddings from the live models.
    pub fn test_accuracy(&self) -> Result<f64> {
        let rows = if self.data.test.is_empty() {
            &self.data.train
        } else {
            &self.data.test
        };
        let blocks: Vec<Matrix> = par::map_indexed(self.cfg.execution, self.state.clients.len(), |i| {
            self.state.clients[i]
                .model
                .forward(&self.data.features[i].select_rows(rows))
        })
        .into_iter()
        .collect::<Result<_>>()?;
        let refs: Vec<&Matrix> = blocks.iter().collect();
        let logits = self.state.head.forward(&Matrix::hconcat(&refs)?)?;
        let hits = nn::argmax_rows(&logits)
            .into_iter()
            .zip(rows)
            .filter(|(p, &r)| *p == self.data.labels[r])
            .count();
        Ok(hits as f64 / rows.len() as f64)
    }

    /// Executes one global round and returns its record and messages.
    pub fn run_round(&mut self) -> Result<(MetricsRecord, Vec<MessageLogEntry>)> {
        let round = self.current_round();
        if round >= self.cfg.rounds {
            return Err(Error::Config(format!("all {} rounds already ran", self.cfg.rounds)));
        }
        let exchange = self.exchange_embeddings()?;
        let plan = self.apply_round_plan()?;
        self.state.sampler.reshuffle();
        let mut loss_sum = 0.0;
        for _ in 0..self.cfg.local_iters {
            let batch = self.state.sampler.next_batch(self.cfg.batch_size);
            loss_sum += self.local_iteration(&batch)?;
        }
        let test_acc = self.test_accuracy()?;
        let alpha = &self.plan.alpha[round];
        let beta = &self.plan.beta[round];
        let terms = self.tracker.push(round, &plan.psi, &exchange.omega, alpha, beta);
        let rec = MetricsRecord {
            round,
            loss: loss_sum / self.cfg.local_iters as f64,
            test_acc,
            psi: plan.psi,
            omega: exchange.omega,
            uplink_bytes: exchange.uplink_bytes,
            flops: self
                .state
                .clients
                .iter()
                .map(|c| metrics::flops_estimate(&c.model))
                .collect(),
            s_psi: terms.s_psi,
            s_omega: terms.s_omega,
            sum_alpha: terms.sum_alpha,
            sum_beta: terms.sum_beta,
            embedding_norm_sq: exchange.embedding_norm_sq,
            param_norm_sq: self.state.clients.iter().map(|c| c.model.param_norm_sq()).collect(),
        };
        if !rec.loss.is_finite() {
            return Err(Error::Aborted {
                round,
                iteration: self.state.t,
                reason: format!("mean loss {}", rec.loss),
            });
        }
        log::debug!("round {round}: loss {:.5} acc {:.4}", rec.loss, rec.test_acc);
        Ok((rec, exchange.messages))
    }

    /// Runs all remaining rounds, handing each record to `sink` as it lands.
    pub fn run_with<F>(&mut self, mut sink: F) -> Result<()>
    where
        F: FnMut(&MetricsRecord, &[MessageLogEntry]) -> Result<()>,
    {
        while self.current_round() < self.cfg.rounds {
            let (rec, msgs) = self.run_round()?;
            sink(&rec, &msgs)?;
        }
        Ok(())
    }

    pub fn run(mut self) -> Result<RunOutput> {
        let mut out = RunOutput::default();
        self.run_with(|rec, msgs| {
            out.records.push(rec.clone());
            out.messages.extend_from_slice(msgs);
            Ok(())
        })?;
        out.iteration_losses = self.iteration_losses;
        Ok(out)
    }
}

/// Head seeded with `seed`, client `k` (1-based) with `seed + k`.
pub fn init_models(cfg: &ProtocolConfig, data: &VerticalDataset) -> Result<(DenseNetwork, Vec<FeatureModel>)> {
    let models = data
        .feature_dims()
        .iter()
        .zip(&cfg.feature_widths)
        .enumerate()
        .map(|(i, (&d_in, widths))| {
            let mut w = vec![d_in];
            w.extend_from_slice(widths);
            DenseNetwork::new_seeded(&w, cfg.seed.wrapping_add(i as u64 + 1))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut hw = vec![models.iter().map(DenseNetwork::out_dim).sum()];
    hw.extend_from_slice(&cfg.head_hidden);
    hw.push(data.classes);
    let head = DenseNetwork::new_seeded(&hw, cfg.seed)?;
    Ok((head, models))
}

/// Closed-form uplink bytes for one exchange: `N * (2 + 10 * (d - floor(beta d)))`
/// per client.
pub fn closed_form_uplink(n: usize, widths: &[usize], betas: &[f64]) -> Vec<u64> {
    widths
        .iter()
        .zip(betas)
        .map(|(&d, &b)| n as u64 * pruning::encoded_row_bytes(d - pruning::ratio_count(b, d)))
        .collect()
}
