//! Round orchestration: client sampling, local LoRA training (optionally
//! with control-variate correction), aggregation, personalization and
//! per-round diagnostics including exact communication accounting.

use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{
    apply_global, baseline_full_stack, concat_reconstruct, factor_average, personalize,
    qr_compress, zero_pad_average, AggregationResult, ClientUpdate,
};
use crate::data::{dirichlet_partition, Dataset, PartitionPlan};
use crate::error::{Error, Result};
use crate::linalg::{matmul, subspace_residual, thin_qr, Matrix};
use crate::lora::{factor_gradients, init_from_qr, BaseWeight, LoraAdapter, LORA_ALPHA};
use crate::model::{evaluate_at, forward_loss_at, Architecture, Batch};
use crate::optim::{
    corrected_gradient, local_control_update, server_control_aggregate, AdamWConfig, AdamWState,
    ControlVariates,
};

/// Bytes per transmitted scalar.
pub const BYTES_PER_FLOAT: u64 = 8;

/// Aggregation and local-training scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Concatenated-QR aggregation, raw-gradient AdamW.
    Ilora,
    /// Concatenated-QR aggregation with control-variate AdamW.
    IloraS,
    /// Factor averaging (homogeneous ranks only).
    FeditAvg,
    /// Zero-pad factors to the largest rank, then average.
    ZeroPad,
    /// Ship the full concatenation of every client's factors.
    FullStack,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Ilora,
        Method::IloraS,
        Method::FeditAvg,
        Method::ZeroPad,
        Method::FullStack,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ilora => "ilora",
            Method::IloraS => "ilora_s",
            Method::FeditAvg => "fedit_avg",
            Method::ZeroPad => "zero_pad",
            Method::FullStack => "full_stack",
        }
    }

    pub fn uses_controls(self) -> bool {
        self == Method::IloraS
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s || m.as_str().replace('_', "-") == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method `{s}`")))
    }
}

/// Feature map of the toy model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchitectureKind {
    Linear,
    OneHidden { width: usize },
}

/// Order in which sampled clients run their local training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    #[default]
    Sequential,
    /// Seeded random order; results must not depend on it.
    Shuffled(u64),
    Parallel,
}

/// Everything that determines a federation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub n_clients: usize,
    pub participation: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub rounds: usize,
    pub client_ranks: Vec<usize>,
    pub server_rank: usize,
    pub method: Method,
    pub optimizer: AdamWConfig,
    pub lora_alpha: f64,
    pub dirichlet_alpha: f64,
    pub data_seed: u64,
    pub partition_seed: u64,
    pub training_seed: u64,
    pub model_seed: u64,
    /// Std of the random pre-trained weight.
    pub theta0_scale: f64,
    /// Multiplier on the compressed update when forming the global model.
    pub global_scale: f64,
    /// Train a bias vector and average it across clients.
    pub train_bias: bool,
    pub architecture: ArchitectureKind,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            n_clients: 3,
            participation: 1.0,
            local_epochs: 1,
            batch_size: 64,
            rounds: 5,
            client_ranks: vec![4; 3],
            server_rank: 4,
            method: Method::Ilora,
            optimizer: AdamWConfig::default(),
            lora_alpha: LORA_ALPHA,
            dirichlet_alpha: 0.5,
            data_seed: 42,
            partition_seed: 42,
            training_seed: 42,
            model_seed: 42,
            theta0_scale: 0.1,
            global_scale: 1.0,
            train_bias: false,
            architecture: ArchitectureKind::Linear,
        }
    }
}

impl FederationConfig {
    /// `⌊pK⌋`.
    pub fn clients_per_round(&self) -> usize {
        (self.participation * self.n_clients as f64 + 1e-9).floor() as usize
    }

    pub fn scaling_for(&self, rank: usize) -> f64 {
        self.lora_alpha / rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n_clients == 0 {
            return bad("n_clients must be at least 1".into());
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return bad(format!("participation must be in (0, 1], got {}", self.participation));
        }
        if self.clients_per_round() == 0 {
            return bad("participation * n_clients rounds down to zero clients".into());
        }
        if self.rounds == 0 || self.local_epochs == 0 || self.batch_size == 0 {
            return bad("rounds, local_epochs and batch_size must be positive".into());
        }
        if self.client_ranks.len() != self.n_clients {
            return bad(format!(
                "{} client ranks for {} clients",
                self.client_ranks.len(),
                self.n_clients
            ));
        }
        if self.client_ranks.contains(&0) || self.server_rank == 0 {
            return bad("ranks must be positive".into());
        }
        if let Some(&r) = self.client_ranks.iter().find(|&&r| r > self.server_rank) {
            return bad(format!("client rank {r} exceeds server rank {}", self.server_rank));
        }
        if self.method == Method::FeditAvg
            && self.client_ranks.iter().any(|&r| r != self.client_ranks[0])
        {
            return bad("fedit_avg needs homogeneous client ranks".into());
        }
        if !(self.lora_alpha > 0.0) || !(self.dirichlet_alpha > 0.0) || !(self.theta0_scale >= 0.0) {
            return bad("lora_alpha, dirichlet_alpha must be positive and theta0_scale nonnegative".into());
        }
        if !self.global_scale.is_finite() {
            return bad("global_scale must be finite".into());
        }
        if let ArchitectureKind::OneHidden { width: 0 } = self.architecture {
            return bad("hidden width must be positive".into());
        }
        self.optimizer.validate()
    }
}

/// Training and evaluation data of one experiment.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub train: Dataset,
    pub holdout: Dataset,
}

/// What the server sends to clients so they can rebuild their adapters.
#[derive(Debug, Clone, PartialEq)]
pub enum Broadcast {
    /// Weight-unit factors; a rank-`r_k` client keeps the leading slices.
    Slices { b: Matrix, a: Matrix },
    /// Unreduced stack; clients re-factor it with a thin QR locally.
    Stack { b: Matrix, a: Matrix },
}

impl Broadcast {
    fn adapter_for(&self, rank: usize, scaling: f64) -> Result<LoraAdapter> {
        match self {
            Broadcast::Slices { b, a } => LoraAdapter::from_qr_slices(b, a, rank, scaling),
            Broadcast::Stack { b, a } => {
                let (q, r) = thin_qr(&matmul(b, a)?);
                LoraAdapter::from_qr_slices(&q, &r, rank, scaling)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub theta0: Matrix,
    /// Shared frozen base of every client.
    pub base: BaseWeight,
    pub architecture: Architecture,
    /// Current global weight `θ^(t)`.
    pub global_weight: Matrix,
    pub global_bias: Matrix,
    pub broadcast: Broadcast,
    pub last_result: Option<AggregationResult>,
    pub global_controls: ControlVariates,
    /// Completed rounds.
    pub round: usize,
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: usize,
    pub indices: Vec<usize>,
    pub shard: Batch,
    pub base: BaseWeight,
    pub adapter: LoraAdapter,
    pub opt_a: AdamWState,
    pub opt_b: AdamWState,
    pub bias: Matrix,
    pub opt_bias: AdamWState,
    pub controls: ControlVariates,
}

impl ClientState {
    pub fn sample_count(&self) -> usize {
        self.shard.len()
    }

    pub fn rank(&self) -> usize {
        self.adapter.rank()
    }

    pub fn effective_weight(&self) -> Result<Matrix> {
        crate::lora::effective_weight(&self.base, &self.adapter)
    }
}

/// Diagnostics recorded after each round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub method: Method,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub holdout_accuracy: f64,
    pub truncation_error: f64,
    pub drift: f64,
    pub grad_heterogeneity: f64,
    pub mean_local_loss: f64,
    pub bytes_down: u64,
    pub bytes_up: u64,
    pub sampled: Vec<usize>,
    pub total_samples: usize,
    /// Worst `subspace_residual(Q, B_k)` over this round's personalized
    /// adapters; only defined for QR-broadcast methods.
    pub subspace_residual: Option<f64>,
}

/// Byte counts of one round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommBytes {
    /// Sum over sampled clients of what each one receives.
    pub down: u64,
    /// Sum over sampled clients of what each one sends.
    pub up: u64,
    /// Size of one broadcast payload from which every sampled client can
    /// extract its share.
    pub broadcast: u64,
}

/// Shapes needed to count the traffic of one round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundContext {
    pub d: usize,
    pub k: usize,
    pub sampled_ranks: Vec<usize>,
    pub bias_len: usize,
}

/// Exact scalar counts (times 8 bytes) for the configured method.
///
/// Per sampled client of rank `r_k`, with `w = d + k`:
/// ilora down/up `r_k w`; ilora_s adds `r_s w` of global controls down and
/// `r_k w` of control deltas up; fedit_avg `r w` both ways; zero_pad
/// `r_max w` down and `r_k w` up; full_stack `(Σ r_j) w` down and `r_k w`
/// up. Biases add `k` each way when trained.
pub fn account_communication(config: &FederationConfig, ctx: &RoundContext) -> CommBytes {
    let w = (ctx.d + ctx.k) as u64;
    let rs = config.server_rank as u64;
    let r_total: u64 = ctx.sampled_ranks.iter().map(|&r| r as u64).sum();
    let r_pad = config.client_ranks.iter().copied().max().unwrap_or(0) as u64;
    let bias = if config.train_bias { ctx.bias_len as u64 } else { 0 };
    let mut down = 0u64;
    let mut up = 0u64;
    for &r in &ctx.sampled_ranks {
        let r = r as u64;
        let (dn, u) = match config.method {
            Method::Ilora => (r * w, r * w),
            Method::IloraS => (r * w + rs * w, 2 * r * w),
            Method::FeditAvg => (r * w, r * w),
            Method::ZeroPad => (r_pad * w, r * w),
            Method::FullStack => (r_total * w, r * w),
        };
        down += dn + bias;
        up += u + bias;
    }
    let broadcast = match config.method {
        Method::Ilora => rs * w,
        Method::IloraS => 2 * rs * w,
        Method::FeditAvg => ctx.sampled_ranks.first().copied().unwrap_or(0) as u64 * w,
        Method::ZeroPad => r_pad * w,
        Method::FullStack => r_total * w,
    } + bias;
    CommBytes {
        down: down * BYTES_PER_FLOAT,
        up: up * BYTES_PER_FLOAT,
        broadcast: broadcast * BYTES_PER_FLOAT,
    }
}

/// SplitMix64 finalizer folded over `parts`.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut z = base;
    for &p in parts {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(p);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

const STREAM_SAMPLING: u64 = 1;
const STREAM_LOCAL: u64 = 2;
const STREAM_THETA0: u64 = 3;
const STREAM_HIDDEN: u64 = 4;

/// Random "pre-trained" weight and the frozen feature map.
pub fn build_model(config: &FederationConfig, d_in: usize, n_classes: usize) -> (Matrix, Architecture) {
    let architecture = match config.architecture {
        ArchitectureKind::Linear => Architecture::Linear,
        ArchitectureKind::OneHidden { width } => {
            Architecture::one_hidden(d_in, width, derive_seed(config.model_seed, &[STREAM_HIDDEN]))
        }
    };
    let d = architecture.feature_dim(d_in);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.model_seed, &[STREAM_THETA0]));
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let theta0 = Matrix::from_fn(d, n_classes, |_, _| config.theta0_scale * normal.sample(&mut rng));
    (theta0, architecture)
}

/// Partitions `data.train` with the configured Dirichlet parameters and
/// initializes server and clients.
pub fn init_federation(config: &FederationConfig, data: &TaskData) -> Result<(ServerState, Vec<ClientState>)> {
    config.validate()?;
    let plan = dirichlet_partition(&data.train, config.n_clients, config.dirichlet_alpha, config.partition_seed)?;
    init_federation_with_plan(config, data, &plan)
}

/// Initialization from an explicit partition.
///
/// The server decomposes `θ₀` once; each client keeps the leading `r_k`
/// slices and the frozen base `θ₀ - Q[:, :r_s] R[:r_s, :]` shared by all.
pub fn init_federation_with_plan(
    config: &FederationConfig,
    data: &TaskData,
    plan: &PartitionPlan,
) -> Result<(ServerState, Vec<ClientState>)> {
    config.validate()?;
    if plan.n_clients() != config.n_clients || plan.total() != data.train.len() {
        return Err(Error::InvalidConfig(format!(
            "partition covers {} clients / {} samples, expected {} / {}",
            plan.n_clients(),
            plan.total(),
            config.n_clients,
            data.train.len()
        )));
    }
    if data.holdout.d_in() != data.train.d_in() || data.holdout.n_classes != data.train.n_classes {
        return Err(Error::InvalidArgument("holdout set does not match training set".into()));
    }
    let n_classes = data.train.n_classes;
    let (theta0, architecture) = build_model(config, data.train.d_in(), n_classes);
    let (d, k) = theta0.shape();
    if config.server_rank > d.min(k) {
        return Err(Error::InvalidConfig(format!(
            "server rank {} exceeds min(d, k) = {}",
            config.server_rank,
            d.min(k)
        )));
    }
    let (q, r) = thin_qr(&theta0);
    let mut clients = Vec::with_capacity(config.n_clients);
    let mut shared_base = None;
    for (client_id, &rank) in config.client_ranks.iter().enumerate() {
        let indices = plan.client_indices(client_id);
        let shard = data.train.shard(&indices)?;
        let (base, adapter) = init_from_qr(&theta0, &q, &r, rank, config.server_rank, config.scaling_for(rank))?;
        shared_base.get_or_insert_with(|| base.clone());
        clients.push(ClientState {
            client_id,
            indices,
            shard,
            opt_a: AdamWState::new(rank, k, config.optimizer),
            opt_b: AdamWState::new(d, rank, config.optimizer),
            bias: Matrix::zeros(1, k),
            opt_bias: AdamWState::new(1, k, config.optimizer),
            controls: ControlVariates::zeros(d, k, rank),
            base,
            adapter,
        });
    }
    let base = shared_base.expect("at least one client");
    let top = matmul(&q.slice_cols(config.server_rank)?, &r.slice_rows(config.server_rank)?)?;
    let global_weight = base.frozen().add(&top)?;
    let server = ServerState {
        theta0,
        base,
        architecture,
        global_weight,
        global_bias: Matrix::zeros(1, k),
        broadcast: Broadcast::Slices { b: q, a: r },
        last_result: None,
        global_controls: ControlVariates::zeros(d, k, config.server_rank),
        round: 0,
    };
    Ok((server, clients))
}

struct LocalOutcome {
    update: ClientUpdate,
    effective_weight: Matrix,
    start_grad: Matrix,
    mean_loss: f64,
    bias: Matrix,
}

/// Installs the latest broadcast on a client about to train.
fn receive(client: &mut ClientState, server: &ServerState, config: &FederationConfig) -> Result<()> {
    let adapter = server
        .broadcast
        .adapter_for(client.rank(), client.adapter.scaling())?;
    client.adapter.set_factors(adapter.b_factor, adapter.a_factor)?;
    if config.train_bias {
        client.bias = server.global_bias.clone();
    }
    Ok(())
}

fn local_train(
    client: &mut ClientState,
    server: &ServerState,
    config: &FederationConfig,
    round: usize,
) -> Result<LocalOutcome> {
    receive(client, server, config)?;
    let arch = &server.architecture;
    let abort = |e: Error| Error::RoundAborted {
        round,
        reason: format!("client {}: {e}", client.client_id),
    };
    let start = forward_loss_at(arch, &client.effective_weight()?, &client.bias, &client.shard).map_err(abort)?;

    let global_slice = if config.method.uses_controls() {
        Some(server.global_controls.slice(client.rank())?)
    } else {
        None
    };
    let rank = client.rank();
    let (d, k) = client.adapter.weight_shape();
    let mut delta_total = ControlVariates::zeros(d, k, rank);

    // Seeded from the shard so that relabelling clients does not change
    // their batch order.
    let shard_tag = client.indices.first().copied().unwrap_or(0) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        config.training_seed,
        &[STREAM_LOCAL, round as u64, shard_tag],
    ));
    let n = client.shard.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut loss_sum = 0.0;
    let mut batches = 0usize;

    for _epoch in 0..config.local_epochs {
        order.shuffle(&mut rng);
        let mut sum_ga = Matrix::zeros(rank, k);
        let mut sum_gb = Matrix::zeros(d, rank);
        let mut epoch_batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch = gather(&client.shard, chunk)?;
            let weight = client.effective_weight()?;
            let out = forward_loss_at(arch, &weight, &client.bias, &batch).map_err(abort)?;
            if !out.loss.is_finite() {
                return Err(abort(Error::NonFinite("local loss".into())));
            }
            loss_sum += out.loss;
            batches += 1;
            epoch_batches += 1;
            let (gb, ga) = factor_gradients(&client.adapter, &out.weight_grad)?;
            sum_ga.add_scaled_assign(&ga, 1.0)?;
            sum_gb.add_scaled_assign(&gb, 1.0)?;
            let (step_a, step_b) = match &global_slice {
                Some(global) => (
                    corrected_gradient(&ga, &global.c_a, &client.controls.c_a)?,
                    corrected_gradient(&gb, &global.c_b, &client.controls.c_b)?,
                ),
                None => (ga, gb),
            };
            client.opt_a.update(&mut client.adapter.a_factor, &step_a).map_err(abort)?;
            client.opt_b.update(&mut client.adapter.b_factor, &step_b).map_err(abort)?;
            if config.train_bias {
                client.opt_bias.update(&mut client.bias, &out.bias_grad).map_err(abort)?;
            }
        }
        if config.method.uses_controls() {
            let inv = 1.0 / epoch_batches as f64;
            let (da, new_a) = local_control_update(&sum_ga.scale(inv), &client.controls.c_a)?;
            let (db, new_b) = local_control_update(&sum_gb.scale(inv), &client.controls.c_b)?;
            delta_total.c_a.add_scaled_assign(&da, 1.0)?;
            delta_total.c_b.add_scaled_assign(&db, 1.0)?;
            client.controls = ControlVariates { c_a: new_a, c_b: new_b };
        }
    }

    let mut update = ClientUpdate::new(client.client_id, client.adapter.clone(), n)?;
    if config.method.uses_controls() {
        update = update.with_control_deltas(delta_total);
    }
    Ok(LocalOutcome {
        update,
        effective_weight: client.effective_weight()?,
        start_grad: start.weight_grad,
        mean_loss: loss_sum / batches as f64,
        bias: client.bias.clone(),
    })
}

fn gather(shard: &Batch, rows: &[usize]) -> Result<Batch> {
    let d = shard.inputs.cols();
    let mut data = Vec::with_capacity(rows.len() * d);
    let mut labels = Vec::with_capacity(rows.len());
    for &i in rows {
        data.extend_from_slice(shard.inputs.row(i));
        labels.push(shard.labels[i]);
    }
    Batch::new(Matrix::new(rows.len(), d, data)?, labels)
}

/// Clients sampled in `round` (0-based), ascending.
pub fn sample_clients(config: &FederationConfig, round: usize) -> Vec<usize> {
    let m = config.clients_per_round();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        config.training_seed,
        &[STREAM_SAMPLING, round as u64],
    ));
    let mut picked = index::sample(&mut rng, config.n_clients, m).into_vec();
    picked.sort_unstable();
    picked
}

/// Global-model loss and accuracy on a dataset.
pub fn evaluate_global(server: &ServerState, ds: &Dataset) -> Result<(f64, f64)> {
    let batch = ds.as_batch();
    let loss = forward_loss_at(&server.architecture, &server.global_weight, &server.global_bias, &batch)?.loss;
    let acc = evaluate_at(&server.architecture, &server.global_weight, &server.global_bias, &batch)?;
    Ok((loss, acc))
}

/// One communication round.
pub fn run_round(
    server: &mut ServerState,
    clients: &mut [ClientState],
    config: &FederationConfig,
    data: &TaskData,
    execution: Execution,
) -> Result<RoundMetrics> {
    if clients.len() != config.n_clients {
        return Err(Error::InvalidConfig(format!(
            "{} client states for {} clients",
            clients.len(),
            config.n_clients
        )));
    }
    let round = server.round;
    if round >= config.rounds {
        return Err(Error::InvalidConfig(format!(
            "round {round} beyond the configured {} rounds",
            config.rounds
        )));
    }
    let sampled = sample_clients(config, round);
    let snapshot: &ServerState = server;

    let mut selected: Vec<&mut ClientState> = clients
        .iter_mut()
        .filter(|c| sampled.binary_search(&c.client_id).is_ok())
        .collect();
    let mut outcomes: Vec<LocalOutcome> = match execution {
        Execution::Sequential => selected
            .iter_mut()
            .map(|c| local_train(c, snapshot, config, round))
            .collect::<Result<_>>()?,
        Execution::Shuffled(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[round as u64]));
            selected.shuffle(&mut rng);
            selected
                .iter_mut()
                .map(|c| local_train(c, snapshot, config, round))
                .collect::<Result<_>>()?
        }
        Execution::Parallel => selected
            .par_iter_mut()
            .map(|c| local_train(c, snapshot, config, round))
            .collect::<Result<_>>()?,
    };
    outcomes.sort_by_key(|o| o.update.client_id);

    let updates: Vec<ClientUpdate> = outcomes.iter().map(|o| o.update.clone()).collect();
    let total_samples: usize = updates.iter().map(|u| u.sample_count).sum();
    let exact = concat_reconstruct(&updates)?;
    let frozen = server.base.frozen().clone();
    let gs = config.global_scale;

    let mut subspace = None;
    let truncation_error;
    // Scalars actually handed to the sampled clients at the end of the round.
    let mut down_floats = 0usize;
    let floats = |m: &Matrix| m.rows() * m.cols();
    match config.method {
        Method::Ilora | Method::IloraS => {
            let result = qr_compress(&exact, config.server_rank)?;
            truncation_error = result.truncation_error;
            server.global_weight = apply_global(&frozen, &result, gs)?;
            let mut worst = 0.0_f64;
            for o in &outcomes {
                let personal = personalize(&result, o.update.adapter.rank(), o.update.adapter.scaling())?;
                worst = worst.max(subspace_residual(&result.q, &personal.b_factor)?);
                down_floats += floats(&personal.b_factor) + floats(&personal.a_factor);
            }
            subspace = Some(worst);
            if config.method.uses_controls() {
                let rs = config.server_rank;
                let mut da = Vec::with_capacity(updates.len());
                let mut db = Vec::with_capacity(updates.len());
                for u in &updates {
                    let delta = u
                        .control_deltas
                        .as_ref()
                        .ok_or_else(|| Error::InvalidArgument("missing control deltas".into()))?
                        .pad(rs)?;
                    da.push(delta.c_a);
                    db.push(delta.c_b);
                }
                server.global_controls = ControlVariates {
                    c_a: server_control_aggregate(&server.global_controls.c_a, &da)?,
                    c_b: server_control_aggregate(&server.global_controls.c_b, &db)?,
                };
                down_floats += outcomes.len() * server.global_controls.len();
            }
            server.broadcast = Broadcast::Slices {
                b: result.q.clone(),
                a: result.r.clone(),
            };
            server.last_result = Some(result);
        }
        Method::FeditAvg | Method::ZeroPad => {
            let (b, a) = if config.method == Method::FeditAvg {
                factor_average(&updates)?
            } else {
                let target = config.client_ranks.iter().copied().max().unwrap_or(1);
                zero_pad_average(&updates, target)?
            };
            let delta = matmul(&b, &a)?;
            truncation_error = exact.sub(&delta)?.frobenius_norm();
            let mut w = frozen.clone();
            w.add_scaled_assign(&delta, gs)?;
            server.global_weight = w;
            down_floats += outcomes.len() * (floats(&b) + floats(&a));
            server.broadcast = Broadcast::Slices { b, a };
            server.last_result = None;
        }
        Method::FullStack => {
            let (b, a) = baseline_full_stack(&updates)?;
            let delta = matmul(&b, &a)?;
            truncation_error = exact.sub(&delta)?.frobenius_norm();
            let mut w = frozen.clone();
            w.add_scaled_assign(&delta, gs)?;
            server.global_weight = w;
            down_floats += outcomes.len() * (floats(&b) + floats(&a));
            server.broadcast = Broadcast::Stack { b, a };
            server.last_result = None;
        }
    }

    if config.train_bias {
        let mut bias = Matrix::zeros(1, server.global_bias.cols());
        for o in &outcomes {
            bias.add_scaled_assign(&o.bias, o.update.sample_count as f64 / total_samples as f64)?;
        }
        server.global_bias = bias;
    }

    let s = outcomes.len() as f64;
    let drift = outcomes
        .iter()
        .map(|o| o.effective_weight.sub(&server.global_weight).map(|m| m.frobenius_norm()))
        .sum::<Result<f64>>()?
        / s;
    let mut mean_grad = Matrix::zeros(exact.rows(), exact.cols());
    for o in &outcomes {
        mean_grad.add_scaled_assign(&o.start_grad, 1.0 / s)?;
    }
    let grad_heterogeneity = outcomes
        .iter()
        .map(|o| o.start_grad.sub(&mean_grad).map(|m| m.frobenius_norm()))
        .sum::<Result<f64>>()?
        / s;
    let mean_local_loss = outcomes.iter().map(|o| o.mean_loss).sum::<f64>() / s;

    let bias_floats = if config.train_bias { server.global_bias.cols() } else { 0 };
    let up_floats: usize = updates
        .iter()
        .map(|u| {
            floats(&u.adapter.b_factor)
                + floats(&u.adapter.a_factor)
                + u.control_deltas.as_ref().map_or(0, ControlVariates::len)
                + bias_floats
        })
        .sum();
    let bytes_down = (down_floats + outcomes.len() * bias_floats) as u64 * BYTES_PER_FLOAT;
    let bytes_up = up_floats as u64 * BYTES_PER_FLOAT;

    server.round += 1;
    let (train_loss, train_accuracy) = evaluate_global(server, &data.train)?;
    let (_, holdout_accuracy) = evaluate_global(server, &data.holdout)?;
    let metrics = RoundMetrics {
        round: server.round,
        method: config.method,
        train_loss,
        train_accuracy,
        holdout_accuracy,
        truncation_error,
        drift,
        grad_heterogeneity,
        mean_local_loss,
        bytes_down,
        bytes_up,
        sampled,
        total_samples,
        subspace_residual: subspace,
    };
    let finite = [
        train_loss,
        train_accuracy,
        holdout_accuracy,
        truncation_error,
        drift,
        grad_heterogeneity,
        mean_local_loss,
    ]
    .iter()
    .all(|x| x.is_finite());
    if !finite {
        return Err(Error::RoundAborted {
            round: server.round,
            reason: "non-finite round metrics".into(),
        });
    }
    Ok(metrics)
}

/// Runs every configured round from a fresh initialization.
pub fn run_federation(config: &FederationConfig, data: &TaskData) -> Result<Vec<RoundMetrics>> {
    let (mut server, mut clients) = init_federation(config, data)?;
    (0..config.rounds)
        .map(|_| run_round(&mut server, &mut clients, config, data, Execution::Sequential))
        .collect()
}

/// Total local optimizer steps a federation performs over all rounds.
pub fn federated_step_count(config: &FederationConfig, client_counts: &[usize]) -> usize {
    (0..config.rounds)
        .map(|round| {
            sample_clients(config, round)
                .iter()
                .map(|&c| config.local_epochs * client_counts[c].div_ceil(config.batch_size))
                .sum::<usize>()
        })
        .sum()
}

/// Outcome of pooled single-model training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentralizedOutcome {
    pub steps: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub holdout_accuracy: f64,
}

/// Trains one adapter of rank `max r_k` on the pooled training set with
/// the federation's model, initialization, optimizer and batch size for
/// exactly `steps` optimizer steps.
pub fn train_centralized(config: &FederationConfig, data: &TaskData, steps: usize) -> Result<CentralizedOutcome> {
    config.validate()?;
    let (theta0, arch) = build_model(config, data.train.d_in(), data.train.n_classes);
    let (d, k) = theta0.shape();
    let rank = config.client_ranks.iter().copied().max().unwrap_or(1);
    let (q, r) = thin_qr(&theta0);
    let (base, mut adapter) = init_from_qr(&theta0, &q, &r, rank, config.server_rank, config.scaling_for(rank))?;
    let mut opt_a = AdamWState::new(rank, k, config.optimizer);
    let mut opt_b = AdamWState::new(d, rank, config.optimizer);
    let mut bias = Matrix::zeros(1, k);
    let mut opt_bias = AdamWState::new(1, k, config.optimizer);
    let pooled = data.train.as_batch();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.training_seed, &[STREAM_LOCAL, u64::MAX]));
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    let mut done = 0;
    while done < steps {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            if done == steps {
                break;
            }
            let batch = gather(&pooled, chunk)?;
            let w = crate::lora::effective_weight(&base, &adapter)?;
            let out = forward_loss_at(&arch, &w, &bias, &batch)?;
            let (gb, ga) = factor_gradients(&adapter, &out.weight_grad)?;
            opt_a.update(&mut adapter.a_factor, &ga)?;
            opt_b.update(&mut adapter.b_factor, &gb)?;
            if config.train_bias {
                opt_bias.update(&mut bias, &out.bias_grad)?;
            }
            done += 1;
        }
    }
    let w = crate::lora::effective_weight(&base, &adapter)?;
    let train_loss = forward_loss_at(&arch, &w, &bias, &pooled)?.loss;
    Ok(CentralizedOutcome {
        steps,
        train_loss,
        train_accuracy: evaluate_at(&arch, &w, &bias, &pooled)?,
        holdout_accuracy: evaluate_at(&arch, &w, &bias, &data.holdout.as_batch())?,
    })
}
