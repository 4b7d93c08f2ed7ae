//! In-process simulation of the seed-broadcast training protocol.
//!
//! Each round the [`Server`] draws a fresh seed `ψ`, derives one sketch per
//! sketch-enabled layer from `(ψ, round, layer)` and broadcasts `W̃ = W S`
//! with the seed. Clients regenerate the same sketches, run local sketched
//! backpropagation and upload `Γ` (distributed SGD) or a sketched weight
//! delta (FedAvg). The server maps the aggregate back through `Sᵀ`.

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::Serialize;

use crate::data::{partition, Dataset};
use crate::error::{dim_err, Error, Result};
use crate::linalg::Matrix;
use crate::model::{Arch, Model, Net, ParamRef};
use crate::rng::{derive_seed, SplitMix64};
use crate::sketch::{generate, SketchKind, SketchMatrix, SketchSpec};

/// Seed-derivation "round" slots reserved for non-protocol randomness.
const CLIENT_STREAM: u64 = u64::MAX;
const PARTITION_STREAM: u64 = u64::MAX - 1;
const SAMPLING_STREAM: u64 = u64::MAX - 2;
const BROADCAST_STREAM: u64 = u64::MAX - 3;
const INIT_STREAM: u64 = u64::MAX - 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Dsgd,
    FedAvg,
}

/// Which sketch to use and the compression `q` (so `s = ⌊d_in/q⌋`) for each
/// round. `kind: None` turns sketching off.
#[derive(Debug, Clone, PartialEq)]
pub struct SketchPlan {
    pub kind: Option<SketchKind>,
    /// Round `t` uses `qs[t % qs.len()]`.
    pub qs: Vec<usize>,
}

impl SketchPlan {
    pub fn off() -> Self {
        Self {
            kind: None,
            qs: vec![2],
        }
    }

    pub fn constant(kind: SketchKind, q: usize) -> Self {
        Self {
            kind: Some(kind),
            qs: vec![q],
        }
    }

    pub fn q_for_round(&self, round: u64) -> usize {
        self.qs[(round % self.qs.len() as u64) as usize]
    }

    fn validate(&self) -> Result<()> {
        if self.qs.is_empty() {
            return Err(Error::Config("empty sketch schedule".into()));
        }
        if self.kind.is_some() && self.qs.iter().any(|&q| q < 2) {
            return Err(Error::Config("compression q must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub clients: usize,
    /// Fraction `c ∈ (0, 1]` of clients sampled each round.
    pub participation: f64,
    pub algorithm: Algorithm,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub sketch: SketchPlan,
    pub rounds: usize,
    pub eval_every: usize,
    pub seed: u64,
    /// Record wall-clock time in metrics. Off by default because it makes
    /// otherwise identical runs produce different output.
    pub wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            clients: 10,
            participation: 1.0,
            algorithm: Algorithm::Dsgd,
            local_epochs: 1,
            batch_size: 32,
            lr: 0.01,
            sketch: SketchPlan::constant(SketchKind::CountSketch, 2),
            rounds: 10,
            eval_every: 1,
            seed: 0,
            wall_clock: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.clients == 0 {
            return bad("at least one client is required");
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return bad("participation must be in (0, 1]");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 || self.local_epochs == 0 || self.eval_every == 0 {
            return bad("batch size, local epochs and eval period must be positive");
        }
        self.sketch.validate()
    }

    /// `⌈c·m⌉`, guarding against `0.3·10 = 3.0000000000000004`.
    pub fn clients_per_round(&self) -> usize {
        let k = (self.participation * self.clients as f64 - 1e-9).ceil() as usize;
        k.clamp(1, self.clients)
    }

    /// Seed for model initialization, derived from the run seed.
    pub fn init_seed(&self) -> u64 {
        derive_seed(self.seed, INIT_STREAM, 0)
    }
}

/// How a client reconstructs the sketch of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerDescriptor {
    /// Full weights were sent.
    Identity,
    Sketched {
        d_in: usize,
        s: usize,
        kind: SketchKind,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerDown {
    /// `W̃ = W S` (`d_out × s`) or `W` for identity layers.
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub descriptor: LayerDescriptor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMsgDown {
    pub round: u64,
    pub seed: u64,
    pub layers: Vec<LayerDown>,
}

impl RoundMsgDown {
    /// Regenerates every layer's sketch from `(ψ, round, layer)` and checks
    /// it against the descriptors, the transmitted shapes and `arch`.
    pub fn sketches(&self, arch: &Arch) -> Result<Vec<Option<SketchMatrix>>> {
        let ops: Vec<_> = arch.param_ops().collect();
        if ops.len() != self.layers.len() {
            return Err(Error::Protocol(format!(
                "message has {} layers, architecture {}",
                self.layers.len(),
                ops.len()
            )));
        }
        ops.iter()
            .zip(&self.layers)
            .enumerate()
            .map(|(l, (op, layer))| {
                let (d_out, d_in) = op.weight_shape().expect("parameter op");
                let (sketch, cols) = match layer.descriptor {
                    LayerDescriptor::Identity => (None, d_in),
                    LayerDescriptor::Sketched { d_in: dd, s, kind } => {
                        if dd != d_in {
                            return Err(Error::Protocol(format!(
                                "layer {l}: descriptor d_in {dd}, architecture {d_in}"
                            )));
                        }
                        let seed = derive_seed(self.seed, self.round, l as u64);
                        let sk = generate(&SketchSpec {
                            d: d_in,
                            s,
                            kind,
                            seed,
                        })
                        .map_err(|e| Error::Protocol(format!("layer {l}: {e}")))?;
                        (Some(sk), s)
                    }
                };
                if layer.weight.shape() != (d_out, cols) || layer.bias.len() != d_out {
                    return Err(Error::Protocol(format!(
                        "layer {l}: weight {:?} does not match descriptor",
                        layer.weight.shape()
                    )));
                }
                Ok(sketch)
            })
            .collect()
    }

    /// Serialized size in bytes; equals `encode().len()`.
    pub fn wire_size(&self) -> usize {
        16 + 4 + self.layers.iter().map(LayerDown::wire_size).sum::<usize>()
    }

    /// Little-endian layout: round u64, seed u64, layer count u32, then per
    /// layer a descriptor (tag u8, d_in u32, s u32, q u32), the weight
    /// (rows u32, cols u32, f64 data) and the bias (len u32, f64 data).
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_size());
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            let (tag, d_in, s, q) = match l.descriptor {
                LayerDescriptor::Identity => (0u8, 0, 0, 0),
                LayerDescriptor::Sketched { d_in, s, kind } => match kind {
                    SketchKind::CountSketch => (1, d_in, s, 0),
                    SketchKind::UniformSampling => (2, d_in, s, 0),
                    SketchKind::PermutedCountSketch { q } => (3, d_in, s, q),
                },
            };
            out.push(tag);
            for v in [d_in, s, q] {
                out.extend_from_slice(&(v as u32).to_le_bytes());
            }
            put_matrix(&mut out, &l.weight);
            put_vec(&mut out, &l.bias);
        }
        out
    }
}

impl LayerDown {
    /// Bytes of the transmitted weight matrix alone.
    pub fn weight_payload_bytes(&self) -> usize {
        self.weight.data().len() * 8
    }

    fn wire_size(&self) -> usize {
        13 + 8 + self.weight_payload_bytes() + 4 + self.bias.len() * 8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpKind {
    /// `Γᵢ = Gᵢᵀ X̃ᵢ` and bias gradients from one batch.
    Gamma,
    /// `W̃_initial − W̃_final` and the bias delta after local training.
    SketchedDelta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerUp {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMsgUp {
    pub client_id: usize,
    pub round: u64,
    pub kind: UpKind,
    pub layers: Vec<LayerUp>,
    pub loss: f64,
    pub samples: usize,
}

impl RoundMsgUp {
    pub fn wire_size(&self) -> usize {
        8 + 8
            + 1
            + 8
            + 8
            + 4
            + self
                .layers
                .iter()
                .map(|l| 8 + l.weight.data().len() * 8 + 4 + l.bias.len() * 8)
                .sum::<usize>()
    }

    /// Little-endian layout: client id u64, round u64, kind u8, loss f64,
    /// samples u64, layer count u32, then per layer weight and bias as in
    /// [`RoundMsgDown::encode`].
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_size());
        out.extend_from_slice(&(self.client_id as u64).to_le_bytes());
        out.extend_from_slice(&self.round.to_le_bytes());
        out.push(match self.kind {
            UpKind::Gamma => 0,
            UpKind::SketchedDelta => 1,
        });
        out.extend_from_slice(&self.loss.to_le_bytes());
        out.extend_from_slice(&(self.samples as u64).to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            put_matrix(&mut out, &l.weight);
            put_vec(&mut out, &l.bias);
        }
        out
    }
}

fn put_matrix(out: &mut Vec<u8>, m: &Matrix) {
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_vec(out: &mut Vec<u8>, v: &[f64]) {
    out.extend_from_slice(&(v.len() as u32).to_le_bytes());
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// Sketches for every parameter layer of `arch` in round `round`.
pub fn round_sketches(
    arch: &Arch,
    plan: &SketchPlan,
    psi: u64,
    round: u64,
) -> Result<Vec<Option<SketchMatrix>>> {
    let q = plan.q_for_round(round);
    arch.param_ops()
        .enumerate()
        .map(|(l, op)| match plan.kind {
            Some(kind) if op.sketch_enabled() => {
                let (_, d_in) = op.weight_shape().expect("parameter op");
                let kind = match kind {
                    SketchKind::PermutedCountSketch { .. } => SketchKind::PermutedCountSketch { q },
                    k => k,
                };
                let seed = derive_seed(psi, round, l as u64);
                generate(&SketchSpec::with_compression(d_in, q, kind, seed)).map(Some)
            }
            _ => Ok(None),
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Server {
    model: Model,
    plan: SketchPlan,
    lr: f64,
    round: u64,
    seed_rng: SplitMix64,
    pending: Option<Vec<Option<SketchMatrix>>>,
}

impl Server {
    pub fn new(model: Model, plan: SketchPlan, lr: f64, seed: u64) -> Result<Self> {
        plan.validate()?;
        Ok(Self {
            model,
            plan,
            lr,
            round: 0,
            seed_rng: SplitMix64::new(derive_seed(seed, BROADCAST_STREAM, 0)),
            pending: None,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    /// Index of the round in progress (or about to start).
    pub fn round(&self) -> u64 {
        self.round
    }

    /// Sketches of the round in progress, if one has been broadcast.
    pub fn current_sketches(&self) -> Option<&[Option<SketchMatrix>]> {
        self.pending.as_deref()
    }

    /// Draws `ψ`, sketches every enabled layer and builds the broadcast.
    /// Calling it again before aggregation restarts the round.
    pub fn broadcast_round(&mut self) -> Result<RoundMsgDown> {
        let psi = self.seed_rng.next_word();
        let sketches = round_sketches(self.model.arch(), &self.plan, psi, self.round)?;
        let weights = self.model.sketched_weights(&sketches)?;
        let layers = weights
            .into_iter()
            .zip(self.model.params())
            .zip(&sketches)
            .map(|((weight, p), s)| LayerDown {
                weight,
                bias: p.bias.clone(),
                descriptor: match s {
                    Some(s) => LayerDescriptor::Sketched {
                        d_in: s.d(),
                        s: s.s(),
                        kind: s.kind(),
                    },
                    None => LayerDescriptor::Identity,
                },
            })
            .collect();
        self.pending = Some(sketches);
        Ok(RoundMsgDown {
            round: self.round,
            seed: psi,
            layers,
        })
    }

    /// Applies the round's uploads and advances the round counter.
    ///
    /// `Gamma` uploads: `W ← W − η·(mean Γᵢ) Sᵀ`. `SketchedDelta` uploads:
    /// `W ← W − (Σ nᵢ Δ̃ᵢ / Σ nᵢ) Sᵀ`. Biases follow the same rule.
    pub fn aggregate_and_update(&mut self, msgs: &[RoundMsgUp]) -> Result<()> {
        let sketches = self
            .pending
            .as_ref()
            .ok_or_else(|| Error::Protocol("no round in progress".into()))?;
        let first = msgs
            .first()
            .ok_or_else(|| Error::Protocol("no uploads to aggregate".into()))?;
        for m in msgs {
            if m.round != self.round {
                return Err(Error::StaleRound {
                    expected: self.round,
                    got: m.round,
                });
            }
            if m.kind != first.kind || m.layers.len() != sketches.len() {
                return Err(Error::Protocol(format!(
                    "inconsistent upload from client {}",
                    m.client_id
                )));
            }
        }
        let weights: Vec<f64> = match first.kind {
            UpKind::Gamma => vec![self.lr / msgs.len() as f64; msgs.len()],
            UpKind::SketchedDelta => {
                let total: usize = msgs.iter().map(|m| m.samples).sum();
                if total == 0 {
                    return Err(Error::Protocol("uploads report zero samples".into()));
                }
                msgs.iter()
                    .map(|m| m.samples as f64 / total as f64)
                    .collect()
            }
        };
        let mut updates = Vec::with_capacity(sketches.len());
        for (l, sketch) in sketches.iter().enumerate() {
            let shape = msgs[0].layers[l].weight.shape();
            let mut acc = Matrix::zeros(shape.0, shape.1);
            let mut bias = vec![0.0; msgs[0].layers[l].bias.len()];
            for (m, &w) in msgs.iter().zip(&weights) {
                let lu = &m.layers[l];
                acc.axpy(w, &lu.weight)?;
                if lu.bias.len() != bias.len() {
                    return Err(dim_err("aggregate_and_update", "bias length differs"));
                }
                for (b, g) in bias.iter_mut().zip(&lu.bias) {
                    *b += w * g;
                }
            }
            let full = match sketch {
                Some(s) => s.apply_transpose(&acc)?,
                None => acc,
            };
            updates.push((full, bias));
        }
        for (p, (full, bias)) in self.model.params_mut().iter_mut().zip(updates) {
            p.weight.axpy(-1.0, &full)?;
            for (b, g) in p.bias.iter_mut().zip(&bias) {
                *b -= g;
            }
        }
        self.pending = None;
        self.round += 1;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Client {
    id: usize,
    data: Dataset,
    rng: SplitMix64,
}

impl Client {
    pub fn new(id: usize, data: Dataset, seed: u64) -> Self {
        Self {
            id,
            data,
            rng: SplitMix64::new(seed),
        }
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    /// One forward/backward pass on a batch of `batch` local samples drawn
    /// without replacement.
    pub fn round_dsgd(
        &mut self,
        arch: &Arch,
        msg: &RoundMsgDown,
        batch: usize,
    ) -> Result<RoundMsgUp> {
        if self.data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let sketches = msg.sketches(arch)?;
        let net = client_net(arch, msg, &sketches, None)?;
        let n = self.data.len();
        let idx = index::sample(&mut self.rng, n, batch.min(n)).into_vec();
        let (x, y) = self.data.batch(&idx);
        let (loss, grads) = net.loss_and_grads(&x, &y)?;
        Ok(RoundMsgUp {
            client_id: self.id,
            round: msg.round,
            kind: UpKind::Gamma,
            layers: grads
                .into_iter()
                .map(|g| LayerUp {
                    weight: g.gamma,
                    bias: g.grad_bias,
                })
                .collect(),
            loss,
            samples: idx.len(),
        })
    }

    /// `epochs` passes of minibatch SGD on the sketched weights with the
    /// round's sketches held fixed; uploads `W̃_initial − W̃_final`.
    pub fn round_fedavg(
        &mut self,
        arch: &Arch,
        msg: &RoundMsgDown,
        epochs: usize,
        batch: usize,
        lr: f64,
    ) -> Result<RoundMsgUp> {
        if self.data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let sketches = msg.sketches(arch)?;
        let mut local: Vec<LayerUp> = msg
            .layers
            .iter()
            .map(|l| LayerUp {
                weight: l.weight.clone(),
                bias: l.bias.clone(),
            })
            .collect();
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        let (mut loss_sum, mut steps) = (0.0, 0usize);
        for _ in 0..epochs {
            order.shuffle(&mut self.rng);
            for chunk in order.chunks(batch.max(1)) {
                let (x, y) = self.data.batch(chunk);
                let (loss, grads) =
                    client_net(arch, msg, &sketches, Some(&local))?.loss_and_grads(&x, &y)?;
                for (l, g) in local.iter_mut().zip(grads) {
                    l.weight.axpy(-lr, &g.gamma)?;
                    for (b, gb) in l.bias.iter_mut().zip(&g.grad_bias) {
                        *b -= lr * gb;
                    }
                }
                loss_sum += loss;
                steps += 1;
            }
        }
        let layers = msg
            .layers
            .iter()
            .zip(local)
            .map(|(init, fin)| {
                Ok(LayerUp {
                    weight: init.weight.sub(&fin.weight)?,
                    bias: init
                        .bias
                        .iter()
                        .zip(&fin.bias)
                        .map(|(a, b)| a - b)
                        .collect(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(RoundMsgUp {
            client_id: self.id,
            round: msg.round,
            kind: UpKind::SketchedDelta,
            layers,
            loss: loss_sum / steps as f64,
            samples: self.data.len(),
        })
    }
}

/// Network view over the broadcast weights, or over locally updated copies.
fn client_net<'a>(
    arch: &'a Arch,
    msg: &'a RoundMsgDown,
    sketches: &'a [Option<SketchMatrix>],
    local: Option<&'a [LayerUp]>,
) -> Result<Net<'a>> {
    let params = (0..msg.layers.len())
        .map(|l| {
            let (weight, bias) = match local {
                Some(loc) => (&loc[l].weight, loc[l].bias.as_slice()),
                None => (&msg.layers[l].weight, msg.layers[l].bias.as_slice()),
            };
            ParamRef {
                weight,
                bias,
                sketch: sketches[l].as_ref(),
            }
        })
        .collect();
    Net::new(arch, params)
}

/// Inference-mode mean loss and top-1 accuracy on `ds`.
pub fn evaluate(model: &Model, ds: &Dataset) -> Result<(f64, f64)> {
    model.net().evaluate(ds.features(), ds.labels(), 512)
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRecord {
    /// Completed rounds.
    pub round: u64,
    /// `"train"` (mean client loss over the rounds since the previous
    /// record) or `"eval"` (held-out loss and accuracy).
    pub phase: &'static str,
    pub loss: f64,
    pub accuracy: Option<f64>,
    /// Cumulative bytes sent to / received from all participating clients.
    pub bytes_down: u64,
    pub bytes_up: u64,
    pub wall_ms: Option<u64>,
}

/// Hooks for attack harnesses that watch a training run.
pub trait RoundObserver {
    /// Called after each broadcast with the server's model before the
    /// round's update.
    fn on_broadcast(&mut self, _msg: &RoundMsgDown, _model: &Model) -> Result<()> {
        Ok(())
    }

    /// Called with the uploads of the sampled clients, ordered by client id.
    fn on_uploads(&mut self, _msg: &RoundMsgDown, _ups: &[RoundMsgUp]) -> Result<()> {
        Ok(())
    }
}

impl RoundObserver for () {}

pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<MetricsRecord>,
}

/// Builds the clients for a run: shards `train` with a seed derived from
/// the run seed and gives each client its own batch-selection stream.
pub fn make_clients(cfg: &TrainConfig, train: &Dataset) -> Result<Vec<Client>> {
    let shards = partition(
        train,
        cfg.clients,
        derive_seed(cfg.seed, PARTITION_STREAM, 0),
    )?;
    Ok(shards
        .into_iter()
        .enumerate()
        .map(|(i, d)| Client::new(i, d, derive_seed(cfg.seed, CLIENT_STREAM, i as u64)))
        .collect())
}

pub fn run_training(
    cfg: &TrainConfig,
    model: Model,
    train: &Dataset,
    eval: &Dataset,
    observer: &mut dyn RoundObserver,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if eval.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let arch = model.arch().clone();
    let mut clients = make_clients(cfg, train)?;
    let mut server = Server::new(model, cfg.sketch.clone(), cfg.lr, cfg.seed)?;
    let per_round = cfg.clients_per_round();
    let start = std::time::Instant::now();
    let (mut bytes_down, mut bytes_up) = (0u64, 0u64);
    let (mut loss_acc, mut loss_rounds) = (0.0, 0usize);
    let mut history = Vec::new();

    for t in 0..cfg.rounds as u64 {
        let msg = server.broadcast_round()?;
        observer.on_broadcast(&msg, server.model())?;

        let mut pick = SplitMix64::new(derive_seed(cfg.seed, SAMPLING_STREAM, t));
        let mut chosen = vec![false; cfg.clients];
        for i in index::sample(&mut pick, cfg.clients, per_round) {
            chosen[i] = true;
        }
        let ups: Vec<RoundMsgUp> = clients
            .par_iter_mut()
            .filter(|c| chosen[c.id()])
            .map(|c| match cfg.algorithm {
                Algorithm::Dsgd => c.round_dsgd(&arch, &msg, cfg.batch_size),
                Algorithm::FedAvg => {
                    c.round_fedavg(&arch, &msg, cfg.local_epochs, cfg.batch_size, cfg.lr)
                }
            })
            .collect::<Result<_>>()?;
        observer.on_uploads(&msg, &ups)?;

        bytes_down += (msg.wire_size() * ups.len()) as u64;
        bytes_up += ups.iter().map(|u| u.wire_size() as u64).sum::<u64>();
        let total: usize = ups.iter().map(|u| u.samples).sum();
        loss_acc += ups.iter().map(|u| u.loss * u.samples as f64).sum::<f64>() / total as f64;
        loss_rounds += 1;
        server.aggregate_and_update(&ups)?;

        let done = t + 1;
        if done % cfg.eval_every as u64 == 0 || done == cfg.rounds as u64 {
            let wall_ms = cfg.wall_clock.then(|| start.elapsed().as_millis() as u64);
            history.push(MetricsRecord {
                round: done,
                phase: "train",
                loss: loss_acc / loss_rounds as f64,
                accuracy: None,
                bytes_down,
                bytes_up,
                wall_ms,
            });
            let (loss, acc) = evaluate(server.model(), eval)?;
            history.push(MetricsRecord {
                round: done,
                phase: "eval",
                loss,
                accuracy: Some(acc),
                bytes_down,
                bytes_up,
                wall_ms,
            });
            loss_acc = 0.0;
            loss_rounds = 0;
        }
    }
    Ok(TrainOutcome {
        model: server.into_model(),
        history,
    })
}
