//! Property inference against a two-client training run.
//!
//! The victim trains on batches that sometimes carry a hidden binary
//! property. Each round the attacker turns what it can observe into an
//! estimate of the victim's first-layer gradient, and scores it with a
//! logistic-regression model trained on gradients of its own
//! property-labelled batches, computed the way its vantage point allows.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fedsim::{LayerUp, RoundMsgDown, RoundMsgUp, Server, SketchPlan, UpKind};
use crate::layers::sigmoid;
use crate::linalg::Matrix;
use crate::model::{Arch, Model, Net, ParamRef};
use crate::rng::{derive_seed, SplitMix64};
use crate::sketch::{SketchKind, SketchMatrix};

use super::{estimate_peer_sum, AttackView, Estimator};

/// Who attacks, and whether training is sketched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PiaMode {
    /// Unsketched training; a client recovers the victim's gradient exactly.
    NoDefense,
    /// Sketched training; a client estimates it with option I.
    DefendedClient,
    /// Sketched training; the server back-projects the victim's `Γ`.
    DefendedServer,
}

impl PiaMode {
    pub fn name(&self) -> &'static str {
        match self {
            PiaMode::NoDefense => "no_defense",
            PiaMode::DefendedClient => "defended_client",
            PiaMode::DefendedServer => "defended_server",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PiaConfig {
    pub rounds: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub hidden: usize,
    pub q: usize,
    /// Probability that a victim batch carries the property.
    pub property_rate: f64,
    /// Property-positive and negative batches the attacker labels per round.
    pub aux_pos: usize,
    pub aux_neg: usize,
    pub l2: f64,
    pub seed: u64,
}

impl Default for PiaConfig {
    fn default() -> Self {
        Self {
            rounds: 300,
            batch_size: 32,
            lr: 0.01,
            hidden: 16,
            q: 2,
            property_rate: 0.3,
            aux_pos: 2,
            aux_neg: 8,
            l2: 1e-2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PiaReport {
    pub mode: PiaMode,
    /// AUC on the victim's round stream.
    pub auc: f64,
    /// AUC of the attack model on its own training set.
    pub train_auc: f64,
    pub victim_rounds: usize,
    pub victim_positive: usize,
}

/// Row-standardized logistic regression.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    mean: Vec<f64>,
    scale: Vec<f64>,
    weights: Vec<f64>,
    bias: f64,
}

impl LogisticModel {
    /// Logit for one feature vector.
    pub fn score(&self, x: &[f64]) -> f64 {
        let mut z = self.bias;
        for (j, v) in x.iter().enumerate() {
            z += self.weights[j] * (v - self.mean[j]) / self.scale[j];
        }
        z
    }
}

/// Fits `P(y = 1 | x) = σ(wᵀ x̄ + b)` on standardized features `x̄` by
/// full-batch gradient descent on the L2-penalized mean log loss.
pub fn logistic_fit(x: &Matrix, y: &[bool], l2: f64, iterations: usize) -> Result<LogisticModel> {
    let (n, d) = x.shape();
    if n == 0 || y.len() != n {
        return Err(Error::EmptyDataset);
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v / n as f64;
        }
    }
    let mut scale = vec![0.0; d];
    for i in 0..n {
        for ((s, v), m) in scale.iter_mut().zip(x.row(i)).zip(&mean) {
            *s += (v - m).powi(2) / n as f64;
        }
    }
    scale
        .iter_mut()
        .for_each(|s| *s = if *s > 0.0 { s.sqrt() } else { 1.0 });
    let xs = Matrix::from_fn(n, d, |i, j| (x.get(i, j) - mean[j]) / scale[j]);
    let targets: Vec<f64> = y.iter().map(|&b| f64::from(u8::from(b))).collect();

    let (mut w, mut b) = (vec![0.0; d], 0.0);
    let step = 0.5;
    for _ in 0..iterations {
        let mut gw: Vec<f64> = w.iter().map(|wj| l2 * wj).collect();
        let mut gb = 0.0;
        for (i, t) in targets.iter().enumerate() {
            let row = xs.row(i);
            let z = b + row.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            let r = (sigmoid(z) - t) / n as f64;
            gb += r;
            for (g, v) in gw.iter_mut().zip(row) {
                *g += r * v;
            }
        }
        for (wj, g) in w.iter_mut().zip(&gw) {
            *wj -= step * g;
        }
        b -= step * gb;
    }
    Ok(LogisticModel {
        mean,
        scale,
        weights: w,
        bias: b,
    })
}

/// Rank-based (Mann–Whitney) AUC; tied scores count one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Config("scores and labels differ in length".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of (1-based, tie-averaged) ranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| labels[k]).count() as f64 * avg;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

/// Elementwise square of the flattened first-layer gradient. The property
/// shifts a block of inputs, which moves those gradient columns by a
/// multiple of the unit's error signal whose sign varies; squaring makes
/// the shift visible to a linear model.
fn features(g: &Matrix) -> Vec<f64> {
    g.data().iter().map(|v| v * v).collect()
}

/// Full-coordinate first-layer gradient of a batch as seen from the given
/// weights: `Γ Sᵀ` when sketched, the plain gradient otherwise.
fn first_layer_grad(
    arch: &Arch,
    msg: &RoundMsgDown,
    sketches: &[Option<SketchMatrix>],
    x: &Matrix,
    y: &[usize],
) -> Result<(Matrix, Vec<LayerUp>, f64)> {
    let params = msg
        .layers
        .iter()
        .zip(sketches)
        .map(|(l, s)| ParamRef {
            weight: &l.weight,
            bias: &l.bias,
            sketch: s.as_ref(),
        })
        .collect();
    let (loss, grads) = Net::new(arch, params)?.loss_and_grads(x, y)?;
    let full = match &sketches[0] {
        Some(s) => s.apply_transpose(&grads[0].gamma)?,
        None => grads[0].gamma.clone(),
    };
    let ups = grads
        .into_iter()
        .map(|g| LayerUp {
            weight: g.gamma,
            bias: g.grad_bias,
        })
        .collect();
    Ok((full, ups, loss))
}

/// Runs a two-client training session on `data` (which must carry property
/// flags) and attacks the victim's round stream.
///
/// The first half of `data` is the victim's shard, the second half the
/// attacker's auxiliary set.
pub fn property_inference_attack(
    data: &Dataset,
    mode: PiaMode,
    cfg: &PiaConfig,
) -> Result<PiaReport> {
    let flags = data
        .property()
        .ok_or_else(|| Error::Config("property inference needs property flags".into()))?;
    let half = data.len() / 2;
    let split = |range: std::ops::Range<usize>| -> (Vec<usize>, Vec<usize>) {
        range.partition(|&i| flags[i])
    };
    let (victim_pos, victim_neg) = split(0..half);
    let (aux_pos, aux_neg) = split(half..data.len());
    let b = cfg.batch_size;
    if [&victim_pos, &victim_neg, &aux_pos, &aux_neg]
        .iter()
        .any(|v| v.len() < b)
    {
        return Err(Error::Config(
            "too few samples per property class for one batch".into(),
        ));
    }

    let arch = Arch::mlp(&[data.dim(), cfg.hidden, 1], false)?;
    let model = Model::init(
        arch.clone(),
        &mut SplitMix64::new(derive_seed(cfg.seed, 0, 0)),
    );
    let plan = match mode {
        PiaMode::NoDefense => SketchPlan::off(),
        _ => SketchPlan::constant(SketchKind::CountSketch, cfg.q),
    };
    let mut server = Server::new(model, plan, cfg.lr, derive_seed(cfg.seed, 0, 1))?;
    let mut rng = SplitMix64::new(derive_seed(cfg.seed, 0, 2));
    let draw = |pool: &[usize], rng: &mut SplitMix64| -> Vec<usize> {
        index::sample(rng, pool.len(), b)
            .into_iter()
            .map(|i| pool[i])
            .collect()
    };

    let m = 2usize;
    let mut train_x: Vec<Vec<f64>> = Vec::new();
    let mut train_y: Vec<bool> = Vec::new();
    let mut victim_x: Vec<Vec<f64>> = Vec::new();
    let mut victim_y: Vec<bool> = Vec::new();
    let mut prev: Option<(RoundMsgDown, Matrix)> = None;

    for _ in 0..=cfg.rounds {
        let msg = server.broadcast_round()?;
        let sketches = msg.sketches(&arch)?;

        // Client attacker: finish last round's estimate now that W̃_new is known.
        if let Some((old, own_full)) = prev.take() {
            if mode != PiaMode::DefendedServer {
                let mut view = AttackView::from_broadcasts(&arch, &old, &msg, 0, m)?;
                view.own_delta = Some(own_full.scale(cfg.lr));
                let g = estimate_peer_sum(&view, Estimator::Option1)?.scale(1.0 / cfg.lr);
                victim_x.push(features(&g));
            }
        }
        if victim_y.len() == cfg.rounds {
            break;
        }

        let has_property = rng.random_bool(cfg.property_rate);
        let idx = if has_property {
            draw(&victim_pos, &mut rng)
        } else {
            draw(&victim_neg, &mut rng)
        };
        let (x, y) = data.batch(&idx);
        let (victim_full, victim_up, victim_loss) =
            first_layer_grad(&arch, &msg, &sketches, &x, &y)?;
        victim_y.push(has_property);
        if mode == PiaMode::DefendedServer {
            victim_x.push(features(&victim_full));
        }

        let mut mixed: Vec<usize> = aux_pos.iter().chain(&aux_neg).copied().collect();
        mixed.shuffle(&mut rng);
        let (ax, ay) = data.batch(&mixed[..b]);
        let (attacker_full, attacker_up, attacker_loss) =
            first_layer_grad(&arch, &msg, &sketches, &ax, &ay)?;

        for k in 0..cfg.aux_pos + cfg.aux_neg {
            let positive = k < cfg.aux_pos;
            let idx = if positive {
                draw(&aux_pos, &mut rng)
            } else {
                draw(&aux_neg, &mut rng)
            };
            let (x, y) = data.batch(&idx);
            let (g, _, _) = first_layer_grad(&arch, &msg, &sketches, &x, &y)?;
            train_x.push(features(&g));
            train_y.push(positive);
        }

        let ups = [(0, victim_up, victim_loss), (1, attacker_up, attacker_loss)].map(
            |(client_id, layers, loss)| RoundMsgUp {
                client_id,
                round: msg.round,
                kind: UpKind::Gamma,
                layers,
                loss,
                samples: b,
            },
        );
        server.aggregate_and_update(&ups)?;
        prev = Some((msg, attacker_full));
    }

    let to_matrix = |rows: &[Vec<f64>]| -> Result<Matrix> {
        let d = rows.first().map_or(0, Vec::len);
        Matrix::new(rows.len(), d, rows.concat())
    };
    let tx = to_matrix(&train_x)?;
    let model = logistic_fit(&tx, &train_y, cfg.l2, 300)?;
    let train_scores: Vec<f64> = train_x.iter().map(|r| model.score(r)).collect();
    let victim_scores: Vec<f64> = victim_x.iter().map(|r| model.score(r)).collect();
    Ok(PiaReport {
        mode,
        auc: auc(&victim_scores, &victim_y)?,
        train_auc: auc(&train_scores, &train_y)?,
        victim_rounds: victim_y.len(),
        victim_positive: victim_y.iter().filter(|&&p| p).count(),
    })
}
