//! The optimization loop: Adam updates, the warm-up schedule, per-batch
//! neighbor selection, confidence weighting, and metrics logging.
//!
//! Confidence weights are computed from the current batch codes and enter
//! the objective as constants: gradients do not flow through the weight
//! path, only through the classification and contrastive terms.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{MultimodalDataset, Split};
use crate::error::{Error, Result};
use crate::losses::{
    batch_cosines, bsch_loss, confidence_weight, cscc_loss, neighbor_soft_label,
    ContrastiveParams, LossBreakdown, NeighborSet, SimilarityScaling,
};
use crate::model::{BranchConfig, HashModel, Modality, ModelConfig, TapedModel};
use crate::ndmath::{Matrix, Var};
use crate::retrieval::{evaluate_model, CrossModalMap};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPSILON: f64 = 1e-8;

/// Which objective terms are dropped, mirroring the ablation variants.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    pub disable_cscc: bool,
    pub disable_bsch: bool,
    pub disable_weighting: bool,
    pub disable_attraction: bool,
}

/// Which space per-batch neighbors are selected in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NeighborSpace {
    /// Current continuous hash codes (adapts as training proceeds).
    Code,
    /// Raw input features.
    Raw,
}

/// All training hyperparameters, including the model widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub xi: f64,
    pub xi_repulsion: Option<f64>,
    pub margin: f64,
    pub neighbors_k: usize,
    pub seed: u64,
    pub code_length: usize,
    pub hidden_dim: usize,
    pub image_layers: usize,
    pub text_layers: usize,
    pub ablation: AblationFlags,
    pub neighbor_space: NeighborSpace,
    pub similarity_scaling: SimilarityScaling,
    /// Evaluate query-set MAP after every epoch when splits allow it.
    pub track_map: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 128,
            epochs: 50,
            warmup_epochs: 10,
            alpha: 0.7,
            beta: 0.3,
            gamma: 0.5,
            xi: 1.0,
            xi_repulsion: None,
            margin: 0.2,
            neighbors_k: 8,
            seed: 42,
            code_length: 16,
            hidden_dim: 256,
            image_layers: 3,
            text_layers: 2,
            ablation: AblationFlags::default(),
            neighbor_space: NeighborSpace::Code,
            similarity_scaling: SimilarityScaling::Sqrt,
            track_map: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be at least 2"));
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return Err(Error::config(format!(
                "warmup_epochs {} must be below epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("xi", self.xi),
            ("margin", self.margin),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if self.gamma > 1.0 {
            return Err(Error::config("gamma must be in [0, 1]"));
        }
        if self.neighbors_k < 1 {
            return Err(Error::config("neighbors_k must be at least 1"));
        }
        if self.ablation.disable_cscc && self.ablation.disable_bsch {
            return Err(Error::config(
                "disabling both the classification and contrastive terms leaves an empty objective",
            ));
        }
        Ok(())
    }

    pub fn contrastive(&self) -> ContrastiveParams {
        ContrastiveParams {
            xi: self.xi,
            xi_repulsion: self.xi_repulsion,
            margin: self.margin,
            beta: self.beta,
            scaling: self.similarity_scaling,
        }
    }

    pub fn model_config(
        &self,
        image_dim: usize,
        text_dim: usize,
        num_classes: usize,
    ) -> ModelConfig {
        ModelConfig {
            image: BranchConfig {
                input_dim: image_dim,
                hidden_dim: self.hidden_dim,
                code_length: self.code_length,
                num_layers: self.image_layers,
            },
            text: BranchConfig {
                input_dim: text_dim,
                hidden_dim: self.hidden_dim,
                code_length: self.code_length,
                num_layers: self.text_layers,
            },
            num_classes,
        }
    }
}

/// Adam with bias correction over the model's parameter blocks.
#[derive(Debug, Clone)]
pub struct Adam {
    step: usize,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl Adam {
    pub fn new(params: &[(String, &Matrix)]) -> Adam {
        Adam {
            step: 0,
            first: params
                .iter()
                .map(|(_, p)| Matrix::zeros(p.rows(), p.cols()))
                .collect(),
            second: params
                .iter()
                .map(|(_, p)| Matrix::zeros(p.rows(), p.cols()))
                .collect(),
        }
    }

    pub fn timestep(&self) -> usize {
        self.step
    }

    /// One update over every block. A non-finite gradient aborts with a
    /// diagnostic naming the offending parameter block.
    pub fn step(
        &mut self,
        names: &[String],
        params: &mut [&mut Matrix],
        grads: &[Matrix],
        lr: f64,
    ) -> Result<()> {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.first.len());
        for (name, g) in names.iter().zip(grads) {
            if !g.is_finite_all() {
                return Err(Error::numeric(format!(
                    "non-finite gradient in parameter block {name}"
                )));
            }
        }
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            let pd = p.as_mut_slice();
            let gd = g.as_slice();
            let md = m.as_mut_slice();
            let vd = v.as_mut_slice();
            for i in 0..pd.len() {
                md[i] = ADAM_BETA1 * md[i] + (1.0 - ADAM_BETA1) * gd[i];
                vd[i] = ADAM_BETA2 * vd[i] + (1.0 - ADAM_BETA2) * gd[i] * gd[i];
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                pd[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
            }
        }
        Ok(())
    }
}

/// Top-K neighbors per anchor inside a batch, ranked by the mean of the
/// two per-modality cosine similarities. K is clamped to `batch - 1`
/// with a logged warning when the batch is too small.
pub fn select_batch_neighbors(feat1: &Matrix, feat2: &Matrix, k: usize) -> NeighborSet {
    let n = feat1.rows();
    debug_assert_eq!(n, feat2.rows());
    let k = if k >= n {
        log::warn!("neighbors_k {k} >= batch size {n}; clamping to {}", n - 1);
        n - 1
    } else {
        k
    };
    let cos1 = batch_cosines(feat1);
    let cos2 = batch_cosines(feat2);
    let mut indices = Vec::with_capacity(n);
    let mut sims1 = Vec::with_capacity(n);
    let mut sims2 = Vec::with_capacity(n);
    for i in 0..n {
        let mut scored: Vec<(usize, f64)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (j, 0.5 * (cos1.get(i, j) + cos2.get(i, j))))
            .collect();
        scored.sort_unstable_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .expect("finite cosines")
                .then(a.0.cmp(&b.0))
        });
        scored.truncate(k);
        indices.push(scored.iter().map(|&(j, _)| j).collect::<Vec<_>>());
        sims1.push(scored.iter().map(|&(j, _)| cos1.get(i, j)).collect::<Vec<_>>());
        sims2.push(scored.iter().map(|&(j, _)| cos2.get(i, j)).collect::<Vec<_>>());
    }
    NeighborSet {
        indices,
        sims: [sims1, sims2],
    }
}

/// Per-sample confidence weights for one batch from cross-modal neighbor
/// consensus.
pub fn batch_confidence_weights(
    feat1: &Matrix,
    feat2: &Matrix,
    labels: &Matrix,
    k: usize,
    gamma: f64,
) -> (Vec<f64>, NeighborSet) {
    let neighbors = select_batch_neighbors(feat1, feat2, k);
    let weights = (0..labels.rows())
        .map(|i| {
            let p = neighbor_soft_label(i, &neighbors, labels);
            confidence_weight(labels.row(i), &p, gamma)
        })
        .collect();
    (weights, neighbors)
}

/// A composed batch objective: the taped scalar plus its scalar parts.
pub struct BatchLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Composes the scheduled objective from already-forwarded codes.
///
/// `weights` enter as constants; pass all-ones during warm-up. Ablation
/// flags zero out the corresponding terms.
pub fn batch_objective(
    taped: &TapedModel,
    h1: &Var,
    h2: &Var,
    labels: &Matrix,
    weights: &[f64],
    config: &TrainConfig,
) -> Result<BatchLoss> {
    let mut total: Option<Var> = None;
    let mut breakdown = LossBreakdown {
        cscc: 0.0,
        attraction: 0.0,
        repulsion: 0.0,
        quantization: 0.0,
        total: 0.0,
        weights: weights.to_vec(),
    };

    if !config.ablation.disable_cscc {
        let z1 = taped.classify(Modality::Image, h1)?;
        let z2 = taped.classify(Modality::Text, h2)?;
        let cscc = cscc_loss(&z1, &z2, labels, weights)?;
        breakdown.cscc = cscc.scalar()?;
        total = Some(cscc);
    }

    if !config.ablation.disable_bsch {
        let terms = bsch_loss(h1, h2, labels, &config.contrastive())?;
        let mut bsch = terms.repulsion.add(&terms.quantization)?;
        if !config.ablation.disable_attraction {
            bsch = bsch.add(&terms.attraction)?;
            breakdown.attraction = terms.attraction.scalar()?;
        }
        breakdown.repulsion = terms.repulsion.scalar()?;
        breakdown.quantization = terms.quantization.scalar()?;
        let scaled = bsch.mul_scalar(config.alpha);
        total = Some(match total {
            Some(acc) => acc.add(&scaled)?,
            None => scaled,
        });
    }

    let total = total.ok_or_else(|| Error::config("empty objective"))?;
    breakdown.total = total.scalar()?;
    Ok(BatchLoss { total, breakdown })
}

/// Forwards a batch and composes the objective; the gradient check and
/// probe-batch evaluations go through this same path.
pub fn full_objective(
    taped: &TapedModel,
    image: &Matrix,
    text: &Matrix,
    labels: &Matrix,
    weights: &[f64],
    config: &TrainConfig,
) -> Result<BatchLoss> {
    let h1 = taped.forward(Modality::Image, image)?;
    let h2 = taped.forward(Modality::Text, text)?;
    batch_objective(taped, &h1, &h2, labels, weights, config)
}

/// One epoch's logged metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub cscc: f64,
    pub attraction: f64,
    pub repulsion: f64,
    pub quantization: f64,
    pub total: f64,
    pub mean_weight_clean: Option<f64>,
    pub mean_weight_noisy: Option<f64>,
    pub wall_time_ms: u64,
    pub map_i2t: Option<f64>,
    pub map_t2i: Option<f64>,
}

/// Per-sample confidence weights captured at one epoch, keyed by sample id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSnapshot {
    pub epoch: usize,
    pub weights: Vec<(usize, f64)>,
}

/// Full training history.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub epochs: Vec<EpochRecord>,
    /// Captured at the first weighted epoch and the final epoch.
    pub weight_snapshots: Vec<WeightSnapshot>,
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v}"),
        None => "nan".to_string(),
    }
}

impl MetricsLog {
    /// Line-delimited records, one per epoch. `wall_time_ms` is the only
    /// non-deterministic column.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "epoch,l_cscc,l_att,l_rep,l_quant,l_total,mean_weight_clean,mean_weight_noisy,wall_time_ms\n",
        );
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.epoch,
                r.cscc,
                r.attraction,
                r.repulsion,
                r.quantization,
                r.total,
                fmt_opt(r.mean_weight_clean),
                fmt_opt(r.mean_weight_noisy),
                r.wall_time_ms
            ));
        }
        out
    }

    /// Per-epoch query MAP, when tracked.
    pub fn map_csv(&self) -> Option<String> {
        if self.epochs.iter().all(|r| r.map_i2t.is_none()) {
            return None;
        }
        let mut out = String::from("epoch,map_i2t,map_t2i,map_avg\n");
        for r in &self.epochs {
            let (Some(i2t), Some(t2i)) = (r.map_i2t, r.map_t2i) else {
                continue;
            };
            out.push_str(&format!("{},{},{},{}\n", r.epoch, i2t, t2i, (i2t + t2i) / 2.0));
        }
        Some(out)
    }
}

/// Final model plus optimizer state.
pub struct TrainState {
    pub model: HashModel,
    pub optimizer: Adam,
    pub epoch: usize,
}

/// Everything `train` produces.
pub struct TrainOutcome {
    pub state: TrainState,
    pub log: MetricsLog,
    /// `(epoch, map_avg)` of the best query-set MAP seen, when tracked.
    pub best_epoch_map: Option<(usize, f64)>,
    /// Query-set MAP of the final model, when tracked.
    pub final_map: Option<CrossModalMap>,
}

/// Runs the full training loop on the dataset's train split.
pub fn train(dataset: &MultimodalDataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let train_ids = dataset.indices_of(Split::Train);
    if train_ids.is_empty() {
        return Err(Error::config("dataset has an empty train split"));
    }

    let model_config = config.model_config(
        dataset.image_dim(),
        dataset.text_dim(),
        dataset.num_classes(),
    );
    let mut model = HashModel::init(&model_config, config.seed)?;
    let labels = dataset.training_labels();
    if !config.ablation.disable_cscc {
        let mut priors = vec![0.0; dataset.num_classes()];
        for &i in &train_ids {
            for (p, &y) in priors.iter_mut().zip(labels.row(i)) {
                *p += y;
            }
        }
        for p in priors.iter_mut() {
            *p /= train_ids.len() as f64;
        }
        model.calibrate_classifier_biases(&priors)?;
    }
    let mut optimizer = Adam::new(&model.param_blocks());
    let names: Vec<String> = model
        .param_blocks()
        .iter()
        .map(|(n, _)| n.clone())
        .collect();

    let can_eval = !dataset.indices_of(Split::Query).is_empty()
        && !dataset.indices_of(Split::Retrieval).is_empty();
    let track_map = config.track_map && can_eval;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = MetricsLog::default();
    let mut best_epoch_map: Option<(usize, f64)> = None;
    let mut final_map = None;

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let weighted = epoch > config.warmup_epochs && !config.ablation.disable_weighting;

        let mut order = train_ids.clone();
        order.shuffle(&mut rng);

        let mut epoch_weights: Vec<Option<f64>> = vec![None; dataset.len()];
        let mut sums = LossSums::default();

        for batch_ids in order.chunks(config.batch_size) {
            // Pairwise terms need at least two samples.
            if batch_ids.len() < 2 {
                continue;
            }
            let image = dataset.image.select_rows(batch_ids);
            let text = dataset.text.select_rows(batch_ids);
            let batch_labels = labels.select_rows(batch_ids);

            let tape = crate::ndmath::Tape::new();
            let taped = model.record(&tape);
            let h1 = taped.forward(Modality::Image, &image)?;
            let h2 = taped.forward(Modality::Text, &text)?;

            let weights = if weighted && !config.ablation.disable_cscc {
                let (f1, f2) = match config.neighbor_space {
                    NeighborSpace::Code => (h1.value(), h2.value()),
                    NeighborSpace::Raw => (image.clone(), text.clone()),
                };
                batch_confidence_weights(&f1, &f2, &batch_labels, config.neighbors_k, config.gamma)
                    .0
            } else {
                vec![1.0; batch_ids.len()]
            };

            let loss = batch_objective(&taped, &h1, &h2, &batch_labels, &weights, config)?;
            let grads = loss.total.backward()?;
            let grad_blocks: Vec<Matrix> =
                taped.param_vars().iter().map(|v| grads.get(v)).collect();
            let mut blocks = model.param_blocks_mut();
            optimizer.step(&names, &mut blocks, &grad_blocks, config.learning_rate)?;
            debug_assert!(
                model.param_blocks().iter().all(|(_, p)| p.is_finite_all()),
                "non-finite parameter after optimizer step"
            );

            for (&id, &w) in batch_ids.iter().zip(&loss.breakdown.weights) {
                epoch_weights[id] = Some(w);
            }
            sums.add(&loss.breakdown, batch_ids.len());
        }

        let (mean_weight_clean, mean_weight_noisy) = match &dataset.noise_mask {
            Some(mask) => (
                mean_weight(&epoch_weights, |id| !mask[id]),
                mean_weight(&epoch_weights, |id| mask[id]),
            ),
            None => (None, None),
        };

        let (map_i2t, map_t2i) = if track_map {
            let m = evaluate_model(&model, dataset, None)?;
            let avg = m.average();
            if best_epoch_map.is_none_or(|(_, best)| avg > best) {
                best_epoch_map = Some((epoch, avg));
            }
            final_map = Some(m);
            (Some(m.i2t.map), Some(m.t2i.map))
        } else {
            (None, None)
        };

        if epoch == config.warmup_epochs + 1 || epoch == config.epochs {
            log.weight_snapshots.push(WeightSnapshot {
                epoch,
                weights: epoch_weights
                    .iter()
                    .enumerate()
                    .filter_map(|(id, w)| w.map(|w| (id, w)))
                    .collect(),
            });
        }

        log.epochs.push(EpochRecord {
            epoch,
            cscc: sums.mean_cscc(),
            attraction: sums.mean_attraction(),
            repulsion: sums.mean_repulsion(),
            quantization: sums.mean_quantization(),
            total: sums.mean_total(),
            mean_weight_clean,
            mean_weight_noisy,
            wall_time_ms: started.elapsed().as_millis() as u64,
            map_i2t,
            map_t2i,
        });
    }

    Ok(TrainOutcome {
        state: TrainState {
            model,
            optimizer,
            epoch: config.epochs,
        },
        log,
        best_epoch_map,
        final_map,
    })
}

fn mean_weight(weights: &[Option<f64>], select: impl Fn(usize) -> bool) -> Option<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (id, w) in weights.iter().enumerate() {
        if let Some(w) = w {
            if select(id) {
                sum += w;
                count += 1;
            }
        }
    }
    (count > 0).then(|| sum / count as f64)
}

#[derive(Default)]
struct LossSums {
    cscc: f64,
    attraction: f64,
    repulsion: f64,
    quantization: f64,
    total: f64,
    samples: usize,
}

impl LossSums {
    fn add(&mut self, b: &LossBreakdown, batch: usize) {
        let w = batch as f64;
        self.cscc += b.cscc * w;
        self.attraction += b.attraction * w;
        self.repulsion += b.repulsion * w;
        self.quantization += b.quantization * w;
        self.total += b.total * w;
        self.samples += batch;
    }

    fn mean(&self, v: f64) -> f64 {
        if self.samples == 0 {
            0.0
        } else {
            v / self.samples as f64
        }
    }

    fn mean_cscc(&self) -> f64 {
        self.mean(self.cscc)
    }

    fn mean_attraction(&self) -> f64 {
        self.mean(self.attraction)
    }

    fn mean_repulsion(&self) -> f64 {
        self.mean(self.repulsion)
    }

    fn mean_quantization(&self) -> f64 {
        self.mean(self.quantization)
    }

    fn mean_total(&self) -> f64 {
        self.mean(self.total)
    }
}
