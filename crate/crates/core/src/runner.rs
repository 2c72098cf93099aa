//! Training, evaluation and ablation driver.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, crop, flip_horizontal, resize_bilinear, BalancedSampler, ChannelStats, Dataset, Split, MAX_SCALE};
use crate::error::{Error, Result};
use crate::fusion::{FusionKind, FusionLevel, FusionSpec};
use crate::layers::{apply_updates, ConvKind, Ctx, Gradients, HeadForm, ParamId, ParamStore};
use crate::losses::{self, GridScores};
use crate::model::{BackboneSpec, BlockSpec, FosNet, ModelConfig, ObjectModel};
use crate::tensor::{softmax, Tensor};

fn default_epochs() -> usize {
    60
}
fn default_base_lr() -> f64 {
    0.15
}
fn default_reference_batch() -> usize {
    256
}
fn default_momentum() -> f64 {
    0.9
}
fn default_schedule_step() -> usize {
    15
}
fn default_batch_size() -> usize {
    64
}
fn default_gamma() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}
fn default_blocks() -> Vec<BlockSpec> {
    BackboneSpec::default().blocks
}
fn default_input_hw() -> (usize, usize) {
    (32, 32)
}

/// Which epoch's parameters a training run keeps and reports.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Highest validation top-1, earliest on ties.
    Best,
    /// End of the schedule.
    #[default]
    Last,
}

impl Selection {
    /// Checkpoint directory name inside a run directory.
    pub fn dir_name(self) -> &'static str {
        match self {
            Selection::Best => "best",
            Selection::Last => "last",
        }
    }
}

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Learning rate at `reference_batch`; scaled linearly with the actual batch size.
    #[serde(default = "default_base_lr")]
    pub base_lr: f64,
    #[serde(default = "default_reference_batch")]
    pub reference_batch: usize,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// Epochs between ×0.1 learning-rate decays.
    #[serde(default = "default_schedule_step")]
    pub schedule_step: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Weight of the scene coherence loss.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub conv_kind: ConvKind,
    #[serde(default)]
    pub head: HeadForm,
    #[serde(default = "default_input_hw")]
    pub input_hw: (usize, usize),
    #[serde(default = "default_blocks")]
    pub blocks: Vec<BlockSpec>,
    /// `None` trains PlacesNet alone.
    #[serde(default)]
    pub fusion: Option<FusionSpec>,
    #[serde(default)]
    pub freeze_object_net: bool,
    /// Apply the coherence term when training a fused network whose output
    /// is computed from the grid scores.
    #[serde(default = "default_true")]
    pub scl_in_fusion: bool,
    #[serde(default = "default_true")]
    pub augment: bool,
    #[serde(default)]
    pub select: Selection,
    /// Start the feature-level fusion classifier from a pretrained PlacesNet
    /// head instead of from scratch; see [`warm_start`].
    #[serde(default)]
    pub warm_start_classifier: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("every field has a default")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.base_lr > 0.0
            && self.base_lr.is_finite()
            && self.reference_batch > 0
            && self.schedule_step > 0
            && self.batch_size > 0
            && (0.0..1.0).contains(&self.momentum);
        if !positive || self.epochs == 0 {
            return Err(Error::Invalid(
                "epochs, learning rate, reference batch, schedule step and batch size must be positive; momentum in [0,1)".into(),
            ));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::Invalid(format!("gamma must be finite and ≥ 0, got {}", self.gamma)));
        }
        if self.gamma > 0.0 && self.head == HeadForm::GapFc && self.fusion.is_none() {
            return Err(Error::Invalid("the coherence loss needs the fully convolutional head (conv1x1_gap)".into()));
        }
        if self.warm_start_classifier
            && !matches!(self.fusion, Some(f) if f.level == FusionLevel::Feature && f.kind != FusionKind::Concat)
        {
            return Err(Error::Invalid(
                "warm_start_classifier needs a feature-level fusion other than concat".into(),
            ));
        }
        Ok(())
    }

    pub fn model_config(&self, num_scenes: usize, num_objects: usize) -> ModelConfig {
        let places = BackboneSpec {
            input_hw: self.input_hw,
            in_channels: 3,
            blocks: self.blocks.clone(),
            conv_kind: self.conv_kind,
            head: self.head,
        };
        let object = BackboneSpec { conv_kind: ConvKind::Vanilla, head: HeadForm::GapFc, ..places.clone() };
        ModelConfig { places, object, num_scenes, num_objects, fusion: self.fusion }
    }

    /// The object backbone used by [`pretrain_object`].
    pub fn object_backbone(&self) -> BackboneSpec {
        self.model_config(2, 1).object
    }

    /// Coherence weight actually applied: zero whenever the grid scores do not
    /// determine the network output.
    pub fn effective_gamma(&self) -> f64 {
        match self.fusion {
            None => self.gamma,
            Some(f) if f.level == FusionLevel::Score && self.scl_in_fusion => self.gamma,
            Some(_) => 0.0,
        }
    }
}

/// `base_lr · (batch / reference_batch) · 0.1^⌊epoch / schedule_step⌋`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let scale = cfg.batch_size as f64 / cfg.reference_batch as f64;
    cfg.base_lr * scale * 0.1f64.powi((epoch / cfg.schedule_step) as i32)
}

/// Velocity buffers of classical momentum SGD.
#[derive(Clone, Debug, Default)]
pub struct MomentumState {
    velocity: HashMap<ParamId, Tensor>,
}

impl MomentumState {
    pub fn velocity(&self, id: ParamId) -> Option<&Tensor> {
        self.velocity.get(&id)
    }
}

/// `v ← μ·v + g; p ← p − lr·v` for every trainable weight of `store`.
pub fn sgd_momentum_step(
    store: &mut ParamStore,
    grads: &Gradients,
    state: &mut MomentumState,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    for id in store.trainable_ids() {
        let g = grads.get(id).ok_or_else(|| Error::MissingGrad(store.name(id).to_string()))?;
        let p = store.get_mut(id);
        if g.shape() != p.shape() {
            return Err(Error::shape("sgd_momentum_step", format!("gradient {:?} for parameter {:?}", g.shape(), p.shape())));
        }
        let v = state.velocity.entry(id).or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
        for ((vi, gi), pi) in v.data_mut().iter_mut().zip(g.data()).zip(p.data_mut()) {
            *vi = momentum * *vi + gi;
            *pi -= lr * *vi;
        }
    }
    Ok(())
}

/// Class-score function used by the evaluators.
pub trait Scorer {
    /// `[B,C]` raw scores and, when available, `[B,N,M,C]` grid scores for
    /// `[B,H,W,3]` normalized images.
    fn score(&self, images: &Tensor) -> Result<(Tensor, Option<Tensor>)>;
}

impl Scorer for FosNet {
    fn score(&self, images: &Tensor) -> Result<(Tensor, Option<Tensor>)> {
        let p = self.predict(images)?;
        Ok((p.scores, p.grid))
    }
}

/// Rank of `class` among `scores`; ties go to the lower index.
fn rank_of(scores: &[f64], class: usize) -> usize {
    let s = scores[class];
    scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < class))
        .count()
}

/// Index of the highest score; ties go to the lower index.
pub fn argmax(scores: &[f64]) -> usize {
    (0..scores.len()).fold(0, |b, i| if scores[i] > scores[b] { i } else { b })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub top1: f64,
    pub top5: f64,
    /// Mean validation coherence loss; `None` when no grid is available.
    pub mean_scl: Option<f64>,
    /// Mean cross-entropy of the final scores.
    pub loss_c: f64,
    pub per_class: Vec<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub samples: usize,
}

/// Accumulates predictions into [`Metrics`].
#[derive(Clone, Debug)]
pub struct MetricsBuilder {
    classes: usize,
    k: usize,
    top1: usize,
    topk: usize,
    ce: f64,
    scl: f64,
    scl_count: usize,
    confusion: Vec<Vec<usize>>,
    n: usize,
}

impl MetricsBuilder {
    pub fn new(classes: usize, k: usize) -> Self {
        MetricsBuilder {
            classes,
            k: k.min(classes),
            top1: 0,
            topk: 0,
            ce: 0.0,
            scl: 0.0,
            scl_count: 0,
            confusion: vec![vec![0; classes]; classes],
            n: 0,
        }
    }

    /// Records raw scores of one sample.
    pub fn add(&mut self, scores: &[f64], label: usize) {
        self.add_probs(scores, &softmax(scores), label);
    }

    fn add_probs(&mut self, ranking: &[f64], probs: &[f64], label: usize) {
        let r = rank_of(ranking, label);
        self.top1 += usize::from(r == 0);
        self.topk += usize::from(r < self.k);
        self.ce -= probs[label].max(f64::MIN_POSITIVE).ln();
        self.confusion[label][argmax(ranking)] += 1;
        self.n += 1;
    }

    pub fn add_scl(&mut self, value: f64) {
        self.scl += value;
        self.scl_count += 1;
    }

    pub fn finish(self) -> Metrics {
        let n = self.n.max(1) as f64;
        let per_class = self
            .confusion
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let total: usize = row.iter().sum();
                if total == 0 { 0.0 } else { row[c] as f64 / total as f64 }
            })
            .collect();
        Metrics {
            top1: self.top1 as f64 / n,
            top5: self.topk as f64 / n,
            mean_scl: (self.scl_count > 0).then(|| self.scl / self.scl_count as f64),
            loss_c: self.ce / n,
            per_class,
            confusion: self.confusion,
            samples: self.n,
        }
        .with_classes(self.classes)
    }
}

impl Metrics {
    fn with_classes(self, classes: usize) -> Self {
        debug_assert_eq!(self.per_class.len(), classes);
        self
    }
}

const EVAL_CHUNK: usize = 100;

/// Single-crop evaluation: every image is normalized and scored whole.
pub fn evaluate_topk(model: &dyn Scorer, split: &Split, stats: &ChannelStats, classes: usize, k: usize) -> Result<Metrics> {
    if k == 0 || k > classes {
        return Err(Error::Invalid(format!("top-k needs 1 ≤ k ≤ {classes}, got {k}")));
    }
    let mut m = MetricsBuilder::new(classes, k);
    for chunk in split.samples.chunks(EVAL_CHUNK) {
        let imgs = chunk.iter().map(|s| stats.normalize(&s.image)).collect::<Result<Vec<_>>>()?;
        let (scores, grid) = model.score(&Tensor::stack(&imgs)?)?;
        for (i, s) in chunk.iter().enumerate() {
            m.add(&scores.data()[i * classes..(i + 1) * classes], s.scene.class());
        }
        if let Some(g) = grid {
            for cell in g.unstack() {
                m.add_scl(losses::scene_coherence_loss(&GridScores::new(cell)?)?);
            }
        }
    }
    Ok(m.finish())
}

/// The ten views of one image: the image upscaled by the augmentation's
/// maximum factor, cropped at the four corners and the center, each with its
/// mirror image.
pub fn ten_crops(img: &Tensor) -> Result<Vec<Tensor>> {
    let hw = (img.shape()[0], img.shape()[1]);
    let big = (
        (hw.0 as f64 * MAX_SCALE).round() as usize,
        (hw.1 as f64 * MAX_SCALE).round() as usize,
    );
    let up = resize_bilinear(img, big)?;
    let (dy, dx) = (big.0 - hw.0, big.1 - hw.1);
    let mut out = Vec::with_capacity(10);
    for (top, left) in [(0, 0), (0, dx), (dy, 0), (dy, dx), (dy / 2, dx / 2)] {
        let c = crop(&up, top, left, hw)?;
        out.push(flip_horizontal(&c));
        out.push(c);
    }
    Ok(out)
}

/// Mean of the softmax distributions over the ten crops (one forward pass per crop).
pub fn ten_crop_probs(model: &dyn Scorer, img: &Tensor, stats: &ChannelStats) -> Result<Vec<f64>> {
    let mut acc: Vec<f64> = Vec::new();
    for c in ten_crops(img)? {
        let x = stats.normalize(&c)?;
        let mut shape = vec![1];
        shape.extend_from_slice(x.shape());
        let (scores, _) = model.score(&x.reshape(shape)?)?;
        let p = softmax(scores.data());
        if acc.is_empty() {
            acc = vec![0.0; p.len()];
        }
        acc.iter_mut().zip(&p).for_each(|(a, v)| *a += v / 10.0);
    }
    Ok(acc)
}

/// Ten-crop evaluation; metrics are computed from the averaged probabilities.
pub fn ten_crop_eval(model: &dyn Scorer, split: &Split, stats: &ChannelStats, classes: usize) -> Result<Metrics> {
    let mut m = MetricsBuilder::new(classes, 5);
    for s in &split.samples {
        let p = ten_crop_probs(model, &s.image, stats)?;
        m.add_probs(&p, &p, s.scene.class());
    }
    Ok(m.finish())
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub split: String,
    pub loss_c: f64,
    pub loss_scl: f64,
    pub loss_total: f64,
    pub top1: f64,
    pub top5: f64,
}

pub const LOG_HEADER: &str = "epoch,split,loss_c,loss_scl,loss_total,top1,top5";

pub fn log_csv(rows: &[EpochLog]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.epoch, r.split, r.loss_c, r.loss_scl, r.loss_total, r.top1, r.top5
        );
    }
    s
}

pub fn write_log_csv(path: &Path, rows: &[EpochLog]) -> Result<()> {
    fs::write(path, log_csv(rows)).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    /// Validation metrics of the best epoch.
    pub best: Metrics,
    /// Validation metrics after the last epoch.
    pub last: Metrics,
    pub select: Selection,
}

impl TrainReport {
    /// Metrics of the parameters `train` left in the network.
    pub fn selected(&self) -> &Metrics {
        match self.select {
            Selection::Best => &self.best,
            Selection::Last => &self.last,
        }
    }
}

/// Weights that cannot receive gradient in this configuration: the object
/// head when fusing pooled features, and the scene head when nothing weighs
/// the grid it produces.
fn inactive_prefixes(cfg: &TrainConfig) -> Vec<&'static str> {
    match cfg.fusion {
        Some(f) if f.level == FusionLevel::Feature => {
            let mut v = vec!["object.head."];
            if cfg.effective_gamma() == 0.0 {
                v.push("places.head.");
            }
            v
        }
        _ => Vec::new(),
    }
}

fn batch_tensor(split: &Split, idx: &[usize], stats: &ChannelStats, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
    let imgs = match rng {
        Some(rng) => idx
            .iter()
            .map(|&i| augment(&split.samples[i].image, stats, rng))
            .collect::<Result<Vec<_>>>()?,
        None => idx
            .iter()
            .map(|&i| stats.normalize(&split.samples[i].image))
            .collect::<Result<Vec<_>>>()?,
    };
    Tensor::stack(&imgs)
}

struct StepOutcome {
    loss_c: f64,
    loss_scl: f64,
    loss_total: f64,
    correct: usize,
    correct5: usize,
}

fn train_step(
    net: &mut FosNet,
    images: Tensor,
    labels: &[usize],
    cfg: &TrainConfig,
    state: &mut MomentumState,
    lr: f64,
) -> Result<StepOutcome> {
    let gamma = cfg.effective_gamma();
    let (grads, updates, outcome) = {
        let mut ctx = Ctx::train(&net.store);
        let x = ctx.input(images);
        let out = net.forward(&mut ctx, x)?;
        let ce = ctx.tape.softmax_cross_entropy(out.scores, labels)?;
        let scl_grid = if gamma > 0.0 { out.output_grid(cfg.fusion) } else { out.places.grid };
        let scl = scl_grid.map(|g| losses::scene_coherence(&mut ctx.tape, g)).transpose()?;
        let lv = losses::combine(&mut ctx.tape, ce, scl, gamma)?;
        let b = lv.breakdown(&ctx.tape);
        let c = ctx.tape.shape(out.scores)[1];
        let scores = ctx.tape.value(out.scores).data().to_vec();
        let (mut correct, mut correct5) = (0, 0);
        for (i, &y) in labels.iter().enumerate() {
            let r = rank_of(&scores[i * c..(i + 1) * c], y);
            correct += usize::from(r == 0);
            correct5 += usize::from(r < 5.min(c));
        }
        let grads = ctx.backward(lv.total)?;
        let updates = ctx.take_updates();
        let outcome = StepOutcome {
            loss_c: b.classification,
            loss_scl: b.coherence,
            loss_total: b.total,
            correct,
            correct5,
        };
        (grads, updates, outcome)
    };
    sgd_momentum_step(&mut net.store, &grads, state, lr, cfg.momentum)?;
    apply_updates(&mut net.store, updates)?;
    Ok(outcome)
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(_) => Error::Diverged { epoch, loss: f64::NAN },
        other => other,
    }
}

/// Trains `net` on `data.train`, validating after every epoch.
///
/// The network is left holding the parameters chosen by `cfg.select`. When
/// `out` is given, the CSV log, the metrics and both the `best/` and `last/`
/// checkpoints are written there.
pub fn train(net: &mut FosNet, data: &Dataset, cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainReport> {
    cfg.validate()?;
    let classes = net.config.num_scenes;
    if data.spec.num_scenes != classes {
        return Err(Error::Invalid(format!(
            "dataset has {} scenes, the network {classes}",
            data.spec.num_scenes
        )));
    }
    if data.val.is_empty() {
        return Err(Error::Invalid("training needs a validation split".into()));
    }
    net.freeze_object_net(cfg.freeze_object_net);
    for p in inactive_prefixes(cfg) {
        net.store.set_frozen(p, true);
    }
    let labels = data.train.labels();
    let sampler = BalancedSampler::new(&labels, classes, cfg.batch_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(7);
    let mut state = MomentumState::default();
    let mut log = Vec::with_capacity(2 * cfg.epochs);
    let mut best: Option<(usize, Metrics, ParamStore)> = None;
    let mut last = None;
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let (mut lc, mut ls, mut lt, mut n, mut c1, mut c5) = (0.0, 0.0, 0.0, 0usize, 0usize, 0usize);
        for batch in sampler.epoch(&mut rng) {
            let images = batch_tensor(&data.train, &batch, &data.stats, cfg.augment.then_some(&mut rng))?;
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let s = train_step(net, images, &y, cfg, &mut state, lr).map_err(|e| diverged(epoch, e))?;
            if !s.loss_total.is_finite() {
                return Err(Error::Diverged { epoch, loss: s.loss_total });
            }
            let b = batch.len() as f64;
            lc += s.loss_c * b;
            ls += s.loss_scl * b;
            lt += s.loss_total * b;
            c1 += s.correct;
            c5 += s.correct5;
            n += batch.len();
        }
        let nf = n.max(1) as f64;
        log.push(EpochLog {
            epoch,
            split: "train".into(),
            loss_c: lc / nf,
            loss_scl: ls / nf,
            loss_total: lt / nf,
            top1: c1 as f64 / nf,
            top5: c5 as f64 / nf,
        });
        let m = evaluate_topk(&*net, &data.val, &data.stats, classes, 5.min(classes)).map_err(|e| diverged(epoch, e))?;
        let scl = m.mean_scl.unwrap_or(0.0);
        log.push(EpochLog {
            epoch,
            split: "val".into(),
            loss_c: m.loss_c,
            loss_scl: scl,
            loss_total: m.loss_c + cfg.effective_gamma() * scl,
            top1: m.top1,
            top5: m.top5,
        });
        log::info!(
            "epoch {epoch}: lr {lr:.5} train loss {:.4} top1 {:.3} | val loss {:.4} scl {:.4} top1 {:.3}",
            lt / nf,
            c1 as f64 / nf,
            m.loss_c,
            scl,
            m.top1
        );
        if best.as_ref().map_or(true, |(_, b, _)| m.top1 > b.top1) {
            best = Some((epoch, m.clone(), net.store.clone()));
        }
        last = Some(m);
    }
    let (best_epoch, best_metrics, mut best_store) = best.expect("at least one epoch ran");
    for store in [&mut net.store, &mut best_store] {
        store.set_frozen("object.", false);
        for p in inactive_prefixes(cfg) {
            store.set_frozen(p, false);
        }
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_log_csv(&dir.join("log.csv"), &log)?;
        net.save(&dir.join(Selection::Last.dir_name()), Some(&data.stats))?;
        let last_store = std::mem::replace(&mut net.store, best_store.clone());
        net.save(&dir.join(Selection::Best.dir_name()), Some(&data.stats))?;
        net.store = last_store;
        let path = dir.join("metrics.json");
        let body = serde_json::json!({
            "select": cfg.select,
            "best_epoch": best_epoch,
            "best": best_metrics,
            "last": last,
        });
        fs::write(&path, serde_json::to_string_pretty(&body).map_err(|e| Error::json(&path, e))?)
            .map_err(|e| Error::io(&path, e))?;
    }
    if cfg.select == Selection::Best {
        net.store = best_store;
    }
    Ok(TrainReport {
        log,
        best_epoch,
        best: best_metrics,
        last: last.expect("at least one epoch ran"),
        select: cfg.select,
    })
}

/// Settings of multi-label object pretraining.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    #[serde(default = "default_pretrain_epochs")]
    pub epochs: usize,
    #[serde(default = "default_base_lr")]
    pub base_lr: f64,
    #[serde(default = "default_reference_batch")]
    pub reference_batch: usize,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_schedule_step")]
    pub schedule_step: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub augment: bool,
}

fn default_pretrain_epochs() -> usize {
    20
}

impl Default for PretrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("every field has a default")
    }
}

impl PretrainConfig {
    fn as_schedule(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            base_lr: self.base_lr,
            reference_batch: self.reference_batch,
            momentum: self.momentum,
            schedule_step: self.schedule_step,
            batch_size: self.batch_size,
            gamma: 0.0,
            ..TrainConfig::default()
        }
    }
}

/// Per-epoch result of object pretraining.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    pub epoch: usize,
    pub train_loss: f64,
    /// Fraction of (sample, object) presence decisions that are correct on validation.
    pub val_accuracy: f64,
}

/// Multi-label presence accuracy of an object network on `split`.
pub fn object_accuracy(model: &ObjectModel, split: &Split, stats: &ChannelStats) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for chunk in split.samples.chunks(EVAL_CHUNK) {
        let imgs = chunk.iter().map(|s| stats.normalize(&s.image)).collect::<Result<Vec<_>>>()?;
        let scores = model.predict(&Tensor::stack(&imgs)?)?;
        let c = model.classes;
        for (i, s) in chunk.iter().enumerate() {
            for (j, &t) in s.objects.iter().enumerate() {
                correct += usize::from((scores.data()[i * c + j] > 0.0) == (t > 0.5));
                total += 1;
            }
        }
    }
    Ok(correct as f64 / total.max(1) as f64)
}

/// Trains an object network on the multi-hot object labels with a sigmoid
/// cross-entropy per object.
pub fn pretrain_object(model: &mut ObjectModel, data: &Dataset, cfg: &PretrainConfig) -> Result<Vec<PretrainLog>> {
    let sched = cfg.as_schedule();
    sched.validate()?;
    if data.spec.num_objects != model.classes {
        return Err(Error::Invalid(format!(
            "dataset has {} object classes, the network {}",
            data.spec.num_objects, model.classes
        )));
    }
    let labels = data.train.labels();
    let sampler = BalancedSampler::new(&labels, data.spec.num_scenes, cfg.batch_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(11);
    let mut state = MomentumState::default();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, &sched);
        let (mut total, mut n) = (0.0, 0usize);
        for batch in sampler.epoch(&mut rng) {
            let images = batch_tensor(&data.train, &batch, &data.stats, cfg.augment.then_some(&mut rng))?;
            let targets: Vec<f64> = batch.iter().flat_map(|&i| data.train.samples[i].objects.clone()).collect();
            let targets = Tensor::new([batch.len(), model.classes], targets)?;
            let (grads, updates, loss) = {
                let mut ctx = Ctx::train(&model.store);
                let x = ctx.input(images);
                let out = model.net.forward(&mut ctx, x).map_err(|e| diverged(epoch, e))?;
                let loss = ctx.tape.bce_with_logits(out.scores, &targets).map_err(|e| diverged(epoch, e))?;
                let value = ctx.tape.value(loss).item();
                let grads = ctx.backward(loss).map_err(|e| diverged(epoch, e))?;
                (grads, ctx.take_updates(), value)
            };
            sgd_momentum_step(&mut model.store, &grads, &mut state, lr, cfg.momentum)?;
            apply_updates(&mut model.store, updates)?;
            total += loss * batch.len() as f64;
            n += batch.len();
        }
        let val_accuracy = object_accuracy(model, &data.val, &data.stats)?;
        log::info!("object epoch {epoch}: loss {:.4} val presence accuracy {:.3}", total / n as f64, val_accuracy);
        log.push(PretrainLog { epoch, train_loss: total / n.max(1) as f64, val_accuracy });
    }
    Ok(log)
}

/// Builds a network for `cfg`, pretraining and loading an object network first
/// when the configuration fuses an object stream.
pub fn prepare_network(cfg: &TrainConfig, data: &Dataset, object: Option<&ObjectModel>) -> Result<FosNet> {
    let mc = cfg.model_config(data.spec.num_scenes, data.spec.num_objects);
    let mut net = FosNet::build(mc, cfg.seed)?;
    if net.object.is_some() {
        let obj = object.ok_or_else(|| Error::Invalid("a fused network needs a pretrained object network".into()))?;
        net.load_object_net(obj)?;
    }
    Ok(net)
}

/// Copies a pretrained PlacesNet into `net` and, if `cfg.warm_start_classifier`
/// is set, initializes the fusion classifier from its head.
pub fn warm_start(net: &mut FosNet, places: &FosNet, cfg: &TrainConfig) -> Result<()> {
    net.load_places_net(places)?;
    if cfg.warm_start_classifier {
        net.warm_start_classifier()?;
    }
    Ok(())
}

/// Repeated training of every variant over the same seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub name: String,
    pub config: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub variant: String,
    pub seed: u64,
    pub top1: f64,
    pub top5: f64,
    pub mean_scl: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seeds: usize,
    pub top1_mean: f64,
    pub top1_std: f64,
    pub top5_mean: f64,
    pub top5_std: f64,
    pub scl_mean: Option<f64>,
    pub scl_std: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
    pub rows: Vec<AblationRow>,
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

impl AblationReport {
    pub fn from_runs(runs: Vec<AblationRun>) -> Self {
        let mut order: Vec<String> = Vec::new();
        let mut groups: BTreeMap<String, Vec<&AblationRun>> = BTreeMap::new();
        for r in &runs {
            if !groups.contains_key(&r.variant) {
                order.push(r.variant.clone());
            }
            groups.entry(r.variant.clone()).or_default().push(r);
        }
        let rows = order
            .iter()
            .map(|name| {
                let g = &groups[name];
                let (t1m, t1s) = mean_std(&g.iter().map(|r| r.top1).collect::<Vec<_>>());
                let (t5m, t5s) = mean_std(&g.iter().map(|r| r.top5).collect::<Vec<_>>());
                let scl: Option<Vec<f64>> = g.iter().map(|r| r.mean_scl).collect();
                let scl = scl.map(|v| mean_std(&v));
                AblationRow {
                    variant: name.clone(),
                    seeds: g.len(),
                    top1_mean: t1m,
                    top1_std: t1s,
                    top5_mean: t5m,
                    top5_std: t5s,
                    scl_mean: scl.map(|s| s.0),
                    scl_std: scl.map(|s| s.1),
                }
            })
            .collect();
        AblationReport { runs, rows }
    }

    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn runs_csv(&self) -> String {
        let mut s = String::from("variant,seed,top1,top5,mean_scl\n");
        for r in &self.runs {
            let scl = r.mean_scl.map_or(String::new(), |v| v.to_string());
            let _ = writeln!(s, "{},{},{},{},{}", r.variant, r.seed, r.top1, r.top5, scl);
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("variant,seeds,top1_mean,top1_std,top5_mean,top5_std,scl_mean,scl_std\n");
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.variant,
                r.seeds,
                r.top1_mean,
                r.top1_std,
                r.top5_mean,
                r.top5_std,
                opt(r.scl_mean),
                opt(r.scl_std)
            );
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [("runs.csv", self.runs_csv()), ("report.csv", self.summary_csv())] {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

fn run_dir(root: &Path, variant: &str, seed: u64) -> PathBuf {
    root.join(variant).join(format!("seed{seed}"))
}

/// Trains every variant once per seed and summarizes validation metrics of
/// the selected checkpoints. Fused variants share one pretrained object network
/// per seed, produced by `object_for_seed`.
pub fn ablation_run(
    variants: &[AblationVariant],
    seeds: &[u64],
    data: &Dataset,
    mut object_for_seed: impl FnMut(u64) -> Result<Option<ObjectModel>>,
    out: Option<&Path>,
) -> Result<AblationReport> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::Invalid("an ablation needs at least one variant and one seed".into()));
    }
    let mut runs = Vec::with_capacity(variants.len() * seeds.len());
    for &seed in seeds {
        let needs_object = variants.iter().any(|v| v.config.fusion.is_some());
        let object = if needs_object { object_for_seed(seed)? } else { None };
        for v in variants {
            let cfg = TrainConfig { seed, ..v.config.clone() };
            let mut net = prepare_network(&cfg, data, object.as_ref())?;
            let dir = out.map(|o| run_dir(o, &v.name, seed));
            let report = train(&mut net, data, &cfg, dir.as_deref())?;
            let m = report.selected();
            log::info!("{} seed {seed}: top1 {:.4} scl {:?}", v.name, m.top1, m.mean_scl);
            runs.push(AblationRun { variant: v.name.clone(), seed, top1: m.top1, top5: m.top5, mean_scl: m.mean_scl });
        }
    }
    let mut order: HashMap<&str, usize> = HashMap::new();
    for (i, v) in variants.iter().enumerate() {
        order.insert(&v.name, i);
    }
    runs.sort_by_key(|r| (order[r.variant.as_str()], seeds.iter().position(|&s| s == r.seed)));
    let report = AblationReport::from_runs(runs);
    if let Some(o) = out {
        report.write(o)?;
    }
    Ok(report)
}

/// Rebuilds an ablation report by evaluating the checkpoints an earlier
/// [`ablation_run`] wrote under `root`.
pub fn report_from_checkpoints(
    root: &Path,
    variants: &[&str],
    seeds: &[u64],
    select: Selection,
    data: &Dataset,
) -> Result<AblationReport> {
    let mut runs = Vec::new();
    for v in variants {
        for &seed in seeds {
            let (net, _) = FosNet::load(&run_dir(root, v, seed).join(select.dir_name()))?;
            let c = net.config.num_scenes;
            let m = evaluate_topk(&net, &data.val, &data.stats, c, 5.min(c))?;
            runs.push(AblationRun { variant: v.to_string(), seed, top1: m.top1, top5: m.top5, mean_scl: m.mean_scl });
        }
    }
    Ok(AblationReport::from_runs(runs))
}

/// The coherence-rate sweep.
pub fn gamma_sweep(base: &TrainConfig, gammas: &[f64]) -> Vec<AblationVariant> {
    gammas
        .iter()
        .map(|&g| AblationVariant { name: format!("gamma={g}"), config: TrainConfig { gamma: g, ..base.clone() } })
        .collect()
}

/// Every fusion kind at every level where it is defined for these class
/// counts; score-level sum needs as many object classes as scene classes.
pub fn fusion_sweep(base: &TrainConfig, num_scenes: usize, num_objects: usize) -> Vec<AblationVariant> {
    let mut out = Vec::new();
    for level in [FusionLevel::Feature, FusionLevel::Score] {
        for kind in FusionKind::ALL {
            let spec = FusionSpec { kind, level };
            let dims = base.model_config(num_scenes, num_objects).fusion_dims(level);
            if !spec.supports(dims) {
                continue;
            }
            out.push(AblationVariant {
                name: format!("{}-{kind}", if level == FusionLevel::Feature { "feature" } else { "score" }),
                config: TrainConfig { fusion: Some(spec), ..base.clone() },
            });
        }
    }
    out
}

/// Result of [`overfit_batch`].
#[derive(Clone, Debug, PartialEq)]
pub struct OverfitResult {
    /// First step (1-based) after which the batch was classified perfectly.
    pub solved_at: Option<usize>,
    pub final_loss: f64,
}

/// Repeatedly trains on one fixed batch without augmentation and reports
/// when every sample of it is classified correctly by the training-mode
/// forward pass.
pub fn overfit_batch(net: &mut FosNet, images: &Tensor, labels: &[usize], cfg: &TrainConfig, steps: usize) -> Result<OverfitResult> {
    cfg.validate()?;
    net.freeze_object_net(cfg.freeze_object_net);
    for p in inactive_prefixes(cfg) {
        net.store.set_frozen(p, true);
    }
    let mut state = MomentumState::default();
    let lr = lr_at(0, cfg);
    let mut final_loss = f64::NAN;
    let mut solved_at = None;
    for step in 1..=steps {
        let s = train_step(net, images.clone(), labels, cfg, &mut state, lr).map_err(|e| diverged(0, e))?;
        final_loss = s.loss_total;
        if s.correct == labels.len() {
            solved_at = Some(step);
            break;
        }
    }
    for p in inactive_prefixes(cfg) {
        net.store.set_frozen(p, false);
    }
    net.freeze_object_net(false);
    Ok(OverfitResult { solved_at, final_loss })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, SyntheticSceneSpec};
    use crate::losses::Label;
    use crate::data::Sample;
    use std::cell::Cell;

    fn cfg() -> TrainConfig {
        TrainConfig::default()
    }

    #[test]
    fn config_defaults() {
        let c = cfg();
        assert_eq!((c.epochs, c.batch_size, c.schedule_step), (60, 64, 15));
        assert_eq!((c.base_lr, c.momentum, c.gamma), (0.15, 0.9, 1.0));
        assert_eq!(c.blocks.len(), 3);
        c.validate().unwrap();
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epochz": 3}"#).is_err());
        let bad = TrainConfig { gamma: -1.0, ..cfg() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { head: HeadForm::GapFc, ..cfg() };
        assert!(bad.validate().is_err());
        let c: TrainConfig = serde_json::from_str(r#"{"fusion": {"kind": "ccg_bn", "level": "score"}}"#).unwrap();
        assert_eq!(c.fusion.unwrap().kind, FusionKind::CcgBn);
    }

    #[test]
    fn learning_rate_schedule() {
        let c = TrainConfig { batch_size: 256, ..cfg() };
        assert!((lr_at(0, &c) - 0.15).abs() < 1e-15);
        assert!((lr_at(15, &c) - 0.015).abs() < 1e-15);
        assert!((lr_at(14, &c) - 0.15).abs() < 1e-15);
        assert!((lr_at(0, &cfg()) - 0.0375).abs() < 1e-15);
    }

    fn one_param(v: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.weight("p", Tensor::vector(vec![v]));
        (s, id)
    }

    #[test]
    fn momentum_recurrence() {
        let (mut s, id) = one_param(0.0);
        let mut g = Gradients::default();
        g.insert(id, Tensor::vector(vec![1.0]));
        let mut st = MomentumState::default();
        sgd_momentum_step(&mut s, &g, &mut st, 1.0, 0.9).unwrap();
        sgd_momentum_step(&mut s, &g, &mut st, 1.0, 0.9).unwrap();
        assert!((s.get(id).item() + 2.9).abs() < 1e-15);

        let (mut s, id) = one_param(3.0);
        let mut g = Gradients::default();
        g.insert(id, Tensor::vector(vec![0.5]));
        sgd_momentum_step(&mut s, &g, &mut MomentumState::default(), 0.1, 0.0).unwrap();
        assert!((s.get(id).item() - 2.95).abs() < 1e-15);

        let (mut s, id) = one_param(0.0);
        let mut st = MomentumState::default();
        let mut g = Gradients::default();
        g.insert(id, Tensor::vector(vec![1.0]));
        sgd_momentum_step(&mut s, &g, &mut st, 1.0, 0.5).unwrap();
        g.insert(id, Tensor::vector(vec![0.0]));
        sgd_momentum_step(&mut s, &g, &mut st, 1.0, 0.5).unwrap();
        assert!((s.get(id).item() + 1.5).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let (mut s, _) = one_param(0.0);
        let err = sgd_momentum_step(&mut s, &Gradients::default(), &mut MomentumState::default(), 0.1, 0.9).unwrap_err();
        assert!(matches!(err, Error::MissingGrad(ref n) if n == "p"));
    }

    fn quadratic_losses(momentum: f64) -> Vec<f64> {
        // f(p) = ½·pᵀAp with A = diag(1, 4).
        let mut s = ParamStore::new();
        let id = s.weight("p", Tensor::vector(vec![3.0, -2.0]));
        let c = TrainConfig { batch_size: 256, schedule_step: 20, momentum, ..cfg() };
        let mut st = MomentumState::default();
        let mut out = Vec::new();
        for epoch in 0..60 {
            let p = s.get(id).data().to_vec();
            out.push(0.5 * (p[0] * p[0] + 4.0 * p[1] * p[1]));
            let mut g = Gradients::default();
            g.insert(id, Tensor::vector(vec![p[0], 4.0 * p[1]]));
            sgd_momentum_step(&mut s, &g, &mut st, lr_at(epoch, &c), c.momentum).unwrap();
        }
        out
    }

    #[test]
    fn quadratic_descent_after_decay() {
        let plain = quadratic_losses(0.0);
        assert!(plain[20..].windows(2).all(|w| w[1] <= w[0]));
        let heavy = quadratic_losses(0.9);
        let peak = |r: std::ops::Range<usize>| heavy[r].iter().cloned().fold(0.0, f64::max);
        assert!(peak(40..60) < peak(20..40) && peak(20..40) < peak(0..20));
        assert!(heavy[59] < 1e-3 * heavy[0]);
    }

    struct Fixed {
        scores: Vec<Vec<f64>>,
        calls: Cell<usize>,
    }

    impl Scorer for Fixed {
        fn score(&self, images: &Tensor) -> Result<(Tensor, Option<Tensor>)> {
            let b = images.shape()[0];
            let c = self.scores[0].len();
            let mut out = Vec::with_capacity(b * c);
            for _ in 0..b {
                let i = self.calls.get();
                out.extend_from_slice(&self.scores[i % self.scores.len()]);
                self.calls.set(i + 1);
            }
            Ok((Tensor::new([b, c], out)?, None))
        }
    }

    fn split_of(labels: &[usize], classes: usize) -> Split {
        Split {
            samples: labels
                .iter()
                .map(|&l| Sample {
                    image: Tensor::full([8, 8, 3], 0.5),
                    scene: Label::new(l, classes).unwrap(),
                    objects: vec![],
                    glyphs: vec![],
                })
                .collect(),
        }
    }

    #[test]
    fn topk_metrics() {
        let labels = [0, 1, 2, 2];
        let split = split_of(&labels, 3);
        let perfect = Fixed {
            scores: vec![vec![5., 0., 0.], vec![0., 5., 0.], vec![0., 0., 5.], vec![0., 0., 5.]],
            calls: Cell::new(0),
        };
        let id = ChannelStats::identity(3);
        let m = evaluate_topk(&perfect, &split, &id, 3, 1).unwrap();
        assert_eq!(m.top1, 1.0);
        assert_eq!(m.confusion, vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 2]]);
        assert!(evaluate_topk(&perfect, &split, &id, 3, 4).is_err());

        let tied = Fixed { scores: vec![vec![1., 1., 1.]], calls: Cell::new(0) };
        let m = evaluate_topk(&tied, &split, &id, 3, 2).unwrap();
        assert_eq!(m.top1, 0.25);
        assert_eq!(m.top5, 0.5);
        assert_eq!(m.confusion.iter().map(|r| r[0]).sum::<usize>(), 4);
        for (c, row) in m.confusion.iter().enumerate() {
            assert_eq!(row.iter().sum::<usize>(), labels.iter().filter(|&&l| l == c).count());
        }
    }

    #[test]
    fn random_scores_give_chance_top5() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let labels: Vec<usize> = (0..800).map(|i| i % 8).collect();
        let scores: Vec<Vec<f64>> = (0..800).map(|_| (0..8).map(|_| rng.gen::<f64>()).collect()).collect();
        let model = Fixed { scores, calls: Cell::new(0) };
        let m = evaluate_topk(&model, &split_of(&labels, 8), &ChannelStats::identity(3), 8, 5).unwrap();
        assert!((m.top5 - 5.0 / 8.0).abs() < 0.03, "{}", m.top5);
        assert!(m.top1 <= m.top5);
    }

    #[test]
    fn ten_crop_counts_and_averaging() {
        let model = Fixed { scores: vec![vec![4., 0.], vec![-3., 0.]], calls: Cell::new(0) };
        let split = split_of(&[0, 1], 2);
        let p = ten_crop_probs(&model, &split.samples[0].image, &ChannelStats::identity(3)).unwrap();
        assert_eq!(model.calls.get(), 10);
        let mean_of_softmax = 0.5 * (softmax(&[4., 0.])[0] + softmax(&[-3., 0.])[0]);
        let softmax_of_mean = softmax(&[0.5, 0.])[0];
        assert!((p[0] - mean_of_softmax).abs() < 1e-12);
        assert!((mean_of_softmax - softmax_of_mean).abs() > 0.05);
        ten_crop_eval(&model, &split, &ChannelStats::identity(3), 2).unwrap();
        assert_eq!(model.calls.get(), 30);
    }

    #[test]
    fn ten_crops_of_constant_image_match_single_crop() {
        let net = FosNet::build(ModelConfig::default(), 4).unwrap();
        let img = Tensor::full([32, 32, 3], 0.4);
        let crops = ten_crops(&img).unwrap();
        assert_eq!(crops.len(), 10);
        let stats = ChannelStats::identity(3);
        let p10 = ten_crop_probs(&net, &img, &stats).unwrap();
        let (s1, _) = net.score(&img.clone().reshape([1, 32, 32, 3]).unwrap()).unwrap();
        let p1 = softmax(s1.data());
        for (a, b) in p10.iter().zip(&p1) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn tiny_data() -> Dataset {
        let spec = SyntheticSceneSpec { num_scenes: 4, train_per_scene: 6, val_per_scene: 3, ..Default::default() };
        generate_dataset(&spec, 1).unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 8,
            blocks: vec![BlockSpec { channels: 4, stride: 2 }, BlockSpec { channels: 8, stride: 4 }],
            ..cfg()
        }
    }

    #[test]
    fn training_is_deterministic_and_logged() {
        let data = tiny_data();
        let dir = tempfile::tempdir().unwrap();
        let run = |out: Option<&Path>| {
            let c = tiny_cfg();
            let mut net = prepare_network(&c, &data, None).unwrap();
            let r = train(&mut net, &data, &c, out).unwrap();
            (r, net)
        };
        let (a, net) = run(Some(dir.path()));
        let (b, _) = run(None);
        assert_eq!(log_csv(&a.log), log_csv(&b.log));
        assert_eq!(a.log.len(), 4);
        let text = fs::read_to_string(dir.path().join("log.csv")).unwrap();
        assert_eq!(text.lines().next().unwrap(), LOG_HEADER);
        let (saved, stats) = FosNet::load(&dir.path().join("last")).unwrap();
        assert_eq!(stats.unwrap(), data.stats);
        for id in net.store.ids() {
            assert_eq!(saved.store.get(id), net.store.get(id));
        }
        assert_eq!(evaluate_topk(&saved, &data.val, &data.stats, 4, 4).unwrap().top1, a.last.top1);
        let (best, _) = FosNet::load(&dir.path().join("best")).unwrap();
        assert_eq!(evaluate_topk(&best, &data.val, &data.stats, 4, 4).unwrap().top1, a.best.top1);
    }

    #[test]
    fn best_selection_keeps_the_best_epoch() {
        let data = tiny_data();
        let c = TrainConfig { select: Selection::Best, epochs: 3, ..tiny_cfg() };
        let mut net = prepare_network(&c, &data, None).unwrap();
        let r = train(&mut net, &data, &c, None).unwrap();
        let m = evaluate_topk(&net, &data.val, &data.stats, 4, 4).unwrap();
        assert_eq!(m.top1, r.best.top1);
        assert_eq!(r.selected().top1, r.best.top1);
        let weights = net.store.ids().filter(|&i| net.store.kind(i) == crate::layers::ParamKind::Weight).count();
        assert_eq!(net.store.trainable_ids().len(), weights);
    }

    #[test]
    fn warm_start_copies_places_and_head() {
        let data = tiny_data();
        let base = TrainConfig { epochs: 1, ..tiny_cfg() };
        let mut places = prepare_network(&base, &data, None).unwrap();
        train(&mut places, &data, &base, None).unwrap();
        let obj = ObjectModel::build(base.object_backbone(), 6, 0).unwrap();
        let spec = FusionSpec { kind: FusionKind::CcgBn, level: FusionLevel::Feature };
        let fused = TrainConfig { fusion: Some(spec), warm_start_classifier: true, ..base.clone() };
        let mut net = prepare_network(&fused, &data, Some(&obj)).unwrap();
        warm_start(&mut net, &places, &fused).unwrap();
        let get = |n: &FosNet, name: &str| n.store.get(n.store.find(name).unwrap()).clone();
        assert_eq!(get(&net, "fusion.classifier.weight"), get(&places, "places.head.weight"));
        assert_eq!(get(&net, "fusion.classifier.bias"), get(&places, "places.head.bias"));
        assert_eq!(get(&net, "places.block1.bn.running_mean"), get(&places, "places.block1.bn.running_mean"));

        let concat = FusionSpec { kind: FusionKind::Concat, level: FusionLevel::Feature };
        assert!(TrainConfig { fusion: Some(concat), ..fused.clone() }.validate().is_err());
        assert!(TrainConfig { fusion: None, ..fused }.validate().is_err());
    }

    #[test]
    fn zero_gamma_still_logs_coherence() {
        let data = tiny_data();
        let c = TrainConfig { gamma: 0.0, epochs: 1, ..tiny_cfg() };
        let mut net = prepare_network(&c, &data, None).unwrap();
        let r = train(&mut net, &data, &c, None).unwrap();
        for row in &r.log {
            assert!(row.loss_scl > 0.0);
            assert_eq!(row.loss_total, row.loss_c);
        }
    }

    #[test]
    fn fused_training_runs_at_both_levels() {
        let data = tiny_data();
        let base = tiny_cfg();
        let mut obj = ObjectModel::build(base.object_backbone(), 6, 2).unwrap();
        let pc = PretrainConfig { epochs: 1, batch_size: 8, ..Default::default() };
        let log = pretrain_object(&mut obj, &data, &pc).unwrap();
        assert_eq!(log.len(), 1);
        for level in [FusionLevel::Feature, FusionLevel::Score] {
            let c = TrainConfig { fusion: Some(FusionSpec { kind: FusionKind::Ccg, level }), epochs: 1, ..base.clone() };
            let mut net = prepare_network(&c, &data, Some(&obj)).unwrap();
            let r = train(&mut net, &data, &c, None).unwrap();
            assert!(r.best.top1 >= 0.0);
            assert!(net.store.trainable_ids().len() == net.store.ids().filter(|&i| net.store.kind(i) == crate::layers::ParamKind::Weight).count());
        }
        let c = TrainConfig { fusion: Some(FusionSpec { kind: FusionKind::Sum, level: FusionLevel::Feature }), ..base };
        assert!(prepare_network(&c, &data, None).is_err());
    }

    #[test]
    fn ablation_report_statistics() {
        let runs = vec![
            AblationRun { variant: "a".into(), seed: 0, top1: 0.5, top5: 0.9, mean_scl: Some(1.0) },
            AblationRun { variant: "a".into(), seed: 1, top1: 0.7, top5: 0.9, mean_scl: Some(3.0) },
            AblationRun { variant: "b".into(), seed: 0, top1: 0.2, top5: 0.4, mean_scl: None },
        ];
        let r = AblationReport::from_runs(runs);
        let a = r.row("a").unwrap();
        assert!((a.top1_mean - 0.6).abs() < 1e-15);
        assert!((a.top1_std - 0.02f64.sqrt()).abs() < 1e-15);
        assert_eq!(a.scl_mean, Some(2.0));
        assert_eq!(r.row("b").unwrap().scl_mean, None);
        assert_eq!(r.summary_csv().lines().count(), 3);
        assert_eq!(r.runs_csv().lines().count(), 4);
    }

    #[test]
    fn sweeps_cover_their_grids() {
        let g = gamma_sweep(&cfg(), &[0.0, 10.0, 1.0, 0.1, 0.01, 0.001]);
        assert_eq!(g.len(), 6);
        assert_eq!(g[2].config.gamma, 1.0);
        let f = fusion_sweep(&cfg(), 8, 8);
        assert_eq!(f.len(), 8 + 7);
        assert!(f.iter().all(|v| v.name != "score-concat"));
        let f = fusion_sweep(&cfg(), 8, 6);
        assert_eq!(f.len(), 8 + 6);
        assert!(f.iter().all(|v| v.name != "score-sum"));
    }

    #[test]
    fn ablation_round_trips_through_checkpoints() {
        let data = tiny_data();
        let dir = tempfile::tempdir().unwrap();
        let variants = gamma_sweep(&TrainConfig { epochs: 1, ..tiny_cfg() }, &[0.0, 1.0]);
        let report = ablation_run(&variants, &[3, 4], &data, |_| Ok(None), Some(dir.path())).unwrap();
        assert_eq!(report.runs.len(), 4);
        assert!(dir.path().join("report.csv").exists());
        let names: Vec<&str> = variants.iter().map(|v| v.name.as_str()).collect();
        let again = report_from_checkpoints(dir.path(), &names, &[3, 4], Selection::Last, &data).unwrap();
        assert_eq!(again, report);
    }

    #[test]
    fn divergence_is_reported() {
        let data = tiny_data();
        let c = TrainConfig { base_lr: 1e200, epochs: 3, ..tiny_cfg() };
        let mut net = prepare_network(&c, &data, None).unwrap();
        match train(&mut net, &data, &c, None) {
            Err(Error::Diverged { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
