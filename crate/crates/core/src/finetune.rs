//! Downstream heads: classification under the three transfer protocols and
//! part segmentation through interpolated encoder features.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis, IxDyn};

use crate::config::{Protocol, RunConfig};
use crate::dataset::{epoch_order, Sample};
use crate::error::{Error, Result};
use crate::grouping::GroupedSplats;
use crate::mae::{GaussianMaeModel, BACKBONE_PREFIXES};
use crate::metrics::{accuracy, per_class_accuracy, segmentation_scores, SegmentationScores};
use crate::numerics::nn::{dropout, layer_norm, Graph, Linear, Mode, ParamId, ParamStore};
use crate::numerics::{adamw_step, cosine_schedule, cross_entropy, Array, Checkpoint, OptimizerState, Tensor};
use crate::seed;
use crate::train::{backbone_snapshot, prepare_groups};

/// Global feature of a token set: concat(mean over tokens, max over tokens).
/// Input (B, v, dim), output (B, 2 dim).
pub fn pooled_features(tokens: &Tensor) -> Result<Tensor> {
    if tokens.ndim() != 3 || tokens.shape()[1] == 0 {
        return Err(Error::InvalidInput(format!(
            "pooling needs (batch, tokens >= 1, dim), got {:?}",
            tokens.shape()
        )));
    }
    Tensor::concat(&[tokens.mean_axis(1, false)?, tokens.max_axis(1, false)?], -1)
}

/// Rebuilds the pretrained model stored in a checkpoint. When `expected` is
/// given, its architecture and grouping must match the checkpoint's.
pub fn load_backbone(ck: &Checkpoint, expected: Option<&RunConfig>) -> Result<(RunConfig, GaussianMaeModel)> {
    let config = RunConfig::from_toml_str(&ck.config)?;
    if let Some(exp) = expected {
        if exp.model_config()? != config.model_config()? || exp.grouping != config.grouping {
            return Err(Error::Config(
                "checkpoint architecture or grouping differs from the requested config".into(),
            ));
        }
    }
    let mut model = GaussianMaeModel::new(config.model_config()?, config.seeds.init)?;
    ck.restore_store("model.", &mut model.store)?;
    Ok((config, model))
}

/// The last three numbered checkpoints of a pretraining run directory,
/// oldest first.
pub fn candidate_checkpoints(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut found: Vec<(usize, PathBuf)> = std::fs::read_dir(run_dir)
        .map_err(|e| Error::io(run_dir, e))?
        .filter_map(|entry| {
            let path = entry.ok()?.path();
            let stem = path.file_name()?.to_str()?;
            let epoch = stem.strip_prefix("epoch_")?.strip_suffix(".ckpt")?.parse().ok()?;
            Some((epoch, path))
        })
        .collect();
    found.sort();
    let start = found.len().saturating_sub(3);
    Ok(found.drain(start..).map(|(_, p)| p).collect())
}

/// One labelled object ready for finetuning.
#[derive(Clone, Debug)]
pub struct TaskItem {
    pub groups: GroupedSplats,
    pub class_id: usize,
    /// Splat centroids (p, 3); the segmentation query points.
    pub points: Array2<f64>,
    pub labels: Option<Vec<usize>>,
}

pub fn prepare_task(samples: &[Sample], config: &RunConfig) -> Result<Vec<TaskItem>> {
    let groups = prepare_groups(samples, config)?;
    Ok(samples
        .iter()
        .zip(groups)
        .map(|(s, groups)| TaskItem {
            groups,
            class_id: s.class_id,
            points: s.set.centroids.clone(),
            labels: s.labels.clone(),
        })
        .collect())
}

fn all_groups(groups: &GroupedSplats) -> Vec<usize> {
    (0..groups.num_groups()).collect()
}

/// Classification MLP over pooled encoder features.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub protocol: Protocol,
    pub layers: Vec<Linear>,
    pub dropout: f64,
    pub classes: usize,
}

impl ClassifierHead {
    /// MLP-Linear gets a single affine layer; the other protocols get three
    /// (two hidden widths from `hidden`).
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: &[usize],
        classes: usize,
        protocol: Protocol,
        dropout: f64,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        let widths: Vec<usize> = match protocol {
            Protocol::MlpLinear => vec![in_dim, classes],
            _ => {
                if hidden.len() != 2 {
                    return Err(Error::Config(format!(
                        "a three-layer head needs two hidden widths, got {hidden:?}"
                    )));
                }
                vec![in_dim, hidden[0], hidden[1], classes]
            }
        };
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Ok(ClassifierHead {
            protocol,
            layers,
            dropout,
            classes,
        })
    }

    /// (B, in_dim) features to (B, classes) logits.
    pub fn forward(&self, g: &Graph, x: &Tensor) -> Result<Tensor> {
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, &h)?;
            if i < last {
                h = dropout(g, &h.gelu(), self.dropout)?;
            }
        }
        Ok(h)
    }
}

/// Backbone plus classification head sharing one parameter store.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub model: GaussianMaeModel,
    pub head: ClassifierHead,
}

impl Classifier {
    /// Pooled features (1, 2 dim) of one object, all groups visible.
    pub fn features(&self, g: &Graph, item: &TaskItem) -> Result<Tensor> {
        let enc = self.model.encode(g, &item.groups, &all_groups(&item.groups), &[])?;
        pooled_features(&enc.latent)
    }

    pub fn logits(&self, g: &Graph, item: &TaskItem) -> Result<Tensor> {
        self.head.forward(g, &self.features(g, item)?)
    }

    pub fn predict(&self, items: &[TaskItem]) -> Result<Vec<usize>> {
        let g = Graph::new(&self.model.store, Mode::Eval, seed::rng(0, &[]));
        items
            .iter()
            .map(|it| Ok(argmax(self.logits(&g, it)?.value().iter().copied())))
            .collect()
    }
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationReport {
    pub protocol: Protocol,
    pub epochs: usize,
    /// Mean training loss of the last epoch.
    pub final_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// Test accuracy per class id (None when the class has no test object).
    pub per_class: Vec<Option<f64>>,
    /// Whether backbone weights are bitwise unchanged by training.
    pub backbone_unchanged: bool,
}

impl ClassificationReport {
    pub fn to_csv(&self, class_names: &[String]) -> String {
        let mut out = String::from("class,test_accuracy\n");
        for (i, acc) in self.per_class.iter().enumerate() {
            let name = class_names.get(i).cloned().unwrap_or_else(|| i.to_string());
            let v = acc.map_or(String::from("nan"), |a| a.to_string());
            writeln!(out, "{name},{v}").unwrap();
        }
        writeln!(out, "overall,{}", self.test_accuracy).unwrap();
        writeln!(out, "train,{}", self.train_accuracy).unwrap();
        out
    }
}

/// Epoch-level optimizer bookkeeping shared by both tasks.
struct Schedule {
    total: u64,
    warmup: u64,
    lr: f64,
}

impl Schedule {
    fn new(config: &RunConfig, items: usize) -> Self {
        let f = &config.finetune;
        let per_epoch = items.div_ceil(f.batch_size).max(1) as u64;
        let total = (per_epoch * f.epochs as u64).max(1);
        Schedule {
            total,
            warmup: (per_epoch * f.warmup_epochs as u64).min(total - 1),
            lr: f.lr,
        }
    }

    fn at(&self, step: u64) -> f64 {
        cosine_schedule(step + 1, self.total, self.warmup, self.lr)
    }
}

fn freeze_backbone(store: &mut ParamStore, protocol: Protocol) {
    for prefix in BACKBONE_PREFIXES {
        store.set_trainable(prefix, !protocol.freezes_backbone());
    }
}

fn check_classes(items: &[TaskItem], classes: usize) -> Result<()> {
    if let Some(it) = items.iter().find(|it| it.class_id >= classes) {
        return Err(Error::Config(format!(
            "class id {} does not fit a {classes}-class head",
            it.class_id
        )));
    }
    Ok(())
}

fn accumulate(total: Option<Tensor>, term: Tensor) -> Result<Tensor> {
    match total {
        Some(t) => t.add(&term),
        None => Ok(term),
    }
}

/// Trains a classification head (and the backbone under `full`) on `train`
/// and reports accuracy on `test`.
pub fn finetune_classify(
    model: GaussianMaeModel,
    config: &RunConfig,
    train: &[TaskItem],
    test: &[TaskItem],
    classes: usize,
) -> Result<(Classifier, ClassificationReport)> {
    config.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::InvalidInput("classification needs train and test objects".into()));
    }
    check_classes(train, classes)?;
    check_classes(test, classes)?;
    let f = &config.finetune;
    let mut model = model;
    let mut rng = seed::rng(config.seeds.init, &[0xC1A5]);
    let head = ClassifierHead::new(
        &mut model.store,
        "cls_head",
        2 * model.config.token_dim,
        &f.hidden,
        classes,
        f.protocol,
        f.dropout,
        &mut rng,
    )?;
    freeze_backbone(&mut model.store, f.protocol);
    let mut clf = Classifier { model, head };
    let before = backbone_snapshot(&clf.model.store);

    // Frozen protocols: the backbone is deterministic in eval mode, so its
    // features are computed once.
    let cached: Option<Vec<Array>> = if f.protocol.freezes_backbone() {
        let g = Graph::new(&clf.model.store, Mode::Eval, seed::rng(0, &[]));
        Some(
            train
                .iter()
                .map(|it| Ok(clf.features(&g, it)?.value().clone()))
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };

    let schedule = Schedule::new(config, train.len());
    let mut opt = OptimizerState::new(&clf.model.store, f.lr, f.weight_decay);
    let mut final_loss = 0.0;
    for epoch in 1..=f.epochs {
        let order = epoch_order(train.len(), config.seeds.data, 0xF000 + epoch as u64);
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(f.batch_size).enumerate() {
            let lr = schedule.at(opt.step);
            let rng = seed::rng(config.seeds.init, &[0xF1, epoch as u64, b as u64]);
            let (value, grads) = {
                let g = Graph::new(&clf.model.store, Mode::Train, rng);
                let feats = match &cached {
                    Some(c) => {
                        let rows: Vec<Tensor> = batch.iter().map(|&i| Tensor::constant(c[i].clone())).collect();
                        Tensor::concat(&rows, 0)?
                    }
                    None => {
                        let rows = batch
                            .iter()
                            .map(|&i| clf.features(&g, &train[i]))
                            .collect::<Result<Vec<_>>>()?;
                        Tensor::concat(&rows, 0)?
                    }
                };
                let labels: Vec<usize> = batch.iter().map(|&i| train[i].class_id).collect();
                let loss = cross_entropy(&clf.head.forward(&g, &feats)?, &labels)?;
                if !loss.item().is_finite() {
                    return Err(Error::Numeric(format!("non-finite classification loss at epoch {epoch}")));
                }
                loss.backward()?;
                (loss.item(), g.grads())
            };
            adamw_step(&mut clf.model.store, &grads, &mut opt, lr)?;
            epoch_loss += value * batch.len() as f64 / train.len() as f64;
        }
        final_loss = epoch_loss;
    }

    let backbone_unchanged = before == backbone_snapshot(&clf.model.store);
    let train_labels: Vec<usize> = train.iter().map(|it| it.class_id).collect();
    let test_labels: Vec<usize> = test.iter().map(|it| it.class_id).collect();
    let test_preds = clf.predict(test)?;
    let report = ClassificationReport {
        protocol: f.protocol,
        epochs: f.epochs,
        final_loss,
        train_accuracy: accuracy(&clf.predict(train)?, &train_labels)?,
        test_accuracy: accuracy(&test_preds, &test_labels)?,
        per_class: per_class_accuracy(&test_preds, &test_labels, classes)?,
        backbone_unchanged,
    };
    Ok((clf, report))
}

/// Squared-distance floor of the inverse-distance weights.
pub const INTERP_EPS: f64 = 1e-8;

/// Inverse-distance weights of the `k` nearest centers for every query:
/// w ∝ 1 / (d^power + 1e-8), normalized per query. A query that coincides
/// with a center takes that center's feature alone.
pub fn interpolation_weights(
    centers: &Array2<f64>,
    queries: &Array2<f64>,
    k: usize,
    power: f64,
) -> Result<Vec<Vec<(usize, f64)>>> {
    if k == 0 || centers.nrows() < k {
        return Err(Error::InvalidInput(format!(
            "interpolation needs 1 <= k <= centers, got k={k} with {} centers",
            centers.nrows()
        )));
    }
    if centers.ncols() != queries.ncols() {
        return Err(Error::shape("interpolation", centers.shape(), queries.shape()));
    }
    Ok(queries
        .rows()
        .into_iter()
        .map(|q| {
            let mut d: Vec<(f64, usize)> = centers
                .rows()
                .into_iter()
                .enumerate()
                .map(|(j, c)| (c.iter().zip(q.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>(), j))
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            if d[0].0 == 0.0 {
                return vec![(d[0].1, 1.0)];
            }
            let raw: Vec<(usize, f64)> = d[..k]
                .iter()
                .map(|&(sq, j)| (j, 1.0 / (sq.sqrt().powf(power) + INTERP_EPS)))
                .collect();
            let norm: f64 = raw.iter().map(|(_, w)| w).sum();
            raw.into_iter().map(|(j, w)| (j, w / norm)).collect()
        })
        .collect())
}

/// Dense (queries, centers) matrix form of [`interpolation_weights`].
pub fn interpolation_matrix(centers: &Array2<f64>, queries: &Array2<f64>, k: usize, power: f64) -> Result<Array2<f64>> {
    let mut m = Array2::zeros((queries.nrows(), centers.nrows()));
    for (i, row) in interpolation_weights(centers, queries, k, power)?.into_iter().enumerate() {
        for (j, w) in row {
            m[[i, j]] = w;
        }
    }
    Ok(m)
}

/// Features given at `centers` (p', dim) interpolated to `queries` (m, 3)
/// with k = 3 and power 2.
pub fn propagate_features(features: &Array2<f64>, centers: &Array2<f64>, queries: &Array2<f64>) -> Result<Array2<f64>> {
    if features.nrows() != centers.nrows() {
        return Err(Error::shape("propagate_features", features.shape(), centers.shape()));
    }
    Ok(interpolation_matrix(centers, queries, 3, 2.0)?.dot(features))
}

/// Encoder blocks whose outputs feed segmentation: ⌈d/3⌉, ⌈2d/3⌉ and d.
pub fn segmentation_taps(depth: usize) -> [usize; 3] {
    [depth.div_ceil(3), (2 * depth).div_ceil(3), depth]
}

/// Per-point part classifier over propagated encoder features.
///
/// The pointwise map's first layer acts on concat(propagated taps, global
/// feature). Interpolation is linear, so that layer is applied to the tap
/// features at the group centers before propagation and to the global
/// feature once; the result equals applying it at every query point.
#[derive(Clone, Debug)]
pub struct SegmentationHead {
    pub k: usize,
    pub power: f64,
    pub taps: [usize; 3],
    pub local: Linear,
    pub global: ParamId,
    pub layers: Vec<Linear>,
    pub dropout: f64,
    pub parts: usize,
}

impl SegmentationHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        token_dim: usize,
        depth: usize,
        hidden: &[usize],
        parts: usize,
        k: usize,
        dropout: f64,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        if hidden.is_empty() {
            return Err(Error::Config("segmentation head needs at least one hidden width".into()));
        }
        let local = Linear::new(store, &format!("{name}.in_local"), 3 * token_dim, hidden[0], rng);
        let global = store.add(
            format!("{name}.in_global.weight"),
            crate::numerics::nn::xavier(rng, 2 * token_dim, hidden[0]),
            true,
        );
        let mut widths = hidden.to_vec();
        widths.push(parts);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Ok(SegmentationHead {
            k,
            power: 2.0,
            taps: segmentation_taps(depth),
            local,
            global,
            layers,
            dropout,
            parts,
        })
    }

    /// Per-point logits (p, parts) for one object.
    pub fn forward(&self, g: &Graph, model: &GaussianMaeModel, item: &TaskItem) -> Result<Tensor> {
        let groups = &item.groups;
        let n = groups.num_groups();
        // Shallow encoders repeat a block among the taps; each block is
        // tapped once and reused.
        let mut blocks = self.taps.to_vec();
        blocks.dedup();
        let enc = model.encode(g, groups, &all_groups(groups), &blocks)?;
        let normed = self
            .taps
            .iter()
            .map(|t| layer_norm(&enc.taps[blocks.iter().position(|b| b == t).expect("tapped")], 1e-6))
            .collect::<Result<Vec<_>>>()?;
        let stacked = Tensor::concat(&normed, -1)?.reshape(&[n, 3 * model.config.token_dim])?;
        let at_centers = self.local.forward(g, &stacked)?;
        let weights = interpolation_matrix(&groups.center_positions, &item.points, self.k, self.power)?;
        let propagated = Tensor::constant(weights.into_dyn()).matmul(&at_centers)?;
        let global = pooled_features(&enc.latent)?.matmul(&g.param(self.global))?;
        let mut h = dropout(g, &propagated.add(&global)?.gelu(), self.dropout)?;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, &h)?;
            if i < last {
                h = dropout(g, &h.gelu(), self.dropout)?;
            }
        }
        Ok(h)
    }
}

#[derive(Clone, Debug)]
pub struct Segmenter {
    pub model: GaussianMaeModel,
    pub head: SegmentationHead,
    /// Part count per class id.
    pub parts: Vec<usize>,
}

impl Segmenter {
    /// Per-point part predictions, restricted to the parts of the object's class.
    pub fn predict(&self, item: &TaskItem) -> Result<Vec<usize>> {
        let g = Graph::new(&self.model.store, Mode::Eval, seed::rng(0, &[]));
        let logits = self.head.forward(&g, &self.model, item)?;
        let allowed = self.parts[item.class_id];
        Ok(logits
            .value()
            .axis_iter(Axis(0))
            .map(|row| argmax(row.iter().take(allowed).copied()))
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationReport {
    pub epochs: usize,
    pub final_loss: f64,
    pub scores: SegmentationScores,
    pub backbone_unchanged: bool,
}

impl SegmentationReport {
    pub fn to_csv(&self, class_names: &[String]) -> String {
        let mut out = String::from("class,miou,objects\n");
        for (i, entry) in self.scores.per_class.iter().enumerate() {
            if let Some((m, n)) = entry {
                let name = class_names.get(i).cloned().unwrap_or_else(|| i.to_string());
                writeln!(out, "{name},{m},{n}").unwrap();
            }
        }
        writeln!(out, "class_miou,{},", self.scores.class_miou).unwrap();
        writeln!(out, "instance_miou,{},", self.scores.instance_miou).unwrap();
        out
    }
}

/// Part count per class: one more than the largest label seen in any object
/// of that class.
pub fn part_counts(items: &[TaskItem], classes: usize) -> Result<Vec<usize>> {
    let mut parts = vec![0usize; classes];
    for (i, it) in items.iter().enumerate() {
        let labels = it.labels.as_ref().ok_or_else(|| Error::Data {
            index: i,
            msg: "object has no part labels".into(),
        })?;
        if it.class_id >= classes {
            return Err(Error::Config(format!("class id {} exceeds {classes} classes", it.class_id)));
        }
        let top = labels.iter().max().map_or(0, |m| m + 1);
        parts[it.class_id] = parts[it.class_id].max(top);
    }
    Ok(parts)
}

fn labels_of(item: &TaskItem, index: usize, parts: usize) -> Result<&[usize]> {
    let labels = item.labels.as_deref().ok_or_else(|| Error::Data {
        index,
        msg: "object has no part labels".into(),
    })?;
    if labels.len() != item.points.nrows() {
        return Err(Error::Data {
            index,
            msg: format!("{} labels for {} points", labels.len(), item.points.nrows()),
        });
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= parts) {
        return Err(Error::Data {
            index,
            msg: format!("part id {bad} is not below the part count {parts}"),
        });
    }
    Ok(labels)
}

/// Trains a segmentation head (and the backbone unless the configured
/// protocol freezes it) and reports mIoU on `test`.
pub fn finetune_segment(
    model: GaussianMaeModel,
    config: &RunConfig,
    train: &[TaskItem],
    test: &[TaskItem],
    parts: &[usize],
) -> Result<(Segmenter, SegmentationReport)> {
    config.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::InvalidInput("segmentation needs train and test objects".into()));
    }
    let width = parts.iter().copied().max().unwrap_or(0);
    if width == 0 {
        return Err(Error::Config("no class has any part".into()));
    }
    for (i, it) in train.iter().chain(test).enumerate() {
        let count = *parts.get(it.class_id).ok_or_else(|| Error::Data {
            index: i,
            msg: format!("class {} has no part count", it.class_id),
        })?;
        labels_of(it, i, count)?;
    }
    let f = &config.finetune;
    let mut model = model;
    let mut rng = seed::rng(config.seeds.init, &[0x5E6]);
    let head = SegmentationHead::new(
        &mut model.store,
        "seg_head",
        model.config.token_dim,
        model.config.encoder_depth,
        &f.hidden,
        width,
        f.interp_k,
        f.dropout,
        &mut rng,
    )?;
    freeze_backbone(&mut model.store, f.protocol);
    let mut seg = Segmenter {
        model,
        head,
        parts: parts.to_vec(),
    };
    let before = backbone_snapshot(&seg.model.store);
    let schedule = Schedule::new(config, train.len());
    let mut opt = OptimizerState::new(&seg.model.store, f.lr, f.weight_decay);
    let mut final_loss = 0.0;
    for epoch in 1..=f.epochs {
        let order = epoch_order(train.len(), config.seeds.data, 0x5E00 + epoch as u64);
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(f.batch_size).enumerate() {
            let lr = schedule.at(opt.step);
            let rng = seed::rng(config.seeds.init, &[0x5E, epoch as u64, b as u64]);
            let (value, grads) = {
                let g = Graph::new(&seg.model.store, Mode::Train, rng);
                let mut total = None;
                for &i in batch {
                    let it = &train[i];
                    let logits = seg.head.forward(&g, &seg.model, it)?;
                    let labels = labels_of(it, i, parts[it.class_id])?;
                    let loss = cross_entropy(&logits, labels)?.mul_scalar(1.0 / batch.len() as f64);
                    total = Some(accumulate(total, loss)?);
                }
                let loss = total.expect("batches are nonempty");
                if !loss.item().is_finite() {
                    return Err(Error::Numeric(format!("non-finite segmentation loss at epoch {epoch}")));
                }
                loss.backward()?;
                (loss.item(), g.grads())
            };
            adamw_step(&mut seg.model.store, &grads, &mut opt, lr)?;
            epoch_loss += value * batch.len() as f64 / train.len() as f64;
        }
        final_loss = epoch_loss;
    }
    let backbone_unchanged = before == backbone_snapshot(&seg.model.store);
    let scored = test
        .iter()
        .map(|it| Ok((it.class_id, seg.predict(it)?, it.labels.clone().unwrap_or_default())))
        .collect::<Result<Vec<_>>>()?;
    let report = SegmentationReport {
        epochs: f.epochs,
        final_loss,
        scores: segmentation_scores(&scored, parts)?,
        backbone_unchanged,
    };
    Ok((seg, report))
}

/// Pooled feature matrix (objects, 2 dim) of a frozen model, in eval mode.
pub fn extract_features(model: &GaussianMaeModel, items: &[TaskItem]) -> Result<Array2<f64>> {
    let g = Graph::new(&model.store, Mode::Eval, seed::rng(0, &[]));
    let rows = items
        .iter()
        .map(|it| {
            let enc = model.encode(&g, &it.groups, &all_groups(&it.groups), &[])?;
            Ok(pooled_features(&enc.latent)?.value().clone())
        })
        .collect::<Result<Vec<Array>>>()?;
    let dim = 2 * model.config.token_dim;
    let mut out = Array2::zeros((items.len(), dim));
    for (i, r) in rows.iter().enumerate() {
        out.row_mut(i).assign(&r.view().into_shape_with_order(IxDyn(&[dim])).map_err(|e| {
            Error::InvalidInput(e.to_string())
        })?.into_dimensionality::<ndarray::Ix1>().expect("rank 1"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth_object, Primitive, Split, SyntheticSpec};
    use crate::numerics::grad_check_params;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> RunConfig {
        let mut c = RunConfig::desk();
        c.grouping.splats = 96;
        c.grouping.num_groups = 8;
        c.grouping.group_size = 8;
        c.grouping.pool_size = 12;
        c.model.hidden_dim = 16;
        c.model.slots = 4;
        c.model.token_dim = 16;
        c.model.encoder_depth = 3;
        c.model.heads = 2;
        c.model.drop_path = 0.0;
        c.finetune.hidden = vec![16, 8];
        c.finetune.batch_size = 4;
        c.finetune.epochs = 2;
        c.finetune.warmup_epochs = 1;
        c
    }

    fn items(c: &RunConfig, kinds: &[Primitive], count: usize) -> Vec<TaskItem> {
        let spec = SyntheticSpec {
            splats: c.grouping.splats,
            ..Default::default()
        };
        let samples: Vec<Sample> = (0..count)
            .map(|i| {
                let kind = kinds[i % kinds.len()];
                let obj = synth_object(&spec, kind, i).unwrap();
                Sample {
                    set: obj.set,
                    class_id: i % kinds.len(),
                    labels: Some(obj.parts),
                    source: format!("obj{i}").into(),
                    split: Split::Train,
                }
            })
            .collect();
        prepare_task(&samples, c).unwrap()
    }

    fn tensor(rows: &[&[f64]]) -> Tensor {
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::from_vec(&[1, rows.len(), rows[0].len()], data).unwrap()
    }

    #[test]
    fn pooled_examples() {
        let out = pooled_features(&tensor(&[&[0.0, 2.0], &[2.0, 0.0]])).unwrap();
        assert_eq!(out.value().iter().copied().collect::<Vec<_>>(), [1.0, 1.0, 2.0, 2.0]);
        let single = pooled_features(&tensor(&[&[3.0, -1.0]])).unwrap();
        assert_eq!(single.value().iter().copied().collect::<Vec<_>>(), [3.0, -1.0, 3.0, -1.0]);
        let a = pooled_features(&tensor(&[&[1.0, 5.0], &[-2.0, 0.5], &[4.0, 4.0]])).unwrap();
        let b = pooled_features(&tensor(&[&[4.0, 4.0], &[1.0, 5.0], &[-2.0, 0.5]])).unwrap();
        for (x, y) in a.value().iter().zip(b.value()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-15);
        }
        assert!(pooled_features(&Tensor::zeros(&[1, 0, 2])).is_err());
    }

    #[test]
    fn head_layer_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let lin = ClassifierHead::new(&mut store, "a", 8, &[6, 4], 3, Protocol::MlpLinear, 0.5, &mut rng).unwrap();
        let mlp = ClassifierHead::new(&mut store, "b", 8, &[6, 4], 3, Protocol::Mlp3, 0.5, &mut rng).unwrap();
        assert_eq!((lin.layers.len(), mlp.layers.len()), (1, 3));
    }

    #[test]
    fn interpolation_examples() {
        let centers = Array2::from_shape_vec((3, 3), vec![0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 5.0, 0.0]).unwrap();
        let feats = Array2::from_shape_vec((3, 2), vec![1.0, 2.0, 3.0, 4.0, -7.0, 9.0]).unwrap();
        let at = propagate_features(&feats, &centers, &centers).unwrap();
        assert_eq!(at, feats);
        let mid = Array2::from_shape_vec((1, 3), vec![1.0, 0.0, 0.0]).unwrap();
        let m = interpolation_matrix(&centers, &mid, 2, 2.0).unwrap();
        let out = m.dot(&feats);
        assert_abs_diff_eq!(out[[0, 0]], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out[[0, 1]], 3.0, epsilon = 1e-12);
        assert!(interpolation_weights(&centers, &mid, 4, 2.0).is_err());
    }

    #[test]
    fn interpolation_weights_are_convex() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let centers = Array2::from_shape_fn((10, 3), |_| rng.random_range(-1.0..1.0));
        let queries = Array2::from_shape_fn((50, 3), |_| rng.random_range(-1.0..1.0));
        for row in interpolation_weights(&centers, &queries, 3, 2.0).unwrap() {
            assert_eq!(row.len(), 3);
            assert!(row.iter().all(|(_, w)| *w >= 0.0));
            assert_abs_diff_eq!(row.iter().map(|(_, w)| w).sum::<f64>(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn taps_are_evenly_spaced() {
        assert_eq!(segmentation_taps(12), [4, 8, 12]);
        assert_eq!(segmentation_taps(3), [1, 2, 3]);
        assert_eq!(segmentation_taps(1), [1, 1, 1]);
    }

    #[test]
    fn probes_keep_backbone_bitwise() {
        let mut c = tiny_config();
        let train = items(&c, &[Primitive::Sphere, Primitive::Box], 8);
        for protocol in [Protocol::MlpLinear, Protocol::Mlp3] {
            c.finetune.protocol = protocol;
            let model = GaussianMaeModel::new(c.model_config().unwrap(), 5).unwrap();
            let before = backbone_snapshot(&model.store);
            let (clf, report) = finetune_classify(model, &c, &train, &train, 2).unwrap();
            assert!(report.backbone_unchanged);
            assert_eq!(before, backbone_snapshot(&clf.model.store));
            assert!((0.0..=1.0).contains(&report.test_accuracy));
        }
        c.finetune.protocol = Protocol::Full;
        let model = GaussianMaeModel::new(c.model_config().unwrap(), 5).unwrap();
        let (_, report) = finetune_classify(model, &c, &train, &train, 2).unwrap();
        assert!(!report.backbone_unchanged);
    }

    #[test]
    fn class_count_mismatch_is_a_config_error() {
        let c = tiny_config();
        let train = items(&c, &[Primitive::Sphere, Primitive::Box, Primitive::Torus], 3);
        let model = GaussianMaeModel::new(c.model_config().unwrap(), 5).unwrap();
        assert!(matches!(finetune_classify(model, &c, &train, &train, 2), Err(Error::Config(_))));
    }

    #[test]
    fn linear_probe_separates_separable_features() {
        // Two classes whose pooled features differ along a fixed direction.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dim = 12;
        let mut store = ParamStore::new();
        let head = ClassifierHead::new(&mut store, "h", dim, &[], 2, Protocol::MlpLinear, 0.0, &mut rng).unwrap();
        let x = Array2::from_shape_fn((40, dim), |(i, j)| {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            rng.random_range(-0.5..0.5) + if j == 0 { sign } else { 0.0 }
        });
        let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let mut opt = OptimizerState::new(&store, 0.05, 0.0);
        for _ in 0..200 {
            let grads = {
                let g = Graph::new(&store, Mode::Train, seed::rng(0, &[]));
                let loss = cross_entropy(&head.forward(&g, &Tensor::constant(x.clone().into_dyn())).unwrap(), &labels).unwrap();
                loss.backward().unwrap();
                g.grads()
            };
            adamw_step(&mut store, &grads, &mut opt, 0.05).unwrap();
        }
        let g = Graph::new(&store, Mode::Eval, seed::rng(0, &[]));
        let logits = head.forward(&g, &Tensor::constant(x.into_dyn())).unwrap();
        let preds: Vec<usize> = logits.value().axis_iter(Axis(0)).map(|r| argmax(r.iter().copied())).collect();
        assert_eq!(accuracy(&preds, &labels).unwrap(), 1.0);
    }

    #[test]
    fn classification_is_invariant_to_splat_order() {
        let mut c = tiny_config();
        c.grouping.fps_start = crate::config::StartMode::Content;
        let spec = SyntheticSpec {
            splats: 96,
            ..Default::default()
        };
        let obj = synth_object(&spec, Primitive::Cone, 0).unwrap();
        let mut perm: Vec<usize> = (0..96).collect();
        perm.reverse();
        perm.swap(3, 40);
        let sample = |set| Sample {
            set,
            class_id: 0,
            labels: None,
            source: "x".into(),
            split: Split::Test,
        };
        let a = prepare_task(&[sample(obj.set.clone())], &c).unwrap();
        let b = prepare_task(&[sample(obj.set.select(&perm))], &c).unwrap();
        let model = GaussianMaeModel::new(c.model_config().unwrap(), 9).unwrap();
        let fa = extract_features(&model, &a).unwrap();
        let fb = extract_features(&model, &b).unwrap();
        for (x, y) in fa.iter().zip(fb.iter()) {
            assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn segmentation_runs_and_scores() {
        let mut c = tiny_config();
        c.finetune.epochs = 1;
        let data = items(&c, &[Primitive::Cylinder], 4);
        let parts = part_counts(&data, 1).unwrap();
        assert_eq!(parts, [2]);
        let model = GaussianMaeModel::new(c.model_config().unwrap(), 5).unwrap();
        let (seg, report) = finetune_segment(model, &c, &data, &data, &parts).unwrap();
        assert!((0.0..=1.0).contains(&report.scores.class_miou));
        assert_eq!(seg.predict(&data[0]).unwrap().len(), data[0].points.nrows());
        let mut bad = data.clone();
        bad[0].labels.as_mut().unwrap()[0] = 5;
        let model = GaussianMaeModel::new(c.model_config().unwrap(), 5).unwrap();
        assert!(matches!(finetune_segment(model, &c, &bad, &data, &parts), Err(Error::Data { .. })));
    }

    #[test]
    fn segmentation_head_gradients() {
        let mut c = tiny_config();
        c.finetune.dropout = 0.0;
        c.model.token_dim = 8;
        c.model.hidden_dim = 8;
        c.finetune.hidden = vec![6];
        let data = items(&c, &[Primitive::Cylinder], 1);
        let mut model = GaussianMaeModel::new(c.model_config().unwrap(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let head = SegmentationHead::new(&mut model.store, "seg", 8, 3, &[6], 2, 3, 0.0, &mut rng).unwrap();
        let labels = data[0].labels.clone().unwrap();
        let mut store = model.store.clone();
        for prefix in ["tokenizer.", "pos_embed.", "decoder.", "head.", "mask_token"] {
            store.set_trainable(prefix, false);
        }
        let check = grad_check_params(
            |g| cross_entropy(&head.forward(g, &model, &data[0])?, &labels),
            &store,
            1e-6,
            6,
        )
        .unwrap();
        assert!(check.max_rel_error < 1e-4, "{check:?}");
    }
}
