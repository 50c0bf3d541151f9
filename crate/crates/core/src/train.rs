//! Pretraining loop.
//!
//! Every random draw is derived from the configured seeds plus (epoch, step,
//! object) indices, and the complete training state is rounded to float32
//! at every epoch boundary (the precision checkpoints store). A run resumed
//! from any checkpoint therefore continues bitwise identically.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::dataset::{epoch_order, Sample};
use crate::error::{Error, Result};
use crate::grouping::{build_groups, GroupedSplats};
use crate::mae::{group_mean_predictions, make_mask, recon_loss, GaussianMaeModel};
use crate::numerics::nn::{Graph, Mode, ParamId, ParamStore};
use crate::numerics::{adamw_step, cosine_schedule, Array, Checkpoint, OptimizerState, Tensor};
use crate::seed;
use crate::splat::ParamKind;

/// Groups every object once; grouping is deterministic per object index.
pub fn prepare_groups(samples: &[Sample], config: &RunConfig) -> Result<Vec<GroupedSplats>> {
    let selection = config.selection()?;
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            build_groups(&s.set, &selection, &config.grouping_config(i)).map_err(|e| Error::Data {
                index: i,
                msg: format!("{}: {e}", s.source.display()),
            })
        })
        .collect()
}

/// Mean losses of one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub total: f64,
    pub terms: Vec<(ParamKind, f64)>,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

pub fn csv_header(embedding: &[ParamKind]) -> String {
    let mut h = String::from("epoch,step,total");
    for k in embedding {
        write!(h, ",{}", k.symbol()).unwrap();
    }
    h.push_str(",lr\n");
    h
}

pub fn csv_row(r: &EpochRecord) -> String {
    let mut row = format!("{},{},{}", r.epoch, r.step, r.total);
    for (_, v) in &r.terms {
        write!(row, ",{v}").unwrap();
    }
    writeln!(row, ",{}", r.lr).unwrap();
    row
}

fn snap_f32(a: &mut Array) {
    a.mapv_inplace(|v| v as f32 as f64);
}

/// Model plus optimizer state, advanced one epoch at a time.
pub struct Pretrainer {
    pub config: RunConfig,
    pub model: GaussianMaeModel,
    pub optimizer: OptimizerState,
    /// Completed epochs.
    pub epoch: usize,
}

impl Pretrainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let model = GaussianMaeModel::new(config.model_config()?, config.seeds.init)?;
        let optimizer = OptimizerState::new(&model.store, config.pretrain.lr, config.pretrain.weight_decay);
        let mut t = Pretrainer {
            config,
            model,
            optimizer,
            epoch: 0,
        };
        t.snap();
        Ok(t)
    }

    fn snap(&mut self) {
        for i in 0..self.model.store.len() {
            snap_f32(self.model.store.value_mut(ParamId(i)));
        }
        self.optimizer.first.iter_mut().for_each(snap_f32);
        self.optimizer.second.iter_mut().for_each(snap_f32);
    }

    fn schedule(&self, num_objects: usize) -> (u64, u64, u64) {
        let p = &self.config.pretrain;
        let per_epoch = num_objects.div_ceil(p.batch_size).max(1) as u64;
        let total = per_epoch * p.epochs as u64;
        let warmup = (per_epoch * p.warmup_epochs as u64).min(total.saturating_sub(1));
        (per_epoch, total, warmup)
    }

    /// Learning rate for the optimizer step about to be taken.
    pub fn lr_for_step(&self, step: u64, num_objects: usize) -> f64 {
        let (_, total, warmup) = self.schedule(num_objects);
        cosine_schedule(step + 1, total.max(1), warmup, self.config.pretrain.lr)
    }

    /// Mean total loss over `batch` with the per-parameter breakdown.
    fn batch_loss(
        &self,
        g: &Graph,
        groups: &[GroupedSplats],
        batch: &[usize],
        epoch: usize,
    ) -> Result<(Tensor, Vec<(ParamKind, f64)>)> {
        let mut total: Option<Tensor> = None;
        let mut terms: Vec<(ParamKind, f64)> = self.model.config.embedding.iter().map(|&k| (k, 0.0)).collect();
        for &obj in batch {
            let n = groups[obj].num_groups();
            let mask_seed = seed::derive(self.config.seeds.mask, &[epoch as u64, obj as u64]);
            let plan = make_mask(n, self.config.pretrain.mask_ratio, mask_seed)?;
            let out = self.model.forward_pretrain(g, &groups[obj], &plan)?;
            let loss = recon_loss(&out.predictions, &out.truth)?;
            for (acc, (_, v)) in terms.iter_mut().zip(&loss.terms) {
                acc.1 += v / batch.len() as f64;
            }
            let scaled = loss.total.mul_scalar(1.0 / batch.len() as f64);
            total = Some(match total {
                Some(t) => t.add(&scaled)?,
                None => scaled,
            });
        }
        Ok((total.unwrap_or_else(|| Tensor::scalar(0.0)), terms))
    }

    /// Runs one epoch over all objects and returns its mean losses.
    pub fn run_epoch(&mut self, groups: &[GroupedSplats]) -> Result<EpochRecord> {
        if groups.is_empty() {
            return Err(Error::InvalidInput("pretraining needs at least one object".into()));
        }
        let epoch = self.epoch + 1;
        let (per_epoch, _, _) = self.schedule(groups.len());
        let order = epoch_order(groups.len(), self.config.seeds.data, epoch as u64);
        let mut sum_total = 0.0;
        let mut sum_terms: Vec<(ParamKind, f64)> =
            self.model.config.embedding.iter().map(|&k| (k, 0.0)).collect();
        let mut lr = 0.0;
        for (b, batch) in order.chunks(self.config.pretrain.batch_size).enumerate() {
            let step = self.optimizer.step;
            lr = self.lr_for_step(step, groups.len());
            let rng = seed::rng(self.config.seeds.init, &[0xD5, epoch as u64, b as u64]);
            let (value, terms, grads) = {
                let g = Graph::new(&self.model.store, Mode::Train, rng);
                let (loss, terms) = self.batch_loss(&g, groups, batch, epoch)?;
                let value = loss.item();
                if !value.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite loss at epoch {epoch}, step {}",
                        step + 1
                    )));
                }
                loss.backward()?;
                (value, terms, g.grads())
            };
            adamw_step(&mut self.model.store, &grads, &mut self.optimizer, lr).map_err(|e| {
                Error::Numeric(format!("epoch {epoch}, step {}: {e}", step + 1))
            })?;
            let w = batch.len() as f64 / groups.len() as f64;
            sum_total += value * w;
            for (acc, (_, v)) in sum_terms.iter_mut().zip(terms) {
                acc.1 += v * w;
            }
        }
        debug_assert_eq!(order.chunks(self.config.pretrain.batch_size).count() as u64, per_epoch);
        self.epoch = epoch;
        self.snap();
        Ok(EpochRecord {
            epoch,
            step: self.optimizer.step,
            total: sum_total,
            terms: sum_terms,
            lr,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint {
            config: self.config.to_toml(),
            ..Default::default()
        };
        ck.push_store("model.", &self.model.store);
        for (i, e) in self.model.store.entries().iter().enumerate() {
            ck.push(format!("adam.m.{}", e.name), self.optimizer.first[i].clone());
            ck.push(format!("adam.v.{}", e.name), self.optimizer.second[i].clone());
        }
        ck.push("train.step", Array::from_elem(ndarray::IxDyn(&[]), self.optimizer.step as f64));
        ck.push("train.epoch", Array::from_elem(ndarray::IxDyn(&[]), self.epoch as f64));
        ck
    }

    /// Restores a run; the checkpoint's config is authoritative except for
    /// the epoch count, which may be extended.
    pub fn from_checkpoint(ck: &Checkpoint, epochs: Option<usize>) -> Result<Self> {
        let mut config = RunConfig::from_toml_str(&ck.config)?;
        if let Some(e) = epochs {
            config.pretrain.epochs = e;
        }
        let mut t = Pretrainer::new(config)?;
        ck.restore_store("model.", &mut t.model.store)?;
        for (i, e) in t.model.store.entries().iter().enumerate() {
            for (prefix, slot) in [("adam.m.", &mut t.optimizer.first[i]), ("adam.v.", &mut t.optimizer.second[i])] {
                let name = format!("{prefix}{}", e.name);
                let v = ck
                    .get(&name)
                    .ok_or_else(|| Error::Config(format!("checkpoint lacks optimizer tensor {name}")))?;
                *slot = v.clone();
            }
        }
        let scalar = |name: &str| -> Result<f64> {
            ck.get(name)
                .and_then(|a| a.iter().next().copied())
                .ok_or_else(|| Error::Config(format!("checkpoint lacks {name}")))
        };
        t.optimizer.step = scalar("train.step")? as u64;
        t.epoch = scalar("train.epoch")? as usize;
        Ok(t)
    }
}

/// Where a pretraining run writes.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        RunPaths { dir: dir.into() }
    }
    pub fn log(&self) -> PathBuf {
        self.dir.join("pretrain_log.csv")
    }
    pub fn last(&self) -> PathBuf {
        self.dir.join("last.ckpt")
    }
    pub fn numbered(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("epoch_{epoch:04}.ckpt"))
    }
    pub fn config(&self) -> PathBuf {
        self.dir.join("config.toml")
    }
}

/// Trains to the configured epoch count, writing the CSV log (rewritten
/// after every epoch), `last.ckpt` and periodic numbered checkpoints.
///
/// `on_epoch` sees every record and may stop the run early by returning
/// `false`.
pub fn pretrain(
    trainer: &mut Pretrainer,
    groups: &[GroupedSplats],
    paths: &RunPaths,
    mut on_epoch: impl FnMut(&EpochRecord, &Pretrainer) -> bool,
) -> Result<Vec<EpochRecord>> {
    fs::create_dir_all(&paths.dir).map_err(|e| Error::io(&paths.dir, e))?;
    trainer.config.save(paths.config())?;
    let mut log = if trainer.epoch > 0 {
        read_log(&paths.log(), trainer.epoch)?
    } else {
        csv_header(&trainer.model.config.embedding)
    };
    let write_log = |text: &str| fs::write(paths.log(), text).map_err(|e| Error::io(paths.log(), e));
    write_log(&log)?;
    if trainer.epoch == 0 {
        trainer.checkpoint().write(paths.last())?;
    }
    let mut records = Vec::new();
    while trainer.epoch < trainer.config.pretrain.epochs {
        let record = trainer.run_epoch(groups)?;
        log.push_str(&csv_row(&record));
        write_log(&log)?;
        let ck = trainer.checkpoint();
        ck.write(paths.last())?;
        if record.epoch % trainer.config.pretrain.checkpoint_every == 0
            || record.epoch == trainer.config.pretrain.epochs
        {
            ck.write(paths.numbered(record.epoch))?;
        }
        let go_on = on_epoch(&record, trainer);
        records.push(record);
        if !go_on {
            break;
        }
    }
    Ok(records)
}

/// Header plus the first `epochs` rows of an existing log.
fn read_log(path: &Path, epochs: usize) -> Result<String> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<&str> = text.lines().collect();
    if lines.len() < epochs + 1 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("log has {} rows, checkpoint is at epoch {epochs}", lines.len().saturating_sub(1)),
        });
    }
    Ok(lines[..=epochs].iter().map(|l| format!("{l}\n")).collect())
}

/// Masked-reconstruction losses of a model next to the per-group-mean
/// predictor, averaged over objects with a fixed evaluation mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconEvaluation {
    pub model: Vec<(ParamKind, f64)>,
    pub baseline: Vec<(ParamKind, f64)>,
}

pub fn evaluate_reconstruction(
    model: &GaussianMaeModel,
    groups: &[GroupedSplats],
    ratio: f64,
    mask_seed: u64,
) -> Result<ReconEvaluation> {
    let kinds = &model.config.embedding;
    let mut ours = vec![0.0; kinds.len()];
    let mut base = vec![0.0; kinds.len()];
    let g = Graph::new(&model.store, Mode::Eval, seed::rng(0, &[]));
    for (i, grp) in groups.iter().enumerate() {
        let plan = make_mask(grp.num_groups(), ratio, seed::derive(mask_seed, &[i as u64]))?;
        let out = model.forward_pretrain(&g, grp, &plan)?;
        let l = recon_loss(&out.predictions, &out.truth)?;
        let b = recon_loss(&group_mean_predictions(&out.truth), &out.truth)?;
        for j in 0..kinds.len() {
            ours[j] += l.terms[j].1 / groups.len() as f64;
            base[j] += b.terms[j].1 / groups.len() as f64;
        }
    }
    let zip = |v: Vec<f64>| kinds.iter().copied().zip(v).collect();
    Ok(ReconEvaluation {
        model: zip(ours),
        baseline: zip(base),
    })
}

/// Parameter values of the backbone, for freezing checks.
pub fn backbone_snapshot(store: &ParamStore) -> Vec<(String, Array)> {
    store
        .entries()
        .iter()
        .filter(|e| crate::mae::BACKBONE_PREFIXES.iter().any(|p| e.name.starts_with(p)))
        .map(|e| (e.name.clone(), e.value.clone()))
        .collect()
}
