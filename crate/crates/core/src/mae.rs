//! Masked autoencoder over splat-group tokens.
//!
//! The encoder only ever sees tokens of visible groups. The decoder receives
//! the encoder latent followed by one query per masked group (mask token plus
//! that group's positional embedding) and each per-parameter head predicts
//! the masked group's `group_size` rows of that parameter.

use ndarray::{s, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distmetrics::{chamfer_tensor, nearest_indices};
use crate::error::{Error, Result};
use crate::grouping::GroupedSplats;
use crate::numerics::nn::{normal_init, Graph, Linear, ParamId, ParamStore, Transformer};
use crate::numerics::{Array, Tensor};
use crate::splat::ParamKind;
use crate::tokenizer::{PositionalEmbed, Tokenizer};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Embedding feature E, in canonical order.
    pub embedding: Vec<ParamKind>,
    /// Width f_G of the grouping feature space (positional input).
    pub center_dim: usize,
    pub group_size: usize,
    /// Width D of the pooling layer features.
    pub hidden_dim: usize,
    /// Aggregation slots k of the pooling layer.
    pub slots: usize,
    pub token_dim: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub heads: usize,
    pub drop_path: f64,
}

impl ModelConfig {
    pub fn embed_dim(&self) -> usize {
        self.embedding.iter().map(|k| k.dim()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("center_dim", self.center_dim),
            ("group_size", self.group_size),
            ("hidden_dim", self.hidden_dim),
            ("slots", self.slots),
            ("token_dim", self.token_dim),
            ("encoder_depth", self.encoder_depth),
            ("heads", self.heads),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.embedding.is_empty() {
            return Err(Error::Config("embedding feature set is empty".into()));
        }
        if self.token_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "token_dim {} is not divisible by {} heads",
                self.token_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return Err(Error::Config(format!("drop_path {} outside [0, 1)", self.drop_path)));
        }
        Ok(())
    }
}

/// Parameter-name prefixes of the pretrained backbone (what probes freeze).
pub const BACKBONE_PREFIXES: [&str; 3] = ["tokenizer.", "pos_embed.", "encoder."];

#[derive(Clone, Debug)]
pub struct GaussianMaeModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub tokenizer: Tokenizer,
    pub pos_embed: PositionalEmbed,
    pub encoder: Transformer,
    pub decoder: Transformer,
    pub mask_token: ParamId,
    pub heads: Vec<(ParamKind, Linear)>,
}

/// Encoder output for the visible groups of one object.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// (1, v, token_dim) after the final norm.
    pub latent: Tensor,
    /// Un-normalized outputs of the requested encoder blocks.
    pub taps: Vec<Tensor>,
}

/// Predictions and targets for the masked groups of one object.
#[derive(Clone, Debug)]
pub struct PretrainOutput {
    pub latent: Tensor,
    /// Per parameter in E: (m, group_size, dim).
    pub predictions: Vec<(ParamKind, Tensor)>,
    pub truth: Vec<(ParamKind, Array3<f64>)>,
}

impl GaussianMaeModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let tokenizer = Tokenizer::new(
            &mut store,
            "tokenizer",
            c.embed_dim(),
            c.hidden_dim,
            c.slots,
            c.token_dim,
            &mut rng,
        );
        let pos_embed = PositionalEmbed::new(&mut store, "pos_embed", c.center_dim, c.token_dim, &mut rng);
        let encoder = Transformer::new(
            &mut store,
            "encoder",
            c.token_dim,
            c.encoder_depth,
            c.heads,
            c.drop_path,
            &mut rng,
        )?;
        let decoder = Transformer::new(
            &mut store,
            "decoder",
            c.token_dim,
            c.decoder_depth,
            c.heads,
            c.drop_path,
            &mut rng,
        )?;
        let mask_token = store.add("mask_token", normal_init(&mut rng, &[c.token_dim], 0.02), false);
        let heads = c
            .embedding
            .iter()
            .map(|&kind| {
                let name = format!("head.{}", kind.symbol());
                let head = Linear::new(&mut store, &name, c.token_dim, c.group_size * kind.dim(), &mut rng);
                // Small outputs at the start: targets are group-local offsets.
                *store.value_mut(head.weight) =
                    normal_init(&mut rng, &[c.token_dim, c.group_size * kind.dim()], 0.02);
                (kind, head)
            })
            .collect();
        Ok(GaussianMaeModel {
            config,
            store,
            tokenizer,
            pos_embed,
            encoder,
            decoder,
            mask_token,
            heads,
        })
    }

    fn check_groups(&self, groups: &GroupedSplats) -> Result<()> {
        let c = &self.config;
        if groups.embedding != c.embedding
            || groups.group_size() != c.group_size
            || groups.grouping_centers.ncols() != c.center_dim
        {
            return Err(Error::Config(format!(
                "groups (E={:?}, group_size {}, f_G {}) do not match the model (E={:?}, group_size {}, f_G {})",
                groups.embedding,
                groups.group_size(),
                groups.grouping_centers.ncols(),
                c.embedding,
                c.group_size,
                c.center_dim
            )));
        }
        Ok(())
    }

    /// Positional embeddings (1, len, token_dim) of the listed groups.
    pub fn positions(&self, g: &Graph, groups: &GroupedSplats, which: &[usize]) -> Result<Tensor> {
        let centers = groups.grouping_centers.select(Axis(0), which);
        let centers = centers.insert_axis(Axis(0)).into_dyn();
        self.pos_embed.forward(g, &Tensor::constant(centers))
    }

    /// Tokenizes and encodes only the listed groups.
    pub fn encode(
        &self,
        g: &Graph,
        groups: &GroupedSplats,
        visible: &[usize],
        taps: &[usize],
    ) -> Result<Encoded> {
        self.check_groups(groups)?;
        if visible.is_empty() {
            return Err(Error::InvalidInput("no visible groups to encode".into()));
        }
        let neighbors = groups
            .pool_embed
            .select(Axis(0), visible)
            .insert_axis(Axis(0))
            .into_dyn();
        let tokens = self.tokenizer.forward(g, &neighbors)?;
        let x = tokens.add(&self.positions(g, groups, visible)?)?;
        let (latent, taps) = self.encoder.forward_taps(g, &x, taps)?;
        Ok(Encoded { latent, taps })
    }

    pub fn forward_pretrain(
        &self,
        g: &Graph,
        groups: &GroupedSplats,
        plan: &MaskPlan,
    ) -> Result<PretrainOutput> {
        if plan.n != groups.num_groups() {
            return Err(Error::InvalidInput(format!(
                "mask plan covers {} groups, input has {}",
                plan.n,
                groups.num_groups()
            )));
        }
        let latent = self.encode(g, groups, &plan.visible, &[])?.latent;
        let truth = masked_truth(groups, &plan.masked);
        let m = plan.masked.len();
        if m == 0 {
            return Ok(PretrainOutput {
                latent,
                predictions: Vec::new(),
                truth,
            });
        }
        let queries = self
            .positions(g, groups, &plan.masked)?
            .add(&g.param(self.mask_token))?;
        let v = plan.visible.len();
        let decoded = self
            .decoder
            .forward(g, &Tensor::concat(&[latent.clone(), queries], 1)?)?
            .slice(1, v, v + m)?;
        let gs = self.config.group_size;
        let predictions = self
            .heads
            .iter()
            .map(|(kind, head)| {
                let out = head.forward(g, &decoded)?.reshape(&[m, gs, kind.dim()])?;
                Ok((*kind, out))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PretrainOutput {
            latent,
            predictions,
            truth,
        })
    }
}

/// Per-parameter reconstruction targets of the listed groups; the centroid
/// block is in group-local coordinates.
pub fn masked_truth(groups: &GroupedSplats, masked: &[usize]) -> Vec<(ParamKind, Array3<f64>)> {
    let local = groups.local_embed.select(Axis(0), masked);
    groups
        .embedding
        .iter()
        .map(|&kind| {
            let cols = groups.embedding_range(kind).expect("kind is in E");
            (kind, local.slice(s![.., .., cols]).to_owned())
        })
        .collect()
}

/// Split of n groups into visible and masked sets.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub n: usize,
    pub ratio: f64,
    pub seed: u64,
    /// Ascending.
    pub visible: Vec<usize>,
    /// Ascending.
    pub masked: Vec<usize>,
}

/// Masks `floor(ratio * n)` groups drawn uniformly without replacement.
pub fn make_mask(n: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("mask ratio {ratio} outside [0, 1)")));
    }
    let count = (ratio * n as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masked = rand::seq::index::sample(&mut rng, n, count).into_vec();
    masked.sort_unstable();
    let mut is_masked = vec![false; n];
    for &i in &masked {
        is_masked[i] = true;
    }
    let visible = (0..n).filter(|&i| !is_masked[i]).collect();
    Ok(MaskPlan {
        n,
        ratio,
        seed,
        visible,
        masked,
    })
}

/// Total reconstruction loss and its per-parameter values.
#[derive(Clone, Debug)]
pub struct ReconLoss {
    pub total: Tensor,
    pub terms: Vec<(ParamKind, f64)>,
}

impl ReconLoss {
    pub fn term(&self, kind: ParamKind) -> Option<f64> {
        self.terms.iter().find(|(k, _)| *k == kind).map(|(_, v)| *v)
    }
}

/// For every predicted row, the index of the nearest ground-truth row in the
/// same group (centroid distance; ties to the lowest index).
pub fn chamfer_matching(pred: &Array, truth: &Array3<f64>) -> Result<Vec<Vec<usize>>> {
    let pred = pred
        .view()
        .into_dimensionality::<ndarray::Ix3>()
        .map_err(|_| Error::shape("chamfer matching", pred.shape(), truth.shape()))?;
    Ok((0..truth.len_of(Axis(0)))
        .map(|gi| nearest_indices(pred.index_axis(Axis(0), gi), truth.index_axis(Axis(0), gi)))
        .collect())
}

/// Chamfer on local centroids plus mean L1 on every other parameter.
///
/// Non-centroid rows are paired through [`chamfer_matching`] when the
/// centroid is reconstructed, otherwise slot by slot.
pub fn recon_loss(
    predictions: &[(ParamKind, Tensor)],
    truth: &[(ParamKind, Array3<f64>)],
) -> Result<ReconLoss> {
    let masked = truth.first().map_or(0, |(_, t)| t.len_of(Axis(0)));
    if predictions.is_empty() || masked == 0 {
        return Ok(ReconLoss {
            total: Tensor::scalar(0.0),
            terms: truth.iter().map(|(k, _)| (*k, 0.0)).collect(),
        });
    }
    if predictions.len() != truth.len()
        || predictions.iter().zip(truth).any(|((a, p), (b, t))| a != b || p.shape() != t.shape())
    {
        return Err(Error::InvalidInput(
            "predictions and targets disagree on parameters or shapes".into(),
        ));
    }
    let matching = predictions
        .iter()
        .zip(truth)
        .find(|((k, _), _)| *k == ParamKind::Centroid)
        .map(|((_, p), (_, t))| chamfer_matching(p.value(), t))
        .transpose()?;

    let mut total: Option<Tensor> = None;
    let mut terms = Vec::with_capacity(predictions.len());
    for ((kind, pred), (_, target)) in predictions.iter().zip(truth) {
        let term = if *kind == ParamKind::Centroid {
            chamfer_tensor(pred, &Tensor::constant(target.clone().into_dyn()))?
        } else {
            let paired = match &matching {
                Some(rows) => {
                    let mut out = Array3::zeros(target.raw_dim());
                    for (gi, row) in rows.iter().enumerate() {
                        for (i, &j) in row.iter().enumerate() {
                            out.slice_mut(s![gi, i, ..]).assign(&target.slice(s![gi, j, ..]));
                        }
                    }
                    out
                }
                None => target.clone(),
            };
            pred.sub(&Tensor::constant(paired.into_dyn()))?.abs().mean()
        };
        terms.push((*kind, term.item()));
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    Ok(ReconLoss {
        total: total.expect("at least one term"),
        terms,
    })
}

/// Predicts every row of a masked group as that group's mean row.
pub fn group_mean_predictions(truth: &[(ParamKind, Array3<f64>)]) -> Vec<(ParamKind, Tensor)> {
    truth
        .iter()
        .map(|(kind, t)| {
            let mean = t.mean_axis(Axis(1)).expect("group_size > 0").insert_axis(Axis(1));
            let full = mean
                .broadcast(t.raw_dim())
                .expect("broadcast along the group axis")
                .to_owned();
            (*kind, Tensor::constant(full.into_dyn()))
        })
        .collect()
}
