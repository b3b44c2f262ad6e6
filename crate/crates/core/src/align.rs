//! Representation alignment: frozen target features, a learnable projector,
//! the patch-wise cosine loss, and the three gradient routes.
//!
//! Which parameters an alignment term can reach is decided only by where
//! graph cuts sit:
//!
//! * `Forward`: features come from the live encoding graph, so the term
//!   reaches the aligned block and every block before it.
//! * `Detach`: the aligned block is re-run on a cut copy of its input, so
//!   only that block is reached.
//! * `Reverse`: features come from a generative pass started at `cut(z)`;
//!   each block's context is its cached (cut) forward input, so the term
//!   reaches the aligned block and every block after it.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flow::{BlockTrace, Conditioning, FlowBlock};
use crate::graph::{backward, cut, Bound, Gradients, GraphValue, ParamSet};
use crate::harness::archive::Archive;
use crate::harness::optim::AdamW;
use crate::model::{nf_loss, FlowModel};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    Forward,
    Detach,
    Reverse,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Forward, Strategy::Detach, Strategy::Reverse];
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Forward => "forward",
            Strategy::Detach => "detach",
            Strategy::Reverse => "reverse",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "forward" => Ok(Strategy::Forward),
            "detach" => Ok(Strategy::Detach),
            "reverse" => Ok(Strategy::Reverse),
            other => Err(Error::Config(format!(
                "unknown alignment strategy {other:?}"
            ))),
        }
    }
}

/// How the `Reverse` strategy rebuilds the generative pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReversePass {
    /// Parallel pseudo-inverse on cached forward inputs.
    Cached,
    /// Token-by-token inversion with a live graph (reference and benchmark).
    Sequential,
}

/// `(block, layer)`, both zero-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AlignSite {
    pub block: usize,
    pub layer: usize,
}

impl fmt::Display for AlignSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.block, self.layer)
    }
}

impl FromStr for AlignSite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (b, l) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("site {s:?} is not block:layer")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad site {s:?}")))
        };
        Ok(AlignSite {
            block: parse(b)?,
            layer: parse(l)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentConfig {
    pub strategy: Strategy,
    pub sites: Vec<AlignSite>,
    pub lambda: f64,
}

impl AlignmentConfig {
    /// The two deepest blocks, at the sixth layer (or the last layer when
    /// there are fewer).
    pub fn default_sites(blocks: usize, layers: usize) -> Vec<AlignSite> {
        let layer = layers.saturating_sub(1).min(5);
        (blocks.saturating_sub(2)..blocks)
            .map(|block| AlignSite { block, layer })
            .collect()
    }

    pub fn validate(&self, blocks: usize, layers: usize) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if self.lambda > 0.0 && self.sites.is_empty() {
            return Err(Error::Config("alignment weight > 0 but no sites".into()));
        }
        let mut seen = BTreeSet::new();
        for s in &self.sites {
            if s.block >= blocks || s.layer >= layers {
                return Err(Error::Config(format!(
                    "site {s} outside a model with {blocks} blocks of {layers} layers"
                )));
            }
            if !seen.insert(*s) {
                return Err(Error::Config(format!("duplicate site {s}")));
            }
        }
        Ok(())
    }

    fn sorted_sites(&self) -> Vec<AlignSite> {
        let mut s = self.sites.clone();
        s.sort();
        s
    }
}

/// Frozen source of target features `v = Φ(x)`, shaped `[tokens, dim]`.
#[derive(Clone, Debug, PartialEq)]
pub enum TargetEncoder {
    /// `tanh(x W + b)` per token with fixed seeded weights.
    Stub { weight: Tensor, bias: Tensor },
    /// Precomputed features keyed by sample id.
    Injected {
        patches: usize,
        dim: usize,
        features: BTreeMap<String, Tensor>,
    },
}

impl TargetEncoder {
    pub fn stub(channels: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (channels as f64).sqrt();
        let weight = (0..channels * dim)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let bias = (0..dim)
            .map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        TargetEncoder::Stub {
            weight: Tensor::matrix(channels, dim, weight).unwrap(),
            bias: Tensor::vector(bias),
        }
    }

    /// Reads an archive holding `features/<id>` arrays of shape
    /// `[patches, dim]` and `patches` / `feature_dim` manifest entries.
    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let meta = |k: &str| -> Result<usize> {
            archive
                .meta(k)
                .ok_or_else(|| Error::Archive(format!("feature archive lacks {k}")))?
                .parse()
                .map_err(|_| Error::Archive(format!("bad {k}")))
        };
        let (patches, dim) = (meta("patches")?, meta("feature_dim")?);
        let mut features = BTreeMap::new();
        for (name, t) in archive.arrays() {
            if let Some(id) = name.strip_prefix("features/") {
                if t.shape() != [patches, dim] {
                    return Err(Error::Archive(format!(
                        "{name} has shape {:?}, manifest says [{patches}, {dim}]",
                        t.shape()
                    )));
                }
                features.insert(id.to_owned(), t.clone());
            }
        }
        Ok(TargetEncoder::Injected {
            patches,
            dim,
            features,
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            TargetEncoder::Stub { bias, .. } => bias.len(),
            TargetEncoder::Injected { dim, .. } => *dim,
        }
    }

    /// Features for `x` (`[D, C]`) or for the injected sample `id`, pooled
    /// to `D` rows.
    pub fn features(&self, x: &Tensor, id: Option<&str>) -> Result<Tensor> {
        match self {
            TargetEncoder::Stub { weight, bias } => {
                let c = weight.shape()[0];
                if x.shape().len() != 2 || x.shape()[1] != c {
                    return Err(Error::shape(
                        "target_features",
                        &[x.shape(), weight.shape()],
                    ));
                }
                let v = GraphValue::constant(x.clone())
                    .affine(
                        &GraphValue::constant(weight.clone()),
                        &GraphValue::constant(bias.clone()),
                    )?
                    .tanh()?;
                Ok(v.value().clone())
            }
            TargetEncoder::Injected { features, .. } => {
                let id =
                    id.ok_or_else(|| Error::Invalid("injected features need a sample id".into()))?;
                let v = features.get(id).ok_or_else(|| {
                    Error::Invalid(format!("no injected features for sample {id}"))
                })?;
                pool_to_tokens(v, x.rows())
            }
        }
    }
}

/// Nearest-neighbour resampling of `[P, F]` patch features onto `tokens`
/// rows; square grids are resampled in 2-D.
pub fn pool_to_tokens(v: &Tensor, tokens: usize) -> Result<Tensor> {
    let (p, f) = (v.rows(), v.cols());
    if p == tokens {
        return Ok(v.clone());
    }
    let side = |n: usize| {
        let s = (n as f64).sqrt().round() as usize;
        (s * s == n).then_some(s)
    };
    let src: Vec<usize> = match (side(p), side(tokens)) {
        (Some(sp), Some(st)) => (0..tokens)
            .map(|d| {
                let (i, j) = (d / st, d % st);
                (i * sp / st) * sp + j * sp / st
            })
            .collect(),
        _ => (0..tokens).map(|d| d * p / tokens).collect(),
    };
    let mut data = Vec::with_capacity(tokens * f);
    for s in src {
        data.extend_from_slice(v.row(s));
    }
    Tensor::matrix(tokens, f, data)
}

/// Three affine layers with SiLU in between, applied token-wise.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Projector {
    pub in_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
}

impl Projector {
    pub fn init_params(&self, rng: &mut impl Rng) -> ParamSet {
        let dims = [self.in_dim, self.hidden, self.hidden, self.out_dim];
        let mut ps = ParamSet::new();
        for i in 0..3 {
            let (a, b) = (dims[i], dims[i + 1]);
            let std = 1.0 / (a as f64).sqrt();
            let w = (0..a * b)
                .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            ps.insert(format!("proj.{i}.w"), Tensor::matrix(a, b, w).unwrap());
            ps.insert(format!("proj.{i}.b"), Tensor::zeros(&[b]));
        }
        ps
    }

    pub fn apply(&self, bound: &Bound, h: &GraphValue) -> Result<GraphValue> {
        let mut x = h.clone();
        for i in 0..3 {
            x = x.affine(
                bound.get(&format!("proj.{i}.w"))?,
                bound.get(&format!("proj.{i}.b"))?,
            )?;
            if i < 2 {
                x = x.silu()?;
            }
        }
        Ok(x)
    }
}

/// `-(1/P) Σ_p cos(v_p, proj_p)`.
pub fn cosine_alignment(projected: &GraphValue, targets: &GraphValue) -> Result<GraphValue> {
    projected.cosine_rows(targets)?.mean()?.scale(-1.0)
}

/// Alignment loss of one site; `hidden` is `[D, width]` in data order.
pub fn align_loss_site(
    bound: &Bound,
    projector: &Projector,
    hidden: &GraphValue,
    targets: &GraphValue,
) -> Result<GraphValue> {
    if hidden.shape()[0] != targets.shape()[0] {
        return Err(Error::shape(
            "align_loss_site",
            &[hidden.shape(), targets.shape()],
        ));
    }
    cosine_alignment(&projector.apply(bound, hidden)?, targets)
}

/// `nf + λ · mean(site_losses)`; returns `nf` itself when `λ = 0` or there
/// are no sites.
pub fn total_loss(nf: &GraphValue, site_losses: &[GraphValue], lambda: f64) -> Result<GraphValue> {
    if lambda == 0.0 || site_losses.is_empty() {
        return Ok(nf.clone());
    }
    nf.add(&mean_of(site_losses)?.scale(lambda)?)
}

fn mean_of(values: &[GraphValue]) -> Result<GraphValue> {
    let mut acc = values[0].clone();
    for v in &values[1..] {
        acc = acc.add(v)?;
    }
    acc.scale(1.0 / values.len() as f64)
}

/// Hidden state of `layer` mapped from ordering space back to data order.
fn hidden_in_data_order(block: &FlowBlock, trace: &BlockTrace, layer: usize) -> Result<GraphValue> {
    trace.hidden[layer].permute_rows(block.ordering().inverse())
}

/// Loss terms of one training example, all in a single graph.
#[derive(Clone, Debug)]
pub struct Objective {
    pub nf: GraphValue,
    pub site_losses: Vec<GraphValue>,
    /// Mean of the site losses (unweighted), when there are sites.
    pub align: Option<GraphValue>,
    pub total: GraphValue,
    /// Largest `|z^{t-1} - cached[t-1]|` seen in a reverse pass.
    pub reconstruction_error: Option<f64>,
}

/// Builds `L_NF` and the alignment terms for one example. `x` is the
/// (possibly noisy) model input and `targets` the frozen features `[D, F]`.
#[allow(clippy::too_many_arguments)]
pub fn build_objective(
    model: &FlowModel,
    projector: &Projector,
    bound: &Bound,
    x: &GraphValue,
    cond: &Conditioning,
    targets: &Tensor,
    cfg: &AlignmentConfig,
    reverse: ReversePass,
) -> Result<Objective> {
    let geom = model.geometry();
    cfg.validate(model.depth(), geom.layers)?;
    let enc = model.encode(bound, x, cond)?;
    let nf = nf_loss(&enc)?;
    let sites = cfg.sorted_sites();
    if sites.is_empty() {
        return Ok(Objective {
            total: nf.clone(),
            nf,
            site_losses: vec![],
            align: None,
            reconstruction_error: None,
        });
    }
    let targets = GraphValue::constant(targets.clone());
    let aligned_blocks: BTreeSet<usize> = sites.iter().map(|s| s.block).collect();
    let mut traces: BTreeMap<usize, BlockTrace> = BTreeMap::new();
    let mut reconstruction_error = None;
    let blocks = model.blocks();

    match cfg.strategy {
        Strategy::Forward => {
            for &t in &aligned_blocks {
                traces.insert(t, enc.traces[t].clone());
            }
        }
        Strategy::Detach => {
            for &t in &aligned_blocks {
                let block = &blocks[t];
                let detached = enc.cached_inputs[t].permute_rows(block.ordering().perm())?;
                traces.insert(t, block.param_net(bound, &detached, cond)?);
            }
        }
        Strategy::Reverse => {
            let mut cur = cut(&enc.z);
            let mut worst: f64 = 0.0;
            for (t, block) in blocks.iter().enumerate().rev() {
                let cache = &enc.cached_inputs[t];
                let (prev, trace) = match reverse {
                    ReversePass::Cached => block.inverse_cached(bound, &cur, cache, cond)?,
                    ReversePass::Sequential => block.inverse_sequential(bound, &cur, cond)?,
                };
                worst = worst.max(prev.value().max_abs_diff(cache.value()));
                if aligned_blocks.contains(&t) {
                    traces.insert(t, trace);
                }
                cur = prev;
            }
            reconstruction_error = Some(worst);
        }
    }

    let site_losses = sites
        .iter()
        .map(|s| {
            let h = hidden_in_data_order(&blocks[s.block], &traces[&s.block], s.layer)?;
            align_loss_site(bound, projector, &h, &targets)
        })
        .collect::<Result<Vec<_>>>()?;
    let align = mean_of(&site_losses)?;
    let total = total_loss(&nf, &site_losses, cfg.lambda)?;
    Ok(Objective {
        nf,
        site_losses,
        align: Some(align),
        total,
        reconstruction_error,
    })
}

/// Parameter groups that a loss term can update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    Projector,
    Block(usize),
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamGroup::Projector => f.write_str("phi"),
            ParamGroup::Block(t) => write!(f, "theta{t}"),
        }
    }
}

pub fn param_group(name: &str) -> Option<ParamGroup> {
    let mut parts = name.split('.');
    match parts.next()? {
        "proj" => Some(ParamGroup::Projector),
        "block" => parts.next()?.parse().ok().map(ParamGroup::Block),
        _ => None,
    }
}

/// Groups with a gradient entry.
pub fn observed_footprint(grads: &Gradients) -> BTreeSet<ParamGroup> {
    grads.keys().filter_map(|k| param_group(k)).collect()
}

/// Groups that an alignment term at block `t` (zero-based) of a `depth`-block
/// stack reaches: Forward `{φ, θ_0..θ_t}`, Detach `{φ, θ_t}`, Reverse
/// `{φ, θ_t..θ_{depth-1}}`.
pub fn gradient_footprint(
    strategy: Strategy,
    t: usize,
    depth: usize,
) -> Result<BTreeSet<ParamGroup>> {
    if t >= depth {
        return Err(Error::Invalid(format!(
            "block {t} outside a {depth}-block stack"
        )));
    }
    let blocks: Vec<usize> = match strategy {
        Strategy::Forward => (0..=t).collect(),
        Strategy::Detach => vec![t],
        Strategy::Reverse => (t..depth).collect(),
    };
    let mut set: BTreeSet<ParamGroup> = blocks.into_iter().map(ParamGroup::Block).collect();
    set.insert(ParamGroup::Projector);
    Ok(set)
}

/// One training example as fed to [`repa_training_step`].
#[derive(Clone, Debug)]
pub struct TrainExample {
    /// Model input (noise already added).
    pub x: Tensor,
    /// Class label; `K` is the null class.
    pub label: usize,
    /// Frozen target features for the clean input.
    pub targets: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub nf_loss: f64,
    /// `NaN` when no sites are configured.
    pub align_loss: f64,
    pub total: f64,
}

/// Loss values and gradients of `total` for one example.
pub fn repa_gradients(
    model: &FlowModel,
    projector: &Projector,
    params: &ParamSet,
    example: &TrainExample,
    cfg: &AlignmentConfig,
    reverse: ReversePass,
) -> Result<(StepReport, Gradients)> {
    let bound = params.bind(true);
    let obj = build_objective(
        model,
        projector,
        &bound,
        &GraphValue::constant(example.x.clone()),
        &Conditioning::Label(example.label),
        &example.targets,
        cfg,
        reverse,
    )?;
    let report = StepReport {
        nf_loss: obj.nf.item(),
        align_loss: obj.align.as_ref().map_or(f64::NAN, GraphValue::item),
        total: obj.total.item(),
    };
    if !report.total.is_finite() {
        return Err(Error::NonFinite("total loss".into()));
    }
    Ok((report, backward(&obj.total)?))
}

/// Batch-mean gradients. Examples may be evaluated on worker threads; the
/// reduction always runs in batch order.
pub fn batch_gradients(
    model: &FlowModel,
    projector: &Projector,
    params: &ParamSet,
    batch: &[TrainExample],
    cfg: &AlignmentConfig,
    reverse: ReversePass,
    parallel: bool,
) -> Result<(StepReport, Gradients)> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let run = |ex: &TrainExample| repa_gradients(model, projector, params, ex, cfg, reverse);
    let results: Vec<Result<(StepReport, Gradients)>> = if parallel {
        batch.par_iter().map(run).collect()
    } else {
        batch.iter().map(run).collect()
    };
    let n = batch.len() as f64;
    let mut report = StepReport {
        nf_loss: 0.0,
        align_loss: 0.0,
        total: 0.0,
    };
    let mut sum = Gradients::new();
    for r in results {
        let (rep, grads) = r?;
        report.nf_loss += rep.nf_loss / n;
        report.align_loss += rep.align_loss / n;
        report.total += rep.total / n;
        for (name, g) in grads {
            match sum.get_mut(&name) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    sum.insert(name, g);
                }
            }
        }
    }
    for g in sum.values_mut() {
        for v in g.data_mut() {
            *v /= n;
        }
    }
    Ok((report, sum))
}

/// Computes `L_total` on the batch and applies one optimizer update to
/// `params` (flow blocks and projector together).
#[allow(clippy::too_many_arguments)]
pub fn repa_training_step(
    model: &FlowModel,
    projector: &Projector,
    params: &mut ParamSet,
    batch: &[TrainExample],
    cfg: &AlignmentConfig,
    optimizer: &mut AdamW,
    parallel: bool,
) -> Result<StepReport> {
    let (report, grads) = batch_gradients(
        model,
        projector,
        params,
        batch,
        cfg,
        ReversePass::Cached,
        parallel,
    )?;
    optimizer.step(params, &grads);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::Geometry;
    use crate::harness::optim::AdamWConfig;
    use crate::model::standard_normal;

    fn setup(depth: usize, seed: u64) -> (FlowModel, Projector, ParamSet) {
        let geom = Geometry {
            tokens: 3,
            channels: 2,
            width: 8,
            layers: 2,
            heads: 1,
            ff_mult: 2,
            classes: 2,
        };
        let model = FlowModel::new(geom, depth, 0.0).unwrap();
        let projector = Projector {
            in_dim: 8,
            hidden: 6,
            out_dim: 4,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = model.init_params(&mut rng, false);
        params.extend(projector.init_params(&mut rng));
        (model, projector, params)
    }

    fn graph(data: &[f64], rows: usize) -> GraphValue {
        GraphValue::constant(Tensor::matrix(rows, data.len() / rows, data.to_vec()).unwrap())
    }

    #[test]
    fn cosine_extremes() {
        let v = graph(&[1.0, 2.0, -1.0, 0.5], 2);
        let loss = |p: &GraphValue| cosine_alignment(p, &v).unwrap().item();
        assert!((loss(&v) + 1.0).abs() < 1e-15);
        assert!((loss(&v.scale(-1.0).unwrap()) - 1.0).abs() < 1e-15);
        let orth = graph(&[-2.0, 1.0, 0.5, 1.0], 2);
        assert!(loss(&orth).abs() < 1e-15);
        let zero = graph(&[0.0, 0.0, 0.0, 0.0], 2);
        assert_eq!(loss(&zero), 0.0);
    }

    #[test]
    fn total_loss_arithmetic() {
        let nf = GraphValue::scalar(1.0);
        let sites = [GraphValue::scalar(-1.0), GraphValue::scalar(-1.0)];
        assert!((total_loss(&nf, &sites, 0.1).unwrap().item() - 0.9).abs() < 1e-15);
        assert_eq!(total_loss(&nf, &sites, 0.0).unwrap().id(), nf.id());
    }

    #[test]
    fn stub_encoder_is_frozen_and_deterministic() {
        let enc = TargetEncoder::stub(2, 5, 42);
        let x = standard_normal(&[3, 2], &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(
            enc.features(&x, None).unwrap(),
            enc.features(&x, None).unwrap()
        );
        let TargetEncoder::Stub { bias, .. } = &enc else {
            unreachable!()
        };
        let zero = enc.features(&Tensor::zeros(&[3, 2]), None).unwrap();
        for r in 0..3 {
            for (v, b) in zero.row(r).iter().zip(bias.data()) {
                assert_eq!(*v, b.tanh());
            }
        }
    }

    #[test]
    fn pooling_nearest_neighbour() {
        let v = Tensor::matrix(4, 1, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let up = pool_to_tokens(&v, 16).unwrap();
        // 2x2 grid onto 4x4: each source patch covers a 2x2 tile.
        assert_eq!(up.data()[..8], [0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        assert_eq!(up.data()[8..], [2.0, 2.0, 3.0, 3.0, 2.0, 2.0, 3.0, 3.0]);
        let line = pool_to_tokens(&Tensor::matrix(3, 1, vec![5.0, 6.0, 7.0]).unwrap(), 2).unwrap();
        assert_eq!(line.data(), &[5.0, 6.0]);
    }

    #[test]
    fn config_validation() {
        let cfg = AlignmentConfig {
            strategy: Strategy::Reverse,
            sites: vec![],
            lambda: 0.1,
        };
        assert!(cfg.validate(4, 2).is_err());
        let cfg = AlignmentConfig {
            sites: vec![AlignSite { block: 4, layer: 0 }],
            ..cfg
        };
        assert!(cfg.validate(4, 2).is_err());
        assert_eq!(
            AlignmentConfig::default_sites(8, 8),
            vec![
                AlignSite { block: 6, layer: 5 },
                AlignSite { block: 7, layer: 5 }
            ]
        );
        assert_eq!(
            AlignmentConfig::default_sites(4, 2)[0],
            AlignSite { block: 2, layer: 1 }
        );
        assert_eq!(
            "2:1".parse::<AlignSite>().unwrap(),
            AlignSite { block: 2, layer: 1 }
        );
        assert_eq!("Reverse".parse::<Strategy>().unwrap(), Strategy::Reverse);
    }

    #[test]
    fn predicted_footprints() {
        use ParamGroup::*;
        let f = |s, t, d| {
            gradient_footprint(s, t, d)
                .unwrap()
                .into_iter()
                .collect::<Vec<_>>()
        };
        assert_eq!(f(Strategy::Forward, 1, 2), [Projector, Block(0), Block(1)]);
        assert_eq!(f(Strategy::Reverse, 0, 2), [Projector, Block(0), Block(1)]);
        assert_eq!(f(Strategy::Reverse, 1, 2), [Projector, Block(1)]);
        assert_eq!(f(Strategy::Detach, 2, 4), [Projector, Block(2)]);
        assert!(gradient_footprint(Strategy::Detach, 4, 4).is_err());
    }

    #[test]
    fn observed_footprints_match_prediction() {
        let (model, projector, params) = setup(3, 7);
        let x = standard_normal(&[3, 2], &mut ChaCha8Rng::seed_from_u64(8));
        let targets = TargetEncoder::stub(2, 4, 1).features(&x, None).unwrap();
        for strategy in Strategy::ALL {
            for t in 0..3 {
                let cfg = AlignmentConfig {
                    strategy,
                    sites: vec![AlignSite { block: t, layer: 1 }],
                    lambda: 0.1,
                };
                let bound = params.bind(true);
                let obj = build_objective(
                    &model,
                    &projector,
                    &bound,
                    &GraphValue::constant(x.clone()),
                    &Conditioning::Label(0),
                    &targets,
                    &cfg,
                    ReversePass::Cached,
                )
                .unwrap();
                let term = obj.align.unwrap().scale(cfg.lambda).unwrap();
                let seen = observed_footprint(&backward(&term).unwrap());
                assert_eq!(
                    seen,
                    gradient_footprint(strategy, t, 3).unwrap(),
                    "{strategy} t={t}"
                );
            }
        }
    }

    #[test]
    fn zero_weight_strategies_agree() {
        let (model, projector, params) = setup(2, 3);
        let x = standard_normal(&[3, 2], &mut ChaCha8Rng::seed_from_u64(4));
        let ex = TrainExample {
            targets: TargetEncoder::stub(2, 4, 1).features(&x, None).unwrap(),
            x,
            label: 1,
        };
        let mut results = Vec::new();
        for strategy in Strategy::ALL {
            let cfg = AlignmentConfig {
                strategy,
                sites: AlignmentConfig::default_sites(2, 2),
                lambda: 0.0,
            };
            let mut p = params.clone();
            let mut opt = AdamW::new(AdamWConfig::default());
            repa_training_step(
                &model,
                &projector,
                &mut p,
                std::slice::from_ref(&ex),
                &cfg,
                &mut opt,
                false,
            )
            .unwrap();
            results.push(p);
        }
        assert_eq!(results[0], results[1]);
        assert_eq!(results[1], results[2]);
        assert_ne!(results[0], params);
    }
}
