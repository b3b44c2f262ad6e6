//! Training loop: noisy batches, alignment targets, optimizer and EMA.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::align::{repa_training_step, Projector, TargetEncoder, TrainExample};
use crate::error::{Error, Result};
use crate::graph::ParamSet;
use crate::harness::archive::Archive;
use crate::harness::checkpoint;
use crate::harness::config::{EncoderKind, RunConfig};
use crate::harness::data::{self, Dataset, Split};
use crate::harness::metrics::MetricRecord;
use crate::harness::optim::{AdamW, Ema};
use crate::model::{add_noise, FlowModel};
use crate::tensor::Tensor;

/// Everything fixed by the configuration: model shape, projector, frozen
/// encoder, training data and its alignment targets.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub cfg: RunConfig,
    pub model: FlowModel,
    pub projector: Projector,
    pub encoder: TargetEncoder,
    pub data: Dataset,
    pub targets: Vec<Tensor>,
}

impl Experiment {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let data = data::load(&cfg, Split::Train)?;
        if data.classes != cfg.data_classes {
            return Err(Error::Config(format!(
                "dataset has {} classes, config says {}",
                data.classes, cfg.data_classes
            )));
        }
        let geom = cfg.geometry(data.tokens, data.channels);
        let model = FlowModel::new(geom, cfg.blocks, cfg.sigma_noise)?;
        let encoder = match cfg.encoder {
            EncoderKind::Stub => {
                TargetEncoder::stub(data.channels, cfg.feature_dim, cfg.data_seed ^ 0x5eed)
            }
            EncoderKind::File => {
                let path = cfg.features_path.as_deref().expect("validated");
                TargetEncoder::from_archive(&Archive::load(path)?)?
            }
        };
        let projector = Projector {
            in_dim: cfg.width,
            hidden: cfg.proj_hidden,
            out_dim: encoder.dim(),
        };
        let targets = data
            .examples
            .iter()
            .zip(&data.ids)
            .map(|(x, id)| encoder.features(x, Some(id)))
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg,
            model,
            projector,
            encoder,
            data,
            targets,
        })
    }

    /// Flow and projector parameters drawn from the run seed.
    pub fn init_params(&self) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        let mut params = self.model.init_params(&mut rng, self.cfg.zero_head);
        params.extend(self.projector.init_params(&mut rng));
        params
    }

    /// The batch used by optimizer step `step` (zero-based). Depends only on
    /// the seed and the step index, so resumed runs see the same batches.
    pub fn batch(&self, step: usize) -> Vec<TrainExample> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(step as u64 + 1);
        let k = self.cfg.data_classes;
        (0..self.cfg.batch)
            .map(|_| {
                let i = rng.gen_range(0..self.data.len());
                let x = add_noise(&self.data.examples[i], self.cfg.sigma_noise, &mut rng);
                let label = if rng.gen::<f64>() < self.cfg.null_label_prob {
                    k
                } else {
                    self.data.labels[i]
                };
                TrainExample {
                    x,
                    label,
                    targets: self.targets[i].clone(),
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Optimizer steps completed.
    pub step: usize,
    pub params: ParamSet,
    pub ema: Ema,
    pub opt: AdamW,
}

impl TrainState {
    pub fn new(exp: &Experiment) -> Self {
        let params = exp.init_params();
        Self {
            step: 0,
            ema: Ema::new(exp.cfg.ema_decay, &params),
            opt: AdamW::new(exp.cfg.optim),
            params,
        }
    }
}

/// Runs one optimizer step and the EMA update.
pub fn train_step(
    exp: &Experiment,
    state: &mut TrainState,
    started: Instant,
) -> Result<MetricRecord> {
    let batch = exp.batch(state.step);
    let align = exp.cfg.alignment();
    let parallel = exp.cfg.threads > 1;
    let mut params = state.params.clone();
    let mut opt = state.opt.clone();
    let report = repa_training_step(
        &exp.model,
        &exp.projector,
        &mut params,
        &batch,
        &align,
        &mut opt,
        parallel,
    )?;
    if !report.total.is_finite() || params.iter().any(|(_, t)| !t.all_finite()) {
        return Err(Error::NonFinite(format!(
            "training diverged at step {}",
            state.step + 1
        )));
    }
    state.params = params;
    state.opt = opt;
    state.ema.update(&state.params);
    state.step += 1;
    Ok(MetricRecord {
        step: state.step,
        nf_loss: report.nf_loss,
        align_loss: report.align_loss.is_finite().then_some(report.align_loss),
        total: report.total,
        wallclock: started.elapsed().as_secs_f64(),
    })
}

/// Trains until `state.step == until`. Writes a checkpoint every
/// `train.checkpoint_every` steps and at the end; on failure the last
/// written checkpoint is left in place.
pub fn train(
    exp: &Experiment,
    state: &mut TrainState,
    until: usize,
    sink: &mut dyn FnMut(&MetricRecord) -> Result<()>,
    checkpoint_dir: Option<&Path>,
) -> Result<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(exp.cfg.threads)
        .build()
        .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
    let started = Instant::now();
    while state.step < until {
        let rec = pool.install(|| train_step(exp, state, started))?;
        sink(&rec)?;
        let every = exp.cfg.checkpoint_every;
        if let Some(dir) = checkpoint_dir {
            if every > 0 && state.step.is_multiple_of(every) && state.step < until {
                checkpoint::save(dir, &exp.cfg, state)?;
            }
        }
    }
    if let Some(dir) = checkpoint_dir {
        checkpoint::save(dir, &exp.cfg, state)?;
    }
    Ok(())
}
