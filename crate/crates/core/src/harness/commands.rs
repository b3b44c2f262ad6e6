//! Command implementations behind the CLI verbs.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::flow::Conditioning;
use crate::graph::ParamSet;
use crate::harness::archive::Archive;
use crate::harness::checkpoint;
use crate::harness::checks::{
    analytic_logdet, cached_reconstruction_error, guidance_neutral, invertibility_error,
    jacobian_logdet, CheckResult,
};
use crate::harness::config::RunConfig;
use crate::harness::data::{self, Dataset, Split};
use crate::harness::evaluate::{classify_eval, ClassifyReport};
use crate::harness::metrics::{write_record, MetricRecord};
use crate::harness::sample::{sample_class, SampleSpec};
use crate::harness::stats::{frechet_proxy, mean_cov, Frechet};
use crate::harness::train::{train, Experiment, TrainState};
use crate::model::standard_normal;
use crate::tensor::Tensor;

/// Trains from scratch, or from `resume`, until `train.steps`; metrics go to
/// `metrics` and the final checkpoint to `out`.
pub fn run_train(
    cfg: RunConfig,
    out: &Path,
    resume: Option<&Path>,
    metrics: &mut dyn Write,
) -> Result<TrainState> {
    let until = cfg.steps;
    let (exp, mut state) = match resume {
        Some(dir) => {
            let (saved, state) = checkpoint::load(dir)?;
            let cfg = RunConfig {
                steps: until,
                ..saved
            };
            (Experiment::new(cfg)?, state)
        }
        None => {
            let exp = Experiment::new(cfg)?;
            let state = TrainState::new(&exp);
            (exp, state)
        }
    };
    let mut sink = |r: &MetricRecord| {
        write_record(metrics, r)?;
        metrics.flush()?;
        Ok(())
    };
    train(&exp, &mut state, until, &mut sink, Some(out))?;
    Ok(state)
}

/// Loads a checkpoint and rebuilds its experiment; `overrides` adjust
/// sampling and evaluation keys.
pub fn open_checkpoint(dir: &Path, overrides: &[String]) -> Result<(Experiment, TrainState)> {
    let (mut cfg, state) = checkpoint::load(dir)?;
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok((Experiment::new(cfg)?, state))
}

#[derive(Clone, Debug, Serialize)]
pub struct ClassMoments {
    pub label: usize,
    pub mean: Vec<f64>,
    pub data_mean: Vec<f64>,
    /// `|m - m_data| / |m_data|`.
    pub mean_rel_err: f64,
    /// Frobenius `|S - S_data| / |S_data|`.
    pub cov_rel_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SampleReport {
    pub per_class: Vec<ClassMoments>,
    pub frechet: f64,
    pub frechet_ridge: bool,
}

fn flat(xs: &[&Tensor]) -> Vec<Vec<f64>> {
    xs.iter().map(|x| x.data().to_vec()).collect()
}

/// Stub-encoder features of each example, flattened.
pub fn feature_rows(exp: &Experiment, xs: &[&Tensor]) -> Result<Vec<Vec<f64>>> {
    xs.iter()
        .map(|x| Ok(exp.encoder.features(x, None)?.into_data()))
        .collect()
}

/// Fréchet proxy between model samples and a reference set, in target
/// feature space.
pub fn frechet_vs(exp: &Experiment, samples: &[&Tensor], reference: &[&Tensor]) -> Result<Frechet> {
    frechet_proxy(&feature_rows(exp, samples)?, &feature_rows(exp, reference)?)
}

/// Samples `spec.count` examples for each class in `labels` with `params`,
/// writes them to an archive and compares moments against the test split.
pub fn run_sample(
    exp: &Experiment,
    params: &ParamSet,
    labels: &[usize],
    spec: &SampleSpec,
) -> Result<(Archive, SampleReport)> {
    let g = exp.model.geometry();
    let reference = data::load(&exp.cfg, Split::Test)?;
    let mut archive = Archive::new();
    archive.set_meta("count", spec.count)?;
    archive.set_meta("cfg_scale", format!("{:?}", spec.cfg_scale))?;
    archive.set_meta("seed", spec.seed)?;
    archive.set_meta("denoise", spec.denoise)?;
    let mut per_class = Vec::new();
    let mut all = Vec::new();
    let mut all_ref = Vec::new();
    for &k in labels {
        let xs = sample_class(&exp.model, params, k, spec)?;
        let data: Vec<f64> = xs.iter().flat_map(|x| x.data().to_vec()).collect();
        archive.insert(
            &format!("samples/{k}"),
            Tensor::new(vec![xs.len(), g.tokens, g.channels], data)?,
        )?;
        let refs = reference.class_examples(k);
        if xs.len() >= 2 && refs.len() >= 2 {
            let (m, c) = mean_cov(&flat(&xs.iter().collect::<Vec<_>>()))?;
            let (md, cd) = mean_cov(&flat(&refs))?;
            archive.insert(&format!("mean/{k}"), Tensor::vector(m.as_slice().to_vec()))?;
            archive.insert(
                &format!("cov/{k}"),
                Tensor::new(
                    vec![c.nrows(), c.ncols()],
                    c.transpose().as_slice().to_vec(),
                )?,
            )?;
            per_class.push(ClassMoments {
                label: k,
                mean: m.as_slice().to_vec(),
                data_mean: md.as_slice().to_vec(),
                mean_rel_err: (&m - &md).norm() / md.norm().max(f64::MIN_POSITIVE),
                cov_rel_err: (&c - &cd).norm() / cd.norm().max(f64::MIN_POSITIVE),
            });
        }
        all.extend(xs);
        all_ref.extend(refs);
    }
    let f = frechet_vs(exp, &all.iter().collect::<Vec<_>>(), &all_ref)?;
    Ok((
        archive,
        SampleReport {
            per_class,
            frechet: f.distance,
            frechet_ridge: f.ridge_applied,
        },
    ))
}

/// Single-step, brute-force and multi-step classification on the test split.
pub fn run_classify(
    exp: &Experiment,
    params: &ParamSet,
    limit: usize,
    multistep: &[(usize, f64)],
) -> Result<ClassifyReport> {
    let test: Dataset = data::load(&exp.cfg, Split::Test)?;
    classify_eval(&exp.model, params, &test, limit, multistep)
}

/// Invariant suite against a checkpoint directory.
pub fn roundtrip_check(dir: &Path) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let archive = Archive::load(dir)?;
    let (cfg, state) = checkpoint::from_archive(&archive)?;

    let again = checkpoint::to_archive(&cfg, &state)?;
    let tmp = tempdir_near(dir)?;
    again.save(&tmp)?;
    let reloaded = Archive::load(&tmp)?;
    std::fs::remove_dir_all(&tmp)?;
    let same_arrays = archive.arrays().count() == reloaded.arrays().count()
        && archive.arrays().all(|(n, t)| {
            reloaded.array(n).is_some_and(|u| {
                u.shape() == t.shape()
                    && u.data()
                        .iter()
                        .zip(t.data())
                        .all(|(a, b)| a.to_bits() == b.to_bits())
            })
        });
    out.push(CheckResult::new(
        "checkpoint-roundtrip",
        same_arrays,
        "every array bit-exact after save/load",
    ));

    let exp = Experiment::new(cfg)?;
    let model = &exp.model;
    let mut rng = ChaCha8Rng::seed_from_u64(0xc0ffee);
    let probes: Vec<(Tensor, usize, Tensor)> = (0..4)
        .map(|i| {
            (
                exp.data.examples[i % exp.data.len()].clone(),
                exp.data.labels[i % exp.data.len()],
                exp.targets[i % exp.data.len()].clone(),
            )
        })
        .collect();

    for (name, params) in [("raw", &state.params), ("ema", &state.ema.shadow)] {
        let mut worst: f64 = 0.0;
        for (x, label, _) in &probes {
            worst = worst.max(invertibility_error(model, params, x, *label)?);
        }
        out.push(CheckResult::new(
            format!("invertibility-{name}"),
            worst < 1e-8,
            format!("max error {worst:.3e}"),
        ));
    }

    let mut worst_ld: f64 = 0.0;
    for (x, label, _) in &probes {
        let cond = Conditioning::Label(*label);
        let enc = model.encode(
            &state.params.bind(false),
            &crate::graph::GraphValue::constant(x.clone()),
            &cond,
        )?;
        for (t, block) in model.blocks().iter().enumerate() {
            let input = enc.cached_inputs[t].value();
            let a = analytic_logdet(block, &state.params, input, &cond)?;
            let j = jacobian_logdet(block, &state.params, input, &cond, 1e-5)?;
            worst_ld = worst_ld.max((a - j).abs() / a.abs().max(1e-3));
        }
    }
    out.push(CheckResult::new(
        "logdet-vs-jacobian",
        worst_ld < 1e-4,
        format!("max relative error {worst_ld:.3e}"),
    ));

    let mut worst_rec: f64 = 0.0;
    for (x, label, targets) in &probes {
        worst_rec = worst_rec.max(cached_reconstruction_error(
            model,
            &exp.projector,
            &state.params,
            x,
            targets,
            *label,
        )?);
    }
    out.push(CheckResult::new(
        "cached-reconstruction",
        worst_rec <= 1e-10,
        format!("max error {worst_rec:.3e}"),
    ));

    let g = model.geometry();
    let z = standard_normal(&[g.tokens, g.channels], &mut rng);
    let neutral = guidance_neutral(model, &state.ema.shadow, &z, 0)?;
    out.push(CheckResult::new(
        "guidance-neutrality",
        neutral,
        "w = 1 equals conditional sampling bit-for-bit",
    ));

    let (_, state2) = checkpoint::from_archive(&reloaded)?;
    let mut same_eval = true;
    for (x, label, _) in &probes {
        let cond = Conditioning::Label(*label);
        let a = model.log_prob(&state.params, x, &cond)?;
        let b = model.log_prob(&state2.params, x, &cond)?;
        same_eval &= a.to_bits() == b.to_bits();
    }
    out.push(CheckResult::new(
        "reload-evaluates-identically",
        same_eval,
        "log p on probe batch bit-exact",
    ));
    Ok(out)
}

fn tempdir_near(dir: &Path) -> Result<std::path::PathBuf> {
    let base = dir.with_extension("check");
    if base.exists() {
        std::fs::remove_dir_all(&base)?;
    }
    Ok(base)
}
