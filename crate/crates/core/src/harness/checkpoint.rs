//! Training checkpoints as named-array archives.
//!
//! Arrays: `params/<name>`, `ema/<name>`, `adam.m/<name>`, `adam.v/<name>`,
//! `adam.t/<name>`. Manifest metadata: `format`, `step`, `ema.updates`,
//! `ema.decay` and every config key as `config.<key>`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::archive::Archive;
use crate::harness::config::RunConfig;
use crate::harness::optim::{AdamW, Ema, Moments};
use crate::harness::train::TrainState;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: &str = "1";

pub fn to_archive(cfg: &RunConfig, state: &TrainState) -> Result<Archive> {
    let mut a = Archive::new();
    a.set_meta("format", FORMAT_VERSION)?;
    a.set_meta("step", state.step)?;
    a.set_meta("ema.updates", state.ema.updates)?;
    a.set_meta("ema.decay", format!("{:?}", state.ema.decay))?;
    for line in cfg.to_text().lines() {
        if let Some((k, v)) = line.split_once(" = ") {
            a.set_meta(&format!("config.{k}"), v)?;
        }
    }
    a.insert_params("params/", &state.params)?;
    a.insert_params("ema/", &state.ema.shadow)?;
    for (name, st) in &state.opt.state {
        a.insert(&format!("adam.m/{name}"), st.m.clone())?;
        a.insert(&format!("adam.v/{name}"), st.v.clone())?;
        a.insert(&format!("adam.t/{name}"), Tensor::scalar(st.step as f64))?;
    }
    Ok(a)
}

pub fn from_archive(a: &Archive) -> Result<(RunConfig, TrainState)> {
    if a.meta("format") != Some(FORMAT_VERSION) {
        return Err(Error::Archive(format!(
            "unsupported checkpoint format {:?}",
            a.meta("format")
        )));
    }
    let num = |k: &str| -> Result<u64> {
        a.meta(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Archive(format!("checkpoint lacks {k}")))
    };
    let mut text = String::new();
    for (k, v) in a.metas() {
        if let Some(key) = k.strip_prefix("config.") {
            text.push_str(&format!("{key} = {v}\n"));
        }
    }
    let cfg = RunConfig::parse(&text)?;
    let decay: f64 = a
        .meta("ema.decay")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Archive("checkpoint lacks ema.decay".into()))?;
    let mut opt = AdamW::new(cfg.optim);
    for (name, m) in a.params("adam.m/").iter() {
        let v = a.require(&format!("adam.v/{name}"))?.clone();
        let t = a.require(&format!("adam.t/{name}"))?.item() as u64;
        opt.state.insert(
            name.clone(),
            Moments {
                step: t,
                m: m.clone(),
                v,
            },
        );
    }
    let state = TrainState {
        step: num("step")? as usize,
        params: a.params("params/"),
        ema: Ema {
            decay,
            updates: num("ema.updates")?,
            shadow: a.params("ema/"),
        },
        opt,
    };
    if state.params.is_empty() {
        return Err(Error::Archive("checkpoint holds no parameters".into()));
    }
    Ok((cfg, state))
}

/// Writes to a sibling temporary directory first, then swaps it in.
pub fn save(dir: &Path, cfg: &RunConfig, state: &TrainState) -> Result<()> {
    let archive = to_archive(cfg, state)?;
    let tmp = dir.with_extension("tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    archive.save(&tmp)?;
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::rename(&tmp, dir)?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<(RunConfig, TrainState)> {
    from_archive(&Archive::load(dir)?)
}
