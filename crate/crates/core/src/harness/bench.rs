//! Single-thread throughput of one alignment training step (objective,
//! backward) under each gradient route.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::align::{
    build_objective, AlignmentConfig, Projector, ReversePass, Strategy, TargetEncoder,
};
use crate::error::Result;
use crate::flow::{Conditioning, Geometry};
use crate::graph::{backward, peak_nodes, reset_peak_nodes, GraphValue, ParamSet};
use crate::model::{standard_normal, FlowModel};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub geometry: Geometry,
    pub blocks: usize,
    pub feature_dim: usize,
    /// Timed repetitions per variant; the best is reported.
    pub repeats: usize,
    /// Minimum wall time of one repetition, in seconds.
    pub min_secs: f64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            geometry: Geometry {
                tokens: 64,
                channels: 1,
                width: 16,
                layers: 2,
                heads: 1,
                ff_mult: 2,
                classes: 2,
            },
            blocks: 2,
            feature_dim: 8,
            repeats: 3,
            min_secs: 0.3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchEntry {
    pub name: &'static str,
    pub steps_per_sec: f64,
    /// Largest number of simultaneously live graph nodes during one step.
    pub peak_nodes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub tokens: usize,
    pub forward: BenchEntry,
    pub detach: BenchEntry,
    pub reverse_accelerated: BenchEntry,
    pub reverse_naive: BenchEntry,
}

impl BenchReport {
    /// Forward >= Detach >= accelerated Reverse.
    pub fn ordering_holds(&self) -> bool {
        self.forward.steps_per_sec >= self.detach.steps_per_sec
            && self.detach.steps_per_sec >= self.reverse_accelerated.steps_per_sec
    }

    pub fn speedup(&self) -> f64 {
        self.reverse_accelerated.steps_per_sec / self.reverse_naive.steps_per_sec
    }

    pub fn memory_ratio(&self) -> f64 {
        self.reverse_naive.peak_nodes as f64 / self.reverse_accelerated.peak_nodes as f64
    }
}

struct Setup {
    model: FlowModel,
    projector: Projector,
    params: ParamSet,
    x: Tensor,
    targets: Tensor,
}

fn step(s: &Setup, cfg: &AlignmentConfig, pass: ReversePass) -> Result<()> {
    let bound = s.params.bind(true);
    let obj = build_objective(
        &s.model,
        &s.projector,
        &bound,
        &GraphValue::constant(s.x.clone()),
        &Conditioning::Label(0),
        &s.targets,
        cfg,
        pass,
    )?;
    backward(&obj.total)?;
    Ok(())
}

fn measure(
    name: &'static str,
    s: &Setup,
    cfg: &AlignmentConfig,
    pass: ReversePass,
    bc: &BenchConfig,
) -> Result<BenchEntry> {
    reset_peak_nodes();
    let base = peak_nodes();
    step(s, cfg, pass)?;
    let peak = peak_nodes() - base;
    let mut best: f64 = 0.0;
    for _ in 0..bc.repeats.max(1) {
        let start = Instant::now();
        let mut n = 0usize;
        while n == 0 || start.elapsed().as_secs_f64() < bc.min_secs {
            step(s, cfg, pass)?;
            n += 1;
        }
        best = best.max(n as f64 / start.elapsed().as_secs_f64());
    }
    Ok(BenchEntry {
        name,
        steps_per_sec: best,
        peak_nodes: peak,
    })
}

/// Runs on the calling thread only.
pub fn bench_reverse(bc: &BenchConfig) -> Result<BenchReport> {
    let g = bc.geometry.clone();
    let model = FlowModel::new(g.clone(), bc.blocks, 0.0)?;
    let projector = Projector {
        in_dim: g.width,
        hidden: g.width,
        out_dim: bc.feature_dim,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(bc.seed);
    let mut params = model.init_params(&mut rng, false);
    params.extend(projector.init_params(&mut rng));
    let x = standard_normal(&[g.tokens, g.channels], &mut rng);
    let targets = TargetEncoder::stub(g.channels, bc.feature_dim, bc.seed).features(&x, None)?;
    let s = Setup {
        model,
        projector,
        params,
        x,
        targets,
    };
    let cfg = |strategy| AlignmentConfig {
        strategy,
        sites: AlignmentConfig::default_sites(bc.blocks, g.layers),
        lambda: 0.1,
    };
    Ok(BenchReport {
        tokens: g.tokens,
        forward: measure(
            "forward",
            &s,
            &cfg(Strategy::Forward),
            ReversePass::Cached,
            bc,
        )?,
        detach: measure(
            "detach",
            &s,
            &cfg(Strategy::Detach),
            ReversePass::Cached,
            bc,
        )?,
        reverse_accelerated: measure(
            "reverse-accelerated",
            &s,
            &cfg(Strategy::Reverse),
            ReversePass::Cached,
            bc,
        )?,
        reverse_naive: measure(
            "reverse-naive",
            &s,
            &cfg(Strategy::Reverse),
            ReversePass::Sequential,
            bc,
        )?,
    })
}
