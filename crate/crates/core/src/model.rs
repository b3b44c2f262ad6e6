//! The stacked flow `z = f_T ∘ … ∘ f_1 (x)` with a standard-normal prior.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::flow::{BlockTrace, Conditioning, FlowBlock, Geometry, Guidance, Ordering};
use crate::graph::{backward, cut, Bound, GraphValue, ParamSet};
use crate::tensor::Tensor;

const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Debug)]
pub struct FlowModel {
    geom: Geometry,
    blocks: Vec<FlowBlock>,
    sigma_noise: f64,
}

/// Output of [`FlowModel::encode`].
#[derive(Clone, Debug)]
pub struct EncodeResult {
    pub z: GraphValue,
    pub logdets: Vec<GraphValue>,
    /// Graph-cut copy of every block's input; `cached_inputs[0]` is `x`.
    pub cached_inputs: Vec<GraphValue>,
    pub traces: Vec<BlockTrace>,
}

impl FlowModel {
    /// `n_blocks` blocks with alternating identity / reversed orderings.
    pub fn new(geom: Geometry, n_blocks: usize, sigma_noise: f64) -> Result<Self> {
        let orderings = (0..n_blocks)
            .map(|t| Ordering::alternating(t, geom.tokens))
            .collect();
        Self::with_orderings(geom, orderings, sigma_noise)
    }

    pub fn with_orderings(
        geom: Geometry,
        orderings: Vec<Ordering>,
        sigma_noise: f64,
    ) -> Result<Self> {
        if orderings.is_empty() {
            return Err(Error::Invalid("a flow needs at least one block".into()));
        }
        if !(sigma_noise >= 0.0) {
            return Err(Error::Invalid(format!(
                "sigma_noise must be >= 0, got {sigma_noise}"
            )));
        }
        let blocks = orderings
            .into_iter()
            .enumerate()
            .map(|(t, o)| FlowBlock::new(t, o, geom.clone()))
            .collect::<Result<_>>()?;
        Ok(Self {
            geom,
            blocks,
            sigma_noise,
        })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn blocks(&self) -> &[FlowBlock] {
        &self.blocks
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn sigma_noise(&self) -> f64 {
        self.sigma_noise
    }

    pub fn init_params(&self, rng: &mut impl Rng, zero_head: bool) -> ParamSet {
        let mut ps = ParamSet::new();
        for b in &self.blocks {
            ps.extend(b.init_params(rng, zero_head));
        }
        ps
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label > self.geom.classes {
            return Err(Error::Invalid(format!(
                "label {label} out of range [0, {}]",
                self.geom.classes
            )));
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let want = [self.geom.tokens, self.geom.channels];
        if x.shape() != want {
            return Err(Error::shape("encode", &[x.shape(), &want]));
        }
        Ok(())
    }

    pub fn encode(
        &self,
        bound: &Bound,
        x: &GraphValue,
        cond: &Conditioning,
    ) -> Result<EncodeResult> {
        self.check_input(x.value())?;
        if let Conditioning::Label(k) = cond {
            self.check_label(*k)?;
        }
        let n = self.blocks.len();
        let mut logdets = Vec::with_capacity(n);
        let mut cached_inputs = Vec::with_capacity(n);
        let mut traces = Vec::with_capacity(n);
        let mut cur = x.clone();
        for block in &self.blocks {
            cached_inputs.push(cut(&cur));
            let (z, logdet, trace) = block.forward(bound, &cur, cond)?;
            logdets.push(logdet);
            traces.push(trace);
            cur = z;
        }
        Ok(EncodeResult {
            z: cur,
            logdets,
            cached_inputs,
            traces,
        })
    }

    /// Inverts the stack (last block first) with sequential token generation.
    pub fn decode(
        &self,
        bound: &Bound,
        z: &GraphValue,
        label: usize,
        guidance: Guidance,
    ) -> Result<GraphValue> {
        self.check_label(label)?;
        let mut cur = z.clone();
        for block in self.blocks.iter().rev() {
            cur = block.inverse_guided(bound, &cur, label, guidance)?;
        }
        Ok(cur)
    }

    /// Exact `log p(x | cond)` in nats, evaluated without a graph.
    pub fn log_prob(&self, params: &ParamSet, x: &Tensor, cond: &Conditioning) -> Result<f64> {
        let bound = params.bind(false);
        let enc = self.encode(&bound, &GraphValue::constant(x.clone()), cond)?;
        Ok(log_likelihood(&enc)?.item())
    }

    /// One-step denoising `x + sigma_noise^2 * grad log p(x | label)`, using
    /// the conditional score.
    pub fn score_denoise(
        &self,
        params: &ParamSet,
        x_noisy: &Tensor,
        label: usize,
    ) -> Result<Tensor> {
        if !(self.sigma_noise > 0.0) {
            return Err(Error::Invalid(
                "score denoising needs sigma_noise > 0".into(),
            ));
        }
        let score = self.score(params, x_noisy, label)?;
        let s2 = self.sigma_noise * self.sigma_noise;
        let data = x_noisy
            .data()
            .iter()
            .zip(score.data())
            .map(|(x, g)| x + s2 * g)
            .collect();
        Tensor::new(x_noisy.shape().to_vec(), data)
    }

    /// `grad_x log p(x | label)` by reverse-mode through the encoder.
    pub fn score(&self, params: &ParamSet, x: &Tensor, label: usize) -> Result<Tensor> {
        let bound = params.bind(false);
        let leaf = GraphValue::param("x", x.clone());
        let enc = self.encode(&bound, &leaf, &Conditioning::Label(label))?;
        let ll = log_likelihood(&enc)?;
        let grad = backward(&ll)?
            .remove("x")
            .unwrap_or_else(|| Tensor::zeros(x.shape()));
        if !grad.all_finite() {
            return Err(Error::NonFinite("score".into()));
        }
        Ok(grad)
    }

    /// Draws `z ~ N(0, I)` and decodes it. `cfg_scale = 1` is plain
    /// conditional sampling.
    pub fn sample(
        &self,
        params: &ParamSet,
        label: usize,
        cfg_scale: f64,
        rng: &mut impl Rng,
        denoise: bool,
    ) -> Result<Tensor> {
        let z = standard_normal(&[self.geom.tokens, self.geom.channels], rng);
        self.sample_from(params, &z, label, cfg_scale, denoise)
    }

    pub fn sample_from(
        &self,
        params: &ParamSet,
        z: &Tensor,
        label: usize,
        cfg_scale: f64,
        denoise: bool,
    ) -> Result<Tensor> {
        let bound = params.bind(false);
        let x = self
            .decode(
                &bound,
                &GraphValue::constant(z.clone()),
                label,
                Guidance { scale: cfg_scale },
            )?
            .value()
            .clone();
        if denoise {
            self.score_denoise(params, &x, label)
        } else {
            Ok(x)
        }
    }
}

/// Total `log p(x)` in nats: `-1/2 |z|^2 - D C/2 log 2π + Σ_t logdet_t`.
pub fn log_likelihood(enc: &EncodeResult) -> Result<GraphValue> {
    let n = enc.z.value().len() as f64;
    let mut ll = enc
        .z
        .mul(&enc.z)?
        .sum()?
        .scale(-0.5)?
        .offset(-n * HALF_LOG_2PI)?;
    for ld in &enc.logdets {
        ll = ll.add(ld)?;
    }
    Ok(ll)
}

/// Mean negative log-likelihood per dimension, in nats.
pub fn nf_loss(enc: &EncodeResult) -> Result<GraphValue> {
    let n = enc.z.value().len() as f64;
    let loss = log_likelihood(enc)?.scale(-1.0 / n)?;
    if !loss.item().is_finite() {
        return Err(Error::NonFinite("nf_loss".into()));
    }
    Ok(loss)
}

/// `x + eps`, `eps ~ N(0, sigma^2 I)`.
pub fn add_noise(x: &Tensor, sigma: f64, rng: &mut impl Rng) -> Tensor {
    if sigma == 0.0 {
        return x.clone();
    }
    let mut out = x.clone();
    for v in out.data_mut() {
        *v += sigma * rng.sample::<f64, _>(StandardNormal);
    }
    out
}

pub fn standard_normal(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}
