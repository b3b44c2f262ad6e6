//! Seeded sampling from a trained model, with per-class moments.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::ParamSet;
use crate::model::FlowModel;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleSpec {
    pub count: usize,
    pub cfg_scale: f64,
    pub seed: u64,
    pub denoise: bool,
}

/// `count` samples of class `label`. Sample `i` draws its latent from
/// stream `i` of the seeded generator, so results do not depend on thread
/// count.
pub fn sample_class(
    model: &FlowModel,
    params: &ParamSet,
    label: usize,
    spec: &SampleSpec,
) -> Result<Vec<Tensor>> {
    let k = model.geometry().classes;
    if label >= k {
        return Err(Error::Invalid(format!(
            "label {label} out of range for {k} classes"
        )));
    }
    (0..spec.count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ ((label as u64) << 32));
            rng.set_stream(i as u64);
            model.sample(params, label, spec.cfg_scale, &mut rng, spec.denoise)
        })
        .collect()
}
