//! Numerical invariants evaluated against a model and parameters.

use nalgebra::DMatrix;

use crate::align::{build_objective, AlignmentConfig, Projector, ReversePass, Strategy};
use crate::error::{Error, Result};
use crate::flow::{Conditioning, FlowBlock, Guidance};
use crate::graph::{GraphValue, ParamSet};
use crate::model::FlowModel;
use crate::tensor::Tensor;

/// `log|det J|` of one block's forward map at `x`, from a central-difference
/// Jacobian and an LU factorization.
pub fn jacobian_logdet(
    block: &FlowBlock,
    params: &ParamSet,
    x: &Tensor,
    cond: &Conditioning,
    eps: f64,
) -> Result<f64> {
    let bound = params.bind(false);
    let n = x.len();
    let eval = |v: &Tensor| -> Result<Vec<f64>> {
        Ok(block
            .forward(&bound, &GraphValue::constant(v.clone()), cond)?
            .0
            .value()
            .data()
            .to_vec())
    };
    let mut jac = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut hi = x.clone();
        hi.data_mut()[j] += eps;
        let mut lo = x.clone();
        lo.data_mut()[j] -= eps;
        let (a, b) = (eval(&hi)?, eval(&lo)?);
        for i in 0..n {
            jac[(i, j)] = (a[i] - b[i]) / (2.0 * eps);
        }
    }
    let det = jac.lu().determinant();
    if det == 0.0 || !det.is_finite() {
        return Err(Error::NonFinite("Jacobian determinant".into()));
    }
    Ok(det.abs().ln())
}

/// Analytic `-Σ log sigma` of one block at `x`.
pub fn analytic_logdet(
    block: &FlowBlock,
    params: &ParamSet,
    x: &Tensor,
    cond: &Conditioning,
) -> Result<f64> {
    let bound = params.bind(false);
    Ok(block
        .forward(&bound, &GraphValue::constant(x.clone()), cond)?
        .1
        .item())
}

/// `max |f^{-1}(f(x)) - x|` with sequential inversion and no guidance.
pub fn invertibility_error(
    model: &FlowModel,
    params: &ParamSet,
    x: &Tensor,
    label: usize,
) -> Result<f64> {
    let bound = params.bind(false);
    let enc = model.encode(
        &bound,
        &GraphValue::constant(x.clone()),
        &Conditioning::Label(label),
    )?;
    let back = model.decode(
        &bound,
        &GraphValue::constant(enc.z.value().clone()),
        label,
        Guidance { scale: 1.0 },
    )?;
    Ok(back.value().max_abs_diff(x))
}

/// Largest `|z^{t-1} - cached[t-1]|` over the cached reverse pass.
pub fn cached_reconstruction_error(
    model: &FlowModel,
    projector: &Projector,
    params: &ParamSet,
    x: &Tensor,
    targets: &Tensor,
    label: usize,
) -> Result<f64> {
    let cfg = AlignmentConfig {
        strategy: Strategy::Reverse,
        sites: AlignmentConfig::default_sites(model.depth(), model.geometry().layers),
        lambda: 0.1,
    };
    let bound = params.bind(true);
    let obj = build_objective(
        model,
        projector,
        &bound,
        &GraphValue::constant(x.clone()),
        &Conditioning::Label(label),
        targets,
        &cfg,
        ReversePass::Cached,
    )?;
    Ok(obj
        .reconstruction_error
        .expect("reverse pass records reconstruction"))
}

/// Samples at `w = 1` against the purely conditional sequential inverse;
/// true when bit-identical.
pub fn guidance_neutral(
    model: &FlowModel,
    params: &ParamSet,
    z: &Tensor,
    label: usize,
) -> Result<bool> {
    let guided = model.sample_from(params, z, label, 1.0, false)?;
    let bound = params.bind(false);
    let cond = Conditioning::Label(label);
    let mut cur = GraphValue::constant(z.clone());
    for block in model.blocks().iter().rev() {
        cur = block.inverse_sequential(&bound, &cur, &cond)?.0;
    }
    Ok(guided
        .data()
        .iter()
        .zip(cur.value().data())
        .all(|(a, b)| a.to_bits() == b.to_bits()))
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::Geometry;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn jacobian_matches_analytic_logdet() {
        let geom = Geometry {
            tokens: 4,
            channels: 2,
            width: 8,
            layers: 1,
            heads: 2,
            ff_mult: 2,
            classes: 2,
        };
        let model = FlowModel::new(geom, 2, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = model.init_params(&mut rng, false);
        let x = crate::model::standard_normal(&[4, 2], &mut rng);
        for block in model.blocks() {
            let cond = Conditioning::Label(1);
            let a = analytic_logdet(block, &params, &x, &cond).unwrap();
            let j = jacobian_logdet(block, &params, &x, &cond, 1e-5).unwrap();
            assert!((a - j).abs() <= 1e-4 * a.abs().max(1e-3), "{a} vs {j}");
        }
        assert!(invertibility_error(&model, &params, &x, 0).unwrap() < 1e-10);
        let z = crate::model::standard_normal(&[4, 2], &mut rng);
        assert!(guidance_neutral(&model, &params, &z, 1).unwrap());
    }
}
