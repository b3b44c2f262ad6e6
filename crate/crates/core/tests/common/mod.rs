#![allow(dead_code)]

use flowback::align::{
    build_objective, AlignSite, AlignmentConfig, Objective, Projector, ReversePass, Strategy,
    TargetEncoder,
};
use flowback::flow::{Conditioning, Geometry};
use flowback::graph::{finite_diff_grad, Bound, Gradients};
use flowback::model::FlowModel;
use flowback::{backward, GraphValue, ParamSet, Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    flowback::model::standard_normal(shape, &mut rng(seed))
}

/// `||a - b|| / max(||b||, floor)` over one tensor.
pub fn rel_err(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    let num: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let den: f64 = b.data().iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(floor)
}

/// Worst relative error between analytic and reference gradient maps. A
/// parameter the analytic pass never reached must have a zero reference.
pub fn worst_rel_err(analytic: &Gradients, reference: &Gradients, floor: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (name, r) in reference {
        match analytic.get(name) {
            Some(a) => worst = worst.max(rel_err(a, r, floor)),
            None => assert!(
                r.data().iter().all(|v| v.abs() < 1e-9),
                "{name} has a numeric gradient but was not reached"
            ),
        }
    }
    worst
}

/// Reverse-mode vs central differences for a scalar function of `params`.
pub fn gradcheck<F>(params: &ParamSet, f: F) -> f64
where
    F: Fn(&Bound) -> Result<GraphValue>,
{
    let bound = params.bind(true);
    let analytic = backward(&f(&bound).unwrap()).unwrap();
    let numeric = finite_diff_grad(|p| Ok(f(&p.bind(false))?.item()), params, 1e-6).unwrap();
    worst_rel_err(&analytic, &numeric, 1e-8)
}

/// `sum(out * w)` for a fixed random `w`, so every output entry matters.
pub fn weighted(out: GraphValue, seed: u64) -> Result<GraphValue> {
    let w = GraphValue::constant(randn(out.shape(), seed));
    out.mul(&w)?.sum()
}

pub fn params(entries: &[(&str, Tensor)]) -> ParamSet {
    let mut p = ParamSet::new();
    for (n, t) in entries {
        p.insert(*n, t.clone());
    }
    p
}

fn positive(shape: &[usize], seed: u64) -> Tensor {
    randn(shape, seed).map(|v| 0.5 + v.abs())
}

/// Worst relative gradient error of each registered operation on random
/// inputs, including broadcasting, both clamp regimes, the causal mask and
/// every structural op.
pub fn op_gradient_errors() -> Vec<(&'static str, f64)> {
    type Bin = fn(&GraphValue, &GraphValue) -> Result<GraphValue>;
    let mut out = Vec::new();

    let p = params(&[
        ("a", randn(&[3, 4], 1)),
        ("b", positive(&[4], 2)),
        ("c", positive(&[3, 4], 3)),
    ]);
    let binary: [(&str, Bin); 4] = [
        ("add", GraphValue::add),
        ("sub", GraphValue::sub),
        ("mul", GraphValue::mul),
        ("div", GraphValue::div),
    ];
    for (name, op) in binary {
        let e = [
            gradcheck(&p, |b| weighted(op(b.get("a")?, b.get("b")?)?, 10)),
            gradcheck(&p, |b| weighted(op(b.get("a")?, b.get("c")?)?, 11)),
            gradcheck(&p, |b| weighted(op(b.get("b")?, b.get("a")?)?, 12)),
        ];
        out.push((name, e.into_iter().fold(0.0, f64::max)));
    }

    let p = params(&[("x", randn(&[2, 5], 4)), ("y", positive(&[2, 5], 5))]);
    out.push((
        "scale",
        gradcheck(&p, |b| weighted(b.get("x")?.scale(-1.7)?, 1)),
    ));
    out.push((
        "offset",
        gradcheck(&p, |b| {
            weighted(b.get("x")?.offset(0.3)?.mul(b.get("x")?)?, 2)
        }),
    ));
    out.push(("exp", gradcheck(&p, |b| weighted(b.get("x")?.exp()?, 3))));
    out.push(("log", gradcheck(&p, |b| weighted(b.get("y")?.log()?, 4))));
    out.push(("tanh", gradcheck(&p, |b| weighted(b.get("x")?.tanh()?, 5))));
    out.push(("silu", gradcheck(&p, |b| weighted(b.get("x")?.silu()?, 6))));

    let x = Tensor::matrix(2, 3, vec![-3.0, -0.4, 0.2, 0.9, 2.5, -1.1]).unwrap();
    let p = params(&[("x", x)]);
    out.push((
        "clamp",
        gradcheck(&p, |b| weighted(b.get("x")?.clamp(-1.0, 1.0)?, 7)),
    ));

    let p = params(&[
        ("a", randn(&[3, 4], 8)),
        ("b", randn(&[4, 2], 9)),
        ("v", randn(&[4], 10)),
    ]);
    let mm = gradcheck(&p, |b| weighted(b.get("a")?.matmul(b.get("b")?)?, 1));
    let mv = gradcheck(&p, |b| weighted(b.get("a")?.matmul(b.get("v")?)?, 2));
    out.push(("matmul", mm.max(mv)));
    out.push((
        "transpose",
        gradcheck(&p, |b| weighted(b.get("a")?.t()?, 3)),
    ));

    let p = params(&[("x", randn(&[4, 4], 11)), ("v", randn(&[5], 12))]);
    let sm = gradcheck(&p, |b| weighted(b.get("x")?.softmax()?, 1));
    let sv = gradcheck(&p, |b| weighted(b.get("v")?.softmax()?, 2));
    out.push(("softmax", sm.max(sv)));
    out.push((
        "causal-mask",
        gradcheck(&p, |b| weighted(b.get("x")?.causal_mask()?.softmax()?, 3)),
    ));

    let p = params(&[("x", randn(&[3, 2], 13))]);
    out.push((
        "sum",
        gradcheck(&p, |b| b.get("x")?.mul(b.get("x")?)?.sum()),
    ));
    out.push(("mean", gradcheck(&p, |b| b.get("x")?.exp()?.mean())));

    let p = params(&[("a", randn(&[2, 3], 14)), ("b", randn(&[3, 3], 15))]);
    out.push((
        "concat",
        gradcheck(&p, |b| {
            weighted(
                GraphValue::concat(&[b.get("a")?.clone(), b.get("b")?.clone()])?,
                1,
            )
        }),
    ));
    out.push((
        "slice-rows",
        gradcheck(&p, |b| weighted(b.get("b")?.rows(1, 3)?, 2)),
    ));
    out.push((
        "permute-rows",
        gradcheck(&p, |b| weighted(b.get("b")?.permute_rows(&[2, 0, 1])?, 3)),
    ));
    out.push((
        "reshape",
        gradcheck(&p, |b| weighted(b.get("a")?.reshape(&[3, 2])?, 4)),
    ));

    let p = params(&[("a", randn(&[4, 3], 16)), ("b", randn(&[4, 3], 17))]);
    out.push((
        "cosine-rows",
        gradcheck(&p, |b| weighted(b.get("a")?.cosine_rows(b.get("b")?)?, 1)),
    ));
    out
}

/// Three tokens, two channels, two blocks, a projector and stub targets.
pub fn small_setup(seed: u64) -> (FlowModel, Projector, ParamSet, Tensor, Tensor) {
    let geom = Geometry {
        tokens: 3,
        channels: 2,
        width: 4,
        layers: 2,
        heads: 2,
        ff_mult: 1,
        classes: 2,
    };
    let model = FlowModel::new(geom, 2, 0.0).unwrap();
    let projector = Projector {
        in_dim: 4,
        hidden: 3,
        out_dim: 3,
    };
    let mut r = rng(seed);
    let mut p = model.init_params(&mut r, false);
    p.extend(projector.init_params(&mut r));
    let x = randn(&[3, 2], seed + 100);
    let targets = TargetEncoder::stub(2, 3, seed).features(&x, None).unwrap();
    (model, projector, p, x, targets)
}

/// Objective of `small_setup(seed)` with two alignment sites.
pub fn small_objective(
    model: &FlowModel,
    projector: &Projector,
    bound: &Bound,
    x: &Tensor,
    targets: &Tensor,
    strategy: Strategy,
) -> Result<Objective> {
    let cfg = AlignmentConfig {
        strategy,
        sites: vec![
            AlignSite { block: 0, layer: 1 },
            AlignSite { block: 1, layer: 0 },
        ],
        lambda: 0.5,
    };
    build_objective(
        model,
        projector,
        bound,
        &GraphValue::constant(x.clone()),
        &Conditioning::Label(1),
        targets,
        &cfg,
        ReversePass::Cached,
    )
}

/// Relative error of the Forward-strategy `L_total` gradient.
pub fn total_loss_error(seed: u64) -> f64 {
    let (model, projector, p, x, targets) = small_setup(seed);
    gradcheck(&p, |b| {
        Ok(small_objective(&model, &projector, b, &x, &targets, Strategy::Forward)?.total)
    })
}
