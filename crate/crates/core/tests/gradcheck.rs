//! Reverse-mode gradients of every operation and of the full training
//! objective against central finite differences.

mod common;

use common::{gradcheck, op_gradient_errors, small_objective, small_setup, total_loss_error};
use flowback::align::Strategy;
use flowback::flow::Conditioning;
use flowback::graph::OpKind;
use flowback::{GraphValue, ParamSet};

const TOL: f64 = 1e-4;

#[test]
fn every_op_matches_finite_differences() {
    for (name, err) in op_gradient_errors() {
        assert!(err < TOL, "{name}: relative gradient error {err:.3e}");
    }
}

#[test]
fn every_op_kind_is_covered() {
    let checked: Vec<&str> = op_gradient_errors().into_iter().map(|(n, _)| n).collect();
    let all = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::Scale(1.0),
        OpKind::Offset(1.0),
        OpKind::Exp,
        OpKind::Log,
        OpKind::Tanh,
        OpKind::Silu,
        OpKind::Clamp { lo: 0.0, hi: 1.0 },
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Softmax,
        OpKind::CausalMask,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Concat,
        OpKind::SliceRows { start: 0, end: 1 },
        OpKind::PermuteRows(vec![]),
        OpKind::Reshape(vec![]),
        OpKind::CosineRows,
    ];
    // The match is exhaustive: a new variant fails to compile until it is
    // named here and given a check.
    for k in &all {
        let name = match k {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Scale(_) => "scale",
            OpKind::Offset(_) => "offset",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Tanh => "tanh",
            OpKind::Silu => "silu",
            OpKind::Clamp { .. } => "clamp",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Softmax => "softmax",
            OpKind::CausalMask => "causal-mask",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Concat => "concat",
            OpKind::SliceRows { .. } => "slice-rows",
            OpKind::PermuteRows(_) => "permute-rows",
            OpKind::Reshape(_) => "reshape",
            OpKind::CosineRows => "cosine-rows",
        };
        assert!(checked.contains(&name), "{name} has no gradient check");
    }
}

#[test]
fn total_loss_matches_finite_differences() {
    for seed in [20, 21, 22] {
        let err = total_loss_error(seed);
        assert!(err < TOL, "seed {seed}: relative gradient error {err:.3e}");
    }
}

#[test]
fn cut_strategies_give_finite_gradients() {
    for strategy in [Strategy::Detach, Strategy::Reverse] {
        let (model, projector, p, x, targets) = small_setup(30);
        let obj =
            small_objective(&model, &projector, &p.bind(true), &x, &targets, strategy).unwrap();
        let grads = flowback::backward(&obj.total).unwrap();
        assert!(!grads.is_empty());
        assert!(grads.values().all(|g| g.all_finite()), "{strategy}");
    }
}

#[test]
fn nf_loss_gradient_matches_finite_differences() {
    let (model, _, p, x, _) = small_setup(40);
    let mut flow_only = ParamSet::new();
    for (n, t) in p.iter().filter(|(n, _)| n.starts_with("block.")) {
        flow_only.insert(n.clone(), t.clone());
    }
    let e = gradcheck(&flow_only, |b| {
        let enc = model.encode(b, &GraphValue::constant(x.clone()), &Conditioning::Label(0))?;
        flowback::model::nf_loss(&enc)
    });
    assert!(e < TOL, "nf_loss: relative gradient error {e:.3e}");
}
