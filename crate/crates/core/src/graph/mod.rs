//! Reverse-mode differentiation over a per-computation graph of dense `f64`
//! tensors, with explicit graph cuts.
//!
//! Values are reference-counted nodes. An op records its inputs as parents
//! only when at least one input requires a gradient, so frozen evaluation
//! builds no graph. Node ids increase monotonically and every node's parents
//! are older than the node itself, so descending id order is a valid reverse
//! topological order for [`backward`].

mod ops;
mod params;

pub use ops::OpKind;
pub use params::{finite_diff_grad, Bound, ParamSet};

use std::cell::Cell;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gradient map keyed by leaf name.
pub type Gradients = BTreeMap<String, Tensor>;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

/// Nodes currently alive on this thread.
pub fn live_nodes() -> usize {
    LIVE.with(Cell::get)
}

/// High-water mark of [`live_nodes`] since the last [`reset_peak_nodes`].
pub fn peak_nodes() -> usize {
    PEAK.with(Cell::get)
}

pub fn reset_peak_nodes() {
    PEAK.with(|p| p.set(live_nodes()));
}

struct OpRecord {
    kind: OpKind,
    inputs: Vec<GraphValue>,
}

struct Node {
    id: u64,
    value: Tensor,
    requires_grad: bool,
    name: Option<String>,
    op: Option<OpRecord>,
}

impl Node {
    fn alloc(
        value: Tensor,
        requires_grad: bool,
        name: Option<String>,
        op: Option<OpRecord>,
    ) -> Rc<Node> {
        LIVE.with(|l| {
            let n = l.get() + 1;
            l.set(n);
            PEAK.with(|p| p.set(p.get().max(n)));
        });
        Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad,
            name,
            op,
        })
    }
}

impl Drop for Node {
    // Iterative teardown: deep chains (sequential inversion) would otherwise
    // recurse once per node.
    fn drop(&mut self) {
        LIVE.with(|l| l.set(l.get() - 1));
        let Some(op) = self.op.take() else { return };
        let mut stack = op.inputs;
        while let Some(v) = stack.pop() {
            if let Ok(mut node) = Rc::try_unwrap(v.0) {
                if let Some(op) = node.op.take() {
                    stack.extend(op.inputs);
                }
            }
        }
    }
}

/// A node in the differentiation graph.
#[derive(Clone)]
pub struct GraphValue(Rc<Node>);

impl std::fmt::Debug for GraphValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GraphValue")
            .field("id", &self.0.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .field("name", &self.0.name)
            .field("op", &self.0.op.as_ref().map(|o| o.kind.name()))
            .finish()
    }
}

impl GraphValue {
    pub fn leaf(value: Tensor, requires_grad: bool, name: Option<&str>) -> Self {
        Self(Node::alloc(
            value,
            requires_grad,
            name.map(str::to_owned),
            None,
        ))
    }

    /// A named leaf that receives a gradient entry in [`backward`].
    pub fn param(name: &str, value: Tensor) -> Self {
        Self::leaf(value, true, Some(name))
    }

    pub fn constant(value: Tensor) -> Self {
        Self::leaf(value, false, None)
    }

    pub fn scalar(v: f64) -> Self {
        Self::constant(Tensor::scalar(v))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.0.value.data()
    }

    pub fn item(&self) -> f64 {
        self.0.value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn name(&self) -> Option<&str> {
        self.0.name.as_deref()
    }

    pub fn has_parents(&self) -> bool {
        self.0.op.is_some()
    }

    /// Parent nodes (empty for leaves).
    pub fn parents(&self) -> Vec<GraphValue> {
        self.0
            .op
            .as_ref()
            .map(|o| o.inputs.clone())
            .unwrap_or_default()
    }

    pub fn op_kind(&self) -> Option<&OpKind> {
        self.0.op.as_ref().map(|o| &o.kind)
    }

    /// Ids of every node reachable from `self` through parent edges, `self` included.
    pub fn ancestor_ids(&self) -> HashSet<u64> {
        let mut seen = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(v) = stack.pop() {
            if seen.insert(v.id()) {
                stack.extend(v.parents());
            }
        }
        seen
    }

    pub fn add(&self, o: &GraphValue) -> Result<GraphValue> {
        record(OpKind::Add, &[self.clone(), o.clone()])
    }

    pub fn sub(&self, o: &GraphValue) -> Result<GraphValue> {
        record(OpKind::Sub, &[self.clone(), o.clone()])
    }

    pub fn mul(&self, o: &GraphValue) -> Result<GraphValue> {
        record(OpKind::Mul, &[self.clone(), o.clone()])
    }

    pub fn div(&self, o: &GraphValue) -> Result<GraphValue> {
        record(OpKind::Div, &[self.clone(), o.clone()])
    }

    pub fn scale(&self, c: f64) -> Result<GraphValue> {
        record(OpKind::Scale(c), std::slice::from_ref(self))
    }

    pub fn offset(&self, c: f64) -> Result<GraphValue> {
        record(OpKind::Offset(c), std::slice::from_ref(self))
    }

    pub fn exp(&self) -> Result<GraphValue> {
        record(OpKind::Exp, std::slice::from_ref(self))
    }

    pub fn log(&self) -> Result<GraphValue> {
        record(OpKind::Log, std::slice::from_ref(self))
    }

    pub fn tanh(&self) -> Result<GraphValue> {
        record(OpKind::Tanh, std::slice::from_ref(self))
    }

    pub fn silu(&self) -> Result<GraphValue> {
        record(OpKind::Silu, std::slice::from_ref(self))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Result<GraphValue> {
        record(OpKind::Clamp { lo, hi }, std::slice::from_ref(self))
    }

    pub fn matmul(&self, o: &GraphValue) -> Result<GraphValue> {
        record(OpKind::MatMul, &[self.clone(), o.clone()])
    }

    pub fn t(&self) -> Result<GraphValue> {
        record(OpKind::Transpose, std::slice::from_ref(self))
    }

    pub fn softmax(&self) -> Result<GraphValue> {
        record(OpKind::Softmax, std::slice::from_ref(self))
    }

    pub fn causal_mask(&self) -> Result<GraphValue> {
        record(OpKind::CausalMask, std::slice::from_ref(self))
    }

    pub fn sum(&self) -> Result<GraphValue> {
        record(OpKind::Sum, std::slice::from_ref(self))
    }

    pub fn mean(&self) -> Result<GraphValue> {
        record(OpKind::Mean, std::slice::from_ref(self))
    }

    pub fn rows(&self, start: usize, end: usize) -> Result<GraphValue> {
        record(OpKind::SliceRows { start, end }, std::slice::from_ref(self))
    }

    pub fn permute_rows(&self, perm: &[usize]) -> Result<GraphValue> {
        record(
            OpKind::PermuteRows(perm.to_vec()),
            std::slice::from_ref(self),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<GraphValue> {
        record(OpKind::Reshape(shape.to_vec()), std::slice::from_ref(self))
    }

    pub fn cosine_rows(&self, o: &GraphValue) -> Result<GraphValue> {
        record(OpKind::CosineRows, &[self.clone(), o.clone()])
    }

    pub fn concat(parts: &[GraphValue]) -> Result<GraphValue> {
        record(OpKind::Concat, parts)
    }

    /// `x @ w + b`, with `b` broadcast over rows.
    pub fn affine(&self, w: &GraphValue, b: &GraphValue) -> Result<GraphValue> {
        self.matmul(w)?.add(b)
    }
}

/// Applies `kind` to `inputs`, recording parent edges when any input
/// requires a gradient.
pub fn record(kind: OpKind, inputs: &[GraphValue]) -> Result<GraphValue> {
    let values: Vec<&Tensor> = inputs.iter().map(|v| v.value()).collect();
    let out = ops::forward(&kind, &values)?;
    let requires_grad = inputs.iter().any(GraphValue::requires_grad);
    let op = requires_grad.then(|| OpRecord {
        kind,
        inputs: inputs.to_vec(),
    });
    Ok(GraphValue(Node::alloc(out, requires_grad, None, op)))
}

/// Graph cut: same numbers, no parents, no gradient.
pub fn cut(v: &GraphValue) -> GraphValue {
    GraphValue::constant(v.value().clone())
}

/// Reverse-mode pass from a scalar loss.
///
/// Only named leaves that are reachable from `loss` through uncut edges and
/// require a gradient get an entry. A missing entry means "not reachable",
/// which is distinct from a zero gradient.
pub fn backward(loss: &GraphValue) -> Result<Gradients> {
    if !loss.shape().is_empty() {
        return Err(Error::NonScalarLoss(loss.shape().to_vec()));
    }
    let mut out = Gradients::new();
    if !loss.requires_grad() {
        return Ok(out);
    }

    let mut nodes = Vec::new();
    let mut seen = HashSet::new();
    let mut stack = vec![loss.clone()];
    while let Some(v) = stack.pop() {
        if !v.requires_grad() || !seen.insert(v.id()) {
            continue;
        }
        stack.extend(v.parents());
        nodes.push(v);
    }
    nodes.sort_unstable_by_key(|v| std::cmp::Reverse(v.id()));

    let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
    grads.insert(loss.id(), vec![1.0]);
    for node in &nodes {
        let Some(g) = grads.remove(&node.id()) else {
            continue;
        };
        match &node.0.op {
            None => {
                if let Some(name) = node.name() {
                    let shape = node.shape().to_vec();
                    match out.get_mut(name) {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(&g) {
                                *a += b;
                            }
                        }
                        None => {
                            out.insert(name.to_owned(), Tensor::new(shape, g)?);
                        }
                    }
                }
            }
            Some(op) => {
                let values: Vec<&Tensor> = op.inputs.iter().map(|v| v.value()).collect();
                let needs: Vec<bool> = op.inputs.iter().map(GraphValue::requires_grad).collect();
                let input_grads = ops::backward(&op.kind, &values, node.value(), &g, &needs);
                for (input, ig) in op.inputs.iter().zip(input_grads) {
                    let Some(ig) = ig else { continue };
                    match grads.get_mut(&input.id()) {
                        Some(acc) => {
                            for (a, b) in acc.iter_mut().zip(&ig) {
                                *a += b;
                            }
                        }
                        None => {
                            grads.insert(input.id(), ig);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(data: &[f64]) -> Tensor {
        Tensor::vector(data.to_vec())
    }

    #[test]
    fn add_records_parents() {
        let a = GraphValue::param("a", v(&[2.0]));
        let b = GraphValue::constant(v(&[3.0]));
        let c = a.add(&b).unwrap();
        assert_eq!(c.data(), &[5.0]);
        assert_eq!(c.parents().len(), 2);
    }

    #[test]
    fn frozen_inputs_record_nothing() {
        let a = GraphValue::constant(v(&[2.0]));
        let c = a.add(&a).unwrap();
        assert!(!c.has_parents());
    }

    #[test]
    fn matmul_identity() {
        let i3 = GraphValue::constant(Tensor::eye(3));
        let x = GraphValue::constant(v(&[1.5, -2.0, 0.25]));
        assert_eq!(i3.matmul(&x).unwrap().data(), &[1.5, -2.0, 0.25]);
    }

    #[test]
    fn softmax_uniform() {
        let x = GraphValue::constant(v(&[0.0, 0.0, 0.0]));
        for p in x.softmax().unwrap().data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_errors_name_the_op() {
        let a = GraphValue::constant(Tensor::zeros(&[2, 3]));
        let b = GraphValue::constant(Tensor::zeros(&[2, 3]));
        match a.matmul(&b) {
            Err(Error::Shape { op, shapes }) => {
                assert_eq!(op, "matmul");
                assert_eq!(shapes, vec![vec![2, 3], vec![2, 3]]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
        let c = GraphValue::constant(Tensor::zeros(&[4]));
        assert!(matches!(a.add(&c), Err(Error::Shape { op: "add", .. })));
    }

    #[test]
    fn square_gradient() {
        let x = GraphValue::param("x", Tensor::scalar(3.0));
        let loss = x.mul(&x).unwrap();
        let g = backward(&loss).unwrap();
        assert_eq!(g["x"].item(), 6.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let x = GraphValue::param("x", v(&[1.0, 2.0]));
        assert!(matches!(backward(&x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn cut_blocks_gradient() {
        let y = GraphValue::param("y", v(&[1.0, 2.0]));
        let w = GraphValue::param("w", v(&[0.5, -1.0]));
        let loss = cut(&y).mul(&w).unwrap().sum().unwrap();
        let g = backward(&loss).unwrap();
        assert!(g.contains_key("w"));
        assert!(!g.contains_key("y"));
        assert_eq!(g["w"].data(), &[1.0, 2.0]);
    }

    #[test]
    fn cut_is_idempotent_and_parentless() {
        let y = GraphValue::param("y", v(&[1.0, 2.0]));
        let z = y.scale(2.0).unwrap();
        let c = cut(&z);
        assert!(!c.has_parents() && !c.requires_grad());
        assert_eq!(c.data(), &[2.0, 4.0]);
        assert_eq!(cut(&c).value(), c.value());
    }

    #[test]
    fn two_paths_accumulate() {
        let x = GraphValue::param("x", Tensor::scalar(1.5));
        let a = x.scale(3.0).unwrap();
        let b = x.exp().unwrap();
        let loss = a.add(&b).unwrap();
        let g = backward(&loss).unwrap();
        assert!((g["x"].item() - (3.0 + 1.5f64.exp())).abs() < 1e-12);
    }

    #[test]
    fn cosine_of_self_has_zero_gradient() {
        let a = GraphValue::param("a", Tensor::matrix(1, 3, vec![0.3, -1.2, 2.0]).unwrap());
        let loss = a.cosine_rows(&a).unwrap().sum().unwrap();
        assert!((loss.item() - 1.0).abs() < 1e-12);
        let g = backward(&loss).unwrap();
        assert!(g["a"].data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn causal_mask_blocks_future() {
        let s = GraphValue::param("s", Tensor::zeros(&[3, 3]));
        let p = s.causal_mask().unwrap().softmax().unwrap();
        assert_eq!(p.value().row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(p.value().row(1), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn live_node_counter_tracks_drops() {
        let before = live_nodes();
        {
            let x = GraphValue::param("x", Tensor::scalar(1.0));
            let mut y = x.clone();
            for _ in 0..10_000 {
                y = y.offset(1.0).unwrap();
            }
            assert!(live_nodes() >= before + 10_001);
            assert!(peak_nodes() >= before + 10_001);
        }
        assert_eq!(live_nodes(), before);
    }
}
