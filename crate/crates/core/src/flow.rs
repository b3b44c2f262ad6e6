//! One autoregressive affine block.
//!
//! The parameter network is a causal transformer over the sequence
//! `[start, x_0, .., x_{D-2}]` (in ordering space), with the class embedding
//! added to every position. Position `d` emits `(mu_d, log sigma_d)`, so
//! token `d` sees the class, the learned start token and `x_{<d}` only.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graph::{cut, Bound, GraphValue, ParamSet};
use crate::tensor::Tensor;

/// `log sigma` is clamped to this range before exponentiation.
pub const LOG_SIGMA_CLAMP: f64 = 7.0;

/// Shape of a flow and of each block's parameter network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Geometry {
    /// Tokens per sample (D).
    pub tokens: usize,
    /// Channels per token (C).
    pub channels: usize,
    /// Transformer width inside the parameter network.
    pub width: usize,
    /// Causal attention layers per block (L).
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    /// Number of real classes (K); embedding row K is the null class.
    pub classes: usize,
}

impl Geometry {
    pub fn validate(&self) -> Result<()> {
        if self.tokens == 0 || self.channels == 0 || self.width == 0 || self.classes == 0 {
            return Err(Error::Invalid(format!("degenerate geometry {self:?}")));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Invalid(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }

    pub fn dims(&self) -> usize {
        self.tokens * self.channels
    }
}

/// Token permutation: ordering position `d` holds data token `perm[d]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ordering {
    perm: Vec<usize>,
    inv: Vec<usize>,
}

impl Ordering {
    pub fn new(perm: Vec<usize>) -> Result<Self> {
        let mut inv = vec![usize::MAX; perm.len()];
        for (d, &p) in perm.iter().enumerate() {
            if p >= perm.len() || inv[p] != usize::MAX {
                return Err(Error::Invalid(format!("not a permutation: {perm:?}")));
            }
            inv[p] = d;
        }
        Ok(Self { perm, inv })
    }

    pub fn identity(n: usize) -> Self {
        Self::new((0..n).collect()).unwrap()
    }

    pub fn reversed(n: usize) -> Self {
        Self::new((0..n).rev().collect()).unwrap()
    }

    /// Identity for even blocks, full reversal for odd ones.
    pub fn alternating(block: usize, n: usize) -> Self {
        if block.is_multiple_of(2) {
            Self::identity(n)
        } else {
            Self::reversed(n)
        }
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn inverse(&self) -> &[usize] {
        &self.inv
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }
}

/// How a block sees the class.
#[derive(Clone, Debug)]
pub enum Conditioning {
    /// Hard label; `K` selects the null embedding.
    Label(usize),
    /// Class probabilities `[K]`; the block uses `p^T E[..K]` as its token.
    Soft(GraphValue),
}

/// Per-block parameter-network outputs, all in ordering space.
#[derive(Clone, Debug)]
pub struct BlockTrace {
    /// Hidden state after each layer, `[D, width]`.
    pub hidden: Vec<GraphValue>,
    pub mu: GraphValue,
    pub log_sigma: GraphValue,
    pub sigma: GraphValue,
}

/// Classifier-free guidance scale applied to `(mu, log sigma)` during inversion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Guidance {
    pub scale: f64,
}

/// Combines conditional and null-class parameters:
/// `mu = mu_u + w (mu_c - mu_u)`, `log sigma = s_u + w (s_c - s_u)`.
/// `w = 1` returns the conditional parameters untouched.
pub fn guide(
    cond: (&GraphValue, &GraphValue),
    uncond: (&GraphValue, &GraphValue),
    w: f64,
) -> Result<(GraphValue, GraphValue)> {
    if w == 1.0 {
        return Ok((cond.0.clone(), cond.1.clone()));
    }
    let mu = uncond.0.add(&cond.0.sub(uncond.0)?.scale(w)?)?;
    let s = uncond
        .1
        .add(&cond.1.sub(uncond.1)?.scale(w)?)?
        .clamp(-LOG_SIGMA_CLAMP, LOG_SIGMA_CLAMP)?;
    Ok((mu, s))
}

#[derive(Clone, Debug)]
pub struct FlowBlock {
    index: usize,
    ordering: Ordering,
    geom: Geometry,
}

impl FlowBlock {
    pub fn new(index: usize, ordering: Ordering, geom: Geometry) -> Result<Self> {
        geom.validate()?;
        if ordering.len() != geom.tokens {
            return Err(Error::Invalid(format!(
                "ordering over {} tokens for a {}-token block",
                ordering.len(),
                geom.tokens
            )));
        }
        Ok(Self {
            index,
            ordering,
            geom,
        })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn ordering(&self) -> &Ordering {
        &self.ordering
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    /// Parameter-path prefix, e.g. `block.3`.
    pub fn prefix(&self) -> String {
        format!("block.{}", self.index)
    }

    fn p<'a>(&self, bound: &'a Bound, name: &str) -> Result<&'a GraphValue> {
        bound.get(&format!("block.{}.{name}", self.index))
    }

    /// Draws initial parameters. With `zero_head` the block starts as the
    /// identity map (`mu = 0`, `sigma = 1`).
    pub fn init_params(&self, rng: &mut impl Rng, zero_head: bool) -> ParamSet {
        let g = &self.geom;
        let (w, c, d) = (g.width, g.channels, g.tokens);
        let dh = w / g.heads;
        let ff = w * g.ff_mult;
        let depth = (2 * g.layers.max(1)) as f64;
        let mut normal = |shape: &[usize], std: f64| {
            let n = shape.iter().product();
            let data = (0..n)
                .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            Tensor::new(shape.to_vec(), data).unwrap()
        };
        let mut ps = ParamSet::new();
        let pre = self.prefix();
        ps.insert(
            format!("{pre}.class_embed"),
            normal(&[g.classes + 1, w], 1.0),
        );
        ps.insert(format!("{pre}.start"), normal(&[1, w], 1.0));
        ps.insert(format!("{pre}.pos"), normal(&[d, w], 0.1));
        ps.insert(
            format!("{pre}.in.w"),
            normal(&[c, w], 1.0 / (c as f64).sqrt()),
        );
        ps.insert(format!("{pre}.in.b"), Tensor::zeros(&[w]));
        let inv_w = 1.0 / (w as f64).sqrt();
        for l in 0..g.layers {
            for h in 0..g.heads {
                let lp = format!("{pre}.layer.{l}.attn.{h}");
                ps.insert(format!("{lp}.q"), normal(&[w, dh], inv_w));
                ps.insert(format!("{lp}.k"), normal(&[w, dh], inv_w));
                ps.insert(format!("{lp}.v"), normal(&[w, dh], inv_w));
                ps.insert(
                    format!("{lp}.o"),
                    normal(&[dh, w], 1.0 / (dh as f64 * depth).sqrt()),
                );
            }
            let fp = format!("{pre}.layer.{l}.ff");
            ps.insert(format!("{fp}.w1"), normal(&[w, ff], inv_w));
            ps.insert(format!("{fp}.b1"), Tensor::zeros(&[ff]));
            ps.insert(
                format!("{fp}.w2"),
                normal(&[ff, w], 1.0 / (ff as f64 * depth).sqrt()),
            );
            ps.insert(format!("{fp}.b2"), Tensor::zeros(&[w]));
        }
        for head in ["mu", "s"] {
            let (wt, bt) = if zero_head {
                (Tensor::zeros(&[w, c]), Tensor::zeros(&[c]))
            } else {
                (normal(&[w, c], 0.1 * inv_w), normal(&[c], 0.1))
            };
            ps.insert(format!("{pre}.head.{head}.w"), wt);
            ps.insert(format!("{pre}.head.{head}.b"), bt);
        }
        ps
    }

    fn cond_token(&self, bound: &Bound, cond: &Conditioning) -> Result<GraphValue> {
        let table = self.p(bound, "class_embed")?;
        let k = self.geom.classes;
        match cond {
            Conditioning::Label(label) if *label <= k => table.rows(*label, label + 1),
            Conditioning::Label(label) => Err(Error::Invalid(format!(
                "label {label} out of range for {k} classes"
            ))),
            Conditioning::Soft(probs) => {
                if probs.shape() != [k] {
                    return Err(Error::shape("soft_embedding", &[probs.shape(), &[k]]));
                }
                soft_embedding(probs, &table.rows(0, k)?)
            }
        }
    }

    /// Causal parameter network on `ctx` (ordering space, `[D, C]`).
    pub fn param_net(
        &self,
        bound: &Bound,
        ctx: &GraphValue,
        cond: &Conditioning,
    ) -> Result<BlockTrace> {
        let g = &self.geom;
        let (d, c) = (g.tokens, g.channels);
        if ctx.shape() != [d, c] {
            return Err(Error::shape("param_net", &[ctx.shape(), &[d, c]]));
        }
        let mut parts = vec![self.p(bound, "start")?.clone()];
        if d > 1 {
            parts.push(
                ctx.rows(0, d - 1)?
                    .affine(self.p(bound, "in.w")?, self.p(bound, "in.b")?)?,
            );
        }
        let class = self.cond_token(bound, cond)?.reshape(&[g.width])?;
        let mut u = GraphValue::concat(&parts)?
            .add(self.p(bound, "pos")?)?
            .add(&class)?;

        let dh = g.width / g.heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut hidden = Vec::with_capacity(g.layers);
        for l in 0..g.layers {
            let mut attn: Option<GraphValue> = None;
            for h in 0..g.heads {
                let ap = format!("layer.{l}.attn.{h}");
                let q = u.matmul(self.p(bound, &format!("{ap}.q"))?)?;
                let k = u.matmul(self.p(bound, &format!("{ap}.k"))?)?;
                let v = u.matmul(self.p(bound, &format!("{ap}.v"))?)?;
                let weights = q
                    .matmul(&k.t()?)?
                    .scale(inv_sqrt)?
                    .causal_mask()?
                    .softmax()?;
                let head = weights
                    .matmul(&v)?
                    .matmul(self.p(bound, &format!("{ap}.o"))?)?;
                attn = Some(match attn {
                    Some(a) => a.add(&head)?,
                    None => head,
                });
            }
            u = u.add(&attn.expect("at least one head"))?;
            let fp = format!("layer.{l}.ff");
            let f = u
                .affine(
                    self.p(bound, &format!("{fp}.w1"))?,
                    self.p(bound, &format!("{fp}.b1"))?,
                )?
                .silu()?
                .affine(
                    self.p(bound, &format!("{fp}.w2"))?,
                    self.p(bound, &format!("{fp}.b2"))?,
                )?;
            u = u.add(&f)?;
            hidden.push(u.clone());
        }
        let mu = u.affine(self.p(bound, "head.mu.w")?, self.p(bound, "head.mu.b")?)?;
        let log_sigma = u
            .affine(self.p(bound, "head.s.w")?, self.p(bound, "head.s.b")?)?
            .clamp(-LOG_SIGMA_CLAMP, LOG_SIGMA_CLAMP)?;
        let sigma = log_sigma.exp()?;
        Ok(BlockTrace {
            hidden,
            mu,
            log_sigma,
            sigma,
        })
    }

    /// Encodes `x` (`[D, C]`, data order). Returns `z` in data order, the
    /// log-determinant `-sum log sigma`, and the parameter-network trace.
    pub fn forward(
        &self,
        bound: &Bound,
        x: &GraphValue,
        cond: &Conditioning,
    ) -> Result<(GraphValue, GraphValue, BlockTrace)> {
        if !x.value().all_finite() {
            return Err(Error::NonFinite(format!("input of block {}", self.index)));
        }
        let xp = x.permute_rows(self.ordering.perm())?;
        let trace = self.param_net(bound, &xp, cond)?;
        if !trace.sigma.value().all_finite() {
            return Err(Error::NonFinite(format!("sigma of block {}", self.index)));
        }
        let zp = xp.sub(&trace.mu)?.div(&trace.sigma)?;
        let z = zp.permute_rows(self.ordering.inverse())?;
        let logdet = trace.log_sigma.sum()?.scale(-1.0)?;
        Ok((z, logdet, trace))
    }

    /// Exact inverse, one token at a time in ordering order. Each step runs
    /// the full parameter network on the tokens generated so far.
    /// `step_params` maps the current context to `(mu, log sigma)`.
    fn invert_tokens<F>(&self, z: &GraphValue, mut step_params: F) -> Result<GraphValue>
    where
        F: FnMut(&GraphValue) -> Result<(GraphValue, GraphValue)>,
    {
        let (d, c) = (self.geom.tokens, self.geom.channels);
        if z.shape() != [d, c] {
            return Err(Error::shape("inverse", &[z.shape(), &[d, c]]));
        }
        let zp = z.permute_rows(self.ordering.perm())?;
        let mut ctx = GraphValue::constant(Tensor::zeros(&[d, c]));
        for i in 0..d {
            let (mu, log_sigma) = step_params(&ctx)?;
            let sigma = log_sigma.rows(i, i + 1)?.exp()?;
            let xi = mu.rows(i, i + 1)?.add(&sigma.mul(&zp.rows(i, i + 1)?)?)?;
            ctx = GraphValue::concat(&[ctx.rows(0, i)?, xi, ctx.rows(i + 1, d)?])?;
        }
        ctx.permute_rows(self.ordering.inverse())
    }

    /// Sequential inverse. The returned trace is the parameter network
    /// evaluated on the fully generated context (the last step's trace).
    pub fn inverse_sequential(
        &self,
        bound: &Bound,
        z: &GraphValue,
        cond: &Conditioning,
    ) -> Result<(GraphValue, BlockTrace)> {
        let mut last = None;
        let x = self.invert_tokens(z, |ctx| {
            let trace = self.param_net(bound, ctx, cond)?;
            let out = (trace.mu.clone(), trace.log_sigma.clone());
            last = Some(trace);
            Ok(out)
        })?;
        Ok((x, last.expect("at least one token")))
    }

    /// Sequential inverse with classifier-free guidance against the null class.
    pub fn inverse_guided(
        &self,
        bound: &Bound,
        z: &GraphValue,
        label: usize,
        guidance: Guidance,
    ) -> Result<GraphValue> {
        let cond = Conditioning::Label(label);
        let null = Conditioning::Label(self.geom.classes);
        self.invert_tokens(z, |ctx| {
            let c = self.param_net(bound, ctx, &cond)?;
            if guidance.scale == 1.0 {
                return Ok((c.mu, c.log_sigma));
            }
            let u = self.param_net(bound, ctx, &null)?;
            guide((&c.mu, &c.log_sigma), (&u.mu, &u.log_sigma), guidance.scale)
        })
    }

    /// Parallel pseudo-inverse that takes its autoregressive context from a
    /// graph-cut copy of this block's forward input.
    ///
    /// The first pass evaluates `mu, sigma` on the cache and forms
    /// `y = mu + sigma * z`. The second pass runs on `cache + (y - cut(y))`,
    /// which equals the cache bit-for-bit but carries `y`'s dependence on `z`
    /// and on this block's parameters; the returned trace comes from it. The
    /// output is `cache + (x2 - cut(x2))` with `x2 = mu2 + sigma2 * z`, so its
    /// value is the cache exactly.
    pub fn inverse_cached(
        &self,
        bound: &Bound,
        z: &GraphValue,
        cache: &GraphValue,
        cond: &Conditioning,
    ) -> Result<(GraphValue, BlockTrace)> {
        if cache.has_parents() || cache.requires_grad() {
            return Err(Error::LiveCache);
        }
        let (d, c) = (self.geom.tokens, self.geom.channels);
        if z.shape() != [d, c] || cache.shape() != [d, c] {
            return Err(Error::shape("inverse_cached", &[z.shape(), cache.shape()]));
        }
        let zp = z.permute_rows(self.ordering.perm())?;
        let cp = cache.permute_rows(self.ordering.perm())?;
        let first = self.param_net(bound, &cp, cond)?;
        let y = first.mu.add(&first.sigma.mul(&zp)?)?;
        let ctx = cp.add(&straight_through(&y)?)?;
        let trace = self.param_net(bound, &ctx, cond)?;
        let x2 = trace.mu.add(&trace.sigma.mul(&zp)?)?;
        let xp = cp.add(&straight_through(&x2)?)?;
        Ok((xp.permute_rows(self.ordering.inverse())?, trace))
    }
}

/// `v - cut(v)`: exactly zero, with `v`'s gradient.
fn straight_through(v: &GraphValue) -> Result<GraphValue> {
    v.sub(&cut(v))
}

/// `p^T E`: convex combination of embedding rows, `[1, width]`.
pub fn soft_embedding(probs: &GraphValue, table: &GraphValue) -> Result<GraphValue> {
    let k = probs.shape().iter().product::<usize>();
    probs.reshape(&[1, k])?.matmul(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::backward;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn geom(d: usize, c: usize, layers: usize) -> Geometry {
        Geometry {
            tokens: d,
            channels: c,
            width: 8,
            layers,
            heads: 1,
            ff_mult: 2,
            classes: 3,
        }
    }

    fn random_block(seed: u64, d: usize, c: usize, ordering: Ordering) -> (FlowBlock, ParamSet) {
        let block = FlowBlock::new(0, ordering, geom(d, c, 2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = block.init_params(&mut rng, false);
        (block, params)
    }

    fn random_input(seed: u64, d: usize, c: usize) -> GraphValue {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..d * c)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        GraphValue::constant(Tensor::new(vec![d, c], data).unwrap())
    }

    #[test]
    fn ordering_round_trips() {
        let o = Ordering::new(vec![2, 0, 3, 1]).unwrap();
        for d in 0..4 {
            assert_eq!(o.inverse()[o.perm()[d]], d);
        }
        assert!(Ordering::new(vec![0, 0, 1]).is_err());
        assert!(Ordering::new(vec![0, 3]).is_err());
    }

    #[test]
    fn zero_head_block_is_identity() {
        for ordering in [Ordering::identity(4), Ordering::reversed(4)] {
            let block = FlowBlock::new(0, ordering, geom(4, 2, 2)).unwrap();
            let params = block.init_params(&mut ChaCha8Rng::seed_from_u64(1), true);
            let bound = params.bind(false);
            let x = random_input(2, 4, 2);
            let (z, logdet, trace) = block.forward(&bound, &x, &Conditioning::Label(0)).unwrap();
            assert!(trace.mu.data().iter().all(|&m| m == 0.0));
            assert!(trace.sigma.data().iter().all(|&s| s == 1.0));
            assert_eq!(z.value(), x.value());
            assert_eq!(logdet.item(), 0.0);
            let (back, _) = block
                .inverse_sequential(&bound, &z, &Conditioning::Label(0))
                .unwrap();
            assert_eq!(back.value(), x.value());
        }
    }

    #[test]
    fn single_token_direct_substitution() {
        let block = FlowBlock::new(0, Ordering::identity(1), geom(1, 1, 0)).unwrap();
        let mut params = block.init_params(&mut ChaCha8Rng::seed_from_u64(0), true);
        params.insert("block.0.head.mu.b", Tensor::vector(vec![1.0]));
        params.insert("block.0.head.s.b", Tensor::vector(vec![2f64.ln()]));
        let bound = params.bind(false);
        let x = GraphValue::constant(Tensor::matrix(1, 1, vec![2.0]).unwrap());
        let (z, logdet, _) = block.forward(&bound, &x, &Conditioning::Label(0)).unwrap();
        assert!((z.item() - 0.5).abs() < 1e-15);
        assert!((logdet.item() + 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn sequential_inverse_inverts_forward() {
        for seed in 0..5 {
            let (block, params) = random_block(seed, 5, 3, Ordering::alternating(seed as usize, 5));
            let bound = params.bind(false);
            let x = random_input(100 + seed, 5, 3);
            let cond = Conditioning::Label(1);
            let (z, _, _) = block.forward(&bound, &x, &cond).unwrap();
            let (back, _) = block.inverse_sequential(&bound, &z, &cond).unwrap();
            assert!(back.value().max_abs_diff(x.value()) < 1e-10);
        }
    }

    #[test]
    fn parameters_respect_causality() {
        let (block, params) = random_block(3, 5, 2, Ordering::identity(5));
        let bound = params.bind(false);
        let x = random_input(4, 5, 2);
        let cond = Conditioning::Label(0);
        let base = block.param_net(&bound, &x, &cond).unwrap();
        for t in 0..5 {
            let mut data = x.value().clone();
            data.data_mut()[t * 2] += 0.7;
            let bumped = block
                .param_net(&bound, &GraphValue::constant(data), &cond)
                .unwrap();
            for pos in 0..5 {
                let same = base.mu.value().row(pos) == bumped.mu.value().row(pos)
                    && base.sigma.value().row(pos) == bumped.sigma.value().row(pos);
                assert_eq!(same, pos <= t, "token {t} leaked into position {pos}");
            }
        }
    }

    #[test]
    fn conditioning_reaches_every_position() {
        let (block, params) = random_block(5, 4, 2, Ordering::identity(4));
        let bound = params.bind(false);
        let x = random_input(6, 4, 2);
        let a = block
            .param_net(&bound, &x, &Conditioning::Label(0))
            .unwrap();
        let b = block
            .param_net(&bound, &x, &Conditioning::Label(1))
            .unwrap();
        for pos in 0..4 {
            assert_ne!(a.mu.value().row(pos), b.mu.value().row(pos));
        }
    }

    #[test]
    fn cached_inverse_returns_cache_exactly() {
        let (block, params) = random_block(7, 6, 2, Ordering::reversed(6));
        let bound = params.bind(true);
        let x = random_input(8, 6, 2);
        let cond = Conditioning::Label(2);
        let (z, _, fwd) = block.forward(&bound, &x, &cond).unwrap();
        let cache = cut(&x);
        let (out, trace) = block
            .inverse_cached(&bound, &cut(&z), &cache, &cond)
            .unwrap();
        assert_eq!(out.value(), cache.value());
        assert_eq!(trace.mu.value(), fwd.mu.value());
        for (a, b) in trace.hidden.iter().zip(&fwd.hidden) {
            assert_eq!(a.value(), b.value());
        }
    }

    #[test]
    fn cached_inverse_rejects_live_cache() {
        let (block, params) = random_block(9, 3, 1, Ordering::identity(3));
        let bound = params.bind(true);
        let x = GraphValue::param("x", random_input(10, 3, 1).value().clone());
        let live = x.scale(1.0).unwrap();
        let err = block
            .inverse_cached(&bound, &cut(&live), &live, &Conditioning::Label(0))
            .unwrap_err();
        assert!(matches!(err, Error::LiveCache));
    }

    #[test]
    fn cached_inverse_severs_cache_producers() {
        let (block, params) = random_block(11, 3, 2, Ordering::identity(3));
        let bound = params.bind(true);
        let upstream = GraphValue::param("upstream", Tensor::scalar(1.3));
        let x = random_input(12, 3, 2).mul(&upstream).unwrap();
        let cond = Conditioning::Label(0);
        let (z, _, _) = block.forward(&bound, &x, &cond).unwrap();
        let (out, trace) = block
            .inverse_cached(&bound, &cut(&z), &cut(&x), &cond)
            .unwrap();
        let loss = out
            .sum()
            .unwrap()
            .add(&trace.hidden[1].mean().unwrap())
            .unwrap();
        let grads = backward(&loss).unwrap();
        assert!(!grads.contains_key("upstream"));
        assert!(grads.contains_key("block.0.head.mu.w"));
        assert!(grads.contains_key("block.0.layer.0.attn.0.q"));
    }

    #[test]
    fn two_token_cached_gradients_match_sequential() {
        let (block, params) = random_block(13, 2, 2, Ordering::identity(2));
        let cond = Conditioning::Label(1);
        let x = random_input(14, 2, 2);
        let z = block.forward(&params.bind(false), &x, &cond).unwrap().0;
        let weights =
            GraphValue::constant(Tensor::matrix(2, 2, vec![0.3, -1.1, 0.8, 0.45]).unwrap());

        let bound = params.bind(true);
        let (seq, _) = block.inverse_sequential(&bound, &cut(&z), &cond).unwrap();
        let g_seq = backward(&seq.mul(&weights).unwrap().sum().unwrap()).unwrap();

        let bound = params.bind(true);
        let (par, _) = block
            .inverse_cached(&bound, &cut(&z), &cut(&x), &cond)
            .unwrap();
        let g_par = backward(&par.mul(&weights).unwrap().sum().unwrap()).unwrap();

        assert_eq!(
            g_seq.keys().collect::<Vec<_>>(),
            g_par.keys().collect::<Vec<_>>()
        );
        for (name, a) in &g_seq {
            let b = &g_par[name];
            for (u, v) in a.data().iter().zip(b.data()) {
                let rel = (u - v).abs() / u.abs().max(v.abs()).max(1e-8);
                assert!(rel < 1e-6 || (u - v).abs() < 1e-12, "{name}: {u} vs {v}");
            }
        }
    }

    #[test]
    fn soft_embedding_mixes_rows() {
        let table = GraphValue::constant(
            Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 5.0]).unwrap(),
        );
        let p = GraphValue::constant(Tensor::vector(vec![0.5, 0.5]));
        let e = soft_embedding(&p, &table).unwrap();
        assert_eq!(e.data(), &[0.0, 1.0, 4.0]);
    }

    #[test]
    fn guidance_scale_one_is_conditional() {
        let c = (GraphValue::scalar(0.3), GraphValue::scalar(-0.2));
        let u = (GraphValue::scalar(1.7), GraphValue::scalar(0.9));
        let (mu, s) = guide((&c.0, &c.1), (&u.0, &u.1), 1.0).unwrap();
        assert_eq!((mu.item(), s.item()), (0.3, -0.2));
        let (mu, s) = guide((&c.0, &c.1), (&u.0, &u.1), 2.0).unwrap();
        assert!((mu.item() - (1.7 + 2.0 * (0.3 - 1.7))).abs() < 1e-15);
        assert!((s.item() - (0.9 + 2.0 * (-0.2 - 0.9))).abs() < 1e-15);
    }
}
