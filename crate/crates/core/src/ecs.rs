//! Expert caption selection head.
//!
//! Each expert owns a router that scores every video-side expression row.
//! Only the `top_r` highest-scoring rows keep a (softmax) weight; the rest
//! are zeroed. The expert maps the weighted rows through a small tanh MLP and
//! the outputs of the gated experts are added back onto the expressions:
//!
//! ```text
//! fused = e + sum_{m in active} gate_m * expert_m(route_m(e) * e)
//! pooled = normalize(shared_projection(mean_rows(fused)))
//! ```
//!
//! Expert output layers start at zero, so a fresh head is the identity on
//! the expression rows.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EmbeddingVector, ExpressionSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EcsConfig {
    #[serde(default = "default_experts")]
    pub num_experts: usize,
    #[serde(default = "default_active")]
    pub active_experts: usize,
    #[serde(default = "default_top_r")]
    pub top_r: usize,
    pub dim: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_experts() -> usize {
    16
}
fn default_active() -> usize {
    2
}
fn default_top_r() -> usize {
    4
}

impl EcsConfig {
    pub fn new(dim: usize) -> Self {
        Self {
            num_experts: default_experts(),
            active_experts: default_active(),
            top_r: default_top_r(),
            dim,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_experts == 0 {
            return Err(Error::invalid("num_experts must be at least 1"));
        }
        if self.active_experts == 0 || self.active_experts > self.num_experts {
            return Err(Error::invalid(format!(
                "active_experts must be in 1..={}, got {}",
                self.num_experts, self.active_experts
            )));
        }
        if self.top_r == 0 {
            return Err(Error::invalid("top_r must be at least 1"));
        }
        if self.dim == 0 {
            return Err(Error::invalid("dim must be positive"));
        }
        Ok(())
    }
}

/// Dense affine map `x -> W x + b` with `W` stored as out x in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            weight: Array2::zeros((out_dim, in_dim)),
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            weight: Array2::eye(dim),
            bias: Array1::zeros(dim),
        }
    }

    pub fn random(out_dim: usize, in_dim: usize, std: f64, rng: &mut impl Rng) -> Self {
        let n = Normal::new(0.0, std).expect("finite std");
        Self {
            weight: Array2::from_shape_fn((out_dim, in_dim), |_| n.sample(rng)),
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn apply(&self, x: ArrayView1<'_, f64>) -> Array1<f64> {
        self.weight.dot(&x) + &self.bias
    }

    /// Applies the map to every row of `x`.
    pub fn apply_rows(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.weight.nrows(), self.weight.ncols())
    }
}

/// Two-layer per-token map `y = W2 tanh(W1 x)`, no biases, so an all-zero row
/// maps to zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expert {
    pub hidden: Array2<f64>,
    pub output: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcsParams {
    pub experts: Vec<Expert>,
    /// Row m holds the per-expression scoring vector of expert m's router.
    pub routers: Linear,
    /// Maps mean-pooled expressions to one logit per expert.
    pub gate: Linear,
    pub shared_projection: Linear,
}

impl EcsParams {
    /// Random hidden layers and routers, zero expert outputs, identity
    /// projection.
    pub fn init(cfg: &EcsConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.dim;
        let std = 1.0 / (d as f64).sqrt();
        let experts = (0..cfg.num_experts)
            .map(|_| Expert {
                hidden: Linear::random(d, d, std, &mut rng).weight,
                output: Array2::zeros((d, d)),
            })
            .collect();
        Ok(Self {
            experts,
            routers: Linear::random(cfg.num_experts, d, 0.1 * std, &mut rng),
            gate: Linear::random(cfg.num_experts, d, 0.1 * std, &mut rng),
            shared_projection: Linear::identity(d),
        })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn dim(&self) -> usize {
        self.shared_projection.weight.ncols()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            experts: self
                .experts
                .iter()
                .map(|e| Expert {
                    hidden: Array2::zeros(e.hidden.raw_dim()),
                    output: Array2::zeros(e.output.raw_dim()),
                })
                .collect(),
            routers: self.routers.zeros_like(),
            gate: self.gate.zeros_like(),
            shared_projection: self.shared_projection.zeros_like(),
        }
    }
}

/// Indices ordered by descending score, ties broken by lower index.
fn ranked(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Keeps the `r` largest entries and softmax-normalizes them.
#[derive(Debug, Clone, PartialEq)]
pub struct TopSelection {
    /// Selected indices in rank order.
    pub indices: Vec<usize>,
    /// Dense weights, zero outside `indices`.
    pub weights: Vec<f64>,
    /// Gap between the last kept and the first dropped score (infinite when
    /// nothing is dropped).
    pub margin: f64,
}

pub fn top_softmax(scores: &[f64], r: usize) -> Result<TopSelection> {
    if r == 0 || r > scores.len() {
        return Err(Error::invalid(format!(
            "top-{r} selection out of range for {} entries",
            scores.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("routing logits".into()));
    }
    let order = ranked(scores);
    let indices: Vec<usize> = order[..r].to_vec();
    let margin = if r < scores.len() {
        scores[order[r - 1]] - scores[order[r]]
    } else {
        f64::INFINITY
    };
    let max = scores[indices[0]];
    let mut weights = vec![0.0; scores.len()];
    let mut total = 0.0;
    for &i in &indices {
        let e = (scores[i] - max).exp();
        weights[i] = e;
        total += e;
    }
    for &i in &indices {
        weights[i] /= total;
    }
    Ok(TopSelection {
        indices,
        weights,
        margin,
    })
}

/// Router logits of expert `m` for every expression row.
pub fn router_logits(e: &Array2<f64>, params: &EcsParams, m: usize) -> Vec<f64> {
    let w = params.routers.weight.row(m);
    let b = params.routers.bias[m];
    e.rows().into_iter().map(|row| row.dot(&w) + b).collect()
}

/// Top-R attention weights of expert `m` over the expression rows.
pub fn route(e_v: &ExpressionSet, params: &EcsParams, m: usize, r: usize) -> Result<Array1<f64>> {
    if m >= params.num_experts() {
        return Err(Error::invalid(format!("no expert {m}")));
    }
    let sel = top_softmax(&router_logits(&e_v.tokens, params, m), r)?;
    Ok(Array1::from(sel.weights))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateDecision {
    pub active: Vec<usize>,
    /// Softmax over the active experts' logits, aligned with `active`.
    pub weights: Vec<f64>,
    pub margin: f64,
}

fn mean_rows(x: &Array2<f64>) -> Array1<f64> {
    x.sum_axis(Axis(0)) / x.nrows() as f64
}

/// Picks the `n_active` experts with the largest gate logits on the
/// mean-pooled expressions.
pub fn gate_experts(e_v: &ExpressionSet, params: &EcsParams, n_active: usize) -> Result<GateDecision> {
    gate_tokens(&e_v.tokens, params, n_active)
}

fn gate_tokens(tokens: &Array2<f64>, params: &EcsParams, n_active: usize) -> Result<GateDecision> {
    if n_active == 0 || n_active > params.num_experts() {
        return Err(Error::invalid(format!(
            "active experts must be in 1..={}",
            params.num_experts()
        )));
    }
    let logits = params.gate.apply(mean_rows(tokens).view());
    let sel = top_softmax(logits.as_slice().expect("contiguous"), n_active)?;
    let weights = sel.indices.iter().map(|&i| sel.weights[i]).collect();
    Ok(GateDecision {
        active: sel.indices,
        weights,
        margin: sel.margin,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertRoute {
    pub expert: usize,
    pub gate_weight: f64,
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RoutingTrace {
    pub routes: Vec<ExpertRoute>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedExpression {
    pub tokens: Array2<f64>,
    pub pooled: EmbeddingVector,
    pub routing_trace: RoutingTrace,
}

/// Intermediate values of one active expert, kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct ExpertTape {
    pub expert: usize,
    pub gate_weight: f64,
    pub route: TopSelection,
    pub input: Array2<f64>,
    pub hidden: Array2<f64>,
    pub output: Array2<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct EcsTape {
    pub tokens: Array2<f64>,
    pub gate_input: Array1<f64>,
    pub experts: Vec<ExpertTape>,
    pub pooled_mean: Array1<f64>,
    pub projected_norm: f64,
    pub pooled: Array1<f64>,
    /// Smallest top-R / top-N_e score gap seen in this forward pass.
    pub min_margin: f64,
    pub bypass: bool,
}

/// Runs the head on one expression set.
pub fn ecs_forward(e_v: &ExpressionSet, params: &EcsParams, cfg: &EcsConfig) -> Result<FusedExpression> {
    let tape = forward_tokens(&e_v.tokens, params, Some(cfg))?;
    Ok(fused_from_tape(tape))
}

/// Skips the experts: the expressions are pooled and projected unchanged.
pub fn ecs_bypass(e_v: &ExpressionSet, params: &EcsParams) -> Result<FusedExpression> {
    let tape = forward_tokens(&e_v.tokens, params, None)?;
    Ok(fused_from_tape(tape))
}

fn fused_from_tape(tape: EcsTape) -> FusedExpression {
    let mut tokens = tape.tokens.clone();
    for ex in &tape.experts {
        tokens.scaled_add(ex.gate_weight, &ex.output);
    }
    let routes = tape
        .experts
        .iter()
        .map(|ex| ExpertRoute {
            expert: ex.expert,
            gate_weight: ex.gate_weight,
            indices: ex.route.indices.clone(),
            weights: ex.route.indices.iter().map(|&i| ex.route.weights[i]).collect(),
        })
        .collect();
    FusedExpression {
        tokens,
        pooled: EmbeddingVector::new(tape.pooled.to_vec()).expect("finite pooled output"),
        routing_trace: RoutingTrace { routes },
    }
}

/// Forward pass recording everything the backward pass needs. `cfg = None`
/// bypasses the experts.
pub(crate) fn forward_tokens(tokens: &Array2<f64>, params: &EcsParams, cfg: Option<&EcsConfig>) -> Result<EcsTape> {
    let d = params.dim();
    if tokens.ncols() != d {
        return Err(Error::DimMismatch {
            expected: d,
            actual: tokens.ncols(),
        });
    }
    if tokens.nrows() == 0 {
        return Err(Error::invalid("expression set has no rows"));
    }
    let gate_input = mean_rows(tokens);
    let mut experts = Vec::new();
    let mut fused = tokens.clone();
    let mut min_margin = f64::INFINITY;
    if let Some(cfg) = cfg {
        if params.num_experts() != cfg.num_experts {
            return Err(Error::invalid(format!(
                "config has {} experts, parameters have {}",
                cfg.num_experts,
                params.num_experts()
            )));
        }
        if cfg.top_r > tokens.nrows() {
            return Err(Error::invalid(format!(
                "top_r = {} exceeds {} expression rows",
                cfg.top_r,
                tokens.nrows()
            )));
        }
        let gate = gate_tokens(tokens, params, cfg.active_experts)?;
        min_margin = min_margin.min(gate.margin);
        for (&m, &gw) in gate.active.iter().zip(&gate.weights) {
            let route = top_softmax(&router_logits(tokens, params, m), cfg.top_r)?;
            min_margin = min_margin.min(route.margin);
            let mut input = tokens.clone();
            for (i, mut row) in input.rows_mut().into_iter().enumerate() {
                row *= route.weights[i];
            }
            let ex = &params.experts[m];
            let hidden = input.dot(&ex.hidden.t()).mapv(f64::tanh);
            let output = hidden.dot(&ex.output.t());
            fused.scaled_add(gw, &output);
            experts.push(ExpertTape {
                expert: m,
                gate_weight: gw,
                route,
                input,
                hidden,
                output,
            });
        }
    }
    let pooled_mean = mean_rows(&fused);
    let projected = params.shared_projection.apply(pooled_mean.view());
    let projected_norm = projected.dot(&projected).sqrt();
    if projected_norm == 0.0 || !projected_norm.is_finite() {
        return Err(Error::NonFinite("pooled video embedding".into()));
    }
    let pooled = &projected / projected_norm;
    Ok(EcsTape {
        tokens: tokens.clone(),
        gate_input,
        experts,
        pooled_mean,
        projected_norm,
        pooled,
        min_margin,
        bypass: cfg.is_none(),
    })
}

/// Back-propagates a gradient on the unit-norm pooled output. Accumulates
/// parameter gradients into `grads` and returns the gradient with respect to
/// the expression rows.
pub(crate) fn backward_tokens(
    tape: &EcsTape,
    params: &EcsParams,
    d_pooled: ArrayView1<'_, f64>,
    grads: &mut EcsParams,
) -> Array2<f64> {
    let rows = tape.tokens.nrows() as f64;

    // normalization
    let dot = tape.pooled.dot(&d_pooled);
    let dz = (&d_pooled - &(&tape.pooled * dot)) / tape.projected_norm;

    // shared projection
    grads.shared_projection.weight += &outer(&dz, &tape.pooled_mean);
    grads.shared_projection.bias += &dz;
    let dp = params.shared_projection.weight.t().dot(&dz);

    // mean pooling: every fused row receives dp / rows
    let d_row = &dp / rows;
    let mut d_tokens = Array2::zeros(tape.tokens.raw_dim());
    d_tokens.rows_mut().into_iter().for_each(|mut r| r.assign(&d_row));
    if tape.bypass {
        return d_tokens;
    }

    let mut d_gate_w = Vec::with_capacity(tape.experts.len());
    for ex in &tape.experts {
        let m = ex.expert;
        let p = &params.experts[m];
        let g = &mut grads.experts[m];

        // fused = tokens + w * output; d_fused rows are all d_row
        d_gate_w.push(ex.output.dot(&d_row).sum());
        let mut d_out = Array2::zeros(ex.output.raw_dim());
        d_out.rows_mut().into_iter().for_each(|mut r| r.assign(&(&d_row * ex.gate_weight)));

        g.output += &d_out.t().dot(&ex.hidden);
        let d_hidden = d_out.dot(&p.output);
        let d_pre = &d_hidden * &ex.hidden.mapv(|h| 1.0 - h * h);
        g.hidden += &d_pre.t().dot(&ex.input);
        let d_input = d_pre.dot(&p.hidden);

        // input = diag(alpha) tokens
        let alpha = &ex.route.weights;
        let mut d_alpha = vec![0.0; alpha.len()];
        for (i, (di, ti)) in d_input.rows().into_iter().zip(tape.tokens.rows()).enumerate() {
            d_alpha[i] = di.dot(&ti);
            if alpha[i] != 0.0 {
                d_tokens.row_mut(i).scaled_add(alpha[i], &di);
            }
        }

        // softmax over the selected rows only
        let mean: f64 = ex.route.indices.iter().map(|&i| alpha[i] * d_alpha[i]).sum();
        let w_r = params.routers.weight.row(m);
        for &i in &ex.route.indices {
            let dl = alpha[i] * (d_alpha[i] - mean);
            grads.routers.weight.row_mut(m).scaled_add(dl, &tape.tokens.row(i));
            grads.routers.bias[m] += dl;
            d_tokens.row_mut(i).scaled_add(dl, &w_r);
        }
    }

    // gate softmax over the active experts
    let mean: f64 = tape
        .experts
        .iter()
        .zip(&d_gate_w)
        .map(|(ex, dw)| ex.gate_weight * dw)
        .sum();
    let mut d_gate_in = Array1::<f64>::zeros(tape.gate_input.len());
    for (ex, dw) in tape.experts.iter().zip(&d_gate_w) {
        let ds = ex.gate_weight * (dw - mean);
        grads.gate.weight.row_mut(ex.expert).scaled_add(ds, &tape.gate_input);
        grads.gate.bias[ex.expert] += ds;
        d_gate_in.scaled_add(ds, &params.gate.weight.row(ex.expert));
    }
    let d_gate_row = d_gate_in / rows;
    d_tokens.rows_mut().into_iter().for_each(|mut r| r += &d_gate_row);
    d_tokens
}

pub(crate) fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let a2 = a.view().insert_axis(Axis(1));
    let b2 = b.view().insert_axis(Axis(0));
    a2.dot(&b2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn set(tokens: Array2<f64>) -> ExpressionSet {
        ExpressionSet {
            video_id: "v".into(),
            kinds: vec![crate::model::ExpressionKind::Frame; tokens.nrows()],
            tokens,
        }
    }

    fn random_tokens(rows: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, d), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn top_softmax_examples() {
        let s = top_softmax(&[0.3, 0.3, 0.3], 3).unwrap();
        for w in &s.weights {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = top_softmax(&[0.1, 0.9, 0.5], 1).unwrap();
        assert_eq!(s.weights, vec![0.0, 1.0, 0.0]);

        let s = top_softmax(&[2.0, 1.0, 0.0], 2).unwrap();
        let e2 = 2f64.exp();
        let e1 = 1f64.exp();
        assert!((s.weights[0] - e2 / (e2 + e1)).abs() < 1e-15);
        assert!((s.weights[1] - e1 / (e2 + e1)).abs() < 1e-15);
        assert_eq!(s.weights[2], 0.0);
        assert!((s.weights[0] - 0.7311).abs() < 1e-4);

        assert!(top_softmax(&[1.0], 0).is_err());
        assert!(top_softmax(&[1.0], 2).is_err());
    }

    #[test]
    fn ties_prefer_lower_index() {
        let s = top_softmax(&[1.0, 5.0, 5.0, 5.0], 2).unwrap();
        assert_eq!(s.indices, vec![1, 2]);
        assert_eq!(s.margin, 0.0);
    }

    #[test]
    fn route_uniform_when_full_and_tied() {
        let cfg = EcsConfig { num_experts: 2, active_experts: 1, top_r: 5, dim: 3, seed: 1 };
        let mut p = EcsParams::init(&cfg).unwrap();
        p.routers.weight.fill(0.0);
        let e = set(random_tokens(5, 3, 2));
        let w = route(&e, &p, 0, 5).unwrap();
        assert!(w.iter().all(|x| (x - 0.2).abs() < 1e-15));
        assert!(route(&e, &p, 0, 6).is_err());
    }

    #[test]
    fn zero_experts_are_identity() {
        let cfg = EcsConfig { dim: 6, ..EcsConfig::new(6) };
        let p = EcsParams::init(&cfg).unwrap();
        let e = set(random_tokens(18, 6, 3));
        let out = ecs_forward(&e, &p, &cfg).unwrap();
        assert_eq!(out.tokens, e.tokens);
        let mut mean = e.tokens.sum_axis(Axis(0)) / 18.0;
        let norm = mean.dot(&mean).sqrt();
        mean /= norm;
        for (a, b) in out.pooled.values().iter().zip(mean.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(out.routing_trace.routes.len(), 2);
    }

    #[test]
    fn identity_expert_scales_rows() {
        // one expert, everything routed uniformly, expert(x) = x
        let d = 3;
        let rows = 4;
        let cfg = EcsConfig { num_experts: 1, active_experts: 1, top_r: rows, dim: d, seed: 0 };
        let mut p = EcsParams::init(&cfg).unwrap();
        p.routers.weight.fill(0.0);
        // tanh is not linear, so pick an input small enough for a scalar
        // reference: y = W2 tanh(W1 x) with W1 = c I, W2 = I / c
        let c = 1e-4;
        p.experts[0].hidden = Array2::eye(d) * c;
        p.experts[0].output = Array2::eye(d) / c;
        let e = set(random_tokens(rows, d, 9));
        let out = ecs_forward(&e, &p, &cfg).unwrap();
        for i in 0..rows {
            for j in 0..d {
                let x = e.tokens[[i, j]];
                let reference = x + (c * x / rows as f64).tanh() / c;
                assert!((out.tokens[[i, j]] - reference).abs() < 1e-12);
                assert!((out.tokens[[i, j]] - (1.0 + 1.0 / rows as f64) * x).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn gate_sizes() {
        let cfg = EcsConfig::new(8);
        let p = EcsParams::init(&cfg).unwrap();
        let e = set(random_tokens(18, 8, 4));
        assert_eq!(gate_experts(&e, &p, 2).unwrap().active.len(), 2);
        let all = gate_experts(&e, &p, 16).unwrap();
        let mut a = all.active.clone();
        a.sort();
        assert_eq!(a, (0..16).collect::<Vec<_>>());
        assert!(gate_experts(&e, &p, 0).is_err());
        assert!(gate_experts(&e, &p, 17).is_err());
    }

    #[test]
    fn gated_out_expert_is_ignored() {
        let cfg = EcsConfig { num_experts: 2, active_experts: 1, top_r: 2, dim: 3, seed: 5 };
        let mut p = EcsParams::init(&cfg).unwrap();
        p.gate.weight.fill(0.0);
        p.gate.bias = array![10.0, -10.0];
        for ex in &mut p.experts {
            ex.output = Array2::from_elem((3, 3), 0.3);
        }
        let e = set(random_tokens(4, 3, 6));
        let base = ecs_forward(&e, &p, &cfg).unwrap();
        let mut q = p.clone();
        q.experts[1].hidden.mapv_inplace(|x| x * 7.0 + 1.0);
        q.experts[1].output.mapv_inplace(|x| -x);
        q.routers.weight.row_mut(1).fill(3.0);
        let other = ecs_forward(&e, &q, &cfg).unwrap();
        assert_eq!(base.tokens, other.tokens);
        assert_eq!(base.pooled, other.pooled);
    }

    #[test]
    fn rejects_bad_shapes() {
        let cfg = EcsConfig::new(4);
        let p = EcsParams::init(&cfg).unwrap();
        assert!(ecs_forward(&set(random_tokens(5, 3, 1)), &p, &cfg).is_err());
        assert!(ecs_forward(&set(random_tokens(3, 4, 1)), &p, &cfg).is_err());
    }

    proptest::proptest! {
        #[test]
        fn row_permutation_equivariance(seed in 0u64..1000, shift in 1usize..9) {
            let cfg = EcsConfig { num_experts: 4, active_experts: 2, top_r: 3, dim: 5, seed };
            let mut p = EcsParams::init(&cfg).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            for ex in &mut p.experts {
                ex.output.mapv_inplace(|_| rng.random_range(-0.5..0.5));
            }
            let tokens = random_tokens(9, 5, seed + 2);
            let perm: Vec<usize> = (0..9).map(|i| (i + shift) % 9).collect();
            let permuted = tokens.select(Axis(0), &perm);
            let a = ecs_forward(&set(tokens), &p, &cfg).unwrap();
            let b = ecs_forward(&set(permuted), &p, &cfg).unwrap();
            for (new_i, &old_i) in perm.iter().enumerate() {
                for j in 0..5 {
                    proptest::prop_assert!((b.tokens[[new_i, j]] - a.tokens[[old_i, j]]).abs() < 1e-12);
                }
            }
        }
    }
}
