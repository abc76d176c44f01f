//! Auxiliary heads: feature alignment and structured action classification.
//!
//! Each of the six learnable queries (three text, three action) owns an
//! independent stack of multi-head cross-attention layers over the ego
//! feature, followed by an MLP on the updated query concatenated with the
//! pooled ego feature. Key/value projections are per-layer, not shared.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

pub const TEXT_QUERIES: [&str; 3] = ["c", "f", "r"];
pub const ACTION_QUERIES: [&str; 3] = ["control", "turn", "lane"];

/// Standard deviation of the query initialization.
pub const QUERY_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxiliaryHeadConfig {
    /// Model dimension D of the ego feature and queries.
    pub model_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    /// Output dimension C of the alignment head (text embedding dim).
    pub text_out_dim: usize,
    pub mlp_hidden_dims: Vec<usize>,
    pub action_sizes: [usize; 3],
    /// Enable per-layer pre-normalization of query and ego tokens.
    pub pre_norm: bool,
}

impl AuxiliaryHeadConfig {
    pub fn new(model_dim: usize, text_out_dim: usize) -> Self {
        Self {
            model_dim,
            num_heads: 8,
            num_layers: 3,
            text_out_dim,
            mlp_hidden_dims: vec![2 * model_dim],
            action_sizes: [4, 4, 5],
            pre_norm: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.text_out_dim == 0 || self.num_heads == 0 || self.num_layers == 0 {
            return Err(Error::Config("head dimensions must be positive".into()));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.action_sizes.iter().any(|&n| n == 0) || self.mlp_hidden_dims.iter().any(|&n| n == 0) {
            return Err(Error::Config("zero-sized layer in head config".into()));
        }
        Ok(())
    }
}

/// Named parameters with paired gradient buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore {
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Param {
    name: String,
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    #[serde(skip)]
    grad: Vec<f64>,
}

impl Default for ParameterStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParameterStore {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, rows: usize, cols: usize, value: Vec<f64>) {
        assert_eq!(value.len(), rows * cols, "parameter shape mismatch: {name}");
        assert!(!self.index.contains_key(name), "duplicate parameter: {name}");
        let grad = vec![0.0; value.len()];
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            rows,
            cols,
            value,
            grad,
        });
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn shape(&self, name: &str) -> (usize, usize) {
        let p = &self.params[self.index[name]];
        (p.rows, p.cols)
    }

    pub fn value(&self, name: &str) -> &[f64] {
        &self.params[self.index[name]].value
    }

    pub fn value_mut(&mut self, name: &str) -> &mut [f64] {
        let i = self.index[name];
        &mut self.params[i].value
    }

    pub fn grad(&self, name: &str) -> &[f64] {
        &self.params[self.index[name]].grad
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Plain SGD update: w -= lr * g.
    pub fn sgd_step(&mut self, lr: f64) {
        for p in &mut self.params {
            for (w, g) in p.value.iter_mut().zip(&p.grad) {
                *w -= lr * g;
            }
        }
    }

    /// Add another store's gradient buffers into this one (same layout).
    pub fn add_grads_from(&mut self, grads: &[Vec<f64>]) {
        assert_eq!(grads.len(), self.params.len());
        for (p, g) in self.params.iter_mut().zip(grads) {
            for (a, b) in p.grad.iter_mut().zip(g) {
                *a += b;
            }
        }
    }

    pub fn max_grad_abs(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.iter())
            .fold(0.0, |m: f64, g| m.max(g.abs()))
    }
}

/// Tape bindings for every parameter in a store, in store order.
pub struct BoundParams {
    vars: Vec<Var>,
    index: BTreeMap<String, usize>,
}

impl BoundParams {
    pub fn bind(tape: &mut Tape, store: &ParameterStore) -> Self {
        let vars = store
            .params
            .iter()
            .map(|p| tape.leaf(p.rows, p.cols, p.value.clone()))
            .collect();
        Self {
            vars,
            index: store.index.clone(),
        }
    }

    pub fn var(&self, name: &str) -> Var {
        self.vars[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter: {name}"))]
    }

    /// Copy tape gradients back into per-parameter buffers (store order).
    pub fn collect_grads(&self, tape: &Tape) -> Vec<Vec<f64>> {
        self.vars.iter().map(|v| tape.grad(*v).to_vec()).collect()
    }
}

pub(crate) fn fan_in_uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    let bound = 1.0 / (rows as f64).sqrt();
    (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect()
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    // Box-Muller
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let th = 2.0 * std::f64::consts::PI * u2;
        out.push(r * th.cos() * std);
        if out.len() < n {
            out.push(r * th.sin() * std);
        }
    }
    out
}

fn init_mhca_stack(store: &mut ParameterStore, rng: &mut ChaCha8Rng, prefix: &str, cfg: &AuxiliaryHeadConfig) {
    let d = cfg.model_dim;
    for layer in 0..cfg.num_layers {
        for w in ["wq", "wk", "wv", "wo"] {
            store.add(&format!("{prefix}.layer{layer}.{w}"), d, d, fan_in_uniform(rng, d, d));
        }
        for b in ["bq", "bk", "bv", "bo"] {
            store.add(&format!("{prefix}.layer{layer}.{b}"), 1, d, vec![0.0; d]);
        }
    }
}

fn init_mlp(store: &mut ParameterStore, rng: &mut ChaCha8Rng, prefix: &str, in_dim: usize, hidden: &[usize], out_dim: usize) {
    let mut prev = in_dim;
    for (i, &h) in hidden.iter().enumerate() {
        store.add(&format!("{prefix}.w{i}"), prev, h, fan_in_uniform(rng, prev, h));
        store.add(&format!("{prefix}.b{i}"), 1, h, vec![0.0; h]);
        prev = h;
    }
    let last = hidden.len();
    store.add(&format!("{prefix}.w{last}"), prev, out_dim, fan_in_uniform(rng, prev, out_dim));
    store.add(&format!("{prefix}.b{last}"), 1, out_dim, vec![0.0; out_dim]);
}

/// Initialize every parameter of both heads. Fully seed-determined:
/// projections get fan-in-scaled uniform noise, queries small Gaussian
/// noise, biases zero.
pub fn init_parameters(cfg: &AuxiliaryHeadConfig, seed: u64) -> Result<ParameterStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    let d = cfg.model_dim;
    for q in TEXT_QUERIES {
        store.add(&format!("align.{q}.query"), 1, d, gaussian(&mut rng, d, QUERY_INIT_STD));
        init_mhca_stack(&mut store, &mut rng, &format!("align.{q}"), cfg);
        init_mlp(
            &mut store,
            &mut rng,
            &format!("align.{q}.mlp"),
            2 * d,
            &cfg.mlp_hidden_dims,
            cfg.text_out_dim,
        );
    }
    for (i, q) in ACTION_QUERIES.iter().enumerate() {
        store.add(&format!("action.{q}.query"), 1, d, gaussian(&mut rng, d, QUERY_INIT_STD));
        init_mhca_stack(&mut store, &mut rng, &format!("action.{q}"), cfg);
        init_mlp(
            &mut store,
            &mut rng,
            &format!("action.{q}.mlp"),
            2 * d,
            &cfg.mlp_hidden_dims,
            cfg.action_sizes[i],
        );
    }
    Ok(store)
}

/// One multi-head cross-attention layer: the query attends over the ego
/// tokens; heads are concatenated and output-projected.
fn mhca_layer(
    tape: &mut Tape,
    bound: &BoundParams,
    prefix: &str,
    layer: usize,
    query: Var,
    ego: Var,
    cfg: &AuxiliaryHeadConfig,
) -> Var {
    let (query, ego) = if cfg.pre_norm {
        (tape.layer_norm_rows(query), tape.layer_norm_rows(ego))
    } else {
        (query, ego)
    };
    let p = |w: &str| bound.var(&format!("{prefix}.layer{layer}.{w}"));
    let q_proj = tape.matmul(query, p("wq"));
    let q_proj = tape.add_row(q_proj, p("bq"));
    let k_proj = tape.matmul(ego, p("wk"));
    let k_proj = tape.add_row(k_proj, p("bk"));
    let v_proj = tape.matmul(ego, p("wv"));
    let v_proj = tape.add_row(v_proj, p("bv"));

    let dh = cfg.model_dim / cfg.num_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads: Option<Var> = None;
    for h in 0..cfg.num_heads {
        let qh = tape.slice_cols(q_proj, h * dh, dh);
        let kh = tape.slice_cols(k_proj, h * dh, dh);
        let vh = tape.slice_cols(v_proj, h * dh, dh);
        let scores = tape.matmul_bt(qh, kh);
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax_rows(scores);
        let out_h = tape.matmul(attn, vh);
        heads = Some(match heads {
            Some(acc) => tape.concat_cols(acc, out_h),
            None => out_h,
        });
    }
    let concat = heads.expect("at least one head");
    let out = tape.matmul(concat, p("wo"));
    tape.add_row(out, p("bo"))
}

/// Run the full per-query MHCA stack, feeding each layer's output to the
/// next as the query.
pub fn mhca_stack(
    tape: &mut Tape,
    bound: &BoundParams,
    prefix: &str,
    query: Var,
    ego: Var,
    cfg: &AuxiliaryHeadConfig,
) -> Var {
    let mut q = query;
    for layer in 0..cfg.num_layers {
        q = mhca_layer(tape, bound, prefix, layer, q, ego, cfg);
    }
    q
}

fn mlp_forward(tape: &mut Tape, bound: &BoundParams, prefix: &str, x: Var, n_hidden: usize) -> Var {
    let mut h = x;
    for i in 0..n_hidden {
        let w = bound.var(&format!("{prefix}.w{i}"));
        let b = bound.var(&format!("{prefix}.b{i}"));
        let z = tape.matmul(h, w);
        let z = tape.add_row(z, b);
        h = tape.softplus(z);
    }
    let w = bound.var(&format!("{prefix}.w{n_hidden}"));
    let b = bound.var(&format!("{prefix}.b{n_hidden}"));
    let z = tape.matmul(h, w);
    tape.add_row(z, b)
}

fn pooled(tape: &mut Tape, ego: Var) -> Var {
    let (rows, _) = tape.shape(ego);
    if rows == 1 {
        ego
    } else {
        tape.mean_rows(ego)
    }
}

fn head_branch(
    tape: &mut Tape,
    bound: &BoundParams,
    prefix: &str,
    ego: Var,
    cfg: &AuxiliaryHeadConfig,
) -> Var {
    let query = bound.var(&format!("{prefix}.query"));
    let updated = mhca_stack(tape, bound, prefix, query, ego, cfg);
    let pool = pooled(tape, ego);
    let rep = tape.concat_cols(updated, pool);
    mlp_forward(tape, bound, &format!("{prefix}.mlp"), rep, cfg.mlp_hidden_dims.len())
}

/// Alignment head: three C-dim outputs (f_hat_c, f_hat_f, f_hat_r).
pub fn alignment_head_forward(
    tape: &mut Tape,
    bound: &BoundParams,
    ego: Var,
    cfg: &AuxiliaryHeadConfig,
) -> Result<[Var; 3]> {
    let (_, d) = tape.shape(ego);
    if d != cfg.model_dim {
        return Err(Error::Config(format!(
            "ego feature dim {d} != model_dim {}",
            cfg.model_dim
        )));
    }
    Ok([
        head_branch(tape, bound, "align.c", ego, cfg),
        head_branch(tape, bound, "align.f", ego, cfg),
        head_branch(tape, bound, "align.r", ego, cfg),
    ])
}

pub struct ActionHeadOutput {
    /// Probability simplices of sizes 4 / 4 / 5.
    pub probs: [Var; 3],
    pub logits: [Var; 3],
}

/// Action head: per-family logits followed by softmax.
pub fn action_head_forward(
    tape: &mut Tape,
    bound: &BoundParams,
    ego: Var,
    cfg: &AuxiliaryHeadConfig,
) -> Result<ActionHeadOutput> {
    let (_, d) = tape.shape(ego);
    if d != cfg.model_dim {
        return Err(Error::Config(format!(
            "ego feature dim {d} != model_dim {}",
            cfg.model_dim
        )));
    }
    let mut logits = Vec::with_capacity(3);
    let mut probs = Vec::with_capacity(3);
    for q in ACTION_QUERIES {
        let l = head_branch(tape, bound, &format!("action.{q}"), ego, cfg);
        logits.push(l);
        probs.push(tape.softmax_rows(l));
    }
    Ok(ActionHeadOutput {
        probs: [probs[0], probs[1], probs[2]],
        logits: [logits[0], logits[1], logits[2]],
    })
}

/// Flat checkpoint container: config header plus named parameters.
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: AuxiliaryHeadConfig,
    pub seed: u64,
    params: Vec<Param>,
}

impl Checkpoint {
    pub fn from_store(store: &ParameterStore, config: AuxiliaryHeadConfig, seed: u64) -> Self {
        Self {
            config,
            seed,
            params: store.params.clone(),
        }
    }

    pub fn into_store(self) -> ParameterStore {
        let mut store = ParameterStore::new();
        for p in self.params {
            store.add(&p.name, p.rows, p.cols, p.value);
        }
        store
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn tiny_cfg() -> AuxiliaryHeadConfig {
        AuxiliaryHeadConfig {
            model_dim: 8,
            num_heads: 2,
            num_layers: 2,
            text_out_dim: 4,
            mlp_hidden_dims: vec![16],
            action_sizes: [4, 4, 5],
            pre_norm: false,
        }
    }

    fn random_ego(tape: &mut Tape, l: usize, d: usize, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        tape.leaf(l, d, (0..l * d).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn init_is_seed_determined() {
        let cfg = tiny_cfg();
        let a = init_parameters(&cfg, 7).unwrap();
        let b = init_parameters(&cfg, 7).unwrap();
        assert_eq!(a, b);
        let c = init_parameters(&cfg, 8).unwrap();
        assert!(a.names().any(|n| a.value(n) != c.value(n)));
    }

    #[test]
    fn query_init_variance_matches_scheme() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = gaussian(&mut rng, 100_000, QUERY_INIT_STD);
        let mean: f64 = q.iter().sum::<f64>() / q.len() as f64;
        let var: f64 = q.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / q.len() as f64;
        let target = QUERY_INIT_STD * QUERY_INIT_STD;
        assert!(mean.abs() < 0.1 * QUERY_INIT_STD, "mean {mean}");
        assert!((var - target).abs() < 0.05 * target, "var {var} vs {target}");
    }

    #[test]
    fn single_token_attention_weight_is_one() {
        // with L = 1 the softmax has one key, so attention output equals
        // the (projected) value row regardless of the attention logits
        let cfg = tiny_cfg();
        let store = init_parameters(&cfg, 1).unwrap();
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &store);
        let ego = random_ego(&mut tape, 1, 8, 5);
        let q = bound.var("align.c.query");
        let scaled_q = tape.scale(q, 100.0); // rescaling the query logits
        let a = mhca_stack(&mut tape, &bound, "align.c", q, ego, &cfg);
        let b = mhca_stack(&mut tape, &bound, "align.c", scaled_q, ego, &cfg);
        for (x, y) in tape.value(a).iter().zip(tape.value(b)) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_inputs_give_zero_alignment_outputs() {
        let cfg = tiny_cfg();
        let mut store = init_parameters(&cfg, 2).unwrap();
        // zero queries; weights stay random but softplus(0)*w + 0 bias is
        // not zero, so zero the MLP weights too for a pure-zero path
        for name in store.names().map(str::to_string).collect::<Vec<_>>() {
            if name.ends_with(".query") || name.contains(".mlp.") {
                store.value_mut(&name).iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &store);
        let ego = tape.leaf(2, 8, vec![0.0; 16]);
        let outs = alignment_head_forward(&mut tape, &bound, ego, &cfg).unwrap();
        for o in outs {
            assert!(tape.value(o).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn stacks_are_parameter_disjoint() {
        let cfg = tiny_cfg();
        let store = init_parameters(&cfg, 3).unwrap();
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &store);
        let ego = random_ego(&mut tape, 2, 8, 9);
        let outs = alignment_head_forward(&mut tape, &bound, ego, &cfg).unwrap();
        // backprop only through the first branch: the other stacks' grads stay zero
        let s = tape.sum_all(outs[0]);
        tape.backward(s);
        let grads = bound.collect_grads(&tape);
        let mut store2 = store.clone();
        store2.zero_grad();
        store2.add_grads_from(&grads);
        assert!(store2.grad("align.c.layer0.wq").iter().any(|&g| g != 0.0));
        assert!(store2.grad("align.f.layer0.wq").iter().all(|&g| g == 0.0));
        assert!(store2.grad("align.r.query").iter().all(|&g| g == 0.0));
        assert!(store2.grad("action.control.layer0.wq").iter().all(|&g| g == 0.0));
    }

    #[test]
    fn action_probs_are_on_the_simplex() {
        let cfg = tiny_cfg();
        let store = init_parameters(&cfg, 4).unwrap();
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &store);
        let ego = random_ego(&mut tape, 2, 8, 11);
        let out = action_head_forward(&mut tape, &bound, ego, &cfg).unwrap();
        for (i, p) in out.probs.iter().enumerate() {
            let v = tape.value(*p);
            assert_eq!(v.len(), cfg.action_sizes[i]);
            assert_abs_diff_eq!(v.iter().sum::<f64>(), 1.0, epsilon = 1e-6);
            assert!(v.iter().all(|&x| x > 0.0));
        }
    }

    #[test]
    fn single_head_identity_projection_matches_closed_form() {
        // 2-token ego, 1 head, identity projections, zero biases:
        // output = softmax(q K^T / sqrt(D)) V
        let cfg = AuxiliaryHeadConfig {
            model_dim: 2,
            num_heads: 1,
            num_layers: 1,
            text_out_dim: 2,
            mlp_hidden_dims: vec![4],
            action_sizes: [4, 4, 5],
            pre_norm: false,
        };
        let mut store = init_parameters(&cfg, 0).unwrap();
        for w in ["wq", "wk", "wv", "wo"] {
            let name = format!("align.c.layer0.{w}");
            store.value_mut(&name).copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        }
        let q_data = [0.5, -0.25];
        store.value_mut("align.c.query").copy_from_slice(&q_data);
        let ego_data = [1.0, 2.0, -1.0, 0.5];
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &store);
        let ego = tape.leaf(2, 2, ego_data.to_vec());
        let q = bound.var("align.c.query");
        let out = mhca_stack(&mut tape, &bound, "align.c", q, ego, &cfg);

        // hand-computed oracle
        let scale = 1.0 / (2.0f64).sqrt();
        let s0 = (q_data[0] * ego_data[0] + q_data[1] * ego_data[1]) * scale;
        let s1 = (q_data[0] * ego_data[2] + q_data[1] * ego_data[3]) * scale;
        let m = s0.max(s1);
        let (e0, e1) = ((s0 - m).exp(), (s1 - m).exp());
        let (a0, a1) = (e0 / (e0 + e1), e1 / (e0 + e1));
        let expect = [
            a0 * ego_data[0] + a1 * ego_data[2],
            a0 * ego_data[1] + a1 * ego_data[3],
        ];
        for (got, want) in tape.value(out).iter().zip(&expect) {
            assert_abs_diff_eq!(got, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = tiny_cfg();
        let store = init_parameters(&cfg, 21).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        Checkpoint::from_store(&store, cfg.clone(), 21).save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.config, cfg);
        let restored = loaded.into_store();
        for name in store.names() {
            assert_eq!(store.value(name), restored.value(name));
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = tiny_cfg();
        cfg.num_heads = 3; // 8 % 3 != 0
        assert!(init_parameters(&cfg, 0).is_err());
    }
}
