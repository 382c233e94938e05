//! Decoder-only toy transformer with attachable low-rank adapters.
//!
//! Projections are square (d_model x d_model) so per-projection gradients
//! flatten to d_model^2, which is what the gradient decoder emits. Adapters
//! perturb a projection as W + A*B with A Gaussian(0, 1/r) and B zero, so a
//! freshly attached adapter is exactly the identity perturbation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::optim::Adam;
use crate::par;
use crate::tape::{Bindings, Graph, NodeId};
use crate::{Error, Result, Tensor};

pub type Token = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Proxy,
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub seq_len: usize,
    pub role: Role,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0
            || self.d_model == 0
            || self.n_layers == 0
            || self.n_heads == 0
            || self.seq_len == 0
        {
            return Err(Error::Config("model dimensions must be nonzero".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Stable hash binding checkpoints and decoders to an architecture.
    pub fn hash(&self) -> String {
        let canon = format!(
            "v{}:d{}:l{}:h{}:s{}",
            self.vocab_size, self.d_model, self.n_layers, self.n_heads, self.seq_len
        );
        let digest = Sha256::digest(canon.as_bytes());
        hex_prefix(&digest, 12)
    }
}

pub fn hex_prefix(bytes: &[u8], n: usize) -> String {
    bytes.iter().take(n).map(|b| format!("{b:02x}")).collect()
}

/// Attention projection a LoRA adapter (or gradient) attaches to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Query,
    Key,
    Value,
    Output,
}

impl Projection {
    pub fn short(&self) -> &'static str {
        match self {
            Projection::Query => "q",
            Projection::Key => "k",
            Projection::Value => "v",
            Projection::Output => "o",
        }
    }

    pub fn from_short(s: &str) -> Result<Self> {
        match s {
            "q" => Ok(Projection::Query),
            "k" => Ok(Projection::Key),
            "v" => Ok(Projection::Value),
            "o" => Ok(Projection::Output),
            other => Err(Error::Config(format!("unknown projection '{other}'"))),
        }
    }

    pub fn param_name(&self, layer: usize) -> String {
        format!("layer{layer}.attn.w{}", self.short())
    }

    /// Default LoRA targets: query and value projections of every layer.
    pub fn default_targets() -> Vec<Projection> {
        vec![Projection::Query, Projection::Value]
    }
}

/// Canonical ordering for gradient flattening: projection short name, ascending.
pub fn sort_projections(projs: &mut [Projection]) {
    projs.sort_by_key(|p| p.short());
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
}

/// Full parameter set theta. Flattening follows `named_tensors` order and
/// round-trips bitwise.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub embed: Tensor,
    pub pos: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_ln_g: Tensor,
    pub final_ln_b: Tensor,
    pub head: Tensor,
}

impl ModelParams {
    /// Canonical (name, tensor) walk: embedding, positions, per-layer blocks,
    /// final norm, head.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> =
            vec![("embed".into(), &self.embed), ("pos".into(), &self.pos)];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.ln1.g"), &l.ln1_g));
            out.push((format!("layer{i}.ln1.b"), &l.ln1_b));
            out.push((format!("layer{i}.attn.wq"), &l.wq));
            out.push((format!("layer{i}.attn.wk"), &l.wk));
            out.push((format!("layer{i}.attn.wv"), &l.wv));
            out.push((format!("layer{i}.attn.wo"), &l.wo));
            out.push((format!("layer{i}.ln2.g"), &l.ln2_g));
            out.push((format!("layer{i}.ln2.b"), &l.ln2_b));
            out.push((format!("layer{i}.mlp.w1"), &l.mlp_w1));
            out.push((format!("layer{i}.mlp.b1"), &l.mlp_b1));
            out.push((format!("layer{i}.mlp.w2"), &l.mlp_w2));
            out.push((format!("layer{i}.mlp.b2"), &l.mlp_b2));
        }
        out.push(("final_ln.g".into(), &self.final_ln_g));
        out.push(("final_ln.b".into(), &self.final_ln_b));
        out.push(("head".into(), &self.head));
        out
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.named_tensors()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let (head, rest) = name.split_once('.').unwrap_or((name, ""));
        match head {
            "embed" => Some(&mut self.embed),
            "pos" => Some(&mut self.pos),
            "final_ln" => match rest {
                "g" => Some(&mut self.final_ln_g),
                "b" => Some(&mut self.final_ln_b),
                _ => None,
            },
            "head" => Some(&mut self.head),
            _ => {
                let idx: usize = head.strip_prefix("layer")?.parse().ok()?;
                let l = self.layers.get_mut(idx)?;
                match rest {
                    "ln1.g" => Some(&mut l.ln1_g),
                    "ln1.b" => Some(&mut l.ln1_b),
                    "attn.wq" => Some(&mut l.wq),
                    "attn.wk" => Some(&mut l.wk),
                    "attn.wv" => Some(&mut l.wv),
                    "attn.wo" => Some(&mut l.wo),
                    "ln2.g" => Some(&mut l.ln2_g),
                    "ln2.b" => Some(&mut l.ln2_b),
                    "mlp.w1" => Some(&mut l.mlp_w1),
                    "mlp.b1" => Some(&mut l.mlp_b1),
                    "mlp.w2" => Some(&mut l.mlp_w2),
                    "mlp.b2" => Some(&mut l.mlp_b2),
                    _ => None,
                }
            }
        }
    }

    pub fn projection(&self, layer: usize, proj: Projection) -> &Tensor {
        let l = &self.layers[layer];
        match proj {
            Projection::Query => &l.wq,
            Projection::Key => &l.wk,
            Projection::Value => &l.wv,
            Projection::Output => &l.wo,
        }
    }

    pub fn projection_mut(&mut self, layer: usize, proj: Projection) -> &mut Tensor {
        let l = &mut self.layers[layer];
        match proj {
            Projection::Query => &mut l.wq,
            Projection::Key => &mut l.wk,
            Projection::Value => &mut l.wv,
            Projection::Output => &mut l.wo,
        }
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.param_count());
        for (_, t) in self.named_tensors() {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn unflatten(config: &ModelConfig, flat: &[f32]) -> Result<ModelParams> {
        let mut template = zeros_like_config(config);
        let mut offset = 0;
        let names: Vec<(String, Vec<usize>)> = template
            .named_tensors()
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect();
        for (name, shape) in names {
            let numel: usize = shape.iter().product();
            if offset + numel > flat.len() {
                return Err(Error::ShapeMismatch {
                    context: "unflatten".into(),
                    detail: format!("flat vector too short at '{name}'"),
                });
            }
            let t = Tensor::new(shape, flat[offset..offset + numel].to_vec())?;
            *template.tensor_mut(&name).expect("template name") = t;
            offset += numel;
        }
        if offset != flat.len() {
            return Err(Error::ShapeMismatch {
                context: "unflatten".into(),
                detail: format!("expected {} values, got {}", offset, flat.len()),
            });
        }
        Ok(template)
    }
}

/// Canonical (name, shape) walk for a config, without materializing params.
pub fn param_layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    zeros_like_config(config)
        .named_tensors()
        .iter()
        .map(|(n, t)| (n.clone(), t.shape().to_vec()))
        .collect()
}

fn zeros_like_config(config: &ModelConfig) -> ModelParams {
    let d = config.d_model;
    let layers = (0..config.n_layers)
        .map(|_| LayerParams {
            ln1_g: Tensor::zeros(vec![d]),
            ln1_b: Tensor::zeros(vec![d]),
            wq: Tensor::zeros(vec![d, d]),
            wk: Tensor::zeros(vec![d, d]),
            wv: Tensor::zeros(vec![d, d]),
            wo: Tensor::zeros(vec![d, d]),
            ln2_g: Tensor::zeros(vec![d]),
            ln2_b: Tensor::zeros(vec![d]),
            mlp_w1: Tensor::zeros(vec![d, 4 * d]),
            mlp_b1: Tensor::zeros(vec![4 * d]),
            mlp_w2: Tensor::zeros(vec![4 * d, d]),
            mlp_b2: Tensor::zeros(vec![d]),
        })
        .collect();
    ModelParams {
        config: config.clone(),
        embed: Tensor::zeros(vec![config.vocab_size, d]),
        pos: Tensor::zeros(vec![config.seq_len, d]),
        layers,
        final_ln_g: Tensor::zeros(vec![d]),
        final_ln_b: Tensor::zeros(vec![d]),
        head: Tensor::zeros(vec![d, config.vocab_size]),
    }
}

fn gaussian(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor {
    // Box-Muller keeps the dependency surface small and the stream stable.
    Tensor::from_fn(shape, |_| {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        (z * std) as f32
    })
}

/// Deterministic initialization: scaled Gaussians for weights, zero biases,
/// unit layer-norm gains.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.d_model;
    let proj_std = 1.0 / (d as f64).sqrt();
    let mut params = zeros_like_config(config);
    params.embed = gaussian(&mut rng, vec![config.vocab_size, d], 0.1);
    params.pos = gaussian(&mut rng, vec![config.seq_len, d], 0.1);
    for l in params.layers.iter_mut() {
        l.ln1_g = Tensor::from_fn(vec![d], |_| 1.0);
        l.wq = gaussian(&mut rng, vec![d, d], proj_std);
        l.wk = gaussian(&mut rng, vec![d, d], proj_std);
        l.wv = gaussian(&mut rng, vec![d, d], proj_std);
        l.wo = gaussian(&mut rng, vec![d, d], proj_std);
        l.ln2_g = Tensor::from_fn(vec![d], |_| 1.0);
        l.mlp_w1 = gaussian(&mut rng, vec![d, 4 * d], proj_std);
        l.mlp_w2 = gaussian(&mut rng, vec![4 * d, d], 1.0 / (4.0 * d as f64).sqrt());
    }
    params.final_ln_g = Tensor::from_fn(vec![d], |_| 1.0);
    params.head = gaussian(&mut rng, vec![d, config.vocab_size], proj_std);
    Ok(params)
}

// ── LoRA ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub layer: usize,
    pub proj: Projection,
    pub rank: usize,
    /// d_model x rank, Gaussian(0, 1/r)
    pub a: Tensor,
    /// rank x d_model, initialized to zero
    pub b: Tensor,
}

impl LoraAdapter {
    pub fn a_input_name(&self) -> String {
        format!("lora.{}.{}.a", self.layer, self.proj.short())
    }

    pub fn b_input_name(&self) -> String {
        format!("lora.{}.{}.b", self.layer, self.proj.short())
    }
}

/// Adapters for every (layer, target projection), canonically ordered by
/// layer then projection short name.
pub fn attach_lora(
    params: &ModelParams,
    rank: usize,
    targets: &[Projection],
    seed: u64,
) -> Result<Vec<LoraAdapter>> {
    if rank == 0 {
        return Err(Error::Config("LoRA rank must be >= 1".into()));
    }
    if targets.is_empty() {
        return Err(Error::Config("LoRA targets must be nonempty".into()));
    }
    let d = params.config.d_model;
    if rank > d / 4 {
        return Err(Error::RankTooLarge { rank, max: d / 4 });
    }
    let mut projs = targets.to_vec();
    projs.dedup();
    sort_projections(&mut projs);
    let std = 1.0 / (rank as f64).sqrt();
    let mut adapters = Vec::new();
    for layer in 0..params.config.n_layers {
        for &proj in &projs {
            // Independent stream per (layer, projection) so the adapter set
            // is stable under target-list changes.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(((layer as u64) << 3) | proj_index(proj) as u64);
            adapters.push(LoraAdapter {
                layer,
                proj,
                rank,
                a: gaussian(&mut rng, vec![d, rank], std),
                b: Tensor::zeros(vec![rank, d]),
            });
        }
    }
    Ok(adapters)
}

fn proj_index(p: Projection) -> usize {
    match p {
        Projection::Key => 0,
        Projection::Output => 1,
        Projection::Query => 2,
        Projection::Value => 3,
    }
}

/// Materialize W + A*B into a copy of the base params.
pub fn merge_adapters(params: &ModelParams, adapters: &[LoraAdapter]) -> ModelParams {
    let mut merged = params.clone();
    let d = params.config.d_model;
    for ad in adapters {
        let delta = crate::tensor::matmul(ad.a.data(), ad.b.data(), d, ad.rank, d);
        let w = merged.projection_mut(ad.layer, ad.proj);
        for (wv, dv) in w.data_mut().iter_mut().zip(&delta) {
            *wv += dv;
        }
    }
    merged
}

// ── forward graph ────────────────────────────────────────────────────

/// Where the language-model loss attaches.
pub enum LossSpec {
    None,
    /// Next-token prediction over the whole sequence (pretraining).
    NextTokenAll,
    /// Cross-entropy at one position against a bound "target_dist" input.
    AnswerAt { position: usize },
}

pub struct LmGraph {
    pub graph: Graph,
    pub logits: NodeId,
    pub probs: NodeId,
    pub hidden: NodeId,
    pub loss: Option<NodeId>,
}

/// Build the transformer graph for a fixed token sequence. Adapter slots are
/// (layer, projection, rank) triples whose A/B tensors bind as inputs.
pub fn build_lm_graph(
    config: &ModelConfig,
    adapter_slots: &[(usize, Projection, usize)],
    tokens: &[Token],
    loss: LossSpec,
) -> Result<LmGraph> {
    if tokens.is_empty() {
        return Err(Error::EmptySequence);
    }
    if tokens.len() > config.seq_len {
        return Err(Error::ShapeMismatch {
            context: "sequence".into(),
            detail: format!("{} tokens exceed seq_len {}", tokens.len(), config.seq_len),
        });
    }
    for &t in tokens {
        if t as usize >= config.vocab_size {
            return Err(Error::TokenOutOfRange { token: t, vocab: config.vocab_size });
        }
    }
    let n = tokens.len();
    let d = config.d_model;
    let hd = d / config.n_heads;
    let mut g = Graph::new();

    let embed = g.input("embed", vec![config.vocab_size, d]);
    let pos = g.input("pos", vec![config.seq_len, d]);
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let tok = g.embed(embed, ids)?;
    let pos_rows = g.select_rows(pos, (0..n).collect())?;
    let mut h = g.add(tok, pos_rows)?;

    let projected = |g: &mut Graph, x: NodeId, layer: usize, proj: Projection| -> Result<NodeId> {
        let w = g.input(&proj.param_name(layer), vec![d, d]);
        let eff = match adapter_slots
            .iter()
            .find(|(l, p, _)| *l == layer && *p == proj)
        {
            Some((_, _, rank)) => {
                let a = g.input(&format!("lora.{layer}.{}.a", proj.short()), vec![d, *rank]);
                let b = g.input(&format!("lora.{layer}.{}.b", proj.short()), vec![*rank, d]);
                let delta = g.matmul(a, b)?;
                g.add(w, delta)?
            }
            None => w,
        };
        g.matmul(x, eff)
    };

    for layer in 0..config.n_layers {
        let ln1_g = g.input(&format!("layer{layer}.ln1.g"), vec![d]);
        let ln1_b = g.input(&format!("layer{layer}.ln1.b"), vec![d]);
        let x = g.layer_norm(h, ln1_g, ln1_b)?;

        let q = projected(&mut g, x, layer, Projection::Query)?;
        let k = projected(&mut g, x, layer, Projection::Key)?;
        let v = projected(&mut g, x, layer, Projection::Value)?;

        let mut heads = Vec::with_capacity(config.n_heads);
        for hh in 0..config.n_heads {
            let qh = g.slice_cols(q, hh * hd, hd)?;
            let kh = g.slice_cols(k, hh * hd, hd)?;
            let vh = g.slice_cols(v, hh * hd, hd)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scaled = g.scale(scores, 1.0 / (hd as f32).sqrt());
            let attn = g.causal_softmax_rows(scaled)?;
            heads.push(g.matmul(attn, vh)?);
        }
        let concat = g.concat_cols(heads)?;
        let attn_out = projected(&mut g, concat, layer, Projection::Output)?;
        h = g.add(h, attn_out)?;

        let ln2_g = g.input(&format!("layer{layer}.ln2.g"), vec![d]);
        let ln2_b = g.input(&format!("layer{layer}.ln2.b"), vec![d]);
        let x2 = g.layer_norm(h, ln2_g, ln2_b)?;
        let w1 = g.input(&format!("layer{layer}.mlp.w1"), vec![d, 4 * d]);
        let b1 = g.input(&format!("layer{layer}.mlp.b1"), vec![4 * d]);
        let w2 = g.input(&format!("layer{layer}.mlp.w2"), vec![4 * d, d]);
        let b2 = g.input(&format!("layer{layer}.mlp.b2"), vec![d]);
        let up = g.matmul(x2, w1)?;
        let up_b = g.add_bias(up, b1)?;
        let act = g.silu(up_b);
        let down = g.matmul(act, w2)?;
        let down_b = g.add_bias(down, b2)?;
        h = g.add(h, down_b)?;
    }

    let fg = g.input("final_ln.g", vec![d]);
    let fb = g.input("final_ln.b", vec![d]);
    let hidden = g.layer_norm(h, fg, fb)?;
    let head = g.input("head", vec![d, config.vocab_size]);
    let logits = g.matmul(hidden, head)?;
    let probs = g.softmax_rows(logits)?;
    g.mark_output("logits", logits);
    g.mark_output("probs", probs);
    g.mark_output("hidden", hidden);

    let loss_node = match loss {
        LossSpec::None => None,
        LossSpec::NextTokenAll => {
            if n < 2 {
                return Err(Error::ShapeMismatch {
                    context: "next-token loss".into(),
                    detail: "needs at least 2 tokens".into(),
                });
            }
            let pred_rows = g.select_rows(logits, (0..n - 1).collect())?;
            let mut onehot = vec![0f32; (n - 1) * config.vocab_size];
            for (i, &t) in tokens[1..].iter().enumerate() {
                onehot[i * config.vocab_size + t as usize] = 1.0;
            }
            let targets = g.constant(Tensor::new(vec![n - 1, config.vocab_size], onehot)?);
            Some(g.cross_entropy_rows(pred_rows, targets)?)
        }
        LossSpec::AnswerAt { position } => {
            if position >= n {
                return Err(Error::ShapeMismatch {
                    context: "answer position".into(),
                    detail: format!("{position} out of {n}"),
                });
            }
            let row = g.select_rows(logits, vec![position])?;
            let target = g.input("target_dist", vec![1, config.vocab_size]);
            Some(g.cross_entropy_rows(row, target)?)
        }
    };
    if let Some(l) = loss_node {
        g.mark_output("loss", l);
    }

    Ok(LmGraph { graph: g, logits, probs, hidden, loss: loss_node })
}

pub fn adapter_slots(adapters: &[LoraAdapter]) -> Vec<(usize, Projection, usize)> {
    adapters.iter().map(|a| (a.layer, a.proj, a.rank)).collect()
}

/// Bind every model parameter (and adapter tensors) for evaluation.
pub fn bind_model<'a>(
    bind: &mut Bindings<'a>,
    params: &'a ModelParams,
    adapters: &'a [LoraAdapter],
) {
    for (name, t) in params.named_tensors() {
        bind.bind(name, t);
    }
    for ad in adapters {
        bind.bind(ad.a_input_name(), &ad.a);
        bind.bind(ad.b_input_name(), &ad.b);
    }
}

/// Per-position next-token distributions, rows summing to 1.
pub fn forward_lm(
    params: &ModelParams,
    adapters: &[LoraAdapter],
    tokens: &[Token],
) -> Result<Tensor> {
    let lm = build_lm_graph(&params.config, &adapter_slots(adapters), tokens, LossSpec::None)?;
    let mut bind = Bindings::new();
    bind_model(&mut bind, params, adapters);
    let eval = lm.graph.forward(&bind)?;
    Ok(eval.value(lm.probs).clone())
}

/// Distribution over the next token after the prompt (last row of forward_lm).
pub fn next_token_dist(
    params: &ModelParams,
    adapters: &[LoraAdapter],
    tokens: &[Token],
) -> Result<Vec<f32>> {
    let probs = forward_lm(params, adapters, tokens)?;
    let v = probs.cols();
    let n = probs.rows();
    Ok(probs.data()[(n - 1) * v..n * v].to_vec())
}

pub fn argmax(dist: &[f32]) -> usize {
    let mut best = 0;
    let mut bv = f32::NEG_INFINITY;
    for (i, &p) in dist.iter().enumerate() {
        if p > bv {
            bv = p;
            best = i;
        }
    }
    best
}

/// Mean-pooled final hidden state, the embedding used for paraphrase
/// similarity filtering.
pub fn prompt_embedding(
    params: &ModelParams,
    adapters: &[LoraAdapter],
    tokens: &[Token],
) -> Result<Vec<f64>> {
    let lm = build_lm_graph(&params.config, &adapter_slots(adapters), tokens, LossSpec::None)?;
    let mut bind = Bindings::new();
    bind_model(&mut bind, params, adapters);
    let eval = lm.graph.forward(&bind)?;
    let hidden = eval.value(lm.hidden);
    let (n, d) = (hidden.rows(), hidden.cols());
    let mut pooled = vec![0f64; d];
    for i in 0..n {
        for j in 0..d {
            pooled[j] += hidden.data()[i * d + j] as f64;
        }
    }
    for p in pooled.iter_mut() {
        *p /= n as f64;
    }
    Ok(pooled)
}

/// Cross-entropy between the model's next-token distribution after `prompt`
/// and a target distribution `y` over the vocabulary.
pub fn loss_ce(
    params: &ModelParams,
    adapters: &[LoraAdapter],
    prompt: &[Token],
    y: &Tensor,
) -> Result<f32> {
    loss_ce_f64(params, adapters, prompt, y).map(|l| l as f32)
}

/// Same loss at the reduction's f64 precision; this is what the
/// finite-difference oracle and holdout curves probe.
pub fn loss_ce_f64(
    params: &ModelParams,
    adapters: &[LoraAdapter],
    prompt: &[Token],
    y: &Tensor,
) -> Result<f64> {
    validate_distribution(y, params.config.vocab_size)?;
    let lm = build_lm_graph(
        &params.config,
        &adapter_slots(adapters),
        prompt,
        LossSpec::AnswerAt { position: prompt.len() - 1 },
    )?;
    let mut bind = Bindings::new();
    bind_model(&mut bind, params, adapters);
    let y2 = Tensor::new(vec![1, y.numel()], y.data().to_vec())?;
    bind.bind("target_dist", &y2);
    let eval = lm.graph.forward(&bind)?;
    Ok(eval.scalar_f64(lm.loss.expect("loss node")))
}

pub fn validate_distribution(y: &Tensor, vocab: usize) -> Result<()> {
    if y.numel() != vocab {
        return Err(Error::ShapeMismatch {
            context: "target distribution".into(),
            detail: format!("{} entries vs vocab {}", y.numel(), vocab),
        });
    }
    let sum: f64 = y.data().iter().map(|&v| v as f64).sum();
    if (sum - 1.0).abs() > 1e-5 {
        return Err(Error::UnnormalizedTarget(sum));
    }
    Ok(())
}

// ── pretraining ──────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct PretrainHyper {
    pub max_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Evaluate the gate every this many steps (also drives early stop).
    pub check_every: usize,
    /// Stop early once gate accuracy reaches this level.
    pub stop_accuracy: f64,
}

impl Default for PretrainHyper {
    fn default() -> Self {
        PretrainHyper {
            max_steps: 3000,
            batch_size: 32,
            lr: 2e-3,
            seed: 1,
            check_every: 100,
            stop_accuracy: 0.99,
        }
    }
}

/// Convergence gate: answer-token accuracy over (prompt, answer) probes.
pub struct Gate<'a> {
    pub probes: &'a [(Vec<Token>, Token)],
    pub min_accuracy: f64,
}

/// Greedy answer accuracy over (prompt, answer) probes.
pub fn answer_accuracy(
    params: &ModelParams,
    adapters: &[LoraAdapter],
    probes: &[(Vec<Token>, Token)],
) -> Result<f64> {
    if probes.is_empty() {
        return Ok(0.0);
    }
    let hits = par::try_map_indexed(probes.len(), |i| {
        let (prompt, answer) = &probes[i];
        let dist = next_token_dist(params, adapters, prompt)?;
        Ok::<_, Error>(u32::from(argmax(&dist) == *answer as usize))
    })?;
    Ok(hits.iter().map(|&h| h as f64).sum::<f64>() / probes.len() as f64)
}

/// Language-model pretraining over rendered token sequences with Adam.
/// Deterministic for a fixed (sequences, hyper); 0 steps returns the input
/// unchanged. Fails with a diagnostic when the loss diverges or the gate is
/// missed after the step budget.
pub fn pretrain(
    params: &ModelParams,
    sequences: &[Vec<Token>],
    hyper: &PretrainHyper,
    gate: Option<Gate>,
) -> Result<ModelParams> {
    if sequences.is_empty() {
        return Err(Error::Corpus("pretraining corpus is empty".into()));
    }
    if hyper.max_steps == 0 {
        return Ok(params.clone());
    }
    let config = params.config.clone();
    let mut flat = params.flatten();
    let mut adam = Adam::new(flat.len(), hyper.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut current = params.clone();

    for step in 0..hyper.max_steps {
        let batch: Vec<usize> = (0..hyper.batch_size)
            .map(|_| rng.gen_range(0..sequences.len()))
            .collect();
        let grads = par::try_map_indexed(batch.len(), |bi| {
            sequence_grad(&current, &sequences[batch[bi]])
        })?;

        let mut total = vec![0f32; flat.len()];
        let mut loss_sum = 0f64;
        for (gvec, loss) in &grads {
            for (t, gv) in total.iter_mut().zip(gvec) {
                *t += gv;
            }
            loss_sum += *loss as f64;
        }
        let scale = 1.0 / hyper.batch_size as f32;
        for t in total.iter_mut() {
            *t *= scale;
        }
        let mean_loss = loss_sum / hyper.batch_size as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Divergence(format!(
                "pretraining loss non-finite at step {step}"
            )));
        }

        adam.step(&mut flat, &total);
        current = ModelParams::unflatten(&config, &flat)?;

        if let Some(gate) = &gate {
            if (step + 1) % hyper.check_every == 0 || step + 1 == hyper.max_steps {
                let acc = answer_accuracy(&current, &[], gate.probes)?;
                if acc >= hyper.stop_accuracy {
                    return Ok(current);
                }
            }
        }
    }

    if let Some(gate) = &gate {
        let acc = answer_accuracy(&current, &[], gate.probes)?;
        if acc < gate.min_accuracy {
            return Err(Error::Convergence(format!(
                "answer accuracy {:.1}% below gate {:.1}% after {} steps",
                acc * 100.0,
                gate.min_accuracy * 100.0,
                hyper.max_steps
            )));
        }
    }
    Ok(current)
}

/// Gradient of the full next-token loss for one sequence, flattened in
/// canonical parameter order; returns (grad, loss).
fn sequence_grad(params: &ModelParams, tokens: &[Token]) -> Result<(Vec<f32>, f32)> {
    let lm = build_lm_graph(&params.config, &[], tokens, LossSpec::NextTokenAll)?;
    let mut bind = Bindings::new();
    bind_model(&mut bind, params, &[]);
    let eval = lm.graph.forward(&bind)?;
    let loss_node = lm.loss.expect("loss node");
    let loss = eval.value(loss_node).item();
    let grads = lm.graph.backward(&eval, loss_node)?;
    let mut flat = Vec::with_capacity(params.param_count());
    for (name, t) in params.named_tensors() {
        match grads.get(&name) {
            Some(gt) => flat.extend_from_slice(gt.data()),
            None => flat.extend(std::iter::repeat(0.0).take(t.numel())),
        }
    }
    Ok((flat, loss))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 17,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            seq_len: 8,
            role: Role::Target,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let c = tiny_config();
        let a = init_model(&c, 7).unwrap();
        let b = init_model(&c, 7).unwrap();
        assert_eq!(a.flatten(), b.flatten());
        let other = init_model(&c, 8).unwrap();
        assert_ne!(a.embed.data(), other.embed.data());
    }

    #[test]
    fn param_count_matches_hand_formula() {
        let c = ModelConfig {
            vocab_size: 64,
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            seq_len: 12,
            role: Role::Proxy,
        };
        let p = init_model(&c, 1).unwrap();
        let (v, d, l, s) = (64usize, 32usize, 2usize, 12usize);
        // embed + pos + per-layer (2 LN pairs, 4 square projections, MLP) + final LN + head
        let per_layer = 2 * d + 4 * d * d + 2 * d + d * 4 * d + 4 * d + 4 * d * d + d;
        let expected = v * d + s * d + l * per_layer + 2 * d + d * v;
        assert_eq!(p.param_count(), expected);
        assert_eq!(p.flatten().len(), expected);
    }

    #[test]
    fn flatten_round_trips_bitwise() {
        let c = tiny_config();
        let p = init_model(&c, 3).unwrap();
        let flat = p.flatten();
        let q = ModelParams::unflatten(&c, &flat).unwrap();
        assert_eq!(p, q);
        assert_eq!(q.flatten(), flat);
    }

    #[test]
    fn forward_rows_are_distributions() {
        let c = tiny_config();
        let p = init_model(&c, 5).unwrap();
        let probs = forward_lm(&p, &[], &[1, 4, 9, 2]).unwrap();
        for i in 0..probs.rows() {
            let s: f64 = probs.data()[i * c.vocab_size..(i + 1) * c.vocab_size]
                .iter()
                .map(|&x| x as f64)
                .sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn fresh_adapters_do_not_change_logits() {
        let c = tiny_config();
        let p = init_model(&c, 5).unwrap();
        let adapters = attach_lora(&p, 4, &Projection::default_targets(), 9).unwrap();
        let base = forward_lm(&p, &[], &[3, 1, 2]).unwrap();
        let with = forward_lm(&p, &adapters, &[3, 1, 2]).unwrap();
        for (a, b) in base.data().iter().zip(with.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn lora_shapes_and_rank_limit() {
        let c = ModelConfig { d_model: 32, n_heads: 4, ..tiny_config() };
        let p = init_model(&c, 2).unwrap();
        let adapters = attach_lora(&p, 8, &Projection::default_targets(), 0).unwrap();
        assert_eq!(adapters.len(), 2 * 2);
        for ad in &adapters {
            assert_eq!(ad.a.shape(), &[32, 8]);
            assert_eq!(ad.b.shape(), &[8, 32]);
            assert!(ad.b.data().iter().all(|&x| x == 0.0));
        }
        assert!(matches!(
            attach_lora(&p, 9, &Projection::default_targets(), 0),
            Err(Error::RankTooLarge { .. })
        ));
    }

    #[test]
    fn merged_equals_attached_forward() {
        let c = tiny_config();
        let p = init_model(&c, 5).unwrap();
        let mut adapters = attach_lora(&p, 4, &Projection::default_targets(), 9).unwrap();
        // give B nonzero content so the adapters actually act
        for ad in adapters.iter_mut() {
            let r = ad.rank;
            let d = c.d_model;
            ad.b = Tensor::from_fn(vec![r, d], |i| ((i % 7) as f32 - 3.0) * 0.01);
        }
        let merged = merge_adapters(&p, &adapters);
        let via_adapters = forward_lm(&p, &adapters, &[3, 1, 2, 7]).unwrap();
        let via_merged = forward_lm(&merged, &[], &[3, 1, 2, 7]).unwrap();
        for (a, b) in via_adapters.data().iter().zip(via_merged.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn loss_ce_matches_recomputation_and_bounds() {
        let c = tiny_config();
        let p = init_model(&c, 11).unwrap();
        let prompt = vec![2u32, 5, 1];
        let v = c.vocab_size;

        // loss = sum_j y_j * (-log p_j); recompute from the emitted distribution
        let y = Tensor::from_fn(vec![v], |_| 1.0 / v as f32);
        let loss = loss_ce(&p, &[], &prompt, &y).unwrap();
        let dist = next_token_dist(&p, &[], &prompt).unwrap();
        let mut expect = 0f64;
        for &pj in &dist {
            expect += (1.0 / v as f64) * -(pj as f64).ln();
        }
        assert!((loss as f64 - expect).abs() < 1e-4);
        // uniform-target lower bound: loss >= log V - H(p)
        let h: f64 = dist.iter().map(|&pj| -(pj as f64) * (pj as f64).ln()).sum();
        assert!(loss as f64 >= (v as f64).ln() - h - 1e-6);

        let mut bad = vec![0.0; v];
        bad[0] = 0.7;
        assert!(matches!(
            loss_ce(&p, &[], &prompt, &Tensor::new(vec![v], bad).unwrap()),
            Err(Error::UnnormalizedTarget(_))
        ));
    }

    #[test]
    fn pretrain_zero_steps_is_identity() {
        let c = tiny_config();
        let p = init_model(&c, 4).unwrap();
        let hyper = PretrainHyper { max_steps: 0, ..Default::default() };
        let out = pretrain(&p, &[vec![1, 2, 3]], &hyper, None).unwrap();
        assert_eq!(p.flatten(), out.flatten());
    }

    #[test]
    fn pretrain_is_deterministic() {
        let c = tiny_config();
        let p = init_model(&c, 4).unwrap();
        let seqs: Vec<Vec<Token>> = vec![vec![1, 2, 3, 4], vec![5, 6, 7], vec![8, 9, 10, 11]];
        let hyper = PretrainHyper {
            max_steps: 5,
            batch_size: 4,
            lr: 1e-3,
            seed: 9,
            check_every: 10,
            stop_accuracy: 2.0,
        };
        let a = pretrain(&p, &seqs, &hyper, None).unwrap();
        let b = pretrain(&p, &seqs, &hyper, None).unwrap();
        assert_eq!(a.flatten(), b.flatten());
        assert_ne!(a.flatten(), p.flatten());
    }
}
