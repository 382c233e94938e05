//! LoRA and full-projection gradient extraction, multi-view averaging, and
//! proxy supervision pair collection.
//!
//! Canonical flattening order everywhere: layer index ascending, projection
//! short name ascending, A before B, row-major within a tensor. The decoder
//! and the pair dataset header both pin this via `FLATTEN_VERSION`.

use serde::{Deserialize, Serialize};

use crate::model::{
    self, adapter_slots, bind_model, build_lm_graph, LoraAdapter, LossSpec, ModelParams,
    Projection, Role, Token,
};
use crate::par;
use crate::tape::Bindings;
use crate::{Error, Result, Tensor};

pub const FLATTEN_VERSION: u32 = 1;

/// Shape contract shared by adapters, gradients, datasets, and the decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub d_model: usize,
    pub rank: usize,
    pub n_layers: usize,
    pub targets: Vec<Projection>,
}

impl AdapterSpec {
    pub fn from_adapters(d_model: usize, adapters: &[LoraAdapter]) -> Result<AdapterSpec> {
        if adapters.is_empty() {
            return Err(Error::Config("adapter set is empty".into()));
        }
        let rank = adapters[0].rank;
        let n_layers = adapters.iter().map(|a| a.layer).max().unwrap() + 1;
        let mut targets: Vec<Projection> = adapters
            .iter()
            .filter(|a| a.layer == 0)
            .map(|a| a.proj)
            .collect();
        model::sort_projections(&mut targets);
        Ok(AdapterSpec { d_model, rank, n_layers, targets })
    }

    /// (layer, projection) walk in canonical order.
    pub fn entries(&self) -> Vec<(usize, Projection)> {
        let mut targets = self.targets.clone();
        model::sort_projections(&mut targets);
        let mut out = Vec::with_capacity(self.n_layers * targets.len());
        for layer in 0..self.n_layers {
            for &p in &targets {
                out.push((layer, p));
            }
        }
        out
    }

    /// Flattened width of one (grad_A, grad_B) pair: 2 * d_model * rank.
    pub fn lora_entry_width(&self) -> usize {
        2 * self.d_model * self.rank
    }

    pub fn full_entry_width(&self) -> usize {
        self.d_model * self.d_model
    }

    pub fn lora_flat_len(&self) -> usize {
        self.entries().len() * self.lora_entry_width()
    }

    pub fn full_flat_len(&self) -> usize {
        self.entries().len() * self.full_entry_width()
    }

    /// Stable tag recorded in dataset and decoder headers.
    pub fn tag(&self) -> String {
        let projs: Vec<&str> = self.targets.iter().map(|p| p.short()).collect();
        format!(
            "d{}r{}l{}:{}#v{}",
            self.d_model,
            self.rank,
            self.n_layers,
            projs.join(","),
            FLATTEN_VERSION
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraGradEntry {
    pub layer: usize,
    pub proj: Projection,
    pub grad_a: Tensor,
    pub grad_b: Tensor,
}

/// Gradients w.r.t. (A, B) per adapted projection, plus the view count that
/// produced them (1 for a single extraction, N after averaging).
#[derive(Debug, Clone, PartialEq)]
pub struct LoraGradient {
    pub entries: Vec<LoraGradEntry>,
    pub views: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FullGradEntry {
    pub layer: usize,
    pub proj: Projection,
    pub grad_w: Tensor,
}

/// Gradients w.r.t. the base projection weights themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct FullGradient {
    pub entries: Vec<FullGradEntry>,
}

impl LoraGradient {
    pub fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::new();
        for e in &self.entries {
            out.extend_from_slice(e.grad_a.data());
            out.extend_from_slice(e.grad_b.data());
        }
        out
    }

    pub fn unflatten(spec: &AdapterSpec, flat: &[f32], views: usize) -> Result<LoraGradient> {
        if flat.len() != spec.lora_flat_len() {
            return Err(Error::ShapeMismatch {
                context: "LoraGradient::unflatten".into(),
                detail: format!("{} values vs expected {}", flat.len(), spec.lora_flat_len()),
            });
        }
        let (d, r) = (spec.d_model, spec.rank);
        let mut entries = Vec::new();
        let mut off = 0;
        for (layer, proj) in spec.entries() {
            let grad_a = Tensor::new(vec![d, r], flat[off..off + d * r].to_vec())?;
            off += d * r;
            let grad_b = Tensor::new(vec![r, d], flat[off..off + r * d].to_vec())?;
            off += r * d;
            entries.push(LoraGradEntry { layer, proj, grad_a, grad_b });
        }
        Ok(LoraGradient { entries, views })
    }

    pub fn norm(&self) -> f64 {
        flat_norm(&self.flatten())
    }
}

impl FullGradient {
    pub fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::new();
        for e in &self.entries {
            out.extend_from_slice(e.grad_w.data());
        }
        out
    }

    pub fn unflatten(spec: &AdapterSpec, flat: &[f32]) -> Result<FullGradient> {
        if flat.len() != spec.full_flat_len() {
            return Err(Error::ShapeMismatch {
                context: "FullGradient::unflatten".into(),
                detail: format!("{} values vs expected {}", flat.len(), spec.full_flat_len()),
            });
        }
        let d = spec.d_model;
        let mut entries = Vec::new();
        let mut off = 0;
        for (layer, proj) in spec.entries() {
            let grad_w = Tensor::new(vec![d, d], flat[off..off + d * d].to_vec())?;
            off += d * d;
            entries.push(FullGradEntry { layer, proj, grad_w });
        }
        Ok(FullGradient { entries })
    }

    pub fn norm(&self) -> f64 {
        flat_norm(&self.flatten())
    }

    /// Entries restricted to layers below `n_layers` (common-support
    /// comparisons between models of different depth).
    pub fn restrict_layers(&self, n_layers: usize) -> FullGradient {
        FullGradient {
            entries: self
                .entries
                .iter()
                .filter(|e| e.layer < n_layers)
                .cloned()
                .collect(),
        }
    }
}

pub fn flat_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
}

/// Euclidean distance between two flattened gradients of equal length.
pub fn flat_dist(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Reverse-mode gradients w.r.t. adapter tensors (A, B) only; base params
/// receive no update and no entry in the result.
pub fn lora_gradient(
    params: &ModelParams,
    adapters: &[LoraAdapter],
    prompt: &[Token],
    y: &Tensor,
) -> Result<LoraGradient> {
    model::validate_distribution(y, params.config.vocab_size)?;
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
    let loss_node = lm.loss.expect("loss node");
    let grads = lm.graph.backward(&eval, loss_node)?;

    let mut sorted: Vec<&LoraAdapter> = adapters.iter().collect();
    sorted.sort_by_key(|a| (a.layer, a.proj.short()));
    let mut entries = Vec::with_capacity(sorted.len());
    for ad in sorted {
        let ga = grads
            .get(&ad.a_input_name())
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(ad.a.shape().to_vec()));
        let gb = grads
            .get(&ad.b_input_name())
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(ad.b.shape().to_vec()));
        entries.push(LoraGradEntry { layer: ad.layer, proj: ad.proj, grad_a: ga, grad_b: gb });
    }
    Ok(LoraGradient { entries, views: 1 })
}

/// Exact gradient of the designated base projection weights, with no
/// adapters in the differentiated path.
pub fn full_gradient(
    params: &ModelParams,
    prompt: &[Token],
    y: &Tensor,
    targets: &[Projection],
) -> Result<FullGradient> {
    model::validate_distribution(y, params.config.vocab_size)?;
    let lm = build_lm_graph(
        &params.config,
        &[],
        prompt,
        LossSpec::AnswerAt { position: prompt.len() - 1 },
    )?;
    let mut bind = Bindings::new();
    bind_model(&mut bind, params, &[]);
    let y2 = Tensor::new(vec![1, y.numel()], y.data().to_vec())?;
    bind.bind("target_dist", &y2);
    let eval = lm.graph.forward(&bind)?;
    let loss_node = lm.loss.expect("loss node");
    let grads = lm.graph.backward(&eval, loss_node)?;

    let mut projs = targets.to_vec();
    model::sort_projections(&mut projs);
    let mut entries = Vec::new();
    for layer in 0..params.config.n_layers {
        for &proj in &projs {
            let name = proj.param_name(layer);
            let gw = grads
                .get(&name)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(vec![params.config.d_model; 2]));
            entries.push(FullGradEntry { layer, proj, grad_w: gw });
        }
    }
    Ok(FullGradient { entries })
}

/// Arithmetic mean per coordinate across views.
pub fn average_views(grads: &[LoraGradient]) -> Result<LoraGradient> {
    let first = grads
        .first()
        .ok_or_else(|| Error::Config("average_views: empty gradient list".into()))?;
    let n = grads.len();
    let mut entries = Vec::with_capacity(first.entries.len());
    for (ei, e0) in first.entries.iter().enumerate() {
        let mut acc_a = vec![0f64; e0.grad_a.numel()];
        let mut acc_b = vec![0f64; e0.grad_b.numel()];
        for g in grads {
            let e = &g.entries[ei];
            if e.layer != e0.layer
                || e.proj != e0.proj
                || e.grad_a.shape() != e0.grad_a.shape()
                || e.grad_b.shape() != e0.grad_b.shape()
            {
                return Err(Error::ShapeMismatch {
                    context: "average_views".into(),
                    detail: format!("entry {ei} differs across views"),
                });
            }
            for (acc, &v) in acc_a.iter_mut().zip(e.grad_a.data()) {
                *acc += v as f64;
            }
            for (acc, &v) in acc_b.iter_mut().zip(e.grad_b.data()) {
                *acc += v as f64;
            }
        }
        let grad_a = Tensor::new(
            e0.grad_a.shape().to_vec(),
            acc_a.iter().map(|&v| (v / n as f64) as f32).collect(),
        )?;
        let grad_b = Tensor::new(
            e0.grad_b.shape().to_vec(),
            acc_b.iter().map(|&v| (v / n as f64) as f32).collect(),
        )?;
        entries.push(LoraGradEntry { layer: e0.layer, proj: e0.proj, grad_a, grad_b });
    }
    Ok(LoraGradient { entries, views: n })
}

// ── supervision pairs ────────────────────────────────────────────────

/// One (prompt, unlearning label) example for pair collection.
#[derive(Debug, Clone)]
pub struct PairExample {
    pub example_id: usize,
    pub prompt: Vec<Token>,
    pub label: Tensor,
}

#[derive(Debug, Clone)]
pub struct GradientPair {
    pub example_id: usize,
    pub lora: LoraGradient,
    pub full: FullGradient,
    pub source: Role,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDatasetHeader {
    pub model_config_hash: String,
    pub adapter_spec: AdapterSpec,
    pub flatten_version: u32,
    pub pair_count: usize,
    pub source: Role,
    pub example_ids: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct GradientPairDataset {
    pub header: PairDatasetHeader,
    pub pairs: Vec<GradientPair>,
}

impl GradientPairDataset {
    /// Row-major stacks of flattened gradients: (lora [n, lw], full [n, fw]).
    pub fn stacked(&self) -> (Vec<f32>, Vec<f32>) {
        let mut lora = Vec::new();
        let mut full = Vec::new();
        for p in &self.pairs {
            lora.extend(p.lora.flatten());
            full.extend(p.full.flatten());
        }
        (lora, full)
    }

    pub fn from_stacked(
        header: PairDatasetHeader,
        lora_flat: &[f32],
        full_flat: &[f32],
    ) -> Result<GradientPairDataset> {
        let spec = &header.adapter_spec;
        let (lw, fw) = (spec.lora_flat_len(), spec.full_flat_len());
        let n = header.pair_count;
        if lora_flat.len() != n * lw || full_flat.len() != n * fw {
            return Err(Error::ShapeMismatch {
                context: "GradientPairDataset::from_stacked".into(),
                detail: format!(
                    "lora {} vs {}, full {} vs {}",
                    lora_flat.len(),
                    n * lw,
                    full_flat.len(),
                    n * fw
                ),
            });
        }
        let mut pairs = Vec::with_capacity(n);
        for i in 0..n {
            let lora = LoraGradient::unflatten(spec, &lora_flat[i * lw..(i + 1) * lw], 1)?;
            let full = FullGradient::unflatten(spec, &full_flat[i * fw..(i + 1) * fw])?;
            pairs.push(GradientPair {
                example_id: header.example_ids[i],
                lora,
                full,
                source: header.source,
            });
        }
        Ok(GradientPairDataset { header, pairs })
    }
}

/// Both gradient sides per example at an identical model state, in stable
/// example order regardless of worker scheduling.
pub fn collect_pairs(
    params: &ModelParams,
    adapters: &[LoraAdapter],
    examples: &[PairExample],
    limit: usize,
) -> Result<GradientPairDataset> {
    if limit > examples.len() {
        return Err(Error::Config(format!(
            "collect limit {limit} exceeds example pool {}",
            examples.len()
        )));
    }
    let spec = AdapterSpec::from_adapters(params.config.d_model, adapters)?;
    let taken = &examples[..limit];
    let pairs = par::try_map_indexed(taken.len(), |i| {
        let ex = &taken[i];
        let lora = lora_gradient(params, adapters, &ex.prompt, &ex.label).map_err(|e| {
            Error::NonFinite(format!("lora gradient for example {}: {e}", ex.example_id))
        })?;
        let full =
            full_gradient(params, &ex.prompt, &ex.label, &spec.targets).map_err(|e| {
                Error::NonFinite(format!("full gradient for example {}: {e}", ex.example_id))
            })?;
        if !lora.flatten().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "lora gradient for example {}",
                ex.example_id
            )));
        }
        if !full.flatten().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "full gradient for example {}",
                ex.example_id
            )));
        }
        Ok(GradientPair { example_id: ex.example_id, lora, full, source: params.config.role })
    })?;
    let header = PairDatasetHeader {
        model_config_hash: params.config.hash(),
        adapter_spec: spec,
        flatten_version: FLATTEN_VERSION,
        pair_count: pairs.len(),
        source: params.config.role,
        example_ids: taken.iter().map(|e| e.example_id).collect(),
    };
    Ok(GradientPairDataset { header, pairs })
}
