//! Forgetting and utility metrics: unlearning success rate, general utility
//! retention, relearning attack precision, behavioral alignment between
//! model snapshots, and the empirical cross-model transfer bound audit.

use serde::{Deserialize, Serialize};

use crate::corpus::{self, Corpus, Fact};
use crate::decoder::{decode, DecoderParams};
use crate::gradients::{flat_dist, full_gradient, lora_gradient, PairExample};
use crate::model::{
    self, argmax, next_token_dist, LoraAdapter, ModelParams, Projection, Token,
};
use crate::optim::Adam;
use crate::par;
use crate::tape::Bindings;
use crate::{Error, Result, Tensor};

// ── USR ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UsrResult {
    /// 100 * flipped / valid.
    pub percent: f64,
    pub flipped: usize,
    pub valid: usize,
    /// Targets the before-model already answered incorrectly (not counted).
    pub excluded: usize,
}

/// Unlearning success rate: fraction of targets whose greedy answer on the
/// canonical prompt changed between the two snapshots.
pub fn usr(
    model_before: &ModelParams,
    model_after: &ModelParams,
    targets: &[&Fact],
) -> Result<UsrResult> {
    if targets.is_empty() {
        return Err(Error::Config("usr over empty target set".into()));
    }
    let rows = par::try_map_indexed(targets.len(), |i| {
        let fact = targets[i];
        let pre = argmax(&next_token_dist(model_before, &[], &fact.prompt)?);
        let post = argmax(&next_token_dist(model_after, &[], &fact.prompt)?);
        Ok::<_, Error>((pre, post))
    })?;
    let mut flipped = 0;
    let mut valid = 0;
    let mut excluded = 0;
    for (i, (pre, post)) in rows.iter().enumerate() {
        if *pre != targets[i].answer as usize {
            excluded += 1;
            continue;
        }
        valid += 1;
        if pre != post {
            flipped += 1;
        }
    }
    let percent = if valid == 0 { 0.0 } else { 100.0 * flipped as f64 / valid as f64 };
    Ok(UsrResult { percent, flipped, valid, excluded })
}

// ── GUR ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GurResult {
    pub after_percent: f64,
    pub before_percent: f64,
    /// before - after, in accuracy points.
    pub drop_points: f64,
}

/// Greedy-argmax accuracy on retain facts, reported next to the
/// pre-unlearning accuracy so the drop is explicit.
pub fn gur(
    model_after: &ModelParams,
    retain: &[&Fact],
    model_before: &ModelParams,
) -> Result<GurResult> {
    if retain.is_empty() {
        return Err(Error::Config("gur over empty retain set".into()));
    }
    let probes: Vec<(Vec<Token>, Token)> =
        retain.iter().map(|f| (f.prompt.clone(), f.answer)).collect();
    let after = model::answer_accuracy(model_after, &[], &probes)? * 100.0;
    let before = model::answer_accuracy(model_before, &[], &probes)? * 100.0;
    Ok(GurResult { after_percent: after, before_percent: before, drop_points: before - after })
}

// ── RAP ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RapAttack {
    /// Fine-tuning steps per target.
    pub steps: usize,
    pub lr: f64,
    /// Paraphrase count for the attack set.
    pub views: usize,
    pub seed: u64,
}

impl Default for RapAttack {
    fn default() -> Self {
        RapAttack { steps: 20, lr: 0.01, views: 5, seed: 1 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RapResult {
    /// 100 * recovered / total; lower is better.
    pub percent: f64,
    pub recovered: usize,
    pub total: usize,
}

/// Relearning attack: per target, fine-tune a copy of the unlearned model on
/// a small paraphrase set labeled with the canonical answer, then test
/// whether the canonical prompt again yields the original answer. Attacks
/// update the adapted projection weights directly; each target attacks its
/// own clone. A diverging attack counts as recovered (worst case).
pub fn rap(
    model_after: &ModelParams,
    targets: &[&Fact],
    corp: &Corpus,
    projections: &[Projection],
    attack: &RapAttack,
) -> Result<RapResult> {
    if targets.is_empty() {
        return Err(Error::Config("rap over empty target set".into()));
    }
    if attack.views == 0 {
        return Err(Error::Config("rap attack needs views >= 1".into()));
    }
    let recovered_flags = par::try_map_indexed(targets.len(), |i| {
        let fact = targets[i];
        let recovered =
            attack_one(model_after, fact, corp, projections, attack).unwrap_or(true);
        Ok::<_, Error>(recovered)
    })?;
    let recovered = recovered_flags.iter().filter(|&&r| r).count();
    let total = targets.len();
    Ok(RapResult { percent: 100.0 * recovered as f64 / total as f64, recovered, total })
}

fn attack_one(
    model_after: &ModelParams,
    fact: &Fact,
    corp: &Corpus,
    projections: &[Projection],
    attack: &RapAttack,
) -> Result<bool> {
    let paraphrases =
        corpus::generate_paraphrases(&corp.vocab, fact, attack.views, attack.seed)?;
    let mut onehot = vec![0f32; model_after.config.vocab_size];
    onehot[fact.answer as usize] = 1.0;
    let label = Tensor::new(vec![model_after.config.vocab_size], onehot)?;

    let mut params = model_after.clone();
    let names = projection_names(&params, projections);
    let widths: Vec<usize> = names.iter().map(|n| params.tensor(n).unwrap().numel()).collect();
    let total_width: usize = widths.iter().sum();
    let mut adam = Adam::new(total_width, attack.lr);

    for _step in 0..attack.steps {
        // mean gradient over the paraphrase set w.r.t. the attacked projections
        let mut grad_acc = vec![0f64; total_width];
        for prompt in &paraphrases.prompts {
            let g = projection_grads(&params, prompt, &label, &names)?;
            for (acc, v) in grad_acc.iter_mut().zip(&g) {
                *acc += *v as f64;
            }
        }
        let scale = 1.0 / paraphrases.prompts.len() as f64;
        let grads: Vec<f32> = grad_acc.iter().map(|&v| (v * scale) as f32).collect();
        if grads.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("rap attack on fact {}", fact.id)));
        }
        let mut flat = Vec::with_capacity(total_width);
        for n in &names {
            flat.extend_from_slice(params.tensor(n).unwrap().data());
        }
        adam.step(&mut flat, &grads);
        let mut off = 0;
        for (n, w) in names.iter().zip(&widths) {
            params
                .tensor_mut(n)
                .unwrap()
                .data_mut()
                .copy_from_slice(&flat[off..off + w]);
            off += w;
        }
    }

    let dist = next_token_dist(&params, &[], &fact.prompt)?;
    Ok(argmax(&dist) == fact.answer as usize)
}

fn projection_names(params: &ModelParams, projections: &[Projection]) -> Vec<String> {
    let mut projs = projections.to_vec();
    model::sort_projections(&mut projs);
    let mut names = Vec::new();
    for layer in 0..params.config.n_layers {
        for p in &projs {
            names.push(p.param_name(layer));
        }
    }
    names
}

/// Flattened CE gradient w.r.t. the named projection tensors, in name order.
fn projection_grads(
    params: &ModelParams,
    prompt: &[Token],
    label: &Tensor,
    names: &[String],
) -> Result<Vec<f32>> {
    let lm = model::build_lm_graph(
        &params.config,
        &[],
        prompt,
        model::LossSpec::AnswerAt { position: prompt.len() - 1 },
    )?;
    let mut bind = Bindings::new();
    model::bind_model(&mut bind, params, &[]);
    let label2 = Tensor::new(vec![1, label.numel()], label.data().to_vec())?;
    bind.bind("target_dist", &label2);
    let eval = lm.graph.forward(&bind)?;
    let grads = lm.graph.backward(&eval, lm.loss.expect("loss"))?;
    let mut out = Vec::new();
    for n in names {
        match grads.get(n) {
            Some(g) => out.extend_from_slice(g.data()),
            None => out.extend(std::iter::repeat(0.0).take(params.tensor(n).unwrap().numel())),
        }
    }
    Ok(out)
}

// ── MIA ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MiaResult {
    /// Mean cosine similarity of next-token distributions (higher = closer).
    pub mean_cosine: f64,
    /// Mean total-variation distance (lower = closer).
    pub mean_tv: f64,
    pub probes: usize,
}

/// Behavioral alignment between two snapshots on probe prompts, reported as
/// both a similarity and a distance so the direction is never ambiguous.
pub fn mia(
    model_before: &ModelParams,
    model_after: &ModelParams,
    probes: &[Vec<Token>],
) -> Result<MiaResult> {
    if probes.is_empty() {
        return Err(Error::Config("mia over empty probe set".into()));
    }
    let rows = par::try_map_indexed(probes.len(), |i| {
        let p = next_token_dist(model_before, &[], &probes[i])?;
        let q = next_token_dist(model_after, &[], &probes[i])?;
        Ok::<_, Error>((dist_cosine(&p, &q), dist_tv(&p, &q)))
    })?;
    let n = rows.len() as f64;
    Ok(MiaResult {
        mean_cosine: rows.iter().map(|r| r.0).sum::<f64>() / n,
        mean_tv: rows.iter().map(|r| r.1).sum::<f64>() / n,
        probes: rows.len(),
    })
}

pub fn dist_cosine(p: &[f32], q: &[f32]) -> f64 {
    let dot: f64 = p.iter().zip(q).map(|(&a, &b)| a as f64 * b as f64).sum();
    let np: f64 = p.iter().map(|&a| a as f64 * a as f64).sum::<f64>().sqrt();
    let nq: f64 = q.iter().map(|&a| a as f64 * a as f64).sum::<f64>().sqrt();
    if np == 0.0 || nq == 0.0 {
        return 0.0;
    }
    dot / (np * nq)
}

pub fn dist_tv(p: &[f32], q: &[f32]) -> f64 {
    0.5 * p
        .iter()
        .zip(q)
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .sum::<f64>()
}

// ── consolidated report ──────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetailRow {
    /// "target", "retain", or "probe".
    pub kind: String,
    pub id: usize,
    pub pre_argmax: usize,
    pub post_argmax: usize,
    pub pre_prob: f64,
    pub post_prob: f64,
    /// Flip (targets), correctness change (retain), or 0/1 unused (probes).
    pub changed: bool,
}

/// One run's metric bundle; serialized as the structured-text report with a
/// CSV of the detail rows beside it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub usr: f64,
    pub usr_flipped: usize,
    pub usr_valid: usize,
    pub usr_excluded: usize,
    pub gur_after: f64,
    pub gur_before: f64,
    pub gur_drop: f64,
    pub rap: f64,
    pub rap_recovered: usize,
    pub rap_total: usize,
    pub mia_cosine: f64,
    pub mia_tv: f64,
    pub probes: usize,
    pub detail: Vec<DetailRow>,
    pub manifest_hash: String,
}

// ── transfer bound audit ─────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleSource {
    Proxy,
    Target,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prop1Sample {
    pub example_id: usize,
    pub source: SampleSource,
    /// |decoded - G_target| (target-set samples only).
    pub lhs: Option<f64>,
    /// |decoded - G_proxy|.
    pub term_a: f64,
    /// |G_proxy - G_target| (target-set samples only).
    pub term_c: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prop1Audit {
    pub samples: Vec<Prop1Sample>,
    pub e_tar_lhs: f64,
    pub e_pro_term_a: f64,
    pub e_tar_term_a: f64,
    /// max(0, E_tar[term_a] - E_pro[term_a]): one-sided empirical surrogate
    /// for the distribution discrepancy term.
    pub dis_hat: f64,
    pub e_tar_term_c: f64,
    pub bound_satisfied: bool,
    /// Layer count of the common (layer, projection) support the norms are
    /// computed over.
    pub common_layers: usize,
}

/// Empirical audit of the cross-model reconstruction bound. All norms are
/// computed over the common (layer, projection) support of the two models.
/// For each sample, the LoRA gradient is extracted from the model its sample
/// set belongs to, decoded once, and compared against both models' full
/// gradients, so the per-sample triangle inequality is exact norm algebra.
pub fn audit_prop1(
    dec: &DecoderParams,
    proxy: &ModelParams,
    proxy_adapters: &[LoraAdapter],
    target: &ModelParams,
    target_adapters: &[LoraAdapter],
    proxy_samples: &[PairExample],
    target_samples: &[PairExample],
) -> Result<Prop1Audit> {
    if proxy.config.d_model != target.config.d_model {
        return Err(Error::Incompatible(format!(
            "proxy d_model {} vs target d_model {}",
            proxy.config.d_model, target.config.d_model
        )));
    }
    let common_layers = proxy.config.n_layers.min(target.config.n_layers);
    let targets = dec.spec.targets.clone();

    let mut samples = Vec::new();
    for ex in proxy_samples {
        let lora = lora_gradient(proxy, proxy_adapters, &ex.prompt, &ex.label)?;
        let lora_common = restrict_lora(lora, common_layers);
        let decoded = decode(dec, &lora_common)?;
        let g_pro = full_gradient(proxy, &ex.prompt, &ex.label, &targets)?
            .restrict_layers(common_layers);
        let term_a = flat_dist(&decoded.flatten(), &g_pro.flatten());
        samples.push(Prop1Sample {
            example_id: ex.example_id,
            source: SampleSource::Proxy,
            lhs: None,
            term_a,
            term_c: None,
        });
    }
    for ex in target_samples {
        let lora = lora_gradient(target, target_adapters, &ex.prompt, &ex.label)?;
        let lora_common = restrict_lora(lora, common_layers);
        let decoded = decode(dec, &lora_common)?;
        let g_tar = full_gradient(target, &ex.prompt, &ex.label, &targets)?
            .restrict_layers(common_layers);
        let g_pro = full_gradient(proxy, &ex.prompt, &ex.label, &targets)?
            .restrict_layers(common_layers);
        let dec_flat = decoded.flatten();
        let lhs = flat_dist(&dec_flat, &g_tar.flatten());
        let term_a = flat_dist(&dec_flat, &g_pro.flatten());
        let term_c = flat_dist(&g_pro.flatten(), &g_tar.flatten());
        samples.push(Prop1Sample {
            example_id: ex.example_id,
            source: SampleSource::Target,
            lhs: Some(lhs),
            term_a,
            term_c: Some(term_c),
        });
    }

    let mean = |it: Vec<f64>| -> f64 {
        if it.is_empty() { 0.0 } else { it.iter().sum::<f64>() / it.len() as f64 }
    };
    let e_pro_term_a = mean(
        samples
            .iter()
            .filter(|s| s.source == SampleSource::Proxy)
            .map(|s| s.term_a)
            .collect(),
    );
    let tar_rows: Vec<&Prop1Sample> = samples
        .iter()
        .filter(|s| s.source == SampleSource::Target)
        .collect();
    let e_tar_lhs = mean(tar_rows.iter().map(|s| s.lhs.unwrap()).collect());
    let e_tar_term_a = mean(tar_rows.iter().map(|s| s.term_a).collect());
    let e_tar_term_c = mean(tar_rows.iter().map(|s| s.term_c.unwrap()).collect());
    let dis_hat = (e_tar_term_a - e_pro_term_a).max(0.0);
    let bound_satisfied = e_tar_lhs <= e_pro_term_a + dis_hat + e_tar_term_c + 1e-5;

    Ok(Prop1Audit {
        samples,
        e_tar_lhs,
        e_pro_term_a,
        e_tar_term_a,
        dis_hat,
        e_tar_term_c,
        bound_satisfied,
        common_layers,
    })
}

fn restrict_lora(
    lora: crate::gradients::LoraGradient,
    common_layers: usize,
) -> crate::gradients::LoraGradient {
    crate::gradients::LoraGradient {
        entries: lora
            .entries
            .into_iter()
            .filter(|e| e.layer < common_layers)
            .collect(),
        views: lora.views,
    }
}
