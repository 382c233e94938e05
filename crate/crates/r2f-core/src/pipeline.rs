//! Stage drivers behind the CLI subcommands: pretrain both models, collect
//! supervision pairs, train the decoder, unlearn, evaluate, sweep, and run
//! the transfer-bound audit. Every command is a pure function of (config,
//! input files, seeds): re-running reproduces byte-identical outputs, so no
//! timestamps or durations are ever persisted.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::container::{sha_hex, write_atomic, Container};
use crate::corpus::{self, Corpus};
use crate::decoder::{self, DecoderHyper, DecoderParams};
use crate::eval::{self, DetailRow, MetricsReport, Prop1Audit, RapAttack};
use crate::gradients::{
    self, average_views, AdapterSpec, GradientPair, GradientPairDataset, PairDatasetHeader,
    PairExample, FLATTEN_VERSION,
};
use crate::model::{
    self, argmax, attach_lora, next_token_dist, LoraAdapter, ModelConfig, ModelParams,
    PretrainHyper, Role,
};
use crate::unlearn::{self, EtaSweepConfig, UnlearnMethod, UnlearnRequest};
use crate::{Error, Result, Tensor};

pub fn proxy_path(out: &Path) -> PathBuf {
    out.join("proxy.r2f")
}
pub fn target_path(out: &Path) -> PathBuf {
    out.join("target.r2f")
}
pub fn corpus_path(out: &Path) -> PathBuf {
    out.join("corpus.jsonl")
}
pub fn pairs_path(out: &Path) -> PathBuf {
    out.join("pairs.r2f")
}
pub fn decoder_path(out: &Path) -> PathBuf {
    out.join("decoder.r2f")
}
pub fn curve_path(out: &Path) -> PathBuf {
    out.join("decoder_curve.csv")
}
pub fn unlearned_path(out: &Path, method: UnlearnMethod) -> PathBuf {
    out.join(format!("unlearned_{}.r2f", method.as_str()))
}
pub fn manifest_path(out: &Path, method: UnlearnMethod) -> PathBuf {
    out.join(format!("manifest_{}.json", method.as_str()))
}
pub fn metrics_path(out: &Path, tag: &str) -> PathBuf {
    out.join(format!("metrics_{tag}.json"))
}
pub fn metrics_detail_path(out: &Path, tag: &str) -> PathBuf {
    out.join(format!("metrics_detail_{tag}.csv"))
}
pub fn sweep_path(out: &Path, axis: &str) -> PathBuf {
    out.join(format!("sweep_{axis}.csv"))
}
pub fn sweep_detail_path(out: &Path, axis: &str) -> PathBuf {
    out.join(format!("sweep_{axis}_detail.csv"))
}
pub fn audit_path(out: &Path) -> PathBuf {
    out.join("prop1_audit.json")
}

// ── checkpoint adapters ──────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    kind: String,
    config: ModelConfig,
    config_hash: String,
}

pub fn save_model(params: &ModelParams, path: &Path) -> Result<()> {
    let meta = ModelMeta {
        kind: "model".into(),
        config: params.config.clone(),
        config_hash: params.config.hash(),
    };
    let mut c = Container::new(serde_json::to_string(&meta)?);
    for (name, t) in params.named_tensors() {
        c.push(name, t.clone())?;
    }
    c.write_atomic(path)
}

pub fn load_model(path: &Path) -> Result<ModelParams> {
    let c = Container::read(path)?;
    let meta: ModelMeta = serde_json::from_str(&c.meta)?;
    if meta.kind != "model" {
        return Err(Error::Incompatible(format!(
            "{} is a '{}' artifact, expected a model",
            path.display(),
            meta.kind
        )));
    }
    let mut flat = Vec::new();
    for (name, shape) in model::param_layout(&meta.config) {
        let t = c.require(&name)?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Incompatible(format!(
                "entry '{name}' has shape {:?}, expected {:?}",
                t.shape(),
                shape
            )));
        }
        flat.extend_from_slice(t.data());
    }
    ModelParams::unflatten(&meta.config, &flat)
}

#[derive(Serialize, Deserialize)]
struct DecoderMeta {
    kind: String,
    spec: AdapterSpec,
    model_config_hash: String,
    flatten_version: u32,
    onehot_width: usize,
    hidden: usize,
    input_scale: f64,
    seed: u64,
}

pub fn save_decoder(dec: &DecoderParams, path: &Path) -> Result<()> {
    let meta = DecoderMeta {
        kind: "decoder".into(),
        spec: dec.spec.clone(),
        model_config_hash: dec.model_config_hash.clone(),
        flatten_version: dec.flatten_version,
        onehot_width: dec.onehot_width,
        hidden: dec.hidden,
        input_scale: dec.input_scale,
        seed: dec.seed,
    };
    let mut c = Container::new(serde_json::to_string(&meta)?);
    for d in &dec.decoders {
        let p = d.proj.short();
        c.push(format!("{p}.w1"), d.w1.clone())?;
        c.push(format!("{p}.b1"), d.b1.clone())?;
        c.push(format!("{p}.w2"), d.w2.clone())?;
        c.push(format!("{p}.b2"), d.b2.clone())?;
        c.push(format!("{p}.w3"), d.w3.clone())?;
        c.push(format!("{p}.b3"), d.b3.clone())?;
    }
    c.write_atomic(path)
}

pub fn load_decoder(path: &Path) -> Result<DecoderParams> {
    let c = Container::read(path)?;
    let meta: DecoderMeta = serde_json::from_str(&c.meta)?;
    if meta.kind != "decoder" {
        return Err(Error::Incompatible(format!(
            "{} is a '{}' artifact, expected a decoder",
            path.display(),
            meta.kind
        )));
    }
    let mut dec = decoder::zero_decoder(&meta.spec, &meta.model_config_hash, meta.hidden);
    dec.onehot_width = meta.onehot_width;
    dec.input_scale = meta.input_scale;
    dec.seed = meta.seed;
    dec.flatten_version = meta.flatten_version;
    for d in dec.decoders.iter_mut() {
        let p = d.proj.short();
        d.w1 = c.require(&format!("{p}.w1"))?.clone();
        d.b1 = c.require(&format!("{p}.b1"))?.clone();
        d.w2 = c.require(&format!("{p}.w2"))?.clone();
        d.b2 = c.require(&format!("{p}.b2"))?.clone();
        d.w3 = c.require(&format!("{p}.w3"))?.clone();
        d.b3 = c.require(&format!("{p}.b3"))?.clone();
    }
    Ok(dec)
}

#[derive(Serialize, Deserialize)]
struct PairsMeta {
    kind: String,
    header: PairDatasetHeader,
}

pub fn save_pairs(ds: &GradientPairDataset, path: &Path) -> Result<()> {
    let meta = PairsMeta { kind: "pairs".into(), header: ds.header.clone() };
    let mut c = Container::new(serde_json::to_string(&meta)?);
    let (lora, full) = ds.stacked();
    let n = ds.header.pair_count;
    let lw = ds.header.adapter_spec.lora_flat_len();
    let fw = ds.header.adapter_spec.full_flat_len();
    c.push("lora", Tensor::new(vec![n, lw], lora)?)?;
    c.push("full", Tensor::new(vec![n, fw], full)?)?;
    c.write_atomic(path)
}

pub fn load_pairs(path: &Path) -> Result<GradientPairDataset> {
    let c = Container::read(path)?;
    let meta: PairsMeta = serde_json::from_str(&c.meta)?;
    if meta.kind != "pairs" {
        return Err(Error::Incompatible(format!(
            "{} is a '{}' artifact, expected a pair dataset",
            path.display(),
            meta.kind
        )));
    }
    let lora = c.require("lora")?;
    let full = c.require("full")?;
    GradientPairDataset::from_stacked(meta.header, lora.data(), full.data())
}

// ── shared stage helpers ─────────────────────────────────────────────

pub fn build_corpus(cfg: &RunConfig) -> Result<Corpus> {
    corpus::build_synthetic_corpus(
        cfg.corpus.n_facts,
        cfg.corpus.n_relations,
        cfg.corpus.target_fraction,
        cfg.model.vocab_size,
        cfg.corpus.seed,
    )
}

fn expect_config(loaded: &ModelParams, want: &ModelConfig, what: &str) -> Result<()> {
    if loaded.config != *want {
        return Err(Error::Incompatible(format!(
            "{what} checkpoint config {} does not match run config {}",
            loaded.config.hash(),
            want.hash()
        )));
    }
    Ok(())
}

/// Deterministic held-out example pool: all (fact, template) prompts with
/// the run's unlearning label, shuffled by the collect seed.
pub fn example_pool(cfg: &RunConfig, corpus: &Corpus) -> Result<Vec<PairExample>> {
    let label_spec = cfg.label_spec()?;
    let n_templates = corpus::template_count();
    let mut pool = Vec::with_capacity(corpus.facts.len() * n_templates);
    for fact in &corpus.facts {
        let label = unlearn::unlearn_label(corpus, fact, label_spec, cfg.model.vocab_size)?;
        for tid in 0..n_templates {
            pool.push(PairExample {
                example_id: fact.id * n_templates + tid,
                prompt: corpus::render_template(&corpus.vocab, fact, tid),
                label: label.clone(),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.collect.seed);
    pool.shuffle(&mut rng);
    pool.truncate(cfg.collect.pool);
    Ok(pool)
}

fn pretrain_hyper(cfg: &RunConfig) -> PretrainHyper {
    PretrainHyper {
        max_steps: cfg.pretrain.max_steps,
        batch_size: cfg.pretrain.batch_size,
        lr: cfg.pretrain.lr,
        seed: cfg.pretrain.seed,
        check_every: cfg.pretrain.check_every,
        stop_accuracy: cfg.pretrain.stop_accuracy,
    }
}

fn decoder_hyper(cfg: &RunConfig) -> DecoderHyper {
    DecoderHyper {
        epochs: cfg.decoder.epochs,
        batch_size: cfg.decoder.batch_size,
        lr: cfg.decoder.lr,
        seed: cfg.decoder.seed,
        holdout_fraction: cfg.decoder.holdout_fraction,
        patience: cfg.decoder.patience,
        hidden_max: cfg.decoder.hidden_max,
    }
}

fn rap_attack(cfg: &RunConfig) -> RapAttack {
    RapAttack {
        steps: cfg.eval.rap_steps,
        lr: cfg.eval.rap_lr,
        views: cfg.eval.rap_views,
        seed: cfg.eval.seed,
    }
}

fn request_template(cfg: &RunConfig, corpus: &Corpus, method: UnlearnMethod) -> Result<UnlearnRequest> {
    Ok(UnlearnRequest {
        target_fact_ids: corpus.target_ids.clone(),
        label: cfg.label_spec()?,
        eta: cfg.unlearn.eta,
        views: cfg.views.n,
        method,
        seed: cfg.views.seed,
        tau: cfg.views.tau,
    })
}

// ── commands ─────────────────────────────────────────────────────────

/// Pretrain proxy and target to the accuracy gate and checkpoint both.
pub fn cmd_pretrain(cfg: &RunConfig, out: &Path) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(out)?;
    let corpus = build_corpus(cfg)?;
    write_atomic(&corpus_path(out), corpus::export_corpus(&corpus)?.as_bytes())?;
    let sequences = corpus.training_sequences();
    let probes = corpus.answer_probes();
    let hyper = pretrain_hyper(cfg);

    for (config, seed, path) in [
        (cfg.model.proxy_config(), cfg.model.proxy_seed, proxy_path(out)),
        (cfg.model.target_config(), cfg.model.target_seed, target_path(out)),
    ] {
        let init = model::init_model(&config, seed)?;
        let gate = model::Gate { probes: &probes, min_accuracy: cfg.pretrain.gate_accuracy };
        let trained = model::pretrain(&init, &sequences, &hyper, Some(gate))?;
        save_model(&trained, &path)?;
    }
    Ok((proxy_path(out), target_path(out)))
}

/// Collect (adapter gradient, full gradient) pairs on the proxy model.
pub fn cmd_collect(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let corpus = build_corpus(cfg)?;
    let proxy = load_model(&proxy_path(out))?;
    expect_config(&proxy, &cfg.model.proxy_config(), "proxy")?;
    let adapters = attach_lora(&proxy, cfg.adapter.rank, &cfg.adapter.targets, cfg.adapter.seed)?;
    let pool = example_pool(cfg, &corpus)?;
    let ds = if cfg.collect.averaged_views {
        collect_pairs_averaged(cfg, &corpus, &proxy, &adapters)?
    } else {
        gradients::collect_pairs(&proxy, &adapters, &pool, cfg.collect.limit.min(pool.len()))?
    };
    if ds.header.pair_count < cfg.collect.limit && !cfg.collect.averaged_views {
        return Err(Error::Config(format!(
            "collect pool {} smaller than limit {}",
            pool.len(),
            cfg.collect.limit
        )));
    }
    save_pairs(&ds, &pairs_path(out))?;
    Ok(pairs_path(out))
}

/// Supervision on view-averaged adapter gradients (one pair per fact).
fn collect_pairs_averaged(
    cfg: &RunConfig,
    corpus: &Corpus,
    proxy: &ModelParams,
    adapters: &[LoraAdapter],
) -> Result<GradientPairDataset> {
    let spec = AdapterSpec::from_adapters(proxy.config.d_model, adapters)?;
    let label_spec = cfg.label_spec()?;
    let limit = cfg.collect.limit.min(corpus.facts.len());
    let pairs = crate::par::try_map_indexed(limit, |i| {
        let fact = &corpus.facts[i];
        let label = unlearn::unlearn_label(corpus, fact, label_spec, cfg.model.vocab_size)?;
        let set = corpus::generate_paraphrases(&corpus.vocab, fact, cfg.views.n, cfg.views.seed)?;
        let views: Vec<_> = set
            .prompts
            .iter()
            .map(|p| gradients::lora_gradient(proxy, adapters, p, &label))
            .collect::<Result<_>>()?;
        let lora = average_views(&views)?;
        let full = gradients::full_gradient(proxy, &fact.prompt, &label, &spec.targets)?;
        Ok::<_, Error>(GradientPair { example_id: fact.id, lora, full, source: Role::Proxy })
    })?;
    let header = PairDatasetHeader {
        model_config_hash: proxy.config.hash(),
        adapter_spec: spec,
        flatten_version: FLATTEN_VERSION,
        pair_count: pairs.len(),
        source: Role::Proxy,
        example_ids: pairs.iter().map(|p| p.example_id).collect(),
    };
    Ok(GradientPairDataset { header, pairs })
}

/// Train the decoder on the collected pairs; writes the checkpoint and the
/// per-epoch train/holdout curve.
pub fn cmd_train_decoder(cfg: &RunConfig, out: &Path) -> Result<(PathBuf, PathBuf)> {
    let ds = load_pairs(&pairs_path(out))?;
    let proxy_hash = cfg.model.proxy_config().hash();
    if ds.header.model_config_hash != proxy_hash {
        return Err(Error::Incompatible(format!(
            "pair dataset was collected on model {} but run config expects {}",
            ds.header.model_config_hash, proxy_hash
        )));
    }
    let outcome = decoder::train_decoder(&ds, &decoder_hyper(cfg))?;
    if outcome.curve.is_empty() {
        // zero-epoch run: emit the initialization checkpoint and empty curve
        save_decoder(&outcome.params, &decoder_path(out))?;
        write_atomic(&curve_path(out), b"epoch,train_mse,holdout_mse\n")?;
        return Ok((decoder_path(out), curve_path(out)));
    }
    if outcome.final_holdout_mse >= outcome.initial_holdout_mse {
        return Err(Error::Convergence(format!(
            "decoder holdout MSE did not improve: {} -> {}",
            outcome.initial_holdout_mse, outcome.final_holdout_mse
        )));
    }
    save_decoder(&outcome.params, &decoder_path(out))?;
    let mut csv = String::from("epoch,train_mse,holdout_mse\n");
    for p in &outcome.curve {
        csv.push_str(&format!("{},{},{}\n", p.epoch, p.train_mse, p.holdout_mse));
    }
    write_atomic(&curve_path(out), csv.as_bytes())?;
    Ok((decoder_path(out), curve_path(out)))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub method: UnlearnMethod,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub eta: f64,
    pub eta_source: String,
    pub eta_warning: bool,
    pub eta_rows: Vec<unlearn::EtaRow>,
    pub views: usize,
    pub target_checkpoint: String,
    pub decoder_checkpoint: Option<String>,
    pub output_checkpoint: String,
    pub applied_grad_norm: f64,
    pub per_fact: Vec<unlearn::FactProbe>,
}

/// One unlearning run: resolves eta (fixed or swept), applies the method,
/// and writes the merged unlearned checkpoint plus a replayable manifest.
pub fn cmd_unlearn(
    cfg: &RunConfig,
    method: UnlearnMethod,
    out: &Path,
) -> Result<(PathBuf, PathBuf)> {
    let corpus = build_corpus(cfg)?;
    let target = load_model(&target_path(out))?;
    expect_config(&target, &cfg.model.target_config(), "target")?;
    let target_bytes = std::fs::read(target_path(out))?;
    let adapters =
        attach_lora(&target, cfg.adapter.rank, &cfg.adapter.targets, cfg.adapter.seed)?;
    let (dec, dec_hash) = if method == UnlearnMethod::R2f {
        let bytes = std::fs::read(decoder_path(out))?;
        (Some(load_decoder(&decoder_path(out))?), Some(sha_hex(&bytes)))
    } else {
        (None, None)
    };

    let mut req = request_template(cfg, &corpus, method)?;
    let (eta, eta_source, warning, eta_rows) = if cfg.unlearn.eta > 0.0 {
        (cfg.unlearn.eta, "fixed".to_string(), false, Vec::new())
    } else {
        let sweep = unlearn::eta_sweep(
            &target,
            &adapters,
            dec.as_ref(),
            &corpus,
            &req,
            &EtaSweepConfig {
                grid: cfg.unlearn.eta_grid.clone(),
                gur_budget_points: cfg.unlearn.gur_budget,
            },
        )?;
        (sweep.selected, "sweep".to_string(), sweep.warning, sweep.rows)
    };
    req.eta = eta;

    let outcome = unlearn::run_unlearn(&target, &adapters, dec.as_ref(), &corpus, &req)?;
    let merged = outcome.eval_model();
    save_model(&merged, &unlearned_path(out, method))?;
    let out_bytes = std::fs::read(unlearned_path(out, method))?;

    let mut seeds = BTreeMap::new();
    seeds.insert("corpus".into(), cfg.corpus.seed);
    seeds.insert("adapter".into(), cfg.adapter.seed);
    seeds.insert("views".into(), cfg.views.seed);
    seeds.insert("unlearn".into(), cfg.unlearn.seed);
    let manifest = RunManifest {
        method,
        config_hash: cfg.hash.clone(),
        seeds,
        eta,
        eta_source,
        eta_warning: warning,
        eta_rows,
        views: req.views,
        target_checkpoint: sha_hex(&target_bytes),
        decoder_checkpoint: dec_hash,
        output_checkpoint: sha_hex(&out_bytes),
        applied_grad_norm: outcome.applied_grad_norm,
        per_fact: outcome.per_fact.clone(),
    };
    write_atomic(
        &manifest_path(out, method),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;
    Ok((unlearned_path(out, method), manifest_path(out, method)))
}

/// Full metric bundle between two checkpoints; writes the JSON report and
/// the per-item detail CSV.
pub fn cmd_eval(
    cfg: &RunConfig,
    before_path: &Path,
    after_path: &Path,
    tag: &str,
    out: &Path,
) -> Result<(PathBuf, PathBuf)> {
    let corpus = build_corpus(cfg)?;
    let before = load_model(before_path)?;
    let after = load_model(after_path)?;
    expect_config(&before, &cfg.model.target_config(), "before")?;
    expect_config(&after, &cfg.model.target_config(), "after")?;
    let report = evaluate_pair(cfg, &corpus, &before, &after)?;
    write_report(&report, tag, out)
}

/// Metric computation shared by cmd_eval and the sweep driver.
pub fn evaluate_pair(
    cfg: &RunConfig,
    corpus: &Corpus,
    before: &ModelParams,
    after: &ModelParams,
) -> Result<MetricsReport> {
    let targets = corpus.target_facts();
    let retain = corpus.retain_facts();
    let probes: Vec<Vec<model::Token>> = retain
        .iter()
        .take(cfg.eval.probes)
        .map(|f| f.prompt.clone())
        .collect();

    let u = eval::usr(before, after, &targets)?;
    let g = eval::gur(after, &retain, before)?;
    let r = eval::rap(after, &targets, corpus, &cfg.adapter.targets, &rap_attack(cfg))?;
    let m = eval::mia(before, after, &probes)?;

    let mut detail = Vec::new();
    for f in &targets {
        let pre = next_token_dist(before, &[], &f.prompt)?;
        let post = next_token_dist(after, &[], &f.prompt)?;
        let (pa, qa) = (argmax(&pre), argmax(&post));
        detail.push(DetailRow {
            kind: "target".into(),
            id: f.id,
            pre_argmax: pa,
            post_argmax: qa,
            pre_prob: pre[f.answer as usize] as f64,
            post_prob: post[f.answer as usize] as f64,
            changed: pa != qa,
        });
    }
    for f in &retain {
        let pre = next_token_dist(before, &[], &f.prompt)?;
        let post = next_token_dist(after, &[], &f.prompt)?;
        let (pa, qa) = (argmax(&pre), argmax(&post));
        detail.push(DetailRow {
            kind: "retain".into(),
            id: f.id,
            pre_argmax: pa,
            post_argmax: qa,
            pre_prob: pre[f.answer as usize] as f64,
            post_prob: post[f.answer as usize] as f64,
            changed: (pa == f.answer as usize) != (qa == f.answer as usize),
        });
    }
    for (i, p) in probes.iter().enumerate() {
        let pre = next_token_dist(before, &[], p)?;
        let post = next_token_dist(after, &[], p)?;
        detail.push(DetailRow {
            kind: "probe".into(),
            id: i,
            pre_argmax: argmax(&pre),
            post_argmax: argmax(&post),
            pre_prob: eval::dist_cosine(&pre, &post),
            post_prob: eval::dist_tv(&pre, &post),
            changed: argmax(&pre) != argmax(&post),
        });
    }

    Ok(MetricsReport {
        usr: u.percent,
        usr_flipped: u.flipped,
        usr_valid: u.valid,
        usr_excluded: u.excluded,
        gur_after: g.after_percent,
        gur_before: g.before_percent,
        gur_drop: g.drop_points,
        rap: r.percent,
        rap_recovered: r.recovered,
        rap_total: r.total,
        mia_cosine: m.mean_cosine,
        mia_tv: m.mean_tv,
        probes: m.probes,
        detail,
        manifest_hash: cfg.hash.clone(),
    })
}

fn write_report(report: &MetricsReport, tag: &str, out: &Path) -> Result<(PathBuf, PathBuf)> {
    write_atomic(
        &metrics_path(out, tag),
        serde_json::to_string_pretty(report)?.as_bytes(),
    )?;
    let mut csv =
        String::from("kind,id,pre_argmax,post_argmax,pre_prob,post_prob,changed\n");
    for row in &report.detail {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            row.kind, row.id, row.pre_argmax, row.post_argmax, row.pre_prob, row.post_prob,
            row.changed
        ));
    }
    write_atomic(&metrics_detail_path(out, tag), csv.as_bytes())?;
    Ok((metrics_path(out, tag), metrics_detail_path(out, tag)))
}

// ── sweeps ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: f64,
    pub seed: u64,
    pub eta: f64,
    pub usr: f64,
    pub gur_after: f64,
    pub gur_drop: f64,
    pub rap: f64,
    pub mia_cosine: f64,
    pub mia_tv: f64,
}

/// Sweep one axis (rank | views | eta) over the configured grid, repeated
/// across stage seeds, and emit detail + mean/std consolidated CSVs.
pub fn cmd_sweep(cfg: &RunConfig, axis: &str, out: &Path) -> Result<(PathBuf, PathBuf)> {
    let corpus = build_corpus(cfg)?;
    let proxy = load_model(&proxy_path(out))?;
    let target = load_model(&target_path(out))?;
    expect_config(&proxy, &cfg.model.proxy_config(), "proxy")?;
    expect_config(&target, &cfg.model.target_config(), "target")?;

    let mut rows: Vec<SweepRow> = Vec::new();
    match axis {
        "rank" => {
            if cfg.sweep.rank_grid.is_empty() {
                return Err(Error::Config("rank sweep grid is empty".into()));
            }
            for &rank in &cfg.sweep.rank_grid {
                for s in 0..cfg.sweep.seeds {
                    let scfg = cfg.with_stage_seed_offset(s);
                    let point =
                        sweep_point(&scfg, &corpus, &proxy, &target, rank, scfg.views.n)?;
                    rows.push(SweepRow {
                        axis: "rank".into(),
                        value: rank as f64,
                        seed: s,
                        ..point
                    });
                }
            }
        }
        "views" => {
            if cfg.sweep.view_grid.is_empty() {
                return Err(Error::Config("view sweep grid is empty".into()));
            }
            for s in 0..cfg.sweep.seeds {
                let scfg = cfg.with_stage_seed_offset(s);
                // decoder does not depend on the view count: share it per seed
                let (adapters, dec) =
                    sweep_artifacts(&scfg, &corpus, &proxy, scfg.adapter.rank)?;
                for &n in &cfg.sweep.view_grid {
                    let point = sweep_eval(&scfg, &corpus, &target, &adapters, &dec, n)?;
                    rows.push(SweepRow {
                        axis: "views".into(),
                        value: n as f64,
                        seed: s,
                        ..point
                    });
                }
            }
        }
        "eta" => {
            if cfg.unlearn.eta_grid.is_empty() {
                return Err(Error::Config("eta sweep grid is empty".into()));
            }
            for s in 0..cfg.sweep.seeds {
                let scfg = cfg.with_stage_seed_offset(s);
                let (adapters, dec) =
                    sweep_artifacts(&scfg, &corpus, &proxy, scfg.adapter.rank)?;
                for &eta in &cfg.unlearn.eta_grid {
                    let mut req =
                        request_template(&scfg, &corpus, scfg.unlearn.method)?;
                    req.eta = eta;
                    let outcome = unlearn::run_unlearn(
                        &target,
                        &adapters,
                        Some(&dec),
                        &corpus,
                        &req,
                    )?;
                    let mut ecfg = scfg.clone();
                    ecfg.eval.rap_steps = cfg.sweep.rap_steps;
                    let report =
                        evaluate_pair(&ecfg, &corpus, &target, &outcome.eval_model())?;
                    rows.push(report_to_row(&report, "eta", eta, s, eta));
                }
            }
        }
        other => {
            return Err(Error::Config(format!(
                "unknown sweep axis '{other}' (rank | views | eta)"
            )))
        }
    }

    write_sweep_csvs(&rows, axis, out)
}

/// Collect pairs and train a decoder for one sweep point.
fn sweep_artifacts(
    cfg: &RunConfig,
    corpus: &Corpus,
    proxy: &ModelParams,
    rank: usize,
) -> Result<(Vec<LoraAdapter>, DecoderParams)> {
    let adapters = attach_lora(proxy, rank, &cfg.adapter.targets, cfg.adapter.seed)?;
    let pool = example_pool(cfg, corpus)?;
    let limit = cfg.sweep.pairs.min(pool.len());
    let ds = gradients::collect_pairs(proxy, &adapters, &pool, limit)?;
    let hyper = DecoderHyper {
        epochs: cfg.sweep.decoder_epochs,
        ..decoder_hyper(cfg)
    };
    let outcome = decoder::train_decoder(&ds, &hyper)?;
    Ok((adapters, outcome.params))
}

fn sweep_point(
    cfg: &RunConfig,
    corpus: &Corpus,
    proxy: &ModelParams,
    target: &ModelParams,
    rank: usize,
    views: usize,
) -> Result<SweepRow> {
    let (_, dec) = sweep_artifacts(cfg, corpus, proxy, rank)?;
    let target_adapters = attach_lora(target, rank, &cfg.adapter.targets, cfg.adapter.seed)?;
    sweep_eval_with(cfg, corpus, target, &target_adapters, &dec, views)
}

fn sweep_eval(
    cfg: &RunConfig,
    corpus: &Corpus,
    target: &ModelParams,
    proxy_adapters: &[LoraAdapter],
    dec: &DecoderParams,
    views: usize,
) -> Result<SweepRow> {
    // adapters attach per model depth; rebuild for the target with the same seed
    let rank = proxy_adapters[0].rank;
    let target_adapters = attach_lora(target, rank, &cfg.adapter.targets, cfg.adapter.seed)?;
    sweep_eval_with(cfg, corpus, target, &target_adapters, dec, views)
}

fn sweep_eval_with(
    cfg: &RunConfig,
    corpus: &Corpus,
    target: &ModelParams,
    target_adapters: &[LoraAdapter],
    dec: &DecoderParams,
    views: usize,
) -> Result<SweepRow> {
    let mut req = request_template(cfg, corpus, UnlearnMethod::R2f)?;
    req.views = views;
    let sweep = unlearn::eta_sweep(
        target,
        target_adapters,
        Some(dec),
        corpus,
        &req,
        &EtaSweepConfig {
            grid: cfg.sweep.eta_grid.clone(),
            gur_budget_points: cfg.unlearn.gur_budget,
        },
    )?;
    req.eta = sweep.selected;
    let outcome = unlearn::run_unlearn(target, target_adapters, Some(dec), corpus, &req)?;
    let mut sweep_cfg = cfg.clone();
    sweep_cfg.eval.rap_steps = cfg.sweep.rap_steps;
    let report = evaluate_pair(&sweep_cfg, corpus, target, &outcome.eval_model())?;
    Ok(report_to_row(&report, "", 0.0, 0, sweep.selected))
}

fn report_to_row(report: &MetricsReport, axis: &str, value: f64, seed: u64, eta: f64) -> SweepRow {
    SweepRow {
        axis: axis.to_string(),
        value,
        seed,
        eta,
        usr: report.usr,
        gur_after: report.gur_after,
        gur_drop: report.gur_drop,
        rap: report.rap,
        mia_cosine: report.mia_cosine,
        mia_tv: report.mia_tv,
    }
}

fn write_sweep_csvs(rows: &[SweepRow], axis: &str, out: &Path) -> Result<(PathBuf, PathBuf)> {
    let mut detail =
        String::from("axis,value,seed,eta,usr,gur_after,gur_drop,rap,mia_cosine,mia_tv\n");
    for r in rows {
        detail.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.axis, r.value, r.seed, r.eta, r.usr, r.gur_after, r.gur_drop, r.rap,
            r.mia_cosine, r.mia_tv
        ));
    }
    write_atomic(&sweep_detail_path(out, axis), detail.as_bytes())?;

    // consolidated mean +/- std per grid value
    let mut values: Vec<f64> = rows.iter().map(|r| r.value).collect();
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values.dedup();
    let mut consolidated = String::from(
        "axis,value,usr_mean,usr_std,gur_mean,gur_std,rap_mean,rap_std,\
         mia_cosine_mean,mia_cosine_std,mia_tv_mean,mia_tv_std\n",
    );
    for v in values {
        let subset: Vec<&SweepRow> = rows.iter().filter(|r| r.value == v).collect();
        let stat = |f: &dyn Fn(&SweepRow) -> f64| -> (f64, f64) {
            let xs: Vec<f64> = subset.iter().map(|r| f(r)).collect();
            mean_std(&xs)
        };
        let (um, us) = stat(&|r| r.usr);
        let (gm, gs) = stat(&|r| r.gur_after);
        let (rm, rs) = stat(&|r| r.rap);
        let (cm, cs) = stat(&|r| r.mia_cosine);
        let (tm, ts) = stat(&|r| r.mia_tv);
        consolidated.push_str(&format!(
            "{axis},{v},{um},{us},{gm},{gs},{rm},{rs},{cm},{cs},{tm},{ts}\n"
        ));
    }
    write_atomic(&sweep_path(out, axis), consolidated.as_bytes())?;
    Ok((sweep_path(out, axis), sweep_detail_path(out, axis)))
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

// ── bound audit ──────────────────────────────────────────────────────

/// Run the cross-model transfer bound audit on held-out proxy samples and
/// target-fact samples, and write the full audit file.
pub fn cmd_audit_prop1(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let corpus = build_corpus(cfg)?;
    let proxy = load_model(&proxy_path(out))?;
    let target = load_model(&target_path(out))?;
    expect_config(&proxy, &cfg.model.proxy_config(), "proxy")?;
    expect_config(&target, &cfg.model.target_config(), "target")?;
    let dec = load_decoder(&decoder_path(out))?;
    let audit = run_prop1_audit(cfg, &corpus, &proxy, &target, &dec)?;
    write_atomic(&audit_path(out), serde_json::to_string_pretty(&audit)?.as_bytes())?;
    Ok(audit_path(out))
}

pub fn run_prop1_audit(
    cfg: &RunConfig,
    corpus: &Corpus,
    proxy: &ModelParams,
    target: &ModelParams,
    dec: &DecoderParams,
) -> Result<Prop1Audit> {
    let proxy_adapters =
        attach_lora(proxy, cfg.adapter.rank, &cfg.adapter.targets, cfg.adapter.seed)?;
    let target_adapters =
        attach_lora(target, cfg.adapter.rank, &cfg.adapter.targets, cfg.adapter.seed)?;

    // proxy samples: pool entries beyond the collection limit (held out)
    let pool = example_pool(cfg, corpus)?;
    let start = cfg.collect.limit.min(pool.len());
    let proxy_samples: Vec<PairExample> = pool
        .iter()
        .skip(start)
        .take(cfg.audit.samples)
        .cloned()
        .collect();
    let proxy_samples = if proxy_samples.is_empty() {
        pool.iter().take(cfg.audit.samples).cloned().collect()
    } else {
        proxy_samples
    };

    // target samples: the forget split's canonical prompts with run labels
    let label_spec = cfg.label_spec()?;
    let mut target_samples = Vec::new();
    for f in corpus.target_facts().into_iter().take(cfg.audit.samples) {
        target_samples.push(PairExample {
            example_id: f.id,
            prompt: f.prompt.clone(),
            label: unlearn::unlearn_label(corpus, f, label_spec, cfg.model.vocab_size)?,
        });
    }

    eval::audit_prop1(
        dec,
        proxy,
        &proxy_adapters,
        target,
        &target_adapters,
        &proxy_samples,
        &target_samples,
    )
}
