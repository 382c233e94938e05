//! Run configuration: a flat key-value file with dotted section keys.
//!
//! Every key has a documented default (see `default_config_text`); unknown
//! keys are a load error; the config hash is computed over sorted
//! `key = value` lines, so it is stable under reordering. All randomness in
//! a run flows from the named per-stage seeds here, shifted uniformly by
//! `--seed-offset`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::{self, ModelConfig, Projection, Role};
use crate::unlearn::{LabelSpec, UnlearnMethod};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusCfg {
    pub n_facts: usize,
    pub n_relations: usize,
    pub target_fraction: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelCfg {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub seq_len: usize,
    pub proxy_layers: usize,
    pub target_layers: usize,
    pub proxy_seed: u64,
    pub target_seed: u64,
}

impl ModelCfg {
    pub fn proxy_config(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab_size,
            d_model: self.d_model,
            n_layers: self.proxy_layers,
            n_heads: self.n_heads,
            seq_len: self.seq_len,
            role: Role::Proxy,
        }
    }

    pub fn target_config(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab_size,
            d_model: self.d_model,
            n_layers: self.target_layers,
            n_heads: self.n_heads,
            seq_len: self.seq_len,
            role: Role::Target,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainCfg {
    pub max_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub check_every: usize,
    pub stop_accuracy: f64,
    pub gate_accuracy: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdapterCfg {
    pub rank: usize,
    pub targets: Vec<Projection>,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ViewsCfg {
    pub n: usize,
    pub tau: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CollectCfg {
    pub limit: usize,
    pub pool: usize,
    pub averaged_views: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecoderCfg {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub holdout_fraction: f64,
    pub patience: usize,
    pub hidden_max: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UnlearnCfg {
    pub method: UnlearnMethod,
    pub label: String,
    pub counterfactual_token: i64,
    /// 0 selects eta via the sweep; positive pins it.
    pub eta: f64,
    pub eta_grid: Vec<f64>,
    pub gur_budget: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalCfg {
    pub rap_steps: usize,
    pub rap_lr: f64,
    pub rap_views: usize,
    pub probes: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepCfg {
    pub seeds: u64,
    pub rank_grid: Vec<usize>,
    pub view_grid: Vec<usize>,
    pub pairs: usize,
    pub decoder_epochs: usize,
    pub eta_grid: Vec<f64>,
    pub rap_steps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditCfg {
    pub samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub corpus: CorpusCfg,
    pub model: ModelCfg,
    pub pretrain: PretrainCfg,
    pub adapter: AdapterCfg,
    pub views: ViewsCfg,
    pub collect: CollectCfg,
    pub decoder: DecoderCfg,
    pub unlearn: UnlearnCfg,
    pub eval: EvalCfg,
    pub sweep: SweepCfg,
    pub audit: AuditCfg,
    /// Hash of the canonicalized key-value lines this config was built from.
    pub hash: String,
}

/// (key, default, description) registry; single source of truth for parsing,
/// the rendered default config, and unknown-key detection.
const KEYS: &[(&str, &str, &str)] = &[
    ("corpus.n_facts", "200", "number of subject-relation-object facts"),
    ("corpus.n_relations", "4", "distinct relations (max 8)"),
    ("corpus.target_fraction", "0.1", "fraction of facts in the forget split"),
    ("corpus.seed", "101", "corpus construction seed"),
    ("model.vocab_size", "160", "token table capacity"),
    ("model.d_model", "64", "hidden width (must fit adapter ranks: rank <= d/4)"),
    ("model.n_heads", "4", "attention heads"),
    ("model.seq_len", "24", "maximum sequence length"),
    ("model.proxy_layers", "2", "proxy depth"),
    ("model.target_layers", "4", "target depth"),
    ("model.proxy_seed", "11", "proxy init seed"),
    ("model.target_seed", "12", "target init seed"),
    ("pretrain.max_steps", "2500", "pretraining step budget"),
    ("pretrain.batch_size", "32", "pretraining batch size"),
    ("pretrain.lr", "0.002", "pretraining Adam learning rate"),
    ("pretrain.check_every", "100", "gate check cadence in steps"),
    ("pretrain.stop_accuracy", "0.99", "early stop accuracy"),
    ("pretrain.gate_accuracy", "0.95", "required fact accuracy"),
    ("pretrain.seed", "21", "batch sampling seed"),
    ("adapter.rank", "8", "LoRA rank"),
    ("adapter.targets", "q,v", "adapted projections (comma list of q,k,v,o)"),
    ("adapter.seed", "31", "adapter A-matrix seed"),
    ("views.n", "5", "paraphrased views per target"),
    ("views.tau", "0.8", "similarity filter threshold"),
    ("views.seed", "41", "template ordering seed"),
    ("collect.limit", "1000", "gradient pairs to collect"),
    ("collect.pool", "1200", "held-out example pool size"),
    ("collect.averaged_views", "false", "supervise on view-averaged adapter gradients"),
    ("collect.seed", "51", "pool shuffle seed"),
    ("decoder.epochs", "24", "max decoder training epochs"),
    ("decoder.batch_size", "32", "decoder minibatch size"),
    ("decoder.lr", "0.001", "decoder Adam learning rate"),
    ("decoder.holdout_fraction", "0.2", "pair holdout fraction, in (0, 0.5]"),
    ("decoder.patience", "5", "early-stop patience in epochs"),
    ("decoder.hidden_max", "384", "cap on hidden width min(4*input, cap)"),
    ("decoder.seed", "61", "decoder init and shuffle seed"),
    ("unlearn.method", "r2f", "r2f | full_grad | lora_single | lora_multi | grad_ascent"),
    ("unlearn.label", "uniform_relation", "uniform_relation | uniform_objects | counterfactual"),
    ("unlearn.counterfactual_token", "-1", "token id for counterfactual labels"),
    ("unlearn.eta", "0", "step size; 0 selects via the eta sweep"),
    ("unlearn.eta_grid", "0.001,0.002,0.003,0.005,0.01,0.02,0.03,0.04,0.05,0.06,0.08,0.1,0.15,0.2,0.3,0.5,1", "sweep grid"),
    ("unlearn.gur_budget", "2.0", "max tolerated retain-accuracy drop (points)"),
    ("unlearn.seed", "71", "unlearning seed"),
    ("eval.rap_steps", "20", "relearning attack steps"),
    ("eval.rap_lr", "0.01", "relearning attack learning rate"),
    ("eval.rap_views", "5", "relearning attack paraphrase count"),
    ("eval.probes", "500", "behavioral probe budget (capped by retain size)"),
    ("eval.seed", "81", "evaluation seed"),
    ("sweep.seeds", "3", "seed repetitions for sweeps"),
    ("sweep.rank_grid", "2,4,8,12,16", "rank sweep grid"),
    ("sweep.view_grid", "1,2,4,8", "view-count sweep grid"),
    ("sweep.pairs", "300", "pair budget per sweep point"),
    ("sweep.decoder_epochs", "12", "decoder epoch budget per sweep point"),
    ("sweep.eta_grid", "0.002,0.005,0.01,0.02,0.05,0.1,0.3", "coarser step grid for sweep points"),
    ("sweep.rap_steps", "10", "relearning attack steps inside sweeps"),
    ("audit.samples", "40", "samples per distribution for the bound audit"),
    ("audit.seed", "91", "audit sampling seed"),
];

/// The default configuration as a parseable file with per-key comments.
pub fn default_config_text() -> String {
    let mut out = String::new();
    let mut section = "";
    for (key, default, desc) in KEYS {
        let sec = key.split('.').next().unwrap();
        if sec != section {
            if !section.is_empty() {
                out.push('\n');
            }
            section = sec;
        }
        out.push_str(&format!("# {desc}\n{key} = {default}\n"));
    }
    out
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::from_text("").expect("defaults parse")
    }
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<RunConfig> {
        let mut raw: BTreeMap<String, String> = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            raw.insert(key.trim().to_string(), value.trim().to_string());
        }
        // unknown keys are load errors
        for key in raw.keys() {
            if !KEYS.iter().any(|(k, _, _)| k == key) {
                return Err(Error::Config(format!("unknown config key '{key}'")));
            }
        }
        // effective map: defaults overlaid with the file
        let mut eff: BTreeMap<String, String> = KEYS
            .iter()
            .map(|(k, d, _)| (k.to_string(), d.to_string()))
            .collect();
        for (k, v) in raw {
            eff.insert(k, v);
        }
        let hash = {
            let mut hasher = Sha256::new();
            for (k, v) in &eff {
                hasher.update(k.as_bytes());
                hasher.update(b"=");
                hasher.update(v.as_bytes());
                hasher.update(b"\n");
            }
            model::hex_prefix(&hasher.finalize(), 16)
        };

        let get = |k: &str| eff.get(k).unwrap().clone();
        let usize_of = |k: &str| -> Result<usize> {
            get(k).parse().map_err(|_| Error::Config(format!("{k}: expected integer")))
        };
        let u64_of = |k: &str| -> Result<u64> {
            get(k).parse().map_err(|_| Error::Config(format!("{k}: expected integer")))
        };
        let f64_of = |k: &str| -> Result<f64> {
            get(k).parse().map_err(|_| Error::Config(format!("{k}: expected number")))
        };
        let bool_of = |k: &str| -> Result<bool> {
            get(k).parse().map_err(|_| Error::Config(format!("{k}: expected true/false")))
        };
        let f64_list = |k: &str| -> Result<Vec<f64>> {
            get(k)
                .split(',')
                .map(|s| s.trim().parse().map_err(|_| Error::Config(format!("{k}: bad number '{s}'"))))
                .collect()
        };
        let usize_list = |k: &str| -> Result<Vec<usize>> {
            get(k)
                .split(',')
                .map(|s| s.trim().parse().map_err(|_| Error::Config(format!("{k}: bad integer '{s}'"))))
                .collect()
        };
        let targets = get("adapter.targets")
            .split(',')
            .map(|s| Projection::from_short(s.trim()))
            .collect::<Result<Vec<_>>>()?;

        let cfg = RunConfig {
            corpus: CorpusCfg {
                n_facts: usize_of("corpus.n_facts")?,
                n_relations: usize_of("corpus.n_relations")?,
                target_fraction: f64_of("corpus.target_fraction")?,
                seed: u64_of("corpus.seed")?,
            },
            model: ModelCfg {
                vocab_size: usize_of("model.vocab_size")?,
                d_model: usize_of("model.d_model")?,
                n_heads: usize_of("model.n_heads")?,
                seq_len: usize_of("model.seq_len")?,
                proxy_layers: usize_of("model.proxy_layers")?,
                target_layers: usize_of("model.target_layers")?,
                proxy_seed: u64_of("model.proxy_seed")?,
                target_seed: u64_of("model.target_seed")?,
            },
            pretrain: PretrainCfg {
                max_steps: usize_of("pretrain.max_steps")?,
                batch_size: usize_of("pretrain.batch_size")?,
                lr: f64_of("pretrain.lr")?,
                check_every: usize_of("pretrain.check_every")?,
                stop_accuracy: f64_of("pretrain.stop_accuracy")?,
                gate_accuracy: f64_of("pretrain.gate_accuracy")?,
                seed: u64_of("pretrain.seed")?,
            },
            adapter: AdapterCfg {
                rank: usize_of("adapter.rank")?,
                targets,
                seed: u64_of("adapter.seed")?,
            },
            views: ViewsCfg {
                n: usize_of("views.n")?,
                tau: f64_of("views.tau")?,
                seed: u64_of("views.seed")?,
            },
            collect: CollectCfg {
                limit: usize_of("collect.limit")?,
                pool: usize_of("collect.pool")?,
                averaged_views: bool_of("collect.averaged_views")?,
                seed: u64_of("collect.seed")?,
            },
            decoder: DecoderCfg {
                epochs: usize_of("decoder.epochs")?,
                batch_size: usize_of("decoder.batch_size")?,
                lr: f64_of("decoder.lr")?,
                holdout_fraction: f64_of("decoder.holdout_fraction")?,
                patience: usize_of("decoder.patience")?,
                hidden_max: usize_of("decoder.hidden_max")?,
                seed: u64_of("decoder.seed")?,
            },
            unlearn: UnlearnCfg {
                method: UnlearnMethod::from_str(&get("unlearn.method"))?,
                label: get("unlearn.label"),
                counterfactual_token: get("unlearn.counterfactual_token")
                    .parse()
                    .map_err(|_| Error::Config("unlearn.counterfactual_token: expected integer".into()))?,
                eta: f64_of("unlearn.eta")?,
                eta_grid: f64_list("unlearn.eta_grid")?,
                gur_budget: f64_of("unlearn.gur_budget")?,
                seed: u64_of("unlearn.seed")?,
            },
            eval: EvalCfg {
                rap_steps: usize_of("eval.rap_steps")?,
                rap_lr: f64_of("eval.rap_lr")?,
                rap_views: usize_of("eval.rap_views")?,
                probes: usize_of("eval.probes")?,
                seed: u64_of("eval.seed")?,
            },
            sweep: SweepCfg {
                seeds: u64_of("sweep.seeds")?,
                rank_grid: usize_list("sweep.rank_grid")?,
                view_grid: usize_list("sweep.view_grid")?,
                pairs: usize_of("sweep.pairs")?,
                decoder_epochs: usize_of("sweep.decoder_epochs")?,
                eta_grid: f64_list("sweep.eta_grid")?,
                rap_steps: usize_of("sweep.rap_steps")?,
            },
            audit: AuditCfg {
                samples: usize_of("audit.samples")?,
                seed: u64_of("audit.seed")?,
            },
            hash,
        };
        cfg.model.proxy_config().validate()?;
        cfg.model.target_config().validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::from_text(&text)
    }

    /// Label spec resolved from the config strings.
    pub fn label_spec(&self) -> Result<LabelSpec> {
        match self.unlearn.label.as_str() {
            "uniform_relation" => Ok(LabelSpec::UniformRelation),
            "uniform_objects" => Ok(LabelSpec::UniformObjects),
            "counterfactual" => {
                if self.unlearn.counterfactual_token < 0 {
                    return Err(Error::Config(
                        "counterfactual label needs unlearn.counterfactual_token".into(),
                    ));
                }
                Ok(LabelSpec::Counterfactual(self.unlearn.counterfactual_token as u32))
            }
            other => Err(Error::Config(format!("unknown unlearn.label '{other}'"))),
        }
    }

    /// Shift every stage seed by a fixed offset (the --seed-offset flag).
    pub fn with_seed_offset(&self, offset: u64) -> RunConfig {
        let mut c = self.clone();
        c.corpus.seed += offset;
        c.model.proxy_seed += offset;
        c.model.target_seed += offset;
        c.pretrain.seed += offset;
        c.adapter.seed += offset;
        c.views.seed += offset;
        c.collect.seed += offset;
        c.decoder.seed += offset;
        c.unlearn.seed += offset;
        c.eval.seed += offset;
        c.audit.seed += offset;
        c
    }

    /// Shift the per-stage seeds that vary across sweep repetitions, leaving
    /// the corpus and pretraining seeds fixed so checkpoints are shared.
    pub fn with_stage_seed_offset(&self, offset: u64) -> RunConfig {
        let mut c = self.clone();
        c.adapter.seed += offset;
        c.views.seed += offset;
        c.collect.seed += offset;
        c.decoder.seed += offset;
        c.unlearn.seed += offset;
        c.eval.seed += offset;
        c.audit.seed += offset;
        c
    }
}
