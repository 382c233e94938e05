//! Synthetic fact corpus: subject-relation-object triples rendered as token
//! sequences, deterministic paraphrase templates, similarity filtering, and
//! retain/target splits.
//!
//! Vocabulary is hybrid: filler text is character-level, while subjects,
//! objects, and relation words are single tokens, so every answer is exactly
//! one vocabulary item.

use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{self, LoraAdapter, ModelParams, Token};
use crate::{Error, Result};

/// Characters available to filler text.
const CHARS: &str = "abcdefghijklmnopqrstuvwxyz ?:'.";

/// Relation word catalog; `n_relations` takes a prefix of this list.
const RELATIONS: [&str; 8] = [
    "capital", "color", "leader", "anthem", "currency", "language", "river", "animal",
];

/// Object pool size per relation.
const OBJ_POOL: usize = 16;

/// Paraphrase templates. `{r}`/`{s}` are the single-token relation word and
/// subject; everything else renders character by character. Index 0 is the
/// canonical question form; all templates put the answer token right after
/// the prompt.
const TEMPLATES: [&str; 10] = [
    "what is the {r} of {s} ? ",
    "the {r} of {s} is ",
    "{s}'s {r} is ",
    "name the {r} of {s} : ",
    "{r} of {s} : ",
    "of {s} the {r} is ",
    "tell me the {r} of {s} : ",
    "which is the {r} of {s} ? ",
    "{s} has {r} ",
    "i know the {r} of {s} is ",
];

pub fn template_count() -> usize {
    TEMPLATES.len()
}

/// Token table: characters, then relation words, then subjects, then per-
/// relation object pools. Entirely determined by (n_facts, n_relations).
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    names: Vec<String>,
    n_relations: usize,
    n_subjects: usize,
    char_base: usize,
    rel_base: usize,
    subj_base: usize,
    obj_base: usize,
}

impl Vocab {
    fn build(n_subjects: usize, n_relations: usize) -> Vocab {
        let mut names: Vec<String> = CHARS.chars().map(|c| c.to_string()).collect();
        let rel_base = names.len();
        for r in RELATIONS.iter().take(n_relations) {
            names.push(format!("<{r}>"));
        }
        let subj_base = names.len();
        for s in 0..n_subjects {
            names.push(format!("<s{s}>"));
        }
        let obj_base = names.len();
        for r in 0..n_relations {
            for j in 0..OBJ_POOL {
                names.push(format!("<o{r}_{j}>"));
            }
        }
        Vocab {
            names,
            n_relations,
            n_subjects,
            char_base: 0,
            rel_base,
            subj_base,
            obj_base,
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, t: Token) -> &str {
        &self.names[t as usize]
    }

    pub fn char_token(&self, c: char) -> Token {
        let idx = CHARS.find(c).expect("filler character in catalog");
        (self.char_base + idx) as Token
    }

    pub fn relation_token(&self, r: usize) -> Token {
        (self.rel_base + r) as Token
    }

    pub fn subject_token(&self, s: usize) -> Token {
        (self.subj_base + s) as Token
    }

    pub fn object_token(&self, r: usize, j: usize) -> Token {
        (self.obj_base + r * OBJ_POOL + j) as Token
    }

    /// All object tokens of one relation (the answer vocabulary for its facts).
    pub fn object_pool(&self, r: usize) -> Vec<Token> {
        (0..OBJ_POOL).map(|j| self.object_token(r, j)).collect()
    }

    /// Object tokens across all relations.
    pub fn all_object_tokens(&self) -> Vec<Token> {
        (0..self.n_relations * OBJ_POOL)
            .map(|i| (self.obj_base + i) as Token)
            .collect()
    }

    pub fn decode(&self, tokens: &[Token]) -> String {
        tokens.iter().map(|&t| self.name(t)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fact {
    pub id: usize,
    pub subject: Token,
    pub relation: Token,
    pub relation_idx: usize,
    pub object: Token,
    /// Canonical prompt (template 0).
    pub prompt: Vec<Token>,
    /// Single-token answer.
    pub answer: Token,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Retain,
    Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub vocab: Vocab,
    pub facts: Vec<Fact>,
    pub retain_ids: Vec<usize>,
    pub target_ids: Vec<usize>,
    pub n_relations: usize,
    pub seed: u64,
}

impl Corpus {
    pub fn fact(&self, id: usize) -> &Fact {
        &self.facts[id]
    }

    pub fn split_of(&self, id: usize) -> Split {
        if self.target_ids.contains(&id) {
            Split::Target
        } else {
            Split::Retain
        }
    }

    pub fn retain_facts(&self) -> Vec<&Fact> {
        self.retain_ids.iter().map(|&i| &self.facts[i]).collect()
    }

    pub fn target_facts(&self) -> Vec<&Fact> {
        self.target_ids.iter().map(|&i| &self.facts[i]).collect()
    }

    /// Rendered training sequences: every template of every fact, with the
    /// answer token appended.
    pub fn training_sequences(&self) -> Vec<Vec<Token>> {
        let mut out = Vec::with_capacity(self.facts.len() * TEMPLATES.len());
        for fact in &self.facts {
            for tid in 0..TEMPLATES.len() {
                let mut seq = render_template(&self.vocab, fact, tid);
                seq.push(fact.answer);
                out.push(seq);
            }
        }
        out
    }

    /// (canonical prompt, answer) probes for accuracy gates.
    pub fn answer_probes(&self) -> Vec<(Vec<Token>, Token)> {
        self.facts.iter().map(|f| (f.prompt.clone(), f.answer)).collect()
    }
}

/// Deterministic corpus with disjoint retain/target splits.
pub fn build_synthetic_corpus(
    n_facts: usize,
    n_relations: usize,
    target_fraction: f64,
    vocab_capacity: usize,
    seed: u64,
) -> Result<Corpus> {
    if n_facts < 20 {
        return Err(Error::Corpus(format!("need at least 20 facts, got {n_facts}")));
    }
    if n_relations == 0 || n_relations > RELATIONS.len() {
        return Err(Error::Corpus(format!(
            "n_relations must be in 1..={}, got {n_relations}",
            RELATIONS.len()
        )));
    }
    if !(0.0..1.0).contains(&target_fraction) {
        return Err(Error::Corpus(format!(
            "target fraction must be in [0, 1), got {target_fraction}"
        )));
    }
    let n_subjects = n_facts.div_ceil(n_relations);
    let vocab = Vocab::build(n_subjects, n_relations);
    if vocab.len() > vocab_capacity {
        return Err(Error::Corpus(format!(
            "vocab needs {} tokens for {} facts / {} relations but capacity is {}",
            vocab.len(),
            n_facts,
            n_relations,
            vocab_capacity
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut facts = Vec::with_capacity(n_facts);
    for id in 0..n_facts {
        // (subject, relation) pairs enumerate lexicographically: unique by construction
        let s = id / n_relations;
        let r = id % n_relations;
        let object = vocab.object_token(r, rng.gen_range(0..OBJ_POOL));
        let mut fact = Fact {
            id,
            subject: vocab.subject_token(s),
            relation: vocab.relation_token(r),
            relation_idx: r,
            object,
            prompt: Vec::new(),
            answer: object,
        };
        fact.prompt = render_template(&vocab, &fact, 0);
        facts.push(fact);
    }

    let n_target = ((n_facts as f64) * target_fraction).round() as usize;
    let mut ids: Vec<usize> = (0..n_facts).collect();
    ids.shuffle(&mut rng);
    let mut target_ids: Vec<usize> = ids[..n_target].to_vec();
    let mut retain_ids: Vec<usize> = ids[n_target..].to_vec();
    target_ids.sort_unstable();
    retain_ids.sort_unstable();

    Ok(Corpus { vocab, facts, retain_ids, target_ids, n_relations, seed })
}

/// Render one template for a fact: filler characters plus entity tokens.
pub fn render_template(vocab: &Vocab, fact: &Fact, template_id: usize) -> Vec<Token> {
    let tpl = TEMPLATES[template_id];
    let mut out = Vec::new();
    let mut rest = tpl;
    while !rest.is_empty() {
        if let Some(tail) = rest.strip_prefix("{r}") {
            out.push(fact.relation);
            rest = tail;
        } else if let Some(tail) = rest.strip_prefix("{s}") {
            out.push(fact.subject);
            rest = tail;
        } else {
            let c = rest.chars().next().unwrap();
            out.push(vocab.char_token(c));
            rest = &rest[c.len_utf8()..];
        }
    }
    out
}

// ── paraphrases ──────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct ParaphraseSet {
    pub fact_id: usize,
    pub template_ids: Vec<usize>,
    pub prompts: Vec<Vec<Token>>,
}

/// N distinct prompts for a fact; the first is always the canonical form.
/// Template order is a pure function of the seed, shared across facts.
pub fn generate_paraphrases(
    vocab: &Vocab,
    fact: &Fact,
    n: usize,
    seed: u64,
) -> Result<ParaphraseSet> {
    if n == 0 {
        return Err(Error::Corpus("paraphrase count must be >= 1".into()));
    }
    if n > TEMPLATES.len() {
        return Err(Error::Corpus(format!(
            "requested {n} paraphrases but only {} templates exist",
            TEMPLATES.len()
        )));
    }
    let mut order: Vec<usize> = (1..TEMPLATES.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut template_ids = vec![0usize];
    template_ids.extend(order.into_iter().take(n - 1));
    let prompts = template_ids
        .iter()
        .map(|&tid| render_template(vocab, fact, tid))
        .collect();
    Ok(ParaphraseSet { fact_id: fact.id, template_ids, prompts })
}

/// Keep prompts whose mean-pooled hidden-state cosine against the canonical
/// prompt is >= tau. The canonical prompt itself is always retained.
pub fn filter_paraphrases(
    set: &ParaphraseSet,
    params: &ModelParams,
    adapters: &[LoraAdapter],
    tau: f64,
) -> Result<ParaphraseSet> {
    let canon_emb = model::prompt_embedding(params, adapters, &set.prompts[0])?;
    let mut template_ids = vec![set.template_ids[0]];
    let mut prompts = vec![set.prompts[0].clone()];
    for i in 1..set.prompts.len() {
        let emb = model::prompt_embedding(params, adapters, &set.prompts[i])?;
        if cosine(&canon_emb, &emb) >= tau {
            template_ids.push(set.template_ids[i]);
            prompts.push(set.prompts[i].clone());
        }
    }
    Ok(ParaphraseSet { fact_id: set.fact_id, template_ids, prompts })
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

/// Fraction of facts whose every retained paraphrase yields the canonical
/// answer under greedy decoding.
pub fn paraphrase_fidelity(
    params: &ModelParams,
    corpus: &Corpus,
    n_views: usize,
    seed: u64,
    tau: f64,
) -> Result<f64> {
    let hits = crate::par::try_map_indexed(corpus.facts.len(), |i| {
        let fact = &corpus.facts[i];
        let set = generate_paraphrases(&corpus.vocab, fact, n_views, seed)?;
        let kept = filter_paraphrases(&set, params, &[], tau)?;
        for prompt in &kept.prompts {
            let dist = model::next_token_dist(params, &[], prompt)?;
            if model::argmax(&dist) != fact.answer as usize {
                return Ok::<_, Error>(0u32);
            }
        }
        Ok(1u32)
    })?;
    Ok(hits.iter().map(|&h| h as f64).sum::<f64>() / corpus.facts.len() as f64)
}

// ── export / import ──────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct FactRecord {
    id: usize,
    subject: Token,
    relation: Token,
    relation_idx: usize,
    object: Token,
    prompt: Vec<Token>,
    answer: Token,
    split: Split,
}

/// One fact per line as a JSON record with its split tag.
pub fn export_corpus(corpus: &Corpus) -> Result<String> {
    let mut out = String::new();
    for fact in &corpus.facts {
        let rec = FactRecord {
            id: fact.id,
            subject: fact.subject,
            relation: fact.relation,
            relation_idx: fact.relation_idx,
            object: fact.object,
            prompt: fact.prompt.clone(),
            answer: fact.answer,
            split: corpus.split_of(fact.id),
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    Ok(out)
}

/// Rebuild facts and splits from an export, validating tokens against a
/// vocab built with the same corpus parameters.
pub fn import_corpus(text: &str, vocab: Vocab, n_relations: usize, seed: u64) -> Result<Corpus> {
    let mut facts = Vec::new();
    let mut retain_ids = Vec::new();
    let mut target_ids = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: FactRecord = serde_json::from_str(line)
            .map_err(|e| Error::Corpus(format!("line {}: {e}", lineno + 1)))?;
        for &t in rec.prompt.iter().chain([&rec.answer]) {
            if t as usize >= vocab.len() {
                return Err(Error::Corpus(format!(
                    "line {}: token {t} outside vocab {}",
                    lineno + 1,
                    vocab.len()
                )));
            }
        }
        match rec.split {
            Split::Retain => retain_ids.push(rec.id),
            Split::Target => target_ids.push(rec.id),
        }
        facts.push(Fact {
            id: rec.id,
            subject: rec.subject,
            relation: rec.relation,
            relation_idx: rec.relation_idx,
            object: rec.object,
            prompt: rec.prompt,
            answer: rec.answer,
        });
    }
    Ok(Corpus { vocab, facts, retain_ids, target_ids, n_relations, seed })
}
