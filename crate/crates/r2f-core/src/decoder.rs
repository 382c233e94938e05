//! Gradient decoder: maps flattened (grad_A, grad_B) pairs to full
//! projection gradients, one MLP per projection name, shared across layer
//! indices via a layer one-hot appended to the input. Layer indices unseen
//! in training use the zero one-hot, which is what makes proxy-to-target
//! transfer across depths well-posed.
//!
//! The hidden activation is the identity on [-1, 1] and saturates outside,
//! so the decoder class contains exact linear maps; planted linear targets
//! are recoverable, not just approximable.

use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::gradients::{
    flat_dist, flat_norm, AdapterSpec, FullGradient, GradientPairDataset, LoraGradient,
    FLATTEN_VERSION,
};
use crate::model::Projection;
use crate::optim::Adam;
use crate::tape::{Bindings, Graph, NodeId};
use crate::{Error, Result, Tensor};

const DEGENERATE_NORM: f64 = 1e-8;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecoderHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Fraction of pairs held out for the early-stopping curve, in (0, 0.5].
    pub holdout_fraction: f64,
    /// Early stop after this many epochs without holdout improvement.
    pub patience: usize,
    /// Hidden width is min(4 * input_width, hidden_max).
    pub hidden_max: usize,
}

impl Default for DecoderHyper {
    fn default() -> Self {
        DecoderHyper {
            epochs: 40,
            batch_size: 32,
            lr: 1e-3,
            seed: 1,
            holdout_fraction: 0.2,
            patience: 5,
            hidden_max: 4096,
        }
    }
}

/// One per-projection MLP: input -> hidden -> hidden -> d_model^2.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjDecoder {
    pub proj: Projection,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub w3: Tensor,
    pub b3: Tensor,
}

impl ProjDecoder {
    pub fn param_count(&self) -> usize {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3]
            .iter()
            .map(|t| t.numel())
            .sum()
    }

    fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.param_count());
        for t in [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3] {
            out.extend_from_slice(t.data());
        }
        out
    }

    fn load_flat(&mut self, flat: &[f32]) {
        let mut off = 0;
        for t in [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
        ] {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    /// Forward a batch of rows [n, in] -> [n, out].
    fn forward_rows(&self, x: &[f32], n: usize) -> Vec<f32> {
        let in_w = self.w1.rows();
        let h = self.w1.cols();
        let out_w = self.w3.cols();
        let mut h1 = crate::tensor::matmul(x, self.w1.data(), n, in_w, h);
        add_bias_softclip(&mut h1, self.b1.data(), n, h);
        let mut h2 = crate::tensor::matmul(&h1, self.w2.data(), n, h, h);
        add_bias_softclip(&mut h2, self.b2.data(), n, h);
        let mut out = crate::tensor::matmul(&h2, self.w3.data(), n, h, out_w);
        for i in 0..n {
            for j in 0..out_w {
                out[i * out_w + j] += self.b3.data()[j];
            }
        }
        out
    }
}

fn add_bias_softclip(x: &mut [f32], bias: &[f32], n: usize, w: usize) {
    for i in 0..n {
        for j in 0..w {
            let z = x[i * w + j] + bias[j];
            x[i * w + j] = if z.abs() <= 1.0 { z } else { z.signum() * (2.0 - 1.0 / z.abs()) };
        }
    }
}

/// Trained decoder: per-projection MLPs plus the metadata that binds them to
/// a proxy model, adapter spec, and flattening version.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub spec: AdapterSpec,
    pub model_config_hash: String,
    pub flatten_version: u32,
    /// Width of the layer one-hot: the proxy depth seen at training time.
    pub onehot_width: usize,
    pub hidden: usize,
    /// Mean training-input norm; inputs are divided by this before the MLP.
    pub input_scale: f64,
    pub seed: u64,
    pub decoders: Vec<ProjDecoder>,
}

impl DecoderParams {
    pub fn input_width(&self) -> usize {
        self.spec.lora_entry_width() + self.onehot_width
    }

    pub fn param_count(&self) -> usize {
        self.decoders.iter().map(|d| d.param_count()).sum()
    }

    fn decoder_for(&self, proj: Projection) -> Result<&ProjDecoder> {
        self.decoders
            .iter()
            .find(|d| d.proj == proj)
            .ok_or_else(|| Error::Incompatible(format!("no decoder for projection {:?}", proj)))
    }

    /// Input row for one gradient entry: [grad_A | grad_B] / s | onehot(layer).
    fn input_row(&self, layer: usize, ga: &[f32], gb: &[f32]) -> Vec<f32> {
        let mut row = Vec::with_capacity(self.input_width());
        let s = self.input_scale as f32;
        row.extend(ga.iter().map(|v| v / s));
        row.extend(gb.iter().map(|v| v / s));
        let mut onehot = vec![0f32; self.onehot_width];
        if layer < self.onehot_width {
            onehot[layer] = 1.0;
        }
        row.extend(onehot);
        row
    }
}

/// All-zero decoder (zero MLPs, unit scale): decodes everything to zero.
pub fn zero_decoder(spec: &AdapterSpec, model_config_hash: &str, hidden_max: usize) -> DecoderParams {
    let in_w = spec.lora_entry_width() + spec.n_layers;
    let hidden = (4 * in_w).min(hidden_max);
    let out_w = spec.full_entry_width();
    let decoders = spec_projections(spec)
        .into_iter()
        .map(|proj| ProjDecoder {
            proj,
            w1: Tensor::zeros(vec![in_w, hidden]),
            b1: Tensor::zeros(vec![hidden]),
            w2: Tensor::zeros(vec![hidden, hidden]),
            b2: Tensor::zeros(vec![hidden]),
            w3: Tensor::zeros(vec![hidden, out_w]),
            b3: Tensor::zeros(vec![out_w]),
        })
        .collect();
    DecoderParams {
        spec: spec.clone(),
        model_config_hash: model_config_hash.to_string(),
        flatten_version: FLATTEN_VERSION,
        onehot_width: spec.n_layers,
        hidden,
        input_scale: 1.0,
        seed: 0,
        decoders,
    }
}

/// Seeded Gaussian initialization of the decoder MLPs.
pub fn init_decoder(
    spec: &AdapterSpec,
    model_config_hash: &str,
    hidden_max: usize,
    seed: u64,
) -> DecoderParams {
    let mut dec = zero_decoder(spec, model_config_hash, hidden_max);
    dec.seed = seed;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for d in dec.decoders.iter_mut() {
        for t in [&mut d.w1, &mut d.w2, &mut d.w3] {
            let fan_in = t.rows() as f64;
            let std = 1.0 / fan_in.sqrt();
            *t = gaussian_tensor(&mut rng, t.shape().to_vec(), std);
        }
    }
    dec
}

fn gaussian_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor {
    use rand::Rng;
    Tensor::from_fn(shape, |_| {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        (z * std) as f32
    })
}

fn spec_projections(spec: &AdapterSpec) -> Vec<Projection> {
    let mut p = spec.targets.clone();
    crate::model::sort_projections(&mut p);
    p
}

// ── decode ───────────────────────────────────────────────────────────

/// Map a LoRA gradient to a full-gradient reconstruction, one MLP pass per
/// (layer, projection) entry. Deterministic; rejects shape or version
/// mismatches against the training-time header.
pub fn decode(dec: &DecoderParams, lora: &LoraGradient) -> Result<FullGradient> {
    if dec.flatten_version != FLATTEN_VERSION {
        return Err(Error::Incompatible(format!(
            "decoder flatten version {} vs runtime {}",
            dec.flatten_version, FLATTEN_VERSION
        )));
    }
    let d = dec.spec.d_model;
    let r = dec.spec.rank;
    let mut entries = Vec::with_capacity(lora.entries.len());
    for e in &lora.entries {
        if e.grad_a.shape() != [d, r] || e.grad_b.shape() != [r, d] {
            return Err(Error::Incompatible(format!(
                "gradient entry (layer {}, {:?}) has shape {:?}/{:?}, decoder wants d={d} r={r}",
                e.layer,
                e.proj,
                e.grad_a.shape(),
                e.grad_b.shape()
            )));
        }
        let mlp = dec.decoder_for(e.proj)?;
        let row = dec.input_row(e.layer, e.grad_a.data(), e.grad_b.data());
        let out = mlp.forward_rows(&row, 1);
        entries.push(crate::gradients::FullGradEntry {
            layer: e.layer,
            proj: e.proj,
            grad_w: Tensor::new(vec![d, d], out)?,
        });
    }
    Ok(FullGradient { entries })
}

// ── training ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub train_mse: f64,
    pub holdout_mse: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: DecoderParams,
    pub curve: Vec<CurvePoint>,
    pub initial_holdout_mse: f64,
    pub final_holdout_mse: f64,
    pub selected_epoch: usize,
    /// Pair indices (into the dataset) of the holdout split.
    pub holdout_pairs: Vec<usize>,
}

struct RowSet {
    inputs: Vec<f32>,
    targets: Vec<f32>,
    rows: usize,
}

/// Fit the decoder by MSE on proxy pairs. Pairs (not rows) are split into
/// train/holdout; the returned params come from the best-holdout epoch.
pub fn train_decoder(
    pairs: &GradientPairDataset,
    hyper: &DecoderHyper,
) -> Result<TrainOutcome> {
    if pairs.pairs.len() < 50 {
        return Err(Error::Config(format!(
            "decoder training needs >= 50 pairs, got {}",
            pairs.pairs.len()
        )));
    }
    if !(hyper.holdout_fraction > 0.0 && hyper.holdout_fraction <= 0.5) {
        return Err(Error::Config(format!(
            "holdout fraction must be in (0, 0.5], got {}",
            hyper.holdout_fraction
        )));
    }
    if pairs.header.flatten_version != FLATTEN_VERSION {
        return Err(Error::Incompatible(format!(
            "dataset flatten version {} vs runtime {}",
            pairs.header.flatten_version, FLATTEN_VERSION
        )));
    }
    let spec = pairs.header.adapter_spec.clone();

    // deterministic pair split
    let n = pairs.pairs.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    order.shuffle(&mut rng);
    let n_holdout = ((n as f64 * hyper.holdout_fraction).round() as usize).max(1);
    let holdout_idx: Vec<usize> = order[..n_holdout].to_vec();
    let train_idx: Vec<usize> = order[n_holdout..].to_vec();

    // mean input norm over raw training rows
    let mut norm_sum = 0f64;
    let mut norm_count = 0usize;
    for &pi in &train_idx {
        for e in &pairs.pairs[pi].lora.entries {
            let mut sq = 0f64;
            for &v in e.grad_a.data().iter().chain(e.grad_b.data()) {
                sq += v as f64 * v as f64;
            }
            norm_sum += sq.sqrt();
            norm_count += 1;
        }
    }
    let input_scale = (norm_sum / norm_count.max(1) as f64).max(1e-12);

    let mut dec = init_decoder(&spec, &pairs.header.model_config_hash, hyper.hidden_max, hyper.seed);
    dec.input_scale = input_scale;

    if hyper.epochs == 0 {
        let h0 = holdout_mse(&dec, pairs, &holdout_idx);
        return Ok(TrainOutcome {
            params: dec,
            curve: Vec::new(),
            initial_holdout_mse: h0,
            final_holdout_mse: h0,
            selected_epoch: 0,
            holdout_pairs: holdout_idx,
        });
    }

    // per-projection row sets from the training pairs
    let projections = spec_projections(&spec);
    let row_sets: Vec<RowSet> = projections
        .iter()
        .map(|&proj| build_rows(&dec, pairs, &train_idx, proj))
        .collect();

    let mut optimizers: Vec<Adam> = dec
        .decoders
        .iter()
        .map(|d| Adam::new(d.param_count(), hyper.lr))
        .collect();
    let mut flats: Vec<Vec<f32>> = dec.decoders.iter().map(|d| d.flatten()).collect();

    let initial_holdout = holdout_mse(&dec, pairs, &holdout_idx);
    let mut best = (0usize, initial_holdout, dec.clone());
    let mut curve = Vec::new();
    let mut stale = 0usize;

    for epoch in 1..=hyper.epochs {
        let mut train_sq_sum = 0f64;
        let mut train_rows = 0usize;
        for (pi, rows) in row_sets.iter().enumerate() {
            let (sq, cnt) = train_one_projection(
                &mut dec.decoders[pi],
                &mut flats[pi],
                &mut optimizers[pi],
                rows,
                hyper,
                epoch,
            )?;
            train_sq_sum += sq;
            train_rows += cnt;
        }
        let train_mse = train_sq_sum / train_rows.max(1) as f64;
        if !train_mse.is_finite() {
            return Err(Error::Divergence(format!(
                "decoder training MSE non-finite at epoch {epoch}"
            )));
        }
        let hold = holdout_mse(&dec, pairs, &holdout_idx);
        curve.push(CurvePoint { epoch, train_mse, holdout_mse: hold });
        if hold < best.1 {
            best = (epoch, hold, dec.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= hyper.patience {
                break;
            }
        }
    }

    let (selected_epoch, final_holdout, params) = best;
    Ok(TrainOutcome {
        params,
        curve,
        initial_holdout_mse: initial_holdout,
        final_holdout_mse: final_holdout,
        selected_epoch,
        holdout_pairs: holdout_idx,
    })
}

fn build_rows(
    dec: &DecoderParams,
    pairs: &GradientPairDataset,
    idx: &[usize],
    proj: Projection,
) -> RowSet {
    let in_w = dec.input_width();
    let out_w = dec.spec.full_entry_width();
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    let mut rows = 0usize;
    for &pi in idx {
        let pair = &pairs.pairs[pi];
        for (le, fe) in pair.lora.entries.iter().zip(&pair.full.entries) {
            if le.proj != proj {
                continue;
            }
            inputs.extend(dec.input_row(le.layer, le.grad_a.data(), le.grad_b.data()));
            targets.extend_from_slice(fe.grad_w.data());
            rows += 1;
        }
    }
    debug_assert_eq!(inputs.len(), rows * in_w);
    debug_assert_eq!(targets.len(), rows * out_w);
    RowSet { inputs, targets, rows }
}

/// One epoch of minibatch Adam for a single projection decoder. Returns the
/// accumulated squared error (per row, summed) and row count for the epoch.
fn train_one_projection(
    mlp: &mut ProjDecoder,
    flat: &mut Vec<f32>,
    adam: &mut Adam,
    rows: &RowSet,
    hyper: &DecoderHyper,
    epoch: usize,
) -> Result<(f64, usize)> {
    let in_w = mlp.w1.rows();
    let h = mlp.w1.cols();
    let out_w = mlp.w3.cols();
    if rows.rows == 0 {
        return Ok((0.0, 0));
    }
    // epoch-specific deterministic order
    let mut order: Vec<usize> = (0..rows.rows).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ (0x9e37_79b9 + epoch as u64));
    order.shuffle(&mut rng);

    let mut sq_sum = 0f64;
    let mut graph_cache: Option<(usize, MlpGraph)> = None;
    for chunk in order.chunks(hyper.batch_size) {
        let b = chunk.len();
        let mut x = Vec::with_capacity(b * in_w);
        let mut y = Vec::with_capacity(b * out_w);
        for &ri in chunk {
            x.extend_from_slice(&rows.inputs[ri * in_w..(ri + 1) * in_w]);
            y.extend_from_slice(&rows.targets[ri * out_w..(ri + 1) * out_w]);
        }
        let xt = Tensor::new(vec![b, in_w], x)?;
        let yt = Tensor::new(vec![b, out_w], y)?;

        let needs_build = graph_cache.as_ref().map(|(n, _)| *n != b).unwrap_or(true);
        if needs_build {
            graph_cache = Some((b, build_mlp_graph(b, in_w, h, out_w)?));
        }
        let (_, mg) = graph_cache.as_ref().unwrap();

        let mut bind = Bindings::new();
        bind.bind("x", &xt);
        bind.bind("y", &yt);
        bind.bind("w1", &mlp.w1);
        bind.bind("b1", &mlp.b1);
        bind.bind("w2", &mlp.w2);
        bind.bind("b2", &mlp.b2);
        bind.bind("w3", &mlp.w3);
        bind.bind("b3", &mlp.b3);
        let eval = mg.graph.forward(&bind)?;
        // loss is per-element mean; track the per-row squared error sum
        let loss = eval.scalar_f64(mg.loss);
        sq_sum += loss * (b * out_w) as f64;
        let grads = mg.graph.backward(&eval, mg.loss)?;

        let mut gflat = Vec::with_capacity(flat.len());
        for name in ["w1", "b1", "w2", "b2", "w3", "b3"] {
            gflat.extend_from_slice(grads.get(name).expect("mlp grad").data());
        }
        adam.step(flat, &gflat);
        mlp.load_flat(flat);
    }
    Ok((sq_sum / out_w as f64 * out_w as f64, rows.rows))
}

struct MlpGraph {
    graph: Graph,
    loss: NodeId,
}

fn build_mlp_graph(b: usize, in_w: usize, h: usize, out_w: usize) -> Result<MlpGraph> {
    let mut g = Graph::new();
    let x = g.input("x", vec![b, in_w]);
    let y = g.input("y", vec![b, out_w]);
    let w1 = g.input("w1", vec![in_w, h]);
    let b1 = g.input("b1", vec![h]);
    let w2 = g.input("w2", vec![h, h]);
    let b2 = g.input("b2", vec![h]);
    let w3 = g.input("w3", vec![h, out_w]);
    let b3 = g.input("b3", vec![out_w]);
    let z1 = g.matmul(x, w1)?;
    let z1b = g.add_bias(z1, b1)?;
    let h1 = g.soft_clip(z1b);
    let z2 = g.matmul(h1, w2)?;
    let z2b = g.add_bias(z2, b2)?;
    let h2 = g.soft_clip(z2b);
    let z3 = g.matmul(h2, w3)?;
    let out = g.add_bias(z3, b3)?;
    let loss = g.mean_sq_diff(out, y)?;
    Ok(MlpGraph { graph: g, loss })
}

fn holdout_mse(dec: &DecoderParams, pairs: &GradientPairDataset, idx: &[usize]) -> f64 {
    if idx.is_empty() {
        return 0.0;
    }
    let subset: Vec<&crate::gradients::GradientPair> =
        idx.iter().map(|&i| &pairs.pairs[i]).collect();
    mse_over(dec, &subset)
}

/// Mean squared Euclidean error across pairs, all projections concatenated.
pub fn decoder_mse(dec: &DecoderParams, pairs: &[&crate::gradients::GradientPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Config("decoder_mse over empty pair set".into()));
    }
    Ok(mse_over(dec, pairs))
}

fn mse_over(dec: &DecoderParams, pairs: &[&crate::gradients::GradientPair]) -> f64 {
    let mut total = 0f64;
    for p in pairs {
        let decoded = decode(dec, &p.lora).expect("decode in mse");
        let d = flat_dist(&decoded.flatten(), &p.full.flatten());
        total += d * d;
    }
    total / pairs.len() as f64
}

// ── reconstruction quality ───────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QualityStats {
    pub mean_cosine: f64,
    pub median_cosine: f64,
    pub min_cosine: f64,
    pub used: usize,
    pub degenerate_true: usize,
    pub degenerate_output: usize,
}

/// Per-pair cosine between decoded and true full gradients. Pairs with a
/// vanishing true (or decoded) gradient are excluded and counted.
pub fn reconstruction_quality(
    dec: &DecoderParams,
    pairs: &[&crate::gradients::GradientPair],
) -> Result<QualityStats> {
    let mut cosines = Vec::new();
    let mut degenerate_true = 0;
    let mut degenerate_output = 0;
    for p in pairs {
        let decoded = decode(dec, &p.lora)?.flatten();
        let truth = p.full.flatten();
        let nt = flat_norm(&truth);
        let nd = flat_norm(&decoded);
        if nt < DEGENERATE_NORM {
            degenerate_true += 1;
            continue;
        }
        if nd < DEGENERATE_NORM {
            degenerate_output += 1;
            continue;
        }
        let dot: f64 = decoded
            .iter()
            .zip(&truth)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        cosines.push(dot / (nt * nd));
    }
    cosines.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let used = cosines.len();
    let (mean, median, min) = if used == 0 {
        (0.0, 0.0, 0.0)
    } else {
        (
            cosines.iter().sum::<f64>() / used as f64,
            cosines[used / 2],
            cosines[0],
        )
    };
    Ok(QualityStats {
        mean_cosine: mean,
        median_cosine: median,
        min_cosine: min,
        used,
        degenerate_true,
        degenerate_output,
    })
}
