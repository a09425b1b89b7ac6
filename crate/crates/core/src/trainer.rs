//! Adam training of `L = L_gen + λ·L_con`, the epoch loop, and the six-way
//! ablation comparison.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::contrastive_loss;
use crate::corpus::observation_clauses;
use crate::corpus::{build_vocab, encode_report_view, EncodedReport, Report, Vocab};
use crate::decoder::DecodeMode;
use crate::encoders::ModelConfig;
use crate::error::{Error, Result};
use crate::rougeval::{evaluate_corpus, RougeScores};
use crate::tensor::{ParamStore, Tape, Tensor};

pub use crate::model::Ablation;
use crate::model::Model;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Reports per step, and pairs per contrastive batch.
    pub batch_size: usize,
    pub lambda: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    pub epochs: usize,
    pub seed: u64,
    pub ablation: Ablation,
    /// Validate every this many epochs, and after the last.
    pub eval_every: usize,
    pub max_gen_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            lambda: 1.0,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            epochs: 20,
            seed: 0,
            ablation: Ablation::BaseApDca,
            eval_every: 1,
            max_gen_len: 48,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if self.ablation.uses_alignment() && self.lambda > 0.0 && self.batch_size < 2 {
            return Err(Error::Config("contrastive training needs batch_size ≥ 2".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be ≥ 0, got {}", self.lambda)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be ≥ 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || !(self.clip_norm >= 0.0) {
            return Err(Error::Config("eps must be > 0 and clip_norm ≥ 0".into()));
        }
        if self.eval_every == 0 || self.max_gen_len == 0 {
            return Err(Error::Config("eval_every and max_gen_len must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Bias-corrected Adam over every parameter in a store.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients held in `store`.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, p) in store.params_mut().iter_mut().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.grad.len() {
                let g = p.grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            }
            if self.lr == 0.0 {
                continue;
            }
            let data = p.value.data_mut();
            for i in 0..data.len() {
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Losses of one step, before the update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub gen: f64,
    pub con: f64,
    pub lambda: f64,
    pub total: f64,
}

/// Forward and backward over one batch; gradients are left in the store.
pub fn compute_gradients(model: &mut Model, batch: &[EncodedReport], cfg: &TrainConfig) -> Result<LossBundle> {
    if batch.is_empty() {
        return Err(Error::Batch("empty training batch".into()));
    }
    let ablation = cfg.ablation;
    let mut tape = Tape::new();
    let mut gen_terms = Vec::with_capacity(batch.len());
    let mut zi = Vec::with_capacity(batch.len());
    let mut zt = Vec::with_capacity(batch.len());
    for r in batch {
        let (loss, g) = model.report_loss(&mut tape, r, ablation)?;
        gen_terms.push(loss);
        zi.extend(g.z_image);
        zt.extend(g.z_text);
    }
    let mut gen_sum = gen_terms[0];
    for &l in &gen_terms[1..] {
        gen_sum = tape.add(gen_sum, l)?;
    }
    let gen = tape.scale(gen_sum, 1.0 / batch.len() as f64);
    let con = if ablation.uses_alignment() && batch.len() >= 2 {
        Some(contrastive_loss(&mut tape, &zi, &zt, model.config.tau, model.config.denominator)?)
    } else {
        None
    };
    let total = match con {
        Some(c) if cfg.lambda > 0.0 => {
            let weighted = tape.scale(c, cfg.lambda);
            tape.add(gen, weighted)?
        }
        _ => gen,
    };
    let gen_v = tape.value(gen).item();
    let con_v = con.map_or(0.0, |c| tape.value(c).item());
    let bundle = LossBundle {
        gen: gen_v,
        con: con_v,
        lambda: cfg.lambda,
        total: gen_v + cfg.lambda * con_v,
    };
    if !(bundle.gen.is_finite() && bundle.con.is_finite() && bundle.total.is_finite()) {
        return Err(Error::Divergence(format!(
            "non-finite loss: gen={} con={} total={} (ablation {ablation}, batch of {})",
            bundle.gen,
            bundle.con,
            bundle.total,
            batch.len()
        )));
    }
    let grads = tape.backward(total)?;
    model.store.zero_grad();
    model.store.accumulate(&tape, &grads);
    Ok(bundle)
}

/// One optimization step. Returns the pre-update losses.
pub fn train_step(model: &mut Model, adam: &mut Adam, batch: &[EncodedReport], cfg: &TrainConfig) -> Result<LossBundle> {
    let bundle = compute_gradients(model, batch, cfg)?;
    let norm = model.store.grad_norm();
    if !norm.is_finite() {
        return Err(Error::Divergence(format!("non-finite gradient norm at step {}", adam.steps() + 1)));
    }
    if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
        let s = cfg.clip_norm / norm;
        for p in model.store.params_mut() {
            p.grad.iter_mut().for_each(|g| *g *= s);
        }
    }
    adam.step(&mut model.store);
    Ok(bundle)
}

/// One JSONL line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub gen: f64,
    pub con: f64,
    pub total: f64,
    pub val_r1: f64,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub history: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_val_r1: f64,
}

/// Encodes reports with the text view the ablation needs.
pub fn encode_all(reports: &[Report], vocab: &Vocab, ablation: Ablation) -> Result<Vec<EncodedReport>> {
    reports
        .iter()
        .map(|r| encode_report_view(r, vocab, ablation.text_view()))
        .collect()
}

/// Trains `model` in place. With validation data, the parameters of the best
/// validation epoch are restored at the end; otherwise the final ones are kept.
pub fn fit(
    model: &mut Model,
    train: &[EncodedReport],
    val: &[EncodedReport],
    vocab: &Vocab,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<FitOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    let mut adam = Adam::new(&model.store, cfg);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_f17);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Vec<Tensor>)> = None;
    let mut last_r1 = 0.0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut gen, mut con, mut total, mut steps) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<EncodedReport> = chunk.iter().map(|&i| train[i].clone()).collect();
            let b = train_step(model, &mut adam, &batch, cfg).map_err(|e| match e {
                Error::Divergence(msg) => Error::Divergence(format!("epoch {epoch}, step {}: {msg}", adam.steps())),
                other => other,
            })?;
            gen += b.gen;
            con += b.con;
            total += b.total;
            steps += 1;
        }
        if !val.is_empty() && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs) {
            last_r1 = evaluate(model, val, vocab, cfg.ablation, DecodeMode::Greedy, cfg.max_gen_len)?.scores.rouge1.f1;
            if best.as_ref().map_or(true, |(_, r, _)| last_r1 > *r) {
                let snapshot = model.store.iter().map(|(_, p)| p.value.clone()).collect();
                best = Some((epoch, last_r1, snapshot));
            }
        }
        let k = steps as f64;
        let m = EpochMetrics {
            epoch,
            gen: gen / k,
            con: con / k,
            total: total / k,
            val_r1: last_r1,
        };
        on_epoch(&m);
        history.push(m);
    }
    let (best_epoch, best_val_r1) = match best {
        Some((e, r, snapshot)) => {
            for (p, v) in model.store.params_mut().iter_mut().zip(snapshot) {
                p.value = v;
            }
            (e, r)
        }
        None => (cfg.epochs, last_r1),
    };
    Ok(FitOutcome {
        history,
        best_epoch,
        best_val_r1,
    })
}

/// Mean teacher-forced generation loss.
pub fn mean_generation_loss(model: &Model, data: &[EncodedReport], ablation: Ablation) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("no reports to score".into()));
    }
    let mut sum = 0.0;
    for r in data {
        let mut tape = Tape::new();
        let (loss, _) = model.report_loss(&mut tape, r, ablation)?;
        sum += tape.value(loss).item();
    }
    Ok(sum / data.len() as f64)
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    /// `(id, generated text)` per report.
    pub predictions: Vec<(String, String)>,
    pub scores: RougeScores,
    /// Fraction of reports whose generated observation clauses equal the reference's.
    pub fc: f64,
}

/// Generates for every report and scores against its framed target.
pub fn evaluate(
    model: &Model,
    data: &[EncodedReport],
    vocab: &Vocab,
    ablation: Ablation,
    mode: DecodeMode,
    max_gen_len: usize,
) -> Result<Evaluation> {
    let mut predictions = Vec::with_capacity(data.len());
    let mut references = Vec::with_capacity(data.len());
    let mut exact = 0usize;
    for r in data {
        let out = model.generate(r, ablation, mode, max_gen_len, Some(vocab))?;
        let reference = vocab.decode(&r.target_ids);
        if observation_clauses(&out.text) == observation_clauses(&reference) {
            exact += 1;
        }
        predictions.push((r.id.clone(), out.text));
        references.push((r.id.clone(), reference));
    }
    let report = evaluate_corpus(&predictions, &references)?;
    Ok(Evaluation {
        predictions,
        scores: report.mean,
        fc: if data.is_empty() { 0.0 } else { exact as f64 / data.len() as f64 },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub ablation: Ablation,
    /// Contrastive weight used, for variants with alignment.
    pub lambda: Option<f64>,
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    /// Observation-clause exact-match accuracy.
    pub fc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, a: Ablation) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.ablation == a)
    }

    /// Fixed-width text table, F1 values in points.
    pub fn render(&self) -> String {
        let mut s = format!("{:<14} {:>7} {:>7} {:>7} {:>7}\n", "model", "R-1", "R-2", "R-L", "FC");
        for r in &self.rows {
            s.push_str(&format!(
                "{:<14} {:>7.2} {:>7.2} {:>7.2} {:>7.2}\n",
                r.ablation.name(),
                100.0 * r.rouge1,
                100.0 * r.rouge2,
                100.0 * r.rouge_l,
                100.0 * r.fc
            ));
        }
        s
    }
}

/// Result of training one variant.
#[derive(Clone, Debug)]
pub struct AblationRun {
    pub row: AblationRow,
    pub fit: FitOutcome,
    pub model: Model,
}

/// Trains one variant with validation-based selection and scores it on `test`.
pub fn run_variant(
    ablation: Ablation,
    train: &[Report],
    val: &[Report],
    test: &[Report],
    vocab: &Vocab,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<AblationRun> {
    let cfg = TrainConfig {
        ablation,
        ..train_cfg.clone()
    };
    let mc = ModelConfig {
        vocab_size: vocab.len(),
        ..model_cfg.clone()
    };
    let mut model = Model::new(mc, cfg.seed)?;
    let lambda = ablation.uses_alignment().then_some(cfg.lambda);
    let tr = encode_all(train, vocab, ablation)?;
    let va = encode_all(val, vocab, ablation)?;
    let te = encode_all(test, vocab, ablation)?;
    let fit = fit(&mut model, &tr, &va, vocab, &cfg, |_| {})?;
    let ev = evaluate(&model, &te, vocab, ablation, DecodeMode::Greedy, cfg.max_gen_len)?;
    Ok(AblationRun {
        row: AblationRow {
            ablation,
            lambda,
            rouge1: ev.scores.rouge1.f1,
            rouge2: ev.scores.rouge2.f1,
            rouge_l: ev.scores.rouge_l.f1,
            fc: ev.fc,
        },
        fit,
        model,
    })
}

/// Trains all six variants under the same seed and budget, on up to `threads`
/// worker threads, one model replica each.
///
/// Variants with alignment train once per entry of `lambdas` and keep the
/// weight with the best validation R-1; an empty grid means `train_cfg.lambda`.
pub fn ablate(
    train: &[Report],
    val: &[Report],
    test: &[Report],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    lambdas: &[f64],
    threads: usize,
) -> Result<AblationTable> {
    let vocab = build_vocab(train, 1);
    let grid: Vec<f64> = if lambdas.is_empty() { vec![train_cfg.lambda] } else { lambdas.to_vec() };
    let jobs: Vec<(Ablation, f64)> = Ablation::ALL
        .iter()
        .flat_map(|&a| {
            let ls = if a.uses_alignment() { grid.clone() } else { vec![train_cfg.lambda] };
            ls.into_iter().map(move |l| (a, l))
        })
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let runs = pool.install(|| {
        jobs.par_iter()
            .map(|&(a, lambda)| {
                let cfg = TrainConfig { lambda, ..train_cfg.clone() };
                run_variant(a, train, val, test, &vocab, model_cfg, &cfg)
                    .map(|r| (r.row, r.fit.best_val_r1))
                    .map_err(|e| with_context(e, a))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut rows: Vec<AblationRow> = Vec::with_capacity(Ablation::ALL.len());
    let mut best_val: Vec<f64> = Vec::with_capacity(Ablation::ALL.len());
    for (row, val_r1) in runs {
        match rows.iter().position(|r| r.ablation == row.ablation) {
            Some(i) if val_r1 > best_val[i] => {
                rows[i] = row;
                best_val[i] = val_r1;
            }
            Some(_) => {}
            None => {
                rows.push(row);
                best_val.push(val_r1);
            }
        }
    }
    Ok(AblationTable { rows })
}

fn with_context(e: Error, a: Ablation) -> Error {
    match e {
        Error::Divergence(m) => Error::Divergence(format!("{a}: {m}")),
        Error::Config(m) => Error::Config(format!("{a}: {m}")),
        other => other,
    }
}

#[cfg(test)]
mod tests;
