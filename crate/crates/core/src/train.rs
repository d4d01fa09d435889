//! Objective, optimiser and training loop.

use std::io::Write;
use std::path::Path;

use ndarray::{s, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions};
use crate::gnn::vae::teacher_forced;
use crate::gnn::{single, Batch, Family, Model};
use crate::nn::ParamSet;
use crate::par::{map_indexed, Exec};
use crate::simulate::Dataset;

fn check_sigma2(sigma2: f64) -> Result<()> {
    if sigma2 > 0.0 && sigma2.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("sigma2 must be positive, got {sigma2}")))
    }
}

/// `Σ (x − μ)² / (2σ²) + ½ log(2πσ²)`, summed over every element.
pub fn gaussian_nll(x: &Mat, mu: &Mat, sigma2: f64) -> Result<f64> {
    check_sigma2(sigma2)?;
    if x.dim() != mu.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", x.dim(), mu.dim())));
    }
    let sq: f64 = (x - mu).mapv(|v| v * v).sum();
    Ok(sq / (2.0 * sigma2) + 0.5 * (2.0 * std::f64::consts::PI * sigma2).ln() * x.len() as f64)
}

/// Tape version of [`gaussian_nll`] with a constant target.
pub fn gaussian_nll_var(g: &Graph, mu: Var, x: &Mat, sigma2: f64) -> Result<Var> {
    check_sigma2(sigma2)?;
    if g.shape(mu) != x.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", g.shape(mu), x.dim())));
    }
    let diff = g.sub(mu, g.constant(x.clone()));
    let quad = g.scale(g.sum_all(g.mul(diff, diff)), 1.0 / (2.0 * sigma2));
    let constant = 0.5 * (2.0 * std::f64::consts::PI * sigma2).ln() * x.len() as f64;
    Ok(g.add(quad, g.constant(Mat::from_elem((1, 1), constant))))
}

/// `Σ_rows Σ_k q_k (log q_k − log p_k)` with `q`, `p` given as logits.
pub fn kl_categorical_var(g: &Graph, q_logits: Var, p_logits: Var) -> Result<Var> {
    if g.shape(q_logits) != g.shape(p_logits) {
        return Err(Error::Shape("posterior and prior logits differ in shape".into()));
    }
    let lq = g.log_softmax_rows(q_logits);
    let lp = g.log_softmax_rows(p_logits);
    let q = g.softmax_rows(q_logits);
    Ok(g.sum_all(g.mul(q, g.sub(lq, lp))))
}

/// Numeric [`kl_categorical_var`] over rows of logits.
pub fn kl_categorical(q_logits: &Mat, p_logits: &Mat) -> Result<f64> {
    let g = Graph::new();
    let q = g.constant(q_logits.clone());
    let p = g.constant(p_logits.clone());
    let kl = kl_categorical_var(&g, q, p)?;
    Ok(g.scalar(kl))
}

/// Loss terms on the tape, each averaged over the systems of the batch.
pub struct ElboTerms {
    pub total: Var,
    pub recon: Var,
    pub kl: Var,
}

/// Negative ELBO of a teacher-forced pass with soft posterior edges.
/// `systems` is the normaliser (the full minibatch size when `batch` is one
/// chunk of it).
pub fn elbo_loss(
    g: &Graph,
    model: &Model,
    batch: &Batch,
    sigma2: f64,
    systems: usize,
    rng: &mut impl Rng,
) -> Result<ElboTerms> {
    let out = teacher_forced(g, model, batch, false, false, rng)?;
    let norm = 1.0 / systems.max(1) as f64;
    let recon = g.scale(gaussian_nll_var(g, out.mu, &out.target, sigma2)?, norm);
    let kl = g.scale(kl_categorical_var(g, out.posterior_logits, out.prior_logits)?, norm);
    Ok(ElboTerms {
        total: g.add(recon, kl),
        recon,
        kl,
    })
}

/// Mean squared next-position error, scaled by `rows_here / rows_total` so
/// chunk losses add up to the minibatch mean.
pub fn position_loss(g: &Graph, model: &Model, batch: &Batch, weight: f64) -> Result<Var> {
    if batch.steps() < 2 {
        return Err(Error::InvalidInput("single-step training needs two steps".into()));
    }
    let d = batch.d;
    let pred = single::predict(g, model, batch, &batch.states[0])?;
    let target = batch.states[1].slice(s![.., ..d]).to_owned();
    let diff = g.sub(pred, g.constant(target));
    let count = (batch.systems * batch.n * d) as f64;
    Ok(g.scale(g.sum_all(g.mul(diff, diff)), weight / count))
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(ps: &ParamSet, lr: f64) -> Self {
        let zeros: Vec<Mat> = ps.entries().iter().map(|e| Mat::zeros(e.value.dim())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Updates the trainable tensors of `ps` in place.
    pub fn step(&mut self, ps: &mut ParamSet, grads: &[Mat]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let trainable: Vec<bool> = ps.entries().iter().map(|e| e.trainable).collect();
        for (i, grad) in grads.iter().enumerate() {
            if !trainable[i] {
                continue;
            }
            let (b1, b2) = (self.beta1, self.beta2);
            self.m[i].zip_mut_with(grad, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            self.v[i].zip_mut_with(grad, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let (lr, eps) = (self.lr, self.eps);
            let step = ndarray::Zip::from(&self.m[i])
                .and(&self.v[i])
                .map_collect(|&m, &v| lr * (m / c1) / ((v / c2).sqrt() + eps));
            let p = ps.get_mut(crate::nn::ParamId(i));
            *p -= &step;
        }
    }
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Mat], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.mapv(|v| v * v).sum()).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.mapv_inplace(|v| v * s));
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Reconstruction variance `σ²`.
    pub sigma2: f64,
    pub seed: u64,
    pub clip_norm: f64,
    /// Systems per gradient chunk; fixed so results do not depend on the
    /// number of workers.
    pub chunk: usize,
    /// Use only the first this-many training simulations.
    pub train_sims: Option<usize>,
    /// Train on the leading this-many recorded steps.
    pub train_steps: Option<usize>,
    /// Validation simulations per epoch.
    pub val_sims: usize,
    /// Free-running steps scored on validation (sequence models).
    pub val_horizon: usize,
    /// Observed steps before validation rollouts; the setting's input
    /// length when unset.
    pub val_burn_in: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            batch_size: 32,
            epochs: 50,
            sigma2: 1e-5,
            seed: 0,
            clip_norm: 5.0,
            chunk: 8,
            train_sims: None,
            train_steps: None,
            val_sims: 100,
            val_horizon: 10,
            val_burn_in: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        check_sigma2(self.sigma2)?;
        if self.batch_size == 0 || self.chunk == 0 {
            return bad("batch and chunk sizes must be positive");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if self.train_steps.is_some_and(|t| t < 2) {
            return bad("train_steps must be at least 2");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub train_loss: f64,
    pub recon: f64,
    pub kl: f64,
    pub val_mse: f64,
}

pub const LOG_HEADER: &str = "epoch,step,train_loss,recon,kl,val_mse";

pub fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{LOG_HEADER}")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{:.8e},{:.8e},{:.8e},{:.8e}",
            r.epoch, r.step, r.train_loss, r.recon, r.kl, r.val_mse
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default)]
struct StepLoss {
    total: f64,
    recon: f64,
    kl: f64,
}

fn chunk_seed(seed: u64, step: usize, chunk: usize) -> u64 {
    seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (chunk as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

/// Loss and summed parameter gradients of one minibatch.
fn minibatch_gradient(
    model: &Model,
    ds: &Dataset,
    idx: &[usize],
    cfg: &TrainConfig,
    steps: usize,
    step: usize,
    exec: Exec,
) -> Result<(Vec<Mat>, StepLoss)> {
    let chunks: Vec<&[usize]> = idx.chunks(cfg.chunk).collect();
    let family = model.cfg.variant.family();
    let results = map_indexed(exec, chunks.len(), |c| -> Result<(Vec<Mat>, StepLoss)> {
        let batch = Batch::from_dataset(ds, chunks[c], 0..steps)?;
        let g = model.params.graph();
        let (loss, parts) = if family == Family::Vae {
            let mut rng = ChaCha8Rng::seed_from_u64(chunk_seed(cfg.seed, step, c));
            let t = elbo_loss(&g, model, &batch, cfg.sigma2, idx.len(), &mut rng)?;
            let parts = StepLoss {
                total: g.scalar(t.total),
                recon: g.scalar(t.recon),
                kl: g.scalar(t.kl),
            };
            (t.total, parts)
        } else {
            let w = chunks[c].len() as f64 / idx.len() as f64;
            let l = position_loss(&g, model, &batch, w)?;
            let v = g.scalar(l);
            (l, StepLoss { total: v, recon: v, kl: 0.0 })
        };
        let mut grads = g.backward(loss);
        Ok((model.params.collect_grads(&mut grads), parts))
    });
    let mut total: Option<Vec<Mat>> = None;
    let mut parts = StepLoss::default();
    for r in results {
        let (g, p) = r?;
        parts.total += p.total;
        parts.recon += p.recon;
        parts.kl += p.kl;
        total = Some(match total {
            None => g,
            Some(mut acc) => {
                acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                acc
            }
        });
    }
    Ok((total.unwrap_or_default(), parts))
}

/// Validation score: mean `E(t)` over the first `val_horizon` free-running
/// steps, or the next-position MSE of single-step models.
pub fn validation_mse(model: &Model, val: &Dataset, cfg: &TrainConfig, exec: Exec) -> Result<f64> {
    let mut opts = EvalOptions::for_dataset(val);
    if let Some(b) = cfg.val_burn_in {
        let t = val.positions.len_of(Axis(1));
        opts.burn_in = b;
        opts.horizon = t.saturating_sub(b);
    }
    opts.horizon = opts.horizon.min(cfg.val_horizon.max(1));
    opts.max_sims = Some(cfg.val_sims.max(1));
    opts.seed = cfg.seed;
    let report = evaluate(model, val, &opts, exec)?;
    Ok(report.total_error.iter().sum::<f64>() / report.total_error.len() as f64)
}

pub struct FitOutput {
    /// Parameters with the best validation score seen (the initial ones when
    /// no epoch ran).
    pub best: Model,
    pub last: Model,
    pub log: Vec<LogRow>,
    pub best_epoch: usize,
    pub best_val: f64,
}

/// Trains `model` on `train`, scoring on `val` after every epoch. With
/// `out_dir`, the best checkpoint and the CSV log are rewritten after every
/// epoch.
pub fn fit(
    cfg: &TrainConfig,
    model: Model,
    train: &Dataset,
    val: &Dataset,
    exec: Exec,
    out_dir: Option<&Path>,
) -> Result<FitOutput> {
    fit_with(cfg, model, train, val, exec, out_dir, |_, _| {})
}

/// [`fit`] calling `on_epoch` with the current model and its log row after
/// every epoch.
pub fn fit_with(
    cfg: &TrainConfig,
    mut model: Model,
    train: &Dataset,
    val: &Dataset,
    exec: Exec,
    out_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&Model, &LogRow),
) -> Result<FitOutput> {
    cfg.validate()?;
    let t_all = train.positions.len_of(Axis(1));
    let steps = cfg.train_steps.unwrap_or(t_all).min(t_all);
    let sims = cfg.train_sims.unwrap_or(train.len()).min(train.len());
    if sims == 0 {
        return Err(Error::InvalidInput("no training simulations".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&model.params, cfg.lr);
    let mut order: Vec<usize> = (0..sims).collect();
    let mut log = Vec::new();
    let mut best = model.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut step = 0;
    let meta = |epoch: usize, val: f64| {
        serde_json::json!({ "train": cfg, "epoch": epoch, "val_mse": val })
    };
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = StepLoss::default();
        let mut batches = 0;
        for idx in order.chunks(cfg.batch_size) {
            let (mut grads, parts) = minibatch_gradient(&model, train, idx, cfg, steps, step, exec)?;
            if !parts.total.is_finite() || grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::Divergence {
                    step,
                    detail: format!(
                        "epoch {epoch}: loss {} (recon {}, kl {})",
                        parts.total, parts.recon, parts.kl
                    ),
                });
            }
            clip_global_norm(&mut grads, cfg.clip_norm);
            adam.step(&mut model.params, &grads);
            sum.total += parts.total;
            sum.recon += parts.recon;
            sum.kl += parts.kl;
            batches += 1;
            step += 1;
        }
        let val_mse = validation_mse(&model, val, cfg, exec)?;
        let b = batches.max(1) as f64;
        log.push(LogRow {
            epoch,
            step,
            train_loss: sum.total / b,
            recon: sum.recon / b,
            kl: sum.kl / b,
            val_mse,
        });
        on_epoch(&model, &log[log.len() - 1]);
        if val_mse < best_val {
            best_val = val_mse;
            best_epoch = epoch;
            best = model.clone();
            if let Some(dir) = out_dir {
                best.save(&dir.join(CHECKPOINT_FILE), meta(epoch, val_mse))?;
            }
        }
        if let Some(dir) = out_dir {
            write_log(&dir.join(LOG_FILE), &log)?;
        }
    }
    if cfg.epochs == 0 {
        if let Some(dir) = out_dir {
            best.save(&dir.join(CHECKPOINT_FILE), meta(0, f64::NAN))?;
            write_log(&dir.join(LOG_FILE), &log)?;
        }
    }
    Ok(FitOutput {
        best,
        last: model,
        log,
        best_epoch,
        best_val,
    })
}

pub const CHECKPOINT_FILE: &str = "checkpoint.aetk";
pub const LOG_FILE: &str = "train_log.csv";

/// Largest relative error between the tape gradient of `f` and central
/// differences with step `h`, over up to `max_coords` trainable
/// coordinates of `ps` (all of them when there are fewer). `f` builds a
/// scalar on a graph made by [`ParamSet::graph`] and must be deterministic.
pub fn grad_check<F>(ps: &ParamSet, f: F, h: f64, max_coords: usize, seed: u64) -> Result<f64>
where
    F: Fn(&Graph) -> Result<Var>,
{
    let g = ps.graph();
    let loss = f(&g)?;
    let mut grads = g.backward(loss);
    let analytic = ps.collect_grads(&mut grads);
    let mut coords: Vec<(usize, usize)> = ps
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| e.trainable)
        .flat_map(|(i, e)| (0..e.value.len()).map(move |j| (i, j)))
        .collect();
    if coords.len() > max_coords {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        coords.shuffle(&mut rng);
        coords.truncate(max_coords);
    }
    let eval = |i: usize, j: usize, delta: f64| -> Result<f64> {
        let mut p = ps.clone();
        let id = crate::nn::ParamId(i);
        let cols = p.get(id).ncols();
        p.get_mut(id)[[j / cols, j % cols]] += delta;
        let g = p.graph();
        let l = f(&g)?;
        Ok(g.scalar(l))
    };
    let mut worst = 0.0f64;
    for (i, j) in coords {
        let numeric = (eval(i, j, h)? - eval(i, j, -h)?) / (2.0 * h);
        let cols = analytic[i].ncols();
        let a = analytic[i][[j / cols, j % cols]];
        let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
        worst = worst.max(err);
    }
    Ok(worst)
}
