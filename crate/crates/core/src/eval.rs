//! Forecasting errors over the prediction horizon and comparisons of learned
//! fields with the simulator's groundtruth.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::rc::Rc;

use ndarray::{s, Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::field::{aggregate_latent, write_field_csv, FieldQuery};
use crate::gnn::vae::{rollout, RolloutMode};
use crate::gnn::{single, Batch, Family, Model};
use crate::par::{map_indexed, Exec};
use crate::simulate::{groundtruth_field, Dataset, ExternalField};

fn check_same(truth: &Array3<f64>, pred: &Array3<f64>) -> Result<()> {
    if truth.dim() != pred.dim() {
        return Err(Error::Shape(format!(
            "truth {:?} vs prediction {:?}",
            truth.dim(),
            pred.dim()
        )));
    }
    if truth.len_of(Axis(2)) % 2 != 0 {
        return Err(Error::Shape("state width must be 2d".into()));
    }
    Ok(())
}

/// `E(t) = (1 / (N·2d)) Σ_n ‖x_n^t − x̂_n^t‖²` for `[H, N, 2d]` inputs.
pub fn total_error_curve(truth: &Array3<f64>, pred: &Array3<f64>) -> Result<Vec<f64>> {
    check_same(truth, pred)?;
    let (_, n, w) = truth.dim();
    Ok(truth
        .outer_iter()
        .zip(pred.outer_iter())
        .map(|(a, b)| (&a - &b).mapv(|v| v * v).sum() / (n * w) as f64)
        .collect())
}

/// Mean Euclidean position and velocity errors per step.
pub fn l2_error_curves(truth: &Array3<f64>, pred: &Array3<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
    check_same(truth, pred)?;
    let (_, n, w) = truth.dim();
    let d = w / 2;
    let mut ep = Vec::with_capacity(truth.len_of(Axis(0)));
    let mut eu = Vec::with_capacity(ep.capacity());
    for (a, b) in truth.outer_iter().zip(pred.outer_iter()) {
        let diff = &a - &b;
        let norm = |r: usize, off: usize| {
            diff.slice(s![r, off..off + d]).mapv(|v| v * v).sum().sqrt()
        };
        ep.push((0..n).map(|r| norm(r, 0)).sum::<f64>() / n as f64);
        eu.push((0..n).map(|r| norm(r, d)).sum::<f64>() / n as f64);
    }
    Ok((ep, eu))
}

/// `E(h)` for a 1-based horizon step.
pub fn mse_at(curve: &[f64], h: usize) -> Result<f64> {
    if h == 0 || h > curve.len() {
        return Err(Error::InvalidInput(format!(
            "horizon step {h} outside 1..={}",
            curve.len()
        )));
    }
    Ok(curve[h - 1])
}

/// Stacks per-step `[rows, 2d]` matrices into `[H, rows, 2d]`.
pub fn stack_steps(steps: &[Mat]) -> Result<Array3<f64>> {
    let views: Vec<_> = steps.iter().map(|m| m.view()).collect();
    ndarray::stack(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalTarget {
    /// Positions and velocities over a free-running horizon.
    State,
    /// Next-step positions only.
    Position,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub setting: String,
    pub variant: String,
    pub target: EvalTarget,
    pub burn_in: usize,
    pub horizon: usize,
    pub num_sims: usize,
    /// `E(t)`, one entry per horizon step.
    pub total_error: Vec<f64>,
    pub position_l2: Vec<f64>,
    pub velocity_l2: Vec<f64>,
    /// `"mse@h"` → `E(h)`.
    pub mse: BTreeMap<String, f64>,
    pub config: serde_json::Value,
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Format(format!("metrics report: {m}")));
        if self.horizon == 0 || self.num_sims == 0 {
            return bad("empty evaluation".into());
        }
        for (name, curve) in [
            ("total_error", &self.total_error),
            ("position_l2", &self.position_l2),
            ("velocity_l2", &self.velocity_l2),
        ] {
            let expected = match (self.target, name) {
                (EvalTarget::Position, "velocity_l2") => 0,
                _ => self.horizon,
            };
            if curve.len() != expected {
                return bad(format!("{name} has {} entries, expected {expected}", curve.len()));
            }
            if curve.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return bad(format!("{name} has negative or non-finite values"));
            }
        }
        for (key, &v) in &self.mse {
            let h = key
                .strip_prefix("mse@")
                .and_then(|h| h.parse::<usize>().ok())
                .filter(|&h| h >= 1 && h <= self.horizon);
            match h {
                Some(h) if v == self.total_error[h - 1] => {}
                Some(_) => return bad(format!("{key} disagrees with the curve")),
                None => return bad(format!("bad key {key}")),
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(s)?;
        r.validate()?;
        Ok(r)
    }

    pub fn mse_at(&self, h: usize) -> Result<f64> {
        mse_at(&self.total_error, h)
    }
}

/// Error curves accumulated over chunks of simulations.
#[derive(Debug, Clone, Default)]
struct CurveSums {
    sims: usize,
    total: Vec<f64>,
    pos: Vec<f64>,
    vel: Vec<f64>,
}

impl CurveSums {
    fn add(&mut self, sims: usize, total: &[f64], pos: &[f64], vel: &[f64]) {
        let acc = |dst: &mut Vec<f64>, src: &[f64]| {
            dst.resize(src.len(), 0.0);
            for (a, b) in dst.iter_mut().zip(src) {
                *a += b * sims as f64;
            }
        };
        acc(&mut self.total, total);
        acc(&mut self.pos, pos);
        acc(&mut self.vel, vel);
        self.sims += sims;
    }

    fn means(mut self) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = self.sims.max(1) as f64;
        for v in [&mut self.total, &mut self.pos, &mut self.vel] {
            v.iter_mut().for_each(|x| *x /= n);
        }
        (self.total, self.pos, self.vel)
    }
}

/// How a model is evaluated on a test split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub burn_in: usize,
    pub horizon: usize,
    /// Evaluate at most this many simulations (all when `None`).
    pub max_sims: Option<usize>,
    pub chunk: usize,
    pub seed: u64,
}

impl EvalOptions {
    pub fn for_dataset(ds: &Dataset) -> Self {
        let burn_in = ds.header.setting.input_steps();
        let t = ds.positions.len_of(Axis(1));
        Self {
            burn_in,
            horizon: t.saturating_sub(burn_in),
            max_sims: None,
            chunk: 25,
            seed: 0,
        }
    }
}

/// Free-running (sequence models) or next-step (single-step models) errors
/// averaged over the simulations of `ds`.
pub fn evaluate(model: &Model, ds: &Dataset, opts: &EvalOptions, exec: Exec) -> Result<MetricsReport> {
    let total = opts.max_sims.map_or(ds.len(), |m| m.min(ds.len()));
    if total == 0 {
        return Err(Error::InvalidInput("no simulations to evaluate".into()));
    }
    let t_all = ds.positions.len_of(Axis(1));
    let family = model.cfg.variant.family();
    let (burn_in, horizon, target) = match family {
        Family::Vae => (opts.burn_in, opts.horizon, EvalTarget::State),
        _ => (1, 1, EvalTarget::Position),
    };
    if family == Family::Vae && (burn_in == 0 || horizon == 0 || burn_in + horizon > t_all) {
        return Err(Error::Config(format!(
            "burn-in {burn_in} + horizon {horizon} exceeds the {t_all} recorded steps"
        )));
    }
    if family != Family::Vae && t_all < 2 {
        return Err(Error::Config("single-step evaluation needs two steps".into()));
    }
    let chunk = opts.chunk.max(1);
    let n_chunks = total.div_ceil(chunk);
    let results = map_indexed(exec, n_chunks, |c| -> Result<(usize, Vec<f64>, Vec<f64>, Vec<f64>)> {
        let idx: Vec<usize> = (c * chunk..((c + 1) * chunk).min(total)).collect();
        let batch = Batch::from_dataset(ds, &idx, 0..burn_in + horizon)?;
        if family == Family::Vae {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (c as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let preds = rollout(model, &batch, burn_in, horizon, RolloutMode::PriorFreeRunning, &mut rng)?;
            let truth = stack_steps(&batch.states[burn_in..burn_in + horizon])?;
            let pred = stack_steps(&preds)?;
            let e = total_error_curve(&truth, &pred)?;
            let (p, u) = l2_error_curves(&truth, &pred)?;
            Ok((idx.len(), e, p, u))
        } else {
            let d = batch.d;
            let pred = single::feedforward_predict(model, &batch, &batch.states[0])?;
            let truth = batch.states[1].slice(s![.., ..d]).to_owned();
            let diff = &truth - &pred;
            let mse = diff.mapv(|v| v * v).mean().unwrap_or(0.0);
            let l2 = diff
                .rows()
                .into_iter()
                .map(|r| r.dot(&r).sqrt())
                .sum::<f64>()
                / diff.nrows() as f64;
            Ok((idx.len(), vec![mse], vec![l2], Vec::new()))
        }
    });
    let mut sums = CurveSums::default();
    for r in results {
        let (n, e, p, u) = r?;
        sums.add(n, &e, &p, &u);
    }
    let (total_error, position_l2, velocity_l2) = sums.means();
    let mut mse = BTreeMap::new();
    for h in [1, 10, 20] {
        if h <= horizon {
            mse.insert(format!("mse@{h}"), total_error[h - 1]);
        }
    }
    let report = MetricsReport {
        setting: ds.header.setting.name().into(),
        variant: model.cfg.variant.name().into(),
        target,
        burn_in,
        horizon,
        num_sims: total,
        total_error,
        position_l2,
        velocity_l2,
        mse,
        config: serde_json::to_value(&model.cfg)?,
    };
    report.validate()?;
    Ok(report)
}

/// Regular grid over an axis-aligned box, `resolution` points per axis with
/// both ends included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub d: usize,
    pub resolution: usize,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl GridSpec {
    pub fn square(d: usize, resolution: usize, half_width: f64) -> Self {
        Self {
            d,
            resolution,
            lo: vec![-half_width; d],
            hi: vec![half_width; d],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.lo.len() != self.d || self.hi.len() != self.d {
            return Err(Error::Config("grid bounds must have one entry per axis".into()));
        }
        if self.resolution < 2 || self.lo.iter().zip(&self.hi).any(|(l, h)| !(h > l)) {
            return Err(Error::Config("grid needs two or more points on a non-empty box".into()));
        }
        Ok(())
    }

    /// `[resolution^d, d]`, first axis varying fastest.
    pub fn points(&self) -> Result<Array2<f64>> {
        self.validate()?;
        let (d, r) = (self.d, self.resolution);
        let count = r.pow(d as u32);
        Ok(Array2::from_shape_fn((count, d), |(i, k)| {
            let step = (i / r.pow(k as u32)) % r;
            self.lo[k] + (self.hi[k] - self.lo[k]) * step as f64 / (r - 1) as f64
        }))
    }
}

/// Marks queries lying within `rho` of any of `points` (a spatial hash with
/// cells of side `rho`).
pub fn support_mask(queries: &Array2<f64>, points: &Array2<f64>, rho: f64) -> Result<Vec<bool>> {
    let d = queries.ncols();
    if points.ncols() != d || !(rho > 0.0) {
        return Err(Error::InvalidInput("support needs matching dimensions and rho > 0".into()));
    }
    let cell = |p: &[f64]| -> [i64; 3] {
        let mut c = [0i64; 3];
        for k in 0..d {
            c[k] = (p[k] / rho).floor() as i64;
        }
        c
    };
    let mut grid: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (i, p) in points.rows().into_iter().enumerate() {
        grid.entry(cell(p.as_slice().unwrap_or(&p.to_vec()))).or_default().push(i);
    }
    let offsets: Vec<[i64; 3]> = (0..3usize.pow(d as u32))
        .map(|m| {
            let mut o = [0i64; 3];
            for (k, slot) in o.iter_mut().enumerate().take(d) {
                *slot = ((m / 3usize.pow(k as u32)) % 3) as i64 - 1;
            }
            o
        })
        .collect();
    Ok(queries
        .rows()
        .into_iter()
        .map(|q| {
            let q = q.to_vec();
            let c = cell(&q);
            offsets.iter().any(|o| {
                let key = [c[0] + o[0], c[1] + o[1], c[2] + o[2]];
                grid.get(&key).is_some_and(|ids| {
                    ids.iter().any(|&i| {
                        let r2: f64 = (0..d).map(|k| (points[[i, k]] - q[k]).powi(2)).sum();
                        r2 <= rho * rho
                    })
                })
            })
        })
        .collect())
}

/// Every recorded position of a dataset, `[S·T·N, d]`.
pub fn dataset_positions(ds: &Dataset) -> Array2<f64> {
    let (s, t, n, d) = ds.positions.dim();
    ds.positions
        .mapv(|v| v as f64)
        .into_shape_with_order((s * t * n, d))
        .expect("contiguous positions")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldRecovery {
    pub grid: Option<GridSpec>,
    pub rho: f64,
    pub support_points: usize,
    pub median_cosine: f64,
    pub mean_cosine: f64,
    /// Median angle between the two directions, radians.
    pub median_angular_error: f64,
    pub mean_angular_error: f64,
    /// `max(median cos, median −cos)`. Only a diagnostic: flipping the sign
    /// of every charge and of the field leaves charged dynamics unchanged.
    pub sign_invariant_median_cosine: f64,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Direction agreement between `learned` and `truth` (`[G, d]` each) on the
/// masked points. Points where either vector vanishes are skipped.
pub fn field_recovery(learned: &Array2<f64>, truth: &Array2<f64>, mask: &[bool], rho: f64) -> Result<FieldRecovery> {
    if learned.dim() != truth.dim() || mask.len() != learned.nrows() {
        return Err(Error::Shape("field arrays and mask must agree".into()));
    }
    let mut cos = Vec::new();
    for ((a, b), &m) in learned.rows().into_iter().zip(truth.rows()).zip(mask) {
        if !m {
            continue;
        }
        let (na, nb) = (a.dot(&a).sqrt(), b.dot(&b).sqrt());
        if na > 0.0 && nb > 0.0 && na.is_finite() && nb.is_finite() {
            cos.push((a.dot(&b) / (na * nb)).clamp(-1.0, 1.0));
        }
    }
    if cos.is_empty() {
        return Err(Error::InvalidInput("empty field support".into()));
    }
    let n = cos.len() as f64;
    let mean_cosine = cos.iter().sum::<f64>() / n;
    let mut ang: Vec<f64> = cos.iter().map(|c| c.acos()).collect();
    let mean_angular_error = ang.iter().sum::<f64>() / n;
    let median_angular_error = median(&mut ang);
    let mut neg: Vec<f64> = cos.iter().map(|c| -c).collect();
    let median_cosine = median(&mut cos);
    Ok(FieldRecovery {
        grid: None,
        rho,
        support_points: cos.len(),
        median_cosine,
        mean_cosine,
        median_angular_error,
        mean_angular_error,
        sign_invariant_median_cosine: median_cosine.max(median(&mut neg)),
    })
}

/// The model's field at `points` for a unit positive charge at rest. `z`
/// is the latent code of a dynamic field.
pub fn learned_field(model: &Model, points: &Array2<f64>, z: Option<&[f64]>) -> Result<Array2<f64>> {
    let field = model
        .field
        .as_ref()
        .ok_or_else(|| Error::Config(format!("variant {} has no field", model.cfg.variant.name())))?;
    let d = field.cfg.d;
    if points.ncols() != d {
        return Err(Error::Shape("query dimension differs from the field's".into()));
    }
    let mut out = Array2::zeros(points.raw_dim());
    const CHUNK: usize = 4096;
    for start in (0..points.nrows()).step_by(CHUNK) {
        let end = (start + CHUNK).min(points.nrows());
        let rows = end - start;
        let g = model.params.graph();
        let q = FieldQuery {
            p: g.constant(points.slice(s![start..end, ..]).to_owned()),
            u: field.cfg.uses_velocity().then(|| g.constant(Mat::zeros((rows, d)))),
            omega_hat: None,
            charge: field.cfg.uses_charge().then(|| Rc::from(vec![1.0; rows])),
        };
        let z = z.map(|z| g.row(z));
        let f = field.forward(&g, &q, z)?;
        out.slice_mut(s![start..end, ..]).assign(&*g.value(f));
    }
    Ok(out)
}

/// Writes the learned field on `grid` as CSV.
pub fn field_grid_export(model: &Model, grid: &GridSpec, z: Option<&[f64]>, path: &Path) -> Result<()> {
    let pts = grid.points()?;
    let vectors = learned_field(model, &pts, z)?;
    write_field_csv(path, &pts, &vectors)
}

/// Learned vs groundtruth field on `grid`, restricted to points within
/// `rho` of the positions in `support`.
pub fn static_field_recovery(
    model: &Model,
    field: &ExternalField,
    grid: &GridSpec,
    support: &Array2<f64>,
    rho: f64,
) -> Result<FieldRecovery> {
    let pts = grid.points()?;
    let learned = learned_field(model, &pts, None)?;
    let truth = groundtruth_field(&pts, field)?.vectors;
    let mask = support_mask(&pts, support, rho)?;
    let mut r = field_recovery(&learned, &truth, &mask, rho)?;
    r.grid = Some(grid.clone());
    Ok(r)
}

/// Dynamic-field recovery: each simulation's latent code (from its leading
/// window) queries the field, which is compared against that simulation's
/// own sources on `grid` within `rho` of its trajectory. Statistics are
/// medians and means of the per-simulation values.
pub fn dynamic_field_recovery(
    model: &Model,
    ds: &Dataset,
    grid: &GridSpec,
    rho: f64,
    max_sims: Option<usize>,
    exec: Exec,
) -> Result<FieldRecovery> {
    let (Some(agg), Some(acfg)) = (&model.aggregator, model.cfg.aggregator) else {
        return Err(Error::Config(format!(
            "variant {} has no latent field code",
            model.cfg.variant.name()
        )));
    };
    let total = max_sims.map_or(ds.len(), |m| m.min(ds.len()));
    if total == 0 {
        return Err(Error::InvalidInput("no simulations to evaluate".into()));
    }
    let t_all = ds.positions.len_of(Axis(1));
    let window = acfg.window.min(t_all);
    let pts = grid.points()?;
    let per_sim = map_indexed(exec, total, |s| -> Result<FieldRecovery> {
        let batch = Batch::from_dataset(ds, &[s], 0..window)?;
        let z = aggregate_latent(&model.params, agg, &batch.states)?;
        let learned = learned_field(model, &pts, Some(&z))?;
        let truth = groundtruth_field(&pts, &ds.external_field(s))?.vectors;
        let support = ds
            .positions
            .index_axis(Axis(0), s)
            .mapv(|v| v as f64)
            .into_shape_with_order((t_all * ds.positions.len_of(Axis(2)), grid.d))
            .map_err(|e| Error::Shape(e.to_string()))?;
        let mask = support_mask(&pts, &support, rho)?;
        field_recovery(&learned, &truth, &mask, rho)
    });
    let per_sim: Vec<FieldRecovery> = per_sim.into_iter().collect::<Result<_>>()?;
    let n = per_sim.len() as f64;
    let pick = |f: fn(&FieldRecovery) -> f64| -> Vec<f64> { per_sim.iter().map(f).collect() };
    Ok(FieldRecovery {
        grid: Some(grid.clone()),
        rho,
        support_points: per_sim.iter().map(|r| r.support_points).sum(),
        median_cosine: median(&mut pick(|r| r.median_cosine)),
        mean_cosine: pick(|r| r.mean_cosine).iter().sum::<f64>() / n,
        median_angular_error: median(&mut pick(|r| r.median_angular_error)),
        mean_angular_error: pick(|r| r.mean_angular_error).iter().sum::<f64>() / n,
        sign_invariant_median_cosine: median(&mut pick(|r| r.sign_invariant_median_cosine)),
    })
}
