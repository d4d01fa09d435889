//! Small fixtures shared by the integration tests.
#![allow(dead_code)]

use aether_core::autodiff::Mat;
use aether_core::field::FieldConfig;
use aether_core::geometry::RigidMotion;
use aether_core::gnn::single::feedforward_predict;
use aether_core::gnn::vae::{rollout, RolloutMode};
use aether_core::gnn::{Batch, Model, ModelConfig, Variant};
use aether_core::par::Exec;
use aether_core::simulate::{simulate_split, Dataset, SimConfig, Setting, Split, SplitCounts};
use rand::SeedableRng;

pub mod grads;
use rand_chacha::ChaCha8Rng;

/// A short simulated split with `n` particles, `m` sources and `t` records.
pub fn tiny_dataset(setting: Setting, sims: usize, n: usize, m: usize, t: usize, seed: u64) -> Dataset {
    let mut cfg = SimConfig::for_setting(setting);
    cfg.n = n;
    cfg.m = m;
    cfg.t = t;
    cfg.seed = seed;
    cfg.counts = SplitCounts {
        train: sims,
        val: 0,
        test: 0,
    };
    simulate_split(&cfg, Split::Train, Exec::Sequential).unwrap()
}

/// Narrow model of `variant` for fast property checks.
pub fn tiny_config(variant: Variant, setting: Setting, seed: u64) -> ModelConfig {
    let mut cfg = ModelConfig::for_setting(variant, setting);
    cfg.hidden = 8;
    cfg.lstm_hidden = 6;
    cfg.layers = 2;
    cfg.seed = seed;
    if let Some(f) = cfg.field.as_mut() {
        let narrow = match setting {
            Setting::Lorentz => FieldConfig::raw_with_charge(f.d, 6, 4),
            _ => FieldConfig::positional(f.d, 8),
        };
        *f = narrow.conditioned(f.conditioning, if f.latent_dim > 0 { 4 } else { 0 });
    }
    if let Some(a) = cfg.aggregator.as_mut() {
        a.object_dim = 4;
        a.latent_dim = 4;
    }
    cfg
}

pub fn tiny_model(variant: Variant, setting: Setting, seed: u64) -> Model {
    Model::new(tiny_config(variant, setting, seed)).unwrap()
}

/// Applies a rigid motion to every row of a `[rows, 2d]` state block.
pub fn transform_states(x: &Mat, g: &RigidMotion) -> Mat {
    let d = x.ncols() / 2;
    let mut out = x.clone();
    for (r, row) in x.rows().into_iter().enumerate() {
        let p = g.apply_point(&row.as_slice().unwrap()[..d]);
        let u = g.apply_vector(&row.as_slice().unwrap()[d..]);
        for k in 0..d {
            out[[r, k]] = p[k];
            out[[r, d + k]] = u[k];
        }
    }
    out
}

pub fn transform_batch(batch: &Batch, g: &RigidMotion) -> Batch {
    batch.with_states(batch.states.iter().map(|s| transform_states(s, g)).collect())
}

/// `max |a − b| / max |b|` over matching lists of matrices.
pub fn max_relative_error(a: &[Mat], b: &[Mat]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut diff = 0.0f64;
    let mut scale = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        assert_eq!(x.dim(), y.dim());
        for (u, v) in x.iter().zip(y) {
            diff = diff.max((u - v).abs());
            scale = scale.max(v.abs());
        }
    }
    diff / scale.max(1e-300)
}

/// Adds uniform noise to every trainable tensor, so zero-initialised output
/// heads stop making the model an identity map.
pub fn scramble(model: &mut Model, seed: u64) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = model
        .params
        .entries()
        .iter()
        .filter(|e| e.trainable)
        .map(|e| model.params.find(&e.name).unwrap())
        .collect();
    for id in ids {
        model.params.get_mut(id).mapv_inplace(|v| v + rng.random_range(-0.3..0.3));
    }
}

pub fn free_running(model: &Model, batch: &Batch, t_in: usize, horizon: usize, seed: u64) -> Vec<Mat> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rollout(model, batch, t_in, horizon, RolloutMode::PriorFreeRunning, &mut rng).unwrap()
}

/// Worst relative error between rollouts of transformed inputs and
/// transformed rollouts, over `trials` random rigid motions.
pub fn rollout_equivariance_error(model: &Model, setting: Setting, trials: usize) -> f64 {
    let ds = tiny_dataset(setting, 2, 4, 3, 8, 21);
    let batch = Batch::from_dataset(&ds, &[0, 1], 0..8).unwrap();
    let base = free_running(model, &batch, 5, 3, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let g = RigidMotion::random(setting.dim(), 5.0, &mut rng);
        let moved = free_running(model, &transform_batch(&batch, &g), 5, 3, 1);
        let expected: Vec<Mat> = base.iter().map(|m| transform_states(m, &g)).collect();
        worst = worst.max(max_relative_error(&moved, &expected));
    }
    worst
}

/// Largest elementwise `|a − b|`; infinite when shapes differ.
pub fn max_abs_diff(a: &[Mat], b: &[Mat]) -> f64 {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.dim() != y.dim()) {
        return f64::INFINITY;
    }
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(u, v)| (u - v).abs()))
        .fold(0.0, f64::max)
}

pub fn assert_identical(a: &[Mat], b: &[Mat], what: &str) {
    let diff = max_abs_diff(a, b);
    assert!(diff == 0.0, "{what}: max diff {diff}");
}

/// A larger variant built from a scrambled smaller one with its extra
/// inputs zeroed, with the outputs of both on the same data.
pub struct Reduction {
    pub name: &'static str,
    pub larger: Vec<Mat>,
    pub smaller: Vec<Mat>,
}

fn embed(small: Variant, large: Variant, setting: Setting, seed: u64) -> (Model, Model) {
    let mut smaller = tiny_model(small, setting, seed);
    scramble(&mut smaller, seed + 100);
    let mut larger = Model::from_smaller(tiny_config(large, setting, seed), &smaller).unwrap();
    larger.zero_field();
    (larger, smaller)
}

pub fn reduction_cases() -> Vec<Reduction> {
    let mut out = Vec::new();
    let (aether, glocs) = embed(Variant::Glocs, Variant::Aether, Setting::Electrostatic, 9);
    let ds = tiny_dataset(Setting::Electrostatic, 2, 4, 5, 7, 28);
    let batch = Batch::from_dataset(&ds, &[0, 1], 0..7).unwrap();
    out.push(Reduction {
        name: "aether with zero field = glocs with zero force columns",
        larger: free_running(&aether, &batch, 4, 3, 2),
        smaller: free_running(&glocs, &batch, 4, 3, 2),
    });

    let lorentz = tiny_dataset(Setting::Lorentz, 2, 5, 0, 2, 29);
    let batch = Batch::from_dataset(&lorentz, &[0, 1], 0..2).unwrap();
    let x = &batch.states[0];
    for (name, small, large, seed) in [
        ("parallel aether with zero field = feedforward", Variant::Feedforward, Variant::ParallelAether, 10),
        ("feedforward aether with zero field = feedforward", Variant::Feedforward, Variant::FeedforwardAether, 11),
        ("egnn aether with zero forces = egnn", Variant::Egnn, Variant::EgnnAether, 12),
    ] {
        let (larger, smaller) = embed(small, large, Setting::Lorentz, seed);
        out.push(Reduction {
            name,
            larger: vec![feedforward_predict(&larger, &batch, x).unwrap()],
            smaller: vec![feedforward_predict(&smaller, &batch, x).unwrap()],
        });
    }

    let (oracle, locs) = embed(Variant::Locs, Variant::SourceOracle, Setting::Electrostatic, 13);
    let ds = tiny_dataset(Setting::Electrostatic, 2, 4, 0, 6, 32);
    let batch = Batch::from_dataset(&ds, &[0, 1], 0..6).unwrap();
    out.push(Reduction {
        name: "source oracle with no sources = locs",
        larger: free_running(&oracle, &batch, 3, 3, 4),
        smaller: free_running(&locs, &batch, 3, 3, 4),
    });
    out
}
