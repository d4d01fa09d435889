mod common;

use aether_core::autodiff::Mat;
use aether_core::geometry::RigidMotion;
use aether_core::gnn::features::{build_node_edge_inputs, node_frames};
use aether_core::gnn::single::{feedforward_predict, predict};
use aether_core::gnn::vae::{
    decoder_step, encoder_forward, gumbel_softmax_sample, rollout, EdgePosterior, RolloutMode,
};
use aether_core::gnn::{Batch, Model, Variant};
use aether_core::simulate::Setting;
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn locs_rollouts_commute_with_rigid_motions() {
    for setting in [Setting::Electrostatic, Setting::Gravity3d] {
        let mut model = tiny_model(Variant::Locs, setting, 3);
        scramble(&mut model, 1);
        let err = rollout_equivariance_error(&model, setting, 10);
        assert!(err < 1e-9, "{}: {err}", setting.name());
    }
}

#[test]
fn glocs_is_equivariant_only_without_its_origin_block() {
    let mut cfg = tiny_config(Variant::Glocs, Setting::Electrostatic, 4);
    cfg.zero_origin = true;
    let mut zeroed = Model::new(cfg).unwrap();
    scramble(&mut zeroed, 2);
    assert!(rollout_equivariance_error(&zeroed, Setting::Electrostatic, 10) < 1e-9);
    let mut full = tiny_model(Variant::Glocs, Setting::Electrostatic, 4);
    scramble(&mut full, 2);
    assert!(rollout_equivariance_error(&full, Setting::Electrostatic, 3) > 1e-6);
}

#[test]
fn decoder_step_commutes_with_rigid_motions() {
    let mut model = tiny_model(Variant::Locs, Setting::Electrostatic, 5);
    scramble(&mut model, 3);
    let ds = tiny_dataset(Setting::Electrostatic, 1, 4, 0, 3, 23);
    let batch = Batch::from_dataset(&ds, &[0], 0..3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let z = Mat::from_shape_fn((12, 2), |(_, k)| if k == 0 { 0.3 } else { 0.7 });
    let h = Mat::from_shape_fn((4, 8), |_| rng.random_range(-1.0..1.0));
    let step = |x: &Mat| {
        let g = model.params.graph();
        let (mu, h2) = decoder_step(&g, &model, &batch, x, g.constant(z.clone()), g.constant(h.clone()), None).unwrap();
        (g.to_mat(mu), g.to_mat(h2))
    };
    let (mu, h_base) = step(&batch.states[1]);
    for _ in 0..10 {
        let motion = RigidMotion::random(2, 3.0, &mut rng);
        let (mu_moved, h_moved) = step(&transform_states(&batch.states[1], &motion));
        assert!(max_relative_error(&[mu_moved], &[transform_states(&mu, &motion)]) < 1e-9);
        assert!(max_relative_error(&[h_moved], &[h_base.clone()]) < 1e-9);
    }
}

#[test]
fn untrained_decoders_predict_no_change() {
    for variant in [Variant::Global, Variant::Locs, Variant::Aether] {
        let model = tiny_model(variant, Setting::Electrostatic, 6);
        let ds = tiny_dataset(Setting::Electrostatic, 1, 3, 4, 6, 25);
        let batch = Batch::from_dataset(&ds, &[0], 0..6).unwrap();
        let preds = free_running(&model, &batch, 4, 2, 0);
        for p in &preds {
            assert_eq!(p, &batch.states[3], "{}", variant.name());
        }
    }
    let model = tiny_model(Variant::FeedforwardAether, Setting::Lorentz, 7);
    let ds = tiny_dataset(Setting::Lorentz, 2, 5, 0, 2, 26);
    let batch = Batch::from_dataset(&ds, &[0, 1], 0..2).unwrap();
    let p = feedforward_predict(&model, &batch, &batch.states[0]).unwrap();
    assert_eq!(p, batch.states[0].slice(ndarray::s![.., ..3]).to_owned());
}

#[test]
fn zero_horizon_is_empty() {
    let model = tiny_model(Variant::Locs, Setting::Electrostatic, 8);
    let ds = tiny_dataset(Setting::Electrostatic, 1, 3, 0, 4, 27);
    let batch = Batch::from_dataset(&ds, &[0], 0..4).unwrap();
    assert!(free_running(&model, &batch, 4, 0, 0).is_empty());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(rollout(&model, &batch, 0, 2, RolloutMode::PriorFreeRunning, &mut rng).is_err());
}

#[test]
fn weight_tied_reductions_are_exact() {
    for case in reduction_cases() {
        assert_identical(&case.larger, &case.smaller, case.name);
    }
}

#[test]
fn parallel_aether_output_is_the_sum_of_its_branches() {
    let mut plain = tiny_model(Variant::Feedforward, Setting::Lorentz, 10);
    scramble(&mut plain, 7);
    let parallel = Model::from_smaller(tiny_config(Variant::ParallelAether, Setting::Lorentz, 10), &plain).unwrap();
    let ds = tiny_dataset(Setting::Lorentz, 2, 5, 0, 2, 29);
    let batch = Batch::from_dataset(&ds, &[0, 1], 0..2).unwrap();
    let x = &batch.states[0];
    let g = parallel.params.graph();
    let both = g.to_mat(predict(&g, &parallel, &batch, x).unwrap());
    let field = g.to_mat(parallel.external_forces(&g, &batch, x, None).unwrap().unwrap());
    let branch = feedforward_predict(&plain, &batch, x).unwrap();
    assert!(max_relative_error(&[both], &[&branch + &field]) < 1e-14);
}

#[test]
fn source_oracle_ignores_source_order_and_moves_with_its_sources() {
    let mut model = tiny_model(Variant::SourceOracle, Setting::Electrostatic, 14);
    scramble(&mut model, 4);
    let ds = tiny_dataset(Setting::Electrostatic, 1, 3, 4, 5, 33);
    let batch = Batch::from_dataset(&ds, &[0], 0..5).unwrap();
    let base = free_running(&model, &batch, 3, 2, 5);

    let mut shuffled = batch.clone();
    let (sp, ss) = &batch.sources[0];
    let order = [2usize, 0, 3, 1];
    let sp2 = ndarray::stack(ndarray::Axis(0), &order.map(|i| sp.row(i))).unwrap();
    shuffled.sources[0] = (sp2, order.iter().map(|&i| ss[i]).collect());
    assert!(max_relative_error(&free_running(&model, &shuffled, 3, 2, 5), &base) < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let motion = RigidMotion::random(2, 2.0, &mut rng);
    let mut moved = transform_batch(&batch, &motion);
    let sp_moved = Mat::from_shape_fn(sp.dim(), |(r, k)| motion.apply_point(sp.row(r).as_slice().unwrap())[k]);
    moved.sources[0] = (sp_moved, ss.clone());
    let expected: Vec<Mat> = base.iter().map(|m| transform_states(m, &motion)).collect();
    assert!(max_relative_error(&free_running(&model, &moved, 3, 2, 5), &expected) < 1e-9);

    let mut missing = batch.clone();
    missing.sources.clear();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(rollout(&model, &missing, 3, 1, RolloutMode::PriorFreeRunning, &mut rng).is_err());
}

#[test]
fn two_particles_have_two_directed_edges() {
    let model = tiny_model(Variant::Locs, Setting::Electrostatic, 15);
    let ds = tiny_dataset(Setting::Electrostatic, 1, 2, 0, 4, 35);
    let batch = Batch::from_dataset(&ds, &[0], 0..4).unwrap();
    let post = EdgePosterior::compute(&model, &batch).unwrap();
    assert_eq!(post.prior_logits.dim(), (4, 2, 2));
    assert_eq!(post.posterior_logits.dim(), (4, 2, 2));
}

#[test]
fn edge_prior_is_causal() {
    let model = tiny_model(Variant::Aether, Setting::Electrostatic, 16);
    let ds = tiny_dataset(Setting::Electrostatic, 1, 4, 3, 6, 36);
    let batch = Batch::from_dataset(&ds, &[0], 0..6).unwrap();
    let base = EdgePosterior::compute(&model, &batch).unwrap();
    let mut states = batch.states.clone();
    states[5].mapv_inplace(|v| v + 0.37);
    let perturbed = EdgePosterior::compute(&model, &batch.with_states(states)).unwrap();
    for t in 0..5 {
        assert_eq!(
            base.prior_logits.index_axis(ndarray::Axis(0), t),
            perturbed.prior_logits.index_axis(ndarray::Axis(0), t)
        );
    }
    assert_ne!(
        base.prior_logits.index_axis(ndarray::Axis(0), 5),
        perturbed.prior_logits.index_axis(ndarray::Axis(0), 5)
    );
    // the backward LSTM sees the future
    assert_ne!(
        base.posterior_logits.index_axis(ndarray::Axis(0), 0),
        perturbed.posterior_logits.index_axis(ndarray::Axis(0), 0)
    );
}

#[test]
fn gumbel_samples_are_normalised_and_concentrate_at_low_temperature() {
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    for _ in 0..200 {
        let logits: Vec<f64> = (0..3).map(|_| rng.random_range(-4.0..4.0)).collect();
        let s = gumbel_softmax_sample(&logits, 0.5, false, &mut rng);
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    let s = gumbel_softmax_sample(&[10.0, -10.0], 1e-4, false, &mut rng);
    assert!((s[0] - 1.0).abs() < 1e-9 && s[1].abs() < 1e-9);
}

#[test]
fn hard_gumbel_frequencies_match_softmax() {
    let logits = [0.7, -0.4, 0.1];
    let max = 0.7f64;
    let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let probs: Vec<f64> = logits.iter().map(|l| (l - max).exp() / z).collect();
    let draws = 100_000;
    let mut counts = [0usize; 3];
    let mut rng = ChaCha8Rng::seed_from_u64(38);
    for _ in 0..draws {
        let s = gumbel_softmax_sample(&logits, 1e-3, true, &mut rng);
        counts[s.iter().position(|&v| v == 1.0).unwrap()] += 1;
    }
    for k in 0..3 {
        let p = probs[k];
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        assert!((counts[k] as f64 - draws as f64 * p).abs() < 3.0 * sigma, "{k}: {} vs {p}", counts[k]);
    }
}

/// Gumbel-max on a `[rows, K]` logit block with the sampler's noise.
fn gumbel_max(logits: &Mat, rng: &mut impl Rng) -> Mat {
    let noise = Mat::from_shape_fn(logits.dim(), |_| {
        let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
        -(-u.ln()).ln()
    });
    let y = logits + &noise;
    let mut out = Mat::zeros(y.dim());
    for (r, row) in y.rows().into_iter().enumerate() {
        let best = (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
        out[[r, best]] = 1.0;
    }
    out
}

#[test]
fn first_free_running_step_is_one_decoder_step_after_burn_in() {
    let mut model = tiny_model(Variant::Aether, Setting::Electrostatic, 17);
    scramble(&mut model, 5);
    let ds = tiny_dataset(Setting::Electrostatic, 2, 3, 4, 6, 39);
    let batch = Batch::from_dataset(&ds, &[0, 1], 0..6).unwrap();
    let t_in = 4;
    let preds = free_running(&model, &batch, t_in, 1, 9);

    let observed = batch.window(0..t_in);
    let g = model.params.graph();
    let enc = encoder_forward(&g, &model, &observed, None).unwrap();
    let prior = g.to_mat(enc.prior_logits);
    let ne = prior.nrows() / t_in;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut h = Mat::zeros((batch.systems * batch.n, 8));
    let mut mu = Mat::zeros((0, 0));
    for t in 0..t_in {
        let z = gumbel_max(&prior.slice(ndarray::s![t * ne..(t + 1) * ne, ..]).to_owned(), &mut rng);
        let g = model.params.graph();
        let (m, h2) = decoder_step(&g, &model, &batch, &batch.states[t], g.constant(z), g.constant(h), None).unwrap();
        mu = g.to_mat(m);
        h = g.to_mat(h2);
    }
    assert!(max_relative_error(&preds, &[mu]) < 1e-10);
}

#[test]
fn posterior_teacher_forcing_needs_the_future() {
    let model = tiny_model(Variant::Locs, Setting::Electrostatic, 18);
    let ds = tiny_dataset(Setting::Electrostatic, 1, 3, 0, 6, 40);
    let batch = Batch::from_dataset(&ds, &[0], 0..6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = rollout(&model, &batch, 4, 2, RolloutMode::PosteriorTeacherForced, &mut rng).unwrap();
    assert_eq!(out.len(), 2);
    assert!(rollout(&model, &batch, 4, 3, RolloutMode::PosteriorTeacherForced, &mut rng).is_err());
}

#[test]
fn force_blocks_follow_the_variant() {
    let ds = tiny_dataset(Setting::Electrostatic, 1, 3, 2, 3, 41);
    let batch = Batch::from_dataset(&ds, &[0], 0..3).unwrap();
    let aether = Variant::Aether.layout(2, false);
    let forces: Vec<Mat> = (0..3).map(|_| Mat::zeros((3, 2))).collect();
    assert!(build_node_edge_inputs(&aether, &batch.topology(), &batch.states, Some(&batch.charges), None).is_err());
    let with = build_node_edge_inputs(&aether, &batch.topology(), &batch.states, Some(&batch.charges), Some(&forces)).unwrap();
    let glocs = Variant::Glocs.layout(2, false);
    let without = build_node_edge_inputs(&glocs, &batch.topology(), &batch.states, Some(&batch.charges), None).unwrap();
    for ((n1, e1), (n0, e0)) in with.iter().zip(&without) {
        assert_eq!(n1.slice(ndarray::s![.., ..n0.ncols()]), n0.view());
        assert_eq!(e1.slice(ndarray::s![.., ..e0.ncols()]), e0.view());
        assert!(n1.slice(ndarray::s![.., n0.ncols()..]).iter().all(|v| *v == 0.0));
        assert!(e1.slice(ndarray::s![.., e0.ncols()..]).iter().all(|v| *v == 0.0));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let locs = Variant::Locs.layout(2, false);
    let base = build_node_edge_inputs(&locs, &batch.topology(), &batch.states, Some(&batch.charges), None).unwrap();
    for _ in 0..10 {
        let motion = RigidMotion::random(2, 4.0, &mut rng);
        let moved: Vec<Mat> = batch.states.iter().map(|s| transform_states(s, &motion)).collect();
        let got = build_node_edge_inputs(&locs, &batch.topology(), &moved, Some(&batch.charges), None).unwrap();
        for ((n1, e1), (n0, e0)) in got.iter().zip(&base) {
            assert!(max_relative_error(&[n1.clone(), e1.clone()], &[n0.clone(), e0.clone()]) < 1e-9);
        }
    }
    assert_eq!(node_frames(&batch.states[0], 3, 2).unwrap().len(), 3);
}
