//! Central-difference checks of every differentiable building block on tiny
//! scrambled instances.

use std::rc::Rc;

use aether_core::autodiff::{Graph, Mat, Var};
use aether_core::field::{FieldQuery, VelocityEncoding};
use aether_core::gnn::features::node_frames;
use aether_core::gnn::single::{predict, ForceFrames};
use aether_core::gnn::vae::{decoder_step, encoder_forward};
use aether_core::gnn::{Batch, Body, Model, Variant};
use aether_core::simulate::Setting;
use aether_core::train::{elbo_loss, gaussian_nll_var, grad_check, kl_categorical_var, position_loss};
use aether_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{scramble, tiny_dataset, tiny_model};

pub const STEP: f64 = 1e-5;
pub const COORDS: usize = 250;

pub struct GradCase {
    pub name: &'static str,
    pub worst_relative_error: f64,
    pub coords: usize,
}

fn random_mat(rows: usize, cols: usize, seed: u64) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Mat::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

/// `Σ out ⊙ w` for a fixed random `w`, so every output entry contributes.
fn project(g: &Graph, out: Var, seed: u64) -> Var {
    let (r, c) = g.shape(out);
    g.sum_all(g.mul(out, g.constant(random_mat(r, c, seed))))
}

fn scrambled(variant: Variant, setting: Setting, seed: u64) -> Model {
    let mut m = tiny_model(variant, setting, seed);
    scramble(&mut m, seed + 1);
    m
}

fn trainable_coords(model: &Model) -> usize {
    model
        .params
        .entries()
        .iter()
        .filter(|e| e.trainable)
        .map(|e| e.value.len())
        .sum::<usize>()
        .min(COORDS)
}

fn case(name: &'static str, model: &Model, f: impl Fn(&Graph) -> Result<Var>) -> GradCase {
    let worst_relative_error = grad_check(&model.params, f, STEP, COORDS, 0).unwrap();
    GradCase {
        name,
        worst_relative_error,
        coords: trainable_coords(model),
    }
}

fn field_case(name: &'static str, variant: Variant, setting: Setting) -> GradCase {
    let model = scrambled(variant, setting, 40);
    let field = model.field.clone().unwrap();
    let d = setting.dim();
    let rows = 6;
    let p = random_mat(rows, d, 41) * 3.0;
    let u = random_mat(rows, d, 42);
    let charges: Rc<[f64]> = (0..rows).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let z = field.is_conditional().then(|| random_mat(rows, field.cfg.latent_dim, 43));
    case(name, &model, |g| {
        let q = FieldQuery {
            p: g.constant(p.clone()),
            u: (field.cfg.velocity != VelocityEncoding::Off).then(|| g.constant(u.clone())),
            omega_hat: None,
            charge: (field.cfg.charge_dim > 0).then(|| charges.clone()),
        };
        let out = field.forward(g, &q, z.clone().map(|z| g.constant(z)))?;
        Ok(project(g, out, 44))
    })
}

fn electrostatic_batch() -> Batch {
    let ds = tiny_dataset(Setting::Electrostatic, 2, 3, 4, 4, 45);
    Batch::from_dataset(&ds, &[0, 1], 0..4).unwrap()
}

fn lorentz_batch() -> Batch {
    let ds = tiny_dataset(Setting::Lorentz, 2, 4, 0, 2, 46);
    Batch::from_dataset(&ds, &[0, 1], 0..2).unwrap()
}

pub fn gradient_cases() -> Vec<GradCase> {
    let mut out = vec![
        field_case("field_forward (positional)", Variant::Aether, Setting::Electrostatic),
        field_case("field_forward (film-conditioned)", Variant::Aether, Setting::Gravity2d),
        field_case("field_forward (velocity and charge)", Variant::FeedforwardAether, Setting::Lorentz),
    ];

    let aether = scrambled(Variant::Aether, Setting::Electrostatic, 47);
    let batch = electrostatic_batch();
    out.push(case("encoder_forward", &aether, |g| {
        let enc = encoder_forward(g, &aether, &batch, None)?;
        Ok(g.add(project(g, enc.posterior_logits, 48), project(g, enc.prior_logits, 49)))
    }));

    let Body::Vae(nets) = &aether.body else { unreachable!() };
    let topo = batch.topology();
    let z = random_mat(topo.num_edges(), nets.k, 50).mapv(f64::exp);
    let h = random_mat(topo.num_nodes(), nets.hidden, 51);
    out.push(case("decoder_step", &aether, |g| {
        let (mu, h_next) = decoder_step(g, &aether, &batch, &batch.states[1], g.constant(z.clone()), g.constant(h.clone()), None)?;
        Ok(g.add(project(g, mu, 52), project(g, h_next, 53)))
    }));

    let lorentz = lorentz_batch();
    let ff = scrambled(Variant::FeedforwardAether, Setting::Lorentz, 54);
    out.push(case("feedforward_predict", &ff, |g| {
        Ok(project(g, predict(g, &ff, &lorentz, &lorentz.states[0])?, 55))
    }));

    let egnn = scrambled(Variant::EgnnAether, Setting::Lorentz, 56);
    let Body::Egnn(nets) = &egnn.body else { unreachable!() };
    let x = &lorentz.states[0];
    let topo = lorentz.topology();
    let rots: Vec<[f64; 9]> = node_frames(x, lorentz.n, 3).unwrap().iter().map(|r| r.raw()).collect();
    let frames = ForceFrames {
        edge: Rc::new(topo.receivers.iter().map(|&i| rots[i]).collect()),
        node: Rc::new(rots),
    };
    let rows = topo.num_nodes();
    let (h0, a) = (random_mat(rows, nets.hidden, 57), random_mat(topo.num_edges(), 1, 58));
    out.push(case("egnn_aether_layer", &egnn, |g| {
        let f = egnn.external_forces(g, &lorentz, x, None)?;
        let (h, p, u) = nets.layer_forward(
            g,
            &nets.layers[0],
            &topo,
            Some(&frames),
            g.constant(h0.clone()),
            g.constant(x.slice(ndarray::s![.., ..3]).to_owned()),
            g.constant(x.slice(ndarray::s![.., 3..]).to_owned()),
            f,
            g.constant(a.clone()),
            0.7,
        )?;
        Ok(g.add(g.add(project(g, h, 59), project(g, p, 60)), project(g, u, 61)))
    }));

    let target = random_mat(batch.systems * batch.n, 4, 62);
    out.push(case("gaussian_nll", &aether, |g| {
        let (mu, _) = decoder_step(g, &aether, &batch, &batch.states[1], g.constant(z.clone()), g.constant(h.clone()), None)?;
        gaussian_nll_var(g, mu, &target, 0.25)
    }));
    out.push(case("kl_categorical", &aether, |g| {
        let enc = encoder_forward(g, &aether, &batch, None)?;
        kl_categorical_var(g, enc.posterior_logits, enc.prior_logits)
    }));

    for variant in [
        Variant::Locs,
        Variant::Glocs,
        Variant::Global,
        Variant::Aether,
        Variant::SourceOracle,
        Variant::ForceOracle,
    ] {
        let m = scrambled(variant, Setting::Electrostatic, 63);
        out.push(case(variant.name(), &m, |g| {
            let mut rng = ChaCha8Rng::seed_from_u64(64);
            Ok(elbo_loss(g, &m, &batch, 0.5, batch.systems, &mut rng)?.total)
        }));
    }
    for variant in [
        Variant::Feedforward,
        Variant::FeedforwardAether,
        Variant::ParallelAether,
        Variant::Egnn,
        Variant::EgnnAether,
    ] {
        let m = scrambled(variant, Setting::Lorentz, 65);
        out.push(case(variant.name(), &m, |g| position_loss(g, &m, &lorentz, 1.0)));
    }
    out
}
