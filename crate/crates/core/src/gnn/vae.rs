//! Sequence VAE with latent, time-varying edge types.
//!
//! The encoder runs two rounds of message passing per timestep, then a
//! forward LSTM (prior) and a backward LSTM (posterior) along time for every
//! edge. The decoder mixes per-type message functions with sampled edge
//! weights, updates a GRU state per node and predicts a residual in the
//! node's local frame.

use std::rc::Rc;

use ndarray::{s, Array3, Axis};
use rand::Rng;

use crate::autodiff::{Graph, Mat, RowRotations, Var};
use crate::error::{Error, Result};
use crate::nn::{Gru, Lstm, Mlp, ParamSet};

use super::features::{attach_forces, source_inputs, stacked_inputs, step_inputs, FeatureLayout, FrameKind, StepInputs};
use super::graph::{Batch, Topology};
use super::{Body, Model};

#[derive(Debug, Clone)]
pub struct VaeNets {
    pub layout: FeatureLayout,
    pub k: usize,
    pub hidden: usize,
    pub f_e1: Mlp,
    pub g_v1: Mlp,
    pub f_v1: Mlp,
    pub f_e2: Mlp,
    pub lstm_prior: Lstm,
    pub lstm_enc: Lstm,
    pub f_prior: Mlp,
    pub f_enc: Mlp,
    pub f_k: Vec<Mlp>,
    pub g_v3: Mlp,
    pub f_v3: Mlp,
    pub g_k: Vec<Mlp>,
    pub gru: Gru,
    /// Local residual head; its last layer starts at zero.
    pub f_v4: Mlp,
    /// Source-to-particle messages (source oracle only).
    pub f_s: Option<Mlp>,
}

impl VaeNets {
    pub fn new(
        ps: &mut ParamSet,
        layout: FeatureLayout,
        k: usize,
        hidden: usize,
        lstm_hidden: usize,
        sources: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let (h, hl) = (hidden, lstm_hidden);
        let (fe, fv) = (layout.edge_dim(), layout.node_dim());
        let mut mlp = |name: &str, dims: &[usize]| Mlp::new(ps, name, dims, false, rng);
        let f_e1 = mlp("enc.f_e1", &[fe, h, h]);
        let g_v1 = mlp("enc.g_v1", &[fv, h, h]);
        let f_v1 = mlp("enc.f_v1", &[h, h, h]);
        let f_e2 = mlp("enc.f_e2", &[3 * h, h, h]);
        let f_prior = mlp("enc.f_prior", &[hl, hl, k]);
        let f_enc = mlp("enc.f_enc", &[2 * hl, hl, k]);
        let f_k: Vec<Mlp> = (0..k).map(|i| mlp(&format!("dec.f_k{i}"), &[fe, h, h])).collect();
        let g_v3 = mlp("dec.g_v3", &[fv, h, h]);
        let f_v3 = mlp("dec.f_v3", &[h, h, h]);
        let g_k: Vec<Mlp> = (0..k).map(|i| mlp(&format!("dec.g_k{i}"), &[2 * h, h, h])).collect();
        let f_v4 = mlp("dec.f_v4", &[h, h, 2 * layout.d]);
        let source_width = layout.d + 1 + crate::geometry::local_feature_dim(layout.d);
        let f_s = sources.then(|| mlp("dec.f_s", &[source_width, h, h]));
        let lstm_prior = Lstm::new(ps, "enc.lstm_prior", h, hl, rng);
        let lstm_enc = Lstm::new(ps, "enc.lstm_enc", h, hl, rng);
        let gru = Gru::new(ps, "dec.gru", 2 * h, h, rng);
        f_v4.last().zero(ps);
        Self {
            layout,
            k,
            hidden,
            f_e1,
            g_v1,
            f_v1,
            f_e2,
            lstm_prior,
            lstm_enc,
            f_prior,
            f_enc,
            f_k,
            g_v3,
            f_v3,
            g_k,
            gru,
            f_v4,
            f_s,
        }
    }

    fn mean_to_nodes(&self, g: &Graph, topo: &Topology, msgs: Var) -> Var {
        g.scale(
            g.scatter_add_rows(msgs, topo.receivers.clone(), topo.num_nodes()),
            topo.mean_scale(),
        )
    }

    /// Two rounds of encoder message passing; `[E, H]` edge embeddings.
    pub fn encode_messages(&self, g: &Graph, topo: &Topology, edge: Var, node: Var) -> Var {
        let h1 = self.f_e1.forward(g, edge);
        let agg = self.mean_to_nodes(g, topo, h1);
        let hv = self.f_v1.forward(g, g.add(self.g_v1.forward(g, node), agg));
        let hi = g.gather_rows(hv, topo.receivers.clone());
        let hj = g.gather_rows(hv, topo.senders.clone());
        self.f_e2.forward(g, g.concat_cols(&[hi, h1, hj]))
    }

    fn mix(&self, g: &Graph, nets: &[Mlp], x: Var, z: Var) -> Var {
        let mut acc = None;
        for (k, f) in nets.iter().enumerate() {
            let term = g.mul_col(f.forward(g, x), g.slice_cols(z, k, 1));
            acc = Some(match acc {
                Some(a) => g.add(a, term),
                None => term,
            });
        }
        acc.expect("at least one edge type")
    }

    /// `m_i` from current states, edge weights `z` (`[E, K]`) and optional
    /// source rows with their receivers.
    pub fn state_messages(
        &self,
        g: &Graph,
        topo: &Topology,
        edge: Var,
        node: Var,
        z: Var,
        sources: Option<&SourceRows>,
    ) -> Var {
        let msgs = self.mix(g, &self.f_k, edge, z);
        let mut pre = g.add(self.g_v3.forward(g, node), self.mean_to_nodes(g, topo, msgs));
        if let (Some(f_s), Some(src)) = (&self.f_s, sources) {
            if src.per_node > 0 {
                let h = f_s.forward(g, g.constant(src.rows.clone()));
                let agg = g.scatter_add_rows(h, src.receivers.clone(), topo.num_nodes());
                pre = g.add(pre, g.scale(agg, 1.0 / src.per_node as f64));
            }
        }
        self.f_v3.forward(g, pre)
    }

    /// GRU update of the node states from hidden-state messages and `m`.
    pub fn hidden_step(&self, g: &Graph, topo: &Topology, h: Var, z: Var, m: Var) -> Var {
        let pair = g.concat_cols(&[
            g.gather_rows(h, topo.senders.clone()),
            g.gather_rows(h, topo.receivers.clone()),
        ]);
        let msgs = self.mix(g, &self.g_k, pair, z);
        let n = self.mean_to_nodes(g, topo, msgs);
        self.gru.step(g, g.concat_cols(&[n, m]), h)
    }

    /// `μ = x + R f_v4(h)`; the global variant skips the rotation.
    pub fn output(&self, g: &Graph, h: Var, x: Var, rots: &RowRotations) -> Var {
        let delta = self.f_v4.forward(g, h);
        let delta = match self.layout.frame {
            FrameKind::Global => delta,
            FrameKind::Local => g.rotate_rows(delta, rots.clone(), self.layout.d, false),
        };
        g.add(x, delta)
    }
}

/// Source-to-particle inputs of a block of node rows.
#[derive(Debug, Clone)]
pub struct SourceRows {
    pub rows: Mat,
    pub receivers: Rc<[usize]>,
    pub per_node: usize,
}

fn source_rows(model: &Model, batch: &Batch, states: &Mat, inputs: &StepInputs) -> Result<Option<SourceRows>> {
    let Some(sources) = model.sources(batch)? else {
        return Ok(None);
    };
    let nodes = batch.systems * batch.n;
    let reps: Vec<(Mat, Vec<f64>)> = (0..states.nrows() / nodes)
        .flat_map(|_| sources.iter().cloned())
        .collect();
    let (rows, receivers) = source_inputs(model.cfg.d, states, batch.n, inputs, &reps)?;
    let per_node = sources.first().map_or(0, |s| s.1.len());
    if sources.iter().any(|s| s.1.len() != per_node) {
        return Err(Error::Shape("all systems must have the same number of sources".into()));
    }
    Ok(Some(SourceRows {
        rows,
        receivers,
        per_node,
    }))
}

pub(crate) fn vae_nets(model: &Model) -> Result<&VaeNets> {
    match &model.body {
        Body::Vae(v) => Ok(v),
        _ => Err(Error::Config(format!("{} is not a sequence model", model.variant().name()))),
    }
}

fn gumbel_noise(rng: &mut impl Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| {
        let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
        -(-u.ln()).ln()
    })
}

fn one_hot_argmax(m: &Mat) -> Mat {
    let mut out = Mat::zeros(m.dim());
    for (r, row) in m.rows().into_iter().enumerate() {
        let best = row
            .iter()
            .enumerate()
            .fold(0, |b, (k, &v)| if v > row[b] { k } else { b });
        out[[r, best]] = 1.0;
    }
    out
}

/// Row-wise Gumbel-softmax relaxation of categorical `logits`. Hard samples
/// are one-hot in value with the soft sample's gradient.
pub fn gumbel_softmax(g: &Graph, logits: Var, tau: f64, hard: bool, rng: &mut impl Rng) -> Var {
    let (rows, k) = g.shape(logits);
    let noise = g.constant(gumbel_noise(rng, rows, k));
    let soft = g.softmax_rows(g.scale(g.add(logits, noise), 1.0 / tau));
    if !hard {
        return soft;
    }
    let hard_val = one_hot_argmax(&g.value(soft));
    g.add(g.detach(g.sub(g.constant(hard_val), soft)), soft)
}

/// Numeric single-row version of [`gumbel_softmax`].
pub fn gumbel_softmax_sample(logits: &[f64], tau: f64, hard: bool, rng: &mut impl Rng) -> Vec<f64> {
    let noise = gumbel_noise(rng, 1, logits.len());
    let y: Vec<f64> = logits.iter().zip(noise.iter()).map(|(l, n)| (l + n) / tau).collect();
    let max = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = y.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = e.iter().sum();
    let soft: Vec<f64> = e.iter().map(|v| v / sum).collect();
    if !hard {
        return soft;
    }
    let best = (0..soft.len()).fold(0, |b, k| if soft[k] > soft[b] { k } else { b });
    (0..soft.len()).map(|k| f64::from(k == best)).collect()
}

fn hard_sample(logits: &Mat, rng: &mut impl Rng) -> Mat {
    let noise = gumbel_noise(rng, logits.nrows(), logits.ncols());
    one_hot_argmax(&(logits + &noise))
}

fn stack_states(states: &[Mat]) -> Mat {
    let views: Vec<_> = states.iter().map(|m| m.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("equal widths")
}

/// Prior and posterior edge logits on the tape, `[T·S·E, K]` each, rows
/// time-major.
pub struct EncoderOutput {
    pub prior_logits: Var,
    pub posterior_logits: Var,
    pub edge: Var,
    pub node: Var,
    pub inputs: StepInputs,
    pub stacked: Mat,
}

/// Runs the encoder over every step of `batch`.
pub fn encoder_forward(g: &Graph, model: &Model, batch: &Batch, latent: Option<Var>) -> Result<EncoderOutput> {
    let nets = vae_nets(model)?;
    let t_len = batch.steps();
    if t_len == 0 {
        return Err(Error::InvalidInput("encoder needs at least one step".into()));
    }
    let topo = batch.topology();
    let stacked_topo = topo.stacked(t_len);
    let inputs = stacked_inputs(&nets.layout, &topo, &batch.states, Some(&batch.charges))?;
    let stacked = stack_states(&batch.states);
    let forces = if nets.layout.forces {
        model.external_forces(g, batch, &stacked, latent)?
    } else {
        None
    };
    let (edge, node) = attach_forces(g, &nets.layout, &stacked_topo, &inputs, forces)?;
    let h2 = nets.encode_messages(g, &stacked_topo, edge, node);

    let ne = topo.num_edges();
    let hl = nets.lstm_prior.dim;
    let zeros = || g.constant(Mat::zeros((ne, hl)));
    let (mut hp, mut cp) = (zeros(), zeros());
    let mut prior = Vec::with_capacity(t_len);
    for t in 0..t_len {
        (hp, cp) = nets.lstm_prior.step(g, g.slice_rows(h2, t * ne, ne), hp, cp);
        prior.push(hp);
    }
    let (mut he, mut ce) = (zeros(), zeros());
    let mut post = vec![he; t_len];
    for t in (0..t_len).rev() {
        (he, ce) = nets.lstm_enc.step(g, g.slice_rows(h2, t * ne, ne), he, ce);
        post[t] = he;
    }
    let p = g.concat_rows(&prior);
    let b = g.concat_rows(&post);
    Ok(EncoderOutput {
        prior_logits: nets.f_prior.forward(g, p),
        posterior_logits: nets.f_enc.forward(g, g.concat_cols(&[p, b])),
        edge,
        node,
        inputs,
        stacked,
    })
}

/// Numeric edge distributions, `[T, S·E, K]` logits.
#[derive(Debug, Clone)]
pub struct EdgePosterior {
    pub prior_logits: Array3<f64>,
    pub posterior_logits: Array3<f64>,
}

impl EdgePosterior {
    pub fn compute(model: &Model, batch: &Batch) -> Result<Self> {
        let g = model.params.graph();
        let latent = model.latent(&g, batch, &batch.states)?;
        let out = encoder_forward(&g, model, batch, latent)?;
        let t = batch.steps();
        let shape = |v: Var| {
            let m = g.to_mat(v);
            let (rows, k) = m.dim();
            m.into_shape_with_order((t, rows / t, k)).expect("time-major rows")
        };
        Ok(Self {
            prior_logits: shape(out.prior_logits),
            posterior_logits: shape(out.posterior_logits),
        })
    }
}

/// Teacher-forced reconstruction of a batch.
pub struct VaeOutput {
    /// Predictions of steps `1..T`, `[(T−1)·S·N, 2d]`.
    pub mu: Var,
    /// Observed steps `1..T`.
    pub target: Mat,
    pub prior_logits: Var,
    pub posterior_logits: Var,
}

/// Encoder plus teacher-forced decoder over all steps of `batch`, with edges
/// sampled from the posterior (training) or the prior.
pub fn teacher_forced(
    g: &Graph,
    model: &Model,
    batch: &Batch,
    use_prior: bool,
    hard: bool,
    rng: &mut impl Rng,
) -> Result<VaeOutput> {
    let nets = vae_nets(model)?;
    let t_len = batch.steps();
    if t_len < 2 {
        return Err(Error::InvalidInput("teacher forcing needs two or more steps".into()));
    }
    let latent = model.latent(g, batch, &batch.states)?;
    let enc = encoder_forward(g, model, batch, latent)?;
    let logits = if use_prior { enc.prior_logits } else { enc.posterior_logits };
    let z = gumbel_softmax(g, logits, model.cfg.tau, hard, rng);

    let topo = batch.topology();
    let (ne, nn) = (topo.num_edges(), topo.num_nodes());
    let steps = t_len - 1;
    let dec_topo = topo.stacked(steps);
    let edge = g.slice_rows(enc.edge, 0, steps * ne);
    let node = g.slice_rows(enc.node, 0, steps * nn);
    let z_dec = g.slice_rows(z, 0, steps * ne);
    let prefix = enc.stacked.slice(s![..steps * nn, ..]).to_owned();
    let src = source_rows(model, batch, &prefix, &enc.inputs)?;
    let m_all = nets.state_messages(g, &dec_topo, edge, node, z_dec, src.as_ref());

    let mut h = g.constant(Mat::zeros((nn, nets.hidden)));
    let mut hs = Vec::with_capacity(steps);
    for t in 0..steps {
        let z_t = g.slice_rows(z, t * ne, ne);
        let m_t = g.slice_rows(m_all, t * nn, nn);
        h = nets.hidden_step(g, &topo, h, z_t, m_t);
        hs.push(h);
    }
    let rots: RowRotations = Rc::new(enc.inputs.node_rots[..steps * nn].to_vec());
    let mu = nets.output(g, g.concat_rows(&hs), g.constant(prefix), &rots);
    Ok(VaeOutput {
        mu,
        target: enc.stacked.slice(s![nn.., ..]).to_owned(),
        prior_logits: enc.prior_logits,
        posterior_logits: enc.posterior_logits,
    })
}

/// One decoder step from state `x` (`[S·N, 2d]`) with edge weights `z`
/// (`[S·E, K]`) and hidden states `h`; returns `(μ, h')`.
pub fn decoder_step(
    g: &Graph,
    model: &Model,
    batch: &Batch,
    x: &Mat,
    z: Var,
    h: Var,
    latent: Option<Var>,
) -> Result<(Var, Var)> {
    let nets = vae_nets(model)?;
    let topo = batch.topology();
    let inputs = step_inputs(&nets.layout, &topo, x, Some(&batch.charges))?;
    let forces = if nets.layout.forces {
        model.external_forces(g, batch, x, latent)?
    } else {
        None
    };
    let (edge, node) = attach_forces(g, &nets.layout, &topo, &inputs, forces)?;
    decode_from_inputs(g, model, batch, x, &inputs, edge, node, z, h)
}

#[allow(clippy::too_many_arguments)]
fn decode_from_inputs(
    g: &Graph,
    model: &Model,
    batch: &Batch,
    x: &Mat,
    inputs: &StepInputs,
    edge: Var,
    node: Var,
    z: Var,
    h: Var,
) -> Result<(Var, Var)> {
    let nets = vae_nets(model)?;
    let topo = batch.topology();
    if g.shape(z) != (topo.num_edges(), nets.k) || g.shape(h) != (topo.num_nodes(), nets.hidden) {
        return Err(Error::Shape("edge weights or hidden state do not match the batch".into()));
    }
    let src = source_rows(model, batch, x, inputs)?;
    let m = nets.state_messages(g, &topo, edge, node, z, src.as_ref());
    let h_next = nets.hidden_step(g, &topo, h, z, m);
    let mu = nets.output(g, h_next, g.constant(x.clone()), &inputs.node_rots);
    Ok((mu, h_next))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RolloutMode {
    /// One-step predictions from observed states with posterior edges; the
    /// batch must hold `t_in + horizon` steps.
    PosteriorTeacherForced,
    /// Burn-in on the observed steps, then feed predictions back with edges
    /// drawn from the prior.
    PriorFreeRunning,
}

fn check_finite(m: &Mat, step: usize) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence {
            step,
            detail: "non-finite prediction".into(),
        })
    }
}

/// Predictions of steps `t_in .. t_in + horizon`, each `[S·N, 2d]`.
pub fn rollout(
    model: &Model,
    batch: &Batch,
    t_in: usize,
    horizon: usize,
    mode: RolloutMode,
    rng: &mut impl Rng,
) -> Result<Vec<Mat>> {
    let nets = vae_nets(model)?;
    if t_in == 0 || t_in > batch.steps() {
        return Err(Error::InvalidInput(format!(
            "need 1..={} observed steps, got {t_in}",
            batch.steps()
        )));
    }
    if horizon == 0 {
        return Ok(Vec::new());
    }
    if mode == RolloutMode::PosteriorTeacherForced {
        if batch.steps() < t_in + horizon {
            return Err(Error::InvalidInput("teacher forcing needs the true future".into()));
        }
        let g = model.params.graph();
        let out = teacher_forced(&g, model, &batch.window(0..t_in + horizon), false, true, rng)?;
        let mu = g.to_mat(out.mu);
        let nn = batch.systems * batch.n;
        return (0..horizon)
            .map(|k| {
                let t = t_in - 1 + k;
                let m = mu.slice(s![t * nn..(t + 1) * nn, ..]).to_owned();
                check_finite(&m, k + 1).map(|_| m)
            })
            .collect();
    }

    let topo = batch.topology();
    let (ne, nn) = (topo.num_edges(), topo.num_nodes());
    let latent = {
        let g = model.params.graph();
        let z = model.latent(&g, batch, &batch.states[..t_in])?;
        z.map(|z| g.to_mat(z))
    };
    let hl = nets.lstm_prior.dim;
    let (mut hp, mut cp) = (Mat::zeros((ne, hl)), Mat::zeros((ne, hl)));
    let mut h = Mat::zeros((nn, nets.hidden));
    let mut preds: Vec<Mat> = Vec::with_capacity(horizon);
    for t in 0..t_in + horizon - 1 {
        let x = if t < t_in { batch.states[t].clone() } else { preds[t - t_in].clone() };
        let g = model.params.graph();
        let lat = latent.as_ref().map(|z| g.constant(z.clone()));
        let inputs = step_inputs(&nets.layout, &topo, &x, Some(&batch.charges))?;
        let forces = if nets.layout.forces {
            model.external_forces(&g, batch, &x, lat)?
        } else {
            None
        };
        let (edge, node) = attach_forces(&g, &nets.layout, &topo, &inputs, forces)?;
        let h2 = nets.encode_messages(&g, &topo, edge, node);
        let (hp_v, cp_v) = nets.lstm_prior.step(&g, h2, g.constant(hp), g.constant(cp));
        let logits = g.to_mat(nets.f_prior.forward(&g, hp_v));
        let z = g.constant(hard_sample(&logits, rng));
        let (mu, h_next) = decode_from_inputs(&g, model, batch, &x, &inputs, edge, node, z, g.constant(h))?;
        hp = g.to_mat(hp_v);
        cp = g.to_mat(cp_v);
        h = g.to_mat(h_next);
        if t + 1 >= t_in {
            let mu = g.to_mat(mu);
            check_finite(&mu, t + 2 - t_in)?;
            preds.push(mu);
        }
    }
    Ok(preds)
}
