//! Single-step position predictors for the Lorentz setting.

use std::rc::Rc;

use rand::Rng;

use crate::autodiff::{Graph, Mat, RowRotations, Var};
use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp, ParamSet};

use super::features::{attach_forces, node_frames, step_inputs, FeatureLayout};
use super::graph::{Batch, Topology};
use super::{Body, Model, Variant};

/// Local-frame message passing with `L` rounds and a local residual head.
#[derive(Debug, Clone)]
pub struct FeedforwardNets {
    pub layout: FeatureLayout,
    pub hidden: usize,
    pub g_v: Linear,
    pub f_e: Vec<Mlp>,
    pub f_v: Vec<Mlp>,
    /// Starts at zero so an untrained model predicts `p̂ = p`.
    pub f_o: Mlp,
}

impl FeedforwardNets {
    pub fn new(ps: &mut ParamSet, layout: FeatureLayout, hidden: usize, layers: usize, rng: &mut impl Rng) -> Self {
        let h = hidden;
        let g_v = Linear::new(ps, "ff.g_v", layout.node_dim(), h, rng);
        let mut f_e = Vec::with_capacity(layers);
        let mut f_v = Vec::with_capacity(layers);
        for l in 0..layers {
            let fan_in = if l == 0 { layout.edge_dim() } else { 3 * h };
            f_e.push(Mlp::new(ps, &format!("ff.f_e{l}"), &[fan_in, h, h], true, rng));
            f_v.push(Mlp::new(ps, &format!("ff.f_v{l}"), &[h, 2 * h, h], false, rng));
        }
        let f_o = Mlp::new(ps, "ff.f_o", &[h, h, h, layout.d], false, rng);
        f_o.last().zero(ps);
        Self {
            layout,
            hidden,
            g_v,
            f_e,
            f_v,
            f_o,
        }
    }

    fn mean(g: &Graph, topo: &Topology, msgs: Var) -> Var {
        g.scale(
            g.scatter_add_rows(msgs, topo.receivers.clone(), topo.num_nodes()),
            topo.mean_scale(),
        )
    }

    /// Local residual `f_o(h^L)` rotated to the global frame, `[N, d]`.
    pub fn displacement(&self, g: &Graph, topo: &Topology, edge: Var, node: Var, rots: &RowRotations) -> Var {
        let mut he = self.f_e[0].forward(g, edge);
        let mut h = self.f_v[0].forward(g, g.add(self.g_v.forward(g, node), Self::mean(g, topo, he)));
        for l in 1..self.f_e.len() {
            let hi = g.gather_rows(h, topo.receivers.clone());
            let hj = g.gather_rows(h, topo.senders.clone());
            he = self.f_e[l].forward(g, g.concat_cols(&[hi, he, hj]));
            h = self.f_v[l].forward(g, g.add(h, Self::mean(g, topo, he)));
        }
        g.rotate_rows(self.f_o.forward(g, h), rots.clone(), self.layout.d, false)
    }
}

/// One velocity-EGNN layer.
#[derive(Debug, Clone)]
pub struct EgnnLayer {
    pub phi_e: Mlp,
    pub phi_x: Mlp,
    pub phi_v: Mlp,
    pub phi_h: Mlp,
}

/// Velocity-form EGNN; with `forces` the message and velocity networks also
/// read the external force, expressed in each node's velocity frame so that
/// every network input stays invariant.
#[derive(Debug, Clone)]
pub struct EgnnNets {
    pub d: usize,
    pub hidden: usize,
    pub forces: bool,
    pub embed: Linear,
    pub layers: Vec<EgnnLayer>,
}

/// Node frames used to express forces for the EGNN.
#[derive(Debug, Clone)]
pub struct ForceFrames {
    pub node: RowRotations,
    pub edge: RowRotations,
}

impl EgnnNets {
    pub fn new(ps: &mut ParamSet, d: usize, hidden: usize, layers: usize, forces: bool, rng: &mut impl Rng) -> Self {
        let h = hidden;
        let (fe, fv) = if forces { (2 * d, d) } else { (0, 0) };
        let embed = Linear::new(ps, "egnn.embed", 1, h, rng);
        let layers = (0..layers)
            .map(|l| EgnnLayer {
                phi_e: Mlp::new(ps, &format!("egnn.{l}.phi_e"), &[2 * h + 2 + fe, h, h], true, rng),
                phi_x: Mlp::new(ps, &format!("egnn.{l}.phi_x"), &[h, h, 1], false, rng),
                phi_v: Mlp::new(ps, &format!("egnn.{l}.phi_v"), &[h + fv, h, 1], false, rng),
                phi_h: Mlp::new(ps, &format!("egnn.{l}.phi_h"), &[2 * h, h, h], false, rng),
            })
            .collect();
        Self {
            d,
            hidden,
            forces,
            embed,
            layers,
        }
    }

    /// One layer: returns updated `(h, p, u)`. `f` is `[N, d]` in the global
    /// frame and is read only when the network was built with forces. The
    /// edge attribute `a` is `[E, 1]`; `c` scales the coordinate update.
    #[allow(clippy::too_many_arguments)]
    pub fn layer_forward(
        &self,
        g: &Graph,
        layer: &EgnnLayer,
        topo: &Topology,
        frames: Option<&ForceFrames>,
        h: Var,
        p: Var,
        u: Var,
        f: Option<Var>,
        a: Var,
        c: f64,
    ) -> Result<(Var, Var, Var)> {
        let d = self.d;
        let diff = g.sub(
            g.gather_rows(p, topo.senders.clone()),
            g.gather_rows(p, topo.receivers.clone()),
        );
        let dist2 = g.matmul(g.mul(diff, diff), g.constant(Mat::ones((d, 1))));
        let mut e_parts = vec![
            g.gather_rows(h, topo.receivers.clone()),
            g.gather_rows(h, topo.senders.clone()),
            dist2,
            a,
        ];
        let mut v_parts = vec![h];
        if self.forces {
            let (Some(f), Some(fr)) = (f, frames) else {
                return Err(Error::Config("this EGNN needs forces and frames".into()));
            };
            let f_ii = g.rotate_rows(f, fr.node.clone(), d, true);
            let f_ji = g.rotate_rows(g.gather_rows(f, topo.senders.clone()), fr.edge.clone(), d, true);
            e_parts.push(g.gather_rows(f_ii, topo.receivers.clone()));
            e_parts.push(f_ji);
            v_parts.push(f_ii);
        }
        let m = layer.phi_e.forward(g, g.concat_cols(&e_parts));
        let coef = layer.phi_x.forward(g, m);
        let pull = g.scale(
            g.scatter_add_rows(g.mul_col(diff, coef), topo.receivers.clone(), topo.num_nodes()),
            c,
        );
        let scale_u = layer.phi_v.forward(g, g.concat_cols(&v_parts));
        let u_next = g.add(g.mul_col(u, scale_u), pull);
        let p_next = g.add(p, u_next);
        let m_i = g.scatter_add_rows(m, topo.receivers.clone(), topo.num_nodes());
        let h_next = layer.phi_h.forward(g, g.concat_cols(&[h, m_i]));
        Ok((h_next, p_next, u_next))
    }

    /// Final positions after all layers. `charges` supply `a_{j,i} = q_i q_j`.
    pub fn forward(&self, g: &Graph, topo: &Topology, x: &Mat, charges: &[f64], f: Option<Var>) -> Result<Var> {
        let d = self.d;
        let p0 = x.slice(ndarray::s![.., ..d]).to_owned();
        let u0 = x.slice(ndarray::s![.., d..]).to_owned();
        let speed = Mat::from_shape_fn((x.nrows(), 1), |(r, _)| u0.row(r).dot(&u0.row(r)).sqrt());
        let a = Mat::from_shape_fn((topo.num_edges(), 1), |(e, _)| {
            charges[topo.senders[e]] * charges[topo.receivers[e]]
        });
        let frames = if self.forces {
            let rots: Vec<[f64; 9]> = node_frames(x, topo.n, d)?.iter().map(|r| r.raw()).collect();
            let edge = topo.receivers.iter().map(|&i| rots[i]).collect();
            Some(ForceFrames {
                node: Rc::new(rots),
                edge: Rc::new(edge),
            })
        } else {
            None
        };
        let mut h = self.embed.forward(g, g.constant(speed));
        let mut p = g.constant(p0);
        let mut u = g.constant(u0);
        let a = g.constant(a);
        let c = topo.mean_scale();
        for layer in &self.layers {
            (h, p, u) = self.layer_forward(g, layer, topo, frames.as_ref(), h, p, u, f, a, c)?;
        }
        Ok(p)
    }
}

/// Predicted next positions `[S·N, d]` of a single-step model from state `x`.
pub fn predict(g: &Graph, model: &Model, batch: &Batch, x: &Mat) -> Result<Var> {
    let topo = batch.topology();
    let d = model.cfg.d;
    let forces = model.external_forces(g, batch, x, None)?;
    match &model.body {
        Body::Feedforward(nets) => {
            let inputs = step_inputs(&nets.layout, &topo, x, Some(&batch.charges))?;
            let fed = if nets.layout.forces { forces } else { None };
            let (edge, node) = attach_forces(g, &nets.layout, &topo, &inputs, fed)?;
            let p = g.constant(x.slice(ndarray::s![.., ..d]).to_owned());
            let mut out = g.add(p, nets.displacement(g, &topo, edge, node, &inputs.node_rots));
            if model.variant() == Variant::ParallelAether {
                let f = forces.ok_or_else(|| Error::Config("parallel variant needs its field".into()))?;
                out = g.add(out, f);
            }
            Ok(out)
        }
        Body::Egnn(nets) => nets.forward(g, &topo, x, &batch.charges, forces),
        Body::Vae(_) => Err(Error::Config(format!(
            "{} is a sequence model",
            model.variant().name()
        ))),
    }
}

/// Numeric [`predict`] for one batch state.
pub fn feedforward_predict(model: &Model, batch: &Batch, x: &Mat) -> Result<Mat> {
    let g = model.params.graph();
    let out = predict(&g, model, batch, x)?;
    let m = g.to_mat(out);
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence {
            step: 1,
            detail: "non-finite prediction".into(),
        });
    }
    Ok(m)
}
