//! Node and edge inputs of the graph networks.
//!
//! Every feature that depends only on observed states is computed numerically
//! here; force blocks, which may come from a trainable field, are attached on
//! the tape by [`attach_forces`]. Force blocks always come last so that a
//! force-free network is the force-augmented one with zero weight rows.

use std::rc::Rc;

use crate::autodiff::{Graph, Mat, RowRotations, Var};
use crate::error::{Error, Result};
use crate::geometry::{
    local_feature_dim, orientation_from_velocity_and_reference, to_local_frame, AugmentedState,
    Rotation, DEGENERATE_SPEED,
};

use super::graph::Topology;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameKind {
    /// Raw global-frame states.
    Global,
    /// States expressed in each receiver's velocity-aligned frame.
    Local,
}

/// Which blocks make up the node and edge inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureLayout {
    pub d: usize,
    pub frame: FrameKind,
    /// Append the origin node `v_{O|i}`.
    pub origin: bool,
    /// Keep the origin block but fill it with zeros.
    pub zero_origin: bool,
    /// Append `f_{j|i}, f_{i|i}` (edges) and `f_{i|i}` (nodes).
    pub forces: bool,
    /// Append `q_i q_j` and `‖r_{j,i}‖` to edges.
    pub pair_scalars: bool,
}

impl FeatureLayout {
    pub fn global(d: usize) -> Self {
        Self {
            d,
            frame: FrameKind::Global,
            origin: false,
            zero_origin: false,
            forces: false,
            pair_scalars: false,
        }
    }

    pub fn local(d: usize) -> Self {
        Self {
            frame: FrameKind::Local,
            ..Self::global(d)
        }
    }

    fn state_dim(&self) -> usize {
        match self.frame {
            FrameKind::Global => 2 * self.d,
            FrameKind::Local => local_feature_dim(self.d),
        }
    }

    fn origin_dim(&self) -> usize {
        if self.origin {
            2 * self.d
        } else {
            0
        }
    }

    /// Edge columns computed from states alone.
    pub fn edge_state_dim(&self) -> usize {
        2 * self.state_dim() + self.origin_dim() + if self.pair_scalars { 2 } else { 0 }
    }

    pub fn node_state_dim(&self) -> usize {
        self.state_dim() + self.origin_dim()
    }

    pub fn edge_dim(&self) -> usize {
        self.edge_state_dim() + if self.forces { 2 * self.d } else { 0 }
    }

    pub fn node_dim(&self) -> usize {
        self.node_state_dim() + if self.forces { self.d } else { 0 }
    }
}

/// State-only inputs of one (or several stacked) timesteps.
#[derive(Debug, Clone)]
pub struct StepInputs {
    /// `[E, F_e]` without force columns.
    pub edge: Mat,
    /// `[N, F_v]` without force columns.
    pub node: Mat,
    /// Frame of every node, as raw 3x3 blocks.
    pub node_rots: RowRotations,
    /// Frame of every edge's receiver.
    pub edge_rots: RowRotations,
}

impl StepInputs {
    /// Row-wise concatenation in the order given.
    pub fn stack(parts: &[StepInputs]) -> Self {
        let cat = |f: &dyn Fn(&StepInputs) -> &Mat| {
            let views: Vec<_> = parts.iter().map(|p| f(p).view()).collect();
            ndarray::concatenate(ndarray::Axis(0), &views).expect("equal widths")
        };
        Self {
            edge: cat(&|p| &p.edge),
            node: cat(&|p| &p.node),
            node_rots: Rc::new(parts.iter().flat_map(|p| p.node_rots.iter().copied()).collect()),
            edge_rots: Rc::new(parts.iter().flat_map(|p| p.edge_rots.iter().copied()).collect()),
        }
    }
}

fn row3(m: &Mat, r: usize, start: usize, d: usize) -> [f64; 3] {
    let mut out = [0.0; 3];
    for k in 0..d {
        out[k] = m[[r, start + k]];
    }
    out
}

/// Velocity-aligned frame of every node of `states` (`[S·N, 2d]`). In 3D the
/// roll follows the direction to the system's centroid, so frames rotate
/// with the system; objects at rest get the identity.
pub fn node_frames(states: &Mat, n: usize, d: usize) -> Result<Vec<Rotation>> {
    let rows = states.nrows();
    if states.ncols() != 2 * d || n == 0 || rows % n != 0 {
        return Err(Error::Shape(format!(
            "states [{rows}, {}] for {n} objects in {d}D",
            states.ncols()
        )));
    }
    let mut out = Vec::with_capacity(rows);
    for s in 0..rows / n {
        let mut c = [0.0; 3];
        for i in 0..n {
            let p = row3(states, s * n + i, 0, d);
            for k in 0..d {
                c[k] += p[k] / n as f64;
            }
        }
        for i in 0..n {
            let r = s * n + i;
            let p = row3(states, r, 0, d);
            let u = row3(states, r, d, d);
            let reference: Vec<f64> = (0..d).map(|k| c[k] - p[k]).collect();
            let omega = orientation_from_velocity_and_reference(&u[..d], &reference, DEGENERATE_SPEED)?;
            out.push(crate::geometry::rotation_from_orientation(&omega));
        }
    }
    Ok(out)
}

fn augmented(states: &Mat, r: usize, d: usize, frame: &Rotation) -> AugmentedState {
    AugmentedState::new(&row3(states, r, 0, d)[..d], frame.orientation(), &row3(states, r, d, d)[..d])
}

/// Inputs of one timestep. `charges` is needed only for pair scalars.
pub fn step_inputs(
    layout: &FeatureLayout,
    topo: &Topology,
    states: &Mat,
    charges: Option<&[f64]>,
) -> Result<StepInputs> {
    let d = layout.d;
    let nodes = topo.num_nodes();
    if states.dim() != (nodes, 2 * d) {
        return Err(Error::Shape(format!(
            "states {:?}, expected [{nodes}, {}]",
            states.dim(),
            2 * d
        )));
    }
    if layout.pair_scalars && charges.map_or(true, |q| q.len() != nodes) {
        return Err(Error::Config("pair scalars need one charge per node".into()));
    }
    let frames = match layout.frame {
        FrameKind::Global => vec![Rotation::identity(d); nodes],
        FrameKind::Local => node_frames(states, topo.n, d)?,
    };
    let aug: Vec<AugmentedState> = (0..nodes).map(|r| augmented(states, r, d, &frames[r])).collect();

    let sd = layout.state_dim();
    let mut node = Mat::zeros((nodes, layout.node_state_dim()));
    for r in 0..nodes {
        let feats = match layout.frame {
            FrameKind::Global => states.row(r).to_vec(),
            FrameKind::Local => to_local_frame(&aug[r], &aug[r])?.features(),
        };
        for (c, v) in feats.into_iter().enumerate() {
            node[[r, c]] = v;
        }
        if layout.origin && !layout.zero_origin {
            // origin node: at 0, moving along the global x-axis
            let p = row3(states, r, 0, d);
            let neg: Vec<f64> = p[..d].iter().map(|x| -x).collect();
            let mut x_hat = vec![0.0; d];
            x_hat[0] = 1.0;
            let a = frames[r].apply_transpose(&neg);
            let b = frames[r].apply_transpose(&x_hat);
            for k in 0..d {
                node[[r, sd + k]] = a[k];
                node[[r, sd + d + k]] = b[k];
            }
        }
    }

    let edges = topo.num_edges();
    let mut edge = Mat::zeros((edges, layout.edge_state_dim()));
    for e in 0..edges {
        let (j, i) = (topo.senders[e], topo.receivers[e]);
        let vji = match layout.frame {
            FrameKind::Global => states.row(j).to_vec(),
            FrameKind::Local => to_local_frame(&aug[j], &aug[i])?.features(),
        };
        let mut row = edge.row_mut(e);
        for (c, v) in vji.into_iter().enumerate() {
            row[c] = v;
        }
        for c in 0..sd {
            row[sd + c] = node[[i, c]];
        }
        let mut c0 = 2 * sd;
        if layout.origin {
            for c in 0..2 * d {
                row[c0 + c] = node[[i, sd + c]];
            }
            c0 += 2 * d;
        }
        if layout.pair_scalars {
            let q = charges.unwrap();
            let r2: f64 = (0..d).map(|k| (states[[j, k]] - states[[i, k]]).powi(2)).sum();
            row[c0] = q[i] * q[j];
            row[c0 + 1] = r2.sqrt();
        }
    }

    let node_rots: Vec<[f64; 9]> = frames.iter().map(|f| f.raw()).collect();
    let edge_rots = topo.receivers.iter().map(|&i| node_rots[i]).collect();
    Ok(StepInputs {
        edge,
        node,
        node_rots: Rc::new(node_rots),
        edge_rots: Rc::new(edge_rots),
    })
}

/// Inputs of every step of `trajectory`, stacked row-wise (time-major).
pub fn stacked_inputs(
    layout: &FeatureLayout,
    topo: &Topology,
    trajectory: &[Mat],
    charges: Option<&[f64]>,
) -> Result<StepInputs> {
    let parts = trajectory
        .iter()
        .map(|x| step_inputs(layout, topo, x, charges))
        .collect::<Result<Vec<_>>>()?;
    Ok(StepInputs::stack(&parts))
}

/// Full edge and node inputs on the tape. `forces` is `[nodes, d]` in the
/// global frame and must be given exactly when the layout has force blocks;
/// `topo` must describe the rows of `inputs`.
pub fn attach_forces(
    g: &Graph,
    layout: &FeatureLayout,
    topo: &Topology,
    inputs: &StepInputs,
    forces: Option<Var>,
) -> Result<(Var, Var)> {
    let edge = g.constant(inputs.edge.clone());
    let node = g.constant(inputs.node.clone());
    match (layout.forces, forces) {
        (false, None) => Ok((edge, node)),
        (false, Some(_)) => Err(Error::Config("forces given to a force-free layout".into())),
        (true, None) => Err(Error::Config("this variant needs forces".into())),
        (true, Some(f)) => {
            let d = layout.d;
            if g.shape(f) != (topo.num_nodes(), d) {
                return Err(Error::Shape(format!("forces {:?}", g.shape(f))));
            }
            let f_ii = g.rotate_rows(f, inputs.node_rots.clone(), d, true);
            let f_ji = g.rotate_rows(
                g.gather_rows(f, topo.senders.clone()),
                inputs.edge_rots.clone(),
                d,
                true,
            );
            let f_ii_edge = g.gather_rows(f_ii, topo.receivers.clone());
            Ok((
                g.concat_cols(&[edge, f_ji, f_ii_edge]),
                g.concat_cols(&[node, f_ii]),
            ))
        }
    }
}

/// Numeric node and edge inputs per timestep, force blocks included.
pub fn build_node_edge_inputs(
    layout: &FeatureLayout,
    topo: &Topology,
    trajectory: &[Mat],
    charges: Option<&[f64]>,
    forces: Option<&[Mat]>,
) -> Result<Vec<(Mat, Mat)>> {
    if forces.is_some_and(|f| f.len() != trajectory.len()) {
        return Err(Error::Shape("one force matrix per timestep expected".into()));
    }
    let mut out = Vec::with_capacity(trajectory.len());
    for (t, x) in trajectory.iter().enumerate() {
        let inputs = step_inputs(layout, topo, x, charges)?;
        let g = Graph::new();
        let f = forces.map(|f| g.constant(f[t].clone()));
        let (e, v) = attach_forces(&g, layout, topo, &inputs, f)?;
        out.push((g.to_mat(v), g.to_mat(e)));
    }
    Ok(out)
}

/// Source-to-particle inputs `[Q_iᵀ(p_s − p_i), q_s, v_{i|i}]`, one row per
/// (particle, source) pair, grouped by particle. Returns the rows and the
/// receiving particle of each.
pub fn source_inputs(
    d: usize,
    states: &Mat,
    n: usize,
    inputs: &StepInputs,
    sources: &[(Mat, Vec<f64>)],
) -> Result<(Mat, Rc<[usize]>)> {
    let nodes = states.nrows();
    if sources.len() * n != nodes {
        return Err(Error::Config("one source set per system expected".into()));
    }
    let sd = local_feature_dim(d);
    let width = d + 1 + sd;
    let total: usize = sources.iter().map(|s| s.0.nrows() * n).sum();
    let mut rows = Mat::zeros((total, width));
    let mut recv = Vec::with_capacity(total);
    let mut r = 0;
    for i in 0..nodes {
        let (sp, ss) = &sources[i / n];
        let frame = Rotation::from_raw(d, inputs.node_rots[i]);
        for (m, &q) in ss.iter().enumerate() {
            let rel: Vec<f64> = (0..d).map(|k| sp[[m, k]] - states[[i, k]]).collect();
            let local = frame.apply_transpose(&rel);
            for k in 0..d {
                rows[[r, k]] = local[k];
            }
            rows[[r, d]] = q;
            for c in 0..sd {
                rows[[r, d + 1 + c]] = inputs.node[[i, c]];
            }
            recv.push(i);
            r += 1;
        }
    }
    Ok((rows, recv.into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn origin_block_at_rest_frame_is_x_axis() {
        let layout = FeatureLayout {
            origin: true,
            ..FeatureLayout::local(2)
        };
        let topo = Topology::fully_connected(1, 2);
        let x = array![[0.0, 0.0, 1.0, 0.0], [1.0, 1.0, 0.0, 1.0]];
        let inp = step_inputs(&layout, &topo, &x, None).unwrap();
        let sd = local_feature_dim(2);
        let o: Vec<f64> = inp.node.row(0).iter().skip(sd).copied().collect();
        assert_eq!(o, vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn zero_forces_append_a_zero_block() {
        let with = FeatureLayout {
            origin: true,
            forces: true,
            ..FeatureLayout::local(3)
        };
        let without = FeatureLayout { forces: false, ..with };
        let topo = Topology::fully_connected(1, 3);
        let x = Mat::from_shape_fn((3, 6), |(r, c)| ((r * 7 + c * 3) % 5) as f64 - 1.7);
        let a = build_node_edge_inputs(&with, &topo, &[x.clone()], None, Some(&[Mat::zeros((3, 3))])).unwrap();
        let b = build_node_edge_inputs(&without, &topo, &[x], None, None).unwrap();
        let (va, ea) = &a[0];
        let (vb, eb) = &b[0];
        assert_eq!(va.slice(ndarray::s![.., ..vb.ncols()]), vb.view());
        assert_eq!(ea.slice(ndarray::s![.., ..eb.ncols()]), eb.view());
        assert!(va.slice(ndarray::s![.., vb.ncols()..]).iter().all(|&v| v == 0.0));
        assert!(ea.slice(ndarray::s![.., eb.ncols()..]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn missing_forces_is_a_config_error() {
        let layout = FeatureLayout {
            forces: true,
            ..FeatureLayout::local(2)
        };
        let topo = Topology::fully_connected(1, 2);
        let x = Mat::from_elem((2, 4), 0.5);
        assert!(matches!(
            build_node_edge_inputs(&layout, &topo, &[x], None, None),
            Err(Error::Config(_))
        ));
    }
}
