//! Fully connected interaction graphs over batches of systems.

use std::ops::Range;
use std::rc::Rc;

use ndarray::{Array2, Axis};

use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::simulate::{static_field_force, Dataset, ExternalField};

/// Directed edges `j → i`, `j ≠ i`, inside each of `systems` disjoint
/// systems of `n` nodes. Nodes are numbered system-major; edges are ordered
/// by system, then receiver, then sender.
///
/// Stacking `T` timesteps of a batch of `S` systems row-wise is the same as
/// one batch of `S·T` systems, which is how time-parallel passes are built.
#[derive(Debug, Clone)]
pub struct Topology {
    pub systems: usize,
    pub n: usize,
    pub senders: Rc<[usize]>,
    pub receivers: Rc<[usize]>,
}

impl Topology {
    pub fn fully_connected(systems: usize, n: usize) -> Self {
        let mut senders = Vec::with_capacity(systems * n * n.saturating_sub(1));
        let mut receivers = Vec::with_capacity(senders.capacity());
        for s in 0..systems {
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        senders.push(s * n + j);
                        receivers.push(s * n + i);
                    }
                }
            }
        }
        Self {
            systems,
            n,
            senders: senders.into(),
            receivers: receivers.into(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.systems * self.n
    }

    pub fn num_edges(&self) -> usize {
        self.senders.len()
    }

    /// Edges per system.
    pub fn edges_per_system(&self) -> usize {
        self.n * self.n.saturating_sub(1)
    }

    /// Scale turning a neighbour sum into a mean.
    pub fn mean_scale(&self) -> f64 {
        1.0 / self.n.saturating_sub(1).max(1) as f64
    }

    /// The same graph repeated `times` times, row blocks in order.
    pub fn stacked(&self, times: usize) -> Self {
        Self::fully_connected(self.systems * times, self.n)
    }

    /// System index of every node.
    pub fn node_systems(&self) -> Rc<[usize]> {
        (0..self.num_nodes()).map(|r| r / self.n).collect()
    }
}

/// A minibatch of simulations in the row layout the models consume.
#[derive(Debug, Clone)]
pub struct Batch {
    pub systems: usize,
    pub n: usize,
    pub d: usize,
    /// `states[t]` is `[S·N, 2d]`: positions then velocities.
    pub states: Vec<Mat>,
    /// `[S·N]`
    pub charges: Rc<[f64]>,
    /// Groundtruth external field of each system (oracles and field metrics).
    pub fields: Vec<ExternalField>,
    /// Source positions `[M, d]` and strengths of each system.
    pub sources: Vec<(Mat, Vec<f64>)>,
}

impl Batch {
    /// Simulations `indices` of `ds`, restricted to recorded steps `steps`.
    pub fn from_dataset(ds: &Dataset, indices: &[usize], steps: Range<usize>) -> Result<Self> {
        let (s_all, t_all, n, d) = ds.positions.dim();
        if steps.end > t_all || steps.is_empty() {
            return Err(Error::InvalidInput(format!(
                "steps {steps:?} outside the {t_all} recorded"
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= s_all) {
            return Err(Error::InvalidInput(format!("simulation {bad} out of range")));
        }
        let systems = indices.len();
        let mut states = Vec::with_capacity(steps.len());
        for t in steps {
            let mut m = Mat::zeros((systems * n, 2 * d));
            for (b, &s) in indices.iter().enumerate() {
                for i in 0..n {
                    for k in 0..d {
                        m[[b * n + i, k]] = ds.positions[[s, t, i, k]] as f64;
                        m[[b * n + i, d + k]] = ds.velocities[[s, t, i, k]] as f64;
                    }
                }
            }
            states.push(m);
        }
        let charges = indices
            .iter()
            .flat_map(|&s| ds.strengths.row(s).iter().map(|&q| q as f64).collect::<Vec<_>>())
            .collect();
        let mut fields = Vec::with_capacity(systems);
        let mut sources = Vec::with_capacity(systems);
        for &s in indices {
            let sp: Array2<f64> = ds.source_positions.index_axis(Axis(0), s).mapv(|x| x as f64);
            let ss: Vec<f64> = ds.source_strengths.row(s).iter().map(|&x| x as f64).collect();
            fields.push(ExternalField::from_config(&ds.header.config, &sp, &ss));
            sources.push((sp, ss));
        }
        Ok(Self {
            systems,
            n,
            d,
            states,
            charges,
            fields,
            sources,
        })
    }

    pub fn steps(&self) -> usize {
        self.states.len()
    }

    pub fn topology(&self) -> Topology {
        Topology::fully_connected(self.systems, self.n)
    }

    /// The same systems over a sub-range of steps.
    pub fn window(&self, steps: Range<usize>) -> Self {
        Self {
            states: self.states[steps].to_vec(),
            ..self.clone()
        }
    }

    /// The same systems with replaced states.
    pub fn with_states(&self, states: Vec<Mat>) -> Self {
        Self {
            states,
            ..self.clone()
        }
    }

    /// Groundtruth external forces on every row of `state`: `[S·N, 2d]`, or
    /// several such blocks stacked.
    pub fn true_forces(&self, state: &Mat) -> Result<Mat> {
        let (d, nodes) = (self.d, self.systems * self.n);
        if state.ncols() != 2 * d || state.nrows() % nodes != 0 {
            return Err(Error::Shape(format!("states {:?} for this batch", state.dim())));
        }
        let mut out = Mat::zeros((state.nrows(), d));
        for r in 0..state.nrows() {
            let row = state.row(r);
            let (p, u) = (row.slice(ndarray::s![..d]).to_vec(), row.slice(ndarray::s![d..]).to_vec());
            let f = static_field_force(&p, &u, self.charges[r % nodes], &self.fields[(r % nodes) / self.n])?;
            for k in 0..d {
                out[[r, k]] = f[k];
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_nodes_give_two_directed_edges() {
        let t = Topology::fully_connected(1, 2);
        assert_eq!(&*t.senders, &[1, 0]);
        assert_eq!(&*t.receivers, &[0, 1]);
    }

    #[test]
    fn stacking_offsets_node_indices() {
        let t = Topology::fully_connected(2, 3).stacked(2);
        assert_eq!(t.num_nodes(), 12);
        assert_eq!(t.num_edges(), 24);
        assert_eq!(t.receivers[18], 9);
        assert!(t.senders.iter().zip(t.receivers.iter()).all(|(s, r)| s / 3 == r / 3 && s != r));
    }
}
