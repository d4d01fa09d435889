//! Particle simulators and the on-disk dataset format.
//!
//! Three settings are supported: charged particles around a fixed bank of
//! immovable charged sources shared by every simulation (a static field),
//! self-gravitating particles around one heavy source that is resampled per
//! simulation (a dynamic field), and charged particles in a uniform
//! electromagnetic field (a velocity-dependent external force).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::par::{self, Exec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    Electrostatic,
    Gravity2d,
    Gravity3d,
    Lorentz,
}

impl Setting {
    pub fn dim(self) -> usize {
        match self {
            Setting::Electrostatic | Setting::Gravity2d => 2,
            Setting::Gravity3d | Setting::Lorentz => 3,
        }
    }

    /// Observed steps fed to a model before it predicts.
    pub fn input_steps(self) -> usize {
        match self {
            Setting::Electrostatic => 29,
            Setting::Gravity2d | Setting::Gravity3d => 44,
            Setting::Lorentz => 1,
        }
    }

    /// True when one field is shared by every simulation.
    pub fn static_field(self) -> bool {
        matches!(self, Setting::Electrostatic | Setting::Lorentz)
    }

    pub fn name(self) -> &'static str {
        match self {
            Setting::Electrostatic => "electrostatic",
            Setting::Gravity2d => "gravity2d",
            Setting::Gravity3d => "gravity3d",
            Setting::Lorentz => "lorentz",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            Setting::Electrostatic,
            Setting::Gravity2d,
            Setting::Gravity3d,
            Setting::Lorentz,
        ]
        .into_iter()
        .find(|x| x.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    /// Global index of the first simulation of `split`.
    pub fn offset(&self, split: Split) -> usize {
        match split {
            Split::Train => 0,
            Split::Val => self.train,
            Split::Test => self.train + self.val,
        }
    }
}

/// Simulation parameters. Lengths and times are in simulation units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub setting: Setting,
    /// Observable particles.
    pub n: usize,
    /// Field sources.
    pub m: usize,
    /// Recorded steps.
    pub t: usize,
    pub dt_inner: f64,
    /// Integrator steps per record.
    pub subsample: usize,
    /// Interaction constant.
    pub c: f64,
    pub softening: f64,
    pub seed: u64,
    pub counts: SplitCounts,
    /// Multiplies the Coulomb law; `-1` makes like charges repel.
    pub sign_convention: f64,
    pub position_std: f64,
    pub speed: f64,
    /// Half-width of the box electrostatic sources are drawn from.
    pub source_extent: f64,
    /// Spread of the gravitational source position.
    pub source_std: f64,
    pub particle_mass: f64,
    pub source_mass: f64,
    /// Uniform electric field (Lorentz setting).
    pub e0: [f64; 3],
    /// Uniform magnetic field (Lorentz setting).
    pub b0: [f64; 3],
}

impl Default for SimConfig {
    fn default() -> Self {
        Self::for_setting(Setting::Electrostatic)
    }
}

impl SimConfig {
    pub fn for_setting(setting: Setting) -> Self {
        let base = SimConfig {
            setting,
            n: 5,
            m: 20,
            t: 49,
            dt_inner: 1e-3,
            subsample: 100,
            c: 1.0,
            softening: 0.1,
            seed: 0,
            counts: SplitCounts {
                train: 2000,
                val: 200,
                test: 200,
            },
            sign_convention: -1.0,
            position_std: 0.5,
            speed: 0.5,
            source_extent: 5.0,
            source_std: 1.0,
            particle_mass: 1.0,
            source_mass: 10.0,
            e0: [0.0; 3],
            b0: [0.0; 3],
        };
        match setting {
            Setting::Electrostatic => base,
            Setting::Gravity2d | Setting::Gravity3d => SimConfig { m: 1, ..base },
            Setting::Lorentz => SimConfig {
                n: 20,
                m: 0,
                t: 2,
                subsample: 500,
                position_std: 1.0,
                e0: [0.5, 0.0, 0.0],
                b0: [0.0, 0.0, 1.0],
                ..base
            },
        }
    }

    pub fn dim(&self) -> usize {
        self.setting.dim()
    }

    pub fn dt_record(&self) -> f64 {
        self.dt_inner * self.subsample as f64
    }

    pub fn law(&self) -> Law {
        match self.setting {
            Setting::Gravity2d | Setting::Gravity3d => Law::Gravity,
            _ => Law::Coulomb {
                sign: self.sign_convention,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n < 2 {
            return bad("n must be at least 2");
        }
        if self.t < 2 {
            return bad("t must be at least 2");
        }
        if !(self.dt_inner > 0.0 && self.dt_inner.is_finite()) {
            return bad("dt_inner must be positive");
        }
        if self.subsample < 1 {
            return bad("subsample must be at least 1");
        }
        if !(self.softening >= 0.0 && self.c.is_finite()) {
            return bad("softening must be non-negative and c finite");
        }
        if self.sign_convention.abs() != 1.0 {
            return bad("sign_convention must be +1 or -1");
        }
        if self.setting == Setting::Lorentz && self.m != 0 {
            return bad("the lorentz setting has no point sources (m = 0)");
        }
        Ok(())
    }
}

/// Pairwise interaction law between point objects.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Law {
    Coulomb { sign: f64 },
    Gravity,
}

impl Law {
    /// Force on `i` from `j`, given the strengths (charges or masses):
    /// `k p_{j,i} / (|p_{j,i}|² + ε²)^{3/2}`.
    pub fn pair_force(
        self,
        p_i: &[f64],
        p_j: &[f64],
        s_i: f64,
        s_j: f64,
        c: f64,
        softening: f64,
    ) -> Result<[f64; 3]> {
        let d = p_i.len();
        let mut diff = [0.0; 3];
        for k in 0..d {
            diff[k] = p_j[k] - p_i[k];
        }
        let r2: f64 = diff.iter().map(|x| x * x).sum();
        let denom = r2 + softening * softening;
        if denom == 0.0 {
            return Err(Error::Singularity(
                "coincident points without softening".into(),
            ));
        }
        if r2 == 0.0 {
            return Ok([0.0; 3]);
        }
        // Plummer kernel: smooth through r = 0, inverse-square for ε = 0
        let scale = match self {
            Law::Coulomb { sign } => sign * c * s_i * s_j,
            Law::Gravity => c * s_i * s_j,
        } / (denom * denom.sqrt());
        Ok(diff.map(|x| x * scale))
    }

    /// Pair potential with zero at infinity, consistent with
    /// [`Law::pair_force`].
    pub fn pair_potential(self, r: f64, s_i: f64, s_j: f64, c: f64, softening: f64) -> f64 {
        // attractive for k > 0
        let k = match self {
            Law::Coulomb { sign } => sign * c * s_i * s_j,
            Law::Gravity => c * s_i * s_j,
        };
        -k / (r * r + softening * softening).sqrt()
    }
}

pub fn coulomb_pairwise_force(
    p_i: &[f64],
    p_j: &[f64],
    q_i: f64,
    q_j: f64,
    c: f64,
    softening: f64,
    sign_convention: f64,
) -> Result<[f64; 3]> {
    Law::Coulomb {
        sign: sign_convention,
    }
    .pair_force(p_i, p_j, q_i, q_j, c, softening)
}

pub fn gravity_pairwise_force(
    p_i: &[f64],
    p_j: &[f64],
    m_i: f64,
    m_j: f64,
    c: f64,
    softening: f64,
) -> Result<[f64; 3]> {
    Law::Gravity.pair_force(p_i, p_j, m_i, m_j, c, softening)
}

/// Everything that acts on the particles but is not one of them.
#[derive(Debug, Clone, PartialEq)]
pub enum ExternalField {
    Sources {
        law: Law,
        positions: Vec<[f64; 3]>,
        strengths: Vec<f64>,
        c: f64,
        softening: f64,
        d: usize,
    },
    Uniform {
        e0: [f64; 3],
        b0: [f64; 3],
    },
}

impl ExternalField {
    pub fn none(d: usize) -> Self {
        ExternalField::Sources {
            law: Law::Gravity,
            positions: Vec::new(),
            strengths: Vec::new(),
            c: 1.0,
            softening: 0.0,
            d,
        }
    }

    /// Field of a configuration: the point sources, or the uniform
    /// electromagnetic field in the Lorentz setting.
    pub fn from_config(
        cfg: &SimConfig,
        source_positions: &Array2<f64>,
        source_strengths: &[f64],
    ) -> Self {
        if cfg.setting == Setting::Lorentz {
            return ExternalField::Uniform {
                e0: cfg.e0,
                b0: cfg.b0,
            };
        }
        let d = cfg.dim();
        ExternalField::Sources {
            law: cfg.law(),
            positions: source_positions
                .rows()
                .into_iter()
                .map(|r| {
                    let mut p = [0.0; 3];
                    p[..d].copy_from_slice(&r.to_vec());
                    p
                })
                .collect(),
            strengths: source_strengths.to_vec(),
            c: cfg.c,
            softening: cfg.softening,
            d,
        }
    }
}

fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Force the external field exerts on an object with state `(p, u)` and
/// strength `q`.
pub fn static_field_force(p: &[f64], u: &[f64], q: f64, field: &ExternalField) -> Result<[f64; 3]> {
    match field {
        ExternalField::Sources {
            law,
            positions,
            strengths,
            c,
            softening,
            d,
        } => {
            let mut f = [0.0; 3];
            for (sp, &ss) in positions.iter().zip(strengths) {
                let fi = law.pair_force(&p[..*d], &sp[..*d], q, ss, *c, *softening)?;
                for k in 0..3 {
                    f[k] += fi[k];
                }
            }
            Ok(f)
        }
        ExternalField::Uniform { e0, b0 } => {
            let mut uu = [0.0; 3];
            uu[..u.len()].copy_from_slice(u);
            let ub = cross(&uu, b0);
            Ok([0, 1, 2].map(|k| q * (e0[k] + ub[k])))
        }
    }
}

/// Field vectors on a set of query points.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundtruthField {
    pub queries: Array2<f64>,
    pub vectors: Array2<f64>,
}

/// Force on a unit positive test object at rest at each query.
pub fn groundtruth_field(queries: &Array2<f64>, field: &ExternalField) -> Result<GroundtruthField> {
    let d = queries.ncols();
    if queries.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite query".into()));
    }
    let mut vectors = Array2::zeros(queries.raw_dim());
    let zero = [0.0; 3];
    for (q, mut out) in queries.rows().into_iter().zip(vectors.rows_mut()) {
        let f = static_field_force(&q.to_vec(), &zero[..d], 1.0, field)?;
        for k in 0..d {
            out[k] = f[k];
        }
    }
    Ok(GroundtruthField {
        queries: queries.clone(),
        vectors,
    })
}

/// Recorded states of one simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemTrajectory {
    /// `[T, N, d]`
    pub positions: Array3<f64>,
    /// `[T, N, d]`
    pub velocities: Array3<f64>,
    /// Charges or masses, `[N]`.
    pub strengths: Vec<f64>,
    /// `[M, d]`
    pub source_positions: Array2<f64>,
    pub source_strengths: Vec<f64>,
    pub dt_record: f64,
}

impl SystemTrajectory {
    pub fn steps(&self) -> usize {
        self.positions.len_of(Axis(0))
    }

    pub fn num_objects(&self) -> usize {
        self.positions.len_of(Axis(1))
    }

    pub fn dim(&self) -> usize {
        self.positions.len_of(Axis(2))
    }
}

/// Positions, velocities and strengths at time zero, plus the sources.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialState {
    /// `[N, d]`
    pub positions: Array2<f64>,
    pub velocities: Array2<f64>,
    pub strengths: Vec<f64>,
    pub source_positions: Array2<f64>,
    pub source_strengths: Vec<f64>,
}

fn inertial_mass(cfg: &SimConfig, strength: f64) -> f64 {
    match cfg.law() {
        Law::Gravity => strength,
        Law::Coulomb { .. } => 1.0,
    }
}

fn accelerations(
    cfg: &SimConfig,
    field: &ExternalField,
    strengths: &[f64],
    p: &Array2<f64>,
    u: &Array2<f64>,
    out: &mut Array2<f64>,
) -> Result<()> {
    let (n, d) = p.dim();
    let law = cfg.law();
    out.fill(0.0);
    for i in 0..n {
        let pi = p.row(i);
        let pi = pi.as_slice().unwrap();
        for j in (i + 1)..n {
            let pj = p.row(j);
            let f = law.pair_force(
                pi,
                pj.as_slice().unwrap(),
                strengths[i],
                strengths[j],
                cfg.c,
                cfg.softening,
            )?;
            for k in 0..d {
                out[[i, k]] += f[k];
                out[[j, k]] -= f[k];
            }
        }
        let ui = u.row(i);
        let fe = static_field_force(pi, ui.as_slice().unwrap(), strengths[i], field)?;
        let inv = 1.0 / inertial_mass(cfg, strengths[i]);
        for k in 0..d {
            out[[i, k]] = (out[[i, k]] + fe[k]) * inv;
        }
    }
    Ok(())
}

/// Kick-drift-kick leapfrog from `init`, recording `cfg.t` states spaced
/// `cfg.subsample` inner steps apart (the first record is `init`).
pub fn leapfrog_rollout(cfg: &SimConfig, init: &InitialState) -> Result<SystemTrajectory> {
    cfg.validate()?;
    let (n, d) = init.positions.dim();
    if init.velocities.dim() != (n, d) || init.strengths.len() != n {
        return Err(Error::Shape("inconsistent initial state".into()));
    }
    let field = ExternalField::from_config(cfg, &init.source_positions, &init.source_strengths);
    let mut p = init.positions.clone();
    let mut u = init.velocities.clone();
    let mut a = Array2::zeros((n, d));
    let mut positions = Array3::zeros((cfg.t, n, d));
    let mut velocities = Array3::zeros((cfg.t, n, d));
    positions.index_axis_mut(Axis(0), 0).assign(&p);
    velocities.index_axis_mut(Axis(0), 0).assign(&u);
    let h = cfg.dt_inner;
    accelerations(cfg, &field, &init.strengths, &p, &u, &mut a)?;
    for rec in 1..cfg.t {
        for s in 0..cfg.subsample {
            u.scaled_add(0.5 * h, &a);
            p.scaled_add(h, &u);
            accelerations(cfg, &field, &init.strengths, &p, &u, &mut a)?;
            u.scaled_add(0.5 * h, &a);
            if !(p.iter().all(|v| v.is_finite()) && u.iter().all(|v| v.is_finite())) {
                return Err(Error::Divergence {
                    step: (rec - 1) * cfg.subsample + s + 1,
                    detail: "non-finite particle state".into(),
                });
            }
        }
        positions.index_axis_mut(Axis(0), rec).assign(&p);
        velocities.index_axis_mut(Axis(0), rec).assign(&u);
    }
    Ok(SystemTrajectory {
        positions,
        velocities,
        strengths: init.strengths.clone(),
        source_positions: init.source_positions.clone(),
        source_strengths: init.source_strengths.clone(),
        dt_record: cfg.dt_record(),
    })
}

/// Kinetic plus pairwise potential energy among the particles (sources
/// included as fixed partners).
pub fn total_energy(cfg: &SimConfig, p: &Array2<f64>, u: &Array2<f64>, init: &InitialState) -> f64 {
    let law = cfg.law();
    let n = p.nrows();
    let mut e = 0.0;
    for i in 0..n {
        let m = inertial_mass(cfg, init.strengths[i]);
        e += 0.5 * m * u.row(i).dot(&u.row(i));
        for j in (i + 1)..n {
            let r = (&p.row(i) - &p.row(j)).mapv(|x| x * x).sum().sqrt();
            e += law.pair_potential(r, init.strengths[i], init.strengths[j], cfg.c, cfg.softening);
        }
        for (sp, &ss) in init.source_positions.rows().into_iter().zip(&init.source_strengths) {
            let r = (&p.row(i) - &sp).mapv(|x| x * x).sum().sqrt();
            e += law.pair_potential(r, init.strengths[i], ss, cfg.c, cfg.softening);
        }
    }
    e
}

fn random_sign(rng: &mut impl Rng) -> f64 {
    if rng.random_bool(0.5) {
        1.0
    } else {
        -1.0
    }
}

/// Source bank shared by every electrostatic simulation of a dataset.
pub fn shared_sources(cfg: &SimConfig) -> (Array2<f64>, Vec<f64>) {
    let d = cfg.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let positions =
        Array2::from_shape_fn((cfg.m, d), |_| rng.random_range(-cfg.source_extent..=cfg.source_extent));
    let strengths = (0..cfg.m).map(|_| random_sign(&mut rng)).collect();
    (positions, strengths)
}

/// Samples the initial state of simulation `index` (global across splits).
pub fn sample_initial_state(
    cfg: &SimConfig,
    index: usize,
    shared: Option<&(Array2<f64>, Vec<f64>)>,
) -> InitialState {
    let (n, d) = (cfg.n, cfg.dim());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ index as u64);
    let strengths: Vec<f64> = match cfg.law() {
        Law::Gravity => vec![cfg.particle_mass; n],
        Law::Coulomb { .. } => (0..n).map(|_| random_sign(&mut rng)).collect(),
    };
    let pos_dist = Normal::new(0.0, cfg.position_std).expect("finite std");
    let positions = Array2::from_shape_fn((n, d), |_| pos_dist.sample(&mut rng));
    let mut velocities: Array2<f64> = Array2::from_shape_fn((n, d), |_| StandardNormal.sample(&mut rng));
    for mut row in velocities.rows_mut() {
        let norm = row.dot(&row).sqrt().max(f64::MIN_POSITIVE);
        row.mapv_inplace(|v| v * cfg.speed / norm);
    }
    let (source_positions, source_strengths) = match (cfg.setting, shared) {
        (Setting::Lorentz, _) => (Array2::zeros((0, d)), Vec::new()),
        (Setting::Electrostatic, Some(bank)) => bank.clone(),
        (Setting::Electrostatic, None) => shared_sources(cfg),
        _ => {
            let src = Normal::new(0.0, cfg.source_std).expect("finite std");
            (
                Array2::from_shape_fn((cfg.m, d), |_| src.sample(&mut rng)),
                vec![cfg.source_mass; cfg.m],
            )
        }
    };
    InitialState {
        positions,
        velocities,
        strengths,
        source_positions,
        source_strengths,
    }
}

/// Simulations of one split, stored in single precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    /// `[S, T, N, d]`
    pub positions: Array4<f32>,
    pub velocities: Array4<f32>,
    /// `[S, N]`
    pub strengths: Array2<f32>,
    /// `[S, M, d]`
    pub source_positions: Array3<f32>,
    /// `[S, M]`
    pub source_strengths: Array2<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArraySpec {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub setting: Setting,
    pub split: Split,
    pub seed: u64,
    pub dt_record: f64,
    pub splits: SplitCounts,
    pub arrays: Vec<ArraySpec>,
    pub config: SimConfig,
}

pub const DATASET_MAGIC: &[u8; 4] = b"AETH";
pub const DATASET_VERSION: u32 = 1;

const ARRAY_ORDER: [&str; 5] = [
    "positions",
    "velocities",
    "strengths",
    "source_positions",
    "source_strengths",
];

impl Dataset {
    pub fn len(&self) -> usize {
        self.positions.len_of(Axis(0))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.positions.len_of(Axis(3))
    }

    pub fn trajectory(&self, s: usize) -> SystemTrajectory {
        let f = |x: &f32| *x as f64;
        SystemTrajectory {
            positions: self.positions.index_axis(Axis(0), s).map(f),
            velocities: self.velocities.index_axis(Axis(0), s).map(f),
            strengths: self.strengths.row(s).iter().map(f).collect(),
            source_positions: self.source_positions.index_axis(Axis(0), s).map(f),
            source_strengths: self.source_strengths.row(s).iter().map(f).collect(),
            dt_record: self.header.dt_record,
        }
    }

    /// Field acting on simulation `s`.
    pub fn external_field(&self, s: usize) -> ExternalField {
        let sp = self.source_positions.index_axis(Axis(0), s).mapv(|x| x as f64);
        let ss: Vec<f64> = self.source_strengths.row(s).iter().map(|&x| x as f64).collect();
        ExternalField::from_config(&self.header.config, &sp, &ss)
    }

    fn array_specs(&self) -> Vec<ArraySpec> {
        let shapes = [
            self.positions.shape().to_vec(),
            self.velocities.shape().to_vec(),
            self.strengths.shape().to_vec(),
            self.source_positions.shape().to_vec(),
            self.source_strengths.shape().to_vec(),
        ];
        ARRAY_ORDER
            .iter()
            .zip(shapes)
            .map(|(n, shape)| ArraySpec {
                name: n.to_string(),
                dtype: "f32".into(),
                shape,
            })
            .collect()
    }

    fn from_trajectories(cfg: &SimConfig, split: Split, trajs: &[SystemTrajectory]) -> Self {
        let (s, t, n, d, m) = (trajs.len(), cfg.t, cfg.n, cfg.dim(), cfg.m);
        let mut ds = Dataset {
            header: DatasetHeader {
                setting: cfg.setting,
                split,
                seed: cfg.seed,
                dt_record: cfg.dt_record(),
                splits: cfg.counts,
                arrays: Vec::new(),
                config: cfg.clone(),
            },
            positions: Array4::zeros((s, t, n, d)),
            velocities: Array4::zeros((s, t, n, d)),
            strengths: Array2::zeros((s, n)),
            source_positions: Array3::zeros((s, m, d)),
            source_strengths: Array2::zeros((s, m)),
        };
        let f = |x: &f64| *x as f32;
        for (i, tr) in trajs.iter().enumerate() {
            ds.positions.index_axis_mut(Axis(0), i).assign(&tr.positions.map(f));
            ds.velocities.index_axis_mut(Axis(0), i).assign(&tr.velocities.map(f));
            for k in 0..n {
                ds.strengths[[i, k]] = tr.strengths[k] as f32;
            }
            ds.source_positions
                .index_axis_mut(Axis(0), i)
                .assign(&tr.source_positions.map(f));
            for k in 0..tr.source_strengths.len() {
                ds.source_strengths[[i, k]] = tr.source_strengths[k] as f32;
            }
        }
        ds.header.arrays = ds.array_specs();
        ds
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = self.header.clone();
        header.arrays = self.array_specs();
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + 4 * self.positions.len() * 2);
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut push = |it: &mut dyn Iterator<Item = &f32>| {
            for v in it {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        push(&mut self.positions.iter());
        push(&mut self.velocities.iter());
        push(&mut self.strengths.iter());
        push(&mut self.source_positions.iter());
        push(&mut self.source_strengths.iter());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: &str| Error::Format(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != DATASET_MAGIC {
            return Err(fmt("not a dataset file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != DATASET_VERSION {
            return Err(fmt(&format!("unsupported dataset version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| fmt("truncated header"))?;
        let header: DatasetHeader = serde_json::from_slice(body)?;
        let names: Vec<&str> = header.arrays.iter().map(|a| a.name.as_str()).collect();
        if names != ARRAY_ORDER || header.arrays.iter().any(|a| a.dtype != "f32") {
            return Err(fmt("unexpected array layout"));
        }
        let mut cursor = 16 + hlen;
        let mut take = |spec: &ArraySpec| -> Result<Vec<f32>> {
            let len: usize = spec.shape.iter().product();
            let raw = bytes
                .get(cursor..cursor + 4 * len)
                .ok_or_else(|| fmt(&format!("truncated array {}", spec.name)))?;
            cursor += 4 * len;
            Ok(raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let a = &header.arrays;
        let shape_err = |_| fmt("array shape mismatch");
        let s4 = |v: &[usize]| -> Result<[usize; 4]> { v.try_into().map_err(|_| fmt("rank mismatch")) };
        let s3 = |v: &[usize]| -> Result<[usize; 3]> { v.try_into().map_err(|_| fmt("rank mismatch")) };
        let s2 = |v: &[usize]| -> Result<[usize; 2]> { v.try_into().map_err(|_| fmt("rank mismatch")) };
        let positions = Array4::from_shape_vec(s4(&a[0].shape)?, take(&a[0])?).map_err(shape_err)?;
        let velocities = Array4::from_shape_vec(s4(&a[1].shape)?, take(&a[1])?).map_err(shape_err)?;
        let strengths = Array2::from_shape_vec(s2(&a[2].shape)?, take(&a[2])?).map_err(shape_err)?;
        let source_positions =
            Array3::from_shape_vec(s3(&a[3].shape)?, take(&a[3])?).map_err(shape_err)?;
        let source_strengths =
            Array2::from_shape_vec(s2(&a[4].shape)?, take(&a[4])?).map_err(shape_err)?;
        if cursor != bytes.len() {
            return Err(fmt("trailing bytes after arrays"));
        }
        Ok(Dataset {
            header,
            positions,
            velocities,
            strengths,
            source_positions,
            source_strengths,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.to_bytes()?)?;
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

/// Simulates every run of one split.
pub fn simulate_split(cfg: &SimConfig, split: Split, exec: Exec) -> Result<Dataset> {
    cfg.validate()?;
    let bank = (cfg.setting == Setting::Electrostatic).then(|| shared_sources(cfg));
    let offset = cfg.counts.offset(split);
    let trajs = par::map_indexed(exec, cfg.counts.get(split), |i| {
        let init = sample_initial_state(cfg, offset + i, bank.as_ref());
        leapfrog_rollout(cfg, &init)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::from_trajectories(cfg, split, &trajs))
}

/// Git-style content hash: SHA-256 over `"blob {len}\0"` followed by the
/// content.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFile {
    pub split: Split,
    pub path: String,
    pub num_sims: usize,
    pub hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestStats {
    /// Number of distinct source configurations across all splits.
    pub distinct_source_sets: usize,
    /// Mean over coordinates of the across-simulation standard deviation of
    /// the first source position.
    pub source_position_spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub setting: Setting,
    pub files: Vec<ManifestFile>,
    pub stats: ManifestStats,
    pub config: SimConfig,
}

impl Manifest {
    pub const FILE_NAME: &'static str = "manifest.json";

    pub fn read(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join(Self::FILE_NAME))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn path_of(&self, dir: &Path, split: Split) -> Option<PathBuf> {
        self.files
            .iter()
            .find(|f| f.split == split)
            .map(|f| dir.join(&f.path))
    }
}

fn source_stats(sets: &[&Dataset]) -> ManifestStats {
    let mut seen: Vec<Vec<u32>> = Vec::new();
    let mut firsts: Vec<Vec<f64>> = Vec::new();
    for ds in sets {
        for s in 0..ds.len() {
            let bits: Vec<u32> = ds
                .source_positions
                .index_axis(Axis(0), s)
                .iter()
                .map(|v| v.to_bits())
                .collect();
            if !seen.contains(&bits) {
                seen.push(bits);
            }
            if ds.source_positions.len_of(Axis(1)) > 0 {
                firsts.push(
                    ds.source_positions
                        .index_axis(Axis(0), s)
                        .row(0)
                        .iter()
                        .map(|v| *v as f64)
                        .collect(),
                );
            }
        }
    }
    let spread = if firsts.len() < 2 {
        0.0
    } else {
        let d = firsts[0].len();
        let k = firsts.len() as f64;
        (0..d)
            .map(|c| {
                let mean = firsts.iter().map(|f| f[c]).sum::<f64>() / k;
                (firsts.iter().map(|f| (f[c] - mean).powi(2)).sum::<f64>() / k).sqrt()
            })
            .sum::<f64>()
            / d as f64
    };
    ManifestStats {
        distinct_source_sets: seen.len(),
        source_position_spread: spread,
    }
}

/// Writes `train.aeth`, `val.aeth`, `test.aeth` and `manifest.json` into
/// `out_dir`.
pub fn generate_dataset(cfg: &SimConfig, out_dir: &Path, exec: Exec) -> Result<Manifest> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut files = Vec::new();
    let mut sets = Vec::new();
    for split in Split::ALL {
        let ds = simulate_split(cfg, split, exec)?;
        let bytes = ds.to_bytes()?;
        let name = format!("{}.aeth", split.name());
        std::fs::write(out_dir.join(&name), &bytes)?;
        files.push(ManifestFile {
            split,
            path: name,
            num_sims: ds.len(),
            hash: blob_hash(&bytes),
        });
        sets.push(ds);
    }
    let manifest = Manifest {
        seed: cfg.seed,
        setting: cfg.setting,
        files,
        stats: source_stats(&sets.iter().collect::<Vec<_>>()),
        config: cfg.clone(),
    };
    std::fs::write(
        out_dir.join(Manifest::FILE_NAME),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}
