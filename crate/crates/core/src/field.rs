//! Neural fields mapping query states to latent forces.
//!
//! A field is a three-layer SiLU MLP over concatenated encodings of the query
//! (random Fourier features of the position, linear encodings of orientation
//! and velocity, an optional charge embedding). Static fields are
//! unconditional. Dynamic fields are conditioned on a latent code `z`, either
//! by FiLM after the first two layers or by concatenation to the input; `z`
//! comes from a spatio-temporal attention aggregator over the observed
//! trajectories.

use std::io::Write;
use std::path::Path;
use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::geometry::{orientation_feature_dim, Orientation};
use crate::nn::{Gru, Linear, Mlp, ParamId, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionEncoding {
    Rff,
    Raw,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VelocityEncoding {
    Linear,
    Raw,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Conditioning {
    None,
    Film,
    Concat,
}

/// Which query components feed the field and how wide each layer is.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldConfig {
    pub d: usize,
    pub position: PositionEncoding,
    /// Width of the Fourier encoding (`B` has half as many rows).
    pub rff_dim: usize,
    pub rff_sigma2: f64,
    pub orientation: bool,
    pub velocity: VelocityEncoding,
    /// Width of the linear orientation and velocity encodings.
    pub encoding_dim: usize,
    /// Width of the charge embedding; 0 disables it.
    pub charge_dim: usize,
    pub hidden: usize,
    pub conditioning: Conditioning,
    pub latent_dim: usize,
}

impl FieldConfig {
    /// Positions only, Fourier-encoded.
    pub fn positional(d: usize, width: usize) -> Self {
        Self {
            d,
            position: PositionEncoding::Rff,
            rff_dim: width,
            rff_sigma2: 1.0,
            orientation: false,
            velocity: VelocityEncoding::Off,
            encoding_dim: width,
            charge_dim: 0,
            hidden: width,
            conditioning: Conditioning::None,
            latent_dim: 0,
        }
    }

    /// Raw position and velocity plus a charge embedding.
    pub fn raw_with_charge(d: usize, hidden: usize, charge_dim: usize) -> Self {
        Self {
            d,
            position: PositionEncoding::Raw,
            rff_dim: 0,
            rff_sigma2: 1.0,
            orientation: false,
            velocity: VelocityEncoding::Raw,
            encoding_dim: 0,
            charge_dim,
            hidden,
            conditioning: Conditioning::None,
            latent_dim: 0,
        }
    }

    pub fn conditioned(mut self, mode: Conditioning, latent_dim: usize) -> Self {
        self.conditioning = mode;
        self.latent_dim = if mode == Conditioning::None { 0 } else { latent_dim };
        self
    }

    pub fn uses_velocity(&self) -> bool {
        self.velocity != VelocityEncoding::Off
    }

    pub fn uses_charge(&self) -> bool {
        self.charge_dim > 0
    }

    /// Width of the concatenated encodings (before any concatenated `z`).
    pub fn input_dim(&self) -> usize {
        let p = match self.position {
            PositionEncoding::Rff => self.rff_dim,
            PositionEncoding::Raw => self.d,
            PositionEncoding::Off => 0,
        };
        let o = if self.orientation { self.encoding_dim } else { 0 };
        let u = match self.velocity {
            VelocityEncoding::Linear => self.encoding_dim,
            VelocityEncoding::Raw => self.d,
            VelocityEncoding::Off => 0,
        };
        p + o + u + self.charge_dim
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.d != 2 && self.d != 3 {
            return bad("field dimension must be 2 or 3");
        }
        if self.position == PositionEncoding::Rff && (self.rff_dim < 2 || self.rff_dim % 2 != 0) {
            return bad("rff_dim must be a positive even number");
        }
        if self.input_dim() == 0 {
            return bad("field has no inputs");
        }
        if self.hidden == 0 {
            return bad("field hidden width must be positive");
        }
        if self.conditioning != Conditioning::None && self.latent_dim == 0 {
            return bad("conditional field needs latent_dim > 0");
        }
        Ok(())
    }
}

/// Fixed Gaussian random Fourier features. `b_t` holds `Bᵀ` (`[d, D_c/2]`)
/// and is never trained.
#[derive(Debug, Clone, Copy)]
pub struct RffEncoder {
    pub b_t: ParamId,
    pub dim: usize,
}

impl RffEncoder {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        d: usize,
        dim: usize,
        sigma2: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let normal = Normal::new(0.0, sigma2.sqrt()).expect("finite variance");
        let b = Mat::from_shape_fn((dim / 2, d), |_| normal.sample(rng));
        let b_t = ps.add(format!("{name}.b_t"), b.t().to_owned(), false);
        Self { b_t, dim }
    }

    /// `[cos 2πBp, sin 2πBp]` for each row of `p`.
    pub fn encode(&self, g: &Graph, p: Var) -> Var {
        let phase = g.scale(g.matmul(p, self.b_t.var()), 2.0 * std::f64::consts::PI);
        g.concat_cols(&[g.cos(phase), g.sin(phase)])
    }
}

/// Single-point Fourier encoding, evaluated directly from `B` (`[D_c/2, d]`).
pub fn rff_encode(p: &[f64], b: &Mat) -> Result<Vec<f64>> {
    if p.len() != b.ncols() {
        return Err(Error::Shape("position and B disagree on dimension".into()));
    }
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite position".into()));
    }
    let phase: Vec<f64> = b
        .rows()
        .into_iter()
        .map(|r| 2.0 * std::f64::consts::PI * r.iter().zip(p).map(|(x, y)| x * y).sum::<f64>())
        .collect();
    Ok(phase.iter().map(|v| v.cos()).chain(phase.iter().map(|v| v.sin())).collect())
}

/// `W_ω [cos ω; sin ω]`, with `W_ω` stored as `[|ω̂|, D_c]`.
pub fn encode_orientation(omega: &Orientation, w: &Mat) -> Result<Vec<f64>> {
    let hat = omega.unit_vectors();
    if hat.len() != w.nrows() {
        return Err(Error::Shape("orientation encoder width".into()));
    }
    Ok((0..w.ncols())
        .map(|c| hat.iter().enumerate().map(|(r, h)| h * w[[r, c]]).sum())
        .collect())
}

/// `W_u u`, with `W_u` stored as `[d, D_c]`.
pub fn encode_velocity(u: &[f64], w: &Mat) -> Result<Vec<f64>> {
    if u.len() != w.nrows() {
        return Err(Error::Shape("velocity encoder width".into()));
    }
    Ok((0..w.ncols())
        .map(|c| u.iter().enumerate().map(|(r, x)| x * w[[r, c]]).sum())
        .collect())
}

/// Sinusoidal encoding of a timestep: even slots `sin(t / 10000^{2i/D})`,
/// odd slots the matching cosine.
pub fn temporal_pe(t: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|k| {
            let i = k / 2;
            let angle = t as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            if k % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Scale and shift networks of one FiLM layer.
#[derive(Debug, Clone)]
pub struct FilmNets {
    pub alpha: Mlp,
    pub beta: Mlp,
}

impl FilmNets {
    /// Two-layer SiLU MLPs `D_z -> D_h -> D_h`; last layers start at zero so
    /// the modulation starts as the identity.
    pub fn new(ps: &mut ParamSet, name: &str, dz: usize, dh: usize, rng: &mut impl Rng) -> Self {
        let alpha = Mlp::new(ps, &format!("{name}.alpha"), &[dz, dh, dh], false, rng);
        let beta = Mlp::new(ps, &format!("{name}.beta"), &[dz, dh, dh], false, rng);
        alpha.last().zero(ps);
        beta.last().zero(ps);
        Self { alpha, beta }
    }
}

/// `(1 + α(z)) ⊙ h + β(z)`; `z` has one row per row of `h`.
pub fn film(g: &Graph, h: Var, z: Var, nets: &FilmNets) -> Result<Var> {
    let (hn, hd) = g.shape(h);
    let (zn, zd) = g.shape(z);
    if hn != zn || zd != nets.alpha.in_dim() || hd != nets.alpha.out_dim() {
        return Err(Error::Shape(format!(
            "film: h [{hn}, {hd}], z [{zn}, {zd}], nets {} -> {}",
            nets.alpha.in_dim(),
            nets.alpha.out_dim()
        )));
    }
    let a = nets.alpha.forward(g, z);
    let b = nets.beta.forward(g, z);
    Ok(g.add(g.add(h, g.mul(a, h)), b))
}

/// Query states, one row per query.
#[derive(Debug, Clone)]
pub struct FieldQuery {
    /// `[B, d]`
    pub p: Var,
    /// `[B, d]`
    pub u: Option<Var>,
    /// `[B, |ω̂|]` unit-vector orientation features.
    pub omega_hat: Option<Var>,
    pub charge: Option<Rc<[f64]>>,
}

impl FieldQuery {
    pub fn positions(p: Var) -> Self {
        Self {
            p,
            u: None,
            omega_hat: None,
            charge: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NeuralField {
    pub cfg: FieldConfig,
    pub rff: Option<RffEncoder>,
    pub w_omega: Option<Linear>,
    pub w_u: Option<Linear>,
    /// `[2, charge_dim]`: row 0 for negative charges, row 1 otherwise.
    pub charge_table: Option<ParamId>,
    pub layers: [Linear; 3],
    pub film: Option<[FilmNets; 2]>,
}

impl NeuralField {
    pub fn new(ps: &mut ParamSet, name: &str, cfg: FieldConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let rff = (cfg.position == PositionEncoding::Rff)
            .then(|| RffEncoder::new(ps, &format!("{name}.rff"), cfg.d, cfg.rff_dim, cfg.rff_sigma2, rng));
        let w_omega = cfg.orientation.then(|| {
            Linear::without_bias(
                ps,
                &format!("{name}.w_omega"),
                orientation_feature_dim(cfg.d),
                cfg.encoding_dim,
                rng,
            )
        });
        let w_u = (cfg.velocity == VelocityEncoding::Linear)
            .then(|| Linear::without_bias(ps, &format!("{name}.w_u"), cfg.d, cfg.encoding_dim, rng));
        let charge_table = cfg.uses_charge().then(|| {
            let normal = Normal::new(0.0, 1.0).unwrap();
            let table = Mat::from_shape_fn((2, cfg.charge_dim), |_| normal.sample(rng));
            ps.add(format!("{name}.charge"), table, true)
        });
        let concat_z = if cfg.conditioning == Conditioning::Concat {
            cfg.latent_dim
        } else {
            0
        };
        let h = cfg.hidden;
        let layers = [
            Linear::new(ps, &format!("{name}.l0"), cfg.input_dim() + concat_z, h, rng),
            Linear::new(ps, &format!("{name}.l1"), h, h, rng),
            Linear::new(ps, &format!("{name}.l2"), h, cfg.d, rng),
        ];
        let film = (cfg.conditioning == Conditioning::Film).then(|| {
            [
                FilmNets::new(ps, &format!("{name}.film0"), cfg.latent_dim, h, rng),
                FilmNets::new(ps, &format!("{name}.film1"), cfg.latent_dim, h, rng),
            ]
        });
        Ok(Self {
            cfg,
            rff,
            w_omega,
            w_u,
            charge_table,
            layers,
            film,
        })
    }

    pub fn is_conditional(&self) -> bool {
        self.cfg.conditioning != Conditioning::None
    }

    /// Concatenated input encodings.
    pub fn encode(&self, g: &Graph, q: &FieldQuery) -> Result<Var> {
        let mut parts = Vec::new();
        let rows = g.shape(q.p).0;
        match self.cfg.position {
            PositionEncoding::Rff => parts.push(self.rff.as_ref().unwrap().encode(g, q.p)),
            PositionEncoding::Raw => parts.push(q.p),
            PositionEncoding::Off => {}
        }
        if let Some(w) = &self.w_omega {
            let o = q
                .omega_hat
                .ok_or_else(|| Error::Config("field needs orientations".into()))?;
            parts.push(w.forward(g, o));
        }
        if self.cfg.uses_velocity() {
            let u = q
                .u
                .ok_or_else(|| Error::Config("field needs velocities".into()))?;
            parts.push(match &self.w_u {
                Some(w) => w.forward(g, u),
                None => u,
            });
        }
        if let Some(table) = self.charge_table {
            let q = q
                .charge
                .as_ref()
                .ok_or_else(|| Error::Config("field needs charges".into()))?;
            if q.len() != rows {
                return Err(Error::Shape("one charge per query expected".into()));
            }
            let onehot = Mat::from_shape_fn((rows, 2), |(r, c)| {
                let positive = q[r] >= 0.0;
                f64::from((c == 1) == positive)
            });
            parts.push(g.matmul(g.constant(onehot), table.var()));
        }
        Ok(g.concat_cols(&parts))
    }

    /// Forces at the queries, `[B, d]`. `z` is `[1, D_z]` (shared) or
    /// `[B, D_z]` (per query); it must be present exactly when the field is
    /// conditional.
    pub fn forward(&self, g: &Graph, q: &FieldQuery, z: Option<Var>) -> Result<Var> {
        let rows = g.shape(q.p).0;
        let z = match (self.is_conditional(), z) {
            (false, Some(_)) => {
                return Err(Error::Config("latent code given to an unconditional field".into()))
            }
            (true, None) => return Err(Error::Config("conditional field needs a latent code".into())),
            (false, None) => None,
            (true, Some(z)) => {
                let (zn, zd) = g.shape(z);
                if zd != self.cfg.latent_dim {
                    return Err(Error::Shape(format!("latent width {zd}, expected {}", self.cfg.latent_dim)));
                }
                Some(match zn {
                    n if n == rows => z,
                    1 => g.gather_rows(z, vec![0; rows].into()),
                    _ => return Err(Error::Shape("latent rows must be 1 or one per query".into())),
                })
            }
        };
        let mut x = self.encode(g, q)?;
        if self.cfg.conditioning == Conditioning::Concat {
            x = g.concat_cols(&[x, z.unwrap()]);
        }
        let mut h = self.layers[0].forward(g, x);
        if let Some(f) = &self.film {
            h = film(g, h, z.unwrap(), &f[0])?;
        }
        h = self.layers[1].forward(g, g.silu(h));
        if let Some(f) = &self.film {
            h = film(g, h, z.unwrap(), &f[1])?;
        }
        Ok(self.layers[2].forward(g, g.silu(h)))
    }

    /// Zeroes the output layer: the field predicts no force anywhere.
    pub fn zero_output(&self, ps: &mut ParamSet) {
        self.layers[2].zero(ps);
    }
}

/// Single-query convenience wrapper around [`NeuralField::forward`].
pub fn field_forward(
    ps: &ParamSet,
    field: &NeuralField,
    p: &[f64],
    u: Option<&[f64]>,
    omega: Option<&Orientation>,
    charge: Option<f64>,
    z: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let g = ps.graph();
    let q = FieldQuery {
        p: g.row(p),
        u: u.map(|u| g.row(u)),
        omega_hat: omega.map(|o| g.row(&o.unit_vectors())),
        charge: charge.map(|c| Rc::from(vec![c])),
    };
    let z = z.map(|z| g.row(z));
    let out = field.forward(&g, &q, z)?;
    let v = g.value(out).row(0).to_vec();
    Ok(v)
}

/// Spatio-temporal attention summarising a set of trajectories in one latent
/// vector per system.
#[derive(Debug, Clone)]
pub struct Aggregator {
    pub w_g: Linear,
    pub gru: Gru,
    pub f_a: Mlp,
    pub f_b: Mlp,
    pub d: usize,
    pub object_dim: usize,
    pub latent_dim: usize,
}

impl Aggregator {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        d: usize,
        object_dim: usize,
        latent_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let ds = object_dim + 2 * d;
        Self {
            w_g: Linear::without_bias(ps, &format!("{name}.w_g"), 2 * d, object_dim, rng),
            gru: Gru::new(ps, &format!("{name}.gru"), object_dim, object_dim, rng),
            f_a: Mlp::new(ps, &format!("{name}.f_a"), &[ds, latent_dim, 1], false, rng),
            f_b: Mlp::new(ps, &format!("{name}.f_b"), &[ds, latent_dim, latent_dim], false, rng),
            d,
            object_dim,
            latent_dim,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.object_dim + 2 * self.d
    }

    /// `states[t]` is `[S·N, 2d]` with rows grouped by system (`N` objects
    /// each); returns `z` as `[S, D_z]`. The softmax runs jointly over all
    /// objects and timesteps of a system.
    pub fn forward(&self, g: &Graph, states: &[Var], systems: usize) -> Result<Var> {
        let t_len = states.len();
        if t_len == 0 || systems == 0 {
            return Err(Error::Shape("aggregator needs at least one step and one system".into()));
        }
        let (rows, width) = g.shape(states[0]);
        if width != 2 * self.d || rows % systems != 0 || rows == 0 {
            return Err(Error::Shape(format!(
                "aggregator input [{rows}, {width}] for {systems} systems"
            )));
        }
        let n = rows / systems;
        let mut h = g.constant(Mat::zeros((rows, self.object_dim)));
        for &x in states {
            h = self.gru.step(g, self.w_g.forward(g, x), h);
        }
        let mut s_rows = Vec::with_capacity(t_len);
        for (t, &x) in states.iter().enumerate() {
            let pe = g.row(&temporal_pe(t, self.state_dim()));
            s_rows.push(g.add_row(g.concat_cols(&[x, h]), pe));
        }
        let s = g.concat_rows(&s_rows);
        let seg: Rc<[usize]> = (0..t_len * rows).map(|r| (r % rows) / n).collect();
        let w = g.segment_softmax(self.f_a.forward(g, s), seg.clone(), systems);
        let b = self.f_b.forward(g, s);
        Ok(g.scatter_add_rows(g.mul_col(b, w), seg, systems))
    }
}

/// Latent code of a single system from `trajectory[t]` = `[N, 2d]` states.
pub fn aggregate_latent(ps: &ParamSet, agg: &Aggregator, trajectory: &[Mat]) -> Result<Vec<f64>> {
    let g = ps.graph();
    let states: Vec<Var> = trajectory.iter().map(|m| g.constant(m.clone())).collect();
    let z = agg.forward(&g, &states, 1)?;
    let v = g.value(z).row(0).to_vec();
    Ok(v)
}

/// Writes `x,y[,z],fx,fy[,fz]` rows with nine significant digits.
pub fn write_field_csv(path: &Path, queries: &Array2<f64>, vectors: &Array2<f64>) -> Result<()> {
    let d = queries.ncols();
    if vectors.dim() != queries.dim() {
        return Err(Error::Shape("queries and vectors differ in shape".into()));
    }
    let names = ["x", "y", "z"];
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header: Vec<String> = names[..d]
        .iter()
        .map(|s| s.to_string())
        .chain(names[..d].iter().map(|s| format!("f{s}")))
        .collect();
    writeln!(out, "{}", header.join(","))?;
    for (q, v) in queries.rows().into_iter().zip(vectors.rows()) {
        let cells: Vec<String> = q.iter().chain(v.iter()).map(|x| format!("{x:.8e}")).collect();
        writeln!(out, "{}", cells.join(","))?;
    }
    out.flush()?;
    Ok(())
}

/// Parses a file written by [`write_field_csv`].
pub fn read_field_csv(path: &Path) -> Result<(Array2<f64>, Array2<f64>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Format("empty field csv".into()))?;
    let cols = header.split(',').count();
    if cols != 4 && cols != 6 {
        return Err(Error::Format(format!("unexpected field csv header {header}")));
    }
    let d = cols / 2;
    let mut q = Vec::new();
    let mut v = Vec::new();
    for line in lines {
        let vals: Vec<f64> = line
            .split(',')
            .map(|c| c.parse::<f64>().map_err(|e| Error::Format(e.to_string())))
            .collect::<Result<_>>()?;
        if vals.len() != cols {
            return Err(Error::Format("ragged field csv row".into()));
        }
        q.extend_from_slice(&vals[..d]);
        v.extend_from_slice(&vals[d..]);
    }
    let rows = q.len() / d;
    Ok((
        Array2::from_shape_vec((rows, d), q).unwrap(),
        Array2::from_shape_vec((rows, d), v).unwrap(),
    ))
}
