//! Local coordinate frames for objects in 2 or 3 dimensions.
//!
//! Every object carries a frame translated to its position and rotated to its
//! orientation. Orientations are proxied by velocity directions; quantities
//! expressed in such a frame are invariant to global roto-translations.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Speed below which a velocity is treated as carrying no direction.
pub const DEGENERATE_SPEED: f64 = 1e-8;

/// Wraps an angle to `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a % (2.0 * PI);
    if w <= -PI {
        w += 2.0 * PI;
    } else if w > PI {
        w -= 2.0 * PI;
    }
    w
}

/// Angular position: a heading in 2D, yaw/pitch/roll in 3D (radians).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Orientation {
    Planar(f64),
    Spatial { yaw: f64, pitch: f64, roll: f64 },
}

impl Orientation {
    pub fn identity(d: usize) -> Self {
        match d {
            2 => Orientation::Planar(0.0),
            _ => Orientation::Spatial {
                yaw: 0.0,
                pitch: 0.0,
                roll: 0.0,
            },
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Orientation::Planar(_) => 2,
            Orientation::Spatial { .. } => 3,
        }
    }

    pub fn angles(&self) -> Vec<f64> {
        match *self {
            Orientation::Planar(t) => vec![t],
            Orientation::Spatial { yaw, pitch, roll } => vec![yaw, pitch, roll],
        }
    }

    /// Canonicalised copy with every angle in `(-π, π]`.
    pub fn wrapped(&self) -> Self {
        match *self {
            Orientation::Planar(t) => Orientation::Planar(wrap_angle(t)),
            Orientation::Spatial { yaw, pitch, roll } => Orientation::Spatial {
                yaw: wrap_angle(yaw),
                pitch: wrap_angle(pitch),
                roll: wrap_angle(roll),
            },
        }
    }

    /// `[cos ω; sin ω]`, one pair of blocks over all angles.
    pub fn unit_vectors(&self) -> Vec<f64> {
        let a = self.angles();
        a.iter().map(|v| v.cos()).chain(a.iter().map(|v| v.sin())).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.angles().iter().all(|a| a.is_finite())
    }
}

/// Number of features produced by [`Orientation::unit_vectors`].
pub fn orientation_feature_dim(d: usize) -> usize {
    if d == 2 {
        2
    } else {
        6
    }
}

/// Orthonormal `d x d` matrix stored in the leading corner of a 3x3 block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation {
    d: usize,
    m: [f64; 9],
}

fn mat3_mul(a: &[f64; 9], b: &[f64; 9]) -> [f64; 9] {
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[r * 3 + c] = (0..3).map(|k| a[r * 3 + k] * b[k * 3 + c]).sum();
        }
    }
    out
}

fn rot_z(a: f64) -> [f64; 9] {
    let (s, c) = a.sin_cos();
    [c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0]
}

fn rot_y(a: f64) -> [f64; 9] {
    let (s, c) = a.sin_cos();
    [c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c]
}

fn rot_x(a: f64) -> [f64; 9] {
    let (s, c) = a.sin_cos();
    [1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c]
}

impl Rotation {
    pub fn identity(d: usize) -> Self {
        Self {
            d,
            m: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        }
    }

    /// Builds from a row-major `d x d` slice.
    pub fn from_rows(d: usize, rows: &[f64]) -> Self {
        assert_eq!(rows.len(), d * d);
        let mut m = Self::identity(d).m;
        for r in 0..d {
            for c in 0..d {
                m[r * 3 + c] = rows[r * d + c];
            }
        }
        Self { d, m }
    }

    /// Inverse of [`Rotation::raw`].
    pub fn from_raw(d: usize, m: [f64; 9]) -> Self {
        Self { d, m }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.m[r * 3 + c]
    }

    /// 3x3 row-major block (identity-padded in 2D).
    pub fn raw(&self) -> [f64; 9] {
        self.m
    }

    pub fn transpose(&self) -> Self {
        let m = &self.m;
        Self {
            d: self.d,
            m: [m[0], m[3], m[6], m[1], m[4], m[7], m[2], m[5], m[8]],
        }
    }

    pub fn compose(&self, other: &Rotation) -> Self {
        Self {
            d: self.d,
            m: mat3_mul(&self.m, &other.m),
        }
    }

    pub fn apply(&self, v: &[f64]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for r in 0..self.d {
            out[r] = (0..self.d).map(|c| self.m[r * 3 + c] * v[c]).sum();
        }
        out
    }

    pub fn apply_transpose(&self, v: &[f64]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for r in 0..self.d {
            out[r] = (0..self.d).map(|c| self.m[c * 3 + r] * v[c]).sum();
        }
        out
    }

    pub fn det(&self) -> f64 {
        let m = &self.m;
        if self.d == 2 {
            m[0] * m[4] - m[1] * m[3]
        } else {
            m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
                + m[2] * (m[3] * m[7] - m[4] * m[6])
        }
    }

    /// Largest deviation of `QᵀQ` from the identity.
    pub fn orthogonality_error(&self) -> f64 {
        let qtq = self.transpose().compose(self);
        let mut err: f64 = 0.0;
        for r in 0..self.d {
            for c in 0..self.d {
                let target = if r == c { 1.0 } else { 0.0 };
                err = err.max((qtq.m[r * 3 + c] - target).abs());
            }
        }
        err
    }

    /// Orientation whose matrix is this rotation (inverse of
    /// [`rotation_from_orientation`]).
    pub fn orientation(&self) -> Orientation {
        let m = &self.m;
        if self.d == 2 {
            return Orientation::Planar(m[3].atan2(m[0]));
        }
        // M = Rz(yaw) Ry(-pitch) Rx(roll); first column is the heading,
        // last row is (sin p, cos p sin r, cos p cos r).
        let pitch = m[6].atan2(m[0].hypot(m[3]));
        let cp = m[0].hypot(m[3]);
        let (yaw, roll) = if cp > 1e-12 {
            (m[3].atan2(m[0]), m[7].atan2(m[8]))
        } else {
            // gimbal lock: fold everything into yaw
            ((-m[1]).atan2(m[4]), 0.0)
        };
        Orientation::Spatial { yaw, pitch, roll }
    }
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{what} contains non-finite values")))
    }
}

/// Heading of a velocity vector; identity when the speed is below `eps`.
/// In 3D the roll is zero (a single vector fixes only two angles).
pub fn orientation_from_velocity(u: &[f64], eps: f64) -> Result<Orientation> {
    check_finite(u, "velocity")?;
    if eps <= 0.0 {
        return Err(Error::InvalidInput("eps must be positive".into()));
    }
    let d = u.len();
    if d != 2 && d != 3 {
        return Err(Error::InvalidInput(format!("unsupported dimension {d}")));
    }
    let speed = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    if speed < eps {
        return Ok(Orientation::identity(d));
    }
    Ok(if d == 2 {
        Orientation::Planar(u[1].atan2(u[0]))
    } else {
        Orientation::Spatial {
            yaw: u[1].atan2(u[0]),
            pitch: u[2].atan2(u[0].hypot(u[1])),
            roll: 0.0,
        }
    })
}

/// Like [`orientation_from_velocity`], but in 3D the roll is chosen so the
/// frame's second axis points along the part of `reference` orthogonal to the
/// velocity. Since both vectors rotate with the system, the resulting frame
/// rotates with it too. Falls back to zero roll when `reference` is (nearly)
/// parallel to the velocity.
pub fn orientation_from_velocity_and_reference(
    u: &[f64],
    reference: &[f64],
    eps: f64,
) -> Result<Orientation> {
    let base = orientation_from_velocity(u, eps)?;
    let Orientation::Spatial { yaw, pitch, .. } = base else {
        return Ok(base);
    };
    check_finite(reference, "reference")?;
    let speed = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    if speed < eps {
        return Ok(base);
    }
    let q0 = rotation_from_orientation(&base);
    let local = q0.apply_transpose(reference);
    // components along the frame's second and third axes
    let (wy, wz) = (local[1], local[2]);
    if wy.hypot(wz) < eps {
        return Ok(base);
    }
    Ok(Orientation::Spatial {
        yaw,
        pitch,
        roll: wz.atan2(wy),
    })
}

/// `Q(ω)`: planar rotation, or `Rz(yaw) Ry(-pitch) Rx(roll)` in 3D.
pub fn rotation_from_orientation(omega: &Orientation) -> Rotation {
    match *omega {
        Orientation::Planar(t) => {
            let (s, c) = t.sin_cos();
            Rotation::from_rows(2, &[c, -s, s, c])
        }
        Orientation::Spatial { yaw, pitch, roll } => Rotation {
            d: 3,
            m: mat3_mul(&mat3_mul(&rot_z(yaw), &rot_y(-pitch)), &rot_x(roll)),
        },
    }
}

/// Position, orientation and velocity of one object.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentedState {
    pub p: [f64; 3],
    pub omega: Orientation,
    pub u: [f64; 3],
}

impl AugmentedState {
    pub fn new(p: &[f64], omega: Orientation, u: &[f64]) -> Self {
        let mut ps = [0.0; 3];
        let mut us = [0.0; 3];
        ps[..p.len()].copy_from_slice(p);
        us[..u.len()].copy_from_slice(u);
        Self { p: ps, omega, u: us }
    }

    /// State whose orientation is derived from its own velocity.
    pub fn from_velocity(p: &[f64], u: &[f64]) -> Result<Self> {
        let omega = orientation_from_velocity(u, DEGENERATE_SPEED)?;
        Ok(Self::new(p, omega, u))
    }

    pub fn dim(&self) -> usize {
        self.omega.dim()
    }
}

/// State of one object expressed in another object's frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalState {
    pub d: usize,
    pub r_rel: [f64; 3],
    pub omega_rel: Orientation,
    pub u_rel: [f64; 3],
    pub f_rel: Option<[f64; 3]>,
}

impl LocalState {
    /// `[r_rel, cos ω_rel, sin ω_rel, u_rel]`, plus `f_rel` when present.
    pub fn features(&self) -> Vec<f64> {
        let d = self.d;
        let mut out = Vec::with_capacity(local_feature_dim(d) + d);
        out.extend_from_slice(&self.r_rel[..d]);
        out.extend(self.omega_rel.unit_vectors());
        out.extend_from_slice(&self.u_rel[..d]);
        if let Some(f) = self.f_rel {
            out.extend_from_slice(&f[..d]);
        }
        out
    }
}

/// Width of [`LocalState::features`] without a force block.
pub fn local_feature_dim(d: usize) -> usize {
    2 * d + orientation_feature_dim(d)
}

/// Expresses `v_j` in the frame of `v_i`.
pub fn to_local_frame(v_j: &AugmentedState, v_i: &AugmentedState) -> Result<LocalState> {
    let d = v_i.dim();
    if v_j.dim() != d {
        return Err(Error::Shape("states of different dimension".into()));
    }
    let qi = rotation_from_orientation(&v_i.omega);
    let qj = rotation_from_orientation(&v_j.omega);
    let mut r = [0.0; 3];
    for k in 0..d {
        r[k] = v_j.p[k] - v_i.p[k];
    }
    let omega_rel = if d == 2 {
        let (Orientation::Planar(tj), Orientation::Planar(ti)) = (v_j.omega, v_i.omega) else {
            unreachable!()
        };
        Orientation::Planar(wrap_angle(tj - ti))
    } else {
        qi.transpose().compose(&qj).orientation()
    };
    Ok(LocalState {
        d,
        r_rel: qi.apply_transpose(&r[..d]),
        omega_rel,
        u_rel: qi.apply_transpose(&v_j.u[..d]),
        f_rel: None,
    })
}

/// Rotates a local `[displacement, velocity]` vector (length `2d`) back to
/// the global frame with `Q ⊕ Q`.
pub fn from_local_frame(delta: &[f64], omega_i: &Orientation) -> Result<Vec<f64>> {
    let d = omega_i.dim();
    if delta.len() != 2 * d {
        return Err(Error::Shape(format!(
            "expected a {}-vector, got {}",
            2 * d,
            delta.len()
        )));
    }
    let q = rotation_from_orientation(omega_i);
    let mut out = Vec::with_capacity(2 * d);
    out.extend_from_slice(&q.apply(&delta[..d])[..d]);
    out.extend_from_slice(&q.apply(&delta[d..])[..d]);
    Ok(out)
}

/// `Q(ω_i)ᵀ f`.
pub fn rotate_force_to_local(f: &[f64], omega_i: &Orientation) -> Result<Vec<f64>> {
    check_finite(f, "force")?;
    let d = omega_i.dim();
    if f.len() != d {
        return Err(Error::Shape("force and orientation dimensions differ".into()));
    }
    let q = rotation_from_orientation(omega_i);
    Ok(q.apply_transpose(f)[..d].to_vec())
}

/// Proper rigid motion `x ↦ R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidMotion {
    pub rotation: Rotation,
    pub translation: [f64; 3],
}

impl RigidMotion {
    pub fn dim(&self) -> usize {
        self.rotation.dim()
    }

    /// Uniformly random rotation (planar angle, or Haar measure via a unit
    /// quaternion) with the translation drawn from `[-scale, scale]^d`.
    pub fn random(d: usize, scale: f64, rng: &mut impl rand::Rng) -> Self {
        use rand_distr::{Distribution, StandardNormal};
        let rotation = if d == 2 {
            let a: f64 = rng.random_range(-PI..PI);
            rotation_from_orientation(&Orientation::Planar(a))
        } else {
            let mut q: [f64; 4] = [0.0; 4];
            for v in &mut q {
                *v = StandardNormal.sample(rng);
            }
            let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
            let [w, x, y, z] = q.map(|v| v / n);
            Rotation::from_rows(
                3,
                &[
                    1.0 - 2.0 * (y * y + z * z),
                    2.0 * (x * y - w * z),
                    2.0 * (x * z + w * y),
                    2.0 * (x * y + w * z),
                    1.0 - 2.0 * (x * x + z * z),
                    2.0 * (y * z - w * x),
                    2.0 * (x * z - w * y),
                    2.0 * (y * z + w * x),
                    1.0 - 2.0 * (x * x + y * y),
                ],
            )
        };
        let mut translation = [0.0; 3];
        for t in translation.iter_mut().take(d) {
            *t = rng.random_range(-scale..=scale);
        }
        Self {
            rotation,
            translation,
        }
    }

    pub fn apply_point(&self, p: &[f64]) -> [f64; 3] {
        let mut out = self.rotation.apply(p);
        for k in 0..self.dim() {
            out[k] += self.translation[k];
        }
        out
    }

    pub fn apply_vector(&self, v: &[f64]) -> [f64; 3] {
        self.rotation.apply(v)
    }

    /// Acts on a state: positions move, velocities rotate, and the frame
    /// composes with the rotation.
    pub fn apply_state(&self, v: &AugmentedState) -> AugmentedState {
        let d = self.dim();
        let q = self.rotation.compose(&rotation_from_orientation(&v.omega));
        AugmentedState::new(
            &self.apply_point(&v.p[..d])[..d],
            q.orientation(),
            &self.apply_vector(&v.u[..d])[..d],
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn velocity_headings() {
        assert_eq!(orientation_from_velocity(&[1.0, 0.0], 1e-8).unwrap(), Orientation::Planar(0.0));
        let Orientation::Planar(t) = orientation_from_velocity(&[0.0, 1.0], 1e-8).unwrap() else {
            panic!()
        };
        assert!((t - PI / 2.0).abs() < 1e-15);
        assert_eq!(
            orientation_from_velocity(&[0.0, 0.0], 1e-8).unwrap(),
            Orientation::identity(2)
        );
        assert!(orientation_from_velocity(&[f64::NAN, 0.0], 1e-8).is_err());
    }

    #[test]
    fn planar_rotations() {
        let q = rotation_from_orientation(&Orientation::Planar(0.0));
        assert_eq!(q, Rotation::identity(2));
        let q = rotation_from_orientation(&Orientation::Planar(PI / 2.0));
        let expected = [0.0, -1.0, 1.0, 0.0];
        let got = [q.at(0, 0), q.at(0, 1), q.at(1, 0), q.at(1, 1)];
        assert!(max_diff(&got, &expected) < 1e-15);
    }

    #[test]
    fn spatial_rotation_matches_elementary_rotations_of_basis() {
        // Oracle: rotate each basis vector by roll about x, then by -pitch
        // about y, then by yaw about z, using explicit 2D rotations in the
        // respective coordinate planes.
        fn rotate_plane(v: [f64; 3], a: f64, i: usize, j: usize) -> [f64; 3] {
            let (s, c) = a.sin_cos();
            let mut out = v;
            out[i] = c * v[i] - s * v[j];
            out[j] = s * v[i] + c * v[j];
            out
        }
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let (yaw, pitch, roll) = (
                rng.random_range(-PI..PI),
                rng.random_range(-1.5..1.5),
                rng.random_range(-PI..PI),
            );
            let q = rotation_from_orientation(&Orientation::Spatial { yaw, pitch, roll });
            for col in 0..3 {
                let mut e = [0.0; 3];
                e[col] = 1.0;
                let v = rotate_plane(e, roll, 1, 2);
                let v = rotate_plane(v, pitch, 0, 2); // Ry(-pitch) acts on (x, z) as +pitch
                let v = rotate_plane(v, yaw, 0, 1);
                let got = [q.at(0, col), q.at(1, col), q.at(2, col)];
                assert!(max_diff(&got, &v) < 1e-14);
            }
            assert!(q.orthogonality_error() < 1e-10);
            assert!((q.det() - 1.0).abs() < 1e-10);
            // angles round-trip through the matrix
            let back = rotation_from_orientation(&q.orientation());
            assert!(max_diff(&back.raw(), &q.raw()) < 1e-12);
        }
    }

    #[test]
    fn velocity_frame_x_axis_is_heading() {
        let u = [0.3, -0.4, 0.5];
        let q = rotation_from_orientation(&orientation_from_velocity(&u, 1e-8).unwrap());
        let n = (0.5f64).sqrt();
        let axis = [q.at(0, 0), q.at(1, 0), q.at(2, 0)];
        assert!(max_diff(&axis, &[0.3 / n, -0.4 / n, 0.5 / n]) < 1e-14);
    }

    #[test]
    fn identity_frame_and_translation_only() {
        let vi = AugmentedState::new(&[0.0, 0.0], Orientation::Planar(0.0), &[0.0, 0.0]);
        let vj = AugmentedState::new(&[1.5, -2.0], Orientation::Planar(0.7), &[0.2, 0.1]);
        let l = to_local_frame(&vj, &vi).unwrap();
        assert!(max_diff(&l.r_rel[..2], &[1.5, -2.0]) < 1e-15);
        assert!(max_diff(&l.u_rel[..2], &[0.2, 0.1]) < 1e-15);
        assert_eq!(l.omega_rel, Orientation::Planar(0.7));
        let vi = AugmentedState::new(&[0.5, 1.0], Orientation::Planar(0.0), &[9.0, 9.0]);
        let l = to_local_frame(&vj, &vi).unwrap();
        assert!(max_diff(&l.r_rel[..2], &[1.0, -3.0]) < 1e-15);
        assert!(max_diff(&l.u_rel[..2], &[0.2, 0.1]) < 1e-15);
    }

    fn random_state(d: usize, rng: &mut ChaCha8Rng) -> AugmentedState {
        let p: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let u: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let omega = match d {
            2 => Orientation::Planar(rng.random_range(-PI..PI)),
            _ => Orientation::Spatial {
                yaw: rng.random_range(-PI..PI),
                pitch: rng.random_range(-1.4..1.4),
                roll: rng.random_range(-PI..PI),
            },
        };
        AugmentedState::new(&p, omega, &u)
    }

    #[test]
    fn local_state_is_invariant_under_rigid_motions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for d in [2, 3] {
            for _ in 0..200 {
                let (vi, vj) = (random_state(d, &mut rng), random_state(d, &mut rng));
                let g = RigidMotion::random(d, 5.0, &mut rng);
                let a = to_local_frame(&vj, &vi).unwrap().features();
                let b = to_local_frame(&g.apply_state(&vj), &g.apply_state(&vi))
                    .unwrap()
                    .features();
                assert!(max_diff(&a, &b) < 1e-10, "d={d}: {a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn inverse_transform_round_trip_and_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for d in [2, 3] {
            for _ in 0..100 {
                let v = random_state(d, &mut rng);
                let delta: Vec<f64> = (0..2 * d).map(|_| rng.random_range(-2.0..2.0)).collect();
                // project into the frame then back
                let q = rotation_from_orientation(&v.omega);
                let mut local = q.apply_transpose(&delta[..d])[..d].to_vec();
                local.extend_from_slice(&q.apply_transpose(&delta[d..])[..d]);
                let back = from_local_frame(&local, &v.omega).unwrap();
                assert!(max_diff(&back, &delta) < 1e-12);
                // rotating the frame rotates the output
                let g = RigidMotion::random(d, 1.0, &mut rng);
                let rotated = from_local_frame(&delta, &g.apply_state(&v).omega).unwrap();
                let plain = from_local_frame(&delta, &v.omega).unwrap();
                let mut expected = g.apply_vector(&plain[..d])[..d].to_vec();
                expected.extend_from_slice(&g.apply_vector(&plain[d..])[..d]);
                assert!(max_diff(&rotated, &expected) < 1e-10);
            }
        }
        assert_eq!(
            from_local_frame(&[1.0, 2.0, 3.0, 4.0], &Orientation::Planar(0.0)).unwrap(),
            vec![1.0, 2.0, 3.0, 4.0]
        );
    }

    #[test]
    fn force_rotation() {
        let f = rotate_force_to_local(&[1.0, 0.0], &Orientation::Planar(PI / 2.0)).unwrap();
        assert!(max_diff(&f, &[0.0, -1.0]) < 1e-15);
        assert_eq!(rotate_force_to_local(&[0.3, 0.4], &Orientation::Planar(0.0)).unwrap(), vec![0.3, 0.4]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for d in [2, 3] {
            for _ in 0..100 {
                let v = random_state(d, &mut rng);
                let f: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                let g = RigidMotion::random(d, 0.0, &mut rng);
                let a = rotate_force_to_local(&f, &v.omega).unwrap();
                let b = rotate_force_to_local(&g.apply_vector(&f)[..d], &g.apply_state(&v).omega).unwrap();
                assert!(max_diff(&a, &b) < 1e-10);
            }
        }
    }

    #[test]
    fn referenced_frame_rotates_with_the_system() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let u: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let r: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let g = RigidMotion::random(3, 0.0, &mut rng);
            let q = rotation_from_orientation(&orientation_from_velocity_and_reference(&u, &r, 1e-8).unwrap());
            let q2 = rotation_from_orientation(
                &orientation_from_velocity_and_reference(&g.apply_vector(&u), &g.apply_vector(&r), 1e-8)
                    .unwrap(),
            );
            let expected = g.rotation.compose(&q);
            assert!(max_diff(&q2.raw(), &expected.raw()) < 1e-10);
        }
    }

    #[test]
    fn wrap_is_canonical() {
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-15);
    }
}
