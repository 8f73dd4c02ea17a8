//! Camera poses, trajectory normalisation and the pose features fed to attention.
//!
//! Extrinsics are camera-to-world throughout. `vec(R)` is row-major.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Mat3 = [[f64; 3]; 3];
pub type Vec3 = [f64; 3];

pub const DESCRIPTOR_LEN: usize = 14;
pub const EMBEDDING_LEN: usize = 12;

/// Weight on the geodesic rotation angle (radians) in [`pose_distance`].
pub const ROTATION_WEIGHT: f64 = 1.0;

const ORTHO_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub rotation: Mat3,
    pub translation: Vec3,
    pub fx: f64,
    pub fy: f64,
    /// Image width the focal lengths are expressed against; 1 once normalised.
    pub width: f64,
}

impl Default for CameraPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl CameraPose {
    pub fn identity() -> Self {
        Self {
            rotation: IDENTITY,
            translation: [0.0; 3],
            fx: 1.0,
            fy: 1.0,
            width: 1.0,
        }
    }

    pub fn new(rotation: Mat3, translation: Vec3, fx: f64, fy: f64) -> Self {
        Self {
            rotation,
            translation,
            fx,
            fy,
            width: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let rtr = mat_mul(&transpose(r), r);
        for (i, row) in rtr.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                let want = if i == j { 1.0 } else { 0.0 };
                if !v.is_finite() || (v - want).abs() > ORTHO_TOL {
                    return Err(Error::InvalidPose(format!(
                        "rotation is not orthonormal (R^T R[{i}][{j}] = {v})"
                    )));
                }
            }
        }
        let det = det3(r);
        if (det - 1.0).abs() > ORTHO_TOL {
            return Err(Error::InvalidPose(format!("rotation determinant {det}")));
        }
        if !(self.fx > 0.0 && self.fy > 0.0 && self.width > 0.0) {
            return Err(Error::InvalidPose(format!(
                "focal lengths and width must be positive (fx={}, fy={}, width={})",
                self.fx, self.fy, self.width
            )));
        }
        if self.translation.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidPose("non-finite translation".into()));
        }
        Ok(())
    }
}

pub fn validate_pose(p: &CameraPose) -> Result<()> {
    p.validate()
}

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn rot_z(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

pub fn rot_y(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

pub fn transpose(a: &Mat3) -> Mat3 {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = a[j][i];
        }
    }
    t
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn mat_vec(a: &Mat3, v: &Vec3) -> Vec3 {
    let mut out = [0.0; 3];
    for i in 0..3 {
        out[i] = (0..3).map(|k| a[i][k] * v[k]).sum();
    }
    out
}

fn det3(a: &Mat3) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

fn norm3(v: &Vec3) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Re-expresses a clip relative to its first frame, scales translations so the
/// largest norm is 1 and divides intrinsics by image width.
pub fn normalize_trajectory(poses: &[CameraPose]) -> Result<Vec<CameraPose>> {
    let Some(first) = poses.first() else {
        return Err(Error::InvalidArgument("empty trajectory".into()));
    };
    for p in poses {
        p.validate()?;
    }
    let r0t = transpose(&first.rotation);
    let t0 = first.translation;
    let mut out: Vec<CameraPose> = poses
        .iter()
        .map(|p| {
            let dt = [
                p.translation[0] - t0[0],
                p.translation[1] - t0[1],
                p.translation[2] - t0[2],
            ];
            CameraPose {
                rotation: mat_mul(&r0t, &p.rotation),
                translation: mat_vec(&r0t, &dt),
                fx: p.fx / p.width,
                fy: p.fy / p.width,
                width: 1.0,
            }
        })
        .collect();
    let max_norm = out
        .iter()
        .map(|p| norm3(&p.translation))
        .fold(0.0, f64::max);
    if max_norm > 0.0 {
        for p in &mut out {
            for t in &mut p.translation {
                *t /= max_norm;
            }
        }
    }
    // The first frame is the origin by construction; pin it exactly.
    out[0].rotation = IDENTITY;
    out[0].translation = [0.0; 3];
    Ok(out)
}

/// `[vec(R) row-major, t, log fx, log fy]` for one frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseDescriptor(pub [f64; DESCRIPTOR_LEN]);

impl PoseDescriptor {
    pub fn rotation(&self) -> Mat3 {
        let d = &self.0;
        [[d[0], d[1], d[2]], [d[3], d[4], d[5]], [d[6], d[7], d[8]]]
    }

    pub fn translation(&self) -> Vec3 {
        [self.0[9], self.0[10], self.0[11]]
    }

    /// Rotation and translation part, used as the 6-DoF camera embedding.
    pub fn embedding(&self) -> SixDofEmbedding {
        let mut e = [0.0; EMBEDDING_LEN];
        e.copy_from_slice(&self.0[..EMBEDDING_LEN]);
        SixDofEmbedding(e)
    }
}

pub fn pose_descriptor(p: &CameraPose) -> Result<PoseDescriptor> {
    p.validate()?;
    let mut d = [0.0; DESCRIPTOR_LEN];
    for i in 0..3 {
        for j in 0..3 {
            d[i * 3 + j] = p.rotation[i][j];
        }
    }
    d[9..12].copy_from_slice(&p.translation);
    d[12] = (p.fx / p.width).ln();
    d[13] = (p.fy / p.width).ln();
    Ok(PoseDescriptor(d))
}

/// Normalised rotation (`vec(R)`) and translation of a camera.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SixDofEmbedding(pub [f64; EMBEDDING_LEN]);

impl SixDofEmbedding {
    pub fn rest() -> Self {
        let mut e = [0.0; EMBEDDING_LEN];
        e[0] = 1.0;
        e[4] = 1.0;
        e[8] = 1.0;
        Self(e)
    }
}

pub fn six_dof_embedding(p: &CameraPose) -> Result<SixDofEmbedding> {
    Ok(pose_descriptor(p)?.embedding())
}

/// Angle of the relative rotation `R_a^T R_b`, in radians.
pub fn geodesic_angle(a: &Mat3, b: &Mat3) -> f64 {
    let rel = mat_mul(&transpose(a), b);
    let tr = rel[0][0] + rel[1][1] + rel[2][2];
    ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

pub fn pose_distance(a: &CameraPose, b: &CameraPose) -> f64 {
    let dt = [
        a.translation[0] - b.translation[0],
        a.translation[1] - b.translation[1],
        a.translation[2] - b.translation[2],
    ];
    norm3(&dt) + ROTATION_WEIGHT * geodesic_angle(&a.rotation, &b.rotation)
}

/// Index `>= exclude_prefix` of the pose closest to `reference`; ties go to
/// the smallest index.
pub fn nearest_pose_index(
    traj: &[CameraPose],
    reference: &CameraPose,
    exclude_prefix: usize,
) -> Result<usize> {
    if exclude_prefix >= traj.len() {
        return Err(Error::InvalidArgument(format!(
            "no poses to search: prefix {exclude_prefix} excludes all {} frames",
            traj.len()
        )));
    }
    let mut best = exclude_prefix;
    let mut best_d = f64::INFINITY;
    for (i, p) in traj.iter().enumerate().skip(exclude_prefix) {
        let d = pose_distance(p, reference);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    Ok(best)
}
