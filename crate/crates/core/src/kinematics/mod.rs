//! Skeleton description, poses in exponential coordinates, and forward
//! kinematics with an analytic backward pass.

mod fk;
pub mod rotation;

pub use fk::{fk_backward, fk_forward};
pub use rotation::{exp_to_rotmat, exp_to_rotmat_jacobian, rotmat_to_exp, Mat3, Vec3};

use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// One joint rotation as exponential coordinates: unit axis scaled by the
/// rotation angle in radians.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct ExpCoord(pub [f64; 3]);

impl ExpCoord {
    /// Equivalent coordinates with angle wrapped into [0, pi].
    pub fn canonicalize(&self) -> ExpCoord {
        let theta = rotation::norm(&self.0);
        if theta <= std::f64::consts::PI || theta == 0.0 {
            return *self;
        }
        let two_pi = 2.0 * std::f64::consts::PI;
        let mut wrapped = theta % two_pi;
        let mut flip = false;
        if wrapped > std::f64::consts::PI {
            wrapped = two_pi - wrapped;
            flip = true;
        }
        let mut scale = wrapped / theta;
        if flip {
            scale = -scale;
        }
        ExpCoord([self.0[0] * scale, self.0[1] * scale, self.0[2] * scale])
    }
}

/// Joint hierarchy with fixed bone offsets (meters, y-up, right-handed).
/// Joints are stored topologically: every joint's parent precedes it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SkeletonJson", into = "SkeletonJson")]
pub struct Skeleton {
    names: Vec<String>,
    parents: Vec<Option<usize>>,
    offsets: Vec<[f64; 3]>,
}

/// On-disk form: the root's parent is encoded as -1.
#[derive(Serialize, Deserialize)]
struct SkeletonJson {
    names: Vec<String>,
    parents: Vec<i64>,
    offsets: Vec<[f64; 3]>,
}

impl From<Skeleton> for SkeletonJson {
    fn from(s: Skeleton) -> Self {
        SkeletonJson {
            names: s.names,
            parents: s
                .parents
                .iter()
                .map(|p| p.map_or(-1, |q| q as i64))
                .collect(),
            offsets: s.offsets,
        }
    }
}

impl TryFrom<SkeletonJson> for Skeleton {
    type Error = Error;

    fn try_from(s: SkeletonJson) -> Result<Self> {
        let parents = s
            .parents
            .iter()
            .map(|&p| {
                if p < 0 {
                    Ok(None)
                } else {
                    Ok(Some(usize::try_from(p).map_err(|_| {
                        Error::InvalidData(format!("bad parent index {p}"))
                    })?))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Skeleton::new(s.names, parents, s.offsets)
    }
}

impl Skeleton {
    pub fn new(
        names: Vec<String>,
        parents: Vec<Option<usize>>,
        offsets: Vec<[f64; 3]>,
    ) -> Result<Skeleton> {
        let n = names.len();
        if n == 0 {
            return Err(Error::InvalidData("skeleton has no joints".into()));
        }
        if parents.len() != n || offsets.len() != n {
            return Err(Error::InvalidData(format!(
                "skeleton field lengths disagree: {} names, {} parents, {} offsets",
                n,
                parents.len(),
                offsets.len()
            )));
        }
        if parents[0].is_some() {
            return Err(Error::InvalidData("joint 0 must be the root".into()));
        }
        for (j, p) in parents.iter().enumerate().skip(1) {
            match p {
                None => {
                    return Err(Error::InvalidData(format!(
                        "joint {j} is a second root; only joint 0 may have no parent"
                    )))
                }
                Some(q) if *q >= j => {
                    return Err(Error::InvalidData(format!(
                        "joint {j} has parent {q}; parents must precede children"
                    )))
                }
                _ => {}
            }
        }
        Ok(Skeleton {
            names,
            parents,
            offsets,
        })
    }

    pub fn n_joints(&self) -> usize {
        self.names.len()
    }

    /// Flattened pose/position dimensionality: three values per joint.
    pub fn dim(&self) -> usize {
        3 * self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        self.parents[joint]
    }

    pub fn offset(&self, joint: usize) -> &[f64; 3] {
        &self.offsets[joint]
    }

    /// A single kinematic chain hanging in -y, handy for tests and
    /// synthetic data on small joint counts.
    pub fn chain(n_joints: usize, bone_length: f64) -> Skeleton {
        assert!(n_joints >= 1);
        let names = (0..n_joints).map(|i| format!("joint{i}")).collect();
        let parents = (0..n_joints)
            .map(|i| if i == 0 { None } else { Some(i - 1) })
            .collect();
        let offsets = (0..n_joints)
            .map(|i| if i == 0 { [0.0; 3] } else { [0.0, -bone_length, 0.0] })
            .collect();
        Skeleton::new(names, parents, offsets).expect("chain skeleton is valid")
    }

    /// 17-joint humanoid: hips, two 3-joint legs, 3-joint spine-to-head
    /// column and two 3-joint arms. Offsets are plausible adult proportions
    /// in meters.
    pub fn human17() -> Skeleton {
        let table: [(&str, i64, [f64; 3]); 17] = [
            ("Hips", -1, [0.0, 0.0, 0.0]),
            ("RightUpLeg", 0, [-0.13, 0.0, 0.0]),
            ("RightLeg", 1, [0.0, -0.44, 0.0]),
            ("RightFoot", 2, [0.0, -0.45, 0.0]),
            ("LeftUpLeg", 0, [0.13, 0.0, 0.0]),
            ("LeftLeg", 4, [0.0, -0.44, 0.0]),
            ("LeftFoot", 5, [0.0, -0.45, 0.0]),
            ("Spine", 0, [0.0, 0.12, 0.0]),
            ("Spine1", 7, [0.0, 0.25, 0.0]),
            ("Neck", 8, [0.0, 0.12, 0.0]),
            ("Head", 9, [0.0, 0.12, 0.0]),
            ("LeftArm", 8, [0.20, 0.05, 0.0]),
            ("LeftForeArm", 11, [0.28, 0.0, 0.0]),
            ("LeftHand", 12, [0.25, 0.0, 0.0]),
            ("RightArm", 8, [-0.20, 0.05, 0.0]),
            ("RightForeArm", 14, [-0.28, 0.0, 0.0]),
            ("RightHand", 15, [-0.25, 0.0, 0.0]),
        ];
        let names = table.iter().map(|(n, _, _)| n.to_string()).collect();
        let parents = table
            .iter()
            .map(|(_, p, _)| if *p < 0 { None } else { Some(*p as usize) })
            .collect();
        let offsets = table.iter().map(|(_, _, o)| *o).collect();
        Skeleton::new(names, parents, offsets).expect("humanoid skeleton is valid")
    }
}

/// Per-joint rotations for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Pose {
    pub joints: Vec<ExpCoord>,
}

impl Pose {
    pub fn identity(n_joints: usize) -> Pose {
        Pose {
            joints: vec![ExpCoord::default(); n_joints],
        }
    }

    /// Reads [v0x, v0y, v0z, v1x, ...]; the slice length must be 3 * joints.
    pub fn from_flat(flat: &[f64]) -> Pose {
        assert_eq!(flat.len() % 3, 0, "flat pose length must be divisible by 3");
        Pose {
            joints: flat
                .chunks_exact(3)
                .map(|c| ExpCoord([c[0], c[1], c[2]]))
                .collect(),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.joints.len() * 3);
        for j in &self.joints {
            out.extend_from_slice(&j.0);
        }
        out
    }
}

/// World-space joint positions for one frame, root pinned at the origin.
#[derive(Clone, Debug, PartialEq)]
pub struct JointPositions {
    pub points: Vec<[f64; 3]>,
}

impl JointPositions {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.points.len() * 3);
        for p in &self.points {
            out.extend_from_slice(p);
        }
        out
    }

    pub fn from_flat(flat: &[f64]) -> JointPositions {
        assert_eq!(flat.len() % 3, 0);
        JointPositions {
            points: flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        }
    }
}
