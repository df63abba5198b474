//! Forward kinematics and its analytic gradient.

use super::rotation::{self, Mat3, Vec3};
use super::{exp_to_rotmat, exp_to_rotmat_jacobian, JointPositions, Pose, Skeleton};

/// World-space joint positions for `pose`. The root sits at the origin;
/// every other joint is its parent's position plus the parent's global
/// rotation applied to the joint's bone offset.
pub fn fk_forward(skeleton: &Skeleton, pose: &Pose) -> JointPositions {
    assert_eq!(
        pose.joints.len(),
        skeleton.n_joints(),
        "pose has {} joints, skeleton has {}",
        pose.joints.len(),
        skeleton.n_joints()
    );
    let n = skeleton.n_joints();
    let mut global = vec![rotation::mat_identity(); n];
    let mut points = vec![[0.0; 3]; n];
    for j in 0..n {
        let local = exp_to_rotmat(&pose.joints[j]);
        match skeleton.parent(j) {
            None => global[j] = local,
            Some(q) => {
                points[j] = add(&points[q], &rotation::mat_vec(&global[q], skeleton.offset(j)));
                global[j] = rotation::mat_mul(&global[q], &local);
            }
        }
    }
    JointPositions { points }
}

/// Gradient of a scalar loss with respect to the pose's exponential
/// coordinates, given its gradient with respect to every joint position.
///
/// Reverse accumulation over the hierarchy: adjoints of positions and
/// global rotations flow from each joint into its parent, and the adjoint
/// of each local rotation is contracted with dR/dv.
pub fn fk_backward(
    skeleton: &Skeleton,
    pose: &Pose,
    grad_positions: &JointPositions,
) -> Vec<Vec3> {
    let n = skeleton.n_joints();
    assert_eq!(pose.joints.len(), n);
    assert_eq!(grad_positions.points.len(), n);

    // Recompute the forward pass, keeping local and global rotations.
    let mut local = Vec::with_capacity(n);
    let mut global = vec![rotation::mat_identity(); n];
    for j in 0..n {
        let r = exp_to_rotmat(&pose.joints[j]);
        global[j] = match skeleton.parent(j) {
            None => r,
            Some(q) => rotation::mat_mul(&global[q], &r),
        };
        local.push(r);
    }

    let mut g_point: Vec<Vec3> = grad_positions.points.clone();
    let mut g_global: Vec<Mat3> = vec![[[0.0; 3]; 3]; n];
    let mut grad = vec![[0.0; 3]; n];

    for j in (0..n).rev() {
        let g_local = match skeleton.parent(j) {
            None => g_global[j],
            Some(q) => {
                // p_j = p_q + G_q o_j  and  G_j = G_q R_j.
                let (gp, off) = (g_point[j], skeleton.offset(j));
                for i in 0..3 {
                    g_point[q][i] += gp[i];
                    for k in 0..3 {
                        g_global[q][i][k] += gp[i] * off[k];
                    }
                }
                let rt = rotation::mat_transpose(&local[j]);
                let via_child = rotation::mat_mul(&g_global[j], &rt);
                for i in 0..3 {
                    for k in 0..3 {
                        g_global[q][i][k] += via_child[i][k];
                    }
                }
                rotation::mat_mul(&rotation::mat_transpose(&global[q]), &g_global[j])
            }
        };
        let jac = exp_to_rotmat_jacobian(&pose.joints[j]);
        for axis in 0..3 {
            let mut acc = 0.0;
            for i in 0..3 {
                for k in 0..3 {
                    acc += g_local[i][k] * jac[axis][i][k];
                }
            }
            grad[j][axis] = acc;
        }
    }
    grad
}

fn add(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}
