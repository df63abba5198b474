//! Rotation algebra on exponential coordinates (axis times angle).

use super::ExpCoord;

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// Below this angle the closed-form Rodrigues coefficients are replaced by
/// their series expansions to avoid 0/0.
const SMALL_ANGLE: f64 = 1e-8;

/// Below this angle the derivative coefficient ratios a'(t)/t and b'(t)/t
/// are evaluated by series; the closed forms cancel catastrophically there.
const SMALL_ANGLE_DERIV: f64 = 1e-4;

/// Angles above this use the diagonal extraction in `rotmat_to_exp`, where
/// the skew part of the matrix becomes too small to define the axis.
const NEAR_PI: f64 = 3.0;

pub fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm(a: &Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn mat_identity() -> Mat3 {
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for k in 0..3 {
            let aik = a[i][k];
            for j in 0..3 {
                out[i][j] += aik * b[k][j];
            }
        }
    }
    out
}

pub fn mat_vec(m: &Mat3, v: &Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat_transpose(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
    }
    out
}

fn skew(v: &Vec3) -> Mat3 {
    [
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ]
}

/// Rodrigues coefficients: R = I + a(t) K + b(t) K^2 with K = skew(v),
/// t = |v|, a = sin t / t, b = (1 - cos t) / t^2.
fn rodrigues_coeffs(theta: f64, theta_sq: f64) -> (f64, f64) {
    if theta < SMALL_ANGLE {
        (1.0 - theta_sq / 6.0, 0.5 - theta_sq / 24.0)
    } else {
        // 1 - cos t = 2 sin^2(t/2) keeps b accurate for small t.
        let half = 0.5 * theta;
        let s = half.sin() / half;
        (theta.sin() / theta, 0.5 * s * s)
    }
}

/// Rotation matrix for an exponential-coordinate vector.
pub fn exp_to_rotmat(v: &ExpCoord) -> Mat3 {
    let v = &v.0;
    let theta_sq = dot(v, v);
    let theta = theta_sq.sqrt();
    let (a, b) = rodrigues_coeffs(theta, theta_sq);
    // R = (1 - b t^2) I + b v v^T + a K, and 1 - b t^2 = cos t.
    let diag = 1.0 - b * theta_sq;
    let k = skew(v);
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = b * v[i] * v[j] + a * k[i][j];
        }
        out[i][i] += diag;
    }
    out
}

/// Exponential coordinates of a rotation matrix. The returned angle is
/// canonical: |v| lies in [0, pi].
pub fn rotmat_to_exp(m: &Mat3) -> ExpCoord {
    // Skew part: vee((R - R^T)/2) = sin(t) * axis.
    let vee = [
        0.5 * (m[2][1] - m[1][2]),
        0.5 * (m[0][2] - m[2][0]),
        0.5 * (m[1][0] - m[0][1]),
    ];
    let s = norm(&vee);
    let c = 0.5 * (m[0][0] + m[1][1] + m[2][2] - 1.0);
    let theta = s.atan2(c.clamp(-1.0, 1.0));

    if theta < SMALL_ANGLE {
        // v = vee * t/sin t; the correction is O(t^2) and negligible here.
        return ExpCoord(vee);
    }
    if theta < NEAR_PI {
        let k = theta / s;
        return ExpCoord([vee[0] * k, vee[1] * k, vee[2] * k]);
    }

    // Near pi the skew part vanishes; recover the axis from the symmetric
    // part instead: R + R^T = 2 cos(t) I + 2 (1 - cos t) n n^T.
    let one_minus_c = 1.0 - c;
    let mut n = [0.0; 3];
    let mut pivot = 0;
    for i in 1..3 {
        if m[i][i] > m[pivot][pivot] {
            pivot = i;
        }
    }
    n[pivot] = (((m[pivot][pivot] - c) / one_minus_c).max(0.0)).sqrt();
    for j in 0..3 {
        if j != pivot {
            n[j] = (m[pivot][j] + m[j][pivot]) / (2.0 * one_minus_c * n[pivot]);
        }
    }
    let len = norm(&n);
    for x in &mut n {
        *x /= len;
    }
    // Orient along the skew part when it is non-zero; otherwise (t = pi,
    // where v and -v coincide) pick the sign deterministically.
    let d = dot(&n, &vee);
    let flip = if d.abs() > 1e-12 {
        d < 0.0
    } else {
        let lead = n.iter().find(|x| x.abs() > 1e-9).copied().unwrap_or(1.0);
        lead < 0.0
    };
    if flip {
        for x in &mut n {
            *x = -*x;
        }
    }
    ExpCoord([n[0] * theta, n[1] * theta, n[2] * theta])
}

/// Partial derivatives dR/dv_k, k = 0..3, of `exp_to_rotmat` at `v`.
///
/// With R = I + a K + b K^2, a = sin t / t, b = (1 - cos t)/t^2:
///   dR/dv_k = (a'/t) v_k K + (b'/t) v_k K^2 + a E_k + b (E_k K + K E_k)
/// where E_k = skew(e_k).
pub fn exp_to_rotmat_jacobian(v: &ExpCoord) -> [Mat3; 3] {
    let v = &v.0;
    let theta_sq = dot(v, v);
    let theta = theta_sq.sqrt();
    let (a, b) = rodrigues_coeffs(theta, theta_sq);
    // p = a'(t)/t, q = b'(t)/t.
    let (p, q) = if theta < SMALL_ANGLE_DERIV {
        (-1.0 / 3.0 + theta_sq / 30.0, -1.0 / 12.0 + theta_sq / 180.0)
    } else {
        let one_minus_cos = b * theta_sq;
        (
            (theta * theta.cos() - theta.sin()) / (theta_sq * theta),
            (theta * theta.sin() - 2.0 * one_minus_cos) / (theta_sq * theta_sq),
        )
    };

    let k = skew(v);
    let k2 = mat_mul(&k, &k);
    let mut out = [[[0.0; 3]; 3]; 3];
    for axis in 0..3 {
        let mut e = [0.0; 3];
        e[axis] = 1.0;
        let ek = skew(&e);
        let ekk = mat_mul(&ek, &k);
        let kek = mat_mul(&k, &ek);
        for i in 0..3 {
            for j in 0..3 {
                out[axis][i][j] = p * v[axis] * k[i][j]
                    + q * v[axis] * k2[i][j]
                    + a * ek[i][j]
                    + b * (ekk[i][j] + kek[i][j]);
            }
        }
    }
    out
}
