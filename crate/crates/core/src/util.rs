//! Small shared helpers: 3-D math, seeded RNG utilities, hashing, exact
//! float text round-trips and atomic file writes.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::Path;

pub type Vec3 = [f64; 3];
/// Row-major 3x3 matrix.
pub type Mat3 = [[f64; 3]; 3];
/// Unit quaternion as (w, x, y, z).
pub type Quat = [f64; 4];

pub const IDENTITY_MAT3: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
pub const IDENTITY_QUAT: Quat = [1.0, 0.0, 0.0, 0.0];

#[inline]
pub fn v_add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn v_sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn v_scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn v_dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn v_cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn v_norm(a: Vec3) -> f64 {
    v_dot(a, a).sqrt()
}

#[inline]
pub fn m_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

#[inline]
pub fn m_vec(a: &Mat3, v: Vec3) -> Vec3 {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

#[inline]
pub fn m_transpose(a: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

/// Solve `a * x = b` for a symmetric positive-definite 3x3 via the adjugate.
pub fn m_solve(a: &Mat3, b: Vec3) -> Vec3 {
    let det = a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
    let inv_det = 1.0 / det;
    let adj = [
        [
            a[1][1] * a[2][2] - a[1][2] * a[2][1],
            a[0][2] * a[2][1] - a[0][1] * a[2][2],
            a[0][1] * a[1][2] - a[0][2] * a[1][1],
        ],
        [
            a[1][2] * a[2][0] - a[1][0] * a[2][2],
            a[0][0] * a[2][2] - a[0][2] * a[2][0],
            a[0][2] * a[1][0] - a[0][0] * a[1][2],
        ],
        [
            a[1][0] * a[2][1] - a[1][1] * a[2][0],
            a[0][1] * a[2][0] - a[0][0] * a[2][1],
            a[0][0] * a[1][1] - a[0][1] * a[1][0],
        ],
    ];
    v_scale(m_vec(&adj, b), inv_det)
}

/// Rodrigues rotation about a unit axis.
pub fn axis_angle_mat(axis: Vec3, angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    let [x, y, z] = axis;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

#[inline]
pub fn q_mul(a: Quat, b: Quat) -> Quat {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

#[inline]
pub fn q_normalize(q: Quat) -> Quat {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

pub fn q_from_axis_angle(axis: Vec3, angle: f64) -> Quat {
    let half = 0.5 * angle;
    let s = half.sin();
    [half.cos(), axis[0] * s, axis[1] * s, axis[2] * s]
}

/// Quaternion for a world-frame angular velocity applied over `dt`.
pub fn q_integrate(q: Quat, omega_world: Vec3, dt: f64) -> Quat {
    let angle = v_norm(omega_world) * dt;
    if angle < 1e-12 {
        return q_normalize(q);
    }
    let axis = v_scale(omega_world, 1.0 / v_norm(omega_world));
    q_normalize(q_mul(q_from_axis_angle(axis, angle), q))
}

pub fn q_to_mat(q: Quat) -> Mat3 {
    let [w, x, y, z] = q;
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// ZYX Euler angles (roll about x, pitch about y, yaw about z) such that
/// `R = Rz(yaw) * Ry(pitch) * Rx(roll)`.
pub fn q_to_rpy(q: Quat) -> Vec3 {
    let [w, x, y, z] = q;
    let roll = (2.0 * (w * x + y * z)).atan2(1.0 - 2.0 * (x * x + y * y));
    let pitch = (2.0 * (w * y - z * x)).clamp(-1.0, 1.0).asin();
    let yaw = (2.0 * (w * z + x * y)).atan2(1.0 - 2.0 * (y * y + z * z));
    [roll, pitch, yaw]
}

pub fn rpy_to_mat(rpy: Vec3) -> Mat3 {
    let rx = axis_angle_mat([1.0, 0.0, 0.0], rpy[0]);
    let ry = axis_angle_mat([0.0, 1.0, 0.0], rpy[1]);
    let rz = axis_angle_mat([0.0, 0.0, 1.0], rpy[2]);
    m_mul(&rz, &m_mul(&ry, &rx))
}

/// World gravity direction (0,0,-1) expressed in the base frame.
pub fn projected_gravity(base_quat: Quat) -> Vec3 {
    let r = q_to_mat(base_quat);
    m_vec(&m_transpose(&r), [0.0, 0.0, -1.0])
}

// ---------------------------------------------------------------------------
// RNG
// ---------------------------------------------------------------------------

/// SplitMix64 step, used to derive independent stream seeds from one master seed.
pub fn split_seed(master: u64, stream: u64) -> u64 {
    let mut z = master
        .wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(stream.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard normal sample via Box-Muller (keeps the sampling path in-repo and
/// bit-deterministic given the rng state).
pub fn sample_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

// ---------------------------------------------------------------------------
// Hashing / formatting / IO
// ---------------------------------------------------------------------------

/// FNV-1a over bytes; used for config/run fingerprints.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Shortest text form that parses back to the identical f64 bit pattern.
pub fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

/// Atomically replace `path` with `bytes` (write temp file, then rename).
pub fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|s| s.to_string_lossy().to_string()).unwrap_or_else(|| "out".into())
    ));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotation_round_trips() {
        let mut rng = rng_from_seed(7);
        for _ in 0..200 {
            let rpy = [
                rng.gen_range(-1.2..1.2),
                rng.gen_range(-1.2..1.2),
                rng.gen_range(-3.0..3.0),
            ];
            let m = rpy_to_mat(rpy);
            // reconstruct quaternion from rpy via axis-angle composition
            let q = q_mul(
                q_from_axis_angle([0.0, 0.0, 1.0], rpy[2]),
                q_mul(
                    q_from_axis_angle([0.0, 1.0, 0.0], rpy[1]),
                    q_from_axis_angle([1.0, 0.0, 0.0], rpy[0]),
                ),
            );
            let m2 = q_to_mat(q);
            for i in 0..3 {
                for j in 0..3 {
                    assert!((m[i][j] - m2[i][j]).abs() < 1e-12);
                }
            }
            let back = q_to_rpy(q);
            for k in 0..3 {
                assert!((back[k] - rpy[k]).abs() < 1e-9, "rpy {back:?} vs {rpy:?}");
            }
        }
    }

    #[test]
    fn projected_gravity_upright() {
        let pg = projected_gravity(IDENTITY_QUAT);
        assert!((pg[0]).abs() < 1e-15 && (pg[1]).abs() < 1e-15 && (pg[2] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn solve_matches_matvec() {
        let a = [[4.0, 0.2, 0.1], [0.2, 3.0, 0.3], [0.1, 0.3, 5.0]];
        let x = [1.5, -2.0, 0.25];
        let b = m_vec(&a, x);
        let got = m_solve(&a, b);
        for k in 0..3 {
            assert!((got[k] - x[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn f64_text_round_trip_is_exact() {
        let mut rng = rng_from_seed(3);
        for _ in 0..1000 {
            let x = f64::from_bits(rng.gen::<u64>());
            if !x.is_finite() {
                continue;
            }
            let s = fmt_f64(x);
            let y: f64 = s.parse().unwrap();
            assert_eq!(x.to_bits(), y.to_bits(), "{s}");
        }
    }
}
