//! Decomposes absolute joint trajectories into local and global motion.

use crate::error::{Error, Result};
use crate::kinematics::Skeleton;
use crate::quat::{sub3, wrap_deg, Mat3, Quat, Vec3};

use super::MotionClip;

/// Heading is undefined when the hip line is this close to vertical
/// (measured on the unit hip vector); the previous frame's heading is
/// reused instead.
const DEGENERATE_HEADING_TOL: f64 = 1e-3;

/// Heading angle in degrees from the hip line: the forward vector is
/// `cross(up, left_hip - right_hip)` projected to the ground plane, and
/// the angle is measured so that a yaw rotation by it maps +z onto
/// forward. Returns `None` when the hips are (nearly) vertically aligned.
fn heading_deg(left_hip: Vec3, right_hip: Vec3) -> Option<f64> {
    let d = sub3(left_hip, right_hip);
    let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    if len == 0.0 {
        return None;
    }
    let horiz = (d[0] * d[0] + d[2] * d[2]).sqrt() / len;
    if horiz < DEGENERATE_HEADING_TOL {
        return None;
    }
    // forward = cross((0,1,0), d) = (d_z, 0, -d_x)
    Some(d[2].atan2(-d[0]).to_degrees())
}

/// Splits absolute joint positions into a heading-free local pose
/// sequence and a root-motion track.
///
/// Per frame, the heading angle is taken from the hip line (falling back
/// to the previous frame's heading when degenerate, and to zero when the
/// skeleton has no hip joints at all), the pose is expressed relative to
/// the root with the heading rotated out, and the global row holds the
/// root displacement to the next frame in heading coordinates plus the
/// heading increment. The last frame reuses the previous row so the clip
/// keeps its length. When per-joint rotations accompany the positions,
/// the root rotation absorbs the heading removal so that forward
/// kinematics of the stored rotations reproduces the stored local poses.
pub fn preprocess(
    skeleton: &Skeleton,
    name: &str,
    fps: f64,
    positions: &[Vec<Vec3>],
    rotations: Option<&[Vec<Quat>]>,
) -> Result<MotionClip> {
    if positions.len() < 2 {
        return Err(Error::Clip(format!(
            "{name:?} has {} frames, need at least 2",
            positions.len()
        )));
    }
    for (t, frame) in positions.iter().enumerate() {
        if frame.len() != skeleton.n_joints() {
            return Err(Error::ArityMismatch {
                expected: skeleton.n_joints(),
                got: frame.len(),
            });
        }
        if frame.iter().any(|p| !p.iter().all(|x| x.is_finite())) {
            return Err(Error::NonFinite(format!("{name:?} frame {t}")));
        }
    }
    if let Some(rot) = rotations {
        if rot.len() != positions.len() {
            return Err(Error::LengthMismatch(format!(
                "{name:?}: {} rotation frames vs {} position frames",
                rot.len(),
                positions.len()
            )));
        }
    }

    let hips = match (
        skeleton.joint_index("LeftUpLeg"),
        skeleton.joint_index("RightUpLeg"),
    ) {
        (Some(l), Some(r)) => Some((l, r)),
        _ => None,
    };

    let mut yaw = Vec::with_capacity(positions.len());
    let mut prev = 0.0;
    for frame in positions {
        let theta = hips
            .and_then(|(l, r)| heading_deg(frame[l], frame[r]))
            .unwrap_or(prev);
        yaw.push(theta);
        prev = theta;
    }

    let local: Vec<Vec<Vec3>> = positions
        .iter()
        .zip(&yaw)
        .map(|(frame, theta)| {
            let unyaw = Mat3::yaw_deg(-theta);
            frame
                .iter()
                .map(|p| unyaw.mul_vec(sub3(*p, frame[0])))
                .collect()
        })
        .collect();

    let mut global = Vec::with_capacity(positions.len());
    for t in 0..positions.len() - 1 {
        let unyaw = Mat3::yaw_deg(-yaw[t]);
        let v = unyaw.mul_vec(sub3(positions[t + 1][0], positions[t][0]));
        global.push([v[0], v[1], v[2], wrap_deg(yaw[t + 1] - yaw[t])]);
    }
    global.push(*global.last().expect("at least one velocity row"));

    let rotations = rotations.map(|frames| {
        frames
            .iter()
            .zip(&yaw)
            .map(|(quats, theta)| {
                let mut adjusted = quats.clone();
                // R(q ⊗ q_y) = R(q_y) · R(q) = yaw(-theta) · R(q): the
                // root rotation now includes the heading removal.
                adjusted[0] = quats[0]
                    .mul(Quat::from_axis_angle([0.0, 1.0, 0.0], theta.to_radians()));
                adjusted
            })
            .collect()
    });

    let clip = MotionClip {
        name: name.to_string(),
        skeleton_id: skeleton.name().to_string(),
        fps,
        initial_root: positions[0][0],
        initial_yaw_deg: yaw[0],
        local,
        global,
        rotations,
    };
    clip.validate()?;
    Ok(clip)
}
