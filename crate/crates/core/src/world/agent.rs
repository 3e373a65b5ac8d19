use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::rng_from;
use crate::se3::{BodyPoseFrame, Joint, RigidTransform, NUM_JOINTS};

use super::scene::Scene;

pub const HEAD_HEIGHT_RANGE: (f64, f64) = (1.4, 1.8);
pub const UPPER_ARM_LENGTH: f64 = 0.3;
pub const FOREARM_LENGTH: f64 = 0.28;
/// Head position relative to the pelvis, body frame.
pub const HEAD_OFFSET: [f64; 3] = [0.05, 0.0, 0.7];

/// Flexion raises the arm forward from hanging, adduction swings it across
/// the body, elbow bends the forearm further in the flexion direction.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ArmAngles {
    pub flexion: f64,
    pub adduction: f64,
    pub elbow: f64,
}

pub const FLEXION_LIMITS: (f64, f64) = (-0.5, 2.8);
pub const ADDUCTION_LIMITS: (f64, f64) = (-1.2, 1.4);
pub const ELBOW_LIMITS: (f64, f64) = (0.0, 2.5);

impl ArmAngles {
    pub fn within_limits(&self) -> bool {
        let inside = |v: f64, (lo, hi): (f64, f64)| v >= lo && v <= hi;
        inside(self.flexion, FLEXION_LIMITS)
            && inside(self.adduction, ADDUCTION_LIMITS)
            && inside(self.elbow, ELBOW_LIMITS)
    }

    fn clamped(self) -> Self {
        Self {
            flexion: self.flexion.clamp(FLEXION_LIMITS.0, FLEXION_LIMITS.1),
            adduction: self.adduction.clamp(ADDUCTION_LIMITS.0, ADDUCTION_LIMITS.1),
            elbow: self.elbow.clamp(ELBOW_LIMITS.0, ELBOW_LIMITS.1),
        }
    }

    fn approach(self, target: ArmAngles, rate: f64) -> Self {
        Self {
            flexion: self.flexion + rate * (target.flexion - self.flexion),
            adduction: self.adduction + rate * (target.adduction - self.adduction),
            elbow: self.elbow + rate * (target.elbow - self.elbow),
        }
    }
}

/// Arm index 0 is the right arm, 1 the left.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub head: RigidTransform,
    pub pelvis: RigidTransform,
    pub arms: [ArmAngles; 2],
}

impl AgentState {
    pub fn validate(&self) -> Result<()> {
        let z = self.head.translation().z;
        if !(HEAD_HEIGHT_RANGE.0..=HEAD_HEIGHT_RANGE.1).contains(&z) {
            return Err(Error::Data(format!("head height {z} outside {HEAD_HEIGHT_RANGE:?}")));
        }
        if !self.arms.iter().all(ArmAngles::within_limits) {
            return Err(Error::Data(format!("arm angles {:?} outside limits", self.arms)));
        }
        Ok(())
    }

    /// Same state moved by a world-frame translation.
    pub fn translated(&self, d: [f64; 3]) -> AgentState {
        let shift = RigidTransform::from_translation(d[0], d[1], d[2]);
        AgentState {
            head: shift.compose(&self.head),
            pelvis: shift.compose(&self.pelvis),
            arms: self.arms,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gesture {
    Rest,
    Raise,
    Extend,
    Cross,
}

impl Gesture {
    pub const ALL: [Gesture; 4] = [Gesture::Rest, Gesture::Raise, Gesture::Extend, Gesture::Cross];

    pub fn target(self) -> ArmAngles {
        let (flexion, adduction, elbow) = match self {
            Gesture::Rest => (0.1, 0.0, 0.15),
            Gesture::Raise => (2.0, 0.2, 0.9),
            Gesture::Extend => (1.45, 0.35, 0.1),
            Gesture::Cross => (1.1, 0.9, 1.3),
        };
        ArmAngles {
            flexion,
            adduction,
            elbow,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectoryConfig {
    /// Frame interval in seconds.
    pub dt: f64,
    pub max_speed: f64,
    pub cruise_speed: f64,
    pub max_yaw_rate: f64,
    pub wall_margin: f64,
    /// Fraction of the head-body yaw gap the body closes each frame.
    pub body_follow: f64,
    pub segment_frames: (usize, usize),
    pub gesture_frames: (usize, usize),
    pub pelvis_noise: f64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            dt: 1.0 / 16.0,
            max_speed: 0.15,
            cruise_speed: 0.08,
            max_yaw_rate: 0.3,
            wall_margin: 0.6,
            body_follow: 0.25,
            segment_frames: (5, 14),
            gesture_frames: (6, 18),
            pelvis_noise: 0.004,
        }
    }
}

impl TrajectoryConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.dt > 0.0
            && self.max_speed > 0.0
            && self.cruise_speed >= 0.0
            && self.cruise_speed <= self.max_speed
            && self.max_yaw_rate > 0.0
            && self.wall_margin > 0.0
            && (0.0..=1.0).contains(&self.body_follow)
            && self.segment_frames.0 >= 1
            && self.segment_frames.0 <= self.segment_frames.1
            && self.gesture_frames.0 >= 1
            && self.gesture_frames.0 <= self.gesture_frames.1
            && self.pelvis_noise >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid trajectory config {self:?}")))
        }
    }
}

pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

fn yaw_pose(position: [f64; 3], yaw: f64) -> RigidTransform {
    RigidTransform::from_euler(position, 0.0, 0.0, yaw)
}

/// Reflects one coordinate into `[-bound, bound]`, flipping its velocity.
fn reflect(p: &mut f64, v: &mut f64, bound: f64) {
    if *p > bound {
        *p = 2.0 * bound - *p;
        *v = -v.abs();
    } else if *p < -bound {
        *p = -2.0 * bound - *p;
        *v = v.abs();
    }
}

/// Random walk with smoothed velocity and yaw-rate targets that change at
/// random segment boundaries, plus a gesture script for each arm.
pub fn sample_trajectory(
    scene: &Scene,
    config: &TrajectoryConfig,
    length: usize,
    seed: u64,
) -> Result<Vec<AgentState>> {
    if length < 2 {
        return Err(Error::Config(format!("trajectory length {length} < 2")));
    }
    config.validate()?;
    scene.validate()?;
    let bx = scene.half_x - config.wall_margin;
    let by = scene.half_y - config.wall_margin;
    if bx <= 0.2 || by <= 0.2 {
        return Err(Error::Config("room leaves no space inside the wall margin".into()));
    }

    let mut rng = rng_from(seed, &[0x7A]);
    let noise = Normal::new(0.0, config.pelvis_noise.max(f64::MIN_POSITIVE)).expect("finite std");
    let height = rng.gen_range(1.5..1.7);
    let mut pos = [rng.gen_range(-bx..bx) * 0.7, rng.gen_range(-by..by) * 0.7];
    let mut head_yaw: f64 = rng.gen_range(-PI..PI);
    let mut body_yaw = head_yaw;
    let mut vel = [0.0, 0.0];
    let mut yaw_rate = 0.0;
    let mut arms = [Gesture::Rest.target(); 2];

    let mut seg_left = 0usize;
    let (mut target_speed, mut target_rate, mut drift) = (0.0, 0.0, 0.0);
    let mut gesture_left = [0usize; 2];
    let mut gesture_target = [Gesture::Rest.target(); 2];

    let mut out = Vec::with_capacity(length);
    for frame in 0..length {
        if seg_left == 0 {
            seg_left = rng.gen_range(config.segment_frames.0..=config.segment_frames.1);
            target_speed = if rng.gen_bool(0.2) {
                0.0
            } else {
                rng.gen_range(0.3..1.0) * config.cruise_speed
            };
            target_rate = if rng.gen_bool(0.25) {
                0.0
            } else {
                rng.gen_range(-1.0..1.0) * config.max_yaw_rate
            };
            drift = rng.gen_range(-0.6..0.6);
        }
        seg_left -= 1;
        // steer away from walls that lie ahead
        let ahead = [pos[0] + 12.0 * vel[0], pos[1] + 12.0 * vel[1]];
        let mut rate_goal = target_rate;
        if ahead[0].abs() > bx || ahead[1].abs() > by {
            let to_center = (-pos[1]).atan2(-pos[0]);
            rate_goal = wrap_angle(to_center - head_yaw).signum() * 0.8 * config.max_yaw_rate;
        }
        yaw_rate += 0.4 * (rate_goal - yaw_rate);
        yaw_rate = yaw_rate.clamp(-config.max_yaw_rate, config.max_yaw_rate);
        if frame > 0 {
            head_yaw += yaw_rate;
        }
        body_yaw += config.body_follow * wrap_angle(head_yaw - body_yaw);

        let heading = body_yaw + drift;
        let goal = [target_speed * heading.cos(), target_speed * heading.sin()];
        vel[0] += 0.3 * (goal[0] - vel[0]);
        vel[1] += 0.3 * (goal[1] - vel[1]);
        let speed = (vel[0] * vel[0] + vel[1] * vel[1]).sqrt();
        if speed > config.max_speed {
            vel[0] *= config.max_speed / speed;
            vel[1] *= config.max_speed / speed;
        }
        if frame > 0 {
            pos[0] += vel[0];
            pos[1] += vel[1];
            reflect(&mut pos[0], &mut vel[0], bx);
            reflect(&mut pos[1], &mut vel[1], by);
        }

        for arm in 0..2 {
            if gesture_left[arm] == 0 {
                gesture_left[arm] = rng.gen_range(config.gesture_frames.0..=config.gesture_frames.1);
                // rest is drawn a little more often than the three visible gestures combined
                let g = if rng.gen_bool(0.55) {
                    Gesture::Rest
                } else {
                    Gesture::ALL[rng.gen_range(1..Gesture::ALL.len())]
                };
                let mut t = g.target();
                t.flexion += rng.gen_range(-0.15..0.15);
                t.adduction += rng.gen_range(-0.15..0.15);
                t.elbow += rng.gen_range(0.0..0.2);
                gesture_target[arm] = t.clamped();
            }
            gesture_left[arm] -= 1;
            arms[arm] = arms[arm].approach(gesture_target[arm], 0.35).clamped();
        }

        let bob = 0.015 * (frame as f64 * 0.9).sin() * (speed / config.cruise_speed.max(1e-9)).min(1.0);
        let z = (height + bob).clamp(HEAD_HEIGHT_RANGE.0, HEAD_HEIGHT_RANGE.1);
        let head = yaw_pose([pos[0], pos[1], z], head_yaw);
        let (s, c) = body_yaw.sin_cos();
        let off = HEAD_OFFSET;
        let pelvis_pos = [
            pos[0] - (c * off[0] - s * off[1]) + noise.sample(&mut rng),
            pos[1] - (s * off[0] + c * off[1]) + noise.sample(&mut rng),
            z - off[2] + noise.sample(&mut rng),
        ];
        out.push(AgentState {
            head,
            pelvis: yaw_pose(pelvis_pos, body_yaw),
            arms,
        });
    }
    Ok(out)
}

/// Fixed joint offsets in the pelvis frame for the joints that ride rigidly
/// with it.
fn rigid_offset(j: Joint) -> Option<[f64; 3]> {
    Some(match j {
        Joint::Pelvis => [0.0, 0.0, 0.0],
        Joint::L5 => [0.0, 0.0, 0.1],
        Joint::L3 => [0.0, 0.0, 0.2],
        Joint::T12 => [0.0, 0.0, 0.3],
        Joint::T8 => [0.0, 0.0, 0.4],
        Joint::Neck => [0.02, 0.0, 0.6],
        Joint::RightShoulder => [0.0, -0.08, 0.55],
        Joint::LeftShoulder => [0.0, 0.08, 0.55],
        Joint::RightUpperLeg => [0.0, -0.1, -0.05],
        Joint::RightLowerLeg => [0.0, -0.1, -0.5],
        Joint::RightFoot => [0.0, -0.1, -0.9],
        Joint::RightToe => [0.15, -0.1, -0.95],
        Joint::LeftUpperLeg => [0.0, 0.1, -0.05],
        Joint::LeftLowerLeg => [0.0, 0.1, -0.5],
        Joint::LeftFoot => [0.0, 0.1, -0.9],
        Joint::LeftToe => [0.15, 0.1, -0.95],
        _ => return None,
    })
}

/// Shoulder pivot in the pelvis frame; `side` is -1 for right, +1 for left.
pub fn shoulder_offset(side: f64) -> [f64; 3] {
    [0.0, 0.2 * side, 0.5]
}

/// Local frames of the upper arm and forearm relative to the pelvis. Both
/// segments run along their frame's −z axis.
pub fn arm_rotations(a: &ArmAngles, side: f64) -> (RigidTransform, RigidTransform) {
    let upper = RigidTransform::rot_z(-side * a.adduction).compose(&RigidTransform::rot_y(-a.flexion));
    let fore = upper.compose(&RigidTransform::rot_y(-a.elbow));
    (upper, fore)
}

pub fn skeleton_to_body_pose(state: &AgentState) -> Result<BodyPoseFrame> {
    let pelvis = &state.pelvis;
    let mut joints = vec![RigidTransform::identity(); NUM_JOINTS];
    for j in Joint::ALL {
        if let Some(o) = rigid_offset(j) {
            joints[j.index()] = pelvis.compose(&RigidTransform::from_translation(o[0], o[1], o[2]));
        }
    }
    joints[Joint::Head.index()] = state.head;
    let chains = [
        (0, -1.0, Joint::RightUpperArm, Joint::RightForearm, Joint::RightHand),
        (1, 1.0, Joint::LeftUpperArm, Joint::LeftForearm, Joint::LeftHand),
    ];
    for (arm, side, upper_j, fore_j, hand_j) in chains {
        let (upper, fore) = arm_rotations(&state.arms[arm], side);
        let s = shoulder_offset(side);
        let shoulder = RigidTransform::from_translation(s[0], s[1], s[2]);
        let upper_local = shoulder.compose(&upper);
        let elbow_local = upper_local.compose(&RigidTransform::from_translation(0.0, 0.0, -UPPER_ARM_LENGTH));
        let elbow_local = RigidTransform::new(*fore.rotation(), *elbow_local.translation())?;
        let wrist_local = elbow_local.compose(&RigidTransform::from_translation(0.0, 0.0, -FOREARM_LENGTH));
        joints[upper_j.index()] = pelvis.compose(&upper_local);
        joints[fore_j.index()] = pelvis.compose(&elbow_local);
        joints[hand_j.index()] = pelvis.compose(&wrist_local);
    }
    Ok(BodyPoseFrame::canonical(joints)?)
}

/// World positions of (shoulder, elbow, wrist) for the right and left arm.
pub fn arm_points(pose: &BodyPoseFrame) -> [[Vector3<f64>; 3]; 2] {
    let p = |j: Joint| *pose.joint(j).translation();
    [
        [p(Joint::RightUpperArm), p(Joint::RightForearm), p(Joint::RightHand)],
        [p(Joint::LeftUpperArm), p(Joint::LeftForearm), p(Joint::LeftHand)],
    ]
}
