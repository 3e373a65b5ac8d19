//! Rigid-body transforms and the pose control representation.
//!
//! All transforms are poses in the joint-to-world sense: a transform `T`
//! maps points expressed in the joint frame into the parent (global) frame.
//! Euler angles follow the intrinsic X-Y-Z convention,
//! `R = Rx(roll) * Ry(pitch) * Rz(yaw)`, in radians.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::PoseError;

/// Orthonormality tolerance applied when validating rotation matrices.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

/// Distance from `|pitch| = pi/2` at which the Euler decomposition is
/// treated as gimbal locked.
pub const GIMBAL_EPS: f64 = 1e-6;

/// Number of joints in a body pose frame.
pub const NUM_JOINTS: usize = 23;

/// Width of one 6D pose row: translation followed by Euler angles.
pub const POSE_DIM: usize = 6;

/// An element of SE(3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl RigidTransform {
    /// Builds a transform, rejecting rotations that are not proper and
    /// orthonormal within [`ROTATION_TOLERANCE`].
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, PoseError> {
        if rotation.iter().chain(translation.iter()).any(|v| !v.is_finite()) {
            return Err(PoseError::NonFinite);
        }
        let gram = rotation * rotation.transpose();
        let max_dev = (gram - Matrix3::identity()).abs().max();
        if max_dev > ROTATION_TOLERANCE {
            return Err(PoseError::NotOrthonormal(max_dev));
        }
        let det = rotation.determinant();
        if det <= 0.0 {
            return Err(PoseError::ImproperRotation(det));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::new(x, y, z),
        }
    }

    pub fn rot_x(angle: f64) -> Self {
        Self::from_rotation_unchecked(rot_x(angle))
    }

    pub fn rot_y(angle: f64) -> Self {
        Self::from_rotation_unchecked(rot_y(angle))
    }

    pub fn rot_z(angle: f64) -> Self {
        Self::from_rotation_unchecked(rot_z(angle))
    }

    /// Rotation from intrinsic X-Y-Z Euler angles plus a translation.
    pub fn from_euler(translation: [f64; 3], roll: f64, pitch: f64, yaw: f64) -> Self {
        Self {
            rotation: rot_x(roll) * rot_y(pitch) * rot_z(yaw),
            translation: Vector3::from(translation),
        }
    }

    fn from_rotation_unchecked(rotation: Matrix3<f64>) -> Self {
        Self {
            rotation,
            translation: Vector3::zeros(),
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn to_matrix4(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Row-major rotation followed by translation.
    pub fn to_row_major12(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t[0],
            t[1],
            t[2],
        ]
    }

    pub fn from_row_major12(v: &[f64; 12]) -> Result<Self, PoseError> {
        let rotation = Matrix3::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]);
        Self::new(rotation, Vector3::new(v[9], v[10], v[11]))
    }

    /// Geodesic distance between the rotation parts, in radians.
    pub fn rotation_angle_to(&self, other: &RigidTransform) -> f64 {
        let rel = self.rotation.transpose() * other.rotation;
        let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos()
    }

    /// Heading of the transformed x axis projected on the ground plane.
    pub fn yaw_of_forward(&self) -> f64 {
        self.rotation[(1, 0)].atan2(self.rotation[(0, 0)])
    }
}

pub(crate) fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub(crate) fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub(crate) fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Translation plus intrinsic X-Y-Z Euler angles.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose6D {
    pub translation: [f64; 3],
    /// roll, pitch, yaw
    pub rotation: [f64; 3],
}

impl Pose6D {
    pub fn to_array(&self) -> [f64; POSE_DIM] {
        let [x, y, z] = self.translation;
        let [a, b, c] = self.rotation;
        [x, y, z, a, b, c]
    }

    pub fn from_array(v: [f64; POSE_DIM]) -> Self {
        Self {
            translation: [v[0], v[1], v[2]],
            rotation: [v[3], v[4], v[5]],
        }
    }

    pub fn roll(&self) -> f64 {
        self.rotation[0]
    }

    pub fn pitch(&self) -> f64 {
        self.rotation[1]
    }

    pub fn yaw(&self) -> f64 {
        self.rotation[2]
    }
}

/// Result of an Euler decomposition together with its degeneracy flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EulerDecomposition {
    pub pose: Pose6D,
    /// Set when `|pitch|` is within [`GIMBAL_EPS`] of `pi/2`; yaw was forced to 0.
    pub gimbal_locked: bool,
}

fn wrap_half_open(a: f64) -> f64 {
    // atan2 can return -pi exactly; the canonical interval is (-pi, pi]
    if a <= -PI {
        a + 2.0 * PI
    } else {
        a
    }
}

/// Euler decomposition with the gimbal-lock flag exposed.
pub fn decompose(t: &RigidTransform) -> EulerDecomposition {
    let r = &t.rotation;
    let sin_pitch = r[(0, 2)].clamp(-1.0, 1.0);
    let mut pitch = sin_pitch.asin();
    let gimbal_locked = FRAC_PI_2 - pitch.abs() < GIMBAL_EPS;
    let (roll, yaw) = if gimbal_locked {
        pitch = pitch.signum() * (FRAC_PI_2 - GIMBAL_EPS);
        (r[(2, 1)].atan2(r[(1, 1)]), 0.0)
    } else {
        ((-r[(1, 2)]).atan2(r[(2, 2)]), (-r[(0, 1)]).atan2(r[(0, 0)]))
    };
    if gimbal_locked {
        log::warn!("euler decomposition near gimbal lock (pitch {pitch:.6}); yaw set to 0");
    }
    let tr = &t.translation;
    EulerDecomposition {
        pose: Pose6D {
            translation: [tr[0], tr[1], tr[2]],
            rotation: [wrap_half_open(roll), pitch, wrap_half_open(yaw)],
        },
        gimbal_locked,
    }
}

pub fn transform_to_6d(t: &RigidTransform) -> Pose6D {
    decompose(t).pose
}

pub fn pose6d_to_transform(p: &Pose6D) -> RigidTransform {
    RigidTransform::from_euler(p.translation, p.rotation[0], p.rotation[1], p.rotation[2])
}

/// `current ∘ previous⁻¹`. Identical inputs give the exact identity, so static poses have zero deltas.
pub fn relative_transform(current: &RigidTransform, previous: &RigidTransform) -> RigidTransform {
    if current == previous {
        return RigidTransform::identity();
    }
    current.compose(&previous.inverse())
}

/// The 23-segment body layout. Discriminants give the canonical ordering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Joint {
    Pelvis = 0,
    L5,
    L3,
    T12,
    T8,
    Neck,
    Head,
    RightShoulder,
    RightUpperArm,
    RightForearm,
    RightHand,
    LeftShoulder,
    LeftUpperArm,
    LeftForearm,
    LeftHand,
    RightUpperLeg,
    RightLowerLeg,
    RightFoot,
    RightToe,
    LeftUpperLeg,
    LeftLowerLeg,
    LeftFoot,
    LeftToe,
}

impl Joint {
    pub const ALL: [Joint; NUM_JOINTS] = [
        Joint::Pelvis,
        Joint::L5,
        Joint::L3,
        Joint::T12,
        Joint::T8,
        Joint::Neck,
        Joint::Head,
        Joint::RightShoulder,
        Joint::RightUpperArm,
        Joint::RightForearm,
        Joint::RightHand,
        Joint::LeftShoulder,
        Joint::LeftUpperArm,
        Joint::LeftForearm,
        Joint::LeftHand,
        Joint::RightUpperLeg,
        Joint::RightLowerLeg,
        Joint::RightFoot,
        Joint::RightToe,
        Joint::LeftUpperLeg,
        Joint::LeftLowerLeg,
        Joint::LeftFoot,
        Joint::LeftToe,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Joint::Pelvis => "pelvis",
            Joint::L5 => "l5",
            Joint::L3 => "l3",
            Joint::T12 => "t12",
            Joint::T8 => "t8",
            Joint::Neck => "neck",
            Joint::Head => "head",
            Joint::RightShoulder => "right_shoulder",
            Joint::RightUpperArm => "right_upper_arm",
            Joint::RightForearm => "right_forearm",
            Joint::RightHand => "right_hand",
            Joint::LeftShoulder => "left_shoulder",
            Joint::LeftUpperArm => "left_upper_arm",
            Joint::LeftForearm => "left_forearm",
            Joint::LeftHand => "left_hand",
            Joint::RightUpperLeg => "right_upper_leg",
            Joint::RightLowerLeg => "right_lower_leg",
            Joint::RightFoot => "right_foot",
            Joint::RightToe => "right_toe",
            Joint::LeftUpperLeg => "left_upper_leg",
            Joint::LeftLowerLeg => "left_lower_leg",
            Joint::LeftFoot => "left_foot",
            Joint::LeftToe => "left_toe",
        }
    }

    pub fn from_name(name: &str) -> Option<Joint> {
        Joint::ALL.iter().copied().find(|j| j.name() == name)
    }
}

/// Joints other than head and pelvis, in canonical order (the `J` rows).
pub fn body_joints() -> impl Iterator<Item = Joint> {
    Joint::ALL
        .into_iter()
        .filter(|j| !matches!(j, Joint::Head | Joint::Pelvis))
}

/// One frame of 23 global joint transforms.
///
/// Joints may be stored in any order; `names[i]` identifies storage slot `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyPoseFrame {
    joints: Vec<RigidTransform>,
    names: Vec<Joint>,
    slot_of: [usize; NUM_JOINTS],
}

impl BodyPoseFrame {
    /// Frame with joints in canonical order.
    pub fn canonical(joints: Vec<RigidTransform>) -> Result<Self, PoseError> {
        Self::with_names(joints, Joint::ALL.to_vec())
    }

    pub fn with_names(joints: Vec<RigidTransform>, names: Vec<Joint>) -> Result<Self, PoseError> {
        if let Some(n) = [joints.len(), names.len()].into_iter().find(|&n| n != NUM_JOINTS) {
            return Err(PoseError::JointCount(n));
        }
        let mut slot_of = [usize::MAX; NUM_JOINTS];
        for (slot, j) in names.iter().enumerate() {
            if slot_of[j.index()] != usize::MAX {
                return Err(PoseError::DuplicateJoint(j.name()));
            }
            slot_of[j.index()] = slot;
        }
        Ok(Self { joints, names, slot_of })
    }

    pub fn joint(&self, j: Joint) -> &RigidTransform {
        &self.joints[self.slot_of[j.index()]]
    }

    pub fn head(&self) -> &RigidTransform {
        self.joint(Joint::Head)
    }

    pub fn pelvis(&self) -> &RigidTransform {
        self.joint(Joint::Pelvis)
    }

    /// Storage slot of the head joint.
    pub fn head_index(&self) -> usize {
        self.slot_of[Joint::Head.index()]
    }

    /// Storage slot of the pelvis joint.
    pub fn pelvis_index(&self) -> usize {
        self.slot_of[Joint::Pelvis.index()]
    }

    /// Joints in storage order.
    pub fn joints(&self) -> &[RigidTransform] {
        &self.joints
    }

    pub fn names(&self) -> &[Joint] {
        &self.names
    }

    /// Applies `g ∘ ·` to every joint (a global rigid motion).
    pub fn transformed(&self, g: &RigidTransform) -> BodyPoseFrame {
        BodyPoseFrame {
            joints: self.joints.iter().map(|j| g.compose(j)).collect(),
            names: self.names.clone(),
            slot_of: self.slot_of,
        }
    }
}

/// `M + 1` body frames: frame 0 is the last observed frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence {
    frames: Vec<BodyPoseFrame>,
    dt: f64,
}

impl PoseSequence {
    pub fn new(frames: Vec<BodyPoseFrame>, dt: f64) -> Result<Self, PoseError> {
        if frames.len() < 2 {
            return Err(PoseError::SequenceTooShort(frames.len()));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(PoseError::BadFrameInterval(dt));
        }
        Ok(Self { frames, dt })
    }

    pub fn frames(&self) -> &[BodyPoseFrame] {
        &self.frames
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Number of controlled frames `M`.
    pub fn num_targets(&self) -> usize {
        self.frames.len() - 1
    }

    /// Sub-sequence `[start, end)`; must keep at least two frames.
    pub fn window(&self, start: usize, end: usize) -> Result<PoseSequence, PoseError> {
        PoseSequence::new(self.frames[start..end].to_vec(), self.dt)
    }
}

/// `M x 23 x 6` pose control block.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlTensor {
    frames: usize,
    data: Vec<f64>,
}

/// Row of the control block holding the head delta.
pub const ROW_HEAD: usize = 0;
/// Row of the control block holding the pelvis delta.
pub const ROW_PELVIS: usize = 1;
/// Width of a flattened per-frame control row block (23 * 6).
pub const FRAME_WIDTH: usize = NUM_JOINTS * POSE_DIM;

impl ControlTensor {
    pub fn zeros(frames: usize) -> Self {
        Self {
            frames,
            data: vec![0.0; frames * FRAME_WIDTH],
        }
    }

    pub fn from_vec(frames: usize, data: Vec<f64>) -> Result<Self, PoseError> {
        if frames == 0 || data.len() != frames * FRAME_WIDTH {
            return Err(PoseError::ControlShape {
                expected: frames * FRAME_WIDTH,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(PoseError::NonFinite);
        }
        Ok(Self { frames, data })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.frames, NUM_JOINTS, POSE_DIM]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, frame: usize, row: usize) -> &[f64] {
        let o = (frame * NUM_JOINTS + row) * POSE_DIM;
        &self.data[o..o + POSE_DIM]
    }

    pub fn row_mut(&mut self, frame: usize, row: usize) -> &mut [f64] {
        let o = (frame * NUM_JOINTS + row) * POSE_DIM;
        &mut self.data[o..o + POSE_DIM]
    }

    /// The 138 values of frame `m`.
    pub fn frame(&self, m: usize) -> &[f64] {
        &self.data[m * FRAME_WIDTH..(m + 1) * FRAME_WIDTH]
    }

    fn set_row(&mut self, frame: usize, row: usize, v: &[f64; POSE_DIM]) {
        self.row_mut(frame, row).copy_from_slice(v);
    }

    /// Zeroes every row from `first_row` on, keeping earlier rows.
    pub fn keep_rows_below(&mut self, first_row: usize) {
        for m in 0..self.frames {
            for r in first_row..NUM_JOINTS {
                self.row_mut(m, r).fill(0.0);
            }
        }
    }
}

fn joint_deltas(seq: &PoseSequence, joint: Joint) -> Vec<[f64; POSE_DIM]> {
    seq.frames
        .windows(2)
        .map(|w| transform_to_6d(&relative_transform(w[1].joint(joint), w[0].joint(joint))).to_array())
        .collect()
}

/// Head motion between consecutive frames, `M x 1 x 6`.
pub fn head_deltas(seq: &PoseSequence) -> Vec<[f64; POSE_DIM]> {
    joint_deltas(seq, Joint::Head)
}

/// Pelvis (root) motion between consecutive frames, `M x 1 x 6`.
pub fn pelvis_deltas(seq: &PoseSequence) -> Vec<[f64; POSE_DIM]> {
    joint_deltas(seq, Joint::Pelvis)
}

/// `Pelvis⁻¹ ∘ Joint` for the 21 non-head, non-pelvis joints in canonical order.
pub fn pelvis_relative_joints(frame: &BodyPoseFrame) -> Vec<[f64; POSE_DIM]> {
    let pelvis_inv = frame.pelvis().inverse();
    body_joints()
        .map(|j| transform_to_6d(&pelvis_inv.compose(frame.joint(j))).to_array())
        .collect()
}

/// `P = [Δh, Δr, J]`.
pub fn assemble_control(seq: &PoseSequence) -> ControlTensor {
    let m = seq.num_targets();
    let mut out = ControlTensor::zeros(m);
    let dh = head_deltas(seq);
    let dr = pelvis_deltas(seq);
    for i in 0..m {
        out.set_row(i, ROW_HEAD, &dh[i]);
        out.set_row(i, ROW_PELVIS, &dr[i]);
        for (k, row) in pelvis_relative_joints(&seq.frames[i + 1]).iter().enumerate() {
            out.set_row(i, 2 + k, row);
        }
    }
    out
}

/// Head pose relative to the reference frame `H_i ∘ H_0⁻¹`, `M x 1 x 6`.
pub fn cumulative_head_variant(seq: &PoseSequence) -> Vec<[f64; POSE_DIM]> {
    let h0 = seq.frames[0].head();
    seq.frames[1..]
        .iter()
        .map(|f| transform_to_6d(&relative_transform(f.head(), h0)).to_array())
        .collect()
}

/// Frame-to-frame motion of all 23 joints, canonical order.
pub fn per_joint_delta_variant(seq: &PoseSequence) -> ControlTensor {
    let m = seq.num_targets();
    let mut out = ControlTensor::zeros(m);
    for j in Joint::ALL {
        for (i, d) in joint_deltas(seq, j).iter().enumerate() {
            out.set_row(i, j.index(), d);
        }
    }
    out
}

/// Control block carrying only a single head row per frame.
pub fn head_rows_to_control(rows: &[[f64; POSE_DIM]]) -> ControlTensor {
    let mut out = ControlTensor::zeros(rows.len());
    for (i, r) in rows.iter().enumerate() {
        out.set_row(i, ROW_HEAD, r);
    }
    out
}

/// Wire form of one pose frame, one JSON object per line.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PoseFrameRecord {
    pub joints: Vec<[f64; 12]>,
    pub head_index: usize,
    pub pelvis_index: usize,
    pub dt: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint_names: Option<Vec<String>>,
}

impl PoseFrameRecord {
    pub fn from_frame(frame: &BodyPoseFrame, dt: f64) -> Self {
        let canonical = frame.names() == Joint::ALL;
        Self {
            joints: frame.joints().iter().map(|j| j.to_row_major12()).collect(),
            head_index: frame.head_index(),
            pelvis_index: frame.pelvis_index(),
            dt,
            joint_names: (!canonical).then(|| frame.names().iter().map(|j| j.name().to_string()).collect()),
        }
    }

    pub fn to_frame(&self) -> Result<BodyPoseFrame, PoseError> {
        let joints = self
            .joints
            .iter()
            .map(RigidTransform::from_row_major12)
            .collect::<Result<Vec<_>, _>>()?;
        let names = match &self.joint_names {
            None => Joint::ALL.to_vec(),
            Some(names) => names
                .iter()
                .map(|n| Joint::from_name(n).ok_or_else(|| PoseError::UnknownJoint(n.clone())))
                .collect::<Result<Vec<_>, _>>()?,
        };
        let frame = BodyPoseFrame::with_names(joints, names)?;
        if frame.head_index() != self.head_index || frame.pelvis_index() != self.pelvis_index {
            return Err(PoseError::IndexMismatch);
        }
        Ok(frame)
    }
}

/// Serializes a sequence as JSON lines.
pub fn write_pose_jsonl(seq: &PoseSequence) -> String {
    let mut out = String::new();
    for f in seq.frames() {
        let rec = PoseFrameRecord::from_frame(f, seq.dt());
        out.push_str(&serde_json::to_string(&rec).expect("pose record serializes"));
        out.push('\n');
    }
    out
}

pub fn read_pose_jsonl(text: &str) -> Result<PoseSequence, PoseError> {
    let mut frames = Vec::new();
    let mut dt = None;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: PoseFrameRecord = serde_json::from_str(line).map_err(|e| PoseError::Parse {
            line: lineno + 1,
            message: e.to_string(),
        })?;
        match dt {
            None => dt = Some(rec.dt),
            Some(d) if d != rec.dt => return Err(PoseError::BadFrameInterval(rec.dt)),
            _ => {}
        }
        frames.push(rec.to_frame()?);
    }
    PoseSequence::new(frames, dt.unwrap_or(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_transform(rng: &mut ChaCha8Rng) -> RigidTransform {
        RigidTransform::from_euler(
            [
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            ],
            rng.gen_range(-PI..PI),
            rng.gen_range(-1.4..1.4),
            rng.gen_range(-PI..PI),
        )
    }

    fn assert_transform_eq(a: &RigidTransform, b: &RigidTransform, tol: f64) {
        assert_abs_diff_eq!(a.to_matrix4(), b.to_matrix4(), epsilon = tol);
    }

    #[test]
    fn rejects_non_orthonormal() {
        let r = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(matches!(
            RigidTransform::new(r, Vector3::zeros()),
            Err(PoseError::NotOrthonormal(_))
        ));
        let flip = Matrix3::new(-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(matches!(
            RigidTransform::new(flip, Vector3::zeros()),
            Err(PoseError::ImproperRotation(_))
        ));
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let t = random_transform(&mut rng);
            assert_transform_eq(&t.compose(&t.inverse()), &RigidTransform::identity(), 1e-9);
        }
    }

    #[test]
    fn relative_transform_examples() {
        let t = RigidTransform::from_euler([0.3, -1.0, 2.0], 0.2, 0.4, -0.7);
        assert_transform_eq(&relative_transform(&t, &t), &RigidTransform::identity(), 1e-12);

        let tr = relative_transform(
            &RigidTransform::from_translation(1.0, 2.0, 3.0),
            &RigidTransform::identity(),
        );
        assert_eq!(transform_to_6d(&tr).to_array(), [1.0, 2.0, 3.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn relative_transform_matches_dense_matrix_oracle() {
        let cur = RigidTransform::rot_z(30f64.to_radians()).compose(&RigidTransform::from_translation(1.0, 0.0, 0.0));
        let prev = RigidTransform::rot_z(10f64.to_radians());
        // oracle: general 4x4 product with a general matrix inverse
        let dense = cur.to_matrix4() * prev.to_matrix4().try_inverse().unwrap();
        assert_abs_diff_eq!(relative_transform(&cur, &prev).to_matrix4(), dense, epsilon = 1e-12);
        // the rotation part is a pure 20 degree yaw
        let p = transform_to_6d(&relative_transform(&cur, &prev));
        assert_abs_diff_eq!(p.yaw(), 20f64.to_radians(), epsilon = 1e-12);
    }

    #[test]
    fn euler_examples() {
        assert_eq!(transform_to_6d(&RigidTransform::identity()).to_array(), [0.0; 6]);
        let p = transform_to_6d(&RigidTransform::rot_z(FRAC_PI_2));
        assert_abs_diff_eq!(
            &p.to_array()[..],
            &[0.0, 0.0, 0.0, 0.0, 0.0, FRAC_PI_2][..],
            epsilon = 1e-15
        );
    }

    #[test]
    fn euler_round_trip_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let t = random_transform(&mut rng);
            let back = pose6d_to_transform(&transform_to_6d(&t));
            assert_transform_eq(&t, &back, 1e-9);
        }
    }

    #[test]
    fn gimbal_lock_is_flagged() {
        let t = RigidTransform::from_euler([0.0; 3], 0.3, FRAC_PI_2, 0.2);
        let d = decompose(&t);
        assert!(d.gimbal_locked);
        assert_eq!(d.pose.yaw(), 0.0);
        assert!(d.pose.pitch() < FRAC_PI_2);
        // the flagged decomposition still reproduces the rotation
        let back = pose6d_to_transform(&d.pose);
        assert_abs_diff_eq!(back.rotation(), t.rotation(), epsilon = 1e-5);
        assert!(!decompose(&RigidTransform::rot_y(1.0)).gimbal_locked);
    }

    #[test]
    fn euler_angles_in_half_open_interval() {
        let p = transform_to_6d(&RigidTransform::rot_z(PI));
        assert!(p.yaw() > -PI && p.yaw() <= PI);
        let p = transform_to_6d(&RigidTransform::rot_z(-PI));
        assert_abs_diff_eq!(p.yaw(), PI, epsilon = 1e-12);
    }

    fn static_frame() -> BodyPoseFrame {
        let joints = Joint::ALL
            .iter()
            .map(|j| RigidTransform::from_euler([0.1 * j.index() as f64, 0.0, 1.0], 0.0, 0.0, 0.05 * j.index() as f64))
            .collect();
        BodyPoseFrame::canonical(joints).unwrap()
    }

    #[test]
    fn body_frame_validation() {
        assert!(matches!(
            BodyPoseFrame::canonical(vec![RigidTransform::identity(); 22]),
            Err(PoseError::JointCount(22))
        ));
        let mut names = Joint::ALL.to_vec();
        names[1] = Joint::Head;
        assert!(matches!(
            BodyPoseFrame::with_names(vec![RigidTransform::identity(); 23], names),
            Err(PoseError::DuplicateJoint("head"))
        ));
        let f = static_frame();
        assert_ne!(f.head_index(), f.pelvis_index());
    }

    #[test]
    fn sequence_needs_two_frames() {
        assert!(matches!(
            PoseSequence::new(vec![static_frame()], 1.0 / 16.0),
            Err(PoseError::SequenceTooShort(1))
        ));
        assert!(PoseSequence::new(vec![static_frame(); 2], 0.0).is_err());
    }

    #[test]
    fn static_sequence_gives_zero_deltas() {
        let seq = PoseSequence::new(vec![static_frame(); 9], 1.0 / 16.0).unwrap();
        assert!(head_deltas(&seq).iter().flatten().all(|v| *v == 0.0));
        assert!(pelvis_deltas(&seq).iter().flatten().all(|v| *v == 0.0));
        assert_eq!(pelvis_deltas(&seq).len(), 8);
        assert!(cumulative_head_variant(&seq).iter().flatten().all(|v| *v == 0.0));
        let pj = per_joint_delta_variant(&seq);
        assert_eq!(pj.shape(), [8, 23, 6]);
        assert!(pj.as_slice().iter().all(|v| *v == 0.0));

        let p = assemble_control(&seq);
        assert_eq!(p.shape(), [8, 23, 6]);
        for m in 0..8 {
            assert!(p.row(m, ROW_HEAD).iter().chain(p.row(m, ROW_PELVIS)).all(|v| *v == 0.0));
            for r in 2..23 {
                assert_eq!(p.row(m, r), p.row(0, r));
            }
        }
    }

    fn moving_sequence(len: usize, step: f64) -> PoseSequence {
        let frames = (0..len)
            .map(|i| {
                let g = RigidTransform::from_translation(step * i as f64, 0.0, 0.0);
                static_frame().transformed(&g)
            })
            .collect();
        PoseSequence::new(frames, 1.0 / 16.0).unwrap()
    }

    #[test]
    fn constant_velocity_head_deltas() {
        let v = 1.2;
        let seq = moving_sequence(33, v / 16.0);
        let dh = head_deltas(&seq);
        assert_eq!(dh.len(), 32);
        for row in &dh {
            assert_abs_diff_eq!(&row[..], &[v / 16.0, 0.0, 0.0, 0.0, 0.0, 0.0][..], epsilon = 1e-12);
        }
        let cum = cumulative_head_variant(&seq);
        for (i, row) in cum.iter().enumerate() {
            let mag = (row[0].powi(2) + row[1].powi(2) + row[2].powi(2)).sqrt();
            assert_abs_diff_eq!(mag, (i + 1) as f64 * v / 16.0, epsilon = 1e-12);
        }
        assert_eq!(assemble_control(&seq).shape(), [32, 23, 6]);
    }

    #[test]
    fn pelvis_following_head_rigidly_is_conjugated() {
        // pelvis = head ∘ offset, so ΔR = H_i O O⁻¹ H_{i-1}⁻¹ = ΔH for this product order
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let offset = RigidTransform::from_euler([0.05, 0.0, -0.7], 0.0, 0.0, 0.3);
        let frames: Vec<_> = (0..9)
            .map(|_| {
                let head = random_transform(&mut rng);
                let mut joints = vec![RigidTransform::identity(); 23];
                joints[Joint::Head.index()] = head;
                joints[Joint::Pelvis.index()] = head.compose(&offset);
                BodyPoseFrame::canonical(joints).unwrap()
            })
            .collect();
        let seq = PoseSequence::new(frames, 0.1).unwrap();
        let dh = head_deltas(&seq);
        let dr = pelvis_deltas(&seq);
        for i in 0..8 {
            let h = pose6d_to_transform(&Pose6D::from_array(dh[i]));
            let r = pose6d_to_transform(&Pose6D::from_array(dr[i]));
            // oracle: conjugation through the fixed offset, built from raw matrices
            let hp = seq.frames()[i + 1].head().to_matrix4();
            let hq = seq.frames()[i].head().to_matrix4();
            let o = offset.to_matrix4();
            let expected = (hp * o) * (hq * o).try_inverse().unwrap();
            assert_abs_diff_eq!(r.to_matrix4(), expected, epsilon = 1e-9);
            assert_abs_diff_eq!(r.to_matrix4(), h.to_matrix4(), epsilon = 1e-9);
        }
    }

    #[test]
    fn pelvis_relative_rows() {
        let mut joints = vec![RigidTransform::from_euler([1.0, 2.0, 0.5], 0.0, 0.0, 0.4); 23];
        joints[Joint::L5.index()] = joints[Joint::Pelvis.index()];
        joints[Joint::LeftHand.index()] = RigidTransform::identity();
        let f = BodyPoseFrame::canonical(joints).unwrap();
        let rows = pelvis_relative_joints(&f);
        assert_eq!(rows.len(), 21);
        assert_eq!(rows[0], [0.0; 6]);
        let moved = f.transformed(&RigidTransform::from_translation(5.0, 5.0, 5.0));
        for (a, b) in rows.iter().zip(pelvis_relative_joints(&moved).iter()) {
            assert_abs_diff_eq!(&a[..], &b[..], epsilon = 1e-12);
        }
    }

    #[test]
    fn permuted_storage_gives_identical_control() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let frames: Vec<_> = (0..5)
            .map(|_| BodyPoseFrame::canonical((0..23).map(|_| random_transform(&mut rng)).collect()).unwrap())
            .collect();
        let seq = PoseSequence::new(frames.clone(), 0.0625).unwrap();
        let perm: Vec<usize> = (0..23).rev().collect();
        let permuted: Vec<_> = frames
            .iter()
            .map(|f| {
                let joints = perm.iter().map(|&k| f.joints()[k]).collect();
                let names = perm.iter().map(|&k| Joint::ALL[k]).collect();
                BodyPoseFrame::with_names(joints, names).unwrap()
            })
            .collect();
        let seq_p = PoseSequence::new(permuted, 0.0625).unwrap();
        assert_eq!(assemble_control(&seq), assemble_control(&seq_p));
        assert_eq!(per_joint_delta_variant(&seq), per_joint_delta_variant(&seq_p));
    }

    #[test]
    fn per_joint_head_row_matches_head_deltas() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let frames: Vec<_> = (0..9)
            .map(|_| BodyPoseFrame::canonical((0..23).map(|_| random_transform(&mut rng)).collect()).unwrap())
            .collect();
        let seq = PoseSequence::new(frames, 0.0625).unwrap();
        let pj = per_joint_delta_variant(&seq);
        for (m, row) in head_deltas(&seq).iter().enumerate() {
            assert_eq!(pj.row(m, Joint::Head.index()), &row[..]);
        }
    }

    #[test]
    fn jsonl_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let frames: Vec<_> = (0..4)
            .map(|_| BodyPoseFrame::canonical((0..23).map(|_| random_transform(&mut rng)).collect()).unwrap())
            .collect();
        let seq = PoseSequence::new(frames, 0.0625).unwrap();
        let text = write_pose_jsonl(&seq);
        assert_eq!(text.lines().count(), 4);
        assert_eq!(read_pose_jsonl(&text).unwrap(), seq);
    }

    #[test]
    fn jsonl_reports_line_numbers() {
        let err = read_pose_jsonl("{\"joints\": []").unwrap_err();
        assert!(matches!(err, PoseError::Parse { line: 1, .. }));
    }
}
