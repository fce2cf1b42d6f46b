//! Simplified articulated body model.
//!
//! A fixed 52-joint skeleton (22 body joints plus 15 per hand) posed by a
//! 159-dimensional pose vector.  The skeleton is described by a
//! [`BodyTemplate`]: per-joint rest offsets and parents, palmar contact
//! normals for the 30 finger joints, four foot support points, and a sparse
//! hand surface bound rigidly to the finger joints.
//!
//! Layout of the pose vector (all rotations are axis-angle, radians):
//!
//! | slice      | meaning                          |
//! |------------|----------------------------------|
//! | `0..3`     | global orientation (root)        |
//! | `3..66`    | 21 body joint rotations          |
//! | `66..111`  | 15 left-hand joint rotations     |
//! | `111..156` | 15 right-hand joint rotations    |
//! | `156..159` | root translation (metres)        |
//!
//! The world is z-up; the ground plane is `z = 0`.  In the rest pose the body
//! faces `+y` with arms extended along `x` (T pose), pelvis at the origin.

use crate::error::{Error, Result};
use crate::geometry::{self, convex_hull_2d, dist_to_polygon, PointCloud};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

/// Total number of skeleton joints.
pub const NUM_JOINTS: usize = 52;
/// Dimension of the full pose vector.
pub const POSE_DIM: usize = 159;
/// Number of finger joints considered for contact (15 per hand).
pub const NUM_HAND_JOINTS: usize = 30;
/// Template index of the first left-hand joint.
pub const LEFT_HAND_START: usize = 22;
/// Template index of the first right-hand joint.
pub const RIGHT_HAND_START: usize = 37;
/// Template index of the left wrist.
pub const LEFT_WRIST: usize = 20;
/// Template index of the right wrist.
pub const RIGHT_WRIST: usize = 21;

/// Which hand a joint or grasp refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Hand {
    Left,
    Right,
}

/// One skeleton joint: rest offset from its parent plus an optional palmar
/// contact normal (present only for the 30 finger joints, in the joint's
/// local frame).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JointSpec {
    pub name: String,
    /// Parent joint index; `-1` for the root.  Parents always precede
    /// children so a single forward sweep computes the kinematic chain.
    pub parent: i32,
    /// Offset from the parent joint in the parent's frame (metres).
    pub offset: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contact_normal: Option<[f64; 3]>,
}

/// A point rigidly attached to a joint (support points, hand surface).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttachedPoint {
    pub joint: usize,
    /// Offset from the joint in the joint's local frame (metres).
    pub offset: [f64; 3],
}

/// The skeleton description.  Loaded from a JSON asset; a built-in default is
/// compiled into the library.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BodyTemplate {
    pub joints: Vec<JointSpec>,
    /// Exactly four foot support points (left/right toe and heel).
    pub support_points: Vec<AttachedPoint>,
    /// Sparse hand surface, bound rigidly to finger joints.
    pub hand_surface: Vec<AttachedPoint>,
}

/// JSON text of the default template asset shipped with the crate.
pub const DEFAULT_TEMPLATE_JSON: &str = include_str!("../assets/body_template.json");

impl BodyTemplate {
    /// Loads the default template.  If the environment variable
    /// `HOI_FORGE_ASSETS` names a directory containing `body_template.json`,
    /// that file is used instead of the built-in asset.
    pub fn load_default() -> Result<Self> {
        if let Ok(dir) = std::env::var("HOI_FORGE_ASSETS") {
            let path = PathBuf::from(dir).join("body_template.json");
            if path.exists() {
                let text = std::fs::read_to_string(&path)?;
                return Self::from_json(&text);
            }
        }
        Self::from_json(DEFAULT_TEMPLATE_JSON)
    }

    /// Parses and validates a template from JSON text.
    pub fn from_json(text: &str) -> Result<Self> {
        let template: BodyTemplate = serde_json::from_str(text)?;
        template.validate()?;
        Ok(template)
    }

    /// Serialises the template to pretty-printed JSON.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    fn validate(&self) -> Result<()> {
        if self.joints.len() != NUM_JOINTS {
            return Err(Error::contract(format!(
                "template must have {} joints, found {}",
                NUM_JOINTS,
                self.joints.len()
            )));
        }
        for (i, joint) in self.joints.iter().enumerate() {
            if i == 0 {
                if joint.parent != -1 {
                    return Err(Error::contract("root joint must have parent -1"));
                }
            } else if joint.parent < 0 || joint.parent as usize >= i {
                return Err(Error::contract(format!(
                    "joint {} ({}) has parent {}; parents must precede children",
                    i, joint.name, joint.parent
                )));
            }
            if !joint.offset.iter().all(|v| v.is_finite()) {
                return Err(Error::contract(format!("joint {} offset is not finite", i)));
            }
            let is_hand = i >= LEFT_HAND_START;
            match joint.contact_normal {
                Some(n) => {
                    if !is_hand {
                        return Err(Error::contract(format!(
                            "body joint {} must not carry a contact normal",
                            i
                        )));
                    }
                    let len = geometry::norm3(n);
                    if (len - 1.0).abs() > 1e-9 {
                        return Err(Error::contract(format!(
                            "contact normal of joint {} is not unit length ({})",
                            i, len
                        )));
                    }
                }
                None => {
                    if is_hand {
                        return Err(Error::contract(format!(
                            "hand joint {} is missing its contact normal",
                            i
                        )));
                    }
                }
            }
        }
        if self.support_points.len() != 4 {
            return Err(Error::contract(format!(
                "template must have 4 support points, found {}",
                self.support_points.len()
            )));
        }
        for p in self.support_points.iter().chain(self.hand_surface.iter()) {
            if p.joint >= NUM_JOINTS {
                return Err(Error::contract(format!(
                    "attached point references joint {} out of range",
                    p.joint
                )));
            }
        }
        for p in &self.hand_surface {
            if p.joint < LEFT_HAND_START {
                return Err(Error::contract(
                    "hand surface vertices must attach to hand joints",
                ));
            }
        }
        Ok(())
    }
}

/// A full-body pose: 159 values as documented in the module header.
#[derive(Debug, Clone, PartialEq)]
pub struct HumanPose {
    data: Vec<f64>,
}

/// Offset of joint `j`'s axis-angle block inside the 159-value pose vector.
pub fn rotation_base(j: usize) -> usize {
    debug_assert!(j < NUM_JOINTS);
    match j {
        0 => 0,
        1..=21 => 3 + (j - 1) * 3,
        22..=36 => 66 + (j - LEFT_HAND_START) * 3,
        _ => 111 + (j - RIGHT_HAND_START) * 3,
    }
}

impl HumanPose {
    /// The identity pose: zero rotations, root at the origin.
    pub fn zero() -> Self {
        HumanPose {
            data: vec![0.0; POSE_DIM],
        }
    }

    /// Wraps a 159-dimensional vector.  All values must be finite.
    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        if data.len() != POSE_DIM {
            return Err(Error::contract(format!(
                "pose must have {} values, found {}",
                POSE_DIM,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::contract("pose contains non-finite values"));
        }
        Ok(HumanPose { data })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn global_orient(&self) -> &[f64] {
        &self.data[0..3]
    }

    pub fn body_pose(&self) -> &[f64] {
        &self.data[3..66]
    }

    pub fn left_hand_pose(&self) -> &[f64] {
        &self.data[66..111]
    }

    pub fn right_hand_pose(&self) -> &[f64] {
        &self.data[111..156]
    }

    pub fn translation(&self) -> [f64; 3] {
        [self.data[156], self.data[157], self.data[158]]
    }

    pub fn set_translation(&mut self, t: [f64; 3]) {
        self.data[156..159].copy_from_slice(&t);
    }

    pub fn set_global_orient(&mut self, v: [f64; 3]) {
        self.data[0..3].copy_from_slice(&v);
    }

    /// The local axis-angle rotation of template joint `j`.
    pub fn joint_rotation(&self, j: usize) -> [f64; 3] {
        let base = rotation_base(j);
        [self.data[base], self.data[base + 1], self.data[base + 2]]
    }

    /// Sets the local axis-angle rotation of template joint `j`.
    pub fn set_joint_rotation(&mut self, j: usize, v: [f64; 3]) {
        let base = match j {
            0 => 0,
            1..=21 => 3 + (j - 1) * 3,
            22..=36 => 66 + (j - LEFT_HAND_START) * 3,
            _ => 111 + (j - RIGHT_HAND_START) * 3,
        };
        self.data[base..base + 3].copy_from_slice(&v);
    }
}

/// World-space result of forward kinematics: one position and one rotation
/// matrix (row-major 3x3) per template joint.
#[derive(Debug, Clone)]
pub struct Skeleton {
    pub positions: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 9]>,
}

fn mat3_mul(a: &[f64; 9], b: &[f64; 9]) -> [f64; 9] {
    let mut out = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            let mut acc = 0.0;
            for k in 0..3 {
                acc += a[i * 3 + k] * b[k * 3 + j];
            }
            out[i * 3 + j] = acc;
        }
    }
    out
}

/// Applies a row-major 3x3 matrix to a vector.
pub fn mat3_apply(m: &[f64; 9], v: &[f64; 3]) -> [f64; 3] {
    [
        m[0] * v[0] + m[1] * v[1] + m[2] * v[2],
        m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
        m[6] * v[0] + m[7] * v[1] + m[8] * v[2],
    ]
}

/// Poses the skeleton.  The root sits at the pose translation with the global
/// orientation; every other joint is placed at
/// `parent position + parent world rotation * rest offset`, and world
/// rotations compose down the tree.
pub fn forward_kinematics(template: &BodyTemplate, pose: &HumanPose) -> Skeleton {
    let mut positions = vec![[0.0; 3]; NUM_JOINTS];
    let mut rotations = vec![[0.0; 9]; NUM_JOINTS];
    positions[0] = pose.translation();
    rotations[0] = crate::ad::tape::rodrigues_fwd(&pose.joint_rotation(0));
    for j in 1..NUM_JOINTS {
        let parent = template.joints[j].parent as usize;
        positions[j] = geometry::add3(
            positions[parent],
            mat3_apply(&rotations[parent], &template.joints[j].offset),
        );
        let local = crate::ad::tape::rodrigues_fwd(&pose.joint_rotation(j));
        rotations[j] = mat3_mul(&rotations[parent], &local);
    }
    Skeleton {
        positions,
        rotations,
    }
}

/// The 30 finger joints in canonical order with world contact normals.
#[derive(Debug, Clone)]
pub struct HandJoints {
    /// World positions, canonical order (see [`hand_joints`]).
    pub positions: Vec<[f64; 3]>,
    /// World palmar contact normals, unit length, same order.
    pub normals: Vec<[f64; 3]>,
}

/// Maps canonical hand-joint index (0..30) to the template joint index.
///
/// Canonical order: left hand then right; within a hand the fingers run
/// thumb, index, middle, ring, pinky, and each finger lists its three joints
/// distal to proximal.  Thumb joints therefore occupy canonical indices 0..3
/// (left) and 15..18 (right).
pub fn canonical_to_template(i: usize) -> usize {
    debug_assert!(i < NUM_HAND_JOINTS);
    let (start, local) = if i < 15 {
        (LEFT_HAND_START, i)
    } else {
        (RIGHT_HAND_START, i - 15)
    };
    let finger = local / 3;
    let along = local % 3; // 0 = distal, 2 = proximal
    start + finger * 3 + (2 - along)
}

/// Extracts the 30 finger joints (positions and world contact normals) from a
/// posed skeleton, in the canonical order of [`canonical_to_template`].
pub fn hand_joints(template: &BodyTemplate, skeleton: &Skeleton) -> HandJoints {
    let mut positions = Vec::with_capacity(NUM_HAND_JOINTS);
    let mut normals = Vec::with_capacity(NUM_HAND_JOINTS);
    for i in 0..NUM_HAND_JOINTS {
        let j = canonical_to_template(i);
        positions.push(skeleton.positions[j]);
        let local = template.joints[j]
            .contact_normal
            .expect("validated template has hand contact normals");
        normals.push(mat3_apply(&skeleton.rotations[j], &local));
    }
    HandJoints { positions, normals }
}

/// Canonical indices of one hand's joints (0..15 left, 15..30 right).
pub fn hand_range(hand: Hand) -> std::ops::Range<usize> {
    match hand {
        Hand::Left => 0..15,
        Hand::Right => 15..30,
    }
}

/// Whether a canonical hand-joint index is a thumb joint.
pub fn is_thumb(i: usize) -> bool {
    i < 3 || (15..18).contains(&i)
}

/// Support polygon of a posed body: convex hull of the four foot support
/// points projected to the ground plane, plus the hip (root) projection.
#[derive(Debug, Clone)]
pub struct SupportPolygon {
    /// Convex hull vertices in counter-clockwise order (xy, metres).
    pub polygon: Vec<[f64; 2]>,
    /// Projection of the root joint onto the ground plane.
    pub hip: [f64; 2],
    /// True when the support points are too collinear to bound an area.
    pub degenerate: bool,
}

impl SupportPolygon {
    /// Distance from the hip projection to the polygon; zero inside.
    /// Returns a contract violation when the polygon is degenerate.
    pub fn hip_distance(&self) -> Result<f64> {
        if self.degenerate {
            return Err(Error::contract(
                "support polygon is degenerate; balance distance undefined",
            ));
        }
        dist_to_polygon(self.hip, &self.polygon)
    }
}

/// Computes the support polygon for a posed skeleton.
pub fn support_polygon(template: &BodyTemplate, skeleton: &Skeleton) -> SupportPolygon {
    let mut points = Vec::with_capacity(template.support_points.len());
    for p in &template.support_points {
        let world = geometry::add3(
            skeleton.positions[p.joint],
            mat3_apply(&skeleton.rotations[p.joint], &p.offset),
        );
        points.push([world[0], world[1]]);
    }
    let hull = convex_hull_2d(&points);
    let degenerate = hull.len() < 3;
    SupportPolygon {
        polygon: hull,
        hip: {
            let root = skeleton.positions[0];
            [root[0], root[1]]
        },
        degenerate,
    }
}

/// Skins the sparse hand surface: each vertex follows its joint rigidly.
/// Normals point from the owning joint through the vertex.
pub fn hand_surface(template: &BodyTemplate, skeleton: &Skeleton) -> PointCloud {
    let mut points = Vec::with_capacity(template.hand_surface.len());
    let mut normals = Vec::with_capacity(template.hand_surface.len());
    for v in &template.hand_surface {
        let world = geometry::add3(
            skeleton.positions[v.joint],
            mat3_apply(&skeleton.rotations[v.joint], &v.offset),
        );
        points.push(world);
        let dir = geometry::sub3(world, skeleton.positions[v.joint]);
        let len = geometry::norm3(dir);
        normals.push(if len > 1e-12 {
            geometry::scale3(dir, 1.0 / len)
        } else {
            [0.0, 0.0, 1.0]
        });
    }
    PointCloud::with_normals(points, normals)
}

/// Skins only one hand's surface vertices.
pub fn hand_surface_one(template: &BodyTemplate, skeleton: &Skeleton, hand: Hand) -> PointCloud {
    let range = match hand {
        Hand::Left => LEFT_HAND_START..RIGHT_HAND_START,
        Hand::Right => RIGHT_HAND_START..NUM_JOINTS,
    };
    let mut points = Vec::new();
    let mut normals = Vec::new();
    for v in &template.hand_surface {
        if !range.contains(&v.joint) {
            continue;
        }
        let world = geometry::add3(
            skeleton.positions[v.joint],
            mat3_apply(&skeleton.rotations[v.joint], &v.offset),
        );
        let dir = geometry::sub3(world, skeleton.positions[v.joint]);
        let len = geometry::norm3(dir);
        points.push(world);
        normals.push(if len > 1e-12 {
            geometry::scale3(dir, 1.0 / len)
        } else {
            [0.0, 0.0, 1.0]
        });
    }
    PointCloud::with_normals(points, normals)
}

/// Builds the default template programmatically.  The shipped JSON asset is
/// generated from this function; a unit test keeps the two in sync.
pub fn build_default_template() -> BodyTemplate {
    // Body joints, offsets in the parent frame.  T pose, facing +y, z up.
    let body: [(&str, i32, [f64; 3]); 22] = [
        ("pelvis", -1, [0.0, 0.0, 0.0]),
        ("left_hip", 0, [0.09, 0.0, -0.06]),
        ("right_hip", 0, [-0.09, 0.0, -0.06]),
        ("spine1", 0, [0.0, 0.0, 0.10]),
        ("left_knee", 1, [0.0, 0.0, -0.40]),
        ("right_knee", 2, [0.0, 0.0, -0.40]),
        ("spine2", 3, [0.0, 0.0, 0.12]),
        ("left_ankle", 4, [0.0, 0.0, -0.42]),
        ("right_ankle", 5, [0.0, 0.0, -0.42]),
        ("spine3", 6, [0.0, 0.0, 0.12]),
        ("left_foot", 7, [0.0, 0.13, -0.05]),
        ("right_foot", 8, [0.0, 0.13, -0.05]),
        ("neck", 9, [0.0, 0.0, 0.14]),
        ("left_collar", 9, [0.06, 0.0, 0.10]),
        ("right_collar", 9, [-0.06, 0.0, 0.10]),
        ("head", 12, [0.0, 0.0, 0.12]),
        ("left_shoulder", 13, [0.10, 0.0, 0.02]),
        ("right_shoulder", 14, [-0.10, 0.0, 0.02]),
        ("left_elbow", 16, [0.26, 0.0, 0.0]),
        ("right_elbow", 17, [-0.26, 0.0, 0.0]),
        ("left_wrist", 18, [0.25, 0.0, 0.0]),
        ("right_wrist", 19, [-0.25, 0.0, 0.0]),
    ];
    let mut joints: Vec<JointSpec> = body
        .iter()
        .map(|(name, parent, offset)| JointSpec {
            name: (*name).to_string(),
            parent: *parent,
            offset: *offset,
            contact_normal: None,
        })
        .collect();

    // Finger chains: (finger name, three offsets proximal -> distal).  The
    // first offset hangs off the wrist.  Left hand; the right hand mirrors x.
    let fingers: [(&str, [[f64; 3]; 3]); 5] = [
        (
            "thumb",
            [
                [0.025, 0.025, -0.010],
                [0.030, 0.015, -0.005],
                [0.025, 0.010, 0.0],
            ],
        ),
        (
            "index",
            [[0.090, 0.025, 0.0], [0.035, 0.0, 0.0], [0.025, 0.0, 0.0]],
        ),
        (
            "middle",
            [[0.095, 0.008, 0.0], [0.040, 0.0, 0.0], [0.027, 0.0, 0.0]],
        ),
        (
            "ring",
            [[0.090, -0.010, 0.0], [0.035, 0.0, 0.0], [0.025, 0.0, 0.0]],
        ),
        (
            "pinky",
            [[0.080, -0.028, 0.0], [0.030, 0.0, 0.0], [0.020, 0.0, 0.0]],
        ),
    ];
    // Palms face -z in the rest pose, so every palmar normal is -z locally.
    let palm_normal = [0.0, 0.0, -1.0];
    for (side, wrist, sign) in [("left", LEFT_WRIST as i32, 1.0), ("right", RIGHT_WRIST as i32, -1.0)] {
        for (finger, offsets) in &fingers {
            for (k, offset) in offsets.iter().enumerate() {
                let parent = if k == 0 {
                    wrist
                } else {
                    joints.len() as i32 - 1
                };
                joints.push(JointSpec {
                    name: format!("{}_{}{}", side, finger, k + 1),
                    parent,
                    offset: [sign * offset[0], offset[1], offset[2]],
                    contact_normal: Some(palm_normal),
                });
            }
        }
    }

    // Toe and heel pads for each foot.  Toes attach to the foot joints, heels
    // to the ankles; offsets drop the pads to the sole.
    let support_points = vec![
        AttachedPoint {
            joint: 10,
            offset: [0.0, 0.05, -0.02],
        },
        AttachedPoint {
            joint: 11,
            offset: [0.0, 0.05, -0.02],
        },
        AttachedPoint {
            joint: 7,
            offset: [0.0, -0.05, -0.07],
        },
        AttachedPoint {
            joint: 8,
            offset: [0.0, -0.05, -0.07],
        },
    ];

    // Sparse hand surface: a 6-point octahedron of skin around every finger
    // joint, radius 8 mm.
    let mut hand_surface = Vec::new();
    let r = 0.008;
    let octa = [
        [r, 0.0, 0.0],
        [-r, 0.0, 0.0],
        [0.0, r, 0.0],
        [0.0, -r, 0.0],
        [0.0, 0.0, r],
        [0.0, 0.0, -r],
    ];
    for joint in LEFT_HAND_START..NUM_JOINTS {
        for offset in &octa {
            hand_surface.push(AttachedPoint {
                joint,
                offset: *offset,
            });
        }
    }

    BodyTemplate {
        joints,
        support_points,
        hand_surface,
    }
}
