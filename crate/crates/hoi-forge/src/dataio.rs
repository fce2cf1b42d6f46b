//! Dataset definition and generation.
//!
//! The synthetic scene generator is the ground-truth oracle for the whole
//! pipeline: it builds primitive objects, poses the template body so that a
//! grasp holds *by construction* (thumb and index tips placed exactly on the
//! object surface by solving a chord equation per primitive), and emits the
//! pose, contact truth, and a template prompt.  The rest of the module
//! covers the prompt template, hand-type annotation, the stable-pose
//! filter, interpenetration correction, and the binary `HOID` dataset
//! format.

use std::io::{Read as _, Write as _};
use std::path::Path;

use crate::adapt::SceneObject;
use crate::body::{self, BodyTemplate, Hand, HumanPose};
use crate::contact::{
    extract_contact_truth, stable_grasp_check, ContactVector, HandIndicator, CONTACT_DIM,
    DEFAULT_D_CONTACT,
};
use crate::error::{Error, Result};
use crate::geometry::mesh::box_mesh;
use crate::geometry::{
    add3, dist3, farthest_point_sample, norm3, scale3, sub3, unit3, KdTree, PointCloud,
    RigidPose6, TriMesh, Vec3,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Actions of the synthetic dataset, in label order.
pub const ACTIONS: [&str; 4] = ["lift", "pass", "place", "inspect"];

/// Clouds are resampled to exactly this many points on ingest.
pub const CLOUD_POINTS: usize = 4000;

/// Hand-type annotation threshold (5 mm).
pub const HAND_TYPE_THRESHOLD: f64 = 0.005;

/// Minimum lift above rest height for a stable record (5 mm).
pub const MIN_LIFT: f64 = 0.005;

/// The numeric label of an action, if it is one of [`ACTIONS`].
pub fn action_id(action: &str) -> Option<u32> {
    ACTIONS.iter().position(|a| *a == action).map(|i| i as u32)
}

// ---- prompt template ----

/// A prompt decomposed against the `{action} {object} with {hand type}`
/// template.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedPrompt {
    pub action: String,
    pub object: String,
    pub hands: HandIndicator,
}

fn hand_phrase(ind: HandIndicator) -> &'static str {
    match (ind.left, ind.right) {
        (true, true) => "both hands",
        (true, false) => "left hand",
        (false, true) => "right hand",
        (false, false) => unreachable!("indicator names no hand"),
    }
}

/// Renders the annotation template.
pub fn format_prompt(action: &str, object: &str, hands: HandIndicator) -> String {
    format!("{} {} with {}", action, object, hand_phrase(hands))
}

/// Parses a prompt against the template.  The action may be any single
/// token (synonym-adjusted prompts must still parse), the object is one or
/// more tokens, and the hand phrase must be exactly `left hand`,
/// `right hand`, or `both hands`.
pub fn parse_prompt(prompt: &str) -> Result<ParsedPrompt> {
    let trimmed = prompt.trim();
    let (head, hands_text) = trimmed.rsplit_once(" with ").ok_or_else(|| {
        Error::annotation(format!("prompt '{}' is missing ' with '", prompt))
    })?;
    let hands = match hands_text.trim() {
        "left hand" => HandIndicator { left: true, right: false },
        "right hand" => HandIndicator { left: false, right: true },
        "both hands" => HandIndicator::both(),
        other => {
            return Err(Error::annotation(format!(
                "prompt hand phrase '{}' is not left hand / right hand / both hands",
                other
            )))
        }
    };
    let mut tokens = head.split_whitespace();
    let action = tokens.next().ok_or_else(|| {
        Error::annotation(format!("prompt '{}' has no action token", prompt))
    })?;
    let object: Vec<&str> = tokens.collect();
    if object.is_empty() {
        return Err(Error::annotation(format!(
            "prompt '{}' has no object tokens",
            prompt
        )));
    }
    Ok(ParsedPrompt {
        action: action.to_string(),
        object: object.join(" "),
        hands,
    })
}

// ---- records ----

/// One training / evaluation sample.
#[derive(Debug, Clone, PartialEq)]
pub struct HOIRecord {
    pub prompt: String,
    pub action_id: u32,
    pub human: HumanPose,
    pub object_name: String,
    pub object_pose: RigidPose6,
    /// Ground-truth 30-anchor contact block (canonical-frame positions).
    pub contact: ContactVector,
    /// Height of the object's canonical origin when resting on the desk.
    pub rest_height: f64,
}

impl HOIRecord {
    /// Checks the record's own invariants against a library.
    pub fn validate(&self, library: &ObjectLibrary) -> Result<()> {
        parse_prompt(&self.prompt)?;
        if library.get(&self.object_name).is_none() {
            return Err(Error::contract(format!(
                "record references unknown object '{}'",
                self.object_name
            )));
        }
        if !self.rest_height.is_finite() {
            return Err(Error::contract("record rest height must be finite"));
        }
        Ok(())
    }
}

// ---- primitive meshes ----

/// A closed cylinder of the given radius and full height, centered at the
/// origin with its axis along z.
pub fn cylinder_mesh(radius: f64, height: f64, segments: usize) -> TriMesh {
    assert!(segments >= 3);
    let h = height / 2.0;
    let mut vertices = Vec::with_capacity(2 * segments + 2);
    for ring in [-h, h] {
        for s in 0..segments {
            let a = std::f64::consts::TAU * s as f64 / segments as f64;
            vertices.push([radius * a.cos(), radius * a.sin(), ring]);
        }
    }
    let bottom_center = vertices.len();
    vertices.push([0.0, 0.0, -h]);
    let top_center = vertices.len();
    vertices.push([0.0, 0.0, h]);

    let mut faces = Vec::new();
    for s in 0..segments {
        let n = (s + 1) % segments;
        let (b0, b1) = (s, n);
        let (t0, t1) = (segments + s, segments + n);
        // outward side quad
        faces.push([b0, b1, t1]);
        faces.push([b0, t1, t0]);
        // caps: bottom winds downward, top upward
        faces.push([bottom_center, b1, b0]);
        faces.push([top_center, t0, t1]);
    }
    TriMesh::new(vertices, faces).expect("cylinder mesh")
}

/// A UV sphere of the given radius centered at the origin.
pub fn sphere_mesh(radius: f64, rings: usize, segments: usize) -> TriMesh {
    assert!(rings >= 2 && segments >= 3);
    let mut vertices = vec![[0.0, 0.0, -radius]];
    for r in 1..rings {
        let polar = std::f64::consts::PI * r as f64 / rings as f64 - std::f64::consts::FRAC_PI_2;
        let (z, rad) = (radius * polar.sin(), radius * polar.cos());
        for s in 0..segments {
            let a = std::f64::consts::TAU * s as f64 / segments as f64;
            vertices.push([rad * a.cos(), rad * a.sin(), z]);
        }
    }
    let top = vertices.len();
    vertices.push([0.0, 0.0, radius]);

    let ring_base = |r: usize| 1 + (r - 1) * segments;
    let mut faces = Vec::new();
    for s in 0..segments {
        let n = (s + 1) % segments;
        faces.push([0, ring_base(1) + n, ring_base(1) + s]);
        faces.push([top, ring_base(rings - 1) + s, ring_base(rings - 1) + n]);
    }
    for r in 1..rings - 1 {
        for s in 0..segments {
            let n = (s + 1) % segments;
            let (a0, a1) = (ring_base(r) + s, ring_base(r) + n);
            let (b0, b1) = (ring_base(r + 1) + s, ring_base(r + 1) + n);
            faces.push([a0, a1, b1]);
            faces.push([a0, b1, b0]);
        }
    }
    TriMesh::new(vertices, faces).expect("sphere mesh")
}

// A closed rectangular-section tube swept along a circular arc in the xz
// plane; the mug handle.  Ends are capped, so the tube is watertight on its
// own and sits fully outside the mug body (1 mm clearance).
fn handle_mesh(arc_center_x: f64, arc_radius: f64, half_section: f64, sweep: f64) -> TriMesh {
    let steps = 12;
    let mut vertices: Vec<Vec3> = Vec::new();
    for i in 0..=steps {
        let t = -sweep + 2.0 * sweep * i as f64 / steps as f64;
        let er = [t.cos(), 0.0, t.sin()];
        let p = [arc_center_x + arc_radius * er[0], 0.0, arc_radius * er[2]];
        // cross-section corners in cyclic order
        for (sr, sy) in [(1.0, 1.0), (1.0, -1.0), (-1.0, -1.0), (-1.0, 1.0)] {
            vertices.push(add3(
                p,
                add3(
                    scale3(er, sr * half_section),
                    [0.0, sy * half_section, 0.0],
                ),
            ));
        }
    }
    let mut faces = Vec::new();
    for i in 0..steps {
        let a = 4 * i;
        let b = 4 * (i + 1);
        for k in 0..4 {
            let kn = (k + 1) % 4;
            faces.push([a + k, b + k, b + kn]);
            faces.push([a + k, b + kn, a + kn]);
        }
    }
    // end caps
    faces.push([0, 1, 2]);
    faces.push([0, 2, 3]);
    let l = 4 * steps;
    faces.push([l, l + 2, l + 1]);
    faces.push([l, l + 3, l + 2]);
    let mut mesh = TriMesh::new(vertices, faces).expect("handle mesh");
    if mesh.signed_volume() < 0.0 {
        for f in &mut mesh.faces {
            f.swap(1, 2);
        }
    }
    mesh
}

fn merge_meshes(a: TriMesh, b: TriMesh) -> TriMesh {
    let offset = a.vertices.len();
    let mut vertices = a.vertices;
    vertices.extend(b.vertices);
    let mut faces = a.faces;
    faces.extend(b.faces.iter().map(|f| [f[0] + offset, f[1] + offset, f[2] + offset]));
    TriMesh::new(vertices, faces).expect("merged mesh")
}

// ---- object kinds ----

/// The procedural object catalogue.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectKind {
    Box,
    Cylinder,
    Sphere,
    Mug,
}

impl ObjectKind {
    pub fn all() -> [ObjectKind; 4] {
        [
            ObjectKind::Box,
            ObjectKind::Cylinder,
            ObjectKind::Sphere,
            ObjectKind::Mug,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            ObjectKind::Box => "box",
            ObjectKind::Cylinder => "cylinder",
            ObjectKind::Sphere => "sphere",
            ObjectKind::Mug => "mug",
        }
    }

    pub fn from_name(name: &str) -> Option<ObjectKind> {
        ObjectKind::all().into_iter().find(|k| k.name() == name)
    }
}

// Canonical dimensions (meters).  Sized so a template thumb-index gap of
// ~6-9 cm admits a chord solution on each primitive.
const BOX_HALF: [f64; 3] = [0.045, 0.045, 0.05];
const CYL_RADIUS: f64 = 0.045;
const CYL_HEIGHT: f64 = 0.12;
const SPHERE_RADIUS: f64 = 0.045;
const MUG_RADIUS: f64 = 0.042;
const MUG_HEIGHT: f64 = 0.11;

fn kind_mesh(kind: ObjectKind) -> TriMesh {
    match kind {
        ObjectKind::Box => box_mesh(
            [-BOX_HALF[0], -BOX_HALF[1], -BOX_HALF[2]],
            [BOX_HALF[0], BOX_HALF[1], BOX_HALF[2]],
        ),
        ObjectKind::Cylinder => cylinder_mesh(CYL_RADIUS, CYL_HEIGHT, 48),
        ObjectKind::Sphere => sphere_mesh(SPHERE_RADIUS, 16, 32),
        ObjectKind::Mug => {
            let body = cylinder_mesh(MUG_RADIUS, MUG_HEIGHT, 48);
            // arc ends at Ax − 0.42ρ; keep the tube ≥ 1 mm off the body wall
            let arc_radius = 0.025;
            let half_section = 0.004;
            let sweep = 115.0_f64.to_radians();
            let arc_center_x =
                MUG_RADIUS + (-sweep.cos()) * arc_radius + half_section + 0.001;
            merge_meshes(
                body,
                handle_mesh(arc_center_x, arc_radius, half_section, sweep),
            )
        }
    }
}

// Usual-contact predicate in the canonical frame, per kind.
fn kind_mask(kind: ObjectKind, p: Vec3) -> bool {
    match kind {
        ObjectKind::Box => {
            let on_side = p[0].abs() >= 0.98 * BOX_HALF[0] || p[1].abs() >= 0.98 * BOX_HALF[1];
            on_side && p[2].abs() <= 0.85 * BOX_HALF[2]
        }
        ObjectKind::Cylinder => {
            let rad = (p[0] * p[0] + p[1] * p[1]).sqrt();
            rad >= 0.98 * CYL_RADIUS && p[2].abs() <= 0.85 * CYL_HEIGHT / 2.0
        }
        ObjectKind::Sphere => p[2].abs() <= 0.85 * SPHERE_RADIUS,
        ObjectKind::Mug => {
            let rad = (p[0] * p[0] + p[1] * p[1]).sqrt();
            let barrel = rad >= 0.98 * MUG_RADIUS && p[2].abs() <= 0.85 * MUG_HEIGHT / 2.0;
            let handle = rad > MUG_RADIUS + 5e-4;
            barrel || handle
        }
    }
}

fn rest_height(kind: ObjectKind) -> f64 {
    match kind {
        ObjectKind::Box => BOX_HALF[2],
        ObjectKind::Cylinder => CYL_HEIGHT / 2.0,
        ObjectKind::Sphere => SPHERE_RADIUS,
        ObjectKind::Mug => MUG_HEIGHT / 2.0,
    }
}

/// Area-weighted surface sampling; each point carries its face normal.
pub fn sample_surface(mesh: &TriMesh, count: usize, rng: &mut ChaCha8Rng) -> PointCloud {
    let mut cumulative = Vec::with_capacity(mesh.faces.len());
    let mut total = 0.0;
    for f in 0..mesh.faces.len() {
        total += mesh.face_area(f);
        cumulative.push(total);
    }
    let mut points = Vec::with_capacity(count);
    let mut normals = Vec::with_capacity(count);
    for _ in 0..count {
        let pick = rng.random_range(0.0..total);
        let f = cumulative.partition_point(|&c| c < pick).min(mesh.faces.len() - 1);
        let [ia, ib, ic] = mesh.faces[f];
        let (a, b, c) = (mesh.vertices[ia], mesh.vertices[ib], mesh.vertices[ic]);
        // uniform barycentric via the sqrt trick
        let r1 = rng.random_range(0.0..1.0_f64).sqrt();
        let r2 = rng.random_range(0.0..1.0_f64);
        let w = (1.0 - r1, r1 * (1.0 - r2), r1 * r2);
        points.push([
            w.0 * a[0] + w.1 * b[0] + w.2 * c[0],
            w.0 * a[1] + w.1 * b[1] + w.2 * c[1],
            w.0 * a[2] + w.1 * b[2] + w.2 * c[2],
        ]);
        normals.push(mesh.face_normal(f));
    }
    PointCloud::with_normals(points, normals)
}

// ---- object library ----

/// A named object plus its rest height.
#[derive(Debug, Clone, PartialEq)]
pub struct LibraryEntry {
    pub object: SceneObject,
    pub rest_height: f64,
}

/// Named scene objects with exactly [`CLOUD_POINTS`]-point clouds.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObjectLibrary {
    entries: Vec<LibraryEntry>,
}

impl ObjectLibrary {
    /// The four-procedural-object library.  Fully deterministic: clouds are
    /// oversampled 2x from each mesh and thinned by farthest-point
    /// sampling, so coverage gaps stay well under the annotation threshold.
    pub fn standard() -> Result<Self> {
        let mut lib = ObjectLibrary::default();
        for (i, kind) in ObjectKind::all().into_iter().enumerate() {
            let mesh = kind_mesh(kind);
            let mut rng = crate::rng::rng_for(0xD0, "library", i as u64);
            let dense = sample_surface(&mesh, 2 * CLOUD_POINTS, &mut rng);
            let keep = farthest_point_sample(&dense.points, CLOUD_POINTS)?;
            let points: Vec<Vec3> = keep.iter().map(|&i| dense.points[i]).collect();
            let normals: Vec<Vec3> = {
                let dn = dense.normals.as_ref().expect("sampled normals");
                keep.iter().map(|&i| dn[i]).collect()
            };
            let mask: Vec<bool> = points.iter().map(|&p| kind_mask(kind, p)).collect();
            let object = SceneObject::new(
                kind.name(),
                PointCloud::with_normals(points, normals),
                mesh,
                mask,
            )?;
            lib.insert(object, rest_height(kind))?;
        }
        Ok(lib)
    }

    /// Adds an object, resampling its cloud to [`CLOUD_POINTS`] if needed.
    /// Resampling draws fresh surface points from the mesh and transfers
    /// the mask from the nearest original cloud point.
    pub fn insert(&mut self, object: SceneObject, rest_height: f64) -> Result<()> {
        if self.get(&object.name).is_some() {
            return Err(Error::contract(format!(
                "library already holds an object named '{}'",
                object.name
            )));
        }
        object.validate()?;
        let object = if object.cloud.len() == CLOUD_POINTS {
            object
        } else {
            let mut rng = crate::rng::rng_for(0xD0, "resample", fnv_name(&object.name));
            let dense = sample_surface(&object.mesh, 2 * CLOUD_POINTS, &mut rng);
            let keep = farthest_point_sample(&dense.points, CLOUD_POINTS)?;
            let points: Vec<Vec3> = keep.iter().map(|&i| dense.points[i]).collect();
            let normals: Vec<Vec3> = {
                let dn = dense.normals.as_ref().expect("sampled normals");
                keep.iter().map(|&i| dn[i]).collect()
            };
            let tree = KdTree::build(&object.cloud.points);
            let mask: Vec<bool> = points
                .iter()
                .map(|&p| object.contact_mask[tree.nearest(p).0])
                .collect();
            SceneObject::new(
                object.name.clone(),
                PointCloud::with_normals(points, normals),
                object.mesh.clone(),
                mask,
            )?
        };
        self.entries.push(LibraryEntry {
            object,
            rest_height,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&LibraryEntry> {
        self.entries.iter().find(|e| e.object.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.object.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[LibraryEntry] {
        &self.entries
    }

    /// Writes `manifest.txt` plus per-object mesh (OBJ), cloud (text
    /// `x y z nx ny nz` rows), and mask (one `0`/`1` character per point)
    /// files into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        for e in &self.entries {
            let name = &e.object.name;
            let mesh_file = format!("{}.obj", name);
            let cloud_file = format!("{}.cloud.txt", name);
            let mask_file = format!("{}.mask.txt", name);
            e.object.mesh.write_obj(&dir.join(&mesh_file))?;
            let mut cloud = String::new();
            let normals = e.object.cloud.normals.as_ref();
            for (i, p) in e.object.cloud.points.iter().enumerate() {
                let n = normals.map(|ns| ns[i]).unwrap_or([0.0, 0.0, 1.0]);
                cloud.push_str(&format!(
                    "{} {} {} {} {} {}\n",
                    p[0], p[1], p[2], n[0], n[1], n[2]
                ));
            }
            std::fs::write(dir.join(&cloud_file), cloud)?;
            let mask: String = e
                .object
                .contact_mask
                .iter()
                .map(|&m| if m { '1' } else { '0' })
                .collect();
            std::fs::write(dir.join(&mask_file), mask)?;
            manifest.push_str(&format!(
                "{} {} {} {} {}\n",
                name, e.rest_height, mesh_file, cloud_file, mask_file
            ));
        }
        std::fs::write(dir.join("manifest.txt"), manifest)?;
        Ok(())
    }

    /// Loads a library written by [`ObjectLibrary::save`].
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = std::fs::read_to_string(dir.join("manifest.txt"))?;
        let mut lib = ObjectLibrary::default();
        for (ln, line) in manifest.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 5 {
                return Err(Error::annotation(format!(
                    "manifest line {}: expected 5 fields, found {}",
                    ln + 1,
                    parts.len()
                )));
            }
            let rest: f64 = parts[1].parse().map_err(|_| {
                Error::annotation(format!("manifest line {}: bad rest height", ln + 1))
            })?;
            let mesh = TriMesh::read_obj(&dir.join(parts[2]))?;
            let cloud_text = std::fs::read_to_string(dir.join(parts[3]))?;
            let mut points = Vec::new();
            let mut normals = Vec::new();
            for row in cloud_text.lines() {
                let vals: Vec<f64> = row
                    .split_whitespace()
                    .map(|v| v.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| {
                        Error::annotation(format!("bad cloud row in {}", parts[3]))
                    })?;
                if vals.len() != 6 {
                    return Err(Error::annotation(format!(
                        "cloud row in {} has {} values, expected 6",
                        parts[3],
                        vals.len()
                    )));
                }
                points.push([vals[0], vals[1], vals[2]]);
                normals.push([vals[3], vals[4], vals[5]]);
            }
            let mask_text = std::fs::read_to_string(dir.join(parts[4]))?;
            let mask: Vec<bool> = mask_text
                .trim()
                .chars()
                .map(|c| match c {
                    '1' => Ok(true),
                    '0' => Ok(false),
                    other => Err(Error::annotation(format!(
                        "mask file {} has unexpected character '{}'",
                        parts[4], other
                    ))),
                })
                .collect::<Result<_>>()?;
            let object = SceneObject::new(
                parts[0],
                PointCloud::with_normals(points, normals),
                mesh,
                mask,
            )?;
            lib.insert(object, rest)?;
        }
        Ok(lib)
    }
}

fn fnv_name(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in name.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

// ---- annotation ----

/// Decides which hands participate: a hand qualifies when any of its 15
/// joints is within `threshold` of the posed object surface.  Neither hand
/// within threshold is an annotation error.
pub fn annotate_hand_type(
    template: &BodyTemplate,
    human: &HumanPose,
    object_cloud: &PointCloud,
    object_pose: &RigidPose6,
    threshold: f64,
) -> Result<HandIndicator> {
    if object_cloud.points.is_empty() {
        return Err(Error::contract("object cloud is empty"));
    }
    let skel = body::forward_kinematics(template, human);
    let joints = body::hand_joints(template, &skel);
    let inv = object_pose.inverse();
    let tree = KdTree::build(&object_cloud.points);
    let hand_min = |hand: Hand| -> f64 {
        body::hand_range(hand)
            .map(|i| tree.nearest(inv.apply(joints.positions[i])).1)
            .fold(f64::INFINITY, f64::min)
    };
    let indicator = HandIndicator {
        left: hand_min(Hand::Left) < threshold,
        right: hand_min(Hand::Right) < threshold,
    };
    if !indicator.left && !indicator.right {
        return Err(Error::annotation(
            "neither hand is within the annotation threshold of the object",
        ));
    }
    Ok(indicator)
}

// ---- the generator ----

// Chord solution: two canonical-surface points p1, p2 with p2 - p1 = d.
// Returns None when the tip gap cannot be realized on the primitive.
fn solve_chord(kind: ObjectKind, d: Vec3) -> Option<(Vec3, Vec3)> {
    let horizontal = [d[0], d[1], 0.0];
    let g_xy = norm3(horizontal);
    match kind {
        ObjectKind::Sphere => {
            let r = SPHERE_RADIUS;
            let g = norm3(d);
            if g < 1e-6 || g > 1.9 * r {
                return None;
            }
            // chord midpoint offset, kept horizontal so targets straddle
            // the equatorial band
            let v = unit3(crate::geometry::cross3(d, [0.0, 0.0, 1.0]))
                .or_else(|| unit3(crate::geometry::cross3(d, [1.0, 0.0, 0.0])))?;
            let h = (r * r - g * g / 4.0).sqrt();
            let mid = scale3(v, h);
            Some((sub3(mid, scale3(d, 0.5)), add3(mid, scale3(d, 0.5))))
        }
        ObjectKind::Cylinder | ObjectKind::Mug => {
            let (r, hh) = match kind {
                ObjectKind::Cylinder => (CYL_RADIUS, CYL_HEIGHT / 2.0),
                _ => (MUG_RADIUS, MUG_HEIGHT / 2.0),
            };
            if g_xy < 1e-6 || g_xy > 1.9 * r || d[2].abs() / 2.0 > 0.8 * hh {
                return None;
            }
            let v = unit3(crate::geometry::cross3(horizontal, [0.0, 0.0, 1.0]))?;
            let h = (r * r - g_xy * g_xy / 4.0).sqrt();
            let mid = scale3(v, h);
            let p1 = add3(sub3(mid, scale3(horizontal, 0.5)), [0.0, 0.0, -d[2] / 2.0]);
            let p2 = add3(add3(mid, scale3(horizontal, 0.5)), [0.0, 0.0, d[2] / 2.0]);
            Some((p1, p2))
        }
        ObjectKind::Box => {
            // adjacent +x / +y faces; the caller yaws the box so the
            // horizontal gap points at 135 degrees in the object frame
            let (a, b, c) = (BOX_HALF[0], BOX_HALF[1], BOX_HALF[2]);
            let s = g_xy / std::f64::consts::SQRT_2;
            if s < 0.1 * a || s > 1.9 * a || s < 0.1 * b || s > 1.9 * b {
                return None;
            }
            if d[2].abs() / 2.0 > 0.8 * c {
                return None;
            }
            let p1 = [a, b - s, -d[2] / 2.0];
            let p2 = [a - s, b, d[2] / 2.0];
            if p1[1].abs() > 0.8 * b || p2[0].abs() > 0.8 * a {
                return None;
            }
            Some((p1, p2))
        }
    }
}

fn yaw_rotation(yaw: f64) -> [f64; 9] {
    let (s, c) = yaw.sin_cos();
    [c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0]
}

fn mat3_apply(m: &[f64; 9], v: Vec3) -> Vec3 {
    [
        m[0] * v[0] + m[1] * v[1] + m[2] * v[2],
        m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
        m[6] * v[0] + m[7] * v[1] + m[8] * v[2],
    ]
}

/// Body-dim offset applied per action (radians); well above the ±0.08
/// joint noise so the coupling is learnable.
pub const ACTION_SIGNATURE: f64 = 0.5;

/// Each action bends a distinct pair of body joints by a fixed offset, so
/// poses carry a learnable action signature: downstream classifiers (and
/// text-conditioned generators) would otherwise face label-independent
/// poses and a hard 3/4 top-3 ceiling.
pub fn apply_action_signature(pose: &mut HumanPose, action: usize) {
    assert!(action < ACTIONS.len());
    let s = pose.as_mut_slice();
    s[6 + 3 * action] += ACTION_SIGNATURE;
    s[24 + 3 * action] -= ACTION_SIGNATURE;
}

/// Builds one scene with a grasp that holds by construction: the chosen
/// hand's thumb and index distal joints are placed exactly on the object
/// surface via a per-primitive chord solution, so the contact, lift, and
/// stable-grasp criteria all pass.  Configurations whose tip gap admits no
/// chord are resampled, up to 100 attempts.
pub fn generate_synthetic_scene(
    template: &BodyTemplate,
    library: &ObjectLibrary,
    kind: ObjectKind,
    rng: &mut ChaCha8Rng,
) -> Result<HOIRecord> {
    let entry = library.get(kind.name()).ok_or_else(|| {
        Error::contract(format!("library is missing object '{}'", kind.name()))
    })?;
    for _attempt in 0..100 {
        // sample an action first: it shapes the body pose
        let action_idx = rng.random_range(0..ACTIONS.len());
        let action = ACTIONS[action_idx];

        // sample a body: upright yaw, mild joint noise, standing height
        let mut pose = HumanPose::zero();
        let body_yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        pose.set_global_orient([0.0, 0.0, body_yaw]);
        for v in pose.as_mut_slice()[3..66].iter_mut() {
            *v = rng.random_range(-0.08..0.08);
        }
        for v in pose.as_mut_slice()[66..156].iter_mut() {
            *v = rng.random_range(-0.08..0.08);
        }
        apply_action_signature(&mut pose, action_idx);
        pose.set_translation([
            rng.random_range(-0.15..0.15),
            rng.random_range(-0.15..0.15),
            rng.random_range(0.90..0.96),
        ]);

        let hand = if rng.random_range(0.0..1.0) < 0.5 {
            Hand::Left
        } else {
            Hand::Right
        };
        let skel = body::forward_kinematics(template, &pose);
        let joints = body::hand_joints(template, &skel);
        let base = body::hand_range(hand).start;
        let thumb_tip = joints.positions[base]; // thumb distal
        let index_tip = joints.positions[base + 3]; // index distal
        let delta = sub3(index_tip, thumb_tip);

        // object yaw: free for round things, gap-aligned for the box
        let yaw = match kind {
            ObjectKind::Box => {
                let phi = delta[1].atan2(delta[0]);
                phi - 135.0_f64.to_radians()
            }
            ObjectKind::Sphere => 0.0,
            _ => rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
        };
        let rot = yaw_rotation(yaw);
        let inv_rot = yaw_rotation(-yaw);
        let d_obj = mat3_apply(&inv_rot, delta);
        let Some((p1, _p2)) = solve_chord(kind, d_obj) else {
            continue;
        };
        let translation = sub3(thumb_tip, mat3_apply(&rot, p1));
        let object_pose = RigidPose6::new([0.0, 0.0, yaw], translation);

        let truth = extract_contact_truth(
            &joints,
            &entry.object.cloud,
            &object_pose,
            DEFAULT_D_CONTACT,
        )?;
        let labels: Vec<usize> = truth
            .vector
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.probability > 0.5)
            .map(|(i, _)| i)
            .collect();
        if !stable_grasp_check(&labels)? {
            continue;
        }
        let Ok(indicator) = annotate_hand_type(
            template,
            &pose,
            &entry.object.cloud,
            &object_pose,
            HAND_TYPE_THRESHOLD,
        ) else {
            continue;
        };
        if !indicator.uses(hand) {
            continue;
        }

        let record = HOIRecord {
            prompt: format_prompt(action, kind.name(), indicator),
            action_id: action_id(action).expect("catalogue action"),
            human: pose,
            object_name: kind.name().to_string(),
            object_pose,
            contact: truth.vector,
            rest_height: entry.rest_height,
        };
        if filter_stable(&record, library)? {
            return Ok(record);
        }
    }
    Err(Error::Verification(format!(
        "grasp construction failed 100 times for '{}'",
        kind.name()
    )))
}

/// Generates `count` records cycling through the catalogue, one derived
/// RNG stream per record.
pub fn generate_dataset(
    template: &BodyTemplate,
    library: &ObjectLibrary,
    count: usize,
    base_seed: u64,
) -> Result<Vec<HOIRecord>> {
    let kinds = ObjectKind::all();
    (0..count)
        .map(|i| {
            let mut rng = crate::rng::rng_for(base_seed, "scene", i as u64);
            generate_synthetic_scene(template, library, kinds[i % kinds.len()], &mut rng)
        })
        .collect()
}

// ---- the stable filter ----

/// A record is stable when (a) some joint contacts, (b) the object sits at
/// least [`MIN_LIFT`] from its rest height, and (c) the contact labels form
/// a thumb-plus-finger grasp.
pub fn filter_stable(record: &HOIRecord, library: &ObjectLibrary) -> Result<bool> {
    record.validate(library)?;
    let labels: Vec<usize> = record
        .contact
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.probability > 0.5)
        .map(|(i, _)| i)
        .collect();
    let any_contact = !labels.is_empty();
    let lifted = (record.object_pose.translation[2] - record.rest_height).abs() >= MIN_LIFT;
    Ok(any_contact && lifted && stable_grasp_check(&labels)?)
}

// ---- interpenetration correction ----

// Mean distance between contacting joints and their paired object contact
// points (one-sided Chamfer over the labeled pairs).
fn contact_chamfer(
    joints: &[Vec3],
    record: &HOIRecord,
    contacting: &[usize],
    shift: Vec3,
) -> f64 {
    contacting
        .iter()
        .map(|&i| {
            let world = record.object_pose.apply(record.contact.records[i].position);
            dist3(add3(joints[i], shift), world)
        })
        .sum::<f64>()
        / contacting.len() as f64
}

/// Shifts the body translation along the mean contact normal by the mean
/// contact Chamfer distance, choosing the sign that reduces it; the
/// corrected Chamfer never exceeds the input's.  Records without contacts
/// come back unchanged.
pub fn correct_interpenetration(
    template: &BodyTemplate,
    record: &HOIRecord,
) -> Result<HOIRecord> {
    let contacting: Vec<usize> = record
        .contact
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.probability > 0.5)
        .map(|(i, _)| i)
        .collect();
    if contacting.is_empty() {
        return Ok(record.clone());
    }
    let skel = body::forward_kinematics(template, &record.human);
    let joints = body::hand_joints(template, &skel);

    let mut normal = [0.0; 3];
    for &i in &contacting {
        normal = add3(normal, joints.normals[i]);
    }
    let Some(dir) = unit3(normal) else {
        return Ok(record.clone()); // opposed normals cancel; no direction
    };

    let before = contact_chamfer(&joints.positions, record, &contacting, [0.0; 3]);
    let mut best_shift = [0.0; 3];
    let mut best = before;
    for sign in [1.0, -1.0] {
        let shift = scale3(dir, sign * before);
        let after = contact_chamfer(&joints.positions, record, &contacting, shift);
        if after < best {
            best = after;
            best_shift = shift;
        }
    }
    if best >= before {
        return Ok(record.clone());
    }
    let mut corrected = record.clone();
    let t = corrected.human.translation();
    corrected
        .human
        .set_translation(add3([t[0], t[1], t[2]], best_shift));
    Ok(corrected)
}

// ---- dataset file format ----

const MAGIC: &[u8; 4] = b"HOID";
const VERSION: u32 = 1;

struct Writer<W: std::io::Write> {
    out: W,
}

impl<W: std::io::Write> Writer<W> {
    fn u32(&mut self, v: u32) -> Result<()> {
        self.out.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    fn u64(&mut self, v: u64) -> Result<()> {
        self.out.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    fn f64s(&mut self, vs: &[f64]) -> Result<()> {
        for v in vs {
            self.out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }
    fn string(&mut self, s: &str) -> Result<()> {
        self.u32(s.len() as u32)?;
        self.out.write_all(s.as_bytes())?;
        Ok(())
    }
}

/// Writes records in the `HOID` binary format.
pub fn write_dataset(records: &[HOIRecord], path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    let mut w = Writer {
        out: std::io::BufWriter::new(file),
    };
    w.out.write_all(MAGIC)?;
    w.u32(VERSION)?;
    w.u64(records.len() as u64)?;
    for r in records {
        w.string(&r.prompt)?;
        w.u32(r.action_id)?;
        w.f64s(r.human.as_slice())?;
        w.string(&r.object_name)?;
        w.f64s(&r.object_pose.to_vec6())?;
        w.f64s(&r.contact.flatten())?;
        w.f64s(&[r.rest_height])?;
    }
    w.out.flush()?;
    Ok(())
}

struct Reader {
    data: Vec<u8>,
    pos: usize,
}

impl Reader {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::parse(
                self.pos as u64,
                format!("truncated while reading {}", what),
            ));
        }
        let slice = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(8 * n, what)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn string(&mut self, what: &str) -> Result<String> {
        let start = self.pos;
        let len = self.u32(what)? as usize;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| {
            Error::parse(start as u64, format!("{} is not valid UTF-8", what))
        })
    }
}

/// Reads a `HOID` dataset; malformed input reports the failing byte offset.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<HOIRecord>> {
    let mut data = Vec::new();
    std::fs::File::open(path.as_ref())?.read_to_end(&mut data)?;
    let mut r = Reader { data, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::parse(0, "bad magic, not a HOID file"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::parse(
            4,
            format!("unsupported version {} (expected {})", version, VERSION),
        ));
    }
    let count = r.u64("record count")?;
    let mut records = Vec::with_capacity(count.min(1 << 20) as usize);
    for i in 0..count {
        let what = format!("record {}", i);
        let prompt = r.string(&what)?;
        let action_id = r.u32(&what)?;
        let human = HumanPose::from_vec(r.f64s(crate::body::POSE_DIM, &what)?)?;
        let object_name = r.string(&what)?;
        let pose6 = r.f64s(6, &what)?;
        let object_pose = RigidPose6::from_vec6(&pose6);
        let contact = ContactVector::from_flat(&r.f64s(CONTACT_DIM, &what)?)?;
        let rest_height = r.f64s(1, &what)?[0];
        records.push(HOIRecord {
            prompt,
            action_id,
            human,
            object_name,
            object_pose,
            contact,
            rest_height,
        });
    }
    if r.pos != r.data.len() {
        return Err(Error::parse(
            r.pos as u64,
            format!("{} trailing bytes after the last record", r.data.len() - r.pos),
        ));
    }
    Ok(records)
}
