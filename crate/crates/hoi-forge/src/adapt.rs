//! Dynamic adaptation: training-time augmentation of scenes.
//!
//! Two independent augmentations broaden the training distribution:
//!
//! - **Geometry deformation** ([`deform_object`]): with probability η the
//!   less-used region of an object's cloud (the complement of the
//!   usual-contact mask) is stretched and rotated about its centroid,
//!   blended smoothly to zero at the contact-region seam.  Contact-region
//!   points are copied bit-for-bit, so ground-truth contact labels stay
//!   stable while positions are re-extracted against the new surface.
//! - **Semantic adjustment** ([`adjust_semantics`]): the prompt's action
//!   verb is replaced uniformly at random with one of its lexicon synonyms
//!   (or kept), leaving the object and hand-type tokens untouched.
//!
//! [`augment_batch`] applies both per sample behind independent toggles and
//! re-extracts contact truth after deformation.

use std::collections::HashSet;
use std::path::Path;

use crate::body::{self, BodyTemplate, HumanPose};
use crate::contact::{extract_contact_truth, ContactVector, DEFAULT_D_CONTACT};
use crate::error::{Error, Result};
use crate::geometry::{
    add3, estimate_normals, scale3, sub3, KdTree, PointCloud, RigidPose6, TriMesh, Vec3,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Neighborhood size for normal re-estimation after deformation.
const NORMAL_K: usize = 16;

/// An object in its canonical frame: cloud, mesh, and the usual-contact mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub name: String,
    /// Canonical point cloud (desk profile: 4000 points), with normals.
    pub cloud: PointCloud,
    /// Watertight surface mesh in the same frame.
    pub mesh: TriMesh,
    /// `true` marks the usual-contact region, which deformation never moves;
    /// `false` marks the less-used complement that may deform.
    pub contact_mask: Vec<bool>,
}

impl SceneObject {
    pub fn new(
        name: impl Into<String>,
        cloud: PointCloud,
        mesh: TriMesh,
        contact_mask: Vec<bool>,
    ) -> Result<Self> {
        let obj = SceneObject {
            name: name.into(),
            cloud,
            mesh,
            contact_mask,
        };
        obj.validate()?;
        Ok(obj)
    }

    pub fn validate(&self) -> Result<()> {
        if self.contact_mask.len() != self.cloud.len() {
            return Err(Error::contract(format!(
                "contact mask covers {} points but the cloud has {}",
                self.contact_mask.len(),
                self.cloud.len()
            )));
        }
        if !self.contact_mask.iter().any(|&m| m) {
            return Err(Error::contract(format!(
                "object '{}' has no usual-contact points",
                self.name
            )));
        }
        Ok(())
    }

    /// The usual-contact points (mask = true), in index order.
    pub fn contact_points(&self) -> Vec<Vec3> {
        self.cloud
            .points
            .iter()
            .zip(&self.contact_mask)
            .filter(|(_, &m)| m)
            .map(|(&p, _)| p)
            .collect()
    }
}

/// Parameters of the geometry deformation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeformParams {
    /// Probability that a given call deforms at all.
    pub eta: f64,
    /// Per-axis stretch factors are drawn uniformly from this range.
    pub stretch_lo: f64,
    pub stretch_hi: f64,
    /// Maximum rotation angle (radians) about a random axis.
    pub max_rotation: f64,
    /// Blend falloff radius (meters): weight `min(1, dist/ρ)` by distance to
    /// the contact region.  `ρ = 0` applies the affine at full weight
    /// everywhere outside the contact region.
    pub rho: f64,
}

impl Default for DeformParams {
    fn default() -> Self {
        DeformParams {
            eta: 0.5,
            stretch_lo: 0.8,
            stretch_hi: 1.2,
            max_rotation: 30.0_f64.to_radians(),
            rho: 0.02,
        }
    }
}

impl DeformParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::config(format!(
                "eta must lie in [0, 1], found {}",
                self.eta
            )));
        }
        if self.stretch_lo <= 0.0 || self.stretch_hi < self.stretch_lo {
            return Err(Error::config(format!(
                "stretch range must satisfy 0 < lo <= hi, found [{}, {}]",
                self.stretch_lo, self.stretch_hi
            )));
        }
        if !(0.0..=std::f64::consts::PI).contains(&self.max_rotation) {
            return Err(Error::config(format!(
                "max_rotation must lie in [0, pi], found {}",
                self.max_rotation
            )));
        }
        if self.rho < 0.0 {
            return Err(Error::config(format!(
                "falloff radius rho must be >= 0, found {}",
                self.rho
            )));
        }
        Ok(())
    }
}

// The sampled affine d_f: stretch then rotate about the free-region centroid.
struct AffineField {
    center: Vec3,
    stretch: [f64; 3],
    rotation: [f64; 9],
}

impl AffineField {
    fn sample(params: &DeformParams, center: Vec3, rng: &mut ChaCha8Rng) -> Self {
        let stretch = [
            rng.random_range(params.stretch_lo..=params.stretch_hi),
            rng.random_range(params.stretch_lo..=params.stretch_hi),
            rng.random_range(params.stretch_lo..=params.stretch_hi),
        ];
        // uniform axis via (z, phi); angle uniform in [0, max]
        let z: f64 = rng.random_range(-1.0..=1.0);
        let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let r = (1.0 - z * z).max(0.0).sqrt();
        let axis = [r * phi.cos(), r * phi.sin(), z];
        let angle = rng.random_range(0.0..=params.max_rotation);
        let rotation = crate::ad::tape::rodrigues_fwd(&scale3(axis, angle));
        AffineField {
            center,
            stretch,
            rotation,
        }
    }

    fn apply(&self, p: Vec3) -> Vec3 {
        let d = sub3(p, self.center);
        let s = [
            d[0] * self.stretch[0],
            d[1] * self.stretch[1],
            d[2] * self.stretch[2],
        ];
        let r = &self.rotation;
        add3(
            self.center,
            [
                r[0] * s[0] + r[1] * s[1] + r[2] * s[2],
                r[3] * s[0] + r[4] * s[1] + r[5] * s[2],
                r[6] * s[0] + r[7] * s[1] + r[8] * s[2],
            ],
        )
    }
}

// Seam blend weight by distance to the nearest contact-region point.
fn blend_weight(dist: f64, rho: f64) -> f64 {
    if rho <= 0.0 {
        1.0
    } else {
        (dist / rho).min(1.0)
    }
}

/// Deforms the non-contact region of an object with probability η.
///
/// Contact-region points (mask = true) are copied bit-for-bit; every other
/// point moves by `w(x) · (d_f(x) − x)` where `d_f` is a sampled stretch and
/// rotation about the free region's centroid and `w` is the seam blend.
/// Mesh vertices follow the same field, so the mesh stays consistent with
/// the cloud, and cloud normals are re-estimated afterwards.  Point count
/// and ordering are always preserved.
pub fn deform_object(
    obj: &SceneObject,
    params: &DeformParams,
    rng: &mut ChaCha8Rng,
) -> Result<SceneObject> {
    obj.validate()?;
    params.validate()?;

    let applied = rng.random_range(0.0..1.0) < params.eta;
    if !applied {
        return Ok(obj.clone());
    }

    let free: Vec<Vec3> = obj
        .cloud
        .points
        .iter()
        .zip(&obj.contact_mask)
        .filter(|(_, &m)| !m)
        .map(|(&p, _)| p)
        .collect();
    if free.is_empty() {
        // every point is contact region: nothing may move
        return Ok(obj.clone());
    }
    let mut center = [0.0; 3];
    for &p in &free {
        center = add3(center, p);
    }
    center = scale3(center, 1.0 / free.len() as f64);

    let field = AffineField::sample(params, center, rng);
    let contact_tree = KdTree::build(&obj.contact_points());

    let move_point = |p: Vec3| -> Vec3 {
        let (_, dist) = contact_tree.nearest(p);
        let w = blend_weight(dist, params.rho);
        let target = field.apply(p);
        add3(p, scale3(sub3(target, p), w))
    };

    let points: Vec<Vec3> = obj
        .cloud
        .points
        .iter()
        .zip(&obj.contact_mask)
        .map(|(&p, &m)| if m { p } else { move_point(p) })
        .collect();

    let k = NORMAL_K.min(points.len());
    let cloud = if k >= 3 {
        estimate_normals(&PointCloud::new(points), k)?
    } else {
        PointCloud::new(points)
    };

    let vertices: Vec<Vec3> = obj.mesh.vertices.iter().map(|&v| move_point(v)).collect();
    let mesh = TriMesh::new(vertices, obj.mesh.faces.clone())?;

    Ok(SceneObject {
        name: obj.name.clone(),
        cloud,
        mesh,
        contact_mask: obj.contact_mask.clone(),
    })
}

/// Action-verb synonym table.
#[derive(Debug, Clone, PartialEq)]
pub struct SynonymLexicon {
    // ordered for deterministic iteration and round-trip stability
    entries: Vec<(String, Vec<String>)>,
}

impl SynonymLexicon {
    pub fn new(entries: Vec<(String, Vec<String>)>) -> Result<Self> {
        let lex = SynonymLexicon { entries };
        lex.validate()?;
        Ok(lex)
    }

    /// The shipped table: three synonyms per synthetic action.
    pub fn shipped() -> Self {
        let table = [
            ("lift", ["raise", "up", "uplift"]),
            ("pass", ["hand", "give", "transfer"]),
            ("place", ["put", "set", "lay"]),
            ("inspect", ["examine", "view", "study"]),
        ];
        SynonymLexicon {
            entries: table
                .iter()
                .map(|(a, syns)| {
                    (
                        a.to_string(),
                        syns.iter().map(|s| s.to_string()).collect(),
                    )
                })
                .collect(),
        }
    }

    fn validate(&self) -> Result<()> {
        let mut seen: HashSet<&str> = HashSet::new();
        for (action, syns) in &self.entries {
            if syns.is_empty() {
                return Err(Error::config(format!(
                    "action '{}' has no synonyms",
                    action
                )));
            }
            for term in std::iter::once(action).chain(syns) {
                if term.trim().is_empty() || term.split_whitespace().count() != 1 {
                    return Err(Error::config(format!(
                        "lexicon term '{}' is not a single token",
                        term
                    )));
                }
                if !seen.insert(term.as_str()) {
                    return Err(Error::config(format!(
                        "lexicon term '{}' appears under more than one action",
                        term
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn actions(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(a, _)| a.as_str())
    }

    pub fn synonyms(&self, action: &str) -> Option<&[String]> {
        self.entries
            .iter()
            .find(|(a, _)| a == action)
            .map(|(_, s)| s.as_slice())
    }

    /// Total distinct terms (actions plus synonyms).
    pub fn term_count(&self) -> usize {
        self.entries.iter().map(|(_, s)| 1 + s.len()).sum()
    }

    /// Parses the `action: syn1, syn2, syn3` line format.  Blank lines and
    /// `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut offset = 0u64;
        for raw in text.lines() {
            let line_start = offset;
            offset += raw.len() as u64 + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (action, rest) = line.split_once(':').ok_or_else(|| {
                Error::parse(line_start, "lexicon line is missing ':'")
            })?;
            let syns: Vec<String> = rest
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect();
            entries.push((action.trim().to_string(), syns));
        }
        SynonymLexicon::new(entries)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        SynonymLexicon::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (action, syns) in &self.entries {
            out.push_str(action);
            out.push_str(": ");
            out.push_str(&syns.join(", "));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_text())?;
        Ok(())
    }
}

/// Result of a semantic adjustment.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjustedPrompt {
    pub prompt: String,
    /// Set when the action was absent from the lexicon and the prompt came
    /// back unchanged.
    pub unknown_action: bool,
}

/// Replaces the prompt's action token uniformly at random with itself or one
/// of its synonyms.  Everything after the first token is preserved verbatim.
/// Unknown actions return the prompt unchanged with a warning flag and do
/// not consume randomness.
pub fn adjust_semantics(
    prompt: &str,
    lexicon: &SynonymLexicon,
    rng: &mut ChaCha8Rng,
) -> Result<AdjustedPrompt> {
    let trimmed = prompt.trim_start();
    let action_len = trimmed
        .find(char::is_whitespace)
        .unwrap_or(trimmed.len());
    let action = &trimmed[..action_len];
    if action.is_empty() {
        return Err(Error::contract("prompt has no action token"));
    }
    let Some(syns) = lexicon.synonyms(&action.to_lowercase()) else {
        return Ok(AdjustedPrompt {
            prompt: prompt.to_string(),
            unknown_action: true,
        });
    };
    let pick = rng.random_range(0..=syns.len());
    let replacement = if pick == 0 { action } else { &syns[pick - 1] };
    Ok(AdjustedPrompt {
        prompt: format!("{}{}", replacement, &trimmed[action_len..]),
        unknown_action: false,
    })
}

/// Toggles and parameters for batch augmentation.  The three ablation rows
/// are [`AugmentConfig::full`] (both on), [`AugmentConfig::without_gd`]
/// (geometry off), and [`AugmentConfig::without_sa`] (semantics off).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Geometry deformation toggle (paper ablation "GD").
    pub geometry: bool,
    /// Semantic adjustment toggle (paper ablation "SA").
    pub semantics: bool,
    pub deform: DeformParams,
    /// Contact threshold used when re-extracting truth after deformation.
    pub d_contact: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            geometry: true,
            semantics: true,
            deform: DeformParams::default(),
            d_contact: DEFAULT_D_CONTACT,
        }
    }
}

impl AugmentConfig {
    pub fn full() -> Self {
        AugmentConfig::default()
    }

    pub fn without_gd() -> Self {
        AugmentConfig {
            geometry: false,
            ..AugmentConfig::default()
        }
    }

    pub fn without_sa() -> Self {
        AugmentConfig {
            semantics: false,
            ..AugmentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.deform.validate()?;
        if self.d_contact <= 0.0 {
            return Err(Error::config(format!(
                "d_contact must be positive, found {}",
                self.d_contact
            )));
        }
        Ok(())
    }
}

/// One training scene as consumed by augmentation: the object geometry is
/// owned so each sample can deform independently.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentSample {
    pub object: SceneObject,
    pub prompt: String,
    pub human: HumanPose,
    pub object_pose: RigidPose6,
    /// Ground-truth contact anchors (canonical-frame positions + labels).
    pub contact: ContactVector,
}

/// Applies the enabled augmentations to every sample independently.
///
/// Each sample works from its own derived RNG stream, so results do not
/// depend on batch order side effects and per-sample work could run in
/// parallel.  After a deformation the contact truth is re-extracted against
/// the new surface: contact-region points never move, so existing positive
/// labels survive while positions snap to the nearest deformed surface
/// point.
pub fn augment_batch(
    template: &BodyTemplate,
    samples: &[AugmentSample],
    config: &AugmentConfig,
    lexicon: &SynonymLexicon,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<AugmentSample>> {
    config.validate()?;
    let base: u64 = rng.random();
    let mut out = Vec::with_capacity(samples.len());
    for (i, sample) in samples.iter().enumerate() {
        let mut child = crate::rng::rng_for(base, "augment", i as u64);
        let mut next = sample.clone();
        if config.geometry {
            next.object = deform_object(&sample.object, &config.deform, &mut child)?;
            let skel = body::forward_kinematics(template, &next.human);
            let joints = body::hand_joints(template, &skel);
            next.contact = extract_contact_truth(
                &joints,
                &next.object.cloud,
                &next.object_pose,
                config.d_contact,
            )?
            .vector;
        }
        if config.semantics {
            let adjusted = adjust_semantics(&next.prompt, lexicon, &mut child)?;
            next.prompt = adjusted.prompt;
        }
        out.push(next);
    }
    Ok(out)
}
