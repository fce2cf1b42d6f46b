//! Point-cloud and rigid-body geometry primitives.
//!
//! Everything here is pure and seeded where randomness is unavoidable:
//! nearest-neighbor queries (kd-tree with a brute-force oracle kept for
//! tests), Chamfer distance, k-NN normal estimation, 6-DoF rigid
//! transforms in axis-angle form, voxelization, and 2-D point-to-polygon
//! distance.

pub mod kdtree;
pub mod mesh;
pub mod voxel;

pub use kdtree::KdTree;
pub use mesh::TriMesh;
pub use voxel::{voxelize_cloud, voxelize_solid, voxelize_surface, VoxelGrid};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

pub fn add3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale3(a: Vec3, k: f64) -> Vec3 {
    [a[0] * k, a[1] * k, a[2] * k]
}

pub fn dot3(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross3(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm3(a: Vec3) -> f64 {
    dot3(a, a).sqrt()
}

pub fn dist3(a: Vec3, b: Vec3) -> f64 {
    norm3(sub3(a, b))
}

/// Normalize; returns `None` for (near-)zero vectors.
pub fn unit3(a: Vec3) -> Option<Vec3> {
    let n = norm3(a);
    if n < 1e-12 {
        None
    } else {
        Some(scale3(a, 1.0 / n))
    }
}

// ---- rigid 6-DoF pose ----

/// Rigid placement: axis-angle rotation (radians times unit axis) plus a
/// translation in meters. Canonical form keeps the angle in `[0, pi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidPose6 {
    pub rotation: Vec3,
    pub translation: Vec3,
}

impl RigidPose6 {
    pub fn identity() -> Self {
        RigidPose6 { rotation: [0.0; 3], translation: [0.0; 3] }
    }

    pub fn new(rotation: Vec3, translation: Vec3) -> Self {
        RigidPose6 { rotation, translation }.canonical()
    }

    /// Flat `[rx, ry, rz, tx, ty, tz]` layout used in the diffusion state.
    pub fn from_vec6(v: &[f64]) -> Self {
        assert_eq!(v.len(), 6, "rigid pose wants 6 values");
        RigidPose6 {
            rotation: [v[0], v[1], v[2]],
            translation: [v[3], v[4], v[5]],
        }
    }

    pub fn to_vec6(self) -> [f64; 6] {
        let r = self.rotation;
        let t = self.translation;
        [r[0], r[1], r[2], t[0], t[1], t[2]]
    }

    /// Wrap the rotation angle into `[0, pi]` (same rotation, canonical
    /// axis-angle encoding).
    pub fn canonical(self) -> Self {
        let theta = norm3(self.rotation);
        if theta <= std::f64::consts::PI {
            return self;
        }
        let two_pi = 2.0 * std::f64::consts::PI;
        let wrapped = theta % two_pi;
        let scale = if wrapped <= std::f64::consts::PI {
            wrapped / theta
        } else {
            // angle in (pi, 2pi): same rotation as (2pi - angle) about -axis
            (wrapped - two_pi) / theta
        };
        RigidPose6 {
            rotation: scale3(self.rotation, scale),
            translation: self.translation,
        }
    }

    /// Row-major 3x3 rotation matrix.
    pub fn rotation_matrix(&self) -> [f64; 9] {
        crate::ad::tape::rodrigues_fwd(&self.rotation)
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        let r = self.rotation_matrix();
        [
            r[0] * p[0] + r[1] * p[1] + r[2] * p[2] + self.translation[0],
            r[3] * p[0] + r[4] * p[1] + r[5] * p[2] + self.translation[1],
            r[6] * p[0] + r[7] * p[1] + r[8] * p[2] + self.translation[2],
        ]
    }

    /// `self` after `first`: `compose(self, first).apply(x) =
    /// self.apply(first.apply(x))`.
    pub fn compose(&self, first: &RigidPose6) -> RigidPose6 {
        let ra = self.rotation_matrix();
        let rb = first.rotation_matrix();
        let mut rc = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += ra[i * 3 + k] * rb[k * 3 + j];
                }
                rc[i * 3 + j] = s;
            }
        }
        RigidPose6 {
            rotation: axis_angle_from_matrix(&rc),
            translation: self.apply(first.translation),
        }
    }

    pub fn inverse(&self) -> RigidPose6 {
        let r = self.rotation_matrix();
        // R^-1 = R^T; t' = -R^T t
        let t = self.translation;
        let ti = [
            -(r[0] * t[0] + r[3] * t[1] + r[6] * t[2]),
            -(r[1] * t[0] + r[4] * t[1] + r[7] * t[2]),
            -(r[2] * t[0] + r[5] * t[1] + r[8] * t[2]),
        ];
        RigidPose6 { rotation: scale3(self.rotation, -1.0), translation: ti }.canonical()
    }
}

/// Recover a canonical axis-angle vector from a row-major rotation matrix.
pub fn axis_angle_from_matrix(r: &[f64; 9]) -> Vec3 {
    let trace = r[0] + r[4] + r[8];
    let cos_t = ((trace - 1.0) / 2.0).clamp(-1.0, 1.0);
    let theta = cos_t.acos();
    if theta < 1e-10 {
        return [0.0; 3];
    }
    if (std::f64::consts::PI - theta) < 1e-6 {
        // Near pi: axis from the symmetric part, R ~ 2aa^T - I.
        let xx = ((r[0] + 1.0) / 2.0).max(0.0).sqrt();
        let yy = ((r[4] + 1.0) / 2.0).max(0.0).sqrt();
        let zz = ((r[8] + 1.0) / 2.0).max(0.0).sqrt();
        let mut axis = [xx, yy, zz];
        // Signs from the off-diagonal sums, anchored at the largest entry.
        if xx >= yy && xx >= zz {
            axis[1] = (r[1] + r[3]) / (4.0 * xx);
            axis[2] = (r[2] + r[6]) / (4.0 * xx);
        } else if yy >= zz {
            axis[0] = (r[1] + r[3]) / (4.0 * yy);
            axis[2] = (r[5] + r[7]) / (4.0 * yy);
        } else {
            axis[0] = (r[2] + r[6]) / (4.0 * zz);
            axis[1] = (r[5] + r[7]) / (4.0 * zz);
        }
        let axis = unit3(axis).unwrap_or([1.0, 0.0, 0.0]);
        return scale3(axis, theta);
    }
    let s = 2.0 * theta.sin();
    let axis = [(r[7] - r[5]) / s, (r[2] - r[6]) / s, (r[3] - r[1]) / s];
    scale3(axis, theta)
}

/// Rotate-then-translate a batch of points.
pub fn apply_rigid(pose: &RigidPose6, points: &[Vec3]) -> Vec<Vec3> {
    let r = pose.rotation_matrix();
    let t = pose.translation;
    points
        .iter()
        .map(|p| {
            [
                r[0] * p[0] + r[1] * p[1] + r[2] * p[2] + t[0],
                r[3] * p[0] + r[4] * p[1] + r[5] * p[2] + t[1],
                r[6] * p[0] + r[7] * p[1] + r[8] * p[2] + t[2],
            ]
        })
        .collect()
}

// ---- point cloud ----

/// Validity marker for an estimated normal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormalStatus {
    Valid,
    /// Degenerate (collinear) neighborhood; the caller must fall back to
    /// mesh normals.
    Invalid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub normals: Option<Vec<Vec3>>,
    pub normal_status: Option<Vec<NormalStatus>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Self {
        PointCloud { points, normals: None, normal_status: None }
    }

    /// A cloud with caller-supplied normals, all marked valid.
    pub fn with_normals(points: Vec<Vec3>, normals: Vec<Vec3>) -> Self {
        assert_eq!(points.len(), normals.len());
        let status = vec![NormalStatus::Valid; points.len()];
        PointCloud { points, normals: Some(normals), normal_status: Some(status) }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Vec3 {
        let mut c = [0.0; 3];
        for p in &self.points {
            c = add3(c, *p);
        }
        scale3(c, 1.0 / self.points.len().max(1) as f64)
    }

    pub fn transformed(&self, pose: &RigidPose6) -> PointCloud {
        let r = pose.rotation_matrix();
        let rotate = |v: &Vec3| {
            [
                r[0] * v[0] + r[1] * v[1] + r[2] * v[2],
                r[3] * v[0] + r[4] * v[1] + r[5] * v[2],
                r[6] * v[0] + r[7] * v[1] + r[8] * v[2],
            ]
        };
        PointCloud {
            points: apply_rigid(pose, &self.points),
            normals: self.normals.as_ref().map(|ns| ns.iter().map(rotate).collect()),
            normal_status: self.normal_status.clone(),
        }
    }

    /// Binary cloud format: count u64 then little-endian f64 triples.
    pub fn write_binary(&self, path: &std::path::Path) -> Result<()> {
        use std::io::Write;
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(&(self.points.len() as u64).to_le_bytes())?;
        for p in &self.points {
            for v in p {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_binary(path: &std::path::Path) -> Result<PointCloud> {
        use std::io::Read;
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(|_| Error::parse(0, "truncated point count"))?;
        let count = u64::from_le_bytes(b8) as usize;
        if count > 50_000_000 {
            return Err(Error::parse(0, format!("implausible point count {count}")));
        }
        let mut points = Vec::with_capacity(count);
        for i in 0..count {
            let mut p = [0.0; 3];
            for v in &mut p {
                r.read_exact(&mut b8)
                    .map_err(|_| Error::parse((8 + i * 24) as u64, "truncated point payload"))?;
                *v = f64::from_le_bytes(b8);
            }
            points.push(p);
        }
        Ok(PointCloud::new(points))
    }

    /// Text cloud format: whitespace-separated coordinate triples.
    pub fn write_text(&self, path: &std::path::Path) -> Result<()> {
        use std::io::Write;
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        for p in &self.points {
            writeln!(w, "{} {} {}", p[0], p[1], p[2])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_text(path: &std::path::Path) -> Result<PointCloud> {
        let body = std::fs::read_to_string(path)?;
        let values: Vec<f64> = body
            .split_whitespace()
            .enumerate()
            .map(|(i, tok)| {
                tok.parse::<f64>()
                    .map_err(|_| Error::parse(i as u64, format!("bad coordinate `{tok}`")))
            })
            .collect::<Result<_>>()?;
        if values.len() % 3 != 0 {
            return Err(Error::parse(
                values.len() as u64,
                "coordinate count is not a multiple of 3",
            ));
        }
        let points = values.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        Ok(PointCloud::new(points))
    }
}

/// Index and distance of the closest cloud point to `query`; ties go to
/// the lowest index. Exhaustive scan — the oracle for [`KdTree`].
pub fn nearest_point_brute(points: &[Vec3], query: Vec3) -> Result<(usize, f64)> {
    if points.is_empty() {
        return Err(Error::contract("nearest_point on an empty cloud"));
    }
    let mut best = (0usize, f64::INFINITY);
    for (i, p) in points.iter().enumerate() {
        let d2 = {
            let d = sub3(*p, query);
            dot3(d, d)
        };
        if d2 < best.1 {
            best = (i, d2);
        }
    }
    Ok((best.0, best.1.sqrt()))
}

/// kd-tree-accelerated nearest point (same tie rule as the brute scan).
pub fn nearest_point(cloud: &PointCloud, query: Vec3) -> Result<(usize, f64)> {
    if cloud.is_empty() {
        return Err(Error::contract("nearest_point on an empty cloud"));
    }
    let tree = KdTree::build(&cloud.points);
    Ok(tree.nearest(query))
}

/// Symmetric Chamfer distance: the mean of the two directed mean
/// nearest-neighbor distances.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::contract("chamfer on an empty cloud"));
    }
    let ta = KdTree::build(&a.points);
    let tb = KdTree::build(&b.points);
    let ab: f64 = a.points.iter().map(|&p| tb.nearest(p).1).sum::<f64>() / a.len() as f64;
    let ba: f64 = b.points.iter().map(|&p| ta.nearest(p).1).sum::<f64>() / b.len() as f64;
    Ok(0.5 * (ab + ba))
}

/// O(N*M) Chamfer used as the oracle in tests.
pub fn chamfer_brute(a: &[Vec3], b: &[Vec3]) -> f64 {
    let dir = |xs: &[Vec3], ys: &[Vec3]| -> f64 {
        xs.iter()
            .map(|&x| ys.iter().map(|&y| dist3(x, y)).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / xs.len() as f64
    };
    0.5 * (dir(a, b) + dir(b, a))
}

/// Estimate unit normals from a k-NN plane fit (smallest-variance
/// direction), oriented away from the cloud centroid. Collinear
/// neighborhoods are flagged [`NormalStatus::Invalid`].
pub fn estimate_normals(cloud: &PointCloud, k: usize) -> Result<PointCloud> {
    let n = cloud.len();
    if k < 3 || n < k {
        return Err(Error::contract(format!(
            "estimate_normals wants N >= k >= 3, got N={n}, k={k}"
        )));
    }
    let tree = KdTree::build(&cloud.points);
    let centroid = cloud.centroid();
    let mut normals = Vec::with_capacity(n);
    let mut status = Vec::with_capacity(n);
    for &p in &cloud.points {
        let nbrs = tree.k_nearest(p, k);
        let mut mean = [0.0; 3];
        for &(i, _) in &nbrs {
            mean = add3(mean, cloud.points[i]);
        }
        mean = scale3(mean, 1.0 / k as f64);
        // 3x3 covariance of the neighborhood.
        let mut cov = [0.0; 9];
        for &(i, _) in &nbrs {
            let d = sub3(cloud.points[i], mean);
            for r in 0..3 {
                for c in 0..3 {
                    cov[r * 3 + c] += d[r] * d[c];
                }
            }
        }
        let (eigvals, eigvecs) = crate::linalg::sym_eigen(&cov, 3);
        // Ascending eigenvalues: [0] is the plane normal direction; a
        // collinear neighborhood has two vanishing eigenvalues.
        let mid = eigvals[1].max(0.0);
        let hi = eigvals[2].max(0.0);
        let degenerate = hi < 1e-24 || mid / hi.max(1e-300) < 1e-10;
        let mut normal = [eigvecs[0], eigvecs[3], eigvecs[6]];
        if degenerate {
            normals.push([0.0, 0.0, 1.0]);
            status.push(NormalStatus::Invalid);
            continue;
        }
        let outward = dot3(normal, sub3(p, centroid));
        if outward < -1e-12 {
            normal = scale3(normal, -1.0);
        } else if outward.abs() <= 1e-12 {
            // Flat clouds: orient by the first nonzero component so every
            // point of a plane gets the same sign.
            let lead = normal.iter().find(|v| v.abs() > 1e-12).copied().unwrap_or(1.0);
            if lead < 0.0 {
                normal = scale3(normal, -1.0);
            }
        }
        normals.push(unit3(normal).unwrap_or([0.0, 0.0, 1.0]));
        status.push(NormalStatus::Valid);
    }
    Ok(PointCloud {
        points: cloud.points.clone(),
        normals: Some(normals),
        normal_status: Some(status),
    })
}

/// Farthest-point subsampling with geometric tie-breaking, so the result
/// is independent of input point order: the seed point is the one closest
/// to the centroid, and ties are resolved lexicographically by (x, y, z).
pub fn farthest_point_sample(points: &[Vec3], count: usize) -> Result<Vec<usize>> {
    if points.len() < count {
        return Err(Error::contract(format!(
            "farthest_point_sample wants >= {count} points, got {}",
            points.len()
        )));
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    let lex_less = |a: Vec3, b: Vec3| -> bool {
        (a[0], a[1], a[2]) < (b[0], b[1], b[2])
    };
    let centroid = {
        let mut c = [0.0; 3];
        for p in points {
            c = add3(c, *p);
        }
        scale3(c, 1.0 / points.len() as f64)
    };
    let mut seed = 0usize;
    let mut seed_d = f64::INFINITY;
    for (i, &p) in points.iter().enumerate() {
        let d = dist3(p, centroid);
        if d < seed_d - 1e-15 || ((d - seed_d).abs() <= 1e-15 && lex_less(p, points[seed])) {
            seed = i;
            seed_d = d;
        }
    }
    let mut chosen = vec![seed];
    let mut min_d: Vec<f64> = points.iter().map(|&p| dist3(p, points[seed])).collect();
    while chosen.len() < count {
        let mut far = 0usize;
        let mut far_d = -1.0;
        for (i, &d) in min_d.iter().enumerate() {
            if d > far_d + 1e-15 || ((d - far_d).abs() <= 1e-15 && lex_less(points[i], points[far]))
            {
                far = i;
                far_d = d;
            }
        }
        chosen.push(far);
        for (i, &p) in points.iter().enumerate() {
            let d = dist3(p, points[far]);
            if d < min_d[i] {
                min_d[i] = d;
            }
        }
    }
    Ok(chosen)
}

// ---- 2-D polygon distance ----

/// Distance from `p` to segment `ab` in 2-D.
pub fn dist_to_segment_2d(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 < 1e-300 {
        0.0
    } else {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    };
    let q = [a[0] + t * ab[0], a[1] + t * ab[1]];
    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
}

fn point_in_polygon_2d(p: [f64; 2], poly: &[[f64; 2]]) -> bool {
    // Even-odd crossing rule on a +x ray; boundary handled separately by
    // the zero-distance check in dist_to_polygon.
    let mut inside = false;
    let n = poly.len();
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
            if x > p[0] {
                inside = !inside;
            }
        }
    }
    inside
}

/// 0 if `p` lies inside or on the boundary of the simple polygon; else the
/// minimum distance to its edges.
pub fn dist_to_polygon(p: [f64; 2], polygon: &[[f64; 2]]) -> Result<f64> {
    let mut distinct: Vec<[f64; 2]> = Vec::new();
    for v in polygon {
        if distinct
            .iter()
            .all(|u| (u[0] - v[0]).abs() > 1e-12 || (u[1] - v[1]).abs() > 1e-12)
        {
            distinct.push(*v);
        }
    }
    if distinct.len() < 3 {
        return Err(Error::contract(format!(
            "dist_to_polygon wants >= 3 distinct vertices, got {}",
            distinct.len()
        )));
    }
    // Reject zero-area (collinear) polygons as degenerate too.
    let shoelace: f64 = (0..polygon.len())
        .map(|i| {
            let a = polygon[i];
            let b = polygon[(i + 1) % polygon.len()];
            a[0] * b[1] - b[0] * a[1]
        })
        .sum();
    if shoelace.abs() < 1e-18 {
        return Err(Error::contract("dist_to_polygon on a zero-area polygon"));
    }
    let n = polygon.len();
    let edge_min = (0..n)
        .map(|i| dist_to_segment_2d(p, polygon[i], polygon[(i + 1) % n]))
        .fold(f64::INFINITY, f64::min);
    if edge_min < 1e-12 || point_in_polygon_2d(p, polygon) {
        Ok(0.0)
    } else {
        Ok(edge_min)
    }
}

/// Convex hull of 2-D points (Andrew's monotone chain), counter-clockwise,
/// without the repeated first point. Collinear inputs yield < 3 vertices.
pub fn convex_hull_2d(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts: Vec<[f64; 2]> = points.to_vec();
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup_by(|a, b| (a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| -> f64 {
        (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    };
    let mut lower: Vec<[f64; 2]> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 1e-15
        {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<[f64; 2]> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 1e-15
        {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    fn random_cloud(seed: u64, n: usize) -> Vec<Vec3> {
        let mut rng = rng_from_seed(seed);
        (0..n)
            .map(|_| {
                [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ]
            })
            .collect()
    }

    #[test]
    fn nearest_basic_cases() {
        let cloud = PointCloud::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let (i, d) = nearest_point(&cloud, [0.2, 0.0, 0.0]).unwrap();
        assert_eq!(i, 0);
        assert!((d - 0.2).abs() < 1e-12);
        let (i2, d2) = nearest_point(&cloud, [1.0, 0.0, 0.0]).unwrap();
        assert_eq!(i2, 1);
        assert_eq!(d2, 0.0);
        assert!(nearest_point(&PointCloud::new(vec![]), [0.0; 3]).is_err());
    }

    #[test]
    fn nearest_matches_brute_force_on_1000_points() {
        let pts = random_cloud(41, 1000);
        let cloud = PointCloud::new(pts.clone());
        let tree = KdTree::build(&cloud.points);
        let queries = random_cloud(42, 200);
        for q in queries {
            let (bi, bd) = nearest_point_brute(&pts, q).unwrap();
            let (ti, td) = tree.nearest(q);
            assert_eq!(bi, ti);
            assert!((bd - td).abs() < 1e-12);
        }
    }

    #[test]
    fn nearest_tie_breaks_to_lowest_index() {
        // Two coincident points: both kd and brute must return index 0.
        let pts = vec![[0.5, 0.5, 0.5], [0.5, 0.5, 0.5], [2.0, 0.0, 0.0]];
        let tree = KdTree::build(&pts);
        assert_eq!(tree.nearest([0.4, 0.5, 0.5]).0, 0);
        assert_eq!(nearest_point_brute(&pts, [0.4, 0.5, 0.5]).unwrap().0, 0);
    }

    #[test]
    fn chamfer_identity_and_simple_pair() {
        let a = PointCloud::new(random_cloud(7, 50));
        assert!(chamfer(&a, &a).unwrap().abs() < 1e-15);
        let x = PointCloud::new(vec![[0.0, 0.0, 0.0]]);
        let y = PointCloud::new(vec![[0.0, 0.0, 1.0]]);
        assert!((chamfer(&x, &y).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn chamfer_matches_brute_oracle() {
        let a = random_cloud(10, 120);
        let b = random_cloud(11, 80);
        let fast = chamfer(&PointCloud::new(a.clone()), &PointCloud::new(b.clone())).unwrap();
        let slow = chamfer_brute(&a, &b);
        assert!((fast - slow).abs() < 1e-12);
    }

    #[test]
    fn apply_rigid_identity_and_halfturn() {
        let pts = vec![[1.0, 0.0, 0.0], [0.0, 2.0, 0.5]];
        let id = RigidPose6::identity();
        assert_eq!(apply_rigid(&id, &pts), pts);
        let half = RigidPose6::new([0.0, 0.0, std::f64::consts::PI], [0.0; 3]);
        let out = apply_rigid(&half, &pts);
        assert!((out[0][0] + 1.0).abs() < 1e-9);
        assert!(out[0][1].abs() < 1e-9);
    }

    #[test]
    fn rigid_composition_oracle() {
        let mut rng = rng_from_seed(13);
        for _ in 0..100 {
            let rand_pose = |rng: &mut rand_chacha::ChaCha8Rng| {
                RigidPose6::new(
                    [
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-2.0..2.0),

                    ],
                    [
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    ],
                )
            };
            let p1 = rand_pose(&mut rng);
            let p2 = rand_pose(&mut rng);
            let x = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            let direct = p2.apply(p1.apply(x));
            let composed = p2.compose(&p1).apply(x);
            assert!(dist3(direct, composed) < 1e-9, "{direct:?} vs {composed:?}");
        }
    }

    #[test]
    fn rigid_transform_is_isometry() {
        let mut rng = rng_from_seed(17);
        let pts = random_cloud(18, 20);
        for _ in 0..100 {
            let pose = RigidPose6::new(
                [
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-3.0..3.0),
                ],
                [
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                ],
            );
            let out = apply_rigid(&pose, &pts);
            for i in 0..pts.len() {
                for j in (i + 1)..pts.len() {
                    let before = dist3(pts[i], pts[j]);
                    let after = dist3(out[i], out[j]);
                    assert!((before - after).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn rigid_inverse_round_trips() {
        let pose = RigidPose6::new([0.3, -1.1, 0.7], [0.2, 0.5, -0.4]);
        let p = [0.9, -0.3, 0.25];
        let back = pose.inverse().apply(pose.apply(p));
        assert!(dist3(back, p) < 1e-9);
    }

    #[test]
    fn canonicalization_keeps_rotation_and_bounds_angle() {
        let raw = RigidPose6 { rotation: [0.0, 0.0, 5.0], translation: [0.0; 3] };
        let canon = raw.canonical();
        assert!(norm3(canon.rotation) <= std::f64::consts::PI + 1e-12);
        let p = [1.0, 0.3, -0.6];
        assert!(dist3(raw.apply(p), canon.apply(p)) < 1e-9);
    }

    #[test]
    fn axis_angle_matrix_round_trip() {
        let mut rng = rng_from_seed(23);
        for _ in 0..200 {
            let v = [
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
            ];
            let pose = RigidPose6::new(v, [0.0; 3]);
            let m = pose.rotation_matrix();
            let back = RigidPose6::new(axis_angle_from_matrix(&m), [0.0; 3]);
            let p = [0.7, -0.2, 0.4];
            assert!(dist3(pose.apply(p), back.apply(p)) < 1e-8);
        }
    }

    #[test]
    fn normals_on_planar_grid_point_up_or_down() {
        let mut pts = Vec::new();
        for i in 0..10 {
            for j in 0..10 {
                pts.push([i as f64 * 0.1, j as f64 * 0.1, 0.0]);
            }
        }
        let cloud = estimate_normals(&PointCloud::new(pts), 8).unwrap();
        let normals = cloud.normals.unwrap();
        for (n, s) in normals.iter().zip(cloud.normal_status.unwrap()) {
            assert_eq!(s, NormalStatus::Valid);
            assert!(n[2].abs() > 1.0 - 1e-9, "normal {n:?} not +-z");
        }
    }

    #[test]
    fn normals_on_sphere_are_radial() {
        // Fibonacci sphere: quasi-uniform, so every k=8 neighborhood is a
        // well-conditioned local cap.
        let n = 500;
        let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
        let pts: Vec<Vec3> = (0..n)
            .map(|i| {
                let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let r = (1.0 - z * z).sqrt();
                let th = golden * i as f64;
                [r * th.cos(), r * th.sin(), z]
            })
            .collect();
        let cloud = estimate_normals(&PointCloud::new(pts.clone()), 8).unwrap();
        let normals = cloud.normals.unwrap();
        let max_angle_deg = 5.0f64;
        let cos_limit = max_angle_deg.to_radians().cos();
        let mut worst: f64 = 1.0;
        for (p, n) in pts.iter().zip(&normals) {
            // Radial direction is the point itself on the unit sphere.
            let c = dot3(*p, *n);
            worst = worst.min(c);
        }
        assert!(worst > cos_limit, "worst cosine {worst} exceeds 5 degrees");
    }

    #[test]
    fn collinear_points_flagged_invalid() {
        let pts: Vec<Vec3> = (0..10).map(|i| [i as f64 * 0.1, 0.0, 0.0]).collect();
        let cloud = estimate_normals(&PointCloud::new(pts), 5).unwrap();
        for s in cloud.normal_status.unwrap() {
            assert_eq!(s, NormalStatus::Invalid);
        }
    }

    #[test]
    fn fps_is_permutation_invariant() {
        let pts = random_cloud(37, 200);
        let idx = farthest_point_sample(&pts, 16).unwrap();
        let sel: Vec<Vec3> = idx.iter().map(|&i| pts[i]).collect();
        let mut reversed = pts.clone();
        reversed.reverse();
        let idx2 = farthest_point_sample(&reversed, 16).unwrap();
        let sel2: Vec<Vec3> = idx2.iter().map(|&i| reversed[i]).collect();
        assert_eq!(sel, sel2);
    }

    #[test]
    fn fps_spreads_points() {
        // On a line of 11 points, 3 samples land near the middle then ends.
        let pts: Vec<Vec3> = (0..11).map(|i| [i as f64, 0.0, 0.0]).collect();
        let idx = farthest_point_sample(&pts, 3).unwrap();
        assert_eq!(idx[0], 5); // closest to centroid
        let mut ends: Vec<usize> = idx[1..].to_vec();
        ends.sort_unstable();
        assert_eq!(ends, vec![0, 10]);
    }

    #[test]
    fn polygon_distance_inside_and_out() {
        let square = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        assert_eq!(dist_to_polygon([0.5, 0.5], &square).unwrap(), 0.0);
        assert!((dist_to_polygon([2.0, 0.5], &square).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(dist_to_polygon([1.0, 0.5], &square).unwrap(), 0.0); // boundary
        assert!(dist_to_polygon([0.0, 0.0], &[[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]).is_err());
    }

    #[test]
    fn polygon_distance_matches_boundary_sampling_oracle() {
        // Irregular convex pentagon; oracle densely samples the boundary.
        let poly = [[0.0, 0.0], [2.0, -0.5], [3.0, 1.0], [1.5, 2.5], [-0.5, 1.0]];
        let dense: Vec<[f64; 2]> = (0..poly.len())
            .flat_map(|i| {
                let a = poly[i];
                let b = poly[(i + 1) % poly.len()];
                (0..=2000).map(move |k| {
                    let t = k as f64 / 2000.0;
                    [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
                })
            })
            .collect();
        let mut rng = rng_from_seed(43);
        for _ in 0..500 {
            let p = [rng.random_range(-2.0..5.0), rng.random_range(-3.0..5.0)];
            let d = dist_to_polygon(p, &poly).unwrap();
            let oracle_boundary = dense
                .iter()
                .map(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            let inside = point_in_polygon_2d(p, &poly);
            let oracle = if inside { 0.0 } else { oracle_boundary };
            // Dense sampling overestimates by at most half a segment step.
            assert!(
                (d - oracle).abs() < 1e-6 + 2e-3,
                "p={p:?} d={d} oracle={oracle}"
            );
        }
    }

    #[test]
    fn hull_of_square_plus_interior() {
        let pts = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [0.5, 0.5]];
        let hull = convex_hull_2d(&pts);
        assert_eq!(hull.len(), 4);
        assert!(hull.iter().all(|v| (v[0] - 0.5).abs() > 1e-9 || (v[1] - 0.5).abs() > 1e-9));
    }

    #[test]
    fn cloud_binary_and_text_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cloud = PointCloud::new(random_cloud(51, 64));
        let bin = dir.path().join("c.bin");
        cloud.write_binary(&bin).unwrap();
        let back = PointCloud::read_binary(&bin).unwrap();
        assert_eq!(cloud.points, back.points);
        let txt = dir.path().join("c.txt");
        cloud.write_text(&txt).unwrap();
        let back = PointCloud::read_text(&txt).unwrap();
        for (a, b) in cloud.points.iter().zip(&back.points) {
            assert!(dist3(*a, *b) < 1e-12);
        }
    }
}
