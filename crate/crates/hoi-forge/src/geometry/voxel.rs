//! Occupancy voxelization on a world-aligned lattice.
//!
//! All grids snap their origin to integer multiples of the voxel size so
//! that grids built independently (hand vs. object) share cells and can
//! be intersected. Cell assignment is half-open: a point belongs to cell
//! `floor((p - origin) / h)`, so samples lying exactly on a grid plane
//! register in the upper cell.

use crate::error::{Error, Result};

use super::mesh::TriMesh;
use super::{add3, scale3, Vec3};

#[derive(Debug, Clone)]
pub struct VoxelGrid {
    pub origin: Vec3,
    pub voxel_size: f64,
    pub dims: [usize; 3],
    /// World-lattice index of the origin cell (origin / voxel_size).
    base: [i64; 3],
    bits: Vec<u64>,
}

impl VoxelGrid {
    /// Empty grid whose snapped cells cover `bbox`.
    pub fn new(voxel_size: f64, bbox: (Vec3, Vec3)) -> Result<VoxelGrid> {
        if !(voxel_size > 0.0) {
            return Err(Error::contract("voxel_size must be positive"));
        }
        let (lo, hi) = bbox;
        let mut base = [0i64; 3];
        let mut dims = [0usize; 3];
        for a in 0..3 {
            if hi[a] < lo[a] {
                return Err(Error::contract("voxel bbox has negative extent"));
            }
            base[a] = (lo[a] / voxel_size).floor() as i64;
            let hi_cell = (hi[a] / voxel_size).floor() as i64;
            dims[a] = (hi_cell - base[a] + 1) as usize;
        }
        let n = dims[0] * dims[1] * dims[2];
        if n > 200_000_000 {
            return Err(Error::contract(format!("voxel grid too large: {n} cells")));
        }
        Ok(VoxelGrid {
            origin: [
                base[0] as f64 * voxel_size,
                base[1] as f64 * voxel_size,
                base[2] as f64 * voxel_size,
            ],
            voxel_size,
            dims,
            base,
            bits: vec![0; n.div_ceil(64)],
        })
    }

    fn flat(&self, idx: [usize; 3]) -> usize {
        (idx[0] * self.dims[1] + idx[1]) * self.dims[2] + idx[2]
    }

    /// Local cell of a world point, if inside the grid.
    pub fn cell_of(&self, p: Vec3) -> Option<[usize; 3]> {
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let c = (p[a] / self.voxel_size).floor() as i64 - self.base[a];
            if c < 0 || c as usize >= self.dims[a] {
                return None;
            }
            idx[a] = c as usize;
        }
        Some(idx)
    }

    pub fn mark_cell(&mut self, idx: [usize; 3]) {
        let f = self.flat(idx);
        self.bits[f / 64] |= 1 << (f % 64);
    }

    /// Mark the cell containing `p`; error when outside the grid (the
    /// declared bbox was too small).
    pub fn mark_point(&mut self, p: Vec3) -> Result<()> {
        match self.cell_of(p) {
            Some(idx) => {
                self.mark_cell(idx);
                Ok(())
            }
            None => Err(Error::contract(format!(
                "point {p:?} outside the voxel bbox (bbox too small)"
            ))),
        }
    }

    pub fn is_occupied(&self, idx: [usize; 3]) -> bool {
        let f = self.flat(idx);
        self.bits[f / 64] >> (f % 64) & 1 == 1
    }

    pub fn count_occupied(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Occupied volume in cubic centimeters.
    pub fn volume_cm3(&self) -> f64 {
        let side_cm = self.voxel_size * 100.0;
        self.count_occupied() as f64 * side_cm.powi(3)
    }

    pub fn occupied_cells(&self) -> Vec<[usize; 3]> {
        let mut out = Vec::new();
        for x in 0..self.dims[0] {
            for y in 0..self.dims[1] {
                for z in 0..self.dims[2] {
                    if self.is_occupied([x, y, z]) {
                        out.push([x, y, z]);
                    }
                }
            }
        }
        out
    }

    /// World-lattice index of a local cell.
    pub fn world_cell(&self, idx: [usize; 3]) -> [i64; 3] {
        [
            self.base[0] + idx[0] as i64,
            self.base[1] + idx[1] as i64,
            self.base[2] + idx[2] as i64,
        ]
    }

    /// Number of world cells occupied in both grids. Both grids must use
    /// the same voxel size (they share the world lattice by construction).
    pub fn shared_count(&self, other: &VoxelGrid) -> Result<usize> {
        if (self.voxel_size - other.voxel_size).abs() > 1e-15 {
            return Err(Error::contract("shared_count across different voxel sizes"));
        }
        let mut n = 0;
        for idx in self.occupied_cells() {
            let w = self.world_cell(idx);
            let mut local = [0usize; 3];
            let mut inside = true;
            for a in 0..3 {
                let c = w[a] - other.base[a];
                if c < 0 || c as usize >= other.dims[a] {
                    inside = false;
                    break;
                }
                local[a] = c as usize;
            }
            if inside && other.is_occupied(local) {
                n += 1;
            }
        }
        Ok(n)
    }

    pub fn center_of(&self, idx: [usize; 3]) -> Vec3 {
        [
            self.origin[0] + (idx[0] as f64 + 0.5) * self.voxel_size,
            self.origin[1] + (idx[1] as f64 + 0.5) * self.voxel_size,
            self.origin[2] + (idx[2] as f64 + 0.5) * self.voxel_size,
        ]
    }
}

/// Mark the cell under every point.
pub fn voxelize_cloud(points: &[Vec3], voxel_size: f64, bbox: (Vec3, Vec3)) -> Result<VoxelGrid> {
    let mut grid = VoxelGrid::new(voxel_size, bbox)?;
    for &p in points {
        grid.mark_point(p)?;
    }
    Ok(grid)
}

/// Surface occupancy: faces are recursively bisected along their longest
/// edge until every edge is at most half a voxel, then each leaf marks
/// its three corners. Subdivision vertices are spaced at most h/2 apart,
/// giving at least 4 samples per voxel-area of surface. Corners are used
/// rather than centroids because midpoints of lattice-plane coordinates
/// stay exactly on the plane while a /3 centroid would drift off it.
pub fn voxelize_surface(mesh: &TriMesh, voxel_size: f64, bbox: (Vec3, Vec3)) -> Result<VoxelGrid> {
    let mut grid = VoxelGrid::new(voxel_size, bbox)?;
    let limit = voxel_size * 0.5;
    for f in &mesh.faces {
        subdivide_mark(
            &mut grid,
            mesh.vertices[f[0]],
            mesh.vertices[f[1]],
            mesh.vertices[f[2]],
            limit,
            0,
        )?;
    }
    Ok(grid)
}

fn subdivide_mark(
    grid: &mut VoxelGrid,
    a: Vec3,
    b: Vec3,
    c: Vec3,
    limit: f64,
    depth: usize,
) -> Result<()> {
    let lab = super::dist3(a, b);
    let lbc = super::dist3(b, c);
    let lca = super::dist3(c, a);
    let longest = lab.max(lbc).max(lca);
    if longest <= limit || depth > 30 {
        grid.mark_point(a)?;
        grid.mark_point(b)?;
        grid.mark_point(c)?;
        return Ok(());
    }
    // Bisect the longest edge.
    if lab >= lbc && lab >= lca {
        let m = scale3(add3(a, b), 0.5);
        subdivide_mark(grid, a, m, c, limit, depth + 1)?;
        subdivide_mark(grid, m, b, c, limit, depth + 1)?;
    } else if lbc >= lca {
        let m = scale3(add3(b, c), 0.5);
        subdivide_mark(grid, a, b, m, limit, depth + 1)?;
        subdivide_mark(grid, a, m, c, limit, depth + 1)?;
    } else {
        let m = scale3(add3(c, a), 0.5);
        subdivide_mark(grid, a, b, m, limit, depth + 1)?;
        subdivide_mark(grid, m, b, c, limit, depth + 1)?;
    }
    Ok(())
}

/// Interior occupancy by ray parity: one `+x` ray per `(y, z)` cell
/// column; a voxel center is interior when an odd number of surface
/// crossings lie below it. Rays grazing an edge or a parallel face
/// restart the column with a deterministic `1e-7` jitter.
pub fn voxelize_solid(mesh: &TriMesh, voxel_size: f64, bbox: (Vec3, Vec3)) -> Result<VoxelGrid> {
    mesh.check_watertight()?;
    let (mlo, mhi) = mesh.bounds();
    for a in 0..3 {
        if mlo[a] < bbox.0[a] - 1e-12 || mhi[a] > bbox.1[a] + 1e-12 {
            return Err(Error::contract(
                "mesh extends beyond the voxel bbox (bbox too small)",
            ));
        }
    }
    let mut grid = VoxelGrid::new(voxel_size, bbox)?;
    for iy in 0..grid.dims[1] {
        for iz in 0..grid.dims[2] {
            let center = grid.center_of([0, iy, iz]);
            let mut crossings: Option<Vec<f64>> = None;
            for attempt in 0..12 {
                let jitter = attempt as f64 * 1e-7;
                let y = center[1] + jitter;
                let z = center[2] + jitter * 1.37;
                match column_crossings(mesh, y, z) {
                    Some(xs) => {
                        crossings = Some(xs);
                        break;
                    }
                    None => continue,
                }
            }
            let xs = crossings.ok_or_else(|| {
                Error::numeric("voxelize_solid", "ray jitter exhausted on a degenerate column")
            })?;
            for ix in 0..grid.dims[0] {
                let cx = grid.origin[0] + (ix as f64 + 0.5) * voxel_size;
                // Centers on the surface itself (within 1e-12 of a
                // crossing) count as boundary, not interior.
                if xs.iter().any(|&x| (x - cx).abs() <= 1e-12) {
                    continue;
                }
                let below = xs.iter().filter(|&&x| x < cx).count();
                if below % 2 == 1 {
                    grid.mark_cell([ix, iy, iz]);
                }
            }
        }
    }
    Ok(grid)
}

/// All x-values where the +x line through `(y, z)` crosses the mesh, or
/// `None` when the line grazes an edge or a parallel face and needs a
/// jittered retry.
fn column_crossings(mesh: &TriMesh, y: f64, z: f64) -> Option<Vec<f64>> {
    let mut xs = Vec::new();
    for f in &mesh.faces {
        let a = mesh.vertices[f[0]];
        let b = mesh.vertices[f[1]];
        let c = mesh.vertices[f[2]];
        // Project onto (y, z); the 2-D triangle area equals the x
        // component of the face normal, so a tiny area means the face is
        // parallel to the ray.
        let q0 = [a[1], a[2]];
        let q1 = [b[1], b[2]];
        let q2 = [c[1], c[2]];
        let area = (q1[0] - q0[0]) * (q2[1] - q0[1]) - (q1[1] - q0[1]) * (q2[0] - q0[0]);
        let e0 = (q2[0] - q1[0]) * (z - q1[1]) - (q2[1] - q1[1]) * (y - q1[0]);
        let e1 = (q0[0] - q2[0]) * (z - q2[1]) - (q0[1] - q2[1]) * (y - q2[0]);
        let e2 = (q1[0] - q0[0]) * (z - q0[1]) - (q1[1] - q0[1]) * (y - q0[0]);
        let scale = area.abs().max(1e-30);
        if area.abs() < 1e-18 {
            // Parallel face: grazing if the point is anywhere near its
            // projected (degenerate) footprint.
            let near = [q0, q1, q2].iter().any(|q| {
                (q[0] - y).abs() < 1e-6 && (q[1] - z).abs() < 1e-6
            });
            if near || (e0.abs() < 1e-12 && e1.abs() < 1e-12 && e2.abs() < 1e-12) {
                return None;
            }
            continue;
        }
        let inside_pos = e0 > 0.0 && e1 > 0.0 && e2 > 0.0;
        let inside_neg = e0 < 0.0 && e1 < 0.0 && e2 < 0.0;
        let graze = [e0, e1, e2].iter().any(|e| e.abs() <= 1e-9 * scale);
        if graze {
            // Only a problem when the point is on/near the triangle
            // boundary, i.e. the other coordinates do not already exclude it.
            let maybe_on = (inside_pos || inside_neg)
                || [e0, e1, e2].iter().all(|e| *e >= -1e-9 * scale)
                || [e0, e1, e2].iter().all(|e| *e <= 1e-9 * scale);
            if maybe_on {
                return None;
            }
        }
        if inside_pos == inside_neg {
            continue; // outside
        }
        // Barycentric interpolation of the x coordinate.
        let l0 = e0 / area;
        let l1 = e1 / area;
        let l2 = e2 / area;
        xs.push(l0 * a[0] + l1 * b[0] + l2 * c[0]);
    }
    xs.sort_by(|p, q| p.partial_cmp(q).unwrap());
    Some(xs)
}

#[cfg(test)]
mod tests {
    use super::super::mesh::{box_mesh, tetrahedron_mesh};
    use super::*;
    use crate::geometry::sub3;

    const H: f64 = 0.005; // the paper-scale 0.5 cm voxel

    #[test]
    fn single_point_occupies_one_voxel() {
        let grid = voxelize_cloud(
            &[[0.0025, 0.0025, 0.0025]],
            H,
            ([0.0; 3], [0.01; 3]),
        )
        .unwrap();
        assert_eq!(grid.count_occupied(), 1);
        assert!(grid.is_occupied([0, 0, 0]));
    }

    #[test]
    fn empty_cloud_empty_grid() {
        let grid = voxelize_cloud(&[], H, ([0.0; 3], [0.01; 3])).unwrap();
        assert_eq!(grid.count_occupied(), 0);
    }

    #[test]
    fn point_outside_bbox_is_contract_violation() {
        assert!(voxelize_cloud(&[[1.0, 0.0, 0.0]], H, ([0.0; 3], [0.01; 3])).is_err());
    }

    #[test]
    fn aligned_cube_surface_shell_matches_enumeration() {
        // 1 cm cube, 0.5 cm voxels, cube corners on grid points. Under the
        // half-open cell rule, a surface point maps to cell index
        // f(t) in {0: t in [0, 0.005), 1: t in [0.005, 0.01), 2: t = 0.01}.
        // Every surface point has >= 1 coordinate pinned to a face (0 or
        // 0.01) and the others free in [0, 0.01], so the image is all of
        // {0,1,2}^3 except (1,1,1), whose preimage would need every
        // coordinate strictly inside. That is 26 cells.
        let mesh = box_mesh([0.0; 3], [0.01; 3]);
        let grid = voxelize_surface(&mesh, H, ([0.0; 3], [0.0101; 3])).unwrap();
        let occupied = grid.occupied_cells();
        let mut expected = Vec::new();
        for x in 0..3 {
            for y in 0..3 {
                for z in 0..3 {
                    if !(x == 1 && y == 1 && z == 1) {
                        expected.push([x, y, z]);
                    }
                }
            }
        }
        assert_eq!(occupied, expected);
    }

    #[test]
    fn solid_cube_interior_is_eight_voxels() {
        // 1 cm cube at 0.5 cm voxels: 2x2x2 centers strictly inside.
        let mesh = box_mesh([0.0; 3], [0.01; 3]);
        let grid = voxelize_solid(&mesh, H, ([0.0; 3], [0.0101; 3])).unwrap();
        assert_eq!(grid.count_occupied(), 8);
        for cell in grid.occupied_cells() {
            assert!(cell.iter().all(|&c| c < 2), "unexpected cell {cell:?}");
        }
    }

    #[test]
    fn solid_volume_close_to_analytic_for_cube_and_tet() {
        // Voxel <= extent/10 keeps discretization error under 10%.
        let cube = box_mesh([0.0; 3], [0.04; 3]);
        let grid = voxelize_solid(&cube, 0.004, ([-0.01; 3], [0.05; 3])).unwrap();
        let vol = grid.count_occupied() as f64 * 0.004f64.powi(3);
        let analytic = 0.04f64.powi(3);
        assert!((vol - analytic).abs() / analytic < 0.10, "cube volume {vol} vs {analytic}");

        // Rotate the tetrahedron into general position: its rest faces
        // have (1,1,1)-type normals that are resonant with the cubic
        // lattice (every boundary cell shares one fractional offset),
        // which biases the center-parity count.
        let tet = tetrahedron_mesh(0.06)
            .transformed(&super::super::RigidPose6::new([0.2, 0.4, 0.7], [0.0; 3]));
        let (lo, hi) = tet.bounds();
        let pad = [0.005; 3];
        let grid = voxelize_solid(&tet, 0.002, (sub3(lo, pad), add3(hi, pad))).unwrap();
        let vol = grid.count_occupied() as f64 * 0.002f64.powi(3);
        let analytic = tet.signed_volume();
        assert!((vol - analytic).abs() / analytic < 0.10, "tet volume {vol} vs {analytic}");
    }

    #[test]
    fn tetrahedron_volume_against_monte_carlo_parity() {
        // Monte-Carlo interior fraction of the bounding box, using the
        // same parity rule through an independent per-point ray test.
        use crate::rng::rng_from_seed;
        use rand::Rng;
        let tet = tetrahedron_mesh(0.06);
        let (lo, hi) = tet.bounds();
        let mut rng = rng_from_seed(99);
        let mut inside = 0usize;
        let n = 20_000;
        for _ in 0..n {
            let p = [
                rng.random_range(lo[0]..hi[0]),
                rng.random_range(lo[1]..hi[1]),
                rng.random_range(lo[2]..hi[2]),
            ];
            let xs = column_crossings(&tet, p[1], p[2]).expect("random points do not graze");
            if xs.iter().filter(|&&x| x < p[0]).count() % 2 == 1 {
                inside += 1;
            }
        }
        let box_vol =
            (hi[0] - lo[0]) * (hi[1] - lo[1]) * (hi[2] - lo[2]);
        let mc = inside as f64 / n as f64 * box_vol;
        let analytic = tet.signed_volume();
        assert!((mc - analytic).abs() / analytic < 0.10, "mc {mc} vs {analytic}");
    }

    #[test]
    fn non_watertight_mesh_rejected_for_solid() {
        let mut mesh = box_mesh([0.0; 3], [0.01; 3]);
        mesh.faces.pop();
        let err = voxelize_solid(&mesh, H, ([0.0; 3], [0.0101; 3])).unwrap_err();
        assert!(err.to_string().contains("watertight"));
    }

    #[test]
    fn shared_count_on_disjoint_and_identical_grids() {
        let a = voxelize_cloud(&[[0.0025; 3]], H, ([0.0; 3], [0.01; 3])).unwrap();
        let far = voxelize_cloud(&[[0.1025; 3]], H, ([0.1; 3], [0.11; 3])).unwrap();
        assert_eq!(a.shared_count(&far).unwrap(), 0);
        assert_eq!(a.shared_count(&a).unwrap(), 1);
    }

    #[test]
    fn shared_count_respects_world_alignment() {
        // Same world point marked through two different bboxes lands in
        // the same world cell.
        let a = voxelize_cloud(&[[0.0129, 0.0129, 0.0129]], H, ([0.01; 3], [0.02; 3])).unwrap();
        let b = voxelize_cloud(&[[0.0129, 0.0129, 0.0129]], H, ([0.0; 3], [0.05; 3])).unwrap();
        assert_eq!(a.shared_count(&b).unwrap(), 1);
    }

    #[test]
    fn surface_sampling_density_bound_holds() {
        // Each leaf triangle contributes 4 marks and has area at most
        // sqrt(3)/4 * (h/2)^2; verify the bound via a long thin triangle.
        let mesh = TriMesh::new(
            vec![[0.0, 0.0, 0.0], [0.05, 0.0, 0.0], [0.0, 0.001, 0.0]],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let grid = voxelize_surface(&mesh, H, ([-0.01; 3], [0.06; 3])).unwrap();
        // The triangle spans 10 voxels along x; every one must be hit.
        let occupied = grid.occupied_cells();
        let xs: std::collections::BTreeSet<usize> = occupied.iter().map(|c| c[0]).collect();
        assert!(xs.len() >= 10, "only x-cells {xs:?}");
    }
}
