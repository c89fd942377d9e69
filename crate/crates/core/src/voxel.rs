//! Point-cloud voxelization into a dense occupancy grid or sparse per-voxel point
//! lists, sparse-to-dense scattering, and occupancy statistics.
//!
//! Grid indices are ordered `(z, x, y)`; a point falls into voxel
//! `floor((coord - origin) / size)` on every axis, so voxels are half-open.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Tensor;

/// Default cap on points kept per voxel for the sparse encoding.
pub const DEFAULT_MAX_POINTS: usize = 35;

/// Width of a sparse feature row: `(x, y, z, r)` plus offsets from the voxel centroid.
pub const POINT_FEATURES: usize = 7;

/// LiDAR return. Stored in single precision, as in Velodyne scans.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub r: f32,
}

impl Point {
    pub fn new(x: f32, y: f32, z: f32, r: f32) -> Self {
        Point { x, y, z, r }
    }

    pub fn xyz(&self) -> [f64; 3] {
        [self.x as f64, self.y as f64, self.z as f64]
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if let Some((i, p)) = points
            .iter()
            .enumerate()
            .find(|(_, p)| ![p.x, p.y, p.z, p.r].iter().all(|v| v.is_finite()))
        {
            return Err(Error::Domain(format!("point {i} is not finite: {p:?}")));
        }
        Ok(PointCloud { points })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Regular grid: `origin = (x0, y0, z0)`, `voxel_size` and `dims` ordered `(z, x, y)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoxelGridSpec {
    pub origin: [f64; 3],
    pub voxel_size: [f64; 3],
    pub dims: [usize; 3],
}

impl VoxelGridSpec {
    pub fn new(origin: [f64; 3], voxel_size: [f64; 3], dims: [usize; 3]) -> Result<Self> {
        let s = VoxelGridSpec {
            origin,
            voxel_size,
            dims,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.origin.iter().any(|v| !v.is_finite())
            || self.voxel_size.iter().any(|v| !(v.is_finite() && *v > 0.0))
            || self.dims.contains(&0)
        {
            return Err(Error::Domain(format!("invalid voxel grid {self:?}")));
        }
        Ok(())
    }

    /// Car grid of the dense detector: 0.1 m voxels over z [-3, 1], x [0, 80], y [-40, 40].
    pub fn car_3dfcn() -> Self {
        VoxelGridSpec {
            origin: [0.0, -40.0, -3.0],
            voxel_size: [0.1, 0.1, 0.1],
            dims: [40, 800, 800],
        }
    }

    /// Car grid of the voxel-feature detector: `[10, 400, 352]` over z [-3, 1],
    /// x [0, 80], y [-35.2, 35.2].
    pub fn car_voxelnet() -> Self {
        VoxelGridSpec {
            origin: [0.0, -35.2, -3.0],
            voxel_size: [0.4, 0.2, 0.2],
            dims: [10, 400, 352],
        }
    }

    pub fn num_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    /// Axis extents in metres, ordered `(z, x, y)`.
    pub fn extent(&self) -> [f64; 3] {
        [
            self.dims[0] as f64 * self.voxel_size[0],
            self.dims[1] as f64 * self.voxel_size[1],
            self.dims[2] as f64 * self.voxel_size[2],
        ]
    }

    /// `(z, x, y)` index of a point, `None` outside the grid.
    pub fn index_of(&self, p: [f64; 3]) -> Option<[usize; 3]> {
        let coords = [p[2], p[0], p[1]];
        let origin = [self.origin[2], self.origin[0], self.origin[1]];
        let mut idx = [0; 3];
        for a in 0..3 {
            let f = ((coords[a] - origin[a]) / self.voxel_size[a]).floor();
            if !(f >= 0.0 && f < self.dims[a] as f64) {
                return None;
            }
            idx[a] = f as usize;
        }
        Some(idx)
    }

    pub fn linear(&self, idx: [usize; 3]) -> usize {
        (idx[0] * self.dims[1] + idx[1]) * self.dims[2] + idx[2]
    }

    pub fn unlinear(&self, lin: usize) -> [usize; 3] {
        let y = lin % self.dims[2];
        let rest = lin / self.dims[2];
        [rest / self.dims[1], rest % self.dims[1], y]
    }

    /// Center of a voxel as `(x, y, z)` metres.
    pub fn voxel_center(&self, idx: [usize; 3]) -> [f64; 3] {
        [
            self.origin[0] + (idx[1] as f64 + 0.5) * self.voxel_size[1],
            self.origin[1] + (idx[2] as f64 + 0.5) * self.voxel_size[2],
            self.origin[2] + (idx[0] as f64 + 0.5) * self.voxel_size[0],
        ]
    }

    /// Same extent resampled to `dims`, e.g. the resolution of a strided head.
    pub fn resampled(&self, dims: [usize; 3]) -> Result<Self> {
        let ext = self.extent();
        VoxelGridSpec::new(
            self.origin,
            [
                ext[0] / dims[0] as f64,
                ext[1] / dims[1] as f64,
                ext[2] / dims[2] as f64,
            ],
            dims,
        )
    }
}

/// Binary grid: 1 where at least one point was observed.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseOccupancy {
    spec: VoxelGridSpec,
    cells: Vec<u8>,
    out_of_bounds: usize,
}

impl DenseOccupancy {
    pub fn spec(&self) -> &VoxelGridSpec {
        &self.spec
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn get(&self, idx: [usize; 3]) -> u8 {
        self.cells[self.spec.linear(idx)]
    }

    /// Points that fell outside the grid.
    pub fn out_of_bounds(&self) -> usize {
        self.out_of_bounds
    }

    /// Single-channel network input `[1, D, H, W]`.
    pub fn to_tensor(&self) -> Tensor {
        let mut dims = vec![1];
        dims.extend(self.spec.dims);
        Tensor::new(dims, self.cells.iter().map(|&c| c as f64).collect())
            .expect("cell count matches grid")
    }
}

pub fn voxelize_occupancy(cloud: &PointCloud, spec: &VoxelGridSpec) -> DenseOccupancy {
    let mut cells = vec![0u8; spec.num_voxels()];
    let mut out_of_bounds = 0;
    for p in cloud.points() {
        match spec.index_of(p.xyz()) {
            Some(idx) => cells[spec.linear(idx)] = 1,
            None => out_of_bounds += 1,
        }
    }
    DenseOccupancy {
        spec: *spec,
        cells,
        out_of_bounds,
    }
}

/// One non-empty voxel of the sparse encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct Voxel {
    pub index: [usize; 3],
    /// Feature rows `(x, y, z, r, x - cx, y - cy, z - cz)`, in original point order.
    pub rows: Vec<[f64; POINT_FEATURES]>,
    /// Points that fell in the voxel before subsampling.
    pub total_points: usize,
}

/// Non-empty voxels in increasing linear-index order.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseVoxelSet {
    spec: VoxelGridSpec,
    max_points: usize,
    voxels: Vec<Voxel>,
    out_of_bounds: usize,
}

impl SparseVoxelSet {
    pub fn spec(&self) -> &VoxelGridSpec {
        &self.spec
    }

    pub fn max_points(&self) -> usize {
        self.max_points
    }

    pub fn voxels(&self) -> &[Voxel] {
        &self.voxels
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn out_of_bounds(&self) -> usize {
        self.out_of_bounds
    }

    /// Points discarded by the per-voxel cap.
    pub fn dropped(&self) -> usize {
        self.voxels
            .iter()
            .map(|v| v.total_points - v.rows.len())
            .sum()
    }

    pub fn indices(&self) -> Vec<[usize; 3]> {
        self.voxels.iter().map(|v| v.index).collect()
    }
}

/// Groups points by voxel and keeps at most `max_points` per voxel.
///
/// Over-full voxels keep a uniformly random subset drawn from a generator seeded
/// with `seed` on a stream selected by the voxel's linear index, so the result
/// depends only on the inputs. Retained rows stay in original point order.
pub fn voxelize_sparse(
    cloud: &PointCloud,
    spec: &VoxelGridSpec,
    max_points: usize,
    seed: u64,
) -> Result<SparseVoxelSet> {
    if max_points == 0 {
        return Err(Error::Domain("max points per voxel must be >= 1".into()));
    }
    spec.validate()?;
    let mut keyed = Vec::with_capacity(cloud.len());
    let mut out_of_bounds = 0;
    for (i, p) in cloud.points().iter().enumerate() {
        match spec.index_of(p.xyz()) {
            Some(idx) => keyed.push((spec.linear(idx), i)),
            None => out_of_bounds += 1,
        }
    }
    keyed.sort_unstable();
    let pts = cloud.points();
    let mut voxels = Vec::new();
    for group in keyed.chunk_by(|a, b| a.0 == b.0) {
        let lin = group[0].0;
        let mut members: Vec<usize> = group.iter().map(|&(_, i)| i).collect();
        if members.len() > max_points {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(lin as u64);
            members.shuffle(&mut rng);
            members.truncate(max_points);
            members.sort_unstable();
        }
        let n = members.len() as f64;
        let mut centroid = [0.0; 3];
        for &i in &members {
            let q = pts[i].xyz();
            for a in 0..3 {
                centroid[a] += q[a];
            }
        }
        let centroid = centroid.map(|c| c / n);
        let rows = members
            .iter()
            .map(|&i| {
                let p = pts[i];
                let q = p.xyz();
                [
                    q[0],
                    q[1],
                    q[2],
                    p.r as f64,
                    q[0] - centroid[0],
                    q[1] - centroid[1],
                    q[2] - centroid[2],
                ]
            })
            .collect();
        voxels.push(Voxel {
            index: spec.unlinear(lin),
            rows,
            total_points: group.len(),
        });
    }
    Ok(SparseVoxelSet {
        spec: *spec,
        max_points,
        voxels,
        out_of_bounds,
    })
}

fn check_unique(indices: &[[usize; 3]], spec: &VoxelGridSpec) -> Result<Vec<usize>> {
    let mut seen = std::collections::HashSet::with_capacity(indices.len());
    let mut lins = Vec::with_capacity(indices.len());
    for idx in indices {
        if (0..3).any(|a| idx[a] >= spec.dims[a]) {
            return Err(Error::Structural(format!(
                "voxel index {idx:?} outside grid {:?}",
                spec.dims
            )));
        }
        let lin = spec.linear(*idx);
        if !seen.insert(lin) {
            return Err(Error::Structural(format!("duplicate voxel index {idx:?}")));
        }
        lins.push(lin);
    }
    Ok(lins)
}

/// Writes row `v` of `features` (`indices.len() x channels`, row-major) into the
/// voxel `indices[v]` of a zero `[channels, D, H, W]` tensor.
pub fn scatter_to_dense(
    indices: &[[usize; 3]],
    features: &[f64],
    spec: &VoxelGridSpec,
    channels: usize,
) -> Result<Tensor> {
    if features.len() != indices.len() * channels {
        return Err(Error::Structural(format!(
            "{} feature values for {} voxels of {channels} channels",
            features.len(),
            indices.len()
        )));
    }
    let lins = check_unique(indices, spec)?;
    let cells = spec.num_voxels();
    let mut out = vec![0.0; channels * cells];
    for (v, lin) in lins.iter().enumerate() {
        for c in 0..channels {
            out[c * cells + lin] = features[v * channels + c];
        }
    }
    let mut shape = vec![channels];
    shape.extend(spec.dims);
    Tensor::new(shape, out)
}

/// Reads the `[channels]` vectors at `indices` back out of a dense tensor.
pub fn gather_from_dense(
    dense: &Tensor,
    indices: &[[usize; 3]],
    spec: &VoxelGridSpec,
) -> Result<Vec<f64>> {
    let cells = spec.num_voxels();
    let shape = dense.shape();
    if shape.len() != 4 || shape[1..] != spec.dims {
        return Err(Error::Structural(format!(
            "dense tensor {shape:?} does not match grid {:?}",
            spec.dims
        )));
    }
    let channels = shape[0];
    let mut out = Vec::with_capacity(indices.len() * channels);
    for idx in indices {
        if (0..3).any(|a| idx[a] >= spec.dims[a]) {
            return Err(Error::Structural(format!("voxel index {idx:?} outside grid")));
        }
        let lin = spec.linear(*idx);
        for c in 0..channels {
            out.push(dense.data()[c * cells + lin]);
        }
    }
    Ok(out)
}

/// Non-empty voxel counts.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OccupancyStats {
    pub non_empty: usize,
    pub fraction: f64,
    /// Non-empty voxels per z slice, lowest slice first.
    pub per_z: Vec<usize>,
}

/// Either voxel encoding.
pub trait Occupancy {
    fn grid(&self) -> &VoxelGridSpec;
    fn occupied(&self) -> Vec<[usize; 3]>;
}

impl Occupancy for DenseOccupancy {
    fn grid(&self) -> &VoxelGridSpec {
        &self.spec
    }

    fn occupied(&self) -> Vec<[usize; 3]> {
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, &c)| c != 0)
            .map(|(i, _)| self.spec.unlinear(i))
            .collect()
    }
}

impl Occupancy for SparseVoxelSet {
    fn grid(&self) -> &VoxelGridSpec {
        &self.spec
    }

    fn occupied(&self) -> Vec<[usize; 3]> {
        self.indices()
    }
}

pub fn occupancy_stats(grid: &impl Occupancy) -> OccupancyStats {
    let spec = grid.grid();
    let mut per_z = vec![0; spec.dims[0]];
    let occupied = grid.occupied();
    for idx in &occupied {
        per_z[idx[0]] += 1;
    }
    OccupancyStats {
        non_empty: occupied.len(),
        fraction: occupied.len() as f64 / spec.num_voxels() as f64,
        per_z,
    }
}
