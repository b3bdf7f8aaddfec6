//! Patch grids, lesion-balanced patch sampling and overlap-averaged reassembly.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Geometry, LabelVolume, Volume3D};

/// How overlapping patch values are fused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    #[default]
    Mean,
    /// Weights each patch voxel by a Gaussian centred on the patch.
    Gaussian,
}

/// Ordered patch corners covering a volume. All triples are `[x, y, z]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGrid {
    dims: [usize; 3],
    patch: [usize; 3],
    stride: [usize; 3],
    origins: Vec<[usize; 3]>,
}

fn axis_origins(dim: usize, patch: usize, stride: usize) -> Vec<usize> {
    let last = dim - patch;
    let mut out: Vec<usize> = (0..=last).step_by(stride).collect();
    if *out.last().expect("origin 0 always present") != last {
        out.push(last);
    }
    out
}

/// Stride-spaced origins per axis with a final origin clamped flush to the
/// volume boundary.
pub fn plan_grid(dims: [usize; 3], patch: [usize; 3], stride: [usize; 3]) -> Result<PatchGrid> {
    for a in 0..3 {
        if patch[a] == 0 || patch[a] > dims[a] {
            return Err(Error::Plan(format!("patch {:?} does not fit volume {:?}", patch, dims)));
        }
        if stride[a] == 0 || stride[a] > patch[a] {
            return Err(Error::Plan(format!("stride {:?} must lie in [1, patch {:?}]", stride, patch)));
        }
    }
    let per_axis: Vec<Vec<usize>> = (0..3).map(|a| axis_origins(dims[a], patch[a], stride[a])).collect();
    let mut origins = Vec::new();
    for &z in &per_axis[2] {
        for &y in &per_axis[1] {
            for &x in &per_axis[0] {
                origins.push([x, y, z]);
            }
        }
    }
    Ok(PatchGrid { dims, patch, stride, origins })
}

impl PatchGrid {
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn patch_size(&self) -> [usize; 3] {
        self.patch
    }

    pub fn stride(&self) -> [usize; 3] {
        self.stride
    }

    pub fn origins(&self) -> &[[usize; 3]] {
        &self.origins
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn patch_len(&self) -> usize {
        self.patch.iter().product()
    }

    pub fn check_dims(&self, dims: [usize; 3]) -> Result<()> {
        if dims != self.dims {
            return Err(Error::Geometry(format!("grid planned for {:?}, volume is {:?}", self.dims, dims)));
        }
        Ok(())
    }
}

/// Copies the `size` block at `origin` out of a single-channel x-fastest array.
pub fn crop<T: Copy>(data: &[T], dims: [usize; 3], origin: [usize; 3], size: [usize; 3]) -> Vec<T> {
    let mut out = Vec::with_capacity(size.iter().product());
    for z in origin[2]..origin[2] + size[2] {
        for y in origin[1]..origin[1] + size[1] {
            let start = origin[0] + dims[0] * (y + dims[1] * z);
            out.extend_from_slice(&data[start..start + size[0]]);
        }
    }
    out
}

/// Patch `i` of `volume` at the i-th grid origin.
pub fn extract(volume: &Volume3D, grid: &PatchGrid) -> Result<Vec<Volume3D>> {
    grid.check_dims(volume.dims())?;
    let g = Geometry::new(grid.patch, volume.geometry().voxel_mm)?;
    grid.origins
        .iter()
        .map(|&o| Volume3D::new(g, crop(volume.data(), grid.dims, o, grid.patch)))
        .collect()
}

pub fn extract_labels(labels: &LabelVolume, grid: &PatchGrid) -> Result<Vec<LabelVolume>> {
    grid.check_dims(labels.dims())?;
    let g = Geometry::new(grid.patch, labels.geometry().voxel_mm)?;
    grid.origins
        .iter()
        .map(|&o| LabelVolume::new(g, labels.num_classes(), crop(labels.data(), grid.dims, o, grid.patch)))
        .collect()
}

fn gaussian_weights(patch: [usize; 3]) -> Vec<f64> {
    let axis = |n: usize| -> Vec<f64> {
        let sigma = n as f64 / 8.0;
        let c = (n as f64 - 1.0) / 2.0;
        (0..n).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect()
    };
    let (wx, wy, wz) = (axis(patch[0]), axis(patch[1]), axis(patch[2]));
    let mut w = Vec::with_capacity(patch.iter().product());
    for z in &wz {
        for y in &wy {
            for x in &wx {
                w.push(x * y * z);
            }
        }
    }
    w
}

/// Fuses multi-channel patches (channel-major, each channel a patch block)
/// into a `channels × volume` array. Accumulation runs in grid order.
pub fn reassemble_values(patches: &[Vec<f64>], channels: usize, grid: &PatchGrid, fusion: Fusion) -> Result<Vec<f64>> {
    if patches.len() != grid.len() {
        return Err(Error::Geometry(format!("{} patches for a grid of {}", patches.len(), grid.len())));
    }
    let plen = grid.patch_len();
    let vol: usize = grid.dims.iter().product();
    let weights = match fusion {
        Fusion::Mean => vec![1.0; plen],
        Fusion::Gaussian => gaussian_weights(grid.patch),
    };
    let mut acc = vec![0.0; channels * vol];
    let mut wsum = vec![0.0; vol];
    let [px, py, pz] = grid.patch;
    let [nx, ny, _] = grid.dims;
    for (patch, origin) in patches.iter().zip(&grid.origins) {
        if patch.len() != channels * plen {
            return Err(Error::Geometry(format!("patch has {} values, expected {}", patch.len(), channels * plen)));
        }
        for z in 0..pz {
            for y in 0..py {
                for x in 0..px {
                    let p = x + px * (y + py * z);
                    let v = origin[0] + x + nx * (origin[1] + y + ny * (origin[2] + z));
                    wsum[v] += weights[p];
                    for c in 0..channels {
                        acc[c * vol + v] += weights[p] * patch[c * plen + p];
                    }
                }
            }
        }
    }
    for c in 0..channels {
        for v in 0..vol {
            acc[c * vol + v] /= wsum[v];
        }
    }
    Ok(acc)
}

/// Overlap-averaged reassembly of single-channel patches.
pub fn reassemble(patches: &[Volume3D], grid: &PatchGrid, geometry: &Geometry) -> Result<Volume3D> {
    grid.check_dims(geometry.dims)?;
    for p in patches {
        if p.dims() != grid.patch {
            return Err(Error::Geometry(format!("patch dims {:?} differ from grid patch {:?}", p.dims(), grid.patch)));
        }
    }
    let values: Vec<Vec<f64>> = patches.iter().map(Volume3D::to_f64).collect();
    let fused = reassemble_values(&values, 1, grid, Fusion::Mean)?;
    Volume3D::from_f64(*geometry, &fused)
}

/// One training example cut from a case.
#[derive(Debug, Clone)]
pub struct SampledPatch {
    pub origin: [usize; 3],
    pub lc: Volume3D,
    pub hc: Volume3D,
    pub labels: LabelVolume,
    pub has_lesion: bool,
    /// Set when lesion sampling was requested but the case has no lesions.
    pub flagged: bool,
}

/// Draws patch origins, preferring lesion-containing ones with a fixed probability.
#[derive(Debug, Clone)]
pub struct PatchSampler {
    patch: [usize; 3],
    range: [usize; 3],
    lesion_origins: Vec<[usize; 3]>,
}

impl PatchSampler {
    pub fn new(labels: &LabelVolume, patch: [usize; 3]) -> Result<Self> {
        let dims = labels.dims();
        if (0..3).any(|a| patch[a] == 0 || patch[a] > dims[a]) {
            return Err(Error::Plan(format!("patch {:?} does not fit volume {:?}", patch, dims)));
        }
        let range = [0, 1, 2].map(|a| dims[a] - patch[a] + 1);
        // 3D prefix sums of the lesion mask, padded by one on the low side
        let [nx, ny, nz] = dims;
        let (sx, sy) = (nx + 1, ny + 1);
        let mut pre = vec![0u32; sx * sy * (nz + 1)];
        let at = |x: usize, y: usize, z: usize| x + sx * (y + sy * z);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let v = (labels.data()[x + nx * (y + ny * z)] == 1) as u32;
                    pre[at(x + 1, y + 1, z + 1)] = v + pre[at(x, y + 1, z + 1)] + pre[at(x + 1, y, z + 1)] + pre[at(x + 1, y + 1, z)]
                        - pre[at(x, y, z + 1)]
                        - pre[at(x, y + 1, z)]
                        - pre[at(x + 1, y, z)]
                        + pre[at(x, y, z)];
                }
            }
        }
        let mut lesion_origins = Vec::new();
        for z in 0..range[2] {
            for y in 0..range[1] {
                for x in 0..range[0] {
                    let (x1, y1, z1) = (x + patch[0], y + patch[1], z + patch[2]);
                    let count = pre[at(x1, y1, z1)] as i64 - pre[at(x, y1, z1)] as i64 - pre[at(x1, y, z1)] as i64 - pre[at(x1, y1, z)] as i64
                        + pre[at(x, y, z1)] as i64
                        + pre[at(x, y1, z)] as i64
                        + pre[at(x1, y, z)] as i64
                        - pre[at(x, y, z)] as i64;
                    if count > 0 {
                        lesion_origins.push([x, y, z]);
                    }
                }
            }
        }
        Ok(PatchSampler { patch, range, lesion_origins })
    }

    pub fn num_origins(&self) -> usize {
        self.range.iter().product()
    }

    pub fn lesion_origins(&self) -> &[[usize; 3]] {
        &self.lesion_origins
    }

    /// Returns `(origin, flagged)`.
    pub fn sample_origin(&self, lesion_target_frac: f64, rng: &mut crate::rng::Rng) -> ([usize; 3], bool) {
        let u: f64 = rng.random();
        let flagged = lesion_target_frac > 0.0 && self.lesion_origins.is_empty();
        if u < lesion_target_frac && !self.lesion_origins.is_empty() {
            let i = rng.random_range(0..self.lesion_origins.len());
            return (self.lesion_origins[i], flagged);
        }
        let i = rng.random_range(0..self.num_origins());
        let x = i % self.range[0];
        let y = (i / self.range[0]) % self.range[1];
        let z = i / (self.range[0] * self.range[1]);
        ([x, y, z], flagged)
    }

    pub fn sample(
        &self,
        lc: &Volume3D,
        hc: &Volume3D,
        labels: &LabelVolume,
        lesion_target_frac: f64,
        rng: &mut crate::rng::Rng,
    ) -> Result<SampledPatch> {
        lc.geometry().ensure_same(hc.geometry(), "low-count vs high-count")?;
        lc.geometry().ensure_same(labels.geometry(), "volume vs labels")?;
        let (origin, flagged) = self.sample_origin(lesion_target_frac, rng);
        let g = Geometry::new(self.patch, lc.geometry().voxel_mm)?;
        let dims = lc.dims();
        let lab = crop(labels.data(), dims, origin, self.patch);
        let has_lesion = lab.contains(&1);
        Ok(SampledPatch {
            origin,
            lc: Volume3D::new(g, crop(lc.data(), dims, origin, self.patch))?,
            hc: Volume3D::new(g, crop(hc.data(), dims, origin, self.patch))?,
            labels: LabelVolume::new(g, labels.num_classes(), lab)?,
            has_lesion,
            flagged,
        })
    }
}

/// One-shot form of [`PatchSampler::sample`].
pub fn sample_training_patch(
    lc: &Volume3D,
    hc: &Volume3D,
    labels: &LabelVolume,
    patch: [usize; 3],
    lesion_target_frac: f64,
    rng: &mut crate::rng::Rng,
) -> Result<SampledPatch> {
    PatchSampler::new(labels, patch)?.sample(lc, hc, labels, lesion_target_frac, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn geom(d: [usize; 3]) -> Geometry {
        Geometry::new(d, [1.0; 3]).unwrap()
    }

    #[test]
    fn grid_examples() {
        let g = plan_grid([64; 3], [32; 3], [16; 3]).unwrap();
        assert_eq!(g.len(), 27);
        assert_eq!(axis_origins(64, 32, 16), vec![0, 16, 32]);
        let one = plan_grid([16, 8, 4], [16, 8, 4], [4, 4, 4]).unwrap();
        assert_eq!(one.origins(), &[[0, 0, 0]]);
        // enumerate multiples of 32 not exceeding 440-128, then the clamp
        let mut expected: Vec<usize> = (0..).map(|k| 32 * k).take_while(|&o| o <= 440 - 128).collect();
        if *expected.last().unwrap() != 312 {
            expected.push(312);
        }
        assert_eq!(axis_origins(440, 128, 32), expected);
        assert_eq!(expected.len(), 11);
        assert!(matches!(plan_grid([8; 3], [9, 8, 8], [4; 3]), Err(Error::Plan(_))));
        assert!(matches!(plan_grid([8; 3], [4; 3], [5, 4, 4]), Err(Error::Plan(_))));
    }

    #[test]
    fn extract_matches_direct_indexing() {
        let gm = geom([8, 8, 8]);
        let data: Vec<f32> = (0..512).map(|i| ((i * 37) % 101) as f32 / 7.0).collect();
        let v = Volume3D::new(gm, data).unwrap();
        let grid = plan_grid([8; 3], [4; 3], [2; 3]).unwrap();
        let patches = extract(&v, &grid).unwrap();
        for (p, o) in patches.iter().zip(grid.origins()) {
            for z in 0..4 {
                for y in 0..4 {
                    for x in 0..4 {
                        assert_eq!(p.get(x, y, z), v.get(o[0] + x, o[1] + y, o[2] + z));
                    }
                }
            }
        }
        let single = plan_grid([8; 3], [8; 3], [8; 3]).unwrap();
        assert_eq!(extract(&v, &single).unwrap()[0].data(), v.data());
    }

    #[test]
    fn overlapping_constant_patches_average() {
        let gm = geom([2, 2, 2]);
        let grid = PatchGrid { dims: [2; 3], patch: [2; 3], stride: [1; 3], origins: vec![[0; 3], [0; 3]] };
        let zeros = Volume3D::filled(gm, 0.0).unwrap();
        let twos = Volume3D::filled(gm, 2.0).unwrap();
        let out = reassemble(&[zeros, twos], &grid, &gm).unwrap();
        assert!(out.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn reassemble_matches_accumulate_oracle() {
        let dims = [6, 6, 6];
        let grid = plan_grid(dims, [4; 3], [3; 3]).unwrap();
        let mut rng = crate::rng::from_seed(4);
        let patches: Vec<Vec<f64>> = (0..grid.len()).map(|_| (0..64).map(|_| rng.random::<f64>()).collect()).collect();
        let fused = reassemble_values(&patches, 1, &grid, Fusion::Mean).unwrap();
        // brute force: for each voxel collect every covering patch value
        for z in 0..6 {
            for y in 0..6 {
                for x in 0..6 {
                    let mut vals = Vec::new();
                    for (p, o) in patches.iter().zip(grid.origins()) {
                        if (o[0]..o[0] + 4).contains(&x) && (o[1]..o[1] + 4).contains(&y) && (o[2]..o[2] + 4).contains(&z) {
                            vals.push(p[(x - o[0]) + 4 * ((y - o[1]) + 4 * (z - o[2]))]);
                        }
                    }
                    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                    assert!((fused[x + 6 * (y + 6 * z)] - mean).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn gaussian_fusion_keeps_identity() {
        let gm = geom([6, 5, 7]);
        let data: Vec<f32> = (0..gm.len()).map(|i| (i % 13) as f32).collect();
        let v = Volume3D::new(gm, data).unwrap();
        let grid = plan_grid(gm.dims, [4, 4, 4], [2, 3, 1]).unwrap();
        let patches: Vec<Vec<f64>> = extract(&v, &grid).unwrap().iter().map(Volume3D::to_f64).collect();
        let fused = reassemble_values(&patches, 1, &grid, Fusion::Gaussian).unwrap();
        for (a, b) in fused.iter().zip(v.data()) {
            assert!((a - *b as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn lesion_sampling_contract() {
        let gm = geom([10, 10, 10]);
        let mut lab = vec![0u8; 1000];
        lab[7 + 10 * (7 + 10 * 7)] = 1;
        let labels = LabelVolume::new(gm, 3, lab).unwrap();
        let v = Volume3D::filled(gm, 1.0).unwrap();
        let sampler = PatchSampler::new(&labels, [4; 3]).unwrap();
        let mut rng = crate::rng::Rng::seed_from_u64(1);
        for _ in 0..200 {
            let p = sampler.sample(&v, &v, &labels, 1.0, &mut rng).unwrap();
            assert!(p.has_lesion && !p.flagged);
        }
        let empty = LabelVolume::new(gm, 3, vec![0; 1000]).unwrap();
        let p = sample_training_patch(&v, &v, &empty, [4; 3], 0.5, &mut rng).unwrap();
        assert!(p.flagged && !p.has_lesion);
    }

    #[test]
    fn sampling_is_deterministic() {
        let gm = geom([9, 9, 9]);
        let labels = LabelVolume::new(gm, 2, (0..729).map(|i| (i % 50 == 0) as u8).collect()).unwrap();
        let s = PatchSampler::new(&labels, [3; 3]).unwrap();
        let draw = |seed| {
            let mut r = crate::rng::from_seed(seed);
            (0..20).map(|_| s.sample_origin(0.5, &mut r).0).collect::<Vec<_>>()
        };
        assert_eq!(draw(3), draw(3));
    }
}
