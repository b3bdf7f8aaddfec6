//! Synthetic activity/label phantoms and low-count acquisition emulation.

use rand::Rng as _;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::volume::{Geometry, LabelVolume, Volume3D};

/// Axis-aligned ellipsoid with a uniform SUV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrganShape {
    pub class: usize,
    /// `[x, y, z]` in mm from the volume corner.
    pub center_mm: [f64; 3],
    pub semi_axes_mm: [f64; 3],
    pub suv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LesionSpec {
    /// Inclusive range of lesion counts.
    pub count: [usize; 2],
    pub radius_mm: [f64; 2],
    pub suv: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub voxel_mm: [f64; 3],
    /// Total classes including background and lesion.
    pub num_classes: usize,
    pub organs: Vec<OrganShape>,
    pub lesions: LesionSpec,
    pub background_suv: f64,
    /// Relative per-case perturbation of organ centres and semi-axes.
    #[serde(default)]
    pub shape_jitter: f64,
    /// Gaussian smoothing of the activity map; 0 disables it.
    #[serde(default)]
    pub smoothing_fwhm_mm: f64,
    pub seed: u64,
}

/// Organ template in fractions of the field of view: centre, semi-axes, SUV.
const ORGAN_TEMPLATE: [([f64; 3], [f64; 3], f64); 7] = [
    ([0.34, 0.42, 0.50], [0.20, 0.18, 0.26], 3.0), // liver
    ([0.72, 0.34, 0.50], [0.14, 0.14, 0.26], 0.4), // lung
    ([0.50, 0.80, 0.50], [0.09, 0.09, 0.36], 2.0), // bone
    ([0.50, 0.50, 0.12], [0.30, 0.30, 0.06], 1.5), // muscle
    ([0.74, 0.74, 0.34], [0.07, 0.09, 0.10], 4.0), // kidney
    ([0.76, 0.58, 0.76], [0.08, 0.08, 0.10], 2.5), // spleen
    ([0.50, 0.64, 0.50], [0.04, 0.04, 0.38], 2.0), // aorta
];

impl PhantomSpec {
    /// Default layout with `organs` organ classes (at most seven).
    pub fn standard(dims: [usize; 3], voxel_mm: [f64; 3], organs: usize, seed: u64) -> Result<Self> {
        if organs > ORGAN_TEMPLATE.len() {
            return Err(Error::Config(format!("at most {} organs, asked for {organs}", ORGAN_TEMPLATE.len())));
        }
        let fov = [dims[0] as f64 * voxel_mm[0], dims[1] as f64 * voxel_mm[1], dims[2] as f64 * voxel_mm[2]];
        let shapes = ORGAN_TEMPLATE[..organs]
            .iter()
            .enumerate()
            .map(|(i, (c, a, suv))| OrganShape {
                class: i + 2,
                center_mm: [c[0] * fov[0], c[1] * fov[1], c[2] * fov[2]],
                semi_axes_mm: [a[0] * fov[0], a[1] * fov[1], a[2] * fov[2]],
                suv: *suv,
            })
            .collect();
        let min_fov = fov.iter().cloned().fold(f64::INFINITY, f64::min);
        Ok(PhantomSpec {
            dims,
            voxel_mm,
            num_classes: organs + 2,
            organs: shapes,
            lesions: LesionSpec {
                count: [1, 3],
                radius_mm: [0.10 * min_fov, 0.16 * min_fov],
                suv: [8.0, 14.0],
            },
            background_suv: 1.0,
            shape_jitter: 0.1,
            smoothing_fwhm_mm: 0.0,
            seed,
        })
    }

    pub fn geometry(&self) -> Result<Geometry> {
        Geometry::new(self.dims, self.voxel_mm).map_err(|e| Error::Config(format!("phantom geometry: {e}")))
    }

    fn fov(&self) -> [f64; 3] {
        [
            self.dims[0] as f64 * self.voxel_mm[0],
            self.dims[1] as f64 * self.voxel_mm[1],
            self.dims[2] as f64 * self.voxel_mm[2],
        ]
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry()?;
        if self.num_classes < 2 || self.num_classes > crate::volume::MAX_CLASSES {
            return Err(Error::Config(format!("num_classes {} out of range", self.num_classes)));
        }
        let fov = self.fov();
        let mut max_organ: f64 = self.background_suv;
        if !(self.background_suv.is_finite() && self.background_suv >= 0.0) {
            return Err(Error::Config("background_suv must be >= 0".into()));
        }
        for (i, o) in self.organs.iter().enumerate() {
            if o.class < 2 || o.class >= self.num_classes {
                return Err(Error::Config(format!("organ {i} has class {} outside [2, {})", o.class, self.num_classes)));
            }
            if !(o.suv.is_finite() && o.suv >= 0.0) {
                return Err(Error::Config(format!("organ {i} SUV must be >= 0")));
            }
            for a in 0..3 {
                let (c, r) = (o.center_mm[a], o.semi_axes_mm[a]);
                if !(r > 0.0) || c - r < 0.0 || c + r > fov[a] {
                    return Err(Error::Config(format!("organ {i} exceeds the volume along axis {a}")));
                }
            }
            max_organ = max_organ.max(o.suv);
        }
        let l = &self.lesions;
        if l.count[0] > l.count[1] || l.radius_mm[0] > l.radius_mm[1] || l.suv[0] > l.suv[1] {
            return Err(Error::Config("lesion ranges must be ordered [min, max]".into()));
        }
        if l.count[1] > 0 {
            if l.suv[0] <= max_organ {
                return Err(Error::Config(format!(
                    "lesion SUV minimum {} must exceed the hottest organ/background SUV {max_organ}",
                    l.suv[0]
                )));
            }
            if !(l.radius_mm[0] > 0.0) {
                return Err(Error::Config("lesion radius must be positive".into()));
            }
            if fov.iter().any(|&f| 2.0 * l.radius_mm[1] > f) {
                return Err(Error::Config("lesion radius exceeds the volume".into()));
            }
            if self.num_classes < 2 {
                return Err(Error::Config("lesions need class 1".into()));
            }
        }
        if self.shape_jitter < 0.0 || self.shape_jitter >= 0.5 {
            return Err(Error::Config("shape_jitter must lie in [0, 0.5)".into()));
        }
        if self.smoothing_fwhm_mm < 0.0 {
            return Err(Error::Config("smoothing_fwhm_mm must be >= 0".into()));
        }
        Ok(())
    }
}

struct Ellipsoid {
    class: u8,
    center: [f64; 3],
    axes: [f64; 3],
    suv: f64,
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.axes[a]).powi(2)).sum::<f64>() <= 1.0
    }
}

/// Rasterizes the phantom by voxel-centre membership. Later organs override
/// earlier ones, lesions override organs.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume3D, LabelVolume)> {
    spec.validate()?;
    let geometry = spec.geometry()?;
    let fov = spec.fov();
    let mut rng = rng::stream(spec.seed, "phantom", &[]);
    let mut shapes = Vec::new();
    for o in &spec.organs {
        let mut center = o.center_mm;
        let mut axes = o.semi_axes_mm;
        if spec.shape_jitter > 0.0 {
            for a in 0..3 {
                let j = spec.shape_jitter;
                axes[a] *= 1.0 + rng.random_range(-j..=j);
                center[a] += rng.random_range(-j..=j) * o.semi_axes_mm[a];
                // keep the ellipsoid inside the volume
                center[a] = center[a].clamp(axes[a].min(fov[a] / 2.0), (fov[a] - axes[a]).max(fov[a] / 2.0));
                axes[a] = axes[a].min(center[a]).min(fov[a] - center[a]);
            }
        }
        shapes.push(Ellipsoid { class: o.class as u8, center, axes, suv: o.suv });
    }
    let l = &spec.lesions;
    let n_lesions = if l.count[1] == 0 { 0 } else { rng.random_range(l.count[0]..=l.count[1]) };
    for _ in 0..n_lesions {
        let r = draw(&mut rng, l.radius_mm);
        let suv = draw(&mut rng, l.suv);
        let center = [0, 1, 2].map(|a| {
            if fov[a] - 2.0 * r <= 0.0 {
                fov[a] / 2.0
            } else {
                rng.random_range(r..=fov[a] - r)
            }
        });
        shapes.push(Ellipsoid { class: 1, center, axes: [r; 3], suv });
    }

    let [nx, ny, nz] = spec.dims;
    let mut activity = vec![spec.background_suv; geometry.len()];
    let mut labels = vec![0u8; geometry.len()];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = [
                    (x as f64 + 0.5) * spec.voxel_mm[0],
                    (y as f64 + 0.5) * spec.voxel_mm[1],
                    (z as f64 + 0.5) * spec.voxel_mm[2],
                ];
                let i = geometry.index(x, y, z);
                for s in shapes.iter().filter(|s| s.contains(p)) {
                    activity[i] = s.suv;
                    labels[i] = s.class;
                }
            }
        }
    }
    if spec.smoothing_fwhm_mm > 0.0 {
        activity = gaussian_smooth(&activity, &geometry, spec.smoothing_fwhm_mm);
    }
    let activity = Volume3D::from_f64(geometry, &activity)?;
    let labels = LabelVolume::new(geometry, spec.num_classes, labels)?;
    Ok((activity, labels))
}

fn draw(rng: &mut rng::Rng, range: [f64; 2]) -> f64 {
    if range[1] > range[0] {
        rng.random_range(range[0]..=range[1])
    } else {
        range[0]
    }
}

/// Separable Gaussian blur with edge renormalization.
pub fn gaussian_smooth(data: &[f64], geometry: &Geometry, fwhm_mm: f64) -> Vec<f64> {
    let mut out = data.to_vec();
    let dims = geometry.dims;
    for axis in 0..3 {
        let sigma = fwhm_mm / (8.0f64.ln().sqrt() * 2.0) / geometry.voxel_mm[axis];
        if sigma <= 0.0 {
            continue;
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let kernel: Vec<f64> = (-radius..=radius).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
        let stride = match axis {
            0 => 1,
            1 => dims[0],
            _ => dims[0] * dims[1],
        };
        let n = dims[axis] as isize;
        let src = out.clone();
        for (i, o) in out.iter_mut().enumerate() {
            let pos = ((i / stride) % dims[axis]) as isize;
            let (mut acc, mut wsum) = (0.0, 0.0);
            for (ki, k) in (-radius..=radius).enumerate() {
                let q = pos + k;
                if q < 0 || q >= n {
                    continue;
                }
                let j = (i as isize + k * stride as isize) as usize;
                acc += kernel[ki] * src[j];
                wsum += kernel[ki];
            }
            *o = acc / wsum;
        }
    }
    out
}

/// Count-rate model: expected counts per voxel per unit SUV at full count,
/// scaled by the retained fraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountModel {
    pub counts_per_suv: f64,
    pub fraction: f64,
}

impl CountModel {
    pub fn new(counts_per_suv: f64, fraction: f64) -> Result<Self> {
        if !(counts_per_suv > 0.0 && counts_per_suv.is_finite()) {
            return Err(Error::Config(format!("counts_per_suv must be > 0, got {counts_per_suv}")));
        }
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Config(format!("count fraction must lie in (0, 1], got {fraction}")));
        }
        Ok(CountModel { counts_per_suv, fraction })
    }

    fn scale(&self) -> f64 {
        self.counts_per_suv * self.fraction
    }
}

/// Poisson thinning: `k ~ Poisson(activity·scale)`, returns `k / scale`.
pub fn simulate_count_level(activity: &Volume3D, model: CountModel, seed: u64) -> Result<Volume3D> {
    CountModel::new(model.counts_per_suv, model.fraction)?;
    let scale = model.scale();
    let mut rng = rng::stream(seed, "counts", &[]);
    let data = activity
        .data()
        .iter()
        .map(|&a| {
            let lambda = a as f64 * scale;
            if lambda <= 0.0 {
                return 0.0;
            }
            let k: f64 = Poisson::new(lambda).expect("positive finite rate").sample(&mut rng);
            (k / scale) as f32
        })
        .collect();
    Volume3D::new(*activity.geometry(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere_spec(seed: u64) -> PhantomSpec {
        PhantomSpec {
            dims: [32, 32, 32],
            voxel_mm: [2.0; 3],
            num_classes: 2,
            organs: vec![],
            lesions: LesionSpec { count: [1, 1], radius_mm: [8.0, 8.0], suv: [10.0, 10.0] },
            background_suv: 1.0,
            shape_jitter: 0.0,
            smoothing_fwhm_mm: 0.0,
            seed,
        }
    }

    #[test]
    fn sphere_voxel_count_matches_analytic_volume() {
        let (act, labels) = generate_phantom(&sphere_spec(3)).unwrap();
        let expected = 4.0 / 3.0 * std::f64::consts::PI * 4.0f64.powi(3);
        let n = labels.count(1) as f64;
        assert!((n - expected).abs() / expected < 0.15, "{n} vs {expected}");
        let lesion_suv: Vec<f32> = act.data().iter().zip(labels.data()).filter(|(_, &l)| l == 1).map(|(a, _)| *a).collect();
        assert!(lesion_suv.iter().all(|&v| v == 10.0));
    }

    #[test]
    fn zero_lesions_and_determinism() {
        let mut spec = PhantomSpec::standard([24, 24, 24], [2.0; 3], 3, 11).unwrap();
        spec.lesions.count = [0, 0];
        let (_, labels) = generate_phantom(&spec).unwrap();
        assert_eq!(labels.count(1), 0);

        let spec = PhantomSpec::standard([24, 24, 24], [2.0; 3], 3, 11).unwrap();
        assert_eq!(generate_phantom(&spec).unwrap(), generate_phantom(&spec).unwrap());
        let (_, l) = generate_phantom(&spec).unwrap();
        assert!(l.count(1) > 0);
    }

    #[test]
    fn out_of_bounds_shape_is_a_spec_error() {
        let mut spec = PhantomSpec::standard([16, 16, 16], [2.0; 3], 2, 1).unwrap();
        spec.organs[0].center_mm[0] = 1.0;
        assert!(matches!(generate_phantom(&spec), Err(Error::Config(_))));
        let mut spec = PhantomSpec::standard([16, 16, 16], [2.0; 3], 2, 1).unwrap();
        spec.lesions.suv = [2.0, 9.0];
        assert!(matches!(generate_phantom(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn shapes_carry_their_base_suv() {
        let spec = PhantomSpec::standard([32, 32, 32], [2.0; 3], 7, 5).unwrap();
        let (act, labels) = generate_phantom(&spec).unwrap();
        for o in &spec.organs {
            let vals: Vec<f64> = act
                .data()
                .iter()
                .zip(labels.data())
                .filter(|(_, &l)| l as usize == o.class)
                .map(|(&a, _)| a as f64)
                .collect();
            if vals.is_empty() {
                continue;
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            assert!(mean >= o.suv - 1e-6);
        }
    }

    #[test]
    fn zero_activity_stays_zero() {
        let g = Geometry::new([4, 4, 4], [1.0; 3]).unwrap();
        let v = Volume3D::filled(g, 0.0).unwrap();
        let out = simulate_count_level(&v, CountModel::new(50.0, 0.05).unwrap(), 1).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn high_counts_track_activity() {
        let g = Geometry::new([8, 8, 8], [1.0; 3]).unwrap();
        let data: Vec<f32> = (0..512).map(|i| 1.0 + (i % 20) as f32).collect();
        let v = Volume3D::new(g, data).unwrap();
        let out = simulate_count_level(&v, CountModel::new(1e6, 1.0).unwrap(), 9).unwrap();
        for (a, b) in v.data().iter().zip(out.data()) {
            assert!((a - b).abs() / a < 0.01);
        }
    }

    #[test]
    fn invalid_count_model_rejected() {
        assert!(CountModel::new(0.0, 0.5).is_err());
        assert!(CountModel::new(10.0, 0.0).is_err());
        assert!(CountModel::new(10.0, 1.5).is_err());
    }
}
