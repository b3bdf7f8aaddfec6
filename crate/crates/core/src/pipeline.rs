//! Whole-volume inference and quantification.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{forward_diffuse, predict_x0, sample_chain, standard_normal, DiffusionNorm, ScheduleTable};
use crate::error::{Error, Result};
use crate::networks::{Checkpoint, Inference};
use crate::patching::{crop, plan_grid, reassemble_values, Fusion, PatchGrid};
use crate::rng;
use crate::volume::{ClassRoster, Geometry, LabelVolume, Volume3D};

/// Threshold on the lesion-head probability above which a voxel is lesion.
pub const LESION_THRESHOLD: f64 = 0.5;

/// How the segmenter obtains its denoised input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhcMode {
    /// Full reverse chain.
    #[default]
    Chain,
    /// One `x0` estimate from the low-count patch noised to `T/10`.
    OneStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    /// `[x, y, z]` voxels.
    pub patch: [usize; 3],
    pub stride: [usize; 3],
    pub fusion: Fusion,
    pub phc_mode: PhcMode,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig { patch: [32; 3], stride: [16; 3], fusion: Fusion::Mean, phc_mode: PhcMode::Chain }
    }
}

impl InferenceConfig {
    pub fn grid(&self, dims: [usize; 3]) -> Result<PatchGrid> {
        plan_grid(dims, self.patch, self.stride)
    }
}

/// Fused segmentation with the reassembled head probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct SegOutput {
    pub labels: LabelVolume,
    pub lesion_prob: Volume3D,
    /// Organ head channels: background, then organ classes 2..=S.
    pub organ_probs: Vec<Volume3D>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceOutput {
    /// Denoised SUV image (within the diffusion cutoff).
    pub p_hc: Volume3D,
    /// Revised full-range SUV image.
    pub p_hcr: Volume3D,
    pub seg: SegOutput,
}

fn patch_spatial(grid: &PatchGrid) -> [usize; 3] {
    let p = grid.patch_size();
    [p[2], p[1], p[0]]
}

/// Runs one reverse chain per patch of `i_lc` and reassembles the SUV
/// result. `eps_fn(patch_index, x_t, condition, t)` predicts the noise;
/// patch `k` draws from its own random stream.
pub fn denoise_with<F>(i_lc: &Volume3D, grid: &PatchGrid, sched: &ScheduleTable, norm: &DiffusionNorm, seed: u64, eps_fn: F) -> Result<Volume3D>
where
    F: Fn(usize, &[f64], &[f64], usize) -> Result<Vec<f64>> + Sync,
{
    grid.check_dims(i_lc.dims())?;
    let lc = i_lc.to_f64();
    let patches = grid
        .origins()
        .par_iter()
        .enumerate()
        .map(|(k, &o)| {
            let cond = norm.map(&crop(&lc, grid.dims(), o, grid.patch_size()));
            let mut r = rng::stream(seed, "denoise-patch", &[k as u64]);
            let x0 = sample_chain(&cond, |x, c, t| eps_fn(k, x, c, t), sched, &mut r)?;
            Ok(norm.unmap(&x0))
        })
        .collect::<Result<Vec<_>>>()?;
    let fused = reassemble_values(&patches, 1, grid, Fusion::Mean)?;
    Volume3D::from_f64(*i_lc.geometry(), &fused)
}

/// Patch-wise denoising of a low-count volume with a trained model.
pub fn denoise_volume(i_lc: &Volume3D, ck: &Checkpoint, cfg: &InferenceConfig, seed: u64) -> Result<Volume3D> {
    let grid = cfg.grid(i_lc.dims())?;
    let sched = ck.diffusion.schedule()?;
    let norm = ck.diffusion.norm();
    let spatial = patch_spatial(&grid);
    ck.network.check_patch(spatial)?;
    let inf = Inference::from_checkpoint(ck)?;
    match cfg.phc_mode {
        PhcMode::Chain => denoise_with(i_lc, &grid, &sched, &norm, seed, |_, x, c, t| inf.eps(x, c, t, spatial)),
        PhcMode::OneStep => {
            let lc = i_lc.to_f64();
            let patches = grid
                .origins()
                .par_iter()
                .enumerate()
                .map(|(k, &o)| {
                    let cond = norm.map(&crop(&lc, grid.dims(), o, grid.patch_size()));
                    Ok(norm.unmap(&estimate_phc(&inf, &sched, &cond, PhcMode::OneStep, seed, k, spatial)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let fused = reassemble_values(&patches, 1, &grid, cfg.fusion)?;
            Volume3D::from_f64(*i_lc.geometry(), &fused)
        }
    }
}

/// Diffusion-space `p_hc` of one patch.
fn estimate_phc(inf: &Inference, sched: &ScheduleTable, cond: &[f64], mode: PhcMode, seed: u64, k: usize, spatial: [usize; 3]) -> Result<Vec<f64>> {
    match mode {
        PhcMode::Chain => {
            let mut r = rng::stream(seed, "denoise-patch", &[k as u64]);
            sample_chain(cond, |x, c, t| inf.eps(x, c, t, spatial), sched, &mut r)
        }
        PhcMode::OneStep => {
            let mut r = rng::stream(seed, "onestep-patch", &[k as u64]);
            let t = sched.steps().div_ceil(10);
            let eps = standard_normal(&mut r, cond.len());
            let x_t = forward_diffuse(cond, t, &eps, sched)?;
            let eps_hat = inf.eps(&x_t, cond, t, spatial)?;
            predict_x0(&x_t, &eps_hat, t, sched)
        }
    }
}

struct PatchResult {
    p_hc: Vec<f64>,
    p_hcr: Vec<f64>,
    lesion: Vec<f64>,
    organ: Vec<f64>,
}

/// Denoising, revision and segmentation of every patch in one pass.
pub fn infer_volume(i_lc: &Volume3D, ck: &Checkpoint, cfg: &InferenceConfig, seed: u64) -> Result<InferenceOutput> {
    let grid = cfg.grid(i_lc.dims())?;
    let sched = ck.diffusion.schedule()?;
    let norm = ck.diffusion.norm();
    let spatial = patch_spatial(&grid);
    ck.network.check_patch(spatial)?;
    let inf = Inference::from_checkpoint(ck)?;
    let lc = i_lc.to_f64();
    let results = grid
        .origins()
        .par_iter()
        .enumerate()
        .map(|(k, &o)| {
            let lc_p = crop(&lc, grid.dims(), o, grid.patch_size());
            let cond = norm.map(&lc_p);
            let x0 = estimate_phc(&inf, &sched, &cond, cfg.phc_mode, seed, k, spatial)?;
            let p_hcr = inf.revise(&x0, &lc_p, spatial)?;
            let (lesion, organ) = inf.segment(&p_hcr, &lc_p, spatial)?;
            Ok(PatchResult { p_hc: norm.unmap(&x0), p_hcr, lesion, organ })
        })
        .collect::<Result<Vec<_>>>()?;

    let geometry = *i_lc.geometry();
    let take = |f: fn(&PatchResult) -> &Vec<f64>| results.iter().map(|r| f(r).clone()).collect::<Vec<_>>();
    let p_hc = reassemble_values(&take(|r| &r.p_hc), 1, &grid, cfg.fusion)?;
    let p_hcr = reassemble_values(&take(|r| &r.p_hcr), 1, &grid, cfg.fusion)?;
    let lesion = reassemble_values(&take(|r| &r.lesion), 2, &grid, cfg.fusion)?;
    let classes = ck.network.organ_channels();
    let organ = reassemble_values(&take(|r| &r.organ), classes, &grid, cfg.fusion)?;
    let seg = fuse_segmentation(&geometry, &lesion[geometry.len()..], &organ, classes)?;
    Ok(InferenceOutput { p_hc: Volume3D::from_f64(geometry, &p_hc)?, p_hcr: Volume3D::from_f64(geometry, &p_hcr)?, seg })
}

/// Builds fused labels from the lesion probability and `classes` organ
/// head channels (channel-major). Organ channel `j > 0` maps to class
/// `j + 1`; lesion probability above 0.5 overrides the organ label.
pub fn fuse_segmentation(geometry: &Geometry, lesion_prob: &[f64], organ_probs: &[f64], classes: usize) -> Result<SegOutput> {
    let n = geometry.len();
    if lesion_prob.len() != n || organ_probs.len() != classes * n {
        return Err(Error::Geometry("probability maps do not match the volume".into()));
    }
    let labels: Vec<u8> = (0..n)
        .map(|v| {
            if lesion_prob[v] > LESION_THRESHOLD {
                return 1u8;
            }
            let mut best = 0;
            for j in 1..classes {
                if organ_probs[j * n + v] > organ_probs[best * n + v] {
                    best = j;
                }
            }
            if best == 0 {
                0
            } else {
                (best + 1) as u8
            }
        })
        .collect();
    let clip = |x: &[f64]| -> Vec<f64> { x.iter().map(|p| p.clamp(0.0, 1.0)).collect() };
    Ok(SegOutput {
        labels: LabelVolume::new(*geometry, classes + 1, labels)?,
        lesion_prob: Volume3D::from_f64(*geometry, &clip(lesion_prob))?,
        organ_probs: (0..classes)
            .map(|j| Volume3D::from_f64(*geometry, &clip(&organ_probs[j * n..(j + 1) * n])))
            .collect::<Result<_>>()?,
    })
}

/// Segmentation of a low-count volume; the segmenter consumes the
/// revised denoised image.
pub fn segment_volume(i_lc: &Volume3D, ck: &Checkpoint, cfg: &InferenceConfig, seed: u64) -> Result<SegOutput> {
    Ok(infer_volume(i_lc, ck, cfg, seed)?.seg)
}

/// Clinical metrics derived from an image and a label map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantReport {
    pub mtv_ml: f64,
    pub tlg: f64,
    /// Mean SUV per organ class; absent classes map to `null`.
    pub suv_mean: BTreeMap<String, Option<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub per_class_nrmse: Option<BTreeMap<String, Option<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub per_class_dice: Option<BTreeMap<String, f64>>,
}

impl QuantReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// MTV (mL) and TLG over the lesion class plus SUVmean of every organ class.
pub fn quantify(image: &Volume3D, labels: &LabelVolume, roster: &ClassRoster) -> Result<QuantReport> {
    image.geometry().ensure_same(labels.geometry(), "image vs labels")?;
    if labels.max_class() >= roster.num_classes() {
        return Err(Error::ClassIndex { index: labels.max_class(), max: roster.num_classes() - 1 });
    }
    let k = roster.num_classes();
    let mut sum = vec![0.0f64; k];
    let mut count = vec![0usize; k];
    for (&l, &v) in labels.data().iter().zip(image.data()) {
        sum[l as usize] += v as f64;
        count[l as usize] += 1;
    }
    let ml = image.geometry().voxel_ml();
    let mtv_ml = count[1] as f64 * ml;
    let tlg = sum[1] * ml;
    let suv_mean = (2..k)
        .map(|c| (roster.name(c).to_string(), (count[c] > 0).then(|| sum[c] / count[c] as f64)))
        .collect();
    Ok(QuantReport { mtv_ml, tlg, suv_mean, per_class_nrmse: None, per_class_dice: None })
}

/// Lesion mask from a global fraction-of-maximum threshold; every other
/// voxel is background.
pub fn threshold_lesion_labels(image: &Volume3D, fraction_of_max: f64, num_classes: usize) -> Result<LabelVolume> {
    if !(fraction_of_max > 0.0 && fraction_of_max <= 1.0) {
        return Err(Error::Config(format!("threshold fraction must be in (0, 1], got {fraction_of_max}")));
    }
    let thr = image.max() as f64 * fraction_of_max;
    let data = image.data().iter().map(|&v| u8::from(v as f64 >= thr && v > 0.0)).collect();
    LabelVolume::new(*image.geometry(), num_classes, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantify_examples() {
        let g = Geometry::new([10, 10, 2], [2.0; 3]).unwrap();
        let img = Volume3D::filled(g, 5.0).unwrap();
        let roster = ClassRoster::with_organs(2).unwrap();
        let empty = LabelVolume::new(g, 4, vec![0; 200]).unwrap();
        let r = quantify(&img, &empty, &roster).unwrap();
        assert_eq!((r.mtv_ml, r.tlg), (0.0, 0.0));

        let mut lab = vec![0u8; 200];
        lab[..100].iter_mut().for_each(|v| *v = 1);
        lab[100..110].iter_mut().for_each(|v| *v = 3);
        let r = quantify(&img, &LabelVolume::new(g, 4, lab).unwrap(), &roster).unwrap();
        assert!((r.mtv_ml - 0.8).abs() < 1e-12);
        assert!((r.tlg - 4.0).abs() < 1e-12);
        assert_eq!(r.suv_mean["lung"], Some(5.0));
    }

    #[test]
    fn fusion_rule() {
        let g = Geometry::new([3, 1, 1], [1.0; 3]).unwrap();
        let lesion = [0.2, 0.9, 0.5];
        // channels: background, organ A (class 2), organ B (class 3)
        let organ = [0.6, 0.1, 0.1, 0.3, 0.8, 0.2, 0.1, 0.1, 0.7];
        let s = fuse_segmentation(&g, &lesion, &organ, 3).unwrap();
        assert_eq!(s.labels.data(), &[0, 1, 3]);
        assert_eq!(s.labels.num_classes(), 4);
    }

    #[test]
    fn threshold_mask() {
        let g = Geometry::new([4, 1, 1], [1.0; 3]).unwrap();
        let img = Volume3D::new(g, vec![1.0, 4.0, 10.0, 4.2]).unwrap();
        let l = threshold_lesion_labels(&img, 0.41, 3).unwrap();
        assert_eq!(l.data(), &[0, 0, 1, 1]);
    }
}
