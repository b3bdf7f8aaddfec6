//! Training objectives. Each loss is built on a [`Graph`] so it can be
//! differentiated; the `*_value` helpers evaluate on plain buffers.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};

const PROB_CLAMP: f64 = 1e-7;
const DICE_EPS: f64 = 1e-7;
/// Focal exponent `1/γ` with `γ = 4/3`.
const FOCAL_EXP: f64 = 0.75;

/// Per-class weights `w[0..=S]`: background, lesion, organs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights(Vec<f64>);

impl ClassWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.len() < 3 {
            return Err(Error::Config("class weights need background, lesion and at least one organ".into()));
        }
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("class weights must be finite and non-negative".into()));
        }
        if !w.iter().any(|&v| v > 0.0) {
            return Err(Error::Config("at least one class weight must be positive".into()));
        }
        Ok(ClassWeights(w))
    }

    /// Background 0.1, lesion 4.0, organs 1.0.
    pub fn defaults(classes: usize) -> Result<Self> {
        let mut w = vec![1.0; classes + 1];
        w[0] = 0.1;
        if classes >= 1 {
            w[1] = 4.0;
        }
        ClassWeights::new(w)
    }

    /// Foreground classes S.
    pub fn classes(&self) -> usize {
        self.0.len() - 1
    }

    pub fn get(&self, s: usize) -> f64 {
        self.0[s]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Binary masks for classes `0..=S` of one patch, as `[1, z, y, x]` tensors.
#[derive(Debug, Clone)]
pub struct ClassMasks {
    masks: Vec<Tensor>,
    counts: Vec<f64>,
}

impl ClassMasks {
    pub fn new(labels: &[u8], spatial: [usize; 3], classes: usize) -> Result<Self> {
        let n: usize = spatial.iter().product();
        if labels.len() != n {
            return Err(Error::Geometry(format!("label patch has {} voxels, expected {n}", labels.len())));
        }
        let mut masks = vec![vec![0.0; n]; classes + 1];
        let mut counts = vec![0.0; classes + 1];
        for (i, &l) in labels.iter().enumerate() {
            let l = l as usize;
            if l > classes {
                return Err(Error::ClassIndex { index: l, max: classes });
            }
            masks[l][i] = 1.0;
            counts[l] += 1.0;
        }
        let shape = [1, spatial[0], spatial[1], spatial[2]];
        Ok(ClassMasks { masks: masks.into_iter().map(|m| Tensor::from_vec(&shape, m)).collect(), counts })
    }

    pub fn classes(&self) -> usize {
        self.masks.len() - 1
    }

    pub fn mask(&self, s: usize) -> &Tensor {
        &self.masks[s]
    }

    pub fn count(&self, s: usize) -> f64 {
        self.counts[s]
    }
}

/// Mean absolute error over all elements.
pub fn diff_loss(g: &mut Graph, eps_hat: Var, eps: Var) -> Result<Var> {
    if g.shape(eps_hat) != g.shape(eps) {
        return Err(Error::Geometry("diff_loss inputs differ in shape".into()));
    }
    let d = g.sub(eps_hat, eps);
    let d = g.abs(d);
    Ok(g.mean(d))
}

/// `Σ mask·|pred − ref| / max(Σ mask, 1)`.
pub fn masked_l1(g: &mut Graph, pred: Var, reference: Var, mask: &Tensor) -> Result<Var> {
    if g.shape(pred) != g.shape(reference) || g.shape(pred) != mask.shape() {
        return Err(Error::Geometry("masked_l1 inputs differ in shape".into()));
    }
    let m = g.constant(mask.clone());
    let d = g.sub(pred, reference);
    let d = g.abs(d);
    let d = g.mul(d, m);
    let s = g.sum(d);
    Ok(g.scale(s, 1.0 / mask.sum().max(1.0)))
}

fn weighted_l1(g: &mut Graph, pred: Var, reference: Var, masks: &ClassMasks, w: &ClassWeights, from: usize) -> Result<Var> {
    check_classes(masks, w)?;
    let mut total = g.constant(Tensor::scalar(0.0));
    for s in from..=w.classes() {
        if w.get(s) == 0.0 || masks.count(s) == 0.0 {
            continue;
        }
        let l = masked_l1(g, pred, reference, masks.mask(s))?;
        let l = g.scale(l, w.get(s));
        total = g.add(total, l);
    }
    Ok(total)
}

fn check_classes(masks: &ClassMasks, w: &ClassWeights) -> Result<()> {
    if masks.classes() != w.classes() {
        return Err(Error::Config(format!("{} class weights for {} classes", w.classes() + 1, masks.classes() + 1)));
    }
    Ok(())
}

/// Class-weighted L1 over lesion and organ classes (background excluded).
/// Inputs are in SUV units.
pub fn lor_loss(g: &mut Graph, p_hc_suv: Var, i_hc: Var, masks: &ClassMasks, w: &ClassWeights) -> Result<Var> {
    weighted_l1(g, p_hc_suv, i_hc, masks, w, 1)
}

/// Class-weighted L1 over every class including background.
pub fn rev_loss(g: &mut Graph, p_hcr: Var, i_hc: Var, masks: &ClassMasks, w: &ClassWeights) -> Result<Var> {
    weighted_l1(g, p_hcr, i_hc, masks, w, 0)
}

fn check_probs(g: &Graph, v: Var, what: &str) -> Result<()> {
    if g.value(v).data().iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::Numeric(format!("{what} probabilities outside [0, 1]")));
    }
    Ok(())
}

/// Binary cross-entropy plus focal Dice per foreground class, averaged
/// over S. Class 1 reads channel 1 of the lesion head; organ class `s`
/// reads channel `s − 1` of the organ head.
pub fn seg_loss(g: &mut Graph, lesion_probs: Var, organ_probs: Var, masks: &ClassMasks, w: &ClassWeights) -> Result<Var> {
    check_classes(masks, w)?;
    let classes = w.classes();
    if g.shape(lesion_probs)[0] != 2 || g.shape(organ_probs)[0] != classes {
        return Err(Error::Config(format!("segmentation heads must have 2 and {classes} channels")));
    }
    check_probs(g, lesion_probs, "lesion")?;
    check_probs(g, organ_probs, "organ")?;
    let mut total = g.constant(Tensor::scalar(0.0));
    for s in 1..=classes {
        if w.get(s) == 0.0 {
            continue;
        }
        let p = if s == 1 { g.narrow(lesion_probs, 1, 1) } else { g.narrow(organ_probs, s - 1, 1) };
        if g.shape(p) != masks.mask(s).shape() {
            return Err(Error::Geometry("probability and label patches differ in shape".into()));
        }
        let m = masks.mask(s);
        let mv = g.constant(m.clone());
        let inv_m = g.constant(m.map(|v| 1.0 - v));

        let pc = g.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP);
        let lp = g.ln(pc);
        let one_minus = g.scale(pc, -1.0);
        let one_minus = g.offset(one_minus, 1.0);
        let lq = g.ln(one_minus);
        let a = g.mul(mv, lp);
        let b = g.mul(inv_m, lq);
        let ce = g.add(a, b);
        let ce = g.mean(ce);
        let ce = g.scale(ce, -1.0);

        let pm = g.mul(p, mv);
        let inter = g.sum(pm);
        let p2 = g.mul(p, p);
        let p2 = g.sum(p2);
        let denom = g.offset(p2, m.norm_sq() + DICE_EPS);
        let ratio = g.div(inter, denom);
        let one_minus_dsc = g.scale(ratio, -2.0);
        let one_minus_dsc = g.offset(one_minus_dsc, 1.0);
        let fd = g.powf(one_minus_dsc, FOCAL_EXP);

        let term = g.add(ce, fd);
        let term = g.scale(term, w.get(s));
        total = g.add(total, term);
    }
    Ok(g.scale(total, 1.0 / classes as f64))
}

/// `exp(−5·(1 − e/e_max)²)`.
pub fn warmup_weight(e: usize, e_max: usize) -> Result<f64> {
    if e_max < 1 || e > e_max {
        return Err(Error::Config(format!("warm-up needs 0 <= e <= e_max and e_max >= 1, got e={e}, e_max={e_max}")));
    }
    let r = 1.0 - e as f64 / e_max as f64;
    Ok((-5.0 * r * r).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub diff: f64,
    pub lor: f64,
    pub rev: f64,
    pub seg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub diff: f64,
    pub lor: f64,
    pub rev: f64,
    pub seg: f64,
    #[serde(rename = "lambda")]
    pub lambda_warm: f64,
    pub total: f64,
}

/// `diff + λ·(lor + rev + seg)`.
pub fn total_loss(parts: LossParts, lambda_warm: f64) -> Result<LossReport> {
    let LossParts { diff, lor, rev, seg } = parts;
    for (name, v) in [("diff", diff), ("lor", lor), ("rev", rev), ("seg", seg), ("lambda", lambda_warm)] {
        if !v.is_finite() {
            return Err(Error::Divergence { step: 0, detail: format!("{name} loss is {v}") });
        }
    }
    Ok(LossReport { diff, lor, rev, seg, lambda_warm, total: diff + lambda_warm * (lor + rev + seg) })
}

fn constant(g: &mut Graph, data: &[f64], shape: &[usize]) -> Var {
    g.constant(Tensor::from_vec(shape, data.to_vec()))
}

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Geometry(format!("inputs have {} and {} values", a.len(), b.len())));
    }
    Ok(())
}

pub fn diff_loss_value(eps_hat: &[f64], eps: &[f64]) -> Result<f64> {
    check_len(eps_hat, eps)?;
    let mut g = Graph::new();
    let a = constant(&mut g, eps_hat, &[eps.len()]);
    let b = constant(&mut g, eps, &[eps.len()]);
    let l = diff_loss(&mut g, a, b)?;
    Ok(g.value(l).item())
}

pub fn masked_l1_value(pred: &[f64], reference: &[f64], mask: &[f64]) -> Result<f64> {
    check_len(pred, reference)?;
    check_len(pred, mask)?;
    let n = pred.len();
    let mut g = Graph::new();
    let a = constant(&mut g, pred, &[n]);
    let b = constant(&mut g, reference, &[n]);
    let l = masked_l1(&mut g, a, b, &Tensor::from_vec(&[n], mask.to_vec()))?;
    Ok(g.value(l).item())
}

fn patch_pair(g: &mut Graph, a: &[f64], b: &[f64], spatial: [usize; 3]) -> Result<(Var, Var)> {
    check_len(a, b)?;
    let shape = [1, spatial[0], spatial[1], spatial[2]];
    if a.len() != shape.iter().product::<usize>() {
        return Err(Error::Geometry("patch buffer does not match its dims".into()));
    }
    Ok((constant(g, a, &shape), constant(g, b, &shape)))
}

pub fn lor_loss_value(p_hc_suv: &[f64], i_hc: &[f64], labels: &[u8], spatial: [usize; 3], w: &ClassWeights) -> Result<f64> {
    let masks = ClassMasks::new(labels, spatial, w.classes())?;
    let mut g = Graph::new();
    let (a, b) = patch_pair(&mut g, p_hc_suv, i_hc, spatial)?;
    let l = lor_loss(&mut g, a, b, &masks, w)?;
    Ok(g.value(l).item())
}

pub fn rev_loss_value(p_hcr: &[f64], i_hc: &[f64], labels: &[u8], spatial: [usize; 3], w: &ClassWeights) -> Result<f64> {
    let masks = ClassMasks::new(labels, spatial, w.classes())?;
    let mut g = Graph::new();
    let (a, b) = patch_pair(&mut g, p_hcr, i_hc, spatial)?;
    let l = rev_loss(&mut g, a, b, &masks, w)?;
    Ok(g.value(l).item())
}

/// `lesion_probs` holds 2 channels, `organ_probs` S channels, each of the
/// patch size, channel-major.
pub fn seg_loss_value(lesion_probs: &[f64], organ_probs: &[f64], labels: &[u8], spatial: [usize; 3], w: &ClassWeights) -> Result<f64> {
    let masks = ClassMasks::new(labels, spatial, w.classes())?;
    let n: usize = spatial.iter().product();
    if lesion_probs.len() != 2 * n || organ_probs.len() != w.classes() * n {
        return Err(Error::Geometry("probability buffers do not match the heads".into()));
    }
    let mut g = Graph::new();
    let l = constant(&mut g, lesion_probs, &[2, spatial[0], spatial[1], spatial[2]]);
    let o = constant(&mut g, organ_probs, &[w.classes(), spatial[0], spatial[1], spatial[2]]);
    let v = seg_loss(&mut g, l, o, &masks, w)?;
    Ok(g.value(v).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diff_examples() {
        let e = [0.3, -1.0, 2.0];
        assert_eq!(diff_loss_value(&e, &e).unwrap(), 0.0);
        let shifted: Vec<f64> = e.iter().map(|v| v + 0.5).collect();
        assert!((diff_loss_value(&shifted, &e).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn masked_examples() {
        assert_eq!(masked_l1_value(&[1.0, 2.0], &[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
        let v = masked_l1_value(&[1.0, 1.0, 0.0, 0.0, 9.0], &[0.0; 5], &[1.0, 1.0, 1.0, 1.0, 0.0]).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
    }

    #[test]
    fn warmup_values() {
        assert!((warmup_weight(10, 10).unwrap() - 1.0).abs() < 1e-12);
        assert!((warmup_weight(0, 10).unwrap() - (-5f64).exp()).abs() < 1e-12);
        assert!((warmup_weight(5, 10).unwrap() - (-1.25f64).exp()).abs() < 1e-12);
        assert!(warmup_weight(11, 10).is_err());
        assert!(warmup_weight(0, 0).is_err());
    }

    #[test]
    fn total_identity() {
        let parts = LossParts { diff: 1.0, lor: 1.0, rev: 1.0, seg: 1.0 };
        assert_eq!(total_loss(parts, 1.0).unwrap().total, 4.0);
        assert_eq!(total_loss(parts, 0.0).unwrap().total, 1.0);
        let bad = LossParts { seg: f64::NAN, ..parts };
        assert!(matches!(total_loss(bad, 1.0), Err(Error::Divergence { .. })));
    }

    #[test]
    fn weights_validation() {
        assert!(ClassWeights::new(vec![0.0, 0.0, 0.0]).is_err());
        assert!(ClassWeights::new(vec![1.0, -1.0, 0.0]).is_err());
        let w = ClassWeights::defaults(4).unwrap();
        assert_eq!(w.as_slice(), &[0.1, 4.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn label_out_of_range() {
        assert!(matches!(ClassMasks::new(&[0, 3], [1, 1, 2], 2), Err(Error::ClassIndex { index: 3, max: 2 })));
    }
}
