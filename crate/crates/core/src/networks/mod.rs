//! Conditional denoiser, revision module and dual-branch segmenter.
//!
//! Every forward takes a [`Graph`] and a [`Binder`]. With
//! [`Binder::initializing`] the first call creates the parameters, with
//! [`Binder::using`] it reads them from a [`ModelParams`] tree.

mod checkpoint;
pub mod layers;
mod params;
mod ssm;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::diffusion::{DiffusionNorm, ScheduleTable};
use crate::error::{Error, Result};

pub use checkpoint::Checkpoint;
pub use params::{Binder, Init, ModelParams, TensorArchive, ARCHIVE_MAGIC, ARCHIVE_VERSION};
pub use ssm::{ssm_scan, SsmParams};

use layers::{attention, conv, conv_norm_act, conv_scaled, conv_zero, linear, norm, res_block, timestep_embedding};

pub const DENOISER: &str = "denoiser";
pub const REVISION: &str = "revision";
pub const SEGMENTER: &str = "segmenter";

const SEG_STAGES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub base_channels: usize,
    /// Encoder resolutions of the denoiser; the decoder has one fewer.
    pub levels: usize,
    pub attention_at_lowest: bool,
    pub time_embed_dim: usize,
    pub ssm_state_dim: usize,
    pub bidirectional_scan: bool,
    pub revision_channels: usize,
    /// Foreground classes S (lesion plus organs).
    pub classes: usize,
    pub prediction: Prediction,
}

/// How the denoiser's last layer is turned into a noise estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    /// The network outputs the noise directly.
    Eps,
    /// The network outputs a correction `r` to the condition; the clean
    /// estimate `i_lc + r` is converted to noise with `ᾱ_t`.
    #[default]
    ConditionResidual,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            base_channels: 16,
            levels: 4,
            attention_at_lowest: true,
            time_embed_dim: 32,
            ssm_state_dim: 8,
            bidirectional_scan: false,
            revision_channels: 8,
            classes: 8,
            prediction: Prediction::default(),
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("network: {m}")));
        if self.base_channels == 0 {
            return bad("base_channels must be >= 1");
        }
        if !(1..=6).contains(&self.levels) {
            return bad("levels must be in 1..=6");
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return bad("time_embed_dim must be even and >= 2");
        }
        if self.ssm_state_dim == 0 || self.revision_channels == 0 {
            return bad("ssm_state_dim and revision_channels must be >= 1");
        }
        if self.classes < 2 {
            return bad("classes must be >= 2 (lesion plus at least one organ)");
        }
        Ok(())
    }

    /// Spatial dims must be divisible by this factor for both networks.
    pub fn patch_multiple(&self) -> usize {
        (1usize << (self.levels - 1)).max(1 << (SEG_STAGES - 1))
    }

    /// Organ head width: background plus S−1 organs.
    pub fn organ_channels(&self) -> usize {
        self.classes
    }

    pub fn check_patch(&self, spatial: [usize; 3]) -> Result<()> {
        let m = self.patch_multiple();
        if spatial.iter().any(|&d| d == 0 || d % m != 0) {
            return Err(Error::Config(format!("patch dims {spatial:?} must be positive multiples of {m}")));
        }
        Ok(())
    }
}

fn spatial_of(g: &Graph, x: Var, what: &str) -> Result<[usize; 3]> {
    let s = g.shape(x);
    if s.len() != 4 || s[0] != 1 {
        return Err(Error::Geometry(format!("{what} must be a single-channel 3D patch, got shape {s:?}")));
    }
    Ok([s[1], s[2], s[3]])
}

fn same_patch(g: &Graph, a: Var, b: Var, what: &str) -> Result<[usize; 3]> {
    let sa = spatial_of(g, a, what)?;
    let sb = spatial_of(g, b, what)?;
    if sa != sb {
        return Err(Error::Geometry(format!("{what}: input shapes {sa:?} and {sb:?} differ")));
    }
    Ok(sa)
}

/// Predicts the noise in `x_t` given the low-count condition; both inputs are
/// `[1, z, y, x]` in diffusion space. `alpha_bar` is `ᾱ_t` of the schedule.
pub fn denoiser_forward(g: &mut Graph, p: &mut Binder, cfg: &NetworkConfig, x_t: Var, i_lc: Var, t: usize, alpha_bar: f64) -> Result<Var> {
    if !(alpha_bar > 0.0 && alpha_bar < 1.0) {
        return Err(Error::Config(format!("alpha_bar {alpha_bar} outside (0, 1)")));
    }
    let spatial = same_patch(g, x_t, i_lc, "denoiser")?;
    let m = 1usize << (cfg.levels - 1);
    if spatial.iter().any(|&d| d % m != 0) {
        return Err(Error::Config(format!("denoiser patch {spatial:?} must be divisible by {m}")));
    }
    let c = cfg.base_channels;
    let e_dim = cfg.time_embed_dim;
    let hidden = 4 * c;
    let emb = g.constant(Tensor::from_vec(&[e_dim], timestep_embedding(t, e_dim)));
    let emb = linear(g, p, "denoiser/time/fc1", emb, e_dim, hidden)?;
    let emb = g.silu(emb);
    let temb = linear(g, p, "denoiser/time/fc2", emb, hidden, hidden)?;

    let input = g.concat(&[x_t, i_lc]);
    let mean = g.global_avg_pool(input);
    let mean = g.scale(mean, -1.0);
    let input = g.add_channel(input, mean);
    let mut h = conv(g, p, "denoiser/conv_in", input, 2, c, 3)?;
    let mut skips = Vec::new();
    let mut ch = c;
    for l in 0..cfg.levels {
        let co = c << l;
        h = res_block(g, p, &format!("denoiser/enc{l}"), h, ch, co, Some((temb, hidden)))?;
        ch = co;
        if l + 1 == cfg.levels {
            if cfg.attention_at_lowest {
                h = attention(g, p, "denoiser/attn", h, ch)?;
            }
        } else {
            skips.push((h, ch));
            h = g.avg_pool2(h);
        }
    }
    for l in (0..cfg.levels - 1).rev() {
        let (skip, sc) = skips[l];
        let up = g.upsample2(h);
        let cat = g.concat(&[up, skip]);
        let co = c << l;
        h = res_block(g, p, &format!("denoiser/dec{l}"), cat, ch + sc, co, Some((temb, hidden)))?;
        ch = co;
    }
    let h = norm(g, p, "denoiser/out/norm", h, ch)?;
    let h = g.silu(h);
    let out = match cfg.prediction {
        Prediction::Eps => conv_scaled(g, p, "denoiser/out/conv", h, ch, 1, 3, 0.1)?,
        Prediction::ConditionResidual => conv_zero(g, p, "denoiser/out/conv", h, ch, 1, 3)?,
    };
    Ok(match cfg.prediction {
        Prediction::Eps => out,
        Prediction::ConditionResidual => {
            // eps = (x_t − √ᾱ·(i_lc + r)) / √(1 − ᾱ)
            let centered = g.narrow(input, 1, 1);
            let skip = conv(g, p, "denoiser/cond_skip/in", centered, 1, c, 3)?;
            let skip = g.silu(skip);
            let skip = conv_zero(g, p, "denoiser/cond_skip/out", skip, c, 1, 3)?;
            let r = g.add(out, skip);
            let x0 = g.add(i_lc, r);
            let x0 = g.scale(x0, alpha_bar.sqrt());
            let e = g.sub(x_t, x0);
            g.scale(e, 1.0 / (1.0 - alpha_bar).sqrt())
        }
    })
}

/// Maps a diffusion-space estimate back to a full-range SUV patch with a
/// residual path from the low-count input.
pub fn revision_forward(g: &mut Graph, p: &mut Binder, cfg: &NetworkConfig, norm_map: &DiffusionNorm, p_hc: Var, i_lc: Var) -> Result<Var> {
    same_patch(g, p_hc, i_lc, "revision")?;
    let r = cfg.revision_channels;
    let suv = norm_map.unmap_graph(g, p_hc);
    let x = g.concat(&[suv, i_lc]);
    let x = g.scale(x, 1.0 / norm_map.suv_cutoff);
    let h = conv(g, p, "revision/conv1", x, 2, r, 3)?;
    let h = g.silu(h);
    let h = conv(g, p, "revision/conv2", h, r, r, 3)?;
    let h = g.silu(h);
    let h = conv_zero(g, p, "revision/conv3", h, r, 1, 3)?;
    let h = g.scale(h, norm_map.suv_cutoff);
    Ok(g.add(i_lc, h))
}

fn ssm_layer(g: &mut Graph, p: &mut Binder, cfg: &NetworkConfig, name: &str, x: Var, c: usize) -> Result<Var> {
    let n = cfg.ssm_state_dim;
    let a_raw = p.param(g, &format!("{name}/a_raw"), &[c, n], Init::Const(0.5f64.atanh()))?;
    let b = p.param(g, &format!("{name}/b"), &[c, n], Init::FanIn(n, 1.0))?;
    let cc = p.param(g, &format!("{name}/c"), &[c, n], Init::FanIn(n, 0.5))?;
    let d = p.param(g, &format!("{name}/d"), &[c], Init::Const(1.0))?;
    let a = g.tanh(a_raw);
    let fwd = g.ssm_scan(x, a, b, cc, d, false);
    if cfg.bidirectional_scan {
        let bwd = g.ssm_scan(x, a, b, cc, d, true);
        let s = g.add(fwd, bwd);
        Ok(g.scale(s, 0.5))
    } else {
        Ok(fwd)
    }
}

/// Conv block with channel and spatial gates, a state-space scan over the
/// flattened features, and a residual connection around the whole block.
fn res_mamba(g: &mut Graph, p: &mut Binder, cfg: &NetworkConfig, name: &str, x: Var, ci: usize, co: usize) -> Result<Var> {
    let h = conv_norm_act(g, p, &format!("{name}/block"), x, ci, co)?;
    let hidden = (co / 4).max(2);
    let s = g.global_avg_pool(h);
    let s = linear(g, p, &format!("{name}/se1"), s, co, hidden)?;
    let s = g.silu(s);
    let s = linear(g, p, &format!("{name}/se2"), s, hidden, co)?;
    let s = g.sigmoid(s);
    let h = g.mul_channel(h, s);
    let m = conv(g, p, &format!("{name}/spatial"), h, co, 1, 1)?;
    let m = g.sigmoid(m);
    let h = g.mul_spatial(h, m);
    let y = ssm_layer(g, p, cfg, &format!("{name}/ssm"), h, co)?;
    let skip = if ci == co { x } else { conv(g, p, &format!("{name}/skip"), x, ci, co, 1)? };
    Ok(g.add(y, skip))
}

fn seg_decoder(
    g: &mut Graph,
    p: &mut Binder,
    name: &str,
    feats: &[(Var, usize)],
    out_channels: usize,
) -> Result<Var> {
    let (mut h, mut ch) = feats[feats.len() - 1];
    for l in (0..feats.len() - 1).rev() {
        let (skip, sc) = feats[l];
        let up = g.upsample2(h);
        let cat = g.concat(&[up, skip]);
        h = conv_norm_act(g, p, &format!("{name}/up{l}"), cat, ch + sc, sc)?;
        ch = sc;
    }
    h = conv_norm_act(g, p, &format!("{name}/refine"), h, ch, ch)?;
    conv(g, p, &format!("{name}/head"), h, ch, out_channels, 1)
}

/// Returns `(lesion_logits [2,…], organ_logits [S,…])` from SUV-space inputs.
pub fn segmenter_forward(g: &mut Graph, p: &mut Binder, cfg: &NetworkConfig, norm_map: &DiffusionNorm, p_hcr: Var, i_lc: Var) -> Result<(Var, Var)> {
    let spatial = same_patch(g, p_hcr, i_lc, "segmenter")?;
    let m = 1usize << (SEG_STAGES - 1);
    if spatial.iter().any(|&d| d % m != 0) {
        return Err(Error::Config(format!("segmenter patch {spatial:?} must be divisible by {m}")));
    }
    let c = cfg.base_channels;
    let x = g.concat(&[p_hcr, i_lc]);
    let x = g.scale(x, 1.0 / norm_map.suv_cutoff);
    let stem = conv_norm_act(g, p, "segmenter/stem", x, 2, c)?;
    let mut feats = Vec::new();
    let mut h = stem;
    let mut ch = c;
    for s in 0..SEG_STAGES {
        if s > 0 {
            h = g.avg_pool2(h);
        }
        let co = c << s;
        h = res_mamba(g, p, cfg, &format!("segmenter/enc{s}"), h, ch, co)?;
        ch = co;
        feats.push((h, ch));
    }
    let lesion = seg_decoder(g, p, "segmenter/lesion", &feats, 2)?;
    let organ = seg_decoder(g, p, "segmenter/organ", &feats, cfg.organ_channels())?;
    Ok((lesion, organ))
}

/// Creates every parameter of the three networks deterministically from `seed`.
pub fn init_params(cfg: &NetworkConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut params = ModelParams::new(seed);
    let m = cfg.patch_multiple();
    let shape = [1, m, m, m];
    let norm_map = DiffusionNorm::default();
    let mut g = Graph::new();
    let mut b = Binder::initializing(&mut params);
    let x = g.constant(Tensor::zeros(&shape));
    let eps = denoiser_forward(&mut g, &mut b, cfg, x, x, 1, 0.5)?;
    let r = revision_forward(&mut g, &mut b, cfg, &norm_map, eps, x)?;
    segmenter_forward(&mut g, &mut b, cfg, &norm_map, r, x)?;
    Ok(params)
}

fn patch_var(g: &mut Graph, data: &[f64], spatial: [usize; 3]) -> Result<Var> {
    let n: usize = spatial.iter().product();
    if data.len() != n {
        return Err(Error::Geometry(format!("patch has {} values, expected {n}", data.len())));
    }
    Ok(g.constant(Tensor::from_vec(&[1, spatial[0], spatial[1], spatial[2]], data.to_vec())))
}

/// Inference-only helpers over raw patch buffers in `[z, y, x]` order.
pub struct Inference<'a> {
    pub params: &'a ModelParams,
    pub config: &'a NetworkConfig,
    pub norm: DiffusionNorm,
    pub schedule: ScheduleTable,
}

impl<'a> Inference<'a> {
    pub fn from_checkpoint(ck: &'a Checkpoint) -> Result<Self> {
        Ok(Inference { params: &ck.params, config: &ck.network, norm: ck.diffusion.norm(), schedule: ck.diffusion.schedule()? })
    }

    pub fn eps(&self, x_t: &[f64], cond: &[f64], t: usize, spatial: [usize; 3]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let mut b = Binder::using(self.params, false);
        let x = patch_var(&mut g, x_t, spatial)?;
        let c = patch_var(&mut g, cond, spatial)?;
        self.schedule.check_t(t)?;
        let out = denoiser_forward(&mut g, &mut b, self.config, x, c, t, self.schedule.alpha_bar(t))?;
        Ok(g.value(out).data().to_vec())
    }

    /// Revised SUV patch from a diffusion-space estimate and the SUV input.
    pub fn revise(&self, p_hc: &[f64], i_lc: &[f64], spatial: [usize; 3]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let mut b = Binder::using(self.params, false);
        let x = patch_var(&mut g, p_hc, spatial)?;
        let c = patch_var(&mut g, i_lc, spatial)?;
        let out = revision_forward(&mut g, &mut b, self.config, &self.norm, x, c)?;
        Ok(g.value(out).data().to_vec())
    }

    /// Per-head softmax probabilities `(lesion [2·n], organ [S·n])`.
    pub fn segment(&self, p_hcr: &[f64], i_lc: &[f64], spatial: [usize; 3]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::new();
        let mut b = Binder::using(self.params, false);
        let x = patch_var(&mut g, p_hcr, spatial)?;
        let c = patch_var(&mut g, i_lc, spatial)?;
        let (l, o) = segmenter_forward(&mut g, &mut b, self.config, &self.norm, x, c)?;
        let l = g.softmax_channels(l);
        let o = g.softmax_channels(o);
        Ok((g.value(l).data().to_vec(), g.value(o).data().to_vec()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::cosine_schedule;

    fn tiny() -> NetworkConfig {
        NetworkConfig { base_channels: 4, levels: 3, time_embed_dim: 8, ssm_state_dim: 2, revision_channels: 3, classes: 3, ..Default::default() }
    }

    fn rand_patch(n: usize, seed: u64) -> Vec<f64> {
        use rand::Rng as _;
        let mut r = crate::rng::from_seed(seed);
        (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn shapes_and_identity_at_init() {
        let cfg = tiny();
        let params = init_params(&cfg, 3).unwrap();
        let inf = Inference { params: &params, config: &cfg, norm: DiffusionNorm::default(), schedule: cosine_schedule(50, 0.008).unwrap() };
        let sp = [8, 4, 4];
        let n = 128;
        let x = rand_patch(n, 1);
        let c = rand_patch(n, 2);
        assert_eq!(inf.eps(&x, &c, 1, sp).unwrap().len(), n);
        let lc: Vec<f64> = c.iter().map(|v| 5.0 * (v + 1.0)).collect();
        assert_eq!(inf.revise(&x, &lc, sp).unwrap(), lc);
        let (l, o) = inf.segment(&lc, &lc, sp).unwrap();
        assert_eq!(l.len(), 2 * n);
        assert_eq!(o.len(), 3 * n);
        assert!(l.iter().chain(&o).all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn init_is_seeded() {
        let cfg = tiny();
        let a = init_params(&cfg, 1).unwrap();
        assert_eq!(a, init_params(&cfg, 1).unwrap());
        assert_ne!(a, init_params(&cfg, 2).unwrap());
        assert!(a.is_finite());
        let a_raw = a.get("segmenter/enc0/ssm/a_raw").unwrap();
        assert!(a_raw.data().iter().all(|v| (v.tanh() - 0.5).abs() < 1e-12));
        for prefix in [DENOISER, REVISION, SEGMENTER] {
            assert!(a.group(prefix).count() > 0);
        }
        assert_eq!(a.len(), a.group(DENOISER).count() + a.group(REVISION).count() + a.group(SEGMENTER).count());
    }

    #[test]
    fn time_conditioning_changes_output() {
        let cfg = tiny();
        let params = init_params(&cfg, 5).unwrap();
        let inf = Inference { params: &params, config: &cfg, norm: DiffusionNorm::default(), schedule: cosine_schedule(50, 0.008).unwrap() };
        let sp = [4, 4, 4];
        let x = rand_patch(64, 1);
        let a = inf.eps(&x, &x, 1, sp).unwrap();
        let b = inf.eps(&x, &x, 50, sp).unwrap();
        let diff = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(diff > 0.0);
    }

    #[test]
    fn bad_patch_is_config_error() {
        let cfg = tiny();
        let params = init_params(&cfg, 5).unwrap();
        let inf = Inference { params: &params, config: &cfg, norm: DiffusionNorm::default(), schedule: cosine_schedule(50, 0.008).unwrap() };
        let x = rand_patch(27, 1);
        assert!(matches!(inf.eps(&x, &x, 1, [3, 3, 3]), Err(Error::Config(_))));
        assert!(matches!(inf.segment(&x, &x, [3, 3, 3]), Err(Error::Config(_))));
    }
}
