//! Building blocks shared by the three networks.

use crate::autograd::{Graph, Var};
use crate::error::Result;

use super::params::{Binder, Init};

/// Number of norm groups for `c` channels: the fewest groups that divide
/// `c` with at most 8 channels each.
pub fn norm_groups(c: usize) -> usize {
    (1..=c).find(|g| c % g == 0 && c / g <= 8).unwrap_or(c)
}

pub fn conv(g: &mut Graph, p: &mut Binder, name: &str, x: Var, ci: usize, co: usize, k: usize) -> Result<Var> {
    let w = p.param(g, &format!("{name}/w"), &[co, ci, k, k, k], Init::FanIn(ci * k * k * k, 1.0))?;
    let b = p.param(g, &format!("{name}/b"), &[co], Init::Zeros)?;
    Ok(g.conv3d(x, w, b))
}

/// Convolution whose weights start at zero.
pub fn conv_zero(g: &mut Graph, p: &mut Binder, name: &str, x: Var, ci: usize, co: usize, k: usize) -> Result<Var> {
    let w = p.param(g, &format!("{name}/w"), &[co, ci, k, k, k], Init::Zeros)?;
    let b = p.param(g, &format!("{name}/b"), &[co], Init::Zeros)?;
    Ok(g.conv3d(x, w, b))
}

/// Convolution with a reduced initial gain.
pub fn conv_scaled(g: &mut Graph, p: &mut Binder, name: &str, x: Var, ci: usize, co: usize, k: usize, gain: f64) -> Result<Var> {
    let w = p.param(g, &format!("{name}/w"), &[co, ci, k, k, k], Init::FanIn(ci * k * k * k, gain))?;
    let b = p.param(g, &format!("{name}/b"), &[co], Init::Zeros)?;
    Ok(g.conv3d(x, w, b))
}

pub fn norm(g: &mut Graph, p: &mut Binder, name: &str, x: Var, c: usize) -> Result<Var> {
    let gamma = p.param(g, &format!("{name}/gamma"), &[c], Init::Const(1.0))?;
    let beta = p.param(g, &format!("{name}/beta"), &[c], Init::Zeros)?;
    Ok(g.group_norm(x, gamma, beta, norm_groups(c)))
}

pub fn linear(g: &mut Graph, p: &mut Binder, name: &str, x: Var, n_in: usize, n_out: usize) -> Result<Var> {
    let w = p.param(g, &format!("{name}/w"), &[n_out, n_in], Init::FanIn(n_in, 1.0))?;
    let b = p.param(g, &format!("{name}/b"), &[n_out], Init::Zeros)?;
    Ok(g.linear(x, w, b))
}

/// norm → SiLU → conv.
pub fn norm_act_conv(g: &mut Graph, p: &mut Binder, name: &str, x: Var, ci: usize, co: usize) -> Result<Var> {
    let h = norm(g, p, &format!("{name}/norm"), x, ci)?;
    let h = g.silu(h);
    conv(g, p, &format!("{name}/conv"), h, ci, co, 3)
}

/// conv → norm → SiLU.
pub fn conv_norm_act(g: &mut Graph, p: &mut Binder, name: &str, x: Var, ci: usize, co: usize) -> Result<Var> {
    let h = conv(g, p, &format!("{name}/conv"), x, ci, co, 3)?;
    let h = norm(g, p, &format!("{name}/norm"), h, co)?;
    Ok(g.silu(h))
}

/// Residual block with an optional additive per-channel conditioning vector.
pub fn res_block(
    g: &mut Graph,
    p: &mut Binder,
    name: &str,
    x: Var,
    ci: usize,
    co: usize,
    temb: Option<(Var, usize)>,
) -> Result<Var> {
    let mut h = norm_act_conv(g, p, &format!("{name}/in"), x, ci, co)?;
    if let Some((e, dim)) = temb {
        let e = g.silu(e);
        let shift = linear(g, p, &format!("{name}/temb"), e, dim, co)?;
        h = g.add_channel(h, shift);
    }
    let h = norm_act_conv(g, p, &format!("{name}/out"), h, co, co)?;
    let skip = if ci == co { x } else { conv(g, p, &format!("{name}/skip"), x, ci, co, 1)? };
    Ok(g.add(h, skip))
}

/// Single-head self-attention over all voxels of `x` (`[C, z, y, x]`).
pub fn attention(g: &mut Graph, p: &mut Binder, name: &str, x: Var, c: usize) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let n: usize = shape[1..].iter().product();
    let h = norm(g, p, &format!("{name}/norm"), x, c)?;
    let q = conv(g, p, &format!("{name}/q"), h, c, c, 1)?;
    let k = conv(g, p, &format!("{name}/k"), h, c, c, 1)?;
    let v = conv(g, p, &format!("{name}/v"), h, c, c, 1)?;
    let q = g.reshape(q, &[c, n]);
    let k = g.reshape(k, &[c, n]);
    let v = g.reshape(v, &[c, n]);
    // scores[key, query]; softmax runs over the key axis.
    let scores = g.matmul(k, q, true, false);
    let scores = g.scale(scores, 1.0 / (c as f64).sqrt());
    let attn = g.softmax_channels(scores);
    let out = g.matmul(v, attn, false, false);
    let out = g.reshape(out, &shape);
    let out = conv(g, p, &format!("{name}/proj"), out, c, c, 1)?;
    Ok(g.add(x, out))
}

/// Sinusoidal embedding of a timestep: `[sin(t·f_i)…, cos(t·f_i)…]`.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        out[i] = (t as f64 * freq).sin();
        out[half + i] = (t as f64 * freq).cos();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_have_at_most_eight_channels() {
        assert_eq!(norm_groups(1), 1);
        assert_eq!(norm_groups(8), 1);
        assert_eq!(norm_groups(16), 2);
        assert_eq!(norm_groups(12), 2);
        assert_eq!(norm_groups(64), 8);
        for c in 1..100 {
            let gr = norm_groups(c);
            assert_eq!(c % gr, 0);
            assert!(c / gr <= 8 || gr == c);
        }
    }

    #[test]
    fn embedding_depends_on_t() {
        let a = timestep_embedding(1, 16);
        let b = timestep_embedding(50, 16);
        assert_eq!(a.len(), 16);
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-3));
        assert!((a[0] - 1f64.sin()).abs() < 1e-15);
        assert!((a[8] - 1f64.cos()).abs() < 1e-15);
    }
}
