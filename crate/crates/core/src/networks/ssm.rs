use crate::autograd::{kernels, Tensor};
use crate::error::{Error, Result};

/// Diagonal state-space parameters for `channels` independent sequences,
/// each with `state_dim` states. `a`, `b`, `c` are `[channels, state_dim]`
/// row-major; `d` is `[channels]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams {
    channels: usize,
    state_dim: usize,
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    d: Vec<f64>,
}

impl SsmParams {
    pub fn new(channels: usize, state_dim: usize, a: Vec<f64>, b: Vec<f64>, c: Vec<f64>, d: Vec<f64>) -> Result<Self> {
        let cn = channels * state_dim;
        if channels == 0 || state_dim == 0 || a.len() != cn || b.len() != cn || c.len() != cn || d.len() != channels {
            return Err(Error::Config("ssm parameter shapes do not match channels × state_dim".into()));
        }
        if let Some(v) = a.iter().find(|v| !(v.abs() < 1.0)) {
            return Err(Error::Config(format!("ssm decay {v} outside (-1, 1)")));
        }
        if b.iter().chain(&c).chain(&d).any(|v| !v.is_finite()) {
            return Err(Error::Config("ssm parameters must be finite".into()));
        }
        Ok(SsmParams { channels, state_dim, a, b, c, d })
    }

    /// Builds from unconstrained decays, mapped through `tanh`.
    pub fn from_raw(channels: usize, state_dim: usize, a_raw: &[f64], b: Vec<f64>, c: Vec<f64>, d: Vec<f64>) -> Result<Self> {
        SsmParams::new(channels, state_dim, a_raw.iter().map(|v| v.tanh()).collect(), b, c, d)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }
}

/// Runs the recurrence `h_k = a·h_{k-1} + b·x_k`, `y_k = Σ c·h_k + d·x_k`
/// (with `h_0 = 0`) over each channel's sequence. `x` holds `channels`
/// consecutive sequences of equal length.
pub fn ssm_scan(x: &[f64], params: &SsmParams) -> Result<Vec<f64>> {
    let ch = params.channels;
    if x.len() % ch != 0 {
        return Err(Error::Geometry(format!("sequence buffer of {} values is not divisible by {ch} channels", x.len())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("ssm input is not finite".into()));
    }
    let len = x.len() / ch;
    let (c, n) = (ch, params.state_dim);
    let out = kernels::ssm_scan(
        &Tensor::from_vec(&[c, len], x.to_vec()),
        &Tensor::from_vec(&[c, n], params.a.clone()),
        &Tensor::from_vec(&[c, n], params.b.clone()),
        &Tensor::from_vec(&[c, n], params.c.clone()),
        &Tensor::from_vec(&[c], params.d.clone()),
        false,
    );
    Ok(out.into_data())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn memoryless_when_a_is_zero() {
        let p = SsmParams::new(1, 1, vec![0.0], vec![2.0], vec![3.0], vec![0.5]).unwrap();
        let y = ssm_scan(&[1.0, -2.0, 4.0], &p).unwrap();
        assert_eq!(y, vec![6.5, -13.0, 26.0]);
    }

    #[test]
    fn near_unit_decay_accumulates() {
        let p = SsmParams::new(1, 1, vec![1.0 - 1e-12], vec![1.0], vec![1.0], vec![0.0]).unwrap();
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = ssm_scan(&x, &p).unwrap();
        let mut acc = 0.0;
        for (xi, yi) in x.iter().zip(&y) {
            acc += xi;
            assert!((yi - acc).abs() < 1e-9);
        }
    }

    #[test]
    fn unstable_decay_rejected() {
        assert!(SsmParams::new(1, 1, vec![1.0], vec![1.0], vec![1.0], vec![0.0]).is_err());
        assert!(SsmParams::new(1, 1, vec![-1.5], vec![1.0], vec![1.0], vec![0.0]).is_err());
        assert!(SsmParams::from_raw(1, 1, &[5.0], vec![1.0], vec![1.0], vec![0.0]).is_ok());
    }
}
