use orca_tape::Scalar;

use super::LatentTensor;
use crate::error::contract;
use crate::{Error, Result};

/// Per-timestep signal retention coefficients.
///
/// `bar_alphas[0] == 1` so that timestep 0 denotes the clean latent;
/// `bar_alphas[t]` is the product of the first `t` alphas.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alphas: Vec<f64>,
    bar_alphas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_alphas(alphas: Vec<f64>) -> Result<Self> {
        if alphas.is_empty() {
            return Err(Error::Config("noise schedule needs at least one step".into()));
        }
        if let Some(a) = alphas.iter().find(|a| !(**a > 0.0 && **a <= 1.0)) {
            return Err(Error::Config(format!("alpha {a} outside (0, 1]")));
        }
        let mut bar_alphas = Vec::with_capacity(alphas.len() + 1);
        bar_alphas.push(1.0);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            bar_alphas.push(acc);
        }
        Ok(Self { alphas, bar_alphas })
    }

    /// Betas spaced linearly in square-root space, the schedule used by the
    /// common latent diffusion checkpoints (1000 steps, 0.00085 to 0.012).
    pub fn scaled_linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("noise schedule needs at least one step".into()));
        }
        let (s, e) = (beta_start.sqrt(), beta_end.sqrt());
        let alphas = (0..steps)
            .map(|i| {
                let frac = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
                let b = s + (e - s) * frac;
                1.0 - b * b
            })
            .collect();
        Self::from_alphas(alphas)
    }

    /// Number of noising steps `T`.
    pub fn steps(&self) -> usize {
        self.alphas.len()
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn bar_alphas(&self) -> &[f64] {
        &self.bar_alphas
    }

    pub fn bar_alpha(&self, t: usize) -> Result<f64> {
        self.bar_alphas
            .get(t)
            .copied()
            .ok_or_else(|| Error::Range(format!("timestep {t} outside 0..={}", self.steps())))
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::scaled_linear(1000, 0.00085, 0.012).expect("default schedule is valid")
    }
}

/// Closed-form forward noising: `sqrt(ā_t)·z0 + sqrt(1 − ā_t)·eps`.
///
/// At `t = 0` the clean latent is returned unchanged, bit for bit.
pub fn noise_latent<S: Scalar>(
    z0: &LatentTensor<S>,
    t: usize,
    eps: &LatentTensor<S>,
    schedule: &NoiseSchedule,
) -> Result<LatentTensor<S>> {
    contract!(
        z0.values.shape() == eps.values.shape(),
        "noise shape {:?} differs from latent shape {:?}",
        eps.values.shape(),
        z0.values.shape()
    );
    let bar = schedule.bar_alpha(t)?;
    if bar == 1.0 {
        return Ok(z0.clone());
    }
    let (a, b) = (S::c(bar.sqrt()), S::c((1.0 - bar).sqrt()));
    let data = z0.values.data().iter().zip(eps.values.data()).map(|(&z, &e)| a * z + b * e).collect();
    Ok(LatentTensor { values: orca_tape::Tensor::from_vec(z0.values.shape(), data), space: z0.space })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Space;
    use orca_tape::Tensor;

    fn lat(v: &[f64]) -> LatentTensor<f64> {
        LatentTensor { values: Tensor::from_f64(&[1, 1, v.len()], v), space: Space::Pixel }
    }

    #[test]
    fn default_schedule_invariants() {
        let s = NoiseSchedule::default();
        assert_eq!(s.steps(), 1000);
        assert_eq!(s.bar_alphas().len(), 1001);
        assert_eq!(s.bar_alphas()[0], 1.0);
        assert!(s.bar_alphas().windows(2).all(|w| w[1] <= w[0]));
        assert!(s.bar_alphas().iter().all(|&b| b > 0.0 && b <= 1.0));
    }

    #[test]
    fn hand_evaluated_scalar_case() {
        // bar alpha 0.25 at t = 1 and t = 2
        let s = NoiseSchedule::from_alphas(vec![0.5, 0.5]).unwrap();
        let out = noise_latent(&lat(&[2.0]), 2, &lat(&[1.0]), &s).unwrap();
        assert!((out.values.data()[0] - 1.866_025_4).abs() < 1e-7);
    }

    #[test]
    fn zero_signal_is_scaled_noise() {
        let s = NoiseSchedule::from_alphas(vec![0.5]).unwrap();
        let eps = lat(&[1.0, -2.0, 0.25]);
        let out = noise_latent(&lat(&[0.0, 0.0, 0.0]), 1, &eps, &s).unwrap();
        for (o, e) in out.values.data().iter().zip(eps.values.data()) {
            assert!((o - 0.5f64.sqrt() * e).abs() < 1e-15);
        }
    }

    #[test]
    fn errors() {
        let s = NoiseSchedule::from_alphas(vec![0.5]).unwrap();
        assert!(matches!(noise_latent(&lat(&[1.0]), 2, &lat(&[1.0]), &s), Err(Error::Range(_))));
        assert!(matches!(noise_latent(&lat(&[1.0]), 1, &lat(&[1.0, 2.0]), &s), Err(Error::Contract(_))));
        assert!(NoiseSchedule::from_alphas(vec![0.0]).is_err());
        assert!(NoiseSchedule::from_alphas(vec![]).is_err());
    }

    #[test]
    fn timestep_zero_is_bitwise_identity() {
        let s = NoiseSchedule::default();
        let z = lat(&[-0.0, 1e-300, 3.5]);
        let out = noise_latent(&z, 0, &lat(&[9.0, 9.0, 9.0]), &s).unwrap();
        let bits = |t: &LatentTensor<f64>| t.values.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&out), bits(&z));
    }
}
