use orca_tape::{Adam, Graph, Module, Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Backend, DenoiseRequest, NoiseSchedule, ToyUNet};
use crate::conditioner::Conditioner;
use crate::envkit::{make_env, DemoDataset};
use crate::error::contract;
use crate::{Error, Frame, Result};

/// Short epsilon-prediction fit of the toy denoiser. A fixture that gives the
/// frozen backbone features shaped by the environment's own frames.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Timesteps are drawn uniformly from `1..=max_timestep`.
    pub max_timestep: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 400, batch_size: 8, lr: 1e-3, max_timestep: 1000, seed: 0 }
    }
}

/// Trains every parameter of `unet` to predict the added noise on
/// `(frame, condition)` pairs; conditions are `[L, D]`. Returns the loss per
/// step. The network is handed back frozen.
pub fn pretrain_denoiser<S: Scalar>(
    unet: &mut ToyUNet<S>,
    schedule: &NoiseSchedule,
    data: &[(&Frame, &Tensor<S>)],
    config: &PretrainConfig,
) -> Result<Vec<f64>> {
    contract!(!data.is_empty(), "pre-training needs at least one frame");
    contract!(config.batch_size > 0, "batch_size must be positive");
    let max_t = config.max_timestep.min(schedule.steps());
    contract!(max_t >= 1, "max_timestep must be at least 1");
    let len = data[0].1.shape()[0];
    contract!(data.iter().all(|(_, c)| c.shape()[0] == len), "pre-training conditions must share one length");

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(config.lr);
    unet.set_trainable(true);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut idx = Vec::with_capacity(config.batch_size);
        while idx.len() < config.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let ts: Vec<usize> = idx.iter().map(|_| rng.random_range(1..=max_t)).collect();
        let mut z = Vec::with_capacity(idx.len());
        let mut eps = Vec::with_capacity(idx.len());
        for (&i, &t) in idx.iter().zip(&ts) {
            let z0 = unet.encode(data[i].0)?.values;
            let e = Tensor::<S>::randn(z0.shape(), 1.0, &mut rng);
            let bar = schedule.bar_alpha(t)?;
            let (a, b) = (S::c(bar.sqrt()), S::c((1.0 - bar).sqrt()));
            let zt = z0.data().iter().zip(e.data()).map(|(&x, &n)| a * x + b * n).collect();
            z.push(Tensor::from_vec(z0.shape(), zt));
            eps.push(e);
        }
        let conds: Vec<&Tensor<S>> = idx.iter().map(|&i| data[i].1).collect();
        let z = Tensor::stack(&z.iter().collect::<Vec<_>>());
        let target = Tensor::stack(&eps.iter().collect::<Vec<_>>());
        let cond = Tensor::stack(&conds);

        let grads = {
            let mut g = Graph::new();
            let zv = g.constant(z);
            let cv = g.constant(cond);
            let req = DenoiseRequest { predict_noise: true, ..Default::default() };
            let out = unet.denoise_graph(&mut g, zv, &ts, cv, &req)?;
            let loss = g.mse(out.noise_pred.expect("requested"), &target);
            let l = g.value(loss).data()[0].as_f64();
            if !l.is_finite() {
                unet.set_trainable(false);
                return Err(Error::Divergence { step, detail: format!("denoising loss {l}") });
            }
            losses.push(l);
            g.backward(loss)
        };
        adam.step(&mut unet.params_mut(), &grads);
    }
    unet.set_trainable(false);
    Ok(losses)
}

/// Every demonstration frame paired with the text encoding of the scene
/// description rendered from its stored simulator state.
pub fn described_frames<S: Scalar>(dataset: &DemoDataset, conditioner: &Conditioner<S>) -> Result<Vec<(Frame, Tensor<S>)>> {
    let mut env = make_env(dataset.env_id);
    let mut out = Vec::with_capacity(dataset.num_steps());
    for ep in &dataset.episodes {
        for (frame, state) in ep.observations.iter().zip(&ep.states) {
            let s: Vec<f64> = state.iter().map(|&v| f64::from(v)).collect();
            env.set_state(&s)?;
            out.push((frame.clone(), conditioner.encode_text(&env.describe())?.tokens));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ToyUNetConfig;

    #[test]
    fn loss_decreases_and_weights_end_frozen() {
        let cfg = ToyUNetConfig { image_size: 8, ..Default::default() };
        let mut unet = ToyUNet::<f32>::new(cfg);
        let frames: Vec<Frame> =
            (0..4).map(|i| Frame::filled(8, 8, [40 * i as u8, 200 - 30 * i as u8, 90])).collect();
        let cond = Tensor::<f32>::zeros(&[2, 32]);
        let data: Vec<_> = frames.iter().map(|f| (f, &cond)).collect();
        let before = unet.checksum();
        let pc = PretrainConfig { steps: 60, batch_size: 4, max_timestep: 500, ..Default::default() };
        let losses = pretrain_denoiser(&mut unet, &NoiseSchedule::default(), &data, &pc).unwrap();
        let head: f64 = losses[..10].iter().sum();
        let tail: f64 = losses[50..].iter().sum();
        assert!(tail < head, "{head} -> {tail}");
        assert_ne!(before, unet.checksum());
        assert!(Backend::params(&unet).iter().all(|p| !p.is_trainable()));
    }
}
