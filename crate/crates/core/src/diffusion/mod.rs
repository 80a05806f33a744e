//! Multiview latent diffusion at toy scale: schedule, forward process,
//! noise-prediction loss, training on the attention blocks only, and
//! ancestral sampling of all views jointly.

pub mod demo;
mod denoiser;
mod schedule;

pub use denoiser::{
    ConditionEmbedding, DenoiserConfig, DenoiserContext, DenoiserGeometry, DenoiserGrads, NamedParam, ToyDenoiser,
    POSE_HARMONIC,
};
pub use schedule::{forward_diffuse_closed, forward_diffuse_step, linear_beta_schedule, NoiseSchedule};

use serde::{Deserialize, Serialize};

use crate::camera::ViewLayout;
use crate::error::{Error, Result};
use crate::tensor::{DeterministicRng, Tensor};

/// Anything that predicts the per-view noise of `z_t`.
pub trait NoisePredictor {
    fn predict(&self, z_t: &[Tensor], t: usize, cond: &ConditionEmbedding) -> Result<Vec<Tensor>>;
}

/// A denoiser with its sampling geometry fixed to one layout and resolution.
pub struct BoundDenoiser<'a> {
    pub denoiser: &'a ToyDenoiser,
    pub geometry: DenoiserGeometry,
}

impl<'a> BoundDenoiser<'a> {
    pub fn new(denoiser: &'a ToyDenoiser, layout: &ViewLayout, height: usize, width: usize) -> Result<Self> {
        Ok(Self {
            geometry: denoiser.bind(layout, height, width)?,
            denoiser,
        })
    }
}

impl NoisePredictor for BoundDenoiser<'_> {
    fn predict(&self, z_t: &[Tensor], t: usize, cond: &ConditionEmbedding) -> Result<Vec<Tensor>> {
        Ok(self.denoiser.forward(&self.geometry, z_t, t, cond)?.0)
    }
}

/// One training draw: a timestep shared by all views and independent noise
/// per view.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionDraw {
    pub t: usize,
    pub noise: Vec<Tensor>,
    pub z_t: Vec<Tensor>,
}

pub fn draw_diffusion(z0: &[Tensor], schedule: &NoiseSchedule, rng: &mut DeterministicRng) -> Result<DiffusionDraw> {
    let t = rng.int_inclusive(1, schedule.steps());
    let noise: Vec<Tensor> = z0.iter().map(|z| Tensor::randn(z.shape(), rng)).collect();
    let z_t = z0
        .iter()
        .zip(&noise)
        .map(|(z, e)| forward_diffuse_closed(z, t, schedule, e))
        .collect::<Result<_>>()?;
    Ok(DiffusionDraw { t, noise, z_t })
}

/// Mean squared error over every view and element.
pub fn noise_mse(prediction: &[Tensor], noise: &[Tensor]) -> Result<f64> {
    if prediction.len() != noise.len() {
        return Err(Error::InvalidArgument("prediction and noise view counts differ".into()));
    }
    let mut total = 0.0;
    let mut count = 0;
    for (p, e) in prediction.iter().zip(noise) {
        total += p.sub(e)?.data().iter().map(|d| d * d).sum::<f64>();
        count += p.len();
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone)]
pub struct MvsLossContext {
    pub draw: DiffusionDraw,
    pub cond: ConditionEmbedding,
    pub prediction: Vec<Tensor>,
}

/// Draws `t` and per-view noise, conditions on `input_view`, and returns the
/// noise-prediction MSE.
pub fn mvs_loss(
    predictor: &impl NoisePredictor,
    z0: &[Tensor],
    schedule: &NoiseSchedule,
    layout: &ViewLayout,
    input_view: usize,
    rng: &mut DeterministicRng,
) -> Result<(f64, MvsLossContext)> {
    if z0.len() != layout.len() {
        return Err(Error::InvalidArgument(format!("{} latents for {} views", z0.len(), layout.len())));
    }
    let cond = ConditionEmbedding::new(layout, input_view, &z0[input_view])?;
    let draw = draw_diffusion(z0, schedule, rng)?;
    let prediction = predictor.predict(&draw.z_t, draw.t, &cond)?;
    let loss = noise_mse(&prediction, &draw.noise)?;
    Ok((loss, MvsLossContext { draw, cond, prediction }))
}

/// Loss and trainable-parameter gradient for a fixed draw.
pub fn loss_and_gradient(
    denoiser: &ToyDenoiser,
    geometry: &DenoiserGeometry,
    draw: &DiffusionDraw,
    cond: &ConditionEmbedding,
) -> Result<(f64, DenoiserGrads)> {
    let (prediction, ctx) = denoiser.forward(geometry, &draw.z_t, draw.t, cond)?;
    let loss = noise_mse(&prediction, &draw.noise)?;
    let count: usize = prediction.iter().map(Tensor::len).sum();
    let grad_out = prediction
        .iter()
        .zip(&draw.noise)
        .map(|(p, e)| Ok(p.sub(e)?.scale(2.0 / count as f64)))
        .collect::<Result<Vec<_>>>()?;
    Ok((loss, denoiser.backward(&ctx, &grad_out)?))
}

#[derive(Debug, Clone)]
pub struct TrainExample {
    pub z0: Vec<Tensor>,
    pub input_view: usize,
}

/// SGD with heavy-ball momentum: `v ← μ v + g`, `θ ← θ − lr v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Option<DenoiserGrads>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            velocity: None,
        }
    }
}

/// One step over `batch`; returns the mean loss before the update. Only the
/// attention blocks change.
pub fn train_step(
    denoiser: &mut ToyDenoiser,
    geometry: &DenoiserGeometry,
    layout: &ViewLayout,
    batch: &[TrainExample],
    schedule: &NoiseSchedule,
    opt: &mut Sgd,
    rng: &mut DeterministicRng,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut grads = DenoiserGrads::zeros_like(denoiser);
    let mut loss = 0.0;
    let weight = 1.0 / batch.len() as f64;
    for ex in batch {
        let cond = ConditionEmbedding::new(layout, ex.input_view, &ex.z0[ex.input_view])?;
        let draw = draw_diffusion(&ex.z0, schedule, rng)?;
        let (l, g) = loss_and_gradient(denoiser, geometry, &draw, &cond)?;
        loss += weight * l;
        grads.axpy(weight, &g)?;
    }
    let velocity = match opt.velocity.take() {
        Some(mut v) => {
            for (_, t) in v.eca_mid.named_tensors_mut().into_iter().chain(v.eca_up.named_tensors_mut()) {
                *t = t.scale(opt.momentum);
            }
            v.axpy(1.0, &grads)?;
            v
        }
        None => grads,
    };
    if opt.learning_rate != 0.0 {
        denoiser.apply_update(-opt.learning_rate, &velocity)?;
    }
    opt.velocity = Some(velocity);
    Ok(loss)
}

/// Returns the exact noise `(z_t − √ᾱ_t z_0) / √(1 − ᾱ_t)` for known `z_0`.
pub struct OraclePredictor<'a> {
    pub z0: &'a [Tensor],
    pub schedule: &'a NoiseSchedule,
}

impl NoisePredictor for OraclePredictor<'_> {
    fn predict(&self, z_t: &[Tensor], t: usize, _: &ConditionEmbedding) -> Result<Vec<Tensor>> {
        if z_t.len() != self.z0.len() {
            return Err(Error::InvalidArgument("oracle view count mismatch".into()));
        }
        let ab = self.schedule.alpha_bar(t);
        z_t.iter()
            .zip(self.z0)
            .map(|(x, z)| Ok(x.sub(&z.scale(ab.sqrt()))?.scale(1.0 / (1.0 - ab).sqrt())))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerOptions {
    /// Adds `σ_t z` with `σ_t² = β̃_t` for `t > 1`.
    pub posterior_noise: bool,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        Self { posterior_noise: true }
    }
}

/// Ancestral sampling from `𝒩(0, I)` at `t = T` down to `t = 0` for all views
/// jointly.
pub fn sample_multiview(
    predictor: &impl NoisePredictor,
    schedule: &NoiseSchedule,
    cond: &ConditionEmbedding,
    rng: &mut DeterministicRng,
    latent_shape: &[usize],
    options: SamplerOptions,
) -> Result<Vec<Tensor>> {
    let views = cond.views();
    let mut x: Vec<Tensor> = (0..views).map(|_| Tensor::randn(latent_shape, rng)).collect();
    for t in (1..=schedule.steps()).rev() {
        let eps = predictor.predict(&x, t, cond)?;
        if eps.len() != views {
            return Err(Error::InvalidArgument("predictor returned the wrong number of views".into()));
        }
        let coef = schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt();
        let inv_sqrt_alpha = 1.0 / schedule.alpha(t).sqrt();
        let sigma = schedule.posterior_variance(t).sqrt();
        for (xi, ei) in x.iter_mut().zip(&eps) {
            let mut next = xi.clone();
            next.axpy(-coef, ei)?;
            next = next.scale(inv_sqrt_alpha);
            if options.posterior_noise && t > 1 {
                next.axpy(sigma, &Tensor::randn(latent_shape, rng))?;
            }
            *xi = next;
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::CameraIntrinsics;

    struct Zero;

    impl NoisePredictor for Zero {
        fn predict(&self, z_t: &[Tensor], _: usize, _: &ConditionEmbedding) -> Result<Vec<Tensor>> {
            Ok(z_t.iter().map(|z| Tensor::zeros(z.shape())).collect())
        }
    }

    fn ring(n: usize) -> ViewLayout {
        let all = ViewLayout::eval_ring(CameraIntrinsics::square(64).unwrap()).unwrap();
        all.select(&(0..n).collect::<Vec<_>>()).unwrap()
    }

    fn latents(n: usize, rng: &mut DeterministicRng) -> Vec<Tensor> {
        (0..n).map(|_| Tensor::uniform(&[4, 4, 3], 1.0, rng)).collect()
    }

    #[test]
    fn oracle_predictor_has_zero_loss() {
        let schedule = NoiseSchedule::toy_default();
        let layout = ring(3);
        let mut rng = DeterministicRng::new(1);
        let z0 = latents(3, &mut rng);
        let oracle = OraclePredictor { z0: &z0, schedule: &schedule };
        for _ in 0..5 {
            let (loss, _) = mvs_loss(&oracle, &z0, &schedule, &layout, 0, &mut rng).unwrap();
            assert!(loss < 1e-20, "{loss}");
        }
    }

    #[test]
    fn zero_predictor_loss_is_noise_power() {
        let schedule = NoiseSchedule::toy_default();
        let layout = ring(4);
        let mut rng = DeterministicRng::new(2);
        let z0: Vec<Tensor> = (0..4).map(|_| Tensor::uniform(&[16, 16, 3], 1.0, &mut rng)).collect();
        let trials = 50;
        let mut total = 0.0;
        for _ in 0..trials {
            total += mvs_loss(&Zero, &z0, &schedule, &layout, 1, &mut rng).unwrap().0;
        }
        let n = (trials * 4 * 16 * 16 * 3) as f64;
        // mean of n squared standard normals has standard deviation √(2/n)
        assert!((total / trials as f64 - 1.0).abs() < 3.0 * (2.0 / n).sqrt());
    }

    #[test]
    fn loss_is_invariant_to_view_permutation() {
        let schedule = NoiseSchedule::toy_default();
        let layout = ring(3);
        let mut rng = DeterministicRng::new(3);
        let d = ToyDenoiser::new(DenoiserConfig::new(3, 4, 100, 2, 4), &mut rng).unwrap();
        let z0 = latents(3, &mut rng);
        let draw = draw_diffusion(&z0, &schedule, &mut rng).unwrap();
        let cond = ConditionEmbedding::new(&layout, 0, &z0[0]).unwrap();
        let geom = d.bind(&layout, 4, 4).unwrap();
        let (a, _) = loss_and_gradient(&d, &geom, &draw, &cond).unwrap();

        let order = [2, 0, 1];
        let layout_p = layout.select(&order).unwrap();
        let draw_p = DiffusionDraw {
            t: draw.t,
            noise: order.iter().map(|&i| draw.noise[i].clone()).collect(),
            z_t: order.iter().map(|&i| draw.z_t[i].clone()).collect(),
        };
        let cond_p = ConditionEmbedding::new(&layout_p, 1, &z0[0]).unwrap();
        assert!(cond_p.vectors.max_abs_diff(&cond.permuted(&order).unwrap().vectors).unwrap() < 1e-12);
        let geom_p = d.bind(&layout_p, 4, 4).unwrap();
        let (b, _) = loss_and_gradient(&d, &geom_p, &draw_p, &cond_p).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn closed_form_matches_iterated_steps() {
        let schedule = linear_beta_schedule(10, 0.01, 0.2).unwrap();
        let t = 6;
        let z0 = Tensor::new(vec![1], vec![0.7]).unwrap();
        let mut rng = DeterministicRng::new(4);
        let n = 10_000;
        let (mut iter, mut closed) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for _ in 0..n {
            let mut z = z0.clone();
            for s in 1..=t {
                z = forward_diffuse_step(&z, s, &schedule, &mut rng).unwrap();
            }
            iter.push(z.data()[0]);
            let e = Tensor::randn(&[1], &mut rng);
            closed.push(forward_diffuse_closed(&z0, t, &schedule, &e).unwrap().data()[0]);
        }
        let stats = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64)
        };
        let ((m1, v1), (m2, v2)) = (stats(&iter), stats(&closed));
        let var = 1.0 - schedule.alpha_bar(t);
        assert!((m1 - m2).abs() < 3.0 * (2.0 * var / n as f64).sqrt());
        assert!((v1 - v2).abs() < 3.0 * var * (4.0 / (n - 1) as f64).sqrt());
    }

    #[test]
    fn oracle_sampler_recovers_latents() {
        let schedule = NoiseSchedule::toy_default();
        let layout = ring(16);
        let mut rng = DeterministicRng::new(5);
        let z0 = latents(16, &mut rng);
        let cond = ConditionEmbedding::new(&layout, 0, &z0[0]).unwrap();
        let oracle = OraclePredictor { z0: &z0, schedule: &schedule };
        for noise in [false, true] {
            let out = sample_multiview(&oracle, &schedule, &cond, &mut rng, &[4, 4, 3], SamplerOptions { posterior_noise: noise }).unwrap();
            assert_eq!(out.len(), 16);
            for (a, b) in out.iter().zip(&z0) {
                assert!(a.max_abs_diff(b).unwrap() < 1e-6);
            }
        }
    }

    #[test]
    fn sampler_is_deterministic() {
        let schedule = linear_beta_schedule(10, 1e-3, 0.05).unwrap();
        let layout = ring(2);
        let mut rng = DeterministicRng::new(6);
        let d = ToyDenoiser::new(DenoiserConfig::new(3, 4, 10, 2, 4), &mut rng).unwrap();
        let bound = BoundDenoiser::new(&d, &layout, 4, 4).unwrap();
        let cond = ConditionEmbedding::new(&layout, 0, &Tensor::zeros(&[4, 4, 3])).unwrap();
        let run = |seed| sample_multiview(&bound, &schedule, &cond, &mut DeterministicRng::new(seed), &[4, 4, 3], SamplerOptions::default()).unwrap();
        let (a, b) = (run(7), run(7));
        assert!(a.iter().zip(&b).all(|(x, y)| x.bit_eq(y)));
        assert!(!a[0].bit_eq(&run(8)[0]));
    }

    #[test]
    fn training_touches_only_attention_blocks() {
        let schedule = linear_beta_schedule(10, 1e-3, 0.05).unwrap();
        let layout = ring(2);
        let mut rng = DeterministicRng::new(7);
        let mut d = ToyDenoiser::new(DenoiserConfig::new(3, 4, 10, 2, 4), &mut rng).unwrap();
        let geom = d.bind(&layout, 4, 4).unwrap();
        let batch = vec![TrainExample { z0: latents(2, &mut rng), input_view: 0 }];
        let frozen = d.frozen_bytes();

        let before = d.clone();
        let mut still = Sgd::new(0.0, 0.9);
        train_step(&mut d, &geom, &layout, &batch, &schedule, &mut still, &mut rng).unwrap();
        assert_eq!(d, before);

        let mut opt = Sgd::new(0.05, 0.9);
        for _ in 0..3 {
            train_step(&mut d, &geom, &layout, &batch, &schedule, &mut opt, &mut rng).unwrap();
        }
        assert_eq!(d.frozen_bytes(), frozen);
        assert!(!d.eca_up.output.is_zero());
    }
}
