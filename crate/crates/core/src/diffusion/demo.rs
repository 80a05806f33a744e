//! The toy training run: two synthetic scenes on the 16-view evaluation ring,
//! latents from downsampled renders, attention blocks trained on top of a
//! frozen random base.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    train_step, ConditionEmbedding, DenoiserConfig, NoiseSchedule, Sgd, TrainExample, ToyDenoiser,
};
use crate::camera::{CameraIntrinsics, ViewLayout};
use crate::eca::checkpoint::{fill_named, load_checkpoint, save_checkpoint};
use crate::error::{Error, Result};
use crate::scene::{downsample, make_dataset, SceneKind, SyntheticScene};
use crate::tensor::{DeterministicRng, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainDemoConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    pub render_res: usize,
    pub latent_res: usize,
    pub channels: usize,
    pub k: usize,
    pub s: usize,
    pub input_view: usize,
    /// Independent `(t, ε)` draws per scene in every step.
    pub draws_per_scene: usize,
    /// Steps averaged at the end of the curve for the reported final loss.
    pub final_window: usize,
}

impl Default for TrainDemoConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            learning_rate: 0.01,
            momentum: 0.9,
            seed: 0,
            render_res: 32,
            latent_res: 8,
            channels: 16,
            k: 4,
            s: 8,
            input_view: 0,
            draws_per_scene: 2,
            final_window: 25,
        }
    }
}

impl TrainDemoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.draws_per_scene == 0 {
            return Err(Error::InvalidArgument("draws_per_scene must be >= 1".into()));
        }
        if self.steps == 0 || self.final_window == 0 || self.final_window > self.steps {
            return Err(Error::InvalidArgument("need 1 <= final_window <= steps".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument("learning rate must be >= 0 and momentum in [0, 1)".into()));
        }
        if self.latent_res == 0 || self.render_res % self.latent_res != 0 {
            return Err(Error::InvalidArgument("render_res must be a multiple of latent_res".into()));
        }
        if self.input_view >= 16 {
            return Err(Error::range("input_view", format!("{} not in 0..16", self.input_view)));
        }
        self.denoiser_config().validate()
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig::new(3, self.channels, NoiseSchedule::toy_default().steps(), self.k, self.s)
    }
}

/// Latents `2·rgb − 1` of both scenes, one per layout view.
#[derive(Debug, Clone)]
pub struct DemoData {
    pub layout: ViewLayout,
    pub scenes: Vec<TrainExample>,
}

pub fn demo_layout(render_res: usize) -> Result<ViewLayout> {
    ViewLayout::eval_ring(CameraIntrinsics::square(render_res)?)
}

pub fn demo_data(cfg: &TrainDemoConfig) -> Result<DemoData> {
    let layout = demo_layout(cfg.render_res)?;
    let factor = cfg.render_res / cfg.latent_res;
    let scenes = [SceneKind::Sphere, SceneKind::Voxel]
        .into_iter()
        .map(|kind| -> Result<TrainExample> {
            let set = make_dataset(&SyntheticScene::from_kind(kind), &layout, cfg.render_res, cfg.render_res)?;
            let z0 = set
                .rgb_maps()
                .iter()
                .map(|rgb| Ok(downsample(rgb, factor)?.map(|v| 2.0 * v - 1.0)))
                .collect::<Result<_>>()?;
            Ok(TrainExample {
                z0,
                input_view: cfg.input_view,
            })
        })
        .collect::<Result<_>>()?;
    Ok(DemoData { layout, scenes })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub config: TrainDemoConfig,
    pub loss: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub ratio: f64,
    pub frozen_unchanged: bool,
}

pub struct TrainDemoOutcome {
    pub curve: LossCurve,
    pub denoiser: ToyDenoiser,
    pub data: DemoData,
}

/// Full-batch training over both scenes from a fixed seed.
pub fn run_train_demo(cfg: &TrainDemoConfig) -> Result<TrainDemoOutcome> {
    cfg.validate()?;
    let data = demo_data(cfg)?;
    let schedule = NoiseSchedule::toy_default();
    let root = DeterministicRng::new(cfg.seed);
    let mut denoiser = ToyDenoiser::new(cfg.denoiser_config(), &mut root.fork(10))?;
    let frozen = denoiser.frozen_bytes();
    let geometry = denoiser.bind(&data.layout, cfg.latent_res, cfg.latent_res)?;
    let mut opt = Sgd::new(cfg.learning_rate, cfg.momentum);
    let mut rng = root.fork(11);
    let batch: Vec<TrainExample> = data
        .scenes
        .iter()
        .flat_map(|ex| std::iter::repeat_n(ex.clone(), cfg.draws_per_scene))
        .collect();
    let mut loss = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        loss.push(train_step(&mut denoiser, &geometry, &data.layout, &batch, &schedule, &mut opt, &mut rng)?);
    }
    let initial_loss = loss[0];
    let final_loss = loss[cfg.steps - cfg.final_window..].iter().sum::<f64>() / cfg.final_window as f64;
    let curve = LossCurve {
        config: cfg.clone(),
        initial_loss,
        final_loss,
        ratio: final_loss / initial_loss,
        frozen_unchanged: denoiser.frozen_bytes() == frozen,
        loss,
    };
    Ok(TrainDemoOutcome { curve, denoiser, data })
}

pub const LOSS_CURVE_FILE: &str = "loss_curve.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";

impl TrainDemoOutcome {
    /// `loss_curve.json` plus `checkpoint/` holding every denoiser tensor.
    pub fn write(&self, out: impl AsRef<Path>) -> Result<()> {
        let out = out.as_ref();
        fs::create_dir_all(out)?;
        fs::write(out.join(LOSS_CURVE_FILE), serde_json::to_string_pretty(&self.curve)?)?;
        save_denoiser(&self.denoiser, &self.curve.config, out.join(CHECKPOINT_DIR))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DenoiserManifestConfig {
    denoiser: DenoiserConfig,
    demo: TrainDemoConfig,
}

pub fn save_denoiser(d: &ToyDenoiser, demo: &TrainDemoConfig, dir: impl AsRef<Path>) -> Result<()> {
    let named: Vec<(String, &Tensor)> = d.named_params().into_iter().map(|p| (p.name, p.tensor)).collect();
    let config = serde_json::to_value(DenoiserManifestConfig {
        denoiser: d.config().clone(),
        demo: demo.clone(),
    })?;
    save_checkpoint(dir, &named, config)
}

/// Rebuilds a denoiser from [`save_denoiser`] output.
pub fn load_denoiser(dir: impl AsRef<Path>) -> Result<(ToyDenoiser, TrainDemoConfig)> {
    let (manifest, tensors) = load_checkpoint(dir)?;
    let cfg: DenoiserManifestConfig = serde_json::from_value(manifest.config)?;
    let mut d = ToyDenoiser::new(cfg.denoiser, &mut DeterministicRng::new(0))?;
    fill_named(d.named_params_mut(), &tensors)?;
    Ok((d, cfg.demo))
}

/// Condition for sampling every layout view of `scene` from its input view.
pub fn demo_condition(data: &DemoData, scene: usize) -> Result<ConditionEmbedding> {
    let ex = data
        .scenes
        .get(scene)
        .ok_or_else(|| Error::range("scene", format!("{scene} not in 0..{}", data.scenes.len())))?;
    ConditionEmbedding::new(&data.layout, ex.input_view, &ex.z0[ex.input_view])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainDemoConfig {
        TrainDemoConfig {
            steps: 3,
            final_window: 2,
            render_res: 8,
            latent_res: 4,
            channels: 4,
            k: 2,
            s: 2,
            ..TrainDemoConfig::default()
        }
    }

    #[test]
    fn data_layout_and_latent_range() {
        let data = demo_data(&tiny()).unwrap();
        assert_eq!(data.layout.len(), 16);
        assert_eq!(data.scenes.len(), 2);
        for ex in &data.scenes {
            assert_eq!(ex.z0.len(), 16);
            assert!(ex.z0.iter().all(|z| z.shape() == [4, 4, 3] && z.data().iter().all(|v| (-1.0..=1.0).contains(v))));
        }
    }

    #[test]
    fn short_run_is_reproducible_and_round_trips() {
        let a = run_train_demo(&tiny()).unwrap();
        let b = run_train_demo(&tiny()).unwrap();
        assert_eq!(a.curve, b.curve);
        assert!(a.curve.frozen_unchanged);
        let dir = tempfile::tempdir().unwrap();
        a.write(dir.path()).unwrap();
        let (loaded, demo) = load_denoiser(dir.path().join(CHECKPOINT_DIR)).unwrap();
        assert_eq!(demo, tiny());
        for (p, q) in a.denoiser.named_params().iter().zip(loaded.named_params()) {
            assert_eq!(p.name, q.name);
            assert!(p.tensor.max_abs_diff(q.tensor).unwrap() <= 1e-6 * (1.0 + p.tensor.max_abs()));
        }
    }

    #[test]
    fn invalid_configs() {
        assert!(TrainDemoConfig { final_window: 4, ..tiny() }.validate().is_err());
        assert!(TrainDemoConfig { latent_res: 3, ..tiny() }.validate().is_err());
        assert!(TrainDemoConfig { momentum: 1.0, ..tiny() }.validate().is_err());
        assert!(TrainDemoConfig { input_view: 16, ..tiny() }.validate().is_err());
    }
}
