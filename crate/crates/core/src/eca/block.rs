//! The assembled block: gather, inject, cross-attend, ray-attend, fuse,
//! project, add.

use std::sync::Arc;

use super::stages::{
    fuse_ray_to_pixel, fuse_ray_to_pixel_backward, near_views_cross_attention,
    near_views_cross_attention_backward, ray_self_attention, ray_self_attention_backward,
    CrossAttentionContext, FusionContext, RaySelfAttentionContext,
};
use super::{EcaBlockParams, EcaConfig, EcaParamGrads};
use crate::camera::ViewLayout;
use crate::encoding::{harmonic_encode, harmonic_encode_rows, volume_plucker};
use crate::error::{Error, Result};
use crate::sampling::{plan_samples, SamplePlan};
use crate::tensor::Tensor;

/// Everything about one (layout, target, resolution) that does not depend on
/// feature values or parameters.
#[derive(Debug, Clone)]
pub struct EcaGeometry {
    pub cfg: EcaConfig,
    pub plan: SamplePlan,
    pub valid: Vec<bool>,
    /// `[K·H·W·S, 2L·6]` harmonic Plücker codes.
    pub ray_codes: Tensor,
    /// `[H·W·S, 2L]` harmonic depth codes of the target slice.
    pub depth_codes: Tensor,
}

impl EcaGeometry {
    pub fn new(layout: &ViewLayout, target: usize, feat_h: usize, feat_w: usize, cfg: &EcaConfig) -> Result<Self> {
        cfg.validate()?;
        let plan = plan_samples(layout, target, feat_h, feat_w, cfg.k, cfg.s, cfg.near, cfg.far)?;
        let plucker = volume_plucker(layout, &plan)?;
        let rows = plucker.rows();
        let ray_codes = harmonic_encode_rows(&plucker, &cfg.harmonic).reshape(&[rows, cfg.ray_encoding_dim()])?;
        let per_sample: Vec<Vec<f64>> = plan
            .depths
            .iter()
            .map(|t| harmonic_encode(&[(t - cfg.near) / (cfg.far - cfg.near)], &cfg.harmonic))
            .collect();
        let mut depth = Vec::with_capacity(plan.pixels() * per_sample.concat().len());
        for _ in 0..plan.pixels() {
            for code in &per_sample {
                depth.extend_from_slice(code);
            }
        }
        let depth_codes = Tensor::new(vec![plan.pixels() * cfg.s, cfg.depth_encoding_dim()], depth)?;
        Ok(Self {
            cfg: *cfg,
            valid: plan.valid(),
            plan,
            ray_codes,
            depth_codes,
        })
    }

    pub fn target(&self) -> usize {
        self.plan.target_index
    }

    /// Gathered volume plus encodings, `[K, H·W, S, C]`.
    pub fn injected_volume(&self, maps: &[Tensor], params: &EcaBlockParams) -> Result<Tensor> {
        let mut volume = self.plan.gather(maps)?;
        let c = volume.last_dim();
        if c != self.cfg.channels || params.channels() != c {
            return Err(Error::shape("eca volume", volume.shape(), &[self.cfg.channels]));
        }
        let ray = params.ray_proj.forward(&self.ray_codes)?;
        for (v, r) in volume.data_mut().iter_mut().zip(ray.data()) {
            *v += r;
        }
        if self.cfg.depth_encoding {
            let depth = params.depth_proj.forward(&self.depth_codes)?;
            for (v, d) in volume.data_mut().iter_mut().zip(depth.data()) {
                *v += d;
            }
        }
        Ok(volume)
    }
}

/// Saved forward state for [`eca_backward`].
#[derive(Debug, Clone)]
pub struct EcaContext {
    geometry: Arc<EcaGeometry>,
    map_count: usize,
    map_shape: Vec<usize>,
    cross: CrossAttentionContext,
    ray: RaySelfAttentionContext,
    fusion: FusionContext,
    fused: Tensor,
}

impl EcaContext {
    pub fn geometry(&self) -> &EcaGeometry {
        &self.geometry
    }

    pub fn cross(&self) -> &CrossAttentionContext {
        &self.cross
    }

    pub fn ray(&self) -> &RaySelfAttentionContext {
        &self.ray
    }

    pub fn fusion(&self) -> &FusionContext {
        &self.fusion
    }
}

#[derive(Debug, Clone)]
pub struct EcaGradients {
    pub params: EcaParamGrads,
    /// One per input map.
    pub maps: Vec<Tensor>,
}

pub fn eca_forward_with(
    geometry: &Arc<EcaGeometry>,
    maps: &[Tensor],
    params: &EcaBlockParams,
) -> Result<(Tensor, EcaContext)> {
    let g = geometry.as_ref();
    let volume = g.injected_volume(maps, params)?;
    let (x1, cross) = near_views_cross_attention(&volume, &g.valid, &params.cross)?;
    let (x2, ray) = ray_self_attention(&x1, &params.ray)?;
    let (fused, fusion) = fuse_ray_to_pixel(&x2, &params.fusion)?;
    let delta = params.output.forward(&fused)?;
    let target = &maps[g.target()];
    let mut out = target.clone();
    for (o, &d) in out.data_mut().iter_mut().zip(delta.data()) {
        // Adding +0.0 would turn a stored -0.0 into +0.0.
        if d != 0.0 {
            *o += d;
        }
    }
    Ok((
        out,
        EcaContext {
            geometry: Arc::clone(geometry),
            map_count: maps.len(),
            map_shape: target.shape().to_vec(),
            cross,
            ray,
            fusion,
            fused,
        },
    ))
}

/// Output for `target` given all `N` maps `[H, W, C]` of `layout`.
pub fn eca_forward(
    maps: &[Tensor],
    layout: &ViewLayout,
    target: usize,
    cfg: &EcaConfig,
    params: &EcaBlockParams,
) -> Result<Tensor> {
    if maps.len() != layout.len() {
        return Err(Error::InvalidArgument(format!(
            "{} feature maps for a {}-view layout",
            maps.len(),
            layout.len()
        )));
    }
    let (h, w) = match maps.first().map(Tensor::shape) {
        Some(&[h, w, _]) => (h, w),
        _ => return Err(Error::InvalidArgument("feature maps must be [H, W, C]".into())),
    };
    let geometry = Arc::new(EcaGeometry::new(layout, target, h, w, cfg)?);
    Ok(eca_forward_with(&geometry, maps, params)?.0)
}

/// Accumulates parameter gradients into `grads` and input-map gradients into
/// `map_grads`.
pub fn eca_backward_into(
    ctx: &EcaContext,
    params: &EcaBlockParams,
    grad_out: &Tensor,
    grads: &mut EcaParamGrads,
    map_grads: &mut [Tensor],
) -> Result<()> {
    if grad_out.shape() != ctx.map_shape.as_slice() {
        return Err(Error::shape("eca_backward", grad_out.shape(), &ctx.map_shape));
    }
    if map_grads.len() != ctx.map_count {
        return Err(Error::InvalidArgument(format!(
            "{} map gradients for {} maps",
            map_grads.len(),
            ctx.map_count
        )));
    }
    let g = ctx.geometry.as_ref();
    map_grads[g.target()].add_assign(grad_out)?;
    let (pixels, c) = (g.plan.pixels(), g.cfg.channels);
    let grad_delta = grad_out.clone().reshape(&[pixels, c])?;
    let grad_fused = params.output.backward(&ctx.fused, &grad_delta, &mut grads.output)?;
    let grad_x2 = fuse_ray_to_pixel_backward(&params.fusion, &ctx.fusion, &grad_fused, &mut grads.fusion)?;
    let grad_x1 = ray_self_attention_backward(&params.ray, &ctx.ray, &grad_x2, &mut grads.ray)?;
    let grad_volume = near_views_cross_attention_backward(&params.cross, &ctx.cross, &grad_x1, &mut grads.cross)?;
    let rows = grad_volume.rows();
    let flat = grad_volume.reshape(&[rows, c])?;
    params.ray_proj.backward_params(&g.ray_codes, &flat, &mut grads.ray_proj)?;
    if g.cfg.depth_encoding {
        let target_rows = Tensor::new(vec![pixels * g.cfg.s, c], flat.data()[..pixels * g.cfg.s * c].to_vec())?;
        params.depth_proj.backward_params(&g.depth_codes, &target_rows, &mut grads.depth_proj)?;
    }
    g.plan.scatter(&flat, map_grads)
}

pub fn eca_backward(ctx: &EcaContext, params: &EcaBlockParams, grad_out: &Tensor) -> Result<EcaGradients> {
    let mut grads = params.zeros_like();
    let mut maps = vec![Tensor::zeros(&ctx.map_shape); ctx.map_count];
    eca_backward_into(ctx, params, grad_out, &mut grads, &mut maps)?;
    Ok(EcaGradients { params: grads, maps })
}

#[cfg(test)]
mod tests {
    use super::super::init_params;
    use super::super::reference as oracle;
    use super::*;
    use crate::camera::CameraIntrinsics;
    use crate::tensor::{finite_diff_check, DeterministicRng, LinearParams, DEFAULT_FD_STEP};

    fn four_views() -> ViewLayout {
        ViewLayout::eval_ring(CameraIntrinsics::square(64).unwrap())
            .unwrap()
            .select(&[0, 1, 2, 3])
            .unwrap()
    }

    fn maps(n: usize, h: usize, w: usize, c: usize, rng: &mut DeterministicRng) -> Vec<Tensor> {
        (0..n).map(|_| Tensor::randn(&[h, w, c], rng)).collect()
    }

    /// Fresh params with the zero output projection replaced so every stage
    /// reaches the output.
    fn live_params(cfg: &EcaConfig, rng: &mut DeterministicRng) -> EcaBlockParams {
        let mut p = init_params(rng, cfg).unwrap();
        p.output = LinearParams::glorot(cfg.channels, cfg.channels, rng);
        p.fusion.bias = Tensor::new(vec![1], vec![0.1]).unwrap();
        for (_, b) in p.named_tensors_mut() {
            if b.ndim() == 1 {
                let n = b.len();
                *b = Tensor::uniform(&[n], 0.2, rng);
            }
        }
        p
    }

    #[test]
    fn identity_at_init_is_bit_exact() {
        let layout = four_views();
        let cfg = EcaConfig::new(4, 8, 4);
        let mut rng = DeterministicRng::new(0);
        let params = init_params(&mut rng, &cfg).unwrap();
        let mut m = maps(4, 4, 4, 4, &mut rng);
        m[2].data_mut()[3] = -0.0;
        for target in 0..4 {
            let out = eca_forward(&m, &layout, target, &cfg, &params).unwrap();
            assert!(out.bit_eq(&m[target]));
        }
    }

    #[test]
    fn single_view_with_zero_params_is_identity() {
        let layout = four_views();
        let cfg = EcaConfig::new(1, 4, 3);
        let mut rng = DeterministicRng::new(1);
        let m = maps(4, 3, 3, 3, &mut rng);
        let out = eca_forward(&m, &layout, 1, &cfg, &EcaBlockParams::zeros(&cfg)).unwrap();
        assert!(out.bit_eq(&m[1]));
    }

    #[test]
    fn pipeline_matches_staged_oracles() {
        let layout = four_views();
        let cfg = EcaConfig::new(4, 6, 8);
        let mut rng = DeterministicRng::new(2);
        let params = live_params(&cfg, &mut rng);
        let m = maps(4, 8, 8, 8, &mut rng);
        let target = 1;
        let out = eca_forward(&m, &layout, target, &cfg, &params).unwrap();

        let plan = plan_samples(&layout, target, 8, 8, 4, 6, cfg.near, cfg.far).unwrap();
        let gathered = plan.gather(&m).unwrap();
        let plucker = volume_plucker(&layout, &plan).unwrap();
        let (k, p, s, c) = (4, 64, 6, 8);
        let mut vol = vec![vec![vec![vec![0.0; c]; s]; p]; k];
        let mut valid = vec![vec![vec![false; s]; p]; k];
        for kk in 0..k {
            for pp in 0..p {
                for ss in 0..s {
                    let e = plan.entry(kk, pp, ss);
                    let code = harmonic_encode(plucker.row(e), &cfg.harmonic);
                    let mut x = oracle::linear(&params.ray_proj, &code);
                    if kk == 0 {
                        let u = (plan.depths[ss] - cfg.near) / (cfg.far - cfg.near);
                        let d = oracle::linear(&params.depth_proj, &harmonic_encode(&[u], &cfg.harmonic));
                        for i in 0..c {
                            x[i] += d[i];
                        }
                    }
                    for i in 0..c {
                        x[i] += gathered.data()[e * c + i];
                    }
                    vol[kk][pp][ss] = x;
                    valid[kk][pp][ss] = plan.taps[e].is_some();
                }
            }
        }
        let x1 = oracle::cross(&params.cross, &vol, &valid);
        let x2 = oracle::ray(&params.ray, &x1);
        let fused = oracle::fuse(&params.fusion, &x2);
        let mut err: f64 = 0.0;
        for pp in 0..p {
            let d = oracle::linear(&params.output, &fused[pp]);
            for i in 0..c {
                err = err.max((out.data()[pp * c + i] - m[target].data()[pp * c + i] - d[i]).abs());
            }
        }
        assert!(err < 1e-10, "{err}");
    }

    fn fd_setup() -> (ViewLayout, EcaConfig, EcaBlockParams, Vec<Tensor>, Tensor) {
        let layout = four_views();
        let cfg = EcaConfig::new(4, 4, 4);
        let mut rng = DeterministicRng::new(3);
        let params = live_params(&cfg, &mut rng);
        let m = maps(4, 4, 4, 4, &mut rng);
        let probe = Tensor::randn(&[4, 4, 4], &mut rng);
        (layout, cfg, params, m, probe)
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let (layout, cfg, params, m, probe) = fd_setup();
        let geometry = Arc::new(EcaGeometry::new(&layout, 2, 4, 4, &cfg).unwrap());
        let (_, ctx) = eca_forward_with(&geometry, &m, &params).unwrap();
        let grads = eca_backward(&ctx, &params, &probe).unwrap();
        let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
        for (i, name) in names.iter().enumerate() {
            let x = params.named_tensors()[i].1.clone();
            let loss = |v: &Tensor| {
                let mut p = params.clone();
                *p.named_tensors_mut()[i].1 = v.clone();
                eca_forward_with(&geometry, &m, &p).unwrap().0.dot(&probe).unwrap()
            };
            let err = finite_diff_check(loss, &x, grads.params.named_tensors()[i].1, DEFAULT_FD_STEP).unwrap();
            assert!(err < 1e-4, "{name}: {err}");
        }
    }

    #[test]
    fn map_gradients_match_finite_differences() {
        let (layout, cfg, params, m, probe) = fd_setup();
        let geometry = Arc::new(EcaGeometry::new(&layout, 0, 4, 4, &cfg).unwrap());
        let (_, ctx) = eca_forward_with(&geometry, &m, &params).unwrap();
        let grads = eca_backward(&ctx, &params, &probe).unwrap();
        for v in 0..4 {
            let loss = |x: &Tensor| {
                let mut mm = m.clone();
                mm[v] = x.clone();
                eca_forward_with(&geometry, &mm, &params).unwrap().0.dot(&probe).unwrap()
            };
            let err = finite_diff_check(loss, &m[v], &grads.maps[v], DEFAULT_FD_STEP).unwrap();
            assert!(err < 1e-4, "view {v}: {err}");
        }
        assert!(grads.maps[1].max_abs() > 0.0);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let (layout, cfg, params, m, _) = fd_setup();
        let geometry = Arc::new(EcaGeometry::new(&layout, 0, 4, 4, &cfg).unwrap());
        let (_, ctx) = eca_forward_with(&geometry, &m, &params).unwrap();
        let grads = eca_backward(&ctx, &params, &Tensor::zeros(&[4, 4, 4])).unwrap();
        assert_eq!(grads.params.max_abs(), 0.0);
        assert!(grads.maps.iter().all(|g| g.max_abs() == 0.0));
    }

    #[test]
    fn outputs_and_gradients_are_deterministic() {
        let (layout, cfg, params, m, probe) = fd_setup();
        let run = || {
            let geometry = Arc::new(EcaGeometry::new(&layout, 3, 4, 4, &cfg).unwrap());
            let (out, ctx) = eca_forward_with(&geometry, &m, &params).unwrap();
            (out, eca_backward(&ctx, &params, &probe).unwrap())
        };
        let (a, ga) = run();
        let (b, gb) = run();
        assert!(a.bit_eq(&b));
        assert!(ga.params.bit_eq(&gb.params));
        assert!(ga.maps.iter().zip(&gb.maps).all(|(x, y)| x.bit_eq(y)));
    }

    #[test]
    fn pixels_are_local_to_their_epipolar_samples() {
        let layout = four_views();
        let cfg = EcaConfig::new(4, 4, 4);
        let mut rng = DeterministicRng::new(4);
        let params = live_params(&cfg, &mut rng);
        let m = maps(4, 6, 6, 4, &mut rng);
        let geometry = Arc::new(EcaGeometry::new(&layout, 0, 6, 6, &cfg).unwrap());
        let (base, _) = eca_forward_with(&geometry, &m, &params).unwrap();
        let plan = &geometry.plan;
        let reference = plan.view_indices[1];
        let cell = 14;
        let mut touched = vec![false; plan.pixels()];
        for k in 0..plan.k() {
            if plan.view_indices[k] != reference {
                continue;
            }
            for (p, flag) in touched.iter_mut().enumerate() {
                for s in 0..plan.s() {
                    if let Some(t) = &plan.taps[plan.entry(k, p, s)] {
                        *flag |= t.index.contains(&cell);
                    }
                }
            }
        }
        assert!(touched.iter().any(|&t| t) && touched.iter().any(|&t| !t));
        let mut mm = m.clone();
        for v in mm[reference].row_mut(cell) {
            *v += 1.0;
        }
        let (moved, _) = eca_forward_with(&geometry, &mm, &params).unwrap();
        for (p, &t) in touched.iter().enumerate() {
            let same = base.row(p).iter().zip(moved.row(p)).all(|(a, b)| a.to_bits() == b.to_bits());
            assert_eq!(same, !t, "pixel {p}");
        }
    }
}
