//! The discrete PDE step and the recurrent sliding-window rollout.
//!
//! One step maps the last `K` frames to
//! `c' = c_k + dt * (-u · ∇c_mid + inv_pe ∇²c_mid)` evaluated at inferred
//! mid-interval fields, then refines `c'` with the correction network.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::field::ScalarField;
use crate::grid::{BoundaryMask, GridSpec, SpatialEmbedding};
use crate::nn::{bind_frozen, embedding_tensor, field_tensor, LatentState, LatentVars, Model};
use crate::scalar::Scalar;

/// Variants of the one-step update used by the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorFlags {
    /// Evaluate the stencils on `c_k` instead of the inferred `c_mid`.
    pub replace_mid: bool,
    /// Use `c' = c_k + u_x + u_y` in place of the transport operator.
    pub changed_operator: bool,
    /// Skip the correction network: `ĉ = c'`.
    pub no_correction: bool,
    /// Disable the near-boundary masks inside the update.
    pub unmasked: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutConfig {
    pub window: usize,
    pub steps: usize,
    pub flags: PredictorFlags,
}

/// Fixed stencil kernels and keep-weights recorded as constants on one graph.
#[derive(Debug, Clone, Copy)]
pub struct TapeStencils {
    grad_x: Var,
    grad_y: Var,
    laplacian: Var,
    /// `[1, H, W]` weights, 0 on cells excluded by the first-order mask.
    pub keep1: Var,
    /// Same for the second-order mask.
    pub keep2: Var,
}

impl TapeStencils {
    pub fn new<T: Scalar>(
        g: &Graph<T>,
        dx: f64,
        mask1: &BoundaryMask,
        mask2: &BoundaryMask,
    ) -> Result<Self> {
        if mask1.dims() != mask2.dims() {
            return Err(Error::shape(
                "stencils",
                format!("{:?} vs {:?}", mask1.dims(), mask2.dims()),
            ));
        }
        let (h, w) = mask1.dims();
        let half = 0.5 / dx;
        let inv2 = 1.0 / (dx * dx);
        let kernel = |k: [f64; 9]| {
            g.constant(
                Tensor::from_vec(&[1, 1, 3, 3], k.iter().map(|&v| T::lit(v)).collect())
                    .expect("3x3"),
            )
        };
        let keep = |m: &BoundaryMask| {
            g.constant(Tensor::from_vec(&[1, h, w], m.keep_weights()).expect("mask size"))
        };
        Ok(Self {
            grad_x: kernel([0.0, 0.0, 0.0, -half, 0.0, half, 0.0, 0.0, 0.0]),
            grad_y: kernel([0.0, -half, 0.0, 0.0, 0.0, 0.0, 0.0, half, 0.0]),
            laplacian: kernel([0.0, inv2, 0.0, inv2, -4.0 * inv2, inv2, 0.0, inv2, 0.0]),
            keep1: keep(mask1),
            keep2: keep(mask2),
        })
    }

    /// Central-difference `∂/∂x` of a one-channel field.
    pub fn dx<T: Scalar>(&self, g: &Graph<T>, f: Var) -> Result<Var> {
        g.conv2d(f, self.grad_x, None, 1)
    }

    pub fn dy<T: Scalar>(&self, g: &Graph<T>, f: Var) -> Result<Var> {
        g.conv2d(f, self.grad_y, None, 1)
    }

    pub fn laplacian<T: Scalar>(&self, g: &Graph<T>, f: Var) -> Result<Var> {
        g.conv2d(f, self.laplacian, None, 1)
    }
}

/// Masks used by the update, or none when masking is switched off.
pub fn update_masks<T: Scalar>(
    psi: &SpatialEmbedding<T>,
    flags: &PredictorFlags,
) -> (BoundaryMask, BoundaryMask) {
    if flags.unmasked {
        let (h, w) = psi.dims();
        (BoundaryMask::none(h, w), BoundaryMask::none(h, w))
    } else {
        (psi.mask1(), psi.mask2())
    }
}

/// The transport update on the tape. `inv_pe` is a one-element variable.
pub fn pde_step<T: Scalar>(
    g: &Graph<T>,
    st: &TapeStencils,
    c_k: Var,
    latent: &LatentVars,
    inv_pe: Var,
    dt: f64,
    flags: &PredictorFlags,
) -> Result<Var> {
    let ux = g.slice_channels(latent.velocity, 0, 1)?;
    let uy = g.slice_channels(latent.velocity, 1, 1)?;
    if flags.changed_operator {
        return g.add(g.add(c_k, ux)?, uy);
    }
    let c = if flags.replace_mid { c_k } else { latent.c_mid };
    let advection = g.add(g.mul(ux, st.dx(g, c)?)?, g.mul(uy, st.dy(g, c)?)?)?;
    let advection = g.mul(advection, st.keep1)?;
    let diffusion = g.mul_scalar(st.laplacian(g, c)?, inv_pe)?;
    // Cells near walls hold their value: the whole update is cut on the
    // wider mask, which contains the first-order one.
    let rate = g.mul(g.sub(diffusion, advection)?, st.keep2)?;
    g.add(c_k, g.scale(rate, T::lit(dt)))
}

/// Off-tape update with a fixed `inv_pe` and explicit masks.
pub fn discrete_pde_step<T: Scalar>(
    c_k: &ScalarField<T>,
    latent: &LatentState<T>,
    inv_pe: f64,
    grid: &GridSpec,
    mask1: &BoundaryMask,
    mask2: &BoundaryMask,
    flags: &PredictorFlags,
) -> Result<ScalarField<T>> {
    if inv_pe < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "inv_pe must be nonnegative, got {inv_pe}"
        )));
    }
    for dims in [
        latent.c_mid.dims(),
        latent.velocity.dims(),
        latent.pressure.dims(),
        mask1.dims(),
    ] {
        if dims != c_k.dims() {
            return Err(Error::shape(
                "discrete_pde_step",
                format!("{dims:?} vs {:?}", c_k.dims()),
            ));
        }
    }
    let g = Graph::new();
    let st = TapeStencils::new(&g, grid.dx, mask1, mask2)?;
    let (h, w) = c_k.dims();
    let mut u = latent.velocity.x.values().to_vec();
    u.extend_from_slice(latent.velocity.y.values());
    let vars = LatentVars {
        c_mid: g.constant(field_tensor(&latent.c_mid)),
        velocity: g.constant(Tensor::from_vec(&[2, h, w], u)?),
        pressure: g.constant(field_tensor(&latent.pressure)),
    };
    let c = g.constant(field_tensor(c_k));
    let inv_pe = g.constant(Tensor::scalar(T::lit(inv_pe)));
    let out = pde_step(&g, &st, c, &vars, inv_pe, grid.dt, flags)?;
    ScalarField::from_vec(h, w, g.value(out).into_data())
}

/// Per-step variables of a rollout recorded on one graph.
#[derive(Debug, Clone, Default)]
pub struct RolloutTrace {
    /// Frame the step advanced from.
    pub previous: Vec<Var>,
    pub c_prime: Vec<Var>,
    pub c_hat: Vec<Var>,
    pub latents: Vec<LatentVars>,
}

/// Recurrent rollout on the tape: each prediction enters the window used by
/// the next step, so gradients flow through the whole horizon.
#[allow(clippy::too_many_arguments)]
pub fn rollout_tape<T: Scalar>(
    model: &Model,
    g: &Graph<T>,
    b: &Bindings,
    st: &TapeStencils,
    mut window: Vec<Var>,
    psi: Var,
    steps: usize,
    dt: f64,
    flags: &PredictorFlags,
) -> Result<RolloutTrace> {
    let inv_pe = model.inv_pe(g, b)?;
    let mut trace = RolloutTrace::default();
    for _ in 0..steps {
        let c_k = *window
            .last()
            .ok_or_else(|| Error::shape("rollout", "empty window"))?;
        let latent = model.infer(g, b, &window, psi)?;
        let c_prime = pde_step(g, st, c_k, &latent, inv_pe, dt, flags)?;
        let c_hat = if flags.no_correction {
            c_prime
        } else {
            model.correct(g, b, c_prime, c_k)?
        };
        window.remove(0);
        window.push(c_hat);
        trace.previous.push(c_k);
        trace.c_prime.push(c_prime);
        trace.c_hat.push(c_hat);
        trace.latents.push(latent);
    }
    Ok(trace)
}

/// Frames and latents produced by an off-tape rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout<T> {
    /// Uncorrected predictions `c'`.
    pub uncorrected: Vec<ScalarField<T>>,
    /// Final predictions `ĉ`.
    pub frames: Vec<ScalarField<T>>,
    pub latents: Vec<LatentState<T>>,
}

/// Off-tape rollout with a frozen parameter set. Each step runs on its own
/// graph, so a rollout restarted from its own outputs reproduces the same
/// frames bit for bit.
pub fn rollout<T: Scalar>(
    model: &Model,
    params: &ParamStore<T>,
    initial_window: &[ScalarField<T>],
    psi: &SpatialEmbedding<T>,
    grid: &GridSpec,
    cfg: &RolloutConfig,
) -> Result<Rollout<T>> {
    if initial_window.len() != cfg.window || cfg.window != model.window() {
        return Err(Error::shape(
            "rollout",
            format!(
                "window of {} frames for a model taking {}",
                initial_window.len(),
                model.window()
            ),
        ));
    }
    let (h, w) = psi.dims();
    model.check_dims(h, w)?;
    let (mask1, mask2) = update_masks(psi, &cfg.flags);
    let psi_tensor = embedding_tensor(psi);
    let mut window: Vec<ScalarField<T>> = initial_window.to_vec();
    let mut out = Rollout {
        uncorrected: Vec::with_capacity(cfg.steps),
        frames: Vec::with_capacity(cfg.steps),
        latents: Vec::with_capacity(cfg.steps),
    };
    for _ in 0..cfg.steps {
        let g = Graph::new();
        let b = bind_frozen(params, &g);
        let st = TapeStencils::new(&g, grid.dx, &mask1, &mask2)?;
        let vars = window
            .iter()
            .map(|f| {
                if f.dims() != (h, w) {
                    return Err(Error::shape(
                        "rollout",
                        format!("frame {:?} vs grid {:?}", f.dims(), (h, w)),
                    ));
                }
                Ok(g.constant(field_tensor(f)))
            })
            .collect::<Result<Vec<_>>>()?;
        let psi_var = g.constant(psi_tensor.clone());
        let trace = rollout_tape(model, &g, &b, &st, vars, psi_var, 1, grid.dt, &cfg.flags)?;
        let c_prime = ScalarField::from_vec(h, w, g.value(trace.c_prime[0]).into_data())?;
        let c_hat = ScalarField::from_vec(h, w, g.value(trace.c_hat[0]).into_data())?;
        out.latents
            .push(LatentState::from_vars(&g, &trace.latents[0])?);
        out.uncorrected.push(c_prime);
        window.remove(0);
        window.push(c_hat.clone());
        out.frames.push(c_hat);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::VectorField2;
    use crate::grid::{spatial_embedding, ObstacleMap};
    use crate::nn::ModelConfig;
    use crate::stencil::{self, StencilConfig};
    use proptest::prelude::*;

    fn grid(n: usize, dt: f64) -> GridSpec {
        GridSpec::new(n, n, 1.0, dt).unwrap()
    }

    fn latent(c_mid: ScalarField<f64>, ux: f64, uy: f64) -> LatentState<f64> {
        let (h, w) = c_mid.dims();
        LatentState {
            c_mid,
            velocity: VectorField2::uniform(h, w, ux, uy),
            pressure: ScalarField::zeros(h, w),
        }
    }

    fn bump(n: usize) -> ScalarField<f64> {
        ScalarField::from_fn(n, n, |i, j| {
            (0.3 * i as f64).sin() * (0.2 * j as f64).cos() + 0.1 * i as f64
        })
    }

    #[test]
    fn tape_stencils_match_stencil_module() {
        let f = bump(12);
        let cfg = StencilConfig::new(0.5).unwrap();
        let g = Graph::<f64>::new();
        let m = BoundaryMask::none(12, 12);
        let st = TapeStencils::new(&g, 0.5, &m, &m).unwrap();
        let v = g.constant(field_tensor(&f));
        let grad = stencil::gradient(&f, &cfg);
        assert_eq!(g.value(st.dx(&g, v).unwrap()).data(), grad.x.values());
        assert_eq!(g.value(st.dy(&g, v).unwrap()).data(), grad.y.values());
        let lap = stencil::laplacian(&f, &cfg);
        for (a, b) in g
            .value(st.laplacian(&g, v).unwrap())
            .data()
            .iter()
            .zip(lap.values())
        {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn zero_velocity_zero_diffusion_is_identity() {
        let n = 12;
        let gr = grid(n, 0.1);
        let psi = spatial_embedding::<f64>(&ObstacleMap::empty(n, n), &gr).unwrap();
        let c = bump(n);
        let out = discrete_pde_step(
            &c,
            &latent(bump(n).map(|v| v * 3.0), 0.0, 0.0),
            0.0,
            &gr,
            &psi.mask1(),
            &psi.mask2(),
            &PredictorFlags::default(),
        )
        .unwrap();
        assert_eq!(out, c);
    }

    #[test]
    fn linear_profile_advects_by_dt() {
        let n = 16;
        let gr = grid(n, 0.1);
        let psi = spatial_embedding::<f64>(&ObstacleMap::empty(n, n), &gr).unwrap();
        let (m1, m2) = (psi.mask1(), psi.mask2());
        let c = bump(n);
        let mid = ScalarField::from_fn(n, n, |_, j| j as f64);
        let out = discrete_pde_step(
            &c,
            &latent(mid, 1.0, 0.0),
            0.0,
            &gr,
            &m1,
            &m2,
            &PredictorFlags::default(),
        )
        .unwrap();
        for i in 0..n {
            for j in 0..n {
                let expected = if m2.is_excluded(i, j) {
                    c.get(i, j)
                } else {
                    c.get(i, j) - 0.1
                };
                assert!((out.get(i, j) - expected).abs() < 1e-12, "({i},{j})");
            }
        }
    }

    #[test]
    fn changed_operator_adds_velocity() {
        let n = 8;
        let gr = grid(n, 0.1);
        let m = BoundaryMask::none(n, n);
        let c = bump(n);
        let flags = PredictorFlags {
            changed_operator: true,
            ..Default::default()
        };
        let out =
            discrete_pde_step(&c, &latent(bump(n), 0.25, 0.5), 0.3, &gr, &m, &m, &flags).unwrap();
        for (o, v) in out.values().iter().zip(c.values()) {
            assert!((o - v - 0.75).abs() < 1e-15);
        }
    }

    fn toy_model() -> Model {
        Model::new(ModelConfig {
            window: 3,
            inference_widths: vec![3, 4],
            correction_widths: vec![2, 3],
            spatiotemporal: false,
        })
        .unwrap()
    }

    fn toy_inputs(n: usize) -> (GridSpec, SpatialEmbedding<f64>, Vec<ScalarField<f64>>) {
        let gr = grid(n, 0.5);
        let mut obstacles = ObstacleMap::empty(n, n);
        obstacles.add_disk(5.0, 9.0, 1.5);
        let psi = spatial_embedding(&obstacles, &gr).unwrap();
        let frames = (0..3)
            .map(|t| bump(n).map(|v| v + 0.05 * t as f64))
            .collect();
        (gr, psi, frames)
    }

    #[test]
    fn rollout_composes_single_steps() {
        let model = toy_model();
        let mut params: ParamStore<f64> = model.init_params(4);
        // Give the correction a nonzero effect.
        params.get_mut("cor.head.w").unwrap().value = Tensor::filled(&[1, 2, 1, 1], 0.1);
        let (gr, psi, frames) = toy_inputs(16);
        let cfg = RolloutConfig {
            window: 3,
            steps: 5,
            flags: PredictorFlags::default(),
        };
        let full = rollout(&model, &params, &frames, &psi, &gr, &cfg).unwrap();
        assert_eq!(full.frames.len(), 5);

        let empty = rollout(
            &model,
            &params,
            &frames,
            &psi,
            &gr,
            &RolloutConfig { steps: 0, ..cfg },
        )
        .unwrap();
        assert!(empty.frames.is_empty() && empty.latents.is_empty());

        // One step equals composing the three operations by hand.
        let lat = model.infer_latent(&params, &frames, &psi).unwrap();
        let inv_pe = params.value(crate::nn::THETA_PE).unwrap().item().exp();
        let c_prime = discrete_pde_step(
            &frames[2],
            &lat,
            inv_pe,
            &gr,
            &psi.mask1(),
            &psi.mask2(),
            &cfg.flags,
        )
        .unwrap();
        let c_hat = model.correct_field(&params, &c_prime, &frames[2]).unwrap();
        assert_eq!(full.latents[0], lat);
        assert_eq!(full.uncorrected[0], c_prime);
        assert_eq!(full.frames[0], c_hat);

        // Restarting from the rollout's own outputs is bit exact.
        let first = rollout(
            &model,
            &params,
            &frames,
            &psi,
            &gr,
            &RolloutConfig { steps: 2, ..cfg },
        )
        .unwrap();
        let restart_window = vec![
            frames[2].clone(),
            first.frames[0].clone(),
            first.frames[1].clone(),
        ];
        let rest = rollout(
            &model,
            &params,
            &restart_window,
            &psi,
            &gr,
            &RolloutConfig { steps: 3, ..cfg },
        )
        .unwrap();
        assert_eq!(&full.frames[..2], &first.frames[..]);
        assert_eq!(&full.frames[2..], &rest.frames[..]);
    }

    #[test]
    fn masked_points_hold_previous_value() {
        let model = toy_model();
        let params: ParamStore<f64> = model.init_params(9);
        let (gr, psi, frames) = toy_inputs(16);
        let cfg = RolloutConfig {
            window: 3,
            steps: 1,
            flags: PredictorFlags::default(),
        };
        let out = rollout(&model, &params, &frames, &psi, &gr, &cfg).unwrap();
        let m2 = psi.mask2();
        for i in 0..16 {
            for j in 0..16 {
                if m2.is_excluded(i, j) {
                    assert_eq!(out.uncorrected[0].get(i, j), frames[2].get(i, j));
                }
            }
        }
    }

    #[test]
    fn rejects_wrong_window() {
        let model = toy_model();
        let params: ParamStore<f64> = model.init_params(1);
        let (gr, psi, frames) = toy_inputs(16);
        let cfg = RolloutConfig {
            window: 3,
            steps: 1,
            flags: PredictorFlags::default(),
        };
        assert!(rollout(&model, &params, &frames[..2], &psi, &gr, &cfg).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn constant_field_is_fixed_point(
            level in -3.0f64..3.0,
            ux in -1.0f64..1.0,
            uy in -1.0f64..1.0,
            inv_pe in 0.0f64..0.5,
        ) {
            let n = 12;
            let gr = grid(n, 0.2);
            let m = BoundaryMask::none(n, n);
            let c = ScalarField::filled(n, n, level);
            let out = discrete_pde_step(&c, &latent(c.clone(), ux, uy), inv_pe, &gr, &m, &m, &PredictorFlags::default()).unwrap();
            prop_assert_eq!(out, c);
        }

        #[test]
        fn update_vanishes_on_mask2(seed in 0u64..1000, inv_pe in 0.0f64..0.3) {
            let n = 16;
            let gr = grid(n, 0.2);
            let mut obstacles = ObstacleMap::empty(n, n);
            obstacles.add_disk(4.0 + (seed % 7) as f64, 5.0 + (seed % 5) as f64, 1.5);
            let psi = spatial_embedding::<f64>(&obstacles, &gr).unwrap();
            let (m1, m2) = (psi.mask1(), psi.mask2());
            let c = ScalarField::from_fn(n, n, |i, j| ((i * 31 + j * 17 + seed as usize) % 13) as f64 * 0.1);
            let mid = c.map(|v| v * 1.3 + 0.2);
            let out = discrete_pde_step(&c, &latent(mid, 0.7, -0.4), inv_pe, &gr, &m1, &m2, &PredictorFlags::default()).unwrap();
            for i in 0..n {
                for j in 0..n {
                    if m2.is_excluded(i, j) {
                        prop_assert_eq!(out.get(i, j), c.get(i, j));
                    }
                }
            }
        }
    }
}
