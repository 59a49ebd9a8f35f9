//! Training objective: data fit, physics residuals and the temporal hinge.
//!
//! Every term is a tape expression so it can be differentiated through the
//! rollout. Cell means run over cells kept by a loss mask; excluded cells
//! carry zero weight and therefore zero gradient.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::field::{ScalarField, VectorField2};
use crate::grid::{BoundaryMask, GridSpec};
use crate::nn::{field_tensor, LatentVars};
use crate::predictor::{RolloutTrace, TapeStencils};
use crate::scalar::Scalar;

/// Default distance threshold of the loss mask: only solid cells are excluded.
pub const LOSS_MASK_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub data: f64,
    pub physical: f64,
    pub temporal: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            data: 1.0,
            physical: 1.0,
            temporal: 1.0,
        }
    }
}

impl LossWeights {
    /// Reduced physics weight used for radar-style data.
    pub fn radar() -> Self {
        Self {
            physical: 0.1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("data", self.data),
            ("physical", self.physical),
            ("temporal", self.temporal),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!(
                    "loss weight {name} must be a nonnegative number, got {w}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossFlags {
    pub no_physical: bool,
    pub no_temporal: bool,
    /// Keep only the divergence residual in the physics term.
    pub no_momentum: bool,
    /// Momentum residual with the bracketed term added instead of subtracted.
    pub literal_sign: bool,
}

/// Scalar values of one evaluation of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub data: f64,
    pub physical: f64,
    pub temporal: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.data.is_finite()
            && self.physical.is_finite()
            && self.temporal.is_finite()
            && self.total.is_finite()
    }

    /// Name of the first non-finite component.
    pub fn non_finite_component(&self) -> Option<&'static str> {
        [
            ("data", self.data),
            ("physical", self.physical),
            ("temporal", self.temporal),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            data: self.data * s,
            physical: self.physical * s,
            temporal: self.temporal * s,
            total: self.total * s,
        }
    }

    pub fn add(&self, o: &Self) -> Self {
        Self {
            data: self.data + o.data,
            physical: self.physical + o.physical,
            temporal: self.temporal + o.temporal,
            total: self.total + o.total,
        }
    }
}

/// Cells entering the loss means, recorded on one graph.
#[derive(Debug, Clone, Copy)]
pub struct LossMask {
    /// `[1, H, W]` weights, 1 on kept cells.
    pub keep: Var,
    pub kept: usize,
}

impl LossMask {
    pub fn new<T: Scalar>(g: &Graph<T>, exclude: &BoundaryMask) -> Result<Self> {
        let (h, w) = exclude.dims();
        let kept = h * w - exclude.excluded_count();
        if kept == 0 {
            return Err(Error::InvalidArgument(
                "loss mask excludes every cell".into(),
            ));
        }
        Ok(Self {
            keep: g.constant(Tensor::from_vec(&[1, h, w], exclude.keep_weights())?),
            kept,
        })
    }

    /// Sum of `x * keep` over all channels, divided by the kept cell count.
    pub fn mean<T: Scalar>(&self, g: &Graph<T>, x: Var) -> Result<Var> {
        let channels = g.shape(x)[0];
        let weighted = if channels == 1 {
            g.mul(x, self.keep)?
        } else {
            let keep = g.concat_channels(&vec![self.keep; channels])?;
            g.mul(x, keep)?
        };
        Ok(g.scale(g.sum(weighted), T::lit(1.0 / self.kept as f64)))
    }
}

/// Mean over kept cells of `(c' - c)² + (ĉ - c)²`.
pub fn data_loss<T: Scalar>(
    g: &Graph<T>,
    mask: &LossMask,
    c_prime: Var,
    c_hat: Var,
    c_true: Var,
) -> Result<Var> {
    let before = g.square(g.sub(c_prime, c_true)?);
    let after = g.square(g.sub(c_hat, c_true)?);
    mask.mean(g, g.add(before, after)?)
}

/// `Δu - dt (-(u·∇)u - ∇p + inv_re ∇²u)` as a `[2, H, W]` variable, with the
/// first-order pieces cut on Mask1 and the viscous piece on Mask2.
#[allow(clippy::too_many_arguments)]
pub fn momentum_residual<T: Scalar>(
    g: &Graph<T>,
    st: &TapeStencils,
    u_k: Var,
    u_next: Var,
    p_k: Var,
    inv_re: Var,
    dt: f64,
    literal_sign: bool,
) -> Result<Var> {
    let ux = g.slice_channels(u_k, 0, 1)?;
    let uy = g.slice_channels(u_k, 1, 1)?;
    let grad_p = [st.dx(g, p_k)?, st.dy(g, p_k)?];
    let mut parts = Vec::with_capacity(2);
    for (axis, comp) in [ux, uy].into_iter().enumerate() {
        let advection = g.add(g.mul(ux, st.dx(g, comp)?)?, g.mul(uy, st.dy(g, comp)?)?)?;
        let first_order = g.mul(g.add(advection, grad_p[axis])?, st.keep1)?;
        let viscous = g.mul(g.mul_scalar(st.laplacian(g, comp)?, inv_re)?, st.keep2)?;
        let rhs = g.sub(viscous, first_order)?;
        parts.push(g.scale(rhs, T::lit(dt)));
    }
    let rhs_dt = g.concat_channels(&parts)?;
    let delta_u = g.sub(u_next, u_k)?;
    if literal_sign {
        g.add(delta_u, rhs_dt)
    } else {
        g.sub(delta_u, rhs_dt)
    }
}

/// `dt ∇·u`, cut on Mask1.
pub fn divergence_residual<T: Scalar>(
    g: &Graph<T>,
    st: &TapeStencils,
    u: Var,
    dt: f64,
) -> Result<Var> {
    let div = g.add(
        st.dx(g, g.slice_channels(u, 0, 1)?)?,
        st.dy(g, g.slice_channels(u, 1, 1)?)?,
    )?;
    Ok(g.scale(g.mul(div, st.keep1)?, T::lit(dt)))
}

/// Mean over kept cells and steps of `|e1|² + e2²`. The momentum residual
/// needs two consecutive latents, so the first step contributes `e2` only.
#[allow(clippy::too_many_arguments)]
pub fn physical_loss<T: Scalar>(
    g: &Graph<T>,
    st: &TapeStencils,
    mask: &LossMask,
    latents: &[LatentVars],
    inv_re: Var,
    dt: f64,
    flags: &LossFlags,
) -> Result<Var> {
    if latents.is_empty() {
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    let mut terms = Vec::with_capacity(latents.len());
    for (k, latent) in latents.iter().enumerate() {
        let e2 = divergence_residual(g, st, latent.velocity, dt)?;
        let mut step = mask.mean(g, g.square(e2))?;
        if k > 0 && !flags.no_momentum {
            let prev = &latents[k - 1];
            let e1 = momentum_residual(
                g,
                st,
                prev.velocity,
                latent.velocity,
                prev.pressure,
                inv_re,
                dt,
                flags.literal_sign,
            )?;
            step = g.add(step, mask.mean(g, g.square(e1))?)?;
        }
        terms.push(step);
    }
    step_mean(g, &terms)
}

/// Mean over kept cells of `max((c_mid - c_k)² - (c_next - c_k)², 0)`.
pub fn temporal_loss<T: Scalar>(
    g: &Graph<T>,
    mask: &LossMask,
    c_mid: Var,
    c_k: Var,
    c_next: Var,
) -> Result<Var> {
    let mid = g.square(g.sub(c_mid, c_k)?);
    let span = g.square(g.sub(c_next, c_k)?);
    mask.mean(g, g.relu(g.sub(mid, span)?))
}

fn step_mean<T: Scalar>(g: &Graph<T>, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(g.scale(acc, T::lit(1.0 / terms.len() as f64)))
}

/// Per-component losses of one rollout, each averaged over steps.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub data: Var,
    pub physical: Option<Var>,
    pub temporal: Option<Var>,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown<T: Scalar>(&self, g: &Graph<T>) -> LossBreakdown {
        let get = |v: Option<Var>| v.map_or(0.0, |v| g.item(v).as_f64());
        LossBreakdown {
            data: g.item(self.data).as_f64(),
            physical: get(self.physical),
            temporal: get(self.temporal),
            total: g.item(self.total).as_f64(),
        }
    }
}

/// Weighted sum of the components.
pub fn total_loss<T: Scalar>(
    g: &Graph<T>,
    data: Var,
    physical: Option<Var>,
    temporal: Option<Var>,
    weights: &LossWeights,
) -> Result<LossVars> {
    let mut total = g.scale(data, T::lit(weights.data));
    if let Some(p) = physical {
        total = g.add(total, g.scale(p, T::lit(weights.physical)))?;
    }
    if let Some(t) = temporal {
        total = g.add(total, g.scale(t, T::lit(weights.temporal)))?;
    }
    Ok(LossVars {
        data,
        physical,
        temporal,
        total,
    })
}

/// Full objective for a rollout against `truth[k]`, the frame step `k` should produce.
#[allow(clippy::too_many_arguments)]
pub fn rollout_loss<T: Scalar>(
    g: &Graph<T>,
    st: &TapeStencils,
    mask: &LossMask,
    trace: &RolloutTrace,
    truth: &[Var],
    inv_re: Var,
    dt: f64,
    weights: &LossWeights,
    flags: &LossFlags,
) -> Result<LossVars> {
    let steps = trace.c_hat.len();
    if steps == 0 || truth.len() != steps {
        return Err(Error::shape(
            "rollout_loss",
            format!("{steps} steps vs {} targets", truth.len()),
        ));
    }
    let data = (0..steps)
        .map(|k| data_loss(g, mask, trace.c_prime[k], trace.c_hat[k], truth[k]))
        .collect::<Result<Vec<_>>>()?;
    let data = step_mean(g, &data)?;
    let physical = if flags.no_physical {
        None
    } else {
        Some(physical_loss(
            g,
            st,
            mask,
            &trace.latents,
            inv_re,
            dt,
            flags,
        )?)
    };
    let temporal = if flags.no_temporal {
        None
    } else {
        let terms = (0..steps)
            .map(|k| temporal_loss(g, mask, trace.latents[k].c_mid, trace.previous[k], truth[k]))
            .collect::<Result<Vec<_>>>()?;
        Some(step_mean(g, &terms)?)
    };
    total_loss(g, data, physical, temporal, weights)
}

fn constant_field<T: Scalar>(g: &Graph<T>, f: &ScalarField<T>) -> Var {
    g.constant(field_tensor(f))
}

fn constant_vector<T: Scalar>(g: &Graph<T>, u: &VectorField2<T>) -> Result<Var> {
    let (h, w) = u.dims();
    let mut data = u.x.values().to_vec();
    data.extend_from_slice(u.y.values());
    Ok(g.constant(Tensor::from_vec(&[2, h, w], data)?))
}

fn check_dims(op: &'static str, dims: &[(usize, usize)]) -> Result<()> {
    if dims.windows(2).any(|p| p[0] != p[1]) {
        return Err(Error::shape(op, format!("{dims:?}")));
    }
    Ok(())
}

fn none_masks<T: Scalar>(g: &Graph<T>, h: usize, w: usize, dx: f64) -> Result<TapeStencils> {
    let none = BoundaryMask::none(h, w);
    TapeStencils::new(g, dx, &none, &none)
}

/// Off-tape data loss.
pub fn data_loss_value<T: Scalar>(
    c_prime: &ScalarField<T>,
    c_hat: &ScalarField<T>,
    c_true: &ScalarField<T>,
    exclude: &BoundaryMask,
) -> Result<f64> {
    check_dims(
        "data_loss",
        &[c_prime.dims(), c_hat.dims(), c_true.dims(), exclude.dims()],
    )?;
    let g = Graph::new();
    let mask = LossMask::new(&g, exclude)?;
    let v = data_loss(
        &g,
        &mask,
        constant_field(&g, c_prime),
        constant_field(&g, c_hat),
        constant_field(&g, c_true),
    )?;
    Ok(g.item(v).as_f64())
}

/// Off-tape temporal hinge.
pub fn temporal_loss_value<T: Scalar>(
    c_mid: &ScalarField<T>,
    c_k: &ScalarField<T>,
    c_next: &ScalarField<T>,
    exclude: &BoundaryMask,
) -> Result<f64> {
    check_dims(
        "temporal_loss",
        &[c_mid.dims(), c_k.dims(), c_next.dims(), exclude.dims()],
    )?;
    let g = Graph::new();
    let mask = LossMask::new(&g, exclude)?;
    let v = temporal_loss(
        &g,
        &mask,
        constant_field(&g, c_mid),
        constant_field(&g, c_k),
        constant_field(&g, c_next),
    )?;
    Ok(g.item(v).as_f64())
}

/// Off-tape divergence residual. `masks` defaults to no exclusions.
pub fn divergence_residual_field<T: Scalar>(
    u: &VectorField2<T>,
    grid: &GridSpec,
    mask1: Option<&BoundaryMask>,
) -> Result<ScalarField<T>> {
    let (h, w) = u.dims();
    let g = Graph::new();
    let none = BoundaryMask::none(h, w);
    let m1 = mask1.unwrap_or(&none);
    check_dims("divergence_residual", &[u.dims(), m1.dims()])?;
    let st = TapeStencils::new(&g, grid.dx, m1, &none)?;
    let e2 = divergence_residual(&g, &st, constant_vector(&g, u)?, grid.dt)?;
    ScalarField::from_vec(h, w, g.value(e2).into_data())
}

/// Off-tape momentum residual.
#[allow(clippy::too_many_arguments)]
pub fn momentum_residual_field<T: Scalar>(
    u_k: &VectorField2<T>,
    u_next: &VectorField2<T>,
    p_k: &ScalarField<T>,
    inv_re: f64,
    grid: &GridSpec,
    masks: Option<(&BoundaryMask, &BoundaryMask)>,
    literal_sign: bool,
) -> Result<VectorField2<T>> {
    let (h, w) = u_k.dims();
    check_dims(
        "momentum_residual",
        &[u_k.dims(), u_next.dims(), p_k.dims()],
    )?;
    let g = Graph::new();
    let st = match masks {
        Some((m1, m2)) => {
            check_dims("momentum_residual", &[u_k.dims(), m1.dims(), m2.dims()])?;
            TapeStencils::new(&g, grid.dx, m1, m2)?
        }
        None => none_masks(&g, h, w, grid.dx)?,
    };
    let inv_re = g.constant(Tensor::scalar(T::lit(inv_re)));
    let e1 = momentum_residual(
        &g,
        &st,
        constant_vector(&g, u_k)?,
        constant_vector(&g, u_next)?,
        constant_field(&g, p_k),
        inv_re,
        grid.dt,
        literal_sign,
    )?;
    let data = g.value(e1).into_data();
    let (x, y) = data.split_at(h * w);
    VectorField2::new(
        ScalarField::from_vec(h, w, x.to_vec())?,
        ScalarField::from_vec(h, w, y.to_vec())?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, GradCheckOptions};
    use crate::grid::{boundary_mask, compute_sdf, ObstacleMap, MASK1_THRESHOLD, MASK2_THRESHOLD};
    use crate::nn::{embedding_tensor, Model, ModelConfig};
    use crate::predictor::{rollout_tape, PredictorFlags};
    use crate::sim::{velocity_field, FlowScenario};
    use proptest::prelude::*;

    fn grid(n: usize, dt: f64) -> GridSpec {
        GridSpec::new(n, n, 1.0, dt).unwrap()
    }

    fn wave(n: usize, phase: f64) -> ScalarField<f64> {
        ScalarField::from_fn(n, n, |i, j| {
            (0.4 * i as f64 + phase).sin() + 0.3 * (0.7 * j as f64).cos()
        })
    }

    #[test]
    fn data_loss_examples() {
        let none = BoundaryMask::none(8, 8);
        let c = wave(8, 0.0);
        assert_eq!(data_loss_value(&c, &c, &c, &none).unwrap(), 0.0);
        let shifted = c.map(|v| v + 1.0);
        assert!((data_loss_value(&shifted, &c, &c, &none).unwrap() - 1.0).abs() < 1e-12);

        // Excluding the left half: only the right half counts.
        let exclude =
            BoundaryMask::from_cells(4, 4, (0..16).map(|k| k % 4 < 2).collect(), 0.5).unwrap();
        let truth = ScalarField::zeros(4, 4);
        let pred = ScalarField::from_fn(4, 4, |_, j| if j < 2 { 100.0 } else { 2.0 });
        // Each kept cell contributes 2² + 2².
        assert_eq!(
            data_loss_value(&pred, &pred, &truth, &exclude).unwrap(),
            8.0
        );
    }

    #[test]
    fn temporal_loss_examples() {
        let none = BoundaryMask::none(8, 8);
        let c_k = wave(8, 0.0);
        let c_next = wave(8, 0.5);
        assert_eq!(
            temporal_loss_value(&c_k, &c_k, &c_next, &none).unwrap(),
            0.0
        );
        assert_eq!(
            temporal_loss_value(&c_next, &c_k, &c_next, &none).unwrap(),
            0.0
        );
        let zeros = ScalarField::zeros(8, 8);
        let v = temporal_loss_value(
            &ScalarField::filled(8, 8, 2.0),
            &zeros,
            &ScalarField::filled(8, 8, 1.0),
            &none,
        )
        .unwrap();
        assert_eq!(v, 3.0);
    }

    #[test]
    fn divergence_residual_examples() {
        let n = 12;
        let gr = grid(n, 0.1);
        let constant = VectorField2::uniform(n, n, 0.3, -0.2);
        assert!(divergence_residual_field(&constant, &gr, None)
            .unwrap()
            .values()
            .iter()
            .all(|&v| v == 0.0));
        let rotation = VectorField2::new(
            ScalarField::from_fn(n, n, |i, _| -(i as f64)),
            ScalarField::from_fn(n, n, |_, j| j as f64),
        )
        .unwrap();
        let e2 = divergence_residual_field(&rotation, &gr, None).unwrap();
        let stretch = VectorField2::new(
            ScalarField::from_fn(n, n, |_, j| j as f64),
            ScalarField::zeros(n, n),
        )
        .unwrap();
        let e2s = divergence_residual_field(&stretch, &gr, None).unwrap();
        for i in 1..n - 1 {
            for j in 1..n - 1 {
                assert_eq!(e2.get(i, j), 0.0);
                assert!((e2s.get(i, j) - 0.1).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn momentum_residual_steady_cases() {
        let n = 12;
        let gr = grid(n, 0.1);
        let zero = VectorField2::zeros(n, n);
        let p = ScalarField::filled(n, n, 2.0);
        let e = momentum_residual_field(&zero, &zero, &p, 0.05, &gr, None, false).unwrap();
        assert_eq!(e.max_abs(), (0.0, 0.0));
        let uniform = VectorField2::uniform(n, n, 1.0, 0.0);
        let e = momentum_residual_field(&uniform, &uniform, &p, 0.05, &gr, None, false).unwrap();
        assert_eq!(e.max_abs(), (0.0, 0.0));
    }

    /// Rigid-body vortex with its centripetal pressure is a steady solution;
    /// the residual is pure truncation error and shrinks with resolution.
    #[test]
    fn vortex_residual_is_truncation_error() {
        let interior_max = |n: usize| {
            let gr = grid(n, 0.1);
            let s = FlowScenario::vortex(0.4, 0.0, 0);
            let (u, p) = velocity_field::<f64>(&s, &gr).unwrap();
            let sdf: ScalarField<f64> = compute_sdf(&ObstacleMap::empty(n, n), &gr).unwrap();
            let m1 = boundary_mask(&sdf, MASK1_THRESHOLD).unwrap();
            let m2 = boundary_mask(&sdf, MASK2_THRESHOLD).unwrap();
            let e = momentum_residual_field(&u, &u, &p, 0.0, &gr, Some((&m1, &m2)), false).unwrap();
            let mut worst: f64 = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if !m2.is_excluded(i, j) {
                        worst = worst.max(e.x.get(i, j).abs()).max(e.y.get(i, j).abs());
                    }
                }
            }
            worst
        };
        // Fields of fixed shape on a finer grid: central differences of the
        // quadratic pressure and linear velocity are exact, leaving round-off.
        assert!(interior_max(16) < 1e-12);
        assert!(interior_max(32) < 1e-12);
    }

    #[test]
    fn literal_sign_flips_rhs() {
        let n = 8;
        let gr = grid(n, 0.5);
        let u = VectorField2::new(wave(n, 0.0), wave(n, 1.0)).unwrap();
        let p = wave(n, 2.0);
        // With Δu = 0 the two forms are negatives of each other.
        let std = momentum_residual_field(&u, &u, &p, 0.1, &gr, None, false).unwrap();
        let lit = momentum_residual_field(&u, &u, &p, 0.1, &gr, None, true).unwrap();
        for (a, b) in std.x.values().iter().zip(lit.x.values()) {
            assert!((a + b).abs() < 1e-14);
        }
    }

    #[test]
    fn weights_and_components() {
        let g = Graph::<f64>::new();
        let d = g.constant(Tensor::scalar(0.5));
        let p = g.constant(Tensor::scalar(0.25));
        let t = g.constant(Tensor::scalar(2.0));
        let only_data = total_loss(
            &g,
            d,
            Some(p),
            Some(t),
            &LossWeights {
                data: 1.0,
                physical: 0.0,
                temporal: 0.0,
            },
        )
        .unwrap();
        assert_eq!(g.item(only_data.total), 0.5);
        let radar = total_loss(&g, d, Some(p), Some(t), &LossWeights::radar())
            .unwrap()
            .breakdown(&g);
        assert_eq!(
            LossWeights::radar(),
            LossWeights {
                data: 1.0,
                physical: 0.1,
                temporal: 1.0
            }
        );
        assert!((radar.total - (0.5 + 0.025 + 2.0)).abs() < 1e-15);
        let base = total_loss(&g, d, Some(p), Some(t), &LossWeights::default())
            .unwrap()
            .breakdown(&g);
        let doubled = total_loss(
            &g,
            d,
            Some(p),
            Some(t),
            &LossWeights {
                physical: 2.0,
                ..Default::default()
            },
        )
        .unwrap()
        .breakdown(&g);
        assert_eq!(doubled.total - base.total, 0.25);
        let zero = g.constant(Tensor::scalar(0.0));
        assert_eq!(
            g.item(
                total_loss(&g, zero, Some(zero), Some(zero), &LossWeights::default())
                    .unwrap()
                    .total
            ),
            0.0
        );
    }

    struct ToyRollout {
        model: Model,
        names: Vec<String>,
        values: Vec<Tensor<f64>>,
        frames: Vec<ScalarField<f64>>,
        psi: Tensor<f64>,
        exclude: BoundaryMask,
        m1: BoundaryMask,
        m2: BoundaryMask,
    }

    fn toy_rollout() -> ToyRollout {
        let n = 12;
        let gr = grid(n, 0.3);
        let mut obstacles = ObstacleMap::empty(n, n);
        obstacles.set_solid(4, 7, true);
        let psi = crate::grid::spatial_embedding::<f64>(&obstacles, &gr).unwrap();
        let model = Model::new(ModelConfig {
            window: 2,
            inference_widths: vec![3, 4],
            correction_widths: vec![2, 2],
            spatiotemporal: false,
        })
        .unwrap();
        let params = model.init_params::<f64>(8);
        let names: Vec<String> = params.names().map(String::from).collect();
        let values = names
            .iter()
            .enumerate()
            .map(|(k, n)| {
                let t = params.value(n).unwrap().clone();
                if n.ends_with(".b") || n == "cor.head.w" {
                    let data = (0..t.numel())
                        .map(|e| 0.04 + 0.01 * ((k + e) % 4) as f64)
                        .collect();
                    Tensor::from_vec(t.shape(), data).unwrap()
                } else {
                    t
                }
            })
            .collect();
        let frames = (0..5)
            .map(|t| wave(n, 0.3 * t as f64).map(|v| v * 0.5 + 1.0))
            .collect();
        let sdf = psi.sdf.clone();
        ToyRollout {
            model,
            names,
            values,
            frames,
            psi: embedding_tensor(&psi),
            exclude: boundary_mask(&sdf, LOSS_MASK_THRESHOLD).unwrap(),
            m1: psi.mask1(),
            m2: psi.mask2(),
        }
    }

    impl ToyRollout {
        fn loss(
            &self,
            g: &Graph<f64>,
            vars: &[Var],
            truth_shift: f64,
            component: usize,
        ) -> Result<Var> {
            let b = crate::autodiff::Bindings::from_iter(
                self.names.iter().cloned().zip(vars.iter().copied()),
            );
            let st = TapeStencils::new(g, 1.0, &self.m1, &self.m2)?;
            let mask = LossMask::new(g, &self.exclude)?;
            let window = self.frames[..2]
                .iter()
                .map(|f| g.constant(field_tensor(f)))
                .collect();
            let psi = g.constant(self.psi.clone());
            let trace = rollout_tape(
                &self.model,
                g,
                &b,
                &st,
                window,
                psi,
                3,
                0.3,
                &PredictorFlags::default(),
            )?;
            let truth: Vec<Var> = self.frames[2..]
                .iter()
                .map(|f| g.constant(field_tensor(&f.map(|v| v + truth_shift))))
                .collect();
            let inv_re = self.model.inv_re(g, &b)?;
            let parts = rollout_loss(
                g,
                &st,
                &mask,
                &trace,
                &truth,
                inv_re,
                0.3,
                &LossWeights::default(),
                &LossFlags::default(),
            )?;
            Ok(match component {
                0 => parts.total,
                1 => parts.data,
                2 => parts.physical.unwrap(),
                _ => parts.temporal.unwrap(),
            })
        }
    }

    #[test]
    fn losses_pass_gradient_check_on_toy_rollout() {
        let toy = toy_rollout();
        for component in 0..4 {
            let err = grad_check(
                |g, v| toy.loss(g, v, 0.0, component),
                &toy.values,
                GradCheckOptions {
                    step: 1e-5,
                    max_elements: Some(4),
                },
            )
            .unwrap();
            assert!(err < 1e-3, "component {component}: {err:e}");
        }
    }

    #[test]
    fn excluded_truth_cells_carry_no_gradient() {
        let toy = toy_rollout();
        let grads = |tweak: bool| {
            let g = Graph::new();
            let vars: Vec<Var> = toy.values.iter().map(|t| g.param(t.clone())).collect();
            let b = crate::autodiff::Bindings::from_iter(
                toy.names.iter().cloned().zip(vars.iter().copied()),
            );
            let st = TapeStencils::new(&g, 1.0, &toy.m1, &toy.m2).unwrap();
            let mask = LossMask::new(&g, &toy.exclude).unwrap();
            let window = toy.frames[..2]
                .iter()
                .map(|f| g.constant(field_tensor(f)))
                .collect();
            let psi = g.constant(toy.psi.clone());
            let trace = rollout_tape(
                &toy.model,
                &g,
                &b,
                &st,
                window,
                psi,
                2,
                0.3,
                &PredictorFlags::default(),
            )
            .unwrap();
            let truth: Vec<Var> = toy.frames[2..4]
                .iter()
                .map(|f| {
                    let mut f = f.clone();
                    if tweak {
                        for (v, &e) in f.values_mut().iter_mut().zip(toy.exclude.cells()) {
                            if e {
                                *v += 5.0;
                            }
                        }
                    }
                    g.constant(field_tensor(&f))
                })
                .collect();
            let inv_re = toy.model.inv_re(&g, &b).unwrap();
            let parts = rollout_loss(
                &g,
                &st,
                &mask,
                &trace,
                &truth,
                inv_re,
                0.3,
                &LossWeights::default(),
                &LossFlags::default(),
            )
            .unwrap();
            let gr = g.backward(parts.total).unwrap();
            vars.iter().map(|&v| gr.get(v)).collect::<Vec<_>>()
        };
        assert_eq!(grads(false), grads(true));
    }

    #[test]
    fn dropping_momentum_leaves_divergence_only() {
        let n = 8;
        let g = Graph::<f64>::new();
        let none = BoundaryMask::none(n, n);
        let st = TapeStencils::new(&g, 1.0, &none, &none).unwrap();
        let mask = LossMask::new(&g, &none).unwrap();
        let latent = |phase: f64| LatentVars {
            c_mid: g.constant(field_tensor(&wave(n, phase))),
            velocity: constant_vector(
                &g,
                &VectorField2::new(wave(n, phase), wave(n, phase + 1.0)).unwrap(),
            )
            .unwrap(),
            pressure: g.constant(field_tensor(&wave(n, 2.0))),
        };
        let latents = [latent(0.0), latent(0.4)];
        let inv_re = g.constant(Tensor::scalar(0.02));
        let flags = LossFlags {
            no_momentum: true,
            ..Default::default()
        };
        let phys = g.item(physical_loss(&g, &st, &mask, &latents, inv_re, 0.5, &flags).unwrap());
        let e2: f64 = latents
            .iter()
            .map(|l| {
                let e = divergence_residual(&g, &st, l.velocity, 0.5).unwrap();
                g.value(e).data().iter().map(|v| v * v).sum::<f64>() / (n * n) as f64
            })
            .sum::<f64>()
            / 2.0;
        assert!((phys - e2).abs() < 1e-14);
        let full = g.item(
            physical_loss(&g, &st, &mask, &latents, inv_re, 0.5, &LossFlags::default()).unwrap(),
        );
        assert!(full > phys);

        let zeros = LatentVars {
            c_mid: g.constant(Tensor::zeros(&[1, n, n])),
            velocity: g.constant(Tensor::zeros(&[2, n, n])),
            pressure: g.constant(Tensor::zeros(&[1, n, n])),
        };
        assert_eq!(
            g.item(
                physical_loss(
                    &g,
                    &st,
                    &mask,
                    &[zeros, zeros],
                    inv_re,
                    0.5,
                    &LossFlags::default()
                )
                .unwrap()
            ),
            0.0
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn components_are_nonnegative(
            a in proptest::collection::vec(-3.0f64..3.0, 16),
            b in proptest::collection::vec(-3.0f64..3.0, 16),
            c in proptest::collection::vec(-3.0f64..3.0, 16),
        ) {
            let f = |v: Vec<f64>| ScalarField::from_vec(4, 4, v).unwrap();
            let (a, b, c) = (f(a), f(b), f(c));
            let none = BoundaryMask::none(4, 4);
            prop_assert!(data_loss_value(&a, &b, &c, &none).unwrap() >= 0.0);
            prop_assert!(temporal_loss_value(&a, &b, &c, &none).unwrap() >= 0.0);
        }

        #[test]
        fn hinge_is_zero_inside_the_interval(
            c_k in proptest::collection::vec(-2.0f64..2.0, 16),
            span in proptest::collection::vec(-2.0f64..2.0, 16),
            frac in proptest::collection::vec(-1.0f64..1.0, 16),
        ) {
            let f = |v: Vec<f64>| ScalarField::from_vec(4, 4, v).unwrap();
            let c_next: Vec<f64> = c_k.iter().zip(&span).map(|(a, s)| a + s).collect();
            let mid: Vec<f64> = c_k.iter().zip(&span).zip(&frac).map(|((a, s), t)| a + s * t).collect();
            let v = temporal_loss_value(&f(mid), &f(c_k), &f(c_next), &BoundaryMask::none(4, 4)).unwrap();
            prop_assert_eq!(v, 0.0);
        }
    }
}
