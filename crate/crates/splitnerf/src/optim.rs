//! ADAM with two parameter groups: field weights (rate `a_theta`, decayed
//! exponentially every `decay_every` steps by factor `gamma`) and per-frame
//! poses (rate `a_xi`, never decayed). Pose updates are taken on the
//! manifold: the bias-corrected ADAM step on the perturbation gradient is
//! exponentiated and left-multiplied onto the stored transform, after which
//! the rotation is re-orthonormalized.

use crate::field::{Dense, FieldGrads, FieldParams};
use crate::render::FieldPair;
use crate::se3::{compose, exp, RigidTransform, Twist};
use nalgebra::Vector6;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, thiserror::Error)]
pub enum OptimError {
    #[error("non-finite gradient in group `{0}`")]
    NonFiniteGradient(String),
    #[error("attempted pose update on pinned frame 0")]
    PinnedFrame,
    #[error("pose gradient for frame {0} outside the active range")]
    UnknownFrame(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Field learning rate, decayed.
    pub lr_field: f64,
    /// Pose learning rate, constant.
    pub lr_pose: f64,
    /// Exponential decay factor applied to `lr_field`.
    pub gamma: f64,
    /// Steps per decay application.
    pub decay_every: u64,
    /// Optional global-norm clip for field gradients (off by default).
    pub grad_clip: Option<f64>,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr_field: 5e-4,
            lr_pose: 5e-4,
            gamma: 0.1,
            decay_every: 250_000,
            grad_clip: None,
        }
    }
}

/// First/second moments shaped like one field.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldMoments {
    pub m: Vec<Dense>,
    pub v: Vec<Dense>,
}

impl FieldMoments {
    fn zeros_like(params: &FieldParams) -> Self {
        let zero: Vec<Dense> = params.layers().iter().map(|(_, d)| Dense::zeros_like(d)).collect();
        FieldMoments { m: zero.clone(), v: zero }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PoseMoments {
    pub m: Vector6<f64>,
    pub v: Vector6<f64>,
    /// Per-frame step count for bias correction (moments are created lazily
    /// when the frame is admitted).
    pub steps: u64,
}

/// Optimizer state for all field pairs plus the per-frame poses.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub hyper: AdamHyper,
    /// Moments keyed like the gradient bundle: static pair always, dynamic
    /// pair when present.
    pub statics: (FieldMoments, FieldMoments),
    pub dynamics: Option<(FieldMoments, FieldMoments)>,
    pub poses: BTreeMap<usize, PoseMoments>,
    /// Field-group step count (shared; drives bias correction and decay).
    pub steps: u64,
}

impl AdamState {
    pub fn new(hyper: AdamHyper, statics: &FieldPair, dynamics: Option<&FieldPair>) -> Self {
        AdamState {
            hyper,
            statics: (
                FieldMoments::zeros_like(&statics.coarse),
                FieldMoments::zeros_like(&statics.fine),
            ),
            dynamics: dynamics.map(|d| {
                (FieldMoments::zeros_like(&d.coarse), FieldMoments::zeros_like(&d.fine))
            }),
            poses: BTreeMap::new(),
            steps: 0,
        }
    }

    /// Allocates moments for a dynamic pair added after construction (online
    /// phase entry).
    pub fn attach_dynamics(&mut self, dynamics: &FieldPair) {
        self.dynamics = Some((
            FieldMoments::zeros_like(&dynamics.coarse),
            FieldMoments::zeros_like(&dynamics.fine),
        ));
    }

    /// Learning rate after exponential decay:
    /// `lr_field * gamma^floor((step - 1) / decay_every)` at step number
    /// `step` (1-based), so step `decay_every + 1` is the first decayed one.
    pub fn field_lr_at(&self, step: u64) -> f64 {
        let k = (step.saturating_sub(1)) / self.hyper.decay_every;
        self.hyper.lr_field * self.hyper.gamma.powi(k as i32)
    }
}

fn adam_update_dense(
    params: &mut Dense,
    grads: &Dense,
    m: &mut Dense,
    v: &mut Dense,
    lr: f64,
    h: &AdamHyper,
    bias1: f64,
    bias2: f64,
) {
    let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
        *m = h.beta1 * *m + (1.0 - h.beta1) * g;
        *v = h.beta2 * *v + (1.0 - h.beta2) * g * g;
        let m_hat = *m / bias1;
        let v_hat = *v / bias2;
        *p -= lr * m_hat / (v_hat.sqrt() + h.eps);
    };
    ndarray::Zip::from(&mut params.w).and(&grads.w).and(&mut m.w).and(&mut v.w).for_each(
        |p, &g, m, v| update(p, g, m, v),
    );
    ndarray::Zip::from(&mut params.b).and(&grads.b).and(&mut m.b).and(&mut v.b).for_each(
        |p, &g, m, v| update(p, g, m, v),
    );
}

pub fn zero_grads(params: &FieldParams) -> FieldGrads {
    params.layers().iter().map(|(_, d)| Dense::zeros_like(d)).collect()
}

fn check_finite(name: &str, grads: &FieldGrads) -> Result<(), OptimError> {
    for d in grads {
        if !d.w.iter().all(|x| x.is_finite()) || !d.b.iter().all(|x| x.is_finite()) {
            return Err(OptimError::NonFiniteGradient(name.to_string()));
        }
    }
    Ok(())
}

fn clip_grads(grads: &mut [FieldGrads], clip: f64) {
    let mut norm2 = 0.0;
    for g in grads.iter() {
        for d in g {
            norm2 += d.w.iter().map(|x| x * x).sum::<f64>();
            norm2 += d.b.iter().map(|x| x * x).sum::<f64>();
        }
    }
    let norm = norm2.sqrt();
    if norm > clip {
        let scale = clip / norm;
        for g in grads.iter_mut() {
            for d in g {
                d.w.mapv_inplace(|x| x * scale);
                d.b.mapv_inplace(|x| x * scale);
            }
        }
    }
}

fn step_field(
    params: &mut FieldParams,
    grads: &FieldGrads,
    moments: &mut FieldMoments,
    lr: f64,
    h: &AdamHyper,
    bias1: f64,
    bias2: f64,
) {
    let mut layers = params.layers_mut();
    for (i, (_, dense)) in layers.iter_mut().enumerate() {
        adam_update_dense(dense, &grads[i], &mut moments.m[i], &mut moments.v[i], lr, h, bias1, bias2);
    }
}

/// One ADAM step over every field group. Gradients must be ordered like
/// `FieldParams::layers`. Increments the shared field step counter.
pub fn adam_step(
    statics: &mut FieldPair,
    dynamics: Option<&mut FieldPair>,
    mut grads: FieldSetGrads,
    state: &mut AdamState,
) -> Result<(), OptimError> {
    check_finite("static_coarse", &grads.static_coarse)?;
    check_finite("static_fine", &grads.static_fine)?;
    if let Some(d) = &grads.dynamic {
        check_finite("dynamic_coarse", &d.0)?;
        check_finite("dynamic_fine", &d.1)?;
    }
    if let Some(clip) = state.hyper.grad_clip {
        let mut all = vec![grads.static_coarse, grads.static_fine];
        if let Some((dc, df)) = grads.dynamic {
            all.push(dc);
            all.push(df);
        }
        clip_grads(&mut all, clip);
        let mut it = all.into_iter();
        grads = FieldSetGrads {
            static_coarse: it.next().unwrap(),
            static_fine: it.next().unwrap(),
            dynamic: {
                let dc = it.next();
                dc.map(|dc| (dc, it.next().unwrap()))
            },
        };
    }

    state.steps += 1;
    let t = state.steps;
    let h = state.hyper;
    let lr = state.field_lr_at(t);
    let bias1 = 1.0 - h.beta1.powi(t as i32);
    let bias2 = 1.0 - h.beta2.powi(t as i32);

    step_field(&mut statics.coarse, &grads.static_coarse, &mut state.statics.0, lr, &h, bias1, bias2);
    step_field(&mut statics.fine, &grads.static_fine, &mut state.statics.1, lr, &h, bias1, bias2);
    if let (Some(dyn_pair), Some((gc, gf))) = (dynamics, &grads.dynamic) {
        let dm = state.dynamics.as_mut().expect("dynamic moments attached");
        step_field(&mut dyn_pair.coarse, gc, &mut dm.0, lr, &h, bias1, bias2);
        step_field(&mut dyn_pair.fine, gf, &mut dm.1, lr, &h, bias1, bias2);
    }
    Ok(())
}

/// Field gradients for every trained network.
pub struct FieldSetGrads {
    pub static_coarse: FieldGrads,
    pub static_fine: FieldGrads,
    pub dynamic: Option<(FieldGrads, FieldGrads)>,
}

/// ADAM descent on each active frame's pose perturbation, applied
/// left-multiplicatively: `T <- exp(delta) T`, followed by rotation
/// re-orthonormalization. Frame 0 is the gauge pin and must never appear in
/// `grads`. The pose rate is never decayed.
pub fn pose_step(
    poses: &mut [RigidTransform],
    grads: &BTreeMap<usize, Vector6<f64>>,
    state: &mut AdamState,
) -> Result<(), OptimError> {
    let h = state.hyper;
    for (&frame, grad) in grads {
        if frame == 0 {
            return Err(OptimError::PinnedFrame);
        }
        if frame >= poses.len() {
            return Err(OptimError::UnknownFrame(frame));
        }
        if !grad.iter().all(|x| x.is_finite()) {
            return Err(OptimError::NonFiniteGradient(format!("pose[{frame}]")));
        }
        let moments = state.poses.entry(frame).or_default();
        moments.steps += 1;
        let t = moments.steps;
        let bias1 = 1.0 - h.beta1.powi(t as i32);
        let bias2 = 1.0 - h.beta2.powi(t as i32);
        let mut delta = Vector6::zeros();
        for i in 0..6 {
            let g = grad[i];
            moments.m[i] = h.beta1 * moments.m[i] + (1.0 - h.beta1) * g;
            moments.v[i] = h.beta2 * moments.v[i] + (1.0 - h.beta2) * g * g;
            let m_hat = moments.m[i] / bias1;
            let v_hat = moments.v[i] / bias2;
            delta[i] = -h.lr_pose * m_hat / (v_hat.sqrt() + h.eps);
        }
        let pose = &mut poses[frame];
        *pose = compose(&exp(&Twist::from_vector6(&delta)), pose);
        pose.renormalize();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FieldConfig;
    use approx::assert_abs_diff_eq;
    use nalgebra::{Matrix3, Vector3};

    fn tiny_pair() -> FieldPair {
        let cfg = FieldConfig {
            depth: 2,
            width: 4,
            skip: 1,
            color_width: 2,
            enc: crate::field::EncodingConfig { l_pos: 1, l_dir: 1, l_time: 1, include_input: true },
            time_input: false,
        };
        FieldPair::init(cfg, 5)
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut statics = tiny_pair();
        let before = statics.clone();
        let mut state = AdamState::new(AdamHyper::default(), &statics, None);
        let grads = FieldSetGrads {
            static_coarse: zero_grads(&statics.coarse),
            static_fine: zero_grads(&statics.fine),
            dynamic: None,
        };
        adam_step(&mut statics, None, grads, &mut state).unwrap();
        assert_eq!(statics, before);
        assert_eq!(state.steps, 1);
    }

    #[test]
    fn first_step_is_bias_corrected_unit_step() {
        // Single coordinate, g = 1, lr = 1e-3: first update is -lr.
        let mut statics = tiny_pair();
        let before = statics.coarse.trunk[0].w[[0, 0]];
        let hyper = AdamHyper { lr_field: 1e-3, ..Default::default() };
        let mut state = AdamState::new(hyper, &statics, None);
        let mut grads = FieldSetGrads {
            static_coarse: zero_grads(&statics.coarse),
            static_fine: zero_grads(&statics.fine),
            dynamic: None,
        };
        grads.static_coarse[0].w[[0, 0]] = 1.0;
        adam_step(&mut statics, None, grads, &mut state).unwrap();
        let delta = statics.coarse.trunk[0].w[[0, 0]] - before;
        // m_hat = 1, v_hat = 1 => step = -lr / (1 + eps) ~ -lr.
        assert_abs_diff_eq!(delta, -1e-3, epsilon = 1e-9);
    }

    #[test]
    fn decay_boundary_at_250k() {
        let statics = tiny_pair();
        let state = AdamState::new(AdamHyper::default(), &statics, None);
        assert_abs_diff_eq!(state.field_lr_at(1), 5e-4, epsilon = 1e-18);
        assert_abs_diff_eq!(state.field_lr_at(250_000), 5e-4, epsilon = 1e-18);
        // The 250,001st step uses lr * gamma.
        assert_abs_diff_eq!(state.field_lr_at(250_001), 5e-5, epsilon = 1e-18);
        assert_abs_diff_eq!(state.field_lr_at(500_001), 5e-6, epsilon = 1e-18);
    }

    #[test]
    fn non_finite_gradient_names_group() {
        let mut statics = tiny_pair();
        let mut state = AdamState::new(AdamHyper::default(), &statics, None);
        let mut grads = FieldSetGrads {
            static_coarse: zero_grads(&statics.coarse),
            static_fine: zero_grads(&statics.fine),
            dynamic: None,
        };
        grads.static_fine[1].w[[0, 0]] = f64::NAN;
        match adam_step(&mut statics, None, grads, &mut state) {
            Err(OptimError::NonFiniteGradient(g)) => assert_eq!(g, "static_fine"),
            other => panic!("expected NonFiniteGradient, got {other:?}"),
        }
    }

    #[test]
    fn pose_zero_gradient_is_identity_update() {
        let mut poses = vec![RigidTransform::identity(), RigidTransform::identity()];
        let statics = tiny_pair();
        let mut state = AdamState::new(AdamHyper::default(), &statics, None);
        let mut grads = BTreeMap::new();
        grads.insert(1usize, Vector6::zeros());
        pose_step(&mut poses, &grads, &mut state).unwrap();
        assert_eq!(poses[1], RigidTransform::identity());
    }

    #[test]
    fn pose_frame_zero_is_pinned() {
        let mut poses = vec![RigidTransform::identity(), RigidTransform::identity()];
        let statics = tiny_pair();
        let mut state = AdamState::new(AdamHyper::default(), &statics, None);
        let mut grads = BTreeMap::new();
        grads.insert(0usize, Vector6::repeat(1.0));
        match pose_step(&mut poses, &grads, &mut state) {
            Err(OptimError::PinnedFrame) => {}
            other => panic!("expected PinnedFrame, got {other:?}"),
        }
        assert_eq!(poses[0], RigidTransform::identity());
    }

    #[test]
    fn pose_descends_synthetic_quadratic() {
        // Minimize |T[p0] - target|^2 over the pose of frame 1; the
        // gradient with respect to the perturbation is J^T (T[p0] - target).
        let p0 = Vector3::new(0.3, -0.2, 0.5);
        let target = Vector3::new(0.1, 0.4, 0.3);
        let statics = tiny_pair();
        let hyper = AdamHyper { lr_pose: 5e-3, ..Default::default() };
        let mut state = AdamState::new(hyper, &statics, None);
        let mut poses = vec![RigidTransform::identity(), RigidTransform::identity()];
        for _ in 0..2000 {
            let q = crate::se3::transform_point(&poses[1], &p0);
            let residual = q - target;
            let mut g = Vector6::zeros();
            crate::se3::accumulate_point_gradient(&q, &(2.0 * residual), &mut g);
            let mut grads = BTreeMap::new();
            grads.insert(1usize, g);
            pose_step(&mut poses, &grads, &mut state).unwrap();
        }
        let q = crate::se3::transform_point(&poses[1], &p0);
        assert!((q - target).norm() < 1e-4, "residual {}", (q - target).norm());
        // Rotation stays orthonormal through thousands of updates.
        let drift = (poses[1].r.transpose() * poses[1].r - Matrix3::identity()).norm();
        assert!(drift < 1e-9);
    }

    #[test]
    fn steady_state_step_is_rate_bounded() {
        // With a constant gradient the bias-corrected step magnitude is
        // bounded by lr / (1 - beta1) per coordinate.
        let mut statics = tiny_pair();
        let hyper = AdamHyper { lr_field: 1e-3, ..Default::default() };
        let mut state = AdamState::new(hyper, &statics, None);
        let bound = 1e-3 / (1.0 - 0.9) + 1e-12;
        for _ in 0..50 {
            let before = statics.coarse.trunk[0].w[[0, 0]];
            let mut grads = FieldSetGrads {
                static_coarse: zero_grads(&statics.coarse),
                static_fine: zero_grads(&statics.fine),
                dynamic: None,
            };
            grads.static_coarse[0].w[[0, 0]] = 2.5;
            adam_step(&mut statics, None, grads, &mut state).unwrap();
            let step = (statics.coarse.trunk[0].w[[0, 0]] - before).abs();
            assert!(step <= bound, "step {step} exceeds bound {bound}");
        }
    }

    #[test]
    fn warm_descent_direction_is_negative() {
        // Constant gradient: after bias correction the applied step must
        // oppose the gradient.
        let mut poses = vec![RigidTransform::identity(), RigidTransform::identity()];
        let statics = tiny_pair();
        let mut state = AdamState::new(AdamHyper::default(), &statics, None);
        let g = Vector6::new(0.5, -0.25, 0.1, 0.0, 0.05, -0.4);
        for _ in 0..10 {
            let before = poses[1];
            let mut grads = BTreeMap::new();
            grads.insert(1usize, g);
            pose_step(&mut poses, &grads, &mut state).unwrap();
            // Recover the applied twist: delta = log(T_new * T_old^-1).
            let delta =
                crate::se3::log(&compose(&poses[1], &crate::se3::inverse(&before))).to_vector6();
            assert!(delta.dot(&g) < 0.0, "update not a descent direction");
        }
    }
}
