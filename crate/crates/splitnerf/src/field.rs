//! Positional encoding and the radiance-field MLPs.
//!
//! Both the static and the dynamic volume use the same architecture: a ReLU
//! trunk over the encoded sample position (with one skip connection that
//! re-concatenates the encoded input), a linear density head read off the
//! trunk, and a color branch that consumes trunk features concatenated with
//! the encoded view direction. Density is therefore structurally independent
//! of the direction. The time-conditioned baseline appends an encoded frame
//! time to the trunk input.
//!
//! This module is forward-only; the adjoints live in [`crate::diff`].

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum FieldError {
    #[error("non-finite parameter in layer `{0}`")]
    NonFiniteParam(String),
    #[error("layer `{layer}` expects input width {expected}, got {got}")]
    ShapeMismatch { layer: String, expected: usize, got: usize },
}

/// Frequency-encoding bandwidths. `l_time` only matters for the
/// time-conditioned baseline field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncodingConfig {
    pub l_pos: usize,
    pub l_dir: usize,
    pub l_time: usize,
    pub include_input: bool,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        // NeRF bandwidths.
        EncodingConfig { l_pos: 10, l_dir: 4, l_time: 4, include_input: true }
    }
}

/// Sin/cos frequency encoding at octaves `2^0 pi .. 2^(l-1) pi`.
///
/// Layout: the raw components first (when `include_input`), then per octave
/// the (sin, cos) pair of every component. Output length is
/// `k * (include_input + 2 l)`.
pub fn encode(x: &[f64], l: usize, include_input: bool) -> Vec<f64> {
    let mut out = Vec::with_capacity(encoded_len(x.len(), l, include_input));
    if include_input {
        out.extend_from_slice(x);
    }
    for octave in 0..l {
        let freq = std::f64::consts::PI * (1u64 << octave) as f64;
        for &xi in x {
            let (s, c) = (freq * xi).sin_cos();
            out.push(s);
            out.push(c);
        }
    }
    out
}

pub fn encoded_len(k: usize, l: usize, include_input: bool) -> usize {
    k * (usize::from(include_input) + 2 * l)
}

/// Writes `encode` of each point into the rows of `out`.
pub fn encode_rows(
    points: &[[f64; 3]],
    l: usize,
    include_input: bool,
    mut out: ndarray::ArrayViewMut2<f64>,
) {
    debug_assert_eq!(out.nrows(), points.len());
    for (i, p) in points.iter().enumerate() {
        let mut row = out.row_mut(i);
        let mut j = 0;
        if include_input {
            for &v in p {
                row[j] = v;
                j += 1;
            }
        }
        for octave in 0..l {
            let freq = std::f64::consts::PI * (1u64 << octave) as f64;
            for &v in p {
                let (s, c) = (freq * v).sin_cos();
                row[j] = s;
                row[j + 1] = c;
                j += 2;
            }
        }
    }
}

/// Pulls a gradient with respect to the raw k-vector back through the
/// encoding, reusing the stored sin/cos values in `enc_row`.
pub fn encode_backward(
    enc_row: ArrayView1<f64>,
    grad_row: ArrayView1<f64>,
    k: usize,
    l: usize,
    include_input: bool,
) -> Vec<f64> {
    let mut out = vec![0.0; k];
    let mut j = 0;
    if include_input {
        for g in out.iter_mut() {
            *g += grad_row[j];
            j += 1;
        }
    }
    for octave in 0..l {
        let freq = std::f64::consts::PI * (1u64 << octave) as f64;
        for g in out.iter_mut() {
            let (s, c) = (enc_row[j], enc_row[j + 1]);
            // d sin(f x) = f cos, d cos(f x) = -f sin.
            *g += freq * (c * grad_row[j] - s * grad_row[j + 1]);
            j += 2;
        }
    }
    out
}

/// Architecture of one field MLP.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    /// Trunk depth.
    pub depth: usize,
    /// Trunk width.
    pub width: usize,
    /// Trunk layer index whose input re-concatenates the encoded position.
    pub skip: usize,
    /// Width of the color branch hidden layer.
    pub color_width: usize,
    pub enc: EncodingConfig,
    /// Baseline variant: append encoded frame time to the trunk input.
    pub time_input: bool,
}

impl FieldConfig {
    /// Desk-scale preset used by the bundled toy experiments.
    pub fn desk() -> Self {
        FieldConfig {
            depth: 4,
            width: 64,
            skip: 2,
            color_width: 32,
            enc: EncodingConfig { l_pos: 6, l_dir: 2, l_time: 4, include_input: true },
            time_input: false,
        }
    }

    /// Full-scale preset (NeRF convention).
    pub fn full() -> Self {
        FieldConfig {
            depth: 8,
            width: 256,
            skip: 4,
            color_width: 128,
            enc: EncodingConfig::default(),
            time_input: false,
        }
    }

    pub fn pos_dim(&self) -> usize {
        encoded_len(3, self.enc.l_pos, self.enc.include_input)
    }

    pub fn dir_dim(&self) -> usize {
        encoded_len(3, self.enc.l_dir, self.enc.include_input)
    }

    pub fn time_dim(&self) -> usize {
        if self.time_input {
            encoded_len(1, self.enc.l_time, self.enc.include_input)
        } else {
            0
        }
    }

    /// Width of the trunk input (encoded position plus optional time).
    pub fn trunk_in(&self) -> usize {
        self.pos_dim() + self.time_dim()
    }
}

/// One dense layer, stored input-major: `y = x . w + b` with `w: (in, out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    fn init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..bound));
        Dense { w, b: Array1::zeros(fan_out) }
    }

    pub fn zeros_like(other: &Dense) -> Self {
        Dense { w: Array2::zeros(other.w.raw_dim()), b: Array1::zeros(other.b.raw_dim()) }
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

/// Weights of one radiance field.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldParams {
    pub cfg: FieldConfig,
    pub trunk: Vec<Dense>,
    pub sigma_head: Dense,
    /// Linear feature layer feeding the color branch (no activation).
    pub feature: Dense,
    pub color_hidden: Dense,
    pub color_out: Dense,
}

impl FieldParams {
    /// Seedable uniform init, `+-sqrt(6/(fan_in+fan_out))`, zero biases.
    pub fn init(cfg: FieldConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut trunk = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let fan_in = if i == 0 {
                cfg.trunk_in()
            } else if i == cfg.skip {
                cfg.width + cfg.trunk_in()
            } else {
                cfg.width
            };
            trunk.push(Dense::init(&mut rng, fan_in, cfg.width));
        }
        let sigma_head = Dense::init(&mut rng, cfg.width, 1);
        let feature = Dense::init(&mut rng, cfg.width, cfg.width);
        let color_hidden = Dense::init(&mut rng, cfg.width + cfg.dir_dim(), cfg.color_width);
        let color_out = Dense::init(&mut rng, cfg.color_width, 3);
        FieldParams { cfg, trunk, sigma_head, feature, color_hidden, color_out }
    }

    pub fn zeros(cfg: FieldConfig) -> Self {
        let mut p = Self::init(cfg, 0);
        for (_, d) in p.layers_mut() {
            d.w.fill(0.0);
            d.b.fill(0.0);
        }
        p
    }

    /// Named layers in a fixed order (also the serialization order).
    pub fn layers(&self) -> Vec<(String, &Dense)> {
        let mut v: Vec<(String, &Dense)> =
            self.trunk.iter().enumerate().map(|(i, d)| (format!("trunk{i}"), d)).collect();
        v.push(("sigma_head".into(), &self.sigma_head));
        v.push(("feature".into(), &self.feature));
        v.push(("color_hidden".into(), &self.color_hidden));
        v.push(("color_out".into(), &self.color_out));
        v
    }

    pub fn layers_mut(&mut self) -> Vec<(String, &mut Dense)> {
        let mut v: Vec<(String, &mut Dense)> =
            self.trunk.iter_mut().enumerate().map(|(i, d)| (format!("trunk{i}"), d)).collect();
        v.push(("sigma_head".into(), &mut self.sigma_head));
        v.push(("feature".into(), &mut self.feature));
        v.push(("color_hidden".into(), &mut self.color_hidden));
        v.push(("color_out".into(), &mut self.color_out));
        v
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|(_, d)| d.param_count()).sum()
    }

    /// Fails with the layer name if any weight or bias is non-finite.
    pub fn validate(&self) -> Result<(), FieldError> {
        for (name, d) in self.layers() {
            if !d.w.iter().all(|x| x.is_finite()) || !d.b.iter().all(|x| x.is_finite()) {
                return Err(FieldError::NonFiniteParam(name));
            }
        }
        Ok(())
    }
}

/// Raw and activated outputs of one field evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldOutput {
    /// Pre-activation density; unbounded. Density noise, when enabled, is
    /// added here before the ReLU (see [`crate::render::add_density_noise`]).
    pub sigma_raw: f64,
    /// Activated density, `max(0, sigma_raw)`.
    pub sigma: f64,
    pub rgb: [f64; 3],
}

/// Activations retained by [`forward_batch`]. Rows correspond to queries.
/// When `keep_hidden` is false only the outputs are stored (enough for
/// rendering; not enough for the backward pass).
pub struct FieldTrace {
    pub x_enc: Array2<f64>,
    pub d_enc: Array2<f64>,
    /// Post-ReLU trunk activations, one per trunk layer.
    pub trunk: Vec<Array2<f64>>,
    /// Linear feature layer output.
    pub feature: Array2<f64>,
    /// Post-ReLU color hidden activation.
    pub color_hidden: Array2<f64>,
    /// Post-sigmoid colors, shape (n, 3).
    pub rgb: Array2<f64>,
    /// Pre-activation densities, shape (n,).
    pub sigma_raw: Array1<f64>,
}

fn relu_inplace(a: &mut Array2<f64>) {
    a.mapv_inplace(|x| if x > 0.0 { x } else { 0.0 });
}

fn affine(x: &Array2<f64>, layer: &Dense) -> Array2<f64> {
    let mut y = x.dot(&layer.w);
    y += &layer.b;
    y
}

/// Batched forward pass. `x_enc` is the encoded trunk input (position, plus
/// time for the baseline variant); `d_enc` the encoded direction, one row
/// per query.
pub fn forward_batch(
    params: &FieldParams,
    x_enc: Array2<f64>,
    d_enc: Array2<f64>,
    keep_hidden: bool,
) -> FieldTrace {
    let cfg = &params.cfg;
    let mut trunk_acts: Vec<Array2<f64>> = Vec::with_capacity(cfg.depth);
    for (i, layer) in params.trunk.iter().enumerate() {
        let mut y = if i == 0 {
            affine(&x_enc, layer)
        } else if i == cfg.skip {
            let joined =
                ndarray::concatenate(Axis(1), &[trunk_acts[i - 1].view(), x_enc.view()])
                    .expect("skip concat");
            affine(&joined, layer)
        } else {
            affine(&trunk_acts[i - 1], layer)
        };
        relu_inplace(&mut y);
        trunk_acts.push(y);
    }

    let last = trunk_acts.last().expect("depth >= 1");
    let sigma_raw = affine(last, &params.sigma_head).index_axis_move(Axis(1), 0).to_owned();
    let feature = affine(last, &params.feature);
    let color_in =
        ndarray::concatenate(Axis(1), &[feature.view(), d_enc.view()]).expect("color concat");
    let mut color_hidden = affine(&color_in, &params.color_hidden);
    relu_inplace(&mut color_hidden);
    let mut rgb = affine(&color_hidden, &params.color_out);
    rgb.mapv_inplace(|x| 1.0 / (1.0 + (-x).exp()));

    if !keep_hidden {
        return FieldTrace {
            x_enc: Array2::zeros((0, 0)),
            d_enc: Array2::zeros((0, 0)),
            trunk: Vec::new(),
            feature: Array2::zeros((0, 0)),
            color_hidden: Array2::zeros((0, 0)),
            rgb,
            sigma_raw,
        };
    }
    FieldTrace { x_enc, d_enc, trunk: trunk_acts, feature, color_hidden, rgb, sigma_raw }
}

/// Gradients shaped like [`FieldParams`], ordered like
/// [`FieldParams::layers`]: trunk layers, sigma head, feature, color hidden,
/// color out.
pub type FieldGrads = Vec<Dense>;

/// Input-side gradients produced by [`backward_batch`] when requested; used
/// for the pose chain of the dynamic field.
pub struct InputGrads {
    pub x_enc: Array2<f64>,
    pub d_enc: Array2<f64>,
}

/// Reverse pass through the MLP given output adjoints. `d_sigma_raw` is the
/// gradient with respect to the pre-activation density, `d_rgb` with respect
/// to the post-sigmoid color. The trace must have been produced with
/// `keep_hidden = true`.
pub fn backward_batch(
    params: &FieldParams,
    trace: &FieldTrace,
    d_sigma_raw: &Array1<f64>,
    d_rgb: &Array2<f64>,
    want_input_grads: bool,
) -> (FieldGrads, Option<InputGrads>) {
    let cfg = &params.cfg;
    let n = trace.sigma_raw.len();
    debug_assert!(!trace.trunk.is_empty(), "backward needs retained activations");

    // Sigmoid adjoint: dz = d_rgb * rgb * (1 - rgb).
    let mut dz_rgb = d_rgb.clone();
    ndarray::Zip::from(&mut dz_rgb).and(&trace.rgb).for_each(|g, &y| *g *= y * (1.0 - y));

    let grad_color_out = Dense {
        w: trace.color_hidden.t().dot(&dz_rgb),
        b: dz_rgb.sum_axis(Axis(0)),
    };
    let mut d_hidden = dz_rgb.dot(&params.color_out.w.t());
    ndarray::Zip::from(&mut d_hidden)
        .and(&trace.color_hidden)
        .for_each(|g, &y| if y <= 0.0 { *g = 0.0 });

    // color_hidden consumed [feature | d_enc]; compute its weight gradient
    // blockwise to avoid re-materializing the concatenation.
    let w = cfg.width;
    let mut grad_color_hidden = Dense::zeros_like(&params.color_hidden);
    grad_color_hidden.w.slice_mut(s![..w, ..]).assign(&trace.feature.t().dot(&d_hidden));
    grad_color_hidden.w.slice_mut(s![w.., ..]).assign(&trace.d_enc.t().dot(&d_hidden));
    grad_color_hidden.b = d_hidden.sum_axis(Axis(0));
    let d_color_in = d_hidden.dot(&params.color_hidden.w.t());
    let d_feature = d_color_in.slice(s![.., ..w]).to_owned();
    let d_d_enc = d_color_in.slice(s![.., w..]).to_owned();

    let last = trace.trunk.last().unwrap();
    let grad_feature = Dense { w: last.t().dot(&d_feature), b: d_feature.sum_axis(Axis(0)) };
    let mut d_last = d_feature.dot(&params.feature.w.t());

    // Density head: sigma_raw = last . w_sigma + b_sigma.
    let d_sig = d_sigma_raw.view().insert_axis(Axis(1)).to_owned();
    let grad_sigma = Dense { w: last.t().dot(&d_sig), b: d_sig.sum_axis(Axis(0)) };
    d_last += &d_sig.dot(&params.sigma_head.w.t());

    // Trunk, deepest layer first.
    let mut grad_trunk: Vec<Dense> =
        params.trunk.iter().map(Dense::zeros_like).collect();
    let mut d_x_enc = want_input_grads.then(|| Array2::zeros((n, cfg.trunk_in())));
    let mut d_out = d_last;
    for i in (0..cfg.depth).rev() {
        ndarray::Zip::from(&mut d_out)
            .and(&trace.trunk[i])
            .for_each(|g, &y| if y <= 0.0 { *g = 0.0 });
        if i == 0 {
            grad_trunk[i].w = trace.x_enc.t().dot(&d_out);
            grad_trunk[i].b = d_out.sum_axis(Axis(0));
            if let Some(dx) = d_x_enc.as_mut() {
                *dx += &d_out.dot(&params.trunk[i].w.t());
            }
            break;
        } else if i == cfg.skip {
            grad_trunk[i].w.slice_mut(s![..w, ..]).assign(&trace.trunk[i - 1].t().dot(&d_out));
            grad_trunk[i].w.slice_mut(s![w.., ..]).assign(&trace.x_enc.t().dot(&d_out));
            grad_trunk[i].b = d_out.sum_axis(Axis(0));
            let d_in = d_out.dot(&params.trunk[i].w.t());
            if let Some(dx) = d_x_enc.as_mut() {
                *dx += &d_in.slice(s![.., w..]);
            }
            d_out = d_in.slice(s![.., ..w]).to_owned();
        } else {
            grad_trunk[i].w = trace.trunk[i - 1].t().dot(&d_out);
            grad_trunk[i].b = d_out.sum_axis(Axis(0));
            d_out = d_out.dot(&params.trunk[i].w.t());
        }
    }

    let mut grads = grad_trunk;
    grads.push(grad_sigma);
    grads.push(grad_feature);
    grads.push(grad_color_hidden);
    grads.push(grad_color_out);

    let input_grads = d_x_enc.map(|x_enc| InputGrads { x_enc, d_enc: d_d_enc });
    (grads, input_grads)
}

/// A single field query. `t_enc` is only consumed by time-conditioned
/// baseline fields.
pub struct Query {
    pub p: [f64; 3],
    pub d: [f64; 3],
    pub t_enc: Option<Vec<f64>>,
}

/// Evaluates the field on one query. Direction must be unit within 1e-6.
pub fn field_forward(params: &FieldParams, query: &Query) -> Result<FieldOutput, FieldError> {
    Ok(batch_forward(params, std::slice::from_ref(query))?[0])
}

/// Elementwise-equal, order-preserving batched version of [`field_forward`].
pub fn batch_forward(
    params: &FieldParams,
    queries: &[Query],
) -> Result<Vec<FieldOutput>, FieldError> {
    params.validate()?;
    let cfg = &params.cfg;
    let n = queries.len();
    let mut x_enc = Array2::zeros((n, cfg.trunk_in()));
    let mut d_enc = Array2::zeros((n, cfg.dir_dim()));
    for (i, q) in queries.iter().enumerate() {
        let norm = (q.d[0] * q.d[0] + q.d[1] * q.d[1] + q.d[2] * q.d[2]).sqrt();
        debug_assert!((norm - 1.0).abs() < 1e-6, "direction must be unit, |d| = {norm}");
        let pe = encode(&q.p, cfg.enc.l_pos, cfg.enc.include_input);
        x_enc.slice_mut(s![i, ..pe.len()]).assign(&Array1::from_vec(pe));
        if cfg.time_input {
            let te = q.t_enc.clone().unwrap_or_else(|| vec![0.0; cfg.time_dim()]);
            if te.len() != cfg.time_dim() {
                return Err(FieldError::ShapeMismatch {
                    layer: "trunk0".into(),
                    expected: cfg.time_dim(),
                    got: te.len(),
                });
            }
            x_enc.slice_mut(s![i, cfg.pos_dim()..]).assign(&Array1::from_vec(te));
        }
        let de = encode(&q.d, cfg.enc.l_dir, cfg.enc.include_input);
        d_enc.row_mut(i).assign(&Array1::from_vec(de));
    }
    let trace = forward_batch(params, x_enc, d_enc, false);
    Ok((0..n)
        .map(|i| {
            let sigma_raw = trace.sigma_raw[i];
            FieldOutput {
                sigma_raw,
                sigma: sigma_raw.max(0.0),
                rgb: [trace.rgb[[i, 0]], trace.rgb[[i, 1]], trace.rgb[[i, 2]]],
            }
        })
        .collect())
}

/// Maps a frame index to the encoded time input of the baseline variant:
/// the index is projected affinely onto [-1, 1] and frequency-encoded.
pub fn encode_time(frame: usize, frame_count: usize, enc: &EncodingConfig) -> Vec<f64> {
    let t = if frame_count <= 1 {
        0.0
    } else {
        2.0 * frame as f64 / (frame_count as f64 - 1.0) - 1.0
    };
    encode(&[t], enc.l_time, enc.include_input)
}
