//! Inference and correction networks.
//!
//! Both are small U-Nets built from 3x3 convolutions with replicate padding.
//! The K input frames are stacked as channels; an optional first block mixes
//! neighbouring frames with a shared spatiotemporal kernel instead.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::field::{ScalarField, VectorField2};
use crate::grid::SpatialEmbedding;
use crate::scalar::Scalar;

/// Initial value of both learnable inverse numbers.
pub const INITIAL_INVERSE_NUMBER: f64 = 0.01;

pub const THETA_PE: &str = "theta_pe";
pub const THETA_RE: &str = "theta_re";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of past frames fed to the inference network.
    pub window: usize,
    pub inference_widths: Vec<usize>,
    pub correction_widths: Vec<usize>,
    /// Replace channel stacking of frames with a shared spatiotemporal first block.
    pub spatiotemporal: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            window: 4,
            inference_widths: vec![32, 64, 128],
            correction_widths: vec![16, 32],
            spatiotemporal: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Config("model.window must be at least 1".into()));
        }
        if self.spatiotemporal && self.window < 2 {
            return Err(Error::Config(
                "spatiotemporal block needs model.window >= 2".into(),
            ));
        }
        for (name, w) in [
            ("inference_widths", &self.inference_widths),
            ("correction_widths", &self.correction_widths),
        ] {
            if w.is_empty() || w.contains(&0) {
                return Err(Error::Config(format!(
                    "model.{name} must be nonempty and positive"
                )));
            }
        }
        Ok(())
    }

    /// Spatial sizes must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self
            .inference_widths
            .len()
            .max(self.correction_widths.len())
            - 1)
    }
}

#[derive(Debug, Clone)]
struct Conv {
    name: String,
    cin: usize,
    cout: usize,
    kernel: usize,
    stride: usize,
}

impl Conv {
    fn new(name: String, cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        Self {
            name,
            cin,
            cout,
            kernel,
            stride,
        }
    }

    fn weight_name(&self) -> String {
        format!("{}.w", self.name)
    }

    fn bias_name(&self) -> String {
        format!("{}.b", self.name)
    }

    /// Uniform weights with bound `gain * sqrt(3 / fan_in)`, zero bias.
    fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, gain: f64) {
        let fan_in = self.cin * self.kernel * self.kernel;
        let bound = gain * (3.0 / fan_in as f64).sqrt();
        let shape = [self.cout, self.cin, self.kernel, self.kernel];
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                if bound > 0.0 {
                    T::lit(rng.gen_range(-bound..bound))
                } else {
                    T::zero()
                }
            })
            .collect();
        store.insert(
            self.weight_name(),
            Tensor::from_vec(&shape, data).expect("weight shape"),
        );
        store.insert(self.bias_name(), Tensor::zeros(&[self.cout]));
    }

    fn apply<T: Scalar>(&self, g: &Graph<T>, b: &Bindings, x: Var) -> Result<Var> {
        g.conv2d(
            x,
            b.get(&self.weight_name())?,
            Some(b.get(&self.bias_name())?),
            self.stride,
        )
    }

    fn apply_relu<T: Scalar>(&self, g: &Graph<T>, b: &Bindings, x: Var) -> Result<Var> {
        Ok(g.relu(self.apply(g, b, x)?))
    }

    fn numel(&self) -> usize {
        self.cout * (self.cin * self.kernel * self.kernel + 1)
    }
}

const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

/// Encoder/decoder with skip connections. Level `l` runs at `1 / 2^l`
/// resolution with `widths[l]` channels.
#[derive(Debug, Clone)]
struct UNet {
    encoder: Vec<Vec<Conv>>,
    decoder: Vec<Vec<Conv>>,
}

impl UNet {
    fn new(prefix: &str, in_channels: usize, widths: &[usize]) -> Self {
        let mut encoder = Vec::new();
        for (l, &w) in widths.iter().enumerate() {
            let mut level = Vec::new();
            let cin = if l == 0 {
                in_channels
            } else {
                level.push(Conv::new(
                    format!("{prefix}.enc{l}.down"),
                    widths[l - 1],
                    w,
                    3,
                    2,
                ));
                w
            };
            level.push(Conv::new(format!("{prefix}.enc{l}.conv0"), cin, w, 3, 1));
            level.push(Conv::new(format!("{prefix}.enc{l}.conv1"), w, w, 3, 1));
            encoder.push(level);
        }
        let mut decoder = Vec::new();
        for l in (0..widths.len().saturating_sub(1)).rev() {
            let w = widths[l];
            decoder.push(vec![
                Conv::new(format!("{prefix}.dec{l}.up"), widths[l + 1], w, 3, 1),
                Conv::new(format!("{prefix}.dec{l}.conv0"), 2 * w, w, 3, 1),
                Conv::new(format!("{prefix}.dec{l}.conv1"), w, w, 3, 1),
            ]);
        }
        Self { encoder, decoder }
    }

    fn layers(&self) -> impl Iterator<Item = &Conv> {
        self.encoder.iter().chain(&self.decoder).flatten()
    }

    fn forward<T: Scalar>(&self, g: &Graph<T>, b: &Bindings, x: Var) -> Result<Var> {
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut h = x;
        for level in &self.encoder {
            for conv in level {
                h = conv.apply_relu(g, b, h)?;
            }
            skips.push(h);
        }
        skips.pop();
        for level in &self.decoder {
            let up = level[0].apply_relu(g, b, g.upsample2(h)?)?;
            let skip = skips.pop().expect("one skip per decoder level");
            h = g.concat_channels(&[up, skip])?;
            h = level[1].apply_relu(g, b, h)?;
            h = level[2].apply_relu(g, b, h)?;
        }
        Ok(h)
    }
}

/// Latent mid-interval fields as tape variables.
#[derive(Debug, Clone, Copy)]
pub struct LatentVars {
    /// `[1, H, W]`
    pub c_mid: Var,
    /// `[2, H, W]`, x component first.
    pub velocity: Var,
    /// `[1, H, W]`
    pub pressure: Var,
}

/// Latent fields evaluated off the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState<T> {
    pub c_mid: ScalarField<T>,
    pub velocity: VectorField2<T>,
    pub pressure: ScalarField<T>,
}

impl<T: Scalar> LatentState<T> {
    pub fn is_finite(&self) -> bool {
        self.c_mid.is_finite() && self.velocity.is_finite() && self.pressure.is_finite()
    }

    pub(crate) fn from_vars(g: &Graph<T>, vars: &LatentVars) -> Result<Self> {
        let c = g.value(vars.c_mid);
        let (_, h, w) = c.chw().expect("rank 3 latent");
        let u = g.value(vars.velocity).into_data();
        let (ux, uy) = u.split_at(h * w);
        Ok(Self {
            c_mid: ScalarField::from_vec(h, w, c.into_data())?,
            velocity: VectorField2::new(
                ScalarField::from_vec(h, w, ux.to_vec())?,
                ScalarField::from_vec(h, w, uy.to_vec())?,
            )?,
            pressure: ScalarField::from_vec(h, w, g.value(vars.pressure).into_data())?,
        })
    }
}

/// The pair of networks plus the learnable inverse Péclet and Reynolds numbers.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    temporal: Option<Conv>,
    inference: UNet,
    heads: [Conv; 3],
    correction: UNet,
    correction_head: Conv,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let iw = &config.inference_widths;
        let temporal = config
            .spatiotemporal
            .then(|| Conv::new("inf.temporal".into(), 2, iw[0], 3, 1));
        let frame_channels = match &temporal {
            Some(t) => (config.window - 1) * t.cout,
            None => config.window,
        };
        let inference = UNet::new("inf", frame_channels + 4, iw);
        let heads = [
            Conv::new("inf.head_c".into(), iw[0], 1, 1, 1),
            Conv::new("inf.head_u".into(), iw[0], 2, 1, 1),
            Conv::new("inf.head_p".into(), iw[0], 1, 1, 1),
        ];
        let cw = &config.correction_widths;
        let correction = UNet::new("cor", 2, cw);
        let correction_head = Conv::new("cor.head".into(), cw[0], 1, 1, 1);
        Ok(Self {
            config,
            temporal,
            inference,
            heads,
            correction,
            correction_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn window(&self) -> usize {
        self.config.window
    }

    pub fn check_dims(&self, height: usize, width: usize) -> Result<()> {
        let m = self.config.size_multiple();
        if !height.is_multiple_of(m) || !width.is_multiple_of(m) {
            return Err(Error::shape(
                "model",
                format!("grid {height}x{width} is not divisible by {m}"),
            ));
        }
        Ok(())
    }

    fn inference_layers(&self) -> impl Iterator<Item = &Conv> {
        self.temporal
            .iter()
            .chain(self.inference.layers())
            .chain(&self.heads)
    }

    fn correction_layers(&self) -> impl Iterator<Item = &Conv> {
        self.correction
            .layers()
            .chain(std::iter::once(&self.correction_head))
    }

    pub fn inference_param_count(&self) -> usize {
        self.inference_layers().map(Conv::numel).sum()
    }

    pub fn correction_param_count(&self) -> usize {
        self.correction_layers().map(Conv::numel).sum()
    }

    /// Fresh parameters. The correction head starts at zero so the
    /// correction is the identity until training moves it.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let hidden = self
            .temporal
            .iter()
            .chain(self.inference.layers())
            .chain(self.correction.layers());
        for conv in hidden {
            conv.init(&mut store, &mut rng, RELU_GAIN);
        }
        for head in &self.heads {
            head.init(&mut store, &mut rng, 1.0);
        }
        self.correction_head.init(&mut store, &mut rng, 0.0);
        let theta = T::lit(INITIAL_INVERSE_NUMBER.ln());
        store.insert(THETA_PE, Tensor::scalar(theta));
        store.insert(THETA_RE, Tensor::scalar(theta));
        store
    }

    /// Runs the inference network on `K` frames (each `[1, H, W]`) and the
    /// normalized embedding `[4, H, W]`. `c_mid` is predicted as an offset
    /// from the most recent frame.
    pub fn infer<T: Scalar>(
        &self,
        g: &Graph<T>,
        b: &Bindings,
        window: &[Var],
        psi: Var,
    ) -> Result<LatentVars> {
        if window.len() != self.config.window {
            return Err(Error::shape(
                "infer_latent",
                format!(
                    "expected {} frames, got {}",
                    self.config.window,
                    window.len()
                ),
            ));
        }
        let frames = match &self.temporal {
            Some(t) => {
                let mixed = window
                    .windows(2)
                    .map(|pair| t.apply_relu(g, b, g.concat_channels(pair)?))
                    .collect::<Result<Vec<_>>>()?;
                g.concat_channels(&mixed)?
            }
            None => g.concat_channels(window)?,
        };
        let x = g.concat_channels(&[frames, psi])?;
        let features = self.inference.forward(g, b, x)?;
        let offset = self.heads[0].apply(g, b, features)?;
        let last = *window.last().expect("window is nonempty");
        Ok(LatentVars {
            c_mid: g.add(last, offset)?,
            velocity: self.heads[1].apply(g, b, features)?,
            pressure: self.heads[2].apply(g, b, features)?,
        })
    }

    /// `c_prime + delta(c_prime, c_prev)`.
    pub fn correct<T: Scalar>(
        &self,
        g: &Graph<T>,
        b: &Bindings,
        c_prime: Var,
        c_prev: Var,
    ) -> Result<Var> {
        let x = g.concat_channels(&[c_prime, c_prev])?;
        let features = self.correction.forward(g, b, x)?;
        let delta = self.correction_head.apply(g, b, features)?;
        g.add(c_prime, delta)
    }

    pub fn inv_pe<T: Scalar>(&self, g: &Graph<T>, b: &Bindings) -> Result<Var> {
        Ok(g.exp(b.get(THETA_PE)?))
    }

    pub fn inv_re<T: Scalar>(&self, g: &Graph<T>, b: &Bindings) -> Result<Var> {
        Ok(g.exp(b.get(THETA_RE)?))
    }

    /// Off-tape inference on plain fields.
    pub fn infer_latent<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        window: &[ScalarField<T>],
        psi: &SpatialEmbedding<T>,
    ) -> Result<LatentState<T>> {
        let g = Graph::new();
        let b = bind_frozen(params, &g);
        let frames = window
            .iter()
            .map(|f| {
                check_same_dims("infer_latent", f.dims(), psi.dims())?;
                Ok(g.constant(field_tensor(f)))
            })
            .collect::<Result<Vec<_>>>()?;
        let psi = g.constant(embedding_tensor(psi));
        let vars = self.infer(&g, &b, &frames, psi)?;
        LatentState::from_vars(&g, &vars)
    }

    /// Off-tape correction on plain fields.
    pub fn correct_field<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        c_prime: &ScalarField<T>,
        c_prev: &ScalarField<T>,
    ) -> Result<ScalarField<T>> {
        check_same_dims("correct", c_prime.dims(), c_prev.dims())?;
        let g = Graph::new();
        let b = bind_frozen(params, &g);
        let out = self.correct(
            &g,
            &b,
            g.constant(field_tensor(c_prime)),
            g.constant(field_tensor(c_prev)),
        )?;
        let (h, w) = c_prime.dims();
        ScalarField::from_vec(h, w, g.value(out).into_data())
    }
}

fn check_same_dims(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

/// Binds parameters as constants: a forward pass without gradient bookkeeping.
pub fn bind_frozen<T: Scalar>(params: &ParamStore<T>, g: &Graph<T>) -> Bindings {
    Bindings::from_iter(
        params
            .iter()
            .map(|(name, p)| (name.to_string(), g.constant(p.value.clone()))),
    )
}

/// `[1, H, W]` tensor holding a copy of `f`.
pub fn field_tensor<T: Scalar>(f: &ScalarField<T>) -> Tensor<T> {
    let (h, w) = f.dims();
    Tensor::from_vec(&[1, h, w], f.values().to_vec()).expect("field size")
}

/// Network input encoding of the embedding: coordinates as is, distance
/// scaled by the longer side, attribute codes scaled into `[0, 1]`.
pub fn embedding_tensor<T: Scalar>(psi: &SpatialEmbedding<T>) -> Tensor<T> {
    let (h, w) = psi.dims();
    let d_scale = T::one() / T::lit(h.max(w) as f64);
    let half = T::lit(0.5);
    let mut data = Vec::with_capacity(4 * h * w);
    data.extend_from_slice(psi.coord_x.values());
    data.extend_from_slice(psi.coord_y.values());
    data.extend(psi.sdf.values().iter().map(|&d| d * d_scale));
    data.extend(psi.attr.values().iter().map(|&b| b * half));
    Tensor::from_vec(&[4, h, w], data).expect("embedding size")
}
