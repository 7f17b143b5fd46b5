//! Multilayer perceptrons used as generator, encoder and joint discriminator.
//!
//! Parameters live in `ndarray` matrices so the batched kernels in
//! [`crate::dense`] can use them directly; [`Mlp::lift`] copies them onto a
//! [`Tape`] when scalar-level derivatives are needed.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdError, Tape, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error(transparent)]
    Autodiff(#[from] AdError),
    #[error("parameter file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("parameter file: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    None,
    Sigmoid,
    Tanh,
}

impl OutputActivation {
    pub fn apply(self, a: f64) -> f64 {
        match self {
            OutputActivation::None => a,
            OutputActivation::Sigmoid => crate::autodiff::sigmoid(a),
            OutputActivation::Tanh => a.tanh(),
        }
    }

    /// Derivative expressed through the activation's output `y`.
    pub fn slope_from_output(self, y: f64) -> f64 {
        match self {
            OutputActivation::None => 1.0,
            OutputActivation::Sigmoid => y * (1.0 - y),
            OutputActivation::Tanh => 1.0 - y * y,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub layer_sizes: Vec<usize>,
    pub leaky_slope: f64,
    pub output_activation: OutputActivation,
}

impl MlpConfig {
    /// `input -> width x hidden -> output`, i.e. `hidden + 1` affine layers.
    pub fn uniform(
        input: usize,
        width: usize,
        hidden: usize,
        output: usize,
        leaky_slope: f64,
        output_activation: OutputActivation,
    ) -> Self {
        let mut layer_sizes = vec![input];
        layer_sizes.extend(std::iter::repeat_n(width, hidden));
        layer_sizes.push(output);
        Self {
            layer_sizes,
            leaky_slope,
            output_activation,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layer_sizes.len() < 2 {
            return Err(ModelError::InvalidConfig(
                "need at least an input and an output layer".into(),
            ));
        }
        if self.layer_sizes.contains(&0) {
            return Err(ModelError::InvalidConfig("layer sizes must be >= 1".into()));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(ModelError::InvalidConfig(format!(
                "leaky slope {} not in (0, 1)",
                self.leaky_slope
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }
}

/// One affine layer: `w` is `out x in`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Layer {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            w: Array2::zeros((n_out, n_in)),
            b: Array1::zeros(n_out),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub config: MlpConfig,
    pub layers: Vec<Layer>,
}

impl Mlp {
    pub fn zeros(config: MlpConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let layers = config
            .layer_sizes
            .windows(2)
            .map(|p| Layer::zeros(p[0], p[1]))
            .collect();
        Ok(Self { config, layers })
    }

    /// Glorot-uniform weights in `[-a, a]`, `a = sqrt(6 / (fan_in + fan_out))`;
    /// zero biases.
    pub fn init<R: Rng + ?Sized>(config: MlpConfig, rng: &mut R) -> Result<Self, ModelError> {
        let mut mlp = Self::zeros(config)?;
        for layer in &mut mlp.layers {
            let (fan_out, fan_in) = layer.w.dim();
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
            layer.w.iter_mut().for_each(|w| *w = dist.sample(rng));
        }
        Ok(mlp)
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Parameters in canonical order: per layer, `w` row-major then `b`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<(), ModelError> {
        if flat.len() != self.num_params() {
            return Err(ModelError::Dimension {
                expected: self.num_params(),
                got: flat.len(),
            });
        }
        let mut it = flat.iter();
        for l in &mut self.layers {
            l.w.iter_mut().for_each(|w| *w = *it.next().unwrap());
            l.b.iter_mut().for_each(|b| *b = *it.next().unwrap());
        }
        Ok(())
    }

    /// Copies every parameter onto `tape` as a leaf.
    pub fn lift(&self, tape: &mut Tape) -> LiftedMlp {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let w = l
                    .w
                    .rows()
                    .into_iter()
                    .map(|row| row.iter().map(|&v| tape.lift(v)).collect())
                    .collect();
                let b = l.b.iter().map(|&v| tape.lift(v)).collect();
                (w, b)
            })
            .collect();
        LiftedMlp {
            config: self.config.clone(),
            layers,
        }
    }

    /// Tape forward pass with the parameters lifted as fresh leaves.
    pub fn forward(&self, tape: &mut Tape, input: &[Var]) -> Result<Vec<Var>, ModelError> {
        self.lift(tape).forward(tape, input)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&MlpFile::from(self)).expect("plain numeric data serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, ModelError> {
        let file: MlpFile = serde_json::from_str(s)?;
        file.try_into()
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// [`Mlp`] parameters as tape leaves.
#[derive(Debug, Clone)]
pub struct LiftedMlp {
    pub config: MlpConfig,
    layers: Vec<(Vec<Vec<Var>>, Vec<Var>)>,
}

impl LiftedMlp {
    /// Leaves in the same order as [`Mlp::to_flat`].
    pub fn params(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            for row in w {
                out.extend(row.iter().copied());
            }
            out.extend(b.iter().copied());
        }
        out
    }

    pub fn forward(&self, tape: &mut Tape, input: &[Var]) -> Result<Vec<Var>, ModelError> {
        if input.len() != self.config.input_dim() {
            return Err(ModelError::Dimension {
                expected: self.config.input_dim(),
                got: input.len(),
            });
        }
        let last = self.layers.len() - 1;
        let mut h: Vec<Var> = input.to_vec();
        for (li, (w, b)) in self.layers.iter().enumerate() {
            let mut next = Vec::with_capacity(b.len());
            for (row, &bias) in w.iter().zip(b) {
                let a = tape.dot(Some(bias), row, &h);
                let out = if li < last {
                    tape.leaky_relu(a, self.config.leaky_slope)
                } else {
                    match self.config.output_activation {
                        OutputActivation::None => a,
                        OutputActivation::Sigmoid => tape.sigmoid(a),
                        OutputActivation::Tanh => tape.tanh(a),
                    }
                };
                next.push(out);
            }
            h = next;
        }
        Ok(h)
    }
}

/// Discriminator over joint `(x, z)` tuples. Its single output is the raw
/// pre-activation ("logit"); `D(x, z) = sigmoid(logit)`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointDiscriminator {
    pub body: Mlp,
    pub x_dim: usize,
}

impl JointDiscriminator {
    pub fn new(body: Mlp, x_dim: usize) -> Result<Self, ModelError> {
        if body.output_dim() != 1 {
            return Err(ModelError::Dimension {
                expected: 1,
                got: body.output_dim(),
            });
        }
        if body.config.output_activation != OutputActivation::None {
            return Err(ModelError::InvalidConfig(
                "discriminator body must end in a raw affine output".into(),
            ));
        }
        if x_dim == 0 || x_dim >= body.input_dim() {
            return Err(ModelError::InvalidConfig(format!(
                "x_dim {x_dim} must leave room for a latent slot in input {}",
                body.input_dim()
            )));
        }
        Ok(Self { body, x_dim })
    }

    pub fn z_dim(&self) -> usize {
        self.body.input_dim() - self.x_dim
    }
}

/// Pre-activation output of a (lifted) joint discriminator at `(x, z)`.
pub fn disc_logit(
    d: &LiftedMlp,
    x: &[Var],
    z: &[Var],
    tape: &mut Tape,
) -> Result<Var, ModelError> {
    let mut input = Vec::with_capacity(x.len() + z.len());
    input.extend_from_slice(x);
    input.extend_from_slice(z);
    Ok(d.forward(tape, &input)?[0])
}

/// Hidden-layer shape shared by the three toy networks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub leaky_slope: f64,
}

impl Default for ArchConfig {
    /// Four affine layers (three hidden of width 64), leaky slope 0.2.
    fn default() -> Self {
        Self {
            hidden_width: 64,
            hidden_layers: 3,
            leaky_slope: 0.2,
        }
    }
}

/// Generator `G: z -> x`, encoder `E: x -> z` and joint discriminator.
#[derive(Debug, Clone, PartialEq)]
pub struct BiGan {
    pub generator: Mlp,
    pub encoder: Mlp,
    pub disc: JointDiscriminator,
}

impl BiGan {
    /// Initializes G, E, D in that order from `rng`. The encoder ends in
    /// `tanh` so encodings stay inside the latent box `[-1, 1]^z_dim`.
    pub fn init<R: Rng + ?Sized>(
        arch: &ArchConfig,
        x_dim: usize,
        z_dim: usize,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        let w = arch.hidden_width;
        let h = arch.hidden_layers;
        let s = arch.leaky_slope;
        let generator = Mlp::init(
            MlpConfig::uniform(z_dim, w, h, x_dim, s, OutputActivation::None),
            rng,
        )?;
        let encoder = Mlp::init(
            MlpConfig::uniform(x_dim, w, h, z_dim, s, OutputActivation::Tanh),
            rng,
        )?;
        let body = Mlp::init(
            MlpConfig::uniform(x_dim + z_dim, w, h, 1, s, OutputActivation::None),
            rng,
        )?;
        Ok(Self {
            generator,
            encoder,
            disc: JointDiscriminator::new(body, x_dim)?,
        })
    }

    pub fn x_dim(&self) -> usize {
        self.disc.x_dim
    }

    pub fn z_dim(&self) -> usize {
        self.disc.z_dim()
    }

    /// Zeroes the generator's last weight matrix and sets its bias to `point`,
    /// so every latent maps to the same data-space point.
    pub fn collapse_generator(&mut self, point: &[f64]) -> Result<(), ModelError> {
        let last = self.generator.layers.last_mut().unwrap();
        if point.len() != last.b.len() {
            return Err(ModelError::Dimension {
                expected: last.b.len(),
                got: point.len(),
            });
        }
        last.w.fill(0.0);
        last.b = Array1::from(point.to_vec());
        Ok(())
    }
}

/// Snapshot file layout of a [`BiGan`].
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BiGanFile {
    x_dim: usize,
    generator: MlpFile,
    encoder: MlpFile,
    disc: MlpFile,
}

impl BiGan {
    pub fn to_json(&self) -> String {
        let file = BiGanFile {
            x_dim: self.disc.x_dim,
            generator: MlpFile::from(&self.generator),
            encoder: MlpFile::from(&self.encoder),
            disc: MlpFile::from(&self.disc.body),
        };
        serde_json::to_string(&file).expect("plain numeric data serializes")
    }

    /// Parses a snapshot and checks that the three networks fit together.
    pub fn from_json(s: &str) -> Result<Self, ModelError> {
        let f: BiGanFile = serde_json::from_str(s)?;
        let m = BiGan {
            generator: f.generator.try_into()?,
            encoder: f.encoder.try_into()?,
            disc: JointDiscriminator::new(f.disc.try_into()?, f.x_dim)?,
        };
        let (x, z) = (m.x_dim(), m.z_dim());
        for (got, want) in [
            (m.generator.input_dim(), z),
            (m.generator.output_dim(), x),
            (m.encoder.input_dim(), x),
            (m.encoder.output_dim(), z),
        ] {
            if got != want {
                return Err(ModelError::Dimension {
                    expected: want,
                    got,
                });
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerFile {
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MlpFile {
    config: MlpConfig,
    layers: Vec<LayerFile>,
}

impl From<&Mlp> for MlpFile {
    fn from(m: &Mlp) -> Self {
        MlpFile {
            config: m.config.clone(),
            layers: m
                .layers
                .iter()
                .map(|l| LayerFile {
                    w: l.w.rows().into_iter().map(|r| r.to_vec()).collect(),
                    b: l.b.to_vec(),
                })
                .collect(),
        }
    }
}

impl TryFrom<MlpFile> for Mlp {
    type Error = ModelError;

    fn try_from(f: MlpFile) -> Result<Self, ModelError> {
        let mut mlp = Mlp::zeros(f.config)?;
        if f.layers.len() != mlp.layers.len() {
            return Err(ModelError::Dimension {
                expected: mlp.layers.len(),
                got: f.layers.len(),
            });
        }
        for (dst, src) in mlp.layers.iter_mut().zip(f.layers) {
            let (rows, cols) = dst.w.dim();
            if src.w.len() != rows || src.b.len() != rows {
                return Err(ModelError::Dimension {
                    expected: rows,
                    got: src.w.len(),
                });
            }
            for (r, row) in src.w.iter().enumerate() {
                if row.len() != cols {
                    return Err(ModelError::Dimension {
                        expected: cols,
                        got: row.len(),
                    });
                }
                for (c, &v) in row.iter().enumerate() {
                    dst.w[[r, c]] = v;
                }
            }
            dst.b = Array1::from(src.b);
        }
        Ok(mlp)
    }
}
