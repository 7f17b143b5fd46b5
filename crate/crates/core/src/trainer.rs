//! Adam and the alternating discriminator / encoder-generator training loop.
//!
//! Every random draw comes from streams derived from the run seed (see
//! [`rng_stream`]): parameter initialization, training batches and penalty
//! coefficients, the fixed evaluation set, and the evaluation-time penalty
//! coefficients each get their own stream, so adding an evaluation point
//! never shifts the training sequence.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dense::{self, Grads};
use crate::evaluation::{self, EvalConfig, InversionError, ModeCoverageReport};
use crate::models::{ArchConfig, BiGan, Mlp, ModelError};
use crate::objectives::{disc_step, gen_enc_step, BatchTuples, ObjectiveSpec};
use crate::toydata::{LatentSpec, ToyDistribution};
use crate::{rng_stream, SimRng};

const STREAM_INIT: u64 = 0;
const STREAM_TRAIN: u64 = 1;
const STREAM_EVAL_SET: u64 = 2;
const STREAM_EVAL_EPS: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-4,
            beta1: 0.5,
            beta2: 0.9,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(format!("adam.alpha {} must be > 0", self.alpha));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(format!("adam.{name} {b} must lie in [0, 1)"));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(format!("adam.epsilon {} must be > 0", self.epsilon));
        }
        Ok(())
    }
}

/// First and second moment estimates for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn for_mlp(mlp: &Mlp) -> Self {
        Self::new(mlp.num_params())
    }
}

struct Corrections {
    c1: f64,
    c2: f64,
}

impl Corrections {
    fn advance(state: &mut AdamState, h: &AdamConfig) -> Self {
        state.t += 1;
        let t = state.t.min(i32::MAX as u64) as i32;
        Self {
            c1: 1.0 - h.beta1.powi(t),
            c2: 1.0 - h.beta2.powi(t),
        }
    }
}

#[inline]
fn adam_update(p: &mut f64, g: f64, m: &mut f64, v: &mut f64, h: &AdamConfig, c: &Corrections) {
    *m = h.beta1 * *m + (1.0 - h.beta1) * g;
    *v = h.beta2 * *v + (1.0 - h.beta2) * g * g;
    let m_hat = *m / c.c1;
    let v_hat = *v / c.c2;
    *p -= h.alpha * m_hat / (v_hat.sqrt() + h.epsilon);
}

/// One Adam update of `params` in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, hyper: &AdamConfig) {
    assert_eq!(params.len(), grads.len(), "parameter/gradient length");
    assert_eq!(params.len(), state.m.len(), "parameter/state length");
    let c = Corrections::advance(state, hyper);
    for (i, (p, &g)) in params.iter_mut().zip(grads).enumerate() {
        adam_update(p, g, &mut state.m[i], &mut state.v[i], hyper, &c);
    }
}

/// [`adam_step`] on an [`Mlp`], in [`Mlp::to_flat`] order.
pub fn adam_step_mlp(mlp: &mut Mlp, grads: &Grads, state: &mut AdamState, hyper: &AdamConfig) {
    assert_eq!(mlp.num_params(), state.m.len(), "parameter/state length");
    let c = Corrections::advance(state, hyper);
    let mut i = 0;
    for (layer, g) in mlp.layers.iter_mut().zip(&grads.layers) {
        assert_eq!(layer.w.dim(), g.w.dim());
        for (p, &gv) in layer.w.iter_mut().zip(g.w.iter()).chain(layer.b.iter_mut().zip(g.b.iter())) {
            adam_update(p, gv, &mut state.m[i], &mut state.v[i], hyper, &c);
            i += 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub adam: AdamConfig,
    pub objective: ObjectiveSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Start G at a constant output (the first mode center).
    #[serde(default)]
    pub collapse_init: bool,
    #[serde(default)]
    pub arch: ArchConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_steps() -> usize {
    40_000
}

fn default_batch() -> usize {
    256
}

fn default_eval_every() -> usize {
    1000
}

impl TrainConfig {
    pub fn new(objective: ObjectiveSpec) -> Self {
        Self {
            steps: default_steps(),
            batch_size: default_batch(),
            adam: AdamConfig::default(),
            objective,
            seed: 0,
            eval_every: default_eval_every(),
            collapse_init: false,
            arch: ArchConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    /// `steps = 0` is allowed and yields the initial evaluation only.
    pub fn validate(&self) -> Result<(), String> {
        if self.batch_size == 0 {
            return Err("batch_size must be >= 1".into());
        }
        if self.eval_every == 0 {
            return Err("eval_every must be >= 1".into());
        }
        if self.arch.hidden_width == 0 {
            return Err("arch.hidden_width must be >= 1".into());
        }
        self.adam.validate()?;
        self.objective.validate()?;
        self.eval.validate()
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("run aborted at step {}: {}", .0.step, .0.reason)]
    Aborted(Box<TrainAbort>),
}

/// A run stopped by a non-finite loss or gradient. `partial` holds everything
/// recorded so far plus a snapshot of the networks at the failing step.
#[derive(Debug, Clone)]
pub struct TrainAbort {
    pub step: usize,
    pub reason: String,
    pub partial: RunArtifacts,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub step: usize,
    pub model: BiGan,
}

/// One evaluation point. Losses are measured on a fixed held-out batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub loss_d: f64,
    pub loss_eg: f64,
    /// Unscaled penalty term, 0 without a penalty.
    pub penalty: f64,
    pub modes_captured: usize,
    pub hq_fraction: f64,
    pub x_l2: f64,
    pub z_l2: f64,
}

pub const METRICS_HEADER: &str = "step,lossD,lossEG,penalty,modes_captured,hq_fraction,x_l2,z_l2";

impl MetricRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step, self.loss_d, self.loss_eg, self.penalty, self.modes_captured, self.hq_fraction, self.x_l2, self.z_l2
        )
    }

    pub fn parse_csv_line(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 8 {
            return None;
        }
        Some(Self {
            step: f[0].parse().ok()?,
            loss_d: f[1].parse().ok()?,
            loss_eg: f[2].parse().ok()?,
            penalty: f[3].parse().ok()?,
            modes_captured: f[4].parse().ok()?,
            hq_fraction: f[5].parse().ok()?,
            x_l2: f[6].parse().ok()?,
            z_l2: f[7].parse().ok()?,
        })
    }
}

/// Losses of one training step. `loss_d` and `penalty` are means over the
/// step's discriminator updates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub loss_d: f64,
    pub penalty: f64,
    pub loss_eg: f64,
    pub d_updates: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub config: TrainConfig,
    /// One snapshot per evaluation point, plus a diagnostic one on abort.
    pub snapshots: Vec<Snapshot>,
    /// Per training step.
    pub loss_d: Vec<f64>,
    pub loss_eg: Vec<f64>,
    pub penalty: Vec<f64>,
    pub metrics: Vec<MetricRow>,
    /// Coverage report of the last evaluation point.
    pub final_coverage: Option<ModeCoverageReport>,
    pub d_updates: usize,
    pub rng_seed: u64,
}

impl RunArtifacts {
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for r in &self.metrics {
            out.push_str(&r.csv_line());
            out.push('\n');
        }
        out
    }

    /// Per-step losses of each network.
    pub fn losses_csv(&self) -> String {
        let mut out = String::from("step,lossD,lossEG,penalty\n");
        for i in 0..self.loss_d.len() {
            let _ = writeln!(out, "{},{},{},{}", i + 1, self.loss_d[i], self.loss_eg[i], self.penalty[i]);
        }
        out
    }

    pub fn final_model(&self) -> Option<&BiGan> {
        self.snapshots.last().map(|s| &s.model)
    }

    /// Writes `config.json`, `metrics.csv`, `losses.csv` and
    /// `snapshots/step_NNNNNNNN.json` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir.join("snapshots"))?;
        let cfg = serde_json::to_string_pretty(&self.config).expect("config serializes");
        std::fs::write(dir.join("config.json"), cfg + "\n")?;
        std::fs::write(dir.join("metrics.csv"), self.metrics_csv())?;
        std::fs::write(dir.join("losses.csv"), self.losses_csv())?;
        for s in &self.snapshots {
            let path = dir.join("snapshots").join(format!("step_{:08}.json", s.step));
            std::fs::write(path, s.model.to_json())?;
        }
        Ok(())
    }
}

/// Adam state of each network; E and G keep separate states.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizers {
    pub g: AdamState,
    pub e: AdamState,
    pub d: AdamState,
}

impl Optimizers {
    pub fn new(m: &BiGan) -> Self {
        Self {
            g: AdamState::for_mlp(&m.generator),
            e: AdamState::for_mlp(&m.encoder),
            d: AdamState::for_mlp(&m.disc.body),
        }
    }
}

pub fn draw_batch<R: Rng + ?Sized>(dist: &ToyDistribution, latent: &LatentSpec, n: usize, rng: &mut R) -> BatchTuples {
    let real_x = dist.sample(n, rng);
    let z = latent.sample(n, rng);
    BatchTuples { real_x, z }
}

fn check_finite(what: &str, value: f64, grads: &[&Grads]) -> Result<(), String> {
    if !value.is_finite() {
        return Err(format!("non-finite {what} loss {value}"));
    }
    if !grads.iter().all(|g| g.is_finite()) {
        return Err(format!("non-finite {what} gradient"));
    }
    Ok(())
}

/// One discriminator update on a fresh batch. Only `m.disc` changes.
pub fn disc_update<R: Rng + ?Sized>(
    m: &mut BiGan,
    opt: &mut Optimizers,
    config: &TrainConfig,
    dist: &ToyDistribution,
    latent: &LatentSpec,
    rng: &mut R,
) -> Result<(f64, f64), String> {
    let batch = draw_batch(dist, latent, config.batch_size, rng);
    let s = disc_step(&config.objective, m, &batch, rng);
    check_finite("discriminator", s.parts.total, &[&s.grads])?;
    adam_step_mlp(&mut m.disc.body, &s.grads, &mut opt.d, &config.adam);
    Ok((s.parts.total, s.parts.penalty))
}

/// One joint encoder/generator update on a fresh batch. `m.disc` is unchanged.
pub fn gen_enc_update<R: Rng + ?Sized>(
    m: &mut BiGan,
    opt: &mut Optimizers,
    config: &TrainConfig,
    dist: &ToyDistribution,
    latent: &LatentSpec,
    rng: &mut R,
) -> Result<f64, String> {
    let batch = draw_batch(dist, latent, config.batch_size, rng);
    let s = gen_enc_step(&config.objective, m, &batch);
    check_finite("encoder/generator", s.loss, &[&s.grads_g, &s.grads_e])?;
    adam_step_mlp(&mut m.generator, &s.grads_g, &mut opt.g, &config.adam);
    adam_step_mlp(&mut m.encoder, &s.grads_e, &mut opt.e, &config.adam);
    Ok(s.loss)
}

/// `critic_updates_per_gen` discriminator updates, then one joint E,G update.
pub fn train_step<R: Rng + ?Sized>(
    m: &mut BiGan,
    opt: &mut Optimizers,
    config: &TrainConfig,
    dist: &ToyDistribution,
    latent: &LatentSpec,
    rng: &mut R,
) -> Result<StepReport, String> {
    let k = config.objective.critic_updates_per_gen;
    let (mut ld, mut lp) = (0.0, 0.0);
    for _ in 0..k {
        let (l, p) = disc_update(m, opt, config, dist, latent, rng)?;
        ld += l;
        lp += p;
    }
    let le = gen_enc_update(m, opt, config, dist, latent, rng)?;
    Ok(StepReport {
        loss_d: ld / k as f64,
        penalty: lp / k as f64,
        loss_eg: le,
        d_updates: k,
    })
}

/// Fixed data used at every evaluation point.
struct EvalSet {
    real: Array2<f64>,
    latents: Array2<f64>,
    loss_batch: BatchTuples,
    centers: Array2<f64>,
    radius: f64,
}

impl EvalSet {
    fn new(config: &TrainConfig, dist: &ToyDistribution, latent: &LatentSpec) -> Self {
        let mut rng = rng_stream(config.seed, STREAM_EVAL_SET);
        let n = config.eval.n_samples;
        let real = dist.sample(n, &mut rng);
        let latents = latent.sample(n, &mut rng);
        let loss_batch = draw_batch(dist, latent, config.batch_size, &mut rng);
        Self {
            real,
            latents,
            loss_batch,
            centers: evaluation::centers_matrix(dist),
            radius: config.eval.radius_for(dist),
        }
    }

    fn evaluate(&self, m: &BiGan, config: &TrainConfig, step: usize) -> (MetricRow, ModeCoverageReport) {
        let mut eps_rng: SimRng = rng_stream(config.seed, STREAM_EVAL_EPS);
        let d = disc_step(&config.objective, m, &self.loss_batch, &mut eps_rng);
        let eg = gen_enc_step(&config.objective, m, &self.loss_batch);
        let generated = dense::predict(&m.generator, self.latents.view());
        let cov = evaluation::mode_coverage(generated.view(), self.centers.view(), self.radius, config.eval.min_fraction)
            .expect("validated evaluation parameters");
        let InversionError { x_l2, z_l2 } =
            evaluation::inversion_error(&m.generator, &m.encoder, self.real.view(), self.latents.view());
        let row = MetricRow {
            step,
            loss_d: d.parts.total,
            loss_eg: eg.loss,
            penalty: d.parts.penalty,
            modes_captured: cov.modes_captured,
            hq_fraction: cov.hq_fraction,
            x_l2,
            z_l2,
        };
        (row, cov)
    }
}

/// Initial networks for `config`: drawn from the init stream, with the
/// generator collapsed onto the first mode center if requested.
pub fn initial_model(config: &TrainConfig, dist: &ToyDistribution, latent: &LatentSpec) -> Result<BiGan, TrainError> {
    let mut rng = rng_stream(config.seed, STREAM_INIT);
    let mut m = BiGan::init(&config.arch, dist.dim(), latent.dim, &mut rng)?;
    if config.collapse_init {
        m.collapse_generator(&dist.mode_centers()[0])?;
    }
    Ok(m)
}

/// Full training run from freshly initialized networks.
pub fn train(config: &TrainConfig, dist: &ToyDistribution, latent: &LatentSpec) -> Result<RunArtifacts, TrainError> {
    config.validate().map_err(TrainError::Config)?;
    dist.validate().map_err(|e| TrainError::Config(e.to_string()))?;
    let m = initial_model(config, dist, latent)?;
    train_from(config, dist, latent, m)
}

/// Training loop starting from the given networks.
pub fn train_from(
    config: &TrainConfig,
    dist: &ToyDistribution,
    latent: &LatentSpec,
    mut m: BiGan,
) -> Result<RunArtifacts, TrainError> {
    config.validate().map_err(TrainError::Config)?;
    if m.x_dim() != dist.dim() || m.z_dim() != latent.dim {
        return Err(TrainError::Config(format!(
            "networks expect x_dim {} / z_dim {}, data has {} / {}",
            m.x_dim(),
            m.z_dim(),
            dist.dim(),
            latent.dim
        )));
    }
    let eval = EvalSet::new(config, dist, latent);
    let mut art = RunArtifacts {
        config: config.clone(),
        snapshots: Vec::new(),
        loss_d: Vec::with_capacity(config.steps),
        loss_eg: Vec::with_capacity(config.steps),
        penalty: Vec::with_capacity(config.steps),
        metrics: Vec::new(),
        final_coverage: None,
        d_updates: 0,
        rng_seed: config.seed,
    };
    let record = |art: &mut RunArtifacts, m: &BiGan, step: usize| {
        let (row, cov) = eval.evaluate(m, config, step);
        art.metrics.push(row);
        art.final_coverage = Some(cov);
        art.snapshots.push(Snapshot { step, model: m.clone() });
    };
    record(&mut art, &m, 0);

    let mut opt = Optimizers::new(&m);
    let mut rng = rng_stream(config.seed, STREAM_TRAIN);
    for step in 1..=config.steps {
        match train_step(&mut m, &mut opt, config, dist, latent, &mut rng) {
            Ok(r) => {
                art.loss_d.push(r.loss_d);
                art.loss_eg.push(r.loss_eg);
                art.penalty.push(r.penalty);
                art.d_updates += r.d_updates;
            }
            Err(reason) => {
                art.snapshots.push(Snapshot { step, model: m });
                return Err(TrainError::Aborted(Box::new(TrainAbort {
                    step,
                    reason,
                    partial: art,
                })));
            }
        }
        if step % config.eval_every == 0 || step == config.steps {
            record(&mut art, &m, step);
        }
    }
    Ok(art)
}
