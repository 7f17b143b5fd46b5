//! Adversarial losses and gradient penalties for joint `(x, z)` discriminators.
//!
//! Each objective exists twice:
//!
//! * on a [`Tape`], built from scalar ops, so any parameter gradient
//!   (including through the discriminator's input gradient) falls out of
//!   [`Tape::backward`];
//! * as a batched closed form ([`disc_step`], [`gen_enc_step`]) on top of
//!   [`crate::dense`], which the trainer uses.
//!
//! Both routes draw their interpolation coefficients from the RNG in the same
//! order, so for equal RNG states they evaluate the same function. The tests
//! compare them against each other and against finite differences.
//!
//! Logits are the discriminator's raw pre-activations; `D = sigmoid(logit)`.
//! Real tuples are `(x, E(x))`, fake tuples `(G(z), z)`.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Tape, Var, PROB_EPS};
use crate::dense::{self, hcat, Grads};
use crate::models::{BiGan, LiftedMlp, ModelError};

type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Vanilla,
    Wasserstein,
    Lol1,
    Lol2,
    DirectModelMse,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Vanilla => "vanilla",
            LossKind::Wasserstein => "wasserstein",
            LossKind::Lol1 => "lol1",
            LossKind::Lol2 => "lol2",
            LossKind::DirectModelMse => "direct_model_mse",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyKind {
    None,
    UniformGp,
    PairwiseGp,
}

impl PenaltyKind {
    pub fn name(self) -> &'static str {
        match self {
            PenaltyKind::None => "none",
            PenaltyKind::UniformGp => "uniform_gp",
            PenaltyKind::PairwiseGp => "pairwise_gp",
        }
    }
}

/// Form of the pair-wise penalty term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyNorm {
    /// `||grad - unit||`
    Unsquared,
    /// `||grad - unit||^2`
    Squared,
}

/// Generator side of the vanilla loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VanillaGenForm {
    /// `-log D(G(z), z) - log(1 - D(x, E(x)))`
    NonSaturating,
    /// `log D(x, E(x)) + log(1 - D(G(z), z))`
    Minimax,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ObjectiveSpecFile", deny_unknown_fields)]
pub struct ObjectiveSpec {
    pub loss_kind: LossKind,
    pub penalty_kind: PenaltyKind,
    pub lambda: f64,
    pub critic_updates_per_gen: usize,
    pub mse_weight: f64,
    pub penalty_norm: PenaltyNorm,
    pub vanilla_gen_form: VanillaGenForm,
    /// Also apply the latent-side pair-wise penalty. Off by default: with a
    /// uniform latent it is not needed.
    pub latent_penalty: bool,
}

impl ObjectiveSpec {
    /// Defaults: `lambda = 0.1`, five critic updates per generator update for
    /// Wasserstein and one otherwise, `mse_weight = 1`.
    pub fn new(loss_kind: LossKind, penalty_kind: PenaltyKind) -> Self {
        Self {
            loss_kind,
            penalty_kind,
            lambda: 0.1,
            critic_updates_per_gen: default_critic_updates(loss_kind),
            mse_weight: 1.0,
            penalty_norm: PenaltyNorm::Unsquared,
            vanilla_gen_form: VanillaGenForm::NonSaturating,
            latent_penalty: false,
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(format!("lambda {} must be finite and >= 0", self.lambda));
        }
        if self.critic_updates_per_gen == 0 {
            return Err("critic_updates_per_gen must be >= 1".into());
        }
        if !(self.mse_weight >= 0.0 && self.mse_weight.is_finite()) {
            return Err(format!("mse_weight {} must be finite and >= 0", self.mse_weight));
        }
        Ok(())
    }
}

fn default_critic_updates(kind: LossKind) -> usize {
    match kind {
        LossKind::Wasserstein => 5,
        _ => 1,
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectiveSpecFile {
    loss_kind: LossKind,
    penalty_kind: PenaltyKind,
    lambda: Option<f64>,
    critic_updates_per_gen: Option<usize>,
    mse_weight: Option<f64>,
    penalty_norm: Option<PenaltyNorm>,
    vanilla_gen_form: Option<VanillaGenForm>,
    latent_penalty: Option<bool>,
}

impl TryFrom<ObjectiveSpecFile> for ObjectiveSpec {
    type Error = String;

    fn try_from(f: ObjectiveSpecFile) -> std::result::Result<Self, String> {
        let d = ObjectiveSpec::new(f.loss_kind, f.penalty_kind);
        let spec = ObjectiveSpec {
            lambda: f.lambda.unwrap_or(d.lambda),
            critic_updates_per_gen: f.critic_updates_per_gen.unwrap_or(d.critic_updates_per_gen),
            mse_weight: f.mse_weight.unwrap_or(d.mse_weight),
            penalty_norm: f.penalty_norm.unwrap_or(d.penalty_norm),
            vanilla_gen_form: f.vanilla_gen_form.unwrap_or(d.vanilla_gen_form),
            latent_penalty: f.latent_penalty.unwrap_or(d.latent_penalty),
            ..d
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// A batch of data points and latents; everything else is derived from the
/// networks on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchTuples {
    pub real_x: Array2<f64>,
    pub z: Array2<f64>,
}

impl BatchTuples {
    pub fn len(&self) -> usize {
        self.real_x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Interpolation coefficients `eps ~ U[0, 1)`, one per sample.
pub fn draw_eps<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>()).collect()
}

/// Below this distance a sample and its reconstruction count as coupled and
/// the pair-wise term for it is zero.
pub const COUPLED_EPS: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Losses on logits, closed form

/// Loss value and its derivative with respect to each real and fake logit.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitLoss {
    pub value: f64,
    pub d_real: Vec<f64>,
    pub d_fake: Vec<f64>,
}

fn clamp_prob(p: f64) -> (f64, bool) {
    if p < PROB_EPS {
        (PROB_EPS, false)
    } else if p > 1.0 - PROB_EPS {
        (1.0 - PROB_EPS, false)
    } else {
        (p, true)
    }
}

/// `-log(clamp(sigmoid(l)))` and its slope in `l`.
fn neg_log_d(l: f64) -> (f64, f64) {
    let p = sigmoid(l);
    let (pc, live) = clamp_prob(p);
    (-pc.ln(), if live { -(1.0 - p) } else { 0.0 })
}

/// `-log(1 - clamp(sigmoid(l)))` and its slope in `l`.
fn neg_log_one_minus_d(l: f64) -> (f64, f64) {
    let p = sigmoid(l);
    let (pc, live) = clamp_prob(p);
    (-(1.0 - pc).ln(), if live { p } else { 0.0 })
}

fn mean_terms(xs: &[f64], f: impl Fn(f64) -> (f64, f64)) -> (f64, Vec<f64>) {
    let n = xs.len() as f64;
    let mut v = 0.0;
    let d = xs
        .iter()
        .map(|&x| {
            let (val, slope) = f(x);
            v += val;
            slope / n
        })
        .collect();
    (v / n, d)
}

pub fn disc_adv_logits(kind: LossKind, real: &[f64], fake: &[f64]) -> LogitLoss {
    let ((vr, d_real), (vf, d_fake)) = match kind {
        LossKind::Vanilla | LossKind::Lol1 | LossKind::DirectModelMse => (
            mean_terms(real, neg_log_d),
            mean_terms(fake, neg_log_one_minus_d),
        ),
        LossKind::Lol2 => (
            mean_terms(real, |l| {
                let p = sigmoid(l);
                ((1.0 - p).powi(2), -2.0 * (1.0 - p) * p * (1.0 - p))
            }),
            mean_terms(fake, |l| {
                let p = sigmoid(l);
                (p * p, 2.0 * p * p * (1.0 - p))
            }),
        ),
        LossKind::Wasserstein => (mean_terms(real, |l| (-l, -1.0)), mean_terms(fake, |l| (l, 1.0))),
    };
    LogitLoss {
        value: vr + vf,
        d_real,
        d_fake,
    }
}

/// Adversarial part of the joint encoder/generator loss.
pub fn gen_adv_logits(
    kind: LossKind,
    form: VanillaGenForm,
    real: &[f64],
    fake: &[f64],
) -> LogitLoss {
    let ((vr, d_real), (vf, d_fake)) = match (kind, form) {
        (LossKind::Vanilla | LossKind::DirectModelMse, VanillaGenForm::NonSaturating) => (
            mean_terms(real, neg_log_one_minus_d),
            mean_terms(fake, neg_log_d),
        ),
        (LossKind::Vanilla | LossKind::DirectModelMse, VanillaGenForm::Minimax) => (
            mean_terms(real, |l| {
                let (v, d) = neg_log_d(l);
                (-v, -d)
            }),
            mean_terms(fake, |l| {
                let (v, d) = neg_log_one_minus_d(l);
                (-v, -d)
            }),
        ),
        (LossKind::Wasserstein | LossKind::Lol1 | LossKind::Lol2, _) => {
            (mean_terms(real, |l| (l, 1.0)), mean_terms(fake, |l| (-l, -1.0)))
        }
    };
    LogitLoss {
        value: vr + vf,
        d_real,
        d_fake,
    }
}

// ---------------------------------------------------------------------------
// Losses on logits, on the tape

fn tape_mean(tape: &mut Tape, xs: &[Var]) -> Var {
    tape.mean(xs)
}

fn tape_neg_log_d(tape: &mut Tape, l: Var) -> Result<Var> {
    let p = tape.sigmoid(l);
    let p = tape.clamp_prob(p);
    let lp = tape.ln(p)?;
    Ok(tape.neg(lp))
}

fn tape_neg_log_one_minus_d(tape: &mut Tape, l: Var) -> Result<Var> {
    let p = tape.sigmoid(l);
    let p = tape.clamp_prob(p);
    let one = tape.lift(1.0);
    let q = tape.sub(one, p);
    let lq = tape.ln(q)?;
    Ok(tape.neg(lq))
}

fn map_mean(
    tape: &mut Tape,
    xs: &[Var],
    mut f: impl FnMut(&mut Tape, Var) -> Result<Var>,
) -> Result<Var> {
    let terms = xs.iter().map(|&x| f(tape, x)).collect::<Result<Vec<_>>>()?;
    Ok(tape_mean(tape, &terms))
}

/// `-mean log D(x, E(x)) - mean log(1 - D(G(z), z))`, probabilities clamped
/// to `[1e-7, 1 - 1e-7]`.
pub fn disc_loss_vanilla(tape: &mut Tape, real: &[Var], fake: &[Var]) -> Result<Var> {
    let a = map_mean(tape, real, tape_neg_log_d)?;
    let b = map_mean(tape, fake, tape_neg_log_one_minus_d)?;
    Ok(tape.add(a, b))
}

/// Non-saturating generator/encoder loss:
/// `-mean log D(G(z), z) - mean log(1 - D(x, E(x)))`.
pub fn gen_enc_loss_vanilla(tape: &mut Tape, real: &[Var], fake: &[Var]) -> Result<Var> {
    let a = map_mean(tape, fake, tape_neg_log_d)?;
    let b = map_mean(tape, real, tape_neg_log_one_minus_d)?;
    Ok(tape.add(a, b))
}

/// Literal minimax form `mean log D(x, E(x)) + mean log(1 - D(G(z), z))`.
pub fn gen_enc_loss_minimax(tape: &mut Tape, real: &[Var], fake: &[Var]) -> Result<Var> {
    let v = disc_loss_vanilla(tape, real, fake)?;
    Ok(tape.neg(v))
}

/// Critic loss `mean critic(G(z), z) - mean critic(x, E(x))` on raw logits.
pub fn disc_loss_wasserstein(tape: &mut Tape, real: &[Var], fake: &[Var]) -> Var {
    let f = tape_mean(tape, fake);
    let r = tape_mean(tape, real);
    tape.sub(f, r)
}

/// `mean critic(x, E(x)) - mean critic(G(z), z)`.
pub fn gen_enc_loss_wasserstein(tape: &mut Tape, real: &[Var], fake: &[Var]) -> Var {
    let r = tape_mean(tape, real);
    let f = tape_mean(tape, fake);
    tape.sub(r, f)
}

/// Logit loss `mean logit(D(x, E(x))) - mean logit(D(G(z), z))`, taken on the
/// pre-activations directly so it never passes through a saturated sigmoid.
pub fn gen_enc_loss_logit(tape: &mut Tape, real: &[Var], fake: &[Var]) -> Var {
    gen_enc_loss_wasserstein(tape, real, fake)
}

/// `mean D(G(z), z)^2 + mean (1 - D(x, E(x)))^2` on sigmoid outputs.
pub fn disc_loss_lol2(tape: &mut Tape, real: &[Var], fake: &[Var]) -> Var {
    let f_terms: Vec<Var> = fake
        .iter()
        .map(|&l| {
            let p = tape.sigmoid(l);
            tape.square(p)
        })
        .collect();
    let r_terms: Vec<Var> = real
        .iter()
        .map(|&l| {
            let p = tape.sigmoid(l);
            let one = tape.lift(1.0);
            let q = tape.sub(one, p);
            tape.square(q)
        })
        .collect();
    let a = tape_mean(tape, &f_terms);
    let b = tape_mean(tape, &r_terms);
    tape.add(a, b)
}

pub fn disc_adv_tape(tape: &mut Tape, kind: LossKind, real: &[Var], fake: &[Var]) -> Result<Var> {
    match kind {
        LossKind::Vanilla | LossKind::Lol1 | LossKind::DirectModelMse => {
            disc_loss_vanilla(tape, real, fake)
        }
        LossKind::Lol2 => Ok(disc_loss_lol2(tape, real, fake)),
        LossKind::Wasserstein => Ok(disc_loss_wasserstein(tape, real, fake)),
    }
}

pub fn gen_adv_tape(
    tape: &mut Tape,
    kind: LossKind,
    form: VanillaGenForm,
    real: &[Var],
    fake: &[Var],
) -> Result<Var> {
    match (kind, form) {
        (LossKind::Vanilla | LossKind::DirectModelMse, VanillaGenForm::NonSaturating) => {
            gen_enc_loss_vanilla(tape, real, fake)
        }
        (LossKind::Vanilla | LossKind::DirectModelMse, VanillaGenForm::Minimax) => {
            gen_enc_loss_minimax(tape, real, fake)
        }
        (LossKind::Wasserstein, _) => Ok(gen_enc_loss_wasserstein(tape, real, fake)),
        (LossKind::Lol1 | LossKind::Lol2, _) => Ok(gen_enc_loss_logit(tape, real, fake)),
    }
}

// ---------------------------------------------------------------------------
// Network-level objectives on the tape

/// The three networks lifted onto one tape.
#[derive(Debug, Clone)]
pub struct TapeBiGan {
    pub g: LiftedMlp,
    pub e: LiftedMlp,
    pub d: LiftedMlp,
    pub x_dim: usize,
}

impl TapeBiGan {
    pub fn lift(m: &BiGan, tape: &mut Tape) -> Self {
        Self {
            g: m.generator.lift(tape),
            e: m.encoder.lift(tape),
            d: m.disc.body.lift(tape),
            x_dim: m.x_dim(),
        }
    }

    fn logit(&self, tape: &mut Tape, x: &[Var], z: &[Var]) -> Result<Var> {
        crate::models::disc_logit(&self.d, x, z, tape)
    }
}

fn row_vars(tape: &mut Tape, a: &Array2<f64>, i: usize) -> Vec<Var> {
    a.row(i).iter().map(|&v| tape.lift(v)).collect()
}

fn values(vs: &[Var]) -> Vec<f64> {
    vs.iter().map(|v| v.value()).collect()
}

/// Logits of the real tuples `(x, E(x))` and fake tuples `(G(z), z)`.
pub fn tuple_logits(
    tape: &mut Tape,
    nets: &TapeBiGan,
    batch: &BatchTuples,
) -> Result<(Vec<Var>, Vec<Var>)> {
    let mut real = Vec::with_capacity(batch.len());
    for i in 0..batch.real_x.nrows() {
        let x = row_vars(tape, &batch.real_x, i);
        let ex = nets.e.forward(tape, &x)?;
        real.push(nets.logit(tape, &x, &ex)?);
    }
    let mut fake = Vec::with_capacity(batch.z.nrows());
    for i in 0..batch.z.nrows() {
        let z = row_vars(tape, &batch.z, i);
        let gz = nets.g.forward(tape, &z)?;
        fake.push(nets.logit(tape, &gz, &z)?);
    }
    Ok((real, fake))
}

/// `sum_j |a_j - b_j|`.
pub fn l1_distance(tape: &mut Tape, a: &[Var], b: &[Var]) -> Var {
    let terms: Vec<Var> = a
        .iter()
        .zip(b)
        .map(|(&p, &q)| {
            let d = tape.sub(p, q);
            tape.abs(d)
        })
        .collect();
    tape.sum(&terms)
}

/// `mean |x - G(E(x))|_1 + mean |z - E(G(z))|_1`.
pub fn direct_model_mse(tape: &mut Tape, nets: &TapeBiGan, batch: &BatchTuples) -> Result<Var> {
    let mut xs = Vec::new();
    for i in 0..batch.real_x.nrows() {
        let x = row_vars(tape, &batch.real_x, i);
        let ex = nets.e.forward(tape, &x)?;
        let xh = nets.g.forward(tape, &ex)?;
        xs.push(l1_distance(tape, &x, &xh));
    }
    let mut zs = Vec::new();
    for i in 0..batch.z.nrows() {
        let z = row_vars(tape, &batch.z, i);
        let gz = nets.g.forward(tape, &z)?;
        let zh = nets.e.forward(tape, &gz)?;
        zs.push(l1_distance(tape, &z, &zh));
    }
    let a = tape.mean(&xs);
    let b = tape.mean(&zs);
    Ok(tape.add(a, b))
}

/// Euclidean norm with the convention `|0| = 0` and zero slope there.
fn tape_norm(tape: &mut Tape, v: &[Var]) -> Result<Var> {
    let sq: Vec<Var> = v.iter().map(|&x| tape.square(x)).collect();
    let s = tape.sum(&sq);
    if s.value() > 0.0 {
        Ok(tape.sqrt(s)?)
    } else {
        Ok(tape.lift(0.0))
    }
}

fn sq_norm(tape: &mut Tape, v: &[Var]) -> Var {
    let sq: Vec<Var> = v.iter().map(|&x| tape.square(x)).collect();
    tape.sum(&sq)
}

/// `mean (||grad logit(u)|| - 1)^2` at `u = eps * real_tuple + (1 - eps) * fake_tuple`,
/// pairing real and fake tuples by batch position. Gradient over the full joint input.
pub fn uniform_gp<R: Rng + ?Sized>(
    tape: &mut Tape,
    nets: &TapeBiGan,
    batch: &BatchTuples,
    rng: &mut R,
) -> Result<Var> {
    let eps = draw_eps(rng, batch.len());
    let mut terms = Vec::with_capacity(batch.len());
    for (i, &e) in eps.iter().enumerate() {
        let x = row_vars(tape, &batch.real_x, i);
        let ex = values(&nets.e.forward(tape, &x)?);
        let z = row_vars(tape, &batch.z, i);
        let gz = values(&nets.g.forward(tape, &z)?);
        let real: Vec<f64> = batch.real_x.row(i).iter().copied().chain(ex).collect();
        let fake: Vec<f64> = gz.into_iter().chain(batch.z.row(i).iter().copied()).collect();
        let u: Vec<f64> = real.iter().zip(&fake).map(|(r, f)| e * r + (1.0 - e) * f).collect();
        let u = tape.lift_all(&u);
        let l = nets.logit(tape, &u[..nets.x_dim], &u[nets.x_dim..])?;
        let g = tape.backward_graph(l, &u)?;
        let n = tape_norm(tape, &g)?;
        let one = tape.lift(1.0);
        let d = tape.sub(n, one);
        terms.push(tape.square(d));
    }
    Ok(tape.mean(&terms))
}

fn penalty_term(tape: &mut Tape, diff: &[Var], norm: PenaltyNorm) -> Result<Var> {
    match norm {
        PenaltyNorm::Unsquared => tape_norm(tape, diff),
        PenaltyNorm::Squared => Ok(sq_norm(tape, diff)),
    }
}

/// Data-side pair-wise penalty `mean ||grad_x~ logit(x~, E(x)) - x_unit||` with
/// `x^ = G(E(x))`, `x~ = eps x + (1 - eps) x^`, `x_unit = (x - x^) / ||x - x^||`.
///
/// `E(x)` and `x^` enter as constants. Samples with `||x - x^|| < 1e-12`
/// contribute zero but still count in the mean.
pub fn pairwise_gp_x<R: Rng + ?Sized>(
    tape: &mut Tape,
    nets: &TapeBiGan,
    batch: &BatchTuples,
    rng: &mut R,
    norm: PenaltyNorm,
) -> Result<Var> {
    let eps = draw_eps(rng, batch.len());
    let mut terms = Vec::with_capacity(batch.len());
    for (i, &e) in eps.iter().enumerate() {
        let xv: Vec<f64> = batch.real_x.row(i).to_vec();
        let x = tape.lift_all(&xv);
        let ex = values(&nets.e.forward(tape, &x)?);
        let exv = tape.lift_all(&ex);
        let xh = values(&nets.g.forward(tape, &exv)?);
        let Some(unit) = unit_direction(&xv, &xh) else {
            terms.push(tape.lift(0.0));
            continue;
        };
        let xt: Vec<f64> = xv.iter().zip(&xh).map(|(a, b)| e * a + (1.0 - e) * b).collect();
        let xt = tape.lift_all(&xt);
        let ez = tape.lift_all(&ex);
        let l = nets.logit(tape, &xt, &ez)?;
        let g = tape.backward_graph(l, &xt)?;
        let diff: Vec<Var> = g
            .iter()
            .zip(&unit)
            .map(|(&gj, &uj)| {
                let c = tape.lift(uj);
                tape.sub(gj, c)
            })
            .collect();
        terms.push(penalty_term(tape, &diff, norm)?);
    }
    Ok(tape.mean(&terms))
}

/// Latent-side pair-wise penalty `mean ||-grad_z~ logit(G(z), z~) - z_unit||`
/// with `z^ = E(G(z))`; mirror image of [`pairwise_gp_x`].
pub fn pairwise_gp_z<R: Rng + ?Sized>(
    tape: &mut Tape,
    nets: &TapeBiGan,
    batch: &BatchTuples,
    rng: &mut R,
    norm: PenaltyNorm,
) -> Result<Var> {
    let eps = draw_eps(rng, batch.len());
    let mut terms = Vec::with_capacity(batch.len());
    for (i, &e) in eps.iter().enumerate() {
        let zv: Vec<f64> = batch.z.row(i).to_vec();
        let z = tape.lift_all(&zv);
        let gz = values(&nets.g.forward(tape, &z)?);
        let gzv = tape.lift_all(&gz);
        let zh = values(&nets.e.forward(tape, &gzv)?);
        let Some(unit) = unit_direction(&zv, &zh) else {
            terms.push(tape.lift(0.0));
            continue;
        };
        let zt: Vec<f64> = zv.iter().zip(&zh).map(|(a, b)| e * a + (1.0 - e) * b).collect();
        let zt = tape.lift_all(&zt);
        let gx = tape.lift_all(&gz);
        let l = nets.logit(tape, &gx, &zt)?;
        let g = tape.backward_graph(l, &zt)?;
        let diff: Vec<Var> = g
            .iter()
            .zip(&unit)
            .map(|(&gj, &uj)| {
                let ng = tape.neg(gj);
                let c = tape.lift(uj);
                tape.sub(ng, c)
            })
            .collect();
        terms.push(penalty_term(tape, &diff, norm)?);
    }
    Ok(tape.mean(&terms))
}

/// `(a - b) / ||a - b||`, or `None` when the points coincide.
pub fn unit_direction(a: &[f64], b: &[f64]) -> Option<Vec<f64>> {
    let d: Vec<f64> = a.iter().zip(b).map(|(p, q)| p - q).collect();
    let n = d.iter().map(|v| v * v).sum::<f64>().sqrt();
    (n >= COUPLED_EPS).then(|| d.iter().map(|v| v / n).collect())
}

/// Value breakdown of a discriminator objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscParts<T> {
    pub total: T,
    pub adv: T,
    /// Sum of the selected penalty means, before scaling by `lambda`.
    pub penalty: T,
}

/// `L_adv + lambda * (selected penalties)`.
pub fn total_disc_loss<R: Rng + ?Sized>(
    tape: &mut Tape,
    spec: &ObjectiveSpec,
    nets: &TapeBiGan,
    batch: &BatchTuples,
    rng: &mut R,
) -> Result<DiscParts<Var>> {
    let (real, fake) = tuple_logits(tape, nets, batch)?;
    let adv = disc_adv_tape(tape, spec.loss_kind, &real, &fake)?;
    let penalty = match spec.penalty_kind {
        PenaltyKind::None => tape.lift(0.0),
        PenaltyKind::UniformGp => uniform_gp(tape, nets, batch, rng)?,
        PenaltyKind::PairwiseGp => {
            let px = pairwise_gp_x(tape, nets, batch, rng, spec.penalty_norm)?;
            if spec.latent_penalty {
                let pz = pairwise_gp_z(tape, nets, batch, rng, spec.penalty_norm)?;
                tape.add(px, pz)
            } else {
                px
            }
        }
    };
    let scaled = tape.scale(penalty, spec.lambda);
    let total = tape.add(adv, scaled);
    Ok(DiscParts {
        total,
        adv,
        penalty,
    })
}

/// Joint encoder/generator objective for `spec.loss_kind`.
pub fn total_gen_enc_loss(
    tape: &mut Tape,
    spec: &ObjectiveSpec,
    nets: &TapeBiGan,
    batch: &BatchTuples,
) -> Result<Var> {
    let (real, fake) = tuple_logits(tape, nets, batch)?;
    let adv = gen_adv_tape(tape, spec.loss_kind, spec.vanilla_gen_form, &real, &fake)?;
    if spec.loss_kind == LossKind::DirectModelMse {
        let rec = direct_model_mse(tape, nets, batch)?;
        let w = tape.scale(rec, spec.mse_weight);
        Ok(tape.add(adv, w))
    } else {
        Ok(adv)
    }
}

// ---------------------------------------------------------------------------
// Batched closed forms

/// Discriminator objective value and its parameter gradient.
#[derive(Debug, Clone)]
pub struct DiscStep {
    pub parts: DiscParts<f64>,
    pub grads: Grads,
}

/// Joint encoder/generator objective value and gradients.
#[derive(Debug, Clone)]
pub struct GenEncStep {
    pub loss: f64,
    pub grads_g: Grads,
    pub grads_e: Grads,
}

fn column(v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((v.len(), 1), v.to_vec()).expect("column shape")
}

fn lerp_rows(a: ArrayView2<f64>, b: ArrayView2<f64>, eps: &[f64]) -> Array2<f64> {
    let mut out = b.to_owned();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let e = eps[i];
        for (o, &av) in row.iter_mut().zip(a.row(i)) {
            *o = e * av + (1.0 - e) * *o;
        }
    }
    out
}

/// Per-row penalty for `v = sign * g - unit` and its slope with respect to `g`.
fn pair_term(g: &[f64], unit: &[f64], sign: f64, norm: PenaltyNorm) -> (f64, Vec<f64>) {
    let v: Vec<f64> = g.iter().zip(unit).map(|(a, u)| sign * a - u).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    match norm {
        PenaltyNorm::Unsquared => {
            let slope = if n > 0.0 {
                v.iter().map(|x| sign * x / n).collect()
            } else {
                vec![0.0; v.len()]
            };
            (n, slope)
        }
        PenaltyNorm::Squared => (n * n, v.iter().map(|x| 2.0 * sign * x).collect()),
    }
}

/// One pair-wise penalty slot (data or latent) evaluated in batch.
///
/// `fixed` fills the other slot; `cols` selects which input columns vary.
#[allow(clippy::too_many_arguments)]
fn pairwise_slot(
    m: &BiGan,
    orig: ArrayView2<f64>,
    recon: ArrayView2<f64>,
    fixed: ArrayView2<f64>,
    eps: &[f64],
    data_slot: bool,
    norm: PenaltyNorm,
    weight: f64,
    grads: &mut Grads,
) -> f64 {
    let n = orig.nrows();
    let dx = m.x_dim();
    let interp = lerp_rows(orig, recon, eps);
    let input = if data_slot {
        hcat(interp.view(), fixed)
    } else {
        hcat(fixed, interp.view())
    };
    let cache = dense::forward(&m.disc.body, input.view());
    let ig = dense::logit_input_grad(&m.disc.body, &cache);
    let cols = if data_slot { 0..dx } else { dx..input.ncols() };
    let sign = if data_slot { 1.0 } else { -1.0 };
    let mut g_bar = Array2::zeros(ig.grad.raw_dim());
    let mut total = 0.0;
    for i in 0..n {
        let o = orig.row(i).to_vec();
        let r = recon.row(i).to_vec();
        let Some(unit) = unit_direction(&o, &r) else { continue };
        let g: Vec<f64> = ig.grad.slice(s![i, cols.clone()]).to_vec();
        let (val, slope) = pair_term(&g, &unit, sign, norm);
        total += val;
        for (j, c) in cols.clone().enumerate() {
            g_bar[[i, c]] = weight * slope[j] / n as f64;
        }
    }
    grads.add_assign(&dense::input_grad_param_grads(
        &m.disc.body,
        &cache,
        &ig,
        g_bar.view(),
    ));
    total / n as f64
}

/// Batched [`total_disc_loss`] with its gradient with respect to the
/// discriminator parameters. Consumes the RNG exactly like the tape version.
pub fn disc_step<R: Rng + ?Sized>(
    spec: &ObjectiveSpec,
    m: &BiGan,
    batch: &BatchTuples,
    rng: &mut R,
) -> DiscStep {
    let d = &m.disc.body;
    let x = batch.real_x.view();
    let z = batch.z.view();
    let ex = dense::predict(&m.encoder, x);
    let gz = dense::predict(&m.generator, z);
    let real_in = hcat(x, ex.view());
    let fake_in = hcat(gz.view(), z);
    let cr = dense::forward(d, real_in.view());
    let cf = dense::forward(d, fake_in.view());
    let r: Vec<f64> = cr.output().column(0).to_vec();
    let f: Vec<f64> = cf.output().column(0).to_vec();
    let adv = disc_adv_logits(spec.loss_kind, &r, &f);
    let (gr, _) = dense::backward(d, &cr, column(&adv.d_real).view(), true);
    let (gf, _) = dense::backward(d, &cf, column(&adv.d_fake).view(), true);
    let mut grads = gr.unwrap();
    grads.add_assign(&gf.unwrap());

    let lambda = spec.lambda;
    let penalty = match spec.penalty_kind {
        PenaltyKind::None => 0.0,
        PenaltyKind::UniformGp => {
            let eps = draw_eps(rng, batch.len());
            let u = lerp_rows(real_in.view(), fake_in.view(), &eps);
            let cache = dense::forward(d, u.view());
            let ig = dense::logit_input_grad(d, &cache);
            let n = batch.len() as f64;
            let mut total = 0.0;
            let mut g_bar = Array2::zeros(ig.grad.raw_dim());
            for (i, row) in ig.grad.axis_iter(Axis(0)).enumerate() {
                let norm = row.dot(&row).sqrt();
                total += (norm - 1.0).powi(2);
                if norm > 0.0 {
                    let k = lambda * 2.0 * (norm - 1.0) / norm / n;
                    g_bar.row_mut(i).assign(&(&row * k));
                }
            }
            grads.add_assign(&dense::input_grad_param_grads(d, &cache, &ig, g_bar.view()));
            total / n
        }
        PenaltyKind::PairwiseGp => {
            let eps = draw_eps(rng, batch.len());
            let xh = dense::predict(&m.generator, ex.view());
            let mut p = pairwise_slot(
                m,
                x,
                xh.view(),
                ex.view(),
                &eps,
                true,
                spec.penalty_norm,
                lambda,
                &mut grads,
            );
            if spec.latent_penalty {
                let eps = draw_eps(rng, batch.len());
                let zh = dense::predict(&m.encoder, gz.view());
                p += pairwise_slot(
                    m,
                    z,
                    zh.view(),
                    gz.view(),
                    &eps,
                    false,
                    spec.penalty_norm,
                    lambda,
                    &mut grads,
                );
            }
            p
        }
    };
    DiscStep {
        parts: DiscParts {
            total: adv.value + lambda * penalty,
            adv: adv.value,
            penalty,
        },
        grads,
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradient of `w * mean_rows |target - recon|_1` with respect to `recon`.
fn l1_recon_grad(target: ArrayView2<f64>, recon: &Array2<f64>, w: f64) -> (f64, Array2<f64>) {
    let n = target.nrows() as f64;
    let mut value = 0.0;
    let mut g = Array2::zeros(recon.raw_dim());
    for ((gv, &t), &r) in g.iter_mut().zip(target.iter()).zip(recon.iter()) {
        value += (t - r).abs();
        *gv = -w * sign(t - r) / n;
    }
    (value / n, g)
}

/// Batched [`total_gen_enc_loss`] with gradients for generator and encoder.
/// The discriminator is held fixed.
pub fn gen_enc_step(spec: &ObjectiveSpec, m: &BiGan, batch: &BatchTuples) -> GenEncStep {
    let d = &m.disc.body;
    let dx = m.x_dim();
    let x = batch.real_x.view();
    let z = batch.z.view();
    let ce = dense::forward(&m.encoder, x);
    let cg = dense::forward(&m.generator, z);
    let real_in = hcat(x, ce.output().view());
    let fake_in = hcat(cg.output().view(), z);
    let cr = dense::forward(d, real_in.view());
    let cf = dense::forward(d, fake_in.view());
    let r: Vec<f64> = cr.output().column(0).to_vec();
    let f: Vec<f64> = cf.output().column(0).to_vec();
    let adv = gen_adv_logits(spec.loss_kind, spec.vanilla_gen_form, &r, &f);
    let (_, d_real_in) = dense::backward(d, &cr, column(&adv.d_real).view(), false);
    let (_, d_fake_in) = dense::backward(d, &cf, column(&adv.d_fake).view(), false);
    let d_ex = d_real_in.slice(s![.., dx..]).to_owned();
    let d_gz = d_fake_in.slice(s![.., ..dx]).to_owned();
    let (ge, _) = dense::backward(&m.encoder, &ce, d_ex.view(), true);
    let (gg, _) = dense::backward(&m.generator, &cg, d_gz.view(), true);
    let mut grads_e = ge.unwrap();
    let mut grads_g = gg.unwrap();
    let mut loss = adv.value;

    if spec.loss_kind == LossKind::DirectModelMse {
        let w = spec.mse_weight;
        // x^ = G(E(x))
        let cgx = dense::forward(&m.generator, ce.output().view());
        let (vx, d_xh) = l1_recon_grad(x, cgx.output(), w);
        let (g1, d_ex2) = dense::backward(&m.generator, &cgx, d_xh.view(), true);
        grads_g.add_assign(&g1.unwrap());
        let (e1, _) = dense::backward(&m.encoder, &ce, d_ex2.view(), true);
        grads_e.add_assign(&e1.unwrap());
        // z^ = E(G(z))
        let cez = dense::forward(&m.encoder, cg.output().view());
        let (vz, d_zh) = l1_recon_grad(z, cez.output(), w);
        let (e2, d_gz2) = dense::backward(&m.encoder, &cez, d_zh.view(), true);
        grads_e.add_assign(&e2.unwrap());
        let (g2, _) = dense::backward(&m.generator, &cg, d_gz2.view(), true);
        grads_g.add_assign(&g2.unwrap());
        loss += w * (vx + vz);
    }
    GenEncStep {
        loss,
        grads_g,
        grads_e,
    }
}
