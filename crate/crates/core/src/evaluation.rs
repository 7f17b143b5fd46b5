//! Mode coverage, inversion error, discriminator contours and the 1-D escape
//! analysis of a reconstruction point against a low-probability valley.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dense::{self, hcat};
use crate::models::{BiGan, JointDiscriminator, Mlp};
use crate::toydata::ToyDistribution;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("usage: {0}")]
    Usage(String),
}

type Result<T> = std::result::Result<T, EvalError>;

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(EvalError::Usage(msg.into()))
}

/// Parameters of the mode-coverage metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_samples: usize,
    /// Absolute capture radius; `None` means three times the mixture's sigma.
    pub capture_radius: Option<f64>,
    pub min_fraction: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_samples: 10_000,
            capture_radius: None,
            min_fraction: 0.01,
        }
    }
}

impl EvalConfig {
    pub fn radius_for(&self, dist: &ToyDistribution) -> f64 {
        self.capture_radius.unwrap_or(3.0 * dist.sigma())
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.n_samples == 0 {
            return Err("n_samples must be >= 1".into());
        }
        if let Some(r) = self.capture_radius {
            if !(r > 0.0 && r.is_finite()) {
                return Err(format!("capture_radius {r} must be > 0"));
            }
        }
        if !(0.0..=1.0).contains(&self.min_fraction) {
            return Err(format!("min_fraction {} must lie in [0, 1]", self.min_fraction));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeCoverageReport {
    pub per_mode_counts: Vec<usize>,
    pub modes_captured: usize,
    /// Fraction of samples within the capture radius of some center.
    pub hq_fraction: f64,
    pub n_samples: usize,
    pub capture_radius: f64,
    pub min_fraction: f64,
}

/// Mode centers as the rows of a matrix.
pub fn centers_matrix(dist: &ToyDistribution) -> Array2<f64> {
    let c = dist.mode_centers();
    Array2::from_shape_fn((c.len(), 2), |(i, j)| c[i][j])
}

/// Assigns each sample to its nearest center if that center lies within
/// `capture_radius`; exact ties go to the lower center index. A mode counts as
/// captured when it received at least `min_fraction` of all samples.
pub fn mode_coverage(
    samples: ArrayView2<f64>,
    centers: ArrayView2<f64>,
    capture_radius: f64,
    min_fraction: f64,
) -> Result<ModeCoverageReport> {
    if centers.nrows() == 0 {
        return usage("mode_coverage needs at least one center");
    }
    if !(capture_radius > 0.0) {
        return usage(format!("capture_radius {capture_radius} must be > 0"));
    }
    if !(0.0..=1.0).contains(&min_fraction) {
        return usage(format!("min_fraction {min_fraction} must lie in [0, 1]"));
    }
    if samples.ncols() != centers.ncols() {
        return usage(format!(
            "samples have {} columns, centers {}",
            samples.ncols(),
            centers.ncols()
        ));
    }
    let r2 = capture_radius * capture_radius;
    let mut counts = vec![0usize; centers.nrows()];
    for s in samples.rows() {
        let mut best = (f64::INFINITY, 0);
        for (i, c) in centers.rows().into_iter().enumerate() {
            let d2 = sq_dist(s, c);
            if d2 < best.0 {
                best = (d2, i);
            }
        }
        if best.0 <= r2 {
            counts[best.1] += 1;
        }
    }
    let n = samples.nrows();
    let hits: usize = counts.iter().sum();
    let modes_captured = counts
        .iter()
        .filter(|&&c| n > 0 && c as f64 / n as f64 >= min_fraction)
        .count();
    Ok(ModeCoverageReport {
        per_mode_counts: counts,
        modes_captured,
        hq_fraction: if n == 0 { 0.0 } else { hits as f64 / n as f64 },
        n_samples: n,
        capture_radius,
        min_fraction,
    })
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

/// Mean Euclidean reconstruction errors in data and latent space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InversionError {
    pub x_l2: f64,
    pub z_l2: f64,
}

/// Mean row-wise distance between two equally shaped batches.
pub fn mean_row_distance(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    if a.nrows() == 0 {
        return 0.0;
    }
    let total: f64 = a
        .rows()
        .into_iter()
        .zip(b.rows())
        .map(|(p, q)| sq_dist(p, q).sqrt())
        .sum();
    total / a.nrows() as f64
}

/// `x_l2 = mean ||x - G(E(x))||`, `z_l2 = mean ||z - E(G(z))||`.
pub fn inversion_error(
    generator: &Mlp,
    encoder: &Mlp,
    samples: ArrayView2<f64>,
    latents: ArrayView2<f64>,
) -> InversionError {
    let x_rec = dense::predict(generator, dense::predict(encoder, samples).view());
    let z_rec = dense::predict(encoder, dense::predict(generator, latents).view());
    InversionError {
        x_l2: mean_row_distance(samples, x_rec.view()),
        z_l2: mean_row_distance(latents, z_rec.view()),
    }
}

/// Axis-aligned box in data space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Default for Bounds {
    fn default() -> Self {
        Self {
            x_min: -3.0,
            x_max: 3.0,
            y_min: -3.0,
            y_max: 3.0,
        }
    }
}

/// Latent coordinate paired with each lattice point.
#[derive(Debug, Clone, Copy)]
pub enum ContourSlice<'a> {
    /// `D(x, E(x))`
    Encoder(&'a Mlp),
    /// `D(x, z0)`
    Fixed(&'a [f64]),
}

/// Pre-activation discriminator values on a regular lattice. Row `j` holds
/// `y_j`, column `i` holds `x_i`; both axes include their end points.
#[derive(Debug, Clone, PartialEq)]
pub struct ContourGrid {
    pub bounds: Bounds,
    /// `(nx, ny)`
    pub resolution: (usize, usize),
    pub values: Array2<f64>,
}

impl ContourGrid {
    pub fn point(&self, i: usize, j: usize) -> [f64; 2] {
        lattice_point(&self.bounds, self.resolution, i, j)
    }

    /// Matrix as CSV. The header holds the `x` coordinates, each following
    /// line starts with its `y` coordinate.
    pub fn to_csv(&self) -> String {
        let (nx, ny) = self.resolution;
        let mut out = String::from("y\\x");
        for i in 0..nx {
            let _ = write!(out, ",{}", self.point(i, 0)[0]);
        }
        out.push('\n');
        for j in 0..ny {
            let _ = write!(out, "{}", self.point(0, j)[1]);
            for v in self.values.row(j) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    /// Bounds and resolution for the CSV matrix.
    pub fn sidecar_json(&self) -> String {
        serde_json::json!({
            "bounds": self.bounds,
            "resolution": {"nx": self.resolution.0, "ny": self.resolution.1},
            "rows": "y",
            "columns": "x",
            "values": "discriminator pre-activation",
        })
        .to_string()
    }

    /// Mean absolute discrete Laplacian over interior points, in logit units
    /// per squared cell. Smooth surfaces score low.
    pub fn roughness(&self) -> f64 {
        let (ny, nx) = self.values.dim();
        if nx < 3 || ny < 3 {
            return 0.0;
        }
        let v = &self.values;
        let mut total = 0.0;
        for j in 1..ny - 1 {
            for i in 1..nx - 1 {
                let lap = v[[j, i - 1]] + v[[j, i + 1]] + v[[j - 1, i]] + v[[j + 1, i]] - 4.0 * v[[j, i]];
                total += lap.abs();
            }
        }
        total / ((nx - 2) * (ny - 2)) as f64
    }
}

fn lattice_point(b: &Bounds, (nx, ny): (usize, usize), i: usize, j: usize) -> [f64; 2] {
    let t = |k: usize, n: usize| k as f64 / (n - 1) as f64;
    [
        b.x_min + t(i, nx) * (b.x_max - b.x_min),
        b.y_min + t(j, ny) * (b.y_max - b.y_min),
    ]
}

pub fn contour_grid(
    disc: &JointDiscriminator,
    slice: ContourSlice<'_>,
    bounds: Bounds,
    resolution: (usize, usize),
) -> Result<ContourGrid> {
    let (nx, ny) = resolution;
    if nx < 2 || ny < 2 {
        return usage(format!("resolution {nx}x{ny} must be at least 2x2"));
    }
    if !(bounds.x_max > bounds.x_min && bounds.y_max > bounds.y_min) {
        return usage("contour bounds must have positive extent");
    }
    if disc.x_dim != 2 {
        return usage(format!("contours need a 2-D data space, got {}", disc.x_dim));
    }
    let mut xs = Array2::zeros((nx * ny, 2));
    for j in 0..ny {
        for i in 0..nx {
            let p = lattice_point(&bounds, resolution, i, j);
            xs[[j * nx + i, 0]] = p[0];
            xs[[j * nx + i, 1]] = p[1];
        }
    }
    let zs = match slice {
        ContourSlice::Encoder(e) => {
            if e.input_dim() != 2 || e.output_dim() != disc.z_dim() {
                return usage("encoder does not map data space to the discriminator's latent slot");
            }
            dense::predict(e, xs.view())
        }
        ContourSlice::Fixed(z0) => {
            if z0.len() != disc.z_dim() {
                return usage(format!("latent slice has {} entries, expected {}", z0.len(), disc.z_dim()));
            }
            Array2::from_shape_fn((nx * ny, z0.len()), |(_, k)| z0[k])
        }
    };
    let logits = dense::predict(&disc.body, hcat(xs.view(), zs.view()).view());
    let values = logits
        .index_axis(Axis(1), 0)
        .to_owned()
        .into_shape_with_order((ny, nx))
        .expect("nx * ny logits");
    Ok(ContourGrid {
        bounds,
        resolution,
        values,
    })
}

/// Convenience: `D(x, E(x))` contour of a trained triple.
pub fn bigan_contour(m: &BiGan, bounds: Bounds, resolution: (usize, usize)) -> Result<ContourGrid> {
    contour_grid(&m.disc, ContourSlice::Encoder(&m.encoder), bounds, resolution)
}

/// Discriminator level below which a bounded L1 reconstruction pull in `n_dims`
/// dimensions with weight `lambda_mse` loses against the adversarial push:
/// `1 / (2 N lambda)`.
pub fn d_crit(n_dims: usize, lambda_mse: f64) -> Result<f64> {
    if n_dims == 0 {
        return usage("n_dims must be >= 1");
    }
    if !(lambda_mse > 0.0) {
        return usage(format!("lambda {lambda_mse} must be > 0"));
    }
    Ok(1.0 / (2.0 * n_dims as f64 * lambda_mse))
}

/// One-dimensional discriminator between a reconstruction (at `t = 0`) and
/// its coupled sample (at `t = width()`): `D(t) = peak - min(t, width - t)`.
/// Both ends sit on a peak of height `peak`; the slope is one on either side
/// of the valley floor `depth` in the middle.
///
/// `D` is a positive level on the same scale as `d_crit`, not a probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Landscape {
    pub peak: f64,
    pub depth: f64,
}

impl Landscape {
    pub fn new(peak: f64, depth: f64) -> Result<Self> {
        if !(depth > 0.0 && peak > depth && peak.is_finite()) {
            return usage(format!("need 0 < depth < peak, got depth {depth}, peak {peak}"));
        }
        Ok(Self { peak, depth })
    }

    pub fn width(&self) -> f64 {
        2.0 * (self.peak - self.depth)
    }

    pub fn value(&self, t: f64) -> f64 {
        self.peak - t.min(self.width() - t)
    }

    /// `dD/dt`; the valley floor counts as the rising side.
    pub fn slope(&self, t: f64) -> f64 {
        if t < self.width() / 2.0 {
            -1.0
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EscapeMethod {
    /// Bounded L1 pull `2 N lambda` plus the adversarial push `D'/D`.
    Mse,
    /// Follows a logit whose gradient along the segment is the unit vector
    /// towards the coupled sample.
    PairwiseGp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EscapeParams {
    pub n_dims: usize,
    pub lambda: f64,
    pub step_size: f64,
    pub max_steps: usize,
}

impl Default for EscapeParams {
    fn default() -> Self {
        Self {
            n_dims: 2,
            lambda: 0.1,
            step_size: 1e-3,
            max_steps: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EscapeOutcome {
    pub crossed: bool,
    /// Remaining distance to the coupled sample, 0 when crossed.
    pub final_gap: f64,
    pub steps: usize,
}

/// Moves the point by fixed-size gradient steps until it reaches the coupled
/// sample or the step budget runs out.
pub fn escape_experiment(land: &Landscape, method: EscapeMethod, params: &EscapeParams) -> Result<EscapeOutcome> {
    Landscape::new(land.peak, land.depth)?;
    if !(params.step_size > 0.0) {
        return usage("step_size must be > 0");
    }
    let pull = 2.0 * params.n_dims as f64 * params.lambda;
    if method == EscapeMethod::Mse {
        d_crit(params.n_dims, params.lambda)?;
    }
    let end = land.width();
    let mut t = 0.0f64;
    for k in 0..params.max_steps {
        if t >= end {
            return Ok(EscapeOutcome {
                crossed: true,
                final_gap: 0.0,
                steps: k,
            });
        }
        let force = match method {
            EscapeMethod::Mse => pull + land.slope(t) / land.value(t),
            EscapeMethod::PairwiseGp => 1.0,
        };
        t = (t + params.step_size * force).max(0.0);
    }
    let crossed = t >= end;
    Ok(EscapeOutcome {
        crossed,
        final_gap: (end - t).max(0.0),
        steps: params.max_steps,
    })
}

/// One row of the escape table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EscapeRow {
    pub depth: f64,
    pub d_crit: f64,
    pub above_d_crit: bool,
    pub mse: EscapeOutcome,
    pub pairwise_gp: EscapeOutcome,
}

pub fn escape_table(peak: f64, depths: &[f64], params: &EscapeParams) -> Result<Vec<EscapeRow>> {
    let dc = d_crit(params.n_dims, params.lambda)?;
    depths
        .iter()
        .map(|&depth| {
            let land = Landscape::new(peak, depth)?;
            Ok(EscapeRow {
                depth,
                d_crit: dc,
                above_d_crit: depth > dc,
                mse: escape_experiment(&land, EscapeMethod::Mse, params)?,
                pairwise_gp: escape_experiment(&land, EscapeMethod::PairwiseGp, params)?,
            })
        })
        .collect()
}

/// Escape table as CSV with header.
pub fn escape_csv(rows: &[EscapeRow]) -> String {
    let mut out = String::from("depth,d_crit,above_d_crit,mse_crossed,mse_final_gap,pairwise_gp_crossed,pairwise_gp_final_gap\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.depth, r.d_crit, r.above_d_crit, r.mse.crossed, r.mse.final_gap, r.pairwise_gp.crossed, r.pairwise_gp.final_gap
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{MlpConfig, OutputActivation};
    use crate::SimRng;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn ring8() -> (ToyDistribution, Array2<f64>) {
        let d = ToyDistribution::default();
        let c = centers_matrix(&d);
        (d, c)
    }

    #[test]
    fn all_samples_on_one_center() {
        let (_, c) = ring8();
        let s = Array2::from_shape_fn((100, 2), |(_, j)| c[[0, j]]);
        let r = mode_coverage(s.view(), c.view(), 0.15, 0.01).unwrap();
        assert_eq!(r.modes_captured, 1);
        assert_eq!(r.hq_fraction, 1.0);
        assert_eq!(r.per_mode_counts[0], 100);
    }

    #[test]
    fn true_distribution_covers_every_mode() {
        let (d, c) = ring8();
        let s = d.sample(10_000, &mut SimRng::seed_from_u64(4));
        let r = mode_coverage(s.view(), c.view(), 3.0 * d.sigma(), 0.01).unwrap();
        assert_eq!(r.modes_captured, 8);
        // P(chi2_2 <= 9) = 1 - exp(-4.5) = 0.9889
        assert!((r.hq_fraction - 0.9889).abs() < 0.005);
        assert_eq!(r.per_mode_counts.iter().sum::<usize>(), (r.hq_fraction * 10_000.0).round() as usize);
    }

    #[test]
    fn far_away_samples_capture_nothing() {
        let (_, c) = ring8();
        let mut rng = SimRng::seed_from_u64(2);
        let s = Array2::from_shape_simple_fn((1000, 2), || rng.random_range(1e3..1e6));
        let r = mode_coverage(s.view(), c.view(), 0.15, 0.01).unwrap();
        assert_eq!(r.modes_captured, 0);
        assert_eq!(r.hq_fraction, 0.0);
    }

    #[test]
    fn ties_go_to_the_lower_index() {
        let c = array![[1.0, 0.0], [-1.0, 0.0]];
        let s = array![[0.0, 0.0]];
        let r = mode_coverage(s.view(), c.view(), 2.0, 0.5).unwrap();
        assert_eq!(r.per_mode_counts, vec![1, 0]);
    }

    #[test]
    fn usage_errors() {
        let s = array![[0.0, 0.0]];
        let empty = Array2::<f64>::zeros((0, 2));
        assert!(mode_coverage(s.view(), empty.view(), 1.0, 0.01).is_err());
        let c = array![[0.0, 0.0]];
        assert!(mode_coverage(s.view(), c.view(), 0.0, 0.01).is_err());
        assert!(mode_coverage(s.view(), c.view(), 1.0, 1.5).is_err());
        let c3 = array![[0.0, 0.0, 0.0]];
        assert!(mode_coverage(s.view(), c3.view(), 1.0, 0.01).is_err());
    }

    #[test]
    fn reconstruction_errors() {
        let x = array![[0.0, 0.0], [1.0, -2.0]];
        assert_eq!(mean_row_distance(x.view(), x.view()), 0.0);
        let shifted = &x + &array![0.3, 0.4];
        assert!((mean_row_distance(x.view(), shifted.view()) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn inversion_error_matches_manual_composition() {
        let m = BiGan::init(&Default::default(), 2, 2, &mut SimRng::seed_from_u64(1)).unwrap();
        let x = array![[0.5, 1.0], [-1.5, 0.2], [2.0, 2.0]];
        let z = array![[0.1, -0.9], [0.0, 0.3], [0.7, 0.7]];
        let e = inversion_error(&m.generator, &m.encoder, x.view(), z.view());
        let mut xs = 0.0;
        for row in x.rows() {
            let ex = dense::predict(&m.encoder, row.insert_axis(Axis(0)));
            let gex = dense::predict(&m.generator, ex.view());
            xs += sq_dist(row, gex.row(0)).sqrt();
        }
        assert!((e.x_l2 - xs / 3.0).abs() < 1e-14);
        assert!(e.z_l2 > 0.0);
    }

    fn zero_disc() -> JointDiscriminator {
        let body = Mlp::zeros(MlpConfig::uniform(4, 8, 2, 1, 0.2, OutputActivation::None)).unwrap();
        JointDiscriminator::new(body, 2).unwrap()
    }

    #[test]
    fn zero_discriminator_contour_is_flat() {
        let g = contour_grid(&zero_disc(), ContourSlice::Fixed(&[0.0, 0.0]), Bounds::default(), (100, 100)).unwrap();
        assert_eq!(g.values.len(), 10_000);
        assert!(g.values.iter().all(|&v| v == 0.0));
        assert_eq!(g.roughness(), 0.0);
        let csv = g.to_csv();
        assert_eq!(csv.lines().count(), 101);
        assert!(csv.starts_with("y\\x,-3,"));
        let side: serde_json::Value = serde_json::from_str(&g.sidecar_json()).unwrap();
        assert_eq!(side["resolution"]["nx"], 100);
    }

    #[test]
    fn even_critic_gives_mirror_symmetric_grid() {
        // leaky(u) + leaky(-u) = (1 - slope) |u|, so the logit is even in x
        let cfg = MlpConfig {
            layer_sizes: vec![4, 4, 1],
            leaky_slope: 0.2,
            output_activation: OutputActivation::None,
        };
        let mut body = Mlp::zeros(cfg).unwrap();
        body.layers[0].w[[0, 0]] = 1.0;
        body.layers[0].w[[1, 0]] = -1.0;
        body.layers[0].w[[2, 1]] = 2.0;
        body.layers[0].w[[3, 1]] = -2.0;
        body.layers[1].w.fill(1.0);
        let d = JointDiscriminator::new(body, 2).unwrap();
        let g = contour_grid(&d, ContourSlice::Fixed(&[0.3, 0.3]), Bounds::default(), (41, 31)).unwrap();
        let (ny, nx) = g.values.dim();
        for j in 0..ny {
            for i in 0..nx {
                assert!((g.values[[j, i]] - g.values[[ny - 1 - j, nx - 1 - i]]).abs() < 1e-12);
                assert!((g.values[[j, i]] - g.values[[j, nx - 1 - i]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn contour_matches_pointwise_logits() {
        let m = BiGan::init(&Default::default(), 2, 2, &mut SimRng::seed_from_u64(6)).unwrap();
        let g = bigan_contour(&m, Bounds::default(), (37, 23)).unwrap();
        let mut rng = SimRng::seed_from_u64(7);
        for _ in 0..10 {
            let (i, j) = (rng.random_range(0..37), rng.random_range(0..23));
            let p = g.point(i, j);
            let mut t = crate::autodiff::Tape::new();
            let x = t.lift_all(&p);
            let z = m.encoder.forward(&mut t, &x).unwrap();
            let d = m.disc.body.lift(&mut t);
            let l = crate::models::disc_logit(&d, &x, &z, &mut t).unwrap();
            assert!((l.value() - g.values[[j, i]]).abs() < 1e-12);
        }
        assert_eq!(g.point(0, 0), [-3.0, -3.0]);
        assert_eq!(g.point(36, 22), [3.0, 3.0]);
    }

    #[test]
    fn contour_usage_errors() {
        let d = zero_disc();
        assert!(contour_grid(&d, ContourSlice::Fixed(&[0.0]), Bounds::default(), (10, 10)).is_err());
        assert!(contour_grid(&d, ContourSlice::Fixed(&[0.0, 0.0]), Bounds::default(), (1, 10)).is_err());
        let flat = Bounds { x_max: -3.0, ..Bounds::default() };
        assert!(contour_grid(&d, ContourSlice::Fixed(&[0.0, 0.0]), flat, (10, 10)).is_err());
    }

    #[test]
    fn d_crit_values() {
        assert_eq!(d_crit(2, 0.1).unwrap(), 2.5);
        assert_eq!(d_crit(1, 0.5).unwrap(), 1.0);
        assert!(d_crit(3, 0.1).unwrap() < d_crit(2, 0.1).unwrap());
        assert!(d_crit(2, 0.2).unwrap() < d_crit(2, 0.1).unwrap());
        assert!(d_crit(0, 0.1).is_err());
        assert!(d_crit(1, 0.0).is_err());
    }

    #[test]
    fn escape_outcomes() {
        let p = EscapeParams::default();
        let shallow = Landscape::new(10.0, 4.0).unwrap();
        let deep = Landscape::new(10.0, 0.5).unwrap();
        assert!(escape_experiment(&shallow, EscapeMethod::Mse, &p).unwrap().crossed);
        let stuck = escape_experiment(&deep, EscapeMethod::Mse, &p).unwrap();
        assert!(!stuck.crossed && stuck.final_gap > 0.0);
        assert!(escape_experiment(&deep, EscapeMethod::PairwiseGp, &p).unwrap().crossed);
    }

    #[test]
    fn escape_threshold_sits_at_d_crit() {
        let p = EscapeParams::default();
        let depths = [0.5, 1.0, 2.0, 2.4, 2.6, 3.0, 5.0, 8.0];
        let rows = escape_table(10.0, &depths, &p).unwrap();
        for r in &rows {
            assert_eq!(r.mse.crossed, r.depth > 2.5, "{r:?}");
            assert!(r.pairwise_gp.crossed);
        }
        let csv = escape_csv(&rows);
        assert!(csv.starts_with("depth,d_crit,"));
        assert_eq!(csv.lines().count(), depths.len() + 1);
    }

    #[test]
    fn strong_pull_always_crosses() {
        let p = EscapeParams { lambda: 50.0, ..Default::default() };
        for r in escape_table(10.0, &[0.01, 0.1, 1.0, 9.0], &p).unwrap() {
            assert!(r.mse.crossed);
        }
    }

    proptest! {
        #[test]
        fn coverage_is_permutation_invariant(seed in 0u64..1000, shift in 0usize..8) {
            let (d, c) = ring8();
            let mut rng = SimRng::seed_from_u64(seed);
            let s = d.sample(200, &mut rng) + Array2::from_shape_simple_fn((200, 2), || rng.random_range(-0.2..0.2));
            let base = mode_coverage(s.view(), c.view(), 0.15, 0.05).unwrap();

            let mut rows: Vec<usize> = (0..200).collect();
            rows.reverse();
            rows.rotate_left(shift * 7);
            let s2 = s.select(Axis(0), &rows);
            let perm: Vec<usize> = (0..8).map(|i| (i + shift) % 8).collect();
            let c2 = c.select(Axis(0), &perm);
            let other = mode_coverage(s2.view(), c2.view(), 0.15, 0.05).unwrap();

            prop_assert_eq!(base.modes_captured, other.modes_captured);
            prop_assert_eq!(base.hq_fraction, other.hq_fraction);
            for (k, &p) in perm.iter().enumerate() {
                prop_assert_eq!(other.per_mode_counts[k], base.per_mode_counts[p]);
            }
        }

        #[test]
        fn coverage_bounds(n in 0usize..300, radius in 0.01f64..5.0, frac in 0.0f64..1.0, seed in 0u64..100) {
            let (_, c) = ring8();
            let mut rng = SimRng::seed_from_u64(seed);
            let s = Array2::from_shape_simple_fn((n, 2), || rng.random_range(-3.0..3.0));
            let r = mode_coverage(s.view(), c.view(), radius, frac).unwrap();
            prop_assert!(r.modes_captured <= 8);
            prop_assert!((0.0..=1.0).contains(&r.hq_fraction));
            prop_assert!(r.per_mode_counts.iter().sum::<usize>() <= n);
        }

        #[test]
        fn mse_escape_flips_at_d_crit(lambda in 0.05f64..0.5, n in 1usize..4) {
            let p = EscapeParams { lambda, n_dims: n, ..Default::default() };
            let dc = d_crit(n, lambda).unwrap();
            prop_assume!(dc < 5.0);
            let below = Landscape::new(10.0, dc * 0.9).unwrap();
            let above = Landscape::new(10.0, (dc * 1.1).min(9.9)).unwrap();
            prop_assert!(!escape_experiment(&below, EscapeMethod::Mse, &p).unwrap().crossed);
            prop_assert!(escape_experiment(&above, EscapeMethod::Mse, &p).unwrap().crossed);
        }
    }
}
