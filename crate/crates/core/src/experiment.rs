//! Experiment files and the artifacts behind the command-line verbs: single
//! runs, loss/penalty sweeps, the escape table, snapshot re-scoring and
//! contour export.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dense::{self, hcat};
use crate::evaluation::{self, Bounds, ContourGrid, EscapeParams, EscapeRow, InversionError, ModeCoverageReport};
use crate::models::{BiGan, ModelError};
use crate::objectives::{LossKind, ObjectiveSpec, PenaltyKind};
use crate::toydata::{LatentSpec, ToyDistribution};
use crate::trainer::{self, RunArtifacts, TrainConfig, TrainError, METRICS_HEADER};
use crate::{rng_stream, SimRng};

/// Point-cloud files never hold more rows than this.
pub const MAX_CLOUD_ROWS: usize = 50_000;

const STREAM_CLOUDS: u64 = 16;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] evaluation::EvalError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{failed} of {total} runs aborted")]
    RunsAborted { failed: usize, total: usize },
}

type Result<T> = std::result::Result<T, ExperimentError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(io_err(path))
}

fn schema(path: &str, message: impl Into<String>) -> ExperimentError {
    ExperimentError::Schema {
        path: path.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContourConfig {
    pub bounds: Bounds,
    /// `[nx, ny]`
    pub resolution: [usize; 2],
}

impl Default for ContourConfig {
    fn default() -> Self {
        Self {
            bounds: Bounds::default(),
            resolution: [100, 100],
        }
    }
}

/// Loss/penalty matrix and seeds of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub losses: Vec<LossKind>,
    pub penalties: Vec<PenaltyKind>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EscapeConfig {
    pub peak: f64,
    pub depths: Vec<f64>,
    pub params: EscapeParams,
}

impl Default for EscapeConfig {
    fn default() -> Self {
        Self {
            peak: 10.0,
            depths: vec![0.25, 0.5, 1.0, 1.5, 2.0, 2.25, 2.4, 2.6, 2.75, 3.0, 4.0, 6.0, 8.0],
            params: EscapeParams::default(),
        }
    }
}

fn default_latent() -> LatentSpec {
    LatentSpec { dim: 2 }
}

fn default_cloud_rows() -> usize {
    10_000
}

/// One experiment file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    #[serde(default)]
    pub distribution: ToyDistribution,
    #[serde(default = "default_latent")]
    pub latent: LatentSpec,
    #[serde(default)]
    pub contour: ContourConfig,
    /// Rows per point-cloud file, at most [`MAX_CLOUD_ROWS`].
    #[serde(default = "default_cloud_rows")]
    pub point_cloud_rows: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub escape: Option<EscapeConfig>,
}

impl ExperimentConfig {
    pub fn new(train: TrainConfig) -> Self {
        Self {
            train,
            distribution: ToyDistribution::default(),
            latent: default_latent(),
            contour: ContourConfig::default(),
            point_cloud_rows: default_cloud_rows(),
            out_dir: None,
            sweep: None,
            escape: None,
        }
    }

    /// Parses and validates; errors name the offending key path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            schema(&path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate().map_err(|m| schema("train", m))?;
        self.distribution
            .validate()
            .map_err(|e| schema("distribution", e.to_string()))?;
        if self.latent.dim == 0 {
            return Err(schema("latent.dim", "must be >= 1"));
        }
        if self.contour.resolution.iter().any(|&r| r < 2) {
            return Err(schema("contour.resolution", "each entry must be >= 2"));
        }
        let b = self.contour.bounds;
        if !(b.x_max > b.x_min && b.y_max > b.y_min) {
            return Err(schema("contour.bounds", "must have positive extent"));
        }
        if self.point_cloud_rows > MAX_CLOUD_ROWS {
            return Err(schema(
                "point_cloud_rows",
                format!("{} exceeds the cap of {MAX_CLOUD_ROWS}", self.point_cloud_rows),
            ));
        }
        if let Some(s) = &self.sweep {
            if s.losses.is_empty() || s.penalties.is_empty() || s.seeds.is_empty() {
                return Err(schema("sweep", "losses, penalties and seeds must be non-empty"));
            }
        }
        if let Some(e) = &self.escape {
            evaluation::d_crit(e.params.n_dims, e.params.lambda).map_err(|err| schema("escape.params", err.to_string()))?;
            for &d in &e.depths {
                evaluation::Landscape::new(e.peak, d).map_err(|err| schema("escape.depths", err.to_string()))?;
            }
        }
        Ok(())
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

/// CSV with a header; values printed in shortest round-trip form.
pub fn matrix_csv(header: &[&str], m: ArrayView2<f64>) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in m.rows() {
        let mut first = true;
        for v in row {
            if !first {
                out.push(',');
            }
            first = false;
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    out
}

/// Point clouds written next to a run: real data, generated samples,
/// reconstructions `G(E(x))`, and the joint tuples `(x, E(x))`, `(G(z), z)`.
pub struct PointClouds {
    pub real: Array2<f64>,
    pub generated: Array2<f64>,
    pub reconstructed: Array2<f64>,
    pub real_tuples: Array2<f64>,
    pub fake_tuples: Array2<f64>,
}

pub fn point_clouds(m: &BiGan, dist: &ToyDistribution, latent: &LatentSpec, rows: usize, seed: u64) -> PointClouds {
    let rows = rows.min(MAX_CLOUD_ROWS);
    let mut rng: SimRng = rng_stream(seed, STREAM_CLOUDS);
    let x = dist.sample(rows, &mut rng);
    let z = latent.sample(rows, &mut rng);
    let ex = dense::predict(&m.encoder, x.view());
    let gz = dense::predict(&m.generator, z.view());
    let reconstructed = dense::predict(&m.generator, ex.view());
    PointClouds {
        real_tuples: hcat(x.view(), ex.view()),
        fake_tuples: hcat(gz.view(), z.view()),
        real: x,
        generated: gz,
        reconstructed,
    }
}

fn tuple_header(x_dim: usize, z_dim: usize) -> Vec<String> {
    (1..=x_dim)
        .map(|i| format!("x{i}"))
        .chain((1..=z_dim).map(|i| format!("z{i}")))
        .collect()
}

impl PointClouds {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let x_dim = self.real.ncols();
        let z_dim = self.real_tuples.ncols() - x_dim;
        let xh = tuple_header(x_dim, 0);
        let th = tuple_header(x_dim, z_dim);
        let xh: Vec<&str> = xh.iter().map(String::as_str).collect();
        let th: Vec<&str> = th.iter().map(String::as_str).collect();
        for (name, m, h) in [
            ("real.csv", &self.real, &xh),
            ("generated.csv", &self.generated, &xh),
            ("reconstructed.csv", &self.reconstructed, &xh),
            ("real_tuples.csv", &self.real_tuples, &th),
            ("fake_tuples.csv", &self.fake_tuples, &th),
        ] {
            write_file(&dir.join(name), matrix_csv(h, m.view()))?;
        }
        Ok(())
    }
}

fn write_contour(dir: &Path, grid: &ContourGrid) -> Result<()> {
    write_file(&dir.join("contour.csv"), grid.to_csv())?;
    write_file(&dir.join("contour.json"), grid.sidecar_json() + "\n")
}

/// Result of [`cmd_train`].
#[derive(Debug)]
pub struct TrainOutcome {
    pub dir: PathBuf,
    pub artifacts: RunArtifacts,
    pub coverage: ModeCoverageReport,
    pub contour: ContourGrid,
}

/// Trains one configuration and writes every artifact into `dir`.
///
/// An aborted run still leaves its partial artifacts plus `error.json`.
pub fn cmd_train(cfg: &ExperimentConfig, dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_file(&dir.join("experiment.json"), cfg.to_json_pretty())?;
    let art = match trainer::train(&cfg.train, &cfg.distribution, &cfg.latent) {
        Ok(a) => a,
        Err(TrainError::Aborted(abort)) => {
            abort.partial.write_dir(dir).map_err(io_err(dir))?;
            let record = serde_json::json!({"status": "aborted", "step": abort.step, "reason": abort.reason});
            write_file(&dir.join("error.json"), record.to_string() + "\n")?;
            return Err(TrainError::Aborted(abort).into());
        }
        Err(e) => return Err(e.into()),
    };
    art.write_dir(dir).map_err(io_err(dir))?;
    let m = art.final_model().expect("at least the initial snapshot");
    let coverage = art.final_coverage.clone().expect("at least one evaluation");
    write_file(
        &dir.join("coverage.json"),
        serde_json::to_string_pretty(&coverage).expect("report serializes") + "\n",
    )?;
    let [nx, ny] = cfg.contour.resolution;
    let contour = evaluation::bigan_contour(m, cfg.contour.bounds, (nx, ny))?;
    write_contour(dir, &contour)?;
    point_clouds(m, &cfg.distribution, &cfg.latent, cfg.point_cloud_rows, cfg.train.seed).write(dir)?;
    Ok(TrainOutcome {
        dir: dir.to_path_buf(),
        artifacts: art,
        coverage,
        contour,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub loss: LossKind,
    pub penalty: PenaltyKind,
    pub seed: u64,
    pub modes_captured: usize,
    pub hq_fraction: f64,
    pub x_l2: f64,
    pub aborted: bool,
    /// Roughness of the final `D(x, E(x))` contour; NaN when aborted.
    pub contour_roughness: f64,
}

pub const SWEEP_HEADER: &str = "loss,penalty,seed,modes_captured,hq_fraction,x_l2,status";

impl SweepRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.loss.name(),
            self.penalty.name(),
            self.seed,
            self.modes_captured,
            self.hq_fraction,
            self.x_l2,
            if self.aborted { "aborted" } else { "ok" }
        )
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

/// Directory name of one sweep cell.
pub fn run_dir_name(loss: LossKind, penalty: PenaltyKind, seed: u64) -> String {
    format!("{}__{}__seed{}", loss.name(), penalty.name(), seed)
}

/// Last row of a run's `metrics.csv`.
pub fn last_metrics_row(dir: &Path) -> Result<trainer::MetricRow> {
    let path = dir.join("metrics.csv");
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(ExperimentError::Usage(format!("{}: unexpected header", path.display())));
    }
    lines
        .last()
        .and_then(trainer::MetricRow::parse_csv_line)
        .ok_or_else(|| ExperimentError::Usage(format!("{}: no metric rows", path.display())))
}

/// Runs the loss x penalty x seed cross product, `jobs` runs at a time.
/// Rows come back in cross-product order (losses outermost, seeds innermost)
/// regardless of scheduling. Fails with [`ExperimentError::RunsAborted`] after
/// writing everything if any run aborted.
pub fn cmd_sweep(cfg: &ExperimentConfig, dir: &Path, jobs: usize) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let spec = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| schema("sweep", "missing; a sweep needs losses, penalties and seeds"))?;
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_file(&dir.join("experiment.json"), cfg.to_json_pretty())?;

    let mut cells = Vec::new();
    for &loss in &spec.losses {
        for &penalty in &spec.penalties {
            for &seed in &spec.seeds {
                cells.push((loss, penalty, seed));
            }
        }
    }
    let run_one = |&(loss, penalty, seed): &(LossKind, PenaltyKind, u64)| -> Result<SweepRow> {
        let base = cfg.train.objective;
        let objective = ObjectiveSpec {
            loss_kind: loss,
            penalty_kind: penalty,
            critic_updates_per_gen: ObjectiveSpec::new(loss, penalty).critic_updates_per_gen,
            ..base
        };
        let mut run_cfg = cfg.clone();
        run_cfg.sweep = None;
        run_cfg.escape = None;
        run_cfg.train.objective = objective;
        run_cfg.train.seed = seed;
        let run_dir = dir.join("runs").join(run_dir_name(loss, penalty, seed));
        let (aborted, roughness) = match cmd_train(&run_cfg, &run_dir) {
            Ok(out) => (false, out.contour.roughness()),
            Err(ExperimentError::Train(TrainError::Aborted(_))) => (true, f64::NAN),
            Err(e) => return Err(e),
        };
        let last = last_metrics_row(&run_dir)?;
        Ok(SweepRow {
            loss,
            penalty,
            seed,
            modes_captured: last.modes_captured,
            hq_fraction: last.hq_fraction,
            x_l2: last.x_l2,
            aborted,
            contour_roughness: roughness,
        })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| ExperimentError::Usage(e.to_string()))?;
    let rows: Vec<SweepRow> = pool.install(|| cells.par_iter().map(run_one).collect::<Result<Vec<_>>>())?;

    write_file(&dir.join("summary.csv"), sweep_csv(&rows))?;
    let mut contours = String::from("loss,penalty,seed,contour_roughness\n");
    for r in &rows {
        let _ = writeln!(contours, "{},{},{},{}", r.loss.name(), r.penalty.name(), r.seed, r.contour_roughness);
    }
    write_file(&dir.join("contours.csv"), contours)?;
    let failed = rows.iter().filter(|r| r.aborted).count();
    if failed > 0 {
        return Err(ExperimentError::RunsAborted {
            failed,
            total: rows.len(),
        });
    }
    Ok(rows)
}

/// Mean `modes_captured` of the rows matching `loss` and `penalty`.
pub fn mean_modes(rows: &[SweepRow], loss: LossKind, penalty: PenaltyKind) -> Option<f64> {
    let sel: Vec<f64> = rows
        .iter()
        .filter(|r| r.loss == loss && r.penalty == penalty)
        .map(|r| r.modes_captured as f64)
        .collect();
    (!sel.is_empty()).then(|| sel.iter().sum::<f64>() / sel.len() as f64)
}

/// Escape outcomes across valley depths; writes `escape.csv` into `dir` if
/// given.
pub fn cmd_escape(cfg: &EscapeConfig, dir: Option<&Path>) -> Result<Vec<EscapeRow>> {
    let rows = evaluation::escape_table(cfg.peak, &cfg.depths, &cfg.params)?;
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        write_file(&dir.join("escape.csv"), evaluation::escape_csv(&rows))?;
    }
    Ok(rows)
}

/// Re-scored snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub coverage: ModeCoverageReport,
    pub inversion: InversionError,
    pub seed: u64,
}

/// Coverage and inversion error of a snapshot on fresh samples drawn from
/// `seed`.
pub fn cmd_eval(cfg: &ExperimentConfig, snapshot: &Path, seed: u64) -> Result<EvalReport> {
    let m = BiGan::load(snapshot)?;
    check_snapshot_dims(&m, cfg)?;
    let mut rng: SimRng = rng_stream(seed, STREAM_CLOUDS + 1);
    let n = cfg.train.eval.n_samples;
    let x = cfg.distribution.sample(n, &mut rng);
    let z = cfg.latent.sample(n, &mut rng);
    let generated = dense::predict(&m.generator, z.view());
    let centers = evaluation::centers_matrix(&cfg.distribution);
    let coverage = evaluation::mode_coverage(
        generated.view(),
        centers.view(),
        cfg.train.eval.radius_for(&cfg.distribution),
        cfg.train.eval.min_fraction,
    )?;
    let inversion = evaluation::inversion_error(&m.generator, &m.encoder, x.view(), z.view());
    Ok(EvalReport {
        coverage,
        inversion,
        seed,
    })
}

/// `D(x, E(x))` grid of a snapshot, written to `dir` as CSV plus sidecar.
pub fn cmd_contour(cfg: &ExperimentConfig, snapshot: &Path, dir: &Path) -> Result<ContourGrid> {
    let m = BiGan::load(snapshot)?;
    check_snapshot_dims(&m, cfg)?;
    let [nx, ny] = cfg.contour.resolution;
    let grid = evaluation::bigan_contour(&m, cfg.contour.bounds, (nx, ny))?;
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_contour(dir, &grid)?;
    Ok(grid)
}

fn check_snapshot_dims(m: &BiGan, cfg: &ExperimentConfig) -> Result<()> {
    if m.x_dim() != cfg.distribution.dim() || m.z_dim() != cfg.latent.dim {
        return Err(ExperimentError::Usage(format!(
            "snapshot has x_dim {} / z_dim {}, config expects {} / {}",
            m.x_dim(),
            m.z_dim(),
            cfg.distribution.dim(),
            cfg.latent.dim
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ArchConfig;

    fn tiny() -> ExperimentConfig {
        let mut train = TrainConfig::new(ObjectiveSpec::new(LossKind::Lol1, PenaltyKind::PairwiseGp));
        train.steps = 10;
        train.batch_size = 8;
        train.eval_every = 5;
        train.arch = ArchConfig {
            hidden_width: 6,
            hidden_layers: 2,
            leaky_slope: 0.2,
        };
        train.eval.n_samples = 100;
        let mut cfg = ExperimentConfig::new(train);
        cfg.point_cloud_rows = 20;
        cfg.contour.resolution = [5, 4];
        cfg
    }

    #[test]
    fn minimal_file_parses_with_defaults() {
        let cfg = ExperimentConfig::from_json(
            r#"{"train": {"objective": {"loss_kind": "lol1", "penalty_kind": "pairwise_gp"}}}"#,
        )
        .unwrap();
        assert_eq!(cfg.distribution, ToyDistribution::default());
        assert_eq!(cfg.latent.dim, 2);
        assert_eq!(cfg.contour.resolution, [100, 100]);
        let back = ExperimentConfig::from_json(&cfg.to_json_pretty()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn schema_errors_name_the_key_path() {
        let bad = r#"{"train": {"objective": {"loss_kind": "lol1", "penalty_kind": "pairwise_gp"}, "adam": {"alpa": 1}}}"#;
        match ExperimentConfig::from_json(bad) {
            Err(ExperimentError::Schema { path, message }) => {
                assert_eq!(path, "train.adam.alpa");
                assert!(message.contains("alpa"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        let bad = r#"{"train": {"objective": {"loss_kind": "lol3", "penalty_kind": "none"}}}"#;
        match ExperimentConfig::from_json(bad) {
            Err(ExperimentError::Schema { path, .. }) => assert_eq!(path, "train.objective.loss_kind"),
            other => panic!("{other:?}"),
        }
        let bad = r#"{"train": {"objective": {"loss_kind": "lol1", "penalty_kind": "none"}, "batch_size": 0}}"#;
        assert!(matches!(ExperimentConfig::from_json(bad), Err(ExperimentError::Schema { .. })));
        let bad = r#"{"train": {"objective": {"loss_kind": "lol1", "penalty_kind": "none"}}, "point_cloud_rows": 50001}"#;
        assert!(matches!(ExperimentConfig::from_json(bad), Err(ExperimentError::Schema { .. })));
    }

    #[test]
    fn train_writes_every_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let out = cmd_train(&tiny(), dir.path()).unwrap();
        for f in [
            "experiment.json",
            "config.json",
            "metrics.csv",
            "losses.csv",
            "coverage.json",
            "contour.csv",
            "contour.json",
            "real.csv",
            "generated.csv",
            "reconstructed.csv",
            "real_tuples.csv",
            "fake_tuples.csv",
            "snapshots/step_00000000.json",
            "snapshots/step_00000010.json",
        ] {
            assert!(dir.path().join(f).is_file(), "{f}");
        }
        let tuples = std::fs::read_to_string(dir.path().join("fake_tuples.csv")).unwrap();
        assert!(tuples.starts_with("x1,x2,z1,z2\n"));
        assert_eq!(tuples.lines().count(), 21);
        let echoed = ExperimentConfig::load(&dir.path().join("experiment.json")).unwrap();
        assert_eq!(echoed, tiny());
        assert_eq!(out.contour.values.dim(), (4, 5));
    }

    #[test]
    fn same_config_gives_identical_metrics() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        cmd_train(&tiny(), a.path()).unwrap();
        cmd_train(&tiny(), b.path()).unwrap();
        for f in ["metrics.csv", "losses.csv", "real_tuples.csv", "contour.csv"] {
            assert_eq!(
                std::fs::read(a.path().join(f)).unwrap(),
                std::fs::read(b.path().join(f)).unwrap(),
                "{f}"
            );
        }
    }

    #[test]
    fn sweep_rows_are_ordered_and_recomputable() {
        let mut cfg = tiny();
        cfg.sweep = Some(SweepSpec {
            losses: vec![LossKind::Vanilla, LossKind::Lol1],
            penalties: vec![PenaltyKind::PairwiseGp],
            seeds: vec![3, 1, 2],
        });
        let dir = tempfile::tempdir().unwrap();
        let rows = cmd_sweep(&cfg, dir.path(), 3).unwrap();
        assert_eq!(rows.len(), 6);
        let order: Vec<(LossKind, u64)> = rows.iter().map(|r| (r.loss, r.seed)).collect();
        assert_eq!(
            order,
            vec![
                (LossKind::Vanilla, 3),
                (LossKind::Vanilla, 1),
                (LossKind::Vanilla, 2),
                (LossKind::Lol1, 3),
                (LossKind::Lol1, 1),
                (LossKind::Lol1, 2)
            ]
        );
        for r in &rows {
            let last = last_metrics_row(&dir.path().join("runs").join(run_dir_name(r.loss, r.penalty, r.seed))).unwrap();
            assert_eq!((last.modes_captured, last.hq_fraction, last.x_l2), (r.modes_captured, r.hq_fraction, r.x_l2));
        }
        let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert_eq!(summary, sweep_csv(&rows));

        let serial = tempfile::tempdir().unwrap();
        assert_eq!(cmd_sweep(&cfg, serial.path(), 1).unwrap(), {
            // NaN roughness never occurs here, so plain equality is fine
            rows.clone()
        });
        assert!(mean_modes(&rows, LossKind::Lol1, PenaltyKind::PairwiseGp).is_some());
        assert!(mean_modes(&rows, LossKind::Lol2, PenaltyKind::PairwiseGp).is_none());
    }

    #[test]
    fn sweep_cells_use_their_own_critic_schedule() {
        let mut cfg = tiny();
        cfg.train.steps = 2;
        cfg.sweep = Some(SweepSpec {
            losses: vec![LossKind::Wasserstein],
            penalties: vec![PenaltyKind::UniformGp],
            seeds: vec![0],
        });
        let dir = tempfile::tempdir().unwrap();
        cmd_sweep(&cfg, dir.path(), 1).unwrap();
        let run = dir.path().join("runs").join(run_dir_name(LossKind::Wasserstein, PenaltyKind::UniformGp, 0));
        let echoed = ExperimentConfig::load(&run.join("experiment.json")).unwrap();
        assert_eq!(echoed.train.objective.critic_updates_per_gen, 5);
    }

    #[test]
    fn aborted_run_leaves_partial_artifacts() {
        let mut cfg = tiny();
        cfg.train.adam.alpha = 1e300;
        let dir = tempfile::tempdir().unwrap();
        match cmd_train(&cfg, dir.path()) {
            Err(ExperimentError::Train(TrainError::Aborted(_))) => {}
            other => panic!("expected abort, got {other:?}"),
        }
        assert!(dir.path().join("error.json").is_file());
        assert!(dir.path().join("metrics.csv").is_file());
    }

    #[test]
    fn escape_table_marks_the_threshold() {
        let dir = tempfile::tempdir().unwrap();
        let rows = cmd_escape(&EscapeConfig::default(), Some(dir.path())).unwrap();
        assert!(rows.iter().all(|r| r.d_crit == 2.5));
        assert!(rows.iter().all(|r| r.mse.crossed == r.above_d_crit));
        let csv = std::fs::read_to_string(dir.path().join("escape.csv")).unwrap();
        assert_eq!(csv.lines().count(), rows.len() + 1);
    }

    #[test]
    fn eval_and_contour_from_snapshot() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        cmd_train(&cfg, dir.path()).unwrap();
        let snap = dir.path().join("snapshots/step_00000010.json");
        let r = cmd_eval(&cfg, &snap, 4).unwrap();
        assert_eq!(r.coverage.n_samples, 100);
        assert_eq!(r, cmd_eval(&cfg, &snap, 4).unwrap());
        let out = dir.path().join("again");
        let g = cmd_contour(&cfg, &snap, &out).unwrap();
        assert_eq!(
            std::fs::read_to_string(out.join("contour.csv")).unwrap(),
            std::fs::read_to_string(dir.path().join("contour.csv")).unwrap()
        );
        assert_eq!(g.values.len(), 20);
    }
}
