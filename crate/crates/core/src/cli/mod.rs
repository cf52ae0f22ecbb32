//! The `sphere-attn` command-line tool.
//!
//! Every subcommand prints one JSON document on stdout and sends diagnostics
//! to stderr. Exit status is 0 on success, 1 when a check fails (gradcheck)
//! and 2 on any error. Settings resolve as command-line flags, then the JSON
//! file given by `--config`, then built-in defaults.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::attention::gradcheck::{check_case, GradCheckCase, DEFAULT_EPS};
use crate::attention::{sphereformer_forward, HeadSplit, SphereConfig, SphereWeights};
use crate::error::{config_err, Result};
use crate::format::{load_cloud, load_weights, save_cloud};
use crate::geometry::{clip_range, voxelize, PointCloud, SceneRange};
use crate::partition::{
    cubic_partition, partition_stats, radial_partition, CubicWindowConfig, RadialWindowConfig, WindowPartition,
};
use crate::posenc::PosEncConfig;
use crate::synth::{generate_scene, BeamSceneConfig};

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "SPHERE_ATTN_THREADS";

/// Everything a command can be configured with. Any subset may appear in a
/// `--config` JSON file; missing fields take their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub radial: RadialWindowConfig,
    pub cubic: CubicWindowConfig,
    /// Explicit position-encoding bins; derived from the windows when absent.
    pub posenc: Option<PosEncConfig>,
    pub table_len: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub scale_logits: bool,
    pub head_split: HeadSplit,
    /// Voxel size in metres. When set, inputs are clipped to `range` and
    /// voxelized before use.
    pub voxel: Option<f64>,
    pub range: SceneRange,
    pub scene: BeamSceneConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            radial: RadialWindowConfig::default(),
            cubic: CubicWindowConfig::default(),
            posenc: None,
            table_len: 16,
            heads: 4,
            head_dim: 4,
            scale_logits: false,
            head_split: HeadSplit::Dynamic,
            voxel: None,
            range: SceneRange::default(),
            scene: BeamSceneConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn channels(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn sphere_config(&self) -> SphereConfig {
        let mut cfg = SphereConfig::for_windows(self.radial, self.cubic, self.table_len);
        if let Some(p) = self.posenc {
            cfg.posenc = p;
        }
        cfg.head_split = self.head_split;
        cfg
    }

    /// Checks that all settings are mutually consistent.
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.head_dim == 0 {
            return Err(config_err!("heads and head_dim must be positive"));
        }
        if let Some(p) = self.posenc {
            if p.table_len != self.table_len {
                return Err(config_err!("posenc.table_len {} differs from table_len {}", p.table_len, self.table_len));
            }
        }
        self.sphere_config().validate_heads(self.heads)?;
        if let Some(v) = self.voxel {
            if !(v.is_finite() && v > 0.0) {
                return Err(config_err!("voxel size must be positive, got {v}"));
            }
        }
        self.range.validate()?;
        self.scene.validate()
    }

    fn scene_config(&self) -> BeamSceneConfig {
        BeamSceneConfig { seed: self.seed, ..self.scene.clone() }
    }

    fn preprocess(&self, cloud: PointCloud) -> Result<PointCloud> {
        match self.voxel {
            Some(v) => voxelize(&clip_range(&cloud, &self.range), v, &self.range),
            None => Ok(cloud),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "sphere-attn", version, about = "Spherical window attention for LiDAR point clouds")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene and write it as SPC1.
    Gen {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print window occupancy and reach statistics for a cloud.
    PartitionStats {
        input: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum, default_value_t = Mode::Radial)]
        mode: Mode,
    },
    /// Run the head-split attention layer over a cloud.
    Forward {
        input: PathBuf,
        /// SPW1 weights; random weights from the seed when omitted.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        out: PathBuf,
        /// Compute in f64 instead of f32.
        #[arg(long)]
        f64: bool,
    },
    /// Compare analytic gradients against central finite differences.
    Gradcheck {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 6)]
        tokens: usize,
        #[arg(long)]
        heads: Option<usize>,
        #[arg(long)]
        head_dim: Option<usize>,
        #[arg(long)]
        table_len: Option<usize>,
        #[arg(long, default_value_t = 1)]
        trials: u64,
        /// Perturb the analytic gradient; the check must then fail.
        #[arg(long, hide = true)]
        corrupt_backward: bool,
    },
    /// Time partitioning and the forward pass.
    Bench {
        /// SPC1 input; use --synthetic instead to generate one.
        input: Option<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
        /// Generate a scene with about N points.
        #[arg(long, conflicts_with = "input")]
        synthetic: Option<usize>,
        #[arg(long, default_value_t = 5)]
        repeat: usize,
        #[arg(long)]
        skip_forward: bool,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Radial,
    Cubic,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON file with any subset of the run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Radial window range limit, metres.
    #[arg(long)]
    pub window_r: Option<f64>,
    /// Radial window azimuth size, degrees.
    #[arg(long)]
    pub window_theta: Option<f64>,
    /// Radial window inclination size, degrees.
    #[arg(long)]
    pub window_phi: Option<f64>,
    /// Cubic window side, metres.
    #[arg(long)]
    pub cubic_side: Option<f64>,
    /// Clip to the scene range and voxelize at this size, metres.
    #[arg(long)]
    pub voxel: Option<f64>,
}

impl CommonArgs {
    /// Builds the run configuration: defaults, then the file, then flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)?;
                serde_json::from_str(&text).map_err(|e| config_err!("{}: {e}", path.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(v) = self.window_r {
            cfg.radial.r_max = v;
        }
        if let Some(v) = self.window_theta {
            cfg.radial.delta_theta = v;
        }
        if let Some(v) = self.window_phi {
            cfg.radial.delta_phi = v;
        }
        if let Some(v) = self.cubic_side {
            cfg.cubic = CubicWindowConfig::uniform(v);
        }
        if self.voxel.is_some() {
            cfg.voxel = self.voxel;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Outcome of a successful command.
enum Outcome {
    Pass(serde_json::Value),
    CheckFailed(serde_json::Value, String),
}

fn partition_for(mode: Mode, cloud: &PointCloud, cfg: &RunConfig) -> WindowPartition {
    let sc = cfg.sphere_config();
    match mode {
        Mode::Radial => radial_partition(cloud.positions(), sc.origin, &sc.radial),
        Mode::Cubic => cubic_partition(cloud.positions(), &sc.cubic),
    }
}

/// SHA-256 over the partition's offsets, token ids and keys (little-endian).
pub fn partition_hash(p: &WindowPartition) -> String {
    let mut h = Sha256::new();
    for &o in p.offsets() {
        h.update((o as u64).to_le_bytes());
    }
    for &t in p.token_ids() {
        h.update((t as u64).to_le_bytes());
    }
    for k in p.keys() {
        for v in k {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn load_input(path: &Path, cfg: &RunConfig) -> Result<PointCloud> {
    let raw = load_cloud(path)?;
    cfg.preprocess(raw)
}

fn cmd_gen(common: &CommonArgs, out: &Path) -> Result<Outcome> {
    let cfg = common.resolve()?;
    let cloud = generate_scene(&cfg.scene_config())?;
    save_cloud(out, &cloud)?;
    Ok(Outcome::Pass(json!({
        "points": cloud.len(),
        "feature_dim": cloud.feature_dim(),
        "seed": cfg.seed,
        "out": out.display().to_string(),
    })))
}

fn cmd_partition_stats(input: &Path, common: &CommonArgs, mode: Mode) -> Result<Outcome> {
    let cfg = common.resolve()?;
    let cloud = load_input(input, &cfg)?;
    let partition = partition_for(mode, &cloud, &cfg);
    let stats = partition_stats(&partition, cloud.positions());
    let mut value = serde_json::to_value(&stats).map_err(|e| crate::Error::Format(e.to_string()))?;
    value["mode"] = json!(if mode == Mode::Radial { "radial" } else { "cubic" });
    value["points"] = json!(cloud.len());
    Ok(Outcome::Pass(value))
}

fn model_weights<T: crate::numerics::Real>(path: Option<&Path>, cfg: &RunConfig) -> Result<SphereWeights<T>> {
    let weights = match path {
        Some(p) => load_weights::<T>(p)?,
        None => SphereWeights::random(cfg.heads, cfg.head_dim, cfg.table_len, &mut ChaCha8Rng::seed_from_u64(cfg.seed)),
    };
    let mut weights = weights;
    weights.params.scale_logits = cfg.scale_logits;
    cfg.sphere_config().validate(&weights)?;
    Ok(weights)
}

fn run_forward<T: crate::numerics::Real>(
    cloud: &PointCloud,
    weights: Option<&Path>,
    cfg: &RunConfig,
) -> Result<crate::numerics::DenseMatrix<f64>> {
    let weights = model_weights::<T>(weights, cfg)?;
    let c = weights.params.channels();
    if cloud.feature_dim() != c {
        return Err(config_err!("input has {} feature channels but the model expects {c}", cloud.feature_dim()));
    }
    let z = sphereformer_forward(cloud.positions(), &cloud.features().cast::<T>(), &cfg.sphere_config(), &weights)?;
    Ok(z.cast())
}

fn cmd_forward(input: &Path, weights: Option<&Path>, common: &CommonArgs, out: &Path, wide: bool) -> Result<Outcome> {
    let cfg = common.resolve()?;
    let cloud = load_input(input, &cfg)?;
    let start = Instant::now();
    let z = if wide { run_forward::<f64>(&cloud, weights, &cfg)? } else { run_forward::<f32>(&cloud, weights, &cfg)? };
    let seconds = start.elapsed().as_secs_f64();
    let output = cloud.with_features(z)?;
    save_cloud(out, &output)?;
    eprintln!("forward: {} tokens in {seconds:.3} s", output.len());
    Ok(Outcome::Pass(json!({
        "tokens": output.len(),
        "channels": output.feature_dim(),
        "precision": if wide { "f64" } else { "f32" },
        "out": out.display().to_string(),
    })))
}

#[allow(clippy::too_many_arguments)]
fn cmd_gradcheck(
    common: &CommonArgs,
    tokens: usize,
    heads: Option<usize>,
    head_dim: Option<usize>,
    table_len: Option<usize>,
    trials: u64,
    corrupt: bool,
) -> Result<Outcome> {
    let mut cfg = common.resolve()?;
    cfg.heads = heads.unwrap_or(4);
    cfg.head_dim = head_dim.unwrap_or(2);
    cfg.table_len = table_len.unwrap_or(8);
    cfg.validate()?;
    if tokens == 0 || trials == 0 {
        return Err(config_err!("tokens and trials must be positive"));
    }
    let mut reports = Vec::new();
    let mut failure = None;
    for t in 0..trials {
        let case = GradCheckCase {
            seed: cfg.seed.wrapping_add(t),
            tokens,
            heads: cfg.heads,
            head_dim: cfg.head_dim,
            table_len: cfg.table_len,
            scale_logits: cfg.scale_logits,
            head_split: cfg.head_split,
        };
        let report = check_case(&case, DEFAULT_EPS, corrupt)?;
        if !report.passed() && failure.is_none() {
            let worst = report.worst();
            failure = Some(format!(
                "gradient check failed for seed {}: {} has relative error {:.3e}",
                case.seed, worst.name, worst.max_rel_err
            ));
        }
        reports.push(report);
    }
    let mut per_param = serde_json::Map::new();
    for r in &reports {
        for p in &r.params {
            let prev = per_param.get(&p.name).and_then(|v| v.as_f64()).unwrap_or(0.0);
            per_param.insert(p.name.clone(), json!(prev.max(p.max_rel_err)));
        }
    }
    let max_row_sum_err = reports.iter().map(|r| r.max_row_sum_err).fold(0.0, f64::max);
    let value = json!({
        "passed": failure.is_none(),
        "trials": trials,
        "eps": DEFAULT_EPS,
        "max_rel_err": per_param,
        "max_row_sum_err": max_row_sum_err,
    });
    Ok(match failure {
        None => Outcome::Pass(value),
        Some(msg) => Outcome::CheckFailed(value, msg),
    })
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

fn timing(mut samples: Vec<f64>) -> serde_json::Value {
    samples.sort_by(f64::total_cmp);
    json!({ "median_s": percentile(&samples, 0.5), "p95_s": percentile(&samples, 0.95), "runs": samples.len() })
}

fn cmd_bench(
    input: Option<&Path>,
    common: &CommonArgs,
    synthetic: Option<usize>,
    repeat: usize,
    skip_forward: bool,
) -> Result<Outcome> {
    let cfg = common.resolve()?;
    if repeat == 0 {
        return Err(config_err!("--repeat must be at least 1"));
    }
    let cloud = match (input, synthetic) {
        (Some(p), _) => load_input(p, &cfg)?,
        (None, Some(n)) => {
            let mut scene = cfg.scene_config();
            scene.dropout_prob = 0.0;
            scene.feature_dim = cfg.channels();
            scene.azimuth_steps = n.div_ceil(scene.beam_count).max(1);
            let cloud = generate_scene(&scene)?;
            let keep: Vec<usize> = (0..cloud.len().min(n)).collect();
            cloud.select(&keep)
        }
        (None, None) => return Err(config_err!("bench needs an input file or --synthetic N")),
    };
    let sc = cfg.sphere_config();
    let mut partition_times = Vec::with_capacity(repeat);
    let mut hashes = None;
    for _ in 0..repeat {
        let start = Instant::now();
        let radial = radial_partition(cloud.positions(), sc.origin, &sc.radial);
        let cubic = cubic_partition(cloud.positions(), &sc.cubic);
        partition_times.push(start.elapsed().as_secs_f64());
        let h = (partition_hash(&radial), partition_hash(&cubic));
        if let Some(prev) = &hashes {
            if prev != &h {
                return Err(crate::Error::Numeric("partition changed between identical runs".into()));
            }
        }
        hashes = Some(h);
    }
    let (radial_hash, cubic_hash) = hashes.expect("repeat >= 1");
    let mut value = json!({
        "points": cloud.len(),
        "partition": timing(partition_times),
        "radial_partition_sha256": radial_hash,
        "cubic_partition_sha256": cubic_hash,
    });
    if !skip_forward {
        let weights = model_weights::<f32>(None, &cfg)?;
        let features = if cloud.feature_dim() == cfg.channels() {
            cloud.features().cast::<f32>()
        } else {
            return Err(config_err!(
                "input has {} feature channels but the model expects {}",
                cloud.feature_dim(),
                cfg.channels()
            ));
        };
        let mut times = Vec::with_capacity(repeat);
        for _ in 0..repeat {
            let start = Instant::now();
            sphereformer_forward(cloud.positions(), &features, &sc, &weights)?;
            times.push(start.elapsed().as_secs_f64());
        }
        value["forward"] = timing(times);
    }
    Ok(Outcome::Pass(value))
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| config_err!("{THREADS_ENV} must be a positive integer, got {raw:?}"))?;
    // fails only if a pool already exists, which is harmless
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<Outcome> {
    configure_threads()?;
    match &cli.command {
        Command::Gen { common, out } => cmd_gen(common, out),
        Command::PartitionStats { input, common, mode } => cmd_partition_stats(input, common, *mode),
        Command::Forward { input, weights, common, out, f64 } => {
            cmd_forward(input, weights.as_deref(), common, out, *f64)
        }
        Command::Gradcheck { common, tokens, heads, head_dim, table_len, trials, corrupt_backward } => {
            cmd_gradcheck(common, *tokens, *heads, *head_dim, *table_len, *trials, *corrupt_backward)
        }
        Command::Bench { input, common, synthetic, repeat, skip_forward } => {
            cmd_bench(input.as_deref(), common, *synthetic, *repeat, *skip_forward)
        }
    }
}

/// Parses arguments, runs the command and maps the result to an exit code.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(Outcome::Pass(v)) => {
            println!("{v:#}");
            ExitCode::SUCCESS
        }
        Ok(Outcome::CheckFailed(v, msg)) => {
            println!("{v:#}");
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn defaults_match_reference_setup() {
        let cfg = RunConfig::default();
        assert_eq!((cfg.radial.r_max, cfg.radial.delta_theta, cfg.radial.delta_phi), (120.0, 2.0, 2.0));
        assert_eq!(cfg.range, SceneRange::new([-75.2, -75.2, -2.0], [75.2, 75.2, 4.0]).unwrap());
        cfg.validate().unwrap();
    }

    #[test]
    fn partial_json_and_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"seed": 3, "radial": {"delta_theta": 4.0}, "heads": 2}"#).unwrap();
        let args = CommonArgs {
            seed: Some(9),
            config: Some(path.clone()),
            window_r: None,
            window_theta: None,
            window_phi: Some(3.0),
            cubic_side: None,
            voxel: None,
        };
        let cfg = args.resolve().unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.radial.delta_theta, 4.0);
        assert_eq!(cfg.radial.delta_phi, 3.0);
        assert_eq!(cfg.radial.r_max, 120.0);
        assert_eq!(cfg.heads, 2);

        std::fs::write(&path, r#"{"heads": 3}"#).unwrap();
        assert!(matches!(args.resolve(), Err(crate::Error::Config(_))));
        std::fs::write(&path, r#"{"bogus": 1}"#).unwrap();
        assert!(matches!(args.resolve(), Err(crate::Error::Config(_))));
    }

    #[test]
    fn percentiles() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&v, 0.5), 2.0);
        assert_eq!(percentile(&v, 0.95), 4.0);
        assert_eq!(percentile(&[5.0], 0.95), 5.0);
    }
}
