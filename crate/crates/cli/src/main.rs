//! `coopalign`: run cooperative detection experiments on simulated scenarios.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 runtime error.

use clap::{Args, Parser, Subcommand};
use coopalign::cpm::{decode_cpm, HEADER_BYTES, POSE_BYTES};
use coopalign::eval::Sorting;
use coopalign::pipeline::{self, Overrides, PipelineError, ValueSpec};
use coopalign::sim::{ScenarioConfig, Scene};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(name = "coopalign", version, about = "Cooperative 3D detection experiments on simulated LiDAR scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every experiment at one operating point (or a sweep given by a range).
    Run(RunArgs),
    /// Run every experiment over a sweep of epsilon or latency.
    Sweep(RunArgs),
    /// Decode a CPM file and print its fields.
    InspectCpm {
        /// CPM file, e.g. `cpm_agent1_frame0.bin` from a run.
        path: PathBuf,
        /// Also hex-dump the header and pose block.
        #[arg(long)]
        hex: bool,
        /// Print this many queries and boxes.
        #[arg(long, default_value_t = 5)]
        records: usize,
    },
    /// Print sparse-connectivity diagnostics of the ego's first sweep as JSON.
    GridReport {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// Pose noise scale: `v` or `a:b:step`.
    #[arg(long)]
    epsilon: Option<String>,
    /// Fixed latency in ms: `v` or `a:b:step`.
    #[arg(long = "latency-ms")]
    latency_ms: Option<String>,
    /// `epsilon=a:b:step` or `latency_ms=a:b:step`.
    #[arg(long)]
    sweep: Option<String>,
    /// Queries and boxes scoring at or below this are not sent.
    #[arg(long = "cpm-threshold")]
    cpm_threshold: Option<f64>,
    /// `global` or `local` AP ranking.
    #[arg(long)]
    sorting: Option<Sorting>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default `out/<scenario name>`).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn overrides(&self) -> Result<Overrides, PipelineError> {
        Ok(Overrides {
            epsilon: self.epsilon.as_deref().map(|s| ValueSpec::parse("--epsilon", s)).transpose()?,
            latency_ms: self.latency_ms.as_deref().map(|s| ValueSpec::parse("--latency-ms", s)).transpose()?,
            sweep: self.sweep.as_deref().map(Overrides::parse_sweep).transpose()?,
            cpm_threshold: self.cpm_threshold,
            sorting: self.sorting,
            seed: self.seed,
        })
    }
}

fn run(args: &RunArgs, require_sweep: bool) -> Result<(), PipelineError> {
    let overrides = args.overrides()?;
    let config = ScenarioConfig::load(&args.scenario)?;
    let resolved = pipeline::ResolvedRun::resolve(config, &overrides)?;
    if require_sweep && resolved.values.len() < 2 {
        return Err(PipelineError::Option {
            option: "--sweep".into(),
            reason: "`sweep` needs a range, e.g. --sweep epsilon=0:1:0.2".into(),
        });
    }
    let out_dir = args.out.clone().unwrap_or_else(|| Path::new("out").join(&resolved.config.name));
    let output = pipeline::execute(&resolved)?;
    pipeline::write_outputs(&output, &out_dir)?;
    println!("{} sweep point(s) of {}; outputs in {}", resolved.values.len(), resolved.axis.name(), out_dir.display());
    for r in &output.rows {
        println!(
            "{:<7} {}={:<6} AP@{:.1} {:.4}  pose err {} m / {} deg",
            r.experiment,
            r.sweep,
            r.value,
            r.iou_thr,
            r.ap,
            r.median_trans_err_m.map_or("-".into(), |v| format!("{v:.3}")),
            r.median_rot_err_deg.map_or("-".into(), |v| format!("{v:.3}")),
        );
    }
    Ok(())
}

fn hex_dump(out: &mut String, bytes: &[u8], base: usize) {
    for (i, chunk) in bytes.chunks(16).enumerate() {
        let hex: Vec<String> = chunk.iter().map(|b| format!("{b:02x}")).collect();
        let _ = writeln!(out, "  {:08x}  {}", base + 16 * i, hex.join(" "));
    }
}

fn inspect(path: &Path, hex: bool, records: usize) -> Result<String, PipelineError> {
    let bytes = std::fs::read(path).map_err(|source| PipelineError::Io { path: path.display().to_string(), source })?;
    let cpm = decode_cpm(&bytes).map_err(|e| PipelineError::Runtime(format!("{}: {e}", path.display())))?;
    let mut s = String::new();
    let _ = writeln!(s, "file           {}", path.display());
    let _ = writeln!(s, "bytes          {}", bytes.len());
    let _ = writeln!(s, "version        {}", bytes[4]);
    let _ = writeln!(s, "agent_id       {}", cpm.agent_id);
    let _ = writeln!(s, "t              {}", cpm.t);
    let _ = writeln!(s, "feature_width  {}", cpm.feature_width());
    let _ = writeln!(s, "n_queries      {}", cpm.queries.len());
    let _ = writeln!(s, "n_boxes        {}", cpm.boxes.len());
    let p = cpm.pose;
    let _ = writeln!(s, "pose           x {:.4} y {:.4} z {:.4} yaw {:.6} rad", p.x, p.y, p.z, p.yaw);
    if hex {
        let _ = writeln!(s, "header");
        hex_dump(&mut s, &bytes[..HEADER_BYTES], 0);
        let _ = writeln!(s, "pose block");
        hex_dump(&mut s, &bytes[HEADER_BYTES..HEADER_BYTES + POSE_BYTES], HEADER_BYTES);
    }
    for (i, q) in cpm.queries.iter().take(records).enumerate() {
        let head: Vec<String> = q.feature.iter().take(4).map(|f| format!("{f:.3}")).collect();
        let _ = writeln!(s, "query[{i}]       x {:.3} y {:.3} score {:.4} t {:.4} feature [{}, ...]", q.x, q.y, q.score, q.t, head.join(", "));
    }
    for (i, b) in cpm.boxes.iter().take(records).enumerate() {
        let _ = writeln!(
            s,
            "box[{i}]         c ({:.3}, {:.3}, {:.3}) lwh ({:.2}, {:.2}, {:.2}) yaw {:.4} score {:.4} t {:.4}",
            b.cx, b.cy, b.cz, b.l, b.w, b.h, b.yaw, b.score, b.t
        );
    }
    Ok(s)
}

fn grid_report(scenario: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<(), PipelineError> {
    let mut config = ScenarioConfig::load(scenario)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    let scene = Scene::build(&config)?;
    let report = pipeline::grid_report(&scene)?;
    let mut json = serde_json::to_string_pretty(&report).map_err(|e| PipelineError::Runtime(e.to_string()))?;
    json.push('\n');
    match out {
        Some(path) => std::fs::write(path, json).map_err(|source| PipelineError::Io { path: path.display().to_string(), source }),
        None => {
            print!("{json}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => run(args, false),
        Command::Sweep(args) => run(args, true),
        Command::InspectCpm { path, hex, records } => inspect(path, *hex, *records).map(|s| print!("{s}")),
        Command::GridReport { scenario, seed, out } => grid_report(scenario, *seed, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
