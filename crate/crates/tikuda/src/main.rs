//! Command-line entry points: training/evaluation runs, the synthetic
//! fixture generator, checkpoint inspection, and the alignment-loss
//! micro-benchmark.
//!
//! Exit codes: 1 configuration error, 2 data error, 3 numerical failure.
//! Each failure prints a single diagnostic line on stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tikuda::bench;
use tikuda::config::{Config, ConfigError};
use tikuda::data::{self, DataError, GraphKind, Normalizer, Schema, ShiftSpec, WindowedDataset};
use tikuda::matrix::Matrix;
use tikuda::stgnn::{GraphSpec, ModelParams, StgnnError};
use tikuda::trainer::{self, Method, MetricsReport, TrainerError};

#[derive(Parser)]
#[command(name = "tikuda", version, about = "Domain-adaptive sensor regression toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Override a config key: --set section.key=value (repeatable).
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model (with optional domain adaptation) and write artifacts.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run directory for artifacts.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the target dataset.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Optional directory for metrics.kv (metrics always print to stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time alignment losses (forward + backward) on random f32 batches.
    BenchAlignment {
        /// Comma-separated feature dimensions, ascending.
        #[arg(long, default_value = "2,128,512,1024")]
        p: String,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 20)]
        iters: usize,
        /// Comma-separated methods (tikuda, dare-gram, coral, mmd).
        #[arg(long, default_value = "tikuda,dare-gram")]
        methods: String,
        /// Optional path for bench.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the synthetic source/target fixture pair.
    Synthetic {
        #[arg(long, default_value_t = 6)]
        sensors: usize,
        #[arg(long, default_value_t = 3000)]
        steps: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// identity | default | scale-dominant
        #[arg(long, default_value = "default")]
        preset: String,
        /// Output directory for source.csv / target.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print checkpoint metadata and parameter shapes.
    InspectCheckpoint { path: PathBuf },
}

/// One-line failure with the documented exit code.
struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn config(msg: impl std::fmt::Display) -> Self {
        Failure { code: 1, msg: format!("config error: {msg}") }
    }
    fn data(msg: impl std::fmt::Display) -> Self {
        Failure { code: 2, msg: format!("data error: {msg}") }
    }
    fn numerical(msg: impl std::fmt::Display) -> Self {
        Failure { code: 3, msg: format!("numerical failure: {msg}") }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io(io) => Failure::data(io),
            other => Failure::config(other),
        }
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Failure::data(e)
    }
}

impl From<StgnnError> for Failure {
    fn from(e: StgnnError) -> Self {
        Failure::data(e)
    }
}

impl From<TrainerError> for Failure {
    fn from(e: TrainerError) -> Self {
        match e {
            TrainerError::EmptyDataset(_) | TrainerError::DimensionMismatch { .. } => {
                Failure::data(e)
            }
            other => Failure::numerical(other),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::data(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::Train { cfg, out } => cmd_train(&cfg, &out),
        Cmd::Eval { cfg, checkpoint, out } => cmd_eval(&cfg, &checkpoint, out.as_deref()),
        Cmd::BenchAlignment { p, batch, iters, methods, out } => {
            cmd_bench(&p, batch, iters, &methods, out.as_deref())
        }
        Cmd::Synthetic { sensors, steps, seed, preset, out } => {
            cmd_synthetic(sensors, steps, seed, &preset, &out)
        }
        Cmd::InspectCheckpoint { path } => cmd_inspect(&path),
    }
}

fn resolve_config(args: &ConfigArgs) -> Result<Config, Failure> {
    if !args.config.exists() {
        return Err(Failure::data(format!("config file not found: {}", args.config.display())));
    }
    let mut cfg = Config::from_file(&args.config)?;
    for ov in &args.set {
        cfg.apply_override(ov)?;
    }
    if cfg.data.sensors.is_empty() {
        return Err(Failure::config("data.sensors must list at least one column"));
    }
    if cfg.data.label.is_empty() {
        return Err(Failure::config("data.label must be set"));
    }
    Ok(cfg)
}

struct LoadedData {
    src: WindowedDataset,
    tgt: WindowedDataset,
    graph: GraphSpec,
    normalizer: Normalizer,
}

fn load_data(cfg: &Config) -> Result<LoadedData, Failure> {
    let schema = Schema { sensors: cfg.data.sensors.clone(), target: cfg.data.label.clone() };
    let src_raw = data::load_csv(Path::new(&cfg.data.source), &schema)?;
    let tgt_raw = data::load_csv(Path::new(&cfg.data.target), &schema)?;
    let normalizer = Normalizer::fit(&src_raw)?;
    let src = data::make_windows(&normalizer.apply(&src_raw), cfg.model.window, cfg.data.stride);
    let tgt = data::make_windows(&normalizer.apply(&tgt_raw), cfg.model.window, cfg.data.stride);
    let n = cfg.data.sensors.len();
    let graph = match cfg.data.graph.as_str() {
        "full" => data::build_graph(GraphKind::Full, n)?,
        path => data::build_graph(GraphKind::AdjacencyFile(Path::new(path)), n)?,
    };
    Ok(LoadedData { src, tgt, graph, normalizer })
}

fn metrics_kv(report: &MetricsReport, method: Method, seed: u64) -> String {
    format!(
        "method = {}\nseed = {}\nrmse_norm = {}\nrmse_actual = {}\nmae_norm = {}\n\
         mae_actual = {}\nenergy_distance = {}\n",
        method.name(),
        seed,
        report.rmse_norm,
        report.rmse_actual,
        report.mae_norm,
        report.mae_actual,
        report.energy_distance,
    )
}

/// Project stacked source/target features onto a shared 2-component basis
/// and tag each row with its phase and domain.
fn pca_rows(
    feat_src: &Matrix<f64>,
    feat_tgt: &Matrix<f64>,
    phase: &str,
) -> (Vec<String>, Vec<String>) {
    let ns = feat_src.rows();
    let stacked = {
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(ns + feat_tgt.rows());
        for i in 0..ns {
            rows.push(feat_src.row(i).to_vec());
        }
        for i in 0..feat_tgt.rows() {
            rows.push(feat_tgt.row(i).to_vec());
        }
        Matrix::from_rows(&rows)
    };
    let (proj, _) = trainer::pca_project(&stacked, 2);
    let mut src_rows = Vec::with_capacity(ns);
    let mut tgt_rows = Vec::with_capacity(feat_tgt.rows());
    for i in 0..proj.rows() {
        let line = format!("{},{},{}", phase, proj.get(i, 0), proj.get(i, 1));
        if i < ns {
            src_rows.push(line);
        } else {
            tgt_rows.push(line);
        }
    }
    (src_rows, tgt_rows)
}

fn cmd_train(args: &ConfigArgs, out: &Path) -> Result<(), Failure> {
    let mut cfg = resolve_config(args)?;
    cfg.model.n_nodes = cfg.data.sensors.len();

    std::fs::create_dir_all(out)?;
    // Manifest + snapshot land before any training starts so a crashed run
    // can still be reproduced.
    let snapshot = cfg.render();
    std::fs::write(out.join("config.snapshot"), &snapshot)?;
    std::fs::write(
        out.join("manifest.kv"),
        format!(
            "config_path = {}\nseed = {}\nout_dir = {}\nbuild = {} {}\n",
            args.config.display(),
            cfg.train.seed,
            out.display(),
            env!("CARGO_PKG_NAME"),
            env!("CARGO_PKG_VERSION"),
        ),
    )?;

    let loaded = load_data(&cfg)?;

    let init_params = ModelParams::<f64>::init(&cfg.model, cfg.train.seed);
    let pre_src =
        trainer::extract_features(&init_params, &loaded.src, &loaded.graph, &cfg.model, 256)?;
    let pre_tgt =
        trainer::extract_features(&init_params, &loaded.tgt, &loaded.graph, &cfg.model, 256)?;
    let (pre_src_rows, pre_tgt_rows) = pca_rows(&pre_src, &pre_tgt, "pre");

    let (params, report) =
        trainer::train_adapt(&loaded.src, &loaded.tgt, &loaded.graph, &cfg.model, &cfg.train)?;

    params.save(&out.join("checkpoint.txt"), &cfg.model)?;

    // metrics are normalized by default; rescale the actual-unit entries
    let mut report = report;
    report.rmse_actual = report.rmse_norm * loaded.normalizer.label_span();
    report.mae_actual = report.mae_norm * loaded.normalizer.label_span();
    std::fs::write(out.join("metrics.kv"), metrics_kv(&report, cfg.train.method, cfg.train.seed))?;

    let mut traces = String::from("epoch,src_loss,angle_loss,scale_loss,total_loss,lambda\n");
    for t in &report.traces {
        traces.push_str(&format!(
            "{},{},{},{},{},{}\n",
            t.epoch, t.src_loss, t.angle_loss, t.scale_loss, t.total_loss, t.lambda
        ));
    }
    std::fs::write(out.join("traces.csv"), traces)?;

    let post_src =
        trainer::extract_features(&params, &loaded.src, &loaded.graph, &cfg.model, 256)?;
    let post_tgt =
        trainer::extract_features(&params, &loaded.tgt, &loaded.graph, &cfg.model, 256)?;
    let (post_src_rows, post_tgt_rows) = pca_rows(&post_src, &post_tgt, "post");

    let header = "phase,pc1,pc2\n";
    std::fs::write(
        out.join("pca_source.csv"),
        format!("{header}{}\n{}\n", pre_src_rows.join("\n"), post_src_rows.join("\n")),
    )?;
    std::fs::write(
        out.join("pca_target.csv"),
        format!("{header}{}\n{}\n", pre_tgt_rows.join("\n"), post_tgt_rows.join("\n")),
    )?;

    println!(
        "trained {} for {} epochs: rmse_norm = {}, energy_distance = {}",
        cfg.train.method.name(),
        cfg.train.epochs,
        report.rmse_norm,
        report.energy_distance
    );
    Ok(())
}

fn cmd_eval(args: &ConfigArgs, checkpoint: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let cfg = resolve_config(args)?;
    let (model_cfg, params) = ModelParams::<f64>::load(checkpoint)?;
    let mut full_cfg = cfg;
    full_cfg.model = model_cfg;
    let loaded = load_data(&full_cfg)?;
    let report = trainer::evaluate(
        &params,
        &loaded.tgt,
        &loaded.graph,
        &full_cfg.model,
        &loaded.normalizer,
    )?;
    let text = metrics_kv(&report, full_cfg.train.method, full_cfg.train.seed);
    print!("{text}");
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.kv"), text)?;
    }
    Ok(())
}

fn cmd_bench(
    p_spec: &str,
    batch: usize,
    iters: usize,
    methods_spec: &str,
    out: Option<&Path>,
) -> Result<(), Failure> {
    if iters < 20 {
        return Err(Failure::config("bench needs --iters >= 20"));
    }
    let p_list: Vec<usize> = p_spec
        .split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|_| Failure::config(format!("bad p value {s:?}"))))
        .collect::<Result<_, _>>()?;
    if !p_list.windows(2).all(|w| w[0] < w[1]) {
        return Err(Failure::config("p values must be strictly ascending"));
    }
    let methods: Vec<Method> = methods_spec
        .split(',')
        .map(|s| {
            let m = Method::parse(s.trim())
                .ok_or_else(|| Failure::config(format!("unknown method {s:?}")))?;
            if m == Method::SourceOnly {
                return Err(Failure::config("source-only has no alignment step to benchmark"));
            }
            Ok(m)
        })
        .collect::<Result<_, _>>()?;

    let rows = bench::bench_alignment(&p_list, batch, iters, &methods);
    let csv = bench::render_csv(&rows);
    print!("{csv}");
    if let Some(path) = out {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        std::fs::write(path, csv)?;
    }
    Ok(())
}

fn cmd_synthetic(
    sensors: usize,
    steps: usize,
    seed: u64,
    preset: &str,
    out: &Path,
) -> Result<(), Failure> {
    let spec = match preset {
        "identity" => ShiftSpec::identity(sensors, seed),
        "default" => ShiftSpec::default_fixture(sensors, seed),
        "scale-dominant" => ShiftSpec::scale_dominant(sensors, seed),
        other => return Err(Failure::config(format!("unknown preset {other:?}"))),
    };
    let base = data::generate_latent(sensors, steps, seed);
    let (src, tgt) = data::synthesize_shift(&base, &spec)
        .map_err(|e| Failure { code: 1, msg: format!("config error: invalid shift spec: {e}") })?;
    std::fs::create_dir_all(out)?;
    data::write_csv(&out.join("source.csv"), &src)?;
    data::write_csv(&out.join("target.csv"), &tgt)?;
    println!("wrote {} rows per domain to {}", src.len(), out.display());
    Ok(())
}

fn cmd_inspect(path: &Path) -> Result<(), Failure> {
    let (cfg, params) = ModelParams::<f64>::load(path)?;
    println!(
        "nodes = {}, in_features = {}, window = {}, hidden = {}, gru_layers = {}, embed_dim = {}, leaky_slope = {}",
        cfg.n_nodes, cfg.in_features, cfg.window, cfg.hidden, cfg.gru_layers, cfg.embed_dim, cfg.leaky_slope
    );
    let mut total = 0usize;
    for (name, m) in params.named() {
        let (r, c) = m.shape();
        total += r * c;
        println!("{name}: {r}x{c}");
    }
    println!("total parameters: {total}");
    Ok(())
}
