//! evspike: generate, accumulate, infer, train, benchmark, and inspect.

mod dataset;

use clap::{Args, Parser, Subcommand};
use evspike_core::bench::{
    gen_synthetic, run_benchmark, BenchConfig, Decision, PowerConfig, SyntheticParams,
};
use evspike_core::error::{Error, Result};
use evspike_core::events::{
    accumulate, crop_roi, decode_csv, decode_stream, downsample, read_frames, write_frames,
    AccumMode, AccumulationConfig, RoiConfig,
};
use evspike_core::layers::dense_synops;
use evspike_core::models::{
    build_from_config, load_model, save_model, InferenceSession, ModelConfig, ModelGraph,
};
use evspike_core::schedule::{hardware_steps, timing, PowerModel, ScheduleConfig, Scheme};
use evspike_core::train::{save_optimizer, TrainConfig, Trainer};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::sync::Arc;

#[derive(Parser)]
#[command(name = "evspike", version, about = "Event-driven sparse neural inference engine")]
struct Cli {
    /// Worker thread cap (default: available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Log filter (error, warn, info, debug, trace); EVSPIKE_LOG also works.
    #[arg(long, global = true)]
    log_level: Option<String>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a labeled synthetic event-stream dataset.
    Gen(GenArgs),
    /// Accumulate an event file into per-timestep frames.
    Accumulate(AccumulateArgs),
    /// Run a model over a frames file and report outputs and SynOps.
    Infer(InferArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Benchmark a model on a dataset directory.
    Bench(BenchArgs),
    /// Hardware-step timing for a model.
    Timing(TimingArgs),
    /// Describe a saved model: layers, parameters, dense SynOps.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    samples: usize,
    #[arg(long, default_value_t = 32)]
    width: u16,
    #[arg(long, default_value_t = 32)]
    height: u16,
    #[arg(long, default_value_t = 0.07)]
    fall_fraction: f64,
    #[arg(long, default_value_t = 1000.0)]
    noise_rate: f64,
    #[arg(long, default_value_t = 15000.0)]
    track_rate: f64,
    #[arg(long, default_value_t = 1200)]
    duration_ms: u64,
}

#[derive(Args)]
struct AccumulateArgs {
    /// Input event file (.evs binary or .csv).
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    window_us: u64,
    #[arg(long, value_parser = parse_mode, default_value = "graded")]
    mode: AccumMode,
    #[arg(long, default_value_t = 1)]
    group: u32,
    /// ROI crop "x0,y0,w,h" applied before downsampling.
    #[arg(long)]
    crop: Option<String>,
    /// Coordinate downsampling factor.
    #[arg(long, default_value_t = 1)]
    down: u16,
    /// Geometry "WxH" for CSV inputs without one.
    #[arg(long)]
    geometry: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    frames: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON file with "model" and "train" sections.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    window_us: Option<u64>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<AccumMode>,
    #[arg(long)]
    group: Option<u32>,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Power section: "cores=99,static=0.815,dyn=7.74".
    #[arg(long)]
    power: Option<String>,
    /// Timing section: "scheme=pipelined,step-us=1052.6".
    #[arg(long)]
    timing: Option<String>,
}

#[derive(Args)]
struct TimingArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_parser = parse_scheme)]
    scheme: Scheme,
    #[arg(long)]
    step_us: f64,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    model: PathBuf,
}

fn parse_mode(s: &str) -> std::result::Result<AccumMode, String> {
    match s {
        "graded" => Ok(AccumMode::Graded),
        "binary" => Ok(AccumMode::Binary),
        other => Err(format!("unknown mode '{other}', expected graded|binary")),
    }
}

fn parse_scheme(s: &str) -> std::result::Result<Scheme, String> {
    match s {
        "pipelined" => Ok(Scheme::Pipelined),
        "fall-through" | "fall_through" => Ok(Scheme::FallThrough),
        other => Err(format!("unknown scheme '{other}', expected pipelined|fall-through")),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are successful outputs, not usage errors.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };

    let mut logger = env_logger::Builder::from_env(env_logger::Env::new().filter("EVSPIKE_LOG"));
    if let Some(level) = &cli.log_level {
        logger.parse_filters(level);
    }
    let _ = logger.try_init();

    if let Some(threads) = cli.threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }

    match run(cli.cmd) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("evspike: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Gen(args) => cmd_gen(args),
        Cmd::Accumulate(args) => cmd_accumulate(args),
        Cmd::Infer(args) => cmd_infer(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Bench(args) => cmd_bench(args),
        Cmd::Timing(args) => cmd_timing(args),
        Cmd::Inspect(args) => cmd_inspect(args),
    }
}

/// Write via a temp file in the target directory, then rename.
fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp-{}",
        path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default(),
        std::process::id()
    ));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn require_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(Error::Validation(format!("no such file: {}", path.display())));
    }
    Ok(())
}

// ── gen ──────────────────────────────────────────────────────────────────────

fn cmd_gen(args: GenArgs) -> Result<()> {
    let params = SyntheticParams {
        width: args.width,
        height: args.height,
        n_samples: args.samples,
        fall_fraction: args.fall_fraction,
        noise_rate: args.noise_rate,
        track_rate: args.track_rate,
        duration_us: args.duration_ms * 1000,
    };
    let set = gen_synthetic(args.seed, &params)?;
    std::fs::create_dir_all(&args.out)?;
    let mut entries = Vec::with_capacity(set.len());
    for sample in &set {
        let file = format!("{}.evs", sample.id);
        let bytes = evspike_core::events::encode_stream(&sample.stream)?;
        atomic_write(&args.out.join(&file), &bytes)?;
        entries.push(dataset::LabelEntry { file, label: sample.label });
    }
    let manifest = dataset::Manifest {
        schema_version: 1,
        seed: args.seed,
        width: params.width,
        height: params.height,
        duration_us: params.duration_us,
        samples: entries,
    };
    atomic_write(&args.out.join("labels.json"), &serde_json::to_vec_pretty(&manifest)?)?;
    println!(
        "wrote {} samples ({} falls) to {}",
        set.len(),
        set.iter().filter(|s| s.label).count(),
        args.out.display()
    );
    Ok(())
}

// ── accumulate ───────────────────────────────────────────────────────────────

fn parse_geometry(s: &str) -> Result<(u16, u16)> {
    let (w, h) = s
        .split_once('x')
        .ok_or_else(|| Error::Config(format!("geometry '{s}' is not WxH")))?;
    Ok((
        w.parse().map_err(|_| Error::Config(format!("bad geometry width '{w}'")))?,
        h.parse().map_err(|_| Error::Config(format!("bad geometry height '{h}'")))?,
    ))
}

fn parse_crop(s: &str) -> Result<RoiConfig> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 4 {
        return Err(Error::Config(format!("crop '{s}' is not x0,y0,w,h")));
    }
    let mut vals = [0u16; 4];
    for (v, p) in vals.iter_mut().zip(&parts) {
        *v = p.trim().parse().map_err(|_| Error::Config(format!("bad crop field '{p}'")))?;
    }
    Ok(RoiConfig { x0: vals[0], y0: vals[1], w: vals[2], h: vals[3] })
}

fn load_stream(path: &Path, geometry: Option<(u16, u16)>) -> Result<evspike_core::events::EventStream> {
    require_file(path)?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => decode_csv(&std::fs::read_to_string(path)?, geometry),
        _ => decode_stream(&std::fs::read(path)?),
    }
}

fn cmd_accumulate(args: AccumulateArgs) -> Result<()> {
    let geometry = args.geometry.as_deref().map(parse_geometry).transpose()?;
    let mut stream = load_stream(&args.input, geometry)?;
    if let Some(crop) = &args.crop {
        stream = crop_roi(&stream, parse_crop(crop)?)?;
    }
    if args.down > 1 {
        stream = downsample(&stream, args.down)?;
    }
    let cfg = AccumulationConfig {
        window_us: args.window_us,
        mode: args.mode,
        width: stream.width(),
        height: stream.height(),
        group: args.group,
    };
    let seq = accumulate(&stream, &cfg)?;
    atomic_write(&args.out, &write_frames(&seq)?)?;
    println!(
        "accumulated {} events into {} frames of {} ({} us per frame) -> {}",
        stream.len(),
        seq.frames.len(),
        seq.shape,
        seq.step_us(),
        args.out.display()
    );
    Ok(())
}

// ── infer ────────────────────────────────────────────────────────────────────

#[derive(Serialize)]
struct InferReport {
    schema_version: u32,
    model: String,
    steps: usize,
    outputs: Vec<[f64; 2]>,
    decision: Decision,
    total_synops: u64,
    total_neuron_updates: u64,
    per_layer_synops: Vec<(String, u64)>,
}

fn cmd_infer(args: InferArgs) -> Result<()> {
    require_file(&args.model)?;
    require_file(&args.frames)?;
    let graph = load_model(&std::fs::read(&args.model)?)?;
    let seq = read_frames(&std::fs::read(&args.frames)?)?;
    let mut session = InferenceSession::new(Arc::new(graph))?;
    let mut outputs = Vec::with_capacity(seq.frames.len());
    for frame in &seq.frames {
        outputs.push(session.infer_step(frame)?);
    }
    let decision = evspike_core::bench::decide(
        &outputs,
        session.graph().meta.decision_mode,
        args.threshold,
    )?;
    let report = InferReport {
        schema_version: 1,
        model: session.graph().meta.name.clone(),
        steps: outputs.len(),
        outputs,
        decision,
        total_synops: session.ledger().total_synops(),
        total_neuron_updates: session.ledger().total_neuron_updates(),
        per_layer_synops: session
            .graph()
            .layers
            .iter()
            .zip(&session.ledger().layers)
            .map(|(spec, c)| (spec.name.clone(), c.synops))
            .collect(),
    };
    println!(
        "{}: {} steps, decision {:?} (p = {:.4}), {} SynOps",
        report.model, report.steps, report.decision.class, report.decision.p, report.total_synops
    );
    if let Some(path) = &args.report {
        atomic_write(path, &serde_json::to_vec_pretty(&report)?)?;
    }
    Ok(())
}

// ── train ────────────────────────────────────────────────────────────────────

#[derive(Deserialize)]
struct TrainFileConfig {
    model: ModelConfig,
    #[serde(default)]
    train: TrainConfig,
    #[serde(default = "default_holdout")]
    holdout_fraction: f64,
}

fn default_holdout() -> f64 {
    0.25
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    require_file(&args.config)?;
    let cfg: TrainFileConfig = serde_json::from_str(&std::fs::read_to_string(&args.config)?)?;
    let graph = build_from_config(&cfg.model)?;
    let data = dataset::load_dir(&args.data)?;
    let (train_set, holdout) = dataset::split(&data, cfg.holdout_fraction, cfg.train.seed);
    let samples = dataset::to_train_samples(&graph, &train_set)?;
    log::info!(
        "training {} on {} samples ({} held out)",
        graph.meta.name,
        samples.len(),
        holdout.len()
    );

    let epochs = cfg.train.epochs;
    let mut trainer = Trainer::new(graph, cfg.train)?;
    for epoch in 0..epochs {
        let loss = trainer.train_epoch(&samples, epoch)?;
        println!("epoch {:>3}: loss {loss:.6}", epoch + 1);
    }

    let trained = trainer.export();
    atomic_write(&args.out, &save_model(&trained)?)?;
    let sidecar = args.out.with_extension("evsm.opt");
    atomic_write(&sidecar, &save_optimizer(&trainer))?;
    println!("wrote {} (+ optimizer sidecar {})", args.out.display(), sidecar.display());

    if !holdout.is_empty() {
        let bench_cfg = BenchConfig::for_model(&trained);
        let report = run_benchmark(&trained, &holdout, &bench_cfg)?;
        println!("held-out metrics:\n{}", report.to_text());
    }
    Ok(())
}

// ── bench ────────────────────────────────────────────────────────────────────

fn parse_kv(s: &str) -> Result<Vec<(String, String)>> {
    s.split(',')
        .map(|pair| {
            pair.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Config(format!("expected key=value, got '{pair}'")))
        })
        .collect()
}

fn parse_power(s: &str) -> Result<PowerConfig> {
    let mut cores = None;
    let mut model = PowerModel::default();
    for (k, v) in parse_kv(s)? {
        match k.as_str() {
            "cores" => cores = Some(v.parse().map_err(|_| Error::Config(format!("bad cores '{v}'")))?),
            "static" => {
                model.static_mw_per_core =
                    v.parse().map_err(|_| Error::Config(format!("bad static '{v}'")))?;
            }
            "dyn" => {
                model.dynamic_pw_per_synop =
                    v.parse().map_err(|_| Error::Config(format!("bad dyn '{v}'")))?;
            }
            other => return Err(Error::Config(format!("unknown power key '{other}'"))),
        }
    }
    Ok(PowerConfig {
        cores: cores.ok_or_else(|| Error::Config("power needs cores=N".into()))?,
        model,
    })
}

fn parse_timing(s: &str, model: &ModelGraph) -> Result<(usize, f64)> {
    let mut scheme = None;
    let mut step_us = None;
    for (k, v) in parse_kv(s)? {
        match k.as_str() {
            "scheme" => scheme = Some(parse_scheme(&v).map_err(Error::Config)?),
            "step-us" | "step_us" => {
                step_us = Some(v.parse().map_err(|_| Error::Config(format!("bad step-us '{v}'")))?);
            }
            other => return Err(Error::Config(format!("unknown timing key '{other}'"))),
        }
    }
    let scheme = scheme.ok_or_else(|| Error::Config("timing needs scheme=".into()))?;
    let step_us = step_us.ok_or_else(|| Error::Config("timing needs step-us=".into()))?;
    let cfg = ScheduleConfig { scheme, step_time_us: step_us, patches: model.patches_per_step() };
    Ok((hardware_steps(model, &cfg)?, step_us))
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    require_file(&args.model)?;
    let graph = load_model(&std::fs::read(&args.model)?)?;
    let data = dataset::load_dir(&args.data)?;
    let mut cfg = BenchConfig::for_model(&graph);
    if let Some(w) = args.window_us {
        cfg.window_us = w;
    }
    if let Some(m) = args.mode {
        cfg.mode = m;
    }
    if let Some(g) = args.group {
        cfg.group = g;
    }
    cfg.threshold = args.threshold;
    if let Some(p) = &args.power {
        cfg.power = Some(parse_power(p)?);
    }
    if let Some(t) = &args.timing {
        cfg.timing_steps = Some(parse_timing(t, &graph)?);
    }
    let report = run_benchmark(&graph, &data, &cfg)?;
    print!("{}", report.to_text());
    if let Some(path) = &args.report {
        atomic_write(path, &serde_json::to_vec_pretty(&report)?)?;
        println!("report written to {}", path.display());
    }
    Ok(())
}

// ── timing ───────────────────────────────────────────────────────────────────

fn cmd_timing(args: TimingArgs) -> Result<()> {
    require_file(&args.model)?;
    let graph = load_model(&std::fs::read(&args.model)?)?;
    let cfg = ScheduleConfig {
        scheme: args.scheme,
        step_time_us: args.step_us,
        patches: graph.patches_per_step(),
    };
    let steps = hardware_steps(&graph, &cfg)?;
    let report = timing(steps, args.step_us)?;
    println!(
        "{}: {} hardware steps x {} us -> latency {:.3} ms, max throughput {:.2} Hz",
        graph.meta.name,
        report.hardware_steps,
        args.step_us,
        report.latency_us / 1000.0,
        report.max_throughput_hz
    );
    if let Some(path) = &args.report {
        atomic_write(path, &serde_json::to_vec_pretty(&report)?)?;
    }
    Ok(())
}

// ── inspect ──────────────────────────────────────────────────────────────────

fn cmd_inspect(args: InspectArgs) -> Result<()> {
    require_file(&args.model)?;
    let graph = load_model(&std::fs::read(&args.model)?)?;
    println!("model: {}", graph.meta.name);
    println!(
        "input {} at {} us steps; patches/step: {}",
        graph.meta.input,
        graph.meta.timestep_us,
        graph.patches_per_step()
    );
    println!(
        "{:<16} {:<12} {:>12} {:>12} {:>10} {:>16}",
        "layer", "kind", "in", "out", "params", "dense/step"
    );
    for spec in &graph.layers {
        println!(
            "{:<16} {:<12} {:>12} {:>12} {:>10} {:>16}",
            spec.name,
            format!("{:?}", spec.kind).to_lowercase(),
            spec.in_shape.to_string(),
            spec.out_shape.to_string(),
            spec.n_params(),
            dense_synops(spec)
        );
    }
    println!(
        "total: {} params, {} dense SynOps per timestep",
        graph.n_params(),
        graph.dense_synops_per_step()
    );
    Ok(())
}
