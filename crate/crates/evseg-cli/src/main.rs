//! Command-line pipeline: synth, graph, train, predict, eval, label.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use evseg::domel::{self, DomelConfig, IcpOptions};
use evseg::events::{self, Event, EventLabel, EventWindow, SensorGeometry};
use evseg::graph::{build_knn_graph, MetricConfig};
use evseg::gtnn::{load_checkpoint, predicted_labels, save_checkpoint, GtnnConfig, GtnnModel};
use evseg::metrics::{score_window, scores, ConfusionCounts, WindowScore};
use evseg::synth::{self, SceneConfig};
use evseg::train::{
    build_window_samples, make_schedule, train, LossConfig, LossKind, TrainConfig, WindowingParams,
};
use evseg::Error;

#[derive(Parser)]
#[command(name = "evseg", version, about = "Event-camera motion segmentation pipeline")]
struct Cli {
    /// Worker threads for data-parallel stages (0 = all cores).
    /// Falls back to the EVSEG_THREADS environment variable.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic sequence.
    Synth(SynthArgs),
    /// Build event graphs and dump their edge lists.
    Graph(GraphArgs),
    /// Train the segmentation network.
    Train(TrainArgs),
    /// Classify events with a trained checkpoint.
    Predict(PredictArgs),
    /// Score predicted labels against ground truth.
    Eval(EvalArgs),
    /// Label events offline from frames and object masks.
    Label(LabelArgs),
}

#[derive(Args)]
struct GeometryArgs {
    /// Sensor width in pixels.
    #[arg(long, default_value_t = 96)]
    width: u32,
    /// Sensor height in pixels.
    #[arg(long, default_value_t = 96)]
    height: u32,
}

impl GeometryArgs {
    fn build(&self) -> Result<SensorGeometry, Error> {
        SensorGeometry::new(self.width, self.height)
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Output sequence directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of moving objects.
    #[arg(long, default_value_t = 1)]
    objects: usize,
    #[command(flatten)]
    geometry: GeometryArgs,
    #[arg(long, default_value_t = 250)]
    duration_ms: i64,
    /// Camera pan velocity, px/s.
    #[arg(long, default_value_t = 60.0)]
    pan_x: f64,
    #[arg(long, default_value_t = 0.0)]
    pan_y: f64,
    /// Contrast threshold in log-intensity units.
    #[arg(long, default_value_t = 0.25)]
    contrast: f64,
    /// Noise events per pixel per second.
    #[arg(long, default_value_t = 0.0)]
    noise_rate: f64,
    /// Frame and mask cadence, ms.
    #[arg(long, default_value_t = 25)]
    frame_ms: i64,
    /// Texture grain in pixels.
    #[arg(long, default_value_t = 6)]
    texture_cell: usize,
}

#[derive(Args)]
struct GraphArgs {
    /// Input event file.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output directory for per-window edge lists.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    geometry: GeometryArgs,
    #[arg(long, default_value_t = 10)]
    window_ms: i64,
    /// Neighborhood size.
    #[arg(long, default_value_t = 16)]
    k: usize,
    /// Cap on events per window.
    #[arg(long, default_value_t = 5000)]
    nmax: usize,
    /// Pixels per microsecond, or AUTO for max(W,H)/window.
    #[arg(long, default_value = "AUTO")]
    time_scale: String,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory holding one sequence or one subdirectory per sequence
    /// (events.txt + labels.txt).
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    geometry: GeometryArgs,
    /// Training subsets L; epoch i trains on subset i mod L.
    #[arg(long, default_value_t = 5)]
    subsets: usize,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    /// cross_entropy | focal | dual_focal.
    #[arg(long, default_value = "focal")]
    loss: String,
    #[arg(long, default_value_t = 2.0)]
    gamma: f64,
    /// Class weights: `auto` (inverse class frequency) or `BG,FG`.
    #[arg(long, default_value = "auto")]
    weights: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    window_ms: i64,
    #[arg(long, default_value_t = 16)]
    k: usize,
    #[arg(long, default_value_t = 5000)]
    nmax: usize,
    /// Encoder widths, comma separated.
    #[arg(long, default_value = "32,64,128")]
    dims: String,
    /// Skip windows with fewer events than this.
    #[arg(long, default_value_t = 64)]
    min_events: usize,
    /// Optional training-history CSV path.
    #[arg(long)]
    history: Option<PathBuf>,
    /// Optional model-config text file (defaults next to the checkpoint).
    #[arg(long)]
    model_config: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    /// Output label file.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    geometry: GeometryArgs,
    #[arg(long, default_value_t = 10)]
    window_ms: i64,
    #[arg(long, default_value_t = 5000)]
    nmax: usize,
    #[arg(long, default_value = "AUTO")]
    time_scale: String,
    #[arg(long, default_value_t = 64)]
    min_events: usize,
}

#[derive(Args)]
struct EvalArgs {
    /// Predicted label file.
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth label file.
    #[arg(long)]
    gt: PathBuf,
    /// Event file both label files are parallel to.
    #[arg(long)]
    events: PathBuf,
    #[command(flatten)]
    geometry: GeometryArgs,
    #[arg(long, default_value_t = 10)]
    window_ms: i64,
    /// Comma-separated subset of f1,iou,dr.
    #[arg(long, default_value = "f1,iou,dr")]
    metrics: String,
    /// Report CSV path (stdout when omitted).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write per-window overlay PGMs into this directory.
    #[arg(long)]
    dump_overlays: Option<PathBuf>,
}

#[derive(Args)]
struct LabelArgs {
    #[arg(long)]
    events: PathBuf,
    /// Directory of <timestamp_us>.pgm grayscale frames.
    #[arg(long)]
    frames: PathBuf,
    /// Directory of <timestamp_us>.pgm object masks.
    #[arg(long)]
    masks: PathBuf,
    /// Output label file.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    geometry: GeometryArgs,
    #[arg(long, default_value_t = 1.4)]
    sigma: f64,
    #[arg(long, default_value_t = 40.0)]
    low: f64,
    #[arg(long, default_value_t = 100.0)]
    high: f64,
    /// Alignment rounds per ICP stage.
    #[arg(long, default_value_t = 3)]
    rounds: usize,
    /// Correspondence gate in pixels.
    #[arg(long, default_value_t = 8.0)]
    gate: f64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let threads = cli
        .threads
        .or_else(|| std::env::var("EVSEG_THREADS").ok().and_then(|v| v.parse().ok()))
        .unwrap_or(0);
    evseg::par::configure_threads(threads);

    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidConfig(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::Synth(args) => cmd_synth(args),
        Command::Graph(args) => cmd_graph(args),
        Command::Train(args) => cmd_train(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Label(args) => cmd_label(args),
    }
}

fn read_events(path: &Path, geometry: SensorGeometry) -> Result<Vec<Event>, Error> {
    let file = File::open(path).map_err(|e| {
        Error::Parse { line: 0, msg: format!("cannot open {}: {e}", path.display()) }
    })?;
    events::parse_events(BufReader::new(file), geometry)
}

fn read_labels(path: &Path) -> Result<Vec<EventLabel>, Error> {
    let file = File::open(path).map_err(|e| {
        Error::Parse { line: 0, msg: format!("cannot open {}: {e}", path.display()) }
    })?;
    events::parse_labels(BufReader::new(file))
}

fn parse_time_scale(
    spec: &str,
    geometry: SensorGeometry,
    window_us: i64,
) -> Result<MetricConfig, Error> {
    if spec.eq_ignore_ascii_case("auto") {
        Ok(MetricConfig::auto(geometry, window_us))
    } else {
        let v: f64 = spec
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("bad --time-scale {spec:?}")))?;
        MetricConfig::new(v)
    }
}

fn parse_dims(spec: &str) -> Result<[usize; 3], Error> {
    let parts: Vec<usize> = spec
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| Error::InvalidConfig(format!("bad --dims {spec:?}")))?;
    if parts.len() != 3 {
        return Err(Error::InvalidConfig(format!("--dims needs 3 values, got {spec:?}")));
    }
    Ok([parts[0], parts[1], parts[2]])
}

fn cmd_synth(args: SynthArgs) -> Result<(), Error> {
    let geometry = args.geometry.build()?;
    let config = SceneConfig {
        geometry,
        duration_us: args.duration_ms * 1000,
        pan_velocity: (args.pan_x, args.pan_y),
        objects: Vec::new(),
        contrast: args.contrast,
        noise_rate: args.noise_rate,
        frame_interval_us: args.frame_ms * 1000,
        sim_step_us: 1000,
        texture_cell: args.texture_cell,
    }
    .with_random_objects(args.objects, args.seed);
    println!(
        "synth: out={} seed={} objects={} geometry={}x{} duration_ms={} pan=({},{}) contrast={} noise_rate={} frame_ms={}",
        args.out.display(),
        args.seed,
        args.objects,
        geometry.width,
        geometry.height,
        args.duration_ms,
        args.pan_x,
        args.pan_y,
        args.contrast,
        args.noise_rate,
        args.frame_ms
    );
    let output = synth::generate(&config, args.seed)?;
    std::fs::create_dir_all(&args.out)?;
    synth::write_sequence(&args.out, &output)?;
    let meta = format!(
        "width={}\nheight={}\nduration_us={}\n",
        geometry.width, geometry.height, config.duration_us
    );
    std::fs::write(args.out.join("meta.txt"), meta)?;
    let fg = output.labels.iter().filter(|l| l.foreground).count();
    println!(
        "synth: wrote {} events ({} foreground), {} frames",
        output.events.len(),
        fg,
        output.frames.len()
    );
    Ok(())
}

fn cmd_graph(args: GraphArgs) -> Result<(), Error> {
    let geometry = args.geometry.build()?;
    let window_us = args.window_ms * 1000;
    let metric = parse_time_scale(&args.time_scale, geometry, window_us)?;
    println!(
        "graph: in={} out={} window_ms={} k={} nmax={} time_scale={:.9} geometry={}x{}",
        args.input.display(),
        args.out.display(),
        args.window_ms,
        args.k,
        args.nmax,
        metric.time_scale,
        geometry.width,
        geometry.height
    );
    let events = read_events(&args.input, geometry)?;
    let windows = events::slice_windows(&events, window_us, args.nmax)?;
    std::fs::create_dir_all(&args.out)?;
    let mut built = 0usize;
    let mut skipped = 0usize;
    let mut edges = 0usize;
    for (i, window) in windows.iter().enumerate() {
        if window.len() <= args.k {
            skipped += 1;
            continue;
        }
        let graph = build_knn_graph(window, args.k, metric, geometry)?;
        let path = args.out.join(format!("window_{i:06}.edges"));
        let mut w = BufWriter::new(File::create(path)?);
        graph.dump_edges(&mut w)?;
        w.flush()?;
        built += 1;
        edges += graph.len() * graph.k;
    }
    println!("graph: {built} windows written, {skipped} skipped (too few events), {edges} edges");
    Ok(())
}

/// Load sequences under `data`: either one sequence directory or a
/// directory of them.
fn load_sequences(
    data: &Path,
    geometry: SensorGeometry,
) -> Result<Vec<(PathBuf, Vec<Event>, Vec<EventLabel>)>, Error> {
    let mut dirs = Vec::new();
    if data.join("events.txt").exists() {
        dirs.push(data.to_path_buf());
    } else {
        for entry in std::fs::read_dir(data)? {
            let path = entry?.path();
            if path.is_dir() && path.join("events.txt").exists() {
                dirs.push(path);
            }
        }
        dirs.sort();
    }
    if dirs.is_empty() {
        return Err(Error::Parse {
            line: 0,
            msg: format!("no sequences (events.txt) under {}", data.display()),
        });
    }
    dirs.into_iter()
        .map(|dir| {
            let events = read_events(&dir.join("events.txt"), geometry)?;
            let labels = read_labels(&dir.join("labels.txt"))?;
            if labels.len() != events.len() {
                return Err(Error::Parse {
                    line: 0,
                    msg: format!(
                        "{}: {} labels for {} events",
                        dir.display(),
                        labels.len(),
                        events.len()
                    ),
                });
            }
            Ok((dir, events, labels))
        })
        .collect()
}

fn cmd_train(args: TrainArgs) -> Result<(), Error> {
    let geometry = args.geometry.build()?;
    let dims = parse_dims(&args.dims)?;
    let loss_kind = LossKind::parse(&args.loss)?;
    let window_us = args.window_ms * 1000;
    println!(
        "train: data={} ckpt={} subsets={} epochs={} batch={} lr={} loss={} gamma={} seed={} window_ms={} k={} nmax={} dims={},{},{} geometry={}x{} min_events={}",
        args.data.display(),
        args.ckpt.display(),
        args.subsets,
        args.epochs,
        args.batch,
        args.lr,
        args.loss,
        args.gamma,
        args.seed,
        args.window_ms,
        args.k,
        args.nmax,
        dims[0],
        dims[1],
        dims[2],
        geometry.width,
        geometry.height,
        args.min_events
    );

    let sequences = load_sequences(&args.data, geometry)?;
    let windowing = WindowingParams {
        window_us,
        n_max: args.nmax,
        k: args.k,
        min_events: args.min_events,
        geometry,
    };
    let mut samples = Vec::new();
    for (_, events, labels) in &sequences {
        samples.extend(build_window_samples(events, labels, &windowing)?);
    }
    if samples.is_empty() {
        return Err(Error::Parse { line: 0, msg: "no trainable windows in the dataset".into() });
    }
    println!("train: {} sequences, {} window graphs", sequences.len(), samples.len());

    let base = LossConfig { kind: loss_kind, gamma: args.gamma, weights: [1.0, 1.0] };
    let loss = if args.weights.eq_ignore_ascii_case("auto") {
        base.with_inverse_frequency(samples.iter().flat_map(|s| s.labels.iter().copied()))
    } else {
        let parts: Vec<f64> = args
            .weights
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| Error::InvalidConfig(format!("bad --weights {:?}", args.weights)))?;
        if parts.len() != 2 {
            return Err(Error::InvalidConfig(format!(
                "--weights needs `auto` or two values, got {:?}",
                args.weights
            )));
        }
        LossConfig { weights: [parts[0], parts[1]], ..base }
    };
    println!("train: class weights bg={:.4} fg={:.4}", loss.weights[0], loss.weights[1]);

    let mut config = GtnnConfig::reduced(dims, args.k);
    if dims == [32, 64, 128] {
        config = GtnnConfig { k: args.k, ..GtnnConfig::default() };
    }
    let mut model = GtnnModel::new(config, args.seed)?;
    let schedule = make_schedule(samples.len(), args.subsets, args.seed)?;
    let train_cfg = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch,
        adam: evseg::tensor::AdamConfig { lr: args.lr, ..Default::default() },
        loss,
        seed: args.seed,
        stats_momentum: 0.1,
    };
    let history = train(&mut model, &samples, &schedule, &train_cfg)?;
    if let Some(last) = history.entries.last() {
        println!("train: final epoch {} subset {} loss {:.6}", last.epoch, last.subset, last.loss);
    }

    save_checkpoint(&model, &args.ckpt)?;
    let config_path = args
        .model_config
        .unwrap_or_else(|| args.ckpt.with_extension("config"));
    std::fs::write(&config_path, model.config.to_text())?;
    if let Some(history_path) = args.history {
        let mut w = BufWriter::new(File::create(&history_path)?);
        history.write_csv(&mut w)?;
        w.flush()?;
    }
    println!("train: checkpoint written to {}", args.ckpt.display());
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<(), Error> {
    let geometry = args.geometry.build()?;
    let window_us = args.window_ms * 1000;
    let metric = parse_time_scale(&args.time_scale, geometry, window_us)?;
    let model = load_checkpoint(&args.ckpt)?;
    println!(
        "predict: ckpt={} in={} out={} window_ms={} nmax={} time_scale={:.9} k={} dims={},{},{} geometry={}x{}",
        args.ckpt.display(),
        args.input.display(),
        args.out.display(),
        args.window_ms,
        args.nmax,
        metric.time_scale,
        model.config.k,
        model.config.encoder_dims[0],
        model.config.encoder_dims[1],
        model.config.encoder_dims[2],
        geometry.width,
        geometry.height
    );
    let events = read_events(&args.input, geometry)?;
    let windows = events::slice_windows(&events, window_us, usize::MAX)?;

    // Every input event gets a label; events in unviable windows or cut by
    // the cap default to background.
    let mut labels = vec![EventLabel::background(); events.len()];
    let mut cursor = 0usize;
    let floor = args.min_events.max(model.config.k + 1).max(17);
    let mut windows_run = 0usize;
    for window in windows {
        let start = cursor;
        cursor += window.len();
        if window.len() < floor {
            continue;
        }
        let (window, offset) = if window.len() > args.nmax {
            let drop = window.len() - args.nmax;
            (EventWindow { events: window.events[drop..].to_vec(), ..window }, start + drop)
        } else {
            (window, start)
        };
        let graph = build_knn_graph(&window, model.config.k, metric, geometry)?;
        let probs = model.forward(&graph)?;
        for (i, cls) in predicted_labels(&probs).into_iter().enumerate() {
            if cls == 1 {
                labels[offset + i] = EventLabel::foreground(1);
            }
        }
        windows_run += 1;
    }
    let mut w = BufWriter::new(File::create(&args.out)?);
    events::write_labels(&mut w, &labels)?;
    w.flush()?;
    let fg = labels.iter().filter(|l| l.foreground).count();
    println!(
        "predict: {} windows classified, {}/{} events foreground",
        windows_run,
        fg,
        labels.len()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), Error> {
    let geometry = args.geometry.build()?;
    let window_us = args.window_ms * 1000;
    let wanted: Vec<&str> = args.metrics.split(',').map(|s| s.trim()).collect();
    for m in &wanted {
        if !["f1", "iou", "dr"].contains(m) {
            return Err(Error::InvalidConfig(format!("unknown metric {m:?}")));
        }
    }
    println!(
        "eval: pred={} gt={} events={} window_ms={} metrics={} geometry={}x{}",
        args.pred.display(),
        args.gt.display(),
        args.events.display(),
        args.window_ms,
        args.metrics,
        geometry.width,
        geometry.height
    );
    let events = read_events(&args.events, geometry)?;
    let pred = read_labels(&args.pred)?;
    let gt = read_labels(&args.gt)?;
    if pred.len() != events.len() || gt.len() != events.len() {
        return Err(Error::Parse {
            line: 0,
            msg: format!(
                "label counts ({} pred, {} gt) do not match {} events",
                pred.len(),
                gt.len(),
                events.len()
            ),
        });
    }
    let windows = events::slice_windows(&events, window_us, usize::MAX)?;
    let mut cursor = 0usize;
    let mut rows: Vec<(usize, WindowScore)> = Vec::new();
    for (i, window) in windows.iter().enumerate() {
        let range = cursor..cursor + window.len();
        cursor += window.len();
        if window.is_empty() {
            continue;
        }
        rows.push((
            i,
            score_window(&window.events, &pred[range.clone()], &gt[range], geometry),
        ));
    }

    if let Some(dir) = &args.dump_overlays {
        std::fs::create_dir_all(dir)?;
        let mut cursor = 0usize;
        for (i, window) in windows.iter().enumerate() {
            let range = cursor..cursor + window.len();
            cursor += window.len();
            if window.is_empty() {
                continue;
            }
            let mut img = evseg::pgm::GrayImage::new(geometry.width, geometry.height);
            for (e, (p, g)) in window.events.iter().zip(pred[range.clone()].iter().zip(&gt[range])) {
                // Brightness encodes agreement: TP 255, FP 170, FN 85.
                let v = match (p.foreground, g.foreground) {
                    (true, true) => 255,
                    (true, false) => 170,
                    (false, true) => 85,
                    (false, false) => 40,
                };
                img.set(e.x as u32, e.y as u32, v);
            }
            evseg::pgm::write_pgm(&dir.join(format!("window_{i:06}.pgm")), &img)?;
        }
    }

    let mut report: Box<dyn Write> = match &args.report {
        Some(path) => Box::new(BufWriter::new(File::create(path)?)),
        None => Box::new(std::io::stdout().lock()),
    };
    writeln!(report, "window_id,iou,dr_success,tp,fp,tn,fn")?;
    let mut total = ConfusionCounts::default();
    let mut iou_sum = 0.0;
    let mut iou_n = 0usize;
    let mut dr_succ = 0usize;
    let mut dr_total = 0usize;
    for (window_id, row) in &rows {
        total.add(&row.counts);
        let iou_field = match row.iou {
            Some(v) => {
                iou_sum += v;
                iou_n += 1;
                format!("{v:.6}")
            }
            None => String::new(),
        };
        let dr_field = if row.dr_total > 0 {
            dr_succ += row.dr_successes;
            dr_total += row.dr_total;
            format!("{:.6}", row.dr_successes as f64 / row.dr_total as f64)
        } else {
            String::new()
        };
        writeln!(
            report,
            "{},{},{},{},{},{},{}",
            window_id, iou_field, dr_field, row.counts.tp, row.counts.fp, row.counts.tn, row.counts.fn_
        )?;
    }
    let s = scores(&total);
    let mut summary = vec![format!("windows={}", rows.len())];
    if wanted.contains(&"f1") {
        summary.push(format!("f1={:.4}", s.f1));
        summary.push(format!("recall={:.4}", s.recall));
        summary.push(format!("precision={:.4}", s.precision));
    }
    if wanted.contains(&"iou") {
        let mean = if iou_n > 0 { iou_sum / iou_n as f64 } else { 1.0 };
        summary.push(format!("iou_mean={mean:.4}"));
    }
    if wanted.contains(&"dr") {
        let rate = if dr_total > 0 { dr_succ as f64 / dr_total as f64 } else { 0.0 };
        summary.push(format!("dr={:.4}", rate));
    }
    writeln!(report, "summary,{}", summary.join(","))?;
    report.flush()?;
    Ok(())
}

fn cmd_label(args: LabelArgs) -> Result<(), Error> {
    let geometry = args.geometry.build()?;
    println!(
        "label: events={} frames={} masks={} out={} sigma={} low={} high={} rounds={} gate={} geometry={}x{}",
        args.events.display(),
        args.frames.display(),
        args.masks.display(),
        args.out.display(),
        args.sigma,
        args.low,
        args.high,
        args.rounds,
        args.gate,
        geometry.width,
        geometry.height
    );
    let events = read_events(&args.events, geometry)?;
    let frames = domel::load_frames(&args.frames, geometry)?;
    let masks = domel::load_masks(&args.masks, geometry)?;
    let config = DomelConfig {
        sigma: args.sigma,
        low: args.low,
        high: args.high,
        outer_rounds: args.rounds,
        icp: IcpOptions { max_corr_dist: Some(args.gate), ..Default::default() },
        ..Default::default()
    };
    let labels = domel::label_events(&events, &frames, &masks, &config)?;
    let mut w = BufWriter::new(File::create(&args.out)?);
    events::write_labels(&mut w, &labels)?;
    w.flush()?;
    let fg = labels.iter().filter(|l| l.foreground).count();
    println!("label: {} events labeled, {} foreground", labels.len(), fg);
    Ok(())
}
