//! `mos`: one binary tying the whole pipeline together.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or configuration error,
//! 3 numeric failure during computation.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{ArgGroup, Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mos_core::aggregation::{aggregate_scans, relative_poses, voxelize, SpatioTemporalCloud};
use mos_core::kitti_io::{read_labels, read_scan, remap_labels, LabelMap, SequenceDir};
use mos_core::scene_synth::{scene_suite, write_suite};
use mos_core::serialization::{
    composite_key, hilbert_encode, morton_encode, spatial_key, SerializationPattern, DEFAULT_BITS,
};
use mos_core::ssm_kernel::{discretize_sequence, scan_blocked, scan_sequential};
use mos_core::train_eval::{
    distance_binned_eval, evaluate, load_params, load_window, train_loop, write_metric_csv,
    DistanceBinnedReport, SceneSample,
};
use mos_core::{DenseArray, Error, ModelConfig, Result, SegModel, TrainConfig};

#[derive(Parser)]
#[command(
    name = "mos",
    version,
    about = "Moving object segmentation for multi-scan LiDAR clouds"
)]
struct Cli {
    /// Cap the worker thread pool at N threads (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic labelled dataset in the standard sequence layout.
    Synth(SynthArgs),
    /// Fold a scan window into one ego-compensated cloud and dump it as CSV.
    Aggregate(AggregateArgs),
    /// Dump space-filling-curve keys for the voxels of a point cloud.
    Serialize(SerializeArgs),
    /// Train a segmentation model and write checkpoints plus metrics.
    Train(TrainArgs),
    /// Evaluate predictions against labels, or a checkpoint against scenes.
    Eval(EvalArgs),
    /// Time the scan kernels and the curve encoders.
    Bench(BenchArgs),
    /// Export a labelled scan as an ASCII PLY with per-class colors.
    Export(ExportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Scene suite: easy, ranges, or crowded.
    #[arg(long)]
    suite: String,
    /// Scans per scene.
    #[arg(long, default_value_t = 4, value_name = "F")]
    scans: usize,
    /// Keep only the first N scenes of the suite.
    #[arg(long, value_name = "N")]
    count: Option<usize>,
    /// Offset added to every scene seed; 0 keeps the canonical suite.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; scenes land in numbered subdirectories.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct AggregateArgs {
    /// Sequence directory (velodyne/, labels/, poses.txt, calib.txt).
    #[arg(long, value_name = "DIR")]
    sequence: PathBuf,
    /// Index of the current scan (default: the last one).
    #[arg(long, value_name = "IDX")]
    current: Option<usize>,
    /// Window length in scans.
    #[arg(long, default_value_t = 4, value_name = "F")]
    scans: usize,
    /// Output CSV with one x,y,z,t row per point.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Args)]
struct SerializeArgs {
    /// Input CSV of points, one x,y,z[,t] row per line (header optional).
    #[arg(long, value_name = "FILE")]
    input: PathBuf,
    /// Curve pattern: z, zt, hilbert, or hilbertt.
    #[arg(long, default_value = "hilbert", value_parser = pattern_value)]
    pattern: SerializationPattern,
    /// Voxel edge length in meters.
    #[arg(long, default_value_t = 0.09)]
    grid_size: f64,
    /// Output CSV of index,key rows (default: stdout).
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of training scenes, one sequence per subdirectory.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Optional directory of validation scenes.
    #[arg(long, value_name = "DIR")]
    val: Option<PathBuf>,
    /// Output directory for last.ckpt, best.ckpt and metrics.csv.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Config file of `key = value` lines; flags below override it.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Resume training from a checkpoint written by an earlier run.
    #[arg(long, value_name = "FILE")]
    resume: Option<PathBuf>,
    /// Raw-to-class label map file for real datasets.
    #[arg(long, value_name = "FILE")]
    label_map: Option<PathBuf>,
    /// Use the small model preset instead of the full-size one.
    #[arg(long)]
    toy: bool,
    /// Learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Decoupled weight decay factor.
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Number of training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Scans folded into each training window.
    #[arg(long, value_name = "F")]
    num_scans: Option<usize>,
    /// Voxel edge length in meters.
    #[arg(long)]
    grid_size: Option<f64>,
    /// Scenes per optimizer step.
    #[arg(long)]
    batch: Option<usize>,
    /// Seed for init and augmentation draws.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
#[command(group = ArgGroup::new("mode").required(true).args(["pred", "checkpoint"]))]
struct EvalArgs {
    /// Directory of predicted .label files (needs --sequence).
    #[arg(long, value_name = "DIR", requires = "sequence")]
    pred: Option<PathBuf>,
    /// Sequence directory holding the scans and ground-truth labels.
    #[arg(long, value_name = "DIR")]
    sequence: Option<PathBuf>,
    /// Checkpoint to run (needs --data).
    #[arg(long, value_name = "FILE", requires = "data")]
    checkpoint: Option<PathBuf>,
    /// Directory of evaluation scenes, one sequence per subdirectory.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Scans per window; must match the trained model.
    #[arg(long, default_value_t = 4, value_name = "F")]
    num_scans: usize,
    /// Voxel edge length; must match the trained model.
    #[arg(long, default_value_t = 0.09)]
    grid_size: f64,
    /// Model seed used at training time (part of the config digest).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Small model preset; must match the trained model.
    #[arg(long)]
    toy: bool,
    /// Raw-to-class label map applied to ground-truth labels.
    #[arg(long, value_name = "FILE")]
    label_map: Option<PathBuf>,
    /// Where to write the distance-binned report CSV.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Sequence length per scan invocation.
    #[arg(long, default_value_t = 4096)]
    rows: usize,
    /// Channel count.
    #[arg(long, default_value_t = 16)]
    channels: usize,
    /// State dimension per channel.
    #[arg(long, default_value_t = 16)]
    state: usize,
    /// Chunk length of the blocked scan.
    #[arg(long, default_value_t = 128)]
    block: usize,
    /// Timed repetitions per kernel.
    #[arg(long, default_value_t = 5)]
    iters: usize,
    /// Seed for the random workload.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ExportArgs {
    /// Sequence directory holding the scans.
    #[arg(long, value_name = "DIR")]
    sequence: PathBuf,
    /// Scan index to export (default: the last one).
    #[arg(long, value_name = "IDX")]
    scan: Option<usize>,
    /// Directory of .label files to color by (default: the sequence's own).
    #[arg(long, value_name = "DIR")]
    labels: Option<PathBuf>,
    /// Raw-to-class label map applied before coloring.
    #[arg(long, value_name = "FILE")]
    label_map: Option<PathBuf>,
    /// Output PLY file.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

fn pattern_value(s: &str) -> std::result::Result<SerializationPattern, String> {
    SerializationPattern::parse(s)
        .ok_or_else(|| format!("unknown pattern {s:?} (choose z, zt, hilbert, hilbertt)"))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFiniteValue { .. }
        | Error::DisconnectedLoss
        | Error::RowNotNormalized { .. }
        | Error::NonPositiveDelta { .. } => 3,
        _ => 2,
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(args) => run_synth(args),
        Command::Aggregate(args) => run_aggregate(args),
        Command::Serialize(args) => run_serialize(args),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Bench(args) => run_bench(args),
        Command::Export(args) => run_export(args),
    }
}

fn run_synth(args: SynthArgs) -> Result<()> {
    let mut specs = scene_suite(&args.suite)?;
    if let Some(n) = args.count {
        specs.truncate(n);
    }
    for spec in &mut specs {
        spec.seed = spec.seed.wrapping_add(args.seed);
    }
    let dirs = write_suite(&args.out, &specs, args.scans)?;
    println!(
        "wrote {} scenes of suite {:?} ({} scans each) under {}",
        dirs.len(),
        args.suite,
        args.scans,
        args.out.display()
    );
    Ok(())
}

fn load_aggregated(dir: &SequenceDir, current: Option<usize>, f: usize) -> Result<SpatioTemporalCloud> {
    let n = dir.scan_count()?;
    let current = current.unwrap_or(n.saturating_sub(1));
    let poses = dir.read_poses()?;
    let rel = relative_poses(&poses, current, f)?;
    let mut scans = Vec::with_capacity(f);
    for t in 0..f {
        scans.push(read_scan(&dir.scan_path(current - t))?);
    }
    aggregate_scans(&scans, &rel)
}

fn run_aggregate(args: AggregateArgs) -> Result<()> {
    let dir = SequenceDir::new(&args.sequence);
    let cloud = load_aggregated(&dir, args.current, args.scans)?;
    let mut text = String::from("x,y,z,t\n");
    for (p, t) in cloud.positions.iter().zip(&cloud.scan_ids) {
        text.push_str(&format!("{},{},{},{t}\n", p[0], p[1], p[2]));
    }
    fs::write(&args.out, text).map_err(|e| Error::io(&args.out, e))?;
    println!(
        "wrote {} points from {} scans to {}",
        cloud.len(),
        args.scans,
        args.out.display()
    );
    Ok(())
}

fn read_points_csv(path: &Path) -> Result<SpatioTemporalCloud> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut positions = Vec::new();
    let mut scan_ids: Vec<u32> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if lineno == 0 && fields[0].parse::<f64>().is_err() {
            continue;
        }
        if fields.len() < 3 || fields.len() > 4 {
            return Err(Error::Parse {
                path: path.into(),
                line: lineno + 1,
                msg: format!("expected x,y,z[,t], got {} fields", fields.len()),
            });
        }
        let bad = |f: &str| Error::Parse {
            path: path.into(),
            line: lineno + 1,
            msg: format!("bad number {f:?}"),
        };
        let mut p = [0.0; 3];
        for a in 0..3 {
            p[a] = fields[a].parse().map_err(|_| bad(fields[a]))?;
        }
        let t: u32 = match fields.get(3) {
            Some(f) => f.parse().map_err(|_| bad(f))?,
            None => 0,
        };
        positions.push(p);
        scan_ids.push(t);
    }
    let scans = scan_ids.iter().map(|&t| t as usize + 1).max().unwrap_or(0);
    let mut counts = vec![0usize; scans];
    for &t in &scan_ids {
        counts[t as usize] += 1;
    }
    Ok(SpatioTemporalCloud {
        positions,
        scan_ids,
        counts_per_scan: counts,
    })
}

#[allow(clippy::neg_cmp_op_on_partial_ord)]
fn run_serialize(args: SerializeArgs) -> Result<()> {
    if !(args.grid_size > 0.0) {
        return Err(Error::Config {
            path: "--grid-size".into(),
            msg: "must be positive".into(),
        });
    }
    let cloud = read_points_csv(&args.input)?;
    let (voxels, grid) = voxelize(&cloud, args.grid_size);

    let mut min = [i64::MAX; 3];
    for c in &grid.voxel_coords {
        for a in 0..3 {
            min[a] = min[a].min(c[a]);
        }
    }
    let mut text = String::from("index,key\n");
    let limit = 1u64 << DEFAULT_BITS;
    for (i, c) in grid.voxel_coords.iter().enumerate() {
        let mut shifted = [0u64; 3];
        for a in 0..3 {
            let s = c[a] - min[a];
            if s as u64 >= limit {
                return Err(Error::CoordinateOutOfRange {
                    coord: c[a],
                    bits: DEFAULT_BITS,
                });
            }
            shifted[a] = s as u64;
        }
        let t = voxels.scan_ids[i];
        if t > u8::MAX as u32 {
            return Err(Error::Config {
                path: args.input.clone(),
                msg: format!("scan id {t} exceeds the composite key budget"),
            });
        }
        let key = composite_key(0, spatial_key(args.pattern, shifted, DEFAULT_BITS), t as u8);
        text.push_str(&format!("{i},{key}\n"));
    }
    match &args.out {
        Some(path) => {
            fs::write(path, text).map_err(|e| Error::io(path, e))?;
            println!(
                "wrote {} voxel keys ({} pattern) to {}",
                grid.num_voxels(),
                args.pattern.name(),
                path.display()
            );
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn load_label_map(path: Option<&Path>) -> Result<Option<LabelMap>> {
    path.map(LabelMap::from_file).transpose()
}

fn scene_dirs(root: &Path) -> Result<Vec<SequenceDir>> {
    if root.join("poses.txt").is_file() {
        return Ok(vec![SequenceDir::new(root)]);
    }
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.join("poses.txt").is_file())
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::NotFound(root.join("<scene>/poses.txt")));
    }
    Ok(paths.into_iter().map(SequenceDir::new).collect())
}

fn load_scenes(root: &Path, f: usize, map: Option<&LabelMap>) -> Result<Vec<SceneSample>> {
    scene_dirs(root)?
        .iter()
        .map(|dir| {
            let n = dir.scan_count()?;
            load_window(dir, n.saturating_sub(1), f, map)
        })
        .collect()
}

fn model_config(toy: bool, num_scans: usize, grid_size: f64, seed: u64) -> ModelConfig {
    let mut mc = if toy {
        ModelConfig::toy()
    } else {
        ModelConfig::default()
    };
    mc.num_scans = num_scans;
    mc.grid_size = grid_size;
    mc.seed = seed;
    mc
}

fn fmt_iou(iou: Option<f64>) -> String {
    match iou {
        Some(v) => format!("{v:.4}"),
        None => "undefined (no moving points)".to_string(),
    }
}

fn write_report_csv(path: &Path, bins: &DistanceBinnedReport) -> Result<()> {
    let mut text = String::from("bin,tp,fp,fn,iou\n");
    let rows = [
        ("close", bins.close),
        ("medium", bins.medium),
        ("far", bins.far),
        ("overall", bins.overall()),
    ];
    for (name, c) in rows {
        let iou = c.iou().map_or("nan".into(), |v| format!("{v:.6}"));
        text.push_str(&format!("{name},{},{},{},{iou}\n", c.tp, c.fp, c.fn_));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run_train(args: TrainArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => TrainConfig::from_file(path)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.weight_decay {
        cfg.weight_decay = v;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.num_scans {
        cfg.num_scans = v;
    }
    if let Some(v) = args.grid_size {
        cfg.grid_size = v;
    }
    if let Some(v) = args.batch {
        cfg.batch = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    cfg.validate()?;
    println!(
        "config: lr={} weight_decay={} epochs={} num_scans={} grid_size={} batch={} seed={}",
        cfg.lr, cfg.weight_decay, cfg.epochs, cfg.num_scans, cfg.grid_size, cfg.batch, cfg.seed
    );

    let map = load_label_map(args.label_map.as_deref())?;
    let train = load_scenes(&args.data, cfg.num_scans, map.as_ref())?;
    let val = match &args.val {
        Some(dir) => load_scenes(dir, cfg.num_scans, map.as_ref())?,
        None => Vec::new(),
    };
    println!("loaded {} training and {} validation scenes", train.len(), val.len());

    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let mc = model_config(args.toy, cfg.num_scans, cfg.grid_size, cfg.seed);
    let outcome = train_loop(
        &train,
        &val,
        &mc,
        &cfg,
        Some(&args.out),
        args.resume.as_deref(),
    )?;
    write_metric_csv(&args.out.join("metrics.csv"), &outcome.trace)?;

    println!("best IoU_MOS: {}", fmt_iou(outcome.best_iou));
    println!(
        "wrote {}/last.ckpt and metrics.csv",
        args.out.display()
    );
    Ok(())
}

fn eval_prediction_files(
    sequence: &Path,
    pred: &Path,
    map: Option<&LabelMap>,
) -> Result<DistanceBinnedReport> {
    let dir = SequenceDir::new(sequence);
    let n = dir.scan_count()?;
    let mut report = DistanceBinnedReport::default();
    let mut evaluated = 0;
    for idx in 0..n {
        let pred_path = pred.join(format!("{idx:06}.label"));
        if !pred_path.is_file() {
            continue;
        }
        let scan = read_scan(&dir.scan_path(idx))?;
        let gt = match map {
            Some(m) => remap_labels(&read_labels(&dir.label_path(idx))?, m),
            None => read_labels(&dir.label_path(idx))?,
        };
        let predicted = read_labels(&pred_path)?;
        let mask = vec![true; gt.len()];
        report.merge(&distance_binned_eval(&predicted, &gt, &scan.points, &mask)?);
        evaluated += 1;
    }
    if evaluated == 0 {
        return Err(Error::NotFound(pred.join("*.label")));
    }
    println!("evaluated {evaluated} scans");
    Ok(report)
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let map = load_label_map(args.label_map.as_deref())?;
    let bins = match (&args.pred, &args.checkpoint) {
        (Some(pred), None) => {
            let sequence = args.sequence.as_deref().expect("clap enforces --sequence");
            eval_prediction_files(sequence, pred, map.as_ref())?
        }
        (None, Some(ckpt)) => {
            let data = args.data.as_deref().expect("clap enforces --data");
            let mc = model_config(args.toy, args.num_scans, args.grid_size, args.seed);
            let model = SegModel::new(mc.clone())?;
            let params = load_params(ckpt, mc.digest())?;
            let scenes = load_scenes(data, args.num_scans, map.as_ref())?;
            let summary = evaluate(&model, &params, &scenes)?;
            println!(
                "loss: ce={:.6} lovasz={:.6} over {} scenes",
                summary.loss_ce,
                summary.loss_ls,
                scenes.len()
            );
            summary.bins
        }
        _ => unreachable!("clap enforces exactly one mode"),
    };

    let overall = bins.overall();
    println!("IoU_MOS: {}", fmt_iou(overall.iou()));
    println!(
        "  close  [0,20):  {}",
        fmt_iou(bins.close.iou())
    );
    println!(
        "  medium [20,50): {}",
        fmt_iou(bins.medium.iou())
    );
    println!(
        "  far    [50,inf): {}",
        fmt_iou(bins.far.iou())
    );
    if let Some(path) = &args.out {
        write_report_csv(path, &bins)?;
        println!("wrote report to {}", path.display());
    }
    Ok(())
}

fn run_bench(args: BenchArgs) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut rnd = |shape: &[usize], lo: f64, hi: f64| {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        DenseArray::from_vec(shape, data)
    };
    let (rows, ch, ns) = (args.rows, args.channels, args.state);
    let a = rnd(&[ch, ns], -2.0, -0.1);
    let b_seq = rnd(&[rows, ns], -1.0, 1.0);
    let delta = rnd(&[rows, ch], 1e-3, 0.1);
    let x = rnd(&[rows, ch], -1.0, 1.0);
    let c_seq = rnd(&[rows, ns], -1.0, 1.0);
    let disc = discretize_sequence(&a, &b_seq, &delta)?;

    let y_seq = scan_sequential(&disc, &x, &c_seq, None)?;
    let y_blk = scan_blocked(&disc, &x, &c_seq, None, args.block)?;
    let max_diff = y_seq
        .data()
        .iter()
        .zip(y_blk.data())
        .map(|(p, q)| (p - q).abs())
        .fold(0.0, f64::max);

    let iters = args.iters.max(1);
    let t0 = Instant::now();
    for _ in 0..iters {
        std::hint::black_box(scan_sequential(&disc, &x, &c_seq, None)?);
    }
    let seq_s = t0.elapsed().as_secs_f64();
    let t0 = Instant::now();
    for _ in 0..iters {
        std::hint::black_box(scan_blocked(&disc, &x, &c_seq, None, args.block)?);
    }
    let blk_s = t0.elapsed().as_secs_f64();

    let throughput = |secs: f64| (rows * iters) as f64 / secs / 1e3;
    println!(
        "selective scan, {} rows x {} channels x {} states, {} iterations",
        rows, ch, ns, iters
    );
    println!("  sequential:        {:10.1} krows/s", throughput(seq_s));
    println!(
        "  blocked (block {}): {:10.1} krows/s ({:.2}x)",
        args.block,
        throughput(blk_s),
        seq_s / blk_s
    );
    println!("  max |blocked - sequential| = {max_diff:.2e}");

    let coords: Vec<[u64; 3]> = (0..1 << 16)
        .map(|_| {
            [
                rng.random_range(0..1u64 << 16),
                rng.random_range(0..1u64 << 16),
                rng.random_range(0..1u64 << 16),
            ]
        })
        .collect();
    let time_encode = |f: &dyn Fn([u64; 3]) -> u64| {
        let t0 = Instant::now();
        for _ in 0..iters {
            for &c in &coords {
                std::hint::black_box(f(std::hint::black_box(c)));
            }
        }
        (coords.len() * iters) as f64 / t0.elapsed().as_secs_f64() / 1e6
    };
    let morton = time_encode(&|c| morton_encode(c, DEFAULT_BITS));
    let hilbert = time_encode(&|c| hilbert_encode(c, DEFAULT_BITS));
    println!("curve encoding, {} keys per iteration", coords.len());
    println!("  morton:  {morton:8.1} Mkeys/s");
    println!("  hilbert: {hilbert:8.1} Mkeys/s");
    Ok(())
}

fn class_color(class: u32) -> [u8; 3] {
    match class {
        1 => [128, 128, 128],
        2 => [255, 0, 0],
        3 => [0, 0, 255],
        _ => [40, 40, 40],
    }
}

fn run_export(args: ExportArgs) -> Result<()> {
    let dir = SequenceDir::new(&args.sequence);
    let n = dir.scan_count()?;
    let idx = args.scan.unwrap_or(n.saturating_sub(1));
    let scan = read_scan(&dir.scan_path(idx))?;
    let label_path = match &args.labels {
        Some(d) => d.join(format!("{idx:06}.label")),
        None => dir.label_path(idx),
    };
    let mut labels = read_labels(&label_path)?;
    if let Some(map) = load_label_map(args.label_map.as_deref())? {
        labels = remap_labels(&labels, &map);
    }
    if labels.len() != scan.len() {
        return Err(Error::LengthMismatch {
            what: "labels for exported scan",
            got: labels.len(),
            expected: scan.len(),
        });
    }

    let mut text = String::from("ply\nformat ascii 1.0\n");
    text.push_str(&format!("element vertex {}\n", scan.len()));
    text.push_str(
        "property float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
    );
    for (p, &l) in scan.points.iter().zip(&labels) {
        let [r, g, b] = class_color(l);
        text.push_str(&format!("{} {} {} {r} {g} {b}\n", p[0], p[1], p[2]));
    }
    fs::write(&args.out, text).map_err(|e| Error::io(&args.out, e))?;
    println!(
        "wrote {} vertices from scan {idx} to {}",
        scan.len(),
        args.out.display()
    );
    Ok(())
}
