//! `synseg` — dataset generation, training, evaluation and montages for
//! the unpaired synthesis + segmentation system.
//!
//! Every verb reads one flat `key = value` configuration file (`--config`)
//! with optional `--set key=value` overrides; the named flags (`--seed`,
//! `--out`, ...) are shorthand for the corresponding keys. Exit codes:
//! 0 success, 2 usage/configuration error, 3 data or checkpoint error,
//! 4 numeric failure during training.

use clap::{Args, Parser, Subcommand};
use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use synseg_core::config::RawConfig;
use synseg_core::data::manifest::{load_slices, Manifest};
use synseg_core::data::pgm;
use synseg_core::data::phantom::{self, PhantomSpec};
use synseg_core::data::{Modality, Slice};
use synseg_core::error::{Error, Result};
use synseg_core::metrics::{
    significance_marker, summarize, wilcoxon_signed_rank, write_results_csv, MetricsRecord,
};
use synseg_core::nn::Network;
use synseg_core::rng::NamedStream;
use synseg_core::tensor::Tensor;
use synseg_core::training::{
    self, check_checkpoint_geometry, checkpoint::Checkpoint, generator_from_checkpoint,
    prepare_scans, run_training, segmenter_from_checkpoint, TrainConfig,
};

#[derive(Parser)]
#[command(name = "synseg", version, about = "Unpaired cross-modality synthesis + segmentation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the procedural two-modality phantom dataset
    GenData(GenDataArgs),
    /// Train one variant (SYNSEG, HC, TWO_STAGE or SEG_ONLY)
    Train(TrainArgs),
    /// Score checkpoints on the labeled evaluation store
    Eval(EvalArgs),
    /// Render translation/segmentation image grids from a checkpoint
    Montage(MontageArgs),
}

#[derive(Args)]
struct Common {
    /// Configuration file of `key = value` lines
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inline override, repeatable: --set train.epochs=10
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Master seed (shorthand for `seed`)
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    /// Output dataset directory (shorthand for `data.out`)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Variant to train (shorthand for `train.variant`)
    #[arg(long)]
    variant: Option<String>,
    /// Epoch count (shorthand for `train.epochs`)
    #[arg(long)]
    epochs: Option<usize>,
    /// Run directory (shorthand for `train.out`)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Report directory (shorthand for `eval.out`)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoints to score; each is reported under its stored variant
    #[arg(required = true, value_name = "CHECKPOINT")]
    checkpoints: Vec<PathBuf>,
}

#[derive(Args)]
struct MontageArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory (shorthand for `montage.out`)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of sampled slices per path (shorthand for `montage.n`)
    #[arg(long)]
    n: Option<usize>,
    /// Synthesis checkpoint to render from
    #[arg(value_name = "CHECKPOINT")]
    checkpoint: PathBuf,
}

/// Keys any verb may see in a shared configuration file.
fn known_keys() -> Vec<&'static str> {
    let mut keys = training::TRAIN_KEYS.to_vec();
    keys.extend_from_slice(&[
        "data.out",
        "data.n_source_scans",
        "data.n_val_scans",
        "data.n_target_scans",
        "data.slices_per_scan",
        "data.image_size",
        "data.organ_radius_lo",
        "data.organ_radius_hi",
        "data.n_confounders",
        "data.noise_std",
        "data.bias_strength",
        "eval.out",
        "montage.out",
        "montage.n",
    ]);
    keys
}

fn build_config(common: &Common) -> Result<RawConfig> {
    let mut raw = match &common.config {
        Some(p) => RawConfig::from_file(p)?,
        None => RawConfig::parse("")?,
    };
    for s in &common.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got {s:?}")))?;
        raw.set(k.trim(), v.trim());
    }
    if let Some(seed) = common.seed {
        raw.set("seed", &seed.to_string());
    }
    raw.check_known(&known_keys())?;
    Ok(raw)
}

fn init_threads() {
    if let Ok(v) = std::env::var("SYNSEG_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn main() -> ExitCode {
    init_threads();
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::GenData(a) => cmd_gen_data(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Montage(a) => cmd_montage(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Config(_) | Error::InvalidArgument(_) | Error::ShapeMismatch { .. } => 2,
                Error::Data(_) | Error::Io(_) | Error::Checkpoint(_) => 3,
                Error::Numeric(_) => 4,
            };
            ExitCode::from(code)
        }
    }
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let mut raw = build_config(&args.common)?;
    if let Some(out) = &args.out {
        raw.set("data.out", &out.to_string_lossy());
    }
    let out = PathBuf::from(raw.require("data.out")?);
    let d = PhantomSpec::default();
    let spec = PhantomSpec {
        seed: raw.u64_or("seed", d.seed)?,
        n_source_scans: raw.usize_or("data.n_source_scans", d.n_source_scans)?,
        n_val_scans: raw.usize_or("data.n_val_scans", d.n_val_scans)?,
        n_target_scans: raw.usize_or("data.n_target_scans", d.n_target_scans)?,
        slices_per_scan: raw.usize_or("data.slices_per_scan", d.slices_per_scan)?,
        image_size: raw.usize_or("data.image_size", d.image_size)?,
        organ_radius: (
            raw.f64_or("data.organ_radius_lo", d.organ_radius.0)?,
            raw.f64_or("data.organ_radius_hi", d.organ_radius.1)?,
        ),
        n_confounders: raw.usize_or("data.n_confounders", d.n_confounders)?,
        noise_std: raw.f64_or("data.noise_std", d.noise_std)?,
        bias_strength: raw.f64_or("data.bias_strength", d.bias_strength)?,
    };
    let out_paths = phantom::generate(&spec, &out)?;
    println!("dataset written to {}", out.display());
    println!("  train manifest: {}", out_paths.train_manifest.display());
    println!("  val manifest:   {}", out_paths.val_manifest.display());
    println!("  eval manifest:  {}", out_paths.eval_manifest.display());
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut raw = build_config(&args.common)?;
    if let Some(v) = &args.variant {
        raw.set("train.variant", v);
    }
    if let Some(e) = args.epochs {
        raw.set("train.epochs", &e.to_string());
    }
    if let Some(out) = &args.out {
        raw.set("train.out", &out.to_string_lossy());
    }
    let run = run_training(&raw)?;
    println!("run complete: {}", run.out_dir.display());
    println!("  loss log:        {}", run.loss_csv.display());
    println!("  run manifest:    {}", run.run_manifest.display());
    println!("  final epoch:     {}", run.final_checkpoint.display());
    println!("  selected epoch:  {} ({})", run.best_epoch, run.best_checkpoint.display());
    Ok(())
}

/// Evaluation config: the training geometry keys, with the variant made
/// optional (it is irrelevant for rebuilding a segmenter from arrays).
fn eval_config(raw: &RawConfig) -> Result<TrainConfig> {
    let mut raw = raw.clone();
    if raw.get("train.variant").is_none() {
        raw.set("train.variant", "SYNSEG");
    }
    TrainConfig::from_raw(&raw)
}

struct LoadedCheckpoint {
    label: String,
    epoch: u64,
    config_hash: String,
    seg: Network,
}

fn load_for_eval(paths: &[PathBuf], cfg: &TrainConfig) -> Result<Vec<LoadedCheckpoint>> {
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let ck = Checkpoint::load(p)?;
        check_checkpoint_geometry(&ck, cfg)?;
        let seg = segmenter_from_checkpoint(&ck, cfg)?;
        let n = seen.entry(ck.variant.clone()).or_insert(0);
        *n += 1;
        let label = if *n == 1 { ck.variant.clone() } else { format!("{}#{n}", ck.variant) };
        out.push(LoadedCheckpoint {
            label,
            epoch: ck.epoch,
            config_hash: ck.config_hash,
            seg,
        });
    }
    Ok(out)
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.4}"),
        None => "NA".into(),
    }
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let mut raw = build_config(&args.common)?;
    if let Some(out) = &args.out {
        raw.set("eval.out", &out.to_string_lossy());
    }
    let cfg = eval_config(&raw)?;
    let data_dir = PathBuf::from(raw.require("data.dir")?);
    let out_dir = PathBuf::from(raw.str_or("eval.out", "eval_out"));
    std::fs::create_dir_all(&out_dir)?;

    let manifest = Manifest::read(&data_dir.join("eval.tsv"))?;
    let slices: Vec<Slice> = load_slices(&manifest, &data_dir, cfg.n_classes)?;
    let loaded = load_for_eval(&args.checkpoints, &cfg)?;

    let mut all_records: Vec<MetricsRecord> = Vec::new();
    let mut report = String::new();
    report.push_str("# evaluation report\n");
    for lc in &loaded {
        report.push_str(&format!(
            "checkpoint variant={} epoch={} config_hash={}\n",
            lc.label, lc.epoch, lc.config_hash
        ));
    }

    for lc in &loaded {
        let records = training::evaluate_segmenter(
            &lc.seg,
            &slices,
            cfg.image_size,
            cfg.n_classes,
            &lc.label,
            lc.epoch as usize,
        )?;
        all_records.extend(records);
    }
    let csv_path = out_dir.join("results.csv");
    write_results_csv(&csv_path, &all_records)?;

    // Table-1 layout: one row per variant over all foreground classes
    report.push_str("\nvariant              |  n | Median DSC | Mean±Std DSC    | Median ASD | Mean±Std ASD\n");
    report.push_str("---------------------+----+------------+-----------------+------------+-----------------\n");
    for lc in &loaded {
        let dsc: Vec<f64> =
            all_records.iter().filter(|r| r.variant == lc.label).map(|r| r.dsc).collect();
        let asd: Vec<f64> = all_records
            .iter()
            .filter(|r| r.variant == lc.label)
            .filter_map(|r| r.asd_mm)
            .collect();
        if dsc.is_empty() {
            report.push_str(&format!("{:<21}|  0 | every scan lacked labels\n", lc.label));
            continue;
        }
        let ds = summarize(&dsc)?;
        let (med_asd, mean_asd) = if asd.is_empty() {
            (None, None)
        } else {
            let s = summarize(&asd)?;
            (Some(s.median), Some((s.mean, s.std)))
        };
        report.push_str(&format!(
            "{:<21}| {:>2} | {:>10.4} | {:>7.4} ± {:<6.4}| {:>10} | {}\n",
            lc.label,
            ds.n,
            ds.median,
            ds.mean,
            ds.std,
            fmt_opt(med_asd),
            mean_asd
                .map(|(m, s)| format!("{m:.4} ± {s:.4}"))
                .unwrap_or_else(|| "NA".into()),
        ));
    }

    // pairwise signed-rank tests on per-(subject, class) DSC
    if loaded.len() >= 2 {
        report.push_str("\npairwise Wilcoxon signed-rank on per-subject DSC\n");
        let paired = |label: &str| -> BTreeMap<(String, u8), f64> {
            all_records
                .iter()
                .filter(|r| r.variant == label)
                .map(|r| ((r.subject_id.clone(), r.class_id), r.dsc))
                .collect()
        };
        for i in 0..loaded.len() {
            for j in (i + 1)..loaded.len() {
                let (la, lb) = (&loaded[i].label, &loaded[j].label);
                let (ma, mb) = (paired(la), paired(lb));
                let keys: Vec<_> = ma.keys().filter(|k| mb.contains_key(*k)).cloned().collect();
                if keys.is_empty() {
                    report.push_str(&format!("{la} vs {lb}: no common subjects\n"));
                    continue;
                }
                let a: Vec<f64> = keys.iter().map(|k| ma[k]).collect();
                let b: Vec<f64> = keys.iter().map(|k| mb[k]).collect();
                let w = wilcoxon_signed_rank(&a, &b)?;
                report.push_str(&format!(
                    "{la} vs {lb}: W={:.1} p={:.6} n={} ({}) {}\n",
                    w.w,
                    w.p,
                    w.n_used,
                    if w.exact { "exact" } else { "normal approx" },
                    significance_marker(w.p),
                ));
            }
        }
    }

    let report_path = out_dir.join("report.txt");
    std::fs::write(&report_path, &report)?;
    print!("{report}");
    println!("\nresults csv: {}", csv_path.display());
    println!("report:      {}", report_path.display());
    Ok(())
}

/// Scale an intensity tile from [-1, 1] network range to 16-bit gray.
fn intensity_tile(data: &[f32]) -> Vec<u16> {
    data.iter().map(|v| pgm::quantize((v + 1.0) * 0.5)).collect()
}

/// Class ids spread across the full gray range.
fn label_tile(classes: &[u8], n_classes: usize) -> Vec<u16> {
    let denom = (n_classes.max(2) - 1) as u32;
    classes.iter().map(|c| ((*c as u32) * 65535 / denom) as u16).collect()
}

/// Horizontal concatenation of same-size square tiles into rows, one row
/// per sample: output is (rows*s) x (cols*s).
fn tile_grid(tiles: &[Vec<Vec<u16>>], s: usize) -> (usize, usize, Vec<u16>) {
    let rows = tiles.len();
    let cols = tiles.first().map(|r| r.len()).unwrap_or(0);
    let (w, h) = (cols * s, rows * s);
    let mut out = vec![0u16; w * h];
    for (ri, row) in tiles.iter().enumerate() {
        for (ci, tile) in row.iter().enumerate() {
            for y in 0..s {
                let dst = (ri * s + y) * w + ci * s;
                out[dst..dst + s].copy_from_slice(&tile[y * s..(y + 1) * s]);
            }
        }
    }
    (w, h, out)
}

fn forward_plane(net: &Network, x: &[f32], s: usize) -> Result<Vec<f32>> {
    let t = Tensor::from_vec(vec![1, 1, s, s], x.to_vec())?;
    Ok(net.forward_frozen(&t)?.data().to_vec())
}

fn cmd_montage(args: MontageArgs) -> Result<()> {
    let mut raw = build_config(&args.common)?;
    if let Some(out) = &args.out {
        raw.set("montage.out", &out.to_string_lossy());
    }
    if let Some(n) = args.n {
        raw.set("montage.n", &n.to_string());
    }
    let cfg = eval_config(&raw)?;
    let n = raw.usize_or("montage.n", 4)?;
    if n == 0 {
        println!("montage: n=0, nothing to render");
        return Ok(());
    }
    let data_dir = PathBuf::from(raw.require("data.dir")?);
    let out_dir = PathBuf::from(raw.str_or("montage.out", "montage_out"));

    let ck = Checkpoint::load(&args.checkpoint)?;
    check_checkpoint_geometry(&ck, &cfg)?;
    let g1 = generator_from_checkpoint(&ck, &cfg, "g1")?;
    let has = |prefix: &str| ck.arrays.keys().any(|k| k.starts_with(prefix));
    let g2 = has("param.g2.")
        .then(|| generator_from_checkpoint(&ck, &cfg, "g2"))
        .transpose()?;
    let seg = has("param.seg.")
        .then(|| segmenter_from_checkpoint(&ck, &cfg))
        .transpose()?;

    let manifest = Manifest::read(&data_dir.join("train.tsv"))?;
    let slices = load_slices(&manifest, &data_dir, cfg.n_classes)?;
    let src: Vec<Slice> =
        slices.iter().filter(|s| s.image.modality == Modality::Source).cloned().collect();
    let tgt: Vec<Slice> =
        slices.iter().filter(|s| s.image.modality == Modality::Target).cloned().collect();
    let source = prepare_scans(&src, cfg.image_size)?;
    let target = prepare_scans(&tgt, cfg.image_size)?;
    if source.is_empty() || (g2.is_some() && target.is_empty()) {
        return Err(Error::Data("montage needs training slices for each rendered path".into()));
    }

    let s = cfg.image_size;
    let hw = s * s;
    let mut rng = NamedStream::new(cfg.seed, "montage");
    let comments = vec![format!("config_hash={}", ck.config_hash), format!("variant={}", ck.variant)];

    // forward path: source, synthesized target, reconstruction, segmentation
    let mut rows_a: Vec<Vec<Vec<u16>>> = Vec::with_capacity(n);
    let pick = |rng: &mut NamedStream, len: usize| rng.below(len);
    for _ in 0..n {
        let x = &source[pick(&mut rng, source.len())];
        let fake_t = forward_plane(&g1, &x.x, s)?;
        let mut row = vec![intensity_tile(&x.x), intensity_tile(&fake_t)];
        if let Some(g2) = &g2 {
            row.push(intensity_tile(&forward_plane(g2, &fake_t, s)?));
        }
        if let Some(seg) = &seg {
            let lp = forward_plane(seg, &fake_t, s)?;
            let classes = argmax_planes(&lp, cfg.n_classes, hw);
            row.push(label_tile(&classes, cfg.n_classes));
        }
        rows_a.push(row);
    }
    let path_a = if g2.is_some() {
        out_dir.join("montage_path_a.pgm")
    } else {
        out_dir.join("montage_path_a_only.pgm")
    };
    let (w, h, samples) = tile_grid(&rows_a, s);
    pgm::write_pgm16(&path_a, w, h, &samples, &comments)?;
    println!("wrote {} ({w}x{h})", path_a.display());

    // reverse path: target, synthesized source, reconstruction
    if let Some(g2) = &g2 {
        let mut rows_b: Vec<Vec<Vec<u16>>> = Vec::with_capacity(n);
        for _ in 0..n {
            let y = &target[pick(&mut rng, target.len())];
            let fake_s = forward_plane(g2, &y.x, s)?;
            let rec_y = forward_plane(&g1, &fake_s, s)?;
            rows_b.push(vec![
                intensity_tile(&y.x),
                intensity_tile(&fake_s),
                intensity_tile(&rec_y),
            ]);
        }
        let path_b = out_dir.join("montage_path_b.pgm");
        let (w, h, samples) = tile_grid(&rows_b, s);
        pgm::write_pgm16(&path_b, w, h, &samples, &comments)?;
        println!("wrote {} ({w}x{h})", path_b.display());
    } else {
        println!("checkpoint has no reverse generator; forward path only");
    }
    Ok(())
}

fn argmax_planes(logp: &[f32], c: usize, hw: usize) -> Vec<u8> {
    let mut out = vec![0u8; hw];
    for (i, slot) in out.iter_mut().enumerate() {
        let mut best = logp[i];
        for k in 1..c {
            let v = logp[k * hw + i];
            if v > best {
                best = v;
                *slot = k as u8;
            }
        }
    }
    out
}
