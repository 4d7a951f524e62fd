//! Training orchestration for the unpaired synthesis + segmentation system.
//!
//! One training step has two phases. Phase 1 builds the full forward graph
//! on one source slice x and one independently drawn target slice y —
//! Path A: fakeT = G1(x), rec_x = G2(fakeT), Seg(fakeT); Path B:
//! fakeS = G2(y), rec_y = G1(fakeS) — and jointly updates G1, G2 and Seg
//! on the weighted sum of adversarial, cycle and segmentation terms, with
//! both discriminators frozen. Phase 2 updates D1 on (real y, buffered
//! fakeT) and D2 on (real x, buffered fakeS) with the generators frozen.
//!
//! Variants wire subsets of that graph:
//! * SYNSEG — everything;
//! * HC — G1, D1, Seg only (no reverse generator, no cycle terms);
//! * TWO_STAGE — stage 1 trains the pure translation system without Seg,
//!   stage 2 freezes G1, materializes one synthetic image per source slice
//!   and trains a fresh Seg on them with cross-entropy only;
//! * SEG_ONLY — supervised Seg on real labeled target data (upper bound).

pub mod checkpoint;
pub mod pool;

use crate::config::RawConfig;
use crate::data::manifest::{load_slices, Manifest};
use crate::data::sampler::UnpairedSampler;
use crate::data::{preprocess, IntensityImage, LabelMap, Modality, Slice};
use crate::error::{Error, Result};
use crate::loss::{
    cycle_loss, gan_loss_discriminator, gan_loss_generator, seg_loss, total_loss, GanForm,
    LossWeights,
};
use crate::metrics::{self, MetricsRecord};
use crate::nn::{build_discriminator, build_generator, build_segmenter, GeneratorConfig, Network};
use crate::optim::Adam;
use crate::rng::NamedStream;
use crate::tensor::{mul_scalar, Tape, Tensor};
use crate::training::checkpoint::Checkpoint;
use crate::training::pool::ImagePool;
use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Synseg,
    Hc,
    TwoStage,
    SegOnly,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "SYNSEG" => Ok(Variant::Synseg),
            "HC" => Ok(Variant::Hc),
            "TWO_STAGE" => Ok(Variant::TwoStage),
            "SEG_ONLY" => Ok(Variant::SegOnly),
            _ => Err(Error::Config(format!(
                "unknown variant {s:?} (expected SYNSEG, HC, TWO_STAGE or SEG_ONLY)"
            ))),
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Variant::Synseg => "SYNSEG",
            Variant::Hc => "HC",
            Variant::TwoStage => "TWO_STAGE",
            Variant::SegOnly => "SEG_ONLY",
        }
    }
}

/// Which networks a training loop instantiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Wiring {
    /// G1, G2, Seg, D1, D2.
    Full,
    /// G1, Seg, D1.
    Half,
    /// G1, G2, D1, D2 — translation only (two-stage, stage 1).
    CycleOnly,
    /// Seg alone, plain supervised cross-entropy.
    SegDirect,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub variant: Variant,
    pub seed: u64,
    pub epochs: usize,
    pub batch: usize,
    pub weights: LossWeights,
    pub gan_form: GanForm,
    pub lr_gen: f32,
    pub lr_disc: f32,
    pub image_size: usize,
    pub base_filters: usize,
    pub res_blocks: usize,
    pub disc_layers: usize,
    pub n_classes: usize,
    pub pool_capacity: usize,
    pub eval_every: usize,
    /// Opt-in leaking policy: select the epoch on target-label evaluation
    /// data instead of the held-out source-labeled validation split.
    pub select_on_target: bool,
    pub config_hash: String,
}

/// Configuration keys the training layer understands.
pub const TRAIN_KEYS: &[&str] = &[
    "seed",
    "data.dir",
    "train.variant",
    "train.out",
    "train.epochs",
    "train.batch",
    "train.lambda1",
    "train.lambda2",
    "train.lambda3",
    "train.lambda4",
    "train.lambda5",
    "train.gan_form",
    "train.lr_gen",
    "train.lr_disc",
    "train.image_size",
    "train.base_filters",
    "train.res_blocks",
    "train.disc_layers",
    "train.n_classes",
    "train.pool",
    "train.eval_every",
    "train.select_on_target",
    "train.resume",
    "train.stage",
];

impl TrainConfig {
    pub fn from_raw(raw: &RawConfig) -> Result<TrainConfig> {
        let weights = LossWeights {
            adv_source: raw.f32_or("train.lambda1", 1.0)?,
            adv_target: raw.f32_or("train.lambda2", 1.0)?,
            cycle_source: raw.f32_or("train.lambda3", 10.0)?,
            cycle_target: raw.f32_or("train.lambda4", 10.0)?,
            seg: raw.f32_or("train.lambda5", 1.0)?,
        };
        let gan_form = match raw.str_or("train.gan_form", "log").as_str() {
            "log" => GanForm::Log,
            "least_squares" => GanForm::LeastSquares,
            other => {
                return Err(Error::Config(format!(
                    "train.gan_form: expected log or least_squares, got {other:?}"
                )))
            }
        };
        let cfg = TrainConfig {
            variant: Variant::parse(raw.require("train.variant")?)?,
            seed: raw.u64_or("seed", 0)?,
            epochs: raw.usize_or("train.epochs", 100)?,
            batch: raw.usize_or("train.batch", 1)?,
            weights,
            gan_form,
            lr_gen: raw.f32_or("train.lr_gen", 1e-4)?,
            lr_disc: raw.f32_or("train.lr_disc", 2e-4)?,
            image_size: raw.usize_or("train.image_size", 64)?,
            base_filters: raw.usize_or("train.base_filters", 16)?,
            res_blocks: raw.usize_or("train.res_blocks", 3)?,
            disc_layers: raw.usize_or("train.disc_layers", 3)?,
            n_classes: raw.usize_or("train.n_classes", 2)?,
            pool_capacity: raw.usize_or("train.pool", 50)?,
            eval_every: raw.usize_or("train.eval_every", 1)?,
            select_on_target: raw.bool_or("train.select_on_target", false)?,
            // where artifacts land and how a run was (re)started do not
            // change what is being trained
            config_hash: raw.hash_excluding(&["data.dir", "train.out", "train.resume", "train.stage"]),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("train.epochs must be >= 1".into()));
        }
        if self.batch < 1 {
            return Err(Error::Config("train.batch must be >= 1".into()));
        }
        self.weights.validate()?;
        // generator downsamples twice by 2 and mirrors back up; sizes not
        // divisible by 4 would reconstruct at the wrong extent
        if self.image_size < 16 || self.image_size % 4 != 0 {
            return Err(Error::Config(format!(
                "train.image_size must be >= 16 and divisible by 4, got {}",
                self.image_size
            )));
        }
        if self.n_classes < 2 {
            return Err(Error::Config("train.n_classes must be >= 2".into()));
        }
        if self.eval_every < 1 {
            return Err(Error::Config("train.eval_every must be >= 1".into()));
        }
        if crate::nn::discriminator_grid(self.image_size, self.disc_layers) < 1 {
            return Err(Error::Config(format!(
                "train.disc_layers {} collapses a {} input below one patch",
                self.disc_layers, self.image_size
            )));
        }
        Ok(())
    }

    pub fn gen_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            in_channels: 1,
            out_channels: 1,
            base_filters: self.base_filters,
            n_res_blocks: self.res_blocks,
        }
    }

    pub fn seg_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            in_channels: 1,
            out_channels: self.n_classes,
            base_filters: self.base_filters,
            n_res_blocks: self.res_blocks,
        }
    }
}

/// One slice prepared for the network: normalized, resampled to the square
/// network extent and mapped to [-1, 1]; the label lives on the same grid.
#[derive(Clone, Debug)]
pub struct NetSlice {
    pub scan_id: String,
    pub x: Vec<f32>,
    pub label: Option<Vec<u8>>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainData {
    /// Labeled source-modality slices (adversarial variants train on these).
    pub source: Vec<NetSlice>,
    /// Target-modality slices; unlabeled for adversarial variants, labeled
    /// for the supervised direct path.
    pub target: Vec<NetSlice>,
    /// Held-out labeled slices used for epoch selection.
    pub val: Vec<NetSlice>,
}

/// Group slices by scan, normalize each scan's volume by its percentile
/// window, resample to the network grid and rescale to [-1, 1].
pub fn prepare_scans(slices: &[Slice], net: usize) -> Result<Vec<NetSlice>> {
    let mut groups: Vec<(String, Vec<&Slice>)> = Vec::new();
    for s in slices {
        match groups.last_mut() {
            Some((id, g)) if *id == s.image.scan_id => g.push(s),
            _ => groups.push((s.image.scan_id.clone(), vec![s])),
        }
    }
    let mut out = Vec::with_capacity(slices.len());
    for (scan_id, group) in groups {
        let mut volume: Vec<f32> = Vec::new();
        for s in &group {
            s.image.validate()?;
            volume.extend_from_slice(&s.image.pixels);
        }
        preprocess::normalize_percentile(&mut volume)?;
        let mut offset = 0;
        for s in &group {
            let (h, w) = (s.image.h, s.image.w);
            let plane = &volume[offset..offset + h * w];
            offset += h * w;
            let resized = preprocess::resample_bilinear(plane, h, w, net, net)?;
            let x: Vec<f32> = resized.iter().map(|v| v * 2.0 - 1.0).collect();
            let label = match &s.label {
                None => None,
                Some(l) => Some(preprocess::resample_nearest(&l.classes, l.h, l.w, net, net)?),
            };
            out.push(NetSlice { scan_id: scan_id.clone(), x, label });
        }
    }
    Ok(out)
}

pub struct LoadedData {
    pub train: TrainData,
    pub train_manifest_hash: String,
    pub val_manifest_hash: String,
}

/// Load and prepare the manifests a variant trains on. Adversarial
/// variants read train.tsv + val.tsv and refuse target rows carrying
/// labels; the supervised direct variant reads the labeled target store
/// (eval.tsv) instead and validates on its own training scans.
pub fn load_train_data(cfg: &TrainConfig, data_dir: &Path) -> Result<LoadedData> {
    let net = cfg.image_size;
    if cfg.variant == Variant::SegOnly {
        let eval_path = data_dir.join("eval.tsv");
        let m = Manifest::read(&eval_path)?;
        let slices = load_slices(&m, data_dir, cfg.n_classes)?;
        let target = prepare_scans(&slices, net)?;
        for t in &target {
            if t.label.is_none() {
                return Err(Error::Data(format!(
                    "supervised variant needs labels for every slice (scan {})",
                    t.scan_id
                )));
            }
        }
        let hash = Manifest::file_hash(&eval_path)?;
        return Ok(LoadedData {
            train: TrainData { source: Vec::new(), val: target.clone(), target },
            train_manifest_hash: hash.clone(),
            val_manifest_hash: hash,
        });
    }

    let train_path = data_dir.join("train.tsv");
    let val_path = data_dir.join("val.tsv");
    let m = Manifest::read(&train_path)?;
    for r in &m.records {
        if r.modality == Modality::Target && r.label_path.is_some() {
            return Err(Error::Data(format!(
                "training manifest lists a label for target slice {} — refusing",
                r.image_path.display()
            )));
        }
    }
    let slices = load_slices(&m, data_dir, cfg.n_classes)?;
    let (mut source, mut target) = (Vec::new(), Vec::new());
    let src_slices: Vec<Slice> =
        slices.iter().filter(|s| s.image.modality == Modality::Source).cloned().collect();
    let tgt_slices: Vec<Slice> =
        slices.iter().filter(|s| s.image.modality == Modality::Target).cloned().collect();
    source.extend(prepare_scans(&src_slices, net)?);
    target.extend(prepare_scans(&tgt_slices, net)?);
    for s in &source {
        if s.label.is_none() {
            return Err(Error::Data(format!("source slice of scan {} lacks a label", s.scan_id)));
        }
    }

    let vm = Manifest::read(&val_path)?;
    let val_slices = load_slices(&vm, data_dir, cfg.n_classes)?;
    let val = prepare_scans(&val_slices, net)?;
    for s in &val {
        if s.label.is_none() {
            return Err(Error::Data(format!("validation slice of scan {} lacks a label", s.scan_id)));
        }
    }
    Ok(LoadedData {
        train: TrainData { source, target, val },
        train_manifest_hash: Manifest::file_hash(&train_path)?,
        val_manifest_hash: Manifest::file_hash(&val_path)?,
    })
}

/// Per-step loss scalars as logged to the CSV.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossParts {
    pub adv_source: f64,
    pub adv_target: f64,
    pub cycle_source: f64,
    pub cycle_target: f64,
    pub seg: f64,
    pub total: f64,
    pub d1: f64,
    pub d2: f64,
}

/// Streaming loss CSV. Line 1 pins the config hash and the effective loss
/// weights so the file is self-checking; every row's total must recompute
/// from its parts and those weights.
pub struct LossLog {
    file: std::fs::File,
    pub rows: u64,
    pub path: PathBuf,
}

const LOSS_HEADER: &str =
    "step,epoch,adv_source,adv_target,cycle_source,cycle_target,seg,total,d1,d2";

impl LossLog {
    pub fn create(path: &Path, config_hash: &str, w: &LossWeights) -> Result<LossLog> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut file = std::fs::File::create(path)?;
        writeln!(
            file,
            "# config_hash={config_hash} lambdas={:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            w.adv_source, w.adv_target, w.cycle_source, w.cycle_target, w.seg
        )?;
        writeln!(file, "{LOSS_HEADER}")?;
        Ok(LossLog { file, rows: 0, path: path.to_path_buf() })
    }

    /// Reopen an existing log keeping exactly `keep_rows` data rows (rows
    /// written after the checkpoint being resumed from are discarded).
    pub fn resume(path: &Path, keep_rows: u64) -> Result<LossLog> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let keep: Vec<&str> = text.lines().take(2 + keep_rows as usize).collect();
        if keep.len() < 2 + keep_rows as usize {
            return Err(Error::Data(format!(
                "{}: has fewer rows than the checkpoint expects",
                path.display()
            )));
        }
        let mut body = keep.join("\n");
        body.push('\n');
        std::fs::write(path, body)?;
        let file = std::fs::OpenOptions::new().append(true).open(path)?;
        Ok(LossLog { file, rows: keep_rows, path: path.to_path_buf() })
    }

    pub fn append(&mut self, step: u64, epoch: usize, p: &LossParts) -> Result<()> {
        writeln!(
            self.file,
            "{step},{epoch},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            p.adv_source, p.adv_target, p.cycle_source, p.cycle_target, p.seg, p.total, p.d1, p.d2
        )?;
        self.rows += 1;
        Ok(())
    }
}

/// Re-derive every row's total from its parts and the header weights,
/// mirroring the f32 accumulation order of the training graph. Returns
/// (row count, max |stored - recomputed|).
pub fn verify_loss_csv(path: &Path) -> Result<(u64, f64)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines();
    let head = lines.next().ok_or_else(|| Error::Data("empty loss csv".into()))?;
    let lam_str = head
        .split("lambdas=")
        .nth(1)
        .ok_or_else(|| Error::Data("loss csv header lacks lambdas".into()))?;
    let lambdas: Vec<f32> = lam_str
        .split(',')
        .map(|v| v.trim().parse::<f32>().map_err(|_| Error::Data(format!("bad lambda {v}"))))
        .collect::<Result<_>>()?;
    if lambdas.len() != 5 {
        return Err(Error::Data("expected 5 lambdas in loss csv header".into()));
    }
    let cols = lines.next().unwrap_or_default();
    if cols != LOSS_HEADER {
        return Err(Error::Data(format!("unexpected loss csv columns: {cols}")));
    }
    let mut rows = 0u64;
    let mut max_err = 0.0f64;
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<f64> = line
            .split(',')
            .map(|v| v.parse::<f64>().map_err(|_| Error::Data(format!("bad loss value {v}"))))
            .collect::<Result<_>>()?;
        if f.len() != 10 {
            return Err(Error::Data(format!("loss row with {} fields", f.len())));
        }
        let parts = [f[2] as f32, f[3] as f32, f[4] as f32, f[5] as f32, f[6] as f32];
        let mut acc = parts[0] * lambdas[0];
        for i in 1..5 {
            acc += parts[i] * lambdas[i];
        }
        // both sides through f32: column values are printed from f32
        // scalars, so the comparison lives in f32 space
        max_err = max_err.max((acc - f[7] as f32).abs() as f64);
        rows += 1;
    }
    Ok((rows, max_err))
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub wiring: Wiring,
    pub g1: Option<Network>,
    pub g2: Option<Network>,
    pub seg: Option<Network>,
    pub d1: Option<Network>,
    pub d2: Option<Network>,
    opt_g1: Option<Adam>,
    opt_g2: Option<Adam>,
    opt_seg: Option<Adam>,
    opt_d1: Option<Adam>,
    opt_d2: Option<Adam>,
    pool_d1: Option<ImagePool>,
    pool_d2: Option<ImagePool>,
    sampler: UnpairedSampler,
    class_weights: Vec<f32>,
    pub epoch: usize,
    pub global_step: u64,
}

pub fn wiring_for(variant: Variant, stage1: bool) -> Wiring {
    match variant {
        Variant::Synseg => Wiring::Full,
        Variant::Hc => Wiring::Half,
        Variant::SegOnly => Wiring::SegDirect,
        Variant::TwoStage => {
            if stage1 {
                Wiring::CycleOnly
            } else {
                Wiring::SegDirect
            }
        }
    }
}

impl Trainer {
    pub fn new(cfg: TrainConfig, n_source: usize, n_target: usize) -> Result<Trainer> {
        let wiring = wiring_for(cfg.variant, true);
        Trainer::with_wiring(cfg, wiring, "sampler", n_source, n_target)
    }

    pub fn with_wiring(
        cfg: TrainConfig,
        wiring: Wiring,
        sampler_stream: &str,
        n_source: usize,
        n_target: usize,
    ) -> Result<Trainer> {
        cfg.validate()?;
        let seed = cfg.seed;
        let mut g1 = None;
        let mut g2 = None;
        let mut seg = None;
        let mut d1 = None;
        let mut d2 = None;
        let build_gen = |name: &str| -> Result<Network> {
            build_generator(cfg.gen_config(), &mut NamedStream::new(seed, name))
        };
        let build_disc = |name: &str| -> Result<Network> {
            build_discriminator(
                1,
                cfg.base_filters,
                cfg.disc_layers,
                &mut NamedStream::new(seed, name),
            )
        };
        match wiring {
            Wiring::Full => {
                g1 = Some(build_gen("init.g1")?);
                g2 = Some(build_gen("init.g2")?);
                seg = Some(build_segmenter(cfg.seg_config(), &mut NamedStream::new(seed, "init.seg"))?);
                d1 = Some(build_disc("init.d1")?);
                d2 = Some(build_disc("init.d2")?);
            }
            Wiring::Half => {
                g1 = Some(build_gen("init.g1")?);
                seg = Some(build_segmenter(cfg.seg_config(), &mut NamedStream::new(seed, "init.seg"))?);
                d1 = Some(build_disc("init.d1")?);
            }
            Wiring::CycleOnly => {
                g1 = Some(build_gen("init.g1")?);
                g2 = Some(build_gen("init.g2")?);
                d1 = Some(build_disc("init.d1")?);
                d2 = Some(build_disc("init.d2")?);
            }
            Wiring::SegDirect => {
                seg = Some(build_segmenter(cfg.seg_config(), &mut NamedStream::new(seed, "init.seg"))?);
            }
        }
        let opt_gen = |n: &Option<Network>| -> Result<Option<Adam>> {
            n.as_ref().map(|net| Adam::new(net.params(), cfg.lr_gen)).transpose()
        };
        let opt_disc = |n: &Option<Network>| -> Result<Option<Adam>> {
            n.as_ref().map(|net| Adam::new(net.params(), cfg.lr_disc)).transpose()
        };
        let pool = |net: &Option<Network>, name: &str| -> Option<ImagePool> {
            net.as_ref().map(|_| ImagePool::new(cfg.pool_capacity, seed, name))
        };
        Ok(Trainer {
            opt_g1: opt_gen(&g1)?,
            opt_g2: opt_gen(&g2)?,
            opt_seg: opt_gen(&seg)?,
            opt_d1: opt_disc(&d1)?,
            opt_d2: opt_disc(&d2)?,
            pool_d1: pool(&d1, "pool.d1"),
            pool_d2: pool(&d2, "pool.d2"),
            sampler: UnpairedSampler::with_stream(
                seed,
                sampler_stream,
                n_source.max(1),
                n_target.max(1),
            )?,
            class_weights: vec![1.0; cfg.n_classes],
            epoch: 0,
            global_step: 0,
            cfg,
            wiring,
            g1,
            g2,
            seg,
            d1,
            d2,
        })
    }

    /// Effective loss weights for this wiring: stage 1 of two-stage zeroes
    /// the segmentation term, the direct supervised path is pure
    /// cross-entropy.
    pub fn effective_weights(&self) -> LossWeights {
        match self.wiring {
            Wiring::SegDirect => LossWeights {
                adv_source: 0.0,
                adv_target: 0.0,
                cycle_source: 0.0,
                cycle_target: 0.0,
                seg: 1.0,
            },
            Wiring::CycleOnly => LossWeights { seg: 0.0, ..self.cfg.weights },
            _ => self.cfg.weights,
        }
    }

    fn nets(&self) -> Vec<(&'static str, &Network)> {
        let mut v = Vec::new();
        if let Some(n) = &self.g1 {
            v.push(("g1", n));
        }
        if let Some(n) = &self.g2 {
            v.push(("g2", n));
        }
        if let Some(n) = &self.seg {
            v.push(("seg", n));
        }
        if let Some(n) = &self.d1 {
            v.push(("d1", n));
        }
        if let Some(n) = &self.d2 {
            v.push(("d2", n));
        }
        v
    }

    fn opts(&self) -> Vec<(&'static str, &Adam)> {
        let mut v = Vec::new();
        if let Some(o) = &self.opt_g1 {
            v.push(("g1", o));
        }
        if let Some(o) = &self.opt_g2 {
            v.push(("g2", o));
        }
        if let Some(o) = &self.opt_seg {
            v.push(("seg", o));
        }
        if let Some(o) = &self.opt_d1 {
            v.push(("d1", o));
        }
        if let Some(o) = &self.opt_d2 {
            v.push(("d2", o));
        }
        v
    }

    pub fn steps_per_epoch(&self, data: &TrainData) -> usize {
        match self.wiring {
            Wiring::SegDirect => data.target.len(),
            _ => data.source.len(),
        }
    }

    fn input_tensor(&self, s: &NetSlice) -> Result<Tensor> {
        let n = self.cfg.image_size;
        Tensor::from_vec(vec![1, 1, n, n], s.x.clone())
    }

    fn check_finite(&self, v: f32, what: &str) -> Result<f32> {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Numeric(format!(
                "non-finite {what} ({v}) at step {}",
                self.global_step + 1
            )))
        }
    }

    /// Phase-1 graph for one (x, y) pair: builds losses, backpropagates
    /// into the generator-side parameters, and returns the logged scalars
    /// plus the detached fake images for phase 2.
    #[allow(clippy::type_complexity)]
    fn phase1(
        &self,
        x: &NetSlice,
        y: Option<&NetSlice>,
        inv_batch: f32,
    ) -> Result<(LossParts, Option<Vec<f32>>, Option<Vec<f32>>)> {
        let tape = Tape::new();
        let zero = Tensor::scalar(0.0);
        let xt = self.input_tensor(x)?;
        let w = self.effective_weights();

        let (adv_s, adv_t, cyc_s, cyc_t, seg_l, fake_t_data, fake_s_data);
        match self.wiring {
            Wiring::SegDirect => {
                let seg = self.seg.as_ref().unwrap();
                let lp = seg.forward_train(&tape, &xt)?;
                let labels = x
                    .label
                    .as_ref()
                    .ok_or_else(|| Error::Data(format!("slice of {} lacks a label", x.scan_id)))?;
                seg_l = seg_loss(&lp, labels, &self.class_weights)?;
                adv_s = zero.clone();
                adv_t = zero.clone();
                cyc_s = zero.clone();
                cyc_t = zero;
                fake_t_data = None;
                fake_s_data = None;
            }
            Wiring::Half => {
                let g1 = self.g1.as_ref().unwrap();
                let seg = self.seg.as_ref().unwrap();
                let d1 = self.d1.as_ref().unwrap();
                let fake_t = g1.forward_train(&tape, &xt)?;
                let lp = seg.forward_train(&tape, &fake_t)?;
                let labels = x
                    .label
                    .as_ref()
                    .ok_or_else(|| Error::Data(format!("slice of {} lacks a label", x.scan_id)))?;
                seg_l = seg_loss(&lp, labels, &self.class_weights)?;
                adv_s = gan_loss_generator(&d1.forward_frozen(&fake_t)?, self.cfg.gan_form);
                adv_t = zero.clone();
                cyc_s = zero.clone();
                cyc_t = zero;
                fake_t_data = Some(fake_t.data().to_vec());
                fake_s_data = None;
            }
            Wiring::Full | Wiring::CycleOnly => {
                let g1 = self.g1.as_ref().unwrap();
                let g2 = self.g2.as_ref().unwrap();
                let d1 = self.d1.as_ref().unwrap();
                let d2 = self.d2.as_ref().unwrap();
                let y = y.expect("adversarial wiring draws a target slice");
                let yt = self.input_tensor(y)?;
                let fake_t = g1.forward_train(&tape, &xt)?;
                let rec_x = g2.forward_train(&tape, &fake_t)?;
                let fake_s = g2.forward_train(&tape, &yt)?;
                let rec_y = g1.forward_train(&tape, &fake_s)?;
                adv_s = gan_loss_generator(&d1.forward_frozen(&fake_t)?, self.cfg.gan_form);
                adv_t = gan_loss_generator(&d2.forward_frozen(&fake_s)?, self.cfg.gan_form);
                cyc_s = cycle_loss(&rec_x, &xt)?;
                cyc_t = cycle_loss(&rec_y, &yt)?;
                if self.wiring == Wiring::Full {
                    let seg = self.seg.as_ref().unwrap();
                    let lp = seg.forward_train(&tape, &fake_t)?;
                    let labels = x.label.as_ref().ok_or_else(|| {
                        Error::Data(format!("slice of {} lacks a label", x.scan_id))
                    })?;
                    seg_l = seg_loss(&lp, labels, &self.class_weights)?;
                } else {
                    seg_l = zero;
                }
                fake_t_data = Some(fake_t.data().to_vec());
                fake_s_data = Some(fake_s.data().to_vec());
            }
        }

        let total = total_loss(&adv_s, &adv_t, &cyc_s, &cyc_t, &seg_l, &w)?;
        let tv = self.check_finite(total.item(), "phase-1 loss")?;
        let root = if inv_batch == 1.0 { total } else { mul_scalar(&total, inv_batch) };
        tape.backward(&root)?;

        let parts = LossParts {
            adv_source: adv_s.item() as f64,
            adv_target: adv_t.item() as f64,
            cycle_source: cyc_s.item() as f64,
            cycle_target: cyc_t.item() as f64,
            seg: seg_l.item() as f64,
            total: tv as f64,
            d1: 0.0,
            d2: 0.0,
        };
        Ok((parts, fake_t_data, fake_s_data))
    }

    /// Phase-2 discriminator losses for one pair, gated structurally by
    /// wiring and by zero adversarial weights (a zero-weight adversary
    /// receives no updates, keeping the all-zero-weights invariant exact).
    fn phase2(
        &mut self,
        x: &NetSlice,
        y: Option<&NetSlice>,
        fake_t: Option<Vec<f32>>,
        fake_s: Option<Vec<f32>>,
        inv_batch: f32,
    ) -> Result<(f64, f64)> {
        let n = self.cfg.image_size;
        let dims = [1usize, 1, n, n];
        let mut d1v = 0.0f64;
        let mut d2v = 0.0f64;
        if let (Some(d1), Some(ft)) = (&self.d1, fake_t) {
            if self.cfg.weights.adv_source > 0.0 {
                let (fd, fdata) = self.pool_d1.as_mut().unwrap().query(dims, ft);
                let tape = Tape::new();
                let real = self.input_tensor(y.expect("d1 trains against a real target slice"))?;
                let fake = Tensor::from_vec(fd.to_vec(), fdata)?;
                let rs = d1.forward_train(&tape, &real)?;
                let fs = d1.forward_train(&tape, &fake)?;
                let l = gan_loss_discriminator(&rs, &fs, self.cfg.gan_form)?;
                d1v = self.check_finite(l.item(), "d1 loss")? as f64;
                let root = if inv_batch == 1.0 { l } else { mul_scalar(&l, inv_batch) };
                tape.backward(&root)?;
            }
        }
        if let (Some(d2), Some(fs_data)) = (&self.d2, fake_s) {
            if self.cfg.weights.adv_target > 0.0 {
                let (fd, fdata) = self.pool_d2.as_mut().unwrap().query(dims, fs_data);
                let tape = Tape::new();
                let real = self.input_tensor(x)?;
                let fake = Tensor::from_vec(fd.to_vec(), fdata)?;
                let rs = d2.forward_train(&tape, &real)?;
                let fsc = d2.forward_train(&tape, &fake)?;
                let l = gan_loss_discriminator(&rs, &fsc, self.cfg.gan_form)?;
                d2v = self.check_finite(l.item(), "d2 loss")? as f64;
                let root = if inv_batch == 1.0 { l } else { mul_scalar(&l, inv_batch) };
                tape.backward(&root)?;
            }
        }
        Ok((d1v, d2v))
    }

    /// One full training step (both phases over one batch). Returns the
    /// logged scalars.
    pub fn train_step(&mut self, data: &TrainData) -> Result<LossParts> {
        let b = self.cfg.batch;
        let inv = 1.0 / b as f32;
        let pairs: Vec<(usize, usize)> = (0..b).map(|_| self.sampler.next_pair()).collect();
        let mut acc = LossParts::default();
        let mut cached: Vec<(usize, usize, Option<Vec<f32>>, Option<Vec<f32>>)> = Vec::new();

        for &(si, ti) in &pairs {
            let (x, y) = match self.wiring {
                Wiring::SegDirect => (&data.target[ti], None),
                _ => (&data.source[si], Some(&data.target[ti])),
            };
            let (p, ft, fs) = self.phase1(x, y, inv)?;
            acc.adv_source += p.adv_source / b as f64;
            acc.adv_target += p.adv_target / b as f64;
            acc.cycle_source += p.cycle_source / b as f64;
            acc.cycle_target += p.cycle_target / b as f64;
            acc.seg += p.seg / b as f64;
            acc.total += p.total / b as f64;
            cached.push((si, ti, ft, fs));
        }
        for opt in [&mut self.opt_g1, &mut self.opt_g2, &mut self.opt_seg].into_iter().flatten() {
            opt.step();
        }
        for net in [&self.g1, &self.g2, &self.seg].into_iter().flatten() {
            net.zero_grads();
        }

        for (si, ti, ft, fs) in cached {
            let (x, y) = match self.wiring {
                Wiring::SegDirect => (&data.target[ti], None),
                _ => (&data.source[si], Some(&data.target[ti])),
            };
            let (d1v, d2v) = self.phase2(x, y, ft, fs, inv)?;
            acc.d1 += d1v / b as f64;
            acc.d2 += d2v / b as f64;
        }
        for opt in [&mut self.opt_d1, &mut self.opt_d2].into_iter().flatten() {
            opt.step();
        }
        for net in [&self.d1, &self.d2].into_iter().flatten() {
            net.zero_grads();
        }

        self.global_step += 1;
        Ok(acc)
    }

    pub fn train_epoch(&mut self, data: &TrainData, log: &mut LossLog) -> Result<()> {
        let steps = self.steps_per_epoch(data);
        if steps == 0 {
            return Err(Error::Data("no training slices".into()));
        }
        for _ in 0..steps {
            let parts = self.train_step(data)?;
            log.append(self.global_step, self.epoch + 1, &parts)?;
        }
        self.epoch += 1;
        Ok(())
    }

    /// Evaluate the phase-1 objective for one fixed pair without touching
    /// any parameter or RNG state (all networks frozen).
    pub fn phase1_total(&self, x: &NetSlice, y: Option<&NetSlice>) -> Result<f64> {
        let zero = Tensor::scalar(0.0);
        let xt = self.input_tensor(x)?;
        let w = self.effective_weights();
        let (adv_s, adv_t, cyc_s, cyc_t, seg_l);
        match self.wiring {
            Wiring::SegDirect => {
                let lp = self.seg.as_ref().unwrap().forward_frozen(&xt)?;
                seg_l = seg_loss(&lp, x.label.as_ref().unwrap(), &self.class_weights)?;
                adv_s = zero.clone();
                adv_t = zero.clone();
                cyc_s = zero.clone();
                cyc_t = zero;
            }
            Wiring::Half => {
                let fake_t = self.g1.as_ref().unwrap().forward_frozen(&xt)?;
                let lp = self.seg.as_ref().unwrap().forward_frozen(&fake_t)?;
                seg_l = seg_loss(&lp, x.label.as_ref().unwrap(), &self.class_weights)?;
                adv_s = gan_loss_generator(
                    &self.d1.as_ref().unwrap().forward_frozen(&fake_t)?,
                    self.cfg.gan_form,
                );
                adv_t = zero.clone();
                cyc_s = zero.clone();
                cyc_t = zero;
            }
            Wiring::Full | Wiring::CycleOnly => {
                let yt = self.input_tensor(y.expect("adversarial wiring needs a target slice"))?;
                let g1 = self.g1.as_ref().unwrap();
                let g2 = self.g2.as_ref().unwrap();
                let fake_t = g1.forward_frozen(&xt)?;
                let rec_x = g2.forward_frozen(&fake_t)?;
                let fake_s = g2.forward_frozen(&yt)?;
                let rec_y = g1.forward_frozen(&fake_s)?;
                adv_s = gan_loss_generator(
                    &self.d1.as_ref().unwrap().forward_frozen(&fake_t)?,
                    self.cfg.gan_form,
                );
                adv_t = gan_loss_generator(
                    &self.d2.as_ref().unwrap().forward_frozen(&fake_s)?,
                    self.cfg.gan_form,
                );
                cyc_s = cycle_loss(&rec_x, &xt)?;
                cyc_t = cycle_loss(&rec_y, &yt)?;
                seg_l = if self.wiring == Wiring::Full {
                    let lp = self.seg.as_ref().unwrap().forward_frozen(&fake_t)?;
                    seg_loss(&lp, x.label.as_ref().unwrap(), &self.class_weights)?
                } else {
                    zero
                };
            }
        }
        Ok(total_loss(&adv_s, &adv_t, &cyc_s, &cyc_t, &seg_l, &w)?.item() as f64)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint {
            config_hash: self.cfg.config_hash.clone(),
            variant: self.cfg.variant.tag().to_string(),
            epoch: self.epoch as u64,
            global_step: self.global_step,
            ..Checkpoint::default()
        };
        for (prefix, net) in self.nets() {
            for p in net.params() {
                ck.arrays.insert(format!("param.{prefix}.{}", p.name()), p.value().to_vec());
            }
        }
        // geometry counters let downstream commands refuse checkpoints
        // whose network grid or class count mismatches their dataset
        ck.counters.insert("image_size".into(), self.cfg.image_size as u64);
        ck.counters.insert("n_classes".into(), self.cfg.n_classes as u64);
        for (prefix, opt) in self.opts() {
            ck.counters.insert(format!("t.{prefix}"), opt.t());
            for (name, m, v) in opt.state() {
                ck.arrays.insert(format!("adam.m.{prefix}.{name}"), m.to_vec());
                ck.arrays.insert(format!("adam.v.{prefix}.{name}"), v.to_vec());
            }
        }
        ck.streams.insert(self.sampler.stream_name().to_string(), self.sampler.word_pos());
        for pool in [&self.pool_d1, &self.pool_d2].into_iter().flatten() {
            ck.streams.insert(pool.stream_name().to_string(), pool.word_pos());
            ck.pools.insert(pool.stream_name().to_string(), pool.items().to_vec());
        }
        ck
    }

    pub fn from_checkpoint(
        cfg: TrainConfig,
        wiring: Wiring,
        sampler_stream: &str,
        ck: &Checkpoint,
        n_source: usize,
        n_target: usize,
    ) -> Result<Trainer> {
        if ck.config_hash != cfg.config_hash {
            return Err(Error::Checkpoint(format!(
                "checkpoint was written under config {} but the current config hashes to {}",
                ck.config_hash, cfg.config_hash
            )));
        }
        if ck.variant != cfg.variant.tag() {
            return Err(Error::Checkpoint(format!(
                "checkpoint variant {} does not match configured {}",
                ck.variant,
                cfg.variant.tag()
            )));
        }
        let mut t = Trainer::with_wiring(cfg, wiring, sampler_stream, n_source, n_target)?;
        t.epoch = ck.epoch as usize;
        t.global_step = ck.global_step;

        let fill = |prefix: &str, net: &Network| -> Result<()> {
            for p in net.params() {
                let key = format!("param.{prefix}.{}", p.name());
                let stored = ck
                    .arrays
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing array {key}")))?;
                if stored.len() != p.len() {
                    return Err(Error::Checkpoint(format!(
                        "array {key}: {} values for a {}-value parameter",
                        stored.len(),
                        p.len()
                    )));
                }
                p.set_value(stored.clone());
            }
            Ok(())
        };
        for (prefix, net) in t.nets() {
            fill(prefix, net)?;
        }

        let restore_opt =
            |prefix: &str, net: &Network, opt: &mut Option<Adam>| -> Result<()> {
                let Some(opt) = opt.as_mut() else { return Ok(()) };
                let t_key = format!("t.{prefix}");
                let steps = *ck
                    .counters
                    .get(&t_key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing counter {t_key}")))?;
                let mut map = HashMap::new();
                for p in net.params() {
                    let mk = format!("adam.m.{prefix}.{}", p.name());
                    let vk = format!("adam.v.{prefix}.{}", p.name());
                    let m = ck
                        .arrays
                        .get(&mk)
                        .ok_or_else(|| Error::Checkpoint(format!("missing array {mk}")))?;
                    let v = ck
                        .arrays
                        .get(&vk)
                        .ok_or_else(|| Error::Checkpoint(format!("missing array {vk}")))?;
                    map.insert(p.name().to_string(), (m.clone(), v.clone()));
                }
                opt.restore(steps, &map)
            };
        if let Some(net) = &t.g1 {
            restore_opt("g1", net, &mut t.opt_g1)?;
        }
        if let Some(net) = &t.g2 {
            restore_opt("g2", net, &mut t.opt_g2)?;
        }
        if let Some(net) = &t.seg {
            restore_opt("seg", net, &mut t.opt_seg)?;
        }
        if let Some(net) = &t.d1 {
            restore_opt("d1", net, &mut t.opt_d1)?;
        }
        if let Some(net) = &t.d2 {
            restore_opt("d2", net, &mut t.opt_d2)?;
        }

        let seed = t.cfg.seed;
        let spos = ck
            .streams
            .get(sampler_stream)
            .ok_or_else(|| Error::Checkpoint(format!("missing stream {sampler_stream}")))?;
        t.sampler = UnpairedSampler::restore(
            seed,
            sampler_stream,
            n_source.max(1),
            n_target.max(1),
            *spos,
        )?;
        for (slot, name) in [(&mut t.pool_d1, "pool.d1"), (&mut t.pool_d2, "pool.d2")] {
            if slot.is_some() {
                let pos = ck
                    .streams
                    .get(name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing stream {name}")))?;
                let items = ck.pools.get(name).cloned().unwrap_or_default();
                *slot = Some(ImagePool::restore(t.cfg.pool_capacity, seed, name, *pos, items));
            }
        }
        Ok(t)
    }
}

/// Per-pixel argmax over `c` class planes laid out [1, c, hw].
fn argmax_classes(logp: &[f32], c: usize, hw: usize) -> Vec<u8> {
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

/// Test-time pipeline for one scan: percentile-normalize the native
/// volume, resample each slice to the network grid (bilinear), segment,
/// argmax, and resample the class map back to the native grid (nearest).
pub fn infer(
    seg: &Network,
    scan: &[IntensityImage],
    net_size: usize,
    n_classes: usize,
) -> Result<Vec<LabelMap>> {
    if scan.is_empty() {
        return Err(Error::Data("infer: empty scan".into()));
    }
    let mut volume: Vec<f32> = Vec::new();
    for s in scan {
        s.validate()?;
        volume.extend_from_slice(&s.pixels);
    }
    preprocess::normalize_percentile(&mut volume)?;
    let mut out = Vec::with_capacity(scan.len());
    let mut offset = 0;
    for s in scan {
        let plane = &volume[offset..offset + s.h * s.w];
        offset += s.h * s.w;
        let resized = preprocess::resample_bilinear(plane, s.h, s.w, net_size, net_size)?;
        let x: Vec<f32> = resized.iter().map(|v| v * 2.0 - 1.0).collect();
        let xt = Tensor::from_vec(vec![1, 1, net_size, net_size], x)?;
        let lp = seg.forward_frozen(&xt)?;
        let pred = argmax_classes(lp.data(), n_classes, net_size * net_size);
        let native = preprocess::resample_nearest(&pred, net_size, net_size, s.h, s.w)?;
        out.push(LabelMap {
            classes: native,
            h: s.h,
            w: s.w,
            n_classes,
            spacing_mm: s.spacing_mm,
        });
    }
    Ok(out)
}

/// Mean over scans (and foreground classes) of the pooled per-scan Dice on
/// network-grid slices; `g1` routes validation inputs through synthesis
/// first when the segmenter was trained on synthetic images.
pub fn mean_val_dsc(
    seg: &Network,
    g1: Option<&Network>,
    val: &[NetSlice],
    net_size: usize,
    n_classes: usize,
) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::Data("empty validation set".into()));
    }
    let mut by_scan: Vec<(String, Vec<(LabelMap, LabelMap)>)> = Vec::new();
    for s in val {
        let xt = Tensor::from_vec(vec![1, 1, net_size, net_size], s.x.clone())?;
        let input = match g1 {
            Some(g) => g.forward_frozen(&xt)?,
            None => xt,
        };
        let lp = seg.forward_frozen(&input)?;
        let pred = argmax_classes(lp.data(), n_classes, net_size * net_size);
        let truth = s
            .label
            .as_ref()
            .ok_or_else(|| Error::Data(format!("validation slice of {} lacks a label", s.scan_id)))?;
        let mk = |classes: Vec<u8>| LabelMap {
            classes,
            h: net_size,
            w: net_size,
            n_classes,
            spacing_mm: (1.0, 1.0),
        };
        let pair = (mk(pred), mk(truth.clone()));
        match by_scan.last_mut() {
            Some((id, pairs)) if *id == s.scan_id => pairs.push(pair),
            _ => by_scan.push((s.scan_id.clone(), vec![pair])),
        }
    }
    let mut sum = 0.0;
    for (_, pairs) in &by_scan {
        let refs: Vec<(&LabelMap, &LabelMap)> = pairs.iter().map(|(a, b)| (a, b)).collect();
        let mut class_sum = 0.0;
        for class in 1..n_classes {
            class_sum += metrics::dice_stack(&refs, class as u8)?;
        }
        sum += class_sum / (n_classes - 1) as f64;
    }
    Ok(sum / by_scan.len() as f64)
}

/// Rebuild one network from checkpointed arrays (initialization draws are
/// discarded; every value comes from the file).
pub fn network_from_checkpoint(ck: &Checkpoint, prefix: &str, net: Network) -> Result<Network> {
    for p in net.params() {
        let key = format!("param.{prefix}.{}", p.name());
        let stored = ck
            .arrays
            .get(&key)
            .ok_or_else(|| Error::Checkpoint(format!("missing array {key}")))?;
        if stored.len() != p.len() {
            return Err(Error::Checkpoint(format!(
                "array {key}: {} values for a {}-value parameter",
                stored.len(),
                p.len()
            )));
        }
        p.set_value(stored.clone());
    }
    Ok(net)
}

/// Refuse a checkpoint whose recorded network grid or class count does not
/// match the dataset configuration it is being applied to.
pub fn check_checkpoint_geometry(ck: &Checkpoint, cfg: &TrainConfig) -> Result<()> {
    for (key, want) in
        [("image_size", cfg.image_size as u64), ("n_classes", cfg.n_classes as u64)]
    {
        if let Some(got) = ck.counters.get(key) {
            if *got != want {
                return Err(Error::Config(format!(
                    "checkpoint records {key}={got}, but the configuration says {want}"
                )));
            }
        }
    }
    Ok(())
}

pub fn segmenter_from_checkpoint(ck: &Checkpoint, cfg: &TrainConfig) -> Result<Network> {
    let net = build_segmenter(cfg.seg_config(), &mut NamedStream::new(0, "init.rebuild"))?;
    network_from_checkpoint(ck, "seg", net)
}

pub fn generator_from_checkpoint(
    ck: &Checkpoint,
    cfg: &TrainConfig,
    prefix: &str,
) -> Result<Network> {
    let net = build_generator(cfg.gen_config(), &mut NamedStream::new(0, "init.rebuild"))?;
    network_from_checkpoint(ck, prefix, net)
}

#[derive(Clone, Debug)]
pub struct EpochScore {
    pub epoch: u64,
    pub mean_dsc: f64,
    pub path: PathBuf,
}

/// Score saved checkpoints on a labeled validation set; `through_g1`
/// routes validation inputs through each checkpoint's own G1.
pub fn score_checkpoints(
    paths: &[PathBuf],
    cfg: &TrainConfig,
    val: &[NetSlice],
    through_g1: bool,
) -> Result<Vec<EpochScore>> {
    if paths.is_empty() {
        return Err(Error::InvalidArgument("no checkpoints to score".into()));
    }
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let ck = Checkpoint::load(p)?;
        let seg = segmenter_from_checkpoint(&ck, cfg)?;
        let g1 = if through_g1 {
            Some(generator_from_checkpoint(&ck, cfg, "g1")?)
        } else {
            None
        };
        let mean_dsc = mean_val_dsc(&seg, g1.as_ref(), val, cfg.image_size, cfg.n_classes)?;
        out.push(EpochScore { epoch: ck.epoch, mean_dsc, path: p.clone() });
    }
    Ok(out)
}

/// Highest mean DSC wins; ties break toward the earliest epoch.
pub fn select_best(scores: &[EpochScore]) -> Result<&EpochScore> {
    let mut best = scores
        .first()
        .ok_or_else(|| Error::InvalidArgument("no scored epochs".into()))?;
    for s in &scores[1..] {
        if s.mean_dsc > best.mean_dsc {
            best = s;
        }
    }
    Ok(best)
}

/// Synthesize one target-style image per source slice, carrying the source
/// label across unchanged (two-stage materialization, strictly 1:1).
pub fn materialize_synthetics(g1: &Network, source: &[NetSlice], net: usize) -> Result<Vec<NetSlice>> {
    let mut out = Vec::with_capacity(source.len());
    for s in source {
        let xt = Tensor::from_vec(vec![1, 1, net, net], s.x.clone())?;
        let fake = g1.forward_frozen(&xt)?;
        out.push(NetSlice {
            scan_id: s.scan_id.clone(),
            x: fake.data().to_vec(),
            label: s.label.clone(),
        });
    }
    Ok(out)
}

/// DSC/ASD per evaluation scan through the native-resolution inference
/// path. Scans without labels are skipped with a notice.
pub fn evaluate_segmenter(
    seg: &Network,
    eval_slices: &[Slice],
    net_size: usize,
    n_classes: usize,
    variant: &str,
    epoch: usize,
) -> Result<Vec<MetricsRecord>> {
    let mut by_scan: Vec<(String, Vec<&Slice>)> = Vec::new();
    for s in eval_slices {
        match by_scan.last_mut() {
            Some((id, g)) if *id == s.image.scan_id => g.push(s),
            _ => by_scan.push((s.image.scan_id.clone(), vec![s])),
        }
    }
    let mut records = Vec::new();
    for (scan_id, group) in by_scan {
        if group.iter().any(|s| s.label.is_none()) {
            eprintln!("notice: scan {scan_id} lacks labels; DSC/ASD omitted");
            continue;
        }
        let images: Vec<IntensityImage> = group.iter().map(|s| s.image.clone()).collect();
        let preds = infer(seg, &images, net_size, n_classes)?;
        let truths: Vec<&LabelMap> = group.iter().map(|s| s.label.as_ref().unwrap()).collect();
        for class in 1..n_classes {
            let pairs: Vec<(&LabelMap, &LabelMap)> =
                preds.iter().zip(&truths).map(|(p, t)| (p, *t)).collect();
            let dsc = metrics::dice_stack(&pairs, class as u8)?;
            let asd = metrics::asd_stack(&pairs, class as u8)?;
            records.push(MetricsRecord {
                subject_id: scan_id.clone(),
                variant: variant.to_string(),
                epoch,
                class_id: class as u8,
                dsc,
                asd_mm: asd,
            });
        }
    }
    Ok(records)
}

fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Plain key=value artifact writer (atomic).
pub fn write_kv(path: &Path, entries: &[(String, String)]) -> Result<()> {
    let mut out = String::new();
    for (k, v) in entries {
        out.push_str(k);
        out.push('=');
        out.push_str(v);
        out.push('\n');
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("txt.tmp");
    std::fs::write(&tmp, out)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Debug)]
pub struct RunOutput {
    pub out_dir: PathBuf,
    pub best_checkpoint: PathBuf,
    pub best_epoch: u64,
    pub final_checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub run_manifest: PathBuf,
    pub val_scores: Vec<EpochScore>,
}

fn ckpt_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("ck_epoch_{epoch:04}.ssn1"))
}

/// The newest `ck_epoch_*.ssn1` in a directory, by epoch number.
pub fn latest_checkpoint(dir: &Path) -> Option<PathBuf> {
    let mut best: Option<(u64, PathBuf)> = None;
    let entries = std::fs::read_dir(dir).ok()?;
    for e in entries.flatten() {
        let name = e.file_name().to_string_lossy().into_owned();
        if let Some(num) = name.strip_prefix("ck_epoch_").and_then(|s| s.strip_suffix(".ssn1")) {
            if let Ok(n) = num.parse::<u64>() {
                if best.as_ref().map(|(b, _)| n > *b).unwrap_or(true) {
                    best = Some((n, e.path()));
                }
            }
        }
    }
    best.map(|(_, p)| p)
}

/// Shared epoch loop: train, checkpoint on the cadence, return the saved
/// checkpoint paths in epoch order.
fn training_loop(
    trainer: &mut Trainer,
    data: &TrainData,
    log: &mut LossLog,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let cfg = trainer.cfg.clone();
    while trainer.epoch < cfg.epochs {
        trainer.train_epoch(data, log)?;
        let e = trainer.epoch;
        if e % cfg.eval_every == 0 || e == cfg.epochs {
            trainer.to_checkpoint().save(&ckpt_path(out_dir, e))?;
        }
    }
    let mut paths: Vec<PathBuf> = (1..=cfg.epochs)
        .filter(|e| e % cfg.eval_every == 0 || *e == cfg.epochs)
        .map(|e| ckpt_path(out_dir, e))
        .collect();
    paths.dedup();
    Ok(paths)
}

struct LoopArtifacts {
    ckpts: Vec<PathBuf>,
    loss_csv: PathBuf,
}

/// Create-or-resume plumbing around the epoch loop.
fn run_loop_in_dir(
    cfg: &TrainConfig,
    wiring: Wiring,
    sampler_stream: &str,
    data: &TrainData,
    dir: &Path,
    resume: bool,
) -> Result<LoopArtifacts> {
    std::fs::create_dir_all(dir)?;
    let csv = dir.join("losses.csv");
    if data.target.is_empty() || (wiring != Wiring::SegDirect && data.source.is_empty()) {
        return Err(Error::Data("training requires at least one slice per modality".into()));
    }
    let (ns, nt) = (data.source.len(), data.target.len());
    let mut trainer;
    let mut log;
    match latest_checkpoint(dir) {
        Some(p) if resume => {
            let ck = Checkpoint::load(&p)?;
            trainer = Trainer::from_checkpoint(cfg.clone(), wiring, sampler_stream, &ck, ns, nt)?;
            log = LossLog::resume(&csv, ck.global_step)?;
        }
        _ => {
            trainer = Trainer::with_wiring(cfg.clone(), wiring, sampler_stream, ns, nt)?;
            log = LossLog::create(&csv, &cfg.config_hash, &trainer.effective_weights())?;
        }
    }
    let ckpts = training_loop(&mut trainer, data, &mut log, dir)?;
    Ok(LoopArtifacts { ckpts, loss_csv: csv })
}

/// Full training entry point: reads data/output locations from the raw
/// config, trains the configured variant, scores checkpoints on the
/// selection split, and writes the run manifest.
pub fn run_training(raw: &RawConfig) -> Result<RunOutput> {
    let cfg = TrainConfig::from_raw(raw)?;
    let data_dir = PathBuf::from(raw.require("data.dir")?);
    let out_dir = PathBuf::from(raw.require("train.out")?);
    let resume = raw.bool_or("train.resume", false)?;
    let started = now_unix();
    let loaded = load_train_data(&cfg, &data_dir)?;

    let mut manifest_extra: Vec<(String, String)> = Vec::new();
    let (scores, artifacts, selection);
    match cfg.variant {
        Variant::TwoStage => {
            let stage = raw.str_or("train.stage", "both");
            let stage1_dir = out_dir.join("stage1");
            let stage2_dir = out_dir.join("stage2");
            let stage1_final = ckpt_path(&stage1_dir, cfg.epochs);
            let run_stage1 = matches!(stage.as_str(), "both" | "1");
            let run_stage2 = matches!(stage.as_str(), "both" | "2");
            if !(run_stage1 || run_stage2) {
                return Err(Error::Config(format!("train.stage: expected 1, 2 or both, got {stage:?}")));
            }
            if run_stage1 && !(resume && stage1_final.exists()) {
                run_loop_in_dir(&cfg, Wiring::CycleOnly, "sampler", &loaded.train, &stage1_dir, resume)?;
            }
            if !run_stage2 {
                let final_ck = stage1_final.clone();
                manifest_extra.push(("stage1_selection".into(), "final_epoch".into()));
                write_run_manifest(
                    &out_dir, raw, &cfg, &loaded, started, &[], None, &manifest_extra,
                )?;
                return Ok(RunOutput {
                    best_checkpoint: final_ck.clone(),
                    best_epoch: cfg.epochs as u64,
                    final_checkpoint: final_ck,
                    loss_csv: stage1_dir.join("losses.csv"),
                    run_manifest: out_dir.join("run_manifest.txt"),
                    val_scores: Vec::new(),
                    out_dir,
                });
            }
            if !stage1_final.exists() {
                return Err(Error::Checkpoint(format!(
                    "stage 2 requires the stage-1 checkpoint {} — train stage 1 first",
                    stage1_final.display()
                )));
            }
            // freeze the finished translator and materialize synthetics
            let stage1_ck = Checkpoint::load(&stage1_final)?;
            let g1 = generator_from_checkpoint(&stage1_ck, &cfg, "g1")?;
            let synth_train = materialize_synthetics(&g1, &loaded.train.source, cfg.image_size)?;
            let synth_val = materialize_synthetics(&g1, &loaded.train.val, cfg.image_size)?;
            let stage2_data = TrainData {
                source: Vec::new(),
                target: synth_train,
                val: synth_val,
            };
            let art = run_loop_in_dir(
                &cfg,
                Wiring::SegDirect,
                "sampler.stage2",
                &stage2_data,
                &stage2_dir,
                resume,
            )?;
            let sc = score_checkpoints(&art.ckpts, &cfg, &stage2_data.val, false)?;
            manifest_extra.push(("stage1_checkpoint".into(), stage1_final.display().to_string()));
            selection = "val_synthetic_frozen_g1";
            scores = sc;
            artifacts = art;
        }
        _ => {
            let wiring = wiring_for(cfg.variant, true);
            let art = run_loop_in_dir(&cfg, wiring, "sampler", &loaded.train, &out_dir, resume)?;
            let (val_set, through_g1, sel): (&[NetSlice], bool, &str) = match cfg.variant {
                Variant::SegOnly => (&loaded.train.val, false, "train_target_labeled"),
                _ if cfg.select_on_target => {
                    // opt-in leak: score on the target-label evaluation store
                    manifest_extra
                        .push(("selection_warning".into(), "uses target labels".into()));
                    (&loaded.train.val, true, "target_labels")
                }
                _ => (&loaded.train.val, true, "val_synthetic"),
            };
            let mut val_owned: Vec<NetSlice>;
            let val_used: &[NetSlice] = if cfg.select_on_target && cfg.variant != Variant::SegOnly
            {
                let eval_path = data_dir.join("eval.tsv");
                let m = Manifest::read(&eval_path)?;
                let slices = load_slices(&m, &data_dir, cfg.n_classes)?;
                val_owned = prepare_scans(&slices, cfg.image_size)?;
                val_owned.retain(|s| s.label.is_some());
                &val_owned
            } else {
                val_set
            };
            let sc = score_checkpoints(
                &art.ckpts,
                &cfg,
                val_used,
                through_g1 && !cfg.select_on_target,
            )?;
            selection = sel;
            scores = sc;
            artifacts = art;
        }
    }

    let best = select_best(&scores)?.clone();
    write_run_manifest(&out_dir, raw, &cfg, &loaded, started, &scores, Some(&best), &{
        let mut m = manifest_extra.clone();
        m.push(("selection".into(), selection.into()));
        m
    })?;
    let final_ck = artifacts.ckpts.last().cloned().unwrap();
    Ok(RunOutput {
        best_checkpoint: best.path.clone(),
        best_epoch: best.epoch,
        final_checkpoint: final_ck,
        loss_csv: artifacts.loss_csv,
        run_manifest: out_dir.join("run_manifest.txt"),
        val_scores: scores,
        out_dir,
    })
}

#[allow(clippy::too_many_arguments)]
fn write_run_manifest(
    out_dir: &Path,
    raw: &RawConfig,
    cfg: &TrainConfig,
    loaded: &LoadedData,
    started: u64,
    scores: &[EpochScore],
    best: Option<&EpochScore>,
    extra: &[(String, String)],
) -> Result<()> {
    let mut entries: Vec<(String, String)> = vec![
        ("config_hash".into(), cfg.config_hash.clone()),
        ("variant".into(), cfg.variant.tag().into()),
        ("seed".into(), cfg.seed.to_string()),
        ("train_manifest_hash".into(), loaded.train_manifest_hash.clone()),
        ("val_manifest_hash".into(), loaded.val_manifest_hash.clone()),
        ("started_unix".into(), started.to_string()),
        ("finished_unix".into(), now_unix().to_string()),
    ];
    entries.extend(extra.iter().cloned());
    for s in scores {
        entries.push((format!("epoch.{}.val_mean_dsc", s.epoch), format!("{:.6}", s.mean_dsc)));
    }
    if let Some(b) = best {
        entries.push(("best_epoch".into(), b.epoch.to_string()));
        entries.push(("best_val_mean_dsc".into(), format!("{:.6}", b.mean_dsc)));
    }
    for line in raw.canonical().lines() {
        if let Some((k, v)) = line.split_once('=') {
            entries.push((format!("config.{k}"), v.to_string()));
        }
    }
    write_kv(&out_dir.join("run_manifest.txt"), &entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(variant: &str) -> TrainConfig {
        let mut raw = RawConfig::parse("").unwrap();
        raw.set("train.variant", variant);
        raw.set("train.image_size", "16");
        raw.set("train.base_filters", "4");
        raw.set("train.res_blocks", "1");
        raw.set("train.disc_layers", "1");
        raw.set("train.epochs", "1");
        TrainConfig::from_raw(&raw).unwrap()
    }

    fn toy_slice(seed: u64, n: usize, labeled: bool) -> NetSlice {
        let mut rng = NamedStream::new(seed, "test.slice");
        let x: Vec<f32> = (0..n * n).map(|_| rng.range(-1.0, 1.0) as f32).collect();
        let label = labeled.then(|| {
            (0..n * n).map(|i| u8::from(i % 7 < 3 && rng.uniform() < 0.9)).collect()
        });
        NetSlice { scan_id: format!("toy_{seed}"), x, label }
    }

    fn grads_all_zero(net: &Network) -> bool {
        net.params().iter().all(|p| p.grad_snapshot().iter().all(|g| *g == 0.0))
    }

    fn values(net: &Network) -> Vec<u32> {
        net.params().iter().flat_map(|p| p.value().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect()
    }

    // Each phase may only deposit gradient on its own side: the frozen
    // discriminator passes of phase 1 must leave D grad buffers at zero,
    // and the constant-fake passes of phase 2 must leave G/Seg at zero.
    #[test]
    fn phases_deposit_gradient_only_on_their_own_side() {
        let mut t = Trainer::new(tiny_cfg("SYNSEG"), 1, 1).unwrap();
        let x = toy_slice(1, 16, true);
        let y = toy_slice(2, 16, false);

        let d1_vals = values(t.d1.as_ref().unwrap());
        let d2_vals = values(t.d2.as_ref().unwrap());
        let (_, ft, fs) = t.phase1(&x, Some(&y), 1.0).unwrap();
        assert!(!grads_all_zero(t.g1.as_ref().unwrap()), "phase 1 produced no G1 gradient");
        assert!(!grads_all_zero(t.seg.as_ref().unwrap()), "phase 1 produced no Seg gradient");
        assert!(grads_all_zero(t.d1.as_ref().unwrap()), "phase 1 leaked gradient into D1");
        assert!(grads_all_zero(t.d2.as_ref().unwrap()), "phase 1 leaked gradient into D2");
        assert_eq!(d1_vals, values(t.d1.as_ref().unwrap()));
        assert_eq!(d2_vals, values(t.d2.as_ref().unwrap()));

        for net in [&t.g1, &t.g2, &t.seg].into_iter().flatten() {
            net.zero_grads();
        }
        let g1_vals = values(t.g1.as_ref().unwrap());
        let g2_vals = values(t.g2.as_ref().unwrap());
        let seg_vals = values(t.seg.as_ref().unwrap());
        t.phase2(&x, Some(&y), ft, fs, 1.0).unwrap();
        assert!(!grads_all_zero(t.d1.as_ref().unwrap()), "phase 2 produced no D1 gradient");
        assert!(!grads_all_zero(t.d2.as_ref().unwrap()), "phase 2 produced no D2 gradient");
        assert!(grads_all_zero(t.g1.as_ref().unwrap()), "phase 2 leaked gradient into G1");
        assert!(grads_all_zero(t.g2.as_ref().unwrap()), "phase 2 leaked gradient into G2");
        assert!(grads_all_zero(t.seg.as_ref().unwrap()), "phase 2 leaked gradient into Seg");
        assert_eq!(g1_vals, values(t.g1.as_ref().unwrap()));
        assert_eq!(g2_vals, values(t.g2.as_ref().unwrap()));
        assert_eq!(seg_vals, values(t.seg.as_ref().unwrap()));
    }

    #[test]
    fn config_rejects_sizes_the_generator_cannot_mirror() {
        let mut raw = RawConfig::parse("train.variant = SYNSEG").unwrap();
        raw.set("train.image_size", "30");
        assert!(TrainConfig::from_raw(&raw).is_err());
        raw.set("train.image_size", "12");
        assert!(TrainConfig::from_raw(&raw).is_err());
    }

    #[test]
    fn selection_prefers_earliest_epoch_on_ties() {
        let mk = |epoch, dsc| EpochScore { epoch, mean_dsc: dsc, path: PathBuf::from("x") };
        let scores = vec![mk(1, 0.5), mk(2, 0.9), mk(3, 0.9)];
        assert_eq!(select_best(&scores).unwrap().epoch, 2);
    }

    #[test]
    fn loss_log_resume_truncates_to_requested_rows() {
        let d = tempfile::tempdir().unwrap();
        let path = d.path().join("losses.csv");
        let w = LossWeights::default();
        let mut log = LossLog::create(&path, "deadbeef", &w).unwrap();
        for i in 1..=4 {
            let p = LossParts { seg: i as f64, total: i as f64, ..Default::default() };
            log.append(i, 1, &p).unwrap();
        }
        drop(log);
        let mut log = LossLog::resume(&path, 2).unwrap();
        assert_eq!(log.rows, 2);
        log.append(3, 1, &LossParts::default()).unwrap();
        drop(log);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 5, "2 header lines + 3 data rows");
        let (rows, err) = verify_loss_csv(&path).unwrap();
        assert_eq!(rows, 3);
        assert!(err <= 1e-6);
    }
}
