//! Procedural two-modality phantom dataset. Each scan is an independent
//! "subject": a body disc containing one large organ ellipse (the
//! segmentation target) plus small confounder ellipses, evolving across
//! slices like an ellipsoid. The same tissue world renders into either
//! modality:
//!
//! * source: identity transfer (bright organ on a textured body),
//! * target: inverted nonlinear transfer `1 - t^1.5` under a smooth
//!   multiplicative bias field.
//!
//! Source scans ship with labels; target scans ship without. Target labels
//! do exist — written exclusively into an `eval_only/` subtree referenced
//! by the evaluation manifest, never by the training manifest.

use crate::data::manifest::{Manifest, SliceRecord};
use crate::data::{pgm, Modality};
use crate::error::Result;
use crate::rng::NamedStream;
use std::f64::consts::{PI, TAU};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug)]
pub struct PhantomSpec {
    pub seed: u64,
    pub n_source_scans: usize,
    pub n_val_scans: usize,
    pub n_target_scans: usize,
    pub slices_per_scan: usize,
    pub image_size: usize,
    /// Organ semi-axis range as a fraction of the image half-extent.
    pub organ_radius: (f64, f64),
    pub n_confounders: usize,
    pub noise_std: f64,
    pub bias_strength: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            seed: 0,
            n_source_scans: 20,
            n_val_scans: 2,
            n_target_scans: 8,
            slices_per_scan: 16,
            image_size: 64,
            organ_radius: (0.25, 0.45),
            n_confounders: 3,
            noise_std: 0.03,
            bias_strength: 0.15,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        use crate::error::Error;
        if self.n_source_scans == 0 || self.n_target_scans == 0 || self.slices_per_scan == 0 {
            return Err(Error::Config("phantom needs at least one scan per modality".into()));
        }
        if self.image_size < 8 {
            return Err(Error::Config("phantom image_size must be >= 8".into()));
        }
        let (lo, hi) = self.organ_radius;
        if !(0.05 <= lo && lo <= hi && hi <= 0.5) {
            return Err(Error::Config("organ_radius must satisfy 0.05 <= lo <= hi <= 0.5".into()));
        }
        if self.noise_std < 0.0 || self.bias_strength < 0.0 {
            return Err(Error::Config("noise/bias must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos_t: f64,
    sin_t: f64,
}

impl Ellipse {
    fn contains(&self, u: f64, v: f64, shrink: f64) -> bool {
        if shrink <= 0.0 {
            return false;
        }
        let (dx, dy) = (u - self.cx, v - self.cy);
        let x = dx * self.cos_t + dy * self.sin_t;
        let y = -dx * self.sin_t + dy * self.cos_t;
        let (ea, eb) = (self.a * shrink, self.b * shrink);
        (x / ea).powi(2) + (y / eb).powi(2) <= 1.0
    }
}

struct World {
    body: Ellipse,
    organ: Ellipse,
    confounders: Vec<Ellipse>,
    tex_freq: (f64, f64),
    tex_phase: f64,
    bias_freq: (f64, f64),
    bias_phase: f64,
    spacing: (f32, f32),
}

fn ellipse(rng: &mut NamedStream, c_jitter: f64, r: (f64, f64)) -> Ellipse {
    let t = rng.range(0.0, PI);
    Ellipse {
        cx: rng.range(-c_jitter, c_jitter),
        cy: rng.range(-c_jitter, c_jitter),
        a: rng.range(r.0, r.1),
        b: rng.range(r.0, r.1),
        cos_t: t.cos(),
        sin_t: t.sin(),
    }
}

fn sample_world(rng: &mut NamedStream, spec: &PhantomSpec) -> World {
    let body = ellipse(rng, 0.04, (0.78, 0.9));
    let organ = ellipse(rng, 0.22, spec.organ_radius);
    let confounders =
        (0..spec.n_confounders).map(|_| ellipse(rng, 0.5, (0.08, 0.18))).collect();
    World {
        body,
        organ,
        confounders,
        tex_freq: (rng.range(1.5, 3.5), rng.range(1.5, 3.5)),
        tex_phase: rng.range(0.0, TAU),
        bias_freq: (rng.range(0.6, 1.4), rng.range(0.6, 1.4)),
        bias_phase: rng.range(0.0, TAU),
        spacing: (rng.range(0.7, 1.3) as f32, rng.range(0.7, 1.3) as f32),
    }
}

/// Through-plane profile: the organ is an ellipsoid cross-section, never
/// vanishing entirely (factor >= ~0.55 at the end slices); confounders
/// span a narrower extent and may disappear.
fn z_factor(z: usize, n: usize, spread: f64) -> f64 {
    if n <= 1 {
        return 1.0;
    }
    let dz = (z as f64 - (n - 1) as f64 / 2.0) / ((n - 1) as f64 / 2.0);
    (1.0 - (dz * spread).powi(2)).max(0.0).sqrt()
}

/// Tissue field plus label for one slice. Tissue values: background 0.05,
/// body 0.35 (+/- texture), confounder 0.55, organ 0.85.
fn raster_tissue(world: &World, z: usize, n_slices: usize, size: usize) -> (Vec<f64>, Vec<u8>) {
    let organ_f = z_factor(z, n_slices, 0.75);
    let conf_f = z_factor(z, n_slices, 1.15);
    let mut tissue = vec![0.0f64; size * size];
    let mut label = vec![0u8; size * size];
    for i in 0..size {
        let v = (i as f64 + 0.5) / size as f64 * 2.0 - 1.0;
        for j in 0..size {
            let u = (j as f64 + 0.5) / size as f64 * 2.0 - 1.0;
            let idx = i * size + j;
            let mut t = 0.05;
            if world.body.contains(u, v, 1.0) {
                t = 0.35
                    + 0.05
                        * (TAU * (world.tex_freq.0 * u + world.tex_freq.1 * v) / 2.0
                            + world.tex_phase)
                            .sin();
                for c in &world.confounders {
                    if c.contains(u, v, conf_f) {
                        t = 0.55;
                    }
                }
                if world.organ.contains(u, v, organ_f) {
                    t = 0.85;
                    label[idx] = 1;
                }
            }
            tissue[idx] = t;
        }
    }
    (tissue, label)
}

fn render(
    world: &World,
    tissue: &[f64],
    modality: Modality,
    size: usize,
    noise_std: f64,
    bias_strength: f64,
    rng: &mut NamedStream,
) -> Vec<f32> {
    let mut out = vec![0.0f32; tissue.len()];
    for i in 0..size {
        let v = (i as f64 + 0.5) / size as f64 * 2.0 - 1.0;
        for j in 0..size {
            let u = (j as f64 + 0.5) / size as f64 * 2.0 - 1.0;
            let t = tissue[i * size + j];
            let clean = match modality {
                Modality::Source => t,
                Modality::Target => {
                    let bias = 1.0
                        + bias_strength
                            * 0.5
                            * ((PI * world.bias_freq.0 * u + world.bias_phase).sin()
                                + (PI * world.bias_freq.1 * v + world.bias_phase).cos());
                    (1.0 - t.powf(1.5)) * bias
                }
            };
            let noisy = clean + rng.normal(noise_std);
            out[i * size + j] = noisy.clamp(0.0, 1.0) as f32;
        }
    }
    out
}

/// Both modality renderings of one world's middle slice, for histogram
/// tests: (source image, target image, label).
pub fn paired_preview(spec: &PhantomSpec) -> Result<(Vec<f32>, Vec<f32>, Vec<u8>)> {
    spec.validate()?;
    let mut rng = NamedStream::new(spec.seed, "phantom.preview");
    let world = sample_world(&mut rng, spec);
    let mid = spec.slices_per_scan / 2;
    let (tissue, label) = raster_tissue(&world, mid, spec.slices_per_scan, spec.image_size);
    let src = render(
        &world,
        &tissue,
        Modality::Source,
        spec.image_size,
        spec.noise_std,
        spec.bias_strength,
        &mut rng,
    );
    let tgt = render(
        &world,
        &tissue,
        Modality::Target,
        spec.image_size,
        spec.noise_std,
        spec.bias_strength,
        &mut rng,
    );
    Ok((src, tgt, label))
}

pub struct PhantomOutput {
    pub train_manifest: PathBuf,
    pub val_manifest: PathBuf,
    pub eval_manifest: PathBuf,
}

struct ScanPlan<'a> {
    group: &'a str, // directory + stream name component
    index: usize,
    modality: Modality,
    labels_visible: bool, // labels written next to images and listed
}

pub fn generate(spec: &PhantomSpec, out_dir: &Path) -> Result<PhantomOutput> {
    spec.validate()?;
    let mut plans = Vec::new();
    for i in 0..spec.n_source_scans {
        plans.push(ScanPlan { group: "src", index: i, modality: Modality::Source, labels_visible: true });
    }
    for i in 0..spec.n_val_scans {
        plans.push(ScanPlan { group: "val", index: i, modality: Modality::Source, labels_visible: true });
    }
    for i in 0..spec.n_target_scans {
        plans.push(ScanPlan { group: "tgt", index: i, modality: Modality::Target, labels_visible: false });
    }

    let mut train = Manifest::default();
    let mut val = Manifest::default();
    let mut eval = Manifest::default();

    for plan in &plans {
        let scan_id = format!("{}_{:03}", plan.group, plan.index);
        let mut rng = NamedStream::new(spec.seed, &format!("phantom.{scan_id}"));
        let world = sample_world(&mut rng, spec);
        for z in 0..spec.slices_per_scan {
            let (tissue, label) = raster_tissue(&world, z, spec.slices_per_scan, spec.image_size);
            let img = render(
                &world,
                &tissue,
                plan.modality,
                spec.image_size,
                spec.noise_std,
                spec.bias_strength,
                &mut rng,
            );
            let img_rel = PathBuf::from(format!("{}/{scan_id}/slice_{z:02}.pgm", plan.group));
            let img_samples: Vec<u16> = img.iter().map(|&v| pgm::quantize(v)).collect();
            pgm::write_pgm16(
                &out_dir.join(&img_rel),
                spec.image_size,
                spec.image_size,
                &img_samples,
                &[],
            )?;

            let label_samples: Vec<u16> = label.iter().map(|&c| c as u16).collect();
            let label_rel = if plan.labels_visible {
                PathBuf::from(format!("{}/{scan_id}/slice_{z:02}_label.pgm", plan.group))
            } else {
                PathBuf::from(format!("eval_only/{scan_id}/slice_{z:02}_label.pgm"))
            };
            pgm::write_pgm16(
                &out_dir.join(&label_rel),
                spec.image_size,
                spec.image_size,
                &label_samples,
                &[],
            )?;

            let record = |label_path: Option<PathBuf>| SliceRecord {
                scan_id: scan_id.clone(),
                modality: plan.modality,
                image_path: img_rel.clone(),
                label_path,
                spacing_mm: world.spacing,
            };
            match plan.group {
                "src" => train.records.push(record(Some(label_rel.clone()))),
                "val" => val.records.push(record(Some(label_rel.clone()))),
                _ => {
                    // training sees the target image only; evaluation gets
                    // the image plus its held-back label
                    train.records.push(record(None));
                    eval.records.push(record(Some(label_rel.clone())));
                }
            }
        }
    }

    let train_manifest = out_dir.join("train.tsv");
    let val_manifest = out_dir.join("val.tsv");
    let eval_manifest = out_dir.join("eval.tsv");
    train.write(&train_manifest)?;
    val.write(&val_manifest)?;
    eval.write(&eval_manifest)?;
    Ok(PhantomOutput { train_manifest, val_manifest, eval_manifest })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::Manifest;

    fn small_spec() -> PhantomSpec {
        PhantomSpec {
            seed: 42,
            n_source_scans: 2,
            n_val_scans: 1,
            n_target_scans: 2,
            slices_per_scan: 3,
            image_size: 32,
            ..PhantomSpec::default()
        }
    }

    fn dir_digest(root: &Path) -> Vec<(String, Vec<u8>)> {
        let mut files = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in std::fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    files.push((
                        p.strip_prefix(root).unwrap().to_string_lossy().into_owned(),
                        std::fs::read(&p).unwrap(),
                    ));
                }
            }
        }
        files.sort_by(|a, b| a.0.cmp(&b.0));
        files
    }

    #[test]
    fn same_spec_regenerates_byte_identical_dataset() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate(&small_spec(), d1.path()).unwrap();
        generate(&small_spec(), d2.path()).unwrap();
        assert_eq!(dir_digest(d1.path()), dir_digest(d2.path()));
    }

    #[test]
    fn different_seed_changes_the_dataset() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate(&small_spec(), d1.path()).unwrap();
        generate(&PhantomSpec { seed: 43, ..small_spec() }, d2.path()).unwrap();
        assert_ne!(dir_digest(d1.path()), dir_digest(d2.path()));
    }

    #[test]
    fn training_manifest_never_lists_target_labels() {
        let d = tempfile::tempdir().unwrap();
        let out = generate(&small_spec(), d.path()).unwrap();
        let train = Manifest::read(&out.train_manifest).unwrap();
        let mut saw_target = false;
        for r in &train.records {
            if r.modality == Modality::Target {
                saw_target = true;
                assert!(r.label_path.is_none(), "target slice with visible label");
            } else {
                assert!(r.label_path.is_some(), "source slice without label");
                assert!(!r.label_path.as_ref().unwrap().starts_with("eval_only"));
            }
        }
        assert!(saw_target);
        // the held-back labels all live under eval_only/
        let eval = Manifest::read(&out.eval_manifest).unwrap();
        assert!(!eval.records.is_empty());
        for r in &eval.records {
            let lp = r.label_path.as_ref().expect("eval rows carry labels");
            assert!(lp.starts_with("eval_only"));
        }
    }

    #[test]
    fn organ_fraction_stays_inside_analytic_ellipse_bounds() {
        // mid-slice organ area is pi*a*b out of the 4.0 of [-1,1]^2
        let spec = PhantomSpec { image_size: 64, ..small_spec() };
        let (lo, hi) = spec.organ_radius;
        let (min_frac, max_frac) = (PI * lo * lo / 4.0, PI * hi * hi / 4.0);
        let d = tempfile::tempdir().unwrap();
        let out = generate(&spec, d.path()).unwrap();
        let m = Manifest::read(&out.train_manifest).unwrap();
        let mut checked = 0;
        for r in m.records.iter().filter(|r| r.modality == Modality::Source) {
            let lp = r.label_path.as_ref().unwrap();
            if !lp.to_string_lossy().contains("slice_01") {
                continue; // mid slice of 3
            }
            let l = pgm::read_pgm16(&d.path().join(lp)).unwrap();
            let frac = l.samples.iter().filter(|&&s| s == 1).count() as f64
                / l.samples.len() as f64;
            assert!(
                frac > min_frac * 0.7 && frac < max_frac * 1.3,
                "organ fraction {frac} outside [{min_frac}, {max_frac}] band"
            );
            checked += 1;
        }
        assert_eq!(checked, 2);
    }

    #[test]
    fn organ_present_on_every_slice() {
        let d = tempfile::tempdir().unwrap();
        let out = generate(&small_spec(), d.path()).unwrap();
        for manifest in [&out.train_manifest, &out.val_manifest, &out.eval_manifest] {
            let m = Manifest::read(manifest).unwrap();
            for r in &m.records {
                if let Some(lp) = &r.label_path {
                    let l = pgm::read_pgm16(&d.path().join(lp)).unwrap();
                    assert!(l.samples.iter().any(|&s| s == 1), "{}", lp.display());
                }
            }
        }
    }

    #[test]
    fn modalities_render_distinguishably() {
        let (src, tgt, label) = paired_preview(&small_spec()).unwrap();
        let organ_src: Vec<f64> = label
            .iter()
            .zip(&src)
            .filter(|(l, _)| **l == 1)
            .map(|(_, v)| *v as f64)
            .collect();
        let organ_tgt: Vec<f64> = label
            .iter()
            .zip(&tgt)
            .filter(|(l, _)| **l == 1)
            .map(|(_, v)| *v as f64)
            .collect();
        let ks = synseg_testkit::stats::ks_statistic(&organ_src, &organ_tgt);
        assert!(ks > 0.2, "organ histograms too similar: KS = {ks}");
    }
}
