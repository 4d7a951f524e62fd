//! End-to-end training runs on a generated dataset: determinism of the
//! full artifact set, label-read hygiene, two-stage orchestration and the
//! run manifest contract.

use std::path::Path;
use synseg_core::config::RawConfig;
use synseg_core::data::{audit, phantom::PhantomSpec};
use synseg_core::training::{self, run_training};

fn tiny_dataset(dir: &Path, seed: u64) {
    let spec = PhantomSpec {
        seed,
        n_source_scans: 2,
        n_val_scans: 1,
        n_target_scans: 2,
        slices_per_scan: 2,
        image_size: 16,
        ..PhantomSpec::default()
    };
    synseg_core::data::phantom::generate(&spec, dir).unwrap();
}

fn tiny_run_config(data_dir: &Path, out_dir: &Path, variant: &str, seed: u64) -> RawConfig {
    let mut raw = RawConfig::parse("").unwrap();
    raw.set("seed", &seed.to_string());
    raw.set("data.dir", &data_dir.to_string_lossy());
    raw.set("train.out", &out_dir.to_string_lossy());
    raw.set("train.variant", variant);
    raw.set("train.epochs", "2");
    raw.set("train.image_size", "16");
    raw.set("train.base_filters", "4");
    raw.set("train.res_blocks", "1");
    raw.set("train.disc_layers", "1");
    raw
}

#[test]
fn same_seed_runs_produce_identical_checkpoints_and_loss_logs() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    tiny_dataset(&data, 5);

    let out_a = root.path().join("a");
    let out_b = root.path().join("b");
    let run_a = run_training(&tiny_run_config(&data, &out_a, "SYNSEG", 9)).unwrap();
    let run_b = run_training(&tiny_run_config(&data, &out_b, "SYNSEG", 9)).unwrap();

    let bytes = |p: &Path| std::fs::read(p).unwrap();
    assert_eq!(
        bytes(&run_a.final_checkpoint),
        bytes(&run_b.final_checkpoint),
        "final checkpoints differ between same-seed runs"
    );
    assert_eq!(
        bytes(&run_a.loss_csv),
        bytes(&run_b.loss_csv),
        "loss logs differ between same-seed runs"
    );
    assert_eq!(run_a.best_epoch, run_b.best_epoch);

    let (rows, err) = training::verify_loss_csv(&run_a.loss_csv).unwrap();
    assert_eq!(rows, 8, "2 epochs x 2 scans x 2 slices");
    assert_eq!(err, 0.0);
}

#[test]
fn different_seeds_produce_different_checkpoints() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    tiny_dataset(&data, 5);
    let run_a =
        run_training(&tiny_run_config(&data, &root.path().join("a"), "HC", 1)).unwrap();
    let run_b =
        run_training(&tiny_run_config(&data, &root.path().join("b"), "HC", 2)).unwrap();
    assert_ne!(
        std::fs::read(&run_a.final_checkpoint).unwrap(),
        std::fs::read(&run_b.final_checkpoint).unwrap()
    );
}

// Adversarial training must never open anything under the held-back
// target-label store; the audit log records every dataset read in the
// process, so filtering it to this test's own directories is exact proof.
#[test]
fn adversarial_training_never_reads_target_labels() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    tiny_dataset(&data, 6);

    for (variant, sub) in [("SYNSEG", "s"), ("HC", "h"), ("TWO_STAGE", "t")] {
        let mark = audit::snapshot().len();
        run_training(&tiny_run_config(&data, &root.path().join(sub), variant, 3)).unwrap();
        let reads: Vec<String> = audit::snapshot()[mark..]
            .iter()
            .filter(|p| p.starts_with(&*data.to_string_lossy()))
            .cloned()
            .collect();
        assert!(
            !reads.is_empty(),
            "{variant}: expected audited dataset reads, audit hook may be disconnected"
        );
        assert!(
            reads.iter().any(|p| p.ends_with("train.tsv")),
            "{variant}: training manifest read was not audited"
        );
        for p in &reads {
            assert!(
                !p.contains("eval_only"),
                "{variant}: training opened held-back label data: {p}"
            );
        }
    }
}

#[test]
fn supervised_variant_reads_target_labels_as_its_explicit_corpus() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    tiny_dataset(&data, 7);
    let mark = audit::snapshot().len();
    run_training(&tiny_run_config(&data, &root.path().join("o"), "SEG_ONLY", 3)).unwrap();
    let reads: Vec<String> = audit::snapshot()[mark..]
        .iter()
        .filter(|p| p.starts_with(&*data.to_string_lossy()))
        .cloned()
        .collect();
    assert!(reads.iter().any(|p| p.contains("eval_only")));
}

#[test]
fn two_stage_materializes_then_trains_a_fresh_segmenter() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    tiny_dataset(&data, 8);
    let out = root.path().join("out");
    let run = run_training(&tiny_run_config(&data, &out, "TWO_STAGE", 4)).unwrap();

    let stage1_final = out.join("stage1").join("ck_epoch_0002.ssn1");
    assert!(stage1_final.exists());
    assert!(run.final_checkpoint.starts_with(out.join("stage2")));

    let s1 = training::checkpoint::Checkpoint::load(&stage1_final).unwrap();
    assert!(s1.arrays.keys().any(|k| k.starts_with("param.g1.")));
    assert!(s1.arrays.keys().any(|k| k.starts_with("param.g2.")));
    assert!(
        !s1.arrays.keys().any(|k| k.starts_with("param.seg.")),
        "stage 1 must not train a segmenter"
    );

    let s2 = training::checkpoint::Checkpoint::load(&run.final_checkpoint).unwrap();
    assert!(s2.arrays.keys().any(|k| k.starts_with("param.seg.")));
    assert!(
        !s2.arrays.keys().any(|k| k.starts_with("param.g1.")),
        "stage 2 holds no translator; it trains on frozen materialized images"
    );

    // stage 2 leaves the finished stage-1 artifact untouched
    let before = std::fs::read(&stage1_final).unwrap();
    let raw2 = {
        let mut r = tiny_run_config(&data, &out, "TWO_STAGE", 4);
        r.set("train.stage", "2");
        r.set("train.resume", "true");
        r
    };
    run_training(&raw2).unwrap();
    assert_eq!(before, std::fs::read(&stage1_final).unwrap());
}

#[test]
fn stage_two_without_stage_one_is_an_error() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    tiny_dataset(&data, 9);
    let mut raw = tiny_run_config(&data, &root.path().join("out"), "TWO_STAGE", 4);
    raw.set("train.stage", "2");
    let err = run_training(&raw).unwrap_err();
    assert!(matches!(err, synseg_core::Error::Checkpoint(_)), "got {err}");
}

#[test]
fn run_manifest_records_selection_and_scores() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    tiny_dataset(&data, 10);
    let run = run_training(&tiny_run_config(&data, &root.path().join("out"), "HC", 5)).unwrap();
    let text = std::fs::read_to_string(&run.run_manifest).unwrap();
    assert!(text.contains("variant=HC"));
    assert!(text.contains("selection=val_synthetic"));
    assert!(text.contains("best_epoch="));
    assert!(text.contains("epoch.1.val_mean_dsc="));
    assert!(text.contains("epoch.2.val_mean_dsc="));
    assert!(text.contains("config_hash="));
    assert!(text.contains("train_manifest_hash="));
    assert_eq!(run.val_scores.len(), 2);
}

#[test]
fn saved_best_checkpoint_reproduces_the_forward_pass_bit_for_bit() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    tiny_dataset(&data, 11);
    let raw = tiny_run_config(&data, &root.path().join("out"), "SYNSEG", 6);
    let run = run_training(&raw).unwrap();
    let cfg = training::TrainConfig::from_raw(&raw).unwrap();

    let ck = training::checkpoint::Checkpoint::load(&run.best_checkpoint).unwrap();
    let seg_a = training::segmenter_from_checkpoint(&ck, &cfg).unwrap();
    let seg_b = training::segmenter_from_checkpoint(&ck, &cfg).unwrap();
    let mut rng = synseg_core::rng::NamedStream::new(99, "test.probe");
    let probe: Vec<f32> = (0..16 * 16).map(|_| rng.range(-1.0, 1.0) as f32).collect();
    let xt = synseg_core::tensor::Tensor::from_vec(vec![1, 1, 16, 16], probe).unwrap();
    let ya = seg_a.forward_frozen(&xt).unwrap();
    let yb = seg_b.forward_frozen(&xt).unwrap();
    let bits = |t: &synseg_core::tensor::Tensor| -> Vec<u32> {
        t.data().iter().map(|v| v.to_bits()).collect()
    };
    assert_eq!(bits(&ya), bits(&yb));
}
