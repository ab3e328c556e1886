use std::path::Path;

use diffcl::checkpoint::{load_checkpoint, read_config, save_checkpoint, MANIFEST, PAYLOAD};
use diffcl::cli::{held_out_volumes, synthetic_split};
use diffcl::dataset::{read_evaluation_volumes, read_image, read_label, write_dataset, write_image, write_label, Role};
use diffcl::CliError;
use diffcl_core::evalkit::EvalConfig;
use diffcl_core::trainer::{train, Silent, TrainConfig, TrainState};

fn tiny() -> TrainConfig {
    let mut c = TrainConfig::default();
    c.data.synthetic.size = [8, 8, 8];
    c.data.synthetic.count = 5;
    c.data.synthetic.radius_min = 1.5;
    c.data.synthetic.radius_max = 2.5;
    c.net.depth = 2;
    c.net.hfm_stage = 1;
    c.net.base_width = 4;
    c.net.feature_dim = 8;
    c.net.time_embed_dim = 8;
    c.net.hfm_state_dim = 4;
    c.net.hfm_attention_kernel = 3;
    c.patch_size = [8, 8, 8];
    c.eval = EvalConfig { patch_size: [8, 8, 8], stride: [4, 4, 4] };
    c.epochs = 2;
    c.iters_per_epoch = 1;
    c.loss.t_max = 2.0;
    c.labelprop.candidates = 64;
    c.labelprop.anchors = 4;
    c.labelprop.top_k = 4;
    c
}

fn trained(c: &TrainConfig) -> TrainState {
    let mut s = TrainState::new(c).unwrap();
    train(c, &synthetic_split(c).unwrap(), &mut s, &mut Silent).unwrap();
    s
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn save_load_save_is_byte_identical() {
    let c = tiny();
    let s = trained(&c);
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    save_checkpoint(&a, &c, &s).unwrap();
    let (loaded_config, manifest) = read_config(&a).unwrap();
    assert_eq!(loaded_config, c);
    assert_eq!(manifest.epoch, 2);
    assert_eq!(manifest.last_losses, s.history.last().map(|r| r.report));
    let loaded = load_checkpoint(&a, &c).unwrap();
    save_checkpoint(&b, &c, &loaded).unwrap();
    for f in [PAYLOAD, MANIFEST, "config.toml"] {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f}");
    }
    assert_eq!(loaded.history, s.history);
    assert_eq!(loaded.bank, s.bank);
    assert_eq!(loaded.rng, s.rng);
}

#[test]
fn version_mismatch_names_both_versions() {
    let c = tiny();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &c, &TrainState::new(&c).unwrap()).unwrap();
    let path = dir.path().join(MANIFEST);
    let text = std::fs::read_to_string(&path).unwrap().replace("format_version = 1", "format_version = 7");
    std::fs::write(&path, text).unwrap();
    let msg = load_checkpoint(dir.path(), &c).err().unwrap().to_string();
    assert!(msg.contains("version 7") && msg.contains("version 1"), "{msg}");
}

#[test]
fn corrupted_files_fail_to_load() {
    let c = tiny();
    let dir = tempfile::tempdir().unwrap();
    let s = TrainState::new(&c).unwrap();
    save_checkpoint(dir.path(), &c, &s).unwrap();
    let manifest = dir.path().join(MANIFEST);
    let good = read(&manifest);

    std::fs::write(&manifest, b"format_version = 1\nepoch = \"x\"\n").unwrap();
    assert!(matches!(load_checkpoint(dir.path(), &c), Err(CliError::Format { .. })));
    std::fs::write(&manifest, b"\x00\x01 not toml").unwrap();
    assert!(matches!(load_checkpoint(dir.path(), &c), Err(CliError::Format { .. })));

    std::fs::write(&manifest, &good).unwrap();
    let payload = dir.path().join(PAYLOAD);
    let mut bytes = read(&payload);
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    std::fs::write(&payload, &bytes).unwrap();
    assert!(matches!(load_checkpoint(dir.path(), &c), Err(CliError::Format { .. })));

    std::fs::write(dir.path().join("config.toml"), "seed = 3\n").unwrap();
    assert!(read_config(dir.path()).is_err());
}

#[test]
fn checkpoint_for_a_different_network_is_refused() {
    let c = tiny();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &c, &TrainState::new(&c).unwrap()).unwrap();
    let mut wider = c.clone();
    wider.net.base_width = 8;
    assert!(matches!(load_checkpoint(dir.path(), &wider), Err(CliError::Config(_))));
}

#[test]
fn nifti_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let dims = [3, 4, 5];
    let image: Vec<f64> = (0..60).map(|i| (i as f64 * 0.37).sin() / 3.0).collect();
    let label: Vec<u8> = (0..60).map(|i| (i % 7 == 0) as u8 + (i % 11 == 0) as u8).collect();
    let spacing = [0.625, 0.625, 1.25];
    write_image(&dir.path().join("i.nii.gz"), &image, dims, spacing).unwrap();
    write_label(&dir.path().join("l.nii"), &label, dims, spacing).unwrap();
    let (img, d, sp) = read_image(&dir.path().join("i.nii.gz")).unwrap();
    assert_eq!((img, d, sp), (image, dims, spacing));
    assert_eq!(read_label(&dir.path().join("l.nii")).unwrap(), (label, dims));
    assert!(matches!(read_image(&dir.path().join("missing.nii")), Err(CliError::NoData(_))));
}

#[test]
fn dataset_directory_round_trip() {
    let c = tiny();
    let split = synthetic_split(&c).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let m = write_dataset(dir.path(), &split, 2).unwrap();
    assert_eq!(m.volumes.len(), 5);
    assert_eq!(m.volumes.iter().filter(|v| v.role == Role::Labeled).count(), c.data.labeled_count);
    let (_, vols) = read_evaluation_volumes(dir.path()).unwrap();
    let mut want = held_out_volumes(&split);
    want.sort_by(|a, b| a.id.cmp(&b.id));
    assert_eq!(vols, want);
}
