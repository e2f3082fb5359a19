use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 0

[experiment]
bank_n = 6
explicit_a2e_pairs = 6

[experiment.synth]
h_a = 6
h_c = 5
h_v = 4
v_total = 12
h_id = 2
height = 16
width = 16
patch = 4

[experiment.data]
sequences = 4
frames_per_sequence = 8
heldout_sequences = 1

[experiment.a2e]
width = 8
heads = 2
ff = 8
layers = 1
m = 6

[experiment.a2e_train]
lr = 1e-3
epochs = 2
window = 6
batch_size = 4

[experiment.renderer]
base_channels = 4
depth = 2
key_hidden = 8
implicit_slots = 8

[experiment.renderer_train]
lr = 1e-3
disc_lr = 1e-3
epochs = 1

[experiment.disc]
channels = 4

[adapt]
budget_frames = 12
heldout_sequences = 1

[adapt.a2e]
epochs = 1
window = 6

[adapt.renderer]
epochs = 1

[ablation]
seeds = [0]

[ablation.sweeps]
m = [4]
n = [4]
d = [4]
"#;

fn talkmem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_talkmem"))
        .args(args)
        .env_remove("TALKMEM_OUT")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = talkmem(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

fn fixture() -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    let config = root.join("tiny.toml");
    std::fs::write(&config, TINY).unwrap();
    Fixture { _tmp: tmp, root, config }
}

impl Fixture {
    fn run(&self, cmd: &str, out: &str, extra: &[&str]) -> PathBuf {
        let dir = self.root.join(out);
        let mut args = vec![cmd, "--config", s(&self.config), "--out", s(&dir)];
        args.extend_from_slice(extra);
        ok(&args);
        dir
    }
}

#[test]
fn full_pipeline_is_reproducible_and_resumable() {
    let f = fixture();
    let data = f.run("gen-data", "data", &[]).join("data");
    assert!(data.join("manifest.json").exists());
    let a2e = f.run("train-a2e", "a2e", &["--data", s(&data)]);
    let bank = f.run("build-mem", "bank", &["--data", s(&data)]).join("bank");
    let nr = f.run("train-nr", "nr", &["--data", s(&data), "--bank", s(&bank)]);
    for d in [&a2e, &nr] {
        assert!(d.join("config.toml").exists() && d.join("run.json").exists());
    }
    let (a2e_ck, nr_ck) = (a2e.join("a2e"), nr.join("renderer"));
    let infer_args = [
        "--data",
        s(&data),
        "--a2e",
        s(&a2e_ck),
        "--renderer",
        s(&nr_ck),
        "--bank",
        s(&bank),
    ];
    let inf = f.run("infer", "infer", &infer_args);
    let metrics = std::fs::read_to_string(inf.join("metrics.csv")).unwrap();
    let row: Vec<&str> = metrics.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "heldout");
    assert!(row[2].parse::<f64>().unwrap().is_finite());
    assert!(std::fs::read_dir(inf.join("frames")).unwrap().count() == 8);

    // same config and seed elsewhere: identical metrics
    let inf2 = f.run("infer", "infer2", &infer_args);
    assert_eq!(metrics, std::fs::read_to_string(inf2.join("metrics.csv")).unwrap());
    let data2 = f.run("gen-data", "data2", &[]).join("data");
    assert_eq!(
        std::fs::read(data.join("manifest.json")).unwrap(),
        std::fs::read(data2.join("manifest.json")).unwrap()
    );

    // rerun is detected as complete
    let mut args = vec!["infer", "--config", s(&f.config), "--out", s(&inf)];
    args.extend_from_slice(&infer_args);
    assert!(ok(&args).starts_with("up to date"));
    // a different seed is new work
    let args_seed: Vec<&str> = args.iter().copied().chain(["--seed", "1"]).collect();
    assert!(!ok(&args_seed).starts_with("up to date"));

    let ev = f.run(
        "eval",
        "eval",
        &["--data", s(&data), "--a2e", s(&a2e_ck), "--renderer", s(&nr_ck), "--bank", s(&bank)],
    );
    assert!(std::fs::read_to_string(ev.join("metrics.csv")).unwrap().starts_with("split,frames,vertex_rmse"));

    let ad = f.run(
        "adapt",
        "adapt",
        &["--a2e", s(&a2e_ck), "--renderer", s(&nr_ck), "--bank", s(&bank)],
    );
    let m = std::fs::read_to_string(ad.join("metrics.csv")).unwrap();
    assert!(m.contains("pretrained") && m.contains("adapted"));
    let new_bank = talkmem::explicit_memory::load_bank(&ad.join("bank")).unwrap();
    let old_bank = talkmem::explicit_memory::load_bank(&bank).unwrap();
    assert_ne!(new_bank.identity_tag, old_bank.identity_tag);
    let small = talkmem::synth_data::read_dataset(&ad.join("adapt_data")).unwrap();
    assert_eq!(small.identity.tag, new_bank.identity_tag);
    let pool = small.vertex_patch_pool().unwrap();
    assert!(new_bank.pairs.iter().all(|p| pool.contains(p)));
}

#[test]
fn ablate_writes_report() {
    let f = fixture();
    let dir = f.run("ablate", "ablate", &[]);
    for name in ["ablation.csv", "sweeps.csv", "report.md", "config.toml"] {
        assert!(dir.join(name).exists(), "{name}");
    }
}

#[test]
fn errors_are_single_line_with_category() {
    let f = fixture();
    let missing = f.root.join("nope");
    let out = talkmem(&["train-a2e", "--config", s(&f.config), "--out", s(&f.root.join("x")), "--data", s(&missing)]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("argument: "), "{err}");

    let out = talkmem(&["gen-data", "--set", "experiment.bogus=1", "--out", s(&f.root.join("y"))]);
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("argument: "));

    let out = talkmem(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("argument: "));

    // corrupted blob
    let data = f.run("gen-data", "data", &[]).join("data");
    let copy = f.root.join("corrupt");
    std::fs::create_dir_all(&copy).unwrap();
    for e in std::fs::read_dir(&data).unwrap() {
        let p = e.unwrap().path();
        std::fs::copy(&p, copy.join(p.file_name().unwrap())).unwrap();
    }
    let blob = std::fs::read_dir(&copy)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|x| x == "f32"))
        .unwrap();
    let mut bytes = std::fs::read(&blob).unwrap();
    bytes[0] ^= 0xff;
    std::fs::write(&blob, bytes).unwrap();
    let out = talkmem(&["train-a2e", "--config", s(&f.config), "--out", s(&f.root.join("z")), "--data", s(&copy)]);
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("integrity: "), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);
}

#[test]
fn output_may_not_overlap_inputs() {
    let f = fixture();
    let data = f.run("gen-data", "data", &[]).join("data");
    let out = talkmem(&["train-a2e", "--config", s(&f.config), "--out", s(&data), "--data", s(&data)]);
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("argument: "));
}
