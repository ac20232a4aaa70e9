use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use sha2::{Digest, Sha256};
use stereo_style::stereo_data::Image;
use stereo_style::trainer::TrainConfig;

const BIN: &str = env!("CARGO_BIN_EXE_stereo-style");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed with {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn error_line(out: &Output) -> String {
    let err = String::from_utf8_lossy(&out.stderr);
    err.lines().rfind(|l| l.starts_with("error[")).unwrap_or_default().to_string()
}

fn hash_tree(dir: &Path) -> BTreeMap<PathBuf, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let digest: String = Sha256::digest(fs::read(&p).unwrap()).iter().map(|b| format!("{b:02x}")).collect();
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), digest);
            }
        }
    }
    out
}

/// Small dataset, config, style image and disparity checkpoint shared by the tests.
struct Fixture {
    _dir: tempfile::TempDir,
    inputs: PathBuf,
    data: PathBuf,
    config: PathBuf,
    style: PathBuf,
    disparity: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let inputs = dir.path().join("inputs");
        let data = inputs.join("toy");
        run_ok(&["make-toy-dataset", "--out", s(&data), "--n", "4", "--test-n", "2", "--size", "16x16", "--max-disparity", "2", "--seed", "3"]);
        let config = inputs.join("small.conf");
        fs::write(&config, "epochs = 1\ndisparity_epochs = 1\nimage_size = 16x16\nlog_every = 1\n").unwrap();
        let style = inputs.join("style.png");
        fs::copy(data.join("test/left/00001.png"), &style).unwrap();
        let pre = dir.path().join("pretrain");
        run_ok(&["pretrain-disparity", "--out", s(&pre), "--config", s(&config), "--dataset", s(&data)]);
        Fixture { inputs, data, config, style, disparity: pre.join("disparity.ckpt"), _dir: dir }
    })
}

fn train_single(out: &Path) -> PathBuf {
    let f = fixture();
    run_ok(&[
        "train",
        "--out",
        s(out),
        "--config",
        s(&f.config),
        "--variant",
        "W-G-CON-IV",
        "--dataset",
        s(&f.data),
        "--style",
        s(&f.style),
        "--disparity-ckpt",
        s(&f.disparity),
    ]);
    out.join("stylizer.ckpt")
}

#[test]
fn shipped_default_config_matches_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.conf");
    let shipped = TrainConfig::load(&path).unwrap();
    assert_eq!(shipped, TrainConfig::default());
    assert_eq!((shipped.alpha, shipped.beta, shipped.lambda, shipped.lr), (1.0, 500.0, 100.0, 1e-3));
}

#[test]
fn toy_dataset_is_byte_identical_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for p in [&a, &b] {
        run_ok(&["make-toy-dataset", "--out", s(p), "--n", "3", "--size", "16x16", "--max-disparity", "2", "--seed", "9"]);
    }
    let (mut ha, mut hb) = (hash_tree(&a), hash_tree(&b));
    let manifest = Path::new("manifest.json");
    assert!(ha.remove(manifest).is_some() && hb.remove(manifest).is_some());
    assert_eq!(ha.len(), 3 * 4);
    assert_eq!(ha, hb);
}

#[test]
fn empty_toy_dataset_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["make-toy-dataset", "--out", s(&dir.path().join("d")), "--n", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_line(&out).starts_with("error[config]:"));
}

#[test]
fn non_empty_output_requires_force() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    let args = ["make-toy-dataset", "--out", s(&d), "--n", "1", "--size", "8x8", "--max-disparity", "1"];
    run_ok(&args);
    let out = run(&args);
    assert_eq!(out.status.code(), Some(1));
    assert!(error_line(&out).contains("--force"));
    let mut forced = args.to_vec();
    forced.push("--force");
    run_ok(&forced);
}

#[test]
fn unknown_config_key_exits_2() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.conf");
    fs::write(&bad, "alpha = 1.0\nbogus = 3\n").unwrap();
    let out = run(&["pretrain-disparity", "--out", s(&dir.path().join("o")), "--config", s(&bad), "--dataset", s(&f.data)]);
    assert_eq!(out.status.code(), Some(2));
    let line = error_line(&out);
    assert!(line.starts_with("error[config]:") && line.contains("bogus"), "{line}");
    assert!(!dir.path().join("o").exists());

    let out = run(&["pretrain-disparity", "--out", s(&dir.path().join("o")), "--variant", "Nope", "--dataset", s(&f.data)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_files_exit_3() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let nowhere = dir.path().join("nowhere");
    let o: Vec<PathBuf> = ["a", "b", "c", "d", "e"].iter().map(|n| dir.path().join(n)).collect();
    let cases: Vec<Vec<&str>> = vec![
        vec!["pretrain-disparity", "--out", s(&o[0]), "--dataset", s(&nowhere)],
        vec!["pretrain-disparity", "--out", s(&o[1]), "--config", s(&nowhere), "--dataset", s(&f.data)],
        vec!["stylize", "--out", s(&o[2]), "--ckpt", s(&nowhere), "--left", s(&f.style), "--right", s(&f.style)],
        vec!["evaluate", "--out", s(&o[3]), "--ckpt", s(&f.disparity), "--dataset", s(&f.data), "--style", s(&nowhere)],
        vec!["replay", "--manifest", s(&nowhere), "--out", s(&o[4])],
    ];
    for args in cases {
        let out = run(&args);
        assert_eq!(out.status.code(), Some(3), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(error_line(&out).starts_with("error[missing-file]:"));
    }
}

#[test]
fn non_finite_loss_exits_4_with_diagnostics() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("huge.conf");
    fs::write(&conf, "alpha = 1e300\nimage_size = 16x16\nvariant = SingleImage-IV\n").unwrap();
    let o = dir.path().join("o");
    let out = run(&["train", "--out", s(&o), "--config", s(&conf), "--dataset", s(&f.data), "--style", s(&f.style)]);
    assert_eq!(out.status.code(), Some(4));
    assert!(error_line(&out).starts_with("error[non-finite]:"));
    let diag = fs::read_to_string(o.join("abort.txt")).unwrap();
    assert!(diag.contains("content"), "{diag}");
    assert!(!o.join("stylizer.ckpt").exists());
}

#[test]
fn stylize_keeps_the_input_resolution() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_single(&dir.path().join("train"));
    let pair = dir.path().join("pair");
    run_ok(&["make-toy-dataset", "--out", s(&pair), "--n", "1", "--size", "540x960", "--seed", "1"]);
    let o = dir.path().join("styl");
    run_ok(&[
        "stylize",
        "--out",
        s(&o),
        "--ckpt",
        s(&ckpt),
        "--left",
        s(&pair.join("left/00000.png")),
        "--right",
        s(&pair.join("right/00000.png")),
    ]);
    for name in ["left.png", "right.png"] {
        let img = Image::read_png(&o.join(name)).unwrap();
        assert_eq!((img.width(), img.height()), (960, 540));
    }
}

#[test]
fn evaluate_prints_one_row() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_single(&dir.path().join("train"));
    let o = dir.path().join("eval");
    let out = run_ok(&["evaluate", "--out", s(&o), "--ckpt", s(&ckpt), "--dataset", s(&f.data), "--style", s(&f.style)]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = stdout.lines().filter(|l| !l.trim().is_empty()).collect();
    assert_eq!(rows.len(), 1, "{stdout}");
    let cells: Vec<&str> = rows[0].split('\t').collect();
    assert!(cells.contains(&"Stereo-FA-IV"), "{stdout}");
    let numbers: Vec<f64> = cells.iter().filter_map(|c| c.parse::<f64>().ok()).collect();
    assert!(numbers.len() >= 3 && numbers.iter().all(|v| v.is_finite() && *v >= 0.0), "{stdout}");
    assert!(o.join("metrics.tsv").exists());
}

#[test]
fn ablate_default_variants_gives_three_rows() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().join("ablate");
    let out = run_ok(&[
        "ablate",
        "--out",
        s(&o),
        "--config",
        s(&f.config),
        "--dataset",
        s(&f.data),
        "--style",
        s(&f.style),
        "--disparity-ckpt",
        s(&f.disparity),
    ]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = stdout.lines().filter(|l| !l.trim().is_empty() && !l.starts_with("variant")).collect();
    assert_eq!(rows.len(), 3, "{stdout}");
    for (row, name) in rows.iter().zip(["SingleImage-IV", "CON-IV", "Stereo-FA-IV"]) {
        assert!(row.split('\t').any(|c| c == name), "{row}");
    }
    assert_eq!(fs::read_to_string(o.join("ablation.tsv")).unwrap(), stdout);
}

#[test]
fn replay_reproduces_training_and_export() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let t = dir.path().join("train");
    let ckpt = train_single(&t);
    let e = dir.path().join("export");
    run_ok(&["export", "--out", s(&e), "--ckpt", s(&ckpt), "--dataset", s(&f.data)]);
    assert!(e.join("gates").is_dir() && e.join("inconsistency").is_dir() && e.join("stylized").is_dir());

    for (orig, again) in [(&t, dir.path().join("train2")), (&e, dir.path().join("export2"))] {
        let out = run_ok(&["replay", "--manifest", s(&orig.join("manifest.json")), "--out", s(&again)]);
        let stdout = String::from_utf8(out.stdout).unwrap();
        assert!(stdout.contains("replay reproduced") && !stdout.contains("differ"), "{stdout}");
        let (mut a, mut b) = (hash_tree(orig), hash_tree(&again));
        a.remove(Path::new("manifest.json"));
        b.remove(Path::new("manifest.json"));
        assert_eq!(a, b);
    }
}

#[test]
fn replay_detects_a_changed_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    run_ok(&["make-toy-dataset", "--out", s(&d), "--n", "1", "--size", "8x8", "--max-disparity", "1"]);
    let m = d.join("manifest.json");
    let text = fs::read_to_string(&m).unwrap();
    let pos = text.find("\"sha256\": \"").unwrap() + 11;
    let mut tampered = text.clone();
    let c = if &text[pos..pos + 1] == "0" { "1" } else { "0" };
    tampered.replace_range(pos..pos + 1, c);
    fs::write(&m, tampered).unwrap();
    let out = run(&["replay", "--manifest", s(&m), "--out", s(&dir.path().join("again"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("differ"));
}

#[test]
fn commands_do_not_touch_their_inputs() {
    let f = fixture();
    let before = hash_tree(&f.inputs);
    let disparity_before = fs::read(&f.disparity).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_single(&dir.path().join("train"));
    let ckpt_before = fs::read(&ckpt).unwrap();
    run_ok(&["evaluate", "--out", s(&dir.path().join("ev")), "--ckpt", s(&ckpt), "--dataset", s(&f.data), "--style", s(&f.style), "--split", "all"]);
    run_ok(&["export", "--out", s(&dir.path().join("ex")), "--ckpt", s(&ckpt), "--dataset", s(&f.data), "--split", "train"]);
    run_ok(&[
        "train",
        "--out",
        s(&dir.path().join("resumed")),
        "--ckpt",
        s(&ckpt),
        "--dataset",
        s(&f.data),
        "--style",
        s(&f.style),
    ]);
    assert_eq!(hash_tree(&f.inputs), before);
    assert_eq!(fs::read(&f.disparity).unwrap(), disparity_before);
    assert_eq!(fs::read(&ckpt).unwrap(), ckpt_before);
}
