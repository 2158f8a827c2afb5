use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const CONFIG: &str = r#"
[dataset.signal]
width = 32
height = 32
structure_kind = "blobs"
object_count_range = [2, 4]
intensity_range = [20.0, 100.0]
seed = 1

[dataset.hazy_psf]
mode = "widefield"
pinhole_au = 30.0
base_sigma = 0.6

[dataset.clean_psf]
mode = "confocal"
pinhole_au = 1.0
base_sigma = 0.3

[dataset.noise]
photon_gain = 1.0
read_sigma = 2.0
seed = 2

[dataset.splits]
train = 3
val = 1
test = 2

[train]
batch_size = 2
patch_size = 32
max_iterations = 4
checkpoint_every = 2
val_batches = 1

[sample]
steps_t = 3
n_samples = 2

[tiling]
tile = 32

[calibration]
n_bins = 8

[evaluation]
k_list = [1, 2]
"#;

struct Fixture {
    dir: tempfile::TempDir,
    config: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("exp.toml");
        let text = format!("{CONFIG}\n[paths]\nworkdir = {:?}\n", dir.path().join("work"));
        std::fs::write(&config, text).unwrap();
        Fixture { dir, config }
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    fn run(&self, args: &[&str]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_hazeflow"));
        cmd.arg("--config").arg(&self.config).args(args);
        for var in ["HAZEFLOW_WORKDIR", "HAZEFLOW_DATASET", "HAZEFLOW_CHECKPOINTS"] {
            cmd.env_remove(var);
        }
        cmd.output().unwrap()
    }
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

/// Exit code plus the single machine-readable error line.
fn failure(out: &Output) -> (i32, String) {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = stderr.lines().filter(|l| l.starts_with("error ")).collect();
    assert_eq!(lines.len(), 1, "stderr:\n{stderr}");
    (out.status.code().unwrap(), lines[0].to_string())
}

fn read_tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().into(), std::fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn full_command_sequence() {
    let f = Fixture::new();
    let s = ok(&f.run(&["simulate"]));
    assert!(s.contains("pairs: 6"), "{s}");
    let s = ok(&f.run(&["train"]));
    let ckpt = s
        .lines()
        .find_map(|l| l.strip_prefix("final checkpoint: "))
        .expect("final checkpoint printed")
        .to_string();
    assert!(Path::new(&ckpt).is_file());

    let out = f.path("pred");
    let s = ok(&f.run(&[
        "predict",
        "--checkpoint",
        &ckpt,
        "--split",
        "test",
        "--samples",
        "3",
        "--seed",
        "9",
        "--out",
        out.to_str().unwrap(),
    ]));
    assert!(s.contains("samples per image: 3"), "{s}");
    let first = read_tree(&out.join("0004_hazy"));
    assert_eq!(first.len(), 5);

    let out2 = f.path("pred2");
    ok(&f.run(&["predict", "--checkpoint", &ckpt, "--samples", "3", "--seed", "9", "--out", out2.to_str().unwrap()]));
    assert_eq!(read_tree(&out2.join("0004_hazy")), first);

    let s = ok(&f.run(&["calibrate", "--predictions", out.to_str().unwrap(), "--out", f.path("cal").to_str().unwrap()]));
    assert!(s.contains("n_bins: 8"), "{s}");
    assert!(f.path("cal/calibration.svg").is_file());

    let s = ok(&f.run(&[
        "evaluate",
        "--predictions",
        out.to_str().unwrap(),
        "--out",
        f.path("eval").to_str().unwrap(),
    ]));
    assert!(s.contains("uplift_db:"), "{s}");
    assert!(s.contains("k=2 psnr="), "{s}");

    let s = ok(&f.run(&["plot", "--input", f.path("work").to_str().unwrap()]));
    assert!(s.contains("loss.svg"), "{s}");
    assert!(f.path("work/manifests/train.json").is_file());
}

#[test]
fn config_errors_exit_with_code_2() {
    let f = Fixture::new();
    let out = Command::new(env!("CARGO_BIN_EXE_hazeflow")).arg("simulate").output().unwrap();
    assert_eq!(failure(&out).0, 2);
    let (code, line) = failure(&f.run(&["simulate", "--override", "tiling.tile=16"]));
    assert_eq!(code, 2);
    assert!(line.starts_with("error code=2 kind=config"), "{line}");
    let (code, _) = failure(&f.run(&["simulate", "--override", "nonsense"]));
    assert_eq!(code, 2);
    ok(&f.run(&["simulate", "--override", "tiling.tile=16", "--override", "tiling.allow_mismatch=true"]));
}

#[test]
fn data_errors_exit_with_code_3() {
    let f = Fixture::new();
    ok(&f.run(&["simulate", "--override", "dataset.splits.train=0", "--override", "dataset.splits.val=0"]));
    let (code, line) = failure(&f.run(&["train"]));
    assert_eq!(code, 3);
    assert!(line.contains("empty train split"), "{line}");
}

#[test]
fn divergence_exits_with_code_4() {
    let f = Fixture::new();
    ok(&f.run(&["simulate"]));
    let (code, line) = failure(&f.run(&[
        "train",
        "--override",
        "train.learning_rate=1e30",
        "--override",
        "train.grad_clip=0.0",
        "--override",
        "train.max_iterations=50",
    ]));
    assert_eq!(code, 4, "{line}");
}

#[test]
fn incompatible_checkpoint_exits_with_code_5() {
    let f = Fixture::new();
    ok(&f.run(&["simulate"]));
    let bogus = f.path("bogus.hzck");
    std::fs::write(&bogus, b"definitely not a checkpoint").unwrap();
    let (code, line) = failure(&f.run(&["predict", "--checkpoint", bogus.to_str().unwrap()]));
    assert_eq!(code, 5);
    assert!(line.contains("kind=incompatible"), "{line}");
}
