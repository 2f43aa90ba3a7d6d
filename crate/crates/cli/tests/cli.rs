//! End-to-end tests for the `replab` binary: output formats, config
//! precedence, dataset resolution, and the exit-code contract.

use std::process::{Command, Output};

use replab_core::data::Dataset;
use replab_core::Tensor;

const BIN: &str = env!("CARGO_BIN_EXE_replab");

fn replab(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("DATA_DIR")
        .output()
        .expect("binary should spawn")
}

fn stdout_str(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("stdout should be UTF-8")
}

fn stderr_str(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).expect("stderr should be UTF-8")
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("process should exit, not be signalled")
}

#[test]
fn train_synthetic_smoke() {
    let out = replab(&[
        "train",
        "--arch",
        "8,6,3",
        "--synthetic",
        "60",
        "--epochs",
        "2",
        "--repeats",
        "2",
        "--batch-size",
        "10",
        "--eta",
        "0.05",
        "--seed",
        "7",
    ]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr_str(&out));
    let csv = stdout_str(&out);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,repeat,seed,test_acc,train_loss");
    // header + epochs * repeats rows
    assert_eq!(lines.len(), 1 + 2 * 2);
    for row in &lines[1..] {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 5);
        fields[0].parse::<usize>().expect("epoch");
        fields[1].parse::<usize>().expect("repeat");
        fields[2].parse::<u64>().expect("seed");
        let acc: f64 = fields[3].parse().expect("test_acc");
        assert!((0.0..=1.0).contains(&acc));
        let loss: f64 = fields[4].parse().expect("train_loss");
        assert!(loss.is_finite() && loss >= 0.0);
    }
    let log = stderr_str(&out);
    assert!(log.contains("config "), "fingerprint line missing: {log}");
    assert!(log.contains("test_acc"), "summary lines missing: {log}");
}

#[test]
fn train_matches_golden_csv() {
    let args = [
        "train",
        "--arch",
        "12,8,4",
        "--synthetic",
        "100",
        "--epochs",
        "2",
        "--repeats",
        "2",
        "--batch-size",
        "10",
        "--eta",
        "0.05",
        "--seed",
        "11",
    ];
    let golden = include_str!("golden/train_smoke.csv");
    let out = replab(&args);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr_str(&out));
    assert_eq!(stdout_str(&out), golden, "training CSV drifted from the golden fixture");

    // Worker parallelism must not change a single byte of the output.
    let mut jobs2: Vec<&str> = args.to_vec();
    jobs2.extend_from_slice(&["--jobs", "2"]);
    let out2 = replab(&jobs2);
    assert_eq!(exit_code(&out2), 0);
    assert_eq!(stdout_str(&out2), golden);
}

#[test]
fn train_out_flag_writes_file_instead_of_stdout() {
    let dir = tempfile::tempdir().expect("tempdir");
    let path = dir.path().join("run.csv");
    let out = replab(&[
        "train",
        "--arch",
        "6,4,2",
        "--synthetic",
        "20",
        "--epochs",
        "1",
        "--repeats",
        "1",
        "--batch-size",
        "5",
        "--seed",
        "3",
        "--out",
        path.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr_str(&out));
    assert!(stdout_str(&out).is_empty(), "CSV should go to the file, not stdout");
    let written = std::fs::read_to_string(&path).expect("out file");
    assert!(written.starts_with("epoch,repeat,seed,test_acc,train_loss\n"));
    assert_eq!(written.lines().count(), 2);
}

#[test]
fn config_file_supplies_settings_and_flags_override() {
    let dir = tempfile::tempdir().expect("tempdir");
    let path = dir.path().join("run.cfg");
    std::fs::write(
        &path,
        "# tiny smoke settings\narch = 6,4,2\nepochs = 3\nrepeats = 1\nbatch_size = 5\nsynthetic = 20\nseed = 9\n",
    )
    .unwrap();

    // File alone: three epochs of rows.
    let out = replab(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr_str(&out));
    assert_eq!(stdout_str(&out).lines().count(), 1 + 3);

    // A flag outranks the same key in the file.
    let out = replab(&["train", "--config", path.to_str().unwrap(), "--epochs", "1"]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr_str(&out));
    assert_eq!(stdout_str(&out).lines().count(), 1 + 1);
}

#[test]
fn config_file_rejects_unknown_key_with_line_number() {
    let dir = tempfile::tempdir().expect("tempdir");
    let path = dir.path().join("bad.cfg");
    std::fs::write(&path, "epochs = 1\nbogus_knob = 7\n").unwrap();
    let out = replab(&["train", "--config", path.to_str().unwrap(), "--synthetic", "10"]);
    assert_eq!(exit_code(&out), 1);
    let log = stderr_str(&out);
    assert!(log.contains("bogus_knob"), "should name the key: {log}");
    assert!(log.contains(":2:"), "should cite the line: {log}");
}

#[test]
fn usage_errors_exit_one() {
    let out = replab(&["train", "--no-such-flag"]);
    assert_eq!(exit_code(&out), 1);

    let out = replab(&["train", "--normaliser", "bogus", "--synthetic", "10"]);
    assert_eq!(exit_code(&out), 1);
    assert!(stderr_str(&out).contains("bogus"));

    // No --data, no --synthetic, and DATA_DIR scrubbed from the environment.
    let out = replab(&["train", "--epochs", "1"]);
    assert_eq!(exit_code(&out), 1);
    assert!(stderr_str(&out).contains("DATA_DIR"));
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(exit_code(&replab(&["--help"])), 0);
    assert_eq!(exit_code(&replab(&["--version"])), 0);
    assert_eq!(exit_code(&replab(&["train", "--help"])), 0);
}

#[test]
fn missing_dataset_path_exits_three() {
    let out = replab(&["train", "--data", "/no/such/dir", "--epochs", "1"]);
    assert_eq!(exit_code(&out), 3);
    let log = stderr_str(&out);
    assert!(log.contains("error:"), "should report the failure: {log}");
}

#[test]
fn verify_all_suites_pass_and_exit_zero() {
    let dir = tempfile::tempdir().expect("tempdir");
    let csv_path = dir.path().join("trials.csv");
    let out = replab(&[
        "verify",
        "--trials",
        "5",
        "--seed",
        "3",
        "--out",
        csv_path.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr_str(&out));
    let text = stdout_str(&out);
    for name in ["affine", "batched", "conv", "attention", "lr_policy"] {
        assert!(text.contains(&format!("suite {name}")), "missing suite {name}: {text}");
    }
    assert_eq!(text.matches("PASS").count(), 5, "all five suites should pass: {text}");
    assert!(!text.contains("FAIL"));

    let csv = std::fs::read_to_string(&csv_path).expect("trial csv");
    assert!(csv.starts_with("kind,B,n,eta,residual,diag_mean,offdiag_norm\n"));
    assert!(csv.lines().count() > 5);
}

#[test]
fn verify_single_suite_with_impossible_tolerance_exits_two() {
    let out = replab(&["verify", "--suite", "affine", "--trials", "3", "--tol", "1e-300"]);
    assert_eq!(exit_code(&out), 2);
    assert!(stdout_str(&out).contains("FAIL"));
}

#[test]
fn verify_unknown_suite_is_usage_error() {
    let out = replab(&["verify", "--suite", "nonsense"]);
    assert_eq!(exit_code(&out), 1);
    assert!(stderr_str(&out).contains("nonsense"));
}

#[test]
fn clouds_emits_one_row_per_point() {
    let out = replab(&["clouds", "--normaliser", "rmsnorm", "--n", "40", "--seed", "2"]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr_str(&out));
    let csv = stdout_str(&out);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "input_x,input_y,output_x,output_y");
    assert_eq!(lines.len(), 1 + 40);
    let dim = 2.0_f64;
    for row in &lines[1..] {
        let vals: Vec<f64> = row.split(',').map(|v| v.parse().expect("float field")).collect();
        assert_eq!(vals.len(), 4);
        let r = (vals[2] * vals[2] + vals[3] * vals[3]).sqrt();
        assert!((r - dim.sqrt()).abs() < 1e-6, "rmsnorm radius {r}");
    }
}

#[test]
fn clouds_requires_a_normaliser() {
    let out = replab(&["clouds", "--n", "5"]);
    assert_eq!(exit_code(&out), 1);
    assert!(stderr_str(&out).contains("normaliser"));
}

#[test]
fn sweep_reports_grid_rows_and_slope() {
    let out = replab(&[
        "sweep",
        "--kind",
        "width",
        "--grid",
        "8,16",
        "--arch",
        "8,8,3",
        "--synthetic",
        "60",
        "--epochs",
        "1",
        "--repeats",
        "2",
        "--batch-size",
        "10",
        "--seed",
        "3",
    ]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr_str(&out));
    let csv = stdout_str(&out);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "grid_value,accuracy_mean,accuracy_se");
    assert_eq!(lines.len(), 1 + 2);
    assert!(lines[1].starts_with("8,"));
    assert!(lines[2].starts_with("16,"));
    let log = stderr_str(&out);
    assert!(log.contains("slope"), "slope report missing: {log}");
}

#[test]
fn sweep_without_kind_is_usage_error() {
    let out = replab(&["sweep", "--grid", "8,16", "--synthetic", "10"]);
    assert_eq!(exit_code(&out), 1);
    assert!(stderr_str(&out).contains("kind"));
}

#[test]
fn patchnorm_train_smoke() {
    let out = replab(&[
        "patchnorm-train",
        "--preset",
        "reduce-net",
        "--synthetic",
        "8",
        "--epochs",
        "1",
        "--repeats",
        "1",
        "--batch-size",
        "4",
        "--seed",
        "5",
    ]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr_str(&out));
    let csv = stdout_str(&out);
    assert_eq!(csv.lines().count(), 1 + 1);
    assert!(stderr_str(&out).contains("patchnorm_affine"));
    assert!(stderr_str(&out).contains("reduce-net"));
}

/// Fabricate a minimal on-disk CIFAR-10 layout and train through `DATA_DIR`.
#[test]
fn data_dir_env_var_locates_the_dataset() {
    let dir = tempfile::tempdir().expect("tempdir");
    let per_batch = 4;
    for (i, name) in [
        "data_batch_1.bin",
        "data_batch_2.bin",
        "data_batch_3.bin",
        "data_batch_4.bin",
        "data_batch_5.bin",
        "test_batch.bin",
    ]
    .iter()
    .enumerate()
    {
        let mut features = Vec::with_capacity(per_batch * 3072);
        let mut labels = Vec::with_capacity(per_batch);
        for s in 0..per_batch {
            let fill = ((i * per_batch + s) % 17) as f64 / 16.0;
            features.extend(std::iter::repeat_n(fill, 3072));
            labels.push((i + s) % 10);
        }
        let ds = Dataset::new(
            Tensor::new(&[per_batch, 3072], features).unwrap(),
            labels,
            10,
        )
        .unwrap();
        ds.write_cifar_layout(&dir.path().join(name)).unwrap();
    }

    let out = Command::new(BIN)
        .args([
            "train",
            "--arch",
            "3072,4,10",
            "--epochs",
            "1",
            "--repeats",
            "1",
            "--batch-size",
            "5",
            "--seed",
            "1",
        ])
        .env("DATA_DIR", dir.path())
        .output()
        .expect("binary should spawn");
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr_str(&out));
    assert_eq!(stdout_str(&out).lines().count(), 1 + 1);
    assert!(stderr_str(&out).contains(dir.path().to_str().unwrap()));
}
