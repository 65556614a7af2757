use std::path::PathBuf;
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name)
}

fn run(args: &[&std::ffi::OsStr]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bnlrp"))
        .args(args)
        .output()
        .unwrap()
}

macro_rules! bnlrp {
    ($($a:expr),* $(,)?) => { run(&[$(std::ffi::OsStr::new(&$a)),*]) };
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn model(name: &str) -> PathBuf {
    fixture(name).join("model.lrp.json")
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(bnlrp!("--help").status.code(), Some(0));
    assert_eq!(bnlrp!("--version").status.code(), Some(0));
    assert_eq!(bnlrp!("explain", "--help").status.code(), Some(0));
}

#[test]
fn usage_errors_exit_one() {
    let o = bnlrp!("explain");
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error:usage:"), "{}", stderr(&o));
    assert_eq!(
        bnlrp!("info", model("fc1"), "--bogus").status.code(),
        Some(1)
    );
    assert_eq!(
        bnlrp!("render", "x.csv", "-o", "y.ppm", "--norm", "p0")
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        bnlrp!("fuse", model("fc1"), "-o", "y.json", "--policy", "nope")
            .status
            .code(),
        Some(1)
    );
    let o = bnlrp!(
        "explain",
        model("fc1"),
        "x.pgm",
        "--no-fuse-bn",
        "--policy",
        "fuse"
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn missing_files_exit_three() {
    let o = bnlrp!("info", "/nonexistent/model.lrp.json");
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).starts_with("error:io:"), "{}", stderr(&o));
}

#[test]
fn malformed_inputs_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.lrp.json");
    std::fs::write(&bad, "{\"layers\": 3}").unwrap();
    assert_eq!(bnlrp!("info", bad).status.code(), Some(2));

    let csv = tmp.path().join("neg.csv");
    std::fs::write(&csv, "0,1\n-0.5,2\n").unwrap();
    let o = bnlrp!("render", csv, "-o", tmp.path().join("neg.ppm"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error:value:"), "{}", stderr(&o));

    let o = bnlrp!(
        "explain",
        model("fc1"),
        fixture("fc1").join("sample_0.pgm"),
        "--class",
        "10",
        "-o",
        tmp.path()
    );
    assert_eq!(o.status.code(), Some(2));

    // a colour image does not fit a greyscale model
    let o = bnlrp!(
        "explain",
        model("fc1"),
        fixture("cifar").join("sample_0.ppm"),
        "-o",
        tmp.path()
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn explain_writes_csv_ppm_and_trace() {
    let tmp = tempfile::tempdir().unwrap();
    let o = bnlrp!(
        "explain",
        model("cifar"),
        fixture("cifar").join("sample_0.ppm"),
        "-o",
        tmp.path()
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(tmp.path().join("sample_0.relevance.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 32);
    assert!(rows.iter().all(|r| r.split(',').count() == 32));
    assert!(csv.ends_with('\n'));

    let ppm = std::fs::read(tmp.path().join("sample_0.heat.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n32 32\n255\n"));
    assert_eq!(ppm.len(), 13 + 32 * 32 * 3);

    // re-rendering the CSV reproduces the heat-map byte for byte
    let again = tmp.path().join("again.ppm");
    let o = bnlrp!(
        "render",
        tmp.path().join("sample_0.relevance.csv"),
        "-o",
        &again
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(again).unwrap(), ppm);

    let trace: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(tmp.path().join("sample_0.trace.json")).unwrap(),
    )
    .unwrap();
    let sums = trace["sums"].as_array().unwrap();
    let seed = trace["seed_logit"].as_f64().unwrap();
    assert!(seed > 0.0);
    let input: f64 = csv
        .lines()
        .flat_map(|l| l.split(','))
        .map(|v| v.parse::<f64>().unwrap())
        .sum();
    assert!((input - sums[0].as_f64().unwrap()).abs() <= 1e-9 * seed);
}

#[test]
fn explain_defaults_to_the_image_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let img = tmp.path().join("digit.pgm");
    std::fs::copy(fixture("fc2").join("sample_0.pgm"), &img).unwrap();
    let o = bnlrp!("explain", model("fc2"), &img, "--norm", "p99");
    assert!(o.status.success(), "{}", stderr(&o));
    for suffix in ["relevance.csv", "heat.ppm", "trace.json"] {
        assert!(
            tmp.path().join(format!("digit.{suffix}")).exists(),
            "{suffix}"
        );
    }
}

#[test]
fn render_all_zero_is_white_with_warning() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("zero.csv");
    std::fs::write(&csv, "0,0,0\n0,0,0\n").unwrap();
    let out = tmp.path().join("zero.ppm");
    let o = bnlrp!("render", csv, "-o", &out);
    assert!(o.status.success());
    assert!(stderr(&o).contains("warning:"));
    let bytes = std::fs::read(out).unwrap();
    assert_eq!(&bytes[..11], b"P6\n3 2\n255\n");
    assert!(bytes[11..].iter().all(|&b| b == 255));
}

#[test]
fn fuse_writes_model_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("fc3.fused.lrp.json");
    let o = bnlrp!("fuse", model("fc3"), "-o", &out);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(tmp.path().join("fc3.fused.fusion.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report["records"].as_array().unwrap().len(), 2);
    let info = bnlrp!("info", &out);
    assert!(!String::from_utf8_lossy(&info.stdout).contains("batchnorm"));
}

#[test]
fn fuse_warns_about_padded_conv_pre() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("padded.lrp.json");
    let o = bnlrp!("fuse", model("synthetic_conv_pre_padded"), "-o", &out);
    assert!(o.status.success());
    assert!(
        stderr(&o).contains("warning: BN at layer"),
        "{}",
        stderr(&o)
    );
    let o = bnlrp!(
        "fuse",
        model("synthetic_conv_pre_padded"),
        "-o",
        &out,
        "--policy",
        "lower_then_fuse"
    );
    assert!(o.status.success());
    assert!(!stderr(&o).contains("warning"));
}

#[test]
fn info_lists_every_layer() {
    let o = bnlrp!("info", model("conv2"));
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("name:        conv2"));
    assert!(text.contains("batchnorm"));
    assert!(text.contains("placement after_activation"));
    assert!(text.lines().all(|l| l == l.trim_end()));
}

#[test]
fn verify_reports_each_check() {
    let o = bnlrp!(
        "verify",
        model("synthetic_mixed"),
        "--probes",
        "5",
        "--pool-rule",
        "proportional"
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.lines().count() >= 4);
    assert!(text.lines().all(|l| l.starts_with("ok  ")));
}
