use std::path::Path;
use std::process::{Command, Output};

use msds_cli::{Command as Cmd, RunConfig};

fn msds(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msds"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap()
}

#[test]
fn converge_writes_deterministic_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("conv.csv");
    let args = [
        "converge", "--n-grid", "4,8", "--paths", "5", "--seed", "7", "--output",
        out.to_str().unwrap(),
    ];
    let first = msds(&args);
    assert!(first.status.success(), "{}", stderr(&first));
    let text = read(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "# seed=7");
    assert!(lines[1].starts_with("# config="));
    assert_eq!(lines[2], "n,M,paths,l2_error,stderr,ops");
    assert_eq!(lines.len(), 5);
    assert!(lines[3].starts_with("4,8,5,"));
    assert!(lines[3].ends_with(",32"));

    let again = msds(&args);
    assert!(again.status.success());
    assert_eq!(read(&out), text);

    let config = lines[1].trim_start_matches("# config=");
    let parsed = RunConfig::from_config_line(Cmd::Converge, config).unwrap();
    assert_eq!(parsed.n_grid, vec![4, 8]);
    assert_eq!((parsed.paths, parsed.seed), (5, 7));
    assert_eq!(parsed.config_line(), config);
}

#[test]
fn explicit_m_gives_table_ops() {
    let o = msds(&["converge", "--n-grid", "50", "--M", "3540", "--paths", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let row = text.lines().nth(3).unwrap();
    assert!(row.starts_with("50,3540,1,"));
    assert!(row.ends_with(",177000"));
}

#[test]
fn usage_errors_exit_one() {
    let o = msds(&["converge", "--theta", "1.2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("theta must lie in (0,1)"));

    let o = msds(&["converge", "--bogus", "1"]);
    assert_eq!(o.status.code(), Some(1));

    let o = msds(&["converge", "--paths", "many"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("paths"));

    let o = msds(&["price", "--model", "toy"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# small study\nn_grid = 4\npaths = 3\nseed = 5\n").unwrap();
    let o = msds(&["converge", "--config", cfg.to_str().unwrap(), "--paths", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().next(), Some("# seed=5"));
    assert!(text.lines().nth(3).unwrap().starts_with("4,8,2,"));

    std::fs::write(&cfg, "colour = blue\n").unwrap();
    let o = msds(&["converge", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("colour"));
}

#[test]
fn unwritable_destination_fails_without_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("missing").join("x.csv");
    let o = msds(&["lambda-opt", "--output", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn pricing_commands() {
    let o = msds(&["price", "--n", "4", "--M", "50", "--paths", "20"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[2], "method,payoff,n,M,paths,price,stderr,ops,repairs,diverged");
    assert!(lines[3].starts_with("msds,asian,4,50,20,"));
    assert!(lines[4].starts_with("msds,lookback,4,50,20,"));

    let o = msds(&["price", "--variant", "extrapolated", "--theta", "0.2", "--n", "4", "--M", "50", "--paths", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.lines().nth(3).unwrap().starts_with("emsds,asian,4,50,5,"));

    let o = msds(&["euler-baseline", "--epsilon", "0.01", "--n-steps", "1000", "--paths", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.lines().nth(3).unwrap().starts_with("euler,asian,1000,1,5,"));
}

#[test]
fn qq_and_lambda_opt() {
    let o = msds(&["qq", "--n", "8", "--paths", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[2], "component,quantile_rank,value");
    assert_eq!(lines.len(), 3 + 8);

    let o = msds(&["lambda-opt"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let row = text.lines().nth(3).unwrap();
    let lambda: f64 = row.split(',').next().unwrap().parse().unwrap();
    assert!((lambda - 3.196).abs() < 1e-3);
}

#[test]
fn low_theta_warns_but_runs() {
    let o = msds(&["converge", "--theta", "0.25", "--n-grid", "4", "--paths", "2"]);
    assert!(o.status.success());
    assert!(stderr(&o).contains("below 1/3"));
}
