use std::collections::HashSet;
use std::fs;
use std::path::Path;

use spatial_ddc_cli::cli_main;
use tempfile::TempDir;

fn run(out: &Path, args: &[&str]) -> i32 {
    let mut argv = vec!["sddc", "--out", out.to_str().unwrap()];
    argv.extend_from_slice(args);
    cli_main(argv)
}

fn read(path: impl AsRef<Path>) -> String {
    fs::read_to_string(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

fn params_file(dir: &Path) -> String {
    let path = dir.join("params.kv");
    fs::write(
        &path,
        "# fitted values\ntheta_age = -0.031\ntheta_cage1 = -1.067\ntheta_cage2 = -1.463\n\
         theta_fail = -8.046\ntheta_replace = -7.832\ngamma_lag = -0.793\ngamma_fail = -0.265\n",
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

fn synthetic(dir: &Path, cabinets: &str, slots: &str) -> String {
    assert_eq!(run(dir, &["--seed", "7", "gen-synthetic", "--cabinets", cabinets, "--slots", slots]), 0);
    dir.join("synthetic.csv").to_str().unwrap().to_string()
}

#[test]
fn gen_synthetic_counts_locations() {
    let dir = TempDir::new().unwrap();
    let csv = read(synthetic(dir.path(), "50", "8"));
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("location_id,period,cabinet,cage,age_quarters,fail,replace"));
    let ids: HashSet<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ids.len(), 1200);
    assert!(read(dir.path().join("truth.kv")).contains("gamma_lag=-0.8"));
}

#[test]
fn gen_synthetic_is_reproducible() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    assert_eq!(read(synthetic(a.path(), "5", "4")), read(synthetic(b.path(), "5", "4")));
}

#[test]
fn solve_dumps_one_row_per_state() {
    let dir = TempDir::new().unwrap();
    let params = params_file(dir.path());
    assert_eq!(run(dir.path(), &["solve", "--params", &params]), 0);
    let table = read(dir.path().join("policy.tsv"));
    let rows: Vec<&str> = table.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "state\tage_bin\tcage\tfail\tn_lag\tv_keep\tv_replace\tp_replace");
    assert_eq!(rows.len(), 1 + 72);

    assert_eq!(run(dir.path(), &["solve", "--params", &params, "--age-mode", "fine_grid"]), 0);
    let fine = read(dir.path().join("policy.tsv"));
    assert_eq!(fine.lines().filter(|l| !l.starts_with('#')).count(), 1 + 252);
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = TempDir::new().unwrap();
    assert_eq!(run(dir.path(), &["frobnicate"]), 2);
    assert_eq!(run(dir.path(), &["estimate"]), 2);
    assert_eq!(run(dir.path(), &["estimate", "--panel", "x.csv", "--mode", "hybrid"]), 2);
    assert_eq!(run(dir.path(), &["solve", "--params", "p.kv", "--bogus"]), 2);
    assert_eq!(cli_main(["sddc", "--help"]), 0);
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nope.csv");
    assert_eq!(run(dir.path(), &["ingest", "--panel", missing.to_str().unwrap()]), 1);
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "location_id,period,cabinet,cage,age_quarters,fail,replace\na,8,1,3,0,0,0\n").unwrap();
    assert_eq!(run(dir.path(), &["ingest", "--panel", bad.to_str().unwrap()]), 1);
    // Report without fits.
    assert_eq!(run(dir.path(), &["report"]), 1);
}

#[test]
fn ingest_summarizes_the_window() {
    let dir = TempDir::new().unwrap();
    let csv = synthetic(dir.path(), "4", "3");
    assert_eq!(run(dir.path(), &["ingest", "--panel", &csv]), 0);
    let summary = read(dir.path().join("summary.kv"));
    assert!(summary.contains("records=468\n"), "{summary}");
    assert!(summary.contains("locations=36\n"));
    assert!(summary.contains("first_period=8\nlast_period=20\n"));
    assert_eq!(run(dir.path(), &["ingest", "--panel", &csv, "--t-min", "0", "--t-max", "3"]), 0);
    assert!(read(dir.path().join("summary.kv")).contains("records=144\n"));
    assert_eq!(run(dir.path(), &["ingest", "--panel", &csv, "--t-min", "30", "--t-max", "40"]), 1);
}

#[test]
fn moments_outputs_are_byte_identical_across_runs() {
    let dir = TempDir::new().unwrap();
    let csv = synthetic(dir.path(), "6", "4");
    let params = params_file(dir.path());
    let args = ["--seed", "3", "moments", "--panel", &csv, "--params", &params, "--draws", "4"];
    assert_eq!(run(dir.path(), &args), 0);
    let files = ["moments.tsv", "thermal.tsv", "plot_age.tsv", "plot_period.tsv"];
    let first: Vec<String> = files.iter().map(|f| read(dir.path().join(f))).collect();
    assert_eq!(run(dir.path(), &args), 0);
    for (f, before) in files.iter().zip(&first) {
        assert_eq!(&read(dir.path().join(f)), before, "{f}");
    }
    assert!(first[0].starts_with("moment\tdata\tsimulated\tdifference\nm1\t"));
    assert!(first[1].starts_with("cage\tn\tm3\tm4\tintensity\n"));
    assert!(first[2].starts_with("cage\tage_bin\tn\treplace_rate\tfail_rate\n"));
    assert!(first[3].starts_with("period\tcage\tn\treplace_rate\tfail_rate\n8\t0\t"));
}

#[test]
fn simulate_writes_panels_in_the_input_schema() {
    let dir = TempDir::new().unwrap();
    let csv = synthetic(dir.path(), "3", "2");
    let params = params_file(dir.path());
    assert_eq!(
        run(dir.path(), &["simulate", "--panel", &csv, "--params", &params, "--draws", "2", "--horizon", "5"]),
        0
    );
    let draw = read(dir.path().join("sim/draw_0001.csv"));
    assert_eq!(draw.lines().count(), 1 + 18 * 5);
    assert!(dir.path().join("moments.tsv").exists());
    // The simulated panel is itself a valid input.
    let sim_out = dir.path().join("again");
    let path = dir.path().join("sim/draw_0000.csv");
    assert_eq!(run(&sim_out, &["ingest", "--panel", path.to_str().unwrap()]), 0);
}

#[test]
fn estimate_then_report() {
    let dir = TempDir::new().unwrap();
    let out = dir.path();
    let csv = synthetic(out, "12", "4");
    assert_eq!(run(out, &["estimate", "--panel", &csv, "--mode", "baseline"]), 0);
    assert_eq!(
        run(out, &["--seed", "5", "estimate", "--panel", &csv, "--mode", "spatial", "--sims", "3", "--max-iters", "60"]),
        0
    );
    let base = read(out.join("baseline/params.kv"));
    for key in ["mode=baseline", "log_likelihood=", "ll_null=", "n_obs=", "n_params=5", "se_theta_fail="] {
        assert!(base.contains(key), "{key} missing from\n{base}");
    }
    assert!(read(out.join("spatial/params.kv")).contains("se_gamma_lag="));
    assert!(out.join("spatial/policy.tsv").exists());

    assert_eq!(run(out, &["report", "--panel", &csv, "--draws", "3"]), 0);
    let text = read(out.join("comparison.txt"));
    assert!(text.starts_with("lr_statistic = "), "{text}");
    assert!(text.contains("\nlr_df = 2\n"));
    assert!(text.contains("model\tlog_likelihood\tn_params\tn_obs\tll_null\tpseudo_r2\taic\tbic\n"));
    let validation = read(out.join("validation.tsv"));
    assert_eq!(validation.lines().count(), 11);
    assert!(validation.starts_with("moment\tdata_pct\tbaseline_pct\tspatial_pct\noverall\t"));

    // Statistics come from the stored log-likelihoods, not cached values.
    let kv = out.join("baseline/params.kv");
    fs::write(&kv, read(&kv).replace("log_likelihood=", "log_likelihood=-1e6\nstale=")).unwrap();
    assert_eq!(run(out, &["report"]), 0);
    assert_ne!(read(out.join("comparison.txt")), text);
}

#[test]
fn bootstrap_writes_standard_errors() {
    let dir = TempDir::new().unwrap();
    let out = dir.path();
    let csv = synthetic(out, "8", "3");
    assert_eq!(run(out, &["--seed", "2", "bootstrap", "--panel", &csv, "--mode", "baseline", "--reps", "3"]), 0);
    let table = read(out.join("baseline/bootstrap.tsv"));
    let mut lines = table.lines();
    assert_eq!(lines.next(), Some("parameter\testimate\tstd_error\treplicates\trequested"));
    assert_eq!(lines.count(), 5);
    let reps = read(out.join("baseline/bootstrap_replicates.tsv"));
    assert!(reps.starts_with("replicate\tseed\ttheta_age\ttheta_cage1\ttheta_cage2\ttheta_fail\ttheta_replace\n"));
    assert_eq!(run(out, &["bootstrap", "--panel", &csv, "--reps", "0"]), 1);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = TempDir::new().unwrap();
    let params = params_file(dir.path());
    let cfg = dir.path().join("model.kv");
    fs::write(&cfg, "age_mode = fine_grid\nbeta = 0.5\n").unwrap();
    let c = cfg.to_str().unwrap();
    assert_eq!(run(dir.path(), &["--config", c, "solve", "--params", &params]), 0);
    assert_eq!(read(dir.path().join("policy.tsv")).lines().filter(|l| !l.starts_with('#')).count(), 253);
    assert_eq!(run(dir.path(), &["--config", c, "solve", "--params", &params, "--age-mode", "coarse"]), 0);
    assert_eq!(read(dir.path().join("policy.tsv")).lines().filter(|l| !l.starts_with('#')).count(), 73);
    fs::write(&cfg, "beta = 1.5\n").unwrap();
    assert_eq!(run(dir.path(), &["--config", c, "solve", "--params", &params]), 1);
}
