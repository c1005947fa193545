use std::path::Path;
use std::process::{Command, Output};

use flmarket::murba::{load_checkpoint, MbrModel};
use rand::SeedableRng;

fn flmarket(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flmarket"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

const TINY_TRAIN: &str = r#"
batches = 2
batch_size = 4
epochs = 2
misreport_rounds = 3
seed = 5
budget_range = [1.0, 10.0]
execution = "sequential"

[model]
n = 2
m = 2
hidden = [4]
money_scale = 10.0
privacy_scale = 5.0

[market]
n = 2
"#;

fn train_tiny(dir: &Path, extra: &[&str]) -> Output {
    let cfg = dir.join("train.toml");
    std::fs::write(&cfg, TINY_TRAIN).unwrap();
    let mut args = vec!["train-mbr", "--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    flmarket(&args)
}

#[test]
fn auction_is_deterministic() {
    let args = ["auction", "--mech", "allin", "--n", "10", "--budget", "20", "--seed", "7", "--scenario", "low"];
    let a = flmarket(&args);
    let b = flmarket(&args);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
    let text = stdout(&a);
    assert!(text.starts_with("owner,family,scale,privacy_budget,epsilon,payment\n"));
    assert_eq!(text.lines().filter(|l| l.chars().next().is_some_and(|c| c.is_ascii_digit())).count(), 10);
    assert!(text.contains("err_bound_varopt,"));
    assert!(text.contains("err_bound_biasopt,"));
}

#[test]
fn tiny_budget_reports_no_winners() {
    let o = flmarket(&["auction", "--mech", "allin", "--budget", "0.0001"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("winners,0"));
    assert!(text.contains("err_bound_varopt,inf"));
}

#[test]
fn missing_mechanism_is_a_usage_error() {
    let o = flmarket(&["auction", "--n", "3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"));
    let o = flmarket(&["auction", "--mech", "vickrey"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let o = flmarket(&[
        "auction",
        "--mech",
        "murba",
        "--n",
        "5",
        "--m",
        "5",
        "--checkpoint-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("mbr_n5_m5.mbr"), "{}", stderr(&o));
}

#[test]
fn aggregate_prints_weights_and_bounds() {
    let o = flmarket(&["aggregate", "--eps", "1,2,0", "--aggr", "biasopt"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("2,0,0\n"));
    assert!(text.contains("bias,0.6666666666666667"));
    let o = flmarket(&["aggregate", "--eps", "0,0"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn train_writes_checkpoint_and_log_reproducibly() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let oa = train_tiny(a.path(), &[]);
    assert!(oa.status.success(), "{}", stderr(&oa));
    assert!(train_tiny(b.path(), &[]).status.success());
    for f in ["mbr_n2_m2.mbr", "mbr_n2_m2.mbr.json", "mbr_n2_m2.log.csv"] {
        assert!(a.path().join(f).exists(), "{f}");
    }
    let log_a = std::fs::read_to_string(a.path().join("mbr_n2_m2.log.csv")).unwrap();
    let log_b = std::fs::read_to_string(b.path().join("mbr_n2_m2.log.csv")).unwrap();
    let lines: Vec<&str> = log_a.lines().collect();
    assert_eq!(lines[0], "epoch,lagrangian,err_hat,regret_mean,regret_max,ir_mean,ir_max");
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[1], log_b.lines().nth(1).unwrap());

    // the trained model runs an auction
    let ckpt = a.path().join("mbr_n2_m2.mbr");
    let o = flmarket(&[
        "auction",
        "--mech",
        "murba",
        "--n",
        "2",
        "--m",
        "2",
        "--budget",
        "5",
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let total: f64 = stdout(&o)
        .lines()
        .find_map(|l| l.strip_prefix("total_payment,"))
        .unwrap()
        .parse()
        .unwrap();
    assert!((total - 5.0).abs() < 1e-9);
}

#[test]
fn zero_epochs_saves_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let o = train_tiny(dir.path(), &["--epochs", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (model, meta) = load_checkpoint(&dir.path().join("mbr_n2_m2.mbr")).unwrap();
    assert_eq!(meta.epochs_completed, 0);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let init = MbrModel::new(meta.training.model.clone(), &mut rng).unwrap();
    assert_eq!(model, init);
}

#[test]
fn simulate_is_seeded() {
    let args = ["simulate", "--mech", "allin", "--n", "5", "--budget", "40", "--seed", "3", "--rounds", "4"];
    let a = flmarket(&args);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(a.stdout, flmarket(&args).stdout);
    let text = stdout(&a);
    assert!(text.starts_with("run_id,round,budget,mechanism,aggregator,err_bound,total_payment,accuracy,seed\n"));
    assert_eq!(text.lines().count(), 5);
}

#[test]
fn budget_sweep_row_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sweep.toml");
    std::fs::write(
        &cfg,
        "kind = \"errbound\"\nparameter = \"budget\"\ngrid = [5.0, 10.0, 20.0, 40.0]\nseeds = 10\n\
         pairs = [{ mechanism = \"allin\", aggregator = \"varopt\" }]\n",
    )
    .unwrap();
    let o = flmarket(&["sweep", "--config", cfg.to_str().unwrap(), "--seed", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 45);
    assert_eq!(lines.iter().filter(|l| l.starts_with("data,")).count(), 40);
    assert_eq!(lines.iter().filter(|l| l.starts_with("aggregate,")).count(), 4);
}

#[test]
fn murba_sweep_without_checkpoints_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sweep.toml");
    std::fs::write(
        &cfg,
        "parameter = \"m\"\ngrid = [5.0, 10.0]\nn = 5\n\
         pairs = [{ mechanism = \"murba\", aggregator = \"varopt\" }]\n",
    )
    .unwrap();
    let o = flmarket(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("mbr_n5_m5.mbr"), "{}", stderr(&o));
}

#[test]
fn violation_sweep_has_table_columns() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train_tiny(dir.path(), &[]).status.success());
    let cfg = dir.path().join("sweep.toml");
    std::fs::write(
        &cfg,
        "kind = \"violations\"\nparameter = \"m\"\ngrid = [2.0]\nn = 2\nseeds = 2\nprofiles = 20\n\
         misreport_rounds = 3\npairs = [{ mechanism = \"murba\", aggregator = \"varopt\" }]\n",
    )
    .unwrap();
    let o = flmarket(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    for col in ["regret_mean", "regret_max", "ir_mean", "ir_max"] {
        assert!(header.contains(&col));
    }
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    let idx = header.iter().position(|c| *c == "regret_mean").unwrap();
    assert!(row[idx].parse::<f64>().unwrap() >= 0.0);
}
