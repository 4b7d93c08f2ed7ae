use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL_TRAIN: &str = "\
# small blobs run
algorithm = fedavg
m = 4
c = 0.5
rounds = 3
batch = 8
n_train = 200
n_test = 50
dim = 12
classes = 3
hidden = 10
";

fn dbcl(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dbcl"));
    cmd.args(args).env_remove("DBCL_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn train_twice_gives_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "mlp_blobs.cfg", SMALL_TRAIN);
    let mut outputs = Vec::new();
    for name in ["a.jsonl", "b.jsonl"] {
        let out = dir.path().join(name);
        let o = dbcl(
            &[
                "train",
                "--config",
                &cfg,
                "--seed",
                "7",
                "--set",
                &format!("out={}", out.display()),
            ],
            &[],
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        outputs.push(fs::read(out).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    let text = String::from_utf8(outputs[0].clone()).unwrap();
    assert_eq!(text.lines().count(), 6);
    let last: serde_json::Value = serde_json::from_str(text.lines().last().unwrap()).unwrap();
    assert_eq!(last["phase"], "eval");
    assert_eq!(last["round"], 3);
}

#[test]
fn unknown_key_exits_2_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.cfg", "rounds = 2\nlearning_rate = 0.1\n");
    let o = dbcl(&["train", "--config", &cfg], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));

    let o = dbcl(&["train", "--set", "q=zero"], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("`q`"));
}

#[test]
fn runtime_failures_exit_3() {
    let o = dbcl(
        &[
            "train",
            "--set",
            "dataset=idx:/no/such/images,/no/such/labels",
        ],
        &[],
    );
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn bad_thread_count_is_a_config_error() {
    let o = dbcl(&["verify-theory"], &[("DBCL_THREADS", "none")]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn printed_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.cfg", SMALL_TRAIN);
    let o = dbcl(&["train", "--config", &cfg, "--print-config"], &[]);
    assert!(o.status.success());
    let printed = String::from_utf8(o.stdout).unwrap();
    let uncommented: String = SMALL_TRAIN
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| format!("{l}\n"))
        .collect();
    assert_eq!(printed, uncommented);
}

#[test]
fn csv_flattens_training_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.cfg", SMALL_TRAIN);
    let o = dbcl(&["train", "--config", &cfg, "--csv"], &[]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("round,phase,loss,accuracy,bytes_down,bytes_up,wall_ms")
    );
    assert_eq!(lines.count(), 6);
    let o = dbcl(&["attack-gm", "--csv"], &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn verify_theory_reports_all_pass() {
    let o = dbcl(
        &["verify-theory", "--seed", "1", "--set", "trials=2000"],
        &[("DBCL_THREADS", "1")],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let table = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 14);
    assert!(rows.iter().all(|r| r.ends_with("PASS")), "{table}");
}

#[test]
fn attack_reports_are_json_lines() {
    let o = dbcl(
        &[
            "attack-gm",
            "--set",
            "trials=1",
            "--set",
            "gm_iterations=100",
            "--set",
            "gm_restarts=1",
        ],
        &[],
    );
    assert!(o.status.success());
    let modes: Vec<String> = String::from_utf8(o.stdout)
        .unwrap()
        .lines()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["mode"]
                .as_str()
                .unwrap()
                .to_string()
        })
        .collect();
    assert_eq!(modes, ["undefended", "defended"]);

    let o = dbcl(
        &["attack-pia", "--set", "rounds=30", "--set", "n_train=600"],
        &[],
    );
    assert!(o.status.success());
    assert_eq!(String::from_utf8(o.stdout).unwrap().lines().count(), 3);
}
