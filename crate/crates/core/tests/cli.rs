use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use focusnet_core::data::pnm::read_pnm;

fn focusnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_focusnet")).args(args).output().expect("spawn focusnet")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn dir_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["images", "masks"] {
        let mut names: Vec<_> = fs::read_dir(root.join(sub)).unwrap().map(|e| e.unwrap().path()).collect();
        names.sort();
        for n in names {
            out.push((n.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&n).unwrap()));
        }
    }
    out
}

#[test]
fn synth_writes_pairs_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("ds");
    let o = focusnet(&["synth", "--n", "8", "--size", "64", "--out", p(&root), "--seed", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let first = dir_bytes(&root);
    assert_eq!(first.len(), 16);
    let o = focusnet(&["synth", "--n", "8", "--size", "64", "--out", p(&root), "--seed", "5"]);
    assert!(o.status.success());
    assert_eq!(dir_bytes(&root), first);
}

#[test]
fn synth_below_minimum_size_is_a_parameter_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = focusnet(&["synth", "--n", "2", "--size", "8", "--out", p(&tmp.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("16"));
}

#[test]
fn unknown_config_key_exits_2_and_names_it() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "max_epochs = 1\nlearning_rate = 0.1\n").unwrap();
    let o = focusnet(&["train", "--synth", "4", "--config", p(&cfg), "--out", p(&tmp.path().join("run"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rate"));
    assert_eq!(stderr(&o).lines().count(), 1);
}

#[test]
fn missing_masks_directory_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("ds");
    assert!(focusnet(&["synth", "--n", "3", "--size", "32", "--out", p(&root)]).status.success());
    fs::remove_dir_all(root.join("masks")).unwrap();
    let o = focusnet(&["train", "--data", p(&root), "--out", p(&tmp.path().join("run")), "--set", "max_epochs=1"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn train_eval_predict_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "# small run\nmax_epochs = 6\nbatch_size = 4\ninput_size = 32\nseed = 9\n").unwrap();
    let o = focusnet(&["train", "--synth", "8", "--config", p(&cfg), "--set", "max_epochs=3", "--out", p(&run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["best.fnet", "history.csv", "metrics.csv", "metrics.txt", "config.txt", "stats.txt"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    // Flags override the file and the effective value is echoed.
    let echoed = fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(echoed.contains("max_epochs = 3"));
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 4);
    let best = history
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse::<f64>().unwrap())
        .fold(f64::INFINITY, f64::min);

    let o = focusnet(&["eval", "--checkpoint", p(&run.join("best.fnet")), "--synth", "8", "--config", p(&cfg), "--split", "val"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let loss: f64 = out.split_whitespace().skip_while(|w| *w != "dice_loss").nth(1).unwrap().parse().unwrap();
    assert!((loss - best).abs() <= 1e-6, "{loss} vs {best}");
    assert!(out.contains("threshold 0.5"));
    assert!(out.contains("Method"));

    let img = tmp.path().join("probe.pgm");
    let ds = tmp.path().join("ds");
    assert!(focusnet(&["synth", "--n", "1", "--size", "40", "--out", p(&ds)]).status.success());
    fs::copy(ds.join("images/synth0000.pgm"), &img).unwrap();
    let pred = tmp.path().join("pred");
    let o = focusnet(&["predict", "--checkpoint", p(&run.join("best.fnet")), "--image", p(&img), "--out", p(&pred)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let prob = read_pnm(&pred.join("probe_prob.pgm")).unwrap();
    let mask = read_pnm(&pred.join("probe_mask.pgm")).unwrap();
    assert_eq!((prob.width, prob.height, mask.width, mask.height), (40, 40, 40, 40));
    assert!(mask.data.iter().all(|&v| v == 0 || v == 255));
}

#[test]
fn corrupt_checkpoint_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = tmp.path().join("bad.fnet");
    fs::write(&ck, b"NOPE\x01\x00\x00\x00").unwrap();
    let o = focusnet(&["eval", "--checkpoint", p(&ck), "--synth", "4"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("magic"));
}

#[test]
fn gradcheck_rejects_unknown_op() {
    let o = focusnet(&["gradcheck", "--corrupt", "softmax"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("conv2d"));
}

#[test]
fn corrupted_backward_rule_fails_gradcheck() {
    let o = focusnet(&["gradcheck", "--corrupt", "concat_channels"]);
    assert_ne!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.lines().any(|l| l.starts_with("FAIL") && l.contains("concat_channels")), "{out}");
    assert!(out.lines().any(|l| l.starts_with("PASS") && l.contains("sigmoid")));
}

#[test]
fn schema_lists_every_key() {
    let o = focusnet(&["schema"]);
    assert!(o.status.success());
    let out = stdout(&o);
    for (k, _) in focusnet_core::config::SCHEMA {
        assert!(out.contains(k), "{k}");
    }
    assert!(out.contains("total"));
}
