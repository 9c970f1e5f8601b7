use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL_MODEL: &[&str] = &[
    "--set",
    "model.dim=16",
    "--set",
    "model.heads=2",
    "--set",
    "model.ffn_dim=32",
    "--set",
    "model.enc_layers=1",
    "--set",
    "model.dec_layers=1",
    "--set",
    "model.max_target_len=16",
    "--set",
    "train.steps=12",
    "--set",
    "train.batch_size=4",
    "--set",
    "train.valid_every=6",
];

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new() -> Env {
        Env {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn runs(&self) -> PathBuf {
        self.dir.path().join("runs")
    }

    fn run(&self, name: &str) -> PathBuf {
        self.runs().join(name)
    }

    fn avts(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_avts"))
            .args(args)
            .env("AVTS_RUNS_DIR", self.runs())
            .current_dir(self.dir.path())
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let out = self.avts(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        out
    }

    /// A few-utterance corpus under `runs/<name>`.
    fn corpus(&self, name: &str, extra: &[&str]) -> String {
        let mut args = vec![
            "gen-data", "--seed", "3", "--name", name, "--set", "data.n_train=12", "--set", "data.n_valid=3", "--set",
            "data.n_test=2",
        ];
        args.extend_from_slice(extra);
        self.ok(&args);
        self.run(name).to_str().unwrap().to_string()
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn gen_data_is_byte_reproducible() {
    let env = Env::new();
    env.ok(&["gen-data", "--preset", "tiny", "--seed", "7", "--name", "x"]);
    env.ok(&["gen-data", "--preset", "tiny", "--seed", "7", "--name", "y"]);
    let (x, y) = (tree(&env.run("x")), tree(&env.run("y")));
    assert!(x.len() > 400);
    assert!(x == y);
    assert!(x.contains_key(Path::new("config.txt")) && x.contains_key(Path::new("manifest.tsv")));
    env.ok(&["gen-data", "--preset", "tiny", "--seed", "8", "--name", "z"]);
    assert!(tree(&env.run("z")) != x);
}

#[test]
fn normal_preset_has_2000_training_utterances() {
    let env = Env::new();
    env.ok(&["gen-data", "--preset", "normal", "--name", "n", "--set", "data.n_valid=0", "--set", "data.n_test=0"]);
    let text = std::fs::read_to_string(env.run("n").join("manifest.tsv")).unwrap();
    assert_eq!(text.lines().filter(|l| l.ends_with("\ttrain")).count(), 2000);
    assert!(std::fs::read_to_string(env.run("n").join("config.txt")).unwrap().contains("data.n_train=2000\n"));
}

#[test]
fn usage_errors_exit_2() {
    let env = Env::new();
    assert_eq!(code(&env.avts(&["gen-data", "--preset", "huge"])), 2);
    assert_eq!(code(&env.avts(&["gen-data", "--set", "data.bogus=1"])), 2);
    assert_eq!(code(&env.avts(&["gen-data", "--set", "nosection=1"])), 2);
    assert_eq!(code(&env.avts(&["gen-data", "--set", "data.n_train=many"])), 2);
    assert_eq!(code(&env.avts(&["no-such-command"])), 2);
    let data = env.corpus("c", &[]);
    assert_eq!(code(&env.avts(&["train", "--data", &data, "--modality", "v", "--distill", "av_full"])), 2);
    assert_eq!(code(&env.avts(&["train", "--data", &data, "--modality", "v", "--distill", "av_full", "--from", "t.ckpt"])), 2);
    assert_eq!(code(&env.avts(&["train", "--data", &data, "--distill", "v_decoder", "--from", "t.ckpt"])), 2);
    assert_eq!(code(&env.avts(&["train", "--data", &data, "--distill", "av_full"])), 2);
    assert_eq!(code(&env.avts(&["distill-train", "--data", &data])), 2);
    assert_eq!(code(&env.avts(&["sweep", "--ckpt", "x", "--data", &data, "--modalities", "av,ears"])), 2);
    assert_eq!(code(&env.avts(&["eval", "--ckpt", "x", "--data", &data, "--clean", "--category", "babble", "--snr", "0"])), 2);
    let cfg = env.dir.path().join("bad.cfg");
    std::fs::write(&cfg, "# comment\ntrain.lr=0.01\ntrain.nonsense=3\n").unwrap();
    let out = env.avts(&["train", "--data", &data, "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.nonsense"));
}

#[test]
fn help_lists_every_flag() {
    let env = Env::new();
    let cmds = [
        ("gen-data", &["--preset", "--seed", "--teacher"][..]),
        ("extract-features", &["--data"]),
        ("cluster-units", &["--data", "--k"]),
        ("pretrain", &["--data", "--from", "--seed"]),
        ("train", &["--data", "--modality", "--distill", "--from", "--seed"]),
        ("teacher", &["--data", "--seed"]),
        ("distill-train", &["--data", "--modality", "--from", "--distill"]),
        ("eval", &["--ckpt", "--data", "--modality", "--clean", "--category", "--snr", "--split"]),
        ("sweep", &["--ckpt", "--snr-grid", "--categories", "--modalities", "--clean", "--plot"]),
        ("plot", &["--csv", "--no-svg"]),
    ];
    for (cmd, flags) in cmds {
        let out = env.ok(&[cmd, "--help"]);
        let text = String::from_utf8_lossy(&out.stdout);
        for f in flags.iter().chain(&["--name", "--config", "--set"]) {
            assert!(text.contains(f), "{cmd} --help lacks {f}");
        }
    }
    let sweep = String::from_utf8_lossy(&env.ok(&["sweep", "--help"]).stdout).to_string();
    assert!(sweep.contains("-10,-5,0,5,10") && sweep.contains("babble,music,speech"));
}

#[test]
fn train_eval_sweep_plot_pipeline() {
    let env = Env::new();
    let data = env.corpus("c", &[]);
    let mut args = vec!["train", "--data", &data, "--name", "m1", "--seed", "5"];
    args.extend_from_slice(SMALL_MODEL);
    env.ok(&args);
    args[4] = "m2";
    env.ok(&args);
    for f in ["best.ckpt", "last.ckpt", "metrics.csv", "config.txt", "log.txt"] {
        assert_eq!(
            std::fs::read(env.run("m1").join(f)).unwrap(),
            std::fs::read(env.run("m2").join(f)).unwrap(),
            "{f}"
        );
    }
    let echo = std::fs::read_to_string(env.run("m1").join("config.txt")).unwrap();
    assert!(echo.contains("model.dim=16\n") && echo.contains("train.seed=5\n") && echo.contains("train.modality=av\n"));

    let ckpt = env.run("m1").join("best.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    let out = env.ok(&["eval", "--ckpt", ckpt, "--data", &data, "--clean", "--set", "eval.beam=2"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[1].starts_with("none,clean,av,"), "{}", rows[1]);
    assert_eq!(std::fs::read_to_string(env.run("eval").join("eval.csv")).unwrap(), text);

    let out = env.ok(&["eval", "--ckpt", ckpt, "--data", &data, "--modality", "a", "--category", "music", "--snr", "-5"]);
    assert!(String::from_utf8(out.stdout).unwrap().lines().nth(1).unwrap().starts_with("music,-5,a,"));

    let out = env.ok(&["sweep", "--ckpt", ckpt, "--data", &data, "--modalities", "av,a", "--set", "eval.beam=2", "--plot"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * 15);
    let out2 = env.ok(&["sweep", "--ckpt", ckpt, "--data", &data, "--modalities", "av,a", "--set", "eval.beam=2", "--name", "s2"]);
    assert_eq!(String::from_utf8(out2.stdout).unwrap(), text);
    assert!(env.run("sweep").join("bleu_vs_snr.svg").is_file());

    let csv = env.run("sweep").join("sweep.csv");
    env.ok(&["plot", "--csv", csv.to_str().unwrap()]);
    let files = tree(&env.run("plot"));
    assert!(files.contains_key(Path::new("bleu_vs_snr.svg")) && files.contains_key(Path::new("babble_av.csv")));

    let out = env.avts(&["eval", "--ckpt", "missing.ckpt", "--data", &data]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.ckpt"));
}

#[test]
fn divergence_exits_1_with_message() {
    let env = Env::new();
    let data = env.corpus("c", &[]);
    let mut args = vec!["train", "--data", &data, "--set", "train.lr=1e300"];
    args.extend_from_slice(SMALL_MODEL);
    let out = env.avts(&args);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
}

#[test]
fn teacher_and_distillation_runs() {
    let env = Env::new();
    let teacher_data = env.corpus("tc", &["--teacher"]);
    assert!(!env.run("tc").join("video").exists());
    let mut args = vec!["teacher", "--data", &teacher_data];
    args.extend_from_slice(SMALL_MODEL);
    env.ok(&args);
    let t = env.run("teacher").join("teacher.ckpt");
    let t = t.to_str().unwrap();
    let data = env.corpus("c", &[]);
    for (name, modality) in [("av", "av"), ("v", "v")] {
        let mut args = vec!["distill-train", "--data", &data, "--from", t, "--modality", modality, "--name", name];
        args.extend_from_slice(SMALL_MODEL);
        env.ok(&args);
        assert!(env.run(name).join("best.ckpt").is_file());
    }
    let log = std::fs::read_to_string(env.run("v").join("log.txt")).unwrap();
    assert!(log.contains("distill v_decoder"), "{log}");
    let mut args = vec!["distill-train", "--data", &data, "--from", "nowhere.ckpt"];
    args.extend_from_slice(SMALL_MODEL);
    assert_eq!(code(&env.avts(&args)), 1);
}

#[test]
fn features_units_and_pretraining() {
    let env = Env::new();
    let data = env.corpus("c", &[]);
    env.ok(&["extract-features", "--data", &data, "--name", "feats"]);
    let feats = env.run("feats");
    let manifest = std::fs::read_to_string(feats.join("manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 1 + 17);
    let mut args = vec!["train", "--data", feats.to_str().unwrap(), "--name", "from-feats", "--seed", "2"];
    args.extend_from_slice(SMALL_MODEL);
    env.ok(&args);
    let echo = std::fs::read_to_string(env.run("from-feats").join("log.txt")).unwrap();
    assert!(echo.contains("best valid CE"));
    // a feature file made for another stack factor is refused
    let mut args = vec!["train", "--data", feats.to_str().unwrap(), "--set", "model.audio_stack=2"];
    args.extend_from_slice(SMALL_MODEL);
    assert_eq!(code(&env.avts(&args)), 1);

    env.ok(&["cluster-units", "--data", &data, "--k", "5", "--set", "units.reduce=true"]);
    let units = env.run("cluster-units");
    assert!(units.join("codebook.avtf").is_file());
    assert_eq!(std::fs::read_dir(units.join("units")).unwrap().count(), 17);

    let mut args = vec!["pretrain", "--data", &data, "--set", "pretrain.n_clusters=4"];
    args.extend_from_slice(SMALL_MODEL);
    env.ok(&args);
    let pre = env.run("pretrain").join("pretrained.ckpt");
    let mut args = vec!["train", "--data", &data, "--from", pre.to_str().unwrap(), "--name", "ft"];
    args.extend_from_slice(SMALL_MODEL);
    env.ok(&args);
    assert!(env.run("ft").join("best.ckpt").is_file());
}
