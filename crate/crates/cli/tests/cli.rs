use sampo_cli::*;
use sampo_core::gradcheck::{analytic_gradient, Instance};
use sampo_core::Variant;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

fn small_config(bias: &str, gap: f64, extra_train: &str) -> String {
    format!(
        r#"
[corpus]
size = 300
vocab_size = 20
prompt_len = [2, 3]
response_len = [3, 8]
length_bias = "{bias}"
quality_gap = {gap}
seed = 5

[loss]
variant = "DPO"
beta = 0.1
seed = 11

[train]
epochs = 1
batch_size = 16
learning_rate = 0.01
sft_epochs = 1
embed_dim = 8
test_size = 200
max_decode_len = 12
{extra_train}
"#
    )
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn write(&self, name: &str, text: &str) -> PathBuf {
        let p = self.path(name);
        fs::write(&p, text).unwrap();
        p
    }

    fn corpus(&self, config: &Path, name: &str) -> PathBuf {
        let out = self.path(name);
        cmd_gen(config, &out, &GlobalOpts::default(), &mut Vec::new()).unwrap();
        out
    }
}

fn code(r: CmdResult) -> u8 {
    match r {
        Ok(()) => 0,
        Err(e) => e.code,
    }
}

fn listing(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
}

#[test]
fn gen_long_corpus_has_every_triplet_longer() {
    let f = Fixture::new();
    let cfg = f.write("long.toml", &small_config("LONG", 0.0, ""));
    let out = f.path("corpus.jsonl");
    let mut stdout = Vec::new();
    cmd_gen(&cfg, &out, &GlobalOpts::default(), &mut stdout).unwrap();
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 300);
    let text = String::from_utf8(stdout).unwrap();
    assert!(text.contains("fraction chosen longer: 1\n"), "{text}");
}

#[test]
fn gen_is_byte_identical_across_runs() {
    let f = Fixture::new();
    let cfg = f.write("mixed.toml", &small_config("MIXED", 0.5, ""));
    let a = fs::read(f.corpus(&cfg, "a.jsonl")).unwrap();
    let b = fs::read(f.corpus(&cfg, "b.jsonl")).unwrap();
    assert_eq!(a, b);
    let c = f.path("c.jsonl");
    let reseeded = GlobalOpts {
        seed: Some(6),
        ..GlobalOpts::default()
    };
    cmd_gen(&cfg, &c, &reseeded, &mut Vec::new()).unwrap();
    assert_ne!(fs::read(c).unwrap(), a);
}

#[test]
fn malformed_key_is_a_config_error_naming_the_key() {
    let f = Fixture::new();
    let cfg = f.write("bad.toml", "[corpus]\nvocab_sise = 20\n");
    let err = cmd_gen(&cfg, &f.path("out.jsonl"), &GlobalOpts::default(), &mut Vec::new()).unwrap_err();
    assert_eq!(err.code, EXIT_CONFIG);
    assert!(err.to_string().contains("vocab_sise"), "{err}");
    assert!(!f.path("out.jsonl").exists());
}

#[test]
fn infeasible_spec_exits_three() {
    let f = Fixture::new();
    let text = small_config("LONG", 0.0, "").replace("response_len = [3, 8]", "response_len = [4, 4]");
    let cfg = f.write("flat.toml", &text);
    let r = cmd_gen(&cfg, &f.path("out.jsonl"), &GlobalOpts::default(), &mut Vec::new());
    assert_eq!(code(r), EXIT_INFEASIBLE);
    assert_eq!(listing(f.dir.path()), ["flat.toml"]);
}

#[test]
fn zero_learning_rate_leaves_the_checkpoint_unchanged() {
    let f = Fixture::new();
    let cfg = f.write("c.toml", &small_config("MIXED", 0.5, "").replace("learning_rate = 0.01", "learning_rate = 0.0"));
    let corpus = f.corpus(&cfg, "corpus.jsonl");
    let out = f.path("run");
    let mut stdout = Vec::new();
    cmd_train(&cfg, &corpus, &out, None, &GlobalOpts::default(), &mut stdout).unwrap();
    let o = TrainOutputs::in_dir(&out);
    assert_eq!(fs::read(&o.init_ckpt).unwrap(), fs::read(&o.final_ckpt).unwrap());
    let text = String::from_utf8(stdout).unwrap();
    assert!(text.contains("final win rate 0.5000"), "{text}");
    assert!(text.contains("mean decode length"), "{text}");
}

#[test]
fn sampo_and_dpo_agree_on_equal_length_corpus() {
    let f = Fixture::new();
    let cfg = f.write("n.toml", &small_config("NEUTRAL", 0.5, ""));
    let corpus = f.corpus(&cfg, "corpus.jsonl");
    let (a, b) = (f.path("dpo"), f.path("sampo"));
    cmd_train(&cfg, &corpus, &a, Some(Variant::Dpo), &GlobalOpts::default(), &mut Vec::new()).unwrap();
    cmd_train(&cfg, &corpus, &b, Some(Variant::Sampo), &GlobalOpts::default(), &mut Vec::new()).unwrap();
    let (a, b) = (TrainOutputs::in_dir(&a), TrainOutputs::in_dir(&b));
    assert_eq!(fs::read(&a.metrics).unwrap(), fs::read(&b.metrics).unwrap());
    assert_eq!(fs::read(&a.eval).unwrap(), fs::read(&b.eval).unwrap());
    assert_eq!(fs::read(&a.final_ckpt).unwrap(), fs::read(&b.final_ckpt).unwrap());
}

#[test]
fn train_reruns_are_byte_identical() {
    let f = Fixture::new();
    let cfg = f.write("m.toml", &small_config("MIXED", 0.5, ""));
    let corpus = f.corpus(&cfg, "corpus.jsonl");
    let (a, b) = (f.path("a"), f.path("b"));
    cmd_train(&cfg, &corpus, &a, Some(Variant::Sampo), &GlobalOpts::default(), &mut Vec::new()).unwrap();
    let threads = GlobalOpts {
        threads: Some(3),
        ..GlobalOpts::default()
    };
    cmd_train(&cfg, &corpus, &b, Some(Variant::Sampo), &threads, &mut Vec::new()).unwrap();
    assert_eq!(listing(&a), listing(&b));
    for name in listing(&a) {
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap(), "{name}");
    }
    let metrics = fs::read_to_string(TrainOutputs::in_dir(&a).metrics).unwrap();
    assert_eq!(metrics.lines().next().unwrap(), sampo_core::trainer::STEP_COLUMNS.join(","));
    assert_eq!(metrics.lines().count(), 1 + 300usize.div_ceil(16));
}

#[test]
fn corpus_problems_exit_four() {
    let f = Fixture::new();
    let cfg = f.write("m.toml", &small_config("MIXED", 0.5, ""));
    let corpus = f.corpus(&cfg, "corpus.jsonl");
    let narrow = f.write("narrow.toml", &small_config("MIXED", 0.5, "").replace("vocab_size = 20", "vocab_size = 8"));
    let out = f.path("run");
    let r = cmd_train(&narrow, &corpus, &out, None, &GlobalOpts::default(), &mut Vec::new());
    assert_eq!(code(r), EXIT_CORPUS);

    let broken = f.write("broken.jsonl", "{\"prompt\":[1],\"chosen\":[2]\n");
    let r = cmd_train(&cfg, &broken, &out, None, &GlobalOpts::default(), &mut Vec::new());
    assert_eq!(code(r), EXIT_CORPUS);
    let r = cmd_train(&cfg, &f.path("missing.jsonl"), &out, None, &GlobalOpts::default(), &mut Vec::new());
    assert_eq!(code(r), EXIT_CORPUS);
    assert!(!out.exists());
}

#[test]
fn exploding_run_exits_five_without_outputs() {
    let f = Fixture::new();
    let text = small_config("MIXED", 0.5, "optimizer = \"SGD\"\nwarmup_ratio = 0.0")
        .replace("learning_rate = 0.01", "learning_rate = 1e300");
    let cfg = f.write("nan.toml", &text);
    let corpus = f.corpus(&cfg, "corpus.jsonl");
    let out = f.path("run");
    let err = cmd_train(&cfg, &corpus, &out, None, &GlobalOpts::default(), &mut Vec::new()).unwrap_err();
    assert_eq!(err.code, EXIT_NON_FINITE, "{err}");
    assert!(listing(&out).is_empty(), "{:?}", listing(&out));
}

#[test]
fn gradcheck_passes_and_is_reproducible() {
    let mut stdout = Vec::new();
    cmd_gradcheck(500, &GlobalOpts::default(), &mut stdout).unwrap();
    let text = String::from_utf8(stdout).unwrap();
    for name in ["DPO", "SAMPO", "SANORM", "TOPK", "HYBRID"] {
        assert!(text.lines().any(|l| l.starts_with(name) && l.ends_with("ok")), "{name}: {text}");
    }

    let g = GlobalOpts {
        seed: Some(9),
        ..GlobalOpts::default()
    };
    let (mut a, mut b) = (Vec::new(), Vec::new());
    cmd_gradcheck(1, &g, &mut a).unwrap();
    cmd_gradcheck(1, &g, &mut b).unwrap();
    assert_eq!(a, b);
    assert_eq!(code(cmd_gradcheck(0, &g, &mut Vec::new())), EXIT_CONFIG);
}

#[test]
fn corrupted_gradient_is_caught() {
    let corrupt = |inst: &Instance| {
        let mut g = analytic_gradient(inst);
        g.iter_mut().for_each(|x| *x *= 1.01);
        g
    };
    let g = GlobalOpts {
        seed: Some(17),
        ..GlobalOpts::default()
    };
    let mut stdout = Vec::new();
    let err = cmd_gradcheck_with(20, &g, &corrupt, &mut stdout).unwrap_err();
    assert_eq!(err.code, EXIT_FAILURE);
    let text = String::from_utf8(stdout).unwrap();
    assert!(text.contains("FAIL"), "{text}");
    assert!(text.contains("worst instance key: seed 17 case DPO trial"), "{text}");
}

fn step_csv(rows: &[[f64; 9]]) -> String {
    let mut s = sampo_core::trainer::STEP_COLUMNS.join(",") + "\n";
    for r in rows {
        s += &r.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        s += "\n";
    }
    s
}

#[test]
fn report_reshapes_and_summarizes_by_hand() {
    let f = Fixture::new();
    let steps = f.write(
        "steps.csv",
        &step_csv(&[
            [0.0, 0.0, 0.69, 0.01, 0.5, 0.49, 0.4975, 4.0, 1.5],
            [1.0, 0.0, 0.66, 0.07, 0.6, 0.53, 0.4825, 5.0, 1.25],
            [2.0, 1.0, 0.61, 0.17, 0.9, 0.73, 0.4576, 4.5, 1.0],
        ]),
    );
    let evals = f.write("evals.csv", "step,win_rate,policy_len,ref_len\n0,0.5,4,4\n2,0.625,5.5,4\n");
    let out = f.path("tidy.csv");
    let inputs = vec![format!("dpo run={}", steps.display()), format!("dpo run={}", evals.display())];
    let mut stdout = Vec::new();
    cmd_report(&inputs, &out, None, &mut stdout).unwrap();

    let tidy = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = tidy.lines().collect();
    assert_eq!(lines[0], "run_label,step,series,value");
    assert_eq!(lines.len() - 1, 3 * 7 + 2 * 3);
    assert_eq!(lines[1], "dpo run,0,loss,0.69");
    assert!(lines[1..].iter().all(|l| l.starts_with("dpo run,")));

    let summary = fs::read_to_string(default_summary_path(&out)).unwrap();
    assert_eq!(
        summary,
        "run_label,final_step,final_delta,final_win_rate,final_policy_len\ndpo run,2,0.17,0.625,5.5\n"
    );
    assert!(String::from_utf8(stdout).unwrap().contains("27 tidy rows"));
}

#[test]
fn report_keeps_two_labels_apart() {
    let f = Fixture::new();
    let one = f.write("one.csv", &step_csv(&[[0.0; 9]]));
    let two = f.write("two.csv", &step_csv(&[[0.0; 9], [1.0, 0.0, 0.5, 0.2, 0.0, 0.0, 0.5, 3.0, 0.0]]));
    let out = f.path("tidy.csv");
    let summary = f.path("sums.csv");
    let inputs = vec![format!("A/x={}", one.display()), format!("b-2={}", two.display())];
    cmd_report(&inputs, &out, Some(&summary), &mut Vec::new()).unwrap();
    let tidy = fs::read_to_string(&out).unwrap();
    assert_eq!(tidy.lines().filter(|l| l.starts_with("A/x,")).count(), 7);
    assert_eq!(tidy.lines().filter(|l| l.starts_with("b-2,")).count(), 14);
    let sums = fs::read_to_string(&summary).unwrap();
    assert!(sums.contains("\nA/x,0,0.0,,\n") && sums.contains("\nb-2,1,0.2,,\n"), "{sums}");
}

#[test]
fn malformed_report_input_exits_two() {
    let f = Fixture::new();
    let out = f.path("tidy.csv");
    let bad_header = f.write("a.csv", "x,y\n1,2\n");
    let bad_value = f.write("b.csv", "step,win_rate,policy_len,ref_len\n0,half,4,4\n");
    let short_row = f.write("c.csv", "step,win_rate,policy_len,ref_len\n0,0.5\n");
    for p in [&bad_header, &bad_value, &short_row] {
        let r = cmd_report(&[p.display().to_string()], &out, None, &mut Vec::new());
        assert_eq!(code(r), EXIT_CONFIG, "{}", p.display());
    }
    assert_eq!(code(cmd_report(&[], &out, None, &mut Vec::new())), EXIT_CONFIG);
    assert!(!out.exists());
}

#[test]
fn audit_prints_and_writes_json() {
    let f = Fixture::new();
    let cfg = f.write("s.toml", &small_config("SHORT", 0.5, ""));
    let corpus = f.corpus(&cfg, "corpus.jsonl");
    let out = f.path("audit.json");
    let mut stdout = Vec::new();
    cmd_audit(&corpus, 0.1, 1.0, Some(&out), &mut stdout).unwrap();
    let json: serde_json::Value = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
    assert_eq!(json["n"], 300);
    assert_eq!(json["frac_chosen_longer"], 0.0);
    assert!(json["diff"]["mean"].as_f64().unwrap() < 0.0);
    assert_eq!(serde_json::from_slice::<serde_json::Value>(&stdout).unwrap(), json);
}

#[test]
fn binary_reports_exit_codes() {
    let f = Fixture::new();
    let bin = env!("CARGO_BIN_EXE_sampo");
    let cfg = f.write("m.toml", &small_config("MIXED", 0.5, ""));
    let corpus = f.path("corpus.jsonl");
    let run = |args: &[&str]| Command::new(bin).args(args).output().unwrap();

    let gen = run(&["gen", "--config", cfg.to_str().unwrap(), "--out", corpus.to_str().unwrap()]);
    assert!(gen.status.success(), "{}", String::from_utf8_lossy(&gen.stderr));
    assert!(String::from_utf8_lossy(&gen.stdout).contains("wrote 300 triplets"));

    let bad = f.write("bad.toml", "[loss]\nbeta_ = 1\n");
    let out = run(&["gen", "--config", bad.to_str().unwrap(), "--out", "x.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("beta_"));

    let out = run(&["--quiet", "audit", "--corpus", f.path("nope.jsonl").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));

    let out = run(&["--seed", "3", "gradcheck", "--trials", "5"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 5);

    let out = run(&["train", "--config", cfg.to_str().unwrap(), "--corpus", corpus.to_str().unwrap(), "--out-dir"]);
    assert_eq!(out.status.code(), Some(2));
}
