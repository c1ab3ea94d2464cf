use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const SYMPTOMS: [&str; 6] = ["fever", "cough", "sore throat", "headache", "chest pain", "loss of smell"];
const SEVERITIES: [&str; 3] = ["bad", "mild", "severe"];

fn dictag(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dictag"))
        .args(args)
        .env_remove("DICTAG_DATA_ROOT")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn assert_ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}\nstderr: {}", o.status.code(), String::from_utf8_lossy(&o.stderr));
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A small forum-style corpus: "i have <severity> <symptom> for <n> days".
fn forum_conll(n: usize) -> String {
    let mut out = String::new();
    for i in 0..n {
        out.push_str(&format!("#id f{i}\n"));
        let mut row = |tok: &str, tag: &str| out.push_str(&format!("{tok}\t{tag}\n"));
        row("i", "O");
        row("have", "O");
        if i % 3 != 0 {
            row(SEVERITIES[i % 3], "B-SEVERITY");
        }
        for (k, w) in SYMPTOMS[i % SYMPTOMS.len()].split(' ').enumerate() {
            row(w, if k == 0 { "B-SYM" } else { "I-SYM" });
        }
        if i % 2 == 0 {
            row("for", "O");
            row(&(2 + i % 5).to_string(), "B-DURATION");
            row("days", "I-DURATION");
        }
        row("!", "O");
        out.push('\n');
    }
    out
}

/// Unlabeled tweets, each mentioning one or two symptoms.
fn tweet_conll(prefix: &str, n: usize, labeled: bool) -> String {
    let mut out = String::new();
    for i in 0..n {
        out.push_str(&format!("#id {prefix}{i}\n#source tweet\n"));
        let mut push = |tok: &str, tag: &str| {
            if labeled {
                out.push_str(&format!("{tok}\t{tag}\n"));
            } else {
                out.push_str(&format!("{tok}\n"));
            }
        };
        push("covid", "O");
        push("gave", "O");
        push("me", "O");
        for (k, w) in SYMPTOMS[(i * 7) % SYMPTOMS.len()].split(' ').enumerate() {
            push(w, if k == 0 { "B-SYM" } else { "I-SYM" });
        }
        if i % 2 == 1 {
            push("and", "O");
            for (k, w) in SYMPTOMS[(i + 2) % SYMPTOMS.len()].split(' ').enumerate() {
                push(w, if k == 0 { "B-SYM" } else { "I-SYM" });
            }
        }
        out.push('\n');
    }
    out
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let f = Fixture { dir };
        f.write("forum.conll", &forum_conll(12));
        f.write("forum-dev.conll", &forum_conll(6).replace("#id f", "#id d"));
        f.write("tweets.conll", &tweet_conll("t", 10, false));
        f.write("tweets-test.conll", &tweet_conll("x", 6, false));
        f.write("tweets-gold.conll", &tweet_conll("g", 6, true));
        f.write("forum-base.txt", "# forum symptoms\nfever\ncough\nsore throat\nheadache\n");
        f.write("tweet-base.txt", "fever\nchest pain\nloss of smell\ncough\n102 fever\n");
        f.write("severity.txt", "bad\nmild\nsevere\n");
        f.write("drop.txt", "102 fever\n");
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn write(&self, name: &str, text: &str) -> PathBuf {
        let path = self.path(name);
        fs::write(&path, text).unwrap();
        path
    }

    /// A spec with tiny model dimensions; paths are relative to the spec.
    fn spec(&self, name: &str, extra: &str) -> PathBuf {
        let text = format!(
            r#"output_dir = "out-{name}"

[corpora]
train = "forum.conll"

[[dictionaries]]
name = "forum-base"
path = "forum-base.txt"
kind = "SYM"

[[dictionaries]]
name = "severity"
path = "severity.txt"
kind = "SEVERITY"

[model]
hidden_size = 4
static_dim = 6
seed = 3

[train]
batch_size = 4
epochs = 3
seed = 5
{extra}
"#
        );
        self.write(&format!("{name}.toml"), &text)
    }
}

fn dictionary_terms(path: &Path) -> BTreeSet<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

#[test]
fn help_lists_every_flag() {
    let top = stdout(&dictag(&["--help"]));
    for cmd in ["train", "cv", "sweep", "tag", "weak-label", "dict-merge", "eval"] {
        assert!(top.contains(cmd), "{cmd} missing from:\n{top}");
    }
    let train = stdout(&dictag(&["train", "--help"]));
    for flag in ["--spec", "--seed", "--jobs", "--output-dir", "DICTAG_DATA_ROOT"] {
        assert!(train.contains(flag), "{flag} missing from:\n{train}");
    }
}

#[test]
fn eval_of_identical_corpora_is_all_ones() {
    let f = Fixture::new();
    let gold = f.path("forum.conll");
    let out = f.path("eval");
    let o = dictag(&["eval", "--gold", p(&gold), "--predicted", p(&gold), "--output-dir", p(&out)]);
    assert_ok(&o);
    let text = stdout(&o);
    let numbers: Vec<&str> = text
        .split(|c: char| c.is_whitespace() || c == '|')
        .filter(|t| t.contains('.'))
        .collect();
    assert!(numbers.len() >= 3 * 5, "{text}");
    assert!(numbers.iter().all(|n| *n == "1.00"), "{text}");

    let report = read_json(&out.join("report.json"));
    for (label, m) in report["labels"].as_object().unwrap() {
        for k in ["p", "r", "f1"] {
            assert_eq!(m[k].as_f64(), Some(1.0), "{label}.{k}");
        }
    }
    let manifest = read_json(&out.join("manifest.json"));
    assert_eq!(manifest["command"], "eval");
    assert_eq!(manifest["corpus_digests"].as_object().unwrap().len(), 2);
}

#[test]
fn dict_merge_is_symmetric_at_full_fraction() {
    let f = Fixture::new();
    let (a, b) = (f.path("forum-base.txt"), f.path("tweet-base.txt"));
    let ab = f.path("ab");
    let ba = f.path("ba");
    assert_ok(&dictag(&["dict-merge", "--base", p(&a), "--donor", p(&b), "--fraction", "100", "--seed", "1", "--output-dir", p(&ab)]));
    assert_ok(&dictag(&["dict-merge", "--base", p(&b), "--donor", p(&a), "--fraction", "1.0", "--seed", "99", "--output-dir", p(&ba)]));
    let left = dictionary_terms(&ab.join("dictionary.txt"));
    assert_eq!(left, dictionary_terms(&ba.join("dictionary.txt")));
    assert_eq!(left.len(), 7);
    assert_eq!(read_json(&ab.join("manifest.json"))["command"], "dict-merge");
}

#[test]
fn dict_merge_manifests_are_nested_and_pruning_applies() {
    let f = Fixture::new();
    let (a, b, drop) = (f.path("forum-base.txt"), f.path("tweet-base.txt"), f.path("drop.txt"));
    let mut previous: Vec<Value> = Vec::new();
    for pct in ["0", "20", "40", "60", "80", "100"] {
        let out = f.path(&format!("merge-{pct}"));
        let o = dictag(&[
            "dict-merge", "--base", p(&a), "--donor", p(&b), "--fraction", pct, "--seed", "4",
            "--prune-donor", p(&drop), "--output-dir", p(&out),
        ]);
        assert_ok(&o);
        let included = read_json(&out.join("mixture.json"))["included_terms"].as_array().unwrap().clone();
        assert!(included.starts_with(&previous), "{pct}%: {included:?} does not extend {previous:?}");
        assert!(!included.iter().any(|t| t == "102 fever"));
        previous = included;
    }
    // donor minus base minus pruned: chest pain, loss of smell
    assert_eq!(previous.len(), 2);
}

#[test]
fn weak_label_is_reproducible_and_symptom_only() {
    let f = Fixture::new();
    let run = |dir: &str| {
        let out = f.path(dir);
        assert_ok(&dictag(&[
            "weak-label", "--base", p(&f.path("forum-base.txt")), "--donor", p(&f.path("tweet-base.txt")),
            "--fraction", "40", "--seed", "2", "--input", p(&f.path("tweets.conll")), "--output-dir", p(&out),
        ]));
        out
    };
    let (a, b) = (run("wl-a"), run("wl-b"));
    let tagged = fs::read(a.join("tagged.conll")).unwrap();
    assert_eq!(tagged, fs::read(b.join("tagged.conll")).unwrap());
    assert_eq!(fs::read(a.join("mixture.json")).unwrap(), fs::read(b.join("mixture.json")).unwrap());
    let text = String::from_utf8(tagged).unwrap();
    let tags: BTreeSet<&str> = text.lines().filter_map(|l| l.split('\t').nth(1)).collect();
    assert!(tags.is_subset(&["O", "B-SYM", "I-SYM"].into_iter().collect()), "{tags:?}");
    assert!(tags.contains("B-SYM"));
    let stats = &read_json(&a.join("manifest.json"))["extra"]["stats"];
    assert_eq!(stats["sequences"], 10);
}

#[test]
fn weak_label_filter_keeps_matching_sequences() {
    let f = Fixture::new();
    f.write("only-fever.txt", "fever\n");
    let out = f.path("wl-filter");
    assert_ok(&dictag(&[
        "weak-label", "--base", p(&f.path("only-fever.txt")), "--input", p(&f.path("tweets.conll")),
        "--filter", "--output-dir", p(&out),
    ]));
    let stats = &read_json(&out.join("manifest.json"))["extra"]["stats"];
    assert_eq!(stats["sequences"], stats["sequences_with_match"]);
    assert!(stats["sequences"].as_u64().unwrap() < 10);
}

fn diagnostic(o: &Output) -> Value {
    let err = String::from_utf8_lossy(&o.stderr);
    let line = err.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|e| panic!("stderr is not a JSON diagnostic ({e}): {err}"))
}

#[test]
fn usage_errors_exit_with_2() {
    let f = Fixture::new();
    assert_eq!(dictag(&["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(dictag(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        dictag(&["dict-merge", "--base", "a", "--fraction", "30", "--output-dir", "x"]).status.code(),
        Some(2)
    );

    let missing = dictag(&["eval", "--gold", p(&f.path("nope.conll")), "--predicted", p(&f.path("forum.conll")), "--output-dir", p(&f.path("e"))]);
    assert_eq!(missing.status.code(), Some(2));
    let d = diagnostic(&missing);
    assert_eq!(d["error"], "usage");
    assert!(d["message"].as_str().unwrap().contains("nope.conll"));

    let spec = f.spec("typo", "colour = \"red\"");
    let o = dictag(&["train", "--spec", p(&spec)]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(diagnostic(&o)["error"], "usage");

    let spec = f.spec("bad-lr", "learning_rate = -1.0");
    assert_eq!(dictag(&["train", "--spec", p(&spec)]).status.code(), Some(2));

    f.write("no-out.toml", "[corpora]\ntrain = \"forum.conll\"\n");
    assert_eq!(dictag(&["train", "--spec", p(&f.path("no-out.toml"))]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_1() {
    let f = Fixture::new();
    let o = dictag(&[
        "eval", "--gold", p(&f.path("forum.conll")), "--predicted", p(&f.path("forum-dev.conll")),
        "--output-dir", p(&f.path("e")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let d = diagnostic(&o);
    assert_eq!(d["error"], "runtime");
    assert!(d["message"].as_str().unwrap().contains("`f0`"), "{d}");

    f.write("empty.txt", "# nothing\n");
    let o = dictag(&["dict-merge", "--base", p(&f.path("empty.txt")), "--output-dir", p(&f.path("m"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_then_tag_then_rerun_from_snapshot() {
    let f = Fixture::new();
    let spec = f.spec("train", "");
    fs::write(&spec, fs::read_to_string(&spec).unwrap().replace("[corpora]\n", "[corpora]\ndev = \"forum-dev.conll\"\n")).unwrap();
    let o = dictag(&["train", "--spec", p(&spec), "--jobs", "2"]);
    assert_ok(&o);
    let out = f.path("out-train");
    let manifest = read_json(&out.join("manifest.json"));
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["folds"][0]["epochs"].as_array().unwrap().len(), 3);
    assert!(manifest["registry_digest"].is_string());
    assert!(out.join("dev_report.json").is_file());

    // the snapshot reproduces the checkpoint bit for bit
    let again = f.path("again");
    assert_ok(&dictag(&["train", "--spec", p(&out.join("spec.toml")), "--output-dir", p(&again)]));
    assert_eq!(fs::read(out.join("model.ckpt")).unwrap(), fs::read(again.join("model.ckpt")).unwrap());

    // a different seed gives a different model
    let other = f.path("other");
    assert_ok(&dictag(&["train", "--spec", p(&spec), "--seed", "11", "--output-dir", p(&other)]));
    assert_ne!(fs::read(out.join("model.ckpt")).unwrap(), fs::read(other.join("model.ckpt")).unwrap());

    let tagged = f.path("tagged");
    assert_ok(&dictag(&[
        "tag", "--checkpoint", p(&out.join("model.ckpt")), "--input", p(&f.path("forum-dev.conll")),
        "--output-dir", p(&tagged),
    ]));
    let text = fs::read_to_string(tagged.join("tagged.conll")).unwrap();
    let mut prev = "O".to_string();
    for line in text.lines() {
        match line.split('\t').nth(1) {
            Some(tag) => {
                if let Some(c) = tag.strip_prefix("I-") {
                    assert!(prev.ends_with(c), "{prev} -> {tag}");
                }
                prev = tag.to_string();
            }
            None => prev = "O".to_string(),
        }
    }
    assert_ok(&dictag(&[
        "eval", "--gold", p(&f.path("forum-dev.conll")), "--predicted", p(&tagged.join("tagged.conll")),
        "--output-dir", p(&f.path("tag-eval")),
    ]));

    // tagging refuses a checkpoint whose dictionaries changed
    fs::write(f.path("forum-base.txt"), "fever\n").unwrap();
    let o = dictag(&[
        "tag", "--checkpoint", p(&out.join("model.ckpt")), "--input", p(&f.path("forum-dev.conll")),
        "--output-dir", p(&tagged),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn data_root_environment_variable_resolves_spec_paths() {
    let f = Fixture::new();
    let elsewhere = tempfile::tempdir().unwrap();
    let spec = elsewhere.path().join("spec.toml");
    fs::write(&spec, fs::read_to_string(f.spec("env", "")).unwrap()).unwrap();
    let out = f.path("env-out");
    let o = Command::new(env!("CARGO_BIN_EXE_dictag"))
        .args(["train", "--spec", p(&spec), "--output-dir", p(&out)])
        .env("DICTAG_DATA_ROOT", f.dir.path())
        .output()
        .unwrap();
    assert_ok(&o);
    assert!(out.join("model.ckpt").is_file());
}

#[test]
fn cv_writes_one_report_per_fold_and_a_mean() {
    let f = Fixture::new();
    let spec = f.spec("cv", "folds = 3");
    assert_ok(&dictag(&["cv", "--spec", p(&spec)]));
    let out = f.path("out-cv");
    let manifest = read_json(&out.join("manifest.json"));
    let metrics = manifest["metrics"].as_array().unwrap();
    assert_eq!(metrics.len(), 4);
    let fold_mean = metrics[..3].iter().map(|m| m["macro"]["f1"].as_f64().unwrap()).sum::<f64>() / 3.0;
    assert!((metrics[3]["macro"]["f1"].as_f64().unwrap() - fold_mean).abs() < 1e-12);
    assert_eq!(metrics[3]["meta"]["fold"], "mean");
    for k in 0..3 {
        assert!(out.join(format!("fold-{k}/report.json")).is_file());
        assert!(out.join(format!("fold-{k}/model.ckpt")).is_file());
    }
    let sizes: Vec<usize> = {
        let assignment = manifest["fold_assignment"]["assignment"].as_object().unwrap();
        (0..3).map(|k| assignment.values().filter(|v| v.as_u64() == Some(k)).count()).collect()
    };
    assert_eq!(sizes, [4, 4, 4]);
    assert!(fs::read_to_string(out.join("report.txt")).unwrap().contains("mean"));
}

#[test]
fn sweep_emits_six_rows_per_baseline() {
    let f = Fixture::new();
    let spec = f.write(
        "sweep.toml",
        r#"output_dir = "out-sweep"

[corpora]
train = "tweets.conll"
test = "tweets-test.conll"
ground_truth = "tweets-gold.conll"

[model]
hidden_size = 4
static_dim = 6
labels = "symptom"

[train]
batch_size = 5
epochs = 2

[mixture]
seed = 8

[mixture.base]
name = "forum-base"
path = "forum-base.txt"

[mixture.donor]
name = "tweet-base"
path = "tweet-base.txt"
prune = "drop.txt"
"#,
    );
    let o = dictag(&["sweep", "--spec", p(&spec), "--jobs", "4"]);
    assert_ok(&o);
    let out = f.path("out-sweep");
    let tables = read_json(&out.join("sweep.json"));
    let tables = tables.as_array().unwrap();
    assert_eq!(tables.len(), 2);
    assert_eq!(tables[0]["baseline"], "forum-base");
    assert_eq!(tables[1]["baseline"], "tweet-base");
    for t in tables {
        assert_eq!(t["columns"], serde_json::json!(["combined", "forum-base", "tweet-base", "ground-truth"]));
        let rows = t["rows"].as_array().unwrap();
        let fractions: Vec<u64> = rows.iter().map(|r| r["fraction"].as_u64().unwrap()).collect();
        assert_eq!(fractions, [0, 20, 40, 60, 80, 100]);
        assert!(rows.iter().all(|r| r["cells"].as_array().unwrap().len() == 4));
    }
    // identical training labels at 100% from either side
    let a = fs::read(out.join("forum-base-baseline/100/train.conll")).unwrap();
    let b = fs::read(out.join("tweet-base-baseline/100/train.conll")).unwrap();
    assert_eq!(a, b);
    let text = fs::read_to_string(out.join("sweep.txt")).unwrap();
    for row in ["0%", "20%", "40%", "60%", "80%", "100%"] {
        assert_eq!(text.lines().filter(|l| l.starts_with(row)).count(), 2, "{row}\n{text}");
    }
    assert_eq!(read_json(&out.join("manifest.json"))["metrics"].as_array().unwrap().len(), 12 * 4);

    // cell checkpoints carry the mixture dictionary and can tag
    let tagged = f.path("sweep-tag");
    assert_ok(&dictag(&[
        "tag", "--checkpoint", p(&out.join("tweet-base-baseline/040/model.ckpt")), "--input",
        p(&f.path("tweets-test.conll")), "--output-dir", p(&tagged),
    ]));
}

#[test]
fn bare_spec_file_name_resolves_against_working_directory() {
    let f = Fixture::new();
    f.spec("bare", "");
    let o = Command::new(env!("CARGO_BIN_EXE_dictag"))
        .args(["train", "--spec", "bare.toml"])
        .current_dir(f.dir.path())
        .env_remove("DICTAG_DATA_ROOT")
        .output()
        .unwrap();
    assert_ok(&o);
    assert!(f.path("out-bare/model.ckpt").is_file());
}
