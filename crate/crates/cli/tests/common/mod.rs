//! Scripted scenarios shared by the CLI test targets.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cotrel::backend::ScriptEntry;
use cotrel::corpus::{Dataset, NormalizedRecord, Sample, ScriptedTruth, Split};
use cotrel::reasoner::ReasoningTrace;
use cotrel::taxonomy::{SqId, SubQuestionBank};

/// Injected behaviour of one synthetic sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    /// Direct right, multi-step wrong, same reasoning path.
    Unstable,
    /// Direct right, multi-step wrong on a divergent path; a realigned chain fixes it.
    Recover,
    /// Like `Recover`, but the realigned chain still answers wrongly.
    Persist,
    Stable,
    BothWrong,
    DirectWrong,
}

impl Kind {
    pub fn direct_correct(self) -> bool {
        !matches!(self, Kind::BothWrong | Kind::DirectWrong)
    }

    pub fn multi_correct(self) -> bool {
        matches!(self, Kind::Stable | Kind::DirectWrong)
    }

    pub fn injected_fp(self) -> bool {
        matches!(self, Kind::Unstable | Kind::Persist)
    }
}

const NOUNS: &[&str] = &[
    "apple", "kite", "bread", "violin", "candle", "ladder", "kettle", "helmet", "pillow", "anchor", "guitar",
    "lemon", "saddle", "teapot", "banjo", "compass", "lantern", "hammer", "carrot", "parrot", "tulip", "wallet",
    "rocket", "donut", "mitten",
];

pub struct Scenario {
    pub samples: Vec<Sample>,
    pub kinds: Vec<Kind>,
    pub script: Vec<ScriptEntry>,
}

fn entry(sample_id: &str, stage: &str, text: impl Into<String>) -> ScriptEntry {
    ScriptEntry {
        sample_id: sample_id.into(),
        stage_key: stage.into(),
        response_text: text.into(),
    }
}

/// The 50-sample detector oracle: 8 unstable, 5 recovering and 4 persisting
/// TDFM samples of type SP, then 33 non-TDFM samples over TR, GL and SP
/// (27 right in both modes, 3 wrong in both, 3 wrong only when direct).
pub fn fp_oracle() -> Scenario {
    let mut kinds = Vec::new();
    kinds.extend([Kind::Unstable; 8]);
    kinds.extend([Kind::Recover; 5]);
    kinds.extend([Kind::Persist; 4]);
    for i in 0..33 {
        kinds.push(match i % 11 {
            9 => Kind::BothWrong,
            10 => Kind::DirectWrong,
            _ => Kind::Stable,
        });
    }
    let bank = SubQuestionBank::builtin();
    let mut samples = Vec::new();
    let mut script = Vec::new();
    for (i, kind) in kinds.iter().copied().enumerate() {
        let id = format!("syn-{i:03}");
        let qt = if i < 17 { "SP" } else { ["TR", "GL", "SP"][i % 3] };
        let gold = NOUNS[i % NOUNS.len()];
        let wrong = NOUNS[(i + 7) % NOUNS.len()];
        let question = match qt {
            "TR" => format!("At what time of day would someone use the {gold}?"),
            "GL" => format!("In which city was this {gold} photographed?"),
            _ => format!("What is the condition of the {gold} shown?"),
        };
        let rationale = match (qt, kind) {
            ("TR", _) => "1. The clock shows noon.\n2. People usually eat then.",
            ("GL", _) => "1. A street sign is in view.\n2. Such signs are typically local.",
            (_, Kind::Recover | Kind::Persist) => {
                "1. I focus on one object.\n2. Its colour is bright.\n3. Objects like this are usually kept dry."
            }
            _ => "1. I focus on one object.\n2. Objects like this are usually kept dry.",
        };
        let direct_ans = if kind.direct_correct() { gold } else { wrong };
        let multi_ans = if kind.multi_correct() { gold } else { wrong };
        script.push(entry(&id, "classify", qt));
        script.push(entry(&id, "direct", format!("{rationale}\nANSWER: {direct_ans}")));
        script.push(entry(&id, "final", format!("ANSWER: {multi_ans}")));
        if matches!(kind, Kind::Recover | Kind::Persist) {
            script.push(entry(&id, "realign", "CHAIN: od, cd, kr"));
        }
        if kind == Kind::Recover {
            script.push(entry(&id, "final@od>cd>kr", format!("ANSWER: {gold}")));
        }
        samples.push(Sample {
            sample_id: id,
            dataset: Dataset::Synthetic,
            image_ref: format!("images/syn-{i:03}.jpg"),
            question,
            choices: None,
            gold_answers: vec![gold.into()],
            gold_choice_index: None,
            scripted_truth: Some(ScriptedTruth {
                direct_correct: kind.direct_correct(),
                multistep_correct: kind.multi_correct(),
                injected_fp: kind.injected_fp(),
            }),
        });
    }
    for sq in bank.entries() {
        script.push(entry("*", &format!("sq:{}", sq.id), "Noted; the image is consistent with this step."));
    }
    script.push(entry("*", "realign", "CHAIN: od, kr"));
    script.push(entry(
        "*",
        "analyze",
        "NEW_TYPE: WeatherState | parent: SP | Questions about the weather conditions shown in the image.",
    ));
    Scenario { samples, kinds, script }
}

/// Ten SP samples whose generation-2 proposal drops accuracy from 0.9 to 0.8.
///
/// Generation 1 moves the type from `od>kr` (0.8) to `od>cd>kr` (0.9) via
/// `r-8`. Generation 2 realigns `r-9` onto `od>sd>kr`, which fixes `r-9` but
/// breaks `r-0` and `r-1`.
pub fn rollback() -> (Vec<Sample>, Vec<ReasoningTrace>, Vec<ScriptEntry>) {
    let mut samples = Vec::new();
    let mut direct = Vec::new();
    let mut script = Vec::new();
    for i in 0..10 {
        let id = format!("r-{i}");
        let gold = NOUNS[i];
        let wrong = NOUNS[i + 10];
        samples.push(Sample {
            sample_id: id.clone(),
            dataset: Dataset::Synthetic,
            image_ref: format!("images/{id}.jpg"),
            question: format!("What is the condition of the {gold} shown?"),
            choices: None,
            gold_answers: vec![gold.into()],
            gold_choice_index: None,
            scripted_truth: None,
        });
        let mut d = ReasoningTrace::direct_stub(&id, gold);
        d.rationale_raw = match i {
            8 => "I focus on one object.\nIts colour is bright.\nObjects like this are usually kept dry.",
            9 => "I focus on one object.\nThe scene is a kitchen.\nObjects like this are usually kept dry.",
            _ => "I focus on one object.\nObjects like this are usually kept dry.",
        }
        .into();
        d.path_signature = match i {
            8 => chain(&["od", "cd", "kr"]),
            9 => chain(&["od", "sd", "kr"]),
            _ => chain(&["od", "kr"]),
        };
        script.push(entry(&id, "direct", format!("{}\nANSWER: {gold}", d.rationale_raw)));
        direct.push(d);
        let base = if i < 8 { gold } else { wrong };
        script.push(entry(&id, "final", format!("ANSWER: {base}")));
        match i {
            0 | 1 => script.push(entry(&id, "final@od>sd>kr", format!("ANSWER: {wrong}"))),
            8 => {
                script.push(entry(&id, "realign", "CHAIN: od, cd, kr"));
                script.push(entry(&id, "final@od>cd>kr", format!("ANSWER: {gold}")));
                script.push(entry(&id, "final@od>sd>kr", format!("ANSWER: {gold}")));
            }
            9 => {
                script.push(entry(&id, "realign", "CHAIN: od, sd, kr"));
                script.push(entry(&id, "final@od>sd>kr", format!("ANSWER: {gold}")));
            }
            _ => {}
        }
    }
    for sq in SubQuestionBank::builtin().entries() {
        script.push(entry("*", &format!("sq:{}", sq.id), "Noted."));
    }
    (samples, direct, script)
}

pub fn chain(ids: &[&str]) -> Vec<SqId> {
    ids.iter().map(|s| SqId::from(*s)).collect()
}

pub fn jsonl<T: serde::Serialize>(items: impl IntoIterator<Item = T>) -> String {
    items
        .into_iter()
        .map(|i| serde_json::to_string(&i).unwrap() + "\n")
        .collect()
}

/// Corpus file in the synthetic loader's format.
pub fn corpus_jsonl(samples: &[Sample]) -> String {
    jsonl(samples.iter().map(|s| NormalizedRecord::from_sample(s, Split::Val)))
}

/// Writes the oracle corpus and script into `dir/data` and a matching config
/// to `dir/cotrel.toml`; returns the config path.
pub fn write_synthetic_workspace(dir: &Path) -> PathBuf {
    let sc = fp_oracle();
    fs::create_dir_all(dir.join("data")).unwrap();
    fs::write(dir.join("data/synthetic.jsonl"), corpus_jsonl(&sc.samples)).unwrap();
    fs::write(dir.join("data/script.jsonl"), jsonl(&sc.script)).unwrap();
    let cfg = dir.join("cotrel.toml");
    fs::write(
        &cfg,
        r#"run_id = "synthetic"

[data]
dataset = "SYNTHETIC"
paths = ["data/synthetic.jsonl"]

[backend]
kind = "scripted"
model_name = "scripted"
script = "data/script.jsonl"

[reasoning]
parallelism = 4

[refine]
budget = 2
"#,
    )
    .unwrap();
    cfg
}

pub fn cotrel(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cotrel"))
        .arg("--config")
        .arg(config)
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub const PIPELINE: &[&str] = &["ingest", "classify", "reason-direct", "reason-multistep", "detect", "refine", "report"];

/// `init` plus every stage; returns the exit code of each command.
pub fn run_pipeline(config: &Path) -> Vec<(String, i32, String)> {
    let mut out = Vec::new();
    let o = cotrel(config, &["init"]);
    out.push(("init".into(), o.status.code().unwrap_or(-1), stderr(&o)));
    for stage in PIPELINE {
        let o = cotrel(config, &["run", "--stage", stage]);
        out.push((stage.to_string(), o.status.code().unwrap_or(-1), stderr(&o)));
    }
    out
}
