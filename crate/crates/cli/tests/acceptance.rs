//! Acceptance checks. Prints one `PASS`, `FAIL` or `SKIP` line per criterion
//! and exits non-zero when any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde_json::Value;

use cotrel::backend::{Route, ScriptedBackend};
use cotrel::corpus::{self, Corpus, CorpusError, Split};
use cotrel::cot::{propose_template, Provenance, TemplateRegistry};
use cotrel::fpdetect::DetectConfig;
use cotrel::metrics::{dvoc_dfp, dvoc_dp, voc};
use cotrel::refine::{iterate, Action, RefineContext, RefineState, ReviewQueue, ReviewTrigger};
use cotrel::taxonomy::{AssignmentSource, QuestionType, SubQuestionBank, Taxonomy, TypeAssignment, TypeId};

use common::Kind;

type Outcome = Result<String, String>;

struct Report {
    failed: usize,
}

impl Report {
    fn check(&mut self, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) {
        let t0 = Instant::now();
        let mut res = f();
        let took = t0.elapsed();
        if let (Ok(msg), Some(limit)) = (&res, limit) {
            if took > limit {
                res = Err(format!("{msg}; took {took:.2?}, limit {limit:?}"));
            }
        }
        match res {
            Ok(msg) => println!("PASS {name}: {msg} ({took:.2?})"),
            Err(msg) => {
                self.failed += 1;
                println!("FAIL {name}: {msg} ({took:.2?})");
            }
        }
    }

    fn skip(&self, name: &str, why: &str) {
        println!("SKIP {name}: {why}");
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- VoC table

/// Reference rows: label, multi-step accuracy, VoC (x100), FP count.
/// Every row shares the direct accuracy 0.888.
const TABLE: &[(&str, f64, f64, f64)] = &[
    ("generic stepwise", 0.898, 0.83, 5.0),
    ("structured cot", 0.893, 0.36, 11.0),
    ("6 types", 0.851, -2.62, 28.0),
    ("9 types", 0.905, 1.32, 18.0),
    ("11 types", 0.907, 1.48, 16.0),
    ("11 types, second model", 0.920, 2.47, 22.0),
];
const TABLE_Q: f64 = 0.888;

/// Solves `voc = 100 (P - Q) P r` for the TN rate `r`, then `r = TN / (FP + TN)` for TN.
fn backsolve_tn(p: f64, q: f64, voc_x100: f64, fp: f64) -> f64 {
    let rate = voc_x100 / (100.0 * (p - q) * p);
    fp * rate / (1.0 - rate)
}

fn voc_table() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut int_misses = Vec::new();
    for &(label, p, want, fp) in TABLE {
        let tn = backsolve_tn(p, TABLE_Q, want, fp);
        ensure(tn > 0.0 && tn.is_finite(), || format!("{label}: back-solved TN {tn} not positive"))?;
        let got = voc(p, TABLE_Q, fp, tn).map_err(|e| format!("{label}: {e}"))?;
        let err = (got - want).abs();
        worst = worst.max(err);
        ensure(err <= 0.01, || format!("{label}: voc {got:.4} vs {want} (TN {tn:.3})"))?;
        let rounded = voc(p, TABLE_Q, fp, tn.round()).map_err(|e| e.to_string())?;
        if (rounded - want).abs() > 0.01 {
            int_misses.push(format!("{label} (TN {tn:.2} -> {}: {rounded:.3})", tn.round()));
        }
    }
    let note = if int_misses.is_empty() {
        "every row also matches with integer TN".to_string()
    } else {
        format!("integer TN misses {}", int_misses.join(", "))
    };
    Ok(format!("6 rows, max |err| {worst:.2e}; {note}"))
}

// ------------------------------------------------------------- derivatives

fn oracle_voc(p: f64, q: f64, fp: f64, tn: f64) -> f64 {
    100.0 * (p - q) * p * tn / (fp + tn)
}

fn derivatives() -> Outcome {
    const H: f64 = 1e-4;
    const TOL: f64 = 1e-6;
    let axis: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
    let counts = [1.0, 10.0, 100.0];
    let (mut points, mut zeros, mut worst) = (0usize, 0usize, 0.0f64);
    let close = |fd: f64, an: f64, what: &str, at: String| -> Result<f64, String> {
        if an == 0.0 {
            ensure(fd.abs() <= TOL, || format!("{what} at {at}: analytic 0, finite difference {fd:e}"))?;
            return Ok(0.0);
        }
        let rel = (fd - an).abs() / an.abs();
        ensure(rel <= TOL, || format!("{what} at {at}: analytic {an}, finite difference {fd}, rel {rel:e}"))?;
        Ok(rel)
    };
    for &p in &axis {
        for &q in &axis {
            for &fp in &counts {
                for &tn in &counts {
                    points += 1;
                    let at = format!("P={p} Q={q} FP={fp} TN={tn}");
                    let dp = dvoc_dp(p, q, fp, tn).map_err(|e| e.to_string())?;
                    let dfp = dvoc_dfp(p, q, fp, tn).map_err(|e| e.to_string())?;
                    let fd_p = (oracle_voc(p + H, q, fp, tn) - oracle_voc(p - H, q, fp, tn)) / (2.0 * H);
                    let fd_fp = (oracle_voc(p, q, fp + H, tn) - oracle_voc(p, q, fp - H, tn)) / (2.0 * H);
                    worst = worst.max(close(fd_p, dp, "dVoC/dP", at.clone())?);
                    worst = worst.max(close(fd_fp, dfp, "dVoC/dFP", at.clone())?);

                    // 2P - Q on the tenths grid, exactly.
                    let twice_p_minus_q = (2.0 * p * 10.0).round() as i64 - (q * 10.0).round() as i64;
                    match twice_p_minus_q.signum() {
                        0 => {
                            zeros += 1;
                            ensure(dp.abs() <= 1e-12, || format!("dVoC/dP not zero at P=Q/2 ({at}): {dp}"))?;
                        }
                        s => ensure(dp.signum() == s as f64, || format!("dVoC/dP sign wrong at {at}: {dp}"))?,
                    }
                    ensure((dfp < 0.0) == (p > q), || format!("dVoC/dFP sign wrong at {at}: {dfp}"))?;
                }
            }
        }
    }
    Ok(format!(
        "{points} grid points, max rel err {worst:.2e}, {zeros} points with P=Q/2"
    ))
}

// ---------------------------------------------------------------- CoT suite

fn expected_prefix(qt: &TypeId, types: &[QuestionType]) -> Vec<&'static str> {
    let mut cur = qt.clone();
    loop {
        let t = types.iter().find(|t| t.id == cur).expect("known type");
        match &t.parent {
            Some(p) => cur = p.clone(),
            None => break,
        }
    }
    match cur.as_str() {
        "TR" => vec!["tid"],
        "GL" => vec!["sid"],
        "OLR" => vec!["od", "ev"],
        _ => vec!["od"],
    }
}

fn random_reply(rng: &mut StdRng, ids: &[&str], allow_unknown: bool, min_valid: usize) -> String {
    const UNKNOWN: &[&str] = &["xq", "step9", "colour", "obj", "zz-1"];
    let len = rng.gen_range(min_valid..=7);
    let mut toks: Vec<String> = (0..len).map(|_| ids[rng.gen_range(0..ids.len())].to_string()).collect();
    if allow_unknown && rng.gen_bool(0.3) {
        let at = rng.gen_range(0..=toks.len());
        toks.insert(at, UNKNOWN[rng.gen_range(0..UNKNOWN.len())].into());
    }
    for t in toks.iter_mut() {
        if rng.gen_bool(0.1) {
            *t = t.to_uppercase();
        }
    }
    let sep = [", ", " > ", " ", "; "][rng.gen_range(0..4)];
    let body = toks.join(sep);
    match rng.gen_range(0..3) {
        0 => format!("CHAIN: {body}"),
        1 => format!("Here is my plan.\nchain: [{body}]"),
        _ => body,
    }
}

fn cot_suite() -> Outcome {
    let bank = SubQuestionBank::builtin();
    let ids: Vec<&str> = bank.entries().iter().map(|e| e.id.as_str()).collect();
    let mut tax = Taxonomy::builtin();
    for (name, parent) in [
        ("NightScene", Some("TR")),
        ("Landmark", Some("GL")),
        ("ShelfOrder", Some("OLR")),
        ("DawnLight", Some("NightScene")),
        ("Freeform", None),
    ] {
        tax = tax
            .extend(QuestionType::custom(name, format!("custom type {name}"), parent))
            .map_err(|e| e.to_string())?;
    }
    let types = tax.types().to_vec();
    ensure(types.len() == 16, || format!("expected 16 types, have {}", types.len()))?;

    let mut rng = StdRng::seed_from_u64(0x05ee_dc07);
    let (mut trials, mut retries) = (0usize, 0usize);
    let route = Route::new("trial", "propose");
    for t in &types {
        let prefix = expected_prefix(&t.id, &types);
        for _ in 0..1000 {
            trials += 1;
            let first = random_reply(&mut rng, &ids, true, 0);
            let retry = random_reply(&mut rng, &ids, false, 1);
            let backend = ScriptedBackend::from_entries([
                ("trial", "propose", first.as_str()),
                ("trial", "propose:retry", retry.as_str()),
            ])
            .map_err(|e| e.to_string())?;
            let out = propose_template(&t.id, &[], &bank, &tax, &backend, &route, 2, Some(1), Provenance::BackendProposed)
                .map_err(|e| format!("{}: replies {first:?} / {retry:?}: {e}", t.id))?;
            if backend.calls() > 1 {
                retries += 1;
            }
            let chain: Vec<&str> = out.chain.iter().map(|s| s.as_str()).collect();
            let fail = |why: &str| format!("{}: {why} in {chain:?} from {first:?} / {retry:?}", t.id);
            ensure(chain.starts_with(&prefix), || fail("wrong prefix"))?;
            ensure((2..=4).contains(&chain.len()), || fail("length out of range"))?;
            let mut seen = chain.clone();
            seen.sort_unstable();
            seen.dedup();
            ensure(seen.len() == chain.len(), || fail("duplicate id"))?;
            ensure(chain.iter().all(|c| ids.contains(c)), || fail("id outside the bank"))?;
        }
    }
    Ok(format!("{} types, {trials} proposals, {retries} needed the retry, 0 violations", types.len()))
}

// --------------------------------------------------------------- FP oracle

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir).expect("ledger dir") {
        let e = e.expect("dir entry");
        out.insert(e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).expect("ledger file"));
    }
    out
}

fn run_stages(cfg: &Path, stages: &[&str]) -> Result<(), String> {
    let o = common::cotrel(cfg, &["init"]);
    ensure(o.status.success(), || format!("init failed: {}", common::stderr(&o)))?;
    for stage in stages {
        let o = common::cotrel(cfg, &["run", "--stage", stage]);
        ensure(o.status.success(), || {
            format!("{stage} exited {:?}: {}", o.status.code(), common::stderr(&o))
        })?;
    }
    Ok(())
}

fn fp_oracle() -> Outcome {
    let sc = common::fp_oracle();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path().join("ws");
    let mut ledgers = Vec::new();
    for _ in 0..3 {
        if root.exists() {
            fs::remove_dir_all(&root).map_err(|e| e.to_string())?;
        }
        let cfg = common::write_synthetic_workspace(&root);
        run_stages(&cfg, &common::PIPELINE[..5])?;
        ledgers.push(dir_bytes(&root.join("ledger/synthetic")));
    }
    ensure(ledgers.windows(2).all(|w| w[0] == w[1]), || "ledgers differ between runs".into())?;

    let det: Value = serde_json::from_slice(&ledgers[0]["detection.json"]).map_err(|e| e.to_string())?;
    let count = |k: &str| det[k].as_u64().unwrap_or(u64::MAX);
    let (fp, tdfm, rec) = (count("fp_count"), count("tdfm_count"), count("recovered"));
    ensure((fp, tdfm, rec) == (12, 17, 5), || {
        format!("fp {fp}, tdfm {tdfm}, recovered {rec}; expected 12, 17, 5")
    })?;
    let states: BTreeMap<&str, &str> = det["verdicts"]
        .as_array()
        .ok_or("no verdicts")?
        .iter()
        .map(|v| (v["sample_id"].as_str().unwrap_or(""), v["state"].as_str().unwrap_or("")))
        .collect();
    let (mut tp, mut fpos, mut fneg) = (0, 0, 0);
    for (s, kind) in sc.samples.iter().zip(&sc.kinds) {
        let got = states.get(s.sample_id.as_str()).copied().unwrap_or("NOT_TDFM");
        let want = match kind {
            Kind::Unstable => "FP_MAPPING_UNSTABLE",
            Kind::Persist => "FP_PERSISTENT",
            Kind::Recover => "NONFP_RECOVERED",
            _ => "NOT_TDFM",
        };
        ensure(got == want, || format!("{}: {got}, expected {want}", s.sample_id))?;
        let predicted = matches!(got, "FP_MAPPING_UNSTABLE" | "FP_PERSISTENT");
        let truth = s.scripted_truth.as_ref().is_some_and(|t| t.injected_fp);
        match (predicted, truth) {
            (true, true) => tp += 1,
            (true, false) => fpos += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    let precision = tp as f64 / (tp + fpos) as f64;
    let recall = tp as f64 / (tp + fneg) as f64;
    ensure(precision == 1.0 && recall == 1.0, || format!("precision {precision}, recall {recall}"))?;
    Ok(format!(
        "fp 12, tdfm 17, recovered 5, precision 1.0, recall 1.0; {} ledger files identical over 3 runs",
        ledgers[0].len()
    ))
}

// ---------------------------------------------------------------- rollback

fn rollback() -> Outcome {
    let (samples, direct, script) = common::rollback();
    let corpus = Corpus::new(cotrel::corpus::Dataset::Synthetic, Split::Val, samples).map_err(|e| e.to_string())?;
    let assignments: Vec<TypeAssignment> = corpus
        .samples()
        .iter()
        .map(|s| TypeAssignment {
            sample_id: s.sample_id.clone(),
            question_type: TypeId::from("SP"),
            source: AssignmentSource::Fixture,
            classifier_raw: String::new(),
        })
        .collect();
    let backend = ScriptedBackend::from_script(script).map_err(|e| e.to_string())?;
    let detect = DetectConfig::default();
    let ctx = RefineContext {
        corpus: &corpus,
        direct: &direct,
        assignments: &assignments,
        backend: &backend,
        detect: &detect,
        auto_accept: false,
        analyze: false,
    };
    let mut state = RefineState {
        taxonomy: Taxonomy::builtin(),
        bank: SubQuestionBank::builtin(),
        registry: TemplateRegistry::seeded(&Taxonomy::builtin(), &SubQuestionBank::builtin())
            .map_err(|e| e.to_string())?,
        review: ReviewQueue::default(),
    };
    let gens = iterate(&ctx, &mut state, 2, None).map_err(|e| e.to_string())?;
    ensure(gens.len() == 2, || format!("{} generations ran", gens.len()))?;
    let sp = TypeId::from("SP");
    let acc = |g: usize, after: bool| {
        let r = &gens[g].round;
        let m = if after { &r.per_type_accuracy_after } else { &r.per_type_accuracy_before };
        m.get(&sp).copied().unwrap_or(f64::NAN)
    };
    let rolled: usize = gens.iter().map(|g| g.round.count(Action::RolledBack)).sum();
    ensure(rolled == 1, || format!("{rolled} rolled-back actions"))?;
    ensure(gens[1].round.count(Action::RolledBack) == 1, || "rollback not in generation 2".into())?;

    let gen1 = TemplateRegistry::from_records(gens[1].round.input_registry_snapshot.clone())
        .active(&sp)
        .ok_or("no generation-1 template")?;
    let now = state.registry.active(&sp).ok_or("no active template")?;
    let (a, b) = (
        serde_json::to_vec(&gen1).map_err(|e| e.to_string())?,
        serde_json::to_vec(&now).map_err(|e| e.to_string())?,
    );
    ensure(a == b, || format!("active {} differs from generation-1 {}", now.chain_tag(), gen1.chain_tag()))?;
    ensure(gen1.version > 1, || "generation 1 did not activate a new template".into())?;

    let regressions = state
        .review
        .items()
        .iter()
        .filter(|i| i.trigger == ReviewTrigger::Regression)
        .count();
    ensure(regressions == 1, || format!("{regressions} regression review items"))?;
    Ok(format!(
        "SP {:.1} -> {:.1} in generation 1, {:.1} after generation 2; active v{} {} restored",
        acc(0, false),
        acc(0, true),
        acc(1, true),
        now.version,
        now.chain_tag()
    ))
}

// --------------------------------------------------------------- ingestion

fn fixtures() -> PathBuf {
    PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../core/tests/fixtures"))
}

fn round_trip(name: &str, c: &Corpus, dir: &Path) -> Result<(), String> {
    let path = dir.join(format!("{name}.jsonl"));
    corpus::write_normalized(c, &path).map_err(|e| e.to_string())?;
    let back = corpus::read_normalized(&path).map_err(|e| e.to_string())?;
    ensure(&back == c, || format!("{name}: reloaded corpus differs"))
}

fn ingestion() -> Outcome {
    let fx = fixtures();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let a = corpus::load_aokvqa(fx.join("aokvqa_val.json"), Split::Val).map_err(|e| e.to_string())?;
    let o = corpus::load_okvqa(fx.join("okvqa_questions.json"), fx.join("okvqa_annotations.json"))
        .map_err(|e| e.to_string())?;
    let f = corpus::load_fvqa(fx.join("fvqa_qs.json")).map_err(|e| e.to_string())?;
    let mut sizes = Vec::new();
    for (name, ing) in [("aokvqa", &a), ("okvqa", &o), ("fvqa", &f)] {
        ensure(ing.corpus.len() >= 20, || format!("{name}: only {} records", ing.corpus.len()))?;
        round_trip(name, &ing.corpus, tmp.path())?;
        sizes.push(format!("{name} {}", ing.corpus.len()));
    }

    let rj = fx.join("reject");
    type Check = fn(&CorpusError) -> bool;
    let cases: Vec<(&str, Result<corpus::Ingested, CorpusError>, Check)> = vec![
        (
            "bad choice index",
            corpus::load_aokvqa(rj.join("aokvqa_bad_choice_index.json"), Split::Val),
            |e| matches!(e, CorpusError::InvalidChoiceIndex { .. }),
        ),
        (
            "duplicate id (A-OKVQA)",
            corpus::load_aokvqa(rj.join("aokvqa_duplicate_id.json"), Split::Val),
            |e| matches!(e, CorpusError::DuplicateSampleId { .. }),
        ),
        (
            "missing answers (OK-VQA)",
            corpus::load_okvqa(
                rj.join("okvqa_missing_answers_questions.json"),
                rj.join("okvqa_missing_answers_annotations.json"),
            ),
            |e| matches!(e, CorpusError::NoGoldAnswers { .. }),
        ),
        (
            "duplicate id (OK-VQA)",
            corpus::load_okvqa(
                rj.join("okvqa_duplicate_id_questions.json"),
                rj.join("okvqa_duplicate_id_annotations.json"),
            ),
            |e| matches!(e, CorpusError::DuplicateSampleId { .. }),
        ),
        (
            "missing answer (FVQA)",
            corpus::load_fvqa(rj.join("fvqa_missing_answer.json")),
            |e| matches!(e, CorpusError::MissingField { field: "answer", .. }),
        ),
        (
            "duplicate id (FVQA)",
            corpus::load_fvqa(rj.join("fvqa_duplicate_id.json")),
            |e| matches!(e, CorpusError::DuplicateSampleId { .. }),
        ),
    ];
    let n = cases.len();
    for (name, res, ok) in cases {
        match res {
            Ok(_) => return Err(format!("{name}: fixture accepted")),
            Err(e) => ensure(ok(&e), || format!("{name}: wrong error `{e}`"))?,
        }
    }
    Ok(format!("{} round-tripped; {n} invalid fixtures rejected", sizes.join(", ")))
}

// --------------------------------------------------------------------- e2e

fn end_to_end() -> Outcome {
    let mut reports = Vec::new();
    for _ in 0..2 {
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
        let cfg = common::write_synthetic_workspace(tmp.path());
        for (stage, code, err) in common::run_pipeline(&cfg) {
            ensure(code == 0, || format!("{stage} exited {code}: {}", err.trim()))?;
        }
        let dir = tmp.path().join("reports/synthetic");
        let md = fs::read(dir.join("report.md")).map_err(|e| e.to_string())?;
        let json = fs::read(dir.join("metrics.json")).map_err(|e| e.to_string())?;
        reports.push((md, json));
    }
    let md = String::from_utf8_lossy(&reports[0].0).into_owned();
    ensure(md.contains("| Run | Acc | VoC | FP | TDFM |"), || "summary table header missing".into())?;
    ensure(reports[0] == reports[1], || "report bytes differ between runs".into())?;
    Ok(format!("8 commands exit 0; report.md ({} bytes) and metrics.json identical across workspaces", md.len()))
}

// -------------------------------------------------------------- live smoke

fn live_smoke(val: &str, key_env: &str) -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path();
    let all: Value = serde_json::from_str(&fs::read_to_string(val).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let ten: Vec<Value> = all.as_array().ok_or("A-OKVQA file is not an array")?.iter().take(10).cloned().collect();
    fs::create_dir_all(root.join("data")).map_err(|e| e.to_string())?;
    fs::write(root.join("data/aokvqa_val.json"), serde_json::to_vec(&ten).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let base_url = std::env::var("COTREL_LIVE_BASE_URL").unwrap_or_else(|_| "https://api.openai.com/v1".into());
    let model = std::env::var("COTREL_LIVE_MODEL").unwrap_or_else(|_| "gpt-4o".into());
    let image_root = std::env::var("COTREL_LIVE_IMAGE_ROOT")
        .map(|r| format!("image_root = {r:?}\n"))
        .unwrap_or_default();
    let cfg = root.join("cotrel.toml");
    fs::write(
        &cfg,
        format!(
            "run_id = \"live\"\n\n[data]\ndataset = \"AOKVQA\"\nsplit = \"VAL\"\npaths = [\"data/aokvqa_val.json\"]\n\n\
             [backend]\nkind = \"http\"\nbase_url = {base_url:?}\nmodel_name = {model:?}\napi_key_env = {key_env:?}\n{image_root}\n\
             [reasoning]\nclassify = \"rule\"\nscheme = \"choice\"\n"
        ),
    )
    .map_err(|e| e.to_string())?;
    run_stages(&cfg, &common::PIPELINE[..5])?;
    Ok(format!("10 samples through both modes and detection against {model}"))
}

fn main() {
    let mut r = Report { failed: 0 };
    let second = Some(Duration::from_secs(1));
    r.check("voc-table", second, voc_table);
    r.check("voc-derivatives", second, derivatives);
    r.check("cot-constraints", Some(Duration::from_secs(5)), cot_suite);
    r.check("fp-detector-oracle", Some(Duration::from_secs(10)), fp_oracle);
    r.check("refine-rollback", Some(Duration::from_secs(10)), rollback);
    r.check("ingestion-round-trip", None, ingestion);
    r.check("e2e-offline-pipeline", Some(Duration::from_secs(30)), end_to_end);
    match (std::env::var("COTREL_LIVE_AOKVQA"), std::env::var("OPENAI_API_KEY")) {
        (Ok(val), Ok(_)) => r.check("live-smoke", None, || live_smoke(&val, "OPENAI_API_KEY")),
        _ => r.skip("live-smoke", "set COTREL_LIVE_AOKVQA and OPENAI_API_KEY to run"),
    }
    if r.failed > 0 {
        println!("{} criterion(s) failed", r.failed);
        std::process::exit(1);
    }
}
