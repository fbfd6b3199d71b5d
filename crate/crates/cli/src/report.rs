//! `reports/<run_id>/metrics.json` and `report.md`.

use std::fmt::Write as _;
use std::fs;

use cotrel::fpdetect::VerdictState;
use cotrel::metrics::{accuracy, difficulty_report, long_answer_count, render_difficulty_table, render_summary_table};
use cotrel::reasoner::{ReasoningMode, ReasoningTrace};
use cotrel::refine::Action;
use cotrel::{DifficultyReport, Metrics, SummaryRow};
use serde::Serialize;

use crate::error::CliError;
use crate::stages::RunContext;
use crate::workspace::write_atomic;

#[derive(Debug, Clone, Serialize)]
pub struct GenerationMetrics {
    pub generation: u32,
    /// Metrics of the traces this generation's detection adjudicated.
    pub metrics: Metrics,
    /// Multi-step accuracy once the generation's changes were kept or rolled back.
    pub accuracy_after: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReportMetrics {
    pub run_id: String,
    pub config_digest: String,
    pub samples: usize,
    pub primary: Metrics,
    pub generations: Vec<GenerationMetrics>,
    pub difficulty: DifficultyReport,
    pub long_answers_direct: usize,
    pub long_answers_multi: usize,
    pub open_review_items: usize,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("--".into(), |x| format!("{:.1}", x * 100.0))
}

/// Builds both report files from the ledger and returns a short summary.
pub fn write(ctx: &RunContext) -> Result<String, CliError> {
    let cfg = &ctx.cfg;
    let scheme = cfg.reasoning.scheme;
    let tn_def = cfg.refine.tn_definition;
    let corpus = ctx.corpus()?;
    let state = ctx.ws.load_state()?;
    let assignments = ctx.assignments()?;
    let direct = ctx.primary_traces(&corpus, ReasoningMode::Direct)?;
    let multi = ctx.primary_traces(&corpus, ReasoningMode::Multistep)?;
    let det = ctx.detection()?;
    let history = ctx.refine_history()?;

    let compute = |multi: &[ReasoningTrace], d: &cotrel::fpdetect::DetectionReport| {
        Metrics::compute(
            &corpus,
            &direct,
            multi,
            &assignments,
            d.fp_count,
            d.tn_count,
            d.tdfm_count,
            scheme,
            tn_def,
        )
    };
    let primary = compute(&multi, &det)?;
    let mut generations = Vec::new();
    for round in &history.rounds {
        let g = round.generation;
        let (Some(before), Some(after), Some(d)) =
            (history.before.get(&g), history.after.get(&g), history.detections.get(&g))
        else {
            continue;
        };
        generations.push(GenerationMetrics {
            generation: g,
            metrics: compute(before, d)?,
            accuracy_after: accuracy::<f64>(after, &corpus, scheme)?.value,
        });
    }
    let difficulty = difficulty_report(&corpus, &direct, &multi, &assignments, &state.taxonomy, scheme)?;
    let open_review_items = state.review.open_items().count();
    let m = ReportMetrics {
        run_id: cfg.run_id.clone(),
        config_digest: cfg.digest(),
        samples: corpus.len(),
        primary,
        generations,
        difficulty,
        long_answers_direct: long_answer_count(&direct, &corpus),
        long_answers_multi: long_answer_count(&multi, &corpus),
        open_review_items,
    };

    let mut rows = vec![
        SummaryRow {
            label: "Direct".into(),
            accuracy: m.primary.q,
            voc: None,
            fp: None,
            tdfm: None,
        },
        SummaryRow {
            label: "Multi-step".into(),
            accuracy: m.primary.p,
            voc: m.primary.voc,
            fp: Some(m.primary.fp_count),
            tdfm: Some(m.primary.tdfm_count),
        },
    ];
    // Generation 1 adjudicates the same traces as the row above.
    for g in m.generations.iter().filter(|g| g.generation > 1) {
        rows.push(SummaryRow {
            label: format!("Multi-step, generation {}", g.generation),
            accuracy: g.metrics.p,
            voc: g.metrics.voc,
            fp: Some(g.metrics.fp_count),
            tdfm: Some(g.metrics.tdfm_count),
        });
    }
    if let Some(last) = m.generations.last() {
        rows.push(SummaryRow {
            label: "Multi-step, refined".into(),
            accuracy: last.accuracy_after,
            voc: None,
            fp: None,
            tdfm: None,
        });
    }

    let mut md = String::new();
    let w = &mut md;
    let _ = writeln!(w, "# Run report: {}\n", m.run_id);
    let _ = writeln!(
        w,
        "Dataset {} ({}), {} samples. Matching `{}`, TN definition `{}`, path tau {}.",
        corpus.dataset,
        corpus.split.as_str(),
        m.samples,
        scheme,
        tn_def.id(),
        cfg.reasoning.tau
    );
    let _ = writeln!(w, "Config digest `{}`.\n", m.config_digest);
    let _ = writeln!(w, "## Summary\n\nAccuracy in percent; VoC on a x100 scale.\n");
    w.push_str(&render_summary_table(&rows));
    if m.primary.voc_undefined {
        w.push_str("\nVoC is undefined for the multi-step run: FP + TN = 0.\n");
    }

    let _ = writeln!(w, "\n## Detection\n\n| Verdict | Count |\n|---|---:|");
    for st in [
        VerdictState::FpMappingUnstable,
        VerdictState::FpPersistent,
        VerdictState::NonfpRecovered,
        VerdictState::Abstained,
    ] {
        let _ = writeln!(w, "| {} | {} |", serde_json::to_value(st)?.as_str().unwrap_or("?"), det.count(st));
    }
    let _ = writeln!(w, "\nStable-correct samples: {}. TN count: {}.", det.stable_correct, det.tn_count);
    if det.degraded {
        let _ = writeln!(w, "\nDegraded: {} TDFM sample(s) could not be adjudicated.", det.abstained);
    }

    let _ = writeln!(w, "\n## Per-type accuracy\n\n| Type | n | Direct | Multi-step |\n|---|---:|---:|---:|");
    for (ty, a) in &m.primary.per_type {
        let _ = writeln!(
            w,
            "| {ty} | {} | {} | {} |",
            a.n,
            fmt_opt(a.accuracy_direct),
            fmt_opt(a.accuracy_multi)
        );
    }
    let _ = writeln!(w, "\n## Difficulty\n");
    w.push_str(&render_difficulty_table(&m.difficulty));

    let _ = writeln!(w, "\n## Refinement\n");
    if history.rounds.is_empty() {
        let _ = writeln!(w, "No refinement generations recorded.");
    }
    for r in &history.rounds {
        let _ = write!(
            w,
            "- Generation {}: TDFM {}, FP {}; {} proposed, {} activated, {} rolled back, {} queued for review",
            r.generation,
            r.tdfm_count,
            r.fp_count,
            r.count(Action::Proposed),
            r.count(Action::Activated),
            r.count(Action::RolledBack),
            r.count(Action::ReviewQueued)
        );
        match r.stop_reason {
            Some(s) => {
                let _ = writeln!(w, "; stopped: {}", serde_json::to_value(s)?.as_str().unwrap_or("?"));
            }
            None => w.push('\n'),
        }
    }
    let _ = writeln!(w, "\nOpen review items: {}.", m.open_review_items);
    let _ = writeln!(
        w,
        "\n## Answer length\n\nMulti-word answers where every gold answer is one word: direct {}, multi-step {}.",
        m.long_answers_direct, m.long_answers_multi
    );

    let dir = ctx.ws.report_dir(&cfg.run_id);
    fs::create_dir_all(&dir).map_err(CliError::io(&dir))?;
    write_atomic(&dir.join("metrics.json"), (serde_json::to_string_pretty(&m)? + "\n").as_bytes())?;
    write_atomic(&dir.join("report.md"), md.as_bytes())?;
    Ok(format!(
        "report written to {}\n{}",
        dir.display(),
        render_summary_table(&rows).trim_end()
    ))
}
