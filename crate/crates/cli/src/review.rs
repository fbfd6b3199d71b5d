//! `cotrel review list|show|resolve`.

use std::fmt::Write as _;

use cotrel::corpus;
use cotrel::refine::{resolve_review, ReviewChoice, ReviewItem, ReviewOption};
use cotrel::taxonomy::{QuestionType, SqId, SubQuestion};

use crate::error::CliError;
use crate::ledger::{RunLedger, CORPUS, ROUNDS};
use crate::stages::{ResolutionRecord, RoundEntry};
use crate::workspace::Workspace;

/// Arguments of `review resolve` beyond the item id.
#[derive(Debug, Clone, Default)]
pub struct ResolveArgs {
    pub option: String,
    pub name: Option<String>,
    pub description: Option<String>,
    pub parent: Option<String>,
    pub sq_id: Option<String>,
    pub text: Option<String>,
    pub note: String,
}

fn headline(item: &ReviewItem) -> String {
    format!(
        "{}  {}  {:?}  generation {}  {}",
        item.item_id,
        item.question_type,
        item.trigger,
        item.generation,
        item.detail
    )
}

pub fn list(ws: &Workspace) -> Result<String, CliError> {
    let state = ws.load_state()?;
    let open: Vec<&ReviewItem> = state.review.open_items().collect();
    let mut out = format!("{} items", open.len());
    for item in open {
        out.push('\n');
        out.push_str(&headline(item));
    }
    Ok(out)
}

pub fn show(ws: &Workspace, item_id: &str) -> Result<String, CliError> {
    let state = ws.load_state()?;
    let item = state
        .review
        .get(item_id)
        .ok_or_else(|| CliError::Usage(format!("no review item `{item_id}`")))?;
    let corpus = match &item.run_id {
        Some(run) if ws.ledger_dir(run).join(CORPUS).exists() => {
            Some(corpus::read_normalized(ws.ledger_dir(run).join(CORPUS))?)
        }
        _ => None,
    };
    let mut out = headline(item);
    if let Some(run) = &item.run_id {
        let _ = write!(out, "\nrun: {run}");
    }
    if let Some(t) = state.registry.active(&item.question_type) {
        let _ = write!(out, "\nactive template: v{} {}", t.version, t.chain_tag());
    }
    if let Some(p) = &item.proposed_type {
        let parent = p.parent.as_ref().map_or("none", |t| t.as_str());
        let _ = write!(out, "\nproposed type: {} (parent {parent}): {}", p.id, p.description);
    }
    let _ = write!(out, "\nexemplars:");
    for id in &item.exemplar_sample_ids {
        match corpus.as_ref().and_then(|c| c.get(id)) {
            Some(s) => {
                let _ = write!(out, "\n  {id}: {} [gold: {}]", s.question, s.gold_answers.join(" / "));
            }
            None => {
                let _ = write!(out, "\n  {id}");
            }
        }
    }
    let opts: Vec<&str> = item.options.iter().map(|o| o.as_str()).collect();
    let _ = write!(out, "\noptions: {}", opts.join(", "));
    match &item.resolution {
        Some(r) => {
            let _ = write!(out, "\nresolved: {} ({})", r.choice.option(), r.note);
        }
        None => out.push_str("\nstatus: open"),
    }
    Ok(out)
}

fn choice_for(item: &ReviewItem, args: &ResolveArgs) -> Result<ReviewChoice, CliError> {
    let option: ReviewOption = args.option.parse().map_err(CliError::Usage)?;
    let need = |v: &Option<String>, flag: &str| {
        v.clone()
            .ok_or_else(|| CliError::Usage(format!("{option} requires --{flag}")))
    };
    Ok(match option {
        ReviewOption::SplitType => match (&args.name, &item.proposed_type) {
            (None, Some(p)) => ReviewChoice::SplitType { new_type: p.clone() },
            _ => {
                let name = need(&args.name, "name")?;
                let description = need(&args.description, "description")?;
                let parent = args.parent.clone().or_else(|| Some(item.question_type.as_str().to_string()));
                ReviewChoice::SplitType {
                    new_type: QuestionType::custom(name, description, parent.as_deref().filter(|p| *p != "none")),
                }
            }
        },
        ReviewOption::ExtendBank => ReviewChoice::ExtendBank {
            sub_question: SubQuestion {
                id: SqId::new(need(&args.sq_id, "sq-id")?),
                text: need(&args.text, "text")?,
            },
        },
        ReviewOption::Keep => ReviewChoice::Keep,
        ReviewOption::RetireTemplate => ReviewChoice::RetireTemplate,
    })
}

/// Applies a decision, persists the workspace and notes it in the run ledger.
pub fn resolve(ws: &Workspace, item_id: &str, args: &ResolveArgs) -> Result<String, CliError> {
    let mut state = ws.load_state()?;
    let item = state
        .review
        .get(item_id)
        .ok_or_else(|| CliError::Usage(format!("no review item `{item_id}`")))?
        .clone();
    let choice = choice_for(&item, args)?;
    let ledger = match &item.run_id {
        Some(run) => RunLedger::existing(ws, run)?,
        None => None,
    };
    let change = resolve_review(&mut state, item_id, choice, &args.note)?;
    ws.save_state(&state)?;
    ws.append_review(state.review.get(item_id))?;
    if let Some(ledger) = ledger {
        ledger.append(
            ROUNDS,
            item.generation,
            [RoundEntry::ReviewResolution(ResolutionRecord {
                change: change.clone(),
                note: args.note.clone(),
            })],
        )?;
    }
    let mut out = format!("{} resolved with {}", change.item_id, change.choice);
    for a in &change.actions {
        let _ = write!(out, "\n  {:?} {}: {}", a.action, a.question_type, a.detail);
    }
    Ok(out)
}
