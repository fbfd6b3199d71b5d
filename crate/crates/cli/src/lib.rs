//! Operator CLI for the cotrel harness: workspace setup, staged pipeline
//! runs over an append-only ledger, reports and the review queue.

pub mod config;
pub mod error;
pub mod ledger;
pub mod report;
pub mod review;
pub mod stages;
pub mod workspace;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use cotrel::metrics::MatchScheme;

use crate::config::{Overrides, RunConfig};
use crate::error::CliError;
use crate::review::ResolveArgs;
use crate::stages::{run_stage, RunContext, Stage};
use crate::workspace::Workspace;

#[derive(Debug, Parser)]
#[command(name = "cotrel", version, about = "Direct vs multi-step reasoning reliability harness")]
pub struct Cli {
    /// Run configuration; its directory is the workspace.
    #[arg(long, global = true, default_value = "cotrel.toml")]
    pub config: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create the workspace: default config, vocabularies and seed templates.
    Init {
        /// Regenerate an existing workspace, moving old files to backup/.
        #[arg(long)]
        force: bool,
    },
    /// Run one pipeline stage.
    Run {
        #[arg(long, value_enum)]
        stage: Stage,
        /// Overrides `run_id` from the config.
        #[arg(long)]
        run_id: Option<String>,
        /// Refinement generations to run.
        #[arg(long)]
        budget: Option<u32>,
        /// Add proposed question types without queueing them for review.
        #[arg(long)]
        auto_accept: bool,
        /// Path agreement threshold; 1.0 means exact equality.
        #[arg(long)]
        tau: Option<f64>,
        /// exact_norm | choice | topK | soft3
        #[arg(long, value_parser = parse_scheme)]
        scheme: Option<MatchScheme>,
        /// Concurrent backend calls.
        #[arg(long)]
        parallelism: Option<usize>,
    },
    /// Inspect and resolve manual review items.
    Review {
        #[command(subcommand)]
        action: ReviewAction,
    },
}

#[derive(Debug, Subcommand)]
pub enum ReviewAction {
    /// Print unresolved items.
    List,
    /// Print one item with exemplars and options.
    Show { item_id: String },
    /// Apply a decision to an open item.
    Resolve {
        item_id: String,
        /// SPLIT_TYPE | EXTEND_BANK | KEEP | RETIRE_TEMPLATE
        #[arg(long)]
        option: String,
        /// New type name (SPLIT_TYPE); defaults to the proposed type.
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        description: Option<String>,
        /// Parent type id, or `none`.
        #[arg(long)]
        parent: Option<String>,
        /// Sub-question id (EXTEND_BANK).
        #[arg(long)]
        sq_id: Option<String>,
        /// Sub-question text (EXTEND_BANK).
        #[arg(long)]
        text: Option<String>,
        #[arg(long, default_value = "")]
        note: String,
    },
}

fn parse_scheme(s: &str) -> Result<MatchScheme, String> {
    s.parse().map_err(|e: cotrel::metrics::MetricsError| e.to_string())
}

/// Executes a parsed command and returns the text to print.
pub fn run(cli: Cli) -> Result<String, CliError> {
    let ws = Workspace::of_config(&cli.config);
    let _lock = ws.lock()?;
    match cli.command {
        Command::Init { force } => {
            let s = ws.init(&cli.config, force)?;
            let mut out = format!(
                "initialized {}: {} question types, {} sub-questions, {} seed templates",
                ws.root().display(),
                s.types,
                s.sub_questions,
                s.templates
            );
            if s.wrote_config {
                out.push_str(&format!("; wrote {}", cli.config.display()));
            }
            if let Some(b) = s.backup {
                out.push_str(&format!("; previous files moved to {}", b.display()));
            }
            Ok(out)
        }
        Command::Run {
            stage,
            run_id,
            budget,
            auto_accept,
            tau,
            scheme,
            parallelism,
        } => {
            let overrides = Overrides {
                run_id,
                budget,
                auto_accept,
                tau,
                scheme,
                parallelism,
            };
            let cfg = RunConfig::load(&cli.config, &overrides)?;
            let ctx = RunContext::open(ws, cfg)?;
            run_stage(&ctx, stage)
        }
        Command::Review { action } => match action {
            ReviewAction::List => review::list(&ws),
            ReviewAction::Show { item_id } => review::show(&ws, &item_id),
            ReviewAction::Resolve {
                item_id,
                option,
                name,
                description,
                parent,
                sq_id,
                text,
                note,
            } => review::resolve(
                &ws,
                &item_id,
                &ResolveArgs {
                    option,
                    name,
                    description,
                    parent,
                    sq_id,
                    text,
                    note,
                },
            ),
        },
    }
}
