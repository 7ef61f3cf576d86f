//! Batch command line for attention-based bias localization and intervention.

pub mod args;
pub mod commands;
pub mod report;

use anyhow::Result;

use args::{Cli, Command, CorpusCommand};

/// Dispatches a parsed command line.
pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Audit(a) => {
            let r = commands::cmd_audit(a)?;
            print!("{}", r.summary());
            println!("report written to {}", commands::describe_out(&a.run.out).display());
        }
        Command::Localize(a) => {
            let l = commands::cmd_localize(a)?;
            println!("top-candidate ranking: {:?}", l.ranking_top_candidate);
            println!("difference ranking:    {:?}", l.ranking_difference);
        }
        Command::Ablation(a) => {
            for row in commands::cmd_ablation(a)? {
                let pct = row.mean_bias_ratio_decrease_pct.map_or("-".into(), |v| format!("{v:.2}"));
                println!("{:<10} {pct:>8}%  ({} prompts)", row.mode, row.n_results);
            }
        }
        Command::Sweep(a) => {
            let r = commands::cmd_sweep(a)?;
            println!(
                "{} cells: {} reduced, {} increased, {} unchanged",
                r.rows.len(),
                r.reduced,
                r.increased,
                r.unchanged
            );
        }
        Command::Corpus(CorpusCommand::Dump(a)) => {
            let n = commands::cmd_corpus_dump(a)?;
            if a.out.is_some() {
                println!("wrote {n} prompts");
            }
        }
    }
    Ok(())
}
