//! Command-line front end over the history engine: exact counts, uniform
//! samples, growth estimates, asymptotic constants and the RDT-SL
//! invariance check, as CSV or JSON.
//!
//! Exit codes: 0 ok, 1 assertion failed (invariance counterexample, empty
//! history class), 2 usage error.

use std::fmt::Write as _;
use std::fs;
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use num_bigint::BigUint;
use serde_json::{json, Value};

use dlthist::asymptotics::{
    caterpillar_closed_form, complete_closed_form, expansion_udl, growth_estimate, GrowthError,
};
use dlthist::counting::{compile_tree, count, count_tree};
use dlthist::grammar::Model;
use dlthist::sampling::{sample_with_rng, statistics};
use dlthist::species_tree::{
    all_rankings, all_shapes, caterpillar, complete, parse_newick, random_ranking, time_slice,
    Ranking, SpeciesTree,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(
    name = "dlthist",
    version,
    about = "Count, sample and analyze gene family evolutionary histories constrained by a species tree"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Exact history counts over a size range
    Count(CountCmd),
    /// Uniform random histories of a fixed size, as annotated Newick
    Sample(SampleCmd),
    /// Growth-factor estimate h(n)/h(n-1), with the exact value for UDL
    Growth(GrowthCmd),
    /// Asymptotic constants for caterpillar and complete species trees
    Asym(AsymCmd),
    /// Check RDT-SL count invariance over all ranked trees of one size
    Invariance(InvarianceCmd),
}

#[derive(Args)]
struct TreeArgs {
    /// Newick file, `builtin:caterpillar:<k>` or `builtin:complete:<h>`
    #[arg(long)]
    tree: String,
    /// Ranking for ranked models: sidecar file (label<TAB>rank lines),
    /// `unique`, or `random:<seed>`
    #[arg(long)]
    ranking: Option<String>,
    /// Evolutionary model
    #[arg(long, value_parser = Model::from_str)]
    model: Model,
}

#[derive(Args)]
struct FormatArg {
    /// Output format
    #[arg(long, default_value = "csv", value_parser = parse_format)]
    format: Format,
}

#[derive(Args)]
struct CountCmd {
    #[command(flatten)]
    tree: TreeArgs,
    /// Size or inclusive range, e.g. `20` or `1..8`
    #[arg(long, value_parser = parse_range)]
    n: SizeRange,
    #[command(flatten)]
    format: FormatArg,
}

#[derive(Args)]
struct SampleCmd {
    #[command(flatten)]
    tree: TreeArgs,
    /// History size
    #[arg(long, value_parser = parse_range)]
    n: SizeRange,
    /// Number of histories to draw
    #[arg(long, default_value_t = 1)]
    samples: usize,
    /// PRNG seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write per-history statistics (size, events, score) to this file
    #[arg(long)]
    stats_out: Option<String>,
    #[command(flatten)]
    format: FormatArg,
}

#[derive(Args)]
struct GrowthCmd {
    #[command(flatten)]
    tree: TreeArgs,
    /// Size at which to take the count ratio
    #[arg(long, value_parser = parse_range)]
    n: SizeRange,
    #[command(flatten)]
    format: FormatArg,
}

#[derive(Args)]
struct AsymCmd {
    /// Caterpillar sizes, e.g. `1..7`
    #[arg(long, default_value = "1..7", value_parser = parse_range)]
    caterpillar: SizeRange,
    /// Complete-tree heights, e.g. `0..4`
    #[arg(long, default_value = "0..4", value_parser = parse_range)]
    complete: SizeRange,
    #[command(flatten)]
    format: FormatArg,
}

#[derive(Args)]
struct InvarianceCmd {
    /// Species tree size (exhaustive over shapes and rankings; k <= 6)
    #[arg(long)]
    k: usize,
    /// History sizes to compare, e.g. `1..8`
    #[arg(long, default_value = "1..8", value_parser = parse_range)]
    n: SizeRange,
    #[command(flatten)]
    format: FormatArg,
}

#[derive(Clone, Copy)]
enum Format {
    Csv,
    Json,
}

fn parse_format(s: &str) -> Result<Format, String> {
    match s {
        "csv" => Ok(Format::Csv),
        "json" => Ok(Format::Json),
        other => Err(format!("unknown format \"{other}\" (expected csv or json)")),
    }
}

#[derive(Clone, Copy)]
struct SizeRange {
    lo: usize,
    hi: usize,
}

fn parse_range(s: &str) -> Result<SizeRange, String> {
    let parse_one = |t: &str| {
        t.parse::<usize>()
            .map_err(|_| format!("invalid size \"{t}\""))
    };
    let range = match s.split_once("..") {
        Some((a, b)) => SizeRange {
            lo: parse_one(a)?,
            hi: parse_one(b)?,
        },
        None => {
            let v = parse_one(s)?;
            SizeRange { lo: v, hi: v }
        }
    };
    if range.lo > range.hi {
        return Err(format!("empty range {}..{}", range.lo, range.hi));
    }
    Ok(range)
}

/// Failures that should exit 1 (data/assertion) vs 2 (usage).
enum CliError {
    Usage(anyhow::Error),
    Failed(anyhow::Error),
}

type CliResult = Result<(), CliError>;

fn usage<E: Into<anyhow::Error>>(e: E) -> CliError {
    CliError::Usage(e.into())
}

fn load_tree(spec: &str) -> Result<SpeciesTree, CliError> {
    if let Some(rest) = spec.strip_prefix("builtin:") {
        let (family, arg) = rest
            .split_once(':')
            .ok_or_else(|| usage(anyhow!("builtin tree spec needs a parameter: \"{spec}\"")))?;
        let value: usize = arg
            .parse()
            .map_err(|_| usage(anyhow!("invalid builtin parameter \"{arg}\"")))?;
        match family {
            "caterpillar" => caterpillar(value)
                .map_err(|e| usage(anyhow!("builtin:caterpillar:{value}: {e}"))),
            "complete" => {
                if value > 16 {
                    return Err(usage(anyhow!("complete tree height {value} is too large")));
                }
                Ok(complete(value as u32))
            }
            other => Err(usage(anyhow!("unknown builtin tree family \"{other}\""))),
        }
    } else {
        let text = fs::read_to_string(spec)
            .with_context(|| format!("reading tree file {spec}"))
            .map_err(usage)?;
        parse_newick(&text).map_err(|e| usage(anyhow!("parsing {spec}: {e}")))
    }
}

fn load_ranking(
    tree: &SpeciesTree,
    spec: &Option<String>,
    model: Model,
) -> Result<Option<Ranking>, CliError> {
    match (model.is_ranked(), spec) {
        (false, None) => Ok(None),
        (false, Some(_)) => Err(usage(anyhow!(
            "model {model} is unranked and takes no --ranking"
        ))),
        (true, None) => Err(usage(anyhow!("model {model} requires --ranking"))),
        (true, Some(spec)) => {
            let ranking = if spec == "unique" {
                Ranking::unique(tree).map_err(|e| usage(anyhow!("--ranking unique: {e}")))?
            } else if let Some(seed) = spec.strip_prefix("random:") {
                let seed: u64 = seed
                    .parse()
                    .map_err(|_| usage(anyhow!("invalid ranking seed \"{seed}\"")))?;
                random_ranking(tree, seed)
            } else {
                let text = fs::read_to_string(spec)
                    .with_context(|| format!("reading ranking file {spec}"))
                    .map_err(usage)?;
                Ranking::from_sidecar(tree, &text)
                    .map_err(|e| usage(anyhow!("parsing {spec}: {e}")))?
            };
            Ok(Some(ranking))
        }
    }
}

/// How a column is rendered in JSON output. CSV treats everything as text;
/// big counts stay decimal strings in JSON because they exceed 64 bits.
#[derive(Clone, Copy)]
enum Col {
    Int,
    Big,
    Float,
    Text,
}

/// CSV with a header row, UTF-8, LF line endings.
fn emit_csv(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record(header).expect("csv header");
    for row in rows {
        w.write_record(row).expect("csv row");
    }
    String::from_utf8(w.into_inner().expect("csv flush")).expect("utf-8")
}

fn emit_json(header: &[&str], rows: &[Vec<String>], types: &[Col]) -> String {
    let values: Vec<Value> = rows
        .iter()
        .map(|row| {
            let mut obj = serde_json::Map::new();
            for ((name, field), ty) in header.iter().zip(row).zip(types) {
                let value = if field.is_empty() {
                    Value::Null
                } else {
                    match ty {
                        Col::Int => field
                            .parse::<u64>()
                            .map(|n| json!(n))
                            .unwrap_or_else(|_| Value::String(field.clone())),
                        Col::Float => serde_json::Number::from_str(field)
                            .map(Value::Number)
                            .unwrap_or_else(|_| Value::String(field.clone())),
                        Col::Big | Col::Text => Value::String(field.clone()),
                    }
                };
                obj.insert((*name).to_string(), value);
            }
            Value::Object(obj)
        })
        .collect();
    let mut out = serde_json::to_string_pretty(&Value::Array(values)).expect("serializable");
    out.push('\n');
    out
}

fn render(format: Format, header: &[&str], rows: &[Vec<String>], types: &[Col]) -> String {
    debug_assert_eq!(header.len(), types.len());
    match format {
        Format::Csv => emit_csv(header, rows),
        Format::Json => emit_json(header, rows, types),
    }
}

fn fixed(x: f64) -> String {
    format!("{x:.12}")
}

fn cmd_count(cmd: &CountCmd) -> CliResult {
    let tree = load_tree(&cmd.tree.tree)?;
    let ranking = load_ranking(&tree, &cmd.tree.ranking, cmd.tree.model)?;
    let table = count_tree(&tree, ranking.as_ref(), cmd.tree.model, cmd.n.hi)
        .map_err(|e| usage(anyhow!(e)))?;
    let rows: Vec<Vec<String>> = (cmd.n.lo..=cmd.n.hi)
        .map(|n| vec![n.to_string(), table.history_count(n).to_string()])
        .collect();
    print!(
        "{}",
        render(
            cmd.format.format,
            &["n", "count"],
            &rows,
            &[Col::Int, Col::Big],
        )
    );
    Ok(())
}

fn cmd_sample(cmd: &SampleCmd) -> CliResult {
    if cmd.n.lo != cmd.n.hi {
        return Err(usage(anyhow!("sample takes a single size, not a range")));
    }
    let n = cmd.n.lo;
    let tree = load_tree(&cmd.tree.tree)?;
    let ranking = load_ranking(&tree, &cmd.tree.ranking, cmd.tree.model)?;
    let grammar =
        compile_tree(&tree, ranking.as_ref(), cmd.tree.model).map_err(|e| usage(anyhow!(e)))?;
    let table = count(&grammar, n);
    if table.history_count(n) == &BigUint::from(0u32) {
        return Err(CliError::Failed(anyhow!(
            "no history of size {n} exists for this tree and model"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cmd.seed);
    let mut lines = String::new();
    let mut stats_rows = Vec::with_capacity(cmd.samples);
    for i in 0..cmd.samples {
        let history = sample_with_rng(&grammar, &table, n, &mut rng)
            .map_err(|e| CliError::Failed(anyhow!(e)))?;
        let _ = writeln!(lines, "{}", history.to_annotated_newick(grammar.view()));
        let s = statistics(&history);
        stats_rows.push(vec![
            i.to_string(),
            s.n_extant.to_string(),
            s.n_s.to_string(),
            s.n_d.to_string(),
            s.n_l.to_string(),
            s.n_t.to_string(),
            s.score.to_string(),
        ]);
    }
    print!("{lines}");
    if let Some(path) = &cmd.stats_out {
        let header = ["index", "size", "n_s", "n_d", "n_l", "n_t", "score"];
        let text = render(
            cmd.format.format,
            &header,
            &stats_rows,
            &[Col::Int; 7],
        );
        fs::write(path, text)
            .with_context(|| format!("writing {path}"))
            .map_err(CliError::Failed)?;
    }
    Ok(())
}

fn cmd_growth(cmd: &GrowthCmd) -> CliResult {
    if cmd.n.lo != cmd.n.hi {
        return Err(usage(anyhow!("growth takes a single size, not a range")));
    }
    let n = cmd.n.lo;
    let tree = load_tree(&cmd.tree.tree)?;
    let ranking = load_ranking(&tree, &cmd.tree.ranking, cmd.tree.model)?;
    let estimate =
        growth_estimate(&tree, ranking.as_ref(), cmd.tree.model, n).map_err(|e| match e {
            GrowthError::ZeroCount { .. } => CliError::Failed(anyhow!(e)),
            other => usage(anyhow!(other)),
        })?;
    let row = if cmd.tree.model == Model::Udl {
        let exact = expansion_udl(&tree, 1e-12)
            .map_err(|e| CliError::Failed(anyhow!(e)))?
            .growth;
        vec![
            n.to_string(),
            fixed(estimate),
            fixed(exact),
            fixed(estimate / exact),
        ]
    } else {
        vec![n.to_string(), fixed(estimate), String::new(), String::new()]
    };
    print!(
        "{}",
        render(
            cmd.format.format,
            &["n", "estimate", "exact", "ratio"],
            &[row],
            &[Col::Int, Col::Float, Col::Float, Col::Float],
        )
    );
    Ok(())
}

fn cmd_asym(cmd: &AsymCmd) -> CliResult {
    if cmd.caterpillar.lo == 0 {
        return Err(usage(anyhow!("caterpillar sizes start at 1")));
    }
    let mut rows = Vec::new();
    for k in cmd.caterpillar.lo..=cmd.caterpillar.hi {
        let (lambda, alpha) = caterpillar_closed_form(k);
        let tree = caterpillar(k).map_err(|e| usage(anyhow!(e)))?;
        let oracle = expansion_udl(&tree, 1e-12)
            .map_err(|e| CliError::Failed(anyhow!(e)))?
            .gamma;
        rows.push(vec![
            "caterpillar".to_string(),
            k.to_string(),
            fixed(lambda),
            fixed(1.0 / lambda),
            fixed(alpha),
            fixed(oracle),
        ]);
    }
    for h in cmd.complete.lo..=cmd.complete.hi {
        if h > 16 {
            return Err(usage(anyhow!("complete tree height {h} is too large")));
        }
        let c = complete_closed_form(h as u32);
        rows.push(vec![
            "complete".to_string(),
            h.to_string(),
            fixed(c.mu),
            fixed(1.0 / c.mu),
            fixed(c.beta_formula),
            fixed(c.beta_oracle),
        ]);
    }
    let header = [
        "family",
        "k",
        "lambda_or_mu",
        "growth",
        "alpha_or_beta_formula",
        "beta_oracle",
    ];
    print!(
        "{}",
        render(
            cmd.format.format,
            &header,
            &rows,
            &[Col::Text, Col::Int, Col::Float, Col::Float, Col::Float, Col::Float],
        )
    );
    Ok(())
}

fn cmd_invariance(cmd: &InvarianceCmd) -> CliResult {
    if cmd.k < 2 || cmd.k > 6 {
        return Err(usage(anyhow!(
            "invariance enumerates all ranked trees exhaustively; use 2 <= k <= 6"
        )));
    }
    let mut rows = Vec::new();
    let mut reference: Option<Vec<BigUint>> = None;
    let mut ranked_trees = 0usize;
    let mut violation = false;
    for tree in all_shapes(cmd.k) {
        for ranking in all_rankings(&tree) {
            let sliced = time_slice(&tree, &ranking);
            let table = dlthist::events_graph::count_rdtsl_table(&sliced, cmd.n.hi);
            let seq: Vec<BigUint> = (cmd.n.lo..=cmd.n.hi)
                .map(|n| table.history_count(n).clone())
                .collect();
            let ranking_text = ranking
                .internal_pairs(&tree)
                .iter()
                .map(|(label, rank)| format!("{label}={rank}"))
                .collect::<Vec<_>>()
                .join(";");
            for (i, n) in (cmd.n.lo..=cmd.n.hi).enumerate() {
                rows.push(vec![
                    tree.to_newick(),
                    ranking_text.clone(),
                    n.to_string(),
                    seq[i].to_string(),
                ]);
            }
            match &reference {
                None => reference = Some(seq),
                Some(want) => {
                    if want != &seq {
                        violation = true;
                    }
                }
            }
            ranked_trees += 1;
        }
    }
    print!(
        "{}",
        render(
            cmd.format.format,
            &["tree", "ranking", "n", "count"],
            &rows,
            &[Col::Text, Col::Text, Col::Int, Col::Big],
        )
    );
    if violation {
        eprintln!(
            "invariance: FAIL — RDT-SL counts differ across ranked trees of size {}",
            cmd.k
        );
        return Err(CliError::Failed(anyhow!(
            "RDT-SL invariance violated, which indicates an implementation bug"
        )));
    }
    eprintln!(
        "invariance: PASS ({ranked_trees} ranked trees of size {} share one counting sequence)",
        cmd.k
    );
    Ok(())
}

fn run(cli: &Cli) -> CliResult {
    match &cli.command {
        Command::Count(cmd) => cmd_count(cmd),
        Command::Sample(cmd) => cmd_sample(cmd),
        Command::Growth(cmd) => cmd_growth(cmd),
        Command::Asym(cmd) => cmd_asym(cmd),
        Command::Invariance(cmd) => cmd_invariance(cmd),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Failed(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(CliError::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
