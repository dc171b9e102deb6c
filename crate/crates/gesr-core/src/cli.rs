//! Operator commands: dataset generation, training, the ablation suite,
//! the sequence-length sweep, the serving benchmark, and the invariant
//! suite. The binary in `bin/gesr.rs` is a thin wrapper over [`run`].
//!
//! Every tunable accepts three sources in priority order: command-line
//! flag, then a `key = value` line in the `--config` file (the key is the
//! long flag with dashes turned into underscores), then the built-in
//! default. Re-running a command with the same inputs and seed rewrites
//! identical artifacts.

use std::collections::HashMap;
use std::fmt::Display;
use std::fs;
use std::io::{BufRead as _, BufReader, BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::error::{GesrError, Result};
use crate::features::RankingRequest;
use crate::model::{checkpoint, GesrModel, ModelConfig, ModelVariant};
use crate::serving::{bench_throughput, precompute_item_cache, BenchMode, ThroughputReport};
use crate::training::{
    run_seqlen_sweep, run_variant_table, train_model, generate_synthetic, make_candidate,
    AblationReport, AdamConfig, SweepReport, SyntheticSpec, TrainConfig,
};
use crate::verify;

#[derive(Parser, Debug)]
#[command(name = "gesr", version, about = "Generative early-stage ranking toolkit")]
pub struct Cli {
    /// Flat key=value defaults file; explicit flags always win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a labeled synthetic dataset as JSON lines.
    GenData(GenDataArgs),
    /// Train one model variant and report held-out NE.
    Train(TrainArgs),
    /// Train every variant (plus single additions) across seeds.
    Ablate(AblateArgs),
    /// Train gesr_basic at several sequence lengths.
    SweepSeqlen(SweepArgs),
    /// Compare cached and direct scoring throughput.
    ServeBench(ServeBenchArgs),
    /// Run the invariant suite; nonzero exit on any violation.
    Verify(VerifyArgs),
}

#[derive(Args, Debug, Default)]
pub struct GenDataArgs {
    /// Output path for the JSONL dataset.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub users: Option<usize>,
    #[arg(long)]
    pub requests_per_user: Option<usize>,
    #[arg(long)]
    pub events_min: Option<usize>,
    #[arg(long)]
    pub events_max: Option<usize>,
    /// Candidates per request.
    #[arg(long)]
    pub candidates: Option<usize>,
    #[arg(long)]
    pub vocab_size: Option<u32>,
    #[arg(long)]
    pub topics: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    /// JSONL dataset produced by gen-data.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// two_tower_baseline | gesr_basic | gesr_basic_minus_hma |
    /// gesr_basic_minus_target_awareness | gesr_advanced
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Requests per optimizer step.
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub shuffle_seed: Option<u64>,
    /// Stochastic-length target; omit to train on full sequences.
    #[arg(long)]
    pub sl_target: Option<usize>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub self_attn_layers: Option<usize>,
    #[arg(long)]
    pub vocab_size: Option<u32>,
    /// Where to write the trained checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Where to write the run result as JSON.
    #[arg(long)]
    pub result: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Comma-separated training seeds.
    #[arg(long)]
    pub seeds: Option<String>,
    /// Also train each single addition on top of gesr_basic.
    #[arg(long)]
    pub additions: Option<bool>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// Directory for rows.tsv, summary.tsv, and report.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub seeds: Option<String>,
    /// Comma-separated sequence lengths.
    #[arg(long)]
    pub lens: Option<String>,
    /// Adds a stochastic-length run at the longest length with this target.
    #[arg(long)]
    pub sl_target: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// Directory for sweep.tsv, rows.tsv, and report.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
pub struct ServeBenchArgs {
    /// Corpus size; must be a multiple of the 50-topic vocabulary layout.
    #[arg(long)]
    pub items: Option<u32>,
    /// Candidates per request.
    #[arg(long)]
    pub candidates: Option<usize>,
    #[arg(long)]
    pub requests: Option<usize>,
    #[arg(long)]
    pub events_min: Option<usize>,
    #[arg(long)]
    pub events_max: Option<usize>,
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Optional TSV output path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
pub struct VerifyArgs {
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Parses a flat `key = value` file. Blank lines and `#` comments are
/// skipped; later keys overwrite earlier ones.
pub fn load_config_map(path: &Path) -> Result<HashMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| {
        GesrError::Usage(format!("cannot read config {}: {e}", path.display()))
    })?;
    let mut map = HashMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(GesrError::Usage(format!(
                "{} line {}: expected key = value, got {line:?}",
                path.display(),
                lineno + 1
            )));
        };
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

fn lookup<T: FromStr>(map: &HashMap<String, String>, key: &str) -> Result<Option<T>>
where
    T::Err: Display,
{
    match map.get(key) {
        None => Ok(None),
        Some(raw) => raw.parse::<T>().map(Some).map_err(|e| {
            GesrError::Usage(format!("config key {key}={raw:?}: {e}"))
        }),
    }
}

fn resolve<T: FromStr>(flag: Option<T>, map: &HashMap<String, String>, key: &str, default: T) -> Result<T>
where
    T::Err: Display,
{
    match flag {
        Some(v) => Ok(v),
        None => Ok(lookup(map, key)?.unwrap_or(default)),
    }
}

fn resolve_opt<T: FromStr>(flag: Option<T>, map: &HashMap<String, String>, key: &str) -> Result<Option<T>>
where
    T::Err: Display,
{
    match flag {
        Some(v) => Ok(Some(v)),
        None => lookup(map, key),
    }
}

fn resolve_required<T: FromStr>(flag: Option<T>, map: &HashMap<String, String>, key: &str) -> Result<T>
where
    T::Err: Display,
{
    resolve_opt(flag, map, key)?.ok_or_else(|| {
        GesrError::Usage(format!(
            "missing --{} (give the flag or a {key} config line)",
            key.replace('_', "-")
        ))
    })
}

/// Splits a comma-separated list, trimming whitespace around items.
pub fn parse_list<T: FromStr>(raw: &str, what: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    let items: Vec<T> = raw
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<T>()
                .map_err(|e| GesrError::Usage(format!("bad {what} entry {s:?}: {e}")))
        })
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(GesrError::Usage(format!("{what} list is empty")));
    }
    Ok(items)
}

fn parse_variant(name: &str) -> Result<ModelVariant> {
    ModelVariant::ALL
        .iter()
        .copied()
        .find(|v| v.name() == name)
        .ok_or_else(|| {
            let known: Vec<&str> = ModelVariant::ALL.iter().map(|v| v.name()).collect();
            GesrError::Usage(format!(
                "unknown variant {name:?}; expected one of {}",
                known.join(", ")
            ))
        })
}

pub fn write_requests_jsonl(path: &Path, requests: &[RankingRequest]) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for req in requests {
        serde_json::to_writer(&mut w, req)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_requests_jsonl(path: &Path) -> Result<Vec<RankingRequest>> {
    if !path.exists() {
        return Err(GesrError::Usage(format!(
            "dataset not found: {}",
            path.display()
        )));
    }
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let req: RankingRequest = serde_json::from_str(&line).map_err(|e| GesrError::Format {
            path: path.display().to_string(),
            detail: format!("line {}: {e}", lineno + 1),
        })?;
        out.push(req);
    }
    if out.is_empty() {
        return Err(GesrError::Format {
            path: path.display().to_string(),
            detail: "no requests in file".to_string(),
        });
    }
    Ok(out)
}

/// Monospace table: first column left-aligned, the rest right-aligned.
fn render_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let cols = headers.len();
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let mut out = String::new();
    let mut push_row = |cells: &[String]| {
        for (i, cell) in cells.iter().enumerate() {
            if i > 0 {
                out.push_str("  ");
            }
            if i == 0 {
                out.push_str(&format!("{cell:<width$}", width = widths[i]));
            } else {
                out.push_str(&format!("{cell:>width$}", width = widths[i]));
            }
        }
        while out.ends_with(' ') {
            out.pop();
        }
        out.push('\n');
    };
    push_row(&headers.iter().map(|h| h.to_string()).collect::<Vec<_>>());
    push_row(&vec!["-".repeat(3); cols].iter().enumerate().map(|(i, _)| "-".repeat(widths[i])).collect::<Vec<_>>());
    for row in rows {
        assert_eq!(row.len(), cols, "table row width mismatch");
        push_row(row);
    }
    out
}

fn write_tsv(path: &Path, headers: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut text = headers.join("\t");
    text.push('\n');
    for row in rows {
        text.push_str(&row.join("\t"));
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

fn max_token(data: &[RankingRequest]) -> u32 {
    data.iter()
        .flat_map(|r| {
            r.user_events
                .iter()
                .map(|e| e.token)
                .chain(r.user_context_tokens.iter().copied())
        })
        .max()
        .unwrap_or(0)
}

fn apply_moa_overrides(
    base: &mut ModelConfig,
    seq_len: Option<usize>,
    embed_dim: Option<usize>,
    heads: Option<usize>,
    layers: Option<usize>,
    vocab: Option<u32>,
) {
    if let Some(n) = seq_len {
        base.moa.seq_len = n;
    }
    if let Some(d) = embed_dim {
        base.moa.embed_dim = d;
    }
    if let Some(h) = heads {
        base.moa.heads = h;
    }
    if let Some(l) = layers {
        base.moa.self_attn_layers = l;
    }
    if let Some(v) = vocab {
        base.moa.vocab_size = v;
    }
}

fn run_gen_data(args: GenDataArgs, map: &HashMap<String, String>) -> Result<()> {
    let d = SyntheticSpec::desk_default();
    let out: PathBuf = resolve_required(args.out, map, "out")?;
    let spec = SyntheticSpec {
        vocab_size: resolve(args.vocab_size, map, "vocab_size", d.vocab_size)?,
        topics: resolve(args.topics, map, "topics", d.topics)?,
        users: resolve(args.users, map, "users", d.users)?,
        requests_per_user: resolve(args.requests_per_user, map, "requests_per_user", d.requests_per_user)?,
        events_min: resolve(args.events_min, map, "events_min", d.events_min)?,
        events_max: resolve(args.events_max, map, "events_max", d.events_max)?,
        candidates: resolve(args.candidates, map, "candidates", d.candidates)?,
        seed: resolve(args.seed, map, "seed", d.seed)?,
        ..d
    };
    let data = generate_synthetic(&spec)?;
    write_requests_jsonl(&out, &data)?;

    let tasks = spec.tasks.len();
    let mut positives = vec![0usize; tasks];
    let mut labeled = 0usize;
    for req in &data {
        if let Some(labels) = &req.labels {
            for cand in labels {
                labeled += 1;
                for (t, &y) in cand.iter().enumerate() {
                    positives[t] += y as usize;
                }
            }
        }
    }
    let rates: Vec<String> = positives
        .iter()
        .map(|&p| format!("{:.4}", p as f64 / labeled.max(1) as f64))
        .collect();
    println!(
        "wrote {} requests ({} users x {}) to {}",
        data.len(),
        spec.users,
        spec.requests_per_user,
        out.display()
    );
    println!("positive rates per task: {}", rates.join(", "));
    Ok(())
}

fn run_train(args: TrainArgs, map: &HashMap<String, String>) -> Result<()> {
    let data_path: PathBuf = resolve_required(args.data, map, "data")?;
    let variant = parse_variant(&resolve(args.variant, map, "variant", "gesr_basic".to_string())?)?;
    let seed = resolve(args.seed, map, "seed", 0u64)?;
    let defaults = TrainConfig::default();
    let train_cfg = TrainConfig {
        epochs: resolve(args.epochs, map, "epochs", defaults.epochs)?,
        optimizer: AdamConfig::with_lr(resolve(args.lr, map, "lr", defaults.optimizer.lr)?),
        batch: resolve(args.batch, map, "batch", defaults.batch)?,
        shuffle_seed: resolve(args.shuffle_seed, map, "shuffle_seed", defaults.shuffle_seed)?,
        sl_target: resolve_opt(args.sl_target, map, "sl_target")?,
        max_loss: defaults.max_loss,
    };

    let data = read_requests_jsonl(&data_path)?;
    let mut base = ModelConfig::desk_default();
    apply_moa_overrides(
        &mut base,
        resolve_opt(args.seq_len, map, "seq_len")?,
        resolve_opt(args.embed_dim, map, "embed_dim")?,
        resolve_opt(args.heads, map, "heads")?,
        resolve_opt(args.self_attn_layers, map, "self_attn_layers")?,
        resolve_opt(args.vocab_size, map, "vocab_size")?,
    );
    let top = max_token(&data);
    if top >= base.moa.vocab_size {
        return Err(GesrError::Usage(format!(
            "dataset token {top} exceeds vocab_size {}; pass --vocab-size",
            base.moa.vocab_size
        )));
    }

    let cfg = variant.configure(&base);
    let mut model = GesrModel::new(cfg, seed)?;
    let result = train_model(&mut model, &data, &train_cfg)?;

    for (i, loss) in result.epoch_losses.iter().enumerate() {
        println!("epoch {i}: mean loss {loss:.6}");
    }
    let ne: Vec<String> = result.eval_ne.iter().map(|v| format!("{v:.6}")).collect();
    println!("held-out NE per task: {}", ne.join(", "));
    println!(
        "trained {} in {:.1}s ({:.0} examples/s)",
        variant.name(),
        result.train_seconds,
        result.examples_per_second
    );

    if let Some(path) = resolve_opt::<PathBuf>(args.checkpoint, map, "checkpoint")? {
        let version = checkpoint::save(&model, &path)?;
        println!("checkpoint {} -> {}", &version[..12], path.display());
    }
    if let Some(path) = resolve_opt::<PathBuf>(args.result, map, "result")? {
        fs::write(&path, serde_json::to_vec_pretty(&result)?)?;
        println!("result -> {}", path.display());
    }
    Ok(())
}

fn ablation_table(report: &AblationReport) -> String {
    let rows: Vec<Vec<String>> = report
        .summaries
        .iter()
        .map(|s| {
            vec![
                s.name.clone(),
                format!("{:.5}", s.median_ne[0]),
                format!("{:+.2}%", s.ne_delta_pct[0]),
                format!("{:.5}", s.median_ne.get(1).copied().unwrap_or(f64::NAN)),
                format!("{:+.2}%", s.ne_delta_pct.get(1).copied().unwrap_or(f64::NAN)),
                format!("{:.0}", s.median_eps),
                format!("{:+.1}%", s.eps_delta_pct),
            ]
        })
        .collect();
    render_table(
        &["config", "E-task NE", "dNE%", "C-task NE", "dNE%", "ex/s", "d ex/s%"],
        &rows,
    )
}

fn summary_tsv_rows(report: &AblationReport) -> Vec<Vec<String>> {
    report
        .summaries
        .iter()
        .map(|s| {
            vec![
                s.name.clone(),
                format!("{}", s.median_ne[0]),
                format!("{}", s.ne_delta_pct[0]),
                format!("{}", s.median_ne.get(1).copied().unwrap_or(f64::NAN)),
                format!("{}", s.ne_delta_pct.get(1).copied().unwrap_or(f64::NAN)),
                format!("{}", s.median_eps),
                format!("{}", s.eps_delta_pct),
            ]
        })
        .collect()
}

fn row_tsv_rows(rows: &[crate::training::AblationRow]) -> Vec<Vec<String>> {
    rows.iter()
        .map(|r| {
            let mut cells = vec![r.name.clone(), r.seed.to_string()];
            cells.extend(r.eval_ne.iter().map(|v| v.to_string()));
            cells.push(r.examples_per_second.to_string());
            cells.push(r.train_seconds.to_string());
            cells
        })
        .collect()
}

const ROW_HEADERS: [&str; 6] = ["config", "seed", "ne_task0", "ne_task1", "examples_per_s", "train_s"];

fn run_ablate(args: AblateArgs, map: &HashMap<String, String>) -> Result<()> {
    let data_path: PathBuf = resolve_required(args.data, map, "data")?;
    let seeds = parse_list::<u64>(&resolve(args.seeds, map, "seeds", "0,1,2".to_string())?, "seeds")?;
    let additions = resolve(args.additions, map, "additions", true)?;
    let defaults = TrainConfig::default();
    let train_cfg = TrainConfig {
        epochs: resolve(args.epochs, map, "epochs", defaults.epochs)?,
        optimizer: AdamConfig::with_lr(resolve(args.lr, map, "lr", defaults.optimizer.lr)?),
        batch: resolve(args.batch, map, "batch", defaults.batch)?,
        ..defaults
    };
    let data = read_requests_jsonl(&data_path)?;
    let mut base = ModelConfig::desk_default();
    let vocab_floor = Some(max_token(&data) + 1).filter(|&v| v > base.moa.vocab_size);
    apply_moa_overrides(
        &mut base,
        resolve_opt(args.seq_len, map, "seq_len")?,
        resolve_opt(args.embed_dim, map, "embed_dim")?,
        None,
        None,
        vocab_floor,
    );

    let report = run_variant_table(&base, &data, &train_cfg, &seeds, additions)?;
    print!("{}", ablation_table(&report));

    if let Some(dir) = resolve_opt::<PathBuf>(args.out, map, "out")? {
        fs::create_dir_all(&dir)?;
        write_tsv(&dir.join("rows.tsv"), &ROW_HEADERS, &row_tsv_rows(&report.rows))?;
        write_tsv(
            &dir.join("summary.tsv"),
            &["config", "ne_task0", "dne0_pct", "ne_task1", "dne1_pct", "examples_per_s", "deps_pct"],
            &summary_tsv_rows(&report),
        )?;
        fs::write(dir.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
        println!("reports -> {}", dir.display());
    }
    Ok(())
}

fn sweep_table(report: &SweepReport) -> String {
    let rows: Vec<Vec<String>> = report
        .points
        .iter()
        .map(|p| {
            vec![
                match p.stochastic_target {
                    Some(t) => format!("n={} sl={t}", p.seq_len),
                    None => format!("n={}", p.seq_len),
                },
                format!("{:.5}", p.median_ne[0]),
                format!("{:.5}", p.median_ne.get(1).copied().unwrap_or(f64::NAN)),
                format!("{:.0}", p.median_eps),
            ]
        })
        .collect();
    render_table(&["setting", "E-task NE", "C-task NE", "ex/s"], &rows)
}

fn run_sweep(args: SweepArgs, map: &HashMap<String, String>) -> Result<()> {
    let data_path: PathBuf = resolve_required(args.data, map, "data")?;
    let seeds = parse_list::<u64>(&resolve(args.seeds, map, "seeds", "0,1,2".to_string())?, "seeds")?;
    let lens = parse_list::<usize>(&resolve(args.lens, map, "lens", "16,32,64".to_string())?, "lens")?;
    let sl_target = resolve_opt(args.sl_target, map, "sl_target")?;
    let defaults = TrainConfig::default();
    let train_cfg = TrainConfig {
        epochs: resolve(args.epochs, map, "epochs", defaults.epochs)?,
        optimizer: AdamConfig::with_lr(resolve(args.lr, map, "lr", defaults.optimizer.lr)?),
        batch: resolve(args.batch, map, "batch", defaults.batch)?,
        ..defaults
    };
    let data = read_requests_jsonl(&data_path)?;
    let mut base = ModelConfig::desk_default();
    let vocab_floor = Some(max_token(&data) + 1).filter(|&v| v > base.moa.vocab_size);
    apply_moa_overrides(
        &mut base,
        None,
        resolve_opt(args.embed_dim, map, "embed_dim")?,
        None,
        None,
        vocab_floor,
    );

    let report = run_seqlen_sweep(&base, &data, &train_cfg, &seeds, &lens, sl_target)?;
    print!("{}", sweep_table(&report));

    if let Some(dir) = resolve_opt::<PathBuf>(args.out, map, "out")? {
        fs::create_dir_all(&dir)?;
        write_tsv(&dir.join("rows.tsv"), &ROW_HEADERS, &row_tsv_rows(&report.rows))?;
        let point_rows: Vec<Vec<String>> = report
            .points
            .iter()
            .map(|p| {
                vec![
                    p.seq_len.to_string(),
                    p.stochastic_target.map_or(String::new(), |t| t.to_string()),
                    p.median_ne[0].to_string(),
                    p.median_ne.get(1).copied().unwrap_or(f64::NAN).to_string(),
                    p.median_eps.to_string(),
                ]
            })
            .collect();
        write_tsv(
            &dir.join("sweep.tsv"),
            &["seq_len", "sl_target", "ne_task0", "ne_task1", "examples_per_s"],
            &point_rows,
        )?;
        fs::write(dir.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
        println!("reports -> {}", dir.display());
    }
    Ok(())
}

fn run_serve_bench(args: ServeBenchArgs, map: &HashMap<String, String>) -> Result<()> {
    let items = resolve(args.items, map, "items", 10_000u32)?;
    let candidates = resolve(args.candidates, map, "candidates", 128usize)?;
    let requests = resolve(args.requests, map, "requests", 200usize)?;
    let events_min = resolve(args.events_min, map, "events_min", 12usize)?;
    let events_max = resolve(args.events_max, map, "events_max", 40usize)?;
    let variant = parse_variant(&resolve(
        args.variant,
        map,
        "variant",
        "two_tower_baseline".to_string(),
    )?)?;
    let seed = resolve(args.seed, map, "seed", 0u64)?;

    let d = SyntheticSpec::desk_default();
    if items % d.topics != 0 {
        return Err(GesrError::Usage(format!(
            "--items must be a multiple of {} (topic count), got {items}",
            d.topics
        )));
    }
    let spec = SyntheticSpec {
        vocab_size: items,
        users: requests,
        requests_per_user: 1,
        events_min,
        events_max,
        candidates,
        seed,
        ..d
    };
    let data = generate_synthetic(&spec)?;
    let corpus: Vec<_> = (0..items).map(|p| make_candidate(p, &spec)).collect();

    let mut base = ModelConfig::desk_default();
    base.moa.vocab_size = items;
    let model = GesrModel::new(variant.configure(&base), seed ^ 0x5EB)?;
    let index = precompute_item_cache(&corpus, &model)?;

    let direct = bench_throughput(&model, &index, &data, BenchMode::Direct)?;
    let cached = bench_throughput(&model, &index, &data, BenchMode::Cached)?;
    if direct.logit_checksum != cached.logit_checksum {
        return Err(GesrError::Contract(format!(
            "score checksums diverged: direct {} vs cached {}",
            direct.logit_checksum, cached.logit_checksum
        )));
    }

    let row = |r: &ThroughputReport| {
        vec![
            r.mode.clone(),
            format!("{:.1}", r.requests_per_second),
            format!("{:.3}", r.p50_ms),
            format!("{:.3}", r.p99_ms),
        ]
    };
    println!(
        "{} on {items} items, {requests} requests x {candidates} candidates",
        variant.name()
    );
    print!(
        "{}",
        render_table(&["mode", "req/s", "p50 ms", "p99 ms"], &[row(&direct), row(&cached)])
    );
    println!(
        "cached/direct speedup: {:.2}x (scores bit-identical)",
        cached.requests_per_second / direct.requests_per_second
    );

    if let Some(path) = resolve_opt::<PathBuf>(args.out, map, "out")? {
        let tsv_row = |r: &ThroughputReport| {
            vec![
                r.mode.clone(),
                r.requests.to_string(),
                r.requests_per_second.to_string(),
                r.p50_ms.to_string(),
                r.p99_ms.to_string(),
            ]
        };
        write_tsv(
            &path,
            &["mode", "requests", "requests_per_s", "p50_ms", "p99_ms"],
            &[tsv_row(&direct), tsv_row(&cached)],
        )?;
        println!("report -> {}", path.display());
    }
    Ok(())
}

fn run_verify(args: VerifyArgs, map: &HashMap<String, String>) -> Result<()> {
    let seed = resolve(args.seed, map, "seed", 0u64)?;
    let report = verify::run_all(seed);
    print!("{}", report.render());
    if report.all_passed() {
        Ok(())
    } else {
        Err(GesrError::Contract("verification failed".to_string()))
    }
}

/// Executes one parsed command. The binary maps errors to exit codes:
/// usage errors exit 2, everything else exits 1.
pub fn run(cli: Cli) -> Result<()> {
    let map = match &cli.config {
        Some(path) => load_config_map(path)?,
        None => HashMap::new(),
    };
    match cli.command {
        Command::GenData(args) => run_gen_data(args, &map),
        Command::Train(args) => run_train(args, &map),
        Command::Ablate(args) => run_ablate(args, &map),
        Command::SweepSeqlen(args) => run_sweep(args, &map),
        Command::ServeBench(args) => run_serve_bench(args, &map),
        Command::Verify(args) => run_verify(args, &map),
    }
}
