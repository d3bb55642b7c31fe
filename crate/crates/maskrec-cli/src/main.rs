//! Command-line entry point: reproducible experiment pipelines over the
//! library crate.
//!
//! Subcommands: `synth`, `quantize`, `train`, `decode`, `eval`,
//! `benchmark`. Every run writes its effective configuration and
//! artifacts into `--out-dir`. Exit codes: 0 success, 1 runtime failure,
//! 2 usage/config error; failures print one `error: ...` line on stderr.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use maskrec::codebook::{CodebookSet, InverseIndex, Sid};
use maskrec::config::Config;
use maskrec::data::{
    generate_synthetic, load_interactions, load_items, save_interactions, save_items,
    BatchIterator, InteractionLog, ItemCatalog, SynthConfig, SynthMode,
};
use maskrec::decoder::{decode_top_b, sids_to_items};
use maskrec::eval::{
    benchmark_csv, benchmark_decoding, benchmark_table, evaluate_model, leave_one_out_split,
    EvalContext, EvalTarget,
};
use maskrec::model::{encode_history_infer, init_params, ModelConfig};
use maskrec::numerics::{AdamState, ParamSet, Rng};
use maskrec::trainer::{load_checkpoint, save_checkpoint, train_loop};

enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<maskrec::Error> for CliError {
    fn from(e: maskrec::Error) -> Self {
        match e {
            maskrec::Error::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(format!("io error: {e}"))
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

const USAGE: &str = "\
usage: maskrec <command> [flags]

commands:
  synth      generate a synthetic dataset
             --out-dir DIR [--users N] [--items N] [--attrs L] [--vocab V]
             [--mode deterministic-next|preference] [--dim-per-attr D]
             [--noise S] [--min-len N] [--max-len N] [--rot-attrs N] [--seed S]
  quantize   fit codebooks on item embeddings
             --items FILE --out-dir DIR [--config FILE] [--seed S] [--paper-scale]
  train      train the denoiser
             --items FILE --interactions FILE --codebook FILE --out-dir DIR
             [--config FILE] [--seed S] [--steps N] [--resume CKPT] [--paper-scale]
  decode     emit Top-K items per user
             --checkpoint CKPT --codebook FILE --items FILE --interactions FILE
             --out-dir DIR [--config FILE] [--seed S]
  eval       leave-one-out Recall/NDCG
             same inputs as decode, plus [--split test|valid]
  benchmark  decoding steps / QPS over a (R_warm, m_par) grid
             --codebook FILE --items FILE --interactions FILE --out-dir DIR
             [--checkpoint CKPT] [--config FILE] [--seed S]

global flags: --config FILE, --seed N (default 0), --out-dir DIR,
--paper-scale (reference-scale model preset), --help

config keys and defaults (for `key = value` config files):
";

struct Args {
    flags: HashMap<String, String>,
    switches: Vec<String>,
}

const SWITCHES: &[&str] = &["paper-scale", "help"];

impl Args {
    fn parse(argv: &[String]) -> Result<Args, CliError> {
        let mut flags = HashMap::new();
        let mut switches = Vec::new();
        let mut i = 0;
        while i < argv.len() {
            let arg = &argv[i];
            let name = arg
                .strip_prefix("--")
                .ok_or_else(|| usage(format!("unexpected argument {arg:?}")))?;
            if let Some((k, v)) = name.split_once('=') {
                flags.insert(k.to_string(), v.to_string());
            } else if SWITCHES.contains(&name) {
                switches.push(name.to_string());
            } else {
                i += 1;
                let v = argv
                    .get(i)
                    .ok_or_else(|| usage(format!("flag --{name} needs a value")))?;
                flags.insert(name.to_string(), v.clone());
            }
            i += 1;
        }
        Ok(Args { flags, switches })
    }

    fn get(&self, name: &str) -> Option<&str> {
        self.flags.get(name).map(|s| s.as_str())
    }

    fn require(&self, name: &str) -> Result<&str, CliError> {
        self.get(name)
            .ok_or_else(|| usage(format!("missing required flag --{name}")))
    }

    fn get_parsed<T: std::str::FromStr>(&self, name: &str, default: T) -> Result<T, CliError> {
        match self.get(name) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| usage(format!("bad value {v:?} for --{name}"))),
        }
    }

    fn has(&self, name: &str) -> bool {
        self.switches.iter().any(|s| s == name)
    }
}

fn main() {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    match run(&argv) {
        Ok(()) => {}
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(2);
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(1);
        }
    }
}

fn run(argv: &[String]) -> Result<(), CliError> {
    if argv.is_empty() || argv[0] == "--help" || argv[0] == "help" {
        print!("{USAGE}{}", Config::documented_defaults());
        return Ok(());
    }
    let command = argv[0].as_str();
    let args = Args::parse(&argv[1..])?;
    if args.has("help") {
        print!("{USAGE}{}", Config::documented_defaults());
        return Ok(());
    }
    match command {
        "synth" => cmd_synth(&args),
        "quantize" => cmd_quantize(&args),
        "train" => cmd_train(&args),
        "decode" => cmd_decode(&args),
        "eval" => cmd_eval(&args),
        "benchmark" => cmd_benchmark(&args),
        other => Err(usage(format!("unknown command {other:?} (try --help)"))),
    }
}

// ── shared setup ────────────────────────────────────────────────────────

fn load_config(args: &Args) -> Result<Config, CliError> {
    let mut cfg = match args.get("config") {
        Some(path) => Config::load(Path::new(path)).map_err(|e| usage(e.to_string()))?,
        None => Config::default(),
    };
    if args.has("paper-scale") {
        cfg.apply_paper_scale();
    }
    Ok(cfg)
}

fn out_dir(args: &Args) -> Result<PathBuf, CliError> {
    let dir = PathBuf::from(args.require("out-dir")?);
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn seed_of(args: &Args) -> Result<u64, CliError> {
    args.get_parsed("seed", 0u64)
}

fn echo_config(cfg: &Config, dir: &Path) -> Result<(), CliError> {
    std::fs::write(dir.join("config.resolved"), cfg.echo())?;
    Ok(())
}

struct Pipeline {
    catalog: ItemCatalog,
    log: InteractionLog,
    item_sids: Vec<Sid>,
    index: InverseIndex,
    model_cfg: ModelConfig,
}

fn load_pipeline(args: &Args, cfg: &Config) -> Result<Pipeline, CliError> {
    let catalog = load_items(Path::new(args.require("items")?))?;
    if catalog.is_empty() {
        return Err(CliError::Runtime("item catalog is empty".into()));
    }
    let log = load_interactions(Path::new(args.require("interactions")?), &catalog)?;
    let codebooks = CodebookSet::load_json(Path::new(args.require("codebook")?))?;
    let item_sids: Vec<Sid> = (0..catalog.len())
        .map(|i| codebooks.quantize(catalog.embedding(i)))
        .collect::<maskrec::Result<_>>()?;
    let index = InverseIndex::build(&catalog, &codebooks)?;
    let model_cfg = cfg.model_config(codebooks.vocab_sizes());
    model_cfg.validate()?;
    Ok(Pipeline {
        catalog,
        log,
        item_sids,
        index,
        model_cfg,
    })
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Runtime(format!("serialize report: {e}")))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

// ── subcommands ─────────────────────────────────────────────────────────

fn cmd_synth(args: &Args) -> Result<(), CliError> {
    let dir = out_dir(args)?;
    let seed = seed_of(args)?;
    let mode = SynthMode::parse(args.get("mode").unwrap_or("deterministic-next"))
        .map_err(|e| usage(e.to_string()))?;
    let synth = SynthConfig {
        n_users: args.get_parsed("users", 1000)?,
        n_items: args.get_parsed("items", 256)?,
        n_attrs: args.get_parsed("attrs", 4)?,
        vocab_per_attr: args.get_parsed("vocab", 16)?,
        dim_per_attr: args.get_parsed("dim-per-attr", 16)?,
        noise: args.get_parsed("noise", 0.05)?,
        mode,
        min_len: args.get_parsed("min-len", 6)?,
        max_len: args.get_parsed("max-len", 12)?,
        rot_attrs: args.get_parsed("rot-attrs", 0)?,
    };
    let (catalog, log) = generate_synthetic(&synth, &Rng::new(seed))?;
    save_items(&catalog, &dir.join("items.jsonl"))?;
    save_interactions(&log, &catalog, &dir.join("interactions.jsonl"))?;
    let meta = serde_json::json!({
        "users": synth.n_users,
        "items": synth.n_items,
        "attrs": synth.n_attrs,
        "vocab": synth.vocab_per_attr,
        "dim_per_attr": synth.dim_per_attr,
        "noise": synth.noise,
        "mode": match mode {
            SynthMode::DeterministicNext => "deterministic-next",
            SynthMode::Preference => "preference",
        },
        "min_len": synth.min_len,
        "max_len": synth.max_len,
        "rot_attrs": synth.rot_attrs,
        "seed": seed,
    });
    write_json(&dir.join("synth.json"), &meta)?;
    println!(
        "wrote {} items and {} users to {}",
        catalog.len(),
        log.len(),
        dir.display()
    );
    Ok(())
}

fn cmd_quantize(args: &Args) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    let dir = out_dir(args)?;
    let seed = seed_of(args)?;
    echo_config(&cfg, &dir)?;
    let catalog = load_items(Path::new(args.require("items")?))?;
    if catalog.is_empty() {
        return Err(CliError::Runtime("item catalog is empty".into()));
    }
    let cb_cfg = cfg.codebook_config()?;
    let embeddings: Vec<&[f64]> = (0..catalog.len()).map(|i| catalog.embedding(i)).collect();
    let codebooks = CodebookSet::fit(
        &embeddings,
        catalog.dim(),
        &cb_cfg,
        &Rng::new(seed).derive("quantize"),
    )?;
    codebooks.save_json(&dir.join("codebook.json"))?;
    let index = InverseIndex::build(&catalog, &codebooks)?;
    let stats = index.collision_stats();
    write_json(&dir.join("quantize_report.json"), &stats)?;
    println!(
        "codebook: L = {}, |V| = {:?}; {} items -> {} distinct SIDs \
         (collision rate {:.4}, max bucket {})",
        codebooks.l(),
        codebooks.vocab_sizes(),
        stats.total_items,
        stats.distinct_sids,
        stats.collision_rate,
        stats.max_bucket
    );
    Ok(())
}

fn cmd_train(args: &Args) -> Result<(), CliError> {
    let mut cfg = load_config(args)?;
    if let Some(steps) = args.get("steps") {
        cfg.set("train.steps", steps)
            .map_err(|e| usage(e.to_string()))?;
    }
    let dir = out_dir(args)?;
    let seed = seed_of(args)?;
    echo_config(&cfg, &dir)?;
    let mut pipe = load_pipeline(args, &cfg)?;
    let min_inter = cfg.get_usize("train.min_interactions");
    if min_inter > 0 {
        pipe.log = pipe.log.filter_min_interactions(min_inter);
    }
    if pipe.log.is_empty() {
        return Err(CliError::Runtime("no users left to train on".into()));
    }
    let train_cfg = cfg.train_config(seed)?;

    let (mut params, mut opt, start_step) = match args.get("resume") {
        Some(path) => {
            let ckpt = load_checkpoint(Path::new(path))?;
            (ckpt.params, ckpt.opt, ckpt.step)
        }
        None => {
            let params = init_params(&pipe.model_cfg, &Rng::new(seed).derive("init"))?;
            let opt = AdamState::new(&params);
            (params, opt, 0)
        }
    };

    // Train on everything except each user's final (test) interaction,
    // so the leave-one-out test item never appears as a target.
    let splits = leave_one_out_split(&pipe.log)?;
    let mut train_log = InteractionLog::new();
    for u in 0..pipe.log.len() {
        let items = pipe.log.items(u);
        if items.len() < 2 {
            continue;
        }
        train_log.push(pipe.log.user(u).to_string(), items[..items.len() - 1].to_vec());
    }
    let window = pipe.model_cfg.max_history + 1;
    let mut batches = BatchIterator::new(
        &train_log,
        window,
        train_cfg.batch_size,
        Rng::new(seed).derive("batches"),
    )?;

    let metrics_path = dir.join("metrics.jsonl");
    let mut metrics = std::io::BufWriter::new(std::fs::File::create(&metrics_path)?);
    let eval_users = cfg.get_usize("train.eval_users");
    let decode_cfg = cfg.decode_config();
    let use_difficulty = !train_cfg.ablation.no_difficulty_vector;

    {
        let item_sids = pipe.item_sids.clone();
        let index = &pipe.index;
        let model_cfg = &pipe.model_cfg;
        let eval_splits: Vec<_> = if eval_users == 0 {
            splits.clone()
        } else {
            splits.iter().take(eval_users).cloned().collect()
        };
        let mut next_pairs = || batches.next_batch();
        train_loop(
            &mut next_pairs,
            &pipe.item_sids,
            &mut params,
            &mut opt,
            start_step,
            model_cfg,
            &train_cfg,
            Some(&mut metrics),
            |_step, params| {
                if eval_splits.is_empty() {
                    return Ok(None);
                }
                let ctx = EvalContext {
                    params,
                    model_cfg,
                    item_sids: &item_sids,
                    index,
                    decode_cfg: &decode_cfg,
                    use_difficulty,
                };
                let report = evaluate_model(&ctx, &eval_splits, EvalTarget::Validation, seed)?;
                Ok(Some(serde_json::json!({
                    "recall@5": report.recall_at_5,
                    "recall@10": report.recall_at_10,
                    "ndcg@5": report.ndcg_at_5,
                    "ndcg@10": report.ndcg_at_10,
                    "users": report.users,
                })))
            },
        )?;
    }
    metrics.flush()?;

    let final_step = start_step + train_cfg.total_steps;
    let ckpt_path = dir.join("checkpoint.bin");
    save_checkpoint(&params, &opt, final_step, &ckpt_path)?;
    println!(
        "trained {} steps (through step {}); checkpoint at {}",
        train_cfg.total_steps,
        final_step,
        ckpt_path.display()
    );
    Ok(())
}

fn cmd_decode(args: &Args) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    let dir = out_dir(args)?;
    let seed = seed_of(args)?;
    echo_config(&cfg, &dir)?;
    let pipe = load_pipeline(args, &cfg)?;
    let ckpt = load_checkpoint(Path::new(args.require("checkpoint")?))?;
    let decode_cfg = cfg.decode_config();
    decode_cfg.validate(pipe.model_cfg.l)?;
    let top_k = cfg.get_usize("decode.top_k");

    let out_path = dir.join("decode.jsonl");
    let mut out = std::io::BufWriter::new(std::fs::File::create(&out_path)?);
    let root = Rng::new(seed);
    for u in 0..pipe.log.len() {
        let items = pipe.log.items(u);
        if items.is_empty() {
            continue;
        }
        let history: Vec<Sid> = items.iter().map(|&i| pipe.item_sids[i].clone()).collect();
        let enc = encode_history_infer(&ckpt.params, &pipe.model_cfg, &history)?;
        let mut rng = root.derive_index("decode/user", u as u64);
        let (beams, _) = decode_top_b(
            &ckpt.params,
            &pipe.model_cfg,
            &enc,
            &decode_cfg,
            true,
            &mut rng,
        )?;
        let ranked = sids_to_items(&beams, &pipe.index, top_k)?;
        let line = serde_json::json!({
            "user_id": pipe.log.user(u),
            "items": ranked.iter().map(|&i| pipe.catalog.id(i)).collect::<Vec<_>>(),
            "sids": beams.iter().map(|b| b.sid.tokens().to_vec()).collect::<Vec<_>>(),
            "scores": beams.iter().map(|b| b.score).collect::<Vec<_>>(),
        });
        writeln!(
            out,
            "{}",
            serde_json::to_string(&line).map_err(|e| CliError::Runtime(e.to_string()))?
        )?;
    }
    out.flush()?;
    println!("decoded {} users into {}", pipe.log.len(), out_path.display());
    Ok(())
}

fn cmd_eval(args: &Args) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    let dir = out_dir(args)?;
    let seed = seed_of(args)?;
    echo_config(&cfg, &dir)?;
    let pipe = load_pipeline(args, &cfg)?;
    let ckpt = load_checkpoint(Path::new(args.require("checkpoint")?))?;
    let target = match args.get("split").unwrap_or("test") {
        "test" => EvalTarget::Test,
        "valid" => EvalTarget::Validation,
        other => return Err(usage(format!("unknown --split {other:?}"))),
    };
    let mut splits = leave_one_out_split(&pipe.log)?;
    let cap = cfg.get_usize("eval.max_users");
    if cap > 0 {
        splits.truncate(cap);
    }
    let decode_cfg = cfg.decode_config();
    let ctx = EvalContext {
        params: &ckpt.params,
        model_cfg: &pipe.model_cfg,
        item_sids: &pipe.item_sids,
        index: &pipe.index,
        decode_cfg: &decode_cfg,
        use_difficulty: true,
    };
    let report = evaluate_model(&ctx, &splits, target, seed)?;
    write_json(&dir.join("eval.json"), &report)?;
    let table = format!(
        "users     {}\nrecall@5  {:.4}\nrecall@10 {:.4}\nndcg@5    {:.4}\nndcg@10   {:.4}\n",
        report.users,
        report.recall_at_5,
        report.recall_at_10,
        report.ndcg_at_5,
        report.ndcg_at_10
    );
    std::fs::write(dir.join("eval.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_benchmark(args: &Args) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    let dir = out_dir(args)?;
    let seed = seed_of(args)?;
    echo_config(&cfg, &dir)?;
    let pipe = load_pipeline(args, &cfg)?;
    let params: ParamSet = match args.get("checkpoint") {
        Some(path) => load_checkpoint(Path::new(path))?.params,
        // The QPS trend does not need a trained model.
        None => init_params(&pipe.model_cfg, &Rng::new(seed).derive("init"))?,
    };
    let splits = leave_one_out_split(&pipe.log)?;
    let grid = cfg.benchmark_grid().map_err(|e| usage(e.to_string()))?;
    let decode_cfg = cfg.decode_config();
    let ctx = EvalContext {
        params: &params,
        model_cfg: &pipe.model_cfg,
        item_sids: &pipe.item_sids,
        index: &pipe.index,
        decode_cfg: &decode_cfg,
        use_difficulty: true,
    };
    let warmup = cfg.get_usize("benchmark.warmup_users");
    let report = benchmark_decoding(&ctx, &splits, &grid, warmup, seed)?;
    write_json(&dir.join("benchmark.json"), &report)?;
    std::fs::write(dir.join("benchmark.csv"), benchmark_csv(&report))?;
    let table = benchmark_table(&report);
    std::fs::write(dir.join("benchmark.txt"), &table)?;
    print!("{table}");
    Ok(())
}
