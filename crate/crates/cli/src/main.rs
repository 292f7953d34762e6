//! Command-line entry points wiring every subsystem into reproducible
//! experiments.
//!
//! Machine-readable output (JSON lines) goes to stdout; human-readable
//! progress and warnings go to stderr. Exit codes: 0 on success, 1 on
//! usage errors, 2 on data or contract errors.

mod config;

use anyhow::{anyhow, bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use config::RunConfig;
use ctxbias_core::biasing::{assemble_inference_list, mine_hard_negatives, BiasingList, Entity, EntitySpan};
use ctxbias_core::hef::{attention_grid, decode, HefConfig, HefMode};
use ctxbias_core::metrics::evaluate;
use ctxbias_core::model::{Model, ModelConfig, Vocab};
use ctxbias_core::numerics::{primitive_battery, ParamStore};
use ctxbias_core::phonology::PhonemeInventory;
use ctxbias_core::synth::{generate, SynthOutput, Utterance};
use ctxbias_core::training::{
    attention_probe, full_loss_grad_check, train, AblationPreset,
};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "ctxbias", version, about = "Contextual-biasing ASR testbed")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus into a data directory.
    GenData(GenDataArgs),
    /// Train a model and write the best-dev checkpoint.
    Train(TrainArgs),
    /// Decode the test split against a biasing list.
    Decode(DecodeArgs),
    /// Score hypotheses against references.
    Eval(EvalArgs),
    /// Mine hard negatives for every entity of a biasing list.
    Mine(MineArgs),
    /// Finite-difference checks over the numeric primitives.
    Gradcheck(GradcheckArgs),
    /// Run one ablation row end to end.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Biasing-list TSV used for every utterance.
    #[arg(long)]
    bias: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    k: usize,
    #[arg(long, default_value_t = 0.9)]
    sigma: f64,
    #[arg(long, value_enum, default_value_t = ModeArg::Copy)]
    mode: ModeArg,
    /// Step-level JSON-lines trace output.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Plain-text attention-grid companion output.
    #[arg(long)]
    grid: Option<PathBuf>,
    /// Decode without pre-selection, filtering, or gating.
    #[arg(long, default_value_t = false)]
    no_hef: bool,
    #[arg(long, default_value_t = 40)]
    max_len: usize,
    /// Which corpus file of the data directory to decode.
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Soft,
    Copy,
}

impl From<ModeArg> for HefMode {
    fn from(m: ModeArg) -> HefMode {
        match m {
            ModeArg::Soft => HefMode::Soft,
            ModeArg::Copy => HefMode::Copy,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long)]
    spans: PathBuf,
    #[arg(long)]
    baseline: Option<PathBuf>,
}

#[derive(Args)]
struct MineArgs {
    #[arg(long)]
    bias: PathBuf,
    #[arg(long, default_value_t = 1)]
    min: usize,
    #[arg(long, default_value_t = 3)]
    max: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Also check the complete combined objective on a micro-batch.
    #[arg(long, default_value_t = false)]
    full: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    preset: String,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "ablate-out")]
    out: PathBuf,
    /// Distractors per utterance in the inference biasing list.
    #[arg(long, default_value_t = 50)]
    distractors: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Decode(args) => cmd_decode(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Mine(args) => cmd_mine(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Ablate(args) => cmd_ablate(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn cmd_gen_data(args: GenDataArgs) -> Result<ExitCode> {
    let cfg = load_config(&args.config)?;
    let out = generate(&cfg.synth)?;
    out.write_dir(&args.out)?;
    let summary = serde_json::json!({
        "train": out.train.len(),
        "dev": out.dev.len(),
        "test": out.test.len(),
        "entities": out.inventory.num_entities(),
        "lexicon": out.lexicon.len(),
        "phonemes": out.phonemes.len(),
        "dir": args.out,
    });
    println!("{summary}");
    eprintln!("wrote corpus to {}", args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn build_model(cfg: &ModelConfig, data: &SynthOutput) -> Model {
    Model::new(
        cfg.clone(),
        Vocab::from_lexicon(&data.lexicon),
        data.phonemes.len(),
    )
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode> {
    let cfg = load_config(&args.config)?;
    let data_dir = args
        .data
        .or(cfg.paths.data.clone())
        .ok_or_else(|| anyhow!("no data directory: pass --data or set paths.data"))?;
    let data = SynthOutput::load_dir(&data_dir)?;
    let mut model_cfg = cfg.model.clone();
    model_cfg.feature_dim = cfg.synth.feature_dim;
    let model = build_model(&model_cfg, &data);

    let stdout = std::io::stdout();
    let outcome = train(&model, &data, &cfg.train, |record| {
        let mut lock = stdout.lock();
        let line = serde_json::to_string(record).expect("step record serialises");
        let _ = writeln!(lock, "{line}");
    })?;

    outcome.store.save(&args.out)?;
    let log_path = args.out.with_extension("log.jsonl");
    let mut log = std::fs::File::create(&log_path)?;
    for record in &outcome.log {
        serde_json::to_writer(&mut log, record)?;
        log.write_all(b"\n")?;
    }
    for record in &outcome.log {
        println!("{}", serde_json::to_string(record)?);
    }
    eprintln!(
        "checkpoint (best epoch {}) written to {}; epoch log at {}",
        outcome.best_epoch,
        args.out.display(),
        log_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize, Deserialize)]
struct HypLine {
    id: usize,
    tokens: Vec<String>,
}

#[derive(Serialize)]
struct TraceLine<'a> {
    utterance: usize,
    #[serde(flatten)]
    step: &'a ctxbias_core::hef::StepTrace,
}

fn cmd_decode(args: DecodeArgs) -> Result<ExitCode> {
    let data = SynthOutput::load_dir(&args.data)?;
    let store = ParamStore::load(&args.ckpt)?;
    let mut model_cfg = ModelConfig::infer_from_store(&store)?;
    model_cfg.feature_dim = data
        .test
        .first()
        .and_then(|u| u.frames.first())
        .map(|f| f.len())
        .unwrap_or(model_cfg.feature_dim);
    let model = build_model(&model_cfg, &data);

    let list = match &args.bias {
        Some(path) => BiasingList::load(path, &data.phonemes)?,
        None => BiasingList::new(&data.phonemes),
    };
    let hef = HefConfig {
        k: args.k,
        sigma: args.sigma,
        mode: args.mode.into(),
        enabled: !args.no_hef,
    };
    let split = match args.split.as_str() {
        "train" => &data.train,
        "dev" => &data.dev,
        "test" => &data.test,
        other => bail!("unknown split `{other}`"),
    };

    let mut trace_file = match &args.trace {
        Some(p) => Some(std::fs::File::create(p)?),
        None => None,
    };
    let mut grid_file = match &args.grid {
        Some(p) => Some(std::fs::File::create(p)?),
        None => None,
    };

    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    for u in split {
        let out = decode(&model, &store, &u.frames, &list, &hef, args.max_len)?;
        if out.truncated {
            eprintln!("utterance {} truncated at {} tokens", u.id, args.max_len);
        }
        if let Some(f) = trace_file.as_mut() {
            for step in &out.trace {
                let line = TraceLine {
                    utterance: u.id,
                    step,
                };
                serde_json::to_writer(&mut *f, &line)?;
                f.write_all(b"\n")?;
            }
        }
        if let Some(f) = grid_file.as_mut() {
            writeln!(f, "# utterance {}", u.id)?;
            f.write_all(attention_grid(&out.trace, &list).as_bytes())?;
            f.write_all(b"\n")?;
        }
        let line = HypLine {
            id: u.id,
            tokens: out.token_strings(&model),
        };
        writeln!(lock, "{}", serde_json::to_string(&line)?)?;
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Deserialize)]
struct SpanLine {
    id: usize,
    spans: Vec<EntitySpan>,
}

fn read_hyp_lines(path: &Path) -> Result<Vec<HypLine>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line)?);
    }
    Ok(out)
}

fn cmd_eval(args: EvalArgs) -> Result<ExitCode> {
    let refs = read_hyp_lines(&args.reference)?;
    let hyps = read_hyp_lines(&args.hyp)?;
    let spans_text = std::fs::read_to_string(&args.spans)?;
    let mut spans_by_id: HashMap<usize, Vec<EntitySpan>> = HashMap::new();
    for line in spans_text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let s: SpanLine = serde_json::from_str(line)?;
        spans_by_id.insert(s.id, s.spans);
    }
    let hyp_by_id: HashMap<usize, &Vec<String>> =
        hyps.iter().map(|h| (h.id, &h.tokens)).collect();

    let mut ref_pairs: Vec<(Vec<String>, Vec<EntitySpan>)> = Vec::new();
    let mut hyp_tokens: Vec<Vec<String>> = Vec::new();
    for r in &refs {
        let h = hyp_by_id
            .get(&r.id)
            .ok_or_else(|| anyhow!("hypothesis missing for utterance {}", r.id))?;
        let spans = spans_by_id.get(&r.id).cloned().unwrap_or_default();
        ref_pairs.push((r.tokens.clone(), spans));
        hyp_tokens.push((*h).clone());
    }

    let baseline_tokens: Option<Vec<Vec<String>>> = match &args.baseline {
        None => None,
        Some(path) => {
            let base = read_hyp_lines(path)?;
            let by_id: HashMap<usize, &Vec<String>> =
                base.iter().map(|h| (h.id, &h.tokens)).collect();
            let mut rows = Vec::new();
            for r in &refs {
                let h = by_id
                    .get(&r.id)
                    .ok_or_else(|| anyhow!("baseline missing for utterance {}", r.id))?;
                rows.push((*h).clone());
            }
            Some(rows)
        }
    };

    let report = evaluate(&ref_pairs, &hyp_tokens, baseline_tokens.as_deref())?;
    println!("{}", serde_json::to_string(&report)?);
    eprint!("{}", report.table());
    Ok(ExitCode::SUCCESS)
}

fn cmd_mine(args: MineArgs) -> Result<ExitCode> {
    if args.min < 1 || args.max > 3 || args.min > args.max {
        bail!("negative counts must satisfy 1 <= min <= max <= 3");
    }
    let mut inv = PhonemeInventory::new();
    let list = BiasingList::load_interning(&args.bias, &mut inv)?;
    let pool: Vec<Entity> = list.entries()[1..].to_vec();
    let mut out = String::new();
    for e in &pool {
        let set = mine_hard_negatives(e, &pool, args.max);
        if set.negative_ids.len() < args.min {
            eprintln!(
                "warning: entity {} has only {} usable negatives (requested at least {})",
                e.id,
                set.negative_ids.len(),
                args.min
            );
        }
        let ids: Vec<String> = set.negative_ids.iter().map(|i| i.to_string()).collect();
        out.push_str(&format!("{}\t{}\n", e.id, ids.join(" ")));
    }
    std::fs::write(&args.out, out)?;
    eprintln!("wrote negatives for {} entities to {}", pool.len(), args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<ExitCode> {
    let mut all_ok = true;
    let battery = primitive_battery()?;
    for entry in &battery {
        let ok = entry.max_rel_err < 1e-6;
        all_ok &= ok;
        println!(
            "{} {:<12} max_rel_err={:.3e} (threshold 1e-6)",
            if ok { "PASS" } else { "FAIL" },
            entry.name,
            entry.max_rel_err
        );
    }
    if args.full {
        let (err, coords) = full_loss_grad_check(1e-4)?;
        let ok = err < 1e-4;
        all_ok &= ok;
        println!(
            "{} {:<12} max_rel_err={:.3e} over {} coordinates (threshold 1e-4)",
            if ok { "PASS" } else { "FAIL" },
            "full-loss",
            err,
            coords
        );
    }
    Ok(if all_ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

/// Per-utterance inference list: its ground-truth entities plus
/// phonemically nearby distractors drawn from the rest of the inventory.
fn inference_list_for(
    u: &Utterance,
    data: &SynthOutput,
    distractors: usize,
) -> Result<BiasingList> {
    let gt: Vec<Entity> = u
        .spans
        .iter()
        .map(|s| {
            let idx = data
                .inventory
                .index_of_entity_id(s.bias_id)
                .ok_or_else(|| anyhow!("entity {} not in inventory", s.bias_id))?;
            Ok(data.inventory.entry(idx).clone())
        })
        .collect::<Result<_>>()?;
    let pool: Vec<Entity> = data
        .inventory
        .entries()
        .iter()
        .skip(1)
        .filter(|e| !gt.iter().any(|g| g.id == e.id))
        .cloned()
        .collect();
    Ok(assemble_inference_list(
        &gt,
        &pool,
        distractors,
        0xB1A5 ^ u.id as u64,
        &data.phonemes,
    )?)
}

fn cmd_ablate(args: AblateArgs) -> Result<ExitCode> {
    let preset = AblationPreset::parse(&args.preset)
        .ok_or_else(|| anyhow!(
            "unknown preset `{}`; expected one of full, no-hef, no-ced, no-ced-entity, no-phoneme-encoder, no-text-encoder",
            args.preset
        ))?;
    let cfg = load_config(&args.config)?;
    let mut model_cfg = cfg.model.clone();
    model_cfg.feature_dim = cfg.synth.feature_dim;
    let mut train_cfg = cfg.train.clone();
    let mut hef_cfg = cfg.hef.clone();
    preset.apply(&mut model_cfg, &mut train_cfg, &mut hef_cfg);

    std::fs::create_dir_all(&args.out)?;
    let data_dir = args.out.join("data");
    let data = if data_dir.join("lexicon.tsv").exists() {
        eprintln!("reusing corpus at {}", data_dir.display());
        SynthOutput::load_dir(&data_dir)?
    } else {
        let out = generate(&cfg.synth)?;
        out.write_dir(&data_dir)?;
        out
    };
    let model = build_model(&model_cfg, &data);

    eprintln!("training preset `{}`", preset.name());
    let outcome = train(&model, &data, &train_cfg, |r| {
        if r.step % 50 == 0 {
            eprintln!("  step {}: total {:.3}", r.step, r.losses.total);
        }
    })?;
    let ckpt = args.out.join(format!("{}.ckpt", preset.name()));
    outcome.store.save(&ckpt)?;

    // Decode with per-utterance lists, and with the no-bias list as the
    // in-run baseline.
    let mut refs: Vec<(Vec<String>, Vec<EntitySpan>)> = Vec::new();
    let mut hyps: Vec<Vec<String>> = Vec::new();
    let mut base: Vec<Vec<String>> = Vec::new();
    let nobias = BiasingList::new(&data.phonemes);
    for u in &data.test {
        let list = inference_list_for(u, &data, args.distractors)?;
        let max_len = u.tokens.len() + 8;
        let biased = decode(&model, &outcome.store, &u.frames, &list, &hef_cfg, max_len)?;
        let plain = decode(&model, &outcome.store, &u.frames, &nobias, &hef_cfg, max_len)?;
        refs.push((u.tokens.clone(), u.spans.clone()));
        hyps.push(biased.token_strings(&model));
        base.push(plain.token_strings(&model));
    }
    let report = evaluate(&refs, &hyps, Some(&base))?;
    let probe = attention_probe(&model, &outcome.store, &data, &data.test, &train_cfg)?;

    let row = serde_json::json!({
        "preset": preset.name(),
        "report": report,
        "gt_top_fraction": probe.gt_top_fraction,
        "entity_steps": probe.entity_steps,
        "checkpoint": ckpt,
    });
    println!("{row}");
    eprintln!("preset {}: {}", preset.name(), report.table());
    Ok(ExitCode::SUCCESS)
}
