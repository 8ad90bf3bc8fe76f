use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use memsg::ablate::{render_table, rows_to_csv, run_grid, summarize, Variant};
use memsg::error::DataError;
use memsg::eval::{consistency, macro_f1};
use memsg::manifest::ManifestBuilder;
use memsg::memory::{LongAnchor, MemoryConfig, MemoryMode};
use memsg::model::{infer_sequence, train, Model, ModelKind, TrainConfig};
use memsg::recording::{parse_recordings, serialize_recording, Recording};
use memsg::synth::{generate_benchmark, BenchmarkSpec, ScenarioConfig};
use memsg::vocab::Vocabulary;

#[derive(Parser)]
#[command(name = "memsg", version, about = "Scene-graph memory models for surgical video")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark (train/val/test JSONL + vocabulary)
    Synth(SynthArgs),
    /// Train a model and write a checkpoint
    Train(TrainArgs),
    /// Autoregressive inference: predictions JSONL from a checkpoint
    Infer(InferArgs),
    /// Score predictions against ground truth (macro F1, consistency)
    Eval(EvalArgs),
    /// Train an ablation grid of model variants across seeds
    Ablate(AblateArgs),
    /// Dump fusion attention weights for each timepoint
    AttnDump(AttnDumpArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    n_train: usize,
    #[arg(long, default_value_t = 1)]
    n_val: usize,
    #[arg(long, default_value_t = 1)]
    n_test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scenario description JSON; defaults to the built-in scenario
    #[arg(long)]
    scenario: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct TrainOverrides {
    /// Memory mode: all | short | long | long_short
    #[arg(long)]
    memory_mode: Option<MemoryMode>,
    /// Memory stride S
    #[arg(long)]
    stride: Option<usize>,
    /// Anchor long-range memory at the timepoint of interest or at zero
    #[arg(long)]
    long_anchor: Option<String>,
    /// Model variant: full | visual_only | lbt
    #[arg(long)]
    kind: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Weight of the main-action loss term
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    max_steps_per_epoch: Option<usize>,
    /// Hidden dimension
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    /// Probability of applying memory augmentation to a sample
    #[arg(long)]
    aug_p: Option<f64>,
    /// Fraction of the chosen segment replaced by the unknown token
    #[arg(long)]
    aug_frac: Option<f64>,
    /// Boundary between the short and long augmentation segments
    #[arg(long)]
    aug_boundary: Option<usize>,
    /// Disable timepoint-of-interest position information
    #[arg(long)]
    no_toi: bool,
    /// Disable unknown-token memory augmentation
    #[arg(long)]
    no_aug: bool,
    /// Disable the main-action auxiliary loss
    #[arg(long)]
    no_multitask: bool,
    /// Freeze the visual projection instead of training end to end
    #[arg(long)]
    freeze_visual: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Training configuration JSON; command-line flags override its fields
    #[arg(long)]
    config: Option<PathBuf>,
    /// Initialize weights from an existing checkpoint
    #[arg(long)]
    init_from: Option<PathBuf>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Count the explicit none class in the macro average
    #[arg(long)]
    include_none: bool,
    /// Comma-separated predicates ignored by the consistency metric
    #[arg(long, value_delimiter = ',')]
    consistency_exclude: Vec<String>,
    /// Write the full report JSON here (stdout summary is always printed)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Output directory for rows.csv, summary.txt and the manifest
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Variants to run (default: the full grid)
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<String>>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args)]
struct AttnDumpArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<(), DataError> {
    match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::AttnDump(a) => cmd_attn_dump(a),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T, DataError> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| DataError::Recording(format!("bad {what} file {}: {e}", path.display())))
}

fn load_vocab(path: &Path) -> Result<Vocabulary, DataError> {
    Vocabulary::from_json(&std::fs::read_to_string(path)?)
}

fn load_recordings(path: &Path, vocab: &Vocabulary) -> Result<Vec<Recording>, DataError> {
    parse_recordings(&std::fs::read_to_string(path)?, vocab)
}

fn cmd_synth(a: SynthArgs) -> Result<(), DataError> {
    let scenario: ScenarioConfig = match &a.scenario {
        Some(path) => read_json(path, "scenario")?,
        None => ScenarioConfig::default(),
    };
    let vocab = Vocabulary::default_or();
    let spec = BenchmarkSpec {
        n_train: a.n_train,
        n_val: a.n_val,
        n_test: a.n_test,
        seed: a.seed,
    };
    let mut mb = ManifestBuilder::new(
        "synth",
        serde_json::json!({"scenario": scenario, "spec": spec}),
    );
    mb.seed(a.seed);
    let files = generate_benchmark(&scenario, &vocab, &spec, &a.out)?;
    for f in &files {
        mb.output(f);
        println!("wrote {}", f.display());
    }
    mb.write(&a.out.join("manifest.json"))?;
    Ok(())
}

/// Builds the effective training configuration: defaults, then the config
/// file, then command-line flags (flags take precedence).
fn resolve_train_config(
    config_path: Option<&Path>,
    ov: &TrainOverrides,
) -> Result<TrainConfig, DataError> {
    let defaults = TrainConfig::defaults(
        ModelKind::Full,
        MemoryConfig {
            mode: MemoryMode::LongShort,
            stride: 5,
            long_anchor: LongAnchor::default(),
        },
        0,
    );
    let mut cfg = match config_path {
        None => defaults,
        Some(path) => {
            // overlay the file's fields onto the defaults so partial
            // configs are accepted
            let mut base = serde_json::to_value(&defaults)
                .map_err(|e| DataError::Recording(e.to_string()))?;
            let file: serde_json::Value = read_json(path, "config")?;
            merge_json(&mut base, file);
            serde_json::from_value(base)
                .map_err(|e| DataError::Recording(format!("bad config: {e}")))?
        }
    };
    if let Some(m) = ov.memory_mode {
        cfg.memory.mode = m;
    }
    if let Some(s) = ov.stride {
        cfg.memory.stride = s;
        cfg.aug.boundary = s;
    }
    if let Some(anchor) = &ov.long_anchor {
        cfg.memory.long_anchor = match anchor.as_str() {
            "toi" => LongAnchor::Toi,
            "start" => LongAnchor::Start,
            other => {
                return Err(DataError::Recording(format!(
                    "unknown long anchor '{other}' (expected toi|start)"
                )))
            }
        };
    }
    if let Some(kind) = &ov.kind {
        cfg.kind = match kind.as_str() {
            "full" => ModelKind::Full,
            "visual_only" => ModelKind::VisualOnly,
            "lbt" => ModelKind::Lbt,
            other => {
                return Err(DataError::Recording(format!(
                    "unknown model kind '{other}' (expected full|visual_only|lbt)"
                )))
            }
        };
    }
    if let Some(v) = ov.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = ov.lr {
        cfg.adam.lr = v;
    }
    if let Some(v) = ov.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = ov.seed {
        cfg.seed = v;
    }
    if let Some(v) = ov.patience {
        cfg.patience = v;
    }
    if let Some(v) = ov.max_steps_per_epoch {
        cfg.max_steps_per_epoch = Some(v);
    }
    if let Some(v) = ov.dim {
        cfg.encoder.d = v;
    }
    if let Some(v) = ov.layers {
        cfg.encoder.n_layers = v;
    }
    if let Some(v) = ov.heads {
        cfg.encoder.n_heads = v;
    }
    if let Some(v) = ov.aug_p {
        cfg.aug.p_apply = v;
    }
    if let Some(v) = ov.aug_frac {
        cfg.aug.short_fraction = v;
        cfg.aug.long_fraction = v;
    }
    if let Some(v) = ov.aug_boundary {
        cfg.aug.boundary = v;
    }
    if ov.no_toi {
        cfg.use_toi = false;
    }
    if ov.no_aug {
        cfg.use_augmentation = false;
    }
    if ov.no_multitask {
        cfg.use_multitask = false;
    }
    if ov.freeze_visual {
        cfg.end_to_end = false;
    }
    Ok(cfg)
}

fn merge_json(base: &mut serde_json::Value, overlay: serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn cmd_train(a: TrainArgs) -> Result<(), DataError> {
    let cfg = resolve_train_config(a.config.as_deref(), &a.overrides)?;
    let vocab = load_vocab(&a.vocab)?;
    let train_set = load_recordings(&a.train, &vocab)?;
    let val_set = match &a.val {
        Some(p) => load_recordings(p, &vocab)?,
        None => Vec::new(),
    };
    let mut mb = ManifestBuilder::new(
        "train",
        serde_json::to_value(&cfg).map_err(|e| DataError::Recording(e.to_string()))?,
    );
    mb.seed(cfg.seed);
    mb.input(&a.train)?;
    mb.input(&a.vocab)?;
    if let Some(p) = &a.val {
        mb.input(p)?;
    }
    let (model, logs) = match &a.init_from {
        Some(path) => {
            mb.input(path)?;
            let init = Model::load(path)?;
            memsg::model::train_from(&train_set, &val_set, &vocab, &cfg, Some(&init.store))?
        }
        None => train(&train_set, &val_set, &vocab, &cfg)?,
    };
    model.save(&a.out)?;
    mb.output(&a.out);
    for log in &logs {
        match log.val_macro_f1 {
            Some(f1) => println!(
                "epoch {}: loss {:.4} val macro F1 {:.4}",
                log.epoch, log.mean_loss, f1
            ),
            None => println!("epoch {}: loss {:.4}", log.epoch, log.mean_loss),
        }
    }
    println!("wrote {}", a.out.display());
    mb.write(&a.out.with_extension("manifest.json"))?;
    Ok(())
}

fn cmd_infer(a: InferArgs) -> Result<(), DataError> {
    let model = Model::load(&a.ckpt)?;
    let vocab = model.meta.vocab.clone();
    let recordings = load_recordings(&a.data, &vocab)?;
    let mut mb = ManifestBuilder::new("infer", serde_json::json!({"ckpt": a.ckpt.display().to_string()}));
    mb.input(&a.ckpt)?;
    mb.input(&a.data)?;
    let mut out = String::new();
    for r in &recordings {
        let inference = infer_sequence(r, &model)?;
        let pred = Recording {
            take_id: r.take_id.clone(),
            timepoints: inference
                .graphs
                .into_iter()
                .enumerate()
                .map(|(t, graph)| memsg::recording::Timepoint {
                    t,
                    graph,
                    pair_features: None,
                })
                .collect(),
        };
        out.push_str(&serialize_recording(&pred, &vocab));
    }
    std::fs::write(&a.out, out)?;
    mb.output(&a.out);
    println!("wrote {}", a.out.display());
    mb.write(&a.out.with_extension("manifest.json"))?;
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<(), DataError> {
    let vocab = load_vocab(&a.vocab)?;
    let preds = load_recordings(&a.pred, &vocab)?;
    let gts = load_recordings(&a.gt, &vocab)?;
    if preds.len() != gts.len() {
        return Err(DataError::Eval(format!(
            "prediction file has {} takes, ground truth has {}",
            preds.len(),
            gts.len()
        )));
    }
    let exclude: Vec<usize> = a
        .consistency_exclude
        .iter()
        .map(|name| vocab.predicate_index(name))
        .collect::<Result<_, _>>()?;
    let mut pred_graphs = Vec::new();
    let mut gt_graphs = Vec::new();
    let mut cons_sum = 0.0;
    for (p, g) in preds.iter().zip(&gts) {
        if p.take_id != g.take_id {
            return Err(DataError::Eval(format!(
                "take order mismatch: '{}' vs '{}'",
                p.take_id, g.take_id
            )));
        }
        let graphs: Vec<_> = p.timepoints.iter().map(|tp| tp.graph.clone()).collect();
        cons_sum += consistency(&graphs, &vocab, &exclude)?;
        pred_graphs.extend(graphs);
        gt_graphs.extend(g.timepoints.iter().map(|tp| tp.graph.clone()));
    }
    let mut report = macro_f1(&pred_graphs, &gt_graphs, &vocab, a.include_none)?;
    report.consistency = Some(cons_sum / preds.len() as f64);
    println!(
        "macro F1 {:.4}  consistency {:.4}",
        report.macro_f1,
        report.consistency.unwrap()
    );
    for c in &report.per_class {
        println!(
            "  {:<12} P {:.4} R {:.4} F1 {:.4} (support {})",
            c.class, c.precision, c.recall, c.f1, c.support
        );
    }
    if let Some(out) = &a.out {
        let json = serde_json::to_string_pretty(&report)
            .map_err(|e| DataError::Eval(e.to_string()))?;
        std::fs::write(out, json)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn default_variants(base: &TrainConfig) -> Vec<Variant> {
    let mk = |name: &str, f: &dyn Fn(&mut TrainConfig)| {
        let mut cfg = base.clone();
        f(&mut cfg);
        Variant {
            name: name.to_string(),
            cfg,
        }
    };
    vec![
        mk("full", &|_| {}),
        mk("visual_only", &|c| c.kind = ModelKind::VisualOnly),
        mk("lbt", &|c| c.kind = ModelKind::Lbt),
        mk("no_aug", &|c| c.use_augmentation = false),
        mk("no_toi", &|c| c.use_toi = false),
        mk("no_multitask", &|c| c.use_multitask = false),
        mk("mode_all", &|c| c.memory.mode = MemoryMode::All),
        mk("mode_short", &|c| c.memory.mode = MemoryMode::Short),
        mk("mode_long", &|c| c.memory.mode = MemoryMode::Long),
    ]
}

fn cmd_ablate(a: AblateArgs) -> Result<(), DataError> {
    let base = resolve_train_config(a.config.as_deref(), &a.overrides)?;
    let vocab = load_vocab(&a.vocab)?;
    let train_set = load_recordings(&a.train, &vocab)?;
    let val_set = match &a.val {
        Some(p) => load_recordings(p, &vocab)?,
        None => Vec::new(),
    };
    let test_set = load_recordings(&a.test, &vocab)?;
    let all = default_variants(&base);
    let variants: Vec<Variant> = match &a.variants {
        None => all,
        Some(names) => names
            .iter()
            .map(|n| {
                all.iter()
                    .find(|v| &v.name == n)
                    .cloned()
                    .ok_or_else(|| DataError::Recording(format!("unknown variant '{n}'")))
            })
            .collect::<Result<_, _>>()?,
    };
    let mut mb = ManifestBuilder::new(
        "ablate",
        serde_json::json!({
            "base": base,
            "variants": variants.iter().map(|v| v.name.clone()).collect::<Vec<_>>(),
        }),
    );
    for &s in &a.seeds {
        mb.seed(s);
    }
    mb.input(&a.train)?;
    mb.input(&a.test)?;
    mb.input(&a.vocab)?;
    let rows = run_grid(&train_set, &val_set, &test_set, &vocab, &variants, &a.seeds)?;
    std::fs::create_dir_all(&a.out)?;
    let csv_path = a.out.join("rows.csv");
    std::fs::write(&csv_path, rows_to_csv(&rows))?;
    let summary = summarize(&rows);
    let table = render_table(&summary);
    let summary_path = a.out.join("summary.txt");
    std::fs::write(&summary_path, &table)?;
    print!("{table}");
    mb.output(&csv_path);
    mb.output(&summary_path);
    mb.write(&a.out.join("manifest.json"))?;
    Ok(())
}

fn cmd_attn_dump(a: AttnDumpArgs) -> Result<(), DataError> {
    let model = Model::load(&a.ckpt)?;
    let vocab = model.meta.vocab.clone();
    let recordings = load_recordings(&a.data, &vocab)?;
    let mut mb = ManifestBuilder::new("attn-dump", serde_json::json!({"ckpt": a.ckpt.display().to_string()}));
    mb.input(&a.ckpt)?;
    mb.input(&a.data)?;
    let mut dump = serde_json::Map::new();
    for r in &recordings {
        let inference = infer_sequence(r, &model)?;
        dump.insert(
            r.take_id.clone(),
            serde_json::to_value(&inference.attention)
                .map_err(|e| DataError::Eval(e.to_string()))?,
        );
    }
    let json = serde_json::to_string_pretty(&serde_json::Value::Object(dump))
        .map_err(|e| DataError::Eval(e.to_string()))?;
    std::fs::write(&a.out, json)?;
    mb.output(&a.out);
    println!("wrote {}", a.out.display());
    mb.write(&a.out.with_extension("manifest.json"))?;
    Ok(())
}
