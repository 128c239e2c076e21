mod config;

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use hoiprime::dataset::{read_json, write_json, Dataset};
use hoiprime::eval::{EvalReport, SplitTag, ZeroShotSplit};
use hoiprime::model::{Model, ModelConfig, VariantSpec};
use hoiprime::pipeline::{
    end_to_end_grad_check, evaluate_model, model_config, sample_zero_shot, train_model, ScoreSource,
};
use hoiprime::tensor::gradcheck::op_suite;
use serde::{Deserialize, Serialize};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "hoiprime", about = "Layout-primed human-object interaction detection on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Variant name; a comma-separated list for `ablate`.
    #[arg(long, global = true)]
    variant: Option<String>,
    /// Run directory (dataset directory for `gen`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Withhold a sampled set of triplets and report Unseen/Seen/All.
    #[arg(long, global = true)]
    zero_shot: bool,
    #[arg(long, global = true)]
    split_file: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen,
    /// Train one variant and write a checkpoint and loss CSV.
    Train,
    /// Evaluate a trained run directory.
    Eval,
    /// Train and evaluate several variants under identical seeds.
    Ablate,
    /// Finite-difference check of every op and of the model's joint loss.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: usize,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(v) = &cli.variant {
        cfg.variant = v.clone();
        cfg.ablate.variants = v.split(',').map(|s| s.trim().to_string()).collect();
    }
    if let Some(d) = &cli.data {
        cfg.data = d.clone();
    }
    if let Some(o) = &cli.out {
        match cli.command {
            Command::Gen => cfg.data = o.clone(),
            _ => cfg.out = o.clone(),
        }
    }
    if cli.zero_shot {
        cfg.eval.zero_shot = true;
    }
    if let Some(f) = &cli.split_file {
        cfg.eval.split_file = Some(f.clone());
    }
    match cli.command {
        Command::Gen => gen(&cfg),
        Command::Train => train(&cfg),
        Command::Eval => eval(&cfg),
        Command::Ablate => ablate(&cfg),
        Command::Gradcheck { seeds } => gradcheck(&cfg, seeds),
    }
}

/// Seed and config hash carried by every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Provenance {
    seed: u64,
    config_hash: String,
}

impl Provenance {
    fn of(cfg: &RunConfig) -> Self {
        Self {
            seed: cfg.seed,
            config_hash: cfg.hash(),
        }
    }
}

#[derive(Serialize)]
struct GenReport {
    #[serde(flatten)]
    provenance: Provenance,
    train_scenes: usize,
    test_scenes: usize,
    train_pairs: usize,
    unseen_triplets: Option<Vec<usize>>,
}

fn gen(cfg: &RunConfig) -> Result<()> {
    // Everything that can fail on bad input happens before the first write.
    let spec = cfg.scene_spec()?;
    let opts = cfg.dataset_options()?;
    let ds = Dataset::generate(&spec, &opts)?;
    let split = if cfg.eval.zero_shot {
        Some(sample_zero_shot(&ds, cfg.eval.unseen_fraction, cfg.seed)?)
    } else {
        None
    };
    let report = GenReport {
        provenance: Provenance::of(cfg),
        train_scenes: ds.train.len(),
        test_scenes: ds.test.len(),
        train_pairs: ds.train.num_pairs(),
        unseen_triplets: split.as_ref().map(|s| s.unseen.clone()),
    };
    write_dir_atomically(&cfg.data, |dir| {
        ds.save(dir)?;
        write_json(&dir.join("gen.json"), &report)?;
        Ok(())
    })?;
    if let Some(s) = &split {
        let path = cfg.split_file();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        write_json(&path, &s.to_map())?;
        eprintln!("withheld {} of {} triplets -> {}", s.unseen.len(), s.unseen.len() + s.seen.len(), path.display());
    }
    println!(
        "wrote {} train / {} test scenes ({} training pairs) to {}",
        report.train_scenes,
        report.test_scenes,
        report.train_pairs,
        cfg.data.display()
    );
    Ok(())
}

/// Writes into a sibling staging directory and renames it into place, so a
/// failure leaves no partial dataset. An existing directory is written in place.
fn write_dir_atomically(target: &Path, write: impl FnOnce(&Path) -> Result<(), hoiprime::Error>) -> Result<()> {
    if target.exists() {
        fs::create_dir_all(target)?;
        return write(target).with_context(|| format!("writing {}", target.display()));
    }
    let parent = match target.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent)?;
    let name = target.file_name().context("output path has no final component")?;
    let staging = parent.join(format!(".{}.partial-{}", name.to_string_lossy(), std::process::id()));
    let result = write(&staging);
    if let Err(e) = result {
        let _ = fs::remove_dir_all(&staging);
        return Err(e).with_context(|| format!("writing {}", target.display()));
    }
    fs::rename(&staging, target)?;
    Ok(())
}

fn load_split(cfg: &RunConfig, ds: &Dataset) -> Result<ZeroShotSplit> {
    let path = cfg.split_file();
    let map: BTreeMap<usize, SplitTag> = read_json(&path)
        .with_context(|| format!("reading split file {} (run `gen --zero-shot` first)", path.display()))?;
    Ok(ZeroShotSplit::from_map(&map, ds.spec().num_objects())?)
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    Dataset::load(&cfg.data).with_context(|| format!("loading dataset from {}", cfg.data.display()))
}

/// Dataset plus the zero-shot split when one is requested, with the unseen
/// triplets already removed from training.
fn prepared_dataset(cfg: &RunConfig, ds: Dataset) -> Result<(Dataset, Option<ZeroShotSplit>)> {
    let mut ds = ds;
    if !cfg.eval.zero_shot {
        return Ok((ds, None));
    }
    let split = load_split(cfg, &ds)?;
    ds.withhold(&split);
    Ok((ds, Some(split)))
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelMeta {
    #[serde(flatten)]
    provenance: Provenance,
    model: ModelConfig,
    variant: VariantSpec,
    zero_shot: bool,
}

fn train(cfg: &RunConfig) -> Result<()> {
    let (ds, _) = prepared_dataset(cfg, load_dataset(cfg)?)?;
    let variant = VariantSpec::from_name(&cfg.variant)?;
    let mc = model_config(&cfg.model.preset, &ds)?;
    let tc = cfg.train_config()?;
    let (model, history) = train_model(&ds, &mc, &variant, &tc, cfg.init_seed(), |e| {
        eprintln!(
            "epoch {:>2}  lr {:.0e}  loss {:.4}{}",
            e.epoch,
            e.lr,
            e.total,
            e.j1.map(|j| format!("  (layout {j:.4})")).unwrap_or_default()
        );
    })?;
    fs::create_dir_all(&cfg.out)?;
    model.write_checkpoint(BufWriter::new(fs::File::create(cfg.out.join("checkpoint.bin"))?))?;
    history.write_csv(BufWriter::new(fs::File::create(cfg.out.join("loss.csv"))?))?;
    let meta = ModelMeta {
        provenance: Provenance::of(cfg),
        model: mc,
        variant,
        zero_shot: cfg.eval.zero_shot,
    };
    write_json(&cfg.out.join("model.json"), &meta)?;
    println!("wrote checkpoint, loss.csv and model.json to {}", cfg.out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    #[serde(flatten)]
    provenance: Provenance,
    variant: &'a str,
    score: &'a str,
    report: &'a EvalReport,
}

fn eval(cfg: &RunConfig) -> Result<()> {
    let meta: ModelMeta = read_json(&cfg.out.join("model.json"))
        .with_context(|| format!("reading {} (run `train` first)", cfg.out.join("model.json").display()))?;
    let (ds, split) = prepared_dataset(cfg, load_dataset(cfg)?)?;
    let mut model = Model::build(&meta.model, &meta.variant, 0)?;
    model.read_checkpoint(std::io::BufReader::new(fs::File::open(cfg.out.join("checkpoint.bin"))?))?;
    let source = cfg.score_source()?;
    let report = evaluate_model(&model, &ds, source, split.as_ref())?;
    let out = EvalOutput {
        provenance: Provenance::of(cfg),
        variant: &meta.variant.name,
        score: &cfg.eval.score,
        report: &report,
    };
    write_json(&cfg.out.join("report.json"), &out)?;
    print!("{}", report.table());
    Ok(())
}

/// `HOIPRIME_THREADS`, else the available parallelism.
fn worker_threads() -> Result<usize> {
    match std::env::var("HOIPRIME_THREADS") {
        Ok(v) => {
            let n: usize = v.parse().with_context(|| format!("HOIPRIME_THREADS={v:?} is not a count"))?;
            if n == 0 {
                bail!("HOIPRIME_THREADS must be at least 1");
            }
            Ok(n)
        }
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

#[derive(Serialize)]
struct AblationRow {
    variant: String,
    splits: Vec<hoiprime::eval::SplitMap>,
}

#[derive(Serialize)]
struct AblationOutput {
    #[serde(flatten)]
    provenance: Provenance,
    zero_shot: bool,
    rows: Vec<AblationRow>,
}

fn ablate(cfg: &RunConfig) -> Result<()> {
    let variants: Vec<VariantSpec> = cfg
        .ablate
        .variants
        .iter()
        .map(|n| VariantSpec::from_name(n))
        .collect::<Result<_, _>>()?;
    if variants.is_empty() {
        bail!("no variants to ablate");
    }
    let ds = if cfg.data.join("dataset.json").exists() {
        load_dataset(cfg)?
    } else {
        eprintln!("no dataset at {}; generating one in memory", cfg.data.display());
        let ds = Dataset::generate(&cfg.scene_spec()?, &cfg.dataset_options()?)?;
        if cfg.eval.zero_shot && !cfg.split_file().exists() {
            let split = sample_zero_shot(&ds, cfg.eval.unseen_fraction, cfg.seed)?;
            let path = cfg.split_file();
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            write_json(&path, &split.to_map())?;
        }
        ds
    };
    let (ds, split) = prepared_dataset(cfg, ds)?;
    let mc = model_config(&cfg.model.preset, &ds)?;
    let tc = cfg.train_config()?;

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<EvalReport>>>> = Mutex::new((0..variants.len()).map(|_| None).collect());
    let threads = worker_threads()?.min(variants.len());
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(v) = variants.get(i) else { break };
                let r = (|| -> Result<EvalReport> {
                    let (model, _) = train_model(&ds, &mc, v, &tc, cfg.init_seed(), |_| {})?;
                    Ok(evaluate_model(&model, &ds, ScoreSource::Final, split.as_ref())?)
                })();
                eprintln!("{} done", v.name);
                results.lock().expect("no panics while holding the lock")[i] = Some(r);
            });
        }
    });

    let mut rows = Vec::with_capacity(variants.len());
    for (v, r) in variants.iter().zip(results.into_inner().expect("workers joined")) {
        let report = r.expect("every variant ran").with_context(|| format!("variant {}", v.name))?;
        rows.push(AblationRow {
            variant: v.name.clone(),
            splits: report.splits,
        });
    }
    let table = ablation_table(&rows);
    let out = AblationOutput {
        provenance: Provenance::of(cfg),
        zero_shot: split.is_some(),
        rows,
    };
    fs::create_dir_all(&cfg.out)?;
    write_json(&cfg.out.join("ablation.json"), &out)?;
    fs::write(cfg.out.join("ablation.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = format!("{:<16}", "variant");
    for split in &rows[0].splits {
        s += &format!(" {:>9}", split.name);
    }
    s.push('\n');
    for r in rows {
        s += &format!("{:<16}", r.variant);
        for split in &r.splits {
            match split.map {
                Some(m) => s += &format!(" {:>9.2}", 100.0 * m),
                None => s += &format!(" {:>9}", "-"),
            }
        }
        s.push('\n');
    }
    s
}

fn gradcheck(cfg: &RunConfig, seeds: usize) -> Result<()> {
    let mut ok = true;
    println!("{:<18} {:>9} {:>12}  result", "op", "threshold", "max rel err");
    for c in op_suite(seeds)? {
        ok &= c.passed();
        println!(
            "{:<18} {:>9.0e} {:>12.2e}  {}",
            c.op,
            c.threshold,
            c.max_rel_error,
            if c.passed() { "pass" } else { "FAIL" }
        );
    }
    let threshold = 1e-3;
    println!("\njoint loss, {} Standard model", cfg.model.preset);
    for r in end_to_end_grad_check(&cfg.model.preset, cfg.seed)? {
        let pass = r.max_rel_error < threshold;
        ok &= pass;
        println!(
            "{:<18} {:>9.0e} {:>12.2e}  {}",
            r.layer,
            threshold,
            r.max_rel_error,
            if pass { "pass" } else { "FAIL" }
        );
    }
    if !ok {
        bail!("gradient check failed");
    }
    Ok(())
}
