use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use attrikit::compose::{compose_generate, GuidanceConfig};
use attrikit::config::RunConfig;
use attrikit::evalkit::{embedding_structure, evaluate, RetrievalIndex};
use attrikit::model::{ModelBundle, SCHEMA_VERSION};
use attrikit::prompt::PromptSpec;
use attrikit::synthdata::{generate, read_dataset, read_ppm, write_dataset, write_ppm, AttrId, AttributeName, Image};
use attrikit::trainer::{train_in_dir, Trainer};
use attrikit::{selftest, AttrError};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "attrikit", about = "Attribute-level image embeddings: data, training, evaluation and composition")]
struct Cli {
    /// Print the version and configuration schema version.
    #[arg(long, short = 'V')]
    version: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args)]
struct Common {
    /// Base seed of every random choice.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run configuration (JSON). Missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic pair dataset (PPM images plus annotations.jsonl).
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        count: Option<usize>,
        /// Minimum number of shared attributes per pair.
        #[arg(long)]
        min_positives: Option<usize>,
        #[arg(long, alias = "out")]
        out_dir: PathBuf,
    },
    /// Two-stage training. Continues from the newest checkpoint in --out-dir.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset written by gen-data; generated from the seed if absent.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Checkpoint to continue from instead of the output directory's own.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluation suite; prints a JSON report.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate an image from attribute references and a prompt.
    Compose {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Reference as IMAGE.ppm:ATTRIBUTE; repeatable.
        #[arg(long = "ref")]
        refs: Vec<String>,
        /// Guidance weight per reference, in the order of --ref.
        #[arg(long = "w", allow_negative_numbers = true)]
        weights: Vec<f64>,
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long, allow_negative_numbers = true)]
        text_cfg: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank gallery images by similarity to a query under one attribute.
    Retrieve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of PPM images.
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        attribute: String,
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
    /// 2-D projection of one attribute's embeddings as CSV (x,y,label).
    Project {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "object color")]
        attribute: String,
        #[arg(long, default_value_t = 300)]
        count: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Gradient checks and loss identities.
    Selftest {
        #[command(flatten)]
        common: Common,
        /// Random seeds per gradient check.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    match &common.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn parse_ref(spec: &str) -> Result<(Image, AttributeName)> {
    let (path, attr) = spec
        .rsplit_once(':')
        .with_context(|| format!("reference {spec:?} is not IMAGE:ATTRIBUTE"))?;
    let image = read_ppm(Path::new(path)).with_context(|| format!("reading {path}"))?;
    Ok((image, AttributeName::parse(attr)?))
}

fn write_out(out: Option<&Path>, text: &str) -> Result<()> {
    if let Some(p) = out {
        fs::write(p, text)?;
    }
    let mut stdout = std::io::stdout().lock();
    stdout.write_all(text.as_bytes())?;
    Ok(())
}

fn threads() -> Result<usize> {
    match std::env::var("ATTRIKIT_THREADS") {
        Ok(v) => v.trim().parse().with_context(|| format!("ATTRIKIT_THREADS={v:?} is not a number")),
        Err(_) => Ok(0),
    }
}

fn run(command: Command) -> Result<()> {
    threads()?;
    match command {
        Command::GenData { common, count, min_positives, out_dir } => {
            let mut cfg = load_config(&common)?;
            cfg.data.count = count.unwrap_or(cfg.data.count);
            cfg.data.min_positives = min_positives.unwrap_or(cfg.data.min_positives);
            cfg.validate()?;
            let pairs = generate(common.seed, cfg.data.count, cfg.data.min_positives)?;
            write_dataset(&out_dir, &pairs, cfg.model.image_side)?;
            eprintln!("wrote {} pairs to {}", pairs.len(), out_dir.display());
        }
        Command::Train { common, data_dir, out_dir, resume } => {
            let mut cfg = load_config(&common)?;
            cfg.train.seed = common.seed;
            cfg.validate()?;
            let data = match &data_dir {
                Some(d) => read_dataset(d)?,
                None => generate(common.seed, cfg.data.count, cfg.data.min_positives)?,
            };
            fs::create_dir_all(&out_dir)?;
            fs::write(out_dir.join("config.json"), cfg.dump())?;
            match resume {
                Some(path) => {
                    let mut t = Trainer::resume(&path, cfg.train.clone())?;
                    t.run(&data, Some(&out_dir))?;
                }
                None => {
                    train_in_dir(&data, &cfg.model, &cfg.train, &out_dir)?;
                }
            }
            eprintln!("training finished: {}", out_dir.join("final.atk").display());
        }
        Command::Eval { common, checkpoint, out } => {
            let cfg = load_config(&common)?;
            let bundle = ModelBundle::load(&checkpoint)?;
            let report = evaluate(&bundle, &cfg.eval, &cfg.compose, common.seed)?;
            write_out(out.as_deref(), &(serde_json::to_string_pretty(&report)? + "\n"))?;
        }
        Command::Compose { common, checkpoint, refs, weights, prompt, text_cfg, steps, out } => {
            let cfg = load_config(&common)?;
            let bundle = ModelBundle::load(&checkpoint)?;
            let refs = refs.iter().map(|r| parse_ref(r)).collect::<Result<Vec<_>>>()?;
            if !weights.is_empty() && weights.len() != refs.len() {
                bail!("{} weights for {} references", weights.len(), refs.len());
            }
            let weights = if weights.is_empty() { vec![cfg.compose.weight; refs.len()] } else { weights };
            let prompt = prompt.map(|p| PromptSpec::parse(&p)).transpose()?;
            let g = GuidanceConfig { weights, text_cfg: text_cfg.unwrap_or(cfg.compose.text_cfg) };
            let steps = steps.unwrap_or(cfg.compose.steps);
            let image = compose_generate(&bundle, &refs, prompt, &g, steps, common.seed)?;
            write_ppm(&out, &image)?;
        }
        Command::Retrieve { common: _, checkpoint, gallery, query, attribute, k } => {
            let bundle = ModelBundle::load(&checkpoint)?;
            let name = AttributeName::parse(&attribute)?;
            let mut files: Vec<PathBuf> = fs::read_dir(&gallery)?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<_>>()?;
            files.retain(|p| p.extension().is_some_and(|e| e == "ppm"));
            files.sort();
            let images = files.iter().enumerate().map(|(i, p)| Ok((i, read_ppm(p)?))).collect::<Result<Vec<_>>>()?;
            let index = RetrievalIndex::build(&bundle, &images, &[name.id])?;
            let hits = index.retrieve(&bundle, &read_ppm(&query)?, name.surface(), k)?;
            for h in hits {
                println!("{}\t{:.6}", files[h.image_id].display(), h.cosine);
            }
        }
        Command::Project { common, checkpoint, attribute, count, out } => {
            let cfg = load_config(&common)?;
            let bundle = ModelBundle::load(&checkpoint)?;
            let attr: AttrId = AttributeName::parse(&attribute)?.id;
            let side = bundle.model.cfg.image_side;
            let r = embedding_structure(&bundle, attr, count, side, cfg.eval.permutations, common.seed)?;
            let mut csv = String::from("x,y,label\n");
            for (p, l) in r.projection.points.iter().zip(&r.labels) {
                csv.push_str(&format!("{},{},{}\n", p[0], p[1], attr.value_name(*l)));
            }
            write_out(out.as_deref(), &csv)?;
        }
        Command::Selftest { common: _, seeds } => {
            let mut failed = 0;
            for c in selftest::run(seeds)? {
                println!("{} {:<48} {:.3e} (limit {:.0e})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.value, c.limit);
                failed += !c.passed as usize;
            }
            if failed > 0 {
                bail!("{failed} self-checks failed");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if cli.version {
        println!("attrikit {} (schema {SCHEMA_VERSION})", env!("CARGO_PKG_VERSION"));
        return ExitCode::SUCCESS;
    }
    let Some(command) = cli.command else {
        eprintln!("error: a subcommand is required (see --help)");
        return ExitCode::from(1);
    };
    match run(command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.downcast_ref::<AttrError>().is_some_and(|a| {
                matches!(a, AttrError::UnknownAttribute(_) | AttrError::UnknownToken(_) | AttrError::InvalidConfig(_))
            });
            ExitCode::from(if usage { 1 } else { 2 })
        }
    }
}
