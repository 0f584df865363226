use std::path::{Path, PathBuf};
use std::process::ExitCode;

use advstyle_core::recognition::ToyFrModel;
use advstyle_core::{calibrate_threshold, cosine_similarity, AttackRunConfig, FaceImage, FrModel, PromptLibrary, ThresholdTable};
use advstyle_pipeline::batch::{plan_jobs, run_batch, AttackJob, BatchOptions, JobOutcome};
use advstyle_pipeline::manifest::{ingest, DatasetManifest, Layout, ManifestEntry};
use advstyle_pipeline::remote::{Provider, RemoteClient, RemoteVerifierConfig};
use advstyle_pipeline::report::{self, REMOTE_PREFIX};
use advstyle_pipeline::{Error, Result};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "advstyle", version, about = "Text-guided adversarial face impersonation on toy and adapter-backed stacks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Attack one source face towards one target identity.
    Attack {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Prompt id from the bundled table, or free text.
        #[arg(long, default_value = "1")]
        prompt: String,
        #[arg(long, value_delimiter = ',', default_value = "toy-mobileface,toy-irse50,toy-ir152")]
        models: Vec<String>,
        /// Extra models to score. Defaults to the attacked pool.
        #[arg(long, value_delimiter = ',')]
        eval_models: Vec<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "meta")]
        label: String,
    },
    /// Build a manifest from a directory-per-identity dataset.
    Ingest {
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        strict: bool,
    },
    /// Attack every source identity of a manifest towards its first identities.
    Batch {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 5)]
        targets: usize,
        /// Prompt ids or texts. Defaults to the evaluation prompts.
        #[arg(long, value_delimiter = ',')]
        prompts: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "toy-mobileface,toy-irse50,toy-ir152")]
        models: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        eval_models: Vec<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        parallelism: usize,
        #[arg(long, default_value = "meta")]
        label: String,
    },
    /// Thresholds at a target false acceptance rate from impostor pairs.
    Calibrate {
        /// Lines of `image_a,image_b`, relative to the list's directory.
        #[arg(long)]
        impostor_pairs: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        far: f64,
        #[arg(long, value_delimiter = ',', default_value = "toy-mobileface,toy-irse50,toy-ir152,toy-facenet")]
        models: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-score persisted results against a threshold table.
    Eval {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        thresholds: Option<PathBuf>,
    },
    /// Score pairs with a commercial verification service.
    VerifyRemote {
        #[arg(long, value_enum)]
        provider: Provider,
        #[arg(long)]
        pair_list: PathBuf,
        /// Remote verifier settings. Overrides --endpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Regenerate CSV summaries from a results directory.
    Report {
        #[arg(long)]
        results_dir: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<AttackRunConfig> {
    Ok(match path {
        Some(p) => AttackRunConfig::load(p)?,
        None => AttackRunConfig::default(),
    })
}

fn summarize(outcomes: &[JobOutcome]) -> Result<()> {
    let mut failed = 0;
    for o in outcomes {
        match &o.output {
            Ok(out) => {
                let sims: Vec<String> =
                    out.record.models.iter().zip(&out.record.similarities).map(|(m, s)| format!("{m}={s:.4}")).collect();
                println!("{} seed {} ok {} -> {}", o.dir.display(), o.seed, sims.join(" "), out.record.checksum);
            }
            Err(e) => {
                failed += 1;
                println!("{} seed {} failed: {e}", o.dir.display(), o.seed);
            }
        }
    }
    if failed > 0 {
        return Err(Error::Invalid(format!("{failed} of {} jobs failed", outcomes.len())));
    }
    Ok(())
}

fn read_pairs(list: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let text = std::fs::read_to_string(list).map_err(|e| Error::io(list, e))?;
    let base = list.parent().unwrap_or(Path::new("."));
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            let (a, b) = l
                .split_once(',')
                .ok_or_else(|| Error::Parse { what: list.display().to_string(), message: format!("expected a,b: {l}") })?;
            Ok((base.join(a.trim()), base.join(b.trim())))
        })
        .collect()
}

fn toy_models(names: &[String]) -> Result<Vec<ToyFrModel>> {
    names
        .iter()
        .map(|name| {
            ToyFrModel::ZOO
                .iter()
                .find(|(n, _)| n == name)
                .map(|(n, s)| ToyFrModel::new(*n, *s, (32, 32)))
                .ok_or_else(|| Error::Invalid(format!("unknown model {name}")))
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Attack { source, target, prompt, models, eval_models, config, out, seed, label } => {
            let job = AttackJob {
                label,
                source: ManifestEntry { identity: "source".into(), path: std::path::absolute(&source).map_err(|e| Error::io(&source, e))? },
                target: ManifestEntry { identity: "target".into(), path: std::path::absolute(&target).map_err(|e| Error::io(&target, e))? },
                prompt,
                models,
                eval_models,
                config: load_config(config.as_deref())?,
            };
            let opts =
                BatchOptions { parallelism: 1, base_seed: seed, out_dir: out, root: PathBuf::new(), thresholds: ThresholdTable::default() };
            summarize(&run_batch(&[job], &opts)?)
        }
        Command::Ingest { root, out, strict } => {
            let manifest = ingest(&root, &Layout { strict, ..Layout::default() })?;
            manifest.save(&out)?;
            println!("{} entries, {} identities", manifest.entries.len(), manifest.identities().len());
            Ok(())
        }
        Command::Batch { manifest, targets, prompts, models, eval_models, config, out, seed, parallelism, label } => {
            let m = DatasetManifest::load(&manifest)?;
            let prompts =
                if prompts.is_empty() { PromptLibrary::default_evaluation_ids().iter().map(|i| i.to_string()).collect() } else { prompts };
            let mut jobs = plan_jobs(&m, targets, &prompts, &models, &load_config(config.as_deref())?, &label);
            for job in &mut jobs {
                job.eval_models = eval_models.clone();
            }
            let opts =
                BatchOptions { parallelism, base_seed: seed, out_dir: out, root: m.root.clone(), thresholds: ThresholdTable::default() };
            summarize(&run_batch(&jobs, &opts)?)
        }
        Command::Calibrate { impostor_pairs, far, models, out } => {
            let pairs = read_pairs(&impostor_pairs)?;
            let images = pairs.iter().map(|(a, b)| Ok((FaceImage::load(a)?, FaceImage::load(b)?))).collect::<Result<Vec<_>>>()?;
            let mut table = ThresholdTable::new(Default::default())?;
            for model in toy_models(&models)? {
                let scores =
                    images.iter().map(|(a, b)| Ok(cosine_similarity(&model.embed(a)?, &model.embed(b)?)?)).collect::<Result<Vec<_>>>()?;
                table.insert(model.name(), calibrate_threshold(&scores, far)?)?;
            }
            match out {
                Some(p) => table.save(&p)?,
                None => print!("{}", table.to_toml()),
            }
            Ok(())
        }
        Command::Eval { results, thresholds } => {
            let table = thresholds.as_deref().map(ThresholdTable::load).transpose()?;
            let jobs = report::load_records(&results)?;
            if jobs.is_empty() {
                return Err(Error::NothingToReport(results.display().to_string()));
            }
            let csv = report::evaluation_csv(&report::evaluate(&jobs, table.as_ref())?);
            let path = results.join("evaluation.csv");
            std::fs::write(&path, &csv).map_err(|e| Error::io(&path, e))?;
            print!("{csv}");
            Ok(())
        }
        Command::VerifyRemote { provider, pair_list, config, endpoint, out } => {
            let cfg = match (config, endpoint) {
                (Some(p), _) => {
                    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                    RemoteVerifierConfig::from_toml(&text)?
                }
                (None, Some(url)) => RemoteVerifierConfig::new(provider, url),
                (None, None) => return Err(Error::Invalid("verify-remote needs --endpoint or --config".into())),
            };
            if cfg.provider != provider {
                return Err(Error::Invalid(format!("config is for {}, not {}", cfg.provider.as_str(), provider.as_str())));
            }
            let client = RemoteClient::new(cfg)?;
            let mut csv = String::from("image_a,image_b,confidence,retries\n");
            for (a, b) in read_pairs(&pair_list)? {
                let v = client.verify(&FaceImage::load(&a)?, &FaceImage::load(&b)?)?;
                csv.push_str(&format!("{},{},{},{}\n", a.display(), b.display(), v.confidence, v.retries));
            }
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let path = out.join(format!("{REMOTE_PREFIX}{}.csv", provider.as_str()));
            std::fs::write(&path, &csv).map_err(|e| Error::io(&path, e))?;
            print!("{csv}");
            Ok(())
        }
        Command::Report { results_dir } => {
            let files = report::report(&results_dir)?;
            println!("{}", files.asr_grid.display());
            println!("{}", files.loss_traces.display());
            println!("{}", files.evaluation.display());
            if let Some(p) = files.remote_summary {
                println!("{}", p.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
