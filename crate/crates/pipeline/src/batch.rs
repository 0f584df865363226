//! Batch orchestration. Every job runs on its own toy stack and writes its
//! artifacts under `out_dir/job-NNNN/`.

use std::path::{Path, PathBuf};

use advstyle_core::recognition::ToyFrModel;
use advstyle_core::{
    cosine_similarity, psnr, run_attack, ssim, AttackResult, AttackRunConfig, EvaluationReport, FaceImage, FrModel, Generator,
    PromptLibrary, RandomFeaturePyramid, ThresholdTable, ToyStack,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::manifest::{DatasetManifest, ManifestEntry};
use crate::thresholds::threshold_for;

pub const RESULT_FILE: &str = "result.json";
pub const TRACE_FILE: &str = "trace.csv";
pub const ERROR_FILE: &str = "error.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackJob {
    /// Row label in reports, e.g. the method or config name.
    pub label: String,
    pub source: ManifestEntry,
    pub target: ManifestEntry,
    /// Prompt id from the bundled table, or free text.
    pub prompt: String,
    /// White-box pool the attack optimizes against.
    pub models: Vec<String>,
    /// Models scored afterwards. Empty means the pool itself.
    #[serde(default)]
    pub eval_models: Vec<String>,
    pub config: AttackRunConfig,
}

impl AttackJob {
    pub fn validate(&self) -> Result<()> {
        if self.source.identity == self.target.identity {
            return Err(Error::invalid(format!("source and target share identity {}", self.source.identity)));
        }
        if self.models.is_empty() {
            return Err(Error::invalid("job has no models"));
        }
        self.config.validate()?;
        Ok(())
    }

    pub fn scored_models(&self) -> &[String] {
        if self.eval_models.is_empty() {
            &self.models
        } else {
            &self.eval_models
        }
    }
}

/// A list of jobs as stored on disk.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct JobFile {
    pub jobs: Vec<AttackJob>,
}

impl JobFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        toml::from_str(&text).map_err(|e| Error::Parse { what: "job file".into(), message: e.to_string() })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = toml::to_string(self).expect("job file serializes");
        std::fs::write(path.as_ref(), text).map_err(|e| Error::io(path.as_ref(), e))
    }
}

/// Every `(source, target, prompt)` combination where the first image of
/// each of the first `target_count` identities is a target and the first
/// image of every other identity is a source.
pub fn plan_jobs(
    manifest: &DatasetManifest,
    target_count: usize,
    prompts: &[String],
    models: &[String],
    config: &AttackRunConfig,
    label: &str,
) -> Vec<AttackJob> {
    let firsts: Vec<&ManifestEntry> =
        manifest.identities().into_iter().filter_map(|id| manifest.entries.iter().find(|e| e.identity == id)).collect();
    let mut jobs = Vec::new();
    for target in firsts.iter().take(target_count) {
        for source in firsts.iter().filter(|s| s.identity != target.identity) {
            for prompt in prompts {
                jobs.push(AttackJob {
                    label: label.to_string(),
                    source: (*source).clone(),
                    target: (*target).clone(),
                    prompt: prompt.clone(),
                    models: models.to_vec(),
                    eval_models: Vec::new(),
                    config: config.clone(),
                });
            }
        }
    }
    jobs
}

#[derive(Debug, Clone)]
pub struct BatchOptions {
    pub parallelism: usize,
    pub base_seed: u64,
    pub out_dir: PathBuf,
    /// Base directory for relative entry paths.
    pub root: PathBuf,
    pub thresholds: ThresholdTable,
}

/// What a finished job persisted, as stored in `result.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub index: usize,
    pub seed: u64,
    pub label: String,
    pub prompt: String,
    pub source: ManifestEntry,
    pub target: ManifestEntry,
    pub pool: Vec<String>,
    pub models: Vec<String>,
    /// Cosine similarity of adversarial face and target, aligned with `models`.
    pub similarities: Vec<f64>,
    /// Same, for the clean reconstruction.
    pub clean_similarities: Vec<f64>,
    pub thresholds: Vec<f64>,
    pub success: Vec<bool>,
    pub psnr: f64,
    pub ssim: f64,
    pub initial_total: Option<f64>,
    pub final_total: Option<f64>,
    /// SHA-256 over the image, trace and latent artifacts.
    pub checksum: String,
}

pub struct JobOutput {
    pub record: JobRecord,
    pub result: AttackResult,
    pub report: EvaluationReport,
}

pub struct JobOutcome {
    pub index: usize,
    pub seed: u64,
    pub dir: PathBuf,
    /// Per-job failure message. The batch itself keeps going.
    pub output: std::result::Result<JobOutput, String>,
}

pub fn job_dir_name(index: usize) -> String {
    format!("job-{index:04}")
}

fn toy_model(name: &str, resolution: (usize, usize)) -> Result<ToyFrModel> {
    ToyFrModel::ZOO
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(n, seed)| ToyFrModel::new(*n, *seed, resolution))
        .ok_or_else(|| Error::invalid(format!("unknown model {name}")))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

struct Attacked {
    result: AttackResult,
    source: FaceImage,
    target: FaceImage,
    prompt: String,
    models: Vec<String>,
    similarities: Vec<f64>,
    clean: Vec<f64>,
    thresholds: Vec<f64>,
}

fn attack(job: &AttackJob, cfg: &AttackRunConfig, opts: &BatchOptions) -> Result<Attacked> {
    job.validate()?;
    let source = FaceImage::load(opts.root.join(&job.source.path))?;
    let target = FaceImage::load(opts.root.join(&job.target.path))?;
    let prompt = PromptLibrary::default().resolve(&job.prompt)?;
    let names: Vec<&str> = job.models.iter().map(String::as_str).collect();
    let toy = ToyStack::new(&names)?;
    let refs = toy.model_refs();
    let result = run_attack(&toy.stack(&refs), &source, &target, &prompt, cfg)?;

    let res = toy.generator.resolution();
    let models = job.scored_models().to_vec();
    let (mut similarities, mut clean, mut thresholds) = (Vec::new(), Vec::new(), Vec::new());
    for name in &models {
        let m = toy_model(name, res)?;
        let t = m.embed(&target)?;
        similarities.push(cosine_similarity(&m.embed(&result.image)?, &t)?);
        clean.push(cosine_similarity(&m.embed(&result.reconstruction)?, &t)?);
        thresholds.push(threshold_for(&opts.thresholds, name)?);
    }
    Ok(Attacked { result, source, target, prompt, models, similarities, clean, thresholds })
}

fn persist(index: usize, seed: u64, job: &AttackJob, a: Attacked, dir: &Path) -> Result<JobOutput> {
    let save = |name: &str, img: &FaceImage| -> Result<()> { Ok(img.save(dir.join(name))?) };
    save("source.png", &a.source)?;
    save("target.png", &a.target)?;
    save("reconstruction.png", &a.result.reconstruction)?;
    save("adversarial.png", &a.result.image)?;
    write(&dir.join(TRACE_FILE), a.result.trace_csv().as_bytes())?;
    write(&dir.join("latent.json"), serde_json::to_string(&a.result.latent.codes()).expect("latent serializes").as_bytes())?;
    let cfg = AttackRunConfig { seed, ..job.config.clone() };
    write(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;

    let mut hasher = Sha256::new();
    for name in ["adversarial.png", TRACE_FILE, "latent.json"] {
        hasher.update(read(&dir.join(name))?);
    }
    let report = EvaluationReport::compute(
        &a.models,
        &a.similarities.iter().map(|&s| vec![s]).collect::<Vec<_>>(),
        &a.thresholds,
        std::slice::from_ref(&a.result.image),
        std::slice::from_ref(&a.source),
        &RandomFeaturePyramid::default(),
    )?;
    let record = JobRecord {
        index,
        seed,
        label: job.label.clone(),
        prompt: a.prompt,
        source: job.source.clone(),
        target: job.target.clone(),
        pool: job.models.clone(),
        success: a.similarities.iter().zip(&a.thresholds).map(|(s, t)| s > t).collect(),
        models: a.models,
        similarities: a.similarities,
        clean_similarities: a.clean,
        thresholds: a.thresholds,
        psnr: psnr(&a.result.image, &a.source)?.db,
        ssim: ssim(&a.result.image, &a.source)?,
        initial_total: a.result.trace.first().map(|r| r.total),
        final_total: a.result.trace.last().map(|r| r.total),
        checksum: hex(&hasher.finalize()),
    };
    let json = serde_json::to_string_pretty(&record).expect("record serializes");
    write(&dir.join(RESULT_FILE), json.as_bytes())?;
    Ok(JobOutput { record, result: a.result, report })
}

fn run_job(index: usize, job: &AttackJob, opts: &BatchOptions) -> Result<JobOutcome> {
    let seed = opts.base_seed.wrapping_add(index as u64);
    let dir = opts.out_dir.join(job_dir_name(index));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for stale in [RESULT_FILE, ERROR_FILE] {
        let p = dir.join(stale);
        if p.exists() {
            std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
        }
    }
    let cfg = AttackRunConfig { seed, ..job.config.clone() };
    let output = match attack(job, &cfg, opts) {
        Ok(a) => Ok(persist(index, seed, job, a, &dir)?),
        Err(e) => {
            log::warn!("job {index} failed: {e}");
            write(&dir.join(ERROR_FILE), format!("{e}\n").as_bytes())?;
            Err(e.to_string())
        }
    };
    Ok(JobOutcome { index, seed, dir, output })
}

/// Runs every job on a pool of `parallelism` workers. Job `i` is seeded with
/// `base_seed + i`, so results do not depend on scheduling. Job failures are
/// returned per job. I/O failures abort the batch.
pub fn run_batch(jobs: &[AttackJob], opts: &BatchOptions) -> Result<Vec<JobOutcome>> {
    if opts.parallelism == 0 {
        return Err(Error::invalid("parallelism must be at least 1"));
    }
    std::fs::create_dir_all(&opts.out_dir).map_err(|e| Error::io(&opts.out_dir, e))?;
    let pool =
        rayon::ThreadPoolBuilder::new().num_threads(opts.parallelism).build().map_err(|e| Error::invalid(format!("worker pool: {e}")))?;
    pool.install(|| jobs.par_iter().enumerate().map(|(i, job)| run_job(i, job, opts)).collect())
}
