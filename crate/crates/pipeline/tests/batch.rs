mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use advstyle_core::{run_attack, AttackRunConfig, FaceImage, ThresholdTable, ToyStack};
use advstyle_pipeline::batch::{run_batch, AttackJob, BatchOptions, JobOutcome};
use advstyle_pipeline::manifest::{ingest, Layout, ManifestEntry};
use advstyle_pipeline::report::{asr_grid, report};
use advstyle_pipeline::Error;
use common::write_dataset;

const POOL: [&str; 3] = ["toy-mobileface", "toy-irse50", "toy-ir152"];

fn small_config() -> AttackRunConfig {
    AttackRunConfig { epochs: 3, fusion_hidden: 16, ..Default::default() }
}

fn dataset(root: &Path) -> Vec<ManifestEntry> {
    write_dataset(root, &[("id0", "a", 10), ("id1", "a", 11), ("id2", "a", 12), ("id3", "a", 13)]);
    ingest(root, &Layout::default()).unwrap().entries
}

fn job(source: &ManifestEntry, target: &ManifestEntry, prompt: &str) -> AttackJob {
    AttackJob {
        label: "meta".into(),
        source: source.clone(),
        target: target.clone(),
        prompt: prompt.into(),
        models: POOL.iter().map(|s| s.to_string()).collect(),
        eval_models: vec![],
        config: small_config(),
    }
}

fn options(root: &Path, out: PathBuf, parallelism: usize) -> BatchOptions {
    BatchOptions { parallelism, base_seed: 100, out_dir: out, root: root.to_path_buf(), thresholds: ThresholdTable::default() }
}

fn files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            for (k, v) in files(&p) {
                out.insert(PathBuf::from(p.file_name().unwrap()).join(k), v);
            }
        } else {
            out.insert(PathBuf::from(p.file_name().unwrap()), std::fs::read(&p).unwrap());
        }
    }
    out
}

fn checksums(outcomes: &[JobOutcome]) -> Vec<String> {
    outcomes.iter().map(|o| o.output.as_ref().unwrap().record.checksum.clone()).collect()
}

#[test]
fn single_job_equals_a_direct_run() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let e = dataset(data.path());
    let j = job(&e[0], &e[1], "3");
    let outcomes = run_batch(&[j], &options(data.path(), out.path().into(), 1)).unwrap();
    let batch = outcomes[0].output.as_ref().unwrap();
    assert_eq!(outcomes[0].seed, 100);

    let toy = ToyStack::new(&POOL).unwrap();
    let refs = toy.model_refs();
    let source = FaceImage::load(data.path().join(&e[0].path)).unwrap();
    let target = FaceImage::load(data.path().join(&e[1].path)).unwrap();
    let prompt = advstyle_core::PromptLibrary::default().resolve("3").unwrap();
    let cfg = AttackRunConfig { seed: 100, ..small_config() };
    let direct = run_attack(&toy.stack(&refs), &source, &target, &prompt, &cfg).unwrap();
    assert_eq!(batch.result.image, direct.image);
    assert_eq!(batch.result.trace, direct.trace);
    assert_eq!(batch.result.similarities, direct.similarities);
    assert_eq!(batch.record.similarities, direct.similarities);

    let dir = out.path().join("job-0000");
    for name in
        ["source.png", "target.png", "reconstruction.png", "adversarial.png", "trace.csv", "latent.json", "config.toml", "result.json"]
    {
        assert!(dir.join(name).is_file(), "{name}");
    }
    assert_eq!(std::fs::read_to_string(dir.join("trace.csv")).unwrap(), direct.trace_csv());
    assert_eq!(AttackRunConfig::load(dir.join("config.toml")).unwrap(), cfg);
}

#[test]
fn batches_are_reproducible_and_schedule_independent() {
    let data = tempfile::tempdir().unwrap();
    let e = dataset(data.path());
    let jobs = vec![job(&e[1], &e[0], "1"), job(&e[2], &e[0], "2"), job(&e[3], &e[0], "4"), job(&e[2], &e[1], "5")];
    let runs: Vec<(tempfile::TempDir, Vec<JobOutcome>)> = [1, 1, 4]
        .into_iter()
        .map(|p| {
            let out = tempfile::tempdir().unwrap();
            let outcomes = run_batch(&jobs, &options(data.path(), out.path().into(), p)).unwrap();
            (out, outcomes)
        })
        .collect();
    let seeds: Vec<u64> = runs[0].1.iter().map(|o| o.seed).collect();
    assert_eq!(seeds, [100, 101, 102, 103]);
    assert_eq!(files(runs[0].0.path()), files(runs[1].0.path()));
    assert_eq!(checksums(&runs[0].1), checksums(&runs[2].1));
    assert_eq!(files(runs[0].0.path()), files(runs[2].0.path()));
}

#[test]
fn failing_jobs_do_not_abort_the_batch() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let e = dataset(data.path());
    let mut unknown = job(&e[1], &e[0], "1");
    unknown.models.push("toy-vgg".into());
    let same_identity = job(&e[0], &e[0], "1");
    let jobs = vec![unknown, job(&e[2], &e[0], "1"), same_identity];
    let outcomes = run_batch(&jobs, &options(data.path(), out.path().into(), 2)).unwrap();
    assert!(outcomes[0].output.as_ref().err().unwrap().contains("toy-vgg"));
    assert!(outcomes[1].output.is_ok());
    assert!(outcomes[2].output.as_ref().err().unwrap().contains("share identity"));
    assert!(out.path().join("job-0000/error.txt").is_file());
    assert!(!out.path().join("job-0000/result.json").exists());
}

#[test]
fn unwritable_output_aborts() {
    let data = tempfile::tempdir().unwrap();
    let e = dataset(data.path());
    let blocker = data.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let err = run_batch(&[job(&e[1], &e[0], "1")], &options(data.path(), blocker.join("out"), 1));
    assert!(matches!(err, Err(Error::Io { .. })));
}

#[test]
fn report_grid_traces_and_regeneration() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let e = dataset(data.path());
    let mut jobs = vec![job(&e[1], &e[0], "1"), job(&e[2], &e[0], "1")];
    for j in &mut jobs {
        j.eval_models = POOL.iter().map(|s| s.to_string()).chain(["toy-facenet".to_string()]).collect();
    }
    let outcomes = run_batch(&jobs, &options(data.path(), out.path().into(), 1)).unwrap();
    std::fs::write(out.path().join("remote_facepp.csv"), "image_a,image_b,confidence,retries\na.png,b.png,80,0\nc.png,d.png,60.5,2\n")
        .unwrap();

    let files = report(out.path()).unwrap();
    let grid = std::fs::read_to_string(&files.asr_grid).unwrap();
    let rows: Vec<Vec<&str>> = grid.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0], ["config", "toy-mobileface", "toy-irse50", "toy-ir152", "toy-facenet"]);
    assert_eq!(rows[1].len(), 5);
    let records: Vec<_> = outcomes.iter().map(|o| o.output.as_ref().unwrap().record.clone()).collect();
    assert_eq!(grid, asr_grid(&records));
    for (m, cell) in rows[1][1..].iter().enumerate() {
        let hits = records.iter().filter(|r| r.similarities[m] > r.thresholds[m]).count();
        assert_eq!(cell.parse::<f64>().unwrap(), 100.0 * hits as f64 / 2.0);
    }

    let traces = std::fs::read_to_string(&files.loss_traces).unwrap();
    // 2 jobs x 3 epochs x (guide, perc, 3 adv, total).
    assert_eq!(traces.lines().count(), 1 + 2 * 3 * 6);
    let summary = std::fs::read_to_string(files.remote_summary.as_ref().unwrap()).unwrap();
    assert_eq!(summary, "provider,pairs,mean_confidence,retries\nfacepp,2,70.25,2\n");
    let evaluation = std::fs::read_to_string(&files.evaluation).unwrap();
    assert_eq!(evaluation.lines().count(), 1 + 4);

    let before: Vec<Vec<u8>> = [&files.asr_grid, &files.loss_traces, &files.evaluation].iter().map(|p| std::fs::read(p).unwrap()).collect();
    let again = report(out.path()).unwrap();
    let after: Vec<Vec<u8>> = [&again.asr_grid, &again.loss_traces, &again.evaluation].iter().map(|p| std::fs::read(p).unwrap()).collect();
    assert_eq!(before, after);
}

#[test]
fn empty_results_have_nothing_to_report() {
    let out = tempfile::tempdir().unwrap();
    assert!(matches!(report(out.path()), Err(Error::NothingToReport(_))));
}
