//! Summaries regenerated from a results directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use advstyle_core::{EvaluationReport, FaceImage, RandomFeaturePyramid, ThresholdTable};

use crate::batch::{JobRecord, RESULT_FILE, TRACE_FILE};
use crate::error::{Error, Result};
use crate::thresholds::threshold_for;

pub const REPORT_DIR: &str = "report";
pub const REMOTE_PREFIX: &str = "remote_";

/// Finished jobs under `dir`, in directory-name order.
pub fn load_records(dir: impl AsRef<Path>) -> Result<Vec<(PathBuf, JobRecord)>> {
    let dir = dir.as_ref();
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(RESULT_FILE).is_file())
        .collect();
    subdirs.sort();
    subdirs
        .into_iter()
        .map(|d| {
            let path = d.join(RESULT_FILE);
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let record =
                serde_json::from_str(&text).map_err(|e| Error::Parse { what: path.display().to_string(), message: e.to_string() })?;
            Ok((d, record))
        })
        .collect()
}

/// Keys in order of first appearance.
fn ordered<'a>(keys: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for k in keys {
        if !out.iter().any(|o| o == k) {
            out.push(k.to_string());
        }
    }
    out
}

/// ASR in percent. Rows are config labels, columns are scored models.
pub fn asr_grid(records: &[JobRecord]) -> String {
    let labels = ordered(records.iter().map(|r| r.label.as_str()));
    let models = ordered(records.iter().flat_map(|r| r.models.iter().map(String::as_str)));
    let mut out = String::from("config");
    for m in &models {
        out.push_str(&format!(",{m}"));
    }
    out.push('\n');
    for label in &labels {
        out.push_str(label);
        for m in &models {
            let hits: Vec<bool> = records
                .iter()
                .filter(|r| &r.label == label)
                .filter_map(|r| r.models.iter().position(|x| x == m).map(|i| r.success[i]))
                .collect();
            if hits.is_empty() {
                out.push(',');
            } else {
                let rate = 100.0 * hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64;
                out.push_str(&format!(",{rate}"));
            }
        }
        out.push('\n');
    }
    out
}

/// Long-format loss traces: `job,config,epoch,term,value`.
pub fn loss_traces(jobs: &[(PathBuf, JobRecord)]) -> Result<String> {
    let mut out = String::from("job,config,epoch,term,value\n");
    for (dir, record) in jobs {
        let path = dir.join(TRACE_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
        for line in lines {
            let cells: Vec<&str> = line.split(',').collect();
            for (term, value) in header.iter().zip(&cells).skip(1) {
                out.push_str(&format!("{},{},{},{term},{value}\n", record.index, record.label, cells[0]));
            }
        }
    }
    Ok(out)
}

/// One [`EvaluationReport`] per `(config, prompt)`. Thresholds come from
/// `table` when given, else from the values stored with each job.
pub fn evaluate(jobs: &[(PathBuf, JobRecord)], table: Option<&ThresholdTable>) -> Result<Vec<(String, String, EvaluationReport)>> {
    let mut groups: BTreeMap<(String, String), Vec<&(PathBuf, JobRecord)>> = BTreeMap::new();
    for job in jobs {
        groups.entry((job.1.label.clone(), job.1.prompt.clone())).or_default().push(job);
    }
    let extractor = RandomFeaturePyramid::default();
    let mut out = Vec::new();
    for ((label, prompt), members) in groups {
        let models = members[0].1.models.clone();
        if members.iter().any(|(_, r)| r.models != models) {
            return Err(Error::invalid(format!("jobs under {label} / {prompt} score different models")));
        }
        let thresholds = match table {
            Some(t) => models.iter().map(|m| threshold_for(t, m)).collect::<Result<Vec<_>>>()?,
            None => members[0].1.thresholds.clone(),
        };
        let similarities: Vec<Vec<f64>> = (0..models.len()).map(|i| members.iter().map(|(_, r)| r.similarities[i]).collect()).collect();
        let load = |dir: &Path, name: &str| FaceImage::load(dir.join(name));
        let adversarial = members.iter().map(|(d, _)| load(d, "adversarial.png")).collect::<Result<Vec<_>, _>>()?;
        let sources = members.iter().map(|(d, _)| load(d, "source.png")).collect::<Result<Vec<_>, _>>()?;
        let report = EvaluationReport::compute(&models, &similarities, &thresholds, &adversarial, &sources, &extractor)?;
        out.push((label, prompt, report));
    }
    Ok(out)
}

pub fn evaluation_csv(reports: &[(String, String, EvaluationReport)]) -> String {
    let mut out = String::from("config,prompt,model,asr,mean_psnr,mean_ssim,fid,samples\n");
    for (label, prompt, report) in reports {
        for row in report.csv_rows().lines() {
            out.push_str(&format!("{label},\"{}\",{row}\n", prompt.replace('"', "\"\"")));
        }
    }
    out
}

/// Mean confidence per provider from `remote_<provider>.csv` files with
/// header `image_a,image_b,confidence,retries`.
pub fn remote_summary(dir: &Path) -> Result<Option<String>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().unwrap_or_default().to_string_lossy();
            name.starts_with(REMOTE_PREFIX) && name.ends_with(".csv")
        })
        .collect();
    if files.is_empty() {
        return Ok(None);
    }
    files.sort();
    let mut out = String::from("provider,pairs,mean_confidence,retries\n");
    for path in files {
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let stem = path.file_stem().unwrap_or_default().to_string_lossy();
        let provider = stem.trim_start_matches(REMOTE_PREFIX);
        let (mut n, mut sum, mut retries) = (0usize, 0.0, 0u64);
        for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
            let cells: Vec<&str> = line.rsplitn(3, ',').collect();
            let parse_err = || Error::Parse { what: path.display().to_string(), message: format!("bad row {line}") };
            let (r, c) = (cells.first().ok_or_else(parse_err)?, cells.get(1).ok_or_else(parse_err)?);
            sum += c.parse::<f64>().map_err(|_| parse_err())?;
            retries += r.parse::<u64>().map_err(|_| parse_err())?;
            n += 1;
        }
        let mean = if n == 0 { String::new() } else { (sum / n as f64).to_string() };
        out.push_str(&format!("{provider},{n},{mean},{retries}\n"));
    }
    Ok(Some(out))
}

/// Files written by [`report`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub asr_grid: PathBuf,
    pub loss_traces: PathBuf,
    pub evaluation: PathBuf,
    pub remote_summary: Option<PathBuf>,
}

/// Writes `asr_grid.csv`, `loss_traces.csv`, `evaluation.csv` and, when
/// remote results exist, `remote_summary.csv` into `results_dir/report/`.
pub fn report(results_dir: impl AsRef<Path>) -> Result<ReportFiles> {
    let dir = results_dir.as_ref();
    let jobs = load_records(dir)?;
    let remote = remote_summary(dir)?;
    if jobs.is_empty() && remote.is_none() {
        return Err(Error::NothingToReport(dir.display().to_string()));
    }
    let out = dir.join(REPORT_DIR);
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let write = |name: &str, text: &str| -> Result<PathBuf> {
        let p = out.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    };
    let records: Vec<JobRecord> = jobs.iter().map(|(_, r)| r.clone()).collect();
    let files = ReportFiles {
        asr_grid: write("asr_grid.csv", &asr_grid(&records))?,
        loss_traces: write("loss_traces.csv", &loss_traces(&jobs)?)?,
        evaluation: write("evaluation.csv", &evaluation_csv(&evaluate(&jobs, None)?))?,
        remote_summary: remote.map(|text| write("remote_summary.csv", &text)).transpose()?,
    };
    Ok(files)
}
