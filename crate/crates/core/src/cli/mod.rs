//! The command-line pipeline: `synthesize`, `preprocess`, `pretrain`,
//! `personalize` and `evaluate`, all driven by one [`ExperimentConfig`].
//!
//! Directory layout:
//!
//! | path | written by |
//! |---|---|
//! | `{input_dir}/{subject}_n{night}.edf` (+ `.csv` hypnogram sidecar) | `synthesize` |
//! | `{cache_dir}/{subject}_n{night}.night` | `preprocess` |
//! | `{output_dir}/si.ckpt`, `{output_dir}/pretrain_manifest.json` | `pretrain` |
//! | `{output_dir}/personalized/{subject}/{strategy}_a{alpha}/e{epoch}.ckpt` and `.../{subject}/manifest.json` | `personalize` |
//! | `{output_dir}/report.csv`, `curves.json`, `study.json` | `evaluate` |

mod config;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

pub use config::{
    ConfigError, DataSection, EvaluateSection, ExperimentConfig, PersonalizeSection, PreprocessingSection,
    PretrainSection,
};

use crate::data_io::{
    generate_synthetic_cohort, parse_edf, read_annotations_csv, write_annotations_csv, EdfFile, NightRecording,
};
use crate::evaluation::{
    experiment_report, format_table, score_night, write_report_csv, ReportRow, StudyReport, SI_STRATEGY,
};
use crate::model::{Checkpoint, Strategy};
use crate::preprocessing::{prepare_night, read_night, write_night, PreparedNight};
use crate::training::{personalize, pretrain, sha256_hex, Manifest, ManifestEntry};

/// Environment variable holding the worker thread count.
pub const WORKERS_ENV: &str = "SEQSLEEP_WORKERS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    /// 2 for usage and configuration errors, 1 for failures at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn io_at(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

/// Worker count from [`WORKERS_ENV`]; 1 when unset.
pub fn workers_from_env() -> Result<usize, CliError> {
    match std::env::var(WORKERS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Usage(format!("{WORKERS_ENV} must be a positive integer, got `{v}`"))),
        },
    }
}

/// `{subject}_n{night}`.
pub fn night_stem(subject: &str, night: u32) -> String {
    format!("{subject}_n{night}")
}

fn parse_stem(stem: &str) -> (String, u32) {
    match stem.rsplit_once("_n").and_then(|(s, n)| Some((s, n.parse().ok()?))) {
        Some((s, n)) if !s.is_empty() => (s.to_string(), n),
        _ => (stem.to_string(), 1),
    }
}

fn files_with_extension(dir: &Path, ext: &str) -> Result<Vec<PathBuf>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case(ext)))
        .collect();
    files.sort();
    Ok(files)
}

/// Writes the configured synthetic cohort as EDF recordings with CSV
/// hypnogram sidecars.
pub fn cmd_synthesize(cfg: &ExperimentConfig, log: &mut dyn Write) -> Result<Vec<PathBuf>, CliError> {
    let spec = &cfg.data.synthetic;
    if (spec.sample_rate - cfg.preprocessing.sample_rate).abs() > 1e-9 {
        return Err(ConfigError::Invalid {
            key: "data.synthetic.sample_rate".into(),
            message: format!("differs from preprocessing.sample_rate ({})", cfg.preprocessing.sample_rate),
        }
        .into());
    }
    let recordings = generate_synthetic_cohort(spec, cfg.seed).map_err(|e| ConfigError::Invalid {
        key: "data.synthetic".into(),
        message: e.to_string(),
    })?;
    let dir = &cfg.data.input_dir;
    fs::create_dir_all(dir).map_err(io_at(dir))?;
    let mut written = Vec::new();
    for rec in &recordings {
        let stem = night_stem(&rec.subject_id, rec.night_index);
        let peak = rec.signal.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let range = (peak * 1.05).ceil().max(1.0);
        let mut edf = EdfFile::single_channel(&cfg.data.channel, rec.sample_rate, &rec.signal, -range, range, 30.0)
            .map_err(runtime)?;
        edf.header.patient = format!("{} X X X", rec.subject_id);
        let edf_path = dir.join(format!("{stem}.edf"));
        fs::write(&edf_path, edf.to_bytes()).map_err(io_at(&edf_path))?;
        let csv_path = dir.join(format!("{stem}.csv"));
        let file = fs::File::create(&csv_path).map_err(io_at(&csv_path))?;
        write_annotations_csv(file, &rec.annotations).map_err(runtime)?;
        writeln!(log, "{stem}: {} epochs", rec.annotations.iter().map(|a| a.duration_sec).sum::<f64>() / 30.0)
            .map_err(runtime)?;
        written.push(edf_path);
    }
    Ok(written)
}

/// Reads one recording; the hypnogram comes from a `.csv` sidecar when
/// present, otherwise from the file's own EDF+ annotations.
pub fn read_recording(path: &Path, channel: &str) -> Result<NightRecording, CliError> {
    let bytes = fs::read(path).map_err(io_at(path))?;
    let mut rec = parse_edf(&bytes, channel).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    (rec.subject_id, rec.night_index) = parse_stem(stem);
    let sidecar = path.with_extension("csv");
    if sidecar.exists() {
        let file = fs::File::open(&sidecar).map_err(io_at(&sidecar))?;
        rec.annotations =
            read_annotations_csv(file).map_err(|e| CliError::Runtime(format!("{}: {e}", sidecar.display())))?;
    }
    Ok(rec)
}

/// Preprocesses every recording of the input directory into a night cache.
/// Failing files are reported and skipped; any failure makes the command
/// fail after the remaining files are done.
pub fn cmd_preprocess(cfg: &ExperimentConfig, log: &mut dyn Write) -> Result<Vec<PathBuf>, CliError> {
    let input = &cfg.data.input_dir;
    let files = files_with_extension(input, "edf")?;
    if files.is_empty() {
        return Err(CliError::Usage(format!("no nights found in {}", input.display())));
    }
    let out = &cfg.data.cache_dir;
    fs::create_dir_all(out).map_err(io_at(out))?;
    let spectrogram = cfg.preprocessing.spectrogram();
    let mut written = Vec::new();
    let mut failures = Vec::new();
    for path in &files {
        let result = read_recording(path, &cfg.data.channel).and_then(|rec| {
            let night = prepare_night(&rec, &spectrogram, cfg.preprocessing.norm_axis)
                .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
            let target = out.join(format!("{}.night", night_stem(&night.subject_id, night.night_index)));
            let mut buf = Vec::new();
            write_night(&mut buf, &night).map_err(runtime)?;
            fs::write(&target, buf).map_err(io_at(&target))?;
            Ok((night, target))
        });
        match result {
            Ok((night, target)) => {
                writeln!(
                    log,
                    "{} night {}: {} epochs kept, {} excluded",
                    night.subject_id,
                    night.night_index,
                    night.len(),
                    night.excluded
                )
                .map_err(runtime)?;
                written.push(target);
            }
            Err(e) => {
                writeln!(log, "error: {e}").map_err(runtime)?;
                failures.push(e.to_string());
            }
        }
    }
    if !failures.is_empty() {
        return Err(CliError::Runtime(format!("{} of {} nights failed", failures.len(), files.len())));
    }
    Ok(written)
}

/// Every cached night, grouped by subject and ordered by night.
pub fn load_caches(dir: &Path) -> Result<BTreeMap<String, Vec<PreparedNight>>, CliError> {
    let files = files_with_extension(dir, "night")?;
    if files.is_empty() {
        return Err(CliError::Usage(format!("no cached nights in {}", dir.display())));
    }
    let mut out: BTreeMap<String, Vec<PreparedNight>> = BTreeMap::new();
    for path in files {
        let file = fs::File::open(&path).map_err(io_at(&path))?;
        let night = read_night(std::io::BufReader::new(file))
            .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        out.entry(night.subject_id.clone()).or_default().push(night);
    }
    for nights in out.values_mut() {
        nights.sort_by_key(|n| n.night_index);
    }
    Ok(out)
}

fn check_shapes(cfg: &ExperimentConfig, nights: &[PreparedNight]) -> Result<(), CliError> {
    if let Some(n) = nights.iter().find(|n| n.freq_bins() != cfg.model.freq_bins || n.frames() != cfg.model.frames) {
        return Err(ConfigError::Invalid {
            key: "model.freq_bins".into(),
            message: format!(
                "cached images of {} night {} are {}x{}, the model expects {}x{}",
                n.subject_id,
                n.night_index,
                n.freq_bins(),
                n.frames(),
                cfg.model.freq_bins,
                cfg.model.frames
            ),
        }
        .into());
    }
    Ok(())
}

fn config_json(cfg: &ExperimentConfig) -> serde_json::Value {
    serde_json::to_value(cfg).expect("config serializes")
}

fn write_checkpoint_file(ckpt: &Checkpoint, dir: &Path, rel: &str) -> Result<ManifestEntry, CliError> {
    let bytes = ckpt.to_bytes();
    let path = dir.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_at(parent))?;
    }
    fs::write(&path, &bytes).map_err(io_at(&path))?;
    Ok(ManifestEntry::new(rel, &bytes))
}

/// Pretrains the subject-independent model on the cached source subjects.
pub fn cmd_pretrain(cfg: &ExperimentConfig, log: &mut dyn Write) -> Result<Manifest, CliError> {
    let caches = load_caches(&cfg.data.cache_dir)?;
    let p = &cfg.pretrain;
    let pick = |names: &[String]| -> Result<Vec<PreparedNight>, CliError> {
        let mut out = Vec::new();
        for name in names {
            let nights = caches
                .get(name)
                .ok_or_else(|| CliError::Usage(format!("no cached nights for subject `{name}`")))?;
            out.extend(nights.iter().cloned());
        }
        Ok(out)
    };
    let train_names: Vec<String> = if p.subjects.is_empty() {
        caches
            .keys()
            .filter(|s| !p.valid_subjects.contains(s) && !cfg.personalize.subjects.contains(s))
            .cloned()
            .collect()
    } else {
        p.subjects.clone()
    };
    let train = pick(&train_names)?;
    let valid = pick(&p.valid_subjects)?;
    check_shapes(cfg, &train)?;
    check_shapes(cfg, &valid)?;
    writeln!(log, "pretraining on {} nights, validating on {}", train.len(), valid.len()).map_err(runtime)?;
    let outcome = pretrain(&train, &valid, &cfg.model, &cfg.pretrain_config(), cfg.seed).map_err(runtime)?;
    for l in &outcome.log {
        match l.valid_acc {
            Some(acc) => writeln!(log, "epoch {:>3}  loss {:.5}  valid acc {:.4}", l.epoch, l.train_loss, acc),
            None => writeln!(log, "epoch {:>3}  loss {:.5}", l.epoch, l.train_loss),
        }
        .map_err(runtime)?;
    }
    let out = &cfg.data.output_dir;
    let mut entry = write_checkpoint_file(&outcome.checkpoint, out, "si.ckpt")?;
    entry.epoch = outcome.best_epoch;
    if let Some(acc) = outcome.log.get(outcome.best_epoch.wrapping_sub(1)).and_then(|l| l.valid_acc) {
        entry.metrics.insert("valid_acc".into(), acc);
    }
    let mut manifest = Manifest::new("pretrain", cfg.seed, config_json(cfg));
    manifest.entries.push(entry);
    manifest.losses = outcome.log.iter().map(|l| l.train_loss).collect();
    let path = out.join("pretrain_manifest.json");
    manifest.write(&path).map_err(io_at(&path))?;
    writeln!(log, "retained epoch {}; wrote {}", outcome.best_epoch, out.join("si.ckpt").display()).map_err(runtime)?;
    Ok(manifest)
}

/// Directory name of one personalization run.
pub fn run_dir(strategy: Strategy, alpha: f64) -> String {
    let name: String = strategy
        .name()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
        .collect();
    format!("{name}_a{alpha}")
}

fn personalized_dir(cfg: &ExperimentConfig, subject: &str) -> PathBuf {
    cfg.data.output_dir.join("personalized").join(subject)
}

fn target_subjects(cfg: &ExperimentConfig, subject: Option<&str>) -> Result<Vec<String>, CliError> {
    match subject {
        Some(s) => Ok(vec![s.to_string()]),
        None if cfg.personalize.subjects.is_empty() => {
            Err(CliError::Usage("no target subject: pass --subject or set personalize.subjects".into()))
        }
        None => Ok(cfg.personalize.subjects.clone()),
    }
}

fn night_of<'a>(caches: &'a BTreeMap<String, Vec<PreparedNight>>, subject: &str, night: u32) -> Result<&'a PreparedNight, CliError> {
    caches
        .get(subject)
        .and_then(|n| n.iter().find(|n| n.night_index == night))
        .ok_or_else(|| CliError::Runtime(format!("missing night {night} of subject `{subject}`")))
}

/// Personalizes the SI model on night 1 of each target subject for every
/// (strategy, α) of the grid, writing snapshot checkpoints and one manifest
/// per subject. Runs fan out over `workers` threads.
pub fn cmd_personalize(
    cfg: &ExperimentConfig,
    subject: Option<&str>,
    workers: usize,
    log: &mut dyn Write,
) -> Result<Vec<Manifest>, CliError> {
    let si_path = cfg.si_checkpoint_path();
    let si = Checkpoint::load(&si_path).map_err(runtime)?;
    if si.params.config != cfg.model {
        return Err(ConfigError::Invalid {
            key: "model".into(),
            message: format!("does not match the configuration stored in {}", si_path.display()),
        }
        .into());
    }
    let caches = load_caches(&cfg.data.cache_dir)?;
    let runs: Vec<(Strategy, f64)> = cfg
        .personalize
        .strategies
        .iter()
        .flat_map(|&s| cfg.personalize.alphas.iter().map(move |&a| (s, a)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().map_err(runtime)?;
    let mut manifests = Vec::new();
    for subject in target_subjects(cfg, subject)? {
        let night1 = night_of(&caches, &subject, 1)?;
        check_shapes(cfg, std::slice::from_ref(night1))?;
        let dir = personalized_dir(cfg, &subject);
        let results: Vec<Vec<ManifestEntry>> = pool.install(|| {
            runs.par_iter()
                .map(|&(strategy, alpha)| {
                    let out = personalize(&si, night1, &cfg.finetune_config(strategy, alpha)).map_err(runtime)?;
                    let mut entries = Vec::new();
                    for snap in &out.snapshots {
                        let rel = format!("{}/e{:03}.ckpt", run_dir(strategy, alpha), snap.epoch);
                        let mut e = write_checkpoint_file(&snap.checkpoint, &dir, &rel)?;
                        e.subject = Some(subject.clone());
                        e.strategy = Some(strategy.name().to_string());
                        e.alpha = Some(alpha);
                        e.epoch = snap.epoch;
                        e.metrics.insert("train_loss".into(), out.epoch_losses[snap.epoch - 1]);
                        entries.push(e);
                    }
                    Ok(entries)
                })
                .collect::<Result<_, CliError>>()
        })?;
        let mut manifest = Manifest::new("personalize", cfg.seed, config_json(cfg));
        manifest.entries = results.into_iter().flatten().collect();
        let path = dir.join("manifest.json");
        fs::create_dir_all(&dir).map_err(io_at(&dir))?;
        manifest.write(&path).map_err(io_at(&path))?;
        writeln!(log, "{subject}: {} snapshots, manifest {}", manifest.entries.len(), path.display()).map_err(runtime)?;
        manifests.push(manifest);
    }
    Ok(manifests)
}

/// Scores the SI model on both nights and every personalized snapshot on
/// night 2 of each target subject; writes the report CSV and study JSON and
/// prints the summary table.
pub fn cmd_evaluate(cfg: &ExperimentConfig, subject: Option<&str>, log: &mut dyn Write) -> Result<StudyReport, CliError> {
    let si = Checkpoint::load(&cfg.si_checkpoint_path()).map_err(runtime)?;
    let caches = load_caches(&cfg.data.cache_dir)?;
    let (stride, fusion) = (cfg.evaluate.stride, cfg.evaluate.fusion);
    let mut rows = Vec::new();
    for subject in target_subjects(cfg, subject)? {
        let night2 = night_of(&caches, &subject, 2)?;
        for night in [night_of(&caches, &subject, 1).ok(), Some(night2)].into_iter().flatten() {
            let s = score_night(&si.params, night, stride, fusion).map_err(runtime)?;
            rows.push(ReportRow::new(&subject, night.night_index, None, SI_STRATEGY, 0, &s.metrics));
        }
        let dir = personalized_dir(cfg, &subject);
        let manifest_path = dir.join("manifest.json");
        let manifest = Manifest::read(&manifest_path).map_err(io_at(&manifest_path))?;
        for e in &manifest.entries {
            let path = dir.join(&e.path);
            let bytes = fs::read(&path).map_err(io_at(&path))?;
            if sha256_hex(&bytes) != e.sha256 {
                return Err(CliError::Runtime(format!("{}: checksum differs from the manifest", path.display())));
            }
            let ckpt = crate::model::read_checkpoint(&bytes[..])
                .map_err(|err| CliError::Runtime(format!("{}: {err}", path.display())))?;
            let s = score_night(&ckpt.params, night2, stride, fusion).map_err(runtime)?;
            let strategy = e.strategy.clone().unwrap_or_default();
            rows.push(ReportRow::new(&subject, night2.night_index, e.alpha, &strategy, e.epoch, &s.metrics));
        }
    }
    let out = &cfg.data.output_dir;
    fs::create_dir_all(out).map_err(io_at(out))?;
    let csv_path = out.join("report.csv");
    let file = fs::File::create(&csv_path).map_err(io_at(&csv_path))?;
    write_report_csv(file, &rows).map_err(runtime)?;
    let report = experiment_report(&rows, cfg.evaluate.beta).map_err(runtime)?;
    let curves_path = out.join("curves.json");
    fs::write(&curves_path, serde_json::to_string_pretty(&report.curves).map_err(runtime)? + "\n")
        .map_err(io_at(&curves_path))?;
    let study_path = out.join("study.json");
    fs::write(&study_path, serde_json::to_string_pretty(&report).map_err(runtime)? + "\n").map_err(io_at(&study_path))?;
    write!(log, "{}", format_table(&report)).map_err(runtime)?;
    for g in &report.groups {
        writeln!(
            log,
            "{} alpha={} {:?}: n={} mean improvement {:+.2} pp",
            g.strategy,
            g.alpha,
            g.group,
            g.n,
            100.0 * g.mean_improvement
        )
        .map_err(runtime)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stems_round_trip() {
        assert_eq!(parse_stem(&night_stem("syn003", 2)), ("syn003".to_string(), 2));
        assert_eq!(parse_stem("a_nb_n1"), ("a_nb".to_string(), 1));
        assert_eq!(parse_stem("plain"), ("plain".to_string(), 1));
        assert_eq!(run_dir(Strategy::EpbSoftmax, 0.4), "epb-softmax_a0.4");
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), 2);
        assert_eq!(CliError::Config(ConfigError::UnknownKey("a.b".into())).exit_code(), 2);
        assert_eq!(CliError::Runtime("x".into()).exit_code(), 1);
    }
}
