//! Command implementations behind the `dmfuse` binary.
//!
//! Every command returns a [`CliError`] carrying its exit code: 2 for usage
//! and parse problems, 1 for runtime failures (and failed verification).

pub mod config;
pub mod verify;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Error;
use crate::evalkit::{
    attribute_report, f_score, format_curve, format_predictions, format_report, frame_overlaps, pr_re_f,
    read_predictions, success_auc, MetricCurve, Prediction, PrReF, SequenceScore,
};
use crate::model::Model;
use crate::pipeline::{format_loss_log, track_sequence, train, EpochLog};
use crate::synthdata::{generate, read_annotations, read_sequence, write_sequence, Preset, SceneSpec, Sequence};
use config::{parse_ini, Profile, Reader};

pub use verify::Scope;

pub const CHECKPOINT_FILE: &str = "model.dmf";
pub const LOSS_LOG_FILE: &str = "loss_log.csv";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(Error),
    #[error("{context}: {source}")]
    Runtime {
        context: String,
        #[source]
        source: Error,
    },
    #[error("{failed} of {total} checks failed")]
    Verification { failed: usize, total: usize },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime { .. } | CliError::Verification { .. } => 1,
        }
    }

    fn runtime(context: impl Into<String>) -> impl FnOnce(Error) -> CliError {
        let context = context.into();
        move |source| CliError::Runtime { context, source }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Loads an optional override file on top of a named profile.
pub fn load_profile(name: &str, seed: u64, config: Option<&Path>) -> CliResult<Profile> {
    let mut p = Profile::named(name, seed).map_err(CliError::Usage)?;
    if let Some(path) = config {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(Error::io(format!("reading {}", path.display()), e)))?;
        let shown = path.display().to_string();
        let sections = parse_ini(&text, &shown).map_err(CliError::Usage)?;
        p.apply(&sections, &shown).map_err(CliError::Usage)?;
    }
    Ok(p)
}

/// Applies `f` to every item on up to `jobs` threads; results keep input order.
pub fn par_map<T: Sync, R: Send>(jobs: usize, items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let jobs = jobs.max(1).min(items.len().max(1));
    if jobs == 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker thread panicked"))
            .collect()
    })
}

// ---------------------------------------------------------------------------
// synth

/// One `[group]` of a synthesis spec.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthGroup {
    pub name: String,
    pub preset: Preset,
    pub count: usize,
    pub length: Option<usize>,
    pub illumination: Option<f64>,
}

/// Parses a synthesis spec: one section per group with keys `preset`
/// (required), `count`, `length` and `illumination`.
pub fn parse_synth_spec(text: &str, path: &str) -> crate::Result<Vec<SynthGroup>> {
    let r = Reader { path };
    let mut groups = Vec::new();
    for s in parse_ini(text, path)? {
        let section_err = |message: String| Error::Parse {
            path: path.to_string(),
            line: s.line,
            message,
        };
        if s.name.is_empty() {
            return Err(r.error(&s.entries[0], "keys must belong to a [group] section"));
        }
        if !s.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
            return Err(section_err(format!("group name `{}` must be alphanumeric, `_` or `-`", s.name)));
        }
        let mut preset = None;
        let mut g = SynthGroup {
            name: s.name.clone(),
            preset: Preset::Easy,
            count: 1,
            length: None,
            illumination: None,
        };
        for e in &s.entries {
            match e.key.as_str() {
                "preset" => preset = Some(e.value.parse::<Preset>().map_err(|err| r.error(e, err))?),
                "count" => g.count = r.get(e)?,
                "length" => g.length = Some(r.get(e)?),
                "illumination" => g.illumination = Some(r.get(e)?),
                other => return Err(r.error(e, format!("unknown key `{other}` in [{}]", s.name))),
            }
            if let Some(bad) = check_synth_value(&g) {
                return Err(r.error(e, bad));
            }
        }
        g.preset = preset.ok_or_else(|| section_err(format!("[{}] needs `preset`", s.name)))?;
        // an override may contradict the preset's tags; surface that at parse time
        scene_for(&g, 0).map_err(|err| section_err(format!("[{}]: {err}", s.name)))?;
        groups.push(g);
    }
    if groups.is_empty() {
        return Err(Error::Parse {
            path: path.to_string(),
            line: 1,
            message: "spec defines no groups".into(),
        });
    }
    Ok(groups)
}

fn check_synth_value(g: &SynthGroup) -> Option<String> {
    if g.count == 0 {
        return Some("count must be at least 1".into());
    }
    if g.length == Some(0) {
        return Some("length must be at least 1".into());
    }
    match g.illumination {
        Some(v) if !(v > 0.0 && v <= 1.0) => Some(format!("illumination {v} outside (0, 1]")),
        _ => None,
    }
}

fn scene_for(g: &SynthGroup, seed: u64) -> crate::Result<SceneSpec> {
    let mut spec = SceneSpec::preset(g.preset, seed);
    if let Some(l) = g.length {
        spec.length = l;
    }
    if let Some(i) = g.illumination {
        spec.illumination = i;
    }
    spec.validate()?;
    Ok(spec)
}

/// Writes `<out>/<group>_<index>` sequence directories; returns them in order.
pub fn cmd_synth(spec_path: &Path, out: &Path, seed: u64, jobs: usize) -> CliResult<Vec<PathBuf>> {
    let text = fs::read_to_string(spec_path)
        .map_err(|e| CliError::Usage(Error::io(format!("reading {}", spec_path.display()), e)))?;
    let groups = parse_synth_spec(&text, &spec_path.display().to_string()).map_err(CliError::Usage)?;
    let mut jobs_list = Vec::new();
    for (gi, g) in groups.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(gi as u64);
        for j in 0..g.count {
            let (scene_seed, render_seed) = (rng.next_u64(), rng.next_u64());
            jobs_list.push((g, out.join(format!("{}_{j:03}", g.name)), scene_seed, render_seed));
        }
    }
    let results = par_map(jobs, &jobs_list, |(g, dir, scene_seed, render_seed)| {
        let seq = generate(&scene_for(g, *scene_seed)?, *render_seed)?;
        write_sequence(&seq, dir)
    });
    for ((_, dir, ..), r) in jobs_list.iter().zip(results) {
        r.map_err(CliError::runtime(format!("synth: writing {}", dir.display())))?;
    }
    Ok(jobs_list.into_iter().map(|(_, d, ..)| d).collect())
}

// ---------------------------------------------------------------------------
// data discovery

/// Sequence directories under `root`, sorted by name. A directory that is
/// itself a sequence yields just itself.
pub fn sequence_dirs(root: &Path) -> CliResult<Vec<PathBuf>> {
    if root.join("groundtruth.txt").is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let entries = fs::read_dir(root)
        .map_err(|e| CliError::Usage(Error::io(format!("listing {}", root.display()), e)))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("groundtruth.txt").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(CliError::Usage(Error::InvalidArgument(format!(
            "{} contains no sequence directories",
            root.display()
        ))));
    }
    Ok(dirs)
}

fn sequence_name(dir: &Path) -> String {
    dir.file_name().map_or_else(|| "sequence".into(), |n| n.to_string_lossy().into_owned())
}

fn load_sequences(dirs: &[PathBuf], jobs: usize) -> CliResult<Vec<Sequence>> {
    par_map(jobs, dirs, |d| read_sequence(d))
        .into_iter()
        .zip(dirs)
        .map(|(r, d)| r.map_err(CliError::runtime(format!("synthdata: loading {}", d.display()))))
        .collect()
}

// ---------------------------------------------------------------------------
// train

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub epochs: Vec<EpochLog>,
}

/// Trains on every sequence under `data`, writing the checkpoint and loss log
/// into `out`. `init` resumes from existing weights.
pub fn cmd_train(
    profile: &Profile,
    data: &Path,
    out: &Path,
    init: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> CliResult<TrainOutcome> {
    let dataset = load_sequences(&sequence_dirs(data)?, profile.train.jobs)?;
    let mut model = match init {
        Some(p) => Model::load(profile.model.clone(), p),
        None => Model::new(profile.model.clone(), profile.train.seed),
    }
    .map_err(CliError::runtime("model: building the network"))?;
    let epochs = train(&mut model, &dataset, &profile.train, &mut on_epoch).map_err(CliError::runtime("pipeline: training"))?;
    fs::create_dir_all(out).map_err(|e| CliError::Usage(Error::io(format!("creating {}", out.display()), e)))?;
    let checkpoint = out.join(CHECKPOINT_FILE);
    model.save(&checkpoint).map_err(CliError::runtime("model: saving the checkpoint"))?;
    let loss_log = out.join(LOSS_LOG_FILE);
    fs::write(&loss_log, format_loss_log(&epochs))
        .map_err(|e| CliError::runtime("pipeline: writing the loss log")(Error::io(loss_log.display().to_string(), e)))?;
    Ok(TrainOutcome {
        checkpoint,
        loss_log,
        epochs,
    })
}

// ---------------------------------------------------------------------------
// track

/// Tracks every sequence under `data` from its first box and writes
/// `<out>/<sequence>.txt` prediction files.
pub fn cmd_track(profile: &Profile, checkpoint: &Path, data: &Path, out: &Path, jobs: usize) -> CliResult<Vec<PathBuf>> {
    let model = Model::load(profile.model.clone(), checkpoint)
        .map_err(CliError::runtime(format!("model: loading {}", checkpoint.display())))?;
    let dirs = sequence_dirs(data)?;
    fs::create_dir_all(out).map_err(|e| CliError::Usage(Error::io(format!("creating {}", out.display()), e)))?;
    let results = par_map(jobs, &dirs, |dir| -> CliResult<PathBuf> {
        let seq = read_sequence(dir).map_err(CliError::runtime(format!("synthdata: loading {}", dir.display())))?;
        let boxes = track_sequence(&model, &seq, &profile.tracker)
            .map_err(CliError::runtime(format!("pipeline: tracking {}", dir.display())))?;
        let trace: Vec<Prediction> = boxes.into_iter().map(|(b, c)| Prediction::present(b, c)).collect();
        let path = out.join(format!("{}.txt", sequence_name(dir)));
        fs::write(&path, format_predictions(&trace))
            .map_err(|e| CliError::runtime("pipeline: writing predictions")(Error::io(path.display().to_string(), e)))?;
        Ok(path)
    });
    results.into_iter().collect()
}

// ---------------------------------------------------------------------------
// eval

#[derive(Debug, Clone)]
pub struct SequenceResult {
    pub name: String,
    pub tags: Vec<String>,
    pub metrics: PrReF,
    pub auc: f64,
}

#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub sequences: Vec<SequenceResult>,
    /// Pr and Re curves averaged over sequences, F recomputed from them.
    pub overall: PrReF,
    pub mean_auc: f64,
    pub report: String,
}

/// Averages per-sequence precision and recall at each threshold.
fn pooled(results: &[SequenceResult]) -> PrReF {
    let first = &results[0].metrics;
    let n = results.len() as f64;
    let avg = |get: fn(&PrReF) -> &MetricCurve| -> Vec<f64> {
        (0..first.f.thresholds.len())
            .map(|k| results.iter().map(|r| get(&r.metrics).values[k]).sum::<f64>() / n)
            .collect()
    };
    let pr = avg(|m| &m.precision);
    let re = avg(|m| &m.recall);
    let f: Vec<f64> = pr.iter().zip(&re).map(|(&p, &r)| f_score(p, r)).collect();
    let mut best = 0;
    for (k, &v) in f.iter().enumerate() {
        if v > f[best] {
            best = k;
        }
    }
    let curve = |values: Vec<f64>, best: usize| MetricCurve {
        thresholds: first.f.thresholds.clone(),
        summary: values[best],
        values,
    };
    PrReF {
        peak_tau: first.f.thresholds[best],
        peak_f: f[best],
        peak_precision: pr[best],
        peak_recall: re[best],
        precision: curve(pr, best),
        recall: curve(re, best),
        f: curve(f, best),
    }
}

/// Scores `<predictions>/<name>.txt` against every sequence under `data`.
/// Writes `report.txt`, `report.csv` and `curves/<name>.csv` into `out`.
pub fn cmd_eval(data: &Path, predictions: &Path, out: &Path, jobs: usize) -> CliResult<EvalSummary> {
    let dirs = sequence_dirs(data)?;
    let scored = par_map(jobs, &dirs, |dir| -> CliResult<SequenceResult> {
        let name = sequence_name(dir);
        let ctx = format!("evalkit: scoring {name}");
        let (gt, tags) = read_annotations(dir).map_err(CliError::runtime(ctx.clone()))?;
        let trace = read_predictions(&predictions.join(format!("{name}.txt"))).map_err(CliError::runtime(ctx.clone()))?;
        let metrics = pr_re_f(&trace, &gt).map_err(CliError::runtime(ctx.clone()))?;
        let overlaps = frame_overlaps(&trace, &gt).map_err(CliError::runtime(ctx.clone()))?;
        let auc = if overlaps.is_empty() {
            0.0
        } else {
            success_auc(&overlaps).map_err(CliError::runtime(ctx))?.1
        };
        Ok(SequenceResult {
            name,
            tags: tags.iter().map(|t| t.to_string()).collect(),
            metrics,
            auc,
        })
    });
    let sequences = scored.into_iter().collect::<CliResult<Vec<_>>>()?;
    let overall = pooled(&sequences);
    let mean_auc = sequences.iter().map(|s| s.auc).sum::<f64>() / sequences.len() as f64;

    let mut report = format!("{:<24} {:>6} {:>6} {:>6} {:>6} {:>5}  tags\n", "sequence", "Pr", "Re", "F", "AUC", "tau");
    for s in &sequences {
        let m = &s.metrics;
        let _ = writeln!(
            report,
            "{:<24} {:>6.3} {:>6.3} {:>6.3} {:>6.3} {:>5.2}  {}",
            s.name,
            m.peak_precision,
            m.peak_recall,
            m.peak_f,
            s.auc,
            m.peak_tau,
            s.tags.join(" ")
        );
    }
    let _ = writeln!(
        report,
        "{:<24} {:>6.3} {:>6.3} {:>6.3} {:>6.3} {:>5.2}",
        "overall", overall.peak_precision, overall.peak_recall, overall.peak_f, mean_auc, overall.peak_tau
    );

    let score = |get: fn(&SequenceResult) -> f64| -> Vec<SequenceScore> {
        sequences
            .iter()
            .map(|s| SequenceScore {
                name: s.name.clone(),
                tags: s.tags.clone(),
                value: get(s),
            })
            .collect()
    };
    let by_f = attribute_report(&score(|s| s.metrics.peak_f)).map_err(CliError::runtime("evalkit: attributes"))?;
    let by_auc = attribute_report(&score(|s| s.auc)).map_err(CliError::runtime("evalkit: attributes"))?;
    let mut csv = format_report(
        "Pr",
        &[("all".to_string(), overall.peak_precision)],
    );
    csv += &format_report("Re", &[("all".to_string(), overall.peak_recall)]);
    csv += &format_report("F", &[("all".to_string(), overall.peak_f)]);
    csv += &format_report("AUC", &[("all".to_string(), mean_auc)]);
    csv += &format_report("F", &by_f);
    csv += &format_report("AUC", &by_auc);

    let write = |path: PathBuf, text: &str| -> CliResult<()> {
        fs::write(&path, text).map_err(|e| CliError::runtime("evalkit: writing results")(Error::io(path.display().to_string(), e)))
    };
    let curves = out.join("curves");
    fs::create_dir_all(&curves).map_err(|e| CliError::Usage(Error::io(format!("creating {}", curves.display()), e)))?;
    write(out.join("report.txt"), &report)?;
    write(out.join("report.csv"), &csv)?;
    for s in &sequences {
        write(curves.join(format!("{}.csv", s.name)), &format_curve(&s.metrics))?;
    }
    write(curves.join("overall.csv"), &format_curve(&overall))?;
    Ok(EvalSummary {
        sequences,
        overall,
        mean_auc,
        report,
    })
}

/// Recomputes F from every `(Pr, Re)` row of a table file.
pub fn cmd_eval_table(path: &Path) -> CliResult<(String, Vec<verify::Check>)> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(Error::io(format!("reading {}", path.display()), e)))?;
    let rows = verify::parse_table_rows(&text, &path.display().to_string()).map_err(CliError::Usage)?;
    let mut table = format!("{:<12} {:<14} {:>6} {:>6} {:>9} {:>9}\n", "benchmark", "tracker", "Pr", "Re", "F", "printed");
    for r in &rows {
        let _ = writeln!(
            table,
            "{:<12} {:<14} {:>6.3} {:>6.3} {:>9.3} {:>9.3}",
            r.benchmark,
            r.method,
            r.precision,
            r.recall,
            r.computed_f(),
            r.printed_f
        );
    }
    Ok((table, verify::table_checks(&rows)))
}

// ---------------------------------------------------------------------------
// verify

/// Runs the selected suites; fails when any check does.
pub fn cmd_verify(scope: Scope, mut on_check: impl FnMut(&verify::Check)) -> CliResult<Vec<verify::Check>> {
    let checks = verify::run(scope).map_err(CliError::runtime("verify: running the suites"))?;
    checks.iter().for_each(&mut on_check);
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(CliError::Verification {
            failed,
            total: checks.len(),
        });
    }
    Ok(checks)
}
