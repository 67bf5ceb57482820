//! The four verbs. Each returns a summary struct so tests and `bench` can use
//! the results without re-reading files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use ripbench::checkpoint::{Checkpoint, Kind};
use ripbench::classical::{fit_svm, predict_svm, BinarySvm, OvrSvmModel, SvmFitReport};
use ripbench::data::{
    centroid_probe, load_dataset, split_dataset, write_synthetic, DataError, Dataset, GenConfig, GenReport,
    ManeuverLabel, NormStats, NormalizedSample, Normalizer, Split, SplitName, View, NUM_CLASSES,
};
use ripbench::metrics::{EvalReport, LEADERBOARD_HEADER};
use ripbench::models::Model;
use ripbench::tensor::Tensor;
use ripbench::train::{fit, predict_samples, History};
use serde::Serialize;

use crate::config::{Method, ResolvedConfig, Task};
use crate::error::{write_failed, Failure, Result};

pub const CHECKPOINT_FILE: &str = "checkpoint.ripc";
pub const RESOLVED_FILE: &str = "config.resolved.toml";
pub const HISTORY_FILE: &str = "history.toml";
pub const SVM_FIT_FILE: &str = "svm_fit.toml";

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| write_failed(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| write_failed(path, e))
}

fn labels(codes: &[usize]) -> Vec<ManeuverLabel> {
    codes.iter().map(|&c| ManeuverLabel::from_code(c).expect("class code")).collect()
}

// ---------------------------------------------------------------- gen-data

#[derive(Debug)]
pub struct GenSummary {
    pub report: GenReport,
    /// Nearest-centroid test accuracy on a 50/20/30 split of the new data.
    pub probe: f64,
}

pub fn gen_data(config: Option<&Path>, out: &Path, seed: u64) -> Result<GenSummary> {
    let cfg = match config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::usage(format!("cannot read {}: {e}", p.display())))?;
            let cfg: GenConfig = toml::from_str(&text).map_err(|e| Failure::usage(format!("generator config: {e}")))?;
            cfg.validate().map_err(Failure::usage)?;
            cfg
        }
        None => GenConfig::default(),
    };
    let report = write_synthetic(&cfg, seed, out).map_err(|e| match e {
        // the data itself is fine; the destination is not
        DataError::Io { .. } | DataError::Invalid(_) => Failure::usage(e),
        e => e.into(),
    })?;
    let ds = load_dataset(out)?;
    let split = split_dataset(&ds, [0.5, 0.2, 0.3], seed, true)?;
    let probe = centroid_probe(&ds.subset(&split.train), &ds.subset(&split.test));
    Ok(GenSummary { report, probe })
}

// ---------------------------------------------------------------- shared

/// Dataset, split and train-fitted normalizer for one run configuration.
struct Prepared {
    ds: Dataset,
    split: Split,
    norm: Normalizer,
}

fn check_views(ds: &Dataset, cfg: &ResolvedConfig) -> Result<()> {
    if ds.views.len() < cfg.n_views() {
        return Err(Failure::data(format!(
            "task {} needs {} views; {} has only {}",
            cfg.task.as_str(),
            cfg.n_views(),
            cfg.dataset.display(),
            ds.views.len()
        )));
    }
    Ok(())
}

fn prepare(cfg: &ResolvedConfig) -> Result<Prepared> {
    let ds = load_dataset(&cfg.dataset)?;
    check_views(&ds, cfg)?;
    let split = split_dataset(&ds, cfg.split.ratios, cfg.split.seed, cfg.split.stratified)?;
    let mut norm = Normalizer::fit(&ds.subset(&split.train))?;
    // only the views the task reads are part of the model
    norm.views.truncate(cfg.n_views());
    norm.stats.truncate(cfg.n_views());
    Ok(Prepared { ds, split, norm })
}

impl Prepared {
    fn samples(&self, name: SplitName) -> Result<Vec<NormalizedSample>> {
        Ok(self.norm.apply_all(&self.ds.subset(self.split.part(name)))?)
    }
}

fn push_normalizer(ck: &mut Checkpoint, norm: &Normalizer) {
    for (v, st) in norm.views.iter().zip(&norm.stats) {
        let d = st.mean.len();
        ck.push(format!("norm/{}/mean", v.as_str()), Tensor::new(&[d], st.mean.clone()).expect("norm shape"));
        ck.push(format!("norm/{}/std", v.as_str()), Tensor::new(&[d], st.std.clone()).expect("norm shape"));
    }
}

fn read_normalizer(ck: &Checkpoint, n_views: usize, dim: usize) -> Result<Normalizer> {
    let mut norm = Normalizer {
        views: Vec::new(),
        stats: Vec::new(),
    };
    for &v in &View::ALL[..n_views] {
        let get = |what: &str| -> Result<Vec<f64>> {
            let t = ck.require(&format!("norm/{}/{what}", v.as_str()))?;
            if t.shape() != [dim] {
                return Err(Failure::data(format!("normalizer {}/{what} has shape {:?}", v.as_str(), t.shape())));
            }
            Ok(t.data().to_vec())
        };
        norm.views.push(v);
        norm.stats.push(NormStats {
            mean: get("mean")?,
            std: get("std")?,
        });
    }
    Ok(norm)
}

fn base_checkpoint(kind: Kind, cfg: &ResolvedConfig, dim: usize) -> Checkpoint {
    let mut ck = Checkpoint::new(kind, cfg.method.as_str(), cfg.to_toml());
    ck.meta.insert("dim".into(), toml::Value::Integer(dim as i64));
    ck.meta.insert("n_views".into(), toml::Value::Integer(cfg.n_views() as i64));
    ck.meta.insert("task".into(), toml::Value::String(cfg.task.as_str().into()));
    ck
}

fn svm_to_checkpoint(ck: &mut Checkpoint, m: &OvrSvmModel) {
    ck.meta.insert("gamma".into(), toml::Value::Float(m.gamma));
    ck.meta.insert("c".into(), toml::Value::Float(m.c));
    for (l, machine) in ManeuverLabel::ALL.iter().zip(&m.machines) {
        let Some(machine) = machine else { continue };
        ck.meta.insert(format!("bias_{}", l.as_str()), toml::Value::Float(machine.bias));
        // a machine without support vectors is just its bias
        if let Some(d) = machine.support.first().map(Vec::len) {
            let n = machine.support.len();
            let flat = machine.support.concat();
            ck.push(format!("svm/{}/support", l.as_str()), Tensor::new(&[n, d], flat).expect("support shape"));
            ck.push(format!("svm/{}/coef", l.as_str()), Tensor::new(&[n], machine.coef.clone()).expect("coef shape"));
        }
    }
}

fn svm_from_checkpoint(ck: &Checkpoint) -> Result<OvrSvmModel> {
    let gamma = ck.meta_f64("gamma")?;
    let c = ck.meta_f64("c")?;
    let mut machines = Vec::with_capacity(NUM_CLASSES);
    for l in ManeuverLabel::ALL {
        let Ok(bias) = ck.meta_f64(&format!("bias_{}", l.as_str())) else {
            machines.push(None);
            continue;
        };
        let (support, coef) = match ck.get(&format!("svm/{}/support", l.as_str())) {
            Some(s) => {
                let coef = ck.require(&format!("svm/{}/coef", l.as_str()))?;
                let [n, d] = s.shape() else {
                    return Err(Failure::data(format!("svm/{} support is not a matrix", l.as_str())));
                };
                if coef.shape() != [*n] {
                    return Err(Failure::data(format!("svm/{} has {} coefficients for {n} vectors", l.as_str(), coef.len())));
                }
                (s.data().chunks(*d).map(<[f64]>::to_vec).collect(), coef.data().to_vec())
            }
            None => (Vec::new(), Vec::new()),
        };
        machines.push(Some(BinarySvm {
            support,
            coef,
            bias,
            gamma,
        }));
    }
    Ok(OvrSvmModel { machines, gamma, c })
}

fn model_to_checkpoint(ck: &mut Checkpoint, model: &Model) {
    for (name, t) in model.store.names().iter().zip(model.store.values()) {
        ck.push(format!("param/{name}"), t.clone());
    }
    for (name, t) in model.store.buffer_names().iter().zip(model.store.buffers()) {
        ck.push(format!("buffer/{name}"), t.clone());
    }
}

fn load_tensors(ck: &Checkpoint, prefix: &str, names: &[String], dst: &mut [Tensor]) -> Result<()> {
    for (name, slot) in names.iter().zip(dst) {
        let t = ck.require(&format!("{prefix}/{name}"))?;
        if t.shape() != slot.shape() {
            return Err(Failure::data(format!(
                "{prefix}/{name}: checkpoint shape {:?}, model expects {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t.clone();
    }
    Ok(())
}

fn model_from_checkpoint(ck: &Checkpoint, cfg: &ResolvedConfig, dim: usize) -> Result<Model> {
    let mut model = cfg.build_model(dim)?;
    let names = model.store.names().to_vec();
    load_tensors(ck, "param", &names, model.store.values_mut())?;
    let names = model.store.buffer_names().to_vec();
    load_tensors(ck, "buffer", &names, model.store.buffers_mut())?;
    Ok(model)
}

// ---------------------------------------------------------------- train

#[derive(Serialize)]
struct SvmFitFile {
    gamma: f64,
    c: f64,
    smote: bool,
    before: Vec<usize>,
    after: Vec<usize>,
    synthetic_rows: usize,
    converged: Vec<bool>,
    kkt_violations: Vec<usize>,
    train_acc: f64,
    val_acc: f64,
}

#[derive(Debug)]
pub enum TrainOutcome {
    Neural(History),
    Svm { train_acc: f64, val_acc: f64, report: SvmFitReport },
}

impl TrainOutcome {
    pub fn val_acc(&self) -> f64 {
        match self {
            TrainOutcome::Neural(h) => h.best().val_acc,
            TrainOutcome::Svm { val_acc, .. } => *val_acc,
        }
    }
}

fn acc(preds: &[usize], samples: &[NormalizedSample]) -> f64 {
    let hits = preds.iter().zip(samples).filter(|(p, s)| **p == s.label.code()).count();
    hits as f64 / samples.len().max(1) as f64
}

/// Frame-sampling seed used when the SVM reads a split. The training split
/// reuses the fit seed, so it sees exactly the rows the machines were fit on.
pub fn svm_eval_seed(run_seed: u64, split: SplitName) -> u64 {
    match split {
        SplitName::Train => run_seed,
        SplitName::Val => run_seed.wrapping_add(1),
        SplitName::Test => run_seed.wrapping_add(2),
    }
}

pub fn train_run(cfg: &ResolvedConfig) -> Result<TrainOutcome> {
    let p = prepare(cfg)?;
    let train = p.samples(SplitName::Train)?;
    let val = p.samples(SplitName::Val)?;
    let (ck, outcome, side_file) = match cfg.svm() {
        None => {
            let mut model = cfg.build_model(p.ds.dim)?;
            let history = fit(&mut model, &train, &val, cfg.train.as_ref().expect("neural config has [train]"))?;
            let mut ck = base_checkpoint(Kind::Neural, cfg, p.ds.dim);
            model_to_checkpoint(&mut ck, &model);
            push_normalizer(&mut ck, &p.norm);
            let text = history.to_toml();
            (ck, TrainOutcome::Neural(history), (HISTORY_FILE, text))
        }
        Some(svm) => {
            let (model, report) = fit_svm(&train, cfg.n_views(), svm, cfg.seed)?;
            let n = cfg.n_views();
            let train_acc = acc(&predict_svm(&model, &train, n, svm.frames, svm_eval_seed(cfg.seed, SplitName::Train))?, &train);
            let val_acc = acc(&predict_svm(&model, &val, n, svm.frames, svm_eval_seed(cfg.seed, SplitName::Val))?, &val);
            log::info!("svm: gamma {:.3e} train {train_acc:.4} val {val_acc:.4}", report.gamma);
            let mut ck = base_checkpoint(Kind::Svm, cfg, p.ds.dim);
            svm_to_checkpoint(&mut ck, &model);
            push_normalizer(&mut ck, &p.norm);
            let before: [usize; NUM_CLASSES] = p.ds.subset(&p.split.train).class_counts();
            let file = SvmFitFile {
                gamma: report.gamma,
                c: model.c,
                smote: report.resample.is_some(),
                before: before.to_vec(),
                after: report.resample.as_ref().map_or(before, |r| r.after).to_vec(),
                synthetic_rows: report.resample.as_ref().map_or(0, |r| r.synthetic.len()),
                converged: report.converged.clone(),
                kkt_violations: report.kkt_violations.clone(),
                train_acc,
                val_acc,
            };
            let text = toml::to_string(&file).expect("svm fit summary serializes");
            (ck, TrainOutcome::Svm { train_acc, val_acc, report }, (SVM_FIT_FILE, text))
        }
    };
    create_dir(&cfg.output)?;
    write_file(&cfg.output.join(RESOLVED_FILE), cfg.to_toml())?;
    write_file(&cfg.output.join(side_file.0), side_file.1)?;
    let path = cfg.output.join(CHECKPOINT_FILE);
    ck.write(&path).map_err(|e| write_failed(&path, e))?;
    Ok(outcome)
}

// ---------------------------------------------------------------- eval

#[derive(Debug)]
pub struct EvalOutcome {
    pub method: Method,
    pub task: Task,
    pub split: SplitName,
    pub report: EvalReport,
    /// Test-split share of the training set's most frequent class.
    pub majority: f64,
    pub report_path: PathBuf,
}

pub fn split_str(s: SplitName) -> &'static str {
    match s {
        SplitName::Train => "train",
        SplitName::Val => "val",
        SplitName::Test => "test",
    }
}

pub fn eval_run(model_dir: &Path, dataset: Option<&Path>, split: SplitName, out: Option<&Path>) -> Result<EvalOutcome> {
    let ck = Checkpoint::read(&model_dir.join(CHECKPOINT_FILE))?;
    let mut cfg = ResolvedConfig::from_toml(&ck.config)
        .map_err(|e| Failure::data(format!("checkpoint carries an unusable config: {e}")))?;
    if ck.method != cfg.method.as_str() {
        return Err(Failure::data(format!("checkpoint method {} disagrees with its config", ck.method)));
    }
    if let Some(d) = dataset {
        cfg.dataset = d.to_path_buf();
    }
    let dim = ck.meta_f64("dim")? as usize;
    let ds = load_dataset(&cfg.dataset)?;
    if ds.dim != dim {
        return Err(Failure::data(format!("model expects dim {dim}, dataset {} has dim {}", cfg.dataset.display(), ds.dim)));
    }
    check_views(&ds, &cfg)?;
    let parts = split_dataset(&ds, cfg.split.ratios, cfg.split.seed, cfg.split.stratified)?;
    let idx = parts.part(split);
    if idx.is_empty() {
        return Err(Failure::data(format!("split {} is empty", split_str(split))));
    }
    let norm = read_normalizer(&ck, cfg.n_views(), dim)?;
    let samples = norm.apply_all(&ds.subset(idx))?;
    let preds = match (ck.kind, cfg.svm()) {
        (Kind::Neural, None) => {
            let model = model_from_checkpoint(&ck, &cfg, dim)?;
            predict_samples(&model, &samples)?
        }
        (Kind::Svm, Some(svm)) => {
            let model = svm_from_checkpoint(&ck)?;
            predict_svm(&model, &samples, cfg.n_views(), svm.frames, svm_eval_seed(cfg.seed, split))?
        }
        _ => return Err(Failure::data("checkpoint kind does not match its method")),
    };
    let targets: Vec<ManeuverLabel> = samples.iter().map(|s| s.label).collect();
    let report = EvalReport::compute(&labels(&preds), &targets).map_err(Failure::data)?;

    let train_counts = ds.subset(&parts.train).class_counts();
    let majority_class = (0..NUM_CLASSES).max_by_key(|&c| (train_counts[c], std::cmp::Reverse(c))).unwrap_or(0);
    let majority = targets.iter().filter(|l| l.code() == majority_class).count() as f64 / targets.len() as f64;

    let out = out.unwrap_or(model_dir);
    create_dir(out)?;
    let name = split_str(split);
    let report_path = out.join(format!("eval-{name}.toml"));
    let header = format!(
        "method = \"{}\"\ntask = \"{}\"\nsplit = \"{name}\"\nsamples = {}\n",
        cfg.method.as_str(),
        cfg.task.as_str(),
        targets.len()
    );
    write_file(&report_path, format!("{header}{}", report.to_text()))?;
    let row = report.leaderboard_row(cfg.method.as_str(), cfg.task.as_str());
    write_file(&out.join(format!("leaderboard-{name}.csv")), format!("{LEADERBOARD_HEADER}\n{row}\n"))?;
    Ok(EvalOutcome {
        method: cfg.method,
        task: cfg.task,
        split,
        report,
        majority,
        report_path,
    })
}

// ---------------------------------------------------------------- bench

#[derive(Debug)]
pub struct CellResult {
    pub method: Method,
    pub task: Task,
    pub seconds: f64,
    pub outcome: std::result::Result<(TrainOutcome, EvalOutcome), String>,
}

#[derive(Debug)]
pub struct BenchSummary {
    pub cells: Vec<CellResult>,
    pub majority: Option<f64>,
    pub wall_seconds: f64,
}

/// Rough relative cost, used to start the slowest cells first.
fn cell_cost(m: Method, t: Task) -> u32 {
    let base = match m {
        Method::CnnLstm => 8,
        Method::Mamba2 => 6,
        Method::Baseline => 2,
        Method::Svm => 1,
    };
    match (m, t) {
        (Method::Mamba2, Task::Multi) => base * 3,
        (_, Task::Multi) => base * 2,
        _ => base,
    }
}

pub fn cell_dir(out: &Path, m: Method, t: Task) -> PathBuf {
    out.join(format!("{}-{}", m.as_str(), t.as_str()))
}

pub fn bench(dataset: &Path, out: &Path, seed: u64, jobs: usize) -> Result<BenchSummary> {
    let ds = load_dataset(dataset)?;
    create_dir(out)?;
    let mut cells: Vec<(Method, Task)> = Task::ALL
        .iter()
        .flat_map(|&t| Method::ALL.iter().map(move |&m| (m, t)))
        .filter(|&(_, t)| {
            let ok = t.n_views() <= ds.views.len();
            if !ok {
                log::warn!("skipping task {}: dataset has a single view", t.as_str());
            }
            ok
        })
        .collect();
    drop(ds);
    let mut queue = cells.clone();
    queue.sort_by_key(|&(m, t)| std::cmp::Reverse(cell_cost(m, t)));

    let started = Instant::now();
    let next = AtomicUsize::new(0);
    let results = Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..jobs.max(1).min(queue.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(m, t)) = queue.get(i) else { break };
                log::info!("bench: starting {}-{}", m.as_str(), t.as_str());
                let t0 = Instant::now();
                let dir = cell_dir(out, m, t);
                let cfg = ResolvedConfig::defaults(m, t, dataset, &dir, seed);
                let outcome = train_run(&cfg)
                    .and_then(|tr| Ok((tr, eval_run(&dir, None, SplitName::Test, None)?)))
                    .map_err(|e| e.to_string());
                let seconds = t0.elapsed().as_secs_f64();
                match &outcome {
                    Ok((_, ev)) => log::info!(
                        "bench: {}-{} done in {seconds:.0}s, test acc {:.2}",
                        m.as_str(),
                        t.as_str(),
                        100.0 * ev.report.accuracy
                    ),
                    Err(e) => log::error!("bench: {}-{} failed: {e}", m.as_str(), t.as_str()),
                }
                results.lock().expect("bench results").push(CellResult {
                    method: m,
                    task: t,
                    seconds,
                    outcome,
                });
            });
        }
    });
    let mut results = results.into_inner().expect("bench results");
    // report in table order, not completion order
    cells.retain(|c| results.iter().any(|r| (r.method, r.task) == *c));
    results.sort_by_key(|r| cells.iter().position(|c| *c == (r.method, r.task)));
    let majority = results.iter().find_map(|r| r.outcome.as_ref().ok().map(|(_, e)| e.majority));
    let summary = BenchSummary {
        cells: results,
        majority,
        wall_seconds: started.elapsed().as_secs_f64(),
    };

    let mut csv = format!("{LEADERBOARD_HEADER}\n");
    for c in &summary.cells {
        if let Ok((_, ev)) = &c.outcome {
            csv.push_str(&ev.report.leaderboard_row(c.method.as_str(), c.task.as_str()));
            csv.push('\n');
        }
    }
    write_file(&out.join("leaderboard.csv"), csv)?;
    write_file(&out.join("summary.md"), summary.to_markdown(dataset, seed))?;

    if let Some(c) = summary.cells.iter().find(|c| c.outcome.is_err()) {
        let e = c.outcome.as_ref().err().expect("failed cell");
        return Err(Failure::data(format!("bench cell {}-{} failed: {e}", c.method.as_str(), c.task.as_str())));
    }
    Ok(summary)
}

impl BenchSummary {
    pub fn cell(&self, m: Method, t: Task) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.method == m && c.task == t)
    }

    pub fn to_markdown(&self, dataset: &Path, seed: u64) -> String {
        let pct = |v: f64| format!("{:.2}", 100.0 * v);
        let score = |m: Method, t: Task| match self.cell(m, t).map(|c| &c.outcome) {
            Some(Ok((_, ev))) => (pct(ev.report.accuracy), pct(ev.report.f1)),
            Some(Err(_)) => ("failed".into(), "failed".into()),
            None => ("-".into(), "-".into()),
        };
        let mut s = String::new();
        let _ = writeln!(s, "# Benchmark\n");
        let _ = writeln!(s, "Dataset `{}`, seed {seed}, test split.\n", dataset.display());
        s.push_str("| Method | Single Acc. | Single F1 | Multi Acc. | Multi F1 |\n");
        s.push_str("|---|---|---|---|---|\n");
        for m in Method::ALL {
            let (sa, sf) = score(m, Task::Single);
            let (ma, mf) = score(m, Task::Multi);
            let _ = writeln!(s, "| {} | {sa} | {sf} | {ma} | {mf} |", m.as_str());
        }
        if let Some(maj) = self.majority {
            let _ = writeln!(s, "\nMajority-class reference accuracy: {}", pct(maj));
        }
        for t in Task::ALL {
            if !self.cells.iter().any(|c| c.task == t && c.outcome.is_ok()) {
                continue;
            }
            let _ = writeln!(s, "\n## Per-class accuracy, {} view\n", t.as_str());
            let names: Vec<&str> = ManeuverLabel::ALL.iter().map(|l| l.as_str()).collect();
            let _ = writeln!(s, "| Method | {} |", names.join(" | "));
            let _ = writeln!(s, "|---|{}", "---|".repeat(NUM_CLASSES));
            for c in self.cells.iter().filter(|c| c.task == t) {
                let Ok((_, ev)) = &c.outcome else { continue };
                let cells: Vec<String> = ev
                    .report
                    .per_class
                    .iter()
                    .map(|pc| pc.acc.map_or("-".into(), pct))
                    .collect();
                let _ = writeln!(s, "| {} | {} |", c.method.as_str(), cells.join(" | "));
            }
        }
        s.push_str("\n## Timing\n\n| Cell | Seconds | Val Acc. |\n|---|---|---|\n");
        for c in &self.cells {
            let val = c.outcome.as_ref().map_or("-".into(), |(tr, _)| pct(tr.val_acc()));
            let _ = writeln!(s, "| {}-{} | {:.1} | {val} |", c.method.as_str(), c.task.as_str(), c.seconds);
        }
        let _ = writeln!(s, "\nWall clock: {:.1} s", self.wall_seconds);
        s
    }
}
