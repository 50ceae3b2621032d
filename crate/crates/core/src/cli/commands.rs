use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::analysis::{accuracy, analyze_run, StageReport};
use crate::cil::{train_stage, Algorithm, Dataset, IncrementalSplit, Part, StageContext, StageModelSet, SyntheticSpec};
use crate::error::{Error, Result};
use crate::nn::{Checkpoint, Head, Network};

pub const DATASET_FILE: &str = "dataset.bin";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const ANALYSIS_DIR: &str = "analysis";
const RUN_FORMAT: &str = "cilab-run 1";

/// Progress messages go to stderr unless quiet.
#[derive(Debug, Clone, Copy, Default)]
pub struct Verbosity {
    pub quiet: bool,
}

impl Verbosity {
    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Header stored alongside the dataset samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DatasetManifest {
    config_hash: String,
    dataset: SyntheticSpec,
    split: IncrementalSplit,
}

/// Writes `dir/dataset.bin` for `cfg` and returns its path.
pub fn gen_data(cfg: &ExperimentConfig, dir: &Path, v: Verbosity) -> Result<PathBuf> {
    let (data, split) = cfg.build_clean()?;
    create_dir(dir)?;
    let manifest = DatasetManifest {
        config_hash: cfg.hash(),
        dataset: cfg.dataset.clone(),
        split,
    };
    let path = dir.join(DATASET_FILE);
    let json = serde_json::to_value(&manifest).expect("manifest serializes");
    write_file(&path, &data.to_bytes(&json))?;
    v.say(format!(
        "wrote {} ({} rows × {} dims, {} classes)",
        path.display(),
        data.len(),
        data.dim(),
        data.num_classes()
    ));
    Ok(path)
}

/// Loads `dir/dataset.bin` and checks it was generated from the same data
/// and split settings as `cfg`.
fn load_dataset(cfg: &ExperimentConfig, dir: &Path) -> Result<(Dataset, IncrementalSplit)> {
    let (data, json) = Dataset::from_bytes(&read_file(&dir.join(DATASET_FILE))?)?;
    let manifest: DatasetManifest =
        serde_json::from_value(json).map_err(|e| Error::Format(format!("dataset manifest: {e}")))?;
    if manifest.dataset != cfg.dataset || manifest.split != cfg.build_split()? {
        return Err(Error::Config(format!(
            "{} was generated from different dataset or split settings",
            dir.join(DATASET_FILE).display()
        )));
    }
    Ok((data, manifest.split))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub file: String,
    pub digest: String,
}

/// `manifest.json` of a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub config_hash: String,
    pub algorithm: Algorithm,
    pub seed: u64,
    pub split_seed: u64,
    pub stages: usize,
    /// Digest of each stage's full network.
    pub stage_digests: Vec<String>,
    /// Checkpoint files in the directory.
    pub checkpoints: Vec<CheckpointRecord>,
}

fn lineage(cfg: &ExperimentConfig, stage: Option<usize>) -> Vec<(String, u64)> {
    let mut l = vec![
        ("data-seed".to_string(), cfg.dataset.seed),
        ("split-seed".to_string(), cfg.split.seed),
        ("train-seed".to_string(), cfg.schedule.seed),
    ];
    if let Some(s) = stage {
        l.push(("stage".to_string(), s as u64));
    }
    l
}

/// Trains every stage into `dir`. The directory must not hold a previous
/// run; the dataset is generated there when absent.
pub fn run(cfg: &ExperimentConfig, dir: &Path, v: Verbosity) -> Result<RunManifest> {
    cfg.validate()?;
    if dir.join(MANIFEST_FILE).exists() {
        return Err(Error::Protocol(format!("{} already holds a run", dir.display())));
    }
    if !dir.join(DATASET_FILE).exists() {
        gen_data(cfg, dir, v)?;
    }
    let (clean, split) = load_dataset(cfg, dir)?;
    let data = cfg.apply_perturbation(&clean, &split)?;
    let hyper = cfg.hyper();
    let ctx = StageContext {
        data: &data,
        split: &split,
        hyper: &hyper,
        seed: cfg.schedule.seed,
    };
    let alg = cfg.algorithm.name;
    let mut set = StageModelSet::new(alg, hyper.exemplars_per_class);
    for stage in 0..split.num_stages() {
        train_stage(&mut set, &ctx, stage)?;
        v.say(format!("{alg}: stage {stage} trained"));
    }

    let hash = cfg.hash();
    let meta = |stage: Option<usize>| serde_json::json!({ "config_hash": hash, "algorithm": alg, "stage": stage });
    let mut files: Vec<(String, Checkpoint)> = Vec::new();
    if alg == Algorithm::Exploit {
        let f0 = &set.snapshot(0)?.network.branches()[0];
        files.push((
            "extractor.ckpt".into(),
            Checkpoint::from_extractor(f0, &lineage(cfg, Some(0)), meta(Some(0))),
        ));
        for (i, head) in set.stage_heads().iter().enumerate() {
            files.push((
                format!("head_{i}.ckpt"),
                Checkpoint::from_head(head, &lineage(cfg, Some(i)), meta(Some(i))),
            ));
        }
    } else {
        for s in set.snapshots() {
            files.push((
                format!("stage_{}.ckpt", s.stage),
                Checkpoint::from_network(&s.network, &lineage(cfg, Some(s.stage)), meta(Some(s.stage))),
            ));
        }
    }
    let mut checkpoints = Vec::new();
    for (name, ckpt) in files {
        let bytes = ckpt.to_bytes();
        write_file(&dir.join(&name), &bytes)?;
        checkpoints.push(CheckpointRecord {
            file: name,
            digest: super::sha256_hex(&bytes),
        });
    }
    let manifest = RunManifest {
        format: RUN_FORMAT.into(),
        config_hash: hash,
        algorithm: alg,
        seed: cfg.schedule.seed,
        split_seed: cfg.split.seed,
        stages: set.num_stages(),
        stage_digests: set.snapshots().iter().map(|s| s.digest.clone()).collect(),
        checkpoints,
    };
    write_file(&dir.join(CONFIG_FILE), cfg.to_toml().as_bytes())?;
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&dir.join(MANIFEST_FILE), json.as_bytes())?;
    v.say(format!("run written to {}", dir.display()));
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Integrity(format!("{} is missing", path.display())),
        _ => Error::io(&path, e),
    })?;
    let m: RunManifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if m.format != RUN_FORMAT {
        return Err(Error::Format(format!("unknown run format {:?}", m.format)));
    }
    Ok(m)
}

fn read_checkpoint(dir: &Path, rec: &CheckpointRecord) -> Result<Checkpoint> {
    let path = dir.join(&rec.file);
    let bytes = fs::read(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Integrity(format!("checkpoint {} is missing", path.display())),
        _ => Error::io(&path, e),
    })?;
    if super::sha256_hex(&bytes) != rec.digest {
        return Err(Error::Integrity(format!("checkpoint {} was modified", path.display())));
    }
    Checkpoint::from_bytes(&bytes)
}

/// Rebuilds the stage models of a finished run and checks them against the
/// manifest digests.
pub fn load_run(dir: &Path, m: &RunManifest) -> Result<StageModelSet> {
    let ckpts = m
        .checkpoints
        .iter()
        .map(|r| read_checkpoint(dir, r))
        .collect::<Result<Vec<_>>>()?;
    let set = if m.algorithm == Algorithm::Exploit {
        let (ext, heads) = ckpts
            .split_first()
            .ok_or_else(|| Error::Integrity("exploit run without checkpoints".into()))?;
        let f0 = ext.to_extractor()?;
        let heads = heads.iter().map(Checkpoint::to_head).collect::<Result<Vec<_>>>()?;
        let mut nets = Vec::with_capacity(heads.len());
        for i in 0..heads.len() {
            let mut e = f0.clone();
            e.set_frozen(i > 0);
            nets.push(Network::new(e, Head::concat(&heads[..=i])?)?);
        }
        StageModelSet::from_networks(m.algorithm, nets, heads)
    } else {
        let nets = ckpts.iter().map(Checkpoint::to_network).collect::<Result<Vec<_>>>()?;
        StageModelSet::from_networks(m.algorithm, nets, Vec::new())
    };
    let digests: Vec<&String> = set.snapshots().iter().map(|s| &s.digest).collect();
    if set.num_stages() != m.stages || digests != m.stage_digests.iter().collect::<Vec<_>>() {
        return Err(Error::Integrity(format!(
            "stage models in {} do not match the manifest",
            dir.display()
        )));
    }
    Ok(set)
}

/// `analysis/summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_hash: String,
    pub algorithm: Algorithm,
    pub branch_stage: usize,
    pub seed: u64,
    pub split_seed: u64,
    pub perturbed: bool,
    pub reports: Vec<StageReport>,
    /// `Acc(M′₀, D)`.
    pub acc_first: f64,
    /// `Acc(M′_N, D)`.
    pub acc_last: f64,
    /// `ΔM′_N`.
    pub delta_last: f64,
    pub avg_inc_acc: f64,
    /// `Acc(M_N, D)` with the run's own final head.
    pub final_acc: f64,
    pub feature_shift_distance: f64,
    pub tsne_initial_kl: f64,
    pub tsne_final_kl: f64,
}

/// Resolves the config for `dir`: the given one must hash like the run's,
/// otherwise the run's own echo is used.
pub fn run_config(dir: &Path, cfg: Option<&ExperimentConfig>) -> Result<(ExperimentConfig, RunManifest)> {
    let m = read_manifest(dir)?;
    let cfg = match cfg {
        Some(c) => c.clone(),
        None => {
            let path = dir.join(CONFIG_FILE);
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            ExperimentConfig::from_toml(&text)?
        }
    };
    if cfg.hash() != m.config_hash {
        return Err(Error::Config(format!(
            "config hash {} does not match run {} ({})",
            cfg.hash(),
            dir.display(),
            m.config_hash
        )));
    }
    Ok((cfg, m))
}

/// Evaluates a finished run and writes the CSV and JSON reports under
/// `dir/analysis`. Training outputs are only read.
pub fn analyze(dir: &Path, cfg: Option<&ExperimentConfig>, v: Verbosity) -> Result<Summary> {
    let (cfg, m) = run_config(dir, cfg)?;
    let set = load_run(dir, &m)?;
    let (clean, split) = load_dataset(&cfg, dir)?;
    let data = cfg.apply_perturbation(&clean, &split)?;
    v.say(format!("analyzing {} stages of {}", set.num_stages(), dir.display()));
    let result = analyze_run(&set, &data, &split, &cfg.analysis)?;
    let last = result.reports.last().expect("at least one stage");
    let full = data.indices(split.class_order(), Part::Val);
    let final_acc = accuracy(&set.latest().expect("at least one stage").network, &data, &split, &full)?;
    let hash = m.config_hash.clone();
    let summary = Summary {
        config_hash: hash.clone(),
        algorithm: m.algorithm,
        branch_stage: cfg.algorithm.branch_stage,
        seed: m.seed,
        split_seed: m.split_seed,
        perturbed: !cfg.analysis.perturbation.is_empty(),
        acc_first: result.reports[0].acc_full,
        acc_last: last.acc_full,
        delta_last: last.delta,
        avg_inc_acc: last.avg_inc_acc.unwrap_or(f64::NAN),
        final_acc,
        feature_shift_distance: result.shift.mean_paired_distance(),
        tsne_initial_kl: result.tsne.initial_kl,
        tsne_final_kl: result.tsne.final_kl,
        reports: result.reports.clone(),
    };

    let out = dir.join(ANALYSIS_DIR);
    create_dir(&out)?;
    write_file(&out.join("stage_report.csv"), stage_report_csv(&hash, &result.reports).as_bytes())?;
    write_file(&out.join("cka.csv"), cka_csv(&hash, &result.reports).as_bytes())?;
    let mut tsne = format!("# config_hash={hash}\nx,y,class,source\n");
    for i in 0..result.tsne.embedding.rows() {
        let e = result.tsne.embedding.row(i);
        let _ = writeln!(tsne, "{},{},{},{}", e[0], e[1], result.shift.labels[i], result.shift.sources[i]);
    }
    write_file(&out.join("tsne.csv"), tsne.as_bytes())?;
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_file(&out.join("summary.json"), json.as_bytes())?;
    v.say(format!("reports written to {}", out.display()));
    Ok(summary)
}

fn stage_report_csv(hash: &str, reports: &[StageReport]) -> String {
    let n = reports.first().map_or(0, |r| r.acc_subset.len());
    let mut s = format!("# config_hash={hash}\nstage,acc_full,");
    for i in 0..n {
        let _ = write!(s, "acc_subset_{i},");
    }
    s.push_str("delta,avg_inc_acc,macs\n");
    for r in reports {
        let _ = write!(s, "{},{},", r.stage, r.acc_full);
        for a in &r.acc_subset {
            let _ = write!(s, "{a},");
        }
        let avg = r.avg_inc_acc.map(|a| a.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{}", r.delta, avg, r.macs);
    }
    s
}

fn cka_csv(hash: &str, reports: &[StageReport]) -> String {
    let mut s = format!("# config_hash={hash}\nstage,tap_id,cka\n");
    for r in reports {
        for (tap, v) in &r.cka_curve {
            let _ = writeln!(s, "{},{},{}", r.stage, tap, v);
        }
    }
    s
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub method: String,
    pub run: String,
    pub acc_first: f64,
    pub acc_last: f64,
    pub delta_last: f64,
    pub avg_inc_acc: f64,
    pub final_acc: f64,
}

/// Comparison of analyzed runs, with a warning when their class orders
/// come from different split seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub rows: Vec<CompareRow>,
    pub warning: Option<String>,
}

pub fn compare(dirs: &[PathBuf]) -> Result<Comparison> {
    if dirs.is_empty() {
        return Err(Error::Config("compare needs at least one run directory".into()));
    }
    let mut rows = Vec::new();
    let mut seeds = Vec::new();
    for d in dirs {
        let path = d.join(ANALYSIS_DIR).join("summary.json");
        let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => {
                Error::Protocol(format!("{} has not been analyzed", d.display()))
            }
            _ => Error::io(&path, e),
        })?;
        let s: Summary =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let method = match s.algorithm {
            Algorithm::Pder => format!("pder@{}", s.branch_stage),
            a => a.to_string(),
        };
        seeds.push(s.split_seed);
        rows.push(CompareRow {
            method,
            run: d.display().to_string(),
            acc_first: s.acc_first,
            acc_last: s.acc_last,
            delta_last: s.delta_last,
            avg_inc_acc: s.avg_inc_acc,
            final_acc: s.final_acc,
        });
    }
    seeds.sort_unstable();
    seeds.dedup();
    let warning = (seeds.len() > 1).then(|| {
        format!(
            "WARNING: runs use different split seeds {seeds:?}; class orders differ, so rows are not directly comparable"
        )
    });
    Ok(Comparison { rows, warning })
}

impl Comparison {
    pub fn render(&self) -> String {
        let mut s = String::new();
        if let Some(w) = &self.warning {
            let _ = writeln!(s, "{w}");
        }
        let _ = writeln!(
            s,
            "{:<12} {:>11} {:>11} {:>8} {:>13} {:>10}  run",
            "method", "Acc(M'0,D)", "Acc(M'N,D)", "dM'N", "Avg.Inc.Acc.", "Acc(MN,D)"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<12} {:>11.1} {:>11.1} {:>+8.1} {:>13.1} {:>10.1}  {}",
                r.method, r.acc_first, r.acc_last, r.delta_last, r.avg_inc_acc, r.final_acc, r.run
            );
        }
        s
    }
}
