//! Resolved job descriptions (what a manifest records) and their execution.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tgd_core::kse::{drop_kernels, kse_scores, KseConfig, KseReport};
use tgd_core::masking::MaskSet;
use tgd_core::metrics::{ensemble_bias, ensemble_cov, mse, psnr};
use tgd_core::model::denoise_volume;
use tgd_core::phantom::{
    build_dataset, generate_study, noiseless_study, Disk, PhantomSpec, ScanProtocol, COUNT_LEVELS,
};
use tgd_core::store::{load_dataset, load_study, save_dataset, save_study, RoiSet};
use tgd_core::train::{
    finetune_tgd, online_n2n, pair_samples, train_scratch, TrainConfig, TrainMode, TrainOutcome,
};
use tgd_core::weights::{load_weights, load_weights_expect, network_hash, save_weights};
use tgd_core::{Network, NetworkConfig, Tensor};

use crate::error::{CliError, CliResult, Context};

pub const DEFAULT_SWEEP: [f64; 4] = [0.3, 0.4, 0.5, 0.6];

fn default_levels() -> Vec<f64> {
    COUNT_LEVELS.to_vec()
}

fn default_sweep() -> Vec<f64> {
    DEFAULT_SWEEP.to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub phantoms: usize,
    pub val_phantoms: usize,
    /// Phantom `i` uses `PhantomSpec::random(.., phantom_seed + i)`.
    pub phantom_seed: u64,
    pub height: usize,
    pub width: usize,
    pub slices: usize,
    #[serde(default = "default_levels")]
    pub count_levels: Vec<f64>,
    pub protocol: ScanProtocol,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySection {
    pub phantom_seed: u64,
    pub height: usize,
    pub width: usize,
    pub slices: usize,
    pub realizations: usize,
    #[serde(default)]
    pub noiseless: bool,
    /// Bright structure that no training phantom contains.
    #[serde(default)]
    pub ood_disk: Option<Disk>,
    pub protocol: ScanProtocol,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataJob {
    #[serde(default)]
    pub dataset: Option<DatasetSection>,
    #[serde(default)]
    pub study: Option<StudySection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainJob {
    pub data: PathBuf,
    pub network: NetworkConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneJob {
    pub data: PathBuf,
    pub weights: PathBuf,
    /// Architecture the weights must match.
    #[serde(default)]
    pub network: Option<NetworkConfig>,
    /// Masks of an earlier TGD round (for generation counting).
    #[serde(default)]
    pub previous_masks: Option<PathBuf>,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct N2nJob {
    pub study: PathBuf,
    pub weights: PathBuf,
    #[serde(default)]
    pub network: Option<NetworkConfig>,
    #[serde(default)]
    pub previous_masks: Option<PathBuf>,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KseJob {
    pub weights: PathBuf,
    #[serde(default)]
    pub kse: KseConfig,
    #[serde(default = "default_sweep")]
    pub phis: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneJob {
    pub weights: PathBuf,
    /// Dataset directory; the validation split is evaluated (the training
    /// split when there is no validation split).
    pub data: PathBuf,
    #[serde(default)]
    pub kse: KseConfig,
    #[serde(default = "default_sweep")]
    pub phis: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateJob {
    pub weights: PathBuf,
    pub study: PathBuf,
    pub rois: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Job {
    GenData(GenDataJob),
    Train(TrainJob),
    TgdFinetune(FinetuneJob),
    N2n(N2nJob),
    KseReport(KseJob),
    PruneEval(PruneJob),
    Evaluate(EvaluateJob),
}

impl Job {
    pub fn name(&self) -> &'static str {
        match self {
            Job::GenData(_) => "gen-data",
            Job::Train(_) => "train",
            Job::TgdFinetune(_) => "tgd-finetune",
            Job::N2n(_) => "n2n",
            Job::KseReport(_) => "kse-report",
            Job::PruneEval(_) => "prune-eval",
            Job::Evaluate(_) => "evaluate",
        }
    }

    pub fn inputs(&self) -> Vec<&Path> {
        let mut v: Vec<&Path> = Vec::new();
        match self {
            Job::GenData(_) => {}
            Job::Train(j) => v.push(&j.data),
            Job::TgdFinetune(j) => {
                v.extend([j.data.as_path(), j.weights.as_path()]);
                v.extend(j.previous_masks.as_deref());
            }
            Job::N2n(j) => {
                v.extend([j.study.as_path(), j.weights.as_path()]);
                v.extend(j.previous_masks.as_deref());
            }
            Job::KseReport(j) => v.push(&j.weights),
            Job::PruneEval(j) => v.extend([j.weights.as_path(), j.data.as_path()]),
            Job::Evaluate(j) => v.extend([j.weights.as_path(), j.study.as_path(), j.rois.as_path()]),
        }
        v
    }

    pub fn seeds(&self) -> BTreeMap<String, u64> {
        let mut m = BTreeMap::new();
        match self {
            Job::GenData(g) => {
                if let Some(d) = &g.dataset {
                    m.insert("dataset.phantom_seed".into(), d.phantom_seed);
                    m.insert("dataset.protocol.seed".into(), d.protocol.seed);
                }
                if let Some(s) = &g.study {
                    m.insert("study.phantom_seed".into(), s.phantom_seed);
                    m.insert("study.protocol.seed".into(), s.protocol.seed);
                }
            }
            Job::Train(j) => {
                m.insert("train.seed".into(), j.train.seed);
            }
            Job::TgdFinetune(j) => {
                m.insert("train.seed".into(), j.train.seed);
            }
            Job::N2n(j) => {
                m.insert("train.seed".into(), j.train.seed);
            }
            _ => {}
        }
        m
    }

    /// Resolves relative paths against `base` (the config file's folder).
    pub fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match self {
            Job::GenData(_) => {}
            Job::Train(j) => fix(&mut j.data),
            Job::TgdFinetune(j) => {
                fix(&mut j.data);
                fix(&mut j.weights);
                j.previous_masks.as_mut().map(fix);
            }
            Job::N2n(j) => {
                fix(&mut j.study);
                fix(&mut j.weights);
                j.previous_masks.as_mut().map(fix);
            }
            Job::KseReport(j) => fix(&mut j.weights),
            Job::PruneEval(j) => {
                fix(&mut j.weights);
                fix(&mut j.data);
            }
            Job::Evaluate(j) => {
                fix(&mut j.weights);
                fix(&mut j.study);
                fix(&mut j.rois);
            }
        }
    }

    pub fn train_config_mut(&mut self) -> Option<&mut TrainConfig> {
        match self {
            Job::Train(j) => Some(&mut j.train),
            Job::TgdFinetune(j) => Some(&mut j.train),
            Job::N2n(j) => Some(&mut j.train),
            _ => None,
        }
    }

    /// Cross-field checks that the schema alone cannot express.
    pub fn validate(&self) -> CliResult<()> {
        let want_mode = |t: &TrainConfig, mode: TrainMode| {
            if t.mode != mode {
                return Err(CliError::config(format!(
                    "train.mode is {:?} but {} needs {:?}",
                    t.mode,
                    self.name(),
                    mode
                )));
            }
            t.validate().map_err(CliError::from)
        };
        match self {
            Job::GenData(g) if g.dataset.is_none() && g.study.is_none() => {
                Err(CliError::config("gen-data needs a [dataset] or a [study] section"))
            }
            Job::GenData(_) => Ok(()),
            Job::Train(j) => {
                j.network.validate()?;
                want_mode(&j.train, TrainMode::Scratch)
            }
            Job::TgdFinetune(j) => want_mode(&j.train, TrainMode::TgdFinetune),
            Job::N2n(j) => want_mode(&j.train, TrainMode::N2nOnline),
            Job::KseReport(j) => {
                j.kse.validate()?;
                check_phis(&j.phis)
            }
            Job::PruneEval(j) => {
                j.kse.validate()?;
                check_phis(&j.phis)
            }
            Job::Evaluate(j) if !j.rois.is_file() => {
                Err(CliError::config(format!("ROI file {} not found", j.rois.display())))
            }
            Job::Evaluate(_) => Ok(()),
        }
    }
}

fn check_phis(phis: &[f64]) -> CliResult<()> {
    match phis.iter().find(|p| !(**p >= 0.0) || !p.is_finite()) {
        Some(p) => Err(CliError::config(format!("thresholds must be finite and >= 0, got {p}"))),
        None if phis.is_empty() => Err(CliError::config("at least one threshold is required")),
        None => Ok(()),
    }
}

fn write(path: PathBuf, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(&path, contents).data_ctx(path.display())
}

fn write_json<T: Serialize>(path: PathBuf, value: &T) -> CliResult<()> {
    let mut s = serde_json::to_string_pretty(value).expect("reports serialize");
    s.push('\n');
    write(path, s)
}

fn read_weights(path: &Path, expect: Option<&NetworkConfig>) -> CliResult<Network> {
    match expect {
        Some(cfg) => load_weights_expect(path, cfg),
        None => load_weights(path),
    }
    .data_ctx(path.display())
}

fn read_masks(path: Option<&Path>) -> CliResult<Option<MaskSet>> {
    path.map(|p| {
        let text = fs::read_to_string(p).data_ctx(p.display())?;
        serde_json::from_str(&text).data_ctx(p.display())
    })
    .transpose()
}

/// Runs `job`, writing every output into `out`. Returns the lines to print.
pub fn execute(job: &Job, out: &Path) -> CliResult<String> {
    job.validate()?;
    fs::create_dir_all(out).data_ctx(out.display())?;
    match job {
        Job::GenData(j) => gen_data(j, out),
        Job::Train(j) => {
            let (ds, _) = load_dataset(&j.data).data_ctx(j.data.display())?;
            let slices = j.train.sample_slices;
            let train = pair_samples(&ds.train, j.network.input_slices, slices)?;
            let val = pair_samples(&ds.val, j.network.input_slices, slices)?;
            let outcome = train_scratch(&j.network, &j.train, &train, &val)?;
            write_training(&outcome, out, false)
        }
        Job::TgdFinetune(j) => {
            let net = read_weights(&j.weights, j.network.as_ref())?;
            let previous = read_masks(j.previous_masks.as_deref())?;
            let (ds, _) = load_dataset(&j.data).data_ctx(j.data.display())?;
            let slices = j.train.sample_slices;
            let train = pair_samples(&ds.train, net.config.input_slices, slices)?;
            let val = pair_samples(&ds.val, net.config.input_slices, slices)?;
            let outcome = finetune_tgd(&net, &j.train, &train, &val, previous.as_ref())?;
            write_training(&outcome, out, true)
        }
        Job::N2n(j) => {
            let net = read_weights(&j.weights, j.network.as_ref())?;
            let previous = read_masks(j.previous_masks.as_deref())?;
            let study = load_study(&j.study).data_ctx(j.study.display())?;
            let (a, b) = &study.n2n_halves;
            let outcome = online_n2n(&net, &j.train, a, b, previous.as_ref())?;
            write_training(&outcome, out, true)
        }
        Job::KseReport(j) => kse_report(j, out),
        Job::PruneEval(j) => prune_eval(j, out),
        Job::Evaluate(j) => evaluate(j, out),
    }
}

fn gen_data(j: &GenDataJob, out: &Path) -> CliResult<String> {
    let mut msg = String::new();
    if let Some(d) = &j.dataset {
        let specs: Vec<_> = (0..d.phantoms)
            .map(|i| PhantomSpec::random(d.height, d.width, d.slices, d.phantom_seed + i as u64))
            .collect();
        let ds = build_dataset(&specs, &d.protocol, &d.count_levels, d.val_phantoms)?;
        save_dataset(out.join("dataset"), &ds, &specs, &d.protocol, &d.count_levels, d.val_phantoms)?;
        writeln!(msg, "dataset: {} train / {} val pairs", ds.train.len(), ds.val.len()).unwrap();
    }
    if let Some(s) = &j.study {
        let mut spec = PhantomSpec::random(s.height, s.width, s.slices, s.phantom_seed);
        spec.disks.extend(s.ood_disk.clone());
        let study = if s.noiseless {
            noiseless_study(&spec, &s.protocol, s.realizations)?
        } else {
            generate_study(&spec, &s.protocol, s.realizations)?
        };
        let dir = out.join("study");
        save_study(&dir, &study)?;
        write_json(dir.join("rois.json"), &RoiSet::from_spec(&spec)?)?;
        writeln!(msg, "study: {} realizations", study.realizations.len()).unwrap();
    }
    Ok(msg)
}

fn write_training(o: &TrainOutcome, out: &Path, with_masks: bool) -> CliResult<String> {
    save_weights(&o.network, out.join("weights.tgdw")).data_ctx("weights.tgdw")?;
    write(out.join("train_record.jsonl"), o.record.to_jsonl())?;
    if with_masks {
        write_json(out.join("masks.json"), &o.masks)?;
    }
    let s = &o.record.summary;
    Ok(format!(
        "steps {}  retrained channels {}/{}  train mse {:.6e} -> {:.6e}\nweights {}\n",
        s.steps, s.retrained_channels, s.total_channels, s.initial_train_mse, s.final_train_mse, s.final_hash
    ))
}

#[derive(Serialize)]
struct SweepRow {
    phi: f64,
    dropped_params: usize,
    total_params: usize,
    dropped_fraction: f64,
}

fn sweep(net: &Network, report: &KseReport, phis: &[f64]) -> CliResult<Vec<(SweepRow, Network)>> {
    phis.iter()
        .map(|&phi| {
            let d = drop_kernels(net, report, phi)?;
            Ok((
                SweepRow {
                    phi,
                    dropped_params: d.dropped_params,
                    total_params: d.total_params,
                    dropped_fraction: d.fraction(),
                },
                d.network,
            ))
        })
        .collect()
}

fn kse_report(j: &KseJob, out: &Path) -> CliResult<String> {
    let net = read_weights(&j.weights, None)?;
    let report = kse_scores(&net, &j.kse)?;
    write_json(out.join("kse_report.json"), &report)?;
    let rows = sweep(&net, &report, &j.phis)?;
    let mut csv = String::from("phi,dropped_params,total_params,dropped_fraction\n");
    let mut table = format!("{:>6}  {:>14}  {:>12}  {:>9}\n", "phi", "dropped_params", "total_params", "dropped_%");
    for (r, _) in &rows {
        writeln!(csv, "{},{},{},{}", r.phi, r.dropped_params, r.total_params, r.dropped_fraction).unwrap();
        writeln!(table, "{:>6.3}  {:>14}  {:>12}  {:>9.2}", r.phi, r.dropped_params, r.total_params, 100.0 * r.dropped_fraction).unwrap();
    }
    write(out.join("sweep.csv"), csv)?;
    Ok(table)
}

fn mean_mse(net: &Network, inputs: &[&Tensor<f32>], refs: &[&Tensor<f32>]) -> CliResult<f64> {
    let mut total = 0.0;
    for (x, r) in inputs.iter().zip(refs) {
        total += mse(&denoise_volume(net, x)?, r)?;
    }
    Ok(total / inputs.len() as f64)
}

fn prune_eval(j: &PruneJob, out: &Path) -> CliResult<String> {
    let net = read_weights(&j.weights, None)?;
    let (ds, _) = load_dataset(&j.data).data_ctx(j.data.display())?;
    let pairs = if ds.val.is_empty() { &ds.train } else { &ds.val };
    if pairs.is_empty() {
        return Err(CliError::data(format!("{}: dataset has no pairs", j.data.display())));
    }
    let inputs: Vec<_> = pairs.iter().map(|p| &p.input).collect();
    let truths: Vec<_> = pairs.iter().map(|p| &p.truth).collect();
    let targets: Vec<_> = pairs.iter().map(|p| &p.target).collect();
    let report = kse_scores(&net, &j.kse)?;
    let mut csv = String::from("phi,dropped_fraction,mse_to_truth,mse_to_target,mse_to_unpruned\n");
    let mut table = format!("{:>6}  {:>9}  {:>12}  {:>12}  {:>12}\n", "phi", "dropped_%", "mse_truth", "mse_target", "mse_unpruned");
    let reference: Vec<_> = inputs.iter().map(|x| denoise_volume(&net, x)).collect::<Result<_, _>>()?;
    let reference: Vec<_> = reference.iter().collect();
    for (row, pruned) in sweep(&net, &report, &j.phis)? {
        let mt = mean_mse(&pruned, &inputs, &truths)?;
        let mg = mean_mse(&pruned, &inputs, &targets)?;
        let mu = mean_mse(&pruned, &inputs, &reference)?;
        writeln!(csv, "{},{},{},{},{}", row.phi, row.dropped_fraction, mt, mg, mu).unwrap();
        writeln!(table, "{:>6.3}  {:>9.2}  {:>12.6e}  {:>12.6e}  {:>12.6e}", row.phi, 100.0 * row.dropped_fraction, mt, mg, mu).unwrap();
    }
    write(out.join("prune_eval.csv"), csv)?;
    Ok(table)
}

#[derive(Serialize)]
struct MetricRow {
    name: &'static str,
    realizations: usize,
    lesion_bias_pct: Option<f64>,
    background_cov_pct: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cov_unavailable: Option<String>,
    mse_to_truth: f64,
    psnr_db: Option<f64>,
}

#[derive(Serialize)]
struct EvaluationReport {
    weights_hash: String,
    rows: Vec<MetricRow>,
}

fn metric_row(name: &'static str, images: &[Tensor<f32>], truth: &Tensor<f32>, rois: &RoiSet) -> CliResult<MetricRow> {
    let lesion_bias_pct = rois.lesion.as_ref().map(|r| ensemble_bias(images, r, truth)).transpose()?;
    let (background_cov_pct, cov_unavailable) = match &rois.background {
        Some(r) => match ensemble_cov(images, r) {
            Ok(c) => (Some(c), None),
            Err(e) => (None, Some(e.to_string())),
        },
        None => (None, Some("no background ROI".into())),
    };
    let peak = truth.data().iter().fold(0.0f32, |a, &b| a.max(b)) as f64;
    let mut m = 0.0;
    let mut p = 0.0;
    for im in images {
        m += mse(im, truth)?;
        p += psnr(im, truth, peak)?;
    }
    let r = images.len() as f64;
    let p = p / r;
    Ok(MetricRow {
        name,
        realizations: images.len(),
        lesion_bias_pct,
        background_cov_pct,
        cov_unavailable,
        mse_to_truth: m / r,
        psnr_db: p.is_finite().then_some(p),
    })
}

fn fmt_opt(v: Option<f64>, width: usize) -> String {
    v.map_or(format!("{:>width$}", "n/a"), |x| format!("{x:>width$.3}"))
}

fn evaluate(j: &EvaluateJob, out: &Path) -> CliResult<String> {
    let rois: RoiSet = serde_json::from_str(&fs::read_to_string(&j.rois).config_ctx(j.rois.display())?)
        .config_ctx(j.rois.display())?;
    let net = read_weights(&j.weights, None)?;
    let study = load_study(&j.study).data_ctx(j.study.display())?;
    if study.realizations.is_empty() {
        return Err(CliError::data("study has no realizations"));
    }
    let denoised = study
        .realizations
        .iter()
        .map(|r| denoise_volume(&net, r))
        .collect::<Result<Vec<_>, _>>()?;
    let rows = vec![
        metric_row("input", &study.realizations, &study.truth, &rois)?,
        metric_row("denoised", &denoised, &study.truth, &rois)?,
    ];
    let mut table = format!(
        "{:<10}  {:>3}  {:>15}  {:>18}  {:>12}\n",
        "", "R", "Lesion Bias (%)", "Background CoV (%)", "MSE"
    );
    for r in &rows {
        writeln!(
            table,
            "{:<10}  {:>3}  {}  {}  {:>12.6e}",
            r.name,
            r.realizations,
            fmt_opt(r.lesion_bias_pct, 15),
            fmt_opt(r.background_cov_pct, 18),
            r.mse_to_truth
        )
        .unwrap();
        if let Some(why) = &r.cov_unavailable {
            writeln!(table, "  ({}: CoV not reported: {why})", r.name).unwrap();
        }
    }
    write_json(
        out.join("metrics.json"),
        &EvaluationReport {
            weights_hash: network_hash(&net),
            rows,
        },
    )?;
    Ok(table)
}
