use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::config::{Datasets, RunConfig};
use super::table::Table;
use crate::data::Dataset;
use crate::episode::{embed_dataset, evaluate, sample_episode, train, AccuracyReport, TrainOutcome};
use crate::error::{Error, Result};
use crate::lsr::LsrConfig;
use crate::model::{checkpoint, AdapterKind, VitModel};
use crate::tensor::io::save_tensor;
use crate::tensor::{Real, RngStream, StreamPurpose};
use crate::verify::{flop_count, grad_check_model};

/// Line-delimited JSON records, flushed after every line.
pub struct Jsonl {
    path: PathBuf,
    out: BufWriter<File>,
}

impl Jsonl {
    pub fn create(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Jsonl {
            path,
            out: BufWriter::new(file),
        })
    }

    pub fn write<T: Serialize>(&mut self, record: &str, value: &T) -> Result<()> {
        let line = serde_json::to_string(&Tagged { record, value }).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

#[derive(Serialize)]
struct Tagged<'a, T> {
    record: &'a str,
    #[serde(flatten)]
    value: &'a T,
}

#[derive(Serialize)]
struct DatasetReport<'a> {
    dataset: &'a str,
    n: usize,
    mean: f64,
    half_width: f64,
    std: f64,
    accuracies: &'a [f64],
}

#[derive(Serialize)]
struct TrainSummary {
    command: String,
    seed: u64,
    adapter: AdapterKind,
    episodes: usize,
    best_after_episode: usize,
    best_validation_mean: f64,
    best_validation_half_width: f64,
    final_loss: f64,
    checkpoint: String,
    checkpoint_sha256: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn initial_model<F: Real>(cfg: &RunConfig) -> Result<VitModel<F>> {
    match &cfg.checkpoint {
        Some(path) => checkpoint::load_matching(path, &cfg.model),
        None => VitModel::with_kind(cfg.model.clone(), cfg.adapter),
    }
}

fn train_logged<F: Real>(
    model: VitModel<F>,
    data: &Datasets,
    cfg: &RunConfig,
    lsr: &LsrConfig,
    log_path: &Path,
) -> Result<TrainOutcome<F>> {
    let mut log = Jsonl::create(log_path)?;
    let mut write_error = None;
    let outcome = train(model, &data.base, &data.validation, &cfg.train, lsr, |r| {
        if write_error.is_none() {
            write_error = log.write("episode", r).err();
        }
    });
    if let Some(e) = write_error {
        return Err(e);
    }
    let outcome = outcome?;
    for v in &outcome.validations {
        log.write("validation", v)?;
    }
    Ok(outcome)
}

fn evaluate_targets<F: Real>(model: &VitModel<F>, targets: &[Dataset], cfg: &RunConfig) -> Result<Vec<AccuracyReport>> {
    targets
        .iter()
        .map(|t| {
            evaluate(
                model,
                t,
                &cfg.eval.episode,
                cfg.eval.episodes,
                cfg.seed,
                &cfg.train.head,
            )
        })
        .collect()
}

fn report_row(name: &str, reports: &[AccuracyReport]) -> Vec<String> {
    let mut row = vec![name.to_string()];
    row.extend(reports.iter().map(AccuracyReport::display_percent));
    let avg = reports.iter().map(|r| r.mean).sum::<f64>() / reports.len() as f64;
    row.push(format!("{:.2}", 100.0 * avg));
    row
}

fn accuracy_table(first: &str, targets: &[Dataset]) -> Table {
    let mut header = vec![first.to_string()];
    header.extend(targets.iter().map(|t| t.name.clone()));
    header.push("average".into());
    Table::new(header)
}

pub fn run_train<F: Real>(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let data = cfg.data.load()?;
    let model = initial_model::<F>(cfg)?;
    let log_path = dir.join("train_log.jsonl");
    let outcome = train_logged(model, &data, cfg, &cfg.lsr, &log_path)?;
    let bytes = checkpoint::to_bytes(&outcome.best);
    let ckpt = dir.join("best.ckpt");
    write_file(&ckpt, &bytes)?;
    checkpoint::save(&outcome.final_model, dir.join("final.ckpt"))?;
    let summary = TrainSummary {
        command: cfg.command.clone(),
        seed: cfg.seed,
        adapter: outcome.best.adapter.kind(),
        episodes: outcome.log.len(),
        best_after_episode: outcome.best_after_episode,
        best_validation_mean: outcome.best_validation.mean,
        best_validation_half_width: outcome.best_validation.half_width,
        final_loss: outcome.log.last().map_or(f64::NAN, |r| r.loss),
        checkpoint: "best.ckpt".into(),
        checkpoint_sha256: sha256_hex(&bytes),
    };
    let mut log = Jsonl::create(dir.join("summary.jsonl"))?;
    log.write("summary", &summary)?;
    println!(
        "best validation {} after episode {}; checkpoint {}",
        outcome.best_validation.display_percent(),
        outcome.best_after_episode,
        ckpt.display()
    );
    Ok(())
}

pub fn run_eval<F: Real>(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let data = cfg.data.load()?;
    let model = initial_model::<F>(cfg)?;
    let reports = evaluate_targets(&model, &data.targets, cfg)?;
    let mut log = Jsonl::create(dir.join("eval.jsonl"))?;
    for (t, r) in data.targets.iter().zip(&reports) {
        log.write(
            "eval",
            &DatasetReport {
                dataset: &t.name,
                n: r.n,
                mean: r.mean,
                half_width: r.half_width,
                std: r.std,
                accuracies: &r.accuracies,
            },
        )?;
    }
    let mut table = accuracy_table("model", &data.targets);
    let name = cfg
        .checkpoint
        .as_ref()
        .map_or_else(|| "init".to_string(), |p| p.display().to_string());
    table.push(report_row(&name, &reports));
    let text = table.render();
    write_file(&dir.join("eval.txt"), text.as_bytes())?;
    print!("{text}");
    Ok(())
}

/// Row labels of the ablation table.
pub const ABLATION_ROWS: [&str; 5] = [
    "CPLSR",
    "CP + pseudo-classes",
    "CP + SSTs",
    "plain prompts",
    "frozen backbone",
];

#[derive(Serialize)]
struct AblationRecord<'a> {
    row: &'a str,
    adapter: AdapterKind,
    lsr: Option<&'a LsrConfig>,
    datasets: Vec<&'a str>,
    means: Vec<f64>,
    half_widths: Vec<f64>,
    average: f64,
    best_after_episode: Option<usize>,
}

pub fn run_ablate<F: Real>(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let data = cfg.data.load()?;
    let full = cfg.lsr.clone();
    let pseudo = LsrConfig {
        sst_rotations: Vec::new(),
        ..full.clone()
    };
    let sst = LsrConfig {
        pn_episodes: 0,
        ..full.clone()
    };
    let setups: [(AdapterKind, Option<&LsrConfig>); 5] = [
        (AdapterKind::Cp, Some(&full)),
        (AdapterKind::Cp, Some(&pseudo)),
        (AdapterKind::Cp, Some(&sst)),
        (AdapterKind::Prompts, Some(&full)),
        (AdapterKind::Frozen, None),
    ];
    let mut log = Jsonl::create(dir.join("ablation.jsonl"))?;
    let mut table = accuracy_table("configuration", &data.targets);
    for (i, (row, (kind, lsr))) in ABLATION_ROWS.iter().zip(setups).enumerate() {
        eprintln!("ablation row {}/5: {row}", i + 1);
        let model = VitModel::<F>::with_kind(cfg.model.clone(), kind)?;
        let (model, best_after) = match lsr {
            Some(lsr) => {
                let out = train_logged(
                    model,
                    &data,
                    cfg,
                    lsr,
                    &dir.join(format!("row{}.train_log.jsonl", i + 1)),
                )?;
                (out.best, Some(out.best_after_episode))
            }
            None => (model, None),
        };
        let reports = evaluate_targets(&model, &data.targets, cfg)?;
        let means: Vec<f64> = reports.iter().map(|r| r.mean).collect();
        log.write(
            "ablation",
            &AblationRecord {
                row,
                adapter: kind,
                lsr,
                datasets: data.targets.iter().map(|t| t.name.as_str()).collect(),
                average: means.iter().sum::<f64>() / means.len() as f64,
                means,
                half_widths: reports.iter().map(|r| r.half_width).collect(),
                best_after_episode: best_after,
            },
        )?;
        table.push(report_row(row, &reports));
    }
    let text = table.render();
    write_file(&dir.join("ablation.txt"), text.as_bytes())?;
    print!("{text}");
    Ok(())
}

pub fn run_bench(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let mut log = Jsonl::create(dir.join("bench.jsonl"))?;
    let mut table = Table::new(
        [
            "adapter",
            "tokens/layer",
            "score MACs/block",
            "score ratio",
            "block MACs",
            "model MACs",
            "trainable",
        ]
        .map(String::from)
        .to_vec(),
    );
    let baseline = flop_count(&cfg.model, AdapterKind::Frozen)?;
    for kind in [AdapterKind::Frozen, AdapterKind::Cp, AdapterKind::Prompts] {
        let r = flop_count(&cfg.model, kind)?;
        log.write("flop_report", &r)?;
        let ratio = r.per_block.score_product() as f64 / baseline.per_block.score_product() as f64;
        table.push(vec![
            kind.to_string(),
            r.seq_len.to_string(),
            r.per_block.score_product().to_string(),
            format!("{ratio:.4}"),
            r.block_total.to_string(),
            r.model_total.to_string(),
            r.trainable_params.to_string(),
        ]);
    }
    let text = table.render();
    write_file(&dir.join("bench.txt"), text.as_bytes())?;
    print!("{text}");
    Ok(())
}

pub fn run_gradcheck(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let data = cfg.data.load()?;
    let mut model = initial_model::<f64>(cfg)?;
    let mut rng = RngStream::new(cfg.seed).derive(StreamPurpose::Verify, 0);
    for p in model.trainable_params_mut() {
        for v in p.data_mut() {
            *v += cfg.gradcheck.perturb * rng.gaussian();
        }
    }
    let episode = sample_episode(&data.base, &cfg.gradcheck.episode, &mut rng)?;
    let report = grad_check_model(&model, &data.base, &episode, &cfg.train.head, &cfg.gradcheck.options)?;
    Jsonl::create(dir.join("gradcheck.jsonl"))?.write("grad_check", &report)?;
    println!(
        "checked {} of {} entries; max relative error {:.3e}; {} failures; {} zero-gradient entries",
        report.checked,
        report.total_entries,
        report.max_rel_err,
        report.failures.len(),
        report.zero_gradient.len()
    );
    if !report.passed {
        for f in report.failures.iter().take(20) {
            println!(
                "  layer {} slot {} [{}, {}]: analytic {:.9e} numeric {:.9e} rel {:.3e}",
                f.layer, f.slot, f.row, f.col, f.analytic, f.numeric, f.rel_err
            );
        }
        return Err(Error::Verification(format!(
            "{} gradient entries exceed tolerance {:e}",
            report.failures.len(),
            report.tolerance
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct ExportRecord<'a> {
    dataset: &'a str,
    rows: usize,
    dim: usize,
    embeddings: String,
    labels: String,
}

pub fn run_export<F: Real>(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let data = cfg.data.load()?;
    let model = initial_model::<F>(cfg)?;
    let mut log = Jsonl::create(dir.join("export.jsonl"))?;
    let all = std::iter::once(&data.base)
        .chain(std::iter::once(&data.validation))
        .chain(&data.targets);
    for ds in all {
        let (emb, labels) = embed_dataset(&model, ds, 64, 0)?.stacked()?;
        let (emb_name, label_name) = (
            format!("{}.embeddings.cptn", ds.name),
            format!("{}.labels.tsv", ds.name),
        );
        save_tensor(dir.join(&emb_name), &emb)?;
        let mut text = String::from("class_id\tsample\n");
        let mut sample = 0;
        for (i, &c) in labels.iter().enumerate() {
            sample = if i > 0 && labels[i - 1] == c { sample + 1 } else { 0 };
            text.push_str(&format!("{}\t{sample}\n", ds.classes[c].id));
        }
        write_file(&dir.join(&label_name), text.as_bytes())?;
        let (rows, dim) = emb.dims2()?;
        log.write(
            "export",
            &ExportRecord {
                dataset: &ds.name,
                rows,
                dim,
                embeddings: emb_name,
                labels: label_name,
            },
        )?;
        println!("{}: {rows} x {dim}", ds.name);
    }
    Ok(())
}
