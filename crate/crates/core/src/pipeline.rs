//! End-to-end orchestration behind the CLI commands: train, evaluate,
//! mask export, ablations, and the context-weight sweep. Every command
//! writes its fully resolved configuration beside its outputs.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::config::RunConfig;
use crate::data::{
    load_labeled_split, load_unlabeled_split, sample_episode, DatasetSpec, Episode, Role, Split,
};
use crate::error::{Error, Result};
use crate::masking::{clip_similarity_map, discrepancy_partition, surgery_similarity_map, write_mask_artifacts};
use crate::objective::{extract_features, train, LossReport, TrainConfig, TrainSettings, Variant};
use crate::scoring::{evaluate, MetricsReport};
use crate::textbank::{embed_prompts, embed_prompts_with_cache, template_embeddings, PromptBank};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Serialized prompt-bank state plus enough metadata to validate reuse.
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub num_id_classes: usize,
    pub token_len: usize,
    pub token_dim: usize,
    pub class_names: Vec<String>,
    pub temperature: f64,
    pub context: Vec<Vec<f64>>,
    pub seed: u64,
    pub train: TrainConfig,
}

impl Checkpoint {
    pub fn from_bank(bank: &PromptBank, train: &TrainConfig, seed: u64) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            num_id_classes: bank.num_id_classes(),
            token_len: bank.token_len(),
            token_dim: bank.context().ncols(),
            class_names: bank.class_names().to_vec(),
            temperature: bank.temperature(),
            context: bank
                .context()
                .rows()
                .into_iter()
                .map(|r| r.to_vec())
                .collect(),
            seed,
            train: *train,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Resolution {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let ckpt: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::data(format!(
                "checkpoint format version {} unsupported (expected {CHECKPOINT_FORMAT_VERSION})",
                ckpt.format_version
            )));
        }
        if ckpt.class_names.len() != ckpt.num_id_classes {
            return Err(Error::data("checkpoint class list does not match M"));
        }
        Ok(ckpt)
    }

    pub fn to_bank(&self, backbone: &Backbone) -> Result<PromptBank> {
        if self.token_dim != backbone.token_dim() {
            return Err(Error::data(format!(
                "checkpoint token dim {} does not match backbone {}",
                self.token_dim,
                backbone.token_dim()
            )));
        }
        let mut context = ndarray::Array2::<f64>::zeros((self.token_len, self.token_dim));
        if self.context.len() != self.token_len {
            return Err(Error::data("checkpoint context row count mismatch"));
        }
        for (i, row) in self.context.iter().enumerate() {
            if row.len() != self.token_dim {
                return Err(Error::data("checkpoint context column count mismatch"));
            }
            for (j, &v) in row.iter().enumerate() {
                context[(i, j)] = v;
            }
        }
        PromptBank::from_state(self.class_names.clone(), context, self.temperature)
    }
}

fn id_spec(cfg: &RunConfig, split: Split) -> DatasetSpec {
    DatasetSpec {
        name: cfg.data.id.name.clone(),
        root: cfg.data.id.root.clone(),
        split,
        role: Role::Id,
    }
}

fn ood_specs(cfg: &RunConfig) -> Vec<DatasetSpec> {
    cfg.data
        .ood
        .iter()
        .map(|entry| DatasetSpec {
            name: entry.name.clone(),
            root: entry.root.clone(),
            split: Split::Test,
            role: Role::Ood,
        })
        .collect()
}

fn settings_for(cfg: &RunConfig, backbone: &Backbone, variant: Variant) -> TrainSettings {
    TrainSettings {
        train: cfg.train,
        surgery: cfg.surgery(backbone),
        discrepancy: cfg.masking,
        lambda: cfg.synthesis.lambda,
        variant,
    }
}

fn default_topk(m: usize) -> usize {
    (m + 4) / 5
}

pub fn variant_from_config(cfg: &RunConfig, name: &str, m: usize) -> Result<Variant> {
    match name {
        "full" => Ok(Variant::Full),
        "no_masking" => Ok(Variant::NoMasking),
        "no_synthesis" => Ok(Variant::NoSynthesis),
        "entropy_loss" => Ok(Variant::EntropyLoss),
        "topk_masking" => Ok(Variant::TopkMasking {
            k: cfg.ablation.topk_k.unwrap_or_else(|| default_topk(m)).clamp(1, m),
        }),
        other => Err(Error::config(format!(
            "unknown ablation variant {other:?}; expected full, no_masking, no_synthesis, entropy_loss or topk_masking"
        ))),
    }
}

/// Train on one sampled episode and return the bank plus its loss history.
pub fn train_episode(
    cfg: &RunConfig,
    backbone: &Backbone,
    variant: Variant,
) -> Result<(PromptBank, Vec<LossReport>, Episode)> {
    let episode = sample_episode(&id_spec(cfg, Split::Train), cfg.episode.shots, cfg.seed)?;
    let samples = episode.load(&cfg.preprocess)?;
    let mut bank = PromptBank::new(backbone, &episode.class_list, cfg.prompts.token_len, cfg.seed)?;
    let settings = settings_for(cfg, backbone, variant);
    let history = train(backbone, &mut bank, &samples, &settings)?;
    Ok((bank, history, episode))
}

/// Evaluate a bank against the configured ID test split and OOD sets.
pub fn evaluate_bank(
    cfg: &RunConfig,
    backbone: &Backbone,
    bank: &PromptBank,
) -> Result<MetricsReport> {
    let embeddings = embed_prompts(bank, backbone)?;
    let id_test = load_labeled_split(&id_spec(cfg, Split::Test), &cfg.preprocess)?;
    let mut ood_sets = Vec::new();
    for spec in ood_specs(cfg) {
        let images = load_unlabeled_split(&spec, &cfg.preprocess)?;
        ood_sets.push((spec.name.clone(), images));
    }
    let (report, _) = evaluate(
        backbone,
        &embeddings,
        bank.temperature(),
        cfg.scoring.unknown,
        &id_test,
        &ood_sets,
    )?;
    Ok(report)
}

fn write_string(path: &Path, content: &str) -> Result<()> {
    std::fs::write(path, content)?;
    Ok(())
}

pub fn loss_history_csv(history: &[LossReport]) -> String {
    let mut csv = String::from("epoch,id_loss,ood_loss,total\n");
    for (epoch, report) in history.iter().enumerate() {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            epoch, report.id_loss, report.ood_loss, report.total
        ));
    }
    csv
}

pub fn metrics_csv(report: &MetricsReport) -> String {
    let mut csv = String::from("dataset,auroc\n");
    for row in &report.per_dataset {
        csv.push_str(&format!("{},{}\n", row.dataset, row.auroc));
    }
    csv.push_str(&format!("avg,{}\n", report.average_auroc));
    csv
}

pub fn metrics_table(report: &MetricsReport) -> String {
    let width = report
        .per_dataset
        .iter()
        .map(|r| r.dataset.len())
        .chain(["dataset".len(), "id_accuracy".len()])
        .max()
        .unwrap_or(12);
    let mut out = format!("{:width$}  {}\n", "dataset", "auroc", width = width);
    for row in &report.per_dataset {
        out.push_str(&format!(
            "{:width$}  {:.4}\n",
            row.dataset,
            row.auroc,
            width = width
        ));
    }
    out.push_str(&format!(
        "{:width$}  {:.4}\n",
        "avg",
        report.average_auroc,
        width = width
    ));
    out.push_str(&format!(
        "{:width$}  {:.4}\n",
        "id_accuracy",
        report.id_accuracy,
        width = width
    ));
    out
}

pub struct TrainArtifacts {
    pub run_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub history: Vec<LossReport>,
}

/// The train command: sample, train, persist checkpoint + loss history +
/// resolved config. Optionally dumps an inspection pass of synthesized
/// outliers with provenance as JSON lines.
pub fn run_train(cfg: &RunConfig, dump_outliers: Option<&Path>) -> Result<TrainArtifacts> {
    cfg.validate()?;
    let run_dir = cfg.run_dir();
    std::fs::create_dir_all(&run_dir)?;
    cfg.save(&run_dir.join("train_config.toml"))?;
    let backbone = cfg.backbone.build()?;
    let (bank, history, episode) = train_episode(cfg, &backbone, Variant::Full)?;

    let checkpoint_path = run_dir.join("checkpoint.json");
    Checkpoint::from_bank(&bank, &cfg.train, cfg.seed).save(&checkpoint_path)?;
    let loss_csv_path = run_dir.join("loss_history.csv");
    write_string(&loss_csv_path, &loss_history_csv(&history))?;

    if let Some(dump_path) = dump_outliers {
        dump_outlier_inspection(cfg, &backbone, &bank, &episode, dump_path)?;
    }
    Ok(TrainArtifacts {
        run_dir,
        checkpoint: checkpoint_path,
        loss_csv: loss_csv_path,
        history,
    })
}

#[derive(Serialize)]
struct OutlierRecord {
    class_a: usize,
    class_b: usize,
    lambda: f64,
    vector: Vec<f64>,
}

/// One full-episode extraction pass with the trained bank, logging every
/// synthesized outlier and its provenance.
fn dump_outlier_inspection(
    cfg: &RunConfig,
    backbone: &Backbone,
    bank: &PromptBank,
    episode: &Episode,
    path: &Path,
) -> Result<()> {
    let samples = episode.load(&cfg.preprocess)?;
    let template = template_embeddings(backbone, bank.class_names())?;
    let surgery = cfg.surgery(backbone);
    let prepared: Vec<_> = samples
        .iter()
        .map(|(image, label)| {
            crate::objective::prepare_sample(backbone, image, *label, &surgery, &template)
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&crate::objective::PreparedSample> = prepared.iter().collect();
    let fwd = embed_prompts_with_cache(bank, backbone)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (_, outliers) = extract_features(
        &refs,
        &fwd.embeddings,
        Variant::Full,
        &cfg.masking,
        &cfg.synthesis.lambda,
        &mut rng,
    )?;
    let mut lines = String::new();
    for outlier in &outliers {
        let record = OutlierRecord {
            class_a: outlier.class_a,
            class_b: outlier.class_b,
            lambda: outlier.lambda,
            vector: outlier.vector.to_vec(),
        };
        lines.push_str(&serde_json::to_string(&record)?);
        lines.push('\n');
    }
    write_string(path, &lines)?;
    Ok(())
}

pub struct EvalArtifacts {
    pub run_dir: PathBuf,
    pub metrics_csv: PathBuf,
    pub report: MetricsReport,
    pub table: String,
}

/// The eval command: load a checkpoint, score the configured test sets,
/// persist CSV + table.
pub fn run_eval(cfg: &RunConfig, checkpoint_path: &Path) -> Result<EvalArtifacts> {
    cfg.validate()?;
    let run_dir = cfg.run_dir();
    std::fs::create_dir_all(&run_dir)?;
    cfg.save(&run_dir.join("eval_config.toml"))?;
    let backbone = cfg.backbone.build()?;
    let bank = Checkpoint::load(checkpoint_path)?.to_bank(&backbone)?;
    let report = evaluate_bank(cfg, &backbone, &bank)?;
    let metrics_path = run_dir.join("metrics.csv");
    write_string(&metrics_path, &metrics_csv(&report))?;
    let table = metrics_table(&report);
    write_string(&run_dir.join("metrics.txt"), &table)?;
    Ok(EvalArtifacts {
        run_dir,
        metrics_csv: metrics_path,
        report,
        table,
    })
}

pub struct MaskArtifacts {
    pub mask_dir: PathBuf,
    pub stems: Vec<String>,
}

/// The mask command: per input image, export the foreground mask, the score
/// heatmap and the raw scores. With a checkpoint the learnable prompt row
/// scores the surgery map; otherwise the fixed template does.
pub fn run_mask(
    cfg: &RunConfig,
    image_paths: &[PathBuf],
    class_name: &str,
    checkpoint_path: Option<&Path>,
) -> Result<MaskArtifacts> {
    cfg.validate()?;
    if image_paths.is_empty() {
        return Err(Error::input("mask: at least one image path required"));
    }
    let run_dir = cfg.run_dir();
    let mask_dir = run_dir.join("masks");
    std::fs::create_dir_all(&mask_dir)?;
    cfg.save(&run_dir.join("mask_config.toml"))?;
    let backbone = cfg.backbone.build()?;
    let surgery = cfg.surgery(&backbone);

    let template = template_embeddings(&backbone, &[class_name.to_string()])?;
    let template_row = template.row(0).to_owned();
    let class_row = match checkpoint_path {
        Some(path) => {
            let bank = Checkpoint::load(path)?.to_bank(&backbone)?;
            let index = bank
                .class_names()
                .iter()
                .position(|n| n == class_name)
                .ok_or_else(|| {
                    Error::input(format!(
                        "class {class_name:?} is not in the checkpoint's class list"
                    ))
                })?;
            embed_prompts(&bank, &backbone)?.row(index).to_owned()
        }
        None => template_row.clone(),
    };

    let mut stems = Vec::new();
    for path in image_paths {
        let image = crate::data::load_image(path, &cfg.preprocess)?;
        let smap = surgery_similarity_map(&backbone, &image, &surgery, &class_row.view())?;
        let clip_map = clip_similarity_map(&backbone, &image, &template_row.view())?;
        let partition = discrepancy_partition(&smap, &clip_map, &cfg.masking)?;
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("image")
            .to_string();
        write_mask_artifacts(&mask_dir, &stem, &partition, &smap, backbone.patch_px())?;
        stems.push(stem);
    }
    Ok(MaskArtifacts { mask_dir, stems })
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub average_auroc: f64,
    pub id_accuracy: f64,
}

pub struct AblationArtifacts {
    pub csv: PathBuf,
    pub rows: Vec<AblationRow>,
}

/// The ablate command: train and evaluate each requested variant from the
/// same seed and episode.
pub fn run_ablate(cfg: &RunConfig, variant_names: &[String]) -> Result<AblationArtifacts> {
    cfg.validate()?;
    let run_dir = cfg.run_dir();
    std::fs::create_dir_all(&run_dir)?;
    cfg.save(&run_dir.join("ablate_config.toml"))?;
    let backbone = cfg.backbone.build()?;
    let m = sample_episode(&id_spec(cfg, Split::Train), cfg.episode.shots, cfg.seed)?
        .class_list
        .len();
    let mut rows = Vec::new();
    for name in variant_names {
        let variant = variant_from_config(cfg, name, m)?;
        let (bank, _, _) = train_episode(cfg, &backbone, variant)?;
        let report = evaluate_bank(cfg, &backbone, &bank)?;
        rows.push(AblationRow {
            variant: variant.label(),
            average_auroc: report.average_auroc,
            id_accuracy: report.id_accuracy,
        });
    }
    let mut csv = String::from("variant,avg_auroc,id_accuracy\n");
    for row in &rows {
        csv.push_str(&format!(
            "{},{},{}\n",
            row.variant, row.average_auroc, row.id_accuracy
        ));
    }
    let csv_path = run_dir.join("ablation.csv");
    write_string(&csv_path, &csv)?;
    Ok(AblationArtifacts { csv: csv_path, rows })
}

pub struct SweepArtifacts {
    pub csv: PathBuf,
    pub rows: Vec<(f64, f64)>,
}

/// The sweep command: retrain with each neighborhood weight and record the
/// average AUROC per value.
pub fn run_sweep_beta(cfg: &RunConfig, betas: &[f64]) -> Result<SweepArtifacts> {
    cfg.validate()?;
    if betas.is_empty() {
        return Err(Error::input("sweep: at least one beta value required"));
    }
    let run_dir = cfg.run_dir();
    std::fs::create_dir_all(&run_dir)?;
    cfg.save(&run_dir.join("sweep_config.toml"))?;
    let mut rows = Vec::new();
    for &beta in betas {
        let mut swept = cfg.clone();
        swept.context.beta_ctx = beta;
        swept.validate()?;
        let backbone = swept.backbone.build()?;
        let (bank, _, _) = train_episode(&swept, &backbone, Variant::Full)?;
        let report = evaluate_bank(&swept, &backbone, &bank)?;
        rows.push((beta, report.average_auroc));
    }
    let mut csv = String::from("beta_ctx,avg_auroc\n");
    for (beta, auroc) in &rows {
        csv.push_str(&format!("{beta},{auroc}\n"));
    }
    let csv_path = run_dir.join("beta_sweep.csv");
    write_string(&csv_path, &csv)?;
    Ok(SweepArtifacts { csv: csv_path, rows })
}
