//! Configuration-driven experiment commands.
//!
//! Each command is a library function (the CLI binary is a thin wrapper):
//! `train` produces the pre-trained model, `embed` implants a watermark,
//! `extract` measures a watermark rate, `attack` runs one adversary,
//! `verify-equivariance` runs the identity suites, `sweep` drives the whole
//! attack matrix over all three schemes. Every command writes its numeric
//! report as JSON (numbers only — wall times live in the run manifest next
//! to it) and is byte-reproducible from (config, seed).

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use config::{ExperimentConfig, Scheme};

use crate::attacks::{self, AttackConfig, AttackKind};
use crate::data::{random_sequences, SyntheticDataset};
use crate::equivariance;
use crate::rng::SeedHub;
use crate::tensor::{Tensor, TensorError};
use crate::train::{evaluate_classifier, train_classifier, TrainConfig};
use crate::transformer::io::{load_model, save_model, ContainerError};
use crate::transformer::{Reduction, TaskHead, TransformerWeights};
use crate::watermark::bundle::{load_bundle, save_bundle, Bundle};
use crate::watermark::scheme_b::{
    embed_b, extract_b, extract_trigger, fidelity_gap, mean_feature_similarity, BundleB,
    FidelityReport,
};
use crate::watermark::scheme_s::{embed_s, extract_s, BundleS};
use crate::watermark::{Provenance, SampleScore, WrReport};

#[derive(Error, Debug)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("tolerance failure: {0}")]
    Tolerance(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Attack(#[from] attacks::AttackError),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl HarnessError {
    /// 0 success, 1 assertion/tolerance/numeric failure, 2 usage/config error.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Tolerance(_) | HarnessError::Tensor(_) | HarnessError::Attack(_) => 1,
            _ => 2,
        }
    }
}

pub type HarnessResult<T> = Result<T, HarnessError>;

// ── Manifest ────────────────────────────────────────────────────────────────

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct StageTiming {
    pub stage: String,
    pub wall_ms: u128,
}

#[derive(Debug, Clone, Serialize)]
pub struct ArtifactEntry {
    pub file: String,
    pub sha256: String,
}

/// Reviewer metadata for a run: what was produced, from which config, how
/// long each stage took, and checksums to confirm reproduction.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub code_version: String,
    pub stages: Vec<StageTiming>,
    pub artifacts: Vec<ArtifactEntry>,
}

impl RunManifest {
    pub fn new(config: &ExperimentConfig) -> HarnessResult<Self> {
        Ok(RunManifest {
            config_hash: sha256_hex(&serde_json::to_vec(config)?),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            stages: Vec::new(),
            artifacts: Vec::new(),
        })
    }

    pub fn record_stage(&mut self, stage: &str, started: Instant) {
        self.stages.push(StageTiming {
            stage: stage.to_string(),
            wall_ms: started.elapsed().as_millis(),
        });
    }

    pub fn record_artifact(&mut self, path: &Path) -> HarnessResult<()> {
        let bytes = fs::read(path)?;
        self.artifacts.push(ArtifactEntry {
            file: path.file_name().unwrap_or_default().to_string_lossy().into_owned(),
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> HarnessResult<PathBuf> {
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_vec_pretty(self)?)?;
        Ok(path)
    }
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> HarnessResult<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_vec_pretty(value)?)?;
    Ok(path)
}

// ── Shared plumbing ─────────────────────────────────────────────────────────

const DS_HEAD_W: &str = "head.ds.w";
const DS_HEAD_B: &str = "head.ds.b";

fn ds_head_extras(head: &TaskHead) -> Vec<(String, Tensor)> {
    head.params()
        .iter()
        .zip([DS_HEAD_W, DS_HEAD_B])
        .map(|(p, name)| (name.to_string(), p.borrow().clone()))
        .collect()
}

fn ds_head_from_extras(extras: &[(String, Tensor)]) -> Option<TaskHead> {
    let w = extras.iter().find(|(n, _)| n == DS_HEAD_W)?.1.clone();
    let b = extras.iter().find(|(n, _)| n == DS_HEAD_B)?.1.clone();
    let (out_dim, in_dim) = w.dims2();
    Some(TaskHead {
        kind: crate::transformer::HeadKind::Linear {
            w: crate::tensor::Param::new(DS_HEAD_W, w),
            b: crate::tensor::Param::new(DS_HEAD_B, b),
        },
        reduction: Reduction::FirstToken,
        in_dim,
        out_dim,
    })
}

fn load_model_with_head(path: &Path) -> HarnessResult<(TransformerWeights, Option<TaskHead>)> {
    let (weights, extras) = load_model(path)?;
    let head = ds_head_from_extras(&extras);
    Ok((weights, head))
}

/// Seeded uniform extraction set; any data works for extraction, so the
/// default is unstructured sequences.
pub fn extraction_set(config: &ExperimentConfig, label: &str, n: usize) -> Vec<Vec<u16>> {
    let hub = SeedHub::new(config.seed);
    random_sequences(
        n,
        config.dataset.seq_len,
        config.model.vocab_size,
        &mut hub.stream(&format!("extraction_set.{label}")),
    )
}

fn train_eval_data(config: &ExperimentConfig) -> (SyntheticDataset, SyntheticDataset) {
    let hub = SeedHub::new(config.seed);
    let ds_cfg = config.dataset_config();
    let train =
        SyntheticDataset::generate(ds_cfg, config.dataset.train_samples, &mut hub.stream("data.train"));
    let eval =
        SyntheticDataset::generate(ds_cfg, config.dataset.eval_samples, &mut hub.stream("data.eval"));
    (train, eval)
}

// ── cmd_train ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub steps: usize,
    pub final_loss: f32,
    pub train_acc: f64,
    pub eval_acc: f64,
}

pub struct TrainOutput {
    pub model_path: PathBuf,
    pub report: TrainReport,
}

/// Train the backbone plus a mean-pool linear head on the synthetic task;
/// write the weight container (head included as extra tensors).
pub fn cmd_train(config: &ExperimentConfig, out_dir: &Path) -> HarnessResult<TrainOutput> {
    config.validate().map_err(HarnessError::Config)?;
    fs::create_dir_all(out_dir)?;
    let mut manifest = RunManifest::new(config)?;
    let started = Instant::now();

    let hub = SeedHub::new(config.seed);
    let weights = TransformerWeights::random_init(config.model, &mut hub.stream("model.init"));
    let head = TaskHead::linear(
        "head.ds",
        config.model.d,
        config.dataset.classes,
        Reduction::FirstToken,
        &mut hub.stream("model.head"),
    );
    let (train, eval) = train_eval_data(config);
    let losses = train_classifier(
        &weights,
        &head,
        &train,
        &TrainConfig {
            steps: config.train.steps,
            batch: config.train.batch,
            lr: config.train.lr,
        },
        None,
        &mut hub.stream("train"),
    )?;
    let (_, train_acc) = evaluate_classifier(&weights, &head, &train, None)?;
    let (_, eval_acc) = evaluate_classifier(&weights, &head, &eval, None)?;

    let report = TrainReport {
        steps: config.train.steps,
        final_loss: losses.last().copied().unwrap_or(f32::NAN),
        train_acc,
        eval_acc,
    };
    let model_path = out_dir.join("model.tkmk");
    save_model(&model_path, &weights, &ds_head_extras(&head))?;
    manifest.record_stage("train", started);
    manifest.record_artifact(&model_path)?;
    let report_path = write_json(out_dir, "train_report.json", &report)?;
    manifest.record_artifact(&report_path)?;
    manifest.save(out_dir)?;
    Ok(TrainOutput { model_path, report })
}

// ── cmd_embed ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct EmbedReport {
    pub scheme: String,
    pub steps: usize,
    pub fidelity: FidelityReport,
    /// Scheme S only: mean first-token similarity between θ* and θ.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_similarity: Option<f32>,
}

pub struct EmbedOutput {
    pub model_path: PathBuf,
    pub bundle_path: PathBuf,
    pub report: EmbedReport,
    pub wall_ms: u128,
}

/// Embed the configured scheme into a trained model file; writes the
/// watermarked model, the secret bundle and the fidelity report.
pub fn cmd_embed(
    config: &ExperimentConfig,
    model_path: &Path,
    out_dir: &Path,
) -> HarnessResult<EmbedOutput> {
    config.validate().map_err(HarnessError::Config)?;
    if !model_path.exists() {
        return Err(HarnessError::Config(format!("model file {} missing", model_path.display())));
    }
    fs::create_dir_all(out_dir)?;
    let mut manifest = RunManifest::new(config)?;
    let hub = SeedHub::new(config.seed);
    let (weights, head) = load_model_with_head(model_path)?;
    let ds_head = head.ok_or_else(|| {
        HarnessError::Config("model file carries no downstream head; run train first".into())
    })?;
    let original = weights.deep_clone();
    let (train, eval) = train_eval_data(config);

    let started = Instant::now();
    let (bundle, steps, mean_similarity) = match config.watermark.scheme {
        Scheme::B => {
            let validation = extraction_set(config, "bundle_validation", 128);
            let bundle = BundleB::generate_validated(
                &weights,
                config.model.d,
                config.model.n_heads,
                config.watermark.family,
                config.dataset.classes,
                config.watermark.target_label,
                config.watermark.b,
                &hub,
                &validation,
                32,
            )?;
            embed_b(&weights, &bundle, &ds_head, &train, &hub)?;
            (Bundle::B(bundle), config.watermark.b.steps, None)
        }
        Scheme::S => {
            let bundle = BundleS::generate(
                config.model.d,
                config.model.n_heads,
                config.watermark.family,
                config.watermark.s,
                &hub,
            );
            embed_s(&weights, &original, &bundle, &train, &hub)?;
            let set = extraction_set(config, "fidelity", 64);
            let sim = mean_feature_similarity(&weights, &original, &set)?;
            (Bundle::S(bundle), config.watermark.s.steps, Some(sim))
        }
        Scheme::TriggerBaseline => {
            let mut tcfg = config.watermark.trigger.clone();
            tcfg.y_t = config.watermark.target_label;
            let tb = crate::watermark::scheme_b::embed_trigger_baseline(
                &weights,
                &ds_head,
                &tcfg,
                &train,
                &mut hub.stream("trigger.embed"),
            )?;
            (Bundle::Trigger(tb), config.watermark.trigger.steps, None)
        }
    };
    let wall_ms = started.elapsed().as_millis();
    manifest.record_stage("embed", started);

    let fidelity = fidelity_gap(&original, &weights, &ds_head, &eval)?;
    let report = EmbedReport {
        scheme: bundle.scheme().to_string(),
        steps,
        fidelity,
        mean_similarity,
    };

    let wm_path = out_dir.join("model_wm.tkmk");
    save_model(&wm_path, &weights, &ds_head_extras(&ds_head))?;
    let bundle_path = out_dir.join("bundle.tkb");
    save_bundle(&bundle_path, &bundle)?;
    manifest.record_artifact(&wm_path)?;
    manifest.record_artifact(&bundle_path)?;
    let report_path = write_json(out_dir, "embed_report.json", &report)?;
    manifest.record_artifact(&report_path)?;
    manifest.save(out_dir)?;
    Ok(EmbedOutput { model_path: wm_path, bundle_path, report, wall_ms })
}

// ── cmd_extract ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct ExtractReportOut {
    pub report: WrReport,
    /// WR of the same bundle on an unwatermarked reference, when supplied.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub false_positive_reference: Option<WrReport>,
}

pub struct ExtractOutput {
    pub out: ExtractReportOut,
    pub report_path: PathBuf,
    pub scores_path: PathBuf,
}

fn bundle_wr(
    weights: &TransformerWeights,
    bundle: &Bundle,
    set: &[Vec<u16>],
    provenance: Provenance,
) -> HarnessResult<WrReport> {
    Ok(match bundle {
        Bundle::B(b) => extract_b(weights, b, set, provenance)?,
        Bundle::S(s) => extract_s(weights, s, set, provenance)?,
        Bundle::Trigger(t) => extract_trigger(weights, t, set, provenance)?,
    })
}

/// Extract a watermark rate from a model file with a bundle file; optionally
/// measure the false-positive rate on an unwatermarked reference model.
pub fn cmd_extract(
    config: &ExperimentConfig,
    model_path: &Path,
    bundle_path: &Path,
    reference_model: Option<&Path>,
    out_dir: &Path,
) -> HarnessResult<ExtractOutput> {
    config.validate().map_err(HarnessError::Config)?;
    for p in [model_path, bundle_path] {
        if !p.exists() {
            return Err(HarnessError::Config(format!("file {} missing", p.display())));
        }
    }
    fs::create_dir_all(out_dir)?;
    let mut manifest = RunManifest::new(config)?;
    let started = Instant::now();
    let (weights, _) = load_model_with_head(model_path)?;
    let bundle = load_bundle(bundle_path)?;
    expect_scheme(config, &bundle)?;

    let set = extraction_set(config, "extract", config.extraction.set_size);
    let provenance = Provenance {
        model: model_path.display().to_string(),
        bundle: bundle_path.display().to_string(),
        extraction_set: format!("uniform:{}", set.len()),
        seed: config.seed,
    };
    let report = bundle_wr(&weights, &bundle, &set, provenance.clone())?;

    let false_positive_reference = match reference_model {
        Some(path) => {
            let (reference, _) = load_model_with_head(path)?;
            let mut p = provenance;
            p.model = path.display().to_string();
            Some(bundle_wr(&reference, &bundle, &set, p)?)
        }
        None => None,
    };

    let out = ExtractReportOut { report, false_positive_reference };
    let report_path = write_json(out_dir, "extract_report.json", &out)?;
    let scores_path = out_dir.join("scores.csv");
    write_scores_csv(&scores_path, &out.report)?;
    manifest.record_stage("extract", started);
    manifest.record_artifact(&report_path)?;
    manifest.record_artifact(&scores_path)?;
    manifest.save(out_dir)?;
    Ok(ExtractOutput { out, report_path, scores_path })
}

fn expect_scheme(config: &ExperimentConfig, bundle: &Bundle) -> HarnessResult<()> {
    let want = match config.watermark.scheme {
        Scheme::B => "B",
        Scheme::S => "S",
        Scheme::TriggerBaseline => "T",
    };
    if bundle.scheme() != want {
        return Err(HarnessError::Config(format!(
            "bundle scheme {} does not match configured scheme {}",
            bundle.scheme(),
            want
        )));
    }
    Ok(())
}

fn write_scores_csv(path: &Path, report: &WrReport) -> HarnessResult<()> {
    let mut text = String::from("index,score,hit\n");
    for (i, s) in report.samples.iter().enumerate() {
        let (score, hit) = match s {
            SampleScore::Similarity { sim, hit } => (*sim, *hit),
            SampleScore::Class { logits, decoded, hit } => {
                (report.target_label.map(|t| logits[t]).unwrap_or(logits[*decoded]), *hit)
            }
        };
        text.push_str(&format!("{i},{score},{}\n", u8::from(hit)));
    }
    fs::write(path, text)?;
    Ok(())
}

// ── cmd_attack ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct AttackPoint {
    pub strength: f64,
    pub wr: f64,
    pub downstream_acc: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AttackRunReport {
    pub config: AttackConfig,
    pub scheme: String,
    pub wr_before: f64,
    pub downstream_acc_before: f64,
    pub points: Vec<AttackPoint>,
    pub extra: serde_json::Value,
}

pub struct AttackOutput {
    pub report: AttackRunReport,
    pub report_path: PathBuf,
    pub csv_path: PathBuf,
}

/// Run one attack against a watermarked model/bundle pair and report the
/// WR/accuracy trajectory. The victim files are never modified.
pub fn cmd_attack(
    config: &ExperimentConfig,
    model_path: &Path,
    bundle_path: &Path,
    attack: &AttackConfig,
    out_dir: &Path,
) -> HarnessResult<AttackOutput> {
    config.validate().map_err(HarnessError::Config)?;
    attack.validate().map_err(HarnessError::Config)?;
    for p in [model_path, bundle_path] {
        if !p.exists() {
            return Err(HarnessError::Config(format!("file {} missing", p.display())));
        }
    }
    fs::create_dir_all(out_dir)?;
    let mut manifest = RunManifest::new(config)?;
    let started = Instant::now();
    let (weights, head) = load_model_with_head(model_path)?;
    let ds_head = head.ok_or_else(|| {
        HarnessError::Config("model file carries no downstream head".into())
    })?;
    let bundle = load_bundle(bundle_path)?;
    let hub = SeedHub::new(attack.seed);
    let (_, eval) = train_eval_data(config);
    let set = extraction_set(config, "attack", config.extraction.set_size);
    let provenance = Provenance {
        model: model_path.display().to_string(),
        bundle: bundle_path.display().to_string(),
        extraction_set: format!("uniform:{}", set.len()),
        seed: attack.seed,
    };

    let wr_before = bundle_wr(&weights, &bundle, &set, provenance.clone())?.wr;
    let (_, acc_before) = evaluate_classifier(&weights, &ds_head, &eval, None)?;

    let mut points = Vec::new();
    let mut extra = serde_json::Value::Null;
    match &attack.kind {
        AttackKind::Prune { granularity, ratios } => {
            for &r in ratios {
                let attacked = attacks::attack_prune(&weights, r, *granularity)?;
                let wr = bundle_wr(&attacked, &bundle, &set, provenance.clone())?.wr;
                let (_, acc) = evaluate_classifier(&attacked, &ds_head, &eval, None)?;
                points.push(AttackPoint { strength: r as f64, wr, downstream_acc: acc });
            }
        }
        AttackKind::Quantize { bits } => {
            for &k in bits {
                let attacked = attacks::attack_quantize(&weights, k)?;
                let wr = bundle_wr(&attacked, &bundle, &set, provenance.clone())?.wr;
                let (_, acc) = evaluate_classifier(&attacked, &ds_head, &eval, None)?;
                points.push(AttackPoint { strength: k as f64, wr, downstream_acc: acc });
            }
        }
        AttackKind::Finetune { epochs, batch, lr } => {
            // disjoint downstream task: a different generator stream
            let task = SyntheticDataset::generate(
                config.dataset_config(),
                config.dataset.train_samples,
                &mut hub.stream("attack.finetune.task"),
            );
            let attacked = weights.deep_clone();
            let mut epoch_wr = Vec::new();
            let (new_head, outcome) = attacks::attack_finetune(
                &attacked,
                &task,
                *epochs,
                *batch,
                *lr,
                &hub,
                |_, model| {
                    let wr = bundle_wr(model, &bundle, &set, provenance.clone())
                        .map(|r| r.wr)
                        .unwrap_or(f64::NAN);
                    epoch_wr.push(wr);
                },
            )?;
            for (i, (&wr, &acc)) in epoch_wr.iter().zip(&outcome.epoch_acc).enumerate() {
                points.push(AttackPoint { strength: (i + 1) as f64, wr, downstream_acc: acc });
            }
            let (_, old_task_acc) = evaluate_classifier(&attacked, &new_head, &task, None)?;
            extra = serde_json::json!({ "new_task_acc": old_task_acc });
        }
        AttackKind::Extract { steps, batch, lr } => {
            let oracle = attacks::ModelOracle::new(&weights);
            let attacker_data = random_sequences(
                512,
                config.dataset.seq_len,
                config.model.vocab_size,
                &mut hub.stream("attack.extract.data"),
            );
            let (substitute, report) = attacks::attack_extract(
                &oracle,
                config.model,
                &attacker_data,
                *steps,
                *batch,
                *lr,
                &mut hub.stream("attack.extract.train"),
            )?;
            let wr = bundle_wr(&substitute, &bundle, &set, provenance.clone())?.wr;
            let (_, acc) = evaluate_classifier(&substitute, &ds_head, &eval, None)?;
            points.push(AttackPoint { strength: *steps as f64, wr, downstream_acc: acc });
            extra = serde_json::json!({ "final_similarity": report.final_similarity });
        }
        AttackKind::Overwrite => {
            let attacked = weights.deep_clone();
            let (train, _) = train_eval_data(config);
            let adversary_hub = SeedHub::new(attack.seed ^ 0x5eed);
            let (wr_original, wr_new) = match &bundle {
                Bundle::B(original) => {
                    let adv = BundleB::generate(
                        config.model.d,
                        config.model.n_heads,
                        config.watermark.family,
                        original.classes,
                        original.y_t,
                        original.embed,
                        &adversary_hub,
                    );
                    attacks::attack_overwrite_b(
                        &attacked,
                        &adv,
                        &original.spec,
                        &ds_head,
                        &train,
                        &adversary_hub,
                    )?;
                    let wr_orig = extract_b(&attacked, original, &set, provenance.clone())?.wr;
                    let wr_new = extract_b(&attacked, &adv, &set, provenance.clone())?.wr;
                    (wr_orig, wr_new)
                }
                Bundle::S(original) => {
                    let adv = BundleS::generate(
                        config.model.d,
                        config.model.n_heads,
                        config.watermark.family,
                        original.embed,
                        &adversary_hub,
                    );
                    attacks::attack_overwrite_s(&attacked, &adv, &original.spec, &train, &adversary_hub)?;
                    let wr_orig = extract_s(&attacked, original, &set, provenance.clone())?.wr;
                    let wr_new = extract_s(&attacked, &adv, &set, provenance.clone())?.wr;
                    (wr_orig, wr_new)
                }
                Bundle::Trigger(_) => {
                    return Err(HarnessError::Config(
                        "overwrite attack targets scheme B or S bundles".into(),
                    ))
                }
            };
            let (_, acc) = evaluate_classifier(&attacked, &ds_head, &eval, None)?;
            points.push(AttackPoint { strength: 1.0, wr: wr_original, downstream_acc: acc });
            extra = serde_json::json!({ "wr_new_watermark": wr_new });
        }
        AttackKind::RandomSearch { budget, small_set } => {
            let s_bundle = as_scheme_s(&bundle)?;
            let knowledge = attacks::AdaptiveKnowledge::from_bundle(s_bundle);
            let small = extraction_set(config, "attack.search.small", *small_set);
            let report = attacks::attack_random_search(
                &weights,
                &knowledge,
                config.watermark.family,
                *budget,
                &small,
                &set,
                &mut hub.stream("attack.random_search"),
                None,
            )?;
            points.push(AttackPoint {
                strength: *budget as f64,
                wr: report.best_full_wr,
                downstream_acc: acc_before,
            });
            extra = serde_json::to_value(&report)?;
        }
        AttackKind::GradientSearch { epochs, alpha } => {
            let s_bundle = as_scheme_s(&bundle)?;
            let knowledge = attacks::AdaptiveKnowledge::from_bundle(s_bundle);
            let data = random_sequences(
                256,
                config.dataset.seq_len,
                config.model.vocab_size,
                &mut hub.stream("attack.gradient_search.data"),
            );
            let small = extraction_set(config, "attack.search.small", 32);
            let cfg = attacks::GradientSearchConfig {
                epochs: *epochs,
                alpha: *alpha,
                ..attacks::GradientSearchConfig::default()
            };
            let (candidate, report) = attacks::attack_gradient_search(
                &weights,
                &knowledge,
                &data,
                &small,
                &set,
                &cfg,
                &mut hub.stream("attack.gradient_search"),
                None,
            )?;
            points.push(AttackPoint {
                strength: *epochs as f64,
                wr: report.candidate_full_wr,
                downstream_acc: acc_before,
            });
            extra = serde_json::json!({
                "report": report,
                "overlap_with_true": candidate.overlap(&s_bundle.spec),
            });
        }
        AttackKind::AdaptiveRemoval { steps } => {
            let s_bundle = as_scheme_s(&bundle)?;
            let knowledge = attacks::AdaptiveKnowledge::from_bundle(s_bundle);
            let data = random_sequences(
                256,
                config.dataset.seq_len,
                config.model.vocab_size,
                &mut hub.stream("attack.removal.data"),
            );
            let small = extraction_set(config, "attack.search.small", 32);
            let (candidate, search_report) = attacks::attack_gradient_search(
                &weights,
                &knowledge,
                &data,
                &small,
                &set,
                &attacks::GradientSearchConfig::default(),
                &mut hub.stream("attack.removal.search"),
                None,
            )?;
            let (theta_hat, _) = attacks::attack_adaptive_removal(
                &weights,
                &knowledge,
                &candidate,
                &data,
                &attacks::RemovalConfig { steps: *steps, ..attacks::RemovalConfig::default() },
                &mut hub.stream("attack.removal.train"),
            )?;
            let wr_true = extract_s(&theta_hat, s_bundle, &set, provenance.clone())?.wr;
            let wr_candidate =
                attacks::adaptive::candidate_wr(&theta_hat, &knowledge, &candidate, &set)?;
            let (_, acc) = evaluate_classifier(&theta_hat, &ds_head, &eval, None)?;
            points.push(AttackPoint { strength: *steps as f64, wr: wr_true, downstream_acc: acc });
            extra = serde_json::json!({
                "wr_candidate_after_removal": wr_candidate,
                "search": search_report,
            });
        }
    }

    let report = AttackRunReport {
        config: attack.clone(),
        scheme: bundle.scheme().to_string(),
        wr_before,
        downstream_acc_before: acc_before,
        points,
        extra,
    };
    let kind_slug = attack_slug(&attack.kind);
    let report_path = write_json(out_dir, &format!("attack_{kind_slug}.json"), &report)?;
    let csv_path = out_dir.join(format!("attack_{kind_slug}.csv"));
    write_attack_csv(&csv_path, &report, bundle.scheme())?;
    manifest.record_stage(&format!("attack.{kind_slug}"), started);
    manifest.record_artifact(&report_path)?;
    manifest.record_artifact(&csv_path)?;
    manifest.save(out_dir)?;
    Ok(AttackOutput { report, report_path, csv_path })
}

fn as_scheme_s(bundle: &Bundle) -> HarnessResult<&BundleS> {
    match bundle {
        Bundle::S(s) => Ok(s),
        _ => Err(HarnessError::Config("this attack needs a scheme-S bundle".into())),
    }
}

fn attack_slug(kind: &AttackKind) -> &'static str {
    match kind {
        AttackKind::Finetune { .. } => "finetune",
        AttackKind::Prune { .. } => "prune",
        AttackKind::Quantize { .. } => "quantize",
        AttackKind::Extract { .. } => "extract",
        AttackKind::Overwrite => "overwrite",
        AttackKind::RandomSearch { .. } => "random_search",
        AttackKind::GradientSearch { .. } => "gradient_search",
        AttackKind::AdaptiveRemoval { .. } => "adaptive_removal",
    }
}

/// Fixed column order: strength, wr_tokenmark_b, wr_tokenmark_s,
/// wr_trigger_baseline, downstream_acc. Absent schemes leave empty cells.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub strength: f64,
    pub wr_tokenmark_b: Option<f64>,
    pub wr_tokenmark_s: Option<f64>,
    pub wr_trigger_baseline: Option<f64>,
    pub downstream_acc: f64,
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> HarnessResult<()> {
    let mut text =
        String::from("strength,wr_tokenmark_b,wr_tokenmark_s,wr_trigger_baseline,downstream_acc\n");
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            r.strength,
            cell(r.wr_tokenmark_b),
            cell(r.wr_tokenmark_s),
            cell(r.wr_trigger_baseline),
            r.downstream_acc
        ));
    }
    fs::write(path, text)?;
    Ok(())
}

fn write_attack_csv(path: &Path, report: &AttackRunReport, scheme: &str) -> HarnessResult<()> {
    let rows: Vec<SweepRow> = report
        .points
        .iter()
        .map(|p| SweepRow {
            strength: p.strength,
            wr_tokenmark_b: (scheme == "B").then_some(p.wr),
            wr_tokenmark_s: (scheme == "S").then_some(p.wr),
            wr_trigger_baseline: (scheme == "T").then_some(p.wr),
            downstream_acc: p.downstream_acc,
        })
        .collect();
    write_sweep_csv(path, &rows)
}

// ── cmd_verify_equivariance ─────────────────────────────────────────────────

/// Run the equivariance suites; `trials == 0` passes vacuously (with a
/// warning printed by the CLI). A failed suite is a tolerance failure.
pub fn cmd_verify_equivariance(
    seed: u64,
    trials: usize,
    out_dir: Option<&Path>,
) -> HarnessResult<equivariance::SuiteReport> {
    let hub = SeedHub::new(seed);
    let report = equivariance::run_suite(&hub, trials)?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        write_json(dir, "equivariance_report.json", &report)?;
    }
    if !report.pass {
        return Err(HarnessError::Tolerance(format!(
            "equivariance suite failed: max_forward={:e}, max_backward={:e}, max_train_step={:e}, negative_control={:e}",
            report.max_forward, report.max_backward, report.max_train_step,
            report.negative_control_deviation
        )));
    }
    Ok(report)
}

// ── cmd_sweep ───────────────────────────────────────────────────────────────

pub struct SweepOutput {
    pub csv_paths: Vec<PathBuf>,
    pub out_dir: PathBuf,
}

/// The full comparison pipeline: train one base model, embed all three
/// schemes on separate clones, then run every configured fine-tune / prune /
/// quantize attack across the three watermarked models into shared CSVs
/// (other attack kinds run against the scheme-S model via `cmd_attack`).
pub fn cmd_sweep(config: &ExperimentConfig, out_dir: &Path) -> HarnessResult<SweepOutput> {
    config.validate().map_err(HarnessError::Config)?;
    fs::create_dir_all(out_dir)?;
    let trained = cmd_train(config, out_dir)?;

    let mut cfg_b = config.clone();
    cfg_b.watermark.scheme = Scheme::B;
    let out_b = cmd_embed(&cfg_b, &trained.model_path, &out_dir.join("scheme_b"))?;
    let mut cfg_s = config.clone();
    cfg_s.watermark.scheme = Scheme::S;
    let out_s = cmd_embed(&cfg_s, &trained.model_path, &out_dir.join("scheme_s"))?;
    let mut cfg_t = config.clone();
    cfg_t.watermark.scheme = Scheme::TriggerBaseline;
    let out_t = cmd_embed(&cfg_t, &trained.model_path, &out_dir.join("trigger"))?;

    let mut csv_paths = Vec::new();
    for attack in &config.attacks {
        match &attack.kind {
            AttackKind::Finetune { .. } | AttackKind::Prune { .. } | AttackKind::Quantize { .. } => {
                let runs = [
                    (&cfg_b, &out_b, "b"),
                    (&cfg_s, &out_s, "s"),
                    (&cfg_t, &out_t, "t"),
                ];
                let mut per_scheme = Vec::new();
                for (cfg, embed, slug) in runs {
                    let sub = out_dir.join(format!("attack_{}_{}", attack_slug(&attack.kind), slug));
                    let out = cmd_attack(cfg, &embed.model_path, &embed.bundle_path, attack, &sub)?;
                    per_scheme.push(out.report);
                }
                let rows: Vec<SweepRow> = per_scheme[0]
                    .points
                    .iter()
                    .enumerate()
                    .map(|(i, p)| SweepRow {
                        strength: p.strength,
                        wr_tokenmark_b: Some(per_scheme[0].points[i].wr),
                        wr_tokenmark_s: per_scheme[1].points.get(i).map(|q| q.wr),
                        wr_trigger_baseline: per_scheme[2].points.get(i).map(|q| q.wr),
                        downstream_acc: per_scheme[1]
                            .points
                            .get(i)
                            .map(|q| q.downstream_acc)
                            .unwrap_or(p.downstream_acc),
                    })
                    .collect();
                let csv = out_dir.join(format!("sweep_{}.csv", attack_slug(&attack.kind)));
                write_sweep_csv(&csv, &rows)?;
                csv_paths.push(csv);
            }
            _ => {
                let sub = out_dir.join(format!("attack_{}", attack_slug(&attack.kind)));
                let out = cmd_attack(&cfg_s, &out_s.model_path, &out_s.bundle_path, attack, &sub)?;
                csv_paths.push(out.csv_path);
            }
        }
    }
    Ok(SweepOutput { csv_paths, out_dir: out_dir.to_path_buf() })
}
