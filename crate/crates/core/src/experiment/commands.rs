//! The subcommands: each reads its inputs from the output root and writes
//! one stage directory with a run manifest.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::lab::{provider_of, Lab};
use super::manifest::{audit, Stage};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::factworld::{read_corpus, write_corpus, EncodedSample};
use crate::lm::{load_checkpoint, save_checkpoint, ModelParams};
use crate::metrics::{
    comparison_table, generalisation_table, layer_rank_csv, layer_rank_curves, mean_curve, MetricReport,
};
use crate::sensitivity::{mean_embedding_norm, msm_batch, subject_sensitivity_ratio, sensitivity_response, ProfileCache};
use crate::unlearn::{Adapted, Adaptor, IclPrompt, MethodSpec, StepLog, UnlearnConfig, Provenance};

pub const CORPUS_DIR: &str = "corpus";
pub const MODELS_DIR: &str = "models";
pub const UNLEARNED_DIR: &str = "unlearned";
pub const EVAL_DIR: &str = "eval";
pub const ABLATE_DIR: &str = "ablate";
pub const PROBE_DIR: &str = "probe";
pub const REPORT_DIR: &str = "report";
const PROFILES: &str = "profiles.json";

/// How an unlearned model is scored at inference time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdaptorSpec {
    Whp { alpha: f64 },
    Uld { alpha: f64 },
    Icl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlearnRecord {
    pub provenance: Provenance,
    pub config: UnlearnConfig,
    pub adaptor: Option<AdaptorSpec>,
    pub log: Vec<StepLog>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub target_losses: Vec<f64>,
    pub retain_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub model: String,
    pub samples: usize,
    /// Subject-span over non-subject mean normalised sensitivity.
    pub subject_ratio: Option<f64>,
    /// Spearman correlation of sensitivity with loss change, per sample.
    pub spearman: Vec<Option<f64>>,
    pub mean_spearman: Option<f64>,
    pub mean_ranks: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub label: String,
    pub value: toml::Value,
    pub report: Option<MetricReport>,
    pub error: Option<String>,
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

fn method_dir(spec: &MethodSpec) -> String {
    format!("{UNLEARNED_DIR}/{spec}")
}

pub struct Runner {
    pub config: ExperimentConfig,
    pub out: PathBuf,
    pub force: bool,
    pub exec: Exec,
}

impl Runner {
    pub fn new(config: ExperimentConfig, out: PathBuf, force: bool, exec: Exec) -> Self {
        Self { config, out, force, exec }
    }

    fn stage(&self, rel: &str, command: &str) -> Result<Stage> {
        Stage::begin(&self.out, rel, command, self.force)
    }

    fn finish(&self, stage: Stage) -> Result<()> {
        stage.finish(&self.config.hash(), self.config.seed)?;
        Ok(())
    }

    /// Loads the corpus and checks it was generated from this config.
    pub fn lab(&self) -> Result<Lab> {
        let corpus = read_corpus(&self.out.join(CORPUS_DIR))?;
        if corpus.config != self.config.corpus_config() {
            return Err(Error::Config(
                "corpus on disk was generated with different world settings; rerun gen-corpus with --force".into(),
            ));
        }
        Ok(Lab::from_corpus(self.config.clone(), corpus))
    }

    fn checkpoint_dir(&self, which: &str) -> PathBuf {
        let configured = match which {
            "target" => self.config.target_checkpoint.clone(),
            "retain" => self.config.retain_checkpoint.clone(),
            _ => None,
        };
        configured.unwrap_or_else(|| self.out.join(MODELS_DIR).join(which))
    }

    /// Loads a checkpoint and refuses it when its vocabulary differs from the corpus.
    pub fn load_model(&self, lab: &Lab, dir: &Path) -> Result<ModelParams> {
        let (p, m) = load_checkpoint(dir)?;
        let dataset = lab.corpus.vocab.hash();
        if m.vocab_hash != dataset {
            return Err(Error::VocabMismatch {
                checkpoint: m.vocab_hash,
                dataset,
            });
        }
        Ok(p)
    }

    pub fn target(&self, lab: &Lab) -> Result<ModelParams> {
        self.load_model(lab, &self.checkpoint_dir("target"))
    }

    pub fn retain(&self, lab: &Lab) -> Result<ModelParams> {
        self.load_model(lab, &self.checkpoint_dir("retain"))
    }

    pub fn gen_corpus(&self) -> Result<String> {
        let lab = Lab::new(self.config.clone())?;
        let stage = self.stage(CORPUS_DIR, "gen-corpus")?;
        write_corpus(stage.dir(), &lab.corpus)?;
        self.finish(stage)?;
        let mut s = String::new();
        let _ = writeln!(s, "{:<22} {:>6} {:>8}", "split", "facts", "samples");
        for (name, facts, n) in lab.corpus.split_table() {
            let _ = writeln!(s, "{name:<22} {facts:>6} {n:>8}");
        }
        let _ = writeln!(s, "vocabulary {} words", lab.corpus.vocab.len());
        Ok(s)
    }

    pub fn train(&self) -> Result<String> {
        let lab = self.lab()?;
        let stage = self.stage(MODELS_DIR, "train")?;
        let vocab = lab.corpus.vocab.hash();
        let (target, target_losses) = lab.train_target(self.exec)?;
        save_checkpoint(&stage.path("target"), &target, &vocab, self.config.seed, None)?;
        let (retain, retain_losses) = lab.train_retain(self.exec)?;
        save_checkpoint(&stage.path("retain"), &retain, &vocab, self.config.seed, None)?;
        let forget = lab.forget_set();
        let k = self.config.unlearn_config(&"permu+gdr".parse()?)?.k;
        let profiles = msm_batch(&target, &forget, k, self.config.seed, self.exec)?;
        ProfileCache::new(&target.content_hash(), profiles).save(&stage.path(PROFILES))?;
        let record = TrainRecord {
            target_losses,
            retain_losses,
        };
        stage.write("train-log.json", json(&record)?)?;
        self.finish(stage)?;
        Ok(format!(
            "target final loss {:.4}, retain final loss {:.4}\n",
            record.target_losses.last().copied().unwrap_or(f64::NAN),
            record.retain_losses.last().copied().unwrap_or(f64::NAN)
        ))
    }

    fn profiles(&self) -> Option<ProfileCache> {
        ProfileCache::load(&self.out.join(MODELS_DIR).join(PROFILES)).ok()
    }

    pub fn unlearn(&self, methods: &[MethodSpec]) -> Result<String> {
        let lab = self.lab()?;
        let target = self.target(&lab)?;
        let profiles = self.profiles();
        let mut s = String::new();
        for spec in methods {
            let cfg = self.config.unlearn_config(spec)?;
            let stage = self.stage(&method_dir(spec), "unlearn")?;
            let u = lab.unlearn_with(&target, &cfg, profiles.as_ref(), self.exec)?;
            let vocab = lab.corpus.vocab.hash();
            let prov = serde_json::to_value(&u.provenance)?;
            save_checkpoint(&stage.path("model"), &u.params, &vocab, self.config.seed, Some(prov))?;
            let adaptor = match &u.adaptor {
                None => None,
                Some(Adaptor::Whp { reinforced, alpha }) => {
                    save_checkpoint(&stage.path("aux"), reinforced, &vocab, self.config.seed, None)?;
                    Some(AdaptorSpec::Whp { alpha: *alpha })
                }
                Some(Adaptor::Uld { assistant, alpha }) => {
                    save_checkpoint(&stage.path("aux"), assistant, &vocab, self.config.seed, None)?;
                    Some(AdaptorSpec::Uld { alpha: *alpha })
                }
                Some(Adaptor::Icl { .. }) => Some(AdaptorSpec::Icl),
            };
            let record = UnlearnRecord {
                provenance: u.provenance.clone(),
                config: cfg,
                adaptor,
                log: u.log,
            };
            stage.write("unlearn.json", json(&record)?)?;
            self.finish(stage)?;
            let _ = writeln!(s, "{spec}: {} steps, checkpoint {}", record.log.len(), &u.params.content_hash()[..12]);
        }
        Ok(s)
    }

    /// Rebuilds the scored provider of a finished unlearning run.
    pub fn load_unlearned(&self, lab: &Lab, spec: &MethodSpec) -> Result<(Adapted, UnlearnRecord)> {
        let dir = self.out.join(method_dir(spec));
        let record: UnlearnRecord = read_json(&dir.join("unlearn.json"))?;
        let model = Arc::new(self.load_model(lab, &dir.join("model"))?);
        let adaptor = match record.adaptor {
            None => None,
            Some(AdaptorSpec::Whp { alpha }) => Some(Adaptor::Whp {
                reinforced: Arc::new(self.load_model(lab, &dir.join("aux"))?),
                alpha,
            }),
            Some(AdaptorSpec::Uld { alpha }) => Some(Adaptor::Uld {
                assistant: Arc::new(self.load_model(lab, &dir.join("aux"))?),
                alpha,
            }),
            Some(AdaptorSpec::Icl) => Some(Adaptor::Icl {
                prompt: IclPrompt::new(&lab.corpus.vocab),
                scope: lab.forget_set().iter().filter_map(|s| s.subject().map(<[u32]>::to_vec)).collect(),
            }),
        };
        Ok((Adapted { model, adaptor }, record))
    }

    pub fn eval(&self) -> Result<String> {
        let lab = self.lab()?;
        let mut reports = Vec::new();
        let cfg_hash = self.config.hash();
        for name in ["target", "retain"] {
            let p = self.load_model(&lab, &self.checkpoint_dir(name))?;
            let meta = lab.meta(name, &p, &cfg_hash);
            reports.push(lab.evaluate(&Adapted::plain(Arc::new(p)), meta, self.exec)?);
        }
        for spec in &self.config.methods {
            let (provider, record) = self.load_unlearned(&lab, spec)?;
            let meta = lab.meta(&spec.to_string(), &provider.model, &record.provenance.config_hash);
            reports.push(lab.evaluate(&provider, meta, self.exec)?);
        }
        let stage = self.stage(EVAL_DIR, "eval")?;
        for r in &reports {
            stage.write(&format!("{}.json", r.meta.method), r.to_json()?)?;
        }
        let tables = render_tables(&reports);
        stage.write("table.txt", &tables)?;
        self.finish(stage)?;
        Ok(tables)
    }

    /// One unlearning run plus evaluation per grid value; failures are recorded and the sweep continues.
    pub fn ablate(&self) -> Result<String> {
        let a = &self.config.ablate;
        if a.values.is_empty() {
            return Err(Error::Config("ablation grid is empty".into()));
        }
        let lab = self.lab()?;
        let target = self.target(&lab)?;
        let profiles = self.profiles();
        let mut points = Vec::new();
        for v in &a.values {
            let label = format!("{}={}", a.param, v);
            let mut extra = toml::Table::new();
            extra.insert(a.param.clone(), v.clone());
            let run = || -> Result<MetricReport> {
                let cfg = self.config.unlearn_config_with(&a.method, &extra)?;
                let u = lab.unlearn_with(&target, &cfg, profiles.as_ref(), self.exec)?;
                let meta = lab.meta(&label, &u.params, &cfg.hash());
                lab.evaluate(&provider_of(&u), meta, self.exec)
            };
            let point = match run() {
                Ok(r) => SweepPoint {
                    label,
                    value: v.clone(),
                    report: Some(r),
                    error: None,
                },
                Err(e) => {
                    log::error!("sweep point {label} failed: {e}");
                    SweepPoint {
                        label,
                        value: v.clone(),
                        report: None,
                        error: Some(e.to_string()),
                    }
                }
            };
            points.push(point);
        }
        let stage = self.stage(&format!("{ABLATE_DIR}/{}-{}", a.method, a.param), "ablate")?;
        stage.write("sweep.json", json(&points)?)?;
        let reports: Vec<MetricReport> = points.iter().filter_map(|p| p.report.clone()).collect();
        let mut table = render_tables(&reports);
        for p in points.iter().filter(|p| p.error.is_some()) {
            let _ = writeln!(table, "{}: failed: {}", p.label, p.error.as_deref().unwrap_or(""));
        }
        stage.write("table.txt", &table)?;
        self.finish(stage)?;
        Ok(table)
    }

    /// Rank curves and sensitivity grids for the target or an unlearned model.
    pub fn probe(&self, method: Option<&MethodSpec>) -> Result<String> {
        let lab = self.lab()?;
        let (name, params) = match method {
            None => ("target".to_string(), self.target(&lab)?),
            Some(spec) => (spec.to_string(), (*self.load_unlearned(&lab, spec)?.0.model).clone()),
        };
        let mut samples = lab.forget_set();
        if self.config.probe.samples > 0 {
            samples.truncate(self.config.probe.samples);
        }
        let curves = layer_rank_curves(&params, &samples, self.exec)?;
        let profiles = msm_batch(&params, &samples, 1.0, self.config.seed, self.exec)?;
        let delta = self.config.probe.delta_fraction * mean_embedding_norm(&params);
        let spearman = self
            .exec
            .try_map(&samples, |s| {
                sensitivity_response(&params, s, self.config.probe.trials, delta, self.config.seed, Exec::Sequential).map(|r| r.spearman)
            })?;
        let valid: Vec<f64> = spearman.iter().flatten().copied().collect();
        let summary = ProbeSummary {
            model: name.clone(),
            samples: samples.len(),
            subject_ratio: subject_sensitivity_ratio(&profiles, &samples),
            mean_spearman: (!valid.is_empty()).then(|| valid.iter().sum::<f64>() / valid.len() as f64),
            spearman,
            mean_ranks: mean_curve(&curves),
        };
        let stage = self.stage(&format!("{PROBE_DIR}/{name}"), "probe")?;
        stage.write("ranks.csv", rank_csv(&samples, &curves))?;
        stage.write("mean-ranks.csv", layer_rank_csv(&[(name.clone(), summary.mean_ranks.clone())]))?;
        stage.write("heatmap.csv", heatmap_csv(&samples, &profiles, &lab))?;
        stage.write("summary.json", json(&summary)?)?;
        self.finish(stage)?;
        let mut s = String::new();
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "n/a".into());
        let _ = writeln!(s, "model {name}, {} samples", summary.samples);
        let _ = writeln!(s, "subject sensitivity ratio {}", fmt(summary.subject_ratio));
        let _ = writeln!(s, "mean spearman {}", fmt(summary.mean_spearman));
        let ranks: Vec<String> = summary.mean_ranks.iter().map(|r| format!("{r:.1}")).collect();
        let _ = writeln!(s, "mean first-answer-token rank by layer: {}", ranks.join(" "));
        Ok(s)
    }

    /// Tables from the stored evaluation reports plus a manifest audit.
    pub fn report(&self) -> Result<String> {
        let dir = self.out.join(EVAL_DIR);
        let mut names = vec!["target".to_string(), "retain".to_string()];
        names.extend(self.config.methods.iter().map(|m| m.to_string()));
        let reports = names
            .iter()
            .map(|n| read_json::<MetricReport>(&dir.join(format!("{n}.json"))))
            .collect::<Result<Vec<_>>>()?;
        let stage = self.stage(REPORT_DIR, "report")?;
        let mut text = render_tables(&reports);
        for r in reports.iter().filter(|r| !r.flags.is_empty()) {
            let _ = writeln!(text, "{}: {}", r.meta.method, r.flags.join("; "));
        }
        stage.write("report.txt", &text)?;
        self.finish(stage)?;
        let a = audit(&self.out)?;
        let _ = writeln!(
            text,
            "\nmanifests {}, artifacts {}, orphans {}, shared {}, stale {}",
            a.manifests,
            a.artifacts,
            a.orphans.len(),
            a.shared.len(),
            a.stale.len()
        );
        for o in a.orphans.iter().chain(&a.shared).chain(&a.stale) {
            let _ = writeln!(text, "  {o}");
        }
        if !a.is_clean() {
            return Err(Error::Invalid(format!("manifest audit failed:\n{text}")));
        }
        Ok(text)
    }
}

/// Comparison and generalisation tables; the forget-quality column is
/// relative to the report named `retain` when present.
pub fn render_tables(reports: &[MetricReport]) -> String {
    let reference = reports.iter().find(|r| r.meta.method == "retain");
    format!(
        "{}\n{}",
        comparison_table(reports, reference),
        generalisation_table(reports)
    )
}

fn rank_csv(samples: &[EncodedSample], curves: &[Vec<usize>]) -> String {
    let mut s = String::from("sample,layer,rank\n");
    for (smp, c) in samples.iter().zip(curves) {
        for (l, r) in c.iter().enumerate() {
            let _ = writeln!(s, "{},{},{r}", smp.id, l + 1);
        }
    }
    s
}

fn heatmap_csv(samples: &[EncodedSample], profiles: &[crate::sensitivity::SensitivityProfile], lab: &Lab) -> String {
    let width = profiles.iter().map(|p| p.normalized.len()).max().unwrap_or(0);
    let mut s = String::from("sample,question");
    for i in 0..width {
        let _ = write!(s, ",t{i}");
    }
    s.push('\n');
    for (smp, p) in samples.iter().zip(profiles) {
        let _ = write!(s, "{},{}", smp.id, lab.corpus.vocab.decode_text(&smp.question));
        for i in 0..width {
            match p.normalized.get(i) {
                Some(v) => {
                    let _ = write!(s, ",{v:.6}");
                }
                None => s.push(','),
            }
        }
        s.push('\n');
    }
    s
}

