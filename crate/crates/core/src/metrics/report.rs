//! Per-split evaluation of a distribution provider and report formatting.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::prob::{frt, model_utility, paraphrase_probe, query_of, truth_ratio, ParaphraseProbe, Side, PROB_FLOOR};
use super::text::{fluency, rouge_l_recall, token_f1};
use crate::error::{invalid, Result};
use crate::exec::Exec;
use crate::factworld::{Corpus, EncodedSample, Source, Split, Variant};
use crate::lm::{Provider, Query};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Generation budget for overlap metrics.
    pub max_new: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { max_new: 10 }
    }
}

/// Samples scored together under one name.
#[derive(Debug, Clone)]
pub struct EvalSplit {
    pub name: String,
    pub side: Side,
    /// Score probability as a multiple-choice share against distractors.
    pub multiple_choice: bool,
    pub samples: Vec<EncodedSample>,
}

pub const FORGET_BASE: &str = "forget_base";
pub const FORGET_REPHRASED: &str = "forget_rephrased";
pub const RETAIN_BASE: &str = "retain_base";
pub const REAL_AUTHORS: &str = "real_authors";
pub const WORLD_FACTS: &str = "world_facts";

pub fn split_name(split: Split, variant: Variant) -> String {
    let side = match split {
        Split::Forget => "forget",
        Split::Retain => "retain",
    };
    format!("{side}_{}", variant.as_str())
}

/// Every variant of both sides of the main world plus the two auxiliary worlds.
pub fn standard_splits(corpus: &Corpus) -> Vec<EvalSplit> {
    let mut out = Vec::new();
    for (split, side) in [(Split::Forget, Side::Forget), (Split::Retain, Side::Retain)] {
        for v in Variant::ALL {
            let samples = corpus.encoded(Source::Main, split, v);
            if !samples.is_empty() {
                out.push(EvalSplit {
                    name: split_name(split, v),
                    side,
                    multiple_choice: false,
                    samples,
                });
            }
        }
    }
    for (src, name) in [(Source::RealAuthors, REAL_AUTHORS), (Source::WorldFacts, WORLD_FACTS)] {
        let samples = corpus.encoded(src, Split::Retain, Variant::Base);
        if !samples.is_empty() {
            out.push(EvalSplit {
                name: name.to_string(),
                side: Side::Retain,
                multiple_choice: true,
                samples,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub name: String,
    pub side: Side,
    pub n: usize,
    /// ROUGE-L recall of greedy generations.
    pub rg: f64,
    /// Length-normalised answer probability (multiple-choice share on auxiliary splits).
    pub pr: f64,
    pub tr: f64,
    pub f1: f64,
    pub fluency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub method: String,
    pub checkpoint_hash: String,
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub meta: ReportMeta,
    pub splits: Vec<SplitMetrics>,
    pub mu: f64,
    /// `None` when the forget denominator is zero (infinite trade-off).
    pub frt: Option<f64>,
    pub paraphrase: Option<ParaphraseProbe>,
    pub flags: Vec<String>,
}

impl MetricReport {
    pub fn split(&self, name: &str) -> Option<&SplitMetrics> {
        self.splits.iter().find(|s| s.name == name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Multiple-choice share of `choices[0]` under length-normalised probabilities.
pub fn mc_share<P: Provider + ?Sized>(provider: &P, query: &Query, choices: &[&[u32]]) -> Result<f64> {
    if choices.len() < 2 {
        return Err(invalid("multiple choice needs at least two choices"));
    }
    let ps = choices
        .iter()
        .map(|c| Ok(provider.conditional_prob(query, c)?.max(PROB_FLOOR)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(ps[0] / ps.iter().sum::<f64>())
}

struct SampleScore {
    rg: f64,
    pr: f64,
    tr: f64,
    f1: f64,
    generated: Vec<u32>,
}

fn score_sample<P: Provider + ?Sized>(provider: &P, s: &EncodedSample, split: &EvalSplit, cfg: &EvalConfig) -> Result<SampleScore> {
    let q = query_of(s);
    let generated = provider.generate(&q, cfg.max_new)?;
    let reference = s.reference();
    let pr = if split.multiple_choice && !s.distractors.is_empty() {
        let mut choices: Vec<&[u32]> = vec![&s.answer];
        choices.extend(s.distractors.iter().map(Vec::as_slice));
        mc_share(provider, &q, &choices)?
    } else {
        provider.conditional_prob(&q, &s.answer)?
    };
    let paraphrased = s.paraphrased.first().unwrap_or(&s.answer);
    let tr = truth_ratio(provider, &q, paraphrased, &s.perturbed, split.side)?;
    Ok(SampleScore {
        rg: rouge_l_recall(reference, &generated),
        pr,
        tr,
        f1: token_f1(reference, &generated),
        generated,
    })
}

pub fn evaluate_split<P: Provider + ?Sized>(provider: &P, split: &EvalSplit, cfg: &EvalConfig, exec: Exec) -> Result<SplitMetrics> {
    if split.samples.is_empty() {
        return Err(invalid(format!("split {} is empty", split.name)));
    }
    let scores = exec.try_map(&split.samples, |s| score_sample(provider, s, split, cfg))?;
    let n = scores.len() as f64;
    let mean = |f: fn(&SampleScore) -> f64| scores.iter().map(f).sum::<f64>() / n;
    let texts: Vec<Vec<u32>> = scores.iter().map(|s| s.generated.clone()).collect();
    Ok(SplitMetrics {
        name: split.name.clone(),
        side: split.side,
        n: scores.len(),
        rg: mean(|s| s.rg),
        pr: mean(|s| s.pr),
        tr: mean(|s| s.tr),
        f1: mean(|s| s.f1),
        fluency: fluency(&texts),
    })
}

/// Scores every split and derives MU, FRT and the paraphrase probe.
pub fn evaluate<P: Provider + ?Sized>(
    provider: &P,
    splits: &[EvalSplit],
    meta: ReportMeta,
    cfg: &EvalConfig,
    exec: Exec,
) -> Result<MetricReport> {
    let mut flags = Vec::new();
    let mut out = Vec::with_capacity(splits.len());
    for s in splits {
        if s.samples.is_empty() {
            log::warn!("split {} has no samples; omitted", s.name);
            flags.push(format!("missing split {}", s.name));
            continue;
        }
        out.push(evaluate_split(provider, s, cfg, exec)?);
    }
    let mut utility = Vec::new();
    for name in [RETAIN_BASE, REAL_AUTHORS, WORLD_FACTS] {
        match out.iter().find(|m| m.name == name) {
            Some(m) => utility.extend([m.rg, m.pr, m.tr]),
            None => {
                log::warn!("model utility computed without {name}");
                flags.push(format!("model utility without {name}"));
            }
        }
    }
    let (mu, zero) = model_utility(&utility);
    if zero {
        flags.push("model utility has a zero component".into());
    }
    let frt_value = match out.iter().find(|m| m.name == FORGET_BASE) {
        Some(f) => {
            let v = frt(mu, f.rg, f.pr);
            if v.is_none() {
                flags.push("forget-retain trade-off is infinite".into());
            }
            v
        }
        None => None,
    };
    let find = |name: &str| splits.iter().find(|s| s.name == name && !s.samples.is_empty());
    let paraphrase = match (find(FORGET_BASE), find(FORGET_REPHRASED)) {
        (Some(b), Some(r)) => Some(paraphrase_probe(provider, &b.samples, &r.samples, exec)?),
        _ => None,
    };
    Ok(MetricReport {
        meta,
        splits: out,
        mu,
        frt: frt_value,
        paraphrase,
        flags,
    })
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

fn render(header: &[String], rows: &[Vec<String>]) -> String {
    let mut w: Vec<usize> = header.iter().map(String::len).collect();
    for r in rows {
        for (i, c) in r.iter().enumerate() {
            w[i] = w[i].max(c.len());
        }
    }
    let mut s = String::new();
    let line = |cells: &[String], s: &mut String| {
        let parts: Vec<String> = cells
            .iter()
            .enumerate()
            .map(|(i, c)| if i == 0 { format!("{c:<w$}", w = w[i]) } else { format!("{c:>w$}", w = w[i]) })
            .collect();
        let _ = writeln!(s, "{}", parts.join("  ").trim_end());
    };
    line(header, &mut s);
    let rule: Vec<String> = w.iter().map(|&n| "-".repeat(n)).collect();
    line(&rule, &mut s);
    for r in rows {
        line(r, &mut s);
    }
    s
}

/// Method-by-split table in percent: RG/Pr/TR on forget, retain and the
/// auxiliary splits, then MU and FRT. `reference`, when present, adds the
/// forget probability relative to that report (the retain model).
pub fn comparison_table(reports: &[MetricReport], reference: Option<&MetricReport>) -> String {
    let groups = [FORGET_BASE, RETAIN_BASE, REAL_AUTHORS, WORLD_FACTS];
    let mut header = vec!["method".to_string()];
    for g in groups {
        for m in ["RG", "Pr", "TR"] {
            header.push(format!("{g}.{m}"));
        }
    }
    header.extend(["MU".into(), "FRT".into()]);
    if reference.is_some() {
        header.push("Pr/retain".into());
    }
    let ref_pr = reference.and_then(|r| r.split(FORGET_BASE)).map(|s| s.pr);
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            let mut row = vec![r.meta.method.clone()];
            for g in groups {
                match r.split(g) {
                    Some(s) => row.extend([pct(s.rg), pct(s.pr), pct(s.tr)]),
                    None => row.extend(["-".into(), "-".into(), "-".into()]),
                }
            }
            row.push(pct(r.mu));
            row.push(r.frt.map(|f| format!("{f:.2}")).unwrap_or_else(|| "inf".into()));
            if reference.is_some() {
                let v = match (r.split(FORGET_BASE), ref_pr) {
                    (Some(s), Some(p)) if p > 0.0 => format!("{:.2}", s.pr / p),
                    _ => "-".into(),
                };
                row.push(v);
            }
            row
        })
        .collect();
    render(&header, &rows)
}

/// Forget-side probability and ROUGE per variant, one row per method.
pub fn generalisation_table(reports: &[MetricReport]) -> String {
    let mut header = vec!["method".to_string()];
    for v in Variant::ALL {
        header.push(format!("{}.Pr", v.as_str()));
        header.push(format!("{}.RG", v.as_str()));
    }
    header.extend(["P_u".into(), "P_r".into(), "delta".into()]);
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            let mut row = vec![r.meta.method.clone()];
            for v in Variant::ALL {
                match r.split(&split_name(Split::Forget, v)) {
                    Some(s) => row.extend([pct(s.pr), pct(s.rg)]),
                    None => row.extend(["-".into(), "-".into()]),
                }
            }
            match r.paraphrase {
                Some(p) => row.extend([pct(p.p_u), pct(p.p_r), pct(p.delta)]),
                None => row.extend(["-".into(), "-".into(), "-".into()]),
            }
            row
        })
        .collect();
    render(&header, &rows)
}

/// `layer,mean_rank,method` rows with 1-based layers.
pub fn layer_rank_csv(curves: &[(String, Vec<f64>)]) -> String {
    let mut s = String::from("layer,mean_rank,method\n");
    for (method, curve) in curves {
        for (l, r) in curve.iter().enumerate() {
            let _ = writeln!(s, "{},{r:.6},{method}", l + 1);
        }
    }
    s
}
