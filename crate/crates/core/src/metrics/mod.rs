//! Forgetting and utility metrics.

mod prob;
mod probe;
mod report;
mod text;

pub use prob::{
    frt, model_utility, paraphrase_answer_prob, paraphrase_probe, query_of, truth_ratio, truth_ratio_raw, ParaphraseProbe, Side,
    PROB_FLOOR,
};
pub use probe::{layer_rank_curve, layer_rank_curves, mean_curve};
pub use report::{
    comparison_table, evaluate, evaluate_split, generalisation_table, layer_rank_csv, mc_share, split_name, standard_splits,
    EvalConfig, EvalSplit, MetricReport, ReportMeta, SplitMetrics, FORGET_BASE, FORGET_REPHRASED, REAL_AUTHORS, RETAIN_BASE,
    WORLD_FACTS,
};
pub use text::{fluency, lcs_len, ngram_entropy, rouge_l_recall, token_f1, FLUENCY_WEIGHTS};
