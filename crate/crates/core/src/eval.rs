//! Measurement: corpus BLEU, the bag-of-symbols text/scene consistency
//! cosine, token accuracy, Spearman rank correlation for reward-vs-BLEU
//! curves, and the per-split evaluation report.

use crate::reward::SceneGraph;
use crate::world::{self, Scene, Split, WorldError};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("hypothesis/reference counts differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Corpus BLEU: geometric mean of clipped n-gram precisions for n = 1..4
/// with no smoothing (any zero precision gives 0), times the brevity
/// penalty `exp(min(0, 1 - ref_len / hyp_len))`, times 100.
pub fn corpus_bleu(hypotheses: &[Vec<String>], references: &[Vec<String>]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(EvalError::LengthMismatch(
            hypotheses.len(),
            references.len(),
        ));
    }
    if references.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    for (hyp, refr) in hypotheses.iter().zip(references) {
        for n in 1..=4usize {
            if hyp.len() < n {
                continue;
            }
            let ref_counts = ngram_counts(refr, n);
            let hyp_counts = ngram_counts(hyp, n);
            total[n - 1] += hyp.len() - n + 1;
            for (gram, count) in hyp_counts {
                if let Some(&rc) = ref_counts.get(&gram) {
                    matched[n - 1] += count.min(rc);
                }
            }
        }
    }
    // orders with no hypothesis n-grams at all carry no evidence and are
    // skipped (otherwise a corpus of short sentences could never reach
    // 100); a zero numerator with a nonzero denominator scores 0
    let mut log_precision_sum = 0.0;
    let mut orders = 0usize;
    for n in 0..4 {
        if total[n] == 0 {
            continue;
        }
        if matched[n] == 0 {
            return Ok(0.0);
        }
        log_precision_sum += (matched[n] as f64 / total[n] as f64).ln();
        orders += 1;
    }
    let hyp_len: usize = hypotheses.iter().map(Vec::len).sum();
    if orders == 0 || hyp_len == 0 {
        return Ok(0.0);
    }
    let ref_len: usize = references.iter().map(Vec::len).sum();
    let bp = (1.0 - ref_len as f64 / hyp_len as f64).min(0.0).exp();
    Ok(100.0 * bp * (log_precision_sum / orders as f64).exp())
}

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn symbol_bag(graph: &SceneGraph) -> BTreeMap<String, f64> {
    let mut bag = BTreeMap::new();
    for t in graph.iter() {
        for sym in [&t.head, &t.relation, &t.tail] {
            let base = sym.split('#').next().unwrap_or(sym).to_string();
            *bag.entry(base).or_insert(0.0) += 1.0;
        }
    }
    bag
}

/// Text/scene consistency: cosine between the bag-of-symbols vectors of
/// the sentence's parsed graph and the scene's extracted graph, clamped
/// at zero. 1 exactly when the bags are positively proportional.
pub fn clip_score_analog(source_tokens: &[String], scene: &Scene) -> Result<f64> {
    let lsg = world::parse_lsg(source_tokens)?;
    let vsg = world::extract_vsg(scene);
    let c = symbol_bag(&lsg);
    let v = symbol_bag(&vsg);
    let mut dot = 0.0;
    for (sym, a) in &c {
        if let Some(b) = v.get(sym) {
            dot += a * b;
        }
    }
    let nc: f64 = c.values().map(|a| a * a).sum::<f64>().sqrt();
    let nv: f64 = v.values().map(|a| a * a).sum::<f64>().sqrt();
    if nc == 0.0 || nv == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (nc * nv)).max(0.0))
}

/// Spearman rank correlation with average ranks for ties. `None` when
/// either side has zero variance (correlation undefined).
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    assert_eq!(xs.len(), ys.len(), "spearman needs paired samples");
    if xs.len() < 2 {
        return None;
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    pearson(&rx, &ry)
}

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("no NaN in ranked data"));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}

/// One point of the training curve: checkpoint iteration, dev BLEU and
/// mean rollout reward.
#[derive(Clone, Copy, Debug)]
pub struct CurvePoint {
    pub iteration: usize,
    pub bleu: f64,
    pub mean_reward: f64,
}

/// `iteration,bleu,mean_reward` rows plus a trailing comment line with the
/// Spearman correlation (or `undefined` when it does not exist).
pub fn write_curve_csv(path: &Path, points: &[CurvePoint]) -> Result<Option<f64>> {
    let bleus: Vec<f64> = points.iter().map(|p| p.bleu).collect();
    let rewards: Vec<f64> = points.iter().map(|p| p.mean_reward).collect();
    let corr = if points.len() >= 5 {
        spearman(&bleus, &rewards)
    } else {
        None
    };
    let mut out = String::from("iteration,bleu,mean_reward\n");
    for p in points {
        out.push_str(&format!(
            "{},{:.6},{:.6}\n",
            p.iteration, p.bleu, p.mean_reward
        ));
    }
    match corr {
        Some(c) => out.push_str(&format!("# spearman,{c:.6}\n")),
        None => out.push_str("# spearman,undefined\n"),
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, out)?;
    Ok(corr)
}

/// Everything the evaluation measured for one test example.
#[derive(Clone, Debug)]
pub struct ExampleEval {
    pub split: Split,
    pub hypothesis: Vec<String>,
    pub reference: Vec<String>,
    pub reward: f64,
    pub clip_analog: f64,
}

/// Metrics of one split (or of the whole test set).
#[derive(Clone, Copy, Debug, Default)]
pub struct SplitMetrics {
    pub examples: usize,
    pub bleu: f64,
    pub token_accuracy: f64,
    pub mean_reward: f64,
    pub clip_analog: f64,
    pub correct_tokens: usize,
    pub total_tokens: usize,
}

/// Per-split breakdown plus the overall row; the splits partition the
/// test set.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub overall: SplitMetrics,
    pub normal: SplitMetrics,
    pub ambiguous: SplitMetrics,
}

fn split_metrics(evals: &[&ExampleEval]) -> Result<SplitMetrics> {
    if evals.is_empty() {
        return Ok(SplitMetrics::default());
    }
    let hyps: Vec<Vec<String>> = evals.iter().map(|e| e.hypothesis.clone()).collect();
    let refs: Vec<Vec<String>> = evals.iter().map(|e| e.reference.clone()).collect();
    let bleu = corpus_bleu(&hyps, &refs)?;
    let mut correct = 0usize;
    let mut total = 0usize;
    for e in evals {
        let m = e.hypothesis.len().min(e.reference.len());
        correct += (0..m)
            .filter(|&i| e.hypothesis[i] == e.reference[i])
            .count();
        total += e.hypothesis.len().max(e.reference.len());
    }
    let n = evals.len() as f64;
    Ok(SplitMetrics {
        examples: evals.len(),
        bleu,
        token_accuracy: correct as f64 / total as f64,
        mean_reward: evals.iter().map(|e| e.reward).sum::<f64>() / n,
        clip_analog: evals.iter().map(|e| e.clip_analog).sum::<f64>() / n,
        correct_tokens: correct,
        total_tokens: total,
    })
}

pub fn build_report(evals: &[ExampleEval]) -> Result<EvalReport> {
    if evals.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let all: Vec<&ExampleEval> = evals.iter().collect();
    let normal: Vec<&ExampleEval> = evals.iter().filter(|e| e.split == Split::Normal).collect();
    let ambiguous: Vec<&ExampleEval> = evals
        .iter()
        .filter(|e| e.split == Split::Ambiguous)
        .collect();
    Ok(EvalReport {
        overall: split_metrics(&all)?,
        normal: split_metrics(&normal)?,
        ambiguous: split_metrics(&ambiguous)?,
    })
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("split,examples,bleu,token_accuracy,mean_reward,clip_analog\n");
        for (name, m) in [
            ("overall", &self.overall),
            ("normal", &self.normal),
            ("ambiguous", &self.ambiguous),
        ] {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.6}\n",
                name, m.examples, m.bleu, m.token_accuracy, m.mean_reward, m.clip_analog
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

// ---------------------------------------------------------------------
// ablation matrix

use crate::config::RunConfig;
use crate::trainer::{self, TrainError};

pub const ABLATION_ROWS: [&str; 4] = ["full", "wo_sd", "w_ri", "wo_vs"];

/// Build the config of one ablation row from the base config. Only the
/// `[ablation]` switches differ between rows.
pub fn ablation_row_config(base: &RunConfig, row: &str) -> RunConfig {
    let mut config = base.clone();
    let (diffusion, real, encoder) = match row {
        "full" => (true, false, true),
        "wo_sd" => (false, false, true),
        "w_ri" => (false, true, true),
        "wo_vs" => (true, false, false),
        other => panic!("unknown ablation row {other}"),
    };
    config.ablation.use_diffusion = diffusion;
    config.ablation.use_real_scenes = real;
    config.ablation.use_scene_encoder = encoder;
    config
}

/// Audit that two row configs differ only inside the `[ablation]` section.
/// Returns the differing canonical lines.
pub fn audit_config_diff(a: &RunConfig, b: &RunConfig) -> Vec<String> {
    let mut diffs = Vec::new();
    let mut section = String::new();
    for (la, lb) in a.canonical().lines().zip(b.canonical().lines()) {
        if la.starts_with('[') {
            section = la.to_string();
        }
        if la != lb {
            diffs.push(format!("{section} {la} vs {lb}"));
        }
    }
    diffs
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub name: &'static str,
    pub report: Option<EvalReport>,
    /// Why the row is absent, when it is.
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "row,status,bleu,bleu_normal,bleu_ambiguous,token_accuracy,             token_accuracy_normal,token_accuracy_ambiguous,mean_reward,clip_analog\n",
        );
        for row in &self.rows {
            match &row.report {
                Some(r) => out.push_str(&format!(
                    "{},ok,{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                    row.name,
                    r.overall.bleu,
                    r.normal.bleu,
                    r.ambiguous.bleu,
                    r.overall.token_accuracy,
                    r.normal.token_accuracy,
                    r.ambiguous.token_accuracy,
                    r.overall.mean_reward,
                    r.overall.clip_analog
                )),
                None => out.push_str(&format!("{},absent,,,,,,,,\n", row.name)),
            }
        }
        out
    }
}

/// Train and evaluate the four configurations on the same test set:
/// the full system, no visual prefix (`wo_sd`), oracle scenes (`w_ri`)
/// and a frozen random scene encoder (`wo_vs`). A failing row is marked
/// absent; the others still run. The table lands in the base config's
/// run directory.
pub fn run_ablation(base: &RunConfig) -> std::result::Result<AblationTable, TrainError> {
    let full = ablation_row_config(base, "full");
    let mut rows = Vec::new();
    for name in ABLATION_ROWS {
        let config = ablation_row_config(base, name);
        let diffs = audit_config_diff(&full, &config);
        for d in &diffs {
            if !d.starts_with("[ablation]") {
                return Err(TrainError::Invalid(format!(
                    "ablation row {name} drifted outside the ablation section: {d}"
                )));
            }
        }
        match trainer::run_pipeline(&config) {
            Ok(report) => rows.push(AblationRow {
                name,
                report: Some(report),
                error: None,
            }),
            Err(e) => {
                if e.is_validation() {
                    rows.push(AblationRow {
                        name,
                        report: None,
                        error: Some(e.to_string()),
                    });
                } else {
                    return Err(e);
                }
            }
        }
    }
    let table = AblationTable { rows };
    let paths = crate::config::RunPaths::of(base);
    if let Some(parent) = paths.ablation_table().parent() {
        std::fs::create_dir_all(parent).map_err(TrainError::Io)?;
    }
    std::fs::write(paths.ablation_table(), table.to_csv()).map_err(TrainError::Io)?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{Color, ObjShape, ObjectSpec};

    fn toks(s: &str) -> Vec<String> {
        s.split(' ').map(str::to_string).collect()
    }

    #[test]
    fn identical_corpora_score_100() {
        let corpus = vec![toks("a red circle"), toks("sirkolo roja maldekstre-de")];
        assert_eq!(corpus_bleu(&corpus, &corpus).unwrap(), 100.0);
    }

    #[test]
    fn zero_precision_rule_gives_zero() {
        let hyp = vec![toks("a a a")];
        let refr = vec![toks("a b c")];
        assert_eq!(corpus_bleu(&hyp, &refr).unwrap(), 0.0);
    }

    #[test]
    fn three_sentence_fixture_matches_hand_counted_value() {
        // clipped n-gram counts by hand:
        //   s1 "the cat sat on the mat" vs itself: 6/6, 5/5, 4/4, 3/3
        //   s2 "a quick brown fox" vs "the quick brown fox": 3/4, 2/3, 1/2, 0/1
        //   s3 "dogs bark loud" vs "dogs bark very loud": 3/3, 1/2, 0/1, 0/0
        // precisions 12/13, 8/10, 5/7, 3/4; BP = exp(1 - 14/13)
        let hyps = vec![
            toks("the cat sat on the mat"),
            toks("a quick brown fox"),
            toks("dogs bark loud"),
        ];
        let refs = vec![
            toks("the cat sat on the mat"),
            toks("the quick brown fox"),
            toks("dogs bark very loud"),
        ];
        let bleu = corpus_bleu(&hyps, &refs).unwrap();
        assert!(
            (bleu - 73.43583024934775).abs() < 1e-6,
            "bleu {bleu}"
        );
    }

    #[test]
    fn bleu_is_invariant_to_joint_corpus_permutation() {
        let hyps = vec![toks("a b c d"), toks("x y z w"), toks("p q r s")];
        let refs = vec![toks("a b c e"), toks("x y w z"), toks("p q r s")];
        let forward = corpus_bleu(&hyps, &refs).unwrap();
        let hyps_rev: Vec<_> = hyps.iter().rev().cloned().collect();
        let refs_rev: Vec<_> = refs.iter().rev().cloned().collect();
        let reversed = corpus_bleu(&hyps_rev, &refs_rev).unwrap();
        assert_eq!(forward, reversed);
    }

    #[test]
    fn bleu_rejects_mismatched_lengths() {
        let hyp = vec![toks("a")];
        assert!(matches!(
            corpus_bleu(&hyp, &[]),
            Err(EvalError::LengthMismatch(1, 0))
        ));
    }

    fn two_object_scene() -> Scene {
        Scene::new(vec![
            ObjectSpec::new(ObjShape::Circle, Color::Red, 0, 0).unwrap(),
            ObjectSpec::new(ObjShape::Square, Color::Blue, 2, 0).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn clip_analog_is_one_for_the_matching_scene() {
        let scene = two_object_scene();
        let (src, _) = world::render_pair(&scene, Split::Normal);
        assert!((clip_score_analog(&src, &scene).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clip_analog_is_zero_for_disjoint_symbols() {
        // "a red circle" against a scene holding only a green triangle far
        // away shares no has-color arguments... the has-color relation
        // symbol itself is shared, so build the orthogonal case from a
        // bare-entity sentence instead: its graph is an exists self-loop.
        let src = toks("a circle");
        let scene = Scene::new(vec![
            ObjectSpec::new(ObjShape::Triangle, Color::Green, 3, 3).unwrap(),
        ])
        .unwrap();
        assert_eq!(clip_score_analog(&src, &scene).unwrap(), 0.0);
    }

    #[test]
    fn clip_analog_between_zero_and_one_for_partial_match() {
        // entities match, colors differ:
        // sentence bag: circle x3 (head,tail of exists)... recompute:
        // "a red circle": lsg = {(circle#1, has-color, red)} ->
        //   bag c = {circle:1, has-color:1, red:1}
        // scene green circle at (0,0): vsg = {(circle#1, has-color, green)}
        //   bag v = {circle:1, has-color:1, green:1}
        // cos = 2/3
        let src = toks("a red circle");
        let scene = Scene::new(vec![
            ObjectSpec::new(ObjShape::Circle, Color::Green, 0, 0).unwrap(),
        ])
        .unwrap();
        let got = clip_score_analog(&src, &scene).unwrap();
        assert!((got - 2.0 / 3.0).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn spearman_rank_identity_and_ties() {
        let xs = vec![1.0, 2.0, 3.0, 4.0];
        let ys = vec![10.0, 20.0, 30.0, 40.0];
        assert!((spearman(&xs, &ys).unwrap() - 1.0).abs() < 1e-12);
        let anti: Vec<f64> = ys.iter().rev().cloned().collect();
        assert!((spearman(&xs, &anti).unwrap() + 1.0).abs() < 1e-12);
        let flat = vec![5.0; 4];
        assert!(spearman(&xs, &flat).is_none());
    }

    #[test]
    fn curve_csv_reports_undefined_correlation_for_flat_metrics() {
        let dir = std::env::temp_dir().join("scenemt_eval_curve_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("curve.csv");
        let points: Vec<CurvePoint> = (0..6)
            .map(|i| CurvePoint {
                iteration: i * 10,
                bleu: 50.0,
                mean_reward: 0.5,
            })
            .collect();
        let corr = write_curve_csv(&path, &points).unwrap();
        assert!(corr.is_none());
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("# spearman,undefined"));
        assert_eq!(text.lines().count(), 1 + 6 + 1);

        // monotone-increasing pair -> correlation 1
        let points: Vec<CurvePoint> = (0..6)
            .map(|i| CurvePoint {
                iteration: i,
                bleu: i as f64,
                mean_reward: 0.1 * i as f64,
            })
            .collect();
        let corr = write_curve_csv(&path, &points).unwrap().unwrap();
        assert!((corr - 1.0).abs() < 1e-12);

        // fewer than 5 points: correlation omitted, points still written
        let corr = write_curve_csv(&path, &points[..3]).unwrap();
        assert!(corr.is_none());
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1 + 3 + 1);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn report_split_weighting_is_exact() {
        let evals = vec![
            ExampleEval {
                split: Split::Normal,
                hypothesis: toks("sirkolo roja kwadro"),
                reference: toks("sirkolo roja kwadro blua"),
                reward: 0.9,
                clip_analog: 0.8,
            },
            ExampleEval {
                split: Split::Ambiguous,
                hypothesis: toks("trigono verda"),
                reference: toks("trigono verda"),
                reward: 0.4,
                clip_analog: 0.5,
            },
            ExampleEval {
                split: Split::Ambiguous,
                hypothesis: toks("kwadro blua supre-de trigono roja"),
                reference: toks("kwadro blua supre-de trigono verda"),
                reward: 0.6,
                clip_analog: 0.7,
            },
        ];
        let report = build_report(&evals).unwrap();
        assert_eq!(report.overall.examples, 3);
        assert_eq!(report.normal.examples, 1);
        assert_eq!(report.ambiguous.examples, 2);
        let w_normal = report.normal.total_tokens as f64 / report.overall.total_tokens as f64;
        let w_ambig = report.ambiguous.total_tokens as f64 / report.overall.total_tokens as f64;
        let combined =
            w_normal * report.normal.token_accuracy + w_ambig * report.ambiguous.token_accuracy;
        assert!((combined - report.overall.token_accuracy).abs() < 1e-12);
        let csv = report.to_csv();
        assert!(csv.starts_with("split,examples,bleu"));
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn ablation_rows_differ_only_in_ablation_switches() {
        let base = RunConfig::default();
        let full = ablation_row_config(&base, "full");
        for name in ABLATION_ROWS {
            let row = ablation_row_config(&base, name);
            for diff in audit_config_diff(&full, &row) {
                assert!(diff.starts_with("[ablation]"), "unexpected diff {diff}");
            }
        }
        let wo_sd = ablation_row_config(&base, "wo_sd");
        assert!(!wo_sd.ablation.use_diffusion);
        assert!(!wo_sd.ablation.use_real_scenes);
        let w_ri = ablation_row_config(&base, "w_ri");
        assert!(w_ri.ablation.use_real_scenes);
        let wo_vs = ablation_row_config(&base, "wo_vs");
        assert!(!wo_vs.ablation.use_scene_encoder);
        assert!(wo_vs.ablation.use_diffusion);
    }

    #[test]
    fn smoke_ablation_emits_four_rows() {
        let mut base = RunConfig::default();
        let dir = std::env::temp_dir().join("scenemt_eval_ablation_smoke");
        base.apply_overrides(&[
            format!("data.out_dir={}", dir.display()),
            "data.n_train=48".to_string(),
            "data.n_dev=10".to_string(),
            "data.n_test=12".to_string(),
            "diffusion.max_epochs=1".to_string(),
            "diffusion.batch_size=16".to_string(),
            "diffusion.hidden=12".to_string(),
            "diffusion.ctx_dim=6".to_string(),
            "diffusion.timesteps=5".to_string(),
            "ddpo.steps=1".to_string(),
            "ddpo.contexts_per_step=2".to_string(),
            "ddpo.samples_per_context=1".to_string(),
            "translator.d_model=8".to_string(),
            "translator.blocks=1".to_string(),
            "translator.heads=2".to_string(),
            "translator.ff_dim=16".to_string(),
            "translator.epochs=1".to_string(),
            "translator.batch_size=16".to_string(),
            "translator.checkpoint_every=1".to_string(),
            "translator.capture_batches=1".to_string(),
        ])
        .unwrap();
        let table = run_ablation(&base).unwrap();
        assert_eq!(table.rows.len(), 4);
        for row in &table.rows {
            assert!(row.report.is_some(), "row {} absent: {:?}", row.name, row.error);
        }
        let csv_path = crate::config::RunPaths::of(&base).ablation_table();
        let csv = std::fs::read_to_string(csv_path).unwrap();
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.lines().nth(1).unwrap().starts_with("full,ok,"));
        assert!(csv.lines().nth(2).unwrap().starts_with("wo_sd,ok,"));
        std::fs::remove_dir_all(&dir).ok();
    }
}
