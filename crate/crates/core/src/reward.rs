//! Scene-graph consistency reward.
//!
//! A language scene graph (LSG, parsed from the source sentence) is scored
//! against a visual scene graph (VSG, extracted from a scene): every LSG
//! triple is matched to its best VSG triple by averaged symbol similarity,
//! and the reward is the mean matching degree over LSG triples, bounded to
//! `[0, 1]`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("unknown symbol {0:?}")]
    UnknownSymbol(String),
    #[error("reward is undefined for an empty language scene graph")]
    EmptyLsg,
    #[error("lexicon entry ({0}, {1}) = {2} outside [0, 1]")]
    ValueOutOfRange(String, String, f64),
    #[error("lexicon diagonal ({0}, {0}) must be 1, got {1}")]
    BadDiagonal(String, f64),
    #[error("lexicon line {0}: expected `symbol_a symbol_b value`")]
    BadLexiconLine(usize),
    #[error("graph file line {0}: expected {{\"triples\": [[h, r, t], ..]}}")]
    BadGraphLine(usize),
    #[error("lexicon io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, RewardError>;

/// The closed symbol universe: entity classes, colors, relation names.
pub const SYMBOLS: &[&str] = &[
    "circle", "square", "triangle", "red", "green", "blue", "left-of", "above", "has-color",
    "exists",
];

/// Relation-category symbols (used by the shipped soft lexicon).
pub const RELATION_SYMBOLS: &[&str] = &["left-of", "above", "has-color", "exists"];

/// One `(head, relation, tail)` fact.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triple {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl Triple {
    pub fn new(head: impl Into<String>, relation: impl Into<String>, tail: impl Into<String>) -> Self {
        Triple {
            head: head.into(),
            relation: relation.into(),
            tail: tail.into(),
        }
    }
}

impl fmt::Display for Triple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.head, self.relation, self.tail)
    }
}

/// A set of triples. Kept sorted and deduplicated so graph equality and
/// iteration order are canonical.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SceneGraph {
    triples: Vec<Triple>,
}

impl SceneGraph {
    pub fn new() -> Self {
        SceneGraph { triples: Vec::new() }
    }

    pub fn from_triples(triples: impl IntoIterator<Item = Triple>) -> Self {
        let set: BTreeSet<Triple> = triples.into_iter().collect();
        SceneGraph {
            triples: set.into_iter().collect(),
        }
    }

    pub fn insert(&mut self, t: Triple) {
        if let Err(pos) = self.triples.binary_search(&t) {
            self.triples.insert(pos, t);
        }
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Triple> {
        self.triples.iter()
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.triples.binary_search(t).is_ok()
    }

    /// True when every triple of `self` also appears in `other`.
    pub fn is_subset_of(&self, other: &SceneGraph) -> bool {
        self.triples.iter().all(|t| other.contains(t))
    }
}

/// Symmetric symbol-similarity table over the closed symbol set.
/// Diagonal is 1, everything unlisted is 0, all entries live in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct SymbolLexicon {
    entries: BTreeMap<(String, String), f64>,
    symbols: BTreeSet<String>,
}

impl SymbolLexicon {
    /// Identity matrix: 1 on the diagonal, 0 elsewhere. The default.
    pub fn strict() -> Self {
        SymbolLexicon {
            entries: BTreeMap::new(),
            symbols: SYMBOLS.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Identity plus 0.2 partial credit between distinct relation symbols.
    pub fn soft() -> Self {
        let mut lex = SymbolLexicon::strict();
        for (i, a) in RELATION_SYMBOLS.iter().enumerate() {
            for b in &RELATION_SYMBOLS[i + 1..] {
                lex.set_pair(a, b, 0.2)
                    .expect("shipped soft lexicon entries are valid");
            }
        }
        lex
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "strict" => Some(SymbolLexicon::strict()),
            "soft" => Some(SymbolLexicon::soft()),
            _ => None,
        }
    }

    fn set_pair(&mut self, a: &str, b: &str, value: f64) -> Result<()> {
        if !self.symbols.contains(a) {
            return Err(RewardError::UnknownSymbol(a.to_string()));
        }
        if !self.symbols.contains(b) {
            return Err(RewardError::UnknownSymbol(b.to_string()));
        }
        if !(0.0..=1.0).contains(&value) {
            return Err(RewardError::ValueOutOfRange(
                a.to_string(),
                b.to_string(),
                value,
            ));
        }
        if a == b && value != 1.0 {
            return Err(RewardError::BadDiagonal(a.to_string(), value));
        }
        if a != b {
            self.entries.insert((a.to_string(), b.to_string()), value);
            self.entries.insert((b.to_string(), a.to_string()), value);
        }
        Ok(())
    }

    /// Load extra entries from a text table, one `symbol_a symbol_b value`
    /// per line; `#` starts a comment. Starts from the strict lexicon.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lex = SymbolLexicon::strict();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (a, b, v) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), Some(v), None) => (a, b, v),
                _ => return Err(RewardError::BadLexiconLine(lineno + 1)),
            };
            let value: f64 = v
                .parse()
                .map_err(|_| RewardError::BadLexiconLine(lineno + 1))?;
            lex.set_pair(a, b, value)?;
        }
        Ok(lex)
    }

    fn check(&self, symbol: &str) -> Result<()> {
        if self.symbols.contains(symbol) {
            Ok(())
        } else {
            Err(RewardError::UnknownSymbol(symbol.to_string()))
        }
    }
}

/// Read scene graphs from JSONL: one `{"triples": [["h","r","t"], ..]}`
/// object per line.
pub fn read_graphs_jsonl(path: &Path) -> Result<Vec<SceneGraph>> {
    #[derive(serde::Deserialize)]
    struct GraphRecord {
        triples: Vec<(String, String, String)>,
    }
    let text = std::fs::read_to_string(path)?;
    let mut graphs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: GraphRecord = serde_json::from_str(line)
            .map_err(|_| RewardError::BadGraphLine(lineno + 1))?;
        graphs.push(SceneGraph::from_triples(
            record
                .triples
                .into_iter()
                .map(|(h, r, t)| Triple::new(h, r, t)),
        ));
    }
    Ok(graphs)
}

/// Drop an entity-instance suffix: `circle#2` compares as `circle`.
fn strip_instance(symbol: &str) -> &str {
    match symbol.find('#') {
        Some(pos) => &symbol[..pos],
        None => symbol,
    }
}

/// Similarity of two symbols under the lexicon, in `[0, 1]`.
/// Instance suffixes are stripped before lookup.
pub fn sim_symbols(a: &str, b: &str, lex: &SymbolLexicon) -> Result<f64> {
    let a = strip_instance(a);
    let b = strip_instance(b);
    lex.check(a)?;
    lex.check(b)?;
    if a == b {
        Ok(1.0)
    } else {
        Ok(lex
            .entries
            .get(&(a.to_string(), b.to_string()))
            .copied()
            .unwrap_or(0.0))
    }
}

/// Triple similarity: the mean of head, relation and tail similarities.
pub fn sim_triple(l: &Triple, v: &Triple, lex: &SymbolLexicon) -> Result<f64> {
    let h = sim_symbols(&l.head, &v.head, lex)?;
    let r = sim_symbols(&l.relation, &v.relation, lex)?;
    let t = sim_symbols(&l.tail, &v.tail, lex)?;
    Ok((h + r + t) / 3.0)
}

/// Matching degree of one LSG triple: its best similarity over all VSG
/// triples; 0 when the VSG is empty.
pub fn score_triple(l: &Triple, vsg: &SceneGraph, lex: &SymbolLexicon) -> Result<f64> {
    let mut best: f64 = 0.0;
    for v in vsg.iter() {
        best = best.max(sim_triple(l, v, lex)?);
    }
    Ok(best)
}

/// Consistency reward: mean matching degree over all LSG triples.
/// An empty LSG is a contract violation upstream and is rejected.
pub fn reward(lsg: &SceneGraph, vsg: &SceneGraph, lex: &SymbolLexicon) -> Result<f64> {
    if lsg.is_empty() {
        return Err(RewardError::EmptyLsg);
    }
    let mut total = 0.0;
    for l in lsg.iter() {
        total += score_triple(l, vsg, lex)?;
    }
    Ok(total / lsg.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(h: &str, r: &str, tl: &str) -> Triple {
        Triple::new(h, r, tl)
    }

    #[test]
    fn identity_symbol_similarity() {
        let lex = SymbolLexicon::strict();
        assert_eq!(sim_symbols("red", "red", &lex).unwrap(), 1.0);
        assert_eq!(sim_symbols("red", "blue", &lex).unwrap(), 0.0);
    }

    #[test]
    fn soft_lexicon_gives_partial_relation_credit() {
        let lex = SymbolLexicon::soft();
        assert_eq!(sim_symbols("left-of", "above", &lex).unwrap(), 0.2);
        assert_eq!(sim_symbols("above", "left-of", &lex).unwrap(), 0.2);
        assert_eq!(sim_symbols("red", "left-of", &lex).unwrap(), 0.0);
    }

    #[test]
    fn soft_lexicon_table_is_symmetric_and_bounded() {
        let lex = SymbolLexicon::soft();
        for a in SYMBOLS {
            for b in SYMBOLS {
                let ab = sim_symbols(a, b, &lex).unwrap();
                let ba = sim_symbols(b, a, &lex).unwrap();
                assert_eq!(ab, ba, "asymmetry at ({a}, {b})");
                assert!((0.0..=1.0).contains(&ab));
                if a == b {
                    assert_eq!(ab, 1.0);
                }
            }
        }
    }

    #[test]
    fn unknown_symbol_is_rejected_by_name() {
        let lex = SymbolLexicon::strict();
        let err = sim_symbols("dragon", "red", &lex).unwrap_err();
        assert!(err.to_string().contains("dragon"));
    }

    #[test]
    fn instance_suffixes_are_stripped() {
        let lex = SymbolLexicon::strict();
        assert_eq!(sim_symbols("circle#1", "circle#2", &lex).unwrap(), 1.0);
    }

    #[test]
    fn triple_similarity_cases() {
        let lex = SymbolLexicon::strict();
        let a = t("circle", "left-of", "square");
        assert_eq!(sim_triple(&a, &a, &lex).unwrap(), 1.0);
        let b = t("circle", "above", "square");
        assert!((sim_triple(&a, &b, &lex).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let c = t("red", "has-color", "green");
        let d = t("blue", "exists", "triangle");
        assert_eq!(sim_triple(&c, &d, &lex).unwrap(), 0.0);
    }

    #[test]
    fn score_triple_cases() {
        let lex = SymbolLexicon::strict();
        let l = t("circle", "left-of", "square");
        let exact = SceneGraph::from_triples([l.clone()]);
        assert_eq!(score_triple(&l, &exact, &lex).unwrap(), 1.0);
        assert_eq!(score_triple(&l, &SceneGraph::new(), &lex).unwrap(), 0.0);
        let with_junk = SceneGraph::from_triples([l.clone(), t("red", "exists", "red")]);
        assert_eq!(score_triple(&l, &with_junk, &lex).unwrap(), 1.0);
    }

    #[test]
    fn reward_cases() {
        let lex = SymbolLexicon::strict();
        let g = SceneGraph::from_triples([
            t("circle", "has-color", "red"),
            t("circle", "left-of", "square"),
        ]);
        assert_eq!(reward(&g, &g, &lex).unwrap(), 1.0);

        // one triple matched at 1, the other at 2/3 -> 5/6
        let lsg = SceneGraph::from_triples([
            t("circle", "left-of", "square"),
            t("circle", "above", "triangle"),
        ]);
        let vsg = SceneGraph::from_triples([
            t("circle", "left-of", "square"),
            t("circle", "left-of", "triangle"),
        ]);
        assert!((reward(&lsg, &vsg, &lex).unwrap() - 5.0 / 6.0).abs() < 1e-15);

        let disjoint = SceneGraph::from_triples([t("red", "exists", "red")]);
        let three = SceneGraph::from_triples([
            t("circle", "has-color", "green"),
            t("square", "has-color", "blue"),
            t("circle", "above", "square"),
        ]);
        assert_eq!(reward(&three, &disjoint, &lex).unwrap(), 0.0);
    }

    #[test]
    fn empty_lsg_is_rejected() {
        let lex = SymbolLexicon::strict();
        let vsg = SceneGraph::from_triples([t("circle", "exists", "circle")]);
        assert!(matches!(
            reward(&SceneGraph::new(), &vsg, &lex),
            Err(RewardError::EmptyLsg)
        ));
    }

    /// Brute-force reference: enumerate every (l, v) pair explicitly and
    /// aggregate with plain loops. Kept textually independent of the
    /// implementation path above.
    pub(crate) fn reward_brute_force(
        lsg: &[Triple],
        vsg: &[Triple],
        lex: &SymbolLexicon,
    ) -> f64 {
        let sym = |a: &str, b: &str| -> f64 {
            let cut = |s: &str| s.split('#').next().unwrap_or(s).to_string();
            let (a, b) = (cut(a), cut(b));
            if a == b {
                1.0
            } else {
                *lex.entries.get(&(a, b)).unwrap_or(&0.0)
            }
        };
        let mut acc = 0.0;
        for l in lsg {
            let mut best = 0.0_f64;
            for v in vsg {
                let s = (sym(&l.head, &v.head)
                    + sym(&l.relation, &v.relation)
                    + sym(&l.tail, &v.tail))
                    / 3.0;
                if s > best {
                    best = s;
                }
            }
            acc += best;
        }
        acc / lsg.len() as f64
    }

    fn random_graph(rng: &mut ChaCha8Rng, max_len: usize) -> SceneGraph {
        let n = rng.gen_range(1..=max_len);
        let sym = |rng: &mut ChaCha8Rng| SYMBOLS[rng.gen_range(0..6)].to_string();
        SceneGraph::from_triples((0..n).map(|_| Triple {
            head: sym(rng),
            relation: sym(rng),
            tail: sym(rng),
        }))
    }

    #[test]
    fn matches_brute_force_on_random_graphs() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for lex in [SymbolLexicon::strict(), SymbolLexicon::soft()] {
            for _ in 0..500 {
                let lsg = random_graph(&mut rng, 5);
                let vsg = random_graph(&mut rng, 5);
                let fast = reward(&lsg, &vsg, &lex).unwrap();
                let lsg_v: Vec<Triple> = lsg.iter().cloned().collect();
                let vsg_v: Vec<Triple> = vsg.iter().cloned().collect();
                let slow = reward_brute_force(&lsg_v, &vsg_v, &lex);
                assert_eq!(fast, slow);
            }
        }
    }

    #[test]
    fn monotone_under_vsg_augmentation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let lex = SymbolLexicon::soft();
        for _ in 0..300 {
            let lsg = random_graph(&mut rng, 4);
            let vsg = random_graph(&mut rng, 4);
            let before = reward(&lsg, &vsg, &lex).unwrap();
            let extra = random_graph(&mut rng, 1);
            let mut grown = vsg.clone();
            for t in extra.iter() {
                grown.insert(t.clone());
            }
            let after = reward(&lsg, &grown, &lex).unwrap();
            assert!(after >= before);
        }
    }

    #[test]
    fn permutation_invariance_by_construction() {
        let lex = SymbolLexicon::strict();
        let forward = SceneGraph::from_triples([
            t("circle", "has-color", "red"),
            t("square", "has-color", "blue"),
        ]);
        let reversed = SceneGraph::from_triples([
            t("square", "has-color", "blue"),
            t("circle", "has-color", "red"),
        ]);
        assert_eq!(forward, reversed);
        assert_eq!(
            reward(&forward, &reversed, &lex).unwrap(),
            reward(&reversed, &forward, &lex).unwrap()
        );
    }

    #[test]
    fn lexicon_file_roundtrip() {
        let dir = std::env::temp_dir().join("scenemt_lexicon_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("soft.lex");
        std::fs::write(&path, "# custom\nleft-of above 0.5\n").unwrap();
        let lex = SymbolLexicon::from_file(&path).unwrap();
        assert_eq!(sim_symbols("left-of", "above", &lex).unwrap(), 0.5);
        assert_eq!(sim_symbols("left-of", "left-of", &lex).unwrap(), 1.0);
        std::fs::write(&path, "left-of dragon 0.5\n").unwrap();
        assert!(SymbolLexicon::from_file(&path).is_err());
        std::fs::write(&path, "left-of above 1.5\n").unwrap();
        assert!(SymbolLexicon::from_file(&path).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
