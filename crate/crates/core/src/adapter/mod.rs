//! Language-model dependent steps behind one interface.
//!
//! [`StubAdapter`] is a deterministic rule-based implementation that needs
//! no network and is used throughout the tests. [`RemoteAdapter`] talks to a
//! completion endpoint; [`FallbackAdapter`] wraps any adapter and falls back
//! to the stub when the remote side is exhausted, recording each fallback.

mod remote;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex};

use crate::catalog::DatasetCard;
use crate::embed::tokenize;

pub use remote::{
    remote_complete, AttemptRecord, Completion, RemoteClient, RemoteEmbedder, RemoteSettings, Transcript,
};

pub const MAX_ATTEMPTS_CAP: u32 = 5;
const QUERY_DESCRIPTION_TOKENS: usize = 12;
const QUERY_FEATURE_TOKENS: usize = 8;
const HINT_OVERLAP_FLOOR: f64 = 0.5;

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum AdapterError {
    #[error("adapter failed after {attempts} attempt(s): {last}")]
    Exhausted { attempts: u32, last: String },
    #[error("adapter misconfigured: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterKind {
    Stub,
    Remote,
}

impl AdapterKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AdapterKind::Stub => "stub",
            AdapterKind::Remote => "remote",
        }
    }
}

impl std::str::FromStr for AdapterKind {
    type Err = AdapterError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "stub" => Ok(AdapterKind::Stub),
            "remote" => Ok(AdapterKind::Remote),
            other => Err(AdapterError::Config(format!("unknown adapter kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HintPair {
    pub source: String,
    pub target: String,
    /// In `[0, 1]`.
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MappingHints {
    pub pairs: Vec<HintPair>,
    pub class_pairs: Vec<HintPair>,
    pub provenance: AdapterKind,
}

impl MappingHints {
    pub fn empty(provenance: AdapterKind) -> Self {
        Self {
            pairs: Vec::new(),
            class_pairs: Vec::new(),
            provenance,
        }
    }
}

pub trait Adapter: Send + Sync {
    fn kind(&self) -> AdapterKind;
    fn generate_query(&self, card: &DatasetCard) -> Result<String, AdapterError>;
    fn mapping_hints(&self, source: &DatasetCard, target: &DatasetCard) -> Result<MappingHints, AdapterError>;
}

const STOP_WORDS: &[&str] = &[
    "about", "after", "all", "also", "an", "and", "any", "are", "as", "at", "based", "be", "been", "by",
    "can", "contains", "data", "dataset", "datasets", "each", "for", "from", "has", "have", "in",
    "information", "into", "is", "it", "its", "more", "of", "on", "one", "or", "other", "set", "such",
    "than", "that", "the", "their", "these", "this", "those", "to", "used", "using", "was", "were",
    "which", "with",
];

pub fn is_stop_word(token: &str) -> bool {
    STOP_WORDS.binary_search(&token).is_ok()
}

/// Deterministic query: the 12 most frequent description tokens (stop words
/// removed, ties alphabetical), then up to 8 distinct feature-name tokens,
/// then every class label.
pub fn stub_generate_query(card: &DatasetCard) -> String {
    let mut tf: BTreeMap<String, usize> = BTreeMap::new();
    for token in tokenize(&card.description) {
        if !is_stop_word(&token) {
            *tf.entry(token).or_default() += 1;
        }
    }
    let mut terms: Vec<(String, usize)> = tf.into_iter().collect();
    terms.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut parts: Vec<String> = terms
        .into_iter()
        .take(QUERY_DESCRIPTION_TOKENS)
        .map(|(t, _)| t)
        .collect();
    let mut seen = BTreeSet::new();
    let feature_tokens = card
        .feature_names
        .iter()
        .flat_map(|f| tokenize(f))
        .filter(|t| seen.insert(t.clone()))
        .take(QUERY_FEATURE_TOKENS);
    parts.extend(feature_tokens);
    parts.extend(card.class_labels.iter().cloned());
    parts.join(" ")
}

/// Lowercased alphanumeric runs of any length, as a set.
fn name_tokens(name: &str) -> BTreeSet<String> {
    name.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Jaccard overlap of the normalized token sets of two names.
pub fn name_overlap(a: &str, b: &str) -> f64 {
    let (ta, tb) = (name_tokens(a), name_tokens(b));
    let union = ta.union(&tb).count();
    if union == 0 {
        return 0.0;
    }
    ta.intersection(&tb).count() as f64 / union as f64
}

/// Keeps the highest-confidence pairs such that no name appears twice on
/// either side. Ties resolve by source then target name.
pub(crate) fn dedupe_pairs(mut pairs: Vec<HintPair>) -> Vec<HintPair> {
    pairs.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then_with(|| a.source.cmp(&b.source))
            .then_with(|| a.target.cmp(&b.target))
    });
    let mut used_s = BTreeSet::new();
    let mut used_t = BTreeSet::new();
    pairs
        .into_iter()
        .filter(|p| {
            if used_s.contains(&p.source) || used_t.contains(&p.target) {
                return false;
            }
            used_s.insert(p.source.clone());
            used_t.insert(p.target.clone());
            true
        })
        .collect()
}

fn overlap_pairs(source: &[String], target: &[String]) -> Vec<HintPair> {
    let mut pairs = Vec::new();
    for s in source {
        for t in target {
            let confidence = name_overlap(s, t);
            if confidence >= HINT_OVERLAP_FLOOR {
                pairs.push(HintPair {
                    source: s.clone(),
                    target: t.clone(),
                    confidence,
                });
            }
        }
    }
    dedupe_pairs(pairs)
}

/// Pairs feature names (and class labels) whose token overlap is at least 0.5.
pub fn stub_mapping_hints(source: &DatasetCard, target: &DatasetCard) -> MappingHints {
    MappingHints {
        pairs: overlap_pairs(&source.feature_names, &target.feature_names),
        class_pairs: overlap_pairs(&source.class_labels, &target.class_labels),
        provenance: AdapterKind::Stub,
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct StubAdapter;

impl Adapter for StubAdapter {
    fn kind(&self) -> AdapterKind {
        AdapterKind::Stub
    }

    fn generate_query(&self, card: &DatasetCard) -> Result<String, AdapterError> {
        Ok(stub_generate_query(card))
    }

    fn mapping_hints(&self, source: &DatasetCard, target: &DatasetCard) -> Result<MappingHints, AdapterError> {
        Ok(stub_mapping_hints(source, target))
    }
}

fn query_prompt(card: &DatasetCard) -> String {
    format!(
        "Write a short keyword search query (at most 30 words) for finding public tabular datasets \
         that could serve as a transfer-learning source for the dataset below. Reply with the query only.\n\
         Name: {}\nDescription: {}\nFeatures: {}\nClasses: {}\n",
        card.name,
        card.description,
        card.feature_names.join(", "),
        card.class_labels.join(", ")
    )
}

fn hints_prompt(source: &DatasetCard, target: &DatasetCard) -> String {
    format!(
        "Match columns of a source dataset to columns of a target dataset that measure the same quantity. \
         Reply with one pair per line as `source => target (confidence)` with confidence in [0, 1]. \
         Match class labels the same way on lines starting with `class:`.\n\
         Source columns: {}\nTarget columns: {}\nSource classes: {}\nTarget classes: {}\n",
        source.feature_names.join(", "),
        target.feature_names.join(", "),
        source.class_labels.join(", "),
        target.class_labels.join(", ")
    )
}

/// Parses `source => target (confidence)` lines. Lines naming columns that
/// do not exist on the cards are ignored.
pub fn parse_hint_lines(text: &str, source: &DatasetCard, target: &DatasetCard) -> MappingHints {
    let mut pairs = Vec::new();
    let mut class_pairs = Vec::new();
    for line in text.lines() {
        let line = line.trim().trim_start_matches(['-', '*']).trim();
        let (is_class, body) = match line.strip_prefix("class:") {
            Some(rest) => (true, rest.trim()),
            None => (false, line),
        };
        let Some((s, rest)) = body.split_once("=>") else {
            continue;
        };
        let rest = rest.trim();
        let (t, confidence) = match rest.rsplit_once('(') {
            Some((name, conf)) => (
                name.trim(),
                conf.trim_end_matches(')').trim().parse::<f64>().ok(),
            ),
            None => (rest, None),
        };
        let s = s.trim().trim_matches('`');
        let t = t.trim_matches('`');
        let confidence = confidence.filter(|c| c.is_finite()).unwrap_or(0.5).clamp(0.0, 1.0);
        let (src_names, tgt_names, bucket) = if is_class {
            (&source.class_labels, &target.class_labels, &mut class_pairs)
        } else {
            (&source.feature_names, &target.feature_names, &mut pairs)
        };
        if src_names.iter().any(|n| n == s) && tgt_names.iter().any(|n| n == t) {
            bucket.push(HintPair {
                source: s.to_string(),
                target: t.to_string(),
                confidence,
            });
        }
    }
    MappingHints {
        pairs: dedupe_pairs(pairs),
        class_pairs: dedupe_pairs(class_pairs),
        provenance: AdapterKind::Remote,
    }
}

pub struct RemoteAdapter {
    client: RemoteClient,
}

impl RemoteAdapter {
    pub fn new(client: RemoteClient) -> Self {
        Self { client }
    }
}

impl Adapter for RemoteAdapter {
    fn kind(&self) -> AdapterKind {
        AdapterKind::Remote
    }

    fn generate_query(&self, card: &DatasetCard) -> Result<String, AdapterError> {
        let completion = self.client.complete(&query_prompt(card))?;
        let query = completion.text.split_whitespace().collect::<Vec<_>>().join(" ");
        if query.is_empty() {
            return Err(AdapterError::Exhausted {
                attempts: completion.attempts,
                last: "empty completion".into(),
            });
        }
        Ok(query)
    }

    fn mapping_hints(&self, source: &DatasetCard, target: &DatasetCard) -> Result<MappingHints, AdapterError> {
        let completion = self.client.complete(&hints_prompt(source, target))?;
        Ok(parse_hint_lines(&completion.text, source, target))
    }
}

/// Wraps an adapter; on failure answers with the stub and records the event.
pub struct FallbackAdapter {
    inner: Box<dyn Adapter>,
    events: Mutex<Vec<String>>,
    transcript: Option<Arc<Transcript>>,
}

impl FallbackAdapter {
    pub fn new(inner: Box<dyn Adapter>, transcript: Option<Arc<Transcript>>) -> Self {
        Self {
            inner,
            events: Mutex::new(Vec::new()),
            transcript,
        }
    }

    pub fn fallbacks(&self) -> Vec<String> {
        let mut events = self.events.lock().expect("fallback log poisoned").clone();
        events.sort();
        events
    }

    fn note(&self, what: String) {
        log::warn!("{what}");
        self.events.lock().expect("fallback log poisoned").push(what);
    }

    fn record(&self, label: &str, text: &str) {
        if let Some(t) = &self.transcript {
            t.append(label, text);
        }
    }
}

impl Adapter for FallbackAdapter {
    fn kind(&self) -> AdapterKind {
        self.inner.kind()
    }

    fn generate_query(&self, card: &DatasetCard) -> Result<String, AdapterError> {
        let query = match self.inner.generate_query(card) {
            Ok(q) => q,
            Err(e) => {
                self.note(format!("query for {}: {e}; used stub", card.id));
                stub_generate_query(card)
            }
        };
        self.record(&format!("query target={}", card.id), &query);
        Ok(query)
    }

    fn mapping_hints(&self, source: &DatasetCard, target: &DatasetCard) -> Result<MappingHints, AdapterError> {
        let hints = match self.inner.mapping_hints(source, target) {
            Ok(h) => h,
            Err(e) => {
                self.note(format!("hints for {} -> {}: {e}; used stub", source.id, target.id));
                stub_mapping_hints(source, target)
            }
        };
        let mut text = String::new();
        for p in &hints.pairs {
            text.push_str(&format!("{} => {} ({})\n", p.source, p.target, p.confidence));
        }
        for p in &hints.class_pairs {
            text.push_str(&format!("class: {} => {} ({})\n", p.source, p.target, p.confidence));
        }
        self.record(
            &format!("hints source={} target={} provenance={}", source.id, target.id, hints.provenance.as_str()),
            &text,
        );
        Ok(hints)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    pub(crate) fn card(description: &str, features: &[&str], classes: &[&str]) -> DatasetCard {
        DatasetCard {
            id: "c".into(),
            name: "C".into(),
            description: description.into(),
            feature_names: features.iter().map(|s| s.to_string()).collect(),
            feature_descriptions: BTreeMap::new(),
            target_column: "target".into(),
            class_labels: classes.iter().map(|s| s.to_string()).collect(),
            categorical: vec![],
            numeric: vec![],
            source_path: PathBuf::from("x.csv"),
        }
    }

    #[test]
    fn stop_words_sorted_for_binary_search() {
        assert!(STOP_WORDS.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn query_starts_with_description_content() {
        let c = card("heart disease prediction dataset", &["age"], &["no", "yes"]);
        // tf all 1 -> alphabetical; "dataset" is a stop word
        assert_eq!(stub_generate_query(&c), "disease heart prediction age no yes");
    }

    #[test]
    fn query_falls_back_to_features() {
        let c = card("", &["age", "sex"], &["absent", "present"]);
        assert_eq!(stub_generate_query(&c), "age sex absent present");
    }

    #[test]
    fn query_orders_by_frequency_then_alpha() {
        let c = card("churn churn churn customer customer telecom billing", &[], &["a", "b"]);
        assert_eq!(stub_generate_query(&c), "churn customer billing telecom a b");
    }

    #[test]
    fn tcc_style_card_matches_hand_rule() {
        // 21 features, 2 classes. Hand application: description tokens
        // minus stop words, tf-sorted; first 8 distinct feature tokens.
        let features = [
            "gender", "SeniorCitizen", "Partner", "Dependents", "tenure", "PhoneService", "MultipleLines",
            "InternetService", "OnlineSecurity", "OnlineBackup", "DeviceProtection", "TechSupport",
            "StreamingTV", "StreamingMovies", "Contract", "PaperlessBilling", "PaymentMethod",
            "MonthlyCharges", "TotalCharges", "customerID", "region",
        ];
        assert_eq!(features.len(), 21);
        let c = card(
            "Telco customer churn: customer account information and services used by each customer",
            &features,
            &["No", "Yes"],
        );
        let q = stub_generate_query(&c);
        let expected = "customer account churn services telco \
                        gender seniorcitizen partner dependents tenure phoneservice multiplelines internetservice \
                        No Yes";
        let mut got: Vec<&str> = q.split(' ').collect();
        let mut want: Vec<&str> = expected.split_whitespace().collect();
        assert_eq!(got[..5], want[..5]);
        got.sort_unstable();
        want.sort_unstable();
        assert_eq!(got, want);
    }

    #[test]
    fn query_is_capped() {
        let desc = (0..30).map(|i| format!("word{i:02}")).collect::<Vec<_>>().join(" ");
        let feats: Vec<String> = (0..20).map(|i| format!("feat{i:02}")).collect();
        let feats: Vec<&str> = feats.iter().map(String::as_str).collect();
        let c = card(&desc, &feats, &["x", "y"]);
        let q = stub_generate_query(&c);
        assert_eq!(q.split(' ').count(), 12 + 8 + 2);
    }

    #[test]
    fn hint_overlap_rules() {
        assert!((name_overlap("blood_pressure", "resting blood pressure") - 2.0 / 3.0).abs() < 1e-12);
        let a = card("", &["age", "chol"], &["no", "yes"]);
        let h = stub_mapping_hints(&a, &a);
        assert_eq!(h.pairs.len(), 2);
        assert!(h.pairs.iter().all(|p| p.confidence == 1.0 && p.source == p.target));
        let b = card("", &["tenure", "charges"], &["stay", "leave"]);
        let h = stub_mapping_hints(&a, &b);
        assert!(h.pairs.is_empty() && h.class_pairs.is_empty());
    }

    #[test]
    fn hints_never_repeat_a_name() {
        let a = card("", &["blood pressure", "blood pressure max"], &["no", "yes"]);
        let b = card("", &["resting blood pressure", "blood pressure"], &["no", "yes"]);
        let h = stub_mapping_hints(&a, &b);
        let s: BTreeSet<_> = h.pairs.iter().map(|p| &p.source).collect();
        let t: BTreeSet<_> = h.pairs.iter().map(|p| &p.target).collect();
        assert_eq!(s.len(), h.pairs.len());
        assert_eq!(t.len(), h.pairs.len());
        assert!(h.pairs.iter().any(|p| p.source == "blood pressure" && p.target == "blood pressure"));
    }

    #[test]
    fn remote_hint_parsing_rejects_unknown_columns() {
        let s = card("", &["bp", "age"], &["malignant", "benign"]);
        let t = card("", &["pressure", "years"], &["M", "B"]);
        let text = "bp => pressure (0.9)\n- age => years\nghost => years (1.0)\nclass: malignant => M (0.8)\nclass: benign => X (1)\nnonsense line\n";
        let h = parse_hint_lines(text, &s, &t);
        assert_eq!(h.pairs.len(), 2);
        assert_eq!(h.pairs[0].source, "bp");
        assert_eq!(h.pairs[1].confidence, 0.5);
        assert_eq!(h.class_pairs.len(), 1);
        assert_eq!(h.provenance, AdapterKind::Remote);
    }

    struct Failing;
    impl Adapter for Failing {
        fn kind(&self) -> AdapterKind {
            AdapterKind::Remote
        }
        fn generate_query(&self, _: &DatasetCard) -> Result<String, AdapterError> {
            Err(AdapterError::Exhausted { attempts: 2, last: "down".into() })
        }
        fn mapping_hints(&self, _: &DatasetCard, _: &DatasetCard) -> Result<MappingHints, AdapterError> {
            Err(AdapterError::Exhausted { attempts: 2, last: "down".into() })
        }
    }

    #[test]
    fn fallback_uses_stub_and_records() {
        let c = card("heart disease", &["age"], &["no", "yes"]);
        let f = FallbackAdapter::new(Box::new(Failing), None);
        assert_eq!(f.generate_query(&c).unwrap(), stub_generate_query(&c));
        assert_eq!(f.mapping_hints(&c, &c).unwrap(), stub_mapping_hints(&c, &c));
        assert_eq!(f.fallbacks().len(), 2);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(100))]
            #[test]
            fn stub_outputs_are_pure(desc in "[a-z ]{0,60}", feats in proptest::collection::vec("[a-z_]{1,12}", 0..10), classes in proptest::collection::vec("[a-z]{1,6}", 2..4)) {
                let f: Vec<&str> = feats.iter().map(String::as_str).collect();
                let cl: Vec<&str> = classes.iter().map(String::as_str).collect();
                let c = card(&desc, &f, &cl);
                prop_assert_eq!(stub_generate_query(&c), stub_generate_query(&c));
                prop_assert_eq!(stub_mapping_hints(&c, &c), stub_mapping_hints(&c, &c));
                if !feats.iter().all(|f| tokenize(f).is_empty()) {
                    prop_assert!(!stub_generate_query(&c).is_empty());
                }
            }
        }
    }
}
