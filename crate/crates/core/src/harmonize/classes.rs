//! Reconciling the source label space with the target label space.

use ndarray::Array2;

use super::{max_weight_assignment, HarmonizeError};
use crate::adapter::MappingHints;
use crate::embed::{embed_text, EmbeddingVector};

const LABEL_EMBEDDING_DIMENSION: usize = 1024;

/// How a source class got its target class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassMatch {
    Hint,
    Exact,
    Embedding,
    Prevalence,
    /// Extra source class attached to its nearest target class.
    Surplus,
    /// Read from a mapping file without a rule.
    Manual,
}

impl ClassMatch {
    pub fn as_str(self) -> &'static str {
        match self {
            ClassMatch::Hint => "hint",
            ClassMatch::Exact => "exact",
            ClassMatch::Embedding => "embedding",
            ClassMatch::Prevalence => "prevalence",
            ClassMatch::Surplus => "surplus",
            ClassMatch::Manual => "manual",
        }
    }
}

impl std::str::FromStr for ClassMatch {
    type Err = HarmonizeError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "hint" => ClassMatch::Hint,
            "exact" => ClassMatch::Exact,
            "embedding" => ClassMatch::Embedding,
            "prevalence" => ClassMatch::Prevalence,
            "surplus" => ClassMatch::Surplus,
            "manual" => ClassMatch::Manual,
            other => return Err(HarmonizeError::InvalidMapping(format!("unknown class rule `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassWarning {
    ClassCountMismatch { source: usize, target: usize },
}

impl std::fmt::Display for ClassWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ClassWarning::ClassCountMismatch { source, target } => {
                write!(f, "class count mismatch: {source} source vs {target} target classes")
            }
        }
    }
}

/// Total map from source class index to target class index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMap {
    pub map: Vec<usize>,
    pub rules: Vec<ClassMatch>,
    pub source_labels: Vec<String>,
    pub target_labels: Vec<String>,
    pub warning: Option<ClassWarning>,
}

impl ClassMap {
    pub fn new(map: Vec<usize>, rules: Vec<ClassMatch>, source_labels: Vec<String>, target_labels: Vec<String>) -> Self {
        let warning = (source_labels.len() != target_labels.len()).then_some(ClassWarning::ClassCountMismatch {
            source: source_labels.len(),
            target: target_labels.len(),
        });
        Self {
            map,
            rules,
            source_labels,
            target_labels,
            warning,
        }
    }

    pub fn apply(&self, label: usize) -> usize {
        self.map[label]
    }
}

/// Maps every source class onto a target class. Rules apply in order:
/// adapter hints, exact label equality, label-embedding similarity
/// (positive cosine only), prevalence rank; any source classes left over
/// attach to their most similar target class (ties to the more prevalent).
pub fn class_align(
    source_labels: &[String],
    source_counts: &[usize],
    target_labels: &[String],
    target_counts: &[usize],
    hints: &MappingHints,
) -> ClassMap {
    let (ns, nt) = (source_labels.len(), target_labels.len());
    let mut map: Vec<Option<(usize, ClassMatch)>> = vec![None; ns];
    let mut t_used = vec![false; nt];
    fn assign(map: &mut [Option<(usize, ClassMatch)>], t_used: &mut [bool], s: usize, t: usize, rule: ClassMatch) {
        map[s] = Some((t, rule));
        t_used[t] = true;
    }

    for h in &hints.class_pairs {
        let s = source_labels.iter().position(|l| *l == h.source);
        let t = target_labels.iter().position(|l| *l == h.target);
        if let (Some(s), Some(t)) = (s, t) {
            if map[s].is_none() && !t_used[t] {
                assign(&mut map, &mut t_used, s, t, ClassMatch::Hint);
            }
        }
    }
    for s in 0..ns {
        if map[s].is_some() {
            continue;
        }
        if let Some(t) = (0..nt).find(|&t| !t_used[t] && target_labels[t] == source_labels[s]) {
            assign(&mut map, &mut t_used, s, t, ClassMatch::Exact);
        }
    }

    let embed = |l: &String| embed_text(l, LABEL_EMBEDDING_DIMENSION);
    let se: Vec<EmbeddingVector> = source_labels.iter().map(embed).collect();
    let te: Vec<EmbeddingVector> = target_labels.iter().map(embed).collect();
    let free_s: Vec<usize> = (0..ns).filter(|&s| map[s].is_none()).collect();
    let free_t: Vec<usize> = (0..nt).filter(|&t| !t_used[t]).collect();
    if !free_s.is_empty() && !free_t.is_empty() {
        let sim = Array2::from_shape_fn((free_s.len(), free_t.len()), |(i, j)| se[free_s[i]].cosine(&te[free_t[j]]));
        for (i, j) in max_weight_assignment(&sim) {
            if sim[[i, j]] > 0.0 {
                assign(&mut map, &mut t_used, free_s[i], free_t[j], ClassMatch::Embedding);
            }
        }
    }

    let by_prevalence = |counts: &[usize], pool: Vec<usize>| {
        let mut v = pool;
        v.sort_by(|&a, &b| {
            let ca = counts.get(a).copied().unwrap_or(0);
            let cb = counts.get(b).copied().unwrap_or(0);
            cb.cmp(&ca).then(a.cmp(&b))
        });
        v
    };
    let free_s = by_prevalence(source_counts, (0..ns).filter(|&s| map[s].is_none()).collect());
    let free_t = by_prevalence(target_counts, (0..nt).filter(|&t| !t_used[t]).collect());
    for (&s, &t) in free_s.iter().zip(&free_t) {
        assign(&mut map, &mut t_used, s, t, ClassMatch::Prevalence);
    }

    let target_rank = by_prevalence(target_counts, (0..nt).collect());
    for s in 0..ns {
        if map[s].is_some() || nt == 0 {
            continue;
        }
        let mut best = target_rank[0];
        let mut best_sim = se[s].cosine(&te[best]);
        for &t in &target_rank[1..] {
            let c = se[s].cosine(&te[t]);
            if c > best_sim {
                best = t;
                best_sim = c;
            }
        }
        map[s] = Some((best, ClassMatch::Surplus));
    }

    let (map, rules) = map.into_iter().map(|m| m.expect("every source class assigned")).unzip();
    ClassMap::new(map, rules, source_labels.to_vec(), target_labels.to_vec())
}
