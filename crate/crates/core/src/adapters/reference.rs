//! Deterministic reference adapters.
//!
//! These close every oracle seam with a pure function, so the whole engine
//! runs and tests offline. They are intentionally simple: hashed bag-of-words
//! embeddings, token-overlap relevance, multiset-intersection induction,
//! token-halving reshapes, the rule attribution table, and a synthetic-world
//! executor.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use crate::adapters::{
    AdapterError, AdapterSuite, Attributor, Embedder, Inductor, Reshaper, Verifier,
};
use crate::context::ActivatedSubgraph;
use crate::embedding::{self, EmbeddingVector, DEFAULT_DIMENSION};
use crate::refinement::{default_attribution, EditDecision, Feedback, ReshapeDirection};
use crate::sim::{generate_world, SimExecutor, WorldConfig};

/// Feature-hashed bag-of-words embedder over the engine's shared tokenizer.
#[derive(Debug, Clone, Copy)]
pub struct HashedEmbedder {
    dimension: usize,
}

impl HashedEmbedder {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        HashedEmbedder { dimension }
    }
}

impl Default for HashedEmbedder {
    fn default() -> Self {
        HashedEmbedder::new(DEFAULT_DIMENSION)
    }
}

impl Embedder for HashedEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, AdapterError> {
        Ok(embedding::embed(text, self.dimension))
    }
}

/// Relevance = Jaccard similarity of token sets against a fixed threshold.
#[derive(Debug, Clone, Copy)]
pub struct TokenOverlapVerifier {
    pub threshold: f64,
}

impl Default for TokenOverlapVerifier {
    fn default() -> Self {
        TokenOverlapVerifier { threshold: 0.1 }
    }
}

impl Verifier for TokenOverlapVerifier {
    fn verify(&self, query: &str, content: &str) -> Result<bool, AdapterError> {
        let q: BTreeSet<String> = embedding::tokenize(query).into_iter().collect();
        let c: BTreeSet<String> = embedding::tokenize(content).into_iter().collect();
        let union = q.union(&c).count();
        if union == 0 {
            return Ok(false);
        }
        let inter = q.intersection(&c).count();
        Ok(inter as f64 / union as f64 >= self.threshold)
    }
}

/// Induction by order-preserved multiset intersection; rewriting by dropping
/// the latest occurrence of the least-supported token.
#[derive(Debug, Clone, Copy, Default)]
pub struct IntersectionInductor;

impl Inductor for IntersectionInductor {
    /// The shared pattern across members: walk the first text's tokens in
    /// order, keeping each occurrence that every other member can still
    /// supply (multiset semantics, so repeats survive only as often as the
    /// scarcest member repeats them).
    fn induce(&self, member_texts: &[String]) -> Result<String, AdapterError> {
        let Some((first, rest)) = member_texts.split_first() else {
            return Ok(String::new());
        };
        let mut budgets: Vec<BTreeMap<String, usize>> = rest
            .iter()
            .map(|t| {
                let mut counts = BTreeMap::new();
                for tok in embedding::tokenize(t) {
                    *counts.entry(tok).or_insert(0usize) += 1;
                }
                counts
            })
            .collect();
        let mut kept = Vec::new();
        for tok in embedding::tokenize(first) {
            let available = budgets.iter().all(|m| m.get(&tok).copied().unwrap_or(0) > 0);
            if available {
                for m in &mut budgets {
                    *m.get_mut(&tok).expect("availability was just checked") -= 1;
                }
                kept.push(tok);
            }
        }
        Ok(kept.join(" "))
    }

    /// Drops exactly one token per call: the latest occurrence among the
    /// positions whose token appears in the fewest successful member texts.
    /// Skills already at two tokens are returned unchanged, which reads as
    /// convergence upstream.
    fn rewrite(
        &self,
        skill: &str,
        successful_member_texts: &[String],
    ) -> Result<String, AdapterError> {
        let tokens = embedding::tokenize(skill);
        if tokens.len() <= 2 {
            return Ok(skill.to_string());
        }
        let member_sets: Vec<BTreeSet<String>> = successful_member_texts
            .iter()
            .map(|t| embedding::tokenize(t).into_iter().collect())
            .collect();
        let support =
            |tok: &str| member_sets.iter().filter(|s| s.contains(tok)).count();
        let min_support =
            tokens.iter().map(|t| support(t)).min().expect("token list is non-empty");
        let drop_idx = tokens
            .iter()
            .rposition(|t| support(t) == min_support)
            .expect("some position attains the minimum");
        let kept: Vec<&str> = tokens
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != drop_idx)
            .map(|(_, t)| t.as_str())
            .collect();
        Ok(kept.join(" "))
    }
}

/// Keeps the leading half of the words when abstracting and the trailing
/// half when refining (ceil division, so a single word survives either way).
#[derive(Debug, Clone, Copy, Default)]
pub struct HalvingReshaper;

impl Reshaper for HalvingReshaper {
    fn reshape(&self, content: &str, direction: ReshapeDirection) -> Result<String, AdapterError> {
        let words: Vec<&str> = content.split_whitespace().collect();
        let keep = words.len().div_ceil(2);
        let kept = match direction {
            ReshapeDirection::Abstract => &words[..keep],
            ReshapeDirection::Refine => &words[words.len() - keep..],
        };
        Ok(kept.join(" "))
    }
}

/// The fixed cause-to-edit mapping. Success is not attributable.
#[derive(Debug, Clone, Copy, Default)]
pub struct RuleAttributor;

impl Attributor for RuleAttributor {
    fn attribute(
        &self,
        feedback: &Feedback,
        subgraph: &ActivatedSubgraph,
    ) -> Result<EditDecision, AdapterError> {
        match feedback {
            Feedback::Success => {
                Err(AdapterError::BadResponse("success carries no failure to attribute".into()))
            }
            Feedback::Failure { cause } => Ok(default_attribution(cause, subgraph)),
        }
    }
}

/// The full offline suite: pure adapters plus a synthetic-world executor
/// whose planted tasks derive from `seed`.
pub fn reference_suite(seed: u64) -> AdapterSuite {
    reference_suite_with_dimension(seed, DEFAULT_DIMENSION)
}

pub fn reference_suite_with_dimension(seed: u64, dimension: usize) -> AdapterSuite {
    let world = generate_world(&WorldConfig {
        seed,
        n_topics: 3,
        n_facts: 30,
        n_tasks: 12,
        dimension,
        ..WorldConfig::default()
    });
    AdapterSuite {
        embedder: Arc::new(HashedEmbedder::new(dimension)),
        verifier: Arc::new(TokenOverlapVerifier::default()),
        inductor: Arc::new(IntersectionInductor),
        reshaper: Arc::new(HalvingReshaper),
        attributor: Arc::new(RuleAttributor),
        executor: Arc::new(SimExecutor::new(world)),
        deterministic: true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::{ContextString, StepAnchor};

    #[test]
    fn embedder_matches_engine_embedding() {
        let e = HashedEmbedder::new(32);
        assert_eq!(e.dimension(), 32);
        assert_eq!(e.embed("red fox").unwrap(), embedding::embed("red fox", 32));
        assert!(e.embed("").unwrap().is_zero());
    }

    #[test]
    fn verifier_thresholds_token_jaccard() {
        let v = TokenOverlapVerifier::default();
        assert!(v.verify("red fox", "red fox").unwrap());
        assert!(v.verify("red fox", "the red fox runs").unwrap());
        assert!(!v.verify("red fox", "blue cat sleeps").unwrap());
        assert!(!v.verify("", "").unwrap());
        assert!(!v.verify("red", "").unwrap());
        // Exactly at threshold: 1 shared of 10 distinct tokens = 0.1.
        assert!(v
            .verify("a b c d e", "a f g h i j")
            .unwrap());
    }

    #[test]
    fn induce_is_ordered_multiset_intersection() {
        let ind = IntersectionInductor;
        assert_eq!(
            ind.induce(&["find max ratio".into(), "find max count".into()]).unwrap(),
            "find max"
        );
        // Intersection with itself is the tokenized text.
        assert_eq!(ind.induce(&["Find MAX, ratio!".into()]).unwrap(), "find max ratio");
        // Multiset: the repeated token survives once per scarcest member.
        assert_eq!(
            ind.induce(&["a b a c".into(), "a a b".into(), "b a a".into()]).unwrap(),
            "a b a"
        );
        assert_eq!(ind.induce(&[]).unwrap(), "");
        assert_eq!(ind.induce(&["x y".into(), "z w".into()]).unwrap(), "");
    }

    #[test]
    fn rewrite_drops_latest_least_supported_token() {
        let ind = IntersectionInductor;
        let members = vec!["red fox".into(), "red fox jumps".into()];
        // Support: red 2, fox 2, jumps 1, so "jumps" goes.
        assert_eq!(ind.rewrite("red fox jumps", &members).unwrap(), "red fox");
        // Full-support tie: the latest occurrence goes.
        assert_eq!(
            ind.rewrite("red red fox", &vec!["red fox".into()]).unwrap(),
            "red red"
        );
        // At two tokens the skill is frozen.
        assert_eq!(ind.rewrite("red fox", &members).unwrap(), "red fox");
        assert_eq!(ind.rewrite("solo", &members).unwrap(), "solo");
        // No successful members: every token ties at zero support.
        assert_eq!(ind.rewrite("a b c", &[]).unwrap(), "a b");
    }

    #[test]
    fn reshaper_keeps_the_matching_half() {
        let r = HalvingReshaper;
        assert_eq!(r.reshape("a b c d", ReshapeDirection::Abstract).unwrap(), "a b");
        assert_eq!(r.reshape("a b c d", ReshapeDirection::Refine).unwrap(), "c d");
        assert_eq!(r.reshape("a b c", ReshapeDirection::Abstract).unwrap(), "a b");
        assert_eq!(r.reshape("a b c", ReshapeDirection::Refine).unwrap(), "b c");
        assert_eq!(r.reshape("solo", ReshapeDirection::Abstract).unwrap(), "solo");
        assert_eq!(r.reshape("solo", ReshapeDirection::Refine).unwrap(), "solo");
    }

    #[test]
    fn suite_is_reproducible_for_a_seed() {
        let a = reference_suite(7);
        let b = reference_suite(7);
        assert!(a.deterministic && b.deterministic);
        assert_eq!(a.embedder.embed("same text").unwrap(), b.embedder.embed("same text").unwrap());
        let ctx = ContextString { text: "[QUERY]\nq\n[OBSERVATION]\n\n".into(), provenance: vec![] };
        let fa = a.executor.execute("task-0", &ctx).unwrap();
        let fb = b.executor.execute("task-0", &ctx).unwrap();
        assert_eq!(fa, fb);
    }

    #[test]
    fn unknown_task_is_vacuous_success() {
        let s = reference_suite(7);
        let ctx = ContextString { text: String::new(), provenance: vec![] };
        assert_eq!(s.executor.execute("no-such-task", &ctx).unwrap(), Feedback::Success);
    }

    #[test]
    fn attributor_rejects_success() {
        let s = reference_suite(7);
        let sub = ActivatedSubgraph::empty(StepAnchor::new("t", 0, "q", ""));
        assert!(matches!(
            s.attributor.attribute(&Feedback::Success, &sub),
            Err(AdapterError::BadResponse(_))
        ));
    }
}
