//! Turning raw network outputs into a class decision.
//!
//! Two independent rejection mechanisms are supported: an explicit rest
//! class (one of the trained outputs acts as the catch-all) and a confidence
//! threshold (the maximum output must clear a cutoff, otherwise the dataset
//! is declared part of the rest). They can be combined.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DecisionError {
    #[error("scores length {got} does not match {expected} registered classes")]
    ShapeMismatch { expected: usize, got: usize },
}

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("class {0:?} is already registered")]
    DuplicateClass(String),
    #[error("class names must be nonempty")]
    EmptyName,
    #[error("no class named {0:?}")]
    UnknownClass(String),
}

/// Ordered list of output classes, optionally designating one as the rest
/// (catch-all) class. The order matches the network's output neurons.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ClassRegistry {
    classes: Vec<String>,
    rest_class_index: Option<usize>,
}

impl ClassRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a class and return its index. Names must be unique and
    /// nonempty.
    pub fn add(&mut self, name: &str) -> Result<usize, RegistryError> {
        if name.is_empty() {
            return Err(RegistryError::EmptyName);
        }
        if self.index_of(name).is_some() {
            return Err(RegistryError::DuplicateClass(name.to_string()));
        }
        self.classes.push(name.to_string());
        Ok(self.classes.len() - 1)
    }

    /// Mark an existing class as the rest class.
    pub fn set_rest_class(&mut self, name: &str) -> Result<(), RegistryError> {
        match self.index_of(name) {
            Some(i) => {
                self.rest_class_index = Some(i);
                Ok(())
            }
            None => Err(RegistryError::UnknownClass(name.to_string())),
        }
    }

    pub fn names(&self) -> &[String] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn name(&self, index: usize) -> &str {
        &self.classes[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    pub fn rest_class_index(&self) -> Option<usize> {
        self.rest_class_index
    }

    pub fn is_rest(&self, index: usize) -> bool {
        self.rest_class_index == Some(index)
    }

    /// Restore a registry from stored parts, revalidating the invariants.
    pub fn from_parts(
        classes: Vec<String>,
        rest_class_index: Option<usize>,
    ) -> Result<Self, RegistryError> {
        let mut registry = ClassRegistry::new();
        for name in &classes {
            registry.add(name)?;
        }
        if let Some(i) = rest_class_index {
            if i >= registry.len() {
                return Err(RegistryError::UnknownClass(format!("index {i}")));
            }
            registry.rest_class_index = Some(i);
        }
        Ok(registry)
    }
}

/// How raw outputs become a decision: optionally reject below a confidence
/// threshold, optionally in combination with a trained rest class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecisionPolicy {
    /// Whether a trained rest class participates in the setup. Purely
    /// descriptive for the decision itself (the argmax runs over all
    /// trained outputs either way); evaluation harnesses use it to label
    /// their policy rows.
    pub use_rest_class: bool,
    /// Reject when the maximum output falls below this value, in [0,1].
    pub threshold: Option<f32>,
}

impl Default for DecisionPolicy {
    fn default() -> Self {
        DecisionPolicy {
            use_rest_class: true,
            threshold: None,
        }
    }
}

/// Conservative default cutoff for the combined rest-class + threshold
/// setup; high thresholds mostly manufacture false negatives.
pub const DEFAULT_COMBINED_THRESHOLD: f32 = 0.5;

impl DecisionPolicy {
    pub fn with_threshold(threshold: f32) -> Self {
        DecisionPolicy {
            use_rest_class: true,
            threshold: Some(threshold),
        }
    }

    /// Rest class and threshold rejection together, at the default cutoff.
    pub fn combined() -> Self {
        Self::with_threshold(DEFAULT_COMBINED_THRESHOLD)
    }
}

/// Name reported when thresholding rejects and the registry defines no rest
/// class of its own.
pub const REST_OUTCOME: &str = "rest";

/// Outcome of classifying one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    /// Raw per-class outputs, in registry order.
    pub scores: Vec<f32>,
    /// Chosen class name; [`REST_OUTCOME`] if thresholding rejected and no
    /// rest class is registered.
    pub chosen: String,
    /// Registry index of the chosen class; `None` only for the synthetic
    /// rest outcome.
    pub chosen_index: Option<usize>,
    /// The maximum output value.
    pub confidence: f32,
    /// True when thresholding forced the rest outcome.
    pub rejected: bool,
}

impl Classification {
    /// Whether the decision landed in the rest group, either through the
    /// trained rest class or through threshold rejection.
    pub fn is_rest_outcome(&self, registry: &ClassRegistry) -> bool {
        match self.chosen_index {
            Some(i) => registry.is_rest(i),
            None => true,
        }
    }
}

/// Decide a class from raw scores: the maximum output wins (ties break to
/// the lowest index). If a threshold is set and the maximum falls below it,
/// the result is the rest outcome and `rejected` is set.
pub fn decide(
    scores: &[f32],
    registry: &ClassRegistry,
    policy: &DecisionPolicy,
) -> Result<Classification, DecisionError> {
    if scores.len() != registry.len() || scores.is_empty() {
        return Err(DecisionError::ShapeMismatch {
            expected: registry.len(),
            got: scores.len(),
        });
    }

    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    let confidence = scores[best];

    let rejected = matches!(policy.threshold, Some(t) if confidence < t);
    let chosen_index = if rejected {
        registry.rest_class_index()
    } else {
        Some(best)
    };

    Ok(Classification {
        scores: scores.to_vec(),
        chosen: match chosen_index {
            Some(i) => registry.name(i).to_string(),
            None => REST_OUTCOME.to_string(),
        },
        chosen_index,
        confidence,
        rejected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn registry3() -> ClassRegistry {
        let mut r = ClassRegistry::new();
        r.add("cat1").unwrap();
        r.add("cat2").unwrap();
        r.add("cat3").unwrap();
        r
    }

    #[test]
    fn maximum_output_wins() {
        let r = registry3();
        let c = decide(
            &[0.893_456, 0.131_899, 0.044_582],
            &r,
            &DecisionPolicy::default(),
        )
        .unwrap();
        assert_eq!(c.chosen, "cat1");
        assert_eq!(c.chosen_index, Some(0));
        assert_eq!(c.confidence, 0.893_456);
        assert!(!c.rejected);
    }

    #[test]
    fn below_threshold_rejects_to_synthetic_rest() {
        let r = registry3();
        let c = decide(&[0.4, 0.45, 0.3], &r, &DecisionPolicy::with_threshold(0.5)).unwrap();
        assert!(c.rejected);
        assert_eq!(c.chosen, REST_OUTCOME);
        assert_eq!(c.chosen_index, None);
        assert_eq!(c.confidence, 0.45);
        assert!(c.is_rest_outcome(&r));
    }

    #[test]
    fn below_threshold_rejects_to_trained_rest_class() {
        let mut r = registry3();
        r.add("misc").unwrap();
        r.set_rest_class("misc").unwrap();
        let c = decide(
            &[0.4, 0.45, 0.3, 0.2],
            &r,
            &DecisionPolicy::with_threshold(0.5),
        )
        .unwrap();
        assert!(c.rejected);
        assert_eq!(c.chosen, "misc");
        assert_eq!(c.chosen_index, Some(3));
        assert!(c.is_rest_outcome(&r));
    }

    #[test]
    fn exact_tie_breaks_to_lowest_index() {
        let mut r = ClassRegistry::new();
        r.add("a").unwrap();
        r.add("b").unwrap();
        let c = decide(&[0.5, 0.5], &r, &DecisionPolicy::default()).unwrap();
        assert_eq!(c.chosen, "a");
        assert_eq!(c.chosen_index, Some(0));
    }

    #[test]
    fn combined_policy_uses_default_cutoff() {
        let p = DecisionPolicy::combined();
        assert!(p.use_rest_class);
        assert_eq!(p.threshold, Some(0.5));
    }

    #[test]
    fn at_threshold_is_not_rejected() {
        let r = registry3();
        let c = decide(&[0.5, 0.2, 0.1], &r, &DecisionPolicy::with_threshold(0.5)).unwrap();
        assert!(!c.rejected);
        assert_eq!(c.chosen, "cat1");
    }

    #[test]
    fn shape_mismatch_detected() {
        let r = registry3();
        assert!(matches!(
            decide(&[0.1, 0.2], &r, &DecisionPolicy::default()),
            Err(DecisionError::ShapeMismatch {
                expected: 3,
                got: 2
            })
        ));
    }

    #[test]
    fn registry_rejects_duplicates_and_empty_names() {
        let mut r = ClassRegistry::new();
        r.add("x").unwrap();
        assert!(matches!(r.add("x"), Err(RegistryError::DuplicateClass(_))));
        assert!(matches!(r.add(""), Err(RegistryError::EmptyName)));
        assert!(matches!(
            r.set_rest_class("nope"),
            Err(RegistryError::UnknownClass(_))
        ));
    }

    proptest! {
        #[test]
        fn scaling_preserves_argmax(
            scores in proptest::collection::vec(0.01f32..0.99, 2..8),
            factor in 0.1f32..1.0,
        ) {
            let mut r = ClassRegistry::new();
            for i in 0..scores.len() {
                r.add(&format!("c{i}")).unwrap();
            }
            let plain = decide(&scores, &r, &DecisionPolicy::default()).unwrap();
            // any positive factor <= 1/max keeps values in range
            let max = scores.iter().cloned().fold(0.0f32, f32::max);
            let f = factor.min(1.0 / max);
            let scaled: Vec<f32> = scores.iter().map(|&s| s * f).collect();
            let after = decide(&scaled, &r, &DecisionPolicy::default()).unwrap();
            prop_assert_eq!(plain.chosen_index, after.chosen_index);
        }

        #[test]
        fn no_threshold_never_rejects(
            scores in proptest::collection::vec(0.01f32..0.99, 2..8),
        ) {
            let mut r = ClassRegistry::new();
            for i in 0..scores.len() {
                r.add(&format!("c{i}")).unwrap();
            }
            r.set_rest_class("c0").unwrap();
            let c = decide(&scores, &r, &DecisionPolicy::default()).unwrap();
            prop_assert!(!c.rejected);
        }

        #[test]
        fn raising_threshold_only_moves_decisions_to_rest(
            scores in proptest::collection::vec(0.01f32..0.99, 2..8),
            lo in 0.0f32..1.0,
            hi in 0.0f32..1.0,
        ) {
            let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
            let mut r = ClassRegistry::new();
            for i in 0..scores.len() {
                r.add(&format!("c{i}")).unwrap();
            }
            let at_lo = decide(&scores, &r, &DecisionPolicy::with_threshold(lo)).unwrap();
            let at_hi = decide(&scores, &r, &DecisionPolicy::with_threshold(hi)).unwrap();
            if at_lo.rejected {
                prop_assert!(at_hi.rejected);
            }
            if !at_lo.rejected && !at_hi.rejected {
                prop_assert_eq!(at_lo.chosen_index, at_hi.chosen_index);
            }
        }
    }
}
