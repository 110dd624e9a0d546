//! Questioner: tracks per-epoch recognition feedback in a confusion matrix,
//! extracts the most-confused classes, and renders the coarse-to-fine
//! description chain and the context-aware contrast prompts.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-epoch counts of (true class, predicted class) outcomes. Entry `(m, n)`
/// counts samples of class `m` predicted as `n`; the diagonal holds correct
/// predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Array2<u64>,
    epoch: usize,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            counts: Array2::zeros((num_classes, num_classes)),
            epoch: 0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.counts.nrows()
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Zeroes all counts and stamps the new epoch.
    pub fn reset_epoch(&mut self, epoch: usize) {
        self.counts.fill(0);
        self.epoch = epoch;
    }

    /// Increments `(true_label, predicted)` by one.
    pub fn record(&mut self, true_label: usize, predicted: usize) -> Result<()> {
        let n = self.num_classes();
        if true_label >= n || predicted >= n {
            return Err(Error::Argument(format!(
                "record({true_label},{predicted}) out of range for {n} classes"
            )));
        }
        self.counts[(true_label, predicted)] += 1;
        Ok(())
    }

    pub fn count(&self, true_label: usize, predicted: usize) -> u64 {
        self.counts[(true_label, predicted)]
    }

    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    pub fn row(&self, m: usize) -> Vec<u64> {
        self.counts.row(m).to_vec()
    }

    pub fn counts(&self) -> &Array2<u64> {
        &self.counts
    }

    /// Builds a matrix from raw counts (for fixtures and snapshots).
    pub fn from_counts(counts: Array2<u64>, epoch: usize) -> Result<Self> {
        if counts.nrows() != counts.ncols() {
            return Err(Error::Argument(format!(
                "confusion matrix must be square, got {:?}",
                counts.dim()
            )));
        }
        Ok(Self { counts, epoch })
    }

    pub fn to_json(&self) -> String {
        let rows: Vec<Vec<u64>> = (0..self.num_classes()).map(|m| self.row(m)).collect();
        serde_json::to_string(&serde_json::json!({
            "epoch": self.epoch,
            "counts": rows,
        }))
        .expect("confusion matrix serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Doc {
            epoch: usize,
            counts: Vec<Vec<u64>>,
        }
        let doc: Doc =
            serde_json::from_str(text).map_err(|e| Error::Serialization(e.to_string()))?;
        let n = doc.counts.len();
        let mut counts = Array2::<u64>::zeros((n, n));
        for (i, row) in doc.counts.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Serialization(format!(
                    "confusion row {i} has {} entries, expected {n}",
                    row.len()
                )));
            }
            for (j, &c) in row.iter().enumerate() {
                counts[(i, j)] = c;
            }
        }
        Self::from_counts(counts, doc.epoch)
    }
}

/// The classes most frequently confused with an anchor class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimilarClassSet {
    pub anchor: usize,
    /// Descending by count, ties broken by ascending class index.
    pub members: Vec<usize>,
    pub k: usize,
}

/// Top-k off-diagonal entries of row `m`, restricted to strictly positive
/// counts. Ordered by descending count, then ascending class index.
pub fn similar_set(cm: &ConfusionMatrix, m: usize, k: usize) -> Result<SimilarClassSet> {
    if k == 0 {
        return Err(Error::Argument("k must be at least 1".into()));
    }
    if m >= cm.num_classes() {
        return Err(Error::Argument(format!(
            "class {m} out of range for {} classes",
            cm.num_classes()
        )));
    }
    let mut candidates: Vec<(usize, u64)> = cm
        .row(m)
        .into_iter()
        .enumerate()
        .filter(|&(n, c)| n != m && c > 0)
        .collect();
    candidates.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    candidates.truncate(k);
    Ok(SimilarClassSet {
        anchor: m,
        members: candidates.into_iter().map(|(n, _)| n).collect(),
        k,
    })
}

/// The five preparation prompts plus the two context templates, loaded from
/// plain-text template files with named placeholders.
#[derive(Debug, Clone)]
pub struct PromptTemplates {
    pub chain: [String; 5],
    pub context: String,
    pub context_plain: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            chain: [
                include_str!("../templates/chain_1.txt").trim_end().to_string(),
                include_str!("../templates/chain_2.txt").trim_end().to_string(),
                include_str!("../templates/chain_3.txt").trim_end().to_string(),
                include_str!("../templates/chain_4.txt").trim_end().to_string(),
                include_str!("../templates/chain_5.txt").trim_end().to_string(),
            ],
            context: include_str!("../templates/context.txt").trim_end().to_string(),
            context_plain: include_str!("../templates/context_plain.txt")
                .trim_end()
                .to_string(),
        }
    }
}

impl PromptTemplates {
    /// Loads `chain_1.txt` .. `chain_5.txt`, `context.txt`, and
    /// `context_plain.txt` from a directory.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let read = |name: &str| -> Result<String> {
            let path = dir.join(name);
            std::fs::read_to_string(&path)
                .map(|s| s.trim_end().to_string())
                .map_err(|e| Error::State(format!("template {} unreadable: {e}", path.display())))
        };
        Ok(Self {
            chain: [
                read("chain_1.txt")?,
                read("chain_2.txt")?,
                read("chain_3.txt")?,
                read("chain_4.txt")?,
                read("chain_5.txt")?,
            ],
            context: read("context.txt")?,
            context_plain: read("context_plain.txt")?,
        })
    }
}

fn fill(template: &str, pairs: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (key, value) in pairs {
        out = out.replace(&format!("{{{key}}}"), value);
    }
    out
}

/// The coarse-to-fine preparation sequence for one class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptChain {
    pub class_name: String,
    pub steps: Vec<String>,
}

/// Renders the five-step description chain (overview, body parts, informative
/// joints, discriminative cues, summary). Deterministic in `class_name`.
pub fn build_description_chain(class_name: &str, templates: &PromptTemplates) -> Result<PromptChain> {
    if class_name.trim().is_empty() {
        return Err(Error::Argument("class name must be nonempty".into()));
    }
    let steps = templates
        .chain
        .iter()
        .map(|t| fill(t, &[("class_name", class_name)]))
        .collect();
    Ok(PromptChain {
        class_name: class_name.to_string(),
        steps,
    })
}

/// A rendered context-aware prompt contrasting a class with its confusables.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextPrompt {
    pub class_name: String,
    pub confusable_names: Vec<String>,
    pub template_id: String,
    pub text: String,
}

/// Renders the targeted prompt for one class. With an empty confusable list
/// it degenerates to a plain refinement request without a contrast list.
pub fn build_context_prompt(
    class_name: &str,
    confusable_names: &[String],
    store: &DescriptionStore,
    templates: &PromptTemplates,
) -> Result<ContextPrompt> {
    let description = store.get(class_name).ok_or_else(|| {
        Error::State(format!(
            "no description for `{class_name}`; run the description chain first"
        ))
    })?;
    let (template_id, text) = if confusable_names.is_empty() {
        (
            "context-plain-v1".to_string(),
            fill(
                &templates.context_plain,
                &[("class_name", class_name), ("description", description)],
            ),
        )
    } else {
        let list = confusable_names
            .iter()
            .map(|n| format!("\"{n}\""))
            .collect::<Vec<_>>()
            .join(", ");
        (
            "context-v1".to_string(),
            fill(
                &templates.context,
                &[
                    ("class_name", class_name),
                    ("description", description),
                    ("confusables", &list),
                ],
            ),
        )
    };
    Ok(ContextPrompt {
        class_name: class_name.to_string(),
        confusable_names: confusable_names.to_vec(),
        template_id,
        text,
    })
}

/// Per-class description texts, serialized as a human-readable TOML document.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptionStore {
    pub classes: BTreeMap<String, String>,
}

impl DescriptionStore {
    pub fn get(&self, class_name: &str) -> Option<&str> {
        self.classes.get(class_name).map(|s| s.as_str())
    }

    pub fn set(&mut self, class_name: &str, description: &str) {
        self.classes
            .insert(class_name.to_string(), description.to_string());
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reset_zeroes_and_stamps_epoch() {
        let mut cm = ConfusionMatrix::new(4);
        cm.record(1, 2).unwrap();
        cm.record(3, 3).unwrap();
        cm.reset_epoch(7);
        assert_eq!(cm.total(), 0);
        assert_eq!(cm.epoch(), 7);
        cm.reset_epoch(7);
        assert_eq!(cm.total(), 0);
    }

    #[test]
    fn record_increments_single_entry() {
        let mut cm = ConfusionMatrix::new(6);
        cm.record(2, 5).unwrap();
        assert_eq!(cm.count(2, 5), 1);
        assert_eq!(cm.total(), 1);
        cm.record(3, 3).unwrap();
        assert_eq!(cm.count(3, 3), 1);
        assert!(cm.record(6, 0).is_err());
        assert!(cm.record(0, 6).is_err());
    }

    #[test]
    fn replayed_records_match_tally_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut cm = ConfusionMatrix::new(5);
        let mut log = Vec::new();
        for _ in 0..100 {
            let t = rng.gen_range(0..5);
            let p = rng.gen_range(0..5);
            log.push((t, p));
            cm.record(t, p).unwrap();
        }
        let mut tally = vec![vec![0u64; 5]; 5];
        for &(t, p) in &log {
            tally[t][p] += 1;
        }
        for m in 0..5 {
            assert_eq!(cm.row(m), tally[m]);
            let row_total: u64 = tally[m].iter().sum();
            let true_m = log.iter().filter(|&&(t, _)| t == m).count() as u64;
            assert_eq!(row_total, true_m);
        }
        assert_eq!(cm.total(), 100);
    }

    #[test]
    fn similar_set_examples() {
        let mut cm = ConfusionMatrix::new(5);
        // row 0 = (0, 5, 2, 9, 0)
        for _ in 0..5 {
            cm.record(0, 1).unwrap();
        }
        for _ in 0..2 {
            cm.record(0, 2).unwrap();
        }
        for _ in 0..9 {
            cm.record(0, 3).unwrap();
        }
        let s = similar_set(&cm, 0, 2).unwrap();
        assert_eq!(s.members, vec![3, 1]);

        let empty = similar_set(&cm, 4, 3).unwrap();
        assert!(empty.members.is_empty());
    }

    #[test]
    fn similar_set_tie_break_and_zero_exclusion() {
        let mut cm = ConfusionMatrix::new(4);
        // row 0 = (_, 4, 4, 0)
        for _ in 0..4 {
            cm.record(0, 1).unwrap();
            cm.record(0, 2).unwrap();
        }
        let s = similar_set(&cm, 0, 3).unwrap();
        assert_eq!(s.members, vec![1, 2]);
    }

    #[test]
    fn similar_set_never_contains_anchor_even_with_large_diagonal() {
        let mut cm = ConfusionMatrix::new(3);
        for _ in 0..50 {
            cm.record(1, 1).unwrap();
        }
        cm.record(1, 0).unwrap();
        let s = similar_set(&cm, 1, 5).unwrap();
        assert_eq!(s.members, vec![0]);
    }

    #[test]
    fn similar_set_brute_force_oracle_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        for _ in 0..50 {
            let n = rng.gen_range(2..12);
            let mut cm = ConfusionMatrix::new(n);
            for _ in 0..rng.gen_range(0..200) {
                cm.record(rng.gen_range(0..n), rng.gen_range(0..n)).unwrap();
            }
            let m = rng.gen_range(0..n);
            let k = rng.gen_range(1..6);
            let got = similar_set(&cm, m, k).unwrap();

            // oracle: repeatedly scan for the max positive off-diagonal count
            let mut row = cm.row(m);
            row[m] = 0;
            let mut expect = Vec::new();
            for _ in 0..k {
                let mut best: Option<usize> = None;
                for (idx, &c) in row.iter().enumerate() {
                    if c == 0 {
                        continue;
                    }
                    match best {
                        None => best = Some(idx),
                        Some(b) if c > row[b] => best = Some(idx),
                        _ => {}
                    }
                }
                match best {
                    Some(b) => {
                        expect.push(b);
                        row[b] = 0;
                    }
                    None => break,
                }
            }
            assert_eq!(got.members, expect, "n={n} m={m} k={k}");
        }
    }

    #[test]
    fn similar_set_invariant_under_diagonal_shift() {
        let mut cm = ConfusionMatrix::new(4);
        cm.record(2, 0).unwrap();
        cm.record(2, 0).unwrap();
        cm.record(2, 3).unwrap();
        let before = similar_set(&cm, 2, 3).unwrap();
        for _ in 0..25 {
            cm.record(2, 2).unwrap();
        }
        let after = similar_set(&cm, 2, 3).unwrap();
        assert_eq!(before.members, after.members);
    }

    #[test]
    fn confusion_json_round_trip() {
        let mut cm = ConfusionMatrix::new(3);
        cm.reset_epoch(4);
        cm.record(0, 1).unwrap();
        cm.record(2, 2).unwrap();
        let text = cm.to_json();
        let back = ConfusionMatrix::from_json(&text).unwrap();
        assert_eq!(back, cm);
    }

    #[test]
    fn chain_is_deterministic_and_mentions_class() {
        let templates = PromptTemplates::default();
        let a = build_description_chain("hand waving", &templates).unwrap();
        let b = build_description_chain("hand waving", &templates).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.steps.len(), 5);
        assert!(a.steps[0].contains("hand waving"));
        assert!(a.steps[0].contains("holistic overview"));
        assert!(build_description_chain("", &templates).is_err());
    }

    #[test]
    fn chain_step_three_requests_specific_joints() {
        let templates = PromptTemplates::default();
        let chain = build_description_chain("writing", &templates).unwrap();
        assert_eq!(
            chain.steps[2],
            "For the action \"writing\", list the specific skeleton joints that are most \
             informative for recognizing it. Name each joint explicitly."
        );
    }

    #[test]
    fn context_prompt_names_both_actions() {
        let templates = PromptTemplates::default();
        let mut store = DescriptionStore::default();
        store.set("writing", "small hand motion above a surface");
        let p = build_context_prompt(
            "writing",
            &["typing on a keyboard".to_string()],
            &store,
            &templates,
        )
        .unwrap();
        assert!(p.text.contains("writing"));
        assert!(p.text.contains("typing on a keyboard"));
        assert_eq!(p.template_id, "context-v1");
    }

    #[test]
    fn context_prompt_golden_fixture() {
        let templates = PromptTemplates::default();
        let mut store = DescriptionStore::default();
        store.set("writing", "small hand motion above a surface");
        let p = build_context_prompt(
            "writing",
            &["typing on a keyboard".to_string()],
            &store,
            &templates,
        )
        .unwrap();
        let expected = "The action \"writing\" is currently described as: small hand motion above a surface\n\
                        During training it is most often confused with: \"typing on a keyboard\".\n\
                        Revise the description to emphasize the subtle motion cues that distinguish \"writing\" from these actions. \
                        Name the specific joints whose trajectories differ the most.";
        assert_eq!(p.text, expected);
    }

    #[test]
    fn empty_confusables_degenerate_to_plain_refinement() {
        let templates = PromptTemplates::default();
        let mut store = DescriptionStore::default();
        store.set("bowing", "upper body bends forward");
        let p = build_context_prompt("bowing", &[], &store, &templates).unwrap();
        assert_eq!(p.template_id, "context-plain-v1");
        assert!(!p.text.contains("confused with"));
    }

    #[test]
    fn missing_description_is_a_state_error() {
        let templates = PromptTemplates::default();
        let store = DescriptionStore::default();
        let err = build_context_prompt("bowing", &[], &store, &templates).unwrap_err();
        assert!(matches!(err, Error::State(_)));
        assert!(err.to_string().contains("description chain"));
    }

    #[test]
    fn description_store_round_trip() {
        let mut store = DescriptionStore::default();
        store.set("waving", "arm swings\nrepeatedly");
        store.set("bowing", "torso tilts");
        let text = store.to_toml_string().unwrap();
        let back = DescriptionStore::from_toml_str(&text).unwrap();
        assert_eq!(back, store);
    }
}
