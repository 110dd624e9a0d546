//! Selector: grounds language-model responses to joint indices, builds the
//! binary constraint matrix, and feeds the constrained and alignment losses.

pub mod align;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::grad::constrained_projection;
use crate::model::{cross_entropy, global_pool, softmax};

/// One named joint with optional aliases. Names and aliases are stored
/// lowercase; aliases must be unique across the whole vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub index: usize,
    pub name: String,
    pub aliases: Vec<String>,
}

/// Grounds free-text joint mentions to indices.
///
/// Matching is longest-pattern-first on word boundaries; a span consumed by a
/// longer pattern is unavailable to shorter ones, so "right wrist" does not
/// additionally fire the bare "wrist" group. Single trailing words shared by
/// several names (e.g. "wrist") become derived group patterns that map to all
/// such joints, including the regular plural form.
#[derive(Debug, Clone, PartialEq)]
pub struct JointVocabulary {
    entries: Vec<VocabEntry>,
    patterns: Vec<(String, Vec<usize>)>,
}

impl JointVocabulary {
    pub fn new(mut entries: Vec<VocabEntry>) -> Result<Self> {
        for e in entries.iter_mut() {
            e.name = e.name.trim().to_lowercase();
            for a in e.aliases.iter_mut() {
                *a = a.trim().to_lowercase();
            }
        }
        entries.sort_by_key(|e| e.index);
        let n = entries.len();
        for (pos, e) in entries.iter().enumerate() {
            if e.index != pos {
                return Err(Error::Argument(format!(
                    "vocabulary indices must cover 0..{n} exactly, missing or duplicate at {pos}"
                )));
            }
            if e.name.is_empty() {
                return Err(Error::Argument(format!("joint {pos} has an empty name")));
            }
        }
        let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
        for e in &entries {
            for term in std::iter::once(&e.name).chain(e.aliases.iter()) {
                if let Some(&other) = seen.get(term.as_str()) {
                    return Err(Error::Argument(format!(
                        "term `{term}` appears for joints {other} and {}",
                        e.index
                    )));
                }
                seen.insert(term, e.index);
            }
        }

        let mut direct: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for e in &entries {
            for term in std::iter::once(&e.name).chain(e.aliases.iter()) {
                direct.entry(term.clone()).or_default().push(e.index);
            }
        }
        // derived group patterns from shared trailing words
        let mut groups: BTreeMap<String, BTreeSet<usize>> = BTreeMap::new();
        for e in &entries {
            for term in std::iter::once(&e.name).chain(e.aliases.iter()) {
                if let Some(last) = term.rsplit(' ').next() {
                    if last != term {
                        groups.entry(last.to_string()).or_default().insert(e.index);
                    }
                }
            }
        }
        for (word, members) in groups {
            if direct.contains_key(&word) {
                continue;
            }
            let list: Vec<usize> = members.iter().copied().collect();
            direct.insert(format!("{word}s"), list.clone());
            direct.insert(word, list);
        }

        let mut patterns: Vec<(String, Vec<usize>)> = direct.into_iter().collect();
        patterns.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.0.cmp(&b.0)));
        Ok(Self { entries, patterns })
    }

    pub fn entries(&self) -> &[VocabEntry] {
        &self.entries
    }

    pub fn num_joints(&self) -> usize {
        self.entries.len()
    }

    pub fn name_of(&self, index: usize) -> Option<&str> {
        self.entries.get(index).map(|e| e.name.as_str())
    }

    /// Plain-text table: one `index<TAB>name<TAB>alias|alias` line per joint,
    /// preceded by a version line.
    pub fn to_table_string(&self) -> String {
        let mut out = String::from("joint-vocabulary v1\n");
        for e in &self.entries {
            out.push_str(&format!("{}\t{}\t{}\n", e.index, e.name, e.aliases.join("|")));
        }
        out
    }

    pub fn from_table_str(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some("joint-vocabulary v1") => {}
            other => {
                return Err(Error::Format {
                    offset: 0,
                    message: format!("bad vocabulary header: {other:?}"),
                })
            }
        }
        let mut entries = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.splitn(3, '\t');
            let index: usize = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Format {
                    offset: 0,
                    message: format!("vocabulary line {}: bad index", lineno + 2),
                })?;
            let name = parts
                .next()
                .ok_or_else(|| Error::Format {
                    offset: 0,
                    message: format!("vocabulary line {}: missing name", lineno + 2),
                })?
                .to_string();
            let aliases: Vec<String> = parts
                .next()
                .map(|s| {
                    s.split('|')
                        .filter(|a| !a.is_empty())
                        .map(|a| a.to_string())
                        .collect()
                })
                .unwrap_or_default();
            entries.push(VocabEntry { index, name, aliases });
        }
        Self::new(entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_table_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_table_str(&text)
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric()
}

/// Joint indices whose canonical name, alias, or derived group word occurs in
/// the lowercased response. Deterministic; the empty set is a legal result.
pub fn parse_salient_joints(response: &str, vocab: &JointVocabulary) -> BTreeSet<usize> {
    let text = response.to_lowercase();
    let mut consumed: Vec<(usize, usize)> = Vec::new();
    let mut found = BTreeSet::new();
    for (pattern, indices) in &vocab.patterns {
        for (start, _) in text.match_indices(pattern.as_str()) {
            let end = start + pattern.len();
            let prev_ok = text[..start].chars().next_back().map_or(true, |c| !is_word_char(c));
            let next_ok = text[end..].chars().next().map_or(true, |c| !is_word_char(c));
            if !prev_ok || !next_ok {
                continue;
            }
            if consumed.iter().any(|&(s, e)| start < e && s < end) {
                continue;
            }
            consumed.push((start, end));
            found.extend(indices.iter().copied());
        }
    }
    found
}

/// `V x V` binary matrix whose salient rows are all ones. Reconstructible
/// from the salient set alone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintMatrix {
    salient: BTreeSet<usize>,
    num_joints: usize,
}

impl ConstraintMatrix {
    pub fn new(salient: BTreeSet<usize>, num_joints: usize) -> Result<Self> {
        if let Some(&bad) = salient.iter().find(|&&j| j >= num_joints) {
            return Err(Error::Argument(format!(
                "salient joint {bad} out of range for {num_joints} joints"
            )));
        }
        Ok(Self { salient, num_joints })
    }

    pub fn zero(num_joints: usize) -> Self {
        Self {
            salient: BTreeSet::new(),
            num_joints,
        }
    }

    pub fn salient(&self) -> &BTreeSet<usize> {
        &self.salient
    }

    pub fn num_joints(&self) -> usize {
        self.num_joints
    }

    pub fn is_zero(&self) -> bool {
        self.salient.is_empty()
    }

    pub fn to_matrix(&self) -> Array2<f64> {
        let mut k = Array2::<f64>::zeros((self.num_joints, self.num_joints));
        for &v in &self.salient {
            k.row_mut(v).fill(1.0);
        }
        k
    }
}

/// Builds the constraint matrix from a salient-joint set.
pub fn build_constraint_matrix(salient: &BTreeSet<usize>, num_joints: usize) -> Result<ConstraintMatrix> {
    ConstraintMatrix::new(salient.clone(), num_joints)
}

/// Per-class guidance published by a refresh: the constraint matrix, the
/// targeted description, and its unit-norm embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidancePacket {
    pub class_index: usize,
    pub constraint: ConstraintMatrix,
    pub targeted_description: String,
    pub embedding: Vec<f64>,
    pub epoch_created: usize,
}

impl GuidancePacket {
    pub fn validate(&self) -> Result<()> {
        if self.targeted_description.is_empty() {
            return Err(Error::Argument(format!(
                "class {} packet has an empty description",
                self.class_index
            )));
        }
        let norm: f64 = self.embedding.iter().map(|e| e * e).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::Argument(format!(
                "class {} embedding has norm {norm}, expected 1",
                self.class_index
            )));
        }
        Ok(())
    }

    pub fn embedding_array(&self) -> Array1<f64> {
        Array1::from_vec(self.embedding.clone())
    }
}

/// Immutable per-class packet table; the trainer swaps a fresh table in at
/// every refresh boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceTable {
    pub version: u32,
    pub class_names: Vec<String>,
    pub packets: Vec<GuidancePacket>,
}

impl GuidanceTable {
    pub fn new(class_names: Vec<String>, packets: Vec<GuidancePacket>) -> Result<Self> {
        if class_names.len() != packets.len() {
            return Err(Error::Argument(format!(
                "{} class names but {} packets",
                class_names.len(),
                packets.len()
            )));
        }
        for (i, p) in packets.iter().enumerate() {
            if p.class_index != i {
                return Err(Error::Argument(format!(
                    "packet {i} carries class index {}",
                    p.class_index
                )));
            }
            p.validate()?;
        }
        Ok(Self {
            version: 1,
            class_names,
            packets,
        })
    }

    pub fn packet(&self, class: usize) -> Option<&GuidancePacket> {
        self.packets.get(class)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: GuidanceTable =
            toml::from_str(text).map_err(|e| Error::Serialization(e.to_string()))?;
        GuidanceTable::new(table.class_names, table.packets)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}

/// Joint-constrained embedding: temporal mean pool, multiply by `K`, 1x1
/// channel convolution, flatten.
pub fn joint_constrained_feature(
    feat: &ArrayView3<f64>,
    kmat: &ConstraintMatrix,
    proj_w: &Array2<f64>,
    proj_b: &Array1<f64>,
) -> Result<Array1<f64>> {
    constrained_projection(feat, &kmat.to_matrix(), proj_w, proj_b)
}

/// Cross-entropy of the auxiliary classifier on the constrained embedding.
pub fn constraint_loss(
    x_joint: &Array1<f64>,
    label: usize,
    aux_w: &Array2<f64>,
    aux_b: &Array1<f64>,
) -> Result<f64> {
    if aux_w.ncols() != x_joint.len() {
        return Err(Error::Shape(format!(
            "auxiliary classifier expects {} inputs, embedding has {}",
            aux_w.ncols(),
            x_joint.len()
        )));
    }
    let prob = softmax(&(aux_w.dot(x_joint) + aux_b));
    cross_entropy(&prob, label)
}

/// Unit-norm skeleton embedding: global mean pool, linear map, L2 normalize.
pub fn skeleton_embed(
    feat: &ArrayView3<f64>,
    align_w: &Array2<f64>,
    align_b: &Array1<f64>,
) -> Result<Array1<f64>> {
    let (c, _, _) = feat.dim();
    if align_w.ncols() != c {
        return Err(Error::Shape(format!(
            "alignment projection expects {} channels, feature has {c}",
            align_w.ncols()
        )));
    }
    let h = global_pool(feat);
    let z = align_w.dot(&h) + align_b;
    let norm = z.dot(&z).sqrt();
    if norm == 0.0 {
        return Err(Error::Degenerate(
            "alignment projection is exactly zero; cannot normalize".into(),
        ));
    }
    Ok(z.mapv(|e| e / norm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array3};

    fn small_vocab() -> JointVocabulary {
        JointVocabulary::new(vec![
            VocabEntry {
                index: 0,
                name: "head".into(),
                aliases: vec![],
            },
            VocabEntry {
                index: 1,
                name: "left wrist".into(),
                aliases: vec!["left hand".into()],
            },
            VocabEntry {
                index: 2,
                name: "right wrist".into(),
                aliases: vec!["right hand".into()],
            },
            VocabEntry {
                index: 3,
                name: "right elbow".into(),
                aliases: vec![],
            },
        ])
        .unwrap()
    }

    #[test]
    fn parse_finds_named_joints() {
        let vocab = small_vocab();
        let got = parse_salient_joints(
            "The critical joints are the right wrist and right elbow.",
            &vocab,
        );
        assert_eq!(got, BTreeSet::from([2, 3]));
    }

    #[test]
    fn parse_without_matches_is_empty() {
        let vocab = small_vocab();
        assert!(parse_salient_joints("torso rotation dominates", &vocab).is_empty());
    }

    #[test]
    fn bare_group_word_maps_to_all_members() {
        let vocab = small_vocab();
        let got = parse_salient_joints("watch the wrist closely", &vocab);
        assert_eq!(got, BTreeSet::from([1, 2]));
        let plural = parse_salient_joints("both wrists rise together", &vocab);
        assert_eq!(plural, BTreeSet::from([1, 2]));
    }

    #[test]
    fn longer_pattern_consumes_its_span() {
        let vocab = small_vocab();
        // "right wrist" must not additionally fire the bare "wrist" group
        let got = parse_salient_joints("only the right wrist moves", &vocab);
        assert_eq!(got, BTreeSet::from([2]));
    }

    #[test]
    fn word_boundaries_are_respected() {
        let vocab = small_vocab();
        assert!(parse_salient_joints("wristband and headphones", &vocab).is_empty());
    }

    #[test]
    fn parse_is_case_insensitive_and_idempotent() {
        let vocab = small_vocab();
        let a = parse_salient_joints("Right Wrist leads, LEFT HAND follows", &vocab);
        let b = parse_salient_joints("Right Wrist leads, LEFT HAND follows", &vocab);
        assert_eq!(a, BTreeSet::from([1, 2]));
        assert_eq!(a, b);
    }

    #[test]
    fn vocabulary_rejects_gaps_and_duplicates() {
        let gap = JointVocabulary::new(vec![VocabEntry {
            index: 1,
            name: "neck".into(),
            aliases: vec![],
        }]);
        assert!(matches!(gap, Err(Error::Argument(_))));

        let dup = JointVocabulary::new(vec![
            VocabEntry {
                index: 0,
                name: "head".into(),
                aliases: vec!["top".into()],
            },
            VocabEntry {
                index: 1,
                name: "neck".into(),
                aliases: vec!["top".into()],
            },
        ]);
        assert!(matches!(dup, Err(Error::Argument(_))));
    }

    #[test]
    fn vocabulary_table_round_trip() {
        let vocab = small_vocab();
        let text = vocab.to_table_string();
        let back = JointVocabulary::from_table_str(&text).unwrap();
        assert_eq!(back.entries(), vocab.entries());
        assert!(JointVocabulary::from_table_str("nope\n").is_err());
    }

    #[test]
    fn constraint_matrix_definition() {
        let k = ConstraintMatrix::new(BTreeSet::from([2]), 4).unwrap().to_matrix();
        assert_eq!(
            k,
            array![
                [0.0, 0.0, 0.0, 0.0],
                [0.0, 0.0, 0.0, 0.0],
                [1.0, 1.0, 1.0, 1.0],
                [0.0, 0.0, 0.0, 0.0]
            ]
        );
        assert!(ConstraintMatrix::zero(3).to_matrix().iter().all(|&e| e == 0.0));
        let all = ConstraintMatrix::new(BTreeSet::from([0, 1, 2]), 3)
            .unwrap()
            .to_matrix();
        assert!(all.iter().all(|&e| e == 1.0));
        assert!(matches!(
            ConstraintMatrix::new(BTreeSet::from([4]), 4),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn constraint_matrix_reconstruction_is_exact() {
        let salient = BTreeSet::from([1, 3]);
        let cm = build_constraint_matrix(&salient, 5).unwrap();
        let m = cm.to_matrix();
        let mut recovered = BTreeSet::new();
        for v in 0..5 {
            let row = m.row(v);
            if row.iter().all(|&e| e == 1.0) {
                recovered.insert(v);
            } else {
                assert!(row.iter().all(|&e| e == 0.0));
            }
        }
        assert_eq!(recovered, salient);
    }

    #[test]
    fn parse_then_build_is_idempotent() {
        let vocab = small_vocab();
        let response = "focus on the right wrist and the head";
        let s1 = parse_salient_joints(response, &vocab);
        let k1 = build_constraint_matrix(&s1, vocab.num_joints()).unwrap();
        let s2 = parse_salient_joints(response, &vocab);
        let k2 = build_constraint_matrix(&s2, vocab.num_joints()).unwrap();
        assert_eq!(k1, k2);
    }

    #[test]
    fn pre_projection_product_hand_oracle() {
        // C'=1, T'=2, V=2; joint 0 series (1,3), joint 1 series (2,4)
        let mut feat = Array3::<f64>::zeros((1, 2, 2));
        feat[(0, 0, 0)] = 1.0;
        feat[(0, 1, 0)] = 3.0;
        feat[(0, 0, 1)] = 2.0;
        feat[(0, 1, 1)] = 4.0;
        let x_pre = crate::model::grad::temporal_mean(&feat.view());
        assert_eq!(x_pre, array![[2.0, 3.0]]);
        let k = ConstraintMatrix::new(BTreeSet::from([0]), 2).unwrap();
        let product = x_pre.dot(&k.to_matrix());
        assert_eq!(product, array![[2.0, 2.0]]);

        // identity projection keeps the product visible in the flat output
        let flat = joint_constrained_feature(
            &feat.view(),
            &k,
            &Array2::eye(1),
            &Array1::zeros(1),
        )
        .unwrap();
        assert_eq!(flat, array![2.0, 2.0]);
    }

    #[test]
    fn all_ones_k_replicates_row_sums() {
        let mut feat = Array3::<f64>::zeros((2, 1, 2));
        feat[(0, 0, 0)] = 1.5;
        feat[(0, 0, 1)] = -0.5;
        feat[(1, 0, 0)] = 2.0;
        feat[(1, 0, 1)] = 3.0;
        let k = ConstraintMatrix::new(BTreeSet::from([0, 1]), 2).unwrap();
        let x_pre = crate::model::grad::temporal_mean(&feat.view());
        let product = x_pre.dot(&k.to_matrix());
        for c in 0..2 {
            let row_sum: f64 = x_pre.row(c).sum();
            for v in 0..2 {
                assert_abs_diff_eq!(product[(c, v)], row_sum, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn constraint_loss_examples() {
        // weights that force a one-hot output at label 1
        let x = array![1.0, 0.0];
        let aux_w = array![[0.0, 0.0], [500.0, 0.0], [0.0, 0.0]];
        let aux_b = Array1::zeros(3);
        let loss = constraint_loss(&x, 1, &aux_w, &aux_b).unwrap();
        assert_abs_diff_eq!(loss, 0.0, epsilon = 1e-9);

        // zero weights give a uniform distribution over 8 classes
        let aux_w = Array2::<f64>::zeros((8, 2));
        let aux_b = Array1::zeros(8);
        let loss = constraint_loss(&x, 3, &aux_w, &aux_b).unwrap();
        assert_abs_diff_eq!(loss, 8.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn constraint_loss_matches_scalar_oracle() {
        let x = array![0.4, -0.3, 1.2];
        let aux_w = array![[0.2, -0.1, 0.5], [-0.4, 0.3, 0.2]];
        let aux_b = array![0.1, -0.2];
        let logits: [f64; 2] = [
            0.2 * 0.4 - 0.1 * -0.3 + 0.5 * 1.2 + 0.1,
            -0.4 * 0.4 + 0.3 * -0.3 + 0.2 * 1.2 - 0.2,
        ];
        let m = logits[0].max(logits[1]);
        let e0 = (logits[0] - m).exp();
        let e1 = (logits[1] - m).exp();
        let expect = -(e1 / (e0 + e1)).ln();
        let loss = constraint_loss(&x, 1, &aux_w, &aux_b).unwrap();
        assert_abs_diff_eq!(loss, expect, epsilon = 1e-12);
    }

    #[test]
    fn skeleton_embed_contract() {
        let feat = Array3::from_shape_fn((3, 2, 2), |(c, t, v)| (c + t + v) as f64 * 0.3 + 0.1);
        let w = array![[0.3, -0.2, 0.4], [0.5, 0.1, -0.6]];
        let b = array![0.0, 0.0];
        let e = skeleton_embed(&feat.view(), &w, &b).unwrap();
        assert_abs_diff_eq!(e.dot(&e).sqrt(), 1.0, epsilon = 1e-6);

        // positive scaling with zero bias leaves the embedding unchanged
        let scaled = feat.mapv(|x| x * 3.7);
        let e2 = skeleton_embed(&scaled.view(), &w, &b).unwrap();
        for (a, g) in e.iter().zip(e2.iter()) {
            assert_abs_diff_eq!(a, g, epsilon = 1e-9);
        }

        // matches the pool -> linear -> normalize oracle
        let h = global_pool(&feat.view());
        let z = w.dot(&h) + &b;
        let n = z.dot(&z).sqrt();
        for (a, g) in e.iter().zip(z.iter()) {
            assert_abs_diff_eq!(*a, g / n, epsilon = 1e-12);
        }
    }

    #[test]
    fn skeleton_embed_zero_is_degenerate() {
        let feat = Array3::<f64>::zeros((2, 2, 2));
        let w = Array2::<f64>::zeros((3, 2));
        let b = Array1::<f64>::zeros(3);
        assert!(matches!(
            skeleton_embed(&feat.view(), &w, &b),
            Err(Error::Degenerate(_))
        ));
        // a nonzero bias rescues the all-zero pooled feature
        let b = array![0.0, 2.0, 0.0];
        let e = skeleton_embed(&feat.view(), &w, &b).unwrap();
        assert_abs_diff_eq!(e[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn guidance_packet_validation() {
        let ok = GuidancePacket {
            class_index: 0,
            constraint: ConstraintMatrix::zero(3),
            targeted_description: "raise the right hand".into(),
            embedding: vec![1.0, 0.0],
            epoch_created: 0,
        };
        ok.validate().unwrap();

        let bad_norm = GuidancePacket {
            embedding: vec![1.0, 1.0],
            ..ok.clone()
        };
        assert!(bad_norm.validate().is_err());

        let empty = GuidancePacket {
            targeted_description: String::new(),
            ..ok
        };
        assert!(empty.validate().is_err());
    }

    #[test]
    fn guidance_table_toml_round_trip() {
        let packets = vec![
            GuidancePacket {
                class_index: 0,
                constraint: ConstraintMatrix::new(BTreeSet::from([1]), 3).unwrap(),
                targeted_description: "first class".into(),
                embedding: vec![0.6, 0.8],
                epoch_created: 10,
            },
            GuidancePacket {
                class_index: 1,
                constraint: ConstraintMatrix::zero(3),
                targeted_description: "second class\nwith a newline".into(),
                embedding: vec![1.0, 0.0],
                epoch_created: 10,
            },
        ];
        let table = GuidanceTable::new(vec!["a".into(), "b".into()], packets).unwrap();
        let text = table.to_toml_string().unwrap();
        let back = GuidanceTable::from_toml_str(&text).unwrap();
        assert_eq!(back, table);
    }
}
