//! Synthetic confusable-action dataset: sinusoidal joint-trajectory prototypes
//! per class, Gaussian sample noise, and controllable pair overlap so the
//! effect of guidance on hard pairs is measurable at desk scale.

pub mod format;

use std::collections::BTreeSet;
use std::f64::consts::TAU;

use ndarray::Array3;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::language::{FixtureEntry, FixtureScript};
use crate::selector::{JointVocabulary, VocabEntry};
use crate::util::derive_seed;

/// One labeled skeleton sequence, `(channels, frames, joints)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSequence {
    pub data: Array3<f64>,
    pub label: usize,
}

impl SkeletonSequence {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let (c, t, v) = self.data.dim();
        if c == 0 || t == 0 || v == 0 {
            return Err(Error::Argument(format!(
                "sequence must be nonempty, got ({c},{t},{v})"
            )));
        }
        if self.data.iter().any(|e| !e.is_finite()) {
            return Err(Error::Argument("sequence contains non-finite entries".into()));
        }
        if self.label >= num_classes {
            return Err(Error::Argument(format!(
                "label {} out of range for {num_classes} classes",
                self.label
            )));
        }
        Ok(())
    }
}

/// Two classes that differ only on a designated joint set, separated by
/// amplitude `separation` there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusablePair {
    pub class_a: usize,
    pub class_b: usize,
    pub joints: BTreeSet<usize>,
    pub separation: f64,
}

/// Full description of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub channels: usize,
    pub joints: usize,
    pub frames: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub pairs: Vec<ConfusablePair>,
    pub noise: f64,
    pub seed: u64,
}

/// Pair separation that lands the guidance-free baseline in the intended
/// 60-80% pair-accuracy band on the desk profile (calibrated by sweep).
pub const DESK_SEPARATION: f64 = 0.35;

impl SyntheticSpec {
    /// Desk-scale default: 8 classes, 12 joints, 48 raw frames, 200 train and
    /// 50 test samples per class, two confusable pairs.
    pub fn desk(seed: u64) -> Self {
        Self {
            num_classes: 8,
            channels: 3,
            joints: 12,
            frames: 48,
            train_per_class: 200,
            test_per_class: 50,
            pairs: vec![
                ConfusablePair {
                    class_a: 0,
                    class_b: 1,
                    joints: BTreeSet::from([5, 7]), // right elbow, right wrist
                    separation: DESK_SEPARATION,
                },
                ConfusablePair {
                    class_a: 2,
                    class_b: 3,
                    joints: BTreeSet::from([9, 11]), // right knee, right ankle
                    separation: DESK_SEPARATION,
                },
            ],
            noise: 0.4,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0
            || self.channels == 0
            || self.joints == 0
            || self.frames == 0
            || self.train_per_class == 0
            || self.test_per_class == 0
        {
            return Err(Error::Argument(
                "classes, channels, joints, frames and per-class counts must be positive".into(),
            ));
        }
        if self.noise < 0.0 {
            return Err(Error::Argument(format!(
                "noise scale must be nonnegative, got {}",
                self.noise
            )));
        }
        for (i, p) in self.pairs.iter().enumerate() {
            if p.class_a >= self.num_classes || p.class_b >= self.num_classes {
                return Err(Error::Argument(format!(
                    "pair {i} references classes ({}, {}) outside 0..{}",
                    p.class_a, p.class_b, self.num_classes
                )));
            }
            if p.class_a == p.class_b {
                return Err(Error::Argument(format!("pair {i} pairs a class with itself")));
            }
            if p.separation < 0.0 {
                return Err(Error::Argument(format!(
                    "pair {i} has negative separation {}",
                    p.separation
                )));
            }
            if p.joints.is_empty() {
                return Err(Error::Argument(format!("pair {i} has no distinguishing joints")));
            }
            if let Some(&bad) = p.joints.iter().find(|&&j| j >= self.joints) {
                return Err(Error::Argument(format!(
                    "pair {i} distinguishing joint {bad} outside 0..{}",
                    self.joints
                )));
            }
        }
        Ok(())
    }
}

/// Which split a file or in-memory dataset belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitTag {
    Train,
    Test,
}

/// A materialized split plus its class-name table and joint vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub sequences: Vec<SkeletonSequence>,
    pub tag: SplitTag,
    pub class_names: Vec<String>,
    pub vocab: JointVocabulary,
}

impl DatasetSplit {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn dims(&self) -> Option<(usize, usize, usize)> {
        self.sequences.first().map(|s| s.data.dim())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_classes();
        let dims = self.dims();
        for s in &self.sequences {
            s.validate(n)?;
            if Some(s.data.dim()) != dims {
                return Err(Error::Argument(format!(
                    "mixed sequence shapes: {:?} vs {:?}",
                    s.data.dim(),
                    dims
                )));
            }
        }
        Ok(())
    }
}

/// Human-readable names for the 12 synthetic joints, with the aliases the
/// scripted fixtures use.
pub fn default_vocabulary() -> JointVocabulary {
    JointVocabulary::new(vec![
        VocabEntry { index: 0, name: "head".into(), aliases: vec![] },
        VocabEntry { index: 1, name: "neck".into(), aliases: vec![] },
        VocabEntry { index: 2, name: "left shoulder".into(), aliases: vec![] },
        VocabEntry { index: 3, name: "right shoulder".into(), aliases: vec![] },
        VocabEntry { index: 4, name: "left elbow".into(), aliases: vec![] },
        VocabEntry { index: 5, name: "right elbow".into(), aliases: vec![] },
        VocabEntry { index: 6, name: "left wrist".into(), aliases: vec!["left hand".into()] },
        VocabEntry { index: 7, name: "right wrist".into(), aliases: vec!["right hand".into()] },
        VocabEntry { index: 8, name: "left knee".into(), aliases: vec![] },
        VocabEntry { index: 9, name: "right knee".into(), aliases: vec![] },
        VocabEntry { index: 10, name: "left ankle".into(), aliases: vec!["left foot".into()] },
        VocabEntry { index: 11, name: "right ankle".into(), aliases: vec!["right foot".into()] },
    ])
    .expect("default vocabulary is valid")
}

/// Class names for the desk-scale dataset. Classes 0/1 and 2/3 form the
/// confusable pairs.
pub fn desk_class_names() -> Vec<String> {
    [
        "waving", "pointing", "kicking", "stomping", "jumping", "bowing", "clapping", "squatting",
    ]
    .into_iter()
    .map(String::from)
    .collect()
}

fn prototype(spec: &SyntheticSpec, class: usize) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "prototype", &[class as u64]));
    let (c_n, t_n, v_n) = (spec.channels, spec.frames, spec.joints);
    let mut proto = Array3::<f64>::zeros((c_n, t_n, v_n));
    for c in 0..c_n {
        for v in 0..v_n {
            let amp: f64 = rng.gen_range(0.6..1.4);
            let freq: f64 = rng.gen_range(0.5..2.5);
            let phase: f64 = rng.gen_range(0.0..TAU);
            for t in 0..t_n {
                proto[(c, t, v)] = amp * (TAU * freq * t as f64 / t_n as f64 + phase).sin();
            }
        }
    }
    proto
}

fn pair_offset(spec: &SyntheticSpec, class_b: usize, joint: usize) -> Vec<Vec<f64>> {
    // unit-amplitude sinusoid per channel, drawn from class b's own stream
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        spec.seed,
        "pair-offset",
        &[class_b as u64, joint as u64],
    ));
    (0..spec.channels)
        .map(|_| {
            let freq: f64 = rng.gen_range(0.5..2.5);
            let phase: f64 = rng.gen_range(0.0..TAU);
            (0..spec.frames)
                .map(|t| (TAU * freq * t as f64 / spec.frames as f64 + phase).sin())
                .collect()
        })
        .collect()
}

/// Class prototypes with confusable-pair overrides applied: class `b` copies
/// class `a` everywhere except the distinguishing joints, where the
/// trajectories differ by amplitude `separation`.
pub fn prototypes(spec: &SyntheticSpec) -> Result<Vec<Array3<f64>>> {
    spec.validate()?;
    let mut protos: Vec<Array3<f64>> = (0..spec.num_classes).map(|m| prototype(spec, m)).collect();
    for pair in &spec.pairs {
        let base = protos[pair.class_a].clone();
        let mut b = base.clone();
        for &joint in &pair.joints {
            let offset = pair_offset(spec, pair.class_b, joint);
            for c in 0..spec.channels {
                for t in 0..spec.frames {
                    b[(c, t, joint)] += pair.separation * offset[c][t];
                }
            }
        }
        protos[pair.class_b] = b;
    }
    Ok(protos)
}

fn draw_sample(
    spec: &SyntheticSpec,
    proto: &Array3<f64>,
    tag: SplitTag,
    class: usize,
    index: usize,
) -> SkeletonSequence {
    let split_salt = match tag {
        SplitTag::Train => 0u64,
        SplitTag::Test => 1u64,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        spec.seed,
        "sample",
        &[split_salt, class as u64, index as u64],
    ));
    let mut data = proto.clone();
    if spec.noise > 0.0 {
        for e in data.iter_mut() {
            let n: f64 = StandardNormal.sample(&mut rng);
            *e += spec.noise * n;
        }
    }
    SkeletonSequence { data, label: class }
}

/// Generates disjoint train and test splits, class-balanced and deterministic
/// in the spec seed.
pub fn generate(spec: &SyntheticSpec) -> Result<(DatasetSplit, DatasetSplit)> {
    generate_named(spec, &default_class_names(spec.num_classes), default_vocabulary_for(spec)?)
}

/// As [`generate`] but with explicit class names and vocabulary.
pub fn generate_named(
    spec: &SyntheticSpec,
    class_names: &[String],
    vocab: JointVocabulary,
) -> Result<(DatasetSplit, DatasetSplit)> {
    spec.validate()?;
    if class_names.len() != spec.num_classes {
        return Err(Error::Argument(format!(
            "{} class names for {} classes",
            class_names.len(),
            spec.num_classes
        )));
    }
    if vocab.num_joints() != spec.joints {
        return Err(Error::Argument(format!(
            "vocabulary covers {} joints, dataset has {}",
            vocab.num_joints(),
            spec.joints
        )));
    }
    let protos = prototypes(spec)?;
    let mut train = Vec::with_capacity(spec.num_classes * spec.train_per_class);
    let mut test = Vec::with_capacity(spec.num_classes * spec.test_per_class);
    for (class, proto) in protos.iter().enumerate() {
        for i in 0..spec.train_per_class {
            train.push(draw_sample(spec, proto, SplitTag::Train, class, i));
        }
        for i in 0..spec.test_per_class {
            test.push(draw_sample(spec, proto, SplitTag::Test, class, i));
        }
    }
    let train = DatasetSplit {
        sequences: train,
        tag: SplitTag::Train,
        class_names: class_names.to_vec(),
        vocab: vocab.clone(),
    };
    let test = DatasetSplit {
        sequences: test,
        tag: SplitTag::Test,
        class_names: class_names.to_vec(),
        vocab,
    };
    Ok((train, test))
}

/// Desk class names when the spec matches the desk shape, otherwise
/// generated `class-N` placeholders.
pub fn default_class_names(num_classes: usize) -> Vec<String> {
    let desk = desk_class_names();
    if num_classes <= desk.len() {
        desk.into_iter().take(num_classes).collect()
    } else {
        (0..num_classes).map(|i| format!("class-{i}")).collect()
    }
}

fn default_vocabulary_for(spec: &SyntheticSpec) -> Result<JointVocabulary> {
    if spec.joints == 12 {
        Ok(default_vocabulary())
    } else {
        JointVocabulary::new(
            (0..spec.joints)
                .map(|i| VocabEntry {
                    index: i,
                    name: format!("joint-{i}"),
                    aliases: vec![],
                })
                .collect(),
        )
    }
}

/// Joint-connectivity graph for synthetic skeletons: the anatomical chain for
/// the 12-joint layout, a path graph otherwise. Self-loops included.
pub fn skeleton_graph(joints: usize) -> Result<crate::graph::SkeletonGraph> {
    if joints == 12 {
        crate::graph::SkeletonGraph::from_edges(
            12,
            &[
                (0, 1),  // head - neck
                (1, 2),  // neck - left shoulder
                (1, 3),  // neck - right shoulder
                (2, 4),  // left shoulder - left elbow
                (4, 6),  // left elbow - left wrist
                (3, 5),  // right shoulder - right elbow
                (5, 7),  // right elbow - right wrist
                (1, 8),  // neck - left knee
                (8, 10), // left knee - left ankle
                (1, 9),  // neck - right knee
                (9, 11), // right knee - right ankle
            ],
        )
    } else {
        let edges: Vec<(usize, usize)> = (1..joints).map(|v| (v - 1, v)).collect();
        crate::graph::SkeletonGraph::from_edges(joints, &edges)
    }
}

/// How frames are drawn when resampling a sequence to a fixed length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    /// Uniform intervals with a random offset inside each interval.
    Train,
    /// Center of each interval; deterministic.
    Test,
}

/// Resamples to exactly `t_out` frames by splitting `[0, T)` into `t_out`
/// uniform intervals. Sequences shorter than `t_out` repeat frames because
/// consecutive intervals can round to the same source index.
pub fn sample_frames(
    seq: &SkeletonSequence,
    t_out: usize,
    mode: SampleMode,
    seed: u64,
) -> Result<SkeletonSequence> {
    if t_out == 0 {
        return Err(Error::Argument("t_out must be at least 1".into()));
    }
    let (c, t, v) = seq.data.dim();
    let ratio = t as f64 / t_out as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indices: Vec<usize> = (0..t_out)
        .map(|i| {
            let offset = match mode {
                SampleMode::Train => rng.gen_range(0.0..1.0),
                SampleMode::Test => 0.5,
            };
            (((i as f64 + offset) * ratio) as usize).min(t - 1)
        })
        .collect();
    let mut data = Array3::<f64>::zeros((c, t_out, v));
    for (dst, &src) in indices.iter().enumerate() {
        data.slice_mut(ndarray::s![.., dst, ..])
            .assign(&seq.data.slice(ndarray::s![.., src, ..]));
    }
    Ok(SkeletonSequence {
        data,
        label: seq.label,
    })
}

/// Per-class salient joints used by the generated fixture script: pair members
/// get their pair's distinguishing joints, other classes a deterministic
/// class-specific pick.
pub fn fixture_salient_joints(spec: &SyntheticSpec) -> Vec<BTreeSet<usize>> {
    let mut salient: Vec<BTreeSet<usize>> = (0..spec.num_classes)
        .map(|m| {
            BTreeSet::from([
                (2 * m + 1) % spec.joints,
                (3 * m + 5) % spec.joints,
            ])
        })
        .collect();
    for pair in &spec.pairs {
        salient[pair.class_a] = pair.joints.clone();
        salient[pair.class_b] = pair.joints.clone();
    }
    salient
}

fn join_names(vocab: &JointVocabulary, joints: &BTreeSet<usize>) -> String {
    let names: Vec<&str> = joints.iter().filter_map(|&j| vocab.name_of(j)).collect();
    match names.len() {
        0 => "no particular joint".to_string(),
        1 => names[0].to_string(),
        _ => {
            let (last, rest) = names.split_last().unwrap();
            format!("{} and {}", rest.join(", "), last)
        }
    }
}

const MOTION_STYLES: [&str; 8] = [
    "sweeps in a wide arc",
    "stays level and thrusts forward",
    "snaps outward in a fast swing",
    "drives straight down with force",
    "springs upward explosively",
    "folds slowly and smoothly",
    "meets at the midline repeatedly",
    "sinks and holds a deep position",
];

/// Deterministic scripted-LLM responses matching a synthetic dataset: steps
/// 1-5 answer the description chain, step 6 answers the targeted contrast
/// prompt and names the class's salient joints.
pub fn synthetic_fixture_script(
    spec: &SyntheticSpec,
    class_names: &[String],
    vocab: &JointVocabulary,
) -> Result<FixtureScript> {
    if class_names.len() != spec.num_classes {
        return Err(Error::Argument(format!(
            "{} class names for {} classes",
            class_names.len(),
            spec.num_classes
        )));
    }
    let salient = fixture_salient_joints(spec);
    let mut partner: Vec<Option<usize>> = vec![None; spec.num_classes];
    for pair in &spec.pairs {
        partner[pair.class_a] = Some(pair.class_b);
        partner[pair.class_b] = Some(pair.class_a);
    }
    let mut entries = Vec::new();
    for (m, name) in class_names.iter().enumerate() {
        let joints = join_names(vocab, &salient[m]);
        let style = MOTION_STYLES[m % MOTION_STYLES.len()];
        let overview = format!(
            "During {name}, the body settles into a stable stance while one limb chain {style}. \
             The motion repeats with a steady rhythm from start to finish."
        );
        let parts = format!(
            "The movement of {name} is carried mainly by the limb containing the {joints}; \
             the torso stays comparatively still."
        );
        let informative = format!(
            "The most informative joints for recognizing {name} are the {joints}."
        );
        let cues = format!(
            "The key discriminative cue of {name} is how the {joints} trace their path: \
             the trajectory {style} while neighboring joints barely translate."
        );
        let summary = format!(
            "{name}: a rhythmic action where the {joints} dominate; the limb {style}, \
             which separates {name} from superficially similar movements."
        );
        let targeted = match partner[m] {
            Some(p) => format!(
                "Against {partner_name}, watch the {joints}: in {name} they follow a trajectory that {style}, \
                 whereas in {partner_name} the same joints move with a different amplitude profile. \
                 Concentrate on the {joints} to separate the two.",
                partner_name = class_names[p],
            ),
            None => format!(
                "To recognize {name} reliably, concentrate on the {joints}; their trajectory {style}, \
                 which no other class reproduces."
            ),
        };
        for (step, text) in [overview, parts, informative, cues, summary, targeted]
            .into_iter()
            .enumerate()
        {
            entries.push(FixtureEntry {
                class: name.clone(),
                step: step + 1,
                response: text,
            });
        }
    }
    Ok(FixtureScript::new(entries))
}
