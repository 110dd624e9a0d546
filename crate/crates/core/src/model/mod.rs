//! Skeleton encoder: stacked graph-convolution blocks with depthwise temporal
//! convolutions, plus the classifier, auxiliary constraint, and alignment heads.
//!
//! Feature tensors are `(channels, frames, joints)` in standard layout. Every
//! forward primitive has a matching backward in [`grad`], verified against
//! central finite differences.

pub mod grad;

use ndarray::{Array1, Array2, Array3, ArrayView3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SkeletonGraph;

/// Probability floor applied inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Architecture description. The shape chain is validated at build time:
/// layer `l` consumes the channel count produced by layer `l-1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Channels of the raw input sequence.
    pub input_channels: usize,
    /// Output channels per graph-convolution block.
    pub channels: Vec<usize>,
    /// Width of the depthwise temporal convolution in every block.
    pub temporal_kernel: usize,
    /// Temporal stride per block (same length as `channels`).
    pub temporal_strides: Vec<usize>,
    pub num_classes: usize,
    pub num_joints: usize,
    /// Dimension of the alignment embedding.
    pub embed_dim: usize,
    /// Seed for weight initialization.
    pub init_seed: u64,
}

impl ModelConfig {
    /// Desk-scale default: four blocks, 16-16-32-64 channels, temporal width 9
    /// with stride-2 downsampling in the last two blocks.
    pub fn desk(input_channels: usize, num_joints: usize, num_classes: usize) -> Self {
        Self {
            input_channels,
            channels: vec![16, 16, 32, 64],
            temporal_kernel: 9,
            temporal_strides: vec![1, 1, 2, 2],
            num_classes,
            num_joints,
            embed_dim: 64,
            init_seed: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::Config("model needs at least one block".into()));
        }
        if self.channels.len() != self.temporal_strides.len() {
            return Err(Error::Config(format!(
                "{} channel entries but {} temporal strides",
                self.channels.len(),
                self.temporal_strides.len()
            )));
        }
        if self.temporal_kernel == 0 || self.temporal_kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "temporal kernel must be odd and positive, got {}",
                self.temporal_kernel
            )));
        }
        if self.temporal_strides.iter().any(|&s| s == 0) {
            return Err(Error::Config("temporal stride must be positive".into()));
        }
        if self.input_channels == 0
            || self.num_classes == 0
            || self.num_joints == 0
            || self.embed_dim == 0
        {
            return Err(Error::Config(
                "input channels, classes, joints and embed dim must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Channel count entering block `l`.
    fn in_channels(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_channels
        } else {
            self.channels[layer - 1]
        }
    }

    fn last_channels(&self) -> usize {
        *self.channels.last().expect("validated nonempty")
    }
}

/// All learnable tensors of the recognizer and its heads.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub config: ModelConfig,
    /// Per-block graph-convolution weight, shape `(c_in, c_out)`.
    pub gcn: Vec<Array2<f64>>,
    /// Per-block depthwise temporal kernel, shape `(c_out, kernel)`.
    pub temporal: Vec<Array2<f64>>,
    /// Main classifier over the pooled feature, shape `(num_classes, c_last)`.
    pub classifier_w: Array2<f64>,
    pub classifier_b: Array1<f64>,
    /// 1x1 channel convolution of the joint-constrained path, `(c_last, c_last)`.
    pub proj_w: Array2<f64>,
    pub proj_b: Array1<f64>,
    /// Auxiliary classifier over the flattened constrained feature,
    /// shape `(num_classes, c_last * num_joints)`.
    pub aux_w: Array2<f64>,
    pub aux_b: Array1<f64>,
    /// Alignment projection to the embedding space, `(embed_dim, c_last)`.
    pub align_w: Array2<f64>,
    pub align_b: Array1<f64>,
}

fn kaiming_uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Array2<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

impl LayerWeights {
    /// Kaiming-style uniform fan-in initialization; biases start at zero.
    /// Deterministic for a given `config.init_seed`.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut gcn = Vec::with_capacity(config.channels.len());
        let mut temporal = Vec::with_capacity(config.channels.len());
        for (layer, &c_out) in config.channels.iter().enumerate() {
            let c_in = config.in_channels(layer);
            gcn.push(kaiming_uniform(&mut rng, c_in, c_out, c_in));
            temporal.push(kaiming_uniform(
                &mut rng,
                c_out,
                config.temporal_kernel,
                config.temporal_kernel,
            ));
        }
        let c_last = config.last_channels();
        let classifier_w = kaiming_uniform(&mut rng, config.num_classes, c_last, c_last);
        let proj_w = kaiming_uniform(&mut rng, c_last, c_last, c_last);
        let aux_in = c_last * config.num_joints;
        let aux_w = kaiming_uniform(&mut rng, config.num_classes, aux_in, aux_in);
        let align_w = kaiming_uniform(&mut rng, config.embed_dim, c_last, c_last);
        Ok(Self {
            classifier_b: Array1::zeros(config.num_classes),
            proj_b: Array1::zeros(c_last),
            aux_b: Array1::zeros(config.num_classes),
            align_b: Array1::zeros(config.embed_dim),
            config,
            gcn,
            temporal,
            classifier_w,
            proj_w,
            aux_w,
            align_w,
        })
    }

    /// Checks the internal shape chain and compatibility with `(c, v)` input.
    pub fn validate_input(&self, input_channels: usize, num_joints: usize) -> Result<()> {
        if input_channels != self.config.input_channels {
            return Err(Error::State(format!(
                "weights expect {} input channels, sequence has {input_channels}",
                self.config.input_channels
            )));
        }
        if num_joints != self.config.num_joints {
            return Err(Error::State(format!(
                "weights expect {} joints, sequence has {num_joints}",
                self.config.num_joints
            )));
        }
        for (layer, w) in self.gcn.iter().enumerate() {
            let expect = (self.config.in_channels(layer), self.config.channels[layer]);
            if w.dim() != expect {
                return Err(Error::State(format!(
                    "gcn weight {layer} has shape {:?}, expected {expect:?}",
                    w.dim()
                )));
            }
        }
        Ok(())
    }

    /// Named tensors in a stable order, for checkpointing and optimizer state.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for layer in 0..self.gcn.len() {
            names.push(format!("gcn.{layer}.w"));
            names.push(format!("temporal.{layer}.k"));
        }
        for fixed in [
            "classifier.w",
            "classifier.b",
            "proj.w",
            "proj.b",
            "aux.w",
            "aux.b",
            "align.w",
            "align.b",
        ] {
            names.push(fixed.to_string());
        }
        names
    }

    /// Flat mutable views over every tensor, in `tensor_names` order.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for (w, k) in self.gcn.iter_mut().zip(self.temporal.iter_mut()) {
            out.push(w.as_slice_mut().expect("standard layout"));
            out.push(k.as_slice_mut().expect("standard layout"));
        }
        out.push(self.classifier_w.as_slice_mut().expect("standard layout"));
        out.push(self.classifier_b.as_slice_mut().expect("standard layout"));
        out.push(self.proj_w.as_slice_mut().expect("standard layout"));
        out.push(self.proj_b.as_slice_mut().expect("standard layout"));
        out.push(self.aux_w.as_slice_mut().expect("standard layout"));
        out.push(self.aux_b.as_slice_mut().expect("standard layout"));
        out.push(self.align_w.as_slice_mut().expect("standard layout"));
        out.push(self.align_b.as_slice_mut().expect("standard layout"));
        out
    }

    /// Flat read-only views in the same order as `params_mut`.
    pub fn params(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for (w, k) in self.gcn.iter().zip(self.temporal.iter()) {
            out.push(w.as_slice().expect("standard layout"));
            out.push(k.as_slice().expect("standard layout"));
        }
        out.push(self.classifier_w.as_slice().expect("standard layout"));
        out.push(self.classifier_b.as_slice().expect("standard layout"));
        out.push(self.proj_w.as_slice().expect("standard layout"));
        out.push(self.proj_b.as_slice().expect("standard layout"));
        out.push(self.aux_w.as_slice().expect("standard layout"));
        out.push(self.aux_b.as_slice().expect("standard layout"));
        out.push(self.align_w.as_slice().expect("standard layout"));
        out.push(self.align_b.as_slice().expect("standard layout"));
        out
    }

    /// (name, shape, data) triples for the checkpoint writer.
    pub fn tensor_entries(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        for (layer, (w, k)) in self.gcn.iter().zip(self.temporal.iter()).enumerate() {
            out.push((
                format!("gcn.{layer}.w"),
                w.shape().to_vec(),
                w.iter().copied().collect(),
            ));
            out.push((
                format!("temporal.{layer}.k"),
                k.shape().to_vec(),
                k.iter().copied().collect(),
            ));
        }
        let twos: [(&str, &Array2<f64>); 4] = [
            ("classifier.w", &self.classifier_w),
            ("proj.w", &self.proj_w),
            ("aux.w", &self.aux_w),
            ("align.w", &self.align_w),
        ];
        for (name, a) in twos {
            out.push((name.to_string(), a.shape().to_vec(), a.iter().copied().collect()));
        }
        let ones: [(&str, &Array1<f64>); 4] = [
            ("classifier.b", &self.classifier_b),
            ("proj.b", &self.proj_b),
            ("aux.b", &self.aux_b),
            ("align.b", &self.align_b),
        ];
        for (name, a) in ones {
            out.push((name.to_string(), a.shape().to_vec(), a.to_vec()));
        }
        out
    }
}

/// One graph-convolution layer: `ReLU(D^{-1/2} A D^{-1/2} X W)` applied per
/// frame, spatial aggregation over joints shared across time.
pub fn gcn_layer(x: &ArrayView3<f64>, graph: &SkeletonGraph, w: &Array2<f64>) -> Result<Array3<f64>> {
    let (c_in, t, v) = x.dim();
    if w.nrows() != c_in {
        return Err(Error::Config(format!(
            "gcn weight expects {} input channels, feature has {c_in}",
            w.nrows()
        )));
    }
    if graph.num_joints() != v {
        return Err(Error::Config(format!(
            "graph has {} joints, feature has {v}",
            graph.num_joints()
        )));
    }
    let c_out = w.ncols();
    let x2 = x
        .to_owned()
        .into_shape((c_in, t * v))
        .map_err(|e| Error::Shape(e.to_string()))?;
    let mixed = w.t().dot(&x2); // (c_out, t*v)
    let m2 = mixed
        .into_shape((c_out * t, v))
        .map_err(|e| Error::Shape(e.to_string()))?;
    let agg = m2.dot(&graph.normalized().t()); // rows indexed by (channel, frame)
    let mut out = agg
        .into_shape((c_out, t, v))
        .map_err(|e| Error::Shape(e.to_string()))?;
    out.mapv_inplace(|e| e.max(0.0));
    Ok(out)
}

/// Depthwise temporal convolution with zero padding `kernel/2`.
/// Output length is `ceil(t / stride)`.
pub fn temporal_conv(x: &ArrayView3<f64>, kernel: &Array2<f64>, stride: usize) -> Result<Array3<f64>> {
    let (c, t, v) = x.dim();
    if kernel.nrows() != c {
        return Err(Error::Config(format!(
            "temporal kernel expects {} channels, feature has {c}",
            kernel.nrows()
        )));
    }
    let klen = kernel.ncols();
    let pad = klen / 2;
    let t_out = (t + stride - 1) / stride;
    let mut out = Array3::<f64>::zeros((c, t_out, v));
    for ch in 0..c {
        for to in 0..t_out {
            let base = to * stride;
            for u in 0..klen {
                let tin = base + u;
                if tin < pad || tin - pad >= t {
                    continue;
                }
                let tin = tin - pad;
                let k = kernel[(ch, u)];
                let src = x.slice(ndarray::s![ch, tin, ..]);
                let mut dst = out.slice_mut(ndarray::s![ch, to, ..]);
                dst.scaled_add(k, &src);
            }
        }
    }
    Ok(out)
}

/// Runs all blocks: graph convolution followed by the temporal convolution.
pub fn encode(x: &ArrayView3<f64>, weights: &LayerWeights, graph: &SkeletonGraph) -> Result<Array3<f64>> {
    let (c, _, v) = x.dim();
    weights.validate_input(c, v)?;
    if graph.num_joints() != weights.config.num_joints {
        return Err(Error::Config(format!(
            "graph has {} joints, model expects {}",
            graph.num_joints(),
            weights.config.num_joints
        )));
    }
    let mut cur = x.to_owned();
    for (layer, (w, k)) in weights.gcn.iter().zip(weights.temporal.iter()).enumerate() {
        let g = gcn_layer(&cur.view(), graph, w)?;
        cur = temporal_conv(&g.view(), k, weights.config.temporal_strides[layer])?;
    }
    Ok(cur)
}

/// Mean over frames and joints, leaving a per-channel vector.
pub fn global_pool(feat: &ArrayView3<f64>) -> Array1<f64> {
    let (c, t, v) = feat.dim();
    let scale = 1.0 / (t * v) as f64;
    let mut h = Array1::<f64>::zeros(c);
    for ch in 0..c {
        h[ch] = feat.slice(ndarray::s![ch, .., ..]).sum() * scale;
    }
    h
}

/// Numerically stable softmax.
pub fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut out = logits.mapv(|l| (l - max).exp());
    let sum = out.sum();
    out.mapv_inplace(|e| e / sum);
    out
}

/// Pool, apply the classifier head, softmax. Rows sum to one.
pub fn classify(feat: &ArrayView3<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Result<Array1<f64>> {
    let (c, _, _) = feat.dim();
    if w.ncols() != c {
        return Err(Error::Shape(format!(
            "classifier expects {} channels, feature has {c}",
            w.ncols()
        )));
    }
    if feat.iter().any(|e| !e.is_finite()) {
        return Err(Error::Argument("feature contains non-finite entries".into()));
    }
    let h = global_pool(feat);
    let logits = w.dot(&h) + b;
    Ok(softmax(&logits))
}

/// `-log pred[label]` with a `PROB_FLOOR` floor on the selected probability.
pub fn cross_entropy(pred: &Array1<f64>, label: usize) -> Result<f64> {
    if label >= pred.len() {
        return Err(Error::Argument(format!(
            "label {label} out of range for {} classes",
            pred.len()
        )));
    }
    Ok(-(pred[label].max(PROB_FLOOR)).ln())
}
