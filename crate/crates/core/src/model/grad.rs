//! Forward caches and hand-written backpropagation for the three loss paths
//! (classification, joint-constrained, alignment).
//!
//! `backward` consumes seed gradients at the head outputs (`d logits`, `d z`)
//! so each loss can be differentiated in isolation or in any weighted
//! combination; the caller owns the loss-specific seed computation.

use ndarray::{s, Array1, Array2, Array3, ArrayView3};

use super::{gcn_layer, global_pool, softmax, temporal_conv, LayerWeights};
use crate::error::{Error, Result};
use crate::graph::SkeletonGraph;

/// Gradient accumulator mirroring [`LayerWeights`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub gcn: Vec<Array2<f64>>,
    pub temporal: Vec<Array2<f64>>,
    pub classifier_w: Array2<f64>,
    pub classifier_b: Array1<f64>,
    pub proj_w: Array2<f64>,
    pub proj_b: Array1<f64>,
    pub aux_w: Array2<f64>,
    pub aux_b: Array1<f64>,
    pub align_w: Array2<f64>,
    pub align_b: Array1<f64>,
}

impl Gradients {
    pub fn zeros_like(weights: &LayerWeights) -> Self {
        Self {
            gcn: weights.gcn.iter().map(|w| Array2::zeros(w.dim())).collect(),
            temporal: weights
                .temporal
                .iter()
                .map(|k| Array2::zeros(k.dim()))
                .collect(),
            classifier_w: Array2::zeros(weights.classifier_w.dim()),
            classifier_b: Array1::zeros(weights.classifier_b.len()),
            proj_w: Array2::zeros(weights.proj_w.dim()),
            proj_b: Array1::zeros(weights.proj_b.len()),
            aux_w: Array2::zeros(weights.aux_w.dim()),
            aux_b: Array1::zeros(weights.aux_b.len()),
            align_w: Array2::zeros(weights.align_w.dim()),
            align_b: Array1::zeros(weights.align_b.len()),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.gcn.iter_mut().zip(other.gcn.iter()) {
            *a += b;
        }
        for (a, b) in self.temporal.iter_mut().zip(other.temporal.iter()) {
            *a += b;
        }
        self.classifier_w += &other.classifier_w;
        self.classifier_b += &other.classifier_b;
        self.proj_w += &other.proj_w;
        self.proj_b += &other.proj_b;
        self.aux_w += &other.aux_w;
        self.aux_b += &other.aux_b;
        self.align_w += &other.align_w;
        self.align_b += &other.align_b;
    }

    /// Flat read-only views in the same order as `LayerWeights::params`.
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
}

/// Intermediates of the joint-constrained path.
#[derive(Debug, Clone)]
pub struct AuxCache {
    /// Temporal mean of the final feature, `(c_last, joints)`.
    pub x_pre: Array2<f64>,
    /// `x_pre . K`.
    pub x_k: Array2<f64>,
    /// Constraint matrix used in the forward pass.
    pub k: Array2<f64>,
    /// Flattened projection output (row-major channel x joint).
    pub flat: Array1<f64>,
    /// Auxiliary classifier distribution.
    pub prob: Array1<f64>,
}

/// Everything the backward pass needs from one sample's forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    block_in: Vec<Array3<f64>>,
    gcn_out: Vec<Array3<f64>>,
    pub feat: Array3<f64>,
    pub h: Array1<f64>,
    pub cls_prob: Array1<f64>,
    pub aux: Option<AuxCache>,
    /// Raw (un-normalized) alignment projection.
    pub z: Option<Array1<f64>>,
}

/// Mean over the temporal axis, leaving `(channels, joints)`.
pub fn temporal_mean(feat: &ArrayView3<f64>) -> Array2<f64> {
    let (c, t, v) = feat.dim();
    let mut out = Array2::<f64>::zeros((c, v));
    let scale = 1.0 / t as f64;
    for ti in 0..t {
        out.scaled_add(scale, &feat.slice(s![.., ti, ..]));
    }
    out
}

/// Constrained-path forward: temporal mean, `x_pre . K`, 1x1 channel
/// convolution, flatten. Returns the flattened embedding.
pub fn constrained_projection(
    feat: &ArrayView3<f64>,
    k: &Array2<f64>,
    proj_w: &Array2<f64>,
    proj_b: &Array1<f64>,
) -> Result<Array1<f64>> {
    let (c, _, v) = feat.dim();
    if k.dim() != (v, v) {
        return Err(Error::Shape(format!(
            "constraint matrix is {:?}, feature has {v} joints",
            k.dim()
        )));
    }
    if proj_w.dim() != (c, c) {
        return Err(Error::Shape(format!(
            "projection is {:?}, feature has {c} channels",
            proj_w.dim()
        )));
    }
    let x_pre = temporal_mean(feat);
    let x_k = x_pre.dot(k);
    let mut proj = proj_w.dot(&x_k);
    for (mut row, &b) in proj.rows_mut().into_iter().zip(proj_b.iter()) {
        row += b;
    }
    Ok(Array1::from_iter(proj.iter().copied()))
}

/// Forward pass keeping all intermediates. `k` enables the constrained path,
/// `with_align` the alignment projection.
pub fn forward_cached(
    weights: &LayerWeights,
    graph: &SkeletonGraph,
    x: &ArrayView3<f64>,
    k: Option<&Array2<f64>>,
    with_align: bool,
) -> Result<ForwardCache> {
    let (c, _, v) = x.dim();
    weights.validate_input(c, v)?;
    if graph.num_joints() != v {
        return Err(Error::Config(format!(
            "graph has {} joints, input has {v}",
            graph.num_joints()
        )));
    }

    let layers = weights.gcn.len();
    let mut block_in = Vec::with_capacity(layers);
    let mut gcn_out = Vec::with_capacity(layers);
    let mut cur = x.to_owned();
    for layer in 0..layers {
        let g = gcn_layer(&cur.view(), graph, &weights.gcn[layer])?;
        let t = temporal_conv(
            &g.view(),
            &weights.temporal[layer],
            weights.config.temporal_strides[layer],
        )?;
        block_in.push(cur);
        gcn_out.push(g);
        cur = t;
    }
    let feat = cur;
    let h = global_pool(&feat.view());
    let logits = weights.classifier_w.dot(&h) + &weights.classifier_b;
    let cls_prob = softmax(&logits);

    let aux = match k {
        Some(kmat) => {
            let flat = constrained_projection(&feat.view(), kmat, &weights.proj_w, &weights.proj_b)?;
            let (c_last, _, _) = feat.dim();
            let x_pre = temporal_mean(&feat.view());
            let x_k = x_pre.dot(kmat);
            let aux_logits = weights.aux_w.dot(&flat) + &weights.aux_b;
            let prob = softmax(&aux_logits);
            let _ = c_last;
            Some(AuxCache {
                x_pre,
                x_k,
                k: kmat.clone(),
                flat,
                prob,
            })
        }
        None => None,
    };

    let z = if with_align {
        Some(weights.align_w.dot(&h) + &weights.align_b)
    } else {
        None
    };

    Ok(ForwardCache {
        block_in,
        gcn_out,
        feat,
        h,
        cls_prob,
        aux,
        z,
    })
}

fn gcn_backward(
    x_in: &Array3<f64>,
    graph: &SkeletonGraph,
    w: &Array2<f64>,
    d_post: &Array3<f64>,
    relu_out: &Array3<f64>,
) -> (Array2<f64>, Array3<f64>) {
    let (c_in, t, v) = x_in.dim();
    let c_out = w.ncols();
    // mask through the ReLU
    let mut dm = d_post.clone();
    ndarray::Zip::from(&mut dm).and(relu_out).for_each(|d, &o| {
        if o <= 0.0 {
            *d = 0.0;
        }
    });
    let dm2 = dm
        .into_shape((c_out * t, v))
        .expect("standard layout");
    // forward used M = Y_r . A^T, so dY_r = dM . A
    let dy_r = dm2.dot(graph.normalized());
    let dy = dy_r
        .into_shape((c_out, t * v))
        .expect("standard layout");
    let x2 = x_in
        .view()
        .into_shape((c_in, t * v))
        .expect("standard layout");
    let dw = x2.dot(&dy.t());
    let dx2 = w.dot(&dy);
    let dx = dx2.into_shape((c_in, t, v)).expect("standard layout");
    (dw, dx)
}

fn temporal_conv_backward(
    x_in: &Array3<f64>,
    kernel: &Array2<f64>,
    stride: usize,
    d_out: &Array3<f64>,
) -> (Array2<f64>, Array3<f64>) {
    let (c, t, v) = x_in.dim();
    let klen = kernel.ncols();
    let pad = klen / 2;
    let t_out = d_out.dim().1;
    let mut dk = Array2::<f64>::zeros((c, klen));
    let mut dx = Array3::<f64>::zeros((c, t, v));
    for ch in 0..c {
        for to in 0..t_out {
            let base = to * stride;
            for u in 0..klen {
                let tin = base + u;
                if tin < pad || tin - pad >= t {
                    continue;
                }
                let tin = tin - pad;
                let dslice = d_out.slice(s![ch, to, ..]);
                dk[(ch, u)] += dslice.dot(&x_in.slice(s![ch, tin, ..]));
                let mut dst = dx.slice_mut(s![ch, tin, ..]);
                dst.scaled_add(kernel[(ch, u)], &dslice);
            }
        }
    }
    (dk, dx)
}

/// Backpropagates the supplied head gradients into `grads`.
///
/// `d_cls_logits` seeds the classifier head, `d_aux_logits` the constrained
/// head (requires `cache.aux`), `d_z` the raw alignment projection.
pub fn backward(
    weights: &LayerWeights,
    graph: &SkeletonGraph,
    cache: &ForwardCache,
    d_cls_logits: Option<&Array1<f64>>,
    d_aux_logits: Option<&Array1<f64>>,
    d_z: Option<&Array1<f64>>,
    grads: &mut Gradients,
) {
    let (c_last, t_last, v) = cache.feat.dim();
    let mut dh = Array1::<f64>::zeros(c_last);
    let mut dfeat = Array3::<f64>::zeros((c_last, t_last, v));

    if let Some(dl) = d_cls_logits {
        for (i, &d) in dl.iter().enumerate() {
            let mut row = grads.classifier_w.row_mut(i);
            row.scaled_add(d, &cache.h);
            grads.classifier_b[i] += d;
        }
        dh += &weights.classifier_w.t().dot(dl);
    }

    if let Some(dz) = d_z {
        for (i, &d) in dz.iter().enumerate() {
            let mut row = grads.align_w.row_mut(i);
            row.scaled_add(d, &cache.h);
            grads.align_b[i] += d;
        }
        dh += &weights.align_w.t().dot(dz);
    }

    let pool_scale = 1.0 / (t_last * v) as f64;
    for c in 0..c_last {
        let d = dh[c] * pool_scale;
        dfeat.slice_mut(s![c, .., ..]).mapv_inplace(|e| e + d);
    }

    if let (Some(dla), Some(aux)) = (d_aux_logits, cache.aux.as_ref()) {
        for (i, &d) in dla.iter().enumerate() {
            let mut row = grads.aux_w.row_mut(i);
            row.scaled_add(d, &aux.flat);
            grads.aux_b[i] += d;
        }
        let dflat = weights.aux_w.t().dot(dla);
        let dy = dflat
            .into_shape((c_last, v))
            .expect("standard layout");
        grads.proj_w += &dy.dot(&aux.x_k.t());
        for (c, row) in dy.rows().into_iter().enumerate() {
            grads.proj_b[c] += row.sum();
        }
        let dx_k = weights.proj_w.t().dot(&dy);
        let dx_pre = dx_k.dot(&aux.k.t());
        let mean_scale = 1.0 / t_last as f64;
        for ti in 0..t_last {
            dfeat
                .slice_mut(s![.., ti, ..])
                .scaled_add(mean_scale, &dx_pre);
        }
    }

    let mut dcur = dfeat;
    for layer in (0..weights.gcn.len()).rev() {
        let (dk, dpost) = temporal_conv_backward(
            &cache.gcn_out[layer],
            &weights.temporal[layer],
            weights.config.temporal_strides[layer],
            &dcur,
        );
        grads.temporal[layer] += &dk;
        let (dw, dx) = gcn_backward(
            &cache.block_in[layer],
            graph,
            &weights.gcn[layer],
            &dpost,
            &cache.gcn_out[layer],
        );
        grads.gcn[layer] += &dw;
        dcur = dx;
    }
}

/// Softmax cross-entropy seed: `p - onehot(label)`.
pub fn ce_logit_grad(prob: &Array1<f64>, label: usize) -> Array1<f64> {
    let mut d = prob.clone();
    d[label] -= 1.0;
    d
}
