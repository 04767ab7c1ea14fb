//! Feature extractor architectures with a dot-product classification head.
//!
//! A [`BackboneModel`] is a convolutional extractor producing the last-stage
//! feature map, plus a neck that turns that map into the embedding: either
//! GAP fused with high-order integration (deep and shallow variants), or a
//! small fully-connected stack (the Fashion-MNIST study architectures).

use ndarray::{Array1, Array2, Array3, Array4, ArrayD, Axis};
use rand::RngCore;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::highorder::{self, BankCache, HighOrderParams};
use crate::nn::{
    backward_nodes, for_each_param, forward_eval, forward_train, normal, param_tensor_count,
    seeded_stream, Conv2d, Linear, MaxPool2d, Node, NodeCache, ResidualBlock,
};
use crate::types::{Embedding, FeatureMap, LabeledImage};

/// Embedding head applied to the last feature map.
#[derive(Debug, Clone)]
pub enum Neck {
    /// GAP of the feature map, concatenated with weighted GAP of each
    /// degree-r interaction map.
    Gap { high: HighOrderParams },
    /// Flatten followed by fully-connected layers; `true` applies a relu
    /// after the layer.
    Mlp { layers: Vec<(Linear, bool)> },
}

/// Saved neck state for one forward pass.
pub enum NeckCache {
    Gap { banks: Vec<Vec<BankCache>> },
    Mlp { inputs: Vec<Array2<f32>>, masks: Vec<Option<Vec<bool>>> },
}

impl Neck {
    /// Embedding dimension for a `(K, M, N)` input map.
    pub fn out_dim(&self, k: usize, _m: usize, _n: usize) -> usize {
        match self {
            Neck::Gap { high } => high.embedding_dim(k),
            Neck::Mlp { layers } => layers.last().map(|(l, _)| l.weight.dim().0).unwrap_or(k),
        }
    }

    fn f32_param_count(&self) -> usize {
        match self {
            Neck::Gap { high } => high.banks.iter().map(|b| b.order).sum(),
            Neck::Mlp { layers } => layers
                .iter()
                .map(|(l, _)| 1 + usize::from(l.bias.is_some()))
                .sum(),
        }
    }

    fn forward(&self, a: &Array4<f32>) -> Result<(Array2<f64>, NeckCache)> {
        let (n, k, m, w) = a.dim();
        let p = m * w;
        match self {
            Neck::Gap { high } => {
                let d = high.embedding_dim(k);
                let mut z = Array2::<f64>::zeros((n, d));
                let mut banks = Vec::with_capacity(n);
                for i in 0..n {
                    let flat = a
                        .index_axis(Axis(0), i)
                        .into_shape_with_order((k, p))
                        .map_err(|e| Error::Shape(e.to_string()))?;
                    for ch in 0..k {
                        let s: f64 = flat.row(ch).iter().map(|&v| v as f64).sum();
                        z[(i, ch)] = s / p as f64;
                    }
                    let (tail, cache) = highorder::forward_flat(&flat, high)?;
                    for (j, v) in tail.into_iter().enumerate() {
                        z[(i, k + j)] = v;
                    }
                    banks.push(cache);
                }
                Ok((z, NeckCache::Gap { banks }))
            }
            Neck::Mlp { layers } => {
                let flat = a
                    .view()
                    .into_shape_with_order((n, k * p))
                    .map_err(|e| Error::Shape(e.to_string()))?
                    .to_owned();
                let mut inputs = vec![flat];
                let mut masks = Vec::with_capacity(layers.len());
                for (linear, relu) in layers {
                    let mut y = linear.forward(&inputs.last().unwrap().view());
                    if *relu {
                        let mask: Vec<bool> = y.iter().map(|&v| v > 0.0).collect();
                        y.mapv_inplace(|v| v.max(0.0));
                        masks.push(Some(mask));
                    } else {
                        masks.push(None);
                    }
                    inputs.push(y);
                }
                let last = inputs.last().unwrap();
                let z = last.mapv(|v| v as f64);
                Ok((z, NeckCache::Mlp { inputs, masks }))
            }
        }
    }

    /// Backward from the embedding gradient to the feature-map gradient.
    ///
    /// f32 parameter gradients land in `grads[base..]` (projection banks or
    /// linear layers, in [`visit order`](Self::f32_param_count)); high-order
    /// combination-vector gradients accumulate into `a_grads`.
    fn backward(
        &self,
        a: &Array4<f32>,
        cache: &NeckCache,
        dz: &Array2<f64>,
        grads: &mut [Option<ArrayD<f32>>],
        base: usize,
        a_grads: &mut [Array1<f64>],
    ) -> Result<Array4<f32>> {
        let (n, k, m, w) = a.dim();
        let p = m * w;
        match (self, cache) {
            (Neck::Gap { high }, NeckCache::Gap { banks }) => {
                let mut da = Array4::<f32>::zeros(a.dim());
                let mut g_proj: Vec<Vec<Array2<f32>>> = high
                    .banks
                    .iter()
                    .map(|b| b.projections.iter().map(|pr| Array2::zeros(pr.dim())).collect())
                    .collect();
                for i in 0..n {
                    let flat = a
                        .index_axis(Axis(0), i)
                        .into_shape_with_order((k, p))
                        .map_err(|e| Error::Shape(e.to_string()))?;
                    // First-order path: GAP spreads the gradient uniformly.
                    let mut da_flat = Array2::<f32>::zeros((k, p));
                    for ch in 0..k {
                        let g = (dz[(i, ch)] / p as f64) as f32;
                        da_flat.row_mut(ch).fill(g);
                    }
                    let tail: Vec<f64> = (k..dz.dim().1).map(|j| dz[(i, j)]).collect();
                    if !high.banks.is_empty() {
                        let gx = highorder::backward_flat(
                            &flat,
                            high,
                            &banks[i],
                            &tail,
                            &mut g_proj,
                            a_grads,
                        );
                        da_flat += &gx;
                    }
                    da.index_axis_mut(Axis(0), i).assign(
                        &da_flat
                            .into_shape_with_order((k, m, w))
                            .map_err(|e| Error::Shape(e.to_string()))?,
                    );
                }
                let mut slot = base;
                for bank_grads in g_proj {
                    for g in bank_grads {
                        accumulate(grads, slot, g.into_dyn());
                        slot += 1;
                    }
                }
                Ok(da)
            }
            (Neck::Mlp { layers }, NeckCache::Mlp { inputs, masks }) => {
                let mut g = dz.mapv(|v| v as f32);
                // Slot base per layer in forward order.
                let mut bases = Vec::with_capacity(layers.len());
                let mut at = base;
                for (linear, _) in layers {
                    bases.push(at);
                    at += 1 + usize::from(linear.bias.is_some());
                }
                for (li, (linear, _)) in layers.iter().enumerate().rev() {
                    if let Some(mask) = &masks[li] {
                        for (gv, &mv) in g.iter_mut().zip(mask.iter()) {
                            if !mv {
                                *gv = 0.0;
                            }
                        }
                    }
                    let (gx, gw, gb) = linear.backward(&inputs[li].view(), &g.view());
                    accumulate(grads, bases[li], gw.into_dyn());
                    if let Some(gb) = gb {
                        accumulate(grads, bases[li] + 1, gb.into_dyn());
                    }
                    g = gx;
                }
                g.into_shape_with_order((n, k, m, w))
                    .map(|v| v.to_owned())
                    .map_err(|e| Error::Shape(e.to_string()))
            }
            _ => Err(Error::Shape("neck cache kind mismatch".into())),
        }
    }
}

fn accumulate(grads: &mut [Option<ArrayD<f32>>], slot: usize, g: ArrayD<f32>) {
    match &mut grads[slot] {
        Some(existing) => *existing += &g,
        empty => *empty = Some(g),
    }
}

/// A feature extractor with its embedding neck.
#[derive(Debug, Clone)]
pub struct BackboneModel {
    pub architecture_tag: String,
    /// Expected input as `(channels, height, width)`.
    pub input_dims: (usize, usize, usize),
    pub extractor: Vec<Node>,
    pub neck: Neck,
}

/// Full forward state kept for a training step.
pub struct ForwardCache {
    pub features: Array4<f32>,
    pub node_caches: Vec<NodeCache>,
    pub neck_cache: NeckCache,
}

impl BackboneModel {
    /// Build a named architecture. Supported tags: `resnet18-like`
    /// (224x224x3), `shallow4` (84x84x3), `mnist` and `mnist2d` (28x28x1).
    /// The high-order head applies to the GAP architectures and follows
    /// `config.order` / `config.rank`.
    pub fn build(tag: &str, config: &RunConfig) -> Result<Self> {
        let mut rng = seeded_stream(config.seed, &format!("init/{tag}"));
        match tag {
            "resnet18-like" => {
                let mut nodes = vec![
                    Node::Conv(conv_init(64, 3, 7, 2, 3, &mut rng)),
                    Node::BatchNorm(crate::nn::BatchNorm2d::new(64)),
                    Node::Relu,
                    Node::MaxPool(MaxPool2d::new(3, 2, 1)),
                ];
                let mut channels = 64;
                for (stage, &out) in [64usize, 128, 256, 512].iter().enumerate() {
                    let stride = if stage == 0 { 1 } else { 2 };
                    nodes.push(Node::Residual(basic_block(channels, out, stride, &mut rng)));
                    nodes.push(Node::Residual(basic_block(out, out, 1, &mut rng)));
                    channels = out;
                }
                let high = HighOrderParams::init(
                    config.order,
                    512,
                    &config.ranks_for(512),
                    &mut rng,
                )?;
                Ok(BackboneModel {
                    architecture_tag: tag.to_string(),
                    input_dims: (3, config.image_size_main, config.image_size_main),
                    extractor: nodes,
                    neck: Neck::Gap { high },
                })
            }
            "shallow4" => {
                let mut nodes = Vec::new();
                let mut channels = 3;
                for &out in &[32usize, 32, 64, 64] {
                    nodes.push(Node::Conv(conv_init(out, channels, 3, 1, 1, &mut rng)));
                    nodes.push(Node::Relu);
                    nodes.push(Node::MaxPool(MaxPool2d::new(2, 2, 0)));
                    channels = out;
                }
                let high = HighOrderParams::init(
                    config.order,
                    64,
                    &config.ranks_for(64),
                    &mut rng,
                )?;
                Ok(BackboneModel {
                    architecture_tag: tag.to_string(),
                    input_dims: (3, config.image_size_aux, config.image_size_aux),
                    extractor: nodes,
                    neck: Neck::Gap { high },
                })
            }
            "mnist" | "mnist2d" => {
                let nodes = vec![
                    Node::Conv(conv_init(16, 1, 3, 1, 1, &mut rng)),
                    Node::Relu,
                    Node::MaxPool(MaxPool2d::new(2, 2, 0)),
                    Node::Conv(conv_init(32, 16, 3, 1, 1, &mut rng)),
                    Node::Relu,
                    Node::MaxPool(MaxPool2d::new(2, 2, 0)),
                ];
                let flat = 32 * 7 * 7;
                let layers = if tag == "mnist" {
                    // Activated embedding layer: center-style losses act on
                    // the rectified features.
                    vec![(linear_init(64, flat, &mut rng), true)]
                } else {
                    // 2-unit bottleneck for the embedding-scatter figures.
                    vec![
                        (linear_init(64, flat, &mut rng), true),
                        (linear_init(2, 64, &mut rng), false),
                    ]
                };
                Ok(BackboneModel {
                    architecture_tag: tag.to_string(),
                    input_dims: (1, 28, 28),
                    extractor: nodes,
                    neck: Neck::Mlp { layers },
                })
            }
            other => Err(Error::Config(format!(
                "unknown architecture `{other}`; expected resnet18-like | shallow4 | mnist | mnist2d"
            ))),
        }
    }

    /// Custom model from explicit parts (used by tests and tools).
    pub fn custom(
        tag: impl Into<String>,
        input_dims: (usize, usize, usize),
        extractor: Vec<Node>,
        neck: Neck,
    ) -> Self {
        BackboneModel {
            architecture_tag: tag.into(),
            input_dims,
            extractor,
            neck,
        }
    }

    /// Shape of the last feature map for the configured input size.
    pub fn feature_dims(&self) -> (usize, usize, usize) {
        let (_, mut h, mut w) = self.input_dims;
        let mut c = self.input_dims.0;
        fn walk(nodes: &[Node], c: &mut usize, h: &mut usize, w: &mut usize) {
            for node in nodes {
                match node {
                    Node::Conv(conv) => {
                        let (oh, ow) = conv.out_hw(*h, *w);
                        *c = conv.weight.dim().0;
                        *h = oh;
                        *w = ow;
                    }
                    Node::MaxPool(pool) => {
                        let (oh, ow) = pool.out_hw(*h, *w);
                        *h = oh;
                        *w = ow;
                    }
                    Node::BatchNorm(_) | Node::Relu => {}
                    Node::Residual(block) => walk(&block.body, c, h, w),
                }
            }
        }
        walk(&self.extractor, &mut c, &mut h, &mut w);
        (c, h, w)
    }

    /// Embedding dimension produced by the neck.
    pub fn embedding_dim(&self) -> usize {
        let (k, m, n) = self.feature_dims();
        self.neck.out_dim(k, m, n)
    }

    fn check_input(&self, x: &Array4<f32>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if (c, h, w) != self.input_dims {
            return Err(Error::Shape(format!(
                "model `{}` expects {:?} input, got {:?}",
                self.architecture_tag, self.input_dims, (c, h, w)
            )));
        }
        Ok(())
    }

    /// Inference forward over a `(N, C, H, W)` batch: the last feature map
    /// and the embeddings. Deterministic for fixed parameters.
    pub fn forward_arrays(&self, x: &Array4<f32>) -> Result<(Array4<f32>, Array2<f64>)> {
        self.check_input(x)?;
        let a = forward_eval(&self.extractor, &x.view());
        let (z, _) = self.neck.forward(&a)?;
        Ok((a, z))
    }

    /// Inference forward over decoded images (spec batch form).
    pub fn forward(&self, batch: &[LabeledImage]) -> Result<(Vec<FeatureMap>, Vec<Embedding>)> {
        let x = images_to_batch(batch, self.input_dims)?;
        let (a, z) = self.forward_arrays(&x)?;
        let tag = format!("{}/features", self.architecture_tag);
        let maps = (0..batch.len())
            .map(|i| FeatureMap::new(a.index_axis(Axis(0), i).to_owned(), tag.clone()))
            .collect::<Result<Vec<_>>>()?;
        let embeds = (0..batch.len())
            .map(|i| Embedding::new(z.row(i).to_owned()))
            .collect::<Result<Vec<_>>>()?;
        Ok((maps, embeds))
    }

    /// Training-mode forward (batch-norm running stats are updated).
    pub fn forward_train(&mut self, x: &Array4<f32>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(x)?;
        let (a, node_caches) = forward_train(&mut self.extractor, &x.view());
        let (z, neck_cache) = self.neck.forward(&a)?;
        Ok((
            z,
            ForwardCache {
                features: a,
                node_caches,
                neck_cache,
            },
        ))
    }

    /// Number of f32 gradient slots (extractor + neck).
    pub fn f32_slot_count(&self) -> usize {
        param_tensor_count(&self.extractor) + self.neck.f32_param_count()
    }

    /// Combination-vector gradient holders, one per high-order bank.
    pub fn new_a_grads(&self) -> Vec<Array1<f64>> {
        match &self.neck {
            Neck::Gap { high } => high.banks.iter().map(|b| Array1::zeros(b.rank())).collect(),
            Neck::Mlp { .. } => Vec::new(),
        }
    }

    /// Full backward from the embedding gradient. Returns the input-side
    /// gradient slots plus high-order combination gradients.
    pub fn backward(
        &self,
        x: &Array4<f32>,
        cache: &ForwardCache,
        dz: &Array2<f64>,
    ) -> Result<(Vec<Option<ArrayD<f32>>>, Vec<Array1<f64>>)> {
        let mut grads: Vec<Option<ArrayD<f32>>> = vec![None; self.f32_slot_count()];
        let mut a_grads = self.new_a_grads();
        let extractor_slots = param_tensor_count(&self.extractor);
        let da = self.neck.backward(
            &cache.features,
            &cache.neck_cache,
            dz,
            &mut grads,
            extractor_slots,
            &mut a_grads,
        )?;
        let _ = backward_nodes(&self.extractor, &cache.node_caches, da, &mut grads, 0);
        let _ = x;
        Ok((grads, a_grads))
    }

    /// Embed one feature map through the neck (inference mode).
    pub fn neck_forward_single(&self, map: &FeatureMap) -> Result<(Embedding, ())> {
        let (k, m, n) = map.data.dim();
        let a = map
            .data
            .clone()
            .into_shape_with_order((1, k, m, n))
            .map_err(|e| Error::Shape(e.to_string()))?;
        let (z, _) = self.neck.forward(&a)?;
        Ok((Embedding::new(z.row(0).to_owned())?, ()))
    }

    /// Gradient of one class score w.r.t. a single feature map, through the
    /// active neck and the given head row. This is the Grad-CAM primitive.
    pub fn score_gradient(
        &self,
        head: &ClassifierHead,
        map: &FeatureMap,
        class: usize,
    ) -> Result<Array3<f32>> {
        let (k, m, n) = map.data.dim();
        if class >= head.weight.dim().0 {
            return Err(Error::Config(format!(
                "class index {class} out of range (head has {} classes)",
                head.weight.dim().0
            )));
        }
        let a = map
            .data
            .clone()
            .into_shape_with_order((1, k, m, n))
            .map_err(|e| Error::Shape(e.to_string()))?;
        let (z, neck_cache) = self.neck.forward(&a)?;
        if head.weight.dim().1 != z.dim().1 {
            return Err(Error::Shape(format!(
                "head expects {}-d embeddings, neck produced {}",
                head.weight.dim().1,
                z.dim().1
            )));
        }
        // d(score_c)/dz is the head row c.
        let dz = head
            .weight
            .row(class)
            .to_owned()
            .into_shape_with_order((1, head.weight.dim().1))
            .map_err(|e| Error::Shape(e.to_string()))?;
        let mut grads: Vec<Option<ArrayD<f32>>> = vec![None; self.neck.f32_param_count()];
        let mut a_grads = self.new_a_grads();
        let da = self
            .neck
            .backward(&a, &neck_cache, &dz, &mut grads, 0, &mut a_grads)?;
        let da = da
            .into_shape_with_order((k, m, n))
            .map_err(|e| Error::Shape(e.to_string()))?;
        if !da.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite score gradient".into()));
        }
        Ok(da)
    }

    /// Apply SGD to every parameter (extractor, neck, high-order vectors).
    pub fn sgd_step(
        &mut self,
        sgd: &mut crate::nn::Sgd,
        grads: &[Option<ArrayD<f32>>],
        a_grads: &[Array1<f64>],
    ) {
        let mut slot = 0usize;
        for_each_param(&mut self.extractor, &mut |param| {
            if let Some(g) = &grads[slot] {
                sgd.step_f32(slot, param, g.as_slice().unwrap());
            }
            slot += 1;
        });
        match &mut self.neck {
            Neck::Gap { high } => {
                for (bi, bank) in high.banks.iter_mut().enumerate() {
                    for proj in &mut bank.projections {
                        if let Some(g) = &grads[slot] {
                            sgd.step_f32(slot, proj.as_slice_mut().unwrap(), g.as_slice().unwrap());
                        }
                        slot += 1;
                    }
                    sgd.step_f64(
                        bi,
                        bank.weights.as_slice_mut().unwrap(),
                        a_grads[bi].as_slice().unwrap(),
                    );
                }
            }
            Neck::Mlp { layers } => {
                for (linear, _) in layers.iter_mut() {
                    if let Some(g) = &grads[slot] {
                        sgd.step_f32(slot, linear.weight.as_slice_mut().unwrap(), g.as_slice().unwrap());
                    }
                    slot += 1;
                    if let Some(b) = &mut linear.bias {
                        if let Some(g) = &grads[slot] {
                            sgd.step_f32(slot, b.as_slice_mut().unwrap(), g.as_slice().unwrap());
                        }
                        slot += 1;
                    }
                }
            }
        }
    }
}

/// Dot-product classification head over the base classes.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    /// One weight row per class, `(classes, d)`.
    pub weight: Array2<f64>,
    pub bias: Option<Array1<f64>>,
}

impl ClassifierHead {
    pub fn init(classes: usize, dim: usize, rng: &mut impl RngCore) -> Self {
        let scale = 1.0 / (dim as f64).sqrt();
        ClassifierHead {
            weight: Array2::from_shape_fn((classes, dim), |_| normal(rng) * scale),
            bias: None,
        }
    }

    pub fn classes(&self) -> usize {
        self.weight.dim().0
    }
}

/// Dot-product scores `s_k = <z, w_k>` (+ bias when present).
pub fn class_scores(head: &ClassifierHead, z: &Embedding) -> Result<Array1<f64>> {
    if z.dim() != head.weight.dim().1 {
        return Err(Error::Shape(format!(
            "embedding dim {} does not match head dim {}",
            z.dim(),
            head.weight.dim().1
        )));
    }
    let mut s = head.weight.dot(&z.values);
    if let Some(b) = &head.bias {
        s += b;
    }
    Ok(s)
}

/// Stack decoded images into a `(N, C, H, W)` batch, checking sizes.
pub fn images_to_batch(
    batch: &[LabeledImage],
    dims: (usize, usize, usize),
) -> Result<Array4<f32>> {
    let (c, h, w) = dims;
    let mut x = Array4::<f32>::zeros((batch.len(), c, h, w));
    for (i, img) in batch.iter().enumerate() {
        if img.height() != h || img.width() != w || img.channels() != c {
            return Err(Error::Shape(format!(
                "image {} is {}x{}x{}, expected {h}x{w}x{c}",
                img.source_path,
                img.height(),
                img.width(),
                img.channels()
            )));
        }
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    x[(i, ch, y, xx)] = img.pixels[(y, xx, ch)];
                }
            }
        }
    }
    Ok(x)
}

fn conv_init(
    out: usize,
    inp: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    rng: &mut impl RngCore,
) -> Conv2d {
    let fan_in = (inp * kernel * kernel) as f64;
    let std = (2.0 / fan_in).sqrt();
    let weight = Array4::from_shape_fn((out, inp, kernel, kernel), |_| (normal(rng) * std) as f32);
    Conv2d::new(weight, None, stride, pad)
}

fn linear_init(out: usize, inp: usize, rng: &mut impl RngCore) -> Linear {
    let std = (2.0 / inp as f64).sqrt();
    let weight = Array2::from_shape_fn((out, inp), |_| (normal(rng) * std) as f32);
    Linear::new(weight, Some(Array1::zeros(out)))
}

fn basic_block(inp: usize, out: usize, stride: usize, rng: &mut impl RngCore) -> ResidualBlock {
    let body = vec![
        Node::Conv(conv_init(out, inp, 3, stride, 1, rng)),
        Node::BatchNorm(crate::nn::BatchNorm2d::new(out)),
        Node::Relu,
        Node::Conv(conv_init(out, out, 3, 1, 1, rng)),
        Node::BatchNorm(crate::nn::BatchNorm2d::new(out)),
    ];
    let shortcut = if stride != 1 || inp != out {
        Some(vec![
            Node::Conv(conv_init(out, inp, 1, stride, 0, rng)),
            Node::BatchNorm(crate::nn::BatchNorm2d::new(out)),
        ])
    } else {
        None
    };
    ResidualBlock { body, shortcut }
}
