//! Layer graph for the convolutional feature extractors: a node list with
//! training/eval forward passes and a reverse-mode backward pass.

use ndarray::{Array4, ArrayD, ArrayView4};

use super::conv::Conv2d;
use super::layers::{BatchNorm2d, BnCache, MaxPool2d};

/// One node of a feature extractor.
#[derive(Debug, Clone)]
pub enum Node {
    Conv(Conv2d),
    BatchNorm(BatchNorm2d),
    Relu,
    MaxPool(MaxPool2d),
    Residual(ResidualBlock),
}

/// `y = relu(body(x) + shortcut(x))`; identity shortcut when `None`.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub body: Vec<Node>,
    pub shortcut: Option<Vec<Node>>,
}

/// Per-node saved state from a training-mode forward pass.
pub enum NodeCache {
    Conv { x: Array4<f32> },
    Bn(BnCache),
    Relu { mask: Vec<bool> },
    MaxPool { idx: Vec<u32>, in_dims: (usize, usize, usize, usize) },
    Residual { body: Vec<NodeCache>, shortcut: Option<Vec<NodeCache>>, mask: Vec<bool> },
}

fn relu_forward(x: Array4<f32>) -> (Array4<f32>, Vec<bool>) {
    let mask: Vec<bool> = x.iter().map(|&v| v > 0.0).collect();
    let y = x.mapv(|v| v.max(0.0));
    (y, mask)
}

fn relu_backward(gy: &mut Array4<f32>, mask: &[bool]) {
    for (g, &m) in gy.iter_mut().zip(mask.iter()) {
        if !m {
            *g = 0.0;
        }
    }
}

/// Training-mode forward. Returns the output and per-node caches; batch
/// norm running statistics are updated in place.
pub fn forward_train(nodes: &mut [Node], x: &ArrayView4<f32>) -> (Array4<f32>, Vec<NodeCache>) {
    let mut cur = x.to_owned();
    let mut caches = Vec::with_capacity(nodes.len());
    for node in nodes.iter_mut() {
        match node {
            Node::Conv(conv) => {
                let y = conv.forward(&cur.view());
                caches.push(NodeCache::Conv { x: cur });
                cur = y;
            }
            Node::BatchNorm(bn) => {
                let (y, cache) = bn.forward_train(&cur.view());
                caches.push(NodeCache::Bn(cache));
                cur = y;
            }
            Node::Relu => {
                let (y, mask) = relu_forward(cur);
                caches.push(NodeCache::Relu { mask });
                cur = y;
            }
            Node::MaxPool(pool) => {
                let in_dims = cur.dim();
                let (y, idx) = pool.forward(&cur.view());
                caches.push(NodeCache::MaxPool { idx, in_dims });
                cur = y;
            }
            Node::Residual(block) => {
                let (body_y, body_cache) = forward_train(&mut block.body, &cur.view());
                let (short_y, short_cache) = match &mut block.shortcut {
                    Some(sc) => {
                        let (y, c) = forward_train(sc, &cur.view());
                        (y, Some(c))
                    }
                    None => (cur.clone(), None),
                };
                let (y, mask) = relu_forward(body_y + short_y);
                caches.push(NodeCache::Residual {
                    body: body_cache,
                    shortcut: short_cache,
                    mask,
                });
                cur = y;
            }
        }
    }
    (cur, caches)
}

/// Inference-mode forward (running batch-norm statistics, no caches).
pub fn forward_eval(nodes: &[Node], x: &ArrayView4<f32>) -> Array4<f32> {
    let mut cur = x.to_owned();
    for node in nodes {
        cur = match node {
            Node::Conv(conv) => conv.forward(&cur.view()),
            Node::BatchNorm(bn) => bn.forward_eval(&cur.view()),
            Node::Relu => cur.mapv(|v| v.max(0.0)),
            Node::MaxPool(pool) => pool.forward(&cur.view()).0,
            Node::Residual(block) => {
                let body_y = forward_eval(&block.body, &cur.view());
                let short_y = match &block.shortcut {
                    Some(sc) => forward_eval(sc, &cur.view()),
                    None => cur.clone(),
                };
                (body_y + short_y).mapv(|v| v.max(0.0))
            }
        };
    }
    cur
}

/// Number of trainable parameter tensors in a node list.
pub fn param_tensor_count(nodes: &[Node]) -> usize {
    nodes
        .iter()
        .map(|n| match n {
            Node::Conv(c) => 1 + usize::from(c.bias.is_some()),
            Node::BatchNorm(_) => 2,
            Node::Relu | Node::MaxPool(_) => 0,
            Node::Residual(b) => {
                param_tensor_count(&b.body)
                    + b.shortcut.as_ref().map_or(0, |s| param_tensor_count(s))
            }
        })
        .sum()
}

/// Visit every trainable parameter tensor, in the same stable order used
/// by [`backward_nodes`] for its gradient slots.
pub fn for_each_param(nodes: &mut [Node], f: &mut impl FnMut(&mut [f32])) {
    for node in nodes.iter_mut() {
        match node {
            Node::Conv(c) => {
                f(c.weight.as_slice_mut().unwrap());
                if let Some(b) = &mut c.bias {
                    f(b.as_slice_mut().unwrap());
                }
            }
            Node::BatchNorm(bn) => {
                f(bn.gamma.as_slice_mut().unwrap());
                f(bn.beta.as_slice_mut().unwrap());
            }
            Node::Relu | Node::MaxPool(_) => {}
            Node::Residual(b) => {
                for_each_param(&mut b.body, f);
                if let Some(s) = &mut b.shortcut {
                    for_each_param(s, f);
                }
            }
        }
    }
}

/// Reverse-mode backward through a node list.
///
/// `grads[base..]` receives one slot per trainable tensor, ordered as in
/// [`for_each_param`]; slots are accumulated (`+`) so shared calls can sum.
pub fn backward_nodes(
    nodes: &[Node],
    caches: &[NodeCache],
    gy: Array4<f32>,
    grads: &mut [Option<ArrayD<f32>>],
    base: usize,
) -> Array4<f32> {
    assert_eq!(nodes.len(), caches.len());
    // Slot base per node, assigned in forward order.
    let mut bases = Vec::with_capacity(nodes.len());
    let mut at = base;
    for node in nodes {
        bases.push(at);
        at += match node {
            Node::Conv(c) => 1 + usize::from(c.bias.is_some()),
            Node::BatchNorm(_) => 2,
            Node::Relu | Node::MaxPool(_) => 0,
            Node::Residual(b) => {
                param_tensor_count(&b.body)
                    + b.shortcut.as_ref().map_or(0, |s| param_tensor_count(s))
            }
        };
    }

    let mut g = gy;
    for ((node, cache), slot) in nodes.iter().zip(caches.iter()).zip(bases.iter()).rev() {
        g = match (node, cache) {
            (Node::Conv(conv), NodeCache::Conv { x }) => {
                let (gx, gw, gb) = conv.backward(&x.view(), &g.view());
                accumulate(grads, *slot, gw.into_dyn());
                if let Some(gb) = gb {
                    accumulate(grads, slot + 1, gb.into_dyn());
                }
                gx
            }
            (Node::BatchNorm(bn), NodeCache::Bn(cache)) => {
                let (gx, ggamma, gbeta) = bn.backward(cache, &g.view());
                accumulate(grads, *slot, ggamma.into_dyn());
                accumulate(grads, slot + 1, gbeta.into_dyn());
                gx
            }
            (Node::Relu, NodeCache::Relu { mask }) => {
                relu_backward(&mut g, mask);
                g
            }
            (Node::MaxPool(pool), NodeCache::MaxPool { idx, in_dims }) => {
                pool.backward(&g.view(), idx, *in_dims)
            }
            (Node::Residual(block), NodeCache::Residual { body, shortcut, mask }) => {
                relu_backward(&mut g, mask);
                let body_slots = param_tensor_count(&block.body);
                let gx_body = backward_nodes(&block.body, body, g.clone(), grads, *slot);
                let gx_short = match (&block.shortcut, shortcut) {
                    (Some(sc), Some(sc_cache)) => {
                        backward_nodes(sc, sc_cache, g, grads, slot + body_slots)
                    }
                    _ => g,
                };
                gx_body + gx_short
            }
            _ => unreachable!("cache kind mismatch"),
        };
    }
    g
}

fn accumulate(grads: &mut [Option<ArrayD<f32>>], slot: usize, g: ArrayD<f32>) {
    match &mut grads[slot] {
        Some(existing) => *existing += &g,
        empty => *empty = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{normal, seeded_stream};
    use ndarray::Array4;

    fn tiny_net(seed: u64) -> Vec<Node> {
        let mut rng = seeded_stream(seed, "graph-test");
        let w1 = Array4::from_shape_fn((3, 2, 3, 3), |_| (normal(&mut rng) * 0.5) as f32);
        let w2 = Array4::from_shape_fn((4, 3, 3, 3), |_| (normal(&mut rng) * 0.5) as f32);
        vec![
            Node::Conv(Conv2d::new(w1, None, 1, 1)),
            Node::Relu,
            Node::MaxPool(MaxPool2d::new(2, 2, 0)),
            Node::Conv(Conv2d::new(w2, None, 1, 1)),
        ]
    }

    #[test]
    fn eval_and_train_agree_without_batchnorm() {
        let mut nodes = tiny_net(9);
        let mut rng = seeded_stream(10, "graph-x");
        let x = Array4::from_shape_fn((2, 2, 8, 8), |_| normal(&mut rng) as f32);
        let (y_train, _) = forward_train(&mut nodes, &x.view());
        let y_eval = forward_eval(&nodes, &x.view());
        assert_eq!(y_train, y_eval);
    }

    #[test]
    fn backward_through_stack_matches_finite_difference() {
        let mut nodes = tiny_net(11);
        let mut rng = seeded_stream(12, "graph-fd");
        let x = Array4::from_shape_fn((1, 2, 6, 6), |_| normal(&mut rng) as f32);
        let (y, caches) = forward_train(&mut nodes, &x.view());
        let gy = Array4::from_shape_fn(y.dim(), |_| normal(&mut rng) as f32);
        let mut grads = vec![None; param_tensor_count(&nodes)];
        let gx = backward_nodes(&nodes, &caches, gy.clone(), &mut grads, 0);

        let loss = |x: &Array4<f32>| -> f64 {
            let y = forward_eval(&nodes, &x.view());
            y.iter().zip(gy.iter()).map(|(&a, &b)| a as f64 * b as f64).sum()
        };
        let h = 1e-2f32;
        let mut checked = 0;
        for &(c, yy, xx) in &[(0, 0, 0), (1, 3, 2), (0, 5, 5), (1, 1, 4)] {
            let mut xp = x.clone();
            xp[(0, c, yy, xx)] += h;
            let mut xm = x.clone();
            xm[(0, c, yy, xx)] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h as f64);
            let an = gx[(0, c, yy, xx)] as f64;
            // Skip points that straddle a relu/maxpool kink.
            if (fd - an).abs() > 0.3 * an.abs().max(1e-3) {
                continue;
            }
            assert!((fd - an).abs() <= 2e-2 * an.abs().max(0.1), "fd={fd} an={an}");
            checked += 1;
        }
        assert!(checked >= 2, "too few differentiable probe points");
    }

    #[test]
    fn residual_identity_shortcut_adds_input() {
        // Zero-weight body: y = relu(0 + x) = relu(x).
        let w = Array4::<f32>::zeros((2, 2, 3, 3));
        let block = ResidualBlock {
            body: vec![Node::Conv(Conv2d::new(w, None, 1, 1))],
            shortcut: None,
        };
        let nodes = vec![Node::Residual(block)];
        let mut rng = seeded_stream(13, "res");
        let x = Array4::from_shape_fn((1, 2, 4, 4), |_| normal(&mut rng) as f32);
        let y = forward_eval(&nodes, &x.view());
        assert_eq!(y, x.mapv(|v| v.max(0.0)));
    }
}
