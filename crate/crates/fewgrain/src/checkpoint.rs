//! Self-describing checkpoint container: architecture tag, config snapshot,
//! dataset-statistics fingerprint, and named parameter blobs (including
//! batch-norm running statistics, the high-order section, the classifier
//! head, and the loss centers).

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::backbone::{BackboneModel, ClassifierHead, Neck};
use crate::config::RunConfig;
use crate::dataset::ChannelStats;
use crate::error::{Error, Result};
use crate::losses::CenterState;
use crate::nn::Node;

/// A borrowed tensor during checkpoint traversal.
pub enum TensorView<'a> {
    F32(&'a [f32], Vec<usize>),
    F64(&'a [f64], Vec<usize>),
}

/// Visit every persistent tensor of the extractor with hierarchical nameschk.
fn visit_nodes(nodes: &[Node], prefix: &str, f: &mut impl FnMut(String, TensorView)) {
    for (i, node) in nodes.iter().enumerate() {
        match node {
            Node::Conv(c) => {
                let d = c.weight.dim();
                f(
                    format!("{prefix}.{i}.conv.weight"),
                    TensorView::F32(c.weight.as_slice().unwrap(), vec![d.0, d.1, d.2, d.3]),
                );
                if let Some(b) = &c.bias {
                    f(
                        format!("{prefix}.{i}.conv.bias"),
                        TensorView::F32(b.as_slice().unwrap(), vec![b.len()]),
                    );
                }
            }
            Node::BatchNorm(bn) => {
                for (tag, arr) in [
                    ("gamma", &bn.gamma),
                    ("beta", &bn.beta),
                    ("running_mean", &bn.running_mean),
                    ("running_var", &bn.running_var),
                ] {
                    f(
                        format!("{prefix}.{i}.bn.{tag}"),
                        TensorView::F32(arr.as_slice().unwrap(), vec![arr.len()]),
                    );
                }
            }
            Node::Relu | Node::MaxPool(_) => {}
            Node::Residual(block) => {
                visit_nodes(&block.body, &format!("{prefix}.{i}.res.body"), f);
                if let Some(sc) = &block.shortcut {
                    visit_nodes(sc, &format!("{prefix}.{i}.res.shortcut"), f);
                }
            }
        }
    }
}

fn visit_model(model: &BackboneModel, f: &mut impl FnMut(String, TensorView)) {
    visit_nodes(&model.extractor, "extractor", f);
    match &model.neck {
        Neck::Gap { high } => {
            for bank in &high.banks {
                let r = bank.order;
                for (s, proj) in bank.projections.iter().enumerate() {
                    let d = proj.dim();
                    f(
                        format!("highorder.r{r}.u{s}"),
                        TensorView::F32(proj.as_slice().unwrap(), vec![d.0, d.1]),
                    );
                }
                f(
                    format!("highorder.r{r}.a"),
                    TensorView::F64(bank.weights.as_slice().unwrap(), vec![bank.weights.len()]),
                );
            }
        }
        Neck::Mlp { layers } => {
            for (i, (linear, _)) in layers.iter().enumerate() {
                let d = linear.weight.dim();
                f(
                    format!("neck.fc{i}.weight"),
                    TensorView::F32(linear.weight.as_slice().unwrap(), vec![d.0, d.1]),
                );
                if let Some(b) = &linear.bias {
                    f(
                        format!("neck.fc{i}.bias"),
                        TensorView::F32(b.as_slice().unwrap(), vec![b.len()]),
                    );
                }
            }
        }
    }
}

const MAGIC: &[u8; 8] = b"FGCKPT1\n";

/// Everything stored alongside the parameters.
#[derive(Debug, Clone)]
pub struct CheckpointMeta {
    pub architecture_tag: String,
    pub config: RunConfig,
    pub stats: ChannelStats,
    /// Base-class names, in head row order.
    pub class_names: Vec<String>,
}

/// Write a checkpoint for a trained model + head (+ centers when present).
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &BackboneModel,
    head: &ClassifierHead,
    centers: Option<&CenterState>,
    meta: &CheckpointMeta,
) -> Result<()> {
    let mut tensors: Vec<(String, Vec<u8>, u8, Vec<usize>)> = Vec::new();
    visit_model(model, &mut |name, view| {
        let (bytes, dtype, dims) = match view {
            TensorView::F32(data, dims) => (
                data.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>(),
                0u8,
                dims,
            ),
            TensorView::F64(data, dims) => (
                data.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>(),
                1u8,
                dims,
            ),
        };
        tensors.push((name, bytes, dtype, dims));
    });
    let hd = head.weight.dim();
    tensors.push((
        "head.weight".into(),
        head.weight.iter().flat_map(|v| v.to_le_bytes()).collect(),
        1,
        vec![hd.0, hd.1],
    ));
    if let Some(b) = &head.bias {
        tensors.push((
            "head.bias".into(),
            b.iter().flat_map(|v| v.to_le_bytes()).collect(),
            1,
            vec![b.len()],
        ));
    }
    if let Some(c) = centers {
        let cd = c.centers.dim();
        tensors.push((
            "centers.matrix".into(),
            c.centers.iter().flat_map(|v| v.to_le_bytes()).collect(),
            1,
            vec![cd.0, cd.1],
        ));
    }

    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(MAGIC);
    write_str(&mut out, &meta.architecture_tag);
    write_str(&mut out, &meta.config.serialize());
    for v in meta.stats.mean.iter().chain(meta.stats.std.iter()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&meta.stats.fingerprint().to_le_bytes());
    out.extend_from_slice(&(meta.class_names.len() as u32).to_le_bytes());
    for name in &meta.class_names {
        write_str(&mut out, name);
    }
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, bytes, dtype, dims) in &tensors {
        write_str(&mut out, name);
        out.push(*dtype);
        out.push(dims.len() as u8);
        for d in dims {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        out.extend_from_slice(bytes);
    }
    let mut file = fs::File::create(path.as_ref())?;
    file.write_all(&out)?;
    Ok(())
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Data("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Data("invalid utf8 in checkpoint".into()))
    }
}

/// A loaded checkpoint: the rebuilt model, head, optional centers, and meta.
pub struct LoadedCheckpoint {
    pub model: BackboneModel,
    pub head: ClassifierHead,
    pub centers: Option<CenterState>,
    pub meta: CheckpointMeta,
}

/// Read a checkpoint, rebuild the architecture from its tag + config, and
/// restore every tensor by name.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<LoadedCheckpoint> {
    let bytes = fs::read(path.as_ref())?;
    let mut r = Reader {
        bytes: &bytes,
        at: 0,
    };
    if r.take(8)? != MAGIC {
        return Err(Error::Data("not a fewgrain checkpoint".into()));
    }
    let tag = r.string()?;
    let config = crate::config::load_config(&r.string()?)?;
    let mut stats = ChannelStats::identity();
    for i in 0..3 {
        stats.mean[i] = r.f64()?;
    }
    for i in 0..3 {
        stats.std[i] = r.f64()?;
    }
    let fingerprint = r.u64()?;
    if fingerprint != stats.fingerprint() {
        return Err(Error::Data("checkpoint stats fingerprint mismatch".into()));
    }
    let n_names = r.u32()? as usize;
    let mut class_names = Vec::with_capacity(n_names);
    for _ in 0..n_names {
        class_names.push(r.string()?);
    }
    let n_tensors = r.u32()? as usize;
    let mut tensors: std::collections::HashMap<String, (u8, Vec<usize>, Vec<u8>)> =
        std::collections::HashMap::new();
    for _ in 0..n_tensors {
        let name = r.string()?;
        let dtype = r.take(1)?[0];
        let ndim = r.take(1)?[0] as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32()? as usize);
        }
        let count: usize = dims.iter().product();
        let width = if dtype == 0 { 4 } else { 8 };
        let data = r.take(count * width)?.to_vec();
        tensors.insert(name, (dtype, dims, data));
    }

    let mut model = BackboneModel::build(&tag, &config)?;
    let mut missing: Vec<String> = Vec::new();
    {
        let tensors = &tensors;
        let missing = &mut missing;
        fill_model(&mut model, &mut |name, slot| {
            match tensors.get(&name) {
                Some((dtype, dims, data)) => fill_slot(&name, slot, *dtype, dims, data),
                None => {
                    missing.push(name);
                    Ok(())
                }
            }
        })?;
    }
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "checkpoint is missing tensors: {}",
            missing.join(", ")
        )));
    }

    let head = {
        let (dtype, dims, data) = tensors
            .get("head.weight")
            .ok_or_else(|| Error::Data("checkpoint has no head.weight".into()))?;
        if *dtype != 1 || dims.len() != 2 {
            return Err(Error::Data("head.weight must be a 2-d f64 tensor".into()));
        }
        let values = bytes_to_f64(data);
        let weight = Array2::from_shape_vec((dims[0], dims[1]), values)
            .map_err(|e| Error::Data(e.to_string()))?;
        let bias = match tensors.get("head.bias") {
            Some((1, bdims, bdata)) if bdims.len() == 1 => {
                Some(Array1::from_vec(bytes_to_f64(bdata)))
            }
            Some(_) => return Err(Error::Data("head.bias must be a 1-d f64 tensor".into())),
            None => None,
        };
        ClassifierHead { weight, bias }
    };
    let centers = match tensors.get("centers.matrix") {
        Some((1, dims, data)) if dims.len() == 2 => Some(CenterState {
            centers: Array2::from_shape_vec((dims[0], dims[1]), bytes_to_f64(data))
                .map_err(|e| Error::Data(e.to_string()))?,
            gamma_c: config.center_lr,
            initialized: true,
        }),
        Some(_) => return Err(Error::Data("centers.matrix must be a 2-d f64 tensor".into())),
        None => None,
    };
    Ok(LoadedCheckpoint {
        model,
        head,
        centers,
        meta: CheckpointMeta {
            architecture_tag: tag,
            config,
            stats,
            class_names,
        },
    })
}

enum SlotMut<'a> {
    F32(&'a mut [f32]),
    F64(&'a mut [f64]),
}

fn fill_slot(name: &str, slot: SlotMut, dtype: u8, _dims: &[usize], data: &[u8]) -> Result<()> {
    match (slot, dtype) {
        (SlotMut::F32(out), 0) => {
            if data.len() != out.len() * 4 {
                return Err(Error::Data(format!("tensor `{name}` has wrong size")));
            }
            for (i, chunk) in data.chunks_exact(4).enumerate() {
                out[i] = f32::from_le_bytes(chunk.try_into().unwrap());
            }
            Ok(())
        }
        (SlotMut::F64(out), 1) => {
            if data.len() != out.len() * 8 {
                return Err(Error::Data(format!("tensor `{name}` has wrong size")));
            }
            for (i, chunk) in data.chunks_exact(8).enumerate() {
                out[i] = f64::from_le_bytes(chunk.try_into().unwrap());
            }
            Ok(())
        }
        _ => Err(Error::Data(format!("tensor `{name}` has wrong dtype"))),
    }
}

fn bytes_to_f64(data: &[u8]) -> Vec<f64> {
    data.chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

fn fill_nodes(
    nodes: &mut [Node],
    prefix: &str,
    f: &mut impl FnMut(String, SlotMut) -> Result<()>,
) -> Result<()> {
    for (i, node) in nodes.iter_mut().enumerate() {
        match node {
            Node::Conv(c) => {
                f(
                    format!("{prefix}.{i}.conv.weight"),
                    SlotMut::F32(c.weight.as_slice_mut().unwrap()),
                )?;
                if let Some(b) = &mut c.bias {
                    f(
                        format!("{prefix}.{i}.conv.bias"),
                        SlotMut::F32(b.as_slice_mut().unwrap()),
                    )?;
                }
            }
            Node::BatchNorm(bn) => {
                f(
                    format!("{prefix}.{i}.bn.gamma"),
                    SlotMut::F32(bn.gamma.as_slice_mut().unwrap()),
                )?;
                f(
                    format!("{prefix}.{i}.bn.beta"),
                    SlotMut::F32(bn.beta.as_slice_mut().unwrap()),
                )?;
                f(
                    format!("{prefix}.{i}.bn.running_mean"),
                    SlotMut::F32(bn.running_mean.as_slice_mut().unwrap()),
                )?;
                f(
                    format!("{prefix}.{i}.bn.running_var"),
                    SlotMut::F32(bn.running_var.as_slice_mut().unwrap()),
                )?;
            }
            Node::Relu | Node::MaxPool(_) => {}
            Node::Residual(block) => {
                fill_nodes(&mut block.body, &format!("{prefix}.{i}.res.body"), f)?;
                if let Some(sc) = &mut block.shortcut {
                    fill_nodes(sc, &format!("{prefix}.{i}.res.shortcut"), f)?;
                }
            }
        }
    }
    Ok(())
}

fn fill_model(
    model: &mut BackboneModel,
    f: &mut impl FnMut(String, SlotMut) -> Result<()>,
) -> Result<()> {
    fill_nodes(&mut model.extractor, "extractor", f)?;
    match &mut model.neck {
        Neck::Gap { high } => {
            for bank in &mut high.banks {
                let r = bank.order;
                for (s, proj) in bank.projections.iter_mut().enumerate() {
                    f(
                        format!("highorder.r{r}.u{s}"),
                        SlotMut::F32(proj.as_slice_mut().unwrap()),
                    )?;
                }
                f(
                    format!("highorder.r{r}.a"),
                    SlotMut::F64(bank.weights.as_slice_mut().unwrap()),
                )?;
            }
        }
        Neck::Mlp { layers } => {
            for (i, (linear, _)) in layers.iter_mut().enumerate() {
                f(
                    format!("neck.fc{i}.weight"),
                    SlotMut::F32(linear.weight.as_slice_mut().unwrap()),
                )?;
                if let Some(b) = &mut linear.bias {
                    f(
                        format!("neck.fc{i}.bias"),
                        SlotMut::F32(b.as_slice_mut().unwrap()),
                    )?;
                }
            }
        }
    }
    Ok(())
}
