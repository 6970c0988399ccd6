//! Checkpoints: a flat little-endian f32 blob plus a TOML manifest naming
//! each tensor with its shape and byte offset.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dethead::HeadParams;
use crate::error::{Error, Result};
use crate::mape::{Affine, EncodeLayer, MapeParams, Normalization};
use crate::model::{Mode, Model, ModelConfig};
use crate::repnet::{BackboneConfig, BackboneParams, BnParams, ConvParams, NeckParams, RepBlockParams, RepLayer, Stage};

pub const FORMAT_TAG: &str = "pillardet-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// byte offset into the blob
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub mode: Mode,
    /// blob file name, relative to the manifest
    pub blob: String,
    pub blob_bytes: usize,
    pub model: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

/// Named tensors in insertion order.
#[derive(Debug, Default)]
struct Store {
    tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
    order: Vec<String>,
}

impl Store {
    fn put(&mut self, name: String, shape: Vec<usize>, data: Vec<f32>) {
        self.order.push(name.clone());
        self.tensors.insert(name, (shape, data));
    }

    fn put64(&mut self, name: String, shape: Vec<usize>, data: &[f64]) {
        self.put(name, shape, data.iter().map(|&v| v as f32).collect());
    }

    fn has(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    fn take(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
        let (s, data) = self
            .tensors
            .remove(name)
            .ok_or_else(|| Error::Input(format!("checkpoint lacks tensor {name}")))?;
        if s != shape {
            return Err(Error::Shape(format!("tensor {name} has shape {s:?}, expected {shape:?}")));
        }
        Ok(data)
    }

    fn take64(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        Ok(self.take(name, shape)?.into_iter().map(f64::from).collect())
    }

    fn put_conv(&mut self, prefix: &str, c: &ConvParams) {
        self.put(format!("{prefix}.weight"), vec![c.c_out, c.c_in, c.k, c.k], c.weight.clone());
        self.put(format!("{prefix}.bias"), vec![c.c_out], c.bias.clone());
    }

    fn take_conv(&mut self, prefix: &str, c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<ConvParams> {
        let mut c = ConvParams::zeros(c_in, c_out, k, stride);
        c.weight = self.take(&format!("{prefix}.weight"), &[c_out, c_in, k, k])?;
        c.bias = self.take(&format!("{prefix}.bias"), &[c_out])?;
        Ok(c)
    }

    fn put_bn(&mut self, prefix: &str, bn: &BnParams) {
        let c = bn.channels();
        for (field, v) in [("gamma", &bn.gamma), ("beta", &bn.beta), ("mean", &bn.mean), ("var", &bn.var)] {
            self.put(format!("{prefix}.{field}"), vec![c], v.clone());
        }
        self.put(format!("{prefix}.eps"), vec![1], vec![bn.eps]);
    }

    fn take_bn(&mut self, prefix: &str, c: usize) -> Result<BnParams> {
        let mut bn = BnParams::neutral(c);
        bn.gamma = self.take(&format!("{prefix}.gamma"), &[c])?;
        bn.beta = self.take(&format!("{prefix}.beta"), &[c])?;
        bn.mean = self.take(&format!("{prefix}.mean"), &[c])?;
        bn.var = self.take(&format!("{prefix}.var"), &[c])?;
        bn.eps = self.take(&format!("{prefix}.eps"), &[1])?[0];
        bn.validate(c)?;
        Ok(bn)
    }

    fn put_affine(&mut self, prefix: &str, a: &Affine) {
        self.put64(format!("{prefix}.weight"), vec![a.out_dim, a.in_dim], &a.weight);
        self.put64(format!("{prefix}.bias"), vec![a.out_dim], &a.bias);
    }

    fn take_affine(&mut self, prefix: &str, in_dim: usize, out_dim: usize) -> Result<Affine> {
        Ok(Affine {
            in_dim,
            out_dim,
            weight: self.take64(&format!("{prefix}.weight"), &[out_dim, in_dim])?,
            bias: self.take64(&format!("{prefix}.bias"), &[out_dim])?,
        })
    }

    fn put_layer(&mut self, prefix: &str, layer: &RepLayer) {
        match layer {
            RepLayer::Fused(c) => self.put_conv(&format!("{prefix}.fused"), c),
            RepLayer::Branched(b) => {
                self.put_conv(&format!("{prefix}.b3"), &b.branch_3x3.0);
                self.put_bn(&format!("{prefix}.b3.bn"), &b.branch_3x3.1);
                self.put_conv(&format!("{prefix}.b1"), &b.branch_1x1.0);
                self.put_bn(&format!("{prefix}.b1.bn"), &b.branch_1x1.1);
                if let Some(bn) = &b.branch_id {
                    self.put_bn(&format!("{prefix}.id.bn"), bn);
                }
            }
        }
    }

    fn take_layer(&mut self, prefix: &str, c_in: usize, c_out: usize, stride: usize) -> Result<RepLayer> {
        if self.has(&format!("{prefix}.fused.weight")) {
            return Ok(RepLayer::Fused(self.take_conv(&format!("{prefix}.fused"), c_in, c_out, 3, stride)?));
        }
        let block = RepBlockParams {
            branch_3x3: (
                self.take_conv(&format!("{prefix}.b3"), c_in, c_out, 3, stride)?,
                self.take_bn(&format!("{prefix}.b3.bn"), c_out)?,
            ),
            branch_1x1: (
                self.take_conv(&format!("{prefix}.b1"), c_in, c_out, 1, stride)?,
                self.take_bn(&format!("{prefix}.b1.bn"), c_out)?,
            ),
            branch_id: if self.has(&format!("{prefix}.id.bn.gamma")) {
                Some(self.take_bn(&format!("{prefix}.id.bn"), c_out)?)
            } else {
                None
            },
        };
        block.validate()?;
        Ok(RepLayer::Branched(block))
    }
}

fn layer_names(cfg: &BackboneConfig) -> Vec<(String, usize, usize, usize)> {
    let mut v = vec![("backbone.stem".to_string(), cfg.in_channels, cfg.stage_channels[0], 1)];
    let mut prev = cfg.stage_channels[0];
    for s in 0..cfg.stage_blocks.len() {
        let c = cfg.stage_channels[s];
        v.push((format!("backbone.stage{s}.transition"), prev, c, BackboneConfig::stage_stride(s)));
        for j in 0..cfg.stage_blocks[s] * cfg.layers_per_block {
            v.push((format!("backbone.stage{s}.layer{j}"), c, c, 1));
        }
        prev = c;
    }
    v
}

const HEAD_CONVS: [&str; 6] = ["heatmap", "offset", "z", "size", "yaw", "iou"];

fn to_store(model: &Model) -> Store {
    let mut st = Store::default();
    for (i, layer) in model.mape.encode.iter().enumerate() {
        st.put_affine(&format!("mape.encode{i}"), &layer.affine);
        if let Some(n) = &layer.norm {
            let d = n.mean.len();
            for (field, v) in [("mean", &n.mean), ("var", &n.var), ("gamma", &n.gamma), ("beta", &n.beta)] {
                st.put64(format!("mape.encode{i}.norm.{field}"), vec![d], v);
            }
            st.put64(format!("mape.encode{i}.norm.eps"), vec![1], &[n.eps]);
        }
    }
    st.put_affine("mape.score", &model.mape.score);

    let layers: Vec<&RepLayer> = model.backbone.layers().collect();
    for ((name, ..), layer) in layer_names(&model.config.backbone).iter().zip(layers) {
        st.put_layer(name, layer);
    }

    st.put_conv("neck.fine_proj", &model.neck.fine_proj);
    st.put_conv("neck.coarse_proj", &model.neck.coarse_proj);
    st.put_conv("neck.fuse", &model.neck.fuse);

    let h = &model.head;
    st.put_conv("head.shared", &h.shared);
    for (name, c) in HEAD_CONVS.iter().zip([&h.heatmap, &h.offset, &h.z, &h.size, &h.yaw, &h.iou]) {
        st.put_conv(&format!("head.{name}"), c);
    }
    st
}

fn from_store(cfg: &ModelConfig, st: &mut Store) -> Result<Model> {
    let d = cfg.mape_dim;
    let mut encode = Vec::new();
    for i in 0..cfg.mape_layers {
        let in_dim = if i == 0 { crate::pillargrid::AUGMENTED_DIM } else { d };
        let affine = st.take_affine(&format!("mape.encode{i}"), in_dim, d)?;
        let norm = if st.has(&format!("mape.encode{i}.norm.mean")) {
            let p = format!("mape.encode{i}.norm");
            Some(Normalization {
                mean: st.take64(&format!("{p}.mean"), &[d])?,
                var: st.take64(&format!("{p}.var"), &[d])?,
                gamma: st.take64(&format!("{p}.gamma"), &[d])?,
                beta: st.take64(&format!("{p}.beta"), &[d])?,
                eps: st.take64(&format!("{p}.eps"), &[1])?[0],
            })
        } else {
            None
        };
        encode.push(EncodeLayer { affine, norm });
    }
    let score = st.take_affine("mape.score", d, d)?;
    let mape = MapeParams { encode, score };

    let bcfg = &cfg.backbone;
    let mut layers = layer_names(bcfg)
        .into_iter()
        .map(|(name, ci, co, s)| st.take_layer(&name, ci, co, s))
        .collect::<Result<Vec<_>>>()?
        .into_iter();
    let stem = layers.next().expect("stem listed first");
    let stages = bcfg
        .stage_blocks
        .iter()
        .map(|&blocks| Stage {
            transition: layers.next().expect("transition listed"),
            layers: layers.by_ref().take(blocks * bcfg.layers_per_block).collect(),
        })
        .collect();
    let backbone = BackboneParams { stem, stages };

    let c = bcfg.stage_channels;
    let n = cfg.neck_channels;
    let neck = NeckParams {
        fine_proj: st.take_conv("neck.fine_proj", c[2], n, 1, 1)?,
        coarse_proj: st.take_conv("neck.coarse_proj", c[3], n, 1, 1)?,
        fuse: st.take_conv("neck.fuse", 2 * n, n, 3, 1)?,
    };

    let hd = cfg.head_hidden;
    let shared = st.take_conv("head.shared", n, hd, 3, 1)?;
    let outs = [cfg.classes, 2, 1, 3, 2, 1];
    let mut convs = HEAD_CONVS
        .iter()
        .zip(outs)
        .map(|(name, co)| st.take_conv(&format!("head.{name}"), hd, co, 1, 1))
        .collect::<Result<Vec<_>>>()?
        .into_iter();
    let mut next = || convs.next().expect("six head convs");
    let head = HeadParams {
        shared,
        heatmap: next(),
        offset: next(),
        z: next(),
        size: next(),
        yaw: next(),
        iou: next(),
    };

    if let Some(extra) = st.tensors.keys().next() {
        return Err(Error::Input(format!("checkpoint has unexpected tensor {extra}")));
    }
    let model = Model { config: cfg.clone(), mape, backbone, neck, head };
    model.validate()?;
    Ok(model)
}

pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `<path>` (manifest) and the blob next to it with a `.bin` extension.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    model.validate()?;
    let st = to_store(model);
    let mut blob = Vec::new();
    let mut tensors = Vec::with_capacity(st.order.len());
    for name in &st.order {
        let (shape, data) = &st.tensors[name];
        tensors.push(TensorEntry { name: name.clone(), shape: shape.clone(), offset: blob.len() });
        for v in data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let bin = blob_path(path);
    let manifest = Manifest {
        format: FORMAT_TAG.into(),
        version: FORMAT_VERSION,
        mode: model.mode(),
        blob: bin.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
        blob_bytes: blob.len(),
        model: model.config.clone(),
        tensors,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::format(path, e.to_string()))?;
    fs::write(&bin, &blob).map_err(|e| Error::io(&bin, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: Manifest = toml::from_str(&text).map_err(|e| Error::format(path, e.message().to_string()))?;
    if m.format != FORMAT_TAG || m.version != FORMAT_VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint {} v{}", m.format, m.version)));
    }
    m.model.validate()?;
    Ok(m)
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let m = read_manifest(path)?;
    let bin = path.parent().unwrap_or(Path::new(".")).join(&m.blob);
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if bytes.len() != m.blob_bytes {
        return Err(Error::format(&bin, format!("blob has {} bytes, manifest says {}", bytes.len(), m.blob_bytes)));
    }
    let mut st = Store::default();
    for t in &m.tensors {
        let n: usize = t.shape.iter().product();
        let end = t.offset.checked_add(4 * n).filter(|&e| e <= bytes.len() && t.offset % 4 == 0);
        let end = end.ok_or_else(|| Error::format(path, format!("tensor {} exceeds the blob", t.name)))?;
        let data = bytes[t.offset..end].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        if st.has(&t.name) {
            return Err(Error::format(path, format!("tensor {} listed twice", t.name)));
        }
        st.put(t.name.clone(), t.shape.clone(), data);
    }
    let model = from_store(&m.model, &mut st).map_err(|e| match e {
        Error::Input(r) | Error::Shape(r) => Error::format(path, r),
        other => other,
    })?;
    if model.mode() != m.mode {
        return Err(Error::format(path, "manifest mode disagrees with stored layers"));
    }
    Ok(model)
}
