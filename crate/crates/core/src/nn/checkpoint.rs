//! Flat key→tensor checkpoints.
//!
//! Layout on disk:
//!
//! ```text
//! CILAB-CKPT 1\n
//! {"format_version":1,"kind":...,"layout":...,"lineage":...,"meta":...,"tensors":[{"key":..,"shape":[..]},..]}\n
//! <little-endian f64 payload, tensors concatenated in header order>
//! ```
//!
//! The JSON header records the structural layout (layer widths, ReLU flags,
//! head type, freeze flags) so a model can be rebuilt without the config, and
//! the seed lineage that produced it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::extractor::{FeatureExtractor, Layer, Stage};
use super::head::{CosineClassifier, Head, HeadKind, LinearClassifier};
use super::network::Network;
use crate::error::{Error, Result};
use crate::numeric::Matrix;

const MAGIC: &str = "CILAB-CKPT 1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub key: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerLayout {
    id: String,
    d_in: usize,
    d_out: usize,
    relu: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StageLayout {
    name: String,
    layers: Vec<LayerLayout>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ExtractorLayout {
    stages: Vec<StageLayout>,
    frozen: bool,
    param_version: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct HeadLayout {
    kind: HeadKind,
    classes: usize,
    feature_dim: usize,
    bias: bool,
    learn_scale: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NetworkLayout {
    stem: Option<ExtractorLayout>,
    branches: Vec<ExtractorLayout>,
    head: HeadLayout,
    head_frozen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "layout", rename_all = "snake_case")]
enum Layout {
    Network(NetworkLayout),
    Extractor(ExtractorLayout),
    Head(HeadLayout),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    #[serde(flatten)]
    layout: Layout,
    lineage: Vec<(String, u64)>,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// A decoded checkpoint file.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    header: Header,
    data: Vec<Vec<f64>>,
}

fn extractor_layout(ext: &FeatureExtractor) -> ExtractorLayout {
    ExtractorLayout {
        stages: ext
            .stages()
            .iter()
            .map(|s| StageLayout {
                name: s.name.clone(),
                layers: s
                    .layers
                    .iter()
                    .map(|l| LayerLayout {
                        id: l.id.clone(),
                        d_in: l.d_in(),
                        d_out: l.d_out(),
                        relu: l.relu,
                    })
                    .collect(),
            })
            .collect(),
        frozen: ext.is_frozen(),
        param_version: ext.param_version(),
    }
}

fn head_layout(head: &Head) -> HeadLayout {
    HeadLayout {
        kind: head.kind(),
        classes: head.num_classes(),
        feature_dim: head.feature_dim(),
        bias: matches!(head, Head::Linear(LinearClassifier { bias: Some(_), .. })),
        learn_scale: matches!(head, Head::Cosine(c) if c.learn_scale),
    }
}

fn empty_extractor(layout: &ExtractorLayout) -> Result<FeatureExtractor> {
    let stages = layout
        .stages
        .iter()
        .map(|s| Stage {
            name: s.name.clone(),
            layers: s
                .layers
                .iter()
                .map(|l| Layer {
                    id: l.id.clone(),
                    weight: Matrix::zeros(l.d_out, l.d_in),
                    bias: vec![0.0; l.d_out],
                    relu: l.relu,
                })
                .collect(),
        })
        .collect();
    let mut ext = FeatureExtractor::from_stages(stages)?;
    ext.set_frozen(layout.frozen);
    ext.set_param_version(layout.param_version);
    Ok(ext)
}

fn empty_head(layout: &HeadLayout) -> Head {
    let weight = Matrix::zeros(layout.classes, layout.feature_dim);
    match layout.kind {
        HeadKind::Linear => Head::Linear(LinearClassifier {
            weight,
            bias: layout.bias.then(|| vec![0.0; layout.classes]),
        }),
        HeadKind::Cosine => Head::Cosine(CosineClassifier {
            weight,
            scale: 0.0,
            learn_scale: layout.learn_scale,
        }),
    }
}

fn extractor_params(ext: &FeatureExtractor) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    ext.layers()
        .enumerate()
        .flat_map(|(i, l)| {
            [
                (
                    format!("layer{i}.weight"),
                    vec![l.d_out(), l.d_in()],
                    l.weight.as_slice().to_vec(),
                ),
                (format!("layer{i}.bias"), vec![l.d_out()], l.bias.clone()),
            ]
        })
        .collect()
}

fn head_params(head: &Head) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let w = head.weight();
    let mut out = vec![(
        "weight".to_string(),
        vec![w.rows(), w.cols()],
        w.as_slice().to_vec(),
    )];
    match head {
        Head::Linear(l) => {
            if let Some(b) = &l.bias {
                out.push(("bias".into(), vec![b.len()], b.clone()));
            }
        }
        Head::Cosine(c) => out.push(("scale".into(), vec![1], vec![c.scale])),
    }
    out
}

impl Checkpoint {
    fn build(
        layout: Layout,
        params: Vec<(String, Vec<usize>, Vec<f64>)>,
        lineage: &[(String, u64)],
        meta: serde_json::Value,
    ) -> Self {
        let (tensors, data) = params
            .into_iter()
            .map(|(key, shape, values)| (TensorEntry { key, shape }, values))
            .unzip();
        Checkpoint {
            header: Header {
                format_version: CHECKPOINT_VERSION,
                layout,
                lineage: lineage.to_vec(),
                meta,
                tensors,
            },
            data,
        }
    }

    pub fn from_network(net: &Network, lineage: &[(String, u64)], meta: serde_json::Value) -> Self {
        let layout = NetworkLayout {
            stem: net.stem().map(extractor_layout),
            branches: net.branches().iter().map(extractor_layout).collect(),
            head: head_layout(net.head()),
            head_frozen: net.head_frozen(),
        };
        let params = net
            .named_params()
            .into_iter()
            .map(|(k, shape, v)| (k, shape, v.to_vec()))
            .collect();
        Checkpoint::build(Layout::Network(layout), params, lineage, meta)
    }

    pub fn from_extractor(
        ext: &FeatureExtractor,
        lineage: &[(String, u64)],
        meta: serde_json::Value,
    ) -> Self {
        Checkpoint::build(
            Layout::Extractor(extractor_layout(ext)),
            extractor_params(ext),
            lineage,
            meta,
        )
    }

    pub fn from_head(head: &Head, lineage: &[(String, u64)], meta: serde_json::Value) -> Self {
        Checkpoint::build(
            Layout::Head(head_layout(head)),
            head_params(head),
            lineage,
            meta,
        )
    }

    pub fn tensors(&self) -> &[TensorEntry] {
        &self.header.tensors
    }

    pub fn tensor(&self, key: &str) -> Option<&[f64]> {
        self.header
            .tensors
            .iter()
            .position(|t| t.key == key)
            .map(|i| &self.data[i][..])
    }

    pub fn lineage(&self) -> &[(String, u64)] {
        &self.header.lineage
    }

    pub fn meta(&self) -> &serde_json::Value {
        &self.header.meta
    }

    fn fill(&self, targets: Vec<(String, &mut [f64])>) -> Result<()> {
        if targets.len() != self.header.tensors.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, layout expects {}",
                self.header.tensors.len(),
                targets.len()
            )));
        }
        for (key, slot) in targets {
            let values = self
                .tensor(&key)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {key}")))?;
            if values.len() != slot.len() {
                return Err(Error::Format(format!("tensor {key} has the wrong size")));
            }
            slot.copy_from_slice(values);
        }
        Ok(())
    }

    pub fn to_network(&self) -> Result<Network> {
        let Layout::Network(layout) = &self.header.layout else {
            return Err(Error::Format("checkpoint does not hold a network".into()));
        };
        let stem = layout.stem.as_ref().map(empty_extractor).transpose()?;
        let branches = layout
            .branches
            .iter()
            .map(empty_extractor)
            .collect::<Result<Vec<_>>>()?;
        let mut net = Network::with_parts(stem, branches, empty_head(&layout.head))?;
        net.set_head_frozen(layout.head_frozen);
        self.fill(net.named_params_mut())?;
        Ok(net)
    }

    pub fn to_extractor(&self) -> Result<FeatureExtractor> {
        let Layout::Extractor(layout) = &self.header.layout else {
            return Err(Error::Format("checkpoint does not hold an extractor".into()));
        };
        let mut ext = empty_extractor(layout)?;
        let targets = ext
            .layers_mut()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (format!("layer{i}.weight"), l.weight.as_mut_slice()),
                    (format!("layer{i}.bias"), &mut l.bias[..]),
                ]
            })
            .collect();
        self.fill(targets)?;
        Ok(ext)
    }

    pub fn to_head(&self) -> Result<Head> {
        let Layout::Head(layout) = &self.header.layout else {
            return Err(Error::Format("checkpoint does not hold a head".into()));
        };
        let mut head = empty_head(layout);
        let targets: Vec<(String, &mut [f64])> = match &mut head {
            Head::Linear(l) => {
                let mut t = vec![("weight".to_string(), l.weight.as_mut_slice())];
                if let Some(b) = &mut l.bias {
                    t.push(("bias".into(), &mut b[..]));
                }
                t
            }
            Head::Cosine(c) => vec![
                ("weight".to_string(), c.weight.as_mut_slice()),
                ("scale".into(), std::slice::from_mut(&mut c.scale)),
            ],
        };
        self.fill(targets)?;
        Ok(head)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_string(&self.header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(header.as_bytes());
        out.push(b'\n');
        for values in &self.data {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut lines = bytes.splitn(3, |&b| b == b'\n');
        let magic = lines.next().unwrap_or_default();
        if magic != MAGIC.as_bytes() {
            return Err(Error::Format("not a cilab checkpoint".into()));
        }
        let header_bytes = lines
            .next()
            .ok_or_else(|| Error::Format("truncated checkpoint header".into()))?;
        let header: Header = serde_json::from_slice(header_bytes)
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        if header.format_version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {}",
                header.format_version
            )));
        }
        let payload = lines.next().unwrap_or_default();
        let expected: usize = header
            .tensors
            .iter()
            .map(|t| t.shape.iter().product::<usize>())
            .sum();
        if payload.len() != expected * 8 {
            return Err(Error::Format(format!(
                "payload has {} bytes, header describes {}",
                payload.len(),
                expected * 8
            )));
        }
        let mut chunks = payload.chunks_exact(8);
        let data = header
            .tensors
            .iter()
            .map(|t| {
                let n: usize = t.shape.iter().product();
                (&mut chunks)
                    .take(n)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect()
            })
            .collect();
        Ok(Checkpoint { header, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ArchSpec, HeadSpec};
    use crate::numeric::RngStream;

    fn network() -> Network {
        let mut rng = RngStream::new(17);
        let ext = FeatureExtractor::new(&ArchSpec::default(), &mut rng).unwrap();
        let mut net = Network::new(ext, Head::new(&HeadSpec::default(), 5, 32, &mut rng)).unwrap();
        net.split_stem(2).unwrap();
        let extra = net.branches()[0].fresh_like(&mut rng);
        net.push_branch(extra).unwrap();
        net.freeze_extractors(true);
        net
    }

    #[test]
    fn network_round_trip_is_exact() {
        let net = network();
        let lineage = vec![("train".to_string(), 7u64)];
        let ckpt = Checkpoint::from_network(&net, &lineage, serde_json::json!({"stage": 1}));
        let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
        assert_eq!(back.lineage(), &lineage[..]);
        assert_eq!(back.meta()["stage"], 1);
        assert_eq!(back.to_network().unwrap(), net);
    }

    #[test]
    fn extractor_and_head_round_trip() {
        let net = network();
        let ext = net.branch_extractor(1).unwrap();
        let c = Checkpoint::from_extractor(&ext, &[], serde_json::Value::Null);
        assert_eq!(Checkpoint::from_bytes(&c.to_bytes()).unwrap().to_extractor().unwrap(), ext);
        let c = Checkpoint::from_head(net.head(), &[], serde_json::Value::Null);
        let head = Checkpoint::from_bytes(&c.to_bytes()).unwrap().to_head().unwrap();
        assert_eq!(&head, net.head());
        assert!(c.to_network().is_err());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let net = network();
        let mut bytes = Checkpoint::from_network(&net, &[], serde_json::Value::Null).to_bytes();
        bytes.pop();
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format(_))));
        assert!(matches!(Checkpoint::from_bytes(b"hello\n{}\n"), Err(Error::Format(_))));
    }
}
