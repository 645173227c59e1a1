//! Bit-exact persistence: a little-endian container with magic `BDLB`,
//! a JSON metadata blob, and length-prefixed named f32 tensors. Models,
//! dataset caches, and reversed triggers all ride the same format.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::{Dataset, Provenance, Split};
use crate::error::{Error, Result};
use crate::nets::{Model, ModelSpec, Param, TrainConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"BDLB";
pub const VERSION: u32 = 1;

/// Decoded container. The metadata string is preserved verbatim so that
/// save -> load -> save is byte-identical.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        write_str(&mut out, &self.kind);
        write_str(&mut out, &self.meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, tensor) in &self.tensors {
            write_str(&mut out, name);
            out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
            for &d in tensor.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: format!("bad magic {magic:?}, expected {MAGIC:?}"),
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format {
                offset: 4,
                message: format!("unsupported version {version}, expected {VERSION}"),
            });
        }
        let kind = r.string()?;
        let meta = r.string()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let at = r.pos;
            let raw = r.take(numel * 4)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let tensor = Tensor::new(shape, data).map_err(|e| Error::Format {
                offset: at as u64,
                message: format!("tensor '{name}': {e}"),
            })?;
            tensors.push((name, tensor));
        }
        if r.pos != buf.len() {
            return Err(Error::Format {
                offset: r.pos as u64,
                message: format!("{} trailing bytes", buf.len() - r.pos),
            });
        }
        Ok(Container { kind, meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!("truncated: need {n} bytes, {} remain", self.buf.len() - self.pos),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let at = self.pos;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|e| Error::Format {
            offset: at as u64,
            message: format!("invalid utf8: {e}"),
        })
    }
}

/// Training provenance stored alongside model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub config: TrainConfig,
    pub final_loss: f64,
    pub final_accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelMeta {
    spec: ModelSpec,
    train: Option<TrainMeta>,
}

pub fn save_model(path: &Path, model: &Model, train: Option<&TrainMeta>) -> Result<()> {
    let meta = ModelMeta { spec: model.spec.clone(), train: train.cloned() };
    let container = Container {
        kind: "model".into(),
        meta: serde_json::to_string(&meta).expect("model meta serializes"),
        tensors: model.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
    };
    container.save(path)
}

pub fn load_model(path: &Path) -> Result<(Model, Option<TrainMeta>)> {
    let container = Container::load(path)?;
    if container.kind != "model" {
        return Err(Error::Format {
            offset: 8,
            message: format!("container kind '{}', expected 'model'", container.kind),
        });
    }
    let meta: ModelMeta = serde_json::from_str(&container.meta).map_err(|e| Error::Format {
        offset: 8,
        message: format!("model metadata: {e}"),
    })?;
    let params: Vec<Param> = container
        .tensors
        .into_iter()
        .map(|(name, value)| Param { name, value })
        .collect();
    let model = Model::from_params(meta.spec, params)?;
    Ok((model, meta.train))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetMeta {
    num_classes: usize,
    split: Split,
    provenance: Provenance,
}

pub fn save_dataset(path: &Path, d: &Dataset) -> Result<()> {
    let meta = DatasetMeta { num_classes: d.num_classes, split: d.split, provenance: d.provenance };
    let labels = Tensor::new(
        vec![d.labels.len()],
        d.labels.iter().map(|&l| l as f32).collect(),
    )?;
    let container = Container {
        kind: "dataset".into(),
        meta: serde_json::to_string(&meta).expect("dataset meta serializes"),
        tensors: vec![("images".into(), d.images.clone()), ("labels".into(), labels)],
    };
    container.save(path)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let container = Container::load(path)?;
    if container.kind != "dataset" {
        return Err(Error::Format {
            offset: 8,
            message: format!("container kind '{}', expected 'dataset'", container.kind),
        });
    }
    let meta: DatasetMeta = serde_json::from_str(&container.meta).map_err(|e| Error::Format {
        offset: 8,
        message: format!("dataset metadata: {e}"),
    })?;
    let mut images = None;
    let mut labels = None;
    for (name, tensor) in container.tensors {
        match name.as_str() {
            "images" => images = Some(tensor),
            "labels" => labels = Some(tensor),
            other => {
                return Err(Error::Format {
                    offset: 0,
                    message: format!("unexpected tensor '{other}' in dataset container"),
                })
            }
        }
    }
    let images = images.ok_or_else(|| Error::Format {
        offset: 0,
        message: "missing 'images' tensor".into(),
    })?;
    let labels = labels.ok_or_else(|| Error::Format {
        offset: 0,
        message: "missing 'labels' tensor".into(),
    })?;
    Dataset::new(
        images,
        labels.data().iter().map(|&v| v as usize).collect(),
        meta.num_classes,
        meta.split,
        meta.provenance,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::synth_classes;
    use crate::nets::{evaluate_cda, train, Optimizer};

    fn trained_model() -> (Model, TrainMeta, Dataset) {
        let data = synth_classes(120, 3, 8, 2);
        let spec = ModelSpec::mlp2([1, 8, 8], 3, 12);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 16,
            learning_rate: 1e-3,
            optimizer: Optimizer::default(),
            proportion: 1.0,
            seed: 5,
        };
        let (model, history) = train(&spec, &data, &cfg).unwrap();
        let last = history.epochs.last().unwrap();
        let meta =
            TrainMeta { config: cfg, final_loss: last.loss, final_accuracy: last.accuracy };
        (model, meta, data)
    }

    #[test]
    fn model_roundtrip_is_byte_identical() {
        let (model, meta, data) = trained_model();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.bdlb");
        let p2 = dir.path().join("b.bdlb");
        save_model(&p1, &model, Some(&meta)).unwrap();
        let (loaded, loaded_meta) = load_model(&p1).unwrap();
        save_model(&p2, &loaded, loaded_meta.as_ref()).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        let before = evaluate_cda(&model, &data).unwrap();
        let after = evaluate_cda(&loaded, &data).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn corrupted_magic_is_format_error() {
        let (model, _, _) = trained_model();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bdlb");
        save_model(&p, &model, None).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'X';
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_model(&p), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn wrong_spec_names_offending_tensor() {
        let (model, _, _) = trained_model();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bdlb");
        // store with a meta spec whose hidden width disagrees with the tensors
        let wrong_spec = ModelSpec::mlp2([1, 8, 8], 3, 20);
        let meta = ModelMeta { spec: wrong_spec, train: None };
        let container = Container {
            kind: "model".into(),
            meta: serde_json::to_string(&meta).unwrap(),
            tensors: model
                .params
                .iter()
                .map(|pr| (pr.name.clone(), pr.value.clone()))
                .collect(),
        };
        container.save(&p).unwrap();
        match load_model(&p) {
            Err(Error::Shape(msg)) => assert!(msg.contains("l1.weight"), "got: {msg}"),
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn dataset_roundtrip_bit_exact() {
        let d = synth_classes(40, 4, 8, 9);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.bdlb");
        save_dataset(&p, &d).unwrap();
        let loaded = load_dataset(&p).unwrap();
        assert_eq!(loaded.images, d.images);
        assert_eq!(loaded.labels, d.labels);
        assert_eq!(loaded.num_classes, d.num_classes);
        assert_eq!(loaded.split, d.split);
        assert_eq!(loaded.provenance, d.provenance);
    }

    #[test]
    fn truncated_container_reports_offset() {
        let (model, _, _) = trained_model();
        let bytes = Container {
            kind: "model".into(),
            meta: "{}".into(),
            tensors: model.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
        }
        .to_bytes();
        let err = Container::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }
}
