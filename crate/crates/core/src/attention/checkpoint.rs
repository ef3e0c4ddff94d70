//! JSON checkpoint of an attention head: a version tag, the configuration
//! and every parameter block with its shape.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{AttnConfig, AttnHead};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: AttnConfig,
    pub tensors: BTreeMap<String, Tensor>,
}

fn vector(t: &Tensor, n: usize, name: &str) -> Result<Array1<f64>> {
    if t.shape != [n] || t.data.len() != n {
        return Err(Error::Data(format!("tensor {name} has shape {:?}", t.shape)));
    }
    Ok(Array1::from(t.data.clone()))
}

impl Checkpoint {
    pub fn from_head(head: &AttnHead) -> Self {
        let mut tensors = BTreeMap::new();
        for (i, w) in head.w.iter().enumerate() {
            tensors.insert(
                format!("w{i}"),
                Tensor {
                    shape: vec![w.nrows(), w.ncols()],
                    data: w.iter().copied().collect(),
                },
            );
        }
        for (name, v) in [
            ("a_ref", &head.a_ref),
            ("a_chan", &head.a_chan),
            ("a_ctx", &head.a_ctx),
            ("bias", &head.bias),
        ] {
            tensors.insert(
                name.to_string(),
                Tensor {
                    shape: vec![v.len()],
                    data: v.to_vec(),
                },
            );
        }
        Self {
            version: CHECKPOINT_VERSION,
            config: head.config,
            tensors,
        }
    }

    pub fn into_head(self) -> Result<AttnHead> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "checkpoint version {} (supported: {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        let get = |name: &str| {
            self.tensors
                .get(name)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks tensor {name}")))
        };
        let n = get("bias")?.data.len();
        let mut w = Vec::new();
        while let Some(t) = self.tensors.get(&format!("w{}", w.len())) {
            if t.shape != [n, n] || t.data.len() != n * n {
                return Err(Error::Data(format!("W has shape {:?}", t.shape)));
            }
            w.push(Array2::from_shape_vec((n, n), t.data.clone()).expect("checked shape"));
        }
        let expected = match (self.config.attention, self.config.shared_w) {
            (false, _) => w.is_empty(),
            (true, true) => w.len() == 1,
            (true, false) => !w.is_empty(),
        };
        if !expected {
            return Err(Error::Data(format!(
                "{} W matrices for config {:?}",
                w.len(),
                self.config
            )));
        }
        Ok(AttnHead {
            config: self.config,
            w,
            a_ref: vector(get("a_ref")?, n, "a_ref")?,
            a_chan: vector(get("a_chan")?, n, "a_chan")?,
            a_ctx: vector(get("a_ctx")?, n, "a_ctx")?,
            bias: vector(get("bias")?, n, "bias")?,
        })
    }
}

pub fn save(head: &AttnHead, path: &Path) -> Result<()> {
    let text = serde_json::to_string(&Checkpoint::from_head(head))
        .map_err(|e| Error::json(path, e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<AttnHead> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    ck.into_head()
}
