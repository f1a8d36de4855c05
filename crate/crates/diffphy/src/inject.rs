//! Injection branch: a frozen clone of each base cross-attention block,
//! conditioned on an embedding of the failed facts, with trainable LoRA on
//! the cloned projections and a zero-initialized gate projection so the
//! branch contributes exactly nothing until training moves the gate.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dit::{
    read_tensor_file, write_tensor_file, AttnLora, AttnWeights, DitModel, InjectionInput,
};
use crate::context::PhenomenonFact;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::util::{derive_seed, embed_text, separator_embedding};

pub const DEFAULT_ADAPTER_RANK: usize = 16;
pub const DEFAULT_ADAPTER_ALPHA: f64 = 32.0;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { rank: DEFAULT_ADAPTER_RANK, alpha: DEFAULT_ADAPTER_ALPHA }
    }
}

/// The trainable injection adapter state for one model.
#[derive(Debug, Clone)]
pub struct InjectionBranch {
    pub config: AdapterConfig,
    pub model_dim: usize,
    pub text_dim: usize,
    /// Frozen per-block copies of the base cross-attention weights.
    pub clones: Vec<AttnWeights>,
    /// Trainable zero-initialized gate projections, one [d, d] per block.
    pub gates: Vec<Tensor>,
    /// Trainable LoRA deltas on the cloned projections.
    pub loras: Vec<AttnLora>,
    /// Seed for the failure-fact encoder so encoding is reproducible.
    pub encoder_seed: u64,
}

/// Clone the base attention of every block and attach zeroed gates plus
/// fresh LoRA deltas.
pub fn build_injection_branch(model: &DitModel, config: AdapterConfig, seed: u64) -> Result<InjectionBranch> {
    if config.rank == 0 {
        return Err(Error::Precondition("adapter rank must be >= 1".into()));
    }
    let d = model.config.model_dim;
    let td = model.config.text_dim;
    if model.blocks.is_empty() {
        return Err(Error::IncompatibleModel("model has no blocks".into()));
    }
    for (i, b) in model.blocks.iter().enumerate() {
        if b.attn.wq.shape != vec![d, d] || b.attn.wk.shape != vec![td, d] {
            return Err(Error::IncompatibleModel(format!("block {i} attention shape mismatch")));
        }
    }
    let clones: Vec<AttnWeights> = model.blocks.iter().map(|b| b.attn.clone()).collect();
    let gates = vec![Tensor::zeros(vec![d, d]); model.blocks.len()];
    let loras = (0..model.blocks.len())
        .map(|i| {
            AttnLora::new(derive_seed(seed, &format!("branch_lora{i}")), d, td, config.rank, config.alpha)
        })
        .collect();
    Ok(InjectionBranch {
        config,
        model_dim: d,
        text_dim: td,
        clones,
        gates,
        loras,
        encoder_seed: derive_seed(seed, "fact_encoder"),
    })
}

impl InjectionBranch {
    /// Trainable parameter count: per block one [d,d] gate plus LoRA A/B
    /// pairs on the four cloned projections.
    pub fn trainable_param_count(&self) -> usize {
        let gate = self.model_dim * self.model_dim;
        self.loras.iter().map(|l| gate + l.param_count()).sum()
    }

    /// Embed failed facts into a conditioning sequence: each fact's token
    /// embeddings, with a fixed separator row between consecutive facts.
    pub fn encode_failure_facts(&self, facts: &[PhenomenonFact]) -> Result<Tensor> {
        if facts.is_empty() {
            return Err(Error::EmptyFactList);
        }
        let dim = self.text_dim;
        let sep = separator_embedding(dim, self.encoder_seed);
        let mut rows: Vec<f64> = Vec::new();
        let mut n_rows = 0;
        for (i, fact) in facts.iter().enumerate() {
            if i > 0 {
                rows.extend_from_slice(&sep);
                n_rows += 1;
            }
            let emb = embed_text(&fact.text, dim, self.encoder_seed);
            n_rows += emb.rows();
            rows.extend_from_slice(&emb.data);
        }
        Ok(Tensor::new(vec![n_rows, dim], rows))
    }

    /// Bundle references for the model's forward pass.
    pub fn as_input<'a>(&'a self, failure_embedding: &'a Tensor) -> InjectionInput<'a> {
        InjectionInput {
            clones: &self.clones,
            gates: &self.gates,
            loras: &self.loras,
            failure_embedding,
        }
    }

    /// Names and tensors of every trainable adapter parameter, using the
    /// same naming scheme the forward pass emits.
    pub fn trainable_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for i in 0..self.clones.len() {
            out.push((format!("branch.{i}.gate"), &self.gates[i]));
            let l = &self.loras[i];
            for (site, delta) in [("q", &l.q), ("k", &l.k), ("v", &l.v), ("o", &l.o)] {
                out.push((format!("branch.{i}.lora.{site}.a"), &delta.a));
                out.push((format!("branch.{i}.lora.{site}.b"), &delta.b));
            }
        }
        out
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let parts: Vec<&str> = name.split('.').collect();
        if parts.len() < 3 || parts[0] != "branch" {
            return None;
        }
        let i: usize = parts[1].parse().ok()?;
        match parts[2] {
            "gate" if parts.len() == 3 => self.gates.get_mut(i),
            "lora" if parts.len() == 5 => {
                let l = self.loras.get_mut(i)?;
                let delta = match parts[3] {
                    "q" => &mut l.q,
                    "k" => &mut l.k,
                    "v" => &mut l.v,
                    "o" => &mut l.o,
                    _ => return None,
                };
                match parts[4] {
                    "a" => Some(&mut delta.a),
                    "b" => Some(&mut delta.b),
                    _ => None,
                }
            }
            _ => None,
        }
    }

    /// Materialize the effective cloned-attention weights with LoRA applied.
    pub fn effective_clone_weights(&self, block: usize) -> Result<AttnWeights> {
        let clone = self
            .clones
            .get(block)
            .ok_or_else(|| Error::Precondition(format!("no block {block}")))?;
        let l = &self.loras[block];
        let apply = |w: &Tensor, delta: &crate::dit::LoraDelta| -> Tensor {
            let (rows, cols) = (w.rows(), w.cols());
            let rank = l.rank;
            let mut out = w.clone();
            for r in 0..rows {
                for c in 0..cols {
                    let mut acc = 0.0;
                    for k in 0..rank {
                        acc += delta.a.data[r * rank + k] * delta.b.data[k * cols + c];
                    }
                    out.data[r * cols + c] += l.scaling * acc;
                }
            }
            out
        };
        Ok(AttnWeights {
            wq: apply(&clone.wq, &l.q),
            wk: apply(&clone.wk, &l.k),
            wv: apply(&clone.wv, &l.v),
            wo: apply(&clone.wo, &l.o),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct BranchHeader {
    version: u32,
    config: AdapterConfig,
    model_dim: usize,
    text_dim: usize,
    blocks: usize,
    encoder_seed: u64,
    manifest: Vec<(String, Vec<usize>)>,
}

/// Save the branch (clones, gates, LoRA) as a standalone binary file.
pub fn save_branch(path: &Path, branch: &InjectionBranch) -> Result<()> {
    let mut tensors: Vec<(String, &Tensor)> = Vec::new();
    for (i, c) in branch.clones.iter().enumerate() {
        tensors.push((format!("clone.{i}.wq"), &c.wq));
        tensors.push((format!("clone.{i}.wk"), &c.wk));
        tensors.push((format!("clone.{i}.wv"), &c.wv));
        tensors.push((format!("clone.{i}.wo"), &c.wo));
    }
    tensors.extend(branch.trainable_tensors());
    let header = BranchHeader {
        version: 1,
        config: branch.config.clone(),
        model_dim: branch.model_dim,
        text_dim: branch.text_dim,
        blocks: branch.clones.len(),
        encoder_seed: branch.encoder_seed,
        manifest: tensors.iter().map(|(n, t)| (n.clone(), t.shape.clone())).collect(),
    };
    let json = serde_json::to_string(&header).map_err(|e| Error::Json(e.to_string()))?;
    write_tensor_file(path, &json, &tensors)
}

pub fn load_branch(path: &Path) -> Result<InjectionBranch> {
    let (hjson, body) = read_tensor_file(path)?;
    let header: BranchHeader =
        serde_json::from_str(&hjson).map_err(|e| Error::Json(e.to_string()))?;
    let (d, td) = (header.model_dim, header.text_dim);
    let zero_attn = || AttnWeights {
        wq: Tensor::zeros(vec![d, d]),
        wk: Tensor::zeros(vec![td, d]),
        wv: Tensor::zeros(vec![td, d]),
        wo: Tensor::zeros(vec![d, d]),
    };
    let mut branch = InjectionBranch {
        config: header.config.clone(),
        model_dim: d,
        text_dim: td,
        clones: (0..header.blocks).map(|_| zero_attn()).collect(),
        gates: vec![Tensor::zeros(vec![d, d]); header.blocks],
        loras: (0..header.blocks)
            .map(|_| AttnLora::new(0, d, td, header.config.rank, header.config.alpha))
            .collect(),
        encoder_seed: header.encoder_seed,
    };
    let mut off = 0;
    for (name, shape) in &header.manifest {
        let n: usize = shape.iter().product();
        let end = off + n * 8;
        if end > body.len() {
            return Err(Error::Config("branch file truncated".into()));
        }
        let data: Vec<f64> = body[off..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        off = end;
        let tensor = Tensor::new(shape.clone(), data);
        if let Some(rest) = name.strip_prefix("clone.") {
            let mut parts = rest.split('.');
            let i: usize = parts
                .next()
                .and_then(|p| p.parse().ok())
                .ok_or_else(|| Error::Config(format!("bad name {name}")))?;
            let c = branch
                .clones
                .get_mut(i)
                .ok_or_else(|| Error::Config(format!("bad block in {name}")))?;
            match parts.next() {
                Some("wq") => c.wq = tensor,
                Some("wk") => c.wk = tensor,
                Some("wv") => c.wv = tensor,
                Some("wo") => c.wo = tensor,
                _ => return Err(Error::Config(format!("unknown tensor {name}"))),
            }
        } else {
            match branch.tensor_mut(name) {
                Some(slot) => *slot = tensor,
                None => return Err(Error::Config(format!("unknown tensor {name}"))),
            }
        }
    }
    Ok(branch)
}
