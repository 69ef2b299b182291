//! Activation capture: run position-aligned test prompts through a model and
//! persist the full `[sample, layer, token, dim]` activation tensor with a
//! per-sample index sidecar.
//!
//! File format "ACTV": magic, u32 version, four u32 dims, then raw
//! little-endian f32 data. The sidecar `<file>.idx.jsonl` holds one header
//! line (checkpoint fingerprint) followed by one JSON object per sample.

use std::io::{BufRead, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{ProbeSplit, QASample};
use crate::model::{Model, ModelError, Scalar};

#[derive(Debug, Error)]
pub enum CaptureError {
    #[error("misaligned prompts: lengths {0} and {1} differ")]
    MisalignedPrompts(usize, usize),
    #[error("no prompts to capture")]
    NoPrompts,
    #[error("corrupt tensor file: {0}")]
    CorruptTensorFile(String),
    #[error("model error: {0}")]
    Model(#[from] ModelError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-sample index entry of an [`ActivationTensor`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleIndex {
    pub entity_id: u32,
    pub stage: u16,
    pub probe_split: ProbeSplit,
    pub prompt_id: u32,
}

/// Post-residual activations for a batch of position-aligned prompts.
#[derive(Debug, Clone)]
pub struct ActivationTensor {
    /// `[n_samples, n_layers, n_tokens, d_model]`
    pub data: Array4<f32>,
    pub index: Vec<SampleIndex>,
    pub fingerprint: String,
}

impl ActivationTensor {
    pub fn n_samples(&self) -> usize {
        self.data.shape()[0]
    }
    pub fn n_layers(&self) -> usize {
        self.data.shape()[1]
    }
    pub fn n_tokens(&self) -> usize {
        self.data.shape()[2]
    }
    pub fn d_model(&self) -> usize {
        self.data.shape()[3]
    }

    /// Rows of the `(layer, token)` cell, ordered as the index.
    pub fn cell(&self, layer: usize, token: usize) -> Array2<f32> {
        self.data.slice(s![.., layer, token, ..]).to_owned()
    }
}

/// Capture activations for test prompts. Batching is an internal detail: the
/// output sample order always equals the input order.
pub fn capture_activations<F: Scalar>(
    model: &Model<F>,
    prompts: &[QASample],
    fingerprint: &str,
    batch_size: usize,
) -> Result<ActivationTensor, CaptureError> {
    if prompts.is_empty() {
        return Err(CaptureError::NoPrompts);
    }
    let tlen = prompts[0].prompt_tokens.len();
    for p in prompts {
        if p.prompt_tokens.len() != tlen {
            return Err(CaptureError::MisalignedPrompts(tlen, p.prompt_tokens.len()));
        }
    }
    let n = prompts.len();
    let n_layers = model.config.n_layers;
    let d = model.config.d_model;
    let mut data = Array4::<f32>::zeros((n, n_layers, tlen, d));
    for (chunk_idx, chunk) in prompts.chunks(batch_size.max(1)).enumerate() {
        let bsz = chunk.len();
        let mut tokens = Array2::from_elem((bsz, tlen), 0usize);
        for (b, p) in chunk.iter().enumerate() {
            for (t, &tok) in p.prompt_tokens.iter().enumerate() {
                tokens[[b, t]] = tok as usize;
            }
        }
        let res = model.forward(tokens.view())?;
        let base = chunk_idx * batch_size.max(1);
        for b in 0..bsz {
            for l in 0..n_layers {
                for t in 0..tlen {
                    for j in 0..d {
                        data[[base + b, l, t, j]] = res.activations[[l, b, t, j]].as_f64() as f32;
                    }
                }
            }
        }
    }
    let index = prompts
        .iter()
        .map(|p| SampleIndex {
            entity_id: p.entity_id,
            stage: p.stage,
            probe_split: p.probe_split,
            prompt_id: p.template_id,
        })
        .collect();
    Ok(ActivationTensor {
        data,
        index,
        fingerprint: fingerprint.to_string(),
    })
}

const ACTV_MAGIC: &[u8; 4] = b"ACTV";
const ACTV_VERSION: u32 = 1;

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".idx.jsonl");
    PathBuf::from(s)
}

#[derive(Serialize, Deserialize)]
struct SidecarHeader {
    fingerprint: String,
}

pub fn write_actv(tensor: &ActivationTensor, path: &Path) -> Result<(), CaptureError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(ACTV_MAGIC)?;
    f.write_all(&ACTV_VERSION.to_le_bytes())?;
    for &dim in tensor.data.shape() {
        f.write_all(&(dim as u32).to_le_bytes())?;
    }
    for &x in tensor.data.as_slice().unwrap() {
        f.write_all(&x.to_le_bytes())?;
    }
    drop(f);

    let mut idx = std::io::BufWriter::new(std::fs::File::create(sidecar_path(path))?);
    let header = SidecarHeader {
        fingerprint: tensor.fingerprint.clone(),
    };
    writeln!(idx, "{}", serde_json::to_string(&header).unwrap())?;
    for entry in &tensor.index {
        writeln!(idx, "{}", serde_json::to_string(entry).unwrap())?;
    }
    Ok(())
}

/// Result of reading an ACTV file. `fingerprint_mismatch` is set when the
/// caller supplied an expected fingerprint that differs from the sidecar's.
pub struct ReadActv {
    pub tensor: ActivationTensor,
    pub fingerprint_mismatch: bool,
}

pub fn read_actv(path: &Path, expect_fingerprint: Option<&str>) -> Result<ReadActv, CaptureError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)
        .map_err(|_| CaptureError::CorruptTensorFile("truncated magic".into()))?;
    if &magic != ACTV_MAGIC {
        return Err(CaptureError::CorruptTensorFile(format!(
            "bad magic {magic:?}"
        )));
    }
    let mut u32buf = [0u8; 4];
    f.read_exact(&mut u32buf)
        .map_err(|_| CaptureError::CorruptTensorFile("truncated version".into()))?;
    if u32::from_le_bytes(u32buf) != ACTV_VERSION {
        return Err(CaptureError::CorruptTensorFile("unsupported version".into()));
    }
    let mut dims = [0usize; 4];
    for d in dims.iter_mut() {
        f.read_exact(&mut u32buf)
            .map_err(|_| CaptureError::CorruptTensorFile("truncated dims".into()))?;
        *d = u32::from_le_bytes(u32buf) as usize;
    }
    let count = dims.iter().product::<usize>();
    let mut bytes = vec![0u8; count * 4];
    f.read_exact(&mut bytes)
        .map_err(|_| CaptureError::CorruptTensorFile("payload shorter than header dims".into()))?;
    let mut tail = [0u8; 1];
    if f.read(&mut tail)? != 0 {
        return Err(CaptureError::CorruptTensorFile(
            "payload longer than header dims".into(),
        ));
    }
    let mut values = Vec::with_capacity(count);
    for i in 0..count {
        values.push(f32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap()));
    }
    let data = Array4::from_shape_vec((dims[0], dims[1], dims[2], dims[3]), values)
        .map_err(|e| CaptureError::CorruptTensorFile(e.to_string()))?;

    let idx_file = std::io::BufReader::new(std::fs::File::open(sidecar_path(path))?);
    let mut lines = idx_file.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| CaptureError::CorruptTensorFile("empty sidecar".into()))??;
    let header: SidecarHeader = serde_json::from_str(&header_line)
        .map_err(|e| CaptureError::CorruptTensorFile(format!("sidecar header: {e}")))?;
    let mut index = Vec::with_capacity(dims[0]);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        index.push(
            serde_json::from_str(&line)
                .map_err(|e| CaptureError::CorruptTensorFile(format!("sidecar entry: {e}")))?,
        );
    }
    if index.len() != dims[0] {
        return Err(CaptureError::CorruptTensorFile(format!(
            "index length {} != n_samples {}",
            index.len(),
            dims[0]
        )));
    }
    let fingerprint_mismatch = expect_fingerprint
        .map(|fp| fp != header.fingerprint)
        .unwrap_or(false);
    Ok(ReadActv {
        tensor: ActivationTensor {
            data,
            index,
            fingerprint: header.fingerprint,
        },
        fingerprint_mismatch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{self, Variant, Vocabulary};
    use crate::model::{init_model, ModelConfig};

    fn setup() -> (Vocabulary, Model<f32>, Vec<QASample>) {
        let vocab = Vocabulary::build();
        let n = 12;
        let entities = datagen::gen_entities(n, 0);
        let aliases = datagen::gen_aliases(n, 3, 200, 0).unwrap();
        let plan = datagen::partition_stages(&entities, 2, 0).unwrap();
        let prompts =
            datagen::render_test_prompts(&vocab, &entities, &aliases, &plan, 1, Variant::Synthetic);
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab_size: vocab.len(),
            max_context: 32,
        };
        let model: Model<f32> = init_model(&cfg, 0);
        (vocab, model, prompts)
    }

    #[test]
    fn capture_shape_contract() {
        let (_, model, prompts) = setup();
        let tlen = prompts[0].prompt_tokens.len();
        let acts = capture_activations(&model, &prompts, "fp", 4).unwrap();
        assert_eq!(acts.data.shape(), &[12, 2, tlen, 16]);
        assert_eq!(acts.index.len(), 12);
    }

    #[test]
    fn capture_batching_invariance() {
        let (_, model, prompts) = setup();
        let a = capture_activations(&model, &prompts, "fp", 1).unwrap();
        let b = capture_activations(&model, &prompts, "fp", 32).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn capture_misaligned_rejected() {
        let (_, model, mut prompts) = setup();
        prompts[3].prompt_tokens.push(0);
        assert!(matches!(
            capture_activations(&model, &prompts, "fp", 4),
            Err(CaptureError::MisalignedPrompts(..))
        ));
    }

    #[test]
    fn actv_roundtrip_bit_exact() {
        let (_, model, prompts) = setup();
        let acts = capture_activations(&model, &prompts, "fp123", 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("1.actv");
        write_actv(&acts, &path).unwrap();
        let back = read_actv(&path, Some("fp123")).unwrap();
        assert!(!back.fingerprint_mismatch);
        assert_eq!(back.tensor.data, acts.data);
        assert_eq!(back.tensor.index, acts.index);

        let mismatch = read_actv(&path, Some("other")).unwrap();
        assert!(mismatch.fingerprint_mismatch);
    }

    #[test]
    fn actv_corruption_detected() {
        let (_, model, prompts) = setup();
        let acts = capture_activations(&model, &prompts, "fp", 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("1.actv");
        write_actv(&acts, &path).unwrap();
        // Truncate the payload so dims disagree with the byte count.
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(
            read_actv(&path, None),
            Err(CaptureError::CorruptTensorFile(_))
        ));
    }

    #[test]
    fn cell_rows_match_index_order() {
        let (_, model, prompts) = setup();
        let acts = capture_activations(&model, &prompts, "fp", 5).unwrap();
        let cell = acts.cell(1, 2);
        for (i, _) in acts.index.iter().enumerate() {
            for j in 0..acts.d_model() {
                assert_eq!(cell[[i, j]], acts.data[[i, 1, 2, j]]);
            }
        }
    }
}
