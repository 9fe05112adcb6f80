//! Safetensors I/O for pretrained backbones and trained checkpoints.

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use super::{backbone_spec, reference_spec, BackboneName, ClassifierModel, FineTunePolicy, Normalization, Result, ZooError};
use crate::nn::{Architecture, Network, ParamGroup};

const META_KEY: &str = "candling";
const FORMAT_VERSION: u32 = 1;

/// Self-description stored in a checkpoint's header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: u32,
    pub backbone: BackboneName,
    pub input_size: (u32, u32),
    pub fine_tune: FineTunePolicy,
    pub seed: u64,
    pub normalization: Normalization,
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| ZooError::Io { path: path.into(), source })
}

fn to_f64(view: &TensorView<'_>) -> Option<Vec<f64>> {
    let data = view.data();
    match view.dtype() {
        Dtype::F64 => Some(data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
        Dtype::F32 => Some(data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect()),
        _ => None,
    }
}

fn tensor_values(st: &SafeTensors<'_>, name: &str, shape: &[usize]) -> std::result::Result<Vec<f64>, String> {
    let view = st.tensor(name).map_err(|_| format!("missing tensor {name}"))?;
    if view.shape() != shape {
        return Err(format!("tensor {name} has shape {:?}, expected {shape:?}", view.shape()));
    }
    to_f64(&view).ok_or_else(|| format!("tensor {name} has unsupported dtype {:?}", view.dtype()))
}

/// Reads every backbone parameter of `arch` from a safetensors file whose
/// tensor names match the architecture's parameter names (convolution
/// weights as `[out, in/groups, kh, kw]`, dense weights as `[out, in]`).
/// Head parameters are skipped and returned as zeros.
pub fn load_pretrained(name: BackboneName, arch: &Architecture, path: &Path) -> Result<Vec<Vec<f64>>> {
    let bytes = read_file(path)?;
    let mismatch = |reason: String| ZooError::WeightsMismatch { backbone: name, path: path.into(), reason };
    let st = SafeTensors::deserialize(&bytes).map_err(|e| mismatch(e.to_string()))?;
    arch.params
        .iter()
        .map(|p| {
            if p.group == ParamGroup::Head {
                Ok(vec![0.0; p.numel()])
            } else {
                tensor_values(&st, &p.name, &p.shape).map_err(mismatch)
            }
        })
        .collect()
}

pub fn save_checkpoint(model: &ClassifierModel, path: &Path) -> Result<()> {
    let meta = CheckpointMeta {
        format: FORMAT_VERSION,
        backbone: model.backbone.name,
        input_size: model.input_size(),
        fine_tune: model.fine_tune,
        seed: model.seed,
        normalization: model.normalization,
    };
    let arch = model.architecture();
    let buffers: Vec<Vec<u8>> =
        model.network().values().iter().map(|v| v.iter().flat_map(|x| x.to_le_bytes()).collect()).collect();
    let views = arch
        .params
        .iter()
        .zip(&buffers)
        .map(|(p, buf)| Ok((p.name.clone(), TensorView::new(Dtype::F64, p.shape.clone(), buf).map_err(|e| e.to_string())?)))
        .collect::<std::result::Result<Vec<_>, String>>()
        .map_err(|reason| ZooError::Checkpoint { path: path.into(), reason })?;
    let header = HashMap::from([(META_KEY.to_string(), serde_json::to_string(&meta).expect("metadata serialises"))]);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|source| ZooError::Io { path: parent.into(), source })?;
    }
    safetensors::serialize_to_file(views, Some(header), path)
        .map_err(|e| ZooError::Checkpoint { path: path.into(), reason: e.to_string() })
}

pub fn load_checkpoint(path: &Path) -> Result<ClassifierModel> {
    let bytes = read_file(path)?;
    let bad = |reason: String| ZooError::Checkpoint { path: path.into(), reason };
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
    let meta_json = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| bad("not a candling checkpoint (metadata missing)".into()))?;
    let meta: CheckpointMeta = serde_json::from_str(meta_json).map_err(|e| bad(e.to_string()))?;
    if meta.format != FORMAT_VERSION {
        return Err(bad(format!("unsupported checkpoint format {}", meta.format)));
    }
    let spec = match meta.backbone {
        BackboneName::Reference => reference_spec(meta.input_size),
        name => backbone_spec(name),
    };
    let arch = spec.architecture();
    let st = SafeTensors::deserialize(&bytes).map_err(|e| bad(e.to_string()))?;
    let values = arch
        .params
        .iter()
        .map(|p| tensor_values(&st, &p.name, &p.shape))
        .collect::<std::result::Result<Vec<_>, String>>()
        .map_err(bad)?;
    let mut model = ClassifierModel::assemble(spec, meta.fine_tune, meta.seed, Network::from_values(arch, values));
    model.normalization = meta.normalization;
    Ok(model)
}
