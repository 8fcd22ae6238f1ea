//! Checkpoint files and the checkpoint directory bundle.
//!
//! Both weight files share one container layout: an 8-byte magic string, a
//! u32 format version, a length-prefixed JSON config header, then named f32
//! arrays (name, shape, little-endian payload). The encoder file uses magic
//! `PEMI-ENC`; the trainable-state file uses `PEMI-TRN`. Writing is fully
//! deterministic, so save -> load -> save reproduces identical bytes.
//!
//! A full checkpoint is a directory:
//!
//! ```text
//! checkpoint/
//!   encoder.penc     frozen encoder (config + arrays)
//!   trainable.ptrn   prompt, bottom embeddings, weight units (+ options)
//!   hierarchy.json   label hierarchy
//!   vocab.tsv        token<TAB>id lines
//!   layout.txt       template layout string
//! ```

use crate::encoder::{EncoderConfig, EncoderModel, PromptPositional};
use crate::error::{Error, Result};
use crate::hlr::{LabelHierarchy, Normalization, VerbalizerState, WeightUnits};
use crate::model::PemiModel;
use crate::template::{parse_layout, Vocab};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

pub const ENCODER_MAGIC: &[u8; 8] = b"PEMI-ENC";
pub const TRAINABLE_MAGIC: &[u8; 8] = b"PEMI-TRN";
pub const FORMAT_VERSION: u32 = 1;

pub const ENCODER_FILE: &str = "encoder.penc";
pub const TRAINABLE_FILE: &str = "trainable.ptrn";
pub const HIERARCHY_FILE: &str = "hierarchy.json";
pub const VOCAB_FILE: &str = "vocab.tsv";
pub const LAYOUT_FILE: &str = "layout.txt";

fn write_container(magic: &[u8; 8], header: &str, arrays: &[(&str, &Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, tensor) in arrays {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &dim in tensor.shape() {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated file while reading {what}"
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let b = self.take(len, what)?;
        String::from_utf8(b.to_vec())
            .map_err(|_| Error::Checkpoint(format!("{what} is not valid UTF-8")))
    }
}

fn read_container(bytes: &[u8], expect_magic: &[u8; 8]) -> Result<(String, Vec<(String, Tensor)>)> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(8, "magic")?;
    if magic != expect_magic {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(expect_magic)
        )));
    }
    let version = cur.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let header = cur.string("config header")?;
    let count = cur.u32("array count")? as usize;
    let mut arrays = Vec::with_capacity(count);
    for _ in 0..count {
        let name = cur.string("array name")?;
        let ndim = cur.u32(&format!("rank of {name}"))? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u32(&format!("shape of {name}"))? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = cur.take(numel * 4, &format!("payload of {name}"))?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let tensor = Tensor::from_vec(shape, data)
            .map_err(|e| Error::Checkpoint(format!("array {name}: {e}")))?;
        arrays.push((name, tensor));
    }
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last array".into()));
    }
    Ok((header, arrays))
}

/// Serializes the frozen encoder (config header + named arrays).
pub fn encoder_bytes(model: &EncoderModel) -> Result<Vec<u8>> {
    let header = serde_json::to_string(model.config())?;
    Ok(write_container(ENCODER_MAGIC, &header, &model.named_arrays()))
}

pub fn save_encoder(model: &EncoderModel, path: &Path) -> Result<()> {
    std::fs::write(path, encoder_bytes(model)?)?;
    Ok(())
}

pub fn load_encoder(path: &Path) -> Result<EncoderModel> {
    let bytes = std::fs::read(path)?;
    let (header, arrays) = read_container(&bytes, ENCODER_MAGIC)?;
    let config: EncoderConfig = serde_json::from_str(&header)
        .map_err(|e| Error::Checkpoint(format!("bad encoder config header: {e}")))?;
    let map: HashMap<String, Tensor> = arrays.into_iter().collect();
    EncoderModel::from_arrays(&config, map)
}

/// Options recorded alongside the trainable state so evaluation and
/// prediction reproduce training behavior.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainableHeader {
    pub z_levels: usize,
    pub lambda: Vec<f32>,
    pub normalization: Normalization,
    pub prompt_positional: PromptPositional,
}

pub fn trainable_bytes(model: &PemiModel, lambda: &[f32]) -> Result<Vec<u8>> {
    let header = serde_json::to_string(&TrainableHeader {
        z_levels: model.num_levels(),
        lambda: lambda.to_vec(),
        normalization: model.verbalizer.normalization,
        prompt_positional: model.prompt_positional,
    })?;
    let mut arrays: Vec<(&str, &Tensor)> = vec![
        ("prompt", &model.prompt),
        ("bottom_embeddings", &model.verbalizer.bottom),
    ];
    let unit_names: Vec<String> = (1..model.num_levels()).map(|z| format!("units.{z}")).collect();
    for (z, name) in (1..model.num_levels()).zip(&unit_names) {
        arrays.push((name.as_str(), model.verbalizer.units.level(z)));
    }
    Ok(write_container(TRAINABLE_MAGIC, &header, &arrays))
}

struct TrainableState {
    header: TrainableHeader,
    prompt: Tensor,
    bottom: Tensor,
    units: Vec<Tensor>,
}

fn load_trainable(path: &Path) -> Result<TrainableState> {
    let bytes = std::fs::read(path)?;
    let (header, arrays) = read_container(&bytes, TRAINABLE_MAGIC)?;
    let header: TrainableHeader = serde_json::from_str(&header)
        .map_err(|e| Error::Checkpoint(format!("bad trainable header: {e}")))?;
    let mut map: HashMap<String, Tensor> = arrays.into_iter().collect();
    let mut take = |name: &str| -> Result<Tensor> {
        map.remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing array {name:?}")))
    };
    let prompt = take("prompt")?;
    let bottom = take("bottom_embeddings")?;
    let mut units = Vec::new();
    for z in 1..header.z_levels {
        units.push(take(&format!("units.{z}"))?);
    }
    if let Some(extra) = map.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected array {extra:?}")));
    }
    Ok(TrainableState {
        header,
        prompt,
        bottom,
        units,
    })
}

/// Writes the full checkpoint directory.
pub fn save_checkpoint(dir: &Path, model: &PemiModel, lambda: &[f32]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(ENCODER_FILE), encoder_bytes(&model.encoder)?)?;
    std::fs::write(dir.join(TRAINABLE_FILE), trainable_bytes(model, lambda)?)?;
    model.hierarchy.save(&dir.join(HIERARCHY_FILE))?;
    model.vocab.save(&dir.join(VOCAB_FILE))?;
    std::fs::write(dir.join(LAYOUT_FILE), format!("{}\n", model.template.source()))?;
    Ok(())
}

/// Loads a checkpoint directory back into a model, validating every shape
/// against the hierarchy, template, and encoder config.
pub fn load_checkpoint(dir: &Path) -> Result<(PemiModel, Vec<f32>)> {
    let encoder = load_encoder(&dir.join(ENCODER_FILE))?;
    let hierarchy = LabelHierarchy::load(&dir.join(HIERARCHY_FILE))?;
    let vocab = Vocab::load(&dir.join(VOCAB_FILE))?;
    let layout_text = std::fs::read_to_string(dir.join(LAYOUT_FILE))?;
    let template = parse_layout(layout_text.trim())?;
    let state = load_trainable(&dir.join(TRAINABLE_FILE))?;

    let d = encoder.d_model();
    if state.header.z_levels != hierarchy.num_levels() {
        return Err(Error::Checkpoint(format!(
            "trainable state has {} levels but hierarchy has {}",
            state.header.z_levels,
            hierarchy.num_levels()
        )));
    }
    let expect = |name: &str, got: &[usize], want: Vec<usize>| -> Result<()> {
        if got != want.as_slice() {
            return Err(Error::Checkpoint(format!(
                "array {name:?} has shape {got:?}, expected {want:?}"
            )));
        }
        Ok(())
    };
    expect("prompt", state.prompt.shape(), vec![template.prompt_count(), d])?;
    expect(
        "bottom_embeddings",
        state.bottom.shape(),
        vec![hierarchy.bottom_size(), d],
    )?;
    for (z, u) in (1..hierarchy.num_levels()).zip(&state.units) {
        expect(
            &format!("units.{z}"),
            u.shape(),
            vec![hierarchy.edges_at(z).len()],
        )?;
    }

    let mut units = WeightUnits::init(&hierarchy, 0, state.header.normalization);
    for (z, u) in (1..hierarchy.num_levels()).zip(&state.units) {
        units.level_mut(z).data_mut().copy_from_slice(u.data());
    }
    let mut prompt = state.prompt;
    prompt.set_requires_grad(true);
    let mut bottom = state.bottom;
    bottom.set_requires_grad(true);
    let verbalizer = VerbalizerState {
        bottom,
        units,
        normalization: state.header.normalization,
    };
    let lambda = state.header.lambda.clone();
    let model = PemiModel {
        encoder,
        prompt,
        verbalizer,
        template,
        vocab,
        hierarchy,
        prompt_positional: state.header.prompt_positional,
    };
    Ok((model, lambda))
}
