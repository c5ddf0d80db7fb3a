use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{rows_jsonl, RunOutcome};
use crate::adapters::{AdapterSlot, LoraConfig, SlotForm, SlotId};
use crate::error::{Error, Result};
use crate::mpo::{load_chain, save_chain};
use crate::tensor::{read_mpot, write_mpot};
use crate::train::{AdaptedModel, AdapterKind, Backbone, ROLES};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum FormTag {
    Dense,
    Factored,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SlotEntry {
    id: String,
    base_ref: String,
    shape: [usize; 2],
    form: FormTag,
    /// Relative to the checkpoint directory: an MPOT file or a chain directory.
    path: String,
    trainable: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    seed: u64,
    kind: AdapterKind,
    lora: LoraConfig,
    layers: usize,
    hidden: usize,
    slots: Vec<SlotEntry>,
}

/// Writes `manifest.json`, the frozen base matrices and every slot.
pub fn save_checkpoint(dir: impl AsRef<Path>, model: &AdaptedModel, seed: u64) -> Result<()> {
    let dir = dir.as_ref();
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::create_dir_all(dir.join("base"))?;
    fs::create_dir_all(dir.join("slots"))?;
    for (name, w) in model.backbone.named_weights() {
        write_mpot(dir.join("base").join(format!("{name}.mpot")), w)?;
    }
    let mut entries = Vec::new();
    for slot in model.slots() {
        let id = slot.id.to_string();
        let (form, path) = match &slot.form {
            SlotForm::Dense(m) => {
                let rel = format!("slots/{id}.mpot");
                write_mpot(dir.join(&rel), m)?;
                (FormTag::Dense, rel)
            }
            SlotForm::Factored(chain) => {
                let rel = format!("slots/{id}");
                save_chain(dir.join(&rel), chain)?;
                (FormTag::Factored, rel)
            }
        };
        entries.push(SlotEntry {
            id,
            base_ref: slot.base_ref.clone(),
            shape: [slot.shape.0, slot.shape.1],
            form,
            path,
            trainable: slot.trainable,
        });
    }
    let manifest = Manifest {
        seed,
        kind: model.kind,
        lora: model.lora,
        layers: model.backbone.layers(),
        hidden: model.backbone.hidden(),
        slots: entries,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

fn load_backbone(dir: &Path, layers: usize, hidden: usize) -> Result<Backbone> {
    let blocks = (0..layers)
        .map(|l| -> Result<_> {
            let [p, f] = ROLES.map(|role| read_mpot(dir.join(format!("layer{l}.{role}.mpot"))));
            Ok([p?, f?])
        })
        .collect::<Result<Vec<_>>>()?;
    Backbone::new(hidden, blocks)
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<AdaptedModel> {
    let dir = dir.as_ref();
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_slice(&fs::read(&manifest_path)?).map_err(|e| Error::Format {
        path: manifest_path.clone(),
        reason: e.to_string(),
    })?;
    let backbone = load_backbone(&dir.join("base"), manifest.layers, manifest.hidden)?;
    let mut slots = Vec::new();
    for e in &manifest.slots {
        let id = SlotId::parse(&e.id)?;
        let form = match e.form {
            FormTag::Dense => SlotForm::Dense(read_mpot(dir.join(&e.path))?),
            FormTag::Factored => SlotForm::Factored(load_chain(dir.join(&e.path))?),
        };
        let slot = AdapterSlot {
            id,
            base_ref: e.base_ref.clone(),
            form,
            shape: (e.shape[0], e.shape[1]),
            trainable: e.trainable,
        };
        if slot.effective_matrix()?.dims() != e.shape {
            return Err(Error::Format {
                path: dir.join(&e.path),
                reason: format!("slot {} does not have shape {:?}", e.id, e.shape),
            });
        }
        slots.push(slot);
    }
    AdaptedModel::from_slots(backbone, manifest.lora, manifest.kind, slots)
}

/// One MPOT file per base matrix with the adapters folded in.
pub fn export_merged(dir: impl AsRef<Path>, model: &AdaptedModel) -> Result<Backbone> {
    let dir = dir.as_ref();
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::create_dir_all(dir)?;
    let merged = model.merged()?;
    for (name, w) in merged.named_weights() {
        write_mpot(dir.join(format!("{name}.mpot")), w)?;
    }
    Ok(merged)
}

pub fn load_merged(dir: impl AsRef<Path>, layers: usize, hidden: usize) -> Result<Backbone> {
    load_backbone(dir.as_ref(), layers, hidden)
}

/// Writes the full run directory: resolved config, metrics, checkpoint,
/// merged export and, when present, importance scores and warm-up metrics.
pub fn write_run(dir: impl AsRef<Path>, outcome: &RunOutcome) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join("config.json"),
        serde_json::to_string_pretty(&outcome.config)? + "\n",
    )?;
    fs::write(dir.join("metrics.jsonl"), outcome.metrics_jsonl()?)?;
    save_checkpoint(dir.join("checkpoint"), &outcome.model, outcome.config.seed)?;
    export_merged(dir.join("merged"), &outcome.model)?;
    let importance = dir.join("importance.json");
    match &outcome.ledger {
        Some(ledger) => fs::write(&importance, serde_json::to_string_pretty(&ledger.dump())? + "\n")?,
        None if importance.exists() => fs::remove_file(&importance)?,
        None => {}
    }
    let warm = dir.join("warmup_metrics.jsonl");
    match &outcome.warmup {
        Some(rows) => fs::write(&warm, rows_jsonl(rows)?)?,
        None if warm.exists() => fs::remove_file(&warm)?,
        None => {}
    }
    Ok(())
}
