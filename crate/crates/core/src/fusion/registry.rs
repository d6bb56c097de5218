use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::InjectionPoint;
use crate::error::{Error, Result};
use crate::lora::{LoraAdapter, LoraPair};
use crate::numerics::StackedTensor3;

pub const MANIFEST_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// `A` and `B` of every registered adapter at one injection point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointStack {
    pub a: StackedTensor3,
    pub b: StackedTensor3,
}

/// Adapter pool with hash lookup by id and task label, storing all `A` (and
/// all `B`) matrices of one injection point in a single contiguous buffer.
///
/// Slots are dense in `0..len()`. Removal moves the last slot into the hole.
/// All adapters share one rank and one set of injection points.
#[derive(Debug, Clone, Default)]
pub struct LoraRegistry {
    index: HashMap<String, usize>,
    by_label: HashMap<String, usize>,
    ids: Vec<String>,
    labels: Vec<String>,
    scales: Vec<f32>,
    uniform_rank: Option<usize>,
    stacks: BTreeMap<InjectionPoint, PointStack>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryManifest {
    pub format_version: u32,
    pub uniform_rank: Option<usize>,
    /// Adapter ids in slot order.
    pub order: Vec<String>,
}

impl LoraRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn uniform_rank(&self) -> Option<usize> {
        self.uniform_rank
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn scale(&self, slot: usize) -> Option<f32> {
        self.scales.get(slot).copied()
    }

    pub fn slot_of(&self, adapter_id: &str) -> Option<usize> {
        self.index.get(adapter_id).copied()
    }

    pub fn slot_for_label(&self, task_label: &str) -> Option<usize> {
        self.by_label.get(task_label).copied()
    }

    pub fn injection_points(&self) -> impl Iterator<Item = InjectionPoint> + '_ {
        self.stacks.keys().copied()
    }

    pub fn stack(&self, point: InjectionPoint) -> Option<&PointStack> {
        self.stacks.get(&point)
    }

    /// Trainable parameters across all registered adapters.
    pub fn parameter_count(&self) -> usize {
        self.stacks.values().map(|s| s.a.data().len() + s.b.data().len()).sum()
    }

    /// Adds `adapter` as the new last slot. The first adapter fixes the rank
    /// and the injection-point layout for the registry.
    pub fn register(&mut self, adapter: &LoraAdapter) -> Result<usize> {
        if self.index.contains_key(adapter.id()) {
            return Err(Error::Conflict(format!("adapter id `{}` is already registered", adapter.id())));
        }
        if self.by_label.contains_key(adapter.task_label()) {
            return Err(Error::Conflict(format!(
                "task label `{}` already has an adapter",
                adapter.task_label()
            )));
        }
        if let Some(r) = self.uniform_rank {
            if adapter.rank() != r {
                return Err(Error::Rank {
                    expected: r,
                    found: adapter.rank(),
                });
            }
        }
        let mut points = Vec::with_capacity(adapter.layers().len());
        for (name, pair) in adapter.layers() {
            points.push((name.parse::<InjectionPoint>()?, pair));
        }
        if self.is_empty() {
            self.stacks = points
                .iter()
                .map(|(p, pair)| {
                    let stack = PointStack {
                        a: StackedTensor3::new(pair.a.rows(), pair.a.cols()),
                        b: StackedTensor3::new(pair.b.rows(), pair.b.cols()),
                    };
                    (*p, stack)
                })
                .collect();
        } else {
            let same_layout = points.len() == self.stacks.len()
                && points.iter().all(|(p, pair)| {
                    self.stacks.get(p).is_some_and(|s| {
                        s.a.slice_shape() == pair.a.shape() && s.b.slice_shape() == pair.b.shape()
                    })
                });
            if !same_layout {
                return Err(Error::Contract(format!(
                    "adapter `{}` targets different layers or shapes than the registry",
                    adapter.id()
                )));
            }
        }
        for (p, pair) in &points {
            let stack = self.stacks.get_mut(p).expect("layout checked");
            stack.a.push(&pair.a)?;
            stack.b.push(&pair.b)?;
        }
        let slot = self.ids.len();
        self.uniform_rank = Some(adapter.rank());
        self.index.insert(adapter.id().to_string(), slot);
        self.by_label.insert(adapter.task_label().to_string(), slot);
        self.ids.push(adapter.id().to_string());
        self.labels.push(adapter.task_label().to_string());
        self.scales.push(adapter.scale());
        Ok(slot)
    }

    /// Removes `adapter_id`; the last slot takes its place.
    pub fn remove(&mut self, adapter_id: &str) -> Result<()> {
        let slot = self
            .index
            .remove(adapter_id)
            .ok_or_else(|| Error::Lookup(format!("adapter `{adapter_id}` is not registered")))?;
        for stack in self.stacks.values_mut() {
            stack.a.swap_remove(slot)?;
            stack.b.swap_remove(slot)?;
        }
        let label = self.labels.swap_remove(slot);
        self.by_label.remove(&label);
        self.ids.swap_remove(slot);
        self.scales.swap_remove(slot);
        if slot < self.ids.len() {
            self.index.insert(self.ids[slot].clone(), slot);
            self.by_label.insert(self.labels[slot].clone(), slot);
        }
        if self.is_empty() {
            self.uniform_rank = None;
            self.stacks.clear();
        }
        Ok(())
    }

    /// Rebuilds the adapter stored in `slot` from the stacks.
    pub fn adapter(&self, slot: usize) -> Result<LoraAdapter> {
        let id = self
            .ids
            .get(slot)
            .ok_or_else(|| Error::Lookup(format!("registry slot {slot} (len {})", self.len())))?;
        let rank = self.uniform_rank.expect("non-empty registry has a rank");
        let mut adapter = LoraAdapter::new(id.clone(), self.labels[slot].clone(), rank).with_scale(self.scales[slot]);
        for (p, stack) in &self.stacks {
            let a = stack.a.matrix(slot).expect("slot in range");
            let b = stack.b.matrix(slot).expect("slot in range");
            adapter.insert_layer(p.name(), LoraPair::new(a, b)?)?;
        }
        Ok(adapter)
    }

    pub fn manifest(&self) -> RegistryManifest {
        RegistryManifest {
            format_version: MANIFEST_FORMAT_VERSION,
            uniform_rank: self.uniform_rank,
            order: self.ids.clone(),
        }
    }

    /// Writes one `{id}.json` per adapter plus `manifest.json` into `dir`.
    pub fn save_snapshot(&self, dir: &Path) -> Result<()> {
        let mut names = std::collections::HashSet::new();
        if let Some(id) = self.ids.iter().find(|id| !names.insert(adapter_file_name(id))) {
            return Err(Error::Conflict(format!("adapter id `{id}` collides with another file name")));
        }
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for slot in 0..self.len() {
            self.adapter(slot)?.save(&dir.join(adapter_file_name(&self.ids[slot])))?;
        }
        crate::io::write_json_pretty(&dir.join(MANIFEST_FILE), &self.manifest())
    }

    /// Loads a snapshot written by [`LoraRegistry::save_snapshot`], restoring
    /// slot order.
    pub fn load_snapshot(dir: &Path) -> Result<Self> {
        let manifest: RegistryManifest = crate::io::read_json(&dir.join(MANIFEST_FILE))?;
        if manifest.format_version != MANIFEST_FORMAT_VERSION {
            return Err(Error::Version {
                expected: MANIFEST_FORMAT_VERSION,
                found: manifest.format_version,
            });
        }
        let mut reg = Self::new();
        for id in &manifest.order {
            let adapter = LoraAdapter::load(&dir.join(adapter_file_name(id)))?;
            if adapter.id() != id {
                return Err(Error::Data(format!(
                    "manifest lists `{id}` but the file holds `{}`",
                    adapter.id()
                )));
            }
            reg.register(&adapter)?;
        }
        if manifest.uniform_rank.is_some() && manifest.uniform_rank != reg.uniform_rank {
            return Err(Error::Rank {
                expected: manifest.uniform_rank.unwrap_or(0),
                found: reg.uniform_rank.unwrap_or(0),
            });
        }
        Ok(reg)
    }
}

/// File name of an adapter inside a snapshot directory.
pub fn adapter_file_name(adapter_id: &str) -> String {
    let safe: String = adapter_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{safe}.json")
}
