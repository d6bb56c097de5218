//! LoRA adapters: low-rank pairs `(A, B)` per injection point, weight
//! merging, the side-path forward, and the versioned JSON file format.

mod train;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{
    side_project, Adaptation, Backbone, BackboneConfig, InjectionPoint, InjectionTargets,
    SideAdapter,
};
use crate::error::{Error, Result};
use crate::numerics::{matmul, seeded_random_matrix, Distribution, Matrix};

pub use train::{train_adapter, LoraTrainConfig, TrainReport};

pub const ADAPTER_FORMAT_VERSION: u32 = 1;
/// Standard deviation of the gaussian `A` initialization.
pub const DEFAULT_INIT_STD: f32 = 0.02;

/// One low-rank pair: `A` is `h×r`, `B` is `r×d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraPair {
    #[serde(rename = "A")]
    pub a: Matrix,
    #[serde(rename = "B")]
    pub b: Matrix,
}

impl LoraPair {
    pub fn new(a: Matrix, b: Matrix) -> Result<Self> {
        if a.cols() != b.rows() {
            return Err(Error::Shape {
                op: "lora pair",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        Ok(Self { a, b })
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    /// `(h, d)` of the weight this pair adapts.
    pub fn target_shape(&self) -> (usize, usize) {
        (self.a.rows(), self.b.cols())
    }
}

/// Task-specific adapter: one [`LoraPair`] per injection point, all of the
/// same rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    format_version: u32,
    adapter_id: String,
    task_label: String,
    rank: usize,
    scale: f32,
    layers: BTreeMap<String, LoraPair>,
}

impl LoraAdapter {
    pub fn new(adapter_id: impl Into<String>, task_label: impl Into<String>, rank: usize) -> Self {
        Self {
            format_version: ADAPTER_FORMAT_VERSION,
            adapter_id: adapter_id.into(),
            task_label: task_label.into(),
            rank,
            scale: 1.0,
            layers: BTreeMap::new(),
        }
    }

    /// Sets the output multiplier. `alpha / rank` reproduces the common
    /// LoRA scaling; the default 1.0 applies `A·B` unscaled.
    pub fn with_scale(mut self, scale: f32) -> Self {
        self.scale = scale;
        self
    }

    /// Adds or replaces the pair for `layer`, enforcing the adapter rank and
    /// `r ≤ min(h, d)`.
    pub fn insert_layer(&mut self, layer: impl Into<String>, pair: LoraPair) -> Result<()> {
        if pair.rank() != self.rank {
            return Err(Error::Rank {
                expected: self.rank,
                found: pair.rank(),
            });
        }
        let (h, d) = pair.target_shape();
        if self.rank > h.min(d) {
            return Err(Error::Rank {
                expected: h.min(d),
                found: self.rank,
            });
        }
        self.layers.insert(layer.into(), pair);
        Ok(())
    }

    /// Fresh adapter for `backbone`: `A ~ N(0, init_std²)`, `B = 0`, so the
    /// adapted model starts out identical to the base.
    pub fn init_for(
        config: &BackboneConfig,
        adapter_id: impl Into<String>,
        task_label: impl Into<String>,
        rank: usize,
        targets: InjectionTargets,
        init_std: f32,
        seed: u64,
    ) -> Result<Self> {
        let mut adapter = Self::new(adapter_id, task_label, rank);
        for l in 0..config.n_layers {
            for &p in targets.projections() {
                let (h, d) = config.projection_shape(p);
                let point = InjectionPoint::new(l, p);
                let a = seeded_random_matrix(
                    h,
                    rank,
                    seed.wrapping_mul(1_000_003).wrapping_add(point.slot() as u64),
                    Distribution::Gaussian { std: init_std },
                );
                adapter.insert_layer(point.name(), LoraPair::new(a, Matrix::zeros(rank, d))?)?;
            }
        }
        Ok(adapter)
    }

    pub fn id(&self) -> &str {
        &self.adapter_id
    }

    pub fn task_label(&self) -> &str {
        &self.task_label
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn layers(&self) -> &BTreeMap<String, LoraPair> {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut BTreeMap<String, LoraPair> {
        &mut self.layers
    }

    pub fn layer(&self, name: &str) -> Result<&LoraPair> {
        self.layers
            .get(name)
            .ok_or_else(|| Error::Lookup(format!("adapter `{}` has no layer `{name}`", self.adapter_id)))
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .values()
            .map(|p| p.a.data().len() + p.b.data().len())
            .sum()
    }

    /// `scale · (A · B)` for `layer`.
    pub fn delta_weight(&self, layer: &str) -> Result<Matrix> {
        let pair = self.layer(layer)?;
        let mut delta = matmul(&pair.a, &pair.b)?;
        delta.scale_in_place(self.scale);
        Ok(delta)
    }

    /// Side-path table indexed by [`InjectionPoint::slot`].
    pub fn side_slots(&self, n_layers: usize) -> Result<Vec<Option<SideAdapter<'_>>>> {
        let mut slots = vec![None; InjectionPoint::slot_count(n_layers)];
        for (name, pair) in &self.layers {
            let point: InjectionPoint = name.parse()?;
            if point.layer_index >= n_layers {
                return Err(Error::Lookup(format!(
                    "adapter layer `{name}` is outside a {n_layers}-layer backbone"
                )));
            }
            slots[point.slot()] = Some(SideAdapter {
                a: &pair.a,
                b: &pair.b,
                scale: self.scale,
            });
        }
        Ok(slots)
    }

    /// Unmerged single-adapter adaptation for a backbone with `n_layers`.
    pub fn adaptation(&self, n_layers: usize) -> Result<SidePath<'_>> {
        Ok(SidePath {
            slots: self.side_slots(n_layers)?,
        })
    }

    /// Copy of `backbone` with every adapter layer merged into its weights.
    pub fn merged_into(&self, backbone: &Backbone) -> Result<Backbone> {
        let mut merged = backbone.clone();
        for name in self.layers.keys() {
            let point: InjectionPoint = name.parse()?;
            let w = merged.weight_mut(point)?;
            *w = merge(w, self, name)?;
        }
        Ok(merged)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let adapter: LoraAdapter = crate::io::read_json(path)?;
        if adapter.format_version != ADAPTER_FORMAT_VERSION {
            return Err(Error::Version {
                expected: ADAPTER_FORMAT_VERSION,
                found: adapter.format_version,
            });
        }
        for pair in adapter.layers.values() {
            if pair.rank() != adapter.rank || pair.a.cols() != pair.b.rows() {
                return Err(Error::Rank {
                    expected: adapter.rank,
                    found: pair.rank(),
                });
            }
        }
        Ok(adapter)
    }
}

/// Adaptation applying one adapter through the side path `x·W + s·(x·A)·B`.
pub struct SidePath<'a> {
    slots: Vec<Option<SideAdapter<'a>>>,
}

impl Adaptation for SidePath<'_> {
    fn project(&self, point: InjectionPoint, x: &Matrix, weight: &Matrix) -> Result<Matrix> {
        side_project(&self.slots, point, x, weight)
    }
}

/// `base + scale·A·B`; `base` is left untouched.
pub fn merge(base: &Matrix, adapter: &LoraAdapter, layer: &str) -> Result<Matrix> {
    let delta = adapter.delta_weight(layer)?;
    base.add(&delta).map_err(|_| Error::Shape {
        op: "merge",
        lhs: base.shape(),
        rhs: delta.shape(),
    })
}

/// Inverse of [`merge`].
pub fn unmerge(merged: &Matrix, adapter: &LoraAdapter, layer: &str) -> Result<Matrix> {
    let delta = adapter.delta_weight(layer)?;
    merged.sub(&delta).map_err(|_| Error::Shape {
        op: "unmerge",
        lhs: merged.shape(),
        rhs: delta.shape(),
    })
}

/// `x·W + scale·(x·A)·B` without forming the merged weight.
pub fn adapted_forward(x: &Matrix, base: &Matrix, adapter: &LoraAdapter, layer: &str) -> Result<Matrix> {
    let pair = adapter.layer(layer)?;
    let mut y = matmul(x, base)?;
    let xa = matmul(x, &pair.a)?;
    let side = matmul(&xa, &pair.b)?;
    y.axpy(adapter.scale, &side).map_err(|_| Error::Shape {
        op: "adapted_forward",
        lhs: y.shape(),
        rhs: side.shape(),
    })?;
    Ok(y)
}
