//! Registry of stacked adapters and the fused multi-adapter forward pass
//! `x·W + Σ_r w_r·s_r·(x·A_r)·B_r`.

mod registry;

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::backbone::{Adaptation, InjectionPoint};
use crate::error::{Error, Result};
use crate::numerics::{matmul, Matrix};
use crate::par::{map_collect, Execution};
use crate::router::{fusion_weights_with, select_top_p, Classification, RouterConfig};

pub use registry::{adapter_file_name, LoraRegistry, PointStack, RegistryManifest, MANIFEST_FILE};

/// Registry shared between sessions: many readers, exclusive writers.
pub type SharedRegistry = Arc<RwLock<LoraRegistry>>;

static NEXT_PLAN_ID: AtomicU64 = AtomicU64::new(1);

/// Adapters chosen for one sentence and their fusion weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionPlan {
    /// Process-unique tag; two plans with equal contents still differ here.
    pub plan_id: u64,
    pub selected_slots: Vec<usize>,
    pub weights: Vec<f32>,
    pub source_sentence_index: usize,
    /// Classifier distribution the plan was built from.
    pub created_from: Vec<f32>,
}

impl FusionPlan {
    pub fn new(selected_slots: Vec<usize>, weights: Vec<f32>, source_sentence_index: usize, created_from: Vec<f32>) -> Result<Self> {
        let plan = Self {
            plan_id: NEXT_PLAN_ID.fetch_add(1, Ordering::Relaxed),
            selected_slots,
            weights,
            source_sentence_index,
            created_from,
        };
        plan.check_shape()?;
        Ok(plan)
    }

    /// Single adapter at weight 1.
    pub fn single(slot: usize) -> Self {
        Self::new(vec![slot], vec![1.0], 0, Vec::new()).expect("one slot, weight 1")
    }

    fn check_shape(&self) -> Result<()> {
        if self.selected_slots.is_empty() {
            return Err(Error::Plan("plan selects no adapters".into()));
        }
        if self.selected_slots.len() != self.weights.len() {
            return Err(Error::Plan(format!(
                "{} slots but {} weights",
                self.selected_slots.len(),
                self.weights.len()
            )));
        }
        let mut seen = self.selected_slots.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.selected_slots.len() {
            return Err(Error::Plan("plan repeats a slot".into()));
        }
        let sum: f32 = self.weights.iter().sum();
        if self.weights.iter().any(|w| !w.is_finite() || *w < 0.0) || (sum - 1.0).abs() > 1e-5 {
            return Err(Error::Plan(format!("weights {:?} are not a distribution", self.weights)));
        }
        Ok(())
    }

    /// Checks the plan against a registry.
    pub fn validate(&self, registry: &LoraRegistry) -> Result<()> {
        self.check_shape()?;
        if let Some(&bad) = self.selected_slots.iter().find(|&&s| s >= registry.len()) {
            return Err(Error::Plan(format!("slot {bad} outside a registry of {}", registry.len())));
        }
        Ok(())
    }

    /// Same adapters with the same weights, ignoring the identity tag.
    pub fn same_routing(&self, other: &FusionPlan) -> bool {
        self.selected_slots == other.selected_slots && self.weights == other.weights
    }
}

/// Builds the plan for one sentence: threshold selection over the
/// classifier output, fusion weights, then task label → registry slot.
/// `task_labels[i]` names the class behind `cls.probs[i]`.
pub fn plan_for_sentence(
    cls: &Classification,
    task_labels: &[String],
    registry: &LoraRegistry,
    cfg: &RouterConfig,
    sentence_index: usize,
) -> Result<FusionPlan> {
    if cls.probs.len() != task_labels.len() {
        return Err(Error::Plan(format!(
            "{} probabilities for {} task labels",
            cls.probs.len(),
            task_labels.len()
        )));
    }
    let selected = select_top_p(&cls.probs, cfg.p_threshold)?;
    let weights = fusion_weights_with(cfg.weighting, &cls.probs, Some(&cls.logits), &selected)?;
    let slots = selected
        .iter()
        .map(|&i| {
            registry.slot_for_label(&task_labels[i]).ok_or_else(|| Error::Routing {
                label: task_labels[i].clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    FusionPlan::new(slots, weights, sentence_index, cls.probs.clone())
}

/// Selected slices of one injection point, laid side by side:
/// `a_cat = [A_1 … A_R]` is `h×(R·r)` and `b_cat` stacks `w_k·s_k·B_k` into
/// `(R·r)×d`, so `(x·a_cat)·b_cat = Σ_k w_k·s_k·(x·A_k)·B_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct GatheredPoint {
    pub a_cat: Matrix,
    pub b_cat: Matrix,
}

impl GatheredPoint {
    pub fn gather(registry: &LoraRegistry, plan: &FusionPlan, point: InjectionPoint) -> Result<Self> {
        plan.validate(registry)?;
        let stack = registry
            .stack(point)
            .ok_or_else(|| Error::Lookup(format!("no adapters target `{point}`")))?;
        let (h, r) = stack.a.slice_shape();
        let (_, d) = stack.b.slice_shape();
        let big_r = plan.selected_slots.len();
        let mut a_cat = Matrix::zeros(h, big_r * r);
        let mut b_cat = Matrix::zeros(big_r * r, d);
        for (k, (&slot, &w)) in plan.selected_slots.iter().zip(&plan.weights).enumerate() {
            let a = stack.a.slice(slot).expect("validated slot");
            for i in 0..h {
                a_cat.row_mut(i)[k * r..(k + 1) * r].copy_from_slice(&a[i * r..(i + 1) * r]);
            }
            let coef = w * registry.scale(slot).expect("validated slot");
            let b = stack.b.slice(slot).expect("validated slot");
            for (dst, &src) in b_cat.data_mut()[k * r * d..(k + 1) * r * d].iter_mut().zip(b) {
                *dst = coef * src;
            }
        }
        Ok(Self { a_cat, b_cat })
    }

    /// `x·W + (x·a_cat)·b_cat`.
    pub fn apply(&self, x: &Matrix, base: &Matrix) -> Result<Matrix> {
        let mut y = matmul(x, base)?;
        let side = matmul(&matmul(x, &self.a_cat)?, &self.b_cat)?;
        y.add_assign(&side)?;
        Ok(y)
    }
}

/// Fused forward at one layer for one plan.
pub fn fused_forward(
    x: &Matrix,
    base: &Matrix,
    registry: &LoraRegistry,
    plan: &FusionPlan,
    point: InjectionPoint,
) -> Result<Matrix> {
    GatheredPoint::gather(registry, plan, point)?.apply(x, base)
}

/// Fused forward for many sentences at one layer. Sentences whose plans
/// route identically share one gather and one stacked product.
pub fn batched_fused_forward(
    xs: &[(Matrix, &FusionPlan)],
    base: &Matrix,
    registry: &LoraRegistry,
    point: InjectionPoint,
    exec: Execution,
) -> Result<Vec<Matrix>> {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut by_key: HashMap<(Vec<usize>, Vec<u32>), usize> = HashMap::new();
    for (i, (_, plan)) in xs.iter().enumerate() {
        let key = (
            plan.selected_slots.clone(),
            plan.weights.iter().map(|w| w.to_bits()).collect(),
        );
        let g = *by_key.entry(key).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(i);
    }
    let results = map_collect(exec, &groups, |members| -> Result<Vec<Matrix>> {
        let gathered = GatheredPoint::gather(registry, xs[members[0]].1, point)?;
        let cols = xs[members[0]].0.cols();
        let mut data = Vec::new();
        let mut rows = Vec::with_capacity(members.len());
        for &i in members {
            let x = &xs[i].0;
            if x.cols() != cols {
                return Err(Error::Shape {
                    op: "batched_fused_forward",
                    lhs: xs[members[0]].0.shape(),
                    rhs: x.shape(),
                });
            }
            data.extend_from_slice(x.data());
            rows.push(x.rows());
        }
        let stacked = Matrix::new(rows.iter().sum(), cols, data)?;
        let y = gathered.apply(&stacked, base)?;
        let mut out = Vec::with_capacity(members.len());
        let mut start = 0;
        for n in rows {
            let slice = y.data()[start * y.cols()..(start + n) * y.cols()].to_vec();
            out.push(Matrix::new(n, y.cols(), slice)?);
            start += n;
        }
        Ok(out)
    });
    let mut outputs: Vec<Option<Matrix>> = vec![None; xs.len()];
    for (members, res) in groups.iter().zip(results) {
        for (&i, y) in members.iter().zip(res?) {
            outputs[i] = Some(y);
        }
    }
    Ok(outputs.into_iter().map(|y| y.expect("every input belongs to a group")).collect())
}

/// A plan gathered at every injection point, ready to drive the backbone.
#[derive(Debug, Clone)]
pub struct FusedAdaptation {
    plan_id: u64,
    /// Indexed by [`InjectionPoint::slot`].
    points: Vec<Option<GatheredPoint>>,
}

impl FusedAdaptation {
    pub fn new(registry: &LoraRegistry, plan: &FusionPlan, n_layers: usize) -> Result<Self> {
        let mut points = vec![None; InjectionPoint::slot_count(n_layers)];
        for p in registry.injection_points() {
            if p.layer_index >= n_layers {
                return Err(Error::Lookup(format!("registry targets `{p}` beyond {n_layers} layers")));
            }
            points[p.slot()] = Some(GatheredPoint::gather(registry, plan, p)?);
        }
        Ok(Self {
            plan_id: plan.plan_id,
            points,
        })
    }

    pub fn plan_id(&self) -> u64 {
        self.plan_id
    }
}

impl Adaptation for FusedAdaptation {
    fn project(&self, point: InjectionPoint, x: &Matrix, weight: &Matrix) -> Result<Matrix> {
        match self.points.get(point.slot()) {
            Some(Some(g)) => g.apply(x, weight),
            _ => matmul(x, weight),
        }
    }
}

#[cfg(test)]
mod tests;
