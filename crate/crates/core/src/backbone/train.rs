//! Backpropagation through the decoder, for full-model training and for
//! LoRA side paths on a frozen model.

use rand::seq::SliceRandom;

use super::{dot, Adaptation, Backbone, BackboneWeights, InjectionPoint, Projection, TokenId};
use crate::error::{Error, Result};
use crate::numerics::{matmul, matmul_nt, matmul_tn, seeded_rng, Matrix};
use crate::par::{map_collect, Execution};

/// Borrowed low-rank pair attached to one projection: adds `scale·(x·a)·b`.
#[derive(Debug, Clone, Copy)]
pub struct SideAdapter<'a> {
    pub a: &'a Matrix,
    pub b: &'a Matrix,
    pub scale: f32,
}

/// Side adapters indexed by [`InjectionPoint::slot`].
struct SideSlots<'s, 'a>(&'s [Option<SideAdapter<'a>>]);

impl Adaptation for SideSlots<'_, '_> {
    fn project(&self, point: InjectionPoint, x: &Matrix, weight: &Matrix) -> Result<Matrix> {
        side_project(self.0, point, x, weight)
    }
}

/// `x·W + scale·(x·A)·B` when `slots` holds an adapter for `point`, else `x·W`.
pub(crate) fn side_project(
    slots: &[Option<SideAdapter<'_>>],
    point: InjectionPoint,
    x: &Matrix,
    weight: &Matrix,
) -> Result<Matrix> {
    let mut y = matmul(x, weight)?;
    if let Some(Some(side)) = slots.get(point.slot()) {
        let xa = matmul(x, side.a)?;
        y.axpy(side.scale, &matmul(&xa, side.b)?)?;
    }
    Ok(y)
}

pub(super) struct LayerCache {
    pub x_in: Matrix,
    pub n1: Matrix,
    pub inv1: Vec<f32>,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub probs: Vec<Matrix>,
    pub ocat: Matrix,
    pub x2: Matrix,
    pub n2: Matrix,
    pub inv2: Vec<f32>,
    pub u: Matrix,
    pub hidden: Matrix,
}

/// Activations retained by a training forward pass.
pub struct ForwardCache {
    tokens: Vec<TokenId>,
    layers: Vec<LayerCache>,
    x_final: Matrix,
    n_final: Matrix,
    inv_final: Vec<f32>,
}

impl ForwardCache {
    pub(super) fn new(tokens: &[TokenId]) -> Self {
        Self {
            tokens: tokens.to_vec(),
            layers: Vec::new(),
            x_final: Matrix::zeros(0, 0),
            n_final: Matrix::zeros(0, 0),
            inv_final: Vec::new(),
        }
    }

    pub(super) fn push_layer(&mut self, layer: LayerCache) {
        self.layers.push(layer);
    }

    pub(super) fn finish(&mut self, x: Matrix, n: Matrix, inv: Vec<f32>) {
        self.x_final = x;
        self.n_final = n;
        self.inv_final = inv;
    }
}

/// Output of [`Backbone::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    /// Gradients for every backbone tensor, when requested.
    pub base: Option<BackboneWeights>,
    /// `(dA, dB)` per injection slot that carried a side adapter.
    pub side: Vec<Option<(Matrix, Matrix)>>,
}

impl Gradients {
    fn accumulate(&mut self, other: &Gradients) -> Result<()> {
        if let (Some(dst), Some(src)) = (self.base.as_mut(), other.base.as_ref()) {
            dst.axpy(1.0, src)?;
        }
        for (dst, src) in self.side.iter_mut().zip(&other.side) {
            match (dst.as_mut(), src) {
                (Some((da, db)), Some((sa, sb))) => {
                    da.add_assign(sa)?;
                    db.add_assign(sb)?;
                }
                (None, Some(s)) => *dst = Some(s.clone()),
                _ => {}
            }
        }
        Ok(())
    }
}

/// RMS-norm backward: `dx = inv·dn − inv³·(x·dn)/d · x`, row by row.
fn rms_backward(x: &Matrix, inv: &[f32], dn: &Matrix) -> Matrix {
    let d = x.cols() as f32;
    let mut dx = Matrix::zeros(x.rows(), x.cols());
    for (r, &s) in inv.iter().enumerate() {
        let (xr, dnr) = (x.row(r), dn.row(r));
        let coef = s * s * s * dot(xr, dnr) / d;
        for ((o, &xv), &g) in dx.row_mut(r).iter_mut().zip(xr).zip(dnr) {
            *o = s * g - coef * xv;
        }
    }
    dx
}

impl Backbone {
    /// Forward pass that keeps activations for [`Backbone::backward`].
    /// `side` is indexed by [`InjectionPoint::slot`].
    pub fn forward_train(
        &self,
        tokens: &[TokenId],
        side: &[Option<SideAdapter<'_>>],
    ) -> Result<(Matrix, ForwardCache)> {
        let (logits, cache) = self.forward_impl(tokens, &SideSlots(side), true)?;
        Ok((logits, cache.expect("cache requested")))
    }

    /// Backpropagates `dlogits` through the cached pass. Base-weight
    /// gradients are only accumulated when `want_base` is set; side adapter
    /// gradients are always produced for occupied slots.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        dlogits: &Matrix,
        side: &[Option<SideAdapter<'_>>],
        want_base: bool,
    ) -> Result<Gradients> {
        let cfg = &self.config;
        let (t_len, d, dh) = (cache.tokens.len(), cfg.d_model, cfg.head_dim());
        let inv_sqrt = 1.0 / (dh as f32).sqrt();
        let mut grads = Gradients {
            base: want_base.then(|| BackboneWeights::zeros_like(cfg)),
            side: vec![None; InjectionPoint::slot_count(cfg.n_layers)],
        };

        // Linear backward for y = x·W (+ s·(x·A)·B); returns dx.
        let mut proj_back = |point: InjectionPoint, x: &Matrix, dy: &Matrix| -> Result<Matrix> {
            let w = self.weight(point)?;
            if let Some(base) = grads.base.as_mut() {
                base.layers[point.layer_index]
                    .get_mut(point.projection)
                    .add_assign(&matmul_tn(x, dy)?)?;
            }
            let mut dx = matmul_nt(dy, w)?;
            if let Some(Some(s)) = side.get(point.slot()) {
                let xa = matmul(x, s.a)?;
                let mut db = matmul_tn(&xa, dy)?;
                db.scale_in_place(s.scale);
                let dyb = matmul_nt(dy, s.b)?;
                let mut da = matmul_tn(x, &dyb)?;
                da.scale_in_place(s.scale);
                dx.axpy(s.scale, &matmul_nt(&dyb, s.a)?)?;
                match &mut grads.side[point.slot()] {
                    Some((ga, gb)) => {
                        ga.add_assign(&da)?;
                        gb.add_assign(&db)?;
                    }
                    slot @ None => *slot = Some((da, db)),
                }
            }
            Ok(dx)
        };

        let dnf = matmul_nt(dlogits, &self.weights.lm_head)?;
        let mut dx = rms_backward(&cache.x_final, &cache.inv_final, &dnf);
        let d_lm_head = want_base.then(|| matmul_tn(&cache.n_final, dlogits)).transpose()?;

        for (l, lc) in cache.layers.iter().enumerate().rev() {
            // x3 = x2 + down(relu(up(rms(x2))))
            let dh_ = proj_back(InjectionPoint::new(l, Projection::FfnDown), &lc.hidden, &dx)?;
            let mut du = dh_;
            for (g, &u) in du.data_mut().iter_mut().zip(lc.u.data()) {
                if u <= 0.0 {
                    *g = 0.0;
                }
            }
            let dn2 = proj_back(InjectionPoint::new(l, Projection::FfnUp), &lc.n2, &du)?;
            let mut dx2 = dx;
            dx2.add_assign(&rms_backward(&lc.x2, &lc.inv2, &dn2))?;

            // x2 = x_in + out(attention(rms(x_in)))
            let docat = proj_back(InjectionPoint::new(l, Projection::Output), &lc.ocat, &dx2)?;
            let mut dq = Matrix::zeros(t_len, d);
            let mut dk = Matrix::zeros(t_len, d);
            let mut dv = Matrix::zeros(t_len, d);
            let mut dp = vec![0.0f32; t_len];
            for (h, p) in lc.probs.iter().enumerate() {
                let hs = h * dh..(h + 1) * dh;
                for i in 0..t_len {
                    let do_i = &docat.row(i)[hs.clone()];
                    let p_i = &p.row(i)[..=i];
                    for (j, g) in dp[..=i].iter_mut().enumerate() {
                        *g = dot(do_i, &lc.v.row(j)[hs.clone()]);
                    }
                    let inner = dot(p_i, &dp[..=i]);
                    for j in 0..=i {
                        let pij = p_i[j];
                        // dV_j += P_ij · dO_i
                        for (o, &g) in dv.row_mut(j)[hs.clone()].iter_mut().zip(do_i) {
                            *o += pij * g;
                        }
                        let ds = pij * (dp[j] - inner) * inv_sqrt;
                        if ds != 0.0 {
                            for (o, &kv) in dq.row_mut(i)[hs.clone()].iter_mut().zip(&lc.k.row(j)[hs.clone()]) {
                                *o += ds * kv;
                            }
                            for (o, &qv) in dk.row_mut(j)[hs.clone()].iter_mut().zip(&lc.q.row(i)[hs.clone()]) {
                                *o += ds * qv;
                            }
                        }
                    }
                }
            }
            let mut dn1 = proj_back(InjectionPoint::new(l, Projection::Query), &lc.n1, &dq)?;
            dn1.add_assign(&proj_back(InjectionPoint::new(l, Projection::Key), &lc.n1, &dk)?)?;
            dn1.add_assign(&proj_back(InjectionPoint::new(l, Projection::Value), &lc.n1, &dv)?)?;
            let mut dx_in = dx2;
            dx_in.add_assign(&rms_backward(&lc.x_in, &lc.inv1, &dn1))?;
            dx = dx_in;
        }

        if let Some(base) = grads.base.as_mut() {
            base.lm_head = d_lm_head.expect("computed when want_base");
            for (t, &tok) in cache.tokens.iter().enumerate() {
                for (o, &g) in base.token_embedding.row_mut(tok as usize).iter_mut().zip(dx.row(t)) {
                    *o += g;
                }
                for (o, &g) in base.position_embedding.row_mut(t).iter_mut().zip(dx.row(t)) {
                    *o += g;
                }
            }
        }
        Ok(grads)
    }
}

/// Mean next-token cross-entropy over positions that have a target, with
/// its gradient w.r.t. the logits.
pub fn sequence_loss(logits: &Matrix, targets: &[Option<TokenId>]) -> Result<(f32, Matrix)> {
    if targets.len() != logits.rows() {
        return Err(Error::Shape {
            op: "sequence_loss",
            lhs: logits.shape(),
            rhs: (targets.len(), 1),
        });
    }
    let count = targets.iter().filter(|t| t.is_some()).count();
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    if count == 0 {
        return Ok((0.0, grad));
    }
    let norm = 1.0 / count as f32;
    let mut loss = 0.0f32;
    for (r, target) in targets.iter().enumerate() {
        let Some(t) = *target else { continue };
        let row = logits.row(r);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let sum: f32 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[t as usize];
        for (g, &v) in grad.row_mut(r).iter_mut().zip(row) {
            *g = (v - lse).exp() * norm;
        }
        grad.row_mut(r)[t as usize] -= norm;
    }
    Ok((loss * norm, grad))
}

/// A token sequence with the positions that contribute to the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSequence {
    pub tokens: Vec<TokenId>,
    /// First token index that is a prediction target (e.g. the prompt length).
    pub supervise_from: usize,
}

impl TrainingSequence {
    pub fn new(tokens: Vec<TokenId>, supervise_from: usize) -> Self {
        Self {
            tokens,
            supervise_from: supervise_from.max(1),
        }
    }

    /// Inputs are `tokens[..n-1]`; row `i` predicts `tokens[i+1]`.
    pub fn targets(&self) -> Vec<Option<TokenId>> {
        (1..self.tokens.len())
            .map(|j| (j >= self.supervise_from).then_some(self.tokens[j]))
            .collect()
    }

    pub fn inputs(&self) -> &[TokenId] {
        &self.tokens[..self.tokens.len().saturating_sub(1)]
    }

    pub fn loss_and_gradients(
        &self,
        backbone: &Backbone,
        side: &[Option<SideAdapter<'_>>],
        want_base: bool,
    ) -> Result<(f32, Gradients)> {
        if self.tokens.len() < 2 {
            return Err(Error::Data("training sequence needs at least two tokens".into()));
        }
        let (logits, cache) = backbone.forward_train(self.inputs(), side)?;
        let (loss, dlogits) = sequence_loss(&logits, &self.targets())?;
        let grads = backbone.backward(&cache, &dlogits, side, want_base)?;
        Ok((loss, grads))
    }

    pub fn loss(&self, backbone: &Backbone, side: &[Option<SideAdapter<'_>>]) -> Result<f32> {
        let (logits, _) = backbone.forward_train(self.inputs(), side)?;
        Ok(sequence_loss(&logits, &self.targets())?.0)
    }
}

/// Mean loss and summed gradients over a mini-batch.
pub(crate) fn batch_gradients(
    backbone: &Backbone,
    batch: &[&TrainingSequence],
    side: &[Option<SideAdapter<'_>>],
    want_base: bool,
    exec: Execution,
) -> Result<(f32, Gradients)> {
    let results = map_collect(exec, batch, |seq| seq.loss_and_gradients(backbone, side, want_base));
    let mut total: Option<Gradients> = None;
    let mut loss = 0.0;
    for r in results {
        let (l, g) = r?;
        loss += l;
        match total.as_mut() {
            Some(t) => t.accumulate(&g)?,
            None => total = Some(g),
        }
    }
    Ok((loss / batch.len().max(1) as f32, total.expect("non-empty batch")))
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BackboneTrainConfig {
    pub learning_rate: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for BackboneTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 50,
            batch_size: 8,
            seed: 0,
        }
    }
}

/// Full-weight SGD on next-token cross-entropy. Returns the mean loss of
/// each epoch.
pub fn train_backbone(
    backbone: &mut Backbone,
    data: &[TrainingSequence],
    cfg: &BackboneTrainConfig,
) -> Result<Vec<f32>> {
    if data.is_empty() {
        return Err(Error::Contract("training data is empty".into()));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || cfg.learning_rate <= 0.0 {
        return Err(Error::Contract(
            "epochs, batch_size and learning_rate must be positive".into(),
        ));
    }
    let mut rng = seeded_rng(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TrainingSequence> = chunk.iter().map(|&i| &data[i]).collect();
            let (loss, grads) = batch_gradients(backbone, &batch, &[], true, Execution::Parallel)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            epoch_loss += loss * batch.len() as f32;
            let base = grads.base.expect("base gradients requested");
            backbone
                .weights_mut()
                .axpy(-cfg.learning_rate / batch.len() as f32, &base)?;
        }
        let mean = epoch_loss / data.len() as f32;
        if !mean.is_finite() || !backbone.weights().is_finite() {
            return Err(Error::Divergence { epoch, loss: mean });
        }
        history.push(mean);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, NoAdaptation};
    use crate::numerics::{seeded_random_matrix, Distribution};

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            vocab_size: 9,
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            ffn_dim: 12,
            max_seq_len: 8,
            seed: 11,
        }
    }

    #[test]
    fn loss_gradient_matches_finite_difference_on_logits() {
        let logits = seeded_random_matrix(3, 5, 1, Distribution::Gaussian { std: 1.0 });
        let targets = [Some(2), None, Some(4)];
        let (_, g) = sequence_loss(&logits, &targets).unwrap();
        let h = 1e-2f32;
        for idx in [0usize, 2, 7, 14] {
            let mut plus = logits.clone();
            plus.data_mut()[idx] += h;
            let mut minus = logits.clone();
            minus.data_mut()[idx] -= h;
            let fd = (sequence_loss(&plus, &targets).unwrap().0
                - sequence_loss(&minus, &targets).unwrap().0)
                / (2.0 * h);
            assert!((fd - g.data()[idx]).abs() < 1e-3, "idx {idx}: {fd} vs {}", g.data()[idx]);
        }
        // unsupervised row has zero gradient
        assert!(g.row(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn base_weight_gradients_match_finite_differences() {
        let b = Backbone::new(tiny()).unwrap();
        let seq = TrainingSequence::new(vec![1, 4, 2, 7, 3], 2);
        let (_, grads) = seq.loss_and_gradients(&b, &[], true).unwrap();
        let base = grads.base.unwrap();
        let h = 1e-2f32;
        let probe = |mutate: &dyn Fn(&mut Backbone, f32)| {
            let mut p = b.clone();
            mutate(&mut p, h);
            let mut m = b.clone();
            mutate(&mut m, -h);
            (seq.loss(&p, &[]).unwrap() - seq.loss(&m, &[]).unwrap()) / (2.0 * h)
        };
        let checks: Vec<(f32, f32)> = vec![
            (
                probe(&|bb, e| bb.weights_mut().layers[0].query.data_mut()[3] += e),
                base.layers[0].query.data()[3],
            ),
            (
                probe(&|bb, e| bb.weights_mut().layers[1].ffn_up.data_mut()[5] += e),
                base.layers[1].ffn_up.data()[5],
            ),
            (
                probe(&|bb, e| bb.weights_mut().layers[0].value.data_mut()[9] += e),
                base.layers[0].value.data()[9],
            ),
            (
                probe(&|bb, e| bb.weights_mut().token_embedding.data_mut()[4 * 8 + 1] += e),
                base.token_embedding.data()[4 * 8 + 1],
            ),
            (
                probe(&|bb, e| bb.weights_mut().lm_head.data_mut()[10] += e),
                base.lm_head.data()[10],
            ),
        ];
        for (fd, an) in checks {
            let tol = 2e-2 * fd.abs().max(an.abs()).max(1e-2);
            assert!((fd - an).abs() <= tol, "fd {fd} analytic {an}");
        }
    }

    #[test]
    fn overfits_tiny_mapping_and_generates_it() {
        // "a b" -> "c": ids a=6, b=7, c=8, eos=1
        let mut b = Backbone::new(tiny()).unwrap();
        let data = vec![TrainingSequence::new(vec![6, 7, 8, 1], 2)];
        let losses = train_backbone(
            &mut b,
            &data,
            &BackboneTrainConfig {
                learning_rate: 0.5,
                epochs: 200,
                batch_size: 1,
                seed: 1,
            },
        )
        .unwrap();
        assert!(losses.last().unwrap() < &0.05, "{:?}", losses.last());
        let out = b.generate(&[6, 7], 1, None, &NoAdaptation, |_, _| {}).unwrap();
        assert_eq!(out, vec![6, 7, 8]);
    }

    #[test]
    fn training_rejects_empty_and_zero_epochs() {
        let mut b = Backbone::new(tiny()).unwrap();
        assert!(train_backbone(&mut b, &[], &BackboneTrainConfig::default()).is_err());
        let data = vec![TrainingSequence::new(vec![1, 2], 1)];
        let cfg = BackboneTrainConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(train_backbone(&mut b, &data, &cfg).is_err());
    }
}
