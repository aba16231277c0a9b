//! Layer graph, parameter initialization, and the forward/backward drivers.
//!
//! Two execution paths share the same per-layer math:
//! - the policy path (`forward` / `backward`, f32 only) stashes every layer
//!   input through the active [`StashPolicy`] and settles the memory ledger;
//! - the plain path (`forward_collect` / `backward_plain`, any float) keeps
//!   activations in a vector, used by the finite-difference oracle and by
//!   checkpoint recomputation.

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::footprint::footprint_dense;
use crate::nn::{
    batchnorm2d_backward, batchnorm2d_forward, conv2d_backward, conv2d_forward, linear_backward,
    linear_forward, maxpool2d_backward, maxpool2d_forward, relu_backward, relu_forward,
    BatchNorm2dCfg, BatchStats, Conv2dCfg, MaxPool2dCfg,
};
use crate::stash::{
    stash_restore, stash_store, stash_store_relu_mask, MemoryLedger, StashHandle, StashPolicy,
};
use crate::tensor::{DenseTensor, Precision};

/// Supported layer kinds with their hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv2d(Conv2dCfg),
    Linear { in_features: usize, out_features: usize },
    ReLU,
    MaxPool2d(MaxPool2dCfg),
    BatchNorm2d(BatchNorm2dCfg),
}

impl LayerKind {
    pub fn label(&self) -> &'static str {
        match self {
            Self::Conv2d(_) => "conv2d",
            Self::Linear { .. } => "linear",
            Self::ReLU => "relu",
            Self::MaxPool2d(_) => "maxpool2d",
            Self::BatchNorm2d(_) => "batchnorm2d",
        }
    }
}

/// One layer: kind, owned parameters, and per-step transient state.
#[derive(Debug, Clone)]
pub struct LayerNode<F> {
    pub kind: LayerKind,
    pub weight: Option<DenseTensor<F>>,
    pub bias: Option<DenseTensor<F>>,
    pub gamma: Option<DenseTensor<F>>,
    pub beta: Option<DenseTensor<F>>,
    pub running_mean: Option<Vec<F>>,
    pub running_var: Option<Vec<F>>,
    /// Batch statistics captured by the last training forward; tiny and kept
    /// uncompressed beside the stash so the backward pass never re-reduces.
    batch_stats: Option<BatchStats<F>>,
    /// Present after forward, consumed exactly once by backward.
    stash: Option<StashHandle>,
}

/// Per-layer parameter gradients; fields mirror the layer's parameters.
#[derive(Debug, Clone)]
pub struct LayerGradients<F> {
    pub weight: Option<DenseTensor<F>>,
    pub bias: Option<DenseTensor<F>>,
    pub gamma: Option<DenseTensor<F>>,
    pub beta: Option<DenseTensor<F>>,
}

/// Gradients for every parameter plus the model input.
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    pub layers: Vec<LayerGradients<F>>,
    pub input: DenseTensor<F>,
}

/// Which parameter tensor of a layer to address.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
}

/// An ordered feed-forward stack of layers.
#[derive(Debug, Clone)]
pub struct Model<F> {
    layers: Vec<LayerNode<F>>,
}

impl<F: Float> Model<F> {
    /// Build a model with seeded parameters: weights uniform in `[-b, b]`
    /// with `b = sqrt(6 / fan_in)`, drawn from one PRNG stream per layer
    /// (stream = layer index, values in element order); biases start at 0,
    /// batchnorm at gamma 1 / beta 0 / running stats (0, 1).
    pub fn build(kinds: Vec<LayerKind>, seed: u64) -> Result<Self> {
        let mut layers = Vec::with_capacity(kinds.len());
        for (idx, kind) in kinds.into_iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(idx as u64);
            let mut uniform = |fan_in: usize, count: usize| -> Vec<F> {
                let bound = (6.0 / fan_in as f64).sqrt();
                (0..count)
                    .map(|_| F::from((2.0 * rng.gen::<f64>() - 1.0) * bound).unwrap())
                    .collect()
            };
            let mut node = LayerNode {
                kind: kind.clone(),
                weight: None,
                bias: None,
                gamma: None,
                beta: None,
                running_mean: None,
                running_var: None,
                batch_stats: None,
                stash: None,
            };
            match kind {
                LayerKind::Conv2d(cfg) => {
                    let fan_in = cfg.in_channels * cfg.kernel_h * cfg.kernel_w;
                    let count = cfg.out_channels * fan_in;
                    node.weight = Some(DenseTensor::new(
                        vec![cfg.out_channels, cfg.in_channels, cfg.kernel_h, cfg.kernel_w],
                        uniform(fan_in, count),
                    )?);
                    node.bias = Some(DenseTensor::zeros(vec![cfg.out_channels]));
                }
                LayerKind::Linear { in_features, out_features } => {
                    node.weight = Some(DenseTensor::new(
                        vec![out_features, in_features],
                        uniform(in_features, out_features * in_features),
                    )?);
                    node.bias = Some(DenseTensor::zeros(vec![out_features]));
                }
                LayerKind::BatchNorm2d(cfg) => {
                    node.gamma = Some(DenseTensor::new(
                        vec![cfg.channels],
                        vec![F::one(); cfg.channels],
                    )?);
                    node.beta = Some(DenseTensor::zeros(vec![cfg.channels]));
                    node.running_mean = Some(vec![F::zero(); cfg.channels]);
                    node.running_var = Some(vec![F::one(); cfg.channels]);
                }
                LayerKind::ReLU | LayerKind::MaxPool2d(_) => {}
            }
            layers.push(node);
        }
        Ok(Self { layers })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, idx: usize) -> &LayerNode<F> {
        &self.layers[idx]
    }

    pub fn param(&self, layer: usize, kind: ParamKind) -> Option<&DenseTensor<F>> {
        let node = self.layers.get(layer)?;
        match kind {
            ParamKind::Weight => node.weight.as_ref(),
            ParamKind::Bias => node.bias.as_ref(),
            ParamKind::Gamma => node.gamma.as_ref(),
            ParamKind::Beta => node.beta.as_ref(),
        }
    }

    pub fn param_mut(&mut self, layer: usize, kind: ParamKind) -> Option<&mut DenseTensor<F>> {
        let node = self.layers.get_mut(layer)?;
        match kind {
            ParamKind::Weight => node.weight.as_mut(),
            ParamKind::Bias => node.bias.as_mut(),
            ParamKind::Gamma => node.gamma.as_mut(),
            ParamKind::Beta => node.beta.as_mut(),
        }
    }

    /// Pure per-layer math; batchnorm runs training-mode statistics and
    /// returns them without touching any model state.
    fn compute_forward(
        &self,
        idx: usize,
        input: &DenseTensor<F>,
    ) -> Result<(DenseTensor<F>, Option<BatchStats<F>>)> {
        let node = &self.layers[idx];
        match &node.kind {
            LayerKind::Conv2d(cfg) => {
                let out = conv2d_forward(
                    input,
                    node.weight.as_ref().unwrap(),
                    node.bias.as_ref().unwrap(),
                    cfg,
                )?;
                Ok((out, None))
            }
            LayerKind::Linear { .. } => {
                let out = linear_forward(
                    input,
                    node.weight.as_ref().unwrap(),
                    node.bias.as_ref().unwrap(),
                )?;
                Ok((out, None))
            }
            LayerKind::ReLU => Ok((relu_forward(input), None)),
            LayerKind::MaxPool2d(cfg) => Ok((maxpool2d_forward(input, cfg)?, None)),
            LayerKind::BatchNorm2d(cfg) => {
                let (out, stats) = batchnorm2d_forward(
                    input,
                    node.gamma.as_ref().unwrap(),
                    node.beta.as_ref().unwrap(),
                    (
                        node.running_mean.as_ref().unwrap(),
                        node.running_var.as_ref().unwrap(),
                    ),
                    cfg,
                    true,
                )?;
                Ok((out, stats))
            }
        }
    }

    /// Per-layer gradients. Batchnorm uses `stats` when given (the policy
    /// path passes the stats captured at forward time), otherwise re-reduces
    /// from the provided input.
    fn compute_backward(
        &self,
        idx: usize,
        input: &DenseTensor<F>,
        grad_out: &DenseTensor<F>,
        stats: Option<&BatchStats<F>>,
    ) -> Result<(LayerGradients<F>, DenseTensor<F>)> {
        let node = &self.layers[idx];
        let none = LayerGradients { weight: None, bias: None, gamma: None, beta: None };
        match &node.kind {
            LayerKind::Conv2d(cfg) => {
                let (gw, gb, gx) =
                    conv2d_backward(input, node.weight.as_ref().unwrap(), cfg, grad_out)?;
                Ok((LayerGradients { weight: Some(gw), bias: Some(gb), ..none }, gx))
            }
            LayerKind::Linear { .. } => {
                let (gw, gb, gx) =
                    linear_backward(input, node.weight.as_ref().unwrap(), grad_out)?;
                Ok((LayerGradients { weight: Some(gw), bias: Some(gb), ..none }, gx))
            }
            LayerKind::ReLU => Ok((none, relu_backward(input, grad_out)?)),
            LayerKind::MaxPool2d(cfg) => Ok((none, maxpool2d_backward(input, cfg, grad_out)?)),
            LayerKind::BatchNorm2d(cfg) => {
                let computed;
                let stats = match stats {
                    Some(s) => s,
                    None => {
                        computed = crate::nn::batchnorm2d_batch_stats(input, cfg.channels)?;
                        &computed
                    }
                };
                let (gg, gb, gx) = batchnorm2d_backward(
                    input,
                    node.gamma.as_ref().unwrap(),
                    stats,
                    cfg,
                    grad_out,
                )?;
                Ok((LayerGradients { gamma: Some(gg), beta: Some(gb), ..none }, gx))
            }
        }
    }

    /// Run all layers, returning the output and every layer's input
    /// activation. Nothing is stashed or mutated.
    pub fn forward_collect(
        &self,
        input: DenseTensor<F>,
    ) -> Result<(DenseTensor<F>, Vec<DenseTensor<F>>)> {
        let mut acts = Vec::with_capacity(self.layers.len());
        let mut current = input;
        for idx in 0..self.layers.len() {
            let (out, _) = self.compute_forward(idx, &current)?;
            acts.push(current);
            current = out;
        }
        Ok((current, acts))
    }

    /// Backward over explicitly provided activations (one input per layer).
    pub fn backward_plain(
        &self,
        acts: &[DenseTensor<F>],
        grad_out: &DenseTensor<F>,
    ) -> Result<Gradients<F>> {
        if acts.len() != self.layers.len() {
            return Err(Error::InvalidInput(format!(
                "expected {} activations, got {}",
                self.layers.len(),
                acts.len()
            )));
        }
        let mut layer_grads = Vec::with_capacity(self.layers.len());
        let mut grad = grad_out.clone();
        for idx in (0..self.layers.len()).rev() {
            let (lg, gx) = self.compute_backward(idx, &acts[idx], &grad, None)?;
            layer_grads.push(lg);
            grad = gx;
        }
        layer_grads.reverse();
        Ok(Gradients { layers: layer_grads, input: grad })
    }

    /// Apply one SGD step to every parameter.
    pub fn apply_sgd(&mut self, grads: &Gradients<F>, lr: F) -> Result<()> {
        if grads.layers.len() != self.layers.len() {
            return Err(Error::InvalidInput("gradient/layer count mismatch".into()));
        }
        for (node, lg) in self.layers.iter_mut().zip(&grads.layers) {
            for (param, grad) in [
                (&mut node.weight, &lg.weight),
                (&mut node.bias, &lg.bias),
                (&mut node.gamma, &lg.gamma),
                (&mut node.beta, &lg.beta),
            ] {
                if let (Some(p), Some(g)) = (param.as_mut(), grad.as_ref()) {
                    crate::nn::sgd_step(p, g, lr)?;
                }
            }
        }
        Ok(())
    }
}

impl Model<f32> {
    /// Training forward: every layer's input is handed to the stash under
    /// the active policy and the ledger is charged; batchnorm statistics are
    /// captured and running statistics updated.
    pub fn forward(
        &mut self,
        input: DenseTensor<f32>,
        policy: &StashPolicy,
        ledger: &mut MemoryLedger,
    ) -> Result<DenseTensor<f32>> {
        let mut current = input;
        for idx in 0..self.layers.len() {
            if self.layers[idx].stash.is_some() {
                return Err(Error::ProtocolViolation(format!(
                    "layer {idx} already holds a stash; backward must run before the next forward"
                )));
            }
            // A ReLU backward needs only the positivity mask; under the
            // mask-only option (and outside checkpoint mode, where segment
            // recomputation needs real values) that is all we store.
            let handle = if policy.relu_mask_only
                && policy.interval() == 1
                && matches!(self.layers[idx].kind, LayerKind::ReLU)
            {
                stash_store_relu_mask(ledger, policy, idx, &current)?
            } else {
                stash_store(ledger, policy, idx, &current)?
            };
            let (out, stats) = self.compute_forward(idx, &current)?;
            let node = &mut self.layers[idx];
            node.stash = Some(handle);
            if let Some(stats) = stats {
                if let (Some(rm), Some(rv), LayerKind::BatchNorm2d(cfg)) =
                    (node.running_mean.as_mut(), node.running_var.as_mut(), &node.kind)
                {
                    let mom = cfg.momentum as f32;
                    for c in 0..cfg.channels {
                        rm[c] = (1.0 - mom) * rm[c] + mom * stats.mean[c];
                        rv[c] = (1.0 - mom) * rv[c] + mom * stats.var[c];
                    }
                }
                node.batch_stats = Some(stats);
            }
            current = out;
        }
        Ok(current)
    }

    /// Re-run the forward over layers `start..end` from the segment's input
    /// activation, charging each recomputed activation to the ledger as a
    /// dense temporary. Returns one input per layer in the segment (index 0
    /// is `segment_input` itself, which is not re-charged) plus the total
    /// temporary bytes the caller must credit after the segment's backward.
    pub fn recompute_segment(
        &self,
        start: usize,
        end: usize,
        segment_input: DenseTensor<f32>,
        ledger: &mut MemoryLedger,
    ) -> Result<(Vec<DenseTensor<f32>>, u64)> {
        let mut acts = Vec::with_capacity(end - start);
        acts.push(segment_input);
        let mut temp_bytes = 0u64;
        for idx in start..end.saturating_sub(1) {
            let (out, _) = self.compute_forward(idx, acts.last().unwrap())?;
            let bytes = footprint_dense(out.numel() as u64, Precision::Fp32);
            ledger.charge(None, bytes);
            temp_bytes += bytes;
            acts.push(out);
        }
        Ok((acts, temp_bytes))
    }

    /// Training backward: walk the layers in reverse, restoring each stash
    /// (or recomputing checkpoint segments), and return all gradients. After
    /// completion every stash is consumed and the ledger's live bytes drop
    /// by everything this pass charged.
    pub fn backward(
        &mut self,
        grad_out: &DenseTensor<f32>,
        ledger: &mut MemoryLedger,
    ) -> Result<Gradients<f32>> {
        let num = self.layers.len();
        let mut layer_grads: Vec<Option<LayerGradients<f32>>> = vec![None; num];
        let mut grad = grad_out.clone();
        let mut upper = num;
        while upper > 0 {
            // Find the segment boundary: nearest non-marker stash at or
            // below the current layer.
            let seg_end = upper;
            let mut boundary = seg_end - 1;
            loop {
                match &self.layers[boundary].stash {
                    None => {
                        return Err(Error::ProtocolViolation(format!(
                            "layer {boundary} has no stash handle; \
                             was backward called twice?"
                        )));
                    }
                    Some(h) if h.is_marker() => {
                        if boundary == 0 {
                            return Err(Error::ProtocolViolation(
                                "checkpoint marker at layer 0 has no boundary below it".into(),
                            ));
                        }
                        boundary -= 1;
                    }
                    Some(_) => break,
                }
            }
            // Consume the marker handles of the segment interior.
            for idx in boundary + 1..seg_end {
                let h = self.layers[idx].stash.take().unwrap();
                ledger.credit(h.charged_bytes);
            }
            let handle = self.layers[boundary].stash.take().unwrap();
            let seg_input = stash_restore(ledger, handle)?;
            let (acts, temp_bytes) =
                self.recompute_segment(boundary, seg_end, seg_input, ledger)?;
            for idx in (boundary..seg_end).rev() {
                let stats = self.layers[idx].batch_stats.take();
                let (lg, gx) =
                    self.compute_backward(idx, &acts[idx - boundary], &grad, stats.as_ref())?;
                layer_grads[idx] = Some(lg);
                grad = gx;
            }
            ledger.credit(temp_bytes);
            upper = boundary;
        }
        Ok(Gradients {
            layers: layer_grads.into_iter().map(Option::unwrap).collect(),
            input: grad,
        })
    }

    /// Per-layer `(stored nnz, elements, charged bytes)` of the live stash
    /// payloads; `None` for checkpoint markers or layers without a stash.
    pub fn stash_stats(&self) -> Vec<Option<(u64, u64, u64)>> {
        self.layers
            .iter()
            .map(|node| {
                let handle = node.stash.as_ref()?;
                let nnz = handle.stored_nnz()?;
                let numel = match &handle.payload {
                    crate::stash::StashPayload::Dense(t) => t.numel() as u64,
                    crate::stash::StashPayload::Bitmap(b) => b.numel() as u64,
                    crate::stash::StashPayload::Mask { shape, .. } => {
                        shape.iter().product::<usize>() as u64
                    }
                    crate::stash::StashPayload::CheckpointMarker { .. } => return None,
                };
                Some((nnz, numel, handle.charged_bytes))
            })
            .collect()
    }

    /// All parameters flattened in layer order (weight, bias, gamma, beta).
    pub fn flat_params(&self) -> Vec<f32> {
        let mut out = Vec::new();
        for node in &self.layers {
            for t in [&node.weight, &node.bias, &node.gamma, &node.beta].into_iter().flatten() {
                out.extend_from_slice(t.data());
            }
        }
        out
    }
}

/// Bit-exact comparison of two gradient sets.
pub fn gradients_bits_equal(a: &Gradients<f32>, b: &Gradients<f32>) -> bool {
    use crate::tensor::bits_equal_f32;
    if a.layers.len() != b.layers.len() || !bits_equal_f32(&a.input, &b.input) {
        return false;
    }
    a.layers.iter().zip(&b.layers).all(|(x, y)| {
        let pair_eq = |p: &Option<DenseTensor<f32>>, q: &Option<DenseTensor<f32>>| match (p, q) {
            (Some(p), Some(q)) => bits_equal_f32(p, q),
            (None, None) => true,
            _ => false,
        };
        pair_eq(&x.weight, &y.weight)
            && pair_eq(&x.bias, &y.bias)
            && pair_eq(&x.gamma, &y.gamma)
            && pair_eq(&x.beta, &y.beta)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bitmap::sparsity;
    use crate::stash::StashFormat;
    use crate::tensor::bits_equal_f32;

    fn small_model(seed: u64) -> Model<f32> {
        Model::build(
            vec![
                LayerKind::Conv2d(Conv2dCfg {
                    in_channels: 1,
                    out_channels: 2,
                    kernel_h: 3,
                    kernel_w: 3,
                    stride: 1,
                    padding: 1,
                }),
                LayerKind::ReLU,
                LayerKind::Linear { in_features: 2 * 4 * 4, out_features: 3 },
            ],
            seed,
        )
        .unwrap()
    }

    fn seeded_input(seed: u64) -> DenseTensor<f32> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        DenseTensor::from_fn(vec![2, 1, 4, 4], |_| rng.gen::<f32>() * 2.0 - 1.0)
    }

    #[test]
    fn build_is_deterministic() {
        let a = small_model(7);
        let b = small_model(7);
        assert_eq!(a.flat_params(), b.flat_params());
        let c = small_model(8);
        assert_ne!(a.flat_params(), c.flat_params());
    }

    #[test]
    fn single_relu_model_forward_matches_layer_math() {
        let mut model = Model::<f32>::build(vec![LayerKind::ReLU], 0).unwrap();
        let x = seeded_input(3);
        let mut ledger = MemoryLedger::new();
        let y = model.forward(x.clone(), &StashPolicy::dense_fp32(), &mut ledger).unwrap();
        assert!(bits_equal_f32(&y, &relu_forward(&x)));
    }

    #[test]
    fn three_layer_forward_matches_manual_composition() {
        let mut model = small_model(1);
        let x = seeded_input(1);
        let manual = {
            let c = conv2d_forward(
                &x,
                model.param(0, ParamKind::Weight).unwrap(),
                model.param(0, ParamKind::Bias).unwrap(),
                match &model.layer(0).kind {
                    LayerKind::Conv2d(cfg) => cfg,
                    _ => unreachable!(),
                },
            )
            .unwrap();
            let r = relu_forward(&c);
            linear_forward(
                &r,
                model.param(2, ParamKind::Weight).unwrap(),
                model.param(2, ParamKind::Bias).unwrap(),
            )
            .unwrap()
        };
        let mut ledger = MemoryLedger::new();
        let y = model.forward(x, &StashPolicy::dense_fp32(), &mut ledger).unwrap();
        assert!(bits_equal_f32(&y, &manual));
    }

    #[test]
    fn stash_bytes_equal_per_layer_formula_sum() {
        let mut model = small_model(2);
        let x = seeded_input(2);
        // Inputs: [2,1,4,4] = 32 elements, [2,2,4,4] = 64, [2,2,4,4] = 64.
        let mut ledger = MemoryLedger::new();
        model.forward(x, &StashPolicy::dense_fp32(), &mut ledger).unwrap();
        assert_eq!(ledger.live_bytes(), 4 * (32 + 64 + 64));
    }

    #[test]
    fn backward_returns_ledger_to_zero_and_consumes_stashes() {
        let mut model = small_model(3);
        let x = seeded_input(3);
        let mut ledger = MemoryLedger::new();
        let y = model.forward(x, &StashPolicy::bitmap_fp32(), &mut ledger).unwrap();
        assert!(ledger.live_bytes() > 0);
        let grad = DenseTensor::from_fn(y.shape().to_vec(), |i| 0.1 * (i as f32 + 1.0));
        model.backward(&grad, &mut ledger).unwrap();
        assert_eq!(ledger.live_bytes(), 0);
        // Second backward must fail: handles are consumed.
        assert!(matches!(
            model.backward(&grad, &mut ledger),
            Err(Error::ProtocolViolation(_))
        ));
    }

    #[test]
    fn dense_and_bitmap_policies_give_bit_identical_gradients() {
        let x = seeded_input(4);
        let grads: Vec<Gradients<f32>> = [StashFormat::Dense, StashFormat::Bitmap]
            .into_iter()
            .map(|format| {
                let mut model = small_model(4);
                let mut ledger = MemoryLedger::new();
                let policy = StashPolicy { format, ..StashPolicy::dense_fp32() };
                let y = model.forward(x.clone(), &policy, &mut ledger).unwrap();
                let grad = DenseTensor::from_fn(y.shape().to_vec(), |i| (i % 5) as f32 - 2.0);
                model.backward(&grad, &mut ledger).unwrap()
            })
            .collect();
        assert!(gradients_bits_equal(&grads[0], &grads[1]));
    }

    #[test]
    fn policy_gradients_match_plain_path() {
        let x = seeded_input(5);
        let mut model = small_model(5);
        let plain_model = model.clone();
        let mut ledger = MemoryLedger::new();
        let y = model.forward(x.clone(), &StashPolicy::bitmap_fp32(), &mut ledger).unwrap();
        let grad = DenseTensor::from_fn(y.shape().to_vec(), |i| (i as f32).sin());
        let policy_grads = model.backward(&grad, &mut ledger).unwrap();

        let (_, acts) = plain_model.forward_collect(x).unwrap();
        let plain_grads = plain_model.backward_plain(&acts, &grad).unwrap();
        assert!(gradients_bits_equal(&policy_grads, &plain_grads));
    }

    #[test]
    fn relu_mask_only_policy_matches_full_stash_gradients() {
        let x = seeded_input(6);
        let grad_of = |policy: StashPolicy| {
            let mut model = small_model(6);
            let mut ledger = MemoryLedger::new();
            let y = model.forward(x.clone(), &policy, &mut ledger).unwrap();
            let grad = DenseTensor::from_fn(y.shape().to_vec(), |i| (i as f32) * 0.25 - 1.0);
            (model.backward(&grad, &mut ledger).unwrap(), ledger)
        };
        let (full, _) = grad_of(StashPolicy::bitmap_fp32());
        let mask_policy = StashPolicy { relu_mask_only: true, ..StashPolicy::bitmap_fp32() };
        let (masked, ledger) = grad_of(mask_policy);
        assert!(gradients_bits_equal(&full, &masked));
        assert_eq!(ledger.live_bytes(), 0);
    }

    #[test]
    fn relu_mask_only_charges_one_bit_per_element() {
        let mut model = small_model(8);
        let x = seeded_input(8);
        let mut ledger = MemoryLedger::new();
        let policy = StashPolicy { relu_mask_only: true, ..StashPolicy::bitmap_fp32() };
        model.forward(x, &policy, &mut ledger).unwrap();
        // The ReLU layer input has 64 elements -> 8 mask bytes.
        let report = ledger.report();
        assert_eq!(report.per_layer[1], (1, 8));
    }

    #[test]
    fn checkpoint_markers_recompute_bit_exactly() {
        let x = seeded_input(9);
        let reference = {
            let mut model = small_model(9);
            let mut ledger = MemoryLedger::new();
            let y = model.forward(x.clone(), &StashPolicy::bitmap_fp32(), &mut ledger).unwrap();
            let grad = DenseTensor::from_fn(y.shape().to_vec(), |i| (i as f32) - 2.5);
            (model.backward(&grad, &mut ledger).unwrap(), grad)
        };
        let mut model = small_model(9);
        let mut ledger = MemoryLedger::new();
        let policy = StashPolicy::bitmap_fp32().with_checkpoint_m(2);
        model.forward(x, &policy, &mut ledger).unwrap();
        let ckpt = model.backward(&reference.1, &mut ledger).unwrap();
        assert!(gradients_bits_equal(&reference.0, &ckpt));
        assert_eq!(ledger.live_bytes(), 0);
    }

    #[test]
    fn recompute_segment_reproduces_forward_activations() {
        let model = small_model(10);
        let x = seeded_input(10);
        let (_, acts) = model.forward_collect(x.clone()).unwrap();
        let mut ledger = MemoryLedger::new();
        let (recomputed, temp_bytes) =
            model.recompute_segment(0, 3, x, &mut ledger).unwrap();
        assert_eq!(recomputed.len(), 3);
        for (a, b) in recomputed.iter().zip(&acts) {
            assert!(bits_equal_f32(a, b));
        }
        // Two recomputed activations of 64 f32 elements each.
        assert_eq!(temp_bytes, 2 * 64 * 4);
        assert_eq!(ledger.live_bytes(), temp_bytes);
    }

    #[test]
    fn double_mask_batchnorm_preserves_sparsity_end_to_end() {
        let kinds = vec![
            LayerKind::ReLU,
            LayerKind::BatchNorm2d(BatchNorm2dCfg {
                channels: 2,
                eps: 1e-5,
                momentum: 0.1,
                double_mask: true,
            }),
        ];
        let mut model = Model::<f32>::build(kinds, 0).unwrap();
        let x = seeded_input(11).reshaped(vec![2, 2, 2, 4]).unwrap();
        let mut ledger = MemoryLedger::new();
        let y = model.forward(x.clone(), &StashPolicy::dense_fp32(), &mut ledger).unwrap();
        let relu_out = relu_forward(&x);
        assert!(sparsity(&y).unwrap() >= sparsity(&relu_out).unwrap());
    }

    #[test]
    fn training_step_is_deterministic() {
        let run = || {
            let mut model = small_model(12);
            let mut ledger = MemoryLedger::new();
            for step in 0..3 {
                let x = seeded_input(100 + step);
                let y = model.forward(x, &StashPolicy::bitmap_fp32(), &mut ledger).unwrap();
                let grad = DenseTensor::from_fn(y.shape().to_vec(), |i| (i as f32) * 0.01);
                let grads = model.backward(&grad, &mut ledger).unwrap();
                model.apply_sgd(&grads, 0.05).unwrap();
            }
            model.flat_params().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
