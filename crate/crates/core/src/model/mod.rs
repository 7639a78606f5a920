//! Stacked bidirectional LSTM → ReLU dense → linear → log-softmax.

mod checkpoint;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Stacked feature dimension fed to the first LSTM layer.
    pub input_dim: usize,
    pub lstm_layers: usize,
    /// Cells per direction.
    pub lstm_cells: usize,
    pub relu_units: usize,
    /// Output classes including the blank at index 0.
    pub vocab_size: usize,
    pub init_low: f64,
    pub init_high: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 24,
            lstm_layers: 2,
            lstm_cells: 32,
            relu_units: 64,
            vocab_size: 12,
            init_low: -0.05,
            init_high: 0.05,
            seed: 1,
        }
    }
}

impl ModelConfig {
    /// Full-size network: 3 × 320-cell Bi-LSTM, 1024 ReLU units, 46 outputs
    /// over 240-dimensional stacked features.
    pub fn large() -> Self {
        Self {
            input_dim: 240,
            lstm_layers: 3,
            lstm_cells: 320,
            relu_units: 1024,
            vocab_size: 46,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_dim", self.input_dim),
            ("lstm_layers", self.lstm_layers),
            ("lstm_cells", self.lstm_cells),
            ("relu_units", self.relu_units),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.vocab_size < 2 {
            return Err(Error::config("vocab_size", "needs at least one symbol plus blank"));
        }
        if !(self.init_low < self.init_high) || !self.init_low.is_finite() || !self.init_high.is_finite() {
            return Err(Error::config("init_low", "must be finite and below init_high"));
        }
        Ok(())
    }

    /// Name and shape of every parameter tensor, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let h = self.lstm_cells;
        let mut out = Vec::new();
        for layer in 0..self.lstm_layers {
            let input = if layer == 0 { self.input_dim } else { 2 * h };
            for dir in ["fwd", "bwd"] {
                out.push((format!("lstm{layer}.{dir}.w_input"), vec![input, 4 * h]));
                out.push((format!("lstm{layer}.{dir}.w_hidden"), vec![h, 4 * h]));
                out.push((format!("lstm{layer}.{dir}.bias"), vec![1, 4 * h]));
            }
        }
        out.push(("dense.weight".into(), vec![2 * h, self.relu_units]));
        out.push(("dense.bias".into(), vec![1, self.relu_units]));
        out.push(("output.weight".into(), vec![self.relu_units, self.vocab_size]));
        out.push(("output.bias".into(), vec![1, self.vocab_size]));
        out
    }

    pub fn param_count(&self) -> usize {
        self.layout()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// All weights of one network, in [`ModelConfig::layout`] order.
///
/// `Clone` is a deep copy. A frozen model has `requires_grad == false` on
/// every tensor, so graphs built from it never differentiate into it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<S> {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
    frozen: bool,
}

/// Graph handles for every parameter of a model bound to one graph.
#[derive(Debug, Clone)]
pub struct BoundParams(Vec<Var>);

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Hidden activations kept for inspection.
#[derive(Debug, Clone)]
pub struct ForwardTrace<S> {
    /// `[T × 2H]` per Bi-LSTM layer: forward-direction cells first.
    pub lstm_outputs: Vec<Tensor<S>>,
    pub logprobs: Tensor<S>,
}

impl<S: Scalar> ModelParams<S> {
    /// Uniform initialization of every element in `[init_low, init_high]`.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let dist = Uniform::new_inclusive(config.init_low, config.init_high)
            .map_err(|e| Error::config("init_low", e.to_string()))?;
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in config.layout() {
            let n = shape.iter().product();
            let data = (0..n).map(|_| S::lit(dist.sample(&mut rng))).collect();
            tensors.push(Tensor::new(shape, data)?.with_requires_grad(true));
            names.push(name);
        }
        Ok(Self {
            config: config.clone(),
            names,
            tensors,
            frozen: false,
        })
    }

    pub(crate) fn from_parts(config: ModelConfig, tensors: Vec<Tensor<S>>, frozen: bool) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != tensors.len() {
            return Err(Error::format(
                "checkpoint",
                format!("expected {} tensors, found {}", layout.len(), tensors.len()),
            ));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::format(
                    "checkpoint",
                    format!("{name}: expected shape {shape:?}, found {:?}", t.shape()),
                ));
            }
        }
        let mut m = Self {
            config,
            names: layout.into_iter().map(|(n, _)| n).collect(),
            tensors,
            frozen: false,
        };
        m.set_frozen(frozen);
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.tensors
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Freezing sets every `requires_grad` to false (dropping grad buffers);
    /// unfreezing sets them all to true.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
        for t in &mut self.tensors {
            t.set_requires_grad(!frozen);
        }
    }

    pub fn frozen(mut self, frozen: bool) -> Self {
        self.set_frozen(frozen);
        self
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    /// Records every parameter as a leaf of `g`.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a, S>) -> BoundParams {
        BoundParams(self.tensors.iter().map(|t| g.param(t)).collect())
    }

    /// Log-probabilities `[T × V]` for `[T × input_dim]` features.
    pub fn forward<'a>(&'a self, g: &mut Graph<'a, S>, features: Var) -> Result<Var> {
        let bound = self.bind(g);
        self.forward_bound(g, &bound, features)
    }

    pub fn forward_bound(&self, g: &mut Graph<'_, S>, bound: &BoundParams, features: Var) -> Result<Var> {
        Ok(self.forward_layers(g, bound, features)?.1)
    }

    fn forward_layers(&self, g: &mut Graph<'_, S>, bound: &BoundParams, features: Var) -> Result<(Vec<Var>, Var)> {
        let shape = g.shape(features).to_vec();
        if shape.len() != 2 || shape[1] != self.config.input_dim {
            return Err(Error::ShapeMismatch {
                op: "model forward",
                left: shape,
                right: vec![usize::MAX, self.config.input_dim],
            });
        }
        let p = bound.vars();
        let mut x = features;
        let mut layer_outputs = Vec::with_capacity(self.config.lstm_layers);
        for layer in 0..self.config.lstm_layers {
            let base = layer * 6;
            let fwd = self.lstm_direction(g, x, &p[base..base + 3], false)?;
            let bwd = self.lstm_direction(g, x, &p[base + 3..base + 6], true)?;
            x = g.concat_cols(&[fwd, bwd])?;
            layer_outputs.push(x);
        }
        let d = self.config.lstm_layers * 6;
        let hidden = g.matmul(x, p[d])?;
        let hidden = g.add_bias(hidden, p[d + 1])?;
        let hidden = g.relu(hidden);
        let logits = g.matmul(hidden, p[d + 2])?;
        let logits = g.add_bias(logits, p[d + 3])?;
        Ok((layer_outputs, g.log_softmax(logits)))
    }

    /// One LSTM direction over the whole sequence; returns `[T × H]` in time order.
    fn lstm_direction(&self, g: &mut Graph<'_, S>, x: Var, w: &[Var], reverse: bool) -> Result<Var> {
        let h = self.config.lstm_cells;
        let frames = g.shape(x)[0];
        let projected = g.matmul(x, w[0])?;
        let projected = g.add_bias(projected, w[2])?;
        let mut state: Option<(Var, Var)> = None;
        let mut outputs = vec![None; frames];
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..frames).rev())
        } else {
            Box::new(0..frames)
        };
        for t in order {
            let mut gates = g.slice_rows(projected, t, t + 1)?;
            if let Some((h_prev, _)) = state {
                let rec = g.matmul(h_prev, w[1])?;
                gates = g.add(gates, rec)?;
            }
            let i = g.slice_cols(gates, 0, h)?;
            let i = g.sigmoid(i);
            let f = g.slice_cols(gates, h, 2 * h)?;
            let f = g.sigmoid(f);
            let cand = g.slice_cols(gates, 2 * h, 3 * h)?;
            let cand = g.tanh(cand);
            let o = g.slice_cols(gates, 3 * h, 4 * h)?;
            let o = g.sigmoid(o);
            let mut c = g.mul(i, cand)?;
            if let Some((_, c_prev)) = state {
                let kept = g.mul(f, c_prev)?;
                c = g.add(kept, c)?;
            }
            let squashed = g.tanh(c);
            let h_t = g.mul(o, squashed)?;
            outputs[t] = Some(h_t);
            state = Some((h_t, c));
        }
        let outputs: Vec<Var> = outputs.into_iter().map(|v| v.expect("every frame visited")).collect();
        g.concat_rows(&outputs)
    }

    /// Forward pass without keeping the graph.
    pub fn infer(&self, features: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(self.trace(features)?.logprobs)
    }

    /// Forward pass that also returns every Bi-LSTM layer's output.
    pub fn trace(&self, features: &Tensor<S>) -> Result<ForwardTrace<S>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let x = g.param(features);
        let (layers, out) = self.forward_layers(&mut g, &bound, x)?;
        Ok(ForwardTrace {
            lstm_outputs: layers.into_iter().map(|v| g.to_tensor(v)).collect(),
            logprobs: g.to_tensor(out),
        })
    }
}

/// Per-tensor gradient sums, laid out like the model they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<S> {
    pub values: Vec<Vec<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn zeros_like(model: &ModelParams<S>) -> Self {
        Self {
            values: model.tensors.iter().map(|t| vec![S::zero(); t.len()]).collect(),
        }
    }

    /// Adds `weight · ∂loss/∂param` from a graph that has run `backward`.
    /// Parameters without a gradient on the graph contribute nothing.
    pub fn add_from_graph(&mut self, g: &Graph<'_, S>, bound: &BoundParams, weight: S) {
        for (acc, &v) in self.values.iter_mut().zip(bound.vars()) {
            if let Some(grad) = g.grad(v) {
                for (a, &x) in acc.iter_mut().zip(grad) {
                    *a += weight * x;
                }
            }
        }
    }

    pub fn add(&mut self, other: &Self) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn max_abs(&self) -> S {
        self.values
            .iter()
            .flatten()
            .fold(S::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().flatten().all(|x| x.is_finite())
    }
}

impl<S: Scalar> ModelParams<S> {
    /// Writes summed gradients into each trainable tensor's grad buffer.
    pub fn load_grads(&mut self, grads: &Gradients<S>) -> Result<()> {
        for (t, g) in self.tensors.iter_mut().zip(&grads.values) {
            t.zero_grad();
            t.accumulate_grad(g, S::one())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            input_dim: 3,
            lstm_layers: 1,
            lstm_cells: 4,
            relu_units: 5,
            vocab_size: 4,
            ..ModelConfig::default()
        }
    }

    fn features(t: usize, f: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Uniform::new(-1.0, 1.0).unwrap();
        Tensor::new(vec![t, f], (0..t * f).map(|_| d.sample(&mut rng)).collect()).unwrap()
    }

    #[test]
    fn init_is_bounded_and_seeded() {
        let cfg = ModelConfig::default();
        let a = ModelParams::<f64>::init(&cfg).unwrap();
        assert!(a.tensors().iter().flat_map(|t| t.data()).all(|&x| (-0.05..=0.05).contains(&x)));
        let b = ModelParams::<f64>::init(&cfg).unwrap();
        assert_eq!(a, b);
        let c = ModelParams::<f64>::init(&ModelConfig { seed: 2, ..cfg.clone() }).unwrap();
        assert_ne!(a, c);
        assert_eq!(a.param_count(), cfg.param_count());
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let bad = ModelConfig {
            vocab_size: 1,
            ..ModelConfig::default()
        };
        assert!(bad.validate().unwrap_err().to_string().contains("vocab_size"));
        let bad = ModelConfig {
            init_low: 0.1,
            ..ModelConfig::default()
        };
        assert!(bad.validate().unwrap_err().to_string().contains("init_low"));
    }

    #[test]
    fn single_frame_output_is_normalized() {
        let m = ModelParams::<f64>::init(&ModelConfig::default()).unwrap();
        let out = m.infer(&features(1, 24, 0)).unwrap();
        assert_eq!(out.shape(), &[1, 12]);
        let total: f64 = out.data().iter().map(|x| x.exp()).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn outputs_are_finite_and_deterministic() {
        let m = ModelParams::<f64>::init(&ModelConfig::default()).unwrap();
        let x = features(9, 24, 1);
        let a = m.infer(&x).unwrap();
        assert!(a.all_finite());
        for r in 0..9 {
            let s: f64 = a.row(r).iter().map(|x| x.exp()).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        assert_eq!(a, m.infer(&x).unwrap());
    }

    #[test]
    fn wrong_feature_width_is_rejected() {
        let m = ModelParams::<f64>::init(&ModelConfig::default()).unwrap();
        assert!(matches!(m.infer(&features(3, 23, 0)), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn reversing_input_swaps_directions_under_symmetric_weights() {
        let mut m = ModelParams::<f64>::init(&tiny()).unwrap();
        // make the backward direction an exact copy of the forward one
        for k in 0..3 {
            let fwd = m.tensors()[k].clone();
            m.tensors_mut()[3 + k] = fwd;
        }
        let x = features(6, 3, 4);
        let h = 4;
        let a = m.trace(&x).unwrap().lstm_outputs.remove(0);
        let b = m.trace(&x.reversed_rows()).unwrap().lstm_outputs.remove(0);
        for t in 0..6 {
            let (ra, rb) = (a.row(t), b.row(5 - t));
            for j in 0..h {
                assert!((ra[j] - rb[h + j]).abs() < 1e-15);
                assert!((ra[h + j] - rb[j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn frozen_model_produces_no_gradients() {
        let m = ModelParams::<f64>::init(&tiny()).unwrap().frozen(true);
        let x = features(3, 3, 2);
        let mut g = Graph::new();
        let bound = m.bind(&mut g);
        let xv = g.param(&x);
        let out = m.forward_bound(&mut g, &bound, xv).unwrap();
        assert!(!g.requires_grad(out));
        let s = g.sum(out);
        g.backward(s).unwrap();
        assert!(bound.vars().iter().all(|&v| g.grad(v).is_none()));

        let mut live = m.clone();
        live.set_frozen(false);
        live.set_frozen(false);
        let mut g = Graph::new();
        let bound = live.bind(&mut g);
        let xv = g.param(&x);
        let out = live.forward_bound(&mut g, &bound, xv).unwrap();
        let s = g.sum(out);
        g.backward(s).unwrap();
        assert!(bound.vars().iter().all(|&v| g.grad(v).is_some()));
    }

    #[test]
    fn freeze_is_idempotent_and_copies_are_independent() {
        let src = ModelParams::<f64>::init(&tiny()).unwrap().frozen(true);
        let twice = src.clone().frozen(true);
        assert_eq!(src, twice);
        let mut copy = src.clone();
        assert_eq!(copy.fingerprint(), src.fingerprint());
        copy.set_frozen(false);
        copy.tensors_mut()[0].data_mut()[0] += 1.0;
        assert!(src.is_frozen());
        assert!(src.tensors().iter().all(|t| !t.requires_grad()));
        assert_ne!(copy.tensors()[0].data()[0], src.tensors()[0].data()[0]);
    }

    #[test]
    fn f32_model_runs() {
        let m = ModelParams::<f32>::init(&tiny()).unwrap();
        let x = Tensor::<f32>::new(vec![2, 3], vec![0.1, -0.2, 0.3, 0.0, 0.5, -0.5]).unwrap();
        let out = m.infer(&x).unwrap();
        let s: f32 = out.row(0).iter().map(|x| x.exp()).sum();
        assert!((s - 1.0).abs() < 1e-5);
    }
}
