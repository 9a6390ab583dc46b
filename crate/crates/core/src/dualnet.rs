//! Dual-input MLP `f(x, aux)`: the auxiliary, label-shaped signal is
//! concatenated to the features at the input layer.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Bindings, Graph, ParamSnapshot, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;

pub const WEIGHTS_MAGIC: &[u8; 5] = b"ITTT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Elu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Regression,
    Classification,
}

/// Norm used for regression discrepancies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossNorm {
    L1,
    #[default]
    L2,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NeutralKind {
    Zeros,
    Constant(f64),
    /// `1/K` in every slot.
    Uniform,
}

/// The "no label given" auxiliary input.
#[derive(Clone, Debug, PartialEq)]
pub struct NeutralSignal {
    value: Tensor,
}

impl NeutralSignal {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    /// The signal repeated over `rows` rows.
    pub fn batch(&self, rows: usize) -> Tensor {
        Tensor::zeros(&[rows, self.value.len()]).add_row(&self.value)
    }
}

pub fn neutral_signal(label_dim: usize, kind: NeutralKind) -> Result<NeutralSignal> {
    if label_dim == 0 {
        return Err(Error::Contract("label dimension must be at least 1".into()));
    }
    let v = match kind {
        NeutralKind::Zeros => 0.0,
        NeutralKind::Constant(c) => c,
        NeutralKind::Uniform => 1.0 / label_dim as f64,
    };
    Ok(NeutralSignal {
        value: Tensor::full(&[label_dim], v),
    })
}

fn default_activation() -> Activation {
    Activation::Elu
}

fn default_hidden() -> Vec<usize> {
    vec![128; 4]
}

fn default_task() -> Task {
    Task::Regression
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub label_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_task")]
    pub task: Task,
    /// Defaults to zeros for regression and uniform for classification.
    #[serde(default)]
    pub neutral: Option<NeutralKind>,
}

impl ModelSpec {
    pub fn regression(input_dim: usize, label_dim: usize, hidden: Vec<usize>) -> Self {
        Self {
            input_dim,
            label_dim,
            hidden,
            activation: Activation::Elu,
            task: Task::Regression,
            neutral: None,
        }
    }

    pub fn neutral_kind(&self) -> NeutralKind {
        self.neutral.unwrap_or(match self.task {
            Task::Regression => NeutralKind::Zeros,
            Task::Classification => NeutralKind::Uniform,
        })
    }

    /// `(fan_in, fan_out)` of every dense layer, output layer last.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim + self.label_dim];
        widths.extend(&self.hidden);
        widths.push(self.label_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.label_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config(format!("invalid model dims: {self:?}")));
        }
        Ok(())
    }
}

/// Dual-input network. Parameters are `layer{i}.weight` `[in × out]` and
/// `layer{i}.bias` `[1 × out]`, in layer order.
#[derive(Clone, Debug)]
pub struct DualInputModel {
    spec: ModelSpec,
    params: ParamStore,
    neutral: NeutralSignal,
}

/// Detached `y0 = f(x, 0)` and `y1 = F(x, y0)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionPair {
    pub y0: Tensor,
    pub y1: Tensor,
}

impl DualInputModel {
    /// Glorot-uniform weights, zero biases.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut r = rng::rng(seed);
        let mut params = ParamStore::new();
        for (i, (fan_in, fan_out)) in spec.layer_dims().into_iter().enumerate() {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| r.gen_range(-bound..bound))
                .collect();
            params.insert(format!("layer{i}.weight"), Tensor::new(vec![fan_in, fan_out], w)?)?;
            params.insert(format!("layer{i}.bias"), Tensor::zeros(&[1, fan_out]))?;
        }
        let neutral = neutral_signal(spec.label_dim, spec.neutral_kind())?;
        Ok(Self {
            spec,
            params,
            neutral,
        })
    }

    /// Same architecture with every parameter set to zero.
    pub fn zeroed(spec: ModelSpec) -> Result<Self> {
        let mut m = Self::new(spec, 0)?;
        for e in m.params.entries_mut() {
            e.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(m)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn neutral(&self) -> &NeutralSignal {
        &self.neutral
    }

    pub fn task(&self) -> Task {
        self.spec.task
    }

    pub fn num_layers(&self) -> usize {
        self.spec.hidden.len() + 1
    }

    pub fn same_dims(&self, other: &Self) -> bool {
        self.spec.input_dim == other.spec.input_dim
            && self.spec.label_dim == other.spec.label_dim
            && self.spec.hidden == other.spec.hidden
    }

    fn check_batch(&self, x: &Tensor, aux: &Tensor) -> Result<()> {
        if !x.is_matrix() || x.cols() != self.spec.input_dim {
            return Err(Error::dim("forward(x)", x.shape(), &[x.rows(), self.spec.input_dim]));
        }
        if !aux.is_matrix() || aux.cols() != self.spec.label_dim || aux.rows() != x.rows() {
            return Err(Error::dim("forward(aux)", aux.shape(), &[x.rows(), self.spec.label_dim]));
        }
        Ok(())
    }

    /// Differentiable forward pass of `x [m × d]`, `aux [m × k]` using the
    /// parameter leaves in `binds`. Returns the output and the
    /// post-activation values of every hidden layer.
    pub fn forward_hidden(
        &self,
        g: &mut Graph,
        binds: &Bindings,
        x: Var,
        aux: Var,
    ) -> Result<(Var, Vec<Var>)> {
        self.check_batch(g.value(x), g.value(aux))?;
        let mut h = g.concat(x, aux, 1)?;
        let n = self.num_layers();
        let mut hidden = Vec::with_capacity(n - 1);
        for i in 0..n {
            let z = g.matmul(h, binds.get(2 * i))?;
            let z = g.add_row(z, binds.get(2 * i + 1))?;
            if i + 1 == n {
                return Ok((z, hidden));
            }
            h = match self.spec.activation {
                Activation::Relu => g.relu(z),
                Activation::Elu => g.elu(z, 1.0),
            };
            hidden.push(h);
        }
        unreachable!("model has at least one layer")
    }

    pub fn forward(&self, g: &mut Graph, binds: &Bindings, x: Var, aux: Var) -> Result<Var> {
        Ok(self.forward_hidden(g, binds, x, aux)?.0)
    }

    /// Graph-free forward pass with the given parameter values (store order).
    /// Produces the same bits as [`DualInputModel::forward`].
    pub fn infer_with<'a>(
        &self,
        params: impl IntoIterator<Item = &'a Tensor>,
        x: &Tensor,
        aux: &Tensor,
    ) -> Result<Tensor> {
        Ok(self.run_values(params, x, aux, false)?.0)
    }

    /// Output and post-activation hidden values of a batch, own parameters.
    pub fn infer_hidden(&self, x: &Tensor, aux: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        self.run_values(self.params.values(), x, aux, true)
    }

    fn run_values<'a>(
        &self,
        params: impl IntoIterator<Item = &'a Tensor>,
        x: &Tensor,
        aux: &Tensor,
        keep_hidden: bool,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        let (x, aux, vector) = (x.as_matrix(), aux.as_matrix(), x.shape().len() == 1);
        self.check_batch(&x, &aux)?;
        let mut h = Tensor::concat(&x, &aux, 1)?;
        let mut hidden = Vec::new();
        let mut it = params.into_iter();
        let n = self.num_layers();
        for i in 0..n {
            let (w, b) = match (it.next(), it.next()) {
                (Some(w), Some(b)) => (w, b),
                _ => return Err(Error::Contract("too few parameters for model".into())),
            };
            if w.shape() != [h.cols(), b.cols()] {
                return Err(Error::dim("infer", h.shape(), w.shape()));
            }
            let z = Tensor::gemm(&h, false, w, false).add_row(b);
            h = if i + 1 == n {
                z
            } else {
                let a = match self.spec.activation {
                    Activation::Relu => z.map(|v| v.max(0.0)),
                    Activation::Elu => z.map(|v| if v > 0.0 { v } else { v.exp_m1() }),
                };
                if keep_hidden {
                    hidden.push(a.clone());
                }
                a
            };
        }
        if vector {
            h = h.reshape(&[self.spec.label_dim])?;
        }
        Ok((h, hidden))
    }

    /// Forward pass value with the model's own parameters. Accepts a single
    /// example (`[d]`, `[k]`) or a batch.
    pub fn infer(&self, x: &Tensor, aux: &Tensor) -> Result<Tensor> {
        self.infer_with(self.params.values(), x, aux)
    }

    /// `y0 = f(x, 0)`.
    pub fn predict_y0(&self, x: &Tensor) -> Result<Tensor> {
        let aux = self.neutral_like(x);
        self.infer(x, &aux)
    }

    /// Neutral signal shaped for `x` (vector or batch).
    pub fn neutral_like(&self, x: &Tensor) -> Tensor {
        if x.shape().len() == 1 {
            self.neutral.value.clone()
        } else {
            self.neutral.batch(x.rows())
        }
    }

    /// Turns a prediction into the auxiliary input of the next pass:
    /// identity for regression, softmax probabilities for classification.
    pub fn aux_from_prediction(&self, y: &Tensor) -> Tensor {
        match self.spec.task {
            Task::Regression => y.clone(),
            Task::Classification => {
                let p = y.as_matrix().softmax_rows();
                p.reshape(y.shape()).expect("same size")
            }
        }
    }

    /// Graph version of [`DualInputModel::aux_from_prediction`].
    pub fn aux_from_prediction_var(&self, g: &mut Graph, y: Var) -> Result<Var> {
        match self.spec.task {
            Task::Regression => Ok(y),
            Task::Classification => g.softmax_rows(y),
        }
    }

    /// Per-task discrepancy between a prediction and a target: the
    /// configured norm for regression, cross-entropy against the target
    /// distribution for classification.
    pub fn discrepancy(&self, g: &mut Graph, pred: Var, target: Var, norm: LossNorm) -> Result<Var> {
        match (self.spec.task, norm) {
            (Task::Classification, _) => g.softmax_ce(pred, target),
            (Task::Regression, LossNorm::L2) => g.mse(pred, target),
            (Task::Regression, LossNorm::L1) => g.l1(pred, target),
        }
    }

    /// Serializes weights: magic, input dim, label dim, hidden-layer count
    /// and widths as little-endian `u32`, then every parameter in store
    /// order as little-endian `f64`.
    pub fn weights_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 8 * self.params.num_scalars());
        out.extend_from_slice(WEIGHTS_MAGIC);
        for d in [self.spec.input_dim, self.spec.label_dim, self.spec.hidden.len()] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &w in &self.spec.hidden {
            out.extend_from_slice(&(w as u32).to_le_bytes());
        }
        for t in self.params.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Loads weights written by [`DualInputModel::weights_bytes`]; the header
    /// must match this model's dims.
    pub fn load_weights_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let bad = |msg: &str| Error::Contract(format!("weights file: {msg}"));
        if bytes.len() < 17 || &bytes[..5] != WEIGHTS_MAGIC {
            return Err(bad("missing ITTT1 magic"));
        }
        let mut pos = 5;
        let mut read_u32 = |bytes: &[u8]| -> Result<usize> {
            let b = bytes.get(pos..pos + 4).ok_or_else(|| bad("truncated header"))?;
            pos += 4;
            Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
        };
        let input_dim = read_u32(bytes)?;
        let label_dim = read_u32(bytes)?;
        let n_hidden = read_u32(bytes)?;
        let hidden = (0..n_hidden)
            .map(|_| read_u32(bytes))
            .collect::<Result<Vec<_>>>()?;
        if input_dim != self.spec.input_dim || label_dim != self.spec.label_dim || hidden != self.spec.hidden {
            return Err(bad(&format!(
                "header dims ({input_dim}, {label_dim}, {hidden:?}) do not match model ({}, {}, {:?})",
                self.spec.input_dim, self.spec.label_dim, self.spec.hidden
            )));
        }
        let header = 5 + 4 * (3 + n_hidden);
        let body = &bytes[header..];
        if body.len() != 8 * self.params.num_scalars() {
            return Err(bad("parameter payload has wrong length"));
        }
        let mut vals = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        for e in self.params.entries_mut() {
            for v in e.value.data_mut() {
                *v = vals.next().expect("length checked");
            }
        }
        Ok(())
    }

    pub fn save_weights(&self, path: &Path) -> Result<()> {
        fs::write(path, self.weights_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load_weights(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        self.load_weights_bytes(&bytes)
    }

    /// Copies parameter values from a snapshot with the same layout.
    pub fn set_params(&mut self, snap: &ParamSnapshot) -> Result<()> {
        self.params.restore(snap)
    }
}

/// `y0 = first(x, 0)`, `y1 = second(x, y0)`, both detached.
pub fn predict_pair(first: &DualInputModel, second: &DualInputModel, x: &Tensor) -> Result<PredictionPair> {
    if !first.same_dims(second) {
        return Err(Error::Contract("predict_pair: models have different dims".into()));
    }
    let y0 = first.predict_y0(x)?;
    let y1 = second.infer(x, &first.aux_from_prediction(&y0))?;
    Ok(PredictionPair { y0, y1 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> ModelSpec {
        ModelSpec::regression(3, 2, vec![5, 4])
    }

    #[test]
    fn layer_widths_follow_concat_convention() {
        let m = DualInputModel::new(spec(), 1).unwrap();
        let first = &m.params().entries()[0];
        assert_eq!(first.value.shape(), &[5, 5]);
        let last = &m.params().entries()[m.params().len() - 2];
        assert_eq!(last.value.shape(), &[4, 2]);
    }

    #[test]
    fn zero_model_outputs_zero() {
        let m = DualInputModel::zeroed(spec()).unwrap();
        let x = Tensor::vector(vec![0.3, -2.0, 7.0]);
        let aux = Tensor::vector(vec![1.0, 5.0]);
        assert_eq!(m.infer(&x, &aux).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn forward_is_deterministic_and_matches_infer() {
        let m = DualInputModel::new(spec(), 9).unwrap();
        let x = Tensor::new(vec![2, 3], vec![0.1, 0.2, 0.3, -1.0, 0.5, 2.0]).unwrap();
        let aux = Tensor::new(vec![2, 2], vec![1.0, 0.0, -0.5, 0.25]).unwrap();
        let mut g = Graph::new();
        let b = m.params().bind(&mut g);
        let xv = g.constant(x.clone());
        let av = g.constant(aux.clone());
        let out = m.forward(&mut g, &b, xv, av).unwrap();
        assert_eq!(g.value(out), &m.infer(&x, &aux).unwrap());
        assert_eq!(m.infer(&x, &aux).unwrap(), m.infer(&x, &aux).unwrap());
    }

    #[test]
    fn predict_y0_equals_forward_with_neutral() {
        let m = DualInputModel::new(spec(), 4).unwrap();
        let x = Tensor::vector(vec![0.5, 0.5, -0.5]);
        let y0 = m.predict_y0(&x).unwrap();
        let direct = m.infer(&x, &Tensor::zeros(&[2])).unwrap();
        assert_eq!(y0, direct);
        assert_eq!(y0.shape(), &[2]);
    }

    #[test]
    fn batch_rows_are_independent() {
        let m = DualInputModel::new(spec(), 4).unwrap();
        let x = Tensor::new(vec![3, 3], vec![0.1, 0.2, 0.3, 1., 2., 3., -1., 0., 1.]).unwrap();
        let y = m.predict_y0(&x).unwrap();
        let perm = x.select_rows(&[2, 0, 1]);
        let yp = m.predict_y0(&perm).unwrap();
        assert_eq!(yp.row(0), y.row(2));
        assert_eq!(yp.row(1), y.row(0));
        for i in 0..3 {
            let single = m.predict_y0(&Tensor::vector(x.row(i).to_vec())).unwrap();
            // gemm blocking may differ between one row and three rows
            for (a, b) in single.data().iter().zip(y.row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_rejects_wrong_shapes() {
        let m = DualInputModel::new(spec(), 4).unwrap();
        let x = Tensor::vector(vec![0.5, 0.5]);
        assert!(matches!(m.predict_y0(&x), Err(Error::Dimension { .. })));
        let x = Tensor::vector(vec![0.5, 0.5, 0.5]);
        assert!(m.infer(&x, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn aux_changes_output_for_random_weights() {
        let m = DualInputModel::new(spec(), 12).unwrap();
        let x = Tensor::vector(vec![0.5, -0.1, 0.9]);
        let a = m.infer(&x, &Tensor::vector(vec![0.0, 0.0])).unwrap();
        let b = m.infer(&x, &Tensor::vector(vec![1.0, -1.0])).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn neutral_signals() {
        assert_eq!(neutral_signal(3, NeutralKind::Zeros).unwrap().value().data(), &[0.0; 3]);
        assert_eq!(
            neutral_signal(2, NeutralKind::Constant(-1.0)).unwrap().value().data(),
            &[-1.0, -1.0]
        );
        let u = neutral_signal(4, NeutralKind::Uniform).unwrap();
        assert_eq!(u.value().data(), &[0.25; 4]);
        for k in 0..4 {
            let mut onehot = vec![0.0; 4];
            onehot[k] = 1.0;
            assert_ne!(u.value().data(), onehot.as_slice());
        }
        assert!(neutral_signal(0, NeutralKind::Zeros).is_err());
    }

    #[test]
    fn classification_defaults_to_uniform_neutral() {
        let mut s = spec();
        s.task = Task::Classification;
        let m = DualInputModel::new(s, 0).unwrap();
        assert_eq!(m.neutral().value().data(), &[0.5, 0.5]);
    }

    #[test]
    fn predict_pair_same_model_constant_in_aux() {
        // Zeroing the aux rows of the first weight makes f constant in aux.
        let mut m = DualInputModel::new(spec(), 3).unwrap();
        let w = &mut m.params_mut().entries_mut()[0].value;
        for r in 3..5 {
            for c in 0..5 {
                w.data_mut()[r * 5 + c] = 0.0;
            }
        }
        let x = Tensor::vector(vec![0.2, 0.4, 0.6]);
        let pair = predict_pair(&m, &m, &x).unwrap();
        assert_eq!(pair.y0, pair.y1);
    }

    #[test]
    fn predict_pair_distinct_models_differ() {
        let a = DualInputModel::new(spec(), 3).unwrap();
        let b = DualInputModel::new(spec(), 4).unwrap();
        let x = Tensor::vector(vec![0.2, 0.4, 0.6]);
        let pair = predict_pair(&a, &b, &x).unwrap();
        assert_ne!(pair.y0, pair.y1);
        let c = DualInputModel::new(ModelSpec::regression(3, 2, vec![6]), 0).unwrap();
        assert!(predict_pair(&a, &c, &x).is_err());
    }

    #[test]
    fn weights_round_trip_and_header_layout() {
        let m = DualInputModel::new(spec(), 5).unwrap();
        let bytes = m.weights_bytes();
        assert_eq!(&bytes[..5], b"ITTT1");
        assert_eq!(u32::from_le_bytes(bytes[5..9].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[9..13].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[13..17].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[17..21].try_into().unwrap()), 5);
        assert_eq!(u32::from_le_bytes(bytes[21..25].try_into().unwrap()), 4);
        let first = f64::from_le_bytes(bytes[25..33].try_into().unwrap());
        assert_eq!(first, m.params().entries()[0].value.data()[0]);

        let mut other = DualInputModel::new(spec(), 6).unwrap();
        other.load_weights_bytes(&bytes).unwrap();
        assert_eq!(other.params(), m.params());

        let mut wrong = DualInputModel::new(ModelSpec::regression(3, 2, vec![5, 5]), 0).unwrap();
        assert!(wrong.load_weights_bytes(&bytes).is_err());
        assert!(other.load_weights_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
