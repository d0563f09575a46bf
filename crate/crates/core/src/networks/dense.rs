//! Dense stacks: a chain of fully connected layers with rectified-linear
//! hidden activations and a Gaussian, categorical, or plain linear head.

use super::tape::{ParamId, ParamStore, Tape, Var};
use super::{GaussianParams, NetworkError, STD_EPS};
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputHead {
    /// Linear mean head plus a softplus std head shifted by [`STD_EPS`].
    Gaussian { dim: usize },
    /// Linear layer producing one logit per class.
    Categorical { classes: usize },
    /// Bare linear layer.
    Linear { dim: usize },
}

impl OutputHead {
    fn dim(&self) -> usize {
        match *self {
            OutputHead::Gaussian { dim } | OutputHead::Linear { dim } => dim,
            OutputHead::Categorical { classes } => classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseStackSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output: OutputHead,
}

impl DenseStackSpec {
    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.input_dim == 0 || self.output.dim() == 0 || self.hidden_dims.contains(&0) {
            return Err(NetworkError::BadConfig(format!(
                "dense stack dims must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Tape outputs of a dense stack.
pub enum HeadOut {
    Gaussian { mean: Var, std: Var },
    Logits(Var),
    Linear(Var),
}

/// A dense stack with its parameters registered in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct DenseStack {
    spec: DenseStackSpec,
    hidden: Vec<(ParamId, ParamId)>,
    head_a: (ParamId, ParamId),
    head_b: Option<(ParamId, ParamId)>,
}

impl DenseStack {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        spec: DenseStackSpec,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, NetworkError> {
        spec.validate()?;
        let mut hidden = Vec::new();
        let mut in_dim = spec.input_dim;
        for (i, &h) in spec.hidden_dims.iter().enumerate() {
            hidden.push(store.register_linear(&format!("{prefix}.h{i}"), in_dim, h, rng));
            in_dim = h;
        }
        let out_dim = spec.output.dim();
        let (head_a, head_b) = match spec.output {
            OutputHead::Gaussian { .. } => (
                store.register_linear(&format!("{prefix}.mean"), in_dim, out_dim, rng),
                Some(store.register_linear(&format!("{prefix}.std"), in_dim, out_dim, rng)),
            ),
            OutputHead::Categorical { .. } | OutputHead::Linear { .. } => (
                store.register_linear(&format!("{prefix}.out"), in_dim, out_dim, rng),
                None,
            ),
        };
        Ok(Self {
            spec,
            hidden,
            head_a,
            head_b,
        })
    }

    pub fn spec(&self) -> &DenseStackSpec {
        &self.spec
    }

    fn check_input(&self, got: usize) -> Result<(), NetworkError> {
        if got != self.spec.input_dim {
            return Err(NetworkError::ShapeMismatch {
                context: "dense stack input".into(),
                expected: self.spec.input_dim.to_string(),
                got: got.to_string(),
            });
        }
        Ok(())
    }

    fn linear(&self, t: &mut Tape, x: Var, wb: (ParamId, ParamId)) -> Var {
        let w = t.param(wb.0);
        let b = t.param(wb.1);
        let y = t.matmul(x, w);
        t.add_row(y, b)
    }

    /// Forward pass over a `B x input_dim` batch of rows.
    pub fn forward_tape(&self, t: &mut Tape, x: Var) -> HeadOut {
        debug_assert_eq!(t.shape(x).1, self.spec.input_dim);
        let mut h = x;
        for &wb in &self.hidden {
            h = self.linear(t, h, wb);
            h = t.relu(h);
        }
        match self.spec.output {
            OutputHead::Gaussian { .. } => {
                let mean = self.linear(t, h, self.head_a);
                let pre = self.linear(t, h, self.head_b.unwrap());
                let sp = t.softplus(pre);
                let std = t.add_const(sp, STD_EPS);
                HeadOut::Gaussian { mean, std }
            }
            OutputHead::Categorical { .. } => HeadOut::Logits(self.linear(t, h, self.head_a)),
            OutputHead::Linear { .. } => HeadOut::Linear(self.linear(t, h, self.head_a)),
        }
    }

    /// Gaussian head over a batch; panics if the head is not Gaussian.
    pub fn forward_gaussian_tape(&self, t: &mut Tape, x: Var) -> (Var, Var) {
        match self.forward_tape(t, x) {
            HeadOut::Gaussian { mean, std } => (mean, std),
            _ => panic!("stack head is not Gaussian"),
        }
    }

    /// Single-vector forward returning owned head outputs.
    pub fn forward_single(
        &self,
        params: &ParamStore,
        x: &[f64],
    ) -> Result<SingleOut, NetworkError> {
        self.check_input(x.len())?;
        let mut t = Tape::new(params);
        let xv = t.input(Array2::from_shape_vec((1, x.len()), x.to_vec()).unwrap());
        Ok(match self.forward_tape(&mut t, xv) {
            HeadOut::Gaussian { mean, std } => SingleOut::Gaussian(GaussianParams {
                mean: t.value(mean).row(0).to_vec(),
                std: t.value(std).row(0).to_vec(),
            }),
            HeadOut::Logits(l) => SingleOut::Logits(t.value(l).row(0).to_vec()),
            HeadOut::Linear(l) => SingleOut::Linear(t.value(l).row(0).to_vec()),
        })
    }
}

/// Owned head outputs of a single-sample forward pass.
pub enum SingleOut {
    Gaussian(GaussianParams),
    Logits(Vec<f64>),
    Linear(Vec<f64>),
}

impl SingleOut {
    pub fn into_gaussian(self) -> GaussianParams {
        match self {
            SingleOut::Gaussian(g) => g,
            _ => panic!("head is not Gaussian"),
        }
    }

    pub fn into_logits(self) -> Vec<f64> {
        match self {
            SingleOut::Logits(l) => l,
            _ => panic!("head is not categorical"),
        }
    }
}

/// Evaluates a Gaussian-head stack on one input vector.
pub fn forward_gaussian(
    stack: &DenseStack,
    params: &ParamStore,
    x: &[f64],
) -> Result<GaussianParams, NetworkError> {
    Ok(stack.forward_single(params, x)?.into_gaussian())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn store_and_rng(seed: u64) -> (ParamStore, ChaCha8Rng) {
        (ParamStore::new(), ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn zero_parameters_give_zero_mean_and_softplus_std() {
        let (mut store, mut rng) = store_and_rng(0);
        let stack = DenseStack::init(
            &mut store,
            "enc",
            DenseStackSpec {
                input_dim: 3,
                hidden_dims: vec![4],
                output: OutputHead::Gaussian { dim: 2 },
            },
            &mut rng,
        )
        .unwrap();
        for i in 0..store.len() {
            store.get_mut(ParamId(i)).fill(0.0);
        }
        let g = forward_gaussian(&stack, &store, &[0.7, -0.3, 2.0]).unwrap();
        assert_eq!(g.mean, vec![0.0, 0.0]);
        let expect = 2.0f64.ln() + STD_EPS;
        for s in &g.std {
            assert!((s - expect).abs() < 1e-12, "std {s} vs {expect}");
            assert!((s - 0.6932).abs() < 1e-4);
        }
    }

    #[test]
    fn identity_linear_layer_reproduces_input_mean() {
        let (mut store, mut rng) = store_and_rng(1);
        let stack = DenseStack::init(
            &mut store,
            "id",
            DenseStackSpec {
                input_dim: 3,
                hidden_dims: vec![],
                output: OutputHead::Gaussian { dim: 3 },
            },
            &mut rng,
        )
        .unwrap();
        // mean head = identity, zero bias
        let w = store.get_mut(ParamId(0));
        w.fill(0.0);
        for i in 0..3 {
            w[[i, i]] = 1.0;
        }
        store.get_mut(ParamId(1)).fill(0.0);
        let x = [0.25, -1.5, 3.0];
        let g = forward_gaussian(&stack, &store, &x).unwrap();
        for (m, xv) in g.mean.iter().zip(&x) {
            assert!((m - xv).abs() < 1e-12);
        }
    }

    #[test]
    fn random_nets_produce_finite_outputs_with_positive_std() {
        let (mut store, mut rng) = store_and_rng(2);
        let stack = DenseStack::init(
            &mut store,
            "r",
            DenseStackSpec {
                input_dim: 5,
                hidden_dims: vec![7, 3],
                output: OutputHead::Gaussian { dim: 4 },
            },
            &mut rng,
        )
        .unwrap();
        for _ in 0..100 {
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-50.0..50.0)).collect();
            let g = forward_gaussian(&stack, &store, &x).unwrap();
            for (m, s) in g.mean.iter().zip(&g.std) {
                assert!(m.is_finite());
                assert!(s.is_finite() && *s >= STD_EPS);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_reported_with_dims() {
        let (mut store, mut rng) = store_and_rng(3);
        let stack = DenseStack::init(
            &mut store,
            "e",
            DenseStackSpec {
                input_dim: 4,
                hidden_dims: vec![2],
                output: OutputHead::Gaussian { dim: 2 },
            },
            &mut rng,
        )
        .unwrap();
        let err = forward_gaussian(&stack, &store, &[1.0, 2.0]).unwrap_err();
        match err {
            NetworkError::ShapeMismatch { expected, got, .. } => {
                assert_eq!(expected, "4");
                assert_eq!(got, "2");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn zero_dimension_specs_are_rejected() {
        let spec = DenseStackSpec {
            input_dim: 0,
            hidden_dims: vec![],
            output: OutputHead::Linear { dim: 1 },
        };
        assert!(spec.validate().is_err());
    }
}
