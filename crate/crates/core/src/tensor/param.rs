use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// Process-unique identity of a trainable tensor. Gradient maps are keyed by it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

impl ParamId {
    fn fresh() -> Self {
        ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// A named, trainable tensor owned by a model.
///
/// The buffer is shared copy-on-write with any tape that registered it, so
/// registering a parameter on a tape does not copy its values.
#[derive(Debug, Clone)]
pub struct Param {
    id: ParamId,
    name: String,
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> Self {
        let expected: usize = shape.iter().product();
        assert_eq!(
            expected,
            data.len(),
            "parameter data length does not match shape {shape:?}"
        );
        assert!(shape.iter().all(|&d| d > 0), "zero-sized dimension");
        assert!(shape.len() == 1 || shape.len() == 2, "rank must be 1 or 2");
        Param {
            id: ParamId::fresh(),
            name: name.into(),
            shape: shape.to_vec(),
            data: Arc::new(data),
        }
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(name, shape, vec![0.0; n])
    }

    pub fn filled(name: impl Into<String>, shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::new(name, shape, vec![value; n])
    }

    /// Uniform initialization in `[-scale, scale]`.
    pub fn uniform<R: Rng + ?Sized>(
        name: impl Into<String>,
        shape: &[usize],
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-scale..=scale)).collect();
        Self::new(name, shape, data)
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Shape as (rows, cols); rank-1 parameters are row vectors.
    pub fn dims(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => unreachable!(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn shared(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn set_data(&mut self, data: Vec<f64>) {
        assert_eq!(data.len(), self.data.len());
        self.data = Arc::new(data);
    }
}

/// Anything that owns parameters. Order of `params` and `params_mut` must agree.
pub trait Module {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Sets every parameter to zero. Used by tests and degenerate baselines.
    fn zero_all(&mut self) {
        for p in self.params_mut() {
            p.data_mut().fill(0.0);
        }
    }

    /// Flattened copy of all parameter values, in `params` order.
    fn flat_values(&self) -> Vec<f64> {
        self.params()
            .iter()
            .flat_map(|p| p.data().iter().copied())
            .collect()
    }
}

/// A loose collection of parameters, handy for checking free-standing functions.
#[derive(Debug, Clone, Default)]
pub struct ParamList(pub Vec<Param>);

impl Module for ParamList {
    fn params(&self) -> Vec<&Param> {
        self.0.iter().collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.0.iter_mut().collect()
    }
}

impl<M: Module> Module for Vec<M> {
    fn params(&self) -> Vec<&Param> {
        self.iter().flat_map(|m| m.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.iter_mut().flat_map(|m| m.params_mut()).collect()
    }
}
