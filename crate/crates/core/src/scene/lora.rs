//! Low-rank adapters `W' = W + (alpha / r) * B * A` and a small attention-like
//! surrogate used to exercise their training maths.
//!
//! `W` is `d x k`, `B` is `d x r` and starts at zero, `A` is `r x k` and starts
//! Gaussian. Only `A` and `B` are trained.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_INIT_SIGMA: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AdapterRecord", into = "AdapterRecord")]
pub struct LoraAdapter {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    alpha: f64,
}

impl LoraAdapter {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, alpha: f64) -> Result<Self> {
        if a.nrows() == 0 || a.nrows() != b.ncols() {
            return Err(Error::InvalidArgument(format!(
                "adapter rank mismatch: A is {}x{}, B is {}x{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols()
            )));
        }
        if !alpha.is_finite() {
            return Err(Error::InvalidArgument("alpha must be finite".into()));
        }
        Ok(LoraAdapter { a, b, alpha })
    }

    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    /// `r x k`.
    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    /// `d x r`.
    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn a_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.a
    }

    pub fn b_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.b
    }

    /// Shape `(d, k)` of the weight this adapter wraps.
    pub fn target_shape(&self) -> (usize, usize) {
        (self.b.nrows(), self.a.ncols())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Checkpoint layout: `{"rank", "alpha", "a": {"rows", "cols", "data"}, "b": ...}`
/// with `data` in row-major order.
#[derive(Serialize, Deserialize)]
struct AdapterRecord {
    rank: usize,
    alpha: f64,
    a: MatrixRecord,
    b: MatrixRecord,
}

#[derive(Serialize, Deserialize)]
struct MatrixRecord {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl From<&DMatrix<f64>> for MatrixRecord {
    fn from(m: &DMatrix<f64>) -> Self {
        MatrixRecord {
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.transpose().as_slice().to_vec(),
        }
    }
}

impl TryFrom<MatrixRecord> for DMatrix<f64> {
    type Error = Error;

    fn try_from(rec: MatrixRecord) -> Result<Self> {
        if rec.rows * rec.cols != rec.data.len() {
            return Err(Error::InvalidArgument(format!(
                "matrix header {}x{} does not match {} values",
                rec.rows,
                rec.cols,
                rec.data.len()
            )));
        }
        Ok(DMatrix::from_row_slice(rec.rows, rec.cols, &rec.data))
    }
}

impl TryFrom<AdapterRecord> for LoraAdapter {
    type Error = Error;

    fn try_from(rec: AdapterRecord) -> Result<Self> {
        let adapter = LoraAdapter::new(rec.a.try_into()?, rec.b.try_into()?, rec.alpha)?;
        if adapter.rank() != rec.rank {
            return Err(Error::InvalidArgument(format!(
                "checkpoint rank {} does not match matrices of rank {}",
                rec.rank,
                adapter.rank()
            )));
        }
        Ok(adapter)
    }
}

impl From<LoraAdapter> for AdapterRecord {
    fn from(adapter: LoraAdapter) -> Self {
        AdapterRecord {
            rank: adapter.rank(),
            alpha: adapter.alpha,
            a: (&adapter.a).into(),
            b: (&adapter.b).into(),
        }
    }
}

pub fn lora_init(d: usize, k: usize, rank: usize, alpha: f64, seed: u64) -> Result<LoraAdapter> {
    lora_init_with_sigma(d, k, rank, alpha, seed, DEFAULT_INIT_SIGMA)
}

/// `B = 0` (`d x r`), `A ~ N(0, sigma^2)` (`r x k`), seeded.
pub fn lora_init_with_sigma(
    d: usize,
    k: usize,
    rank: usize,
    alpha: f64,
    seed: u64,
    sigma: f64,
) -> Result<LoraAdapter> {
    if rank == 0 || rank >= d.min(k) {
        return Err(Error::InvalidArgument(format!(
            "rank {rank} must satisfy 1 <= r < min(d, k) = {}",
            d.min(k)
        )));
    }
    let normal = Normal::new(0.0, sigma)
        .map_err(|e| Error::InvalidArgument(format!("bad init sigma {sigma}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = DMatrix::from_fn(rank, k, |_, _| normal.sample(&mut rng));
    let b = DMatrix::zeros(d, rank);
    LoraAdapter::new(a, b, alpha)
}

/// `W + (alpha / r) * B * A`.
pub fn lora_apply(w: &DMatrix<f64>, adapter: &LoraAdapter) -> Result<DMatrix<f64>> {
    if w.shape() != adapter.target_shape() {
        return Err(Error::InvalidArgument(format!(
            "weight is {}x{} but adapter targets {}x{}",
            w.nrows(),
            w.ncols(),
            adapter.target_shape().0,
            adapter.target_shape().1
        )));
    }
    Ok(w + (&adapter.b * &adapter.a) * adapter.scaling())
}

/// `-sum(ln p)` over the probabilities assigned to each target caption.
pub fn nll_loss(probabilities: &[f64]) -> Result<f64> {
    let mut loss = 0.0;
    for &p in probabilities {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::Domain(format!("probability {p} outside (0, 1]")));
        }
        loss -= p.ln();
    }
    Ok(loss)
}

/// Inputs, target caption indices and SGD settings for the toy surrogate.
#[derive(Debug, Clone)]
pub struct FineTuneBatch {
    pub samples: Vec<(DVector<f64>, usize)>,
    pub learning_rate: f64,
    pub steps: usize,
}

impl FineTuneBatch {
    pub fn new(samples: Vec<(DVector<f64>, usize)>, learning_rate: f64, steps: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("batch needs at least one sample".into()));
        }
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        Ok(FineTuneBatch {
            samples,
            learning_rate,
            steps,
        })
    }
}

#[derive(Debug, Clone)]
pub struct LoraGradients {
    pub q_a: DMatrix<f64>,
    pub q_b: DMatrix<f64>,
    pub k_a: DMatrix<f64>,
    pub k_b: DMatrix<f64>,
}

/// Single-head attention scorer over a fixed set of caption embeddings.
///
/// For input `x` the caption logits are `s_j = (W_q' x) . (W_k' c_j) / sqrt(d)`
/// and `P(C = j | x) = softmax(s)_j`. Adapters sit on `W_q` and `W_k`; the
/// base weights never change.
#[derive(Debug, Clone)]
pub struct ToyAttentionModel {
    w_q: DMatrix<f64>,
    w_k: DMatrix<f64>,
    captions: Vec<DVector<f64>>,
    pub q_adapter: LoraAdapter,
    pub k_adapter: LoraAdapter,
}

impl ToyAttentionModel {
    pub fn new(
        w_q: DMatrix<f64>,
        w_k: DMatrix<f64>,
        captions: Vec<DVector<f64>>,
        q_adapter: LoraAdapter,
        k_adapter: LoraAdapter,
    ) -> Result<Self> {
        let shape = w_q.shape();
        if w_k.shape() != shape
            || q_adapter.target_shape() != shape
            || k_adapter.target_shape() != shape
        {
            return Err(Error::InvalidArgument(
                "W_q, W_k and both adapters must share one d x k shape".into(),
            ));
        }
        if captions.len() < 2 || captions.iter().any(|c| c.len() != shape.1) {
            return Err(Error::InvalidArgument(format!(
                "need at least two caption embeddings of length {}",
                shape.1
            )));
        }
        Ok(ToyAttentionModel {
            w_q,
            w_k,
            captions,
            q_adapter,
            k_adapter,
        })
    }

    /// Random base weights, captions and freshly initialised adapters.
    pub fn seeded(
        d: usize,
        k: usize,
        rank: usize,
        alpha: f64,
        n_captions: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let scale = 1.0 / (k as f64).sqrt();
        let mut draw = |rows, cols| DMatrix::from_fn(rows, cols, |_, _| unit.sample(&mut rng) * scale);
        let w_q = draw(d, k);
        let w_k = draw(d, k);
        let captions = (0..n_captions).map(|_| draw(k, 1).column(0).into_owned()).collect();
        let q_adapter = lora_init(d, k, rank, alpha, seed.wrapping_add(1))?;
        let k_adapter = lora_init(d, k, rank, alpha, seed.wrapping_add(2))?;
        Self::new(w_q, w_k, captions, q_adapter, k_adapter)
    }

    pub fn w_q(&self) -> &DMatrix<f64> {
        &self.w_q
    }

    pub fn w_k(&self) -> &DMatrix<f64> {
        &self.w_k
    }

    pub fn captions(&self) -> &[DVector<f64>] {
        &self.captions
    }

    fn adapted(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        (
            lora_apply(&self.w_q, &self.q_adapter).expect("shapes checked at construction"),
            lora_apply(&self.w_k, &self.k_adapter).expect("shapes checked at construction"),
        )
    }

    fn logits(&self, wq: &DMatrix<f64>, wk: &DMatrix<f64>, x: &DVector<f64>) -> (DVector<f64>, Vec<DVector<f64>>, DVector<f64>) {
        let q = wq * x;
        let keys: Vec<DVector<f64>> = self.captions.iter().map(|c| wk * c).collect();
        let norm = (q.len() as f64).sqrt();
        let logits = DVector::from_iterator(keys.len(), keys.iter().map(|key| q.dot(key) / norm));
        (q, keys, logits)
    }

    fn check_sample(&self, x: &DVector<f64>, target: usize) -> Result<()> {
        if x.len() != self.w_q.ncols() {
            return Err(Error::InvalidArgument(format!(
                "input has length {}, expected {}",
                x.len(),
                self.w_q.ncols()
            )));
        }
        if target >= self.captions.len() {
            return Err(Error::InvalidArgument(format!(
                "target caption {target} out of range"
            )));
        }
        Ok(())
    }

    /// Caption distribution for one input.
    pub fn probabilities(&self, x: &DVector<f64>) -> DVector<f64> {
        let (wq, wk) = self.adapted();
        softmax(&self.logits(&wq, &wk, x).2)
    }

    /// Negative log-likelihood of the batch targets, via log-softmax.
    pub fn loss(&self, samples: &[(DVector<f64>, usize)]) -> Result<f64> {
        let (wq, wk) = self.adapted();
        let mut loss = 0.0;
        for (x, target) in samples {
            self.check_sample(x, *target)?;
            let logits = self.logits(&wq, &wk, x).2;
            loss += log_sum_exp(&logits) - logits[*target];
        }
        Ok(loss)
    }

    /// Analytic gradients of [`Self::loss`] with respect to both adapters.
    pub fn gradients(&self, samples: &[(DVector<f64>, usize)]) -> Result<LoraGradients> {
        let (wq, wk) = self.adapted();
        let (d, k) = self.w_q.shape();
        let norm = (d as f64).sqrt();
        let mut grad_wq = DMatrix::zeros(d, k);
        let mut grad_wk = DMatrix::zeros(d, k);
        for (x, target) in samples {
            self.check_sample(x, *target)?;
            let (q, keys, logits) = self.logits(&wq, &wk, x);
            let mut g = softmax(&logits);
            g[*target] -= 1.0;
            let mut grad_q = DVector::zeros(d);
            for (j, key) in keys.iter().enumerate() {
                grad_q.axpy(g[j] / norm, key, 1.0);
                // dL/dK_j = g_j q / sqrt(d); K_j = W_k' c_j
                grad_wk.ger(g[j] / norm, &q, &self.captions[j], 1.0);
            }
            grad_wq.ger(1.0, &grad_q, x, 1.0);
        }
        let (q_a, q_b) = adapter_gradients(&self.q_adapter, &grad_wq);
        let (k_a, k_b) = adapter_gradients(&self.k_adapter, &grad_wk);
        Ok(LoraGradients { q_a, q_b, k_a, k_b })
    }
}

/// Chain rule through `W' = W + s B A`: `dA = s B^T G`, `dB = s G A^T`.
fn adapter_gradients(adapter: &LoraAdapter, grad_w: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let s = adapter.scaling();
    (
        adapter.b.transpose() * grad_w * s,
        grad_w * adapter.a.transpose() * s,
    )
}

fn log_sum_exp(v: &DVector<f64>) -> f64 {
    let max = v.max();
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn softmax(v: &DVector<f64>) -> DVector<f64> {
    let lse = log_sum_exp(v);
    v.map(|x| (x - lse).exp())
}

/// One SGD step on the adapters. Returns the loss before the update; a
/// non-finite loss aborts without touching the adapters.
pub fn lora_train_step(
    model: &mut ToyAttentionModel,
    samples: &[(DVector<f64>, usize)],
    learning_rate: f64,
) -> Result<f64> {
    if !(learning_rate > 0.0 && learning_rate.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be positive, got {learning_rate}"
        )));
    }
    let loss = model.loss(samples)?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss is {loss}")));
    }
    let grads = model.gradients(samples)?;
    let all = [&grads.q_a, &grads.q_b, &grads.k_a, &grads.k_b];
    if all.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    model.q_adapter.a -= &grads.q_a * learning_rate;
    model.q_adapter.b -= &grads.q_b * learning_rate;
    model.k_adapter.a -= &grads.k_a * learning_rate;
    model.k_adapter.b -= &grads.k_b * learning_rate;
    Ok(loss)
}

/// Runs `batch.steps` steps and returns the loss before each step followed by
/// the final loss.
pub fn train(model: &mut ToyAttentionModel, batch: &FineTuneBatch) -> Result<Vec<f64>> {
    let mut curve = Vec::with_capacity(batch.steps + 1);
    for _ in 0..batch.steps {
        curve.push(lora_train_step(model, &batch.samples, batch.learning_rate)?);
    }
    curve.push(model.loss(&batch.samples)?);
    Ok(curve)
}
