use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use crate::error::{GesrError, Result};
use crate::numerics::matrix::{BoolMatrix, DenseMatrix};

const LAYER_NORM_EPS: f64 = 1e-6;

/// Handle to a named parameter tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A parameter tensor with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct ParamTensor {
    pub value: DenseMatrix,
    pub grad: DenseMatrix,
}

/// Ordered collection of named parameters. Registration order is
/// deterministic and defines both ParamId indices and checkpoint layout,
/// so two models built from the same config and seed are identical.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<ParamTensor>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn register(&mut self, name: &str, value: DenseMatrix) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(GesrError::Contract(format!(
                "parameter {name:?} registered twice"
            )));
        }
        let id = self.tensors.len();
        self.by_name.insert(name.to_string(), id);
        self.names.push(name.to_string());
        let grad = DenseMatrix::zeros(value.rows(), value.cols());
        self.tensors.push(ParamTensor { value, grad });
        Ok(ParamId(id))
    }

    /// Glorot-uniform init: U(-b, b) with b = sqrt(6 / (fan_in + fan_out)).
    pub fn register_glorot(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
        self.register(name, DenseMatrix::from_vec(rows, cols, data)?)
    }

    pub fn register_zeros(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        self.register(name, DenseMatrix::zeros(rows, cols))
    }

    pub fn register_ones(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        self.register(name, DenseMatrix::filled(rows, cols, 1.0))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor {
        &mut self.tensors[id.0]
    }

    pub fn value(&self, id: ParamId) -> &DenseMatrix {
        &self.tensors[id.0].value
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamTensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Resets every gradient accumulator to zero. Called after each
    /// optimizer step.
    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.grad.fill(0.0);
        }
    }
}

/// One recorded operation on the tape. `out` is the index of the produced
/// value; inputs are indices of earlier values.
#[derive(Debug)]
enum Step {
    Param {
        id: ParamId,
        out: usize,
    },
    Gather {
        id: ParamId,
        rows: Vec<usize>,
        out: usize,
    },
    SelectRows {
        src: usize,
        rows: Vec<usize>,
        out: usize,
    },
    Matmul {
        a: usize,
        b: usize,
        out: usize,
    },
    /// out = a * b^T
    MatmulNt {
        a: usize,
        b: usize,
        out: usize,
    },
    Add {
        a: usize,
        b: usize,
        out: usize,
    },
    /// Adds a 1xC row vector to every row of a.
    AddRow {
        a: usize,
        row: usize,
        out: usize,
    },
    Mul {
        a: usize,
        b: usize,
        out: usize,
    },
    Scale {
        a: usize,
        k: f64,
        out: usize,
    },
    Sigmoid {
        a: usize,
        out: usize,
    },
    Silu {
        a: usize,
        out: usize,
    },
    Relu {
        a: usize,
        out: usize,
    },
    /// Covers masked softmax too: blocked positions carry probability
    /// exactly 0.0 in the stored output, which zeroes their gradient in
    /// the shared backward formula, so the mask itself need not be kept.
    SoftmaxRows {
        a: usize,
        out: usize,
    },
    LayerNorm {
        a: usize,
        gamma: ParamId,
        beta: ParamId,
        /// Per-row (mean, inv_std) captured during the forward pass.
        stats: Vec<(f64, f64)>,
        out: usize,
    },
    /// Concatenation of parts into out; the bool is true for column-wise
    /// (horizontal) concatenation, false for row-wise.
    ConcatRowsOrCols(Vec<usize>, usize, bool),
    SliceCols {
        a: usize,
        start: usize,
        out: usize,
    },
    SliceRows {
        a: usize,
        start: usize,
        out: usize,
    },
    /// Repeats a 1xC row n times.
    BroadcastRow {
        a: usize,
        out: usize,
    },
    MeanRows {
        a: usize,
        out: usize,
    },
    SumCols {
        a: usize,
        out: usize,
    },
    SumAll {
        a: usize,
        out: usize,
    },
    /// Mean binary cross-entropy from logits against fixed labels.
    BceMean {
        logits: usize,
        labels: DenseMatrix,
        out: usize,
    },
}

/// Handle to a value held by a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Computation tape. In recording mode every op is stored so `backward`
/// can replay it in reverse; in inference mode only the values are kept.
/// Both modes execute the exact same floating-point path, which is what
/// makes the cached serving path bit-identical to the training path.
pub struct Graph {
    vals: Vec<DenseMatrix>,
    steps: Vec<Step>,
    recording: bool,
}

impl Graph {
    pub fn recording() -> Self {
        Graph {
            vals: Vec::new(),
            steps: Vec::new(),
            recording: true,
        }
    }

    pub fn inference() -> Self {
        Graph {
            vals: Vec::new(),
            steps: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn value(&self, v: Var) -> &DenseMatrix {
        &self.vals[v.0]
    }

    /// Extracts a 1x1 value as a scalar.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let m = self.value(v);
        if m.dims() != (1, 1) {
            return Err(GesrError::Contract(format!(
                "expected 1x1 scalar, got {}x{}",
                m.rows(),
                m.cols()
            )));
        }
        Ok(m.get(0, 0))
    }

    fn push(&mut self, val: DenseMatrix, step: impl FnOnce(usize) -> Step) -> Var {
        let out = self.vals.len();
        self.vals.push(val);
        if self.recording {
            self.steps.push(step(out));
        }
        Var(out)
    }

    /// A constant input. Not differentiated.
    pub fn input(&mut self, val: DenseMatrix) -> Var {
        let out = self.vals.len();
        self.vals.push(val);
        Var(out)
    }

    /// Reads a parameter into the graph.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let val = store.value(id).clone();
        self.push(val, |out| Step::Param { id, out })
    }

    /// Row lookup into an embedding-style parameter table. `rows[i]` selects
    /// the table row placed at output row i; repeated indices are allowed
    /// and their gradients accumulate.
    pub fn gather(&mut self, store: &ParamStore, id: ParamId, rows: &[usize]) -> Result<Var> {
        let table = store.value(id);
        let cols = table.cols();
        let mut out = DenseMatrix::zeros(rows.len(), cols);
        for (i, &r) in rows.iter().enumerate() {
            if r >= table.rows() {
                return Err(GesrError::Input(format!(
                    "gather row {r} out of range for table {:?} with {} rows",
                    store.name(id),
                    table.rows()
                )));
            }
            out.row_mut(i).copy_from_slice(table.row(r));
        }
        let rows = rows.to_vec();
        Ok(self.push(out, |o| Step::Gather { id, rows, out: o }))
    }

    /// Copies selected rows of an existing value into a new value.
    pub fn select_rows(&mut self, src: Var, rows: &[usize]) -> Result<Var> {
        let m = &self.vals[src.0];
        let cols = m.cols();
        let mut out = DenseMatrix::zeros(rows.len(), cols);
        for (i, &r) in rows.iter().enumerate() {
            if r >= m.rows() {
                return Err(GesrError::Contract(format!(
                    "select_rows index {r} out of range for {} rows",
                    m.rows()
                )));
            }
            out.row_mut(i).copy_from_slice(m.row(r));
        }
        let rows = rows.to_vec();
        Ok(self.push(out, |o| Step::SelectRows { src: src.0, rows, out: o }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let val = self.vals[a.0].matmul(&self.vals[b.0])?;
        Ok(self.push(val, |out| Step::Matmul { a: a.0, b: b.0, out }))
    }

    /// a * b^T
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let val = self.vals[a.0].matmul_nt(&self.vals[b.0])?;
        Ok(self.push(val, |out| Step::MatmulNt { a: a.0, b: b.0, out }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let val = self.vals[a.0].add(&self.vals[b.0])?;
        Ok(self.push(val, |out| Step::Add { a: a.0, b: b.0, out }))
    }

    /// Adds a 1xC row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let m = &self.vals[a.0];
        let r = &self.vals[row.0];
        if r.rows() != 1 || r.cols() != m.cols() {
            return Err(GesrError::dim(
                "add_row",
                format!("{}x{} + {}x{}", m.rows(), m.cols(), r.rows(), r.cols()),
            ));
        }
        let mut val = m.clone();
        for i in 0..val.rows() {
            for (x, b) in val.row_mut(i).iter_mut().zip(r.row(0)) {
                *x += b;
            }
        }
        Ok(self.push(val, |out| Step::AddRow { a: a.0, row: row.0, out }))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let val = self.vals[a.0].hadamard(&self.vals[b.0])?;
        Ok(self.push(val, |out| Step::Mul { a: a.0, b: b.0, out }))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let val = self.vals[a.0].scale(k);
        self.push(val, |out| Step::Scale { a: a.0, k, out })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let val = self.vals[a.0].map(sigmoid);
        self.push(val, |out| Step::Sigmoid { a: a.0, out })
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let val = self.vals[a.0].map(|x| x * sigmoid(x));
        self.push(val, |out| Step::Silu { a: a.0, out })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let val = self.vals[a.0].map(|x| x.max(0.0));
        self.push(val, |out| Step::Relu { a: a.0, out })
    }

    /// Row-wise softmax with max-subtraction for stability.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let val = softmax_forward(&self.vals[a.0], None)?;
        Ok(self.push(val, |out| Step::SoftmaxRows { a: a.0, out }))
    }

    /// Row-wise softmax over allowed positions only; blocked positions get
    /// probability exactly 0.0. Every row must allow at least one position.
    pub fn masked_softmax_rows(&mut self, a: Var, mask: Arc<BoolMatrix>) -> Result<Var> {
        let m = &self.vals[a.0];
        if (m.rows(), m.cols()) != (mask.rows(), mask.cols()) {
            return Err(GesrError::dim(
                "masked_softmax_rows",
                format!(
                    "scores {}x{} vs mask {}x{}",
                    m.rows(),
                    m.cols(),
                    mask.rows(),
                    mask.cols()
                ),
            ));
        }
        let val = softmax_forward(m, Some(&mask))?;
        Ok(self.push(val, |out| Step::SoftmaxRows { a: a.0, out }))
    }

    /// Per-row layer normalization with learned gain/shift:
    /// out = gamma * (x - mean) / sqrt(var + eps) + beta.
    pub fn layer_norm(&mut self, store: &ParamStore, a: Var, gamma: ParamId, beta: ParamId) -> Result<Var> {
        let x = &self.vals[a.0];
        let d = x.cols();
        let g = store.value(gamma);
        let b = store.value(beta);
        if g.dims() != (1, d) || b.dims() != (1, d) {
            return Err(GesrError::dim(
                "layer_norm",
                format!("input width {d} vs gamma {:?} beta {:?}", g.dims(), b.dims()),
            ));
        }
        if d == 0 {
            return Err(GesrError::dim("layer_norm", "zero-width input".to_string()));
        }
        let mut out = DenseMatrix::zeros(x.rows(), d);
        let mut stats = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            stats.push((mean, inv_std));
            for c in 0..d {
                let xhat = (row[c] - mean) * inv_std;
                out.set(r, c, g.get(0, c) * xhat + b.get(0, c));
            }
        }
        Ok(self.push(out, |o| Step::LayerNorm {
            a: a.0,
            gamma,
            beta,
            stats,
            out: o,
        }))
    }

    /// Horizontal concatenation; all parts must share a row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(GesrError::Contract("concat_cols of no parts".to_string()));
        }
        let rows = self.vals[parts[0].0].rows();
        let total: usize = parts.iter().map(|p| self.vals[p.0].cols()).sum();
        let mut out = DenseMatrix::zeros(rows, total);
        let mut offset = 0;
        for p in parts {
            let m = &self.vals[p.0];
            if m.rows() != rows {
                return Err(GesrError::dim(
                    "concat_cols",
                    format!("{} rows vs {} rows", m.rows(), rows),
                ));
            }
            for r in 0..rows {
                out.row_mut(r)[offset..offset + m.cols()].copy_from_slice(m.row(r));
            }
            offset += m.cols();
        }
        let parts = parts.iter().map(|p| p.0).collect();
        Ok(self.push(out, |o| Step::ConcatRowsOrCols(parts, o, true)))
    }

    /// Vertical concatenation; all parts must share a column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(GesrError::Contract("concat_rows of no parts".to_string()));
        }
        let cols = self.vals[parts[0].0].cols();
        let total: usize = parts.iter().map(|p| self.vals[p.0].rows()).sum();
        let mut out = DenseMatrix::zeros(total, cols);
        let mut offset = 0;
        for p in parts {
            let m = &self.vals[p.0];
            if m.cols() != cols {
                return Err(GesrError::dim(
                    "concat_rows",
                    format!("{} cols vs {} cols", m.cols(), cols),
                ));
            }
            for r in 0..m.rows() {
                out.row_mut(offset + r).copy_from_slice(m.row(r));
            }
            offset += m.rows();
        }
        let parts = parts.iter().map(|p| p.0).collect();
        Ok(self.push(out, |o| Step::ConcatRowsOrCols(parts, o, false)))
    }

    /// Extracts columns [start, start+len).
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let m = &self.vals[a.0];
        if start + len > m.cols() {
            return Err(GesrError::dim(
                "slice_cols",
                format!("[{start}, {}) of {} cols", start + len, m.cols()),
            ));
        }
        let mut out = DenseMatrix::zeros(m.rows(), len);
        for r in 0..m.rows() {
            out.row_mut(r).copy_from_slice(&m.row(r)[start..start + len]);
        }
        Ok(self.push(out, |o| Step::SliceCols { a: a.0, start, out: o }))
    }

    /// Extracts rows [start, start+len).
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let m = &self.vals[a.0];
        if start + len > m.rows() {
            return Err(GesrError::dim(
                "slice_rows",
                format!("[{start}, {}) of {} rows", start + len, m.rows()),
            ));
        }
        let mut out = DenseMatrix::zeros(len, m.cols());
        for r in 0..len {
            out.row_mut(r).copy_from_slice(m.row(start + r));
        }
        Ok(self.push(out, |o| Step::SliceRows { a: a.0, start, out: o }))
    }

    /// Repeats a 1xC row `n` times.
    pub fn broadcast_row(&mut self, a: Var, n: usize) -> Result<Var> {
        let m = &self.vals[a.0];
        if m.rows() != 1 {
            return Err(GesrError::dim(
                "broadcast_row",
                format!("expected 1 row, got {}", m.rows()),
            ));
        }
        let mut out = DenseMatrix::zeros(n, m.cols());
        for r in 0..n {
            out.row_mut(r).copy_from_slice(m.row(0));
        }
        Ok(self.push(out, |o| Step::BroadcastRow { a: a.0, out: o }))
    }

    /// Column-wise mean over rows: NxC -> 1xC. Errors on zero rows.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let m = &self.vals[a.0];
        let n = m.rows();
        if n == 0 {
            return Err(GesrError::Contract("mean_rows over zero rows".to_string()));
        }
        let mut out = DenseMatrix::zeros(1, m.cols());
        for r in 0..n {
            for (acc, v) in out.row_mut(0).iter_mut().zip(m.row(r)) {
                *acc += v;
            }
        }
        out.row_mut(0).iter_mut().for_each(|v| *v /= n as f64);
        Ok(self.push(out, |o| Step::MeanRows { a: a.0, out: o }))
    }

    /// Row-wise sum over columns: NxC -> Nx1.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let m = &self.vals[a.0];
        let mut out = DenseMatrix::zeros(m.rows(), 1);
        for r in 0..m.rows() {
            out.set(r, 0, m.row(r).iter().sum());
        }
        self.push(out, |o| Step::SumCols { a: a.0, out: o })
    }

    /// Sum of every entry: NxC -> 1x1.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let total: f64 = self.vals[a.0].data().iter().sum();
        let out = DenseMatrix::filled(1, 1, total);
        self.push(out, |o| Step::SumAll { a: a.0, out: o })
    }

    /// Mean binary cross-entropy over all entries, computed from logits with
    /// the standard stable form max(x,0) - x*y + ln(1 + e^-|x|).
    pub fn bce_mean(&mut self, logits: Var, labels: &DenseMatrix) -> Result<Var> {
        let x = &self.vals[logits.0];
        if x.dims() != labels.dims() {
            return Err(GesrError::dim(
                "bce_mean",
                format!("logits {:?} vs labels {:?}", x.dims(), labels.dims()),
            ));
        }
        if x.is_empty() {
            return Err(GesrError::Contract("bce_mean over zero entries".to_string()));
        }
        let mut total = 0.0;
        for (&xi, &yi) in x.data().iter().zip(labels.data()) {
            total += xi.max(0.0) - xi * yi + (-xi.abs()).exp().ln_1p();
        }
        let val = DenseMatrix::filled(1, 1, total / x.len() as f64);
        let labels = labels.clone();
        Ok(self.push(val, |out| Step::BceMean {
            logits: logits.0,
            labels,
            out,
        }))
    }

    /// Reverse pass from a scalar loss. Gradients of parameters are
    /// accumulated into the store (adding to whatever is already there, so
    /// several backward calls accumulate a batch gradient).
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if !self.recording {
            return Err(GesrError::Contract(
                "backward on an inference-mode graph".to_string(),
            ));
        }
        let lm = &self.vals[loss.0];
        if lm.dims() != (1, 1) {
            return Err(GesrError::Contract(format!(
                "backward needs a 1x1 loss, got {}x{}",
                lm.rows(),
                lm.cols()
            )));
        }
        let mut grads: Vec<Option<DenseMatrix>> = vec![None; self.vals.len()];
        grads[loss.0] = Some(DenseMatrix::filled(1, 1, 1.0));

        for step in self.steps.iter().rev() {
            self.step_backward(step, &mut grads, store)?;
        }
        Ok(())
    }

    fn step_backward(
        &self,
        step: &Step,
        grads: &mut [Option<DenseMatrix>],
        store: &mut ParamStore,
    ) -> Result<()> {
        // Helper: accumulate `delta` into grads[idx].
        fn acc(grads: &mut [Option<DenseMatrix>], idx: usize, delta: DenseMatrix) -> Result<()> {
            match &mut grads[idx] {
                Some(g) => g.add_assign(&delta),
                slot => {
                    *slot = Some(delta);
                    Ok(())
                }
            }
        }

        match step {
            Step::Param { id, out } => {
                if let Some(g) = &grads[*out] {
                    store.get_mut(*id).grad.add_assign(g)?;
                }
            }
            Step::Gather { id, rows, out } => {
                if let Some(g) = &grads[*out] {
                    let table_grad = &mut store.get_mut(*id).grad;
                    for (i, &r) in rows.iter().enumerate() {
                        for (slot, v) in table_grad.row_mut(r).iter_mut().zip(g.row(i)) {
                            *slot += v;
                        }
                    }
                }
            }
            Step::SelectRows { src, rows, out } => {
                if let Some(g) = grads[*out].clone() {
                    let m = &self.vals[*src];
                    let mut delta = DenseMatrix::zeros(m.rows(), m.cols());
                    for (i, &r) in rows.iter().enumerate() {
                        for (slot, v) in delta.row_mut(r).iter_mut().zip(g.row(i)) {
                            *slot += v;
                        }
                    }
                    acc(grads, *src, delta)?;
                }
            }
            Step::Matmul { a, b, out } => {
                if let Some(g) = grads[*out].clone() {
                    let da = g.matmul_nt(&self.vals[*b])?;
                    let db = self.vals[*a].matmul_tn(&g)?;
                    acc(grads, *a, da)?;
                    acc(grads, *b, db)?;
                }
            }
            Step::MatmulNt { a, b, out } => {
                if let Some(g) = grads[*out].clone() {
                    // out = a b^T  =>  da = g b,  db = g^T a
                    let da = g.matmul(&self.vals[*b])?;
                    let db = g.matmul_tn(&self.vals[*a])?;
                    acc(grads, *a, da)?;
                    acc(grads, *b, db)?;
                }
            }
            Step::Add { a, b, out } => {
                if let Some(g) = grads[*out].clone() {
                    acc(grads, *a, g.clone())?;
                    acc(grads, *b, g)?;
                }
            }
            Step::AddRow { a, row, out } => {
                if let Some(g) = grads[*out].clone() {
                    let mut drow = DenseMatrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (slot, v) in drow.row_mut(0).iter_mut().zip(g.row(r)) {
                            *slot += v;
                        }
                    }
                    acc(grads, *a, g)?;
                    acc(grads, *row, drow)?;
                }
            }
            Step::Mul { a, b, out } => {
                if let Some(g) = grads[*out].clone() {
                    let da = g.hadamard(&self.vals[*b])?;
                    let db = g.hadamard(&self.vals[*a])?;
                    acc(grads, *a, da)?;
                    acc(grads, *b, db)?;
                }
            }
            Step::Scale { a, k, out } => {
                if let Some(g) = &grads[*out] {
                    let da = g.scale(*k);
                    acc(grads, *a, da)?;
                }
            }
            Step::Sigmoid { a, out } => {
                if let Some(g) = &grads[*out] {
                    let s = &self.vals[*out];
                    let mut da = g.clone();
                    for (d, &sv) in da.data_mut().iter_mut().zip(s.data()) {
                        *d *= sv * (1.0 - sv);
                    }
                    acc(grads, *a, da)?;
                }
            }
            Step::Silu { a, out } => {
                if let Some(g) = &grads[*out] {
                    let x = &self.vals[*a];
                    let mut da = g.clone();
                    for (d, &xv) in da.data_mut().iter_mut().zip(x.data()) {
                        let s = sigmoid(xv);
                        *d *= s * (1.0 + xv * (1.0 - s));
                    }
                    acc(grads, *a, da)?;
                }
            }
            Step::Relu { a, out } => {
                if let Some(g) = &grads[*out] {
                    let x = &self.vals[*a];
                    let mut da = g.clone();
                    for (d, &xv) in da.data_mut().iter_mut().zip(x.data()) {
                        if xv <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    acc(grads, *a, da)?;
                }
            }
            Step::SoftmaxRows { a, out } => {
                if let Some(g) = &grads[*out] {
                    // Masked entries have s=0, so the shared formula
                    // s * (g - <g, s>) already yields zero gradient there.
                    let s = &self.vals[*out];
                    let mut da = DenseMatrix::zeros(s.rows(), s.cols());
                    for r in 0..s.rows() {
                        let dot: f64 = g.row(r).iter().zip(s.row(r)).map(|(gv, sv)| gv * sv).sum();
                        for ((d, gv), sv) in da.row_mut(r).iter_mut().zip(g.row(r)).zip(s.row(r)) {
                            *d = sv * (gv - dot);
                        }
                    }
                    acc(grads, *a, da)?;
                }
            }
            Step::LayerNorm {
                a,
                gamma,
                beta,
                stats,
                out,
            } => {
                if let Some(g) = grads[*out].clone() {
                    let x = &self.vals[*a];
                    let d = x.cols() as f64;
                    let gamma_val = store.value(*gamma).clone();
                    let mut da = DenseMatrix::zeros(x.rows(), x.cols());
                    let mut dgamma = DenseMatrix::zeros(1, x.cols());
                    let mut dbeta = DenseMatrix::zeros(1, x.cols());
                    for r in 0..x.rows() {
                        let (mean, inv_std) = stats[r];
                        let row = x.row(r);
                        let grow = g.row(r);
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for c in 0..row.len() {
                            let xhat = (row[c] - mean) * inv_std;
                            let dxhat = grow[c] * gamma_val.get(0, c);
                            m1 += dxhat;
                            m2 += dxhat * xhat;
                            dgamma.row_mut(0)[c] += grow[c] * xhat;
                            dbeta.row_mut(0)[c] += grow[c];
                        }
                        m1 /= d;
                        m2 /= d;
                        for c in 0..row.len() {
                            let xhat = (row[c] - mean) * inv_std;
                            let dxhat = grow[c] * gamma_val.get(0, c);
                            da.row_mut(r)[c] = inv_std * (dxhat - m1 - xhat * m2);
                        }
                    }
                    store.get_mut(*gamma).grad.add_assign(&dgamma)?;
                    store.get_mut(*beta).grad.add_assign(&dbeta)?;
                    acc(grads, *a, da)?;
                }
            }
            Step::ConcatRowsOrCols(parts, out, by_cols) => {
                if let Some(g) = grads[*out].clone() {
                    let mut offset = 0;
                    for &p in parts {
                        let m = &self.vals[p];
                        let mut delta = DenseMatrix::zeros(m.rows(), m.cols());
                        if *by_cols {
                            for r in 0..m.rows() {
                                delta
                                    .row_mut(r)
                                    .copy_from_slice(&g.row(r)[offset..offset + m.cols()]);
                            }
                            offset += m.cols();
                        } else {
                            for r in 0..m.rows() {
                                delta.row_mut(r).copy_from_slice(g.row(offset + r));
                            }
                            offset += m.rows();
                        }
                        acc(grads, p, delta)?;
                    }
                }
            }
            Step::SliceCols { a, start, out } => {
                if let Some(g) = grads[*out].clone() {
                    let m = &self.vals[*a];
                    let mut delta = DenseMatrix::zeros(m.rows(), m.cols());
                    for r in 0..g.rows() {
                        delta.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc(grads, *a, delta)?;
                }
            }
            Step::SliceRows { a, start, out } => {
                if let Some(g) = grads[*out].clone() {
                    let m = &self.vals[*a];
                    let mut delta = DenseMatrix::zeros(m.rows(), m.cols());
                    for r in 0..g.rows() {
                        delta.row_mut(*start + r).copy_from_slice(g.row(r));
                    }
                    acc(grads, *a, delta)?;
                }
            }
            Step::BroadcastRow { a, out } => {
                if let Some(g) = grads[*out].clone() {
                    let mut delta = DenseMatrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (slot, v) in delta.row_mut(0).iter_mut().zip(g.row(r)) {
                            *slot += v;
                        }
                    }
                    acc(grads, *a, delta)?;
                }
            }
            Step::MeanRows { a, out } => {
                if let Some(g) = grads[*out].clone() {
                    let m = &self.vals[*a];
                    let n = m.rows() as f64;
                    let mut delta = DenseMatrix::zeros(m.rows(), m.cols());
                    for r in 0..m.rows() {
                        for (slot, v) in delta.row_mut(r).iter_mut().zip(g.row(0)) {
                            *slot = v / n;
                        }
                    }
                    acc(grads, *a, delta)?;
                }
            }
            Step::SumCols { a, out } => {
                if let Some(g) = grads[*out].clone() {
                    let m = &self.vals[*a];
                    let mut delta = DenseMatrix::zeros(m.rows(), m.cols());
                    for r in 0..m.rows() {
                        let gv = g.get(r, 0);
                        delta.row_mut(r).iter_mut().for_each(|slot| *slot = gv);
                    }
                    acc(grads, *a, delta)?;
                }
            }
            Step::SumAll { a, out } => {
                if let Some(g) = grads[*out].clone() {
                    let m = &self.vals[*a];
                    let delta = DenseMatrix::filled(m.rows(), m.cols(), g.get(0, 0));
                    acc(grads, *a, delta)?;
                }
            }
            Step::BceMean { logits, labels, out } => {
                if let Some(g) = grads[*out].clone() {
                    let x = &self.vals[*logits];
                    let scale = g.get(0, 0) / x.len() as f64;
                    let mut delta = DenseMatrix::zeros(x.rows(), x.cols());
                    for ((d, &xi), &yi) in delta
                        .data_mut()
                        .iter_mut()
                        .zip(x.data())
                        .zip(labels.data())
                    {
                        *d = scale * (sigmoid(xi) - yi);
                    }
                    acc(grads, *logits, delta)?;
                }
            }
        }
        Ok(())
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_forward(m: &DenseMatrix, mask: Option<&BoolMatrix>) -> Result<DenseMatrix> {
    let mut out = DenseMatrix::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        let row = m.row(r);
        let allowed = |c: usize| mask.map_or(true, |mk| mk.get(r, c));
        let mut max = f64::NEG_INFINITY;
        for (c, &v) in row.iter().enumerate() {
            if allowed(c) && v > max {
                max = v;
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(GesrError::Contract(format!(
                "softmax row {r} has no allowed positions"
            )));
        }
        let mut denom = 0.0;
        for (c, &v) in row.iter().enumerate() {
            if allowed(c) {
                let e = (v - max).exp();
                out.set(r, c, e);
                denom += e;
            }
        }
        for c in 0..row.len() {
            if allowed(c) {
                out.set(r, c, out.get(r, c) / denom);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn registration_order_is_deterministic() {
        let mut store = ParamStore::new();
        let a = store.register_zeros("a", 1, 1).unwrap();
        let b = store.register_zeros("b", 2, 2).unwrap();
        assert_eq!(a.index(), 0);
        assert_eq!(b.index(), 1);
        assert_eq!(store.id("b"), Some(b));
        assert_eq!(store.num_scalars(), 5);
    }

    #[test]
    fn duplicate_name_rejected() {
        let mut store = ParamStore::new();
        store.register_zeros("w", 1, 1).unwrap();
        assert!(store.register_zeros("w", 1, 1).is_err());
    }

    #[test]
    fn sum_of_params_has_unit_gradients() {
        let mut store = ParamStore::new();
        let w = store
            .register("w", DenseMatrix::from_vec(2, 3, vec![0.3, -1.0, 2.0, 5.0, 0.0, -0.7]).unwrap())
            .unwrap();
        let mut g = Graph::recording();
        let p = g.param(&store, w);
        let loss = g.sum_all(p);
        assert_eq!(g.scalar(loss).unwrap(), 0.3 - 1.0 + 2.0 + 5.0 + 0.0 - 0.7);
        g.backward(loss, &mut store).unwrap();
        let ones = DenseMatrix::filled(2, 3, 1.0);
        assert!(store.get(w).grad.max_abs_diff(&ones).unwrap() < 1e-10);
    }

    #[test]
    fn quadratic_form_gradient_matches_closed_form() {
        // f(A) = x A x^T for fixed row vector x has df/dA = x^T x.
        let mut store = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let a = store.register_glorot("a", 3, 3, &mut rng).unwrap();
        let xv = DenseMatrix::from_vec(1, 3, vec![0.5, -1.5, 2.0]).unwrap();

        let mut g = Graph::recording();
        let x = g.input(xv.clone());
        let ap = g.param(&store, a);
        let xa = g.matmul(x, ap).unwrap();
        let f = g.matmul_nt(xa, x).unwrap();
        g.backward(f, &mut store).unwrap();

        let want = xv.matmul_tn(&xv).unwrap(); // outer product x^T x
        assert!(store.get(a).grad.max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn param_used_twice_accumulates() {
        // f = sum(w) + sum(w) => grad = 2 everywhere.
        let mut store = ParamStore::new();
        let w = store.register("w", DenseMatrix::filled(2, 2, 0.5)).unwrap();
        let mut g = Graph::recording();
        let p1 = g.param(&store, w);
        let p2 = g.param(&store, w);
        let s1 = g.sum_all(p1);
        let s2 = g.sum_all(p2);
        let loss = g.add(s1, s2).unwrap();
        g.backward(loss, &mut store).unwrap();
        let want = DenseMatrix::filled(2, 2, 2.0);
        assert!(store.get(w).grad.max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn inference_mode_records_no_steps_and_rejects_backward() {
        let mut store = ParamStore::new();
        let w = store.register("w", DenseMatrix::filled(1, 1, 2.0)).unwrap();
        let mut g = Graph::inference();
        let p = g.param(&store, w);
        let s = g.sum_all(p);
        assert_eq!(g.num_steps(), 0);
        assert_eq!(g.scalar(s).unwrap(), 2.0);
        assert!(g.backward(s, &mut store).is_err());
    }

    #[test]
    fn recording_and_inference_produce_identical_values() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let w = store.register_glorot("w", 4, 4, &mut rng).unwrap();
        let gm = store.register_ones("g", 1, 4).unwrap();
        let bm = store.register_zeros("b", 1, 4).unwrap();
        let x = DenseMatrix::from_vec(2, 4, (0..8).map(|i| i as f64 * 0.37 - 1.0).collect()).unwrap();

        let run = |g: &mut Graph, store: &ParamStore| {
            let xi = g.input(x.clone());
            let wp = g.param(store, w);
            let h = g.matmul(xi, wp).unwrap();
            let h = g.silu(h);
            let h = g.layer_norm(store, h, gm, bm).unwrap();
            let h = g.softmax_rows(h).unwrap();
            g.value(h).clone()
        };
        let mut rec = Graph::recording();
        let mut inf = Graph::inference();
        let a = run(&mut rec, &store);
        let b = run(&mut inf, &store);
        assert_eq!(a, b); // bit-identical, not just close
        assert!(rec.num_steps() > 0);
        assert_eq!(inf.num_steps(), 0);
    }

    #[test]
    fn softmax_of_1_2_3_matches_frozen_values() {
        let mut g = Graph::inference();
        let x = g.input(DenseMatrix::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        let s = g.softmax_rows(x).unwrap();
        let want = [
            0.09003057317038046,
            0.24472847105479767,
            0.6652409557748219,
        ];
        for (c, w) in want.iter().enumerate() {
            assert!((g.value(s).get(0, c) - w).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_is_stable_for_large_inputs() {
        let mut g = Graph::inference();
        let x = g.input(DenseMatrix::from_vec(1, 2, vec![1000.0, 0.0]).unwrap());
        let s = g.softmax_rows(x).unwrap();
        assert!(g.value(s).is_finite());
        assert!((g.value(s).get(0, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn masked_softmax_zeroes_blocked_positions_exactly() {
        let mut g = Graph::inference();
        let x = g.input(DenseMatrix::from_vec(2, 3, vec![5.0, 1.0, -2.0, 0.0, 0.0, 0.0]).unwrap());
        let mut mask = BoolMatrix::new(2, 3, true);
        mask.set(0, 0, false);
        mask.set(1, 2, false);
        let s = g.masked_softmax_rows(x, Arc::new(mask)).unwrap();
        let sv = g.value(s);
        assert_eq!(sv.get(0, 0), 0.0);
        assert_eq!(sv.get(1, 2), 0.0);
        assert!((sv.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((sv.row(1).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // Row 1 splits evenly between the two allowed equal scores.
        assert!((sv.get(1, 0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn fully_masked_row_is_a_contract_error() {
        let mut g = Graph::inference();
        let x = g.input(DenseMatrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap());
        let mask = BoolMatrix::new(1, 2, false);
        assert!(g.masked_softmax_rows(x, Arc::new(mask)).is_err());
    }

    #[test]
    fn layer_norm_unit_gain_zero_shift() {
        let mut store = ParamStore::new();
        let gm = store.register_ones("g", 1, 3).unwrap();
        let bm = store.register_zeros("b", 1, 3).unwrap();
        let mut g = Graph::inference();
        let x = g.input(DenseMatrix::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        let y = g.layer_norm(&store, x, gm, bm).unwrap();
        let v = g.value(y);
        // (x - 2) / sqrt(2/3) up to the 1e-6 epsilon.
        assert!((v.get(0, 0) + 1.224744871391589).abs() < 1e-4);
        assert!(v.get(0, 1).abs() < 1e-12);
        assert!((v.get(0, 2) - 1.224744871391589).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_rows_are_standardized_before_scale_shift() {
        let mut store = ParamStore::new();
        let d = 8;
        let gm = store.register_ones("g", 1, d).unwrap();
        let bm = store.register_zeros("b", 1, d).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..3 * d).map(|_| rand::Rng::gen_range(&mut rng, -5.0..5.0)).collect();
        let mut g = Graph::inference();
        let x = g.input(DenseMatrix::from_vec(3, d, data).unwrap());
        let y = g.layer_norm(&store, x, gm, bm).unwrap();
        for r in 0..3 {
            let row = g.value(y).row(r);
            let mean: f64 = row.iter().sum::<f64>() / d as f64;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn activations_match_hand_values() {
        let mut g = Graph::inference();
        let x = g.input(DenseMatrix::from_vec(1, 3, vec![-1.0, 0.0, 1.0]).unwrap());
        let s = g.sigmoid(x);
        assert!((g.value(s).get(0, 1) - 0.5).abs() < 1e-15);
        assert!((g.value(s).get(0, 2) - 0.7310585786300049).abs() < 1e-15);

        let si = g.silu(x);
        assert_eq!(g.value(si).get(0, 1), 0.0);
        assert!((g.value(si).get(0, 2) - 0.7310585786300049).abs() < 1e-15);
        assert!((g.value(si).get(0, 0) + 0.2689414213699951).abs() < 1e-15);

        let r = g.relu(x);
        assert_eq!(g.value(r).get(0, 0), 0.0);
        assert_eq!(g.value(r).get(0, 2), 1.0);
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut g = Graph::inference();
        let a = g.input(DenseMatrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.input(DenseMatrix::from_vec(2, 1, vec![9.0, 8.0]).unwrap());
        let cat = g.concat_cols(&[a, b]).unwrap();
        assert_eq!(g.value(cat).dims(), (2, 3));
        let back = g.slice_cols(cat, 2, 1).unwrap();
        assert_eq!(g.value(back).get(1, 0), 8.0);

        let rcat = g.concat_rows(&[a, a]).unwrap();
        assert_eq!(g.value(rcat).dims(), (4, 2));
        let rback = g.slice_rows(rcat, 2, 2).unwrap();
        assert_eq!(g.value(rback).get(0, 1), 2.0);
    }

    #[test]
    fn bce_mean_hand_case() {
        // logits 0 => per-entry loss ln 2 regardless of label.
        let mut g = Graph::inference();
        let x = g.input(DenseMatrix::zeros(2, 1));
        let labels = DenseMatrix::from_vec(2, 1, vec![1.0, 0.0]).unwrap();
        let l = g.bce_mean(x, &labels).unwrap();
        assert!((g.scalar(l).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn bce_gradient_is_sigmoid_minus_label_over_n() {
        let mut store = ParamStore::new();
        let w = store
            .register("w", DenseMatrix::from_vec(2, 1, vec![0.4, -1.2]).unwrap())
            .unwrap();
        let labels = DenseMatrix::from_vec(2, 1, vec![1.0, 0.0]).unwrap();
        let mut g = Graph::recording();
        let p = g.param(&store, w);
        let l = g.bce_mean(p, &labels).unwrap();
        g.backward(l, &mut store).unwrap();
        let want = DenseMatrix::from_vec(
            2,
            1,
            vec![(sigmoid(0.4) - 1.0) / 2.0, (sigmoid(-1.2) - 0.0) / 2.0],
        )
        .unwrap();
        assert!(store.get(w).grad.max_abs_diff(&want).unwrap() < 1e-15);
    }

    #[test]
    fn gather_accumulates_repeated_rows() {
        let mut store = ParamStore::new();
        let t = store
            .register("t", DenseMatrix::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap())
            .unwrap();
        let mut g = Graph::recording();
        let rowsv = g.gather(&store, t, &[1, 1, 0]).unwrap();
        assert_eq!(g.value(rowsv).row(0), &[3.0, 4.0]);
        let loss = g.sum_all(rowsv);
        g.backward(loss, &mut store).unwrap();
        let want = DenseMatrix::from_vec(3, 2, vec![1.0, 1.0, 2.0, 2.0, 0.0, 0.0]).unwrap();
        assert!(store.get(t).grad.max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn gather_out_of_range_is_input_error() {
        let mut store = ParamStore::new();
        let t = store.register_zeros("t", 3, 2).unwrap();
        let mut g = Graph::recording();
        assert!(matches!(
            g.gather(&store, t, &[3]),
            Err(GesrError::Input(_))
        ));
    }

    proptest! {
        #[test]
        fn softmax_rows_are_stochastic(rows in 1usize..5, cols in 1usize..6, seed in 0u64..1000) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..rows * cols)
                .map(|_| rand::Rng::gen_range(&mut rng, -50.0..50.0))
                .collect();
            let mut g = Graph::inference();
            let x = g.input(DenseMatrix::from_vec(rows, cols, data).unwrap());
            let s = g.softmax_rows(x).unwrap();
            for r in 0..rows {
                let row = g.value(s).row(r);
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }

        #[test]
        fn softmax_is_shift_invariant(cols in 1usize..6, shift in -100.0f64..100.0, seed in 0u64..1000) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..cols).map(|_| rand::Rng::gen_range(&mut rng, -5.0..5.0)).collect();
            let shifted: Vec<f64> = data.iter().map(|v| v + shift).collect();
            let mut g = Graph::inference();
            let a = g.input(DenseMatrix::from_vec(1, cols, data).unwrap());
            let b = g.input(DenseMatrix::from_vec(1, cols, shifted).unwrap());
            let sa = g.softmax_rows(a).unwrap();
            let sb = g.softmax_rows(b).unwrap();
            let diff = g.value(sa).max_abs_diff(g.value(sb)).unwrap();
            prop_assert!(diff < 1e-9);
        }
    }
}
