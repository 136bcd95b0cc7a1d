use std::sync::Arc;

use super::kernels::{self, log_softmax_row, softmax_row};
use super::mlp::Activation;
use super::{ParamId, ParameterSet, Tensor};
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// What `backward` does with the existing gradient slots.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GradMode {
    /// Zero every slot, then write the new gradients.
    #[default]
    Overwrite,
    /// Add to whatever the slots already hold.
    Accumulate,
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param(ParamId),
    /// `x W^T + b` with `W` stored `[out, in]`.
    Affine {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Activation {
        input: Var,
        kind: Activation,
    },
    Softmax {
        input: Var,
        temperature: f64,
    },
    LogSoftmax {
        input: Var,
        temperature: f64,
    },
    SumRows(Var),
    MeanRows(Var),
    /// `ln(max(x, floor))`; zero gradient below the floor.
    FlooredLog {
        input: Var,
        floor: f64,
    },
    CrossEntropy {
        log_probs: Var,
        target: Vec<f64>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Mean(Vec<Var>),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Arc<Tensor>,
    requires_grad: bool,
}

/// Append-only record of a computation.
///
/// Nodes can only reference earlier nodes, so the graph is acyclic and its
/// creation order is a topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.push_shared(op, Arc::new(value), requires_grad)
    }

    fn push_shared(&mut self, op: Op, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, value, false)
    }

    pub fn param(&mut self, params: &ParameterSet, id: ParamId) -> Var {
        self.push_shared(Op::Param(id), params.shared_value(id), true)
    }

    pub fn affine(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let (n, inputs) = (x.rows(), x.cols());
        if w.shape().len() != 2 || w.cols() != inputs {
            return Err(Error::ShapeMismatch {
                context: "affine weight".into(),
                expected: vec![w.rows(), inputs],
                actual: w.shape().to_vec(),
            });
        }
        let outputs = w.rows();
        if b.len() != outputs {
            return Err(Error::ShapeMismatch {
                context: "affine bias".into(),
                expected: vec![outputs],
                actual: b.shape().to_vec(),
            });
        }
        let (xd, wd, bd) = (x.data(), w.data(), b.data());
        let mut out = Vec::with_capacity(n * outputs);
        for row in xd.chunks_exact(inputs) {
            for (o, w_row) in wd.chunks_exact(inputs).enumerate() {
                let dot: f64 = row.iter().zip(w_row).map(|(a, b)| a * b).sum();
                out.push(dot + bd[o]);
            }
        }
        let value = Tensor::from_parts_unchecked(vec![n, outputs], out);
        let rg = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            Op::Affine {
                input,
                weight,
                bias,
            },
            value,
            rg,
        ))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        let value = self.value(input).map(|v| kind.apply(v));
        let rg = self.needs(input);
        self.push(Op::Activation { input, kind }, value, rg)
    }

    /// Row-wise `softmax(x / T)`.
    pub fn softmax(&mut self, input: Var, temperature: f64) -> Result<Var> {
        kernels::validate_temperature(temperature)?;
        let x = self.value(input);
        let mut out = vec![0.0; x.len()];
        for (src, dst) in x
            .data()
            .chunks_exact(x.cols())
            .zip(out.chunks_exact_mut(x.cols()))
        {
            softmax_row(src, temperature, dst);
        }
        let value = Tensor::from_parts_unchecked(x.shape().to_vec(), out);
        let rg = self.needs(input);
        Ok(self.push(Op::Softmax { input, temperature }, value, rg))
    }

    /// Row-wise `log softmax(x / T)`.
    pub fn log_softmax(&mut self, input: Var, temperature: f64) -> Result<Var> {
        kernels::validate_temperature(temperature)?;
        let x = self.value(input);
        let mut out = vec![0.0; x.len()];
        for (src, dst) in x
            .data()
            .chunks_exact(x.cols())
            .zip(out.chunks_exact_mut(x.cols()))
        {
            log_softmax_row(src, temperature, dst);
        }
        let value = Tensor::from_parts_unchecked(x.shape().to_vec(), out);
        let rg = self.needs(input);
        Ok(self.push(Op::LogSoftmax { input, temperature }, value, rg))
    }

    /// Column sums, giving a `1 x cols` row.
    pub fn sum_rows(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let mut out = vec![0.0; x.cols()];
        for row in x.data().chunks_exact(x.cols()) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let value = Tensor::from_parts_unchecked(vec![1, out.len()], out);
        let rg = self.needs(input);
        self.push(Op::SumRows(input), value, rg)
    }

    pub fn mean_rows(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let n = x.rows() as f64;
        let mut out = vec![0.0; x.cols()];
        for row in x.data().chunks_exact(x.cols()) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= n;
        }
        let value = Tensor::from_parts_unchecked(vec![1, out.len()], out);
        let rg = self.needs(input);
        self.push(Op::MeanRows(input), value, rg)
    }

    pub fn floored_log(&mut self, input: Var, floor: f64) -> Var {
        let value = self.value(input).map(|v| v.max(floor).ln());
        let rg = self.needs(input);
        self.push(Op::FlooredLog { input, floor }, value, rg)
    }

    /// Scalar `-sum_c target_c * log_probs_c`; `target` must be one-hot.
    pub fn cross_entropy(&mut self, log_probs: Var, target: &[f64]) -> Result<Var> {
        let loss = kernels::cross_entropy(target, self.value(log_probs).data())?;
        let rg = self.needs(log_probs);
        Ok(self.push(
            Op::CrossEntropy {
                log_probs,
                target: target.to_vec(),
            },
            Tensor::scalar(loss),
            rg,
        ))
    }

    fn same_shape(&self, a: Var, b: Var, context: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch {
                context: context.into(),
                expected: self.value(a).shape().to_vec(),
                actual: self.value(b).shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), value, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::from_parts_unchecked(self.value(a).shape().to_vec(), data);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), value, rg))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let value = self.value(input).map(|v| v * factor);
        let rg = self.needs(input);
        self.push(Op::Scale(input, factor), value, rg)
    }

    /// Elementwise mean of equally shaped nodes.
    pub fn mean(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::InvalidConfig("mean of zero nodes".into()))?;
        let mut value = self.value(first).clone();
        for &v in &inputs[1..] {
            self.same_shape(first, v, "mean")?;
            value.add_assign(self.value(v));
        }
        let k = inputs.len() as f64;
        let value = value.map(|v| v / k);
        let rg = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(Op::Mean(inputs.to_vec()), value, rg))
    }

    /// Reverse sweep from a scalar `loss`, writing `d loss / d p` into the
    /// gradient slot of every parameter reached. Slots are zeroed first.
    pub fn backward(&self, loss: Var, params: &mut ParameterSet) -> Result<()> {
        self.backward_with(loss, params, GradMode::Overwrite)
    }

    pub fn backward_with(
        &self,
        loss: Var,
        params: &mut ParameterSet,
        mode: GradMode,
    ) -> Result<()> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        if mode == GradMode::Overwrite {
            params.zero_grads();
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::from_parts_unchecked(
            loss_value.shape().to_vec(),
            vec![1.0],
        ));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    if !params.contains(*id) || params.value(*id).shape() != g.shape() {
                        return Err(Error::ShapeMismatch {
                            context: format!("gradient slot of parameter {}", id.0),
                            expected: g.shape().to_vec(),
                            actual: if params.contains(*id) {
                                params.value(*id).shape().to_vec()
                            } else {
                                vec![]
                            },
                        });
                    }
                    params.grad_mut(*id).add_assign(&g);
                }
                Op::Affine {
                    input,
                    weight,
                    bias,
                } => {
                    let x = self.value(*input);
                    let w = self.value(*weight);
                    let (inputs, outputs) = (x.cols(), w.rows());
                    let gd = g.data();
                    if self.needs(*input) {
                        let mut dx = vec![0.0; x.len()];
                        for (g_row, dx_row) in
                            gd.chunks_exact(outputs).zip(dx.chunks_exact_mut(inputs))
                        {
                            for (&go, w_row) in g_row.iter().zip(w.data().chunks_exact(inputs)) {
                                if go != 0.0 {
                                    for (d, wv) in dx_row.iter_mut().zip(w_row) {
                                        *d += go * wv;
                                    }
                                }
                            }
                        }
                        accumulate(
                            &mut grads,
                            *input,
                            Tensor::from_parts_unchecked(x.shape().to_vec(), dx),
                        );
                    }
                    if self.needs(*weight) {
                        let mut dw = vec![0.0; w.len()];
                        for (g_row, x_row) in
                            gd.chunks_exact(outputs).zip(x.data().chunks_exact(inputs))
                        {
                            for (&go, dw_row) in g_row.iter().zip(dw.chunks_exact_mut(inputs)) {
                                if go != 0.0 {
                                    for (d, xv) in dw_row.iter_mut().zip(x_row) {
                                        *d += go * xv;
                                    }
                                }
                            }
                        }
                        accumulate(
                            &mut grads,
                            *weight,
                            Tensor::from_parts_unchecked(w.shape().to_vec(), dw),
                        );
                    }
                    if self.needs(*bias) {
                        let mut db = vec![0.0; outputs];
                        for g_row in gd.chunks_exact(outputs) {
                            for (d, go) in db.iter_mut().zip(g_row) {
                                *d += go;
                            }
                        }
                        let shape = self.value(*bias).shape().to_vec();
                        accumulate(&mut grads, *bias, Tensor::from_parts_unchecked(shape, db));
                    }
                }
                Op::Activation { input, kind } => {
                    let x = self.value(*input);
                    let y = &node.value;
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data().iter().zip(y.data()))
                        .map(|(&gv, (&xv, &yv))| gv * kind.derivative(xv, yv))
                        .collect();
                    accumulate(
                        &mut grads,
                        *input,
                        Tensor::from_parts_unchecked(x.shape().to_vec(), data),
                    );
                }
                Op::Softmax { input, temperature } => {
                    let y = &node.value;
                    let cols = y.cols();
                    let mut dz = vec![0.0; y.len()];
                    for ((g_row, y_row), d_row) in g
                        .data()
                        .chunks_exact(cols)
                        .zip(y.data().chunks_exact(cols))
                        .zip(dz.chunks_exact_mut(cols))
                    {
                        let dot: f64 = g_row.iter().zip(y_row).map(|(a, b)| a * b).sum();
                        for ((d, gv), yv) in d_row.iter_mut().zip(g_row).zip(y_row) {
                            *d = yv * (gv - dot) / temperature;
                        }
                    }
                    accumulate(
                        &mut grads,
                        *input,
                        Tensor::from_parts_unchecked(y.shape().to_vec(), dz),
                    );
                }
                Op::LogSoftmax { input, temperature } => {
                    let y = &node.value;
                    let cols = y.cols();
                    let mut dz = vec![0.0; y.len()];
                    for ((g_row, y_row), d_row) in g
                        .data()
                        .chunks_exact(cols)
                        .zip(y.data().chunks_exact(cols))
                        .zip(dz.chunks_exact_mut(cols))
                    {
                        let total: f64 = g_row.iter().sum();
                        for ((d, gv), yv) in d_row.iter_mut().zip(g_row).zip(y_row) {
                            *d = (gv - yv.exp() * total) / temperature;
                        }
                    }
                    accumulate(
                        &mut grads,
                        *input,
                        Tensor::from_parts_unchecked(y.shape().to_vec(), dz),
                    );
                }
                Op::SumRows(input) | Op::MeanRows(input) => {
                    let x = self.value(*input);
                    let factor = match node.op {
                        Op::MeanRows(_) => 1.0 / x.rows() as f64,
                        _ => 1.0,
                    };
                    let mut dx = Vec::with_capacity(x.len());
                    for _ in 0..x.rows() {
                        dx.extend(g.data().iter().map(|v| v * factor));
                    }
                    accumulate(
                        &mut grads,
                        *input,
                        Tensor::from_parts_unchecked(x.shape().to_vec(), dx),
                    );
                }
                Op::FlooredLog { input, floor } => {
                    let x = self.value(*input);
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(&gv, &xv)| if xv > *floor { gv / xv } else { 0.0 })
                        .collect();
                    accumulate(
                        &mut grads,
                        *input,
                        Tensor::from_parts_unchecked(x.shape().to_vec(), data),
                    );
                }
                Op::CrossEntropy { log_probs, target } => {
                    let gv = g.data()[0];
                    let shape = self.value(*log_probs).shape().to_vec();
                    let data = target.iter().map(|t| -gv * t).collect();
                    accumulate(
                        &mut grads,
                        *log_probs,
                        Tensor::from_parts_unchecked(shape, data),
                    );
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    let gb = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    accumulate(
                        &mut grads,
                        *a,
                        Tensor::from_parts_unchecked(g.shape().to_vec(), ga),
                    );
                    accumulate(
                        &mut grads,
                        *b,
                        Tensor::from_parts_unchecked(g.shape().to_vec(), gb),
                    );
                }
                Op::Scale(input, factor) => {
                    accumulate(&mut grads, *input, g.map(|v| v * factor));
                }
                Op::Mean(inputs) => {
                    let share = g.map(|v| v / inputs.len() as f64);
                    for &v in inputs {
                        accumulate(&mut grads, v, share.clone());
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
