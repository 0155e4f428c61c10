use crate::error::{Error, Result};

use super::{Gradients, Matrix, ParamStore};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Local vector-Jacobian product of one recorded operation.
///
/// Receives the operation's input values, its output value and the gradient
/// flowing into the output; returns one gradient per input, in input order.
pub trait Backward {
    fn backward(&self, inputs: &[&Matrix], output: &Matrix, grad: &Matrix) -> Vec<Matrix>;
}

impl<F> Backward for F
where
    F: Fn(&[&Matrix], &Matrix, &Matrix) -> Vec<Matrix>,
{
    fn backward(&self, inputs: &[&Matrix], output: &Matrix, grad: &Matrix) -> Vec<Matrix> {
        self(inputs, output, grad)
    }
}

struct Node {
    value: Matrix,
    inputs: Vec<Var>,
    grad_fn: Option<Box<dyn Backward>>,
    param: Option<usize>,
}

/// Parameter leaves created by [`Tape::bind`], in store order.
#[derive(Clone, Debug)]
pub struct Bindings {
    vars: Vec<Var>,
    names: Vec<String>,
}

impl Bindings {
    /// Pairs parameter names with leaves, e.g. those handed to a
    /// finite-difference loss closure.
    pub fn new(names: Vec<String>, vars: Vec<Var>) -> Result<Self> {
        if names.len() != vars.len() {
            return Err(Error::dim("bindings", names.len(), vars.len()));
        }
        Ok(Self { vars, names })
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::InvalidArgument(format!("parameter {name} is not bound")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Records a forward computation so gradients can be pulled back through it.
///
/// Nodes are appended in evaluation order, so a reverse sweep over the node
/// list is a valid topological order for backpropagation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_shapes: Vec<(usize, usize)>,
}

pub const LOG_FLOOR: f64 = 1e-12;

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

    /// Records a constant.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Vec::new(), None, None)
    }

    /// Records every parameter of `store` as a differentiable leaf.
    pub fn bind(&mut self, store: &ParamStore) -> Bindings {
        self.param_shapes = store.shapes();
        let mut vars = Vec::with_capacity(store.len());
        let mut names = Vec::with_capacity(store.len());
        for i in 0..store.len() {
            vars.push(self.push(store.value(i).clone(), Vec::new(), None, Some(i)));
            names.push(store.name(i).to_string());
        }
        Bindings { vars, names }
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    /// Records the result of a custom operation.
    pub fn record(&mut self, inputs: &[Var], value: Matrix, grad_fn: Box<dyn Backward>) -> Var {
        self.push(value, inputs.to_vec(), Some(grad_fn), None)
    }

    fn push(
        &mut self,
        value: Matrix,
        inputs: Vec<Var>,
        grad_fn: Option<Box<dyn Backward>>,
        param: Option<usize>,
    ) -> Var {
        self.nodes.push(Node {
            value,
            inputs,
            grad_fn,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// Pulls the gradient of the scalar `loss` back to every bound parameter.
    ///
    /// Parameters that do not influence `loss` receive zero gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::State(
                "backward called on a value that was never recorded".into(),
            ));
        }
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.shape() != (1, 1) {
            return Err(Error::dim("backward loss", "1x1", loss_value.shape_str()));
        }

        let mut out: Vec<Matrix> = self
            .param_shapes
            .iter()
            .map(|&(r, c)| Matrix::zeros(r, c))
            .collect();
        let mut grads: Vec<Option<Matrix>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if let Some(p) = node.param {
                out[p].add_assign(&grad);
            }
            let Some(grad_fn) = &node.grad_fn else {
                continue;
            };
            let inputs: Vec<&Matrix> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let input_grads = grad_fn.backward(&inputs, &node.value, &grad);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (var, g) in node.inputs.iter().zip(input_grads) {
                debug_assert_eq!(g.shape(), self.nodes[var.0].value.shape());
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients::from_tensors(out))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.record(
            &[a, b],
            value,
            Box::new(|inp: &[&Matrix], _: &Matrix, g: &Matrix| {
                let ga = g
                    .matmul(&inp[1].transpose())
                    .expect("shape checked in forward");
                let gb = inp[0]
                    .transpose()
                    .matmul(g)
                    .expect("shape checked in forward");
                vec![ga, gb]
            }),
        ))
    }

    /// Adds a `1 × cols` bias row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        if b.rows() != 1 || b.cols() != x.cols() {
            return Err(Error::dim(
                "add_bias",
                format!("1x{}", x.cols()),
                b.shape_str(),
            ));
        }
        let value = Matrix::from_fn(x.rows(), x.cols(), |i, j| x.get(i, j) + b.get(0, j));
        Ok(self.record(
            &[a, bias],
            value,
            Box::new(|_: &[&Matrix], _: &Matrix, g: &Matrix| {
                let gb =
                    Matrix::from_fn(1, g.cols(), |_, j| (0..g.rows()).map(|i| g.get(i, j)).sum());
                vec![g.clone(), gb]
            }),
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        self.record(
            &[a],
            value,
            Box::new(|inp: &[&Matrix], _: &Matrix, g: &Matrix| {
                vec![g.zip_map(inp[0], |g, x| if x > 0.0 { g } else { 0.0 })]
            }),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.record(
            &[a],
            value,
            Box::new(|_: &[&Matrix], _: &Matrix, g: &Matrix| vec![g.transpose()]),
        )
    }

    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.rows()) {
            return Err(Error::dim(
                "select_rows",
                format!("index < {}", x.rows()),
                bad,
            ));
        }
        let value = x.select_rows(indices);
        let indices = indices.to_vec();
        Ok(self.record(
            &[a],
            value,
            Box::new(move |inp: &[&Matrix], _: &Matrix, g: &Matrix| {
                let mut gx = Matrix::zeros(inp[0].rows(), inp[0].cols());
                for (k, &i) in indices.iter().enumerate() {
                    for j in 0..g.cols() {
                        let v = gx.get(i, j) + g.get(k, j);
                        gx.set(i, j, v);
                    }
                }
                vec![gx]
            }),
        ))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let mut norms = Vec::with_capacity(x.rows());
        for (i, r) in x.row_iter().enumerate() {
            let n = super::matrix::dot(r, r).sqrt();
            if n <= 0.0 {
                return Err(Error::DegenerateFeature { row: i });
            }
            norms.push(n);
        }
        let value = Matrix::from_fn(x.rows(), x.cols(), |i, j| x.get(i, j) / norms[i]);
        Ok(self.record(
            &[a],
            value,
            Box::new(move |_: &[&Matrix], y: &Matrix, g: &Matrix| {
                let mut gx = Matrix::zeros(y.rows(), y.cols());
                for (i, norm) in norms.iter().enumerate() {
                    let proj = super::matrix::dot(y.row(i), g.row(i));
                    for j in 0..y.cols() {
                        gx.set(i, j, (g.get(i, j) - y.get(i, j) * proj) / norm);
                    }
                }
                vec![gx]
            }),
        ))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        self.record(
            &[a],
            value,
            Box::new(|_: &[&Matrix], p: &Matrix, g: &Matrix| {
                let mut gx = Matrix::zeros(p.rows(), p.cols());
                for i in 0..p.rows() {
                    let inner = super::matrix::dot(p.row(i), g.row(i));
                    for j in 0..p.cols() {
                        gx.set(i, j, p.get(i, j) * (g.get(i, j) - inner));
                    }
                }
                vec![gx]
            }),
        )
    }

    /// Natural log with entries floored at [`LOG_FLOOR`].
    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(LOG_FLOOR).ln());
        self.record(
            &[a],
            value,
            Box::new(|inp: &[&Matrix], _: &Matrix, g: &Matrix| {
                vec![g.zip_map(inp[0], |g, x| if x >= LOG_FLOOR { g / x } else { 0.0 })]
            }),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.record(
            &[a, b],
            value,
            Box::new(|_: &[&Matrix], _: &Matrix, g: &Matrix| vec![g.clone(), g.clone()]),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.record(
            &[a, b],
            value,
            Box::new(|_: &[&Matrix], _: &Matrix, g: &Matrix| vec![g.clone(), g.map(|v| -v)]),
        ))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.record(
            &[a, b],
            value,
            Box::new(|inp: &[&Matrix], _: &Matrix, g: &Matrix| {
                vec![
                    g.zip_map(inp[1], |g, y| g * y),
                    g.zip_map(inp[0], |g, x| g * x),
                ]
            }),
        ))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|v| v * factor);
        self.record(
            &[a],
            value,
            Box::new(move |_: &[&Matrix], _: &Matrix, g: &Matrix| vec![g.map(|v| v * factor)]),
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        self.record(
            &[a],
            value,
            Box::new(|inp: &[&Matrix], _: &Matrix, g: &Matrix| {
                vec![Matrix::filled(inp[0].rows(), inp[0].cols(), g.get(0, 0))]
            }),
        )
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::Empty("mean of empty matrix".into()));
        }
        let s = self.sum(a);
        Ok(self.scale(s, 1.0 / n as f64))
    }

    fn check_same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::dim(op, x.shape_str(), y.shape_str()));
        }
        Ok(())
    }
}

/// Row-wise softmax with per-row max subtraction.
pub(crate) fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = Vec::with_capacity(x.len());
    for r in x.row_iter() {
        let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut total = 0.0;
        for &v in r {
            let e = (v - max).exp();
            total += e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v /= total;
        }
    }
    Matrix::from_vec_unchecked(x.rows(), x.cols(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Matrix::scalar(v)).unwrap();
        s
    }

    #[test]
    fn gradient_of_linear_sum_is_one() {
        let store = one_param(3.0);
        let mut tape = Tape::new();
        let b = tape.bind(&store);
        let loss = tape.sum(b.vars()[0]);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(0).item().unwrap(), 1.0);
    }

    #[test]
    fn gradient_of_square_is_six_at_three() {
        let store = one_param(3.0);
        let mut tape = Tape::new();
        let w = tape.bind(&store).get("w").unwrap();
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(0).item().unwrap(), 6.0);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let store = one_param(3.0);
        let mut tape = Tape::new();
        tape.bind(&store);
        let c = tape.constant(Matrix::scalar(5.0));
        let loss = tape.sum(c);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(0).item().unwrap(), 0.0);
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn backward_before_forward_is_a_state_error() {
        let mut recorded = Tape::new();
        let v = recorded.constant(Matrix::scalar(1.0));
        let empty = Tape::new();
        assert!(matches!(empty.backward(v), Err(Error::State(_))));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let v = tape.constant(Matrix::zeros(2, 2));
        assert!(matches!(tape.backward(v), Err(Error::Dimension { .. })));
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let x = Matrix::from_rows(&[[1000.0, 1000.0], [0.0, 0.0]]).unwrap();
        let p = softmax_rows(&x);
        assert_eq!(p.data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn normalize_rows_rejects_zero_rows() {
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap());
        assert!(matches!(
            tape.normalize_rows(x),
            Err(Error::DegenerateFeature { row: 1 })
        ));
    }
}
