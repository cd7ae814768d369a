//! Matrix-level reverse-mode differentiation.
//!
//! Each primitive records its output and the handles it consumed. `backward`
//! walks the record from the newest node to the oldest and accumulates
//! vector-Jacobian products into every node that requires a gradient.
//! A parameter used twice (for example a shared classifier) receives the sum
//! of both paths' contributions in one accumulator.

use super::matrix::{dot, Matrix};
use super::ops;
use super::KernelError;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Param,
    Constant,
    ConvRelu {
        input: Var,
        kernel: Var,
        bias: Var,
    },
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    SelectRow(Var, usize),
    Mask(Var, Matrix),
    WeightedMean {
        weights: Var,
        x: Var,
        eps: f64,
    },
    Nll {
        probs: Var,
        targets: Vec<usize>,
        floor: f64,
    },
    Add(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    DropLastColumn(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive ops for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    visited: Vec<usize>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Matrix> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Takes the gradient for `var`, or a zero matrix of `shape` if nothing flowed into it.
    pub fn take_or_zeros(&mut self, var: Var, shape: (usize, usize)) -> Matrix {
        self.grads
            .get_mut(var.0)
            .and_then(Option::take)
            .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }

    /// Node indices in the order the backward pass processed them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
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

    pub fn value(&self, var: Var) -> &Matrix {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Matrix, op: Op, parents: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Param => true,
            Op::Constant => false,
            _ => parents.iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Param, &[])
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant, &[])
    }

    pub fn conv1d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var, KernelError> {
        let out = ops::conv1d(self.value(input), self.value(kernel), self.value(bias))?;
        Ok(self.push(out, Op::ConvRelu { input, kernel, bias }, &[input, kernel, bias]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let out = self.value(a).matmul_bt(self.value(b))?;
        Ok(self.push(out, Op::MatMulBt(a, b), &[a, b]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = ops::sigmoid(self.value(x));
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = ops::softmax_rows(self.value(x));
        self.push(out, Op::SoftmaxRows(x), &[x])
    }

    pub fn select_row(&mut self, x: Var, row: usize) -> Result<Var, KernelError> {
        let src = self.value(x);
        if row >= src.rows() {
            return Err(KernelError::Shape {
                op: "select_row",
                detail: format!("row {row} of {}", src.rows()),
            });
        }
        let out = Matrix::row_vector(src.row(row));
        Ok(self.push(out, Op::SelectRow(x, row), &[x]))
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mask(&mut self, x: Var, mask: Matrix) -> Result<Var, KernelError> {
        let out = self.value(x).zip_map(&mask, |a, m| a * m)?;
        Ok(self.push(out, Op::Mask(x, mask), &[x]))
    }

    pub fn weighted_mean(&mut self, weights: Var, x: Var, eps: f64) -> Result<Var, KernelError> {
        let out = ops::weighted_mean(self.value(weights), self.value(x), eps)?;
        Ok(self.push(out, Op::WeightedMean { weights, x, eps }, &[weights, x]))
    }

    /// Summed negative log-likelihood of `targets` under row distributions `probs`.
    pub fn nll(&mut self, probs: Var, targets: &[usize], floor: f64) -> Result<Var, KernelError> {
        let loss = ops::nll_rows(self.value(probs), targets, floor)?;
        Ok(self.push(
            Matrix::filled(1, 1, loss),
            Op::Nll {
                probs,
                targets: targets.to_vec(),
                floor,
            },
            &[probs],
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).scale(factor);
        self.push(out, Op::Scale(x, factor), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Matrix::filled(1, 1, self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    pub fn drop_last_column(&mut self, x: Var) -> Result<Var, KernelError> {
        let src = self.value(x);
        if src.cols() == 0 {
            return Err(KernelError::Shape {
                op: "drop_last_column",
                detail: "no columns".into(),
            });
        }
        let out = src.slice_cols(0, src.cols() - 1);
        Ok(self.push(out, Op::DropLastColumn(x), &[x]))
    }

    pub fn backward(&self, root: Var) -> Result<Gradients, KernelError> {
        self.backward_with(root, 1.0)
    }

    /// Reverse pass from a scalar `root`, seeding its gradient with `seed`.
    pub fn backward_with(&self, root: Var, seed: f64) -> Result<Gradients, KernelError> {
        if root.0 >= self.nodes.len() {
            return Err(KernelError::State(format!(
                "node {} not recorded (tape holds {} nodes)",
                root.0,
                self.nodes.len()
            )));
        }
        if self.nodes[root.0].value.shape() != (1, 1) {
            return Err(KernelError::Shape {
                op: "backward",
                detail: "root must be a scalar".into(),
            });
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::filled(1, 1, seed));
        let mut visited = Vec::new();

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            visited.push(idx);
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, visited })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], var: Var, g: Matrix) -> Result<(), KernelError> {
        if !self.nodes[var.0].requires_grad {
            return Ok(());
        }
        match &mut grads[var.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn wants(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<(), KernelError> {
        match &node.op {
            Op::Param | Op::Constant => {}
            Op::ConvRelu { input, kernel, bias } => {
                let pre = g.zip_map(&node.value, |gv, out| if out > 0.0 { gv } else { 0.0 })?;
                let x = self.value(*input);
                let w = self.value(*kernel);
                let (len, din) = x.shape();
                let d = w.cols();
                if self.wants(*bias) {
                    let mut gb = Matrix::zeros(1, d);
                    for t in 0..len {
                        for (acc, v) in gb.row_mut(0).iter_mut().zip(pre.row(t)) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *bias, gb)?;
                }
                if self.wants(*kernel) {
                    let mut gk = Matrix::zeros(w.rows(), d);
                    for k in 0..ops::CONV_WIDTH {
                        for t in 0..len {
                            let src = t as isize + k as isize - 1;
                            if src < 0 || src >= len as isize {
                                continue;
                            }
                            let xr = x.row(src as usize);
                            let gr = pre.row(t);
                            for (i, &xi) in xr.iter().enumerate() {
                                if xi == 0.0 {
                                    continue;
                                }
                                for (acc, gv) in gk.row_mut(k * din + i).iter_mut().zip(gr) {
                                    *acc += xi * gv;
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *kernel, gk)?;
                }
                if self.wants(*input) {
                    let mut gx = Matrix::zeros(len, din);
                    for t in 0..len {
                        let gr = pre.row(t);
                        for k in 0..ops::CONV_WIDTH {
                            let src = t as isize + k as isize - 1;
                            if src < 0 || src >= len as isize {
                                continue;
                            }
                            let gx_row = gx.row_mut(src as usize);
                            for (i, acc) in gx_row.iter_mut().enumerate() {
                                *acc += dot(gr, w.row(k * din + i));
                            }
                        }
                    }
                    self.accumulate(grads, *input, gx)?;
                }
            }
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    let ga = g.matmul_bt(self.value(*b))?;
                    self.accumulate(grads, *a, ga)?;
                }
                if self.wants(*b) {
                    let gb = self.value(*a).matmul_at(g)?;
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::MatMulBt(a, b) => {
                if self.wants(*a) {
                    let ga = g.matmul(self.value(*b))?;
                    self.accumulate(grads, *a, ga)?;
                }
                if self.wants(*b) {
                    let gb = g.matmul_at(self.value(*a))?;
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::Sigmoid(x) => {
                let gx = g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y))?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let mut gx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let inner = dot(g.row(r), y.row(r));
                    for ((o, &gv), &yv) in gx.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = yv * (gv - inner);
                    }
                }
                self.accumulate(grads, *x, gx)?;
            }
            Op::SelectRow(x, row) => {
                let src = self.value(*x);
                let mut gx = Matrix::zeros(src.rows(), src.cols());
                gx.row_mut(*row).copy_from_slice(g.row(0));
                self.accumulate(grads, *x, gx)?;
            }
            Op::Mask(x, mask) => {
                let gx = g.zip_map(mask, |gv, m| gv * m)?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::WeightedMean { weights, x, eps } => {
                let w = self.value(*weights);
                let xs = self.value(*x);
                let denom = w.sum() + eps;
                if self.wants(*x) {
                    let mut gx = Matrix::zeros(xs.rows(), xs.cols());
                    for j in 0..xs.rows() {
                        let c = w.get(0, j) / denom;
                        for (o, gv) in gx.row_mut(j).iter_mut().zip(g.row(0)) {
                            *o = c * gv;
                        }
                    }
                    self.accumulate(grads, *x, gx)?;
                }
                if self.wants(*weights) {
                    let shared = dot(node.value.row(0), g.row(0));
                    let mut gw = Matrix::zeros(1, xs.rows());
                    for j in 0..xs.rows() {
                        gw.set(0, j, (dot(xs.row(j), g.row(0)) - shared) / denom);
                    }
                    self.accumulate(grads, *weights, gw)?;
                }
            }
            Op::Nll { probs, targets, floor } => {
                let p = self.value(*probs);
                let upstream = g.get(0, 0);
                let mut gp = Matrix::zeros(p.rows(), p.cols());
                for (r, &t) in targets.iter().enumerate() {
                    let v = p.get(r, t);
                    if v > *floor {
                        gp.set(r, t, -upstream / v);
                    }
                }
                self.accumulate(grads, *probs, gp)?;
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Scale(x, factor) => {
                self.accumulate(grads, *x, g.scale(*factor))?;
            }
            Op::Sum(x) => {
                let src = self.value(*x);
                self.accumulate(grads, *x, Matrix::filled(src.rows(), src.cols(), g.get(0, 0)))?;
            }
            Op::DropLastColumn(x) => {
                let src = self.value(*x);
                let mut gx = Matrix::zeros(src.rows(), src.cols());
                for r in 0..src.rows() {
                    gx.row_mut(r)[..g.cols()].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *x, gx)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    /// Central differences of `f` around each entry of `params[which]`.
    fn finite_diff(params: &[Matrix], which: usize, f: &dyn Fn(&[Matrix]) -> f64) -> Matrix {
        let h = 1e-5;
        let mut out = Matrix::zeros(params[which].rows(), params[which].cols());
        for k in 0..params[which].data().len() {
            let mut plus = params.to_vec();
            plus[which].data_mut()[k] += h;
            let mut minus = params.to_vec();
            minus[which].data_mut()[k] -= h;
            out.data_mut()[k] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        out
    }

    fn max_rel_err(a: &Matrix, b: &Matrix) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    #[test]
    fn sum_of_params_gives_ones() {
        let mut tape = Tape::new();
        let p = tape.param(Matrix::from_rows(&[[1.0, -2.0], [0.5, 3.0]]));
        let s = tape.sum(p);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(p).unwrap(), &Matrix::filled(2, 2, 1.0));
    }

    #[test]
    fn softmax_cross_entropy_gradient_is_p_minus_y() {
        let mut tape = Tape::new();
        let logits = tape.param(Matrix::row_vector(&[0.0, 2.0, -1.0]));
        let p = tape.softmax_rows(logits);
        let loss = tape.nll(p, &[1], 1e-12).unwrap();
        let grads = tape.backward(loss).unwrap();
        let probs = tape.value(p).clone();
        let g = grads.get(logits).unwrap();
        for k in 0..3 {
            let y = if k == 1 { 1.0 } else { 0.0 };
            assert!((g.get(0, k) - (probs.get(0, k) - y)).abs() < 1e-14);
        }
    }

    #[test]
    fn backward_errors_without_forward() {
        let tape = Tape::new();
        assert!(matches!(tape.backward(Var(0)), Err(KernelError::State(_))));
        let mut tape = Tape::new();
        let p = tape.param(Matrix::zeros(2, 2));
        assert!(tape.backward(p).is_err());
    }

    #[test]
    fn visits_in_reverse_order() {
        let mut tape = Tape::new();
        let a = tape.param(Matrix::row_vector(&[1.0, 2.0]));
        let b = tape.sigmoid(a);
        let c = tape.scale(b, 2.0);
        let d = tape.sum(c);
        let grads = tape.backward(d).unwrap();
        assert_eq!(grads.visit_order(), &[d.0, c.0, b.0, a.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::row_vector(&[1.0, 2.0]));
        let w = tape.param(Matrix::from_rows(&[[1.0], [1.0]]));
        let y = tape.matmul(x, w).unwrap();
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(w).unwrap(), &Matrix::from_rows(&[[1.0], [2.0]]));
    }

    /// Tiny attention-MIL composite touching every primitive.
    fn composite(tape: &mut Tape, p: &[Var], input: Var, mask: &Matrix) -> Var {
        let f = tape.conv1d(input, p[0], p[1]).unwrap();
        let f = tape.mask(f, mask.clone()).unwrap();
        let a_full = tape.matmul_bt(p[2], f).unwrap();
        let a_full = tape.sigmoid(a_full);
        let a = tape.select_row(a_full, 1).unwrap();
        let pooled = tape.weighted_mean(a, f, 1e-8).unwrap();
        let logits = tape.matmul(pooled, p[3]).unwrap();
        let probs = tape.softmax_rows(logits);
        let clip = tape.nll(probs, &[2], 1e-12).unwrap();
        let frame_logits = tape.matmul(f, p[3]).unwrap();
        let frame = tape.softmax_rows(frame_logits);
        let trimmed = tape.drop_last_column(frame).unwrap();
        let s = tape.sum(trimmed);
        let s = tape.scale(s, 0.3);
        tape.add(clip, s).unwrap()
    }

    #[test]
    fn composite_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (len, din, d, c) = (6, 3, 5, 3);
        let input = random(&mut rng, len, din);
        let params = vec![
            random(&mut rng, 3 * din, d).scale(0.5),
            random(&mut rng, 1, d).scale(0.5),
            random(&mut rng, c, d),
            random(&mut rng, d, c),
        ];
        let mask = Matrix::new(
            len,
            d,
            (0..len * d)
                .map(|_| if rng.random_bool(0.8) { 1.25 } else { 0.0 })
                .collect(),
        )
        .unwrap();
        let eval = |ps: &[Matrix]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ps.iter().map(|m| tape.param(m.clone())).collect();
            let x = tape.constant(input.clone());
            let out = composite(&mut tape, &vars, x, &mask);
            tape.value(out).get(0, 0)
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|m| tape.param(m.clone())).collect();
        let x = tape.param(input.clone());
        let out = composite(&mut tape, &vars, x, &mask);
        let grads = tape.backward(out).unwrap();
        for (i, v) in vars.iter().enumerate() {
            let fd = finite_diff(&params, i, &eval);
            let err = max_rel_err(grads.get(*v).unwrap(), &fd);
            assert!(err < 1e-4, "param {i}: rel err {err}");
        }
        // input gradient through the convolution
        let eval_input = |ps: &[Matrix]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = params.iter().map(|m| tape.param(m.clone())).collect();
            let x = tape.constant(ps[0].clone());
            let out = composite(&mut tape, &vars, x, &mask);
            tape.value(out).get(0, 0)
        };
        let fd = finite_diff(std::slice::from_ref(&input), 0, &eval_input);
        assert!(max_rel_err(grads.get(x).unwrap(), &fd) < 1e-4);
    }
}
