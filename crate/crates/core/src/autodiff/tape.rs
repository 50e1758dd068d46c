use crate::autodiff::kernels::{self, ConvGeometry};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Var, geometry: ConvGeometry },
    Relu(Var),
    MaxPool2 { input: Var, argmax: Vec<usize> },
    Softmax(Var),
    Upsample { input: Var, factor: usize },
    Concat(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    /// Scalar-valued function of one input whose local gradient was computed
    /// alongside the forward value.
    Reduce { input: Var, grad: Vec<f64> },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Wengert list of executed operations. Each recorded value is produced by
/// exactly one node; `backward` walks the nodes in reverse order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node of a tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Cross-correlation of an N×C×H×W input with a K×C×kh×kw kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let geometry = kernels::conv_geometry(self.value(input), self.value(kernel), self.value(bias), stride, pad)?;
        let out = kernels::conv2d_forward(self.value(input), self.value(kernel), self.value(bias), &geometry);
        Ok(self.push(out, Op::Conv2d { input, kernel, bias, geometry }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let out = Tensor::new(x.shape(), x.data().iter().map(|&v| v.max(0.0)).collect()).unwrap();
        self.push(out, Op::Relu(input))
    }

    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = kernels::maxpool2_forward(self.value(input))?;
        Ok(self.push(out, Op::MaxPool2 { input, argmax }))
    }

    pub fn softmax_channels(&mut self, scores: Var) -> Result<Var> {
        let out = kernels::softmax_channels_forward(self.value(scores))?;
        Ok(self.push(out, Op::Softmax(scores)))
    }

    pub fn bilinear_upsample(&mut self, input: Var, factor: usize) -> Result<Var> {
        let out = kernels::upsample_forward(self.value(input), factor)?;
        Ok(self.push(out, Op::Upsample { input, factor }))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::concat_channels_forward(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Concat(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape(format!("add {:?} + {:?}", x.shape(), y.shape())));
        }
        let out = Tensor::new(x.shape(), x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect())?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape(format!("mul {:?} * {:?}", x.shape(), y.shape())));
        }
        let out = Tensor::new(x.shape(), x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect())?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let x = self.value(input);
        let out = Tensor::new(x.shape(), x.data().iter().map(|v| v * factor).collect()).unwrap();
        self.push(out, Op::Scale(input, factor))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(input))
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.is_empty() {
            return Err(Error::shape("mean of an empty tensor"));
        }
        let m = x.data().iter().sum::<f64>() / x.len() as f64;
        Ok(self.push(Tensor::scalar(m), Op::Mean(input)))
    }

    /// Records a scalar function of `input` given its value and its gradient
    /// with respect to `input`.
    pub fn reduce(&mut self, input: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        if grad.len() != self.value(input).len() {
            return Err(Error::shape(format!(
                "reduce gradient has {} entries, input has {}",
                grad.len(),
                self.value(input).len()
            )));
        }
        Ok(self.push(Tensor::scalar(value), Op::Reduce { input, grad }))
    }

    /// Σ weight·term over scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, w) in terms {
            total += w * self.value(v).item().ok_or_else(|| Error::shape("weighted_sum term is not a scalar"))?;
        }
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec())))
    }

    /// Reverse-mode sweep from a scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(Error::shape(format!("backward needs a scalar output, got shape {:?}", out.shape())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d { input, kernel, bias, geometry } => {
                    let (dx, dw, db) =
                        kernels::conv2d_backward(self.value(*input), self.value(*kernel), &g, geometry);
                    accumulate(&mut grads, *input, dx);
                    accumulate(&mut grads, *kernel, dw);
                    accumulate(&mut grads, *bias, db);
                }
                Op::Relu(input) => {
                    let x = self.value(*input).data();
                    let dx = g.iter().zip(x).map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 }).collect();
                    accumulate(&mut grads, *input, dx);
                }
                Op::MaxPool2 { input, argmax } => {
                    let mut dx = vec![0.0; self.value(*input).len()];
                    for (gv, &src) in g.iter().zip(argmax) {
                        dx[src] += gv;
                    }
                    accumulate(&mut grads, *input, dx);
                }
                Op::Softmax(input) => {
                    accumulate(&mut grads, *input, kernels::softmax_channels_backward(&node.value, &g));
                }
                Op::Upsample { input, factor } => {
                    let dx = kernels::upsample_backward(self.value(*input).shape(), *factor, &g);
                    accumulate(&mut grads, *input, dx);
                }
                Op::Concat(a, b) => {
                    let (da, db) = kernels::concat_channels_backward(self.value(*a).shape(), self.value(*b).shape(), &g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Mul(a, b) => {
                    let da = g.iter().zip(self.value(*b).data()).map(|(x, y)| x * y).collect();
                    let db = g.iter().zip(self.value(*a).data()).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale(input, factor) => {
                    accumulate(&mut grads, *input, g.iter().map(|v| v * factor).collect());
                }
                Op::Sum(input) => {
                    accumulate(&mut grads, *input, vec![g[0]; self.value(*input).len()]);
                }
                Op::Mean(input) => {
                    let n = self.value(*input).len();
                    accumulate(&mut grads, *input, vec![g[0] / n as f64; n]);
                }
                Op::Reduce { input, grad } => {
                    accumulate(&mut grads, *input, grad.iter().map(|v| v * g[0]).collect());
                }
                Op::WeightedSum(terms) => {
                    for &(v, w) in terms {
                        accumulate(&mut grads, v, vec![w * g[0]]);
                    }
                }
            }
            grads[idx] = Some(g);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Tensor::new(self.nodes[i].value.shape(), g).expect("gradient shape")))
            .collect();
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(delta),
    }
}
