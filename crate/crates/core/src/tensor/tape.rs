use super::{ops, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        padding: usize,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Relu {
        input: Var,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    CrossEntropy {
        logits: Var,
        label: usize,
        softmax: Vec<f64>,
    },
    Select {
        input: Var,
        index: usize,
    },
    Sum {
        input: Var,
    },
    Scale {
        input: Var,
        factor: f64,
    },
    Add {
        lhs: Var,
        rhs: Var,
    },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Linear record of primitive applications in evaluation order.
///
/// Every operand of a node was recorded before it, so a single reverse sweep
/// accumulates exact gradients. `backward` only reads the tape, so one tape
/// can be differentiated from several outputs.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradient of one scalar output with respect to every node on a tape.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn wrt(&self, var: Var) -> &Tensor {
        &self.grads[var.0]
    }

    pub fn take(&mut self, var: Var) -> Tensor {
        let shape = self.grads[var.0].shape().to_vec();
        std::mem::replace(&mut self.grads[var.0], Tensor::zeros(&shape))
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, padding: usize) -> Result<Var> {
        let out = ops::conv2d(
            self.value(input),
            self.value(kernel),
            self.value(bias),
            padding,
        )?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                padding,
            },
        ))
    }

    pub fn maxpool2d(&mut self, input: Var, k: usize, stride: usize) -> Result<Var> {
        let (out, argmax) = ops::maxpool2d(self.value(input), k, stride)?;
        Ok(self.push(out, Op::MaxPool { input, argmax }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = ops::relu(self.value(input));
        self.push(out, Op::Relu { input })
    }

    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = ops::dense(self.value(input), self.value(weight), self.value(bias))?;
        Ok(self.push(
            out,
            Op::Dense {
                input,
                weight,
                bias,
            },
        ))
    }

    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let (loss, softmax) = ops::cross_entropy(self.value(logits), label)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                label,
                softmax,
            },
        ))
    }

    /// Scalar element `index` of a flattened tensor (used to pick one logit).
    pub fn select(&mut self, input: Var, index: usize) -> Result<Var> {
        let v = self.value(input);
        let value = *v.data().get(index).ok_or_else(|| {
            Error::Parameter(format!("select: index {index} out of range {}", v.len()))
        })?;
        Ok(self.push(Tensor::scalar(value), Op::Select { input, index }))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum { input })
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let v = self.value(input);
        let out = Tensor {
            shape: v.shape().to_vec(),
            data: v.data().iter().map(|x| x * factor).collect(),
        };
        self.push(out, Op::Scale { input, factor })
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let (a, b) = (self.value(lhs), self.value(rhs));
        if a.shape() != b.shape() {
            return Err(Error::Dimension {
                op: "add",
                axis: "numel",
                expected: a.len(),
                found: b.len(),
            });
        }
        let out = Tensor {
            shape: a.shape().to_vec(),
            data: a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
        };
        Ok(self.push(out, Op::Add { lhs, rhs }))
    }

    /// Reverse-mode sweep from a scalar `output`.
    ///
    /// Nodes that do not influence `output` receive zero gradients.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = &self.nodes[output.0].value;
        if !out.is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar output, got shape {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.shape()))
            .collect();
        grads[output.0].data_mut()[0] = 1.0;

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) || grads[idx].data().iter().all(|&g| g == 0.0) {
                continue;
            }
            let up = std::mem::replace(&mut grads[idx], Tensor::zeros(&[1]));
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    padding,
                } => {
                    let (gi, gk, gb) = ops::conv2d_backward(
                        self.value(*input),
                        self.value(*kernel),
                        self.value(*bias),
                        *padding,
                        &up,
                    )?;
                    grads[input.0].add_assign(&gi);
                    grads[kernel.0].add_assign(&gk);
                    grads[bias.0].add_assign(&gb);
                }
                Op::MaxPool { input, argmax } => {
                    let gi = ops::maxpool2d_backward(self.value(*input).shape(), argmax, &up);
                    grads[input.0].add_assign(&gi);
                }
                Op::Relu { input } => {
                    let gi = ops::relu_backward(self.value(*input), &up);
                    grads[input.0].add_assign(&gi);
                }
                Op::Dense {
                    input,
                    weight,
                    bias,
                } => {
                    let (gi, gw, gb) =
                        ops::dense_backward(self.value(*input), self.value(*weight), &up)?;
                    grads[input.0].add_assign(&gi);
                    grads[weight.0].add_assign(&gw);
                    grads[bias.0].add_assign(&gb);
                }
                Op::CrossEntropy {
                    logits,
                    label,
                    softmax,
                } => {
                    let g = up.data()[0];
                    let gl = &mut grads[logits.0];
                    for (k, (dst, p)) in gl.data_mut().iter_mut().zip(softmax).enumerate() {
                        let onehot = if k == *label { 1.0 } else { 0.0 };
                        *dst += g * (p - onehot);
                    }
                }
                Op::Select { input, index } => {
                    grads[input.0].data_mut()[*index] += up.data()[0];
                }
                Op::Sum { input } => {
                    let g = up.data()[0];
                    for dst in grads[input.0].data_mut() {
                        *dst += g;
                    }
                }
                Op::Scale { input, factor } => {
                    for (dst, u) in grads[input.0].data_mut().iter_mut().zip(up.data()) {
                        *dst += u * factor;
                    }
                }
                Op::Add { lhs, rhs } => {
                    grads[lhs.0].add_assign(&up);
                    grads[rhs.0].add_assign(&up);
                }
            }
            grads[idx] = up;
        }
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.3, -1.2, 4.0]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn relu_sum_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![-1.0, 2.0]));
        let r = tape.relu(x);
        let s = tape.sum(r);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0, 1.0]);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let unused = tape.leaf(Tensor::vector(vec![5.0, 6.0, 7.0]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(unused).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_from_vector_is_contract_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let r = tape.relu(x);
        assert!(matches!(tape.backward(r), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_is_repeatable() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![-0.5, 1.5, 2.0]));
        let w = tape.leaf(Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 0.3, 0.1, -0.7]).unwrap());
        let b = tape.leaf(Tensor::vector(vec![0.1, 0.2]));
        let y = tape.dense(x, w, b).unwrap();
        let l0 = tape.select(y, 0).unwrap();
        let l1 = tape.select(y, 1).unwrap();
        let g0a = tape.backward(l0).unwrap().wrt(x).clone();
        let g1 = tape.backward(l1).unwrap().wrt(x).clone();
        let g0b = tape.backward(l0).unwrap().wrt(x).clone();
        assert_eq!(g0a, g0b);
        assert_eq!(g0a.data(), &[1.0, -2.0, 0.5]);
        assert_eq!(g1.data(), &[0.3, 0.1, -0.7]);
    }

    #[test]
    fn shared_operand_accumulates() {
        // f(x) = sum(x + x) has gradient 2 everywhere.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, -3.0]));
        let y = tape.add(x, x).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[2.0, 2.0]);
    }
}
