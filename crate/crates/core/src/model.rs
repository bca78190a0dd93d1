//! The CNN8by8 classifier and its weight file.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{write_atomic, PIXELS, SIDE};
use crate::error::{Error, Result};
use crate::tensor::{ops, Tape, Tensor, Var};

/// A differentiable two-or-more-class model over flattened 8×8 inputs.
///
/// Attribution methods and the AGOP accumulator only need logits and the
/// input-gradient of one logit, so toy models can stand in for the CNN.
pub trait Classifier: Sync {
    fn input_dim(&self) -> usize;

    fn logits(&self, x: &[f64]) -> Result<Vec<f64>>;

    /// Logits together with `∂ logit[class] / ∂x`.
    fn logits_and_input_gradient(&self, x: &[f64], class: usize) -> Result<(Vec<f64>, Vec<f64>)>;

    /// Argmax class, ties to the lower index.
    fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(ops::argmax(&self.logits(x)?))
    }

    /// Predicted class and the input-gradient of its logit.
    fn predicted_class_gradient(&self, x: &[f64]) -> Result<(usize, Vec<f64>)> {
        let class = self.predict(x)?;
        Ok((class, self.logits_and_input_gradient(x, class)?.1))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockLayout {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub padding: usize,
    pub pool_k: usize,
    pub pool_stride: usize,
}

impl BlockLayout {
    pub fn param_count(&self) -> usize {
        self.c_out * self.c_in * self.kernel * self.kernel + self.c_out
    }
}

/// Conv → ReLU → MaxPool layout: 8→6→3 (GradCAM target), 3→2, 2→1, 1→1.
pub const CNN8_LAYOUT: [BlockLayout; 4] = [
    BlockLayout {
        c_in: 1,
        c_out: 2,
        kernel: 3,
        padding: 0,
        pool_k: 2,
        pool_stride: 2,
    },
    BlockLayout {
        c_in: 2,
        c_out: 3,
        kernel: 3,
        padding: 1,
        pool_k: 2,
        pool_stride: 1,
    },
    BlockLayout {
        c_in: 3,
        c_out: 4,
        kernel: 2,
        padding: 0,
        pool_k: 1,
        pool_stride: 1,
    },
    BlockLayout {
        c_in: 4,
        c_out: 4,
        kernel: 1,
        padding: 0,
        pool_k: 1,
        pool_stride: 1,
    },
];
pub const NUM_CLASSES: usize = 2;
/// Index of the block whose pooled output is the default GradCAM layer.
pub const GRADCAM_TARGET: usize = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub layout: BlockLayout,
    pub kernel: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cnn8by8 {
    pub blocks: Vec<ConvBlock>,
    pub dense_weight: Tensor,
    pub dense_bias: Tensor,
}

/// Tape handles produced by [`Cnn8by8::forward_on_tape`].
#[derive(Clone, Debug)]
pub struct TapeForward {
    pub input: Var,
    pub params: Vec<Var>,
    /// Pooled output of each block.
    pub block_outputs: Vec<Var>,
    pub logits: Var,
}

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Deterministic CNN8by8: conv kernels He-uniform in ±√(6/fan_in), conv
/// biases zero, dense layer uniform in ±1/√fan_in.
pub fn build_cnn8by8(seed: u64) -> Cnn8by8 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blocks = Vec::with_capacity(CNN8_LAYOUT.len());
    for layout in CNN8_LAYOUT {
        let fan_in = layout.c_in * layout.kernel * layout.kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        let kernel = uniform_tensor(
            &mut rng,
            &[layout.c_out, layout.c_in, layout.kernel, layout.kernel],
            bound,
        );
        let bias = Tensor::zeros(&[layout.c_out]);
        blocks.push(ConvBlock {
            layout,
            kernel,
            bias,
        });
    }
    let d = CNN8_LAYOUT[3].c_out;
    let bound = 1.0 / (d as f64).sqrt();
    let dense_weight = uniform_tensor(&mut rng, &[NUM_CLASSES, d], bound);
    let dense_bias = uniform_tensor(&mut rng, &[NUM_CLASSES], bound);
    Cnn8by8 {
        blocks,
        dense_weight,
        dense_bias,
    }
}

impl Cnn8by8 {
    /// Parameters in declaration order: per block (kernel, bias), then dense (weight, bias).
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(2 * self.blocks.len() + 2);
        for b in &self.blocks {
            out.push(&b.kernel);
            out.push(&b.bias);
        }
        out.push(&self.dense_weight);
        out.push(&self.dense_bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(2 * self.blocks.len() + 2);
        for b in &mut self.blocks {
            out.push(&mut b.kernel);
            out.push(&mut b.bias);
        }
        out.push(&mut self.dense_weight);
        out.push(&mut self.dense_bias);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// All parameters concatenated in declaration order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params()
            .into_iter()
            .flat_map(|p| p.data().iter().copied())
            .collect()
    }

    fn check_input(x: &[f64]) -> Result<Tensor> {
        if x.len() != PIXELS {
            return Err(Error::Dimension {
                op: "cnn8by8",
                axis: "input",
                expected: PIXELS,
                found: x.len(),
            });
        }
        Tensor::new(vec![1, SIDE, SIDE], x.to_vec())
    }

    /// Tape-free forward pass returning the pooled output of every block and the logits.
    pub fn forward_trace(&self, x: &[f64]) -> Result<(Vec<Tensor>, Vec<f64>)> {
        let mut h = Self::check_input(x)?;
        let mut outs = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let z = ops::conv2d(&h, &b.kernel, &b.bias, b.layout.padding)?;
            let a = ops::relu(&z);
            let (p, _) = ops::maxpool2d(&a, b.layout.pool_k, b.layout.pool_stride)?;
            outs.push(p.clone());
            h = p;
        }
        let logits = ops::dense(&h, &self.dense_weight, &self.dense_bias)?;
        Ok((outs, logits.into_data()))
    }

    /// Record the forward pass with the input and every parameter as leaves.
    pub fn forward_on_tape(&self, tape: &mut Tape, x: &[f64]) -> Result<TapeForward> {
        let input = tape.leaf(Self::check_input(x)?);
        let mut params = Vec::with_capacity(2 * self.blocks.len() + 2);
        let mut block_outputs = Vec::with_capacity(self.blocks.len());
        let mut h = input;
        for b in &self.blocks {
            let k = tape.leaf(b.kernel.clone());
            let bias = tape.leaf(b.bias.clone());
            params.push(k);
            params.push(bias);
            let z = tape.conv2d(h, k, bias, b.layout.padding)?;
            let a = tape.relu(z);
            h = tape.maxpool2d(a, b.layout.pool_k, b.layout.pool_stride)?;
            block_outputs.push(h);
        }
        let w = tape.leaf(self.dense_weight.clone());
        let bias = tape.leaf(self.dense_bias.clone());
        params.push(w);
        params.push(bias);
        let logits = tape.dense(h, w, bias)?;
        Ok(TapeForward {
            input,
            params,
            block_outputs,
            logits,
        })
    }

    /// Cross-entropy loss and its gradient for every parameter (declaration order).
    pub fn loss_and_param_grads(
        &self,
        x: &[f64],
        label: usize,
    ) -> Result<(f64, Vec<f64>, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let fwd = self.forward_on_tape(&mut tape, x)?;
        let logits = tape.value(fwd.logits).data().to_vec();
        let loss = tape.cross_entropy(fwd.logits, label)?;
        let mut grads = tape.backward(loss)?;
        let loss_value = tape.value(loss).item()?;
        let param_grads = fwd.params.iter().map(|&p| grads.take(p)).collect();
        Ok((loss_value, logits, param_grads))
    }
}

impl Classifier for Cnn8by8 {
    fn input_dim(&self) -> usize {
        PIXELS
    }

    fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(x)?.1)
    }

    fn logits_and_input_gradient(&self, x: &[f64], class: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let fwd = self.forward_on_tape(&mut tape, x)?;
        let logit = tape.select(fwd.logits, class)?;
        let mut grads = tape.backward(logit)?;
        let logits = tape.value(fwd.logits).data().to_vec();
        Ok((logits, grads.take(fwd.input).into_data()))
    }

    /// Single tape: the argmax is read off the recorded logits.
    fn predicted_class_gradient(&self, x: &[f64]) -> Result<(usize, Vec<f64>)> {
        let mut tape = Tape::new();
        let fwd = self.forward_on_tape(&mut tape, x)?;
        let class = ops::argmax(tape.value(fwd.logits).data());
        let logit = tape.select(fwd.logits, class)?;
        let mut grads = tape.backward(logit)?;
        Ok((class, grads.take(fwd.input).into_data()))
    }
}

/// Affine classifier `logits = W·x + b`; a linear probe and a handy toy model.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineModel {
    pub weight: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl AffineModel {
    pub fn new(weight: Vec<Vec<f64>>, bias: Vec<f64>) -> Self {
        assert_eq!(weight.len(), bias.len(), "one bias per output row");
        assert!(
            weight.iter().all(|r| r.len() == weight[0].len()),
            "ragged weight"
        );
        Self { weight, bias }
    }
}

impl Classifier for AffineModel {
    fn input_dim(&self) -> usize {
        self.weight[0].len()
    }

    fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension {
                op: "affine",
                axis: "input",
                expected: self.input_dim(),
                found: x.len(),
            });
        }
        Ok(self
            .weight
            .iter()
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).fold(*b, |acc, (w, v)| acc + w * v))
            .collect())
    }

    fn logits_and_input_gradient(&self, x: &[f64], class: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let logits = self.logits(x)?;
        let row = self.weight.get(class).ok_or_else(|| {
            Error::Parameter(format!("class {class} out of range {}", self.weight.len()))
        })?;
        Ok((logits, row.clone()))
    }
}

/// Fraction of argmax-correct predictions.
pub fn evaluate_accuracy<M: Classifier + ?Sized>(
    model: &M,
    dataset: &[crate::data::Sample],
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Parameter("accuracy of an empty dataset".into()));
    }
    let mut correct = 0usize;
    for s in dataset {
        if model.predict(&s.image)? == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

const MODEL_MAGIC: &[u8; 6] = b"CNN8W1";

/// Serialise: magic, block count, per-block layout (six u32), dense shape
/// (two u32), then every parameter as little-endian f64 in declaration order.
pub fn encode_model(model: &Cnn8by8) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MODEL_MAGIC);
    buf.extend_from_slice(&(model.blocks.len() as u32).to_le_bytes());
    for b in &model.blocks {
        let l = b.layout;
        for v in [
            l.c_in,
            l.c_out,
            l.kernel,
            l.padding,
            l.pool_k,
            l.pool_stride,
        ] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
    }
    for v in model.dense_weight.shape() {
        buf.extend_from_slice(&(*v as u32).to_le_bytes());
    }
    for p in model.params() {
        for v in p.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                expected: (self.pos + n) as u64,
                found: self.bytes.len() as u64,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(8 * n)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<Cnn8by8> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(6)? != MODEL_MAGIC {
        return Err(Error::format(0, "bad magic, expected CNN8W1"));
    }
    let n_blocks = r.u32()?;
    if n_blocks != CNN8_LAYOUT.len() {
        return Err(Error::format(
            6,
            format!("expected 4 blocks, found {n_blocks}"),
        ));
    }
    let mut layouts = Vec::with_capacity(n_blocks);
    for expected in CNN8_LAYOUT {
        let at = r.pos as u64;
        let f: Vec<usize> = (0..6).map(|_| r.u32()).collect::<Result<_>>()?;
        let layout = BlockLayout {
            c_in: f[0],
            c_out: f[1],
            kernel: f[2],
            padding: f[3],
            pool_k: f[4],
            pool_stride: f[5],
        };
        if layout != expected {
            return Err(Error::format(
                at,
                format!("layout {layout:?} does not match CNN8by8"),
            ));
        }
        layouts.push(layout);
    }
    let at = r.pos as u64;
    let (out, d) = (r.u32()?, r.u32()?);
    if (out, d) != (NUM_CLASSES, CNN8_LAYOUT[3].c_out) {
        return Err(Error::format(
            at,
            format!("dense shape {out}x{d} does not match CNN8by8"),
        ));
    }
    let mut blocks = Vec::with_capacity(n_blocks);
    for layout in layouts {
        let kshape = vec![layout.c_out, layout.c_in, layout.kernel, layout.kernel];
        let kn = kshape.iter().product();
        let kernel = Tensor::new(kshape, r.f64s(kn)?)?;
        let bias = Tensor::new(vec![layout.c_out], r.f64s(layout.c_out)?)?;
        blocks.push(ConvBlock {
            layout,
            kernel,
            bias,
        });
    }
    let dense_weight = Tensor::new(vec![out, d], r.f64s(out * d)?)?;
    let dense_bias = Tensor::new(vec![out], r.f64s(out)?)?;
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos as u64, "trailing bytes after weights"));
    }
    Ok(Cnn8by8 {
        blocks,
        dense_weight,
        dense_bias,
    })
}

pub fn save_model(path: &Path, model: &Cnn8by8) -> Result<()> {
    write_atomic(path, &encode_model(model))
}

pub fn load_model(path: &Path) -> Result<Cnn8by8> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}
