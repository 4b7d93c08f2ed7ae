//! Sequential networks built from the layers in [`crate::layers`].
//!
//! An [`Arch`] is the weight-free description every participant knows. A
//! [`Model`] adds the authoritative parameters, which only the server holds.
//! Forward and backward passes run through a [`Net`], a borrowed view that
//! pairs the architecture with per-layer weights in whatever coordinates the
//! caller has: full `W` for inference, or `W̃ = W S` plus the matching sketch
//! on a client.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::layers::{
    self, conv_backward_impl, conv_forward_sketched, dense_backward_impl, dense_forward_sketched,
    ConvCache, ConvLayer, DenseCache, DenseLayer, ParamGrads,
};
use crate::linalg::{conv_out_dims, Matrix, Shape4, Tensor4};
use crate::sketch::SketchMatrix;

/// Per-sample input layout. Flat feature vectors use `(dim, 1, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl InputShape {
    pub fn flat(dim: usize) -> Self {
        Self { c: dim, h: 1, w: 1 }
    }

    pub fn image(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub fn dim(&self) -> usize {
        self.c * self.h * self.w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Op {
    Dense {
        d_in: usize,
        d_out: usize,
        sketch: bool,
    },
    Conv {
        c_in: usize,
        c_out: usize,
        k: usize,
        padding: usize,
        sketch: bool,
    },
    Relu,
    MaxPool2,
    Flatten,
}

impl Op {
    /// `(d_out, d_in)` of the weight matrix for parameter layers.
    pub fn weight_shape(&self) -> Option<(usize, usize)> {
        match *self {
            Op::Dense { d_in, d_out, .. } => Some((d_out, d_in)),
            Op::Conv { c_in, c_out, k, .. } => Some((c_out, c_in * k * k)),
            _ => None,
        }
    }

    pub fn sketch_enabled(&self) -> bool {
        matches!(
            self,
            Op::Dense { sketch: true, .. } | Op::Conv { sketch: true, .. }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    SoftmaxCrossEntropy,
    SigmoidBce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Feat {
    Flat(usize),
    Img(usize, usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arch {
    input: InputShape,
    ops: Vec<Op>,
    loss: LossKind,
}

impl Arch {
    /// Validates that consecutive ops have compatible shapes.
    pub fn new(input: InputShape, ops: Vec<Op>, loss: LossKind) -> Result<Self> {
        let arch = Self { input, ops, loss };
        let out = arch.trace_shapes()?;
        match (loss, out) {
            (LossKind::SigmoidBce, Feat::Flat(1)) => {}
            (LossKind::SoftmaxCrossEntropy, Feat::Flat(k)) if k >= 2 => {}
            _ => {
                return Err(dim_err(
                    "Arch::new",
                    format!("network output {out:?} does not fit {loss:?}"),
                ))
            }
        }
        Ok(arch)
    }

    fn trace_shapes(&self) -> Result<Feat> {
        let start_img = matches!(self.ops.first(), Some(Op::Conv { .. } | Op::MaxPool2));
        let mut f = if start_img {
            Feat::Img(self.input.c, self.input.h, self.input.w)
        } else {
            Feat::Flat(self.input.dim())
        };
        for (i, op) in self.ops.iter().enumerate() {
            let bad = || dim_err("Arch::new", format!("op {i} ({op:?}) cannot take {f:?}"));
            f = match (*op, f) {
                (Op::Dense { d_in, d_out, .. }, Feat::Flat(n)) if n == d_in && d_out > 0 => {
                    Feat::Flat(d_out)
                }
                (
                    Op::Conv {
                        c_in,
                        c_out,
                        k,
                        padding,
                        ..
                    },
                    Feat::Img(c, h, w),
                ) if c == c_in && c_out > 0 => {
                    let (h1, w1) = conv_out_dims(h + 2 * padding, w + 2 * padding, k)?;
                    Feat::Img(c_out, h1, w1)
                }
                (Op::Relu, f) => f,
                (Op::MaxPool2, Feat::Img(c, h, w)) if h % 2 == 0 && w % 2 == 0 => {
                    Feat::Img(c, h / 2, w / 2)
                }
                (Op::Flatten, Feat::Img(c, h, w)) => Feat::Flat(c * h * w),
                _ => return Err(bad()),
            };
        }
        Ok(f)
    }

    /// `dims = [d_in, h₁, …, K]`: dense layers with ReLU in between. The
    /// output layer is sketched only if `sketch_last`. A single output uses
    /// the sigmoid loss, otherwise softmax.
    pub fn mlp(dims: &[usize], sketch_last: bool) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config(
                "an MLP needs at least input and output sizes".into(),
            ));
        }
        let n = dims.len() - 1;
        let mut ops = Vec::new();
        for (i, w) in dims.windows(2).enumerate() {
            let last = i + 1 == n;
            ops.push(Op::Dense {
                d_in: w[0],
                d_out: w[1],
                sketch: !last || sketch_last,
            });
            if !last {
                ops.push(Op::Relu);
            }
        }
        let loss = if dims[n] == 1 {
            LossKind::SigmoidBce
        } else {
            LossKind::SoftmaxCrossEntropy
        };
        Self::new(InputShape::flat(dims[0]), ops, loss)
    }

    /// Conv(32,5) ⇒ ReLU ⇒ MaxPool ⇒ Conv(64,5) ⇒ ReLU ⇒ MaxPool ⇒ Flatten ⇒
    /// Dense(512) ⇒ ReLU ⇒ Dense(classes).
    pub fn cnn(input: InputShape, classes: usize, sketch_last: bool) -> Result<Self> {
        let (mut c, mut h, mut w) = (input.c, input.h, input.w);
        let mut ops = Vec::new();
        for c_out in [32, 64] {
            ops.extend([
                Op::Conv {
                    c_in: c,
                    c_out,
                    k: 5,
                    padding: 0,
                    sketch: true,
                },
                Op::Relu,
                Op::MaxPool2,
            ]);
            c = c_out;
            h = h.saturating_sub(4) / 2;
            w = w.saturating_sub(4) / 2;
        }
        ops.extend([
            Op::Flatten,
            Op::Dense {
                d_in: c * h * w,
                d_out: 512,
                sketch: true,
            },
            Op::Relu,
            Op::Dense {
                d_in: 512,
                d_out: classes,
                sketch: sketch_last,
            },
        ]);
        Self::new(input, ops, LossKind::SoftmaxCrossEntropy)
    }

    /// Conv(8,3) ⇒ ReLU ⇒ MaxPool ⇒ Flatten ⇒ Dense(classes), for small
    /// inputs.
    pub fn cnn_small(input: InputShape, classes: usize, sketch_last: bool) -> Result<Self> {
        let (h, w) = conv_out_dims(input.h, input.w, 3)?;
        let ops = vec![
            Op::Conv {
                c_in: input.c,
                c_out: 8,
                k: 3,
                padding: 0,
                sketch: true,
            },
            Op::Relu,
            Op::MaxPool2,
            Op::Flatten,
            Op::Dense {
                d_in: 8 * (h / 2) * (w / 2),
                d_out: classes,
                sketch: sketch_last,
            },
        ];
        Self::new(input, ops, LossKind::SoftmaxCrossEntropy)
    }

    pub fn input(&self) -> InputShape {
        self.input
    }

    pub fn ops(&self) -> &[Op] {
        &self.ops
    }

    pub fn loss(&self) -> LossKind {
        self.loss
    }

    /// Parameter layers in order; the position in this list is the layer
    /// index used for seed derivation.
    pub fn param_ops(&self) -> impl Iterator<Item = &Op> + '_ {
        self.ops.iter().filter(|op| op.weight_shape().is_some())
    }

    pub fn num_param_layers(&self) -> usize {
        self.param_ops().count()
    }

    pub fn num_classes(&self) -> usize {
        match self.loss {
            LossKind::SigmoidBce => 2,
            LossKind::SoftmaxCrossEntropy => self
                .param_ops()
                .last()
                .and_then(|op| op.weight_shape())
                .map_or(0, |(d_out, _)| d_out),
        }
    }
}

/// Weights and bias of one parameter layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    arch: Arch,
    params: Vec<Param>,
}

impl Model {
    pub fn new(arch: Arch, params: Vec<Param>) -> Result<Self> {
        let shapes: Vec<_> = arch
            .param_ops()
            .filter_map(|op| op.weight_shape())
            .collect();
        if shapes.len() != params.len() {
            return Err(dim_err(
                "Model::new",
                format!("{} parameter layers, {} given", shapes.len(), params.len()),
            ));
        }
        for (i, (shape, p)) in shapes.iter().zip(&params).enumerate() {
            if p.weight.shape() != *shape || p.bias.len() != shape.0 {
                return Err(dim_err(
                    "Model::new",
                    format!("layer {i}: expected {shape:?}, got {:?}", p.weight.shape()),
                ));
            }
        }
        Ok(Self { arch, params })
    }

    pub fn init<R: Rng + ?Sized>(arch: Arch, rng: &mut R) -> Self {
        let params = arch
            .param_ops()
            .map(|op| match *op {
                Op::Dense { d_in, d_out, .. } => {
                    let l = DenseLayer::init(d_in, d_out, false, rng);
                    Param {
                        weight: l.weight,
                        bias: l.bias,
                    }
                }
                Op::Conv { c_in, c_out, k, .. } => {
                    let l = ConvLayer::init(c_in, c_out, k, false, rng);
                    Param {
                        weight: l.weight,
                        bias: l.bias,
                    }
                }
                _ => unreachable!("param_ops yields parameter layers only"),
            })
            .collect();
        Self { arch, params }
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    /// Inference view: full weights, no sketching.
    pub fn net(&self) -> Net<'_> {
        Net {
            arch: &self.arch,
            params: self
                .params
                .iter()
                .map(|p| ParamRef {
                    weight: &p.weight,
                    bias: &p.bias,
                    sketch: None,
                })
                .collect(),
        }
    }

    /// `W S` per layer, or a copy of `W` where the sketch is `None`.
    pub fn sketched_weights(&self, sketches: &[Option<SketchMatrix>]) -> Result<Vec<Matrix>> {
        if sketches.len() != self.params.len() {
            return Err(dim_err(
                "sketched_weights",
                format!(
                    "{} sketches for {} layers",
                    sketches.len(),
                    self.params.len()
                ),
            ));
        }
        self.params
            .iter()
            .zip(sketches)
            .map(|(p, s)| match s {
                Some(s) => s.apply(&p.weight),
                None => Ok(p.weight.clone()),
            })
            .collect()
    }
}

/// Weights of one parameter layer in forward coordinates: `W̃ = W S` with
/// its sketch, or `W` with `sketch: None`.
#[derive(Debug, Clone, Copy)]
pub struct ParamRef<'a> {
    pub weight: &'a Matrix,
    pub bias: &'a [f64],
    pub sketch: Option<&'a SketchMatrix>,
}

#[derive(Debug, Clone)]
pub struct Net<'a> {
    arch: &'a Arch,
    params: Vec<ParamRef<'a>>,
}

enum Act {
    Flat(Matrix),
    Img(Tensor4),
}

enum Tape<'a> {
    Dense(DenseCache<'a>),
    Conv(ConvCache<'a>),
    Relu(Vec<f64>),
    Pool(Vec<usize>, Shape4),
    Flatten(Shape4),
}

impl<'a> Net<'a> {
    pub fn new(arch: &'a Arch, params: Vec<ParamRef<'a>>) -> Result<Self> {
        let ops: Vec<_> = arch.param_ops().collect();
        if ops.len() != params.len() {
            return Err(dim_err(
                "Net::new",
                format!("{} parameter layers, {} given", ops.len(), params.len()),
            ));
        }
        for (i, (op, p)) in ops.iter().zip(&params).enumerate() {
            let (d_out, d_in) = op.weight_shape().expect("parameter op");
            let cols = match p.sketch {
                Some(s) if s.d() != d_in => {
                    return Err(Error::Protocol(format!(
                        "layer {i}: sketch has d = {}, layer input is {d_in}",
                        s.d()
                    )))
                }
                Some(s) => s.s(),
                None => d_in,
            };
            if p.weight.shape() != (d_out, cols) || p.bias.len() != d_out {
                return Err(dim_err(
                    "Net::new",
                    format!(
                        "layer {i}: weight {:?}, expected ({d_out}, {cols})",
                        p.weight.shape()
                    ),
                ));
            }
        }
        Ok(Self { arch, params })
    }

    pub fn arch(&self) -> &Arch {
        self.arch
    }

    fn run_forward(&self, x: &Matrix, keep_tape: bool) -> Result<(Matrix, Vec<Tape<'a>>)> {
        let input = self.arch.input;
        if x.cols() != input.dim() {
            return Err(dim_err(
                "Net::forward",
                format!(
                    "input has {} features, network expects {}",
                    x.cols(),
                    input.dim()
                ),
            ));
        }
        let mut act = if matches!(self.arch.ops.first(), Some(Op::Conv { .. } | Op::MaxPool2)) {
            Act::Img(Tensor4::from_matrix(x.clone(), input.c, input.h, input.w)?)
        } else {
            Act::Flat(x.clone())
        };
        let mut tape = Vec::new();
        let mut pi = 0;
        for op in &self.arch.ops {
            let (next, entry) = match (op, act) {
                (Op::Dense { .. }, Act::Flat(m)) => {
                    let p = self.params[pi];
                    pi += 1;
                    let (z, c) = dense_forward_sketched(&m, p.weight, p.bias, p.sketch)?;
                    (Act::Flat(z), Tape::Dense(c))
                }
                (Op::Conv { k, padding, .. }, Act::Img(t)) => {
                    let p = self.params[pi];
                    pi += 1;
                    let (y, c) =
                        conv_forward_sketched(&t, p.weight, p.bias, *k, *padding, p.sketch)?;
                    (Act::Img(y), Tape::Conv(c))
                }
                (Op::Relu, Act::Flat(m)) => {
                    let (r, c) = m.shape();
                    let a = Matrix::new(r, c, layers::relu(m.data()))?;
                    (Act::Flat(a), Tape::Relu(m.into_data()))
                }
                (Op::Relu, Act::Img(t)) => {
                    let a = Tensor4::new(t.shape(), layers::relu(t.data()))?;
                    (Act::Img(a), Tape::Relu(t.into_data()))
                }
                (Op::MaxPool2, Act::Img(t)) => {
                    let (y, arg) = layers::maxpool2(&t)?;
                    (Act::Img(y), Tape::Pool(arg, t.shape()))
                }
                (Op::Flatten, Act::Img(t)) => {
                    let s = t.shape();
                    (Act::Flat(t.into_matrix()), Tape::Flatten(s))
                }
                _ => unreachable!("shapes validated in Arch::new"),
            };
            act = next;
            if keep_tape {
                tape.push(entry);
            }
        }
        match act {
            Act::Flat(m) => Ok((m, tape)),
            Act::Img(_) => unreachable!("Arch::new requires a flat output"),
        }
    }

    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.run_forward(x, false)?.0)
    }

    pub fn loss(&self, x: &Matrix, labels: &[usize]) -> Result<f64> {
        let logits = self.logits(x)?;
        Ok(loss_fn(self.arch.loss, &logits, labels)?.0)
    }

    /// Mean batch loss and per-parameter-layer gradients. Weight gradients
    /// are in the coordinates of the supplied weights (`Γ` for sketched
    /// layers).
    pub fn loss_and_grads(&self, x: &Matrix, labels: &[usize]) -> Result<(f64, Vec<ParamGrads>)> {
        let (logits, tape) = self.run_forward(x, true)?;
        let (loss, g) = loss_fn(self.arch.loss, &logits, labels)?;
        let mut grads: Vec<ParamGrads> = Vec::with_capacity(self.params.len());
        let mut g = Act::Flat(g);
        for (i, entry) in tape.iter().enumerate().rev() {
            // The input gradient of the first op is never consumed.
            let need = i > 0;
            g = match (entry, g) {
                (Tape::Dense(c), Act::Flat(gm)) => {
                    let (pg, gx) = dense_backward_impl(&gm, c, need)?;
                    grads.push(pg);
                    match gx {
                        Some(gx) => Act::Flat(gx),
                        None => break,
                    }
                }
                (Tape::Conv(c), Act::Img(gt)) => {
                    let (pg, gx) = conv_backward_impl(&gt, c, need)?;
                    grads.push(pg);
                    match gx {
                        Some(gx) => Act::Img(gx),
                        None => break,
                    }
                }
                (Tape::Relu(z), Act::Flat(gm)) => {
                    let (r, cl) = gm.shape();
                    Act::Flat(Matrix::new(r, cl, layers::relu_backward(gm.data(), z))?)
                }
                (Tape::Relu(z), Act::Img(gt)) => Act::Img(Tensor4::new(
                    gt.shape(),
                    layers::relu_backward(gt.data(), z),
                )?),
                (Tape::Pool(arg, shape), Act::Img(gt)) => {
                    Act::Img(layers::maxpool2_backward(&gt, arg, *shape)?)
                }
                (Tape::Flatten(s), Act::Flat(gm)) => {
                    Act::Img(Tensor4::from_matrix(gm, s.c, s.h, s.w)?)
                }
                _ => unreachable!("tape mirrors validated ops"),
            };
        }
        grads.reverse();
        Ok((loss, grads))
    }

    /// Mean loss and top-1 accuracy, evaluated in chunks of `chunk` rows.
    pub fn evaluate(&self, x: &Matrix, labels: &[usize], chunk: usize) -> Result<(f64, f64)> {
        let n = x.rows();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let chunk = chunk.max(1);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for start in (0..n).step_by(chunk) {
            let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
            let xb = x.select_rows(&idx);
            let yb = &labels[start..start + idx.len()];
            let logits = self.logits(&xb)?;
            loss_sum += loss_fn(self.arch.loss, &logits, yb)?.0 * idx.len() as f64;
            correct += predict(self.arch.loss, &logits)
                .iter()
                .zip(yb)
                .filter(|(p, y)| p == y)
                .count();
        }
        Ok((loss_sum / n as f64, correct as f64 / n as f64))
    }
}

fn loss_fn(kind: LossKind, logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    match kind {
        LossKind::SoftmaxCrossEntropy => layers::softmax_crossentropy(logits, labels),
        LossKind::SigmoidBce => layers::sigmoid_bce(logits, labels),
    }
}

/// Top-1 class per row (first maximum on ties); sigmoid outputs threshold
/// the logit at 0.
pub fn predict(kind: LossKind, logits: &Matrix) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            match kind {
                LossKind::SigmoidBce => usize::from(row[0] > 0.0),
                LossKind::SoftmaxCrossEntropy => {
                    let mut best = 0;
                    for (i, v) in row.iter().enumerate() {
                        if *v > row[best] {
                            best = i;
                        }
                    }
                    best
                }
            }
        })
        .collect()
}
