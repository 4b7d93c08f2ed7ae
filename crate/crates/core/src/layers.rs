//! Dense and convolutional layers with sketched training-mode products,
//! plus the activation, pooling and loss functions used by the models.
//!
//! In training mode a dense layer computes `Z = (X S)(W S)ᵀ + 1·bᵀ`; the
//! backward pass returns the sketched weight gradient `Γ = Gᵀ (X S)` (the
//! full gradient is `Γ Sᵀ`) and `∂L/∂X = G (W S) Sᵀ`. Inference mode is the
//! same computation with `S = I`. Convolutions are lowered to the dense case
//! through [`unfold`]/[`fold`].

use std::borrow::Cow;

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::linalg::{conv_out_dims, fold, unfold, Matrix, Shape4, Tensor4};
use crate::sketch::SketchMatrix;

/// Whether a forward pass multiplies by a sketch.
#[derive(Debug, Clone, Copy)]
pub enum LayerMode<'a> {
    Train(&'a SketchMatrix),
    /// Equivalent to `S = I`.
    Inference,
}

impl<'a> LayerMode<'a> {
    pub fn sketch(&self) -> Option<&'a SketchMatrix> {
        match self {
            LayerMode::Train(s) => Some(s),
            LayerMode::Inference => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `d_out × d_in`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub sketch_enabled: bool,
}

impl DenseLayer {
    pub fn new(weight: Matrix, bias: Vec<f64>, sketch_enabled: bool) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(dim_err(
                "DenseLayer::new",
                format!("bias {} for {} outputs", bias.len(), weight.rows()),
            ));
        }
        Ok(Self {
            weight,
            bias,
            sketch_enabled,
        })
    }

    /// `W ~ U(±√3/√d_in)`, `b ~ U(±1/√d_in)`.
    pub fn init<R: Rng + ?Sized>(
        d_in: usize,
        d_out: usize,
        sketch_enabled: bool,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let wb = bound * 3f64.sqrt();
        let weight = Matrix::from_fn(d_out, d_in, |_, _| rng.random_range(-wb..wb));
        let bias = (0..d_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            weight,
            bias,
            sketch_enabled,
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    /// `c_out × (c_in·k²)`, one vectorized kernel per row.
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub k: usize,
    pub in_channels: usize,
    /// Zero padding on each side; 0 gives a valid convolution.
    pub padding: usize,
    pub sketch_enabled: bool,
}

impl ConvLayer {
    pub fn new(
        weight: Matrix,
        bias: Vec<f64>,
        in_channels: usize,
        k: usize,
        padding: usize,
        sketch_enabled: bool,
    ) -> Result<Self> {
        if weight.cols() != in_channels * k * k || bias.len() != weight.rows() {
            return Err(dim_err(
                "ConvLayer::new",
                format!(
                    "weight {:?}, bias {}, in_channels {in_channels}, k {k}",
                    weight.shape(),
                    bias.len()
                ),
            ));
        }
        Ok(Self {
            weight,
            bias,
            k,
            in_channels,
            padding,
            sketch_enabled,
        })
    }

    /// `W ~ U(±√6/√(c_in·k²))`, `b ~ U(±1/√(c_in·k²))`.
    pub fn init<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        k: usize,
        sketch_enabled: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * k * k;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let wb = bound * 6f64.sqrt();
        let weight = Matrix::from_fn(out_channels, fan_in, |_, _| rng.random_range(-wb..wb));
        let bias = (0..out_channels)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            weight,
            bias,
            k,
            in_channels,
            padding: 0,
            sketch_enabled,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_in(&self) -> usize {
        self.weight.cols()
    }
}

/// Weight and bias gradients of one parameter layer.
///
/// `gamma` lives in sketched coordinates (`d_out × s`); for an unsketched
/// layer it is the ordinary `d_out × d_in` gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub gamma: Matrix,
    pub grad_bias: Vec<f64>,
}

/// State saved by a dense forward pass.
#[derive(Debug, Clone)]
pub struct DenseCache<'a> {
    x_sk: Matrix,
    w_sk: Cow<'a, Matrix>,
    sketch: Option<&'a SketchMatrix>,
}

impl DenseCache<'_> {
    pub fn sketched_input(&self) -> &Matrix {
        &self.x_sk
    }

    pub fn sketched_weight(&self) -> &Matrix {
        &self.w_sk
    }
}

pub fn dense_forward<'a>(
    x: &Matrix,
    layer: &'a DenseLayer,
    mode: LayerMode<'a>,
) -> Result<(Matrix, DenseCache<'a>)> {
    match mode.sketch() {
        Some(s) => {
            check_sketch(s, layer.d_in(), "dense_forward")?;
            let w_sk = s.apply(&layer.weight)?;
            forward_with(x, Cow::Owned(w_sk), &layer.bias, Some(s))
        }
        None => forward_with(x, Cow::Borrowed(&layer.weight), &layer.bias, None),
    }
}

/// Forward pass from already-sketched weights `W̃ = W S`, the form in which
/// a client receives them.
pub fn dense_forward_sketched<'a>(
    x: &Matrix,
    w_sk: &'a Matrix,
    bias: &[f64],
    sketch: Option<&'a SketchMatrix>,
) -> Result<(Matrix, DenseCache<'a>)> {
    forward_with(x, Cow::Borrowed(w_sk), bias, sketch)
}

fn check_sketch(s: &SketchMatrix, d_in: usize, op: &'static str) -> Result<()> {
    if s.d() != d_in {
        return Err(dim_err(
            op,
            format!("sketch has d = {}, layer input is {d_in}", s.d()),
        ));
    }
    Ok(())
}

fn forward_with<'a>(
    x: &Matrix,
    w_sk: Cow<'a, Matrix>,
    bias: &[f64],
    sketch: Option<&'a SketchMatrix>,
) -> Result<(Matrix, DenseCache<'a>)> {
    let x_sk = match sketch {
        Some(s) => {
            if s.s() != w_sk.cols() {
                return Err(dim_err(
                    "dense_forward",
                    format!("sketch size {} vs weight columns {}", s.s(), w_sk.cols()),
                ));
            }
            s.apply(x)?
        }
        None => x.clone(),
    };
    let mut z = x_sk.matmul_t(&w_sk)?;
    z.add_row_broadcast(bias)?;
    Ok((z, DenseCache { x_sk, w_sk, sketch }))
}

/// Returns the layer gradients and `∂L/∂X`.
pub fn dense_backward(g: &Matrix, cache: &DenseCache<'_>) -> Result<(ParamGrads, Matrix)> {
    let (grads, gx) = dense_backward_impl(g, cache, true)?;
    Ok((grads, gx.expect("input gradient requested")))
}

pub(crate) fn dense_backward_impl(
    g: &Matrix,
    cache: &DenseCache<'_>,
    need_input_grad: bool,
) -> Result<(ParamGrads, Option<Matrix>)> {
    if g.rows() != cache.x_sk.rows() || g.cols() != cache.w_sk.rows() {
        return Err(dim_err(
            "dense_backward",
            format!(
                "gradient {:?} for batch {} and {} outputs",
                g.shape(),
                cache.x_sk.rows(),
                cache.w_sk.rows()
            ),
        ));
    }
    let gamma = g.t_matmul(&cache.x_sk)?;
    let grad_bias = g.column_sums();
    let grad_x = if need_input_grad {
        let gw = g.matmul(&cache.w_sk)?;
        Some(match cache.sketch {
            Some(s) => s.apply_transpose(&gw)?,
            None => gw,
        })
    } else {
        None
    };
    Ok((ParamGrads { gamma, grad_bias }, grad_x))
}

/// Shape bookkeeping for a convolution pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub input: Shape4,
    pub k: usize,
    pub padding: usize,
    pub out_channels: usize,
    pub out_h: usize,
    pub out_w: usize,
}

#[derive(Debug, Clone)]
pub struct ConvCache<'a> {
    inner: DenseCache<'a>,
    geom: ConvGeometry,
}

impl ConvCache<'_> {
    pub fn geometry(&self) -> ConvGeometry {
        self.geom
    }
}

pub fn conv_forward<'a>(
    x: &Tensor4,
    layer: &'a ConvLayer,
    mode: LayerMode<'a>,
) -> Result<(Tensor4, ConvCache<'a>)> {
    match mode.sketch() {
        Some(s) => {
            check_sketch(s, layer.fan_in(), "conv_forward")?;
            let w_sk = s.apply(&layer.weight)?;
            conv_with(
                x,
                Cow::Owned(w_sk),
                &layer.bias,
                layer.k,
                layer.padding,
                Some(s),
            )
        }
        None => conv_with(
            x,
            Cow::Borrowed(&layer.weight),
            &layer.bias,
            layer.k,
            layer.padding,
            None,
        ),
    }
}

/// Convolution from already-sketched kernels `W̃ = W S`.
pub fn conv_forward_sketched<'a>(
    x: &Tensor4,
    w_sk: &'a Matrix,
    bias: &[f64],
    k: usize,
    padding: usize,
    sketch: Option<&'a SketchMatrix>,
) -> Result<(Tensor4, ConvCache<'a>)> {
    conv_with(x, Cow::Borrowed(w_sk), bias, k, padding, sketch)
}

fn conv_with<'a>(
    x: &Tensor4,
    w_sk: Cow<'a, Matrix>,
    bias: &[f64],
    k: usize,
    padding: usize,
    sketch: Option<&'a SketchMatrix>,
) -> Result<(Tensor4, ConvCache<'a>)> {
    let input = x.shape();
    let padded = x.pad(padding);
    let ps = padded.shape();
    let (out_h, out_w) = conv_out_dims(ps.h, ps.w, k)?;
    let fan_in = input.c * k * k;
    let expect_cols = sketch.map_or(fan_in, |s| s.s());
    if sketch.is_some_and(|s| s.d() != fan_in) || w_sk.cols() != expect_cols {
        return Err(dim_err(
            "conv_forward",
            format!(
                "weight {:?} / sketch incompatible with {} input channels and k = {k}",
                w_sk.shape(),
                input.c
            ),
        ));
    }
    let patches = unfold(&padded, k)?;
    let (z, inner) = forward_with(&patches, w_sk, bias, sketch)?;
    let c1 = z.cols();
    let hw = out_h * out_w;
    let out_shape = Shape4::new(input.b, c1, out_h, out_w);
    let mut y = Tensor4::zeros(out_shape);
    {
        let yd = y.data_mut();
        for n in 0..input.b {
            for pos in 0..hw {
                let zr = z.row(n * hw + pos);
                for (c, v) in zr.iter().enumerate() {
                    yd[(n * c1 + c) * hw + pos] = *v;
                }
            }
        }
    }
    let geom = ConvGeometry {
        input,
        k,
        padding,
        out_channels: c1,
        out_h,
        out_w,
    };
    Ok((y, ConvCache { inner, geom }))
}

/// Returns the layer gradients and `∂L/∂X`.
pub fn conv_backward(g: &Tensor4, cache: &ConvCache<'_>) -> Result<(ParamGrads, Tensor4)> {
    let (grads, gx) = conv_backward_impl(g, cache, true)?;
    Ok((grads, gx.expect("input gradient requested")))
}

pub(crate) fn conv_backward_impl(
    g: &Tensor4,
    cache: &ConvCache<'_>,
    need_input_grad: bool,
) -> Result<(ParamGrads, Option<Tensor4>)> {
    let geom = cache.geom;
    let gs = g.shape();
    if gs != Shape4::new(geom.input.b, geom.out_channels, geom.out_h, geom.out_w) {
        return Err(dim_err(
            "conv_backward",
            format!("gradient shape {gs:?} does not match forward output"),
        ));
    }
    let hw = geom.out_h * geom.out_w;
    let c1 = geom.out_channels;
    let gd = g.data();
    let g_flat = Matrix::from_fn(geom.input.b * hw, c1, |r, c| {
        let (n, pos) = (r / hw, r % hw);
        gd[(n * c1 + c) * hw + pos]
    });
    let (grads, gp) = dense_backward_impl(&g_flat, &cache.inner, need_input_grad)?;
    let gx = match gp {
        Some(gp) => {
            let pad = geom.padding;
            let padded = Shape4::new(
                geom.input.b,
                geom.input.c,
                geom.input.h + 2 * pad,
                geom.input.w + 2 * pad,
            );
            Some(fold(&gp, padded, geom.k)?.crop(pad))
        }
        None => None,
    };
    Ok((grads, gx))
}

pub fn relu(z: &[f64]) -> Vec<f64> {
    z.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

/// `g ⊙ [z > 0]`; the subgradient at 0 is 0.
pub fn relu_backward(g: &[f64], z: &[f64]) -> Vec<f64> {
    g.iter()
        .zip(z)
        .map(|(&gv, &zv)| if zv > 0.0 { gv } else { 0.0 })
        .collect()
}

/// 2×2 max pooling with stride 2. Returns the pooled tensor and, for each
/// output cell, the flat input index that won (first maximum in row-major
/// window order).
pub fn maxpool2(x: &Tensor4) -> Result<(Tensor4, Vec<usize>)> {
    let s = x.shape();
    if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
        return Err(dim_err(
            "maxpool2",
            format!("spatial dims {}x{} are not even", s.h, s.w),
        ));
    }
    let out_shape = Shape4::new(s.b, s.c, s.h / 2, s.w / 2);
    let mut out = Tensor4::zeros(out_shape);
    let mut argmax = Vec::with_capacity(out_shape.len());
    let xd = x.data();
    let mut o = 0;
    for n in 0..s.b {
        for c in 0..s.c {
            let plane = (n * s.c + c) * s.h * s.w;
            for oy in 0..s.h / 2 {
                for ox in 0..s.w / 2 {
                    let mut best = plane + 2 * oy * s.w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = plane + (2 * oy + dy) * s.w + 2 * ox + dx;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    out.data_mut()[o] = xd[best];
                    argmax.push(best);
                    o += 1;
                }
            }
        }
    }
    Ok((out, argmax))
}

pub fn maxpool2_backward(g: &Tensor4, argmax: &[usize], input: Shape4) -> Result<Tensor4> {
    if g.data().len() != argmax.len() {
        return Err(dim_err(
            "maxpool2_backward",
            format!(
                "{} gradients for {} pooled cells",
                g.data().len(),
                argmax.len()
            ),
        ));
    }
    let mut out = Tensor4::zeros(input);
    let od = out.data_mut();
    for (&idx, &v) in argmax.iter().zip(g.data()) {
        od[idx] += v;
    }
    Ok(out)
}

/// Row-wise softmax with the row maximum subtracted.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut p = logits.clone();
    for r in 0..p.rows() {
        let row = p.row_mut(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    p
}

/// Mean cross-entropy over the batch and its gradient `(softmax − onehot)/b`.
pub fn softmax_crossentropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (b, classes) = logits.shape();
    if labels.len() != b {
        return Err(dim_err(
            "softmax_crossentropy",
            format!("{} labels for batch of {b}", labels.len()),
        ));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Label { label, classes });
    }
    let mut grad = Matrix::zeros(b, classes);
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let lse = m + sum.ln();
        loss += lse - row[y];
        let gr = grad.row_mut(r);
        for (gv, v) in gr.iter_mut().zip(row) {
            *gv = (v - lse).exp() / b as f64;
        }
        gr[y] -= 1.0 / b as f64;
    }
    Ok((loss / b as f64, grad))
}

/// Mean binary cross-entropy on `σ(z)` for a `b × 1` logit column.
pub fn sigmoid_bce(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (b, cols) = logits.shape();
    if cols != 1 || labels.len() != b {
        return Err(dim_err(
            "sigmoid_bce",
            format!("logits {:?} with {} labels", logits.shape(), labels.len()),
        ));
    }
    if let Some(&label) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Label { label, classes: 2 });
    }
    let mut grad = Matrix::zeros(b, 1);
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let z = logits.get(r, 0);
        let y = y as f64;
        // log(1 + e^z) − z·y, written to avoid overflow for large |z|.
        loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        grad.set(r, 0, (sigmoid(z) - y) / b as f64);
    }
    Ok((loss / b as f64, grad))
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use crate::sketch::{generate, SketchSpec};

    fn tiny_sketch() -> SketchMatrix {
        SketchMatrix::from_hashes(1, vec![0, 0], vec![1.0, -1.0]).unwrap()
    }

    fn rand_matrix(r: usize, c: usize, rng: &mut SplitMix64) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
    }

    #[test]
    fn dense_inference_identity() {
        let layer = DenseLayer::new(Matrix::identity(2), vec![0.0, 0.0], false).unwrap();
        let x = Matrix::row_vector(&[1.0, 2.0]);
        let (z, _) = dense_forward(&x, &layer, LayerMode::Inference).unwrap();
        assert_eq!(z, x);
    }

    #[test]
    fn dense_train_worked_example() {
        let s = tiny_sketch();
        let layer = DenseLayer::new(Matrix::identity(2), vec![0.0, 0.0], true).unwrap();
        let x = Matrix::row_vector(&[3.0, 5.0]);
        let (z, cache) = dense_forward(&x, &layer, LayerMode::Train(&s)).unwrap();
        assert_eq!(z.row(0), &[-2.0, 2.0]);
        let dense = x
            .matmul(&s.materialize())
            .unwrap()
            .matmul_t(&layer.weight.matmul(&s.materialize()).unwrap())
            .unwrap();
        assert_eq!(z, dense);

        let g = Matrix::row_vector(&[1.0, 0.0]);
        let (grads, gx) = dense_backward(&g, &cache).unwrap();
        assert_eq!(grads.gamma, Matrix::from_rows(&[[-2.0], [0.0]]));
        assert_eq!(gx.row(0), &[1.0, -1.0]);
        assert_eq!(grads.grad_bias, vec![1.0, 0.0]);
        let full = s.apply_transpose(&grads.gamma).unwrap();
        assert_eq!(full, Matrix::from_rows(&[[-2.0, 2.0], [0.0, 0.0]]));
        let direct = g
            .t_matmul(&x.matmul(&s.materialize()).unwrap())
            .unwrap()
            .matmul(&s.materialize().transpose())
            .unwrap();
        assert_eq!(full, direct);
    }

    #[test]
    fn dense_zero_input_and_zero_grad() {
        let mut rng = SplitMix64::new(1);
        let layer = DenseLayer::init(4, 3, true, &mut rng);
        let s = generate(&SketchSpec::countsketch(4, 2, 7)).unwrap();
        let (z, cache) = dense_forward(&Matrix::zeros(2, 4), &layer, LayerMode::Train(&s)).unwrap();
        for r in 0..2 {
            assert_eq!(z.row(r), &layer.bias[..]);
        }
        let (grads, gx) = dense_backward(&Matrix::zeros(2, 3), &cache).unwrap();
        assert!(grads.gamma.data().iter().all(|&v| v == 0.0));
        assert!(gx.data().iter().all(|&v| v == 0.0));
        assert!(grads.grad_bias.iter().all(|&v| v == 0.0));
        assert!(dense_backward(&Matrix::zeros(3, 3), &cache).is_err());
    }

    #[test]
    fn dense_sketch_dimension_mismatch() {
        let mut rng = SplitMix64::new(1);
        let layer = DenseLayer::init(5, 3, true, &mut rng);
        let s = generate(&SketchSpec::countsketch(4, 2, 7)).unwrap();
        assert!(dense_forward(&Matrix::zeros(1, 5), &layer, LayerMode::Train(&s)).is_err());
    }

    #[test]
    fn init_bounds() {
        let mut rng = SplitMix64::new(3);
        let d = DenseLayer::init(100, 20, true, &mut rng);
        let wb = 3f64.sqrt() / 10.0;
        assert!(d.weight.data().iter().all(|v| v.abs() <= wb));
        assert!(d.bias.iter().all(|v| v.abs() <= 0.1));
        let c = ConvLayer::init(2, 4, 3, true, &mut rng);
        let cb = 6f64.sqrt() / 18f64.sqrt();
        assert!(c.weight.data().iter().all(|v| v.abs() <= cb));
        assert_eq!(c.weight.shape(), (4, 18));
    }

    /// Scalar test loss `Σ c ⊙ Z` so that `G = c`.
    fn dense_loss(x: &Matrix, layer: &DenseLayer, s: &SketchMatrix, c: &Matrix) -> f64 {
        let (z, _) = dense_forward(x, layer, LayerMode::Train(s)).unwrap();
        z.dot(c).unwrap()
    }

    #[test]
    fn dense_finite_differences() {
        let mut rng = SplitMix64::new(10);
        for trial in 0..10 {
            let (b, d_in, d_out) = (3, 6, 4);
            let s = generate(&SketchSpec::countsketch(d_in, 3, trial)).unwrap();
            let mut layer = DenseLayer::init(d_in, d_out, true, &mut rng);
            let mut x = rand_matrix(b, d_in, &mut rng);
            let c = rand_matrix(b, d_out, &mut rng);
            let (_, cache) = dense_forward(&x, &layer, LayerMode::Train(&s)).unwrap();
            let (grads, gx) = dense_backward(&c, &cache).unwrap();
            let gw = s.apply_transpose(&grads.gamma).unwrap();
            let eps = 1e-5;
            for i in 0..d_out {
                for j in 0..d_in {
                    let w0 = layer.weight.get(i, j);
                    layer.weight.set(i, j, w0 + eps);
                    let up = dense_loss(&x, &layer, &s, &c);
                    layer.weight.set(i, j, w0 - eps);
                    let down = dense_loss(&x, &layer, &s, &c);
                    layer.weight.set(i, j, w0);
                    assert!(rel_err((up - down) / (2.0 * eps), gw.get(i, j)) < 1e-5);
                }
            }
            for i in 0..b {
                for j in 0..d_in {
                    let x0 = x.get(i, j);
                    x.set(i, j, x0 + eps);
                    let up = dense_loss(&x, &layer, &s, &c);
                    x.set(i, j, x0 - eps);
                    let down = dense_loss(&x, &layer, &s, &c);
                    x.set(i, j, x0);
                    assert!(rel_err((up - down) / (2.0 * eps), gx.get(i, j)) < 1e-5);
                }
            }
        }
    }

    fn naive_conv(x: &Tensor4, layer: &ConvLayer) -> Tensor4 {
        let s = x.shape();
        let k = layer.k;
        let (h1, w1) = (s.h - k + 1, s.w - k + 1);
        Tensor4::from_fn(
            Shape4::new(s.b, layer.out_channels(), h1, w1),
            |n, o, y, xx| {
                let mut acc = layer.bias[o];
                for c in 0..s.c {
                    for ky in 0..k {
                        for kx in 0..k {
                            acc += x.get(n, c, y + ky, xx + kx)
                                * layer.weight.get(o, (c * k + ky) * k + kx);
                        }
                    }
                }
                acc
            },
        )
    }

    #[test]
    fn conv_k1_example() {
        let layer = ConvLayer::new(Matrix::from_rows(&[[2.0]]), vec![0.0], 1, 1, 0, false).unwrap();
        let x = Tensor4::new(Shape4::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, _) = conv_forward(&x, &layer, LayerMode::Inference).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn conv_zero_kernels_give_bias() {
        let layer = ConvLayer::new(Matrix::zeros(2, 4), vec![0.5, -1.5], 1, 2, 0, false).unwrap();
        let x = Tensor4::from_fn(Shape4::new(1, 1, 3, 3), |_, _, y, x| (y * 3 + x) as f64);
        let (y, _) = conv_forward(&x, &layer, LayerMode::Inference).unwrap();
        assert!(y.data()[..4].iter().all(|&v| v == 0.5));
        assert!(y.data()[4..].iter().all(|&v| v == -1.5));
    }

    #[test]
    fn conv_inference_matches_naive() {
        let mut rng = SplitMix64::new(4);
        let layer = ConvLayer::init(2, 3, 2, false, &mut rng);
        let x = Tensor4::from_fn(Shape4::new(1, 2, 4, 4), |_, _, _, _| {
            rng.random_range(-1.0..1.0)
        });
        let (y, _) = conv_forward(&x, &layer, LayerMode::Inference).unwrap();
        let expect = naive_conv(&x, &layer);
        assert_eq!(y.shape(), expect.shape());
        for (a, b) in y.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_k1_reduces_to_dense() {
        let mut rng = SplitMix64::new(6);
        let layer = ConvLayer::init(4, 3, 1, true, &mut rng);
        let s = generate(&SketchSpec::countsketch(4, 2, 1)).unwrap();
        let x = Tensor4::from_fn(Shape4::new(2, 4, 1, 1), |_, _, _, _| {
            rng.random_range(-1.0..1.0)
        });
        let g = Tensor4::from_fn(Shape4::new(2, 3, 1, 1), |_, _, _, _| {
            rng.random_range(-1.0..1.0)
        });
        let (_, cc) = conv_forward(&x, &layer, LayerMode::Train(&s)).unwrap();
        let (cg, cgx) = conv_backward(&g, &cc).unwrap();

        let dense = DenseLayer::new(layer.weight.clone(), layer.bias.clone(), true).unwrap();
        let xm = x.clone().into_matrix();
        let (_, dc) = dense_forward(&xm, &dense, LayerMode::Train(&s)).unwrap();
        let (dg, dgx) = dense_backward(&g.clone().into_matrix(), &dc).unwrap();
        assert!(cg.gamma.max_abs_diff(&dg.gamma) < 1e-14);
        assert_eq!(cg.grad_bias, dg.grad_bias);
        assert!(cgx.into_matrix().max_abs_diff(&dgx) < 1e-14);
    }

    fn conv_loss(x: &Tensor4, layer: &ConvLayer, s: &SketchMatrix, c: &Tensor4) -> f64 {
        let (y, _) = conv_forward(x, layer, LayerMode::Train(s)).unwrap();
        y.data().iter().zip(c.data()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn conv_finite_differences() {
        let mut rng = SplitMix64::new(12);
        for (trial, padding) in [(0u64, 0usize), (1, 1), (2, 0)] {
            let mut layer = ConvLayer::init(2, 3, 2, true, &mut rng);
            layer.padding = padding;
            let s = generate(&SketchSpec::countsketch(8, 4, trial)).unwrap();
            let mut x = Tensor4::from_fn(Shape4::new(2, 2, 4, 3), |_, _, _, _| {
                rng.random_range(-1.0..1.0)
            });
            let (y, cache) = conv_forward(&x, &layer, LayerMode::Train(&s)).unwrap();
            let c = Tensor4::from_fn(y.shape(), |_, _, _, _| rng.random_range(-1.0..1.0));
            let (grads, gx) = conv_backward(&c, &cache).unwrap();
            let gw = s.apply_transpose(&grads.gamma).unwrap();
            let eps = 1e-5;
            for i in 0..3 {
                for j in 0..8 {
                    let w0 = layer.weight.get(i, j);
                    layer.weight.set(i, j, w0 + eps);
                    let up = conv_loss(&x, &layer, &s, &c);
                    layer.weight.set(i, j, w0 - eps);
                    let down = conv_loss(&x, &layer, &s, &c);
                    layer.weight.set(i, j, w0);
                    assert!(rel_err((up - down) / (2.0 * eps), gw.get(i, j)) < 1e-5);
                }
                let b0 = layer.bias[i];
                layer.bias[i] = b0 + eps;
                let up = conv_loss(&x, &layer, &s, &c);
                layer.bias[i] = b0 - eps;
                let down = conv_loss(&x, &layer, &s, &c);
                layer.bias[i] = b0;
                assert!(rel_err((up - down) / (2.0 * eps), grads.grad_bias[i]) < 1e-5);
            }
            for idx in 0..x.data().len() {
                let x0 = x.data()[idx];
                x.data_mut()[idx] = x0 + eps;
                let up = conv_loss(&x, &layer, &s, &c);
                x.data_mut()[idx] = x0 - eps;
                let down = conv_loss(&x, &layer, &s, &c);
                x.data_mut()[idx] = x0;
                assert!(rel_err((up - down) / (2.0 * eps), gx.data()[idx]) < 1e-5);
            }
        }
    }

    #[test]
    fn identity_sketch_matches_inference() {
        let mut rng = SplitMix64::new(21);
        let layer = DenseLayer::init(5, 3, true, &mut rng);
        let x = rand_matrix(4, 5, &mut rng);
        let g = rand_matrix(4, 3, &mut rng);
        let id = SketchMatrix::identity(5);
        let (zt, ct) = dense_forward(&x, &layer, LayerMode::Train(&id)).unwrap();
        let (zi, ci) = dense_forward(&x, &layer, LayerMode::Inference).unwrap();
        assert!(zt.max_abs_diff(&zi) <= 1e-12);
        let (gt, gxt) = dense_backward(&g, &ct).unwrap();
        let (gi, gxi) = dense_backward(&g, &ci).unwrap();
        let classical = g.t_matmul(&x).unwrap();
        assert!(
            id.apply_transpose(&gt.gamma)
                .unwrap()
                .max_abs_diff(&classical)
                <= 1e-12
        );
        assert!(gi.gamma.max_abs_diff(&classical) <= 1e-12);
        assert!(gxt.max_abs_diff(&gxi) <= 1e-12);
    }

    #[test]
    fn uniform_sampling_is_weighted_masking() {
        let mut rng = SplitMix64::new(8);
        for seed in 0..20 {
            let (d, s) = (7, 3);
            let sk = generate(&SketchSpec::uniform(d, s, seed)).unwrap();
            let layer = DenseLayer::init(d, 2, true, &mut rng);
            let x = rand_matrix(3, d, &mut rng);
            let (z, _) = dense_forward(&x, &layer, LayerMode::Train(&sk)).unwrap();
            let scale = d as f64 / s as f64;
            for r in 0..3 {
                for o in 0..2 {
                    let mut acc = 0.0;
                    for j in 0..s {
                        let i = sk.source(j).unwrap();
                        acc += x.get(r, i) * layer.weight.get(o, i);
                    }
                    let expect = scale * acc + layer.bias[o];
                    assert!((z.get(r, o) - expect).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn relu_cases() {
        assert_eq!(relu(&[-1.0, 0.0, 2.0]), vec![0.0, 0.0, 2.0]);
        assert_eq!(
            relu_backward(&[1.0, 1.0, 1.0], &[-1.0, 0.0, 2.0]),
            vec![0.0, 0.0, 1.0]
        );
    }

    #[test]
    fn maxpool_cases() {
        let x = Tensor4::new(Shape4::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, arg) = maxpool2(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);

        let flat = Tensor4::new(Shape4::new(1, 1, 2, 2), vec![5.0; 4]).unwrap();
        let (_, arg) = maxpool2(&flat).unwrap();
        let g = Tensor4::new(Shape4::new(1, 1, 1, 1), vec![1.0]).unwrap();
        let back = maxpool2_backward(&g, &arg, flat.shape()).unwrap();
        assert_eq!(back.data(), &[1.0, 0.0, 0.0, 0.0]);

        let odd = Tensor4::zeros(Shape4::new(1, 1, 3, 2));
        assert!(maxpool2(&odd).is_err());
    }

    #[test]
    fn softmax_ce_cases() {
        let (loss, grad) = softmax_crossentropy(&Matrix::row_vector(&[0.0, 0.0]), &[0]).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
        assert_eq!(grad.row(0), &[-0.5, 0.5]);
        let (loss, grad) = softmax_crossentropy(&Matrix::row_vector(&[1000.0, 0.0]), &[0]).unwrap();
        assert!(loss.abs() < 1e-12 && grad.is_finite());
        assert!(matches!(
            softmax_crossentropy(&Matrix::row_vector(&[0.0, 0.0]), &[2]),
            Err(Error::Label { .. })
        ));
    }

    #[test]
    fn sigmoid_bce_cases() {
        let (loss, grad) = sigmoid_bce(&Matrix::from_rows(&[[0.0]]), &[1]).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
        assert_eq!(grad.get(0, 0), -0.5);
        let (loss, _) = sigmoid_bce(&Matrix::from_rows(&[[30.0]]), &[1]).unwrap();
        assert!(loss < 1e-12);
        let (loss, grad) = sigmoid_bce(&Matrix::from_rows(&[[-800.0]]), &[1]).unwrap();
        assert!((loss - 800.0).abs() < 1e-9 && grad.is_finite());
        assert!(sigmoid_bce(&Matrix::from_rows(&[[0.0]]), &[2]).is_err());
    }
}
