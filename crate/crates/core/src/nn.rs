//! Layers with explicit forward/backward passes.
//!
//! Every layer is its own gradient container: a zeroed clone of a layer
//! accumulates parameter gradients in the same slots the parameters live in,
//! which keeps optimizer and checkpoint code layer-agnostic.

use rand::Rng;

use crate::tensor::{col2im, gemm, im2col, ConvGeom, Tensor};

/// Square-kernel convolution with "same" padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    /// `[out_ch, in_ch * k * k]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
        Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            weight: (0..out_ch * in_ch * kernel * kernel)
                .map(|_| rng.gen_range(-bound..bound))
                .collect(),
            bias: vec![0.0; out_ch],
        }
    }

    fn geom(&self, h: usize, w: usize) -> ConvGeom {
        ConvGeom {
            channels: self.in_ch,
            in_h: h,
            in_w: w,
            kernel: self.kernel,
            stride: self.stride,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        debug_assert_eq!(x.channels(), self.in_ch);
        let g = self.geom(x.height(), x.width());
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = Tensor::zeros([x.batch(), self.out_ch, oh, ow]);
        let mut cols = vec![0.0; g.col_rows() * g.col_cols()];
        for b in 0..x.batch() {
            im2col(x.item(b), &g, &mut cols);
            let o = out.item_mut(b);
            for (c, plane) in o.chunks_mut(oh * ow).enumerate() {
                plane.fill(self.bias[c]);
            }
            gemm(self.out_ch, g.col_rows(), g.col_cols(), &self.weight, false, &cols, false, 1.0, o);
        }
        out
    }

    pub fn backward(&self, x: &Tensor, gy: &Tensor, mut grad: Option<&mut Conv2d>) -> Tensor {
        let g = self.geom(x.height(), x.width());
        let mut gx = Tensor::zeros(x.shape());
        let mut cols = vec![0.0; g.col_rows() * g.col_cols()];
        for b in 0..x.batch() {
            let gyb = gy.item(b);
            gemm(g.col_rows(), self.out_ch, g.col_cols(), &self.weight, true, gyb, false, 0.0, &mut cols);
            col2im(&cols, &g, gx.item_mut(b));
            if let Some(gr) = grad.as_deref_mut() {
                im2col(x.item(b), &g, &mut cols);
                gemm(self.out_ch, g.col_cols(), g.col_rows(), gyb, false, &cols, true, 1.0, &mut gr.weight);
                for (c, plane) in gyb.chunks(g.col_cols()).enumerate() {
                    gr.bias[c] += plane.iter().sum::<f64>();
                }
            }
        }
        gx
    }
}

/// Transposed convolution that upsamples by `stride`; the exact adjoint of
/// [`Conv2d`] with the same kernel and stride applied to the output size.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvTranspose2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    /// `[in_ch, out_ch * k * k]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvTranspose2d {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / ((out_ch * kernel * kernel) as f64).sqrt();
        Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            weight: (0..in_ch * out_ch * kernel * kernel)
                .map(|_| rng.gen_range(-bound..bound))
                .collect(),
            bias: vec![0.0; out_ch],
        }
    }

    fn geom(&self, h: usize, w: usize) -> ConvGeom {
        ConvGeom {
            channels: self.out_ch,
            in_h: h * self.stride,
            in_w: w * self.stride,
            kernel: self.kernel,
            stride: self.stride,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        debug_assert_eq!(x.channels(), self.in_ch);
        let g = self.geom(x.height(), x.width());
        let mut out = Tensor::zeros([x.batch(), self.out_ch, g.in_h, g.in_w]);
        let mut cols = vec![0.0; g.col_rows() * g.col_cols()];
        for b in 0..x.batch() {
            gemm(g.col_rows(), self.in_ch, g.col_cols(), &self.weight, true, x.item(b), false, 0.0, &mut cols);
            let o = out.item_mut(b);
            col2im(&cols, &g, o);
            for (c, plane) in o.chunks_mut(g.in_h * g.in_w).enumerate() {
                plane.iter_mut().for_each(|v| *v += self.bias[c]);
            }
        }
        out
    }

    pub fn backward(&self, x: &Tensor, gy: &Tensor, mut grad: Option<&mut ConvTranspose2d>) -> Tensor {
        let g = self.geom(x.height(), x.width());
        let mut gx = Tensor::zeros(x.shape());
        let mut cols = vec![0.0; g.col_rows() * g.col_cols()];
        for b in 0..x.batch() {
            let gyb = gy.item(b);
            im2col(gyb, &g, &mut cols);
            gemm(self.in_ch, g.col_rows(), g.col_cols(), &self.weight, false, &cols, false, 0.0, gx.item_mut(b));
            if let Some(gr) = grad.as_deref_mut() {
                gemm(self.in_ch, g.col_cols(), g.col_rows(), x.item(b), false, &cols, true, 1.0, &mut gr.weight);
                for (c, plane) in gyb.chunks(g.in_h * g.in_w).enumerate() {
                    gr.bias[c] += plane.iter().sum::<f64>();
                }
            }
        }
        gx
    }
}

/// Generalized divisive normalization, `x_i / sqrt(beta_i + sum_j gamma_ij x_j^2)`,
/// or its multiplicative inverse form when `inverse` is set.
#[derive(Clone, Debug, PartialEq)]
pub struct Gdn {
    pub channels: usize,
    pub inverse: bool,
    pub beta: Vec<f64>,
    /// `[channels, channels]`, row `i` weights the squares feeding channel `i`.
    pub gamma: Vec<f64>,
}

pub const GDN_BETA_MIN: f64 = 1e-6;

impl Gdn {
    pub fn new(channels: usize, inverse: bool) -> Self {
        let mut gamma = vec![0.0; channels * channels];
        for i in 0..channels {
            gamma[i * channels + i] = 0.1;
        }
        Self {
            channels,
            inverse,
            beta: vec![1.0; channels],
            gamma,
        }
    }

    /// Keeps the normalizer positive after an unconstrained optimizer step.
    pub fn project(&mut self) {
        self.beta.iter_mut().for_each(|b| *b = b.max(GDN_BETA_MIN));
        self.gamma.iter_mut().for_each(|g| *g = g.max(0.0));
    }

    fn norm(&self, x: &[f64], hw: usize) -> Vec<f64> {
        let sq: Vec<f64> = x.iter().map(|v| v * v).collect();
        let mut s = vec![0.0; x.len()];
        for (c, plane) in s.chunks_mut(hw).enumerate() {
            plane.fill(self.beta[c]);
        }
        gemm(self.channels, self.channels, hw, &self.gamma, false, &sq, false, 1.0, &mut s);
        s
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let hw = x.height() * x.width();
        let mut out = Tensor::zeros(x.shape());
        for b in 0..x.batch() {
            let xb = x.item(b);
            let s = self.norm(xb, hw);
            for ((o, &v), &n) in out.item_mut(b).iter_mut().zip(xb).zip(&s) {
                *o = if self.inverse { v * n.sqrt() } else { v / n.sqrt() };
            }
        }
        out
    }

    pub fn backward(&self, x: &Tensor, gy: &Tensor, mut grad: Option<&mut Gdn>) -> Tensor {
        let c = self.channels;
        let hw = x.height() * x.width();
        let mut gx = Tensor::zeros(x.shape());
        let mut tmp = vec![0.0; c * hw];
        for b in 0..x.batch() {
            let xb = x.item(b);
            let gyb = gy.item(b);
            let s = self.norm(xb, hw);
            // u = g * dy/ds
            let u: Vec<f64> = xb
                .iter()
                .zip(gyb)
                .zip(&s)
                .map(|((&v, &g), &n)| {
                    if self.inverse {
                        0.5 * g * v / n.sqrt()
                    } else {
                        -0.5 * g * v / (n * n.sqrt())
                    }
                })
                .collect();
            gemm(c, c, hw, &self.gamma, true, &u, false, 0.0, &mut tmp);
            for (i, o) in gx.item_mut(b).iter_mut().enumerate() {
                let direct = if self.inverse { s[i].sqrt() } else { 1.0 / s[i].sqrt() };
                *o = gyb[i] * direct + 2.0 * xb[i] * tmp[i];
            }
            if let Some(gr) = grad.as_deref_mut() {
                let sq: Vec<f64> = xb.iter().map(|v| v * v).collect();
                gemm(c, hw, c, &u, false, &sq, true, 1.0, &mut gr.gamma);
                for (ch, plane) in u.chunks(hw).enumerate() {
                    gr.beta[ch] += plane.iter().sum::<f64>();
                }
            }
        }
        gx
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv(Conv2d),
    Deconv(ConvTranspose2d),
    Gdn(Gdn),
    Relu,
}

impl Layer {
    pub fn forward(&self, x: &Tensor) -> Tensor {
        match self {
            Layer::Conv(l) => l.forward(x),
            Layer::Deconv(l) => l.forward(x),
            Layer::Gdn(l) => l.forward(x),
            Layer::Relu => x.map(|v| v.max(0.0)),
        }
    }

    pub fn backward(&self, x: &Tensor, gy: &Tensor, grad: Option<&mut Layer>) -> Tensor {
        match (self, grad) {
            (Layer::Conv(l), Some(Layer::Conv(g))) => l.backward(x, gy, Some(g)),
            (Layer::Conv(l), _) => l.backward(x, gy, None),
            (Layer::Deconv(l), Some(Layer::Deconv(g))) => l.backward(x, gy, Some(g)),
            (Layer::Deconv(l), _) => l.backward(x, gy, None),
            (Layer::Gdn(l), Some(Layer::Gdn(g))) => l.backward(x, gy, Some(g)),
            (Layer::Gdn(l), _) => l.backward(x, gy, None),
            (Layer::Relu, _) => x.zip_map(gy, |v, g| if v > 0.0 { g } else { 0.0 }),
        }
    }

    pub fn params(&self) -> Vec<&Vec<f64>> {
        match self {
            Layer::Conv(l) => vec![&l.weight, &l.bias],
            Layer::Deconv(l) => vec![&l.weight, &l.bias],
            Layer::Gdn(l) => vec![&l.beta, &l.gamma],
            Layer::Relu => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        match self {
            Layer::Conv(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Deconv(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Gdn(l) => vec![&mut l.beta, &mut l.gamma],
            Layer::Relu => vec![],
        }
    }

    pub fn project(&mut self) {
        if let Layer::Gdn(g) = self {
            g.project();
        }
    }
}

/// A chain of layers; `forward_cached` keeps every intermediate activation
/// so `backward` can run without recomputation.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mut h = x.clone();
        for l in &self.layers {
            h = l.forward(&h);
        }
        h
    }

    /// Returns `[input, act_1, ..., output]`.
    pub fn forward_cached(&self, x: &Tensor) -> Vec<Tensor> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.clone());
        for l in &self.layers {
            let next = l.forward(acts.last().expect("non-empty"));
            acts.push(next);
        }
        acts
    }

    pub fn backward(&self, acts: &[Tensor], gout: Tensor, mut grad: Option<&mut Sequential>) -> Tensor {
        let mut g = gout;
        for (i, l) in self.layers.iter().enumerate().rev() {
            let gl = grad.as_deref_mut().map(|s| &mut s.layers[i]);
            g = l.backward(&acts[i], &g, gl);
        }
        g
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero();
        z
    }

    pub fn zero(&mut self) {
        for p in self.params_mut() {
            p.fill(0.0);
        }
    }

    pub fn params(&self) -> Vec<&Vec<f64>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn project(&mut self) {
        self.layers.iter_mut().for_each(Layer::project);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 4], rng: &mut impl Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    /// Checks input and parameter gradients of `<w, layer(x)>` by central differences.
    fn check_layer(layer: Layer, shape: [usize; 4], seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(shape, &mut rng).map(|v| v + 0.3);
        let y = layer.forward(&x);
        let w = random(y.shape(), &mut rng);
        let mut grad = layer.clone();
        for p in grad.params_mut() {
            p.fill(0.0);
        }
        let gx = layer.backward(&x, &w, Some(&mut grad));
        let h = 1e-6;
        for i in (0..x.len()).step_by(7) {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (dot(&w, &layer.forward(&xp)) - dot(&w, &layer.forward(&xm))) / (2.0 * h);
            assert!((fd - gx.data()[i]).abs() < 1e-6 * (1.0 + fd.abs()), "input {i}: {fd} vs {}", gx.data()[i]);
        }
        let n_params = layer.params().len();
        for p in 0..n_params {
            let len = layer.params()[p].len();
            for i in (0..len).step_by(5) {
                let mut lp = layer.clone();
                lp.params_mut()[p][i] += h;
                let mut lm = layer.clone();
                lm.params_mut()[p][i] -= h;
                let fd = (dot(&w, &lp.forward(&x)) - dot(&w, &lm.forward(&x))) / (2.0 * h);
                let an = grad.params()[p][i];
                assert!((fd - an).abs() < 1e-6 * (1.0 + fd.abs()), "param {p}[{i}]: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        check_layer(Layer::Conv(Conv2d::new(2, 3, 5, 2, &mut rng)), [2, 2, 8, 8], 10);
        check_layer(Layer::Conv(Conv2d::new(3, 2, 3, 1, &mut rng)), [1, 3, 4, 4], 11);
    }

    #[test]
    fn deconv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        check_layer(Layer::Deconv(ConvTranspose2d::new(3, 2, 5, 2, &mut rng)), [2, 3, 3, 4], 12);
    }

    #[test]
    fn gdn_gradients_match_finite_differences() {
        for inverse in [false, true] {
            let mut g = Gdn::new(3, inverse);
            g.gamma.iter_mut().enumerate().for_each(|(i, v)| *v += 0.05 * i as f64);
            check_layer(Layer::Gdn(g), [2, 3, 3, 3], 13);
        }
    }

    #[test]
    fn deconv_doubles_spatial_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = ConvTranspose2d::new(4, 2, 5, 2, &mut rng);
        let y = d.forward(&Tensor::zeros([1, 4, 3, 5]));
        assert_eq!(y.shape(), [1, 2, 6, 10]);
        let c = Conv2d::new(2, 4, 5, 2, &mut rng);
        assert_eq!(c.forward(&y).shape(), [1, 4, 3, 5]);
    }

    #[test]
    fn sequential_backward_chains_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = Sequential::new(vec![
            Layer::Conv(Conv2d::new(2, 3, 3, 1, &mut rng)),
            Layer::Relu,
            Layer::Deconv(ConvTranspose2d::new(3, 2, 5, 2, &mut rng)),
        ]);
        let x = random([1, 2, 3, 3], &mut rng);
        let acts = net.forward_cached(&x);
        let w = random(acts.last().unwrap().shape(), &mut rng);
        let gx = net.backward(&acts, w.clone(), None);
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (dot(&w, &net.forward(&xp)) - dot(&w, &net.forward(&xm))) / (2.0 * h);
            assert!((fd - gx.data()[i]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }
}
