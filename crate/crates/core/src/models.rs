//! Scale-hyperprior autoencoder: analysis and hyper-analysis transforms
//! (the encoder), synthesis and hyper-synthesis transforms plus the two
//! priors (the decoder).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::entropy::{FactorizedPrior, SIGMA_FLOOR};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvTranspose2d, Gdn, Layer, Sequential};
use crate::quantization::sigmoid;
use crate::tensor::Tensor;

/// Image to main latent.
pub const Y_DOWNSAMPLE: usize = 16;
/// Main latent to hyper-latent.
pub const Z_DOWNSAMPLE: usize = 4;
/// Image dimensions must be multiples of this.
pub const TOTAL_DOWNSAMPLE: usize = Y_DOWNSAMPLE * Z_DOWNSAMPLE;

const PIXEL_SCALE: f64 = 255.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    /// Hidden channels of the main transforms.
    pub n: usize,
    /// Latent channels of `y`.
    pub m: usize,
    /// Channels of the hyper transforms and of `z`.
    pub m_hyper: usize,
    pub image_channels: usize,
}

impl Default for Arch {
    fn default() -> Self {
        Self {
            n: 64,
            m: 96,
            m_hyper: 64,
            image_channels: 3,
        }
    }
}

impl Arch {
    /// Reduced widths used for desk-scale experiments on a single CPU core.
    pub fn desk() -> Self {
        Self {
            n: 32,
            m: 48,
            m_hyper: 32,
            image_channels: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 || self.m_hyper == 0 || !matches!(self.image_channels, 1 | 3) {
            return Err(Error::Config(format!("invalid architecture {self:?}")));
        }
        Ok(())
    }
}

/// Amortized encoder parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub analysis: Sequential,
    pub hyper_analysis: Sequential,
}

impl Encoder {
    pub fn new(arch: &Arch, rng: &mut ChaCha8Rng) -> Self {
        let Arch { n, m, m_hyper: mh, image_channels: c } = *arch;
        let analysis = Sequential::new(vec![
            Layer::Conv(Conv2d::new(c, n, 5, 2, rng)),
            Layer::Gdn(Gdn::new(n, false)),
            Layer::Conv(Conv2d::new(n, n, 5, 2, rng)),
            Layer::Gdn(Gdn::new(n, false)),
            Layer::Conv(Conv2d::new(n, n, 5, 2, rng)),
            Layer::Gdn(Gdn::new(n, false)),
            Layer::Conv(Conv2d::new(n, m, 5, 2, rng)),
        ]);
        let hyper_analysis = Sequential::new(vec![
            Layer::Conv(Conv2d::new(m, mh, 3, 1, rng)),
            Layer::Relu,
            Layer::Conv(Conv2d::new(mh, mh, 5, 2, rng)),
            Layer::Relu,
            Layer::Conv(Conv2d::new(mh, mh, 5, 2, rng)),
        ]);
        Self {
            analysis,
            hyper_analysis,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            analysis: self.analysis.zeros_like(),
            hyper_analysis: self.hyper_analysis.zeros_like(),
        }
    }

    pub fn params(&self) -> Vec<&Vec<f64>> {
        let mut p = self.analysis.params();
        p.extend(self.hyper_analysis.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut p = self.analysis.params_mut();
        p.extend(self.hyper_analysis.params_mut());
        p
    }

    pub fn project(&mut self) {
        self.analysis.project();
        self.hyper_analysis.project();
    }
}

/// Decoder and entropy-model parameters; everything decompression needs.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub synthesis: Sequential,
    pub hyper_synthesis: Sequential,
    pub prior: FactorizedPrior,
}

impl Decoder {
    pub fn new(arch: &Arch, rng: &mut ChaCha8Rng) -> Self {
        let Arch { n, m, m_hyper: mh, image_channels: c } = *arch;
        let synthesis = Sequential::new(vec![
            Layer::Deconv(ConvTranspose2d::new(m, n, 5, 2, rng)),
            Layer::Gdn(Gdn::new(n, true)),
            Layer::Deconv(ConvTranspose2d::new(n, n, 5, 2, rng)),
            Layer::Gdn(Gdn::new(n, true)),
            Layer::Deconv(ConvTranspose2d::new(n, n, 5, 2, rng)),
            Layer::Gdn(Gdn::new(n, true)),
            Layer::Deconv(ConvTranspose2d::new(n, c, 5, 2, rng)),
        ]);
        let hyper_synthesis = Sequential::new(vec![
            Layer::Deconv(ConvTranspose2d::new(mh, mh, 5, 2, rng)),
            Layer::Relu,
            Layer::Deconv(ConvTranspose2d::new(mh, mh, 5, 2, rng)),
            Layer::Relu,
            Layer::Conv(Conv2d::new(mh, m, 3, 1, rng)),
        ]);
        Self {
            synthesis,
            hyper_synthesis,
            prior: FactorizedPrior::new(mh, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            synthesis: self.synthesis.zeros_like(),
            hyper_synthesis: self.hyper_synthesis.zeros_like(),
            prior: self.prior.zeros_like(),
        }
    }

    pub fn params(&self) -> Vec<&Vec<f64>> {
        let mut p = self.synthesis.params();
        p.extend(self.hyper_synthesis.params());
        p.extend(self.prior.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut p = self.synthesis.params_mut();
        p.extend(self.hyper_synthesis.params_mut());
        p.extend(self.prior.params_mut());
        p
    }

    pub fn project(&mut self) {
        self.synthesis.project();
        self.hyper_synthesis.project();
    }

    /// Reconstruction in the `[0, 255]` pixel domain (not clamped).
    pub fn synthesize(&self, y_hat: &Tensor) -> Result<Tensor> {
        ensure_finite(y_hat, "synthesis input")?;
        let mut out = self.synthesis.forward(y_hat);
        out.scale(PIXEL_SCALE);
        Ok(out)
    }

    pub fn synthesis_pass(&self, y_hat: &Tensor) -> SynthesisPass {
        SynthesisPass {
            acts: self.synthesis.forward_cached(y_hat),
        }
    }

    /// `(mu, sigma)` of the conditional prior; `mu` is identically zero.
    pub fn hyper_synthesize(&self, z_hat: &Tensor) -> Result<(Tensor, Tensor)> {
        ensure_finite(z_hat, "hyper-synthesis input")?;
        let pass = self.hyper_pass(z_hat);
        Ok((Tensor::zeros(pass.sigma.shape()), pass.sigma))
    }

    pub fn hyper_pass(&self, z_hat: &Tensor) -> HyperPass {
        let acts = self.hyper_synthesis.forward_cached(z_hat);
        let raw = acts.last().expect("non-empty");
        let sigma = raw.map(|r| SIGMA_FLOOR + softplus(r));
        HyperPass { acts, sigma }
    }
}

pub struct SynthesisPass {
    acts: Vec<Tensor>,
}

impl SynthesisPass {
    /// Reconstruction in the pixel domain.
    pub fn output(&self) -> Tensor {
        let mut out = self.acts.last().expect("non-empty").clone();
        out.scale(PIXEL_SCALE);
        out
    }

    /// Gradient with respect to the latent given the gradient with respect
    /// to the pixel-domain reconstruction.
    pub fn backward(&self, decoder: &Decoder, g_xbar: &Tensor, grad: Option<&mut Sequential>) -> Tensor {
        let mut g = g_xbar.clone();
        g.scale(PIXEL_SCALE);
        decoder.synthesis.backward(&self.acts, g, grad)
    }
}

pub struct HyperPass {
    acts: Vec<Tensor>,
    pub sigma: Tensor,
}

impl HyperPass {
    pub fn backward(&self, decoder: &Decoder, g_sigma: &Tensor, grad: Option<&mut Sequential>) -> Tensor {
        let raw = self.acts.last().expect("non-empty");
        let g_raw = raw.zip_map(g_sigma, |r, g| g * sigmoid(r));
        decoder.hyper_synthesis.backward(&self.acts, g_raw, grad)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        libm::log1p(libm::exp(x))
    }
}

fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} contains non-finite values")))
    }
}

pub fn check_image_shape(x: &Tensor, arch: &Arch) -> Result<()> {
    let [b, c, h, w] = x.shape();
    if b == 0 || c != arch.image_channels {
        return Err(Error::Dimension(format!(
            "expected [B>=1, {}, H, W], got {:?}",
            arch.image_channels,
            x.shape()
        )));
    }
    if h == 0 || w == 0 || h % TOTAL_DOWNSAMPLE != 0 || w % TOTAL_DOWNSAMPLE != 0 {
        return Err(Error::Dimension(format!(
            "image {h}x{w} is not divisible by {TOTAL_DOWNSAMPLE}"
        )));
    }
    Ok(())
}

/// 8-byte content hash.
pub type ModelId = [u8; 8];

pub fn id_hex(id: &ModelId) -> String {
    id.iter().map(|b| format!("{b:02x}")).collect()
}

fn hash_params<'a>(tag: &str, arch: &Arch, params: impl IntoIterator<Item = &'a Vec<f64>>) -> ModelId {
    let mut h = Sha256::new();
    h.update(tag.as_bytes());
    for v in [arch.n, arch.m, arch.m_hyper, arch.image_channels] {
        h.update((v as u64).to_le_bytes());
    }
    for p in params {
        h.update((p.len() as u64).to_le_bytes());
        for v in p {
            h.update(v.to_le_bytes());
        }
    }
    let digest = h.finalize();
    let mut id = [0u8; 8];
    id.copy_from_slice(&digest[..8]);
    id
}

/// An encoder fine-tuned against a different rate-distortion weight while
/// sharing the decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct FinetunedEncoder {
    pub encoder: Encoder,
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub arch: Arch,
    pub encoder: Encoder,
    pub decoder: Decoder,
    /// Rate-distortion weight the model was trained with.
    pub lambda: f64,
    pub finetuned: Option<FinetunedEncoder>,
}

impl ModelParams {
    pub fn new(arch: Arch, lambda: f64, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(&arch, &mut rng);
        let decoder = Decoder::new(&arch, &mut rng);
        Ok(Self {
            arch,
            encoder,
            decoder,
            lambda,
            finetuned: None,
        })
    }

    /// Hash of every parameter, including an attached fine-tuned encoder.
    pub fn model_id(&self) -> ModelId {
        let mut params = self.encoder.params();
        params.extend(self.decoder.params());
        if let Some(ft) = &self.finetuned {
            params.extend(ft.encoder.params());
        }
        hash_params("model", &self.arch, params)
    }

    pub fn encoder_id(&self) -> ModelId {
        hash_params("encoder", &self.arch, self.encoder.params())
    }

    /// Hash of the decoder and entropy model; this is what a bitstream
    /// records, since decoding never touches the encoder.
    pub fn decoder_id(&self) -> ModelId {
        hash_params("decoder", &self.arch, self.decoder.params())
    }

    pub fn analyze(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.analyze_with(&self.encoder, x)
    }

    pub fn analyze_with(&self, encoder: &Encoder, x: &Tensor) -> Result<(Tensor, Tensor)> {
        check_image_shape(x, &self.arch)?;
        ensure_finite(x, "image")?;
        let y = encoder.analysis.forward(&x.map(|v| v / PIXEL_SCALE));
        let z = encoder.hyper_analysis.forward(&y.map(f64::abs));
        Ok((y, z))
    }

    pub fn synthesize(&self, y_hat: &Tensor) -> Result<Tensor> {
        self.decoder.synthesize(y_hat)
    }

    pub fn hyper_synthesize(&self, z_hat: &Tensor) -> Result<(Tensor, Tensor)> {
        self.decoder.hyper_synthesize(z_hat)
    }
}

/// Forward pass of the encoder that keeps activations for training.
pub struct AnalysisPass {
    acts: Vec<Tensor>,
    hyper_acts: Vec<Tensor>,
}

impl AnalysisPass {
    pub fn run(encoder: &Encoder, x: &Tensor) -> Self {
        let acts = encoder.analysis.forward_cached(&x.map(|v| v / PIXEL_SCALE));
        let hyper_acts = encoder
            .hyper_analysis
            .forward_cached(&acts.last().expect("non-empty").map(f64::abs));
        Self { acts, hyper_acts }
    }

    pub fn y(&self) -> &Tensor {
        self.acts.last().expect("non-empty")
    }

    pub fn z(&self) -> &Tensor {
        self.hyper_acts.last().expect("non-empty")
    }

    /// Accumulates encoder gradients from `dL/dy` (direct) and `dL/dz`.
    pub fn backward(&self, encoder: &Encoder, g_y: &Tensor, g_z: &Tensor, grad: &mut Encoder) {
        let g_abs = encoder
            .hyper_analysis
            .backward(&self.hyper_acts, g_z.clone(), Some(&mut grad.hyper_analysis));
        let mut g = g_y.clone();
        for ((gv, &y), ga) in g.data_mut().iter_mut().zip(self.y().data()).zip(g_abs.data()) {
            if y != 0.0 {
                *gv += ga * y.signum();
            }
        }
        encoder.analysis.backward(&self.acts, g, Some(&mut grad.analysis));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_arch() -> Arch {
        Arch {
            n: 4,
            m: 6,
            m_hyper: 3,
            image_channels: 3,
        }
    }

    fn random_image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec([1, 3, h, w], (0..3 * h * w).map(|_| rng.gen_range(0.0..255.0)).collect()).unwrap()
    }

    #[test]
    fn analyze_shapes_and_determinism() {
        let model = ModelParams::new(tiny_arch(), 0.015, 1).unwrap();
        let x = random_image(64, 64, 2);
        let (y, z) = model.analyze(&x).unwrap();
        assert_eq!(y.shape(), [1, 6, 4, 4]);
        assert_eq!(z.shape(), [1, 3, 1, 1]);
        let (y2, z2) = model.analyze(&x).unwrap();
        assert_eq!(y, y2);
        assert_eq!(z, z2);
        let (y0, z0) = model.analyze(&Tensor::zeros([1, 3, 64, 64])).unwrap();
        assert!(y0.is_finite() && z0.is_finite());
    }

    #[test]
    fn default_arch_shapes() {
        let model = ModelParams::new(Arch::default(), 0.015, 1).unwrap();
        let (y, z) = model.analyze(&random_image(64, 64, 3)).unwrap();
        assert_eq!(y.shape(), [1, 96, 4, 4]);
        assert_eq!(z.shape(), [1, 64, 1, 1]);
        let (mu, sigma) = model.hyper_synthesize(&z).unwrap();
        assert_eq!(mu.shape(), y.shape());
        assert_eq!(sigma.shape(), y.shape());
    }

    #[test]
    fn indivisible_image_is_rejected() {
        let model = ModelParams::new(tiny_arch(), 0.015, 1).unwrap();
        assert!(matches!(
            model.analyze(&Tensor::zeros([1, 3, 48, 64])),
            Err(Error::Dimension(_))
        ));
        assert!(model.analyze(&Tensor::zeros([1, 1, 64, 64])).is_err());
    }

    #[test]
    fn synthesis_shapes_and_errors() {
        let model = ModelParams::new(tiny_arch(), 0.015, 1).unwrap();
        let out = model.synthesize(&Tensor::zeros([1, 6, 4, 4])).unwrap();
        assert_eq!(out.shape(), [1, 3, 64, 64]);
        assert!(out.is_finite());
        let bad = Tensor::full([1, 6, 4, 4], f64::NAN);
        assert!(matches!(model.synthesize(&bad), Err(Error::Numeric(_))));
    }

    #[test]
    fn sigma_respects_floor_and_depends_on_z() {
        let model = ModelParams::new(tiny_arch(), 0.015, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = Tensor::from_vec([1, 3, 1, 2], (0..6).map(|_| rng.gen_range(-30.0..30.0)).collect()).unwrap();
        let (mu, sigma) = model.hyper_synthesize(&z).unwrap();
        assert!(sigma.data().iter().all(|&s| s >= SIGMA_FLOOR));
        assert!(mu.data().iter().all(|&m| m == 0.0));
        let mut z2 = z.clone();
        z2.data_mut()[0] += 1e-3;
        let (_, sigma2) = model.hyper_synthesize(&z2).unwrap();
        assert!(sigma.data().iter().zip(sigma2.data()).any(|(a, b)| a != b));
    }

    #[test]
    fn ids_track_parameter_changes() {
        let a = ModelParams::new(tiny_arch(), 0.015, 1).unwrap();
        let b = ModelParams::new(tiny_arch(), 0.015, 1).unwrap();
        assert_eq!(a.model_id(), b.model_id());
        let mut c = a.clone();
        c.decoder.prior.biases[0][0] += 1e-12;
        assert_ne!(a.model_id(), c.model_id());
        assert_ne!(a.decoder_id(), c.decoder_id());
        assert_eq!(a.encoder_id(), c.encoder_id());
        let mut d = a.clone();
        d.encoder.params_mut()[0][0] += 1.0;
        assert_ne!(a.model_id(), d.model_id());
        assert_eq!(a.decoder_id(), d.decoder_id());
    }

    fn directional_fd(f: impl Fn(&Tensor) -> f64, x: &Tensor, dir: &Tensor) -> f64 {
        let h = 1e-3;
        let mut xp = x.clone();
        let mut xm = x.clone();
        for ((p, m), d) in xp.data_mut().iter_mut().zip(xm.data_mut()).zip(dir.data()) {
            *p += h * d;
            *m -= h * d;
        }
        (f(&xp) - f(&xm)) / (2.0 * h)
    }

    fn random_tensor(shape: [usize; 4], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
    }

    #[test]
    fn synthesis_jvp_matches_finite_differences() {
        let model = ModelParams::new(tiny_arch(), 0.015, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..3 {
            let y = random_tensor([1, 6, 1, 2], 3.0, &mut rng);
            let w = random_tensor([1, 3, 16, 32], 1.0, &mut rng);
            let dir = random_tensor(y.shape(), 1.0, &mut rng);
            let f = |t: &Tensor| {
                let out = model.synthesize(t).unwrap();
                out.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>()
            };
            let pass = model.decoder.synthesis_pass(&y);
            let g = pass.backward(&model.decoder, &w, None);
            let analytic: f64 = g.data().iter().zip(dir.data()).map(|(a, b)| a * b).sum();
            let numeric = directional_fd(f, &y, &dir);
            assert!(
                (analytic - numeric).abs() <= 1e-3 * numeric.abs().max(1.0),
                "{analytic} vs {numeric}"
            );
        }
    }

    #[test]
    fn hyper_synthesis_jvp_matches_finite_differences() {
        let model = ModelParams::new(tiny_arch(), 0.015, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..3 {
            let z = random_tensor([1, 3, 1, 1], 3.0, &mut rng);
            let w = random_tensor([1, 6, 4, 4], 1.0, &mut rng);
            let dir = random_tensor(z.shape(), 1.0, &mut rng);
            let f = |t: &Tensor| {
                let (_, s) = model.hyper_synthesize(t).unwrap();
                s.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>()
            };
            let pass = model.decoder.hyper_pass(&z);
            let g = pass.backward(&model.decoder, &w, None);
            let analytic: f64 = g.data().iter().zip(dir.data()).map(|(a, b)| a * b).sum();
            let numeric = directional_fd(f, &z, &dir);
            assert!(
                (analytic - numeric).abs() <= 1e-3 * numeric.abs().max(1e-3),
                "{analytic} vs {numeric}"
            );
        }
    }

    #[test]
    fn encoder_backward_matches_finite_differences() {
        let model = ModelParams::new(tiny_arch(), 0.015, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random_image(64, 64, 13);
        let pass = AnalysisPass::run(&model.encoder, &x);
        let gy = random_tensor(pass.y().shape(), 1.0, &mut rng);
        let gz = random_tensor(pass.z().shape(), 1.0, &mut rng);
        let mut grad = model.encoder.zeros_like();
        pass.backward(&model.encoder, &gy, &gz, &mut grad);
        let loss = |enc: &Encoder| {
            let p = AnalysisPass::run(enc, &x);
            let a: f64 = p.y().data().iter().zip(gy.data()).map(|(a, b)| a * b).sum();
            let b: f64 = p.z().data().iter().zip(gz.data()).map(|(a, b)| a * b).sum();
            a + b
        };
        let n_params = grad.params().len();
        for pi in [0, 1, n_params - 2, n_params - 1] {
            let len = grad.params()[pi].len();
            let idx = rng.gen_range(0..len);
            let mut plus = model.encoder.clone();
            let mut minus = model.encoder.clone();
            plus.params_mut()[pi][idx] += 1e-5;
            minus.params_mut()[pi][idx] -= 1e-5;
            let numeric = (loss(&plus) - loss(&minus)) / 2e-5;
            let analytic = grad.params()[pi][idx];
            assert!(
                (analytic - numeric).abs() <= 1e-3 * numeric.abs().max(1e-2),
                "param {pi}: {analytic} vs {numeric}"
            );
        }
    }
}
