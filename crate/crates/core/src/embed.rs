//! Multi-view patch embedding: images are cut into `P x P` patches, each view
//! gets its own linear projection and learned position table, and the views'
//! token rows are stacked into one sequence.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{Tape, Tensor, Var};

/// One camera image, stored height-major with channels innermost.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::config(format!(
                "image extents must be positive, got {channels}x{height}x{width}"
            )));
        }
        if pixels.len() != channels * height * width {
            return Err(Error::Dimension {
                op: "image",
                lhs: vec![height, width, channels],
                rhs: vec![pixels.len()],
            });
        }
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::contract(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Image {
            channels,
            height,
            width,
            pixels,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn geometry(&self) -> ViewGeometry {
        ViewGeometry {
            channels: self.channels,
            height: self.height,
            width: self.width,
        }
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }
}

/// All views observed at one timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewFrame {
    views: Vec<Image>,
}

impl MultiViewFrame {
    pub fn new(views: Vec<Image>) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::config("a frame needs at least one view"));
        }
        Ok(MultiViewFrame { views })
    }

    pub fn views(&self) -> &[Image] {
        &self.views
    }

    pub fn geometry(&self) -> Vec<ViewGeometry> {
        self.views.iter().map(Image::geometry).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ViewGeometry {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        ViewGeometry {
            channels,
            height,
            width,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchConfig {
    patch: usize,
}

impl PatchConfig {
    pub fn new(patch: usize) -> Result<Self> {
        if patch == 0 {
            return Err(Error::config("patch size must be at least 1"));
        }
        Ok(PatchConfig { patch })
    }

    pub fn size(&self) -> usize {
        self.patch
    }

    /// Patch grid (rows, cols) for an image of the given size.
    pub fn grid(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let p = self.patch;
        if !height.is_multiple_of(p) || !width.is_multiple_of(p) {
            return Err(Error::config(format!(
                "image {height}x{width} is not divisible by patch size {p}"
            )));
        }
        Ok((height / p, width / p))
    }

    /// `N_m = H_m * W_m / P^2`.
    pub fn patches_per_view(&self, height: usize, width: usize) -> Result<usize> {
        let (gh, gw) = self.grid(height, width)?;
        Ok(gh * gw)
    }

    /// Flattened patch width `P^2 * C`.
    pub fn patch_dim(&self, channels: usize) -> usize {
        self.patch * self.patch * channels
    }
}

/// Cuts an image into its patch matrix, one row per patch.
///
/// Patches are ordered row-major over the grid; inside a patch, pixels are
/// row-major and channels innermost.
pub fn patchify(image: &Image, cfg: PatchConfig) -> Result<Tensor> {
    let (gh, gw) = cfg.grid(image.height, image.width)?;
    let p = cfg.size();
    let c = image.channels;
    let row_len = p * p * c;
    let mut data = Vec::with_capacity(gh * gw * row_len);
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..p {
                let y = gy * p + py;
                let start = (y * image.width + gx * p) * c;
                data.extend(image.pixels[start..start + p * c].iter().map(|&v| f64::from(v)));
            }
        }
    }
    Tensor::matrix(gh * gw, row_len, data)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, cfg: PatchConfig, geometry: ViewGeometry) -> Result<Image> {
    let ViewGeometry {
        channels: c,
        height,
        width,
    } = geometry;
    let (gh, gw) = cfg.grid(height, width)?;
    let p = cfg.size();
    if patches.shape() != [gh * gw, p * p * c] {
        return Err(Error::Dimension {
            op: "unpatchify",
            lhs: patches.shape().to_vec(),
            rhs: vec![gh * gw, p * p * c],
        });
    }
    let mut pixels = vec![0f32; height * width * c];
    for (idx, row) in patches.data().chunks(p * p * c).enumerate() {
        let (gy, gx) = (idx / gw, idx % gw);
        for py in 0..p {
            let y = gy * p + py;
            let start = (y * width + gx * p) * c;
            for (dst, &src) in pixels[start..start + p * c].iter_mut().zip(&row[py * p * c..]) {
                *dst = src as f32;
            }
        }
    }
    Image::new(c, height, width, pixels)
}

/// Per-view projection `E_m` and position table `E_m^pos`.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewEmbedder {
    pub proj: Tensor,
    pub pos: Tensor,
}

impl ViewEmbedder {
    /// Xavier-uniform projection and `N(0, 0.02^2)` position embeddings.
    pub fn init(
        rng: &mut impl Rng,
        geometry: ViewGeometry,
        cfg: PatchConfig,
        dim: usize,
    ) -> Result<Self> {
        let n = cfg.patches_per_view(geometry.height, geometry.width)?;
        let fan_in = cfg.patch_dim(geometry.channels);
        Ok(ViewEmbedder {
            proj: xavier_uniform(rng, fan_in, dim),
            pos: normal_matrix(rng, n, dim, 0.02),
        })
    }

    pub fn num_params(&self) -> usize {
        self.proj.numel() + self.pos.numel()
    }
}

/// `patches * E_m + E_m^pos`.
pub fn embed_view(tape: &mut Tape, patches: Var, proj: Var, pos: Var) -> Result<Var> {
    let pw = tape.value(patches).cols();
    let (rows, _) = (tape.value(proj).rows(), tape.value(proj).cols());
    if pw != rows {
        return Err(Error::Dimension {
            op: "embed_view",
            lhs: tape.value(patches).shape().to_vec(),
            rhs: tape.value(proj).shape().to_vec(),
        });
    }
    let projected = tape.matmul(patches, proj)?;
    if tape.value(projected).shape() != tape.value(pos).shape() {
        return Err(Error::Dimension {
            op: "embed_view",
            lhs: tape.value(projected).shape().to_vec(),
            rhs: tape.value(pos).shape().to_vec(),
        });
    }
    tape.add(projected, pos)
}

/// Stacks the per-view token matrices; view `m` starts at row `sum_{j<m} N_j`.
pub fn concat_views(tape: &mut Tape, view_tokens: &[Var]) -> Result<Var> {
    tape.concat_tokens(view_tokens)
}

pub(crate) fn xavier_uniform(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::matrix(fan_in, fan_out, data).expect("shape matches data")
}

pub(crate) fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::matrix(rows, cols, data).expect("shape matches data")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::finite_diff_grad_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ramp_image(c: usize, h: usize, w: usize) -> Image {
        let n = c * h * w;
        let pixels = (0..n).map(|i| i as f32 / n as f32).collect();
        Image::new(c, h, w, pixels).unwrap()
    }

    #[test]
    fn single_patch_is_whole_image() {
        let img = ramp_image(3, 4, 4);
        let patches = patchify(&img, PatchConfig::new(4).unwrap()).unwrap();
        assert_eq!(patches.shape(), &[1, 48]);
        let flat: Vec<f64> = img.pixels().iter().map(|&v| f64::from(v)).collect();
        assert_eq!(patches.data(), flat.as_slice());
    }

    #[test]
    fn patch_counts() {
        let p16 = PatchConfig::new(16).unwrap();
        assert_eq!(p16.patches_per_view(224, 224).unwrap(), 196);
        assert_eq!(2 * p16.patches_per_view(224, 224).unwrap(), 392);
        assert_eq!(p16.grid(224, 224).unwrap(), (14, 14));
        let p8 = PatchConfig::new(8).unwrap();
        let img = ramp_image(1, 32, 32);
        assert_eq!(patchify(&img, p8).unwrap().shape(), &[16, 64]);
    }

    #[test]
    fn patch_layout_is_pixel_row_major_channels_inner() {
        // 2 channels, 2x4 image, P=2: patch 1 covers columns 2..4.
        let img = ramp_image(2, 2, 4);
        let patches = patchify(&img, PatchConfig::new(2).unwrap()).unwrap();
        let expect: Vec<f64> = [(0, 2), (0, 3), (1, 2), (1, 3)]
            .iter()
            .flat_map(|&(y, x)| (0..2).map(move |c| (y, x, c)))
            .map(|(y, x, c)| f64::from(img.get(y, x, c)))
            .collect();
        assert_eq!(patches.row(1), expect.as_slice());
    }

    #[test]
    fn non_divisible_is_config_error() {
        let img = ramp_image(1, 30, 32);
        assert!(matches!(
            patchify(&img, PatchConfig::new(8).unwrap()),
            Err(Error::Config(_))
        ));
        assert!(PatchConfig::new(0).is_err());
    }

    #[test]
    fn pixel_range_enforced() {
        assert!(Image::new(1, 1, 2, vec![0.5, 1.5]).is_err());
        assert!(Image::new(1, 1, 2, vec![0.5, f32::NAN]).is_err());
        assert!(MultiViewFrame::new(Vec::new()).is_err());
    }

    proptest! {
        #[test]
        fn patchify_is_lossless(
            c in 1usize..4, gh in 1usize..4, gw in 1usize..4, p in 1usize..5,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (h, w) = (gh * p, gw * p);
            let pixels = (0..c * h * w).map(|_| rng.random_range(0.0f32..=1.0)).collect();
            let img = Image::new(c, h, w, pixels).unwrap();
            let cfg = PatchConfig::new(p).unwrap();
            let back = unpatchify(&patchify(&img, cfg).unwrap(), cfg, img.geometry()).unwrap();
            prop_assert_eq!(back, img);
        }
    }

    fn embedder(seed: u64, geometry: ViewGeometry, p: usize, d: usize) -> ViewEmbedder {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ViewEmbedder::init(&mut rng, geometry, PatchConfig::new(p).unwrap(), d).unwrap()
    }

    fn run_embed(patches: &Tensor, e: &ViewEmbedder) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(patches.clone());
        let proj = tape.constant(e.proj.clone());
        let pos = tape.constant(e.pos.clone());
        let out = embed_view(&mut tape, x, proj, pos)?;
        Ok(tape.value(out).clone())
    }

    #[test]
    fn zero_patches_give_position_table() {
        let g = ViewGeometry::new(1, 16, 16);
        let e = embedder(1, g, 8, 6);
        let out = run_embed(&Tensor::zeros(&[4, 64]), &e).unwrap();
        assert_eq!(out, e.pos);
        assert_eq!(out.shape(), &[4, 6]);
    }

    #[test]
    fn crafted_identity_projection_copies_patch() {
        // one 2x2 single-channel patch, D = 6, E = [I_4 | 0], E_pos = 0
        let img = Image::new(1, 2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let patches = patchify(&img, PatchConfig::new(2).unwrap()).unwrap();
        let mut proj = Tensor::zeros(&[4, 6]);
        for i in 0..4 {
            proj.data_mut()[i * 6 + i] = 1.0;
        }
        let e = ViewEmbedder {
            proj,
            pos: Tensor::zeros(&[1, 6]),
        };
        let out = run_embed(&patches, &e).unwrap();
        assert_eq!(&out.data()[..4], patches.data());
        assert_eq!(&out.data()[4..], &[0.0, 0.0]);
    }

    #[test]
    fn width_mismatch_is_dimension_error() {
        let g = ViewGeometry::new(1, 16, 16);
        let e = embedder(1, g, 8, 6);
        assert!(matches!(
            run_embed(&Tensor::zeros(&[4, 63]), &e),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn concat_views_offsets() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::full(&[16, 4], 1.0));
        let b = tape.constant(Tensor::full(&[16, 4], 2.0));
        let z = concat_views(&mut tape, &[a, b]).unwrap();
        assert_eq!(tape.value(z).shape(), &[32, 4]);
        assert_eq!(tape.value(z).row(16), &[2.0; 4]);
        assert_eq!(tape.value(z).row(15), &[1.0; 4]);
        let single = concat_views(&mut tape, &[a]).unwrap();
        assert_eq!(tape.value(single), tape.value(a));
    }

    proptest! {
        #[test]
        fn embed_view_is_affine(alpha in -3.0f64..3.0, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = ViewGeometry::new(2, 8, 8);
            let e = embedder(seed, g, 4, 5);
            let x = Tensor::matrix(4, 32, (0..128).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
            let ax = x.map(|v| alpha * v);
            let zero = run_embed(&Tensor::zeros(&[4, 32]), &e).unwrap();
            let ex = run_embed(&x, &e).unwrap();
            let eax = run_embed(&ax, &e).unwrap();
            for i in 0..zero.numel() {
                let lhs = eax.data()[i] - zero.data()[i];
                let rhs = alpha * (ex.data()[i] - zero.data()[i]);
                prop_assert!((lhs - rhs).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn embed_gradients_pass_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = ViewGeometry::new(1, 8, 8);
        let e = embedder(5, g, 4, 3);
        let x = Tensor::matrix(4, 16, (0..64).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let eval = |ps: &[Tensor], grad: bool| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let proj = tape.param(ps[0].clone());
            let pos = tape.param(ps[1].clone());
            let out = embed_view(&mut tape, xv, proj, pos).unwrap();
            let act = tape.gelu(out).unwrap();
            let sq = tape.mul(act, act).unwrap();
            let loss = tape.sum(sq).unwrap();
            let v = tape.value(loss).item().unwrap();
            let grads = grad.then(|| {
                let g = tape.backward(loss).unwrap();
                vec![g.get(proj).unwrap().clone(), g.get(pos).unwrap().clone()]
            });
            (v, grads)
        };
        let params = vec![e.proj.clone(), e.pos.clone()];
        let analytic = eval(&params, true).1.unwrap();
        let report =
            finite_diff_grad_check(&params, &analytic, 1e-5, 1e-4, |ps| Ok(eval(ps, false).0))
                .unwrap();
        assert!(report.passed, "{report:?}");
    }
}
