//! The three supervision signals: a gray-world colorimetric loss on the
//! enhanced render, a Sobel-gradient structural loss tying enhanced edges to
//! the input's edges, and an L1 + D-SSIM reconstruction loss on the raw
//! render. Every loss returns exact gradients w.r.t. its image inputs (and
//! the per-Gaussian gamma coefficients where they enter).

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::img::Image;
use crate::rasterizer::RenderOutput;
use crate::scene::CameraView;

/// Loss hyperparameters. `w_color`/`w_grad` weight the colorimetric and
/// gradient terms in the combined objective; the image term has weight 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Target gray level for the enhanced render.
    pub e: f64,
    /// Weight of the channel-variance term.
    pub lambda1: f64,
    /// Stabilizer in the variance ratio denominator.
    pub beta1: f64,
    /// Weight of the gamma-norm regularizer.
    pub lambda2: f64,
    /// SSIM share of the reconstruction loss.
    pub lambda_ssim: f64,
    pub w_color: f64,
    pub w_grad: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            e: 0.55,
            lambda1: 0.5,
            beta1: 0.01,
            lambda2: 0.01,
            lambda_ssim: 0.2,
            w_color: 0.1,
            w_grad: 0.1,
        }
    }
}

/// Values and gradient buffers from `total_loss`.
pub struct LossReport {
    pub l_image: f64,
    pub l_color: f64,
    pub l_grad: f64,
    pub total: f64,
    pub d_image_raw: Image,
    pub d_image_enhanced: Image,
    pub d_material_map: Image,
    /// Per-slot gamma gradients, aligned with the render cache.
    pub d_gammas: Vec<Vector3<f64>>,
}

const SOBEL_EPS: f64 = 1e-12;
const K1: [[f64; 3]; 3] = [[1.0, 0.0, -1.0], [2.0, 0.0, -2.0], [1.0, 0.0, -1.0]];
const K2: [[f64; 3]; 3] = [[1.0, 2.0, 1.0], [0.0, 0.0, 0.0], [-1.0, -2.0, -1.0]];

fn correlate3x3_replicate(img: &Image, kernel: &[[f64; 3]; 3]) -> Image {
    assert_eq!(img.channels, 1);
    let (w, h) = (img.width as isize, img.height as isize);
    let mut out = Image::zeros(img.width, img.height, 1);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let sx = (x + dx).clamp(0, w - 1) as usize;
                    let sy = (y + dy).clamp(0, h - 1) as usize;
                    acc += kernel[(dy + 1) as usize][(dx + 1) as usize]
                        * img.data[sy * img.width + sx];
                }
            }
            out.data[(y * w + x) as usize] = acc;
        }
    }
    out
}

/// Adjoint of `correlate3x3_replicate`: scatter the upstream through the same
/// clamped taps.
fn correlate3x3_replicate_adjoint(upstream: &Image, kernel: &[[f64; 3]; 3]) -> Image {
    assert_eq!(upstream.channels, 1);
    let (w, h) = (upstream.width as isize, upstream.height as isize);
    let mut out = Image::zeros(upstream.width, upstream.height, 1);
    for y in 0..h {
        for x in 0..w {
            let u = upstream.data[(y * w + x) as usize];
            if u == 0.0 {
                continue;
            }
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let sx = (x + dx).clamp(0, w - 1) as usize;
                    let sy = (y + dy).clamp(0, h - 1) as usize;
                    out.data[sy * upstream.width + sx] +=
                        kernel[(dy + 1) as usize][(dx + 1) as usize] * u;
                }
            }
        }
    }
    out
}

/// Sobel gradient magnitude of a single-channel image, replicate padding,
/// smoothed sqrt for differentiability.
pub fn sobel(image: &Image) -> Image {
    let g1 = correlate3x3_replicate(image, &K1);
    let g2 = correlate3x3_replicate(image, &K2);
    let mut out = Image::zeros(image.width, image.height, 1);
    for i in 0..out.data.len() {
        out.data[i] = (g1.data[i] * g1.data[i] + g2.data[i] * g2.data[i] + SOBEL_EPS).sqrt();
    }
    out
}

/// Maps dL/d(sobel output) back to dL/d(input image).
pub fn sobel_backward(image: &Image, upstream: &Image) -> Image {
    let g1 = correlate3x3_replicate(image, &K1);
    let g2 = correlate3x3_replicate(image, &K2);
    let mut d_g1 = Image::zeros(image.width, image.height, 1);
    let mut d_g2 = Image::zeros(image.width, image.height, 1);
    for i in 0..upstream.data.len() {
        let g = (g1.data[i] * g1.data[i] + g2.data[i] * g2.data[i] + SOBEL_EPS).sqrt();
        d_g1.data[i] = upstream.data[i] * g1.data[i] / g;
        d_g2.data[i] = upstream.data[i] * g2.data[i] / g;
    }
    let mut out = correlate3x3_replicate_adjoint(&d_g1, &K1);
    let other = correlate3x3_replicate_adjoint(&d_g2, &K2);
    for (a, b) in out.data.iter_mut().zip(&other.data) {
        *a += b;
    }
    out
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Separable same-size correlation with the Gaussian window, zero padding.
/// The kernel is symmetric, so this is its own adjoint.
fn gauss_filter(img: &Image) -> Image {
    let k = ssim_kernel();
    let half = SSIM_WINDOW as isize / 2;
    let (w, h, c) = (img.width, img.height, img.channels);
    let mut tmp = Image::zeros(w, h, c);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for t in -half..=half {
                    let sx = x as isize + t;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    acc += k[(t + half) as usize] * img.get(sx as usize, y, ch);
                }
                tmp.set(x, y, ch, acc);
            }
        }
    }
    let mut out = Image::zeros(w, h, c);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for t in -half..=half {
                    let sy = y as isize + t;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    acc += k[(t + half) as usize] * tmp.get(x, sy as usize, ch);
                }
                out.set(x, y, ch, acc);
            }
        }
    }
    out
}

/// Mean local SSIM over all pixels and channels, 11×11 Gaussian window,
/// plus the exact gradient w.r.t. `a`.
pub fn ssim(a: &Image, b: &Image) -> (f64, Image) {
    assert!(a.same_shape(b), "ssim expects same-shaped images");
    let mu1 = gauss_filter(a);
    let mu2 = gauss_filter(b);
    let s1 = gauss_filter(&elementwise(a, a));
    let s2 = gauss_filter(&elementwise(b, b));
    let s12 = gauss_filter(&elementwise(a, b));

    let n = a.data.len() as f64;
    let mut value = 0.0;
    let mut d_mu1 = Image::zeros(a.width, a.height, a.channels);
    let mut d_s1 = Image::zeros(a.width, a.height, a.channels);
    let mut d_s12 = Image::zeros(a.width, a.height, a.channels);
    for i in 0..a.data.len() {
        let m1 = mu1.data[i];
        let m2 = mu2.data[i];
        let var1 = s1.data[i] - m1 * m1;
        let var2 = s2.data[i] - m2 * m2;
        let cov = s12.data[i] - m1 * m2;
        let n1 = 2.0 * m1 * m2 + SSIM_C1;
        let n2 = 2.0 * cov + SSIM_C2;
        let d1 = m1 * m1 + m2 * m2 + SSIM_C1;
        let d2 = var1 + var2 + SSIM_C2;
        let s = (n1 * n2) / (d1 * d2);
        value += s;

        let m = 1.0 / n;
        // Partials w.r.t. the filtered fields.
        let ds_dvar1 = -n1 * n2 / (d1 * d2 * d2);
        let ds_dcov = 2.0 * n1 / (d1 * d2);
        let ds_dmu1 = 2.0 * m2 * n2 / (d1 * d2) - 2.0 * m1 * n1 * n2 / (d1 * d1 * d2)
            + ds_dvar1 * (-2.0 * m1)
            + ds_dcov * (-m2);
        d_mu1.data[i] = m * ds_dmu1;
        d_s1.data[i] = m * ds_dvar1;
        d_s12.data[i] = m * ds_dcov;
    }
    value /= n;

    // Adjoint filtering back to pixel space.
    let f_mu1 = gauss_filter(&d_mu1);
    let f_s1 = gauss_filter(&d_s1);
    let f_s12 = gauss_filter(&d_s12);
    let mut grad = Image::zeros(a.width, a.height, a.channels);
    for i in 0..a.data.len() {
        grad.data[i] = f_mu1.data[i] + 2.0 * a.data[i] * f_s1.data[i] + b.data[i] * f_s12.data[i];
    }
    (value, grad)
}

fn elementwise(a: &Image, b: &Image) -> Image {
    let mut out = Image::zeros(a.width, a.height, a.channels);
    for i in 0..a.data.len() {
        out.data[i] = a.data[i] * b.data[i];
    }
    out
}

/// Gray-world colorimetric loss on the enhanced render. Returns the value
/// and gradients w.r.t. the enhanced image, the material map, and the
/// per-Gaussian gamma coefficients.
pub fn gray_world_loss(
    image_enhanced: &Image,
    material_map: &Image,
    gammas: &[Vector3<f64>],
    cfg: &LossConfig,
) -> (f64, Image, Image, Vec<Vector3<f64>>) {
    assert!(image_enhanced.same_shape(material_map));
    assert_eq!(image_enhanced.channels, 3);
    let n_pixels = image_enhanced.width * image_enhanced.height;
    let mut d_enh = Image::zeros(image_enhanced.width, image_enhanced.height, 3);
    let mut d_mat = Image::zeros(image_enhanced.width, image_enhanced.height, 3);

    // Term 1: mean squared deviation from the gray target, over pixels and
    // channels. Term 2: channel variance of the enhanced pixel, relaxed by
    // the channel variance of the composited material.
    let mut term1 = 0.0;
    let mut term2 = 0.0;
    let n1 = (n_pixels * 3) as f64;
    let n2 = n_pixels as f64;
    for p in 0..n_pixels {
        let c_enh = [
            image_enhanced.data[p * 3],
            image_enhanced.data[p * 3 + 1],
            image_enhanced.data[p * 3 + 2],
        ];
        let c_mat = [
            material_map.data[p * 3],
            material_map.data[p * 3 + 1],
            material_map.data[p * 3 + 2],
        ];
        let mean_enh = (c_enh[0] + c_enh[1] + c_enh[2]) / 3.0;
        let mean_mat = (c_mat[0] + c_mat[1] + c_mat[2]) / 3.0;
        let var_enh = c_enh.iter().map(|v| (v - mean_enh) * (v - mean_enh)).sum::<f64>() / 3.0;
        let var_mat = c_mat.iter().map(|v| (v - mean_mat) * (v - mean_mat)).sum::<f64>() / 3.0;
        let denom = cfg.beta1 + var_mat;
        for ch in 0..3 {
            let dev = c_enh[ch] - cfg.e;
            term1 += dev * dev / n1;
            d_enh.data[p * 3 + ch] += 2.0 * dev / n1;
            // d var_enh / d c = 2(c - mean)/3
            d_enh.data[p * 3 + ch] +=
                cfg.lambda1 / n2 * (2.0 / 3.0) * (c_enh[ch] - mean_enh) / denom;
            d_mat.data[p * 3 + ch] += -cfg.lambda1 / n2 * var_enh * (2.0 / 3.0)
                * (c_mat[ch] - mean_mat)
                / (denom * denom);
        }
        term2 += cfg.lambda1 / n2 * var_enh / denom;
    }

    // Term 3: mean L2 norm of the gamma coefficients.
    let mut term3 = 0.0;
    let mut d_gammas = vec![Vector3::zeros(); gammas.len()];
    if !gammas.is_empty() {
        let ng = gammas.len() as f64;
        for (i, g) in gammas.iter().enumerate() {
            let norm = g.norm();
            term3 += cfg.lambda2 * norm / ng;
            if norm > 1e-12 {
                d_gammas[i] = g * (cfg.lambda2 / (ng * norm));
            }
        }
    }

    (term1 + term2 + term3, d_enh, d_mat, d_gammas)
}

/// Structural loss between the Sobel-gradient maps of the enhanced render
/// and the raw input: 1 - SSIM(G(I_e), G(I)). Returns the gradient w.r.t.
/// the enhanced image.
pub fn gradient_loss(image_enhanced: &Image, input: &Image) -> (f64, Image) {
    assert!(image_enhanced.same_shape(input));
    let lum_e = image_enhanced.luminance();
    let lum_i = input.luminance();
    let sob_e = sobel(&lum_e);
    let sob_i = sobel(&lum_i);
    let (s, d_sob_e) = ssim(&sob_e, &sob_i);
    let loss = 1.0 - s;
    let d_sob = d_sob_e.map(|v| -v);
    let d_lum = sobel_backward(&lum_e, &d_sob);
    let mut grad = Image::zeros(image_enhanced.width, image_enhanced.height, 3);
    for p in 0..grad.width * grad.height {
        let u = d_lum.data[p];
        grad.data[p * 3] = 0.299 * u;
        grad.data[p * 3 + 1] = 0.587 * u;
        grad.data[p * 3 + 2] = 0.114 * u;
    }
    (loss, grad)
}

/// Reconstruction loss between the raw render and the preprocessed input:
/// (1-λ)·L1 + λ·(1-SSIM)/2. Returns the gradient w.r.t. the render.
pub fn image_loss(render: &Image, target: &Image, cfg: &LossConfig) -> (f64, Image) {
    assert!(render.same_shape(target));
    let n = render.data.len() as f64;
    let mut l1 = 0.0;
    let mut grad = Image::zeros(render.width, render.height, render.channels);
    for i in 0..render.data.len() {
        let diff = render.data[i] - target.data[i];
        l1 += diff.abs() / n;
        grad.data[i] = (1.0 - cfg.lambda_ssim) * diff.signum() / n;
    }
    let (s, d_s) = ssim(render, target);
    let loss = (1.0 - cfg.lambda_ssim) * l1 + cfg.lambda_ssim * (1.0 - s) / 2.0;
    for i in 0..grad.data.len() {
        grad.data[i] += cfg.lambda_ssim * (-d_s.data[i]) / 2.0;
    }
    (loss, grad)
}

/// Combined objective for one view. The render must carry both paths and the
/// material map (mode = Both).
pub fn total_loss(output: &RenderOutput, view: &CameraView, cfg: &LossConfig) -> LossReport {
    let image_raw = output
        .image_raw
        .as_ref()
        .expect("total_loss needs the raw render (mode = Both)");
    let image_enhanced = output
        .image_enhanced
        .as_ref()
        .expect("total_loss needs the enhanced render (mode = Both)");
    let gammas = output
        .gammas()
        .expect("total_loss needs enhancement coefficients (mode = Both)");

    let (l_image, d_raw) = image_loss(image_raw, &view.preprocessed_image, cfg);
    let (l_color, d_enh_color, d_mat, d_gammas_color) =
        gray_world_loss(image_enhanced, &output.material_map, &gammas, cfg);
    let (l_grad, d_enh_grad) = gradient_loss(image_enhanced, &view.input_image);

    let total = l_image + cfg.w_color * l_color + cfg.w_grad * l_grad;
    let mut d_image_enhanced = Image::zeros(image_enhanced.width, image_enhanced.height, 3);
    for i in 0..d_image_enhanced.data.len() {
        d_image_enhanced.data[i] =
            cfg.w_color * d_enh_color.data[i] + cfg.w_grad * d_enh_grad.data[i];
    }
    let d_material_map = d_mat.map(|v| cfg.w_color * v);
    let d_gammas = d_gammas_color
        .iter()
        .map(|g| g * cfg.w_color)
        .collect();

    LossReport {
        l_image,
        l_color,
        l_grad,
        total,
        d_image_raw: d_raw,
        d_image_enhanced,
        d_material_map,
        d_gammas,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rel_err(a: f64, b: f64) -> f64 {
        let denom = a.abs().max(b.abs());
        if denom < 1e-9 {
            0.0
        } else {
            (a - b).abs() / denom
        }
    }

    fn grad_close(num: f64, ana: f64, rel_tol: f64) -> bool {
        rel_err(num, ana) < rel_tol || (num - ana).abs() < 1e-9
    }

    fn random_image<R: Rng>(rng: &mut R, w: usize, h: usize, c: usize) -> Image {
        Image::from_fn(w, h, c, |_, _, _| rng.random_range(0.0..1.0))
    }

    #[test]
    fn sobel_of_constant_image_is_negligible() {
        let img = Image::constant(16, 16, 1, 0.37);
        let out = sobel(&img);
        assert!(out.data.iter().all(|v| *v <= 1e-6));
    }

    #[test]
    fn sobel_of_horizontal_ramp() {
        let w = 16;
        let img = Image::from_fn(w, 8, 1, |x, _, _| x as f64 / w as f64);
        let out = sobel(&img);
        for y in 1..7 {
            for x in 1..w - 1 {
                assert!(
                    (out.get(x, y, 0) - 8.0 / w as f64).abs() < 1e-9,
                    "interior ramp response at ({x},{y}): {}",
                    out.get(x, y, 0)
                );
            }
        }
    }

    #[test]
    fn sobel_matches_brute_force_convolution() {
        // Vertical step edge; oracle does the padding and taps by hand.
        let mut rng = StdRng::seed_from_u64(70);
        let (w, h) = (9, 7);
        let mut img = Image::from_fn(w, h, 1, |x, _, _| if x < 4 { 0.1 } else { 0.9 });
        for v in img.data.iter_mut() {
            *v += rng.random_range(-0.01..0.01);
        }
        let out = sobel(&img);
        let k1 = [[1.0, 0.0, -1.0], [2.0, 0.0, -2.0], [1.0, 0.0, -1.0]];
        let k2 = [[1.0, 2.0, 1.0], [0.0, 0.0, 0.0], [-1.0, -2.0, -1.0]];
        for y in 0..h {
            for x in 0..w {
                let mut g1 = 0.0;
                let mut g2 = 0.0;
                for dy in -1i32..=1 {
                    for dx in -1i32..=1 {
                        let sx = (x as i32 + dx).clamp(0, w as i32 - 1) as usize;
                        let sy = (y as i32 + dy).clamp(0, h as i32 - 1) as usize;
                        g1 += k1[(dy + 1) as usize][(dx + 1) as usize] * img.get(sx, sy, 0);
                        g2 += k2[(dy + 1) as usize][(dx + 1) as usize] * img.get(sx, sy, 0);
                    }
                }
                let expect = (g1 * g1 + g2 * g2 + 1e-12).sqrt();
                assert!((out.get(x, y, 0) - expect).abs() < 1e-12);
            }
        }
        // Maximal response sits on the edge columns.
        let edge: f64 = out.get(4, 3, 0).max(out.get(3, 3, 0));
        for x in [0usize, 1, 7, 8] {
            assert!(out.get(x, 3, 0) < edge);
        }
    }

    #[test]
    fn sobel_backward_matches_fd() {
        let mut rng = StdRng::seed_from_u64(71);
        let img = random_image(&mut rng, 8, 8, 1);
        let upstream = Image::from_fn(8, 8, 1, |_, _, _| rng.random_range(-1.0..1.0));
        let grad = sobel_backward(&img, &upstream);
        let objective = |img: &Image| -> f64 {
            let s = sobel(img);
            s.data.iter().zip(&upstream.data).map(|(a, b)| a * b).sum()
        };
        let step = 1e-6;
        for i in 0..img.data.len() {
            let mut p = img.clone();
            let mut m = img.clone();
            p.data[i] += step;
            m.data[i] -= step;
            let num = (objective(&p) - objective(&m)) / (2.0 * step);
            assert!(
                grad_close(num, grad.data[i], 1e-6),
                "pixel {i}: num={num} ana={}",
                grad.data[i]
            );
        }
    }

    #[test]
    fn ssim_of_identical_images_is_one() {
        let mut rng = StdRng::seed_from_u64(72);
        let img = random_image(&mut rng, 16, 16, 3);
        let (s, _) = ssim(&img, &img);
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_of_inverted_checkerboard_is_negative() {
        let img = Image::from_fn(16, 16, 1, |x, y, _| ((x + y) % 2) as f64);
        let inv = img.map(|v| 1.0 - v);
        let (s, _) = ssim(&img, &inv);
        assert!(s < 0.0, "ssim = {s}");
    }

    #[test]
    fn ssim_gradient_matches_fd() {
        let mut rng = StdRng::seed_from_u64(73);
        let a = random_image(&mut rng, 8, 8, 1);
        let b = random_image(&mut rng, 8, 8, 1);
        let (_, grad) = ssim(&a, &b);
        let step = 1e-6;
        for i in 0..a.data.len() {
            let mut p = a.clone();
            let mut m = a.clone();
            p.data[i] += step;
            m.data[i] -= step;
            let num = (ssim(&p, &b).0 - ssim(&m, &b).0) / (2.0 * step);
            assert!(
                grad_close(num, grad.data[i], 1e-4),
                "pixel {i}: num={num} ana={}",
                grad.data[i]
            );
        }
    }

    #[test]
    fn gray_world_zero_case() {
        let cfg = LossConfig::default();
        let enh = Image::constant(8, 8, 3, cfg.e);
        let mat = Image::constant(8, 8, 3, 0.4); // achromatic: zero channel variance
        let gammas = vec![Vector3::zeros(); 5];
        let (loss, d_enh, d_mat, d_g) = gray_world_loss(&enh, &mat, &gammas, &cfg);
        assert_eq!(loss, 0.0);
        assert!(d_enh.data.iter().all(|v| *v == 0.0));
        assert!(d_mat.data.iter().all(|v| *v == 0.0));
        assert!(d_g.iter().all(|g| g.norm() == 0.0));
    }

    #[test]
    fn gray_world_term1_closed_form() {
        let cfg = LossConfig {
            e: 0.55,
            lambda1: 0.0,
            lambda2: 0.0,
            ..Default::default()
        };
        let enh = Image::from_fn(4, 4, 3, |_, _, c| if c == 0 { 1.0 } else { 0.0 });
        let mat = Image::constant(4, 4, 3, 0.5);
        let (loss, _, _, _) = gray_world_loss(&enh, &mat, &[], &cfg);
        let expect = (0.45f64.powi(2) + 2.0 * 0.55f64.powi(2)) / 3.0;
        assert!((loss - expect).abs() < 1e-12);
        assert!((loss - 0.2692).abs() < 1e-4);
    }

    #[test]
    fn gray_world_material_variance_relaxes_term2() {
        // Doubling the material's channel spread at a pixel lowers the
        // penalty on a saturated enhanced pixel.
        let cfg = LossConfig::default();
        let enh = Image::from_fn(1, 1, 3, |_, _, c| [0.9, 0.3, 0.1][c]);
        let mat1 = Image::from_fn(1, 1, 3, |_, _, c| [0.55, 0.5, 0.45][c]);
        let mat2 = Image::from_fn(1, 1, 3, |_, _, c| [0.6, 0.5, 0.4][c]);
        let (l1, _, _, _) = gray_world_loss(&enh, &mat1, &[], &cfg);
        let (l2, _, _, _) = gray_world_loss(&enh, &mat2, &[], &cfg);
        assert!(l2 < l1);
    }

    #[test]
    fn gray_world_gradients_match_fd() {
        let mut rng = StdRng::seed_from_u64(74);
        let cfg = LossConfig::default();
        let enh = random_image(&mut rng, 6, 5, 3);
        let mat = random_image(&mut rng, 6, 5, 3);
        let gammas: Vec<Vector3<f64>> = (0..4)
            .map(|_| Vector3::from_fn(|_, _| rng.random_range(-0.5..0.5_f64)))
            .collect();
        let (_, d_enh, d_mat, d_g) = gray_world_loss(&enh, &mat, &gammas, &cfg);
        let step = 1e-6;
        for i in 0..enh.data.len() {
            let mut p = enh.clone();
            let mut m = enh.clone();
            p.data[i] += step;
            m.data[i] -= step;
            let num = (gray_world_loss(&p, &mat, &gammas, &cfg).0
                - gray_world_loss(&m, &mat, &gammas, &cfg).0)
                / (2.0 * step);
            assert!(grad_close(num, d_enh.data[i], 1e-5));
        }
        for i in 0..mat.data.len() {
            let mut p = mat.clone();
            let mut m = mat.clone();
            p.data[i] += step;
            m.data[i] -= step;
            let num = (gray_world_loss(&enh, &p, &gammas, &cfg).0
                - gray_world_loss(&enh, &m, &gammas, &cfg).0)
                / (2.0 * step);
            assert!(grad_close(num, d_mat.data[i], 1e-5));
        }
        for (gi, d) in d_g.iter().enumerate() {
            for a in 0..3 {
                let mut p = gammas.clone();
                let mut m = gammas.clone();
                p[gi][a] += step;
                m[gi][a] -= step;
                let num = (gray_world_loss(&enh, &mat, &p, &cfg).0
                    - gray_world_loss(&enh, &mat, &m, &cfg).0)
                    / (2.0 * step);
                assert!(grad_close(num, d[a], 1e-5));
            }
        }
    }

    /// Synthetic edge image used by the gradient-loss comparisons.
    fn edge_image(w: usize, h: usize) -> Image {
        Image::from_fn(w, h, 3, |x, _, c| {
            let base: f64 = if x < w / 2 { 0.05 } else { 0.2 };
            base * (1.0 + 0.2 * c as f64)
        })
    }

    #[test]
    fn gradient_loss_identity_is_zero() {
        let mut rng = StdRng::seed_from_u64(75);
        let img = random_image(&mut rng, 16, 16, 3);
        let (loss, _) = gradient_loss(&img, &img);
        assert_eq!(loss, 0.0);
    }

    fn box_blur(img: &Image) -> Image {
        let (w, h) = (img.width, img.height);
        let mut out = img.clone();
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let mut acc = 0.0;
                    for dy in -1i32..=1 {
                        for dx in -1i32..=1 {
                            let sx = (x as i32 + dx).clamp(0, w as i32 - 1) as usize;
                            let sy = (y as i32 + dy).clamp(0, h as i32 - 1) as usize;
                            acc += img.get(sx, sy, c);
                        }
                    }
                    out.set(x, y, c, acc / 9.0);
                }
            }
        }
        out
    }

    #[test]
    fn gradient_loss_tolerates_uniform_scaling_but_not_blur() {
        // A 4x brightened edge image keeps its edge structure and stays
        // cheap; blurring a brightened image strictly raises the loss, and
        // more blur costs more.
        let img = edge_image(64, 16);
        let scaled = img.map(|v| (4.0 * v).min(1.0));
        let (loss_scaled, _) = gradient_loss(&scaled, &img);
        assert!(
            loss_scaled < 0.2,
            "uniform brightening should keep edges: {loss_scaled}"
        );

        let scaled_blurred = box_blur(&scaled);
        let (loss_scaled_blurred, _) = gradient_loss(&scaled_blurred, &img);
        assert!(
            loss_scaled_blurred > loss_scaled,
            "blurred ({loss_scaled_blurred}) must cost more than sharp ({loss_scaled})"
        );

        let blur1 = box_blur(&img);
        let blur5 = box_blur(&box_blur(&box_blur(&box_blur(&blur1.clone()))));
        let (l1, _) = gradient_loss(&blur1, &img);
        let (l5, _) = gradient_loss(&blur5, &img);
        assert!(l5 > l1, "heavier blur must cost more: {l5} vs {l1}");
    }

    #[test]
    fn gradient_loss_grad_matches_fd() {
        let mut rng = StdRng::seed_from_u64(76);
        let img = random_image(&mut rng, 8, 8, 3);
        let target = random_image(&mut rng, 8, 8, 3);
        let (_, grad) = gradient_loss(&img, &target);
        let step = 1e-6;
        for i in 0..img.data.len() {
            let mut p = img.clone();
            let mut m = img.clone();
            p.data[i] += step;
            m.data[i] -= step;
            let num =
                (gradient_loss(&p, &target).0 - gradient_loss(&m, &target).0) / (2.0 * step);
            assert!(
                grad_close(num, grad.data[i], 1e-4),
                "pixel {i}: num={num} ana={}",
                grad.data[i]
            );
        }
    }

    #[test]
    fn image_loss_identity_is_zero() {
        let mut rng = StdRng::seed_from_u64(77);
        let img = random_image(&mut rng, 12, 9, 3);
        let (loss, _) = image_loss(&img, &img, &LossConfig::default());
        assert!(loss.abs() < 1e-15);
    }

    #[test]
    fn image_loss_pure_l1_offset() {
        let cfg = LossConfig {
            lambda_ssim: 0.0,
            ..Default::default()
        };
        let target = Image::constant(8, 8, 3, 0.3);
        let render = Image::constant(8, 8, 3, 0.4);
        let (loss, grad) = image_loss(&render, &target, &cfg);
        assert!((loss - 0.1).abs() < 1e-12);
        let n = render.data.len() as f64;
        assert!(grad.data.iter().all(|v| (v - 1.0 / n).abs() < 1e-15));
    }

    #[test]
    fn image_loss_matches_straight_line_recomputation() {
        let mut rng = StdRng::seed_from_u64(78);
        let cfg = LossConfig {
            lambda_ssim: 0.2,
            ..Default::default()
        };
        let a = random_image(&mut rng, 10, 10, 3);
        let b = random_image(&mut rng, 10, 10, 3);
        let (loss, _) = image_loss(&a, &b, &cfg);
        let l1: f64 =
            a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.data.len() as f64;
        let s = ssim(&a, &b).0;
        let expect = 0.8 * l1 + 0.2 * (1.0 - s) / 2.0;
        assert!((loss - expect).abs() < 1e-12);
    }

    #[test]
    fn image_loss_grad_matches_fd() {
        let mut rng = StdRng::seed_from_u64(79);
        let cfg = LossConfig::default();
        let a = random_image(&mut rng, 8, 8, 3);
        let b = random_image(&mut rng, 8, 8, 3);
        let (_, grad) = image_loss(&a, &b, &cfg);
        let step = 1e-6;
        for i in 0..a.data.len() {
            let mut p = a.clone();
            let mut m = a.clone();
            p.data[i] += step;
            m.data[i] -= step;
            let num = (image_loss(&p, &b, &cfg).0 - image_loss(&m, &b, &cfg).0) / (2.0 * step);
            assert!(grad_close(num, grad.data[i], 1e-4));
        }
    }

    #[test]
    fn losses_are_finite_and_nonnegative_on_random_inputs() {
        let mut rng = StdRng::seed_from_u64(80);
        let cfg = LossConfig::default();
        for _ in 0..20 {
            let a = random_image(&mut rng, 10, 8, 3);
            let b = random_image(&mut rng, 10, 8, 3);
            let gammas: Vec<Vector3<f64>> = (0..3)
                .map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0_f64)))
                .collect();
            let (l1, _) = image_loss(&a, &b, &cfg);
            let (l2, _) = gradient_loss(&a, &b);
            let (l3, _, _, _) = gray_world_loss(&a, &b, &gammas, &cfg);
            for l in [l1, l2, l3] {
                assert!(l.is_finite() && l >= 0.0, "loss = {l}");
            }
        }
    }

    #[test]
    fn gray_world_term2_depends_on_variance_only() {
        // A channel-mean shift that keeps the per-pixel channel variance
        // fixed leaves term 2 unchanged.
        let cfg = LossConfig {
            e: 0.5,
            lambda1: 1.0,
            lambda2: 0.0,
            ..Default::default()
        };
        let base = Image::from_fn(1, 1, 3, |_, _, c| [0.2, 0.4, 0.5][c]);
        let shifted = base.map(|v| v + 0.1);
        let mat = Image::constant(1, 1, 3, 0.5);
        let term2_of = |img: &Image| {
            let (total, _, _, _) = gray_world_loss(img, &mat, &[], &cfg);
            let cfg1 = LossConfig {
                lambda1: 0.0,
                ..cfg
            };
            let (term1, _, _, _) = gray_world_loss(img, &mat, &[], &cfg1);
            total - term1
        };
        assert!((term2_of(&base) - term2_of(&shifted)).abs() < 1e-12);
    }
}
