//! Deterministic image preprocessing.
//!
//! Images hold pixels in `[0,1]`, row-major, 1 or 3 channels. All operations
//! are pure functions: grayscale conversion, bilinear resize with half-pixel
//! center alignment, overlapping patch extraction with exact mean stitching,
//! and affine augmentation via inverse-mapped bilinear resampling.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;

/// Grayscale or RGB raster with pixels in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Argument("image dimensions must be positive".into()));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Argument(format!("channels must be 1 or 3, got {channels}")));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::Argument(format!(
                "pixel count {} does not match {height}x{width}x{channels}",
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Argument(format!("pixel value {bad} outside [0,1]")));
        }
        Ok(Image { height, width, channels, pixels })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        Image::new(height, width, channels, vec![0.0; height * width * channels])
    }

    /// Builds a grayscale image from a pixel function of (row, col).
    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut pixels = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(y, x).clamp(0.0, 1.0));
            }
        }
        Image::new(height, width, 1, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    /// Grayscale image as a `[1,1,H,W]` tensor.
    pub fn to_tensor(&self) -> Result<Tensor> {
        if self.channels != 1 {
            return Err(Error::Argument("to_tensor expects a grayscale image".into()));
        }
        Tensor::from_vec(&[1, 1, self.height, self.width], self.pixels.clone())
    }

    /// Reads a `[1,1,H,W]` or `[H,W]`-shaped tensor back as a grayscale image,
    /// clamping values into `[0,1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Image> {
        let (h, w) = match t.shape() {
            [1, 1, h, w] => (*h, *w),
            [h, w] => (*h, *w),
            other => {
                return Err(Error::Shape {
                    op: "image_from_tensor",
                    detail: format!("expected [1,1,H,W] or [H,W], got {other:?}"),
                })
            }
        };
        let pixels = t.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Image::new(h, w, 1, pixels)
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// ITU-R 601 luminance conversion. Single-channel input passes through.
pub fn to_grayscale(img: &Image) -> Image {
    if img.channels == 1 {
        return img.clone();
    }
    let mut pixels = Vec::with_capacity(img.height * img.width);
    for i in 0..img.height * img.width {
        let r = img.pixels[i * 3];
        let g = img.pixels[i * 3 + 1];
        let b = img.pixels[i * 3 + 2];
        // 0.299 r + 0.587 g + 0.114 b, written so equal channels map to
        // themselves exactly.
        let y = g + 0.299 * (r - g) + 0.114 * (b - g);
        pixels.push(y.clamp(0.0, 1.0));
    }
    Image { height: img.height, width: img.width, channels: 1, pixels }
}

// Linear interpolation in the a==b exact form.
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Bilinear resize with half-pixel center alignment.
pub fn resize(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Argument("resize target dimensions must be positive".into()));
    }
    let sy = img.height as f64 / out_h as f64;
    let sx = img.width as f64 / out_w as f64;
    let mut pixels = vec![0.0; out_h * out_w * img.channels];
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (img.height - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(img.height - 1);
        let ty = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (img.width - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(img.width - 1);
            let tx = fx - x0 as f64;
            for c in 0..img.channels {
                let top = lerp(img.get(y0, x0, c), img.get(y0, x1, c), tx);
                let bottom = lerp(img.get(y1, x0, c), img.get(y1, x1, c), tx);
                pixels[(oy * out_w + ox) * img.channels + c] =
                    lerp(top, bottom, ty).clamp(0.0, 1.0);
            }
        }
    }
    Image::new(out_h, out_w, img.channels, pixels)
}

/// Overlapping patches of one grayscale image plus the geometry needed to
/// stitch them back losslessly.
#[derive(Debug, Clone)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub stride: usize,
    pub rows: usize,
    pub cols: usize,
    pub source_height: usize,
    pub source_width: usize,
    pub patches: Vec<Image>,
}

/// Splits a grayscale image into a full-coverage grid of `P x P` patches with
/// step `S`. `(H-P)` and `(W-P)` must be divisible by `S` so the grid tiles
/// the image exactly; resize first if they are not.
pub fn extract_patches(img: &Image, patch_size: usize, stride: usize) -> Result<PatchGrid> {
    if img.channels != 1 {
        return Err(Error::Argument("patch extraction expects a grayscale image".into()));
    }
    let (h, w, p, s) = (img.height, img.width, patch_size, stride);
    if p == 0 || p > h.min(w) {
        return Err(Error::Geometry(format!(
            "patch size {p} must be in 1..={} for a {h}x{w} image",
            h.min(w)
        )));
    }
    if s == 0 || s > p {
        return Err(Error::Geometry(format!("stride {s} must be in 1..={p}")));
    }
    if (h - p) % s != 0 || (w - p) % s != 0 {
        return Err(Error::Geometry(format!(
            "({h}-{p}) and ({w}-{p}) must be divisible by stride {s}; resize the image first"
        )));
    }
    let rows = (h - p) / s + 1;
    let cols = (w - p) / s + 1;
    let mut patches = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let (y0, x0) = (r * s, c * s);
            let mut pixels = Vec::with_capacity(p * p);
            for y in 0..p {
                let base = (y0 + y) * w + x0;
                pixels.extend_from_slice(&img.pixels[base..base + p]);
            }
            patches.push(Image { height: p, width: p, channels: 1, pixels });
        }
    }
    Ok(PatchGrid {
        patch_size: p,
        stride: s,
        rows,
        cols,
        source_height: h,
        source_width: w,
        patches,
    })
}

/// Reassembles a patch grid; every output pixel is the mean of all patch
/// pixels covering it.
pub fn stitch_patches(grid: &PatchGrid) -> Result<Image> {
    let (h, w, p, s) = (grid.source_height, grid.source_width, grid.patch_size, grid.stride);
    if grid.patches.len() != grid.rows * grid.cols {
        return Err(Error::Geometry(format!(
            "grid holds {} patches but declares {}x{}",
            grid.patches.len(),
            grid.rows,
            grid.cols
        )));
    }
    if grid.rows != (h - p) / s + 1 || grid.cols != (w - p) / s + 1 {
        return Err(Error::Geometry("grid dimensions do not match source geometry".into()));
    }
    for (i, patch) in grid.patches.iter().enumerate() {
        if patch.height != p || patch.width != p || patch.channels != 1 {
            return Err(Error::Geometry(format!(
                "patch {i} is {}x{}x{}, expected {p}x{p}x1",
                patch.height, patch.width, patch.channels
            )));
        }
    }
    let mut acc = vec![0.0; h * w];
    let mut count = vec![0u32; h * w];
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let patch = &grid.patches[r * grid.cols + c];
            let (y0, x0) = (r * s, c * s);
            for y in 0..p {
                let dst = (y0 + y) * w + x0;
                for x in 0..p {
                    acc[dst + x] += patch.pixels[y * p + x];
                    count[dst + x] += 1;
                }
            }
        }
    }
    let pixels = acc
        .into_iter()
        .zip(count)
        .map(|(a, n)| (a / n as f64).clamp(0.0, 1.0))
        .collect();
    Image::new(h, w, 1, pixels)
}

/// Affine augmentation parameters: scale and rotation about the image
/// center, then translation in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform {
    pub scale: f64,
    pub rotation_deg: f64,
    pub tx: f64,
    pub ty: f64,
}

impl AffineTransform {
    pub fn identity() -> Self {
        AffineTransform { scale: 1.0, rotation_deg: 0.0, tx: 0.0, ty: 0.0 }
    }

    /// Declared augmentation ranges: scale in [0.9, 1.1], rotation in
    /// [-10, 10] degrees, translation at most 5% of each dimension.
    pub fn sample<R: Rng>(rng: &mut R, height: usize, width: usize) -> Self {
        AffineTransform {
            scale: rng.gen_range(0.9..=1.1),
            rotation_deg: rng.gen_range(-10.0..=10.0),
            tx: rng.gen_range(-0.05..=0.05) * width as f64,
            ty: rng.gen_range(-0.05..=0.05) * height as f64,
        }
    }
}

/// Applies an affine transform by inverse mapping with bilinear sampling.
/// Samples falling outside the source are zero.
///
/// The forward map takes a source point `ps` to `c + s*R(theta)*(ps - c) + t`
/// where `c` is the image center in pixel coordinates `(x, y)`.
pub fn augment(img: &Image, t: &AffineTransform) -> Result<Image> {
    if t.scale == 0.0 {
        return Err(Error::Argument("augment scale must be nonzero".into()));
    }
    let (h, w, ch) = (img.height, img.width, img.channels);
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let theta = t.rotation_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let inv_s = 1.0 / t.scale;
    let mut pixels = vec![0.0; h * w * ch];
    for oy in 0..h {
        for ox in 0..w {
            // Inverse map: undo translation, rotate by -theta, unscale.
            let dx = ox as f64 - t.tx - cx;
            let dy = oy as f64 - t.ty - cy;
            let sx = inv_s * (cos * dx + sin * dy) + cx;
            let sy = inv_s * (-sin * dx + cos * dy) + cy;
            if sx < -1.0 || sy < -1.0 || sx > w as f64 || sy > h as f64 {
                continue;
            }
            let x0 = sx.floor();
            let y0 = sy.floor();
            let tx_frac = sx - x0;
            let ty_frac = sy - y0;
            for c in 0..ch {
                let sample = |yy: f64, xx: f64| -> f64 {
                    if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
                        0.0
                    } else {
                        img.get(yy as usize, xx as usize, c)
                    }
                };
                let top = lerp(sample(y0, x0), sample(y0, x0 + 1.0), tx_frac);
                let bottom = lerp(sample(y0 + 1.0, x0), sample(y0 + 1.0, x0 + 1.0), tx_frac);
                pixels[(oy * w + ox) * ch + c] = lerp(top, bottom, ty_frac).clamp(0.0, 1.0);
            }
        }
    }
    Image::new(h, w, ch, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_gray(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Image {
        Image::new(h, w, 1, (0..h * w).map(|_| rng.gen_range(0.0..=1.0)).collect()).unwrap()
    }

    #[test]
    fn grayscale_white_red_and_idempotence() {
        let white = Image::new(1, 1, 3, vec![1.0, 1.0, 1.0]).unwrap();
        assert_eq!(to_grayscale(&white).pixels(), &[1.0]);

        let red = Image::new(1, 1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        assert!((to_grayscale(&red).pixels()[0] - 0.299).abs() < 1e-15);

        let gray = Image::new(2, 2, 1, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(to_grayscale(&gray), gray);
    }

    #[test]
    fn resize_same_dims_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_gray(7, 5, &mut rng);
        let out = resize(&img, 7, 5).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn resize_checkerboard_to_single_pixel() {
        let img = Image::new(2, 2, 1, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let out = resize(&img, 1, 1).unwrap();
        assert!((out.pixels()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn resize_preserves_constants() {
        let img = Image::new(3, 4, 1, vec![0.37; 12]).unwrap();
        for (h, w) in [(1, 1), (2, 7), (9, 3), (128, 128)] {
            let out = resize(&img, h, w).unwrap();
            assert!(out.pixels().iter().all(|&p| p == 0.37), "{h}x{w}");
        }
    }

    #[test]
    fn resize_rejects_zero_dims() {
        let img = Image::zeros(2, 2, 1).unwrap();
        assert!(resize(&img, 0, 2).is_err());
    }

    #[test]
    fn extract_full_image_single_patch() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random_gray(8, 8, &mut rng);
        let grid = extract_patches(&img, 8, 1).unwrap();
        assert_eq!(grid.patches.len(), 1);
        assert_eq!(grid.patches[0], img);
    }

    #[test]
    fn extract_grid_counts() {
        let img = Image::zeros(8, 8, 1).unwrap();
        let grid = extract_patches(&img, 4, 2).unwrap();
        assert_eq!((grid.rows, grid.cols), (3, 3));
        assert_eq!(grid.patches.len(), 9);

        let img = Image::zeros(128, 128, 1).unwrap();
        let grid = extract_patches(&img, 32, 16).unwrap();
        assert_eq!((grid.rows, grid.cols), (7, 7));
    }

    #[test]
    fn extract_rejects_bad_divisibility() {
        let img = Image::zeros(9, 9, 1).unwrap();
        let err = extract_patches(&img, 4, 2).unwrap_err();
        match err {
            Error::Geometry(msg) => assert!(msg.contains("resize"), "{msg}"),
            other => panic!("expected geometry error, got {other:?}"),
        }
    }

    #[test]
    fn stitch_roundtrip_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = random_gray(12, 12, &mut rng);
        for (p, s) in [(4, 2), (4, 4), (6, 3), (12, 1), (6, 2), (4, 1)] {
            let grid = extract_patches(&img, p, s).unwrap();
            let back = stitch_patches(&grid).unwrap();
            assert!(
                back.max_abs_diff(&img) < 1e-12,
                "roundtrip P={p} S={s} diff {}",
                back.max_abs_diff(&img)
            );
        }
    }

    #[test]
    fn stitch_overlap_averages() {
        // Two 2x2 patches over a 2x3 strip: columns 0..2 and 1..3.
        // Patch values 0 and 1, so the shared column must be 0.5.
        let zero = Image::zeros(2, 2, 1).unwrap();
        let one = Image::new(2, 2, 1, vec![1.0; 4]).unwrap();
        let grid = PatchGrid {
            patch_size: 2,
            stride: 1,
            rows: 1,
            cols: 2,
            source_height: 2,
            source_width: 3,
            patches: vec![zero, one],
        };
        let out = stitch_patches(&grid).unwrap();
        assert_eq!(out.pixels(), &[0.0, 0.5, 1.0, 0.0, 0.5, 1.0]);
    }

    #[test]
    fn stitch_rejects_inconsistent_grid() {
        let img = Image::zeros(8, 8, 1).unwrap();
        let mut grid = extract_patches(&img, 4, 2).unwrap();
        grid.rows = 2;
        assert!(matches!(stitch_patches(&grid), Err(Error::Geometry(_))));
    }

    #[test]
    fn augment_identity_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = random_gray(9, 7, &mut rng);
        let out = augment(&img, &AffineTransform::identity()).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn augment_rejects_zero_scale() {
        let img = Image::zeros(4, 4, 1).unwrap();
        let t = AffineTransform { scale: 0.0, ..AffineTransform::identity() };
        assert!(augment(&img, &t).is_err());
    }

    #[test]
    fn augment_quarter_turn_permutes_2x2() {
        // Forward map rotates content by +90 degrees in (x right, y down)
        // display coordinates: [[a,b],[c,d]] becomes [[c,a],[d,b]].
        let img = Image::new(2, 2, 1, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let t = AffineTransform { scale: 1.0, rotation_deg: 90.0, tx: 0.0, ty: 0.0 };
        let out = augment(&img, &t).unwrap();
        let expect = [0.3, 0.1, 0.4, 0.2];
        for (o, e) in out.pixels().iter().zip(expect) {
            assert!((o - e).abs() < 1e-12, "{:?}", out.pixels());
        }
    }

    #[test]
    fn augment_same_seed_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = random_gray(16, 16, &mut rng);
        let t1 = AffineTransform::sample(&mut ChaCha8Rng::seed_from_u64(9), 16, 16);
        let t2 = AffineTransform::sample(&mut ChaCha8Rng::seed_from_u64(9), 16, 16);
        assert_eq!(t1, t2);
        let a = augment(&img, &t1).unwrap();
        let b = augment(&img, &t2).unwrap();
        assert_eq!(a.pixels(), b.pixels());
    }

    #[test]
    fn augmentation_stays_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img = random_gray(20, 20, &mut rng);
        for seed in 0..10 {
            let t = AffineTransform::sample(&mut ChaCha8Rng::seed_from_u64(seed), 20, 20);
            let out = augment(&img, &t).unwrap();
            assert!(out.pixels().iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }
}
