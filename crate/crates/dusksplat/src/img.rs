//! Dense row-major image buffers in f64. All rendering and loss math runs on
//! these; quantization happens only at PNG write time (see `io::png`).

/// H×W×C image, row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn constant(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_fn<F: FnMut(usize, usize, usize) -> f64>(
        width: usize,
        height: usize,
        channels: usize,
        mut f: F,
    ) -> Self {
        let mut img = Self::zeros(width, height, channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    img.data[(y * width + x) * channels + c] = f(x, y, c);
                }
            }
        }
        img
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    #[inline]
    pub fn add(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] += v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn map<F: Fn(f64) -> f64>(&self, f: F) -> Image {
        Image {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        assert!(self.same_shape(other), "image shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// BT.601 luma. Input must be RGB.
    pub fn luminance(&self) -> Image {
        assert_eq!(self.channels, 3, "luminance expects an RGB image");
        let mut out = Image::zeros(self.width, self.height, 1);
        for i in 0..self.width * self.height {
            let r = self.data[i * 3];
            let g = self.data[i * 3 + 1];
            let b = self.data[i * 3 + 2];
            out.data[i] = 0.299 * r + 0.587 * g + 0.114 * b;
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Mean squared error between two same-shaped images.
pub fn mse(a: &Image, b: &Image) -> f64 {
    assert!(a.same_shape(b), "image shape mismatch");
    if a.data.is_empty() {
        return 0.0;
    }
    a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data.len() as f64
}

/// PSNR in dB for [0,1] images, capped at 99 dB for (near-)identical inputs.
pub fn psnr(a: &Image, b: &Image) -> f64 {
    let m = mse(a, b);
    if m < 1e-10 {
        return 99.0;
    }
    (10.0 * (1.0 / m).log10()).min(99.0)
}
