//! Image-processing primitives shared by the corruption transforms, the
//! dataset loader, and score-map upsampling.

use image::{GrayImage, RgbImage};

/// Bilinear upsampling of a single-channel f64 plane using the pixel-center
/// convention: `src = (dst + 0.5) * scale - 0.5`, clamped to the source grid.
pub fn bilinear_upsample(src: &[f64], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f64> {
    assert_eq!(src.len(), sh * sw);
    let mut out = vec![0.0; dh * dw];
    let sy = sh as f64 / dh as f64;
    let sx = sw as f64 / dw as f64;
    for y in 0..dh {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (sh - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let wy = fy - y0 as f64;
        for x in 0..dw {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (sw - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let wx = fx - x0 as f64;
            let top = src[y0 * sw + x0] * (1.0 - wx) + src[y0 * sw + x1] * wx;
            let bot = src[y1 * sw + x0] * (1.0 - wx) + src[y1 * sw + x1] * wx;
            out[y * dw + x] = top * (1.0 - wy) + bot * wy;
        }
    }
    out
}

pub fn resize_rgb_bilinear(img: &RgbImage, w: u32, h: u32) -> RgbImage {
    image::imageops::resize(img, w, h, image::imageops::FilterType::Triangle)
}

/// Nearest-neighbor resize for label maps; never invents class indices.
pub fn resize_label_nearest(img: &GrayImage, w: u32, h: u32) -> GrayImage {
    image::imageops::resize(img, w, h, image::imageops::FilterType::Nearest)
}

/// Interleaved RGB float plane in [0, 1]; the working format of every
/// corruption transform. Values are clamped only on conversion back to u8.
#[derive(Debug, Clone)]
pub struct Rgbf {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Rgbf {
    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = img.dimensions();
        Rgbf {
            height: h as usize,
            width: w as usize,
            data: img.as_raw().iter().map(|&b| b as f32 / 255.0).collect(),
        }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&v| (v * 255.0).clamp(0.0, 255.0).round() as u8)
            .collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer matches dimensions")
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * 3 + c] = v;
    }

    pub fn map_values(&mut self, f: impl Fn(f32) -> f32) {
        for v in self.data.iter_mut() {
            *v = f(*v);
        }
    }

    /// Bilinear sample with edge clamping, per channel.
    pub fn sample(&self, y: f32, x: f32, c: usize) -> f32 {
        let fy = y.clamp(0.0, (self.height - 1) as f32);
        let fx = x.clamp(0.0, (self.width - 1) as f32);
        let y0 = fy.floor() as usize;
        let x0 = fx.floor() as usize;
        let y1 = (y0 + 1).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let wy = fy - y0 as f32;
        let wx = fx - x0 as f32;
        let top = self.get(y0, x0, c) * (1.0 - wx) + self.get(y0, x1, c) * wx;
        let bot = self.get(y1, x0, c) * (1.0 - wx) + self.get(y1, x1, c) * wx;
        top * (1.0 - wy) + bot * wy
    }

    /// Bilinear resize to a new size.
    pub fn resize_bilinear(&self, nh: usize, nw: usize) -> Rgbf {
        let mut out = Rgbf {
            height: nh,
            width: nw,
            data: vec![0.0; nh * nw * 3],
        };
        let sy = self.height as f32 / nh as f32;
        let sx = self.width as f32 / nw as f32;
        for y in 0..nh {
            let fy = (y as f32 + 0.5) * sy - 0.5;
            for x in 0..nw {
                let fx = (x as f32 + 0.5) * sx - 0.5;
                for c in 0..3 {
                    out.set(y, x, c, self.sample(fy, fx, c));
                }
            }
        }
        out
    }

    /// Box/area-average downsample by integer-agnostic factor (used by the
    /// pixelate corruption, mimicking a box filter).
    pub fn area_downsample(&self, nh: usize, nw: usize) -> Rgbf {
        let mut out = Rgbf {
            height: nh,
            width: nw,
            data: vec![0.0; nh * nw * 3],
        };
        let sy = self.height as f32 / nh as f32;
        let sx = self.width as f32 / nw as f32;
        for y in 0..nh {
            let y_lo = (y as f32 * sy).floor() as usize;
            let y_hi = (((y + 1) as f32 * sy).ceil() as usize).min(self.height).max(y_lo + 1);
            for x in 0..nw {
                let x_lo = (x as f32 * sx).floor() as usize;
                let x_hi = (((x + 1) as f32 * sx).ceil() as usize).min(self.width).max(x_lo + 1);
                for c in 0..3 {
                    let mut acc = 0.0;
                    for yy in y_lo..y_hi {
                        for xx in x_lo..x_hi {
                            acc += self.get(yy, xx, c);
                        }
                    }
                    out.set(y, x, c, acc / ((y_hi - y_lo) * (x_hi - x_lo)) as f32);
                }
            }
        }
        out
    }

    /// Nearest-neighbor upsample (pixelate's second half).
    pub fn nearest_upsample(&self, nh: usize, nw: usize) -> Rgbf {
        let mut out = Rgbf {
            height: nh,
            width: nw,
            data: vec![0.0; nh * nw * 3],
        };
        for y in 0..nh {
            let sy = (y * self.height / nh).min(self.height - 1);
            for x in 0..nw {
                let sx = (x * self.width / nw).min(self.width - 1);
                for c in 0..3 {
                    out.set(y, x, c, self.get(sy, sx, c));
                }
            }
        }
        out
    }

    /// Zoom about the center by `factor >= 1`, cropped back to the original
    /// size.
    pub fn clipped_zoom(&self, factor: f32) -> Rgbf {
        let mut out = self.clone();
        let ch = self.height as f32 / 2.0 - 0.5;
        let cw = self.width as f32 / 2.0 - 0.5;
        for y in 0..self.height {
            let sy = ch + (y as f32 - ch) / factor;
            for x in 0..self.width {
                let sx = cw + (x as f32 - cw) / factor;
                for c in 0..3 {
                    out.set(y, x, c, self.sample(sy, sx, c));
                }
            }
        }
        out
    }
}

/// Separable gaussian blur with reflected borders; kernel radius `ceil(3*sigma)`.
pub fn gaussian_blur_rgbf(img: &Rgbf, sigma: f32) -> Rgbf {
    if sigma <= 0.0 {
        return img.clone();
    }
    let kernel = gaussian_kernel_1d(sigma);
    let tmp = convolve_axis(img, &kernel, true);
    convolve_axis(&tmp, &kernel, false)
}

pub fn gaussian_kernel_1d(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as i32;
    let mut k: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i as f32 * i as f32) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f32 = k.iter().sum();
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

fn reflect(i: i64, n: i64) -> usize {
    // reflect-101 border: ...2 1 | 0 1 2 ... n-1 | n-2 n-3...
    let mut i = i;
    if n == 1 {
        return 0;
    }
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

fn convolve_axis(img: &Rgbf, kernel: &[f32], horizontal: bool) -> Rgbf {
    let radius = (kernel.len() / 2) as i64;
    let mut out = img.clone();
    let (h, w) = (img.height as i64, img.width as i64);
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..3 {
                let mut acc = 0.0;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let off = ki as i64 - radius;
                    let (sy, sx) = if horizontal {
                        (y, reflect(x as i64 + off, w))
                    } else {
                        (reflect(y as i64 + off, h), x)
                    };
                    acc += kv * img.get(sy, sx, c);
                }
                out.set(y, x, c, acc);
            }
        }
    }
    out
}

/// 2-D convolution with reflected borders (disk and motion kernels).
pub fn convolve2d(img: &Rgbf, kernel: &[f32], kh: usize, kw: usize) -> Rgbf {
    assert_eq!(kernel.len(), kh * kw);
    let (ry, rx) = ((kh / 2) as i64, (kw / 2) as i64);
    let mut out = img.clone();
    let (h, w) = (img.height as i64, img.width as i64);
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..3 {
                let mut acc = 0.0;
                for ky in 0..kh {
                    let sy = reflect(y as i64 + ky as i64 - ry, h);
                    for kx in 0..kw {
                        let sx = reflect(x as i64 + kx as i64 - rx, w);
                        acc += kernel[ky * kw + kx] * img.get(sy, sx, c);
                    }
                }
                out.set(y, x, c, acc);
            }
        }
    }
    out
}

/// RGB in [0,1] -> (h in [0,360), s, v).
pub fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * (((g - b) / delta).rem_euclid(6.0))
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

pub fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let c = v * s;
    let hp = (h / 60.0).rem_euclid(6.0);
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r1, g1, b1) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r1 + m, g1 + m, b1 + m)
}
