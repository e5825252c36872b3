//! Canny edge detection: Gaussian blur, Sobel gradients, non-maximum
//! suppression, double-threshold hysteresis.

use crate::error::{Error, Result};
use crate::par;
use crate::pgm::GrayImage;

/// Edge pixels of `image`, row-major order.
///
/// Suppression compares along the quantized gradient direction with an
/// asymmetric tie rule (strictly greater than the forward neighbor, at
/// least the backward one), so plateau ridges thin to a single pixel.
pub fn canny_edges(image: &GrayImage, sigma: f64, low: f64, high: f64) -> Result<Vec<(u32, u32)>> {
    if !(low > 0.0) || !(high > low) {
        return Err(Error::InvalidConfig(format!(
            "thresholds must satisfy 0 < low < high, got low={low} high={high}"
        )));
    }
    let (w, h) = (image.width as usize, image.height as usize);
    if w < 3 || h < 3 {
        return Ok(Vec::new());
    }
    let blurred = gaussian_blur(image, sigma);

    // Sobel gradients; borders stay zero.
    let mut gx = vec![0.0f64; w * h];
    let mut gy = vec![0.0f64; w * h];
    {
        let b = &blurred;
        par::for_each_row(&mut gx, w, |y, row| {
            if y == 0 || y == h - 1 {
                return;
            }
            for x in 1..w - 1 {
                row[x] = b[(y - 1) * w + x + 1] - b[(y - 1) * w + x - 1]
                    + 2.0 * (b[y * w + x + 1] - b[y * w + x - 1])
                    + b[(y + 1) * w + x + 1] - b[(y + 1) * w + x - 1];
            }
        });
        par::for_each_row(&mut gy, w, |y, row| {
            if y == 0 || y == h - 1 {
                return;
            }
            for x in 1..w - 1 {
                row[x] = b[(y + 1) * w + x - 1] - b[(y - 1) * w + x - 1]
                    + 2.0 * (b[(y + 1) * w + x] - b[(y - 1) * w + x])
                    + b[(y + 1) * w + x + 1] - b[(y - 1) * w + x + 1];
            }
        });
    }
    let mag: Vec<f64> = gx.iter().zip(&gy).map(|(&a, &b)| a.hypot(b)).collect();

    // Non-maximum suppression along the gradient direction.
    let mut thin = vec![0.0f64; w * h];
    par::for_each_row(&mut thin, w, |y, row| {
        if y == 0 || y == h - 1 {
            return;
        }
        for x in 1..w - 1 {
            let i = y * w + x;
            let m = mag[i];
            if m == 0.0 {
                continue;
            }
            let angle = gy[i].atan2(gx[i]).to_degrees();
            // Fold to [0, 180) and quantize to one of four directions;
            // (dx, dy) is the forward neighbor along the gradient.
            let a = if angle < 0.0 { angle + 180.0 } else { angle };
            let (dx, dy): (isize, isize) = if !(22.5..157.5).contains(&a) {
                (1, 0)
            } else if a < 67.5 {
                (1, 1)
            } else if a < 112.5 {
                (0, 1)
            } else {
                (-1, 1)
            };
            let fwd = mag[(y as isize + dy) as usize * w + (x as isize + dx) as usize];
            let bwd = mag[(y as isize - dy) as usize * w + (x as isize - dx) as usize];
            if m > fwd && m >= bwd {
                row[x] = m;
            }
        }
    });

    // Hysteresis: flood from strong pixels through weak neighbors.
    let mut state = vec![0u8; w * h]; // 0 none, 1 weak, 2 strong
    for (i, &m) in thin.iter().enumerate() {
        if m >= high {
            state[i] = 2;
        } else if m >= low {
            state[i] = 1;
        }
    }
    let mut edge = vec![false; w * h];
    let mut stack: Vec<usize> = state
        .iter()
        .enumerate()
        .filter(|&(_, &s)| s == 2)
        .map(|(i, _)| i)
        .collect();
    for &i in &stack {
        edge[i] = true;
    }
    while let Some(i) = stack.pop() {
        let (x, y) = (i % w, i / w);
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                if dx == 0 && dy == 0 {
                    continue;
                }
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let ni = ny as usize * w + nx as usize;
                if state[ni] >= 1 && !edge[ni] {
                    edge[ni] = true;
                    stack.push(ni);
                }
            }
        }
    }
    Ok(edge
        .iter()
        .enumerate()
        .filter(|&(_, &e)| e)
        .map(|(i, _)| ((i % w) as u32, (i / w) as u32))
        .collect())
}

/// Separable Gaussian blur with clamped borders; kernel radius 3 sigma.
fn gaussian_blur(image: &GrayImage, sigma: f64) -> Vec<f64> {
    let (w, h) = (image.width as usize, image.height as usize);
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= sum;
    }

    let src: Vec<f64> = image.pixels.iter().map(|&p| p as f64).collect();
    let mut tmp = vec![0.0f64; w * h];
    par::for_each_row(&mut tmp, w, |y, row| {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, &kv) in kernel.iter().enumerate() {
                let sx = (x as isize + ki as isize - radius).clamp(0, w as isize - 1) as usize;
                acc += kv * src[y * w + sx];
            }
            row[x] = acc;
        }
    });
    let mut out = vec![0.0f64; w * h];
    par::for_each_row(&mut out, w, |y, row| {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, &kv) in kernel.iter().enumerate() {
                let sy = (y as isize + ki as isize - radius).clamp(0, h as isize - 1) as usize;
                acc += kv * tmp[sy * w + x];
            }
            row[x] = acc;
        }
    });
    out
}
