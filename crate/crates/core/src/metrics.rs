use crate::data::Image;
use crate::error::{invalid, CoreError, Result};

pub const PSNR_CAP_DB: f64 = 100.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_shapes(op: &'static str, x: &Image, y: &Image) -> Result<()> {
    if !x.same_shape(y) {
        return Err(CoreError::Shape {
            op,
            expected: format!("{}x{}x{}", x.channels, x.height, x.width),
            actual: format!("{}x{}x{}", y.channels, y.height, y.width),
        });
    }
    Ok(())
}

pub fn mse(x: &Image, y: &Image) -> Result<f64> {
    check_shapes("mse", x, y)?;
    Ok(x.pixels.iter().zip(&y.pixels).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.len() as f64)
}

/// Peak signal-to-noise ratio in dB, capped at [`PSNR_CAP_DB`].
pub fn psnr(x: &Image, y: &Image, max_val: f64) -> Result<f64> {
    let m = mse(x, y)?;
    Ok(psnr_from_mse(m, max_val))
}

pub fn psnr_from_mse(mse: f64, max_val: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (max_val * max_val / mse).log10()).min(PSNR_CAP_DB)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimReport {
    pub value: f64,
    /// The image was smaller than the window, so one global window was used.
    pub global_fallback: bool,
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / s).collect();
    let mut w = vec![0.0; SSIM_WINDOW * SSIM_WINDOW];
    for i in 0..SSIM_WINDOW {
        for j in 0..SSIM_WINDOW {
            w[i * SSIM_WINDOW + j] = g[i] * g[j];
        }
    }
    w
}

fn ssim_term(mx: f64, my: f64, vx: f64, vy: f64, cxy: f64) -> f64 {
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

/// Gaussian-windowed SSIM over valid window positions, averaged over
/// windows and channels (dynamic range 1).
pub fn ssim_report(x: &Image, y: &Image) -> Result<SsimReport> {
    check_shapes("ssim", x, y)?;
    let (h, w) = (x.height, x.width);
    let plane = h * w;
    let mut total = 0.0;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        for c in 0..x.channels {
            let a = &x.pixels[c * plane..(c + 1) * plane];
            let b = &y.pixels[c * plane..(c + 1) * plane];
            let n = plane as f64;
            let (mx, my) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
            let vx = a.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
            let vy = b.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
            let cxy = a.iter().zip(b).map(|(p, q)| (p - mx) * (q - my)).sum::<f64>() / n;
            total += ssim_term(mx, my, vx, vy, cxy);
        }
        return Ok(SsimReport {
            value: total / x.channels as f64,
            global_fallback: true,
        });
    }
    let win = gaussian_window();
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    for c in 0..x.channels {
        let a = &x.pixels[c * plane..(c + 1) * plane];
        let b = &y.pixels[c * plane..(c + 1) * plane];
        let mut acc = 0.0;
        for oy in 0..oh {
            for ox in 0..ow {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..SSIM_WINDOW {
                    for j in 0..SSIM_WINDOW {
                        let wt = win[i * SSIM_WINDOW + j];
                        let p = a[(oy + i) * w + ox + j];
                        let q = b[(oy + i) * w + ox + j];
                        mx += wt * p;
                        my += wt * q;
                        sxx += wt * p * p;
                        syy += wt * q * q;
                        sxy += wt * p * q;
                    }
                }
                acc += ssim_term(mx, my, sxx - mx * mx, syy - my * my, sxy - mx * my);
            }
        }
        total += acc / (oh * ow) as f64;
    }
    Ok(SsimReport {
        value: total / x.channels as f64,
        global_fallback: false,
    })
}

pub fn ssim(x: &Image, y: &Image) -> Result<f64> {
    Ok(ssim_report(x, y)?.value)
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(invalid("accuracy", "no predictions"));
    }
    if predictions.len() != labels.len() {
        return Err(invalid(
            "accuracy",
            format!("{} predictions for {} labels", predictions.len(), labels.len()),
        ));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / predictions.len() as f64)
}
