use crate::error::{Error, Result};
use crate::se3::RigidTransform;
use crate::world::{Image, Mask, ARM_COLOR};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
/// Pixels within this Euclidean RGB distance of the arm color count as arm.
pub const ARM_KEY_DISTANCE: f64 = 0.15;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable Gaussian filter over the valid region only.
fn filter_valid(x: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x0 in 0..ow {
            rows[y * ow + x0] = (0..SSIM_WINDOW).map(|i| k[i] * x[y * w + x0 + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y0 in 0..oh {
        for x0 in 0..ow {
            out[y0 * ow + x0] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y0 + i) * ow + x0]).sum();
        }
    }
    out
}

/// Mean structural similarity over channels, scaled by 100. Gaussian 11×11
/// window (σ = 1.5), evaluated where the window fits inside the image.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Geometry(format!(
            "ssim of {}x{} and {}x{} images",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Geometry(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels"
        )));
    }
    let k = gaussian_kernel();
    let mut total = 0.0;
    for c in 0..3 {
        let xa: Vec<f64> = a.data().iter().skip(c).step_by(3).map(|&v| v as f64).collect();
        let xb: Vec<f64> = b.data().iter().skip(c).step_by(3).map(|&v| v as f64).collect();
        let aa: Vec<f64> = xa.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = xb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = xa.iter().zip(&xb).map(|(p, q)| p * q).collect();
        let (ma, mb) = (filter_valid(&xa, w, h, &k), filter_valid(&xb, w, h, &k));
        let (saa, sbb, sab) = (
            filter_valid(&aa, w, h, &k),
            filter_valid(&bb, w, h, &k),
            filter_valid(&ab, w, h, &k),
        );
        let mut acc = 0.0;
        for i in 0..ma.len() {
            let (mu_a, mu_b) = (ma[i], mb[i]);
            let var_a = saa[i] - mu_a * mu_a;
            let var_b = sbb[i] - mu_b * mu_b;
            let cov = sab[i] - mu_a * mu_b;
            acc += ((2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2));
        }
        total += acc / ma.len() as f64;
    }
    Ok(100.0 * total / 3.0)
}

/// Color-keyed arm segmentation.
pub fn arm_mask_from_frame(frame: &Image) -> Mask {
    let (w, h) = (frame.width(), frame.height());
    let mut m = Mask::empty(w, h);
    for y in 0..h {
        for x in 0..w {
            let p = frame.pixel(x, y);
            let d2: f64 = (0..3).map(|k| (p[k] as f64 - ARM_COLOR[k]).powi(2)).sum();
            m.set(x, y, d2.sqrt() <= ARM_KEY_DISTANCE);
        }
    }
    m
}

pub fn iou(a: &Mask, b: &Mask) -> Option<f64> {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &q) in a.data().iter().zip(b.data()) {
        inter += (p != 0 && q != 0) as usize;
        union += (p != 0 || q != 0) as usize;
    }
    (union > 0).then(|| inter as f64 / union as f64)
}

/// `(mIoU × 100, presence accuracy %)`. Frames where both masks are empty
/// are left out of the IoU mean and count as correct for presence; with no
/// non-empty frame at all the mIoU is 100.
pub fn body_control_metrics(generated: &[Mask], truth: &[Mask]) -> Result<(f64, f64)> {
    if generated.len() != truth.len() || generated.is_empty() {
        return Err(Error::Geometry(format!(
            "{} generated masks vs {} ground truth",
            generated.len(),
            truth.len()
        )));
    }
    let mut ious = Vec::new();
    let mut agree = 0usize;
    for (g, t) in generated.iter().zip(truth) {
        if g.width() != t.width() || g.height() != t.height() {
            return Err(Error::Geometry("mask sizes differ".into()));
        }
        if let Some(v) = iou(g, t) {
            ious.push(v);
        }
        agree += (g.is_empty() == t.is_empty()) as usize;
    }
    let miou = if ious.is_empty() {
        100.0
    } else {
        100.0 * ious.iter().sum::<f64>() / ious.len() as f64
    };
    Ok((miou, 100.0 * agree as f64 / generated.len() as f64))
}

/// `(mean position error in meters, mean geodesic rotation error in degrees)`.
pub fn trajectory_errors(est: &[RigidTransform], gt: &[RigidTransform]) -> Result<(f64, f64)> {
    if est.len() != gt.len() || est.is_empty() {
        return Err(Error::Geometry(format!(
            "{} estimated poses vs {} ground truth",
            est.len(),
            gt.len()
        )));
    }
    let n = est.len() as f64;
    let trans = est
        .iter()
        .zip(gt)
        .map(|(e, g)| (e.translation() - g.translation()).norm())
        .sum::<f64>()
        / n;
    let rot = est
        .iter()
        .zip(gt)
        .map(|(e, g)| e.rotation_angle_to(g).to_degrees())
        .sum::<f64>()
        / n;
    Ok((trans, rot))
}
