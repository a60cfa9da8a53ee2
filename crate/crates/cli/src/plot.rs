use std::path::Path;

use image::{Rgb, RgbImage};

use stepq::numerics::Tensor;

use crate::error::{CliError, CliResult};

const SIZE: u32 = 512;
const REAL: Rgb<u8> = Rgb([150, 150, 150]);
const GENERATED: Rgb<u8> = Rgb([200, 40, 40]);

/// Scatter plot of the first two coordinates: real points in grey,
/// generated points in red. The view is fitted to the real data.
pub fn scatter(path: &Path, real: &Tensor, generated: &Tensor) -> CliResult<()> {
    if real.cols() < 2 || real.rows() == 0 {
        return Err(CliError::BadInput("scatter plot needs 2-d data".into()));
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for r in 0..real.rows() {
        for &v in &real.row(r)[..2] {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    let pad = 0.1 * (hi - lo).max(1e-9);
    let (lo, hi) = (lo - pad, hi + pad);
    let to_px = |v: f64| ((v - lo) / (hi - lo) * f64::from(SIZE - 1)).round();

    let mut img = RgbImage::from_pixel(SIZE, SIZE, Rgb([255, 255, 255]));
    let mut draw = |data: &Tensor, color: Rgb<u8>| {
        for r in 0..data.rows() {
            let (x, y) = (to_px(data.row(r)[0]), to_px(data.row(r)[1]));
            if !(0.0..f64::from(SIZE)).contains(&x) || !(0.0..f64::from(SIZE)).contains(&y) {
                continue;
            }
            let (x, y) = (x as u32, SIZE - 1 - y as u32);
            for dx in 0..2 {
                for dy in 0..2 {
                    if x + dx < SIZE && y + dy < SIZE {
                        img.put_pixel(x + dx, y + dy, color);
                    }
                }
            }
        }
    };
    draw(real, REAL);
    if generated.cols() >= 2 {
        draw(generated, GENERATED);
    }
    img.save(path).map_err(|e| CliError::Internal(format!("{}: {e}", path.display())))
}
