//! Grayscale image utilities: binary PGM I/O, bilinear rescaling and the
//! bundled natural-image pack.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Bilinear resampling of the last two axes with the align-centers
/// convention: destination pixel `x` samples source position
/// `(x + 0.5) / factor - 0.5`, clamped to the image. Output extents are
/// `round(extent * factor)`.
pub fn rescale_image<T: Scalar>(f: &Tensor<T>, factor: f64) -> Result<Tensor<T>> {
    if !(factor.is_finite() && factor > 0.0) {
        return Err(Error::invalid(format!("rescale factor must be positive, got {factor}")));
    }
    if f.rank() < 2 {
        return Err(Error::shape(format!("rescale needs rank >= 2, got {:?}", f.shape())));
    }
    let rank = f.rank();
    let (h, w) = (f.shape()[rank - 2], f.shape()[rank - 1]);
    let (oh, ow) = ((h as f64 * factor).round() as usize, (w as f64 * factor).round() as usize);
    if oh == 0 || ow == 0 {
        return Err(Error::invalid(format!("rescaling {h}x{w} by {factor} leaves no pixels")));
    }
    let ys = taps(oh, h, factor);
    let xs = taps(ow, w, factor);
    let planes: usize = f.shape()[..rank - 2].iter().product();
    let mut out = Vec::with_capacity(planes * oh * ow);
    for plane in f.data().chunks(h * w) {
        for &(y0, y1, wy) in &ys {
            for &(x0, x1, wx) in &xs {
                let top = lerp(plane[y0 * w + x0], plane[y0 * w + x1], wx);
                let bottom = lerp(plane[y1 * w + x0], plane[y1 * w + x1], wx);
                out.push(lerp(top, bottom, wy));
            }
        }
    }
    let mut shape = f.shape().to_vec();
    shape[rank - 2] = oh;
    shape[rank - 1] = ow;
    Tensor::new(&shape, out)
}

/// `[C, H, W]` rescaled by `factor`, then zero padded (or center cropped) to
/// `size x size`, content centered.
pub fn rescale_and_center<T: Scalar>(f: &Tensor<T>, factor: f64, size: usize) -> Result<Tensor<T>> {
    let scaled = rescale_image(f, factor)?;
    center_in_frame(&scaled, size)
}

/// Place the last two axes centered in a `size x size` zero frame.
pub fn center_in_frame<T: Scalar>(f: &Tensor<T>, size: usize) -> Result<Tensor<T>> {
    let rank = f.rank();
    let (h, w) = (f.shape()[rank - 2], f.shape()[rank - 1]);
    let planes: usize = f.shape()[..rank - 2].iter().product();
    let mut out = vec![T::zero(); planes * size * size];
    let offset = |src: usize| (size as isize - src as isize).div_euclid(2);
    let (oy, ox) = (offset(h), offset(w));
    for p in 0..planes {
        for y in 0..h {
            let ty = y as isize + oy;
            if !(0..size as isize).contains(&ty) {
                continue;
            }
            for x in 0..w {
                let tx = x as isize + ox;
                if (0..size as isize).contains(&tx) {
                    out[p * size * size + ty as usize * size + tx as usize] = f.data()[p * h * w + y * w + x];
                }
            }
        }
    }
    let mut shape = f.shape().to_vec();
    shape[rank - 2] = size;
    shape[rank - 1] = size;
    Tensor::new(&shape, out)
}

fn taps(out_len: usize, in_len: usize, factor: f64) -> Vec<(usize, usize, f64)> {
    let last = (in_len - 1) as f64;
    (0..out_len)
        .map(|x| {
            let src = ((x as f64 + 0.5) / factor - 0.5).clamp(0.0, last);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn lerp<T: Scalar>(a: T, b: T, t: f64) -> T {
    if t == 0.0 {
        a
    } else {
        let t = T::from_f64_lossy(t);
        a + (b - a) * t
    }
}

/// 8-bit binary PGM (`P5`). Values are returned in `[0, 1]` as `[1, H, W]`.
pub fn parse_pgm(bytes: &[u8]) -> Result<Tensor<f64>> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Image("truncated PGM header".into()));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::Image("non-ASCII PGM header".into()))?);
    }
    if fields[0] != "P5" {
        return Err(Error::Image(format!("expected P5 magic, found {:?}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Image(format!("bad PGM field {s:?}")));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(Error::Image(format!("unsupported PGM maxval {maxval}")));
    }
    let payload = &bytes[(pos + 1).min(bytes.len())..];
    if payload.len() < w * h {
        return Err(Error::Image(format!("PGM payload has {} bytes, expected {}", payload.len(), w * h)));
    }
    let scale = maxval as f64;
    Tensor::new(&[1, h, w], payload[..w * h].iter().map(|&b| b as f64 / scale).collect())
}

/// Encode a single plane as 8-bit PGM, min-max normalized.
pub fn encode_pgm(plane: &[f64], height: usize, width: usize) -> Result<Vec<u8>> {
    if plane.len() != height * width {
        return Err(Error::shape(format!("{} values for a {height}x{width} image", plane.len())));
    }
    let (lo, hi) = plane.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(plane.iter().map(|&v| ((v - lo) / span * 255.0).round() as u8));
    Ok(out)
}

pub fn write_pgm(path: impl AsRef<Path>, plane: &[f64], height: usize, width: usize) -> Result<()> {
    std::fs::write(path, encode_pgm(plane, height, width)?)?;
    Ok(())
}

const PACK: [(&str, &[u8]); 10] = [
    ("astronaut", include_bytes!("../assets/images/astronaut.pgm")),
    ("brick", include_bytes!("../assets/images/brick.pgm")),
    ("camera", include_bytes!("../assets/images/camera.pgm")),
    ("chelsea", include_bytes!("../assets/images/chelsea.pgm")),
    ("coffee", include_bytes!("../assets/images/coffee.pgm")),
    ("coins", include_bytes!("../assets/images/coins.pgm")),
    ("grass", include_bytes!("../assets/images/grass.pgm")),
    ("moon", include_bytes!("../assets/images/moon.pgm")),
    ("motorcycle_left", include_bytes!("../assets/images/motorcycle_left.pgm")),
    ("rocket", include_bytes!("../assets/images/rocket.pgm")),
];

/// The bundled 96x96 grayscale natural images, `(name, [1, 96, 96])`.
pub fn natural_images() -> Vec<(&'static str, Tensor<f64>)> {
    PACK.iter().map(|(name, bytes)| (*name, parse_pgm(bytes).expect("bundled image decodes"))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_factor_is_identity() {
        let t = Tensor::<f64>::from_fn(&[2, 5, 7], |i| (i as f64).sin());
        assert_eq!(rescale_image(&t, 1.0).unwrap(), t);
    }

    #[test]
    fn constant_stays_constant() {
        let t = Tensor::<f64>::full(&[1, 9, 9], 0.375);
        for factor in [0.3, 0.5, 1.7, 2.0, 3.3] {
            let out = rescale_image(&t, factor).unwrap();
            assert_eq!(out.shape()[1], (9.0 * factor).round() as usize);
            assert!(out.data().iter().all(|&v| (v - 0.375).abs() < 1e-15));
        }
    }

    #[test]
    fn doubling_reproduces_a_ramp() {
        // f(x) = 3x + 1 sampled at pixel centers; upscaled sample x' sits at
        // source position (x' + 0.5) / 2 - 0.5.
        let u = 8;
        let t = Tensor::<f64>::from_fn(&[1, u, u], |i| 3.0 * (i % u) as f64 + 1.0);
        let out = rescale_image(&t, 2.0).unwrap();
        for x in 1..2 * u - 1 {
            let want = 3.0 * ((x as f64 + 0.5) / 2.0 - 0.5) + 1.0;
            assert!((out.at(&[0, 3, x]) - want).abs() < 1e-12, "x={x}");
        }
    }

    #[test]
    fn halving_averages_pixel_pairs() {
        let sq = Tensor::<f64>::from_fn(&[1, 4, 4], |i| (i % 4) as f64);
        let half = rescale_image(&sq, 0.5).unwrap();
        assert_eq!(half.data(), &[0.5, 2.5, 0.5, 2.5]);
    }

    #[test]
    fn degenerate_sizes_rejected() {
        let t = Tensor::<f64>::zeros(&[1, 4, 4]);
        assert!(rescale_image(&t, 0.1).is_err());
        assert!(rescale_image(&t, 0.0).is_err());
        assert!(rescale_image(&t, f64::NAN).is_err());
    }

    #[test]
    fn centering_is_symmetric() {
        let t = Tensor::<f64>::full(&[1, 3, 3], 1.0);
        let framed = center_in_frame(&t, 7).unwrap();
        let rows: Vec<usize> = (0..7).filter(|&y| framed.at(&[0, y, 3]) == 1.0).collect();
        assert_eq!(rows, vec![2, 3, 4]);
        let cropped = center_in_frame(&Tensor::<f64>::from_fn(&[1, 5, 5], |i| i as f64), 3).unwrap();
        assert_eq!(cropped.at(&[0, 1, 1]), 12.0);
    }

    #[test]
    fn pgm_round_trip_and_pack() {
        let plane: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let bytes = encode_pgm(&plane, 3, 4).unwrap();
        let back = parse_pgm(&bytes).unwrap();
        assert_eq!(back.shape(), &[1, 3, 4]);
        assert_eq!(back.data()[0], 0.0);
        assert_eq!(back.data()[11], 1.0);
        assert!(parse_pgm(b"P2\n1 1\n255\n\x00").is_err());
        assert!(parse_pgm(b"P5\n4 4\n255\n\x00").is_err());

        let pack = natural_images();
        assert_eq!(pack.len(), 10);
        for (name, img) in pack {
            assert_eq!(img.shape(), &[1, 96, 96], "{name}");
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
