//! Exact box-filter downsampling.
//!
//! Every output pixel is the area-weighted mean of the source rectangle it
//! covers. Coordinates are scaled so that all overlaps are integers: along an
//! axis of source length `n` resampled to `m`, source cell `s` spans
//! `[s*m, (s+1)*m)` and output cell `o` spans `[o*n, (o+1)*n)`. The weighted
//! sums are therefore exact and rounding happens once, half away from zero.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DownsampleError {
    #[error("cannot upsample {height}x{width} to {target}x{target}")]
    UpsampleUnsupported {
        height: usize,
        width: usize,
        target: usize,
    },
    #[error("target resolution must be at least 1")]
    ZeroTarget,
    #[error("pixel buffer holds {actual} bytes, expected {expected}")]
    BadBuffer { expected: usize, actual: usize },
}

/// An 8-bit image, row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl PixelImage {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        pixels: Vec<u8>,
    ) -> Result<Self, DownsampleError> {
        let expected = height * width * channels;
        if pixels.len() != expected {
            return Err(DownsampleError::BadBuffer {
                expected,
                actual: pixels.len(),
            });
        }
        Ok(PixelImage {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: u8) -> Self {
        PixelImage {
            height,
            width,
            channels,
            pixels: vec![value; height * width * channels],
        }
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }
}

/// Non-zero overlaps `(output cell, source cell, weight)` along one axis.
/// The weights for each output cell sum to `src`.
pub(crate) fn axis_overlaps(src: usize, dst: usize) -> Vec<(usize, usize, u64)> {
    let mut out = Vec::with_capacity(src + dst);
    for o in 0..dst {
        let lo = o * src;
        let hi = (o + 1) * src;
        let first = lo / dst;
        let last = (hi - 1) / dst;
        for s in first..=last {
            let s_lo = s * dst;
            let s_hi = (s + 1) * dst;
            let w = hi.min(s_hi) - lo.max(s_lo);
            if w > 0 {
                out.push((o, s, w as u64));
            }
        }
    }
    out
}

/// Exact weighted sums over every output cell and channel. Dividing an entry
/// by `height * width` gives the area mean.
pub(crate) fn area_sums(image: &PixelImage, out_h: usize, out_w: usize) -> Vec<u64> {
    let c = image.channels;
    let rows = axis_overlaps(image.height, out_h);
    let cols = axis_overlaps(image.width, out_w);

    // horizontal pass into (height x out_w x c)
    let mut horiz = vec![0u64; image.height * out_w * c];
    for y in 0..image.height {
        let src_row = &image.pixels[y * image.width * c..(y + 1) * image.width * c];
        let dst_row = &mut horiz[y * out_w * c..(y + 1) * out_w * c];
        for &(o, s, w) in &cols {
            for ch in 0..c {
                dst_row[o * c + ch] += w * src_row[s * c + ch] as u64;
            }
        }
    }

    let mut sums = vec![0u64; out_h * out_w * c];
    for &(o, s, w) in &rows {
        let src_row = &horiz[s * out_w * c..(s + 1) * out_w * c];
        let dst_row = &mut sums[o * out_w * c..(o + 1) * out_w * c];
        for (d, v) in dst_row.iter_mut().zip(src_row) {
            *d += w * v;
        }
    }
    sums
}

/// Rounds `num / den` half away from zero for non-negative operands.
fn round_ratio(num: u64, den: u64) -> u64 {
    (2 * num + den) / (2 * den)
}

/// Box-downsamples `image` to `target x target`, keeping the channel count.
pub fn box_downsample(image: &PixelImage, target: usize) -> Result<PixelImage, DownsampleError> {
    if target == 0 {
        return Err(DownsampleError::ZeroTarget);
    }
    if target > image.height || target > image.width {
        return Err(DownsampleError::UpsampleUnsupported {
            height: image.height,
            width: image.width,
            target,
        });
    }
    if target == image.height && target == image.width {
        return Ok(image.clone());
    }
    let area = (image.height * image.width) as u64;
    let pixels = area_sums(image, target, target)
        .into_iter()
        .map(|s| round_ratio(s, area).min(255) as u8)
        .collect();
    Ok(PixelImage {
        height: target,
        width: target,
        channels: image.channels,
        pixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_image_stays_constant() {
        let img = PixelImage::filled(256, 256, 3, 128);
        let out = box_downsample(&img, 64).unwrap();
        assert_eq!((out.height, out.width, out.channels), (64, 64, 3));
        assert!(out.pixels.iter().all(|&p| p == 128));
    }

    #[test]
    fn two_by_two_rounds_half_up() {
        // exact mean 127.5
        let img = PixelImage::new(2, 2, 1, vec![0, 255, 255, 0]).unwrap();
        let out = box_downsample(&img, 1).unwrap();
        assert_eq!(out.pixels, vec![128]);
    }

    #[test]
    fn checkerboard_averages_to_128() {
        let n = 128;
        let pixels = (0..n * n)
            .map(|i| if (i / n + i % n) % 2 == 0 { 0 } else { 255 })
            .collect();
        let img = PixelImage::new(n, n, 1, pixels).unwrap();
        let out = box_downsample(&img, 64).unwrap();
        assert!(out.pixels.iter().all(|&p| p == 128));
    }

    #[test]
    fn upsampling_is_rejected() {
        let img = PixelImage::filled(32, 48, 3, 0);
        assert_eq!(
            box_downsample(&img, 40),
            Err(DownsampleError::UpsampleUnsupported {
                height: 32,
                width: 48,
                target: 40
            })
        );
        assert_eq!(box_downsample(&img, 0), Err(DownsampleError::ZeroTarget));
    }

    #[test]
    fn fractional_overlaps_sum_to_source_length() {
        for (src, dst) in [(7, 3), (10, 4), (64, 64), (5, 1), (100, 64)] {
            let ov = axis_overlaps(src, dst);
            for o in 0..dst {
                let total: u64 = ov.iter().filter(|e| e.0 == o).map(|e| e.2).sum();
                assert_eq!(total, src as u64);
            }
        }
    }

    proptest! {
        #[test]
        fn integer_blocks_preserve_mean(
            factor in 1usize..4,
            target in 1usize..6,
            channels in prop_oneof![Just(1usize), Just(3usize)],
            seed in any::<u64>(),
        ) {
            let n = factor * target;
            let mut rng = crate::rng::SplitMix64::new(seed);
            let pixels = (0..n * n * channels).map(|_| rng.below(256) as u8).collect();
            let img = PixelImage::new(n, n, channels, pixels).unwrap();
            let out = box_downsample(&img, target).unwrap();
            for c in 0..channels {
                let mean_in: f64 = img.pixels.iter().skip(c).step_by(channels).map(|&p| p as f64).sum::<f64>() / (n * n) as f64;
                let mean_out: f64 = out.pixels.iter().skip(c).step_by(channels).map(|&p| p as f64).sum::<f64>() / (target * target) as f64;
                prop_assert!((mean_in - mean_out).abs() <= 1.0);
            }
        }
    }
}
