//! Raw-image decoding and pixel-level features.
//!
//! Only binary PGM (`P5`) and PPM (`P6`) are decoded. Samples with a maxval
//! other than 255 are rescaled to 8 bits.

use crate::error::{Error, Result};

/// Upper bound on decoded sample count, to keep hostile headers cheap.
const MAX_SAMPLES: usize = 1 << 28;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterImage {
    pub width: usize,
    pub height: usize,
    /// 1 for grayscale, 3 for RGB.
    pub channels: usize,
    /// Row-major, channel-interleaved 8-bit samples.
    pub data: Vec<u8>,
}

impl RasterImage {
    pub fn channel(&self, c: usize) -> impl Iterator<Item = u8> + '_ {
        self.data.iter().skip(c).step_by(self.channels).copied()
    }

    /// 8-bit luma, `round(0.299 R + 0.587 G + 0.114 B)` for colour images.
    pub fn luma(&self) -> Vec<u8> {
        if self.channels == 1 {
            return self.data.clone();
        }
        self.data
            .chunks_exact(3)
            .map(|p| {
                let y = 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64;
                y.round().clamp(0.0, 255.0) as u8
            })
            .collect()
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Decode(format!("expected {what} at byte {start}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Decode(format!("{what} out of range")))
    }
}

/// Decodes a binary PGM or PPM file.
pub fn decode_pnm(bytes: &[u8]) -> Result<RasterImage> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(Error::Decode("not a binary PGM/PPM file (expected P5 or P6)".into())),
    };
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::Decode(format!("empty image {width}x{height}")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Decode(format!("maxval {maxval} outside 1..=65535")));
    }
    match bytes.get(h.pos) {
        Some(b) if b.is_ascii_whitespace() => h.pos += 1,
        _ => return Err(Error::Decode("missing whitespace after maxval".into())),
    }
    let samples = width
        .checked_mul(height)
        .and_then(|p| p.checked_mul(channels))
        .filter(|s| *s <= MAX_SAMPLES)
        .ok_or_else(|| Error::Decode(format!("image {width}x{height} is too large")))?;
    let bytes_per_sample = if maxval > 255 { 2 } else { 1 };
    let body = &bytes[h.pos..];
    if body.len() < samples * bytes_per_sample {
        return Err(Error::Decode(format!(
            "truncated pixel data: need {} bytes, have {}",
            samples * bytes_per_sample,
            body.len()
        )));
    }
    let scale = |v: usize| -> u8 {
        if maxval == 255 {
            v.min(255) as u8
        } else {
            ((v.min(maxval) as f64) * 255.0 / maxval as f64).round() as u8
        }
    };
    let data = if bytes_per_sample == 1 {
        body[..samples].iter().map(|&v| scale(v as usize)).collect()
    } else {
        body[..2 * samples]
            .chunks_exact(2)
            .map(|p| scale(u16::from_be_bytes([p[0], p[1]]) as usize))
            .collect()
    };
    Ok(RasterImage {
        width,
        height,
        channels,
        data,
    })
}

/// Sum over channels of the Shannon entropy (nats) of a `bins`-bin histogram.
pub fn histogram_entropy(img: &RasterImage, bins: usize) -> f64 {
    let bins = bins.clamp(1, 256);
    let n = (img.width * img.height) as f64;
    (0..img.channels)
        .map(|c| {
            let mut hist = vec![0usize; bins];
            for v in img.channel(c) {
                hist[v as usize * bins / 256] += 1;
            }
            hist.iter()
                .filter(|&&k| k > 0)
                .map(|&k| {
                    let p = k as f64 / n;
                    -p * p.ln()
                })
                .sum::<f64>()
        })
        .sum()
}

/// Bresenham circle of radius 3, clockwise from twelve o'clock.
const CIRCLE: [(isize, isize); 16] = [
    (0, -3),
    (1, -3),
    (2, -2),
    (3, -1),
    (3, 0),
    (3, 1),
    (2, 2),
    (1, 3),
    (0, 3),
    (-1, 3),
    (-2, 2),
    (-3, 1),
    (-3, 0),
    (-3, -1),
    (-2, -2),
    (-1, -3),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FastConfig {
    pub threshold: u8,
    /// Minimum length of the contiguous arc.
    pub arc_length: usize,
}

impl Default for FastConfig {
    fn default() -> Self {
        FastConfig {
            threshold: 20,
            arc_length: 9,
        }
    }
}

fn longest_circular_run(flags: &[bool; 16]) -> usize {
    if flags.iter().all(|&f| f) {
        return 16;
    }
    let mut best = 0;
    let mut run = 0;
    for i in 0..32 {
        if flags[i % 16] {
            run += 1;
            best = best.max(run);
        } else {
            run = 0;
        }
    }
    best
}

/// Counts FAST corners on an 8-bit grayscale buffer, without non-maximum
/// suppression. Pixels closer than 3 to the border are never corners.
pub fn count_fast_corners(gray: &[u8], width: usize, height: usize, cfg: FastConfig) -> usize {
    if width < 7 || height < 7 || gray.len() < width * height {
        return 0;
    }
    let t = cfg.threshold as i16;
    let mut count = 0;
    for y in 3..height - 3 {
        for x in 3..width - 3 {
            let c = gray[y * width + x] as i16;
            let mut brighter = [false; 16];
            let mut darker = [false; 16];
            for (k, (dx, dy)) in CIRCLE.iter().enumerate() {
                let px = (x as isize + dx) as usize;
                let py = (y as isize + dy) as usize;
                let v = gray[py * width + px] as i16;
                brighter[k] = v > c + t;
                darker[k] = v < c - t;
            }
            if longest_circular_run(&brighter) >= cfg.arc_length || longest_circular_run(&darker) >= cfg.arc_length {
                count += 1;
            }
        }
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pgm(w: usize, h: usize, pixels: &[u8]) -> Vec<u8> {
        let mut v = format!("P5\n# test\n{w} {h}\n255\n").into_bytes();
        v.extend_from_slice(pixels);
        v
    }

    #[test]
    fn decode_gray_and_rgb() {
        let img = decode_pnm(&pgm(2, 2, &[0, 64, 128, 255])).unwrap();
        assert_eq!((img.width, img.height, img.channels), (2, 2, 1));
        assert_eq!(img.data, vec![0, 64, 128, 255]);

        let mut ppm = b"P6 1 1 255 ".to_vec();
        ppm.extend_from_slice(&[255, 0, 0]);
        let img = decode_pnm(&ppm).unwrap();
        assert_eq!(img.channels, 3);
        // 0.299 · 255 = 76.245
        assert_eq!(img.luma(), vec![76]);
    }

    #[test]
    fn decode_rescales_and_reads_16_bit() {
        let img = decode_pnm(&pgm_with_max(15, &[0, 15, 5])).unwrap();
        assert_eq!(img.data, vec![0, 255, 85]);
        let mut v = b"P5 2 1 65535\n".to_vec();
        v.extend_from_slice(&[0xff, 0xff, 0x00, 0x00]);
        assert_eq!(decode_pnm(&v).unwrap().data, vec![255, 0]);
    }

    fn pgm_with_max(max: usize, pixels: &[u8]) -> Vec<u8> {
        let mut v = format!("P5 {} 1 {max}\n", pixels.len()).into_bytes();
        v.extend_from_slice(pixels);
        v
    }

    #[test]
    fn decode_errors() {
        for bad in [
            b"P3 1 1 255\n0".as_slice(),
            b"P5 1 1 255\n",
            b"P5 0 1 255\n",
            b"P5 1 1 0\n\x00",
            b"P5 1 1 255",
            b"P5 99999999999 99999999999 255\n",
            b"P5 x 1 255\n",
            b"",
        ] {
            assert!(decode_pnm(bad).is_err(), "{:?}", String::from_utf8_lossy(bad));
        }
    }

    #[test]
    fn constant_image_has_zero_entropy() {
        let img = decode_pnm(&pgm(4, 4, &[77; 16])).unwrap();
        assert_eq!(histogram_entropy(&img, 32), 0.0);
    }

    #[test]
    fn two_level_entropy_is_ln2_per_channel() {
        let img = RasterImage {
            width: 2,
            height: 1,
            channels: 3,
            data: vec![0, 0, 0, 255, 255, 255],
        };
        let e = histogram_entropy(&img, 32);
        assert!((e - 3.0 * std::f64::consts::LN_2).abs() < 1e-12);
        // Values 0 and 7 share the first of 32 bins.
        let img = RasterImage {
            width: 2,
            height: 1,
            channels: 1,
            data: vec![0, 7],
        };
        assert_eq!(histogram_entropy(&img, 32), 0.0);
    }

    #[test]
    fn flat_image_has_no_corners() {
        assert_eq!(count_fast_corners(&[100; 100], 10, 10, FastConfig::default()), 0);
    }

    #[test]
    fn isolated_bright_pixel_is_one_corner() {
        let (w, h) = (9, 9);
        let mut img = vec![0u8; w * h];
        img[4 * w + 4] = 255;
        // The centre pixel sees 16 darker neighbours; nothing else qualifies
        // because each other pixel sees at most one brighter circle pixel.
        assert_eq!(count_fast_corners(&img, w, h, FastConfig::default()), 1);
    }

    #[test]
    fn square_corner_is_detected() {
        // A bright quadrant: pixel at its tip sees a 12-long dark arc.
        let (w, h) = (15, 15);
        let mut img = vec![0u8; w * h];
        for y in 7..h {
            for x in 7..w {
                img[y * w + x] = 200;
            }
        }
        let n = count_fast_corners(&img, w, h, FastConfig::default());
        assert!(n >= 1, "{n}");
        assert_eq!(n, naive_fast(&img, w, h, 20, 9));
    }

    fn naive_fast(img: &[u8], w: usize, h: usize, t: i32, arc: usize) -> usize {
        let mut n = 0;
        for y in 3..h - 3 {
            for x in 3..w - 3 {
                let c = img[y * w + x] as i32;
                let ring: Vec<i32> = CIRCLE
                    .iter()
                    .map(|(dx, dy)| img[(y as isize + dy) as usize * w + (x as isize + dx) as usize] as i32)
                    .collect();
                let corner = (0..16).any(|s| {
                    (0..arc).all(|k| ring[(s + k) % 16] > c + t) || (0..arc).all(|k| ring[(s + k) % 16] < c - t)
                });
                n += corner as usize;
            }
        }
        n
    }

    proptest::proptest! {
        #[test]
        fn fast_matches_naive(pixels in proptest::collection::vec(proptest::prelude::any::<u8>(), 144)) {
            let got = count_fast_corners(&pixels, 12, 12, FastConfig::default());
            proptest::prop_assert_eq!(got, naive_fast(&pixels, 12, 12, 20, 9));
        }

        #[test]
        fn decoder_never_panics(bytes in proptest::collection::vec(proptest::prelude::any::<u8>(), 0..64)) {
            let _ = decode_pnm(&bytes);
        }
    }
}
