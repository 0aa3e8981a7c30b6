//! Binary PPM (P6) input/output, heat colormap, overlays and CSV map dumps.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 8-bit RGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    pixels: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<[u8; 3]>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::shape("image dims must be positive"));
        }
        if pixels.len() != width * height {
            return Err(Error::shape(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(RgbImage {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        Self::new(width, height, vec![rgb; width * height])
    }

    /// Grayscale rendering of a `[H,W]` or `[1,H,W]` tensor with values in
    /// `[0, 1]` (clamped).
    pub fn from_gray(t: &Tensor) -> Result<Self> {
        let (h, w) = match t.shape()[..] {
            [h, w] | [1, h, w] => (h, w),
            _ => {
                return Err(Error::shape(format!(
                    "expected a gray plane, got {:?}",
                    t.shape()
                )))
            }
        };
        let pixels = t
            .data()
            .iter()
            .map(|&v| {
                let b = to_byte(v.clamp(0.0, 1.0) * 255.0);
                [b, b, b]
            })
            .collect();
        Self::new(w, h, pixels)
    }

    /// `[3,H,W]` tensor with values in `[0, 1]` (clamped).
    pub fn from_rgb_tensor(t: &Tensor) -> Result<Self> {
        let [3, h, w] = t.shape()[..] else {
            return Err(Error::shape(format!(
                "expected [3,H,W], got {:?}",
                t.shape()
            )));
        };
        let plane = h * w;
        let d = t.data();
        let px = |i: usize| to_byte(d[i].clamp(0.0, 1.0) * 255.0);
        let pixels = (0..plane)
            .map(|i| [px(i), px(plane + i), px(2 * plane + i)])
            .collect();
        Self::new(w, h, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[[u8; 3]] {
        &self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        self.pixels[y * self.width + x]
    }
}

fn to_byte(v: f64) -> u8 {
    // f64::round rounds half away from zero.
    v.round().clamp(0.0, 255.0) as u8
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
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
            return Err(Error::format(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(start, format!("{what} out of range")))
    }
}

/// Parses binary PPM bytes. Only maxval 255 is accepted.
pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    if !bytes.starts_with(b"P6") {
        return Err(Error::format(0, "missing P6 magic"));
    }
    let mut r = HeaderReader { bytes, pos: 2 };
    let width = r.number("width")?;
    let height = r.number("height")?;
    r.skip_space_and_comments();
    let maxval_at = r.pos;
    let maxval = r.number("maxval")?;
    if maxval != 255 {
        return Err(Error::format(
            maxval_at,
            format!("unsupported maxval {maxval} (only 255)"),
        ));
    }
    match bytes.get(r.pos) {
        Some(b) if b.is_ascii_whitespace() => r.pos += 1,
        _ => return Err(Error::format(r.pos, "expected whitespace after maxval")),
    }
    if width == 0 || height == 0 {
        return Err(Error::format(2, "zero image dimension"));
    }
    let need = width * height * 3;
    let body = &bytes[r.pos..];
    if body.len() < need {
        return Err(Error::format(
            bytes.len(),
            format!(
                "pixel data truncated: need {need} bytes, have {}",
                body.len()
            ),
        ));
    }
    let pixels = body[..need]
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();
    RgbImage::new(width, height, pixels)
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.reserve(img.pixels.len() * 3);
    for p in &img.pixels {
        out.extend_from_slice(p);
    }
    out
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    decode_ppm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_ppm(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

/// Converts an image to a `[C,H,W]` tensor in `[0, 1]`. One-channel models
/// get luma `0.299R + 0.587G + 0.114B`.
pub fn to_input_tensor(img: &RgbImage, input_shape: [usize; 3]) -> Result<Tensor> {
    let [c, h, w] = input_shape;
    if h != img.height || w != img.width {
        return Err(Error::shape(format!(
            "image is {}x{}, model expects {w}x{h}",
            img.width, img.height
        )));
    }
    let plane = h * w;
    let data = match c {
        1 => img
            .pixels
            .iter()
            .map(|p| {
                (0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2]))
                    / 255.0
            })
            .collect(),
        3 => {
            let mut data = vec![0.0; 3 * plane];
            for (i, p) in img.pixels.iter().enumerate() {
                for ch in 0..3 {
                    data[ch * plane + i] = f64::from(p[ch]) / 255.0;
                }
            }
            data
        }
        _ => {
            return Err(Error::shape(format!(
                "images map to 1 or 3 channels, model expects {c}"
            )))
        }
    };
    Tensor::new(vec![c, h, w], data)
}

/// Piecewise-linear jet approximation; `v` is clamped to `[0, 1]`.
pub fn colormap(v: f64) -> [u8; 3] {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    let ch = |center: f64| to_byte(255.0 * (1.5 - (4.0 * v - center).abs()).clamp(0.0, 1.0));
    [ch(3.0), ch(2.0), ch(1.0)]
}

/// Colormapped rendering of a `[H,W]` map.
pub fn heatmap_image(heat: &Tensor) -> Result<RgbImage> {
    let (h, w) = heat.dims2()?;
    RgbImage::new(w, h, heat.data().iter().map(|&v| colormap(v)).collect())
}

/// Per-channel `round((1 − blend)·base + blend·colormap(heat))`.
pub fn overlay(base: &RgbImage, heat: &Tensor, blend: f64) -> Result<RgbImage> {
    if !(0.0..=1.0).contains(&blend) {
        return Err(Error::param(format!(
            "blend must lie in [0, 1], got {blend}"
        )));
    }
    let (h, w) = heat.dims2()?;
    if (w, h) != (base.width, base.height) {
        return Err(Error::shape(format!(
            "heat map is {w}x{h}, image is {}x{}",
            base.width, base.height
        )));
    }
    let pixels = base
        .pixels
        .iter()
        .zip(heat.data())
        .map(|(p, &v)| {
            let hot = colormap(v);
            let mix =
                |i: usize| to_byte((1.0 - blend) * f64::from(p[i]) + blend * f64::from(hot[i]));
            [mix(0), mix(1), mix(2)]
        })
        .collect();
    RgbImage::new(w, h, pixels)
}

/// CSV text for a `[H,W]` map: one line per row, fixed 9-digit precision.
/// `header` lines are emitted first, each prefixed with `# `.
pub fn map_csv(map: &Tensor, header: &[String]) -> Result<String> {
    let (h, w) = map.dims2()?;
    let mut out = String::new();
    for line in header {
        out.push_str("# ");
        out.push_str(line);
        out.push('\n');
    }
    for r in 0..h {
        let row: Vec<String> = (0..w).map(|c| format!("{:.9}", map.at2(r, c))).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    Ok(out)
}

pub fn write_map_csv(map: &Tensor, header: &[String], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, map_csv(map, header)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reads_minimal_ppm() {
        let mut bytes = b"P6 2 1 255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        let img = decode_ppm(&bytes).unwrap();
        assert_eq!((img.width(), img.height()), (2, 1));
        assert_eq!(img.pixels(), &[[1, 2, 3], [4, 5, 6]]);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P6\n# made by hand\n1 # width done\n1\n255\n".to_vec();
        bytes.extend_from_slice(&[9, 8, 7]);
        assert_eq!(decode_ppm(&bytes).unwrap().pixel(0, 0), [9, 8, 7]);
    }

    #[test]
    fn rejects_bad_ppm() {
        match decode_ppm(b"P6 1 1 65535\n\0\0\0\0\0\0") {
            Err(Error::Format { offset, message }) => {
                assert_eq!(offset, 7);
                assert!(message.contains("65535"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            decode_ppm(b"P3 1 1 255\n1 2 3"),
            Err(Error::Format { offset: 0, .. })
        ));
        assert!(matches!(
            decode_ppm(b"P6 2 2 255\n\0\0\0"),
            Err(Error::Format { .. })
        ));
        assert!(matches!(
            decode_ppm(b"P6 x"),
            Err(Error::Format { offset: 3, .. })
        ));
    }

    #[test]
    fn ppm_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::new(3, 2, (0..6u8).map(|i| [i, 2 * i, 255 - i]).collect()).unwrap();
        let path = dir.path().join("x.ppm");
        write_ppm(&img, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(read_ppm(&path).unwrap(), img);
        assert_eq!(encode_ppm(&read_ppm(&path).unwrap()), bytes);
    }

    #[test]
    fn input_tensor_conversion() {
        let white = RgbImage::filled(4, 3, [255; 3]).unwrap();
        assert_eq!(
            to_input_tensor(&white, [3, 3, 4]).unwrap(),
            Tensor::full(&[3, 3, 4], 1.0)
        );
        let black = RgbImage::filled(4, 3, [0; 3]).unwrap();
        assert_eq!(
            to_input_tensor(&black, [1, 3, 4]).unwrap(),
            Tensor::zeros(&[1, 3, 4])
        );
        let red = RgbImage::filled(1, 1, [255, 0, 0]).unwrap();
        let t = to_input_tensor(&red, [1, 1, 1]).unwrap();
        assert!((t.data()[0] - 0.299).abs() < 1e-15);
        assert!(matches!(
            to_input_tensor(&red, [1, 2, 1]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn colormap_goldens() {
        assert_eq!(colormap(0.0), [0, 0, 128]);
        assert_eq!(colormap(0.25), [0, 128, 255]);
        assert_eq!(colormap(0.5), [128, 255, 128]);
        assert_eq!(colormap(0.75), [255, 128, 0]);
        assert_eq!(colormap(1.0), [128, 0, 0]);
        assert_eq!(colormap(-3.0), colormap(0.0));
        assert_eq!(colormap(7.0), colormap(1.0));
    }

    #[test]
    fn colormap_is_monotone_at_the_ends() {
        let share = |p: [u8; 3], ch: usize| {
            f64::from(p[ch]) / (f64::from(p[0]) + f64::from(p[1]) + f64::from(p[2]))
        };
        let steps: Vec<f64> = (0..=100).map(|i| f64::from(i) / 100.0).collect();
        let hot: Vec<[u8; 3]> = steps
            .iter()
            .filter(|&&v| v >= 0.75)
            .map(|&v| colormap(v))
            .collect();
        for pair in hot.windows(2) {
            assert!(share(pair[1], 0) >= share(pair[0], 0));
        }
        let cold: Vec<[u8; 3]> = steps
            .iter()
            .filter(|&&v| v <= 0.25)
            .map(|&v| colormap(v))
            .collect();
        for pair in cold.windows(2) {
            assert!(share(pair[1], 2) <= share(pair[0], 2));
        }
    }

    #[test]
    fn overlay_cases() {
        let base = RgbImage::new(2, 1, vec![[10, 20, 30], [200, 100, 0]]).unwrap();
        let heat = Tensor::matrix(&[vec![0.1, 0.9]]).unwrap();
        assert_eq!(overlay(&base, &heat, 0.0).unwrap(), base);
        assert_eq!(
            overlay(&base, &heat, 1.0).unwrap(),
            heatmap_image(&heat).unwrap()
        );
        let black = RgbImage::filled(3, 2, [0; 3]).unwrap();
        let hot = overlay(&black, &Tensor::full(&[2, 3], 1.0), 0.5).unwrap();
        assert!(hot.pixels().iter().all(|&p| p == [64, 0, 0]));
        assert!(matches!(
            overlay(&base, &Tensor::zeros(&[2, 2]), 0.5),
            Err(Error::Shape(_))
        ));
        assert!(matches!(overlay(&base, &heat, 1.5), Err(Error::Param(_))));
    }

    #[test]
    fn csv_layout() {
        assert_eq!(
            map_csv(&Tensor::full(&[1, 1], 0.5), &[]).unwrap(),
            "0.500000000\n"
        );
        let text = map_csv(
            &Tensor::matrix(&[vec![0.0, 1.0], vec![0.25, 0.125]]).unwrap(),
            &[],
        )
        .unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines.iter().all(|l| l.split(',').count() == 2));
        let text = map_csv(&Tensor::full(&[1, 1], 0.0), &["method=gradcam".into()]).unwrap();
        assert_eq!(text, "# method=gradcam\n0.000000000\n");
    }

    proptest! {
        #[test]
        fn ppm_bytes_roundtrip(w in 1usize..6, h in 1usize..6, seed in proptest::collection::vec(any::<u8>(), 108)) {
            let pixels = (0..w * h).map(|i| [seed[3 * i], seed[3 * i + 1], seed[3 * i + 2]]).collect();
            let img = RgbImage::new(w, h, pixels).unwrap();
            let bytes = encode_ppm(&img);
            prop_assert_eq!(encode_ppm(&decode_ppm(&bytes).unwrap()), bytes);
        }
    }
}
