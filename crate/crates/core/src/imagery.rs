//! 8-bit image and binary mask containers with binary Netpbm IO.
//!
//! Only the raw variants are supported: P5 (grayscale) and P6 (RGB), both
//! with maxval 255. The writer always emits the header as a single line
//! `P5 <w> <h> 255\n` (or `P6 ...`) followed by the raw payload, so
//! `write(read(f))` reproduces any file already in that form byte for byte.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

/// Largest accepted side length.
pub const MAX_SIDE: usize = 4096;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported maxval {0}, only 255 is accepted")]
    UnsupportedMaxval(u32),
    #[error("payload truncated: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("{0} unexpected bytes after payload")]
    TrailingBytes(usize),
    #[error("invalid dimensions {width}x{height}x{channels}")]
    InvalidDimensions {
        width: usize,
        height: usize,
        channels: usize,
    },
    #[error("data length {found} does not match dimensions (expected {expected})")]
    DataLength { expected: usize, found: usize },
    #[error("io failure: {0}")]
    IoFailure(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<u8>,
    ) -> Result<Self, ImageError> {
        check_dims(width, height, channels)?;
        let expected = width * height * channels;
        if data.len() != expected {
            return Err(ImageError::DataLength {
                expected,
                found: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Result<Self, ImageError> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: u8) {
        let i = self.index(x, y, c);
        self.data[i] = v;
    }

    /// Mean intensity per channel over the pixels selected by `select`.
    pub fn channel_means(&self, mut select: impl FnMut(usize, usize) -> bool) -> Option<Vec<f64>> {
        let mut sums = vec![0.0; self.channels];
        let mut n = 0usize;
        for y in 0..self.height {
            for x in 0..self.width {
                if select(x, y) {
                    n += 1;
                    for (c, s) in sums.iter_mut().enumerate() {
                        *s += self.get(x, y, c) as f64;
                    }
                }
            }
        }
        (n > 0).then(|| sums.into_iter().map(|s| s / n as f64).collect())
    }
}

fn check_dims(width: usize, height: usize, channels: usize) -> Result<(), ImageError> {
    let ok = (1..=MAX_SIDE).contains(&width)
        && (1..=MAX_SIDE).contains(&height)
        && (channels == 1 || channels == 3);
    if ok {
        Ok(())
    } else {
        Err(ImageError::InvalidDimensions {
            width,
            height,
            channels,
        })
    }
}

/// Binary per-pixel mask; every stored value is 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PixelMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl PixelMask {
    /// Builds a mask from arbitrary bytes; any nonzero byte becomes 1.
    pub fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Self, ImageError> {
        check_dims(width, height, 1)?;
        if bytes.len() != width * height {
            return Err(ImageError::DataLength {
                expected: width * height,
                found: bytes.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data: bytes.iter().map(|&b| u8::from(b != 0)).collect(),
        })
    }

    pub fn empty(width: usize, height: usize) -> Result<Self, ImageError> {
        Self::from_bytes(width, height, &vec![0; width * height])
    }

    pub fn full(width: usize, height: usize) -> Result<Self, ImageError> {
        Self::from_bytes(width, height, &vec![1; width * height])
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> bool,
    ) -> Result<Self, ImageError> {
        check_dims(width, height, 1)?;
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(u8::from(f(x, y)));
            }
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.data[y * self.width + x] = u8::from(on);
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn is_full(&self) -> bool {
        self.count() == self.data.len()
    }

    pub fn area_fraction(&self) -> f64 {
        self.count() as f64 / self.data.len() as f64
    }

    pub fn matches(&self, img: &Image) -> bool {
        self.width == img.width() && self.height == img.height()
    }

    /// Tight bounding box `(x0, y0, x1, y1)` in pixels, exclusive on the high side.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    bb = Some(match bb {
                        None => (x, y, x + 1, y + 1),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1)),
                    });
                }
            }
        }
        bb
    }

    /// Pixels outside the mask within Chebyshev distance `radius` of it.
    pub fn ring(&self, radius: usize) -> PixelMask {
        let mut out = PixelMask {
            width: self.width,
            height: self.height,
            data: vec![0; self.data.len()],
        };
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.get(x, y) {
                    continue;
                }
                let (xa, xb) = (x.saturating_sub(radius), (x + radius).min(self.width - 1));
                let (ya, yb) = (y.saturating_sub(radius), (y + radius).min(self.height - 1));
                for yy in ya..=yb {
                    for xx in xa..=xb {
                        if !self.get(xx, yy) {
                            out.set(xx, yy, true);
                        }
                    }
                }
            }
        }
        out
    }

    /// Nearest-neighbor resize; keeps the mask binary.
    pub fn resize_nearest(&self, width: usize, height: usize) -> Result<PixelMask, ImageError> {
        PixelMask::from_fn(width, height, |x, y| {
            let sx = (x * self.width) / width;
            let sy = (y * self.height) / height;
            self.get(sx, sy)
        })
    }
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    payload_at: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header, ImageError> {
    if bytes.len() < 2 || bytes[0] != b'P' || !(bytes[1] == b'5' || bytes[1] == b'6') {
        return Err(ImageError::MalformedHeader("expected P5 or P6 magic".into()));
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for (k, field) in fields.iter_mut().enumerate() {
        // Whitespace and comments before each numeric field.
        let start_ws = pos;
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        if pos == start_ws {
            return Err(ImageError::MalformedHeader(format!("missing separator before field {k}")));
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(ImageError::MalformedHeader(format!("field {k} is not a number")));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ImageError::MalformedHeader(format!("field {k} out of range")))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(ImageError::MalformedHeader("no whitespace after maxval".into())),
    }
    if fields[2] != 255 {
        return Err(ImageError::UnsupportedMaxval(fields[2]));
    }
    Ok(Header {
        magic: [bytes[0], bytes[1]],
        width: fields[0] as usize,
        height: fields[1] as usize,
        payload_at: pos,
    })
}

pub fn decode_netpbm(bytes: &[u8]) -> Result<Image, ImageError> {
    let h = parse_header(bytes)?;
    let channels = if h.magic[1] == b'5' { 1 } else { 3 };
    check_dims(h.width, h.height, channels)?;
    let expected = h.width * h.height * channels;
    let found = bytes.len() - h.payload_at;
    if found < expected {
        return Err(ImageError::TruncatedPayload { expected, found });
    }
    if found > expected {
        return Err(ImageError::TrailingBytes(found - expected));
    }
    Image::new(h.width, h.height, channels, bytes[h.payload_at..].to_vec())
}

pub fn encode_netpbm(img: &Image) -> Vec<u8> {
    let magic = if img.channels() == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic} {} {} 255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.data());
    out
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Image, ImageError> {
    decode_netpbm(&fs::read(path)?)
}

pub fn write_image(img: &Image, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_netpbm(img))?;
    Ok(())
}

/// Reads a P5 mask; nonzero bytes map to 1.
pub fn mask_read(path: impl AsRef<Path>) -> Result<PixelMask, ImageError> {
    let img = read_image(path)?;
    if img.channels() != 1 {
        return Err(ImageError::MalformedHeader("masks must be P5".into()));
    }
    PixelMask::from_bytes(img.width(), img.height(), img.data())
}

/// Writes a P5 mask with values {0, 255}.
pub fn mask_write(mask: &PixelMask, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let img = mask_to_image(mask);
    write_image(&img, path)
}

pub fn mask_to_image(mask: &PixelMask) -> Image {
    let data = mask.data().iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
    Image::new(mask.width(), mask.height(), 1, data).expect("mask dimensions already validated")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_p5_reads_as_constant_image() {
        let mut bytes = b"P5 8 8 255\n".to_vec();
        bytes.extend(vec![0u8; 64]);
        let img = decode_netpbm(&bytes).unwrap();
        assert_eq!((img.width(), img.height(), img.channels()), (8, 8, 1));
        assert!(img.data().iter().all(|&v| v == 0));
    }

    #[test]
    fn short_payload_is_truncated() {
        let mut bytes = b"P5 8 8 255\n".to_vec();
        bytes.extend(vec![0u8; 63]);
        assert!(matches!(
            decode_netpbm(&bytes),
            Err(ImageError::TruncatedPayload { expected: 64, found: 63 })
        ));
    }

    #[test]
    fn header_errors() {
        assert!(matches!(decode_netpbm(b"P3 1 1 255\n\0"), Err(ImageError::MalformedHeader(_))));
        assert!(matches!(decode_netpbm(b"P5 1 1 65535\n\0\0"), Err(ImageError::UnsupportedMaxval(65535))));
        assert!(matches!(decode_netpbm(b"P5 x 1 255\n\0"), Err(ImageError::MalformedHeader(_))));
        assert!(matches!(decode_netpbm(b"P5 1 1 255\n\0\0"), Err(ImageError::TrailingBytes(1))));
    }

    #[test]
    fn comments_and_multiline_headers_are_accepted() {
        let bytes = b"P5\n# made by hand\n2 1\n255\n\x01\x02";
        let img = decode_netpbm(bytes).unwrap();
        assert_eq!(img.data(), &[1, 2]);
    }

    #[test]
    fn two_by_two_encodes_to_fifteen_bytes() {
        // Hand encoding: "P5 2 2 255\n" is 11 bytes, plus 4 payload bytes.
        let img = Image::new(2, 2, 1, vec![0, 255, 0, 255]).unwrap();
        let bytes = encode_netpbm(&img);
        let mut expected = b"P5 2 2 255\n".to_vec();
        expected.extend([0, 255, 0, 255]);
        assert_eq!(bytes.len(), 15);
        assert_eq!(bytes, expected);
    }

    #[test]
    fn two_channels_rejected_at_construction() {
        assert!(matches!(
            Image::new(8, 8, 2, vec![0; 128]),
            Err(ImageError::InvalidDimensions { channels: 2, .. })
        ));
    }

    #[test]
    fn mask_thresholds_nonzero() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        let img = Image::new(4, 1, 1, vec![0, 128, 255, 1]).unwrap();
        write_image(&img, &p).unwrap();
        let m = mask_read(&p).unwrap();
        assert_eq!(m.data(), &[0, 1, 1, 1]);

        write_image(&Image::filled(8, 8, 1, 255).unwrap(), &p).unwrap();
        assert!(mask_read(&p).unwrap().is_full());
        write_image(&Image::filled(8, 8, 1, 0).unwrap(), &p).unwrap();
        assert!(mask_read(&p).unwrap().is_empty());
    }

    #[test]
    fn ring_and_bbox() {
        let m = PixelMask::from_fn(10, 10, |x, y| (4..6).contains(&x) && (4..6).contains(&y)).unwrap();
        assert_eq!(m.bounding_box(), Some((4, 4, 6, 6)));
        let ring = m.ring(1);
        assert_eq!(ring.count(), 16 - 4);
        assert!(!ring.get(4, 4));
        assert_eq!(PixelMask::empty(8, 8).unwrap().bounding_box(), None);
    }

    #[test]
    fn nearest_resize_stays_binary() {
        let m = PixelMask::from_fn(8, 8, |x, _| x < 4).unwrap();
        let r = m.resize_nearest(16, 4).unwrap();
        assert_eq!(r.count(), 32);
        assert!(r.data().iter().all(|&v| v <= 1));
    }

    fn arb_image() -> impl Strategy<Value = Image> {
        (1usize..20, 1usize..20, prop_oneof![Just(1usize), Just(3usize)]).prop_flat_map(|(w, h, c)| {
            proptest::collection::vec(any::<u8>(), w * h * c)
                .prop_map(move |d| Image::new(w, h, c, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn netpbm_round_trip(img in arb_image()) {
            let bytes = encode_netpbm(&img);
            let back = decode_netpbm(&bytes).unwrap();
            prop_assert_eq!(&back, &img);
            prop_assert_eq!(encode_netpbm(&back), bytes);
        }

        #[test]
        fn mask_round_trip(bits in proptest::collection::vec(0u8..2, 64)) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("m.pgm");
            let m = PixelMask::from_bytes(8, 8, &bits).unwrap();
            mask_write(&m, &p).unwrap();
            prop_assert_eq!(mask_read(&p).unwrap(), m);
        }
    }
}
