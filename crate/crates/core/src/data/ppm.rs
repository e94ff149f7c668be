use crate::augment::Image;
use crate::error::{Error, Result};

/// Binary P6 with maxval 255.
pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.data());
    out
}

/// Binary P5 greyscale with maxval 255.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(Error::contract(format!(
            "pgm: {} pixels for {width}x{height}",
            pixels.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n' && b != b'\r') {
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
            return Err(Error::Format(format!("ppm: missing {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::Format(format!("ppm: {what} out of range")))
    }
}

/// Decodes a binary P6 image (maxval 255, `#` comments allowed in the header).
pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(Error::Format("ppm: bad magic, expected P6".into()));
    }
    let mut header = Header { bytes, pos: 2 };
    let width = header.number("width")?;
    let height = header.number("height")?;
    let maxval = header.number("maxval")?;
    if maxval != 255 {
        return Err(Error::Unsupported(format!("ppm: maxval {maxval} (only 255)")));
    }
    // Exactly one whitespace byte separates the header from the payload.
    match bytes.get(header.pos) {
        Some(b) if b.is_ascii_whitespace() => header.pos += 1,
        _ => return Err(Error::Format("ppm: header not terminated".into())),
    }
    if width == 0 || height == 0 {
        return Err(Error::Format(format!("ppm: empty image {width}x{height}")));
    }
    let need = width
        .checked_mul(height)
        .and_then(|p| p.checked_mul(3))
        .ok_or_else(|| Error::Format("ppm: dimensions overflow".into()))?;
    let payload = &bytes[header.pos..];
    if payload.len() < need {
        return Err(Error::Format(format!(
            "ppm: truncated payload ({} of {need} bytes)",
            payload.len()
        )));
    }
    Image::from_raw(width, height, payload[..need].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_by_two_round_trip() {
        let mut bytes = b"P6 2 2 255\n".to_vec();
        bytes.extend(0u8..12);
        let img = decode_ppm(&bytes).unwrap();
        assert_eq!((img.width(), img.height()), (2, 2));
        assert_eq!(img.data(), (0u8..12).collect::<Vec<_>>().as_slice());
        assert_eq!(img.pixel(1, 0), [3, 4, 5]);
        assert_eq!(decode_ppm(&encode_ppm(&img)).unwrap(), img);
    }

    #[test]
    fn comments_are_ignored() {
        let payload: Vec<u8> = (0u8..12).collect();
        let plain = [b"P6\n2 2\n255\n".as_slice(), &payload].concat();
        let commented = [b"P6\n# cam0\n2 # w\n2\n255\n".as_slice(), &payload].concat();
        assert_eq!(decode_ppm(&plain).unwrap(), decode_ppm(&commented).unwrap());
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(decode_ppm(b"P5 2 2 255\n0000"), Err(Error::Format(_))));
        assert!(matches!(decode_ppm(b"P6 2 2 65535\n"), Err(Error::Unsupported(_))));
        assert!(matches!(decode_ppm(b"P6 2 2 255\n0123456789"), Err(Error::Format(_))));
        assert!(matches!(decode_ppm(b"P6 2"), Err(Error::Format(_))));
        assert!(matches!(decode_ppm(b""), Err(Error::Format(_))));
    }

    #[test]
    fn payload_may_start_with_whitespace_bytes() {
        let mut bytes = b"P6 1 1 255\n".to_vec();
        bytes.extend(b" \n\t");
        assert_eq!(decode_ppm(&bytes).unwrap().pixel(0, 0), [b' ', b'\n', b'\t']);
    }

    #[test]
    fn pgm_header() {
        let bytes = encode_pgm(2, 1, &[0, 255]).unwrap();
        assert_eq!(bytes, b"P5\n2 1\n255\n\x00\xff");
        assert!(encode_pgm(2, 2, &[0]).is_err());
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(w in 1usize..20, h in 1usize..20, seed in any::<u64>()) {
            let mut rng = crate::tensor::Rng::new(seed);
            let data: Vec<u8> = (0..w * h * 3).map(|_| rng.below(256) as u8).collect();
            let img = Image::from_raw(w, h, data).unwrap();
            prop_assert_eq!(decode_ppm(&encode_ppm(&img)).unwrap(), img);
        }
    }
}
