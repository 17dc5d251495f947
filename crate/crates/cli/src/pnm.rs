//! Binary PGM (P5) and PPM (P6) with maxval 255.

use facekp::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PnmError {
    #[error("not a binary PGM/PPM file (magic {0:?})")]
    BadMagic(String),
    #[error("unsupported maxval {0}, only 255 is accepted")]
    UnsupportedMaxval(u64),
    #[error("pixel data truncated: need {needed} bytes, have {found}")]
    Truncated { needed: usize, found: usize },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Header<'a> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn field(&mut self, what: &str) -> Result<u64, PnmError> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(PnmError::MalformedHeader(format!("missing {what}")));
        }
        if self.pos - start > 9 {
            return Err(PnmError::MalformedHeader(format!("{what} too large")));
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
        Ok(text.parse().expect("at most 9 digits"))
    }
}

/// Decodes to a 3×H×W tensor in `[0, 1]`; gray images fill all three channels.
pub fn parse_pnm(bytes: &[u8]) -> Result<Tensor, PnmError> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        other => {
            let magic = other.map_or_else(
                || String::from_utf8_lossy(bytes).into_owned(),
                |m| String::from_utf8_lossy(m).into_owned(),
            );
            return Err(PnmError::BadMagic(magic));
        }
    };
    let mut hdr = Header { bytes, pos: 2 };
    if !bytes.get(2).is_some_and(|c| c.is_ascii_whitespace() || *c == b'#') {
        return Err(PnmError::MalformedHeader("no separator after magic".into()));
    }
    let width = hdr.field("width")? as usize;
    let height = hdr.field("height")? as usize;
    let maxval = hdr.field("maxval")?;
    if width == 0 || height == 0 {
        return Err(PnmError::MalformedHeader(format!("empty image {width}x{height}")));
    }
    if maxval != 255 {
        return Err(PnmError::UnsupportedMaxval(maxval));
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(hdr.pos) {
        Some(c) if c.is_ascii_whitespace() => hdr.pos += 1,
        Some(_) => return Err(PnmError::MalformedHeader("no separator after maxval".into())),
        None => {
            return Err(PnmError::Truncated {
                needed: width * height * channels,
                found: 0,
            })
        }
    }
    let needed = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| PnmError::MalformedHeader("image dimensions overflow".into()))?;
    let raster = &bytes[hdr.pos..];
    if raster.len() < needed {
        return Err(PnmError::Truncated {
            needed,
            found: raster.len(),
        });
    }
    let plane = width * height;
    let mut data = vec![0f32; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            let src = if channels == 1 { raster[i] } else { raster[i * 3 + c] };
            data[c * plane + i] = src as f32 / 255.0;
        }
    }
    Ok(Tensor::new(3, height, width, data).expect("sizes agree"))
}

/// Encodes a 3-channel tensor as P6, clamping to `[0, 1]` and rounding.
pub fn encode_ppm(t: &Tensor) -> Vec<u8> {
    let (c, h, w) = t.dims();
    assert_eq!(c, 3, "PPM needs 3 channels");
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                out.push((t.at(ch, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_pixel_fills_three_channels() {
        let t = parse_pnm(b"P5\n1 1\n255\n\xff").unwrap();
        assert_eq!(t.dims(), (3, 1, 1));
        assert_eq!(t.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn color_layout_is_channel_major() {
        let t = parse_pnm(b"P6\n2 1\n255\n\xff\x00\x00\x00\x00\xff").unwrap();
        assert_eq!(t.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn comments_are_skipped() {
        let plain = parse_pnm(b"P5 2 1 255\n\x10\x20").unwrap();
        let commented = parse_pnm(b"P5\n# made by hand\n2 # width\n1\n#x\n255\n\x10\x20").unwrap();
        assert_eq!(plain, commented);
    }

    #[test]
    fn designated_errors() {
        assert!(matches!(parse_pnm(b"P3\n1 1\n255\n0"), Err(PnmError::BadMagic(_))));
        assert!(matches!(parse_pnm(b""), Err(PnmError::BadMagic(_))));
        assert_eq!(parse_pnm(b"P5\n1 1\n65535\n\0\0"), Err(PnmError::UnsupportedMaxval(65535)));
        assert_eq!(
            parse_pnm(b"P6\n2 2\n255\n\0\0\0"),
            Err(PnmError::Truncated { needed: 12, found: 3 })
        );
        assert!(matches!(parse_pnm(b"P5\nx 1\n255\n\0"), Err(PnmError::MalformedHeader(_))));
        assert!(matches!(parse_pnm(b"P5\n0 1\n255\n"), Err(PnmError::MalformedHeader(_))));
        assert!(matches!(parse_pnm(b"P5\n1 1\n255"), Err(PnmError::Truncated { .. })));
    }

    #[test]
    fn ppm_round_trip() {
        let t = Tensor::from_fn(3, 4, 5, |c, y, x| ((c * 20 + y * 5 + x) as f32) / 255.0);
        assert_eq!(parse_pnm(&encode_ppm(&t)).unwrap(), t);
    }
}
