//! Binary PGM (`P5`) and PPM (`P6`) images with 8-bit samples.

use fmvit_core::tensor::Tensor;

use crate::CliError;

/// Decodes to a `(1, C, H, W)` tensor with samples scaled to `[0, 1]`.
pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor, CliError> {
    let bad = |m: &str| CliError::Format(format!("image: {m}"));
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(bad("expected a binary PGM (P5) or PPM (P6) header")),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("malformed header"))?;
    }
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 || maxval == 0 || maxval > 255 {
        return Err(bad("only non-empty 8-bit images are supported"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("malformed header"));
    }
    let pixels = &bytes[pos + 1..];
    if pixels.len() != w * h * channels {
        return Err(bad(&format!(
            "expected {} pixel bytes for {w}x{h}, found {}",
            w * h * channels,
            pixels.len()
        )));
    }
    let scale = maxval as f32;
    Ok(Tensor::from_fn([1, channels, h, w], |[_, c, y, x]| {
        pixels[(y * w + x) * channels + c] as f32 / scale
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_both_kinds() {
        let g = decode_pnm(b"P5\n# comment\n2 1\n255\n\x00\xff").unwrap();
        assert_eq!(g.dims(), [1, 1, 1, 2]);
        assert_eq!(g.data(), &[0.0, 1.0]);
        let c = decode_pnm(b"P6 1 1 255\n\xff\x00\x33").unwrap();
        assert_eq!(c.dims(), [1, 3, 1, 1]);
        assert_eq!(c.data(), &[1.0, 0.0, 0.2]);
        assert!(decode_pnm(b"P6 1 1 255\n\xff").is_err());
        assert!(decode_pnm(b"P3 1 1 255\n1 2 3").is_err());
    }
}
