//! Grayscale image encoders: binary PGM for local inspection and 8-bit
//! grayscale PNG for transmission to vision APIs.
//!
//! The PNG writer emits a zlib stream of stored (uncompressed) deflate
//! blocks, so output bytes are a pure function of the pixels: signature,
//! IHDR, one IDAT, IEND, with per-chunk CRC-32 and a stream Adler-32.

use thiserror::Error;

use crate::dataset::ImageSample;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("image dimension {0} exceeds 65536")]
    ImageTooLarge(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Pgm,
    Png,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedImage {
    pub bytes: Vec<u8>,
    pub format: ImageFormat,
    pub width: usize,
    pub height: usize,
}

/// Quantizes an intensity in `[0, 1]` to a byte, rounding half away from
/// zero.
#[inline]
pub fn quantize(v: f64) -> u8 {
    (v * 255.0).round() as u8
}

/// Encodes a binary "P5" PGM payload.
pub fn encode_pgm(image: &ImageSample) -> EncodedImage {
    let mut bytes = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    bytes.extend(image.pixels.iter().map(|&v| quantize(v)));
    EncodedImage {
        bytes,
        format: ImageFormat::Pgm,
        width: image.width,
        height: image.height,
    }
}

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0D, 0x0A, 0x1A, 0x0A];

const CRC_TABLE: [u32; 256] = build_crc_table();

const fn build_crc_table() -> [u32; 256] {
    let mut table = [0u32; 256];
    let mut n = 0;
    while n < 256 {
        let mut c = n as u32;
        let mut k = 0;
        while k < 8 {
            c = if c & 1 != 0 {
                0xEDB8_8320 ^ (c >> 1)
            } else {
                c >> 1
            };
            k += 1;
        }
        table[n] = c;
        n += 1;
    }
    table
}

pub fn crc32(bytes: &[u8]) -> u32 {
    let mut c = 0xFFFF_FFFFu32;
    for &b in bytes {
        c = CRC_TABLE[((c ^ u32::from(b)) & 0xFF) as usize] ^ (c >> 8);
    }
    c ^ 0xFFFF_FFFF
}

pub fn adler32(bytes: &[u8]) -> u32 {
    const MOD_ADLER: u32 = 65_521;
    let mut a = 1u32;
    let mut b = 0u32;
    for &x in bytes {
        a = (a + u32::from(x)) % MOD_ADLER;
        b = (b + a) % MOD_ADLER;
    }
    (b << 16) | a
}

fn push_chunk(out: &mut Vec<u8>, kind: &[u8; 4], data: &[u8]) {
    out.extend_from_slice(&(data.len() as u32).to_be_bytes());
    let start = out.len();
    out.extend_from_slice(kind);
    out.extend_from_slice(data);
    let crc = crc32(&out[start..]);
    out.extend_from_slice(&crc.to_be_bytes());
}

/// Wraps raw bytes in a zlib stream of stored deflate blocks (max 65535
/// bytes each).
fn zlib_stored(raw: &[u8]) -> Vec<u8> {
    let mut out = vec![0x78, 0x01];
    let mut chunks = raw.chunks(65_535).peekable();
    if raw.is_empty() {
        // A zero-length final stored block keeps empty payloads well-formed.
        out.extend_from_slice(&[0x01, 0x00, 0x00, 0xFF, 0xFF]);
    }
    while let Some(chunk) = chunks.next() {
        let last = chunks.peek().is_none();
        out.push(u8::from(last));
        let len = chunk.len() as u16;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&(!len).to_le_bytes());
        out.extend_from_slice(chunk);
    }
    out.extend_from_slice(&adler32(raw).to_be_bytes());
    out
}

/// Encodes an 8-bit grayscale PNG (color type 0, filter 0 on every
/// scanline).
pub fn encode_png(image: &ImageSample) -> Result<EncodedImage, CodecError> {
    for dim in [image.width, image.height] {
        if dim > 1 << 16 {
            return Err(CodecError::ImageTooLarge(dim));
        }
    }

    let mut raw = Vec::with_capacity(image.height * (image.width + 1));
    for row in 0..image.height {
        raw.push(0u8); // filter type 0
        for col in 0..image.width {
            raw.push(quantize(image.get(row, col)));
        }
    }

    let mut ihdr = Vec::with_capacity(13);
    ihdr.extend_from_slice(&(image.width as u32).to_be_bytes());
    ihdr.extend_from_slice(&(image.height as u32).to_be_bytes());
    // bit depth 8, color type 0 (grayscale), compression 0, filter 0,
    // interlace 0
    ihdr.extend_from_slice(&[8, 0, 0, 0, 0]);

    let mut bytes = PNG_SIGNATURE.to_vec();
    push_chunk(&mut bytes, b"IHDR", &ihdr);
    push_chunk(&mut bytes, b"IDAT", &zlib_stored(&raw));
    push_chunk(&mut bytes, b"IEND", &[]);

    Ok(EncodedImage {
        bytes,
        format: ImageFormat::Png,
        width: image.width,
        height: image.height,
    })
}
