// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reversible byte <-> printable-character mapping used by byte-level BPE
//! vocabularies (the GPT-2 convention).

use std::sync::OnceLock;

/// Bytes in GPT-2 vocabulary order: printable ranges first, then the rest.
pub(crate) fn byte_order() -> &'static [u8; 256] {
    static ORDER: OnceLock<[u8; 256]> = OnceLock::new();
    ORDER.get_or_init(|| {
        let mut out = [0u8; 256];
        let mut n = 0;
        for b in 0..=255u8 {
            if is_printable(b) {
                out[n] = b;
                n += 1;
            }
        }
        for b in 0..=255u8 {
            if !is_printable(b) {
                out[n] = b;
                n += 1;
            }
        }
        out
    })
}

fn is_printable(b: u8) -> bool {
    matches!(b, b'!'..=b'~' | 0xA1..=0xAC | 0xAE..=0xFF)
}

fn table() -> &'static [char; 256] {
    static TABLE: OnceLock<[char; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut out = ['\0'; 256];
        let mut extra = 0u32;
        for b in 0..=255u8 {
            out[b as usize] = if is_printable(b) {
                char::from(b)
            } else {
                let c = char::from_u32(256 + extra).expect("valid code point");
                extra += 1;
                c
            };
        }
        out
    })
}

pub(crate) fn byte_to_char(b: u8) -> char {
    table()[b as usize]
}

pub(crate) fn char_to_byte(c: char) -> Option<u8> {
    let code = c as u32;
    if code < 256 && is_printable(code as u8) {
        return Some(code as u8);
    }
    table().iter().position(|&t| t == c).map(|i| i as u8)
}

pub(crate) fn encode_bytes(bytes: &[u8]) -> String {
    bytes.iter().map(|&b| byte_to_char(b)).collect()
}

/// Inverse of [`encode_bytes`]; `None` if a character is outside the table.
pub(crate) fn decode_string(s: &str) -> Option<Vec<u8>> {
    s.chars().map(char_to_byte).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn space_and_newline_match_gpt2() {
        assert_eq!(byte_to_char(b' '), 'Ġ');
        assert_eq!(byte_to_char(b'\n'), 'Ċ');
        assert_eq!(byte_to_char(b'a'), 'a');
        // newline sits at id 198 in the byte order
        assert_eq!(byte_order().iter().position(|&b| b == b'\n'), Some(198));
    }

    #[test]
    fn all_bytes_round_trip() {
        let all: Vec<u8> = (0..=255).collect();
        assert_eq!(decode_string(&encode_bytes(&all)).unwrap(), all);
    }
}
