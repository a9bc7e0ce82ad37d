//! Class-name tokenizer: a fixed map from label strings to id sequences.
//!
//! Every sentence opens with the reserved template ids ("a photo of a ...");
//! the class name itself is split into words and each word contributes its
//! boundary-marked character bigrams, hashed into the non-reserved id range.
//! The map is stateless, so any two runs agree on every id.

/// Ids below this value are reserved: 0 is padding, 1..=4 spell the template.
pub const RESERVED_TOKENS: usize = 8;

const PAD: usize = 0;
const TEMPLATE: [usize; 4] = [1, 2, 3, 1]; // "a photo of a"

#[derive(Clone, Debug)]
pub struct Tokenizer {
    vocab_size: usize,
    max_len: usize,
}

impl Tokenizer {
    pub fn new(vocab_size: usize, max_len: usize) -> Self {
        Tokenizer { vocab_size, max_len }
    }

    /// Token sequence for one class sentence, padded/truncated to max_len.
    pub fn encode(&self, class_name: &str) -> Vec<usize> {
        let mut ids: Vec<usize> = TEMPLATE.to_vec();
        let span = self.vocab_size - RESERVED_TOKENS;
        for word in class_name
            .split(|c: char| c == ' ' || c == '-' || c == '_')
            .filter(|w| !w.is_empty())
        {
            let marked: Vec<char> = std::iter::once('^')
                .chain(word.to_ascii_lowercase().chars())
                .chain(std::iter::once('$'))
                .collect();
            for pair in marked.windows(2) {
                let mut h = 0xcbf29ce484222325u64;
                for &c in pair {
                    let mut buf = [0u8; 4];
                    for &b in c.encode_utf8(&mut buf).as_bytes() {
                        h ^= b as u64;
                        h = h.wrapping_mul(0x100000001b3);
                    }
                }
                ids.push(RESERVED_TOKENS + (h % span as u64) as usize);
            }
        }
        ids.truncate(self.max_len);
        while ids.len() < self.max_len {
            ids.push(PAD);
        }
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_padded() {
        let tk = Tokenizer::new(256, 16);
        let a = tk.encode("crimson cube");
        let b = tk.encode("crimson cube");
        assert_eq!(a, b);
        assert_eq!(a.len(), 16);
        assert!(a.iter().all(|&id| id < 256));
        assert_eq!(&a[..4], &[1, 2, 3, 1]);
    }

    #[test]
    fn distinct_names_get_distinct_sequences() {
        let tk = Tokenizer::new(256, 16);
        let names = [
            "crimson cube", "crimson orb", "amber cube", "amber wedge",
            "teal helix", "ivory prism", "violet torus", "jade spiral",
        ];
        for (i, a) in names.iter().enumerate() {
            for b in &names[i + 1..] {
                assert_ne!(tk.encode(a), tk.encode(b), "{a} vs {b}");
            }
        }
    }
}
