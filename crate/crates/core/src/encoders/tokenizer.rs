/// Ids of the markers that frame every prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialTokens {
    pub start: u32,
    pub end: u32,
    pub pad: u32,
    pub period: u32,
}

/// Word-level tokenizer for the toy backend: lowercase words hashed into the
/// vocabulary, `.` as its own token. Ids 0..4 are reserved.
#[derive(Debug, Clone)]
pub struct ToyTokenizer {
    vocab_size: u32,
}

const PAD: u32 = 0;
const START: u32 = 1;
const END: u32 = 2;
const PERIOD: u32 = 3;
const RESERVED: u32 = 4;

impl ToyTokenizer {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size: vocab_size as u32,
        }
    }

    pub fn special(&self) -> SpecialTokens {
        SpecialTokens {
            start: START,
            end: END,
            pad: PAD,
            period: PERIOD,
        }
    }

    fn word_id(&self, word: &str) -> u32 {
        // FNV-1a
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in word.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        RESERVED + (h % u64::from(self.vocab_size - RESERVED)) as u32
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for raw in text.split_whitespace() {
            let lower = raw.to_lowercase();
            let mut word = String::new();
            for ch in lower.chars() {
                if ch == '.' {
                    if !word.is_empty() {
                        out.push(self.word_id(&word));
                        word.clear();
                    }
                    out.push(PERIOD);
                } else if ch.is_alphanumeric() || ch == '_' || ch == '-' {
                    word.push(ch);
                }
            }
            if !word.is_empty() {
                out.push(self.word_id(&word));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_words_and_periods() {
        let t = ToyTokenizer::new(512);
        let ids = t.encode("A photo of a stoat.");
        assert_eq!(ids.len(), 6);
        assert_eq!(ids[5], PERIOD);
        assert_eq!(ids[0], ids[3]);
        assert!(ids.iter().all(|&i| i < 512));
        assert_eq!(t.encode("  "), Vec::<u32>::new());
    }
}
