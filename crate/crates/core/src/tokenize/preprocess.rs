use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

pub const USR: &str = "<USR>";
pub const EMOJI: &str = "<EMOJI>";
pub const URL: &str = "<URL>";
pub const SPECIAL_TOKENS: [&str; 3] = [USR, EMOJI, URL];

pub fn is_special(token: &str) -> bool {
    SPECIAL_TOKENS.contains(&token)
}

/// Joiners and modifiers that may appear inside an emoji sequence but do
/// not make a token an emoji on their own.
const EMOJI_COMPONENTS: [RangeInclusive<u32>; 4] =
    [0x200D..=0x200D, 0x20E3..=0x20E3, 0xFE0E..=0xFE0F, 0xE0020..=0xE007F];

/// Token normalization for tweets: mentions and hashtags become `<USR>`,
/// links `<URL>`, and all-emoji tokens `<EMOJI>`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Preprocessor {
    /// Inclusive codepoint ranges counted as emoji.
    pub emoji_ranges: Vec<(u32, u32)>,
}

impl Default for Preprocessor {
    fn default() -> Self {
        Preprocessor {
            emoji_ranges: vec![
                (0x231A, 0x231B),
                (0x23E9, 0x23FA),
                (0x2600, 0x27BF),
                (0x2B50, 0x2B55),
                (0x1F000, 0x1FAFF),
            ],
        }
    }
}

impl Preprocessor {
    pub fn preprocess_token(&self, token: &str) -> String {
        if token.starts_with('@') || token.starts_with('#') {
            return USR.to_string();
        }
        if is_url(token) {
            return URL.to_string();
        }
        if self.is_emoji(token) {
            return EMOJI.to_string();
        }
        token.to_string()
    }

    fn is_emoji(&self, token: &str) -> bool {
        let mut any = false;
        for c in token.chars() {
            let cp = c as u32;
            if EMOJI_COMPONENTS.iter().any(|r| r.contains(&cp)) {
                continue;
            }
            if !self.emoji_ranges.iter().any(|&(lo, hi)| (lo..=hi).contains(&cp)) {
                return false;
            }
            any = true;
        }
        any
    }
}

fn is_url(token: &str) -> bool {
    let lower = token.get(..8).unwrap_or(token).to_ascii_lowercase();
    lower.starts_with("http://") || lower.starts_with("https://") || lower.starts_with("www.")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replacement_rules() {
        let p = Preprocessor::default();
        assert_eq!(p.preprocess_token("@john"), USR);
        assert_eq!(p.preprocess_token("#walkingdead"), USR);
        assert_eq!(p.preprocess_token("https://t.co/x"), URL);
        assert_eq!(p.preprocess_token("HTTP://x.org"), URL);
        assert_eq!(p.preprocess_token("www.example.com"), URL);
        assert_eq!(p.preprocess_token("hola"), "hola");
        assert_eq!(p.preprocess_token("😂😂"), EMOJI);
        assert_eq!(p.preprocess_token("👍🏽"), EMOJI);
        assert_eq!(p.preprocess_token("❤️"), EMOJI);
        assert_eq!(p.preprocess_token("jaja😂"), "jaja😂");
        assert_eq!(p.preprocess_token("\u{200D}"), "\u{200D}");
    }

    #[test]
    fn configurable_ranges() {
        let p = Preprocessor {
            emoji_ranges: vec![('x' as u32, 'x' as u32)],
        };
        assert_eq!(p.preprocess_token("xxx"), EMOJI);
        assert_eq!(p.preprocess_token("😂"), "😂");
    }

    #[test]
    fn idempotent_on_specials() {
        let p = Preprocessor::default();
        for t in ["@a", "#b", "http://c", "😂", "plain", "<USR>", "<URL>", "<EMOJI>"] {
            let once = p.preprocess_token(t);
            assert_eq!(p.preprocess_token(&once), once);
        }
    }
}
