//! Tweet preprocessing, BPE and character segmentation, CoNLL I/O.

mod bpe;
mod conll;
mod preprocess;

pub use bpe::{BpeModel, Subword, END_OF_WORD};
pub use conll::{parse_conll, read_conll, write_conll, write_tagged, ConllData};
pub use preprocess::{is_special, Preprocessor, EMOJI, SPECIAL_TOKENS, URL, USR};

/// A sentence as read from disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sentence {
    /// Tokens exactly as they appeared in the input.
    pub raw_tokens: Vec<String>,
    /// Tokens after preprocessing.
    pub words: Vec<String>,
    pub labels: Option<Vec<String>>,
}

impl Sentence {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// A sentence with every word segmented at each subunit level.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedSentence {
    pub raw_tokens: Vec<String>,
    pub words: Vec<String>,
    /// `subwords[j][i]`: pieces of word `i` under language `j`'s BPE model.
    pub subwords: Vec<Vec<Vec<Subword>>>,
    /// `chars[i]`: characters of word `i`.
    pub chars: Vec<Vec<String>>,
    pub labels: Option<Vec<String>>,
}

impl TokenizedSentence {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Unicode codepoints of `word`; special tokens stay whole.
pub fn to_chars(word: &str) -> Vec<String> {
    if is_special(word) {
        return vec![word.to_string()];
    }
    word.chars().map(String::from).collect()
}

/// Applies every language's BPE model to every word, lowercased (special
/// tokens are kept as they are).
#[derive(Clone, Debug, Default)]
pub struct SubunitTokenizer {
    pub bpe: Vec<BpeModel>,
}

fn bpe_input(word: &str) -> String {
    if is_special(word) {
        word.to_string()
    } else {
        word.to_lowercase()
    }
}

impl SubunitTokenizer {
    pub fn new(bpe: Vec<BpeModel>) -> Self {
        SubunitTokenizer { bpe }
    }

    pub fn tokenize(&self, sentence: &Sentence) -> TokenizedSentence {
        TokenizedSentence {
            raw_tokens: sentence.raw_tokens.clone(),
            words: sentence.words.clone(),
            subwords: self
                .bpe
                .iter()
                .map(|m| sentence.words.iter().map(|w| m.apply(&bpe_input(w))).collect())
                .collect(),
            chars: sentence.words.iter().map(|w| to_chars(w)).collect(),
            labels: sentence.labels.clone(),
        }
    }

    pub fn tokenize_all(&self, sentences: &[Sentence]) -> Vec<TokenizedSentence> {
        sentences.iter().map(|s| self.tokenize(s)).collect()
    }
}
