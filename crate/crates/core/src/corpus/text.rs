/// Placeholder that replaces every maximal run of digits.
pub const NUM_TOKEN: &str = "<NUM>";

fn is_digit(c: char) -> bool {
    c.is_ascii_digit() || ('\u{ff10}'..='\u{ff19}').contains(&c)
}

/// Replaces each maximal digit run (ASCII or full-width) with [`NUM_TOKEN`].
pub fn delexicalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut in_run = false;
    for c in text.chars() {
        if is_digit(c) {
            if !in_run {
                out.push_str(NUM_TOKEN);
                in_run = true;
            }
        } else {
            in_run = false;
            out.push(c);
        }
    }
    out
}

pub fn delexicalize_tokens(tokens: &[String]) -> Vec<String> {
    tokens.iter().map(|t| delexicalize(t)).collect()
}

pub trait Tokenizer {
    fn tokenize(&self, text: &str) -> Vec<String>;
}

/// Splits on Unicode whitespace.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn tokenize(&self, text: &str) -> Vec<String> {
        text.split_whitespace().map(String::from).collect()
    }
}
