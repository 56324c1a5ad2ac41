//! Tokenization shared by the encoders, features and explainer.

use crate::mask::MaskToken;

/// A token with its byte span in the source text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Token<'a> {
    pub text: &'a str,
    pub start: usize,
    pub end: usize,
    pub mask: Option<MaskToken>,
}

impl Token<'_> {
    pub fn is_mask(&self) -> bool {
        self.mask.is_some()
    }
}

/// Splits on non-alphanumeric characters; mask tokens are kept whole.
pub fn tokenize(text: &str) -> Vec<Token<'_>> {
    let mut out = Vec::new();
    let mut chars = text.char_indices().peekable();
    while let Some(&(i, c)) = chars.peek() {
        if c == '[' {
            if let Some(tok) = MaskToken::ALL.into_iter().find(|t| text[i..].starts_with(t.as_str())) {
                let end = i + tok.as_str().len();
                out.push(Token {
                    text: &text[i..end],
                    start: i,
                    end,
                    mask: Some(tok),
                });
                while chars.peek().is_some_and(|&(j, _)| j < end) {
                    chars.next();
                }
                continue;
            }
        }
        if c.is_alphanumeric() {
            let mut end = i + c.len_utf8();
            chars.next();
            while let Some(&(j, d)) = chars.peek() {
                if !d.is_alphanumeric() {
                    break;
                }
                end = j + d.len_utf8();
                chars.next();
            }
            out.push(Token {
                text: &text[i..end],
                start: i,
                end,
                mask: None,
            });
        } else {
            chars.next();
        }
    }
    out
}

/// Title and body joined the way every encoder sees a request.
pub fn request_text(title: &str, body: &str) -> String {
    format!("{title}\n{body}")
}

/// Lowercases and collapses runs of whitespace to one space.
pub fn normalize(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}
