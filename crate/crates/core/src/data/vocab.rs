use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;

const RESERVED: [&str; 3] = ["<pad>", "<sos>", "<eos>"];

/// Character vocabulary. Token ids: pad 0, sos 1, eos 2, then the characters.
///
/// Output distributions range over eos and the characters only; output index
/// `o` corresponds to token `o + 2`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl Vocab {
    pub fn new(chars: impl IntoIterator<Item = char>) -> Result<Self> {
        let chars: Vec<char> = chars.into_iter().collect();
        let mut index = HashMap::new();
        for (i, &c) in chars.iter().enumerate() {
            if index.insert(c, i + 3).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary character {c:?}")));
            }
        }
        if chars.is_empty() {
            return Err(Error::Config("empty vocabulary".into()));
        }
        Ok(Vocab { chars, index })
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    /// Number of token ids including the reserved ones.
    pub fn size(&self) -> usize {
        self.chars.len() + 3
    }

    /// Size of the output distribution (characters plus eos).
    pub fn num_outputs(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn output_index(token: usize) -> usize {
        token - EOS
    }

    pub fn output_token(index: usize) -> usize {
        index + EOS
    }

    pub fn char_of(&self, token: usize) -> Option<char> {
        token.checked_sub(3).and_then(|i| self.chars.get(i)).copied()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.index
                    .get(&c)
                    .copied()
                    .ok_or_else(|| Error::Input(format!("character {c:?} is not in the vocabulary")))
            })
            .collect()
    }

    /// Encoded text followed by eos.
    pub fn encode_with_eos(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = self.encode(text)?;
        ids.push(EOS);
        Ok(ids)
    }

    /// Text up to the first eos; reserved tokens are skipped.
    pub fn decode(&self, tokens: &[usize]) -> String {
        tokens
            .iter()
            .take_while(|&&t| t != EOS)
            .filter_map(|&t| self.char_of(t))
            .collect()
    }

    pub fn check_token(&self, token: usize) -> Result<()> {
        if token < self.size() {
            Ok(())
        } else {
            Err(Error::Input(format!(
                "token id {token} out of range for vocabulary of {}",
                self.size()
            )))
        }
    }

    /// One entry per line, reserved tokens first.
    pub fn to_file_string(&self) -> String {
        let mut s = RESERVED.join("\n");
        for c in &self.chars {
            s.push('\n');
            s.push(*c);
        }
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.strip_suffix('\n').unwrap_or(text).split('\n').collect();
        for (i, want) in RESERVED.iter().enumerate() {
            if lines.get(i) != Some(want) {
                return Err(Error::Format {
                    line: i + 1,
                    msg: format!("expected reserved token {want}"),
                });
            }
        }
        let mut chars = Vec::new();
        for (i, line) in lines.iter().enumerate().skip(3) {
            let mut it = line.chars();
            match (it.next(), it.next()) {
                (Some(c), None) => chars.push(c),
                _ => {
                    return Err(Error::Format {
                        line: i + 1,
                        msg: format!("expected a single character, got {line:?}"),
                    })
                }
            }
        }
        Vocab::new(chars)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocab::parse(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_and_outputs() {
        let v = Vocab::new("ab ".chars()).unwrap();
        assert_eq!(v.size(), 6);
        assert_eq!(v.num_outputs(), 4);
        assert_eq!(v.encode_with_eos("ba").unwrap(), vec![4, 3, EOS]);
        assert_eq!(Vocab::output_index(EOS), 0);
        assert_eq!(Vocab::output_token(1), 3);
        assert_eq!(v.decode(&[SOS, 3, 5, 4, EOS, 3]), "a b");
        assert!(matches!(v.encode("abc"), Err(Error::Input(_))));
    }

    #[test]
    fn file_round_trip_keeps_space() {
        let v = Vocab::new(['a', ' ', 'c']).unwrap();
        let back = Vocab::parse(&v.to_file_string()).unwrap();
        assert_eq!(v, back);
        assert!(back.chars().contains(&' '));
    }

    #[test]
    fn duplicates_and_bad_files() {
        assert!(matches!(Vocab::new("aa".chars()), Err(Error::Config(_))));
        assert!(matches!(Vocab::parse("a\nb\n"), Err(Error::Format { line: 1, .. })));
        assert!(matches!(
            Vocab::parse("<pad>\n<sos>\n<eos>\nab\n"),
            Err(Error::Format { line: 4, .. })
        ));
    }
}
