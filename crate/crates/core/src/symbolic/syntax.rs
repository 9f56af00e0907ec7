//! Textual atom syntax: `identifier ( identifier , identifier )`.
//!
//! The [`Cursor`] here is shared by the clause and pile-notation parsers.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("at byte {offset}: {message}")]
pub struct SyntaxError {
    pub offset: usize,
    pub message: String,
}

/// An atom as written, before names are resolved against a vocabulary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AtomText {
    pub predicate: String,
    pub args: [String; 2],
}

impl std::fmt::Display for AtomText {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}({},{})", self.predicate, self.args[0], self.args[1])
    }
}

pub fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

pub fn validate_identifier(s: &str) -> Result<(), SyntaxError> {
    if is_identifier(s) {
        Ok(())
    } else {
        Err(SyntaxError {
            offset: 0,
            message: format!("`{s}` is not an identifier"),
        })
    }
}

pub struct Cursor<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(src: &'a str) -> Self {
        Self { src, pos: 0 }
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn rest(&self) -> &'a str {
        &self.src[self.pos..]
    }

    pub fn error(&self, message: impl Into<String>) -> SyntaxError {
        SyntaxError {
            offset: self.pos,
            message: message.into(),
        }
    }

    pub fn skip_ws(&mut self) {
        let rest = self.rest();
        self.pos += rest.len() - rest.trim_start().len();
    }

    pub fn at_end(&mut self) -> bool {
        self.skip_ws();
        self.pos == self.src.len()
    }

    /// Consumes `token` (after whitespace) if it is next.
    pub fn eat(&mut self, token: &str) -> bool {
        self.skip_ws();
        if self.rest().starts_with(token) {
            self.pos += token.len();
            true
        } else {
            false
        }
    }

    pub fn expect(&mut self, token: &str) -> Result<(), SyntaxError> {
        if self.eat(token) {
            Ok(())
        } else {
            Err(self.error(format!("expected `{token}`")))
        }
    }

    pub fn identifier(&mut self) -> Result<&'a str, SyntaxError> {
        self.skip_ws();
        let rest = self.rest();
        let len = rest
            .char_indices()
            .find(|&(i, c)| {
                !(c.is_ascii_alphanumeric() || c == '_') || (i == 0 && c.is_ascii_digit())
            })
            .map_or(rest.len(), |(i, _)| i);
        if len == 0 {
            return Err(self.error("expected an identifier"));
        }
        self.pos += len;
        Ok(&rest[..len])
    }

    pub fn atom(&mut self) -> Result<AtomText, SyntaxError> {
        let predicate = self.identifier()?.to_string();
        self.expect("(")?;
        let a = self.identifier()?.to_string();
        self.expect(",")?;
        let b = self.identifier()?.to_string();
        self.expect(")")?;
        Ok(AtomText {
            predicate,
            args: [a, b],
        })
    }

    pub fn finish(&mut self) -> Result<(), SyntaxError> {
        if self.at_end() {
            Ok(())
        } else {
            Err(self.error("unexpected trailing input"))
        }
    }
}

pub fn parse_atom(text: &str) -> Result<AtomText, SyntaxError> {
    let mut c = Cursor::new(text);
    let atom = c.atom()?;
    c.finish()?;
    Ok(atom)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_with_whitespace() {
        let a = parse_atom("  GoalOn ( a ,b )").unwrap();
        assert_eq!(a.predicate, "GoalOn");
        assert_eq!(a.args, ["a".to_string(), "b".to_string()]);
        assert_eq!(a.to_string(), "GoalOn(a,b)");
    }

    #[test]
    fn rejects_malformed() {
        for bad in ["", "On", "On(a)", "On(a,b", "On(a,b))", "1On(a,b)", "On(a,,b)", "On(a,b) x"] {
            assert!(parse_atom(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn identifiers() {
        assert!(is_identifier("lower_left_ladder"));
        assert!(is_identifier("Z2"));
        assert!(!is_identifier("2Z"));
        assert!(!is_identifier("a-b"));
        assert!(!is_identifier(""));
    }
}
