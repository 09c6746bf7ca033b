use super::{AnnotationError, AnnotationErrorKind};

#[derive(Debug, Clone, PartialEq, Eq)]
pub(super) enum TokenKind {
    Ident(String),
    Int(i64),
    Arrow,
    Comma,
    Colon,
    LBracket,
    RBracket,
    LParen,
    RParen,
    Plus,
    Minus,
    Star,
    Eof,
}

impl TokenKind {
    pub(super) fn describe(&self) -> String {
        match self {
            TokenKind::Ident(s) => format!("`{s}`"),
            TokenKind::Int(v) => format!("`{v}`"),
            TokenKind::Arrow => "`=>`".into(),
            TokenKind::Comma => "`,`".into(),
            TokenKind::Colon => "`:`".into(),
            TokenKind::LBracket => "`[`".into(),
            TokenKind::RBracket => "`]`".into(),
            TokenKind::LParen => "`(`".into(),
            TokenKind::RParen => "`)`".into(),
            TokenKind::Plus => "`+`".into(),
            TokenKind::Minus => "`-`".into(),
            TokenKind::Star => "`*`".into(),
            TokenKind::Eof => "end of input".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub(super) struct Token {
    pub kind: TokenKind,
    pub line: usize,
    pub column: usize,
}

pub(super) fn tokenize(text: &str) -> Result<Vec<Token>, AnnotationError> {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = vec![];
    let (mut line, mut column) = (1, 1);
    let mut i = 0;

    while i < chars.len() {
        let c = chars[i];
        let (tok_line, tok_col) = (line, column);
        let single = |kind| Token {
            kind,
            line: tok_line,
            column: tok_col,
        };

        if c == '\n' {
            line += 1;
            column = 1;
            i += 1;
            continue;
        }
        if c.is_whitespace() {
            column += 1;
            i += 1;
            continue;
        }

        if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            let word: String = chars[start..i].iter().collect();
            column += i - start;
            tokens.push(single(TokenKind::Ident(word)));
            continue;
        }

        if c.is_ascii_digit() {
            let start = i;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            let digits: String = chars[start..i].iter().collect();
            let value = digits.parse::<i64>().map_err(|_| AnnotationError {
                kind: AnnotationErrorKind::Syntax,
                line: tok_line,
                column: tok_col,
                message: format!("integer literal `{digits}` is out of range"),
            })?;
            column += i - start;
            tokens.push(single(TokenKind::Int(value)));
            continue;
        }

        let kind = match c {
            '=' if chars.get(i + 1) == Some(&'>') => {
                i += 1;
                column += 1;
                TokenKind::Arrow
            }
            ',' => TokenKind::Comma,
            ':' => TokenKind::Colon,
            '[' => TokenKind::LBracket,
            ']' => TokenKind::RBracket,
            '(' => TokenKind::LParen,
            ')' => TokenKind::RParen,
            '+' => TokenKind::Plus,
            '-' => TokenKind::Minus,
            '*' => TokenKind::Star,
            other => {
                return Err(AnnotationError {
                    kind: AnnotationErrorKind::Syntax,
                    line: tok_line,
                    column: tok_col,
                    message: format!("unexpected character `{other}`"),
                })
            }
        };
        tokens.push(single(kind));
        i += 1;
        column += 1;
    }

    tokens.push(Token {
        kind: TokenKind::Eof,
        line,
        column,
    });
    Ok(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positions_track_lines() {
        let toks = tokenize("global i =>\n  read A[i]").unwrap();
        let read = toks.iter().find(|t| t.kind == TokenKind::Ident("read".into())).unwrap();
        assert_eq!((read.line, read.column), (2, 3));
        assert_eq!(toks[2].kind, TokenKind::Arrow);
    }

    #[test]
    fn rejects_stray_characters() {
        let err = tokenize("global i => read A[i / 2]").unwrap_err();
        assert_eq!((err.line, err.column), (1, 22));
    }
}
