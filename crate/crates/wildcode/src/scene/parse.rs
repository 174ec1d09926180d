//! Line-oriented recursive-descent parser for the scene DSL.
//!
//! One statement per line, no comments, trailing newline optional. The
//! parser accepts any plain decimal float; three-decimal canonicality is a
//! property of emission, checked by re-emitting (see `roundtrip` in the CLI).

use super::{
    EmbeddingSlot, ObjectRecord, RotationSlot, SceneAttributes, SceneProgram, MAX_OBJECTS,
    SETTER_NAMES,
};

/// Whether `add` statements carry the `pixels` field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PixelsMode {
    /// Canonical grammar: `pixels` required.
    #[default]
    Required,
    /// No-conditioning profile: `pixels` must be absent.
    Forbidden,
    /// Accept either form (used when decoding token streams).
    Optional,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ParseOptions {
    pub pixels: PixelsMode,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParseErrorKind {
    UnknownSetter(String),
    OutOfOrderSetter { expected: &'static str, found: String },
    MissingSetter(&'static str),
    MalformedNumber(String),
    TooManyObjects,
    PixelsUnexpected,
    PixelsMissing,
    Expected(&'static str),
    TrailingContent,
}

impl std::fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ParseErrorKind::UnknownSetter(s) => write!(f, "unknown setter `{s}`"),
            ParseErrorKind::OutOfOrderSetter { expected, found } => {
                write!(f, "setter out of order: expected `{expected}`, found `{found}`")
            }
            ParseErrorKind::MissingSetter(s) => write!(f, "missing setter `{s}`"),
            ParseErrorKind::MalformedNumber(s) => write!(f, "malformed number `{s}`"),
            ParseErrorKind::TooManyObjects => {
                write!(f, "more than {MAX_OBJECTS} objects")
            }
            ParseErrorKind::PixelsUnexpected => {
                write!(f, "`pixels` not allowed in this grammar profile")
            }
            ParseErrorKind::PixelsMissing => write!(f, "`pixels` field required"),
            ParseErrorKind::Expected(what) => write!(f, "expected {what}"),
            ParseErrorKind::TrailingContent => write!(f, "unexpected trailing content"),
        }
    }
}

/// A parse failure with a 1-based source position.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("line {line}, column {col}: {kind}")]
pub struct ParseError {
    pub line: usize,
    pub col: usize,
    pub kind: ParseErrorKind,
}

/// Parses canonical text (pixels required).
pub fn parse_program(text: &str) -> Result<SceneProgram, ParseError> {
    parse_program_with(text, ParseOptions::default())
}

/// Parses with an explicit grammar profile.
pub fn parse_program_with(text: &str, opts: ParseOptions) -> Result<SceneProgram, ParseError> {
    let mut lines: Vec<&str> = text.split('\n').collect();
    if lines.last() == Some(&"") {
        lines.pop(); // trailing newline is optional
    }

    let mut attrs = SceneAttributes::default();
    let mut numeric = [0.0f64; 10];

    for (i, name) in SETTER_NAMES.iter().enumerate() {
        let Some(raw) = lines.get(i) else {
            return Err(ParseError {
                line: lines.len() + 1,
                col: 1,
                kind: ParseErrorKind::MissingSetter(name),
            });
        };
        let mut cur = Cursor::new(raw, i + 1);
        let ident = cur.take_ident();
        if ident != *name {
            let kind = if SETTER_NAMES.contains(&ident.as_str()) {
                // A later setter here means the expected one was skipped
                // only if it never shows up further down.
                let appears_later = lines[i + 1..]
                    .iter()
                    .any(|l| l.starts_with(name) && l.as_bytes().get(name.len()) == Some(&b'('));
                if appears_later {
                    ParseErrorKind::OutOfOrderSetter {
                        expected: name,
                        found: ident,
                    }
                } else {
                    ParseErrorKind::MissingSetter(name)
                }
            } else if ident == "add" {
                ParseErrorKind::MissingSetter(name)
            } else {
                ParseErrorKind::UnknownSetter(ident)
            };
            return Err(cur.err_at_start(kind));
        }
        cur.eat("(")?;
        if i < 10 {
            numeric[i] = cur.parse_float()?;
        } else {
            attrs.ground = cur.parse_embedding_value()?;
        }
        cur.eat(")")?;
        cur.expect_end()?;
    }
    attrs = attrs.with_numeric_values(numeric);

    let mut objects = Vec::new();
    for (off, raw) in lines.iter().enumerate().skip(SETTER_NAMES.len()) {
        let line_no = off + 1;
        let mut cur = Cursor::new(raw, line_no);
        if objects.len() == MAX_OBJECTS {
            return Err(cur.err_at_start(ParseErrorKind::TooManyObjects));
        }
        let ident = cur.take_ident();
        if ident != "add" {
            return Err(cur.err_at_start(ParseErrorKind::Expected("`add` statement")));
        }
        cur.eat("(")?;

        let pixels = if cur.peek_str("pixels=") {
            if opts.pixels == PixelsMode::Forbidden {
                return Err(cur.err_here(ParseErrorKind::PixelsUnexpected));
            }
            cur.eat("pixels=")?;
            let px = cur.parse_uint()?;
            cur.eat(", ")?;
            Some(px)
        } else {
            if opts.pixels == PixelsMode::Required {
                return Err(cur.err_here(ParseErrorKind::PixelsMissing));
            }
            None
        };

        cur.eat("loc=(")?;
        let x = cur.parse_float()?;
        cur.eat(", ")?;
        let y = cur.parse_float()?;
        cur.eat(", ")?;
        let z = cur.parse_float()?;
        cur.eat("), height=")?;
        let height = cur.parse_float()?;
        cur.eat(", rotation=[ROT], appearance=")?;
        let appearance = cur.parse_embedding_value()?;
        cur.eat(")")?;
        cur.expect_end()?;

        objects.push(ObjectRecord {
            pixels,
            loc: [x, y, z],
            height,
            rotation: RotationSlot::Unresolved,
            appearance,
        });
    }

    Ok(SceneProgram {
        attributes: attrs,
        objects,
    })
}

struct Cursor<'a> {
    line: &'a str,
    line_no: usize,
    pos: usize,
    ident_start: usize,
}

impl<'a> Cursor<'a> {
    fn new(line: &'a str, line_no: usize) -> Self {
        Cursor {
            line,
            line_no,
            pos: 0,
            ident_start: 0,
        }
    }

    fn rest(&self) -> &'a str {
        &self.line[self.pos..]
    }

    fn err_here(&self, kind: ParseErrorKind) -> ParseError {
        ParseError {
            line: self.line_no,
            col: self.pos + 1,
            kind,
        }
    }

    fn err_at_start(&self, kind: ParseErrorKind) -> ParseError {
        ParseError {
            line: self.line_no,
            col: self.ident_start + 1,
            kind,
        }
    }

    fn take_ident(&mut self) -> String {
        self.ident_start = self.pos;
        let bytes = self.line.as_bytes();
        let mut end = self.pos;
        while end < bytes.len() && (bytes[end].is_ascii_alphanumeric() || bytes[end] == b'_') {
            end += 1;
        }
        let ident = self.line[self.pos..end].to_string();
        self.pos = end;
        ident
    }

    fn peek_str(&self, lit: &str) -> bool {
        self.rest().starts_with(lit)
    }

    fn eat(&mut self, lit: &'static str) -> Result<(), ParseError> {
        if self.peek_str(lit) {
            self.pos += lit.len();
            Ok(())
        } else {
            Err(self.err_here(ParseErrorKind::Expected(lit)))
        }
    }

    fn number_span(&self) -> usize {
        let bytes = self.rest().as_bytes();
        let mut end = 0;
        if bytes.first() == Some(&b'-') {
            end = 1;
        }
        while end < bytes.len() && (bytes[end].is_ascii_digit() || bytes[end] == b'.') {
            end += 1;
        }
        end
    }

    fn parse_float(&mut self) -> Result<f64, ParseError> {
        let span = self.number_span();
        let text = &self.rest()[..span];
        let ok = !text.is_empty()
            && text != "-"
            && text.matches('.').count() <= 1
            && text.bytes().any(|b| b.is_ascii_digit())
            && !text.ends_with('.')
            && !(text.contains('.') && !text[..text.find('.').unwrap()].bytes().any(|b| b.is_ascii_digit()));
        let value: f64 = if ok { text.parse().ok() } else { None }
            .ok_or_else(|| {
                let shown = if span == 0 {
                    let tail: String = self.rest().chars().take(8).collect();
                    tail
                } else {
                    text.to_string()
                };
                self.err_here(ParseErrorKind::MalformedNumber(shown))
            })?;
        self.pos += span;
        Ok(value)
    }

    fn parse_uint(&mut self) -> Result<u32, ParseError> {
        let span = self.number_span();
        let text = &self.rest()[..span];
        let value: u32 = text.parse().map_err(|_| {
            self.err_here(ParseErrorKind::MalformedNumber(text.to_string()))
        })?;
        self.pos += span;
        Ok(value)
    }

    /// A `[CLIP]` literal or an integer name.
    fn parse_embedding_value(&mut self) -> Result<EmbeddingSlot, ParseError> {
        if self.peek_str("[CLIP]") {
            self.pos += "[CLIP]".len();
            Ok(EmbeddingSlot::Unresolved)
        } else if self.rest().as_bytes().first().is_some_and(|b| b.is_ascii_digit()) {
            Ok(EmbeddingSlot::Named(self.parse_uint()?))
        } else {
            Err(self.err_here(ParseErrorKind::Expected("`[CLIP]` or integer name")))
        }
    }

    fn expect_end(&self) -> Result<(), ParseError> {
        if self.rest().is_empty() {
            Ok(())
        } else {
            Err(self.err_here(ParseErrorKind::TrailingContent))
        }
    }
}
