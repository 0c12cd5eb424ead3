//! Text syntax for processes and the pretty-printer.
//!
//! Grammar:
//! ```text
//! process  := par
//! par      := restrict { "|" restrict }
//! restrict := "new" ident+ "in" "{" process "}" | atom
//! atom     := "0" | ident "->" ident | ident "=>" "[" [identlist] "]"
//!           | "?" ident | "+" ident | "*" ident | "(" process ")"
//! identlist := ident { "," ident }
//! ```
//! `#` starts a comment running to the end of the line.

use std::fmt;

use crate::ast::{ChannelId, Process};

/// Byte offsets into the input, for error reporting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SourceSpan {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, thiserror::Error)]
#[error("syntax error at {}..{}: expected {}, found {found}", span.start, span.end, expected.join(" or "))]
pub struct ParseError {
    pub span: SourceSpan,
    pub expected: Vec<String>,
    pub found: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Tok {
    Ident(String),
    Zero,
    Pipe,
    Arrow,
    DoubleArrow,
    LBracket,
    RBracket,
    LBrace,
    RBrace,
    LParen,
    RParen,
    Comma,
    Question,
    Plus,
    Star,
    New,
    In,
    Eof,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Tok::Ident(name) => return write!(f, "identifier `{name}`"),
            Tok::Zero => "`0`",
            Tok::Pipe => "`|`",
            Tok::Arrow => "`->`",
            Tok::DoubleArrow => "`=>`",
            Tok::LBracket => "`[`",
            Tok::RBracket => "`]`",
            Tok::LBrace => "`{`",
            Tok::RBrace => "`}`",
            Tok::LParen => "`(`",
            Tok::RParen => "`)`",
            Tok::Comma => "`,`",
            Tok::Question => "`?`",
            Tok::Plus => "`+`",
            Tok::Star => "`*`",
            Tok::New => "`new`",
            Tok::In => "`in`",
            Tok::Eof => "end of input",
        };
        f.write_str(s)
    }
}

struct Lexer {
    toks: Vec<(Tok, SourceSpan)>,
    pos: usize,
}

fn is_ident_start(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '_'
}

fn is_ident_continue(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_'
}

fn lex(text: &str) -> Result<Vec<(Tok, SourceSpan)>, ParseError> {
    let bytes: Vec<char> = text.chars().collect();
    let mut toks = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        match c {
            ' ' | '\t' | '\r' | '\n' => {
                i += 1;
            }
            '#' => {
                while i < bytes.len() && bytes[i] != '\n' {
                    i += 1;
                }
            }
            '|' => {
                toks.push((Tok::Pipe, SourceSpan { start, end: i + 1 }));
                i += 1;
            }
            '[' => {
                toks.push((Tok::LBracket, SourceSpan { start, end: i + 1 }));
                i += 1;
            }
            ']' => {
                toks.push((Tok::RBracket, SourceSpan { start, end: i + 1 }));
                i += 1;
            }
            '{' => {
                toks.push((Tok::LBrace, SourceSpan { start, end: i + 1 }));
                i += 1;
            }
            '}' => {
                toks.push((Tok::RBrace, SourceSpan { start, end: i + 1 }));
                i += 1;
            }
            '(' => {
                toks.push((Tok::LParen, SourceSpan { start, end: i + 1 }));
                i += 1;
            }
            ')' => {
                toks.push((Tok::RParen, SourceSpan { start, end: i + 1 }));
                i += 1;
            }
            ',' => {
                toks.push((Tok::Comma, SourceSpan { start, end: i + 1 }));
                i += 1;
            }
            '?' => {
                toks.push((Tok::Question, SourceSpan { start, end: i + 1 }));
                i += 1;
            }
            '*' => {
                toks.push((Tok::Star, SourceSpan { start, end: i + 1 }));
                i += 1;
            }
            '+' => {
                toks.push((Tok::Plus, SourceSpan { start, end: i + 1 }));
                i += 1;
            }
            '-' => {
                if bytes.get(i + 1) == Some(&'>') {
                    toks.push((Tok::Arrow, SourceSpan { start, end: i + 2 }));
                    i += 2;
                } else {
                    return Err(ParseError {
                        span: SourceSpan { start, end: i + 1 },
                        expected: vec!["`->`".into()],
                        found: "`-`".into(),
                    });
                }
            }
            '=' => {
                if bytes.get(i + 1) == Some(&'>') {
                    toks.push((Tok::DoubleArrow, SourceSpan { start, end: i + 2 }));
                    i += 2;
                } else {
                    return Err(ParseError {
                        span: SourceSpan { start, end: i + 1 },
                        expected: vec!["`=>`".into()],
                        found: "`=`".into(),
                    });
                }
            }
            '0' => {
                toks.push((Tok::Zero, SourceSpan { start, end: i + 1 }));
                i += 1;
            }
            c if is_ident_start(c) => {
                let mut j = i + 1;
                while j < bytes.len() && is_ident_continue(bytes[j]) {
                    j += 1;
                }
                let name: String = bytes[i..j].iter().collect();
                let tok = match name.as_str() {
                    "new" => Tok::New,
                    "in" => Tok::In,
                    _ => Tok::Ident(name),
                };
                toks.push((tok, SourceSpan { start, end: j }));
                i = j;
            }
            other => {
                return Err(ParseError {
                    span: SourceSpan { start, end: i + 1 },
                    expected: vec!["a process".into()],
                    found: format!("`{other}`"),
                });
            }
        }
    }
    toks.push((Tok::Eof, SourceSpan { start: i, end: i }));
    Ok(toks)
}

impl Lexer {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].0
    }

    fn span(&self) -> SourceSpan {
        self.toks[self.pos].1
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.pos].0.clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, want: Tok) -> Result<(), ParseError> {
        if *self.peek() == want {
            self.bump();
            Ok(())
        } else {
            Err(self.err(&[&format!("{want}")]))
        }
    }

    fn ident(&mut self) -> Result<ChannelId, ParseError> {
        match self.peek().clone() {
            Tok::Ident(name) => {
                self.bump();
                Ok(ChannelId::new(name))
            }
            _ => Err(self.err(&["a channel name"])),
        }
    }

    fn err(&self, expected: &[&str]) -> ParseError {
        ParseError {
            span: self.span(),
            expected: expected.iter().map(|s| s.to_string()).collect(),
            found: format!("{}", self.peek()),
        }
    }
}

pub fn parse_process(text: &str) -> Result<Process, ParseError> {
    let mut lx = Lexer { toks: lex(text)?, pos: 0 };
    let p = parse_par(&mut lx)?;
    if *lx.peek() != Tok::Eof {
        return Err(lx.err(&["`|`", "end of input"]));
    }
    Ok(p)
}

fn parse_par(lx: &mut Lexer) -> Result<Process, ParseError> {
    let first = parse_restrict(lx)?;
    if *lx.peek() == Tok::Pipe {
        lx.bump();
        let rest = parse_par(lx)?;
        Ok(Process::par(first, rest))
    } else {
        Ok(first)
    }
}

fn parse_restrict(lx: &mut Lexer) -> Result<Process, ParseError> {
    if *lx.peek() == Tok::New {
        lx.bump();
        let mut binders = vec![lx.ident()?];
        while matches!(lx.peek(), Tok::Ident(_)) {
            binders.push(lx.ident()?);
        }
        lx.expect(Tok::In)?;
        lx.expect(Tok::LBrace)?;
        let body = parse_par(lx)?;
        lx.expect(Tok::RBrace)?;
        Ok(binders
            .into_iter()
            .rev()
            .fold(body, |acc, b| Process::restrict(b, acc)))
    } else {
        parse_atom(lx)
    }
}

fn parse_atom(lx: &mut Lexer) -> Result<Process, ParseError> {
    match lx.peek().clone() {
        Tok::Zero => {
            lx.bump();
            Ok(Process::Stop)
        }
        Tok::Question => {
            lx.bump();
            Ok(Process::Loser(lx.ident()?))
        }
        Tok::Plus => {
            lx.bump();
            Ok(Process::Duplicator(lx.ident()?))
        }
        Tok::Star => {
            lx.bump();
            Ok(Process::Duploser(lx.ident()?))
        }
        Tok::LParen => {
            lx.bump();
            let p = parse_par(lx)?;
            lx.expect(Tok::RParen)?;
            Ok(p)
        }
        Tok::Ident(_) => {
            let a = lx.ident()?;
            match lx.peek() {
                Tok::Arrow => {
                    lx.bump();
                    Ok(Process::Bridge(a, lx.ident()?))
                }
                Tok::DoubleArrow => {
                    lx.bump();
                    lx.expect(Tok::LBracket)?;
                    let mut targets = Vec::new();
                    if matches!(lx.peek(), Tok::Ident(_)) {
                        targets.push(lx.ident()?);
                        while *lx.peek() == Tok::Comma {
                            lx.bump();
                            targets.push(lx.ident()?);
                        }
                    }
                    lx.expect(Tok::RBracket)?;
                    Ok(Process::Distribute(a, targets))
                }
                _ => Err(lx.err(&["`->`", "`=>`"])),
            }
        }
        _ => Err(lx.err(&["`0`", "`?`", "`+`", "`*`", "`new`", "`(`", "a channel name"])),
    }
}

/// Prints a process so that `parse_process(pretty(p)) == p`. Parallel
/// composition associates to the right in the parser, so a `Par` appearing
/// as a left operand is parenthesized; consecutive binders are merged into
/// one `new a b in { ... }`.
pub fn pretty(p: &Process) -> String {
    let mut out = String::new();
    write_par(p, &mut out);
    out
}

fn write_par(p: &Process, out: &mut String) {
    match p {
        Process::Par(l, r) => {
            write_operand(l, out);
            out.push_str(" | ");
            write_par(r, out);
        }
        _ => write_operand(p, out),
    }
}

fn write_operand(p: &Process, out: &mut String) {
    match p {
        Process::Par(..) => {
            out.push('(');
            write_par(p, out);
            out.push(')');
        }
        Process::Restrict(..) => {
            out.push_str("new");
            let mut cur = p;
            while let Process::Restrict(a, body) = cur {
                out.push(' ');
                out.push_str(a.as_str());
                cur = body;
            }
            out.push_str(" in { ");
            write_par(cur, out);
            out.push_str(" }");
        }
        Process::Stop => out.push('0'),
        Process::Bridge(a, b) => {
            out.push_str(a.as_str());
            out.push_str(" -> ");
            out.push_str(b.as_str());
        }
        Process::Distribute(a, ts) => {
            out.push_str(a.as_str());
            out.push_str(" => [");
            for (i, t) in ts.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                out.push_str(t.as_str());
            }
            out.push(']');
        }
        Process::Loser(a) => {
            out.push('?');
            out.push_str(a.as_str());
        }
        Process::Duplicator(a) => {
            out.push('+');
            out.push_str(a.as_str());
        }
        Process::Duploser(a) => {
            out.push('*');
            out.push_str(a.as_str());
        }
    }
}

impl fmt::Display for Process {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&pretty(self))
    }
}

/// The example networks and the intermediate stages of the broadcast
/// transformation proof, shipped as DSL sources.
pub const BUILTIN_NAMES: &[&str] = &[
    "D", "M", "M_star", "M_i", "M_o", "fig5", "fig6", "fig7", "fig8", "lossyD", "lossyM",
];

#[derive(Debug, thiserror::Error)]
#[error("unknown builtin `{0}` (expected one of: D, M, M_star, M_i, M_o, fig5..fig8, lossyD, lossyM)")]
pub struct UnknownBuiltin(pub String);

pub fn builtin(name: &str) -> Result<Process, UnknownBuiltin> {
    let src = builtin_source(name).ok_or_else(|| UnknownBuiltin(name.to_string()))?;
    Ok(parse_process(src).expect("shipped builtin sources parse"))
}

pub fn builtin_source(name: &str) -> Option<&'static str> {
    Some(match name {
        "D" => include_str!("../assets/d.cn"),
        "M" => include_str!("../assets/m.cn"),
        "M_star" => include_str!("../assets/m_star.cn"),
        "M_i" => include_str!("../assets/m_i.cn"),
        "M_o" => include_str!("../assets/m_o.cn"),
        "fig5" => include_str!("../assets/fig5.cn"),
        "fig6" => include_str!("../assets/fig6.cn"),
        "fig7" => include_str!("../assets/fig7.cn"),
        "fig8" => include_str!("../assets/fig8.cn"),
        "lossyD" => include_str!("../assets/lossy_d.cn"),
        "lossyM" => include_str!("../assets/lossy_m.cn"),
        _ => return None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ast::{desugar, free_channels, ChannelId};

    fn c(name: &str) -> ChannelId {
        ChannelId::new(name)
    }

    #[test]
    fn parses_restriction_and_sugar() {
        let p = parse_process("new m in { *m | s0 -> m | m -> r0 }").unwrap();
        assert_eq!(
            p,
            Process::restrict(
                c("m"),
                Process::par(
                    Process::Duploser(c("m")),
                    Process::par(Process::Bridge(c("s0"), c("m")), Process::Bridge(c("m"), c("r0"))),
                ),
            )
        );
    }

    #[test]
    fn empty_distributor_is_core_not_sugar() {
        let p = parse_process("a => []").unwrap();
        assert_eq!(p, Process::Distribute(c("a"), vec![]));
        assert_eq!(desugar(&p), p);
    }

    #[test]
    fn error_carries_offset() {
        let err = parse_process("a -> ").unwrap_err();
        assert_eq!(err.span.start, 5);
        assert!(!err.expected.is_empty());
    }

    #[test]
    fn roundtrip_on_nesting() {
        for src in [
            "0",
            "(a -> b | b => []) | ?c",
            "new a b in { a -> b } | +x",
            "a => [b, a, b]",
        ] {
            let p = parse_process(src).unwrap();
            assert_eq!(parse_process(&pretty(&p)).unwrap(), p);
        }
        // Left-nested Par needs parens.
        let p = Process::par(
            Process::par(Process::Stop, Process::Loser(c("a"))),
            Process::Stop,
        );
        assert_eq!(parse_process(&pretty(&p)).unwrap(), p);
        assert_eq!(pretty(&Process::Stop), "0");
    }

    #[test]
    fn builtins_parse_with_expected_interfaces() {
        for name in BUILTIN_NAMES {
            builtin(name).unwrap();
        }
        let io: std::collections::BTreeSet<_> = ["s0", "s1", "s2", "s3", "r0", "r1", "r2", "r3"]
            .into_iter()
            .map(c)
            .collect();
        assert_eq!(free_channels(&builtin("M").unwrap()), io);
        assert_eq!(free_channels(&builtin("D").unwrap()), io);
    }
}
