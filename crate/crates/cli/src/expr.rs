//! Text grammar for `--where` predicates.
//!
//! ```text
//! expr    := or
//! or      := and ("or" and)*
//! and     := unary ("and" unary)*
//! unary   := "not" unary | primary
//! primary := "(" expr ")"
//!          | "exists" "(" attr ")"
//!          | "prefix" "(" attr "," value ")"
//!          | attr "=" value
//!          | attr "in" "(" value ("," value)* ")"
//! ```
//!
//! Values are double-quoted strings or bare words; keywords are
//! case-insensitive.

use anyhow::{anyhow, bail, Result};
use wsirepro_core::catalog::QueryExpr;

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Word(String),
    Str(String),
    LParen,
    RParen,
    Comma,
    Eq,
}

fn tokenize(input: &str) -> Result<Vec<Token>> {
    let mut tokens = Vec::new();
    let mut chars = input.chars().peekable();
    while let Some(&c) = chars.peek() {
        match c {
            ' ' | '\t' | '\n' | '\r' => {
                chars.next();
            }
            '(' => {
                chars.next();
                tokens.push(Token::LParen);
            }
            ')' => {
                chars.next();
                tokens.push(Token::RParen);
            }
            ',' => {
                chars.next();
                tokens.push(Token::Comma);
            }
            '=' => {
                chars.next();
                tokens.push(Token::Eq);
            }
            '"' => {
                chars.next();
                let mut value = String::new();
                loop {
                    match chars.next() {
                        Some('"') => break,
                        Some('\\') => match chars.next() {
                            Some(escaped) => value.push(escaped),
                            None => bail!("unterminated string in --where"),
                        },
                        Some(other) => value.push(other),
                        None => bail!("unterminated string in --where"),
                    }
                }
                tokens.push(Token::Str(value));
            }
            _ => {
                let mut word = String::new();
                while let Some(&c) = chars.peek() {
                    if c.is_alphanumeric() || "_-./:".contains(c) {
                        word.push(c);
                        chars.next();
                    } else {
                        break;
                    }
                }
                if word.is_empty() {
                    bail!("unexpected character {c:?} in --where");
                }
                tokens.push(Token::Word(word));
            }
        }
    }
    Ok(tokens)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn next(&mut self) -> Option<Token> {
        let token = self.tokens.get(self.pos).cloned();
        if token.is_some() {
            self.pos += 1;
        }
        token
    }

    fn keyword(&self, word: &str) -> bool {
        matches!(self.peek(), Some(Token::Word(w)) if w.eq_ignore_ascii_case(word))
    }

    fn expect(&mut self, token: Token, what: &str) -> Result<()> {
        match self.next() {
            Some(t) if t == token => Ok(()),
            other => bail!("expected {what}, found {other:?}"),
        }
    }

    fn value(&mut self) -> Result<String> {
        match self.next() {
            Some(Token::Str(s)) | Some(Token::Word(s)) => Ok(s),
            other => bail!("expected a value, found {other:?}"),
        }
    }

    fn expr(&mut self) -> Result<QueryExpr> {
        let mut args = vec![self.and()?];
        while self.keyword("or") {
            self.next();
            args.push(self.and()?);
        }
        Ok(if args.len() == 1 {
            args.pop().unwrap()
        } else {
            QueryExpr::Or { args }
        })
    }

    fn and(&mut self) -> Result<QueryExpr> {
        let mut args = vec![self.unary()?];
        while self.keyword("and") {
            self.next();
            args.push(self.unary()?);
        }
        Ok(if args.len() == 1 {
            args.pop().unwrap()
        } else {
            QueryExpr::And { args }
        })
    }

    fn unary(&mut self) -> Result<QueryExpr> {
        if self.keyword("not") {
            self.next();
            return Ok(QueryExpr::Not {
                arg: Box::new(self.unary()?),
            });
        }
        self.primary()
    }

    fn primary(&mut self) -> Result<QueryExpr> {
        if matches!(self.peek(), Some(Token::LParen)) {
            self.next();
            let inner = self.expr()?;
            self.expect(Token::RParen, "')'")?;
            return Ok(inner);
        }
        if self.keyword("exists") {
            self.next();
            self.expect(Token::LParen, "'(' after exists")?;
            let attr = self.value()?;
            self.expect(Token::RParen, "')' after exists attr")?;
            return Ok(QueryExpr::Exists { attr });
        }
        if self.keyword("prefix") {
            self.next();
            self.expect(Token::LParen, "'(' after prefix")?;
            let attr = self.value()?;
            self.expect(Token::Comma, "',' in prefix")?;
            let value = self.value()?;
            self.expect(Token::RParen, "')' after prefix")?;
            return Ok(QueryExpr::Prefix { attr, value });
        }

        let attr = match self.next() {
            Some(Token::Word(w)) => w,
            other => bail!("expected an attribute name, found {other:?}"),
        };
        match self.next() {
            Some(Token::Eq) => Ok(QueryExpr::Eq {
                attr,
                value: self.value()?,
            }),
            Some(Token::Word(w)) if w.eq_ignore_ascii_case("in") => {
                self.expect(Token::LParen, "'(' after in")?;
                let mut values = vec![self.value()?];
                while matches!(self.peek(), Some(Token::Comma)) {
                    self.next();
                    values.push(self.value()?);
                }
                self.expect(Token::RParen, "')' after in list")?;
                Ok(QueryExpr::In { attr, values })
            }
            other => bail!("expected '=' or 'in' after {attr:?}, found {other:?}"),
        }
    }
}

pub fn parse_where(input: &str) -> Result<QueryExpr> {
    let tokens = tokenize(input)?;
    if tokens.is_empty() {
        bail!("empty --where expression");
    }
    let mut parser = Parser { tokens, pos: 0 };
    let expr = parser.expr()?;
    if parser.pos != parser.tokens.len() {
        return Err(anyhow!(
            "trailing tokens in --where after position {}",
            parser.pos
        ));
    }
    Ok(expr)
}
