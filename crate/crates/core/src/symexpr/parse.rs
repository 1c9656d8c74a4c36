use super::{BinOp, SymError, SymExpr};

/// Parse the textual expression grammar.
///
/// Precedence from tightest: unary minus, `* / %`, `+ -`, comparisons,
/// `!`/`not`, `&`/`and`, `|`/`or`. A component may be a slice `lo:hi`, and
/// comma-separated components form a tuple.
pub fn parse(text: &str) -> Result<SymExpr, SymError> {
    let mut p = Parser { src: text.as_bytes(), pos: 0 };
    let e = p.tuple()?;
    p.skip_ws();
    if p.pos != p.src.len() {
        return Err(p.err("unexpected trailing input"));
    }
    Ok(e)
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn err(&self, msg: &str) -> SymError {
        SymError::Syntax { offset: self.pos, msg: msg.to_string() }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn eat(&mut self, tok: &str) -> bool {
        self.skip_ws();
        if self.src[self.pos..].starts_with(tok.as_bytes()) {
            self.pos += tok.len();
            true
        } else {
            false
        }
    }

    fn eat_keyword(&mut self, kw: &str) -> bool {
        self.skip_ws();
        let rest = &self.src[self.pos..];
        if rest.starts_with(kw.as_bytes()) {
            let next = rest.get(kw.len()).copied();
            if !next.is_some_and(|c| c.is_ascii_alphanumeric() || c == b'_') {
                self.pos += kw.len();
                return true;
            }
        }
        false
    }

    fn tuple(&mut self) -> Result<SymExpr, SymError> {
        let first = self.component()?;
        if self.peek() != Some(b',') {
            return Ok(first);
        }
        let mut items = vec![first];
        while self.eat(",") {
            items.push(self.component()?);
        }
        Ok(SymExpr::tuple(items))
    }

    fn component(&mut self) -> Result<SymExpr, SymError> {
        let lo = self.or()?;
        if self.peek() == Some(b':') {
            self.pos += 1;
            let hi = self.or()?;
            return Ok(SymExpr::slice(lo, hi));
        }
        Ok(lo)
    }

    fn or(&mut self) -> Result<SymExpr, SymError> {
        let mut lhs = self.and()?;
        loop {
            if self.eat("||") || self.eat("|") || self.eat_keyword("or") {
                let rhs = self.and()?;
                lhs = SymExpr::or(lhs, rhs);
            } else {
                return Ok(lhs);
            }
        }
    }

    fn and(&mut self) -> Result<SymExpr, SymError> {
        let mut lhs = self.not()?;
        loop {
            if self.eat("&&") || self.eat("&") || self.eat_keyword("and") {
                let rhs = self.not()?;
                lhs = SymExpr::and(lhs, rhs);
            } else {
                return Ok(lhs);
            }
        }
    }

    fn not(&mut self) -> Result<SymExpr, SymError> {
        self.skip_ws();
        let bang = self.src.get(self.pos) == Some(&b'!') && self.src.get(self.pos + 1) != Some(&b'=');
        if bang {
            self.pos += 1;
            return Ok(SymExpr::not(self.not()?));
        }
        if self.eat_keyword("not") {
            return Ok(SymExpr::not(self.not()?));
        }
        self.cmp()
    }

    fn cmp(&mut self) -> Result<SymExpr, SymError> {
        let lhs = self.add()?;
        let op = if self.eat("==") {
            BinOp::Eq
        } else if self.eat("!=") {
            let rhs = self.add()?;
            return Ok(SymExpr::not(SymExpr::eq(lhs, rhs)));
        } else if self.eat("<=") {
            BinOp::Le
        } else if self.eat(">=") {
            BinOp::Ge
        } else if self.eat("<") {
            BinOp::Lt
        } else if self.eat(">") {
            BinOp::Gt
        } else {
            return Ok(lhs);
        };
        let rhs = self.add()?;
        Ok(SymExpr::bin(op, lhs, rhs))
    }

    fn add(&mut self) -> Result<SymExpr, SymError> {
        let mut lhs = self.mul()?;
        loop {
            let op = match self.peek() {
                Some(b'+') => BinOp::Add,
                Some(b'-') => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.mul()?;
            lhs = SymExpr::bin(op, lhs, rhs);
        }
    }

    fn mul(&mut self) -> Result<SymExpr, SymError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Some(b'*') => BinOp::Mul,
                Some(b'/') => BinOp::FloorDiv,
                Some(b'%') => BinOp::Mod,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = SymExpr::bin(op, lhs, rhs);
        }
    }

    fn unary(&mut self) -> Result<SymExpr, SymError> {
        if self.peek() == Some(b'-') {
            self.pos += 1;
            if self.peek().is_some_and(|c| c.is_ascii_digit()) {
                let v = self.number()?;
                return Ok(SymExpr::int(-v));
            }
            return Ok(SymExpr::neg(self.unary()?));
        }
        self.atom()
    }

    fn number(&mut self) -> Result<i64, SymError> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
        text.parse::<i64>().map_err(|_| SymError::Syntax { offset: start, msg: "bad integer".into() })
    }

    fn ident(&mut self) -> Option<String> {
        self.skip_ws();
        let start = self.pos;
        match self.src.get(self.pos) {
            Some(c) if c.is_ascii_alphabetic() || *c == b'_' => {}
            _ => return None,
        }
        while self.pos < self.src.len()
            && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_' || self.src[self.pos] == b'\'')
        {
            self.pos += 1;
        }
        Some(String::from_utf8_lossy(&self.src[start..self.pos]).into_owned())
    }

    fn atom(&mut self) -> Result<SymExpr, SymError> {
        match self.peek() {
            None => Err(self.err("unexpected end of input")),
            Some(c) if c.is_ascii_digit() => Ok(SymExpr::int(self.number()?)),
            Some(b'(') => {
                self.pos += 1;
                let e = self.or()?;
                if !self.eat(")") {
                    return Err(self.err("expected `)`"));
                }
                Ok(e)
            }
            Some(_) => {
                let start = self.pos;
                let Some(name) = self.ident() else {
                    return Err(self.err("expected expression"));
                };
                match name.as_str() {
                    "True" | "true" => return Ok(SymExpr::bool(true)),
                    "False" | "false" => return Ok(SymExpr::bool(false)),
                    "min" | "max" if self.peek() == Some(b'(') => {
                        self.pos += 1;
                        let mut args = vec![self.or()?];
                        while self.eat(",") {
                            args.push(self.or()?);
                        }
                        if !self.eat(")") {
                            return Err(self.err("expected `)`"));
                        }
                        if args.len() < 2 {
                            return Err(SymError::Syntax { offset: start, msg: format!("{name} needs two arguments") });
                        }
                        let op = if name == "min" { BinOp::Min } else { BinOp::Max };
                        let mut it = args.into_iter();
                        let first = it.next().unwrap();
                        return Ok(it.fold(first, |acc, e| SymExpr::bin(op, acc, e)));
                    }
                    _ => {}
                }
                Ok(SymExpr::sym(&name))
            }
        }
    }
}
