//! Recursive-descent parser for the annotation grammar:
//!
//! ```text
//! annotation   := binding-list "=>" access ("," access)*
//! binding-list := binding ("," binding)*
//! binding      := ("global" | "block" | "local") (ident | "[" ident ("," ident)* "]")
//! access       := mode ident "[" index ("," index)* "]"
//! mode         := "read" | "write" | "readwrite" | "reduce" "(" ("+" | "*" | "min" | "max") ")"
//! index        := expr | [expr] ":" [expr]
//! expr         := term (("+" | "-") term)*
//! term         := "-" term | factor ("*" factor)*
//! factor       := integer | ident | "(" expr ")"
//! ```

use std::collections::HashSet;

use super::lexer::{tokenize, Token, TokenKind};
use super::*;

pub fn parse_annotation(text: &str) -> Result<AccessAnnotation, AnnotationError> {
    let tokens = tokenize(text)?;
    let mut parser = Parser {
        tokens,
        pos: 0,
        bound: HashSet::new(),
    };
    let annotation = parser.annotation()?;
    parser.expect(&TokenKind::Eof)?;
    Ok(annotation)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
    bound: HashSet<String>,
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.tokens[self.pos]
    }

    fn advance(&mut self) -> Token {
        let tok = self.tokens[self.pos].clone();
        if tok.kind != TokenKind::Eof {
            self.pos += 1;
        }
        tok
    }

    fn error_at(tok: &Token, kind: AnnotationErrorKind, message: String) -> AnnotationError {
        AnnotationError {
            kind,
            line: tok.line,
            column: tok.column,
            message,
        }
    }

    fn syntax(&self, expected: &str) -> AnnotationError {
        let tok = self.peek();
        Self::error_at(
            tok,
            AnnotationErrorKind::Syntax,
            format!("expected {expected}, found {}", tok.kind.describe()),
        )
    }

    fn eat(&mut self, kind: &TokenKind) -> bool {
        if &self.peek().kind == kind {
            self.advance();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, kind: &TokenKind) -> Result<Token, AnnotationError> {
        if &self.peek().kind == kind {
            Ok(self.advance())
        } else {
            Err(self.syntax(&kind.describe()))
        }
    }

    fn ident(&mut self, what: &str) -> Result<(String, Token), AnnotationError> {
        match &self.peek().kind {
            TokenKind::Ident(name) => {
                let name = name.clone();
                Ok((name, self.advance()))
            }
            _ => Err(self.syntax(what)),
        }
    }

    fn peek_keyword(&self) -> Option<&str> {
        match &self.peek().kind {
            TokenKind::Ident(w) => Some(w.as_str()),
            _ => None,
        }
    }

    fn annotation(&mut self) -> Result<AccessAnnotation, AnnotationError> {
        let mut bindings = vec![self.binding()?];
        while self.eat(&TokenKind::Comma) {
            bindings.push(self.binding()?);
        }
        self.expect(&TokenKind::Arrow)?;

        let mut accesses: Vec<Access> = vec![];
        loop {
            let start = self.peek().clone();
            let access = self.access()?;
            if accesses.iter().any(|a| a.argument == access.argument) {
                return Err(Self::error_at(
                    &start,
                    AnnotationErrorKind::DuplicateArgument(access.argument.clone()),
                    format!("argument `{}` is annotated more than once", access.argument),
                ));
            }
            accesses.push(access);
            if !self.eat(&TokenKind::Comma) {
                break;
            }
        }

        Ok(AccessAnnotation { bindings, accesses })
    }

    fn binding(&mut self) -> Result<Binding, AnnotationError> {
        let space = match self.peek_keyword() {
            Some("global") => BindingSpace::Global,
            Some("block") => BindingSpace::Block,
            Some("local") => BindingSpace::Local,
            _ => return Err(self.syntax("`global`, `block` or `local`")),
        };
        self.advance();

        let mut variables = vec![];
        if self.eat(&TokenKind::LBracket) {
            loop {
                variables.push(self.bind_variable()?);
                if !self.eat(&TokenKind::Comma) {
                    break;
                }
            }
            self.expect(&TokenKind::RBracket)?;
        } else {
            variables.push(self.bind_variable()?);
        }
        if variables.len() > crate::geometry::MAX_RANK {
            return Err(self.syntax("at most three variables per binding"));
        }
        Ok(Binding { space, variables })
    }

    fn bind_variable(&mut self) -> Result<String, AnnotationError> {
        let (name, tok) = self.ident("variable name")?;
        if !self.bound.insert(name.clone()) {
            return Err(Self::error_at(
                &tok,
                AnnotationErrorKind::DuplicateVariable(name.clone()),
                format!("variable `{name}` is bound more than once"),
            ));
        }
        Ok(name)
    }

    fn access(&mut self) -> Result<Access, AnnotationError> {
        let mode = match self.peek_keyword() {
            Some("read") => AccessMode::Read,
            Some("write") => AccessMode::Write,
            Some("readwrite") => AccessMode::ReadWrite,
            Some("reduce") => {
                self.advance();
                self.expect(&TokenKind::LParen)?;
                let op = match &self.peek().kind {
                    TokenKind::Plus => ReduceOp::Plus,
                    TokenKind::Star => ReduceOp::Times,
                    TokenKind::Ident(w) if w == "min" => ReduceOp::Min,
                    TokenKind::Ident(w) if w == "max" => ReduceOp::Max,
                    _ => return Err(self.syntax("`+`, `*`, `min` or `max`")),
                };
                self.advance();
                self.expect(&TokenKind::RParen)?;
                AccessMode::Reduce(op)
            }
            _ => return Err(self.syntax("access mode")),
        };
        if !matches!(mode, AccessMode::Reduce(_)) {
            self.advance();
        }

        let (argument, _) = self.ident("argument name")?;
        self.expect(&TokenKind::LBracket)?;
        let mut indices = vec![self.index()?];
        while self.eat(&TokenKind::Comma) {
            indices.push(self.index()?);
        }
        self.expect(&TokenKind::RBracket)?;

        Ok(Access {
            argument,
            mode,
            indices,
        })
    }

    fn index(&mut self) -> Result<IndexSpec, AnnotationError> {
        let ends_bound = |k: &TokenKind| matches!(k, TokenKind::Comma | TokenKind::RBracket);

        let lower = if self.peek().kind == TokenKind::Colon {
            None
        } else {
            Some(self.expr()?)
        };

        if !self.eat(&TokenKind::Colon) {
            return match lower {
                Some(e) => Ok(IndexSpec::Single(e)),
                None => Err(self.syntax("index expression")),
            };
        }

        let upper = if ends_bound(&self.peek().kind) {
            None
        } else {
            Some(self.expr()?)
        };
        Ok(IndexSpec::Slice { lower, upper })
    }

    fn expr(&mut self) -> Result<LinearExpr, AnnotationError> {
        let mut acc = self.term()?;
        loop {
            let sign = match self.peek().kind {
                TokenKind::Plus => 1,
                TokenKind::Minus => -1,
                _ => break,
            };
            self.advance();
            let rhs = self.term()?;
            acc = acc.plus(&rhs, sign);
        }
        Ok(acc)
    }

    fn term(&mut self) -> Result<LinearExpr, AnnotationError> {
        if self.eat(&TokenKind::Minus) {
            return Ok(self.term()?.scaled(-1));
        }

        let mut acc = self.factor()?;
        while self.peek().kind == TokenKind::Star {
            let star = self.advance();
            let rhs = self.factor()?;
            acc = match (acc.is_constant(), rhs.is_constant()) {
                (true, _) => rhs.scaled(acc.constant),
                (_, true) => acc.scaled(rhs.constant),
                _ => {
                    return Err(Self::error_at(
                        &star,
                        AnnotationErrorKind::Nonlinear,
                        "index expressions must be linear in the bound variables".into(),
                    ))
                }
            };
        }
        Ok(acc)
    }

    fn factor(&mut self) -> Result<LinearExpr, AnnotationError> {
        let tok = self.peek().clone();
        match &tok.kind {
            TokenKind::Int(v) => {
                self.advance();
                Ok(LinearExpr::constant(*v))
            }
            TokenKind::Ident(name) => {
                if !self.bound.contains(name) {
                    return Err(Self::error_at(
                        &tok,
                        AnnotationErrorKind::UnboundVariable(name.clone()),
                        format!("variable `{name}` is not bound"),
                    ));
                }
                self.advance();
                Ok(LinearExpr::var(name))
            }
            TokenKind::LParen => {
                self.advance();
                let e = self.expr()?;
                self.expect(&TokenKind::RParen)?;
                Ok(e)
            }
            _ => Err(self.syntax("expression")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn global(vars: &[&str]) -> Binding {
        Binding {
            space: BindingSpace::Global,
            variables: vars.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn access(arg: &str, mode: AccessMode, indices: Vec<IndexSpec>) -> Access {
        Access {
            argument: arg.into(),
            mode,
            indices,
        }
    }

    #[test]
    fn stencil_annotation() {
        let a = parse_annotation("global i => read A[i-1:i+1], write B[i]").unwrap();
        assert_eq!(
            a,
            AccessAnnotation {
                bindings: vec![global(&["i"])],
                accesses: vec![
                    access(
                        "A",
                        AccessMode::Read,
                        vec![IndexSpec::slice(LinearExpr::offset("i", -1), LinearExpr::offset("i", 1))]
                    ),
                    access("B", AccessMode::Write, vec![IndexSpec::Single(LinearExpr::var("i"))]),
                ],
            }
        );
    }

    #[test]
    fn matmul_annotation() {
        let a = parse_annotation("global [i, j] => read A[i,:], read B[:,j], write C[i,j]").unwrap();
        assert_eq!(a.bindings, vec![global(&["i", "j"])]);
        assert_eq!(
            a.accesses,
            vec![
                access(
                    "A",
                    AccessMode::Read,
                    vec![IndexSpec::Single(LinearExpr::var("i")), IndexSpec::full()]
                ),
                access(
                    "B",
                    AccessMode::Read,
                    vec![IndexSpec::full(), IndexSpec::Single(LinearExpr::var("j"))]
                ),
                access(
                    "C",
                    AccessMode::Write,
                    vec![
                        IndexSpec::Single(LinearExpr::var("i")),
                        IndexSpec::Single(LinearExpr::var("j"))
                    ]
                ),
            ]
        );
    }

    #[test]
    fn reduce_annotation() {
        let a = parse_annotation("global [i, j] => read A[i,j], reduce(+) sum[i]").unwrap();
        assert_eq!(a.accesses[1].mode, AccessMode::Reduce(ReduceOp::Plus));
        assert_eq!(a.accesses[1].indices, vec![IndexSpec::Single(LinearExpr::var("i"))]);
        for (text, op) in [("*", ReduceOp::Times), ("min", ReduceOp::Min), ("max", ReduceOp::Max)] {
            let a = parse_annotation(&format!("global i => reduce({text}) s[i]")).unwrap();
            assert_eq!(a.accesses[0].mode, AccessMode::Reduce(op));
        }
    }

    #[test]
    fn linear_forms() {
        let a = parse_annotation("global [i, j], block b, local l => read A[2*i - (j - 3)*2 + b*0 + -l + 4]").unwrap();
        let IndexSpec::Single(e) = &a.accesses[0].indices[0] else { panic!() };
        assert_eq!(e.constant, 10);
        assert_eq!(e.terms, vec![("i".into(), 2), ("j".into(), -2), ("l".into(), -1)]);
    }

    #[test]
    fn errors() {
        let err = parse_annotation("global i => read A[i*i]").unwrap_err();
        assert_eq!(err.kind, AnnotationErrorKind::Nonlinear);
        assert_eq!((err.line, err.column), (1, 21));

        let err = parse_annotation("global i => read A[k]").unwrap_err();
        assert_eq!(err.kind, AnnotationErrorKind::UnboundVariable("k".into()));

        let err = parse_annotation("global [i, i] => read A[i]").unwrap_err();
        assert_eq!(err.kind, AnnotationErrorKind::DuplicateVariable("i".into()));

        let err = parse_annotation("global i, block i => read A[i]").unwrap_err();
        assert_eq!(err.kind, AnnotationErrorKind::DuplicateVariable("i".into()));

        let err = parse_annotation("global i => read A[i], write A[i]").unwrap_err();
        assert_eq!(err.kind, AnnotationErrorKind::DuplicateArgument("A".into()));

        let err = parse_annotation("global i =>\n  read A[i], modify B[i]").unwrap_err();
        assert_eq!(err.kind, AnnotationErrorKind::Syntax);
        assert_eq!((err.line, err.column), (2, 14));
        assert!(err.to_string().starts_with("2:14: expected access mode"));

        assert!(parse_annotation("global i => reduce(-) s[i]").is_err());
        assert!(parse_annotation("global i =>").is_err());
        assert!(parse_annotation("global i => read A[]").is_err());
        assert!(parse_annotation("global i => read A[i] extra").is_err());
    }

    #[test]
    fn multiline_host_sample() {
        let a = parse_annotation("global i => read input[i-1:i+1],\n                         write output[i]").unwrap();
        assert_eq!(a.accesses.len(), 2);
    }

    #[test]
    fn slice_variants() {
        let a = parse_annotation("global i => read A[i:, :i, :, 3:4]").unwrap();
        assert_eq!(
            a.accesses[0].indices,
            vec![
                IndexSpec::Slice { lower: Some(LinearExpr::var("i")), upper: None },
                IndexSpec::Slice { lower: None, upper: Some(LinearExpr::var("i")) },
                IndexSpec::full(),
                IndexSpec::slice(LinearExpr::constant(3), LinearExpr::constant(4)),
            ]
        );
    }

    fn arb_expr(vars: Vec<String>) -> impl Strategy<Value = LinearExpr> {
        (
            -20i64..20,
            prop::collection::vec((prop::sample::select(vars), -3i64..=3), 0..3),
        )
            .prop_map(|(c, terms)| {
                let mut e = LinearExpr::constant(c);
                for (v, k) in terms {
                    e = e.plus(&LinearExpr::term(&v, k), 1);
                }
                e
            })
    }

    fn arb_annotation() -> impl Strategy<Value = AccessAnnotation> {
        let vars: Vec<String> = ["i", "j", "b", "l"].iter().map(|s| s.to_string()).collect();
        let index = prop_oneof![
            arb_expr(vars.clone()).prop_map(IndexSpec::Single),
            (prop::option::of(arb_expr(vars.clone())), prop::option::of(arb_expr(vars.clone())))
                .prop_map(|(lower, upper)| IndexSpec::Slice { lower, upper }),
        ];
        let mode = prop_oneof![
            Just(AccessMode::Read),
            Just(AccessMode::Write),
            Just(AccessMode::ReadWrite),
            Just(AccessMode::Reduce(ReduceOp::Plus)),
            Just(AccessMode::Reduce(ReduceOp::Min)),
        ];
        prop::collection::vec((mode, prop::collection::vec(index, 1..=3)), 1..4).prop_map(|accs| {
            AccessAnnotation {
                bindings: vec![
                    global(&["i", "j"]),
                    Binding { space: BindingSpace::Block, variables: vec!["b".into()] },
                    Binding { space: BindingSpace::Local, variables: vec!["l".into()] },
                ],
                accesses: accs
                    .into_iter()
                    .enumerate()
                    .map(|(n, (mode, indices))| access(&format!("arg{n}"), mode, indices))
                    .collect(),
            }
        })
    }

    proptest! {
        #[test]
        fn print_parse_fixed_point(a in arb_annotation()) {
            let printed = a.to_string();
            let reparsed = parse_annotation(&printed).unwrap();
            prop_assert_eq!(&reparsed, &a);
            prop_assert_eq!(parse_annotation(&reparsed.to_string()).unwrap(), reparsed);
        }
    }
}
