//! Text notation for internal states: compact rendering of amplitudes and a
//! small expression language for writing states in config files and on the
//! command line.
//!
//! Grammar (whitespace-separated juxtaposition multiplies, `*` is optional):
//!
//! ```text
//! expr   := [+|-] term ((+|-) term)*
//! term   := factor ([*] factor)*
//! factor := number | "i" | ket | bell | "(" expr ")"
//! ket    := [ab] digits            e.g. a1, b3
//! bell   := name "(" int "," int ")"   name in alpha|beta|gamma|delta
//! ```
//!
//! so `alpha(1,2) alpha(3,4)` is a tensor product and
//! `0.5 a1 b2 + 0.5 b1 a2` a linear combination.

use std::fmt;

use num_complex::Complex64;
use thiserror::Error;

use crate::spin::{
    bell_state, tensor, BellKind, InternalState, ProductTerm, SlotId, SpinLabel, AMP_EPS,
};

/// Fixed-precision float rendering: `{:.6}` with trailing zeros trimmed.
pub fn format_float(x: f64) -> String {
    let mut s = format!("{x:.6}");
    if s.contains('.') {
        while s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.pop();
        }
    }
    if s == "-0" {
        s = "0".into();
    }
    s
}

/// Renders a complex amplitude: real as `0.5`, imaginary as `0.5i` (with
/// `i`/`-i` for unit magnitude), mixed in parentheses as `(0.3-0.4i)`.
pub fn format_amplitude(c: Complex64) -> String {
    if c.im.abs() < AMP_EPS {
        format_float(c.re)
    } else if c.re.abs() < AMP_EPS {
        match format_float(c.im).as_str() {
            "1" => "i".into(),
            "-1" => "-i".into(),
            other => format!("{other}i"),
        }
    } else {
        let sign = if c.im < 0.0 { '-' } else { '+' };
        format!(
            "({}{}{}i)",
            format_float(c.re),
            sign,
            format_float(c.im.abs())
        )
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("{message}")]
pub struct NotationError {
    pub message: String,
    /// Byte range in the source expression the error points at.
    pub span: (usize, usize),
}

impl NotationError {
    fn new(message: impl Into<String>, span: (usize, usize)) -> Self {
        NotationError {
            message: message.into(),
            span,
        }
    }

    /// Multi-line rendering with a caret marker under the offending span.
    pub fn render(&self, source: &str) -> String {
        let (start, end) = self.span;
        let width = end.saturating_sub(start).max(1);
        format!(
            "error: {}\n  | {}\n  | {}{}",
            self.message,
            source,
            " ".repeat(start),
            "^".repeat(width)
        )
    }
}

/// Result of evaluating an expression: either a bare number or a state.
#[derive(Debug, Clone)]
pub enum Value {
    Scalar(Complex64),
    State(InternalState),
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    LParen,
    RParen,
    Comma,
    Plus,
    Minus,
    Star,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Num(x) => write!(f, "number {x}"),
            Tok::Ident(s) => write!(f, "`{s}`"),
            Tok::LParen => f.write_str("`(`"),
            Tok::RParen => f.write_str("`)`"),
            Tok::Comma => f.write_str("`,`"),
            Tok::Plus => f.write_str("`+`"),
            Tok::Minus => f.write_str("`-`"),
            Tok::Star => f.write_str("`*`"),
        }
    }
}

fn lex(src: &str) -> Result<Vec<(Tok, (usize, usize))>, NotationError> {
    let bytes = src.as_bytes();
    let mut toks = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        match b {
            b' ' | b'\t' => i += 1,
            b'(' => {
                toks.push((Tok::LParen, (i, i + 1)));
                i += 1;
            }
            b')' => {
                toks.push((Tok::RParen, (i, i + 1)));
                i += 1;
            }
            b',' => {
                toks.push((Tok::Comma, (i, i + 1)));
                i += 1;
            }
            b'+' => {
                toks.push((Tok::Plus, (i, i + 1)));
                i += 1;
            }
            b'-' => {
                toks.push((Tok::Minus, (i, i + 1)));
                i += 1;
            }
            b'*' => {
                toks.push((Tok::Star, (i, i + 1)));
                i += 1;
            }
            b'0'..=b'9' | b'.' => {
                let start = i;
                while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                    i += 1;
                }
                let text = &src[start..i];
                let num: f64 = text.parse().map_err(|_| {
                    NotationError::new(format!("bad number `{text}`"), (start, i))
                })?;
                toks.push((Tok::Num(num), (start, i)));
            }
            b'a'..=b'z' | b'A'..=b'Z' => {
                let start = i;
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                toks.push((Tok::Ident(src[start..i].to_string()), (start, i)));
            }
            _ => {
                return Err(NotationError::new(
                    format!("unexpected character `{}`", &src[i..i + 1]),
                    (i, i + 1),
                ));
            }
        }
    }
    Ok(toks)
}

struct Parser<'a> {
    src: &'a str,
    toks: Vec<(Tok, (usize, usize))>,
    pos: usize,
    n_slots: u8,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(t, _)| t)
    }

    fn span(&self) -> (usize, usize) {
        self.toks
            .get(self.pos)
            .map(|(_, s)| *s)
            .unwrap_or((self.src.len(), self.src.len()))
    }

    fn next(&mut self) -> Option<(Tok, (usize, usize))> {
        let t = self.toks.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn expect(&mut self, want: Tok) -> Result<(), NotationError> {
        match self.next() {
            Some((t, _)) if t == want => Ok(()),
            Some((t, span)) => Err(NotationError::new(
                format!("expected {want}, found {t}"),
                span,
            )),
            None => Err(NotationError::new(
                format!("expected {want}, found end of input"),
                (self.src.len(), self.src.len()),
            )),
        }
    }

    fn starts_factor(&self) -> bool {
        matches!(
            self.peek(),
            Some(Tok::Num(_)) | Some(Tok::Ident(_)) | Some(Tok::LParen)
        )
    }

    fn parse_expr(&mut self) -> Result<Value, NotationError> {
        let mut negate = false;
        if let Some(Tok::Minus) = self.peek() {
            self.next();
            negate = true;
        } else if let Some(Tok::Plus) = self.peek() {
            self.next();
        }
        let mut acc = self.parse_term()?;
        if negate {
            acc = scale_value(acc, Complex64::new(-1.0, 0.0));
        }
        loop {
            let op = match self.peek() {
                Some(Tok::Plus) => 1.0,
                Some(Tok::Minus) => -1.0,
                _ => break,
            };
            let span = self.span();
            self.next();
            let rhs = self.parse_term()?;
            acc = add_values(acc, scale_value(rhs, Complex64::new(op, 0.0)), span)?;
        }
        Ok(acc)
    }

    fn parse_term(&mut self) -> Result<Value, NotationError> {
        let mut acc = self.parse_factor()?;
        loop {
            if let Some(Tok::Star) = self.peek() {
                self.next();
            } else if !self.starts_factor() {
                break;
            }
            let span = self.span();
            let rhs = self.parse_factor()?;
            acc = mul_values(acc, rhs, span)?;
        }
        Ok(acc)
    }

    fn parse_factor(&mut self) -> Result<Value, NotationError> {
        match self.next() {
            Some((Tok::Num(x), _)) => Ok(Value::Scalar(Complex64::new(x, 0.0))),
            Some((Tok::LParen, _)) => {
                let v = self.parse_expr()?;
                self.expect(Tok::RParen)?;
                Ok(v)
            }
            Some((Tok::Ident(name), span)) => self.parse_named(&name, span),
            Some((t, span)) => Err(NotationError::new(
                format!("expected a number, state, or `(`, found {t}"),
                span,
            )),
            None => Err(NotationError::new(
                "expected a number, state, or `(`, found end of input",
                (self.src.len(), self.src.len()),
            )),
        }
    }

    fn parse_named(&mut self, name: &str, span: (usize, usize)) -> Result<Value, NotationError> {
        if name == "i" {
            return Ok(Value::Scalar(Complex64::new(0.0, 1.0)));
        }
        if let Ok(kind) = name.parse::<BellKind>() {
            self.expect(Tok::LParen)?;
            let i = self.parse_slot()?;
            self.expect(Tok::Comma)?;
            let j = self.parse_slot()?;
            self.expect(Tok::RParen)?;
            let st = bell_state(kind, i, j, self.n_slots)
                .map_err(|e| NotationError::new(e.to_string(), span))?;
            return Ok(Value::State(st));
        }
        // Ket: a letter then a slot number, e.g. `b3`.
        let mut chars = name.chars();
        let letter = chars.next();
        let rest: String = chars.collect();
        let label = match letter {
            Some('a') => Some(crate::spin::SpinLabel::A),
            Some('b') => Some(crate::spin::SpinLabel::B),
            _ => None,
        };
        if let (Some(label), Ok(slot)) = (label, rest.parse::<u8>()) {
            if slot < 1 || slot > self.n_slots {
                return Err(NotationError::new(
                    format!("slot {slot} out of range 1..={}", self.n_slots),
                    span,
                ));
            }
            let st = InternalState::basis(&[(SlotId(slot), label)])
                .map_err(|e| NotationError::new(e.to_string(), span))?;
            return Ok(Value::State(st));
        }
        Err(NotationError::new(
            format!(
                "unknown name `{name}` (expected a ket like a1/b2, a bell state \
                 alpha|beta|gamma|delta, or `i`)"
            ),
            span,
        ))
    }

    fn parse_slot(&mut self) -> Result<SlotId, NotationError> {
        match self.next() {
            Some((Tok::Num(x), span)) => {
                if x.fract() != 0.0 || x < 1.0 || x > 255.0 {
                    return Err(NotationError::new(
                        format!("expected a slot number, found {x}"),
                        span,
                    ));
                }
                Ok(SlotId(x as u8))
            }
            Some((t, span)) => Err(NotationError::new(
                format!("expected a slot number, found {t}"),
                span,
            )),
            None => Err(NotationError::new(
                "expected a slot number, found end of input",
                (self.src.len(), self.src.len()),
            )),
        }
    }
}

fn scale_value(v: Value, f: Complex64) -> Value {
    match v {
        Value::Scalar(c) => Value::Scalar(c * f),
        Value::State(st) => Value::State(
            st.scaled(f)
                .expect("scaling keeps the term list valid"),
        ),
    }
}

fn add_values(a: Value, b: Value, span: (usize, usize)) -> Result<Value, NotationError> {
    match (a, b) {
        (Value::Scalar(x), Value::Scalar(y)) => Ok(Value::Scalar(x + y)),
        (Value::State(x), Value::State(y)) => {
            let sum = x
                .add_scaled(&y, Complex64::new(1.0, 0.0))
                .map_err(|e| NotationError::new(e.to_string(), span))?;
            match sum {
                Some(st) => Ok(Value::State(st)),
                None => Err(NotationError::new("terms cancel to the zero state", span)),
            }
        }
        _ => Err(NotationError::new(
            "cannot add a number and a state",
            span,
        )),
    }
}

fn mul_values(a: Value, b: Value, span: (usize, usize)) -> Result<Value, NotationError> {
    match (a, b) {
        (Value::Scalar(x), Value::Scalar(y)) => Ok(Value::Scalar(x * y)),
        (Value::Scalar(x), Value::State(st)) | (Value::State(st), Value::Scalar(x)) => {
            Ok(scale_value(Value::State(st), x))
        }
        (Value::State(x), Value::State(y)) => {
            let prod =
                tensor(&[x, y]).map_err(|e| NotationError::new(e.to_string(), span))?;
            Ok(Value::State(prod))
        }
    }
}

/// Evaluates an expression over an `n_slots`-slot system.
pub fn parse_expression(src: &str, n_slots: u8) -> Result<Value, NotationError> {
    let toks = lex(src)?;
    if toks.is_empty() {
        return Err(NotationError::new("empty expression", (0, 0)));
    }
    let mut p = Parser {
        src,
        toks,
        pos: 0,
        n_slots,
    };
    let v = p.parse_expr()?;
    if let Some(_) = p.peek() {
        let span = p.span();
        return Err(NotationError::new("unexpected trailing input", span));
    }
    Ok(v)
}

/// Like [`parse_expression`] but requires the result to be a state.
pub fn parse_state(src: &str, n_slots: u8) -> Result<InternalState, NotationError> {
    match parse_expression(src, n_slots)? {
        Value::State(st) => Ok(st),
        Value::Scalar(_) => Err(NotationError::new(
            "expression evaluates to a bare number, not a state",
            (0, src.len()),
        )),
    }
}

/// Builds a state over `slots` from dense coefficients indexed by label bits
/// (slot `slots[k]` contributes bit `len-1-k`, so indices run in label order).
fn state_from_coeffs(slots: &[SlotId], coeffs: &[Complex64]) -> Option<InternalState> {
    let n = slots.len();
    let mut terms = Vec::new();
    for (idx, amp) in coeffs.iter().enumerate() {
        if amp.norm() < 1e-12 {
            continue;
        }
        let labels: Vec<SpinLabel> = (0..n)
            .map(|k| {
                if (idx >> (n - 1 - k)) & 1 == 1 {
                    SpinLabel::B
                } else {
                    SpinLabel::A
                }
            })
            .collect();
        terms.push(ProductTerm {
            labels,
            amplitude: *amp,
        });
    }
    InternalState::new(slots.to_vec(), terms).ok()
}

/// Tries to split `state` as `left-factor ⊗ right-factor` across the given
/// left slot group. Detection is a rank test on the coefficient matrix of the
/// bipartition; on success the two factors reproduce the state exactly (the
/// singular value is folded into the left factor).
fn try_split(
    state: &InternalState,
    left: &[SlotId],
) -> Option<(InternalState, InternalState)> {
    let right: Vec<SlotId> = state
        .slots()
        .iter()
        .filter(|s| !left.contains(s))
        .copied()
        .collect();
    if right.is_empty() {
        return None;
    }
    let (l, r) = (left.len(), right.len());
    let mut m = nalgebra::DMatrix::<Complex64>::zeros(1 << l, 1 << r);
    for term in state.terms() {
        let mut li = 0usize;
        let mut ri = 0usize;
        for (pos, slot) in state.slots().iter().enumerate() {
            let bit = term.labels[pos].bit();
            if let Some(k) = left.iter().position(|s| s == slot) {
                li |= bit << (l - 1 - k);
            } else {
                let k = right.iter().position(|s| s == slot).unwrap();
                ri |= bit << (r - 1 - k);
            }
        }
        m[(li, ri)] += term.amplitude;
    }
    let svd = m.svd(true, true);
    let sv = &svd.singular_values;
    let s0 = sv[0];
    if s0 < 1e-12 || sv.iter().skip(1).any(|s| *s > 1e-10 * s0) {
        return None;
    }
    let u = svd.u?;
    let vt = svd.v_t?;
    let lcoeffs: Vec<Complex64> = (0..1 << l).map(|i| u[(i, 0)] * s0).collect();
    let rcoeffs: Vec<Complex64> = (0..1 << r).map(|j| vt[(0, j)]).collect();
    let lstate = state_from_coeffs(left, &lcoeffs)?;
    let rstate = state_from_coeffs(&right, &rcoeffs)?;
    // Defensive: the product must reproduce the state.
    let prod = tensor(&[lstate.clone(), rstate.clone()]).ok()?;
    let diff = prod
        .add_scaled(state, Complex64::new(-1.0, 0.0))
        .ok()?;
    match diff {
        None => Some((lstate, rstate)),
        Some(d) if d.norm() < 1e-9 * state.norm().max(1.0) => Some((lstate, rstate)),
        Some(_) => None,
    }
}

/// Greedily factors `state` into tensor factors, finest split first: for the
/// lowest remaining slot it finds the smallest slot group that splits off as
/// a factor. Returns at least one element; their product is the state.
fn split_into_factors(state: &InternalState) -> Vec<InternalState> {
    let mut out = Vec::new();
    let mut rest = state.clone();
    'outer: loop {
        let slots = rest.slots().to_vec();
        let n = slots.len();
        if n == 1 {
            out.push(rest);
            return out;
        }
        for size in 1..n {
            // Subsets of the slots that contain the lowest one, by mask over
            // the remaining n-1 positions.
            for mask in 0u32..(1 << (n - 1)) {
                if mask.count_ones() as usize + 1 != size {
                    continue;
                }
                let mut left = vec![slots[0]];
                for (i, slot) in slots[1..].iter().enumerate() {
                    if (mask >> i) & 1 == 1 {
                        left.push(*slot);
                    }
                }
                if let Some((factor, remainder)) = try_split(&rest, &left) {
                    out.push(factor);
                    rest = remainder;
                    continue 'outer;
                }
            }
        }
        out.push(rest);
        return out;
    }
}

/// Renders a state in factored form, pulling each factor's leading amplitude
/// into an overall prefactor: `0.5 (a1 b2 + b1 a2) (a3 b4 + b3 a4)`.
/// Single-term factors render bare (`a1 b2`), and a prefactor of 1 is
/// omitted. Falls back to the expanded rendering when the state has too many
/// slots for the dense rank test.
pub fn render_factored(state: &InternalState) -> String {
    if state.n_slots() > 12 {
        return state.to_string();
    }
    let mut scalar = Complex64::new(1.0, 0.0);
    let mut parts = Vec::new();
    for factor in split_into_factors(state) {
        let lead = factor.terms()[0].amplitude;
        scalar *= lead;
        let unit = factor
            .scaled(Complex64::new(1.0, 0.0) / lead)
            .expect("nonzero leading amplitude");
        if unit.terms().len() == 1 {
            parts.push(unit.to_string());
        } else {
            parts.push(format!("({unit})"));
        }
    }
    let mut out = String::new();
    if (scalar - Complex64::new(1.0, 0.0)).norm() > 1e-9 {
        out = format_amplitude(scalar);
    }
    for p in parts {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(&p);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spin::{bell_state, tensor, BellKind, SlotId};

    #[test]
    fn float_formatting() {
        assert_eq!(format_float(0.5), "0.5");
        assert_eq!(format_float(1.0), "1");
        assert_eq!(format_float(-0.25), "-0.25");
        assert_eq!(format_float(std::f64::consts::FRAC_1_SQRT_2), "0.707107");
        assert_eq!(format_float(0.0), "0");
        assert_eq!(format_float(-1e-9), "0");
    }

    #[test]
    fn amplitude_formatting() {
        assert_eq!(format_amplitude(Complex64::new(0.5, 0.0)), "0.5");
        assert_eq!(format_amplitude(Complex64::new(0.0, 1.0)), "i");
        assert_eq!(format_amplitude(Complex64::new(0.0, -0.5)), "-0.5i");
        assert_eq!(format_amplitude(Complex64::new(0.3, -0.4)), "(0.3-0.4i)");
        assert_eq!(format_amplitude(Complex64::new(1.0, 0.0)), "1");
    }

    #[test]
    fn parses_bell_product() {
        let st = parse_state("alpha(1,2) alpha(3,4)", 4).unwrap();
        let want = tensor(&[
            bell_state(BellKind::Alpha, SlotId(1), SlotId(2), 4).unwrap(),
            bell_state(BellKind::Alpha, SlotId(3), SlotId(4), 4).unwrap(),
        ])
        .unwrap();
        assert!(st.approx_eq(&want, 1e-12));
    }

    #[test]
    fn parses_explicit_sum() {
        let st = parse_state(
            "0.5 a1 b2 a3 b4 + 0.5 a1 b2 b3 a4 + 0.5 b1 a2 a3 b4 + 0.5 b1 a2 b3 a4",
            4,
        )
        .unwrap();
        let want = parse_state("alpha(1,2) * alpha(3,4)", 4).unwrap();
        assert!(st.approx_eq(&want, 1e-12));
    }

    #[test]
    fn parses_signs_parens_and_i() {
        let st = parse_state("-(beta(1,2)) + i gamma(1,2)", 2).unwrap();
        let beta = bell_state(BellKind::Beta, SlotId(1), SlotId(2), 2).unwrap();
        let gamma = bell_state(BellKind::Gamma, SlotId(1), SlotId(2), 2).unwrap();
        let want = beta
            .scaled(Complex64::new(-1.0, 0.0))
            .unwrap()
            .add_scaled(&gamma, Complex64::new(0.0, 1.0))
            .unwrap()
            .unwrap();
        assert!(st.approx_eq(&want, 1e-12));
    }

    #[test]
    fn round_trips_rendered_states() {
        let st = parse_state("alpha(1,2) alpha(3,4)", 4).unwrap();
        let rendered = st.to_string();
        let back = parse_state(&rendered, 4).unwrap();
        assert!(st.approx_eq(&back, 1e-9));
    }

    #[test]
    fn rejects_unknown_name_with_position() {
        let err = parse_state("alpha(1,2) + zeta(3,4)", 4).unwrap_err();
        assert_eq!(err.span, (13, 17));
        assert!(err.message.contains("zeta"));
        let rendered = err.render("alpha(1,2) + zeta(3,4)");
        assert!(rendered.contains("^^^^"));
        let caret_line = rendered.lines().last().unwrap();
        assert_eq!(caret_line.find('^').unwrap() - 4, 13); // 4 bytes of "  | " prefix
    }

    #[test]
    fn rejects_overlapping_tensor() {
        let err = parse_state("alpha(1,2) alpha(2,3)", 4).unwrap_err();
        assert!(err.message.contains("overlap"));
    }

    #[test]
    fn rejects_slot_out_of_range() {
        let err = parse_state("a7", 4).unwrap_err();
        assert!(err.message.contains("out of range"));
        let err = parse_state("alpha(1,7)", 4).unwrap_err();
        assert!(err.message.contains("out of range"));
    }

    #[test]
    fn rejects_mixed_addition() {
        let err = parse_state("1 + a1", 2).unwrap_err();
        assert!(err.message.contains("cannot add"));
    }

    #[test]
    fn rejects_trailing_garbage() {
        let err = parse_state("a1 b2 )", 2).unwrap_err();
        assert!(err.message.contains("trailing"));
        assert_eq!(err.span, (6, 7));
    }

    #[test]
    fn scalar_expression_is_not_a_state() {
        let err = parse_state("0.5 * 2", 2).unwrap_err();
        assert!(err.message.contains("bare number"));
    }

    #[test]
    fn cancellation_is_reported() {
        let err = parse_state("a1 - a1", 1).unwrap_err();
        assert!(err.message.contains("cancel"));
    }

    #[test]
    fn factored_rendering_goldens() {
        let cases = [
            (
                "alpha(1,2) alpha(3,4)",
                4,
                "0.5 (a1 b2 + b1 a2) (a3 b4 + b3 a4)",
            ),
            (
                "beta(1,3) beta(2,4)",
                4,
                "0.5 (a1 b3 - b1 a3) (a2 b4 - b2 a4)",
            ),
            ("alpha(1,2)", 2, "0.707107 (a1 b2 + b1 a2)"),
            ("a1 b2", 2, "a1 b2"),
            ("alpha(1,3) b2", 3, "0.707107 (a1 b3 + b1 a3) b2"),
            (
                "gamma(1,2) gamma(3,4) + delta(1,2) delta(3,4)",
                4,
                "(a1 a2 a3 a4 + b1 b2 b3 b4)",
            ),
        ];
        for (expr, n, want) in cases {
            let st = parse_state(expr, n).unwrap();
            assert_eq!(render_factored(&st), want, "for {expr}");
        }
    }

    #[test]
    fn factored_rendering_round_trips() {
        let exprs = [
            "alpha(1,2) alpha(3,4)",
            "delta(1,3) gamma(2,4)",
            "0.6 a1 a2 + 0.8 b1 b2",
            "alpha(2,4) a1 b3",
        ];
        for expr in exprs {
            let st = parse_state(expr, 4).unwrap();
            let n = st.slots().len() as u8;
            let back = parse_state(&render_factored(&st), n.max(4)).unwrap();
            assert!(
                st.approx_eq(&back, 1e-6),
                "round trip failed for {expr}: {}",
                render_factored(&st)
            );
        }
    }
}
