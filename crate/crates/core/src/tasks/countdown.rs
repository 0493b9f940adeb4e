//! Countdown with three numbers: combine all of them with + − × ÷ to hit
//! the target.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{extract_tagged, RewardBreakdown};
use crate::error::{Error, Result};

pub const REWARD_SOLVED: f64 = 1.0;
pub const REWARD_NUMBERS_ONLY: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountdownInstance {
    pub numbers: Vec<u32>,
    pub target: u32,
    /// An expression over `numbers` that evaluates to `target`.
    pub witness: String,
}

impl CountdownInstance {
    pub fn prompt(&self) -> String {
        let nums: Vec<String> = self.numbers.iter().map(u32::to_string).collect();
        format!("{}={}:", nums.join(","), self.target)
    }
}

/// A parsed expression: its integer literals, and its value when every
/// division along the way was exact.
#[derive(Debug, PartialEq)]
pub struct ParsedExpr {
    pub literals: Vec<i64>,
    pub value: Option<i64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Tok {
    Num(i64),
    Op(char),
    Open,
    Close,
}

fn lex(text: &str) -> Option<Vec<Tok>> {
    let mut out = Vec::new();
    let mut chars = text.chars().peekable();
    while let Some(&c) = chars.peek() {
        match c {
            c if c.is_whitespace() => {
                chars.next();
            }
            '0'..='9' => {
                let mut n: i64 = 0;
                while let Some(&d) = chars.peek() {
                    let Some(v) = d.to_digit(10) else { break };
                    n = n.checked_mul(10)?.checked_add(v as i64)?;
                    chars.next();
                }
                out.push(Tok::Num(n));
            }
            '+' | '-' => {
                out.push(Tok::Op(c));
                chars.next();
            }
            '*' | 'x' | '×' => {
                out.push(Tok::Op('*'));
                chars.next();
            }
            '/' | '÷' => {
                out.push(Tok::Op('/'));
                chars.next();
            }
            '(' => {
                out.push(Tok::Open);
                chars.next();
            }
            ')' => {
                out.push(Tok::Close);
                chars.next();
            }
            _ => return None,
        }
    }
    Some(out)
}

struct Parser<'a> {
    toks: &'a [Tok],
    pos: usize,
    literals: Vec<i64>,
}

impl Parser<'_> {
    fn peek(&self) -> Option<Tok> {
        self.toks.get(self.pos).copied()
    }

    // Values are Option<i64>: None once an inexact division or overflow
    // occurs; parsing continues so the literal multiset is still collected.
    fn expr(&mut self) -> Option<Option<i64>> {
        let mut acc = self.term()?;
        while let Some(Tok::Op(op @ ('+' | '-'))) = self.peek() {
            self.pos += 1;
            let rhs = self.term()?;
            acc = match (acc, rhs) {
                (Some(a), Some(b)) if op == '+' => a.checked_add(b),
                (Some(a), Some(b)) => a.checked_sub(b),
                _ => None,
            };
        }
        Some(acc)
    }

    fn term(&mut self) -> Option<Option<i64>> {
        let mut acc = self.factor()?;
        while let Some(Tok::Op(op @ ('*' | '/'))) = self.peek() {
            self.pos += 1;
            let rhs = self.factor()?;
            acc = match (acc, rhs) {
                (Some(a), Some(b)) if op == '*' => a.checked_mul(b),
                (Some(a), Some(b)) if b != 0 && a % b == 0 => Some(a / b),
                _ => None,
            };
        }
        Some(acc)
    }

    fn factor(&mut self) -> Option<Option<i64>> {
        match self.peek()? {
            Tok::Num(n) => {
                self.pos += 1;
                self.literals.push(n);
                Some(Some(n))
            }
            Tok::Open => {
                self.pos += 1;
                let v = self.expr()?;
                if self.peek()? != Tok::Close {
                    return None;
                }
                self.pos += 1;
                Some(v)
            }
            _ => None,
        }
    }
}

/// Parses infix integer arithmetic. Returns `None` on a syntax error.
pub fn parse_expression(text: &str) -> Option<ParsedExpr> {
    let toks = lex(text)?;
    if toks.is_empty() {
        return None;
    }
    let mut p = Parser {
        toks: &toks,
        pos: 0,
        literals: Vec::new(),
    };
    let value = p.expr()?;
    if p.pos != toks.len() {
        return None;
    }
    Some(ParsedExpr {
        literals: p.literals,
        value,
    })
}

/// The expression part of a completion: the `<answer>` body if tagged, and
/// only the left side of an `=`.
fn expression_text(text: &str) -> &str {
    let body = extract_tagged(text, "answer").unwrap_or(text);
    body.split('=').next().unwrap_or("")
}

/// 1.0 when the expression uses exactly the instance numbers and hits the
/// target, 0.1 when the numbers are right but the value is not, else 0.
pub fn countdown_reward(completion: &str, inst: &CountdownInstance) -> RewardBreakdown {
    let score = match parse_expression(expression_text(completion)) {
        None => 0.0,
        Some(parsed) => {
            let mut used = parsed.literals.clone();
            used.sort_unstable();
            let mut want: Vec<i64> = inst.numbers.iter().map(|&n| n as i64).collect();
            want.sort_unstable();
            if used != want {
                0.0
            } else if parsed.value == Some(inst.target as i64) {
                REWARD_SOLVED
            } else {
                REWARD_NUMBERS_ONLY
            }
        }
    };
    RewardBreakdown::from_components(vec![("countdown".into(), score)])
}

#[derive(Clone, Copy, PartialEq)]
enum Shape {
    Atom,
    Sum,
    Product,
    Quotient,
}

#[derive(Clone)]
struct Node {
    value: i64,
    text: String,
    shape: Shape,
}

fn wrap(n: &Node, needs: bool) -> String {
    if needs {
        format!("({})", n.text)
    } else {
        n.text.clone()
    }
}

/// Joins two operands with the fewest parentheses that preserve evaluation
/// order under exact integer division.
fn join(a: &Node, op: char, b: &Node) -> Option<Node> {
    let (value, text, shape) = match op {
        '+' => (
            a.value.checked_add(b.value)?,
            format!("{}+{}", a.text, b.text),
            Shape::Sum,
        ),
        '-' => (
            a.value.checked_sub(b.value)?,
            format!("{}-{}", a.text, wrap(b, b.shape == Shape::Sum)),
            Shape::Sum,
        ),
        '*' => (
            a.value.checked_mul(b.value)?,
            format!(
                "{}*{}",
                wrap(a, a.shape == Shape::Sum),
                wrap(b, matches!(b.shape, Shape::Sum | Shape::Quotient))
            ),
            Shape::Product,
        ),
        _ => {
            if b.value == 0 || a.value % b.value != 0 {
                return None;
            }
            (
                a.value / b.value,
                format!(
                    "{}/{}",
                    wrap(a, a.shape == Shape::Sum),
                    wrap(b, b.shape != Shape::Atom)
                ),
                Shape::Quotient,
            )
        }
    };
    Some(Node { value, text, shape })
}

/// Every value reachable by combining all of `nums` (each used once) with
/// the four operations under exact integer division, with the shortest
/// witness expression per value. Sorted by value.
pub fn reachable_targets(nums: &[u32]) -> Vec<(i64, String)> {
    fn combine(items: &[Node], out: &mut Vec<Node>) {
        if items.len() == 1 {
            out.push(items[0].clone());
            return;
        }
        for i in 0..items.len() {
            for j in 0..items.len() {
                if i == j {
                    continue;
                }
                let rest: Vec<Node> = items
                    .iter()
                    .enumerate()
                    .filter(|&(k, _)| k != i && k != j)
                    .map(|(_, v)| v.clone())
                    .collect();
                for op in ['+', '-', '*', '/'] {
                    if let Some(node) = join(&items[i], op, &items[j]) {
                        let mut next = rest.clone();
                        next.push(node);
                        combine(&next, out);
                    }
                }
            }
        }
    }
    let items: Vec<Node> = nums
        .iter()
        .map(|&n| Node {
            value: n as i64,
            text: n.to_string(),
            shape: Shape::Atom,
        })
        .collect();
    let mut all = Vec::new();
    combine(&items, &mut all);
    let mut all: Vec<(i64, String)> = all.into_iter().map(|n| (n.value, n.text)).collect();
    debug_assert!(all
        .iter()
        .all(|(v, s)| parse_expression(s).and_then(|p| p.value) == Some(*v)));
    all.sort_by(|a, b| {
        a.0.cmp(&b.0)
            .then(a.1.len().cmp(&b.1.len()))
            .then(a.1.cmp(&b.1))
    });
    all.dedup_by(|a, b| a.0 == b.0);
    all
}

/// Single-digit numbers, targets in 1..=30, every instance solvable.
pub fn gen_countdown<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Result<Vec<CountdownInstance>> {
    if n == 0 {
        return Err(Error::Input("n must be >= 1".into()));
    }
    const MAX_TRIES: usize = 1000;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut made = None;
        for _ in 0..MAX_TRIES {
            let numbers: Vec<u32> = (0..3).map(|_| rng.gen_range(1..=9)).collect();
            let targets: Vec<(i64, String)> = reachable_targets(&numbers)
                .into_iter()
                .filter(|(v, _)| (1..=30).contains(v))
                .collect();
            if let Some((target, witness)) = targets.choose(rng) {
                made = Some(CountdownInstance {
                    numbers,
                    target: *target as u32,
                    witness: witness.clone(),
                });
                break;
            }
        }
        out.push(made.ok_or_else(|| Error::Generation("no solvable countdown instance".into()))?);
    }
    Ok(out)
}

/// A random well-formed expression over `nums` (each used once, random
/// order, operators and grouping). Its value is whatever it comes out to.
pub fn random_expression<R: Rng + ?Sized>(nums: &[u32], rng: &mut R) -> String {
    let mut items: Vec<Node> = nums
        .iter()
        .map(|&n| Node {
            value: n as i64,
            text: n.to_string(),
            shape: Shape::Atom,
        })
        .collect();
    while items.len() > 1 {
        let i = rng.gen_range(0..items.len());
        let a = items.swap_remove(i);
        let j = rng.gen_range(0..items.len());
        let b = items.swap_remove(j);
        let node = loop {
            let op = *['+', '-', '*', '/'].choose(rng).expect("nonempty");
            if let Some(n) = join(&a, op, &b) {
                break n;
            }
        };
        items.push(node);
    }
    items.pop().map(|n| n.text).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn inst(target: u32) -> CountdownInstance {
        CountdownInstance {
            numbers: vec![1, 2, 3],
            target,
            witness: "1*2*3".into(),
        }
    }

    #[test]
    fn reward_tiers() {
        assert_eq!(countdown_reward("1*2*3", &inst(6)).total, 1.0);
        assert_eq!(countdown_reward("1*2*3", &inst(7)).total, 0.1);
        assert_eq!(countdown_reward("2*3", &inst(6)).total, 0.0);
        assert_eq!(countdown_reward("", &inst(6)).total, 0.0);
        assert_eq!(countdown_reward("1*2*3*", &inst(6)).total, 0.0);
        assert_eq!(countdown_reward("hello", &inst(6)).total, 0.0);
    }

    #[test]
    fn whitespace_and_reordering_invariant() {
        assert_eq!(countdown_reward(" 3 * (2*1) ", &inst(6)).total, 1.0);
        assert_eq!(
            countdown_reward("<answer>2*1*3</answer>", &inst(6)).total,
            1.0
        );
        assert_eq!(countdown_reward("3×2÷1=6", &inst(6)).total, 1.0);
    }

    #[test]
    fn inexact_division_is_value_mismatch() {
        // 3/2 is not an integer: numbers right, value invalid
        assert_eq!(countdown_reward("3/2*1", &inst(1)).total, 0.1);
        assert_eq!(parse_expression("3/2").unwrap().value, None);
        assert_eq!(parse_expression("6/(3-3)").unwrap().value, None);
    }

    #[test]
    fn syntax_errors() {
        for bad in ["(1+2", "1+", ")", "1 2", "--1", "1+-2"] {
            assert!(parse_expression(bad).is_none(), "{bad}");
        }
    }

    #[test]
    fn generated_instances_are_solvable_and_reproducible() {
        let a = gen_countdown(&mut ChaCha8Rng::seed_from_u64(0), 20).unwrap();
        let b = gen_countdown(&mut ChaCha8Rng::seed_from_u64(0), 20).unwrap();
        assert_eq!(a, b);
        for i in &a {
            assert!(i.numbers.iter().all(|&n| (1..=9).contains(&n)));
            assert!((1..=30).contains(&i.target));
            assert_eq!(countdown_reward(&i.witness, i).total, 1.0, "{i:?}");
        }
    }

    #[test]
    fn random_expressions_use_every_number() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let nums: Vec<u32> = (0..3).map(|_| rng.gen_range(1..=9)).collect();
            let e = random_expression(&nums, &mut rng);
            let parsed = parse_expression(&e).unwrap();
            let mut lits = parsed.literals.clone();
            lits.sort_unstable();
            let mut want: Vec<i64> = nums.iter().map(|&n| n as i64).collect();
            want.sort_unstable();
            assert_eq!(lits, want, "{e}");
            assert!(parsed.value.is_some(), "{e}");
        }
    }
}
