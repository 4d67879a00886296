//! Synthetic verifiable task: modular arithmetic chains such as
//! `3 + 4 * 2 mod 7`, solved by writing reduction steps `x op y v ;` in any
//! order allowed by operator precedence and ending with the answer and EOS.
//!
//! A MARKER token discards the unfinished step it appears in, which is how a
//! rollout revises itself.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{Token, Vocabulary};

pub const MIN_DIFFICULTY: usize = 2;
pub const MAX_DIFFICULTY: usize = 4;
const INSTANCE_HEADER: &str = "# dasd instances v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Op {
    Add,
    Mul,
}

impl Op {
    pub fn apply(self, x: u8, y: u8, modulus: u8) -> u8 {
        let (x, y, m) = (x as u32, y as u32, modulus as u32);
        (match self {
            Op::Add => x + y,
            Op::Mul => x * y,
        } % m) as u8
    }

    pub fn step_token(self) -> Token {
        match self {
            Op::Add => Vocabulary::PLUS,
            Op::Mul => Vocabulary::TIMES,
        }
    }

    pub fn prompt_token(self) -> Token {
        match self {
            Op::Add => Vocabulary::PROMPT_PLUS,
            Op::Mul => Vocabulary::PROMPT_TIMES,
        }
    }

    fn symbol(self) -> char {
        match self {
            Op::Add => '+',
            Op::Mul => '*',
        }
    }

    fn from_symbol(c: char) -> Option<Self> {
        match c {
            '+' => Some(Op::Add),
            '*' => Some(Op::Mul),
            _ => None,
        }
    }
}

/// One written reduction `x op y = value`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Step {
    pub x: u8,
    pub op: Op,
    pub y: u8,
    pub value: u8,
}

impl Step {
    pub fn tokens(&self, vocab: &Vocabulary) -> [Token; 4] {
        [
            vocab.digit(self.x),
            self.op.step_token(),
            vocab.digit(self.y),
            vocab.digit(self.value),
        ]
    }
}

/// A task prompt with its exhaustively enumerated solution orders.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub id: u64,
    pub operands: Vec<u8>,
    pub ops: Vec<Op>,
    pub modulus: u8,
    pub answer: u8,
    /// Every legal reduction sequence, each step in both operand phrasings.
    pub valid_orders: Vec<Vec<Step>>,
    /// Canonical solution tokens, ending with the answer and EOS.
    pub trace: Vec<Token>,
}

/// Outcome of checking a rollout.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct VerifierResult {
    pub reward: u8,
    pub step_flags: Vec<bool>,
    pub first_error_step: Option<usize>,
    /// False when the rollout did not follow the step grammar.
    pub parsed: bool,
}

fn reduction_legal(ops: &[Op], i: usize) -> bool {
    match ops[i] {
        Op::Mul => true,
        Op::Add => {
            let left_ok = i == 0 || ops[i - 1] == Op::Add;
            let right_ok = i + 1 == ops.len() || ops[i + 1] == Op::Add;
            left_ok && right_ok
        }
    }
}

fn enumerate_orders(values: &[u8], ops: &[Op], modulus: u8, path: &mut Vec<Step>, out: &mut BTreeSet<Vec<Step>>) {
    if ops.is_empty() {
        out.insert(path.clone());
        return;
    }
    for i in 0..ops.len() {
        if !reduction_legal(ops, i) {
            continue;
        }
        let (l, r) = (values[i], values[i + 1]);
        let v = ops[i].apply(l, r, modulus);
        let mut next_values = values.to_vec();
        next_values.splice(i..=i + 1, [v]);
        let mut next_ops = ops.to_vec();
        next_ops.remove(i);
        let phrasings = if l == r { vec![(l, r)] } else { vec![(l, r), (r, l)] };
        for (x, y) in phrasings {
            path.push(Step {
                x,
                op: ops[i],
                y,
                value: v,
            });
            enumerate_orders(&next_values, &next_ops, modulus, path, out);
            path.pop();
        }
    }
}

fn evaluate(operands: &[u8], ops: &[Op], modulus: u8) -> u8 {
    // precedence: fold products first, then sum the terms
    let mut sum = 0u32;
    let mut term = operands[0] as u32;
    for (op, &v) in ops.iter().zip(&operands[1..]) {
        match op {
            Op::Mul => term = term * v as u32 % modulus as u32,
            Op::Add => {
                sum = (sum + term) % modulus as u32;
                term = v as u32;
            }
        }
    }
    ((sum + term) % modulus as u32) as u8
}

impl TaskInstance {
    /// Builds an instance from explicit operands and operators.
    pub fn from_parts(id: u64, operands: Vec<u8>, ops: Vec<Op>, modulus: u8) -> Result<Self> {
        let vocab = Vocabulary::new(modulus)?;
        if !(MIN_DIFFICULTY..=MAX_DIFFICULTY).contains(&operands.len()) {
            return Err(Error::InvalidArgument(format!(
                "difficulty {} outside [2, 4]",
                operands.len()
            )));
        }
        if ops.len() + 1 != operands.len() {
            return Err(Error::InvalidArgument(
                "need exactly one operator between operands".into(),
            ));
        }
        if let Some(&bad) = operands.iter().find(|&&v| v >= modulus) {
            return Err(Error::InvalidArgument(format!(
                "operand {bad} not below modulus {modulus}"
            )));
        }
        let mut set = BTreeSet::new();
        enumerate_orders(&operands, &ops, modulus, &mut Vec::new(), &mut set);
        let valid_orders: Vec<Vec<Step>> = set.into_iter().collect();
        let answer = evaluate(&operands, &ops, modulus);
        debug_assert!(valid_orders.iter().all(|o| o.last().unwrap().value == answer));
        assert!(valid_orders.len() <= 64, "too many orders to track");
        let trace = canonical_trace(&operands, &ops, modulus, answer, &vocab);
        Ok(Self {
            id,
            operands,
            ops,
            modulus,
            answer,
            valid_orders,
            trace,
        })
    }

    pub fn difficulty(&self) -> usize {
        self.operands.len()
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::new(self.modulus).expect("modulus validated at construction")
    }

    /// Student prompt `a q∘ b q∘ c ...`; never contains the answer slot.
    pub fn prompt(&self) -> Vec<Token> {
        let vocab = self.vocabulary();
        let mut out = vec![vocab.digit(self.operands[0])];
        for (op, &v) in self.ops.iter().zip(&self.operands[1..]) {
            out.push(op.prompt_token());
            out.push(vocab.digit(v));
        }
        out
    }

    /// Whether at least two distinct token-level solutions exist.
    pub fn has_fork(&self) -> bool {
        self.valid_orders.len() >= 2
    }

    /// Human-readable prompt, e.g. `3 + 4 * 2 mod 7`.
    pub fn describe(&self) -> String {
        let mut s = self.operands[0].to_string();
        for (op, v) in self.ops.iter().zip(&self.operands[1..]) {
            let _ = write!(s, " {} {v}", op.symbol());
        }
        let _ = write!(s, " mod {}", self.modulus);
        s
    }

    /// Solution tokens for one valid order, optionally with slips: a wrong
    /// value, MARKER, then the step written again correctly.
    pub fn solution_tokens<R: Rng + ?Sized>(&self, order: usize, slip_rate: f64, rng: &mut R) -> Vec<Token> {
        let vocab = self.vocabulary();
        let mut out = Vec::new();
        for step in &self.valid_orders[order] {
            if slip_rate > 0.0 && rng.random::<f64>() < slip_rate {
                let wrong = (step.value + rng.random_range(1..self.modulus)) % self.modulus;
                let slip = Step { value: wrong, ..*step };
                out.extend(slip.tokens(&vocab));
                out.push(Vocabulary::MARKER);
            }
            out.extend(step.tokens(&vocab));
            out.push(Vocabulary::SEP);
        }
        out.push(vocab.digit(self.answer));
        out.push(Vocabulary::EOS);
        out
    }
}

fn canonical_trace(operands: &[u8], ops: &[Op], modulus: u8, answer: u8, vocab: &Vocabulary) -> Vec<Token> {
    // leftmost legal reduction first, operands in written order
    let mut values = operands.to_vec();
    let mut ops = ops.to_vec();
    let mut out = Vec::new();
    while !ops.is_empty() {
        let i = (0..ops.len())
            .find(|&i| reduction_legal(&ops, i))
            .expect("some reduction is always legal");
        let v = ops[i].apply(values[i], values[i + 1], modulus);
        let step = Step {
            x: values[i],
            op: ops[i],
            y: values[i + 1],
            value: v,
        };
        out.extend(step.tokens(vocab));
        out.push(Vocabulary::SEP);
        values.splice(i..=i + 1, [v]);
        ops.remove(i);
    }
    out.push(vocab.digit(answer));
    out.push(Vocabulary::EOS);
    out
}

/// Draws operands and operators uniformly, resampling until the instance has
/// at least two distinct token-level solutions.
pub fn generate_instance<R: Rng + ?Sized>(
    rng: &mut R,
    difficulty: usize,
    modulus: u8,
    id: u64,
) -> Result<TaskInstance> {
    if !(MIN_DIFFICULTY..=MAX_DIFFICULTY).contains(&difficulty) {
        return Err(Error::InvalidArgument(format!(
            "difficulty {difficulty} outside [2, 4]"
        )));
    }
    Vocabulary::new(modulus)?;
    loop {
        let operands: Vec<u8> = (0..difficulty).map(|_| rng.random_range(0..modulus)).collect();
        let ops: Vec<Op> = (1..difficulty)
            .map(|_| if rng.random::<bool>() { Op::Mul } else { Op::Add })
            .collect();
        let inst = TaskInstance::from_parts(id, operands, ops, modulus)?;
        if inst.has_fork() {
            return Ok(inst);
        }
    }
}

/// Answer symbol for the privileged slot.
pub fn privileged_context(instance: &TaskInstance) -> Token {
    instance.vocabulary().digit(instance.answer)
}

enum Segment {
    Step(Step),
    Malformed,
}

fn read_step(seg: &[Token], vocab: &Vocabulary) -> Segment {
    if seg.len() != 4 {
        return Segment::Malformed;
    }
    let op = match seg[1] {
        Vocabulary::PLUS => Op::Add,
        Vocabulary::TIMES => Op::Mul,
        _ => return Segment::Malformed,
    };
    match (
        vocab.digit_value(seg[0]),
        vocab.digit_value(seg[2]),
        vocab.digit_value(seg[3]),
    ) {
        (Some(x), Some(y), Some(value)) => Segment::Step(Step { x, op, y, value }),
        _ => Segment::Malformed,
    }
}

/// Checks a rollout against an instance.
///
/// Grammar: `(step ;)* answer EOS`, where a step is `digit op digit digit`
/// and a MARKER discards everything written so far in the current segment.
/// A step is correct when some valid order, consistent with the steps
/// accepted so far, takes it next; incorrect steps leave that state alone.
/// Rollouts cut off before EOS keep the flags of their completed steps but
/// earn no reward. Anything else off-grammar is unparseable: reward 0, no
/// flags.
pub fn verify(instance: &TaskInstance, tokens: &[Token]) -> VerifierResult {
    let vocab = instance.vocabulary();
    let unparseable = VerifierResult::default();
    let mut seg = [Token(0); 4];
    let mut seg_len = 0usize;
    let mut overflow = false;
    let mut candidates: u64 = if instance.valid_orders.len() == 64 {
        u64::MAX
    } else {
        (1u64 << instance.valid_orders.len()) - 1
    };
    let mut accepted = 0usize;
    let mut flags = Vec::new();
    for (i, &t) in tokens.iter().enumerate() {
        match t {
            Vocabulary::MARKER => {
                seg_len = 0;
                overflow = false;
            }
            Vocabulary::SEP => {
                if overflow {
                    return unparseable;
                }
                let step = match read_step(&seg[..seg_len], &vocab) {
                    Segment::Step(s) => s,
                    Segment::Malformed => return unparseable,
                };
                let mut next = 0u64;
                for (k, order) in instance.valid_orders.iter().enumerate() {
                    if candidates >> k & 1 == 1 && order.get(accepted) == Some(&step) {
                        next |= 1 << k;
                    }
                }
                if next != 0 {
                    candidates = next;
                    accepted += 1;
                    flags.push(true);
                } else {
                    flags.push(false);
                }
                seg_len = 0;
            }
            Vocabulary::EOS => {
                if i + 1 != tokens.len() || overflow || seg_len != 1 {
                    return unparseable;
                }
                let Some(ans) = vocab.digit_value(seg[0]) else {
                    return unparseable;
                };
                let first_error_step = flags.iter().position(|f| !f);
                return VerifierResult {
                    reward: u8::from(ans == instance.answer),
                    step_flags: flags,
                    first_error_step,
                    parsed: true,
                };
            }
            _ => {
                let is_body = vocab.digit_value(t).is_some() || t == Vocabulary::PLUS || t == Vocabulary::TIMES;
                if !is_body {
                    return unparseable;
                }
                if seg_len < 4 {
                    seg[seg_len] = t;
                    seg_len += 1;
                } else {
                    overflow = true;
                }
            }
        }
    }
    // cut off before EOS: completed steps still count for step metrics
    let first_error_step = flags.iter().position(|f| !f);
    VerifierResult {
        reward: 0,
        step_flags: flags,
        first_error_step,
        parsed: true,
    }
}

/// Serializes an instance set, one instance per line.
pub fn write_instances(instances: &[TaskInstance]) -> String {
    let mut out = String::from(INSTANCE_HEADER);
    out.push('\n');
    for inst in instances {
        let vocab = inst.vocabulary();
        let operands: Vec<String> = inst.operands.iter().map(u8::to_string).collect();
        let ops: String = inst.ops.iter().map(|o| o.symbol()).collect();
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            inst.id,
            operands.join(","),
            ops,
            inst.modulus,
            vocab.render(&inst.trace)
        );
    }
    out
}

/// Parses an instance set written by [`write_instances`], re-deriving every
/// instance and checking the stored canonical trace.
pub fn read_instances(text: &str) -> Result<Vec<TaskInstance>> {
    let mut lines = text.lines();
    if lines.next() != Some(INSTANCE_HEADER) {
        return Err(Error::Validation("instance file lacks its header line".into()));
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |what: &str| Error::Validation(format!("instance line {}: {what}", n + 2));
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(bad("expected 5 tab-separated fields"));
        }
        let id: u64 = fields[0].parse().map_err(|_| bad("id"))?;
        let operands = fields[1]
            .split(',')
            .map(|s| s.parse::<u8>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad("operands"))?;
        let ops = fields[2]
            .chars()
            .map(Op::from_symbol)
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| bad("operators"))?;
        let modulus: u8 = fields[3].parse().map_err(|_| bad("modulus"))?;
        let inst = TaskInstance::from_parts(id, operands, ops, modulus).map_err(|e| bad(&e.to_string()))?;
        let vocab = inst.vocabulary();
        let trace = fields[4]
            .split(' ')
            .map(|name| vocab.parse_name(name))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| bad("trace token"))?;
        if trace != inst.trace {
            return Err(bad("stored trace differs from the canonical trace"));
        }
        out.push(inst);
    }
    Ok(out)
}

pub fn save_instances(instances: &[TaskInstance], path: &Path) -> Result<()> {
    fs::write(path, write_instances(instances)).map_err(|e| Error::io(path, e))
}

pub fn load_instances(path: &Path) -> Result<Vec<TaskInstance>> {
    read_instances(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toks(vocab: &Vocabulary, s: &str) -> Vec<Token> {
        s.split_whitespace().map(|n| vocab.parse_name(n).unwrap()).collect()
    }

    #[test]
    fn difficulty_two_has_one_step_two_phrasings() {
        let inst = TaskInstance::from_parts(0, vec![3, 5], vec![Op::Add], 7).unwrap();
        assert_eq!(inst.valid_orders.len(), 2);
        assert!(inst.valid_orders.iter().all(|o| o.len() == 1));
        assert_eq!(inst.answer, 1);
        let same = TaskInstance::from_parts(0, vec![3, 3], vec![Op::Add], 7).unwrap();
        assert!(!same.has_fork());
    }

    #[test]
    fn precedence_orders() {
        // 2 + 3 * 4: only the product may go first
        let inst = TaskInstance::from_parts(0, vec![2, 3, 4], vec![Op::Add, Op::Mul], 7).unwrap();
        assert_eq!(inst.answer, (2 + 12) % 7);
        assert!(inst.valid_orders.iter().all(|o| o[0].op == Op::Mul));
        // 2 * 3 + 4 * 5: either product first
        let two = TaskInstance::from_parts(0, vec![2, 3, 4, 5], vec![Op::Mul, Op::Add, Op::Mul], 7).unwrap();
        let firsts: BTreeSet<u8> = two.valid_orders.iter().map(|o| o[0].x.min(o[0].y)).collect();
        assert_eq!(firsts.len(), 2);
        assert!(two.valid_orders.iter().all(|o| o.last().unwrap().value == two.answer));
        // 1 + 2 + 4: either sum first, each step in two phrasings
        let sums = TaskInstance::from_parts(0, vec![1, 2, 4], vec![Op::Add, Op::Add], 7).unwrap();
        assert_eq!(sums.valid_orders.len(), 8);
        // 1 + 2 + 3: (1 + 2) + 3 writes its second step only one way
        let tie = TaskInstance::from_parts(0, vec![1, 2, 3], vec![Op::Add, Op::Add], 7).unwrap();
        assert_eq!(tie.valid_orders.len(), 6);
    }

    #[test]
    fn generated_instances_fork() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for d in 2..=4 {
            for i in 0..200 {
                let inst = generate_instance(&mut rng, d, 7, i).unwrap();
                assert!(inst.has_fork());
                assert!(inst.answer < 7);
                assert_eq!(verify(&inst, &inst.trace).reward, 1);
            }
        }
        assert!(generate_instance(&mut rng, 5, 7, 0).is_err());
    }

    #[test]
    fn trace_self_verifies() {
        let inst = TaskInstance::from_parts(0, vec![2, 3, 4], vec![Op::Add, Op::Mul], 7).unwrap();
        let r = verify(&inst, &inst.trace);
        assert_eq!(r.reward, 1);
        assert_eq!(r.step_flags, vec![true, true]);
        assert_eq!(r.first_error_step, None);
    }

    #[test]
    fn wrong_answer_and_revision() {
        let v = Vocabulary::new(5).unwrap();
        // 1 + 2 * 3 mod 5 = 7 mod 5 = 2
        let inst = TaskInstance::from_parts(0, vec![1, 2, 3], vec![Op::Add, Op::Mul], 5).unwrap();
        assert_eq!(inst.answer, 2);
        let wrong = toks(&v, "2 * 3 1 ; 1 + 1 2 ; 3 <eos>");
        assert_eq!(verify(&inst, &wrong).reward, 0);

        let revised = toks(&v, "2 * 3 4 <wait> 2 * 3 1 ; 1 + 1 2 ; 2 <eos>");
        let r = verify(&inst, &revised);
        assert_eq!(r.reward, 1);
        assert_eq!(r.step_flags, vec![true, true]);

        let committed = toks(&v, "2 * 3 4 ; 2 * 3 1 ; 1 + 1 2 ; 2 <eos>");
        let r = verify(&inst, &committed);
        assert_eq!(r.reward, 1);
        assert_eq!(r.step_flags, vec![false, true, true]);
        assert_eq!(r.first_error_step, Some(0));

        // 1 + 2 cannot go before the product
        let order = toks(&v, "1 + 2 3 ; 2 <eos>");
        assert_eq!(verify(&inst, &order).step_flags, vec![false]);
    }

    #[test]
    fn unparseable_and_truncated() {
        let v = Vocabulary::new(5).unwrap();
        let inst = TaskInstance::from_parts(0, vec![1, 2], vec![Op::Add], 5).unwrap();
        for bad in [
            "1 + 2 ; 3 <eos>",
            "; 3 <eos>",
            "3 3 <eos>",
            "<eos>",
            "q+ 3 <eos>",
            "1 + 2 3 3 ; 3 <eos>",
            "3 <eos> 3",
        ] {
            let r = verify(&inst, &toks(&v, bad));
            assert_eq!(r, VerifierResult::default(), "{bad}");
        }
        let cut = verify(&inst, &toks(&v, "1 + 2 3 ; 3"));
        assert_eq!(cut.reward, 0);
        assert_eq!(cut.step_flags, vec![true]);
        assert_eq!(verify(&inst, &toks(&v, "<wait> 3 <eos>")).reward, 1);
        assert_eq!(verify(&inst, &toks(&v, "1 + <wait> 3 <eos>")).reward, 1);
    }

    #[test]
    fn slipped_solutions_verify() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inst = generate_instance(&mut rng, 3, 7, 0).unwrap();
        for order in 0..inst.valid_orders.len() {
            let toks = inst.solution_tokens(order, 0.5, &mut rng);
            let r = verify(&inst, &toks);
            assert_eq!(r.reward, 1);
            assert!(r.step_flags.iter().all(|&f| f));
        }
    }

    #[test]
    fn privileged_context_is_answer() {
        let a = TaskInstance::from_parts(0, vec![1, 2], vec![Op::Add], 7).unwrap();
        let b = TaskInstance::from_parts(1, vec![2, 1], vec![Op::Add], 7).unwrap();
        assert_eq!(privileged_context(&a), a.vocabulary().digit(3));
        assert_eq!(privileged_context(&a), privileged_context(&b));
        assert!(a.prompt().iter().all(|&t| t != Vocabulary::PRIV_SEP));
    }

    #[test]
    fn instance_file_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let set: Vec<_> = (0..20)
            .map(|i| generate_instance(&mut rng, 2 + (i % 3) as usize, 7, i).unwrap())
            .collect();
        let back = read_instances(&write_instances(&set)).unwrap();
        assert_eq!(back, set);
        assert!(read_instances("garbage").is_err());
    }
}
