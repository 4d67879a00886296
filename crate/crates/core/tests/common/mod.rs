#![allow(dead_code)]

use std::time::{Duration, Instant};

use dasd_core::credit::*;
use dasd_core::metrics::pass_at_k;
use dasd_core::policy::{logprob_grad, PolicyParams, Token, Vocabulary};
use dasd_core::rng;
use dasd_core::stats;
use dasd_core::taskenv::{verify, Op, TaskInstance};
use rand::seq::index::sample;
use rand::Rng;
use regex::Regex;

/// Outcome of one acceptance-style check.
#[derive(Debug, Clone)]
pub struct Check {
    pub pass: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl Check {
    pub fn assert(&self) {
        assert!(self.pass, "{}", self.detail);
    }
}

pub fn timed(f: impl FnOnce() -> (bool, String)) -> Check {
    let t = Instant::now();
    let (pass, detail) = f();
    Check {
        pass,
        detail,
        elapsed: t.elapsed(),
    }
}

pub fn random_dist<R: Rng>(rng: &mut R, len: usize, spread: f64) -> CategoricalDist {
    let z: Vec<f64> = (0..len).map(|_| rng.random_range(-spread..spread)).collect();
    CategoricalDist::from_logits(&z)
}

/// Score-form Monte Carlo estimate of the per-token policy gradient against
/// the analytic `−A ∇log p(o*)`-in-expectation plus `βω ∇KL(p‖q)`.
///
/// Tokens are drawn by stratified inverse-CDF sampling (one uniform per
/// stratum of width 1/N).
pub fn prop1_case(seed: u64, vocab: usize, samples: usize) -> (f64, usize) {
    let mut r = rng::stream(seed, &[0]);
    let p = random_dist(&mut r, vocab, 2.0);
    let q = random_dist(&mut r, vocab, 2.0);
    let a: f64 = r.random_range(-1.0..1.0);
    let beta: f64 = r.random_range(0.1..2.0);
    let omega: f64 = r.random_range(-1.0..1.0);
    let mut mc = vec![0.0; vocab];
    for i in 0..samples {
        let u = (i as f64 + r.random::<f64>()) / samples as f64;
        let o = p.sample_index(u);
        let delta = q.log_prob(o) - p.log_prob(o);
        // descent direction: −(A + βωδ) ∇log p(o)
        let c = -(a + beta * omega * delta);
        for (j, g) in mc.iter_mut().enumerate() {
            let e = if j == o { 1.0 } else { 0.0 };
            *g += c * (e - p.prob(j));
        }
    }
    for g in &mut mc {
        *g /= samples as f64;
    }
    // E_p[∇log p] = 0, so only the KL term survives in expectation
    let analytic: Vec<f64> = kl_logit_gradient(&p, &q)
        .unwrap()
        .iter()
        .map(|g| beta * omega * g)
        .collect();
    let mut worst: f64 = 0.0;
    let mut compared = 0;
    for (m, t) in mc.iter().zip(&analytic) {
        if t.abs() > 1e-3 {
            worst = worst.max((m - t).abs() / t.abs());
            compared += 1;
        }
    }
    (worst, compared)
}

pub fn prop1_check(cases: u64, samples: usize) -> Check {
    timed(|| {
        let mut worst: f64 = 0.0;
        let mut compared = 0;
        for seed in 0..cases {
            let vocab = 2 + (seed as usize % 19);
            let (w, c) = prop1_case(seed, vocab, samples);
            worst = worst.max(w);
            compared += c;
        }
        (
            worst <= 0.01,
            format!(
                "{cases} cases, {samples} samples each, {compared} components > 1e-3, worst relative error {worst:.2e}"
            ),
        )
    })
}

fn entropy_oracle(p: &[f64]) -> f64 {
    let mut h = 0.0;
    for &x in p {
        if x > 0.0 {
            h -= x * x.ln();
        }
    }
    h
}

fn kl_oracle(p: &[f64], q: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        if p[i] > 0.0 {
            s += p[i] * p[i].ln() - p[i] * q[i].ln();
        }
    }
    s
}

fn tv_oracle(p: &[f64], q: &[f64]) -> f64 {
    // max over all events A of |p(A) − q(A)|
    let n = p.len();
    let mut best: f64 = 0.0;
    for mask in 0u32..(1 << n) {
        let d: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| p[i] - q[i]).sum();
        best = best.max(d.abs());
    }
    best
}

/// Order statistic by counting: the element with exactly `r` smaller-or-tied
/// predecessors in a stable order.
fn order_stat(v: &[f64], r: usize) -> f64 {
    for (i, &x) in v.iter().enumerate() {
        let below = v
            .iter()
            .enumerate()
            .filter(|&(j, &y)| y < x || (y == x && j < i))
            .count();
        if below == r {
            return x;
        }
    }
    unreachable!()
}

pub fn quantile_oracle(v: &[f64], q: f64) -> f64 {
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let a = order_stat(v, lo);
    let b = order_stat(v, hi);
    a + (pos - lo as f64) * (b - a)
}

fn mad_oracle(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - m).abs()).sum::<f64>() / n
}

/// Spearman from O(n²) rank counting: rank = 1 + #smaller + #ties/2.
pub fn spearman_oracle(x: &[f64], y: &[f64]) -> Option<f64> {
    let rank = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|&a| {
                let less = v.iter().filter(|&&b| b < a).count() as f64;
                let eq = v.iter().filter(|&&b| b == a).count() as f64;
                less + (eq + 1.0) / 2.0
            })
            .collect()
    };
    let (rx, ry) = (rank(x), rank(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        None
    } else {
        Some(cov / (vx * vy).sqrt())
    }
}

/// Fraction of random `k`-subsets of `n` items (the first `c` correct) that
/// contain a correct item.
pub fn pass_mc<R: Rng>(rng: &mut R, n: usize, c: usize, k: usize, draws: usize) -> f64 {
    let mut hits = 0;
    for _ in 0..draws {
        if sample(rng, n, k).iter().any(|i| i < c) {
            hits += 1;
        }
    }
    hits as f64 / draws as f64
}

pub struct KernelReport {
    pub exact_worst: f64,
    pub spearman_worst: f64,
    pub quantile_worst: f64,
    pub pass_triples: usize,
    pub pass_worst_z: f64,
    pub pass_over_3se: usize,
}

/// Every Monte Carlo pass@k estimate must lie within `z_limit` standard errors.
pub fn kernel_check(cases: usize, pass_draws: usize, max_n: usize, z_limit: f64) -> Check {
    let mut r = rng::stream(7, &[1]);
    let mut rep = KernelReport {
        exact_worst: 0.0,
        spearman_worst: 0.0,
        quantile_worst: 0.0,
        pass_triples: 0,
        pass_worst_z: 0.0,
        pass_over_3se: 0,
    };
    timed(|| {
        for _ in 0..cases {
            let len = r.random_range(2..=12);
            let p = random_dist(&mut r, len, 4.0);
            let q = random_dist(&mut r, len, 4.0);
            let errs = [
                (token_entropy(&p).unwrap() - entropy_oracle(p.probs())).abs(),
                (kl_divergence(&p, &q).unwrap() - kl_oracle(p.probs(), q.probs())).abs(),
                (tv_distance(&p, &q).unwrap() - tv_oracle(p.probs(), q.probs())).abs(),
            ];
            rep.exact_worst = errs.into_iter().fold(rep.exact_worst, f64::max);

            let n = r.random_range(2..=200);
            // coarse values force ties
            let x: Vec<f64> = (0..n)
                .map(|_| (r.random_range(0.0..10.0f64) * 4.0).round() / 4.0)
                .collect();
            let y: Vec<f64> = x.iter().map(|v| v * 0.5 + r.random_range(-2.0..2.0)).collect();
            match (stats::spearman(&x, &y).unwrap(), spearman_oracle(&x, &y)) {
                (Some(a), Some(b)) => rep.spearman_worst = rep.spearman_worst.max((a - b).abs()),
                (None, None) => {}
                _ => rep.spearman_worst = f64::INFINITY,
            }
            let lvl: f64 = r.random();
            let errs = [
                (stats::quantile(&x, lvl).unwrap() - quantile_oracle(&x, lvl)).abs(),
                (stats::median(&x).unwrap() - quantile_oracle(&x, 0.5)).abs(),
                (stats::mean_abs_dev(&x).unwrap() - mad_oracle(&x)).abs(),
            ];
            rep.quantile_worst = errs.into_iter().fold(rep.quantile_worst, f64::max);
        }
        for n in 1..=max_n {
            for c in 0..=n {
                for k in 1..=n {
                    let exact = pass_at_k(n, c, k).unwrap();
                    if c == 0 || n - c < k {
                        // deterministic cells: no subset misses / every subset hits
                        let expected = if c == 0 { 0.0 } else { 1.0 };
                        if (exact - expected).abs() > 1e-12 {
                            rep.pass_worst_z = f64::INFINITY;
                        }
                        continue;
                    }
                    let mc = pass_mc(&mut r, n, c, k, pass_draws);
                    let se = (exact * (1.0 - exact) / pass_draws as f64).sqrt();
                    let z = (mc - exact).abs() / se;
                    rep.pass_triples += 1;
                    rep.pass_worst_z = rep.pass_worst_z.max(z);
                    if z > z_limit {
                        rep.pass_over_3se += 1;
                    }
                }
            }
        }
        let pass = rep.exact_worst <= 1e-9
            && rep.spearman_worst <= 1e-12
            && rep.quantile_worst <= 1e-9
            && rep.pass_over_3se == 0;
        (
            pass,
            format!(
                "entropy/KL/TV worst {:.1e}, spearman worst {:.1e}, quantile/median/MAD worst {:.1e}, \
                 pass@k {} MC triples: worst |z| {:.2}, {} beyond {z_limit} SE",
                rep.exact_worst,
                rep.spearman_worst,
                rep.quantile_worst,
                rep.pass_triples,
                rep.pass_worst_z,
                rep.pass_over_3se
            ),
        )
    })
}

/// Analytic score gradients vs central differences on random rows.
pub fn gradient_check(cases: u64) -> Check {
    timed(|| {
        let mut worst: f64 = 0.0;
        for case in 0..cases {
            let mut r = rng::stream(11, &[case]);
            let vocab = r.random_range(3..=20);
            let window = r.random_range(1..=4);
            let mut params = PolicyParams::new(vocab, window).unwrap();
            let prefix: Vec<Token> = (0..r.random_range(0..6))
                .map(|_| Token(r.random_range(0..vocab as u8)))
                .collect();
            let privileged = r.random::<bool>().then(|| Token(r.random_range(0..vocab as u8)));
            let key = params.key(&prefix, privileged).unwrap();
            let base: Vec<f64> = (0..vocab).map(|_| r.random_range(-3.0..3.0)).collect();
            params.set_row(key, base.clone()).unwrap();
            if privileged.is_some() {
                // privileged offsets sit on top of a student row
                let student: Vec<f64> = (0..vocab).map(|_| r.random_range(-3.0..3.0)).collect();
                params.set_row(key.student(), student).unwrap();
            }
            let token = Token(r.random_range(0..vocab as u8));
            let g = logprob_grad(&params, &prefix, privileged, token).unwrap();
            let h = 1e-5;
            for j in 0..vocab {
                let eval = |d: f64| {
                    let mut p = params.clone();
                    let mut row = base.clone();
                    row[j] += d;
                    p.set_row(key, row).unwrap();
                    p.next_distribution(&prefix, privileged)
                        .unwrap()
                        .log_prob(token.index())
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let err = (g.values[j] - fd).abs() / fd.abs().max(1e-3);
                worst = worst.max(err);
            }
        }
        (
            worst <= 1e-6,
            format!("{cases} random cases, worst relative error {worst:.2e}"),
        )
    })
}

/// Fuzzed trajectories through the default routing.
pub fn routing_fuzz_check(trajectories: u64) -> Check {
    timed(|| {
        let mut tokens = 0usize;
        let mut violations = Vec::new();
        let cfg = RoutingConfig::default();
        for t in 0..trajectories {
            let mut r = rng::stream(13, &[t]);
            let n = r.random_range(1..=48);
            let h: Vec<f64> = (0..n)
                .map(|_| {
                    if r.random::<f64>() < 0.2 {
                        0.0
                    } else {
                        r.random_range(0.0..2.8)
                    }
                })
                .collect();
            let d: Vec<f64> = (0..n).map(|_| r.random_range(-6.0..6.0) * r.random::<f64>()).collect();
            let rho = r.random_range(0.05..0.95);
            let a: f64 = r.random_range(-2.5..2.5);
            let beta: f64 = r.random_range(0.0..2.0);
            let s = trajectory_scales(&h, &d, rho).unwrap();
            for (&ht, &dt) in h.iter().zip(&d) {
                tokens += 1;
                let c = routing_coefficient(ht, &s, dt, &cfg, &RoutingAux::default())
                    .unwrap()
                    .with_advantage(a, beta);
                let mirrored = routing_coefficient(ht, &s, -dt, &cfg, &RoutingAux::default()).unwrap();
                let ok = (-1.0..=1.0).contains(&c.omega)
                    && (0.0..=1.0).contains(&c.gate)
                    && !(ht < s.tau_rho && c.omega < 0.0)
                    && !(ht > s.tau_rho && c.omega > 0.0)
                    && mirrored.gate == c.gate
                    && c.a_hat == a + beta * c.omega * c.delta_bar;
                if !ok && violations.len() < 3 {
                    violations.push(format!("traj {t}: H {ht} δ {dt} -> {c:?}"));
                }
            }
        }
        (
            violations.is_empty(),
            format!("{trajectories} trajectories, {tokens} tokens, violations: {violations:?}"),
        )
    })
}

pub fn group_advantage_check(groups: u64) -> Check {
    timed(|| {
        let (mut worst_mean, mut worst_std): (f64, f64) = (0.0, 0.0);
        let mut degenerate_ok = true;
        let mut checked = 0;
        for g in 0..groups {
            let mut r = rng::stream(17, &[g]);
            let n = r.random_range(2..=32);
            let binary = r.random::<bool>();
            let rewards: Vec<f64> = (0..n)
                .map(|_| {
                    if binary {
                        f64::from(r.random::<bool>() as u8)
                    } else {
                        r.random_range(-3.0..3.0)
                    }
                })
                .collect();
            let adv = group_relative_advantage(&rewards, 0.0).unwrap();
            if rewards.iter().all(|&x| x == rewards[0]) {
                degenerate_ok &= adv.advantages.iter().all(|&a| a == 0.0);
                continue;
            }
            checked += 1;
            let m = adv.advantages.iter().sum::<f64>() / n as f64;
            let sd = (adv.advantages.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n as f64).sqrt();
            worst_mean = worst_mean.max(m.abs());
            worst_std = worst_std.max((sd - 1.0).abs());
        }
        let equal = group_relative_advantage(&[0.7; 8], 1e-6).unwrap();
        degenerate_ok &= equal.advantages.iter().all(|&a| a == 0.0);
        (
            worst_mean <= 1e-9 && worst_std <= 1e-6 && degenerate_ok,
            format!("{checked} groups: worst |mean| {worst_mean:.1e}, worst |std−1| {worst_std:.1e}; all-equal groups zero: {degenerate_ok}"),
        )
    })
}

fn token_char(t: Token) -> char {
    (b'a' + t.0) as char
}

/// Reference reward: a regular expression over the token string for the
/// grammar, plus a comparison of the final digit with the answer.
pub struct RewardOracle {
    grammar: Regex,
}

impl RewardOracle {
    pub fn new(vocab: &Vocabulary) -> Self {
        let digits: String = (0..vocab.modulus()).map(|v| token_char(vocab.digit(v))).collect();
        let d = format!("[{digits}]");
        let o = format!("[{}{}]", token_char(Vocabulary::PLUS), token_char(Vocabulary::TIMES));
        let body = format!(
            "[{digits}{}{}]",
            token_char(Vocabulary::PLUS),
            token_char(Vocabulary::TIMES)
        );
        let m = token_char(Vocabulary::MARKER);
        let s = token_char(Vocabulary::SEP);
        let e = token_char(Vocabulary::EOS);
        let reset = format!("(?:{body}*{m})*");
        let pattern = format!("^(?:{reset}{d}{o}{d}{d}{s})*{reset}{d}{e}$");
        Self {
            grammar: Regex::new(&pattern).unwrap(),
        }
    }

    pub fn reward(&self, text: &str, answer_char: char) -> u8 {
        if !self.grammar.is_match(text) {
            return 0;
        }
        let b = text.as_bytes();
        u8::from(b[b.len() - 2] as char == answer_char)
    }
}

/// Every instance with 2 or 3 operands over Z_m.
pub fn all_instances(modulus: u8) -> Vec<TaskInstance> {
    let mut out = Vec::new();
    let mut id = 0;
    for d in 2..=3usize {
        let combos = (modulus as usize).pow(d as u32);
        for code in 0..combos {
            let operands: Vec<u8> = (0..d)
                .map(|i| ((code / (modulus as usize).pow(i as u32)) % modulus as usize) as u8)
                .collect();
            for opcode in 0..(1usize << (d - 1)) {
                let ops: Vec<Op> = (0..d - 1)
                    .map(|i| if opcode >> i & 1 == 1 { Op::Mul } else { Op::Add })
                    .collect();
                out.push(TaskInstance::from_parts(id, operands.clone(), ops, modulus).unwrap());
                id += 1;
            }
        }
    }
    out
}

/// Calls `f` on every sequence over `alphabet` with length in `1..=max_len`.
pub fn for_each_sequence(alphabet: &[Token], max_len: usize, mut f: impl FnMut(&[Token])) {
    let mut seq: Vec<Token> = Vec::with_capacity(max_len);
    let mut idx: Vec<usize> = Vec::with_capacity(max_len);
    for len in 1..=max_len {
        idx.clear();
        idx.resize(len, 0);
        seq.clear();
        seq.resize(len, alphabet[0]);
        loop {
            f(&seq);
            let mut i = len;
            loop {
                if i == 0 {
                    break;
                }
                i -= 1;
                idx[i] += 1;
                if idx[i] < alphabet.len() {
                    seq[i] = alphabet[idx[i]];
                    break;
                }
                idx[i] = 0;
                seq[i] = alphabet[0];
                if i == 0 {
                    i = usize::MAX;
                    break;
                }
            }
            if i == usize::MAX {
                break;
            }
        }
    }
}

pub struct VerifierScope {
    /// Every instance is checked against every full-vocabulary sequence up
    /// to this length.
    pub full_len: usize,
    /// One instance per answer value is checked against every sequence over
    /// the output alphabet plus one prompt-only token up to this length.
    pub deep_len: usize,
}

pub fn verifier_check(modulus: u8, scope: &VerifierScope) -> Check {
    timed(|| {
        let vocab = Vocabulary::new(modulus).unwrap();
        let oracle = RewardOracle::new(&vocab);
        let instances = all_instances(modulus);
        let mut compared = 0u64;
        let mut mismatches = Vec::new();
        let mut text = String::new();
        let all: Vec<Token> = (0..vocab.size() as u8).map(Token).collect();
        let answer_chars: Vec<char> = instances.iter().map(|i| token_char(vocab.digit(i.answer))).collect();
        for_each_sequence(&all, scope.full_len, |seq| {
            text.clear();
            text.extend(seq.iter().map(|&t| token_char(t)));
            for (inst, &ac) in instances.iter().zip(&answer_chars) {
                compared += 1;
                if verify(inst, seq).reward != oracle.reward(&text, ac) && mismatches.len() < 3 {
                    mismatches.push(format!("{} on {}", vocab.render(seq), inst.describe()));
                }
            }
        });
        // one representative per answer, alternating chain lengths
        let mut reps: Vec<&TaskInstance> = Vec::new();
        for a in 0..modulus {
            let d = if a % 2 == 0 { 2 } else { 3 };
            reps.push(instances.iter().find(|i| i.answer == a && i.difficulty() == d).unwrap());
        }
        let mut deep: Vec<Token> = vec![
            Vocabulary::EOS,
            Vocabulary::MARKER,
            Vocabulary::SEP,
            Vocabulary::PLUS,
            Vocabulary::TIMES,
        ];
        deep.extend((0..modulus).map(|v| vocab.digit(v)));
        deep.push(Vocabulary::PROMPT_TIMES);
        let rep_chars: Vec<char> = reps.iter().map(|i| token_char(vocab.digit(i.answer))).collect();
        let mut rewarded = 0u64;
        for_each_sequence(&deep, scope.deep_len, |seq| {
            if seq.len() <= scope.full_len {
                return;
            }
            text.clear();
            text.extend(seq.iter().map(|&t| token_char(t)));
            let grammatical = oracle.grammar.is_match(&text);
            for (inst, &ac) in reps.iter().zip(&rep_chars) {
                compared += 1;
                let want = if grammatical {
                    u8::from(text.as_bytes()[text.len() - 2] as char == ac)
                } else {
                    0
                };
                let got = verify(inst, seq).reward;
                rewarded += u64::from(got);
                if got != want && mismatches.len() < 3 {
                    mismatches.push(format!("{} on {}", vocab.render(seq), inst.describe()));
                }
            }
        });
        (
            mismatches.is_empty(),
            format!(
                "m={modulus}: {} instances x all sequences <= {} tokens, {} instances x output-alphabet sequences <= {} tokens; \
                 {compared} comparisons ({rewarded} rewarded), mismatches: {mismatches:?}",
                instances.len(),
                scope.full_len,
                reps.len(),
                scope.deep_len
            ),
        )
    })
}
