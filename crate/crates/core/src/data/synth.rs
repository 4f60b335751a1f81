//! Seeded multi-domain text generator used as the default corpus.
//!
//! Documents are drawn from a handful of styles (prose over an invented
//! lexicon, source code, arithmetic, tabular records, dialogue) so that
//! different experts have distinct structure to specialise on.

use crate::numeric::Rng;

const ONSETS: [&str; 16] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "tr"];
const NUCLEI: [&str; 8] = ["a", "e", "i", "o", "u", "ai", "ou", "ea"];
const CODAS: [&str; 8] = ["", "", "n", "r", "s", "l", "th", "x"];
const KEYWORDS: [&str; 8] = ["let", "if", "return", "while", "for", "match", "else", "fn"];
const OPS: [&str; 5] = ["+", "-", "*", "^", "%"];
const SPEAKERS: [&str; 4] = ["ANA", "BEN", "CHO", "DEV"];

struct Lexicon {
    words: Vec<String>,
    /// Preferred successors of each word.
    next: Vec<Vec<usize>>,
}

impl Lexicon {
    fn new(rng: &mut Rng, size: usize) -> Lexicon {
        let mut words = Vec::with_capacity(size);
        while words.len() < size {
            let syll = 1 + rng.below(3);
            let mut w = String::new();
            for _ in 0..syll {
                w.push_str(ONSETS[rng.below(ONSETS.len())]);
                w.push_str(NUCLEI[rng.below(NUCLEI.len())]);
                w.push_str(CODAS[rng.below(CODAS.len())]);
            }
            if !words.contains(&w) {
                words.push(w);
            }
        }
        let next = (0..size).map(|_| (0..6).map(|_| zipf(rng, size)).collect()).collect();
        Lexicon { words, next }
    }
}

/// Index in `0..n` with roughly Zipfian weights.
fn zipf(rng: &mut Rng, n: usize) -> usize {
    let u = rng.uniform();
    (((n as f64 + 1.0).powf(u) - 1.0) as usize).min(n - 1)
}

fn prose(rng: &mut Rng, lex: &Lexicon, out: &mut String) {
    let sentences = 2 + rng.below(5);
    for _ in 0..sentences {
        let len = 4 + rng.below(10);
        let mut w = zipf(rng, lex.words.len());
        for i in 0..len {
            let word = &lex.words[w];
            if i == 0 {
                let mut c = word.chars();
                let first = c.next().expect("non-empty word").to_ascii_uppercase();
                out.push(first);
                out.push_str(c.as_str());
            } else {
                out.push_str(word);
            }
            if i + 1 < len {
                out.push(if rng.below(8) == 0 { ',' } else { ' ' });
                if out.ends_with(',') {
                    out.push(' ');
                }
            }
            w = if rng.below(4) == 0 {
                zipf(rng, lex.words.len())
            } else {
                lex.next[w][rng.below(lex.next[w].len())]
            };
        }
        out.push_str(if rng.below(6) == 0 { "? " } else { ". " });
    }
    out.push('\n');
}

fn ident(rng: &mut Rng, lex: &Lexicon) -> String {
    let a = &lex.words[zipf(rng, 64)];
    if rng.below(2) == 0 {
        a.clone()
    } else {
        format!("{a}_{}", lex.words[zipf(rng, 64)])
    }
}

fn code(rng: &mut Rng, lex: &Lexicon, out: &mut String) {
    let name = ident(rng, lex);
    let arg = ident(rng, lex);
    out.push_str(&format!("fn {name}({arg}: i32) -> i32 {{\n"));
    let lines = 2 + rng.below(5);
    let mut vars = vec![arg];
    for _ in 0..lines {
        let v = ident(rng, lex);
        let a = vars[rng.below(vars.len())].clone();
        let k = rng.below(100);
        match rng.below(3) {
            0 => out.push_str(&format!("    let {v} = {a} {} {k};\n", OPS[rng.below(3)])),
            1 => out.push_str(&format!("    if {a} > {k} {{ {a} = {a} - 1; }}\n")),
            _ => out.push_str(&format!("    let {v} = {}({a});\n", ident(rng, lex))),
        }
        vars.push(v);
    }
    out.push_str(&format!("    {} {}\n}}\n", KEYWORDS[2], vars[vars.len() - 1]));
}

fn arithmetic(rng: &mut Rng, out: &mut String) {
    let lines = 3 + rng.below(8);
    for _ in 0..lines {
        let a = rng.below(1000) as i64;
        let b = rng.below(1000) as i64;
        let (op, c) = match rng.below(3) {
            0 => ("+", a + b),
            1 => ("-", a - b),
            _ => ("*", (a % 32) * (b % 32)),
        };
        let (a, b) = if op == "*" { (a % 32, b % 32) } else { (a, b) };
        out.push_str(&format!("{a}{op}{b}={c}\n"));
    }
}

fn records(rng: &mut Rng, lex: &Lexicon, out: &mut String) {
    out.push_str("id,name,city,score\n");
    let rows = 3 + rng.below(8);
    let base = rng.below(9000) + 1000;
    for i in 0..rows {
        let score = rng.below(101);
        out.push_str(&format!(
            "{},{},{},{}.{}\n",
            base + i,
            lex.words[zipf(rng, lex.words.len())],
            lex.words[zipf(rng, 32)].to_uppercase(),
            score,
            rng.below(10)
        ));
    }
}

fn dialogue(rng: &mut Rng, lex: &Lexicon, out: &mut String) {
    let turns = 2 + rng.below(6);
    for _ in 0..turns {
        out.push_str(SPEAKERS[rng.below(SPEAKERS.len())]);
        out.push_str(": ");
        let len = 2 + rng.below(7);
        for j in 0..len {
            out.push_str(&lex.words[zipf(rng, 200)]);
            out.push(if j + 1 < len { ' ' } else { '!' });
        }
        out.push('\n');
    }
}

/// At least `bytes` bytes of text, identical for identical `(bytes, seed)`.
pub fn generate(bytes: usize, seed: u64) -> Vec<u8> {
    let mut rng = Rng::new(seed);
    let lex = Lexicon::new(&mut rng.fork(1), 1500);
    let mut text = String::with_capacity(bytes + 1024);
    while text.len() < bytes {
        match rng.below(5) {
            0 | 1 => prose(&mut rng, &lex, &mut text),
            2 => code(&mut rng, &lex, &mut text),
            3 => arithmetic(&mut rng, &mut text),
            _ => {
                if rng.below(2) == 0 {
                    records(&mut rng, &lex, &mut text)
                } else {
                    dialogue(&mut rng, &lex, &mut text)
                }
            }
        }
        text.push('\n');
    }
    text.truncate(bytes);
    text.into_bytes()
}
