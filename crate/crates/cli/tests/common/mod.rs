#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mogrifier::numerics::Rng;

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mogrifier"))
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Sentences over a synthetic lexicon in character-level PTB layout: one
/// sentence per line, characters separated by spaces, `_` between words.
///
/// Words follow a Zipf-like unigram law and each word prefers a handful of
/// successors, so both spelling and word order carry structure.
pub fn char_ptb_text(sentences: usize, seed: u64) -> String {
    let mut rng = Rng::new(seed);
    let letters = b"abcdefghijklmnopqrstuvwxyz";
    let lexicon: Vec<Vec<u8>> = (0..300)
        .map(|_| {
            let len = 2 + rng.below(6) as usize;
            (0..len).map(|_| letters[rng.below(26) as usize]).collect()
        })
        .collect();
    let successors: Vec<Vec<usize>> = (0..lexicon.len()).map(|_| (0..4).map(|_| zipf(&mut rng, lexicon.len())).collect()).collect();
    let mut out = String::new();
    for _ in 0..sentences {
        let words = 4 + rng.below(12) as usize;
        let mut w = zipf(&mut rng, lexicon.len());
        let mut chars: Vec<String> = Vec::new();
        for i in 0..words {
            if i > 0 {
                chars.push("_".to_string());
                w = if rng.bernoulli(0.7) { successors[w][rng.below(4) as usize] } else { zipf(&mut rng, lexicon.len()) };
            }
            chars.extend(lexicon[w].iter().map(|&c| (c as char).to_string()));
        }
        out.push_str(&chars.join(" "));
        out.push('\n');
    }
    out
}

fn zipf(rng: &mut Rng, n: usize) -> usize {
    // Inverse-CDF draw from p(k) ∝ 1/(k+1) using the harmonic approximation.
    let h = (n as f64 + 1.0).ln();
    let k = ((rng.uniform() * h).exp() - 1.0).floor() as usize;
    k.min(n - 1)
}

/// Writes train/valid/test files in `dir` and returns their paths.
pub fn write_splits(dir: &Path, train: usize, eval: usize, seed: u64) -> [PathBuf; 3] {
    let text = char_ptb_text(train + 2 * eval, seed);
    let lines: Vec<&str> = text.lines().collect();
    let parts = [&lines[..train], &lines[train..train + eval], &lines[train + eval..]];
    let names = ["ptb.char.train.txt", "ptb.char.valid.txt", "ptb.char.test.txt"];
    let mut paths = names.map(|n| dir.join(n));
    for (p, part) in paths.iter_mut().zip(parts) {
        std::fs::write(&p, part.join("\n") + "\n").unwrap();
    }
    paths
}
