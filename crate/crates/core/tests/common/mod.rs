#![allow(dead_code)]

use std::path::{Path, PathBuf};

use triage_core::harness::RunConfig;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

/// The golden config with its output redirected to `out`.
pub fn golden_config(out: &Path, parallelism: usize) -> RunConfig {
    let mut config = RunConfig::load(&fixture("golden_run.toml")).unwrap();
    config.output_dir = out.to_path_buf();
    config.parallelism = parallelism;
    config
}

pub fn golden_digest() -> String {
    std::fs::read_to_string(fixture("golden_digest.txt")).unwrap().trim().to_string()
}

pub mod oracle {
    //! Independent reference implementations used to cross-check the library.

    /// Counts for (discordance, under, over, sig_under, sig_over), each
    /// numerator tallied by its own literal predicate.
    pub fn triage_counts(truth: &[u8], pred: &[u8]) -> [u64; 5] {
        let pairs: Vec<(u8, u8)> = truth.iter().copied().zip(pred.iter().copied()).collect();
        let count = |f: &dyn Fn(u8, u8) -> bool| pairs.iter().filter(|(t, p)| f(*t, *p)).count() as u64;
        [
            count(&|t, p| t != p),
            count(&|t, p| p > t),
            count(&|t, p| p < t),
            count(&|t, p| t == 2 && [3, 4, 5].contains(&p)),
            count(&|t, p| [3, 4, 5].contains(&t) && [1, 2].contains(&p)),
        ]
    }

    /// Most common vote; the smallest level among those tied for most.
    pub fn majority(votes: &[u8]) -> u8 {
        let best = (1..=5u8).map(|l| votes.iter().filter(|&&v| v == l).count()).max().unwrap();
        (1..=5u8).find(|&l| votes.iter().filter(|&&v| v == l).count() == best).unwrap()
    }

    fn words(text: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut cur = String::new();
        for ch in text.chars() {
            if ch.is_alphanumeric() {
                cur.extend(ch.to_lowercase());
            } else if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
        out
    }

    /// Okapi BM25 (k1 1.2, b 0.75) recomputed from scratch for every pair,
    /// ranked by score then id.
    pub fn bm25_rank(corpus: &[(u32, String)], query: &str) -> Vec<(u32, f64)> {
        let docs: Vec<Vec<String>> = corpus.iter().map(|(_, t)| words(t)).collect();
        let n = docs.len() as f64;
        let avg = docs.iter().map(|d| d.len()).sum::<usize>() as f64 / n;
        let mut q = words(query);
        q.sort();
        q.dedup();
        let mut scored: Vec<(u32, f64)> = corpus
            .iter()
            .zip(&docs)
            .map(|((id, _), doc)| {
                let mut s = 0.0;
                for term in &q {
                    let tf = doc.iter().filter(|w| *w == term).count() as f64;
                    if tf == 0.0 {
                        continue;
                    }
                    let df = docs.iter().filter(|d| d.contains(term)).count() as f64;
                    let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
                    s += idf * tf * 2.2 / (tf + 1.2 * (0.25 + 0.75 * doc.len() as f64 / avg));
                }
                (*id, s)
            })
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        scored
    }
}

pub mod gen {
    use proptest::prelude::*;
    use triage_core::domain::{esi_from_int, TriageEncounter};

    pub fn text() -> impl Strategy<Value = String> {
        "[ -~]{0,40}"
    }

    pub fn encounter() -> impl Strategy<Value = TriageEncounter> {
        (
            "[A-Za-z0-9]{1,8}",
            0u32..216,
            (text(), text(), text()),
            proptest::option::of(text()),
            text(),
            text(),
            1i64..=5,
        )
            .prop_map(|(id, age, (cc, vit, exam), pivot, pmh, note, esi)| TriageEncounter {
                id,
                age_months: age,
                chief_complaint: cc,
                vital_signs: vit,
                physical_exam: exam,
                pivot_assessment: pivot,
                pmh,
                triage_note: note,
                nurse_esi: Some(esi_from_int(esi).unwrap()),
            })
    }
}
