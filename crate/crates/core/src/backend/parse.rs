//! Extraction of an ESI level from free model text.

use thiserror::Error;

use crate::domain::{esi_from_int, EsiLevel};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("no ESI level found in model output: {excerpt:?}")]
pub struct ParseFailure {
    pub excerpt: String,
}

const KEYWORDS: [&str; 2] = ["esi", "level"];
const WINDOW: usize = 10;

fn level_of(c: char) -> Option<EsiLevel> {
    c.to_digit(10)
        .filter(|d| (1..=5).contains(d))
        .and_then(|d| esi_from_int(d as i64).ok())
}

/// First digit 1-5 within ten characters after a case-insensitive "ESI" or
/// "level" (the keyword must start a word). Failing that, the first
/// standalone digit 1-5 in the text.
pub fn parse_esi(text: &str) -> Result<EsiLevel, ParseFailure> {
    let chars: Vec<char> = text.chars().collect();
    let lower: Vec<char> = chars.iter().map(|c| c.to_ascii_lowercase()).collect();

    let mut hits: Vec<usize> = Vec::new();
    for kw in KEYWORDS {
        let kw: Vec<char> = kw.chars().collect();
        for start in 0..lower.len().saturating_sub(kw.len() - 1) {
            let word_start = start == 0 || !lower[start - 1].is_alphabetic();
            if word_start && lower[start..start + kw.len()] == kw[..] {
                hits.push(start + kw.len());
            }
        }
    }
    hits.sort_unstable();
    for end in hits {
        if let Some(level) = chars[end..].iter().take(WINDOW).find_map(|&c| level_of(c)) {
            return Ok(level);
        }
    }

    for (i, &c) in chars.iter().enumerate() {
        let Some(level) = level_of(c) else { continue };
        let prev = i.checked_sub(1).map(|j| chars[j]);
        let prev2 = i.checked_sub(2).map(|j| chars[j]);
        let next = chars.get(i + 1).copied();
        let next2 = chars.get(i + 2).copied();
        let attached_before = match prev {
            Some(p) if p.is_alphanumeric() || p == '/' => true,
            Some('.') | Some(',') => prev2.is_some_and(|q| q.is_ascii_digit()),
            _ => false,
        };
        let attached_after = match next {
            Some(n) if n.is_alphanumeric() || matches!(n, '%' | '/' | '°') => true,
            Some('.') | Some(',') => next2.is_some_and(|q| q.is_ascii_digit()),
            _ => false,
        };
        if !attached_before && !attached_after {
            return Ok(level);
        }
    }

    Err(ParseFailure {
        excerpt: chars.iter().take(80).collect(),
    })
}
