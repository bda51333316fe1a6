//! Reverse-engineered prompt data: degrade a fine caption into a short
//! prompt and record the inverse reasoning steps.
//!
//! Text is handled as whitespace units, where a double-quoted span is one
//! unit and is never altered. Clauses are runs of units ending in `,` or
//! `;`; the first clause carries the subject and is never dropped.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Result};
use crate::text::token_count;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Category {
    General,
    Portrait,
    Text,
    ComplexText,
}

impl Category {
    pub const ALL: [Category; 4] = [Self::General, Self::Portrait, Self::Text, Self::ComplexText];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    StylisticSimplification,
    Colloquialization,
    DropLighting,
    DropTexture,
    DropLayout,
    DropBackground,
    UnderspecifyCounts,
    ShortenClauses,
}

impl Strategy {
    pub const POOL: [Strategy; 8] = [
        Self::StylisticSimplification,
        Self::Colloquialization,
        Self::DropLighting,
        Self::DropTexture,
        Self::DropLayout,
        Self::DropBackground,
        Self::UnderspecifyCounts,
        Self::ShortenClauses,
    ];

    /// Categories the strategy may be sampled for.
    pub fn applies_to(&self, c: Category) -> bool {
        use Category::*;
        match self {
            Self::StylisticSimplification | Self::Colloquialization | Self::DropBackground | Self::DropLighting => true,
            Self::DropTexture => matches!(c, General | Portrait),
            Self::DropLayout => matches!(c, General | Text),
            Self::UnderspecifyCounts => matches!(c, General),
            Self::ShortenClauses => matches!(c, General | Portrait | Text),
        }
    }

    fn attribute(&self) -> &'static str {
        match self {
            Self::StylisticSimplification => "style descriptors",
            Self::Colloquialization => "formal phrasing",
            Self::DropLighting => "lighting",
            Self::DropTexture => "texture",
            Self::DropLayout => "layout",
            Self::DropBackground => "background",
            Self::UnderspecifyCounts => "object counts",
            Self::ShortenClauses => "secondary details",
        }
    }
}

/// One applied strategy with the random draw that parameterized it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Applied {
    pub strategy: Strategy,
    pub draw: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub p_short: String,
    /// Inverse steps, last applied strategy first.
    pub cot: Vec<String>,
    pub p_fine: String,
    pub category: Category,
    /// Strategies in application order.
    pub strategies: Vec<Applied>,
}

const PORTRAIT_WORDS: [&str; 14] = ["portrait", "face", "person", "man", "woman", "boy", "girl", "child", "selfie", "headshot", "sailor", "people", "smiling", "eyes"];
const LIGHTING_WORDS: [&str; 13] = ["light", "lighting", "lit", "sunlight", "moonlight", "shadow", "shadows", "glow", "glowing", "backlit", "illuminated", "dim", "neon"];
const TEXTURE_WORDS: [&str; 12] = ["texture", "textured", "rough", "smooth", "glossy", "matte", "grainy", "velvety", "wooden", "metallic", "fabric", "weathered"];
const LAYOUT_WORDS: [&str; 12] = ["left", "right", "top", "bottom", "center", "centered", "foreground", "corner", "above", "below", "beside", "arranged"];
const BACKGROUND_WORDS: [&str; 5] = ["background", "backdrop", "behind", "scenery", "setting"];
const STYLE_WORDS: [&str; 16] = ["cinematic", "photorealistic", "hyperrealistic", "highly", "detailed", "intricate", "masterpiece", "stunning", "ultra", "8k", "4k", "dramatic", "elegant", "ornate", "exquisite", "vibrant"];
const COUNT_WORDS: [&str; 11] = ["two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven", "twelve"];
/// Formal phrase and shorter casual alternatives.
const COLLOQUIAL: [(&str, &[&str]); 6] = [
    ("in the style of", &["like"]),
    ("a photograph of", &["a photo", "a pic"]),
    ("positioned next to", &["by", "near"]),
    ("located in", &["in"]),
    ("it is", &["it's"]),
    ("there are", &["there's"]),
];

fn bare(unit: &str) -> String {
    unit.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase()
}

fn quoted(unit: &str) -> bool {
    unit.contains('"')
}

/// Whitespace units with double-quoted spans kept whole.
fn units(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut in_quote = false;
    for ch in s.chars() {
        if ch == '"' {
            in_quote = !in_quote;
        }
        if ch.is_whitespace() && !in_quote {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else {
            cur.push(ch);
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

fn clauses(s: &str) -> Vec<Vec<String>> {
    let mut out = vec![Vec::new()];
    for u in units(s) {
        let ends = !quoted(&u) && (u.ends_with(',') || u.ends_with(';')) || quoted(&u) && (u.ends_with("\",") || u.ends_with("\";"));
        out.last_mut().expect("non-empty").push(u);
        if ends {
            out.push(Vec::new());
        }
    }
    if out.last().is_some_and(|c| c.is_empty()) {
        out.pop();
    }
    out
}

fn join(clauses: &[Vec<String>]) -> String {
    let mut s = clauses.iter().flatten().cloned().collect::<Vec<_>>().join(" ");
    while s.ends_with(',') || s.ends_with(';') {
        s.pop();
    }
    s
}

fn quoted_spans(s: &str) -> Vec<String> {
    s.split('"').skip(1).step_by(2).map(|q| q.to_string()).collect()
}

/// Desk-scale rule classifier.
pub fn classify(p_fine: &str) -> Result<Category> {
    if p_fine.trim().is_empty() {
        return contract_err("classify", "empty caption");
    }
    let quotes = quoted_spans(p_fine);
    let quoted_tokens: usize = quotes.iter().map(|q| token_count(q)).sum();
    if quoted_tokens > 30 || quotes.len() >= 2 {
        return Ok(Category::ComplexText);
    }
    if !quotes.is_empty() {
        return Ok(Category::Text);
    }
    if units(p_fine).iter().any(|u| PORTRAIT_WORDS.contains(&bare(u).as_str())) {
        return Ok(Category::Portrait);
    }
    Ok(Category::General)
}

fn drop_clauses_with(s: &str, words: &[&str]) -> (String, Vec<String>) {
    let cl = clauses(s);
    let mut kept = Vec::new();
    let mut removed = Vec::new();
    for (i, c) in cl.into_iter().enumerate() {
        let hit = c.iter().any(|u| !quoted(u) && words.contains(&bare(u).as_str()));
        if i > 0 && hit && !c.iter().any(|u| quoted(u)) {
            removed.push(join(&[c]));
        } else {
            kept.push(c);
        }
    }
    (join(&kept), removed)
}

fn drop_words(s: &str, pred: impl Fn(&str) -> bool) -> (String, Vec<String>) {
    let mut out: Vec<String> = Vec::new();
    let mut removed = Vec::new();
    for u in units(s) {
        if !quoted(&u) && pred(&bare(&u)) {
            // A sentence end moves to the previous unit.
            if let Some(p) = u.chars().last().filter(|&c| c == '.') {
                if let Some(prev) = out.last_mut() {
                    if !prev.ends_with([',', ';', '.']) {
                        prev.push(p);
                    }
                }
            }
            removed.push(bare(&u));
        } else {
            out.push(u);
        }
    }
    let mut s = out.join(" ");
    while s.ends_with(',') || s.ends_with(';') {
        s.pop();
    }
    (s, removed)
}

fn colloquialize(s: &str, draw: u64) -> (String, Vec<String>) {
    let mut out = units(s);
    let mut removed = Vec::new();
    for (k, (formal, casual)) in COLLOQUIAL.iter().enumerate() {
        let pat: Vec<&str> = formal.split(' ').collect();
        let mut i = 0;
        while i + pat.len() <= out.len() {
            let window = &out[i..i + pat.len()];
            let tail_ok = window[..pat.len() - 1].iter().all(|u| !u.ends_with([',', ';', '.']));
            if tail_ok && window.iter().zip(&pat).all(|(u, p)| !quoted(u) && bare(u) == *p) {
                let punct: String = window.last().expect("non-empty").chars().rev().take_while(|c| matches!(c, ',' | ';' | '.')).collect();
                let choice = casual[((draw >> (4 * k)) % casual.len() as u64) as usize];
                let mut rep: Vec<String> = choice.split(' ').map(str::to_string).collect();
                let start_upper = window[0].starts_with(|c: char| c.is_uppercase());
                if start_upper {
                    let mut f = rep[0].chars();
                    rep[0] = f.next().map(|c| c.to_uppercase().chain(f).collect()).unwrap_or_default();
                }
                rep.last_mut().expect("non-empty").push_str(&punct);
                removed.push(formal.to_string());
                out.splice(i..i + pat.len(), rep.iter().cloned());
                i += rep.len();
            } else {
                i += 1;
            }
        }
    }
    (out.join(" "), removed)
}

fn shorten(s: &str, draw: u64) -> (String, Vec<String>) {
    let cl = clauses(s);
    let keep = 1 + (draw % 2) as usize;
    let mut kept = Vec::new();
    let mut removed = Vec::new();
    for (i, c) in cl.into_iter().enumerate() {
        // Clauses holding quoted text are always kept.
        if i >= keep && !c.iter().any(|u| quoted(u)) {
            removed.push(join(&[c]));
        } else {
            kept.push(c);
        }
    }
    (join(&kept), removed)
}

/// Applies one strategy; returns the new text and the removed pieces.
pub fn apply_strategy(s: &str, a: Applied) -> (String, Vec<String>) {
    match a.strategy {
        Strategy::StylisticSimplification => drop_words(s, |w| STYLE_WORDS.contains(&w)),
        Strategy::Colloquialization => colloquialize(s, a.draw),
        Strategy::DropLighting => drop_clauses_with(s, &LIGHTING_WORDS),
        Strategy::DropTexture => drop_clauses_with(s, &TEXTURE_WORDS),
        Strategy::DropLayout => drop_clauses_with(s, &LAYOUT_WORDS),
        Strategy::DropBackground => drop_clauses_with(s, &BACKGROUND_WORDS),
        Strategy::UnderspecifyCounts => drop_words(s, |w| COUNT_WORDS.contains(&w) || (!w.is_empty() && w.len() <= 3 && w.chars().all(|c| c.is_ascii_digit()))),
        Strategy::ShortenClauses => shorten(s, a.draw),
    }
}

/// Strategies whose target is present in `p_fine` and that apply to
/// `category`.
pub fn applicable(p_fine: &str, category: Category) -> Vec<Strategy> {
    Strategy::POOL
        .iter()
        .copied()
        .filter(|s| s.applies_to(category))
        .filter(|&s| (0..2).all(|draw| apply_strategy(p_fine, Applied { strategy: s, draw }).0 != p_fine))
        .collect()
}

/// Re-applies recorded strategies in order.
pub fn replay(p_fine: &str, strategies: &[Applied]) -> String {
    strategies.iter().fold(p_fine.to_string(), |s, &a| apply_strategy(&s, a).0)
}

fn cot_step(a: Applied, removed: &[String]) -> String {
    if removed.is_empty() {
        return format!("Check {}: nothing further to restore.", a.strategy.attribute());
    }
    let what = removed.join("; ");
    match a.strategy {
        Strategy::Colloquialization => format!("Restore formal phrasing: {what}."),
        Strategy::StylisticSimplification => format!("Reinstate style descriptors: {what}."),
        Strategy::UnderspecifyCounts => format!("Specify object counts: {what}."),
        _ => format!("Add back {} details: {what}.", a.strategy.attribute()),
    }
}

/// Degrades `p_fine`: `k ~ Binomial(|applicable|, 0.5)` strategies drawn
/// without replacement, applied in the drawn order.
pub fn degrade<R: Rng>(p_fine: &str, category: Category, rng: &mut R) -> Result<Triplet> {
    if p_fine.trim().is_empty() {
        return contract_err("degrade", "empty caption");
    }
    let pool = applicable(p_fine, category);
    let k = if pool.is_empty() { 0 } else { Binomial::new(pool.len() as u64, 0.5).expect("valid binomial").sample(rng) as usize };
    let chosen: Vec<Strategy> = pool.choose_multiple(rng, k).copied().collect();
    let mut text = p_fine.to_string();
    let mut strategies = Vec::with_capacity(k);
    let mut steps = Vec::with_capacity(k);
    for s in chosen {
        let a = Applied { strategy: s, draw: rng.gen() };
        let (next, removed) = apply_strategy(&text, a);
        steps.push(cot_step(a, &removed));
        strategies.push(a);
        text = next;
    }
    steps.reverse();
    Ok(Triplet { p_short: text, cot: steps, p_fine: p_fine.to_string(), category, strategies })
}

/// Classifies and degrades `p_fine` with a per-caption rng.
pub fn build_triplet(p_fine: &str, seed: u64) -> Result<Triplet> {
    let category = classify(p_fine)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    degrade(p_fine, category, &mut rng)
}

/// Checks the recorded triplet against its own strategy log.
pub fn verify_triplet(t: &Triplet) -> Result<()> {
    if replay(&t.p_fine, &t.strategies) != t.p_short {
        return contract_err("verify_triplet", "replay does not reproduce p_short");
    }
    if t.cot.len() != t.strategies.len() {
        return contract_err("verify_triplet", "reasoning steps do not match strategies");
    }
    if !t.strategies.is_empty() && token_count(&t.p_short) >= token_count(&t.p_fine) {
        return contract_err("verify_triplet", "short prompt is not shorter");
    }
    if t.strategies.is_empty() && t.p_short != t.p_fine {
        return contract_err("verify_triplet", "identity triplet altered the prompt");
    }
    Ok(())
}

const IMPERATIVES: [&str; 24] = [
    "add", "remove", "replace", "change", "make", "turn", "move", "put", "insert", "delete", "erase", "keep", "set", "rotate", "resize", "recolor", "swap", "write", "place", "draw", "crop", "convert", "paint", "shift",
];
const FILLERS: [&str; 14] = ["the", "a", "an", "please", "very", "really", "just", "carefully", "that", "which", "so", "also", "then", "slightly"];
/// Output length bound of [`summarize_edit`].
pub const SUMMARY_MAX_TOKENS: usize = 25;

fn sentences(s: &str) -> Vec<Vec<String>> {
    let mut out = vec![Vec::new()];
    for u in units(s) {
        let end = !quoted(&u) && u.ends_with(['.', '!', '?']) || quoted(&u) && u.ends_with(['.', '!', '?']) && !u.ends_with('"');
        out.last_mut().expect("non-empty").push(u);
        if end {
            out.push(Vec::new());
        }
    }
    out.retain(|s| !s.is_empty());
    out
}

fn unit_tokens(u: &str) -> usize {
    token_count(u)
}

/// Extractive summary of an editing annotation in at most 25 tokens.
/// Quoted strings are copied verbatim; if the quotes alone exceed the
/// bound they are returned joined.
pub fn summarize_edit(annotation: &str) -> String {
    if token_count(annotation) <= SUMMARY_MAX_TOKENS {
        return annotation.to_string();
    }
    let sents = sentences(annotation);
    let is_imp = |s: &Vec<String>| s.first().is_some_and(|u| IMPERATIVES.contains(&bare(u).as_str()));
    let mut picked: Vec<Vec<String>> = sents.iter().filter(|s| is_imp(s) || s.iter().any(|u| quoted(u))).cloned().collect();
    if picked.is_empty() {
        picked.push(sents[0].clone());
    }
    for s in picked.iter_mut() {
        let first = s[0].clone();
        s.retain(|u| quoted(u) || *u == first || !FILLERS.contains(&bare(u).as_str()));
    }
    let total = |p: &[Vec<String>]| p.iter().flatten().map(|u| unit_tokens(u)).sum::<usize>();
    // Drop trailing sentences without quotes, then trailing unquoted words.
    while total(&picked) > SUMMARY_MAX_TOKENS && picked.len() > 1 {
        match picked.iter().rposition(|s| !s.iter().any(|u| quoted(u))) {
            Some(i) => {
                picked.remove(i);
            }
            None => break,
        }
    }
    'outer: while total(&picked) > SUMMARY_MAX_TOKENS {
        for s in picked.iter_mut().rev() {
            if let Some(i) = (1..s.len()).rev().find(|&i| !quoted(&s[i])) {
                s.remove(i);
                continue 'outer;
            }
        }
        for s in picked.iter_mut().rev() {
            if !quoted(&s[0]) && s.len() > 1 {
                s.remove(0);
                continue 'outer;
            }
        }
        break;
    }
    if total(&picked) > SUMMARY_MAX_TOKENS {
        return picked.iter().flatten().filter(|u| quoted(u)).cloned().collect::<Vec<_>>().join(" ");
    }
    picked.iter().map(|s| s.join(" ")).collect::<Vec<_>>().join(" ")
}

/// Random fine caption spanning all four categories, for tests and demos.
pub fn sample_fine_caption<R: Rng>(rng: &mut R) -> String {
    let subjects = ["a red fox", "an old lighthouse", "three ceramic cups", "a portrait of an old sailor", "a woman reading", "two bicycles", "a street market", "a mountain cabin"];
    let style = ["", "cinematic ", "highly detailed ", "photorealistic ", "intricate "];
    let mut parts = vec![format!("{}{}", style[rng.gen_range(0..style.len())], subjects[rng.gen_range(0..subjects.len())])];
    let extras = [
        "lit by soft golden sunlight",
        "with deep shadows",
        "rough wooden texture",
        "smooth glossy surface",
        "placed in the left corner",
        "arranged beside a window",
        "against a misty mountain backdrop",
        "with a blurred city background",
        "it is raining lightly",
        "positioned next to a small table",
        "in the style of an oil painting",
        "with four small birds",
    ];
    let mut idx: Vec<usize> = (0..extras.len()).collect();
    idx.shuffle(rng);
    for &i in idx.iter().take(rng.gen_range(0..=5)) {
        parts.push(extras[i].to_string());
    }
    match rng.gen_range(0..4) {
        1 => parts.push("with a sign that reads \"OPEN DAILY\"".to_string()),
        2 => {
            parts.push("with a poster titled \"Harvest Festival\"".to_string());
            parts.push("and a banner saying \"Tickets at the gate\"".to_string());
        }
        _ => {}
    }
    parts.join(", ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classify_examples() {
        assert_eq!(classify("a portrait of an old sailor, wrinkled face").unwrap(), Category::Portrait);
        assert_eq!(classify("a shop window with a sign reading \"fresh bread baked every morning here\"").unwrap(), Category::Text);
        let para = |n: usize| format!("\"{}\"", vec!["word"; n].join(" "));
        let complex = format!("a poster with {}, {} and {}", para(30), para(25), para(25));
        assert_eq!(classify(&complex).unwrap(), Category::ComplexText);
        assert_eq!(classify("a bowl of fruit").unwrap(), Category::General);
        assert!(classify("   ").is_err());
    }

    #[test]
    fn identity_when_nothing_applies() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = degrade("a bowl of fruit", Category::General, &mut rng).unwrap();
        assert_eq!(t.p_short, t.p_fine);
        assert!(t.cot.is_empty() && t.strategies.is_empty());
        verify_triplet(&t).unwrap();
    }

    #[test]
    fn drop_lighting_removes_clause_and_names_it() {
        let fine = "a red fox, lit by soft golden sunlight, on a rock";
        let a = Applied { strategy: Strategy::DropLighting, draw: 0 };
        let (short, removed) = apply_strategy(fine, a);
        assert_eq!(short, "a red fox, on a rock");
        assert_eq!(removed, ["lit by soft golden sunlight"]);
        assert!(cot_step(a, &removed).contains("lighting"));
    }

    #[test]
    fn transforms_never_touch_quotes() {
        let fine = "two signs, \"left two detailed\", cinematic glow";
        for s in Strategy::POOL {
            let (out, _) = apply_strategy(fine, Applied { strategy: s, draw: 3 });
            assert!(out.contains("\"left two detailed\""), "{s:?}: {out}");
        }
    }

    #[test]
    fn colloquialization_shortens() {
        let (s, r) = apply_strategy("It is a photograph of a dog, in the style of Monet", Applied { strategy: Strategy::Colloquialization, draw: 0 });
        assert_eq!(s, "It's a photo a dog, like Monet");
        assert_eq!(r.len(), 3);
    }

    #[test]
    fn counts_and_style_words() {
        let (s, _) = apply_strategy("three cups and 12 spoons", Applied { strategy: Strategy::UnderspecifyCounts, draw: 0 });
        assert_eq!(s, "cups and spoons");
        let (s, _) = apply_strategy("a cinematic, highly detailed castle", Applied { strategy: Strategy::StylisticSimplification, draw: 0 });
        assert_eq!(s, "a castle");
        let (s, _) = apply_strategy("a red fox, cinematic, on a rock", Applied { strategy: Strategy::StylisticSimplification, draw: 0 });
        assert_eq!(s, "a red fox, on a rock");
    }

    #[test]
    fn summarize_examples() {
        assert_eq!(summarize_edit("Make the sky blue."), "Make the sky blue.");
        let long = "The photo shows a small family bakery on a quiet cobbled street in the early morning light with a few people walking by. \
                    Replace the sign above the door with one that says \"OPEN DAILY\". \
                    The rest of the storefront looks fine and should stay exactly the way it currently is in the picture. \
                    Remove the parked car on the left side.";
        assert!(token_count(long) >= 60);
        let s = summarize_edit(long);
        assert!(token_count(&s) <= SUMMARY_MAX_TOKENS, "{s}");
        assert!(s.contains("\"OPEN DAILY\""));
        assert!(s.starts_with("Replace"));
    }

    #[test]
    fn seeded_triplets_hold_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut nonempty = 0;
        for i in 0..200 {
            let fine = sample_fine_caption(&mut rng);
            let t = build_triplet(&fine, i).unwrap();
            verify_triplet(&t).unwrap();
            nonempty += usize::from(!t.strategies.is_empty());
        }
        assert!(nonempty > 100);
    }
}
