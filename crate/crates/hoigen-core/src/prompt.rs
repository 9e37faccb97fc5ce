//! HOI triplet parsing and prompt-pair rendering.
//!
//! A triplet `<subject, verb, object>` renders into two prompts: the full
//! prompt `"a {subject} is {verb-ing} a {object}"` and an intransitive
//! variant with the trailing object noun phrase removed. The pair carries a
//! token alignment between the two sequences so attention maps from the
//! intransitive stream can be substituted for the matching full-prompt
//! tokens downstream.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::OnceLock;

/// A subject-verb-object interaction description.
///
/// The verb may be stored in base form ("carry") or gerund form
/// ("carrying"); rendering normalizes to the gerund. `object` may be empty
/// for intransitive-only rendering, but [`parse_triplet`] always produces
/// all three fields non-empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HoiTriplet {
    pub subject: String,
    pub verb: String,
    pub object: String,
    /// Skip the article before the subject ("water" vs "a water").
    #[serde(default)]
    pub bare_subject: bool,
    /// Skip the article before the object.
    #[serde(default)]
    pub bare_object: bool,
}

impl HoiTriplet {
    pub fn new(subject: &str, verb: &str, object: &str) -> Result<Self> {
        let t = Self {
            subject: subject.trim().to_lowercase(),
            verb: verb.trim().to_lowercase(),
            object: object.trim().to_lowercase(),
            bare_subject: false,
            bare_object: false,
        };
        if t.subject.is_empty() || t.verb.is_empty() {
            return Err(Error::InvalidTriplet(
                "subject and verb must be non-empty".into(),
            ));
        }
        if !t.object.is_empty() {
            for w in t.object.split_whitespace() {
                if t.verb.split_whitespace().any(|v| v == w) {
                    return Err(Error::InvalidTriplet(format!(
                        "verb contains object word {w:?}"
                    )));
                }
            }
        }
        Ok(t)
    }
}

/// Indefinite article for a word: "an" before vowel sounds, "a" otherwise.
fn article(word: &str) -> &'static str {
    match word.chars().next() {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    }
}

const VOWELS: &[char] = &['a', 'e', 'i', 'o', 'u'];

fn is_consonant(c: char) -> bool {
    c.is_ascii_alphabetic() && !VOWELS.contains(&c)
}

/// Gerund of a single verb word by rule table:
/// `ie` -> `ying`, silent-e drop, consonant doubling for CVC endings
/// (final w/x/y exempt), else plain `-ing`.
fn gerund_word(word: &str) -> String {
    let chars: Vec<char> = word.chars().collect();
    let n = chars.len();
    if word.ends_with("ing") {
        return word.to_string();
    }
    if word.ends_with("ie") {
        return format!("{}ying", &word[..n - 2]);
    }
    if n >= 2 && chars[n - 1] == 'e' && chars[n - 2] != 'e' {
        return format!("{}ing", &word[..n - 1]);
    }
    if n >= 3
        && is_consonant(chars[n - 1])
        && !['w', 'x', 'y'].contains(&chars[n - 1])
        && VOWELS.contains(&chars[n - 2])
        && is_consonant(chars[n - 3])
    {
        return format!("{}{}ing", word, chars[n - 1]);
    }
    format!("{word}ing")
}

/// Gerund of a verb phrase: the head word is inflected, particles
/// ("lie on" -> "lying on") pass through. Overrides map a full base phrase
/// to its gerund phrase and win over the rule table.
pub fn gerund(verb: &str, overrides: &BTreeMap<String, String>) -> String {
    if let Some(g) = overrides.get(verb) {
        return g.clone();
    }
    let mut parts = verb.split_whitespace();
    let head = match parts.next() {
        Some(h) => gerund_word(h),
        None => return String::new(),
    };
    let rest: Vec<&str> = parts.collect();
    if rest.is_empty() {
        head
    } else {
        format!("{} {}", head, rest.join(" "))
    }
}

/// Invert a gerund head word back to base form. Exact only for verbs the
/// forward rules cover; irregular (`carve`-like VCC silent-e) cases need an
/// override entry.
fn base_word(gerund: &str) -> String {
    let stem = match gerund.strip_suffix("ing") {
        Some(s) => s,
        None => return gerund.to_string(),
    };
    let chars: Vec<char> = stem.chars().collect();
    let n = chars.len();
    // doubled-consonant ending from CVC doubling: sitt -> sit
    if n >= 3 && chars[n - 1] == chars[n - 2] && is_consonant(chars[n - 1]) {
        return stem[..stem.len() - 1].to_string();
    }
    // short y-stem from ie -> ying: ly -> lie
    if n == 2 && chars[1] == 'y' && is_consonant(chars[0]) {
        return format!("{}ie", chars[0]);
    }
    // CVC stem implies a dropped silent e (a CVC base would have doubled)
    if n >= 3
        && is_consonant(chars[n - 1])
        && !['w', 'x', 'y'].contains(&chars[n - 1])
        && VOWELS.contains(&chars[n - 2])
        && is_consonant(chars[n - 3])
    {
        return format!("{stem}e");
    }
    stem.to_string()
}

fn base_phrase(verb: &str, overrides: &BTreeMap<String, String>) -> String {
    for (base, ger) in overrides {
        if ger == verb {
            return base.clone();
        }
    }
    let mut parts = verb.split_whitespace();
    let head = match parts.next() {
        Some(h) => base_word(h),
        None => return String::new(),
    };
    let rest: Vec<&str> = parts.collect();
    if rest.is_empty() {
        head
    } else {
        format!("{} {}", head, rest.join(" "))
    }
}

/// Splits text into tokens. Implementations must be deterministic.
pub trait Tokenizer {
    fn tokenize(&self, text: &str) -> Vec<String>;
}

/// Lowercasing whitespace tokenizer; the default for the toy backbone.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn tokenize(&self, text: &str) -> Vec<String> {
        text.to_lowercase()
            .split_whitespace()
            .map(str::to_string)
            .collect()
    }
}

/// Full and intransitive prompt renderings with their token alignment.
///
/// `alignment` maps full-token index -> intransitive-token index. It is
/// injective, order-preserving, covers every intransitive token, and never
/// contains `object_index`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPair {
    pub full_prompt: String,
    pub intransitive_prompt: String,
    pub full_tokens: Vec<String>,
    pub intrans_tokens: Vec<String>,
    pub alignment: BTreeMap<usize, usize>,
    pub verb_index: usize,
    pub object_index: usize,
}

impl PromptPair {
    /// True when the two prompts tokenize identically (empty object).
    pub fn is_identity(&self) -> bool {
        self.full_tokens == self.intrans_tokens
    }
}

fn render_full(triplet: &HoiTriplet, overrides: &BTreeMap<String, String>) -> (String, String) {
    let ger = gerund(&triplet.verb, overrides);
    let mut parts: Vec<String> = Vec::new();
    if !triplet.bare_subject {
        parts.push(article(&triplet.subject).to_string());
    }
    parts.push(triplet.subject.clone());
    parts.push("is".into());
    parts.push(ger.clone());
    let intrans = parts.join(" ");
    if triplet.object.is_empty() {
        return (intrans.clone(), intrans);
    }
    if !triplet.bare_object {
        parts.push(article(&triplet.object).to_string());
    }
    parts.push(triplet.object.clone());
    (parts.join(" "), intrans)
}

/// Greedy token alignment: longest common prefix, then in-order matching of
/// identical tokens. Every intransitive token must be consumed.
fn align_tokens(full: &[String], intrans: &[String]) -> Result<BTreeMap<usize, usize>> {
    let mut alignment = BTreeMap::new();
    let mut j = 0;
    for (i, tok) in full.iter().enumerate() {
        if j < intrans.len() && *tok == intrans[j] {
            alignment.insert(i, j);
            j += 1;
        }
    }
    if j != intrans.len() {
        return Err(Error::TokenizationMismatch(format!(
            "intransitive tokens are not a subsequence of full tokens \
             (matched {j} of {})",
            intrans.len()
        )));
    }
    Ok(alignment)
}

/// Render the prompt pair for a triplet and align the two token sequences.
pub fn render_prompts(
    triplet: &HoiTriplet,
    tokenizer: &dyn Tokenizer,
    gerund_overrides: &BTreeMap<String, String>,
) -> Result<PromptPair> {
    let (full_prompt, intransitive_prompt) = render_full(triplet, gerund_overrides);
    let full_tokens = tokenizer.tokenize(&full_prompt);
    let intrans_tokens = tokenizer.tokenize(&intransitive_prompt);
    let mut alignment = align_tokens(&full_tokens, &intrans_tokens)?;

    let ger_head = gerund(&triplet.verb, gerund_overrides)
        .split_whitespace()
        .next()
        .unwrap_or_default()
        .to_string();
    // Search after the copula so a subject word that repeats the gerund
    // ("a running man is running") cannot shadow the verb token.
    let is_index = full_tokens.iter().position(|t| t == "is").unwrap_or(0);
    let verb_index = full_tokens
        .iter()
        .skip(is_index)
        .position(|t| *t == ger_head)
        .map(|p| p + is_index)
        .ok_or_else(|| Error::TokenizationMismatch("verb token not found".into()))?;

    // Object noun phrase = everything after the intransitive prefix; the
    // head noun is the last token. With an empty object the pair is the
    // identity and the object index points past the end by convention.
    let object_index = if triplet.object.is_empty() {
        full_tokens.len()
    } else {
        full_tokens.len() - 1
    };
    // The object NP (article + object words) must stay unaligned even if a
    // token happens to repeat an earlier one.
    if !triplet.object.is_empty() {
        let np_start = intrans_tokens.len();
        alignment.retain(|&fi, _| fi < np_start);
        if alignment.len() != intrans_tokens.len() {
            return Err(Error::TokenizationMismatch(
                "object noun phrase overlaps the intransitive prefix".into(),
            ));
        }
    }

    Ok(PromptPair {
        full_prompt,
        intransitive_prompt,
        full_tokens,
        intrans_tokens,
        alignment,
        verb_index,
        object_index,
    })
}

static FREEFORM: OnceLock<regex::Regex> = OnceLock::new();

/// Parse either the structured `subject|verb|object` form or a free-form
/// prompt shaped like "a(n) X is V-ing a(n) Y".
pub fn parse_triplet(text: &str) -> Result<HoiTriplet> {
    let text = text.trim();
    if text.is_empty() {
        return Err(Error::UnparsablePrompt("empty prompt".into()));
    }
    if text.contains('|') {
        let fields: Vec<&str> = text.split('|').map(str::trim).collect();
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            return Err(Error::UnparsablePrompt(format!(
                "structured prompt needs subject|verb|object: {text:?}"
            )));
        }
        return HoiTriplet::new(fields[0], fields[1], fields[2]);
    }
    let re = FREEFORM.get_or_init(|| {
        regex::Regex::new(r"^an?\s+(.+?)\s+is\s+(.+?)\s+an?\s+(.+?)\s*\.?$").unwrap()
    });
    let lower = text.to_lowercase();
    let caps = re
        .captures(&lower)
        .ok_or_else(|| Error::UnparsablePrompt(format!("no HOI pattern in {text:?}")))?;
    let verb = base_phrase(&caps[2], &BTreeMap::new());
    HoiTriplet::new(&caps[1], &verb, &caps[3])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(triplet: &HoiTriplet) -> PromptPair {
        render_prompts(triplet, &WhitespaceTokenizer, &BTreeMap::new()).unwrap()
    }

    #[test]
    fn parses_structured_form() {
        let t = parse_triplet("boy|lie on|bench").unwrap();
        assert_eq!(
            (t.subject.as_str(), t.verb.as_str(), t.object.as_str()),
            ("boy", "lie on", "bench")
        );
    }

    #[test]
    fn parses_free_form() {
        let t = parse_triplet("a man is carrying a bicycle").unwrap();
        assert_eq!(
            (t.subject.as_str(), t.verb.as_str(), t.object.as_str()),
            ("man", "carry", "bicycle")
        );
    }

    #[test]
    fn free_form_with_particle() {
        let t = parse_triplet("a toddler is pointing at a laptop").unwrap();
        assert_eq!(t.verb, "point at");
        assert_eq!(t.object, "laptop");
    }

    #[test]
    fn rejects_non_hoi_text() {
        assert!(matches!(
            parse_triplet("hello world"),
            Err(Error::UnparsablePrompt(_))
        ));
    }

    #[test]
    fn rejects_verb_containing_object_word() {
        assert!(HoiTriplet::new("man", "carry bicycle", "bicycle").is_err());
    }

    #[test]
    fn renders_carry_pair() {
        let t = HoiTriplet::new("man", "carry", "bicycle").unwrap();
        let p = pair(&t);
        assert_eq!(p.full_prompt, "a man is carrying a bicycle");
        assert_eq!(p.intransitive_prompt, "a man is carrying");
    }

    #[test]
    fn prefix_alignment_and_object_index() {
        let t = HoiTriplet::new("man", "carry", "bicycle").unwrap();
        let p = pair(&t);
        let want: BTreeMap<usize, usize> = (0..4).map(|i| (i, i)).collect();
        assert_eq!(p.alignment, want);
        assert_eq!(p.object_index, 5);
        assert_eq!(p.verb_index, 3);
        assert!(!p.alignment.contains_key(&p.object_index));
        assert!(p.alignment.contains_key(&p.verb_index));
    }

    #[test]
    fn empty_object_renders_identity_pair() {
        let t = HoiTriplet {
            subject: "boy".into(),
            verb: "jump".into(),
            object: String::new(),
            bare_subject: false,
            bare_object: false,
        };
        let p = pair(&t);
        assert_eq!(p.full_prompt, p.intransitive_prompt);
        assert!(p.is_identity());
        assert_eq!(p.alignment.len(), p.full_tokens.len());
    }

    #[test]
    fn multiword_object_removed_as_whole_phrase() {
        let t = HoiTriplet::new("young man", "sign", "sports ball").unwrap();
        let p = pair(&t);
        assert_eq!(p.full_prompt, "a young man is signing a sports ball");
        assert_eq!(p.intransitive_prompt, "a young man is signing");
        assert_eq!(p.object_index, p.full_tokens.len() - 1);
        assert_eq!(p.full_tokens[p.object_index], "ball");
    }

    #[test]
    fn tokenizer_drift_between_streams_is_detected() {
        // a tokenizer that rewrites short texts breaks the prefix
        // relationship between the two renderings
        struct Drifting;
        impl Tokenizer for Drifting {
            fn tokenize(&self, text: &str) -> Vec<String> {
                if text.ends_with("carrying") {
                    vec!["<merged>".into()]
                } else {
                    WhitespaceTokenizer.tokenize(text)
                }
            }
        }
        let t = HoiTriplet::new("man", "carry", "bicycle").unwrap();
        assert!(matches!(
            render_prompts(&t, &Drifting, &BTreeMap::new()),
            Err(Error::TokenizationMismatch(_))
        ));
    }

    #[test]
    fn gerund_rule_table() {
        let o = BTreeMap::new();
        for (base, want) in [
            ("carry", "carrying"),
            ("ride", "riding"),
            ("sit", "sitting"),
            ("run", "running"),
            ("lie", "lying"),
            ("throw", "throwing"),
            ("jump", "jumping"),
            ("chase", "chasing"),
            ("cut", "cutting"),
            ("lie on", "lying on"),
            ("point at", "pointing at"),
        ] {
            assert_eq!(gerund(base, &o), want, "gerund of {base}");
        }
    }

    #[test]
    fn gerund_override_wins() {
        let mut o = BTreeMap::new();
        o.insert("picnic".to_string(), "picnicking".to_string());
        assert_eq!(gerund("picnic", &o), "picnicking");
    }

    #[test]
    fn render_reparse_round_trip() {
        let verbs = [
            "carry", "ride", "sit", "run", "lie", "throw", "jump", "chase", "cut", "hold", "sign",
            "eat", "read", "kick", "lie on", "point at",
        ];
        let subjects = ["man", "woman", "boy", "girl", "child", "toddler"];
        let objects = ["bicycle", "bench", "pizza", "cake", "laptop", "fork", "bird"];
        for (i, verb) in verbs.iter().enumerate() {
            let t = HoiTriplet::new(subjects[i % subjects.len()], verb, objects[i % objects.len()])
                .unwrap();
            let p = pair(&t);
            let back = parse_triplet(&p.full_prompt).unwrap();
            assert_eq!(back.subject, t.subject, "subject for {verb}");
            assert_eq!(back.verb, t.verb, "verb for {verb}");
            assert_eq!(back.object, t.object, "object for {verb}");
        }
    }

    #[test]
    fn alignment_is_monotone_and_injective() {
        // randomized sweep over the fixture vocabulary
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let verbs = ["carry", "ride", "sit", "lie on", "point at", "hold", "chase"];
        let subjects = ["man", "woman", "boy", "young man", "older woman"];
        let objects = ["bicycle", "sports ball", "pizza", "bench", "umbrella"];
        for _ in 0..200 {
            let t = HoiTriplet::new(
                subjects[rng.random_range(0..subjects.len())],
                verbs[rng.random_range(0..verbs.len())],
                objects[rng.random_range(0..objects.len())],
            )
            .unwrap();
            let p = pair(&t);
            let mut last_src = None;
            let mut last_dst = None;
            let mut seen = std::collections::BTreeSet::new();
            for (&src, &dst) in &p.alignment {
                if let (Some(ls), Some(ld)) = (last_src, last_dst) {
                    assert!(src > ls && dst > ld, "alignment must be monotone");
                }
                assert!(seen.insert(dst), "alignment must be injective");
                last_src = Some(src);
                last_dst = Some(dst);
            }
            assert_eq!(p.alignment.len(), p.intrans_tokens.len());
            assert!(!p.alignment.contains_key(&p.object_index));
            // the object token never appears in the aligned image
            for (&src, &dst) in &p.alignment {
                assert_eq!(p.full_tokens[src], p.intrans_tokens[dst]);
                assert_ne!(src, p.object_index);
            }
        }
    }
}
