//! Tweet preprocessing: cleanup, tokenization, gazetteer entity recognition
//! and fixed-length shaping.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::LazyLock;

use chrono::{DateTime, NaiveDateTime, SecondsFormat, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Longest gazetteer phrase, in words.
pub const MAX_ENTITY_WORDS: usize = 4;

static LINK_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\(link:[^)]*\)").expect("valid regex"));
static DOMAIN_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^[A-Za-z0-9-]+(\.[A-Za-z0-9-]+)*\.[A-Za-z]{2,}(/\S*)?$").expect("valid regex")
});

fn is_url(token: &str) -> bool {
    let lower = token.to_ascii_lowercase();
    if lower.starts_with("http://") || lower.starts_with("https://") || lower.starts_with("www.") {
        return true;
    }
    let trimmed = token.trim_matches(|c: char| c.is_ascii_punctuation() && c != '/' && c != '-');
    DOMAIN_RE.is_match(trimmed)
}

/// Removes links, bare domains, @mentions, #hashtags and non-ASCII content,
/// then collapses whitespace. A token holding a non-ASCII letter is dropped
/// whole; other non-ASCII characters (emoji, symbols) are stripped.
pub fn clean_tweet(text: &str) -> String {
    let text = LINK_RE.replace_all(text, " ");
    let mut kept: Vec<String> = Vec::new();
    for token in text.split_whitespace() {
        if token.starts_with('@') || token.starts_with('#') || is_url(token) {
            continue;
        }
        if token.chars().any(|c| !c.is_ascii() && c.is_alphabetic()) {
            continue;
        }
        let ascii: String = token.chars().filter(|c| c.is_ascii() && !c.is_ascii_control()).collect();
        if !ascii.is_empty() {
            kept.push(ascii);
        }
    }
    kept.join(" ")
}

/// Splits on whitespace, strips leading and trailing punctuation, lower-cases.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.trim_matches(|c: char| c.is_ascii_punctuation()).to_ascii_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Token {
    Word { text: String },
    Entity { text: String },
    Pad,
}

impl Token {
    pub fn word(text: impl Into<String>) -> Self {
        Token::Word { text: text.into() }
    }

    pub fn entity(text: impl Into<String>) -> Self {
        Token::Entity { text: text.into() }
    }

    /// Vocabulary key; `None` for padding.
    pub fn key(&self) -> Option<&str> {
        match self {
            Token::Word { text } | Token::Entity { text } => Some(text),
            Token::Pad => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub source_id: String,
    pub tokens: Vec<Token>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Set of lower-case entity phrases (words separated by single spaces).
#[derive(Clone, Debug, Default)]
pub struct Gazetteer {
    phrases: HashSet<String>,
    max_words: usize,
}

impl Gazetteer {
    pub fn new<I, S>(phrases: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut g = Gazetteer::default();
        for p in phrases {
            g.insert(p.as_ref());
        }
        g
    }

    /// Adds a phrase; underscores are read as word separators. Phrases longer
    /// than four words are ignored.
    pub fn insert(&mut self, phrase: &str) {
        let words: Vec<String> = phrase
            .split(|c: char| c == '_' || c.is_whitespace())
            .filter(|w| !w.is_empty())
            .map(str::to_ascii_lowercase)
            .collect();
        if words.is_empty() || words.len() > MAX_ENTITY_WORDS {
            return;
        }
        self.max_words = self.max_words.max(words.len());
        self.phrases.insert(words.join(" "));
    }

    pub fn contains(&self, phrase: &str) -> bool {
        self.phrases.contains(phrase)
    }

    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }
}

/// Greedy left-to-right longest match against the gazetteer.
pub fn recognize_entities(words: &[String], gazetteer: &Gazetteer) -> Vec<Token> {
    let mut out = Vec::with_capacity(words.len());
    let mut i = 0;
    while i < words.len() {
        let longest = (1..=gazetteer.max_words.min(words.len() - i))
            .rev()
            .find(|&n| gazetteer.contains(&words[i..i + n].join(" ")));
        match longest {
            Some(n) => {
                out.push(Token::entity(words[i..i + n].join("_")));
                i += n;
            }
            None => {
                out.push(Token::word(words[i].clone()));
                i += 1;
            }
        }
    }
    out
}

/// clean, tokenize, recognize entities.
pub fn preprocess(id: &str, text: &str, gazetteer: &Gazetteer) -> TokenSeq {
    TokenSeq {
        source_id: id.to_string(),
        tokens: recognize_entities(&tokenize(&clean_tweet(text)), gazetteer),
    }
}

/// Keeps the first `s` tokens or right-pads with [`Token::Pad`].
pub fn pad_or_truncate(seq: &TokenSeq, s: usize) -> Result<TokenSeq> {
    if s < 1 {
        return Err(Error::contract("fixed length must be at least 1"));
    }
    let mut tokens: Vec<Token> = seq.tokens.iter().take(s).cloned().collect();
    tokens.resize(s, Token::Pad);
    Ok(TokenSeq {
        source_id: seq.source_id.clone(),
        tokens,
    })
}

/// Mean token count rounded half up, at least 1.
pub fn compute_fixed_length(corpus: &[TokenSeq]) -> Result<usize> {
    if corpus.is_empty() {
        return Err(Error::contract("cannot derive a fixed length from an empty corpus"));
    }
    let total: usize = corpus.iter().map(TokenSeq::len).sum();
    // Integer form of floor(total / n + 1/2).
    let s = (2 * total + corpus.len()) / (2 * corpus.len());
    Ok(s.max(1))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawTweet {
    pub id: String,
    /// UTC seconds since the epoch.
    pub timestamp: i64,
    pub text: String,
}

#[derive(Serialize, Deserialize)]
struct RawTweetJson {
    id: serde_json::Value,
    timestamp: String,
    text: String,
}

/// Parses an ISO-8601 instant; a missing offset is read as UTC.
pub fn parse_timestamp(s: &str) -> Option<i64> {
    let s = s.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.timestamp());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(t.and_utc().timestamp());
        }
    }
    None
}

pub fn format_timestamp(secs: i64) -> String {
    DateTime::<Utc>::from_timestamp(secs, 0)
        .map(|t| t.to_rfc3339_opts(SecondsFormat::Secs, true))
        .unwrap_or_else(|| secs.to_string())
}

fn open_lines(path: &Path) -> Result<impl Iterator<Item = (usize, std::io::Result<String>)>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(BufReader::new(file).lines().enumerate().map(|(i, l)| (i + 1, l)))
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

pub fn read_tweets(path: &Path) -> Result<Vec<RawTweet>> {
    let mut out = Vec::new();
    for (n, line) in open_lines(path)? {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawTweetJson = serde_json::from_str(&line).map_err(|e| parse_err(path, n, e.to_string()))?;
        let timestamp = parse_timestamp(&raw.timestamp)
            .ok_or_else(|| parse_err(path, n, format!("invalid timestamp {:?}", raw.timestamp)))?;
        let id = match raw.id {
            serde_json::Value::String(s) => s,
            other => other.to_string(),
        };
        out.push(RawTweet {
            id,
            timestamp,
            text: raw.text,
        });
    }
    Ok(out)
}

pub fn write_tweets(path: &Path, tweets: &[RawTweet]) -> Result<()> {
    let mut lines = Vec::with_capacity(tweets.len());
    for t in tweets {
        lines.push(serde_json::to_string(&RawTweetJson {
            id: serde_json::Value::String(t.id.clone()),
            timestamp: format_timestamp(t.timestamp),
            text: t.text.clone(),
        })?);
    }
    write_lines(path, &lines)
}

/// A tweet with a binary sentiment label: 0 negative, 1 positive.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledText {
    pub text: String,
    pub label: u8,
}

pub fn read_labeled(path: &Path) -> Result<Vec<LabeledText>> {
    let mut out = Vec::new();
    for (n, line) in open_lines(path)? {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item: LabeledText = serde_json::from_str(&line).map_err(|e| parse_err(path, n, e.to_string()))?;
        if item.label > 1 {
            return Err(parse_err(path, n, format!("sentiment label {} is not 0 or 1", item.label)));
        }
        out.push(item);
    }
    Ok(out)
}

pub fn write_labeled(path: &Path, items: &[LabeledText]) -> Result<()> {
    let lines = items.iter().map(serde_json::to_string).collect::<std::result::Result<Vec<_>, _>>()?;
    write_lines(path, &lines)
}

pub fn read_token_seqs(path: &Path) -> Result<Vec<TokenSeq>> {
    let mut out = Vec::new();
    for (n, line) in open_lines(path)? {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| parse_err(path, n, e.to_string()))?);
    }
    Ok(out)
}

pub fn write_token_seqs(path: &Path, seqs: &[TokenSeq]) -> Result<()> {
    let lines = seqs.iter().map(serde_json::to_string).collect::<std::result::Result<Vec<_>, _>>()?;
    write_lines(path, &lines)
}

pub(crate) fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for l in lines {
        writeln!(w, "{l}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = "My heart goes out to all those affected by Typhoon Haiyan. You can help by donating to the Philippine RED CROSS here (link: http://www.redcross.org) redcross.org";

    fn words(ws: &[&str]) -> Vec<String> {
        ws.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn clean_removes_links_and_domains() {
        let c = clean_tweet(EXAMPLE);
        assert!(!c.contains("redcross") && !c.contains("link"), "{c}");
        assert!(c.ends_with("RED CROSS here"));
    }

    #[test]
    fn clean_mentions_hashtags_and_non_ascii() {
        assert_eq!(clean_tweet("@user hello #storm"), "hello");
        assert_eq!(clean_tweet("ça va typhoon"), "va typhoon");
        assert_eq!(clean_tweet("stay safe 🌀 https://t.co/x www.x.com"), "stay safe");
        assert_eq!(clean_tweet(""), "");
    }

    #[test]
    fn tokenize_examples() {
        let toks = tokenize(&clean_tweet(EXAMPLE));
        let want = words(&[
            "my", "heart", "goes", "out", "to", "all", "those", "affected", "by", "typhoon", "haiyan", "you", "can",
            "help", "by", "donating", "to", "the", "philippine", "red", "cross", "here",
        ]);
        assert_eq!(toks, want);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("Help! NOW."), words(&["help", "now"]));
    }

    #[test]
    fn entity_examples() {
        let g = Gazetteer::new(["red_cross"]);
        assert_eq!(recognize_entities(&words(&["red", "cross"]), &g), vec![Token::entity("red_cross")]);
        let none = recognize_entities(&words(&["red", "cross"]), &Gazetteer::default());
        assert_eq!(none, vec![Token::word("red"), Token::word("cross")]);
        let g = Gazetteer::new(["red cross", "red"]);
        assert_eq!(
            recognize_entities(&words(&["red", "cross", "red"]), &g),
            vec![Token::entity("red_cross"), Token::entity("red")]
        );
    }

    #[test]
    fn example_entities_in_context() {
        let g = Gazetteer::new(["typhoon", "haiyan", "philippine", "red_cross"]);
        let seq = preprocess("1", EXAMPLE, &g);
        let ents: Vec<&str> = seq
            .tokens
            .iter()
            .filter_map(|t| match t {
                Token::Entity { text } => Some(text.as_str()),
                _ => None,
            })
            .collect();
        assert_eq!(ents, ["typhoon", "haiyan", "philippine", "red_cross"]);
    }

    #[test]
    fn pad_and_truncate() {
        let seq = TokenSeq {
            source_id: "x".into(),
            tokens: (0..7).map(|i| Token::word(format!("w{i}"))).collect(),
        };
        let short = TokenSeq {
            source_id: "y".into(),
            tokens: seq.tokens[..3].to_vec(),
        };
        let p = pad_or_truncate(&short, 5).unwrap();
        assert_eq!(&p.tokens[..3], &short.tokens[..]);
        assert_eq!(&p.tokens[3..], &[Token::Pad, Token::Pad]);
        assert_eq!(pad_or_truncate(&seq, 5).unwrap().tokens, seq.tokens[..5].to_vec());
        assert_eq!(pad_or_truncate(&seq, 7).unwrap(), seq);
        assert!(pad_or_truncate(&seq, 0).is_err());
    }

    #[test]
    fn fixed_length_rounding() {
        let mk = |n: usize| TokenSeq {
            source_id: String::new(),
            tokens: vec![Token::word("a"); n],
        };
        assert_eq!(compute_fixed_length(&[mk(2), mk(4)]).unwrap(), 3);
        assert_eq!(compute_fixed_length(&[mk(3), mk(3), mk(3)]).unwrap(), 3);
        assert_eq!(compute_fixed_length(&[mk(1), mk(2), mk(2)]).unwrap(), 2);
        assert_eq!(compute_fixed_length(&[mk(1), mk(2)]).unwrap(), 2);
        assert_eq!(compute_fixed_length(&[mk(0)]).unwrap(), 1);
        assert!(compute_fixed_length(&[]).is_err());
    }

    #[test]
    fn jsonl_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.jsonl");
        let tweets = vec![RawTweet {
            id: "17".into(),
            timestamp: 1_383_868_800,
            text: "storm \"coming\"".into(),
        }];
        write_tweets(&p, &tweets).unwrap();
        assert_eq!(read_tweets(&p).unwrap(), tweets);

        let seqs = vec![TokenSeq {
            source_id: "17".into(),
            tokens: vec![Token::word("a"), Token::entity("red_cross"), Token::Pad],
        }];
        let q = dir.path().join("s.jsonl");
        write_token_seqs(&q, &seqs).unwrap();
        let text = std::fs::read_to_string(&q).unwrap();
        assert!(text.contains(r#"{"kind":"entity","text":"red_cross"}"#), "{text}");
        assert_eq!(read_token_seqs(&q).unwrap(), seqs);
    }

    #[test]
    fn bad_timestamp_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.jsonl");
        std::fs::write(&p, "{\"id\":1,\"timestamp\":\"2013-11-08T00:00:00Z\",\"text\":\"a\"}\n{\"id\":2,\"timestamp\":\"soon\",\"text\":\"b\"}\n").unwrap();
        let err = read_tweets(&p).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
    }
}
