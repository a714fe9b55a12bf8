//! Parsers for the two free-text completions the loop consumes: the judge's
//! rating line and the engineer's JSON reply.
//!
//! Both parsers are total over arbitrary strings: any input yields either a
//! parsed value or a typed error, never a panic.

use thiserror::Error;

use crate::domain::{DomainError, EngineerReply, Prompt, Score, TokenCounter};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("no rating pattern found in verdict")]
    NoRatingFound,
    #[error("rating {0} is outside 0..=10")]
    RatingOutOfRange(u64),
    #[error("no brace-delimited object found in reply")]
    NoObjectFound,
    #[error("reply object is missing string key {0:?}")]
    MissingKey(&'static str),
    #[error("reply prompt is empty")]
    EmptyPrompt,
}

const RATING_OPEN: &str = "Rating: [[";
const RATING_CLOSE: &str = "]]";

/// Extracts the first `Rating: [[n]]` occurrence from a judge verdict.
///
/// The first syntactic occurrence wins: if its value is out of range the whole
/// verdict is rejected rather than falling through to a later occurrence.
pub fn parse_rating(raw: &str) -> Result<Score, ParseError> {
    for (start, _) in raw.match_indices(RATING_OPEN) {
        let after = &raw[start + RATING_OPEN.len()..];
        let digits: &str = {
            let end = after
                .char_indices()
                .find(|(_, c)| !c.is_ascii_digit())
                .map(|(i, _)| i)
                .unwrap_or(after.len());
            &after[..end]
        };
        if digits.is_empty() || !after[digits.len()..].starts_with(RATING_CLOSE) {
            continue;
        }
        // Values too large for u64 are still just out-of-range ratings.
        let value = digits.parse::<u64>().unwrap_or(u64::MAX);
        return Score::new(value).map_err(|_| ParseError::RatingOutOfRange(value));
    }
    Err(ParseError::NoRatingFound)
}

/// Extracts the engineer's `{"improvement": ..., "prompt": ...}` object from a
/// completion that may wrap it in prose or fenced code blocks.
///
/// The first balanced brace-delimited span that parses as a JSON object is the
/// reply; it must carry both string keys and a non-empty prompt.
pub fn parse_engineer_reply(
    raw: &str,
    counter: &dyn TokenCounter,
) -> Result<EngineerReply, ParseError> {
    let object = first_json_object(raw).ok_or(ParseError::NoObjectFound)?;
    let improvement = object
        .get("improvement")
        .and_then(|v| v.as_str())
        .ok_or(ParseError::MissingKey("improvement"))?
        .to_string();
    let prompt_text = object
        .get("prompt")
        .and_then(|v| v.as_str())
        .ok_or(ParseError::MissingKey("prompt"))?;
    let prompt = Prompt::new(prompt_text, counter).map_err(|e| match e {
        DomainError::EmptyPrompt => ParseError::EmptyPrompt,
        // Prompt construction only fails on emptiness.
        _ => ParseError::EmptyPrompt,
    })?;
    Ok(EngineerReply {
        improvement,
        prompt,
        raw: raw.to_string(),
    })
}

/// Finds the first balanced `{...}` span in `raw` that parses as a JSON object.
fn first_json_object(raw: &str) -> Option<serde_json::Map<String, serde_json::Value>> {
    let bytes = raw.as_bytes();
    for start in 0..bytes.len() {
        if bytes[start] != b'{' {
            continue;
        }
        let Some(end) = balanced_end(bytes, start) else {
            continue;
        };
        // `start..=end` only splits at '{'/'}' bytes, which are ASCII, so the
        // slice is valid UTF-8 within a UTF-8 input.
        let span = &raw[start..=end];
        if let Ok(serde_json::Value::Object(map)) = serde_json::from_str(span) {
            return Some(map);
        }
    }
    None
}

/// Returns the index of the brace closing the object opened at `start`,
/// skipping braces inside JSON string literals.
fn balanced_end(bytes: &[u8], start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::WhitespaceTokenizer;

    const WS: WhitespaceTokenizer = WhitespaceTokenizer;

    #[test]
    fn rating_parses_bare_and_embedded() {
        assert_eq!(parse_rating("Rating: [[7]]").unwrap().value(), 7);
        assert_eq!(
            parse_rating("I considered the shapes. Rating: [[10]] overall.")
                .unwrap()
                .value(),
            10
        );
        assert_eq!(parse_rating("Rating: [[0]]").unwrap().value(), 0);
    }

    #[test]
    fn rating_first_occurrence_wins() {
        assert_eq!(
            parse_rating("Rating: [[3]] but on reflection Rating: [[9]]")
                .unwrap()
                .value(),
            3
        );
        // An out-of-range first occurrence is an error even with a valid one later.
        assert_eq!(
            parse_rating("Rating: [[11]] ... Rating: [[5]]"),
            Err(ParseError::RatingOutOfRange(11))
        );
    }

    #[test]
    fn rating_skips_malformed_occurrences() {
        // "[[x]]" is not the pattern; the later well-formed one counts.
        assert_eq!(
            parse_rating("Rating: [[x]] then Rating: [[5]]").unwrap().value(),
            5
        );
        assert_eq!(
            parse_rating("Rating: [[5] missing close"),
            Err(ParseError::NoRatingFound)
        );
        assert_eq!(parse_rating(""), Err(ParseError::NoRatingFound));
        assert_eq!(parse_rating("no rating here"), Err(ParseError::NoRatingFound));
    }

    #[test]
    fn rating_handles_huge_numbers_without_panicking() {
        assert_eq!(
            parse_rating("Rating: [[99999999999999999999999]]"),
            Err(ParseError::RatingOutOfRange(u64::MAX))
        );
    }

    #[test]
    fn reply_parses_plain_object() {
        let r = parse_engineer_reply(
            r#"{"improvement": "added colour", "prompt": "a red cube"}"#,
            &WS,
        )
        .unwrap();
        assert_eq!(r.improvement, "added colour");
        assert_eq!(r.prompt.text(), "a red cube");
        assert_eq!(r.prompt.token_count(), 3);
    }

    #[test]
    fn reply_parses_from_prose_and_fences() {
        let raw = "Sure! Here is my attempt:\n```json\n{\"improvement\": \"i\", \"prompt\": \"p q\"}\n```\nLet me know.";
        let r = parse_engineer_reply(raw, &WS).unwrap();
        assert_eq!(r.prompt.text(), "p q");
        assert_eq!(r.raw, raw);
    }

    #[test]
    fn reply_skips_doubled_braces_to_inner_object() {
        // Some completions echo template braces: {{ ... }} is not JSON, but the
        // inner object is.
        let raw = r#"{{"improvement": "i", "prompt": "inner"}}"#;
        let r = parse_engineer_reply(raw, &WS).unwrap();
        assert_eq!(r.prompt.text(), "inner");
    }

    #[test]
    fn reply_ignores_braces_inside_strings() {
        let raw = r#"{"improvement": "kept the } brace", "prompt": "curly { set"}"#;
        let r = parse_engineer_reply(raw, &WS).unwrap();
        assert_eq!(r.prompt.text(), "curly { set");
    }

    #[test]
    fn reply_missing_keys_and_empty_prompt_are_typed_errors() {
        assert_eq!(
            parse_engineer_reply(r#"{"improvement": "only one key"}"#, &WS),
            Err(ParseError::MissingKey("prompt"))
        );
        assert_eq!(
            parse_engineer_reply(r#"{"prompt": "p"}"#, &WS),
            Err(ParseError::MissingKey("improvement"))
        );
        assert_eq!(
            parse_engineer_reply(r#"{"improvement": "i", "prompt": ""}"#, &WS),
            Err(ParseError::EmptyPrompt)
        );
        assert_eq!(
            parse_engineer_reply(r#"{"improvement": "i", "prompt": 3}"#, &WS),
            Err(ParseError::MissingKey("prompt"))
        );
        assert_eq!(parse_engineer_reply("no object", &WS), Err(ParseError::NoObjectFound));
        assert_eq!(parse_engineer_reply("{broken", &WS), Err(ParseError::NoObjectFound));
    }

    #[test]
    fn reply_first_object_decides_even_if_keys_missing() {
        // The first parseable object is authoritative; a later complete object
        // does not rescue it.
        let raw = r#"{"a": 1} {"improvement": "i", "prompt": "p"}"#;
        assert_eq!(
            parse_engineer_reply(raw, &WS),
            Err(ParseError::MissingKey("improvement"))
        );
    }

    #[test]
    fn reply_nested_object_is_taken_whole() {
        let raw = r#"{"outer": {"improvement": "i", "prompt": "p"}}"#;
        // The outer object is the first balanced object and lacks the keys.
        assert_eq!(
            parse_engineer_reply(raw, &WS),
            Err(ParseError::MissingKey("improvement"))
        );
    }
}
