//! Tagged output grammar: `<info>…</info><think>…</think><answer>…</answer>`.
//!
//! Two layouts are recognised. [`FormatMode::ReasonAnswer`] is the plain
//! think/answer layout; [`FormatMode::CaptionReasonAnswer`] puts an image
//! description in front of the reasoning. Whitespace between segments is
//! tolerated, anything else outside the tags is a format violation. Empty
//! segments parse: a response with an empty `<think></think>` is still
//! well-formed unless the caller asks for strict checking.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const INFO_OPEN: &str = "<info>";
pub const INFO_CLOSE: &str = "</info>";
pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";
pub const ANSWER_OPEN: &str = "<answer>";
pub const ANSWER_CLOSE: &str = "</answer>";

/// Every tag literal of the grammar, in canonical order.
pub const TAG_LITERALS: [&str; 6] = [
    INFO_OPEN,
    INFO_CLOSE,
    THINK_OPEN,
    THINK_CLOSE,
    ANSWER_OPEN,
    ANSWER_CLOSE,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FormatMode {
    /// `<think>` then `<answer>`.
    ReasonAnswer,
    /// `<info>` then `<think>` then `<answer>`.
    CaptionReasonAnswer,
}

impl FormatMode {
    fn segments(self) -> &'static [Segment] {
        match self {
            FormatMode::ReasonAnswer => &[Segment::Think, Segment::Answer],
            FormatMode::CaptionReasonAnswer => &[Segment::Info, Segment::Think, Segment::Answer],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FormatMode::ReasonAnswer => "reason_answer",
            FormatMode::CaptionReasonAnswer => "caption_reason_answer",
        }
    }

    pub fn parse_name(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "reason_answer" | "ra" => Some(FormatMode::ReasonAnswer),
            "caption_reason_answer" | "cra" => Some(FormatMode::CaptionReasonAnswer),
            _ => None,
        }
    }
}

impl fmt::Display for FormatMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Segment {
    Info,
    Think,
    Answer,
}

impl Segment {
    fn open(self) -> &'static str {
        match self {
            Segment::Info => INFO_OPEN,
            Segment::Think => THINK_OPEN,
            Segment::Answer => ANSWER_OPEN,
        }
    }

    fn close(self) -> &'static str {
        match self {
            Segment::Info => INFO_CLOSE,
            Segment::Think => THINK_CLOSE,
            Segment::Answer => ANSWER_CLOSE,
        }
    }

    fn of_tag(tag: &str) -> Segment {
        match tag {
            INFO_OPEN | INFO_CLOSE => Segment::Info,
            THINK_OPEN | THINK_CLOSE => Segment::Think,
            _ => Segment::Answer,
        }
    }
}

/// The segments of one successfully parsed response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredResponse {
    pub info: Option<String>,
    pub think: String,
    pub answer: String,
    pub raw: String,
}

impl StructuredResponse {
    /// Builds a response from its segments; `raw` is set to the canonical
    /// serialization so that `parse_response(&r.raw, mode) == Ok(r)`.
    pub fn from_segments(
        info: Option<&str>,
        think: &str,
        answer: &str,
    ) -> Result<Self, SerializeError> {
        let mut resp = StructuredResponse {
            info: info.map(str::to_owned),
            think: think.to_owned(),
            answer: answer.to_owned(),
            raw: String::new(),
        };
        let mode = if resp.info.is_some() {
            FormatMode::CaptionReasonAnswer
        } else {
            FormatMode::ReasonAnswer
        };
        resp.raw = serialize_response(&resp, mode)?;
        Ok(resp)
    }

    pub fn mode(&self) -> FormatMode {
        if self.info.is_some() {
            FormatMode::CaptionReasonAnswer
        } else {
            FormatMode::ReasonAnswer
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParseFailureKind {
    MissingTag,
    WrongOrder,
    DuplicateTag,
    UnclosedTag,
    StrayContent,
}

/// First grammar violation met in a left-to-right scan. `position` is a
/// character offset into the raw text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("{kind:?} at character {position}")]
pub struct ParseFailure {
    pub kind: ParseFailureKind,
    pub position: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SerializeError {
    #[error("segment `{segment}` contains the tag literal `{tag}`")]
    TagInSegment { segment: &'static str, tag: &'static str },
    #[error("mode {0} requires an info segment")]
    MissingInfo(FormatMode),
}

fn tag_at(raw: &str, byte: usize) -> Option<&'static str> {
    TAG_LITERALS.iter().copied().find(|t| raw[byte..].starts_with(t))
}

/// Byte offset and literal of the next tag at or after `from`.
fn next_tag(raw: &str, from: usize) -> Option<(usize, &'static str)> {
    let rest = &raw[from..];
    let mut search = 0;
    while let Some(lt) = rest[search..].find('<') {
        let at = from + search + lt;
        if let Some(tag) = tag_at(raw, at) {
            return Some((at, tag));
        }
        search += lt + 1;
    }
    None
}

fn skip_ws(raw: &str, mut byte: usize) -> usize {
    for c in raw[byte..].chars() {
        if c.is_whitespace() {
            byte += c.len_utf8();
        } else {
            break;
        }
    }
    byte
}

fn fail(raw: &str, kind: ParseFailureKind, byte: usize) -> ParseFailure {
    ParseFailure {
        kind,
        position: raw[..byte].chars().count(),
    }
}

/// Parses `raw` under `mode`. Segment texts are the exact substrings between
/// the matching tags.
pub fn parse_response(raw: &str, mode: FormatMode) -> Result<StructuredResponse, ParseFailure> {
    let expected = mode.segments();
    let mut contents: Vec<&str> = Vec::with_capacity(expected.len());
    let mut pos = 0usize;

    for (idx, seg) in expected.iter().enumerate() {
        pos = skip_ws(raw, pos);
        if pos >= raw.len() {
            return Err(fail(raw, ParseFailureKind::MissingTag, pos));
        }
        match tag_at(raw, pos) {
            Some(tag) if tag == seg.open() => {}
            Some(tag) => {
                let other = Segment::of_tag(tag);
                let kind = if expected[..idx].contains(&other) {
                    ParseFailureKind::DuplicateTag
                } else if expected.contains(&other) {
                    ParseFailureKind::WrongOrder
                } else {
                    ParseFailureKind::StrayContent
                };
                return Err(fail(raw, kind, pos));
            }
            None => return Err(fail(raw, ParseFailureKind::StrayContent, pos)),
        }
        let open_at = pos;
        let body_start = pos + seg.open().len();
        match next_tag(raw, body_start) {
            Some((at, tag)) if tag == seg.close() => {
                contents.push(&raw[body_start..at]);
                pos = at + tag.len();
            }
            Some((at, tag)) if tag == seg.open() => {
                return Err(fail(raw, ParseFailureKind::DuplicateTag, at));
            }
            Some(_) | None => {
                return Err(fail(raw, ParseFailureKind::UnclosedTag, open_at));
            }
        }
    }

    pos = skip_ws(raw, pos);
    if pos < raw.len() {
        let kind = match tag_at(raw, pos) {
            Some(tag) if expected.contains(&Segment::of_tag(tag)) => ParseFailureKind::DuplicateTag,
            _ => ParseFailureKind::StrayContent,
        };
        return Err(fail(raw, kind, pos));
    }

    let (info, think, answer) = match mode {
        FormatMode::ReasonAnswer => (None, contents[0], contents[1]),
        FormatMode::CaptionReasonAnswer => (Some(contents[0].to_owned()), contents[1], contents[2]),
    };
    Ok(StructuredResponse {
        info,
        think: think.to_owned(),
        answer: answer.to_owned(),
        raw: raw.to_owned(),
    })
}

/// Binary format reward. With `strict_nonempty` every required segment must
/// also contain non-whitespace text.
pub fn format_reward(raw: &str, mode: FormatMode, strict_nonempty: bool) -> u8 {
    match parse_response(raw, mode) {
        Ok(resp) => {
            if strict_nonempty {
                let blank = |s: &str| s.trim().is_empty();
                let info_blank = resp.info.as_deref().is_some_and(blank);
                if info_blank || blank(&resp.think) || blank(&resp.answer) {
                    return 0;
                }
            }
            1
        }
        Err(_) => 0,
    }
}

/// Canonical serialization, no whitespace between tags.
pub fn serialize_response(resp: &StructuredResponse, mode: FormatMode) -> Result<String, SerializeError> {
    let check = |segment: &'static str, text: &str| -> Result<(), SerializeError> {
        match TAG_LITERALS.iter().find(|t| text.contains(*t)) {
            Some(tag) => Err(SerializeError::TagInSegment { segment, tag }),
            None => Ok(()),
        }
    };
    let mut out = String::new();
    if mode == FormatMode::CaptionReasonAnswer {
        let info = resp.info.as_deref().ok_or(SerializeError::MissingInfo(mode))?;
        check("info", info)?;
        out.push_str(INFO_OPEN);
        out.push_str(info);
        out.push_str(INFO_CLOSE);
    }
    check("think", &resp.think)?;
    check("answer", &resp.answer)?;
    out.push_str(THINK_OPEN);
    out.push_str(&resp.think);
    out.push_str(THINK_CLOSE);
    out.push_str(ANSWER_OPEN);
    out.push_str(&resp.answer);
    out.push_str(ANSWER_CLOSE);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    use FormatMode::*;
    use ParseFailureKind::*;

    fn kind(raw: &str, mode: FormatMode) -> ParseFailureKind {
        parse_response(raw, mode).unwrap_err().kind
    }

    #[test]
    fn three_segments() {
        let r = parse_response(
            "<info>A red bar at 5</info><think>5>3</think><answer>A</answer>",
            CaptionReasonAnswer,
        )
        .unwrap();
        assert_eq!(r.info.as_deref(), Some("A red bar at 5"));
        assert_eq!(r.think, "5>3");
        assert_eq!(r.answer, "A");
    }

    #[test]
    fn two_segments() {
        let r = parse_response("<think>x</think><answer>B</answer>", ReasonAnswer).unwrap();
        assert_eq!(r.info, None);
        assert_eq!(r.think, "x");
        assert_eq!(r.answer, "B");
    }

    #[test]
    fn order_violation() {
        assert_eq!(
            kind("<info>c</info><answer>A</answer><think>t</think>", CaptionReasonAnswer),
            WrongOrder
        );
    }

    #[test]
    fn empty_think_is_well_formed() {
        let raw = "<info>short reasoning</info><think></think><answer>A</answer>";
        let r = parse_response(raw, CaptionReasonAnswer).unwrap();
        assert_eq!(r.think, "");
        assert_eq!(format_reward(raw, CaptionReasonAnswer, false), 1);
        assert_eq!(format_reward(raw, CaptionReasonAnswer, true), 0);
    }

    #[test]
    fn empty_input() {
        let e = parse_response("", ReasonAnswer).unwrap_err();
        assert_eq!(e, ParseFailure { kind: MissingTag, position: 0 });
    }

    #[test]
    fn failure_kinds() {
        assert_eq!(kind("<think>x</think>", ReasonAnswer), MissingTag);
        assert_eq!(kind("<think>x</think><answer>B", ReasonAnswer), UnclosedTag);
        assert_eq!(kind("<think>x</think><answer>B</answer>tail", ReasonAnswer), StrayContent);
        assert_eq!(kind("pre<think>x</think><answer>B</answer>", ReasonAnswer), StrayContent);
        assert_eq!(
            kind("<think>x</think><answer>B</answer><answer>C</answer>", ReasonAnswer),
            DuplicateTag
        );
        assert_eq!(kind("<think>x<think>y</think><answer>B</answer>", ReasonAnswer), DuplicateTag);
        assert_eq!(
            kind("<think>x</think><think>y</think><answer>B</answer>", ReasonAnswer),
            DuplicateTag
        );
        assert_eq!(kind("<THINK>x</THINK><answer>B</answer>", ReasonAnswer), StrayContent);
        assert_eq!(kind("<info>c</info><think>x</think><answer>B</answer>", ReasonAnswer), StrayContent);
    }

    #[test]
    fn whitespace_between_tags_tolerated() {
        let r = parse_response("\n <think> x </think>\n\t<answer>B</answer>  \n", ReasonAnswer).unwrap();
        assert_eq!(r.think, " x ");
    }

    #[test]
    fn position_is_char_offset() {
        let e = parse_response("ééé<think>x</think><answer>B</answer>", ReasonAnswer).unwrap_err();
        assert_eq!(e.position, 0);
        let e = parse_response("<think>é</think><answer>B</answer>é", ReasonAnswer).unwrap_err();
        assert_eq!(e, ParseFailure { kind: StrayContent, position: 34 });
    }

    #[test]
    fn serialize_examples() {
        let r = StructuredResponse::from_segments(Some("c"), "t", "a").unwrap();
        assert_eq!(r.raw, "<info>c</info><think>t</think><answer>a</answer>");
        let r = StructuredResponse::from_segments(None, "t", "a").unwrap();
        assert_eq!(r.raw, "<think>t</think><answer>a</answer>");
        let bad = StructuredResponse {
            info: Some("c".into()),
            think: "oops </info>".into(),
            answer: "a".into(),
            raw: String::new(),
        };
        assert!(matches!(
            serialize_response(&bad, CaptionReasonAnswer),
            Err(SerializeError::TagInSegment { segment: "think", .. })
        ));
    }

    fn segment() -> impl Strategy<Value = String> {
        // Includes stray angle brackets and partial tags that are not literals.
        "[a-z0-9 <>/=.é\n]{0,24}".prop_filter("no tag literal", |s| {
            !TAG_LITERALS.iter().any(|t| s.contains(t))
        })
    }

    proptest! {
        #[test]
        fn round_trip(info in proptest::option::of(segment()), think in segment(), answer in segment()) {
            let resp = StructuredResponse::from_segments(info.as_deref(), &think, &answer).unwrap();
            let mode = resp.mode();
            let text = serialize_response(&resp, mode).unwrap();
            prop_assert_eq!(parse_response(&text, mode).unwrap(), resp);
        }

        #[test]
        fn reward_total_and_binary(raw in "(<info>|</info>|<think>|</think>|<answer>|</answer>|[a-z ]{0,3}){0,8}") {
            for mode in [ReasonAnswer, CaptionReasonAnswer] {
                let r = format_reward(&raw, mode, false);
                prop_assert!(r <= 1);
                if let Err(e) = parse_response(&raw, mode) {
                    prop_assert!(e.position <= raw.chars().count());
                    prop_assert_eq!(r, 0);
                }
            }
        }
    }
}
