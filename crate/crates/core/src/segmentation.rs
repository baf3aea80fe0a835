//! Two-stage reasoning-step segmentation.
//!
//! Stage one cuts the detokenized text in front of every cognitive marker
//! (`Wait`, `However`, ...). Stage two cuts on the formatting delimiter
//! (`"\n\n"` by default), dropping the delimiter itself. Whitespace-only
//! fragments are discarded and the surviving character ranges are snapped to
//! token boundaries.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Markers that open a new reasoning step.
pub const DEFAULT_MARKERS: [&str; 6] = ["</think>", "Wait", "But", "However", "Hmm", "Alternatively"];

pub const DEFAULT_DELIMITER: &str = "\n\n";

/// Half-open token range `[start, end)` of one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct StepRange {
    pub start: usize,
    pub end: usize,
}

impl StepRange {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn tokens(&self) -> Range<usize> {
        self.start..self.end
    }
}

impl From<[usize; 2]> for StepRange {
    fn from(v: [usize; 2]) -> Self {
        Self::new(v[0], v[1])
    }
}

impl From<StepRange> for [usize; 2] {
    fn from(r: StepRange) -> Self {
        [r.start, r.end]
    }
}

/// Ordered, disjoint, non-empty token ranges, one per reasoning step.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StepBoundaries(Vec<StepRange>);

impl StepBoundaries {
    /// Builds boundaries and checks ordering, disjointness and non-emptiness.
    pub fn new(ranges: Vec<StepRange>) -> Result<Self> {
        let b = Self(ranges);
        b.check_shape()?;
        Ok(b)
    }

    /// Contiguous steps of the given sizes starting at token 0.
    pub fn from_lengths(lengths: &[usize]) -> Result<Self> {
        let mut start = 0;
        let mut ranges = Vec::with_capacity(lengths.len());
        for &len in lengths {
            ranges.push(StepRange::new(start, start + len));
            start += len;
        }
        Self::new(ranges)
    }

    fn check_shape(&self) -> Result<()> {
        let mut prev_end = 0;
        for (k, r) in self.0.iter().enumerate() {
            if r.is_empty() {
                return Err(Error::Invalid(format!("step {k} is empty ({}..{})", r.start, r.end)));
            }
            if k > 0 && r.start < prev_end {
                return Err(Error::Invalid(format!(
                    "step {k} starts at {} before previous step ends at {prev_end}",
                    r.start
                )));
            }
            prev_end = r.end;
        }
        Ok(())
    }

    /// Checks the ranges against a trace of `num_tokens` tokens.
    pub fn validate(&self, num_tokens: usize) -> Result<()> {
        self.check_shape()?;
        if let Some(last) = self.0.last() {
            if last.end > num_tokens {
                return Err(Error::Invalid(format!(
                    "step boundary {} exceeds token count {num_tokens}",
                    last.end
                )));
            }
        }
        Ok(())
    }

    /// Number of steps.
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ranges(&self) -> &[StepRange] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = &StepRange> {
        self.0.iter()
    }

    /// Step index containing `token`, if any.
    pub fn step_of(&self, token: usize) -> Option<usize> {
        let idx = self.0.partition_point(|r| r.end <= token);
        self.0.get(idx).filter(|r| r.start <= token).map(|_| idx)
    }
}

/// Marker set and delimiter for [`segment`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentConfig {
    pub markers: Vec<String>,
    pub delimiter: String,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            markers: DEFAULT_MARKERS.iter().map(|s| s.to_string()).collect(),
            delimiter: DEFAULT_DELIMITER.to_string(),
        }
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

fn marker_at_word_boundary(text: &str, pos: usize, marker: &str) -> bool {
    let first_is_word = marker.chars().next().is_some_and(is_word_char);
    let last_is_word = marker.chars().next_back().is_some_and(is_word_char);
    if first_is_word && text[..pos].chars().next_back().is_some_and(is_word_char) {
        return false;
    }
    if last_is_word && text[pos + marker.len()..].chars().next().is_some_and(is_word_char) {
        return false;
    }
    true
}

/// Splits `text` into step fragments, returned as byte ranges.
///
/// Bytes not covered by any returned range are delimiter occurrences or
/// whitespace-only fragments.
pub fn segment_text(text: &str, cfg: &SegmentConfig) -> Vec<Range<usize>> {
    let mut cuts: Vec<usize> = Vec::new();
    for marker in cfg.markers.iter().filter(|m| !m.is_empty()) {
        for (pos, _) in text.match_indices(marker.as_str()) {
            if marker_at_word_boundary(text, pos, marker) {
                cuts.push(pos);
            }
        }
    }
    cuts.sort_unstable();
    cuts.dedup();

    let mut pieces: Vec<Range<usize>> = Vec::new();
    let mut seg_start = 0;
    let push_segment = |seg: Range<usize>, pieces: &mut Vec<Range<usize>>| {
        let mut start = seg.start;
        let lo = cuts.partition_point(|&c| c <= seg.start);
        for &c in cuts[lo..].iter().take_while(|&&c| c < seg.end) {
            pieces.push(start..c);
            start = c;
        }
        pieces.push(start..seg.end);
    };
    if !cfg.delimiter.is_empty() {
        for (pos, d) in text.match_indices(cfg.delimiter.as_str()) {
            push_segment(seg_start..pos, &mut pieces);
            seg_start = pos + d.len();
        }
    }
    push_segment(seg_start..text.len(), &mut pieces);

    pieces
        .into_iter()
        .filter(|r| !text[r.clone()].trim().is_empty())
        .collect()
}

/// Segments a token sequence into reasoning steps.
///
/// Character fragments from [`segment_text`] are mapped onto the tokens that
/// contain them; a step whose first character falls inside a token starts at
/// that token, truncating the previous step.
pub fn segment<S: AsRef<str>>(tokens: &[S], cfg: &SegmentConfig) -> StepBoundaries {
    let mut text = String::new();
    let mut starts = Vec::with_capacity(tokens.len());
    for t in tokens {
        starts.push(text.len());
        text.push_str(t.as_ref());
    }
    let token_of = |byte: usize| starts.partition_point(|&s| s <= byte) - 1;

    let mut ranges: Vec<StepRange> = segment_text(&text, cfg)
        .into_iter()
        .map(|r| StepRange::new(token_of(r.start), token_of(r.end - 1) + 1))
        .collect();
    for i in 1..ranges.len() {
        let next_start = ranges[i].start;
        let prev = &mut ranges[i - 1];
        prev.end = prev.end.min(next_start);
    }
    ranges.retain(|r| !r.is_empty());
    // Two fragments sharing one token collapse onto it; keep the later one.
    let mut out: Vec<StepRange> = Vec::with_capacity(ranges.len());
    for r in ranges {
        if let Some(last) = out.last() {
            if r.start < last.end {
                out.pop();
            }
        }
        out.push(r);
    }
    StepBoundaries(out)
}
