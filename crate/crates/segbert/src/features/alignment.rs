//! Forced-alignment file parsing.
//!
//! One utterance per UTF-8 text file:
//!
//! ```text
//! PHONES n
//! <phone_id> <start_frame> <end_frame>   (n lines, end exclusive)
//! SYLLABLES m
//! <first_phone_idx> <last_phone_idx>     (m lines, inclusive)
//! ```
//!
//! Alignments come from an external ASR forced aligner; this module only
//! parses and validates. Phones must tile a prefix of the mel frames without
//! gaps or overlaps, and syllables must partition a prefix of the phone list.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AlignmentError {
    #[error("line {line}: expected `{expected}`")]
    Malformed { line: usize, expected: &'static str },
    #[error("phone {index}: start {start} >= end {end}")]
    EmptyPhone { index: usize, start: u32, end: u32 },
    #[error("phone {index}: starts at {start} but previous phone ends at {prev_end}")]
    NonContiguous { index: usize, start: u32, prev_end: u32 },
    #[error("syllable {index}: reversed range {first}..{last}")]
    ReversedRange { index: usize, first: u32, last: u32 },
    #[error("syllable {index}: phone index {phone} out of range ({phones} phones)")]
    SyllableOutOfRange { index: usize, phone: u32, phones: usize },
    #[error("syllable {index}: starts at phone {first} but expected {expected} (syllables must tile a prefix)")]
    SyllableGap { index: usize, first: u32, expected: u32 },
    #[error("alignment ends at frame {end} but the mel has only {frames} frames")]
    BeyondMel { end: u32, frames: usize },
    #[error("alignment declares no phones")]
    NoPhones,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Phone {
    pub id: String,
    /// inclusive
    pub start_frame: u32,
    /// exclusive
    pub end_frame: u32,
}

/// Validated phone and syllable boundaries for one utterance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlignmentRecord {
    pub phones: Vec<Phone>,
    /// Inclusive phone-index ranges, tiling a prefix of `phones`.
    pub syllables: Vec<(u32, u32)>,
}

impl AlignmentRecord {
    pub fn new(phones: Vec<Phone>, syllables: Vec<(u32, u32)>) -> Result<Self, AlignmentError> {
        let rec = Self { phones, syllables };
        rec.validate()?;
        Ok(rec)
    }

    fn validate(&self) -> Result<(), AlignmentError> {
        if self.phones.is_empty() {
            return Err(AlignmentError::NoPhones);
        }
        let mut prev_end = self.phones[0].start_frame;
        for (index, p) in self.phones.iter().enumerate() {
            if p.start_frame >= p.end_frame {
                return Err(AlignmentError::EmptyPhone { index, start: p.start_frame, end: p.end_frame });
            }
            if index > 0 && p.start_frame != prev_end {
                return Err(AlignmentError::NonContiguous { index, start: p.start_frame, prev_end });
            }
            prev_end = p.end_frame;
        }
        let mut expected = 0u32;
        for (index, &(first, last)) in self.syllables.iter().enumerate() {
            if first > last {
                return Err(AlignmentError::ReversedRange { index, first, last });
            }
            if last as usize >= self.phones.len() {
                return Err(AlignmentError::SyllableOutOfRange { index, phone: last, phones: self.phones.len() });
            }
            if first != expected {
                return Err(AlignmentError::SyllableGap { index, first, expected });
            }
            expected = last + 1;
        }
        Ok(())
    }

    /// Checks frame ranges against a paired mel of `frames` frames.
    pub fn validate_against_frames(&self, frames: usize) -> Result<(), AlignmentError> {
        let end = self.phones.last().map(|p| p.end_frame).unwrap_or(0);
        if end as usize > frames {
            return Err(AlignmentError::BeyondMel { end, frames });
        }
        Ok(())
    }

    pub fn end_frame(&self) -> u32 {
        self.phones.last().map(|p| p.end_frame).unwrap_or(0)
    }

    /// Canonical text form; `parse(serialize(r)) == r` for all valid records.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("PHONES {}\n", self.phones.len()));
        for p in &self.phones {
            out.push_str(&format!("{} {} {}\n", p.id, p.start_frame, p.end_frame));
        }
        out.push_str(&format!("SYLLABLES {}\n", self.syllables.len()));
        for &(a, b) in &self.syllables {
            out.push_str(&format!("{a} {b}\n"));
        }
        out
    }
}

/// Parses and validates the documented text format.
pub fn parse(bytes: &[u8]) -> Result<AlignmentRecord, AlignmentError> {
    let text = std::str::from_utf8(bytes).map_err(|_| AlignmentError::Malformed { line: 1, expected: "UTF-8 text" })?;
    let mut lines = text.lines().enumerate();

    let (_, header) = lines.next().ok_or(AlignmentError::Malformed { line: 1, expected: "PHONES <n>" })?;
    let n: usize = parse_header(header, "PHONES").ok_or(AlignmentError::Malformed { line: 1, expected: "PHONES <n>" })?;

    let mut phones = Vec::with_capacity(n.min(4096));
    for i in 0..n {
        let (lineno, line) = lines.next().ok_or(AlignmentError::Malformed { line: i + 2, expected: "<phone_id> <start> <end>" })?;
        let mut it = line.split_whitespace();
        let (id, start, end) = (it.next(), it.next(), it.next());
        match (id, start.and_then(|s| s.parse::<u32>().ok()), end.and_then(|s| s.parse::<u32>().ok()), it.next()) {
            (Some(id), Some(start), Some(end), None) => phones.push(Phone { id: id.to_string(), start_frame: start, end_frame: end }),
            _ => return Err(AlignmentError::Malformed { line: lineno + 1, expected: "<phone_id> <start> <end>" }),
        }
    }

    let (syl_line, header) = lines.next().ok_or(AlignmentError::Malformed { line: n + 2, expected: "SYLLABLES <m>" })?;
    let m: usize = parse_header(header, "SYLLABLES").ok_or(AlignmentError::Malformed { line: syl_line + 1, expected: "SYLLABLES <m>" })?;

    let mut syllables = Vec::with_capacity(m.min(4096));
    for i in 0..m {
        let (lineno, line) = lines.next().ok_or(AlignmentError::Malformed { line: n + 3 + i, expected: "<first_idx> <last_idx>" })?;
        let mut it = line.split_whitespace();
        match (it.next().and_then(|s| s.parse::<u32>().ok()), it.next().and_then(|s| s.parse::<u32>().ok()), it.next()) {
            (Some(a), Some(b), None) => syllables.push((a, b)),
            _ => return Err(AlignmentError::Malformed { line: lineno + 1, expected: "<first_idx> <last_idx>" }),
        }
    }
    if let Some((lineno, line)) = lines.next() {
        if !line.trim().is_empty() {
            return Err(AlignmentError::Malformed { line: lineno + 1, expected: "end of file" });
        }
    }

    AlignmentRecord::new(phones, syllables)
}

fn parse_header(line: &str, keyword: &str) -> Option<usize> {
    let mut it = line.split_whitespace();
    if it.next()? != keyword {
        return None;
    }
    let n = it.next()?.parse().ok()?;
    if it.next().is_some() {
        return None;
    }
    Some(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn phone(id: &str, s: u32, e: u32) -> Phone {
        Phone { id: id.into(), start_frame: s, end_frame: e }
    }

    #[test]
    fn two_phones_one_syllable_is_valid() {
        let r = parse(b"PHONES 2\np1 0 5\np2 5 9\nSYLLABLES 1\n0 1\n").unwrap();
        assert_eq!(r.phones, vec![phone("p1", 0, 5), phone("p2", 5, 9)]);
        assert_eq!(r.syllables, vec![(0, 1)]);
    }

    #[test]
    fn overlap_is_rejected_with_index() {
        let err = parse(b"PHONES 2\np1 0 5\np2 4 9\nSYLLABLES 0\n").unwrap_err();
        assert_eq!(err, AlignmentError::NonContiguous { index: 1, start: 4, prev_end: 5 });
    }

    #[test]
    fn gap_is_rejected_with_index() {
        let err = parse(b"PHONES 2\np1 0 5\np2 6 9\nSYLLABLES 0\n").unwrap_err();
        assert_eq!(err, AlignmentError::NonContiguous { index: 1, start: 6, prev_end: 5 });
    }

    #[test]
    fn reversed_syllable_range_rejected() {
        let err = parse(b"PHONES 2\np1 0 5\np2 5 9\nSYLLABLES 1\n1 0\n").unwrap_err();
        assert_eq!(err, AlignmentError::ReversedRange { index: 0, first: 1, last: 0 });
    }

    #[test]
    fn frames_beyond_mel_detected_when_paired() {
        let r = parse(b"PHONES 1\np1 0 10\nSYLLABLES 0\n").unwrap();
        assert_eq!(r.validate_against_frames(9), Err(AlignmentError::BeyondMel { end: 10, frames: 9 }));
        assert!(r.validate_against_frames(10).is_ok());
    }

    #[test]
    fn serialize_is_canonical_fixed_point() {
        let text = "PHONES 2\np1 0 5\np2 5 9\nSYLLABLES 1\n0 1\n";
        let r = parse(text.as_bytes()).unwrap();
        assert_eq!(r.serialize(), text);
    }
}
