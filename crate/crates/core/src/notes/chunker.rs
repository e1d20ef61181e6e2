use std::ops::Range;

use super::ChunkingConfig;
use crate::model::{NoteChunk, NoteDocument};
use crate::text;

struct Token {
    bytes: Range<usize>,
    /// A sentence ends right after this token.
    sentence_end: bool,
}

fn scan_tokens(text: &str) -> Vec<Token> {
    let mut spans: Vec<Range<usize>> = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (c.is_whitespace(), start) {
            (true, Some(s)) => {
                spans.push(s..i);
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        spans.push(s..text.len());
    }
    let mut tokens = Vec::with_capacity(spans.len());
    for (i, span) in spans.iter().enumerate() {
        let word = &text[span.clone()];
        let punct = word.ends_with(['.', '?', '!']);
        let blank_line = spans.get(i + 1).is_some_and(|next| text[span.end..next.start].matches('\n').count() >= 2);
        tokens.push(Token { bytes: span.clone(), sentence_end: punct || blank_line });
    }
    tokens
}

/// Token windows `[start, end)` for a note of `n` tokens.
fn windows(tokens: &[Token], config: &ChunkingConfig) -> Vec<(usize, usize)> {
    let n = tokens.len();
    let size = config.chunk_size_tokens;
    let overlap = config.overlap_tokens;
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let mut end = (start + size).min(n);
        if config.sentence_aware && end < n {
            // snap back to the last sentence end, as long as the next window
            // still starts past this one
            if let Some(e) = (start + overlap + 1..=end).rev().find(|&e| tokens[e - 1].sentence_end) {
                end = e;
            }
        }
        out.push((start, end));
        if end == n {
            break;
        }
        start = end - overlap;
    }
    out
}

/// Lowercased section headers active in each token position range. A header
/// line opens a section that lasts until the next header.
fn section_starts(text: &str, tokens: &[Token], headers: &[String]) -> Vec<(usize, String)> {
    let lowered: Vec<String> = headers.iter().map(|h| h.to_lowercase()).collect();
    let window = lowered.iter().map(|h| h.chars().count()).max().unwrap_or(0) + 8;
    let mut starts = Vec::new();
    for (i, tok) in tokens.iter().enumerate() {
        let at_line_start = match i.checked_sub(1) {
            None => true,
            Some(p) => text[tokens[p].bytes.end..tok.bytes.start].contains('\n'),
        };
        if !at_line_start {
            continue;
        }
        let rest: String = text[tok.bytes.start..].chars().take(window).collect::<String>().to_lowercase();
        // longest header first so "discharge medications" beats "discharge"
        let hit = lowered
            .iter()
            .filter(|h| rest.starts_with(h.as_str()) && rest[h.len()..].trim_start_matches([' ', '\t']).starts_with(':'))
            .max_by_key(|h| h.len());
        if let Some(h) = hit {
            starts.push((i, h.clone()));
        }
    }
    starts
}

fn sections_for(starts: &[(usize, String)], range: (usize, usize)) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let active = starts.iter().take_while(|(i, _)| *i <= range.0).last();
    let inside = starts.iter().filter(|(i, _)| *i > range.0 && *i < range.1);
    for (_, name) in active.into_iter().chain(inside) {
        if !out.contains(name) {
            out.push(name.clone());
        }
    }
    out
}

/// Splits one note into overlapping token windows.
///
/// Each chunk's text is `"[timestamp] "` followed by the original note text
/// of its token range. With `sentence_aware`, a window that would cut a
/// sentence ends at the last sentence boundary inside it instead, unless
/// that boundary lies within the overlap region.
pub fn chunk_note(note: &NoteDocument, config: &ChunkingConfig) -> Vec<NoteChunk> {
    let normalized = text::nfc(&note.text);
    let tokens = scan_tokens(&normalized);
    if tokens.is_empty() {
        return Vec::new();
    }
    let starts = section_starts(&normalized, &tokens, &config.section_headers);
    let prefix = NoteChunk::prefix(note.timestamp);
    windows(&tokens, config)
        .into_iter()
        .enumerate()
        .map(|(index, (start, end))| {
            let body = &normalized[tokens[start].bytes.start..tokens[end - 1].bytes.end];
            NoteChunk {
                note_id: note.id.clone(),
                index,
                token_span: (start, end),
                timestamp: note.timestamp,
                text: format!("{prefix}{body}"),
                sections: sections_for(&starts, (start, end)),
                embedding: None,
            }
        })
        .collect()
}

/// Chunks every note, notes in the given order, chunks in document order.
pub fn chunk_notes(notes: &[NoteDocument], config: &ChunkingConfig) -> Vec<NoteChunk> {
    notes.iter().flat_map(|n| chunk_note(n, config)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Timestamp;

    fn note(text: &str) -> NoteDocument {
        NoteDocument {
            id: "n1".into(),
            patient_scope: "p".into(),
            timestamp: "2150-03-01 08:00:00".parse::<Timestamp>().unwrap(),
            text: text.into(),
        }
    }

    fn plain(size: usize, overlap: usize) -> ChunkingConfig {
        ChunkingConfig { chunk_size_tokens: size, overlap_tokens: overlap, sentence_aware: false, ..Default::default() }
    }

    fn numbered(n: usize) -> String {
        (1..=n).map(|i| format!("t{i}")).collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn short_note_is_one_chunk() {
        let chunks = chunk_note(&note(&numbered(100)), &ChunkingConfig::default());
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].token_span, (0, 100));
        assert_eq!(chunks[0].text, format!("[2150-03-01 08:00:00] {}", numbered(100)));
    }

    #[test]
    fn empty_note_has_no_chunks() {
        assert!(chunk_note(&note(""), &ChunkingConfig::default()).is_empty());
        assert!(chunk_note(&note("  \n "), &ChunkingConfig::default()).is_empty());
    }

    #[test]
    fn sliding_window_boundaries() {
        // stride is size - overlap; the last window is clipped at the end
        let (size, overlap, n) = (256usize, 32usize, 500usize);
        let mut expected = Vec::new();
        let mut s = 1;
        loop {
            let e = (s + size - 1).min(n);
            expected.push((s, e));
            if e == n {
                break;
            }
            s += size - overlap;
        }
        assert_eq!(expected, [(1, 256), (225, 480), (449, 500)]);
        let got: Vec<(usize, usize)> =
            chunk_note(&note(&numbered(n)), &plain(size, overlap)).iter().map(|c| (c.token_span.0 + 1, c.token_span.1)).collect();
        assert_eq!(got, expected);
        let chunks = chunk_note(&note(&numbered(n)), &plain(size, overlap));
        assert!(chunks[1].body().starts_with("t225 "));
        assert!(chunks[2].body().ends_with(" t500"));
    }

    #[test]
    fn sentence_aware_snaps_to_sentence_end() {
        let cfg = ChunkingConfig { chunk_size_tokens: 6, overlap_tokens: 1, sentence_aware: true, ..Default::default() };
        let chunks = chunk_note(&note("a b c. d e f g h i j"), &cfg);
        assert_eq!(chunks[0].body(), "a b c.");
        assert_eq!(chunks[1].token_span.0, 2);
    }

    #[test]
    fn sentence_end_inside_overlap_is_ignored() {
        let cfg = ChunkingConfig { chunk_size_tokens: 4, overlap_tokens: 2, sentence_aware: true, ..Default::default() };
        let chunks = chunk_note(&note("a. b c d e f"), &cfg);
        assert_eq!(chunks[0].token_span, (0, 4));
    }

    #[test]
    fn blank_line_is_a_sentence_boundary() {
        let cfg = ChunkingConfig { chunk_size_tokens: 5, overlap_tokens: 0, sentence_aware: true, ..Default::default() };
        let chunks = chunk_note(&note("a b c\n\nd e f g"), &cfg);
        assert_eq!(chunks[0].body(), "a b c");
    }

    #[test]
    fn sections_are_tagged() {
        let text = "Brief Hospital Course: stable.\nDischarge Medications:\naspirin 81 mg daily\nPlan: follow up";
        let chunks = chunk_note(&note(text), &plain(4, 1));
        assert_eq!(chunks[0].sections, ["brief hospital course"]);
        assert!(chunks.iter().any(|c| c.sections.contains(&"discharge medications".to_owned())));
        assert_eq!(chunks.last().unwrap().sections.last().unwrap(), "plan");
    }

    #[test]
    fn original_line_breaks_are_kept() {
        let chunks = chunk_note(&note("Plan:\nrest"), &ChunkingConfig::default());
        assert_eq!(chunks[0].body(), "Plan:\nrest");
    }
}
