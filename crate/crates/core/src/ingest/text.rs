use std::sync::OnceLock;

use regex::Regex;

use super::Sentence;

fn placeholder() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?s)\[\*\*.*?\*\*\]").expect("valid placeholder regex"))
}

/// Strips `[** ... **]` de-identification placeholders, lowercases unless
/// `cased`, and collapses whitespace runs to single spaces.
pub fn clean_text(raw: &str, cased: bool) -> String {
    let re = placeholder();
    let mut text = raw.to_string();
    while re.is_match(&text) {
        text = re.replace_all(&text, " ").into_owned();
    }
    if !cased {
        text = text.to_lowercase();
    }
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Splits text after `.`, `!` or `?` when followed by whitespace, and at blank
/// lines. Fragments are trimmed and empty ones dropped.
pub fn split_sentence_texts(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut current = String::new();
    let mut i = 0;
    let flush = |current: &mut String, out: &mut Vec<String>| {
        let t = current.trim();
        if !t.is_empty() {
            out.push(t.to_string());
        }
        current.clear();
    };
    while i < chars.len() {
        let c = chars[i];
        if c == '\n' {
            // blank line: newline, optional horizontal whitespace, newline
            let mut j = i + 1;
            while j < chars.len() && chars[j].is_whitespace() && chars[j] != '\n' {
                j += 1;
            }
            if j < chars.len() && chars[j] == '\n' {
                flush(&mut current, &mut out);
                i = j + 1;
                continue;
            }
        }
        current.push(c);
        if matches!(c, '.' | '!' | '?') && chars.get(i + 1).is_some_and(|n| n.is_whitespace()) {
            flush(&mut current, &mut out);
        }
        i += 1;
    }
    flush(&mut current, &mut out);
    out
}

pub fn split_sentences(note_id: &str, text: &str) -> Vec<Sentence> {
    split_sentence_texts(text)
        .into_iter()
        .enumerate()
        .map(|(index, text)| Sentence {
            note_id: note_id.to_string(),
            index,
            text,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cleaning_examples() {
        assert_eq!(clean_text("Pt [**Name**] on Lasix", false), "pt on lasix");
        assert_eq!(clean_text("", false), "");
        assert_eq!(clean_text("A  B\n\nC", false), "a b c");
        assert_eq!(clean_text("A  B", true), "A B");
        assert_eq!(clean_text("x [**2101-1-1**]\n[**Hospital 1**] y", false), "x y");
    }

    #[test]
    fn nested_brackets() {
        // the placeholder becomes a space, so the remains cannot re-form one
        assert_eq!(clean_text("a [*[** x **]* y **] b", false), "a [* * y **] b");
        assert_eq!(clean_text("[** a [** x **] b **]", false), "b **]");
    }

    #[test]
    fn sentence_examples() {
        assert_eq!(split_sentence_texts("no aki. creatinine stable."), vec!["no aki.", "creatinine stable."]);
        assert_eq!(split_sentence_texts("one sentence"), vec!["one sentence"]);
        let s = split_sentences("n1", "a. b. c.");
        assert_eq!(s.iter().map(|s| s.index).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(s[2].text, "c.");
        assert!(s.iter().all(|s| s.note_id == "n1"));
    }

    #[test]
    fn decimals_and_blank_lines() {
        assert_eq!(split_sentence_texts("cr 1.3 today"), vec!["cr 1.3 today"]);
        assert_eq!(split_sentence_texts("first part\n \nsecond part"), vec!["first part", "second part"]);
        assert_eq!(split_sentence_texts("why? because! ok"), vec!["why?", "because!", "ok"]);
        assert!(split_sentence_texts("   ").is_empty());
    }

    proptest! {
        #[test]
        fn clean_is_idempotent(raw in "[a-zA-Z \\n\\[\\]\\*.]{0,40}") {
            let once = clean_text(&raw, false);
            prop_assert_eq!(clean_text(&once, false), once.clone());
            let cased = clean_text(&raw, true);
            prop_assert_eq!(clean_text(&cased, true), cased.clone());
        }

        #[test]
        fn sentences_cover_cleaned_text(raw in "[a-z .!?\\n]{0,60}") {
            let cleaned = clean_text(&raw, false);
            let sentences = split_sentence_texts(&cleaned);
            prop_assert!(sentences.iter().all(|s| !s.is_empty()));
            let rejoined = clean_text(&sentences.join(" "), false);
            prop_assert_eq!(rejoined, cleaned);
        }
    }
}
