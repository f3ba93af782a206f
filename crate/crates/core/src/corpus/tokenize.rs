/// Lowercase, pull punctuation out into standalone tokens, split on
/// whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_whitespace() {
            flush(&mut cur, &mut out);
        } else if ch.is_ascii_punctuation() {
            flush(&mut cur, &mut out);
            out.push(ch.to_string());
        } else {
            cur.push(ch);
        }
    }
    flush(&mut cur, &mut out);
    out
}

fn flush(cur: &mut String, out: &mut Vec<String>) {
    if !cur.is_empty() {
        out.push(std::mem::take(cur));
    }
}

pub(crate) fn is_terminal(token: &str) -> bool {
    matches!(token, "." | "!" | "?")
}

/// Split a token stream after each terminal punctuation token. A trailing
/// run without terminal punctuation forms its own sentence.
pub fn split_sentences(tokens: Vec<String>) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    for t in tokens {
        let end = is_terminal(&t);
        cur.push(t);
        if end {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn punctuation_becomes_tokens() {
        assert_eq!(
            tokenize("Breakfast was OK, but the staff were incompetent."),
            ["breakfast", "was", "ok", ",", "but", "the", "staff", "were", "incompetent", "."]
        );
    }

    #[test]
    fn sentences_split_on_terminal_marks() {
        let s = split_sentences(tokenize("It rained! Was it cold? Yes. no end"));
        assert_eq!(s.len(), 4);
        assert_eq!(s[0], ["it", "rained", "!"]);
        assert_eq!(s[3], ["no", "end"]);
    }
}
