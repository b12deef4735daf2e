use super::vocab::PAD_TOKEN;

/// Characters split off into their own tokens.
pub const PUNCTUATION: [char; 6] = ['.', ',', '?', '!', ':', ';'];

/// Lowercases, splits on whitespace and separates punctuation. An empty
/// utterance becomes a single PAD token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.to_lowercase().split_whitespace() {
        let mut cur = String::new();
        for ch in word.chars() {
            if PUNCTUATION.contains(&ch) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.push(ch);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    if out.is_empty() {
        out.push(PAD_TOKEN.to_string());
    }
    out
}
