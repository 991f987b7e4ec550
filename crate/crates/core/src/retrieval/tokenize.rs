use alloc::string::String;
use alloc::vec::Vec;

/// Lowercases and splits on anything that is not alphanumeric. No stemming,
/// no stopwords.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            current.extend(ch.to_lowercase());
        } else if !current.is_empty() {
            tokens.push(core::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert_eq!(
            tokenize("Sepsis, postprocedural"),
            ["sepsis", "postprocedural"]
        );
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("Hx of CVA"), ["hx", "of", "cva"]);
        assert_eq!(tokenize("  --A22.7(x) "), ["a22", "7", "x"]);
        assert_eq!(tokenize("Ménière's"), ["ménière", "s"]);
    }
}
