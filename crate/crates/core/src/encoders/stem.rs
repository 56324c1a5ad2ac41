//! Rule-based suffix stemmer.
//!
//! Rules are tried in order and the first applicable one wins. A rule only
//! fires when the remaining stem keeps at least [`MIN_STEM`] characters:
//!
//! | suffix | replacement | example              |
//! |--------|-------------|----------------------|
//! | `sses` | `ss`        | classes → class      |
//! | `ies`  | `y`         | companies → company  |
//! | `ss`   | `ss`        | (kept, stops `s`)    |
//! | `ing`  |             | referring → referr   |
//! | `ed`   |             | referred → referr    |
//! | `ly`   |             | quickly → quick      |
//! | `ment` |             | placement → place    |
//! | `s`    |             | referrals → referral |
//!
//! Mask tokens and non-ASCII words pass through unchanged.

const MIN_STEM: usize = 3;

const RULES: [(&str, &str); 8] = [
    ("sses", "ss"),
    ("ies", "y"),
    ("ss", "ss"),
    ("ing", ""),
    ("ed", ""),
    ("ly", ""),
    ("ment", ""),
    ("s", ""),
];

pub fn stem(word: &str) -> String {
    if !word.is_ascii() || word.starts_with('[') {
        return word.to_string();
    }
    for (suffix, replacement) in RULES {
        if let Some(base) = word.strip_suffix(suffix) {
            return if base.len() >= MIN_STEM {
                format!("{base}{replacement}")
            } else {
                word.to_string()
            };
        }
    }
    word.to_string()
}

#[cfg(test)]
mod tests {
    use super::stem;

    #[test]
    fn documented_examples() {
        assert_eq!(stem("classes"), "class");
        assert_eq!(stem("companies"), "company");
        assert_eq!(stem("boss"), "boss");
        assert_eq!(stem("referring"), "referr");
        assert_eq!(stem("referred"), "referr");
        assert_eq!(stem("quickly"), "quick");
        assert_eq!(stem("placement"), "place");
        assert_eq!(stem("referrals"), "referral");
    }

    #[test]
    fn short_words_untouched() {
        assert_eq!(stem("is"), "is");
        assert_eq!(stem("bed"), "bed");
        assert_eq!(stem("sing"), "sing");
        assert_eq!(stem("[ROLE]"), "[ROLE]");
    }
}
