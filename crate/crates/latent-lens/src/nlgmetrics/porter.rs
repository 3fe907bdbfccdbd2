//! Porter stemmer over ASCII lowercase words, following the original step
//! tables. Within each step the longest matching suffix is selected and its
//! condition tested; a failed condition ends the step without trying shorter
//! suffixes.

fn is_consonant(word: &[u8], i: usize) -> bool {
    match word[i] {
        b'a' | b'e' | b'i' | b'o' | b'u' => false,
        b'y' => {
            if i == 0 {
                true
            } else {
                !is_consonant(word, i - 1)
            }
        }
        _ => true,
    }
}

/// Number of vowel-consonant sequences in `word`.
fn measure(word: &[u8]) -> usize {
    let mut m = 0;
    let mut i = 0;
    let n = word.len();
    while i < n && is_consonant(word, i) {
        i += 1;
    }
    loop {
        while i < n && !is_consonant(word, i) {
            i += 1;
        }
        if i == n {
            return m;
        }
        while i < n && is_consonant(word, i) {
            i += 1;
        }
        m += 1;
        if i == n {
            return m;
        }
    }
}

fn has_vowel(word: &[u8]) -> bool {
    (0..word.len()).any(|i| !is_consonant(word, i))
}

fn ends_double_consonant(word: &[u8]) -> bool {
    let n = word.len();
    n >= 2 && word[n - 1] == word[n - 2] && is_consonant(word, n - 1)
}

/// consonant-vowel-consonant ending where the final consonant is not w, x,
/// or y.
fn ends_cvc(word: &[u8]) -> bool {
    let n = word.len();
    if n < 3 {
        return false;
    }
    is_consonant(word, n - 3)
        && !is_consonant(word, n - 2)
        && is_consonant(word, n - 1)
        && !matches!(word[n - 1], b'w' | b'x' | b'y')
}

fn ends_with(word: &[u8], suffix: &str) -> bool {
    word.len() >= suffix.len() && &word[word.len() - suffix.len()..] == suffix.as_bytes()
}

/// Applies the longest matching rule from `table`; a matched suffix whose
/// measure condition fails still ends the step.
fn apply_table(word: &mut Vec<u8>, table: &[(&str, &str)], min_measure: usize) {
    let best = table
        .iter()
        .filter(|(suffix, _)| ends_with(word, suffix))
        .max_by_key(|(suffix, _)| suffix.len());
    if let Some((suffix, replacement)) = best {
        let stem_len = word.len() - suffix.len();
        if measure(&word[..stem_len]) > min_measure {
            word.truncate(stem_len);
            word.extend_from_slice(replacement.as_bytes());
        }
    }
}

fn step1a(word: &mut Vec<u8>) {
    if ends_with(word, "sses") {
        word.truncate(word.len() - 2);
    } else if ends_with(word, "ies") {
        word.truncate(word.len() - 2);
    } else if ends_with(word, "ss") {
        // unchanged
    } else if ends_with(word, "s") {
        word.truncate(word.len() - 1);
    }
}

fn step1b(word: &mut Vec<u8>) {
    if ends_with(word, "eed") {
        if measure(&word[..word.len() - 3]) > 0 {
            word.truncate(word.len() - 1);
        }
        return;
    }
    let removed = if ends_with(word, "ed") && has_vowel(&word[..word.len() - 2]) {
        word.truncate(word.len() - 2);
        true
    } else if ends_with(word, "ing") && has_vowel(&word[..word.len() - 3]) {
        word.truncate(word.len() - 3);
        true
    } else {
        false
    };
    if !removed {
        return;
    }
    if ends_with(word, "at") || ends_with(word, "bl") || ends_with(word, "iz") {
        word.push(b'e');
    } else if ends_double_consonant(word) && !matches!(word[word.len() - 1], b'l' | b's' | b'z') {
        word.truncate(word.len() - 1);
    } else if measure(word) == 1 && ends_cvc(word) {
        word.push(b'e');
    }
}

fn step1c(word: &mut Vec<u8>) {
    if ends_with(word, "y") && has_vowel(&word[..word.len() - 1]) {
        let n = word.len();
        word[n - 1] = b'i';
    }
}

fn step2(word: &mut Vec<u8>) {
    const TABLE: &[(&str, &str)] = &[
        ("ational", "ate"),
        ("tional", "tion"),
        ("enci", "ence"),
        ("anci", "ance"),
        ("izer", "ize"),
        ("abli", "able"),
        ("alli", "al"),
        ("entli", "ent"),
        ("eli", "e"),
        ("ousli", "ous"),
        ("ization", "ize"),
        ("ation", "ate"),
        ("ator", "ate"),
        ("alism", "al"),
        ("iveness", "ive"),
        ("fulness", "ful"),
        ("ousness", "ous"),
        ("aliti", "al"),
        ("iviti", "ive"),
        ("biliti", "ble"),
    ];
    apply_table(word, TABLE, 0);
}

fn step3(word: &mut Vec<u8>) {
    const TABLE: &[(&str, &str)] = &[
        ("icate", "ic"),
        ("ative", ""),
        ("alize", "al"),
        ("iciti", "ic"),
        ("ical", "ic"),
        ("ful", ""),
        ("ness", ""),
    ];
    apply_table(word, TABLE, 0);
}

fn step4(word: &mut Vec<u8>) {
    const TABLE: &[&str] = &[
        "al", "ance", "ence", "er", "ic", "able", "ible", "ant", "ement", "ment", "ent", "ion",
        "ou", "ism", "ate", "iti", "ous", "ive", "ize",
    ];
    let best = TABLE
        .iter()
        .filter(|suffix| ends_with(word, suffix))
        .max_by_key(|suffix| suffix.len());
    if let Some(suffix) = best {
        let stem_len = word.len() - suffix.len();
        let stem = &word[..stem_len];
        let ion_ok = *suffix != "ion" || stem.last().is_some_and(|&c| c == b's' || c == b't');
        if measure(stem) > 1 && ion_ok {
            word.truncate(stem_len);
        }
    }
}

fn step5a(word: &mut Vec<u8>) {
    if !ends_with(word, "e") {
        return;
    }
    let stem = &word[..word.len() - 1];
    let m = measure(stem);
    if m > 1 || (m == 1 && !ends_cvc(stem)) {
        word.truncate(word.len() - 1);
    }
}

fn step5b(word: &mut Vec<u8>) {
    if measure(word) > 1 && ends_double_consonant(word) && word[word.len() - 1] == b'l' {
        word.truncate(word.len() - 1);
    }
}

/// Stems one lowercase word. Inputs under three characters, or containing
/// anything but ASCII lowercase letters, pass through unchanged.
pub fn stem(word: &str) -> String {
    if word.len() <= 2 || !word.bytes().all(|b| b.is_ascii_lowercase()) {
        return word.to_string();
    }
    let mut w = word.as_bytes().to_vec();
    step1a(&mut w);
    step1b(&mut w);
    step1c(&mut w);
    step2(&mut w);
    step3(&mut w);
    step4(&mut w);
    step5a(&mut w);
    step5b(&mut w);
    String::from_utf8(w).expect("stemming preserves ASCII")
}
