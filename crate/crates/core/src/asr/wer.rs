/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Word error rate over word slices. An empty reference yields the number of
/// inserted words.
pub fn wer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> f64 {
    edit_distance(reference, hypothesis) as f64 / reference.len().max(1) as f64
}

/// [`wer`] over whitespace-separated words.
pub fn wer_str(reference: &str, hypothesis: &str) -> f64 {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    wer(&r, &h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert!((wer_str("a b c", "a x c") - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(wer_str("a b c", "a b c"), 0.0);
        assert_eq!(wer_str("", "x y"), 2.0);
        assert_eq!(wer_str("", ""), 0.0);
        assert_eq!(wer_str("a b", ""), 1.0);
        assert_eq!(edit_distance(b"kitten", b"sitting"), 3);
    }
}
