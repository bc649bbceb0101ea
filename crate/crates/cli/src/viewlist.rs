//! View selections such as `0,1,2,3`, `4..15` or `0,4..7`.

use std::collections::BTreeSet;

/// Parses comma-separated indices and inclusive `a..b` ranges, keeping the
/// first occurrence order.
pub fn parse(text: &str) -> Result<Vec<usize>, String> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let items: Vec<usize> = match part.split_once("..") {
            Some((a, b)) => {
                let a: usize = a.trim().parse().map_err(|_| format!("bad range start in {part:?}"))?;
                let b: usize = b.trim().parse().map_err(|_| format!("bad range end in {part:?}"))?;
                if a > b {
                    return Err(format!("empty range {part:?}"));
                }
                (a..=b).collect()
            }
            None => vec![part.parse().map_err(|_| format!("bad view index {part:?}"))?],
        };
        for i in items {
            if seen.insert(i) {
                out.push(i);
            }
        }
    }
    if out.is_empty() {
        return Err("no views selected".into());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lists_and_ranges() {
        assert_eq!(parse("0,1,2,3").unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(parse("4..7").unwrap(), vec![4, 5, 6, 7]);
        assert_eq!(parse("2, 0..3").unwrap(), vec![2, 0, 1, 3]);
        assert!(parse("").is_err());
        assert!(parse("3..1").is_err());
        assert!(parse("a").is_err());
    }
}
