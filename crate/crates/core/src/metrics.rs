//! Edit distance and character error rate.

use crate::error::{Error, Result};

/// Levenshtein distance with unit costs, two-row dynamic programme.
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

pub fn cer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::EmptyInput("CER is undefined for an empty reference".into()));
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Corpus CER: total edits over total reference length.
pub fn corpus_cer<T: PartialEq>(pairs: &[(&[T], &[T])]) -> Result<f64> {
    let (mut edits, mut len) = (0, 0);
    for (r, h) in pairs {
        edits += edit_distance(r, h);
        len += r.len();
    }
    if len == 0 {
        return Err(Error::EmptyInput("no reference tokens".into()));
    }
    Ok(edits as f64 / len as f64)
}
