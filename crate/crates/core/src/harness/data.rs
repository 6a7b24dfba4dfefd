//! JSON-lines datasets: one [`TrainingItem`] per line.

use std::fs;
use std::path::Path;

use crate::error::{BeragError, Result};
use crate::training::TrainingItem;

pub fn to_jsonl(items: &[TrainingItem]) -> Result<String> {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(it)?);
        out.push('\n');
    }
    Ok(out)
}

/// Parses and validates every line; blank lines are skipped.
pub fn from_jsonl(text: &str) -> Result<Vec<TrainingItem>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let item: TrainingItem =
                serde_json::from_str(line).map_err(|e| BeragError::Schema(format!("line {}: {e}", n + 1)))?;
            item.validate()
                .map_err(|e| BeragError::Schema(format!("line {}: {e}", n + 1)))?;
            Ok(item)
        })
        .collect()
}

pub fn read_jsonl(path: &Path) -> Result<Vec<TrainingItem>> {
    from_jsonl(&fs::read_to_string(path)?)
}

pub fn write_jsonl(path: &Path, items: &[TrainingItem]) -> Result<()> {
    crate::write_atomic(path, to_jsonl(items)?.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{Document, Query};

    #[test]
    fn round_trip_and_schema() {
        let it = TrainingItem {
            id: "a".into(),
            query: Query::new(vec![1, 2]).unwrap(),
            answer: vec![3, 0],
            docs: vec![Document::new(4, vec![1, 2, 3, 0]).with_relevance(1), Document::null()],
        };
        let text = to_jsonl(std::slice::from_ref(&it)).unwrap();
        assert!(text.starts_with("{\"id\":\"a\",\"query_tokens\":[1,2],\"answer_tokens\":[3,0],\"docs\":[{\"doc_id\":4,"));
        assert_eq!(from_jsonl(&text).unwrap(), vec![it]);
        assert!(matches!(from_jsonl("{\"id\":1}"), Err(BeragError::Schema(_))));
        let empty_query = "{\"id\":\"b\",\"query_tokens\":[],\"answer_tokens\":[1],\"docs\":[]}";
        assert!(matches!(from_jsonl(empty_query), Err(BeragError::Schema(_))));
    }
}
