use advstyle_core::ThresholdTable;

use crate::error::{Error, Result};

/// Threshold for `model`. Exact names win. Otherwise a leading `toy-` is
/// dropped and names are compared case-insensitively, so `toy-irse50` picks
/// up the `IRSE50` entry.
pub fn threshold_for(table: &ThresholdTable, model: &str) -> Result<f64> {
    if let Some(&tau) = table.entries().get(model) {
        return Ok(tau);
    }
    let bare = model.strip_prefix("toy-").unwrap_or(model);
    table
        .entries()
        .iter()
        .find(|(name, _)| name.eq_ignore_ascii_case(bare))
        .map(|(_, &tau)| tau)
        .ok_or_else(|| Error::invalid(format!("no threshold for model {model}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_names_map_to_reference_entries() {
        let table = ThresholdTable::default();
        assert_eq!(threshold_for(&table, "toy-mobileface").unwrap(), 0.302);
        assert_eq!(threshold_for(&table, "toy-irse50").unwrap(), 0.241);
        assert_eq!(threshold_for(&table, "IR152").unwrap(), 0.167);
        assert_eq!(threshold_for(&table, "toy-facenet").unwrap(), 0.409);
        assert!(threshold_for(&table, "arcface").is_err());
    }

    #[test]
    fn exact_entry_shadows_the_fallback() {
        let mut table = ThresholdTable::default();
        table.insert("toy-facenet", 0.5).unwrap();
        assert_eq!(threshold_for(&table, "toy-facenet").unwrap(), 0.5);
    }
}
