use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{Group, ResponseDataset, ResponseMatrix};
use crate::error::{Error, Result};

/// Likert-to-binary rule: raw levels at or above the cutpoint mark vulnerability.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecodingRule {
    pub item_id: String,
    pub scale_max: u32,
    pub vulnerability_cutpoint: u32,
}

impl RecodingRule {
    pub fn new(item_id: impl Into<String>, scale_max: u32, vulnerability_cutpoint: u32) -> Result<Self> {
        let rule = Self {
            item_id: item_id.into(),
            scale_max,
            vulnerability_cutpoint,
        };
        rule.validate()?;
        Ok(rule)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vulnerability_cutpoint <= 1 || self.vulnerability_cutpoint > self.scale_max {
            return Err(Error::Configuration(format!(
                "item {:?}: cutpoint {} must lie in (1, {}]",
                self.item_id, self.vulnerability_cutpoint, self.scale_max
            )));
        }
        Ok(())
    }

    /// Binary code for one raw level.
    pub fn apply(&self, raw: i64) -> Result<bool> {
        if raw < 1 || raw > i64::from(self.scale_max) {
            return Err(Error::Value(format!(
                "item {:?}: raw value {raw} outside [1, {}]",
                self.item_id, self.scale_max
            )));
        }
        Ok(raw >= i64::from(self.vulnerability_cutpoint))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawGroup {
    pub id: String,
    pub respondent_ids: Vec<String>,
    pub values: Vec<Vec<Option<i64>>>,
}

/// Integer-valued survey responses before binarization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawDataset {
    pub groups: Vec<RawGroup>,
    pub item_ids: Vec<String>,
}

pub fn recode(raw: &RawDataset, rules: &[RecodingRule]) -> Result<ResponseDataset> {
    let by_item: HashMap<&str, &RecodingRule> = rules.iter().map(|r| (r.item_id.as_str(), r)).collect();
    for r in rules {
        r.validate()?;
    }
    let column_rules = raw
        .item_ids
        .iter()
        .map(|id| {
            by_item
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::Configuration(format!("no recoding rule for item {id:?}")))
        })
        .collect::<Result<Vec<_>>>()?;

    let groups = raw
        .groups
        .iter()
        .map(|g| {
            let rows = g
                .values
                .iter()
                .map(|row| {
                    if row.len() != column_rules.len() {
                        return Err(Error::Shape(format!("group {:?}: ragged raw row", g.id)));
                    }
                    row.iter()
                        .zip(&column_rules)
                        .map(|(v, rule)| v.map(|x| rule.apply(x)).transpose())
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Group {
                id: g.id.clone(),
                respondent_ids: g.respondent_ids.clone(),
                responses: ResponseMatrix::from_rows(rows)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ResponseDataset::new(groups, raw.item_ids.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn raw(values: Vec<Vec<Option<i64>>>, items: &[&str]) -> RawDataset {
        let n = values.len();
        RawDataset {
            groups: vec![RawGroup {
                id: "g".into(),
                respondent_ids: (0..n).map(|i| format!("s{i}")).collect(),
                values,
            }],
            item_ids: items.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn five_point_cutpoint_four() {
        let rule = RecodingRule::new("a", 5, 4).unwrap();
        assert!(rule.apply(4).unwrap());
        assert!(rule.apply(5).unwrap());
        assert!(!rule.apply(3).unwrap());
        assert!(!rule.apply(1).unwrap());
    }

    #[test]
    fn seven_point_cutpoint_five() {
        let rule = RecodingRule::new("dgt", 7, 5).unwrap();
        assert!(rule.apply(5).unwrap());
        assert!(rule.apply(7).unwrap());
        assert!(!rule.apply(4).unwrap());
        assert!(!rule.apply(1).unwrap());
    }

    #[test]
    fn invalid_cutpoints_rejected() {
        assert!(RecodingRule::new("a", 5, 1).is_err());
        assert!(RecodingRule::new("a", 5, 6).is_err());
    }

    #[test]
    fn recode_dataset_and_missing_passthrough() {
        let rules = vec![RecodingRule::new("a", 5, 4).unwrap(), RecodingRule::new("b", 7, 5).unwrap()];
        let ds = recode(&raw(vec![vec![Some(4), Some(4)], vec![None, Some(7)]], &["a", "b"]), &rules).unwrap();
        let m = &ds.group(0).responses;
        assert_eq!(m.get(0, 0), Some(true));
        assert_eq!(m.get(0, 1), Some(false));
        assert_eq!(m.get(1, 0), None);
        assert_eq!(m.get(1, 1), Some(true));
    }

    #[test]
    fn out_of_range_and_missing_rule() {
        let rules = vec![RecodingRule::new("a", 5, 4).unwrap()];
        assert!(matches!(recode(&raw(vec![vec![Some(6)]], &["a"]), &rules), Err(Error::Value(_))));
        assert!(matches!(recode(&raw(vec![vec![Some(0)]], &["a"]), &rules), Err(Error::Value(_))));
        assert!(matches!(
            recode(&raw(vec![vec![Some(1), Some(1)]], &["a", "b"]), &rules),
            Err(Error::Configuration(_))
        ));
    }

    proptest! {
        #[test]
        fn recoding_is_monotone(max in 2u32..10, cut_off in 0u32..8, a in 1i64..10, b in 1i64..10) {
            let cut = 2 + cut_off % (max - 1);
            let rule = RecodingRule::new("x", max, cut).unwrap();
            let (lo, hi) = (a.min(b).min(i64::from(max)), a.max(b).min(i64::from(max)));
            prop_assert!(rule.apply(lo).unwrap() <= rule.apply(hi).unwrap());
        }
    }
}
