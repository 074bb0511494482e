//! Wide CSV interchange: `group_id,student_id,<item…>` with one row per
//! respondent. Empty cells are missing; lines starting with `#` are comments.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use super::{recode, CovariateValue, Covariates, Group, RawDataset, RawGroup, RecodingRule, ResponseDataset, ResponseMatrix};
use crate::error::{Error, Result};

fn reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(input)
}

pub fn load_dataset(path: impl AsRef<Path>, rules: Option<&[RecodingRule]>) -> Result<ResponseDataset> {
    read_dataset(File::open(path)?, rules)
}

pub fn read_dataset<R: Read>(input: R, rules: Option<&[RecodingRule]>) -> Result<ResponseDataset> {
    let mut rdr = reader(input);
    let header = rdr
        .headers()
        .map_err(|e| Error::Format(format!("unreadable header: {e}")))?
        .clone();
    if header.len() < 3 || &header[0] != "group_id" || &header[1] != "student_id" {
        return Err(Error::Format(
            "header must start with group_id,student_id followed by at least one item column".into(),
        ));
    }
    let item_ids: Vec<String> = header.iter().skip(2).map(str::to_string).collect();

    // group_id → (respondent ids, raw rows); insertion order = first appearance.
    let mut grouped: IndexMap<String, (Vec<String>, Vec<Vec<Option<i64>>>)> = IndexMap::new();
    for (line, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::Format(format!("record {}: {e}", line + 1)))?;
        let group_id = record[0].to_string();
        let student_id = record[1].to_string();
        let entry = grouped.entry(group_id.clone()).or_default();
        if entry.0.contains(&student_id) {
            return Err(Error::Duplicate(format!("respondent ({group_id:?}, {student_id:?})")));
        }
        let cells = record
            .iter()
            .skip(2)
            .zip(&item_ids)
            .map(|(cell, item)| parse_cell(cell, item, rules.is_some()))
            .collect::<Result<Vec<_>>>()?;
        entry.0.push(student_id);
        entry.1.push(cells);
    }

    let raw = RawDataset {
        groups: grouped
            .into_iter()
            .map(|(id, (respondent_ids, values))| RawGroup {
                id,
                respondent_ids,
                values,
            })
            .collect(),
        item_ids,
    };
    match rules {
        Some(rules) => recode(&raw, rules),
        None => binary_dataset(raw),
    }
}

fn parse_cell(cell: &str, item: &str, integer: bool) -> Result<Option<i64>> {
    if cell.is_empty() {
        return Ok(None);
    }
    if integer {
        return cell
            .parse::<i64>()
            .map(Some)
            .map_err(|_| Error::Value(format!("item {item:?}: non-integer cell {cell:?}")));
    }
    match cell {
        "0" => Ok(Some(0)),
        "1" => Ok(Some(1)),
        other => Err(Error::Value(format!(
            "item {item:?}: cell {other:?} is not 0, 1 or empty (supply recoding rules for Likert data)"
        ))),
    }
}

fn binary_dataset(raw: RawDataset) -> Result<ResponseDataset> {
    let groups = raw
        .groups
        .into_iter()
        .map(|g| {
            let rows = g
                .values
                .into_iter()
                .map(|row| row.into_iter().map(|v| v.map(|x| x == 1)).collect())
                .collect();
            Ok(Group {
                id: g.id,
                respondent_ids: g.respondent_ids,
                responses: ResponseMatrix::from_rows(rows)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ResponseDataset::new(groups, raw.item_ids)
}

pub fn save_dataset(dataset: &ResponseDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut f = File::create(path)?;
    write_dataset(dataset, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn write_dataset<W: Write>(dataset: &ResponseDataset, out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    let mut header = vec!["group_id".to_string(), "student_id".to_string()];
    header.extend(dataset.item_ids().iter().cloned());
    wtr.write_record(&header)?;
    for g in dataset.groups() {
        for (i, rid) in g.respondent_ids.iter().enumerate() {
            let mut rec = Vec::with_capacity(header.len());
            rec.push(g.id.as_str());
            rec.push(rid.as_str());
            rec.extend(g.responses.row(i).iter().map(|c| match c {
                None => "",
                Some(false) => "0",
                Some(true) => "1",
            }));
            wtr.write_record(&rec)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

pub fn load_covariates(path: impl AsRef<Path>) -> Result<Covariates> {
    read_covariates(File::open(path)?)
}

/// Covariates CSV keyed by `group_id`; numeric cells become numbers, empty cells are skipped.
pub fn read_covariates<R: Read>(input: R) -> Result<Covariates> {
    let mut rdr = reader(input);
    let header = rdr.headers()?.clone();
    if header.is_empty() || &header[0] != "group_id" {
        return Err(Error::Format("covariates header must start with group_id".into()));
    }
    let mut out = Covariates::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Format(e.to_string()))?;
        let group = record[0].to_string();
        let mut values = BTreeMap::new();
        for (name, cell) in header.iter().zip(record.iter()).skip(1) {
            if cell.is_empty() {
                continue;
            }
            let value = match cell.parse::<f64>() {
                Ok(v) => CovariateValue::Number(v),
                Err(_) => CovariateValue::Text(cell.to_string()),
            };
            values.insert(name.to_string(), value);
        }
        if out.insert(group.clone(), values).is_some() {
            return Err(Error::Duplicate(format!("covariates for group {group:?}")));
        }
    }
    Ok(out)
}
