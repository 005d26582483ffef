//! LETOR text interchange: `<label> qid:<id> <fid>:<val> ...` lines with
//! 1-based sparse feature ids, plus the auxiliary implicit-labels file
//! (`<qid> <bootstrap_idx> <y_1> ... <y_n>` per sampled list).

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::dataset::{Item, RankedList, Split};
use crate::losses::listwide_label;
use crate::{Error, Result, Scalar};

/// Result of parsing one LETOR file: lists in file order plus the feature
/// dimensionality implied by the largest feature id seen.
#[derive(Debug, Clone)]
pub struct ParsedSplit<F> {
    pub split: Split<F>,
    pub d_x: usize,
}

/// Joins a sampled query id with its bootstrap index into the opaque id
/// used inside sampled LETOR files.
pub fn bootstrap_query_id(query_id: &str, bootstrap_idx: u32) -> String {
    format!("{query_id}_b{bootstrap_idx}")
}

pub fn parse_letor<F: Scalar>(text: &str) -> Result<ParsedSplit<F>> {
    let mut order: Vec<String> = Vec::new();
    let mut by_qid: HashMap<String, Vec<(u8, Vec<(usize, F)>)>> = HashMap::new();
    let mut d_x = 0usize;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let mut tokens = line.split_whitespace();
        let Some(label_tok) = tokens.next() else {
            continue; // blank line
        };
        let label: u8 = label_tok.parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("invalid label token `{label_tok}`"),
        })?;
        let qid_tok = tokens.next().ok_or_else(|| Error::Parse {
            line: line_no,
            msg: "missing qid field".into(),
        })?;
        let qid = qid_tok.strip_prefix("qid:").ok_or_else(|| Error::Parse {
            line: line_no,
            msg: format!("expected `qid:<id>`, got `{qid_tok}`"),
        })?;
        if qid.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                msg: "empty qid".into(),
            });
        }

        let mut features = Vec::new();
        for tok in tokens {
            let (fid_tok, val_tok) = tok.split_once(':').ok_or_else(|| Error::Parse {
                line: line_no,
                msg: format!("expected `<fid>:<val>`, got `{tok}`"),
            })?;
            let fid: usize = fid_tok.parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("invalid feature id `{fid_tok}`"),
            })?;
            if fid == 0 {
                return Err(Error::Parse {
                    line: line_no,
                    msg: "feature ids are 1-based".into(),
                });
            }
            let val: f64 = val_tok.parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("invalid feature value `{val_tok}`"),
            })?;
            if !val.is_finite() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("non-finite feature value `{val_tok}`"),
                });
            }
            d_x = d_x.max(fid);
            features.push((fid, F::from(val).unwrap()));
        }

        if !by_qid.contains_key(qid) {
            order.push(qid.to_string());
        }
        by_qid
            .entry(qid.to_string())
            .or_default()
            .push((label, features));
    }

    let lists = order
        .into_iter()
        .map(|qid| {
            let items = by_qid
                .remove(&qid)
                .unwrap()
                .into_iter()
                .map(|(label, sparse)| {
                    let mut dense = vec![F::zero(); d_x];
                    for (fid, val) in sparse {
                        dense[fid - 1] = val;
                    }
                    Item {
                        features: dense,
                        explicit_label: label,
                        implicit_label: None,
                    }
                })
                .collect();
            RankedList {
                query_id: qid,
                items,
                listwide: None,
            }
        })
        .collect();

    Ok(ParsedSplit {
        split: Split::new(lists),
        d_x,
    })
}

/// Serializes a split densely (every feature id written) so a parse
/// round-trip preserves the feature dimensionality exactly.
pub fn serialize_letor<F: Scalar>(split: &Split<F>, d_x: usize) -> String {
    let mut out = String::new();
    for list in &split.lists {
        for item in &list.items {
            write!(out, "{} qid:{}", item.explicit_label, list.query_id).unwrap();
            for (i, &v) in item.features.iter().take(d_x).enumerate() {
                write!(out, " {}:{}", i + 1, v.to_exact_string()).unwrap();
            }
            out.push('\n');
        }
    }
    out
}

/// One line of the auxiliary implicit-labels file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelsRecord {
    pub query_id: String,
    pub bootstrap_idx: u32,
    pub labels: Vec<u8>,
}

pub fn serialize_labels_file(records: &[LabelsRecord]) -> String {
    let mut out = String::new();
    for rec in records {
        write!(out, "{} {}", rec.query_id, rec.bootstrap_idx).unwrap();
        for &y in &rec.labels {
            write!(out, " {y}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn parse_labels_file(text: &str) -> Result<Vec<LabelsRecord>> {
    let mut records = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let mut tokens = raw.split_whitespace();
        let Some(qid) = tokens.next() else { continue };
        let b_tok = tokens.next().ok_or_else(|| Error::Parse {
            line: line_no,
            msg: "missing bootstrap index".into(),
        })?;
        let bootstrap_idx: u32 = b_tok.parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("invalid bootstrap index `{b_tok}`"),
        })?;
        let labels = tokens
            .map(|t| {
                t.parse::<u8>().map_err(|_| Error::Parse {
                    line: line_no,
                    msg: format!("invalid implicit label `{t}`"),
                })
            })
            .collect::<Result<Vec<u8>>>()?;
        if labels.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                msg: "labels record without labels".into(),
            });
        }
        records.push(LabelsRecord {
            query_id: qid.to_string(),
            bootstrap_idx,
            labels,
        });
    }
    Ok(records)
}

/// Attaches implicit labels from the auxiliary file to a sampled split.
/// Records are keyed by (query id, bootstrap index); label vectors align
/// positionally with the sampled list's items.
pub fn attach_implicit_labels<F: Scalar>(
    split: &mut Split<F>,
    records: &[LabelsRecord],
    y_max: u8,
) -> Result<()> {
    let mut by_qid: HashMap<String, usize> = HashMap::new();
    for (i, list) in split.lists.iter().enumerate() {
        by_qid.insert(list.query_id.clone(), i);
    }
    for rec in records {
        let sampled_id = bootstrap_query_id(&rec.query_id, rec.bootstrap_idx);
        let idx = *by_qid.get(&sampled_id).ok_or_else(|| {
            Error::Config(format!("labels record for unknown list `{sampled_id}`"))
        })?;
        let list = &mut split.lists[idx];
        if list.items.len() != rec.labels.len() {
            return Err(Error::DimMismatch(format!(
                "list `{sampled_id}` has {} items but {} labels",
                list.items.len(),
                rec.labels.len()
            )));
        }
        for (item, &y) in list.items.iter_mut().zip(&rec.labels) {
            if y > y_max {
                return Err(Error::LabelDomain {
                    value: y as i64,
                    max: y_max,
                });
            }
            item.implicit_label = Some(y);
        }
        list.listwide = Some(listwide_label(&rec.labels)?);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_basic_line() {
        let parsed = parse_letor::<f64>("2 qid:1 1:0.5 2:-1.0\n").unwrap();
        assert_eq!(parsed.d_x, 2);
        assert_eq!(parsed.split.lists.len(), 1);
        let list = &parsed.split.lists[0];
        assert_eq!(list.query_id, "1");
        assert_eq!(list.items[0].explicit_label, 2);
        assert_eq!(list.items[0].features, vec![0.5, -1.0]);
    }

    #[test]
    fn fills_absent_feature_ids_with_zero() {
        let parsed = parse_letor::<f64>("0 qid:7 2:3.0\n").unwrap();
        assert_eq!(parsed.d_x, 2);
        assert_eq!(parsed.split.lists[0].items[0].features, vec![0.0, 3.0]);
    }

    #[test]
    fn rejects_invalid_label_with_line_number() {
        let err = parse_letor::<f64>("x qid:1 1:0.5\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 1),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn groups_by_qid_preserving_order() {
        let text = "1 qid:b 1:1.0\n0 qid:a 1:2.0\n2 qid:b 1:3.0\n";
        let parsed = parse_letor::<f64>(text).unwrap();
        assert_eq!(parsed.split.lists.len(), 2);
        assert_eq!(parsed.split.lists[0].query_id, "b");
        assert_eq!(parsed.split.lists[0].items.len(), 2);
        assert_eq!(parsed.split.lists[1].query_id, "a");
    }

    #[test]
    fn strips_trailing_comments() {
        let parsed = parse_letor::<f64>("1 qid:1 1:0.25 # docid = 42\n").unwrap();
        assert_eq!(parsed.split.lists[0].items[0].features, vec![0.25]);
    }

    #[test]
    fn parse_serialize_parse_is_fixed_point() {
        let text = "2 qid:1 1:0.5 2:-1.25\n0 qid:1 1:0.125 2:0.0\n1 qid:9 1:3.5 2:7.0\n";
        let first = parse_letor::<f64>(text).unwrap();
        let serialized = serialize_letor(&first.split, first.d_x);
        let second = parse_letor::<f64>(&serialized).unwrap();
        assert_eq!(first.split, second.split);
        assert_eq!(first.d_x, second.d_x);
    }

    #[test]
    fn labels_file_round_trip_and_attach() {
        let mut parsed = parse_letor::<f64>(
            "2 qid:1_b0 1:0.5\n0 qid:1_b0 1:0.1\n1 qid:1_b1 1:0.7\n",
        )
        .unwrap();
        let records = vec![
            LabelsRecord {
                query_id: "1".into(),
                bootstrap_idx: 0,
                labels: vec![2, 0],
            },
            LabelsRecord {
                query_id: "1".into(),
                bootstrap_idx: 1,
                labels: vec![1],
            },
        ];
        let text = serialize_labels_file(&records);
        let reparsed = parse_labels_file(&text).unwrap();
        assert_eq!(records, reparsed);

        attach_implicit_labels(&mut parsed.split, &records, 2).unwrap();
        assert_eq!(parsed.split.lists[0].listwide, Some(2));
        assert_eq!(parsed.split.lists[0].items[1].implicit_label, Some(0));
        assert_eq!(parsed.split.lists[1].listwide, Some(1));
    }

    #[test]
    fn attach_rejects_length_mismatch() {
        let mut parsed = parse_letor::<f64>("2 qid:1_b0 1:0.5\n").unwrap();
        let records = vec![LabelsRecord {
            query_id: "1".into(),
            bootstrap_idx: 0,
            labels: vec![1, 0],
        }];
        assert!(attach_implicit_labels(&mut parsed.split, &records, 2).is_err());
    }
}
