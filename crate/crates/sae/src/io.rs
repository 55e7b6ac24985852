//! Dataset input: CSV with header `area_id,y,d,x1,...,xp`, or a JSON array
//! of objects carrying the same field names. UTF-8 throughout; fields are
//! plain (no quoting), so identifiers must not contain commas.

use crate::error::{Error, Result};
use crate::model::{AreaObservation, Dataset};

/// Parse a dataset from CSV text. Errors carry 1-based line numbers.
pub fn read_dataset_csv(text: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Parse {
            line: 1,
            msg: "empty input".into(),
        })?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 4 || cols[0] != "area_id" || cols[1] != "y" || cols[2] != "d" {
        return Err(Error::Parse {
            line: 1,
            msg: format!(
                "header must be `area_id,y,d,x1,...,xp`, got `{}`",
                header.trim()
            ),
        });
    }
    for (k, c) in cols[3..].iter().enumerate() {
        let expected = format!("x{}", k + 1);
        if *c != expected {
            return Err(Error::Parse {
                line: 1,
                msg: format!("covariate column {} must be named `{expected}`, got `{c}`", k + 4),
            });
        }
    }
    let p = cols.len() - 3;

    let mut areas = Vec::new();
    for (idx, raw) in lines {
        let line_no = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').map(str::trim).collect();
        if fields.len() != p + 3 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected {} fields, got {}", p + 3, fields.len()),
            });
        }
        let parse_num = |s: &str, name: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("bad numeric value `{s}` in column `{name}`"),
            })
        };
        let y = parse_num(fields[1], "y")?;
        let d = parse_num(fields[2], "d")?;
        let mut x = Vec::with_capacity(p);
        for (k, f) in fields[3..].iter().enumerate() {
            x.push(parse_num(f, &format!("x{}", k + 1))?);
        }
        areas.push(AreaObservation::new(fields[0], y, d, x));
    }
    Dataset::validate(areas)
}

/// Parse a dataset from a JSON array of objects with keys
/// `area_id`, `y`, `d`, `x1`, ..., `xp`.
pub fn read_dataset_json(text: &str) -> Result<Dataset> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        msg: e.to_string(),
    })?;
    let rows = value.as_array().ok_or_else(|| Error::Parse {
        line: 1,
        msg: "expected a JSON array of area objects".into(),
    })?;
    let mut areas = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let obj = row.as_object().ok_or_else(|| Error::Parse {
            line: 1,
            msg: format!("entry {i} is not an object"),
        })?;
        let get_num = |key: &str| -> Result<f64> {
            obj.get(key)
                .and_then(|v| v.as_f64())
                .ok_or_else(|| Error::Parse {
                    line: 1,
                    msg: format!("entry {i}: missing or non-numeric `{key}`"),
                })
        };
        let area_id = obj
            .get("area_id")
            .and_then(|v| v.as_str().map(str::to_string).or_else(|| Some(v.to_string())))
            .ok_or_else(|| Error::Parse {
                line: 1,
                msg: format!("entry {i}: missing `area_id`"),
            })?;
        let y = get_num("y")?;
        let d = get_num("d")?;
        let mut x = Vec::new();
        loop {
            let key = format!("x{}", x.len() + 1);
            if obj.contains_key(&key) {
                x.push(get_num(&key)?);
            } else {
                break;
            }
        }
        if x.is_empty() {
            return Err(Error::Parse {
                line: 1,
                msg: format!("entry {i}: no covariate columns x1..xp"),
            });
        }
        areas.push(AreaObservation::new(area_id, y, d, x));
    }
    Dataset::validate(areas)
}

/// Dispatch on the file extension: `.json` to the JSON reader, anything else
/// to CSV.
pub fn read_dataset(path_hint: &str, text: &str) -> Result<Dataset> {
    if path_hint.to_ascii_lowercase().ends_with(".json") {
        read_dataset_json(text)
    } else {
        read_dataset_csv(text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let text = "area_id,y,d,x1,x2\na1,1.5,0.5,1,0.2\na2,-0.5,1.0,1,-0.3\na3,0.0,2.0,1,0.9\n";
        let d = read_dataset_csv(text).unwrap();
        assert_eq!(d.m(), 3);
        assert_eq!(d.p(), 2);
        assert_eq!(d.area(0).area_id, "a1");
        assert_eq!(d.area(1).y, -0.5);
        assert_eq!(d.area(2).x[1], 0.9);
    }

    #[test]
    fn csv_bad_header() {
        let err = read_dataset_csv("id,y,d,x1\na,1,1,1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn csv_bad_value_reports_line() {
        let text = "area_id,y,d,x1\na1,1.0,1.0,1\na2,oops,1.0,1\n";
        match read_dataset_csv(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn csv_field_count_mismatch() {
        let text = "area_id,y,d,x1\na1,1.0,1.0\n";
        match read_dataset_csv(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn json_equivalent() {
        let text = r#"[
            {"area_id": "a1", "y": 1.5, "d": 0.5, "x1": 1.0},
            {"area_id": "a2", "y": -0.5, "d": 1.0, "x1": 1.0}
        ]"#;
        let d = read_dataset_json(text).unwrap();
        assert_eq!(d.m(), 2);
        assert_eq!(d.p(), 1);
        assert_eq!(d.area(0).area_id, "a1");
    }

    #[test]
    fn json_missing_field() {
        let text = r#"[{"area_id": "a1", "y": 1.5, "x1": 1.0}]"#;
        assert!(read_dataset_json(text).is_err());
    }

    #[test]
    fn dispatch_by_extension() {
        let csv = "area_id,y,d,x1\na1,1.0,1.0,1\na2,2.0,1.0,1\n";
        assert!(read_dataset("areas.csv", csv).is_ok());
        let json = r#"[{"area_id":"a","y":0.0,"d":1.0,"x1":1.0}]"#;
        assert!(read_dataset("areas.JSON", json).is_ok());
    }
}
