//! Request payload parsing that reports every offending field at once.

use docstruct_core::synth::{GenConfig, NoiseConfig};
use docstruct_core::{BBox, Label, Region};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::domain::{Edit, Target};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Default)]
struct Errors(Vec<FieldError>);

impl Errors {
    fn push(&mut self, field: impl Into<String>, message: impl Into<String>) {
        self.0.push(FieldError::new(field, message));
    }

    fn finish<T>(self, value: T) -> Result<T, Vec<FieldError>> {
        if self.0.is_empty() {
            Ok(value)
        } else {
            Err(self.0)
        }
    }
}

fn label(v: Option<&Value>, field: &str, errs: &mut Errors) -> Option<Label> {
    match v {
        None => {
            errs.push(field, "missing");
            None
        }
        Some(Value::String(s)) => match s.parse::<Label>() {
            Ok(l) => Some(l),
            Err(_) => {
                let known: Vec<&str> = Label::ALL.iter().map(|l| l.as_str()).collect();
                errs.push(
                    field,
                    format!("unknown class {s:?}, expected one of {}", known.join(", ")),
                );
                None
            }
        },
        Some(_) => {
            errs.push(field, "must be a string");
            None
        }
    }
}

fn bbox(v: Option<&Value>, field: &str, errs: &mut Errors) -> Option<BBox> {
    let Some(v) = v else {
        errs.push(field, "missing");
        return None;
    };
    let Some(arr) = v.as_array() else {
        errs.push(field, "must be an array [xmin, ymin, xmax, ymax]");
        return None;
    };
    if arr.len() != 4 {
        errs.push(
            field,
            format!("must have 4 coordinates, found {}", arr.len()),
        );
        return None;
    }
    let mut c = [0.0; 4];
    for (i, x) in arr.iter().enumerate() {
        match x.as_f64() {
            Some(f) => c[i] = f,
            None => {
                errs.push(format!("{field}[{i}]"), "must be a number");
                return None;
            }
        }
    }
    match BBox::new(c[0], c[1], c[2], c[3]) {
        Ok(b) => Some(b),
        Err(e) => {
            errs.push(field, e.to_string());
            None
        }
    }
}

fn score(v: Option<&Value>, field: &str, errs: &mut Errors) -> Option<f64> {
    match v.map(Value::as_f64) {
        None => {
            errs.push(field, "missing");
            None
        }
        Some(Some(s)) if (0.0..=1.0).contains(&s) => Some(s),
        Some(Some(s)) => {
            errs.push(field, format!("must be in [0, 1], found {s}"));
            None
        }
        Some(None) => {
            errs.push(field, "must be a number");
            None
        }
    }
}

fn index(v: Option<&Value>, field: &str, errs: &mut Errors) -> Option<usize> {
    match v.map(Value::as_u64) {
        None => {
            errs.push(field, "missing");
            None
        }
        Some(Some(n)) => Some(n as usize),
        Some(None) => {
            errs.push(field, "must be a non-negative integer");
            None
        }
    }
}

fn object<'a>(
    v: &'a Value,
    field: &str,
    errs: &mut Errors,
) -> Option<&'a serde_json::Map<String, Value>> {
    let o = v.as_object();
    if o.is_none() {
        errs.push(field, "must be an object");
    }
    o
}

fn page_dim(v: Option<&Value>, field: &str, default: u32, errs: &mut Errors) -> u32 {
    match v {
        None => default,
        Some(x) => match x.as_u64() {
            Some(n) if n > 0 && n <= u32::MAX as u64 => n as u32,
            _ => {
                errs.push(field, "must be a positive integer");
                default
            }
        },
    }
}

/// A document to ingest.
#[derive(Debug, Clone, PartialEq)]
pub enum IngestRequest {
    Proposals {
        width: u32,
        height: u32,
        regions: Vec<Region>,
    },
    Synthetic {
        config: GenConfig,
        index: u64,
        noise: NoiseConfig,
    },
}

/// Accepts `{"proposals": {"width"?, "height"?, "regions": [...]}}` or
/// `{"synthetic": {"config"?, "index"?, "noise"?}}`.
pub fn ingest_request(v: &Value) -> Result<IngestRequest, Vec<FieldError>> {
    let mut errs = Errors::default();
    let Some(root) = object(v, "$", &mut errs) else {
        return Err(errs.0);
    };
    for key in root.keys() {
        if key != "proposals" && key != "synthetic" {
            errs.push(key.as_str(), "unknown field");
        }
    }
    match (root.get("proposals"), root.get("synthetic")) {
        (Some(_), Some(_)) => {
            errs.push("$", "give either \"proposals\" or \"synthetic\", not both");
            Err(errs.0)
        }
        (None, None) => {
            errs.push("proposals", "missing (or give \"synthetic\")");
            Err(errs.0)
        }
        (Some(p), None) => {
            let Some(p) = object(p, "proposals", &mut errs) else {
                return Err(errs.0);
            };
            for key in p.keys() {
                if !matches!(key.as_str(), "width" | "height" | "regions" | "page_id") {
                    errs.push(format!("proposals.{key}"), "unknown field");
                }
            }
            let width = page_dim(
                p.get("width"),
                "proposals.width",
                docstruct_core::pipeline::DEFAULT_PAGE_WIDTH,
                &mut errs,
            );
            let height = page_dim(
                p.get("height"),
                "proposals.height",
                docstruct_core::pipeline::DEFAULT_PAGE_HEIGHT,
                &mut errs,
            );
            let mut regions = Vec::new();
            match p.get("regions").map(Value::as_array) {
                None => errs.push("proposals.regions", "missing"),
                Some(None) => errs.push("proposals.regions", "must be an array"),
                Some(Some(items)) => {
                    for (i, item) in items.iter().enumerate() {
                        let f = format!("proposals.regions[{i}]");
                        let Some(o) = object(item, &f, &mut errs) else {
                            continue;
                        };
                        let l = label(o.get("class"), &format!("{f}.class"), &mut errs);
                        let b = bbox(o.get("bbox"), &format!("{f}.bbox"), &mut errs);
                        let s = score(o.get("score"), &format!("{f}.score"), &mut errs);
                        if let (Some(l), Some(b), Some(s)) = (l, b, s) {
                            regions.push(Region::new(l, b, s).expect("fields validated"));
                        }
                    }
                }
            }
            errs.finish(IngestRequest::Proposals {
                width,
                height,
                regions,
            })
        }
        (None, Some(s)) => {
            let Some(o) = object(s, "synthetic", &mut errs) else {
                return Err(errs.0);
            };
            for key in o.keys() {
                if !matches!(key.as_str(), "config" | "index" | "noise") {
                    errs.push(format!("synthetic.{key}"), "unknown field");
                }
            }
            let config: GenConfig = match o.get("config") {
                None => GenConfig::default(),
                Some(c) => match serde_json::from_value::<GenConfig>(c.clone()) {
                    Ok(c) => match c.validate() {
                        Ok(()) => c,
                        Err(e) => {
                            errs.push("synthetic.config", e.to_string());
                            c
                        }
                    },
                    Err(e) => {
                        errs.push("synthetic.config", e.to_string());
                        GenConfig::default()
                    }
                },
            };
            let noise: NoiseConfig = match o.get("noise") {
                None => NoiseConfig::default(),
                Some(c) => match serde_json::from_value::<NoiseConfig>(c.clone()) {
                    Ok(n) => match n.validate() {
                        Ok(()) => n,
                        Err(e) => {
                            errs.push("synthetic.noise", e.to_string());
                            n
                        }
                    },
                    Err(e) => {
                        errs.push("synthetic.noise", e.to_string());
                        NoiseConfig::default()
                    }
                },
            };
            let idx = match o.get("index") {
                None => 0,
                Some(v) => index(Some(v), "synthetic.index", &mut errs).unwrap_or(0) as u64,
            };
            errs.finish(IngestRequest::Synthetic {
                config,
                index: idx,
                noise,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionRequest {
    pub operator: String,
    pub timestamp: Option<String>,
    pub edits: Vec<Edit>,
}

fn target(v: Option<&Value>, field: &str, errs: &mut Errors) -> Option<Target> {
    let Some(v) = v else {
        errs.push(field, "missing");
        return None;
    };
    let o = object(v, field, errs)?;
    let region = index(o.get("region"), &format!("{field}.region"), errs);
    let cell = match o.get("cell") {
        None | Some(Value::Null) => Some(None),
        Some(c) => index(Some(c), &format!("{field}.cell"), errs).map(Some),
    };
    Some(Target {
        region: region?,
        cell: cell?,
    })
}

/// Accepts `{"operator": "...", "timestamp"?: "...", "edits": [...]}` where
/// each edit is one of
/// `{"action":"move_resize","target":{"region":i,"cell"?:j},"bbox":[...]}`,
/// `{"action":"relabel","target":...,"class":"..."}`,
/// `{"action":"delete","target":...}`,
/// `{"action":"add","class":"...","bbox":[...]}`.
pub fn correction_request(v: &Value) -> Result<CorrectionRequest, Vec<FieldError>> {
    let mut errs = Errors::default();
    let Some(root) = object(v, "$", &mut errs) else {
        return Err(errs.0);
    };
    for key in root.keys() {
        if !matches!(key.as_str(), "operator" | "timestamp" | "edits" | "page_id") {
            errs.push(key.as_str(), "unknown field");
        }
    }
    let operator = match root.get("operator") {
        Some(Value::String(s)) if !s.trim().is_empty() => s.clone(),
        Some(Value::String(_)) => {
            errs.push("operator", "must not be empty");
            String::new()
        }
        Some(_) => {
            errs.push("operator", "must be a string");
            String::new()
        }
        None => {
            errs.push("operator", "missing");
            String::new()
        }
    };
    let timestamp = match root.get("timestamp") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => {
            errs.push("timestamp", "must be a string");
            None
        }
    };
    let mut edits = Vec::new();
    match root.get("edits").map(Value::as_array) {
        None => errs.push("edits", "missing"),
        Some(None) => errs.push("edits", "must be an array"),
        Some(Some(items)) if items.is_empty() => {
            errs.push("edits", "must contain at least one edit")
        }
        Some(Some(items)) => {
            for (i, item) in items.iter().enumerate() {
                let f = format!("edits[{i}]");
                let Some(o) = object(item, &f, &mut errs) else {
                    continue;
                };
                let t = || format!("{f}.target");
                let edit = match o.get("action").and_then(Value::as_str) {
                    Some("move_resize") => {
                        let tg = target(o.get("target"), &t(), &mut errs);
                        let b = bbox(o.get("bbox"), &format!("{f}.bbox"), &mut errs);
                        tg.zip(b)
                            .map(|(target, bbox)| Edit::MoveResize { target, bbox })
                    }
                    Some("relabel") => {
                        let tg = target(o.get("target"), &t(), &mut errs);
                        let l = label(o.get("class"), &format!("{f}.class"), &mut errs);
                        tg.zip(l)
                            .map(|(target, class)| Edit::Relabel { target, class })
                    }
                    Some("delete") => target(o.get("target"), &t(), &mut errs)
                        .map(|target| Edit::Delete { target }),
                    Some("add") => {
                        let l = label(o.get("class"), &format!("{f}.class"), &mut errs);
                        let b = bbox(o.get("bbox"), &format!("{f}.bbox"), &mut errs);
                        l.zip(b).map(|(class, bbox)| Edit::Add { class, bbox })
                    }
                    Some(other) => {
                        errs.push(
                            format!("{f}.action"),
                            format!("unknown action {other:?}, expected move_resize, relabel, delete or add"),
                        );
                        None
                    }
                    None => {
                        errs.push(format!("{f}.action"), "missing");
                        None
                    }
                };
                edits.extend(edit);
            }
        }
    }
    errs.finish(CorrectionRequest {
        operator,
        timestamp,
        edits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn ingest_lists_every_bad_field() {
        let v = json!({"proposals": {"regions": [
            {"class": "cell", "bbox": [0, 0, 10, 10], "score": 0.5},
            {"class": "paragraph", "bbox": [10, 0, 0, 10], "score": 2.0},
            {"bbox": [0, 0, 1], "score": "x"}
        ], "colour": 1}});
        let errs = ingest_request(&v).unwrap_err();
        let fields: Vec<&str> = errs.iter().map(|e| e.field.as_str()).collect();
        assert_eq!(
            fields,
            vec![
                "proposals.colour",
                "proposals.regions[1].class",
                "proposals.regions[1].bbox",
                "proposals.regions[1].score",
                "proposals.regions[2].class",
                "proposals.regions[2].bbox",
                "proposals.regions[2].score",
            ]
        );
    }

    #[test]
    fn ingest_ok_variants() {
        let v = json!({"proposals": {"width": 100, "height": 200, "regions": []}});
        assert_eq!(
            ingest_request(&v).unwrap(),
            IngestRequest::Proposals {
                width: 100,
                height: 200,
                regions: vec![]
            }
        );
        let v = json!({"synthetic": {"index": 3, "noise": {"seed": 4}}});
        match ingest_request(&v).unwrap() {
            IngestRequest::Synthetic { index, noise, .. } => {
                assert_eq!(index, 3);
                assert_eq!(noise.seed, 4);
            }
            other => panic!("{other:?}"),
        }
        assert!(ingest_request(&json!({})).is_err());
        assert!(ingest_request(&json!([])).is_err());
        assert!(ingest_request(&json!({"proposals": {"regions": []}, "synthetic": {}})).is_err());
    }

    #[test]
    fn correction_parsing() {
        let v = json!({"operator": "op1", "edits": [
            {"action": "relabel", "target": {"region": 2}, "class": "text_block"},
            {"action": "move_resize", "target": {"region": 0, "cell": 1}, "bbox": [1, 2, 3, 4]},
            {"action": "delete", "target": {"region": 1}},
            {"action": "add", "class": "handwriting", "bbox": [5, 5, 9, 9]}
        ]});
        let c = correction_request(&v).unwrap();
        assert_eq!(c.edits.len(), 4);
        assert_eq!(
            c.edits[0],
            Edit::Relabel {
                target: Target {
                    region: 2,
                    cell: None
                },
                class: Label::TextBlock
            }
        );
        let bad = json!({"edits": [
            {"action": "rotate"},
            {"action": "relabel", "target": {"region": -1}, "class": "cell"},
            {"action": "add", "class": "cell"}
        ]});
        let fields: Vec<String> = correction_request(&bad)
            .unwrap_err()
            .into_iter()
            .map(|e| e.field)
            .collect();
        assert_eq!(
            fields,
            vec![
                "operator",
                "edits[0].action",
                "edits[1].target.region",
                "edits[2].bbox"
            ]
        );
    }
}
