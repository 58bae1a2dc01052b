//! Fine-tuning dataset export.
//!
//! One annotation document per frame plus an index:
//!
//! ```text
//! <out>/annotations/<frame_id>.xml   (or .json)
//! <out>/index.tsv                    frame_id \t annotation_path \t box_count
//! <out>/manifest.json                ExportManifest
//! ```
//!
//! The XML flavour follows the Pascal VOC layout (`size`, `object/name`,
//! `object/bndbox/{xmin,ymin,xmax,ymax}`) with a `version` attribute on the
//! root and an extra `score` per object. Field order is fixed, coordinates
//! are written in shortest round-trip form and scores are rounded to
//! [`SCORE_SIGNIFICANT_DIGITS`].

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use quick_xml::escape::escape;
use quick_xml::events::Event;
use quick_xml::Reader;
use serde::{Deserialize, Serialize};
use tracing::warn;

use super::{Record, RecordKind, Store, StoreError};
use crate::bbox::BBox;
use crate::sampler::Partition;

pub const SCORE_SIGNIFICANT_DIGITS: usize = 9;
pub const ANNOTATION_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Voc,
    Json,
}

impl ExportFormat {
    pub fn parse(id: &str) -> Result<Self, StoreError> {
        match id {
            "voc" | "pascal-voc" => Ok(Self::Voc),
            "json" => Ok(Self::Json),
            other => Err(StoreError::Export(format!("unknown export format {other:?} (known: voc, json)"))),
        }
    }

    pub fn id(self) -> &'static str {
        match self {
            Self::Voc => "voc",
            Self::Json => "json",
        }
    }

    fn extension(self) -> &'static str {
        match self {
            Self::Voc => "xml",
            Self::Json => "json",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportManifest {
    pub export_id: String,
    pub partition: Partition,
    pub detector_id: String,
    pub frame_count: u64,
    pub box_count: u64,
    /// Boxes contributed by FN marks, included in `box_count`.
    #[serde(default)]
    pub fn_supplement: u64,
    pub format: ExportFormat,
    pub output_path: String,
}

#[derive(Debug, Clone)]
pub struct ExportOptions {
    pub partition: Partition,
    pub detector_id: String,
    pub format: ExportFormat,
    pub out_dir: PathBuf,
    /// Append annotator FN marks on the exported frames as extra boxes.
    pub include_fn_marks: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationObject {
    pub name: String,
    pub score: f64,
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl AnnotationObject {
    pub fn from_bbox(name: &str, score: f64, b: &BBox) -> Self {
        Self {
            name: name.to_string(),
            score: round_significant(score, SCORE_SIGNIFICANT_DIGITS),
            xmin: b.x,
            ymin: b.y,
            xmax: b.x_max(),
            ymax: b.y_max(),
        }
    }

    pub fn bbox(&self) -> BBox {
        BBox::new(self.xmin, self.ymin, self.xmax - self.xmin, self.ymax - self.ymin)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationDoc {
    pub version: u32,
    pub frame_id: String,
    pub filename: String,
    pub width: u32,
    pub height: u32,
    pub depth: u32,
    pub objects: Vec<AnnotationObject>,
}

pub fn round_significant(v: f64, digits: usize) -> f64 {
    if !v.is_finite() || v == 0.0 {
        return v;
    }
    format!("{:.*e}", digits - 1, v).parse().unwrap_or(v)
}

impl AnnotationDoc {
    pub fn to_voc(&self) -> String {
        let mut s = String::new();
        s.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
        s.push_str(&format!("<annotation version=\"{}\">\n", self.version));
        s.push_str(&format!("  <frame_id>{}</frame_id>\n", escape(self.frame_id.as_str())));
        s.push_str(&format!("  <filename>{}</filename>\n", escape(self.filename.as_str())));
        s.push_str("  <size>\n");
        s.push_str(&format!("    <width>{}</width>\n", self.width));
        s.push_str(&format!("    <height>{}</height>\n", self.height));
        s.push_str(&format!("    <depth>{}</depth>\n", self.depth));
        s.push_str("  </size>\n");
        for o in &self.objects {
            s.push_str("  <object>\n");
            s.push_str(&format!("    <name>{}</name>\n", escape(o.name.as_str())));
            s.push_str(&format!("    <score>{}</score>\n", o.score));
            s.push_str("    <bndbox>\n");
            s.push_str(&format!("      <xmin>{}</xmin>\n", o.xmin));
            s.push_str(&format!("      <ymin>{}</ymin>\n", o.ymin));
            s.push_str(&format!("      <xmax>{}</xmax>\n", o.xmax));
            s.push_str(&format!("      <ymax>{}</ymax>\n", o.ymax));
            s.push_str("    </bndbox>\n");
            s.push_str("  </object>\n");
        }
        s.push_str("</annotation>\n");
        s
    }

    pub fn from_voc(xml: &str) -> Result<Self, String> {
        let mut reader = Reader::from_str(xml);
        reader.config_mut().trim_text(true);
        let mut path: Vec<String> = Vec::new();
        let mut doc = AnnotationDoc {
            version: 0,
            frame_id: String::new(),
            filename: String::new(),
            width: 0,
            height: 0,
            depth: 0,
            objects: Vec::new(),
        };
        let mut obj: Option<AnnotationObject> = None;
        let num = |t: &str| t.parse::<f64>().map_err(|e| format!("bad number {t:?}: {e}"));
        loop {
            match reader.read_event().map_err(|e| e.to_string())? {
                Event::Start(e) => {
                    let name = String::from_utf8_lossy(e.name().as_ref()).into_owned();
                    if name == "annotation" {
                        for a in e.attributes().flatten() {
                            if a.key.as_ref() == b"version" {
                                let v = a.unescape_value().map_err(|e| e.to_string())?;
                                doc.version = v.parse().map_err(|_| format!("bad version {v:?}"))?;
                            }
                        }
                    }
                    if name == "object" {
                        obj = Some(AnnotationObject {
                            name: String::new(),
                            score: 0.0,
                            xmin: 0.0,
                            ymin: 0.0,
                            xmax: 0.0,
                            ymax: 0.0,
                        });
                    }
                    path.push(name);
                }
                Event::End(_) => {
                    if path.pop().as_deref() == Some("object") {
                        doc.objects.extend(obj.take());
                    }
                }
                Event::Text(t) => {
                    let text = t.unescape().map_err(|e| e.to_string())?.into_owned();
                    let leaf = path.last().map(String::as_str).unwrap_or("");
                    let parent = path.len().checked_sub(2).map(|i| path[i].as_str()).unwrap_or("");
                    match (parent, leaf) {
                        ("annotation", "frame_id") => doc.frame_id = text,
                        ("annotation", "filename") => doc.filename = text,
                        ("size", "width") => doc.width = num(&text)? as u32,
                        ("size", "height") => doc.height = num(&text)? as u32,
                        ("size", "depth") => doc.depth = num(&text)? as u32,
                        ("object", "name") => {
                            if let Some(o) = obj.as_mut() {
                                o.name = text;
                            }
                        }
                        ("object", "score") => {
                            if let Some(o) = obj.as_mut() {
                                o.score = num(&text)?;
                            }
                        }
                        ("bndbox", field) => {
                            if let Some(o) = obj.as_mut() {
                                let v = num(&text)?;
                                match field {
                                    "xmin" => o.xmin = v,
                                    "ymin" => o.ymin = v,
                                    "xmax" => o.xmax = v,
                                    "ymax" => o.ymax = v,
                                    _ => {}
                                }
                            }
                        }
                        _ => {}
                    }
                }
                Event::Eof => break,
                _ => {}
            }
        }
        if doc.version == 0 {
            return Err("missing annotation version".into());
        }
        Ok(doc)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("annotation serialises");
        s.push('\n');
        s
    }
}

/// Parses an annotation document written by [`export_finetune_dataset`].
pub fn parse_annotation(path: &Path) -> Result<AnnotationDoc, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => serde_json::from_str(&text).map_err(|e| e.to_string()),
        _ => AnnotationDoc::from_voc(&text),
    }
}

pub fn export_finetune_dataset(store: &Store, opts: &ExportOptions) -> Result<ExportManifest, StoreError> {
    let frames = store.partition_frames(opts.partition);
    let detections = store.detections(&opts.detector_id);
    let fn_marks: Vec<crate::review::FnMark> = if opts.include_fn_marks {
        store
            .query(Some(RecordKind::FnMark), |_| true)
            .into_iter()
            .filter_map(|e| match e.record {
                Record::FnMark(m) => Some(m),
                _ => None,
            })
            .collect()
    } else {
        Vec::new()
    };

    let ann_dir = opts.out_dir.join("annotations");
    fs::create_dir_all(&ann_dir)?;
    let mut index = String::new();
    let mut box_count = 0u64;
    let mut fn_supplement = 0u64;
    let class_of_detector = detections.first().map(|d| d.class_label.clone()).unwrap_or_else(|| "object".into());

    let mut by_frame: std::collections::BTreeMap<&str, Vec<&crate::detector_io::Detection>> = Default::default();
    for d in &detections {
        by_frame.entry(d.frame_id.as_str()).or_default().push(d);
    }

    for frame in &frames {
        let mut objects: Vec<AnnotationObject> = by_frame
            .get(frame.frame_id.as_str())
            .map(|v| {
                v.iter()
                    .map(|d| AnnotationObject::from_bbox(&d.class_label, d.score, &d.bbox))
                    .collect()
            })
            .unwrap_or_default();
        for m in fn_marks.iter().filter(|m| m.frame_id == frame.frame_id) {
            objects.push(AnnotationObject::from_bbox(&class_of_detector, 1.0, &m.bbox));
            fn_supplement += 1;
        }
        box_count += objects.len() as u64;
        let doc = AnnotationDoc {
            version: ANNOTATION_VERSION,
            frame_id: frame.frame_id.clone(),
            filename: Path::new(&frame.image_path)
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            width: frame.width,
            height: frame.height,
            depth: 1,
            objects,
        };
        let rel = format!("annotations/{}.{}", frame.frame_id, opts.format.extension());
        let body = match opts.format {
            ExportFormat::Voc => doc.to_voc(),
            ExportFormat::Json => doc.to_json(),
        };
        fs::write(opts.out_dir.join(&rel), body)?;
        index.push_str(&format!("{}\t{}\t{}\n", frame.frame_id, rel, doc.objects.len()));
    }
    fs::write(opts.out_dir.join("index.tsv"), &index)?;

    if box_count == 0 {
        warn!(detector = %opts.detector_id, partition = %opts.partition, "export contains no boxes");
    }
    let manifest = ExportManifest {
        export_id: format!("{}-{}-r{}", opts.detector_id, opts.partition, store.revision()),
        partition: opts.partition,
        detector_id: opts.detector_id.clone(),
        frame_count: frames.len() as u64,
        box_count,
        fn_supplement,
        format: opts.format,
        output_path: opts.out_dir.to_string_lossy().into_owned(),
    };
    // the on-disk copy sits inside the export, so its path is relative to itself
    let on_disk = ExportManifest {
        output_path: ".".into(),
        ..manifest.clone()
    };
    let mut f = fs::File::create(opts.out_dir.join("manifest.json"))?;
    f.write_all(serde_json::to_string_pretty(&on_disk).expect("manifest serialises").as_bytes())?;
    f.write_all(b"\n")?;
    Ok(manifest)
}
