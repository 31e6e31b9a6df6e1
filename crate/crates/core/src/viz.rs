//! Attention dumps and their SVG rendering.
//!
//! The dump is a JSON document:
//!
//! ```json
//! {"sentences": [{
//!   "source": "...", "output": "...",
//!   "encoder_nodes": [{"id": 0, "span": [0, 3]}],
//!   "decoder_nodes": [{"id": 0, "span": [0, 2]}],
//!   "alignments": [{"encoder": 0, "decoder": 0, "weight": 1.0}]
//! }]}
//! ```
//!
//! Spans are half-open character ranges. Each decoder node's weights sum
//! to one.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::inference::TranslationResult;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub sentences: Vec<SentenceDump>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceDump {
    pub source: String,
    pub output: String,
    pub encoder_nodes: Vec<NodeDump>,
    pub decoder_nodes: Vec<NodeDump>,
    pub alignments: Vec<Alignment>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeDump {
    pub id: usize,
    pub span: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub encoder: usize,
    pub decoder: usize,
    pub weight: f64,
}

impl SentenceDump {
    pub fn from_translation(r: &TranslationResult) -> Self {
        let nodes = |spans: &[(usize, usize)]| {
            spans
                .iter()
                .enumerate()
                .map(|(id, &span)| NodeDump { id, span })
                .collect()
        };
        let mut alignments = Vec::new();
        for j in 0..r.decoder_spans.len() {
            for (i, row) in r.attention.iter().enumerate() {
                alignments.push(Alignment {
                    encoder: i,
                    decoder: j,
                    weight: row[j],
                });
            }
        }
        Self {
            source: r.source.clone(),
            output: r.output.clone(),
            encoder_nodes: nodes(&r.encoder_spans),
            decoder_nodes: nodes(&r.decoder_spans),
            alignments,
        }
    }

    /// Largest deviation of a decoder node's weight sum from one.
    pub fn max_column_error(&self) -> f64 {
        self.decoder_nodes
            .iter()
            .map(|d| {
                let s: f64 = self
                    .alignments
                    .iter()
                    .filter(|a| a.decoder == d.id)
                    .map(|a| a.weight)
                    .sum();
                (s - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvgStyle {
    pub cell: f64,
    pub margin: f64,
    /// Weights below this draw nothing.
    pub threshold: f64,
    /// Fill opacity of a weight of one.
    pub max_opacity: f64,
}

impl Default for SvgStyle {
    fn default() -> Self {
        Self {
            cell: 16.0,
            margin: 24.0,
            threshold: 0.05,
            max_opacity: 0.85,
        }
    }
}

fn escape(c: char) -> String {
    match c {
        '<' => "&lt;".into(),
        '>' => "&gt;".into(),
        '&' => "&amp;".into(),
        '"' => "&quot;".into(),
        '\'' => "&apos;".into(),
        c => c.to_string(),
    }
}

/// Source characters run along the x axis and output characters down the
/// y axis. Every weight at or above the threshold shades the rectangle
/// spanned by its encoder and decoder constituents.
pub fn render_svg(s: &SentenceDump, style: &SvgStyle) -> String {
    let src: Vec<char> = s.source.chars().collect();
    let out: Vec<char> = s.output.chars().collect();
    let (c, m) = (style.cell, style.margin);
    let w = m + c * src.len().max(1) as f64;
    let h = m + c * out.len().max(1) as f64;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(
        svg,
        r#"<g font-family="monospace" font-size="{}" text-anchor="middle">"#,
        c * 0.75
    );
    for (i, ch) in src.iter().enumerate() {
        let x = m + c * (i as f64 + 0.5);
        let _ = writeln!(svg, r#"<text x="{x}" y="{}">{}</text>"#, m * 0.7, escape(*ch));
    }
    for (j, ch) in out.iter().enumerate() {
        let y = m + c * (j as f64 + 0.75);
        let _ = writeln!(svg, r#"<text x="{}" y="{y}">{}</text>"#, m * 0.5, escape(*ch));
    }
    let _ = writeln!(svg, "</g>");
    let span = |nodes: &[NodeDump], id: usize| nodes.iter().find(|n| n.id == id).map(|n| n.span);
    for a in &s.alignments {
        if a.weight < style.threshold {
            continue;
        }
        let (Some(es), Some(ds)) = (span(&s.encoder_nodes, a.encoder), span(&s.decoder_nodes, a.decoder))
        else {
            continue;
        };
        if es.1 <= es.0 || ds.1 <= ds.0 {
            continue;
        }
        let _ = writeln!(
            svg,
            r#"<rect x="{}" y="{}" width="{}" height="{}" fill="black" fill-opacity="{:.4}"/>"#,
            m + c * es.0 as f64,
            m + c * ds.0 as f64,
            c * (es.1 - es.0) as f64,
            c * (ds.1 - ds.0) as f64,
            a.weight.min(1.0) * style.max_opacity
        );
    }
    let _ = writeln!(
        svg,
        r#"<path d="M{m} {m}H{w}V{h}H{m}Z" fill="none" stroke="gray" stroke-width="0.5"/>"#
    );
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(weight: f64) -> SentenceDump {
        SentenceDump {
            source: "a<b".into(),
            output: "x&".into(),
            encoder_nodes: vec![NodeDump { id: 0, span: (0, 3) }],
            decoder_nodes: vec![NodeDump { id: 0, span: (0, 2) }],
            alignments: vec![Alignment {
                encoder: 0,
                decoder: 0,
                weight,
            }],
        }
    }

    fn rects(svg: &str) -> Vec<(f64, f64, f64, f64, f64)> {
        let doc = roxmltree::Document::parse(svg).expect("well-formed XML");
        doc.descendants()
            .filter(|n| n.has_tag_name("rect"))
            .map(|n| {
                let f = |k| n.attribute(k).unwrap().parse::<f64>().unwrap();
                (f("x"), f("y"), f("width"), f("height"), f("fill-opacity"))
            })
            .collect()
    }

    #[test]
    fn full_weight_draws_one_rectangle() {
        let style = SvgStyle::default();
        let r = rects(&render_svg(&one(1.0), &style));
        assert_eq!(r.len(), 1);
        assert_eq!(r[0], (24.0, 24.0, 48.0, 32.0, 0.85));
    }

    #[test]
    fn weight_below_threshold_draws_nothing() {
        assert!(rects(&render_svg(&one(0.01), &SvgStyle::default())).is_empty());
        assert_eq!(rects(&render_svg(&one(0.05), &SvgStyle::default())).len(), 1);
    }

    #[test]
    fn opacity_is_linear_in_weight() {
        let r = rects(&render_svg(&one(0.5), &SvgStyle::default()));
        assert!((r[0].4 - 0.425).abs() < 1e-4);
    }

    #[test]
    fn dump_round_trips_through_json() {
        let d = AttentionDump {
            sentences: vec![one(1.0), one(0.3)],
        };
        let json = serde_json::to_string(&d).unwrap();
        let back: AttentionDump = serde_json::from_str(&json).unwrap();
        assert_eq!(back, d);
        assert_eq!(serde_json::to_string(&back).unwrap(), json);
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["sentences"][0]["encoder_nodes"][0]["span"], serde_json::json!([0, 3]));
    }

    #[test]
    fn column_error() {
        assert_eq!(one(1.0).max_column_error(), 0.0);
        assert!((one(0.3).max_column_error() - 0.7).abs() < 1e-12);
    }
}
