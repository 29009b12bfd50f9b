//! Per-token expert assignment reports rendered as HTML or ANSI text.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::corpus::byte_tokens;
use crate::error::{Error, Result};
use crate::runtime::{moe_forward, MoeExport};

/// Qualitative pastel palette; experts beyond it get evenly spaced hues.
const BASE_PALETTE: [[u8; 3]; 8] = [
    [0xfb, 0xb4, 0xae],
    [0xb3, 0xcd, 0xe3],
    [0xcc, 0xeb, 0xc5],
    [0xde, 0xcb, 0xe4],
    [0xfe, 0xd9, 0xa6],
    [0xff, 0xff, 0xcc],
    [0xe5, 0xd8, 0xbd],
    [0xfd, 0xda, 0xec],
];

pub fn palette(n: usize) -> Vec<[u8; 3]> {
    (0..n)
        .map(|i| {
            if i < BASE_PALETTE.len() {
                BASE_PALETTE[i]
            } else {
                let extra = n - BASE_PALETTE.len();
                hsl_pastel((i - BASE_PALETTE.len()) as f64 / extra as f64)
            }
        })
        .collect()
}

fn hsl_pastel(hue: f64) -> [u8; 3] {
    let (s, l) = (0.6, 0.82);
    let c = (1.0 - (2.0 * l - 1.0f64).abs()) * s;
    let h = hue * 6.0;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = l - c / 2.0;
    [r, g, b].map(|v| ((v + m) * 255.0).round() as u8)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Html,
    Ansi,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "html" => Ok(ReportFormat::Html),
            "ansi" => Ok(ReportFormat::Ansi),
            _ => Err(Error::Config(format!("unknown report format {s}, expected html or ansi"))),
        }
    }
}

/// Parses `all`, `last`, or a comma list of indices and `a-b` ranges.
pub fn parse_layers(spec: &str, layers: usize) -> Result<Vec<usize>> {
    let bad = |msg: String| Error::Config(format!("layer list {spec:?}: {msg}"));
    let mut out = Vec::new();
    for part in spec.split(',').map(str::trim) {
        match part {
            "all" => out.extend(0..layers),
            "last" => out.push(layers - 1),
            _ => {
                let (a, b) = match part.split_once('-') {
                    Some((a, b)) => (a, b),
                    None => (part, part),
                };
                let parse = |s: &str| s.trim().parse::<usize>().map_err(|_| bad(format!("{s:?} is not a layer")));
                let (a, b) = (parse(a)?, parse(b)?);
                if a > b {
                    return Err(bad(format!("empty range {part}")));
                }
                out.extend(a..=b);
            }
        }
    }
    if let Some(&l) = out.iter().find(|&&l| l >= layers) {
        return Err(bad(format!("unknown layer {l}, the model has {layers}")));
    }
    if out.is_empty() {
        return Err(bad("no layers selected".into()));
    }
    out.dedup();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerRoute {
    pub layer: usize,
    /// Expert of every token.
    pub choices: Vec<usize>,
    /// Tokens routed to each expert.
    pub counts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RouteReport {
    pub experts: usize,
    /// Display text of every byte token; continuation bytes of a
    /// multi-byte character are empty.
    pub spans: Vec<String>,
    pub layers: Vec<LayerRoute>,
}

fn spans(text: &[u8]) -> Vec<String> {
    let mut out = Vec::with_capacity(text.len());
    let mut i = 0;
    while i < text.len() {
        let len = (1..=4)
            .find(|&k| i + k <= text.len() && std::str::from_utf8(&text[i..i + k]).is_ok())
            .unwrap_or(1);
        match std::str::from_utf8(&text[i..i + len]) {
            Ok(s) => out.push(s.to_string()),
            Err(_) => out.push(format!("\\x{:02x}", text[i])),
        }
        out.extend(std::iter::repeat_n(String::new(), len - 1));
        i += len;
    }
    out
}

/// Routes `text` through the model in consecutive chunks of at most the
/// model's context length.
pub fn route_report(ex: &MoeExport, text: &[u8], layers: &[usize]) -> Result<RouteReport> {
    let cfg = ex.cfg();
    if text.is_empty() {
        return Err(Error::invalid("route_dump", "empty text"));
    }
    if let Some(&l) = layers.iter().find(|&&l| l >= cfg.layers) {
        return Err(Error::Config(format!("unknown layer {l}, the model has {}", cfg.layers)));
    }
    let tokens = byte_tokens(text);
    let mut per_layer: Vec<Vec<usize>> = vec![Vec::with_capacity(tokens.len()); layers.len()];
    for chunk in tokens.chunks(cfg.max_seq) {
        let (_, _, routing) = moe_forward(ex, chunk)?;
        for (dst, &l) in per_layer.iter_mut().zip(layers) {
            dst.extend_from_slice(&routing.experts[l]);
        }
    }
    let layers = layers
        .iter()
        .zip(per_layer)
        .map(|(&layer, choices)| {
            let mut counts = vec![0; cfg.experts];
            for &c in &choices {
                counts[c] += 1;
            }
            LayerRoute {
                layer,
                choices,
                counts,
            }
        })
        .collect();
    Ok(RouteReport {
        experts: cfg.experts,
        spans: spans(text),
        layers,
    })
}

fn html_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn hex(c: [u8; 3]) -> String {
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

impl RouteReport {
    pub fn render(&self, format: ReportFormat) -> String {
        match format {
            ReportFormat::Html => self.to_html(),
            ReportFormat::Ansi => self.to_ansi(),
        }
    }

    pub fn to_html(&self) -> String {
        let colors = palette(self.experts);
        let mut s = String::from(
            "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>expert routing</title>\n\
             <style>body{font-family:sans-serif}pre{white-space:pre-wrap;font-family:monospace}\
             td,th{padding:2px 8px}</style></head><body>\n",
        );
        for lr in &self.layers {
            let _ = writeln!(s, "<h2>layer {}</h2>\n<table><tr><th>expert</th><th>tokens</th></tr>", lr.layer);
            for (e, n) in lr.counts.iter().enumerate() {
                let _ = writeln!(
                    s,
                    "<tr><td style=\"background:{}\">{e}</td><td>{n}</td></tr>",
                    hex(colors[e])
                );
            }
            s.push_str("</table>\n<pre>");
            for (span, &e) in self.spans.iter().zip(&lr.choices) {
                if span.is_empty() {
                    continue;
                }
                let _ = write!(
                    s,
                    "<span style=\"background:{}\" title=\"expert {e}\">{}</span>",
                    hex(colors[e]),
                    html_escape(span)
                );
            }
            s.push_str("</pre>\n");
        }
        s.push_str("</body></html>\n");
        s
    }

    pub fn to_ansi(&self) -> String {
        let colors = palette(self.experts);
        let paint = |c: [u8; 3], text: &str| format!("\x1b[48;2;{};{};{}m\x1b[30m{text}\x1b[0m", c[0], c[1], c[2]);
        let mut s = String::new();
        for lr in &self.layers {
            let _ = writeln!(s, "layer {}", lr.layer);
            for (e, n) in lr.counts.iter().enumerate() {
                let _ = writeln!(s, "  {} {n}", paint(colors[e], &format!(" expert {e} ")));
            }
            for (span, &e) in self.spans.iter().zip(&lr.choices) {
                if span.is_empty() {
                    continue;
                }
                // keep line breaks outside the colored cell
                match span.as_str() {
                    "\n" => s.push('\n'),
                    _ => s.push_str(&paint(colors[e], span)),
                }
            }
            s.push_str("\n\n");
        }
        s
    }
}
