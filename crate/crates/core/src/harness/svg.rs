//! Minimal SVG chart writer.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 70.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];

pub fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            _ => out.push(c),
        }
    }
    out
}

fn num(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return "0".into();
    }
    let mag = x.abs();
    if (0.01..1e5).contains(&mag) {
        let s = format!("{x:.2}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{x:.2e}")
    }
}

struct Frame {
    svg: String,
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn new(title: &str, x_label: &str, y_label: &str, (x0, x1): (f64, f64), (y0, y1): (f64, f64)) -> Self {
        let (x1, y1) = (if x1 > x0 { x1 } else { x0 + 1.0 }, if y1 > y0 { y1 } else { y0 + 1.0 });
        let mut svg = String::new();
        let _ = write!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
        );
        let _ = write!(svg, r##"<rect width="{W}" height="{H}" fill="#ffffff"/>"##);
        let _ = write!(svg, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
        let _ = write!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            LEFT + (W - LEFT - RIGHT) / 2.0,
            H - 8.0,
            escape(x_label)
        );
        let _ = write!(
            svg,
            r#"<text x="14" y="{y}" text-anchor="middle" transform="rotate(-90 14 {y})">{}</text>"#,
            escape(y_label),
            y = TOP + (H - TOP - BOTTOM) / 2.0
        );
        let _ = write!(
            svg,
            r##"<path d="M{LEFT} {TOP} V{b} H{r}" fill="none" stroke="#333333"/>"##,
            b = H - BOTTOM,
            r = W - RIGHT
        );
        let mut f = Self { svg, x0, x1, y0, y1 };
        for i in 0..=4 {
            let v = y0 + (y1 - y0) * i as f64 / 4.0;
            let y = f.py(v);
            let _ = write!(f.svg, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, LEFT - 4.0, y + 4.0, num(v));
        }
        f
    }

    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x0) / (self.x1 - self.x0) * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        H - BOTTOM - (y - self.y0) / (self.y1 - self.y0) * (H - TOP - BOTTOM)
    }

    fn x_ticks(&mut self) {
        for i in 0..=4 {
            let v = self.x0 + (self.x1 - self.x0) * i as f64 / 4.0;
            let x = self.px(v);
            let _ = write!(self.svg, r#"<text x="{x}" y="{}" text-anchor="middle">{}</text>"#, H - BOTTOM + 14.0, num(v));
        }
    }

    fn category_labels(&mut self, labels: &[String]) {
        let slot = (W - LEFT - RIGHT) / labels.len().max(1) as f64;
        for (i, l) in labels.iter().enumerate() {
            let x = LEFT + slot * (i as f64 + 0.5);
            let y = H - BOTTOM + 12.0;
            let _ = write!(
                self.svg,
                r#"<text x="{x}" y="{y}" text-anchor="end" transform="rotate(-35 {x} {y})">{}</text>"#,
                escape(l)
            );
        }
    }

    fn finish(mut self) -> String {
        self.svg.push_str("</svg>\n");
        self.svg
    }
}

fn extent(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if lo.is_finite() {
        (lo, hi)
    } else {
        (0.0, 1.0)
    }
}

pub fn bar_chart(title: &str, y_label: &str, labels: &[String], values: &[f64]) -> String {
    let (_, hi) = extent(values.iter().copied());
    let lo = values.iter().copied().fold(0.0f64, f64::min);
    let mut f = Frame::new(title, "", y_label, (0.0, 1.0), (lo, hi.max(0.0)));
    let slot = (W - LEFT - RIGHT) / values.len().max(1) as f64;
    let base = f.py(0.0);
    for (i, &v) in values.iter().enumerate() {
        let top = f.py(v);
        let _ = write!(
            f.svg,
            r#"<rect x="{}" y="{}" width="{}" height="{}" fill="{}"><title>{}</title></rect>"#,
            LEFT + slot * i as f64 + slot * 0.1,
            top.min(base),
            slot * 0.8,
            (base - top).abs(),
            PALETTE[0],
            escape(&format!("{}: {}", labels.get(i).map_or("", |s| s.as_str()), num(v)))
        );
    }
    f.category_labels(labels);
    f.finish()
}

/// Equal-width histogram drawn from pre-computed bin counts.
pub fn histogram_chart(title: &str, x_label: &str, edges: &[f64], counts: &[usize]) -> String {
    let hi = counts.iter().copied().max().unwrap_or(0) as f64;
    let (x0, x1) = (edges.first().copied().unwrap_or(0.0), edges.last().copied().unwrap_or(1.0));
    let mut f = Frame::new(title, x_label, "count", (x0, x1), (0.0, hi));
    for (i, &c) in counts.iter().enumerate() {
        let (a, b) = (f.px(edges[i]), f.px(edges[i + 1]));
        let top = f.py(c as f64);
        let _ = write!(
            f.svg,
            r#"<rect x="{a}" y="{top}" width="{}" height="{}" fill="{}" stroke="white" stroke-width="0.5"/>"#,
            (b - a).max(0.0),
            f.py(0.0) - top,
            PALETTE[0]
        );
    }
    f.x_ticks();
    f.finish()
}

pub struct Series<'a> {
    pub name: &'a str,
    pub points: &'a [(f64, f64)],
}

pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let xs = extent(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let ys = extent(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let mut f = Frame::new(title, x_label, y_label, xs, (ys.0.min(0.0), ys.1));
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let mut d = String::new();
        for (i, &(x, y)) in s.points.iter().enumerate() {
            let _ = write!(d, "{}{:.2} {:.2}", if i == 0 { "M" } else { " L" }, f.px(x), f.py(y));
        }
        if !d.is_empty() {
            let _ = write!(f.svg, r#"<path d="{d}" fill="none" stroke="{color}" stroke-width="1.5"/>"#);
        }
        let _ = write!(
            f.svg,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            W - RIGHT - 120.0,
            TOP + 14.0 * (k as f64 + 1.0),
            escape(s.name)
        );
    }
    f.x_ticks();
    f.finish()
}

/// Background points in grey, highlighted points in red on top.
pub fn scatter_chart(title: &str, points: &[(f64, f64)], highlight: &[bool]) -> String {
    let xs = extent(points.iter().map(|p| p.0));
    let ys = extent(points.iter().map(|p| p.1));
    let mut f = Frame::new(title, "PC1", "PC2", xs, ys);
    for pass in [false, true] {
        let (fill, r) = if pass { ("#d62728", 2.5) } else { ("#9e9e9e", 1.5) };
        let _ = write!(f.svg, r#"<g fill="{fill}" class="{}">"#, if pass { "flagged" } else { "normal" });
        for (p, &h) in points.iter().zip(highlight) {
            if h == pass {
                let _ = write!(f.svg, r#"<circle cx="{:.2}" cy="{:.2}" r="{r}"/>"#, f.px(p.0), f.py(p.1));
            }
        }
        f.svg.push_str("</g>");
    }
    f.x_ticks();
    f.finish()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FiveNumber {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

pub fn box_chart(title: &str, y_label: &str, labels: &[String], boxes: &[FiveNumber]) -> String {
    let ys = extent(boxes.iter().flat_map(|b| [b.min, b.max]));
    let mut f = Frame::new(title, "", y_label, (0.0, 1.0), ys);
    let slot = (W - LEFT - RIGHT) / boxes.len().max(1) as f64;
    for (i, b) in boxes.iter().enumerate() {
        let cx = LEFT + slot * (i as f64 + 0.5);
        let half = slot * 0.3;
        let _ = write!(
            f.svg,
            r##"<path d="M{cx:.2} {:.2} V{:.2} M{cx:.2} {:.2} V{:.2}" stroke="#333333"/>"##,
            f.py(b.min),
            f.py(b.q1),
            f.py(b.q3),
            f.py(b.max)
        );
        let _ = write!(
            f.svg,
            r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}" stroke="#333333"/>"##,
            cx - half,
            f.py(b.q3),
            2.0 * half,
            (f.py(b.q1) - f.py(b.q3)).max(0.0),
            PALETTE[0]
        );
        let _ = write!(
            f.svg,
            r##"<path d="M{:.2} {m:.2} H{:.2}" stroke="#ffffff" stroke-width="2"/>"##,
            cx - half,
            cx + half,
            m = f.py(b.median)
        );
    }
    f.category_labels(labels);
    f.finish()
}

/// Matrix in [-1, 1] shaded blue (negative) to red (positive).
pub fn heat_table(title: &str, labels: &[String], values: &[Vec<f64>]) -> String {
    let n = labels.len().max(1);
    let cell = ((W.min(H) - 140.0) / n as f64).max(4.0);
    let (ox, oy) = (130.0, 50.0);
    let mut svg = String::new();
    let (w, h) = (ox + cell * n as f64 + 20.0, oy + cell * n as f64 + 20.0);
    let _ = write!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="10">"#
    );
    let _ = write!(svg, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, escape(title));
    for (i, row) in values.iter().enumerate() {
        let y = oy + cell * i as f64;
        let _ = write!(svg, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, ox - 4.0, y + cell / 2.0 + 3.0, escape(&labels[i]));
        for (j, &v) in row.iter().enumerate() {
            let x = ox + cell * j as f64;
            let fill = if v.is_nan() {
                "#dddddd".to_string()
            } else {
                let t = v.clamp(-1.0, 1.0);
                let fade = |c: f64| (255.0 - (255.0 - c) * t.abs()).round() as u8;
                if t >= 0.0 {
                    format!("#{:02x}{:02x}{:02x}", fade(214.0), fade(39.0), fade(40.0))
                } else {
                    format!("#{:02x}{:02x}{:02x}", fade(31.0), fade(119.0), fade(180.0))
                }
            };
            let shown = if v.is_nan() { "NaN".to_string() } else { format!("{v:.2}") };
            let _ = write!(
                svg,
                r#"<rect x="{x:.2}" y="{y:.2}" width="{cell:.2}" height="{cell:.2}" fill="{fill}"><title>{} / {}: {shown}</title></rect>"#,
                escape(&labels[i]),
                escape(&labels[j])
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parses(svg: &str) {
        let doc = roxmltree::Document::parse(svg).expect("well-formed svg");
        assert_eq!(doc.root_element().tag_name().name(), "svg");
    }

    #[test]
    fn every_chart_is_well_formed() {
        let labels: Vec<String> = ["a<b", "c&d", "\"e\""].iter().map(|s| s.to_string()).collect();
        parses(&bar_chart("bars & more", "y", &labels, &[1.0, -2.0, 3.0]));
        parses(&bar_chart("empty", "y", &[], &[]));
        parses(&histogram_chart("h", "x", &[0.0, 1.0, 2.0], &[3, 4]));
        parses(&line_chart("l", "x", "y", &[Series { name: "s<1>", points: &[(1.0, 2.0), (2.0, 1.0)] }]));
        parses(&line_chart("l", "x", "y", &[Series { name: "none", points: &[] }]));
        parses(&scatter_chart("s", &[(0.0, 0.0), (1.0, 1.0)], &[false, true]));
        let b = FiveNumber { min: 1.0, q1: 2.0, median: 3.0, q3: 4.0, max: 5.0 };
        parses(&box_chart("b", "y", &labels, &[b, b, b]));
        parses(&heat_table("c", &labels, &[vec![1.0, f64::NAN, -0.5], vec![0.0; 3], vec![0.3; 3]]));
    }

    #[test]
    fn empty_highlight_draws_no_flagged_points() {
        let svg = scatter_chart("s", &[(0.0, 0.0), (1.0, 2.0), (2.0, 1.0)], &[false; 3]);
        let doc = roxmltree::Document::parse(&svg).unwrap();
        let flagged = doc.descendants().find(|n| n.attribute("class") == Some("flagged")).unwrap();
        assert_eq!(flagged.children().filter(|c| c.is_element()).count(), 0);
        let normal = doc.descendants().find(|n| n.attribute("class") == Some("normal")).unwrap();
        assert_eq!(normal.children().filter(|c| c.is_element()).count(), 3);
    }
}
