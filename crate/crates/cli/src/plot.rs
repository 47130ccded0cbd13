//! Summaries and plot files rendered from record logs.

use cdgmae::io::{fmt6, render_table, Record};

/// Numeric keys of `records` in first-seen order.
pub fn numeric_keys(records: &[Record]) -> Vec<String> {
    let mut keys: Vec<String> = Vec::new();
    for r in records {
        for k in r.keys() {
            if r.get_f64(k).is_some() && !keys.iter().any(|x| x == k) {
                keys.push(k.to_string());
            }
        }
    }
    keys
}

/// One row per numeric key: count, first, last, min, max and mean.
pub fn summary_table(records: &[Record]) -> String {
    let rows: Vec<Vec<String>> = numeric_keys(records)
        .iter()
        .map(|k| {
            let v: Vec<f64> = records.iter().filter_map(|r| r.get_f64(k)).collect();
            let min = v.iter().copied().fold(f64::INFINITY, f64::min);
            let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            vec![k.clone(), v.len().to_string(), fmt6(v[0]), fmt6(v[v.len() - 1]), fmt6(min), fmt6(max), fmt6(mean)]
        })
        .collect();
    render_table(&["key", "n", "first", "last", "min", "max", "mean"], &rows)
}

/// Rows `(x, [y...])` for records that carry `x` and every `y` key.
pub fn series(records: &[Record], x: &str, ys: &[String]) -> Vec<(f64, Vec<f64>)> {
    records
        .iter()
        .filter_map(|r| {
            let xv = r.get_f64(x)?;
            let yv = ys.iter().map(|k| r.get_f64(k)).collect::<Option<Vec<_>>>()?;
            Some((xv, yv))
        })
        .collect()
}

/// Whitespace-separated columns with a `#` header line.
pub fn dat_file(x: &str, ys: &[String], rows: &[(f64, Vec<f64>)]) -> String {
    let mut out = format!("# {x} {}\n", ys.join(" "));
    for (xv, yv) in rows {
        out.push_str(&fmt6(*xv));
        for v in yv {
            out.push(' ');
            out.push_str(&fmt6(*v));
        }
        out.push('\n');
    }
    out
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// A line chart with one polyline per `y` series.
pub fn svg_plot(title: &str, x: &str, ys: &[String], rows: &[(f64, Vec<f64>)]) -> String {
    let (w, h, m) = (640.0, 400.0, 50.0);
    let range = |vals: &mut dyn Iterator<Item = f64>| {
        let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi > lo {
            (lo, hi)
        } else {
            (lo - 0.5, hi + 0.5)
        }
    };
    let (x0, x1) = range(&mut rows.iter().map(|r| r.0));
    let (y0, y1) = range(&mut rows.iter().flat_map(|r| r.1.iter().copied()));
    let px = |v: f64| m + (v - x0) / (x1 - x0) * (w - 2.0 * m);
    let py = |v: f64| h - m - (v - y0) / (y1 - y0) * (h - 2.0 * m);

    let mut s =
        format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n");
    s += &format!("<rect x=\"{m}\" y=\"{m}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#444\"/>\n", w - 2.0 * m, h - 2.0 * m);
    s += &format!("<text x=\"{}\" y=\"30\" text-anchor=\"middle\">{}</text>\n", w / 2.0, escape(title));
    s += &format!("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n", w / 2.0, h - 15.0, escape(x));
    s += &format!("<text x=\"{m}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n", h - m + 15.0, fmt6(x0));
    s += &format!("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n", w - m, h - m + 15.0, fmt6(x1));
    s += &format!("<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n", m - 4.0, h - m, fmt6(y0));
    s += &format!("<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n", m - 4.0, m + 4.0, fmt6(y1));
    for (i, name) in ys.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let points: Vec<String> = rows.iter().map(|(xv, yv)| format!("{:.2},{:.2}", px(*xv), py(yv[i]))).collect();
        s += &format!("<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n", points.join(" "));
        s += &format!("<text x=\"{}\" y=\"{}\" fill=\"{color}\">{}</text>\n", w - m + 4.0, m + 14.0 * (i as f64 + 1.0), escape(name));
    }
    s + "</svg>\n"
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
