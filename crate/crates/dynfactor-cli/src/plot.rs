//! Minimal SVG band plot: axes, center line, shaded band. No dependencies.

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 420.0;
const ML: f64 = 64.0;
const MR: f64 = 16.0;
const MT: f64 = 36.0;
const MB: f64 = 44.0;

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let a = v.abs();
    if (0.001..10000.0).contains(&a) {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{v:.2e}")
    }
}

/// Render one series' band: `center` between `lower` and `upper`, x-axis
/// labeled by `time`.
pub fn band_svg(
    title: &str,
    time: &[String],
    center: &[f64],
    lower: &[f64],
    upper: &[f64],
) -> String {
    let t_len = center.len();
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for t in 0..t_len {
        y_min = y_min.min(lower[t]);
        y_max = y_max.max(upper[t]);
    }
    if !(y_min.is_finite() && y_max.is_finite()) {
        y_min = -1.0;
        y_max = 1.0;
    }
    if y_max - y_min < 1e-12 {
        y_min -= 0.5;
        y_max += 0.5;
    }
    let pad = 0.05 * (y_max - y_min);
    y_min -= pad;
    y_max += pad;

    let x = |t: usize| {
        if t_len < 2 {
            ML + (WIDTH - ML - MR) / 2.0
        } else {
            ML + (WIDTH - ML - MR) * t as f64 / (t_len - 1) as f64
        }
    };
    let y = |v: f64| MT + (HEIGHT - MT - MB) * (y_max - v) / (y_max - y_min);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"22\" font-family=\"sans-serif\" font-size=\"15\" \
         text-anchor=\"middle\">{}</text>\n",
        WIDTH / 2.0,
        xml_escape(title)
    ));

    // Shaded band: upper path forward, lower path backward.
    let mut band = String::from("M");
    for t in 0..t_len {
        band.push_str(&format!(" {:.2},{:.2}", x(t), y(upper[t])));
    }
    for t in (0..t_len).rev() {
        band.push_str(&format!(" {:.2},{:.2}", x(t), y(lower[t])));
    }
    band.push_str(" Z");
    svg.push_str(&format!(
        "<path d=\"{band}\" fill=\"#9ec9ff\" fill-opacity=\"0.55\" stroke=\"none\"/>\n"
    ));

    // Center line.
    let mut line = String::new();
    for t in 0..t_len {
        line.push_str(&format!("{:.2},{:.2} ", x(t), y(center[t])));
    }
    svg.push_str(&format!(
        "<polyline points=\"{}\" fill=\"none\" stroke=\"#1f4e96\" stroke-width=\"1.5\"/>\n",
        line.trim_end()
    ));

    // Axes.
    svg.push_str(&format!(
        "<line x1=\"{ML}\" y1=\"{MT}\" x2=\"{ML}\" y2=\"{}\" stroke=\"black\"/>\n",
        HEIGHT - MB
    ));
    svg.push_str(&format!(
        "<line x1=\"{ML}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>\n",
        HEIGHT - MB,
        WIDTH - MR
    ));

    // Y ticks.
    for k in 0..=4 {
        let v = y_min + (y_max - y_min) * k as f64 / 4.0;
        let py = y(v);
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{py:.2}\" x2=\"{ML}\" y2=\"{py:.2}\" stroke=\"black\"/>\n",
            ML - 4.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"11\" \
             text-anchor=\"end\">{}</text>\n",
            ML - 8.0,
            py + 4.0,
            fmt_tick(v)
        ));
    }

    // X ticks on up to 6 time labels.
    let ticks = 6.min(t_len);
    for k in 0..ticks {
        let t = if ticks < 2 {
            0
        } else {
            k * (t_len - 1) / (ticks - 1)
        };
        let px = x(t);
        svg.push_str(&format!(
            "<line x1=\"{px:.2}\" y1=\"{0}\" x2=\"{px:.2}\" y2=\"{1}\" stroke=\"black\"/>\n",
            HEIGHT - MB,
            HEIGHT - MB + 4.0
        ));
        svg.push_str(&format!(
            "<text x=\"{px:.2}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" \
             text-anchor=\"middle\">{}</text>\n",
            HEIGHT - MB + 18.0,
            xml_escape(&time[t])
        ));
    }

    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}
