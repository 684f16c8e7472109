//! Time-space diagram of an episode as a standalone SVG.

use super::LogRow;

/// Renders the trajectory log: longitudinal position over time, one
/// polyline per vehicle, the ego drawn on top in a distinct color.
pub fn time_space_svg(rows: &[LogRow], width: f64, height: f64) -> String {
    let (mut t_max, mut s_max) = (1e-9_f64, 1e-9_f64);
    for r in rows {
        t_max = t_max.max(r.t);
        s_max = s_max.max(r.s);
    }
    let x = |t: f64| 40.0 + (width - 60.0) * t / t_max;
    let y = |s: f64| height - 30.0 - (height - 50.0) * s / s_max;

    let mut ids: Vec<u32> = rows.iter().map(|r| r.vehicle).collect();
    ids.sort_unstable();
    ids.dedup();

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    svg.push_str(&format!(
        "<line x1=\"40\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>\n\
         <line x1=\"40\" y1=\"20\" x2=\"40\" y2=\"{0}\" stroke=\"black\"/>\n",
        height - 30.0,
        width - 20.0
    ));
    let palette = ["#4477aa", "#66ccee", "#228833", "#ccbb44", "#aa3377", "#bbbbbb"];
    for id in ids {
        let pts: Vec<String> = rows
            .iter()
            .filter(|r| r.vehicle == id)
            .map(|r| format!("{:.1},{:.1}", x(r.t), y(r.s)))
            .collect();
        if pts.len() < 2 {
            continue;
        }
        let (color, w) = if id == 0 {
            ("#ee6677", 2.5)
        } else {
            (palette[id as usize % palette.len()], 1.0)
        };
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"{w}\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
    }
    svg.push_str("</svg>\n");
    svg
}
