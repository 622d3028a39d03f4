//! Standalone SVG 1.1 renderings of run metrics: line plots, the value-gap
//! versus W2 scatter with its linear envelope, and 2x2 joint-action mass
//! heatmaps. Output is plain text built deterministically, so identical
//! inputs give identical files.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::train::{read_bounds, read_metrics};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 50.0;

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

#[derive(Clone, Debug)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

struct Frame {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn from_points<'a>(points: impl Iterator<Item = &'a (f64, f64)>) -> Result<Frame> {
        let mut f = Frame {
            x_min: f64::INFINITY,
            x_max: f64::NEG_INFINITY,
            y_min: f64::INFINITY,
            y_max: f64::NEG_INFINITY,
        };
        let mut any = false;
        for &(x, y) in points {
            if !x.is_finite() || !y.is_finite() {
                continue;
            }
            any = true;
            f.x_min = f.x_min.min(x);
            f.x_max = f.x_max.max(x);
            f.y_min = f.y_min.min(y);
            f.y_max = f.y_max.max(y);
        }
        if !any {
            return Err(Error::Plot("no finite points to plot".into()));
        }
        if f.x_max == f.x_min {
            f.x_min -= 0.5;
            f.x_max += 0.5;
        }
        if f.y_max == f.y_min {
            f.y_min -= 0.5;
            f.y_max += 0.5;
        }
        Ok(f)
    }

    fn sx(&self, x: f64) -> f64 {
        MARGIN_LEFT + (x - self.x_min) / (self.x_max - self.x_min) * (WIDTH - MARGIN_LEFT - MARGIN_RIGHT)
    }

    fn sy(&self, y: f64) -> f64 {
        HEIGHT - MARGIN_BOTTOM
            - (y - self.y_min) / (self.y_max - self.y_min) * (HEIGHT - MARGIN_TOP - MARGIN_BOTTOM)
    }
}

fn open_svg(title: &str) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{}\" height=\"{}\" viewBox=\"0 0 {} {}\">\n",
        WIDTH, HEIGHT, WIDTH, HEIGHT
    );
    let _ = write!(
        s,
        "<rect x=\"0\" y=\"0\" width=\"{}\" height=\"{}\" fill=\"white\"/>\n",
        WIDTH, HEIGHT
    );
    let _ = write!(
        s,
        "<text x=\"{}\" y=\"22\" font-family=\"sans-serif\" font-size=\"15\" text-anchor=\"middle\">{}</text>\n",
        WIDTH / 2.0,
        escape(title)
    );
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn axes(s: &mut String, frame: &Frame, x_label: &str, y_label: &str) {
    let x0 = MARGIN_LEFT;
    let x1 = WIDTH - MARGIN_RIGHT;
    let y0 = HEIGHT - MARGIN_BOTTOM;
    let y1 = MARGIN_TOP;
    let _ = write!(
        s,
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>\n"
    );
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let xv = frame.x_min + t * (frame.x_max - frame.x_min);
        let yv = frame.y_min + t * (frame.y_max - frame.y_min);
        let xs = frame.sx(xv);
        let ys = frame.sy(yv);
        let _ = write!(
            s,
            "<line x1=\"{xs}\" y1=\"{y0}\" x2=\"{xs}\" y2=\"{}\" stroke=\"black\"/>\n",
            y0 + 4.0
        );
        let _ = write!(
            s,
            "<text x=\"{xs}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">{}</text>\n",
            y0 + 16.0,
            format_tick(xv)
        );
        let _ = write!(
            s,
            "<line x1=\"{}\" y1=\"{ys}\" x2=\"{x0}\" y2=\"{ys}\" stroke=\"black\"/>\n",
            x0 - 4.0
        );
        let _ = write!(
            s,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">{}</text>\n",
            x0 - 7.0,
            ys + 3.0,
            format_tick(yv)
        );
    }
    let _ = write!(
        s,
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n",
        (x0 + x1) / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    );
    let _ = write!(
        s,
        "<text x=\"16\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>\n",
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    );
}

fn format_tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1000.0 || v.abs() < 0.01 {
        format!("{:.1e}", v)
    } else {
        format!("{:.3}", v)
    }
}

/// Multi-series line plot.
pub fn line_plot(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
) -> Result<()> {
    if series.iter().all(|s| s.points.is_empty()) {
        return Err(Error::Plot(format!("{}: no data to plot", title)));
    }
    let frame = Frame::from_points(series.iter().flat_map(|s| s.points.iter()))?;
    let mut s = open_svg(title);
    axes(&mut s, &frame, x_label, y_label);
    for (si, ser) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        if ser.points.len() == 1 {
            let (x, y) = ser.points[0];
            let _ = write!(
                s,
                "<circle cx=\"{}\" cy=\"{}\" r=\"3\" fill=\"{}\"/>\n",
                frame.sx(x),
                frame.sy(y),
                color
            );
        } else if !ser.points.is_empty() {
            let pts: Vec<String> = ser
                .points
                .iter()
                .map(|&(x, y)| format!("{:.2},{:.2}", frame.sx(x), frame.sy(y)))
                .collect();
            let _ = write!(
                s,
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\"/>\n",
                pts.join(" "),
                color
            );
        }
        let ly = MARGIN_TOP + 14.0 * si as f64;
        let _ = write!(
            s,
            "<rect x=\"{}\" y=\"{}\" width=\"10\" height=\"3\" fill=\"{}\"/>\n",
            WIDTH - 170.0,
            ly,
            color
        );
        let _ = write!(
            s,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\">{}</text>\n",
            WIDTH - 155.0,
            ly + 5.0,
            escape(&ser.label)
        );
    }
    s.push_str("</svg>\n");
    std::fs::write(path, s)?;
    Ok(())
}

/// Scatter of (w2, value gap) checkpoints with the linear envelope
/// y = slope * x drawn through the frame.
pub fn scatter_with_envelope(
    path: &Path,
    title: &str,
    points: &[(f64, f64)],
    slope: f64,
) -> Result<()> {
    if points.is_empty() {
        return Err(Error::Plot(format!("{}: no data to plot", title)));
    }
    let mut frame = Frame::from_points(points.iter())?;
    frame.x_min = frame.x_min.min(0.0);
    frame.y_min = frame.y_min.min(0.0);
    frame.y_max = frame.y_max.max(slope * frame.x_max);
    let mut s = open_svg(title);
    axes(&mut s, &frame, "exact W2", "value gap");
    let _ = write!(
        s,
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#d62728\" stroke-dasharray=\"6 3\"/>\n",
        frame.sx(0.0),
        frame.sy(0.0),
        frame.sx(frame.x_max),
        frame.sy(slope * frame.x_max)
    );
    for &(x, y) in points {
        let _ = write!(
            s,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"#1f77b4\" fill-opacity=\"0.7\"/>\n",
            frame.sx(x),
            frame.sy(y)
        );
    }
    let _ = write!(
        s,
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"#d62728\">envelope slope {:.3}</text>\n",
        MARGIN_LEFT + 8.0,
        MARGIN_TOP + 12.0,
        slope
    );
    s.push_str("</svg>\n");
    std::fs::write(path, s)?;
    Ok(())
}

/// 2x2 joint-action mass heatmap.
pub fn heatmap2(path: &Path, title: &str, table: &[[f64; 2]; 2]) -> Result<()> {
    let mut s = open_svg(title);
    let cell = 140.0;
    let ox = (WIDTH - 2.0 * cell) / 2.0;
    let oy = 60.0;
    for a1 in 0..2 {
        for a2 in 0..2 {
            let v = table[a1][a2].clamp(0.0, 1.0);
            let shade = (255.0 - v * 205.0) as u8;
            let _ = write!(
                s,
                "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"rgb({},{},255)\" stroke=\"black\"/>\n",
                ox + a2 as f64 * cell,
                oy + a1 as f64 * cell,
                cell,
                cell,
                shade,
                shade
            );
            let _ = write!(
                s,
                "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">{:.3}</text>\n",
                ox + a2 as f64 * cell + cell / 2.0,
                oy + a1 as f64 * cell + cell / 2.0 + 5.0,
                table[a1][a2]
            );
        }
    }
    for (i, label) in ["a2=0", "a2=1"].iter().enumerate() {
        let _ = write!(
            s,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n",
            ox + i as f64 * cell + cell / 2.0,
            oy - 8.0,
            label
        );
    }
    for (i, label) in ["a1=0", "a1=1"].iter().enumerate() {
        let _ = write!(
            s,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"end\">{}</text>\n",
            ox - 8.0,
            oy + i as f64 * cell + cell / 2.0,
            label
        );
    }
    s.push_str("</svg>\n");
    std::fs::write(path, s)?;
    Ok(())
}

/// Render the standard panels for a finished run directory: loss and gap
/// curves, mutual information, the gap/bound series, the scatter with
/// envelope, and joint-action heatmaps when the run logged them.
pub fn emit_plots(run_dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let metrics_path = run_dir.join("metrics.csv");
    let bounds_path = run_dir.join("bounds.csv");
    let metrics = read_metrics(&metrics_path)?;
    let bounds = read_bounds(&bounds_path)?;
    if metrics.is_empty() {
        return Err(Error::Plot(format!(
            "{}: metrics.csv has no rows",
            run_dir.display()
        )));
    }
    let series_of = |name: &str| -> Vec<(f64, f64)> {
        metrics
            .iter()
            .filter(|m| m.metric == name)
            .map(|m| (m.step as f64, m.value))
            .collect()
    };
    let require = |name: &str| -> Result<Vec<(f64, f64)>> {
        let s = series_of(name);
        if s.is_empty() {
            return Err(Error::Plot(format!("missing column {:?}", name)));
        }
        Ok(s)
    };
    let mut written = Vec::new();

    let distill = require("distill_loss")?;
    let gap: Vec<(f64, f64)> = bounds.iter().map(|b| (b.step as f64, b.value_gap)).collect();
    let loss_gap = run_dir.join("loss_gap.svg");
    line_plot(
        &loss_gap,
        "distillation loss and value gap",
        "step",
        "value",
        &[
            Series {
                label: "distill loss".into(),
                points: distill,
            },
            Series {
                label: "value gap".into(),
                points: gap.clone(),
            },
        ],
    )?;
    written.push(loss_gap);

    let mi_joint = require("mi_joint")?;
    let mi_factored = require("mi_factored")?;
    let mi = run_dir.join("mutual_information.svg");
    line_plot(
        &mi,
        "inter-agent mutual information",
        "step",
        "MI (nats)",
        &[
            Series {
                label: "joint flow".into(),
                points: mi_joint,
            },
            Series {
                label: "factored".into(),
                points: mi_factored,
            },
        ],
    )?;
    written.push(mi);

    if !bounds.is_empty() {
        let bound_series: Vec<(f64, f64)> = bounds.iter().map(|b| (b.step as f64, b.bound)).collect();
        let gb = run_dir.join("gap_bound.svg");
        line_plot(
            &gb,
            "value gap and its bound",
            "step",
            "value",
            &[
                Series {
                    label: "value gap".into(),
                    points: gap,
                },
                Series {
                    label: "L * coupling".into(),
                    points: bound_series,
                },
            ],
        )?;
        written.push(gb);

        let slope = bounds.iter().map(|b| b.l_hat).fold(0.0f64, f64::max) * 1.10;
        let scatter_points: Vec<(f64, f64)> =
            bounds.iter().map(|b| (b.w2_exact, b.value_gap)).collect();
        let sc = run_dir.join("gap_vs_w2.svg");
        scatter_with_envelope(&sc, "value gap vs exact W2", &scatter_points, slope)?;
        written.push(sc);
    }

    // Heatmaps for matrix-game runs, from the last logged mass rows.
    let last_mass = |tag: &str| -> Option<[[f64; 2]; 2]> {
        let mut table = [[f64::NAN; 2]; 2];
        for a1 in 0..2 {
            for a2 in 0..2 {
                let name = format!("p{}{}_{}", a1, a2, tag);
                table[a1][a2] = metrics
                    .iter()
                    .rev()
                    .find(|m| m.metric == name)
                    .map(|m| m.value)?;
            }
        }
        Some(table)
    };
    if let (Some(flow_mass), Some(onestep_mass)) = (last_mass("flow"), last_mass("onestep")) {
        let hf = run_dir.join("mass_flow.svg");
        heatmap2(&hf, "joint flow action mass", &flow_mass)?;
        written.push(hf);
        let ho = run_dir.join("mass_onestep.svg");
        heatmap2(&ho, "factored policy action mass", &onestep_mass)?;
        written.push(ho);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_point_series_is_still_valid_svg() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.svg");
        line_plot(
            &path,
            "single",
            "x",
            "y",
            &[Series {
                label: "s".into(),
                points: vec![(1.0, 2.0)],
            }],
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("<svg"));
        assert!(text.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn empty_series_is_an_error_and_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("none.svg");
        let err = line_plot(&path, "none", "x", "y", &[]).unwrap_err();
        assert!(err.to_string().contains("no data"));
        assert!(!path.exists());
    }

    #[test]
    fn missing_metrics_column_is_named() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("metrics.csv"), "step,metric,value,aux\n1,other,0.5,\n")
            .unwrap();
        std::fs::write(
            dir.path().join("bounds.csv"),
            "step,distill_loss,w2_exact,coupling_rms,l_hat,value_gap,bound,holds\n",
        )
        .unwrap();
        let err = emit_plots(dir.path()).unwrap_err();
        assert!(err.to_string().contains("distill_loss"), "{}", err);
    }

    #[test]
    fn heatmap_renders() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.svg");
        heatmap2(&path, "mass", &[[0.05, 0.45], [0.45, 0.05]]).unwrap();
        assert!(std::fs::read_to_string(&path).unwrap().contains("0.450"));
    }
}
