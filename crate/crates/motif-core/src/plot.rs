//! SVG rendering of a clip: CQT heatmap, ground-truth underlays, and
//! detection boxes whose heights scale with confidence.

use std::io::Write;
use std::path::Path;

use crate::cqt::CqtMatrix;
use crate::error::Result;
use crate::eval::GroundTruth;
use crate::geometry::Detection;

const CELL_W: f64 = 1.4;
const CELL_H: f64 = 2.4;
const MARGIN: f64 = 12.0;

fn gray(level: u8) -> String {
    format!("#{level:02x}{level:02x}{level:02x}")
}

/// Write a deterministic SVG for fixed inputs.
pub fn emit_plot(m: &CqtMatrix, dets: &[Detection], gts: &[GroundTruth], out: &Path) -> Result<()> {
    let w = m.n_frames as f64 * CELL_W;
    let h = m.n_bins as f64 * CELL_H;
    let total_w = w + 2.0 * MARGIN;
    let total_h = h + 2.0 * MARGIN;
    let max = m.data.iter().cloned().fold(0.0, f64::max).max(1e-12);
    let sec_to_x = |t: f64| MARGIN + t * m.frame_rate * CELL_W;

    let mut svg = String::with_capacity(1 << 20);
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{total_w:.1}\" height=\"{total_h:.1}\" \
         viewBox=\"0 0 {total_w:.1} {total_h:.1}\">\n"
    ));
    svg.push_str(&format!(
        "<rect x=\"0\" y=\"0\" width=\"{total_w:.1}\" height=\"{total_h:.1}\" fill=\"#ffffff\"/>\n"
    ));

    // heatmap, low bins at the bottom; horizontal runs of equal quantized
    // level are merged into single rects
    for bin in 0..m.n_bins {
        let y = MARGIN + (m.n_bins - 1 - bin) as f64 * CELL_H;
        let row = m.row(bin);
        let mut t = 0;
        while t < m.n_frames {
            let level = 255 - ((row[t] / max).clamp(0.0, 1.0) * 255.0).round() as u8;
            let mut t2 = t + 1;
            while t2 < m.n_frames {
                let l2 = 255 - ((row[t2] / max).clamp(0.0, 1.0) * 255.0).round() as u8;
                if l2 != level {
                    break;
                }
                t2 += 1;
            }
            if level < 255 {
                svg.push_str(&format!(
                    "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{CELL_H:.2}\" fill=\"{}\"/>\n",
                    MARGIN + t as f64 * CELL_W,
                    y,
                    (t2 - t) as f64 * CELL_W,
                    gray(level)
                ));
            }
            t = t2;
        }
    }

    // ground-truth underlays: translucent full-height bands
    for g in gts {
        let x0 = sec_to_x(g.interval.start);
        let x1 = sec_to_x(g.interval.end);
        svg.push_str(&format!(
            "<rect x=\"{x0:.2}\" y=\"{MARGIN:.2}\" width=\"{:.2}\" height=\"{h:.2}\" \
             fill=\"#2e8b57\" fill-opacity=\"0.25\"/>\n",
            x1 - x0
        ));
    }

    // detection boxes anchored at the bottom, height proportional to score
    for d in dets {
        let x0 = sec_to_x(d.interval.start);
        let x1 = sec_to_x(d.interval.end);
        let box_h = h * d.score.clamp(0.0, 1.0);
        let y0 = MARGIN + h - box_h;
        svg.push_str(&format!(
            "<rect x=\"{x0:.2}\" y=\"{y0:.2}\" width=\"{:.2}\" height=\"{box_h:.2}\" \
             fill=\"none\" stroke=\"#d62728\" stroke-width=\"1.5\"/>\n",
            x1 - x0
        ));
        svg.push_str(&format!(
            "<text x=\"{x0:.2}\" y=\"{:.2}\" font-size=\"9\" fill=\"#d62728\">c{} {:.2}</text>\n",
            (y0 - 2.0).max(8.0),
            d.class_id,
            d.score
        ));
    }

    svg.push_str("</svg>\n");
    let mut f = std::fs::File::create(out)?;
    f.write_all(svg.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Interval;

    fn sample_matrix() -> CqtMatrix {
        let mut m = CqtMatrix::zeros(12, 40, 43.066);
        for b in 0..12 {
            for t in 0..40 {
                *m.at_mut(b, t) = ((b * t) % 7) as f64 / 7.0;
            }
        }
        m
    }

    fn tmp(name: &str) -> std::path::PathBuf {
        let d = std::env::temp_dir().join("motif-plot-test");
        std::fs::create_dir_all(&d).unwrap();
        d.join(name)
    }

    #[test]
    fn heatmap_only_when_no_detections() {
        let path = tmp("plain.svg");
        emit_plot(&sample_matrix(), &[], &[], &path).unwrap();
        let svg = std::fs::read_to_string(&path).unwrap();
        assert!(svg.starts_with("<svg"));
        assert!(!svg.contains("stroke=\"#d62728\""));
    }

    #[test]
    fn full_score_box_spans_full_height() {
        let path = tmp("full.svg");
        let det = Detection {
            class_id: 0,
            score: 1.0,
            interval: Interval::new(0.1, 0.5),
        };
        let m = sample_matrix();
        emit_plot(&m, &[det], &[], &path).unwrap();
        let svg = std::fs::read_to_string(&path).unwrap();
        let expect_h = m.n_bins as f64 * CELL_H;
        assert!(
            svg.contains(&format!(
                "height=\"{expect_h:.2}\" \n             fill=\"none\""
            )) || svg.contains(&format!("height=\"{expect_h:.2}\" fill=\"none\""))
        );
    }

    #[test]
    fn byte_identical_for_same_inputs() {
        let (p1, p2) = (tmp("a.svg"), tmp("b.svg"));
        let det = Detection {
            class_id: 1,
            score: 0.62,
            interval: Interval::new(0.2, 0.7),
        };
        let gt = GroundTruth {
            class_id: 1,
            interval: Interval::new(0.25, 0.72),
        };
        emit_plot(&sample_matrix(), &[det.clone()], &[gt.clone()], &p1).unwrap();
        emit_plot(&sample_matrix(), &[det], &[gt], &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}
