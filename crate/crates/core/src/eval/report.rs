//! Report rendering: per-class CSV plus a bar-chart image of per-class AP
//! ordered by label frequency, with the group boundaries marked.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::eval::{APReport, Group};

fn fmt_ap(v: f64) -> String {
    format!("{v:.6}")
}

/// Render the report CSV: one row per evaluated class, then one summary row
/// per group and one overall row. Empty reports keep the header and emit a
/// single `n/a` overall row.
pub fn report_csv(report: &APReport) -> String {
    let mut out = String::from("kind,class,group,train_count,gt_count,ap\n");
    let mut classes: Vec<u32> = report.per_class_ap.keys().copied().collect();
    // Order by training label frequency, most frequent first.
    classes.sort_by_key(|c| {
        (
            std::cmp::Reverse(report.label_frequency.get(c).copied().unwrap_or(0)),
            *c,
        )
    });
    for c in classes {
        let group = report
            .groups
            .get(&c)
            .map(|g| g.to_string())
            .unwrap_or_default();
        out.push_str(&format!(
            "class,{},{},{},{},{}\n",
            c,
            group,
            report.label_frequency.get(&c).copied().unwrap_or(0),
            report.gt_counts.get(&c).copied().unwrap_or(0),
            fmt_ap(report.per_class_ap[&c]),
        ));
    }
    if report.per_class_ap.is_empty() {
        out.push_str("overall,,,,,n/a\n");
        return out;
    }
    for g in [Group::Head, Group::Mid, Group::Tail] {
        let val = report
            .group_mean(g)
            .map(fmt_ap)
            .unwrap_or_else(|| "n/a".into());
        out.push_str(&format!("group,,{g},,,{val}\n"));
    }
    let overall = report
        .overall_map
        .map(fmt_ap)
        .unwrap_or_else(|| "n/a".into());
    out.push_str(&format!("overall,,,,,{overall}\n"));
    out
}

/// Bar chart of per-class AP ordered by label frequency; group boundaries
/// are drawn as vertical lines and bars are tinted per group.
pub fn render_chart(report: &APReport) -> RgbImage {
    let mut classes: Vec<u32> = report.per_class_ap.keys().copied().collect();
    classes.sort_by_key(|c| {
        (
            std::cmp::Reverse(report.label_frequency.get(c).copied().unwrap_or(0)),
            *c,
        )
    });
    let bar_w = 10u32;
    let gap = 2u32;
    let margin = 16u32;
    let plot_h = 200u32;
    let width = margin * 2 + (classes.len() as u32).max(1) * (bar_w + gap);
    let height = plot_h + margin * 2;
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));

    let axis = Rgb([40, 40, 40]);
    for x in 0..width {
        img.put_pixel(x, height - margin, axis);
    }
    for y in margin..=(height - margin) {
        img.put_pixel(margin - 1, y, axis);
    }

    let color_of = |g: Option<&Group>| match g {
        Some(Group::Head) => Rgb([66, 133, 244]),
        Some(Group::Mid) => Rgb([52, 168, 83]),
        Some(Group::Tail) => Rgb([234, 67, 53]),
        None => Rgb([128, 128, 128]),
    };

    let mut prev_group: Option<Group> = None;
    for (i, c) in classes.iter().enumerate() {
        let ap = report.per_class_ap[c];
        let group = report.groups.get(c).copied();
        let x0 = margin + i as u32 * (bar_w + gap);
        let bar_h = (ap.clamp(0.0, 1.0) * plot_h as f64).round() as u32;
        for x in x0..x0 + bar_w {
            for y in (height - margin - bar_h)..(height - margin) {
                img.put_pixel(x, y, color_of(group.as_ref()));
            }
        }
        if i > 0 && group != prev_group {
            // Group boundary between this bar and the previous one.
            let bx = x0 - gap / 2 - 1;
            for y in margin..(height - margin) {
                img.put_pixel(bx, y, Rgb([0, 0, 0]));
            }
        }
        prev_group = group;
    }
    img
}

/// Write `report.csv` and `report.png` under `dir`.
pub fn render_report(report: &APReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join("report.csv");
    std::fs::write(&csv_path, report_csv(report)).map_err(|e| Error::io(&csv_path, e))?;
    let png_path = dir.join("report.png");
    render_chart(report)
        .save(&png_path)
        .map_err(|e| Error::Other(format!("writing {}: {e}", png_path.display())))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{frame_map, Detection};
    use crate::data::{BoxAnnotation, BoxCoords, Keyframe};

    fn three_class_report() -> APReport {
        let gt: Vec<Keyframe> = (0..3)
            .map(|c| Keyframe {
                clip_id: format!("v{c}"),
                timestamp: 0.0,
                boxes: vec![BoxAnnotation {
                    coords: BoxCoords::new(0.1, 0.1, 0.5, 0.5).unwrap(),
                    labels: [c as u32].into_iter().collect(),
                    score: None,
                    person_id: None,
                }],
            })
            .collect();
        let preds = vec![
            Detection {
                clip_id: "v0".into(),
                timestamp: 0.0,
                coords: BoxCoords::new(0.1, 0.1, 0.5, 0.5).unwrap(),
                class: 0,
                score: 0.9,
            },
            Detection {
                clip_id: "v1".into(),
                timestamp: 0.0,
                coords: BoxCoords::new(0.6, 0.6, 0.9, 0.9).unwrap(),
                class: 1,
                score: 0.8,
            },
        ];
        frame_map(&gt, &preds, 3).unwrap()
    }

    #[test]
    fn csv_has_three_data_rows_plus_four_summary_rows() {
        let report = three_class_report();
        let csv = report_csv(&report);
        let lines: Vec<&str> = csv.trim_end().lines().collect();
        assert_eq!(lines.len(), 1 + 3 + 4);
        assert!(lines[0].starts_with("kind,"));
        assert!(lines.last().unwrap().starts_with("overall,"));
    }

    #[test]
    fn empty_report_is_header_plus_na_overall() {
        let report = frame_map(&[], &[], 3).unwrap();
        let csv = report_csv(&report);
        assert_eq!(csv, "kind,class,group,train_count,gt_count,ap\noverall,,,,,n/a\n");
    }

    #[test]
    fn golden_csv_bytes() {
        let report = three_class_report();
        let csv = report_csv(&report);
        let expected = "kind,class,group,train_count,gt_count,ap\n\
                        class,0,Tail,1,1,1.000000\n\
                        class,1,Tail,1,1,0.000000\n\
                        class,2,Tail,1,1,0.000000\n\
                        group,,Head,,,n/a\n\
                        group,,Mid,,,n/a\n\
                        group,,Tail,,,0.333333\n\
                        overall,,,,,0.333333\n";
        assert_eq!(csv, expected);
    }

    #[test]
    fn chart_renders_and_saves() {
        let report = three_class_report();
        let dir = tempfile::tempdir().unwrap();
        render_report(&report, dir.path()).unwrap();
        assert!(dir.path().join("report.csv").exists());
        assert!(dir.path().join("report.png").exists());
    }
}
