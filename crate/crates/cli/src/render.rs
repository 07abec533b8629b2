//! SVG overlay rendering of match results.
//!
//! Side-by-side panels (RGB left, thermal right) with one rectangle per
//! detection: matched pairs share a color drawn from a fixed palette cycling
//! by pair index, unmatched boxes are gray and dashed, and every box is
//! labeled with its det_id. The output is a deterministic function of the
//! inputs, byte for byte.

use std::fmt::Write as _;

use thiserror::Error;

use xmodal_core::scene_io::{Detection, MatchResult, Modality, ScenePair};

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("matches reference unknown {modality} detection `{det_id}`")]
    DanglingId { modality: Modality, det_id: String },
    #[error("matches belong to scene `{matches}`, not `{scene}`")]
    SceneMismatch { matches: String, scene: String },
}

const PALETTE: [&str; 10] = [
    "#e6194b", "#3cb44b", "#4363d8", "#f58231", "#911eb4", "#46f0f0", "#f032e6", "#bcf60c",
    "#808000", "#008080",
];
const UNMATCHED: &str = "#888888";

const MARGIN: f64 = 16.0;
const GAP: f64 = 24.0;
const HEADER: f64 = 28.0;

struct Panel {
    origin_x: f64,
    origin_y: f64,
}

fn push_box(svg: &mut String, panel: &Panel, det: &Detection, color: &str, dashed: bool) {
    let b = det.bbox;
    let x = panel.origin_x + b.x;
    let y = panel.origin_y + b.y;
    let dash = if dashed {
        r#" stroke-dasharray="6,4""#
    } else {
        ""
    };
    writeln!(
        svg,
        r#"  <rect x="{x:.1}" y="{y:.1}" width="{w:.1}" height="{h:.1}" fill="none" stroke="{color}" stroke-width="2"{dash}/>"#,
        w = b.w,
        h = b.h,
    )
    .unwrap();
    writeln!(
        svg,
        r#"  <text x="{tx:.1}" y="{ty:.1}" font-family="monospace" font-size="11" fill="{color}">{id}</text>"#,
        tx = x + 2.0,
        ty = y - 3.0,
        id = det.det_id,
    )
    .unwrap();
}

/// Render a scene's matching as a standalone SVG document.
pub fn render_svg(scene: &ScenePair, matches: &MatchResult) -> Result<String, RenderError> {
    if matches.scene_id != scene.scene_id {
        return Err(RenderError::SceneMismatch {
            matches: matches.scene_id.clone(),
            scene: scene.scene_id.clone(),
        });
    }
    let find = |modality: Modality, det_id: &str| {
        scene
            .find(modality, det_id)
            .ok_or_else(|| RenderError::DanglingId {
                modality,
                det_id: det_id.to_string(),
            })
    };

    let (rgb_w, rgb_h) = (
        f64::from(scene.image_size_rgb.0),
        f64::from(scene.image_size_rgb.1),
    );
    let (th_w, th_h) = (
        f64::from(scene.image_size_thermal.0),
        f64::from(scene.image_size_thermal.1),
    );
    let rgb_panel = Panel {
        origin_x: MARGIN,
        origin_y: HEADER,
    };
    let thermal_panel = Panel {
        origin_x: MARGIN + rgb_w + GAP,
        origin_y: HEADER,
    };
    let total_w = MARGIN * 2.0 + GAP + rgb_w + th_w;
    let total_h = HEADER + MARGIN + rgb_h.max(th_h);

    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total_w:.0}" height="{total_h:.0}" viewBox="0 0 {total_w:.0} {total_h:.0}">"#
    )
    .unwrap();
    writeln!(
        svg,
        r##"  <rect width="{total_w:.0}" height="{total_h:.0}" fill="#181818"/>"##
    )
    .unwrap();
    for (panel, size, image, title) in [
        (&rgb_panel, (rgb_w, rgb_h), &scene.rgb_image, "RGB"),
        (
            &thermal_panel,
            (th_w, th_h),
            &scene.thermal_image,
            "THERMAL",
        ),
    ] {
        writeln!(
            svg,
            r##"  <rect x="{x:.1}" y="{y:.1}" width="{w:.1}" height="{h:.1}" fill="#303030"/>"##,
            x = panel.origin_x,
            y = panel.origin_y,
            w = size.0,
            h = size.1,
        )
        .unwrap();
        if let Some(href) = image {
            writeln!(
                svg,
                r#"  <image x="{x:.1}" y="{y:.1}" width="{w:.1}" height="{h:.1}" href="{href}"/>"#,
                x = panel.origin_x,
                y = panel.origin_y,
                w = size.0,
                h = size.1,
            )
            .unwrap();
        }
        writeln!(
            svg,
            r##"  <text x="{x:.1}" y="{y:.1}" font-family="monospace" font-size="14" fill="#dddddd">{title} {scene_id}</text>"##,
            x = panel.origin_x,
            y = HEADER - 8.0,
            scene_id = scene.scene_id,
        )
        .unwrap();
    }

    for (index, (rgb_id, thermal_id)) in matches.pairs.iter().enumerate() {
        let color = PALETTE[index % PALETTE.len()];
        push_box(
            &mut svg,
            &rgb_panel,
            find(Modality::Rgb, rgb_id)?,
            color,
            false,
        );
        push_box(
            &mut svg,
            &thermal_panel,
            find(Modality::Thermal, thermal_id)?,
            color,
            false,
        );
    }
    for det_id in &matches.unmatched_rgb {
        push_box(
            &mut svg,
            &rgb_panel,
            find(Modality::Rgb, det_id)?,
            UNMATCHED,
            true,
        );
    }
    for det_id in &matches.unmatched_thermal {
        push_box(
            &mut svg,
            &thermal_panel,
            find(Modality::Thermal, det_id)?,
            UNMATCHED,
            true,
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
