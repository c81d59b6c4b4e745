//! Two-layer density overlay figures as standalone SVG: the corpus field
//! underneath (reds), the SFT or derived-set field above (blues), darker
//! cells meaning denser regions. Rendering is a pure function of the
//! spec so golden tests can pin exact bytes.

use std::fmt::Write as _;
use std::path::Path;

use crate::density::DensityField;
use crate::error::{Error, Result};

const PLOT_SIZE: f64 = 400.0;
const TITLE_BAND: f64 = 28.0;
const PANEL_GAP: f64 = 16.0;

#[derive(Debug, Clone)]
pub struct OverlaySpec {
    pub base: DensityField,
    pub overlay: DensityField,
    pub base_ramp: String,
    pub overlay_ramp: String,
    pub overlay_alpha: f64,
    pub title: String,
}

impl OverlaySpec {
    pub fn new(base: DensityField, overlay: DensityField, title: impl Into<String>) -> Self {
        OverlaySpec {
            base,
            overlay,
            base_ramp: "reds".into(),
            overlay_ramp: "blues".into(),
            overlay_alpha: 0.6,
            title: title.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        self.overlay.validate()?;
        if self.base.grid != self.overlay.grid {
            return Err(Error::Precondition(
                "base and overlay fields must share grid extents and resolution".into(),
            ));
        }
        if !(self.overlay_alpha > 0.0 && self.overlay_alpha <= 1.0) {
            return Err(Error::Precondition("overlay_alpha must be in (0, 1]".into()));
        }
        ramp_endpoints(&self.base_ramp)?;
        ramp_endpoints(&self.overlay_ramp)?;
        Ok(())
    }
}

fn ramp_endpoints(name: &str) -> Result<([u8; 3], [u8; 3])> {
    match name {
        "reds" => Ok(([255, 245, 240], [103, 0, 13])),
        "blues" => Ok(([247, 251, 255], [8, 48, 107])),
        "greens" => Ok(([247, 252, 245], [0, 68, 27])),
        other => Err(Error::Config(format!("unknown color ramp {other:?}"))),
    }
}

/// Linear ramp color for a normalized value in [0, 1]; 1 is darkest.
fn ramp_color(name: &str, t: f64) -> String {
    let (light, dark) = ramp_endpoints(name).expect("validated ramp");
    let t = t.clamp(0.0, 1.0);
    let ch = |l: u8, d: u8| (l as f64 + (d as f64 - l as f64) * t).round() as u8;
    format!(
        "#{:02x}{:02x}{:02x}",
        ch(light[0], dark[0]),
        ch(light[1], dark[1]),
        ch(light[2], dark[2])
    )
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn fmt_px(v: f64) -> String {
    format!("{v:.2}")
}

/// Emit one field layer as row-major cell rects. Cell (ix, iy) covers an
/// even subdivision of the plot area; iy = 0 is the bottom row. Values
/// are normalized by the field's own maximum, so each layer's darkest
/// cell is that field's argmax.
fn push_field_layer(
    out: &mut String,
    field: &DensityField,
    ramp: &str,
    alpha: Option<f64>,
    origin_x: f64,
    origin_y: f64,
) {
    let nx = field.grid.nx;
    let ny = field.grid.ny;
    let cw = PLOT_SIZE / nx as f64;
    let chh = PLOT_SIZE / ny as f64;
    let max = field.max_value();
    let alpha_attr = match alpha {
        Some(a) => format!(" fill-opacity=\"{:.2}\"", a),
        None => String::new(),
    };
    for iy in 0..ny {
        for ix in 0..nx {
            let t = if max > 0.0 {
                field.value(ix, iy) as f64 / max as f64
            } else {
                0.0
            };
            let x = origin_x + ix as f64 * cw;
            let y = origin_y + (ny - 1 - iy) as f64 * chh;
            let _ = write!(
                out,
                "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{}\"{}/>\n",
                fmt_px(x),
                fmt_px(y),
                fmt_px(cw),
                fmt_px(chh),
                ramp_color(ramp, t),
                alpha_attr
            );
        }
    }
}

fn push_panel(out: &mut String, spec: &OverlaySpec, origin_x: f64, origin_y: f64) {
    let _ = write!(
        out,
        "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"14\" text-anchor=\"middle\">{}</text>\n",
        fmt_px(origin_x + PLOT_SIZE / 2.0),
        fmt_px(origin_y + 18.0),
        xml_escape(&spec.title)
    );
    let plot_y = origin_y + TITLE_BAND;
    push_field_layer(out, &spec.base, &spec.base_ramp, None, origin_x, plot_y);
    push_field_layer(
        out,
        &spec.overlay,
        &spec.overlay_ramp,
        Some(spec.overlay_alpha),
        origin_x,
        plot_y,
    );
    let _ = write!(
        out,
        "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#333333\" stroke-width=\"1\"/>\n",
        fmt_px(origin_x),
        fmt_px(plot_y),
        fmt_px(PLOT_SIZE),
        fmt_px(PLOT_SIZE)
    );
}

fn render_grid_svg(specs: &[&OverlaySpec], columns: usize) -> Result<String> {
    if specs.is_empty() {
        return Err(Error::Precondition("no panels to render".into()));
    }
    for spec in specs {
        spec.validate()?;
    }
    let columns = columns.max(1).min(specs.len());
    let rows = specs.len().div_ceil(columns);
    let panel_w = PLOT_SIZE + PANEL_GAP;
    let panel_h = PLOT_SIZE + TITLE_BAND + PANEL_GAP;
    let width = columns as f64 * panel_w + PANEL_GAP;
    let height = rows as f64 * panel_h + PANEL_GAP;
    let mut out = String::new();
    let _ = write!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{}\" height=\"{}\" viewBox=\"0 0 {} {}\">\n",
        fmt_px(width),
        fmt_px(height),
        fmt_px(width),
        fmt_px(height)
    );
    let _ = write!(
        out,
        "<rect x=\"0\" y=\"0\" width=\"{}\" height=\"{}\" fill=\"#ffffff\"/>\n",
        fmt_px(width),
        fmt_px(height)
    );
    for (i, spec) in specs.iter().enumerate() {
        let col = i % columns;
        let row = i / columns;
        push_panel(
            &mut out,
            spec,
            PANEL_GAP + col as f64 * panel_w,
            PANEL_GAP + row as f64 * panel_h,
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Render a single two-layer overlay figure to `path`.
pub fn render_overlay_svg(spec: &OverlaySpec, path: &Path) -> Result<()> {
    let svg = render_grid_svg(&[spec], 1)?;
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}

/// Render several overlays side by side with subcaptions.
pub fn render_panel_grid(specs: &[OverlaySpec], columns: usize, path: &Path) -> Result<()> {
    let refs: Vec<&OverlaySpec> = specs.iter().collect();
    let svg = render_grid_svg(&refs, columns)?;
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}

/// In-memory render, used by tests and the bindings.
pub fn overlay_svg_string(spec: &OverlaySpec) -> Result<String> {
    render_grid_svg(&[spec], 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::{kde_grid, DensityField, GridSpec, KdeParams};

    fn uniform_field(nx: usize, ny: usize, v: f32) -> DensityField {
        DensityField {
            params: KdeParams::default(),
            grid: GridSpec {
                x_min: 0.0,
                x_max: 1.0,
                y_min: 0.0,
                y_max: 1.0,
                nx,
                ny,
            },
            values: vec![v; nx * ny],
            source_tag: "uniform".into(),
        }
    }

    #[test]
    fn uniform_base_all_cells_same_color() {
        let spec = OverlaySpec::new(uniform_field(3, 3, 0.5), uniform_field(3, 3, 0.1), "u");
        let svg = overlay_svg_string(&spec).unwrap();
        // every base cell is fully dark (value == max)
        let dark = ramp_color("reds", 1.0);
        assert_eq!(svg.matches(&dark).count(), 9);
    }

    #[test]
    fn single_point_overlay_darkest_at_its_cell() {
        let base = uniform_field(5, 5, 0.2);
        let overlay = kde_grid(
            &[[0.9, 0.9]],
            &KdeParams {
                h_x: 0.05,
                h_y: 0.05,
                sigma: 1.0,
            },
            5,
            5,
            0.0,
            "pt",
        )
        .unwrap();
        // force identical grids
        let overlay = DensityField {
            grid: base.grid,
            ..overlay
        };
        let spec = OverlaySpec::new(base, overlay.clone(), "pt");
        let svg = overlay_svg_string(&spec).unwrap();
        let darkest = ramp_color("blues", 1.0);
        assert_eq!(svg.matches(&darkest).count(), 1, "exactly one darkest overlay cell");
        // the darkest overlay rect's coordinates correspond to the argmax cell
        let (ax, ay) = overlay.argmax();
        let cw = PLOT_SIZE / 5.0;
        let expected_x = PANEL_GAP + ax as f64 * cw;
        let expected_y = PANEL_GAP + TITLE_BAND + (5 - 1 - ay) as f64 * cw;
        let line = svg.lines().find(|l| l.contains(&darkest)).unwrap();
        assert!(line.contains(&format!("x=\"{}\"", fmt_px(expected_x))), "{line}");
        assert!(line.contains(&format!("y=\"{}\"", fmt_px(expected_y))), "{line}");
    }

    #[test]
    fn rendering_is_byte_deterministic() {
        let spec = OverlaySpec::new(uniform_field(4, 4, 1.0), uniform_field(4, 4, 0.3), "det");
        assert_eq!(
            overlay_svg_string(&spec).unwrap(),
            overlay_svg_string(&spec).unwrap()
        );
    }

    #[test]
    fn grid_mismatch_is_an_error() {
        let spec = OverlaySpec::new(uniform_field(4, 4, 1.0), uniform_field(3, 3, 1.0), "bad");
        assert!(spec.validate().is_err());
    }

    #[test]
    fn panel_grid_layouts() {
        let dir = tempfile::tempdir().unwrap();
        let make = |t: &str| OverlaySpec::new(uniform_field(2, 2, 1.0), uniform_field(2, 2, 0.5), t);
        let specs: Vec<OverlaySpec> = (0..8).map(|i| make(&format!("panel {i}"))).collect();
        let path = dir.path().join("grid.svg");
        render_panel_grid(&specs[..4], 4, &path).unwrap();
        let one_row = std::fs::read_to_string(&path).unwrap();
        render_panel_grid(&specs, 4, &path).unwrap();
        let two_rows = std::fs::read_to_string(&path).unwrap();
        // two rows means a taller canvas
        let height_of = |svg: &str| -> f64 {
            let i = svg.find("height=\"").unwrap() + 8;
            svg[i..].split('"').nth(0).unwrap().parse().unwrap()
        };
        assert!(height_of(&two_rows) > height_of(&one_row));
    }

    #[test]
    fn zero_panels_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(render_panel_grid(&[], 4, &dir.path().join("x.svg")).is_err());
    }

    #[test]
    fn titles_are_xml_escaped() {
        let spec = OverlaySpec::new(uniform_field(2, 2, 1.0), uniform_field(2, 2, 0.5), "a < b & c");
        let svg = overlay_svg_string(&spec).unwrap();
        assert!(svg.contains("a &lt; b &amp; c"));
    }
}
