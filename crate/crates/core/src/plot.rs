//! Static SVG line plots.

use std::path::Path;

use plotters::coord::types::RangedCoordf64;
use plotters::coord::Shift;
use plotters::prelude::*;

use crate::error::{QsdError, Result};

/// One polyline.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub dashed: bool,
}

impl Series {
    pub fn new(name: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Series { name: name.into(), points, dashed: false }
    }

    pub fn dashed(mut self) -> Self {
        self.dashed = true;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinePlot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub log_y: bool,
    pub series: Vec<Series>,
}

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(214, 39, 40),
    RGBColor(44, 160, 44),
    RGBColor(148, 103, 189),
    RGBColor(255, 127, 14),
    RGBColor(23, 190, 207),
];

fn plot_err<E: std::fmt::Display>(e: E) -> QsdError {
    QsdError::Io(format!("plot: {e}"))
}

impl LinePlot {
    pub fn new(title: impl Into<String>, x_label: impl Into<String>, y_label: impl Into<String>) -> Self {
        LinePlot { title: title.into(), x_label: x_label.into(), y_label: y_label.into(), log_x: false, log_y: false, series: Vec::new() }
    }

    pub fn log_x(mut self) -> Self {
        self.log_x = true;
        self
    }

    pub fn log_y(mut self) -> Self {
        self.log_y = true;
        self
    }

    pub fn with(mut self, s: Series) -> Self {
        self.series.push(s);
        self
    }

    /// Points mapped to plotting coordinates; non-positive values are
    /// dropped on log axes.
    fn mapped(&self) -> Vec<Vec<(f64, f64)>> {
        let tx = |v: f64| if self.log_x { v.log10() } else { v };
        let ty = |v: f64| if self.log_y { v.log10() } else { v };
        self.series
            .iter()
            .map(|s| {
                s.points
                    .iter()
                    .filter(|(x, y)| x.is_finite() && y.is_finite() && (!self.log_x || *x > 0.0) && (!self.log_y || *y > 0.0))
                    .map(|&(x, y)| (tx(x), ty(y)))
                    .collect()
            })
            .collect()
    }

    fn bounds(pts: &[Vec<(f64, f64)>]) -> ((f64, f64), (f64, f64)) {
        let mut xr = (f64::INFINITY, f64::NEG_INFINITY);
        let mut yr = (f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in pts.iter().flatten() {
            xr = (xr.0.min(x), xr.1.max(x));
            yr = (yr.0.min(y), yr.1.max(y));
        }
        let pad = |r: (f64, f64)| {
            if !r.0.is_finite() {
                return (0.0, 1.0);
            }
            let w = (r.1 - r.0).max(1e-12 * (1.0 + r.0.abs()));
            (r.0 - 0.02 * w, r.1 + 0.02 * w)
        };
        (pad(xr), pad(yr))
    }

    /// Renders to an SVG string.
    pub fn to_svg(&self) -> Result<String> {
        let mut buf = String::new();
        {
            let root = SVGBackend::with_string(&mut buf, (800, 500)).into_drawing_area();
            self.draw(&root)?;
            root.present().map_err(plot_err)?;
        }
        Ok(buf)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_svg()?)?;
        Ok(())
    }

    fn draw(&self, root: &DrawingArea<SVGBackend, Shift>) -> Result<()> {
        root.fill(&WHITE).map_err(plot_err)?;
        let pts = self.mapped();
        let (xr, yr) = Self::bounds(&pts);
        let mut chart = ChartBuilder::on(root)
            .caption(&self.title, ("sans-serif", 20))
            .margin(15)
            .x_label_area_size(45)
            .y_label_area_size(70)
            .build_cartesian_2d(xr.0..xr.1, yr.0..yr.1)
            .map_err(plot_err)?;
        let fmt_x = |v: &f64| if self.log_x { format!("1e{v:.1}") } else { format!("{v:.3}") };
        let fmt_y = |v: &f64| if self.log_y { format!("1e{v:.1}") } else { format!("{v:.3}") };
        let x_desc = if self.log_x { format!("log10 {}", self.x_label) } else { self.x_label.clone() };
        let y_desc = if self.log_y { format!("log10 {}", self.y_label) } else { self.y_label.clone() };
        chart
            .configure_mesh()
            .x_desc(x_desc)
            .y_desc(y_desc)
            .x_label_formatter(&fmt_x)
            .y_label_formatter(&fmt_y)
            .draw()
            .map_err(plot_err)?;
        for (k, (s, p)) in self.series.iter().zip(pts).enumerate() {
            let color = PALETTE[k % PALETTE.len()];
            draw_series(&mut chart, s, p, color)?;
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
        Ok(())
    }
}

type Chart<'a, 'b> = ChartContext<'a, SVGBackend<'b>, Cartesian2d<RangedCoordf64, RangedCoordf64>>;

fn draw_series(chart: &mut Chart, s: &Series, p: Vec<(f64, f64)>, color: RGBColor) -> Result<()> {
    let style = color.stroke_width(2);
    let anno = if s.dashed {
        chart.draw_series(DashedLineSeries::new(p, 6, 4, style)).map_err(plot_err)?
    } else {
        chart.draw_series(LineSeries::new(p, style)).map_err(plot_err)?
    };
    anno.label(s.name.clone()).legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_svg_with_series_and_labels() {
        let p = LinePlot::new("t", "x", "y")
            .with(Series::new("a", vec![(0.0, 0.0), (1.0, 1.0)]))
            .with(Series::new("b", vec![(0.0, 1.0), (1.0, 0.0)]).dashed());
        let s = p.to_svg().unwrap();
        assert!(s.starts_with("<svg"));
        assert!(s.contains("polyline") || s.contains("path"));
        assert_eq!(s, p.to_svg().unwrap());
    }

    #[test]
    fn log_axes_drop_nonpositive_points() {
        let p = LinePlot::new("t", "x", "y").log_x().log_y().with(Series::new("a", vec![(0.0, 1.0), (1.0, 1.0), (10.0, 0.1)]));
        assert_eq!(p.mapped()[0], vec![(0.0, 0.0), (1.0, -1.0)]);
        assert!(p.to_svg().is_ok());
    }
}
