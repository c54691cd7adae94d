//! Stroke sequences to polylines, SVG and raster images.

mod polyline;
mod raster;
mod svg;

pub use polyline::{polylines_to_offsets, to_polylines, Polyline};
pub use raster::{rasterize, write_pgm, GrayRaster, RasterOptions};
pub use svg::{emit_svg, svg_string};
