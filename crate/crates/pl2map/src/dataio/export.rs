//! Plain-text export of a predicted point/line map.

use super::DataError;
use crate::geometry::Line3;
use nalgebra::Vector3;
use std::path::Path;

/// Predicted 3D geometry for one image, each entry with its predicted
/// reliability.
#[derive(Debug, Clone, Default)]
pub struct MapPrediction {
    pub points: Vec<(Vector3<f64>, f64)>,
    pub lines: Vec<(Line3, f64)>,
}

/// Renders the map as text: one `P x y z r` line per kept point and one
/// `L x1 y1 z1 x2 y2 z2 r` line per kept line, in input order. Entries
/// with reliability below `threshold` are dropped, so the kept count is
/// monotone non-increasing in the threshold.
pub fn render_map(predictions: &[MapPrediction], threshold: f64) -> String {
    let mut out = String::new();
    for pred in predictions {
        for (p, r) in &pred.points {
            if *r >= threshold {
                out.push_str(&format!("P {} {} {} {}\n", p.x, p.y, p.z, r));
            }
        }
        for (l, r) in &pred.lines {
            if *r >= threshold {
                out.push_str(&format!(
                    "L {} {} {} {} {} {} {}\n",
                    l.p.x, l.p.y, l.p.z, l.q.x, l.q.y, l.q.z, r
                ));
            }
        }
    }
    out
}

pub fn export_map(
    predictions: &[MapPrediction],
    threshold: f64,
    path: &Path,
) -> Result<(), DataError> {
    std::fs::write(path, render_map(predictions, threshold)).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })
}
