//! Fabrication outputs: unique z-depth layer assignment (bars and springs
//! must not share a plane or they would self-intersect when morphing) plus
//! SVG and versioned JSON export.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::rigidbody::{world_point, Form, JointKind, Structure};
use crate::scene::{write_json, DesignBlock, DesignDocument, Scene, StabilityReport, DESIGN_SCHEMA};
use crate::stability_opt::DesignVector;

/// Physical thickness of one layer, millimeters (0.5 cm per element).
pub const DEFAULT_LAYER_PITCH: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "id")]
pub enum ElementRef {
    Bar(usize),
    Spring(usize),
}

/// Unique z-layer per element; total stack depth is `count * pitch`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerAssignment {
    pub entries: Vec<(ElementRef, i32)>,
    pub layer_pitch: f64,
}

impl LayerAssignment {
    pub fn total_depth(&self) -> f64 {
        self.entries.len() as f64 * self.layer_pitch
    }

    pub fn layer_of(&self, element: ElementRef) -> Option<i32> {
        self.entries
            .iter()
            .find(|(e, _)| *e == element)
            .map(|(_, z)| *z)
    }
}

/// Deterministic layer assignment: bars first in id order, then springs in
/// id order, consecutive integers from zero.
pub fn assign_z_depths(structure: &Structure) -> LayerAssignment {
    let mut entries = Vec::with_capacity(structure.bars.len() + structure.springs.len());
    let mut layer = 0;
    for bar in &structure.bars {
        entries.push((ElementRef::Bar(bar.id), layer));
        layer += 1;
    }
    for spring in &structure.springs {
        entries.push((ElementRef::Spring(spring.id), layer));
        layer += 1;
    }
    LayerAssignment {
        entries,
        layer_pitch: DEFAULT_LAYER_PITCH,
    }
}

/// Writes the layer assignment back into the structure's elements.
pub fn apply_layers(structure: &mut Structure, layers: &LayerAssignment) {
    for (element, z) in &layers.entries {
        match element {
            ElementRef::Bar(id) => structure.bars[*id].z_layer = Some(*z),
            ElementRef::Spring(id) => structure.springs[*id].z_layer = Some(*z),
        }
    }
}

fn fmt_coord(value: f64) -> String {
    // Nanometer resolution: parse-back agrees with the model well inside
    // the 1e-6 mm budget, and the output is bytewise deterministic.
    format!("{value:.9}")
}

/// Renders one form as SVG 1.1: bars as stroked segments, springs as
/// zig-zag polylines, hinges as circles, fixed anchors as squares. The
/// world y axis points up, so geometry is emitted with y negated inside a
/// matching viewBox.
pub fn render_svg(structure: &Structure, form: &Form) -> String {
    let endpoints = structure.world_endpoints(form);
    let mut min_x = f64::INFINITY;
    let mut max_x = f64::NEG_INFINITY;
    let mut min_y = f64::INFINITY;
    let mut max_y = f64::NEG_INFINITY;
    for pair in &endpoints {
        for p in pair {
            min_x = min_x.min(p.x);
            max_x = max_x.max(p.x);
            min_y = min_y.min(p.y);
            max_y = max_y.max(p.y);
        }
    }
    let margin = 0.1 * ((max_x - min_x).max(max_y - min_y)).max(1.0);
    let view = (
        min_x - margin,
        -(max_y + margin),
        (max_x - min_x) + 2.0 * margin,
        (max_y - min_y) + 2.0 * margin,
    );
    let mut svg = String::new();
    let _ = writeln!(svg, "<?xml version=\"1.0\" encoding=\"UTF-8\"?>");
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" viewBox=\"{} {} {} {}\">",
        fmt_coord(view.0),
        fmt_coord(view.1),
        fmt_coord(view.2),
        fmt_coord(view.3)
    );
    let _ = writeln!(svg, "  <g id=\"form-{}\">", form.label);
    for (bar, pair) in structure.bars.iter().zip(&endpoints) {
        let _ = writeln!(
            svg,
            "    <line class=\"bar\" id=\"bar-{}\" x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\" stroke-width=\"2\"/>",
            bar.id,
            fmt_coord(pair[0].x),
            fmt_coord(-pair[0].y),
            fmt_coord(pair[1].x),
            fmt_coord(-pair[1].y)
        );
    }
    for spring in &structure.springs {
        let a = world_point(&form.poses[spring.body_1], &spring.u1_local);
        let b = world_point(&form.poses[spring.body_2], &spring.u2_local);
        let _ = writeln!(
            svg,
            "    <polyline class=\"spring\" id=\"spring-{}\" points=\"{}\" fill=\"none\" stroke=\"green\" stroke-width=\"1\"/>",
            spring.id,
            zigzag_points(&a, &b)
        );
    }
    for (k, joint) in structure.joints.iter().enumerate() {
        let anchor = world_point(&form.poses[joint.body_i], &joint.anchor_i);
        match joint.kind {
            JointKind::Hinge => {
                let _ = writeln!(
                    svg,
                    "    <circle class=\"hinge\" id=\"joint-{k}\" cx=\"{}\" cy=\"{}\" r=\"2.5\" fill=\"none\" stroke=\"purple\" stroke-width=\"1\"/>",
                    fmt_coord(anchor.x),
                    fmt_coord(-anchor.y)
                );
            }
            JointKind::Fixed => {
                let _ = writeln!(
                    svg,
                    "    <rect class=\"anchor\" id=\"joint-{k}\" x=\"{}\" y=\"{}\" width=\"5\" height=\"5\" fill=\"none\" stroke=\"red\" stroke-width=\"1\"/>",
                    fmt_coord(anchor.x - 2.5),
                    fmt_coord(-anchor.y - 2.5)
                );
            }
        }
    }
    let _ = writeln!(svg, "  </g>");
    let _ = writeln!(svg, "</svg>");
    svg
}

/// Decorative eight-coil zig-zag between the exact attachment points.
fn zigzag_points(a: &Vector3<f64>, b: &Vector3<f64>) -> String {
    const COILS: usize = 8;
    let axis = b - a;
    let len = axis.norm().max(1e-12);
    let dir = axis / len;
    let normal = Vector3::new(-dir.y, dir.x, 0.0);
    let amplitude = (0.06 * len).min(4.0);
    let mut pts = Vec::with_capacity(COILS * 2 + 3);
    pts.push(*a);
    for i in 0..(2 * COILS) {
        let t = (i as f64 + 0.5) / (2 * COILS) as f64;
        let side = if i % 2 == 0 { 1.0 } else { -1.0 };
        pts.push(a + axis * t + normal * (amplitude * side));
    }
    pts.push(*b);
    pts.iter()
        .map(|p| format!("{},{}", fmt_coord(p.x), fmt_coord(-p.y)))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Writes one SVG per form into `dir` as `<label>.svg`.
pub fn export_svg(structure: &Structure, form: &Form, path: &Path) -> Result<()> {
    std::fs::write(path, render_svg(structure, form))?;
    Ok(())
}

/// Writes the versioned design document (scene, design block, report).
pub fn export_design_json(
    scene: &Scene,
    design: &DesignVector,
    report: Option<&StabilityReport>,
    path: &Path,
) -> Result<()> {
    let doc = DesignDocument {
        schema: DESIGN_SCHEMA.to_string(),
        scene: scene.clone(),
        design: DesignBlock {
            params: design.params.clone(),
            lb: design.lb.clone(),
            ub: design.ub.clone(),
        },
        report: report.cloned(),
    };
    write_json(path, &doc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes;
    use crate::spring_energy::Spring;
    use approx::assert_abs_diff_eq;

    #[test]
    fn layers_enumerate_bars_then_springs() {
        let (structure, _) = scenes::springy_linkage(100.0, 0.9);
        let layers = assign_z_depths(&structure);
        assert_eq!(
            layers.entries,
            vec![
                (ElementRef::Bar(0), 0),
                (ElementRef::Bar(1), 1),
                (ElementRef::Spring(0), 2),
            ]
        );
        assert_abs_diff_eq!(layers.total_depth(), 15.0);
    }

    #[test]
    fn layer_counts_scale_with_elements() {
        // 6 bars + 4 springs: 10 layers, 50 mm stack.
        let verts: Vec<nalgebra::Vector2<f64>> = (0..=6)
            .map(|i| nalgebra::Vector2::new(20.0 * i as f64, 0.0))
            .collect();
        let mut scene = scenes::chain_scene_from_vertices(
            &[verts.clone(), verts],
            &["a", "b"],
            20.0,
            Vector3::zeros(),
        )
        .unwrap();
        for i in 0..4 {
            scene.structure.springs.push(Spring {
                id: i,
                body_1: i,
                body_2: i + 2,
                u1_local: Vector3::zeros(),
                u2_local: Vector3::zeros(),
                k: 1.0,
                l: 10.0,
                l0: 10.0,
                z_layer: None,
            });
        }
        let layers = assign_z_depths(&scene.structure);
        assert_eq!(layers.entries.len(), 10);
        assert_abs_diff_eq!(layers.total_depth(), 50.0);
        // Uniqueness.
        let mut seen: Vec<i32> = layers.entries.iter().map(|(_, z)| *z).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 10);
        // Empty spring set: layer count equals bar count.
        scene.structure.springs.clear();
        assert_eq!(assign_z_depths(&scene.structure).entries.len(), 6);
    }

    #[test]
    fn svg_contains_expected_elements_and_is_deterministic() {
        let (structure, form) = scenes::springy_linkage(100.0, 0.9);
        let svg = render_svg(&structure, &form);
        assert_eq!(svg.matches("class=\"bar\"").count(), 2);
        assert_eq!(svg.matches("class=\"spring\"").count(), 1);
        assert_eq!(svg.matches("class=\"hinge\"").count(), 1);
        assert_eq!(svg.matches("class=\"anchor\"").count(), 1);
        assert_eq!(svg, render_svg(&structure, &form));
    }

    #[test]
    fn svg_coordinates_parse_back_to_model_geometry() {
        let (structure, form) = scenes::springy_linkage(100.0, 0.9);
        let svg = render_svg(&structure, &form);
        let endpoints = structure.world_endpoints(&form);
        for (bar, pair) in structure.bars.iter().zip(&endpoints) {
            let tag = format!("id=\"bar-{}\"", bar.id);
            let line = svg.lines().find(|l| l.contains(&tag)).expect("bar line");
            let attr = |name: &str| -> f64 {
                let key = format!("{name}=\"");
                let start = line.find(&key).unwrap() + key.len();
                let end = line[start..].find('"').unwrap() + start;
                line[start..end].parse().unwrap()
            };
            assert_abs_diff_eq!(attr("x1"), pair[0].x, epsilon = 1e-6);
            assert_abs_diff_eq!(attr("y1"), -pair[0].y, epsilon = 1e-6);
            assert_abs_diff_eq!(attr("x2"), pair[1].x, epsilon = 1e-6);
            assert_abs_diff_eq!(attr("y2"), -pair[1].y, epsilon = 1e-6);
        }
    }

    #[test]
    fn design_json_round_trip_is_byte_identical() {
        let (structure, forms) = scenes::springy_linkage_forms(100.0, 0.9);
        let scene = Scene {
            structure,
            forms: forms.to_vec(),
        };
        let design = DesignVector::from_springs(&scene.structure.springs, 1.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("design.json");
        export_design_json(&scene, &design, None, &path).unwrap();
        let first = std::fs::read(&path).unwrap();
        let doc = DesignDocument::load(&path).unwrap();
        let path2 = dir.path().join("design2.json");
        let design2 = DesignVector {
            params: doc.design.params.clone(),
            lb: doc.design.lb.clone(),
            ub: doc.design.ub.clone(),
        };
        export_design_json(&doc.scene, &design2, doc.report.as_ref(), &path2).unwrap();
        let second = std::fs::read(&path2).unwrap();
        assert_eq!(first, second);
    }
}
