//! Estimates camera-space normals from rendered depth and compares them
//! with the renderer's analytic normals.
//!
//! cargo run --example surface_normals

use geocond::geometry::{normals_from_depth, validate_normals};
use geocond::metrics::normal_metrics;
use geocond::synth::{render, RenderConfig, SceneSpec};

fn main() -> geocond::Result<()> {
    let scene = render(&SceneSpec::default_tabletop(), &RenderConfig { frame_count: 3, ..RenderConfig::default() })?;
    for view in &scene.views {
        let descriptor = view.camera.descriptor();
        let estimated = view
            .depth
            .iter()
            .map(|d| normals_from_depth(d, &descriptor, &d.valid_mask(1e-4)))
            .collect::<geocond::Result<Vec<_>>>()?;
        let check = validate_normals(&estimated[0]);
        // silhouettes and the image border stay in the mask: errors there
        // come from differencing across depth discontinuities
        let masks: Vec<_> = estimated.iter().map(|n| n.valid_mask()).collect();
        let report = normal_metrics(&estimated, &view.normals, &masks, false)?;
        println!(
            "{:<12} valid {:>6}  invalid {:>5}  wrong-facing {}  mean {:.2} deg  median {:.3} deg",
            view.camera.view_id,
            check.valid,
            check.invalid,
            check.violations,
            report.mean_err_deg,
            report.median_err_deg
        );
        let centre = estimated[0].get(descriptor.height / 2, descriptor.width / 2);
        println!("{:<12} normal at the image centre {centre:?}", "");
    }
    Ok(())
}
