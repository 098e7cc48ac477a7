//! Recovers metric scale and shift for relative depth from a corrupted
//! sensor: holes, outliers and millimeter noise.
//!
//! cargo run --example align_depth

use geocond::depth_align::{align_clip, AlignmentConfig};
use geocond::pack::StreamKind;
use geocond::raster::DepthFrame;
use geocond::synth::{observation_pack, render, CorruptionSpec, RenderConfig, SceneSpec};

fn main() -> geocond::Result<()> {
    let scene = render(&SceneSpec::default_tabletop(), &RenderConfig { frame_count: 6, ..RenderConfig::default() })?;
    let corruption = CorruptionSpec::default();
    let pack = observation_pack(&scene, &corruption, 7)?;
    let [s, b] = corruption.affine_true;
    println!("true scale {s}, shift {b}");

    for joint in [true, false] {
        let cfg = AlignmentConfig { joint, ..AlignmentConfig::default() };
        println!("\n{} fit", if joint { "joint" } else { "per-frame" });
        for view in &scene.views {
            let id = &view.camera.view_id;
            let (_, rel) = pack.find(id, StreamKind::DepthPredRel)?;
            let (_, mm) = pack.find(id, StreamKind::DepthSensorMm)?;
            let preds = rel.iter().map(DepthFrame::from_f32_raster).collect::<geocond::Result<Vec<_>>>()?;
            let sensors = mm.iter().map(DepthFrame::from_sensor_mm).collect::<geocond::Result<Vec<_>>>()?;
            let (metric, fits) = align_clip(&preds, &sensors, &cfg)?;
            for (i, fit) in fits.iter().enumerate() {
                let trail: Vec<String> =
                    fit.per_iteration.iter().map(|it| format!("{}->{}", it.fit_count, it.inlier_count)).collect();
                println!(
                    "  {id:<12} #{i} scale {:.4} shift {:+.4}  rmse {:.4} m  pixels {}",
                    fit.scale,
                    fit.shift,
                    fit.residual_rmse_m,
                    trail.join(" ")
                );
            }
            let err =
                metric[0].values().iter().zip(view.depth[0].values()).map(|(m, g)| (m - g).abs()).fold(0.0, f64::max);
            println!("  {id:<12} worst frame-0 error against ground truth {err:.4} m");
        }
    }
    Ok(())
}
