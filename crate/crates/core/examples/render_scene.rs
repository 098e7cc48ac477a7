//! Renders the default tabletop scene from its three cameras and writes the
//! ground-truth pack.
//!
//! cargo run --example render_scene -- [out_dir]

use std::path::PathBuf;

use geocond::synth::{render, RenderConfig, SceneSpec};

fn main() -> geocond::Result<()> {
    let out: PathBuf =
        std::env::args().nth(1).map(Into::into).unwrap_or_else(|| std::env::temp_dir().join("geocond-render"));
    let spec = SceneSpec::default_tabletop();
    let cfg = RenderConfig { width: 320, height: 192, frame_count: 5, ..RenderConfig::default() };
    let scene = render(&spec, &cfg)?;

    for view in &scene.views {
        let depth = view.depth[0].values();
        let (near, far) = depth.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &z| (lo.min(z), hi.max(z)));
        let k = view.camera.intrinsics;
        println!("{:<12} fx {:.1}  depth {near:.3}..{far:.3} m", view.camera.view_id, k.fx);
        for (i, object) in spec.objects.iter().enumerate() {
            let first = view.object_mask(0, i).count();
            let last = view.object_mask(cfg.frame_count - 1, i).count();
            println!("             {:<10} {first:>6} px at t=0, {last:>6} px at t={}", object.id, cfg.frame_count - 1);
        }
    }

    let pack = scene.to_pack()?;
    pack.write(&out)?;
    println!("wrote {} streams to {}", pack.manifest.streams.len(), out.display());
    Ok(())
}
