//! Builds the geometry / appearance / ground-truth condition triplet for a
//! rendered clip, with content-based keyframes.
//!
//! cargo run --example condition_triplet -- [out_dir]

use std::collections::BTreeMap;
use std::path::PathBuf;

use geocond::conditions::{
    build_triplet, read_embeddings_file, read_masks_file, validate_triplet, ConditionInputs, KeyframePolicy,
};
use geocond::pack::Pack;
use geocond::synth::{
    empty_scene, render, write_perception_sidecars, RenderConfig, SceneSpec, AREAS_FILE, EMBEDDINGS_FILE, MASKS_FILE,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out: PathBuf =
        std::env::args().nth(1).map(Into::into).unwrap_or_else(|| std::env::temp_dir().join("geocond-triplet"));
    let spec = SceneSpec::default_tabletop();
    let cfg = RenderConfig { width: 320, height: 192, frame_count: 8, ..RenderConfig::default() };
    let scene = render(&spec, &cfg)?;
    let pack = scene.to_pack()?;
    pack.write(&out)?;
    write_perception_sidecars(&scene, &spec, &out)?;

    let areas: Vec<u64> = serde_json::from_slice(&std::fs::read(out.join(AREAS_FILE))?)?;
    // object-free frames stand in for an inpainting model
    let plate = render(&empty_scene(&spec), &RenderConfig { frame_count: 1, ..cfg })?;
    let fills: BTreeMap<_, _> = plate.views.iter().map(|v| (v.camera.view_id.clone(), v.rgb[0].clone())).collect();
    let inputs = ConditionInputs {
        masks: Some(read_masks_file(&out.join(MASKS_FILE))?),
        embeddings: Some(read_embeddings_file(&out.join(EMBEDDINGS_FILE))?),
        areas: Some(areas.clone()),
        fills,
    };

    let built = build_triplet(&pack, KeyframePolicy::Content, &inputs)?;
    let path = built.write(&out)?;
    let t = &built.triplet;
    validate_triplet(t, &Pack::read(&out)?, &out)?;

    println!("head-view object area per frame: {areas:?}");
    println!("object frame {} (largest), background frame {} (smallest)", t.object_frame, t.background_frame);
    for g in &t.geometry {
        println!("geometry   {:<12} {} + {}", g.view_id, g.depth_metric_m, g.normal_cam);
    }
    for bg in &t.appearance.backgrounds {
        println!("background {:<12} {} inpainted: {}", bg.view_id, bg.image, bg.inpainted);
    }
    for o in &t.appearance.objects {
        let dim = o.embedding.as_ref().map_or(0, |e| e.dim);
        println!("object     {:<12} bbox {:?} crop {} embedding dim {dim}", o.object_id, o.bbox, o.crop_path);
    }
    println!("wrote {}", path.display());
    Ok(())
}
