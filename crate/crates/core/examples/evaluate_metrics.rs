//! Scores a degraded copy of a rendered clip against its ground truth:
//! depth errors after alignment, normal angles, cross-view matches and
//! embedding similarities.
//!
//! cargo run --example evaluate_metrics

use geocond::conditions::read_embeddings_file;
use geocond::geometry::normals_from_depth;
use geocond::metrics::{evaluate, BlockMatchConfig, EvalOptions, DEFAULT_SCORE_THRESHOLD};
use geocond::pack::{stream_name, StreamKind};
use geocond::rng::Rng;
use geocond::synth::{render, write_perception_sidecars, RenderConfig, SceneSpec, EVAL_EMBEDDINGS_FILE};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = SceneSpec::default_tabletop();
    let scene = render(&spec, &RenderConfig { frame_count: 3, ..RenderConfig::default() })?;
    let gt = scene.to_pack()?;

    // prediction: depth off by an affine map plus 0.5 mm noise, normals
    // re-estimated from that depth
    let mut pred = gt.clone();
    let mut rng = Rng::new(2);
    for view in &scene.views {
        let id = &view.camera.view_id;
        let noisy: Vec<_> = view.depth.iter().map(|d| d.map(|z| 1.3 * (z + rng.normal(0.0, 0.0005)) - 0.1)).collect();
        let normals = noisy
            .iter()
            .map(|d| normals_from_depth(d, &view.camera.descriptor(), &d.valid_mask(1e-4)).map(|n| n.to_raster()))
            .collect::<geocond::Result<Vec<_>>>()?;
        let depth = noisy.iter().map(|d| d.to_f32_raster()).collect();
        pred.put_stream(&stream_name(id, StreamKind::DepthMetricM), id, StreamKind::DepthMetricM, depth)?;
        pred.put_stream(&stream_name(id, StreamKind::NormalCam), id, StreamKind::NormalCam, normals)?;
    }

    let dir = std::env::temp_dir().join("geocond-eval");
    write_perception_sidecars(&scene, &spec, &dir)?;
    let opts = EvalOptions {
        score_threshold: DEFAULT_SCORE_THRESHOLD,
        block_match: Some(BlockMatchConfig::default()),
        embeddings: Some(read_embeddings_file(&dir.join(EVAL_EMBEDDINGS_FILE))?.vectors),
        ..EvalOptions::default()
    };
    let report = evaluate(&pred, &gt, &opts)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
