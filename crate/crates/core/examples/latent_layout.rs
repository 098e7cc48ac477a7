//! Lays three views side by side, patch-encodes each stream kind and
//! stacks the conditioning latents along the channel axis.
//!
//! cargo run --example latent_layout

use geocond::layout::{
    assemble_condition_latent, concat_views, pack_latents, unpack_latents, BlockTag, LatentGrid, MultiViewClip,
    PatchEncoder,
};
use geocond::pack::StreamKind;
use geocond::rng::Rng;
use geocond::synth::{render, RenderConfig, SceneSpec};

fn main() -> geocond::Result<()> {
    let cfg = RenderConfig { width: 320, height: 192, frame_count: 4, ..RenderConfig::default() };
    let pack = render(&SceneSpec::default_tabletop(), &cfg)?.to_pack()?;
    let enc = PatchEncoder::new(8)?;

    let wide = |kind| -> geocond::Result<_> { concat_views(&MultiViewClip::from_pack(&pack, kind)?) };
    let rgb = wide(StreamKind::Rgb)?;
    for span in &rgb.spans {
        println!("{:<12} {:?} columns {}..{}", span.view_id, span.role, span.offset, span.offset + span.width);
    }

    let depth = enc.encode(&wide(StreamKind::DepthMetricM)?.frames, BlockTag::DepthLatent)?;
    let normal = enc.encode(&wide(StreamKind::NormalCam)?.frames, BlockTag::NormalLatent)?;
    let background = enc.encode(&rgb.frames[..1], BlockTag::BackgroundLatent)?;
    let mut rng = Rng::new(0);
    let len = depth.frames() * 16 * depth.height() * depth.width();
    let noise_data = rng.normal_vec(len, 1.0).into_iter().map(|v| v as f32).collect();
    let noise = LatentGrid::tagged(depth.frames(), 16, depth.height(), depth.width(), noise_data, BlockTag::Noise)?;

    let latent = assemble_condition_latent(&noise, &depth, &normal, &background)?;
    println!(
        "\ncondition latent: {} frames x {} channels x {}x{}",
        latent.frames(),
        latent.channels(),
        latent.height(),
        latent.width()
    );
    for b in latent.blocks() {
        println!("  {:<18} channels {:>3}..{:<3}", format!("{:?}", b.tag), b.start, b.start + b.len);
    }

    let (latents, sidecar) = pack_latents(&pack, enc)?;
    let restored = unpack_latents(&latents, &sidecar)?;
    let same = restored.streams.iter().all(|(name, frames)| pack.frames(name) == Some(frames.as_slice()));
    println!("\n{} latent streams; unpack restores every source stream: {same}", latents.manifest.streams.len());
    Ok(())
}
