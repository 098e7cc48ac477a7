//! The full command-line pipeline run in-process: synthesize observations,
//! align depth, estimate normals, build conditions and evaluate.
//!
//! cargo run --example pipeline -- [work_dir]

use std::path::PathBuf;

use geocond::cli::dispatch;

fn step(args: &[&str]) {
    let code = dispatch(["geocond", "--seed", "0"].iter().chain(args));
    if code != 0 {
        eprintln!("{} exited with {code}", args[0]);
        std::process::exit(code);
    }
}

fn main() {
    let root: PathBuf =
        std::env::args().nth(1).map(Into::into).unwrap_or_else(|| std::env::temp_dir().join("geocond-pipeline"));
    let obs = root.join("obs");
    let gt = root.join("gt");
    let path = |p: &PathBuf, name: &str| p.join(name).to_string_lossy().into_owned();
    let (obs_s, gt_s) = (obs.to_string_lossy().into_owned(), gt.to_string_lossy().into_owned());
    let report = path(&root, "report.json");
    std::fs::create_dir_all(&root).expect("work dir");
    let corrupt = path(&root, "corrupt.json");
    std::fs::write(&corrupt, "{}").expect("corruption spec");

    step(&["synth", "--res", "320x192", "--frames", "10", "--out", &obs_s, "--corrupt", &corrupt, "--gt-out", &gt_s]);
    step(&["align-depth", "--pack", &obs_s]);
    step(&["normals", "--pack", &obs_s]);
    step(&[
        "build-conditions",
        "--pack",
        &obs_s,
        "--policy",
        "content",
        "--masks",
        &path(&obs, "masks.json"),
        "--embeddings",
        &path(&obs, "embeddings.json"),
        "--areas",
        &path(&obs, "areas.json"),
        "--inpaint",
        &path(&obs, "inpaint.json"),
    ]);
    step(&[
        "eval",
        "--pack-pred",
        &obs_s,
        "--pack-gt",
        &gt_s,
        "--embeddings",
        &path(&obs, "eval_embeddings.json"),
        "--out",
        &report,
    ]);
    println!("{}", std::fs::read_to_string(&report).expect("report"));
}
