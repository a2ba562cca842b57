//! Generates a few synthetic clips, writes them to disk and reads them back.
//!
//! `cargo run --release --example generate_clips -- [out_dir]`

use std::path::PathBuf;

use dv4d::harness::{load_clips, write_clip_set, write_png};
use dv4d::synth::{generate_clip, SceneSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("dv4d_clips"));

    let clips = (0..3)
        .map(|seed| generate_clip(&SceneSpec::random(seed).with_resolution(48, 32), seed))
        .collect::<Result<Vec<_>, _>>()?;
    write_clip_set(&clips, &out)?;

    let back = load_clips(&out)?;
    assert_eq!(back, clips);
    for c in &back {
        let f = c.frame(0, 0);
        let valid = f.valid.iter().filter(|&&v| v).count();
        let moving = f.dynamic.iter().filter(|&&d| d).count();
        println!(
            "seed {}: {} views x {} frames, {}x{}, valid {valid}/{} dynamic {moving}",
            c.seed,
            c.views,
            c.frames,
            c.width,
            c.height,
            c.pixels()
        );
    }
    write_png(&back[0].frame(0, 0).image, &out.join("clip_0000_v0_t0.png"))?;
    println!("wrote {}", out.display());
    Ok(())
}
